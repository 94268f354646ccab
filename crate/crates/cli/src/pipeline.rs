//! Command implementations. Each writes its files into the configured
//! output directory and returns a key=value summary.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use cardiorom::estimator::{error_estimate, relative_error, EstimatorState};
use cardiorom::fom::{FullOrderSystem, Parameter, SolveOptions};
use cardiorom::greedy::{run_apodg_ei, run_apodg_ei_adapt, GreedyHistory, TrainingSets};
use cardiorom::mtx::{save_operators, OperatorFiles};
use cardiorom::rom::{ReducedModel, RomSolveOptions};
use cardiorom::{Error, Result};

use crate::archive::RomArchive;
use crate::config::RunConfig;

pub const ARCHIVE_FILE: &str = "rom.archive";
pub const SUMMARY_FILE: &str = "summary.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Algorithm {
    /// Greedy over the full training set.
    Alg1,
    /// Greedy over an adaptively grown coarse subset.
    Alg2,
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Alg1 => "alg1",
            Algorithm::Alg2 => "alg2",
        }
    }
}

/// Ordered `key=value` lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Summary {
    entries: Vec<(String, String)>,
}

impl Summary {
    pub fn push(&mut self, key: &str, value: impl fmt::Display) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn parse(text: &str) -> Self {
        let entries = text
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
            .collect();
        Self { entries }
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(SUMMARY_FILE);
        fs::write(&path, self.to_string()).map_err(|e| Error::io(path, e))
    }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

fn prepare(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_csv<I>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let io = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::io(path, e),
        other => Error::io(path, std::io::Error::other(format!("{other:?}"))),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(header).map_err(io)?;
    for row in rows {
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn flux_rows(dt: f64, y: &[f64]) -> Vec<Vec<String>> {
    y.iter()
        .enumerate()
        .map(|(k, v)| vec![(k as f64 * dt).to_string(), v.to_string()])
        .collect()
}

/// Assembles (or ingests) the operators and writes them in exchange format.
pub fn assemble(cfg: &RunConfig) -> Result<Summary> {
    let ops = cfg.operators()?;
    let dir = cfg.output_dir.join("operators");
    prepare(&dir)?;
    let names: Vec<&str> = ops.node_sets.keys().map(String::as_str).collect();
    save_operators(&ops, &OperatorFiles::in_dir(&dir, &names))?;
    let mut s = Summary::default();
    s.push("command", "assemble");
    s.push("nodes", ops.dim());
    s.push("mass_nnz", ops.mass.nnz());
    s.push("stiffness_nnz", ops.stiffness.nnz());
    s.push("node_sets", names.join(","));
    s.push("mesh_hash", ops.fingerprint());
    s.push("operator_dir", dir.display());
    s.write(&cfg.output_dir)?;
    Ok(s)
}

/// Full-order solve at `p`; writes `flux.csv` and, on request, `states.csv`.
pub fn fom(cfg: &RunConfig, p: Option<Parameter>, save_states: bool) -> Result<Summary> {
    let ops = cfg.operators()?;
    let sys = cfg.system(&ops)?;
    let p = p.unwrap_or_else(|| cfg.default_parameter());
    prepare(&cfg.output_dir)?;
    let t0 = Instant::now();
    let opts = SolveOptions {
        keep_states: save_states,
        keep_nonlinear: false,
    };
    let traj = sys.solve(&p, opts)?;
    let seconds = t0.elapsed().as_secs_f64();
    write_csv(
        &cfg.output_dir.join("flux.csv"),
        &["t", "y"],
        flux_rows(sys.dt, &traj.outputs),
    )?;
    if let Some(states) = &traj.states {
        let header: Vec<String> = std::iter::once("t".to_string())
            .chain((0..sys.n).map(|i| format!("phi_{i}")))
            .chain((0..sys.n).map(|i| format!("r_{i}")))
            .collect();
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        let rows = states.column_iter().enumerate().map(|(k, c)| {
            std::iter::once((k as f64 * sys.dt).to_string())
                .chain(c.iter().map(|v| v.to_string()))
                .collect()
        });
        write_csv(&cfg.output_dir.join("states.csv"), &header, rows)?;
    }
    let peak = traj.outputs.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut s = Summary::default();
    s.push("command", "fom");
    s.push("gamma", p.gamma);
    s.push("t_s", p.t_s);
    s.push("steps", sys.n_steps);
    s.push("dimension", sys.state_dim());
    s.push("max_abs_flux", peak);
    s.push("seconds", seconds);
    s.write(&cfg.output_dir)?;
    Ok(s)
}

/// Runs a greedy algorithm and stores the model, the history and the
/// training sets.
pub fn greedy(cfg: &RunConfig, algorithm: Algorithm) -> Result<Summary> {
    let ops = cfg.operators()?;
    let sys = cfg.system(&ops)?;
    let sets = cfg.training_sets()?;
    prepare(&cfg.output_dir)?;
    let (model, history) = match algorithm {
        Algorithm::Alg1 => run_apodg_ei(&sys, &sets.train, &cfg.greedy)?,
        Algorithm::Alg2 => run_apodg_ei_adapt(&sys, &sets, &cfg.greedy)?,
    };
    let last = history.records.last().expect("greedy ran at least once");
    let archive = RomArchive {
        mesh_hash: ops.fingerprint(),
        dt: sys.dt,
        n_steps: sys.n_steps,
        tol: cfg.greedy.tol,
        algorithm: algorithm.name().to_string(),
        converged: history.converged,
        iterations: history.records.len(),
        seed: cfg.seed,
        estimator: history.estimator_state().expect("at least one record"),
        model,
    };
    let archive_path = cfg.output_dir.join(ARCHIVE_FILE);
    archive.save(&archive_path)?;
    write_history(&cfg.output_dir.join("history.csv"), &history)?;
    write_sets(&cfg.output_dir.join("sets.csv"), &sets)?;
    let effective = cfg.output_dir.join("effective_config.toml");
    fs::write(&effective, cfg.to_toml()?).map_err(|e| Error::io(&effective, e))?;

    let mut s = Summary::default();
    s.push("command", "greedy");
    s.push("algorithm", algorithm.name());
    s.push("seed", cfg.seed);
    s.push("converged", history.converged);
    s.push("iterations", history.records.len());
    s.push("tol", cfg.greedy.tol);
    s.push("final_epsilon", last.epsilon);
    s.push("final_epsilon_scaled", last.epsilon_scaled);
    s.push("n_phi", last.n_phi);
    s.push("n_r", last.n_r);
    s.push("n", last.n_phi + last.n_r);
    s.push("n_ei_phi", last.n_ei_phi);
    s.push("n_ei_r", last.n_ei_r);
    s.push("n_ei", last.n_ei_phi + last.n_ei_r);
    s.push("coarse_size_first", history.records[0].evaluated.len());
    s.push("coarse_size_last", last.coarse_size);
    s.push("greedy_seconds", history.seconds);
    s.push("archive", archive_path.display());
    s.write(&cfg.output_dir)?;
    Ok(s)
}

fn write_history(path: &Path, h: &GreedyHistory) -> Result<()> {
    let header = [
        "iteration",
        "snapshot_gamma",
        "snapshot_t_s",
        "selected_gamma",
        "selected_t_s",
        "epsilon",
        "delta_rb",
        "delta_ei",
        "epsilon_scaled",
        "n_phi",
        "n_r",
        "n_ei_phi",
        "n_ei_r",
        "rho_bar",
        "coarse_size",
        "seconds",
    ];
    let rows = h.records.iter().map(|r| {
        vec![
            r.iteration.to_string(),
            r.snapshot_parameter.gamma.to_string(),
            r.snapshot_parameter.t_s.to_string(),
            r.selected.gamma.to_string(),
            r.selected.t_s.to_string(),
            r.epsilon.to_string(),
            r.delta_rb.to_string(),
            r.delta_ei.to_string(),
            r.epsilon_scaled.to_string(),
            r.n_phi.to_string(),
            r.n_r.to_string(),
            r.n_ei_phi.to_string(),
            r.n_ei_r.to_string(),
            r.rho_bar.to_string(),
            r.coarse_size.to_string(),
            r.seconds.to_string(),
        ]
    });
    write_csv(path, &header, rows)
}

fn write_sets(path: &Path, sets: &TrainingSets) -> Result<()> {
    let rows = [
        ("train", &sets.train),
        ("test", &sets.test),
        ("coarse", &sets.coarse),
        ("fine", &sets.fine),
    ]
    .into_iter()
    .flat_map(|(role, ps)| {
        ps.iter()
            .map(move |p| vec![role.to_string(), p.gamma.to_string(), p.t_s.to_string()])
    });
    write_csv(path, &["set", "gamma", "t_s"], rows)
}

fn archive_path(cfg: &RunConfig, archive: Option<&Path>) -> PathBuf {
    archive
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.output_dir.join(ARCHIVE_FILE))
}

fn load_checked(cfg: &RunConfig, archive: Option<&Path>) -> Result<(RomArchive, FullOrderSystem)> {
    let a = RomArchive::load(&archive_path(cfg, archive))?;
    let ops = cfg.operators()?;
    a.check_mesh(&ops.fingerprint())?;
    let sys = cfg.system(&ops)?;
    if sys.dt != a.dt || sys.n_steps != a.n_steps {
        return Err(Error::Validation(format!(
            "archive uses dt = {} and {} steps, the configuration dt = {} and {} steps",
            a.dt, a.n_steps, sys.dt, sys.n_steps
        )));
    }
    Ok((a, sys))
}

/// Reduced solve at `p` with its error estimate; writes `rom_flux.csv`.
pub fn rom_eval(cfg: &RunConfig, archive: Option<&Path>, p: Option<Parameter>) -> Result<Summary> {
    let (a, _) = load_checked(cfg, archive)?;
    let p = p.unwrap_or_else(|| cfg.default_parameter());
    prepare(&cfg.output_dir)?;
    let t0 = Instant::now();
    let traj = a.model.solve(&p, RomSolveOptions::OUTPUT_ONLY)?;
    let seconds = t0.elapsed().as_secs_f64();
    let est = error_estimate(&a.model, &p, &a.estimator)?;
    write_csv(
        &cfg.output_dir.join("rom_flux.csv"),
        &["t", "y"],
        flux_rows(a.dt, &traj.outputs),
    )?;
    let mut s = Summary::default();
    s.push("command", "rom-eval");
    s.push("gamma", p.gamma);
    s.push("t_s", p.t_s);
    s.push("estimate", est.mean);
    s.push("seconds", seconds);
    s.write(&cfg.output_dir)?;
    Ok(s)
}

/// Accuracy and timing of a reduced model at one parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationRow {
    pub parameter: Parameter,
    pub relative_error: f64,
    pub estimate: f64,
    pub fom_seconds: f64,
    pub rom_seconds: f64,
}

/// Compares the reduced model against full solves over `params`.
pub fn validate_model(
    sys: &FullOrderSystem,
    model: &ReducedModel,
    state: &EstimatorState,
    params: &[Parameter],
) -> Result<Vec<ValidationRow>> {
    params
        .iter()
        .map(|p| {
            let t0 = Instant::now();
            let y = sys.solve(p, SolveOptions::OUTPUT_ONLY)?.outputs;
            let fom_seconds = t0.elapsed().as_secs_f64();
            let t0 = Instant::now();
            let y_hat = model.solve(p, RomSolveOptions::OUTPUT_ONLY)?.outputs;
            let rom_seconds = t0.elapsed().as_secs_f64();
            let estimate = error_estimate(model, p, state)?.mean;
            Ok(ValidationRow {
                parameter: *p,
                relative_error: relative_error(&y, &y_hat)?,
                estimate,
                fom_seconds,
                rom_seconds,
            })
        })
        .collect()
}

/// Validates the stored model on the configuration's test set.
pub fn validate(cfg: &RunConfig, archive: Option<&Path>) -> Result<Summary> {
    let (a, sys) = load_checked(cfg, archive)?;
    let sets = cfg.training_sets()?;
    if sets.test.is_empty() {
        return Err(Error::Config("the configuration yields an empty test set".into()));
    }
    prepare(&cfg.output_dir)?;
    let rows = validate_model(&sys, &a.model, &a.estimator, &sets.test)?;
    let header = [
        "gamma",
        "t_s",
        "relative_error",
        "estimate",
        "fom_seconds",
        "rom_seconds",
        "speedup",
    ];
    write_csv(
        &cfg.output_dir.join("validation.csv"),
        &header,
        rows.iter().map(|r| {
            vec![
                r.parameter.gamma.to_string(),
                r.parameter.t_s.to_string(),
                r.relative_error.to_string(),
                r.estimate.to_string(),
                r.fom_seconds.to_string(),
                r.rom_seconds.to_string(),
                (r.fom_seconds / r.rom_seconds).to_string(),
            ]
        }),
    )?;
    let worst = rows.iter().map(|r| r.relative_error).fold(0.0f64, f64::max);
    let fom_total: f64 = rows.iter().map(|r| r.fom_seconds).sum();
    let rom_total: f64 = rows.iter().map(|r| r.rom_seconds).sum();
    let mut s = Summary::default();
    s.push("command", "validate");
    s.push("samples", rows.len());
    s.push("max_relative_error", worst);
    s.push("tol", a.tol);
    s.push("all_below_tol", rows.iter().all(|r| r.relative_error < a.tol));
    s.push("fom_seconds_per_solve", fom_total / rows.len() as f64);
    s.push("rom_seconds_per_solve", rom_total / rows.len() as f64);
    s.push("speedup", fom_total / rom_total);
    s.write(&cfg.output_dir)?;
    Ok(s)
}
