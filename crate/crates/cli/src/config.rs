//! Benchmark configuration files.

use std::path::{Path, PathBuf};

use cardiorom::fom::{build_fom, FullOrderSystem, Parameter, StimulusProtocol};
use cardiorom::geometry::{assemble_operators, build_block_mesh, AssembledOperators};
use cardiorom::greedy::{GreedyConfig, ParameterBox, TrainingSets};
use cardiorom::mtx::{load_operators, OperatorFiles};
use cardiorom::reaction::ApParameters;
use cardiorom::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Drives the train/test split and the first greedy parameter.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub geometry: GeometryConfig,
    #[serde(default)]
    pub physics: PhysicsConfig,
    pub time: TimeConfig,
    #[serde(default)]
    pub protocol: StimulusProtocol,
    pub parameters: ParameterConfig,
    #[serde(default)]
    pub greedy: GreedyConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum GeometryConfig {
    /// Structured brick mesh with `elements` per axis spanning `extents` [mm].
    Block { elements: [usize; 3], extents: [f64; 3] },
    /// Operators assembled elsewhere, stored as `mass.mtx`, `stiffness.mtx`,
    /// `input.vec`, `output.vec` and one `<name>.idx` per node set.
    External { dir: PathBuf, node_sets: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhysicsConfig {
    /// Isotropic conductivity [mm^2/ms].
    pub d_iso: f64,
    pub flux_direction: [f64; 3],
    pub aliev_panfilov: ApParameters,
}

impl Default for PhysicsConfig {
    fn default() -> Self {
        Self {
            d_iso: 1.0,
            flux_direction: [1.0, 0.0, 0.0],
            aliev_panfilov: ApParameters::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    /// Step size [ms].
    pub dt: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterConfig {
    pub gamma: [f64; 2],
    #[serde(default)]
    pub t_s: [f64; 2],
    /// Grid points along gamma and t_s.
    pub samples: [usize; 2],
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    /// Share of the training set in the initial coarse set (adaptive variant).
    #[serde(default = "default_coarse_fraction")]
    pub coarse_fraction: f64,
}

fn default_train_fraction() -> f64 {
    0.8
}

fn default_coarse_fraction() -> f64 {
    0.3
}

fn config_error(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl RunConfig {
    /// Reads, checks and resolves a configuration file. Relative paths in
    /// the file are taken relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let raw: toml::Table = text.parse().map_err(config_error)?;
        if raw
            .get("greedy")
            .and_then(|g| g.as_table())
            .is_some_and(|g| g.contains_key("seed"))
        {
            return Err(Error::Config(
                "set the seed at the top level, not under [greedy]".into(),
            ));
        }
        let mut cfg: Self = toml::from_str(text).map_err(config_error)?;
        cfg.greedy.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        if self.output_dir.is_relative() {
            self.output_dir = base.join(&self.output_dir);
        }
        if let GeometryConfig::External { dir, .. } = &mut self.geometry {
            if dir.is_relative() {
                *dir = base.join(&*dir);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        match &self.geometry {
            GeometryConfig::Block { elements, extents } => {
                if elements.contains(&0) {
                    return fail(format!("geometry.elements must be positive, got {elements:?}"));
                }
                if extents.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
                    return fail(format!("geometry.extents must be positive, got {extents:?}"));
                }
            }
            GeometryConfig::External { node_sets, .. } => {
                if node_sets.iter().any(|n| n.is_empty()) {
                    return fail("geometry.node_sets contains an empty name".into());
                }
            }
        }
        let p = &self.physics;
        if !(p.d_iso > 0.0 && p.d_iso.is_finite()) {
            return fail(format!("physics.d_iso must be positive, got {}", p.d_iso));
        }
        let norm = p.flux_direction.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > 1e-9 {
            return fail(format!("physics.flux_direction must have unit length, got {norm}"));
        }
        p.aliev_panfilov.validate().map_err(config_error)?;
        if !(self.time.dt > 0.0 && self.time.dt.is_finite()) {
            return fail(format!("time.dt must be positive, got {}", self.time.dt));
        }
        self.protocol.validate().map_err(config_error)?;
        let s = &self.parameters;
        self.parameter_box().validate().map_err(config_error)?;
        if s.samples.contains(&0) {
            return fail(format!("parameters.samples must be positive, got {:?}", s.samples));
        }
        if !(s.train_fraction > 0.0 && s.train_fraction <= 1.0) {
            return fail(format!(
                "parameters.train_fraction must lie in (0, 1], got {}",
                s.train_fraction
            ));
        }
        if !(s.coarse_fraction > 0.0 && s.coarse_fraction <= 1.0) {
            return fail(format!(
                "parameters.coarse_fraction must lie in (0, 1], got {}",
                s.coarse_fraction
            ));
        }
        self.greedy.validate().map_err(config_error)?;
        Ok(())
    }

    /// The configuration as it will be run, in the input format.
    pub fn to_toml(&self) -> Result<String> {
        let mut table = toml::Table::try_from(self).map_err(config_error)?;
        if let Some(g) = table.get_mut("greedy").and_then(|g| g.as_table_mut()) {
            g.remove("seed");
        }
        toml::to_string_pretty(&table).map_err(config_error)
    }

    pub fn operators(&self) -> Result<AssembledOperators> {
        match &self.geometry {
            GeometryConfig::Block { elements, extents } => {
                let mesh = build_block_mesh(elements[0], elements[1], elements[2], *extents)?;
                assemble_operators(&mesh, self.physics.d_iso, self.physics.flux_direction)
            }
            GeometryConfig::External { dir, node_sets } => {
                if !dir.is_dir() {
                    return Err(Error::io(
                        dir,
                        std::io::Error::new(std::io::ErrorKind::NotFound, "operator directory not found"),
                    ));
                }
                let names: Vec<&str> = node_sets.iter().map(String::as_str).collect();
                load_operators(&OperatorFiles::in_dir(dir, &names))
            }
        }
    }

    pub fn system(&self, ops: &AssembledOperators) -> Result<FullOrderSystem> {
        build_fom(
            ops,
            &self.physics.aliev_panfilov,
            self.time.dt,
            self.time.steps,
            &self.protocol,
        )
    }

    pub fn parameter_box(&self) -> ParameterBox {
        ParameterBox {
            gamma: self.parameters.gamma,
            t_s: self.parameters.t_s,
        }
    }

    pub fn training_sets(&self) -> Result<TrainingSets> {
        let b = self.parameter_box();
        let [ng, nt] = self.parameters.samples;
        TrainingSets::split(
            b,
            &b.grid(ng, nt),
            self.parameters.train_fraction,
            self.parameters.coarse_fraction,
            self.seed,
        )
    }

    /// Parameter used when a command is not given one: the box center.
    pub fn default_parameter(&self) -> Parameter {
        let mid = |r: [f64; 2]| 0.5 * (r[0] + r[1]);
        Parameter::new(mid(self.parameters.gamma), mid(self.parameters.t_s))
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.greedy.seed = seed;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[geometry]
kind = "block"
elements = [2, 1, 1]
extents = [2.0, 1.0, 1.0]

[time]
dt = 0.5
steps = 4

[parameters]
gamma = [0.001, 0.002]
samples = [5, 1]
"#;

    #[test]
    fn minimal_file_gets_defaults() {
        let cfg = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.physics.d_iso, 1.0);
        assert_eq!(cfg.parameters.train_fraction, 0.8);
        assert_eq!(cfg.greedy.tol, 1e-2);
        assert_eq!(cfg.output_dir, PathBuf::from("out"));
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = format!("{MINIMAL}\n[greedy]\ntoll = 1.0\n");
        assert!(matches!(RunConfig::parse(&text), Err(Error::Config(_))));
        let text = MINIMAL.replace("steps = 4", "steps = 4\nstep = 3");
        assert!(matches!(RunConfig::parse(&text), Err(Error::Config(_))));
    }

    #[test]
    fn greedy_seed_must_be_top_level() {
        let text = format!("{MINIMAL}\n[greedy]\nseed = 3\n");
        assert!(matches!(RunConfig::parse(&text), Err(Error::Config(_))));
        let cfg = RunConfig::parse(&format!("seed = 3\n{MINIMAL}")).unwrap();
        assert_eq!(cfg.greedy.seed, 3);
    }

    #[test]
    fn effective_config_reloads() {
        let cfg = RunConfig::parse(&format!("seed = 5\n{MINIMAL}")).unwrap();
        let again = RunConfig::parse(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn bad_values_rejected() {
        for (from, to) in [
            ("dt = 0.5", "dt = 0.0"),
            ("samples = [5, 1]", "samples = [0, 1]"),
            ("elements = [2, 1, 1]", "elements = [2, 0, 1]"),
            ("gamma = [0.001, 0.002]", "gamma = [0.002, 0.001]"),
        ] {
            let text = MINIMAL.replace(from, to);
            assert!(matches!(RunConfig::parse(&text), Err(Error::Config(_))), "{to}");
        }
    }
}
