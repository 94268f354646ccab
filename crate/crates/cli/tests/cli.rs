use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cardiorom_cli::config::RunConfig;
use cardiorom_cli::pipeline::Summary;

fn cardiorom(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cardiorom"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = r#"
seed = 1

[geometry]
kind = "block"
elements = [6, 2, 1]
extents = [6.0, 2.0, 1.0]

[time]
dt = 2.0
steps = 60

[parameters]
gamma = [0.001, 0.01]
samples = [10, 1]

[greedy]
tol = 1e-2
"#;

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn read_rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect()
}

fn summary(dir: &Path) -> Summary {
    Summary::parse(&fs::read_to_string(dir.join("summary.txt")).unwrap())
}

#[test]
fn missing_operator_directory_exits_2_and_names_path() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL.replace(
        "kind = \"block\"\nelements = [6, 2, 1]\nextents = [6.0, 2.0, 1.0]",
        "kind = \"external\"\ndir = \"no-such-operators\"\nnode_sets = [\"left_edge\"]",
    );
    let cfg = write_config(dir.path(), "ext.toml", &text);
    let out = cardiorom(&["fom", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("no-such-operators"), "{}", stderr(&out));
}

#[test]
fn unknown_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "bad.toml",
        &SMALL.replace("steps = 60", "steps = 60\nstpes = 3"),
    );
    let out = cardiorom(&["fom", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("stpes"), "{}", stderr(&out));
}

#[test]
fn zero_steps_gives_single_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &SMALL.replace("steps = 60", "steps = 0"));
    let out = cardiorom(&[
        "fom",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let rows = read_rows(&dir.path().join("o/flux.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][0], "0");
}

#[test]
fn planar_flux_has_interior_peak_then_decays() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/planar-block.toml");
    let out = cardiorom(&[
        "fom",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let y: Vec<f64> = read_rows(&dir.path().join("flux.csv"))
        .iter()
        .map(|r| r[1].parse().unwrap())
        .collect();
    assert_eq!(y.len(), 301);
    let (imax, peak) = y.iter().enumerate().fold(
        (0, 0.0f64),
        |(i, m), (j, &v)| if v.abs() > m { (j, v.abs()) } else { (i, m) },
    );
    assert!(imax > 0 && imax < y.len() - 1);
    // depolarization and repolarization lobes, then a monotone decay
    let tail = &y[y.len() * 4 / 5..];
    assert!(tail.windows(2).all(|w| w[1].abs() <= w[0].abs()));
    assert!(y.last().unwrap().abs() < 1e-3 * peak);
}

#[test]
fn greedy_rom_eval_validate_round() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let out_dir = dir.path().join("run");
    let o = out_dir.to_str().unwrap();
    let c = cfg.to_str().unwrap();

    let g = cardiorom(&["greedy", "--config", c, "--out", o]);
    assert!(g.status.success(), "{}", stderr(&g));
    let s = Summary::parse(&stdout(&g));
    assert_eq!(s.get("converged"), Some("true"));
    assert!(out_dir.join("rom.archive").is_file());
    let history = read_rows(&out_dir.join("history.csv"));
    assert_eq!(history.len().to_string(), s.get("iterations").unwrap());

    let e = cardiorom(&["rom-eval", "--config", c, "--out", o, "--gamma", "0.004"]);
    assert!(e.status.success(), "{}", stderr(&e));
    assert_eq!(read_rows(&out_dir.join("rom_flux.csv")).len(), 61);
    assert!(summary(&out_dir).get("estimate").unwrap().parse::<f64>().unwrap() >= 0.0);

    let v = cardiorom(&["validate", "--config", c, "--out", o]);
    assert!(v.status.success(), "{}", stderr(&v));
    let s = summary(&out_dir);
    assert_eq!(s.get("samples"), Some("2"));
    assert!(s.get("max_relative_error").unwrap().parse::<f64>().unwrap() < 1e-2);
    assert!(s.get("speedup").unwrap().parse::<f64>().unwrap() > 0.0);
}

#[test]
fn non_convergence_is_not_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL.replace("tol = 1e-2", "tol = 1e-12\nmax_iterations = 1");
    let cfg = write_config(dir.path(), "c.toml", &text);
    let out = cardiorom(&[
        "greedy",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let s = summary(&dir.path().join("o"));
    assert_eq!(s.get("converged"), Some("false"));
    assert_eq!(s.get("iterations"), Some("1"));
}

#[test]
fn archive_rejected_on_other_mesh() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let o = dir.path().join("o");
    let g = cardiorom(&[
        "greedy",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        o.to_str().unwrap(),
    ]);
    assert!(g.status.success(), "{}", stderr(&g));
    let other = write_config(dir.path(), "other.toml", &SMALL.replace("[6, 2, 1]", "[7, 2, 1]"));
    let archive = o.join("rom.archive");
    let v = cardiorom(&[
        "validate",
        "--config",
        other.to_str().unwrap(),
        "--archive",
        archive.to_str().unwrap(),
        "--out",
        dir.path().join("v").to_str().unwrap(),
    ]);
    assert_eq!(v.status.code(), Some(2));
    assert!(stderr(&v).contains("operators"), "{}", stderr(&v));
}

#[test]
fn effective_config_reloads_to_same_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), "c.toml", SMALL);
    let o = dir.path().join("o");
    let g = cardiorom(&[
        "greedy",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        o.to_str().unwrap(),
        "--seed",
        "9",
    ]);
    assert!(g.status.success(), "{}", stderr(&g));
    let effective = RunConfig::load(&o.join("effective_config.toml")).unwrap();
    assert_eq!(effective.seed, 9);
    assert_eq!(effective.greedy.seed, 9);
    assert_eq!(effective.output_dir, o);

    let again = dir.path().join("again");
    let g2 = cardiorom(&[
        "greedy",
        "--config",
        o.join("effective_config.toml").to_str().unwrap(),
        "--out",
        again.to_str().unwrap(),
    ]);
    assert!(g2.status.success(), "{}", stderr(&g2));
    let strip = |rows: Vec<Vec<String>>| -> Vec<Vec<String>> {
        rows.into_iter()
            .map(|mut r| {
                r.pop();
                r
            })
            .collect()
    };
    assert_eq!(
        strip(read_rows(&o.join("history.csv"))),
        strip(read_rows(&again.join("history.csv")))
    );
    assert_eq!(
        fs::read(o.join("sets.csv")).unwrap(),
        fs::read(again.join("sets.csv")).unwrap()
    );
}

#[test]
fn assemble_writes_readable_operators() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let o = dir.path().join("o");
    let a = cardiorom(&[
        "assemble",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        o.to_str().unwrap(),
    ]);
    assert!(a.status.success(), "{}", stderr(&a));
    let hash = summary(&o).get("mesh_hash").unwrap().to_string();
    let ext = SMALL.replace(
        "kind = \"block\"\nelements = [6, 2, 1]\nextents = [6.0, 2.0, 1.0]",
        &format!(
            "kind = \"external\"\ndir = \"{}\"\nnode_sets = [\"left_edge\", \"s2_region\"]",
            o.join("operators").display()
        ),
    );
    let ext = RunConfig::parse(&ext).unwrap();
    assert_eq!(ext.operators().unwrap().fingerprint(), hash);
}
