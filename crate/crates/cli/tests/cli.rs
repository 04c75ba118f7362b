use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ddsde_cli::manifest::RunManifest;
use ddsde_core::drift::CATALOG;
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_ddsde"));
    c.env_remove("DDSDE_THREADS");
    c
}

fn shipped(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn ddsde(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &TempDir, name: &str, text: &str) -> PathBuf {
    let p = dir.path().join(name);
    fs::write(&p, text).unwrap();
    p
}

fn run(config: &Path, out: &Path) -> Output {
    ddsde(&["run", "--config", path(config), "--out", path(out)])
}

const POINT_MASS_BASE: &str = r#"
name = "test"
engines = ["density"]
[drift]
name = "zero"
[initial]
kind = "point_mass"
at = [0.0]
[grid]
lower = [-16.0]
upper = [16.0]
cells = [1024]
[time]
horizon = 1.0
steps = [16]
"#;

fn particle_config(density_source: &str, particles: usize) -> String {
    format!(
        r#"
name = "particles"
seed = 11
engines = ["density", "particles"]
snapshots = [0.5, 1.0]
[drift]
name = "tanh_density"
[initial]
kind = "gaussian"
mean = [0.0]
variance = 0.5
[grid]
lower = [-16.0]
upper = [16.0]
cells = [1024]
[time]
horizon = 1.0
steps = [32]
[particles]
count = {particles}
density_source = "{density_source}"
"#
    )
}

#[test]
fn zero_drift_config_matches_the_heat_kernel() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("zero");
    let o = run(&shipped("zero_drift.toml"), &out);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let file = fs::File::open(out.join("density/N0064_t1.000000.ddg")).unwrap();
    let rho = ddsde_core::grid::read_binary(file).unwrap();
    let spec = rho.spec();
    let l1: f64 = (0..spec.total_cells())
        .map(|i| {
            let x = spec.center_coord(0, i);
            let exact = (-x * x / 4.0).exp() / (4.0 * std::f64::consts::PI).sqrt();
            (rho.values()[i] - exact).abs() * spec.cell_volume()
        })
        .sum();
    assert!(l1 <= 1e-6, "L1 {l1:e}");
}

#[test]
fn unknown_drift_exits_2_and_lists_the_catalog() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "bad.toml", &POINT_MASS_BASE.replace("name = \"zero\"", "name = \"nope\""));
    for o in [ddsde(&["validate", "--config", path(&cfg)]), run(&cfg, &dir.path().join("out"))] {
        assert_eq!(code(&o), 2);
        let err = stderr(&o);
        assert!(err.contains("drift.name"), "{err}");
        for name in CATALOG {
            assert!(err.contains(name), "catalog entry {name} missing from: {err}");
        }
    }
    assert!(!dir.path().join("out").exists());
}

#[test]
fn validation_reports_each_offending_field() {
    let dir = TempDir::new().unwrap();
    let text = POINT_MASS_BASE
        .replace("cells = [1024]", "cells = [1000]")
        .replace("steps = [16]", "steps = [0]")
        .replace("engines = [\"density\"]", "engines = [\"particles\"]");
    let o = ddsde(&["validate", "--config", path(&write_config(&dir, "c.toml", &text))]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    for field in ["grid:", "time:", "particles:"] {
        assert!(err.contains(field), "no message for {field} in {err}");
    }

    let unknown = POINT_MASS_BASE.replace("horizon = 1.0", "horizon = 1.0\nhorizn = 2.0");
    let o = ddsde(&["validate", "--config", path(&write_config(&dir, "u.toml", &unknown))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("horizn"), "{}", stderr(&o));

    let o = ddsde(&["validate", "--config", path(&shipped("tanh_convergence.toml"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn tanh_convergence_writes_a_decreasing_curve_and_reports_its_slope() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("tanh");
    let o = run(&shipped("tanh_convergence.toml"), &out);
    assert_eq!(code(&o), 0, "{}\n{}", stdout(&o), stderr(&o));

    let csv = fs::read_to_string(out.join("diagnostics/l1_convergence.csv")).unwrap();
    let ys: Vec<f64> = csv
        .lines()
        .skip(1)
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    assert_eq!(ys.len(), 6, "{csv}");
    assert!(ys.windows(2).all(|w| w[1] <= 1.1 * w[0]), "{ys:?}");
    assert!(*ys.last().unwrap() <= 1e-2);

    let o = ddsde(&["report", path(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let doc = stdout(&o);
    assert!(doc.contains("Claims: all pass"), "{doc}");
    assert!(doc.contains("l1_convergence: log-log slope"), "{doc}");

    // density engine N = 512 against the FPE reference of an fpe-only run
    let fpe_only = fs::read_to_string(shipped("tanh_convergence.toml"))
        .unwrap()
        .replace("engines = [\"density\", \"fpe\"]", "engines = [\"fpe\"]")
        .split("[[diagnostics]]")
        .next()
        .unwrap()
        .to_string();
    let fpe_out = dir.path().join("fpe");
    let o = run(&write_config(&dir, "fpe.toml", &fpe_only), &fpe_out);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = ddsde(&["compare", path(&out), path(&fpe_out), "--metric", "l1"]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
}

#[test]
fn a_run_compared_with_itself_is_zero() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("z");
    let cfg = write_config(&dir, "z.toml", &format!("snapshots = [0.25, 0.5, 0.75, 1.0]\n{POINT_MASS_BASE}"));
    assert_eq!(code(&run(&cfg, &out)), 0);
    for metric in ["l1", "sup"] {
        let o = ddsde(&["compare", path(&out), path(&out), "--metric", metric, "--tolerance", "0"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let text = stdout(&o);
        assert_eq!(text.lines().filter(|l| l.starts_with("t=")).count(), 4);
        assert!(text.lines().filter(|l| l.starts_with("t=")).all(|l| l.ends_with("=0")), "{text}");
    }
}

#[test]
fn comparing_different_domains_is_an_error() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(code(&run(&write_config(&dir, "a.toml", POINT_MASS_BASE), &a)), 0);
    let wider = POINT_MASS_BASE.replace("[-16.0]", "[-12.0]").replace("[16.0]", "[20.0]");
    assert_eq!(code(&run(&write_config(&dir, "b.toml", &wider), &b)), 0);
    let o = ddsde(&["compare", path(&a), path(&b)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("incompatible"), "{}", stderr(&o));
}

#[test]
fn coupled_particles_agree_with_the_density_engine() {
    let dir = TempDir::new().unwrap();
    let dens = dir.path().join("dens");
    let parts = dir.path().join("parts");
    let density_only = particle_config("coupled", 100_000).replace("engines = [\"density\", \"particles\"]", "engines = [\"density\"]");
    assert_eq!(code(&run(&write_config(&dir, "d.toml", &density_only), &dens)), 0);
    let particles_only = particle_config("coupled", 100_000).replace("engines = [\"density\", \"particles\"]", "engines = [\"particles\"]");
    let o = run(&write_config(&dir, "p.toml", &particles_only), &parts);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    // KDE + Monte Carlo floor at M = 1e5
    let o = ddsde(&["compare", path(&dens), path(&parts), "--metric", "l1", "--tolerance", "0.05"]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
}

fn checksums(dir: &Path) -> Vec<(String, String)> {
    let m = RunManifest::load_verified(dir).unwrap();
    m.artifacts.into_iter().map(|a| (a.path, a.sha256)).collect()
}

#[test]
fn reruns_reproduce_every_checksum_across_thread_counts() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "p.toml", &particle_config("kde", 5_000));
    let mut sums = vec![];
    for threads in ["1", "4"] {
        let out = dir.path().join(format!("t{threads}"));
        let o = bin()
            .args(["run", "--config", path(&cfg), "--out", path(&out)])
            .env("DDSDE_THREADS", threads)
            .output()
            .unwrap();
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        sums.push(checksums(&out));
    }
    assert_eq!(sums[0], sums[1]);
    assert!(sums[0].iter().any(|(p, _)| p.ends_with(".ddp")));

    let out = dir.path().join("reseeded");
    let o = ddsde(&["run", "--config", path(&cfg), "--out", path(&out), "--seed", "12", "--density-source", "coupled"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let stored = fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(stored.contains("seed = 12") && stored.contains("density_source = \"coupled\""), "{stored}");
    let reseeded = checksums(&out);
    let ensemble = |s: &[(String, String)]| s.iter().find(|(p, _)| p.ends_with(".ddp")).cloned();
    assert_ne!(ensemble(&reseeded), ensemble(&sums[0]));
}

#[test]
fn bad_thread_setting_is_rejected() {
    let o = bin()
        .args(["validate", "--config", path(&shipped("zero_drift.toml"))])
        .env("DDSDE_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("DDSDE_THREADS"));
}

#[test]
fn failed_certificate_exits_1_and_is_flagged_in_the_report() {
    let dir = TempDir::new().unwrap();
    // lambda = 1 cannot dominate a strong drift uniformly in N
    let text = POINT_MASS_BASE
        .replace("name = \"zero\"", "name = \"constant\"\nparams = { c = 5.0 }")
        .replace("steps = [16]", "steps = [2, 4, 8, 16]")
        .replace("cells = [1024]", "cells = [2048]")
        + "[[diagnostics]]\nkind = \"domination\"\nlambda = 1.0\ntimes = [0.5, 1.0]\n";
    let out = dir.path().join("bad");
    let o = run(&write_config(&dir, "bad.toml", &text), &out);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(stderr(&o).contains("failed certificates: domination"));

    let o = ddsde(&["report", path(&out)]);
    assert_eq!(code(&o), 0);
    let doc = stdout(&o);
    assert!(doc.contains("FAIL (N="), "{doc}");
    assert!(doc.contains("**domination failed**, offending N ="), "{doc}");
}

#[test]
fn report_detects_tampered_artifacts() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("z");
    assert_eq!(code(&run(&write_config(&dir, "z.toml", POINT_MASS_BASE), &out)), 0);
    let target = out.join("density/N0016_t1.000000.ddg");
    let mut bytes = fs::read(&target).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    fs::write(&target, bytes).unwrap();
    let o = ddsde(&["report", path(&out)]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    assert!(err.contains("checksum mismatch") && err.contains("N0016_t1.000000.ddg"), "{err}");

    fs::remove_file(out.join("manifest.json")).unwrap();
    let o = ddsde(&["report", path(&out)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("manifest.json"));
}

#[test]
fn manifest_lists_every_written_file() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("p");
    let mut text = particle_config("kde", 2_000);
    text.push_str("[[diagnostics]]\nkind = \"engine_agreement\"\ntolerance = 1.0\n");
    assert_eq!(code(&run(&write_config(&dir, "p.toml", &text), &out)), 0);
    let listed: Vec<String> = checksums(&out).into_iter().map(|(p, _)| p).collect();
    let mut on_disk = vec![];
    let mut stack = vec![out.clone()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                on_disk.push(p.strip_prefix(&out).unwrap().to_str().unwrap().to_string());
            }
        }
    }
    on_disk.retain(|p| p != "manifest.json");
    on_disk.sort();
    assert_eq!(listed, on_disk);
    let m = RunManifest::load_verified(&out).unwrap();
    assert!(m.engines.iter().any(|e| e.max_clipped_mass.is_some()));
}
