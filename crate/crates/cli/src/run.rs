//! `run`: engines, diagnostics and artifacts for one config.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use ddsde_core::diagnostics::{
    fit_domination, fit_hoelder, l1_convergence_study, smoothing_check, stability_ratio, BoundCertificate,
    ConvergenceCurve, HoelderWindow, CURVE_FLOOR, CURVE_SLACK, STABILITY_THRESHOLD,
};
use ddsde_core::euler::{self, TimeGrid};
use ddsde_core::fpe::{self, FpeConfig, TestFunctionSet};
use ddsde_core::grid as grid_io;
use ddsde_core::particles::{self, io as particle_io, kde_grid, moment_increment_check, Feedback, KdeSpec, ParticleEnsemble, ParticleRunConfig};
use ddsde_core::GridDensity;

use crate::config::{DensitySource, Diagnostic, Engine, ExperimentConfig, Resolved};
use crate::manifest::{sha256_hex, ArtifactWriter, Claim, EngineSummary, RunManifest, CONFIG_FILE};
use crate::CliError;

type Trajectory = Vec<(f64, GridDensity)>;

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn density_bytes(rho: &GridDensity) -> Vec<u8> {
    let mut buf = Vec::new();
    grid_io::write_binary(rho, &mut buf).expect("writing to memory");
    buf
}

fn at(traj: &[(f64, GridDensity)], t: f64) -> Result<&GridDensity, CliError> {
    traj.iter()
        .find(|(s, _)| (s - t).abs() <= 1e-9 * t.max(1.0))
        .map(|(_, d)| d)
        .ok_or_else(|| CliError::Engine(format!("no density stored at t = {t}")))
}

/// Everything the engines produced, kept for the diagnostics.
#[derive(Default)]
struct Outputs {
    density: BTreeMap<usize, Trajectory>,
    fpe: Option<Trajectory>,
    ensembles: BTreeMap<usize, Vec<ParticleEnsemble>>,
    kde: BTreeMap<usize, Trajectory>,
}

struct Runner<'a> {
    config: &'a ExperimentConfig,
    resolved: Resolved,
    writer: ArtifactWriter,
    engines: Vec<EngineSummary>,
    out: Outputs,
}

fn stem(n: usize, t: f64) -> String {
    format!("N{n:04}_t{t:.6}")
}

impl Runner<'_> {
    fn horizon(&self) -> f64 {
        self.config.time.horizon
    }

    fn run_density(&mut self) -> Result<(), CliError> {
        let r = &self.resolved;
        for &n in &self.config.time.steps {
            let tg = TimeGrid::new(self.config.time.horizon, n)?;
            let traj = euler::run_trajectory(&r.initial, &r.drift, &r.grid, &tg)?;
            for &t in &r.snapshots {
                let rho = &traj.at_step(tg.step_index(t).expect("validated")).expect("stored").density;
                self.writer.write(&format!("density/{}.ddg", stem(n, t)), &density_bytes(rho))?;
            }
            let mut log = String::from("step,time,clipped_mass,mass_error,boundary_mass\n");
            for s in &traj.log {
                log.push_str(&format!(
                    "{},{:e},{:e},{:e},{:e}\n",
                    s.step, s.time, s.clipped_mass, s.mass_error, s.boundary_mass
                ));
            }
            let log_path = self.writer.write(&format!("density/N{n:04}_steps.csv"), log.as_bytes())?;
            self.engines.push(EngineSummary {
                engine: format!("density N={n}"),
                steps: n,
                max_clipped_mass: Some(traj.log.iter().map(|s| s.clipped_mass).fold(0.0, f64::max)),
                cfl_margin: None,
                mass_drift: Some(traj.log.iter().map(|s| s.mass_error.abs()).fold(0.0, f64::max)),
                log: Some(log_path),
            });
            self.out.density.insert(n, traj.snapshots());
        }
        Ok(())
    }

    fn run_fpe(&mut self) -> Result<(), CliError> {
        let r = &self.resolved;
        let grid = r.fpe_grid.clone().expect("validated");
        let cfg = FpeConfig::new(grid, &r.drift, self.config.fpe.as_ref().expect("validated").cfl)?;
        let start = if r.initial.has_atoms() { cfg.atom_start() } else { 0.0 };
        let mut times: Vec<f64> = r.snapshots.iter().copied().filter(|t| *t > start).collect();
        if times.last() != Some(&self.horizon()) {
            times.push(self.horizon());
        }
        let run = fpe::solve(&r.initial, &r.drift, &cfg, &times)?;
        for (t, rho) in &run.snapshots {
            self.writer.write(&format!("fpe/t{t:.6}.ddg"), &density_bytes(rho))?;
        }
        self.engines.push(EngineSummary {
            engine: format!("fpe G={:?}", cfg.grid().cell_counts()),
            steps: run.steps,
            max_clipped_mass: None,
            cfl_margin: Some(cfg.cfl() * cfg.cfl_margin()),
            mass_drift: Some(run.mass_drift),
            log: None,
        });
        self.out.fpe = Some(run.snapshots);
        Ok(())
    }

    fn run_particles(&mut self) -> Result<(), CliError> {
        let r = &self.resolved;
        let pc = self.config.particles.as_ref().expect("validated");
        let feedback = match pc.density_source {
            DensitySource::Kde => Feedback::Kde(KdeSpec::silverman()),
            DensitySource::Coupled => Feedback::Coupled { grid: r.grid.clone() },
        };
        let mut moment_times: Vec<f64> = vec![];
        for d in &self.config.diagnostics {
            if let Diagnostic::Moments { pairs } = d {
                moment_times.extend(pairs.iter().flatten());
            }
        }
        for &n in &self.config.time.steps {
            let tg = TimeGrid::new(self.horizon(), n)?;
            let step = |t: f64| {
                tg.step_index(t)
                    .ok_or_else(|| CliError::Invalid(vec![format!("diagnostics: {t} is not a step time for N = {n}")]))
            };
            let mut store: Vec<usize> = r.snapshots.iter().chain(&moment_times).map(|t| step(*t)).collect::<Result<_, _>>()?;
            store.sort_unstable();
            store.dedup();
            let config = ParticleRunConfig {
                particles: pc.count,
                seed: self.config.seed,
                feedback: feedback.clone(),
                store_steps: store,
            };
            let ensembles = particles::run(&r.initial, &r.drift, &tg, &config)?;
            let mut kde = Vec::new();
            for &t in &r.snapshots {
                let k = step(t)?;
                let e = ensembles.iter().find(|e| e.step() == k).expect("stored");
                let mut buf = Vec::new();
                particle_io::write_snapshot(e, &mut buf)?;
                self.writer.write(&format!("particles/N{n:04}_k{k:05}.ddp"), &buf)?;
                let rho = kde_grid(e, &KdeSpec::silverman(), &r.grid)?;
                self.writer.write(&format!("particles/{}_kde.ddg", stem(n, t)), &density_bytes(&rho))?;
                kde.push((t, rho));
            }
            self.engines.push(EngineSummary {
                engine: format!("particles N={n} M={} {:?}", pc.count, pc.density_source).to_lowercase(),
                steps: n,
                max_clipped_mass: None,
                cfl_margin: None,
                mass_drift: None,
                log: None,
            });
            self.out.ensembles.insert(n, ensembles);
            self.out.kde.insert(n, kde);
        }
        Ok(())
    }

    fn terminal_densities(&self) -> Result<BTreeMap<usize, GridDensity>, CliError> {
        let t = self.horizon();
        self.out
            .density
            .iter()
            .map(|(n, tr)| Ok((*n, at(tr, t)?.clone())))
            .collect()
    }

    fn finest(&self) -> &Trajectory {
        self.out.density.values().next_back().expect("density engine ran")
    }

    fn write_cert(&mut self, name: &str, cert: &BoundCertificate) -> Result<String, CliError> {
        let mut buf = Vec::new();
        cert.write_csv(&mut buf)?;
        self.writer.write(&format!("diagnostics/{name}.csv"), &buf)
    }

    fn write_rows(&mut self, name: &str, header: &str, rows: impl IntoIterator<Item = String>) -> Result<String, CliError> {
        let mut text = format!("{header}\n");
        for r in rows {
            text.push_str(&r);
            text.push('\n');
        }
        self.writer.write(&format!("diagnostics/{name}.csv"), text.as_bytes())
    }

    fn diagnose(&mut self, diag: &Diagnostic) -> Result<Claim, CliError> {
        let t_end = self.horizon();
        let init = self.resolved.initial.clone();
        let drift = self.resolved.drift.clone();
        let mut claim = Claim {
            claim: diag.kind().to_string(),
            statement: statement(diag),
            pass: false,
            detail: String::new(),
            value: None,
            offending_n: None,
            slope: None,
            artifacts: vec![],
        };
        match diag {
            Diagnostic::HeatExact { tolerance } => {
                let exact = GridDensity::from_initial(&init, &self.resolved.grid, t_end)?;
                let mut rows = vec![];
                let mut worst = (0, 0.0f64);
                for (n, rho) in self.terminal_densities()? {
                    let l1 = rho.l1_distance(&exact)?;
                    rows.push(format!("{n},{l1:e}"));
                    if l1 >= worst.1 {
                        worst = (n, l1);
                    }
                }
                claim.artifacts.push(self.write_rows("heat_exact", "steps,l1", rows)?);
                claim.pass = worst.1 <= *tolerance;
                claim.value = Some(worst.1);
                claim.detail = format!("max L1 to g(T) * nu_0 = {:.6e} (tolerance {tolerance:e})", worst.1);
                if !claim.pass {
                    claim.offending_n = Some(worst.0);
                }
            }
            Diagnostic::L1Convergence { tolerance } => {
                let reference = at(self.out.fpe.as_ref().expect("validated"), t_end)?.clone();
                let curve = l1_convergence_study(&self.terminal_densities()?, &reference, &drift, *tolerance)?;
                let mut buf = Vec::new();
                curve.write_csv(&mut buf)?;
                claim.artifacts.push(self.writer.write("diagnostics/l1_convergence.csv", &buf)?);
                claim.pass = curve.verdict();
                claim.value = Some(curve.final_value());
                claim.slope = Some(curve.slope);
                claim.detail = format!(
                    "final L1 {:.6e} (tolerance {tolerance:e}), largest rise per doubling x{:.6}",
                    curve.final_value(),
                    curve.max_increase(curve.ordinate.len() - 1)
                );
                claim.offending_n = curve_offender(&curve);
            }
            Diagnostic::Domination { lambda, times } => {
                let times = if times.is_empty() { vec![t_end] } else { times.clone() };
                let mut pass = true;
                let mut parts = vec![];
                for t in times {
                    let slice = self
                        .out
                        .density
                        .iter()
                        .map(|(n, tr)| Ok((*n, at(tr, t)?.clone())))
                        .collect::<Result<BTreeMap<_, _>, CliError>>()?;
                    let cert = fit_domination(&slice, t, &init, *lambda)?;
                    claim.artifacts.push(self.write_cert(&format!("domination_t{t:.6}"), &cert)?);
                    if !cert.is_valid() {
                        pass = false;
                        claim.offending_n = claim.offending_n.or(cert_offender(&cert));
                    }
                    claim.value = Some(claim.value.unwrap_or(0.0).max(cert.constant));
                    parts.push(format!("t={t}: C={:.6e}, max/median {:.6}", cert.constant, cert.stability_ratio));
                }
                claim.pass = pass;
                claim.detail = format!("{} (threshold {STABILITY_THRESHOLD})", parts.join("; "));
            }
            Diagnostic::Hoelder {
                beta,
                t_min,
                t_max,
                half_width,
            } => {
                let window = HoelderWindow::new(*t_min, *t_max, *half_width)?;
                let (space, time) = fit_hoelder(&self.out.density, &init, &window, *beta)?;
                claim.artifacts.push(self.write_cert("hoelder_space", &space)?);
                claim.artifacts.push(self.write_cert("hoelder_time", &time)?);
                claim.pass = space.is_valid() && time.is_valid();
                claim.value = Some(space.constant.max(time.constant));
                claim.offending_n = if !space.is_valid() {
                    cert_offender(&space)
                } else if !time.is_valid() {
                    cert_offender(&time)
                } else {
                    None
                };
                claim.detail = format!(
                    "space C={:.6e} max/median {:.6}; time C={:.6e} max/median {:.6} (threshold {STABILITY_THRESHOLD})",
                    space.constant, space.stability_ratio, time.constant, time.stability_ratio
                );
            }
            Diagnostic::WeakResidual { tolerance } => {
                let traj = self.finest().clone();
                let tests = TestFunctionSet::catalog(&self.resolved.grid)?;
                let res = fpe::weak_residual(&traj, Some(&init), &drift, &tests, t_end)?;
                let rows = tests.functions().iter().zip(&res).map(|(f, r)| format!("{},{r:e}", f.label()));
                claim.artifacts.push(self.write_rows("weak_residual", "test_function,residual", rows)?);
                let worst = res.iter().copied().fold(0.0, f64::max);
                claim.pass = worst <= *tolerance;
                claim.value = Some(worst);
                claim.detail = format!(
                    "largest residual {worst:.6e} over {} test functions at N={} (tolerance {tolerance:e})",
                    res.len(),
                    self.config.finest_steps()
                );
            }
            Diagnostic::Moments { pairs } => {
                let pairs: Vec<(f64, f64)> = pairs.iter().map(|p| (p[0], p[1])).collect();
                let mut per_n = vec![];
                let mut rows = vec![];
                for (n, ens) in &self.out.ensembles {
                    let tg = TimeGrid::new(t_end, *n)?;
                    let fit = moment_increment_check(ens, &tg, &pairs)?;
                    for p in &fit.pairs {
                        rows.push(format!("{n},{},{},{:e},{:e}", p.s, p.t, p.ratio, p.std_error));
                    }
                    per_n.push((*n, fit.constant));
                }
                claim.artifacts.push(self.write_rows("moments", "steps,s,t,ratio,std_error", rows)?);
                let constants: Vec<f64> = per_n.iter().map(|p| p.1).collect();
                let ratio = stability_ratio(&constants);
                claim.pass = ratio <= STABILITY_THRESHOLD;
                claim.value = Some(constants.iter().copied().fold(0.0, f64::max));
                claim.detail = format!("C_N max {:.6e}, max/median {ratio:.6} (threshold {STABILITY_THRESHOLD})", claim.value.unwrap());
                if !claim.pass {
                    claim.offending_n = offender(&per_n);
                }
            }
            Diagnostic::Smoothing { q, c_fit } => {
                let traj = self.finest().clone();
                let mut rows = vec![];
                let mut worst = 0.0f64;
                let mut pass = true;
                for (t, rho) in traj.iter().filter(|(t, _)| *t >= t_end / 8.0 - 1e-12) {
                    let check = smoothing_check(rho, *t, &init, *q, *c_fit)?;
                    rows.push(format!("{t},{:e}", check.scaled));
                    worst = worst.max(check.scaled);
                    pass &= check.pass;
                }
                claim.artifacts.push(self.write_rows(&format!("smoothing_q{q}"), "t,scaled_sup", rows)?);
                claim.claim = format!("smoothing(q={q})");
                claim.pass = pass;
                claim.value = Some(worst);
                claim.detail = format!("largest scaled sup {worst:.6e} on [T/8, T] (C_fit {c_fit})");
                if !pass {
                    claim.offending_n = Some(self.config.finest_steps());
                }
            }
            Diagnostic::EngineAgreement { tolerance } => {
                let exact = self.terminal_densities()?;
                let mut rows = vec![];
                let mut worst = (0, 0.0f64);
                for (n, kde) in &self.out.kde {
                    let l1 = at(kde, t_end)?.l1_distance(&exact[n])?;
                    rows.push(format!("{n},{l1:e}"));
                    if l1 >= worst.1 {
                        worst = (*n, l1);
                    }
                }
                claim.artifacts.push(self.write_rows("engine_agreement", "steps,l1", rows)?);
                claim.pass = worst.1 <= *tolerance;
                claim.value = Some(worst.1);
                claim.detail = format!("max L1(KDE, density) {:.6e} (tolerance {tolerance:e})", worst.1);
                if !claim.pass {
                    claim.offending_n = Some(worst.0);
                }
            }
        }
        Ok(claim)
    }
}

fn statement(diag: &Diagnostic) -> String {
    match diag {
        Diagnostic::HeatExact { .. } => "b = 0: rho^N_T = g(T) * nu_0 for every N".into(),
        Diagnostic::L1Convergence { .. } => "||rho^N_T - rho_T||_1 -> 0 as N -> infinity".into(),
        Diagnostic::Domination { lambda, .. } => {
            format!("rho^N_t(y) <= C (g({lambda} t) * nu_0)(y) with C independent of N")
        }
        Diagnostic::Hoelder { beta, .. } => format!(
            "|rho^N_t(x) - rho^N_t(y)| and |rho^N_t(x) - rho^N_s(x)| bounded by C |x - y|^{beta} resp. C |t - s|^{} times Gaussian envelopes, C independent of N",
            beta / 2.0
        ),
        Diagnostic::WeakResidual { .. } => {
            "<rho_t, phi> = <nu_0, phi> + int_0^t <rho_s, Laplacian phi + b(s, ., rho_s) . grad phi> ds".into()
        }
        Diagnostic::Moments { .. } => "sup_N E|X^N_t - X^N_s|^4 <= C |t - s|^2".into(),
        Diagnostic::Smoothing { q, .. } => format!("||rho_t||_inf <= C t^(-d/(2*{q})) ||rho_0||_{q}"),
        Diagnostic::EngineAgreement { .. } => "the particle system and the density engine carry the same law of X^N_T".into(),
    }
}

/// The N whose constant sits farthest from the sweep median.
fn offender(per_n: &[(usize, f64)]) -> Option<usize> {
    let mut sorted: Vec<f64> = per_n.iter().map(|p| p.1).collect();
    sorted.sort_by(f64::total_cmp);
    let median = *sorted.get(sorted.len() / 2)?;
    per_n
        .iter()
        .max_by(|a, b| {
            let dev = |v: f64| if v.is_finite() && v > 0.0 { (v / median).ln().abs() } else { f64::INFINITY };
            dev(a.1).total_cmp(&dev(b.1))
        })
        .map(|p| p.0)
}

fn cert_offender(cert: &BoundCertificate) -> Option<usize> {
    offender(&cert.per_n)
}

fn curve_offender(curve: &ConvergenceCurve) -> Option<usize> {
    let y = &curve.ordinate;
    for (i, w) in y.windows(2).enumerate() {
        if w[1] > CURVE_SLACK * w[0] + CURVE_FLOOR {
            return Some(curve.abscissa[i + 1] as usize);
        }
    }
    (curve.final_value() > curve.tolerance).then(|| *curve.abscissa.last().unwrap() as usize)
}

/// Runs `config` into `out` and returns the written manifest.
pub fn run_experiment(config: &ExperimentConfig, out: &Path) -> Result<RunManifest, CliError> {
    let resolved = config.validate()?;
    let started = now();
    let text = config.to_toml();
    let mut writer = ArtifactWriter::new(out)?;
    writer.write(CONFIG_FILE, text.as_bytes())?;
    let mut runner = Runner {
        config,
        resolved,
        writer,
        engines: vec![],
        out: Outputs::default(),
    };
    if config.wants(Engine::Density) {
        runner.run_density()?;
    }
    if config.wants(Engine::Fpe) {
        runner.run_fpe()?;
    }
    if config.wants(Engine::Particles) {
        runner.run_particles()?;
    }
    let mut claims = vec![];
    for d in &config.diagnostics {
        claims.push(runner.diagnose(d)?);
    }

    let series: Vec<(f64, String)> = if config.wants(Engine::Density) {
        let n = config.finest_steps();
        runner.resolved.snapshots.iter().map(|t| (*t, format!("density/{}.ddg", stem(n, *t)))).collect()
    } else if let Some(fpe) = &runner.out.fpe {
        fpe.iter().map(|(t, _)| (*t, format!("fpe/t{t:.6}.ddg"))).collect()
    } else {
        let n = config.finest_steps();
        runner.resolved.snapshots.iter().map(|t| (*t, format!("particles/{}_kde.ddg", stem(n, *t)))).collect()
    };
    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_sha256: sha256_hex(text.as_bytes()),
        started,
        finished: now(),
        engines: runner.engines,
        claims,
        series,
        artifacts: runner.writer.into_artifacts(),
    };
    manifest.write(out)?;
    Ok(manifest)
}
