//! `report`: a Markdown summary of one or more run directories.

use std::fmt::Write;
use std::path::Path;

use crate::config::ExperimentConfig;
use crate::manifest::{RunManifest, CONFIG_FILE};
use crate::CliError;

/// Six significant digits.
pub fn sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let mag = v.abs().log10().floor() as i32;
    if (-3..6).contains(&mag) {
        format!("{:.*}", (5 - mag).max(0) as usize, v)
    } else {
        format!("{v:.5e}")
    }
}

fn cell(s: &str) -> String {
    s.replace('|', "\\|")
}

pub fn report(dirs: &[impl AsRef<Path>]) -> Result<String, CliError> {
    let mut doc = String::from("# ddsde report\n");
    for dir in dirs {
        let dir = dir.as_ref();
        let manifest = RunManifest::load_verified(dir)?;
        let config = ExperimentConfig::load(&dir.join(CONFIG_FILE))?;
        let all_pass = manifest.claims.iter().all(|c| c.pass);
        writeln!(doc, "\n## {} (`{}`)\n", config.name, dir.display()).unwrap();
        writeln!(
            doc,
            "{} {}, config sha256 `{}`, {} artifacts verified, wall time {} s.\n",
            manifest.tool,
            manifest.version,
            manifest.config_sha256,
            manifest.artifacts.len(),
            manifest.finished.saturating_sub(manifest.started)
        )
        .unwrap();

        doc.push_str("| engine | steps | max clipped mass | CFL margin | mass drift |\n|---|---|---|---|---|\n");
        let opt = |v: Option<f64>| v.map(sig6).unwrap_or_else(|| "-".into());
        for e in &manifest.engines {
            writeln!(
                doc,
                "| {} | {} | {} | {} | {} |",
                e.engine,
                e.steps,
                opt(e.max_clipped_mass),
                opt(e.cfl_margin),
                opt(e.mass_drift)
            )
            .unwrap();
        }

        if manifest.claims.is_empty() {
            doc.push_str("\nNo diagnostics were requested.\n");
            continue;
        }
        writeln!(doc, "\nClaims: {}\n", if all_pass { "all pass" } else { "FAILURES" }).unwrap();
        doc.push_str("| claim | statement | verdict | value | detail |\n|---|---|---|---|---|\n");
        for c in &manifest.claims {
            let verdict = match (c.pass, c.offending_n) {
                (true, _) => "pass".to_string(),
                (false, Some(n)) => format!("FAIL (N={n})"),
                (false, None) => "FAIL".to_string(),
            };
            writeln!(
                doc,
                "| {} | {} | {} | {} | {} |",
                c.claim,
                cell(&c.statement),
                verdict,
                opt(c.value),
                cell(&c.detail)
            )
            .unwrap();
        }
        for c in manifest.claims.iter().filter(|c| !c.pass) {
            match c.offending_n {
                Some(n) => writeln!(doc, "\n**{} failed**, offending N = {n}: {}", c.claim, c.detail).unwrap(),
                None => writeln!(doc, "\n**{} failed**: {}", c.claim, c.detail).unwrap(),
            }
        }
        let curves: Vec<_> = manifest.claims.iter().filter(|c| c.slope.is_some()).collect();
        if !curves.is_empty() {
            doc.push_str("\n### Convergence curves\n\n");
            for c in curves {
                writeln!(
                    doc,
                    "- {}: log-log slope {}, final value {} ({})",
                    c.claim,
                    sig6(c.slope.unwrap()),
                    opt(c.value),
                    c.artifacts.join(", ")
                )
                .unwrap();
            }
        }
    }
    Ok(doc)
}
