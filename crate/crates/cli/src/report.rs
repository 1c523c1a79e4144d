//! Markdown summary of a run directory.

use std::fmt::Write;
use std::path::Path;

use serde::de::DeserializeOwned;

use crate::manifest::{RunManifest, StageStatus};
use crate::stages::{
    write_text, AlphaSweepFile, EmbodimentEntry, FactorsFile, FieldEntry, ReinforceFile, TableFile, STAGES,
};
use crate::CliError;

pub const REPORT_FILE: &str = "report.md";

fn optional<T: DeserializeOwned>(dir: &Path, rel: &str) -> Option<T> {
    let bytes = std::fs::read(dir.join(rel)).ok()?;
    match serde_json::from_slice(&bytes) {
        Ok(v) => Some(v),
        Err(e) => {
            log::warn!("{rel}: {e}");
            None
        }
    }
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{:.0}%", 100.0 * x))
}

fn num(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.4}"))
}

pub fn cmd_report(dir: &Path) -> Result<(), CliError> {
    let manifest =
        RunManifest::load(dir)?.ok_or_else(|| CliError::Manifest(format!("{} has no manifest.json", dir.display())))?;
    let text = render(dir, &manifest);
    write_text(&dir.join(REPORT_FILE), &text)?;
    println!("{}", dir.join(REPORT_FILE).display());
    Ok(())
}

pub(crate) fn render(dir: &Path, manifest: &RunManifest) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# Run report\n");
    let _ = writeln!(out, "- config digest: `{}`", manifest.config_digest);
    let _ = writeln!(out, "- tool version: {}\n", manifest.tool_version);

    let _ = writeln!(out, "## Stages\n");
    let _ = writeln!(out, "| stage | status | wall clock (s) | outputs |");
    let _ = writeln!(out, "|---|---|---|---|");
    for stage in STAGES {
        let records: Vec<_> = manifest
            .stages
            .iter()
            .filter(|(name, _)| name.as_str() == stage || name.split(':').next() == Some(stage) && stage == "train")
            .collect();
        if records.is_empty() {
            let _ = writeln!(out, "| {stage} | SKIPPED | | |");
        }
        for (name, r) in records {
            let status = match r.status {
                StageStatus::Completed => "COMPLETED".to_string(),
                StageStatus::Failed => format!("FAILED: {}", r.error.as_deref().unwrap_or("").replace('|', "/")),
            };
            let _ = writeln!(out, "| {name} | {status} | {:.1} | {} |", r.wall_clock_s, r.outputs.len());
        }
    }
    out.push('\n');

    if let Some(f) = optional::<FactorsFile>(dir, "factors/factors.json") {
        let _ = writeln!(out, "## Time-varying factors (tau = {})\n", f.tau);
        let _ = writeln!(out, "| method | count | factors | control factors |");
        let _ = writeln!(out, "|---|---|---|---|");
        for m in &f.methods {
            let control = match (&m.control, &m.control_error) {
                (Some(c), _) => format!("{:?}", c.indices),
                (None, e) => format!("none ({})", e.as_deref().unwrap_or("")),
            };
            let _ = writeln!(out, "| {} | {} | {:?} | {control} |", m.method, m.factors.len(), m.factors.indices);
        }
        for d in &f.dof_compare {
            let _ = writeln!(
                out,
                "\n{}: {} factors on the 2-DOF task, {} on the 1-DOF task.",
                d.method, d.dof2_count, d.dof1_count
            );
        }
        out.push('\n');
    }

    if let Some(a) = optional::<AlphaSweepFile>(dir, "alpha/alpha_sweep.json") {
        let _ = writeln!(out, "## Alpha sweep ({} epochs)\n", a.epochs);
        let _ = writeln!(out, "| alpha | beta | score |");
        let _ = writeln!(out, "|---|---|---|");
        for r in &a.rows {
            let _ = writeln!(out, "| {} | {:.3} | {:.4} |", r.alpha, r.beta, r.score);
        }
        let _ = writeln!(out, "\nBest alpha {} (interior: {}).\n", a.best_alpha, a.best_is_interior);
    }

    if let Some(entries) = optional::<Vec<FieldEntry>>(dir, "fieldmap/metrics.json") {
        let _ = writeln!(out, "## Latent field maps\n");
        let _ = writeln!(out, "| subject | factors | monotonicity x | monotonicity y | injectivity | control injectivity | goal tolerance |");
        let _ = writeln!(out, "|---|---|---|---|---|---|---|");
        for e in &entries {
            match &e.all {
                Some(a) => {
                    let _ = writeln!(
                        out,
                        "| {} | {} | {:.4} | {:.4} | {:.4} | {} | {} |",
                        e.subject,
                        a.factors.len(),
                        a.monotonicity[0],
                        a.monotonicity[1],
                        a.injectivity,
                        num(e.control.as_ref().map(|c| c.injectivity)),
                        num(e.goal_tolerance)
                    );
                }
                None => {
                    let _ = writeln!(out, "| {} | 0 | n/a | n/a | n/a | n/a | n/a |", e.subject);
                }
            }
        }
        out.push('\n');
    }

    if let Some(entries) = optional::<Vec<EmbodimentEntry>>(dir, "embodiment/embodiment.json") {
        let _ = writeln!(out, "## Embodiment\n");
        let _ = writeln!(out, "| subject | case | jaccard | mean correlation | final distance | verdict |");
        let _ = writeln!(out, "|---|---|---|---|---|---|");
        for e in &entries {
            for (case, r) in [
                ("teacher to executor", &e.transfer),
                ("identical sprite", &e.identical),
                ("shuffled frames", &e.shuffled),
            ] {
                let _ = writeln!(
                    out,
                    "| {} | {case} | {:.3} | {:.3} | {:.4} | {:?} |",
                    e.subject, r.jaccard, r.mean_correlation, r.final_distance, r.verdict
                );
            }
        }
        out.push('\n');
    }

    if let Some(t) = optional::<TableFile>(dir, "evaluate/table.json") {
        let _ = writeln!(out, "## Controller success ({} trials)\n", t.trials);
        let _ = writeln!(out, "| subject | UVS | guided REINFORCE | UVS task error | REINFORCE task error |");
        let _ = writeln!(out, "|---|---|---|---|---|");
        for r in &t.rows {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {} |",
                r.subject,
                pct(r.uvs_rate),
                pct(r.reinforce_rate),
                num(r.uvs_task_error),
                num(r.reinforce_task_error)
            );
        }
        for o in &t.ordering {
            let _ = writeln!(out, "\n{}: {} >= {} holds: {}", o.controller, o.higher, o.lower, o.holds);
        }
        out.push('\n');
    }

    let reinforce: Vec<ReinforceFile> = manifest
        .outputs("reinforce")
        .iter()
        .filter(|p| p.ends_with(".json") && !p.contains("_policy"))
        .filter_map(|p| optional(dir, p))
        .collect();
    if !reinforce.is_empty() {
        let _ = writeln!(out, "## Guided REINFORCE training\n");
        let _ = writeln!(out, "| subject | seed | first-decile reward | last-decile reward | success |");
        let _ = writeln!(out, "|---|---|---|---|---|");
        for f in &reinforce {
            for r in &f.runs {
                let _ = writeln!(
                    out,
                    "| {} | {} | {:.3} | {:.3} | {} |",
                    f.subject,
                    r.seed,
                    r.first_decile_reward,
                    r.last_decile_reward,
                    pct(Some(r.stats.rate))
                );
            }
        }
        out.push('\n');
    }

    let _ = writeln!(out, "## Artifacts\n");
    for (name, r) in &manifest.stages {
        let _ = writeln!(out, "### {name}\n");
        for p in &r.outputs {
            let _ = writeln!(out, "- [{p}]({p})");
        }
        out.push('\n');
    }
    out
}
