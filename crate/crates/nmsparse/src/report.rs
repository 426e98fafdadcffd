//! Sweep execution over run directories and cross-run report aggregation.

use crate::config::SweepSpec;
use crate::error::{Error, Result};
use crate::trainer::train;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub recipe: String,
    pub pattern: String,
    pub seed: u64,
    pub final_train_loss: f64,
    pub val_loss: f64,
    pub token_acc: f64,
    pub seq_acc: f64,
    pub mask_refreshes: usize,
    pub cum_train_flops: f64,
    pub avg_step_flops: f64,
}

#[derive(Debug, Serialize)]
pub struct SweepCell {
    pub label: String,
    pub dir: PathBuf,
    /// Populated on divergence; the sweep records the failure and moves on.
    pub error: Option<String>,
    pub summary: Option<RunSummary>,
}

/// Execute every cell of a sweep under `out_root/cell-NNN`, sequentially and
/// deterministically. Divergent cells are recorded, not fatal.
pub fn run_sweep(spec: &SweepSpec, out_root: &Path) -> Result<Vec<SweepCell>> {
    let cells = spec.expand()?;
    std::fs::create_dir_all(out_root)?;
    let mut results = Vec::with_capacity(cells.len());
    for (i, (label, cfg)) in cells.iter().enumerate() {
        let dir = out_root.join(format!("cell-{i:03}"));
        let cell = match train(cfg, &dir) {
            Ok(_) => SweepCell {
                label: label.clone(),
                summary: Some(read_summary(&dir)?),
                dir,
                error: None,
            },
            Err(e @ Error::Divergence { .. }) => SweepCell {
                label: label.clone(),
                dir,
                error: Some(e.to_string()),
                summary: None,
            },
            Err(e) => return Err(e),
        };
        results.push(cell);
    }
    let agg = serde_json::to_string_pretty(&results)
        .map_err(|e| Error::Malformed(format!("sweep serialization: {e}")))?;
    std::fs::write(out_root.join("sweep.json"), agg)?;
    std::fs::write(out_root.join("sweep.txt"), render_cells(&results))?;
    Ok(results)
}

fn read_summary(dir: &Path) -> Result<RunSummary> {
    let text = std::fs::read_to_string(dir.join("summary.json"))?;
    serde_json::from_str(&text).map_err(|e| {
        Error::Malformed(format!("summary in {} is corrupt: {e}", dir.display()))
    })
}

fn render_cells(cells: &[SweepCell]) -> String {
    let mut out = format!(
        "{:<40} {:>10} {:>10} {:>8} {:>14}\n",
        "cell", "val_loss", "token_acc", "seq_acc", "avg_flops/step"
    );
    for c in cells {
        match (&c.summary, &c.error) {
            (Some(s), _) => out.push_str(&format!(
                "{:<40} {:>10.4} {:>10.4} {:>8.4} {:>14.4e}\n",
                c.label, s.val_loss, s.token_acc, s.seq_acc, s.avg_step_flops
            )),
            (None, Some(e)) => out.push_str(&format!("{:<40} FAILED: {e}\n", c.label)),
            (None, None) => out.push_str(&format!("{:<40} (no result)\n", c.label)),
        }
    }
    out
}

/// Collect run summaries under the given directories (each either a run dir
/// or a parent of run dirs), deduplicated by run id, deterministically
/// ordered. Corrupt entries are skipped with a note.
pub fn collect_runs(dirs: &[PathBuf]) -> Result<(Vec<RunSummary>, Vec<String>)> {
    let mut found: Vec<PathBuf> = Vec::new();
    for d in dirs {
        if d.join("summary.json").exists() {
            found.push(d.clone());
        } else if d.is_dir() {
            let mut children: Vec<PathBuf> = std::fs::read_dir(d)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.join("summary.json").exists())
                .collect();
            children.sort();
            found.extend(children);
        } else {
            return Err(Error::Malformed(format!(
                "{} is neither a run directory nor a directory of runs",
                d.display()
            )));
        }
    }
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for dir in found {
        match read_summary(&dir) {
            Ok(s) => {
                if seen.insert(s.run_id.clone()) {
                    rows.push(s);
                }
            }
            Err(e) => skipped.push(e.to_string()),
        }
    }
    rows.sort_by(|a, b| {
        (&a.recipe, &a.pattern, a.seed, &a.run_id).cmp(&(&b.recipe, &b.pattern, b.seed, &b.run_id))
    });
    Ok((rows, skipped))
}

/// Aligned summary table: one row per run, recipe-major ordering.
pub fn render_report(rows: &[RunSummary]) -> String {
    let mut out = format!(
        "{:<22} {:>7} {:>5} {:>10} {:>10} {:>8} {:>9} {:>14}\n",
        "recipe", "pattern", "seed", "val_loss", "token_acc", "seq_acc", "refreshes", "avg_flops/step"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<22} {:>7} {:>5} {:>10.4} {:>10.4} {:>8.4} {:>9} {:>14.4e}\n",
            r.recipe,
            r.pattern,
            r.seed,
            r.val_loss,
            r.token_acc,
            r.seq_acc,
            r.mask_refreshes,
            r.avg_step_flops
        ));
    }
    out
}
