//! CSV output and Markdown tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use scenegen::dataset::DatasetStats;

use crate::{AblationCell, CliError, EvalRow};

pub const SKIP_MARKER: &str = "skipped: missing checkpoint";

fn csv_err(e: csv::Error) -> CliError {
    CliError::Data(e.to_string())
}

pub fn write_eval_csv(path: &Path, rows: &[EvalRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Row of the ablation CSV. Count columns are empty for skipped cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRecord {
    pub task: String,
    pub train_factors: String,
    pub eval_factor: String,
    pub rollouts: Option<usize>,
    pub successes: Option<usize>,
    pub rate: Option<f64>,
    pub diagonal: bool,
    pub status: String,
}

pub fn ablation_records(task: &str, cells: &[AblationCell]) -> Vec<AblationRecord> {
    cells
        .iter()
        .map(|c| AblationRecord {
            task: task.to_string(),
            train_factors: c.train_factors.to_string(),
            eval_factor: c.eval_factor.to_string(),
            rollouts: c.row.as_ref().map(|r| r.rollouts),
            successes: c.row.as_ref().map(|r| r.successes),
            rate: c.row.as_ref().map(|r| r.rate),
            diagonal: c.is_diagonal(),
            status: if c.row.is_some() { "ok".into() } else { SKIP_MARKER.into() },
        })
        .collect()
}

pub fn write_ablation_csv(path: &Path, task: &str, cells: &[AblationCell]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in ablation_records(task, cells) {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn matrix_markdown(cells: impl IntoIterator<Item = (String, String, Option<f64>, bool)>) -> String {
    let mut rows: Vec<String> = Vec::new();
    let mut cols: Vec<String> = Vec::new();
    let mut values = BTreeMap::new();
    for (train, eval, rate, diag) in cells {
        if !rows.contains(&train) {
            rows.push(train.clone());
        }
        if !cols.contains(&eval) {
            cols.push(eval.clone());
        }
        values.insert((train, eval), (rate, diag));
    }
    let mut out = String::from("| train \\ eval |");
    for c in &cols {
        let _ = write!(out, " {c} |");
    }
    out.push_str("\n|---|");
    out.push_str(&"---:|".repeat(cols.len()));
    out.push('\n');
    for r in &rows {
        let _ = write!(out, "| {r} |");
        for c in &cols {
            let cell = match values.get(&(r.clone(), c.clone())) {
                Some((Some(v), true)) => format!("**{v:.2}**"),
                Some((Some(v), false)) => format!("{v:.2}"),
                Some((None, _)) => "skip".to_string(),
                None => String::new(),
            };
            let _ = write!(out, " {cell} |");
        }
        out.push('\n');
    }
    out
}

pub fn eval_markdown(rows: &[EvalRow]) -> String {
    matrix_markdown(rows.iter().map(|r| (r.train_factors.clone(), r.eval_factor.clone(), Some(r.rate), false)))
}

/// Train regimes as rows, eval factors as columns; diagonal cells in bold.
pub fn ablation_markdown(cells: &[AblationCell]) -> String {
    matrix_markdown(cells.iter().map(|c| {
        (c.train_factors.to_string(), c.eval_factor.to_string(), c.row.as_ref().map(|r| r.rate), c.is_diagonal())
    }))
}

/// Renders an eval or ablation CSV as a Markdown matrix.
pub fn render_csv(path: &Path) -> Result<String, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers = r.headers().map_err(csv_err)?.clone();
    let mut cells = Vec::new();
    if headers.iter().any(|h| h == "diagonal") {
        for rec in r.deserialize::<AblationRecord>() {
            let rec = rec.map_err(csv_err)?;
            cells.push((rec.train_factors, rec.eval_factor, rec.rate, rec.diagonal));
        }
    } else {
        for rec in r.deserialize::<EvalRow>() {
            let rec = rec.map_err(csv_err)?;
            cells.push((rec.train_factors, rec.eval_factor, Some(rec.rate), false));
        }
    }
    Ok(matrix_markdown(cells))
}

pub fn stats_markdown(s: &DatasetStats) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# Dataset: {} ({})\n", s.task, s.factors);
    let _ = writeln!(out, "| quantity | value |\n|---|---|");
    let _ = writeln!(out, "| episodes | {} |", s.episodes);
    let _ = writeln!(out, "| generation success rate | {:.3} |", s.generation_success_rate);
    let _ = writeln!(
        out,
        "| episode length min / mean / max | {:.0} / {:.1} / {:.0} |",
        s.episode_length.min, s.episode_length.mean, s.episode_length.max
    );
    let _ = writeln!(
        out,
        "| action translation norm mean / max (m) | {:.4} / {:.4} |",
        s.action_translation_norm.mean, s.action_translation_norm.max
    );
    let _ = writeln!(
        out,
        "| action rotation norm mean / max (rad) | {:.4} / {:.4} |",
        s.action_rotation_norm.mean, s.action_rotation_norm.max
    );
    let _ = writeln!(out, "| action round-trip max error (m) | {:.3e} |", s.action_roundtrip_max_error);
    let _ = writeln!(
        out,
        "| light mean (r, g, b) | {:.3}, {:.3}, {:.3} |",
        s.light_mean[0], s.light_mean[1], s.light_mean[2]
    );
    let used = s.camera_counts.iter().filter(|&&c| c > 0).count();
    let (lo, hi) = (
        s.camera_counts.iter().min().copied().unwrap_or(0),
        s.camera_counts.iter().max().copied().unwrap_or(0),
    );
    let _ = writeln!(
        out,
        "| cameras used | {used} of {} (counts {lo}..{hi}, balanced: {}) |",
        s.camera_counts.len(),
        s.camera_balanced
    );
    let textures: Vec<String> = s.texture_counts.iter().map(|(k, v)| format!("{k}:{v}")).collect();
    let _ = writeln!(out, "| texture counts | {} |", textures.join(" "));
    let heights: Vec<String> = s.height_histogram.iter().map(|c| c.to_string()).collect();
    let _ = writeln!(out, "| height histogram | {} |", heights.join(" "));
    let bodies: Vec<String> = s.embodiment_counts.iter().map(|(k, v)| format!("{k}:{v}")).collect();
    let _ = writeln!(out, "| embodiments | {} |", bodies.join(" "));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use scenegen::randomize::FactorSet;

    fn cell(train: &str, eval: &str, rate: Option<usize>) -> AblationCell {
        let (t, e): (FactorSet, FactorSet) = (train.parse().unwrap(), eval.parse().unwrap());
        AblationCell {
            row: rate.map(|s| EvalRow::new("stack", &t.to_string(), &e, 10, s)),
            train_factors: t,
            eval_factor: e,
        }
    }

    #[test]
    fn ablation_markdown_marks_diagonal_and_skips() {
        let cells = [
            cell("none", "camera", Some(2)),
            cell("none", "height", Some(5)),
            cell("camera", "camera", Some(7)),
            cell("camera", "height", Some(1)),
            cell("height", "camera", None),
            cell("height", "height", None),
        ];
        let md = ablation_markdown(&cells);
        assert!(md.contains("| camera | **0.70** | 0.10 |"), "{md}");
        assert!(md.contains("| none | 0.20 | 0.50 |"), "{md}");
        assert!(md.contains("| height | skip | skip |"), "{md}");
        let recs = ablation_records("stack", &cells);
        assert!(recs[2].diagonal && !recs[0].diagonal);
        assert_eq!(recs[4].status, SKIP_MARKER);
        assert_eq!(recs[4].rate, None);
    }
}
