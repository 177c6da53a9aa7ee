//! Result tables: CSV plus a Markdown rendering with `Obj. (Gap) & Time`
//! columns, stamped with the config hash.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRow {
    pub task: String,
    pub setting: String,
    pub mean_obj: f64,
    /// Mean relative gap against the reference solver, when available.
    pub gap: Option<f64>,
    pub reference: String,
    pub instances: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("task,setting,obj,gap,reference,instances,seconds,config_hash\n");
        for r in &self.rows {
            let gap = r.gap.map(|g| format!("{:.6}", g)).unwrap_or_default();
            writeln!(
                s,
                "{},{},{:.6},{},{},{},{:.3},{}",
                r.task, r.setting, r.mean_obj, gap, r.reference, r.instances, r.seconds, self.config_hash
            )
            .unwrap();
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        writeln!(s, "| Task | Setting | Obj. (Gap) | Time |").unwrap();
        writeln!(s, "|---|---|---|---|").unwrap();
        for r in &self.rows {
            let obj_gap = match r.gap {
                Some(g) => format!("{:.4} ({:.2}%)", r.mean_obj, g * 100.0),
                None => format!("{:.4} (--)", r.mean_obj),
            };
            writeln!(s, "| {} | {} | {} | {:.1}s |", r.task, r.setting, obj_gap, r.seconds).unwrap();
        }
        writeln!(s, "\nconfig-hash: {}", self.config_hash).unwrap();
        s
    }

    pub fn write(&self, base: impl AsRef<Path>) -> Result<()> {
        let base = base.as_ref();
        std::fs::write(base.with_extension("csv"), self.to_csv())?;
        std::fs::write(base.with_extension("md"), self.to_markdown())?;
        Ok(())
    }
}

/// Gradient-direction series, one row per analyzed checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradAnalysisRow {
    pub iter: usize,
    pub cos_so_fomaml_first: f64,
    pub cos_so_fomaml_last: f64,
    pub cos_so_reptile_first: f64,
    pub cos_so_reptile_last: f64,
}

pub const GRAD_ANALYSIS_CSV_HEADER: &str =
    "iter,cos_so_fomaml_first,cos_so_fomaml_last,cos_so_reptile_first,cos_so_reptile_last";

pub fn grad_analysis_csv(rows: &[GradAnalysisRow]) -> String {
    let mut s = format!("{}\n", GRAD_ANALYSIS_CSV_HEADER);
    for r in rows {
        writeln!(
            s,
            "{},{:.6},{:.6},{:.6},{:.6}",
            r.iter, r.cos_so_fomaml_first, r.cos_so_fomaml_last, r.cos_so_reptile_first, r.cos_so_reptile_last
        )
        .unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_and_markdown_render() {
        let report = EvalReport {
            config_hash: "abc123".into(),
            rows: vec![EvalRow {
                task: "tsp:13:R".into(),
                setting: "zero-shot".into(),
                mean_obj: 3.1234,
                gap: Some(0.0712),
                reference: "held-karp".into(),
                instances: 64,
                seconds: 1.5,
            }],
        };
        let csv = report.to_csv();
        assert!(csv.lines().count() == 2);
        assert!(csv.contains("abc123"));
        let md = report.to_markdown();
        assert!(md.contains("Obj. (Gap)"));
        assert!(md.contains("7.12%"));
    }

    #[test]
    fn grad_csv_schema_is_stable() {
        let rows = vec![GradAnalysisRow {
            iter: 5,
            cos_so_fomaml_first: 1.0,
            cos_so_fomaml_last: 0.5,
            cos_so_reptile_first: -0.25,
            cos_so_reptile_last: 0.0,
        }];
        let csv = grad_analysis_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), GRAD_ANALYSIS_CSV_HEADER);
        assert_eq!(lines.next().unwrap(), "5,1.000000,0.500000,-0.250000,0.000000");
    }
}
