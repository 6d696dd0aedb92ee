//! Plain-text plot tables derived from result records.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::record::ResultRecord;
use crate::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum PlotKind {
    /// `log n`, `log sup_error`, `log total_bound`.
    ErrorVsN,
    /// `t`, `gap`.
    GapVsT,
    /// `trial`, `empirical_sup`, `bound`.
    BoundVsEmpirical,
}

impl PlotKind {
    pub fn name(self) -> &'static str {
        match self {
            PlotKind::ErrorVsN => "error_vs_n",
            PlotKind::GapVsT => "gap_vs_t",
            PlotKind::BoundVsEmpirical => "bound_vs_empirical",
        }
    }
}

/// Whitespace-separated table with a `#` header line.
pub fn plot_table(record: &ResultRecord, kind: PlotKind) -> Result<String> {
    let (header, sources, log): (&str, Vec<usize>, bool) = match kind {
        PlotKind::ErrorVsN => {
            let bound = record
                .column("total_bound")
                .or_else(|_| record.column("e2_bound"))
                .map_err(|_| LabError::MissingColumn("total_bound".into()))?;
            (
                "log_n log_sup_error log_total_bound",
                vec![record.column("n")?, record.column("sup_error")?, bound],
                true,
            )
        }
        PlotKind::GapVsT => ("t gap", vec![record.column("t")?, record.column("gap")?], false),
        PlotKind::BoundVsEmpirical => (
            "trial empirical_sup bound",
            vec![
                record.column("trial")?,
                record.column("empirical_sup")?,
                record.column("bound")?,
            ],
            false,
        ),
    };
    let mut out = format!("# {header}\n");
    for row in record.ok_rows() {
        let values: Option<Vec<f64>> = sources.iter().map(|&k| row[k].as_f64()).collect();
        let Some(values) = values else { continue };
        let line: Vec<String> = values
            .iter()
            .map(|&v| if log { v.ln() } else { v })
            .map(|v| format!("{v:.16e}"))
            .collect();
        writeln!(out, "{}", line.join(" ")).expect("writing to a String");
    }
    Ok(out)
}

/// Writes `<kind>.dat` next to the record and returns its path.
pub fn emit_plot_data(record_path: &Path, kind: PlotKind) -> Result<PathBuf> {
    let record = ResultRecord::load(record_path)?;
    let text = plot_table(&record, kind)?;
    let dir = record_path.parent().unwrap_or_else(|| Path::new("."));
    let path = dir.join(format!("{}.dat", kind.name()));
    std::fs::write(&path, text)?;
    Ok(path)
}
