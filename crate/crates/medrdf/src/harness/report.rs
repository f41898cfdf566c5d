//! Report tables and their file formats.
//!
//! A table is a flat list of cells keyed by `(defense, denoiser, attack,
//! metric)`. Emission produces:
//!
//! * `<name>.csv` — one row per cell in insertion order, full-precision
//!   values; re-running an identical experiment reproduces this file byte
//!   for byte (wall-time metrics are excluded, see below);
//! * `<name>_timing.csv` — wall-time cells (`time_s*` metrics), which are
//!   inherently non-reproducible and therefore kept out of the
//!   deterministic file;
//! * `<name>.md` — a human-readable grid with one decimal place.

use crate::error::{Error, Result};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq)]
pub struct ReportCell {
    pub defense: String,
    pub denoiser: String,
    pub attack: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportTable {
    pub title: String,
    pub cells: Vec<ReportCell>,
}

impl ReportTable {
    pub fn new(title: impl Into<String>) -> Self {
        ReportTable {
            title: title.into(),
            cells: Vec::new(),
        }
    }

    pub fn push(
        &mut self,
        defense: impl Into<String>,
        denoiser: impl Into<String>,
        attack: impl Into<String>,
        metric: impl Into<String>,
        value: f64,
    ) {
        self.cells.push(ReportCell {
            defense: defense.into(),
            denoiser: denoiser.into(),
            attack: attack.into(),
            metric: metric.into(),
            value,
        });
    }

    pub fn get(&self, defense: &str, denoiser: &str, attack: &str, metric: &str) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| {
                c.defense == defense
                    && c.denoiser == denoiser
                    && c.attack == attack
                    && c.metric == metric
            })
            .map(|c| c.value)
    }

    /// Cells excluding wall-time metrics; this is what the deterministic
    /// CSV contains.
    pub fn deterministic_cells(&self) -> impl Iterator<Item = &ReportCell> {
        self.cells.iter().filter(|c| !is_timing_metric(&c.metric))
    }

    pub fn timing_cells(&self) -> impl Iterator<Item = &ReportCell> {
        self.cells.iter().filter(|c| is_timing_metric(&c.metric))
    }
}

pub fn is_timing_metric(metric: &str) -> bool {
    metric == "time_s" || metric.starts_with("time_s@")
}

const CSV_HEADER: [&str; 6] = ["table", "defense", "denoiser", "attack", "metric", "value"];

fn write_cells<'a>(
    path: &Path,
    title: &str,
    cells: impl Iterator<Item = &'a ReportCell>,
) -> Result<()> {
    let display = path.display().to_string();
    let mut writer =
        csv::Writer::from_path(path).map_err(|e| Error::InvalidInput(format!("{display}: {e}")))?;
    let io_err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(display.clone(), io),
        other => Error::InvalidInput(format!("{display}: {other:?}")),
    };
    writer.write_record(CSV_HEADER).map_err(io_err)?;
    for cell in cells {
        writer
            .write_record([
                title,
                &cell.defense,
                &cell.denoiser,
                &cell.attack,
                &cell.metric,
                &format!("{}", cell.value),
            ])
            .map_err(io_err)?;
    }
    writer
        .flush()
        .map_err(|e| Error::io(display.clone(), e))?;
    Ok(())
}

/// Writes the deterministic CSV, the timing sidecar (only if the table has
/// timing cells), and the Markdown rendering. Returns the paths written.
pub fn emit_report(table: &ReportTable, out_dir: &Path, basename: &str) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let mut written = Vec::new();

    let csv_path = out_dir.join(format!("{basename}.csv"));
    write_cells(&csv_path, &table.title, table.deterministic_cells())?;
    written.push(csv_path);

    if table.timing_cells().next().is_some() {
        let timing_path = out_dir.join(format!("{basename}_timing.csv"));
        write_cells(&timing_path, &table.title, table.timing_cells())?;
        written.push(timing_path);
    }

    let md_path = out_dir.join(format!("{basename}.md"));
    std::fs::write(&md_path, render_markdown(table))
        .map_err(|e| Error::io(md_path.display().to_string(), e))?;
    written.push(md_path);
    Ok(written)
}

/// Reads a CSV produced by [`emit_report`] back into a table.
pub fn parse_csv(path: &Path) -> Result<ReportTable> {
    let display = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::parse(display.clone(), 0, e.to_string()))?;
    {
        let headers = reader
            .headers()
            .map_err(|e| Error::parse(display.clone(), 0, e.to_string()))?;
        if headers.iter().ne(CSV_HEADER) {
            return Err(Error::parse(display, 0, "unexpected header row"));
        }
    }
    let mut table: Option<ReportTable> = None;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let offset = e.position().map(|p| p.byte()).unwrap_or(0);
            Error::parse(display.clone(), offset, e.to_string())
        })?;
        let offset = record.position().map(|p| p.byte()).unwrap_or(0);
        if record.len() != 6 {
            return Err(Error::parse(display, offset, "expected 6 columns"));
        }
        let title = record[0].to_string();
        let table = table.get_or_insert_with(|| ReportTable::new(title.clone()));
        if table.title != title {
            return Err(Error::parse(display, offset, "mixed table names in one file"));
        }
        let value: f64 = record[5]
            .parse()
            .map_err(|e| Error::parse(display.clone(), offset, format!("bad value: {e}")))?;
        table.push(
            record[1].to_string(),
            record[2].to_string(),
            record[3].to_string(),
            record[4].to_string(),
            value,
        );
    }
    table.ok_or_else(|| Error::InvalidInput(format!("{display} contains no cells")))
}

fn push_unique(list: &mut Vec<String>, value: &str) {
    if !list.iter().any(|v| v == value) {
        list.push(value.to_string());
    }
}

/// Human-readable grid. Rows are `(defense, denoiser)` pairs and columns
/// `attack / metric` combinations; when the table has a single
/// defense/denoiser pair the attacks become the rows instead, which lays
/// sweep matrices out naturally.
pub fn render_markdown(table: &ReportTable) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# {}\n", table.title);
    if table.cells.is_empty() {
        out.push_str("(empty table)\n");
        return out;
    }

    let mut defenses = Vec::new();
    let mut attacks = Vec::new();
    let mut metrics = Vec::new();
    for c in &table.cells {
        push_unique(&mut defenses, &format!("{} | {}", c.defense, c.denoiser));
        push_unique(&mut attacks, &c.attack);
        push_unique(&mut metrics, &c.metric);
    }

    let single_defense = defenses.len() == 1 && attacks.len() > 1;
    let (row_labels, col_labels): (Vec<String>, Vec<String>) = if single_defense {
        (attacks.clone(), metrics.clone())
    } else {
        let mut cols = Vec::new();
        for a in &attacks {
            for m in &metrics {
                cols.push(if metrics.len() == 1 {
                    a.clone()
                } else {
                    format!("{a} {m}")
                });
            }
        }
        (defenses.clone(), cols)
    };

    let lookup = |row: &str, col: &str| -> Option<f64> {
        table
            .cells
            .iter()
            .find(|c| {
                let def = format!("{} | {}", c.defense, c.denoiser);
                if single_defense {
                    c.attack == row && c.metric == col
                } else {
                    let col_name = if metrics.len() == 1 {
                        c.attack.clone()
                    } else {
                        format!("{} {}", c.attack, c.metric)
                    };
                    def == row && col_name == col
                }
            })
            .map(|c| c.value)
    };

    let _ = write!(out, "| {} |", if single_defense { "attack" } else { "defense | denoiser" });
    for col in &col_labels {
        let _ = write!(out, " {col} |");
    }
    out.push('\n');
    let bars = if single_defense { 1 } else { 2 } + col_labels.len();
    let _ = writeln!(out, "|{}", "---|".repeat(bars));
    for row in &row_labels {
        let _ = write!(out, "| {row} |");
        for col in &col_labels {
            match lookup(row, col) {
                Some(v) => {
                    let _ = write!(out, " {v:.1} |");
                }
                None => {
                    let _ = write!(out, " - |");
                }
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn sample_table() -> ReportTable {
        let mut t = ReportTable::new("defense_eval");
        t.push("undefended", "none", "natural", "accuracy", 94.0);
        t.push("undefended", "none", "pgd-20", "accuracy", 3.0);
        t.push("medrdf s.p. 0.1", "mf3", "natural", "accuracy", 91.2);
        t.push("medrdf s.p. 0.1", "mf3", "pgd-20", "accuracy", 90.2);
        t.push("medrdf s.p. 0.1", "mf3", "natural", "time_s", 0.412345);
        t
    }

    #[test]
    fn csv_round_trip_reconstructs_table() {
        let dir = tempdir().unwrap();
        let table = sample_table();
        let files = emit_report(&table, dir.path(), "defense").unwrap();
        assert_eq!(files.len(), 3);
        let parsed = parse_csv(&files[0]).unwrap();
        // the deterministic file excludes the timing cell
        let expected = ReportTable {
            title: table.title.clone(),
            cells: table.deterministic_cells().cloned().collect(),
        };
        assert_eq!(parsed, expected);
        // the timing sidecar carries the rest
        let timing = parse_csv(&files[1]).unwrap();
        assert_eq!(timing.cells.len(), 1);
        assert_eq!(timing.cells[0].metric, "time_s");
    }

    #[test]
    fn emission_is_byte_identical_across_runs() {
        let dir = tempdir().unwrap();
        let table = sample_table();
        emit_report(&table, dir.path(), "a").unwrap();
        emit_report(&table, dir.path(), "b").unwrap();
        let a = std::fs::read(dir.path().join("a.csv")).unwrap();
        let b = std::fs::read(dir.path().join("b.csv")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_table_writes_header_only_csv() {
        let dir = tempdir().unwrap();
        let table = ReportTable::new("empty");
        let files = emit_report(&table, dir.path(), "empty").unwrap();
        let text = std::fs::read_to_string(&files[0]).unwrap();
        assert_eq!(text, "table,defense,denoiser,attack,metric,value\n");
        assert!(parse_csv(&files[0]).is_err());
    }

    #[test]
    fn markdown_renders_one_decimal_grid() {
        let md = render_markdown(&sample_table());
        assert!(md.contains("91.2"), "{md}");
        assert!(md.contains("| defense | denoiser |"), "{md}");
        // timing column appears in markdown (informational only)
        assert!(md.contains("0.4"), "{md}");
    }

    #[test]
    fn sweep_layout_uses_attacks_as_rows() {
        let mut t = ReportTable::new("sweep_sigma_eps");
        for eps in ["eps=0", "eps=8/255"] {
            for sig in ["sigma=0.05", "sigma=0.1"] {
                t.push("medrdf", "mf3", eps, sig, 90.0);
            }
        }
        let md = render_markdown(&t);
        assert!(md.contains("| attack |"), "{md}");
        assert!(md.contains("| eps=0 |"), "{md}");
    }
}
