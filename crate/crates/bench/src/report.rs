//! Report files: per-cell CSV, full JSON, and plot data.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{BenchError, Result};
use crate::runner::{BenchReport, CellReport};

/// Shortest round-trip decimal, so values read back bit-identical.
fn real(x: f64) -> String {
    format!("{x:?}")
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|source| BenchError::Csv {
        path: path.to_path_buf(),
        source,
    })
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> BenchError + '_ {
    move |source| BenchError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

/// One row per cell and method.
pub fn write_csv(report: &BenchReport, path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    let err = csv_err(path);
    w.write_record([
        "cell",
        "example",
        "setting",
        "k",
        "n_per_worker",
        "p",
        "n_total",
        "repetitions",
        "completed",
        "method",
        "mean_error",
        "std_error",
        "exact_support_rate",
        "tpr",
        "fpr",
        "ci_coverage",
        "wall_time_s",
    ])
    .map_err(&err)?;
    for cell in &report.cells {
        for m in &cell.methods {
            let c = &cell.config;
            w.write_record([
                cell.name.clone(),
                format!("{:?}", c.example),
                format!("{:?}", c.setting),
                c.k.to_string(),
                c.n_per_worker.to_string(),
                c.p.to_string(),
                cell.n_total.to_string(),
                cell.repetitions.to_string(),
                m.errors.len().to_string(),
                m.method.name().to_string(),
                real(m.mean_error),
                m.std_error.map(real).unwrap_or_default(),
                real(m.exact_support_rate),
                real(m.mean_tpr),
                real(m.mean_fpr),
                cell.ci_coverage.map(real).unwrap_or_default(),
                format!("{:.3}", cell.wall_time_s),
            ])
            .map_err(&err)?;
        }
    }
    w.flush().map_err(|e| BenchError::io(path, e))
}

pub fn write_json(report: &BenchReport, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(report).expect("report serializes");
    fs::write(path, text + "\n").map_err(|e| BenchError::io(path, e))
}

/// Paths written by [`emit_plot_data`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlotFiles {
    pub data: PathBuf,
    pub summary: PathBuf,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Writes `plot_data.csv` (tidy: cell, method, repetition, error; sorted)
/// and `plot_summary.dat` (whitespace-separated box statistics for gnuplot).
pub fn emit_plot_data(cells: &[CellReport], dir: &Path) -> Result<PlotFiles> {
    if cells.is_empty() {
        return Err(BenchError::Config {
            path: dir.display().to_string(),
            message: "no reports to plot".into(),
        });
    }
    let mut rows: Vec<(&str, &str, usize, f64)> = cells
        .iter()
        .flat_map(|c| {
            c.methods
                .iter()
                .flat_map(move |m| m.errors.iter().map(move |&(r, e)| (c.name.as_str(), m.method.name(), r, e)))
        })
        .collect();
    rows.sort_by(|a, b| (a.0, a.1, a.2).cmp(&(b.0, b.1, b.2)));

    let data = dir.join("plot_data.csv");
    let mut w = csv_writer(&data)?;
    let err = csv_err(&data);
    w.write_record(["cell", "method", "repetition", "error"]).map_err(&err)?;
    for (cell, method, rep, e) in &rows {
        w.write_record([cell.to_string(), method.to_string(), rep.to_string(), real(*e)])
            .map_err(&err)?;
    }
    w.flush().map_err(|e| BenchError::io(&data, e))?;
    drop(err);

    let summary = dir.join("plot_summary.dat");
    let mut out = String::from("# index cell method n mean std min q1 median q3 max\n");
    let mut groups: Vec<(&str, &str)> = rows.iter().map(|r| (r.0, r.1)).collect();
    groups.dedup();
    for (i, (cell, method)) in groups.iter().enumerate() {
        let mut v: Vec<f64> = rows
            .iter()
            .filter(|r| r.0 == *cell && r.1 == *method)
            .map(|r| r.3)
            .collect();
        v.sort_by(f64::total_cmp);
        let (mean, std) = crate::metrics::mean_std(&v);
        out.push_str(&format!(
            "{i} \"{cell}\" \"{method}\" {} {} {} {} {} {} {} {}\n",
            v.len(),
            real(mean),
            std.map(real).unwrap_or_else(|| "NaN".into()),
            real(v[0]),
            real(quantile(&v, 0.25)),
            real(quantile(&v, 0.5)),
            real(quantile(&v, 0.75)),
            real(v[v.len() - 1]),
        ));
    }
    let mut f = fs::File::create(&summary).map_err(|e| BenchError::io(&summary, e))?;
    f.write_all(out.as_bytes()).map_err(|e| BenchError::io(&summary, e))?;
    Ok(PlotFiles { data, summary })
}

/// Writes `report.csv`, `report.json` and the plot files into `dir`.
pub fn write_all(report: &BenchReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| BenchError::io(dir, e))?;
    write_csv(report, &dir.join("report.csv"))?;
    write_json(report, &dir.join("report.json"))?;
    emit_plot_data(&report.cells, dir)?;
    Ok(())
}
