//! CSV and SVG output for benchmark records.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::bench::{summarize, BenchRecord};
use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "model,gi_kind,heads,d_model,seq_seconds,n_frames,repeat,duration_seconds,peak_bytes,flops";

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_csv(records: &[BenchRecord], path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| csv_error(e, path))?;
    for r in records {
        w.serialize(r).map_err(|e| csv_error(e, path))?;
    }
    w.flush().map_err(io(path))
}

pub fn read_csv(path: &Path) -> Result<Vec<BenchRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(e, path))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(e, path))).collect()
}

fn csv_error(e: csv::Error, path: &Path) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::Io {
            path: path.to_path_buf(),
            source,
        },
        kind => Error::Parse {
            path: path.display().to_string(),
            message: format!("{kind:?}"),
        },
    }
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Median time against input length, one line per model; circle area at each
/// point is proportional to peak bytes.
pub fn render_svg(records: &[BenchRecord]) -> String {
    let summaries = summarize(records);
    let (w, h, m) = (720.0, 440.0, 60.0);
    let max_x = summaries.iter().map(|s| s.seq_seconds).fold(0.0, f64::max).max(1e-9);
    let max_y = summaries.iter().map(|s| s.median_seconds).fold(0.0, f64::max).max(1e-9);
    let max_b = summaries.iter().map(|s| s.peak_bytes).max().unwrap_or(1).max(1) as f64;
    let px = |x: f64| m + x / max_x * (w - 2.0 * m);
    let py = |y: f64| h - m - y / max_y * (h - 2.0 * m);

    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<path d="M{m} {m} V{} H{}" stroke="black" fill="none"/>"#,
        h - m,
        w - m
    );
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">input length [s]</text>"#, w / 2.0, h - 20.0);
    let _ = writeln!(
        svg,
        r#"<text x="18" y="{}" transform="rotate(-90 18 {})" text-anchor="middle">median time [s] (marker area: peak bytes)</text>"#,
        h / 2.0,
        h / 2.0
    );
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{max_x}</text>"#, w - m, h - m + 16.0);
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{max_y:.3}</text>"#, m - 4.0, m + 4.0);

    let mut models: Vec<&str> = Vec::new();
    for s in &summaries {
        if !models.contains(&s.model.as_str()) {
            models.push(&s.model);
        }
    }
    for (i, model) in models.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut pts: Vec<_> = summaries.iter().filter(|s| s.model == *model).collect();
        pts.sort_by(|a, b| a.seq_seconds.total_cmp(&b.seq_seconds));
        let line: Vec<String> = pts.iter().map(|s| format!("{:.1},{:.1}", px(s.seq_seconds), py(s.median_seconds))).collect();
        let _ = writeln!(svg, r#"<polyline points="{}" stroke="{color}" fill="none" stroke-width="2"/>"#, line.join(" "));
        for s in &pts {
            let r = 3.0 + 12.0 * (s.peak_bytes as f64 / max_b).sqrt();
            let _ = writeln!(
                svg,
                r#"<circle cx="{:.1}" cy="{:.1}" r="{r:.1}" fill="{color}" fill-opacity="0.3" stroke="{color}"/>"#,
                px(s.seq_seconds),
                py(s.median_seconds)
            );
        }
        let _ = writeln!(svg, r#"<text x="{}" y="{}" fill="{color}">{model}</text>"#, m + 10.0, m + 16.0 * (i as f64 + 1.0));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes `<dir>/<basename>.csv` and `<dir>/<basename>.svg`.
pub fn emit_report(records: &[BenchRecord], dir: &Path, basename: &str) -> Result<(PathBuf, PathBuf)> {
    if records.is_empty() {
        return Err(Error::Usage("no benchmark records to report".into()));
    }
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let csv_path = dir.join(format!("{basename}.csv"));
    let svg_path = dir.join(format!("{basename}.svg"));
    write_csv(records, &csv_path)?;
    std::fs::write(&svg_path, render_svg(records)).map_err(io(&svg_path))?;
    Ok((csv_path, svg_path))
}
