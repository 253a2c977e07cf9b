use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::config::OutputFormat;
use super::sweep::{ResultRow, RunManifest, SweepReport};
use crate::error::{Error, Result};

pub const CSV_HEADER: &str =
    "sweep_value,estimator,provider,mse,mse_lo,mse_hi,bias2,bias2_lo,bias2_hi,var,var_lo,var_hi,seeds,seconds";

/// Rows as CSV with the fixed column order of [`CSV_HEADER`].
pub fn render_csv(rows: &[ResultRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    if rows.is_empty() {
        return Ok(format!("{CSV_HEADER}\n"));
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Minimal line plot of one metric (`mse`, `bias2` or `var`): log-scaled y,
/// one polyline per estimator.
pub fn render_svg(report: &SweepReport, metric: &str) -> String {
    let (w, h, left, right, top, bottom) = (640.0, 400.0, 70.0, 180.0, 30.0, 50.0);
    let value = |r: &ResultRow| match metric {
        "bias2" => r.bias2,
        "var" => r.var,
        _ => r.mse,
    };
    let mut names: Vec<&str> = Vec::new();
    for r in &report.rows {
        if !names.contains(&r.estimator.as_str()) {
            names.push(&r.estimator);
        }
    }
    let xs: Vec<f64> = report.points.iter().map(|p| p.sweep_value).collect();
    let positive: Vec<f64> = report.rows.iter().map(value).filter(|v| *v > 0.0).collect();
    let floor = positive.iter().cloned().fold(f64::INFINITY, f64::min);
    let (y_lo, y_hi) = if positive.is_empty() {
        (-1.0, 0.0)
    } else {
        let lo = floor.log10().floor();
        let hi = positive
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max)
            .log10()
            .ceil();
        (lo, if hi > lo { hi } else { lo + 1.0 })
    };
    let finite_x: Vec<f64> = xs.iter().cloned().filter(|x| x.is_finite()).collect();
    let x_lo = finite_x.iter().cloned().fold(f64::INFINITY, f64::min);
    let x_hi = finite_x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if x_hi > x_lo { x_hi - x_lo } else { 1.0 };
    let px = |x: f64| left + (x.clamp(x_lo, x_lo + span) - x_lo) / span * (w - left - right);
    let py = |v: f64| {
        let l = if v > 0.0 { v.log10() } else { y_lo };
        top + (y_hi - l) / (y_hi - y_lo) * (h - top - bottom)
    };
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="18" font-family="sans-serif" font-size="13">{} vs {}</text>"#,
        left, metric, report.axis
    );
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{}" x2="{}" y2="{}" stroke="black"/><line x1="{left}" y1="{top}" x2="{left}" y2="{}" stroke="black"/>"#,
        h - bottom,
        w - right,
        h - bottom,
        h - bottom
    );
    let mut decade = y_lo;
    while decade <= y_hi {
        let y = py(10f64.powf(decade));
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" font-family="sans-serif" font-size="10" text-anchor="end">1e{}</text>"#,
            left - 6.0,
            y + 3.0,
            decade
        );
        decade += 1.0;
    }
    for &x in &finite_x {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" font-family="sans-serif" font-size="10" text-anchor="middle">{x}</text>"#,
            px(x),
            h - bottom + 15.0
        );
    }
    for (i, name) in names.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = report
            .rows
            .iter()
            .filter(|r| r.estimator == *name && r.sweep_value.is_finite())
            .map(|r| format!("{:.2},{:.2}", px(r.sweep_value), py(value(r))))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{colour}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = top + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" font-family="sans-serif" font-size="11" fill="{colour}">{}</text>"#,
            w - right + 10.0,
            ly + 4.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn write(dir: &Path, name: &str, contents: &str, digests: &mut RunManifest) -> Result<PathBuf> {
    let path = dir.join(name);
    fs::write(&path, contents)?;
    let digest = Sha256::digest(contents.as_bytes());
    digests.output_digests.insert(
        name.to_string(),
        digest.iter().map(|b| format!("{b:02x}")).collect(),
    );
    Ok(path)
}

/// Writes `results.csv`, `results.json` and per-metric SVGs (per `format`),
/// then `manifest.json` with digests of everything written.
pub fn emit_outputs(report: &SweepReport, dir: &Path, format: OutputFormat) -> Result<RunManifest> {
    if report.rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    fs::create_dir_all(dir)?;
    let mut manifest = report.manifest.clone();
    manifest.output_digests.clear();
    if format.includes(OutputFormat::Csv) {
        write(
            dir,
            "results.csv",
            &render_csv(&report.rows)?,
            &mut manifest,
        )?;
    }
    if format.includes(OutputFormat::Json) {
        write(
            dir,
            "results.json",
            &serde_json::to_string_pretty(report)?,
            &mut manifest,
        )?;
    }
    if format.includes(OutputFormat::Svg) {
        for metric in ["mse", "bias2", "var"] {
            write(
                dir,
                &format!("{metric}.svg"),
                &render_svg(report, metric),
                &mut manifest,
            )?;
        }
    }
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}
