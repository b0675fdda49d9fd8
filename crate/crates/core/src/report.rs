//! Report files for a sweep summary: scatter and median CSVs, a strip plot
//! as standalone SVG, and the summary itself as JSON.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint::fnv1a64;
use crate::corpus::Bucket;
use crate::error::{Error, Result};
use crate::sweep::SweepSummary;

pub const SCATTER_CSV: &str = "scatter.csv";
pub const MEDIANS_CSV: &str = "medians.csv";
pub const PLOT_SVG: &str = "scatter.svg";
pub const SUMMARY_JSON: &str = "summary.json";

fn bucket_name(b: Option<Bucket>) -> &'static str {
    b.map_or("none", Bucket::as_str)
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_default()
}

pub fn scatter_csv(s: &SweepSummary) -> String {
    let mut out = String::from("run_id,bucket,best_epoch,best_score,delta_vs_baseline\n");
    for p in &s.scatter {
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{:.6}",
            p.run_id,
            bucket_name(p.bucket),
            p.best_epoch,
            p.best_score,
            p.delta_vs_baseline
        );
    }
    out
}

pub fn medians_csv(s: &SweepSummary) -> String {
    let mut out = String::from("bucket,completed,degraded,median_best_score,iqr_best_score,above_baseline,median_familiarity\n");
    for b in &s.buckets {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            b.bucket,
            b.completed,
            b.degraded,
            opt(b.median_best_score),
            opt(b.iqr_best_score),
            b.above_baseline,
            opt(b.median_familiarity)
        );
    }
    let _ = writeln!(out, "overall,{},{},{:.6},,,", s.completed, s.degraded, s.overall_median);
    out
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;

fn marker(bucket: Option<Bucket>, x: f64, y: f64, run_id: &str) -> String {
    let r = 4.0;
    match bucket {
        Some(Bucket::Memorized) | None => format!(
            "<circle class=\"run\" data-run=\"{run_id}\" cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"{r:.1}\" fill=\"#1f77b4\" fill-opacity=\"0.6\"/>"
        ),
        Some(Bucket::InDomain) => format!(
            "<rect class=\"run\" data-run=\"{run_id}\" x=\"{:.2}\" y=\"{:.2}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"#2ca02c\" fill-opacity=\"0.6\"/>",
            x - r,
            y - r,
            2.0 * r,
            2.0 * r
        ),
        Some(Bucket::OutOfDistribution) => format!(
            "<polygon class=\"run\" data-run=\"{run_id}\" points=\"{:.2},{:.2} {:.2},{:.2} {:.2},{:.2}\" fill=\"#d62728\" fill-opacity=\"0.6\"/>",
            x,
            y - r,
            x - r,
            y + r,
            x + r,
            y + r
        ),
    }
}

/// Strip plot: one column per bucket, one marker per completed run (shape
/// by bucket, horizontal jitter hashed from the run id), a dashed baseline
/// and a median bar per bucket.
pub fn scatter_svg(s: &SweepSummary) -> String {
    let columns: Vec<Option<Bucket>> = {
        let mut c: Vec<Option<Bucket>> = s.scatter.iter().map(|p| p.bucket).collect();
        c.sort();
        c.dedup();
        c
    };
    let mut lo = s.baseline_score;
    let mut hi = s.baseline_score;
    for p in &s.scatter {
        lo = lo.min(p.best_score);
        hi = hi.max(p.best_score);
    }
    let pad = ((hi - lo) * 0.1).max(1e-3);
    let (lo, hi) = (lo - pad, hi + pad);
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let col_w = plot_w / columns.len().max(1) as f64;
    let y_of = |v: f64| TOP + (hi - v) / (hi - lo) * plot_h;
    let col_x = |b: Option<Bucket>| {
        let i = columns.iter().position(|&c| c == b).unwrap_or(0);
        LEFT + col_w * (i as f64 + 0.5)
    };

    let mut out = String::new();
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"12\">"
    );
    let _ = writeln!(out, "<rect x=\"0\" y=\"0\" width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>");
    let _ = writeln!(
        out,
        "<line class=\"axis\" x1=\"{LEFT}\" y1=\"{TOP}\" x2=\"{LEFT}\" y2=\"{:.2}\" stroke=\"black\"/>",
        TOP + plot_h
    );
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let y = y_of(v);
        let _ = writeln!(
            out,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{v:.3}</text>",
            LEFT - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        out,
        "<text x=\"16\" y=\"{:.2}\" transform=\"rotate(-90 16 {:.2})\" text-anchor=\"middle\">best validation score</text>",
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0
    );
    for &b in &columns {
        let _ = writeln!(
            out,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>",
            col_x(b),
            HEIGHT - BOTTOM + 20.0,
            bucket_name(b)
        );
    }
    let by = y_of(s.baseline_score);
    let _ = writeln!(
        out,
        "<line class=\"baseline\" x1=\"{LEFT}\" y1=\"{by:.2}\" x2=\"{:.2}\" y2=\"{by:.2}\" stroke=\"gray\" stroke-dasharray=\"6 4\"/>",
        WIDTH - RIGHT
    );
    for p in &s.scatter {
        let h = fnv1a64(p.run_id.as_bytes());
        let jitter = ((h % 10_000) as f64 / 10_000.0 - 0.5) * col_w * 0.6;
        let _ = writeln!(out, "{}", marker(p.bucket, col_x(p.bucket) + jitter, y_of(p.best_score), &p.run_id));
    }
    for b in &s.buckets {
        if let Some(m) = b.median_best_score {
            let x = col_x(Some(b.bucket));
            let y = y_of(m);
            let _ = writeln!(
                out,
                "<line class=\"median\" x1=\"{:.2}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"black\" stroke-width=\"3\"/>",
                x - col_w * 0.35,
                x + col_w * 0.35
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

fn write(dir: &Path, name: &str, text: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Writes every report file into `dir`, returning their paths.
pub fn write_report(s: &SweepSummary, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut summary = serde_json::to_string_pretty(s)?;
    summary.push('\n');
    Ok(vec![
        write(dir, SCATTER_CSV, &scatter_csv(s))?,
        write(dir, MEDIANS_CSV, &medians_csv(s))?,
        write(dir, PLOT_SVG, &scatter_svg(s))?,
        write(dir, SUMMARY_JSON, &summary)?,
    ])
}
