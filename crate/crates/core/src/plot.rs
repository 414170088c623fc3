//! Learning curves: running averages over episode returns, resampled onto a
//! frame grid, written as CSV and as a plain SVG line chart.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::{running_average, RUNNING_AVERAGE_WINDOW};
use crate::trainer::EpisodeRecord;

/// `(frame, running average)` per finished episode, in episode order.
pub fn learning_curve(episodes: &[EpisodeRecord]) -> Vec<(u64, f64)> {
    let returns: Vec<f64> = episodes.iter().map(|e| e.episode_return).collect();
    episodes
        .iter()
        .zip(running_average(&returns, RUNNING_AVERAGE_WINDOW))
        .map(|(e, r)| (e.frame, r))
        .collect()
}

/// `points` evenly spaced frames ending at `total_frames`.
pub fn frame_grid(total_frames: u64, points: usize) -> Vec<u64> {
    let points = points.max(1) as u64;
    (1..=points).map(|i| total_frames * i / points).collect()
}

/// Last curve value at or before each grid frame; `NaN` before the first episode.
pub fn resample(curve: &[(u64, f64)], grid: &[u64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(grid.len());
    let mut j = 0;
    let mut last = f64::NAN;
    for &g in grid {
        while j < curve.len() && curve[j].0 <= g {
            last = curve[j].1;
            j += 1;
        }
        out.push(last);
    }
    out
}

/// Pointwise median over curves, skipping `NaN`s; `NaN` where every curve is.
pub fn median_curve(curves: &[Vec<f64>]) -> Vec<f64> {
    let len = curves.iter().map(Vec::len).max().unwrap_or(0);
    (0..len)
        .map(|i| {
            let mut v: Vec<f64> = curves.iter().filter_map(|c| c.get(i).copied()).filter(|x| !x.is_nan()).collect();
            if v.is_empty() {
                return f64::NAN;
            }
            v.sort_by(f64::total_cmp);
            let m = v.len() / 2;
            if v.len() % 2 == 1 {
                v[m]
            } else {
                0.5 * (v[m - 1] + v[m])
            }
        })
        .collect()
}

pub fn read_episodes(path: &Path) -> Result<Vec<EpisodeRecord>> {
    let err = |e: csv::Error| Error::format(path, e.to_string());
    let mut r = csv::Reader::from_path(path).map_err(err)?;
    let mut out = Vec::new();
    for row in r.records() {
        let row = row.map_err(err)?;
        let field = |i: usize| row.get(i).ok_or_else(|| Error::format(path, format!("row has {} columns", row.len())));
        let bad = |s: &str| Error::format(path, format!("bad value `{s}`"));
        let (f, e, ret, len) = (field(0)?, field(1)?, field(2)?, field(3)?);
        out.push(EpisodeRecord {
            frame: f.parse().map_err(|_| bad(f))?,
            env: e.parse().map_err(|_| bad(e))?,
            episode_return: ret.parse().map_err(|_| bad(ret))?,
            length: len.parse().map_err(|_| bad(len))?,
        });
    }
    Ok(out)
}

pub fn write_curves_csv(path: &Path, grid: &[u64], series: &[(String, Vec<f64>)]) -> Result<()> {
    let err = |e: csv::Error| Error::format(path, e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    let mut header = vec!["frame".to_string()];
    header.extend(series.iter().map(|(l, _)| l.clone()));
    w.write_record(&header).map_err(err)?;
    for (i, g) in grid.iter().enumerate() {
        let mut row = vec![g.to_string()];
        row.extend(series.iter().map(|(_, v)| v.get(i).map_or(String::new(), |x| x.to_string())));
        w.write_record(&row).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// Line chart of `series` over `grid`; `NaN` points break the line.
pub fn write_svg(path: &Path, title: &str, grid: &[u64], series: &[(String, Vec<f64>)]) -> Result<()> {
    let (w, h, pad) = (720.0, 420.0, 56.0);
    let x_max = grid.last().copied().unwrap_or(1).max(1) as f64;
    let ys = series.iter().flat_map(|(_, v)| v.iter().copied()).filter(|y| y.is_finite());
    let (mut lo, mut hi) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), y| (a.min(y), b.max(y)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-9 {
        lo -= 0.5;
        hi += 0.5;
    }
    let px = |x: f64| pad + x / x_max * (w - 2.0 * pad);
    let py = |y: f64| h - pad - (y - lo) / (hi - lo) * (h - 2.0 * pad);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<path d="M{pad} {pad} V{} H{}" fill="none" stroke="black"/>"#,
        h - pad,
        w - pad
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">frames</text>"#, w / 2.0, h - 12.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{hi:.3}</text>"#, pad - 4.0, pad + 4.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{lo:.3}</text>"#, pad - 4.0, h - pad);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{x_max}</text>"#, w - pad, h - pad + 16.0);
    for (k, (label, values)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let mut d = String::new();
        let mut pen_down = false;
        for (&g, &y) in grid.iter().zip(values) {
            if y.is_finite() {
                let _ = write!(d, "{}{:.1} {:.1} ", if pen_down { "L" } else { "M" }, px(g as f64), py(y));
                pen_down = true;
            } else {
                pen_down = false;
            }
        }
        let _ = writeln!(s, r#"<path d="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, d.trim_end());
        let ly = pad + 16.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{ly}" fill="{color}">{}</text>"#,
            w - pad - 150.0,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
