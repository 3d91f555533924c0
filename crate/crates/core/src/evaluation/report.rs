use std::fs;
use std::path::{Path, PathBuf};

use super::DepthMetrics;
use crate::data::write_rgb_png;
use crate::error::{Error, Result};
use crate::frame::{DepthMap, ImageFrame};

/// One labelled row of a metric table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub name: String,
    pub metrics: DepthMetrics,
}

/// Input image, prediction and optional ground truth shown side by side.
#[derive(Debug, Clone)]
pub struct DepthPanel {
    pub name: String,
    pub input: ImageFrame,
    pub pred: DepthMap,
    pub gt: Option<DepthMap>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReportOptions {
    /// Depths mapped to the first and last colormap entries.
    pub depth_range: (f64, f64),
    /// Label of the root-mean-square column.
    pub rms_label: &'static str,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            depth_range: (0.0, 10.0),
            rms_label: "RMS",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub table: PathBuf,
    pub csv: PathBuf,
    pub panels: Vec<PathBuf>,
}

/// Viridis sampled at nine evenly spaced points.
const VIRIDIS: [[u8; 3]; 9] = [
    [0x44, 0x01, 0x54],
    [0x47, 0x2d, 0x7b],
    [0x3b, 0x52, 0x8b],
    [0x2c, 0x72, 0x8e],
    [0x21, 0x90, 0x8c],
    [0x27, 0xad, 0x81],
    [0x5d, 0xc8, 0x63],
    [0xaa, 0xdc, 0x32],
    [0xfd, 0xe7, 0x25],
];

/// Colormap lookup for `t` in `[0, 1]` (clamped), channels in `[0, 1]`.
pub fn viridis(t: f64) -> [f64; 3] {
    let t = if t.is_nan() { 0.0 } else { t.clamp(0.0, 1.0) };
    let x = t * (VIRIDIS.len() - 1) as f64;
    let i = (x.floor() as usize).min(VIRIDIS.len() - 2);
    let f = x - i as f64;
    [0, 1, 2].map(|c| {
        let (a, b) = (VIRIDIS[i][c] as f64, VIRIDIS[i + 1][c] as f64);
        (a + (b - a) * f) / 255.0
    })
}

pub fn depth_to_rgb(depth: &DepthMap, (lo, hi): (f64, f64)) -> ImageFrame {
    let colors: Vec<[f64; 3]> = depth.data().iter().map(|&d| viridis((d - lo) / (hi - lo))).collect();
    let w = depth.width();
    ImageFrame::from_fn(w, depth.height(), 3, |c, y, x| colors[y * w + x][c])
}

/// Fixed-width text table with the given root-mean-square label.
pub fn format_table(rows: &[MetricRow], rms_label: &str) -> String {
    let name_w = rows.iter().map(|r| r.name.chars().count()).max().unwrap_or(0).max(6);
    let headers = ["AbsRel", rms_label, "δ₁", "δ₂", "δ₃"];
    let mut out = format!("{:<name_w$}", "Method");
    for h in headers {
        out.push_str(&format!(" | {h:>8}"));
    }
    out.push('\n');
    out.push_str(&"-".repeat(name_w));
    for _ in headers {
        out.push_str(&format!("-+-{}", "-".repeat(8)));
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{:<name_w$}", r.name));
        for v in r.metrics.to_array() {
            out.push_str(&format!(" | {v:>8.4}"));
        }
        out.push('\n');
    }
    out
}

fn format_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("name,abs_rel,rms,delta1,delta2,delta3\n");
    for r in rows {
        let m = r.metrics;
        out.push_str(&format!(
            "{},{:.9},{:.9},{:.9},{:.9},{:.9}\n",
            r.name.replace(',', ";"),
            m.abs_rel,
            m.rms,
            m.delta1,
            m.delta2,
            m.delta3
        ));
    }
    out
}

fn panel_image(panel: &DepthPanel, range: (f64, f64)) -> Result<ImageFrame> {
    let (w, h) = (panel.pred.width(), panel.pred.height());
    let mut tiles = vec![panel.input.clone(), depth_to_rgb(&panel.pred, range)];
    if let Some(gt) = &panel.gt {
        tiles.push(depth_to_rgb(gt, range));
    }
    if tiles.iter().any(|t| t.width() != w || t.height() != h || t.channels() != 3) {
        return Err(Error::Shape(format!("panel '{}' tiles differ in size", panel.name)));
    }
    let n = tiles.len();
    Ok(ImageFrame::from_fn(n * w, h, 3, |c, y, x| tiles[x / w].get(c, y, x % w)))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `metrics.txt`, `metrics.csv` and one PNG per panel into `dir`.
pub fn render_report(rows: &[MetricRow], panels: &[DepthPanel], dir: &Path, options: &ReportOptions) -> Result<ReportFiles> {
    if rows.is_empty() {
        return Err(Error::Config("a report needs at least one metric row".into()));
    }
    let (lo, hi) = options.depth_range;
    if !(hi > lo) {
        return Err(Error::Config(format!("empty depth range [{lo}, {hi}]")));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let table = dir.join("metrics.txt");
    write(&table, &format_table(rows, options.rms_label))?;
    let csv = dir.join("metrics.csv");
    write(&csv, &format_csv(rows))?;
    let mut files = Vec::with_capacity(panels.len());
    for p in panels {
        let path = dir.join(format!("{}.png", p.name));
        write_rgb_png(&path, &panel_image(p, options.depth_range)?)?;
        files.push(path);
    }
    Ok(ReportFiles { table, csv, panels: files })
}
