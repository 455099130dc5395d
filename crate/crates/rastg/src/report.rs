//! Heatmap report documents and their PNG rendering.

use std::path::Path;

use image::codecs::png::PngEncoder;
use image::{ImageEncoder, Rgb, RgbImage};
use rastg_core::feedback::{HeatmapReport, PeriodSummary, REPORT_VERSION};

use crate::error::{Error, Result};
use crate::fsutil;

pub fn write_report(path: &Path, report: &HeatmapReport) -> Result<()> {
    fsutil::write_json(path, report)
}

/// Reads a report and checks its format tag and version.
pub fn read_report(path: &Path) -> Result<HeatmapReport> {
    let r: HeatmapReport = fsutil::read_json(path)?;
    if r.format != HeatmapReport::FORMAT || r.version != REPORT_VERSION {
        return Err(Error::format(
            path,
            format!(
                "expected {} version {REPORT_VERSION}, found {} version {}",
                HeatmapReport::FORMAT,
                r.format,
                r.version
            ),
        ));
    }
    Ok(r)
}

pub fn write_summary(path: &Path, summary: &PeriodSummary) -> Result<()> {
    fsutil::write_json(path, summary)
}

const STOPS: [(f64, [u8; 3]); 5] = [
    (0.0, [10, 10, 40]),
    (0.25, [70, 20, 120]),
    (0.5, [190, 50, 80]),
    (0.75, [250, 140, 30]),
    (1.0, [252, 250, 160]),
];

fn color(x: f64) -> Rgb<u8> {
    let x = x.clamp(0.0, 1.0);
    let i = STOPS
        .iter()
        .position(|(p, _)| *p >= x)
        .unwrap_or(STOPS.len() - 1)
        .max(1);
    let ((p0, c0), (p1, c1)) = (STOPS[i - 1], STOPS[i]);
    let f = (x - p0) / (p1 - p0);
    Rgb(std::array::from_fn(|k| {
        (f64::from(c0[k]) + f * (f64::from(c1[k]) - f64::from(c0[k]))).round() as u8
    }))
}

/// Frames run top to bottom, joints left to right; each frame is scaled to
/// its own maximum share.
pub fn render_heatmap(report: &HeatmapReport, cell: u32) -> RgbImage {
    let rows = &report.heatmap.contributions;
    let v = rows.first().map_or(0, Vec::len) as u32;
    let mut img = RgbImage::new((v * cell).max(1), (rows.len() as u32 * cell).max(1));
    for (t, row) in rows.iter().enumerate() {
        let peak = row.iter().copied().fold(0.0, f64::max);
        for (j, x) in row.iter().enumerate() {
            let c = color(if peak > 0.0 { x / peak } else { 0.0 });
            for dy in 0..cell {
                for dx in 0..cell {
                    img.put_pixel(j as u32 * cell + dx, t as u32 * cell + dy, c);
                }
            }
        }
    }
    img
}

pub fn write_heatmap_png(path: &Path, report: &HeatmapReport) -> Result<()> {
    let img = render_heatmap(report, 8);
    let mut bytes = Vec::new();
    PngEncoder::new(&mut bytes)
        .write_image(img.as_raw(), img.width(), img.height(), image::ExtendedColorType::Rgb8)
        .map_err(|e| Error::format(path, e.to_string()))?;
    fsutil::write_atomic(path, &bytes)
}
