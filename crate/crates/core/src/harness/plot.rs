use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::save_png;
use crate::pretext::TaskId;
use crate::tte::ImpactTrace;

const WIDTH: u32 = 640;
const HEIGHT: u32 = 400;
const MARGIN: u32 = 40;

fn task_color(t: TaskId) -> Rgb<u8> {
    match t {
        TaskId::Reconstruction => Rgb([214, 39, 40]),
        TaskId::Segmentation => Rgb([44, 160, 44]),
        TaskId::Colorization => Rgb([31, 119, 180]),
        TaskId::Jigsaw => Rgb([255, 127, 14]),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImpactSummary {
    pub image: PathBuf,
    /// Population coefficient of variation across tasks, per epoch.
    pub cv: Vec<(u64, f64)>,
    pub mean_cv: f64,
}

/// Population standard deviation over the mean; 0 for a single value or a
/// zero mean.
pub fn coefficient_of_variation(values: &[f64]) -> f64 {
    if values.len() < 2 {
        log::warn!("coefficient of variation over {} value(s) reported as 0", values.len());
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return 0.0;
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() / mean.abs()
}

pub fn impact_cv(trace: &ImpactTrace) -> Vec<(u64, f64)> {
    trace
        .by_epoch()
        .into_iter()
        .map(|(e, m)| (e, coefficient_of_variation(&m.values().copied().collect::<Vec<_>>())))
        .collect()
}

pub fn read_impact(path: &Path) -> Result<ImpactTrace> {
    if !path.is_file() {
        return Err(Error::NotFound(format!("impact trace {}", path.display())));
    }
    let bad = |reason: String| Error::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let mut trace = ImpactTrace::default();
    for row in reader.records() {
        let row = row.map_err(|e| bad(e.to_string()))?;
        if row.len() != 3 {
            return Err(bad(format!("expected 3 columns, got {}", row.len())));
        }
        let epoch: u64 = row[0].parse().map_err(|_| bad(format!("bad epoch `{}`", &row[0])))?;
        let task: TaskId = row[1].parse().map_err(|_| bad(format!("bad task `{}`", &row[1])))?;
        let mu: f64 = row[2].parse().map_err(|_| bad(format!("bad impact `{}`", &row[2])))?;
        if !mu.is_finite() {
            return Err(bad(format!("non-finite impact at epoch {epoch}")));
        }
        trace.records.push((epoch, task, mu));
    }
    if trace.records.is_empty() {
        return Err(bad("no records".into()));
    }
    Ok(trace)
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        for (ox, oy) in [(0, 0), (0, 1), (1, 0)] {
            let (px, py) = (x + ox, y + oy);
            if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                img.put_pixel(px as u32, py as u32, c);
            }
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// One curve per task of impact against epoch, written as a PNG next to the
/// trace unless `out` is given. Also reports the per-epoch imbalance.
pub fn plot_impact(trace_path: &Path, out: Option<&Path>) -> Result<ImpactSummary> {
    let trace = read_impact(trace_path)?;
    let mut curves: BTreeMap<TaskId, Vec<(u64, f64)>> = BTreeMap::new();
    for &(e, t, m) in &trace.records {
        curves.entry(t).or_default().push((e, m));
    }
    if curves.len() == 1 {
        log::warn!("single-task trace; imbalance is 0 by definition");
    }
    let (emin, emax) = trace
        .records
        .iter()
        .fold((u64::MAX, 0), |(a, b), r| (a.min(r.0), b.max(r.0)));
    let ymax = trace.records.iter().map(|r| r.2).fold(0.0, f64::max).max(f64::MIN_POSITIVE);

    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let axis = Rgb([0, 0, 0]);
    let (left, bottom, right, top) = (MARGIN as i64, (HEIGHT - MARGIN) as i64, (WIDTH - MARGIN) as i64, MARGIN as i64);
    line(&mut img, (left, bottom), (right, bottom), axis);
    line(&mut img, (left, bottom), (left, top), axis);
    let span = (emax - emin).max(1) as f64;
    let to_px = |e: u64, m: f64| {
        let x = left + ((e - emin) as f64 / span * (right - left) as f64).round() as i64;
        let y = bottom - (m / ymax * (bottom - top) as f64).round() as i64;
        (x, y)
    };
    for (task, pts) in &curves {
        let c = task_color(*task);
        for w in pts.windows(2) {
            line(&mut img, to_px(w[0].0, w[0].1), to_px(w[1].0, w[1].1), c);
        }
        if let [only] = pts.as_slice() {
            let p = to_px(only.0, only.1);
            line(&mut img, p, p, c);
        }
    }
    let image = out.map(Path::to_path_buf).unwrap_or_else(|| trace_path.with_extension("png"));
    save_png(&img, &image)?;

    let cv = impact_cv(&trace);
    let mean_cv = cv.iter().map(|c| c.1).sum::<f64>() / cv.len() as f64;
    for (e, c) in &cv {
        println!("epoch {e}\tcv {c:.6}");
    }
    println!("mean cv {mean_cv:.6}");
    Ok(ImpactSummary { image, cv, mean_cv })
}
