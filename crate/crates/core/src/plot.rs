//! SVG figures: held-out accuracy curves, normalized adjacency heatmaps and
//! pose-sequence strips.

use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::hgc::NormalizedAdjacency;
use crate::recognizer::TrainLogRow;
use crate::skeleton::{PoseSequence, COCO_BONES};

fn draw_err<E: std::fmt::Display>(path: &Path) -> impl Fn(E) -> Error + '_ {
    move |e| Error::Io { path: path.into(), source: std::io::Error::other(e.to_string()) }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub const CONDITION_NAMES: [&str; 3] = ["NM", "BG", "CL"];

/// One held-out rank-1 curve per probe condition, as percentages.
pub fn plot_curves(rows: &[TrainLogRow], dir: &Path) -> Result<Vec<PathBuf>> {
    ensure_dir(dir)?;
    let max_epoch = rows.iter().map(|r| r.epoch).max().unwrap_or(0).max(1) as f64;
    let mut out = Vec::new();
    for (c, name) in CONDITION_NAMES.iter().enumerate() {
        let path = dir.join(format!("curve_{}.svg", name.to_lowercase()));
        let points: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.val_by_condition[c].is_finite())
            .map(|r| (r.epoch as f64, 100.0 * r.val_by_condition[c]))
            .collect();
        {
            let err = draw_err(&path);
            let root = SVGBackend::new(&path, (640, 400)).into_drawing_area();
            root.fill(&WHITE).map_err(&err)?;
            let mut chart = ChartBuilder::on(&root)
                .caption(format!("{name} held-out rank-1"), ("sans-serif", 18))
                .margin(12)
                .x_label_area_size(32)
                .y_label_area_size(44)
                .build_cartesian_2d(0.0..max_epoch, 0.0..100.0)
                .map_err(&err)?;
            chart.configure_mesh().x_desc("epoch").y_desc("rank-1 (%)").draw().map_err(&err)?;
            chart.draw_series(LineSeries::new(points.iter().copied(), &BLUE)).map_err(&err)?;
            chart.draw_series(points.iter().map(|&p| Circle::new(p, 3, BLUE.filled()))).map_err(&err)?;
            root.present().map_err(&err)?;
        }
        out.push(path);
    }
    Ok(out)
}

fn heat(v: f64, max: f64) -> RGBColor {
    let t = if max > 0.0 { (v / max).clamp(0.0, 1.0) } else { 0.0 };
    let c = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    RGBColor(c(255.0, 8.0), c(255.0, 48.0), c(255.0, 107.0))
}

/// One heatmap per adjacency, named by hypergraph order.
pub fn plot_adjacency(adjs: &[NormalizedAdjacency], dir: &Path) -> Result<Vec<PathBuf>> {
    ensure_dir(dir)?;
    let mut out = Vec::new();
    for a in adjs {
        let n = a.nodes();
        let path = dir.join(format!("adjacency_order{}.svg", a.source_order));
        {
            let err = draw_err(&path);
            let root = SVGBackend::new(&path, (480, 480)).into_drawing_area();
            root.fill(&WHITE).map_err(&err)?;
            let mut chart = ChartBuilder::on(&root)
                .caption(format!("normalized adjacency, order {}", a.source_order), ("sans-serif", 16))
                .margin(12)
                .build_cartesian_2d(0..n as i32, n as i32..0)
                .map_err(&err)?;
            let max = a.matrix.iter().fold(0.0f64, |m, v| m.max(*v));
            chart
                .draw_series((0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| {
                    let (x, y) = (j as i32, i as i32);
                    Rectangle::new([(x, y), (x + 1, y + 1)], heat(a.matrix[(i, j)], max).filled())
                }))
                .map_err(&err)?;
            root.present().map_err(&err)?;
        }
        out.push(path);
    }
    Ok(out)
}

/// Skeletons of `count` evenly spaced frames side by side, in image
/// coordinates (y down).
pub fn plot_pose_strip(seq: &PoseSequence, count: usize, title: &str, path: &Path) -> Result<()> {
    if count == 0 {
        return Err(Error::Config("pose strip needs at least one frame".into()));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    let frames: Vec<usize> = (0..count).map(|k| k * seq.frames() / count).collect();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &t in &frames {
        for p in seq.frame(t) {
            x0 = x0.min(p[0]);
            x1 = x1.max(p[0]);
            y0 = y0.min(p[1]);
            y1 = y1.max(p[1]);
        }
    }
    let pad = 0.1 * (y1 - y0).max(x1 - x0).max(1e-9);
    let err = draw_err(path);
    let root = SVGBackend::new(path, (180 * count as u32, 300)).into_drawing_area();
    root.fill(&WHITE).map_err(&err)?;
    let root = root.titled(title, ("sans-serif", 16)).map_err(&err)?;
    for (panel, &t) in root.split_evenly((1, count)).iter().zip(&frames) {
        let mut chart = ChartBuilder::on(panel)
            .margin(6)
            .build_cartesian_2d(x0 - pad..x1 + pad, y1 + pad..y0 - pad)
            .map_err(&err)?;
        let pts = seq.frame(t);
        if seq.joints() == COCO_BONES.iter().map(|&(a, b)| a.max(b)).max().unwrap_or(0) + 1 {
            chart
                .draw_series(COCO_BONES.iter().map(|&(a, b)| {
                    PathElement::new(vec![(pts[a][0], pts[a][1]), (pts[b][0], pts[b][1])], BLACK.stroke_width(2))
                }))
                .map_err(&err)?;
        }
        chart.draw_series(pts.iter().map(|p| Circle::new((p[0], p[1]), 3, RED.filled()))).map_err(&err)?;
    }
    root.present().map_err(&err)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hgc::adjacency_set;
    use crate::skeleton::{canonical_hypergraphs, SkeletonTopology};

    #[test]
    fn writes_deterministic_svgs() {
        let dir = tempfile::tempdir().unwrap();
        let hs = canonical_hypergraphs(&SkeletonTopology::coco17()).unwrap();
        let adj = adjacency_set(&hs).unwrap();
        let files = plot_adjacency(&adj, dir.path()).unwrap();
        assert_eq!(files.len(), 3);
        let first = std::fs::read(&files[0]).unwrap();
        plot_adjacency(&adj, dir.path()).unwrap();
        assert_eq!(std::fs::read(&files[0]).unwrap(), first);

        let rows: Vec<TrainLogRow> = (0..4)
            .map(|e| TrainLogRow { epoch: e, loss_alpha: 1.0, loss_beta: 1.0, val_rank1: 0.5, val_by_condition: [0.5, 0.4, f64::NAN] })
            .collect();
        assert_eq!(plot_curves(&rows, dir.path()).unwrap().len(), 3);

        let xy: Vec<[f64; 2]> = (0..8 * 17).map(|i| [i as f64, (i % 17) as f64]).collect();
        let seq = PoseSequence::from_xy(17, &xy, None).unwrap();
        let p = dir.path().join("s/strip.svg");
        plot_pose_strip(&seq, 4, "id000 90", &p).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().starts_with("<svg"));
    }
}
