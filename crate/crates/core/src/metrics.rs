//! Overlap, contour-distance and temporal-coherence measures for predicted
//! label sequences.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{LabelMask, BLOOD_POOL, MYOCARDIUM};
use crate::phantom::Preset;

/// Dice overlap of class `cls`. Two masks without the class agree perfectly (1).
pub fn dice(pred: &LabelMask, gt: &LabelMask, cls: u8) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::shape(
            "dice",
            format!("{:?} vs {:?}", pred.dims(), gt.dims()),
        ));
    }
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (ip, ig) = (p == cls, g == cls);
        a += ip as usize;
        b += ig as usize;
        both += (ip && ig) as usize;
    }
    Ok(if a + b == 0 { 1.0 } else { 2.0 * both as f64 / (a + b) as f64 })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    Endocardium,
    Epicardium,
}

impl Boundary {
    pub fn name(self) -> &'static str {
        match self {
            Boundary::Endocardium => "endocardium",
            Boundary::Epicardium => "epicardium",
        }
    }
}

/// Closed polyline in pixel coordinates; the last point connects back to the first.
#[derive(Clone, Debug, PartialEq)]
pub struct Contour {
    pub points: Vec<(f64, f64)>,
    pub region: Boundary,
}

impl Contour {
    pub fn segments(&self) -> impl Iterator<Item = ((f64, f64), (f64, f64))> + '_ {
        let n = self.points.len();
        (0..n).map(move |i| (self.points[i], self.points[(i + 1) % n]))
    }

    /// Enclosed area by the shoelace formula (always non-negative).
    pub fn area(&self) -> f64 {
        self.segments().map(|(a, b)| a.0 * b.1 - b.0 * a.1).sum::<f64>().abs() / 2.0
    }
}

/// Iso-0.5 line of a binary image by marching squares.
///
/// Samples sit at pixel centres and the image is padded with zeros, so every
/// region yields closed loops. Crossings of a binary field fall on edge
/// midpoints, which are tracked as doubled integer coordinates for exact
/// chaining. Where a cell has two diagonal foreground corners the
/// foreground is treated as connected. The loop enclosing the largest area
/// is returned.
pub fn trace_boundary(inside: &[bool], height: usize, width: usize, region: Boundary) -> Result<Contour> {
    if inside.len() != height * width {
        return Err(Error::shape("trace_boundary", "mask length does not match extents"));
    }
    let at = |x: i64, y: i64| -> bool {
        x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height && inside[y as usize * width + x as usize]
    };

    // Edge midpoints of the cell with top-left sample (x, y), doubled.
    let mut links: HashMap<(i64, i64), Vec<(i64, i64)>> = HashMap::new();
    let mut link = |a: (i64, i64), b: (i64, i64)| {
        links.entry(a).or_default().push(b);
        links.entry(b).or_default().push(a);
    };
    for y in -1..height as i64 {
        for x in -1..width as i64 {
            let tl = at(x, y);
            let tr = at(x + 1, y);
            let br = at(x + 1, y + 1);
            let bl = at(x, y + 1);
            let top = (2 * x + 1, 2 * y);
            let right = (2 * x + 2, 2 * y + 1);
            let bottom = (2 * x + 1, 2 * y + 2);
            let left = (2 * x, 2 * y + 1);
            let case = (tl as u8) << 3 | (tr as u8) << 2 | (br as u8) << 1 | bl as u8;
            match case {
                0b0000 | 0b1111 => {}
                0b1000 | 0b0111 => link(left, top),
                0b0100 | 0b1011 => link(top, right),
                0b0010 | 0b1101 => link(right, bottom),
                0b0001 | 0b1110 => link(bottom, left),
                0b1100 | 0b0011 => link(left, right),
                0b0110 | 0b1001 => link(top, bottom),
                // Saddles: keep the two foreground corners joined.
                0b1010 => {
                    link(left, bottom);
                    link(top, right);
                }
                0b0101 => {
                    link(left, top);
                    link(bottom, right);
                }
                _ => unreachable!(),
            }
        }
    }
    if links.is_empty() {
        return Err(Error::Contour {
            boundary: region.name(),
            reason: "mask region is empty".into(),
        });
    }

    // Walk loops in a fixed vertex order so the result is deterministic.
    let ordered: BTreeMap<(i64, i64), Vec<(i64, i64)>> = links.into_iter().collect();
    let mut visited: HashMap<(i64, i64), bool> = HashMap::new();
    let mut best: Option<(f64, Vec<(f64, f64)>)> = None;
    for &start in ordered.keys() {
        if visited.contains_key(&start) {
            continue;
        }
        let mut loop_pts = vec![start];
        visited.insert(start, true);
        let (mut prev, mut cur) = (start, ordered[&start][0]);
        while cur != start {
            visited.insert(cur, true);
            loop_pts.push(cur);
            let nbrs = &ordered[&cur];
            let next = if nbrs[0] != prev || nbrs.len() == 1 { nbrs[0] } else { nbrs[1] };
            prev = cur;
            cur = next;
        }
        let pts: Vec<(f64, f64)> = loop_pts.iter().map(|&(x, y)| (x as f64 / 2.0, y as f64 / 2.0)).collect();
        let area = Contour { points: pts.clone(), region }.area();
        if best.as_ref().is_none_or(|(a, _)| area > *a) {
            best = Some((area, pts));
        }
    }
    let (_, points) = best.expect("at least one loop");
    Ok(Contour { points, region })
}

/// Endocardial (blood pool) and epicardial (blood pool plus myocardium) contours.
pub fn extract_contours(mask: &LabelMask) -> Result<(Contour, Contour)> {
    let (h, w) = mask.dims();
    if mask.count(BLOOD_POOL) == 0 {
        return Err(Error::Contour {
            boundary: Boundary::Endocardium.name(),
            reason: "mask has no blood-pool pixels".into(),
        });
    }
    if mask.count(MYOCARDIUM) == 0 {
        return Err(Error::Contour {
            boundary: Boundary::Epicardium.name(),
            reason: "mask has no myocardium pixels".into(),
        });
    }
    let endo = trace_boundary(&mask.select(&[BLOOD_POOL]), h, w, Boundary::Endocardium)?;
    let epi = trace_boundary(&mask.select(&[MYOCARDIUM, BLOOD_POOL]), h, w, Boundary::Epicardium)?;
    Ok((endo, epi))
}

/// Distance from `p` to the segment `a`–`b`.
pub fn point_segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p.0 - a.0 - t * dx).hypot(p.1 - a.1 - t * dy)
}

fn directed_mean_distance(a: &Contour, b: &Contour) -> f64 {
    let total: f64 = a
        .points
        .iter()
        .map(|&p| {
            b.segments()
                .map(|(s0, s1)| point_segment_distance(p, s0, s1))
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    total / a.points.len() as f64
}

/// Average perpendicular distance in pixels: the mean distance from each
/// vertex of one contour to the nearest segment of the other, averaged over
/// both directions.
pub fn apd(a: &Contour, b: &Contour) -> f64 {
    (directed_mean_distance(a, b) + directed_mean_distance(b, a)) / 2.0
}

/// Per-frame area of class `cls` in physical units (pixels × spacing²).
pub fn area_curve(masks: &[LabelMask], cls: u8, pixel_spacing: f64) -> Vec<f64> {
    masks
        .iter()
        .map(|m| m.count(cls) as f64 * pixel_spacing * pixel_spacing)
        .collect()
}

/// Mean squared second difference of `curve` divided by its squared mean.
/// An all-zero curve scores 0.
pub fn temporal_smoothness(curve: &[f64]) -> Result<f64> {
    if curve.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "temporal_smoothness needs at least 3 values, got {}",
            curve.len()
        )));
    }
    let mean = curve.iter().sum::<f64>() / curve.len() as f64;
    let msd = curve
        .windows(3)
        .map(|w| (w[2] - 2.0 * w[1] + w[0]).powi(2))
        .sum::<f64>()
        / (curve.len() - 2) as f64;
    Ok(if mean == 0.0 { 0.0 } else { msd / (mean * mean) })
}

// ---------------------------------------------------------------------------
// Reports

/// Scores of one predicted frame against its ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: usize,
    pub dice_myo: f64,
    pub dice_bp: f64,
    /// NaN when either mask lacks the region.
    pub apd_endo: f64,
    pub apd_epi: f64,
    pub area_myo: f64,
    pub area_bp: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub preset: Option<Preset>,
    pub frames: Vec<FrameMetrics>,
    pub area_curve_bp: Vec<f64>,
    pub gt_area_curve_bp: Vec<f64>,
    pub smoothness_bp: f64,
    pub gt_smoothness_bp: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    /// Number of finite values the statistics are taken over.
    pub count: usize,
}

impl MeanStd {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.into_iter().filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            return MeanStd { mean: f64::NAN, std: f64::NAN, count: 0 };
        }
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
        MeanStd { mean, std: var.sqrt(), count: v.len() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub preset: Option<Preset>,
    pub n_frames: usize,
    pub dice_myo: MeanStd,
    pub dice_bp: MeanStd,
    pub apd_endo: MeanStd,
    pub apd_epi: MeanStd,
    pub smoothness_bp: f64,
    pub gt_smoothness_bp: f64,
}

fn contour_distance(pred: &LabelMask, gt: &LabelMask, spacing: f64) -> (f64, f64) {
    match (extract_contours(pred), extract_contours(gt)) {
        (Ok((pe, pp)), Ok((ge, gp))) => (apd(&pe, &ge) * spacing, apd(&pp, &gp) * spacing),
        _ => (f64::NAN, f64::NAN),
    }
}

/// Scores a predicted sequence frame by frame and along time.
pub fn evaluate_sequence(
    preds: &[LabelMask],
    gts: &[LabelMask],
    pixel_spacing: f64,
    preset: Option<Preset>,
) -> Result<MetricsReport> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} predicted masks for {} ground-truth masks",
            preds.len(),
            gts.len()
        )));
    }
    let area_px = pixel_spacing * pixel_spacing;
    let mut frames = Vec::with_capacity(preds.len());
    for (t, (p, g)) in preds.iter().zip(gts).enumerate() {
        let (apd_endo, apd_epi) = contour_distance(p, g, pixel_spacing);
        frames.push(FrameMetrics {
            frame: t,
            dice_myo: dice(p, g, MYOCARDIUM)?,
            dice_bp: dice(p, g, BLOOD_POOL)?,
            apd_endo,
            apd_epi,
            area_myo: p.count(MYOCARDIUM) as f64 * area_px,
            area_bp: p.count(BLOOD_POOL) as f64 * area_px,
        });
    }
    let area_curve_bp = area_curve(preds, BLOOD_POOL, pixel_spacing);
    let gt_area_curve_bp = area_curve(gts, BLOOD_POOL, pixel_spacing);
    let (smoothness_bp, gt_smoothness_bp) = if preds.len() >= 3 {
        (temporal_smoothness(&area_curve_bp)?, temporal_smoothness(&gt_area_curve_bp)?)
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(MetricsReport {
        preset,
        frames,
        area_curve_bp,
        gt_area_curve_bp,
        smoothness_bp,
        gt_smoothness_bp,
    })
}

pub const REPORT_CSV_HEADER: &str = "frame,dice_myo,dice_bp,apd_endo,apd_epi,area_myo,area_bp";

impl MetricsReport {
    pub fn summary(&self) -> ReportSummary {
        let col = |f: fn(&FrameMetrics) -> f64| MeanStd::of(self.frames.iter().map(f));
        ReportSummary {
            preset: self.preset,
            n_frames: self.frames.len(),
            dice_myo: col(|m| m.dice_myo),
            dice_bp: col(|m| m.dice_bp),
            apd_endo: col(|m| m.apd_endo),
            apd_epi: col(|m| m.apd_epi),
            smoothness_bp: self.smoothness_bp,
            gt_smoothness_bp: self.gt_smoothness_bp,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(REPORT_CSV_HEADER);
        s.push('\n');
        for m in &self.frames {
            writeln!(
                s,
                "{},{},{},{},{},{},{}",
                m.frame, m.dice_myo, m.dice_bp, m.apd_endo, m.apd_epi, m.area_myo, m.area_bp
            )
            .unwrap();
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Summary statistics as JSON. Non-finite values are written as `null`.
    pub fn write_summary_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.summary()).expect("summary serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}
