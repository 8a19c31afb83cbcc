//! Motion-compensated temporal aggregation of feature maps.
//!
//! For a target frame `i`, each neighbour `j` in the clamped window
//! `[i − k, i + k]` has its feature map warped onto frame `i` along optical
//! flow, scored per pixel by the cosine similarity of its softmax-normalized
//! channel vector against frame `i`'s, and the warped maps are averaged with
//! those scores normalized to unit sum.

use std::collections::BTreeMap;
use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{estimate_flow, FlowField, FlowParams};
use crate::image::Image;
use crate::tensor::{softmax_channels, Backward, Tape, Tensor, Var};

/// Temporal half-window. The window never wraps around the sequence ends.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregationConfig {
    pub k: usize,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        AggregationConfig { k: 2 }
    }
}

/// Frame indices aggregated into frame `i` of an `n`-frame sequence (0-based).
pub fn window(i: usize, n: usize, k: usize) -> RangeInclusive<usize> {
    i.saturating_sub(k)..=(i + k).min(n.saturating_sub(1))
}

/// Per-pixel similarity weights of source frame `source` for target `target`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub source: usize,
    pub target: usize,
}

// ---------------------------------------------------------------------------
// Bilinear warp

struct WarpBackward {
    /// Per output pixel: up to four (source pixel, weight) pairs.
    taps: Vec<[(usize, f64); 4]>,
}

impl Backward for WarpBackward {
    fn backward(&self, grad: &[f64], parents: &[&Tensor], _: &Tensor, _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let hw = self.taps.len();
        let mut dx = vec![0.0; parents[0].len()];
        for plane in 0..grad.len() / hw {
            let (g, d) = (&grad[plane * hw..(plane + 1) * hw], &mut dx[plane * hw..(plane + 1) * hw]);
            for (p, taps) in self.taps.iter().enumerate() {
                for &(src, w) in taps {
                    d[src] += w * g[p];
                }
            }
        }
        vec![Some(dx)]
    }
}

fn warp_taps(flow: &FlowField) -> Vec<[(usize, f64); 4]> {
    let (h, w) = flow.dims();
    let mut taps = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let sx = x as f64 + flow.u[p];
            let sy = y as f64 + flow.v[p];
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let mut t = [(0, 0.0); 4];
            let corners = [
                (x0, y0, (1.0 - fx) * (1.0 - fy)),
                (x0 + 1.0, y0, fx * (1.0 - fy)),
                (x0, y0 + 1.0, (1.0 - fx) * fy),
                (x0 + 1.0, y0 + 1.0, fx * fy),
            ];
            for (slot, (cx, cy, wt)) in t.iter_mut().zip(corners) {
                if wt != 0.0 && cx >= 0.0 && cy >= 0.0 && cx < w as f64 && cy < h as f64 {
                    *slot = (cy as usize * w + cx as usize, wt);
                }
            }
            taps.push(t);
        }
    }
    taps
}

/// Resamples every channel of `feature` at `(x + u, y + v)`.
///
/// Samples outside the map read as zero. The result is differentiable with
/// respect to the feature map; the flow is treated as a constant.
pub fn warp_bilinear(tape: &mut Tape, feature: Var, flow: &FlowField) -> Result<Var> {
    let f = tape.value(feature);
    let (_, _, h, w) = f.dims4()?;
    if flow.dims() != (h, w) {
        return Err(Error::shape(
            "warp_bilinear",
            format!("feature map is {h}x{w} but flow is {}x{}", flow.height, flow.width),
        ));
    }
    if !flow.is_finite() {
        return Err(Error::non_finite("warp_bilinear"));
    }
    let taps = warp_taps(flow);
    let hw = h * w;
    let mut out = vec![0.0; f.len()];
    for plane in 0..f.len() / hw {
        let src = &f.data()[plane * hw..(plane + 1) * hw];
        for (o, t) in out[plane * hw..(plane + 1) * hw].iter_mut().zip(&taps) {
            *o = t.iter().map(|&(s, wt)| wt * src[s]).sum();
        }
    }
    let out = Tensor::new(f.shape().to_vec(), out)?;
    tape.push("warp_bilinear", out, &[feature], Box::new(WarpBackward { taps }))
}

/// Flow for a map `factor` times smaller per axis: block-averaged and scaled.
pub fn downsample_flow(flow: &FlowField, factor: usize) -> Result<FlowField> {
    let (h, w) = flow.dims();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::InvalidArgument(format!(
            "cannot shrink a {h}x{w} flow by a factor of {factor}"
        )));
    }
    let (ho, wo) = (h / factor, w / factor);
    let mut out = FlowField::zeros(ho, wo).with_frames(flow.from_frame, flow.to_frame);
    let norm = (factor * factor * factor) as f64;
    for y in 0..h {
        for x in 0..w {
            let o = (y / factor) * wo + x / factor;
            out.u[o] += flow.u[y * w + x] / norm;
            out.v[o] += flow.v[y * w + x] / norm;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Cosine weights

struct CosineBackward {
    norms_a: Vec<f64>,
    norms_b: Vec<f64>,
    channels: usize,
    hw: usize,
}

impl Backward for CosineBackward {
    fn backward(&self, grad: &[f64], parents: &[&Tensor], out: &Tensor, needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (a, b) = (parents[0].data(), parents[1].data());
        let (c, hw) = (self.channels, self.hw);
        let mut da = needs[0].then(|| vec![0.0; a.len()]);
        let mut db = needs[1].then(|| vec![0.0; b.len()]);
        for q in 0..grad.len() {
            let (batch, p) = (q / hw, q % hw);
            let (na, nb, cos, g) = (self.norms_a[q], self.norms_b[q], out.data()[q], grad[q]);
            for ch in 0..c {
                let idx = (batch * c + ch) * hw + p;
                // d cos/da = b/(|a||b|) − cos·a/|a|², and symmetrically for b.
                if let Some(da) = da.as_mut() {
                    da[idx] += g * (b[idx] / (na * nb) - cos * a[idx] / (na * na));
                }
                if let Some(db) = db.as_mut() {
                    db[idx] += g * (a[idx] / (na * nb) - cos * b[idx] / (nb * nb));
                }
            }
        }
        vec![da, db]
    }
}

/// Per-pixel cosine similarity of the channel vectors of two equally shaped
/// maps, as an (N, 1, H, W) tensor. Zero-norm channel vectors are an error.
pub fn cosine_similarity(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let (ta, tb) = (tape.value(a), tape.value(b));
    if ta.shape() != tb.shape() {
        return Err(Error::shape(
            "cosine_similarity",
            format!("{:?} vs {:?}", ta.shape(), tb.shape()),
        ));
    }
    let (n, c, h, w) = ta.dims4()?;
    let hw = h * w;
    let mut out = vec![0.0; n * hw];
    let mut norms_a = vec![0.0; n * hw];
    let mut norms_b = vec![0.0; n * hw];
    for batch in 0..n {
        for p in 0..hw {
            let (mut dot, mut aa, mut bb) = (0.0, 0.0, 0.0);
            for ch in 0..c {
                let idx = (batch * c + ch) * hw + p;
                let (x, y) = (ta.data()[idx], tb.data()[idx]);
                dot += x * y;
                aa += x * x;
                bb += y * y;
            }
            if aa == 0.0 || bb == 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "cosine_similarity: zero channel vector at batch {batch}, pixel {p}"
                )));
            }
            let q = batch * hw + p;
            norms_a[q] = aa.sqrt();
            norms_b[q] = bb.sqrt();
            out[q] = dot / (norms_a[q] * norms_b[q]);
        }
    }
    let out = Tensor::new(vec![n, 1, h, w], out)?;
    let rule = CosineBackward { norms_a, norms_b, channels: c, hw };
    tape.push("cosine_similarity", out, &[a, b], Box::new(rule))
}

/// Similarity weight of a warped map against the reference map, both already
/// passed through `softmax_channels`. Positive inputs give weights in [0, 1];
/// a negative cosine means the inputs were not softmax outputs and is an error.
pub fn cosine_weight(tape: &mut Tape, warped: Var, reference: Var) -> Result<Var> {
    let w = cosine_similarity(tape, warped, reference)?;
    if let Some(bad) = tape.value(w).data().iter().find(|&&v| v < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "cosine_weight: negative similarity {bad}; inputs must be softmax maps"
        )));
    }
    Ok(w)
}

// ---------------------------------------------------------------------------
// Weighted sum

struct AggregateBackward {
    /// Normalized weights, one (N·H·W) plane per member.
    normalized: Vec<Vec<f64>>,
    sums: Vec<f64>,
    members: usize,
    channels: usize,
    hw: usize,
}

impl Backward for AggregateBackward {
    fn backward(&self, grad: &[f64], parents: &[&Tensor], out: &Tensor, needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (m, c, hw) = (self.members, self.channels, self.hw);
        let mut result = Vec::with_capacity(2 * m);
        for j in 0..m {
            result.push(needs[j].then(|| {
                let mut d = vec![0.0; grad.len()];
                for (idx, dv) in d.iter_mut().enumerate() {
                    let q = (idx / (c * hw)) * hw + idx % hw;
                    *dv = grad[idx] * self.normalized[j][q];
                }
                d
            }));
        }
        for j in 0..m {
            result.push(needs[m + j].then(|| {
                let feat = parents[j].data();
                let mut d = vec![0.0; self.sums.len()];
                for (idx, (&g, (&f, &o))) in grad.iter().zip(feat.iter().zip(out.data())).enumerate() {
                    let q = (idx / (c * hw)) * hw + idx % hw;
                    d[q] += g * (f - o) / self.sums[q];
                }
                d
            }));
        }
        result
    }
}

/// Per-pixel weighted mean of `features` (each (N, C, H, W)) with weights
/// `weights` (each (N, 1, H, W)), the weights normalized to unit sum over
/// the members at every pixel.
pub fn aggregate(tape: &mut Tape, features: &[Var], weights: &[Var]) -> Result<Var> {
    if features.is_empty() {
        return Err(Error::InvalidArgument("aggregate: empty window".into()));
    }
    if features.len() != weights.len() {
        return Err(Error::shape(
            "aggregate",
            format!("{} feature maps but {} weight maps", features.len(), weights.len()),
        ));
    }
    let shape = tape.value(features[0]).shape().to_vec();
    let (n, c, h, w) = tape.value(features[0]).dims4()?;
    let hw = h * w;
    for (&f, &wt) in features.iter().zip(weights) {
        if tape.value(f).shape() != shape.as_slice() {
            return Err(Error::shape(
                "aggregate",
                format!("feature {:?} vs {:?}", tape.value(f).shape(), shape),
            ));
        }
        if tape.value(wt).shape() != [n, 1, h, w] {
            return Err(Error::shape(
                "aggregate",
                format!("weight {:?} for features {:?}", tape.value(wt).shape(), shape),
            ));
        }
    }

    let mut sums = vec![0.0; n * hw];
    for &wt in weights {
        for (s, v) in sums.iter_mut().zip(tape.value(wt).data()) {
            *s += v;
        }
    }
    if let Some(q) = sums.iter().position(|&s| s <= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "aggregate: weights sum to {} at pixel {q}",
            sums[q]
        )));
    }
    let normalized: Vec<Vec<f64>> = weights
        .iter()
        .map(|&wt| tape.value(wt).data().iter().zip(&sums).map(|(v, s)| v / s).collect())
        .collect();

    let mut out = vec![0.0; n * c * hw];
    for (&f, nw) in features.iter().zip(&normalized) {
        for (idx, (o, v)) in out.iter_mut().zip(tape.value(f).data()).enumerate() {
            *o += nw[(idx / (c * hw)) * hw + idx % hw] * v;
        }
    }
    let out = Tensor::new(shape, out)?;
    let parents: Vec<Var> = features.iter().chain(weights).copied().collect();
    let rule = AggregateBackward {
        normalized,
        sums,
        members: features.len(),
        channels: c,
        hw,
    };
    tape.push("aggregate", out, &parents, Box::new(rule))
}

// ---------------------------------------------------------------------------
// Flow cache and the full window

/// Write-once store of flows keyed by (source j, target i).
///
/// The stored field lives on frame `i`'s grid and points to where each
/// pixel's content sits in frame `j`, which is the field needed to pull
/// frame `j`'s features onto frame `i`. Each frame is rescaled to [0, 255]
/// on its own before estimation so that global intensity changes of a
/// single frame do not register as motion.
#[derive(Clone, Debug)]
pub struct FlowCache {
    params: FlowParams,
    flows: BTreeMap<(usize, usize), FlowField>,
}

impl FlowCache {
    pub fn new(params: FlowParams) -> Result<Self> {
        params.validate()?;
        Ok(FlowCache {
            params,
            flows: BTreeMap::new(),
        })
    }

    pub fn params(&self) -> &FlowParams {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.flows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flows.is_empty()
    }

    pub fn get(&self, j: usize, i: usize) -> Option<&FlowField> {
        self.flows.get(&(j, i))
    }

    pub fn insert(&mut self, flow: FlowField) {
        self.flows.insert((flow.from_frame, flow.to_frame), flow);
    }

    pub fn iter(&self) -> impl Iterator<Item = &FlowField> {
        self.flows.values()
    }

    /// Flow from `j` to `i`, estimated on first use.
    pub fn flow(&mut self, frames: &[Image], j: usize, i: usize) -> Result<&FlowField> {
        if !self.flows.contains_key(&(j, i)) {
            let (fi, fj) = (Self::frame(frames, i)?, Self::frame(frames, j)?);
            let flow = if i == j {
                FlowField::zeros(fi.height(), fi.width())
            } else {
                estimate_flow(&fi.normalized(), &fj.normalized(), &self.params)?
            };
            self.flows.insert((j, i), flow.with_frames(j, i));
        }
        Ok(&self.flows[&(j, i)])
    }

    /// Estimates every flow the windows of all frames need.
    pub fn fill(&mut self, frames: &[Image], k: usize) -> Result<()> {
        for i in 0..frames.len() {
            for j in window(i, frames.len(), k) {
                self.flow(frames, j, i)?;
            }
        }
        Ok(())
    }

    /// Copy with every flow rotated by `angle_rad` about the image centre.
    pub fn rotated(&self, angle_rad: f64) -> FlowCache {
        FlowCache {
            params: self.params.clone(),
            flows: self
                .flows
                .iter()
                .map(|(key, f)| (*key, f.rotated(angle_rad)))
                .collect(),
        }
    }

    fn frame(frames: &[Image], idx: usize) -> Result<&Image> {
        frames.get(idx).ok_or_else(|| {
            Error::InvalidArgument(format!("frame {idx} out of range for {} frames", frames.len()))
        })
    }
}

/// Aggregated feature map for frame `i`, plus the normalized weight maps of
/// each window member.
///
/// `features[j]` must be a (1, C, H, W) map for every `j` in the window. The
/// flow is shrunk to the feature resolution when the maps are smaller than
/// the frames.
pub fn aggregate_window_traced(
    tape: &mut Tape,
    frames: &[Image],
    features: &[Var],
    i: usize,
    cfg: &AggregationConfig,
    cache: &mut FlowCache,
) -> Result<(Var, Vec<WeightMap>)> {
    let n = frames.len();
    if i >= n || features.len() != n {
        return Err(Error::InvalidArgument(format!(
            "aggregate_window: frame {i} with {n} frames and {} feature maps",
            features.len()
        )));
    }
    let (_, _, fh, fw) = tape.value(features[i]).dims4()?;
    let (h, w) = frames[i].dims();
    let factor = h / fh.max(1);
    if fh * factor != h || fw * factor != w {
        return Err(Error::shape(
            "aggregate_window",
            format!("{fh}x{fw} feature map does not divide {h}x{w} frames"),
        ));
    }

    let reference = softmax_channels(tape, features[i])?;
    let mut warped = Vec::new();
    let mut weights = Vec::new();
    let mut sources = Vec::new();
    for j in window(i, n, cfg.k) {
        let m = if j == i {
            features[i]
        } else {
            let flow = cache.flow(frames, j, i)?;
            let flow = if factor == 1 { flow.clone() } else { downsample_flow(flow, factor)? };
            warp_bilinear(tape, features[j], &flow)?
        };
        let wt = if j == i {
            cosine_weight(tape, reference, reference)?
        } else {
            let normalized = softmax_channels(tape, m)?;
            cosine_weight(tape, normalized, reference)?
        };
        warped.push(m);
        weights.push(wt);
        sources.push(j);
    }
    let out = aggregate(tape, &warped, &weights)?;

    let mut sums = vec![0.0; fh * fw];
    for &wt in &weights {
        for (s, v) in sums.iter_mut().zip(tape.value(wt).data()) {
            *s += v;
        }
    }
    let maps = weights
        .iter()
        .zip(sources)
        .map(|(&wt, j)| WeightMap {
            height: fh,
            width: fw,
            values: tape.value(wt).data().iter().zip(&sums).map(|(v, s)| v / s).collect(),
            source: j,
            target: i,
        })
        .collect();
    Ok((out, maps))
}

/// Aggregated feature map for frame `i`; see [`aggregate_window_traced`].
pub fn aggregate_window(
    tape: &mut Tape,
    frames: &[Image],
    features: &[Var],
    i: usize,
    cfg: &AggregationConfig,
    cache: &mut FlowCache,
) -> Result<Var> {
    aggregate_window_traced(tape, frames, features, i, cfg, cache).map(|(v, _)| v)
}
