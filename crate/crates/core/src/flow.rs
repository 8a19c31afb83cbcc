//! Dense optical flow from the brightness-constancy constraint
//! `Ix·u + Iy·v + It = 0`, solved globally with Horn–Schunck smoothing and
//! refined coarse-to-fine over an image pyramid.
//!
//! The discrete energy minimised at every pyramid level is
//!
//! ```text
//! E(u, v) = Σ_p (Ix·(u−u0) + Iy·(v−v0) + It)²
//!         + α²/4 · Σ_{p~q} ((u_p − u_q)² + (v_p − v_q)²)
//! ```
//!
//! where `(u0, v0)` is the flow carried up from the coarser level and the
//! second sum runs over 4-connected pixel pairs inside the image (Neumann
//! border). Each iteration is a block-Jacobi sweep, which in the interior is
//! the classic update `u = ū − Ix·r̄ / (α² + Ix² + Iy²)` and never increases E.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Solver settings for [`estimate_flow`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowParams {
    /// Smoothness weight, in units of the [0, 255] intensity scale.
    pub alpha: f64,
    /// Jacobi sweeps per pyramid level.
    pub max_iters: usize,
    /// Stop a level once the mean absolute update falls below this.
    pub tol: f64,
    pub pyramid_levels: usize,
}

impl Default for FlowParams {
    fn default() -> Self {
        FlowParams {
            alpha: 15.0,
            max_iters: 200,
            tol: 1e-4,
            pyramid_levels: 3,
        }
    }
}

impl FlowParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("flow alpha must be positive, got {}", self.alpha)));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("flow max_iters must be at least 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!("flow tol must be positive, got {}", self.tol)));
        }
        if self.pyramid_levels == 0 {
            return Err(Error::Config("flow pyramid_levels must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-pixel displacement in pixels: the content at `(x, y)` of the
/// reference frame is found at `(x + u, y + v)` in the other frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub height: usize,
    pub width: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub from_frame: usize,
    pub to_frame: usize,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        FlowField {
            height,
            width,
            u: vec![0.0; height * width],
            v: vec![0.0; height * width],
            from_frame: 0,
            to_frame: 0,
        }
    }

    pub fn uniform(height: usize, width: usize, u: f64, v: f64) -> Self {
        FlowField {
            u: vec![u; height * width],
            v: vec![v; height * width],
            ..FlowField::zeros(height, width)
        }
    }

    pub fn with_frames(mut self, from_frame: usize, to_frame: usize) -> Self {
        self.from_frame = from_frame;
        self.to_frame = to_frame;
        self
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().chain(&self.v).all(|x| x.is_finite())
    }

    /// Mean (u, v) over pixels where `mask` is true.
    pub fn mean_over(&self, mask: &[bool]) -> (f64, f64) {
        let (mut su, mut sv, mut n) = (0.0, 0.0, 0usize);
        for ((&u, &v), &m) in self.u.iter().zip(&self.v).zip(mask) {
            if m {
                su += u;
                sv += v;
                n += 1;
            }
        }
        let n = n.max(1) as f64;
        (su / n, sv / n)
    }

    pub fn mean(&self) -> (f64, f64) {
        let n = self.u.len() as f64;
        (self.u.iter().sum::<f64>() / n, self.v.iter().sum::<f64>() / n)
    }

    /// Mean displacement magnitude.
    pub fn mean_magnitude(&self) -> f64 {
        self.u
            .iter()
            .zip(&self.v)
            .map(|(u, v)| u.hypot(*v))
            .sum::<f64>()
            / self.u.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.u.iter().chain(&self.v).fold(0.0, |m, x| m.max(x.abs()))
    }

    /// The field seen after rotating both frames by `angle_rad` about the
    /// image centre (same convention as `phantom::rotate_image`).
    pub fn rotated(&self, angle_rad: f64) -> FlowField {
        let (s, c) = angle_rad.sin_cos();
        let cx = (self.width as f64 - 1.0) / 2.0;
        let cy = (self.height as f64 - 1.0) / 2.0;
        let u_img = Image::new(self.height, self.width, self.u.clone()).unwrap();
        let v_img = Image::new(self.height, self.width, self.v.clone()).unwrap();
        let mut out = FlowField::zeros(self.height, self.width).with_frames(self.from_frame, self.to_frame);
        for y in 0..self.height {
            for x in 0..self.width {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let sx = c * dx + s * dy + cx;
                let sy = -s * dx + c * dy + cy;
                let (u, v) = (u_img.sample_clamped(sx, sy), v_img.sample_clamped(sx, sy));
                out.u[y * self.width + x] = c * u - s * v;
                out.v[y * self.width + x] = s * u + c * v;
            }
        }
        out
    }
}

/// Spatial and temporal derivatives for the flow constraint.
///
/// `Ix`, `Iy` are central differences averaged over both frames and
/// `It = I2 − I1`; borders replicate the edge pixel.
pub fn image_gradients(i1: &Image, i2: &Image) -> Result<(Image, Image, Image)> {
    if i1.dims() != i2.dims() {
        return Err(Error::shape(
            "image_gradients",
            format!("{:?} vs {:?}", i1.dims(), i2.dims()),
        ));
    }
    let (h, w) = i1.dims();
    let central = |img: &Image, x: usize, y: usize| {
        let (x, y) = (x as isize, y as isize);
        (
            0.5 * (img.get_clamped(x + 1, y) - img.get_clamped(x - 1, y)),
            0.5 * (img.get_clamped(x, y + 1) - img.get_clamped(x, y - 1)),
        )
    };
    let mut ix = Vec::with_capacity(h * w);
    let mut iy = Vec::with_capacity(h * w);
    let mut it = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (ax, ay) = central(i1, x, y);
            let (bx, by) = central(i2, x, y);
            ix.push(0.5 * (ax + bx));
            iy.push(0.5 * (ay + by));
            it.push(i2.get(x, y) - i1.get(x, y));
        }
    }
    Ok((Image::new(h, w, ix)?, Image::new(h, w, iy)?, Image::new(h, w, it)?))
}

/// Convergence record of one pyramid level.
#[derive(Clone, Debug)]
pub struct LevelTrace {
    pub height: usize,
    pub width: usize,
    /// Energy before the first sweep and after every sweep.
    pub energies: Vec<f64>,
    pub iterations: usize,
}

/// Horn–Schunck flow from `from` to `to`, sampled on the grid of `from`.
pub fn estimate_flow(from: &Image, to: &Image, params: &FlowParams) -> Result<FlowField> {
    solve(from, to, params, false).map(|(f, _)| f)
}

/// [`estimate_flow`] that also records the energy after every sweep.
pub fn estimate_flow_traced(
    from: &Image,
    to: &Image,
    params: &FlowParams,
) -> Result<(FlowField, Vec<LevelTrace>)> {
    solve(from, to, params, true)
}

fn solve(from: &Image, to: &Image, params: &FlowParams, trace: bool) -> Result<(FlowField, Vec<LevelTrace>)> {
    params.validate()?;
    if from.dims() != to.dims() {
        return Err(Error::shape(
            "estimate_flow",
            format!("frames differ in size: {:?} vs {:?}", from.dims(), to.dims()),
        ));
    }
    if !from.data().iter().chain(to.data()).all(|v| v.is_finite()) {
        return Err(Error::InvalidArgument("estimate_flow: input frames contain non-finite values".into()));
    }
    let (h, w) = from.dims();

    let mut pyr_from = vec![from.clone()];
    let mut pyr_to = vec![to.clone()];
    while pyr_from.len() < params.pyramid_levels {
        let last = pyr_from.last().unwrap();
        // Keep the coarsest level at least 4 pixels on a side.
        if last.height() < 8 || last.width() < 8 {
            break;
        }
        pyr_from.push(downsample(last));
        pyr_to.push(downsample(pyr_to.last().unwrap()));
    }

    let mut traces = Vec::new();
    let coarsest = pyr_from.len() - 1;
    let (ch, cw) = pyr_from[coarsest].dims();
    let mut u = vec![0.0; ch * cw];
    let mut v = vec![0.0; ch * cw];
    for level in (0..=coarsest).rev() {
        let (lh, lw) = pyr_from[level].dims();
        if level != coarsest {
            let (ph, pw) = pyr_from[level + 1].dims();
            u = upsample_flow(&u, ph, pw, lh, lw);
            v = upsample_flow(&v, ph, pw, lh, lw);
        }
        let t = solve_level(&pyr_from[level], &pyr_to[level], &mut u, &mut v, params, level, trace)?;
        if trace {
            traces.push(t);
        }
    }
    let field = FlowField {
        height: h,
        width: w,
        u,
        v,
        from_frame: 0,
        to_frame: 0,
    };
    Ok((field, traces))
}

fn downsample(img: &Image) -> Image {
    let (h, w) = img.dims();
    let (nh, nw) = (h.div_ceil(2), w.div_ceil(2));
    Image::from_fn(nh, nw, |x, y| {
        let (x0, y0) = (2 * x as isize, 2 * y as isize);
        0.25 * (img.get_clamped(x0, y0)
            + img.get_clamped(x0 + 1, y0)
            + img.get_clamped(x0, y0 + 1)
            + img.get_clamped(x0 + 1, y0 + 1))
    })
}

fn upsample_flow(c: &[f64], ch: usize, cw: usize, h: usize, w: usize) -> Vec<f64> {
    let coarse = Image::new(ch, cw, c.to_vec()).expect("coarse flow extents");
    let sy = ch as f64 / h as f64;
    let sx = cw as f64 / w as f64;
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let cx = (x as f64 + 0.5) * sx - 0.5;
            let cy = (y as f64 + 0.5) * sy - 0.5;
            // Displacements scale with resolution.
            out.push(coarse.sample_clamped(cx, cy) / sx);
        }
    }
    out
}

struct LevelSystem {
    h: usize,
    w: usize,
    ix: Vec<f64>,
    iy: Vec<f64>,
    it: Vec<f64>,
    u0: Vec<f64>,
    v0: Vec<f64>,
    edge_weight: f64,
}

impl LevelSystem {
    fn neighbours(&self, p: usize) -> impl Iterator<Item = usize> {
        let (x, y) = (p % self.w, p / self.w);
        let w = self.w;
        let h = self.h;
        [
            (x > 0).then(|| p - 1),
            (x + 1 < w).then(|| p + 1),
            (y > 0).then(|| p - w),
            (y + 1 < h).then(|| p + w),
        ]
        .into_iter()
        .flatten()
    }

    fn energy(&self, u: &[f64], v: &[f64]) -> f64 {
        let mut data = 0.0;
        let mut smooth = 0.0;
        for p in 0..self.h * self.w {
            let r = self.ix[p] * (u[p] - self.u0[p]) + self.iy[p] * (v[p] - self.v0[p]) + self.it[p];
            data += r * r;
            let x = p % self.w;
            if x + 1 < self.w {
                smooth += (u[p] - u[p + 1]).powi(2) + (v[p] - v[p + 1]).powi(2);
            }
            if p + self.w < self.h * self.w {
                smooth += (u[p] - u[p + self.w]).powi(2) + (v[p] - v[p + self.w]).powi(2);
            }
        }
        data + self.edge_weight * smooth
    }
}

fn solve_level(
    from: &Image,
    to: &Image,
    u: &mut Vec<f64>,
    v: &mut Vec<f64>,
    params: &FlowParams,
    level: usize,
    trace: bool,
) -> Result<LevelTrace> {
    let (h, w) = from.dims();
    let warped = Image::from_fn(h, w, |x, y| {
        let p = y * w + x;
        to.sample_clamped(x as f64 + u[p], y as f64 + v[p])
    });
    let (ix, iy, it) = image_gradients(from, &warped)?;
    let sys = LevelSystem {
        h,
        w,
        ix: ix.data().to_vec(),
        iy: iy.data().to_vec(),
        it: it.data().to_vec(),
        u0: u.clone(),
        v0: v.clone(),
        edge_weight: params.alpha * params.alpha / 4.0,
    };
    let counts: Vec<f64> = (0..h * w).map(|p| sys.neighbours(p).count() as f64).collect();

    let mut energies = Vec::new();
    if trace {
        energies.push(sys.energy(u, v));
    }
    let mut next_u = vec![0.0; h * w];
    let mut next_v = vec![0.0; h * w];
    let mut iterations = 0;
    for iter in 0..params.max_iters {
        let mut change = 0.0;
        for p in 0..h * w {
            let (mut su, mut sv) = (0.0, 0.0);
            for q in sys.neighbours(p) {
                su += u[q];
                sv += v[q];
            }
            let n = counts[p];
            let (ubar, vbar) = (su / n, sv / n);
            let (gx, gy) = (sys.ix[p], sys.iy[p]);
            let r = gx * (ubar - sys.u0[p]) + gy * (vbar - sys.v0[p]) + sys.it[p];
            let k = r / (sys.edge_weight * n + gx * gx + gy * gy);
            next_u[p] = ubar - gx * k;
            next_v[p] = vbar - gy * k;
            change += (next_u[p] - u[p]).abs() + (next_v[p] - v[p]).abs();
        }
        if !change.is_finite() {
            return Err(Error::NonFinite {
                op: "estimate_flow",
                context: format!(" at pyramid level {level}, iteration {iter}"),
            });
        }
        std::mem::swap(u, &mut next_u);
        std::mem::swap(v, &mut next_v);
        iterations = iter + 1;
        if trace {
            energies.push(sys.energy(u, v));
        }
        if change / ((2 * h * w) as f64) < params.tol {
            break;
        }
    }
    Ok(LevelTrace {
        height: h,
        width: w,
        energies,
        iterations,
    })
}

// ---------------------------------------------------------------------------
// FLO-TXT dumps

/// Writes `FLO-TXT v1 H W` followed by one `u v` line per pixel (row-major).
pub fn write_flo_txt(path: &Path, flow: &FlowField) -> Result<()> {
    let mut s = format!("FLO-TXT v1 {} {}\n", flow.height, flow.width);
    for (u, v) in flow.u.iter().zip(&flow.v) {
        writeln!(s, "{u} {v}").unwrap();
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Single-channel variant: one value per line after the same header.
pub fn write_scalar_txt(path: &Path, height: usize, width: usize, values: &[f64]) -> Result<()> {
    let mut s = format!("FLO-TXT v1 {height} {width}\n");
    for v in values {
        writeln!(s, "{v}").unwrap();
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_flo_txt(path: &Path) -> Result<FlowField> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::format(path, "empty file"))?;
    let dims: Vec<usize> = header
        .strip_prefix("FLO-TXT v1 ")
        .map(|r| r.split_whitespace().filter_map(|t| t.parse().ok()).collect())
        .unwrap_or_default();
    let [h, w] = dims[..] else {
        return Err(Error::format(path, format!("bad header {header:?}")));
    };
    let mut flow = FlowField::zeros(h, w);
    for p in 0..h * w {
        let line = lines
            .next()
            .ok_or_else(|| Error::format(path, format!("missing line for pixel {p}")))?;
        let mut it = line.split_whitespace().map(str::parse::<f64>);
        match (it.next(), it.next(), it.next()) {
            (Some(Ok(u)), Some(Ok(v)), None) => {
                flow.u[p] = u;
                flow.v[p] = v;
            }
            _ => return Err(Error::format(path, format!("bad line for pixel {p}: {line:?}"))),
        }
    }
    Ok(flow)
}
