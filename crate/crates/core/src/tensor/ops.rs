//! Differentiable layer primitives. Every op records itself on a [`Tape`]
//! and fails on shape mismatch or non-finite output.

use super::gemm::gemm;
use super::{effective_kernel, Backward, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Variance floor used by batch normalization.
pub const BN_EPSILON: f64 = 1e-5;

// ---------------------------------------------------------------------------
// Convolution

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    dilation: usize,
    padding: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Source row/column of tap `kk` for output coordinate `o`, or `None` in padding.
    #[inline]
    fn src(&self, o: usize, kk: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + kk * self.dilation) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }

    fn im2col(&self, x: &[f64], col: &mut [f64]) {
        let cols = self.col_cols();
        for ci in 0..self.c_in {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    for oy in 0..self.h_out {
                        let line = &mut dst[oy * self.w_out..(oy + 1) * self.w_out];
                        match self.src(oy, ky, self.h) {
                            None => line.fill(0.0),
                            Some(iy) => {
                                let src_row = &plane[iy * self.w..(iy + 1) * self.w];
                                for (ox, v) in line.iter_mut().enumerate() {
                                    *v = match self.src(ox, kx, self.w) {
                                        Some(ix) => src_row[ix],
                                        None => 0.0,
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], dx: &mut [f64]) {
        let cols = self.col_cols();
        for ci in 0..self.c_in {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let src = &col[row * cols..(row + 1) * cols];
                    for oy in 0..self.h_out {
                        let Some(iy) = self.src(oy, ky, self.h) else {
                            continue;
                        };
                        for ox in 0..self.w_out {
                            if let Some(ix) = self.src(ox, kx, self.w) {
                                plane[iy * self.w + ix] += src[oy * self.w_out + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

struct Conv2dBackward {
    geom: ConvGeom,
}

impl Backward for Conv2dBackward {
    fn backward(
        &self,
        grad: &[f64],
        parents: &[&Tensor],
        _output: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let g = self.geom;
        let (n, _, _, _) = parents[0].dims4().expect("conv input is 4-D");
        let c_out = parents[1].shape()[0];
        let rows = g.col_rows();
        let cols = g.col_cols();
        let in_len = g.c_in * g.h * g.w;
        let x = parents[0].data();
        let w = parents[1].data();

        let mut dx = needs[0].then(|| vec![0.0; x.len()]);
        let mut dw = needs[1].then(|| vec![0.0; w.len()]);
        let mut db = needs[2].then(|| vec![0.0; c_out]);
        let mut col = vec![0.0; rows * cols];
        let mut dcol = vec![0.0; rows * cols];

        for b in 0..n {
            let gb = &grad[b * c_out * cols..(b + 1) * c_out * cols];
            if let Some(db) = db.as_mut() {
                for (co, acc) in db.iter_mut().enumerate() {
                    *acc += gb[co * cols..(co + 1) * cols].iter().sum::<f64>();
                }
            }
            if let Some(dw) = dw.as_mut() {
                g.im2col(&x[b * in_len..(b + 1) * in_len], &mut col);
                // dW (c_out × rows) += dY (c_out × cols) · colᵀ
                gemm(c_out, cols, rows, gb, false, &col, true, 1.0, dw);
            }
            if let Some(dx) = dx.as_mut() {
                // dcol (rows × cols) = Wᵀ · dY
                gemm(rows, c_out, cols, w, true, gb, false, 0.0, &mut dcol);
                g.col2im(&dcol, &mut dx[b * in_len..(b + 1) * in_len]);
            }
        }
        vec![dx, dw, db]
    }
}

/// 2-D cross-correlation of an (n, c_in, h, w) input with (c_out, c_in, k, k)
/// weights and a length-c_out bias.
///
/// With dilation `d` the kernel taps sit `d` pixels apart, so a k×k kernel
/// covers `k + (k-1)(d-1)` pixels without extra parameters.
pub fn conv2d(
    tape: &mut Tape,
    input: Var,
    weight: Var,
    bias: Var,
    stride: usize,
    dilation: usize,
    padding: usize,
) -> Result<Var> {
    let (n, c_in, h, w) = tape.value(input).dims4()?;
    let ws = tape.value(weight).shape().to_vec();
    if ws.len() != 4 || ws[1] != c_in || ws[2] != ws[3] {
        return Err(Error::shape(
            "conv2d",
            format!("weights {ws:?} incompatible with input channels {c_in}"),
        ));
    }
    let (c_out, k) = (ws[0], ws[2]);
    if tape.value(bias).shape() != [c_out] {
        return Err(Error::shape(
            "conv2d",
            format!(
                "bias shape {:?} does not match {c_out} output channels",
                tape.value(bias).shape()
            ),
        ));
    }
    if stride == 0 || dilation == 0 {
        return Err(Error::InvalidArgument(
            "conv2d stride and dilation must be positive".into(),
        ));
    }
    let ek = effective_kernel(k, dilation);
    if h + 2 * padding < ek || w + 2 * padding < ek {
        return Err(Error::shape(
            "conv2d",
            format!("effective kernel {ek} exceeds padded input {h}x{w} (padding {padding})"),
        ));
    }
    let geom = ConvGeom {
        c_in,
        h,
        w,
        k,
        stride,
        dilation,
        padding,
        h_out: (h + 2 * padding - ek) / stride + 1,
        w_out: (w + 2 * padding - ek) / stride + 1,
    };
    let rows = geom.col_rows();
    let cols = geom.col_cols();
    let x = tape.value(input).data();
    let wt = tape.value(weight).data();
    let bs = tape.value(bias).data();
    let mut out = vec![0.0; n * c_out * cols];
    let mut col = vec![0.0; rows * cols];
    for b in 0..n {
        let ob = &mut out[b * c_out * cols..(b + 1) * c_out * cols];
        for (co, &bv) in bs.iter().enumerate() {
            ob[co * cols..(co + 1) * cols].fill(bv);
        }
        geom.im2col(&x[b * c_in * h * w..(b + 1) * c_in * h * w], &mut col);
        gemm(c_out, rows, cols, wt, false, &col, false, 1.0, ob);
    }
    let value = Tensor::new(vec![n, c_out, geom.h_out, geom.w_out], out)?;
    tape.push(
        "conv2d",
        value,
        &[input, weight, bias],
        Box::new(Conv2dBackward { geom }),
    )
}

// ---------------------------------------------------------------------------
// Batch normalization

/// Per-channel mean and (biased) variance of one training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Normalization source for [`batchnorm`].
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a> {
    /// Normalize by the statistics of the current batch.
    Train,
    /// Normalize by stored running statistics.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

struct BatchNormBackward {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    /// Channels whose batch variance hit the epsilon floor.
    floored: Vec<bool>,
    training: bool,
}

impl Backward for BatchNormBackward {
    fn backward(
        &self,
        grad: &[f64],
        parents: &[&Tensor],
        _output: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (n, c, h, w) = parents[0].dims4().expect("batchnorm input is 4-D");
        let gamma = parents[1].data();
        let hw = h * w;
        let m = (n * hw) as f64;
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        let mut dx = needs[0].then(|| vec![0.0; grad.len()]);

        for ch in 0..c {
            let idx = |b: usize, p: usize| (b * c + ch) * hw + p;
            let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
            for b in 0..n {
                for p in 0..hw {
                    let i = idx(b, p);
                    sum_dy += grad[i];
                    sum_dy_xhat += grad[i] * self.xhat[i];
                }
            }
            dgamma[ch] = sum_dy_xhat;
            dbeta[ch] = sum_dy;
            let Some(dx) = dx.as_mut() else { continue };
            let scale = gamma[ch] * self.inv_std[ch];
            if !self.training {
                for b in 0..n {
                    for p in 0..hw {
                        let i = idx(b, p);
                        dx[i] = grad[i] * scale;
                    }
                }
            } else if self.floored[ch] {
                // Floored variance is a constant: only the mean depends on x.
                let mean_dy = sum_dy / m;
                for b in 0..n {
                    for p in 0..hw {
                        let i = idx(b, p);
                        dx[i] = scale * (grad[i] - mean_dy);
                    }
                }
            } else {
                for b in 0..n {
                    for p in 0..hw {
                        let i = idx(b, p);
                        dx[i] = scale / m * (m * grad[i] - sum_dy - self.xhat[i] * sum_dy_xhat);
                    }
                }
            }
        }
        vec![dx, Some(dgamma), Some(dbeta)]
    }
}

/// Per-channel normalization of an (n, c, h, w) tensor followed by the affine
/// map `gamma·x̂ + beta`.
///
/// In [`BnMode::Train`] the batch statistics are returned so the caller can
/// fold them into its running averages (see [`RunningStats::update`]).
pub fn batchnorm(
    tape: &mut Tape,
    input: Var,
    gamma: Var,
    beta: Var,
    mode: BnMode<'_>,
) -> Result<(Var, Option<BatchNormStats>)> {
    let (n, c, h, w) = tape.value(input).dims4()?;
    if tape.value(gamma).shape() != [c] || tape.value(beta).shape() != [c] {
        return Err(Error::shape(
            "batchnorm",
            format!(
                "gamma {:?} / beta {:?} must have length {c}",
                tape.value(gamma).shape(),
                tape.value(beta).shape()
            ),
        ));
    }
    let hw = h * w;
    let x = tape.value(input).data();
    let (mean, var, training) = match mode {
        BnMode::Train => {
            let m = (n * hw) as f64;
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut s = 0.0;
                for b in 0..n {
                    s += x[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().sum::<f64>();
                }
                mean[ch] = s / m;
                let mut v = 0.0;
                for b in 0..n {
                    for &xv in &x[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                        v += (xv - mean[ch]) * (xv - mean[ch]);
                    }
                }
                var[ch] = v / m;
            }
            (mean, var, true)
        }
        BnMode::Eval { mean, var } => {
            if mean.len() != c || var.len() != c {
                return Err(Error::shape(
                    "batchnorm",
                    format!("running statistics must have length {c}"),
                ));
            }
            (mean.to_vec(), var.to_vec(), false)
        }
    };
    let floored: Vec<bool> = var.iter().map(|&v| v < BN_EPSILON).collect();
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / v.max(BN_EPSILON).sqrt()).collect();
    let g = tape.value(gamma).data();
    let bt = tape.value(beta).data();
    let mut xhat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            for p in base..base + hw {
                xhat[p] = (x[p] - mean[ch]) * inv_std[ch];
                out[p] = g[ch] * xhat[p] + bt[ch];
            }
        }
    }
    let value = Tensor::new(vec![n, c, h, w], out)?;
    let var_out = tape.push(
        "batchnorm",
        value,
        &[input, gamma, beta],
        Box::new(BatchNormBackward {
            xhat,
            inv_std,
            floored,
            training,
        }),
    )?;
    let stats = training.then_some(BatchNormStats { mean, var });
    Ok((var_out, stats))
}

/// Running averages kept by a batch-norm layer for evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// `running ← (1 − momentum)·running + momentum·batch`
    pub fn update(&mut self, batch: &BatchNormStats, momentum: f64) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

// ---------------------------------------------------------------------------
// Elementwise and reshaping ops

struct ReluBackward;

impl Backward for ReluBackward {
    fn backward(&self, grad: &[f64], parents: &[&Tensor], _: &Tensor, _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let x = parents[0].data();
        vec![Some(
            grad.iter()
                .zip(x)
                .map(|(g, &xv)| if xv > 0.0 { *g } else { 0.0 })
                .collect(),
        )]
    }
}

pub fn relu(tape: &mut Tape, input: Var) -> Result<Var> {
    let x = tape.value(input);
    let out = Tensor::new(
        x.shape().to_vec(),
        x.data().iter().map(|&v| v.max(0.0)).collect(),
    )?;
    tape.push("relu", out, &[input], Box::new(ReluBackward))
}

struct AddBackward;

impl Backward for AddBackward {
    fn backward(&self, grad: &[f64], _: &[&Tensor], _: &Tensor, needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        needs.iter().map(|&n| n.then(|| grad.to_vec())).collect()
    }
}

pub fn add(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let (ta, tb) = (tape.value(a), tape.value(b));
    if ta.shape() != tb.shape() {
        return Err(Error::shape(
            "add",
            format!("{:?} vs {:?}", ta.shape(), tb.shape()),
        ));
    }
    let out = Tensor::new(
        ta.shape().to_vec(),
        ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect(),
    )?;
    tape.push("add", out, &[a, b], Box::new(AddBackward))
}

struct MulBackward;

impl Backward for MulBackward {
    fn backward(&self, grad: &[f64], parents: &[&Tensor], _: &Tensor, needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let prod = |other: &Tensor| grad.iter().zip(other.data()).map(|(g, o)| g * o).collect();
        vec![
            needs[0].then(|| prod(parents[1])),
            needs[1].then(|| prod(parents[0])),
        ]
    }
}

/// Elementwise product of equally shaped tensors.
pub fn mul(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let (ta, tb) = (tape.value(a), tape.value(b));
    if ta.shape() != tb.shape() {
        return Err(Error::shape(
            "mul",
            format!("{:?} vs {:?}", ta.shape(), tb.shape()),
        ));
    }
    let out = Tensor::new(
        ta.shape().to_vec(),
        ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect(),
    )?;
    tape.push("mul", out, &[a, b], Box::new(MulBackward))
}

struct SumBackward;

impl Backward for SumBackward {
    fn backward(&self, grad: &[f64], parents: &[&Tensor], _: &Tensor, _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(vec![grad[0]; parents[0].len()])]
    }
}

/// Sum of all elements as a scalar.
pub fn sum(tape: &mut Tape, input: Var) -> Result<Var> {
    let s = tape.value(input).data().iter().sum();
    tape.push("sum", Tensor::scalar(s), &[input], Box::new(SumBackward))
}

struct ConcatBackward {
    ca: usize,
    cb: usize,
    hw: usize,
}

impl Backward for ConcatBackward {
    fn backward(&self, grad: &[f64], parents: &[&Tensor], _: &Tensor, needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let n = parents[0].shape()[0];
        let ct = self.ca + self.cb;
        let mut ga = needs[0].then(|| Vec::with_capacity(n * self.ca * self.hw));
        let mut gb = needs[1].then(|| Vec::with_capacity(n * self.cb * self.hw));
        for b in 0..n {
            let base = b * ct * self.hw;
            if let Some(ga) = ga.as_mut() {
                ga.extend_from_slice(&grad[base..base + self.ca * self.hw]);
            }
            if let Some(gb) = gb.as_mut() {
                gb.extend_from_slice(&grad[base + self.ca * self.hw..base + ct * self.hw]);
            }
        }
        vec![ga, gb]
    }
}

/// Stacks two (n, ·, h, w) tensors along the channel axis.
pub fn concat_channels(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let (n, ca, h, w) = tape.value(a).dims4()?;
    let (nb, cb, hb, wb) = tape.value(b).dims4()?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::shape(
            "concat_channels",
            format!(
                "{:?} vs {:?}",
                tape.value(a).shape(),
                tape.value(b).shape()
            ),
        ));
    }
    let hw = h * w;
    let (da, db) = (tape.value(a).data(), tape.value(b).data());
    let mut out = Vec::with_capacity(n * (ca + cb) * hw);
    for bi in 0..n {
        out.extend_from_slice(&da[bi * ca * hw..(bi + 1) * ca * hw]);
        out.extend_from_slice(&db[bi * cb * hw..(bi + 1) * cb * hw]);
    }
    let value = Tensor::new(vec![n, ca + cb, h, w], out)?;
    tape.push(
        "concat_channels",
        value,
        &[a, b],
        Box::new(ConcatBackward { ca, cb, hw }),
    )
}

// ---------------------------------------------------------------------------
// Resampling

struct MaxPoolBackward {
    argmax: Vec<usize>,
}

impl Backward for MaxPoolBackward {
    fn backward(&self, grad: &[f64], parents: &[&Tensor], _: &Tensor, _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let mut dx = vec![0.0; parents[0].len()];
        for (g, &src) in grad.iter().zip(&self.argmax) {
            dx[src] += g;
        }
        vec![Some(dx)]
    }
}

/// 2×2 max pooling with stride 2. Ties resolve to the first element of the
/// window in row-major order, which also receives the gradient.
pub fn maxpool2(tape: &mut Tape, input: Var) -> Result<Var> {
    let (n, c, h, w) = tape.value(input).dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(
            "maxpool2",
            format!("spatial extent {h}x{w} must be even"),
        ));
    }
    let (ho, wo) = (h / 2, w / 2);
    let x = tape.value(input).data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut argmax = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    let value = Tensor::new(vec![n, c, ho, wo], out)?;
    tape.push("maxpool2", value, &[input], Box::new(MaxPoolBackward { argmax }))
}

struct UpsampleBackward;

impl Backward for UpsampleBackward {
    fn backward(&self, grad: &[f64], parents: &[&Tensor], _: &Tensor, _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (n, c, h, w) = parents[0].dims4().expect("upsample input is 4-D");
        let wo = 2 * w;
        let mut dx = vec![0.0; n * c * h * w];
        for plane in 0..n * c {
            for y in 0..2 * h {
                for x in 0..wo {
                    dx[plane * h * w + (y / 2) * w + x / 2] += grad[plane * 4 * h * w + y * wo + x];
                }
            }
        }
        vec![Some(dx)]
    }
}

/// Nearest-neighbour 2× spatial upsampling.
pub fn upsample2(tape: &mut Tape, input: Var) -> Result<Var> {
    let (n, c, h, w) = tape.value(input).dims4()?;
    let x = tape.value(input).data();
    let wo = 2 * w;
    let mut out = Vec::with_capacity(n * c * 4 * h * w);
    for plane in 0..n * c {
        for y in 0..2 * h {
            let row = &x[plane * h * w + (y / 2) * w..plane * h * w + (y / 2 + 1) * w];
            for xo in 0..wo {
                out.push(row[xo / 2]);
            }
        }
    }
    let value = Tensor::new(vec![n, c, 2 * h, 2 * w], out)?;
    tape.push("upsample2", value, &[input], Box::new(UpsampleBackward))
}

// ---------------------------------------------------------------------------
// Softmax and loss

struct SoftmaxBackward;

impl Backward for SoftmaxBackward {
    fn backward(&self, grad: &[f64], _: &[&Tensor], output: &Tensor, _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (n, c, h, w) = output.dims4().expect("softmax output is 4-D");
        let hw = h * w;
        let y = output.data();
        let mut dx = vec![0.0; y.len()];
        for b in 0..n {
            for p in 0..hw {
                let at = |ch: usize| (b * c + ch) * hw + p;
                let dot: f64 = (0..c).map(|ch| grad[at(ch)] * y[at(ch)]).sum();
                for ch in 0..c {
                    dx[at(ch)] = y[at(ch)] * (grad[at(ch)] - dot);
                }
            }
        }
        vec![Some(dx)]
    }
}

fn softmax_values(x: &Tensor) -> Result<Vec<f64>> {
    let (n, c, h, w) = x.dims4()?;
    if c == 0 {
        return Err(Error::shape("softmax_channels", "channel extent is zero"));
    }
    let hw = h * w;
    let d = x.data();
    let mut out = vec![0.0; d.len()];
    for b in 0..n {
        for p in 0..hw {
            let at = |ch: usize| (b * c + ch) * hw + p;
            let max = (0..c).map(|ch| d[at(ch)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for ch in 0..c {
                let e = (d[at(ch)] - max).exp();
                out[at(ch)] = e;
                total += e;
            }
            for ch in 0..c {
                out[at(ch)] /= total;
            }
        }
    }
    Ok(out)
}

/// Per-pixel softmax across the channel axis of an (n, c, h, w) tensor.
pub fn softmax_channels(tape: &mut Tape, input: Var) -> Result<Var> {
    let out = softmax_values(tape.value(input))?;
    let value = Tensor::new(tape.value(input).shape().to_vec(), out)?;
    tape.push("softmax_channels", value, &[input], Box::new(SoftmaxBackward))
}

struct CrossEntropyBackward {
    probs: Vec<f64>,
    labels: Vec<u8>,
}

impl Backward for CrossEntropyBackward {
    fn backward(&self, grad: &[f64], parents: &[&Tensor], _: &Tensor, _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (n, c, h, w) = parents[0].dims4().expect("logits are 4-D");
        let hw = h * w;
        let scale = grad[0] / (n * hw) as f64;
        let mut dx: Vec<f64> = self.probs.iter().map(|p| p * scale).collect();
        for b in 0..n {
            for p in 0..hw {
                let cls = self.labels[b * hw + p] as usize;
                dx[(b * c + cls) * hw + p] -= scale;
            }
        }
        vec![Some(dx)]
    }
}

/// Mean over pixels of `−log softmax(logits)[label]`.
///
/// `labels` holds one class index per pixel in (n, h, w) order.
pub fn cross_entropy_loss(tape: &mut Tape, logits: Var, labels: &[u8]) -> Result<Var> {
    let (n, c, h, w) = tape.value(logits).dims4()?;
    let hw = h * w;
    if labels.len() != n * hw {
        return Err(Error::shape(
            "cross_entropy_loss",
            format!("{} labels for {} pixels", labels.len(), n * hw),
        ));
    }
    if let Some(bad) = labels.iter().find(|&&l| l as usize >= c) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} outside class range 0..{c}"
        )));
    }
    let d = tape.value(logits).data();
    let probs = softmax_values(tape.value(logits))?;
    let mut total = 0.0;
    for b in 0..n {
        for p in 0..hw {
            let at = |ch: usize| (b * c + ch) * hw + p;
            let max = (0..c).map(|ch| d[at(ch)]).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + (0..c).map(|ch| (d[at(ch)] - max).exp()).sum::<f64>().ln();
            total += lse - d[at(labels[b * hw + p] as usize)];
        }
    }
    let loss = total / (n * hw) as f64;
    tape.push(
        "cross_entropy_loss",
        Tensor::scalar(loss),
        &[logits],
        Box::new(CrossEntropyBackward {
            probs,
            labels: labels.to_vec(),
        }),
    )
}
