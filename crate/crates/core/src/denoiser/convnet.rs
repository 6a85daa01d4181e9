//! Four-layer 3x3 convolutional noise predictor with hand-written reverse
//! mode.
//!
//! Layout: `[state | cond_image | y | x] -> conv1 -> silu -> conv2 -> silu ->
//! conv3 -> silu -> conv4`, where `y` and `x` are coordinate planes in
//! `[-1, 1]` and every hidden layer receives a per-channel bias computed from
//! the timestep embedding and the prompt embedding. The prediction is
//! `c_skip(t) * state + c_out(t) * conv4` (see [`OutputSkip`]). Convolutions
//! are lowered to im2col + GEMM. All buffers are channel-major.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserInput, VjpResult};
use crate::error::{Error, Result};
use crate::tensor::StateTensor;

/// How the state is routed around the network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputSkip {
    /// `eps = state + net`.
    Identity,
    /// `eps = sqrt(1 - abar_t) * state + sqrt(abar_t) * net` for a linear
    /// beta schedule. The implied x0 estimate is
    /// `sqrt(abar_t) * state - sqrt(1 - abar_t) * net`, so its sensitivity
    /// to the state stays bounded at high noise, unlike the identity skip
    /// where it scales with `1 / sqrt(abar_t)`.
    Preconditioned {
        num_train_steps: usize,
        beta_start: f64,
        beta_end: f64,
    },
}

impl OutputSkip {
    /// Preconditioned skip matching a linear schedule.
    pub fn preconditioned(schedule: &crate::schedule::NoiseSchedule) -> Self {
        let betas = schedule.betas();
        OutputSkip::Preconditioned {
            num_train_steps: betas.len(),
            beta_start: betas[0],
            beta_end: betas[betas.len() - 1],
        }
    }

    /// `(c_skip, c_out)` at training timestep `t`.
    fn scales(&self, t: usize) -> (f64, f64) {
        match *self {
            OutputSkip::Identity => (1.0, 1.0),
            OutputSkip::Preconditioned {
                num_train_steps,
                beta_start,
                beta_end,
            } => {
                let last = num_train_steps.saturating_sub(1).max(1) as f64;
                let t = t.min(num_train_steps - 1);
                let abar: f64 = (0..=t)
                    .map(|i| 1.0 - (beta_start + (beta_end - beta_start) * i as f64 / last))
                    .product();
                ((1.0 - abar).sqrt(), abar.sqrt())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvNetMeta {
    pub state_channels: usize,
    /// 0 for the base stage, `state_channels` for super-resolution stages.
    pub cond_channels: usize,
    pub widths: [usize; 3],
    pub temb_dim: usize,
    pub cond_dim: usize,
    pub skip: OutputSkip,
}

impl ConvNetMeta {
    pub fn new(state_channels: usize, cond_channels: usize, cond_dim: usize) -> Self {
        Self {
            state_channels,
            cond_channels,
            widths: [16, 32, 32],
            temb_dim: 16,
            cond_dim,
            skip: OutputSkip::Identity,
        }
    }

    pub fn with_widths(mut self, widths: [usize; 3]) -> Self {
        self.widths = widths;
        self
    }

    pub fn with_skip(mut self, skip: OutputSkip) -> Self {
        self.skip = skip;
        self
    }

    /// Input planes including the two coordinate planes.
    pub fn in_channels(&self) -> usize {
        self.state_channels + self.cond_channels + 2
    }

    fn conv_shapes(&self) -> [(usize, usize); 4] {
        let [w1, w2, w3] = self.widths;
        [
            (w1, self.in_channels()),
            (w2, w1),
            (w3, w2),
            (self.state_channels, w3),
        ]
    }

    fn layout(&self) -> Layout {
        let mut off = 0;
        let mut take = |n: usize| {
            let o = off;
            off += n;
            o
        };
        let shapes = self.conv_shapes();
        let mut conv = [Block::default(); 4];
        let mut temb = [Block::default(); 3];
        let mut cond = [Block::default(); 3];
        for (i, &(cout, cin)) in shapes.iter().enumerate() {
            conv[i] = Block {
                w: take(cout * cin * 9),
                b: take(cout),
                rows: cout,
                cols: cin * 9,
            };
            if i < 3 {
                temb[i] = Block {
                    w: take(cout * self.temb_dim),
                    b: take(cout),
                    rows: cout,
                    cols: self.temb_dim,
                };
                cond[i] = Block {
                    w: take(cout * self.cond_dim),
                    b: take(cout),
                    rows: cout,
                    cols: self.cond_dim,
                };
            }
        }
        Layout {
            conv,
            temb,
            cond,
            total: off,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }

    fn validate(&self) -> Result<()> {
        let ok = self.state_channels > 0
            && self.widths.iter().all(|w| *w > 0)
            && self.temb_dim > 0
            && self.temb_dim % 2 == 0
            && self.cond_dim > 0
            && (self.cond_channels == 0 || self.cond_channels == self.state_channels)
            && match self.skip {
                OutputSkip::Identity => true,
                OutputSkip::Preconditioned {
                    num_train_steps,
                    beta_start,
                    beta_end,
                } => num_train_steps > 0 && beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0,
            };
        if ok {
            Ok(())
        } else {
            Err(Error::Invariant(format!("invalid conv-net architecture {self:?}")))
        }
    }

    /// Seven architecture integers, followed for a preconditioned skip by the
    /// step count and the two betas as raw f64 bits.
    pub fn to_ints(&self) -> Vec<u64> {
        let mut ints: Vec<u64> = [
            self.state_channels,
            self.cond_channels,
            self.widths[0],
            self.widths[1],
            self.widths[2],
            self.temb_dim,
            self.cond_dim,
        ]
        .iter()
        .map(|&v| v as u64)
        .collect();
        if let OutputSkip::Preconditioned {
            num_train_steps,
            beta_start,
            beta_end,
        } = self.skip
        {
            ints.extend([num_train_steps as u64, beta_start.to_bits(), beta_end.to_bits()]);
        }
        ints
    }

    pub fn from_ints(ints: &[u64]) -> Result<Self> {
        let skip = match ints.len() {
            7 => OutputSkip::Identity,
            10 => OutputSkip::Preconditioned {
                num_train_steps: ints[7] as usize,
                beta_start: f64::from_bits(ints[8]),
                beta_end: f64::from_bits(ints[9]),
            },
            n => return Err(Error::Format(format!("expected 7 or 10 architecture ints, got {n}"))),
        };
        let v: Vec<usize> = ints[..7].iter().map(|&x| x as usize).collect();
        let meta = Self {
            state_channels: v[0],
            cond_channels: v[1],
            widths: [v[2], v[3], v[4]],
            temb_dim: v[5],
            cond_dim: v[6],
            skip,
        };
        meta.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok(meta)
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Block {
    w: usize,
    b: usize,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    conv: [Block; 4],
    temb: [Block; 3],
    cond: [Block; 3],
    total: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvNet {
    meta: ConvNetMeta,
    params: Vec<f64>,
}

pub(crate) struct Forward {
    height: usize,
    width: usize,
    /// im2col of each layer's input
    cols: [Vec<f64>; 4],
    /// pre-activations of the three hidden layers
    pre: [Vec<f64>; 3],
    temb: Vec<f64>,
    out: Vec<f64>,
}

impl ConvNet {
    /// Seeded `uniform(-a, a)` init with `a = 1/sqrt(fan_in)`.
    pub fn init(meta: ConvNetMeta, seed: u64) -> Result<Self> {
        meta.validate()?;
        let layout = meta.layout();
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = [
            layout.conv[0],
            layout.temb[0],
            layout.cond[0],
            layout.conv[1],
            layout.temb[1],
            layout.cond[1],
            layout.conv[2],
            layout.temb[2],
            layout.cond[2],
            layout.conv[3],
        ];
        for blk in blocks {
            let a = 1.0 / (blk.cols as f64).sqrt();
            for p in &mut params[blk.w..blk.w + blk.rows * blk.cols] {
                *p = rng.gen_range(-a..a);
            }
            for p in &mut params[blk.b..blk.b + blk.rows] {
                *p = rng.gen_range(-a..a);
            }
        }
        Ok(Self { meta, params })
    }

    pub fn from_parts(meta: ConvNetMeta, params: Vec<f64>) -> Result<Self> {
        meta.validate()?;
        if params.len() != meta.param_count() {
            return Err(Error::shape(
                format!("{} parameters", meta.param_count()),
                format!("{} parameters", params.len()),
            ));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(Self { meta, params })
    }

    pub fn meta(&self) -> &ConvNetMeta {
        &self.meta
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn input_planes(&self, input: &DenoiserInput<'_>) -> Result<Vec<f64>> {
        let m = &self.meta;
        if input.state.channels() != m.state_channels {
            return Err(Error::shape(
                format!("{} state channels", m.state_channels),
                format!("{}", input.state.channels()),
            ));
        }
        let mut planes = match (m.cond_channels, input.cond_image) {
            (0, None) => input.state.data().to_vec(),
            (0, Some(_)) => {
                return Err(Error::Invariant(
                    "base-stage model does not take a conditioning image".into(),
                ))
            }
            (_, None) => {
                return Err(Error::Invariant(
                    "super-resolution model requires a conditioning image".into(),
                ))
            }
            (cc, Some(ci)) => {
                if ci.channels() != cc {
                    return Err(Error::shape(format!("{cc} cond channels"), ci.channels()));
                }
                input.state.concat_channels(ci)?.into_data()
            }
        };
        let (h, w) = (input.state.height(), input.state.width());
        planes.extend(coordinate_planes(h, w));
        Ok(planes)
    }

    fn run_forward(&self, input: &DenoiserInput<'_>) -> Result<Forward> {
        let (h, w) = (input.state.height(), input.state.width());
        let hw = h * w;
        let layout = self.meta.layout();
        let p = &self.params;

        let temb = sinusoidal_embedding(input.timestep as f64, self.meta.temb_dim);
        let (c_skip, c_out) = self.meta.skip.scales(input.timestep);
        let temb_bias: Vec<Vec<f64>> = layout.temb.iter().map(|&b| affine(p, b, &temb)).collect();
        let cond_bias: Vec<Vec<f64>> =
            layout.cond.iter().map(|&b| affine(p, b, input.embedding)).collect();

        let mut cols: [Vec<f64>; 4] = Default::default();
        let mut pre: [Vec<f64>; 3] = Default::default();
        let mut act = self.input_planes(input)?;
        let mut out = Vec::new();
        for (li, blk) in layout.conv.iter().enumerate() {
            let cin = blk.cols / 9;
            cols[li] = im2col(&act, cin, h, w);
            let mut z = vec![0.0; blk.rows * hw];
            gemm(
                blk.rows,
                blk.cols,
                hw,
                Mat::new(&p[blk.w..blk.w + blk.rows * blk.cols], blk.cols, 1),
                Mat::new(&cols[li], hw, 1),
                &mut z,
                0.0,
            );
            for co in 0..blk.rows {
                let mut bias = p[blk.b + co];
                if li < 3 {
                    bias += temb_bias[li][co] + cond_bias[li][co];
                }
                z[co * hw..(co + 1) * hw].iter_mut().for_each(|v| *v += bias);
            }
            if li < 3 {
                act = z.iter().map(|&v| silu(v)).collect();
                pre[li] = z;
            } else {
                z.iter_mut()
                    .zip(input.state.data())
                    .for_each(|(o, x)| *o = c_skip * x + c_out * *o);
                out = z;
            }
        }
        Ok(Forward {
            height: h,
            width: w,
            cols,
            pre,
            temb,
            out,
        })
    }

    pub(crate) fn forward(&self, input: &DenoiserInput<'_>) -> Result<StateTensor> {
        let f = self.run_forward(input)?;
        StateTensor::new(f.height, f.width, self.meta.state_channels, f.out)
    }

    /// Shared reverse pass. `param_grad` is filled when provided.
    fn backward(
        &self,
        f: &Forward,
        input: &DenoiserInput<'_>,
        upstream: &StateTensor,
        mut param_grad: Option<&mut [f64]>,
        want_state: bool,
    ) -> Result<(Option<StateTensor>, Vec<f64>)> {
        let (h, w) = (f.height, f.width);
        let hw = h * w;
        let layout = self.meta.layout();
        let p = &self.params;
        let (c_skip, c_out) = self.meta.skip.scales(input.timestep);
        let mut delta: Vec<f64> = upstream.data().iter().map(|u| c_out * u).collect();
        let mut grad_emb = vec![0.0; self.meta.cond_dim];
        let mut grad_state = None;

        for li in (0..4).rev() {
            let blk = layout.conv[li];
            let cin = blk.cols / 9;
            let row_sums: Vec<f64> = delta.chunks(hw).map(|c| c.iter().sum()).collect();
            if let Some(g) = param_grad.as_deref_mut() {
                // dW = delta . cols^T
                gemm(
                    blk.rows,
                    hw,
                    blk.cols,
                    Mat::new(&delta, hw, 1),
                    Mat::new(&f.cols[li], 1, hw),
                    &mut g[blk.w..blk.w + blk.rows * blk.cols],
                    0.0,
                );
                g[blk.b..blk.b + blk.rows].copy_from_slice(&row_sums);
                if li < 3 {
                    outer(g, layout.temb[li], &row_sums, &f.temb);
                    outer(g, layout.cond[li], &row_sums, input.embedding);
                }
            }
            if li < 3 {
                // d emb += Wc^T . row_sums
                let c = layout.cond[li];
                for (j, ge) in grad_emb.iter_mut().enumerate() {
                    *ge += (0..c.rows).map(|r| p[c.w + r * c.cols + j] * row_sums[r]).sum::<f64>();
                }
            }
            if li == 0 && !want_state {
                break;
            }
            // dcols = W^T . delta
            let mut dcols = vec![0.0; blk.cols * hw];
            gemm(
                blk.cols,
                blk.rows,
                hw,
                Mat::new(&p[blk.w..blk.w + blk.rows * blk.cols], 1, blk.cols),
                Mat::new(&delta, hw, 1),
                &mut dcols,
                0.0,
            );
            let dact = col2im(&dcols, cin, h, w);
            if li == 0 {
                let n = self.meta.state_channels * hw;
                let mut gs = dact[..n].to_vec();
                gs.iter_mut().zip(upstream.data()).for_each(|(g, u)| *g += c_skip * u);
                grad_state = Some(StateTensor::new(h, w, self.meta.state_channels, gs)?);
            } else {
                delta = dact
                    .iter()
                    .zip(&f.pre[li - 1])
                    .map(|(d, &z)| d * silu_grad(z))
                    .collect();
            }
        }
        Ok((grad_state, grad_emb))
    }

    /// Forward pass kept for later reverse passes.
    pub(crate) fn forward_cached(&self, input: &DenoiserInput<'_>) -> Result<(StateTensor, Forward)> {
        let f = self.run_forward(input)?;
        let out = StateTensor::new(f.height, f.width, self.meta.state_channels, f.out.clone())?;
        Ok((out, f))
    }

    pub(crate) fn input_vjp(
        &self,
        f: &Forward,
        input: &DenoiserInput<'_>,
        upstream: &StateTensor,
    ) -> Result<(StateTensor, Vec<f64>)> {
        let (gs, ge) = self.backward(f, input, upstream, None, true)?;
        Ok((gs.expect("state gradient requested"), ge))
    }

    pub(crate) fn vjp(&self, input: &DenoiserInput<'_>, upstream: &StateTensor) -> Result<VjpResult> {
        let f = self.run_forward(input)?;
        let (gs, ge) = self.backward(&f, input, upstream, None, true)?;
        Ok(VjpResult {
            output: StateTensor::new(f.height, f.width, self.meta.state_channels, f.out)?,
            grad_wrt_state: gs.expect("state gradient requested"),
            grad_wrt_cond_embedding: ge,
        })
    }

    /// Prediction and parameter gradient in one pass.
    pub fn param_vjp(&self, input: &DenoiserInput<'_>, upstream: &StateTensor) -> Result<(StateTensor, Vec<f64>)> {
        let f = self.run_forward(input)?;
        let mut g = vec![0.0; self.params.len()];
        self.backward(&f, input, upstream, Some(&mut g), false)?;
        Ok((
            StateTensor::new(f.height, f.width, self.meta.state_channels, f.out)?,
            g,
        ))
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
/// `y` then `x` pixel-centre coordinates in `[-1, 1]`.
fn coordinate_planes(h: usize, w: usize) -> Vec<f64> {
    let coord = |i: usize, n: usize| (2 * i + 1) as f64 / n as f64 - 1.0;
    let ys = (0..h).flat_map(move |y| (0..w).map(move |_| coord(y, h)));
    let xs = (0..h).flat_map(move |_| (0..w).map(move |x| coord(x, w)));
    ys.chain(xs).collect()
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// `[sin(t f_0..f_{d/2}), cos(t f_0..f_{d/2})]` with geometric frequencies.
pub fn sinusoidal_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|k| (-(10_000f64.ln()) * k as f64 / half as f64).exp())
        .collect();
    freqs
        .iter()
        .map(|f| (t * f).sin())
        .chain(freqs.iter().map(|f| (t * f).cos()))
        .collect()
}

fn affine(p: &[f64], blk: Block, x: &[f64]) -> Vec<f64> {
    (0..blk.rows)
        .map(|r| {
            let row = &p[blk.w + r * blk.cols..blk.w + (r + 1) * blk.cols];
            p[blk.b + r] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect()
}

fn outer(g: &mut [f64], blk: Block, rows: &[f64], x: &[f64]) {
    for r in 0..blk.rows {
        for (j, xj) in x.iter().enumerate() {
            g[blk.w + r * blk.cols + j] = rows[r] * xj;
        }
        g[blk.b + r] = rows[r];
    }
}

/// Rows are `(channel, ky, kx)`, columns are output pixels; zero padding 1.
fn im2col(x: &[f64], channels: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut cols = vec![0.0; channels * 9 * hw];
    for c in 0..channels {
        let plane = &x[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((c * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let dst = &mut row[y * w..(y + 1) * w];
                    match kx {
                        0 => dst[1..].copy_from_slice(&src[..w - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..w - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im(cols: &[f64], channels: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut x = vec![0.0; channels * hw];
    for c in 0..channels {
        let plane = &mut x[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((c * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let src = &row[y * w..(y + 1) * w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, s)| *d += s),
                    }
                }
            }
        }
    }
    x
}

/// Strided read-only matrix view.
#[derive(Clone, Copy)]
struct Mat<'a> {
    data: &'a [f64],
    row_stride: usize,
    col_stride: usize,
}

impl<'a> Mat<'a> {
    fn new(data: &'a [f64], row_stride: usize, col_stride: usize) -> Self {
        Self {
            data,
            row_stride,
            col_stride,
        }
    }
}

/// `c = a (m x k) * b (k x n) + beta * c`, `c` row-major `m x n`.
fn gemm(m: usize, k: usize, n: usize, a: Mat<'_>, b: Mat<'_>, c: &mut [f64], beta: f64) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let last = |mat: Mat<'_>, r: usize, cc: usize| {
        if r == 0 || cc == 0 {
            0
        } else {
            (r - 1) * mat.row_stride + (cc - 1) * mat.col_stride
        }
    };
    assert!(k == 0 || last(a, m, k) < a.data.len());
    assert!(k == 0 || last(b, k, n) < b.data.len());
    // SAFETY: the asserts above bound every element the kernel reads, and
    // `c` holds at least m*n elements with row stride n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserModel;

    fn random_input(seed: u64, h: usize, w: usize, c: usize) -> StateTensor {
        StateTensor::randn(h, w, c, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let (c, h, w) = (2, 4, 5);
        let x = random_input(1, h, w, c).into_data();
        let y: Vec<f64> = random_input(2, 9 * h, w, c).into_data();
        let ax = im2col(&x, c, h, w);
        let aty = col2im(&y, c, h, w);
        let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn conv_matches_direct_loop() {
        let meta = ConvNetMeta::new(2, 0, 3).with_widths([3, 2, 2]);
        let net = ConvNet::init(meta, 9).unwrap();
        let x = random_input(3, 5, 4, 2);
        let emb = [0.1, 0.2, 0.3];
        let f = net.run_forward(&DenoiserInput::new(&x, 10, &emb)).unwrap();
        let layout = meta.layout();
        let blk = layout.conv[0];
        let temb = affine(&net.params, layout.temb[0], &sinusoidal_embedding(10.0, meta.temb_dim));
        let cond = affine(&net.params, layout.cond[0], &emb);
        let plane = |ci: usize, y: usize, xx: usize| match ci {
            0 | 1 => x.get(ci, y, xx),
            2 => (2 * y + 1) as f64 / 5.0 - 1.0,
            _ => (2 * xx + 1) as f64 / 4.0 - 1.0,
        };
        for co in 0..3 {
            for y in 0..5 {
                for xx in 0..4 {
                    let mut acc = net.params[blk.b + co] + temb[co] + cond[co];
                    for ci in 0..4 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (sy, sx) = (y as isize + ky - 1, xx as isize + kx - 1);
                                if sy < 0 || sy >= 5 || sx < 0 || sx >= 4 {
                                    continue;
                                }
                                let wv = net.params[blk.w + co * 36 + ci * 9 + (ky * 3 + kx) as usize];
                                acc += wv * plane(ci, sy as usize, sx as usize);
                            }
                        }
                    }
                    assert!((f.pre[0][co * 20 + y * 4 + xx] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_parameters_give_identity() {
        let meta = ConvNetMeta::new(3, 3, 4);
        let net = ConvNet::from_parts(meta, vec![0.0; meta.param_count()]).unwrap();
        let x = random_input(4, 6, 6, 3);
        let ci = random_input(5, 6, 6, 3);
        let out = net
            .forward(&DenoiserInput::new(&x, 500, &[1.0, 2.0, 3.0, 4.0]).with_cond_image(Some(&ci)))
            .unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn preconditioned_skip_follows_the_schedule() {
        let sched = crate::schedule::NoiseSchedule::linear(50, 1e-3, 0.05).unwrap();
        let meta = ConvNetMeta::new(3, 0, 4).with_skip(OutputSkip::preconditioned(&sched));
        let net = ConvNet::from_parts(meta, vec![0.0; meta.param_count()]).unwrap();
        let x = random_input(4, 3, 3, 3);
        for t in [0, 17, 49] {
            let abar = sched.alpha_bars()[t];
            assert_eq!(meta.skip.scales(t), ((1.0 - abar).sqrt(), abar.sqrt()));
            let out = net.forward(&DenoiserInput::new(&x, t, &[0.0; 4])).unwrap();
            assert_eq!(out, x.scale((1.0 - abar).sqrt()));
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let meta = ConvNetMeta::new(3, 0, 4).with_widths([4, 4, 4]);
        let model = DenoiserModel::from(ConvNet::init(meta, 1).unwrap());
        let x = random_input(6, 5, 5, 3);
        let input = DenoiserInput::new(&x, 77, &[0.5, -0.5, 0.1, 0.0]);
        let zero = StateTensor::zeros_like(&x);
        let v = model.predict_eps_with_vjp(&input, &zero).unwrap();
        assert!(v.grad_wrt_state.data().iter().all(|g| *g == 0.0));
        assert!(v.grad_wrt_cond_embedding.iter().all(|g| *g == 0.0));
        assert!(model.train_vjp(&input, &zero).unwrap().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn conditioning_image_contract() {
        let sr = ConvNet::init(ConvNetMeta::new(3, 3, 2), 0).unwrap();
        let base = ConvNet::init(ConvNetMeta::new(3, 0, 2), 0).unwrap();
        let x = random_input(1, 4, 4, 3);
        assert!(sr.forward(&DenoiserInput::new(&x, 1, &[0.0, 0.0])).is_err());
        let ci = random_input(2, 4, 4, 3);
        let with = DenoiserInput::new(&x, 1, &[0.0, 0.0]).with_cond_image(Some(&ci));
        assert!(base.forward(&with).is_err());
        assert!(sr.forward(&with).is_ok());
    }

    #[test]
    fn meta_round_trips_through_ints() {
        let meta = ConvNetMeta::new(3, 3, 8).with_widths([5, 6, 7]);
        assert_eq!(ConvNetMeta::from_ints(&meta.to_ints()).unwrap(), meta);
        let pre = meta.with_skip(OutputSkip::preconditioned(&crate::schedule::NoiseSchedule::default()));
        assert_eq!(pre.to_ints().len(), 10);
        assert_eq!(ConvNetMeta::from_ints(&pre.to_ints()).unwrap(), pre);
        assert!(ConvNetMeta::from_ints(&[1, 2]).is_err());
    }
}
