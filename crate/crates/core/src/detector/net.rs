//! A small convolutional network with a hand-written reverse pass.
//!
//! Layout: `[conv 3x3 (same) -> ReLU -> maxpool 2x2] * L`, then fully
//! connected layers with ReLU between them, and a sigmoid on every output.
//! Parameters live in one flat vector; each layer owns a contiguous weight
//! block followed by its biases.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::encoding::GridSpec;
use super::DetectorError;

pub trait Scalar: Float + FromPrimitive + Sum + Debug + Send + Sync + Into<f64> + 'static {}
impl Scalar for f32 {}
impl Scalar for f64 {}

const K: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub input_size: usize,
    pub in_channels: usize,
    pub conv_filters: Vec<usize>,
    pub fc_sizes: Vec<usize>,
    pub grid: GridSpec,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            input_size: 112,
            in_channels: 1,
            conv_filters: vec![8, 16, 32, 64],
            fc_sizes: vec![256, 512],
            grid: GridSpec::default(),
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<(), DetectorError> {
        let pools = 1usize << self.conv_filters.len();
        let bad = self.input_size == 0
            || !self.input_size.is_multiple_of(pools)
            || self.in_channels == 0
            || self.conv_filters.contains(&0)
            || self.fc_sizes.contains(&0)
            || self.grid.g == 0
            || self.grid.b == 0;
        if bad {
            return Err(DetectorError::InvalidArch(format!("{self:?}")));
        }
        Ok(())
    }

    pub fn output_len(&self) -> usize {
        self.grid.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct ConvLayer {
    in_c: usize,
    out_c: usize,
    /// Spatial side of the input (and of the pre-pool output).
    n: usize,
    w_off: usize,
    b_off: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct FcLayer {
    n_in: usize,
    n_out: usize,
    w_off: usize,
    b_off: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyNet<T> {
    arch: ArchConfig,
    convs: Vec<ConvLayer>,
    fcs: Vec<FcLayer>,
    pub params: Vec<T>,
}

/// Intermediate values kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    conv_in: Vec<Vec<T>>,
    /// Post-ReLU conv outputs before pooling.
    conv_out: Vec<Vec<T>>,
    /// Flat index into `conv_out` of each pooled maximum.
    pool_idx: Vec<Vec<u32>>,
    fc_in: Vec<Vec<T>>,
    pub output: Vec<T>,
}

impl<T> Trace<T> {
    /// Identifies every piecewise branch taken (ReLU signs, pool winners), so
    /// callers can tell when a perturbation crossed a kink.
    pub fn pattern(&self) -> Vec<u32>
    where
        T: Scalar,
    {
        let mut out = Vec::new();
        for l in &self.conv_out {
            out.extend(l.iter().map(|v| u32::from(*v > T::zero())));
        }
        for l in &self.pool_idx {
            out.extend_from_slice(l);
        }
        for l in self.fc_in.iter().skip(1) {
            out.extend(l.iter().map(|v| u32::from(*v > T::zero())));
        }
        out
    }
}

fn cast<T: Scalar>(v: f64) -> T {
    T::from_f64(v).expect("representable")
}

impl<T: Scalar> TinyNet<T> {
    pub fn new(arch: ArchConfig) -> Result<Self, DetectorError> {
        arch.validate()?;
        let mut off = 0;
        let mut convs = Vec::new();
        let (mut c, mut n) = (arch.in_channels, arch.input_size);
        for &f in &arch.conv_filters {
            let w_off = off;
            off += f * c * K * K;
            convs.push(ConvLayer {
                in_c: c,
                out_c: f,
                n,
                w_off,
                b_off: off,
            });
            off += f;
            c = f;
            n /= 2;
        }
        let mut fcs = Vec::new();
        let mut n_in = c * n * n;
        for n_out in arch.fc_sizes.iter().copied().chain([arch.output_len()]) {
            let w_off = off;
            off += n_in * n_out;
            fcs.push(FcLayer {
                n_in,
                n_out,
                w_off,
                b_off: off,
            });
            off += n_out;
            n_in = n_out;
        }
        Ok(Self {
            arch,
            convs,
            fcs,
            params: vec![T::zero(); off],
        })
    }

    /// He-normal weights from `seed`, zero biases.
    pub fn init(arch: ArchConfig, seed: u64) -> Result<Self, DetectorError> {
        let mut net = Self::new(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks: Vec<(usize, usize, usize)> = net
            .convs
            .iter()
            .map(|l| (l.w_off, l.b_off, l.in_c * K * K))
            .chain(net.fcs.iter().map(|l| (l.w_off, l.b_off, l.n_in)))
            .collect();
        for (w_off, b_off, fan_in) in blocks {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            for p in &mut net.params[w_off..b_off] {
                *p = cast(normal.sample(&mut rng));
            }
        }
        Ok(net)
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    /// Flat parameter vector: conv weights and biases, then fully connected.
    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn input_len(&self) -> usize {
        self.arch.in_channels * self.arch.input_size * self.arch.input_size
    }

    /// Same architecture with parameters converted to another precision.
    pub fn convert<U: Scalar>(&self) -> TinyNet<U> {
        TinyNet {
            arch: self.arch.clone(),
            convs: self.convs.clone(),
            fcs: self.fcs.clone(),
            params: self.params.iter().map(|p| cast((*p).into())).collect(),
        }
    }

    pub fn forward(&self, input: &[T]) -> Result<Vec<T>, DetectorError> {
        Ok(self.forward_trace(input)?.output)
    }

    pub fn forward_trace(&self, input: &[T]) -> Result<Trace<T>, DetectorError> {
        if input.len() != self.input_len() {
            return Err(DetectorError::ShapeMismatch {
                expected: self.input_len(),
                got: input.len(),
            });
        }
        let mut trace = Trace {
            conv_in: Vec::with_capacity(self.convs.len()),
            conv_out: Vec::with_capacity(self.convs.len()),
            pool_idx: Vec::with_capacity(self.convs.len()),
            fc_in: Vec::with_capacity(self.fcs.len()),
            output: Vec::new(),
        };
        let mut x = input.to_vec();
        for l in &self.convs {
            let mut y = self.conv_forward(l, &x);
            y.iter_mut().for_each(|v| *v = v.max(T::zero()));
            let (pooled, idx) = maxpool(&y, l.out_c, l.n);
            trace.conv_in.push(x);
            trace.conv_out.push(y);
            trace.pool_idx.push(idx);
            x = pooled;
        }
        let last = self.fcs.len() - 1;
        for (li, l) in self.fcs.iter().enumerate() {
            let w = &self.params[l.w_off..l.b_off];
            let b = &self.params[l.b_off..l.b_off + l.n_out];
            let mut y: Vec<T> = (0..l.n_out)
                .map(|o| b[o] + dot(&w[o * l.n_in..(o + 1) * l.n_in], &x))
                .collect();
            if li < last {
                y.iter_mut().for_each(|v| *v = v.max(T::zero()));
            } else {
                y.iter_mut().for_each(|v| *v = T::one() / (T::one() + (-*v).exp()));
            }
            trace.fc_in.push(x);
            x = y;
        }
        trace.output = x;
        Ok(trace)
    }

    fn conv_forward(&self, l: &ConvLayer, x: &[T]) -> Vec<T> {
        let n = l.n;
        let plane = n * n;
        let w = &self.params[l.w_off..l.b_off];
        let mut y = vec![T::zero(); l.out_c * plane];
        for o in 0..l.out_c {
            let out = &mut y[o * plane..(o + 1) * plane];
            out.iter_mut().for_each(|v| *v = self.params[l.b_off + o]);
            for i in 0..l.in_c {
                let src = &x[i * plane..(i + 1) * plane];
                for ky in 0..K {
                    for kx in 0..K {
                        let wv = w[((o * l.in_c + i) * K + ky) * K + kx];
                        let (x0, x1) = (1usize.saturating_sub(kx), (n + 1 - kx).min(n));
                        for yy in 0..n {
                            let iy = yy + ky;
                            if iy < 1 || iy > n {
                                continue;
                            }
                            let s = (iy - 1) * n + x0 + kx - 1;
                            axpy(wv, &src[s..s + (x1 - x0)], &mut out[yy * n + x0..yy * n + x1]);
                        }
                    }
                }
            }
        }
        y
    }

    /// Accumulate `d loss / d params` into `grads` given `d loss / d output`.
    pub fn backward(&self, trace: &Trace<T>, grad_out: &[T], grads: &mut [T]) {
        assert_eq!(grad_out.len(), trace.output.len());
        assert_eq!(grads.len(), self.params.len());
        // through the sigmoid
        let mut g: Vec<T> = grad_out
            .iter()
            .zip(&trace.output)
            .map(|(g, s)| *g * *s * (T::one() - *s))
            .collect();
        for li in (0..self.fcs.len()).rev() {
            let l = &self.fcs[li];
            let x = &trace.fc_in[li];
            let w = &self.params[l.w_off..l.b_off];
            let mut gx = vec![T::zero(); l.n_in];
            for o in 0..l.n_out {
                let go = g[o];
                if go == T::zero() {
                    continue;
                }
                grads[l.b_off + o] = grads[l.b_off + o] + go;
                axpy(go, x, &mut grads[l.w_off + o * l.n_in..l.w_off + (o + 1) * l.n_in]);
                axpy(go, &w[o * l.n_in..(o + 1) * l.n_in], &mut gx);
            }
            // hidden FC inputs and the flattened conv output are post-ReLU
            if li > 0 || !self.convs.is_empty() {
                gx.iter_mut().zip(x).for_each(|(gv, xv)| {
                    if *xv <= T::zero() {
                        *gv = T::zero();
                    }
                });
            }
            g = gx;
        }
        for li in (0..self.convs.len()).rev() {
            let l = &self.convs[li];
            let y = &trace.conv_out[li];
            let mut gy = vec![T::zero(); y.len()];
            for (pi, &src) in trace.pool_idx[li].iter().enumerate() {
                gy[src as usize] = g[pi];
            }
            gy.iter_mut().zip(y).for_each(|(gv, yv)| {
                if *yv <= T::zero() {
                    *gv = T::zero();
                }
            });
            g = self.conv_backward(l, &trace.conv_in[li], &gy, grads, li > 0);
        }
    }

    fn conv_backward(&self, l: &ConvLayer, x: &[T], gy: &[T], grads: &mut [T], need_input: bool) -> Vec<T> {
        let n = l.n;
        let plane = n * n;
        let w = &self.params[l.w_off..l.b_off];
        let mut gx = vec![T::zero(); if need_input { l.in_c * plane } else { 0 }];
        for o in 0..l.out_c {
            let go = &gy[o * plane..(o + 1) * plane];
            grads[l.b_off + o] = grads[l.b_off + o] + go.iter().copied().sum();
            for i in 0..l.in_c {
                let src = &x[i * plane..(i + 1) * plane];
                for ky in 0..K {
                    for kx in 0..K {
                        let wi = ((o * l.in_c + i) * K + ky) * K + kx;
                        let (x0, x1) = (1usize.saturating_sub(kx), (n + 1 - kx).min(n));
                        let mut acc = T::zero();
                        for yy in 0..n {
                            let iy = yy + ky;
                            if iy < 1 || iy > n {
                                continue;
                            }
                            let s = (iy - 1) * n + x0 + kx - 1;
                            let grow = &go[yy * n + x0..yy * n + x1];
                            acc = acc + dot(grow, &src[s..s + (x1 - x0)]);
                            if need_input {
                                axpy(w[wi], grow, &mut gx[i * plane + s..i * plane + s + (x1 - x0)]);
                            }
                        }
                        grads[l.w_off + wi] = grads[l.w_off + wi] + acc;
                    }
                }
            }
        }
        gx
    }
}

fn maxpool<T: Scalar>(y: &[T], c: usize, n: usize) -> (Vec<T>, Vec<u32>) {
    let m = n / 2;
    let mut out = Vec::with_capacity(c * m * m);
    let mut idx = Vec::with_capacity(c * m * m);
    for ch in 0..c {
        let base = ch * n * n;
        for py in 0..m {
            for px in 0..m {
                let mut best = base + 2 * py * n + 2 * px;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let j = base + (2 * py + dy) * n + 2 * px + dx;
                    if y[j] > y[best] {
                        best = j;
                    }
                }
                out.push(y[best]);
                idx.push(best as u32);
            }
        }
    }
    (out, idx)
}

/// Dot product with eight independent accumulators.
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let chunks = n / 8;
    for c in 0..chunks {
        let (ca, cb) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for k in 0..8 {
            acc[k] = acc[k] + ca[k] * cb[k];
        }
    }
    let mut s = acc.iter().copied().sum::<T>();
    for k in chunks * 8..n {
        s = s + a[k] * b[k];
    }
    s
}

/// `y += alpha * x`.
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv = *yv + alpha * *xv;
    }
}
