//! Small differentiable building blocks shared by the projector and the
//! language model. Each op pairs a forward that records what backward needs
//! with a backward that returns input and parameter gradients.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use crate::error::{Error, Result};

pub const RMSNORM_EPS: f64 = 1e-6;

/// Affine map y = x Wᵀ + b with W stored (out, in).
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn init(out_dim: usize, in_dim: usize, rng: &mut impl Rng) -> Self {
        let scale = 1.0 / (in_dim as f64).sqrt();
        Linear {
            w: Array2::from_shape_fn((out_dim, in_dim), |_| rng.gen_range(-scale..scale)),
            b: Array1::zeros(out_dim),
        }
    }

    pub fn zeros_like(&self) -> Linear {
        Linear {
            w: Array2::zeros(self.w.dim()),
            b: Array1::zeros(self.b.len()),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.in_dim() {
            return Err(Error::Shape(format!(
                "linear expects {} input channels, got {}",
                self.in_dim(),
                x.ncols()
            )));
        }
        Ok(x.dot(&self.w.t()) + &self.b)
    }

    pub fn forward_vec(&self, x: &Array1<f64>) -> Array1<f64> {
        self.w.dot(x) + &self.b
    }

    /// Returns (dx, dparams).
    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>) -> (Array2<f64>, Linear) {
        let dw = dy.t().dot(x);
        let db = dy.sum_axis(Axis(0));
        let dx = dy.dot(&self.w);
        (dx, Linear { w: dw, b: db })
    }
}

/// Root-mean-square normalization with a learned per-channel gain.
#[derive(Debug, Clone)]
pub struct RmsNorm {
    pub g: Array1<f64>,
}

pub struct RmsNormCache {
    x: Array2<f64>,
    inv_rms: Array1<f64>, // per row
}

impl RmsNorm {
    pub fn new(dim: usize) -> Self {
        RmsNorm { g: Array1::ones(dim) }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<(Array2<f64>, RmsNormCache)> {
        let (rows, d) = x.dim();
        if d != self.g.len() {
            return Err(Error::Shape("rmsnorm width mismatch".into()));
        }
        let mut y = Array2::zeros((rows, d));
        let mut inv_rms = Array1::zeros(rows);
        for k in 0..rows {
            let ms: f64 = x.row(k).iter().map(|v| v * v).sum::<f64>() / d as f64;
            let ir = 1.0 / (ms + RMSNORM_EPS).sqrt();
            inv_rms[k] = ir;
            for c in 0..d {
                y[[k, c]] = x[[k, c]] * ir * self.g[c];
            }
        }
        Ok((y, RmsNormCache { x: x.clone(), inv_rms }))
    }

    pub fn forward_vec(&self, x: &Array1<f64>) -> Array1<f64> {
        let d = x.len();
        let ms: f64 = x.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let ir = 1.0 / (ms + RMSNORM_EPS).sqrt();
        Array1::from_shape_fn(d, |c| x[c] * ir * self.g[c])
    }

    /// Returns (dx, dg).
    pub fn backward(&self, cache: &RmsNormCache, dy: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
        let (rows, d) = cache.x.dim();
        let mut dx = Array2::zeros((rows, d));
        let mut dg = Array1::zeros(d);
        for k in 0..rows {
            let ir = cache.inv_rms[k];
            let mut dot = 0.0;
            for c in 0..d {
                dg[c] += dy[[k, c]] * cache.x[[k, c]] * ir;
                dot += dy[[k, c]] * self.g[c] * cache.x[[k, c]];
            }
            // dx = g·dy·ir − x · (Σ dy g x) · ir³ / d
            let scale = dot * ir * ir * ir / d as f64;
            for c in 0..d {
                dx[[k, c]] = dy[[k, c]] * self.g[c] * ir - cache.x[[k, c]] * scale;
            }
        }
        (dx, dg)
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// x·σ(x), elementwise.
pub fn silu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v * sigmoid(v))
}

/// d/dx of silu given the pre-activation input.
pub fn silu_backward(x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(x, |g, &v| {
        let s = sigmoid(v);
        *g *= s * (1.0 + v * (1.0 - s));
    });
    dx
}

/// Depthwise causal 1-D convolution of width k, zero-padded on the left.
#[derive(Debug, Clone)]
pub struct CausalConv1d {
    /// (d, k); tap j multiplies x_{t-j}.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl CausalConv1d {
    pub fn init(d: usize, k: usize, rng: &mut impl Rng) -> Self {
        let scale = 1.0 / (k as f64).sqrt();
        CausalConv1d {
            w: Array2::from_shape_fn((d, k), |_| rng.gen_range(-scale..scale)),
            b: Array1::zeros(d),
        }
    }

    pub fn width(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        let (rows, d) = x.dim();
        if d != self.w.nrows() {
            return Err(Error::Shape("conv channel mismatch".into()));
        }
        let k = self.width();
        let mut y = Array2::zeros((rows, d));
        for t in 0..rows {
            for c in 0..d {
                let mut acc = self.b[c];
                for j in 0..k.min(t + 1) {
                    acc += self.w[[c, j]] * x[[t - j, c]];
                }
                y[[t, c]] = acc;
            }
        }
        Ok(y)
    }

    /// Returns (dx, dparams).
    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>) -> (Array2<f64>, CausalConv1d) {
        let (rows, d) = x.dim();
        let k = self.width();
        let mut dx = Array2::zeros((rows, d));
        let mut dw = Array2::zeros((d, k));
        let db = dy.sum_axis(Axis(0));
        for t in 0..rows {
            for c in 0..d {
                let g = dy[[t, c]];
                for j in 0..k.min(t + 1) {
                    dw[[c, j]] += g * x[[t - j, c]];
                    dx[[t - j, c]] += g * self.w[[c, j]];
                }
            }
        }
        (dx, CausalConv1d { w: dw, b: db })
    }
}

/// Mutable view of one named parameter tensor, used for flattening,
/// checkpointing, and the optimizer.
pub enum TensorMut<'a> {
    A1(&'a mut Array1<f64>),
    A2(&'a mut Array2<f64>),
}

impl TensorMut<'_> {
    pub fn len(&self) -> usize {
        match self {
            TensorMut::A1(a) => a.len(),
            TensorMut::A2(a) => a.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> Vec<usize> {
        match self {
            TensorMut::A1(a) => vec![a.len()],
            TensorMut::A2(a) => vec![a.nrows(), a.ncols()],
        }
    }

    pub fn iter(&self) -> Box<dyn Iterator<Item = &f64> + '_> {
        match self {
            TensorMut::A1(a) => Box::new(a.iter()),
            TensorMut::A2(a) => Box::new(a.iter()),
        }
    }

    pub fn fill_from(&mut self, src: &mut dyn Iterator<Item = f64>) {
        match self {
            TensorMut::A1(a) => a.iter_mut().for_each(|v| *v = src.next().expect("flat params exhausted")),
            TensorMut::A2(a) => a.iter_mut().for_each(|v| *v = src.next().expect("flat params exhausted")),
        }
    }
}

/// Parameter container that can enumerate its tensors by name in a stable
/// order. Flattening, checkpoints, and AdamW all route through this.
pub trait VisitParams {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, TensorMut));

    fn flatten(&mut self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit_mut("", &mut |_, t| out.extend(t.iter().copied()));
        out
    }

    fn set_from_flat(&mut self, flat: &[f64]) {
        let mut it = flat.iter().copied();
        self.visit_mut("", &mut |_, mut t| t.fill_from(&mut it));
        assert!(it.next().is_none(), "flat vector longer than parameter set");
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_mut("", &mut |_, t| n += t.len());
        n
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl VisitParams for Linear {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, TensorMut)) {
        f(join(prefix, "w"), TensorMut::A2(&mut self.w));
        f(join(prefix, "b"), TensorMut::A1(&mut self.b));
    }
}

impl VisitParams for RmsNorm {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, TensorMut)) {
        f(join(prefix, "g"), TensorMut::A1(&mut self.g));
    }
}

impl VisitParams for CausalConv1d {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, TensorMut)) {
        f(join(prefix, "w"), TensorMut::A2(&mut self.w));
        f(join(prefix, "b"), TensorMut::A1(&mut self.b));
    }
}

impl VisitParams for crate::ssm::SelectiveSsmLayer {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, TensorMut)) {
        f(join(prefix, "a_log"), TensorMut::A2(&mut self.a_log));
        f(join(prefix, "d_skip"), TensorMut::A1(&mut self.d_skip));
        f(join(prefix, "w_delta"), TensorMut::A2(&mut self.w_delta));
        f(join(prefix, "b_delta"), TensorMut::A1(&mut self.b_delta));
        f(join(prefix, "w_b"), TensorMut::A2(&mut self.w_b));
        f(join(prefix, "w_c"), TensorMut::A2(&mut self.w_c));
    }
}

impl VisitParams for crate::ssm::SelectiveGrads {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, TensorMut)) {
        f(join(prefix, "a_log"), TensorMut::A2(&mut self.a_log));
        f(join(prefix, "d_skip"), TensorMut::A1(&mut self.d_skip));
        f(join(prefix, "w_delta"), TensorMut::A2(&mut self.w_delta));
        f(join(prefix, "b_delta"), TensorMut::A1(&mut self.b_delta));
        f(join(prefix, "w_b"), TensorMut::A2(&mut self.w_b));
        f(join(prefix, "w_c"), TensorMut::A2(&mut self.w_c));
    }
}
