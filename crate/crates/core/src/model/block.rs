//! Gated selective-scan block: pre-norm, input projection into a stream and
//! a gate, depthwise causal convolution, SiLU, selective scan, SiLU-gated
//! multiply, output projection, residual add.

use ndarray::{s, Array1, Array2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{join, silu, silu_backward, CausalConv1d, Linear, RmsNorm, RmsNormCache, TensorMut, VisitParams};
use crate::precision::quantize_slice;
use crate::ssm::{
    selective_scan, selective_scan_backward, selective_scan_step, SelectiveGrads, SelectiveScanCache,
    SelectiveSsmLayer,
};

#[derive(Debug, Clone)]
pub struct MambaBlockParams {
    pub norm: RmsNorm,
    /// d -> 2·E·d; the first E·d columns are the stream, the rest the gate.
    pub in_proj: Linear,
    pub conv: CausalConv1d,
    pub ssm: SelectiveSsmLayer,
    /// E·d -> d.
    pub out_proj: Linear,
}

impl MambaBlockParams {
    pub fn init(d: usize, expand: usize, conv_width: usize, state_dim: usize, rng: &mut impl Rng) -> Self {
        let inner = expand * d;
        MambaBlockParams {
            norm: RmsNorm::new(d),
            in_proj: Linear::init(2 * inner, d, rng),
            conv: CausalConv1d::init(inner, conv_width, rng),
            ssm: SelectiveSsmLayer::init(inner, state_dim, rng),
            out_proj: Linear::init(d, inner, rng),
        }
    }

    pub fn width(&self) -> usize {
        self.norm.g.len()
    }

    pub fn inner_width(&self) -> usize {
        self.out_proj.in_dim()
    }

    pub fn zero_grads(&self) -> MambaBlockGrads {
        MambaBlockGrads {
            norm_g: Array1::zeros(self.norm.g.len()),
            in_proj: self.in_proj.zeros_like(),
            conv: CausalConv1d {
                w: Array2::zeros(self.conv.w.dim()),
                b: Array1::zeros(self.conv.b.len()),
            },
            ssm: self.ssm.zero_grads(),
            out_proj: self.out_proj.zeros_like(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MambaBlockGrads {
    pub norm_g: Array1<f64>,
    pub in_proj: Linear,
    pub conv: CausalConv1d,
    pub ssm: SelectiveGrads,
    pub out_proj: Linear,
}

impl MambaBlockGrads {
    pub fn add_assign(&mut self, other: &MambaBlockGrads) {
        self.norm_g += &other.norm_g;
        self.in_proj.w += &other.in_proj.w;
        self.in_proj.b += &other.in_proj.b;
        self.conv.w += &other.conv.w;
        self.conv.b += &other.conv.b;
        self.ssm.add_assign(&other.ssm);
        self.out_proj.w += &other.out_proj.w;
        self.out_proj.b += &other.out_proj.b;
    }
}

impl VisitParams for MambaBlockParams {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, TensorMut)) {
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.in_proj.visit_mut(&join(prefix, "in_proj"), f);
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.ssm.visit_mut(&join(prefix, "ssm"), f);
        self.out_proj.visit_mut(&join(prefix, "out_proj"), f);
    }
}

impl VisitParams for MambaBlockGrads {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, TensorMut)) {
        f(join(prefix, "norm.g"), TensorMut::A1(&mut self.norm_g));
        self.in_proj.visit_mut(&join(prefix, "in_proj"), f);
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.ssm.visit_mut(&join(prefix, "ssm"), f);
        self.out_proj.visit_mut(&join(prefix, "out_proj"), f);
    }
}

pub struct MambaBlockCache {
    x: Array2<f64>,
    norm_cache: RmsNormCache,
    xn: Array2<f64>,
    stream: Array2<f64>,
    gate: Array2<f64>,
    conv_out: Array2<f64>,
    scan_cache: SelectiveScanCache,
    scan_out: Array2<f64>,
    gated: Array2<f64>,
}

/// y = x + OutProj( SSM(SiLU(Conv(stream))) ⊙ SiLU(gate) ),
/// (stream, gate) = InProj(RMSNorm(x)).
pub fn mamba_block(x: &Array2<f64>, params: &MambaBlockParams) -> Result<(Array2<f64>, MambaBlockCache)> {
    let (_rows, d) = x.dim();
    if d != params.width() {
        return Err(Error::Shape(format!("block width {} != input width {d}", params.width())));
    }
    let inner = params.inner_width();
    let (xn, norm_cache) = params.norm.forward(x)?;
    let proj = params.in_proj.forward(&xn)?;
    let stream = proj.slice(s![.., ..inner]).to_owned();
    let gate = proj.slice(s![.., inner..]).to_owned();
    let conv_out = params.conv.forward(&stream)?;
    let scan_in = silu(&conv_out);
    let (scan_out, scan_cache) = selective_scan(&params.ssm, &scan_in)?;
    let gated = &scan_out * &silu(&gate);
    let mut y = x + &params.out_proj.forward(&gated)?;
    if let Some((k, _)) = y.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NumericRange(format!(
            "non-finite block output at position {} (row {}, col {})",
            k,
            k / d,
            k % d
        )));
    }
    if let Some(slice) = y.as_slice_mut() {
        quantize_slice(slice);
    }
    Ok((
        y,
        MambaBlockCache {
            x: x.clone(),
            norm_cache,
            xn,
            stream,
            gate,
            conv_out,
            scan_cache,
            scan_out,
            gated,
        },
    ))
}

pub fn mamba_block_backward(
    params: &MambaBlockParams,
    cache: &MambaBlockCache,
    dy: &Array2<f64>,
) -> Result<(Array2<f64>, MambaBlockGrads)> {
    let (rows, _d) = cache.x.dim();
    let inner = params.inner_width();
    let mut grads = params.zero_grads();

    // y = x + out_proj(gated)
    let (dgated, d_out) = params.out_proj.backward(&cache.gated, dy);
    grads.out_proj = d_out;

    // gated = scan_out ⊙ silu(gate)
    let silu_gate = silu(&cache.gate);
    let dscan_out = &dgated * &silu_gate;
    let dsilu_gate = &dgated * &cache.scan_out;
    let dgate = silu_backward(&cache.gate, &dsilu_gate);

    let (dscan_in, gssm) = selective_scan_backward(&params.ssm, &cache.scan_cache, &dscan_out)?;
    grads.ssm = gssm;
    let dconv_out = silu_backward(&cache.conv_out, &dscan_in);
    let (dstream, dconv) = params.conv.backward(&cache.stream, &dconv_out);
    grads.conv = dconv;

    let mut dproj = Array2::zeros((rows, 2 * inner));
    dproj.slice_mut(s![.., ..inner]).assign(&dstream);
    dproj.slice_mut(s![.., inner..]).assign(&dgate);
    let (dxn, d_in) = params.in_proj.backward(&cache.xn, &dproj);
    grads.in_proj = d_in;

    let (dx_norm, dg) = params.norm.backward(&cache.norm_cache, &dxn);
    grads.norm_g = dg;

    Ok((dy + &dx_norm, grads))
}

/// Carried per-block decode state: a conv window of width k and the scan
/// state, both constant-size in the number of generated tokens.
#[derive(Debug, Clone)]
pub struct BlockState {
    /// (k_conv, inner) most recent stream inputs, oldest first.
    pub conv_window: Array2<f64>,
    /// (inner, q) scan state.
    pub h: Array2<f64>,
}

impl BlockState {
    pub fn new(params: &MambaBlockParams) -> Self {
        BlockState {
            conv_window: Array2::zeros((params.conv.width(), params.inner_width())),
            h: Array2::zeros((params.inner_width(), params.ssm.state_dim())),
        }
    }

    /// Number of carried f64 elements: E·d·k_conv + E·d·Q.
    pub fn element_count(&self) -> usize {
        self.conv_window.len() + self.h.len()
    }
}

/// One-token recurrent step of the block, consuming O(1) state.
pub fn mamba_block_step(x: &Array1<f64>, params: &MambaBlockParams, state: &mut BlockState) -> Result<Array1<f64>> {
    let inner = params.inner_width();
    let xn = params.norm.forward_vec(x);
    let proj = params.in_proj.forward_vec(&xn);
    let stream = proj.slice(s![..inner]).to_owned();
    let gate = proj.slice(s![inner..]).to_owned();

    // Shift the conv window and append the new stream vector.
    let k = params.conv.width();
    for j in 0..k - 1 {
        let next = state.conv_window.row(j + 1).to_owned();
        state.conv_window.row_mut(j).assign(&next);
    }
    state.conv_window.row_mut(k - 1).assign(&stream);

    let mut conv_out = Array1::zeros(inner);
    for c in 0..inner {
        let mut acc = params.conv.b[c];
        for j in 0..k {
            // tap j multiplies x_{t-j}; the newest row is k-1
            acc += params.conv.w[[c, j]] * state.conv_window[[k - 1 - j, c]];
        }
        conv_out[c] = acc;
    }
    let scan_in = conv_out.mapv(|v| v * (1.0 / (1.0 + (-v).exp())));
    let scan_out = selective_scan_step(&params.ssm, scan_in.view(), &mut state.h)?;
    let gated = &scan_out * &gate.mapv(|v| v * (1.0 / (1.0 + (-v).exp())));
    let mut y = x + &params.out_proj.w.dot(&gated) + &params.out_proj.b;
    if let Some(slice) = y.as_slice_mut() {
        quantize_slice(slice);
    }
    Ok(y)
}
