//! Hierarchical bidirectional scan projector: spatial token pooling, linear
//! projection, M parallel temporal-resolution pathways each scanned forward
//! and backward, aggregation back to full temporal resolution, and optional
//! temporal token compression.

use ndarray::{Array2, Array3, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{join, Linear, TensorMut, VisitParams};
use crate::ssm::{
    selective_scan, selective_scan_backward, SelectiveGrads, SelectiveScanCache, SelectiveSsmLayer,
};

/// T × N × d feature stack carrying visual tokens through the pipeline.
pub type FeatureTensor = Array3<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggregateMode {
    Add,
    Concat,
}

impl AggregateMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "add" => Ok(AggregateMode::Add),
            "concat" => Ok(AggregateMode::Concat),
            other => Err(Error::Config(format!("unknown aggregate mode {other:?} (expected add or concat)"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AggregateMode::Add => "add",
            AggregateMode::Concat => "concat",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AhbsConfig {
    /// Number of temporal-resolution pathways (M).
    pub pathways: usize,
    /// Temporal stride s; pathway m pools over s^(m-1) frames.
    pub stride: usize,
    /// Spatial pooling window; tokens per frame shrink N_p -> N_p / window².
    pub spatial_pool: usize,
    pub aggregate: AggregateMode,
    /// Frames-per-output temporal compression factor c (1 = off).
    pub temporal_compress: usize,
    pub d_model: usize,
    /// Projector before the scans (the diagram order) or after aggregation.
    pub project_before_scan: bool,
    /// Ablation switch: drop the backward branch of every pathway.
    pub backward_scan: bool,
    /// Ablation switch: false replaces the whole scan stage with the bare
    /// linear projector.
    pub scan_enabled: bool,
    /// State dimension of the pathway scan layers.
    pub state_dim: usize,
}

impl Default for AhbsConfig {
    fn default() -> Self {
        AhbsConfig {
            pathways: 3,
            stride: 2,
            spatial_pool: 2,
            aggregate: AggregateMode::Add,
            temporal_compress: 1,
            d_model: 64,
            project_before_scan: true,
            backward_scan: true,
            scan_enabled: true,
            state_dim: 16,
        }
    }
}

impl AhbsConfig {
    pub fn validate(&self, frames: usize) -> Result<()> {
        if self.pathways == 0 {
            return Err(Error::Config("ahbs.pathways must be >= 1".into()));
        }
        if self.stride < 2 {
            return Err(Error::Config("ahbs.stride must be >= 2".into()));
        }
        if self.temporal_compress == 0 {
            return Err(Error::Config("ahbs.temporal_compress must be >= 1".into()));
        }
        let needed = self.stride.pow((self.pathways - 1) as u32);
        if frames < needed {
            return Err(Error::Config(format!(
                "T = {frames} leaves pathway {} empty (need T >= stride^(M-1) = {needed})",
                self.pathways
            )));
        }
        Ok(())
    }

    /// Channel width the pathway scans operate at.
    pub fn scan_width(&self, d_v: usize) -> usize {
        if self.project_before_scan {
            self.d_model
        } else {
            d_v
        }
    }
}

#[derive(Debug, Clone)]
pub struct PathwayParams {
    pub fwd: SelectiveSsmLayer,
    pub bwd: SelectiveSsmLayer,
}

#[derive(Debug, Clone)]
pub struct AhbsParams {
    /// d_v -> d_model affine projector.
    pub projector: Linear,
    pub pathways: Vec<PathwayParams>,
    /// Concat-mode output projection (M·w -> w).
    pub concat_proj: Option<Linear>,
}

impl AhbsParams {
    pub fn init(config: &AhbsConfig, d_v: usize, rng: &mut impl Rng) -> Self {
        let w = config.scan_width(d_v);
        let pathways = (0..config.pathways)
            .map(|_| PathwayParams {
                fwd: SelectiveSsmLayer::init(w, config.state_dim, rng),
                bwd: SelectiveSsmLayer::init(w, config.state_dim, rng),
            })
            .collect();
        let concat_proj = match config.aggregate {
            AggregateMode::Concat => Some(Linear::init(w, config.pathways * w, rng)),
            AggregateMode::Add => None,
        };
        AhbsParams {
            projector: Linear::init(config.d_model, d_v, rng),
            pathways,
            concat_proj,
        }
    }

    pub fn zero_grads(&self) -> AhbsGrads {
        AhbsGrads {
            projector: self.projector.zeros_like(),
            pathways: self
                .pathways
                .iter()
                .map(|p| PathwayGrads {
                    fwd: p.fwd.zero_grads(),
                    bwd: p.bwd.zero_grads(),
                })
                .collect(),
            concat_proj: self.concat_proj.as_ref().map(|l| l.zeros_like()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PathwayGrads {
    pub fwd: SelectiveGrads,
    pub bwd: SelectiveGrads,
}

/// Gradient holder mirroring [`AhbsParams`] tensor for tensor.
#[derive(Debug, Clone)]
pub struct AhbsGrads {
    pub projector: Linear,
    pub pathways: Vec<PathwayGrads>,
    pub concat_proj: Option<Linear>,
}

impl AhbsGrads {
    pub fn add_assign(&mut self, other: &AhbsGrads) {
        self.projector.w += &other.projector.w;
        self.projector.b += &other.projector.b;
        for (a, b) in self.pathways.iter_mut().zip(other.pathways.iter()) {
            a.fwd.add_assign(&b.fwd);
            a.bwd.add_assign(&b.bwd);
        }
        if let (Some(a), Some(b)) = (self.concat_proj.as_mut(), other.concat_proj.as_ref()) {
            a.w += &b.w;
            a.b += &b.b;
        }
    }
}

macro_rules! impl_ahbs_visit {
    ($ty:ty) => {
        impl VisitParams for $ty {
            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, TensorMut)) {
                self.projector.visit_mut(&join(prefix, "projector"), f);
                for (m, p) in self.pathways.iter_mut().enumerate() {
                    p.fwd.visit_mut(&join(prefix, &format!("pathway{m}.fwd")), f);
                    p.bwd.visit_mut(&join(prefix, &format!("pathway{m}.bwd")), f);
                }
                if let Some(cp) = self.concat_proj.as_mut() {
                    cp.visit_mut(&join(prefix, "concat_proj"), f);
                }
            }
        }
    };
}

impl_ahbs_visit!(AhbsParams);
impl_ahbs_visit!(AhbsGrads);

fn flatten_tokens(v: &FeatureTensor) -> Array2<f64> {
    let (t, n, d) = v.dim();
    v.to_shape((t * n, d)).unwrap().to_owned()
}

fn unflatten_tokens(m: &Array2<f64>, t: usize, n: usize) -> FeatureTensor {
    let d = m.ncols();
    m.to_shape((t, n, d)).unwrap().to_owned()
}

/// Temporal (frame-wise) reversal; token order within a frame is kept.
pub fn reverse_time(v: &FeatureTensor) -> FeatureTensor {
    let mut out = v.clone();
    out.invert_axis(Axis(0));
    out
}

/// Mean over contiguous groups of window² tokens per frame; the remainder
/// that does not fill a group is dropped.
/// Means over window×window blocks of the √N_p × √N_p patch grid (tokens in
/// row-major grid order), preserving both spatial axes at coarse resolution.
/// Window 1 is the identity for any token count.
pub fn spatial_pool(v: &FeatureTensor, window: usize) -> Result<FeatureTensor> {
    let (t, n_p, d) = v.dim();
    if window == 0 {
        return Err(Error::Config("spatial pool window must be >= 1".into()));
    }
    if window == 1 {
        return Ok(v.clone());
    }
    let side = (n_p as f64).sqrt().round() as usize;
    if side * side != n_p {
        return Err(Error::Config(format!(
            "spatial pooling needs a square patch grid, got {n_p} tokens"
        )));
    }
    if side % window != 0 {
        return Err(Error::Config(format!(
            "pool window {window} does not divide patch grid side {side}"
        )));
    }
    let out_side = side / window;
    let group = (window * window) as f64;
    let mut out = Array3::zeros((t, out_side * out_side, d));
    for ti in 0..t {
        for gy in 0..out_side {
            for gx in 0..out_side {
                for c in 0..d {
                    let mut acc = 0.0;
                    for wy in 0..window {
                        for wx in 0..window {
                            acc += v[[ti, (gy * window + wy) * side + gx * window + wx, c]];
                        }
                    }
                    out[[ti, gy * out_side + gx, c]] = acc / group;
                }
            }
        }
    }
    Ok(out)
}

pub fn spatial_pool_backward(dy: &FeatureTensor, window: usize, n_p: usize) -> FeatureTensor {
    let (t, _n_d, d) = dy.dim();
    if window == 1 {
        return dy.clone();
    }
    let side = (n_p as f64).sqrt().round() as usize;
    let out_side = side / window;
    let group = (window * window) as f64;
    let mut dx = Array3::zeros((t, n_p, d));
    for ti in 0..t {
        for gy in 0..out_side {
            for gx in 0..out_side {
                for c in 0..d {
                    let share = dy[[ti, gy * out_side + gx, c]] / group;
                    for wy in 0..window {
                        for wx in 0..window {
                            dx[[ti, (gy * window + wy) * side + gx * window + wx, c]] += share;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Group size of pathway m (1-based): stride^(m-1).
fn pathway_group(stride: usize, m: usize) -> usize {
    stride.pow((m - 1) as u32)
}

/// Mean over non-overlapping groups of `group` frames; trailing remainder
/// frames are dropped, giving exactly ⌊T/group⌋ output frames.
pub fn pool_frames(v: &FeatureTensor, group: usize) -> Result<FeatureTensor> {
    let (t, n, d) = v.dim();
    let t_out = t / group;
    if t_out == 0 {
        return Err(Error::Config(format!(
            "temporal pooling over {group} frames empties a {t}-frame input"
        )));
    }
    if group == 1 {
        return Ok(v.clone());
    }
    let mut out = Array3::zeros((t_out, n, d));
    for j in 0..t_out {
        for g in 0..group {
            let frame = v.index_axis(Axis(0), j * group + g);
            let mut dst = out.index_axis_mut(Axis(0), j);
            dst += &frame;
        }
        out.index_axis_mut(Axis(0), j).mapv_inplace(|x| x / group as f64);
    }
    Ok(out)
}

pub fn pool_frames_backward(dy: &FeatureTensor, group: usize, t_in: usize) -> FeatureTensor {
    let (t_out, n, d) = dy.dim();
    let mut dx = Array3::zeros((t_in, n, d));
    for j in 0..t_out {
        for g in 0..group {
            let mut dst = dx.index_axis_mut(Axis(0), j * group + g);
            dst += &(&dy.index_axis(Axis(0), j) / group as f64);
        }
    }
    dx
}

/// Temporal pooling of pathway m: T_m = ⌊T / stride^(m-1)⌋ frame means.
pub fn temporal_pool(v: &FeatureTensor, m: usize, stride: usize) -> Result<FeatureTensor> {
    pool_frames(v, pathway_group(stride, m))
}

/// Nearest-neighbor upsampling back to `t_target` frames: each pooled frame
/// repeats stride^(m-1) times and the last frame pads the floor remainder.
pub fn temporal_upsample(ym: &FeatureTensor, stride: usize, m: usize, t_target: usize) -> Result<FeatureTensor> {
    let group = pathway_group(stride, m);
    let (t_m, n, d) = ym.dim();
    if t_m != t_target / group {
        return Err(Error::Shape(format!(
            "pathway length {t_m} inconsistent with target {t_target} / group {group}"
        )));
    }
    let mut out = Array3::zeros((t_target, n, d));
    for t in 0..t_target {
        let src = (t / group).min(t_m - 1);
        out.index_axis_mut(Axis(0), t).assign(&ym.index_axis(Axis(0), src));
    }
    Ok(out)
}

pub fn temporal_upsample_backward(dy: &FeatureTensor, stride: usize, m: usize, t_m: usize) -> FeatureTensor {
    let group = pathway_group(stride, m);
    let (t_target, n, d) = dy.dim();
    let mut dx = Array3::zeros((t_m, n, d));
    for t in 0..t_target {
        let src = (t / group).min(t_m - 1);
        let mut dst = dx.index_axis_mut(Axis(0), src);
        dst += &dy.index_axis(Axis(0), t);
    }
    dx
}

pub struct BidirectionalCache {
    fwd: SelectiveScanCache,
    bwd: Option<SelectiveScanCache>,
    t_m: usize,
    n: usize,
}

/// Forward scan of the frame-major token sequence plus a time-reversed
/// backward scan whose output is re-reversed before the sum, so position t
/// of both branches refers to the same frame.
pub fn bidirectional_scan(
    vm: &FeatureTensor,
    fwd: &SelectiveSsmLayer,
    bwd: &SelectiveSsmLayer,
    use_backward: bool,
) -> Result<(FeatureTensor, BidirectionalCache)> {
    let (t_m, n, d) = vm.dim();
    if fwd.channels() != d || bwd.channels() != d {
        return Err(Error::Shape(format!(
            "scan layers have {} / {} channels, input has {d}",
            fwd.channels(),
            bwd.channels()
        )));
    }
    let seq = flatten_tokens(vm);
    let (y_f, cache_f) = selective_scan(fwd, &seq)?;
    let mut out = unflatten_tokens(&y_f, t_m, n);
    let cache_b = if use_backward {
        let rev = flatten_tokens(&reverse_time(vm));
        let (y_b, cache_b) = selective_scan(bwd, &rev)?;
        out += &reverse_time(&unflatten_tokens(&y_b, t_m, n));
        Some(cache_b)
    } else {
        None
    };
    Ok((
        out,
        BidirectionalCache {
            fwd: cache_f,
            bwd: cache_b,
            t_m,
            n,
        },
    ))
}

pub fn bidirectional_scan_backward(
    cache: &BidirectionalCache,
    fwd: &SelectiveSsmLayer,
    bwd: &SelectiveSsmLayer,
    dy: &FeatureTensor,
) -> Result<(FeatureTensor, SelectiveGrads, SelectiveGrads)> {
    let dy_flat = flatten_tokens(dy);
    let (du_f, g_f) = selective_scan_backward(fwd, &cache.fwd, &dy_flat)?;
    let mut dv = unflatten_tokens(&du_f, cache.t_m, cache.n);
    let g_b = match cache.bwd.as_ref() {
        Some(cb) => {
            let dy_rev = flatten_tokens(&reverse_time(dy));
            let (du_b, g_b) = selective_scan_backward(bwd, cb, &dy_rev)?;
            dv += &reverse_time(&unflatten_tokens(&du_b, cache.t_m, cache.n));
            g_b
        }
        None => bwd.zero_grads(),
    };
    Ok((dv, g_f, g_b))
}

/// Combines pathway outputs of identical shape: elementwise sum, or channel
/// concatenation followed by the concat projection back to width d.
pub fn aggregate(
    outputs: &[FeatureTensor],
    mode: AggregateMode,
    concat_proj: Option<&Linear>,
) -> Result<FeatureTensor> {
    let first = outputs.first().ok_or_else(|| Error::Config("aggregate needs at least one pathway".into()))?;
    if outputs.iter().any(|o| o.dim() != first.dim()) {
        return Err(Error::Shape("pathway outputs must share a shape before aggregation".into()));
    }
    match mode {
        AggregateMode::Add => {
            let mut acc = first.clone();
            for o in &outputs[1..] {
                acc += o;
            }
            Ok(acc)
        }
        AggregateMode::Concat => {
            let (t, n, d) = first.dim();
            let proj = concat_proj.ok_or_else(|| Error::Config("concat aggregation needs a concat projection".into()))?;
            let mut wide = Array2::zeros((t * n, outputs.len() * d));
            for (mi, o) in outputs.iter().enumerate() {
                let flat = flatten_tokens(o);
                wide.slice_mut(ndarray::s![.., mi * d..(mi + 1) * d]).assign(&flat);
            }
            let y = proj.forward(&wide)?;
            Ok(unflatten_tokens(&y, t, n))
        }
    }
}

impl AhbsCache {
    /// Temporal length of each pathway after pooling (T_m per m).
    pub fn pathway_lengths(&self) -> Vec<usize> {
        self.pathway_inputs.iter().map(|p| p.dim().0).collect()
    }
}

pub struct AhbsCache {
    n_p: usize,
    pooled: FeatureTensor,
    /// Flattened projector input and whether the projector ran pre-scan.
    proj_in: Array2<f64>,
    pathway_inputs: Vec<FeatureTensor>,
    pathway_caches: Vec<BidirectionalCache>,
    pathway_outputs: Vec<FeatureTensor>,
    concat_in: Option<Array2<f64>>,
    agg_out_dim: (usize, usize, usize),
    compress_in_t: usize,
}

/// Full projector pipeline. Returns H_v of shape ⌊T/c⌋ × N_d × d_model.
pub fn ahbs_forward(
    v: &FeatureTensor,
    config: &AhbsConfig,
    params: &AhbsParams,
) -> Result<(FeatureTensor, AhbsCache)> {
    let (t, n_p, _d_v) = v.dim();
    config.validate(t)?;

    let pooled = spatial_pool(v, config.spatial_pool)?;
    let (_, n_d, _) = pooled.dim();

    let (base, proj_in) = if config.project_before_scan {
        let flat = flatten_tokens(&pooled);
        let y = params.projector.forward(&flat)?;
        (unflatten_tokens(&y, t, n_d), flat)
    } else {
        (pooled.clone(), Array2::zeros((0, 0)))
    };

    let mut pathway_inputs = Vec::new();
    let mut pathway_caches = Vec::new();
    let mut pathway_outputs = Vec::new();
    let mut concat_in = None;

    let agg = if config.scan_enabled {
        let mut ups = Vec::with_capacity(config.pathways);
        for (m, p) in params.pathways.iter().enumerate() {
            let vm = temporal_pool(&base, m + 1, config.stride)?;
            let (ym, cache) = bidirectional_scan(&vm, &p.fwd, &p.bwd, config.backward_scan)?;
            let up = temporal_upsample(&ym, config.stride, m + 1, t)?;
            pathway_inputs.push(vm);
            pathway_caches.push(cache);
            pathway_outputs.push(ym);
            ups.push(up);
        }
        if config.aggregate == AggregateMode::Concat {
            let (tt, nn, dd) = ups[0].dim();
            let mut wide = Array2::zeros((tt * nn, ups.len() * dd));
            for (mi, o) in ups.iter().enumerate() {
                wide.slice_mut(ndarray::s![.., mi * dd..(mi + 1) * dd]).assign(&flatten_tokens(o));
            }
            concat_in = Some(wide);
        }
        aggregate(&ups, config.aggregate, params.concat_proj.as_ref())?
    } else {
        base.clone()
    };

    // The alternate ordering keeps d_v through the scan and projects here.
    let (projected, proj_in) = if config.project_before_scan {
        (agg, proj_in)
    } else {
        let flat = flatten_tokens(&agg);
        let y = params.projector.forward(&flat)?;
        let (tt, nn, _) = agg.dim();
        (unflatten_tokens(&y, tt, nn), flat)
    };

    let agg_out_dim = projected.dim();
    let out = pool_frames(&projected, config.temporal_compress)?;

    Ok((
        out,
        AhbsCache {
            n_p,
            pooled,
            proj_in,
            pathway_inputs,
            pathway_caches,
            pathway_outputs,
            concat_in,
            agg_out_dim,
            compress_in_t: agg_out_dim.0,
        },
    ))
}

/// Reverse sweep through [`ahbs_forward`]. Returns the gradient w.r.t. the
/// raw input tensor and all projector parameters.
pub fn ahbs_backward(
    dy: &FeatureTensor,
    config: &AhbsConfig,
    params: &AhbsParams,
    cache: &AhbsCache,
) -> Result<(FeatureTensor, AhbsGrads)> {
    let mut grads = params.zero_grads();
    let (t, n_d, _) = cache.agg_out_dim;

    let mut d_proj_out = pool_frames_backward(dy, config.temporal_compress, cache.compress_in_t);

    if !config.project_before_scan {
        let dflat = flatten_tokens(&d_proj_out);
        let (dx, dp) = params.projector.backward(&cache.proj_in, &dflat);
        grads.projector = dp;
        d_proj_out = unflatten_tokens(&dx, t, n_d);
    }

    let d_base = if config.scan_enabled {
        let d_ups: Vec<FeatureTensor> = match config.aggregate {
            AggregateMode::Add => (0..config.pathways).map(|_| d_proj_out.clone()).collect(),
            AggregateMode::Concat => {
                let proj = params.concat_proj.as_ref().unwrap();
                let wide = cache.concat_in.as_ref().unwrap();
                let dflat = flatten_tokens(&d_proj_out);
                let (dwide, dp) = proj.backward(wide, &dflat);
                grads.concat_proj = Some(dp);
                let dd = wide.ncols() / config.pathways;
                (0..config.pathways)
                    .map(|mi| {
                        let slice = dwide.slice(ndarray::s![.., mi * dd..(mi + 1) * dd]).to_owned();
                        unflatten_tokens(&slice, t, n_d)
                    })
                    .collect()
            }
        };

        let mut d_base: Option<FeatureTensor> = None;
        for m in (0..config.pathways).rev() {
            let t_m = cache.pathway_outputs[m].dim().0;
            let d_ym = temporal_upsample_backward(&d_ups[m], config.stride, m + 1, t_m);
            let (d_vm, g_f, g_b) = bidirectional_scan_backward(
                &cache.pathway_caches[m],
                &params.pathways[m].fwd,
                &params.pathways[m].bwd,
                &d_ym,
            )?;
            grads.pathways[m].fwd = g_f;
            grads.pathways[m].bwd = g_b;
            let contrib = pool_frames_backward(&d_vm, pathway_group(config.stride, m + 1), t);
            match d_base.as_mut() {
                Some(acc) => *acc += &contrib,
                None => d_base = Some(contrib),
            }
        }
        d_base.unwrap()
    } else {
        d_proj_out
    };

    let d_pooled = if config.project_before_scan {
        let dflat = flatten_tokens(&d_base);
        let (dx, dp) = params.projector.backward(&cache.proj_in, &dflat);
        grads.projector = dp;
        unflatten_tokens(&dx, t, cache.pooled.dim().1)
    } else {
        d_base
    };

    let dv = spatial_pool_backward(&d_pooled, config.spatial_pool, cache.n_p);
    Ok((dv, grads))
}
