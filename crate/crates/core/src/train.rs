//! Teacher-forced training over synthetic scenes: frozen dual encoder stubs,
//! the hierarchical projector, the block stack, AdamW with linear warmup and
//! cosine decay, and greedy caption generation for evaluation.

use std::path::Path;

use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ahbs::{ahbs_backward, ahbs_forward, AhbsGrads, AhbsParams};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::{
    fuse_dual_features, generate_greedy, lm_backward, lm_forward, loss_cross_entropy, ModelGrads, ModelParams,
};
use crate::nn::VisitParams;
use crate::synthdata::{caption_of, encode_scene, EncoderStub, SyntheticScene, Vocab};

/// Frozen encoder widths: appearance features and frame-difference features.
pub const STATIC_DIM: usize = 48;
pub const DYNAMIC_DIM: usize = 32;
const STATIC_STUB_SEED: u64 = 0x57A7_0001;
const DYNAMIC_STUB_SEED: u64 = 0xD19A_0001;

/// Frame-difference features: the dynamic stub encodes frame_t − frame_{t−1}
/// with a zero frame before t = 0, so motion shows up directly.
pub fn encode_scene_dynamic(
    scene: &SyntheticScene,
    stub: &EncoderStub,
    frames: usize,
    height: usize,
    width: usize,
) -> Result<Array3<f64>> {
    let rendered = crate::synthdata::render_frames(scene, frames, height, width);
    let first = crate::synthdata::patchify_encode(&rendered[0], stub)?;
    let (n_p, d) = first.dim();
    let mut out = Array3::zeros((frames, n_p, d));
    out.index_axis_mut(Axis(0), 0).assign(&first);
    for t in 1..frames {
        let diff = &rendered[t] - &rendered[t - 1];
        out.index_axis_mut(Axis(0), t)
            .assign(&crate::synthdata::patchify_encode(&diff, stub)?);
    }
    Ok(out)
}

/// Everything needed to map a scene to a caption: configuration, vocabulary,
/// the two frozen stubs, and the trainable projector + language model.
#[derive(Clone)]
pub struct Pipeline {
    pub config: Config,
    pub vocab: Vocab,
    pub stub_static: EncoderStub,
    pub stub_dynamic: EncoderStub,
    pub model: ModelParams,
    pub ahbs: AhbsParams,
}

impl Pipeline {
    /// Trainable parameters draw from `seed`; the stubs use fixed named
    /// seeds so the features stay identical across training runs.
    pub fn init(config: &Config, seed: u64) -> Result<Pipeline> {
        config.validate()?;
        let vocab = Vocab::grammar();
        let mut model_cfg = config.model.clone();
        model_cfg.vocab = vocab.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = ModelParams::init(&model_cfg, &mut rng);
        let ahbs = AhbsParams::init(&config.ahbs, STATIC_DIM + DYNAMIC_DIM, &mut rng);
        let mut config = config.clone();
        config.model.vocab = vocab.len();
        let patch = config.data.patch;
        Ok(Pipeline {
            config,
            vocab,
            stub_static: EncoderStub::new(STATIC_STUB_SEED, patch, STATIC_DIM),
            stub_dynamic: EncoderStub::new(DYNAMIC_STUB_SEED, patch, DYNAMIC_DIM),
            model,
            ahbs,
        })
    }

    /// Raw fused features for one scene: (T, N_p, d_s + d_d).
    pub fn fused_features(&self, scene: &SyntheticScene) -> Result<Array3<f64>> {
        let d = &self.config.data;
        let vs = encode_scene(scene, &self.stub_static, d.frames, d.height, d.width)?;
        let vd = encode_scene_dynamic(scene, &self.stub_dynamic, d.frames, d.height, d.width)?;
        fuse_dual_features(&vs, &vd)
    }

    /// Visual prefix rows for the language model: the projector output,
    /// flattened time-major to (T'·N_d, d_model).
    pub fn visual_prefix(&self, scene: &SyntheticScene) -> Result<(Array2<f64>, crate::ahbs::AhbsCache)> {
        let fused = self.fused_features(scene)?;
        let (hv, cache) = ahbs_forward(&fused, &self.config.ahbs, &self.ahbs)?;
        let (t, n, d) = hv.dim();
        let rows = hv
            .into_shape_with_order((t * n, d))
            .map_err(|e| Error::Shape(e.to_string()))?;
        Ok((rows, cache))
    }

    /// Teacher-forced loss and gradients for one (scene, caption) pair.
    /// The text stream is [BOS, w_1..w_n]; position i predicts w_{i+1} with
    /// EOS as the final target. Visual positions carry no loss.
    pub fn sample_grads(&self, scene: &SyntheticScene) -> Result<(f64, ModelGrads, AhbsGrads)> {
        let specials = self.vocab.specials();
        let caption = self.vocab.tokenize(&caption_of(scene))?;
        let mut text_in = Vec::with_capacity(caption.len() + 1);
        text_in.push(specials.bos);
        text_in.extend_from_slice(&caption);

        let (prefix, ahbs_cache) = self.visual_prefix(scene)?;
        let l_v = prefix.nrows();
        let total = l_v + text_in.len();

        let mut targets = vec![0usize; total];
        let mut mask = vec![false; total];
        for i in 0..text_in.len() {
            let next = if i + 1 < text_in.len() { text_in[i + 1] } else { specials.eos };
            targets[l_v + i] = next;
            mask[l_v + i] = true;
        }

        let (logits, lm_cache) = lm_forward(&prefix, &text_in, &self.model)?;
        let (loss, dlogits) = loss_cross_entropy(&logits, &targets, &mask)?;
        if !loss.is_finite() {
            return Err(Error::NumericRange(format!("non-finite loss for scene seed {}", scene.seed)));
        }
        let (d_prefix, model_grads) = lm_backward(&self.model, &lm_cache, &dlogits)?;

        let c = self.config.ahbs.temporal_compress;
        let t_out = self.config.data.frames / c;
        let n_d = l_v / t_out;
        let d_hv = d_prefix
            .into_shape_with_order((t_out, n_d, self.config.ahbs.d_model))
            .map_err(|e| Error::Shape(e.to_string()))?;
        let (_d_fused, ahbs_grads) = ahbs_backward(&d_hv, &self.config.ahbs, &self.ahbs, &ahbs_cache)?;
        Ok((loss, model_grads, ahbs_grads))
    }

    /// Greedy caption for a scene, whitespace-joined words without specials.
    pub fn caption(&self, scene: &SyntheticScene, max_len: usize) -> Result<String> {
        let specials = self.vocab.specials();
        let (prefix, _) = self.visual_prefix(scene)?;
        let ids = generate_greedy(&prefix, &[specials.bos], max_len, &self.model, specials)?;
        let words: Vec<usize> = ids
            .into_iter()
            .take_while(|&id| id != specials.eos)
            .filter(|&id| id != specials.pad && id != specials.bos && id != specials.img)
            .collect();
        self.vocab.detokenize(&words)
    }

    fn flatten_params(&mut self) -> Vec<f64> {
        let mut flat = self.model.flatten();
        flat.extend(self.ahbs.flatten());
        flat
    }

    fn set_params(&mut self, flat: &[f64]) {
        let n_model = self.model.param_count();
        self.model.set_from_flat(&flat[..n_model]);
        self.ahbs.set_from_flat(&flat[n_model..]);
    }

    pub fn param_count(&mut self) -> usize {
        self.model.param_count() + self.ahbs.param_count()
    }
}

/// Linear warmup to the base rate, then cosine decay to zero.
pub fn lr_schedule(step: usize, total_steps: usize, base_lr: f64, warmup_ratio: f64) -> f64 {
    let warmup = ((total_steps as f64 * warmup_ratio).ceil() as usize).min(total_steps);
    if step < warmup {
        return base_lr * (step + 1) as f64 / warmup as f64;
    }
    if total_steps <= warmup {
        return base_lr;
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
}

/// AdamW over a flat parameter vector (decoupled weight decay).
pub struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(n: usize, weight_decay: f64) -> AdamW {
        AdamW {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer holds {} slots, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            if !g.is_finite() {
                return Err(Error::NumericRange(format!("non-finite gradient at slot {i}")));
            }
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * params[i]);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossPoint {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub curve: Vec<LossPoint>,
    pub steps: usize,
}

/// Writes the loss curve as `step,lr,loss` CSV.
pub fn write_curve(path: &Path, curve: &[LossPoint]) -> Result<()> {
    let mut text = String::from("step,lr,loss\n");
    for p in curve {
        text.push_str(&format!("{},{},{}\n", p.step, p.lr, p.loss));
    }
    std::fs::write(path, text).map_err(|e| Error::io(&path.display().to_string(), e))
}

/// Mini-batch training: each step accumulates per-sample gradients in a
/// fixed order, averages them, and applies one AdamW update under the
/// warmup + cosine schedule. Scene order reshuffles every epoch from the
/// training seed, so runs are reproducible.
pub fn train(pipe: &mut Pipeline, scenes: &[SyntheticScene]) -> Result<TrainReport> {
    if scenes.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let tc = pipe.config.train.clone();
    let steps_per_epoch = scenes.len().div_ceil(tc.batch);
    let total_steps = steps_per_epoch * tc.epochs;

    let mut flat = pipe.flatten_params();
    let mut opt = AdamW::new(flat.len(), tc.weight_decay);
    let mut curve = Vec::with_capacity(total_steps);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut step = 0usize;

    for epoch in 0..tc.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        for chunk in order.chunks(tc.batch) {
            let mut model_grads = pipe.model.zero_grads();
            let mut ahbs_grads = pipe.ahbs.zero_grads();
            let mut batch_loss = 0.0;
            for &idx in chunk {
                let (loss, mg, ag) = pipe.sample_grads(&scenes[idx])?;
                batch_loss += loss;
                model_grads.add_assign(&mg);
                ahbs_grads.add_assign(&ag);
            }
            let scale = 1.0 / chunk.len() as f64;
            let mut grad_flat = model_grads.flatten();
            grad_flat.extend(ahbs_grads.flatten());
            for g in grad_flat.iter_mut() {
                *g *= scale;
            }
            let lr = lr_schedule(step, total_steps, tc.lr, tc.warmup_ratio);
            opt.step(&mut flat, &grad_flat, lr)?;
            pipe.set_params(&flat);
            curve.push(LossPoint {
                step,
                lr,
                loss: batch_loss * scale,
            });
            step += 1;
        }
    }
    Ok(TrainReport { curve, steps: step })
}

/// Greedy captions paired with the ground-truth caption for scoring.
pub fn eval_records(pipe: &Pipeline, scenes: &[SyntheticScene], max_len: usize) -> Result<Vec<crate::metrics::EvalRecord>> {
    scenes
        .iter()
        .map(|s| {
            let cand = pipe.caption(s, max_len)?;
            Ok(crate::metrics::EvalRecord::new(&cand, &[&caption_of(s)]))
        })
        .collect()
}

/// Keeps only samples whose reference has an event clause and truncates both
/// sides to the clause ("then ..."), so the score isolates event wording.
pub fn event_clause_records(records: &[crate::metrics::EvalRecord]) -> Vec<crate::metrics::EvalRecord> {
    let clause = |words: &[String]| -> Option<Vec<String>> {
        words.iter().position(|w| w == "then").map(|i| words[i..].to_vec())
    };
    records
        .iter()
        .filter_map(|r| {
            let ref_clause = clause(&r.references[0])?;
            Some(crate::metrics::EvalRecord {
                candidate: clause(&r.candidate).unwrap_or_default(),
                references: vec![ref_clause],
            })
        })
        .collect()
}

/// Projector ablations for the controlled comparison grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationVariant {
    Full,
    NoBackward,
    SinglePathway,
    NoScan,
}

pub const ABLATION_GRID: [AblationVariant; 4] = [
    AblationVariant::Full,
    AblationVariant::NoBackward,
    AblationVariant::SinglePathway,
    AblationVariant::NoScan,
];

impl AblationVariant {
    pub fn name(&self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::NoBackward => "no-backward",
            AblationVariant::SinglePathway => "m1",
            AblationVariant::NoScan => "no-scan",
        }
    }

    pub fn apply(&self, cfg: &mut Config) {
        match self {
            AblationVariant::Full => {}
            AblationVariant::NoBackward => cfg.ahbs.backward_scan = false,
            AblationVariant::SinglePathway => cfg.ahbs.pathways = 1,
            AblationVariant::NoScan => cfg.ahbs.scan_enabled = false,
        }
    }
}
