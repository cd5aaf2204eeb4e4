//! Throughput and memory instrumentation comparing the recurrent/selective
//! stack against the causal-attention reference at matched width.

use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionLayer, KvCache};
use crate::config::BenchConfig;
use crate::error::{Error, Result};
use crate::model::{mamba_block, mamba_block_step, BlockState, MambaBlockParams};

/// Least-squares slope of ln(y) against ln(x).
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Input("slope needs at least two matched points".into()));
    }
    if xs.iter().chain(ys).any(|&v| v <= 0.0) {
        return Err(Error::NumericRange("log-log slope needs positive values".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    Ok(cov / var)
}

fn mean_std(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone)]
pub struct ThroughputRow {
    pub length: usize,
    pub ssm_mean_s: f64,
    pub ssm_std_s: f64,
    pub attn_mean_s: f64,
    pub attn_std_s: f64,
}

#[derive(Debug, Clone)]
pub struct ThroughputReport {
    pub rows: Vec<ThroughputRow>,
    pub ssm_slope: f64,
    pub attn_slope: f64,
    /// Wall seconds for `decode_tokens` recurrent steps after `decode_context`.
    pub ssm_decode_s: f64,
    pub attn_decode_s: f64,
    pub decode_context: usize,
    pub decode_tokens: usize,
}

pub const DECODE_CONTEXT: usize = 4096;
pub const DECODE_TOKENS: usize = 512;

fn random_input(l: usize, d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((l, d), |_| rng.gen_range(-1.0..1.0))
}

/// Times one recurrent block and one attention layer over each sequence
/// length (`trials` timed runs after one warmup), then fits log-log slopes
/// and times a fixed decode workload at long context.
pub fn bench_throughput(bench: &BenchConfig, seed: u64) -> Result<ThroughputReport> {
    if bench.lengths.len() < 2 {
        return Err(Error::Config("bench.lengths needs at least two lengths".into()));
    }
    let d = bench.d;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = MambaBlockParams::init(d, 2, 4, 16, &mut rng);
    let attn = AttentionLayer::init(d, &mut rng);

    let mut rows = Vec::with_capacity(bench.lengths.len());
    for &l in &bench.lengths {
        let x = random_input(l, d, &mut rng);
        let mut ssm_times = Vec::with_capacity(bench.trials);
        let mut attn_times = Vec::with_capacity(bench.trials);
        mamba_block(&x, &block)?; // warmup
        for _ in 0..bench.trials {
            let t0 = Instant::now();
            let (y, _) = mamba_block(&x, &block)?;
            ssm_times.push(t0.elapsed().as_secs_f64().max(1e-9));
            std::hint::black_box(y);
        }
        attn.forward(&x)?; // warmup
        for _ in 0..bench.trials {
            let t0 = Instant::now();
            let y = attn.forward(&x)?;
            attn_times.push(t0.elapsed().as_secs_f64().max(1e-9));
            std::hint::black_box(y);
        }
        let (sm, ss) = mean_std(&ssm_times);
        let (am, asd) = mean_std(&attn_times);
        rows.push(ThroughputRow {
            length: l,
            ssm_mean_s: sm,
            ssm_std_s: ss,
            attn_mean_s: am,
            attn_std_s: asd,
        });
    }

    let lengths: Vec<f64> = rows.iter().map(|r| r.length as f64).collect();
    let ssm_means: Vec<f64> = rows.iter().map(|r| r.ssm_mean_s).collect();
    let attn_means: Vec<f64> = rows.iter().map(|r| r.attn_mean_s).collect();
    let ssm_slope = log_log_slope(&lengths, &ssm_means)?;
    let attn_slope = log_log_slope(&lengths, &attn_means)?;

    // Decode workload: DECODE_TOKENS single-token steps after a context of
    // DECODE_CONTEXT positions. The recurrent state absorbs the context;
    // the attention cache must keep it.
    let steps: Vec<Array1<f64>> = (0..DECODE_TOKENS)
        .map(|_| Array1::from_shape_fn(d, |_| rng.gen_range(-1.0..1.0)))
        .collect();

    let mut state = BlockState::new(&block);
    let ctx_step = Array1::from_shape_fn(d, |_| rng.gen_range(-1.0..1.0));
    for _ in 0..DECODE_CONTEXT {
        mamba_block_step(&ctx_step, &block, &mut state)?;
    }
    let t0 = Instant::now();
    for s in &steps {
        std::hint::black_box(mamba_block_step(s, &block, &mut state)?);
    }
    let ssm_decode_s = t0.elapsed().as_secs_f64();

    let mut cache = KvCache::default();
    for _ in 0..DECODE_CONTEXT {
        attn.step(&ctx_step, &mut cache)?;
    }
    let t0 = Instant::now();
    for s in &steps {
        std::hint::black_box(attn.step(s, &mut cache)?);
    }
    let attn_decode_s = t0.elapsed().as_secs_f64();

    Ok(ThroughputReport {
        rows,
        ssm_slope,
        attn_slope,
        ssm_decode_s,
        attn_decode_s,
        decode_context: DECODE_CONTEXT,
        decode_tokens: DECODE_TOKENS,
    })
}

pub fn throughput_csv(report: &ThroughputReport) -> String {
    let mut out = String::from("length,ssm_mean_s,ssm_std_s,attn_mean_s,attn_std_s\n");
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.length, r.ssm_mean_s, r.ssm_std_s, r.attn_mean_s, r.attn_std_s
        ));
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct MemoryRow {
    pub context: usize,
    /// Carried f64 elements in the recurrent block state.
    pub ssm_state_elems: usize,
    /// Carried f64 elements in the attention key/value cache.
    pub attn_cache_elems: usize,
}

/// Steps both models through growing contexts and records the carried state
/// sizes by direct instrumentation (element counts, not allocator totals).
pub fn bench_memory(bench: &BenchConfig, seed: u64) -> Result<Vec<MemoryRow>> {
    let d = bench.d;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = MambaBlockParams::init(d, 2, 4, 16, &mut rng);
    let attn = AttentionLayer::init(d, &mut rng);
    let x = Array1::from_shape_fn(d, |_| rng.gen_range(-1.0..1.0));

    let mut state = BlockState::new(&block);
    let mut cache = KvCache::default();
    let mut rows = Vec::new();
    let max = *bench.lengths.iter().max().unwrap_or(&0);
    for i in 1..=max {
        mamba_block_step(&x, &block, &mut state)?;
        attn.step(&x, &mut cache)?;
        if bench.lengths.contains(&i) {
            rows.push(MemoryRow {
                context: i,
                ssm_state_elems: state.element_count(),
                attn_cache_elems: cache.element_count(),
            });
        }
    }
    Ok(rows)
}

pub fn memory_csv(rows: &[MemoryRow]) -> String {
    let mut out = String::from("context,ssm_state_elems,attn_cache_elems\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.context, r.ssm_state_elems, r.attn_cache_elems));
    }
    out
}
