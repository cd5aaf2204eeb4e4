//! Single-head causal softmax attention, used as the quadratic reference
//! baseline in the throughput and memory benches. Forward-only: it never
//! trains, so no backward pass is kept.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::Linear;

#[derive(Debug, Clone)]
pub struct AttentionLayer {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub width: usize,
}

/// Decode-mode cache: keys and values for every past position, so memory
/// grows linearly with context length (2·d floats per step).
#[derive(Debug, Clone, Default)]
pub struct KvCache {
    pub keys: Vec<Array1<f64>>,
    pub values: Vec<Array1<f64>>,
}

impl KvCache {
    pub fn element_count(&self) -> usize {
        self.keys.iter().map(|k| k.len()).sum::<usize>() + self.values.iter().map(|v| v.len()).sum::<usize>()
    }
}

impl AttentionLayer {
    pub fn init(width: usize, rng: &mut ChaCha8Rng) -> AttentionLayer {
        let scale = 1.0 / (width as f64).sqrt();
        let mut lin = || Linear {
            w: Array2::from_shape_fn((width, width), |_| rng.gen_range(-scale..scale)),
            b: Array1::zeros(width),
        };
        AttentionLayer {
            wq: lin(),
            wk: lin(),
            wv: lin(),
            wo: lin(),
            width,
        }
    }

    /// Full-sequence causal forward on an (L, d) input.
    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        let (l, d) = x.dim();
        if d != self.width {
            return Err(Error::Shape(format!("attention expects width {}, got {d}", self.width)));
        }
        let q = self.wq.forward(x)?;
        let k = self.wk.forward(x)?;
        let v = self.wv.forward(x)?;
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        let mut ctx = Array2::zeros((l, d));
        for i in 0..l {
            let qi = q.row(i);
            let mut scores = Vec::with_capacity(i + 1);
            let mut max = f64::NEG_INFINITY;
            for j in 0..=i {
                let s = qi.dot(&k.row(j)) * inv_sqrt_d;
                max = max.max(s);
                scores.push(s);
            }
            let mut total = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                total += *s;
            }
            for (j, s) in scores.iter().enumerate() {
                let w = s / total;
                for c in 0..d {
                    ctx[[i, c]] += w * v[[j, c]];
                }
            }
        }
        self.wo.forward(&ctx)
    }

    /// One decode step: appends this position's key/value to the cache and
    /// attends over everything seen so far.
    pub fn step(&self, x: &Array1<f64>, cache: &mut KvCache) -> Result<Array1<f64>> {
        if x.len() != self.width {
            return Err(Error::Shape(format!(
                "attention step expects width {}, got {}",
                self.width,
                x.len()
            )));
        }
        let q = self.wq.forward_vec(x);
        cache.keys.push(self.wk.forward_vec(x));
        cache.values.push(self.wv.forward_vec(x));
        let inv_sqrt_d = 1.0 / (self.width as f64).sqrt();
        let mut scores: Vec<f64> = cache.keys.iter().map(|k| q.dot(k) * inv_sqrt_d).collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            total += *s;
        }
        let mut ctx = Array1::zeros(self.width);
        for (s, v) in scores.iter().zip(&cache.values) {
            ctx += &(v * (*s / total));
        }
        Ok(self.wo.forward_vec(&ctx))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Axis;
    use rand::SeedableRng;

    fn layer(d: usize, seed: u64) -> AttentionLayer {
        AttentionLayer::init(d, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn single_position_attends_only_to_itself() {
        let d = 6;
        let at = layer(d, 1);
        let x = Array2::from_shape_fn((1, d), |(_, j)| 0.3 * j as f64 - 0.7);
        let y = at.forward(&x).unwrap();
        let v = at.wv.forward(&x).unwrap();
        let want = at.wo.forward(&v).unwrap();
        for j in 0..d {
            assert!((y[[0, j]] - want[[0, j]]).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_mask_blocks_future_positions() {
        let d = 5;
        let l = 8;
        let at = layer(d, 2);
        let x = Array2::from_shape_fn((l, d), |(i, j)| ((i * 7 + j) % 11) as f64 / 11.0 - 0.4);
        let base = at.forward(&x).unwrap();
        let mut x2 = x.clone();
        let cut = 5;
        for j in 0..d {
            x2[[cut, j]] += 1.5;
        }
        let pert = at.forward(&x2).unwrap();
        for i in 0..cut {
            for j in 0..d {
                assert_eq!(base[[i, j]], pert[[i, j]], "position {i} saw a future edit");
            }
        }
        let changed = (0..d).any(|j| base[[cut, j]] != pert[[cut, j]]);
        assert!(changed);
    }

    #[test]
    fn identical_tokens_give_uniform_weights() {
        // With every input row equal, scores within a row tie, so position i
        // averages i+1 identical values: output rows must all match row 0.
        let d = 4;
        let at = layer(d, 3);
        let row = [0.2, -0.5, 0.9, 0.1];
        let x = Array2::from_shape_fn((6, d), |(_, j)| row[j]);
        let y = at.forward(&x).unwrap();
        for i in 1..6 {
            for j in 0..d {
                assert!((y[[i, j]] - y[[0, j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_matches_bruteforce_softmax() {
        let d = 4;
        let l = 5;
        let at = layer(d, 4);
        let x = Array2::from_shape_fn((l, d), |(i, j)| ((i * 3 + j * 5) % 7) as f64 / 7.0 - 0.5);
        let y = at.forward(&x).unwrap();
        let q = at.wq.forward(&x).unwrap();
        let k = at.wk.forward(&x).unwrap();
        let v = at.wv.forward(&x).unwrap();
        for i in 0..l {
            let scores: Vec<f64> = (0..=i).map(|j| q.row(i).dot(&k.row(j)) / (d as f64).sqrt()).collect();
            let exps: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
            let z: f64 = exps.iter().sum();
            let mut ctx = Array1::zeros(d);
            for (j, e) in exps.iter().enumerate() {
                ctx += &(&v.row(j) * (*e / z));
            }
            let want = at.wo.forward_vec(&ctx);
            for j in 0..d {
                assert!((y[[i, j]] - want[j]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn decode_steps_match_full_forward() {
        let d = 5;
        let l = 7;
        let at = layer(d, 5);
        let x = Array2::from_shape_fn((l, d), |(i, j)| ((i + 2 * j) % 9) as f64 / 9.0 - 0.3);
        let full = at.forward(&x).unwrap();
        let mut cache = KvCache::default();
        for (i, row) in x.axis_iter(Axis(0)).enumerate() {
            let y = at.step(&row.to_owned(), &mut cache).unwrap();
            for j in 0..d {
                assert!((full[[i, j]] - y[j]).abs() < 1e-12);
            }
            assert_eq!(cache.element_count(), 2 * d * (i + 1));
        }
    }
}
