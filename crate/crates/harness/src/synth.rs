//! Seeded synthetic attention problems.
//!
//! Video token `i` in block `b` at grid position `(t, h, w)`:
//! `x_i = base_b + σ · noise_i + α · pe(t, h, w)`, separately for queries and
//! keys. Text queries and keys are independent Gaussians scaled by `β`.
//! Values are independent Gaussians for every token.
//!
//! Every tensor is drawn from its own ChaCha8 stream (same seed, stream id
//! from [`Stream`]), so adding a tensor never shifts the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rectattn::problem::GridDims;
use rectattn::{AttentionProblem, Matrix, Precision};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

/// Stream ids, one per generated tensor. Fixed: fixtures depend on them.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub enum Stream {
    QueryBase = 1,
    KeyBase = 2,
    QueryNoise = 3,
    KeyNoise = 4,
    TextQuery = 5,
    TextKey = 6,
    Value = 7,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

pub fn gaussian(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub t_v: usize,
    pub t_t: usize,
    pub d: usize,
    pub block: usize,
    pub grid: GridDims,
    /// Positional-embedding strength; drives attention locality.
    pub alpha: f64,
    /// Text-key RMS multiplier.
    pub beta: f64,
    /// Token-level deviation inside a block.
    pub sigma: f64,
    pub precision: Precision,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 42,
            t_v: 256,
            t_t: 16,
            d: 32,
            block: 8,
            grid: (4, 8, 8),
            alpha: 1.0,
            beta: 2.0,
            sigma: 0.3,
            precision: Precision::Double,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let (t, h, w) = self.grid;
        if t * h * w != self.t_v {
            return Err(HarnessError::Config(format!(
                "grid {t}x{h}x{w} does not cover {} video tokens",
                self.t_v
            )));
        }
        if self.t_v == 0 || self.d == 0 || self.block == 0 {
            return Err(HarnessError::Config("t_v, d and block must be at least 1".into()));
        }
        if !self.t_v.is_multiple_of(self.block) {
            return Err(HarnessError::Config(format!(
                "block {} does not divide {} video tokens",
                self.block, self.t_v
            )));
        }
        if [self.alpha, self.beta - 1.0, self.sigma]
            .iter()
            .any(|x| x.is_nan() || *x < 0.0)
        {
            return Err(HarnessError::Config("need alpha >= 0, beta >= 1, sigma >= 0".into()));
        }
        Ok(())
    }
}

/// Sinusoidal embedding of a grid coordinate. Dimension `c` encodes axis
/// `c % 3` (t, h, w); consecutive dimensions of one axis alternate sin/cos
/// over geometrically spaced frequencies.
pub fn positional_embedding(coord: (usize, usize, usize), d: usize) -> Vec<f64> {
    let per_axis = d.div_ceil(3);
    let pairs = per_axis.div_ceil(2).max(1);
    let pos = [coord.0 as f64, coord.1 as f64, coord.2 as f64];
    (0..d)
        .map(|c| {
            let (axis, j) = (c % 3, c / 3);
            let freq = 100f64.powf(-((j / 2) as f64) / pairs as f64);
            let angle = pos[axis] * freq;
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

fn video_tokens(spec: &SyntheticSpec, base: Stream, noise: Stream) -> Vec<f64> {
    let (_, h, w) = spec.grid;
    let d = spec.d;
    let bases = gaussian(&mut stream_rng(spec.seed, base), (spec.t_v / spec.block) * d);
    let noise = gaussian(&mut stream_rng(spec.seed, noise), spec.t_v * d);
    let mut out = Vec::with_capacity(spec.t_v * d);
    for i in 0..spec.t_v {
        let coord = (i / (h * w), (i / w) % h, i % w);
        let pe = positional_embedding(coord, d);
        let b = &bases[(i / spec.block) * d..(i / spec.block + 1) * d];
        for c in 0..d {
            out.push(b[c] + spec.sigma * noise[i * d + c] + spec.alpha * pe[c]);
        }
    }
    out
}

/// Deterministic problem for `spec`.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<AttentionProblem> {
    spec.validate()?;
    let (d, p) = (spec.d, spec.precision);
    let q_video = video_tokens(spec, Stream::QueryBase, Stream::QueryNoise);
    let mut k = video_tokens(spec, Stream::KeyBase, Stream::KeyNoise);
    let scaled = |stream| -> Vec<f64> {
        gaussian(&mut stream_rng(spec.seed, stream), spec.t_t * d)
            .into_iter()
            .map(|x| spec.beta * x)
            .collect()
    };
    let q_text = scaled(Stream::TextQuery);
    k.extend(scaled(Stream::TextKey));
    let v = gaussian(&mut stream_rng(spec.seed, Stream::Value), (spec.t_v + spec.t_t) * d);
    let total = spec.t_v + spec.t_t;
    Ok(AttentionProblem::new(
        Matrix::new(spec.t_v, d, q_video, p)?,
        Matrix::new(spec.t_t, d, q_text, p)?,
        Matrix::new(total, d, k, p)?,
        Matrix::new(total, d, v, p)?,
        spec.block,
        Some(spec.grid),
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let spec = SyntheticSpec::default();
        assert_eq!(gen_synthetic(&spec).unwrap(), gen_synthetic(&spec).unwrap());
        let other = SyntheticSpec { seed: 43, ..spec };
        assert_ne!(gen_synthetic(&spec).unwrap(), gen_synthetic(&other).unwrap());
    }

    #[test]
    fn homogeneous_without_noise_or_position() {
        let spec = SyntheticSpec {
            alpha: 0.0,
            sigma: 0.0,
            ..SyntheticSpec::default()
        };
        let p = gen_synthetic(&spec).unwrap();
        for i in 0..spec.t_v {
            let first = (i / spec.block) * spec.block;
            assert_eq!(p.q_video().row(i), p.q_video().row(first));
            assert_eq!(p.k().row(i), p.k().row(first));
        }
    }

    #[test]
    fn streams_are_independent() {
        let a = gaussian(&mut stream_rng(1, Stream::QueryBase), 4);
        let b = gaussian(&mut stream_rng(1, Stream::KeyBase), 4);
        assert_ne!(a, b);
    }

    #[test]
    fn rejects_bad_specs() {
        let bad_grid = SyntheticSpec {
            grid: (2, 2, 2),
            ..SyntheticSpec::default()
        };
        assert!(gen_synthetic(&bad_grid).is_err());
        let bad_beta = SyntheticSpec {
            beta: 0.5,
            ..SyntheticSpec::default()
        };
        assert!(gen_synthetic(&bad_beta).is_err());
    }

    #[test]
    fn embedding_is_local() {
        let d = 32;
        let at = |c| positional_embedding(c, d);
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let o = at((1, 3, 3));
        assert!(dot(&o, &at((1, 3, 4))) > dot(&o, &at((1, 3, 7))));
        assert!(dot(&o, &o) > dot(&o, &at((1, 4, 3))));
    }
}
