//! Naive reference implementations and fixture handling shared by the
//! integration tests. Nothing here calls into the library's numerics.

#![allow(dead_code)]

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rectattn::rsat::{read_tensor, write_tensor, Tensor};
use rectattn::{Matrix, Precision};

pub type Rows = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Rows {
    (0..rows)
        .map(|_| (0..cols).map(|_| StandardNormal.sample(rng)).collect())
        .collect()
}

pub fn matrix(rows: &Rows, cols: usize) -> Matrix {
    Matrix::new(rows.len(), cols, rows.concat(), Precision::Double).unwrap()
}

pub fn rows_of(m: &Matrix) -> Rows {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

pub fn naive_dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Mean of consecutive groups of rows.
pub fn naive_pool(x: &Rows, lens: &[usize]) -> Rows {
    let mut out = Vec::new();
    let mut start = 0;
    for &len in lens {
        let mut mean = vec![0.0; x[0].len()];
        for row in &x[start..start + len] {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= len as f64;
        }
        out.push(mean);
        start += len;
    }
    out
}

pub fn naive_softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.iter().map(|x| x / total).collect()
}

/// Softmax attention over the allowed entries; disallowed weights are 0.
pub fn naive_attention(q: &Rows, k: &Rows, v: &Rows, allowed: impl Fn(usize, usize) -> bool) -> (Rows, Rows) {
    let d = q[0].len();
    let scale = 1.0 / (d as f64).sqrt();
    let mut weights = Vec::new();
    let mut out = Vec::new();
    for (i, qi) in q.iter().enumerate() {
        let idx: Vec<usize> = (0..k.len()).filter(|&j| allowed(i, j)).collect();
        let scores: Vec<f64> = idx.iter().map(|&j| naive_dot(qi, &k[j]) * scale).collect();
        let p = naive_softmax(&scores);
        let mut w = vec![0.0; k.len()];
        let mut o = vec![0.0; v[0].len()];
        for (&j, &pj) in idx.iter().zip(&p) {
            w[j] = pj;
            for (oc, vc) in o.iter_mut().zip(&v[j]) {
                *oc += pj * vc;
            }
        }
        weights.push(w);
        out.push(o);
    }
    (weights, out)
}

/// Morton code by explicit bit interleaving: bit `b` of w, h, t lands at
/// positions `3b`, `3b + 1`, `3b + 2`.
pub fn reference_morton(t: usize, h: usize, w: usize) -> u64 {
    let mut code = 0u64;
    for b in 0..21 {
        code |= (((w >> b) & 1) as u64) << (3 * b);
        code |= (((h >> b) & 1) as u64) << (3 * b + 1);
        code |= (((t >> b) & 1) as u64) << (3 * b + 2);
    }
    code
}

pub fn max_abs_diff(a: &Rows, b: &Rows) -> f64 {
    let mut worst: f64 = 0.0;
    for (ra, rb) in a.iter().zip(b) {
        assert_eq!(ra.len(), rb.len());
        for (x, y) in ra.iter().zip(rb) {
            worst = worst.max((x - y).abs());
        }
    }
    assert_eq!(a.len(), b.len());
    worst
}

fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(format!("{name}.rsat"))
}

/// Compares `value` with the frozen fixture `name`, or rewrites the fixture
/// when `RECTATTN_BLESS=1`.
pub fn golden(name: &str, dims: &[usize], value: &[f64], tol: f64) {
    let path = fixture_path(name);
    if std::env::var("RECTATTN_BLESS").as_deref() == Ok("1") {
        let t = Tensor {
            dims: dims.to_vec(),
            precision: Precision::Double,
            data: value.to_vec(),
        };
        write_tensor(&path, &t).unwrap();
        return;
    }
    let t = read_tensor(&path).unwrap_or_else(|e| panic!("fixture {}: {e}", path.display()));
    assert_eq!(t.dims, dims, "fixture {name} dims");
    let worst = t.data.iter().zip(value).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst <= tol, "fixture {name} differs by {worst:e}");
}

pub fn golden_rows(name: &str, rows: &Rows, tol: f64) {
    golden(name, &[rows.len(), rows[0].len()], &rows.concat(), tol);
}
