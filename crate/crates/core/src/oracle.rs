//! Brute-force double-precision attention used as ground truth.
//!
//! These materialize the full weight matrix and are only meant for problem
//! sizes where that is affordable.

use crate::error::{Error, Result};
use crate::masks::BlockMask;
use crate::problem::BlockGrid;
use crate::tensor::{Matrix, Precision};

fn check_qkv(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<usize> {
    let d = q.cols();
    if k.cols() != d || v.cols() != d {
        return Err(Error::Shape(format!(
            "q/k/v widths {}/{}/{} differ",
            q.cols(),
            k.cols(),
            v.cols()
        )));
    }
    if k.rows() != v.rows() {
        return Err(Error::Shape(format!("{} keys but {} values", k.rows(), v.rows())));
    }
    Ok(d)
}

/// Softmax over `allowed` entries of each score row, then `weights · v`.
fn attend(q: &Matrix, k: &Matrix, v: &Matrix, allowed: impl Fn(usize, usize) -> bool) -> (Matrix, Matrix) {
    let d = q.cols();
    let (t_q, t_k) = (q.rows(), k.rows());
    let scale = 1.0 / (d as f64).sqrt();
    let mut weights = vec![0.0; t_q * t_k];
    let mut output = vec![0.0; t_q * d];
    for i in 0..t_q {
        let qi = q.row(i);
        let w = &mut weights[i * t_k..(i + 1) * t_k];
        let mut max = f64::NEG_INFINITY;
        for (j, wj) in w.iter_mut().enumerate() {
            if allowed(i, j) {
                let s: f64 = qi.iter().zip(k.row(j)).map(|(a, b)| a * b).sum::<f64>() * scale;
                *wj = s;
                max = max.max(s);
            }
        }
        let mut denom = 0.0;
        for (j, wj) in w.iter_mut().enumerate() {
            if allowed(i, j) {
                *wj = (*wj - max).exp();
                denom += *wj;
            } else {
                *wj = 0.0;
            }
        }
        let out = &mut output[i * d..(i + 1) * d];
        for (j, wj) in w.iter_mut().enumerate() {
            *wj /= denom;
            if *wj != 0.0 {
                for (o, &vj) in out.iter_mut().zip(v.row(j)) {
                    *o += *wj * vj;
                }
            }
        }
    }
    (
        Matrix::from_parts(t_q, t_k, weights, Precision::Double),
        Matrix::from_parts(t_q, d, output, Precision::Double),
    )
}

/// Dense `softmax(q kᵀ / √d)` and its product with `v`, in double precision.
pub fn full_attention_oracle(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<(Matrix, Matrix)> {
    check_qkv(q, k, v)?;
    if k.rows() == 0 && q.rows() > 0 {
        return Err(Error::Shape("no keys to attend to".into()));
    }
    Ok(attend(q, k, v, |_, _| true))
}

/// Attention of video queries restricted to the key blocks kept by `mask`.
///
/// Excluded entries get weight exactly zero.
pub fn masked_attention_oracle(
    q_v: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mask: &BlockMask,
    grid: &BlockGrid,
) -> Result<(Matrix, Matrix)> {
    check_qkv(q_v, k, v)?;
    if q_v.rows() != grid.t_video || k.rows() != grid.total_kv() {
        return Err(Error::Shape("inputs do not match the block grid".into()));
    }
    mask.check_grid(grid)?;
    if let Some(row) = mask.first_empty_row() {
        return Err(Error::EmptyRow { row });
    }
    let b = grid.block;
    Ok(attend(q_v, k, v, |i, j| mask.get(i / b, j / b)))
}

/// Full attention aggregated to blocks: key-block sums averaged over the
/// tokens of each video query block. Rows sum to one.
pub fn block_summed_attention(weights: &Matrix, grid: &BlockGrid) -> Result<Matrix> {
    if weights.rows() < grid.t_video || weights.cols() != grid.total_kv() {
        return Err(Error::Shape("weights do not match the block grid".into()));
    }
    let mut out = vec![0.0; grid.n_q * grid.n_kv];
    for n in 0..grid.n_q {
        for i in grid.q_range(n) {
            let row = weights.row(i);
            for m in 0..grid.n_kv {
                out[n * grid.n_kv + m] += row[grid.kv_range(m)].iter().sum::<f64>();
            }
        }
        for x in &mut out[n * grid.n_kv..(n + 1) * grid.n_kv] {
            *x /= grid.block as f64;
        }
    }
    Ok(Matrix::from_parts(grid.n_q, grid.n_kv, out, Precision::Double))
}
