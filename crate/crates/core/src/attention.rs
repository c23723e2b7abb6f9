//! Single-head cross-attention between acoustic frames and catalogue embeddings, exact and
//! with quantized keys and values.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{input, Error, Result};
use crate::fsq::{normalize_wide, FsqParams};
use crate::linalg::Matrix;
use crate::retrieval::{build_score_table, precompute_columns, CodeMatrix};

/// Query, key and value projections. Row-vector convention: `Q = X·W_q`, `K = C·W_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet {
    w_q: Matrix,
    w_k: Matrix,
    w_v: Matrix,
    key_blocks: usize,
}

impl ProjectionSet {
    /// `key_blocks` is the number of diagonal blocks `W_k` is declared to have (1 for a full
    /// matrix); the structure is verified.
    pub fn new(w_q: Matrix, w_k: Matrix, w_v: Matrix, key_blocks: usize) -> Result<Self> {
        let d = w_q.rows();
        for (name, m) in [("W_q", &w_q), ("W_k", &w_k), ("W_v", &w_v)] {
            if m.rows() != d || m.cols() != d {
                return input(format!("{name} is {}x{}, expected {d}x{d}", m.rows(), m.cols()));
            }
            if !m.is_finite() {
                return input(format!("{name} has non-finite entries"));
            }
        }
        if !w_k.is_block_diagonal(key_blocks) {
            return Err(Error::Config(format!(
                "W_k is not block-diagonal with {key_blocks} blocks"
            )));
        }
        Ok(Self {
            w_q,
            w_k,
            w_v,
            key_blocks,
        })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            w_q: Matrix::identity(dim),
            w_k: Matrix::identity(dim),
            w_v: Matrix::identity(dim),
            key_blocks: dim,
        }
    }

    /// Random projections scaled by `1/√D` (`1/√(D/G)` for the key blocks).
    pub fn random(dim: usize, key_blocks: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = 1.0 / (dim as f32).sqrt();
        let w_q = Matrix::random_normal(dim, dim, s, &mut rng);
        let sb = 1.0 / ((dim / key_blocks.max(1)) as f32).sqrt();
        let w_k = Matrix::random_block_diagonal(dim, key_blocks, sb, &mut rng)?;
        let w_v = Matrix::random_normal(dim, dim, s, &mut rng);
        Self::new(w_q, w_k, w_v, key_blocks)
    }

    pub fn dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn w_q(&self) -> &Matrix {
        &self.w_q
    }

    pub fn w_k(&self) -> &Matrix {
        &self.w_k
    }

    pub fn w_v(&self) -> &Matrix {
        &self.w_v
    }

    pub fn key_blocks(&self) -> usize {
        self.key_blocks
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    /// `T×D` biasing encodings.
    pub y: Matrix,
    /// `T×|B|` row-stochastic attention weights, when retained.
    pub weights: Option<Matrix>,
}

/// `(Q, K, V) = (X·W_q, C·W_k, C·W_v)`.
pub fn project(x: &Matrix, c: &Matrix, proj: &ProjectionSet) -> Result<(Matrix, Matrix, Matrix)> {
    Ok((x.matmul(&proj.w_q)?, c.matmul(&proj.w_k)?, c.matmul(&proj.w_v)?))
}

/// `α·Q·Kᵀ` with `α = 1/√D` when `include_scale`, else `Q·Kᵀ`.
pub fn dense_scores(q: &Matrix, k: &Matrix, include_scale: bool) -> Result<Matrix> {
    let mut s = q.matmul_transposed(k)?;
    if include_scale {
        let alpha = 1.0 / (q.cols() as f64).sqrt();
        for r in 0..s.rows() {
            for v in s.row_mut(r) {
                *v = (*v as f64 * alpha) as f32;
            }
        }
    }
    Ok(s)
}

/// Row-wise softmax of `scores` applied to `v`, retaining the weights.
pub fn attend(scores: &Matrix, v: &Matrix) -> Result<AttentionOutput> {
    if scores.cols() != v.rows() {
        return input(format!(
            "{} scores per row but {} value rows",
            scores.cols(),
            v.rows()
        ));
    }
    let mut weights = Matrix::zeros(scores.rows(), scores.cols());
    let mut y = Matrix::zeros(scores.rows(), v.cols());
    let mut acc = vec![0f64; v.cols()];
    let mut w64 = Vec::with_capacity(scores.cols());
    for t in 0..scores.rows() {
        softmax_f64(scores.row(t).iter().map(|&s| s as f64), &mut w64);
        acc.iter_mut().for_each(|a| *a = 0.0);
        for (j, &w) in w64.iter().enumerate() {
            for (a, &vv) in acc.iter_mut().zip(v.row(j)) {
                *a += w * vv as f64;
            }
        }
        for (o, &w) in weights.row_mut(t).iter_mut().zip(&w64) {
            *o = w as f32;
        }
        for (o, &a) in y.row_mut(t).iter_mut().zip(&acc) {
            *o = a as f32;
        }
    }
    Ok(AttentionOutput {
        y,
        weights: Some(weights),
    })
}

/// Max-subtracted softmax into `out`.
pub(crate) fn softmax_f64(scores: impl Iterator<Item = f64> + Clone, out: &mut Vec<f64>) {
    out.clear();
    let max = scores.clone().fold(f64::NEG_INFINITY, f64::max);
    out.extend(scores.map(|s| (s - max).exp()));
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|w| *w /= sum);
}

/// Single-stage attention with quantized keys and values: `softmax(α·Q·K̃ᵀ)·Ṽ`, where
/// `K̃ = Z·W_k` and `Ṽ = Z·W_v` for the reconstructed catalogue `Z`.
///
/// Scores come from the score-table path including the per-group bias terms. Because the
/// weights sum to one, `Σ_j w_j z_j` is formed in the normalized code domain and lifted
/// through the output affine map once per frame, so `Z` is never materialized.
pub fn quantized_attend(
    q: &Matrix,
    codes: &CodeMatrix,
    params: &FsqParams,
    proj: &ProjectionSet,
    retain_weights: bool,
) -> Result<AttentionOutput> {
    let cfg = params.config();
    if q.cols() != cfg.dim() {
        return input(format!("queries have dimension {}, expected {}", q.cols(), cfg.dim()));
    }
    if codes.groups() != cfg.groups() {
        return input(format!(
            "code matrix has {} words per row, expected {}",
            codes.groups(),
            cfg.groups()
        ));
    }
    if codes.is_empty() {
        return input("cannot attend over an empty catalogue");
    }
    codes.validate(cfg)?;
    let columns = precompute_columns(params, proj)?;
    let levels = cfg.levels().levels();
    let nl = levels.len();
    let d = cfg.sub_dim();
    let alpha = 1.0 / (cfg.dim() as f64).sqrt();

    let mut y = Matrix::zeros(q.rows(), cfg.dim());
    let mut weights = retain_weights.then(|| Matrix::zeros(q.rows(), codes.rows()));
    let mut scores = Vec::with_capacity(codes.rows());
    let mut w64 = Vec::with_capacity(codes.rows());
    let mut n_bar = vec![0f64; cfg.code_len()];
    let mut z_bar = vec![0f32; cfg.dim()];
    for t in 0..q.rows() {
        let table = build_score_table(q.row(t), &columns)?;
        scores.clear();
        scores.extend((0..codes.rows()).map(|j| table.score_packed(codes.row(j)) + table.bias()));
        softmax_f64(scores.iter().map(|&s| s * alpha), &mut w64);

        n_bar.iter_mut().for_each(|v| *v = 0.0);
        for (j, &w) in w64.iter().enumerate() {
            for (g, &word) in codes.row(j).iter().enumerate() {
                for (i, &l) in levels.iter().enumerate() {
                    let c = crate::retrieval::field(word, i);
                    n_bar[g * nl + i] += w * normalize_wide(c, l);
                }
            }
        }
        for g in 0..cfg.groups() {
            let a_out = params.a_out(g);
            let b_out = params.b_out(g);
            for k in 0..d {
                let s: f64 = (0..nl)
                    .map(|i| a_out[k * nl + i] as f64 * n_bar[g * nl + i])
                    .sum();
                z_bar[g * d + k] = (s + b_out[k] as f64) as f32;
            }
        }
        let yt = proj.w_v().vec_mul(&z_bar)?;
        y.row_mut(t).copy_from_slice(&yt);
        if let Some(w) = weights.as_mut() {
            for (o, &v) in w.row_mut(t).iter_mut().zip(&w64) {
                *o = v as f32;
            }
        }
    }
    Ok(AttentionOutput { y, weights })
}
