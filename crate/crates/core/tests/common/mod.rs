//! Brute-force reference computations shared by the integration tests. Nothing here goes
//! through score tables or key columns.

#![allow(dead_code)]

use qbias::attention::ProjectionSet;
use qbias::catalogue::{build_index, synthetic_phrases, BiasingCatalogue, EmbedderConfig, PackedIndex};
use qbias::fsq::{FsqConfig, FsqParams, LevelSpec};
use qbias::linalg::Matrix;
use qbias::ste::calibrate_input_scale;
use qbias::catalogue::TrigramEmbedder;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Dequantized embedding of one packed row in `f64`: unpack 3-bit fields, map code `c` of an
/// `l`-level dimension to `(2c − (l − 1))/(l − 1)`, then apply each group's output map.
pub fn reconstruct_row(words: &[u16], params: &FsqParams) -> Vec<f64> {
    let cfg = params.config();
    let levels = cfg.levels().levels();
    let (nl, d) = (levels.len(), cfg.sub_dim());
    let mut z = vec![0f64; cfg.dim()];
    for (g, &w) in words.iter().enumerate() {
        let n: Vec<f64> = levels
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                let c = ((w >> (3 * i)) & 7) as f64;
                let h = (l - 1) as f64;
                (2.0 * c - h) / h
            })
            .collect();
        let (a_out, b_out) = (params.a_out(g), params.b_out(g));
        for r in 0..d {
            let s: f64 = (0..nl).map(|i| a_out[r * nl + i] as f64 * n[i]).sum();
            z[g * d + r] = s + b_out[r] as f64;
        }
    }
    z
}

/// Row vector times matrix in `f64`.
pub fn row_times(v: &[f64], m: &Matrix) -> Vec<f64> {
    let mut out = vec![0f64; m.cols()];
    for (r, &a) in v.iter().enumerate() {
        for (o, &b) in out.iter_mut().zip(m.row(r)) {
            *o += a * b as f64;
        }
    }
    out
}

pub fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `q·(b_out W_k)`, the part of every score that does not depend on the codes.
pub fn score_bias(q: &[f64], params: &FsqParams, w_k: &Matrix) -> f64 {
    let b: Vec<f64> = (0..params.config().groups())
        .flat_map(|g| params.b_out(g).iter().map(|&v| v as f64).collect::<Vec<_>>())
        .collect();
    dot(q, &row_times(&b, w_k))
}

/// Reconstructed keys `Ẑ W_k` of every index row.
pub fn oracle_keys(index: &PackedIndex) -> Vec<Vec<f64>> {
    let codes = index.codes();
    (0..codes.rows())
        .map(|j| row_times(&reconstruct_row(codes.row(j), index.params()), index.projections().w_k()))
        .collect()
}

/// Per frame, the `k` best `(id, full score)` pairs by descending score then ascending id.
pub fn oracle_topk(x: &Matrix, keys: &[Vec<f64>], w_q: &Matrix, k: usize) -> Vec<Vec<(u32, f64)>> {
    (0..x.rows())
        .map(|t| {
            let q = row_times(&widen(x.row(t)), w_q);
            let mut scored: Vec<(u32, f64)> = keys.iter().enumerate().map(|(j, key)| (j as u32, dot(&q, key))).collect();
            scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            scored.truncate(k);
            scored
        })
        .collect()
}

pub fn random_levels(rng: &mut ChaCha8Rng, max_len: usize) -> LevelSpec {
    let n = rng.random_range(1..=max_len);
    LevelSpec::new((0..n).map(|_| rng.random_range(2..=8)).collect()).unwrap()
}

/// Quantizer with `A_in` scaled so the codes of `samples` spread over the levels, and
/// perturbed biases so that no parameter block is trivially zero.
pub fn spread_params(cfg: FsqConfig, samples: &[Vec<f32>], rng: &mut ChaCha8Rng) -> FsqParams {
    let mut p = FsqParams::init(cfg, rng.random());
    calibrate_input_scale(&mut p, samples, rng.random_range(0.8..2.0)).unwrap();
    for v in p.as_flat_mut().iter_mut() {
        if *v == 0.0 {
            *v = rng.random_range(-0.2..0.2);
        }
    }
    p
}

/// An index over `n` synthetic phrases with a random block-diagonal projection set.
pub fn random_index(rng: &mut ChaCha8Rng, dim: usize, groups: usize, levels: LevelSpec, n: usize) -> PackedIndex {
    let seed: u64 = rng.random();
    let catalogue = BiasingCatalogue::from_phrases(synthetic_phrases(n, seed)).unwrap();
    let embedder = EmbedderConfig::new(dim, seed);
    let mut emb = TrigramEmbedder::new(embedder);
    let samples: Vec<Vec<f32>> = catalogue.entries().iter().map(|e| emb.embed_entry(&e.text).unwrap()).collect();
    let cfg = FsqConfig::new(dim, groups, levels).unwrap();
    let params = spread_params(cfg, &samples, rng);
    let proj = ProjectionSet::random(dim, groups, rng.random()).unwrap();
    build_index(&catalogue, &params, &proj, embedder).unwrap()
}

pub fn random_frames(rng: &mut ChaCha8Rng, t: usize, dim: usize) -> Matrix {
    let data = (0..t * dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    Matrix::from_vec(t, dim, data).unwrap()
}

/// `|a − b| ≤ tol·max(|a|, |b|)`, with exact agreement near zero accepted below `1e-9`.
pub fn close(a: f64, b: f64, tol: f64) -> bool {
    let diff = (a - b).abs();
    diff <= tol * a.abs().max(b.abs()) || diff < 1e-9
}
