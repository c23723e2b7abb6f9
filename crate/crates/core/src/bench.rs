//! Runtime and memory benchmarks of dense versus quantized scoring, and the storage model.

use std::alloc::{GlobalAlloc, Layout, System};
use std::io::Write;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::time::Instant;

use crate::attention::ProjectionSet;
use crate::catalogue::{synthetic_phrases, EmbedderConfig, TrigramEmbedder};
use crate::error::{input, Error, Result};
use crate::fsq::{pack_codes_into, quantize, FsqConfig, FsqParams, LevelSpec};
use crate::linalg::Matrix;
use crate::retrieval::{
    build_score_table, dense_score_into, field, CodeMatrix, KernelStats, Retriever,
    ScoreTable, TopK,
};

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);
static INSTALLED: AtomicBool = AtomicBool::new(false);

/// Allocator that tracks live and peak heap bytes. Install it with
/// `#[global_allocator] static A: CountingAlloc = CountingAlloc;`.
pub struct CountingAlloc;

impl CountingAlloc {
    fn grow(size: usize) {
        let now = CURRENT.fetch_add(size, Ordering::Relaxed) + size;
        PEAK.fetch_max(now, Ordering::Relaxed);
    }
}

unsafe impl GlobalAlloc for CountingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            INSTALLED.store(true, Ordering::Relaxed);
            Self::grow(layout.size());
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc_zeroed(layout);
        if !p.is_null() {
            INSTALLED.store(true, Ordering::Relaxed);
            Self::grow(layout.size());
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = System.realloc(ptr, layout, new_size);
        if !p.is_null() {
            if new_size > layout.size() {
                Self::grow(new_size - layout.size());
            } else {
                CURRENT.fetch_sub(layout.size() - new_size, Ordering::Relaxed);
            }
        }
        p
    }
}

/// Whether a [`CountingAlloc`] is the global allocator of this process.
pub fn tracker_installed() -> bool {
    drop(Box::new(0u64));
    INSTALLED.load(Ordering::Relaxed)
}

pub fn current_bytes() -> usize {
    CURRENT.load(Ordering::Relaxed)
}

pub fn peak_bytes() -> usize {
    PEAK.load(Ordering::Relaxed)
}

/// Runs `f` and returns its result with the peak heap growth above the starting level.
pub fn measure_peak<T>(f: impl FnOnce() -> T) -> (T, usize) {
    let base = current_bytes();
    PEAK.store(base, Ordering::Relaxed);
    let out = f();
    (out, peak_bytes().saturating_sub(base))
}

/// Storage arithmetic for a catalogue of `entries` phrases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryModel {
    /// Unquantized keys, `entries · D · bits/8`.
    pub dense_bytes: u64,
    /// Packed codes, `entries · G · 2`.
    pub quantized_bytes: u64,
    /// One frame's score table.
    pub table_bytes: u64,
}

pub const MIB: f64 = (1u64 << 20) as f64;

pub fn mib(bytes: u64) -> f64 {
    bytes as f64 / MIB
}

pub fn memory_model(entries: u64, dim: u64, groups: u64, levels: &LevelSpec, dense_bits: u64) -> MemoryModel {
    let stride = if levels.is_packable() { 8 } else { levels.max_level() as u64 };
    MemoryModel {
        dense_bytes: entries * dim * dense_bits / 8,
        quantized_bytes: entries * groups * 2,
        table_bytes: groups * levels.len() as u64 * stride * std::mem::size_of::<f64>() as u64,
    }
}

/// Worker count from `QBIAS_THREADS`, defaulting to 1.
pub fn configured_threads() -> usize {
    std::env::var("QBIAS_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Algorithm {
    /// `Q = X W_q` then `Q Kᵀ` over unquantized keys.
    Dense,
    /// `Q`, score tables, and table gathers for every phrase into a score buffer.
    Quantized,
    /// As `Quantized`, keeping only the top `K` per frame.
    Fused,
    /// Gathers materialized as a `[T, B·|L|·G]` tensor before the sum.
    Naive,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Dense => "dense",
            Algorithm::Quantized => "quantized",
            Algorithm::Fused => "fused",
            Algorithm::Naive => "naive",
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(Self::Dense),
            "quantized" => Ok(Self::Quantized),
            "fused" => Ok(Self::Fused),
            "naive" => Ok(Self::Naive),
            other => input(format!("unknown algorithm {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub dim: usize,
    pub groups: usize,
    pub levels: LevelSpec,
    pub frames: usize,
    pub top_k: usize,
    /// Distinct phrases repeated to reach each catalogue size.
    pub base_phrases: usize,
    pub seed: u64,
    /// Workloads whose dense keys would exceed this many bytes are skipped.
    pub memory_budget: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            dim: 256,
            groups: 16,
            levels: LevelSpec::new(vec![8, 5, 5, 5]).unwrap(),
            frames: 16,
            top_k: 5,
            base_phrases: 10_000,
            seed: 0,
            memory_budget: 2 << 30,
        }
    }
}

/// Embeddings and codes of a base phrase list, repeated on demand.
pub struct BaseCatalogue {
    pub params: FsqParams,
    pub proj: ProjectionSet,
    embeddings: Matrix,
    words: Vec<u16>,
    queries: Matrix,
}

impl BaseCatalogue {
    pub fn new(config: &BenchConfig) -> Result<Self> {
        let fsq = FsqConfig::new(config.dim, config.groups, config.levels.clone())?;
        let mut params = FsqParams::init(fsq.clone(), config.seed);
        let gain = (config.dim as f32).sqrt();
        let layout = crate::fsq::GroupLayout::of(&fsq);
        for block in params.as_flat_mut().chunks_exact_mut(layout.block_len()) {
            block[layout.a_in()].iter_mut().for_each(|v| *v *= gain);
        }
        let proj = ProjectionSet::random(config.dim, config.groups, config.seed ^ 0x5eed)?;
        let mut emb = TrigramEmbedder::new(EmbedderConfig::new(config.dim, config.seed));
        let phrases = synthetic_phrases(config.base_phrases.max(1), config.seed);
        let mut rows = Vec::with_capacity(phrases.len());
        let mut words = Vec::with_capacity(phrases.len() * config.groups);
        for p in &phrases {
            let e = emb.embed(p)?;
            let q = quantize(&e, &params)?;
            pack_codes_into(&q.codes, &fsq, &mut words)?;
            rows.push(e);
        }
        let queries = Matrix::from_rows(&rows[..config.frames.min(rows.len())].to_vec())?;
        Ok(Self {
            params,
            proj,
            embeddings: Matrix::from_rows(&rows)?,
            words,
            queries,
        })
    }

    pub fn queries(&self) -> &Matrix {
        &self.queries
    }

    /// Packed codes of `size` rows.
    pub fn codes(&self, size: usize) -> CodeMatrix {
        let g = self.params.config().groups();
        let base = self.words.len() / g;
        let mut words = Vec::with_capacity(size * g);
        for j in 0..size {
            let r = j % base;
            words.extend_from_slice(&self.words[r * g..(r + 1) * g]);
        }
        CodeMatrix::from_words(g, words).expect("whole rows")
    }

    /// Unquantized embeddings of `size` rows, row-major.
    pub fn embeddings(&self, size: usize) -> Vec<f32> {
        let src = self.embeddings.as_slice();
        let mut out = Vec::with_capacity(size * self.embeddings.cols());
        while out.len() < src.len() * (size / self.embeddings.rows()) {
            out.extend_from_slice(src);
        }
        let rest = size % self.embeddings.rows();
        out.extend_from_slice(&src[..rest * self.embeddings.cols()]);
        out
    }

    /// `K = C W_k` for `size` rows, row-major.
    pub fn keys(&self, size: usize) -> Result<Vec<f32>> {
        let base_keys = self.embeddings.matmul(self.proj.w_k())?;
        let c = base_keys.cols();
        let mut out = Vec::with_capacity(size * c);
        for j in 0..size {
            out.extend_from_slice(base_keys.row(j % base_keys.rows()));
        }
        Ok(out)
    }
}

/// Dense scoring: `out = (X W_q)·Kᵀ`.
pub fn dense_scores_pass(x: &Matrix, w_q: &Matrix, keys: &[f32], out: &mut [f32]) -> Result<()> {
    let q = x.matmul(w_q)?;
    dense_score_into(&q, keys, w_q.cols(), out);
    Ok(())
}

/// Quantized scoring of every phrase into `out` (`T×B`, bias omitted).
pub fn quantized_scores_pass(x: &Matrix, retriever: &Retriever<'_>, tables: &mut Vec<ScoreTable>, out: &mut [f32]) -> Result<()> {
    let q = x.matmul(retriever.w_q())?;
    retriever.score_all(&q, tables, out)
}

/// Quantized top-`K` that first materializes every gathered partial score as a
/// `[T, B·|L|·G]` `f32` tensor, then reduces and ranks it. Returns the per-frame hits and the
/// number of gather slots allocated.
pub fn naive_topk(x: &Matrix, retriever: &Retriever<'_>, codes: &CodeMatrix, k: usize) -> Result<(Vec<Vec<u32>>, usize)> {
    let q = x.matmul(retriever.w_q())?;
    let cols = retriever.columns();
    let (g, nl) = (cols.groups(), cols.levels().len());
    let per_row = g * nl;
    let b = codes.rows();
    let slots = q.rows() * b * per_row;
    let mut gathered = vec![0f32; slots];
    for t in 0..q.rows() {
        let table = build_score_table(q.row(t), cols)?;
        let dst = &mut gathered[t * b * per_row..(t + 1) * b * per_row];
        for (j, row) in codes.words().chunks_exact(g).enumerate() {
            for (gi, &w) in row.iter().enumerate() {
                for i in 0..nl {
                    dst[j * per_row + gi * nl + i] = table.entry(gi, i, field(w, i) as usize) as f32;
                }
            }
        }
    }
    let mut scores = vec![0f32; q.rows() * b];
    for (s, chunk) in scores.iter_mut().zip(gathered.chunks_exact(per_row)) {
        *s = chunk.iter().sum();
    }
    drop(gathered);
    let mut hits = Vec::with_capacity(q.rows());
    for t in 0..q.rows() {
        let mut heap = TopK::new(k.min(b));
        for (j, &s) in scores[t * b..(t + 1) * b].iter().enumerate() {
            heap.push(j as u32, s as f64);
        }
        hits.push(heap.into_sorted().into_iter().map(|h| h.id).collect());
    }
    Ok((hits, slots))
}

/// Dense top-`K` including the key projection, so that the `B·D` key floats count toward the
/// measured memory.
pub fn dense_topk_with_keys(x: &Matrix, embeddings: &Matrix, proj: &ProjectionSet, k: usize) -> Result<Vec<Vec<u32>>> {
    let keys = embeddings.matmul_f32(proj.w_k())?;
    let b = keys.rows();
    let mut scores = vec![0f32; x.rows() * b];
    dense_scores_pass(x, proj.w_q(), keys.as_slice(), &mut scores)?;
    Ok((0..x.rows())
        .map(|t| {
            let mut heap = TopK::new(k.min(b));
            for (j, &s) in scores[t * b..(t + 1) * b].iter().enumerate() {
                heap.push(j as u32, s as f64);
            }
            heap.into_sorted().into_iter().map(|h| h.id).collect()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RuntimeRow {
    pub size: usize,
    pub algorithm: Algorithm,
    pub mean_ns: f64,
    pub stddev_ns: f64,
    pub median_ns: f64,
    pub trials: usize,
}

fn summarize(mut samples: Vec<f64>) -> (f64, f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    samples.sort_by(f64::total_cmp);
    let m = samples.len() / 2;
    let median = if samples.len() % 2 == 0 {
        (samples[m - 1] + samples[m]) / 2.0
    } else {
        samples[m]
    };
    (mean, var.sqrt(), median)
}

fn time_trials(trials: usize, warmup: usize, mut f: impl FnMut() -> Result<()>) -> Result<Vec<f64>> {
    for _ in 0..warmup {
        f()?;
    }
    let mut out = Vec::with_capacity(trials);
    for _ in 0..trials {
        let t0 = Instant::now();
        f()?;
        out.push(t0.elapsed().as_nanos() as f64);
    }
    Ok(out)
}

/// Times each algorithm at each catalogue size. Work that can be prepared offline (keys,
/// key columns, packed codes) happens before timing.
pub fn bench_runtime(
    base: &BaseCatalogue,
    sizes: &[usize],
    config: &BenchConfig,
    algorithms: &[Algorithm],
    trials: usize,
) -> Result<Vec<RuntimeRow>> {
    let mut rows = Vec::new();
    if trials == 0 {
        return Ok(rows);
    }
    let x = base.queries();
    let t = x.rows();
    for &size in sizes {
        if size == 0 {
            return input("catalogue size must be positive");
        }
        let model = memory_model(size as u64, config.dim as u64, config.groups as u64, &config.levels, 32);
        for &alg in algorithms {
            let needed = match alg {
                Algorithm::Dense => model.dense_bytes + (t * size * 4) as u64,
                Algorithm::Naive => (t * size * config.groups * config.levels.len() * 4) as u64,
                _ => model.quantized_bytes + (t * size * 4) as u64,
            };
            if needed > config.memory_budget {
                log::warn!("skipping {} at |B| = {size}: needs {needed} bytes", alg.name());
                continue;
            }
            let samples = match alg {
                Algorithm::Dense => {
                    let keys = base.keys(size)?;
                    let mut out = vec![0f32; t * size];
                    time_trials(trials, 2, || dense_scores_pass(x, base.proj.w_q(), &keys, &mut out))?
                }
                Algorithm::Quantized | Algorithm::Fused | Algorithm::Naive => {
                    let codes = base.codes(size);
                    let r = Retriever::from_parts(&codes, &base.params, &base.proj)?;
                    match alg {
                        Algorithm::Quantized => {
                            let mut out = vec![0f32; t * size];
                            let mut tables = Vec::new();
                            time_trials(trials, 2, || quantized_scores_pass(x, &r, &mut tables, &mut out))?
                        }
                        Algorithm::Fused => time_trials(trials, 2, || r.retrieve(x, config.top_k).map(drop))?,
                        _ => time_trials(trials, 1, || naive_topk(x, &r, &codes, config.top_k).map(drop))?,
                    }
                }
            };
            let (mean_ns, stddev_ns, median_ns) = summarize(samples);
            rows.push(RuntimeRow {
                size,
                algorithm: alg,
                mean_ns,
                stddev_ns,
                median_ns,
                trials,
            });
        }
    }
    Ok(rows)
}

pub fn write_runtime_csv<W: Write>(rows: &[RuntimeRow], mut out: W) -> Result<()> {
    writeln!(out, "size,algorithm,mean_ns,stddev_ns,median_ns,trials")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{:.0},{:.0},{:.0},{}",
            r.size,
            r.algorithm.name(),
            r.mean_ns,
            r.stddev_ns,
            r.median_ns,
            r.trials
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryRow {
    pub size: usize,
    pub algorithm: Algorithm,
    /// Peak heap growth during the call, or the analytical estimate when not measured.
    pub peak_bytes: u64,
    pub measured: bool,
    pub stats: Option<KernelStats>,
}

/// Peak auxiliary heap bytes of one retrieval call per algorithm. Inputs (packed codes,
/// unquantized embeddings) are prepared before measuring. Without an installed
/// [`CountingAlloc`], analytical estimates are reported with `measured = false`.
pub fn bench_memory(base: &BaseCatalogue, sizes: &[usize], config: &BenchConfig, algorithms: &[Algorithm]) -> Result<Vec<MemoryRow>> {
    let installed = tracker_installed();
    if !installed {
        log::warn!("allocation tracker not installed; reporting analytical estimates");
    }
    let x = base.queries();
    let t = x.rows() as u64;
    let mut rows = Vec::new();
    for &size in sizes {
        let b = size as u64;
        let per_row = (config.groups * config.levels.len()) as u64;
        let model = memory_model(b, config.dim as u64, config.groups as u64, &config.levels, 32);
        for &alg in algorithms {
            let estimate = match alg {
                Algorithm::Dense => model.dense_bytes + t * b * 4,
                Algorithm::Naive => t * b * per_row * 4 + t * b * 4,
                Algorithm::Quantized => t * b * 4 + t * model.table_bytes,
                Algorithm::Fused => t * model.table_bytes + t * config.top_k as u64 * 16,
            };
            let input_bytes = match alg {
                Algorithm::Dense => model.dense_bytes,
                _ => model.quantized_bytes,
            };
            if estimate + input_bytes > config.memory_budget {
                log::warn!("skipping {} at |B| = {size}: needs about {} bytes", alg.name(), estimate + input_bytes);
                continue;
            }
            if !installed {
                rows.push(MemoryRow { size, algorithm: alg, peak_bytes: estimate, measured: false, stats: None });
                continue;
            }
            let (peak, stats) = match alg {
                Algorithm::Dense => {
                    let emb = Matrix::from_vec(size, config.dim, base.embeddings(size))?;
                    let (r, peak) = measure_peak(|| dense_topk_with_keys(x, &emb, &base.proj, config.top_k));
                    r?;
                    (peak, None)
                }
                _ => {
                    let codes = base.codes(size);
                    let r = Retriever::from_parts(&codes, &base.params, &base.proj)?;
                    match alg {
                        Algorithm::Naive => {
                            let (res, peak) = measure_peak(|| naive_topk(x, &r, &codes, config.top_k));
                            res?;
                            (peak, None)
                        }
                        Algorithm::Quantized => {
                            let (res, peak) = measure_peak(|| {
                                let mut out = vec![0f32; x.rows() * size];
                                let mut tables = Vec::new();
                                quantized_scores_pass(x, &r, &mut tables, &mut out)
                            });
                            res?;
                            (peak, None)
                        }
                        _ => {
                            let (res, peak) = measure_peak(|| r.retrieve_with_stats(x, config.top_k));
                            (peak, Some(res?.1))
                        }
                    }
                }
            };
            rows.push(MemoryRow { size, algorithm: alg, peak_bytes: peak as u64, measured: true, stats });
        }
    }
    Ok(rows)
}

pub fn write_memory_csv<W: Write>(rows: &[MemoryRow], mut out: W) -> Result<()> {
    writeln!(out, "size,algorithm,peak_bytes,measured")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.size, r.algorithm.name(), r.peak_bytes, r.measured)?;
    }
    Ok(())
}

/// Least-squares slope of `y` against `x`.
pub fn slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}
