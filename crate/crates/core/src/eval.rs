//! Retrieval success rate, retrieved-set statistics and recall-vs-configuration sweeps over a
//! seeded synthetic benchmark.

use std::collections::BTreeSet;
use std::io::Write;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::ProjectionSet;
use crate::catalogue::{
    build_index, collision_rate, synthetic_phrases, BiasingCatalogue, EmbedderConfig, PackedIndex, TrigramEmbedder,
    BACKOFF_ID,
};
use crate::error::{input, Error, Result};
use crate::fsq::{FsqConfig, FsqParams, LevelSpec};
use crate::linalg::Matrix;
use crate::retrieval::{union_retrieved, DenseRetriever, RetrievalResult, Retriever};
use crate::ste::{calibrate_input_scale, train, TrainConfig, TrainPair};

/// A synthetic utterance: `T×D` frames and the catalogue id of the phrase it contains.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceCase {
    frames: Matrix,
    target: u32,
}

impl UtteranceCase {
    pub fn new(frames: Matrix, target: u32, catalogue: &BiasingCatalogue) -> Result<Self> {
        if frames.rows() == 0 {
            return input("an utterance needs at least one frame");
        }
        if target == BACKOFF_ID || target as usize >= catalogue.len() {
            return input(format!("target {target} is not a catalogue phrase"));
        }
        Ok(Self { frames, target })
    }

    pub fn frames(&self) -> &Matrix {
        &self.frames
    }

    pub fn target(&self) -> u32 {
        self.target
    }
}

/// Anything that returns per-frame TopK lists over a catalogue.
pub trait PhraseRetriever {
    fn retrieve(&self, x: &Matrix, k: usize) -> Result<RetrievalResult>;
}

impl PhraseRetriever for Retriever<'_> {
    fn retrieve(&self, x: &Matrix, k: usize) -> Result<RetrievalResult> {
        Retriever::retrieve(self, x, k)
    }
}

impl PhraseRetriever for DenseRetriever {
    fn retrieve(&self, x: &Matrix, k: usize) -> Result<RetrievalResult> {
        DenseRetriever::retrieve(self, x, k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievedStats {
    pub mean: f64,
    pub max: usize,
    pub stddev: f64,
}

impl RetrievedStats {
    fn of(sizes: &[usize]) -> Self {
        let n = sizes.len().max(1) as f64;
        let mean = sizes.iter().sum::<usize>() as f64 / n;
        let var = sizes.iter().map(|&s| (s as f64 - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            max: sizes.iter().copied().max().unwrap_or(0),
            stddev: var.sqrt(),
        }
    }
}

/// Success rate and retrieved-set statistics at one `K`.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub k: usize,
    pub success_rate: f64,
    pub retrieved: RetrievedStats,
}

fn check_cases(cases: &[UtteranceCase]) -> Result<()> {
    if cases.is_empty() {
        return input("no utterances to evaluate");
    }
    Ok(())
}

/// Union over frames of the first `k` hits, back-off removed.
fn prefix_union(result: &RetrievalResult, k: usize) -> BTreeSet<u32> {
    result
        .frames
        .iter()
        .flat_map(|hits| hits.iter().take(k).map(|h| h.id))
        .filter(|&id| id != BACKOFF_ID)
        .collect()
}

/// The retrieved set `S_K` of every case.
pub fn retrieved_sets<R: PhraseRetriever + ?Sized>(
    cases: &[UtteranceCase],
    retriever: &R,
    k: usize,
) -> Result<Vec<BTreeSet<u32>>> {
    check_cases(cases)?;
    cases
        .iter()
        .map(|c| retriever.retrieve(&c.frames, k).map(|r| union_retrieved(&r, BACKOFF_ID)))
        .collect()
}

/// Fraction of cases whose target is in `S_K`.
pub fn success_rate<R: PhraseRetriever + ?Sized>(cases: &[UtteranceCase], retriever: &R, k: usize) -> Result<f64> {
    let sets = retrieved_sets(cases, retriever, k)?;
    let hits = cases.iter().zip(&sets).filter(|(c, s)| s.contains(&c.target)).count();
    Ok(hits as f64 / cases.len() as f64)
}

pub fn retrieved_stats<R: PhraseRetriever + ?Sized>(
    cases: &[UtteranceCase],
    retriever: &R,
    k: usize,
) -> Result<RetrievedStats> {
    let sizes: Vec<usize> = retrieved_sets(cases, retriever, k)?.iter().map(BTreeSet::len).collect();
    Ok(RetrievedStats::of(&sizes))
}

/// Evaluates every `K` in `ks` from a single retrieval at the largest `K`; shorter lists are
/// prefixes of longer ones because the hit order is total.
pub fn evaluate<R: PhraseRetriever + ?Sized>(
    cases: &[UtteranceCase],
    retriever: &R,
    ks: &[usize],
) -> Result<Vec<Evaluation>> {
    check_cases(cases)?;
    if ks.contains(&0) {
        return input("K must be positive");
    }
    let Some(&k_max) = ks.iter().max() else {
        return Ok(Vec::new());
    };
    let mut successes = vec![0usize; ks.len()];
    let mut sizes = vec![Vec::with_capacity(cases.len()); ks.len()];
    for case in cases {
        let result = retriever.retrieve(&case.frames, k_max)?;
        for (j, &k) in ks.iter().enumerate() {
            let set = prefix_union(&result, k);
            successes[j] += set.contains(&case.target) as usize;
            sizes[j].push(set.len());
        }
    }
    Ok(ks
        .iter()
        .enumerate()
        .map(|(j, &k)| Evaluation {
            k,
            success_rate: successes[j] as f64 / cases.len() as f64,
            retrieved: RetrievedStats::of(&sizes[j]),
        })
        .collect())
}

/// Shape of the synthetic recall benchmark.
///
/// Each utterance holds `target_frames` consecutive frames of the form
/// `key(target) + distractor_weight·key(distractor) + noise`, where the distractor is a phrase
/// similar to the target; the remaining frames are `key(back-off) + noise`. Noise is isotropic
/// Gaussian with expected norm `noise`; keys have unit norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkConfig {
    pub dim: usize,
    pub phrases: usize,
    pub utterances: usize,
    pub frames: usize,
    pub target_frames: usize,
    pub distractor_weight: f32,
    pub noise: f32,
    /// Candidates examined when picking the most similar distractor.
    pub distractor_pool: usize,
    pub train_pairs: usize,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            dim: 256,
            phrases: 5000,
            utterances: 1000,
            frames: 8,
            target_frames: 3,
            distractor_weight: 0.5,
            noise: 1.5,
            distractor_pool: 32,
            train_pairs: 4000,
            seed: 0,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.phrases < 2 || self.utterances == 0 {
            return Err(Error::Config("benchmark needs a dimension, two phrases and one utterance".into()));
        }
        if self.target_frames == 0 || self.target_frames > self.frames {
            return Err(Error::Config(format!(
                "{} target frames do not fit in {} frames",
                self.target_frames, self.frames
            )));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0 && self.distractor_weight.is_finite()) {
            return Err(Error::Config("noise and distractor weight must be finite".into()));
        }
        if self.distractor_pool == 0 {
            return Err(Error::Config("distractor pool must be non-empty".into()));
        }
        Ok(())
    }
}

/// Catalogue, embeddings, utterances and training pairs of one seeded benchmark.
#[derive(Debug, Clone)]
pub struct SyntheticBenchmark {
    pub config: BenchmarkConfig,
    pub catalogue: BiasingCatalogue,
    pub embedder: EmbedderConfig,
    /// Row `j` embeds catalogue entry `j`, back-off included.
    pub embeddings: Matrix,
    pub cases: Vec<UtteranceCase>,
    pub train_pairs: Vec<TrainPair>,
}

struct FrameSampler<'a> {
    embeddings: &'a Matrix,
    weight: f32,
    noise: Normal<f32>,
    pool: usize,
}

impl FrameSampler<'_> {
    fn distractor(&self, target: usize, rng: &mut ChaCha8Rng) -> usize {
        let n = self.embeddings.rows();
        let t = self.embeddings.row(target);
        (0..self.pool)
            .map(|_| {
                let mut j = rng.random_range(1..n - 1);
                if j >= target {
                    j += 1;
                }
                j
            })
            .max_by(|&a, &b| {
                let sa = crate::linalg::dot(t, self.embeddings.row(a));
                let sb = crate::linalg::dot(t, self.embeddings.row(b));
                sa.total_cmp(&sb).then(b.cmp(&a))
            })
            .unwrap_or(target)
    }

    fn noisy(&self, base: &[f32], rng: &mut ChaCha8Rng) -> Vec<f32> {
        base.iter().map(|&v| v + self.noise.sample(rng)).collect()
    }

    fn target_frame(&self, target: usize, distractor: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
        let mixed: Vec<f32> = self
            .embeddings
            .row(target)
            .iter()
            .zip(self.embeddings.row(distractor))
            .map(|(&t, &d)| t + self.weight * d)
            .collect();
        self.noisy(&mixed, rng)
    }
}

impl SyntheticBenchmark {
    pub fn generate(config: &BenchmarkConfig) -> Result<Self> {
        config.validate()?;
        let catalogue = BiasingCatalogue::from_phrases(synthetic_phrases(config.phrases, config.seed))?;
        let embedder = EmbedderConfig::new(config.dim, config.seed);
        let mut emb = TrigramEmbedder::new(embedder);
        let rows = catalogue
            .entries()
            .iter()
            .map(|e| emb.embed_entry(&e.text))
            .collect::<Result<Vec<_>>>()?;
        let embeddings = Matrix::from_rows(&rows)?;
        let sigma = config.noise / (config.dim as f32).sqrt();
        let sampler = FrameSampler {
            embeddings: &embeddings,
            weight: config.distractor_weight,
            noise: Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?,
            pool: config.distractor_pool,
        };
        let n = catalogue.len();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7e57_ca5e);
        let backoff = embeddings.row(BACKOFF_ID as usize);

        let mut cases = Vec::with_capacity(config.utterances);
        for _ in 0..config.utterances {
            let target = rng.random_range(1..n);
            let distractor = sampler.distractor(target, &mut rng);
            let start = rng.random_range(0..=config.frames - config.target_frames);
            let frames = (0..config.frames)
                .map(|f| {
                    if (start..start + config.target_frames).contains(&f) {
                        sampler.target_frame(target, distractor, &mut rng)
                    } else {
                        sampler.noisy(backoff, &mut rng)
                    }
                })
                .collect::<Vec<_>>();
            cases.push(UtteranceCase::new(Matrix::from_rows(&frames)?, target as u32, &catalogue)?);
        }

        let ids: Vec<usize> = (1..n).collect();
        let mut train_pairs = Vec::with_capacity(config.train_pairs);
        for _ in 0..config.train_pairs {
            let target = *ids.choose(&mut rng).expect("catalogue has phrases");
            let distractor = sampler.distractor(target, &mut rng);
            train_pairs.push(TrainPair {
                q: sampler.target_frame(target, distractor, &mut rng),
                c: embeddings.row(target).to_vec(),
            });
        }
        Ok(Self {
            config: config.clone(),
            catalogue,
            embedder,
            embeddings,
            cases,
            train_pairs,
        })
    }

    pub fn projections(&self) -> ProjectionSet {
        ProjectionSet::identity(self.config.dim)
    }

    pub fn dense_retriever(&self) -> Result<DenseRetriever> {
        DenseRetriever::new(&self.embeddings, &self.projections())
    }

    pub fn build_index(&self, params: &FsqParams) -> Result<PackedIndex> {
        build_index(&self.catalogue, params, &self.projections(), self.embedder)
    }
}

/// Quantizer trained for one sweep point.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizerSpec {
    pub groups: usize,
    pub levels: LevelSpec,
}

impl std::fmt::Display for QuantizerSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "G={} L={}", self.groups, self.levels)
    }
}

/// Group counts 1 to 32 for both `[8,5,5,5]` and `[7,5,5,5,5]`.
pub fn default_sweep_configs() -> Vec<QuantizerSpec> {
    let specs = [vec![8, 5, 5, 5], vec![7, 5, 5, 5, 5]];
    specs
        .iter()
        .flat_map(|l| {
            [1, 2, 4, 8, 16, 32].into_iter().map(move |g| QuantizerSpec {
                groups: g,
                levels: LevelSpec::new(l.clone()).expect("static level spec"),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOptions {
    pub ks: Vec<usize>,
    pub train: TrainConfig,
    /// Pre-activation deviation targeted by the input calibration before training.
    pub input_deviation: f64,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            ks: vec![1, 2, 5, 10, 20],
            train: TrainConfig::default(),
            input_deviation: 1.0,
        }
    }
}

/// Calibrated and STE-trained quantizer on the benchmark's training pairs.
pub fn train_quantizer(bench: &SyntheticBenchmark, spec: &QuantizerSpec, options: &SweepOptions) -> Result<FsqParams> {
    let cfg = FsqConfig::new(bench.config.dim, spec.groups, spec.levels.clone())?;
    let mut params = FsqParams::init(cfg, options.train.seed);
    let samples: Vec<Vec<f32>> = bench.train_pairs.iter().map(|p| p.c.clone()).collect();
    calibrate_input_scale(&mut params, &samples, options.input_deviation)?;
    let w_k = bench.projections().w_k().clone();
    Ok(train(&bench.train_pairs, &options.train, params, &w_k)?.params)
}

/// One line of the sweep report. `quantizer` is `None` for the dense baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub quantizer: Option<QuantizerSpec>,
    pub collision_rate: f64,
    pub evaluations: Vec<Evaluation>,
}

impl SweepRow {
    pub fn label(&self) -> String {
        self.quantizer.as_ref().map_or_else(|| "dense".to_string(), ToString::to_string)
    }

    pub fn success_at(&self, k: usize) -> Option<f64> {
        self.evaluations.iter().find(|e| e.k == k).map(|e| e.success_rate)
    }
}

pub fn dense_row(bench: &SyntheticBenchmark, ks: &[usize]) -> Result<SweepRow> {
    let dense = bench.dense_retriever()?;
    Ok(SweepRow {
        quantizer: None,
        collision_rate: 0.0,
        evaluations: evaluate(&bench.cases, &dense, ks)?,
    })
}

pub fn quantized_row(bench: &SyntheticBenchmark, spec: &QuantizerSpec, params: &FsqParams, ks: &[usize]) -> Result<SweepRow> {
    let index = bench.build_index(params)?;
    let retriever = Retriever::new(&index)?;
    Ok(SweepRow {
        quantizer: Some(spec.clone()),
        collision_rate: collision_rate(&index),
        evaluations: evaluate(&bench.cases, &retriever, ks)?,
    })
}

/// Trains and evaluates one quantizer per spec.
pub fn sweep(bench: &SyntheticBenchmark, specs: &[QuantizerSpec], options: &SweepOptions) -> Result<Vec<SweepRow>> {
    specs
        .iter()
        .map(|spec| {
            log::info!("sweep: training {spec}");
            let params = train_quantizer(bench, spec, options)?;
            quantized_row(bench, spec, &params, &options.ks)
        })
        .collect()
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut out: W) -> Result<()> {
    let ks: Vec<usize> = rows.first().map(|r| r.evaluations.iter().map(|e| e.k).collect()).unwrap_or_default();
    write!(out, "config,groups,levels,collision_rate")?;
    for k in &ks {
        write!(out, ",success@{k}")?;
    }
    for k in &ks {
        write!(out, ",mean_retrieved@{k},max_retrieved@{k}")?;
    }
    writeln!(out)?;
    for r in rows {
        let (groups, levels) = match &r.quantizer {
            Some(q) => (q.groups.to_string(), q.levels.to_string()),
            None => (String::new(), String::new()),
        };
        write!(out, "\"{}\",{groups},\"{levels}\",{:.6}", r.label(), r.collision_rate)?;
        for e in &r.evaluations {
            write!(out, ",{:.6}", e.success_rate)?;
        }
        for e in &r.evaluations {
            write!(out, ",{:.4},{}", e.retrieved.mean, e.retrieved.max)?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Ranks starting at 1, ties sharing their average rank.
fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0f64; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation; `NaN` when either side is constant or fewer than two points.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len(), "spearman needs paired samples");
    if xs.len() < 2 {
        return f64::NAN;
    }
    let (rx, ry) = (average_ranks(xs), average_ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0f64, 0f64, 0f64);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}
