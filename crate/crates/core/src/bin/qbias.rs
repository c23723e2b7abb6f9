use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use qbias::attention::ProjectionSet;
use qbias::bench::{
    bench_memory, bench_runtime, configured_threads, memory_model, mib, write_memory_csv, write_runtime_csv,
    Algorithm, BaseCatalogue, BenchConfig, CountingAlloc, MemoryRow, RuntimeRow,
};
use qbias::catalogue::{
    build_index_with_report, collision_rate, BiasingCatalogue, EmbedderConfig, EnumerateMode, TrigramEmbedder,
    BACKOFF_ID,
};
use qbias::eval::{
    default_sweep_configs, dense_row, spearman, sweep, write_sweep_csv, BenchmarkConfig, QuantizerSpec,
    SweepOptions, SyntheticBenchmark,
};
use qbias::format::{index_to_bytes, load_embeddings, load_index, load_params, save_embeddings, save_params};
use qbias::fsq::{ensure_packable, FsqConfig, FsqParams, LevelSpec};
use qbias::linalg::Matrix;
use qbias::retrieval::{union_retrieved, Retriever};
use qbias::ste::{calibrate_input_scale, train, LossWeights, TrainConfig, TrainPair};
use qbias::Error;

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

#[derive(Parser)]
#[command(name = "qbias", version, about = "Quantized retrieval over contextual biasing catalogues")]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Embed a phrase file with the trigram embedder.
    Embed(EmbedArgs),
    /// Train FSQ parameters with straight-through gradients.
    TrainFsq(TrainArgs),
    /// Quantize and pack a phrase catalogue into an index file.
    BuildIndex(BuildArgs),
    /// Per-frame TopK retrieval of frames against an index.
    Retrieve(RetrieveArgs),
    /// Runtime and memory benchmarks of dense versus quantized scoring.
    Bench(BenchArgs),
    /// Recall sweep over quantizer configurations on the synthetic benchmark.
    Eval(EvalArgs),
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    phrases: PathBuf,
    #[arg(long, default_value_t = 256)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write whitespace-separated text instead of the binary format.
    #[arg(long)]
    text: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 256)]
    dim: usize,
    #[arg(long, default_value_t = 16)]
    groups: usize,
    /// Comma-separated level counts.
    #[arg(long, default_value = "8,5,5,5")]
    levels: String,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 1.0)]
    recon_weight: f64,
    #[arg(long, default_value_t = 1.0)]
    dot_weight: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Catalogue embeddings, one row per phrase.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Queries paired row by row with `--data`; defaults to the embeddings themselves.
    #[arg(long)]
    queries: Option<PathBuf>,
    /// Rescale `A_in` to this pre-activation deviation on the data before training.
    #[arg(long)]
    calibrate: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    /// Loss trace CSV; defaults to `<out>.loss.csv`.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProjectionKind {
    Identity,
    Random,
}

#[derive(Args)]
struct BuildArgs {
    /// One phrase per line, or JSON lines when the name ends in `.jsonl`.
    #[arg(long)]
    phrases: PathBuf,
    #[arg(long)]
    params: PathBuf,
    #[arg(long, default_value = "none")]
    enumerate: EnumerateMode,
    /// Embedder seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = ProjectionKind::Identity)]
    projection: ProjectionKind,
    #[arg(long, default_value_t = 0)]
    projection_seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    index: PathBuf,
    /// Frame embeddings, binary or text.
    #[arg(long)]
    frames: PathBuf,
    #[arg(long, default_value_t = 5)]
    topk: usize,
    /// Print the union of all frames' hits, back-off removed.
    #[arg(long)]
    union: bool,
    /// JSON lines instead of text.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// Catalogue sizes, e.g. `1e3,1e4,1e5`.
    #[arg(long, default_value = "1e3,1e4,1e5")]
    sizes: String,
    #[arg(long, default_value_t = 10)]
    trials: usize,
    #[arg(long, default_value_t = 16)]
    frames: usize,
    #[arg(long, default_value_t = 5)]
    topk: usize,
    #[arg(long, default_value_t = 256)]
    dim: usize,
    #[arg(long, default_value_t = 16)]
    groups: usize,
    #[arg(long, default_value = "8,5,5,5")]
    levels: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    dense: bool,
    #[arg(long)]
    quantized: bool,
    #[arg(long)]
    fused: bool,
    #[arg(long)]
    naive: bool,
    /// Also measure peak auxiliary memory.
    #[arg(long)]
    memory: bool,
    /// Runtime CSV; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Memory CSV; stdout when absent.
    #[arg(long)]
    memory_out: Option<PathBuf>,
    /// Assert the storage model values and the measured orderings.
    #[arg(long)]
    check: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// `default` for the G ∈ {1,2,4,8,16,32} × {[8,5,5,5], [7,5,5,5,5]} grid, or a list such
    /// as `16:8,5,5,5;2:8,5,5,5`.
    #[arg(long, default_value = "default")]
    sweep: String,
    #[arg(long, default_value_t = 5000)]
    phrases: usize,
    #[arg(long, default_value_t = 1000)]
    utterances: usize,
    #[arg(long, default_value_t = 8)]
    frames: usize,
    #[arg(long, default_value_t = 1.5)]
    noise: f32,
    #[arg(long, default_value_t = 256)]
    dim: usize,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "1,2,5,10,20")]
    ks: String,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Assert monotonicity in K, recall of G=16 against dense, and the collision/recall ranking.
    #[arg(long)]
    check: bool,
}

enum Failure {
    Usage(String),
    Lib(Error),
    Assertion(Vec<String>),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Lib(e.into())
    }
}

type CmdResult = Result<(), Failure>;

fn usage<T>(msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure::Usage(msg.into()))
}

fn data_error<T>(msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure::Lib(Error::Data(msg.into())))
}

/// Level lists must also fit the packed index format.
fn parse_levels(text: &str) -> Result<LevelSpec, Failure> {
    let bad = |e: Error| Failure::Usage(format!("invalid level list {text:?}: {e}"));
    let spec = LevelSpec::parse(text).map_err(bad)?;
    ensure_packable(&spec).map_err(bad)?;
    Ok(spec)
}

fn parse_list<T: std::str::FromStr>(text: &str, flag: &str) -> Result<Vec<T>, Failure> {
    text.split(',')
        .map(|t| t.trim().parse().map_err(|_| Failure::Usage(format!("invalid {flag} entry {t:?}"))))
        .collect()
}

fn parse_sizes(text: &str) -> Result<Vec<usize>, Failure> {
    parse_list::<f64>(text, "--sizes")?
        .into_iter()
        .map(|v| {
            if v >= 1.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
                Ok(v as usize)
            } else {
                usage(format!("catalogue size {v} must be a positive integer"))
            }
        })
        .collect()
}

fn parse_sweep(text: &str) -> Result<Vec<QuantizerSpec>, Failure> {
    if text == "default" {
        return Ok(default_sweep_configs());
    }
    text.split(';')
        .filter(|s| !s.trim().is_empty())
        .map(|item| {
            let (g, l) = item
                .split_once(':')
                .ok_or_else(|| Failure::Usage(format!("sweep entry {item:?} is not G:levels")))?;
            let groups = g
                .trim()
                .parse()
                .map_err(|_| Failure::Usage(format!("invalid group count {g:?}")))?;
            Ok(QuantizerSpec {
                groups,
                levels: parse_levels(l)?,
            })
        })
        .collect()
}

fn output(path: Option<&Path>) -> io::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn read_catalogue(path: &Path) -> Result<BiasingCatalogue, Failure> {
    let reader = BufReader::new(File::open(path)?);
    let cat = if path.extension().is_some_and(|e| e == "jsonl") {
        BiasingCatalogue::read_json_lines(reader)?
    } else {
        BiasingCatalogue::read_text(reader)?
    };
    Ok(cat)
}

fn cmd_embed(a: EmbedArgs) -> CmdResult {
    if a.dim == 0 {
        return usage("--dim must be positive");
    }
    let cat = read_catalogue(&a.phrases)?;
    let mut emb = TrigramEmbedder::new(EmbedderConfig::new(a.dim, a.seed));
    let rows = cat.entries()[1..]
        .iter()
        .map(|e| emb.embed(&e.text))
        .collect::<Result<Vec<_>, _>>()?;
    if rows.is_empty() {
        return data_error("phrase file is empty");
    }
    let m = Matrix::from_rows(&rows)?;
    if a.text {
        let mut out = BufWriter::new(File::create(&a.out)?);
        for r in m.iter_rows() {
            let line: Vec<String> = r.iter().map(f32::to_string).collect();
            writeln!(out, "{}", line.join(" "))?;
        }
        out.flush()?;
    } else {
        save_embeddings(&m, &a.out)?;
    }
    eprintln!("embedded {} phrases into {} dimensions", m.rows(), m.cols());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let levels = parse_levels(&a.levels)?;
    let cfg = FsqConfig::new(a.dim, a.groups, levels).map_err(|e| Failure::Usage(e.to_string()))?;
    let cap = cfg.capacity();
    println!(
        "dim={} groups={} levels={} sub_dim={} capacity_per_group={} capacity_log2={:.2}",
        cfg.dim(),
        cfg.groups(),
        cfg.levels(),
        cfg.sub_dim(),
        cap.per_group,
        cap.total_log2
    );
    let Some(data) = a.data.as_deref() else {
        return usage("--data is required");
    };
    let train_cfg = TrainConfig {
        learning_rate: a.lr,
        momentum: a.momentum,
        steps: a.steps,
        batch_size: a.batch,
        loss_weights: LossWeights {
            recon: a.recon_weight,
            dot: a.dot_weight,
        },
        seed: a.seed,
    };
    train_cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let c = load_embeddings(data)?;
    if c.cols() != a.dim {
        return data_error(format!("data has dimension {}, expected {}", c.cols(), a.dim));
    }
    let q = match a.queries.as_deref() {
        Some(p) => {
            let q = load_embeddings(p)?;
            if q.rows() != c.rows() || q.cols() != c.cols() {
                return data_error(format!(
                    "queries are {}x{}, data is {}x{}",
                    q.rows(),
                    q.cols(),
                    c.rows(),
                    c.cols()
                ));
            }
            q
        }
        None => c.clone(),
    };
    let pairs: Vec<TrainPair> = q
        .iter_rows()
        .zip(c.iter_rows())
        .map(|(q, c)| TrainPair {
            q: q.to_vec(),
            c: c.to_vec(),
        })
        .collect();
    let mut init = FsqParams::init(cfg, a.seed);
    if let Some(dev) = a.calibrate {
        let samples: Vec<Vec<f32>> = pairs.iter().map(|p| p.c.clone()).collect();
        calibrate_input_scale(&mut init, &samples, dev)?;
    }
    let w_k = Matrix::identity(a.dim);
    let outcome = train(&pairs, &train_cfg, init, &w_k)?;
    save_params(&outcome.params, &a.out)?;
    let csv = a.loss_csv.unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".loss.csv");
        p.into()
    });
    outcome.write_trace_csv(BufWriter::new(File::create(&csv)?))?;
    if let Some(&(step, l)) = outcome.trace.last() {
        println!("final loss {l:.6} at step {step}");
    }
    Ok(())
}

fn cmd_build(a: BuildArgs) -> CmdResult {
    let params = load_params(&a.params)?;
    let cfg = params.config().clone();
    let cat = read_catalogue(&a.phrases)?.enumerated(a.enumerate);
    let proj = match a.projection {
        ProjectionKind::Identity => ProjectionSet::identity(cfg.dim()),
        ProjectionKind::Random => ProjectionSet::random(cfg.dim(), cfg.groups(), a.projection_seed)?,
    };
    let (index, report) = build_index_with_report(&cat, &params, &proj, EmbedderConfig::new(cfg.dim(), a.seed))?;
    let bytes = index_to_bytes(&index)?;
    std::fs::write(&a.out, &bytes)?;
    println!("entries {}", index.len());
    println!("unique phrases {}", report.unique_phrases);
    println!(
        "capacity log2 {:.2}{}",
        report.capacity_log2,
        if report.capacity_exceeded { " (exceeded)" } else { "" }
    );
    println!("collision rate {:.6}", collision_rate(&index));
    println!("checksum {:08x}", crc32fast::hash(&bytes));
    Ok(())
}

fn cmd_retrieve(a: RetrieveArgs) -> CmdResult {
    if a.topk == 0 {
        return usage("--topk must be positive");
    }
    let index = load_index(&a.index)?;
    let frames = load_embeddings(&a.frames)?;
    if frames.cols() != index.params().config().dim() {
        return data_error(format!(
            "frames have dimension {}, index expects {}",
            frames.cols(),
            index.params().config().dim()
        ));
    }
    let result = Retriever::new(&index)?.retrieve(&frames, a.topk)?;
    let text = |id: u32| index.catalogue().phrase(id).unwrap_or_default();
    let mut out = output(None)?;
    if a.union {
        let ids = union_retrieved(&result, BACKOFF_ID);
        if a.json {
            let items: Vec<_> = ids.iter().map(|&id| json!({"id": id, "text": text(id)})).collect();
            writeln!(out, "{}", json!({ "union": items }))?;
        } else {
            for id in ids {
                writeln!(out, "{id}\t{}", text(id))?;
            }
        }
    } else {
        for (t, hits) in result.frames.iter().enumerate() {
            if a.json {
                let items: Vec<_> = hits
                    .iter()
                    .map(|h| json!({"id": h.id, "score": h.score, "text": text(h.id)}))
                    .collect();
                writeln!(out, "{}", json!({"frame": t, "hits": items}))?;
            } else {
                for (rank, h) in hits.iter().enumerate() {
                    let shown = if h.id == BACKOFF_ID { "<backoff>" } else { text(h.id) };
                    writeln!(out, "{t}\t{rank}\t{}\t{:.6}\t{shown}", h.id, h.score)?;
                }
            }
        }
    }
    out.flush()?;
    Ok(())
}

fn model_failures() -> Vec<String> {
    let levels = LevelSpec::new(vec![8, 5, 5, 5]).expect("static level spec");
    let m32 = memory_model(1_000_000, 256, 16, &levels, 32);
    let m8 = memory_model(1_000_000, 256, 16, &levels, 8);
    let mut failures = Vec::new();
    let checks = [
        (format!("{:.1}", mib(m32.dense_bytes)), "976.6", "dense 32-bit"),
        (format!("{:.1}", mib(m32.quantized_bytes)), "30.5", "quantized"),
        (format!("{:.0}", mib(m8.dense_bytes)), "244", "dense 8-bit"),
        (format!("{:.0}", mib(m8.quantized_bytes)), "31", "quantized, rounded"),
    ];
    for (got, want, what) in checks {
        if got != want {
            failures.push(format!("{what} model {got}MB, expected {want}MB"));
        }
    }
    failures
}

fn runtime_failures(rows: &[RuntimeRow]) -> Vec<String> {
    let mut failures = Vec::new();
    for r in rows.iter().filter(|r| r.algorithm == Algorithm::Quantized && r.size >= 100_000) {
        if let Some(d) = rows.iter().find(|d| d.algorithm == Algorithm::Dense && d.size == r.size) {
            let ratio = r.mean_ns / d.mean_ns;
            if ratio > 0.8 {
                log::warn!("|B| = {}: quantized/dense runtime {ratio:.3} above the 0.8 target", r.size);
            }
            if ratio >= 1.0 {
                failures.push(format!("|B| = {}: quantized is not faster than dense ({ratio:.3})", r.size));
            }
        }
    }
    failures
}

fn memory_failures(rows: &[MemoryRow]) -> Vec<String> {
    let mut failures = Vec::new();
    let Some(largest) = rows.iter().map(|r| r.size).max() else {
        return failures;
    };
    let peak = |alg| rows.iter().find(|r| r.size == largest && r.algorithm == alg).map(|r| r.peak_bytes);
    if let (Some(f), Some(n), Some(d)) = (peak(Algorithm::Fused), peak(Algorithm::Naive), peak(Algorithm::Dense)) {
        if !(f <= n && n <= d) {
            failures.push(format!("|B| = {largest}: expected fused {f} <= naive {n} <= dense {d}"));
        }
    }
    failures
}

fn cmd_bench(a: BenchArgs) -> CmdResult {
    let threads = configured_threads();
    if threads != 1 {
        log::warn!("QBIAS_THREADS={threads} ignored; benchmarks run on one thread");
    }
    let sizes = parse_sizes(&a.sizes)?;
    let levels = parse_levels(&a.levels)?;
    let mut algorithms: Vec<Algorithm> = [
        (a.dense, Algorithm::Dense),
        (a.quantized, Algorithm::Quantized),
        (a.fused, Algorithm::Fused),
        (a.naive, Algorithm::Naive),
    ]
    .into_iter()
    .filter_map(|(on, alg)| on.then_some(alg))
    .collect();
    if algorithms.is_empty() {
        algorithms = vec![Algorithm::Dense, Algorithm::Quantized, Algorithm::Fused, Algorithm::Naive];
    }
    let config = BenchConfig {
        dim: a.dim,
        groups: a.groups,
        levels,
        frames: a.frames,
        top_k: a.topk,
        seed: a.seed,
        ..BenchConfig::default()
    };
    FsqConfig::new(config.dim, config.groups, config.levels.clone()).map_err(|e| Failure::Usage(e.to_string()))?;
    let base = BaseCatalogue::new(&config)?;
    let runtime = bench_runtime(&base, &sizes, &config, &algorithms, a.trials)?;
    {
        let mut out = output(a.out.as_deref())?;
        write_runtime_csv(&runtime, &mut out)?;
        out.flush()?;
    }
    let mut failures = Vec::new();
    if a.memory {
        let mem_config = BenchConfig { frames: 2, ..config.clone() };
        let mem_base = BaseCatalogue::new(&mem_config)?;
        let memory = bench_memory(&mem_base, &sizes, &mem_config, &algorithms)?;
        let mut out = output(a.memory_out.as_deref())?;
        write_memory_csv(&memory, &mut out)?;
        out.flush()?;
        failures.extend(memory_failures(&memory));
    }
    if a.check {
        failures.extend(model_failures());
        failures.extend(runtime_failures(&runtime));
        if failures.is_empty() {
            eprintln!("check passed");
        } else {
            return Err(Failure::Assertion(failures));
        }
    }
    Ok(())
}

fn eval_failures(rows: &[qbias::eval::SweepRow], ks: &[usize]) -> Vec<String> {
    let mut failures = Vec::new();
    for r in rows {
        if r.evaluations.windows(2).any(|w| w[0].success_rate > w[1].success_rate) {
            failures.push(format!("{}: success rate decreases with K", r.label()));
        }
    }
    let k = if ks.contains(&5) { 5 } else { ks[0] };
    let dense = rows.iter().find(|r| r.quantizer.is_none()).and_then(|r| r.success_at(k));
    for r in rows.iter().filter(|r| r.quantizer.as_ref().is_some_and(|q| q.groups == 16)) {
        if let (Some(d), Some(s)) = (dense, r.success_at(k)) {
            if s < 0.95 * d {
                failures.push(format!("{}: success@{k} {s:.3} below 0.95 x dense {d:.3}", r.label()));
            }
        }
    }
    let quantized: Vec<_> = rows.iter().filter(|r| r.quantizer.is_some()).collect();
    if quantized.len() >= 3 {
        let coll: Vec<f64> = quantized.iter().map(|r| r.collision_rate).collect();
        let succ: Vec<f64> = quantized.iter().filter_map(|r| r.success_at(k)).collect();
        let rho = spearman(&coll, &succ);
        eprintln!("collision vs success@{k} rank correlation {rho:.3}");
        if rho.is_nan() || rho >= 0.0 {
            failures.push(format!("collision/success rank correlation {rho:.3} is not negative"));
        }
    }
    failures
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let specs = parse_sweep(&a.sweep)?;
    let ks: Vec<usize> = parse_list(&a.ks, "--ks")?;
    if ks.is_empty() || ks.contains(&0) {
        return usage("--ks needs positive values");
    }
    let bench_cfg = BenchmarkConfig {
        dim: a.dim,
        phrases: a.phrases,
        utterances: a.utterances,
        frames: a.frames,
        target_frames: BenchmarkConfig::default().target_frames.min(a.frames.max(1)),
        noise: a.noise,
        seed: a.seed,
        ..BenchmarkConfig::default()
    };
    bench_cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let options = SweepOptions {
        ks: ks.clone(),
        train: TrainConfig {
            steps: a.steps,
            learning_rate: a.lr,
            seed: a.seed,
            ..TrainConfig::default()
        },
        ..SweepOptions::default()
    };
    options.train.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let bench = SyntheticBenchmark::generate(&bench_cfg)?;
    let mut rows = vec![dense_row(&bench, &ks)?];
    rows.extend(sweep(&bench, &specs, &options)?);
    {
        let mut out = output(a.out.as_deref())?;
        write_sweep_csv(&rows, &mut out)?;
        out.flush()?;
    }
    if a.check {
        let failures = eval_failures(&rows, &ks);
        if !failures.is_empty() {
            return Err(Failure::Assertion(failures));
        }
        eprintln!("check passed");
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Input(_) | Error::Config(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Embed(a) => cmd_embed(a),
        Command::TrainFsq(a) => cmd_train(a),
        Command::BuildIndex(a) => cmd_build(a),
        Command::Retrieve(a) => cmd_retrieve(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Eval(a) => cmd_eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Assertion(failures)) => {
            for f in failures {
                eprintln!("check failed: {f}");
            }
            ExitCode::from(3)
        }
    }
}
