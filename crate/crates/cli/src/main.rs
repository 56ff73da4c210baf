//! Command-line front end: generation, toy training, drift evaluation,
//! cache compression and repository inspection.

mod config;

use clap::{Args, CommandFactory, Parser, Subcommand};
use egolcd::flow::{FlowSchedule, LossWeights};
use egolcd::memory::{sparse_to_bytes, MemoryRepository, RepoConfig};
use egolcd::model::{ModelConfig, ToyDiT, TrainMode};
use egolcd::narrative::{parse_script, HashEmbedder};
use egolcd::nrdp::{chunk_series, NRDPConfig, NRDPReport, Proxy, QualitySeries};
use egolcd::numerics::io::ByteReader;
use egolcd::pipeline::{
    generate_video, load_video, save_video, synthetic_dataset, train_toy, CallTrace, Example, GenerationConfig,
    TraceRecord, TraceWriter, TrainConfig, DEFAULT_NEGATIVE_PROMPT,
};
use egolcd::sparse_cache::{
    compress_layer, probe_error, select_probes, CompressionConfig, LayerKV, ProbeStrategy, ThresholdMode,
};
use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "egolcd", version, about = "Long-context video generation with sparse long-term memory")]
struct Cli {
    /// Flat key=value settings; flags given on the command line win.
    #[arg(long, global = true, env = "EGOLCD_CONFIG")]
    config: Option<PathBuf>,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate one clip per script segment, reading and growing a memory repository.
    Generate(GenerateArgs),
    /// Train the toy denoiser on a clip dataset or a synthetic one.
    TrainToy(TrainArgs),
    /// Drift penalty from a per-frame score table or built-in proxies on a video.
    EvalNrdp(NrdpArgs),
    /// Compress one layer cache with probe scoring.
    CompressCache(CompressArgs),
    /// Summarize a memory repository.
    InspectRepo(InspectArgs),
    /// Validate a narrative script and print it normalized.
    ParseScript(ParseArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    script: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Loaded if present, created otherwise; written back after generation.
    #[arg(long)]
    repo: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    steps: usize,
    #[arg(long, default_value_t = 5.0)]
    guidance: f64,
    #[arg(long, default_value_t = 5.0)]
    shift: f64,
    #[arg(long, default_value_t = 9)]
    prefix_frames: usize,
    #[arg(long, default_value_t = 3)]
    top_m: usize,
    #[arg(long, default_value_t = 0.9)]
    tau: f64,
    #[arg(long, default_value_t = 4)]
    probes: usize,
    #[arg(long, default_value = DEFAULT_NEGATIVE_PROMPT)]
    negative_prompt: String,
    /// JSON-lines run trace.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Directory holding `script.snp` and `clips.bin`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Use this many synthetic clips instead of (or, with --data, written to) a dataset directory.
    #[arg(long)]
    synthetic: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Start from this checkpoint instead of a fresh model.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Write the trained examples into this repository file.
    #[arg(long)]
    repo: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 1e-5)]
    lr: f64,
    #[arg(long, default_value_t = 200)]
    warmup: usize,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0.99)]
    ema: f64,
    #[arg(long, default_value_t = 0.1)]
    gamma: f64,
    #[arg(long, default_value_t = 0.1)]
    lambda_mae: f64,
    #[arg(long, default_value_t = 0.2)]
    p_video: f64,
    #[arg(long, default_value_t = 0.1)]
    p_text: f64,
    #[arg(long, default_value_t = 0.1)]
    p_kv: f64,
    #[arg(long, default_value_t = 1)]
    batch_size: usize,
    #[arg(long, default_value_t = 9)]
    prefix_frames: usize,
    #[arg(long, default_value_t = 3)]
    top_m: usize,
    #[arg(long, default_value_t = 0.9)]
    tau: f64,
    /// Train only the adapters.
    #[arg(long, default_value_t = false)]
    lora_only: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct NrdpArgs {
    /// CSV with columns frame_index,metric_name,score.
    #[arg(long, conflicts_with = "video", required_unless_present = "video")]
    scores: Option<PathBuf>,
    #[arg(long)]
    video: Option<PathBuf>,
    /// Comma-separated built-in proxies for --video.
    #[arg(long, default_value = "clarity,smoothness")]
    proxy: String,
    #[arg(long, default_value_t = 10)]
    chunks: usize,
    /// `linear` or comma-separated w_2..w_N.
    #[arg(long, default_value = "linear")]
    weights: String,
}

#[derive(Args, Debug)]
struct CompressArgs {
    /// Key tensor followed by value tensor, each [L × H × d].
    #[arg(long)]
    kv: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.9)]
    tau: f64,
    /// Number of probe queries, taken from the keys.
    #[arg(long, default_value_t = 4)]
    probes: usize,
    /// `recent` or `stride`.
    #[arg(long, default_value = "recent")]
    strategy: String,
    /// `normalized` or `raw`.
    #[arg(long, default_value = "normalized")]
    mode: String,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    repo: PathBuf,
}

#[derive(Args, Debug)]
struct ParseArgs {
    script: PathBuf,
}

enum Failure {
    Domain(egolcd::Error),
    Other(String),
}

impl From<egolcd::Error> for Failure {
    fn from(e: egolcd::Error) -> Self {
        Failure::Domain(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Domain(e.into())
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let argv: Vec<OsString> = std::env::args_os().collect();
    let cli = match resolve(&argv) {
        Ok(cli) => cli,
        Err(Failure::Other(msg)) => {
            eprintln!("error [cli]: {msg}");
            return ExitCode::from(1);
        }
        Err(Failure::Domain(e)) => {
            eprintln!("error [{}]: {e}", e.module());
            return ExitCode::from(1);
        }
    };
    env_logger::Builder::new().parse_filters(&cli.log_level).init();
    let resolved = format!("{:?}", cli.command);
    log::info!("resolved configuration: {resolved}");
    let result = match cli.command {
        Cmd::Generate(a) => generate(a, resolved),
        Cmd::TrainToy(a) => train(a, resolved),
        Cmd::EvalNrdp(a) => eval_nrdp(a),
        Cmd::CompressCache(a) => compress_cache(a),
        Cmd::InspectRepo(a) => inspect_repo(a),
        Cmd::ParseScript(a) => parse(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Domain(e)) => {
            eprintln!("error [{}]: {e}", e.module());
            ExitCode::from(1)
        }
        Err(Failure::Other(msg)) => {
            eprintln!("error [cli]: {msg}");
            ExitCode::from(1)
        }
    }
}

/// Parse argv, fold in the settings file, and parse again. Usage errors
/// exit here with clap's status (2, or 0 for --help).
fn resolve(argv: &[OsString]) -> Result<Cli, Failure> {
    let first = Cli::try_parse_from(argv).unwrap_or_else(|e| e.exit());
    let Some(path) = first.config.as_deref() else {
        return Ok(first);
    };
    let settings = config::load_config(path).map_err(Failure::Other)?;
    let merged = config::merge_into_argv(&Cli::command(), argv, &settings).unwrap_or_else(|e| e.exit());
    Ok(Cli::try_parse_from(merged).unwrap_or_else(|e| e.exit()))
}

fn config_record(resolved: String) -> TraceRecord {
    TraceRecord::Config { config: serde_json::Value::String(resolved) }
}

fn write_trace(path: &Path, records: &[TraceRecord]) -> Outcome {
    let mut w = TraceWriter::new(BufWriter::new(File::create(path)?));
    w.record_all(records)?;
    Ok(())
}

fn generate(a: GenerateArgs, resolved: String) -> Outcome {
    let model = ToyDiT::load(&a.ckpt)?;
    let mut repo = if a.repo.exists() {
        MemoryRepository::load(&a.repo)?
    } else {
        MemoryRepository::new(RepoConfig {
            embed_dim: model.config.embed_dim,
            layer_count: model.config.layer_count,
            max_entries: None,
        })?
    };
    let script = parse_script(&std::fs::read_to_string(&a.script)?)?;
    let cfg = GenerationConfig {
        clips: None,
        schedule: FlowSchedule { sample_steps: a.steps, guidance_scale: a.guidance, shift: a.shift, ..Default::default() },
        prefix_frames: a.prefix_frames,
        top_m: a.top_m,
        compression: CompressionConfig { tau: a.tau, probe_count: a.probes, ..Default::default() },
        seed: a.seed,
        negative_prompt: a.negative_prompt,
    };
    let mut trace = CallTrace::default();
    trace.records.push(config_record(resolved));
    let embedder = HashEmbedder::new(model.config.embed_dim);
    let clips = generate_video(&script, &model, &mut repo, &embedder, &cfg, &mut trace)?;
    let video: Vec<_> = clips.iter().map(|c| c.clip.clone()).collect();
    save_video(&a.out, &video)?;
    repo.save(&a.repo)?;
    if let Some(p) = &a.trace {
        write_trace(p, &trace.records)?;
    }
    println!("generated {} clips -> {}; repository holds {} entries", video.len(), a.out.display(), repo.len());
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<Vec<Example>, Failure> {
    let script = parse_script(&std::fs::read_to_string(dir.join("script.snp"))?)?;
    let clips = load_video(dir.join("clips.bin"))?;
    if clips.len() != script.len() {
        return Err(egolcd::Error::Config(format!("{} clips for {} script segments", clips.len(), script.len())).into());
    }
    Ok(script.segments().iter().cloned().zip(clips).map(|(segment, clip)| Example { video: 0, segment, clip }).collect())
}

fn save_dataset(dir: &Path, data: &[Example]) -> Outcome {
    std::fs::create_dir_all(dir)?;
    let mut text = String::new();
    for ex in data {
        text.push_str(&format!("[{}s-{}s] {}\n", ex.segment.start, ex.segment.end, ex.segment.prompt));
    }
    std::fs::write(dir.join("script.snp"), text)?;
    save_video(dir.join("clips.bin"), &data.iter().map(|e| e.clip.clone()).collect::<Vec<_>>())?;
    Ok(())
}

fn train(a: TrainArgs, resolved: String) -> Outcome {
    let base = match &a.init {
        Some(p) => Some(ToyDiT::load(p)?),
        None => None,
    };
    let data = match (a.synthetic, &a.data) {
        (Some(n), dir) => {
            let cfg = base.as_ref().map(|m| m.config).unwrap_or_default();
            let data = synthetic_dataset(&cfg, n, a.seed);
            if let Some(d) = dir {
                save_dataset(d, &data)?;
            }
            data
        }
        (None, Some(dir)) => load_dataset(dir)?,
        (None, None) => return Err(Failure::Other("pass --data, --synthetic, or both".into())),
    };
    let model = match base {
        Some(m) => m,
        None => {
            let latent = data[0].clip.shape();
            let cfg = ModelConfig { latent: [latent[0], latent[1], latent[2], latent[3]], ..Default::default() };
            ToyDiT::init(cfg, a.seed)?
        }
    };
    let tc = TrainConfig {
        steps: a.steps,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        warmup_steps: a.warmup,
        weight_decay: a.weight_decay,
        ema_decay: a.ema,
        p_video: a.p_video,
        p_text: a.p_text,
        p_kv: a.p_kv,
        weights: LossWeights { lambda_mae: a.lambda_mae, gamma: a.gamma },
        prefix_frames: a.prefix_frames,
        top_m: a.top_m,
        compression: CompressionConfig { tau: a.tau, ..Default::default() },
        mode: if a.lora_only { TrainMode::LoraOnly } else { TrainMode::Full },
        consolidate: a.repo.is_some(),
        seed: a.seed,
        ..Default::default()
    };
    let mut repo = MemoryRepository::new(RepoConfig {
        embed_dim: model.config.embed_dim,
        layer_count: model.config.layer_count,
        max_entries: None,
    })?;
    let embedder = HashEmbedder::new(model.config.embed_dim);
    let mut out = train_toy(&data, model, &mut repo, &embedder, &tc)?;
    out.ema.save(&a.out)?;
    if let Some(p) = &a.repo {
        repo.save(p)?;
    }
    if let Some(p) = &a.trace {
        out.trace.records.insert(0, config_record(resolved));
        write_trace(p, &out.trace.records)?;
    }
    let (first, last) = out.smoothed_ends(20);
    println!("trained {} steps on {} clips: smoothed loss {first:.5} -> {last:.5}; saved {}", a.steps, data.len(), a.out.display());
    Ok(())
}

fn nrdp_config(chunks: usize, weights: &str) -> Result<NRDPConfig, Failure> {
    if weights.trim() == "linear" {
        return Ok(NRDPConfig::linear(chunks)?);
    }
    let w = weights
        .split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|e| Failure::Other(format!("weight {s:?}: {e}"))))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(NRDPConfig::new(chunks, w)?)
}

fn read_score_table(path: &Path) -> Result<BTreeMap<String, Vec<(usize, f64)>>, Failure> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| Failure::Other(e.to_string()))?;
    let mut table: BTreeMap<String, Vec<(usize, f64)>> = BTreeMap::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Failure::Other(e.to_string()))?;
        let bad = |msg: String| Failure::Domain(egolcd::Error::Parse { line: i + 2, msg });
        if rec.len() != 3 {
            return Err(bad(format!("expected 3 columns, found {}", rec.len())));
        }
        let frame = rec[0].parse::<usize>().map_err(|e| bad(format!("frame_index: {e}")))?;
        let score = rec[2].parse::<f64>().map_err(|e| bad(format!("score: {e}")))?;
        table.entry(rec[1].to_string()).or_default().push((frame, score));
    }
    Ok(table)
}

fn eval_nrdp(a: NrdpArgs) -> Outcome {
    let config = nrdp_config(a.chunks, &a.weights)?;
    let report = if let Some(path) = &a.scores {
        let series = read_score_table(path)?
            .into_iter()
            .map(|(name, mut rows)| {
                rows.sort_by_key(|r| r.0);
                let frames: Vec<f64> = rows.iter().map(|r| r.1).collect();
                chunk_series(&name, &frames, a.chunks)
            })
            .collect::<Result<Vec<QualitySeries>, _>>()?;
        NRDPReport::evaluate(series, config)?
    } else {
        let video = load_video(a.video.as_ref().expect("clap requires --scores or --video"))?;
        let proxies = a.proxy.split(',').map(Proxy::parse).collect::<Result<Vec<_>, _>>()?;
        NRDPReport::from_video(&video, &proxies, config)?
    };
    print!("{report}");
    Ok(())
}

fn compress_cache(a: CompressArgs) -> Outcome {
    let bytes = std::fs::read(&a.kv)?;
    let mut r = ByteReader::new(&bytes);
    let kv = LayerKV::new(r.tensor()?, r.tensor()?)?;
    if !r.is_at_end() {
        r.corrupt::<()>("trailing bytes after the value tensor")?;
    }
    let strategy = match a.strategy.as_str() {
        "recent" => ProbeStrategy::Recent,
        "stride" => ProbeStrategy::Stride,
        s => return Err(egolcd::Error::Config(format!("unknown probe strategy {s:?}")).into()),
    };
    let mode = match a.mode.as_str() {
        "normalized" => ThresholdMode::Normalized,
        "raw" => ThresholdMode::Raw,
        s => return Err(egolcd::Error::Config(format!("unknown threshold mode {s:?}")).into()),
    };
    let probes = select_probes(kv.keys(), a.probes, strategy)?;
    let (cache, _) = compress_layer(0, &kv, &probes, a.tau, mode)?;
    let err = probe_error(&probes, &kv, &cache)?;
    std::fs::write(&a.out, sparse_to_bytes(&cache)?)?;
    println!(
        "retained {} of {} tokens (ratio {:.4}); probe error {err:.6e}; wrote {}",
        cache.len(),
        kv.len(),
        cache.retained_ratio(),
        a.out.display()
    );
    Ok(())
}

fn inspect_repo(a: InspectArgs) -> Outcome {
    let repo = MemoryRepository::load(&a.repo)?;
    let s = repo.summary();
    let c = repo.config();
    println!("entries: {}", s.entry_count);
    println!("embedding width: {}; layers: {}", c.embed_dim, c.layer_count);
    for (l, hist) in s.retained_histogram.iter().enumerate() {
        let cells: Vec<String> = hist.iter().map(|(k, v)| format!("{k}:{v}")).collect();
        println!("layer {l} retained tokens (count:entries): {}", cells.join(" "));
    }
    for (id, norm) in &s.embedding_norms {
        println!("entry {id}: embedding norm {norm:.6}");
    }
    Ok(())
}

fn parse(a: ParseArgs) -> Outcome {
    let script = parse_script(&std::fs::read_to_string(&a.script)?)?;
    println!("{} segments", script.len());
    print!("{script}");
    Ok(())
}
