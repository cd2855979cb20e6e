//! `bisync`: data generation, training, evaluation and serving.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use bisync_core::corpus::{write_tsv, LanguagePair};
use bisync_core::decode::{quantize_int8, BeamConfig, InferenceModel, OutputFilter};
use bisync_core::eval::{self, BenchResult, SystemKind, TestSets};
use bisync_core::experiment::{build_test_sets, desk_train_config, learn_toy_bpe, toy_pairs, ModelShape};
use bisync_core::model::{average_checkpoints, TrainConfig, TransformerParams};
use bisync_core::protocol::{read_jsonl, write_jsonl, TaskKind, Triplet};
use bisync_core::subword::BpeModel;
use bisync_core::synthgen::{generate_dataset, GapFiller, ModelGapFiller, SynthConfig, TaskMix};
use bisync_service::{load_model, router, AppState, Engine};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "bisync", version, about = "Bilingual synchronization on a toy language pair")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a toy corpus, learn BPE and synthesize training/test triplets.
    GenData(GenData),
    /// Train a model on encoded triplets.
    Train(Train),
    /// Average checkpoints element-wise.
    Average {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
    },
    /// Convert a float32 checkpoint to int8 (per-row symmetric).
    Quantize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Task-wise BLEU and closeness TER on held-out triplets.
    Eval(Eval),
    /// Model size and batch-1 decoding speed.
    Bench(Bench),
    /// Serve the HTTP API.
    Serve(Serve),
}

#[derive(Clone, Copy, ValueEnum)]
enum Mix {
    /// Translation only (baseline).
    Trn,
    /// Translation and infilling (the gap-filling oracle).
    Oracle,
    /// All five tasks; needs `--oracle`.
    Uniform,
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    /// Generated sentence pairs, each used in both directions.
    #[arg(long, default_value_t = 200_000)]
    pairs: usize,
    /// Target registers; 1 makes translation deterministic.
    #[arg(long, default_value_t = 6)]
    registers: usize,
    #[arg(long, default_value_t = 500)]
    merges: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Reuse an existing vocabulary instead of learning one.
    #[arg(long)]
    bpe: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "trn")]
    mix: Mix,
    /// Gap-filling model used to synthesize DEL and SUB triplets.
    #[arg(long)]
    oracle: Option<PathBuf>,
    /// Synthesize from at most this many directed pairs.
    #[arg(long)]
    limit: Option<usize>,
    /// Held-out triplets per task (0 disables test data).
    #[arg(long, default_value_t = 0)]
    test_per_task: usize,
    #[arg(long, default_value_t = 7_777)]
    test_seed: u64,
}

#[derive(Args)]
struct Train {
    /// Triplets (JSON lines).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    bpe: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 4096)]
    tokens_per_batch: usize,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    lr_scale: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Start from these parameters instead of a random initialization.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long, default_value_t = 10)]
    keep_last: usize,
    #[arg(long, default_value_t = 128)]
    d_model: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 512)]
    d_ff: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum System {
    Bisync,
    Base,
}

#[derive(Args)]
struct DecodeOpts {
    #[arg(long, default_value_t = 3)]
    beam: usize,
    #[arg(long, default_value_t = 128)]
    max_len: usize,
}

impl DecodeOpts {
    fn config(&self) -> BeamConfig {
        BeamConfig { beam_size: self.beam, max_len: self.max_len, ..BeamConfig::default() }
    }
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    bpe: PathBuf,
    #[arg(long)]
    tests: PathBuf,
    #[arg(long, value_enum, default_value = "bisync")]
    system: System,
    #[command(flatten)]
    decode: DecodeOpts,
    /// Write the JSON report here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct Bench {
    /// One or more models (float32 or int8).
    #[arg(long, required = true, num_args = 1..)]
    model: Vec<PathBuf>,
    #[arg(long)]
    bpe: PathBuf,
    /// Sources are taken from the TRN triplets of this file.
    #[arg(long)]
    tests: PathBuf,
    #[arg(long, default_value_t = 100)]
    sentences: usize,
    #[arg(long, default_value_t = 3)]
    runs: usize,
    #[command(flatten)]
    decode: DecodeOpts,
}

#[derive(Args)]
struct Serve {
    #[arg(long, env = "BISYNC_MODEL")]
    model: Option<PathBuf>,
    #[arg(long, env = "BISYNC_BPE")]
    bpe: Option<PathBuf>,
    #[arg(long, env = "BISYNC_BIND", default_value = "127.0.0.1")]
    bind: String,
    #[arg(long, env = "BISYNC_PORT", default_value_t = 8080)]
    port: u16,
    /// Language pair as `a,b`; defaults to the vocabulary's languages.
    #[arg(long, env = "BISYNC_LANGUAGES")]
    languages: Option<String>,
    #[arg(long, env = "BISYNC_CORS_ORIGIN")]
    cors_origin: Option<String>,
    #[arg(long, env = "BISYNC_BEAM", default_value_t = 3)]
    beam: usize,
    #[arg(long, env = "BISYNC_MAX_LEN", default_value_t = 128)]
    max_len: usize,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": format!("{e:#}") }));
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Average { out, checkpoints } => {
            let params = checkpoints
                .iter()
                .map(|p| TransformerParams::<f32>::load(p).with_context(|| format!("loading {}", p.display())))
                .collect::<Result<Vec<_>>>()?;
            average_checkpoints(&params)?.save(&out)?;
            Ok(())
        }
        Command::Quantize { model, out } => {
            let params = TransformerParams::<f32>::load(&model).with_context(|| format!("loading {}", model.display()))?;
            let q = quantize_int8(&params)?;
            q.save(&out)?;
            let (before, after) = (std::fs::metadata(&model)?.len(), std::fs::metadata(&out)?.len());
            println!("{}", serde_json::json!({ "float32_bytes": before, "int8_bytes": after, "ratio": after as f64 / before as f64 }));
            Ok(())
        }
        Command::Eval(a) => evaluate(a),
        Command::Bench(a) => bench(a),
        Command::Serve(a) => serve(a),
    }
}

fn load_bpe(path: &Path) -> Result<BpeModel> {
    BpeModel::load(path).with_context(|| format!("loading vocabulary {}", path.display()))
}

fn load_inference(path: &Path) -> Result<InferenceModel> {
    load_model(path).with_context(|| format!("loading model {}", path.display()))
}

fn gen_data(a: GenData) -> Result<()> {
    std::fs::create_dir_all(&a.out)?;
    let pairs = toy_pairs(a.pairs, a.registers, a.seed)?;
    write_tsv(&a.out.join("corpus.tsv"), &pairs[..a.pairs])?;
    let bpe = match &a.bpe {
        Some(p) => load_bpe(p)?,
        None => {
            let bpe = learn_toy_bpe(&pairs, a.merges)?;
            bpe.save(&a.out.join("bpe.txt"))?;
            bpe
        }
    };
    let oracle_model = a.oracle.as_deref().map(load_inference).transpose()?;
    let filler = oracle_model.as_ref().map(|m| ModelGapFiller {
        model: m,
        bpe: &bpe,
        beam: BeamConfig { beam_size: 5, max_len: 16, ..BeamConfig::default() },
    });
    let oracle: Option<&dyn GapFiller> = filler.as_ref().map(|f| f as &dyn GapFiller);
    let task_mix = match a.mix {
        Mix::Trn => TaskMix::trn_only(),
        Mix::Oracle => TaskMix::oracle(),
        Mix::Uniform => TaskMix::uniform(),
    };
    let synth = SynthConfig { rng_seed: a.seed, task_mix, ..SynthConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let subset = &pairs[..a.limit.unwrap_or(pairs.len()).min(pairs.len())];
    let (triplets, stats) = generate_dataset(subset, oracle, &synth, &mut rng)?;
    write_jsonl(&a.out.join("train.jsonl"), &triplets)?;
    std::fs::write(a.out.join("synth_stats.json"), serde_json::to_string_pretty(&stats)?)?;
    if a.test_per_task > 0 {
        let tasks: Vec<TaskKind> =
            TaskKind::ALL.into_iter().filter(|t| oracle.is_some() || !matches!(t, TaskKind::Del | TaskKind::Sub)).collect();
        let tests = build_test_sets(a.test_per_task, a.registers, a.test_seed, &synth, oracle, &tasks)?;
        let flat: Vec<Triplet> = tests.sets.into_values().flatten().collect();
        write_jsonl(&a.out.join("test.jsonl"), &flat)?;
    }
    println!("{}", serde_json::json!({ "triplets": triplets.len(), "vocab_size": bpe.vocab_size(), "stats": stats }));
    Ok(())
}

fn train(a: Train) -> Result<()> {
    let bpe = load_bpe(&a.bpe)?;
    let triplets = read_jsonl(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
    let data = triplets.iter().map(|t| t.encode(&bpe)).collect::<bisync_core::Result<Vec<_>>>()?;
    let shape = ModelShape { d_model: a.d_model, n_layers: a.layers, n_heads: a.heads, d_ff: a.d_ff, ..ModelShape::default() };
    let model_cfg = shape.config(bpe.vocab_size());
    let base = desk_train_config(a.steps, a.seed);
    let cfg = TrainConfig {
        tokens_per_batch: a.tokens_per_batch,
        warmup_steps: a.warmup.unwrap_or(base.warmup_steps),
        lr_scale: a.lr_scale.unwrap_or(base.lr_scale),
        checkpoint_every: a.checkpoint_every.unwrap_or(base.checkpoint_every),
        keep_last: a.keep_last,
        checkpoint_dir: a.checkpoint_dir,
        ..base
    };
    let init = a.init.as_deref().map(TransformerParams::<f32>::load).transpose()?;
    let out = bisync_core::model::train(&model_cfg, &cfg, &data, init, &mut |r| {
        println!("{}", serde_json::to_string(r).expect("log records serialize"))
    })?;
    out.averaged.save(&a.out)?;
    Ok(())
}

fn read_tests(path: &Path) -> Result<TestSets> {
    let mut tests = TestSets::default();
    for t in read_jsonl(path).with_context(|| format!("reading {}", path.display()))? {
        tests.sets.entry(t.task).or_default().push(t);
    }
    Ok(tests)
}

fn evaluate(a: Eval) -> Result<()> {
    let bpe = load_bpe(&a.bpe)?;
    let model = load_inference(&a.model)?;
    let tests = read_tests(&a.tests)?;
    let system = match a.system {
        System::Bisync => SystemKind::BiSync,
        System::Base => SystemKind::Baseline,
    };
    // Only the tasks present in the file are decoded.
    let tasks: Vec<TaskKind> = tests.sets.keys().copied().collect();
    let beam = a.decode.config();
    let decodes = eval::decode_test_sets(&model, &bpe, &tests, &tasks, system, &beam)?;
    let report = eval::EvalReport {
        system: format!("{system:?}"),
        bleu: eval::bleu_from_decodes(&tests, &decodes)?,
        ter: eval::ter_from_decodes(&tests, &decodes)?,
        bench: None,
        config: serde_json::json!({ "model": a.model, "beam": beam, "system": system }),
    };
    report.validate(&tasks, system)?;
    if let Some(path) = &a.report {
        std::fs::write(path, serde_json::to_string_pretty(&report)?)?;
    }
    print!("{}", eval::format_tables(&[&report]));
    Ok(())
}

fn bench(a: Bench) -> Result<()> {
    let bpe = load_bpe(&a.bpe)?;
    let tests = read_tests(&a.tests)?;
    let sources = tests
        .get(TaskKind::Trn)?
        .iter()
        .take(a.sentences)
        .map(|t| t.encode(&bpe).map(|e| e.source_ids))
        .collect::<bisync_core::Result<Vec<_>>>()?;
    let mut rows: Vec<(String, BenchResult)> = Vec::new();
    for path in &a.model {
        let model = load_inference(path)?;
        let size = std::fs::metadata(path)?.len();
        let result = eval::benchmark(&model, size, &sources, &a.decode.config(), &OutputFilter::text(&bpe), a.runs)?;
        let name = format!("{} ({})", path.file_name().unwrap_or_default().to_string_lossy(), if model.is_quantized() { "int8" } else { "float32" });
        rows.push((name, result));
    }
    let table: Vec<(&str, &BenchResult)> = rows.iter().map(|(n, r)| (n.as_str(), r)).collect();
    print!("{}", eval::format_bench(&table));
    Ok(())
}

fn parse_languages(s: &str) -> Result<LanguagePair> {
    let Some((a, b)) = s.split_once(',') else {
        bail!("--languages expects `a,b`, got `{s}`");
    };
    Ok(LanguagePair::new(a.trim(), b.trim())?)
}

fn serve(a: Serve) -> Result<()> {
    let languages = a.languages.as_deref().map(parse_languages).transpose()?;
    let beam = BeamConfig { beam_size: a.beam, max_len: a.max_len, ..BeamConfig::default() };
    let mut state = match (&a.model, &a.bpe) {
        (Some(model), Some(bpe)) => AppState::with_engine(
            Engine::load(model, bpe, languages, beam).with_context(|| format!("loading {}", model.display()))?,
        ),
        (None, None) => {
            let Some(langs) = languages else {
                bail!("without a model, --languages is required");
            };
            tracing::warn!("starting without a model: synchronization requests will get 503");
            AppState::without_model(langs)
        }
        _ => bail!("--model and --bpe go together"),
    };
    state.cors_origin = a.cors_origin;
    let addr: SocketAddr = format!("{}:{}", a.bind, a.port).parse().context("invalid bind address")?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
        tracing::info!(%addr, "listening");
        axum::serve(listener, router(state)).await?;
        Ok(())
    })
}
