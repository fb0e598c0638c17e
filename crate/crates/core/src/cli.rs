//! Command-line surface. Exit codes: 0 success, 1 usage, 2 data/config
//! error, 3 numeric failure (divergence or non-finite values).

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::analysis;
use crate::checkpoint::{load_checkpoint, Checkpoint};
use crate::data::{self, Corpus, CorpusKind};
use crate::encoder::{ResidualMode, Variant};
use crate::error::{Error, Result};
use crate::model::{preset, Model, ModelConfig};
use crate::train::{self, TrainConfig};

pub const GRADCHECK_TOL: f64 = 1e-4;
pub const THREADS_ENV: &str = "RAFL_THREADS";

#[derive(Parser)]
#[command(name = "rafl", version, about = "Residual-attention transformer encoder workbench")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model with the MLM objective and write checkpoints + metrics.
    Pretrain(PretrainArgs),
    /// Masked-LM loss and accuracy of a checkpoint on a corpus split.
    Eval(EvalArgs),
    /// Attention entropy and adjacent-layer JSD exports for a checkpoint.
    Analyze(AnalyzeArgs),
    /// Finite-difference validation of every parameter gradient.
    Gradcheck(GradcheckArgs),
    /// Train all three variants across seeds and rank them.
    Compare(CompareArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Architecture preset: tiny, desk, small, base, large, xlarge.
    #[arg(long)]
    preset: Option<String>,
    /// key = value file; flags override it, it overrides the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = ["post_ln", "pre_ln", "realformer"])]
    variant: Option<String>,
    #[arg(long, value_parser = ["none", "sum", "running_mean"])]
    residual_mode: Option<String>,
    /// Fold the padding bias into the propagated attention scores (ablation).
    #[arg(long)]
    residual_includes_mask: bool,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    warmup: Option<u64>,
    /// Peak learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mask_rate: Option<f64>,
    /// copy[:SIZE], bigram[:SIZE], or a path to a text file (one sentence per
    /// line).
    #[arg(long)]
    corpus: Option<String>,
    /// Vocabulary cap for file corpora.
    #[arg(long)]
    vocab_cap: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Evaluate the dev split every N steps (0 = final step only).
    #[arg(long)]
    eval_every: Option<u64>,
    /// Write a checkpoint every N steps (0 = final only).
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Resume from a training checkpoint; its model config wins over flags.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "dev", value_parser = ["train", "dev"])]
    split: String,
    #[arg(long)]
    corpus: Option<String>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    mask_rate: Option<f64>,
    /// Seed for the evaluation masking stream; defaults to the checkpoint's.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    vocab_cap: Option<usize>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: Option<String>,
    /// How many examples to analyze (dev split first, then the rest).
    #[arg(long, default_value_t = 64)]
    examples: usize,
    #[arg(long)]
    vocab_cap: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Seed indices per variant.
    #[arg(long, default_value_t = 3)]
    seeds: u64,
}

/// Parse argv and run. Never panics on bad input; returns the process exit
/// code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.cmd {
        Cmd::Pretrain(args) => cmd_pretrain(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Analyze(args) => cmd_analyze(args),
        Cmd::Gradcheck(args) => cmd_gradcheck(args),
        Cmd::Compare(args) => cmd_compare(args),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

// ---------------------------------------------------------------------------
// configuration resolution: preset < config file < flags

#[derive(Clone, Debug)]
struct Settings {
    preset: String,
    cfg: ModelConfig,
    tc: TrainConfig,
    corpus: String,
    vocab_cap: Option<usize>,
    seeds: u64,
    out_dir: PathBuf,
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("config key {key}: cannot parse {value:?}")))
}

fn read_config_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("{}:{}: expected key = value", path.display(), lineno + 1))
        })?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

fn resolve(common: &CommonArgs, default_preset: &str) -> Result<Settings> {
    let file = match &common.config {
        Some(path) => read_config_file(path)?,
        None => BTreeMap::new(),
    };
    let known = [
        "preset", "variant", "residual_mode", "residual_includes_mask", "layers", "hidden",
        "heads", "intermediate", "vocab", "seq_len", "dropout", "seed", "steps", "warmup", "lr",
        "batch", "mask_rate", "eval_every", "checkpoint_every", "corpus", "vocab_cap", "seeds",
        "out_dir",
    ];
    for key in file.keys() {
        if !known.contains(&key.as_str()) {
            return Err(Error::Config(format!("unknown config key {key:?}")));
        }
    }
    let preset_name = common
        .preset
        .clone()
        .or_else(|| file.get("preset").cloned())
        .unwrap_or_else(|| default_preset.to_string());
    let mut cfg = preset(&preset_name)?;
    let mut residual_mode_set = false;

    // Config file layer.
    for (key, value) in &file {
        match key.as_str() {
            "preset" => {}
            "variant" => {
                cfg.variant = Variant::parse(value)
                    .ok_or_else(|| Error::Config(format!("unknown variant {value:?}")))?;
            }
            "residual_mode" => {
                cfg.residual_mode = ResidualMode::parse(value)
                    .ok_or_else(|| Error::Config(format!("unknown residual mode {value:?}")))?;
                residual_mode_set = true;
            }
            "residual_includes_mask" => cfg.residual_includes_mask = parse_num(key, value)?,
            "layers" => cfg.layers = parse_num(key, value)?,
            "hidden" => cfg.hidden = parse_num(key, value)?,
            "heads" => cfg.heads = parse_num(key, value)?,
            "intermediate" => cfg.intermediate = parse_num(key, value)?,
            "vocab" => cfg.vocab_size = parse_num(key, value)?,
            "seq_len" => cfg.max_seq_len = parse_num(key, value)?,
            "dropout" => cfg.dropout_rate = parse_num(key, value)?,
            "seed" => cfg.seed = parse_num(key, value)?,
            _ => {}
        }
    }
    if file.contains_key("layers") && !residual_mode_set {
        cfg.residual_mode = crate::model::default_residual_mode(cfg.layers);
    }

    // Flag layer.
    if let Some(v) = &common.variant {
        cfg.variant = Variant::parse(v).ok_or_else(|| Error::Config(format!("unknown variant {v:?}")))?;
    }
    if let Some(m) = &common.residual_mode {
        cfg.residual_mode =
            ResidualMode::parse(m).ok_or_else(|| Error::Config(format!("unknown residual mode {m:?}")))?;
    }
    if common.residual_includes_mask {
        cfg.residual_includes_mask = true;
    }
    if let Some(s) = common.seq_len {
        cfg.max_seq_len = s;
    }
    if let Some(d) = common.dropout {
        cfg.dropout_rate = d;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;

    let mut tc = TrainConfig::desk_defaults(cfg.seed);
    for (key, value) in &file {
        match key.as_str() {
            "steps" => tc.steps = parse_num(key, value)?,
            "warmup" => tc.warmup = parse_num(key, value)?,
            "lr" => tc.peak_lr = parse_num(key, value)?,
            "batch" => tc.batch_size = parse_num(key, value)?,
            "mask_rate" => tc.mask_rate = parse_num(key, value)?,
            "eval_every" => tc.eval_every = parse_num(key, value)?,
            "checkpoint_every" => tc.checkpoint_every = parse_num(key, value)?,
            _ => {}
        }
    }
    if let Some(s) = common.steps {
        tc.steps = s;
    }
    if let Some(w) = common.warmup {
        tc.warmup = w;
    }
    if let Some(lr) = common.lr {
        tc.peak_lr = lr;
    }
    if let Some(b) = common.batch {
        tc.batch_size = b;
    }
    if let Some(m) = common.mask_rate {
        tc.mask_rate = m;
    }
    tc.data_seed = cfg.seed;
    tc.eval_seed = cfg.seed;
    if tc.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }

    let corpus = common
        .corpus
        .clone()
        .or_else(|| file.get("corpus").cloned())
        .unwrap_or_else(|| "copy:256".to_string());
    let vocab_cap = common.vocab_cap.or_else(|| {
        file.get("vocab_cap").and_then(|v| v.parse().ok())
    });
    let seeds = match file.get("seeds") {
        Some(v) => parse_num("seeds", v)?,
        None => 3,
    };
    let out_dir = common
        .out_dir
        .clone()
        .or_else(|| file.get("out_dir").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("rafl_out"));
    Ok(Settings { preset: preset_name, cfg, tc, corpus, vocab_cap, seeds, out_dir })
}

fn config_echo(s: &Settings) -> String {
    let cfg = &s.cfg;
    let tc = &s.tc;
    format!(
        "preset = {}\nvariant = {}\nresidual_mode = {}\nresidual_includes_mask = {}\n\
         layers = {}\nhidden = {}\nheads = {}\nintermediate = {}\nvocab = {}\nseq_len = {}\n\
         dropout = {}\nseed = {}\nsteps = {}\nwarmup = {}\nlr = {}\nbatch = {}\n\
         mask_rate = {}\neval_every = {}\ncheckpoint_every = {}\ncorpus = {}\nseeds = {}\n",
        s.preset,
        cfg.variant.name(),
        cfg.residual_mode.name(),
        cfg.residual_includes_mask,
        cfg.layers,
        cfg.hidden,
        cfg.heads,
        cfg.intermediate,
        cfg.vocab_size,
        cfg.max_seq_len,
        cfg.dropout_rate,
        cfg.seed,
        tc.steps,
        tc.warmup,
        tc.peak_lr,
        tc.batch_size,
        tc.mask_rate,
        tc.eval_every,
        tc.checkpoint_every,
        s.corpus,
        s.seeds,
    )
}

/// Build the corpus named by a `--corpus` spec. Synthetic corpora are seeded
/// by the model seed so a run is reproducible from its config alone.
fn build_corpus(spec: &str, cfg: &ModelConfig, vocab_cap: Option<usize>) -> Result<Corpus> {
    let (kind_str, size_str) = match spec.split_once(':') {
        Some((k, s)) => (k, Some(s)),
        None => (spec, None),
    };
    if let Some(kind) = CorpusKind::parse(kind_str) {
        let size = match size_str {
            Some(s) => s
                .parse()
                .map_err(|_| Error::Config(format!("corpus spec {spec:?}: bad size")))?,
            None => 256,
        };
        return data::synth_corpus(kind, size, cfg.seed, cfg.vocab_size, cfg.max_seq_len);
    }
    let cap = vocab_cap.unwrap_or(cfg.vocab_size);
    if cap > cfg.vocab_size {
        return Err(Error::Config(format!(
            "vocab cap {cap} exceeds the model vocabulary {}",
            cfg.vocab_size
        )));
    }
    let (corpus, _vocab) = data::file_corpus(Path::new(spec), cap, cfg.max_seq_len)?;
    Ok(corpus)
}

fn write_out_dir_prelude(s: &Settings) -> Result<()> {
    fs::create_dir_all(&s.out_dir).map_err(Error::io(&s.out_dir))?;
    let path = s.out_dir.join("config.txt");
    fs::write(&path, config_echo(s)).map_err(Error::io(&path))
}

fn load_for_inference(path: &Path) -> Result<(Checkpoint, Model)> {
    let ckpt = load_checkpoint(path)?;
    ckpt.validate_for(&ckpt.config)?;
    let model = Model::from_parts(ckpt.config.clone(), ckpt.params.clone());
    Ok((ckpt, model))
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(data::hex_digest(hasher))
}

// ---------------------------------------------------------------------------
// subcommands

fn cmd_pretrain(args: PretrainArgs) -> Result<i32> {
    let mut settings = resolve(&args.common, "desk")?;
    if let Some(e) = args.eval_every {
        settings.tc.eval_every = e;
    }
    if let Some(c) = args.checkpoint_every {
        settings.tc.checkpoint_every = c;
    }
    let mut state = match &args.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let state = train::state_from_checkpoint(ckpt, &settings.tc)?;
            settings.cfg = state.model.cfg.clone();
            state
        }
        None => train::init_train_state(&settings.cfg, &settings.tc)?,
    };
    write_out_dir_prelude(&settings)?;
    let corpus = build_corpus(&settings.corpus, &settings.cfg, settings.vocab_cap)?;
    let report = train::train(&mut state, &corpus, &settings.tc, Some(&settings.out_dir))?;
    train::write_metrics(&settings.out_dir.join("metrics.csv"), &report.metrics)?;
    train::make_training_checkpoint(&state).save(&settings.out_dir.join("final.rafl"))?;
    if let Some(last) = report.metrics.last() {
        println!("step {} train_loss {}", last.step, last.train_loss);
    }
    if let Some(dev) = report.final_dev {
        println!("dev_loss {} dev_mlm_acc {}", dev.loss, dev.accuracy);
    }
    if report.aborted_steps > 0 {
        eprintln!("{} steps skipped on non-finite gradients", report.aborted_steps);
    }
    if let Some(at) = report.diverged_at {
        eprintln!("divergence flag tripped at step {at}");
        return Ok(3);
    }
    Ok(0)
}

fn cmd_eval(args: EvalArgs) -> Result<i32> {
    let (ckpt, model) = load_for_inference(&args.checkpoint)?;
    let spec = args.corpus.unwrap_or_else(|| "copy:256".to_string());
    let corpus = build_corpus(&spec, &ckpt.config, args.vocab_cap)?;
    if corpus.vocab_size > ckpt.config.vocab_size {
        return Err(Error::Config(format!(
            "corpus vocab {} exceeds model vocab {}",
            corpus.vocab_size, ckpt.config.vocab_size
        )));
    }
    let indices = match args.split.as_str() {
        "train" => &corpus.train,
        _ => &corpus.dev,
    };
    let report = train::evaluate(
        &model,
        &corpus,
        indices,
        args.batch.unwrap_or(4),
        args.mask_rate.unwrap_or(train::DEFAULT_MASK_RATE),
        args.seed.unwrap_or(ckpt.config.seed),
    )?;
    println!(
        "split {} examples {} masked {} loss {} mlm_acc {}",
        args.split,
        indices.len(),
        report.masked,
        report.loss,
        report.accuracy
    );
    Ok(0)
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<i32> {
    let (ckpt, model) = load_for_inference(&args.checkpoint)?;
    let spec = args.corpus.unwrap_or_else(|| "copy:256".to_string());
    let corpus = build_corpus(&spec, &ckpt.config, args.vocab_cap)?;
    let out_dir = args.out_dir.unwrap_or_else(|| PathBuf::from("rafl_out"));
    fs::create_dir_all(&out_dir).map_err(Error::io(&out_dir))?;
    let mut order: Vec<usize> = corpus.dev.clone();
    order.extend(corpus.train.iter().copied());
    let examples: Vec<data::Example> = order
        .into_iter()
        .take(args.examples)
        .map(|i| corpus.examples[i].clone())
        .collect();
    if examples.is_empty() {
        return Err(Error::Data("no examples to analyze".into()));
    }
    let ckpt_hash = sha256_file(&args.checkpoint)?;

    let entropy_records = analysis::collect_entropy(&model, &examples)?;
    let entropy_summaries = analysis::summarize(&entropy_records, analysis::Metric::Entropy);
    analysis::export_records(&out_dir.join("entropy.csv"), &entropy_records)?;
    analysis::export_summaries(&out_dir.join("entropy_summary.csv"), &entropy_summaries)?;
    analysis::write_sidecar(
        &out_dir.join("entropy_meta.json"),
        &ckpt_hash,
        examples.len(),
        analysis::Metric::Entropy,
    )?;

    let jsd_records = analysis::collect_jsd(&model, &examples)?;
    let jsd_summaries = analysis::summarize(&jsd_records, analysis::Metric::Jsd);
    analysis::export_records(&out_dir.join("jsd.csv"), &jsd_records)?;
    analysis::export_summaries(&out_dir.join("jsd_summary.csv"), &jsd_summaries)?;
    analysis::write_sidecar(&out_dir.join("jsd_meta.json"), &ckpt_hash, examples.len(), analysis::Metric::Jsd)?;

    println!(
        "examples {} entropy_records {} jsd_records {}",
        examples.len(),
        entropy_records.len(),
        jsd_records.len()
    );
    Ok(0)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<i32> {
    let settings = resolve(&args.common, "tiny")?;
    let mut cfg = settings.cfg;
    cfg.dropout_rate = 0.0;
    let batch = train::gradcheck_batch(&cfg, 2)?;
    let report = train::gradcheck(&cfg, &batch, 1e-5)?;
    println!(
        "max rel err {} at {} ({} elements over {} parameters)",
        report.max_rel_err, report.worst_path, report.elements_checked, report.params_checked
    );
    if report.max_rel_err < GRADCHECK_TOL {
        Ok(0)
    } else {
        eprintln!("gradient check failed tolerance {GRADCHECK_TOL}");
        Ok(3)
    }
}

fn cmd_compare(args: CompareArgs) -> Result<i32> {
    let mut settings = resolve(&args.common, "desk")?;
    settings.seeds = args.seeds;
    write_out_dir_prelude(&settings)?;
    let corpus = build_corpus(&settings.corpus, &settings.cfg, settings.vocab_cap)?;
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .parse()
            .map_err(|_| Error::Config(format!("{THREADS_ENV}={v:?} is not a thread count")))?,
        Err(_) => 1,
    };
    let cells_dir = settings.out_dir.join("cells");
    let outcome =
        train::compare(&settings.cfg, &settings.tc, &corpus, settings.seeds, threads, Some(&cells_dir))?;
    train::write_compare_csv(&settings.out_dir.join("compare.csv"), &outcome.rows)?;
    train::write_summary_csv(&settings.out_dir.join("summary.csv"), &outcome.summaries)?;
    for s in &outcome.summaries {
        println!(
            "{}: median dev_loss {} median dev_mlm_acc {} diverged {}/{}",
            s.variant.name(),
            s.median_dev_loss,
            s.median_dev_acc,
            s.diverged_runs,
            settings.seeds
        );
    }
    println!("winner: {}", outcome.winner.name());
    Ok(0)
}
