//! The `seqtrans` command line.

use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{parse_cutoffs, RunConfig};
use crate::data::{
    dataset_stats, leave_one_out_split, load_split, ncore_filter, parse_canonical, parse_movielens, save_split,
    write_canonical, FilterConfig, FilterMode, GenreRule, Split, SplitDataset,
};
use crate::error::{Error, Result};
use crate::eval::{category_accuracy, evaluate, evaluate_categories, EvalProtocol, EvalReport, ModelScorer, Negatives};
use crate::models::Variant;
use crate::synth::{bayes_oracle, generate, SynthSpec};
use crate::train::{
    fit, gradcheck, history_csv, load_checkpoint, save_checkpoint, Checkpoint, GradcheckOptions,
};

pub const SPLIT_FILE: &str = "split.txt";
pub const STATS_FILE: &str = "stats.txt";
pub const HISTORY_FILE: &str = "history.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const CATEGORY_JSON: &str = "category_metrics.json";
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "seqtrans", version, about = "Category-aware sequential recommendation with seq2seq translation models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Filter a raw log, split it leave-one-out and write the split cache.
    Prepare(PrepareArgs),
    /// Train one variant and write its checkpoint and history.
    Train(TrainArgs),
    /// Rank held-out events with a trained checkpoint.
    Evaluate(EvaluateArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic Markov-chain log and its Bayes oracle report.
    Synth(SynthArgs),
    /// Train and test once per value of `lambda` or `L`.
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Format {
    Canonical,
    Movielens,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Fixpoint,
    SinglePass,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum GenreArg {
    First,
    Random,
}

#[derive(Args, Debug)]
pub struct PrepareArgs {
    /// Canonical TSV file, or a directory holding `ratings.dat` and `movies.dat`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value = "canonical")]
    pub format: Format,
    #[arg(long, default_value_t = 5)]
    pub item_min: usize,
    #[arg(long, default_value_t = 5)]
    pub user_min: usize,
    #[arg(long, default_value_t = 0)]
    pub user_min_records: usize,
    #[arg(long, value_enum, default_value = "fixpoint")]
    pub mode: ModeArg,
    #[arg(long, value_enum, default_value = "first")]
    pub genre: GenreArg,
    #[arg(long, default_value_t = 0)]
    pub genre_seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Settings shared by commands that train.
#[derive(Args, Debug, Clone)]
pub struct TrainOverrides {
    /// `key = value` config file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long = "L")]
    pub window: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Validation negatives per user (`full` ranks the whole catalog).
    #[arg(long)]
    pub negatives: Option<String>,
    /// Extra `key=value` settings, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl TrainOverrides {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let mut put = |k: &str, v: Option<String>| v.map_or(Ok(()), |v| cfg.set(k, &v));
        put("variant", self.variant.map(|v| v.tag().to_string()))?;
        put("lambda", self.lambda.map(|v| format!("{v:?}")))?;
        put("L", self.window.map(|v| v.to_string()))?;
        put("seed", self.seed.map(|v| v.to_string()))?;
        put("d", self.d.map(|v| v.to_string()))?;
        put("max_epochs", self.epochs.map(|v| v.to_string()))?;
        put("patience", self.patience.map(|v| v.to_string()))?;
        put("learning_rate", self.lr.map(|v| format!("{v:?}")))?;
        put("batch_size", self.batch_size.map(|v| v.to_string()))?;
        put("dropout", self.dropout.map(|v| format!("{v:?}")))?;
        put("negatives", self.negatives.clone())?;
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Split cache file, or a directory containing `split.txt`.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub overrides: TrainOverrides,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint file, or a run directory containing `checkpoint.bin`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Negatives per user, or `full`.
    #[arg(long, default_value = "500")]
    pub negatives: String,
    #[arg(long, default_value = "1,5,10,15,20")]
    pub cutoffs: String,
    #[arg(long, default_value_t = 0)]
    pub eval_seed: u64,
    /// Refuse the checkpoint unless it holds this variant.
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Keep the validation event out of test histories.
    #[arg(long)]
    pub exclude_valid: bool,
    /// Output directory; defaults to the checkpoint's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// One variant tag, or `all`.
    #[arg(long, default_value = "all")]
    pub variant: String,
    #[arg(long, default_value_t = 17)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long = "K", default_value_t = 8)]
    pub k: usize,
    #[arg(long = "M", default_value_t = 25)]
    pub m: usize,
    #[arg(long = "T", default_value_t = 30)]
    pub t: usize,
    #[arg(long, default_value_t = 2000)]
    pub users: usize,
    /// Deterministic cycle `c → c+1`.
    #[arg(long, conflicts_with_all = ["matrix_file", "noisy"])]
    pub det_cycle: bool,
    /// Cycle that advances with this probability and otherwise jumps uniformly.
    #[arg(long)]
    pub noisy: Option<f64>,
    /// Whitespace-separated K×K transition matrix, one row per line.
    #[arg(long)]
    pub matrix_file: Option<PathBuf>,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Negatives for the oracle report, or `full`.
    #[arg(long, default_value = "full")]
    pub negatives: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SweepParam {
    Lambda,
    #[value(name = "L")]
    L,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub param: SweepParam,
    /// Comma-separated values.
    #[arg(long)]
    pub values: String,
    #[command(flatten)]
    pub overrides: TrainOverrides,
    #[arg(long)]
    pub out: PathBuf,
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn split_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(SPLIT_FILE)
    } else {
        p.to_path_buf()
    }
}

fn checkpoint_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(CHECKPOINT_FILE)
    } else {
        p.to_path_buf()
    }
}

fn parse_negatives(v: &str) -> Result<Negatives> {
    if v == "full" {
        return Ok(Negatives::FullCatalog);
    }
    v.parse()
        .map(Negatives::Sampled)
        .map_err(|_| Error::Config(format!("bad negatives `{v}`")))
}

fn filter_line(mode: &str, ds: &SplitDataset) -> String {
    let s = dataset_stats(ds);
    format!(
        "{mode}\t{}\t{}\t{}\t{}\t{:.2}%\n",
        s.users,
        s.items,
        s.interactions,
        s.categories,
        s.sparsity * 100.0
    )
}

pub fn cmd_prepare(a: &PrepareArgs) -> Result<String> {
    let (events, note) = match a.format {
        Format::Canonical => (parse_canonical(open(&a.input)?)?, String::new()),
        Format::Movielens => {
            let ratings = a.input.join("ratings.dat");
            let movies = a.input.join("movies.dat");
            let rule = match a.genre {
                GenreArg::First => GenreRule::First,
                GenreArg::Random => GenreRule::RandomSeeded(a.genre_seed),
            };
            let (ev, report) = parse_movielens(open(&ratings)?, open(&movies)?, rule)?;
            let note = format!(
                "ratings read: {}; dropped for unknown movie: {}\n",
                report.ratings, report.dropped_unknown_movie
            );
            (ev, note)
        }
    };
    mkdir(&a.out)?;
    let base = FilterConfig {
        item_min: a.item_min,
        user_min: a.user_min,
        user_min_records: a.user_min_records,
        mode: FilterMode::Fixpoint,
    };
    let fix = leave_one_out_split(&ncore_filter(&events, &base));
    let single = leave_one_out_split(&ncore_filter(&events, &FilterConfig { mode: FilterMode::SinglePass, ..base }));
    let chosen = match a.mode {
        ModeArg::Fixpoint => &fix,
        ModeArg::SinglePass => &single,
    };
    save_split(&chosen.0, &a.out.join(SPLIT_FILE))?;

    let mut report = note;
    report.push_str(&format!("events read: {}\n", events.len()));
    report.push_str("mode\t#user\t#item\t#interaction\t#category\tsparsity\n");
    report.push_str(&filter_line("fixpoint", &fix.0));
    report.push_str(&filter_line("single-pass", &single.0));
    if dataset_stats(&fix.0) == dataset_stats(&single.0) {
        report.push_str("fixpoint and single-pass filtering agree\n");
    } else {
        report.push_str("fixpoint and single-pass filtering differ\n");
    }
    report.push_str(&format!(
        "users dropped with fewer than 3 events: {}\n",
        chosen.1.dropped_short_users
    ));
    report.push_str(&format!("catalog digest: {}\n", chosen.0.catalog.digest()));
    write(&a.out.join(STATS_FILE), &report)?;
    let resolved = format!(
        "input = {}\nformat = {:?}\nitem_min = {}\nuser_min = {}\nuser_min_records = {}\nmode = {:?}\ngenre = {:?}\ngenre_seed = {}\n",
        a.input.display(),
        a.format,
        a.item_min,
        a.user_min,
        a.user_min_records,
        a.mode,
        a.genre,
        a.genre_seed
    );
    write(&a.out.join(crate::config::RESOLVED_FILE), &resolved.to_lowercase())?;
    Ok(report)
}

/// Train, then write `config.resolved`, `history.csv` and `checkpoint.bin` into `out`.
pub fn run_training(ds: &SplitDataset, cfg: &RunConfig, out: &Path, verbose: bool) -> Result<Checkpoint> {
    mkdir(out)?;
    cfg.write_resolved(out)?;
    let mut log = |r: &crate::train::EpochRecord| {
        if verbose {
            eprintln!(
                "epoch {:>3}  loss {:.5}  val hit@5 {:.4}  ndcg@5 {:.4}",
                r.epoch, r.train_loss, r.val_hit5, r.val_ndcg5
            );
        }
    };
    let result = fit(ds, &cfg.train, &cfg.protocol, Some(&mut log))?;
    write(&out.join(HISTORY_FILE), &history_csv(&result.history))?;
    save_checkpoint(&result.checkpoint, &out.join(CHECKPOINT_FILE))?;
    Ok(result.checkpoint)
}

pub fn cmd_train(a: &TrainArgs) -> Result<String> {
    let mut cfg = a.overrides.resolve()?;
    let data = split_path(&a.data);
    cfg.data = Some(data.clone());
    let ds = load_split(&data)?;
    let ck = run_training(&ds, &cfg, &a.out, true)?;
    Ok(format!(
        "best epoch {}: validation NDCG@5 {:.4}\ncheckpoint written to {}\n",
        ck.epoch,
        ck.best_val_ndcg5,
        a.out.join(CHECKPOINT_FILE).display()
    ))
}

/// Item metrics when the variant ranks items, otherwise category metrics. Category metrics ride along when available.
pub fn evaluate_checkpoint(ck: &Checkpoint, ds: &SplitDataset, protocol: &EvalProtocol, split: Split) -> Result<(EvalReport, Option<EvalReport>)> {
    ck.expect_catalog(&ds.catalog.digest())?;
    let scorer = ModelScorer {
        params: &ck.params,
        opts: ck.config.score_options(),
    };
    let variant = ck.params.variant();
    if variant.ranking_head().is_some() {
        let items = evaluate(&scorer, ds, protocol, split)?;
        let cats = match variant.category_head() {
            Some(_) => Some(category_accuracy(&scorer, ds, split)?),
            None => None,
        };
        Ok((items, cats))
    } else {
        Ok((evaluate_categories(&scorer, ds, protocol, split)?, None))
    }
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> Result<String> {
    let ck_path = checkpoint_path(&a.checkpoint);
    let ck = load_checkpoint(&ck_path)?;
    if let Some(v) = a.variant {
        ck.expect_variant(v)?;
    }
    let data = split_path(&a.data);
    let ds = load_split(&data)?;
    let protocol = EvalProtocol {
        negatives: parse_negatives(&a.negatives)?,
        cutoffs: parse_cutoffs(&a.cutoffs)?,
        seed: a.eval_seed,
        include_valid: !a.exclude_valid,
        ..EvalProtocol::default()
    };
    protocol.validate()?;
    let (main, cats) = evaluate_checkpoint(&ck, &ds, &protocol, a.split)?;
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| ck_path.parent().map(Path::to_path_buf).unwrap_or_default());
    mkdir(&out)?;
    let cfg = RunConfig {
        train: ck.config.clone(),
        protocol,
        data: Some(data),
    };
    cfg.write_resolved(&out)?;
    write(&out.join(METRICS_JSON), &format!("{:#}\n", main.to_json()))?;
    write(&out.join(METRICS_CSV), &main.to_csv())?;
    let mut text = main.to_string();
    if let Some(c) = cats {
        write(&out.join(CATEGORY_JSON), &format!("{:#}\n", c.to_json()))?;
        text.push_str(&c.to_string());
    }
    Ok(text)
}

/// Per-tensor report text and whether every error is within tolerance.
pub fn cmd_gradcheck(a: &GradcheckArgs) -> Result<(String, bool)> {
    let variants: Vec<Variant> = if a.variant == "all" {
        Variant::ALL.to_vec()
    } else {
        vec![a.variant.parse()?]
    };
    let opts = GradcheckOptions {
        seed: a.seed,
        ..GradcheckOptions::default()
    };
    let mut text = String::new();
    let mut ok = true;
    for v in variants {
        let r = gradcheck(v, &opts)?;
        for (name, err) in &r.per_tensor {
            text.push_str(&format!("{v}\t{name}\t{err:.3e}\n"));
        }
        let pass = r.max_error() < GRADCHECK_TOLERANCE;
        ok &= pass;
        text.push_str(&format!(
            "{v}\tmax\t{:.3e}\t{}\n",
            r.max_error(),
            if pass { "ok" } else { "FAIL" }
        ));
    }
    Ok((text, ok))
}

fn read_matrix(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| {
            l.split_whitespace()
                .map(|v| v.parse().map_err(|_| Error::parse(i + 1, format!("bad probability `{v}`"))))
                .collect()
        })
        .collect()
}

pub fn cmd_synth(a: &SynthArgs) -> Result<String> {
    let spec = if let Some(p) = &a.matrix_file {
        SynthSpec::new(a.k, a.m, a.t, a.users, read_matrix(p)?, a.seed)?
    } else if let Some(main) = a.noisy {
        SynthSpec::noisy_cycle(a.k, a.m, a.t, a.users, main, a.seed)?
    } else {
        SynthSpec::det_cycle(a.k, a.m, a.t, a.users, a.seed)?
    };
    let events = generate(&spec)?;
    mkdir(&a.out)?;
    let tsv = a.out.join("events.tsv");
    let f = File::create(&tsv).map_err(|e| Error::io(&tsv, e))?;
    write_canonical(&events, f).map_err(|e| Error::io(&tsv, e))?;
    write(&a.out.join("spec.txt"), &spec.to_text())?;
    let (ds, _) = leave_one_out_split(&events);
    save_split(&ds, &a.out.join(SPLIT_FILE))?;
    let protocol = EvalProtocol {
        negatives: parse_negatives(&a.negatives)?,
        ..EvalProtocol::default()
    };
    let oracle = bayes_oracle(&spec, &ds, &protocol, Split::Test)?;
    let text = oracle.to_text();
    write(&a.out.join("oracle.txt"), &text)?;
    Ok(text)
}

pub fn cmd_sweep(a: &SweepArgs) -> Result<String> {
    let base = a.overrides.resolve()?;
    let data = split_path(&a.data);
    let ds = load_split(&data)?;
    let key = match a.param {
        SweepParam::Lambda => "lambda",
        SweepParam::L => "L",
    };
    mkdir(&a.out)?;
    let mut csv = format!("{key},hit5,ndcg5,best_epoch\n");
    for value in a.values.split(',').map(str::trim).filter(|v| !v.is_empty()) {
        let mut cfg = base.clone();
        cfg.data = Some(data.clone());
        cfg.set(key, value)?;
        cfg.validate()?;
        let dir = a.out.join(format!("{key}={value}"));
        let ck = run_training(&ds, &cfg, &dir, false)?;
        let (main, _) = evaluate_checkpoint(&ck, &ds, &cfg.protocol, Split::Test)?;
        write(&dir.join(METRICS_JSON), &format!("{:#}\n", main.to_json()))?;
        write(&dir.join(METRICS_CSV), &main.to_csv())?;
        let at5 = |v: Option<f64>| v.map_or("nan".to_string(), |x| x.to_string());
        csv.push_str(&format!("{value},{},{},{}\n", at5(main.hit_at(5)), at5(main.ndcg_at(5)), ck.epoch));
    }
    write(&a.out.join("sweep.csv"), &csv)?;
    Ok(csv)
}

pub fn run(cli: Cli) -> ExitCode {
    let outcome = match &cli.command {
        Command::Prepare(a) => cmd_prepare(a).map(|s| (s, true)),
        Command::Train(a) => cmd_train(a).map(|s| (s, true)),
        Command::Evaluate(a) => cmd_evaluate(a).map(|s| (s, true)),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Synth(a) => cmd_synth(a).map(|s| (s, true)),
        Command::Sweep(a) => cmd_sweep(a).map(|s| (s, true)),
    };
    match outcome {
        Ok((text, ok)) => {
            print!("{text}");
            if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
