//! Joint objective, optimizers, early-stopped training, finite-difference
//! gradient checks and checkpoint files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::data::{dataset_windows, make_batches, Split, SplitDataset, TrainingWindow};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::eval::{evaluate, evaluate_categories, EvalProtocol, ModelScorer};
use crate::models::{forward, Dims, ForwardCtx, ForwardOutput, ParamSet, ScoreOptions, SeqBatch, Variant};
use crate::tensor::{Tape, Tensor, Var};

pub const CHECKPOINT_HEADER: &str = "SEQTRANS-CKPT v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Optimizer {
    Adam,
    Sgd,
}

impl Optimizer {
    pub fn name(self) -> &'static str {
        match self {
            Optimizer::Adam => "adam",
            Optimizer::Sgd => "sgd",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    pub d: usize,
    /// Sliding window length.
    pub window: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub dropout: f64,
    pub lambda: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub sample_at_eval: bool,
    pub combine_heads: bool,
    pub optimizer: Optimizer,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Tstm,
            d: 50,
            window: 5,
            batch_size: 128,
            learning_rate: 0.001,
            dropout: 0.2,
            lambda: 1.0,
            max_epochs: 100,
            patience: 10,
            seed: 0,
            sample_at_eval: false,
            combine_heads: false,
            optimizer: Optimizer::Adam,
            clip_norm: 5.0,
        }
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "1" | "yes" => Some(true),
        "false" | "0" | "no" => Some(false),
        _ => None,
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 14] = [
        "variant",
        "d",
        "L",
        "batch_size",
        "learning_rate",
        "dropout",
        "lambda",
        "max_epochs",
        "patience",
        "seed",
        "sample_at_eval",
        "combine_heads",
        "optimizer",
        "clip_norm",
    ];

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || (self.variant.has_vae() && self.d % 2 != 0) {
            return bad(format!("d = {} is not usable for `{}` (must be positive, even for latent variants)", self.d, self.variant));
        }
        if self.window == 0 || self.batch_size == 0 {
            return bad("L and batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if !(self.clip_norm >= 0.0) {
            return bad("clip_norm must be non-negative".into());
        }
        Ok(())
    }

    /// Apply one `key = value` setting. Returns false for keys this config does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let err = || Error::Config(format!("bad value `{value}` for `{key}`"));
        let num = |v: &str| v.parse::<f64>().map_err(|_| err());
        let int = |v: &str| v.parse::<usize>().map_err(|_| err());
        match key {
            "variant" => self.variant = value.parse()?,
            "d" => self.d = int(value)?,
            "L" | "window" => self.window = int(value)?,
            "batch_size" => self.batch_size = int(value)?,
            "learning_rate" | "lr" => self.learning_rate = num(value)?,
            "dropout" => self.dropout = num(value)?,
            "lambda" => self.lambda = num(value)?,
            "max_epochs" => self.max_epochs = int(value)?,
            "patience" => self.patience = int(value)?,
            "seed" => self.seed = value.parse().map_err(|_| err())?,
            "sample_at_eval" => self.sample_at_eval = parse_bool(value).ok_or_else(err)?,
            "combine_heads" => self.combine_heads = parse_bool(value).ok_or_else(err)?,
            "optimizer" => {
                self.optimizer = match value {
                    "adam" => Optimizer::Adam,
                    "sgd" => Optimizer::Sgd,
                    _ => return Err(err()),
                }
            }
            "clip_norm" => self.clip_norm = num(value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("variant", self.variant.tag().to_string()),
            ("d", self.d.to_string()),
            ("L", self.window.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("learning_rate", format!("{:?}", self.learning_rate)),
            ("dropout", format!("{:?}", self.dropout)),
            ("lambda", format!("{:?}", self.lambda)),
            ("max_epochs", self.max_epochs.to_string()),
            ("patience", self.patience.to_string()),
            ("seed", self.seed.to_string()),
            ("sample_at_eval", self.sample_at_eval.to_string()),
            ("combine_heads", self.combine_heads.to_string()),
            ("optimizer", self.optimizer.name().to_string()),
            ("clip_norm", format!("{:?}", self.clip_norm)),
        ]
    }

    pub fn score_options(&self) -> ScoreOptions {
        ScoreOptions {
            combine_heads: self.combine_heads,
            sample_at_eval: self.sample_at_eval,
            seed: derive_seed(self.seed, 3),
        }
    }
}

/// Next-step targets aligned with a [`SeqBatch`].
#[derive(Clone, Debug, PartialEq)]
pub struct StepTargets {
    /// `items[t][b]`, 0 where masked.
    pub items: Vec<Vec<usize>>,
    pub cats: Vec<Vec<usize>>,
    pub mask: Vec<Vec<bool>>,
}

impl StepTargets {
    pub fn valid_steps(&self) -> usize {
        self.mask.iter().flatten().filter(|&&m| m).count()
    }
}

/// Step-major batch and targets from equal-length windows.
pub fn window_batch(windows: &[&TrainingWindow]) -> Result<(SeqBatch, StepTargets)> {
    let len = windows.first().map(|w| w.mask.len()).ok_or(Error::EmptyDataset)?;
    if windows.iter().any(|w| w.mask.len() != len) {
        return Err(Error::Config("windows in one batch must share a length".into()));
    }
    let col = |f: &dyn Fn(&TrainingWindow, usize) -> usize| -> Vec<Vec<usize>> {
        (0..len).map(|t| windows.iter().map(|w| f(w, t)).collect()).collect()
    };
    let mask: Vec<Vec<bool>> = (0..len).map(|t| windows.iter().map(|w| w.mask[t]).collect()).collect();
    let batch = SeqBatch {
        users: windows.iter().map(|w| w.user).collect(),
        items: col(&|w, t| w.input_items[t]),
        cats: col(&|w, t| w.input_cats[t]),
        mask: mask.clone(),
    };
    let targets = StepTargets {
        items: col(&|w, t| w.target_items[t]),
        cats: col(&|w, t| w.target_cats[t]),
        mask,
    };
    Ok((batch, targets))
}

/// Values of each objective term, already averaged over valid steps.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    /// `(name, mean NLL)` per head, in head order.
    pub nll: Vec<(&'static str, f64)>,
    /// `(name, mean KL)` per stream, before the λ weight.
    pub kl: Vec<(&'static str, f64)>,
}

/// Mean over valid steps of the summed head NLLs plus `λ` times the summed KL terms.
pub fn total_loss(tape: &mut Tape, out: &ForwardOutput, targets: &StepTargets, lambda: f64) -> Result<(Var, LossParts)> {
    let n_valid = targets.valid_steps();
    if n_valid == 0 {
        return Err(Error::EmptyDataset);
    }
    let scale = 1.0 / n_valid as f64;
    let mut terms = Vec::new();
    let mut parts = LossParts::default();

    for hl in &out.logits {
        let mut head_terms = Vec::with_capacity(out.steps.len());
        for (&t, &logits) in out.steps.iter().zip(&hl.steps) {
            let ids = if hl.head.predicts_items() { &targets.items[t] } else { &targets.cats[t] };
            let cls: Vec<Option<usize>> = ids
                .iter()
                .zip(&targets.mask[t])
                .map(|(&id, &m)| if m { id.checked_sub(1) } else { None })
                .collect();
            head_terms.push(tape.softmax_cross_entropy(logits, &cls, scale)?);
        }
        let sum = tape.add_all(&head_terms)?;
        parts.nll.push((hl.head.name(), tape.scalar_value(sum)));
        terms.push(sum);
    }

    for stream in &out.kls {
        let mut kl_terms = Vec::with_capacity(stream.steps.len());
        for (t, &kl) in stream.steps.iter().enumerate() {
            let w: Vec<f64> = targets.mask[t].iter().map(|&m| if m { scale } else { 0.0 }).collect();
            kl_terms.push(tape.weighted_sum(kl, &w)?);
        }
        let sum = tape.add_all(&kl_terms)?;
        parts.kl.push((stream.kind.name(), tape.scalar_value(sum)));
        terms.push(tape.scale(sum, lambda));
    }

    let total = tape.add_all(&terms)?;
    parts.total = tape.scalar_value(total);
    Ok((total, parts))
}

/// Per-parameter Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Default for AdamState {
    fn default() -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

/// Bias-corrected Adam update. Parameters without a gradient see a zero gradient.
pub fn adam_step<'a>(
    params: impl IntoIterator<Item = (&'a String, &'a mut Tensor)>,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for (name, p) in params {
        let [r, c] = p.shape();
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(r, c));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(r, c));
        if m.shape() != p.shape() {
            return Err(Error::Dimension {
                op: "adam_step",
                left: p.shape(),
                right: m.shape(),
            });
        }
        let g = grads.get(name);
        if let Some(g) = g {
            if g.shape() != p.shape() {
                return Err(Error::Dimension {
                    op: "adam_step",
                    left: p.shape(),
                    right: g.shape(),
                });
            }
        }
        let ps = p.as_slice_mut();
        let (ms, vs) = (m.as_slice_mut(), v.as_slice_mut());
        for k in 0..ps.len() {
            let gk = g.map_or(0.0, |g| g.as_slice()[k]);
            ms[k] = b1 * ms[k] + (1.0 - b1) * gk;
            vs[k] = b2 * vs[k] + (1.0 - b2) * gk * gk;
            let mh = ms[k] / c1;
            let vh = vs[k] / c2;
            ps[k] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

pub fn sgd_step<'a>(
    params: impl IntoIterator<Item = (&'a String, &'a mut Tensor)>,
    grads: &BTreeMap<String, Tensor>,
    lr: f64,
) -> Result<()> {
    for (name, p) in params {
        let Some(g) = grads.get(name) else { continue };
        if g.shape() != p.shape() {
            return Err(Error::Dimension {
                op: "sgd_step",
                left: p.shape(),
                right: g.shape(),
            });
        }
        for (x, &gk) in p.as_slice_mut().iter_mut().zip(g.as_slice()) {
            *x -= lr * gk;
        }
    }
    Ok(())
}

/// Scale all gradients so their joint L2 norm is at most `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads.values().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let k = max_norm / norm;
        for g in grads.values_mut() {
            g.as_slice_mut().iter_mut().for_each(|x| *x *= k);
        }
    }
    norm
}

/// Loss and named gradients for one batch. A fresh rng seeded with `noise_seed` drives dropout and latent draws.
pub fn loss_and_grads(
    params: &ParamSet,
    batch: &SeqBatch,
    targets: &StepTargets,
    dropout: f64,
    lambda: f64,
    noise_seed: Option<u64>,
) -> Result<(LossParts, BTreeMap<String, Tensor>)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed.unwrap_or(0));
    let mut ctx = match noise_seed {
        Some(_) => ForwardCtx::training(&mut rng, dropout),
        None => ForwardCtx::mean_path(crate::models::HeadSteps::All),
    };
    let out = forward(&mut tape, params, &bound, batch, &mut ctx)?;
    let (loss, parts) = total_loss(&mut tape, &out, targets, lambda)?;
    if !parts.total.is_finite() {
        return Err(Error::Config(format!("loss became non-finite ({})", parts.total)));
    }
    let mut g = tape.backward(loss)?;
    let grads = bound
        .iter()
        .map(|(name, &v)| {
            let shape = tape.shape(v);
            (name.clone(), g.take(v).unwrap_or_else(|| Tensor::zeros(shape[0], shape[1])))
        })
        .collect();
    Ok((parts, grads))
}

/// One optimizer update on one batch.
pub fn train_step(
    params: &mut ParamSet,
    state: &mut AdamState,
    windows: &[&TrainingWindow],
    cfg: &TrainConfig,
    noise_seed: u64,
) -> Result<LossParts> {
    let (batch, targets) = window_batch(windows)?;
    let (parts, mut grads) = loss_and_grads(params, &batch, &targets, cfg.dropout, cfg.lambda, Some(noise_seed))?;
    clip_global_norm(&mut grads, cfg.clip_norm);
    match cfg.optimizer {
        Optimizer::Adam => adam_step(params.iter_mut(), &grads, state, cfg.learning_rate)?,
        Optimizer::Sgd => sgd_step(params.iter_mut(), &grads, cfg.learning_rate)?,
    }
    Ok(parts)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Component names with their epoch means: head NLLs then KL streams.
    pub components: Vec<(String, f64)>,
    pub val_hit5: f64,
    pub val_ndcg5: f64,
}

/// History as CSV: `epoch,train_loss,<components...>,val_hit5,val_ndcg5`.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss");
    if let Some(first) = history.first() {
        for (name, _) in &first.components {
            let _ = write!(s, ",{name}");
        }
    }
    s.push_str(",val_hit5,val_ndcg5\n");
    for r in history {
        let _ = write!(s, "{},{}", r.epoch, r.train_loss);
        for (_, v) in &r.components {
            let _ = write!(s, ",{v}");
        }
        let _ = writeln!(s, ",{},{}", r.val_hit5, r.val_ndcg5);
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamSet,
    pub config: TrainConfig,
    pub catalog_digest: String,
    pub epoch: usize,
    pub best_val_ndcg5: f64,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
}

pub fn dims_for(ds: &SplitDataset, d: usize) -> Dims {
    Dims {
        d,
        n_items: ds.catalog.n_items(),
        n_cats: ds.catalog.n_categories().max(1),
        n_users: ds.users.len(),
    }
}

/// Validation Hit@5 and NDCG@5 for early stopping. Category-only variants rank categories.
pub fn validation_score(params: &ParamSet, cfg: &TrainConfig, ds: &SplitDataset, protocol: &EvalProtocol) -> Result<(f64, f64)> {
    let scorer = ModelScorer {
        params,
        opts: cfg.score_options(),
    };
    let p = EvalProtocol {
        cutoffs: vec![5],
        ..protocol.clone()
    };
    let report = if params.variant().ranking_head().is_some() {
        evaluate(&scorer, ds, &p, Split::Valid)?
    } else {
        evaluate_categories(&scorer, ds, &p, Split::Valid)?
    };
    Ok((report.hit[0], report.ndcg[0]))
}

/// Train with early stopping on validation NDCG@5 and return the best parameters.
pub fn fit(
    ds: &SplitDataset,
    cfg: &TrainConfig,
    protocol: &EvalProtocol,
    mut on_epoch: Option<&mut dyn FnMut(&EpochRecord)>,
) -> Result<FitResult> {
    cfg.validate()?;
    let windows = dataset_windows(ds, cfg.window)?;
    if windows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let dims = dims_for(ds, cfg.d);
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0));
    let mut params = ParamSet::init(cfg.variant, dims, &mut init_rng)?;
    let mut state = AdamState::default();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParamSet)> = None;
    let mut stale = 0;

    for epoch in 1..=cfg.max_epochs.max(1) {
        let batches = make_batches(windows.len(), cfg.batch_size, derive_seed(cfg.seed, 1 << 32 | epoch as u64))?;
        let mut weight = 0.0;
        let mut total = 0.0;
        let mut comps: Vec<(String, f64)> = Vec::new();
        for (b, idx) in batches.iter().enumerate() {
            let ws: Vec<&TrainingWindow> = idx.iter().map(|&k| &windows[k]).collect();
            let valid: usize = ws.iter().map(|w| w.valid_steps()).sum();
            let noise = derive_seed(cfg.seed, 2 << 32 | (epoch as u64) << 20 | b as u64);
            let parts = train_step(&mut params, &mut state, &ws, cfg, noise)?;
            let w = valid as f64;
            weight += w;
            total += w * parts.total;
            let named = parts
                .nll
                .iter()
                .map(|(n, v)| (format!("{n}_nll"), *v))
                .chain(parts.kl.iter().map(|(n, v)| (n.to_string(), *v)));
            if comps.is_empty() {
                comps = named.map(|(n, v)| (n, w * v)).collect();
            } else {
                for (slot, (_, v)) in comps.iter_mut().zip(named) {
                    slot.1 += w * v;
                }
            }
        }
        let (val_hit5, val_ndcg5) = validation_score(&params, cfg, ds, protocol)?;
        let record = EpochRecord {
            epoch,
            train_loss: total / weight,
            components: comps.into_iter().map(|(n, v)| (n, v / weight)).collect(),
            val_hit5,
            val_ndcg5,
        };
        if let Some(cb) = on_epoch.as_deref_mut() {
            cb(&record);
        }
        history.push(record);

        let improved = best.as_ref().is_none_or(|b| val_ndcg5 > b.0);
        if improved {
            best = Some((val_ndcg5, epoch, params.clone()));
            stale = 0;
        } else {
            stale += 1;
        }
        if stale >= cfg.patience {
            break;
        }
    }

    let (best_val_ndcg5, epoch, params) = best.expect("at least one epoch ran");
    Ok(FitResult {
        checkpoint: Checkpoint {
            params,
            config: cfg.clone(),
            catalog_digest: ds.catalog.digest(),
            epoch,
            best_val_ndcg5,
        },
        history,
    })
}

/// The built-in gradient-check instance: 5 items, 2 categories, 2 users, `L = 2`.
pub fn tiny_instance() -> (Dims, Vec<TrainingWindow>) {
    let dims = Dims {
        d: 4,
        n_items: 5,
        n_cats: 2,
        n_users: 2,
    };
    let windows = vec![
        TrainingWindow {
            user: 0,
            input_items: vec![1, 3],
            input_cats: vec![1, 2],
            target_items: vec![3, 2],
            target_cats: vec![2, 1],
            mask: vec![true, true],
        },
        TrainingWindow {
            user: 1,
            input_items: vec![0, 4],
            input_cats: vec![0, 2],
            target_items: vec![0, 5],
            target_cats: vec![0, 1],
            mask: vec![false, true],
        },
    ];
    (dims, windows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub variant: Variant,
    /// Max relative error per parameter tensor.
    pub per_tensor: Vec<(String, f64)>,
}

impl GradcheckReport {
    pub fn max_error(&self) -> f64 {
        self.per_tensor.iter().map(|t| t.1).fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Relative-error denominator floor, so near-zero gradients compare absolutely.
    pub floor: f64,
    /// Multiply analytic gradients by this factor (negative-control fixture).
    pub corrupt: Option<f64>,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            step: 1e-5,
            floor: 1e-4,
            corrupt: None,
            seed: 17,
        }
    }
}

/// Compare analytic gradients of the full objective (dropout and latent noise included,
/// replayed from a fixed seed) against central differences for every parameter.
pub fn gradcheck(variant: Variant, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let (dims, windows) = tiny_instance();
    let refs: Vec<&TrainingWindow> = windows.iter().collect();
    let (batch, targets) = window_batch(&refs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut params = ParamSet::init(variant, dims, &mut rng)?;
    let noise = Some(derive_seed(opts.seed, 1));
    let (dropout, lambda) = (0.2, 1.0);
    let (_, grads) = loss_and_grads(&params, &batch, &targets, dropout, lambda, noise)?;
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut per_tensor = Vec::with_capacity(names.len());
    for name in names {
        let mut analytic = grads[&name].clone();
        if let Some(k) = opts.corrupt {
            analytic = analytic.map(|g| g * k + 1e-3);
        }
        let len = analytic.len();
        let mut worst: f64 = 0.0;
        for k in 0..len {
            let orig = params.get(&name).unwrap().as_slice()[k];
            let mut eval_at = |x: f64| -> Result<f64> {
                params.get_mut(&name).unwrap().as_slice_mut()[k] = x;
                let (parts, _) = loss_and_grads(&params, &batch, &targets, dropout, lambda, noise)?;
                Ok(parts.total)
            };
            let up = eval_at(orig + opts.step)?;
            let down = eval_at(orig - opts.step)?;
            params.get_mut(&name).unwrap().as_slice_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let a = analytic.as_slice()[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            worst = worst.max(rel);
        }
        per_tensor.push((name, worst));
    }
    Ok(GradcheckReport { variant, per_tensor })
}

/// Train on one repeated window of the tiny instance and return the loss after each epoch.
pub fn overfit_single_window(variant: Variant, epochs: usize, lr: f64, lambda: f64, seed: u64) -> Result<Vec<f64>> {
    let (mut dims, windows) = tiny_instance();
    dims.d = 16;
    let cfg = TrainConfig {
        variant,
        d: dims.d,
        window: 2,
        batch_size: 1,
        learning_rate: lr,
        dropout: 0.0,
        lambda,
        seed,
        ..TrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::init(variant, dims, &mut rng)?;
    let mut state = AdamState::default();
    let w = [&windows[0]];
    let mut losses = Vec::with_capacity(epochs);
    for e in 0..epochs {
        let parts = train_step(&mut params, &mut state, &w, &cfg, derive_seed(seed, e as u64))?;
        losses.push(parts.total);
    }
    Ok(losses)
}

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

impl Checkpoint {
    /// Refuse a checkpoint trained for a different variant.
    pub fn expect_variant(&self, variant: Variant) -> Result<()> {
        if self.params.variant() != variant {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint holds `{}`, `{}` requested",
                self.params.variant(),
                variant
            )));
        }
        Ok(())
    }

    /// Refuse a checkpoint built over a different catalog.
    pub fn expect_catalog(&self, digest: &str) -> Result<()> {
        if self.catalog_digest != digest {
            return Err(Error::CheckpointMismatch("catalog digest differs from the dataset".into()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let dims = self.params.dims();
        let mut head = format!("{CHECKPOINT_HEADER}\n");
        for (k, v) in self.config.to_pairs() {
            let _ = writeln!(head, "{k} = {v}");
        }
        let _ = writeln!(head, "n_items = {}", dims.n_items);
        let _ = writeln!(head, "n_cats = {}", dims.n_cats);
        let _ = writeln!(head, "n_users = {}", dims.n_users);
        let _ = writeln!(head, "catalog = {}", self.catalog_digest);
        let _ = writeln!(head, "epoch = {}", self.epoch);
        let _ = writeln!(head, "best_val_ndcg5 = {:?}", self.best_val_ndcg5);
        let _ = writeln!(head, "tensors = {}", self.params.iter().count());
        let mut out = head.into_bytes();
        for (name, t) in self.params.iter() {
            out.extend_from_slice(format!("{name} {} {}\n", t.rows(), t.cols()).as_bytes());
            for v in t.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(format!("sha256 {}\n", hex(&digest)).as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let first = bytes.iter().position(|&b| b == b'\n').unwrap_or(bytes.len());
        let header = String::from_utf8_lossy(&bytes[..first]).into_owned();
        if header != CHECKPOINT_HEADER {
            return Err(Error::VersionMismatch {
                expected: CHECKPOINT_HEADER.into(),
                found: header,
            });
        }
        // trailer: "sha256 " + 64 hex + "\n"
        const TRAILER: usize = 7 + 64 + 1;
        if bytes.len() < first + TRAILER {
            return Err(Error::Corrupt("checkpoint truncated".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - TRAILER);
        let expected = format!("sha256 {}\n", hex(&Sha256::digest(body)));
        if trailer != expected.as_bytes() {
            return Err(Error::Corrupt("checkpoint checksum mismatch (truncated or modified)".into()));
        }

        let mut pos = first + 1;
        let line = |pos: &mut usize| -> Result<String> {
            let end = body[*pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::Corrupt("unterminated line".into()))?;
            let s = std::str::from_utf8(&body[*pos..*pos + end])
                .map_err(|_| Error::Corrupt("non-UTF-8 metadata".into()))?
                .to_string();
            *pos += end + 1;
            Ok(s)
        };
        let mut config = TrainConfig::default();
        let mut meta: BTreeMap<String, String> = BTreeMap::new();
        let n_tensors = loop {
            let l = line(&mut pos)?;
            let (k, v) = l
                .split_once(" = ")
                .ok_or_else(|| Error::Corrupt(format!("bad metadata line `{l}`")))?;
            if k == "tensors" {
                break v.parse::<usize>().map_err(|_| Error::Corrupt("bad tensor count".into()))?;
            }
            if !config.set(k, v)? {
                meta.insert(k.to_string(), v.to_string());
            }
        };
        let get = |k: &str| meta.get(k).ok_or_else(|| Error::Corrupt(format!("missing `{k}`")));
        let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| Error::Corrupt(format!("bad `{k}`"))) };
        let dims = Dims {
            d: config.d,
            n_items: num("n_items")?,
            n_cats: num("n_cats")?,
            n_users: num("n_users")?,
        };
        let mut tensors = BTreeMap::new();
        for _ in 0..n_tensors {
            let l = line(&mut pos)?;
            let f: Vec<&str> = l.split(' ').collect();
            if f.len() != 3 {
                return Err(Error::Corrupt(format!("bad tensor header `{l}`")));
            }
            let rows: usize = f[1].parse().map_err(|_| Error::Corrupt("bad rows".into()))?;
            let cols: usize = f[2].parse().map_err(|_| Error::Corrupt("bad cols".into()))?;
            let n = rows * cols * 8;
            if pos + n > body.len() {
                return Err(Error::Corrupt(format!("tensor `{}` truncated", f[0])));
            }
            let vals = body[pos..pos + n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            pos += n;
            tensors.insert(f[0].to_string(), Tensor::from_vec(rows, cols, vals)?);
        }
        if pos != body.len() {
            return Err(Error::Corrupt("trailing bytes after tensors".into()));
        }
        let params = ParamSet::from_tensors(config.variant, dims, tensors)?;
        Ok(Checkpoint {
            params,
            config,
            catalog_digest: get("catalog")?.clone(),
            epoch: num("epoch")?,
            best_val_ndcg5: get("best_val_ndcg5")?
                .parse()
                .map_err(|_| Error::Corrupt("bad best_val_ndcg5".into()))?,
        })
    }
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, ck.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p: BTreeMap<String, Tensor> = [("w".to_string(), Tensor::row(vec![1.0, -2.0]))].into();
        let g: BTreeMap<String, Tensor> = [("w".to_string(), Tensor::zeros(1, 2))].into();
        let mut s = AdamState::default();
        adam_step(p.iter_mut(), &g, &mut s, 0.1).unwrap();
        assert_eq!(p["w"].to_vec(), vec![1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut p: BTreeMap<String, Tensor> = [("w".to_string(), Tensor::row(vec![0.0, 0.0, 0.0]))].into();
        let g: BTreeMap<String, Tensor> = [("w".to_string(), Tensor::row(vec![3.0, -0.02, 0.0]))].into();
        let mut s = AdamState::default();
        adam_step(p.iter_mut(), &g, &mut s, 0.01).unwrap();
        let w = p["w"].to_vec();
        assert!((w[0] + 0.01).abs() < 1e-8);
        assert!((w[1] - 0.01).abs() < 1e-6);
        assert_eq!(w[2], 0.0);
    }

    #[test]
    fn adam_quadratic_bowl() {
        let mut p: BTreeMap<String, Tensor> = [("x".to_string(), Tensor::scalar(1.0))].into();
        let mut s = AdamState::default();
        for _ in 0..500 {
            let g: BTreeMap<String, Tensor> = [("x".to_string(), Tensor::scalar(2.0 * p["x"].item()))].into();
            adam_step(p.iter_mut(), &g, &mut s, 0.01).unwrap();
        }
        assert!(p["x"].item().abs() < 1e-3, "x = {}", p["x"].item());
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut p: BTreeMap<String, Tensor> = [("w".to_string(), Tensor::zeros(1, 2))].into();
        let g: BTreeMap<String, Tensor> = [("w".to_string(), Tensor::zeros(2, 1))].into();
        assert!(adam_step(p.iter_mut(), &g, &mut AdamState::default(), 0.1).is_err());
    }

    #[test]
    fn clipping() {
        let mut g: BTreeMap<String, Tensor> = [("a".to_string(), Tensor::row(vec![3.0, 4.0]))].into();
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g["a"].sq_norm() - 1.0).abs() < 1e-12);
    }

    fn tiny_batch() -> (SeqBatch, StepTargets) {
        let (_, w) = tiny_instance();
        let refs: Vec<&TrainingWindow> = w.iter().collect();
        window_batch(&refs).unwrap()
    }

    #[test]
    fn lambda_zero_drops_kl() {
        let (dims, _) = tiny_instance();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = ParamSet::init(Variant::Tstm, dims, &mut rng).unwrap();
        let (batch, targets) = tiny_batch();
        let (parts, _) = loss_and_grads(&p, &batch, &targets, 0.0, 0.0, Some(1)).unwrap();
        let nll: f64 = parts.nll.iter().map(|x| x.1).sum();
        assert!((parts.total - nll).abs() < 1e-12);
        assert!(parts.kl.iter().all(|k| k.1 > 0.0));
        let (with_kl, _) = loss_and_grads(&p, &batch, &targets, 0.0, 2.0, Some(1)).unwrap();
        let kl: f64 = with_kl.kl.iter().map(|x| x.1).sum();
        assert!((with_kl.total - nll - 2.0 * kl).abs() < 1e-12);
    }

    #[test]
    fn lstm_loss_is_item_nll_only() {
        let (dims, _) = tiny_instance();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = ParamSet::init(Variant::Lstm, dims, &mut rng).unwrap();
        let (batch, targets) = tiny_batch();
        let (parts, _) = loss_and_grads(&p, &batch, &targets, 0.0, 1.0, None).unwrap();
        assert_eq!(parts.nll.len(), 1);
        assert!(parts.kl.is_empty());
        assert_eq!(parts.total, parts.nll[0].1);
    }

    #[test]
    fn gradcheck_lstm_and_tstm() {
        for v in [Variant::Lstm, Variant::Tstm] {
            let r = gradcheck(v, &GradcheckOptions::default()).unwrap();
            assert!(r.max_error() < 1e-4, "{v}: {:?}", r.per_tensor);
        }
    }

    #[test]
    fn gradcheck_catches_corruption() {
        let opts = GradcheckOptions {
            corrupt: Some(1.1),
            ..GradcheckOptions::default()
        };
        assert!(gradcheck(Variant::Lstm, &opts).unwrap().max_error() > 1e-2);
    }

    #[test]
    fn config_round_trip() {
        let cfg = TrainConfig {
            variant: Variant::STstm,
            lambda: 20.0,
            combine_heads: true,
            optimizer: Optimizer::Sgd,
            ..TrainConfig::default()
        };
        let mut back = TrainConfig::default();
        for (k, v) in cfg.to_pairs() {
            assert!(back.set(k, &v).unwrap());
        }
        assert_eq!(back, cfg);
        assert!(!back.set("bogus", "1").unwrap());
        assert!(back.set("dropout", "x").is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let odd = TrainConfig { d: 7, ..TrainConfig::default() };
        assert!(odd.validate().is_err());
        let odd_lstm = TrainConfig {
            d: 7,
            variant: Variant::Lstm,
            ..TrainConfig::default()
        };
        assert!(odd_lstm.validate().is_ok());
        assert!(TrainConfig { lambda: -1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { dropout: 1.0, ..TrainConfig::default() }.validate().is_err());
    }

    fn checkpoint() -> Checkpoint {
        let (dims, _) = tiny_instance();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        Checkpoint {
            params: ParamSet::init(Variant::Ici, dims, &mut rng).unwrap(),
            config: TrainConfig {
                variant: Variant::Ici,
                d: 4,
                ..TrainConfig::default()
            },
            catalog_digest: "abc".into(),
            epoch: 3,
            best_val_ndcg5: 0.125,
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let ck = checkpoint();
        assert_eq!(Checkpoint::from_bytes(&ck.to_bytes()).unwrap(), ck);
    }

    #[test]
    fn checkpoint_rejects_damage() {
        let bytes = checkpoint().to_bytes();
        for cut in [bytes.len() - 1, bytes.len() / 2, 20] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Corrupt(_))), "cut {cut}");
        }
        let mut v2 = bytes.clone();
        v2[15] = b'2';
        assert!(matches!(Checkpoint::from_bytes(&v2), Err(Error::VersionMismatch { .. })));
        let mut flipped = bytes;
        let mid = flipped.len() / 2;
        flipped[mid] ^= 1;
        assert!(Checkpoint::from_bytes(&flipped).is_err());
    }

    #[test]
    fn checkpoint_variant_guard() {
        let ck = checkpoint();
        assert!(ck.expect_variant(Variant::Ici).is_ok());
        assert!(matches!(ck.expect_variant(Variant::Tstm), Err(Error::CheckpointMismatch(_))));
    }
}
