//! Model variants as forward passes over a [`Tape`].
//!
//! | tag      | heads                               | KL streams            |
//! |----------|-------------------------------------|-----------------------|
//! | `lstm`   | item                                | –                     |
//! | `ci`     | item, category                      | –                     |
//! | `ic`     | category                            | –                     |
//! | `ivaec`  | category                            | category              |
//! | `ici`    | item, category, back                | –                     |
//! | `tstm`   | item, category, personal            | category, item        |
//! | `s-tstm` | tstm heads + stacked category       | tstm streams + stacked|
//!
//! Every recurrence runs strictly left to right, so the outputs at step `t`
//! only ever see inputs at steps `≤ t`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};

use crate::error::{Error, Result};
use crate::nn::{self, LstmParams, LstmVars};
use crate::tensor::{log_softmax, Tape, Tensor, Var};
use crate::vae;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Lstm,
    Ci,
    Ic,
    Ici,
    Ivaec,
    Tstm,
    STstm,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Lstm,
        Variant::Ci,
        Variant::Ic,
        Variant::Ici,
        Variant::Ivaec,
        Variant::Tstm,
        Variant::STstm,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Variant::Lstm => "lstm",
            Variant::Ci => "ci",
            Variant::Ic => "ic",
            Variant::Ici => "ici",
            Variant::Ivaec => "ivaec",
            Variant::Tstm => "tstm",
            Variant::STstm => "s-tstm",
        }
    }

    pub fn heads(self) -> &'static [Head] {
        use Head::*;
        match self {
            Variant::Lstm => &[Item],
            Variant::Ci => &[Category, Item],
            Variant::Ic | Variant::Ivaec => &[Category],
            Variant::Ici => &[Item, Category, Back],
            Variant::Tstm => &[Item, Category, Personal],
            Variant::STstm => &[Item, Category, StackCategory, Personal],
        }
    }

    pub fn kl_streams(self) -> &'static [KlKind] {
        use KlKind::*;
        match self {
            Variant::Ivaec => &[Category],
            Variant::Tstm => &[Category, Item],
            Variant::STstm => &[Category, StackCategory, Item],
            _ => &[],
        }
    }

    pub fn has_vae(self) -> bool {
        !self.kl_streams().is_empty()
    }

    /// Head whose final-step logits rank candidate items.
    pub fn ranking_head(self) -> Option<Head> {
        match self {
            Variant::Lstm | Variant::Ci => Some(Head::Item),
            Variant::Ici => Some(Head::Back),
            Variant::Tstm | Variant::STstm => Some(Head::Personal),
            Variant::Ic | Variant::Ivaec => None,
        }
    }

    /// Head whose final-step logits rank the next category.
    pub fn category_head(self) -> Option<Head> {
        match self {
            Variant::Lstm => None,
            Variant::STstm => Some(Head::StackCategory),
            _ => Some(Head::Category),
        }
    }

    pub fn uses_categories(self) -> bool {
        self != Variant::Lstm
    }

    pub fn uses_users(self) -> bool {
        matches!(self, Variant::Tstm | Variant::STstm)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.tag() == s)
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

/// Prediction heads. Item-class heads predict over `|I|` classes, category heads over `|C|`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Head {
    /// `W1 h` on the first item layer (or the only item layer).
    Item,
    /// `W2 h` on the category layer.
    Category,
    /// `W1′ h³` on the back-translation layer of `ici`.
    Back,
    /// `W3 z_p` on the personalized latent.
    Personal,
    /// Category head of the stacked block.
    StackCategory,
}

impl Head {
    pub fn name(self) -> &'static str {
        match self {
            Head::Item => "item",
            Head::Category => "category",
            Head::Back => "back",
            Head::Personal => "personal",
            Head::StackCategory => "stack_category",
        }
    }

    pub fn predicts_items(self) -> bool {
        matches!(self, Head::Item | Head::Back | Head::Personal)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum KlKind {
    Category,
    Item,
    StackCategory,
}

impl KlKind {
    pub fn name(self) -> &'static str {
        match self {
            KlKind::Category => "kl_category",
            KlKind::Item => "kl_item",
            KlKind::StackCategory => "kl_stack_category",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub d: usize,
    pub n_items: usize,
    pub n_cats: usize,
    pub n_users: usize,
}

pub mod names {
    pub const ITEM_EMB: &str = "item_emb";
    pub const CAT_EMB: &str = "cat_emb";
    pub const USER_EMB: &str = "user_emb";
    pub const ITEM_RNN: &str = "item_rnn";
    pub const CAT_RNN: &str = "cat_rnn";
    pub const BACK_RNN: &str = "back_rnn";
    pub const Z_PROJ: &str = "z_proj";
    pub const FUSION: &str = "fusion";
    pub const ITEM_HEAD: &str = "item_head";
    pub const CAT_HEAD: &str = "cat_head";
    pub const BACK_HEAD: &str = "back_head";
    pub const LATENT_HEAD: &str = "latent_head";
    pub const STACK_Z_PROJ: &str = "stack.z_proj";
    pub const STACK_CAT_RNN: &str = "stack.cat_rnn";
    pub const STACK_BACK_RNN: &str = "stack.back_rnn";
    pub const STACK_CAT_HEAD: &str = "stack.cat_head";
}

/// All trainable arrays of one variant, keyed by name.
///
/// LSTM layers are stored as three entries `<layer>.w_ih`, `<layer>.w_hh`, `<layer>.bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    variant: Variant,
    dims: Dims,
    tensors: BTreeMap<String, Tensor>,
}

struct Init<'r, R: Rng + ?Sized> {
    rng: &'r mut R,
    tensors: BTreeMap<String, Tensor>,
}

impl<R: Rng + ?Sized> Init<'_, R> {
    fn embedding(&mut self, name: &str, rows: usize, d: usize, padded: bool) {
        let mut t = Tensor::uniform(rows, d, 0.05, self.rng);
        if padded {
            for j in 0..d {
                t.set(0, j, 0.0);
            }
        }
        self.tensors.insert(name.to_string(), t);
    }

    fn matrix(&mut self, name: &str, rows: usize, cols: usize, fan_in: usize) {
        let t = Tensor::uniform(rows, cols, 1.0 / (fan_in as f64).sqrt(), self.rng);
        self.tensors.insert(name.to_string(), t);
    }

    fn lstm(&mut self, name: &str, input_dim: usize, hidden: usize) {
        let p = LstmParams::init(input_dim, hidden, self.rng);
        self.tensors.insert(format!("{name}.w_ih"), p.w_ih);
        self.tensors.insert(format!("{name}.w_hh"), p.w_hh);
        self.tensors.insert(format!("{name}.bias"), p.bias);
    }
}

impl ParamSet {
    pub fn init<R: Rng + ?Sized>(variant: Variant, dims: Dims, rng: &mut R) -> Result<Self> {
        use names::*;
        use Variant::*;
        let Dims {
            d,
            n_items,
            n_cats,
            n_users,
        } = dims;
        if d == 0 || n_items == 0 || n_cats == 0 {
            return Err(Error::Config(format!("degenerate dimensions {dims:?}")));
        }
        if variant.has_vae() && d % 2 != 0 {
            return Err(Error::OddWidth(d));
        }
        if variant.uses_users() && n_users == 0 {
            return Err(Error::Config("personalized variant needs at least one user".into()));
        }
        let half = d / 2;
        let mut init = Init {
            rng,
            tensors: BTreeMap::new(),
        };
        init.embedding(ITEM_EMB, n_items + 1, d, true);
        if variant.uses_categories() {
            init.embedding(CAT_EMB, n_cats + 1, d, true);
        }
        if variant.uses_users() {
            init.embedding(USER_EMB, n_users, d, false);
        }
        match variant {
            Lstm => {
                init.lstm(ITEM_RNN, d, d);
                init.matrix(ITEM_HEAD, n_items, d, d);
            }
            Ci => {
                init.lstm(CAT_RNN, d, d);
                init.lstm(ITEM_RNN, 2 * d, d);
                init.matrix(CAT_HEAD, n_cats, d, d);
                init.matrix(ITEM_HEAD, n_items, d, d);
            }
            Ic | Ivaec => {
                init.lstm(ITEM_RNN, d, d);
                if variant == Ivaec {
                    init.matrix(Z_PROJ, d, half, half);
                }
                init.lstm(CAT_RNN, 2 * d, d);
                init.matrix(CAT_HEAD, n_cats, d, d);
            }
            Ici => {
                init.lstm(ITEM_RNN, d, d);
                init.lstm(CAT_RNN, 2 * d, d);
                init.lstm(BACK_RNN, 2 * d, d);
                init.matrix(ITEM_HEAD, n_items, d, d);
                init.matrix(CAT_HEAD, n_cats, d, d);
                init.matrix(BACK_HEAD, n_items, d, d);
            }
            Tstm | STstm => {
                init.lstm(ITEM_RNN, d, d);
                init.matrix(Z_PROJ, d, half, half);
                init.lstm(CAT_RNN, 2 * d, d);
                init.lstm(BACK_RNN, 2 * d, d);
                init.matrix(FUSION, 2 * d, d, 2 * d);
                init.matrix(ITEM_HEAD, n_items, d, d);
                init.matrix(CAT_HEAD, n_cats, d, d);
                init.matrix(LATENT_HEAD, n_items, half, half);
                if variant == STstm {
                    init.matrix(STACK_Z_PROJ, d, half, half);
                    init.lstm(STACK_CAT_RNN, 2 * d, d);
                    init.lstm(STACK_BACK_RNN, 2 * d, d);
                    init.matrix(STACK_CAT_HEAD, n_cats, d, d);
                }
            }
        }
        Ok(ParamSet {
            variant,
            dims,
            tensors: init.tensors,
        })
    }

    /// Rebuild from stored tensors, checking every expected entry and shape.
    pub fn from_tensors(variant: Variant, dims: Dims, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let template = ParamSet::init(variant, dims, &mut rng)?;
        if template.tensors.len() != tensors.len() {
            return Err(Error::CheckpointMismatch(format!(
                "expected {} tensors for {variant}, found {}",
                template.tensors.len(),
                tensors.len()
            )));
        }
        for (name, t) in &template.tensors {
            match tensors.get(name) {
                Some(found) if found.shape() == t.shape() => {}
                Some(found) => {
                    return Err(Error::CheckpointMismatch(format!(
                        "tensor {name} has shape {:?}, expected {:?}",
                        found.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::CheckpointMismatch(format!("missing tensor {name}"))),
            }
        }
        Ok(ParamSet {
            variant,
            dims,
            tensors,
        })
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn lstm(&self, layer: &str) -> Option<LstmParams> {
        Some(LstmParams {
            w_ih: self.get(&format!("{layer}.w_ih"))?.clone(),
            w_hh: self.get(&format!("{layer}.w_hh"))?.clone(),
            bias: self.get(&format!("{layer}.bias"))?.clone(),
        })
    }

    pub fn into_tensors(self) -> BTreeMap<String, Tensor> {
        self.tensors
    }

    /// Place every tensor on the tape as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), tape.param(t)))
                .collect(),
        }
    }
}

/// Tape handles for a bound [`ParamSet`].
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or(Error::Contract {
            variant: "bound",
            what: "a parameter with this name",
        })
    }

    fn lstm(&self, layer: &str) -> Result<LstmVars> {
        Ok(LstmVars {
            w_ih: self.var(&format!("{layer}.w_ih"))?,
            w_hh: self.var(&format!("{layer}.w_hh"))?,
            bias: self.var(&format!("{layer}.bias"))?,
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// A step-major batch of aligned item/category sequences.
///
/// `items[t][b]` is the item fed at step `t` to row `b`. Rows are left-padded
/// with id 0 and `mask[t][b]` is false on padding.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqBatch {
    pub users: Vec<usize>,
    pub items: Vec<Vec<usize>>,
    pub cats: Vec<Vec<usize>>,
    pub mask: Vec<Vec<bool>>,
}

impl SeqBatch {
    /// Left-pad histories to the longest one. Each history is `(user, items, cats)`.
    pub fn from_histories(histories: &[(usize, &[usize], &[usize])]) -> Result<Self> {
        let len = histories.iter().map(|h| h.1.len()).max().unwrap_or(0);
        let rows = histories.len();
        let mut batch = SeqBatch {
            users: histories.iter().map(|h| h.0).collect(),
            items: vec![vec![0; rows]; len],
            cats: vec![vec![0; rows]; len],
            mask: vec![vec![false; rows]; len],
        };
        for (b, &(user, items, cats)) in histories.iter().enumerate() {
            if items.is_empty() {
                return Err(Error::EmptyHistory(user));
            }
            if items.len() != cats.len() {
                return Err(Error::Dimension {
                    op: "history",
                    left: [1, items.len()],
                    right: [1, cats.len()],
                });
            }
            let offset = len - items.len();
            for (k, (&i, &c)) in items.iter().zip(cats).enumerate() {
                batch.items[offset + k][b] = i;
                batch.cats[offset + k][b] = c;
                batch.mask[offset + k][b] = true;
            }
        }
        Ok(batch)
    }

    pub fn rows(&self) -> usize {
        self.users.len()
    }

    pub fn steps(&self) -> usize {
        self.items.len()
    }

    fn validate(&self, variant: Variant, dims: &Dims) -> Result<()> {
        if self.items.len() != self.cats.len() || self.items.len() != self.mask.len() {
            return Err(Error::Dimension {
                op: "batch",
                left: [self.items.len(), self.rows()],
                right: [self.cats.len(), self.rows()],
            });
        }
        for t in 0..self.steps() {
            for b in 0..self.rows() {
                let item = self.items[t][b];
                if item > dims.n_items {
                    return Err(Error::IndexOutOfRange {
                        what: "item",
                        index: item,
                        size: dims.n_items + 1,
                    });
                }
                let cat = self.cats[t][b];
                if variant.uses_categories() && cat > dims.n_cats {
                    return Err(Error::IndexOutOfRange {
                        what: "category",
                        index: cat,
                        size: dims.n_cats + 1,
                    });
                }
            }
        }
        if variant.uses_users() {
            if let Some(&u) = self.users.iter().find(|&&u| u >= dims.n_users) {
                return Err(Error::IndexOutOfRange {
                    what: "user",
                    index: u,
                    size: dims.n_users,
                });
            }
        }
        Ok(())
    }
}

/// Which steps get prediction logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadSteps {
    All,
    Last,
}

/// Forward-pass settings. Without an rng the pass is the deterministic mean path:
/// no dropout and `z = mu` for every latent.
pub struct ForwardCtx<'a> {
    pub heads: HeadSteps,
    pub dropout: f64,
    pub sample_latent: bool,
    pub rng: Option<&'a mut dyn RngCore>,
}

impl ForwardCtx<'_> {
    pub fn mean_path(heads: HeadSteps) -> Self {
        ForwardCtx {
            heads,
            dropout: 0.0,
            sample_latent: false,
            rng: None,
        }
    }
}

impl<'a> ForwardCtx<'a> {
    pub fn training(rng: &'a mut dyn RngCore, dropout: f64) -> Self {
        ForwardCtx {
            heads: HeadSteps::All,
            dropout,
            sample_latent: true,
            rng: Some(rng),
        }
    }
}

#[derive(Clone, Debug)]
pub struct HeadLogits {
    pub head: Head,
    /// One `rows × classes` node per entry of [`ForwardOutput::steps`].
    pub steps: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct KlStream {
    pub kind: KlKind,
    /// One `rows × 1` node per input step.
    pub steps: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub variant: Variant,
    /// Step indices that carry logits.
    pub steps: Vec<usize>,
    pub logits: Vec<HeadLogits>,
    pub kls: Vec<KlStream>,
}

impl ForwardOutput {
    pub fn head(&self, head: Head) -> Option<&HeadLogits> {
        self.logits.iter().find(|h| h.head == head)
    }
}

struct Recurrent {
    p: LstmVars,
    h: Var,
    c: Var,
}

impl Recurrent {
    fn new(tape: &mut Tape, bound: &Bound, layer: &str, rows: usize, d: usize) -> Result<Self> {
        Ok(Recurrent {
            p: bound.lstm(layer)?,
            h: tape.constant(Tensor::zeros(rows, d)),
            c: tape.constant(Tensor::zeros(rows, d)),
        })
    }

    fn step(&mut self, tape: &mut Tape, x: Var, mask: Option<(Var, Var)>) -> Result<Var> {
        let (h, c) = nn::lstm_step(tape, &self.p, x, self.h, self.c)?;
        match mask {
            Some((m, inv)) => {
                self.h = nn::masked_update(tape, h, self.h, m, inv)?;
                self.c = nn::masked_update(tape, c, self.c, m, inv)?;
            }
            None => {
                self.h = h;
                self.c = c;
            }
        }
        Ok(self.h)
    }
}

struct Pass<'t, 'c, 'r> {
    tape: &'t mut Tape,
    ctx: &'c mut ForwardCtx<'r>,
    rows: usize,
}

impl Pass<'_, '_, '_> {
    fn dropout(&mut self, x: Var) -> Result<Var> {
        match self.ctx.rng.as_deref_mut() {
            Some(rng) if self.ctx.dropout > 0.0 => nn::dropout(self.tape, x, self.ctx.dropout, rng, true),
            _ => Ok(x),
        }
    }

    fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let e = nn::embedding_lookup(self.tape, table, ids)?;
        self.dropout(e)
    }

    /// Posterior split, KL column and latent draw for one VAE.
    fn latent(&mut self, h: Var) -> Result<(Var, Var)> {
        let post = vae::split_posterior(self.tape, h)?;
        let kl = vae::kl_standard_normal(self.tape, &post)?;
        let half = self.tape.shape(post.mu)[1];
        let z = match self.ctx.rng.as_deref_mut() {
            Some(rng) if self.ctx.sample_latent => {
                let eps = vae::draw_eps(self.rows, half, rng);
                vae::reparameterize(self.tape, &post, eps)?
            }
            _ => post.mu,
        };
        Ok((z, kl))
    }
}

/// Run one variant over a batch.
pub fn forward(
    tape: &mut Tape,
    params: &ParamSet,
    bound: &Bound,
    batch: &SeqBatch,
    ctx: &mut ForwardCtx<'_>,
) -> Result<ForwardOutput> {
    use names::*;
    let variant = params.variant();
    let dims = params.dims();
    batch.validate(variant, &dims)?;
    let steps = batch.steps();
    if steps == 0 {
        return Err(Error::EmptyHistory(batch.users.first().copied().unwrap_or(0)));
    }
    let rows = batch.rows();
    let d = dims.d;
    let head_steps: Vec<usize> = match ctx.heads {
        HeadSteps::All => (0..steps).collect(),
        HeadSteps::Last => vec![steps - 1],
    };

    let mut pass = Pass { tape, ctx, rows };
    let tape_ref = &mut *pass.tape;

    let item_emb = bound.var(ITEM_EMB)?;
    let cat_emb = variant.uses_categories().then(|| bound.var(CAT_EMB)).transpose()?;
    let user_x = if variant.uses_users() {
        let table = bound.var(USER_EMB)?;
        Some(table)
    } else {
        None
    };

    let mut item_rnn = Some(Recurrent::new(tape_ref, bound, ITEM_RNN, rows, d)?);
    let mut cat_rnn = None;
    let mut back_rnn = None;
    let mut stack_cat_rnn = None;
    let mut stack_back_rnn = None;
    if variant != Variant::Lstm {
        cat_rnn = Some(Recurrent::new(tape_ref, bound, CAT_RNN, rows, d)?);
    }
    if matches!(variant, Variant::Ici | Variant::Tstm | Variant::STstm) {
        back_rnn = Some(Recurrent::new(tape_ref, bound, BACK_RNN, rows, d)?);
    }
    if variant == Variant::STstm {
        stack_cat_rnn = Some(Recurrent::new(tape_ref, bound, STACK_CAT_RNN, rows, d)?);
        stack_back_rnn = Some(Recurrent::new(tape_ref, bound, STACK_BACK_RNN, rows, d)?);
    }

    let user_x = match user_x {
        Some(table) => Some(pass.embed(table, &batch.users)?),
        None => None,
    };

    let mut logits: BTreeMap<Head, Vec<Var>> = variant.heads().iter().map(|&h| (h, Vec::new())).collect();
    let mut kls: BTreeMap<KlKind, Vec<Var>> = variant.kl_streams().iter().map(|&k| (k, Vec::new())).collect();

    for t in 0..steps {
        let mask = if batch.mask[t].iter().all(|&m| m) {
            None
        } else {
            let m: Vec<f64> = batch.mask[t].iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
            let inv: Vec<f64> = m.iter().map(|v| 1.0 - v).collect();
            let m = pass.tape.constant(Tensor::from_vec(rows, 1, m)?);
            let inv = pass.tape.constant(Tensor::from_vec(rows, 1, inv)?);
            Some((m, inv))
        };
        let emit = head_steps.contains(&t);
        let item_x = pass.embed(item_emb, &batch.items[t])?;
        let cat_x = match cat_emb {
            Some(table) => Some(pass.embed(table, &batch.cats[t])?),
            None => None,
        };

        let mut emit_head = |pass: &mut Pass, head: Head, input: Var, weight: &str| -> Result<()> {
            if emit {
                let w = bound.var(weight)?;
                let out = pass.tape.matmul_nt(input, w)?;
                logits.get_mut(&head).expect("declared head").push(out);
            }
            Ok(())
        };

        match variant {
            Variant::Lstm => {
                let h = item_rnn.as_mut().unwrap().step(pass.tape, item_x, mask)?;
                emit_head(&mut pass, Head::Item, h, ITEM_HEAD)?;
            }
            Variant::Ci => {
                let hc = cat_rnn.as_mut().unwrap().step(pass.tape, cat_x.unwrap(), mask)?;
                let x = pass.tape.concat(item_x, hc)?;
                let hi = item_rnn.as_mut().unwrap().step(pass.tape, x, mask)?;
                emit_head(&mut pass, Head::Category, hc, CAT_HEAD)?;
                emit_head(&mut pass, Head::Item, hi, ITEM_HEAD)?;
            }
            Variant::Ic | Variant::Ici => {
                let h1 = item_rnn.as_mut().unwrap().step(pass.tape, item_x, mask)?;
                let x = pass.tape.concat(cat_x.unwrap(), h1)?;
                let h2 = cat_rnn.as_mut().unwrap().step(pass.tape, x, mask)?;
                emit_head(&mut pass, Head::Category, h2, CAT_HEAD)?;
                if variant == Variant::Ici {
                    emit_head(&mut pass, Head::Item, h1, ITEM_HEAD)?;
                    let x = pass.tape.concat(item_x, h2)?;
                    let h3 = back_rnn.as_mut().unwrap().step(pass.tape, x, mask)?;
                    emit_head(&mut pass, Head::Back, h3, BACK_HEAD)?;
                }
            }
            Variant::Ivaec => {
                let h1 = item_rnn.as_mut().unwrap().step(pass.tape, item_x, mask)?;
                let (z, kl) = pass.latent(h1)?;
                kls.get_mut(&KlKind::Category).unwrap().push(kl);
                let wz = pass.tape.matmul_nt(z, bound.var(Z_PROJ)?)?;
                let x = pass.tape.concat(cat_x.unwrap(), wz)?;
                let h2 = cat_rnn.as_mut().unwrap().step(pass.tape, x, mask)?;
                emit_head(&mut pass, Head::Category, h2, CAT_HEAD)?;
            }
            Variant::Tstm | Variant::STstm => {
                let cat_x = cat_x.unwrap();
                let h1 = item_rnn.as_mut().unwrap().step(pass.tape, item_x, mask)?;
                emit_head(&mut pass, Head::Item, h1, ITEM_HEAD)?;
                let (z, kl_c) = pass.latent(h1)?;
                kls.get_mut(&KlKind::Category).unwrap().push(kl_c);
                let wz = pass.tape.matmul_nt(z, bound.var(Z_PROJ)?)?;
                let x = pass.tape.concat(cat_x, wz)?;
                let h2 = cat_rnn.as_mut().unwrap().step(pass.tape, x, mask)?;
                emit_head(&mut pass, Head::Category, h2, CAT_HEAD)?;
                let x = pass.tape.concat(item_x, h2)?;
                let mut top = back_rnn.as_mut().unwrap().step(pass.tape, x, mask)?;

                if variant == Variant::STstm {
                    let (z2, kl_s) = pass.latent(top)?;
                    kls.get_mut(&KlKind::StackCategory).unwrap().push(kl_s);
                    let wz2 = pass.tape.matmul_nt(z2, bound.var(STACK_Z_PROJ)?)?;
                    let x = pass.tape.concat(cat_x, wz2)?;
                    let h2s = stack_cat_rnn.as_mut().unwrap().step(pass.tape, x, mask)?;
                    emit_head(&mut pass, Head::StackCategory, h2s, STACK_CAT_HEAD)?;
                    let x = pass.tape.concat(item_x, h2s)?;
                    top = stack_back_rnn.as_mut().unwrap().step(pass.tape, x, mask)?;
                }

                let fused_in = pass.tape.concat(user_x.unwrap(), top)?;
                let hp = pass.tape.matmul(fused_in, bound.var(FUSION)?)?;
                let (zp, kl_i) = pass.latent(hp)?;
                kls.get_mut(&KlKind::Item).unwrap().push(kl_i);
                emit_head(&mut pass, Head::Personal, zp, LATENT_HEAD)?;
            }
        }
    }

    Ok(ForwardOutput {
        variant,
        steps: head_steps,
        logits: variant
            .heads()
            .iter()
            .map(|&head| HeadLogits {
                head,
                steps: logits.remove(&head).unwrap_or_default(),
            })
            .collect(),
        kls: variant
            .kl_streams()
            .iter()
            .map(|&kind| KlStream {
                kind,
                steps: kls.remove(&kind).unwrap_or_default(),
            })
            .collect(),
    })
}

/// Options for ranking-time scoring.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ScoreOptions {
    /// Rank `tstm`/`s-tstm` by the sum of item-head and personal-head log-probabilities.
    pub combine_heads: bool,
    /// Draw latents at evaluation instead of using posterior means.
    pub sample_at_eval: bool,
    pub seed: u64,
}

/// A user history to score from, truncated by the caller.
#[derive(Clone, Copy, Debug)]
pub struct History<'a> {
    pub user: usize,
    pub items: &'a [usize],
    pub cats: &'a [usize],
}

fn final_logits(
    params: &ParamSet,
    histories: &[History<'_>],
    opts: &ScoreOptions,
    want: &[Head],
) -> Result<Vec<Vec<Vec<f64>>>> {
    let rows: Vec<(usize, &[usize], &[usize])> = histories.iter().map(|h| (h.user, h.items, h.cats)).collect();
    let batch = SeqBatch::from_histories(&rows)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(opts.seed);
    let mut ctx = if opts.sample_at_eval {
        ForwardCtx {
            heads: HeadSteps::Last,
            dropout: 0.0,
            sample_latent: true,
            rng: Some(&mut rng),
        }
    } else {
        ForwardCtx::mean_path(HeadSteps::Last)
    };
    let out = forward(&mut tape, params, &bound, &batch, &mut ctx)?;
    want.iter()
        .map(|&head| {
            let hl = out.head(head).ok_or(Error::Contract {
                variant: params.variant().tag(),
                what: "the requested head",
            })?;
            let v = *hl.steps.last().expect("last step emitted");
            Ok((0..histories.len()).map(|b| tape.row_values(v, b).to_vec()).collect())
        })
        .collect()
}

/// Final-step item scores over the whole catalog, indexed by `item_id − 1`.
pub fn item_scores(params: &ParamSet, histories: &[History<'_>], opts: &ScoreOptions) -> Result<Vec<Vec<f64>>> {
    let variant = params.variant();
    let head = variant.ranking_head().ok_or(Error::Contract {
        variant: variant.tag(),
        what: "an item ranking head",
    })?;
    if opts.combine_heads && head == Head::Personal {
        let mut both = final_logits(params, histories, opts, &[Head::Item, Head::Personal])?;
        let personal = both.pop().unwrap();
        let item = both.pop().unwrap();
        return Ok(item
            .into_iter()
            .zip(personal)
            .map(|(a, b)| {
                log_softmax(&a)
                    .into_iter()
                    .zip(log_softmax(&b))
                    .map(|(x, y)| x + y)
                    .collect()
            })
            .collect());
    }
    Ok(final_logits(params, histories, opts, &[head])?.pop().unwrap())
}

/// Final-step category scores, indexed by `category_id − 1`.
pub fn category_scores(params: &ParamSet, histories: &[History<'_>], opts: &ScoreOptions) -> Result<Vec<Vec<f64>>> {
    let variant = params.variant();
    let head = variant.category_head().ok_or(Error::Contract {
        variant: variant.tag(),
        what: "a category head",
    })?;
    Ok(final_logits(params, histories, opts, &[head])?.pop().unwrap())
}

/// Scores of the given candidate item ids for one history.
pub fn score_candidates(
    params: &ParamSet,
    history: History<'_>,
    candidates: &[usize],
    opts: &ScoreOptions,
) -> Result<Vec<f64>> {
    if history.items.is_empty() {
        return Err(Error::EmptyHistory(history.user));
    }
    let n_items = params.dims().n_items;
    if let Some(&bad) = candidates.iter().find(|&&c| c == 0 || c > n_items) {
        return Err(Error::IndexOutOfRange {
            what: "candidate item",
            index: bad,
            size: n_items + 1,
        });
    }
    let all = item_scores(params, &[history], opts)?.pop().unwrap();
    Ok(candidates.iter().map(|&c| all[c - 1]).collect())
}
