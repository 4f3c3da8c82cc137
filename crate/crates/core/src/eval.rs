//! Ranking evaluation: sampled unvisited negatives, Hit@n and NDCG@n, and
//! category ranking over the full category set.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::data::{Split, SplitDataset};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::models::{self, History, ParamSet, ScoreOptions};

pub const DEFAULT_CUTOFFS: [usize; 5] = [1, 5, 10, 15, 20];
pub const CATEGORY_CUTOFFS: [usize; 4] = [1, 5, 10, 20];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Negatives {
    /// Truth plus this many distinct unvisited items.
    Sampled(usize),
    /// Every catalog item is a candidate, visited or not.
    FullCatalog,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TieRule {
    /// The truth ranks below every candidate it ties with.
    Pessimistic,
    /// Credit averaged over all positions inside the tie group.
    Expected,
}

impl TieRule {
    pub fn name(self) -> &'static str {
        match self {
            TieRule::Pessimistic => "pessimistic",
            TieRule::Expected => "expected",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalProtocol {
    pub negatives: Negatives,
    pub cutoffs: Vec<usize>,
    pub seed: u64,
    pub tie_rule: TieRule,
    /// Histories are truncated to their most recent `max_history` events.
    pub max_history: usize,
    /// When evaluating the test split, append the validation event to the history.
    pub include_valid: bool,
    /// Users scored per forward pass.
    pub batch_size: usize,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            negatives: Negatives::Sampled(500),
            cutoffs: DEFAULT_CUTOFFS.to_vec(),
            seed: 0,
            tie_rule: TieRule::Pessimistic,
            max_history: 550,
            include_valid: true,
            batch_size: 256,
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.negatives == Negatives::Sampled(0) {
            return Err(Error::Config("at least one negative is required".into()));
        }
        if self.cutoffs.is_empty() || self.cutoffs[0] == 0 || self.cutoffs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "cutoffs must be positive and strictly ascending, got {:?}",
                self.cutoffs
            )));
        }
        if self.max_history == 0 || self.batch_size == 0 {
            return Err(Error::Config("max_history and batch_size must be positive".into()));
        }
        Ok(())
    }

    fn to_json(&self) -> Value {
        json!({
            "negatives": match self.negatives {
                Negatives::Sampled(n) => json!(n),
                Negatives::FullCatalog => json!("full"),
            },
            "cutoffs": self.cutoffs,
            "seed": self.seed,
            "tie_rule": self.tie_rule.name(),
            "max_history": self.max_history,
            "include_valid": self.include_valid,
        })
    }
}

/// Per-(user, split) seed for negative sampling; shared by every model evaluated under one protocol.
pub fn negative_seed(seed: u64, user: usize, split: Split) -> u64 {
    let tag = match split {
        Split::Valid => 0,
        Split::Test => 1,
    };
    derive_seed(seed, (user as u64) << 1 | tag)
}

/// `n` distinct items from `1..=n_items` absent from `seen`, which must be sorted and deduplicated.
pub fn sample_negatives<R: Rng + ?Sized>(
    user: usize,
    seen: &[usize],
    n_items: usize,
    n: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let seen_in_range = seen.iter().filter(|&&i| i >= 1 && i <= n_items).count();
    let available = n_items - seen_in_range;
    if available < n {
        return Err(Error::InsufficientNegatives {
            user,
            available,
            requested: n,
        });
    }
    let seen: Vec<usize> = seen.iter().copied().filter(|&i| i >= 1 && i <= n_items).collect();
    // unvisited items before seen[j]; the k-th unvisited item skips every seen item with gap <= k
    let gaps: Vec<usize> = seen.iter().enumerate().map(|(j, &s)| s - 1 - j).collect();
    let kth = |k: usize| k + 1 + gaps.partition_point(|&g| g <= k);
    Ok(index::sample(rng, available, n).into_iter().map(kth).collect())
}

/// Where the truth lands among the candidates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RankOutcome {
    /// Candidates scoring strictly above the truth (NaN counts as above).
    pub greater: usize,
    /// Other candidates scoring exactly the truth's score.
    pub ties: usize,
}

impl RankOutcome {
    /// 0-based pessimistic rank.
    pub fn rank(&self) -> usize {
        self.greater + self.ties
    }

    pub fn hit(&self, n: usize, rule: TieRule) -> f64 {
        match rule {
            TieRule::Pessimistic => hit_at_n(self.rank(), n),
            TieRule::Expected => {
                let inside = n.saturating_sub(self.greater).min(self.ties + 1);
                inside as f64 / (self.ties + 1) as f64
            }
        }
    }

    pub fn ndcg(&self, n: usize, rule: TieRule) -> f64 {
        match rule {
            TieRule::Pessimistic => ndcg_at_n(self.rank(), n),
            TieRule::Expected => {
                let total: f64 = (0..=self.ties).map(|k| ndcg_at_n(self.greater + k, n)).sum();
                total / (self.ties + 1) as f64
            }
        }
    }
}

/// Compare `scores[truth]` against every other candidate.
pub fn rank_outcome(scores: &[f64], truth: usize) -> Result<RankOutcome> {
    let t = *scores.get(truth).ok_or(Error::IndexOutOfRange {
        what: "truth candidate",
        index: truth,
        size: scores.len(),
    })?;
    let mut out = RankOutcome { greater: 0, ties: 0 };
    for (k, &s) in scores.iter().enumerate() {
        if k == truth {
            continue;
        }
        if s == t {
            out.ties += 1;
        } else if !(s < t) {
            out.greater += 1;
        }
    }
    Ok(out)
}

/// Pessimistic 0-based rank: strictly greater candidates plus ties.
pub fn rank_ground_truth(scores: &[f64], truth: usize) -> Result<usize> {
    rank_outcome(scores, truth).map(|o| o.rank())
}

pub fn hit_at_n(rank: usize, n: usize) -> f64 {
    if rank < n {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at_n(rank: usize, n: usize) -> f64 {
    if rank < n {
        1.0 / ((rank + 2) as f64).log2()
    } else {
        0.0
    }
}

/// One held-out prediction: a (truncated) history and its next event.
#[derive(Clone, Copy, Debug)]
pub struct EvalCase<'a> {
    pub user: usize,
    pub items: &'a [usize],
    pub cats: &'a [usize],
    pub truth_item: usize,
    pub truth_cat: usize,
}

impl<'a> EvalCase<'a> {
    pub fn history(&self) -> History<'a> {
        History {
            user: self.user,
            items: self.items,
            cats: self.cats,
        }
    }
}

/// Anything that scores the whole catalog from a history.
pub trait Scorer {
    fn name(&self) -> String;

    /// One row per case; entry `k` scores item `k + 1`.
    fn item_scores(&self, cases: &[EvalCase<'_>]) -> Result<Vec<Vec<f64>>>;

    /// One row per case; entry `k` scores category `k + 1`.
    fn category_scores(&self, cases: &[EvalCase<'_>]) -> Result<Vec<Vec<f64>>> {
        let _ = cases;
        Err(Error::Config(format!("scorer `{}` has no category scores", self.name())))
    }
}

/// A trained parameter set.
pub struct ModelScorer<'p> {
    pub params: &'p ParamSet,
    pub opts: ScoreOptions,
}

impl Scorer for ModelScorer<'_> {
    fn name(&self) -> String {
        self.params.variant().tag().to_string()
    }

    fn item_scores(&self, cases: &[EvalCase<'_>]) -> Result<Vec<Vec<f64>>> {
        let h: Vec<History> = cases.iter().map(EvalCase::history).collect();
        models::item_scores(self.params, &h, &self.opts)
    }

    fn category_scores(&self, cases: &[EvalCase<'_>]) -> Result<Vec<Vec<f64>>> {
        let h: Vec<History> = cases.iter().map(EvalCase::history).collect();
        models::category_scores(self.params, &h, &self.opts)
    }
}

/// Aggregated metrics for one evaluation run.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub scorer: String,
    pub split: Split,
    pub target: &'static str,
    pub protocol: EvalProtocol,
    pub hit: Vec<f64>,
    pub ndcg: Vec<f64>,
    /// Pessimistic rank of each evaluated case, in user order.
    pub ranks: Vec<usize>,
}

impl EvalReport {
    pub fn users(&self) -> usize {
        self.ranks.len()
    }

    fn at(&self, table: &[f64], n: usize) -> Option<f64> {
        self.protocol.cutoffs.iter().position(|&c| c == n).map(|k| table[k])
    }

    pub fn hit_at(&self, n: usize) -> Option<f64> {
        self.at(&self.hit, n)
    }

    pub fn ndcg_at(&self, n: usize) -> Option<f64> {
        self.at(&self.ndcg, n)
    }

    pub fn rank_histogram(&self) -> BTreeMap<usize, usize> {
        let mut h = BTreeMap::new();
        for &r in &self.ranks {
            *h.entry(r).or_insert(0) += 1;
        }
        h
    }

    pub fn to_json(&self) -> Value {
        let per_cutoff = |table: &[f64]| {
            let m: serde_json::Map<String, Value> = self
                .protocol
                .cutoffs
                .iter()
                .zip(table)
                .map(|(c, v)| (c.to_string(), json!(v)))
                .collect();
            Value::Object(m)
        };
        let hist: serde_json::Map<String, Value> =
            self.rank_histogram().into_iter().map(|(r, c)| (r.to_string(), json!(c))).collect();
        json!({
            "variant": self.scorer,
            "split": self.split.name(),
            "target": self.target,
            "users": self.users(),
            "protocol": self.protocol.to_json(),
            "metrics": { "hit": per_cutoff(&self.hit), "ndcg": per_cutoff(&self.ndcg) },
            "per_user_rank_histogram": Value::Object(hist),
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("cutoff,hit,ndcg\n");
        for (k, c) in self.protocol.cutoffs.iter().enumerate() {
            s.push_str(&format!("{c},{},{}\n", self.hit[k], self.ndcg[k]));
        }
        s
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} {} ({}, {} users)",
            self.scorer,
            self.split.name(),
            self.target,
            self.users()
        )?;
        writeln!(f, "{:>6}  {:>8}  {:>8}", "n", "Hit@n", "NDCG@n")?;
        for (k, c) in self.protocol.cutoffs.iter().enumerate() {
            writeln!(f, "{c:>6}  {:>8.4}  {:>8.4}", self.hit[k], self.ndcg[k])?;
        }
        Ok(())
    }
}

struct Accumulator {
    hit: Vec<f64>,
    ndcg: Vec<f64>,
    ranks: Vec<usize>,
}

impl Accumulator {
    fn new(cutoffs: usize) -> Self {
        Accumulator {
            hit: vec![0.0; cutoffs],
            ndcg: vec![0.0; cutoffs],
            ranks: Vec::new(),
        }
    }

    fn push(&mut self, o: RankOutcome, protocol: &EvalProtocol) {
        for (k, &n) in protocol.cutoffs.iter().enumerate() {
            self.hit[k] += o.hit(n, protocol.tie_rule);
            self.ndcg[k] += o.ndcg(n, protocol.tie_rule);
        }
        self.ranks.push(o.rank());
    }

    fn finish(self, scorer: String, split: Split, target: &'static str, protocol: &EvalProtocol) -> Result<EvalReport> {
        let n = self.ranks.len();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        let mean = |v: Vec<f64>| v.into_iter().map(|s| s / n as f64).collect();
        Ok(EvalReport {
            scorer,
            split,
            target,
            protocol: protocol.clone(),
            hit: mean(self.hit),
            ndcg: mean(self.ndcg),
            ranks: self.ranks,
        })
    }
}

struct OwnedCase {
    user: usize,
    items: Vec<usize>,
    cats: Vec<usize>,
    truth: (usize, usize),
}

fn cases(ds: &SplitDataset, protocol: &EvalProtocol, split: Split) -> Vec<OwnedCase> {
    ds.users
        .iter()
        .enumerate()
        .map(|(user, s)| {
            let (mut items, mut cats, truth) = s.eval_case(split, protocol.include_valid);
            if items.len() > protocol.max_history {
                let cut = items.len() - protocol.max_history;
                items.drain(..cut);
                cats.drain(..cut);
            }
            OwnedCase {
                user,
                items,
                cats,
                truth,
            }
        })
        .collect()
}

fn borrow(c: &OwnedCase) -> EvalCase<'_> {
    EvalCase {
        user: c.user,
        items: &c.items,
        cats: &c.cats,
        truth_item: c.truth.0,
        truth_cat: c.truth.1,
    }
}

/// Candidate item ids for one case, truth first.
pub fn candidates_for(ds: &SplitDataset, protocol: &EvalProtocol, split: Split, user: usize) -> Result<Vec<usize>> {
    let s = &ds.users[user];
    let truth = match split {
        Split::Valid => s.valid.0,
        Split::Test => s.test.0,
    };
    let n_items = ds.catalog.n_items();
    match protocol.negatives {
        Negatives::FullCatalog => {
            let mut c = vec![truth];
            c.extend((1..=n_items).filter(|&i| i != truth));
            Ok(c)
        }
        Negatives::Sampled(n) => {
            let mut rng = ChaCha8Rng::seed_from_u64(negative_seed(protocol.seed, user, split));
            let mut c = vec![truth];
            c.extend(sample_negatives(user, &s.seen_items(), n_items, n, &mut rng)?);
            Ok(c)
        }
    }
}

/// Item ranking of the held-out event of every user.
pub fn evaluate(scorer: &dyn Scorer, ds: &SplitDataset, protocol: &EvalProtocol, split: Split) -> Result<EvalReport> {
    protocol.validate()?;
    if ds.users.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let all = cases(ds, protocol, split);
    let mut acc = Accumulator::new(protocol.cutoffs.len());
    for chunk in all.chunks(protocol.batch_size) {
        let batch: Vec<EvalCase> = chunk.iter().map(borrow).collect();
        let scores = scorer.item_scores(&batch)?;
        for (case, row) in chunk.iter().zip(scores) {
            let cand = candidates_for(ds, protocol, split, case.user)?;
            let picked: Vec<f64> = cand.iter().map(|&i| row[i - 1]).collect();
            acc.push(rank_outcome(&picked, 0)?, protocol);
        }
    }
    acc.finish(scorer.name(), split, "item", protocol)
}

/// Rank the held-out category among all categories. Negative sampling settings are ignored.
pub fn evaluate_categories(
    scorer: &dyn Scorer,
    ds: &SplitDataset,
    protocol: &EvalProtocol,
    split: Split,
) -> Result<EvalReport> {
    protocol.validate()?;
    if ds.users.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let all = cases(ds, protocol, split);
    let mut acc = Accumulator::new(protocol.cutoffs.len());
    for chunk in all.chunks(protocol.batch_size) {
        let batch: Vec<EvalCase> = chunk.iter().map(borrow).collect();
        let scores = scorer.category_scores(&batch)?;
        for (case, row) in chunk.iter().zip(scores) {
            acc.push(rank_outcome(&row, case.truth.1 - 1)?, protocol);
        }
    }
    acc.finish(scorer.name(), split, "category", protocol)
}

/// Category ranking at the category cutoffs, with a pessimistic tie rule.
pub fn category_accuracy(scorer: &dyn Scorer, ds: &SplitDataset, split: Split) -> Result<EvalReport> {
    let protocol = EvalProtocol {
        cutoffs: CATEGORY_CUTOFFS.to_vec(),
        ..EvalProtocol::default()
    };
    evaluate_categories(scorer, ds, &protocol, split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CatalogMaps, UserSplit};

    fn toy(n_users: usize, n_items: usize) -> SplitDataset {
        let users = (0..n_users)
            .map(|u| {
                let items: Vec<usize> = (0..3).map(|k| (u * 7 + k * 3) % n_items + 1).collect();
                UserSplit {
                    train_items: items.clone(),
                    train_cats: vec![1; 3],
                    valid: ((u * 5 + 1) % n_items + 1, 1),
                    test: ((u * 11 + 2) % n_items + 1, 1),
                }
            })
            .collect();
        SplitDataset {
            catalog: CatalogMaps::default(),
            users,
        }
    }

    struct Fixed(Box<dyn Fn(&EvalCase) -> Vec<f64>>);

    impl Scorer for Fixed {
        fn name(&self) -> String {
            "fixed".into()
        }
        fn item_scores(&self, cases: &[EvalCase<'_>]) -> Result<Vec<Vec<f64>>> {
            Ok(cases.iter().map(|c| (self.0)(c)).collect())
        }
        fn category_scores(&self, cases: &[EvalCase<'_>]) -> Result<Vec<Vec<f64>>> {
            Ok(cases.iter().map(|_| vec![0.0]).collect())
        }
    }

    fn ds_with_items(n: usize) -> SplitDataset {
        let mut ds = toy(8, n);
        // catalog size drives negative sampling; fake it with placeholder names
        let events: Vec<_> = (1..=n)
            .map(|i| crate::data::InteractionEvent {
                user: "x".into(),
                item: format!("{i}"),
                category: "c".into(),
                timestamp: i as u64,
            })
            .collect();
        ds.catalog = crate::data::leave_one_out_split(&events).0.catalog;
        ds
    }

    #[test]
    fn metric_values() {
        assert_eq!(hit_at_n(0, 1), 1.0);
        assert_eq!(hit_at_n(5, 5), 0.0);
        assert_eq!(ndcg_at_n(0, 1), 1.0);
        assert!((ndcg_at_n(3, 5) - 0.430_676_558).abs() < 1e-8);
        assert_eq!(ndcg_at_n(7, 5), 0.0);
    }

    #[test]
    fn tie_rules() {
        assert_eq!(rank_ground_truth(&[3.0, 1.0, 2.0], 0).unwrap(), 0);
        assert_eq!(rank_ground_truth(&[0.5; 501], 0).unwrap(), 500);
        assert!(rank_ground_truth(&[1.0], 3).is_err());
        let o = RankOutcome { greater: 1, ties: 3 };
        assert_eq!(o.hit(2, TieRule::Expected), 0.25);
        assert_eq!(o.hit(10, TieRule::Expected), 1.0);
        assert_eq!(o.hit(1, TieRule::Expected), 0.0);
        assert_eq!(o.hit(4, TieRule::Pessimistic), 0.0);
    }

    #[test]
    fn negatives_complement_and_determinism() {
        let seen = vec![2, 5, 6];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut all = sample_negatives(0, &seen, 9, 6, &mut rng).unwrap();
        all.sort_unstable();
        assert_eq!(all, vec![1, 3, 4, 7, 8, 9]);
        let a = sample_negatives(0, &seen, 50, 20, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = sample_negatives(0, &seen, 50, 20, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            sample_negatives(3, &seen, 9, 7, &mut rng),
            Err(Error::InsufficientNegatives { user: 3, available: 6, requested: 7 })
        ));
    }

    #[test]
    fn perfect_and_constant_scorers() {
        let ds = ds_with_items(60);
        let protocol = EvalProtocol {
            negatives: Negatives::Sampled(40),
            ..EvalProtocol::default()
        };
        let perfect = Fixed(Box::new(|c: &EvalCase| {
            let mut v = vec![0.0; 60];
            v[c.truth_item - 1] = 1.0;
            v
        }));
        let r = evaluate(&perfect, &ds, &protocol, Split::Test).unwrap();
        assert_eq!(r.hit_at(1), Some(1.0));
        assert_eq!(r.ndcg_at(1), Some(1.0));

        let constant = Fixed(Box::new(|_: &EvalCase| vec![0.0; 60]));
        let r = evaluate(&constant, &ds, &protocol, Split::Valid).unwrap();
        assert_eq!(r.hit_at(20), Some(0.0));
        assert!(r.ranks.iter().all(|&k| k == 40));
    }

    #[test]
    fn single_category_always_hits() {
        let ds = ds_with_items(30);
        let s = Fixed(Box::new(|_: &EvalCase| vec![0.0; 30]));
        let r = category_accuracy(&s, &ds, Split::Test).unwrap();
        assert!(r.hit.iter().all(|&h| h == 1.0));
    }

    #[test]
    fn report_serialization() {
        let ds = ds_with_items(60);
        let protocol = EvalProtocol {
            negatives: Negatives::Sampled(10),
            cutoffs: vec![1, 5],
            ..EvalProtocol::default()
        };
        let s = Fixed(Box::new(|c: &EvalCase| (1..=60).map(|i| ((i * 31 + c.user) % 17) as f64).collect()));
        let r = evaluate(&s, &ds, &protocol, Split::Test).unwrap();
        let j = r.to_json();
        assert_eq!(j["split"], "test");
        assert_eq!(j["metrics"]["hit"]["5"].as_f64(), r.hit_at(5));
        let hist_total: u64 = j["per_user_rank_histogram"].as_object().unwrap().values().map(|v| v.as_u64().unwrap()).sum();
        assert_eq!(hist_total, 8);
        assert!(r.to_csv().starts_with("cutoff,hit,ndcg\n1,"));
    }

    #[test]
    fn protocol_validation() {
        let mut p = EvalProtocol::default();
        assert!(p.validate().is_ok());
        p.cutoffs = vec![5, 1];
        assert!(p.validate().is_err());
        p.cutoffs = vec![1];
        p.negatives = Negatives::Sampled(0);
        assert!(p.validate().is_err());
    }
}
