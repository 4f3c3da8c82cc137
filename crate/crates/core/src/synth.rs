//! Synthetic Markov-chain category sequences with exact Bayes oracles.
//!
//! Each user starts in a uniformly drawn category, walks the transition matrix
//! `P` for `T` steps and picks an item uniformly inside the current category.
//! Category `k` owns items `k·M .. (k+1)·M`.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{leave_one_out_split, CatalogMaps, InteractionEvent, Split, SplitDataset};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::eval::{evaluate, evaluate_categories, EvalCase, EvalProtocol, EvalReport, Scorer, TieRule, CATEGORY_CUTOFFS};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub k: usize,
    pub m: usize,
    pub t: usize,
    pub users: usize,
    /// Row-stochastic `k × k` transition matrix.
    pub p: Vec<Vec<f64>>,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(k: usize, m: usize, t: usize, users: usize, p: Vec<Vec<f64>>, seed: u64) -> Result<Self> {
        let spec = SynthSpec { k, m, t, users, p, seed };
        spec.validate()?;
        Ok(spec)
    }

    /// `c → c+1 mod K` with probability one.
    pub fn det_cycle(k: usize, m: usize, t: usize, users: usize, seed: u64) -> Result<Self> {
        let p = (0..k)
            .map(|c| (0..k).map(|j| if j == (c + 1) % k { 1.0 } else { 0.0 }).collect())
            .collect();
        Self::new(k, m, t, users, p, seed)
    }

    /// Advance to the next category with probability `main`, otherwise jump uniformly to any other.
    pub fn noisy_cycle(k: usize, m: usize, t: usize, users: usize, main: f64, seed: u64) -> Result<Self> {
        if k < 2 {
            return Err(Error::Config("a noisy cycle needs at least two categories".into()));
        }
        let rest = (1.0 - main) / (k - 1) as f64;
        let p = (0..k)
            .map(|c| (0..k).map(|j| if j == (c + 1) % k { main } else { rest }).collect())
            .collect();
        Self::new(k, m, t, users, p, seed)
    }

    pub fn uniform(k: usize, m: usize, t: usize, users: usize, seed: u64) -> Result<Self> {
        Self::new(k, m, t, users, vec![vec![1.0 / k as f64; k]; k], seed)
    }

    /// The acceptance benchmark: 8-category deterministic cycle, 25 items each.
    pub fn default_benchmark() -> Self {
        Self::det_cycle(8, 25, 30, 2000, 7).expect("valid default spec")
    }

    pub fn n_items(&self) -> usize {
        self.k * self.m
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.m == 0 || self.t == 0 {
            return Err(Error::Config("K, M and T must be positive".into()));
        }
        if self.p.len() != self.k || self.p.iter().any(|r| r.len() != self.k) {
            return Err(Error::Config(format!("transition matrix must be {0}×{0}", self.k)));
        }
        for (c, row) in self.p.iter().enumerate() {
            if row.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
                return Err(Error::Config(format!("row {c} has an entry outside [0, 1]")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-12 {
                return Err(Error::Config(format!("row {c} sums to {s}, not 1")));
            }
        }
        Ok(())
    }

    /// `key = value` lines; `P` rows are space-separated.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "K = {}\nM = {}\nT = {}\nU = {}\nseed = {}\n",
            self.k, self.m, self.t, self.users, self.seed
        );
        for (c, row) in self.p.iter().enumerate() {
            let vals: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(s, "P{c} = {}", vals.join(" "));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let (mut k, mut m, mut t, mut u, mut seed) = (None, None, None, None, None);
        let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(idx + 1, "expected key = value"))?;
            let (key, value) = (key.trim(), value.trim());
            let int = |v: &str| v.parse::<u64>().map_err(|_| Error::parse(idx + 1, format!("bad integer `{v}`")));
            match key {
                "K" => k = Some(int(value)? as usize),
                "M" => m = Some(int(value)? as usize),
                "T" => t = Some(int(value)? as usize),
                "U" => u = Some(int(value)? as usize),
                "seed" => seed = Some(int(value)?),
                _ if key.starts_with('P') => {
                    let r: usize = key[1..].parse().map_err(|_| Error::parse(idx + 1, format!("bad row key `{key}`")))?;
                    let vals = value
                        .split_whitespace()
                        .map(|v| v.parse::<f64>().map_err(|_| Error::parse(idx + 1, format!("bad probability `{v}`"))))
                        .collect::<Result<Vec<_>>>()?;
                    rows.push((r, vals));
                }
                _ => return Err(Error::parse(idx + 1, format!("unknown key `{key}`"))),
            }
        }
        let need = |v: Option<u64>, name: &str| v.ok_or_else(|| Error::Config(format!("spec is missing `{name}`")));
        let k = need(k.map(|x| x as u64), "K")? as usize;
        rows.sort_by_key(|r| r.0);
        if rows.iter().enumerate().any(|(i, r)| r.0 != i) {
            return Err(Error::Config("transition rows must be P0..P{K-1}".into()));
        }
        Self::new(
            k,
            need(m.map(|x| x as u64), "M")? as usize,
            need(t.map(|x| x as u64), "T")? as usize,
            need(u.map(|x| x as u64), "U")? as usize,
            rows.into_iter().map(|r| r.1).collect(),
            need(seed, "seed")?,
        )
    }
}

fn draw_row<R: Rng>(row: &[f64], rng: &mut R) -> usize {
    let x: f64 = rng.random();
    let mut acc = 0.0;
    for (j, &p) in row.iter().enumerate() {
        acc += p;
        if x < acc {
            return j;
        }
    }
    // rounding left a sliver above the last cumulative sum
    row.iter().rposition(|&p| p > 0.0).unwrap_or(row.len() - 1)
}

/// Canonical events for every user, in user order, with timestamps `0..T`.
pub fn generate(spec: &SynthSpec) -> Result<Vec<InteractionEvent>> {
    spec.validate()?;
    let mut events = Vec::with_capacity(spec.users * spec.t);
    for u in 0..spec.users {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, u as u64));
        let mut c = rng.random_range(0..spec.k);
        for step in 0..spec.t {
            let item = c * spec.m + rng.random_range(0..spec.m);
            events.push(InteractionEvent {
                user: format!("u{u}"),
                item: format!("i{item}"),
                category: format!("c{c}"),
                timestamp: step as u64,
            });
            c = draw_row(&spec.p[c], &mut rng);
        }
    }
    Ok(events)
}

/// Generate and split in one go.
pub fn generate_split(spec: &SynthSpec) -> Result<SplitDataset> {
    Ok(leave_one_out_split(&generate(spec)?).0)
}

fn index_of(name: Option<&str>, prefix: char) -> Result<usize> {
    name.and_then(|n| n.strip_prefix(prefix))
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| Error::Config(format!("catalog entry is not a synthetic `{prefix}` id")))
}

/// Scores by the true next-step probabilities of a known spec.
pub struct BayesScorer<'s> {
    spec: &'s SynthSpec,
    /// Synthetic category of each dense item id − 1.
    item_k: Vec<usize>,
    /// Synthetic category of each dense category id − 1.
    cat_k: Vec<usize>,
}

impl<'s> BayesScorer<'s> {
    pub fn new(spec: &'s SynthSpec, catalog: &CatalogMaps) -> Result<Self> {
        let item_k = (1..=catalog.n_items())
            .map(|i| index_of(catalog.item_name(i), 'i').map(|n| n / spec.m))
            .collect::<Result<Vec<_>>>()?;
        let cat_k = (1..=catalog.n_categories())
            .map(|c| index_of(catalog.category_name(c), 'c'))
            .collect::<Result<Vec<_>>>()?;
        if item_k.iter().chain(&cat_k).any(|&k| k >= spec.k) {
            return Err(Error::Config("catalog does not match the spec".into()));
        }
        Ok(BayesScorer { spec, item_k, cat_k })
    }

    fn next_row(&self, case: &EvalCase<'_>) -> Result<&[f64]> {
        let last = *case.cats.last().ok_or(Error::EmptyHistory(case.user))?;
        Ok(&self.spec.p[self.cat_k[last - 1]])
    }
}

impl Scorer for BayesScorer<'_> {
    fn name(&self) -> String {
        "bayes".into()
    }

    fn item_scores(&self, cases: &[EvalCase<'_>]) -> Result<Vec<Vec<f64>>> {
        let m = self.spec.m as f64;
        cases
            .iter()
            .map(|c| {
                let row = self.next_row(c)?;
                Ok(self.item_k.iter().map(|&k| row[k] / m).collect())
            })
            .collect()
    }

    fn category_scores(&self, cases: &[EvalCase<'_>]) -> Result<Vec<Vec<f64>>> {
        cases
            .iter()
            .map(|c| {
                let row = self.next_row(c)?;
                Ok(self.cat_k.iter().map(|&k| row[k]).collect())
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleReport {
    /// Expected argmax accuracy for the next category.
    pub category_accuracy: f64,
    pub categories: EvalReport,
    pub items: EvalReport,
}

impl OracleReport {
    pub fn to_text(&self) -> String {
        let mut s = format!("bayes category accuracy: {:.6}\n", self.category_accuracy);
        s.push_str(&self.categories.to_string());
        s.push_str(&self.items.to_string());
        s
    }
}

/// Exact Bayes ranking under `protocol`. Ties are credited in expectation.
pub fn bayes_oracle(spec: &SynthSpec, ds: &SplitDataset, protocol: &EvalProtocol, split: Split) -> Result<OracleReport> {
    let scorer = BayesScorer::new(spec, &ds.catalog)?;
    let protocol = EvalProtocol {
        tie_rule: TieRule::Expected,
        ..protocol.clone()
    };
    let mut cat_protocol = protocol.clone();
    cat_protocol.cutoffs = CATEGORY_CUTOFFS.to_vec();
    let categories = evaluate_categories(&scorer, ds, &cat_protocol, split)?;
    let items = evaluate(&scorer, ds, &protocol, split)?;
    Ok(OracleReport {
        category_accuracy: categories.hit_at(1).expect("cutoff 1 present"),
        categories,
        items,
    })
}
