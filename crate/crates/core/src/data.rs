//! Interaction logs: parsing, n-core filtering, leave-one-out splits and
//! sliding training windows.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const SPLIT_HEADER: &str = "SEQTRANS-SPLIT v1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionEvent {
    pub user: String,
    pub item: String,
    pub category: String,
    pub timestamp: u64,
}

/// Iterate lines of a possibly non-UTF-8 stream (MovieLens ships Latin-1 titles).
fn lossy_lines<R: Read>(reader: R) -> impl Iterator<Item = std::io::Result<String>> {
    let mut reader = BufReader::new(reader);
    std::iter::from_fn(move || {
        let mut buf = Vec::new();
        match reader.read_until(b'\n', &mut buf) {
            Ok(0) => None,
            Ok(_) => {
                while matches!(buf.last(), Some(b'\n' | b'\r')) {
                    buf.pop();
                }
                Some(Ok(String::from_utf8_lossy(&buf).into_owned()))
            }
            Err(e) => Some(Err(e)),
        }
    })
}

fn io_err(e: std::io::Error) -> Error {
    Error::io("<stream>", e)
}

/// Parse `user TAB item TAB category TAB timestamp` lines. Blank lines are skipped.
pub fn parse_canonical<R: Read>(reader: R) -> Result<Vec<InteractionEvent>> {
    let mut events = Vec::new();
    for (idx, line) in lossy_lines(reader).enumerate() {
        let line = line.map_err(io_err)?;
        let lineno = idx + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::parse(lineno, format!("expected 4 tab-separated fields, found {}", fields.len())));
        }
        if let Some(pos) = fields[..3].iter().position(|f| f.is_empty()) {
            return Err(Error::parse(lineno, format!("field {} is empty", pos + 1)));
        }
        let timestamp = fields[3]
            .trim()
            .parse::<u64>()
            .map_err(|e| Error::parse(lineno, format!("bad timestamp `{}`: {e}", fields[3])))?;
        events.push(InteractionEvent {
            user: fields[0].to_string(),
            item: fields[1].to_string(),
            category: fields[2].to_string(),
            timestamp,
        });
    }
    Ok(events)
}

pub fn write_canonical<W: Write>(events: &[InteractionEvent], writer: W) -> std::io::Result<()> {
    let mut w = BufWriter::new(writer);
    for e in events {
        writeln!(w, "{}\t{}\t{}\t{}", e.user, e.item, e.category, e.timestamp)?;
    }
    w.flush()
}

/// How a multi-genre movie picks its single category.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GenreRule {
    First,
    /// Pick one listed genre with a per-movie deterministic draw.
    RandomSeeded(u64),
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MovieLensReport {
    pub ratings: usize,
    pub dropped_unknown_movie: usize,
}

/// Read MovieLens-1M `ratings.dat` and `movies.dat`. Every rating becomes one event.
pub fn parse_movielens<R1: Read, R2: Read>(
    ratings: R1,
    movies: R2,
    rule: GenreRule,
) -> Result<(Vec<InteractionEvent>, MovieLensReport)> {
    let mut genre_of: HashMap<String, String> = HashMap::new();
    for (idx, line) in lossy_lines(movies).enumerate() {
        let line = line.map_err(io_err)?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split("::").collect();
        if fields.len() != 3 {
            return Err(Error::parse(idx + 1, format!("movies: expected MovieID::Title::Genres, found {} fields", fields.len())));
        }
        let genres: Vec<&str> = fields[2].split('|').filter(|g| !g.is_empty()).collect();
        if genres.is_empty() {
            return Err(Error::parse(idx + 1, "movies: no genre listed"));
        }
        let pick = match rule {
            GenreRule::First => 0,
            GenreRule::RandomSeeded(seed) => {
                let movie: u64 = fields[0].parse().unwrap_or(idx as u64);
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ movie.wrapping_mul(0x9E37_79B9_7F4A_7C15));
                rand::Rng::random_range(&mut rng, 0..genres.len())
            }
        };
        genre_of.insert(fields[0].to_string(), genres[pick].to_string());
    }

    let mut events = Vec::new();
    let mut report = MovieLensReport::default();
    for (idx, line) in lossy_lines(ratings).enumerate() {
        let line = line.map_err(io_err)?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split("::").collect();
        if fields.len() != 4 {
            return Err(Error::parse(
                idx + 1,
                format!("ratings: expected UserID::MovieID::Rating::Timestamp, found {} fields", fields.len()),
            ));
        }
        report.ratings += 1;
        let timestamp = fields[3]
            .parse::<u64>()
            .map_err(|e| Error::parse(idx + 1, format!("ratings: bad timestamp: {e}")))?;
        let Some(category) = genre_of.get(fields[1]) else {
            report.dropped_unknown_movie += 1;
            continue;
        };
        events.push(InteractionEvent {
            user: fields[0].to_string(),
            item: fields[1].to_string(),
            category: category.clone(),
            timestamp,
        });
    }
    Ok((events, report))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterMode {
    /// Repeat item and user pruning until nothing changes.
    Fixpoint,
    /// Prune items once, then users once.
    SinglePass,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FilterConfig {
    /// Items need at least this many distinct users.
    pub item_min: usize,
    /// Users need at least this many distinct items.
    pub user_min: usize,
    /// Afterwards, users need at least this many events (0 disables).
    pub user_min_records: usize,
    pub mode: FilterMode,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            item_min: 5,
            user_min: 5,
            user_min_records: 0,
            mode: FilterMode::Fixpoint,
        }
    }
}

struct Interned {
    users: Vec<u32>,
    items: Vec<u32>,
    n_users: usize,
    n_items: usize,
}

fn intern(events: &[InteractionEvent]) -> Interned {
    let mut u_ids: HashMap<&str, u32> = HashMap::new();
    let mut i_ids: HashMap<&str, u32> = HashMap::new();
    let mut users = Vec::with_capacity(events.len());
    let mut items = Vec::with_capacity(events.len());
    for e in events {
        let n = u_ids.len() as u32;
        users.push(*u_ids.entry(&e.user).or_insert(n));
        let n = i_ids.len() as u32;
        items.push(*i_ids.entry(&e.item).or_insert(n));
    }
    Interned {
        users,
        items,
        n_users: u_ids.len(),
        n_items: i_ids.len(),
    }
}

pub fn ncore_filter(events: &[InteractionEvent], cfg: &FilterConfig) -> Vec<InteractionEvent> {
    let ix = intern(events);
    let pairs: HashSet<(u32, u32)> = ix.users.iter().copied().zip(ix.items.iter().copied()).collect();
    let mut pairs: Vec<(u32, u32)> = pairs.into_iter().collect();
    pairs.sort_unstable();
    let mut user_alive = vec![true; ix.n_users];
    let mut item_alive = vec![true; ix.n_items];

    loop {
        let mut changed = false;
        let mut item_count = vec![0usize; ix.n_items];
        for &(u, i) in &pairs {
            if user_alive[u as usize] && item_alive[i as usize] {
                item_count[i as usize] += 1;
            }
        }
        for (i, alive) in item_alive.iter_mut().enumerate() {
            if *alive && item_count[i] < cfg.item_min {
                *alive = false;
                changed = true;
            }
        }
        let mut user_count = vec![0usize; ix.n_users];
        for &(u, i) in &pairs {
            if user_alive[u as usize] && item_alive[i as usize] {
                user_count[u as usize] += 1;
            }
        }
        for (u, alive) in user_alive.iter_mut().enumerate() {
            if *alive && user_count[u] < cfg.user_min {
                *alive = false;
                changed = true;
            }
        }
        if !changed || cfg.mode == FilterMode::SinglePass {
            break;
        }
    }

    let keep = |k: usize| user_alive[ix.users[k] as usize] && item_alive[ix.items[k] as usize];
    if cfg.user_min_records > 0 {
        let mut records = vec![0usize; ix.n_users];
        for k in 0..events.len() {
            if keep(k) {
                records[ix.users[k] as usize] += 1;
            }
        }
        for (u, alive) in user_alive.iter_mut().enumerate() {
            if records[u] < cfg.user_min_records {
                *alive = false;
            }
        }
    }
    events
        .iter()
        .enumerate()
        .filter(|&(k, _)| user_alive[ix.users[k] as usize] && item_alive[ix.items[k] as usize])
        .map(|(_, e)| e.clone())
        .collect()
}

/// Dense-id bijections. Users are 0-based; items and categories are 1-based with 0 reserved for padding.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CatalogMaps {
    users: Vec<String>,
    items: Vec<String>,
    categories: Vec<String>,
    /// Category id of each item, by `item_id − 1`, from its first occurrence.
    item_category: Vec<usize>,
    user_index: HashMap<String, usize>,
    item_index: HashMap<String, usize>,
    category_index: HashMap<String, usize>,
}

impl CatalogMaps {
    fn add_user(&mut self, ext: &str) -> usize {
        if let Some(&id) = self.user_index.get(ext) {
            return id;
        }
        self.users.push(ext.to_string());
        self.user_index.insert(ext.to_string(), self.users.len() - 1);
        self.users.len() - 1
    }

    fn add_category(&mut self, ext: &str) -> usize {
        if let Some(&id) = self.category_index.get(ext) {
            return id;
        }
        self.categories.push(ext.to_string());
        self.category_index.insert(ext.to_string(), self.categories.len());
        self.categories.len()
    }

    fn add_item(&mut self, ext: &str, category: usize) -> usize {
        if let Some(&id) = self.item_index.get(ext) {
            return id;
        }
        self.items.push(ext.to_string());
        self.item_category.push(category);
        self.item_index.insert(ext.to_string(), self.items.len());
        self.items.len()
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn n_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn user_id(&self, ext: &str) -> Option<usize> {
        self.user_index.get(ext).copied()
    }

    pub fn item_id(&self, ext: &str) -> Option<usize> {
        self.item_index.get(ext).copied()
    }

    pub fn category_id(&self, ext: &str) -> Option<usize> {
        self.category_index.get(ext).copied()
    }

    pub fn user_name(&self, id: usize) -> Option<&str> {
        self.users.get(id).map(String::as_str)
    }

    pub fn item_name(&self, id: usize) -> Option<&str> {
        id.checked_sub(1).and_then(|k| self.items.get(k)).map(String::as_str)
    }

    pub fn category_name(&self, id: usize) -> Option<&str> {
        id.checked_sub(1).and_then(|k| self.categories.get(k)).map(String::as_str)
    }

    pub fn item_category(&self, item: usize) -> Option<usize> {
        item.checked_sub(1).and_then(|k| self.item_category.get(k)).copied()
    }

    /// SHA-256 over the three id tables, hex encoded.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (tag, table) in [("users", &self.users), ("items", &self.items), ("categories", &self.categories)] {
            h.update(tag.as_bytes());
            h.update((table.len() as u64).to_le_bytes());
            for s in table {
                h.update((s.len() as u64).to_le_bytes());
                h.update(s.as_bytes());
            }
        }
        let mut out = String::with_capacity(64);
        for b in h.finalize() {
            let _ = write!(out, "{b:02x}");
        }
        out
    }
}

/// One user's leave-one-out split, in dense ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserSplit {
    pub train_items: Vec<usize>,
    pub train_cats: Vec<usize>,
    pub valid: (usize, usize),
    pub test: (usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Valid,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "valid" | "validation" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

impl UserSplit {
    /// Full time-ordered sequence: train, then validation, then test.
    pub fn full_items(&self) -> Vec<usize> {
        let mut v = self.train_items.clone();
        v.push(self.valid.0);
        v.push(self.test.0);
        v
    }

    pub fn full_cats(&self) -> Vec<usize> {
        let mut v = self.train_cats.clone();
        v.push(self.valid.1);
        v.push(self.test.1);
        v
    }

    /// History and held-out target for evaluating `split`.
    ///
    /// For the test split the validation event joins the history unless
    /// `include_valid` is false.
    pub fn eval_case(&self, split: Split, include_valid: bool) -> (Vec<usize>, Vec<usize>, (usize, usize)) {
        let mut items = self.train_items.clone();
        let mut cats = self.train_cats.clone();
        match split {
            Split::Valid => (items, cats, self.valid),
            Split::Test => {
                if include_valid {
                    items.push(self.valid.0);
                    cats.push(self.valid.1);
                }
                (items, cats, self.test)
            }
        }
    }

    /// Every item the user touched, sorted and deduplicated.
    pub fn seen_items(&self) -> Vec<usize> {
        let mut v = self.full_items();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn len(&self) -> usize {
        self.train_items.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitDataset {
    pub catalog: CatalogMaps,
    /// Indexed by dense user id.
    pub users: Vec<UserSplit>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitReport {
    pub dropped_short_users: usize,
}

/// Per user, stable-sort by timestamp; the last event is the test target and the
/// second-last the validation target. Users with fewer than three events are dropped.
pub fn leave_one_out_split(events: &[InteractionEvent]) -> (SplitDataset, SplitReport) {
    let mut order: Vec<&str> = Vec::new();
    let mut per_user: HashMap<&str, Vec<&InteractionEvent>> = HashMap::new();
    for e in events {
        per_user
            .entry(&e.user)
            .or_insert_with(|| {
                order.push(&e.user);
                Vec::new()
            })
            .push(e);
    }
    let mut catalog = CatalogMaps::default();
    let mut users = Vec::new();
    let mut report = SplitReport::default();
    for name in order {
        let mut seq = per_user.remove(name).expect("user recorded");
        if seq.len() < 3 {
            report.dropped_short_users += 1;
            continue;
        }
        seq.sort_by_key(|e| e.timestamp);
        catalog.add_user(name);
        let mut items = Vec::with_capacity(seq.len());
        let mut cats = Vec::with_capacity(seq.len());
        for e in seq {
            let c = catalog.add_category(&e.category);
            items.push(catalog.add_item(&e.item, c));
            cats.push(c);
        }
        let test = (items.pop().unwrap(), cats.pop().unwrap());
        let valid = (items.pop().unwrap(), cats.pop().unwrap());
        users.push(UserSplit {
            train_items: items,
            train_cats: cats,
            valid,
            test,
        });
    }
    (SplitDataset { catalog, users }, report)
}

/// An `L`-step training window with next-step targets. Padding is on the left.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingWindow {
    pub user: usize,
    pub input_items: Vec<usize>,
    pub input_cats: Vec<usize>,
    pub target_items: Vec<usize>,
    pub target_cats: Vec<usize>,
    pub mask: Vec<bool>,
}

impl TrainingWindow {
    pub fn valid_steps(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Cut `max(1, T − L)` windows from a length-`T` sequence. `T < 2` yields none.
pub fn sliding_windows(user: usize, items: &[usize], cats: &[usize], window: usize) -> Result<Vec<TrainingWindow>> {
    if window == 0 {
        return Err(Error::Config("window length must be at least 1".into()));
    }
    if items.len() != cats.len() {
        return Err(Error::Dimension {
            op: "sliding_windows",
            left: [1, items.len()],
            right: [1, cats.len()],
        });
    }
    let t = items.len();
    if t < 2 {
        return Ok(Vec::new());
    }
    let make = |start: usize, len: usize| {
        let pad = window - len;
        let mut w = TrainingWindow {
            user,
            input_items: vec![0; window],
            input_cats: vec![0; window],
            target_items: vec![0; window],
            target_cats: vec![0; window],
            mask: vec![false; window],
        };
        for k in 0..len {
            let src = start + k;
            w.input_items[pad + k] = items[src];
            w.input_cats[pad + k] = cats[src];
            w.target_items[pad + k] = items[src + 1];
            w.target_cats[pad + k] = cats[src + 1];
            w.mask[pad + k] = true;
        }
        w
    };
    if t <= window {
        return Ok(vec![make(0, t - 1)]);
    }
    Ok((0..t - window).map(|s| make(s, window)).collect())
}

/// All windows of every user's training sequence, in user order.
pub fn dataset_windows(ds: &SplitDataset, window: usize) -> Result<Vec<TrainingWindow>> {
    let mut out = Vec::new();
    for (u, s) in ds.users.iter().enumerate() {
        out.extend(sliding_windows(u, &s.train_items, &s.train_cats, window)?);
    }
    Ok(out)
}

/// Seeded shuffle of `0..n` chunked into batches; the last batch may be short.
pub fn make_batches(n: usize, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub categories: usize,
    pub sparsity: f64,
}

pub fn dataset_stats(ds: &SplitDataset) -> DatasetStats {
    let users = ds.users.len();
    let items = ds.catalog.n_items();
    let interactions: usize = ds.users.iter().map(UserSplit::len).sum();
    let sparsity = if users == 0 || items == 0 {
        1.0
    } else {
        1.0 - interactions as f64 / (users as f64 * items as f64)
    };
    DatasetStats {
        users,
        items,
        interactions,
        categories: ds.catalog.n_categories(),
        sparsity,
    }
}

impl std::fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "#user\t#item\t#interaction\t#category\tsparsity")?;
        writeln!(
            f,
            "{}\t{}\t{}\t{}\t{:.2}%",
            self.users,
            self.items,
            self.interactions,
            self.categories,
            self.sparsity * 100.0
        )
    }
}

fn join(ids: &[usize]) -> String {
    let mut s = String::with_capacity(ids.len() * 4);
    for (k, id) in ids.iter().enumerate() {
        if k > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{id}");
    }
    s
}

pub fn write_split<W: Write>(ds: &SplitDataset, writer: W) -> std::io::Result<()> {
    let mut w = BufWriter::new(writer);
    let c = &ds.catalog;
    writeln!(w, "{SPLIT_HEADER}")?;
    writeln!(w, "users\t{}", c.users.len())?;
    for u in &c.users {
        writeln!(w, "{u}")?;
    }
    writeln!(w, "categories\t{}", c.categories.len())?;
    for cat in &c.categories {
        writeln!(w, "{cat}")?;
    }
    writeln!(w, "items\t{}", c.items.len())?;
    for (name, cat) in c.items.iter().zip(&c.item_category) {
        writeln!(w, "{name}\t{cat}")?;
    }
    writeln!(w, "sequences\t{}", ds.users.len())?;
    for s in &ds.users {
        writeln!(
            w,
            "{}\t{}\t{} {}\t{} {}",
            join(&s.train_items),
            join(&s.train_cats),
            s.valid.0,
            s.valid.1,
            s.test.0,
            s.test.1
        )?;
    }
    writeln!(w, "end")?;
    w.flush()
}

pub fn read_split<R: Read>(reader: R) -> Result<SplitDataset> {
    let mut lines = lossy_lines(reader).enumerate().map(|(k, l)| (k + 1, l));
    let mut next = move || -> Result<(usize, String)> {
        match lines.next() {
            Some((n, Ok(l))) => Ok((n, l)),
            Some((_, Err(e))) => Err(io_err(e)),
            None => Err(Error::Corrupt("split cache ends early".into())),
        }
    };
    let (_, header) = next()?;
    if header != SPLIT_HEADER {
        return Err(Error::VersionMismatch {
            expected: SPLIT_HEADER.into(),
            found: header,
        });
    }
    let section = |name: &str, next: &mut dyn FnMut() -> Result<(usize, String)>| -> Result<usize> {
        let (n, line) = next()?;
        let rest = line
            .strip_prefix(name)
            .and_then(|r| r.strip_prefix('\t'))
            .ok_or_else(|| Error::parse(n, format!("expected section `{name}`")))?;
        rest.parse().map_err(|_| Error::parse(n, "bad section count"))
    };
    let parse_ids = |n: usize, s: &str| -> Result<Vec<usize>> {
        s.split(' ')
            .filter(|t| !t.is_empty())
            .map(|t| t.parse().map_err(|_| Error::parse(n, format!("bad id `{t}`"))))
            .collect()
    };

    let mut catalog = CatalogMaps::default();
    let n_users = section("users", &mut next)?;
    for _ in 0..n_users {
        let (_, name) = next()?;
        catalog.add_user(&name);
    }
    let n_cats = section("categories", &mut next)?;
    for _ in 0..n_cats {
        let (_, name) = next()?;
        catalog.add_category(&name);
    }
    let n_items = section("items", &mut next)?;
    for _ in 0..n_items {
        let (n, line) = next()?;
        let (name, cat) = line.split_once('\t').ok_or_else(|| Error::parse(n, "item line needs a category"))?;
        let cat: usize = cat.parse().map_err(|_| Error::parse(n, "bad item category"))?;
        if cat == 0 || cat > n_cats {
            return Err(Error::parse(n, "item category out of range"));
        }
        catalog.add_item(name, cat);
    }
    if catalog.n_users() != n_users || catalog.n_items() != n_items || catalog.n_categories() != n_cats {
        return Err(Error::Corrupt("duplicate external ids".into()));
    }
    let n_seq = section("sequences", &mut next)?;
    if n_seq != n_users {
        return Err(Error::Corrupt(format!("{n_seq} sequences for {n_users} users")));
    }
    let mut users = Vec::with_capacity(n_seq);
    for _ in 0..n_seq {
        let (n, line) = next()?;
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(Error::parse(n, "sequence line needs 4 fields"));
        }
        let train_items = parse_ids(n, f[0])?;
        let train_cats = parse_ids(n, f[1])?;
        let valid = parse_ids(n, f[2])?;
        let test = parse_ids(n, f[3])?;
        if train_items.len() != train_cats.len() || valid.len() != 2 || test.len() != 2 {
            return Err(Error::parse(n, "malformed sequence"));
        }
        let in_range = |ids: &[usize], max: usize| ids.iter().all(|&i| i >= 1 && i <= max);
        if !in_range(&train_items, n_items)
            || !in_range(&train_cats, n_cats)
            || !in_range(&[valid[0], test[0]], n_items)
            || !in_range(&[valid[1], test[1]], n_cats)
        {
            return Err(Error::parse(n, "id out of range"));
        }
        users.push(UserSplit {
            train_items,
            train_cats,
            valid: (valid[0], valid[1]),
            test: (test[0], test[1]),
        });
    }
    let (_, end) = next()?;
    if end != "end" {
        return Err(Error::Corrupt("missing end marker".into()));
    }
    Ok(SplitDataset { catalog, users })
}

pub fn save_split(ds: &SplitDataset, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_split(ds, f).map_err(|e| Error::io(path, e))
}

pub fn load_split(path: &Path) -> Result<SplitDataset> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_split(f)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(user: &str, item: &str, cat: &str, ts: u64) -> InteractionEvent {
        InteractionEvent {
            user: user.into(),
            item: item.into(),
            category: cat.into(),
            timestamp: ts,
        }
    }

    #[test]
    fn canonical_parsing() {
        assert!(parse_canonical("".as_bytes()).unwrap().is_empty());
        let one = parse_canonical("u1\ti9\tc3\t42\n".as_bytes()).unwrap();
        assert_eq!(one, vec![ev("u1", "i9", "c3", 42)]);
        match parse_canonical("u1\ti9\tc3\n".as_bytes()) {
            Err(Error::Parse { line: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            parse_canonical("a\tb\tc\t1\na\tb\tc\t-3\n".as_bytes()),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn movielens_parsing() {
        let movies = "1::Toy Story (1995)::Animation|Children's|Comedy\n2::Heat (1995)::Action|Crime\n";
        let ratings = "7::1::1::100\n7::2::5::101\n8::3::4::102\n";
        let (events, report) = parse_movielens(ratings.as_bytes(), movies.as_bytes(), GenreRule::First).unwrap();
        assert_eq!(events.len(), 2);
        assert_eq!(report.dropped_unknown_movie, 1);
        assert_eq!(events[0].category, "Animation");
        assert_eq!(events[1].category, "Action");
        // rating value does not change the event shape
        assert_eq!((events[0].user.as_str(), events[0].timestamp), ("7", 100));
        assert!(parse_movielens("7:1:1:100\n".as_bytes(), movies.as_bytes(), GenreRule::First).is_err());
    }

    #[test]
    fn latin1_titles_are_tolerated() {
        let movies = b"5::Caf\xe9 (1999)::Drama\n";
        let (events, _) = parse_movielens("1::5::3::9\n".as_bytes(), &movies[..], GenreRule::First).unwrap();
        assert_eq!(events[0].category, "Drama");
    }

    #[test]
    fn filter_edge_cases() {
        let events = vec![ev("u", "i", "c", 0), ev("u", "j", "c", 1)];
        let off = FilterConfig {
            item_min: 0,
            user_min: 0,
            user_min_records: 0,
            mode: FilterMode::Fixpoint,
        };
        assert_eq!(ncore_filter(&events, &off), events);
        let five = FilterConfig::default();
        assert!(ncore_filter(&events[..1], &five).is_empty());
    }

    #[test]
    fn fixpoint_removes_cascades() {
        // u3 only touches item x; x loses its only other user once u3 goes
        let mut events = Vec::new();
        for u in 0..2 {
            for i in 0..2 {
                events.push(ev(&format!("u{u}"), &format!("i{i}"), "c", 0));
            }
        }
        events.push(ev("u0", "x", "c", 1));
        events.push(ev("u9", "x", "c", 1));
        let cfg = FilterConfig {
            item_min: 2,
            user_min: 2,
            user_min_records: 0,
            mode: FilterMode::Fixpoint,
        };
        let out = ncore_filter(&events, &cfg);
        assert!(out.iter().all(|e| e.item != "x"));
        let single = ncore_filter(&events, &FilterConfig { mode: FilterMode::SinglePass, ..cfg });
        assert!(single.iter().any(|e| e.item == "x"));
        assert_eq!(ncore_filter(&out, &cfg), out);
    }

    #[test]
    fn record_threshold() {
        let events: Vec<_> = (0..5).map(|t| ev("a", &format!("i{t}"), "c", t)).chain([ev("b", "i0", "c", 0)]).collect();
        let cfg = FilterConfig {
            item_min: 0,
            user_min: 0,
            user_min_records: 5,
            mode: FilterMode::Fixpoint,
        };
        let out = ncore_filter(&events, &cfg);
        assert_eq!(out.len(), 5);
        assert!(out.iter().all(|e| e.user == "a"));
    }

    #[test]
    fn split_by_definition() {
        let events = vec![
            ev("u", "d", "c", 4),
            ev("u", "a", "c", 1),
            ev("u", "c", "c", 3),
            ev("u", "b", "c", 2),
            ev("short", "a", "c", 0),
        ];
        let (ds, report) = leave_one_out_split(&events);
        assert_eq!(report.dropped_short_users, 1);
        assert_eq!(ds.users.len(), 1);
        let c = &ds.catalog;
        let s = &ds.users[0];
        let names: Vec<_> = s.train_items.iter().map(|&i| c.item_name(i).unwrap()).collect();
        assert_eq!(names, vec!["a", "b"]);
        assert_eq!(c.item_name(s.valid.0), Some("c"));
        assert_eq!(c.item_name(s.test.0), Some("d"));
    }

    #[test]
    fn ties_keep_file_order() {
        let events = vec![ev("u", "x", "c", 5), ev("u", "y", "c", 5), ev("u", "z", "c", 5)];
        let (ds, _) = leave_one_out_split(&events);
        let c = &ds.catalog;
        assert_eq!(c.item_name(ds.users[0].train_items[0]), Some("x"));
        assert_eq!(c.item_name(ds.users[0].test.0), Some("z"));
        assert_eq!(ds.users[0].train_items.len(), 1);
    }

    #[test]
    fn windows_by_definition() {
        let seq: Vec<usize> = (1..=7).collect();
        let w = sliding_windows(0, &seq, &seq, 5).unwrap();
        assert_eq!(w.len(), 2);
        assert_eq!(w[0].input_items, vec![1, 2, 3, 4, 5]);
        assert_eq!(w[0].target_items, vec![2, 3, 4, 5, 6]);
        assert_eq!(w[1].input_items, vec![2, 3, 4, 5, 6]);
        assert_eq!(w[1].target_items, vec![3, 4, 5, 6, 7]);

        let w = sliding_windows(0, &[1, 2, 3], &[1, 1, 1], 5).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].input_items, vec![0, 0, 0, 1, 2]);
        assert_eq!(w[0].target_items, vec![0, 0, 0, 2, 3]);
        assert_eq!(w[0].mask, vec![false, false, false, true, true]);

        assert!(sliding_windows(0, &[1], &[1], 5).unwrap().is_empty());
        assert!(sliding_windows(0, &[1, 2], &[1, 1], 0).is_err());
    }

    #[test]
    fn batches() {
        let b = make_batches(10, 4, 3).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert_eq!(b, make_batches(10, 4, 3).unwrap());
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(make_batches(3, 0, 1).is_err());
    }

    #[test]
    fn empty_stats() {
        let s = dataset_stats(&SplitDataset::default());
        assert_eq!((s.users, s.items, s.interactions, s.categories), (0, 0, 0, 0));
        assert_eq!(s.sparsity, 1.0);
    }

    #[test]
    fn split_cache_rejects_bad_header_and_truncation() {
        let events: Vec<_> = (0..4).map(|t| ev("u", &format!("i{t}"), "c", t)).collect();
        let (ds, _) = leave_one_out_split(&events);
        let mut buf = Vec::new();
        write_split(&ds, &mut buf).unwrap();
        assert_eq!(read_split(&buf[..]).unwrap(), ds);
        let cut = &buf[..buf.len() - 6];
        assert!(read_split(cut).is_err());
        let mut bad = buf.clone();
        bad[16] = b'2';
        assert!(matches!(read_split(&bad[..]), Err(Error::VersionMismatch { .. })));
    }
}
