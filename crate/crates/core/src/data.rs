//! Behavior logs, the synthetic multi-scale generator and train/test construction.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index reserved for a missing side / user-side / context feature.
pub const PAD: u32 = 0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BehaviorEvent {
    pub item: u32,
    pub category: u32,
    pub timestamp: i64,
    pub side: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSequence {
    pub user_id: String,
    pub user_side: Vec<u32>,
    pub events: Vec<BehaviorEvent>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub sequence: UserSequence,
    pub target: BehaviorEvent,
    pub context: Vec<u32>,
    pub label: u8,
    pub prediction_time: i64,
}

impl Sample {
    pub fn y(&self) -> f64 {
        f64::from(self.label)
    }
}

/// Vocabulary sizes and per-event slot counts; fixes every input width.
///
/// Side, user-side and context vocabularies include the reserved [`PAD`] row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub n_items: usize,
    pub n_cats: usize,
    pub n_side: usize,
    pub side_slots: usize,
    pub n_user_side: usize,
    pub user_side_slots: usize,
    pub n_context: usize,
    pub context_slots: usize,
}

impl Schema {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("item", self.n_items),
            ("category", self.n_cats),
            ("side", self.n_side),
            ("user_side", self.n_user_side),
            ("context", self.n_context),
        ];
        for (name, n) in sizes {
            if n == 0 {
                return Err(Error::Invalid(format!("{name} vocabulary is empty")));
            }
        }
        Ok(())
    }

    pub fn check_event(&self, e: &BehaviorEvent) -> Result<()> {
        check_id("item", e.item, self.n_items)?;
        check_id("category", e.category, self.n_cats)?;
        if e.side.len() > self.side_slots {
            return Err(Error::Invalid(format!("{} side features, schema allows {}", e.side.len(), self.side_slots)));
        }
        e.side.iter().try_for_each(|&s| check_id("side", s, self.n_side))
    }

    pub fn check_sample(&self, s: &Sample) -> Result<()> {
        self.check_event(&s.target)?;
        for e in &s.sequence.events {
            self.check_event(e)?;
        }
        if s.sequence.user_side.len() > self.user_side_slots {
            return Err(Error::Invalid("too many user side features".into()));
        }
        s.sequence.user_side.iter().try_for_each(|&u| check_id("user_side", u, self.n_user_side))?;
        if s.context.len() > self.context_slots {
            return Err(Error::Invalid("too many context features".into()));
        }
        s.context.iter().try_for_each(|&c| check_id("context", c, self.n_context))
    }
}

fn check_id(field: &'static str, id: u32, size: usize) -> Result<()> {
    if (id as usize) < size {
        Ok(())
    } else {
        Err(Error::OutOfVocab { field, id: id.to_string(), size })
    }
}

/// String id → dense index maps. Side features start at 1; 0 is [`PAD`].
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub item: BTreeMap<String, u32>,
    pub cat: BTreeMap<String, u32>,
    pub side: BTreeMap<String, u32>,
}

/// One line of the JSONL behavior log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogRecord {
    pub user: String,
    pub item: String,
    pub cat: String,
    pub ts: i64,
    #[serde(default)]
    pub side: Vec<String>,
}

impl Vocabulary {
    /// Assigns indices in first-seen order over the log.
    pub fn build_from_log(path: &Path) -> Result<Self> {
        let mut v = Vocabulary::default();
        for_each_record(path, |_, rec| {
            let n = v.item.len() as u32;
            v.item.entry(rec.item).or_insert(n);
            let n = v.cat.len() as u32;
            v.cat.entry(rec.cat).or_insert(n);
            for s in rec.side {
                let n = v.side.len() as u32 + 1;
                v.side.entry(s).or_insert(n);
            }
            Ok(())
        })?;
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }

    pub fn schema(&self, side_slots: usize) -> Schema {
        Schema {
            n_items: self.item.len(),
            n_cats: self.cat.len(),
            n_side: self.side.len() + 1,
            side_slots,
            n_user_side: 1,
            user_side_slots: 1,
            n_context: 1,
            context_slots: 1,
        }
    }

    fn inverse(map: &BTreeMap<String, u32>) -> BTreeMap<u32, &str> {
        map.iter().map(|(k, &v)| (v, k.as_str())).collect()
    }
}

fn for_each_record(path: &Path, mut f: impl FnMut(usize, LogRecord) -> Result<()>) -> Result<()> {
    let reader = BufReader::new(File::open(path)?);
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LogRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        if rec.ts < 0 {
            return Err(Error::Parse { path: path.to_path_buf(), line: i + 1, msg: "negative timestamp".into() });
        }
        f(i + 1, rec)?;
    }
    Ok(())
}

fn lookup(map: &BTreeMap<String, u32>, field: &'static str, key: &str) -> Result<u32> {
    map.get(key).copied().ok_or_else(|| Error::OutOfVocab { field, id: key.to_string(), size: map.len() })
}

/// Reads a JSONL log into per-user sequences, sorted by user id then timestamp.
pub fn load_events(path: &Path, vocab: &Vocabulary, side_slots: usize) -> Result<Vec<UserSequence>> {
    let mut users: BTreeMap<String, Vec<BehaviorEvent>> = BTreeMap::new();
    for_each_record(path, |line, rec| {
        let at_line = |e: Error| match e {
            Error::OutOfVocab { field, id, size } => Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("field `{field}`: id {id} out of vocabulary (size {size})"),
            },
            other => other,
        };
        if rec.side.len() > side_slots {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("{} side features, schema allows {side_slots}", rec.side.len()),
            });
        }
        let event = BehaviorEvent {
            item: lookup(&vocab.item, "item", &rec.item).map_err(at_line)?,
            category: lookup(&vocab.cat, "cat", &rec.cat).map_err(at_line)?,
            timestamp: rec.ts,
            side: rec.side.iter().map(|s| lookup(&vocab.side, "side", s)).collect::<Result<_>>().map_err(at_line)?,
        };
        users.entry(rec.user).or_default().push(event);
        Ok(())
    })?;
    Ok(users
        .into_iter()
        .map(|(user_id, mut events)| {
            // stable: equal timestamps keep file order
            events.sort_by_key(|e| e.timestamp);
            UserSequence { user_id, user_side: Vec::new(), events }
        })
        .collect())
}

/// Writes sequences back out in the JSONL log format.
pub fn write_events(path: &Path, sequences: &[UserSequence], vocab: &Vocabulary) -> Result<()> {
    let items = Vocabulary::inverse(&vocab.item);
    let cats = Vocabulary::inverse(&vocab.cat);
    let sides = Vocabulary::inverse(&vocab.side);
    let name = |m: &BTreeMap<u32, &str>, field: &'static str, id: u32| {
        m.get(&id).map(|s| s.to_string()).ok_or_else(|| Error::OutOfVocab { field, id: id.to_string(), size: m.len() })
    };
    let mut w = BufWriter::new(File::create(path)?);
    for seq in sequences {
        for e in &seq.events {
            let rec = LogRecord {
                user: seq.user_id.clone(),
                item: name(&items, "item", e.item)?,
                cat: name(&cats, "cat", e.category)?,
                ts: e.timestamp,
                side: e.side.iter().filter(|&&s| s != PAD).map(|&s| name(&sides, "side", s)).collect::<Result<_>>()?,
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_samples(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_samples(path: &Path) -> Result<Vec<Sample>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Where the target's category is forced to appear in the history.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Planting {
    /// Category sets are drawn freely; the label follows whatever happens.
    Natural,
    /// Only in the early (long-range) window.
    LongRange,
    /// Only in the recent window.
    Recent,
    Both,
    /// In neither window.
    Absent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_users: usize,
    pub seq_len: usize,
    pub n_items: usize,
    pub n_cats: usize,
    pub n_side: usize,
    pub n_user_side: usize,
    pub n_context: usize,
    pub seed: u64,
    pub planting: Planting,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 1000,
            seq_len: 100,
            n_items: 200,
            n_cats: 8,
            n_side: 5,
            n_user_side: 5,
            n_context: 5,
            seed: 0,
            planting: Planting::Natural,
        }
    }
}

impl SynthConfig {
    pub fn schema(&self) -> Schema {
        Schema {
            n_items: self.n_items,
            n_cats: self.n_cats,
            n_side: self.n_side,
            side_slots: 1,
            n_user_side: self.n_user_side,
            user_side_slots: 1,
            n_context: self.n_context,
            context_slots: 1,
        }
    }

    /// Vocabulary with ids `i<k>`, `c<k>`, `s<k>` matching the dense indices.
    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary {
            item: (0..self.n_items as u32).map(|k| (format!("i{k}"), k)).collect(),
            cat: (0..self.n_cats as u32).map(|k| (format!("c{k}"), k)).collect(),
            side: (1..self.n_side as u32).map(|k| (format!("s{k}"), k)).collect(),
        }
    }

    /// Positions `1..=long_window_end()` form the long-range window.
    pub fn long_window_end(&self) -> usize {
        self.seq_len / 4
    }

    /// Positions `recent_window_start()..=T` form the recent window.
    pub fn recent_window_start(&self) -> usize {
        self.seq_len - 5
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len < 8 {
            return Err(Error::Invalid(format!("sequence length must be >= 8, got {}", self.seq_len)));
        }
        if self.n_cats < 2 {
            return Err(Error::Invalid(format!("need at least 2 categories, got {}", self.n_cats)));
        }
        if self.n_items < self.n_cats {
            return Err(Error::Invalid("need at least one item per category".into()));
        }
        if self.n_side < 2 || self.n_user_side < 2 || self.n_context < 2 {
            return Err(Error::Invalid("side, user-side and context vocabularies need a non-pad id".into()));
        }
        Ok(())
    }
}

/// Category of an item in the synthetic catalog.
pub fn synthetic_category(item: u32, n_cats: usize) -> u32 {
    item % n_cats as u32
}

/// Positive probability of a synthetic label given whether the target's category
/// was seen in either planted window.
pub const SYNTH_POSITIVE_RATE: f64 = 0.9;
pub const SYNTH_NEGATIVE_RATE: f64 = 0.1;

fn user_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generates labeled samples with planted long-range and recent dependencies.
///
/// Each user owns three disjoint category sets: one for the early quarter of
/// the history, one for the last six events and one for everything between.
/// The label is positive with probability 0.9 when the target's category
/// occurs in the early or the recent window, 0.1 otherwise.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    Ok((0..cfg.n_users).map(|u| synth_user(cfg, u)).collect())
}

fn draw_item(rng: &mut ChaCha8Rng, cat: u32, cfg: &SynthConfig) -> u32 {
    let per_cat = (cfg.n_items - cat as usize).div_ceil(cfg.n_cats);
    cat + cfg.n_cats as u32 * rng.gen_range(0..per_cat as u32)
}

fn synth_user(cfg: &SynthConfig, u: usize) -> Sample {
    let mut rng = user_rng(cfg.seed, u as u64);
    let t = cfg.seq_len;
    let n_cats = cfg.n_cats;

    let target_item = rng.gen_range(0..cfg.n_items as u32);
    let target_cat = synthetic_category(target_item, n_cats);

    let mut perm: Vec<u32> = (0..n_cats as u32).collect();
    perm.shuffle(&mut rng);
    let n_long = rng.gen_range(1..=2).min(n_cats);
    let n_recent = rng.gen_range(1..=2);
    let n_mid = rng.gen_range(1..=4);

    // disjoint sets carved from one permutation; wraps when the vocabulary is small
    let take = |start: usize, n: usize, pool: &[u32]| -> Vec<u32> { (0..n).map(|k| pool[(start + k) % pool.len()]).collect() };
    let (long, recent, mid) = match cfg.planting {
        Planting::Natural => {
            (take(0, n_long, &perm), take(n_long, n_recent, &perm), take(n_long + n_recent, n_mid, &perm))
        }
        planting => {
            let others: Vec<u32> = perm.iter().copied().filter(|&c| c != target_cat).collect();
            let mut long = take(0, n_long, &others);
            let mut recent = take(n_long, n_recent, &others);
            let mid = take(n_long + n_recent, n_mid, &others);
            if matches!(planting, Planting::LongRange | Planting::Both) {
                long[0] = target_cat;
            }
            if matches!(planting, Planting::Recent | Planting::Both) {
                recent[0] = target_cat;
            }
            (long, recent, mid)
        }
    };

    let forced_long = matches!(cfg.planting, Planting::LongRange | Planting::Both)
        .then(|| rng.gen_range(1..=cfg.long_window_end()));
    let forced_recent = matches!(cfg.planting, Planting::Recent | Planting::Both)
        .then(|| rng.gen_range(cfg.recent_window_start()..=t));

    let mut ts: i64 = rng.gen_range(0..1000);
    let mut events = Vec::with_capacity(t);
    for pos in 1..=t {
        let set = if pos <= cfg.long_window_end() {
            &long
        } else if pos >= cfg.recent_window_start() {
            &recent
        } else {
            &mid
        };
        let drawn = set[rng.gen_range(0..set.len())];
        let category = if forced_long == Some(pos) || forced_recent == Some(pos) { target_cat } else { drawn };
        let item = draw_item(&mut rng, category, cfg);
        ts += rng.gen_range(1..=10);
        events.push(BehaviorEvent { item, category, timestamp: ts, side: vec![rng.gen_range(1..cfg.n_side as u32)] });
    }

    let in_windows = events.iter().enumerate().any(|(i, e)| {
        let pos = i + 1;
        e.category == target_cat && (pos <= cfg.long_window_end() || pos >= cfg.recent_window_start())
    });
    let p = if in_windows { SYNTH_POSITIVE_RATE } else { SYNTH_NEGATIVE_RATE };
    let label = u8::from(rng.gen_bool(p));

    let user_side = vec![rng.gen_range(1..cfg.n_user_side as u32)];
    let context = vec![rng.gen_range(1..cfg.n_context as u32)];
    ts += rng.gen_range(1..=10);
    let target = BehaviorEvent {
        item: target_item,
        category: target_cat,
        timestamp: ts,
        side: vec![rng.gen_range(1..cfg.n_side as u32)],
    };
    Sample {
        sequence: UserSequence { user_id: format!("u{u:06}"), user_side, events },
        target,
        context,
        label,
        prediction_time: ts,
    }
}

/// Samples whose prediction precedes `cut_time` are training data; the rest test.
pub fn split_by_time(samples: Vec<Sample>, cut_time: i64) -> (Vec<Sample>, Vec<Sample>) {
    samples.into_iter().partition(|s| s.prediction_time < cut_time)
}

/// Cut time placing roughly `train_frac` of the samples before it.
pub fn quantile_cut(samples: &[Sample], train_frac: f64) -> i64 {
    time_quantile(samples.iter().map(|s| s.prediction_time).collect(), train_frac)
}

/// Time placing roughly `train_frac` of `times` strictly before it.
pub fn time_quantile(mut times: Vec<i64>, train_frac: f64) -> i64 {
    if times.is_empty() {
        return 0;
    }
    times.sort_unstable();
    let k = ((times.len() as f64 * train_frac).round() as usize).min(times.len() - 1);
    times[k]
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

/// Builds one labeled sample per user from raw sequences.
///
/// The last event becomes the prediction target; with probability `neg_ratio`
/// it is swapped for an item the user never clicked (label 0). Items are
/// eligible as negatives when their category is known from some log event.
pub fn build_dataset(
    sequences: &[UserSequence],
    cut_time: i64,
    neg_ratio: f64,
    seed: u64,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if !(0.0..=1.0).contains(&neg_ratio) {
        return Err(Error::Invalid(format!("neg_ratio must lie in [0, 1], got {neg_ratio}")));
    }
    let mut catalog: BTreeMap<u32, u32> = BTreeMap::new();
    for seq in sequences {
        for e in &seq.events {
            catalog.entry(e.item).or_insert(e.category);
        }
    }
    let mut samples = Vec::with_capacity(sequences.len());
    for seq in sequences {
        if seq.events.len() < 2 {
            return Err(Error::Invalid(format!("user {} has fewer than 2 events", seq.user_id)));
        }
        let mut rng = user_rng(seed, fnv1a(&seq.user_id));
        let (last, history) = seq.events.split_last().expect("len checked");
        let mut target = last.clone();
        let mut label = 1;
        if rng.gen_bool(neg_ratio) {
            let clicked: BTreeSet<u32> = seq.events.iter().map(|e| e.item).collect();
            let candidates: Vec<(&u32, &u32)> = catalog.iter().filter(|(i, _)| !clicked.contains(i)).collect();
            let (&item, &category) = candidates
                .choose(&mut rng)
                .ok_or_else(|| Error::Invalid(format!("user {} clicked every item; no negative available", seq.user_id)))?;
            target.item = item;
            target.category = category;
            target.side = Vec::new();
            label = 0;
        }
        samples.push(Sample {
            sequence: UserSequence { user_id: seq.user_id.clone(), user_side: seq.user_side.clone(), events: history.to_vec() },
            prediction_time: target.timestamp,
            target,
            context: Vec::new(),
            label,
        });
    }
    Ok(split_by_time(samples, cut_time))
}
