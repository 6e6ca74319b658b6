use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use super::export::{opaque_id, ExportManifest, IMAGE_DIR};
use crate::dataset::fisher_yates;
use crate::error::{Error, Result};

/// One reconstruction offered for rating. `model` is server-side only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingItem {
    pub item_id: String,
    pub image_id: String,
    pub original_id: String,
    pub model: String,
    pub class: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub session_id: String,
    pub rater_id: String,
    pub item_id: String,
    pub rating: u8,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingSubmission {
    pub session_id: String,
    pub item_id: String,
    pub rating: i64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionRequest {
    #[serde(default)]
    pub rater_id: Option<String>,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Whether the rater sees the original next to the reconstruction.
    #[serde(default)]
    pub side_by_side: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
}

/// What a rater sees: an opaque item id and image references, nothing else.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NextItem {
    Item {
        item_id: String,
        image_url: String,
        #[serde(skip_serializing_if = "Option::is_none")]
        original_url: Option<String>,
    },
    Exhausted {
        exhausted: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMos {
    pub mean: f64,
    pub count: u64,
    /// Counts of ratings 1 through 5.
    pub histogram: [u64; 5],
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MosReport {
    pub models: BTreeMap<String, ModelMos>,
}

impl MosReport {
    pub fn to_table(&self) -> String {
        let mut out = String::from("model,mos,count,r1,r2,r3,r4,r5\n");
        for (model, m) in &self.models {
            let h = m.histogram;
            out.push_str(&format!("{model},{},{},{},{},{},{},{}\n", m.mean, m.count, h[0], h[1], h[2], h[3], h[4]));
        }
        out
    }
}

/// Unweighted mean rating per model; records for unknown items are ignored.
pub fn compute_mos(records: &[RatingRecord], items: &[RatingItem]) -> MosReport {
    let model_of: HashMap<&str, &str> = items.iter().map(|i| (i.item_id.as_str(), i.model.as_str())).collect();
    let mut acc: BTreeMap<String, (u64, [u64; 5])> = BTreeMap::new();
    for r in records {
        let (Some(model), 1..=5) = (model_of.get(r.item_id.as_str()), r.rating) else {
            continue;
        };
        let slot = acc.entry(model.to_string()).or_default();
        slot.0 += r.rating as u64;
        slot.1[r.rating as usize - 1] += 1;
    }
    MosReport {
        models: acc
            .into_iter()
            .map(|(model, (sum, histogram))| {
                let count = histogram.iter().sum::<u64>();
                let mean = sum as f64 / count as f64;
                (model, ModelMos { mean, count, histogram })
            })
            .collect(),
    }
}

pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<RatingRecord>> {
    let path = path.as_ref();
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Validation(format!("{}:{}: {e}", path.display(), n + 1)))?,
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionConfig {
    /// Items per session; all items when `None`.
    pub items_per_session: Option<usize>,
    pub seed: u64,
    pub side_by_side: bool,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            items_per_session: None,
            seed: 0,
            side_by_side: true,
        }
    }
}

#[derive(Debug, Clone)]
struct Session {
    rater_id: String,
    plan: Vec<usize>,
    cursor: usize,
    side_by_side: bool,
    rated: HashSet<usize>,
}

/// Rating study state. The single owner of the append-only log, so every
/// write goes through one writer.
pub struct RatingBackend {
    items: Vec<RatingItem>,
    lookup: HashMap<String, usize>,
    sessions: HashMap<String, Session>,
    records: Vec<RatingRecord>,
    rated: HashSet<(String, String)>,
    log_path: PathBuf,
    log: File,
    config: SessionConfig,
    rng: Xoshiro256PlusPlus,
}

impl RatingBackend {
    /// Opens (creating if needed) the log at `log_path` and replays it.
    pub fn open(items: Vec<RatingItem>, log_path: impl Into<PathBuf>, config: SessionConfig) -> Result<Self> {
        let log_path = log_path.into();
        if items.is_empty() {
            return Err(Error::Config("no rating items".into()));
        }
        if let Some(parent) = log_path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let records = read_log(&log_path)?;
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        let lookup = items.iter().enumerate().map(|(i, it)| (it.item_id.clone(), i)).collect();
        let rated = records.iter().map(|r| (r.session_id.clone(), r.item_id.clone())).collect();
        Ok(Self {
            items,
            lookup,
            sessions: HashMap::new(),
            records,
            rated,
            log_path,
            log,
            rng: Xoshiro256PlusPlus::seed_from_u64(config.seed),
            config,
        })
    }

    pub fn from_manifest(manifest: &ExportManifest, log_path: impl Into<PathBuf>, config: SessionConfig) -> Result<Self> {
        Self::open(manifest.rating_items.clone(), log_path, config)
    }

    pub fn items(&self) -> &[RatingItem] {
        &self.items
    }

    pub fn records(&self) -> &[RatingRecord] {
        &self.records
    }

    pub fn log_path(&self) -> &Path {
        &self.log_path
    }

    /// Per-model shuffles interleaved round-robin, the model order itself
    /// reshuffled each round, then truncated to the session length.
    fn plan(&self, seed: u64) -> Vec<usize> {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let mut by_model: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, item) in self.items.iter().enumerate() {
            by_model.entry(item.model.as_str()).or_default().push(i);
        }
        let mut queues: Vec<Vec<usize>> = by_model.into_values().collect();
        for q in &mut queues {
            fisher_yates(q, &mut rng);
        }
        let mut plan = Vec::with_capacity(self.items.len());
        let rounds = queues.iter().map(Vec::len).max().unwrap_or(0);
        for round in 0..rounds {
            let mut order: Vec<usize> = (0..queues.len()).filter(|&m| round < queues[m].len()).collect();
            fisher_yates(&mut order, &mut rng);
            plan.extend(order.into_iter().map(|m| queues[m][round]));
        }
        plan.truncate(self.config.items_per_session.unwrap_or(usize::MAX));
        plan
    }

    pub fn create_session(&mut self, request: SessionRequest) -> SessionCreated {
        let seed = request.seed.unwrap_or_else(|| self.rng.gen());
        let session_id = loop {
            let id = opaque_id(&mut self.rng);
            if !self.sessions.contains_key(&id) {
                break id;
            }
        };
        let session = Session {
            rater_id: request.rater_id.unwrap_or_else(|| session_id.clone()),
            plan: self.plan(seed),
            cursor: 0,
            side_by_side: request.side_by_side.unwrap_or(self.config.side_by_side),
            rated: HashSet::new(),
        };
        self.sessions.insert(session_id.clone(), session);
        SessionCreated { session_id }
    }

    /// Advances the session to its next planned item.
    pub fn schedule_next(&mut self, session_id: &str) -> Result<NextItem> {
        let session = self
            .sessions
            .get_mut(session_id)
            .ok_or_else(|| Error::NotFound(format!("session `{session_id}`")))?;
        let Some(&i) = session.plan.get(session.cursor) else {
            return Ok(NextItem::Exhausted { exhausted: true });
        };
        session.cursor += 1;
        let item = &self.items[i];
        Ok(NextItem::Item {
            item_id: item.item_id.clone(),
            image_url: format!("/{IMAGE_DIR}/{}.png", item.image_id),
            original_url: session.side_by_side.then(|| format!("/{IMAGE_DIR}/{}.png", item.original_id)),
        })
    }

    pub fn record_rating(&mut self, submission: RatingSubmission) -> Result<RatingRecord> {
        let rating = u8::try_from(submission.rating)
            .ok()
            .filter(|r| (1..=5).contains(r))
            .ok_or_else(|| Error::Validation(format!("rating must be an integer from 1 to 5, got {}", submission.rating)))?;
        let session = self
            .sessions
            .get_mut(&submission.session_id)
            .ok_or_else(|| Error::NotFound(format!("session `{}`", submission.session_id)))?;
        let &i = self
            .lookup
            .get(&submission.item_id)
            .ok_or_else(|| Error::NotFound(format!("item `{}`", submission.item_id)))?;
        if !session.plan.contains(&i) {
            return Err(Error::Validation(format!("item `{}` is not part of this session", submission.item_id)));
        }
        let key = (submission.session_id.clone(), submission.item_id.clone());
        if self.rated.contains(&key) {
            return Err(Error::Conflict(format!("item `{}` already rated in this session", submission.item_id)));
        }
        let record = RatingRecord {
            session_id: submission.session_id,
            rater_id: session.rater_id.clone(),
            item_id: submission.item_id,
            rating,
            timestamp: Utc::now(),
        };
        let mut line = serde_json::to_string(&record)?;
        line.push('\n');
        self.log
            .write_all(line.as_bytes())
            .and_then(|_| self.log.flush())
            .map_err(|e| Error::io(&self.log_path, e))?;
        session.rated.insert(i);
        self.rated.insert(key);
        self.records.push(record.clone());
        Ok(record)
    }

    /// Report over the in-memory records.
    pub fn live_report(&self) -> MosReport {
        compute_mos(&self.records, &self.items)
    }

    /// Report recomputed from the persisted log.
    pub fn report(&self) -> Result<MosReport> {
        Ok(compute_mos(&read_log(&self.log_path)?, &self.items))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn items(models: &[&str], per_model: usize) -> Vec<RatingItem> {
        models
            .iter()
            .flat_map(|m| {
                (0..per_model).map(move |k| RatingItem {
                    item_id: format!("{m}-item{k}"),
                    image_id: format!("img{k}"),
                    original_id: format!("orig{k}"),
                    model: m.to_string(),
                    class: "a".into(),
                })
            })
            .collect()
    }

    fn record(item: &str, rating: u8) -> RatingRecord {
        RatingRecord {
            session_id: "s".into(),
            rater_id: "r".into(),
            item_id: item.into(),
            rating,
            timestamp: DateTime::<Utc>::UNIX_EPOCH,
        }
    }

    #[test]
    fn mos_hand_computed() {
        let items = items(&["x", "y"], 5);
        let mut records: Vec<_> = (0..5).map(|k| record(&format!("x-item{k}"), k as u8 + 1)).collect();
        records.extend((0..3).map(|k| record(&format!("y-item{k}"), 3)));
        let report = compute_mos(&records, &items);
        assert_eq!(report.models["x"].mean, 3.0);
        assert_eq!(report.models["x"].histogram, [1, 1, 1, 1, 1]);
        assert_eq!(report.models["y"].mean, 3.0);
        assert_eq!(report.models["y"].count, 3);
        records.reverse();
        assert_eq!(compute_mos(&records, &items), report);
    }

    #[test]
    fn plan_interleaves_models() {
        let dir = tempfile::tempdir().unwrap();
        let backend = RatingBackend::open(items(&["x", "y", "z"], 4), dir.path().join("log.jsonl"), SessionConfig::default()).unwrap();
        let plan = backend.plan(3);
        assert_eq!(plan.len(), 12);
        for round in plan.chunks(3) {
            let mut models: Vec<_> = round.iter().map(|&i| backend.items[i].model.clone()).collect();
            models.sort();
            assert_eq!(models, ["x", "y", "z"]);
        }
    }
}
