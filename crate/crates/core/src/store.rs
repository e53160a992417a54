//! Per-user memory store: incremental ingest, attentional queries and a binary file format.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::{Arc, RwLock};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::data::BehaviorEvent;
use crate::error::{Error, Result};
use crate::hpmn::MemoryPool;
use crate::model::HpmnModel;
use crate::numerics::Vector;

const MAGIC: &[u8; 8] = b"HPMNSTOR";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub pool: MemoryPool,
    /// Timestamp of the latest ingested event, if any.
    pub last_ts: Option<i64>,
    pub user_side: Vec<u32>,
}

/// Map from user id to memory pool. Users are locked individually, so
/// ingests for different users run in parallel and queries never block
/// each other.
#[derive(Debug)]
pub struct MemoryStore {
    model_version: String,
    depth: usize,
    slot_dim: usize,
    entries: RwLock<HashMap<String, Arc<RwLock<Entry>>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryResult {
    pub probability: f64,
    pub weights: Vector,
}

impl MemoryStore {
    pub fn new(model_version: impl Into<String>, depth: usize, slot_dim: usize) -> Self {
        MemoryStore { model_version: model_version.into(), depth, slot_dim, entries: RwLock::new(HashMap::new()) }
    }

    /// Empty store bound to `model`.
    pub fn for_model(model: &HpmnModel) -> Self {
        use crate::model::Network;
        Self::new(model.fingerprint(), model.memory.depth(), model.memory.slot_dim())
    }

    pub fn model_version(&self) -> &str {
        &self.model_version
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn slot_dim(&self) -> usize {
        self.slot_dim
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("store lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn users(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.entries.read().expect("store lock").keys().cloned().collect();
        ids.sort();
        ids
    }

    /// Snapshot of one user's entry.
    pub fn entry(&self, user: &str) -> Option<Entry> {
        let map = self.entries.read().expect("store lock");
        map.get(user).map(|e| e.read().expect("entry lock").clone())
    }

    fn check_model(&self, model: &HpmnModel) -> Result<()> {
        if model.memory.depth() != self.depth || model.memory.slot_dim() != self.slot_dim {
            return Err(Error::Shape {
                op: "store model",
                left: (self.depth, self.slot_dim),
                right: (model.memory.depth(), model.memory.slot_dim()),
            });
        }
        Ok(())
    }

    fn entry_or_create(&self, user: &str) -> Arc<RwLock<Entry>> {
        if let Some(e) = self.entries.read().expect("store lock").get(user) {
            return Arc::clone(e);
        }
        let mut map = self.entries.write().expect("store lock");
        let fresh = || Entry { pool: MemoryPool::zeros(self.depth, self.slot_dim), last_ts: None, user_side: Vec::new() };
        Arc::clone(map.entry(user.to_string()).or_insert_with(|| Arc::new(RwLock::new(fresh()))))
    }

    /// Registers a user with a zero pool, or updates the side features of a known one.
    pub fn register(&self, user: &str, user_side: &[u32]) {
        let e = self.entry_or_create(user);
        e.write().expect("entry lock").user_side = user_side.to_vec();
    }

    /// Applies one behavior to the user's memory. On error the store is unchanged.
    pub fn ingest(&self, user: &str, event: &BehaviorEvent, model: &HpmnModel) -> Result<()> {
        self.check_model(model)?;
        let x = model.tables.embed_event(event)?;
        let e = self.entry_or_create(user);
        let mut e = e.write().expect("entry lock");
        if let Some(last) = e.last_ts {
            if event.timestamp < last {
                return Err(Error::TimestampRegression { user: user.to_string(), last, got: event.timestamp });
            }
        }
        let next = model.memory.step(&e.pool, &x)?;
        e.pool = next;
        e.last_ts = Some(event.timestamp);
        Ok(())
    }

    /// Reads the user's memory with `target` as the query and predicts.
    pub fn query(&self, user: &str, target: &BehaviorEvent, context: &[u32], model: &HpmnModel) -> Result<QueryResult> {
        self.check_model(model)?;
        let e = self
            .entries
            .read()
            .expect("store lock")
            .get(user)
            .cloned()
            .ok_or_else(|| Error::ColdStart(user.to_string()))?;
        let e = e.read().expect("entry lock");
        if e.pool.depth() != self.depth || e.pool.slot_dim() != self.slot_dim {
            return Err(Error::Corrupt { user: user.to_string(), msg: "pool shape".into() });
        }
        if !e.pool.is_finite() {
            return Err(Error::Corrupt { user: user.to_string(), msg: "non-finite memory".into() });
        }
        let (probability, weights) = model.predict_from_pool(&e.pool, target, context, &e.user_side)?;
        Ok(QueryResult { probability, weights })
    }

    /// Copy of the store for an expanded `model`: every pool gets zero slots
    /// appended up to the model's depth; existing slots are untouched.
    pub fn expanded(&self, model: &HpmnModel) -> Result<MemoryStore> {
        use crate::model::Network;
        let depth = model.memory.depth();
        if depth < self.depth || model.memory.slot_dim() != self.slot_dim {
            return Err(Error::Shape { op: "expand store", left: (self.depth, self.slot_dim), right: (depth, model.memory.slot_dim()) });
        }
        let out = MemoryStore::new(model.fingerprint(), depth, self.slot_dim);
        {
            let src = self.entries.read().expect("store lock");
            let mut dst = out.entries.write().expect("store lock");
            for (id, e) in src.iter() {
                let mut e = e.read().expect("entry lock").clone();
                e.pool.slots.resize(depth, Vector::zeros(self.slot_dim));
                dst.insert(id.clone(), Arc::new(RwLock::new(e)));
            }
        }
        Ok(out)
    }

    pub fn persist(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        write_str(w, &self.model_version)?;
        w.write_u32::<LittleEndian>(self.depth as u32)?;
        w.write_u32::<LittleEndian>(self.slot_dim as u32)?;
        let map = self.entries.read().expect("store lock");
        let mut ids: Vec<&String> = map.keys().collect();
        ids.sort();
        w.write_u64::<LittleEndian>(ids.len() as u64)?;
        for id in ids {
            let e = map[id].read().expect("entry lock");
            write_str(w, id)?;
            w.write_u64::<LittleEndian>(e.pool.step)?;
            w.write_u8(u8::from(e.last_ts.is_some()))?;
            w.write_i64::<LittleEndian>(e.last_ts.unwrap_or(0))?;
            w.write_u32::<LittleEndian>(e.user_side.len() as u32)?;
            for &s in &e.user_side {
                w.write_u32::<LittleEndian>(s)?;
            }
            for slot in &e.pool.slots {
                for &v in slot.iter() {
                    w.write_f64::<LittleEndian>(v)?;
                }
            }
        }
        Ok(())
    }

    /// Loads a store file, refusing it unless it was built for `model_version`.
    pub fn load(path: &Path, model_version: &str) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?), model_version)
    }

    pub fn read_from<R: Read>(r: &mut R, model_version: &str) -> Result<Self> {
        let bad = |msg: &str| Error::Corrupt { user: String::new(), msg: msg.to_string() };
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("not a store file"));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != FORMAT_VERSION {
            return Err(bad(&format!("format version {version}")));
        }
        let stored = read_str(r)?;
        if stored != model_version {
            return Err(Error::VersionMismatch { store: stored, model: model_version.to_string() });
        }
        let depth = r.read_u32::<LittleEndian>()? as usize;
        let slot_dim = r.read_u32::<LittleEndian>()? as usize;
        let n = r.read_u64::<LittleEndian>()?;
        let mut map = HashMap::new();
        for _ in 0..n {
            let id = read_str(r)?;
            let step = r.read_u64::<LittleEndian>()?;
            let has_ts = r.read_u8()? != 0;
            let ts = r.read_i64::<LittleEndian>()?;
            let n_side = r.read_u32::<LittleEndian>()? as usize;
            let user_side = (0..n_side).map(|_| r.read_u32::<LittleEndian>()).collect::<std::io::Result<Vec<_>>>()?;
            let mut slots = Vec::with_capacity(depth);
            for _ in 0..depth {
                let mut s = vec![0.0; slot_dim];
                r.read_f64_into::<LittleEndian>(&mut s)?;
                slots.push(Vector::from(s));
            }
            let entry = Entry { pool: MemoryPool { slots, step }, last_ts: has_ts.then_some(ts), user_side };
            map.insert(id, Arc::new(RwLock::new(entry)));
        }
        Ok(MemoryStore { model_version: stored, depth, slot_dim, entries: RwLock::new(map) })
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let n = r.read_u32::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Corrupt { user: String::new(), msg: e.to_string() })
}
