//! Content-addressed checkpoint directory.
//!
//! A checkpoint's id is the hex SHA-256 of its bytes, so ids are stable
//! across restarts and identical models share one file. Loaded models are
//! cached and shared immutably between requests.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};
use voxdetail::detailizer::DetailizerModel;
use voxdetail::nn::Checkpoint;

const EXT: &str = "artc";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckpointInfo {
    pub id: String,
    pub prompt: Option<String>,
    pub k: usize,
    pub fine: usize,
    pub bytes: u64,
}

#[derive(Debug)]
pub struct CheckpointStore {
    dir: PathBuf,
    cache: RwLock<HashMap<String, Arc<DetailizerModel>>>,
}

pub fn digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn valid_id(id: &str) -> bool {
    id.len() == 64 && id.bytes().all(|b| b.is_ascii_hexdigit() && !b.is_ascii_uppercase())
}

impl CheckpointStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir,
            cache: RwLock::new(HashMap::new()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.{EXT}"))
    }

    /// Stores `model` with the prompt it was trained for and returns its id.
    pub fn insert(&self, model: &DetailizerModel, prompt: Option<&str>) -> Result<String> {
        let mut ck = model.to_checkpoint();
        if let Some(p) = prompt {
            ck.set_meta("prompt", p);
        }
        self.insert_bytes(&ck.to_bytes())
    }

    /// Stores an encoded checkpoint after checking that it decodes.
    pub fn insert_bytes(&self, bytes: &[u8]) -> Result<String> {
        let mut ck = Checkpoint::from_bytes(bytes)?;
        let model = DetailizerModel::from_checkpoint(&mut ck)?;
        let id = digest(bytes);
        let path = self.path(&id);
        if !path.exists() {
            let tmp = self.dir.join(format!(".{id}.tmp"));
            std::fs::write(&tmp, bytes)?;
            std::fs::rename(&tmp, &path)?;
        }
        self.cache.write().expect("cache lock").insert(id.clone(), Arc::new(model));
        Ok(id)
    }

    /// The model with this id, or `None` when no such checkpoint exists.
    pub fn get(&self, id: &str) -> Result<Option<Arc<DetailizerModel>>> {
        if !valid_id(id) {
            return Ok(None);
        }
        if let Some(m) = self.cache.read().expect("cache lock").get(id) {
            return Ok(Some(m.clone()));
        }
        let path = self.path(id);
        if !path.exists() {
            return Ok(None);
        }
        let model = Arc::new(DetailizerModel::load(&path)?);
        self.cache.write().expect("cache lock").insert(id.to_string(), model.clone());
        Ok(Some(model))
    }

    /// Every stored checkpoint, sorted by id.
    pub fn list(&self) -> Result<Vec<CheckpointInfo>> {
        let mut out = Vec::new();
        for entry in std::fs::read_dir(&self.dir)? {
            let path = entry?.path();
            let Some(id) = path
                .file_stem()
                .and_then(|s| s.to_str())
                .filter(|s| path.extension().is_some_and(|e| e == EXT) && valid_id(s))
            else {
                continue;
            };
            let bytes = std::fs::read(&path)?;
            let mut ck = Checkpoint::from_bytes(&bytes)?;
            let prompt = ck.meta("prompt").map(str::to_string);
            let model = DetailizerModel::from_checkpoint(&mut ck)?;
            out.push(CheckpointInfo {
                id: id.to_string(),
                prompt,
                k: model.config().k,
                fine: model.config().fine,
                bytes: bytes.len() as u64,
            });
        }
        out.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(out)
    }
}
