//! On-disk content-addressed store of judgments.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use super::Judgment;
use crate::corpus::write_atomic;
use crate::error::{Error, Result};

const FILE_NAME: &str = "judgments.jsonl";

/// JSONL file of judgments keyed by `cache_key`. Every insert rewrites the
/// file atomically.
#[derive(Debug)]
pub struct JudgeCache {
    path: PathBuf,
    entries: Mutex<BTreeMap<String, Judgment>>,
}

impl JudgeCache {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(FILE_NAME);
        let mut entries = BTreeMap::new();
        if path.exists() {
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let j: Judgment = serde_json::from_str(line).map_err(|e| Error::MalformedLine {
                    line: i + 1,
                    message: e.to_string(),
                })?;
                entries.insert(j.cache_key.clone(), j);
            }
        }
        Ok(JudgeCache {
            path,
            entries: Mutex::new(entries),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &str) -> Option<Judgment> {
        self.entries.lock().expect("cache lock").get(key).cloned()
    }

    pub fn insert(&self, judgment: Judgment) -> Result<()> {
        let mut entries = self.entries.lock().expect("cache lock");
        entries.insert(judgment.cache_key.clone(), judgment);
        let mut out = String::new();
        for j in entries.values() {
            out.push_str(&serde_json::to_string(j).expect("judgment serializes"));
            out.push('\n');
        }
        write_atomic(&self.path, out.as_bytes())
    }
}
