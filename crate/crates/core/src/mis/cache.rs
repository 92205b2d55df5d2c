use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Sweep;
use crate::error::{Error, Result};
use crate::vocab::{TokenSeq, Vocab};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CacheEntry {
    pub latents: Vec<TokenSeq>,
    pub proposed: Vec<u64>,
    pub accepted: Vec<u64>,
}

/// Per-dialog cached latent trajectories, the state of every MIS chain.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LatentCache {
    entries: BTreeMap<String, CacheEntry>,
}

#[derive(Serialize, Deserialize)]
struct Line {
    id: String,
    latents: Vec<Vec<String>>,
    proposed: Vec<u64>,
    accepted: Vec<u64>,
}

impl LatentCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&CacheEntry> {
        self.entries.get(id)
    }

    /// Sets the cached latents for `id`, resetting its counters.
    pub fn insert(&mut self, id: &str, latents: Vec<TokenSeq>) {
        let n = latents.len();
        self.entries.insert(
            id.to_string(),
            CacheEntry {
                latents,
                proposed: vec![0; n],
                accepted: vec![0; n],
            },
        );
    }

    /// Stores a sweep's latents and bumps the per-turn counters.
    pub fn record(&mut self, id: &str, sweep: &Sweep) {
        let n = sweep.latents.len();
        let e = self.entries.entry(id.to_string()).or_insert_with(|| CacheEntry {
            latents: Vec::new(),
            proposed: vec![0; n],
            accepted: vec![0; n],
        });
        e.latents = sweep.latents.clone();
        e.proposed.resize(n, 0);
        e.accepted.resize(n, 0);
        for (t, &a) in sweep.accepted.iter().enumerate() {
            e.proposed[t] += 1;
            e.accepted[t] += a as u64;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &CacheEntry)> {
        self.entries.iter()
    }

    /// Pooled acceptance rate over all turns of all dialogs; `None` before any sweep.
    pub fn acceptance_rate(&self) -> Option<f64> {
        let (mut a, mut p) = (0u64, 0u64);
        for e in self.entries.values() {
            a += e.accepted.iter().sum::<u64>();
            p += e.proposed.iter().sum::<u64>();
        }
        (p > 0).then(|| a as f64 / p as f64)
    }

    pub fn reset_counters(&mut self) {
        for e in self.entries.values_mut() {
            e.proposed.iter_mut().for_each(|x| *x = 0);
            e.accepted.iter_mut().for_each(|x| *x = 0);
        }
    }

    pub fn write_jsonl(&self, vocab: &Vocab, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for (id, e) in &self.entries {
            let line = Line {
                id: id.clone(),
                latents: e.latents.iter().map(|h| vocab.decode(h)).collect(),
                proposed: e.proposed.clone(),
                accepted: e.accepted.clone(),
            };
            serde_json::to_writer(&mut out, &line)?;
            out.push(b'\n');
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(vocab: &Vocab, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cache = LatentCache::new();
        for (i, raw) in text.lines().enumerate() {
            if raw.trim().is_empty() {
                continue;
            }
            let parse_err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            let line: Line = serde_json::from_str(raw).map_err(|e| parse_err(e.to_string()))?;
            let latents = line
                .latents
                .iter()
                .map(|h| vocab.encode(h))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| parse_err(e.to_string()))?;
            cache.entries.insert(
                line.id,
                CacheEntry {
                    latents,
                    proposed: line.proposed,
                    accepted: line.accepted,
                },
            );
        }
        Ok(cache)
    }
}
