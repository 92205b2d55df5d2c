//! MiniTOD: a synthetic task-oriented dialog domain with a known generative
//! program, label masking and JSONL persistence.

mod gen;
mod world;

use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::RngCore;
use serde::{Deserialize, Serialize};

pub use gen::{
    act_for, dialog_rng, gen_dialog, gen_split, gold_goal, mix_seed, parse_user, realize_response, replay, Goal,
    UserParse,
};
pub use world::{db_query, Bucket, SlotValue, World, WorldConfig, ATTRS, DB_FEW, DB_MANY, DB_NONE};

use crate::dialog::{Dialog, TurnRecord};
use crate::error::{Error, Result};
use crate::eval::GoldStore;
use crate::vocab::Vocab;

/// Keeps labels on a uniformly drawn `⌈proportion·N⌉` subset and strips b, a and
/// db from the rest. The stripped labels go into a [`GoldStore`], which only the
/// evaluation code can read.
pub fn mask_labels(data: &[Dialog], proportion: f64, rng: &mut dyn RngCore) -> Result<(Vec<Dialog>, GoldStore)> {
    if !(proportion > 0.0 && proportion <= 1.0) {
        return Err(Error::Config(format!("label proportion {proportion} not in (0, 1]")));
    }
    if let Some(d) = data.iter().find(|d| !d.labeled) {
        return Err(Error::Contract(format!("mask_labels needs labeled input, {} is not", d.id)));
    }
    let n = data.len();
    let keep_n = ((proportion * n as f64).ceil() as usize).min(n);
    let mut keep = vec![false; n];
    for i in sample(rng, n, keep_n) {
        keep[i] = true;
    }
    let mut gold = GoldStore::default();
    let out = data
        .iter()
        .zip(&keep)
        .map(|(d, &k)| {
            if k {
                return d.clone();
            }
            gold.seal(d.clone());
            Dialog {
                id: d.id.clone(),
                labeled: false,
                turns: d
                    .turns
                    .iter()
                    .map(|t| TurnRecord {
                        u: t.u.clone(),
                        r: t.r.clone(),
                        ..Default::default()
                    })
                    .collect(),
            }
        })
        .collect();
    Ok((out, gold))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TurnLine {
    user: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    belief: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    act: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    db: Option<Vec<String>>,
    resp: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DialogLine {
    id: String,
    labeled: bool,
    turns: Vec<TurnLine>,
}

pub fn write_jsonl(vocab: &Vocab, data: &[Dialog], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for d in data {
        let dec = |s: &[crate::TokenId]| vocab.decode(s);
        let line = DialogLine {
            id: d.id.clone(),
            labeled: d.labeled,
            turns: d
                .turns
                .iter()
                .map(|t| TurnLine {
                    user: dec(&t.u),
                    belief: t.b.as_deref().map(dec),
                    act: t.a.as_deref().map(dec),
                    db: t.db.as_deref().map(dec),
                    resp: dec(&t.r),
                })
                .collect(),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(vocab: &Vocab, path: &Path) -> Result<Vec<Dialog>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let line: DialogLine = serde_json::from_str(raw).map_err(|e| bad(e.to_string()))?;
        let enc = |w: &Vec<String>| vocab.encode(w).map_err(|e| bad(e.to_string()));
        let turns = line
            .turns
            .iter()
            .map(|t| {
                Ok(TurnRecord {
                    u: enc(&t.user)?,
                    b: t.belief.as_ref().map(enc).transpose()?,
                    a: t.act.as_ref().map(enc).transpose()?,
                    db: t.db.as_ref().map(enc).transpose()?,
                    r: enc(&t.resp)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let d = Dialog {
            id: line.id,
            turns,
            labeled: line.labeled,
        };
        d.validate().map_err(|e| bad(e.to_string()))?;
        out.push(d);
    }
    Ok(out)
}
