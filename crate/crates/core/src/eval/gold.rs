use std::collections::BTreeMap;

use super::{latent_prf, Prf};
use crate::dialog::Dialog;
use crate::error::{Error, Result};
use crate::vocab::{TokenSeq, Vocab};

/// Labels removed by masking. Nothing outside the eval module can read them back;
/// the only consumer is [`GoldStore::latent_prf`].
#[derive(Clone, Debug, Default)]
pub struct GoldStore {
    dialogs: BTreeMap<String, Dialog>,
}

impl GoldStore {
    pub(crate) fn seal(&mut self, d: Dialog) {
        self.dialogs.insert(d.id.clone(), d);
    }

    pub fn len(&self) -> usize {
        self.dialogs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dialogs.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.dialogs.contains_key(id)
    }

    /// Scores predicted latents of masked dialogs against their sealed labels.
    pub fn latent_prf(&self, vocab: &Vocab, preds: &[(String, Vec<TokenSeq>)]) -> Result<Prf> {
        let m = vocab.markers();
        let mut all_pred = Vec::new();
        let mut all_gold = Vec::new();
        for (id, latents) in preds {
            let d = self
                .dialogs
                .get(id)
                .ok_or_else(|| Error::InvalidInput(format!("no sealed labels for {id}")))?;
            all_gold.extend(d.gold_latents(&m)?);
            all_pred.extend(latents.iter().cloned());
        }
        latent_prf(vocab, &all_pred, &all_gold)
    }
}
