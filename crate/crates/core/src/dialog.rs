use crate::error::{Error, Result};
use crate::vocab::{TokenId, TokenSeq};

/// One turn: user utterance, optional latent labels, DB result, and response.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TurnRecord {
    pub u: TokenSeq,
    pub b: Option<TokenSeq>,
    pub a: Option<TokenSeq>,
    pub db: Option<TokenSeq>,
    pub r: TokenSeq,
}

impl TurnRecord {
    pub fn is_labeled(&self) -> bool {
        self.b.is_some() && self.a.is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dialog {
    pub id: String,
    pub turns: Vec<TurnRecord>,
    pub labeled: bool,
}

impl Dialog {
    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.turns.is_empty() {
            return Err(Error::InvalidInput(format!("dialog {} has no turns", self.id)));
        }
        for (t, turn) in self.turns.iter().enumerate() {
            if turn.b.is_some() != turn.a.is_some() {
                return Err(Error::InvalidInput(format!(
                    "dialog {} turn {t}: belief and act must both be present or both absent",
                    self.id
                )));
            }
            if turn.is_labeled() != self.labeled {
                return Err(Error::InvalidInput(format!(
                    "dialog {} turn {t}: labels disagree with the labeled flag",
                    self.id
                )));
            }
        }
        Ok(())
    }

    /// `r_{t-1}`, empty at the first turn.
    pub fn prev_r(&self, t: usize) -> &[TokenId] {
        if t == 0 {
            &[]
        } else {
            &self.turns[t - 1].r
        }
    }

    /// Gold latent states `b_t ⊕ SEP_B ⊕ a_t ⊕ EOS`; requires a labeled dialog.
    pub fn gold_latents(&self, markers: &crate::vocab::Markers) -> Result<Vec<TokenSeq>> {
        self.turns
            .iter()
            .map(|turn| match (&turn.b, &turn.a) {
                (Some(b), Some(a)) => Ok(crate::seqmodel::layout::join_latent(markers, b, a)),
                _ => Err(Error::Contract(format!("dialog {} is not labeled", self.id))),
            })
            .collect()
    }
}
