use std::collections::BTreeSet;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seqmodel::layout::Database;
use crate::vocab::{TokenId, TokenSeq, Vocab};

struct DomainSpec {
    name: &'static str,
    slots: [(&'static str, [&'static str; 5], [&'static str; 5]); 3],
}

const AREA: (&str, [&str; 5], [&str; 5]) = (
    "area",
    ["north", "south", "east", "west", "centre"],
    ["northern", "southern", "eastern", "western", "central"],
);

const DOMAINS: [DomainSpec; 3] = [
    DomainSpec {
        name: "restaurant",
        slots: [
            AREA,
            (
                "food",
                ["italian", "chinese", "indian", "french", "thai"],
                ["pasta", "noodles", "curry", "bistro", "spicy"],
            ),
            (
                "price",
                ["cheap", "moderate", "expensive", "budget", "premium"],
                ["inexpensive", "midrange", "pricey", "thrifty", "upscale"],
            ),
        ],
    },
    DomainSpec {
        name: "hotel",
        slots: [
            AREA,
            (
                "stars",
                ["one", "two", "three", "four", "five"],
                ["1star", "2star", "3star", "4star", "5star"],
            ),
            (
                "type",
                ["guesthouse", "hostel", "lodge", "inn", "resort"],
                ["bnb", "dorm", "cabin", "tavern", "spa"],
            ),
        ],
    },
    DomainSpec {
        name: "attraction",
        slots: [
            AREA,
            (
                "kind",
                ["museum", "park", "theatre", "gallery", "zoo"],
                ["exhibit", "garden", "playhouse", "artspace", "wildlife"],
            ),
            (
                "fee",
                ["free", "low", "medium", "high", "steep"],
                ["nocost", "small", "average", "large", "hefty"],
            ),
        ],
    },
];

pub const ATTRS: [&str; 3] = ["phone", "address", "postcode"];

const FUNCTION_WORDS: [&str; 27] = [
    "i", "need", "want", "a", "also", "and", "what", "is", "the", "thanks", "ok", "that", "all", "please", "?",
    "anything", "else", "can", "help", "with", "sorry", "nothing", "matches", "no", "match", "found", "its",
];

const RESPONSE_WORDS: [&str; 11] = [
    "would", "you", "like", "which", "do", "prefer", "available", "recommend", "[name]", "good", "choice",
];

pub const DB_NONE: &str = "db:none";
pub const DB_FEW: &str = "db:few";
pub const DB_MANY: &str = "db:many";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    /// Seeds the entity table.
    pub seed: u64,
    pub n_domains: usize,
    pub slots_per_domain: usize,
    pub values_per_slot: usize,
    pub entities_per_domain: usize,
    /// Probability that a mention uses a surface form shared by two values.
    pub ambiguity: f64,
    /// Probability that an unambiguous mention uses the rarer synonym.
    pub synonym_prob: f64,
    /// Probabilities of dialog lengths 2, 3, ...
    pub turn_probs: Vec<f64>,
    /// Probability of a two-domain goal when the dialog is long enough.
    pub two_domain_prob: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            seed: 7,
            n_domains: 2,
            slots_per_domain: 3,
            values_per_slot: 5,
            entities_per_domain: 20,
            ambiguity: 0.15,
            synonym_prob: 0.2,
            turn_probs: vec![0.2, 0.35, 0.3, 0.15],
            two_domain_prob: 0.4,
        }
    }
}

/// The MiniTOD ontology, entity table and vocabulary.
#[derive(Clone, Debug)]
pub struct World {
    pub config: WorldConfig,
    vocab: Arc<Vocab>,
    /// `entities[d][e][s]` = value index of slot `s` for entity `e` of domain `d`.
    entities: Vec<Vec<Vec<usize>>>,
}

/// A slot-value constraint addressed by indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SlotValue {
    pub domain: usize,
    pub slot: usize,
    pub value: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bucket {
    None,
    Few,
    Many,
}

impl World {
    pub fn new(config: WorldConfig) -> Result<Self> {
        if config.n_domains == 0 || config.n_domains > DOMAINS.len() {
            return Err(Error::Config(format!("n_domains must be in 1..={}", DOMAINS.len())));
        }
        if config.slots_per_domain == 0 || config.slots_per_domain > 3 {
            return Err(Error::Config("slots_per_domain must be in 1..=3".into()));
        }
        if config.values_per_slot < 2 || config.values_per_slot > 5 {
            return Err(Error::Config("values_per_slot must be in 2..=5".into()));
        }
        if config.entities_per_domain == 0 {
            return Err(Error::Config("entities_per_domain must be positive".into()));
        }
        if config.turn_probs.is_empty() || config.turn_probs.iter().any(|p| *p < 0.0) {
            return Err(Error::Config("turn_probs must be a non-empty list of non-negative weights".into()));
        }
        let total: f64 = config.turn_probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("turn_probs sum to {total}, expected 1")));
        }
        for (name, p) in [
            ("ambiguity", config.ambiguity),
            ("synonym_prob", config.synonym_prob),
            ("two_domain_prob", config.two_domain_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1]")));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let entities = (0..config.n_domains)
            .map(|_| {
                (0..config.entities_per_domain)
                    .map(|_| {
                        (0..config.slots_per_domain)
                            .map(|_| rng.gen_range(0..config.values_per_slot))
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let vocab = Arc::new(Vocab::with_specials(Self::token_list(&config))?);
        Ok(World {
            config,
            vocab,
            entities,
        })
    }

    fn token_list(c: &WorldConfig) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        let mut seen = BTreeSet::new();
        let mut add = |t: String, out: &mut Vec<String>| {
            if seen.insert(t.clone()) {
                out.push(t);
            }
        };
        for d in 0..c.n_domains {
            for s in 0..c.slots_per_domain {
                for v in 0..c.values_per_slot {
                    add(Self::belief_token_of(d, s, v), &mut out);
                }
            }
        }
        for d in 0..c.n_domains {
            add(DOMAINS[d].name.to_string(), &mut out);
            for s in 0..c.slots_per_domain {
                let (slot, vals, syns) = &DOMAINS[d].slots[s];
                add(slot.to_string(), &mut out);
                for v in 0..c.values_per_slot {
                    add(vals[v].to_string(), &mut out);
                    add(syns[v].to_string(), &mut out);
                }
                for a in 0..c.values_per_slot {
                    for b in a + 1..c.values_per_slot {
                        add(format!("{}/{}", vals[a], vals[b]), &mut out);
                    }
                }
            }
        }
        for a in ATTRS {
            add(a.to_string(), &mut out);
            add(format!("[value_{a}]"), &mut out);
        }
        for w in FUNCTION_WORDS.iter().chain(&RESPONSE_WORDS) {
            add(w.to_string(), &mut out);
        }
        for a in ["act:reqmore", "act:nooffer", "act:request", "act:offer"] {
            add(a.to_string(), &mut out);
        }
        for d in 0..c.n_domains {
            for s in 0..c.slots_per_domain {
                add(format!("slot:{}", DOMAINS[d].slots[s].0), &mut out);
            }
        }
        for a in ATTRS {
            add(format!("inform:{a}"), &mut out);
        }
        for b in [DB_NONE, DB_FEW, DB_MANY] {
            add(b.to_string(), &mut out);
        }
        out
    }

    pub fn vocab(&self) -> &Arc<Vocab> {
        &self.vocab
    }

    pub fn n_domains(&self) -> usize {
        self.config.n_domains
    }

    pub fn n_slots(&self) -> usize {
        self.config.slots_per_domain
    }

    pub fn n_values(&self) -> usize {
        self.config.values_per_slot
    }

    pub fn entities(&self, domain: usize) -> &[Vec<usize>] {
        &self.entities[domain]
    }

    pub fn domain_name(&self, d: usize) -> &'static str {
        DOMAINS[d].name
    }

    pub fn slot_name(&self, d: usize, s: usize) -> &'static str {
        DOMAINS[d].slots[s].0
    }

    pub fn value_word(&self, d: usize, s: usize, v: usize) -> &'static str {
        DOMAINS[d].slots[s].1[v]
    }

    pub fn synonym_word(&self, d: usize, s: usize, v: usize) -> &'static str {
        DOMAINS[d].slots[s].2[v]
    }

    /// Surface form shared by values `a` and `b` of one slot.
    pub fn ambiguous_word(&self, d: usize, s: usize, a: usize, b: usize) -> String {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        format!("{}/{}", self.value_word(d, s, lo), self.value_word(d, s, hi))
    }

    fn belief_token_of(d: usize, s: usize, v: usize) -> String {
        let (slot, vals, _) = &DOMAINS[d].slots[s];
        format!("{}-{}={}", DOMAINS[d].name, slot, vals[v])
    }

    pub fn belief_token(&self, sv: SlotValue) -> TokenId {
        self.tok(&Self::belief_token_of(sv.domain, sv.slot, sv.value))
    }

    pub fn tok(&self, s: &str) -> TokenId {
        self.vocab.id(s).unwrap_or_else(|| panic!("token {s:?} missing from world vocabulary"))
    }

    /// Inverse of [`World::belief_token`]; `None` for anything that is not a belief token.
    pub fn parse_belief_token(&self, id: TokenId) -> Option<SlotValue> {
        let s = self.vocab.token(id);
        let (dom, rest) = s.split_once('-')?;
        let (slot, val) = rest.split_once('=')?;
        let d = (0..self.n_domains()).find(|&d| DOMAINS[d].name == dom)?;
        let si = (0..self.n_slots()).find(|&i| DOMAINS[d].slots[i].0 == slot)?;
        let v = (0..self.n_values()).find(|&v| DOMAINS[d].slots[si].1[v] == val)?;
        Some(SlotValue {
            domain: d,
            slot: si,
            value: v,
        })
    }

    /// Canonical belief sequence: domain order, then slot order.
    pub fn belief_seq(&self, constraints: &BTreeSet<SlotValue>) -> TokenSeq {
        constraints.iter().map(|&sv| self.belief_token(sv)).collect()
    }

    /// Constraints of the domain of the last parseable belief token.
    pub fn active_constraints(&self, belief: &[TokenId]) -> Option<(usize, Vec<SlotValue>)> {
        let parsed: Vec<SlotValue> = belief.iter().filter_map(|&t| self.parse_belief_token(t)).collect();
        let domain = parsed.last()?.domain;
        Some((domain, parsed.into_iter().filter(|sv| sv.domain == domain).collect()))
    }

    pub fn match_count(&self, domain: usize, constraints: &[SlotValue]) -> usize {
        self.entities[domain]
            .iter()
            .filter(|e| constraints.iter().all(|sv| e[sv.slot] == sv.value))
            .count()
    }

    /// Entity indices of `domain` satisfying every constraint.
    pub fn matching_entities(&self, domain: usize, constraints: &[SlotValue]) -> Vec<usize> {
        self.entities[domain]
            .iter()
            .enumerate()
            .filter(|(_, e)| constraints.iter().all(|sv| e[sv.slot] == sv.value))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn bucket(&self, belief: &[TokenId]) -> Bucket {
        match self.active_constraints(belief) {
            None => Bucket::Many,
            Some((d, cs)) => match self.match_count(d, &cs) {
                0 => Bucket::None,
                1 | 2 => Bucket::Few,
                _ => Bucket::Many,
            },
        }
    }

    pub fn bucket_token(&self, b: Bucket) -> TokenId {
        self.tok(match b {
            Bucket::None => DB_NONE,
            Bucket::Few => DB_FEW,
            Bucket::Many => DB_MANY,
        })
    }

    /// Hash of the configuration, the entity table and the vocabulary.
    pub fn hash_hex(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_string(&self.config).expect("config serializes").as_bytes());
        for dom in &self.entities {
            for e in dom {
                for v in e {
                    h.update((*v as u64).to_le_bytes());
                }
            }
        }
        h.update(self.vocab.hash_hex().as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Deterministic bucket lookup: `db:none` / `db:few` / `db:many` over the domain
/// of the last belief token; an empty belief is unconstrained.
pub fn db_query(world: &World, belief: &[TokenId]) -> TokenSeq {
    TokenSeq(vec![world.bucket_token(world.bucket(belief))])
}

impl Database for World {
    fn query(&self, belief: &[TokenId]) -> TokenSeq {
        db_query(self, belief)
    }
}
