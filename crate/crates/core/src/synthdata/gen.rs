use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::world::{Bucket, SlotValue, World, ATTRS};
use crate::dialog::{Dialog, TurnRecord};
use crate::vocab::{TokenId, TokenSeq};

/// What the simulated user wants: one entity's attributes per goal domain and
/// the attributes they will ask about.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Goal {
    pub domains: Vec<usize>,
    pub constraints: BTreeSet<SlotValue>,
    /// (domain, attribute index into [`ATTRS`]).
    pub requests: BTreeSet<(usize, usize)>,
}

impl Goal {
    pub fn constraints_of(&self, domain: usize) -> Vec<SlotValue> {
        self.constraints.iter().copied().filter(|sv| sv.domain == domain).collect()
    }
}

/// splitmix64 finalizer, used to derive independent per-dialog streams.
pub fn mix_seed(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn dialog_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(seed ^ mix_seed(stream)) ^ index))
}

struct Mention {
    sv: SlotValue,
    intro: bool,
}

/// Generates `n` dialogs named `{prefix}{index}`; each dialog has its own RNG
/// stream so the result does not depend on generation order.
pub fn gen_split(world: &World, n: usize, seed: u64, prefix: &str) -> Vec<Dialog> {
    let stream = prefix.bytes().fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(b as u64));
    (0..n)
        .map(|i| {
            let mut rng = dialog_rng(seed, stream, i as u64);
            gen_dialog(world, &format!("{prefix}{i}"), &mut rng).0
        })
        .collect()
}

pub fn gen_dialog(world: &World, id: &str, rng: &mut dyn RngCore) -> (Dialog, Goal) {
    let c = &world.config;
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut n_turns = c.turn_probs.len() + 1;
    for (i, p) in c.turn_probs.iter().enumerate() {
        acc += p;
        if u < acc {
            n_turns = i + 2;
            break;
        }
    }
    let k = world.n_slots();
    let two = world.n_domains() >= 2 && n_turns >= 2 * k.div_ceil(2) && rng.gen_bool(c.two_domain_prob);
    let mut domains: Vec<usize> = (0..world.n_domains()).collect();
    domains.shuffle(rng);
    domains.truncate(if two { 2 } else { 1 });
    // Beliefs are in canonical domain order and the DB reads the last domain, so
    // domains are visited in index order.
    domains.sort_unstable();

    let mut goal = Goal {
        domains: domains.clone(),
        constraints: BTreeSet::new(),
        requests: BTreeSet::new(),
    };
    for &d in &domains {
        let ents = world.entities(d);
        let e = &ents[rng.gen_range(0..ents.len())];
        for (s, &v) in e.iter().enumerate() {
            goal.constraints.insert(SlotValue {
                domain: d,
                slot: s,
                value: v,
            });
        }
        let n_req = rng.gen_range(1..=2);
        let mut attrs: Vec<usize> = (0..ATTRS.len()).collect();
        attrs.shuffle(rng);
        for &a in &attrs[..n_req] {
            goal.requests.insert((d, a));
        }
    }

    // Each domain owns a contiguous block of turns; mentions go to random
    // positions, two per turn at most.
    let min_turns = k.div_ceil(2);
    let split = if two {
        rng.gen_range(min_turns..=n_turns - min_turns)
    } else {
        n_turns
    };
    let blocks: Vec<(usize, usize, usize)> = if two {
        vec![(domains[0], 0, split), (domains[1], split, n_turns)]
    } else {
        vec![(domains[0], 0, n_turns)]
    };
    let mut per_turn: Vec<Vec<Mention>> = (0..n_turns).map(|_| Vec::new()).collect();
    let mut last_turn_of = Vec::new();
    for &(d, lo, hi) in &blocks {
        let mut positions: Vec<usize> = (2 * lo..2 * hi).collect();
        positions.shuffle(rng);
        positions.truncate(k);
        positions.sort_unstable();
        let mut slots: Vec<usize> = (0..k).collect();
        slots.shuffle(rng);
        for (i, (&pos, &s)) in positions.iter().zip(&slots).enumerate() {
            let v = goal
                .constraints
                .iter()
                .find(|sv| sv.domain == d && sv.slot == s)
                .expect("goal covers every slot")
                .value;
            per_turn[pos / 2].push(Mention {
                sv: SlotValue {
                    domain: d,
                    slot: s,
                    value: v,
                },
                intro: i == 0,
            });
        }
        last_turn_of.push((d, positions[k - 1] / 2));
    }

    let mut belief = BTreeSet::new();
    let mut turns = Vec::with_capacity(n_turns);
    for (t, mentions) in per_turn.iter().enumerate() {
        let requests: Vec<usize> = last_turn_of
            .iter()
            .filter(|(_, lt)| *lt == t)
            .flat_map(|(d, _)| goal.requests.iter().filter(move |(gd, _)| gd == d).map(|(_, a)| *a))
            .collect();
        for m in mentions {
            belief.insert(m.sv);
        }
        let u = realize_user(world, mentions, &requests, t > 0, rng);
        let b = world.belief_seq(&belief);
        let db = super::world::db_query(world, &b);
        let a = act_for(world, &b, !mentions.is_empty(), &requests);
        let r = realize_response(world, &a, rng);
        turns.push(TurnRecord {
            u,
            b: Some(b),
            a: Some(a),
            db: Some(db),
            r,
        });
    }
    let dialog = Dialog {
        id: id.to_string(),
        turns,
        labeled: true,
    };
    (dialog, goal)
}

/// System act for a turn, from the accumulated belief and what the user said.
pub fn act_for(world: &World, belief: &[TokenId], mentioned: bool, requests: &[usize]) -> TokenSeq {
    let mut a = TokenSeq::new();
    if !mentioned && requests.is_empty() {
        a.push(world.tok("act:reqmore"));
        return a;
    }
    let active = world.active_constraints(belief);
    match world.bucket(belief) {
        Bucket::None => a.push(world.tok("act:nooffer")),
        Bucket::Many if requests.is_empty() => {
            let unfilled = active.and_then(|(d, cs)| {
                (0..world.n_slots())
                    .find(|s| !cs.iter().any(|sv| sv.slot == *s))
                    .map(|s| world.slot_name(d, s))
            });
            match unfilled {
                Some(slot) => {
                    a.push(world.tok("act:request"));
                    a.push(world.tok(&format!("slot:{slot}")));
                }
                None => a.push(world.tok("act:offer")),
            }
        }
        _ => {
            a.push(world.tok("act:offer"));
            let mut req = requests.to_vec();
            req.sort_unstable();
            req.dedup();
            for r in req {
                a.push(world.tok(&format!("inform:{}", ATTRS[r])));
            }
        }
    }
    a
}

fn realize_user(world: &World, mentions: &[Mention], requests: &[usize], later: bool, rng: &mut dyn RngCore) -> TokenSeq {
    let c = &world.config;
    let mut words: Vec<String> = Vec::new();
    for (i, m) in mentions.iter().enumerate() {
        let SlotValue { domain: d, slot: s, value: v } = m.sv;
        if m.intro {
            let verb = if rng.gen_bool(0.5) { "need" } else { "want" };
            words.push("i".into());
            if later {
                words.push("also".into());
            }
            words.extend([verb.to_string(), "a".into(), world.domain_name(d).into()]);
        } else if i > 0 {
            words.push("and".into());
        }
        let surface = if rng.gen_bool(c.ambiguity) {
            let others: Vec<usize> = (0..world.n_values()).filter(|&o| o != v).collect();
            let o = others[rng.gen_range(0..others.len())];
            world.ambiguous_word(d, s, v, o)
        } else if rng.gen_bool(c.synonym_prob) {
            world.synonym_word(d, s, v).to_string()
        } else {
            world.value_word(d, s, v).to_string()
        };
        words.push(surface);
        if rng.gen_bool(0.5) {
            words.push(world.slot_name(d, s).into());
        }
    }
    if !requests.is_empty() {
        if !words.is_empty() {
            words.push("and".into());
        }
        words.extend(["what".into(), "is".into(), "the".into()]);
        for (i, &r) in requests.iter().enumerate() {
            if i > 0 {
                words.push("and".into());
            }
            words.push(ATTRS[r].into());
        }
    }
    if words.is_empty() {
        let fill: &[&str] = match rng.gen_range(0..3) {
            0 => &["thanks"],
            1 => &["ok", "thanks"],
            _ => &["that", "is", "all"],
        };
        words.extend(fill.iter().map(|w| w.to_string()));
    }
    words.iter().map(|w| world.tok(w)).collect()
}

/// Delexicalized response for an act, in one of two phrasings.
pub fn realize_response(world: &World, act: &[TokenId], rng: &mut dyn RngCore) -> TokenSeq {
    let v = world.vocab();
    let names: Vec<&str> = act.iter().map(|&t| v.token(t)).collect();
    let alt = rng.gen_bool(0.5);
    let mut words: Vec<String> = Vec::new();
    match names.first().copied() {
        Some("act:nooffer") => {
            let w: &[&str] = if alt { &["sorry", "nothing", "matches"] } else { &["no", "match", "found", "sorry"] };
            words.extend(w.iter().map(|s| s.to_string()));
        }
        Some("act:request") => {
            let slot = names.get(1).and_then(|s| s.strip_prefix("slot:")).unwrap_or("area");
            let w: Vec<&str> = if alt {
                vec!["what", slot, "would", "you", "like", "?"]
            } else {
                vec!["which", slot, "do", "you", "prefer", "?"]
            };
            words.extend(w.iter().map(|s| s.to_string()));
        }
        Some("act:offer") => {
            let w: &[&str] = if alt { &["i", "recommend", "[name]"] } else { &["[name]", "is", "a", "good", "choice"] };
            words.extend(w.iter().map(|s| s.to_string()));
            for n in &names[1..] {
                if let Some(attr) = n.strip_prefix("inform:") {
                    words.extend(["and".into(), "its".into(), attr.into(), "is".into(), format!("[value_{attr}]")]);
                }
            }
        }
        _ => {
            let w: &[&str] = if alt { &["anything", "else", "?"] } else { &["can", "i", "help", "with", "anything", "else", "?"] };
            words.extend(w.iter().map(|s| s.to_string()));
        }
    }
    words.iter().map(|w| world.tok(w)).collect()
}

/// Per-turn parse of the user side: new slot values (ambiguous words resolved
/// against the goal) and requested attributes.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct UserParse {
    pub mentions: Vec<SlotValue>,
    pub requests: Vec<usize>,
}

pub fn parse_user(world: &World, goal: &Goal, domain: &mut Option<usize>, u: &[TokenId]) -> UserParse {
    let v = world.vocab();
    let mut out = UserParse::default();
    for &tok in u {
        let w = v.token(tok);
        if let Some(d) = (0..world.n_domains()).find(|&d| world.domain_name(d) == w) {
            *domain = Some(d);
            continue;
        }
        if let Some(a) = ATTRS.iter().position(|a| *a == w) {
            out.requests.push(a);
            continue;
        }
        let Some(d) = *domain else { continue };
        for s in 0..world.n_slots() {
            for val in 0..world.n_values() {
                let sv = SlotValue { domain: d, slot: s, value: val };
                let direct = world.value_word(d, s, val) == w || world.synonym_word(d, s, val) == w;
                let ambiguous = w.contains('/')
                    && goal.constraints.contains(&sv)
                    && w.split('/').any(|p| p == world.value_word(d, s, val));
                if direct || ambiguous {
                    out.mentions.push(sv);
                }
            }
        }
    }
    out
}

/// Replays the deterministic part of the generator on the user turns and the
/// goal, returning `(b, db, a)` per turn.
pub fn replay(world: &World, goal: &Goal, dialog: &Dialog) -> Vec<(TokenSeq, TokenSeq, TokenSeq)> {
    let mut belief = BTreeSet::new();
    let mut domain = None;
    dialog
        .turns
        .iter()
        .map(|turn| {
            let parse = parse_user(world, goal, &mut domain, &turn.u);
            belief.extend(parse.mentions.iter().copied());
            let b = world.belief_seq(&belief);
            let db = super::world::db_query(world, &b);
            let a = act_for(world, &b, !parse.mentions.is_empty(), &parse.requests);
            (b, db, a)
        })
        .collect()
}

/// Goal implied by a labeled dialog: its final belief and every attribute
/// informed in some act, attributed to the domain active at that turn.
pub fn gold_goal(world: &World, dialog: &Dialog) -> Option<Goal> {
    let last = dialog.turns.last()?.b.as_ref()?;
    let constraints: BTreeSet<SlotValue> = last.iter().filter_map(|&t| world.parse_belief_token(t)).collect();
    let mut domains: Vec<usize> = Vec::new();
    for sv in &constraints {
        if !domains.contains(&sv.domain) {
            domains.push(sv.domain);
        }
    }
    let mut requests = BTreeSet::new();
    for turn in &dialog.turns {
        let (b, a) = (turn.b.as_ref()?, turn.a.as_ref()?);
        let Some((d, _)) = world.active_constraints(b) else { continue };
        for &tok in a.iter() {
            if let Some(attr) = world.vocab().token(tok).strip_prefix("inform:") {
                if let Some(i) = ATTRS.iter().position(|x| *x == attr) {
                    requests.insert((d, i));
                }
            }
        }
    }
    Some(Goal {
        domains,
        constraints,
        requests,
    })
}
