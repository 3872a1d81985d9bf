//! Adversarial strategies. The adversary is one coordinated entity that sees every
//! block, acts after honest mining in each round and owns its own rng stream.

use fixedbitset::FixedBitSet;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{BlockId, BlockTree};
use crate::network::DelayPolicy;
use crate::prism_sim::{Body, PrismStore};

/// A parent or reference target: an existing block, or the i-th block ordered
/// earlier in the same action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParentRef {
    Block(BlockId),
    New(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Release {
    pub block: ParentRef,
    pub policy: DelayPolicy,
}

impl Release {
    pub fn now(block: ParentRef) -> Self {
        Self { block, policy: DelayPolicy::MinDelay }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BitcoinAction {
    /// Parent of each adversarial block mined this round.
    pub mine: Vec<ParentRef>,
    pub release: Vec<Release>,
    /// Delivery plans for this round's honest blocks; unlisted blocks use delay 1.
    pub honest_delays: Vec<(BlockId, DelayPolicy)>,
}

pub struct BitcoinObservation<'a> {
    pub round: u32,
    pub delay: u32,
    pub budget: u32,
    pub honest_miners: u32,
    pub tree: &'a BlockTree,
    /// Each honest miner's tip at the start of the round.
    pub tips: &'a [BlockId],
    /// Honest blocks mined this round with their miners.
    pub new_honest: &'a [(BlockId, u32)],
    /// Blocks sent to honest miners in earlier rounds.
    pub public: &'a FixedBitSet,
}

pub trait BitcoinStrategy: Send {
    fn name(&self) -> &'static str;
    fn act(&mut self, obs: &BitcoinObservation<'_>, rng: &mut ChaCha8Rng) -> BitcoinAction;
    /// Ids assigned to this round's mine orders, in order.
    fn mined(&mut self, _ids: &[BlockId]) {}
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PrismOrder {
    Proposer { cert: ParentRef, refs: Vec<ParentRef> },
    /// `chain` is in 1..=m.
    Voter { chain: u32, parent: ParentRef, votes: Vec<(u32, ParentRef)> },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PrismAction {
    pub mine: Vec<PrismOrder>,
    pub release: Vec<Release>,
    pub honest_delays: Vec<(BlockId, DelayPolicy)>,
}

pub struct PrismObservation<'a> {
    pub round: u32,
    pub delay: u32,
    /// Adversarial budget per chain; index 0 is the proposer chain.
    pub budgets: &'a [u32],
    pub honest_miners: u32,
    pub store: &'a PrismStore,
    /// `tips[miner][j - 1]`: voter-chain tips at the start of the round.
    pub tips: &'a [Vec<BlockId>],
    pub new_honest: &'a [BlockId],
    /// Blocks sent to honest miners in earlier rounds.
    pub public: &'a FixedBitSet,
}

pub trait PrismStrategy: Send {
    fn name(&self) -> &'static str;
    fn act(&mut self, obs: &PrismObservation<'_>, rng: &mut ChaCha8Rng) -> PrismAction;
    fn mined(&mut self, _ids: &[BlockId]) {}
}

/// Config-level strategy selector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", try_from = "RawSpec")]
pub enum AdversarySpec {
    Null,
    PrivateFork {
        k: u32,
        give_up: u32,
    },
    SplitView,
    LeaderCensor,
}

// serde ignores deny_unknown_fields on unit variants of tagged enums, so the
// fields are checked against the kind by hand
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpec {
    kind: String,
    k: Option<u32>,
    give_up: Option<u32>,
}

impl TryFrom<RawSpec> for AdversarySpec {
    type Error = String;

    fn try_from(raw: RawSpec) -> Result<Self, String> {
        let plain = |spec: AdversarySpec| match (raw.k, raw.give_up) {
            (None, None) => Ok(spec),
            _ => Err(format!("adversary kind {} takes no parameters", raw.kind)),
        };
        match raw.kind.as_str() {
            "null" => plain(Self::Null),
            "split_view" => plain(Self::SplitView),
            "leader_censor" => plain(Self::LeaderCensor),
            "private_fork" => Ok(Self::PrivateFork {
                k: raw.k.ok_or("private_fork needs k")?,
                give_up: raw.give_up.unwrap_or(3),
            }),
            other => Err(format!("unknown adversary kind {other}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SpecError {
    #[error("strategy {0} is not available for {1}")]
    WrongProtocol(&'static str, &'static str),
    #[error("private_fork needs k >= 1")]
    BadDepth,
}

impl AdversarySpec {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Null => "null",
            Self::PrivateFork { .. } => "private_fork",
            Self::SplitView => "split_view",
            Self::LeaderCensor => "leader_censor",
        }
    }

    pub fn bitcoin(&self) -> Result<Box<dyn BitcoinStrategy>, SpecError> {
        Ok(match *self {
            Self::Null => Box::new(NullAdversary),
            Self::PrivateFork { k, give_up } => {
                if k == 0 {
                    return Err(SpecError::BadDepth);
                }
                Box::new(PrivateFork::new(k, give_up))
            }
            Self::SplitView => Box::new(SplitView),
            Self::LeaderCensor => return Err(SpecError::WrongProtocol("leader_censor", "bitcoin")),
        })
    }

    pub fn prism(&self) -> Result<Box<dyn PrismStrategy>, SpecError> {
        Ok(match self {
            Self::Null => Box::new(NullAdversary),
            Self::LeaderCensor => Box::new(LeaderCensor::default()),
            other => return Err(SpecError::WrongProtocol(other.name(), "prism")),
        })
    }
}

/// Highest block, smallest id among equals.
pub fn best_tip<I: IntoIterator<Item = BlockId>>(tree: &BlockTree, tips: I) -> BlockId {
    tips.into_iter()
        .max_by(|&a, &b| tree.height(a).cmp(&tree.height(b)).then(b.cmp(&a)))
        .unwrap_or(crate::chain::GENESIS)
}

fn chained(first: BlockId, count: u32) -> Vec<ParentRef> {
    (0..count as usize).map(|i| if i == 0 { ParentRef::Block(first) } else { ParentRef::New(i - 1) }).collect()
}

/// Mines on the best public tip and releases at once.
#[derive(Debug, Clone, Copy, Default)]
pub struct NullAdversary;

impl BitcoinStrategy for NullAdversary {
    fn name(&self) -> &'static str {
        "null"
    }

    fn act(&mut self, obs: &BitcoinObservation<'_>, _rng: &mut ChaCha8Rng) -> BitcoinAction {
        let parent = best_tip(obs.tree, obs.tips.iter().copied());
        let n = obs.budget as usize;
        BitcoinAction {
            mine: vec![ParentRef::Block(parent); n],
            release: (0..n).map(|i| Release::now(ParentRef::New(i))).collect(),
            honest_delays: Vec::new(),
        }
    }
}

/// Withholds a private chain forked from the public tip and publishes it once it
/// is longer and the public block just above the fork is `k`-deep.
#[derive(Debug, Clone)]
pub struct PrivateFork {
    k: u32,
    give_up: u32,
    base: Option<BlockId>,
    tip: BlockId,
    blocks: Vec<BlockId>,
    releasing: bool,
}

impl PrivateFork {
    pub fn new(k: u32, give_up: u32) -> Self {
        Self { k, give_up, base: None, tip: 0, blocks: Vec::new(), releasing: false }
    }
}

impl BitcoinStrategy for PrivateFork {
    fn name(&self) -> &'static str {
        "private_fork"
    }

    fn act(&mut self, obs: &BitcoinObservation<'_>, _rng: &mut ChaCha8Rng) -> BitcoinAction {
        let tree = obs.tree;
        let start = best_tip(tree, obs.tips.iter().copied());
        let public = best_tip(tree, obs.tips.iter().copied().chain(obs.new_honest.iter().map(|&(b, _)| b)));
        let public_h = tree.height(public);
        if self.base.is_none() || public_h > tree.height(self.tip) + self.give_up {
            self.base = Some(start);
            self.tip = start;
            self.blocks.clear();
        }
        let base_h = tree.height(self.base.expect("set above"));
        let mine = chained(self.tip, obs.budget);
        let private_h = tree.height(self.tip) + obs.budget;
        let mut release = Vec::new();
        self.releasing = private_h > public_h && public_h >= base_h + 1 + self.k && private_h > base_h;
        if self.releasing {
            release.extend(self.blocks.iter().map(|&b| Release::now(ParentRef::Block(b))));
            release.extend((0..mine.len()).map(|i| Release::now(ParentRef::New(i))));
        }
        BitcoinAction { mine, release, honest_delays: Vec::new() }
    }

    fn mined(&mut self, ids: &[BlockId]) {
        if let Some(&last) = ids.last() {
            self.blocks.extend_from_slice(ids);
            self.tip = last;
        }
        if self.releasing {
            self.base = None;
            self.blocks.clear();
            self.releasing = false;
        }
    }
}

/// Splits honest miners by index parity. Honest blocks reach their own half
/// after one round and the other half after T; adversarial blocks extend the
/// lagging half and reach it first.
#[derive(Debug, Clone, Copy, Default)]
pub struct SplitView;

fn parity_plan(miners: u32, fast: u32, delay: u32) -> DelayPolicy {
    DelayPolicy::Adversarial((0..miners).map(|i| if i % 2 == fast % 2 { 1 } else { delay }).collect())
}

impl BitcoinStrategy for SplitView {
    fn name(&self) -> &'static str {
        "split_view"
    }

    fn act(&mut self, obs: &BitcoinObservation<'_>, _rng: &mut ChaCha8Rng) -> BitcoinAction {
        let tree = obs.tree;
        let honest_delays =
            obs.new_honest.iter().map(|&(b, miner)| (b, parity_plan(obs.honest_miners, miner, obs.delay))).collect();
        let half = |par: usize| best_tip(tree, obs.tips.iter().copied().skip(par).step_by(2));
        let (even, odd) = (half(0), half(1));
        let lag = if obs.honest_miners < 2 || tree.height(even) <= tree.height(odd) { 0 } else { 1 };
        let parent = if lag == 0 { even } else { odd };
        let mine = chained(parent, obs.budget);
        let release =
            (0..mine.len()).map(|i| Release { block: ParentRef::New(i), policy: parity_plan(obs.honest_miners, lag, obs.delay) }).collect();
        BitcoinAction { mine, release, honest_delays }
    }
}

/// Public proposer with the highest level, smallest id among equals.
fn public_top(obs: &PrismObservation<'_>) -> BlockId {
    let store = obs.store;
    let mut level = store.max_level();
    loop {
        if let Some(&b) = store.proposers_at(level).iter().find(|&&b| obs.public.contains(b as usize)) {
            return b;
        }
        if level == 0 {
            return crate::prism_sim::PROPOSER_GENESIS;
        }
        level -= 1;
    }
}

/// Voter orders extending the best public tip of every voter chain, voting at
/// each unvoted level for `pick(level)`. `first` is the order index of the first voter.
fn public_voters(
    obs: &PrismObservation<'_>,
    top_level: u32,
    first: usize,
    mut pick: impl FnMut(u32) -> Option<BlockId>,
) -> Vec<PrismOrder> {
    let store = obs.store;
    let mut out = Vec::new();
    for j in 1..store.chains() {
        let budget = obs.budgets[j as usize];
        if budget == 0 {
            continue;
        }
        let tree = store.tree(j);
        let tip = best_tip(tree, obs.tips.iter().map(|t| store.local(t[j as usize - 1])));
        let voted = store.voted(store.global(j, tip));
        for i in 0..budget {
            let parent =
                if i == 0 { ParentRef::Block(store.global(j, tip)) } else { ParentRef::New(first + out.len() - 1) };
            let votes = if i == 0 {
                (1..=top_level).filter(|&l| !voted.contains(l)).filter_map(|l| pick(l).map(|b| (l, ParentRef::Block(b)))).collect()
            } else {
                Vec::new()
            };
            out.push(PrismOrder::Voter { chain: j, parent, votes });
        }
    }
    out
}

impl PrismStrategy for NullAdversary {
    fn name(&self) -> &'static str {
        "null"
    }

    fn act(&mut self, obs: &PrismObservation<'_>, _rng: &mut ChaCha8Rng) -> PrismAction {
        let store = obs.store;
        let top = public_top(obs);
        let top_level = store.level(top);
        let mut mine: Vec<PrismOrder> =
            (0..obs.budgets[0]).map(|_| PrismOrder::Proposer { cert: ParentRef::Block(top), refs: Vec::new() }).collect();
        let public = obs.public;
        let first = mine.len();
        mine.extend(public_voters(obs, top_level, first, |l| {
            store.proposers_at(l).iter().copied().filter(|&b| public.contains(b as usize)).min()
        }));
        let release = (0..mine.len()).map(|i| Release::now(ParentRef::New(i))).collect();
        PrismAction { mine, release, honest_delays: Vec::new() }
    }
}

/// Keeps a withheld chain of adversarial proposers one or more levels ahead and
/// publishes the level-L block in the round honest miners first reach L, so it
/// arrives together with the honest one and wins the smallest-id tie. Voter
/// blocks vote for adversarial proposers wherever one is public.
#[derive(Debug, Clone, Default)]
pub struct LeaderCensor {
    /// Withheld proposers, ascending level.
    private: Vec<BlockId>,
    released: Vec<BlockId>,
    proposers_ordered: usize,
}

impl PrismStrategy for LeaderCensor {
    fn name(&self) -> &'static str {
        "leader_censor"
    }

    fn act(&mut self, obs: &PrismObservation<'_>, _rng: &mut ChaCha8Rng) -> PrismAction {
        let store = obs.store;
        let public = obs.public;
        let honest_level = obs
            .new_honest
            .iter()
            .filter(|&&b| matches!(store.block(b).body, Body::Proposer { .. }))
            .map(|&b| store.level(b))
            .chain(std::iter::once(store.level(public_top(obs))))
            .max()
            .unwrap_or(0);
        self.private.retain(|&b| store.level(b) >= honest_level);
        let base = self.private.last().copied().unwrap_or_else(|| public_top(obs));
        let budget = obs.budgets[0] as usize;
        let mut mine: Vec<PrismOrder> = (0..budget)
            .map(|i| PrismOrder::Proposer {
                cert: if i == 0 { ParentRef::Block(base) } else { ParentRef::New(i - 1) },
                refs: Vec::new(),
            })
            .collect();
        self.released = self.private.iter().copied().filter(|&b| store.level(b) == honest_level).collect();
        let mut release: Vec<Release> = self.released.iter().map(|&b| Release::now(ParentRef::Block(b))).collect();
        let top_level = store.level(public_top(obs));
        let released = &self.released;
        let adv_at = |l: u32| -> Option<BlockId> {
            released.iter().copied().find(|&b| store.level(b) == l).or_else(|| {
                store
                    .proposers_at(l)
                    .iter()
                    .copied()
                    .filter(|&b| public.contains(b as usize))
                    .min_by_key(|&b| (store.block(b).kind != crate::chain::MinerKind::Adversarial, b))
            })
        };
        let first_voter = mine.len();
        let voters = public_voters(obs, top_level, first_voter, adv_at);
        mine.extend(voters);
        release.extend((first_voter..mine.len()).map(|i| Release::now(ParentRef::New(i))));
        self.proposers_ordered = budget;
        PrismAction { mine, release, honest_delays: Vec::new() }
    }

    fn mined(&mut self, ids: &[BlockId]) {
        let released = std::mem::take(&mut self.released);
        self.private.retain(|b| !released.contains(b));
        self.private.extend_from_slice(&ids[..self.proposers_ordered.min(ids.len())]);
        self.proposers_ordered = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_json_round_trip_and_rejects() {
        for spec in [
            AdversarySpec::Null,
            AdversarySpec::PrivateFork { k: 6, give_up: 2 },
            AdversarySpec::SplitView,
            AdversarySpec::LeaderCensor,
        ] {
            let text = serde_json::to_string(&spec).unwrap();
            assert_eq!(serde_json::from_str::<AdversarySpec>(&text).unwrap(), spec, "{text}");
        }
        let fork: AdversarySpec = serde_json::from_str(r#"{"kind":"private_fork","k":4}"#).unwrap();
        assert_eq!(fork, AdversarySpec::PrivateFork { k: 4, give_up: 3 });
        for bad in [r#"{"kind":"null","k":1}"#, r#"{"kind":"private_fork"}"#, r#"{"kind":"selfish"}"#, r#"{"kind":"null","x":1}"#] {
            assert!(serde_json::from_str::<AdversarySpec>(bad).is_err(), "{bad}");
        }
    }
}
