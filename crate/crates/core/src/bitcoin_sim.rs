//! Round-by-round Bitcoin backbone with longest-chain honest miners.
//!
//! Round r: deliveries due at r are applied and honest miners switch to any
//! strictly longer known chain; the trace's h honest blocks go to h distinct
//! miners, each extending its own tip; the adversary then acts. A miner adopts
//! its own block from round r + 1 on, when everyone else may first see it.

use fixedbitset::FixedBitSet;
use rand::seq::index;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::{BitcoinAction, BitcoinObservation, BitcoinStrategy, ParentRef};
use crate::chain::{BlockId, BlockTree, MinerKind, TipHistory, GENESIS};
use crate::network::{schedule, DelayPolicy, NetworkError, Pending, Views};
use crate::params::{derive, derive_unchecked, DerivedParams, ParamError, ProtocolParams};
use crate::trace::{sample_trace, stream_rng, ChainCounts, Stream, Trace, TraceError};

pub const SIM_RECORD_SCHEMA: &str = "chainlab.sim_record/1";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error(transparent)]
    Params(#[from] ParamError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("round {round}: adversary mined {used} blocks with budget {budget}")]
    Budget { round: u32, used: usize, budget: u32 },
    #[error("round {round}: invalid parent for adversarial block {index}: {why}")]
    Parent { round: u32, index: usize, why: String },
    #[error("round {round}: invalid release: {why}")]
    Release { round: u32, why: String },
    #[error("round {round}: {source}")]
    Network { round: u32, source: NetworkError },
    #[error("trace has {got} rounds, horizon is {want}")]
    TraceLength { got: u32, want: u32 },
}

/// Everything a run produced. Exported as JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimRecord {
    pub schema: String,
    pub params: ProtocolParams,
    pub adversary: String,
    pub trial: u64,
    pub trace: Trace,
    pub blocks: BlockTree,
    /// Honest miner of each block, `None` for genesis and adversarial blocks.
    pub miners: Vec<Option<u32>>,
    /// Per honest miner, rounds at which the adopted tip changed.
    pub tips: Vec<TipHistory>,
    /// Rounds with exactly one honest block.
    pub unique_rounds: Vec<u32>,
    /// Rounds with exactly one honest block and none in the T−1 rounds either side.
    pub isolated_rounds: Vec<u32>,
}

impl SimRecord {
    /// Last round with a recorded state: `horizon + 1`.
    pub fn end_round(&self) -> u32 {
        self.params.horizon + 1
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

/// Samples the trace for `trial` and runs the protocol on it.
pub fn run(
    params: &ProtocolParams,
    adversary: &mut dyn BitcoinStrategy,
    trial: u64,
    allow_unsafe: bool,
) -> Result<SimRecord, SimError> {
    if allow_unsafe {
        derive_unchecked(params)?;
    } else {
        derive(params)?;
    }
    let mut trng = stream_rng(params.seed, trial, Stream::Trace);
    let trace = sample_trace(params, 1, &mut trng, params.horizon)?;
    let mut hrng = stream_rng(params.seed, trial, Stream::Honest);
    let mut arng = stream_rng(params.seed, trial, Stream::Adversary);
    run_with_trace(params, trace, adversary, trial, &mut hrng, &mut arng)
}

fn check_parent(tree: &BlockTree, round: u32, index: usize, parent: ParentRef, ids: &[BlockId]) -> Result<BlockId, SimError> {
    let err = |why: String| SimError::Parent { round, index, why };
    match parent {
        ParentRef::New(i) if i < index => Ok(ids[i]),
        ParentRef::New(i) => Err(err(format!("refers to block {i} ordered later"))),
        ParentRef::Block(b) if (b as usize) < tree.len() => {
            let blk = tree.get(b);
            if blk.mined_round >= round {
                Err(err(format!("parent {b} mined in the current round")))
            } else {
                Ok(b)
            }
        }
        ParentRef::Block(b) => Err(err(format!("unknown block {b}"))),
    }
}

/// Honest miners switch to the longest of the newly known blocks if it beats their tip.
pub(crate) fn adopt(tree: &BlockTree, tips: &mut [TipHistory], fresh: &[Vec<BlockId>], round: u32) {
    for (miner, new) in fresh.iter().enumerate() {
        let Some(&best) = new.iter().max_by(|&&a, &&b| tree.height(a).cmp(&tree.height(b)).then(b.cmp(&a))) else {
            continue;
        };
        let cur = tips[miner].current();
        if tree.height(best) > tree.height(cur) {
            tips[miner].record(round, best);
        }
    }
}

/// Runs the protocol on a given trace. The trace must cover `horizon` rounds.
pub fn run_with_trace(
    params: &ProtocolParams,
    trace: Trace,
    adversary: &mut dyn BitcoinStrategy,
    trial: u64,
    honest_rng: &mut ChaCha8Rng,
    adversary_rng: &mut ChaCha8Rng,
) -> Result<SimRecord, SimError> {
    if trace.len() != params.horizon {
        return Err(SimError::TraceLength { got: trace.len(), want: params.horizon });
    }
    let miners = params.n - params.t;
    let delay = params.delay;
    let mut tree = BlockTree::new();
    let mut owner: Vec<Option<u32>> = vec![None];
    let mut tips: Vec<TipHistory> = (0..miners).map(|_| TipHistory::new(GENESIS)).collect();
    let mut views = Views::new(miners, &[GENESIS]);
    let mut pending = Pending::new(delay);
    let mut public = FixedBitSet::with_capacity(1024);
    public.grow(1);
    public.insert(GENESIS as usize);
    let mut round_tips: Vec<BlockId> = vec![GENESIS; miners as usize];
    let mut new_honest: Vec<(BlockId, u32)> = Vec::new();

    for round in 1..=params.horizon {
        let fresh = views.deliver(round, &mut pending, &tree);
        adopt(&tree, &mut tips, &fresh, round);
        for (slot, h) in round_tips.iter_mut().zip(&tips) {
            *slot = h.current();
        }

        new_honest.clear();
        let h = trace.h_at(0, round);
        if h > 0 {
            let mut chosen = index::sample(honest_rng, miners as usize, h as usize).into_vec();
            chosen.sort_unstable();
            for m in chosen {
                let id = tree.push(round_tips[m], MinerKind::Honest, round, Vec::new());
                owner.push(Some(m as u32));
                new_honest.push((id, m as u32));
            }
        }

        let budget = trace.z_at(0, round);
        let action = {
            let obs = BitcoinObservation {
                round,
                delay,
                budget,
                honest_miners: miners,
                tree: &tree,
                tips: &round_tips,
                new_honest: &new_honest,
                public: &public,
            };
            adversary.act(&obs, adversary_rng)
        };
        let ids = apply_action(&mut tree, &mut owner, &mut pending, &mut public, &new_honest, action, round, budget, miners, delay)?;
        for &(b, _) in &new_honest {
            public.insert(b as usize);
        }
        adversary.mined(&ids);

        for &(b, m) in &new_honest {
            views.learn(m, b, &tree, &mut Vec::new());
            tips[m as usize].record(round + 1, b);
        }
    }
    let end = params.horizon + 1;
    let fresh = views.deliver(end, &mut pending, &tree);
    adopt(&tree, &mut tips, &fresh, end);

    let (unique_rounds, isolated_rounds) = marked_rounds(&trace, 0, delay);
    Ok(SimRecord {
        schema: SIM_RECORD_SCHEMA.to_string(),
        params: *params,
        adversary: adversary.name().to_string(),
        trial,
        trace,
        blocks: tree,
        miners: owner,
        tips,
        unique_rounds,
        isolated_rounds,
    })
}

#[allow(clippy::too_many_arguments)]
fn apply_action(
    tree: &mut BlockTree,
    owner: &mut Vec<Option<u32>>,
    pending: &mut Pending,
    public: &mut FixedBitSet,
    new_honest: &[(BlockId, u32)],
    action: BitcoinAction,
    round: u32,
    budget: u32,
    miners: u32,
    delay: u32,
) -> Result<Vec<BlockId>, SimError> {
    if action.mine.len() > budget as usize {
        return Err(SimError::Budget { round, used: action.mine.len(), budget });
    }
    let mut ids = Vec::with_capacity(action.mine.len());
    for (i, &parent) in action.mine.iter().enumerate() {
        let p = check_parent(tree, round, i, parent, &ids)?;
        ids.push(tree.push(p, MinerKind::Adversarial, round, Vec::new()));
        owner.push(None);
    }
    pending.set_round(round);
    let net = |source| SimError::Network { round, source };
    let mut overridden = Vec::new();
    for (b, policy) in &action.honest_delays {
        let Some(&(_, m)) = new_honest.iter().find(|(h, _)| h == b) else {
            return Err(SimError::Release { round, why: format!("delay plan for {b}, not an honest block of this round") });
        };
        if overridden.contains(b) {
            return Err(SimError::Release { round, why: format!("two delay plans for {b}") });
        }
        overridden.push(*b);
        for ev in schedule(*b, Some(m), miners, round, delay, policy).map_err(net)? {
            pending.push(&ev).map_err(net)?;
        }
    }
    for &(b, m) in new_honest {
        if !overridden.contains(&b) {
            for ev in schedule(b, Some(m), miners, round, delay, &DelayPolicy::MinDelay).map_err(net)? {
                pending.push(&ev).map_err(net)?;
            }
        }
    }
    public.grow(tree.len());
    for rel in &action.release {
        let b = match rel.block {
            ParentRef::New(i) if i < ids.len() => ids[i],
            ParentRef::Block(b) if (b as usize) < tree.len() && tree.get(b).kind == MinerKind::Adversarial => b,
            other => return Err(SimError::Release { round, why: format!("{other:?} is not an adversarial block") }),
        };
        for ev in schedule(b, None, miners, round, delay, &rel.policy).map_err(net)? {
            pending.push(&ev).map_err(net)?;
        }
        let mut cur = Some(b);
        while let Some(x) = cur {
            if public.put(x as usize) {
                break;
            }
            cur = tree.get(x).parent;
        }
    }
    Ok(ids)
}

/// Genesis-first adopted chain of `miner` at `round`.
pub fn adopted_chain(record: &SimRecord, miner: u32, round: u32) -> Vec<BlockId> {
    record.blocks.chain(record.tips[miner as usize].at(round))
}

/// Last round each block lay on some honest adopted chain; 0 if never.
pub fn last_in_chain(tree: &BlockTree, tips: &[TipHistory], end: u32) -> Vec<u32> {
    let mut last = vec![0u32; tree.len()];
    for h in tips {
        let ch = h.changes();
        for (i, &(r, tip)) in ch.iter().enumerate() {
            if r > end {
                break;
            }
            let until = ch.get(i + 1).map_or(end, |&(next, _)| (next - 1).min(end));
            last[tip as usize] = last[tip as usize].max(until);
        }
    }
    for id in (1..tree.len()).rev() {
        let p = tree.get(id as BlockId).parent.expect("non-genesis") as usize;
        last[p] = last[p].max(last[id]);
    }
    last
}

/// For a uniquely successful (T = 1) or doubly isolated (T > 1) round, checks that
/// no adopted chain ever held a different honest block at that round's height.
/// In the bounded-delay model only chains held after round + T count.
pub fn assert_unique_block(record: &SimRecord, round: u32) -> bool {
    assert_unique_block_with(record, round, &last_in_chain(&record.blocks, &record.tips, record.end_round()))
}

/// [`assert_unique_block`] with a precomputed [`last_in_chain`] table.
pub fn assert_unique_block_with(record: &SimRecord, round: u32, last: &[u32]) -> bool {
    unique_block_holds(&record.blocks, last, round, record.params.delay)
}

/// [`assert_unique_block`] on any tree, given its [`last_in_chain`] table.
pub fn unique_block_holds(tree: &BlockTree, last: &[u32], round: u32, delay: u32) -> bool {
    let mut mined = tree.blocks().iter().filter(|b| b.mined_round == round && b.kind == MinerKind::Honest);
    let Some(b) = mined.next() else {
        return true;
    };
    let (id, height) = (b.id, b.height);
    let threshold = if delay == 1 { 1 } else { round + delay + 1 };
    !tree.blocks().iter().any(|o| {
        o.kind == MinerKind::Honest && o.height == height && o.id != id && o.id != GENESIS && last[o.id as usize] >= threshold
    })
}

/// Uniquely successful rounds and T-doubly-isolated rounds of chain `j`.
pub fn marked_rounds(trace: &Trace, j: usize, delay: u32) -> (Vec<u32>, Vec<u32>) {
    let cc = ChainCounts::new(trace, j, delay);
    let unique = (1..=trace.len()).filter(|&r| trace.h_at(j, r) == 1).collect();
    let isolated = (delay.max(1)..=trace.len().min(cc.yp_limit().saturating_sub(1)))
        .filter(|&r| cc.yp(r, r + 1) == 1)
        .collect();
    (unique, isolated)
}

/// Derived parameters for a record, ignoring the honest-majority requirement.
pub fn record_derived(record: &SimRecord) -> DerivedParams {
    derive_unchecked(&record.params).expect("record params were validated at run time")
}
