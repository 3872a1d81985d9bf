//! Prism backbone: one proposer chain and m voter chains mined as independent
//! processes, leader election per proposer level and ledger construction.
//!
//! Reference links are the proposer's level-certifying link, its extra
//! references and the voter's votes. A voter's parent link is not a reference.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, HashSet};

use fixedbitset::FixedBitSet;
use rand::seq::index;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::adversary::{ParentRef, PrismAction, PrismObservation, PrismOrder, PrismStrategy};
use crate::bitcoin_sim::SimError;
use crate::chain::{BlockId, BlockTree, MinerKind, TipHistory, Tx};
use crate::network::{schedule, DelayPolicy, Dependencies, Pending, Views};
use crate::params::{derive, derive_unchecked, ProtocolParams};
use crate::trace::{sample_trace, stream_rng, Stream, Trace};

pub const PRISM_RECORD_SCHEMA: &str = "chainlab.prism_record/1";
pub const PROPOSER_GENESIS: BlockId = 0;
pub const UNKNOWN: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Body {
    Genesis { chain: u32 },
    Proposer { level: u32, cert: BlockId, refs: Vec<BlockId> },
    Voter { chain: u32, parent: BlockId, votes: Vec<(u32, BlockId)> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrismBlock {
    pub id: BlockId,
    pub kind: MinerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub miner: Option<u32>,
    pub mined_round: u32,
    pub body: Body,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub payload: Vec<Tx>,
}

/// Levels voted by a voter block together with its ancestors: `1..=upto` plus
/// sorted extras above `upto + 1`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VotedSet {
    upto: u32,
    extra: Vec<u32>,
}

impl VotedSet {
    pub fn contains(&self, level: u32) -> bool {
        level <= self.upto || self.extra.binary_search(&level).is_ok()
    }

    pub fn insert(&mut self, level: u32) {
        if self.contains(level) {
            return;
        }
        if level == self.upto + 1 {
            self.upto += 1;
            let mut i = 0;
            while i < self.extra.len() && self.extra[i] == self.upto + 1 {
                self.upto += 1;
                i += 1;
            }
            self.extra.drain(..i);
        } else {
            let pos = self.extra.binary_search(&level).unwrap_err();
            self.extra.insert(pos, level);
        }
    }

    /// Every level up to this one is voted.
    pub fn upto(&self) -> u32 {
        self.upto
    }
}

/// Global block store with one local tree per chain. Chain 0 is the proposer
/// chain, whose tree links each block to its certifying block (height = level).
#[derive(Debug, Clone)]
pub struct PrismStore {
    m: u32,
    blocks: Vec<PrismBlock>,
    chain_of: Vec<u32>,
    local: Vec<BlockId>,
    trees: Vec<BlockTree>,
    globals: Vec<Vec<BlockId>>,
    by_level: Vec<Vec<BlockId>>,
    voted: Vec<VotedSet>,
}

impl PrismStore {
    /// Proposer genesis has id 0; voter chain j's genesis has id j.
    pub fn new(m: u32) -> Self {
        let mut s = Self {
            m,
            blocks: Vec::new(),
            chain_of: Vec::new(),
            local: Vec::new(),
            trees: (0..=m).map(|_| BlockTree::new()).collect(),
            globals: (0..=m).map(|j| vec![j]).collect(),
            by_level: vec![vec![PROPOSER_GENESIS]],
            voted: Vec::new(),
        };
        for j in 0..=m {
            s.blocks.push(PrismBlock {
                id: j,
                kind: MinerKind::Honest,
                miner: None,
                mined_round: 0,
                body: Body::Genesis { chain: j },
                payload: Vec::new(),
            });
            s.chain_of.push(j);
            s.local.push(0);
            s.voted.push(VotedSet::default());
        }
        s
    }

    pub fn m(&self) -> u32 {
        self.m
    }

    /// m + 1.
    pub fn chains(&self) -> u32 {
        self.m + 1
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn block(&self, id: BlockId) -> &PrismBlock {
        &self.blocks[id as usize]
    }

    pub fn blocks(&self) -> &[PrismBlock] {
        &self.blocks
    }

    pub fn is_genesis(&self, id: BlockId) -> bool {
        id <= self.m
    }

    pub fn chain_of(&self, id: BlockId) -> u32 {
        self.chain_of[id as usize]
    }

    pub fn is_proposer(&self, id: BlockId) -> bool {
        self.chain_of[id as usize] == 0
    }

    /// Local id within the block's own chain tree.
    pub fn local(&self, id: BlockId) -> BlockId {
        self.local[id as usize]
    }

    pub fn global(&self, chain: u32, local: BlockId) -> BlockId {
        self.globals[chain as usize][local as usize]
    }

    pub fn tree(&self, chain: u32) -> &BlockTree {
        &self.trees[chain as usize]
    }

    /// Level of a proposer block. Panics for voter blocks.
    pub fn level(&self, id: BlockId) -> u32 {
        assert!(self.is_proposer(id), "block {id} is not a proposer block");
        self.trees[0].height(self.local[id as usize])
    }

    pub fn max_level(&self) -> u32 {
        self.by_level.len() as u32 - 1
    }

    pub fn proposers_at(&self, level: u32) -> &[BlockId] {
        self.by_level.get(level as usize).map_or(&[], Vec::as_slice)
    }

    /// R_l: round of the first proposer block mined at `level`.
    pub fn first_round_at_level(&self, level: u32) -> Option<u32> {
        self.proposers_at(level).iter().map(|&b| self.blocks[b as usize].mined_round).min()
    }

    /// Levels voted along the chain ending at voter block `id`.
    pub fn voted(&self, id: BlockId) -> &VotedSet {
        &self.voted[id as usize]
    }

    /// Votes cast by a voter block; empty for other blocks.
    pub fn votes(&self, id: BlockId) -> &[(u32, BlockId)] {
        match &self.blocks[id as usize].body {
            Body::Voter { votes, .. } => votes,
            _ => &[],
        }
    }

    /// Reference-link targets.
    pub fn targets(&self, id: BlockId, out: &mut Vec<BlockId>) {
        match &self.blocks[id as usize].body {
            Body::Genesis { .. } => {}
            Body::Proposer { cert, refs, .. } => {
                out.push(*cert);
                out.extend_from_slice(refs);
            }
            Body::Voter { votes, .. } => out.extend(votes.iter().map(|&(_, b)| b)),
        }
    }

    fn push_raw(&mut self, block: PrismBlock, chain: u32, local: BlockId, voted: VotedSet) -> BlockId {
        let id = block.id;
        self.blocks.push(block);
        self.chain_of.push(chain);
        self.local.push(local);
        self.globals[chain as usize].push(id);
        self.voted.push(voted);
        id
    }

    /// Adds a proposer block one level above `cert`.
    pub fn push_proposer(
        &mut self,
        kind: MinerKind,
        miner: Option<u32>,
        round: u32,
        cert: BlockId,
        refs: Vec<BlockId>,
        payload: Vec<Tx>,
    ) -> BlockId {
        let id = self.blocks.len() as BlockId;
        let level = self.level(cert) + 1;
        let pl = self.local(cert);
        let local = self.trees[0].push(pl, kind, round, Vec::new());
        if self.by_level.len() <= level as usize {
            self.by_level.resize(level as usize + 1, Vec::new());
        }
        self.by_level[level as usize].push(id);
        let block = PrismBlock { id, kind, miner, mined_round: round, body: Body::Proposer { level, cert, refs }, payload };
        self.push_raw(block, 0, local, VotedSet::default())
    }

    /// Adds a voter block on chain `chain` (1..=m).
    #[allow(clippy::too_many_arguments)]
    pub fn push_voter(
        &mut self,
        kind: MinerKind,
        miner: Option<u32>,
        round: u32,
        chain: u32,
        parent: BlockId,
        votes: Vec<(u32, BlockId)>,
        payload: Vec<Tx>,
    ) -> BlockId {
        assert_eq!(self.chain_of(parent), chain, "parent on another chain");
        let id = self.blocks.len() as BlockId;
        let pl = self.local(parent);
        let local = self.trees[chain as usize].push(pl, kind, round, Vec::new());
        let mut voted = self.voted[parent as usize].clone();
        for &(l, _) in &votes {
            voted.insert(l);
        }
        let block = PrismBlock { id, kind, miner, mined_round: round, body: Body::Voter { chain, parent, votes }, payload };
        self.push_raw(block, chain, local, voted)
    }
}

impl Dependencies for PrismStore {
    fn deps(&self, block: BlockId, out: &mut Vec<BlockId>) {
        if let Body::Voter { parent, .. } = &self.blocks[block as usize].body {
            out.push(*parent);
        }
        self.targets(block, out);
    }
}

#[derive(Serialize, Deserialize)]
struct StoreWire {
    m: u32,
    blocks: Vec<PrismBlock>,
}

impl Serialize for PrismStore {
    fn serialize<S: Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Wire<'a> {
            m: u32,
            blocks: &'a [PrismBlock],
        }
        Wire { m: self.m, blocks: &self.blocks }.serialize(ser)
    }
}

impl<'de> Deserialize<'de> for PrismStore {
    fn deserialize<D: Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let wire = StoreWire::deserialize(de)?;
        let mut s = PrismStore::new(wire.m);
        for b in wire.blocks.into_iter().skip(wire.m as usize + 1) {
            if b.id as usize != s.len() {
                return Err(D::Error::custom(format!("block {} out of order", b.id)));
            }
            let ok = |x: BlockId| (x as usize) < s.len();
            match b.body {
                Body::Proposer { cert, refs, .. } if ok(cert) && s.is_proposer(cert) && refs.iter().all(|&r| ok(r)) => {
                    s.push_proposer(b.kind, b.miner, b.mined_round, cert, refs, b.payload);
                }
                Body::Voter { chain, parent, votes } if ok(parent) && s.chain_of(parent) == chain => {
                    s.push_voter(b.kind, b.miner, b.mined_round, chain, parent, votes, b.payload);
                }
                _ => return Err(D::Error::custom(format!("block {} has invalid links", b.id))),
            }
        }
        Ok(s)
    }
}

/// Rounds at which one view's leader at one level changed.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LeaderHistory {
    changes: Vec<(u32, BlockId)>,
}

impl LeaderHistory {
    pub fn record(&mut self, round: u32, leader: BlockId) {
        match self.changes.last_mut() {
            Some(last) if last.1 == leader => {}
            Some(last) if last.0 == round => {
                last.1 = leader;
                let n = self.changes.len();
                if n >= 2 && self.changes[n - 2].1 == leader {
                    self.changes.pop();
                }
            }
            _ => self.changes.push((round, leader)),
        }
    }

    /// Leader at `round`, `None` before the level was known.
    pub fn at(&self, round: u32) -> Option<BlockId> {
        let i = self.changes.partition_point(|&(r, _)| r <= round);
        (i > 0).then(|| self.changes[i - 1].1)
    }

    pub fn changes(&self) -> &[(u32, BlockId)] {
        &self.changes
    }
}

/// Everything a Prism run produced. Exported as JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrismRecord {
    pub schema: String,
    pub params: ProtocolParams,
    pub adversary: String,
    pub trial: u64,
    pub trace: Trace,
    pub store: PrismStore,
    /// `tips[miner][j - 1]`, local ids in voter chain j's tree.
    pub tips: Vec<Vec<TipHistory>>,
    /// `leaders[miner][level - 1]`.
    pub leaders: Vec<Vec<LeaderHistory>>,
    /// `known_round[miner][block]`: first round the miner could react to the block.
    pub known_round: Vec<Vec<u32>>,
}

impl PrismRecord {
    pub fn end_round(&self) -> u32 {
        self.params.horizon + 1
    }

    pub fn miners(&self) -> u32 {
        self.tips.len() as u32
    }

    pub fn knows(&self, miner: u32, block: BlockId, round: u32) -> bool {
        self.known_round[miner as usize].get(block as usize).is_some_and(|&k| k <= round)
    }

    /// The view's leader sequence at `round` for every level it knows.
    pub fn leaders_at(&self, miner: u32, round: u32) -> Vec<BlockId> {
        self.leaders[miner as usize].iter().map_while(|h| h.at(round)).collect()
    }

    /// Voter-chain tips (global ids) of a view.
    pub fn voter_tips(&self, miner: u32, round: u32) -> Vec<BlockId> {
        self.tips[miner as usize]
            .iter()
            .enumerate()
            .map(|(j, h)| self.store.global(j as u32 + 1, h.at(round)))
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

/// An honest miner's local state.
#[derive(Debug, Clone)]
struct MinerState {
    /// First proposer received per level; index 0 is genesis.
    first_seen: Vec<BlockId>,
    referenced: FixedBitSet,
    candidates: Vec<BlockId>,
    /// `counted[j - 1][level]`: (height, proposer) of the earliest vote on the main chain.
    counted: Vec<Vec<Option<(u32, BlockId)>>>,
    tally: Vec<Vec<(BlockId, u32)>>,
    min_known: Vec<BlockId>,
    dirty: Vec<u32>,
}

impl MinerState {
    fn new(m: u32) -> Self {
        Self {
            first_seen: vec![PROPOSER_GENESIS],
            referenced: FixedBitSet::with_capacity(1024),
            candidates: Vec::new(),
            counted: vec![Vec::new(); m as usize],
            tally: vec![Vec::new()],
            min_known: vec![PROPOSER_GENESIS],
            dirty: Vec::new(),
        }
    }

    fn ensure_level(&mut self, level: u32) {
        let n = level as usize + 1;
        if self.tally.len() < n {
            self.tally.resize(n, Vec::new());
            self.min_known.resize(n, UNKNOWN);
        }
    }

    fn mark(&mut self, level: u32) {
        if !self.dirty.contains(&level) {
            self.dirty.push(level);
        }
    }

    fn add_vote(&mut self, level: u32, p: BlockId) {
        self.ensure_level(level);
        let t = &mut self.tally[level as usize];
        match t.iter_mut().find(|(b, _)| *b == p) {
            Some(e) => e.1 += 1,
            None => t.push((p, 1)),
        }
        self.mark(level);
    }

    fn remove_vote(&mut self, level: u32, p: BlockId) {
        let t = &mut self.tally[level as usize];
        let i = t.iter().position(|(b, _)| *b == p).expect("vote was counted");
        t[i].1 -= 1;
        if t[i].1 == 0 {
            t.swap_remove(i);
        }
        self.mark(level);
    }

    fn leader(&self, level: u32) -> Option<BlockId> {
        let t = self.tally.get(level as usize)?;
        match t.iter().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0))) {
            Some(&(b, _)) => Some(b),
            None => Some(self.min_known[level as usize]).filter(|&b| b != UNKNOWN),
        }
    }

    fn max_level(&self) -> u32 {
        self.first_seen.len() as u32 - 1
    }
}

struct Engine {
    m: u32,
    miners: u32,
    store: PrismStore,
    views: Views,
    states: Vec<MinerState>,
    tips: Vec<Vec<TipHistory>>,
    leaders: Vec<Vec<LeaderHistory>>,
    known_round: Vec<Vec<u32>>,
    scratch: Vec<BlockId>,
}

impl Engine {
    fn new(m: u32, miners: u32) -> Self {
        let store = PrismStore::new(m);
        let genesis: Vec<BlockId> = (0..=m).collect();
        Self {
            m,
            miners,
            views: Views::new(miners, &genesis),
            states: (0..miners).map(|_| MinerState::new(m)).collect(),
            tips: (0..miners).map(|_| (0..m).map(|_| TipHistory::new(0)).collect()).collect(),
            leaders: vec![Vec::new(); miners as usize],
            known_round: vec![vec![0; m as usize + 1]; miners as usize],
            store,
            scratch: Vec::new(),
        }
    }

    fn learned(&mut self, miner: u32, fresh: &[BlockId], round: u32) {
        if fresh.is_empty() {
            return;
        }
        let mi = miner as usize;
        let store = &self.store;
        let st = &mut self.states[mi];
        let kr = &mut self.known_round[mi];
        if kr.len() < store.len() {
            kr.resize(store.len(), UNKNOWN);
        }
        st.referenced.grow(store.len());
        let mut proposers: Vec<(u32, BlockId)> = Vec::new();
        for &b in fresh {
            kr[b as usize] = round;
            self.scratch.clear();
            store.targets(b, &mut self.scratch);
            for &t in &self.scratch {
                st.referenced.insert(t as usize);
            }
            if !store.is_genesis(b) {
                st.candidates.push(b);
            }
            if store.is_proposer(b) {
                proposers.push((store.level(b), b));
            }
        }
        proposers.sort_unstable();
        for &(level, b) in &proposers {
            st.ensure_level(level);
            if b < st.min_known[level as usize] {
                st.min_known[level as usize] = b;
                if st.tally[level as usize].is_empty() {
                    st.mark(level);
                }
            }
            if st.first_seen.len() as u32 == level {
                st.first_seen.push(b);
            }
            debug_assert!(st.first_seen.len() as u32 > level, "proposer levels learned out of order");
        }
        for j in 1..=self.m {
            let tree = store.tree(j);
            let best = fresh
                .iter()
                .filter(|&&b| store.chain_of(b) == j)
                .map(|&b| store.local(b))
                .max_by(|&a, &b| tree.height(a).cmp(&tree.height(b)).then(b.cmp(&a)));
            if let Some(best) = best {
                let cur = self.tips[mi][j as usize - 1].current();
                if tree.height(best) > tree.height(cur) {
                    Self::switch_tip(store, st, j, cur, best);
                    self.tips[mi][j as usize - 1].record(round, best);
                }
            }
        }
        let dirty = std::mem::take(&mut st.dirty);
        let hist = &mut self.leaders[mi];
        for level in dirty {
            if level == 0 {
                continue;
            }
            if let Some(leader) = st.leader(level) {
                if hist.len() < level as usize {
                    hist.resize(level as usize, LeaderHistory::default());
                }
                hist[level as usize - 1].record(round, leader);
            }
        }
    }

    /// Moves the counted votes of chain `j` from the chain at `old` to the chain at `new`.
    fn switch_tip(store: &PrismStore, st: &mut MinerState, j: u32, old: BlockId, new: BlockId) {
        let tree = store.tree(j);
        let lca = tree.lca(old, new);
        let lh = tree.height(lca);
        let ci = j as usize - 1;
        let mut cur = old;
        while tree.height(cur) > lh {
            let h = tree.height(cur);
            for &(level, p) in store.votes(store.global(j, cur)) {
                if st.counted[ci].get(level as usize).copied().flatten().is_some_and(|(vh, _)| vh == h) {
                    st.counted[ci][level as usize] = None;
                    st.remove_vote(level, p);
                }
            }
            cur = tree.get(cur).parent.expect("above lca");
        }
        let mut path = Vec::new();
        let mut cur = new;
        while tree.height(cur) > lh {
            path.push(cur);
            cur = tree.get(cur).parent.expect("above lca");
        }
        for &b in path.iter().rev() {
            let h = tree.height(b);
            for &(level, p) in store.votes(store.global(j, b)) {
                let c = &mut st.counted[ci];
                if c.len() <= level as usize {
                    c.resize(level as usize + 1, None);
                }
                if c[level as usize].is_none() {
                    c[level as usize] = Some((h, p));
                    st.add_vote(level, p);
                }
            }
        }
    }

    fn mine_proposer(&mut self, miner: u32, round: u32) -> BlockId {
        let st = &mut self.states[miner as usize];
        let cert = *st.first_seen.last().expect("genesis");
        let referenced = &st.referenced;
        st.candidates.retain(|&c| !referenced.contains(c as usize));
        let mut refs: Vec<BlockId> = st.candidates.iter().copied().filter(|&c| c != cert).collect();
        refs.sort_unstable();
        let id = self.store.len() as u64;
        self.store.push_proposer(MinerKind::Honest, Some(miner), round, cert, refs, vec![Tx { id, conflict: None }])
    }

    fn mine_voter(&mut self, miner: u32, chain: u32, round: u32) -> BlockId {
        let st = &self.states[miner as usize];
        let parent = self.store.global(chain, self.tips[miner as usize][chain as usize - 1].current());
        let voted = self.store.voted(parent);
        let votes: Vec<(u32, BlockId)> =
            (1..=st.max_level()).filter(|&l| !voted.contains(l)).map(|l| (l, st.first_seen[l as usize])).collect();
        let id = self.store.len() as u64;
        self.store.push_voter(MinerKind::Honest, Some(miner), round, chain, parent, votes, vec![Tx { id, conflict: None }])
    }
}

/// Samples the m + 1 chain traces for `trial` and runs the protocol.
pub fn run_prism(
    params: &ProtocolParams,
    adversary: &mut dyn PrismStrategy,
    trial: u64,
    allow_unsafe: bool,
) -> Result<PrismRecord, SimError> {
    if allow_unsafe {
        derive_unchecked(params)?;
    } else {
        derive(params)?;
    }
    let mut trng = stream_rng(params.seed, trial, Stream::Trace);
    let trace = sample_trace(params, params.m as usize + 1, &mut trng, params.horizon)?;
    let mut hrng = stream_rng(params.seed, trial, Stream::Honest);
    let mut arng = stream_rng(params.seed, trial, Stream::Adversary);
    run_prism_with_trace(params, trace, adversary, trial, &mut hrng, &mut arng)
}

pub fn run_prism_with_trace(
    params: &ProtocolParams,
    trace: Trace,
    adversary: &mut dyn PrismStrategy,
    trial: u64,
    honest_rng: &mut ChaCha8Rng,
    adversary_rng: &mut ChaCha8Rng,
) -> Result<PrismRecord, SimError> {
    if trace.len() != params.horizon {
        return Err(SimError::TraceLength { got: trace.len(), want: params.horizon });
    }
    let m = params.m;
    let miners = params.n - params.t;
    let delay = params.delay;
    let mut e = Engine::new(m, miners);
    let mut pending = Pending::new(delay);
    let mut public = FixedBitSet::with_capacity(1024);
    public.grow(m as usize + 1);
    public.insert_range(..m as usize + 1);
    let mut own: Vec<Vec<BlockId>> = vec![Vec::new(); miners as usize];
    let mut round_tips: Vec<Vec<BlockId>> = vec![Vec::new(); miners as usize];
    let mut new_honest: Vec<(BlockId, u32)> = Vec::new();
    let mut budgets = vec![0u32; m as usize + 1];

    for round in 1..=params.horizon + 1 {
        start_round(&mut e, &mut own, &mut pending, round);
        if round > params.horizon {
            break;
        }
        for (i, t) in round_tips.iter_mut().enumerate() {
            t.clear();
            t.extend((1..=m).map(|j| e.store.global(j, e.tips[i][j as usize - 1].current())));
        }
        new_honest.clear();
        for j in 0..=m {
            let h = trace.h_at(j as usize, round);
            if h == 0 {
                continue;
            }
            let mut chosen = index::sample(honest_rng, miners as usize, h as usize).into_vec();
            chosen.sort_unstable();
            for miner in chosen {
                let miner = miner as u32;
                let id = if j == 0 { e.mine_proposer(miner, round) } else { e.mine_voter(miner, j, round) };
                new_honest.push((id, miner));
                own[miner as usize].push(id);
            }
        }
        for (j, b) in budgets.iter_mut().enumerate() {
            *b = trace.z_at(j, round);
        }
        let honest_ids: Vec<BlockId> = new_honest.iter().map(|&(b, _)| b).collect();
        let action = {
            let obs = PrismObservation {
                round,
                delay,
                budgets: &budgets,
                honest_miners: miners,
                store: &e.store,
                tips: &round_tips,
                new_honest: &honest_ids,
                public: &public,
            };
            adversary.act(&obs, adversary_rng)
        };
        let ids = apply_prism_action(&mut e.store, &mut pending, &mut public, &new_honest, action, round, &budgets, miners, delay)?;
        for &(b, _) in &new_honest {
            public.insert(b as usize);
        }
        adversary.mined(&ids);
    }

    Ok(PrismRecord {
        schema: PRISM_RECORD_SCHEMA.to_string(),
        params: *params,
        adversary: adversary.name().to_string(),
        trial,
        trace,
        store: e.store,
        tips: e.tips,
        leaders: e.leaders,
        known_round: e.known_round,
    })
}

fn start_round(e: &mut Engine, own: &mut [Vec<BlockId>], pending: &mut Pending, round: u32) {
    let mut fresh = Vec::new();
    for miner in 0..e.miners {
        let blocks = std::mem::take(&mut own[miner as usize]);
        if blocks.is_empty() {
            continue;
        }
        fresh.clear();
        for b in blocks {
            e.views.learn(miner, b, &e.store, &mut fresh);
        }
        e.learned(miner, &fresh, round);
    }
    let delivered = e.views.deliver(round, pending, &e.store);
    for (miner, f) in delivered.iter().enumerate() {
        e.learned(miner as u32, f, round);
    }
    let n = e.store.len();
    for k in &mut e.known_round {
        if k.len() < n {
            k.resize(n, UNKNOWN);
        }
    }
}

fn resolve(store: &PrismStore, round: u32, index: usize, r: ParentRef, ids: &[BlockId]) -> Result<BlockId, SimError> {
    let err = |why: String| SimError::Parent { round, index, why };
    match r {
        ParentRef::New(i) if i < ids.len() && i < index => Ok(ids[i]),
        ParentRef::New(i) => Err(err(format!("refers to block {i} ordered later"))),
        ParentRef::Block(b) if (b as usize) < store.len() => {
            if store.block(b).mined_round >= round {
                Err(err(format!("block {b} mined in the current round")))
            } else {
                Ok(b)
            }
        }
        ParentRef::Block(b) => Err(err(format!("unknown block {b}"))),
    }
}

#[allow(clippy::too_many_arguments)]
fn apply_prism_action(
    store: &mut PrismStore,
    pending: &mut Pending,
    public: &mut FixedBitSet,
    new_honest: &[(BlockId, u32)],
    action: PrismAction,
    round: u32,
    budgets: &[u32],
    miners: u32,
    delay: u32,
) -> Result<Vec<BlockId>, SimError> {
    let mut used = vec![0u32; budgets.len()];
    let mut ids = Vec::with_capacity(action.mine.len());
    for (i, order) in action.mine.iter().enumerate() {
        let perr = |why: String| SimError::Parent { round, index: i, why };
        let chain = match order {
            PrismOrder::Proposer { .. } => 0,
            PrismOrder::Voter { chain, .. } => *chain,
        };
        if chain as usize >= budgets.len() {
            return Err(perr(format!("no chain {chain}")));
        }
        used[chain as usize] += 1;
        if used[chain as usize] > budgets[chain as usize] {
            return Err(SimError::Budget { round, used: used[chain as usize] as usize, budget: budgets[chain as usize] });
        }
        let id = match order {
            PrismOrder::Proposer { cert, refs } => {
                let c = resolve(store, round, i, *cert, &ids)?;
                if !store.is_proposer(c) {
                    return Err(perr(format!("certifying link {c} is not a proposer block")));
                }
                let refs = refs.iter().map(|&r| resolve(store, round, i, r, &ids)).collect::<Result<Vec<_>, _>>()?;
                store.push_proposer(MinerKind::Adversarial, None, round, c, refs, Vec::new())
            }
            PrismOrder::Voter { chain, parent, votes } => {
                if *chain == 0 {
                    return Err(perr("voter order on the proposer chain".into()));
                }
                let p = resolve(store, round, i, *parent, &ids)?;
                if store.chain_of(p) != *chain {
                    return Err(perr(format!("parent {p} is not on voter chain {chain}")));
                }
                let mut vs = Vec::with_capacity(votes.len());
                for &(level, target) in votes {
                    let t = resolve(store, round, i, target, &ids)?;
                    if level == 0 || !store.is_proposer(t) || store.level(t) != level {
                        return Err(perr(format!("vote for {t} at level {level} is not a proposer at that level")));
                    }
                    if vs.iter().any(|&(l, _)| l == level) {
                        return Err(perr(format!("two votes at level {level}")));
                    }
                    vs.push((level, t));
                }
                store.push_voter(MinerKind::Adversarial, None, round, *chain, p, vs, Vec::new())
            }
        };
        ids.push(id);
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
    public.grow(store.len());
    let mut stack = Vec::new();
    for rel in &action.release {
        let b = match rel.block {
            ParentRef::New(i) if i < ids.len() => ids[i],
            ParentRef::Block(b) if (b as usize) < store.len() && store.block(b).kind == MinerKind::Adversarial => b,
            other => return Err(SimError::Release { round, why: format!("{other:?} is not an adversarial block") }),
        };
        for ev in schedule(b, None, miners, round, delay, &rel.policy).map_err(net)? {
            pending.push(&ev).map_err(net)?;
        }
        stack.push(b);
        while let Some(x) = stack.pop() {
            if !public.put(x as usize) {
                store.deps(x, &mut stack);
            }
        }
    }
    Ok(ids)
}

/// A read-only view for leader election and ledger construction.
pub struct PrismView<'a> {
    pub store: &'a PrismStore,
    pub known: &'a dyn Fn(BlockId) -> bool,
    /// Voter-chain tips (global ids), chain 1 first.
    pub voter_tips: Vec<BlockId>,
}

/// Leader per level 1..=up_to from the view's main voter chains. The counted vote
/// per (chain, level) is the earliest on the main chain; most votes wins, ties
/// and vote-less levels go to the smallest known id. Truncates at the first
/// level without a known proposer block.
pub fn elect_leaders(view: &PrismView<'_>, up_to: u32) -> Vec<BlockId> {
    let store = view.store;
    let mut counted: Vec<HashMap<u32, BlockId>> = Vec::new();
    for (j, &tip) in view.voter_tips.iter().enumerate() {
        let chain = j as u32 + 1;
        let tree = store.tree(chain);
        let mut votes = HashMap::new();
        let mut cur = Some(store.local(tip));
        while let Some(b) = cur {
            for &(l, p) in store.votes(store.global(chain, b)) {
                votes.insert(l, p);
            }
            cur = tree.get(b).parent;
        }
        counted.push(votes);
    }
    let mut out = Vec::new();
    for level in 1..=up_to {
        let known: Vec<BlockId> = store.proposers_at(level).iter().copied().filter(|&b| (view.known)(b)).collect();
        if known.is_empty() {
            break;
        }
        let mut tally: HashMap<BlockId, u32> = HashMap::new();
        for c in &counted {
            if let Some(&p) = c.get(&level) {
                *tally.entry(p).or_default() += 1;
            }
        }
        let leader = tally
            .into_iter()
            .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
            .map(|(b, _)| b)
            .unwrap_or_else(|| *known.iter().min().expect("non-empty"));
        out.push(leader);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Discard {
    /// Same transaction id seen earlier.
    Redundant,
    /// Same conflict key seen earlier.
    Conflict,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ledger {
    pub txs: Vec<Tx>,
    /// Index into `txs` where each epoch starts.
    pub epoch_starts: Vec<usize>,
    pub epochs: Vec<Vec<BlockId>>,
    pub discarded: Vec<(Tx, Discard)>,
    /// Level whose epoch could not be built because a reachable block is unknown.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub incomplete_at: Option<u32>,
}

impl Ledger {
    /// 1-based epoch containing the transaction, if kept.
    pub fn epoch_of(&self, tx_index: usize) -> u32 {
        self.epoch_starts.partition_point(|&s| s <= tx_index) as u32
    }
}

/// Epoch i holds every block reachable from leader i through reference links that
/// no earlier epoch holds, sorted so references come first, ties by (mined
/// round, id). Transactions keep the first of any duplicate id or conflict key.
pub fn build_ledger(store: &PrismStore, known: &dyn Fn(BlockId) -> bool, leaders: &[BlockId]) -> Ledger {
    let mut ledger = Ledger::default();
    let mut included = FixedBitSet::with_capacity(store.len());
    included.insert_range(..store.m() as usize + 1);
    let mut seen_tx = HashSet::new();
    let mut seen_key = HashSet::new();
    let mut scratch = Vec::new();
    'epochs: for (i, &leader) in leaders.iter().enumerate() {
        let mut epoch: Vec<BlockId> = Vec::new();
        let mut in_epoch = HashSet::new();
        let mut stack = vec![leader];
        while let Some(b) = stack.pop() {
            if included.contains(b as usize) || !in_epoch.insert(b) {
                continue;
            }
            if !known(b) {
                ledger.incomplete_at = Some(i as u32 + 1);
                break 'epochs;
            }
            epoch.push(b);
            scratch.clear();
            store.targets(b, &mut scratch);
            stack.extend_from_slice(&scratch);
        }
        // Kahn's algorithm over the reference links inside the epoch
        let mut pending: HashMap<BlockId, usize> = HashMap::new();
        let mut dependents: HashMap<BlockId, Vec<BlockId>> = HashMap::new();
        for &b in &epoch {
            scratch.clear();
            store.targets(b, &mut scratch);
            scratch.sort_unstable();
            scratch.dedup();
            let inside: Vec<BlockId> = scratch.iter().copied().filter(|t| in_epoch.contains(t)).collect();
            pending.insert(b, inside.len());
            for t in inside {
                dependents.entry(t).or_default().push(b);
            }
        }
        let mut ready: BinaryHeap<Reverse<(u32, BlockId)>> = epoch
            .iter()
            .filter(|b| pending[b] == 0)
            .map(|&b| Reverse((store.block(b).mined_round, b)))
            .collect();
        let mut order = Vec::with_capacity(epoch.len());
        while let Some(Reverse((_, b))) = ready.pop() {
            order.push(b);
            for &d in dependents.get(&b).map_or(&[][..], Vec::as_slice) {
                let c = pending.get_mut(&d).expect("in epoch");
                *c -= 1;
                if *c == 0 {
                    ready.push(Reverse((store.block(d).mined_round, d)));
                }
            }
        }
        debug_assert_eq!(order.len(), epoch.len(), "reference links form a cycle");
        ledger.epoch_starts.push(ledger.txs.len());
        for &b in &order {
            included.insert(b as usize);
            for &tx in &store.block(b).payload {
                if !seen_tx.insert(tx.id) {
                    ledger.discarded.push((tx, Discard::Redundant));
                } else if tx.conflict.is_some_and(|k| !seen_key.insert(k)) {
                    ledger.discarded.push((tx, Discard::Conflict));
                } else {
                    ledger.txs.push(tx);
                }
            }
        }
        ledger.epochs.push(order);
    }
    ledger
}

/// Inclusion check for one view and level: if the level-l leader of `miner`'s view
/// at `round` is honest and mined in round R, every honest block its miner knew
/// by R has its transaction in the ledger of the first l leaders. Vacuously true otherwise.
pub fn honest_leader_inclusion_check(record: &PrismRecord, miner: u32, l: u32, round: u32) -> bool {
    let leaders = record.leaders_at(miner, round);
    if l == 0 || leaders.len() < l as usize {
        return true;
    }
    let leader = record.store.block(leaders[l as usize - 1]);
    let (MinerKind::Honest, Some(lm)) = (leader.kind, leader.miner) else {
        return true;
    };
    let known = |b: BlockId| record.knows(miner, b, round);
    let ledger = build_ledger(&record.store, &known, &leaders[..l as usize]);
    let txs: HashSet<u64> = ledger.txs.iter().map(|t| t.id).collect();
    record.store.blocks().iter().filter(|b| b.kind == MinerKind::Honest && b.miner.is_some()).all(|b| {
        !record.knows(lm, b.id, leader.mined_round) || b.payload.iter().all(|t| txs.contains(&t.id))
    })
}
