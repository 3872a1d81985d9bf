//! Block diffusion under the synchronous and bounded-delay models.
//!
//! Only honest miners are addressed; the adversary is one coordinated entity that
//! sees every block as soon as it exists.

use fixedbitset::FixedBitSet;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{BlockId, BlockTree};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliveryEvent {
    pub block: BlockId,
    /// Honest sender, or `None` for an adversarial release.
    pub sender: Option<u32>,
    pub recipient: u32,
    pub broadcast_round: u32,
    /// First round in which the recipient may react to the block.
    pub delivery_round: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DelayPolicy {
    MinDelay,
    MaxDelay,
    /// Delay in rounds per honest miner, indexed by miner id. The sender's entry is ignored.
    Adversarial(Vec<u32>),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NetworkError {
    #[error("delay {delay} for miner {recipient} outside [1, {max}]")]
    OutOfWindow { recipient: u32, delay: u32, max: u32 },
    #[error("delay plan covers {got} miners, expected {want}")]
    PlanLength { got: usize, want: usize },
    #[error("delivery at round {delivery} not in ({now}, {now} + T]")]
    Unschedulable { delivery: u32, now: u32 },
}

/// One event per honest miner other than the sender, each within
/// `[broadcast_round + 1, broadcast_round + T]`.
pub fn schedule(
    block: BlockId,
    sender: Option<u32>,
    miners: u32,
    broadcast_round: u32,
    delay: u32,
    policy: &DelayPolicy,
) -> Result<Vec<DeliveryEvent>, NetworkError> {
    if let DelayPolicy::Adversarial(plan) = policy {
        if plan.len() != miners as usize {
            return Err(NetworkError::PlanLength { got: plan.len(), want: miners as usize });
        }
    }
    let mut out = Vec::with_capacity(miners as usize);
    for recipient in 0..miners {
        if Some(recipient) == sender {
            continue;
        }
        let d = match policy {
            DelayPolicy::MinDelay => 1,
            DelayPolicy::MaxDelay => delay,
            DelayPolicy::Adversarial(plan) => plan[recipient as usize],
        };
        if d < 1 || d > delay {
            return Err(NetworkError::OutOfWindow { recipient, delay: d, max: delay });
        }
        out.push(DeliveryEvent { block, sender, recipient, broadcast_round, delivery_round: broadcast_round + d });
    }
    Ok(out)
}

/// Something whose blocks depend on other blocks being known first.
pub trait Dependencies {
    fn deps(&self, block: BlockId, out: &mut Vec<BlockId>);
}

impl Dependencies for BlockTree {
    fn deps(&self, block: BlockId, out: &mut Vec<BlockId>) {
        if let Some(p) = self.get(block).parent {
            out.push(p);
        }
    }
}

/// Ring buffer of undelivered events keyed by delivery round.
#[derive(Debug, Clone)]
pub struct Pending {
    delay: u32,
    now: u32,
    slots: Vec<Vec<(BlockId, u32)>>,
}

impl Pending {
    pub fn new(delay: u32) -> Self {
        Self { delay, now: 0, slots: vec![Vec::new(); delay as usize + 1] }
    }

    /// Events pushed after this call must deliver in `(round, round + T]`.
    pub fn set_round(&mut self, round: u32) {
        self.now = round;
    }

    pub fn push(&mut self, ev: &DeliveryEvent) -> Result<(), NetworkError> {
        if ev.delivery_round <= self.now || ev.delivery_round > self.now + self.delay {
            return Err(NetworkError::Unschedulable { delivery: ev.delivery_round, now: self.now });
        }
        let slot = (ev.delivery_round % (self.delay + 1)) as usize;
        self.slots[slot].push((ev.block, ev.recipient));
        Ok(())
    }

    /// Removes and returns every (block, recipient) due at `round`.
    pub fn take(&mut self, round: u32) -> Vec<(BlockId, u32)> {
        std::mem::take(&mut self.slots[(round % (self.delay + 1)) as usize])
    }

    pub fn is_empty(&self) -> bool {
        self.slots.iter().all(Vec::is_empty)
    }
}

/// Known-block sets of the honest miners. Knowledge only grows.
#[derive(Debug, Clone)]
pub struct Views {
    known: Vec<FixedBitSet>,
    stack: Vec<BlockId>,
}

impl Views {
    /// Every miner starts knowing the blocks in `initial`.
    pub fn new(miners: u32, initial: &[BlockId]) -> Self {
        let mut known = vec![FixedBitSet::with_capacity(1024); miners as usize];
        for k in &mut known {
            for &b in initial {
                k.grow(b as usize + 1);
                k.insert(b as usize);
            }
        }
        Self { known, stack: Vec::new() }
    }

    pub fn miners(&self) -> u32 {
        self.known.len() as u32
    }

    pub fn knows(&self, miner: u32, block: BlockId) -> bool {
        self.known[miner as usize].contains(block as usize)
    }

    pub fn known(&self, miner: u32) -> &FixedBitSet {
        &self.known[miner as usize]
    }

    /// Teaches `miner` the block and every unknown dependency, appending newly
    /// learned ids to `fresh` (dependencies before dependents is not guaranteed).
    pub fn learn<D: Dependencies + ?Sized>(&mut self, miner: u32, block: BlockId, deps: &D, fresh: &mut Vec<BlockId>) {
        let set = &mut self.known[miner as usize];
        if set.contains(block as usize) {
            return;
        }
        self.stack.clear();
        self.stack.push(block);
        while let Some(b) = self.stack.pop() {
            if (b as usize) >= set.len() {
                set.grow((b as usize + 1).next_power_of_two());
            }
            if set.put(b as usize) {
                continue;
            }
            fresh.push(b);
            deps.deps(b, &mut self.stack);
        }
    }

    /// Applies every event due at `round`; returns newly known blocks per miner.
    pub fn deliver<D: Dependencies + ?Sized>(
        &mut self,
        round: u32,
        pending: &mut Pending,
        deps: &D,
    ) -> Vec<Vec<BlockId>> {
        let mut fresh = vec![Vec::new(); self.known.len()];
        for (block, recipient) in pending.take(round) {
            let out = &mut fresh[recipient as usize];
            self.learn(recipient, block, deps, out);
        }
        fresh
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::MinerKind;

    #[test]
    fn sync_window_is_one_round() {
        for policy in [DelayPolicy::MinDelay, DelayPolicy::MaxDelay, DelayPolicy::Adversarial(vec![1; 4])] {
            let evs = schedule(7, Some(2), 4, 10, 1, &policy).unwrap();
            assert_eq!(evs.len(), 3);
            assert!(evs.iter().all(|e| e.delivery_round == 11 && e.recipient != 2));
        }
    }

    #[test]
    fn max_delay_and_split() {
        let evs = schedule(1, None, 4, 3, 5, &DelayPolicy::MaxDelay).unwrap();
        assert!(evs.iter().all(|e| e.delivery_round == 8));
        let evs = schedule(1, None, 4, 3, 5, &DelayPolicy::Adversarial(vec![1, 5, 1, 5])).unwrap();
        let rounds: Vec<u32> = evs.iter().map(|e| e.delivery_round).collect();
        assert_eq!(rounds, vec![4, 8, 4, 8]);
        assert!(schedule(1, None, 4, 3, 5, &DelayPolicy::Adversarial(vec![1, 6, 1, 5])).is_err());
        assert!(schedule(1, None, 4, 3, 5, &DelayPolicy::Adversarial(vec![0, 1, 1, 1])).is_err());
        assert!(schedule(1, None, 4, 3, 5, &DelayPolicy::Adversarial(vec![1, 1])).is_err());
    }

    #[test]
    fn edge_of_window_delivery() {
        let mut tree = BlockTree::new();
        let b = tree.push(0, MinerKind::Honest, 3, Vec::new());
        let mut views = Views::new(2, &[0]);
        let mut pending = Pending::new(5);
        pending.set_round(3);
        for ev in schedule(b, Some(0), 2, 3, 5, &DelayPolicy::MaxDelay).unwrap() {
            pending.push(&ev).unwrap();
        }
        for r in 4..8 {
            assert!(views.deliver(r, &mut pending, &tree).iter().all(Vec::is_empty));
        }
        let fresh = views.deliver(8, &mut pending, &tree);
        assert_eq!(fresh[1], vec![b]);
        assert!(views.knows(1, b));
        assert!(pending.is_empty());
        pending.set_round(8);
        assert!(pending.push(&DeliveryEvent { block: b, sender: None, recipient: 0, broadcast_round: 8, delivery_round: 8 }).is_err());
    }

    #[test]
    fn closure_brings_ancestors() {
        let mut tree = BlockTree::new();
        let a = tree.push(0, MinerKind::Adversarial, 1, Vec::new());
        let b = tree.push(a, MinerKind::Adversarial, 1, Vec::new());
        let mut views = Views::new(1, &[0]);
        let mut fresh = Vec::new();
        views.learn(0, b, &tree, &mut fresh);
        fresh.sort();
        assert_eq!(fresh, vec![a, b]);
        assert!(views.knows(0, a));
    }
}
