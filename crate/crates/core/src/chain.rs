//! Block trees, per-miner tip histories and chain helpers shared by both simulators.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub type BlockId = u32;

pub const GENESIS: BlockId = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MinerKind {
    Honest,
    Adversarial,
}

/// Opaque transaction token. Two transactions conflict iff their keys match.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Tx {
    pub id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conflict: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub id: BlockId,
    pub parent: Option<BlockId>,
    pub kind: MinerKind,
    pub mined_round: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub payload: Vec<Tx>,
}

/// Append-only tree rooted at an honest genesis block with id 0.
///
/// Ids are dense and assigned in insertion order, so a parent always has a
/// smaller id than its children.
#[derive(Debug, Clone)]
pub struct BlockTree {
    blocks: Vec<Block>,
    skip: Vec<BlockId>,
    honest_prefix: Vec<u32>,
}

fn invert_lowest_one(n: u32) -> u32 {
    n & n.wrapping_sub(1)
}

fn skip_height(h: u32) -> u32 {
    if h < 2 {
        0
    } else if h & 1 == 1 {
        invert_lowest_one(invert_lowest_one(h - 1)) + 1
    } else {
        invert_lowest_one(h)
    }
}

impl Default for BlockTree {
    fn default() -> Self {
        Self::new()
    }
}

impl BlockTree {
    pub fn new() -> Self {
        let genesis =
            Block { id: GENESIS, parent: None, kind: MinerKind::Honest, mined_round: 0, height: 0, payload: Vec::new() };
        Self { blocks: vec![genesis], skip: vec![GENESIS], honest_prefix: vec![0] }
    }

    /// Appends a child of `parent`. Panics if the parent does not exist.
    pub fn push(&mut self, parent: BlockId, kind: MinerKind, mined_round: u32, payload: Vec<Tx>) -> BlockId {
        let id = self.blocks.len() as BlockId;
        let height = self.blocks[parent as usize].height + 1;
        let skip = self.ancestor_at(parent, skip_height(height));
        let honest = self.honest_prefix[parent as usize] + u32::from(kind == MinerKind::Honest);
        self.blocks.push(Block { id, parent: Some(parent), kind, mined_round, height, payload });
        self.skip.push(skip);
        self.honest_prefix.push(honest);
        id
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn get(&self, id: BlockId) -> &Block {
        &self.blocks[id as usize]
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn height(&self, id: BlockId) -> u32 {
        self.blocks[id as usize].height
    }

    /// Honest non-genesis blocks on the chain ending at `id`.
    pub fn honest_upto(&self, id: BlockId) -> u32 {
        self.honest_prefix[id as usize]
    }

    /// Ancestor of `id` at `height`. Panics if `height` exceeds the block's height.
    pub fn ancestor_at(&self, id: BlockId, height: u32) -> BlockId {
        let mut walk = id;
        let mut hw = self.blocks[id as usize].height;
        assert!(height <= hw, "ancestor height {height} above block height {hw}");
        while hw > height {
            let hs = skip_height(hw);
            let hs_prev = skip_height(hw - 1);
            if hs == height || (hs > height && !(hs_prev + 2 < hs && hs_prev >= height)) {
                walk = self.skip[walk as usize];
                hw = hs;
            } else {
                walk = self.blocks[walk as usize].parent.expect("non-genesis has parent");
                hw -= 1;
            }
        }
        walk
    }

    /// True iff `a` is `b` or an ancestor of `b`.
    pub fn is_ancestor(&self, a: BlockId, b: BlockId) -> bool {
        let ha = self.height(a);
        ha <= self.height(b) && self.ancestor_at(b, ha) == a
    }

    /// Lowest common ancestor.
    pub fn lca(&self, a: BlockId, b: BlockId) -> BlockId {
        let h = self.height(a).min(self.height(b));
        let (mut a, mut b) = (self.ancestor_at(a, h), self.ancestor_at(b, h));
        // most forks are shallow
        for _ in 0..16 {
            if a == b {
                return a;
            }
            a = self.blocks[a as usize].parent.expect("distinct blocks at equal height are not genesis");
            b = self.blocks[b as usize].parent.expect("distinct blocks at equal height are not genesis");
        }
        if a == b {
            return a;
        }
        let h = self.height(a);
        // binary search on height for the highest agreeing ancestor
        let (mut lo, mut hi) = (0u32, h);
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if self.ancestor_at(a, mid) == self.ancestor_at(b, mid) {
                lo = mid;
            } else {
                hi = mid;
                a = self.ancestor_at(a, mid);
                b = self.ancestor_at(b, mid);
            }
        }
        self.ancestor_at(a, lo)
    }

    /// Block ids from genesis to `id` inclusive.
    pub fn chain(&self, id: BlockId) -> Vec<BlockId> {
        let mut out = Vec::with_capacity(self.height(id) as usize + 1);
        let mut cur = Some(id);
        while let Some(b) = cur {
            out.push(b);
            cur = self.blocks[b as usize].parent;
        }
        out.reverse();
        out
    }

    /// Tip of the k-deep prefix of the chain ending at `tip`; genesis when the chain is short.
    pub fn prefix_tip(&self, tip: BlockId, k: u32) -> BlockId {
        let h = self.height(tip);
        self.ancestor_at(tip, h.saturating_sub(k))
    }
}

impl Serialize for BlockTree {
    fn serialize<S: Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        self.blocks.serialize(ser)
    }
}

impl<'de> Deserialize<'de> for BlockTree {
    fn deserialize<D: Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let blocks = Vec::<Block>::deserialize(de)?;
        let mut tree = BlockTree::new();
        let mut it = blocks.into_iter();
        match it.next() {
            Some(g) if g.id == GENESIS && g.parent.is_none() && g.height == 0 => {}
            _ => return Err(D::Error::custom("first block must be genesis")),
        }
        for b in it {
            let parent = b.parent.ok_or_else(|| D::Error::custom("non-genesis block without parent"))?;
            if parent >= b.id || b.id as usize != tree.len() {
                return Err(D::Error::custom(format!("block {} out of order", b.id)));
            }
            let id = tree.push(parent, b.kind, b.mined_round, b.payload);
            if tree.height(id) != b.height {
                return Err(D::Error::custom(format!("block {} height mismatch", b.id)));
            }
        }
        Ok(tree)
    }
}

/// Drops the last `k` blocks of a genesis-first chain; keeps genesis when the chain is short.
pub fn prefix_k(chain: &[BlockId], k: usize) -> &[BlockId] {
    let keep = chain.len().saturating_sub(k).max(1).min(chain.len());
    &chain[..keep]
}

/// Rounds at which one miner's adopted tip changed. The tip "at round r" is the
/// state at the start of round r, after that round's deliveries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TipHistory {
    changes: Vec<(u32, BlockId)>,
}

impl TipHistory {
    /// Starts on `tip` from round 1.
    pub fn new(tip: BlockId) -> Self {
        Self { changes: vec![(1, tip)] }
    }

    pub fn from_changes(changes: Vec<(u32, BlockId)>) -> Self {
        assert!(!changes.is_empty() && changes.windows(2).all(|w| w[0].0 < w[1].0));
        Self { changes }
    }

    /// Sets the tip from `round` on. Rounds must be non-decreasing.
    pub fn record(&mut self, round: u32, tip: BlockId) {
        let last = self.changes.last_mut().expect("non-empty");
        assert!(round >= last.0, "tip history must move forward");
        if last.1 == tip {
            return;
        }
        if last.0 == round {
            last.1 = tip;
            if self.changes.len() >= 2 && self.changes[self.changes.len() - 2].1 == tip {
                self.changes.pop();
            }
        } else {
            self.changes.push((round, tip));
        }
    }

    pub fn current(&self) -> BlockId {
        self.changes.last().expect("non-empty").1
    }

    pub fn at(&self, round: u32) -> BlockId {
        let i = self.changes.partition_point(|&(r, _)| r <= round);
        self.changes[i.max(1) - 1].1
    }

    pub fn changes(&self) -> &[(u32, BlockId)] {
        &self.changes
    }
}
