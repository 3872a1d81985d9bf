//! Chain measurements, empirical event frequencies and the implication engine
//! that checks "typical event holds ⇒ property holds" on simulated runs.

use std::collections::HashSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bitcoin_sim::{last_in_chain, marked_rounds, record_derived, unique_block_holds, SimRecord};
use crate::bounds::{e1_failure_bound, e2_failure_bound, e3_failure_bound, lb_prob_e, lb_prob_f};
use crate::chain::{BlockId, BlockTree, MinerKind, TipHistory, GENESIS};
use crate::params::{derive_unchecked, DerivedParams, ParamError, ProtocolParams};
use crate::prism_sim::{build_ledger, PrismRecord, UNKNOWN};
use crate::trace::{
    e_parts, sample_marginals, sample_trace, stream_rng, ChainCounts, IntervalCounts, Stream, TraceError, TypicalIndex,
};

/// Two-sided 99% normal quantile.
pub const Z99: f64 = 2.575_829_303_548_901;
pub const MIN_TRIALS: u64 = 1000;
pub const MAX_COUNTEREXAMPLES: usize = 20;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("need at least {MIN_TRIALS} trials, got {0}")]
    TooFewTrials(u64),
    #[error(transparent)]
    Params(#[from] ParamError),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

/// Honest fraction of the last `k` blocks of a genesis-first chain; `None` unless the chain has more than k blocks.
pub fn chain_quality(tree: &BlockTree, chain: &[BlockId], k: usize) -> Option<f64> {
    if chain.len() <= k || k == 0 {
        return None;
    }
    let honest = chain[chain.len() - k..].iter().filter(|&&b| tree.get(b).kind == MinerKind::Honest).count();
    Some(honest as f64 / k as f64)
}

/// `a` is a prefix of `b` as id sequences.
pub fn is_prefix(a: &[BlockId], b: &[BlockId]) -> bool {
    a.len() <= b.len() && b[..a.len()] == *a
}

/// Checks that `prefix` stays on every honest adopted chain for all rounds in
/// `from_round..=end`. On failure returns the first round it is missing.
pub fn permanence_scan(
    tree: &BlockTree,
    tips: &[TipHistory],
    end: u32,
    prefix: &[BlockId],
    from_round: u32,
) -> Result<(), u32> {
    let Some(&ptip) = prefix.last() else {
        return Ok(());
    };
    if (ptip as usize) >= tree.len() || tree.chain(ptip) != prefix {
        return Err(from_round);
    }
    let mut first: Option<u32> = None;
    for h in tips {
        let ch = h.changes();
        for (i, &(r, tip)) in ch.iter().enumerate() {
            let until = ch.get(i + 1).map_or(end, |&(next, _)| next - 1);
            if until < from_round || r > end {
                continue;
            }
            if !tree.is_ancestor(ptip, tip) {
                let at = r.max(from_round);
                first = Some(first.map_or(at, |f| f.min(at)));
                break;
            }
        }
    }
    first.map_or(Ok(()), Err)
}

/// [`permanence_scan`] over a Bitcoin record's horizon.
pub fn permanence_scan_record(record: &SimRecord, prefix: &[BlockId], from_round: u32) -> Result<(), u32> {
    permanence_scan(&record.blocks, &record.tips, record.end_round(), prefix, from_round)
}

/// O(1) permanence queries against the final chain of miner 0.
#[derive(Debug, Clone)]
pub struct PermanenceIndex {
    final_chain: Vec<BlockId>,
    /// `bad_until[h]`: last round some honest chain did not contain the final block at height h; 0 if none.
    bad_until: Vec<u32>,
}

impl PermanenceIndex {
    pub fn new(tree: &BlockTree, tips: &[TipHistory], end: u32) -> Self {
        let ftip = tips[0].at(end);
        let final_chain = tree.chain(ftip);
        let mut low = vec![u32::MAX; end as usize + 1];
        for h in tips {
            let ch = h.changes();
            for (i, &(r, tip)) in ch.iter().enumerate() {
                if r > end {
                    break;
                }
                let until = ch.get(i + 1).map_or(end, |&(next, _)| (next - 1).min(end));
                let v = tree.height(tree.lca(tip, ftip));
                for m in &mut low[r as usize..=until as usize] {
                    *m = (*m).min(v);
                }
            }
        }
        let mut bad_until = vec![0u32; final_chain.len() + 1];
        for (r, &m) in low.iter().enumerate().skip(1) {
            let i = m as usize + 1;
            if i < bad_until.len() {
                bad_until[i] = bad_until[i].max(r as u32);
            }
        }
        for i in 1..bad_until.len() {
            bad_until[i] = bad_until[i].max(bad_until[i - 1]);
        }
        Self { final_chain, bad_until }
    }

    /// Whether `block` is on every honest chain at every round from `round` on.
    pub fn permanent_from(&self, tree: &BlockTree, block: BlockId, round: u32) -> bool {
        let h = tree.height(block) as usize;
        self.final_chain.get(h) == Some(&block) && self.bad_until[h] < round
    }

    pub fn final_chain(&self) -> &[BlockId] {
        &self.final_chain
    }
}

/// Shortest and longest honest adopted chain per round, indexed by round.
pub fn honest_lengths(tree: &BlockTree, tips: &[TipHistory], end: u32) -> (Vec<u32>, Vec<u32>) {
    let mut lo = vec![u32::MAX; end as usize + 1];
    let mut hi = vec![0u32; end as usize + 1];
    for h in tips {
        let ch = h.changes();
        for (i, &(r, tip)) in ch.iter().enumerate() {
            if r > end {
                break;
            }
            let until = ch.get(i + 1).map_or(end, |&(next, _)| (next - 1).min(end));
            let len = tree.height(tip);
            for x in r..=until {
                lo[x as usize] = lo[x as usize].min(len);
                hi[x as usize] = hi[x as usize].max(len);
            }
        }
    }
    (lo, hi)
}

/// Deepest switch any honest miner made: height of the old tip minus height of the fork point.
pub fn max_reorg_depth(tree: &BlockTree, tips: &[TipHistory]) -> u32 {
    tips.iter()
        .flat_map(|h| h.changes().windows(2).map(|w| tree.height(w[0].1) - tree.height(tree.lca(w[0].1, w[1].1))))
        .max()
        .unwrap_or(0)
}

/// Some honest miner abandoned a block that had at least `k` blocks on top of it.
pub fn overtakes(tree: &BlockTree, tips: &[TipHistory], k: u32) -> bool {
    max_reorg_depth(tree, tips) > k
}

/// Wilson score interval for `successes` out of `trials`.
pub fn wilson(successes: u64, trials: u64, z: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventId {
    /// E over a full sampled trace.
    E,
    /// F at the params' delay over a full sampled trace.
    F,
    /// The three marginals of E, from the Binomial fast path.
    E1,
    E2,
    E3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyReport {
    pub event: EventId,
    pub span: u32,
    pub trials: u64,
    pub failures: u64,
    pub success_freq: f64,
    /// Analytic lower bound on the success probability, clamped to [0, 1].
    pub analytic_lb: f64,
    pub wilson_lo: f64,
    pub wilson_hi: f64,
    /// The analytic bound is 0, so nothing is checked.
    pub vacuous: bool,
    /// Empirical success falls below the bound by more than the 99% margin.
    pub flagged: bool,
}

/// Empirical frequency of an event over `span` rounds against its analytic bound.
pub fn event_frequency(
    event: EventId,
    span: u32,
    params: &ProtocolParams,
    trials: u64,
    rng: &mut ChaCha8Rng,
) -> Result<FrequencyReport, MetricsError> {
    if trials < MIN_TRIALS {
        return Err(MetricsError::TooFewTrials(trials));
    }
    let d = derive_unchecked(params)?;
    let rates = d.rates();
    let len = f64::from(span);
    let delay = params.delay;
    let (analytic_lb, mut holds): (f64, Box<dyn FnMut(&mut ChaCha8Rng) -> Result<bool, MetricsError>>) = match event {
        EventId::E => (
            lb_prob_e(len, &rates),
            Box::new(|rng| {
                let tr = sample_trace(params, 1, rng, span)?;
                Ok(ChainCounts::new(&tr, 0, 1).e_holds(1, span + 1, &d))
            }),
        ),
        EventId::F => {
            // F[T, T + span] needs T − 1 rounds before and T − 2 after the window
            let total = span + 2 * delay;
            (
                lb_prob_f(len, &rates, delay),
                Box::new(move |rng| {
                    let tr = sample_trace(params, 1, rng, total)?;
                    Ok(ChainCounts::new(&tr, 0, delay).f_holds(delay, delay + span, &d))
                }),
            )
        }
        EventId::E1 => (
            1.0 - e1_failure_bound(len, &d),
            Box::new(|rng| {
                let (x, y, z) = sample_marginals(&d, span, rng);
                Ok(e_parts(&IntervalCounts { x, y, z, xp: None, yp: None }, span, &d)[0])
            }),
        ),
        EventId::E2 => (
            1.0 - e2_failure_bound(len, &d),
            Box::new(|rng| {
                let (x, y, z) = sample_marginals(&d, span, rng);
                Ok(e_parts(&IntervalCounts { x, y, z, xp: None, yp: None }, span, &d)[1])
            }),
        ),
        EventId::E3 => (
            1.0 - e3_failure_bound(len, &d),
            Box::new(|rng| {
                let (x, y, z) = sample_marginals(&d, span, rng);
                Ok(e_parts(&IntervalCounts { x, y, z, xp: None, yp: None }, span, &d)[2])
            }),
        ),
    };
    let mut failures = 0u64;
    for _ in 0..trials {
        if !holds(rng)? {
            failures += 1;
        }
    }
    let analytic_lb = analytic_lb.clamp(0.0, 1.0);
    let (wilson_lo, wilson_hi) = wilson(trials - failures, trials, Z99);
    let vacuous = analytic_lb <= 0.0;
    Ok(FrequencyReport {
        event,
        span,
        trials,
        failures,
        success_freq: (trials - failures) as f64 / trials as f64,
        analytic_lb,
        wilson_lo,
        wilson_hi,
        vacuous,
        flagged: !vacuous && wilson_hi < analytic_lb,
    })
}

/// One violated implication, enough to replay it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counterexample {
    pub seed: u64,
    pub trial: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chain: Option<u32>,
    pub s: u32,
    pub r: u32,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImplicationReport {
    pub theorem: String,
    /// Cases examined.
    pub scanned: u64,
    /// Cases whose antecedent held.
    pub held: u64,
    pub violations: u64,
    pub counterexamples: Vec<Counterexample>,
}

impl ImplicationReport {
    pub fn new(theorem: &str) -> Self {
        Self { theorem: theorem.to_string(), scanned: 0, held: 0, violations: 0, counterexamples: Vec::new() }
    }

    fn case(&mut self, held: bool) {
        self.scanned += 1;
        self.held += u64::from(held);
    }

    fn violate(&mut self, cx: Counterexample) {
        self.violations += 1;
        if self.counterexamples.len() < MAX_COUNTEREXAMPLES {
            self.counterexamples.push(cx);
        }
    }

    pub fn merge(&mut self, other: &ImplicationReport) {
        self.scanned += other.scanned;
        self.held += other.held;
        self.violations += other.violations;
        let room = MAX_COUNTEREXAMPLES.saturating_sub(self.counterexamples.len());
        self.counterexamples.extend(other.counterexamples.iter().take(room).cloned());
    }
}

/// Folds per-run report lists into one report per theorem, keeping first-seen order.
pub fn merge_reports<I: IntoIterator<Item = Vec<ImplicationReport>>>(runs: I) -> Vec<ImplicationReport> {
    let mut out: Vec<ImplicationReport> = Vec::new();
    for run in runs {
        for r in run {
            match out.iter_mut().find(|o| o.theorem == r.theorem) {
                Some(o) => o.merge(&r),
                None => out.push(r),
            }
        }
    }
    out
}

/// Which (s, r) intervals the implication suites examine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanPlan {
    /// Lattice spacing in rounds.
    pub step: u32,
    /// Extra uniformly random intervals per run.
    pub random: u32,
}

impl Default for ScanPlan {
    fn default() -> Self {
        Self { step: 250, random: 40 }
    }
}

const BOUNDARY_K: [u32; 12] = [1, 2, 3, 5, 8, 13, 21, 34, 55, 89, 144, 233];

impl ScanPlan {
    /// Lattice rounds `step, 2·step, …` up to `max`, plus `max` itself.
    pub fn rounds(&self, max: u32) -> Vec<u32> {
        let step = self.step.max(1);
        let mut v: Vec<u32> = (1..).map(|i| i * step).take_while(|&r| r <= max).collect();
        if v.last() != Some(&max) && max >= 1 {
            v.push(max);
        }
        v
    }

    /// Lattice pairs, pairs at the k-threshold `s = r − ⌊k/(2q)⌋`, and random pairs,
    /// all with `1 ≤ s < r ≤ max`.
    pub fn pairs(&self, max: u32, q: f64, rng: &mut ChaCha8Rng) -> Vec<(u32, u32)> {
        let rounds = self.rounds(max);
        let mut out = Vec::new();
        for (i, &r) in rounds.iter().enumerate() {
            out.push((1, r));
            out.extend(rounds[..i].iter().map(|&s| (s, r)));
            for k in BOUNDARY_K {
                let span = (f64::from(k) / (2.0 * q)).floor() as u32;
                if span >= 1 && span < r {
                    out.push((r - span, r));
                }
            }
        }
        if max >= 2 {
            for _ in 0..self.random {
                let r = rng.random_range(2..=max);
                let s = rng.random_range(1..r);
                out.push((s, r));
            }
        }
        out.retain(|&(s, r)| s >= 1 && s < r);
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// One longest-chain process as the implication suites see it.
pub struct ChainView<'a> {
    pub tree: &'a BlockTree,
    pub tips: &'a [TipHistory],
    /// Last recorded round.
    pub end: u32,
    pub counts: &'a ChainCounts,
    pub derived: &'a DerivedParams,
    pub delay: u32,
    pub unique_rounds: &'a [u32],
    pub isolated_rounds: &'a [u32],
    pub seed: u64,
    pub trial: u64,
    pub chain: Option<u32>,
}

impl ChainView<'_> {
    fn cx(&self, s: u32, r: u32, detail: String) -> Counterexample {
        Counterexample { seed: self.seed, trial: self.trial, chain: self.chain, s, r, detail }
    }

    fn tips_at(&self, r: u32) -> Vec<BlockId> {
        let mut v: Vec<BlockId> = self.tips.iter().map(|h| h.at(r)).collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

fn honest_in_last(tree: &BlockTree, tip: BlockId, k: u32) -> u32 {
    let h = tree.height(tip);
    tree.honest_upto(tip) - tree.honest_upto(tree.ancestor_at(tip, h - k))
}

/// Synchronous-model suite: growth, k-deep age, quality, common prefix under
/// G_trunc, and unique honest blocks per height.
pub fn sync_suite(v: &ChainView<'_>, plan: &ScanPlan, rng: &mut ChaCha8Rng, prefix: &str) -> Vec<ImplicationReport> {
    let d = v.derived;
    let tree = v.tree;
    let g = TypicalIndex::for_g(v.counts, d);
    let (min_len, max_len) = honest_lengths(tree, v.tips, v.end);
    let perm = PermanenceIndex::new(tree, v.tips, v.end);
    let mut growth = ImplicationReport::new(&format!("{prefix}.chain_growth"));
    let mut age = ImplicationReport::new(&format!("{prefix}.k_deep_age"));
    let mut quality = ImplicationReport::new(&format!("{prefix}.chain_quality"));
    let mut cp = ImplicationReport::new(&format!("{prefix}.common_prefix"));
    let lattice = plan.rounds(g.hi());
    let rate = (1.0 - d.xi / 6.0) * d.q;
    for (s, r) in plan.pairs(g.hi(), d.q, rng) {
        let held = g.holds(s, r);
        let k = (2.0 * d.q * f64::from(r - s)).ceil() as u32;
        let tips = v.tips_at(r);
        for s1 in lattice.iter().copied().filter(|&x| x < s).chain([1, s]) {
            growth.case(held);
            if held {
                let grown = i64::from(min_len[r as usize]) - i64::from(max_len[s1 as usize]);
                if (grown as f64) < rate * f64::from(r - s1) {
                    growth.violate(v.cx(s, r, format!("s1={s1}: grew {grown} < {:.3}", rate * f64::from(r - s1))));
                }
            }
        }
        for &tip in &tips {
            let ktip = tree.prefix_tip(tip, k);
            age.case(held);
            quality.case(held && tree.height(tip) >= k);
            cp.case(held);
            if !held {
                continue;
            }
            let mined = tree.get(ktip).mined_round;
            if mined >= s {
                age.violate(v.cx(s, r, format!("k={k}: {k}-deep block {ktip} of tip {tip} mined in {mined}")));
            }
            if tree.height(tip) >= k && k > 0 {
                let honest = honest_in_last(tree, tip, k);
                if f64::from(honest) <= d.xi / 2.0 * f64::from(k) {
                    quality.violate(v.cx(s, r, format!("k={k}: tip {tip} has {honest} honest of last {k}")));
                }
            }
            if !perm.permanent_from(tree, ktip, r) {
                cp.violate(v.cx(s, r, format!("k={k}: prefix tip {ktip} of tip {tip} not permanent")));
            }
        }
    }
    let pairs = plan.pairs(g.hi(), d.q, rng);
    let floor = growth_floor(v, &min_len, &pairs, &format!("{prefix}.growth_floor"));
    vec![growth, age, quality, cp, unique_suite(v, v.unique_rounds, &format!("{prefix}.unique_block")), floor]
}

/// Unconditional growth: the slowest honest chain gains at least one block per
/// honest success in sync, and one per T-left-isolated success at most T rounds
/// before r in the bounded model.
fn growth_floor(v: &ChainView<'_>, min_len: &[u32], pairs: &[(u32, u32)], name: &str) -> ImplicationReport {
    let mut rep = ImplicationReport::new(name);
    let t = v.delay;
    for &(s, r) in pairs {
        if s < t || r > v.end || r + 1 <= s + t {
            continue;
        }
        let gained = if t == 1 { v.counts.x(s, r) } else { v.counts.xp(s, r + 1 - t) };
        rep.case(true);
        let grown = i64::from(min_len[r as usize]) - i64::from(min_len[s as usize]);
        if grown < gained as i64 {
            rep.violate(v.cx(s, r, format!("grew {grown} < {gained} successes")));
        }
    }
    rep
}

/// Bounded-delay suite: growth under J[s, r−T], age under J[s, r], quality under
/// J[s, r−T], common prefix under J[s+T, r−T], and isolated honest blocks.
pub fn bounded_suite(v: &ChainView<'_>, plan: &ScanPlan, rng: &mut ChaCha8Rng, prefix: &str) -> Vec<ImplicationReport> {
    let d = v.derived;
    let tree = v.tree;
    let t = v.delay;
    let j = TypicalIndex::for_j(v.counts, d);
    let (min_len, _) = honest_lengths(tree, v.tips, v.end);
    let perm = PermanenceIndex::new(tree, v.tips, v.end);
    let mut growth = ImplicationReport::new(&format!("{prefix}.chain_growth"));
    let mut age = ImplicationReport::new(&format!("{prefix}.k_deep_age"));
    let mut quality = ImplicationReport::new(&format!("{prefix}.chain_quality"));
    let mut cp = ImplicationReport::new(&format!("{prefix}.common_prefix"));
    let max_r = v.end - 1;
    let lattice = plan.rounds(max_r);
    let rate = (1.0 - d.xi / 10.0) * (-d.q).ln_1p().mul_add(f64::from(t), 0.0).exp() * d.q;
    let gap = 2.0 / d.q;
    for (s, r) in plan.pairs(max_r, d.q, rng) {
        if s < t || f64::from(s) >= f64::from(r) - gap {
            continue;
        }
        let span = f64::from(r - s);
        let k_ge = (2.0 * d.q * span).ceil() as u32;
        let k_gt = (2.0 * d.q * span).floor() as u32 + 1;
        let j_short = j.holds(s, r - t);
        let j_full = j.holds(s, r);
        let j_cp = j.holds(s + t, r - t);
        for s1 in lattice.iter().copied().filter(|&x| x >= t && x < s).chain([t.max(1), s]) {
            growth.case(j_short);
            if j_short {
                let grown = i64::from(min_len[r as usize]) - i64::from(min_len[s1 as usize]);
                if (grown as f64) < rate * f64::from(r - s1) {
                    growth.violate(v.cx(s, r, format!("s1={s1}: grew {grown} < {:.3}", rate * f64::from(r - s1))));
                }
            }
        }
        for tip in v.tips_at(r) {
            age.case(j_full);
            if j_full {
                let ktip = tree.prefix_tip(tip, k_ge);
                let mined = tree.get(ktip).mined_round;
                if mined >= s {
                    age.violate(v.cx(s, r, format!("k={k_ge}: deep block {ktip} of tip {tip} mined in {mined}")));
                }
            }
            let long = tree.height(tip) >= k_ge && k_ge > 0;
            quality.case(j_short && long);
            if j_short && long {
                let honest = honest_in_last(tree, tip, k_ge);
                if f64::from(honest) <= d.xi / 2.0 * f64::from(k_ge) {
                    quality.violate(v.cx(s, r, format!("k={k_ge}: tip {tip} has {honest} honest of last {k_ge}")));
                }
            }
            cp.case(j_cp);
            if j_cp {
                let ktip = tree.prefix_tip(tip, k_gt);
                if !perm.permanent_from(tree, ktip, r) {
                    cp.violate(v.cx(s, r, format!("k={k_gt}: prefix tip {ktip} of tip {tip} not permanent")));
                }
            }
        }
    }
    let rounds: Vec<u32> = v.isolated_rounds.iter().copied().filter(|&u| u > t).collect();
    let pairs = plan.pairs(max_r, d.q, rng);
    let floor = growth_floor(v, &min_len, &pairs, &format!("{prefix}.growth_floor"));
    vec![growth, age, quality, cp, unique_suite(v, &rounds, &format!("{prefix}.unique_block")), floor]
}

fn unique_suite(v: &ChainView<'_>, rounds: &[u32], name: &str) -> ImplicationReport {
    let mut rep = ImplicationReport::new(name);
    let last = last_in_chain(v.tree, v.tips, v.end);
    for &u in rounds {
        rep.case(true);
        if !unique_block_holds(v.tree, &last, u, v.delay) {
            rep.violate(v.cx(u, u, format!("round {u}: another honest block shares the height")));
        }
    }
    rep
}

/// All implication suites for one Bitcoin run, chosen by the record's delay.
pub fn bitcoin_suite(record: &SimRecord, plan: &ScanPlan) -> Vec<ImplicationReport> {
    let d = record_derived(record);
    let delay = record.params.delay;
    let counts = ChainCounts::new(&record.trace, 0, delay);
    let view = ChainView {
        tree: &record.blocks,
        tips: &record.tips,
        end: record.end_round(),
        counts: &counts,
        derived: &d,
        delay,
        unique_rounds: &record.unique_rounds,
        isolated_rounds: &record.isolated_rounds,
        seed: record.params.seed,
        trial: record.trial,
        chain: None,
    };
    let mut rng = stream_rng(record.params.seed, record.trial, Stream::Aux);
    if delay == 1 {
        sync_suite(&view, plan, &mut rng, "sync")
    } else {
        bounded_suite(&view, plan, &mut rng, "bounded")
    }
}

/// Spans D used for Prism checks at each lattice round.
const PRISM_SPANS: [u32; 5] = [100, 250, 500, 1000, 2000];
// permanence needs all voter chains typical at once, which only happens at long spans
const PERMANENCE_SPANS: [u32; 8] = [250, 500, 1000, 1500, 1750, 2000, 2250, 2500];

/// Prism suites for one run: per-voter-chain longest-chain suites, proposer
/// leader quality, honest-leader inclusion and leader-sequence permanence.
pub fn prism_suite(record: &PrismRecord, plan: &ScanPlan) -> Vec<ImplicationReport> {
    let d = derive_unchecked(&record.params).expect("record params were validated at run time");
    let delay = record.params.delay;
    let store = &record.store;
    let end = record.end_round();
    let seed = record.params.seed;
    let trial = record.trial;
    let mut rng = stream_rng(seed, trial, Stream::Aux);
    let m = store.m();
    let counts: Vec<ChainCounts> = (0..=m).map(|j| ChainCounts::new(&record.trace, j as usize, delay)).collect();
    let g: Vec<TypicalIndex> = counts.iter().map(|c| TypicalIndex::for_g(c, &d)).collect();

    let mut voter_reports = Vec::new();
    for j in 1..=m {
        let tips: Vec<TipHistory> = record.tips.iter().map(|t| t[j as usize - 1].clone()).collect();
        let (unique, isolated) = marked_rounds(&record.trace, j as usize, delay);
        let view = ChainView {
            tree: store.tree(j),
            tips: &tips,
            end,
            counts: &counts[j as usize],
            derived: &d,
            delay,
            unique_rounds: &unique,
            isolated_rounds: &isolated,
            seed,
            trial,
            chain: Some(j),
        };
        voter_reports.push(if delay == 1 {
            sync_suite(&view, plan, &mut rng, "voter")
        } else {
            bounded_suite(&view, plan, &mut rng, "voter")
        });
    }
    let mut out = merge_reports(voter_reports);

    let cx = |s: u32, r: u32, detail: String| Counterexample { seed, trial, chain: Some(0), s, r, detail };
    let miners = record.miners();
    let rounds = plan.rounds(end);

    // proposer leader quality under G₀
    let mut lq = ImplicationReport::new("prism.leader_quality");
    for &r in &rounds {
        let views: Vec<Vec<BlockId>> = (0..miners).map(|i| record.leaders_at(i, r)).collect();
        for span in PRISM_SPANS {
            if span >= r {
                continue;
            }
            let s = r - span;
            let held = delay == 1 && g[0].holds(s, r);
            let k = (2.0 * d.q * f64::from(span)).ceil() as usize;
            for (i, leaders) in views.iter().enumerate() {
                let applies = held && leaders.len() > k && k > 0;
                lq.case(applies);
                if !applies {
                    continue;
                }
                let honest =
                    leaders[leaders.len() - k..].iter().filter(|&&b| store.block(b).kind == MinerKind::Honest).count();
                if honest as f64 <= d.xi / 2.0 * k as f64 {
                    lq.violate(cx(s, r, format!("miner {i}: {honest} honest of last {k} leaders")));
                }
            }
        }
    }
    out.push(lq);
    out.push(inclusion_report(record, &rounds, seed, trial));
    out.push(leader_permanence_report(record, &d, &g, &rounds, &mut rng, seed, trial));
    out
}

/// Every honest leader's ledger prefix contains every honest block its miner knew
/// when mining it. Checked once per distinct leader sequence seen at the given rounds.
fn inclusion_report(record: &PrismRecord, rounds: &[u32], seed: u64, trial: u64) -> ImplicationReport {
    let store = &record.store;
    let mut rep = ImplicationReport::new("prism.inclusion");
    let mut seen: HashSet<Vec<BlockId>> = HashSet::new();
    let honest_blocks: Vec<BlockId> =
        store.blocks().iter().filter(|b| b.kind == MinerKind::Honest && b.miner.is_some()).map(|b| b.id).collect();
    for &r in rounds {
        for i in 0..record.miners() {
            let leaders = record.leaders_at(i, r);
            if !seen.insert(leaders.clone()) {
                continue;
            }
            let known = |b: BlockId| record.knows(i, b, r);
            let ledger = build_ledger(store, &known, &leaders);
            let complete = ledger.epochs.len();
            let mut epoch = vec![u32::MAX; store.len()];
            for (e, blocks) in ledger.epochs.iter().enumerate() {
                for &b in blocks {
                    epoch[b as usize] = e as u32 + 1;
                }
            }
            // per leader miner: (level, R) with a running max of R
            let mut by_miner: Vec<Vec<(u32, u32)>> = vec![Vec::new(); record.miners() as usize];
            for (li, &lb) in leaders.iter().enumerate().take(complete) {
                let blk = store.block(lb);
                if let (MinerKind::Honest, Some(mm)) = (blk.kind, blk.miner) {
                    let v = &mut by_miner[mm as usize];
                    let run = v.last().map_or(blk.mined_round, |&(_, x)| x.max(blk.mined_round));
                    v.push((li as u32 + 1, run));
                }
            }
            for (mm, levels) in by_miner.iter().enumerate() {
                if levels.is_empty() {
                    continue;
                }
                rep.case(true);
                let kr = &record.known_round[mm];
                for &b in &honest_blocks {
                    let known_at = kr.get(b as usize).copied().unwrap_or(UNKNOWN);
                    if known_at == UNKNOWN {
                        continue;
                    }
                    let e = epoch[b as usize];
                    // honest leaders at levels below e
                    let n = levels.partition_point(|&(l, _)| l < e);
                    if n > 0 && levels[n - 1].1 >= known_at {
                        let (l, _) = levels[..n].iter().copied().find(|&(_, rr)| rr >= known_at).expect("running max");
                        rep.violate(Counterexample {
                            seed,
                            trial,
                            chain: Some(0),
                            s: known_at,
                            r,
                            detail: format!("view of miner {i}: block {b} missing from ledger through honest leader level {l}"),
                        });
                    }
                }
            }
        }
    }
    rep
}

/// `bad[l]`: last round some honest view's leader at a level ≤ l differed from
/// miner 0's final leader there; `end` when it never settled.
fn leader_bad_until(record: &PrismRecord) -> Vec<u32> {
    let end = record.end_round();
    let finals = record.leaders_at(0, end);
    let mut bad = vec![0u32; finals.len() + 1];
    for hist in &record.leaders {
        for (li, &f) in finals.iter().enumerate() {
            let b = match hist.get(li).and_then(|h| h.changes().last().copied()) {
                Some((r, leader)) if leader == f => r.saturating_sub(1),
                _ => end,
            };
            bad[li + 1] = bad[li + 1].max(b);
        }
    }
    for i in 1..bad.len() {
        bad[i] = bad[i].max(bad[i - 1]);
    }
    bad
}

/// If by round r every voter chain's k-deep prefix (in miner 0's view) ends at
/// or above an honest block mined after R_l that has voted every level up to l,
/// and G_j[s, r] holds on each voter chain with k ≥ 2q(r − s), the leader
/// sequence up to l never changes again in any honest view.
fn leader_permanence_report(
    record: &PrismRecord,
    d: &DerivedParams,
    g: &[TypicalIndex],
    rounds: &[u32],
    rng: &mut ChaCha8Rng,
    seed: u64,
    trial: u64,
) -> ImplicationReport {
    let store = &record.store;
    let m = store.m();
    let mut rep = ImplicationReport::new("prism.leader_permanence");
    let bad = leader_bad_until(record);
    let r_first: Vec<u32> =
        (0..bad.len() as u32).map(|l| store.first_round_at_level(l).unwrap_or(u32::MAX)).collect();
    let end = record.end_round();
    let mut points: Vec<(u32, u32)> = rounds.iter().flat_map(|&r| PERMANENCE_SPANS.map(|sp| (r, sp))).collect();
    for _ in 0..8 {
        let r = rng.random_range(2..=end);
        points.push((r, rng.random_range(1..r)));
    }
    for (r, span) in points {
        let k = (2.0 * d.q * f64::from(span)).ceil() as u32;
        let back = (f64::from(k) / (2.0 * d.q)).floor() as u32;
        if k == 0 || back >= r || f64::from(r) <= f64::from(k) / (2.0 * d.q) {
            continue;
        }
        let s = r - back;
        let typical = record.params.delay == 1 && (1..=m).all(|j| g[j as usize].holds(s, r.min(g[j as usize].hi())));
        // per chain: (mined round, voted-through level) of the highest honest block at or below the k-deep prefix tip
        let anchors: Vec<(u32, u32)> = (1..=m)
            .map(|j| {
                let tree = store.tree(j);
                let mut cur = tree.prefix_tip(record.tips[0][j as usize - 1].at(r), k);
                loop {
                    let blk = tree.get(cur);
                    if blk.kind == MinerKind::Honest {
                        let gid = store.global(j, cur);
                        return (blk.mined_round, store.voted(gid).upto());
                    }
                    cur = blk.parent.expect("genesis is honest");
                }
            })
            .collect();
        let levels = record.leaders_at(0, r).len().min(bad.len() - 1) as u32;
        for l in 1..=levels {
            let rl = r_first[l as usize];
            let antecedent = typical
                && r > rl.saturating_add(1)
                && anchors.iter().all(|&(mined, upto)| mined > rl && upto >= l);
            rep.case(antecedent);
            if antecedent && bad[l as usize] >= r {
                rep.violate(Counterexample {
                    seed,
                    trial,
                    chain: Some(0),
                    s,
                    r,
                    detail: format!("k={k}: leaders through level {l} change again in round {}", bad[l as usize]),
                });
            }
        }
    }
    rep
}

/// Confirmation latency of every honest block's transaction, sampled every `step`
/// rounds: rounds from mining until the first sample point after which it is in
/// every honest view's ledger at every later sample point. `None` if that never happens.
pub fn tx_latencies(record: &PrismRecord, step: u32) -> Vec<(u64, Option<u32>)> {
    let store = &record.store;
    let end = record.end_round();
    let points: Vec<u32> = ScanPlan { step, random: 0 }.rounds(end);
    // last sample point at which each block was missing from some view
    let mut missing_until = vec![0u32; store.len()];
    let mut cache: std::collections::HashMap<Vec<BlockId>, FixedLedger> = std::collections::HashMap::new();
    for &r in &points {
        for i in 0..record.miners() {
            let leaders = record.leaders_at(i, r);
            let entry = cache.entry(leaders.clone()).or_insert_with(|| {
                let known = |b: BlockId| record.knows(i, b, r);
                let ledger = build_ledger(store, &known, &leaders);
                let mut inside = vec![false; store.len()];
                for &b in ledger.epochs.iter().flatten() {
                    inside[b as usize] = true;
                }
                FixedLedger { inside }
            });
            for (b, slot) in missing_until.iter_mut().enumerate() {
                if !entry.inside[b] {
                    *slot = r;
                }
            }
        }
    }
    store
        .blocks()
        .iter()
        .filter(|b| b.kind == MinerKind::Honest && !b.payload.is_empty())
        .map(|b| {
            let miss = missing_until[b.id as usize];
            let latency = if miss >= end {
                None
            } else {
                points.iter().find(|&&p| p > miss && p > b.mined_round).map(|&p| p - b.mined_round)
            };
            (b.payload[0].id, latency)
        })
        .collect()
}

struct FixedLedger {
    inside: Vec<bool>,
}

/// Latency of one transaction; `None` if it is unknown or never settles.
pub fn tx_latency(record: &PrismRecord, tx: u64, step: u32) -> Option<u32> {
    tx_latencies(record, step).into_iter().find(|&(id, _)| id == tx).and_then(|(_, l)| l)
}

/// Sync suite over a hand-built run that breaks every property: a periodic
/// trace keeps G true on long windows while the tree stalls and then reorganizes
/// deeply. Every report should carry violations.
pub fn planted_fixture_reports() -> Vec<ImplicationReport> {
    let horizon = 600;
    let h: Vec<u32> = (1..=horizon).map(|r| u32::from(r % 10 == 0)).collect();
    let trace = crate::trace::Trace::from_rounds(75, 25, h, vec![0; horizon as usize]);
    let params = ProtocolParams { n: 100, t: 25, p: crate::params::p_for_q(100, 25, 0.1), delay: 1, m: 1, horizon, seed: 0 };
    let d = derive_unchecked(&params).expect("fixture params are valid");
    let mut t = BlockTree::new();
    let _h1 = t.push(GENESIS, MinerKind::Honest, 10, Vec::new());
    let h2 = t.push(GENESIS, MinerKind::Honest, 20, Vec::new());
    let mut a = GENESIS;
    for _ in 0..100 {
        a = t.push(a, MinerKind::Adversarial, 500, Vec::new());
    }
    let mut b = GENESIS;
    for _ in 0..101 {
        b = t.push(b, MinerKind::Adversarial, 540, Vec::new());
    }
    let tips = vec![TipHistory::from_changes(vec![(1, GENESIS), (21, h2), (300, a), (550, b)])];
    let counts = ChainCounts::new(&trace, 0, 1);
    let view = ChainView {
        tree: &t,
        tips: &tips,
        end: horizon + 1,
        counts: &counts,
        derived: &d,
        delay: 1,
        unique_rounds: &[10],
        isolated_rounds: &[],
        seed: 0,
        trial: 0,
        chain: None,
    };
    let mut rng = stream_rng(0, 0, Stream::Aux);
    sync_suite(&view, &ScanPlan { step: 50, random: 5 }, &mut rng, "fixture")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tree_with(kinds: &[MinerKind]) -> (BlockTree, Vec<BlockId>) {
        let mut t = BlockTree::new();
        let mut chain = vec![GENESIS];
        for &k in kinds {
            let id = t.push(*chain.last().unwrap(), k, chain.len() as u32, Vec::new());
            chain.push(id);
        }
        (t, chain)
    }

    #[test]
    fn quality_examples() {
        use MinerKind::{Adversarial as A, Honest as H};
        let (t, c) = tree_with(&[H; 6]);
        assert_eq!(chain_quality(&t, &c, 6), Some(1.0));
        let (t, c) = tree_with(&[H, A, H, A, H, A]);
        assert_eq!(chain_quality(&t, &c, 4), Some(0.5));
        let (t, c) = tree_with(&[H, H, A, H, A, A, H, A, A, H, A]);
        assert_eq!(chain_quality(&t, &c, 8), Some(0.375));
        assert_eq!(chain_quality(&t, &c, c.len()), None);
    }

    #[test]
    fn prefix_basics() {
        let a = [0, 3, 5];
        assert!(is_prefix(&[0], &a));
        assert!(is_prefix(&a, &a));
        assert!(!is_prefix(&[0, 4], &a));
        assert!(!is_prefix(&a, &a[..2]));
    }

    /// Two miners; miner 1 moves to a fork that drops block 2 at round 57.
    fn fork_fixture() -> (BlockTree, Vec<TipHistory>) {
        let mut t = BlockTree::new();
        let b1 = t.push(0, MinerKind::Honest, 1, Vec::new());
        let b2 = t.push(b1, MinerKind::Honest, 2, Vec::new());
        let f2 = t.push(b1, MinerKind::Adversarial, 2, Vec::new());
        let f3 = t.push(f2, MinerKind::Adversarial, 3, Vec::new());
        let mut h0 = TipHistory::new(0);
        h0.record(3, b2);
        let mut h1 = TipHistory::new(0);
        h1.record(3, b2);
        h1.record(57, f3);
        (t, vec![h0, h1])
    }

    #[test]
    fn permanence_break_round() {
        let (t, tips) = fork_fixture();
        assert_eq!(permanence_scan(&t, &tips, 100, &[0, 1, 2], 10), Err(57));
        assert_eq!(permanence_scan(&t, &tips, 100, &[0, 1], 10), Ok(()));
        assert_eq!(permanence_scan(&t, &tips, 56, &[0, 1, 2], 3), Ok(()));
        assert_eq!(permanence_scan(&t, &tips, 100, &[0], 1), Ok(()));
        let idx = PermanenceIndex::new(&t, &tips, 100);
        assert!(idx.permanent_from(&t, 1, 3));
        assert!(!idx.permanent_from(&t, 1, 2));
        assert!(!idx.permanent_from(&t, 2, 90));
        assert_eq!(max_reorg_depth(&t, &tips), 1);
    }

    #[test]
    fn permanence_index_matches_scan() {
        let (t, tips) = fork_fixture();
        for b in 0..t.len() as BlockId {
            for from in 1..=100 {
                let scan = permanence_scan(&t, &tips, 100, &t.chain(b), from).is_ok();
                let idx = PermanenceIndex::new(&t, &tips, 100).permanent_from(&t, b, from);
                assert_eq!(scan, idx, "block {b} from {from}");
            }
        }
    }

    #[test]
    fn wilson_examples() {
        let (lo, hi) = wilson(50, 100, Z99);
        assert!(lo < 0.5 && hi > 0.5 && (0.5 - lo - (hi - 0.5)).abs() < 1e-12);
        let (lo, hi) = wilson(1000, 1000, Z99);
        // all-success closed form: n / (n + z²)
        assert!((lo - 1000.0 / (1000.0 + Z99 * Z99)).abs() < 1e-12 && hi > 1.0 - 1e-12);
        assert_eq!(wilson(0, 0, Z99), (0.0, 1.0));
    }

    #[test]
    fn frequency_needs_trials() {
        let p = ProtocolParams { n: 3, t: 1, p: 0.3, delay: 1, m: 1, horizon: 4, seed: 0 };
        let mut rng = stream_rng(0, 0, Stream::Aux);
        assert!(matches!(event_frequency(EventId::E, 4, &p, 10, &mut rng), Err(MetricsError::TooFewTrials(10))));
        let rep = event_frequency(EventId::E, 4, &p, 1000, &mut rng).unwrap();
        assert!(rep.vacuous);
    }

    #[test]
    fn planted_violations_are_found() {
        let reps = planted_fixture_reports();
        assert_eq!(reps.len(), 6);
        for r in &reps {
            assert!(r.held > 0, "{}: antecedent never held", r.theorem);
            assert!(r.violations > 0, "{}: planted violation missed", r.theorem);
            assert!(!r.counterexamples.is_empty());
        }
    }
}
