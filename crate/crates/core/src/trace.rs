//! Mining traces, the counting processes over them, and the typical-event
//! predicates E, F, G and J.
//!
//! Intervals are half-open: `[s, r)` covers rounds `s..=r-1`. Rounds are 1-based.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{DerivedParams, ProtocolParams};

/// Purpose tags for the per-trial ChaCha8 streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Trace = 0,
    Honest = 1,
    Adversary = 2,
    Aux = 3,
}

/// ChaCha8 keyed by `seed`, on stream `4 * trial + purpose`. ChaCha is a
/// counter-mode generator, so every (seed, trial, purpose) triple is an
/// independent, position-addressable sequence regardless of thread layout.
pub fn stream_rng(seed: u64, trial: u64, purpose: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial.wrapping_mul(4).wrapping_add(purpose as u64));
    rng
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TraceError {
    #[error("trace length {len} exceeds horizon {horizon}")]
    TooLong { len: u32, horizon: u32 },
    #[error("interval [{s}, {r}) out of range for {what}")]
    Interval { s: u32, r: u32, what: &'static str },
    #[error("window of length {got} does not match expected {want}")]
    Window { got: usize, want: usize },
    #[error("chain {0} out of range")]
    Chain(usize),
    #[error("trace text: {0}")]
    Parse(String),
}

/// Per-round honest counts `h` and adversarial budgets `z` for each chain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    pub honest_miners: u32,
    pub adversarial_miners: u32,
    /// `h[j][r - 1]`
    pub h: Vec<Vec<u32>>,
    /// `z[j][r - 1]`
    pub z: Vec<Vec<u32>>,
}

impl Trace {
    pub fn chains(&self) -> usize {
        self.h.len()
    }

    pub fn len(&self) -> u32 {
        self.h.first().map_or(0, |c| c.len() as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn h_at(&self, j: usize, round: u32) -> u32 {
        self.h[j][(round - 1) as usize]
    }

    pub fn z_at(&self, j: usize, round: u32) -> u32 {
        self.z[j][(round - 1) as usize]
    }

    /// Builds a one-chain trace from explicit values (fixtures, oracles).
    pub fn from_rounds(honest_miners: u32, adversarial_miners: u32, h: Vec<u32>, z: Vec<u32>) -> Self {
        assert_eq!(h.len(), z.len());
        Self { honest_miners, adversarial_miners, h: vec![h], z: vec![z] }
    }

    /// Columnar text: a header line then `round chain h z` rows.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "# chainlab-trace v1 honest={} adversarial={}\nround chain h z\n",
            self.honest_miners, self.adversarial_miners
        );
        for r in 1..=self.len() {
            for j in 0..self.chains() {
                let _ = writeln!(out, "{} {} {} {}", r, j, self.h_at(j, r), self.z_at(j, r));
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, TraceError> {
        let bad = |msg: String| TraceError::Parse(msg);
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| bad("empty input".into()))?;
        let mut honest = None;
        let mut adversarial = None;
        for tok in header.split_whitespace() {
            if let Some(v) = tok.strip_prefix("honest=") {
                honest = v.parse::<u32>().ok();
            } else if let Some(v) = tok.strip_prefix("adversarial=") {
                adversarial = v.parse::<u32>().ok();
            }
        }
        let (honest, adversarial) = match (honest, adversarial) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(bad(format!("bad header: {header}"))),
        };
        match lines.next() {
            Some(l) if l.split_whitespace().collect::<Vec<_>>() == ["round", "chain", "h", "z"] => {}
            other => return Err(bad(format!("bad column line: {other:?}"))),
        }
        let mut rows: Vec<(u32, usize, u32, u32)> = Vec::new();
        for (i, line) in lines.enumerate() {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 4 {
                return Err(bad(format!("row {}: expected 4 fields", i + 1)));
            }
            let num = |s: &str| s.parse::<u64>().map_err(|e| bad(format!("row {}: {e}", i + 1)));
            rows.push((num(f[0])? as u32, num(f[1])? as usize, num(f[2])? as u32, num(f[3])? as u32));
        }
        let chains = rows.iter().map(|r| r.1 + 1).max().unwrap_or(0);
        let rounds = rows.iter().map(|r| r.0).max().unwrap_or(0);
        if rows.len() != chains * rounds as usize {
            return Err(bad("rows do not form a full round x chain grid".into()));
        }
        let mut h = vec![vec![0; rounds as usize]; chains];
        let mut z = vec![vec![0; rounds as usize]; chains];
        let mut seen = vec![vec![false; rounds as usize]; chains];
        for (r, j, hv, zv) in rows {
            if r == 0 {
                return Err(bad("rounds are 1-based".into()));
            }
            if hv > honest || zv > adversarial {
                return Err(bad(format!("round {r} chain {j}: count above miner total")));
            }
            let slot = &mut seen[j][(r - 1) as usize];
            if *slot {
                return Err(bad(format!("duplicate row for round {r} chain {j}")));
            }
            *slot = true;
            h[j][(r - 1) as usize] = hv;
            z[j][(r - 1) as usize] = zv;
        }
        Ok(Self { honest_miners: honest, adversarial_miners: adversarial, h, z })
    }
}

/// Draws `length` rounds for `chains` independent chains: h ~ Bin(n−t, p), z ~ Bin(t, p).
pub fn sample_trace(
    params: &ProtocolParams,
    chains: usize,
    rng: &mut ChaCha8Rng,
    length: u32,
) -> Result<Trace, TraceError> {
    if length > params.horizon {
        return Err(TraceError::TooLong { len: length, horizon: params.horizon });
    }
    let honest = params.n - params.t;
    let hb = Binomial::new(u64::from(honest), params.p).expect("p validated");
    let zb = Binomial::new(u64::from(params.t), params.p).expect("p validated");
    let mut h = vec![Vec::with_capacity(length as usize); chains];
    let mut z = vec![Vec::with_capacity(length as usize); chains];
    for _ in 0..length {
        for j in 0..chains {
            h[j].push(hb.sample(rng) as u32);
            z[j].push(zb.sample(rng) as u32);
        }
    }
    Ok(Trace { honest_miners: honest, adversarial_miners: params.t, h, z })
}

/// Interval totals X, Y, Z, X′, Y′ for one chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntervalCounts {
    pub x: u64,
    pub y: u64,
    pub z: u64,
    /// Present when s ≥ T.
    pub xp: Option<u64>,
    /// Present when s ≥ T and r ≤ len − T + 2.
    pub yp: Option<u64>,
}

fn left_isolated(h: &[u32], i: usize, delay: usize) -> bool {
    // i is a 0-based round index with i + 1 >= delay
    h[i] == 1 && h[i + 1 - delay..i].iter().all(|&v| v == 0)
}

fn doubly_isolated(h: &[u32], i: usize, delay: usize) -> bool {
    left_isolated(h, i, delay) && h[i + 1..i + delay].iter().all(|&v| v == 0)
}

/// Direct evaluation of the counting processes over `[s, r)`.
pub fn interval_counts(trace: &Trace, j: usize, s: u32, r: u32, delay: u32) -> Result<IntervalCounts, TraceError> {
    if j >= trace.chains() {
        return Err(TraceError::Chain(j));
    }
    let len = trace.len();
    if s < 1 || s >= r || r > len + 1 {
        return Err(TraceError::Interval { s, r, what: "X/Y/Z" });
    }
    let h = &trace.h[j];
    let z = &trace.z[j];
    let (lo, hi) = ((s - 1) as usize, (r - 1) as usize);
    let x = h[lo..hi].iter().filter(|&&v| v >= 1).count() as u64;
    let y = h[lo..hi].iter().filter(|&&v| v == 1).count() as u64;
    let zs = z[lo..hi].iter().map(|&v| u64::from(v)).sum();
    let d = delay as usize;
    let xp = (s >= delay).then(|| (lo..hi).filter(|&i| left_isolated(h, i, d)).count() as u64);
    let yp = (s >= delay && u64::from(r) + u64::from(delay) <= u64::from(len) + 2)
        .then(|| (lo..hi).filter(|&i| doubly_isolated(h, i, d)).count() as u64);
    Ok(IntervalCounts { x, y, z: zs, xp, yp })
}

/// x(h_{s−T+1}, …, h_{r−1}): count of T-left-isolated unit entries among the
/// last `span` coordinates. Inputs are arbitrary reals; indicators test exact equality.
pub fn x_func(window: &[f64], delay: u32, span: u32) -> Result<u32, TraceError> {
    let d = delay as usize;
    let want = span as usize + d - 1;
    if span == 0 || window.len() != want {
        return Err(TraceError::Window { got: window.len(), want });
    }
    Ok((0..span as usize)
        .filter(|&u| {
            let i = u + d - 1;
            window[i] == 1.0 && window[u..i].iter().all(|&v| v == 0.0)
        })
        .count() as u32)
}

/// y(h_{s−T+1}, …, h_{r+T−2}): count of T-doubly-isolated unit entries.
pub fn y_func(window: &[f64], delay: u32, span: u32) -> Result<u32, TraceError> {
    let d = delay as usize;
    let want = span as usize + 2 * d - 2;
    if span == 0 || window.len() != want {
        return Err(TraceError::Window { got: window.len(), want });
    }
    Ok((0..span as usize)
        .filter(|&u| {
            let i = u + d - 1;
            window[i] == 1.0
                && window[u..i].iter().all(|&v| v == 0.0)
                && window[i + 1..i + d].iter().all(|&v| v == 0.0)
        })
        .count() as u32)
}

/// Margin a count must clear its real threshold by. Counts are integers, so this
/// only decides exact and near ties, and it decides them as failures; without it
/// the direct and indexed evaluations round ties differently.
pub const TIE_GUARD: f64 = 1e-6;

fn above(count: f64, threshold: f64) -> bool {
    count - threshold > TIE_GUARD
}

fn below(count: f64, threshold: f64) -> bool {
    threshold - count > TIE_GUARD
}

/// Which of E₁, E₂, E₃ hold for the given counts over an interval of length `span`.
pub fn e_parts(c: &IntervalCounts, span: u32, d: &DerivedParams) -> [bool; 3] {
    let len = f64::from(span);
    let ex = d.q * len;
    let (x, y, z) = (c.x as f64, c.y as f64, c.z as f64);
    let dev = d.xi / 6.0;
    [
        above(x, (1.0 - dev) * ex) && below(x, (1.0 + dev) * ex),
        above(y, (1.0 - dev) * d.y_rate * len),
        below(z, d.pt() * len + dev * ex),
    ]
}

/// Closed-form expectations used inside F: (𝔼[X′], 𝔼[Y′]) lower-bound forms.
fn iso_expectations(d: &DerivedParams, delay: u32, len: f64) -> (f64, f64) {
    let lm = (-d.q).ln_1p();
    let t = f64::from(delay);
    (d.q * (t * lm).exp() * len, d.q * ((2.0 * t - 1.0) * lm).exp() * len)
}

/// Which of F₁..F₄ hold. X′/Y′ must be present.
pub fn f_parts(c: &IntervalCounts, span: u32, d: &DerivedParams, delay: u32) -> [bool; 4] {
    let len = f64::from(span);
    let (exp_x, exp_y) = iso_expectations(d, delay, len);
    let dev = d.xi / 20.0;
    let xp = c.xp.expect("X' requires s >= T") as f64;
    let yp = c.yp.expect("Y' requires r <= len - T + 2") as f64;
    [
        above(xp, (1.0 - dev) * exp_x),
        below(c.x as f64, (1.0 + dev) * d.q * len),
        above(yp, (1.0 - dev) * exp_y),
        below(c.z as f64, d.pt() * len + dev * exp_x),
    ]
}

/// E[s, r] on chain `j`.
pub fn event_e(trace: &Trace, j: usize, s: u32, r: u32, d: &DerivedParams) -> Result<bool, TraceError> {
    let c = interval_counts(trace, j, s, r, 1)?;
    Ok(e_parts(&c, r - s, d).iter().all(|&b| b))
}

/// F[s, r] on chain `j` at delay T.
pub fn event_f(trace: &Trace, j: usize, s: u32, r: u32, d: &DerivedParams, delay: u32) -> Result<bool, TraceError> {
    let c = interval_counts(trace, j, s, r, delay)?;
    if c.xp.is_none() || c.yp.is_none() {
        return Err(TraceError::Interval { s, r, what: "F" });
    }
    Ok(f_parts(&c, r - s, d, delay).iter().all(|&b| b))
}

/// Prefix sums of every counting process for one chain; O(1) interval queries.
#[derive(Debug, Clone)]
pub struct ChainCounts {
    delay: u32,
    len: u32,
    // index i holds the sum over rounds 1..i-1 (X, Y, Z) or T..i-1 (X', Y')
    px: Vec<u64>,
    py: Vec<u64>,
    pz: Vec<u64>,
    pxp: Vec<u64>,
    pyp: Vec<u64>,
}

impl ChainCounts {
    pub fn new(trace: &Trace, j: usize, delay: u32) -> Self {
        let h = &trace.h[j];
        let z = &trace.z[j];
        let len = h.len();
        let d = delay as usize;
        let mut px = vec![0u64; len + 2];
        let mut py = vec![0u64; len + 2];
        let mut pz = vec![0u64; len + 2];
        let mut pxp = vec![0u64; len + 2];
        let mut pyp = vec![0u64; len + 2];
        for i in 0..len {
            px[i + 2] = px[i + 1] + u64::from(h[i] >= 1);
            py[i + 2] = py[i + 1] + u64::from(h[i] == 1);
            pz[i + 2] = pz[i + 1] + u64::from(z[i]);
            let round = i + 1;
            let xi = round >= d && left_isolated(h, i, d);
            pxp[i + 2] = pxp[i + 1] + u64::from(xi);
            let yi = xi && i + d <= len && h[i + 1..i + d].iter().all(|&v| v == 0);
            pyp[i + 2] = pyp[i + 1] + u64::from(yi);
        }
        Self { delay, len: len as u32, px, py, pz, pxp, pyp }
    }

    pub fn len(&self) -> u32 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn delay(&self) -> u32 {
        self.delay
    }

    /// Largest r for which Y′[s, r] is defined.
    pub fn yp_limit(&self) -> u32 {
        (self.len + 2).saturating_sub(self.delay)
    }

    pub fn x(&self, s: u32, r: u32) -> u64 {
        self.px[r as usize] - self.px[s as usize]
    }
    pub fn y(&self, s: u32, r: u32) -> u64 {
        self.py[r as usize] - self.py[s as usize]
    }
    pub fn z(&self, s: u32, r: u32) -> u64 {
        self.pz[r as usize] - self.pz[s as usize]
    }
    pub fn xp(&self, s: u32, r: u32) -> u64 {
        self.pxp[r as usize] - self.pxp[s as usize]
    }
    pub fn yp(&self, s: u32, r: u32) -> u64 {
        self.pyp[r as usize] - self.pyp[s as usize]
    }

    pub fn counts(&self, s: u32, r: u32) -> Result<IntervalCounts, TraceError> {
        if s < 1 || s >= r || r > self.len + 1 {
            return Err(TraceError::Interval { s, r, what: "X/Y/Z" });
        }
        let iso = s >= self.delay;
        Ok(IntervalCounts {
            x: self.x(s, r),
            y: self.y(s, r),
            z: self.z(s, r),
            xp: iso.then(|| self.xp(s, r)),
            yp: (iso && r <= self.yp_limit()).then(|| self.yp(s, r)),
        })
    }

    pub fn e_holds(&self, s: u32, r: u32, d: &DerivedParams) -> bool {
        let c = self.counts(s, r).expect("interval in range");
        e_parts(&c, r - s, d).iter().all(|&b| b)
    }

    pub fn f_holds(&self, s: u32, r: u32, d: &DerivedParams) -> bool {
        let c = self.counts(s, r).expect("interval in range");
        f_parts(&c, r - s, d, self.delay).iter().all(|&b| b)
    }
}

/// G_trunc[s, r]: E over every [s−a, r+b] with 0 ≤ a < s and r+b ≤ len. Brute force.
pub fn event_g_trunc(trace: &Trace, j: usize, s: u32, r: u32, d: &DerivedParams) -> Result<bool, TraceError> {
    let len = trace.len();
    if s < 1 || s >= r || r > len {
        return Err(TraceError::Interval { s, r, what: "G" });
    }
    let cc = ChainCounts::new(trace, j, 1);
    Ok((1..=s).all(|s2| (r..=len).all(|r2| cc.e_holds(s2, r2, d))))
}

/// J_trunc[s, r]: F over every [s−a, r+b] with 0 ≤ a ≤ s−T and r+b within the
/// range where Y′ is defined. Brute force.
pub fn event_j_trunc(
    trace: &Trace,
    j: usize,
    s: u32,
    r: u32,
    d: &DerivedParams,
    delay: u32,
) -> Result<bool, TraceError> {
    let cc = ChainCounts::new(trace, j, delay);
    let hi = cc.yp_limit().min(trace.len());
    if s < delay || s >= r || r > hi {
        return Err(TraceError::Interval { s, r, what: "J" });
    }
    Ok((delay..=s).all(|s2| (r..=hi).all(|r2| cc.f_holds(s2, r2, d))))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    /// fails iff sum ≤ c·len
    Lower,
    /// fails iff sum ≥ c·len
    Upper,
}

/// O(1) evaluation of G_trunc / J_trunc for every (s, r) of one chain.
///
/// Each one-sided condition `S[s', r'] ⋚ c(r' − s')` fails somewhere in the
/// family iff `A[r'] ⋚ A[s']` for some admissible pair, with `A[i] = P[i] − c·i`.
/// That reduces to comparing a prefix extremum over s' with a suffix extremum over r'.
#[derive(Debug, Clone)]
pub struct TypicalIndex {
    lo: u32,
    hi: u32,
    sides: Vec<Side>,
    // [cond][i] for i in lo..=hi, offset by lo
    prefix: Vec<Vec<f64>>,
    suffix: Vec<Vec<f64>>,
}

impl TypicalIndex {
    fn build(lo: u32, hi: u32, conds: Vec<(Side, Vec<f64>)>) -> Self {
        if lo > hi {
            return Self { lo, hi, sides: Vec::new(), prefix: Vec::new(), suffix: Vec::new() };
        }
        let n = (hi - lo + 1) as usize;
        let mut sides = Vec::new();
        let mut prefix = Vec::new();
        let mut suffix = Vec::new();
        for (side, a) in conds {
            debug_assert_eq!(a.len(), n);
            let mut pre = a.clone();
            let mut suf = a;
            for i in 1..n {
                pre[i] = match side {
                    Side::Lower => pre[i].max(pre[i - 1]),
                    Side::Upper => pre[i].min(pre[i - 1]),
                };
            }
            for i in (0..n.saturating_sub(1)).rev() {
                suf[i] = match side {
                    Side::Lower => suf[i].min(suf[i + 1]),
                    Side::Upper => suf[i].max(suf[i + 1]),
                };
            }
            sides.push(side);
            prefix.push(pre);
            suffix.push(suf);
        }
        Self { lo, hi, sides, prefix, suffix }
    }

    /// Index for G_trunc: s' ≥ 1, r' ≤ len.
    pub fn for_g(cc: &ChainCounts, d: &DerivedParams) -> Self {
        let (lo, hi) = (1, cc.len());
        let dev = d.xi / 6.0;
        let line = |p: &dyn Fn(u32) -> u64, c: f64| -> Vec<f64> {
            (lo..=hi).map(|i| p(i) as f64 - c * f64::from(i)).collect()
        };
        let conds = vec![
            (Side::Lower, line(&|i| cc.px[i as usize], (1.0 - dev) * d.q)),
            (Side::Upper, line(&|i| cc.px[i as usize], (1.0 + dev) * d.q)),
            (Side::Lower, line(&|i| cc.py[i as usize], (1.0 - dev) * d.y_rate)),
            (Side::Upper, line(&|i| cc.pz[i as usize], d.pt() + dev * d.q)),
        ];
        Self::build(lo, hi, conds)
    }

    /// Index for J_trunc at the delay `cc` was built with: s' ≥ T, r' ≤ min(len, len−T+2).
    pub fn for_j(cc: &ChainCounts, d: &DerivedParams) -> Self {
        let delay = cc.delay();
        let (lo, hi) = (delay, cc.yp_limit().min(cc.len()));
        let lm = (-d.q).ln_1p();
        let t = f64::from(delay);
        let rate_xp = d.q * (t * lm).exp();
        let rate_yp = d.q * ((2.0 * t - 1.0) * lm).exp();
        let dev = d.xi / 20.0;
        let line = |p: &dyn Fn(u32) -> u64, c: f64| -> Vec<f64> {
            (lo..=hi).map(|i| p(i) as f64 - c * f64::from(i)).collect()
        };
        if lo > hi {
            return Self::build(lo, hi, Vec::new());
        }
        let conds = vec![
            (Side::Lower, line(&|i| cc.pxp[i as usize], (1.0 - dev) * rate_xp)),
            (Side::Upper, line(&|i| cc.px[i as usize], (1.0 + dev) * d.q)),
            (Side::Lower, line(&|i| cc.pyp[i as usize], (1.0 - dev) * rate_yp)),
            (Side::Upper, line(&|i| cc.pz[i as usize], d.pt() + dev * rate_xp)),
        ];
        Self::build(lo, hi, conds)
    }

    /// Smallest admissible s'.
    pub fn lo(&self) -> u32 {
        self.lo
    }

    /// Largest admissible r'.
    pub fn hi(&self) -> u32 {
        self.hi
    }

    /// Whether the typical event over all intervals containing [s, r) holds.
    /// Out-of-range queries return false.
    pub fn holds(&self, s: u32, r: u32) -> bool {
        if s < self.lo || s >= r || r > self.hi {
            return false;
        }
        let si = (s - self.lo) as usize;
        let ri = (r - self.lo) as usize;
        self.sides.iter().enumerate().all(|(k, side)| {
            let a_s = self.prefix[k][si];
            let a_r = self.suffix[k][ri];
            match side {
                Side::Lower => a_r - a_s > TIE_GUARD,
                Side::Upper => a_s - a_r > TIE_GUARD,
            }
        })
    }
}

/// The five typical-execution inequalities, evaluated on counts.
pub fn typical_properties(c: &IntervalCounts, span: u32, d: &DerivedParams) -> [bool; 5] {
    let len = f64::from(span);
    let qs = d.q * len;
    let xi = d.xi;
    let (x, y, z) = (c.x as f64, c.y as f64, c.z as f64);
    [
        (1.0 - xi / 6.0) * qs < x && x < (1.0 + xi / 6.0) * qs,
        y > (1.0 - xi / 3.0) * qs,
        z < (1.0 - 2.0 * xi / 3.0) * qs,
        z < (1.0 - xi / 2.0) * x,
        z < y,
    ]
}

/// The six bounded-delay inequalities for [s, r).
/// `None` when a window they read falls outside the trace.
pub fn async_properties(cc: &ChainCounts, s: u32, r: u32, d: &DerivedParams) -> Option<[bool; 6]> {
    let delay = cc.delay();
    if s <= delay || s >= r || r + delay > cc.len() + 1 || r > cc.yp_limit() {
        return None;
    }
    let len = f64::from(r - s);
    let q = d.q;
    let xi = d.xi;
    let xp = cc.xp(s, r) as f64;
    let yp = cc.yp(s, r) as f64;
    let rate_xp = q * (f64::from(delay) * (-q).ln_1p()).exp();
    Some([
        (1.0 - xi / 20.0) * rate_xp * len < xp,
        (cc.x(s, r) as f64) < (1.0 + xi / 20.0) * q * len,
        (1.0 - xi / 3.0) * q * len < yp,
        (cc.z(s, r) as f64) < (1.0 - 2.0 * xi / 3.0) * q * len,
        (cc.z(s, r + delay) as f64) < (1.0 - xi / 2.0) * xp,
        (cc.z(s - delay, r + delay) as f64) < yp,
    ])
}

/// Marginal fast path: interval totals (X, Y, Z) drawn directly from their
/// exact Binomial laws, Bin(span, q), Bin(span, y_rate), Bin(t·span, p).
/// Valid only when the three are consumed separately.
pub fn sample_marginals(d: &DerivedParams, span: u32, rng: &mut ChaCha8Rng) -> (u64, u64, u64) {
    let x = Binomial::new(u64::from(span), d.q).expect("q in [0,1]").sample(rng);
    let y = Binomial::new(u64::from(span), d.y_rate).expect("y_rate in [0,1]").sample(rng);
    let z = Binomial::new(u64::from(d.t) * u64::from(span), d.p).expect("p in (0,1)").sample(rng);
    (x, y, z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::derive;

    fn fixture(h: &[u32]) -> Trace {
        Trace::from_rounds(10, 3, h.to_vec(), vec![0; h.len()])
    }

    #[test]
    fn xy_counts_fixture() {
        let t = fixture(&[1, 0, 2, 1]);
        let c = interval_counts(&t, 0, 1, 5, 1).unwrap();
        assert_eq!((c.x, c.y), (3, 2));
    }

    #[test]
    fn isolated_counts_fixture() {
        let t = fixture(&[0, 1, 0, 0, 1, 0]);
        let c = interval_counts(&t, 0, 2, 6, 2).unwrap();
        assert_eq!((c.xp, c.yp), (Some(2), Some(2)));
    }

    #[test]
    fn delay_one_isolation_is_y() {
        let t = fixture(&[1, 0, 2, 1, 1, 0, 3, 1]);
        for s in 1..8 {
            for r in s + 1..=9 {
                let c = interval_counts(&t, 0, s, r, 1).unwrap();
                assert_eq!(c.xp, Some(c.y));
                assert_eq!(c.yp, Some(c.y));
            }
        }
    }

    #[test]
    fn x_func_examples() {
        assert_eq!(x_func(&[0.0; 4], 2, 3).unwrap(), 0);
        assert_eq!(y_func(&[0.0; 5], 2, 3).unwrap(), 0);
        assert_eq!(x_func(&[0.0, 1.0], 2, 1).unwrap(), 1);
        assert_eq!(x_func(&[0.0, 1.0, 0.0], 2, 2).unwrap(), 1);
        assert!(x_func(&[0.0, 1.0, 0.0], 2, 1).is_err());
    }

    #[test]
    fn prefix_counts_match_direct() {
        let h = [0, 1, 0, 0, 1, 0, 2, 1, 0, 0, 1, 0, 0, 0, 1];
        let z = [1, 0, 0, 2, 0, 0, 1, 0, 0, 0, 0, 3, 0, 0, 1];
        let t = Trace::from_rounds(10, 3, h.to_vec(), z.to_vec());
        for delay in 1..=3 {
            let cc = ChainCounts::new(&t, 0, delay);
            for s in 1..=15 {
                for r in s + 1..=16 {
                    assert_eq!(cc.counts(s, r).unwrap(), interval_counts(&t, 0, s, r, delay).unwrap());
                }
            }
        }
    }

    #[test]
    fn forced_double_rate_breaks_e1() {
        let d = derive(&ProtocolParams { n: 100, t: 25, p: 0.001, delay: 1, m: 1, horizon: 100, seed: 0 }).unwrap();
        // q ≈ 0.072; force X = 2q·len over 100 rounds
        let len = 100usize;
        let target = (2.0 * d.q * len as f64).round() as usize;
        let h: Vec<u32> = (0..len).map(|i| u32::from(i < target)).collect();
        let t = Trace::from_rounds(75, 25, h, vec![0; len]);
        assert!(!event_e(&t, 0, 1, 101, &d).unwrap());
    }

    #[test]
    fn text_round_trip() {
        let t = Trace { honest_miners: 5, adversarial_miners: 2, h: vec![vec![1, 0, 3], vec![0, 0, 1]], z: vec![vec![0, 2, 1], vec![1, 0, 0]] };
        let back = Trace::from_text(&t.to_text()).unwrap();
        assert_eq!(t, back);
        assert!(Trace::from_text("# chainlab-trace v1 honest=1 adversarial=1\nround chain h z\n1 0 2 0\n").is_err());
    }
}
