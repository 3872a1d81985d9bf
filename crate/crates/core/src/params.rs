//! Protocol parameters and the constants derived from them.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Raw protocol parameters. All miners hold equal hash power.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolParams {
    /// Total miner count.
    pub n: u32,
    /// Adversarial miner count.
    pub t: u32,
    /// Per-miner, per-round success probability.
    pub p: f64,
    /// Maximum propagation delay in rounds; 1 is the synchronous model.
    #[serde(rename = "T")]
    pub delay: u32,
    /// Number of voter chains (Prism only).
    pub m: u32,
    /// Last simulated round.
    pub horizon: u32,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParamError {
    #[error("need at least 2 miners, got n = {0}")]
    TooFewMiners(u32),
    #[error("t = {t} is not below n/2 = {half} (no honest majority)")]
    NoHonestMajority { t: u32, half: f64 },
    #[error("t = {t} leaves no honest miner out of n = {n}")]
    NoHonestMiner { t: u32, n: u32 },
    #[error("p = {0} is outside (0, 1)")]
    BadProbability(f64),
    #[error("T must be at least 1")]
    BadDelay,
    #[error("m must be at least 1")]
    BadVoterCount,
    #[error("horizon must be at least 1")]
    BadHorizon,
}

/// Quantities computed from [`ProtocolParams`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivedParams {
    pub n: u32,
    pub t: u32,
    pub p: f64,
    #[serde(rename = "T")]
    pub delay: u32,
    pub beta: f64,
    pub xi: f64,
    /// P(at least one honest block in a round).
    pub q: f64,
    pub eta: f64,
    pub eta_prime: f64,
    /// P(exactly one honest block in a round).
    pub y_rate: f64,
    pub sync_admissible: bool,
    pub bounded_admissible: bool,
}

/// The (ξ, q) pair every closed-form bound is a function of.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub xi: f64,
    pub q: f64,
}

impl Rates {
    pub fn new(xi: f64, q: f64) -> Self {
        Self { xi, q }
    }

    /// η = ξ²q/180.
    pub fn eta(&self) -> f64 {
        self.xi * self.xi * self.q / 180.0
    }

    /// η′ = ξ²q²(1−q)^(4T−2) / (4000T²).
    pub fn eta_prime(&self, delay: u32) -> f64 {
        let t = f64::from(delay);
        let decay = ((4.0 * t - 2.0) * (-self.q).ln_1p()).exp();
        self.xi * self.xi * self.q * self.q * decay / (4000.0 * t * t)
    }
}

impl DerivedParams {
    pub fn rates(&self) -> Rates {
        Rates { xi: self.xi, q: self.q }
    }

    pub fn honest(&self) -> u32 {
        self.n - self.t
    }

    /// Expected adversarial blocks per round, pt.
    pub fn pt(&self) -> f64 {
        self.p * f64::from(self.t)
    }
}

fn check_shape(params: &ProtocolParams) -> Result<(), ParamError> {
    if params.n < 2 {
        return Err(ParamError::TooFewMiners(params.n));
    }
    if !(params.p > 0.0 && params.p < 1.0) {
        return Err(ParamError::BadProbability(params.p));
    }
    if params.delay < 1 {
        return Err(ParamError::BadDelay);
    }
    if params.m < 1 {
        return Err(ParamError::BadVoterCount);
    }
    if params.horizon < 1 {
        return Err(ParamError::BadHorizon);
    }
    if params.t >= params.n {
        return Err(ParamError::NoHonestMiner { t: params.t, n: params.n });
    }
    Ok(())
}

/// Computes every derived constant. Rejects an adversarial majority.
pub fn derive(params: &ProtocolParams) -> Result<DerivedParams, ParamError> {
    check_shape(params)?;
    if 2 * u64::from(params.t) >= u64::from(params.n) {
        return Err(ParamError::NoHonestMajority { t: params.t, half: f64::from(params.n) / 2.0 });
    }
    Ok(compute(params))
}

/// Like [`derive`] but allows t ≥ n/2 (ξ ≤ 0). Only for sanity experiments.
pub fn derive_unchecked(params: &ProtocolParams) -> Result<DerivedParams, ParamError> {
    check_shape(params)?;
    Ok(compute(params))
}

fn compute(params: &ProtocolParams) -> DerivedParams {
    let n = f64::from(params.n);
    let t = f64::from(params.t);
    let honest = n - t;
    let p = params.p;
    let beta = t / n;
    let xi = (1.0 - 2.0 * beta) / (1.0 - beta);
    let log_miss = (-p).ln_1p();
    let q = -(honest * log_miss).exp_m1();
    let y_rate = honest * p * ((honest - 1.0) * log_miss).exp();
    let rates = Rates { xi, q };
    DerivedParams {
        n: params.n,
        t: params.t,
        p,
        delay: params.delay,
        beta,
        xi,
        q,
        eta: rates.eta(),
        eta_prime: rates.eta_prime(params.delay),
        y_rate,
        sync_admissible: q <= xi / 6.0,
        bounded_admissible: q <= xi / (20.0 * f64::from(params.delay)),
    }
}

/// True iff q ≤ ξ/6.
pub fn validate_sync(d: &DerivedParams) -> bool {
    d.q <= d.xi / 6.0
}

/// True iff q ≤ ξ/(20T).
pub fn validate_bounded(d: &DerivedParams, delay: u32) -> bool {
    d.q <= d.xi / (20.0 * f64::from(delay))
}

/// Per-miner probability p giving honest success rate q with `n - t` honest miners.
pub fn p_for_q(n: u32, t: u32, q: f64) -> f64 {
    let honest = f64::from(n - t);
    -((-q).ln_1p() / honest).exp_m1()
}
