//! Closed-form probability bounds and confirmation-wait formulas.
//!
//! Logarithms are natural. Probabilities are clamped to [0, 1]; waits are the
//! ceiling of the real-valued bound.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{DerivedParams, Rates};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Model {
    Synchronous,
    BoundedDelay,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BoundError {
    #[error("parameters are not admissible for the {0:?} model")]
    Inadmissible(Model),
    #[error("epsilon = {0} must lie in (0, 1]")]
    BadEpsilon(f64),
    #[error("span {span} must exceed 2/q = {min}")]
    SpanTooShort { span: f64, min: f64 },
    #[error("k = {k} below the minimum {min}")]
    KTooSmall { k: u64, min: u64 },
    #[error("{0} must be positive")]
    NonPositive(&'static str),
    #[error("wait of {0:e} rounds does not fit in 64 bits")]
    WaitOverflow(f64),
}

/// One evaluated formula.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub model: Model,
    pub formula_id: String,
    pub xi: f64,
    pub q: f64,
    #[serde(rename = "T")]
    pub delay: u32,
    pub m: Option<u32>,
    /// span, k or ε depending on the formula.
    pub arg: f64,
    /// Unclamped formula value.
    pub raw: f64,
    pub value: f64,
}

fn clamp01(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

/// 1 − e^{a}, accurate near a = 0.
fn one_minus_exp(a: f64) -> f64 {
    -a.exp_m1()
}

/// 1 − 4e^{−η·span} before clamping.
pub fn lb_prob_e_raw(span: f64, rates: &Rates) -> f64 {
    one_minus_exp(4f64.ln() - rates.eta() * span)
}

/// max(0, 1 − 4e^{−η·span}).
pub fn lb_prob_e(span: f64, rates: &Rates) -> f64 {
    clamp01(lb_prob_e_raw(span, rates))
}

pub fn lb_prob_f_raw(span: f64, rates: &Rates, delay: u32) -> f64 {
    one_minus_exp(4f64.ln() - rates.eta_prime(delay) * span)
}

/// max(0, 1 − 4e^{−η′·span}).
pub fn lb_prob_f(span: f64, rates: &Rates, delay: u32) -> f64 {
    clamp01(lb_prob_f_raw(span, rates, delay))
}

pub fn lb_prob_g_raw(span: f64, rates: &Rates) -> f64 {
    let eta = rates.eta();
    one_minus_exp(5f64.ln() - 2.0 * eta.ln() - eta * span)
}

/// max(0, 1 − 5η⁻²e^{−η·span}).
pub fn lb_prob_g(span: f64, rates: &Rates) -> f64 {
    clamp01(lb_prob_g_raw(span, rates))
}

pub fn lb_prob_j_raw(span: f64, rates: &Rates, delay: u32) -> f64 {
    let eta = rates.eta_prime(delay);
    one_minus_exp(5f64.ln() - 2.0 * eta.ln() - eta * span)
}

/// max(0, 1 − 5η′⁻²e^{−η′·span}); requires span > 2/q.
pub fn lb_prob_j(span: f64, rates: &Rates, delay: u32) -> Result<f64, BoundError> {
    let min = 2.0 / rates.q;
    if span <= min {
        return Err(BoundError::SpanTooShort { span, min });
    }
    Ok(clamp01(lb_prob_j_raw(span, rates, delay)))
}

pub fn epsilon_k_raw(k: f64, rates: &Rates, m: u32) -> f64 {
    let eta = rates.eta();
    (6.0 * f64::from(m)).ln() - 2.0 * eta.ln() - eta * k / (2.0 * rates.q)
}

/// ε_k = 6mη⁻²e^{−ηk/(2q)}, clamped.
pub fn epsilon_k(k: f64, rates: &Rates, m: u32) -> f64 {
    clamp01(epsilon_k_raw(k, rates, m).exp())
}

pub fn delta_k_raw(k: f64, rates: &Rates, m: u32, delay: u32) -> f64 {
    let eta = rates.eta_prime(delay);
    (5.0 * f64::from(m)).ln() - 2.0 * eta.ln() - eta * k / (2.0 * rates.q)
        + (2.0 * f64::from(delay) + 1.0) * eta
}

/// δ_k = 5mη′⁻²e^{−η′k/(2q) + (2T+1)η′}, clamped; requires k ≥ 5.
pub fn delta_k(k: u64, rates: &Rates, m: u32, delay: u32) -> Result<f64, BoundError> {
    if k < 5 {
        return Err(BoundError::KTooSmall { k, min: 5 });
    }
    Ok(clamp01(delta_k_raw(k as f64, rates, m, delay).exp()))
}

fn check_wait(eps: f64, rates: &Rates, model: Model, delay: u32) -> Result<(), BoundError> {
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(BoundError::BadEpsilon(eps));
    }
    let ok = match model {
        Model::Synchronous => rates.q <= rates.xi / 6.0,
        Model::BoundedDelay => rates.q <= rates.xi / (20.0 * f64::from(delay)),
    };
    if !ok || rates.q <= 0.0 || rates.xi <= 0.0 {
        return Err(BoundError::Inadmissible(model));
    }
    Ok(())
}

/// Real-valued leader-permanence wait before the ceiling.
pub fn leader_wait_real(eps: f64, rates: &Rates, m: u32, model: Model, delay: u32) -> Result<f64, BoundError> {
    check_wait(eps, rates, model, delay)?;
    let (xi, q, mf) = (rates.xi, rates.q, f64::from(m));
    Ok(match model {
        Model::Synchronous => {
            let eta = rates.eta();
            5.0 / ((1.0 - xi / 6.0) * xi * eta) * ((12.0 * mf).ln() - 2.0 * eta.ln() - eps.ln())
        }
        Model::BoundedDelay => {
            let eta = rates.eta_prime(delay);
            let t = f64::from(delay);
            let decay = (t * (-q).ln_1p()).exp();
            5.0 / ((1.0 - xi / 10.0) * xi * eta * decay)
                * ((10.0 * mf).ln() - 2.0 * eta.ln() - eps.ln() + eta * (2.0 * t + 1.0))
        }
    })
}

fn ceil_wait(real: f64) -> Result<u64, BoundError> {
    let w = real.ceil().max(1.0);
    // 2^64 is the first value `as u64` would saturate
    if w >= 18_446_744_073_709_551_616.0 {
        return Err(BoundError::WaitOverflow(real));
    }
    Ok(w as u64)
}

/// Rounds after R_l until the level-l leader is ε-permanent.
pub fn leader_wait(eps: f64, rates: &Rates, m: u32, model: Model, delay: u32) -> Result<u64, BoundError> {
    ceil_wait(leader_wait_real(eps, rates, m, model, delay)?)
}

pub fn tx_wait_real(eps: f64, rates: &Rates, m: u32, model: Model, delay: u32) -> Result<f64, BoundError> {
    check_wait(eps, rates, model, delay)?;
    let (xi, q, mf) = (rates.xi, rates.q, f64::from(m));
    Ok(match model {
        Model::Synchronous => {
            let eta = rates.eta();
            let a = 1.0 - xi / 6.0;
            25.0 / (a * a * xi * xi * eta) * ((24.0 * mf).ln() - 2.0 * eta.ln() - eps.ln())
        }
        Model::BoundedDelay => {
            let eta = rates.eta_prime(delay);
            let t = f64::from(delay);
            let a = 1.0 - xi / 10.0;
            let decay = (2.0 * t * (-q).ln_1p()).exp();
            25.0 / (a * a * xi * xi * eta * decay)
                * ((20.0 * mf).ln() - 2.0 * eta.ln() - eps.ln() + eta * (2.0 * t + 1.0))
        }
    })
}

/// Rounds until an honest transaction is ε-permanent.
pub fn tx_wait(eps: f64, rates: &Rates, m: u32, model: Model, delay: u32) -> Result<u64, BoundError> {
    ceil_wait(tx_wait_real(eps, rates, m, model, delay)?)
}

/// P(X ≤ (1−η)pn) ≤ e^{−η²pn/2}.
pub fn chernoff_lower(n_trials: f64, p_success: f64, frac: f64) -> f64 {
    clamp01((-frac * frac * p_success * n_trials / 2.0).exp())
}

/// P(X ≥ (1+η)pn) ≤ e^{−η²pn/3}.
pub fn chernoff_upper(n_trials: f64, p_success: f64, frac: f64) -> f64 {
    clamp01((-frac * frac * p_success * n_trials / 3.0).exp())
}

/// e^{−2t²/(nk²)} for a k-Lipschitz function of n independent coordinates.
pub fn mcdiarmid_tail(n_coords: f64, k_lipschitz: f64, t_dev: f64) -> f64 {
    clamp01((-2.0 * t_dev * t_dev / (n_coords * k_lipschitz * k_lipschitz)).exp())
}

/// Bound on P(E₁ᶜ[s, r]): 2e^{−ξ²q·span/108}.
pub fn e1_failure_bound(span: f64, d: &DerivedParams) -> f64 {
    clamp01(2.0 * (-d.xi * d.xi * d.q * span / 108.0).exp())
}

/// Bound on P(E₂ᶜ[s, r]): e^{−ξ²𝔼[Y]/72} with 𝔼[Y] = y_rate·span.
pub fn e2_failure_bound(span: f64, d: &DerivedParams) -> f64 {
    clamp01((-d.xi * d.xi * d.y_rate * span / 72.0).exp())
}

/// Bound on P(E₃ᶜ[s, r]) from the moment-generating-function step at u = log(1 + ξ/12).
pub fn e3_failure_bound(span: f64, d: &DerivedParams) -> f64 {
    let a = d.xi / 12.0;
    let l = a.ln_1p();
    clamp01(((a - (1.0 + a) * l) * d.pt() * span - a * l * d.q * span).exp())
}

fn report(model: Model, id: &str, rates: &Rates, delay: u32, m: Option<u32>, arg: f64, raw: f64) -> BoundReport {
    BoundReport {
        model,
        formula_id: id.to_string(),
        xi: rates.xi,
        q: rates.q,
        delay,
        m,
        arg,
        raw,
        value: clamp01(raw),
    }
}

/// Reports for every probability formula at a given span.
pub fn span_reports(span: f64, rates: &Rates, delay: u32) -> Vec<BoundReport> {
    let mut out = vec![
        report(Model::Synchronous, "lb_prob_E", rates, 1, None, span, lb_prob_e_raw(span, rates)),
        report(Model::Synchronous, "lb_prob_G", rates, 1, None, span, lb_prob_g_raw(span, rates)),
        report(Model::BoundedDelay, "lb_prob_F", rates, delay, None, span, lb_prob_f_raw(span, rates, delay)),
    ];
    if span > 2.0 / rates.q {
        out.push(report(Model::BoundedDelay, "lb_prob_J", rates, delay, None, span, lb_prob_j_raw(span, rates, delay)));
    }
    out
}

/// Reports for ε_k and δ_k at depth k.
pub fn depth_reports(k: u64, rates: &Rates, m: u32, delay: u32) -> Vec<BoundReport> {
    let mut out =
        vec![report(Model::Synchronous, "epsilon_k", rates, 1, Some(m), k as f64, epsilon_k_raw(k as f64, rates, m).exp())];
    if k >= 5 {
        out.push(report(
            Model::BoundedDelay,
            "delta_k",
            rates,
            delay,
            Some(m),
            k as f64,
            delta_k_raw(k as f64, rates, m, delay).exp(),
        ));
    }
    out
}

/// Reports for both wait formulas in one model; inadmissible models are skipped.
pub fn wait_reports(eps: f64, rates: &Rates, m: u32, model: Model, delay: u32) -> Vec<BoundReport> {
    let mut out = Vec::new();
    let dl = if model == Model::Synchronous { 1 } else { delay };
    if let Ok(v) = leader_wait_real(eps, rates, m, model, dl) {
        let mut r = report(model, "leader_wait", rates, dl, Some(m), eps, v);
        r.value = v.ceil().max(1.0);
        out.push(r);
    }
    if let Ok(v) = tx_wait_real(eps, rates, m, model, dl) {
        let mut r = report(model, "tx_wait", rates, dl, Some(m), eps, v);
        r.value = v.ceil().max(1.0);
        out.push(r);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rates() -> Rates {
        Rates::new(2.0 / 3.0, 0.1)
    }

    #[test]
    fn clamps_and_limits() {
        let r = rates();
        assert_eq!(lb_prob_e(1.0, &r), 0.0);
        assert!(lb_prob_e(1e9, &r) > 0.999_999);
        assert_eq!(lb_prob_g(10.0, &r), 0.0);
        assert!(lb_prob_j(10.0, &r, 1).is_err());
    }

    #[test]
    fn epsilon_identities() {
        let r = rates();
        let k = 40_000.0;
        let a = epsilon_k_raw(k, &r, 3).exp();
        let b = epsilon_k_raw(2.0 * k, &r, 3).exp();
        let factor = (-r.eta() * k / (2.0 * r.q)).exp();
        assert!((b / (a * factor) - 1.0).abs() < 1e-12);
        let a2 = epsilon_k_raw(k, &r, 6).exp();
        assert!((a2 / a - 2.0).abs() < 1e-12);
    }

    #[test]
    fn halving_eps_adds_log2_term() {
        let r = rates();
        let step = 5.0 / ((1.0 - r.xi / 6.0) * r.xi * r.eta()) * 2f64.ln();
        let a = leader_wait_real(1e-3, &r, 10, Model::Synchronous, 1).unwrap();
        let b = leader_wait_real(5e-4, &r, 10, Model::Synchronous, 1).unwrap();
        assert!(((b - a) - step).abs() < 1e-6 * step);
        let ia = leader_wait(1e-3, &r, 10, Model::Synchronous, 1).unwrap();
        let ib = leader_wait(5e-4, &r, 10, Model::Synchronous, 1).unwrap();
        let d = ib - ia;
        assert!(d == step.ceil() as u64 || d == step.floor() as u64);
    }

    #[test]
    fn waits_reject_inadmissible() {
        let bad = Rates::new(0.5, 0.1);
        assert!(leader_wait(0.01, &bad, 1, Model::Synchronous, 1).is_err());
        assert!(tx_wait(0.01, &rates(), 1, Model::BoundedDelay, 1).is_err());
        assert!(tx_wait(0.0, &rates(), 1, Model::Synchronous, 1).is_err());
        assert!(tx_wait(1.0, &rates(), 1, Model::Synchronous, 1).unwrap() >= 1);
    }

    #[test]
    fn mcdiarmid_edges() {
        assert_eq!(mcdiarmid_tail(10.0, 1.0, 0.0), 1.0);
        assert!(mcdiarmid_tail(10.0, 2.0, 3.0) > mcdiarmid_tail(10.0, 1.0, 3.0));
    }
}
