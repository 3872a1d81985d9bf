//! Independent oracles shared by the integration tests. Nothing here calls the
//! formulas under test; only plain inputs (n, t, p, T, m, span, k, ε) cross over.
#![allow(dead_code)]

use astro_float::{BigFloat, Consts, RoundingMode};

const PREC: usize = 320;
const RM: RoundingMode = RoundingMode::ToEven;

/// Arbitrary-precision scalar arithmetic.
pub struct Hp {
    cc: Consts,
}

impl Hp {
    pub fn new() -> Self {
        Self { cc: Consts::new().expect("constants cache") }
    }

    pub fn f(&self, x: f64) -> BigFloat {
        BigFloat::from_f64(x, PREC)
    }

    pub fn add(&self, a: &BigFloat, b: &BigFloat) -> BigFloat {
        a.add(b, PREC, RM)
    }

    pub fn sub(&self, a: &BigFloat, b: &BigFloat) -> BigFloat {
        a.sub(b, PREC, RM)
    }

    pub fn mul(&self, a: &BigFloat, b: &BigFloat) -> BigFloat {
        a.mul(b, PREC, RM)
    }

    pub fn div(&self, a: &BigFloat, b: &BigFloat) -> BigFloat {
        a.div(b, PREC, RM)
    }

    pub fn ln(&mut self, a: &BigFloat) -> BigFloat {
        a.ln(PREC, RM, &mut self.cc)
    }

    pub fn exp(&mut self, a: &BigFloat) -> BigFloat {
        a.exp(PREC, RM, &mut self.cc)
    }

    pub fn powi(&self, a: &BigFloat, n: usize) -> BigFloat {
        a.powi(n, PREC, RM)
    }

    /// |x − want| ≤ tol·|want|, evaluated without rounding x.
    pub fn close(&self, x: f64, want: &BigFloat, tol: f64) -> bool {
        let diff = self.sub(&self.f(x), want).abs();
        let lim = self.mul(&want.abs(), &self.f(tol));
        diff.cmp(&lim).is_some_and(|c| c <= 0)
    }

    pub fn lt(&self, a: &BigFloat, b: &BigFloat) -> bool {
        a.cmp(b).is_some_and(|c| c < 0)
    }
}

/// Reference values for one parameter tuple, from first principles.
pub struct Reference {
    pub beta: BigFloat,
    pub xi: BigFloat,
    pub q: BigFloat,
    pub y_rate: BigFloat,
    pub eta: BigFloat,
    pub eta_p: BigFloat,
    pub pt: BigFloat,
    pub delay: u32,
}

pub fn reference(hp: &mut Hp, n: u32, t: u32, p: f64, delay: u32) -> Reference {
    let one = hp.f(1.0);
    let nb = hp.f(f64::from(n));
    let tb = hp.f(f64::from(t));
    let pb = hp.f(p);
    let beta = hp.div(&tb, &nb);
    let xi = hp.div(&hp.sub(&one, &hp.mul(&hp.f(2.0), &beta)), &hp.sub(&one, &beta));
    let miss = hp.sub(&one, &pb);
    let honest = (n - t) as usize;
    let q = hp.sub(&one, &hp.powi(&miss, honest));
    let y_rate = hp.mul(&hp.mul(&hp.f(honest as f64), &pb), &hp.powi(&miss, honest - 1));
    let (eta, eta_p) = etas(hp, &xi, &q, delay);
    let pt = hp.mul(&pb, &tb);
    Reference { beta, xi, q, y_rate, eta, eta_p, pt, delay }
}

/// (η, η′) for given ξ, q, T.
pub fn etas(hp: &Hp, xi: &BigFloat, q: &BigFloat, delay: u32) -> (BigFloat, BigFloat) {
    let xi2 = hp.mul(xi, xi);
    let eta = hp.div(&hp.mul(&xi2, q), &hp.f(180.0));
    let tt = f64::from(delay);
    let decay = hp.powi(&hp.sub(&hp.f(1.0), q), (4 * delay - 2) as usize);
    let eta_p = hp.div(&hp.mul(&hp.mul(&xi2, &hp.mul(q, q)), &decay), &hp.f(4000.0 * tt * tt));
    (eta, eta_p)
}

/// 1 − c·η^(−power)·e^(−η·span).
pub fn lower_bound(hp: &mut Hp, c: f64, eta: &BigFloat, power: usize, span: f64) -> BigFloat {
    let e = hp.exp(&hp.mul(eta, &hp.f(span)).neg());
    let scale = hp.div(&hp.f(c), &hp.powi(eta, power));
    hp.sub(&hp.f(1.0), &hp.mul(&scale, &e))
}

/// c·m·η^(−2)·e^(−η·k/(2q) + extra).
pub fn depth_bound(hp: &mut Hp, c: f64, m: u32, eta: &BigFloat, q: &BigFloat, k: f64, extra: &BigFloat) -> BigFloat {
    let expo = hp.sub(extra, &hp.div(&hp.mul(eta, &hp.f(k)), &hp.mul(&hp.f(2.0), q)));
    let e = hp.exp(&expo);
    hp.mul(&hp.div(&hp.f(c * f64::from(m)), &hp.powi(eta, 2)), &e)
}

pub fn epsilon_k(hp: &mut Hp, r: &Reference, m: u32, k: f64) -> BigFloat {
    let zero = hp.f(0.0);
    depth_bound(hp, 6.0, m, &r.eta.clone(), &r.q.clone(), k, &zero)
}

pub fn delta_k(hp: &mut Hp, r: &Reference, m: u32, k: f64) -> BigFloat {
    let extra = hp.mul(&hp.f(2.0 * f64::from(r.delay) + 1.0), &r.eta_p);
    depth_bound(hp, 5.0, m, &r.eta_p.clone(), &r.q.clone(), k, &extra)
}

/// Leader wait before the ceiling: sync uses (η, 1 − ξ/6, 12m); bounded uses
/// (η′, (1 − ξ/10)(1−q)^T, 10m) and the additive (2T+1)η′ term.
pub fn leader_wait(hp: &mut Hp, r: &Reference, m: u32, eps: f64, bounded: bool) -> BigFloat {
    let one = hp.f(1.0);
    let (eta, slack, c) = if bounded {
        let decay = hp.powi(&hp.sub(&one, &r.q), r.delay as usize);
        let a = hp.sub(&one, &hp.div(&r.xi, &hp.f(10.0)));
        (r.eta_p.clone(), hp.mul(&a, &decay), 10.0)
    } else {
        (r.eta.clone(), hp.sub(&one, &hp.div(&r.xi, &hp.f(6.0))), 12.0)
    };
    let arg = hp.div(&hp.f(c * f64::from(m)), &hp.mul(&hp.powi(&eta, 2), &hp.f(eps)));
    let mut log = hp.ln(&arg);
    if bounded {
        log = hp.add(&log, &hp.mul(&hp.f(2.0 * f64::from(r.delay) + 1.0), &eta));
    }
    let denom = hp.mul(&hp.mul(&slack, &r.xi), &eta);
    hp.mul(&hp.div(&hp.f(5.0), &denom), &log)
}

/// Transaction wait before the ceiling, same shape with squared slack, ξ² and 24m / 20m.
pub fn tx_wait(hp: &mut Hp, r: &Reference, m: u32, eps: f64, bounded: bool) -> BigFloat {
    let one = hp.f(1.0);
    let (eta, slack, c) = if bounded {
        let decay = hp.powi(&hp.sub(&one, &r.q), r.delay as usize);
        let a = hp.sub(&one, &hp.div(&r.xi, &hp.f(10.0)));
        (r.eta_p.clone(), hp.mul(&a, &decay), 20.0)
    } else {
        (r.eta.clone(), hp.sub(&one, &hp.div(&r.xi, &hp.f(6.0))), 24.0)
    };
    let arg = hp.div(&hp.f(c * f64::from(m)), &hp.mul(&hp.powi(&eta, 2), &hp.f(eps)));
    let mut log = hp.ln(&arg);
    if bounded {
        log = hp.add(&log, &hp.mul(&hp.f(2.0 * f64::from(r.delay) + 1.0), &eta));
    }
    let denom = hp.mul(&hp.mul(&hp.powi(&slack, 2), &hp.powi(&r.xi, 2)), &eta);
    hp.mul(&hp.div(&hp.f(25.0), &denom), &log)
}

/// e^(−frac²·p·n/div).
pub fn chernoff(hp: &mut Hp, n: f64, p: f64, frac: f64, div: f64) -> BigFloat {
    let f = hp.f(frac);
    let x = hp.div(&hp.mul(&hp.mul(&hp.mul(&f, &f), &hp.f(p)), &hp.f(n)), &hp.f(div));
    hp.exp(&x.neg())
}

/// e^(−2t²/(n·c²)).
pub fn mcdiarmid(hp: &mut Hp, n: f64, c: f64, dev: f64) -> BigFloat {
    let d = hp.f(dev);
    let cc = hp.f(c);
    let x = hp.div(&hp.mul(&hp.f(2.0), &hp.mul(&d, &d)), &hp.mul(&hp.f(n), &hp.mul(&cc, &cc)));
    hp.exp(&x.neg())
}

/// Marginal failure bounds for span `len`: 2e^(−ξ²q·len/108), e^(−ξ²·y·len/72),
/// and the MGF form e^((a − (1+a)ln(1+a))·pt·len − a·ln(1+a)·q·len) with a = ξ/12.
pub fn marginal_bounds(hp: &mut Hp, r: &Reference, len: f64) -> [BigFloat; 3] {
    let l = hp.f(len);
    let xi2 = hp.mul(&r.xi, &r.xi);
    let e1 = hp.exp(&hp.div(&hp.mul(&hp.mul(&xi2, &r.q), &l), &hp.f(108.0)).neg());
    let e1 = hp.mul(&hp.f(2.0), &e1);
    let e2 = hp.exp(&hp.div(&hp.mul(&hp.mul(&xi2, &r.y_rate), &l), &hp.f(72.0)).neg());
    let a = hp.div(&r.xi, &hp.f(12.0));
    let one = hp.f(1.0);
    let la = hp.ln(&hp.add(&one, &a));
    let first = hp.mul(&hp.sub(&a, &hp.mul(&hp.add(&one, &a), &la)), &hp.mul(&r.pt, &l));
    let second = hp.mul(&hp.mul(&a, &la), &hp.mul(&r.q, &l));
    let e3 = hp.exp(&hp.sub(&first, &second));
    [e1, e2, e3]
}

/// Exact P(E[1, span+1]) for `honest` honest and `adv` adversarial miners, by
/// summing over every per-miner, per-round success pattern.
pub fn exact_e_probability(honest: u32, adv: u32, p: f64, span: u32) -> f64 {
    let miners = honest + adv;
    let bits = miners * span;
    assert!(bits <= 24, "enumeration too large");
    let n = f64::from(miners);
    let beta = f64::from(adv) / n;
    let xi = (1.0 - 2.0 * beta) / (1.0 - beta);
    let q = 1.0 - (1.0 - p).powi(honest as i32);
    let y = f64::from(honest) * p * (1.0 - p).powi(honest as i32 - 1);
    let len = f64::from(span);
    let dev = xi / 6.0;
    let mut total = 0.0;
    for pattern in 0u32..(1 << bits) {
        let wins = pattern.count_ones() as i32;
        let weight = p.powi(wins) * (1.0 - p).powi(bits as i32 - wins);
        let (mut x, mut yc, mut z) = (0u32, 0u32, 0u32);
        for r in 0..span {
            let row = (pattern >> (r * miners)) & ((1 << miners) - 1);
            let h = (row & ((1 << honest) - 1)).count_ones();
            x += u32::from(h >= 1);
            yc += u32::from(h == 1);
            z += (row >> honest).count_ones();
        }
        let (x, yc, z) = (f64::from(x), f64::from(yc), f64::from(z));
        let ok = (1.0 - dev) * q * len < x
            && x < (1.0 + dev) * q * len
            && (1.0 - dev) * y * len < yc
            && z < p * f64::from(adv) * len + dev * q * len;
        if ok {
            total += weight;
        }
    }
    total
}

pub mod sweep {
    use super::*;
    use chainlab::bounds::{
        chernoff_lower, chernoff_upper, delta_k_raw, e1_failure_bound, e2_failure_bound, e3_failure_bound,
        epsilon_k_raw, lb_prob_e_raw, lb_prob_f_raw, lb_prob_g_raw, lb_prob_j_raw, leader_wait_real,
        mcdiarmid_tail, tx_wait_real, Model,
    };
    use chainlab::params::{derive, p_for_q, ProtocolParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub struct Outcome {
        pub tuples: usize,
        pub comparisons: usize,
        pub failures: Vec<String>,
    }

    fn ceil_matches(hp: &Hp, got: u64, want: &BigFloat) -> bool {
        // want lies in (got − 1, got] unless it sits within rounding of an integer
        let g = hp.f(got as f64);
        let lo = hp.f(got as f64 - 1.0 - 1e-6 * got as f64);
        let hi = hp.add(&g, &hp.mul(&g, &hp.f(1e-9)));
        hp.lt(&lo, want) && !hp.lt(&hi, want) || (got == 1 && hp.lt(want, &hp.f(1.0)))
    }

    /// Random admissible tuples compared against the reference at relative tolerance `tol`.
    pub fn run(samples: usize, seed: u64, tol: f64) -> Outcome {
        let mut hp = Hp::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Outcome { tuples: 0, comparisons: 0, failures: Vec::new() };
        let cmp = |out: &mut Outcome, hp: &Hp, what: &str, got: f64, want: &BigFloat| {
            out.comparisons += 1;
            if !hp.close(got, want, tol) {
                out.failures.push(format!("{what}: got {got:e}, want {want}"));
            }
        };
        while out.tuples < samples {
            let n: u32 = rng.random_range(3..=2000);
            let t: u32 = rng.random_range(0..=(n - 1) / 2);
            if 2 * t >= n {
                continue;
            }
            let delay: u32 = rng.random_range(1..=12);
            let m: u32 = rng.random_range(1..=1000);
            let beta = f64::from(t) / f64::from(n);
            let xi = (1.0 - 2.0 * beta) / (1.0 - beta);
            // admissible for both models
            let q = xi / (20.0 * f64::from(delay)) * rng.random_range(0.01..1.0);
            let p = p_for_q(n, t, q);
            let params = ProtocolParams { n, t, p, delay, m, horizon: 1, seed: 0 };
            let Ok(d) = derive(&params) else { continue };
            if !(d.sync_admissible && d.bounded_admissible) {
                continue;
            }
            out.tuples += 1;
            let r = reference(&mut hp, n, t, p, delay);
            let tag = format!("n={n} t={t} p={p:e} T={delay} m={m}");
            cmp(&mut out, &hp, &format!("{tag} xi"), d.xi, &r.xi);
            cmp(&mut out, &hp, &format!("{tag} q"), d.q, &r.q);
            cmp(&mut out, &hp, &format!("{tag} y_rate"), d.y_rate, &r.y_rate);
            cmp(&mut out, &hp, &format!("{tag} eta"), d.eta, &r.eta);
            cmp(&mut out, &hp, &format!("{tag} eta'"), d.eta_prime, &r.eta_p);
            let rates = d.rates();
            // spans and depths placed so exponents stay inside f64 range
            let span = rng.random_range(0.0..40.0) / d.eta;
            let span_p = rng.random_range(0.0..40.0) / d.eta_prime;
            let want = lower_bound(&mut hp, 4.0, &r.eta, 0, span);
            cmp(&mut out, &hp, &format!("{tag} lb_E({span:e})"), lb_prob_e_raw(span, &rates), &want);
            let want = lower_bound(&mut hp, 4.0, &r.eta_p, 0, span_p);
            cmp(&mut out, &hp, &format!("{tag} lb_F({span_p:e})"), lb_prob_f_raw(span_p, &rates, delay), &want);
            let span_g = span + 2.0 * (1.0 / d.eta).ln() / d.eta;
            let want = lower_bound(&mut hp, 5.0, &r.eta, 2, span_g);
            cmp(&mut out, &hp, &format!("{tag} lb_G({span_g:e})"), lb_prob_g_raw(span_g, &rates), &want);
            let span_j = span_p + 2.0 * (1.0 / d.eta_prime).ln() / d.eta_prime;
            let want = lower_bound(&mut hp, 5.0, &r.eta_p, 2, span_j);
            cmp(&mut out, &hp, &format!("{tag} lb_J({span_j:e})"), lb_prob_j_raw(span_j, &rates, delay), &want);
            let k = (rng.random_range(0.0..600.0) * 2.0 * d.q / d.eta).round();
            let want = super::epsilon_k(&mut hp, &r, m, k);
            cmp(&mut out, &hp, &format!("{tag} eps_k({k})"), epsilon_k_raw(k, &rates, m).exp(), &want);
            let kp = (rng.random_range(0.0..600.0) * 2.0 * d.q / d.eta_prime).round().max(5.0);
            let want = super::delta_k(&mut hp, &r, m, kp);
            cmp(&mut out, &hp, &format!("{tag} delta_k({kp})"), delta_k_raw(kp, &rates, m, delay).exp(), &want);
            let eps: f64 = rng.random_range(1e-9..1.0);
            for (model, bounded) in [(Model::Synchronous, false), (Model::BoundedDelay, true)] {
                let dl = if bounded { delay } else { 1 };
                let want = super::leader_wait(&mut hp, &r, m, eps, bounded);
                let got = leader_wait_real(eps, &rates, m, model, dl).expect("admissible");
                cmp(&mut out, &hp, &format!("{tag} leader_wait({model:?}, {eps:e})"), got, &want);
                out.comparisons += 1;
                match chainlab::bounds::leader_wait(eps, &rates, m, model, dl) {
                    Ok(c) if ceil_matches(&hp, c, &want) => {}
                    Err(_) if !hp.lt(&want, &hp.f(1.8e19)) => {}
                    other => out.failures.push(format!("{tag} leader_wait ceiling {other:?} vs {want}")),
                }
                let want = super::tx_wait(&mut hp, &r, m, eps, bounded);
                let got = tx_wait_real(eps, &rates, m, model, dl).expect("admissible");
                cmp(&mut out, &hp, &format!("{tag} tx_wait({model:?}, {eps:e})"), got, &want);
                out.comparisons += 1;
                match chainlab::bounds::tx_wait(eps, &rates, m, model, dl) {
                    Ok(c) if ceil_matches(&hp, c, &want) => {}
                    Err(_) if !hp.lt(&want, &hp.f(1.8e19)) => {}
                    other => out.failures.push(format!("{tag} tx_wait ceiling {other:?} vs {want}")),
                }
            }
            let trials = rng.random_range(1.0..1e6);
            let frac: f64 = rng.random_range(0.0..1.0);
            let ps: f64 = rng.random_range(1e-4..1.0);
            let want = chernoff(&mut hp, trials, ps, frac, 2.0);
            if hp.lt(&hp.f(1e-300), &want) {
                cmp(&mut out, &hp, &format!("{tag} chernoff_lower"), chernoff_lower(trials, ps, frac), &want);
            }
            let want = chernoff(&mut hp, trials, ps, frac, 3.0);
            if hp.lt(&hp.f(1e-300), &want) {
                cmp(&mut out, &hp, &format!("{tag} chernoff_upper"), chernoff_upper(trials, ps, frac), &want);
            }
            let lip = rng.random_range(0.5..4.0);
            let dev = rng.random_range(0.0..10.0) * lip * trials.sqrt();
            let want = mcdiarmid(&mut hp, trials, lip, dev);
            if hp.lt(&hp.f(1e-300), &want) {
                cmp(&mut out, &hp, &format!("{tag} mcdiarmid"), mcdiarmid_tail(trials, lip, dev), &want);
            }
            let len = rng.random_range(1.0..200.0) / (d.xi * d.xi * d.q);
            let [w1, w2, w3] = marginal_bounds(&mut hp, &r, len);
            for (name, got, want) in [
                ("E1", e1_failure_bound(len, &d), w1),
                ("E2", e2_failure_bound(len, &d), w2),
                ("E3", e3_failure_bound(len, &d), w3),
            ] {
                // the implementations clamp to [0, 1]
                if hp.lt(&want, &hp.f(1.0)) && hp.lt(&hp.f(1e-300), &want) {
                    cmp(&mut out, &hp, &format!("{tag} {name} bound"), got, &want);
                }
            }
        }
        out
    }
}
