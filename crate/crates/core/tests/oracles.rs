mod common;

use chainlab::bounds::lb_prob_e;
use chainlab::params::{derive, ProtocolParams, Rates};

#[test]
fn exact_e_probability_small_instance() {
    // exact rational value 20701400391 / 125000000000, computed separately
    let exact = common::exact_e_probability(2, 1, 0.3, 4);
    assert!((exact - 0.165_611_203_128).abs() < 1e-12, "{exact}");
    let d = derive(&ProtocolParams { n: 3, t: 1, p: 0.3, delay: 1, m: 1, horizon: 4, seed: 0 }).unwrap();
    assert!(lb_prob_e(4.0, &d.rates()) <= exact);
}

#[test]
fn bounds_agree_with_arbitrary_precision() {
    let out = common::sweep::run(200, 11, 1e-9);
    assert_eq!(out.tuples, 200);
    assert!(out.comparisons > 200 * 20);
    assert!(out.failures.is_empty(), "{:#?}", &out.failures[..out.failures.len().min(10)]);
}

#[test]
fn eta_spot_values() {
    let hp = common::Hp::new();
    let eta = Rates::new(1.0, 1.0 / 6.0).eta();
    let want = hp.div(&hp.f(1.0), &hp.f(1080.0));
    assert!(hp.close(eta, &want, 1e-12), "{eta}");
    // sup over ξ ≤ 1, q ≤ ξ/6, T = 1 is below 1/4000
    let top = Rates::new(1.0, 1.0 / 6.0).eta_prime(1);
    assert!(top < 1.0 / 4000.0, "{top}");
}
