use chainlab::chain::{BlockTree, MinerKind, GENESIS};
use chainlab::metrics::{chain_quality, is_prefix};
use chainlab::params::{derive_unchecked, p_for_q, ProtocolParams};
use chainlab::trace::{event_g_trunc, event_j_trunc, x_func, y_func, ChainCounts, Trace, TypicalIndex};
use proptest::prelude::*;

/// Random tree from parent choices; block i picks a parent among 0..=i−1.
fn tree_from(choices: &[(u16, bool)]) -> BlockTree {
    let mut t = BlockTree::new();
    for (i, &(pick, honest)) in choices.iter().enumerate() {
        let parent = u32::from(pick) % (i as u32 + 1);
        let kind = if honest { MinerKind::Honest } else { MinerKind::Adversarial };
        t.push(parent, kind, i as u32 + 1, Vec::new());
    }
    t
}

fn window(delay: u32, span: u32) -> impl Strategy<Value = Vec<f64>> {
    let len = (span + 2 * delay - 2) as usize;
    // mostly small counts so isolated ones occur, occasionally an arbitrary real
    proptest::collection::vec(prop_oneof![4 => 0u32..3, 1 => 0u32..1].prop_map(f64::from), len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn x_and_y_are_lipschitz(
        (delay, span, w) in (1u32..6, 1u32..40).prop_flat_map(|(d, s)| (Just(d), Just(s), window(d, s))),
        at in any::<prop::sample::Index>(),
        value in prop_oneof![Just(0.0), Just(1.0), Just(2.0), -5.0f64..5.0],
    ) {
        let i = at.index(w.len());
        let mut v = w.clone();
        v[i] = value;
        let xw = (span + delay - 1) as usize;
        let x0 = x_func(&w[..xw], delay, span).unwrap() as i64;
        let x1 = x_func(&v[..xw], delay, span).unwrap() as i64;
        prop_assert!((x0 - x1).abs() <= 1);
        let y0 = y_func(&w, delay, span).unwrap() as i64;
        let y1 = y_func(&v, delay, span).unwrap() as i64;
        prop_assert!((y0 - y1).abs() <= 2);
    }

    #[test]
    fn prefix_is_reflexive_and_transitive(choices in proptest::collection::vec((any::<u16>(), any::<bool>()), 1..60),
                                          a in any::<prop::sample::Index>(), b in any::<prop::sample::Index>(), c in any::<prop::sample::Index>()) {
        let t = tree_from(&choices);
        let pick = |ix: &prop::sample::Index| t.chain(ix.index(t.len()) as u32);
        let (ca, cb, cc) = (pick(&a), pick(&b), pick(&c));
        prop_assert!(is_prefix(&ca, &ca));
        // truncations of one chain are nested
        let k1 = a.index(ca.len()) + 1;
        let k2 = b.index(k1) + 1;
        prop_assert!(is_prefix(&ca[..k2], &ca[..k1]) && is_prefix(&ca[..k1], &ca));
        if is_prefix(&ca, &cb) && is_prefix(&cb, &cc) {
            prop_assert!(is_prefix(&ca, &cc));
        }
        prop_assert_eq!(is_prefix(&ca, &cb), t.is_ancestor(*ca.last().unwrap(), *cb.last().unwrap()));
    }

    #[test]
    fn chain_quality_is_a_fraction(choices in proptest::collection::vec((any::<u16>(), any::<bool>()), 1..60),
                                   tip in any::<prop::sample::Index>(), k in 1usize..80) {
        let t = tree_from(&choices);
        let chain = t.chain(tip.index(t.len()) as u32);
        match chain_quality(&t, &chain, k) {
            Some(f) => {
                prop_assert!((0.0..=1.0).contains(&f));
                prop_assert!(k < chain.len());
            }
            None => prop_assert!(k >= chain.len()),
        }
        prop_assert_eq!(chain[0], GENESIS);
    }

    #[test]
    fn typical_index_matches_brute_force(
        h in proptest::collection::vec(0u32..3, 12..40),
        zs in proptest::collection::vec(0u32..2, 40),
        q in 0.2f64..0.9,
        delay in 1u32..4,
    ) {
        let len = h.len();
        let trace = Trace::from_rounds(6, 2, h, zs[..len].to_vec());
        let params = ProtocolParams { n: 8, t: 2, p: p_for_q(8, 2, q), delay, m: 1, horizon: len as u32, seed: 0 };
        let d = derive_unchecked(&params).unwrap();
        let g = TypicalIndex::for_g(&ChainCounts::new(&trace, 0, 1), &d);
        let cc = ChainCounts::new(&trace, 0, delay);
        let jx = TypicalIndex::for_j(&cc, &d);
        let len = len as u32;
        for s in 1..len {
            for r in s + 1..=len {
                prop_assert_eq!(g.holds(s, r), event_g_trunc(&trace, 0, s, r, &d).unwrap(), "G[{}, {}]", s, r);
                if let Ok(b) = event_j_trunc(&trace, 0, s, r, &d, delay) {
                    prop_assert_eq!(jx.holds(s, r), b, "J[{}, {}]", s, r);
                }
            }
        }
    }
}

#[test]
fn typical_index_matches_brute_force_when_events_hold() {
    // one honest success every 10 rounds at q = 0.1 keeps G true on long windows
    let len = 160u32;
    let h: Vec<u32> = (1..=len).map(|r| u32::from(r % 10 == 0)).collect();
    let trace = Trace::from_rounds(75, 25, h, vec![0; len as usize]);
    let params = ProtocolParams { n: 100, t: 25, p: p_for_q(100, 25, 0.1), delay: 1, m: 1, horizon: len, seed: 0 };
    let d = derive_unchecked(&params).unwrap();
    let g = TypicalIndex::for_g(&ChainCounts::new(&trace, 0, 1), &d);
    let mut held = 0;
    for s in 1..len {
        for r in s + 1..=len {
            let want = event_g_trunc(&trace, 0, s, r, &d).unwrap();
            assert_eq!(g.holds(s, r), want, "G[{s}, {r}]");
            held += usize::from(want);
        }
    }
    assert!(held > 100, "{held}");
}
