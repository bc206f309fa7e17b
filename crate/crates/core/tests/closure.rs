mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::SeedableRng;

use svmcheck::term::{can_derive, closure, closure_with_cap, Term};

use common::{oracle_closure, random_knowledge};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn matches_oracle(seed in any::<u64>()) {
        let mut rng = StdRng::seed_from_u64(seed);
        let (base, universe) = random_knowledge(&mut rng, 6);
        let k = closure(&base, &universe, 2).unwrap();
        prop_assert_eq!(k.terms(), &oracle_closure(&base, &universe));
    }

    #[test]
    fn idempotent(seed in any::<u64>()) {
        let mut rng = StdRng::seed_from_u64(seed);
        let (base, universe) = random_knowledge(&mut rng, 6);
        let once = closure(&base, &universe, 2).unwrap();
        let twice = closure(once.terms(), &universe, 2).unwrap();
        prop_assert_eq!(once.terms(), twice.terms());
    }

    #[test]
    fn monotone(seed in any::<u64>()) {
        let mut rng = StdRng::seed_from_u64(seed);
        let (base, universe) = random_knowledge(&mut rng, 6);
        let (extra, _) = random_knowledge(&mut rng, 3);
        let small = closure(&base, &universe, 2).unwrap();
        let big_base: BTreeSet<Term> = base.union(&extra).cloned().collect();
        let big = closure(&big_base, &universe, 2).unwrap();
        prop_assert!(small.terms().is_subset(big.terms()));
    }

    #[test]
    fn closure_members_are_derivable(seed in any::<u64>()) {
        let mut rng = StdRng::seed_from_u64(seed);
        let (base, universe) = random_knowledge(&mut rng, 6);
        let k = closure(&base, &universe, 2).unwrap();
        for t in k.terms() {
            prop_assert!(can_derive(&k, t));
        }
        // Anything built from known parts is derivable even off-universe.
        let parts: Vec<Term> = k.terms().iter().take(2).cloned().collect();
        if !parts.is_empty() {
            prop_assert!(can_derive(&k, &Term::tuple(parts.clone())));
            prop_assert!(can_derive(&k, &Term::hash(Term::tuple(parts))));
        }
    }
}

#[test]
fn decryption_needs_matching_key() {
    let secret = Term::atom("S");
    let base: BTreeSet<Term> = [Term::enc(secret.clone(), Term::public("K")), Term::public("K")].into();
    let k = closure(&base, &BTreeSet::new(), 2).unwrap();
    assert!(!k.contains(&secret));
    let base: BTreeSet<Term> = [Term::enc(secret.clone(), Term::public("K")), Term::private("K")].into();
    let k = closure(&base, &BTreeSet::new(), 2).unwrap();
    assert!(k.contains(&secret));
}

#[test]
fn cap_is_an_error() {
    let base: BTreeSet<Term> = (0..50).map(|i| Term::atom(format!("A{i}"))).collect();
    let err = closure_with_cap(&base, &BTreeSet::new(), 2, 10).unwrap_err();
    assert!(err.to_string().starts_with("E_CLOSURE_CAP"), "{err}");
}
