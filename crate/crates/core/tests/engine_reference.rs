mod common;

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

use rand::rngs::StdRng;
use rand::SeedableRng;

use svmcheck::corpus;
use svmcheck::engine::{fingerprint, Bound, GlobalState, Limits, Local, Machine, ResourceStatus, VariantTag};
use svmcheck::invariants::verify;
use svmcheck::term::{KnowledgeSet, Term};

use common::{brute_force, random_model, violation_keys};

fn small_limits() -> Limits {
    Limits { max_states: 10_000, ..Limits::default() }
}

#[test]
fn bfs_matches_brute_force_on_random_models() {
    let mut rng = StdRng::seed_from_u64(11);
    let mut compared = 0;
    for _ in 0..150 {
        let m = random_model(&mut rng, false);
        let limits = small_limits();
        let machine = match Machine::new(&m, &limits) {
            Ok(mc) => mc,
            Err(e) => panic!("{e}\n{}", svmcheck::serialize(&m)),
        };
        let search = machine.explore().unwrap();
        if search.resource_status != ResourceStatus::Completed {
            continue;
        }
        let reference = brute_force(&machine);
        let got: std::collections::BTreeSet<_> = search.violations.iter().map(|v| v.key()).collect();
        assert_eq!(search.reachable_state_count, reference.states, "{}", svmcheck::serialize(&m));
        assert_eq!(search.commit_states, reference.commit_states);
        assert_eq!(got, reference.violations, "{}", svmcheck::serialize(&m));
        compared += 1;
    }
    assert!(compared >= 100, "only {compared} models completed");
}

#[test]
fn corpus_brute_force() {
    for name in corpus::names() {
        let m = corpus::load(name).unwrap();
        let machine = Machine::new(&m, &Limits::default()).unwrap();
        let search = machine.explore().unwrap();
        let reference = brute_force(&machine);
        assert_eq!(search.reachable_state_count, reference.states, "{name}");
        let got: std::collections::BTreeSet<_> = search.violations.iter().map(|v| v.key()).collect();
        assert_eq!(got, reference.violations, "{name}");
    }
}

#[test]
fn violation_traces_replay() {
    for name in corpus::names() {
        let m = corpus::load(name).unwrap();
        let machine = Machine::new(&m, &Limits::default()).unwrap();
        for v in machine.explore().unwrap().violations {
            let end = machine.replay_trace(&v.trace).unwrap();
            assert!(machine.check_state(&end).iter().any(|(k, _)| *k == v.key()), "{name}");
            assert_eq!(fingerprint(&end), v.trace.terminal());
        }
    }
}

#[test]
fn dedup_and_workers_do_not_change_violations() {
    let mut rng = StdRng::seed_from_u64(5);
    let mut models: Vec<_> = corpus::names().iter().map(|n| corpus::load(n).unwrap()).collect();
    models.extend((0..40).map(|_| random_model(&mut rng, false)));
    for m in &models {
        let base = verify(m, &small_limits()).unwrap();
        if base.search.resource_status != ResourceStatus::Completed {
            continue;
        }
        let par = verify(m, &Limits { workers: 4, ..small_limits() }).unwrap();
        assert_eq!(violation_keys(&base.verdict), violation_keys(&par.verdict), "{}", m.name);
        assert_eq!(base.search.reachable_state_count, par.search.reachable_state_count);
        // Traces are shortest either way.
        let len = |o: &svmcheck::invariants::VerifyOutcome| {
            o.verdict.violations().iter().map(|v| (v.key(), v.trace.len())).collect::<Vec<_>>()
        };
        let mut a = len(&base);
        let mut b = len(&par);
        a.sort();
        b.sort();
        assert_eq!(a, b);

        let tree = verify(m, &Limits { dedup: false, max_states: 5_000, ..Limits::default() }).unwrap();
        if tree.search.resource_status == ResourceStatus::Completed {
            assert_eq!(violation_keys(&base.verdict), violation_keys(&tree.verdict), "{}", m.name);
            assert!(tree.search.reachable_state_count >= base.search.reachable_state_count);
        }
    }
}

#[test]
fn benign_run_commits_for_corpus() {
    for name in corpus::names() {
        let m = corpus::load(name).unwrap();
        let b = svmcheck::benign_run(&m, &Limits::default()).unwrap();
        assert_eq!(b.commit_states.len(), m.sessions as usize, "{name}");
    }
}

#[test]
fn fingerprints_do_not_collide() {
    let m = corpus::load("vm_startup").unwrap();
    let machine = Machine::new(&m, &Limits::default()).unwrap();
    let init = machine.initial_state().unwrap();
    let mut seen = HashSet::new();
    let mut states = HashSet::new();
    for i in 0..100_000u32 {
        let mut st: GlobalState = init.clone();
        let mut bindings = BTreeMap::new();
        bindings.insert(
            "n".to_string(),
            Bound {
                term: Term::Nonce { id: "N".into(), owner: "customer".into(), session: i },
                tag: VariantTag::Pristine,
                trusted: true,
            },
        );
        bindings.insert(
            "t".to_string(),
            Bound { term: Term::atom(format!("T{}", i % 7)), tag: VariantTag::Fabricated, trusted: false },
        );
        st.locals[0] = Local { state: (i % 3) as usize, bindings };
        st.session = i % 2;
        st.replay_store = Arc::clone(&init.replay_store);
        st.knowledge = Arc::new(KnowledgeSet::empty(2));
        assert!(seen.insert(fingerprint(&st)));
        states.insert(st);
    }
    assert_eq!(states.len(), 100_000);
}
