mod common;

use proptest::prelude::*;
use sea_core::engine::{BatchOrigin, Termination, Variant};
use sea_core::synthetic::{PlantSpec, SyntheticSpec};
use sea_core::testee::ErrorLandscape;

use common::{calls_ledger, criteria, fuzzed, World};

#[test]
fn budget_and_loop_guards_hold() {
    println!("{}", criteria::budget_and_loop_guards().unwrap());
}

fn strip(
    steps: &[(sea_core::engine::SearchState, sea_core::engine::StepOutput)],
) -> Vec<sea_core::engine::StepRecord> {
    steps
        .iter()
        .map(|(_, o)| {
            let mut r = o.record.clone();
            r.wall_time_ms = 0;
            r
        })
        .collect()
}

#[test]
fn same_seed_gives_identical_runs() {
    for seed in [3, 17, 40] {
        let f = fuzzed(seed);
        let (a, ta) = f.world.run(&f.settings, calls_ledger(f.limit));
        let (b, tb) = f.world.run(&f.settings, calls_ledger(f.limit));
        assert_eq!(ta, tb);
        assert_eq!(strip(&a), strip(&b));
        let answers = |s: &[(_, sea_core::engine::StepOutput)]| -> Vec<_> {
            s.iter()
                .flat_map(|(_, o)| o.answers.iter().map(|x| (x.qa_id.clone(), x.correct)))
                .collect()
        };
        assert_eq!(answers(&a), answers(&b));
    }
}

#[test]
fn first_step_is_shared_by_all_variants() {
    let f = fuzzed(11);
    let firsts: Vec<_> = [Variant::Full, Variant::NoPrune, Variant::RandomSelect]
        .into_iter()
        .map(|v| {
            let mut s = f.settings.clone();
            s.engine.variant = v;
            let (steps, _) = f.world.run(&s, calls_ledger(f.limit));
            let r = &steps[0].1.record;
            (
                r.batch
                    .iter()
                    .map(|b| b.para_id.clone())
                    .collect::<Vec<_>>(),
                r.wrong,
                r.questions,
            )
        })
        .collect();
    assert_eq!(firsts[0], firsts[1]);
    assert_eq!(firsts[0], firsts[2]);
}

#[test]
fn error_free_testee_falls_back_to_uniform_batches() {
    let world = World::build(&SyntheticSpec::default(), &PlantSpec::default(), 32, 4)
        .with_landscape(ErrorLandscape {
            regions: vec![],
            base_error_prob: 0.0,
            seed: 1,
        });
    let mut settings = sea_core::engine::Settings::default();
    settings.embedding = world.embed_cfg.clone();
    settings.retrieval.batch_size = 6;
    settings.engine.max_steps = Some(4);
    let (steps, term) = world.run(&settings, calls_ledger(1e9));
    assert_eq!(term, Termination::MaxSteps);
    assert_eq!(steps.len(), 4);
    assert_eq!(steps[0].1.record.origin, BatchOrigin::Initial);
    for (state, out) in &steps[1..] {
        assert_eq!(out.record.origin, BatchOrigin::Fallback);
        assert!(state.dag.is_empty());
        assert_eq!(out.record.t_e, Some(0.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn one_step_budget_runs_one_step(seed in any::<u64>()) {
        let f = fuzzed(seed);
        let one = (f.settings.retrieval.batch_size * f.settings.qa.target_total()) as f64;
        let (steps, term) = f.world.run(&f.settings, calls_ledger(one));
        prop_assert_eq!(steps.len(), 1);
        prop_assert_eq!(term, Termination::BudgetExhausted);
    }

    #[test]
    fn no_paragraph_is_evaluated_twice(seed in any::<u64>()) {
        let f = fuzzed(seed);
        let (steps, _) = f.world.run(&f.settings, calls_ledger(f.limit));
        let mut seen = std::collections::HashSet::new();
        for (_, out) in &steps {
            for b in &out.record.batch {
                prop_assert!(seen.insert(b.para_id.clone()), "{} twice", b.para_id);
            }
        }
    }
}
