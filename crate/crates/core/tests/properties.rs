use blicket_core::agents::{grid_forms, run_condition};
use blicket_core::evaluation::{
    crossval_individual, predictive_likelihood, score_participant, FoldPlan, ScoringOptions,
};
use blicket_core::io::{builtin_conditions, export, ingest_str};
use blicket_core::policy::{
    combined_eig, eig, joint_eig, random_policy, sample_intervention, softmax, Target,
};
use blicket_core::tasks::{exp2_conditions, find_condition};
use blicket_core::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn small_belief(n: usize, form_idx: &[usize], weights: &[f64]) -> JointBelief {
    let grid = grid_forms();
    let forms: Vec<SigmoidForm> = form_idx.iter().map(|&i| grid[i]).collect();
    let prior = FormPrior::from_unnormalized(weights[..forms.len()].to_vec()).unwrap();
    JointBelief::uniform_structures(n, forms.into(), &prior).unwrap()
}

fn events_strategy(n: usize) -> impl Strategy<Value = Vec<Event>> {
    prop::collection::vec(
        (0..1u32 << n, any::<bool>()).prop_map(|(b, o)| Event::new(BlockSet::from_bits(b), o)),
        0..12,
    )
}

fn setup() -> impl Strategy<Value = (usize, Vec<usize>, Vec<f64>, Vec<Event>)> {
    (1usize..=4).prop_flat_map(|n| {
        (
            Just(n),
            prop::collection::vec(0usize..400, 1..10),
            prop::collection::vec(0.01f64..1.0, 10),
            events_strategy(n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn posterior_ignores_event_order((n, forms, weights, events) in setup(), seed in any::<u64>()) {
        let b = small_belief(n, &forms, &weights);
        let mut shuffled = events.clone();
        rand::seq::SliceRandom::shuffle(&mut shuffled[..], &mut ChaCha8Rng::seed_from_u64(seed));
        let a = b.update_all(&events).unwrap();
        let c = b.update_all(&shuffled).unwrap();
        for (x, y) in a.probs().iter().zip(c.probs()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn relabeling_blocks_permutes_blicket_probabilities(
        (n, forms, weights, events) in setup(),
        seed in any::<u64>(),
    ) {
        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(&mut perm[..], &mut ChaCha8Rng::seed_from_u64(seed));
        let b = small_belief(n, &forms, &weights);
        let moved: Vec<Event> = events
            .iter()
            .map(|e| Event::new(e.intervention.permute(&perm), e.activated))
            .collect();
        let original = b.update_all(&events).unwrap().blicket_probabilities();
        let relabeled = b.update_all(&moved).unwrap().blicket_probabilities();
        for (block, p) in original.iter().enumerate() {
            prop_assert!((relabeled[perm[block]] - p).abs() < 1e-9);
        }
    }

    #[test]
    fn information_gains_are_bounded((n, forms, weights, events) in setup(), q in 0u32..16) {
        let b = small_belief(n, &forms, &weights).update_all(&events).unwrap();
        let q = BlockSet::from_bits(q & ((1 << n) - 1));
        let s = eig(&b, q, Target::Structures).unwrap();
        let f = eig(&b, q, Target::Forms).unwrap();
        let j = joint_eig(&b, q).unwrap();
        for v in [s, f, j] {
            prop_assert!(v >= -1e-9 && v <= 1.0 + 1e-9);
        }
        prop_assert!(j >= s.max(f) - 1e-9);
        let w = 0.37;
        let c = combined_eig(&b, q, w).unwrap();
        prop_assert!((c - (w * f + (1.0 - w) * s)).abs() < 1e-12);
    }

    #[test]
    fn softmax_is_shift_invariant_and_normalized(
        scores in prop::collection::vec(0.0f64..1.0, 1..64),
        shift in -5.0f64..5.0,
        t in prop::sample::select(vec![0.001, 0.01, 0.1, 1.0, 10.0, 100.0]),
    ) {
        let p = softmax(&scores, t).unwrap();
        let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
        let q = softmax(&shifted, t).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn fold_plans_stay_balanced(n in 4usize..60, seed in any::<u64>(), stratified in any::<bool>()) {
        let labels = ["a", "b", "c"];
        let ids: Vec<&str> = (0..n).map(|i| labels[(i * 7 + seed as usize) % 3]).collect();
        for plan in [FoldPlan::participants(&ids, seed, stratified).unwrap(), FoldPlan::interventions(n, seed).unwrap()] {
            let sizes = plan.fold_sizes();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            prop_assert_eq!(sizes.iter().sum::<usize>(), n);
        }
    }
}

#[test]
fn random_sampling_is_uniform() {
    let dist = random_policy(6);
    assert!(dist.iter().all(|p| *p == 1.0 / 64.0));
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let draws = 64_000;
    let mut counts = [0usize; 64];
    for _ in 0..draws {
        counts[sample_intervention(&dist, &mut rng).unwrap().bits() as usize] += 1;
    }
    let expected = draws as f64 / 64.0;
    let chi2: f64 = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    let critical = ChiSquared::new(63.0).unwrap().inverse_cdf(0.999);
    assert!(chi2 < critical, "chi2 {chi2} vs {critical}");
}

#[test]
fn scoring_conditions_on_the_prefix_only() {
    let condition = find_condition("noisy-conj", None).unwrap();
    let spec = AgentSpec::hbm(12, 0.6, 0.1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let log = run_condition(&spec, &condition, "p", &mut rng).unwrap();
    let options = ScoringOptions::default();
    let full = predictive_likelihood(&spec, &log, &condition, &options).unwrap();
    for keep in [1, 7, 19] {
        let mut cut = log.clone();
        cut.tasks[1].trials.truncate(keep);
        let prefix = predictive_likelihood(&spec, &cut, &condition, &options).unwrap();
        assert_eq!(prefix[..], full[..keep]);
    }
    assert!(full.iter().all(|p| *p > 0.0 && *p <= 1.0));
}

#[test]
fn grid_scores_match_direct_scoring_and_are_deterministic() {
    let condition = find_condition("conj", None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let log = run_condition(&AgentSpec::random(), &condition, "p", &mut rng).unwrap();
    let options = ScoringOptions::default();
    let kinds = [ModelKind::Hbm, ModelKind::StructureOnlyEig, ModelKind::FixedForm];
    let scores = score_participant(&log, &condition, &kinds, &options).unwrap();
    assert_eq!(scores, score_participant(&log, &condition, &kinds, &options).unwrap());

    let hbm = scores.model(ModelKind::Hbm).unwrap();
    for (slot, param) in [(0, 0), (7, 33), (23, 59)] {
        let p = hbm.params[param];
        let spec = AgentSpec::hbm(hbm.priors[slot], p.w, p.t).unwrap();
        let direct = predictive_likelihood(&spec, &log, &condition, &options).unwrap();
        assert_eq!(hbm.row(slot, param), &direct[..]);
    }
    let so = scores.model(ModelKind::StructureOnlyEig).unwrap();
    for (param, p) in so.params.iter().enumerate() {
        let spec = AgentSpec::hbm(1, 0.0, p.t).unwrap();
        let direct = predictive_likelihood(&spec, &log, &condition, &options).unwrap();
        assert_eq!(so.row(0, param), &direct[..]);
    }
}

#[test]
fn fitting_never_does_worse_than_the_grid_minimum() {
    let condition = find_condition("disj", None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let spec = AgentSpec::hbm(2, 0.5, 0.01).unwrap();
    let log = run_condition(&spec, &condition, "p", &mut rng).unwrap();
    let scores = score_participant(
        &log,
        &condition,
        &[ModelKind::Hbm, ModelKind::FixedForm],
        &ScoringOptions::default(),
    )
    .unwrap();
    let result = crossval_individual(&scores, 3).unwrap();
    for (fit, model) in result.fits.iter().zip(&scores.models) {
        for fold in 0..4 {
            let held = result.fold_plan.members(fold);
            let worst = (0..model.n_param_slots())
                .map(|p| model.marginal_score(p, &held))
                .fold(f64::INFINITY, f64::min);
            assert!(fit.fold_scores[fold] >= worst);
        }
    }
}

#[test]
fn transfer_tracks_the_training_form() {
    let forms = grid_forms();
    for (condition_id, lo, hi) in [("disj", 0.0, 1.0), ("3conj", 2.0, 3.0)] {
        let condition = find_condition(condition_id, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let spec = AgentSpec::hbm(7, 0.5, 1.0).unwrap();
        let log = run_condition(&spec, &condition, "p", &mut rng).unwrap();
        let mut agent = AgentState::new(spec, 3, None).unwrap();
        for e in log.tasks[0].events() {
            agent.observe(e).unwrap();
        }
        let fresh = agent.initial_prior().mass_on_bias(&forms, lo, hi);
        agent.begin_task(6, None).unwrap();
        let moved = agent.task_form_prior().mass_on_bias(&forms, lo, hi);
        assert!(moved > fresh, "{condition_id}: {moved} vs {fresh}");
    }
}

#[test]
fn exported_synthetic_logs_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let logs: Vec<_> = exp2_conditions()
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let spec = AgentSpec::fixed_form(0.4, 0.1).unwrap();
            run_condition(&spec, c, &format!("p{i}"), &mut rng).unwrap()
        })
        .collect();
    let text = export(&logs);
    assert_eq!(ingest_str(&text, &builtin_conditions(), false).unwrap().logs, logs);
}
