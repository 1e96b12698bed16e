use std::collections::BTreeMap;

use fleetroute_core::accounting::{call_cost, call_latency, CallCharge, Composition, ResourceLedger, Usage};
use fleetroute_core::capability::{
    capability_estimate, default_knob_grid, generate_boundary_tasks, performance_variance, select_seed_tasks,
    update_capability, CapabilityPriorTable, Observation, PerformanceMatrix, TemplateMutator,
};
use fleetroute_core::domain::{
    make_indicator, table1_prior, Difficulty, Domain, ExecutionIndicator, LambdaOverride, ModelProfile, Paradigm,
    PreferenceMode, PreferenceTable, ProfileKind, TaskSpec, CANONICAL_DOMAINS,
};
use fleetroute_core::eval::ScoreCostRow;
use fleetroute_core::execution::{CallKind, CallMeta, CompletionRequest, Message, SimHints};
use fleetroute_core::par;
use fleetroute_core::policy::{
    compose_step, policy_update, route_decision, Bucket, ComposeTarget, EpisodeSample, Fleet, Role,
    RouteMode, RoutePolicy,
};
use fleetroute_core::reward::{task_reward, unified_reward, unified_reward_for, SubtaskOutcome, TaskOutcome};
use fleetroute_core::rng::keyed_rng;
use fleetroute_core::sim::{calibrated_scenario, reference_cost_index, sim_call, CalibrationParams, ReferenceTable};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::Zero;
use proptest::prelude::*;

fn domain(i: usize) -> Domain {
    Domain::new(CANONICAL_DOMAINS[i % CANONICAL_DOMAINS.len()]).unwrap()
}

fn level(l: u8) -> Difficulty {
    Difficulty::new(l).unwrap()
}

fn profile(id: String, preferred: Vec<Domain>, pp: f64, pc: f64, ttft: f64, tps: f64) -> ModelProfile {
    ModelProfile {
        id,
        kind: ProfileKind::Model,
        price_prompt: pp,
        price_completion: pc,
        ttft_ms: ttft,
        tokens_per_second: tps,
        max_context: 128_000,
        preferred_domains: preferred,
    }
}

fn arb_matrix() -> impl Strategy<Value = PerformanceMatrix> {
    (1usize..=6, 1usize..=50).prop_flat_map(|(m, n)| {
        prop::collection::vec(prop::collection::vec(0u8..=10, n), m).prop_map(move |rows| {
            let scores = rows
                .into_iter()
                .map(|r| r.into_iter().map(|v| v as f64 / 10.0).collect())
                .collect();
            PerformanceMatrix::new(
                (0..m).map(|i| format!("m{i}")).collect(),
                (0..n).map(|j| format!("t{j:02}")).collect(),
                scores,
            )
            .unwrap()
        })
    })
}

fn arb_observation() -> impl Strategy<Value = Observation> {
    (0usize..3, 0usize..8, 1u8..=5, 0.0f64..=1.0).prop_map(|(a, d, l, score)| Observation {
        agent: format!("agent{a}"),
        domain: domain(d),
        level: level(l),
        score,
    })
}

fn arb_bucket() -> impl Strategy<Value = Bucket> {
    (0usize..8, 1u8..=5, 0usize..3).prop_map(|(d, l, m)| Bucket::new(domain(d), level(l), PreferenceMode::ALL[m]))
}

fn rational(x: f64) -> BigRational {
    BigRational::from_float(x).unwrap()
}

fn exact_cost(u: Usage, p: &ModelProfile) -> BigRational {
    let million = BigRational::from_integer(BigInt::from(1_000_000));
    (BigRational::from_integer(BigInt::from(u.prompt_tokens)) * rational(p.price_prompt)
        + BigRational::from_integer(BigInt::from(u.completion_tokens)) * rational(p.price_completion))
        / million
}

#[test]
fn indicator_round_trips_for_every_paradigm() {
    for p in Paradigm::ALL {
        let z = make_indicator(p);
        assert_eq!(z.as_array().iter().map(|&v| v as u32).sum::<u32>(), 1);
        assert_eq!(z.paradigm().unwrap(), p);
        assert_eq!(make_indicator(z.paradigm().unwrap()), z);
    }
}

#[test]
fn default_preferences_are_ordered() {
    PreferenceTable::default().validate().unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn indicator_valid_iff_one_hot(z in prop::array::uniform3(0u8..=2)) {
        let ind = ExecutionIndicator { z_sm: z[0], z_sa: z[1], z_ma: z[2] };
        let one_hot = z.iter().filter(|&&v| v == 1).count() == 1 && z.iter().all(|&v| v <= 1);
        prop_assert_eq!(ind.validate().is_ok(), one_hot);
    }

    #[test]
    fn table1_prior_is_a_permutation(prefs in prop::collection::vec(prop::collection::vec(0usize..8, 0..3), 0..8), d in 0usize..8) {
        let fleet: Vec<ModelProfile> = prefs
            .iter()
            .enumerate()
            .map(|(i, p)| profile(format!("m{i}"), p.iter().map(|&j| domain(j)).collect(), 1.0, 1.0, 0.0, 1.0))
            .collect();
        let mut out: Vec<&str> = table1_prior(&domain(d), &fleet).iter().map(|p| p.id.as_str()).collect();
        let mut ids: Vec<&str> = fleet.iter().map(|p| p.id.as_str()).collect();
        out.sort();
        ids.sort();
        prop_assert_eq!(out, ids);
    }

    #[test]
    fn preference_overrides_validate_iff_ordered(c in prop::array::uniform3(0.0f64..0.1), l in prop::array::uniform3(0.0f64..0.01)) {
        let mut t = PreferenceTable::default();
        for (i, m) in PreferenceMode::ALL.iter().enumerate() {
            t.apply_override(*m, LambdaOverride { lambda_c: Some(c[i]), lambda_l: Some(l[i]) });
        }
        prop_assert_eq!(t.validate().is_ok(), c[0] > c[1] && c[1] > c[2]);
    }

    #[test]
    fn variance_is_row_permutation_invariant(m in arb_matrix(), rot in 0usize..6) {
        let mut rows = m.scores.clone();
        let mut models = m.models.clone();
        let k = rot % rows.len();
        rows.rotate_left(k);
        models.rotate_left(k);
        let permuted = PerformanceMatrix::new(models, m.tasks.clone(), rows).unwrap();
        for (j, t) in m.tasks.iter().enumerate() {
            let v = performance_variance(&m, t).unwrap();
            prop_assert_eq!(v, performance_variance(&permuted, t).unwrap());
            let identical = m.scores.iter().all(|r| r[j] == m.scores[0][j]);
            prop_assert_eq!(v == 0.0, identical);
        }
    }

    #[test]
    fn seed_selection_size_and_uniqueness(m in arb_matrix(), q in 0.01f64..=1.0) {
        let seeds = select_seed_tasks(&m, q).unwrap();
        let n = m.tasks.len();
        let want = ((q * n as f64) - 1e-9).ceil().max(1.0) as usize;
        prop_assert_eq!(seeds.len(), want.min(n));
        let mut sorted = seeds.clone();
        sorted.sort();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), seeds.len());
        prop_assert!(seeds.iter().all(|s| m.tasks.contains(s)));
    }

    #[test]
    fn capability_updates_commute(obs in prop::collection::vec(arb_observation(), 1..40), seed in any::<u64>()) {
        let mut forward = CapabilityPriorTable::new();
        for o in &obs {
            forward = update_capability(&forward, &o.agent, &o.domain, o.level, o.score).unwrap();
        }
        let mut shuffled = obs.clone();
        let mut rng = keyed_rng(&[&seed.to_string()]);
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut rng);
        let mut batch = CapabilityPriorTable::new();
        batch.apply_batch(&shuffled).unwrap();
        for o in &obs {
            let a = capability_estimate(&forward, &o.agent, &o.domain, o.level);
            let b = capability_estimate(&batch, &o.agent, &o.domain, o.level);
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn capability_estimate_is_strictly_inside_unit_interval(obs in prop::collection::vec(arb_observation(), 0..200)) {
        let mut t = CapabilityPriorTable::new();
        t.apply_batch(&obs).unwrap();
        for a in 0..3 {
            for d in 0..8 {
                for l in 1..=5 {
                    let e = capability_estimate(&t, &format!("agent{a}"), &domain(d), level(l));
                    prop_assert!(e > 0.0 && e < 1.0);
                }
            }
        }
    }

    #[test]
    fn boundary_generation_is_deterministic(d in 0usize..8, l in 1u8..=5, words in "[a-z]{1,8}( [a-z]{1,8}){0,6}") {
        let seed = TaskSpec::new("seed-1", words, domain(d), level(l));
        let a = generate_boundary_tasks(&seed, &default_knob_grid(), &TemplateMutator).unwrap();
        let b = generate_boundary_tasks(&seed, &default_knob_grid(), &TemplateMutator).unwrap();
        prop_assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn softmax_sums_to_one_after_updates(
        samples in prop::collection::vec((arb_bucket(), 0usize..3, -5.0f64..5.0), 1..60),
        chunk in 1usize..8,
    ) {
        let mut policy = RoutePolicy::default();
        let eps: Vec<EpisodeSample> = samples
            .iter()
            .map(|(b, p, r)| EpisodeSample { bucket: b.clone(), paradigm: Paradigm::ALL[*p], reward: *r })
            .collect();
        for batch in eps.chunks(chunk) {
            policy = policy_update(&policy, batch).unwrap();
            for (b, _, _) in &samples {
                let s: f64 = policy.probabilities(b).iter().sum();
                prop_assert!((s - 1.0).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn greedy_route_is_shift_invariant(b in arb_bucket(), logits in prop::array::uniform3(-10.0f64..10.0), shift in -100.0f64..100.0, mask in prop::array::uniform3(any::<bool>())) {
        prop_assume!(mask.iter().any(|m| *m));
        let mut p = RoutePolicy::default();
        p.weights.insert(b.key(), logits);
        let mut q = p.clone();
        q.weights.insert(b.key(), logits.map(|l| l + shift));
        let a = route_decision(&p, &b, mask, RouteMode::Greedy, "k").unwrap();
        let c = route_decision(&q, &b, mask, RouteMode::Greedy, "k").unwrap();
        prop_assert_eq!(a.0, c.0);
        prop_assert!((a.1 - c.1).abs() < 1e-9);
    }

    #[test]
    fn sampled_route_is_seeded(b in arb_bucket(), logits in prop::array::uniform3(-3.0f64..3.0), seed in any::<u64>()) {
        let mut p = RoutePolicy::default();
        p.weights.insert(b.key(), logits);
        let a = route_decision(&p, &b, [true; 3], RouteMode::Sampled { seed }, "task").unwrap();
        let c = route_decision(&p.clone(), &b, [true; 3], RouteMode::Sampled { seed }, "task").unwrap();
        prop_assert_eq!(a, c);
    }

    #[test]
    fn zero_advantage_batch_leaves_logits(b in arb_bucket(), logits in prop::array::uniform3(-3.0f64..3.0), base in -2.0f64..2.0, picks in prop::collection::vec(0usize..3, 1..10)) {
        let mut p = RoutePolicy::default();
        p.weights.insert(b.key(), logits);
        p.baselines.insert(b.key(), base);
        let batch: Vec<EpisodeSample> = picks
            .iter()
            .map(|&i| EpisodeSample { bucket: b.clone(), paradigm: Paradigm::ALL[i], reward: base })
            .collect();
        let next = policy_update(&p, &batch).unwrap();
        prop_assert_eq!(next.weights, p.weights);
    }

    #[test]
    fn zero_lambda_composition_picks_best_estimate(
        ests in prop::collection::vec(0u32..20, 1..6),
        pref in prop::collection::vec(any::<bool>(), 6),
        l in 1u8..=5,
        seed in any::<u64>(),
    ) {
        let math = Domain::math();
        let models: Vec<ModelProfile> = ests
            .iter()
            .enumerate()
            .map(|(i, _)| {
                let p = if pref[i] { vec![math.clone()] } else { vec![] };
                profile(format!("m{i}"), p, 1.0 + i as f64, 2.0, 100.0 * i as f64, 10.0)
            })
            .collect();
        let fleet = Fleet::new(models.clone(), vec![], 1000);
        let mut priors = CapabilityPriorTable::new();
        let obs: Vec<Observation> = ests
            .iter()
            .enumerate()
            .flat_map(|(i, &k)| {
                (0..20).map(move |j| Observation {
                    agent: format!("m{i}"),
                    domain: Domain::math(),
                    level: level(l),
                    score: if j < k { 1.0 } else { 0.0 },
                })
            })
            .collect();
        priors.apply_batch(&obs).unwrap();
        let free = fleetroute_core::domain::Preference { mode: PreferenceMode::PerformancePriority, lambda_c: 0.0, lambda_l: 0.0 };
        let target = ComposeTarget { paradigm: Paradigm::SingleModel, role: Role::Solver, domain: &math, level: level(l), text: "solve" };
        let choice = compose_step(&target, &priors, &fleet, &free, 0.0, &mut keyed_rng(&[&seed.to_string()])).unwrap();
        let mut best: Option<(&str, f64)> = None;
        for m in table1_prior(&math, &models) {
            let e = capability_estimate(&priors, &m.id, &math, level(l));
            if best.is_none_or(|(_, b)| e > b) {
                best = Some((m.id.as_str(), e));
            }
        }
        prop_assert_eq!(choice.action.model_id.as_str(), best.unwrap().0);
    }

    #[test]
    fn cost_is_linear(a in (0u64..5_000_000, 0u64..5_000_000), b in (0u64..5_000_000, 0u64..5_000_000), pp in 0.0f64..100.0, pc in 0.0f64..100.0) {
        let p = profile("m".into(), vec![], pp, pc, 0.0, 1.0);
        let (ua, ub) = (Usage::new(a.0, a.1), Usage::new(b.0, b.1));
        prop_assert_eq!(exact_cost(ua + ub, &p), exact_cost(ua, &p) + exact_cost(ub, &p));
        let whole = call_cost(ua + ub, &p);
        let parts = call_cost(ua, &p) + call_cost(ub, &p);
        prop_assert!((whole - parts).abs() <= 1e-12 * whole.abs().max(f64::MIN_POSITIVE));
    }

    #[test]
    fn cost_ignores_composition(calls in prop::collection::vec((0.0f64..5.0, 0.0f64..30.0), 1..8)) {
        let charges: Vec<CallCharge> = calls.iter().enumerate().map(|(i, (c, l))| CallCharge::new(format!("c{i}"), *c, *l)).collect();
        let mut seq = ResourceLedger::new();
        seq.extend(&charges, Composition::Sequential);
        let mut par = ResourceLedger::new();
        par.extend(&charges, Composition::Parallel);
        prop_assert_eq!(seq.total_cost, par.total_cost);
        prop_assert!(par.total_latency <= seq.total_latency);
    }

    #[test]
    fn ledger_replay_matches_totals(stages in prop::collection::vec((any::<bool>(), prop::collection::vec((0.0f64..5.0, 0.0f64..30.0), 1..5)), 1..6)) {
        let mut ledger = ResourceLedger::new();
        let mut n = 0;
        for (parallel, calls) in &stages {
            let charges: Vec<CallCharge> = calls
                .iter()
                .map(|(c, l)| {
                    n += 1;
                    CallCharge::new(format!("c{n}"), *c, *l)
                })
                .collect();
            let comp = if *parallel { Composition::Parallel } else { Composition::Sequential };
            ledger.extend(&charges, comp);
        }
        let replayed = ResourceLedger::replay(&ledger.per_call, &ledger.stages);
        prop_assert_eq!(replayed, ledger);
    }

    #[test]
    fn reward_strictly_decreases_in_cost_and_latency(r in 0.0f64..2.0, c in 0.0f64..10.0, l in 0.0f64..100.0, dc in 0.01f64..5.0, lc in 0.001f64..0.1, ll in 0.0001f64..0.01, p in 0usize..3) {
        let para = Paradigm::ALL[p];
        let base = unified_reward_for(para, r, c, l, lc, ll, 0.1).total;
        prop_assert!(unified_reward_for(para, r, c + dc, l, lc, ll, 0.1).total < base);
        prop_assert!(unified_reward_for(para, r, c, l + dc, lc, ll, 0.1).total < base);
    }

    #[test]
    fn preset_penalties_are_ordered(r in 0.0f64..2.0, c in 0.001f64..10.0, l in 0.001f64..100.0, p in 0usize..3) {
        let t = PreferenceTable::default();
        let total = |m: PreferenceMode| {
            let pr = t.preference(m);
            unified_reward_for(Paradigm::ALL[p], r, c, l, pr.lambda_c, pr.lambda_l, 0.1).total
        };
        prop_assert!(total(PreferenceMode::CostPriority) <= total(PreferenceMode::Auto));
        prop_assert!(total(PreferenceMode::Auto) <= total(PreferenceMode::PerformancePriority));
    }

    #[test]
    fn multi_agent_reward_is_monotone(subs in prop::collection::vec(0.0f64..=1.0, 1..6), k in 0usize..6, bump in 0.0f64..=1.0, beta in 0.0f64..1.0, fin in any::<bool>()) {
        let outcome = if fin { TaskOutcome::correct("x") } else { TaskOutcome::incorrect("x") };
        let mk = |v: &[f64]| -> Vec<SubtaskOutcome> {
            v.iter().enumerate().map(|(i, r)| SubtaskOutcome { index: i + 1, r_subtask: *r, model_id: "m".into(), tools_used: vec![] }).collect()
        };
        let mut raised = subs.clone();
        let i = k % subs.len();
        raised[i] = (raised[i] + bump).min(1.0);
        let lo = task_reward(Paradigm::MultiAgent, &outcome, &mk(&subs), beta).unwrap();
        let hi = task_reward(Paradigm::MultiAgent, &outcome, &mk(&raised), beta).unwrap();
        prop_assert!(hi >= lo);
    }

    #[test]
    fn masked_paradigm_terms_contribute_nothing(p in 0usize..3, r in prop::array::uniform3(-1.0f64..2.0), c in 0.0f64..5.0, l in 0.0f64..50.0) {
        let para = Paradigm::ALL[p];
        let mut only_active = [0.0; 3];
        only_active[p] = r[p];
        let full = unified_reward(make_indicator(para), r, c, l, 0.01, 0.002).unwrap();
        let masked = unified_reward(make_indicator(para), only_active, c, l, 0.01, 0.002).unwrap();
        prop_assert_eq!(full.total, masked.total);
        // flipping the indicator moves the total to the other paradigm's term
        let q = (p + 1) % 3;
        let flipped = unified_reward(make_indicator(Paradigm::ALL[q]), only_active, c, l, 0.01, 0.002).unwrap();
        prop_assert_eq!(flipped.total, 0.0 - 0.01 * c - 0.002 * l);
    }

    #[test]
    fn row_average_recomputes(scores in prop::collection::vec(prop::option::of(0.0f64..=100.0), 0..6)) {
        let row = ScoreCostRow::new("s", scores.clone(), 1.0);
        let present: Vec<f64> = scores.iter().flatten().copied().collect();
        let want = if present.is_empty() { None } else { Some(present.iter().sum::<f64>() / present.len() as f64) };
        prop_assert_eq!(row.average, want);
    }
}

#[test]
fn exact_cost_matches_float_on_fixture() {
    let p = profile("m".into(), vec![], 2.0, 6.0, 200.0, 60.0);
    let u = Usage::new(1000, 500);
    assert_eq!(exact_cost(u, &p), BigRational::new(BigInt::from(5), BigInt::from(1000)));
    assert_eq!(call_cost(u, &p), 0.005);
    assert_eq!(call_latency(Usage::new(0, 300), &p), 5.2);
    assert!(exact_cost(Usage::new(0, 0), &p).is_zero());
}

fn sim_request(model_call: u64, task: &str, seed: u64) -> CompletionRequest {
    let mut meta = CallMeta::new(task, model_call, seed, CallKind::Answer);
    meta.hints = Some(SimHints {
        domain: Some(Domain::math()),
        difficulty: Some(level(3)),
        expected: Some("42".into()),
        numeric: true,
        ..Default::default()
    });
    CompletionRequest {
        messages: vec![Message::user(format!("question for {task}"))],
        max_tokens: None,
        temperature: 0.0,
        meta,
    }
}

#[test]
fn sim_outcomes_ignore_call_order() {
    let scn = calibrated_scenario(&CalibrationParams::default()).unwrap();
    let model = scn.model("qwen3-32b").unwrap();
    let reqs: Vec<CompletionRequest> = (0..200)
        .map(|i| sim_request(i % 7, &format!("t{}", i / 7), 11))
        .collect();
    let forward = par::map(&reqs, |r| sim_call(model, r));
    let mut reversed: Vec<_> = reqs.iter().rev().map(|r| sim_call(model, r)).collect();
    reversed.reverse();
    assert_eq!(forward, reversed);
}

#[test]
fn calibrated_cost_ratios_match_reference() {
    let params = CalibrationParams::default();
    let scn = calibrated_scenario(&params).unwrap();
    let table = ReferenceTable::bundled();
    let refs: BTreeMap<String, f64> = table
        .single_models()
        .map(|r| (r.model_id.clone().unwrap(), r.cost))
        .collect();
    for a in &scn.models {
        for b in &scn.models {
            let got = reference_cost_index(&a.profile, &params) / reference_cost_index(&b.profile, &params);
            let want = refs[&a.profile.id] / refs[&b.profile.id];
            assert!((got / want - 1.0).abs() < 0.01, "{} / {}: {got} vs {want}", a.profile.id, b.profile.id);
        }
    }
}
