use proptest::prelude::*;

use super::*;
use crate::envs::{make_world, Action, SizeOverrides};
use crate::oracle::{ExactAnalysis, TabularModel, TabularPolicy, DEFAULT_CAP};
use crate::rng::stream;

fn small(name: WorldName, length: usize, t_max: usize) -> WorldSpec {
    make_world(
        name,
        SizeOverrides {
            length: Some(length),
            t_max: Some(t_max),
            ..Default::default()
        },
    )
    .unwrap()
}

fn cfg(algo: Algo, world: WorldName) -> TrainConfig {
    TrainConfig {
        algo,
        world,
        hidden: 8,
        batch_size: 32,
        t_smooth: 8,
        warmup_batches: 0,
        ..Default::default()
    }
}

fn bundle(world: &WorldSpec, c: &TrainConfig, seed: u64) -> AgentBundle {
    AgentBundle::new(world, c, &mut stream(seed, 0)).unwrap()
}

/// Policy that never terminates at the root when another action is legal.
fn no_early_stop(b: &mut AgentBundle, world: &WorldSpec) {
    b.policy.zero_output();
    let out_b = b.policy.store.blocks.iter_mut().find(|blk| blk.name == "out.b").unwrap();
    out_b.values[world.action_index(Action::Terminate)] = -40.0;
}

fn trace(world: &WorldSpec, start: StateId, steps: &[(Action, usize)]) -> Trajectory {
    let mut t = Trajectory::new(start);
    t.steps = steps.iter().map(|&(a, s)| (a, StateId(s))).collect();
    t.check(world).unwrap();
    t
}

/// Policy that forbids termination at the root prefix.
fn tabular_no_early_stop(world: &WorldSpec) -> TabularPolicy {
    let mut p = TabularPolicy::uniform();
    let mut l = vec![0.0; world.n_actions()];
    l[world.action_index(Action::Terminate)] = f64::NEG_INFINITY;
    p.logits.insert(vec![world.start_states[0].0 as u32], l);
    p
}

#[test]
fn zero_horizon_forces_termination() {
    let mut w = make_world(WorldName::Det1d, SizeOverrides::default()).unwrap();
    w.t_max = 0;
    let b = bundle(&w, &cfg(Algo::Vic, WorldName::Det1d), 1);
    let omega = sample_episode(&b, &w, &mut stream(2, 0)).unwrap();
    assert_eq!(omega.steps, vec![(Action::Terminate, w.start_states[0])]);
}

#[test]
fn same_seed_same_episode() {
    let w = make_world(WorldName::Stoch2d, SizeOverrides::default()).unwrap();
    let b = bundle(&w, &cfg(Algo::Vic, WorldName::Stoch2d), 1);
    let a: Vec<_> = (0..20).map(|i| sample_episode(&b, &w, &mut stream(9, i)).unwrap()).collect();
    let c: Vec<_> = (0..20).map(|i| sample_episode(&b, &w, &mut stream(9, i)).unwrap()).collect();
    assert_eq!(a, c);
}

#[test]
fn uniform_moves_on_three_cells_give_known_option_distribution() {
    let w = small(WorldName::Stoch1d, 3, 1);
    let mut b = bundle(&w, &cfg(Algo::Vic, WorldName::Stoch1d), 1);
    no_early_stop(&mut b, &w);
    let n = 40_000;
    let mut rng = stream(5, 0);
    let mut counts = std::collections::BTreeMap::<(Action, usize), usize>::new();
    for _ in 0..n {
        let omega = sample_episode(&b, &w, &mut rng).unwrap();
        assert_eq!(omega.steps.len(), 2);
        *counts.entry((omega.steps[0].0, omega.steps[0].1 .0)).or_default() += 1;
    }
    let (l, r) = (Action::Move(0), Action::Move(1));
    for (key, p) in [((l, 0), 0.35), ((l, 2), 0.15), ((r, 0), 0.15), ((r, 2), 0.35)] {
        let f = counts.get(&key).copied().unwrap_or(0) as f64 / n as f64;
        assert!((f - p).abs() < 0.01, "{key:?}: {f} vs {p}");
    }
}

struct Fixed(Vec<Vec<f64>>);

impl ActionModel for Fixed {
    fn action_log_probs(&self, _: &WorldSpec, _: &Trajectory, _: Option<StateId>) -> Result<Vec<Vec<f64>>> {
        Ok(self.0.clone())
    }
}

#[test]
fn single_step_policy_term_is_log_two() {
    let w = small(WorldName::Det1d, 3, 1);
    let s0 = w.start_states[0];
    let omega = trace(&w, s0, &[(Action::Terminate, s0.0)]);
    let ninf = f64::NEG_INFINITY;
    let p = Fixed(vec![vec![0.5f64.ln(), ninf, 0.5f64.ln()]]);
    let q = Fixed(vec![vec![ninf, ninf, 0.0]]);
    let r = policy_term(&w, &omega, &p, &q).unwrap();
    assert!((r - 2f64.ln()).abs() < 1e-12);
}

#[test]
fn equal_models_give_zero_reward() {
    let w = make_world(WorldName::Stoch1d, SizeOverrides::default()).unwrap();
    let mut b = bundle(&w, &cfg(Algo::Vic, WorldName::Stoch1d), 3);
    b.policy.zero_output();
    b.inference.zero_output();
    let mut rng = stream(4, 0);
    for _ in 0..20 {
        let omega = sample_episode(&b, &w, &mut rng).unwrap();
        let r = reward_vic(&b, &w, &omega).unwrap();
        assert!(r.policy_term.abs() < 1e-12);
        assert_eq!(r.transition_term, 0.0);
    }
}

#[test]
fn vic_reward_ignores_transition_noise() {
    let det = make_world(WorldName::Det1d, SizeOverrides::default()).unwrap();
    let sto = make_world(WorldName::Stoch1d, SizeOverrides::default()).unwrap();
    let b = bundle(&det, &cfg(Algo::Vic, WorldName::Det1d), 3);
    let omega = sample_episode(&b, &det, &mut stream(1, 1)).unwrap();
    let a = reward_vic(&b, &det, &omega).unwrap();
    let c = reward_vic(&b, &sto, &omega).unwrap();
    assert_eq!(a, c);
}

#[test]
fn exact_transition_heads_give_known_correction() {
    let w = small(WorldName::Stoch1d, 3, 1);
    let pol = tabular_no_early_stop(&w);
    let s0 = w.start_states[0];
    let an = ExactAnalysis::new(&w, s0, &pol, DEFAULT_CAP).unwrap();
    let mut rng = stream(0, 0);
    let prior = TabularModel::perturbed(&w, &an, false, false, 0.0, &mut rng).unwrap();
    let post = TabularModel::perturbed(&w, &an, false, true, 0.0, &mut rng).unwrap();
    let omega = trace(&w, s0, &[(Action::Move(0), 0), (Action::Terminate, 0)]);
    let t = transition_term(&w, &omega, &prior, &post).unwrap();
    assert!((t - (1.0f64 / 0.7).ln()).abs() < 1e-12, "{t}");
    assert!((t - 0.3567).abs() < 5e-5);
    let same = transition_term(&w, &omega, &prior, &prior).unwrap();
    assert_eq!(same, 0.0);
}

#[test]
fn exact_heads_reproduce_vic_plus_bias() {
    for (name, t_max) in [(WorldName::Stoch1d, 3), (WorldName::StochTree, 3), (WorldName::Det1d, 3)] {
        let w = make_world(name, SizeOverrides { t_max: Some(t_max), ..Default::default() }).unwrap();
        let s0 = w.start_states[0];
        let mut rng = stream(11, 0);
        let pol = TabularPolicy::random(&w, s0, &mut rng, 0.7, DEFAULT_CAP).unwrap();
        let an = ExactAnalysis::new(&w, s0, &pol, DEFAULT_CAP).unwrap();
        let q = TabularModel::perturbed(&w, &an, true, true, 0.0, &mut rng).unwrap();
        let prior = TabularModel::perturbed(&w, &an, false, false, 0.0, &mut rng).unwrap();
        let post = TabularModel::perturbed(&w, &an, false, true, 0.0, &mut rng).unwrap();
        for (omega, _) in &an.options {
            let vic = policy_term(&w, omega, &pol, &q).unwrap();
            let corr = transition_term(&w, omega, &prior, &post).unwrap();
            let bias = an.bias(&w, omega).unwrap();
            assert!((corr - bias).abs() < 1e-10, "{name}");
            let exact = an.exact_reward(omega).unwrap();
            assert!((vic + corr - exact).abs() < 1e-10, "{name}: {} vs {exact}", vic + corr);
            if !name.as_str().starts_with("stoch") {
                assert!(corr.abs() < 1e-12);
            }
        }
    }
}

#[test]
fn reward_dispatch_checks_algorithm() {
    let w = make_world(WorldName::Det1d, SizeOverrides::default()).unwrap();
    let b = bundle(&w, &cfg(Algo::Alg1, WorldName::Det1d), 1);
    let omega = sample_episode(&b, &w, &mut stream(1, 0)).unwrap();
    assert!(reward_vic(&b, &w, &omega).is_err());
    assert!(reward_alg2(&b, &w, &omega).is_err());
    let r = reward_alg1(&b, &w, &omega).unwrap();
    assert_eq!(reward(&b, &w, &omega).unwrap(), r);
    let incomplete = omega.prefix(0);
    assert!(matches!(reward_alg1(&b, &w, &incomplete), Err(Error::Incomplete)));
}

#[test]
fn alg2_policy_term_matches_vic_definition() {
    let w = make_world(WorldName::Stoch1d, SizeOverrides::default()).unwrap();
    let b = bundle(&w, &cfg(Algo::Alg2, WorldName::Stoch1d), 2);
    let mut rng = stream(3, 0);
    for _ in 0..10 {
        let omega = sample_episode(&b, &w, &mut rng).unwrap();
        let r = reward_alg2(&b, &w, &omega).unwrap();
        let p = policy_term(&w, &omega, &b.policy, &b.inference).unwrap();
        assert_eq!(r.policy_term, p);
    }
}

#[test]
fn identical_mixture_heads_cancel() {
    let w = make_world(WorldName::Stoch1d, SizeOverrides::default()).unwrap();
    let mut b = bundle(&w, &cfg(Algo::Alg2, WorldName::Stoch1d), 2);
    let TransitionHeads::Gmm { prior, posterior } = &mut b.transitions else { unreachable!() };
    // Identical output layers and zero goal embeddings make the heads agree.
    let n = w.n_states() + w.n_actions() + 1;
    for (pb, qb) in prior.store.blocks.iter().zip(posterior.store.blocks.iter_mut()) {
        if pb.name == "embed" {
            qb.values[..pb.values.len()].copy_from_slice(&pb.values);
            qb.values[n * pb.cols..].iter_mut().for_each(|v| *v = 0.0);
        } else {
            qb.values.clone_from(&pb.values);
        }
    }
    let mut rng = stream(3, 0);
    for _ in 0..10 {
        let omega = sample_episode(&b, &w, &mut rng).unwrap();
        assert!(reward_alg2(&b, &w, &omega).unwrap().transition_term.abs() < 1e-12);
    }
}

#[test]
fn fitted_mixtures_recover_known_correction() {
    let w = small(WorldName::Stoch1d, 3, 1);
    let mut c = cfg(Algo::Alg2, WorldName::Stoch1d);
    c.lr = Some(1e-2);
    c.batch_size = 64;
    c.t_smooth = 16;
    let mut b = bundle(&w, &c, 7);
    no_early_stop(&mut b, &w);
    let mut rng = stream(7, 1);
    for _ in 0..600 {
        train_batch(&mut b, &w, &c, &mut rng, false).unwrap();
    }
    let s0 = w.start_states[0];
    let omega = trace(&w, s0, &[(Action::Move(0), 0), (Action::Terminate, 0)]);
    let t = reward_alg2(&b, &w, &omega).unwrap().transition_term;
    assert!((t - (1.0f64 / 0.7).ln()).abs() < 0.05, "{t}");
}

#[test]
fn softmax_prior_learns_deterministic_moves() {
    let w = make_world(WorldName::Det1d, SizeOverrides::default()).unwrap();
    let mut c = cfg(Algo::Alg1, WorldName::Det1d);
    c.lr = Some(1e-2);
    let mut b = bundle(&w, &c, 4);
    let mut rng = stream(4, 1);
    for _ in 0..1500 {
        train_batch(&mut b, &w, &c, &mut rng, false).unwrap();
    }
    let TransitionHeads::Softmax { prior, .. } = &b.transitions else { unreachable!() };
    for _ in 0..20 {
        let omega = sample_episode(&b, &w, &mut rng).unwrap();
        for lp in prior.transition_log_probs(&w, &omega, None).unwrap() {
            assert!(lp >= 0.99f64.ln(), "{}", lp.exp());
        }
        let r = reward_alg1(&b, &w, &omega).unwrap();
        assert!(r.transition_term.abs() < 0.05);
    }
}

#[test]
fn warmup_freezes_policy_and_fits_baseline() {
    let w = make_world(WorldName::Stoch1d, SizeOverrides::default()).unwrap();
    let mut c = cfg(Algo::Alg1, WorldName::Stoch1d);
    c.warmup_batches = 300;
    c.lr = Some(3e-3);
    let mut b = bundle(&w, &c, 5);
    let before = b.policy.store.clone();
    let mut rng = stream(5, 1);
    warmup_phase(&mut b, &w, &c, &mut rng).unwrap();
    let bits = |s: &ParamStore| s.flat_values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&before), bits(&b.policy.store));
    let mut means = Vec::new();
    for _ in 0..20 {
        let s = train_batch(&mut b, &w, &c, &mut rng, false).unwrap();
        means.push(s.mean(|r| r.before_baseline()));
    }
    let mean = means.iter().sum::<f64>() / means.len() as f64;
    let base = b.baseline.value(w.start_states[0]);
    assert!((base - mean).abs() < 0.05, "{base} vs {mean}");
}

#[test]
fn mixed_reward_scales_external_score() {
    let w = make_world(WorldName::Rooms35, SizeOverrides::default()).unwrap();
    let s0 = w.start_states[0];
    let id = |x: i32, y: i32| w.state_at(&[x, y]).unwrap().0;
    let omega = trace(
        &w,
        s0,
        &[
            (Action::Move(1), id(0, 7)),
            (Action::Move(2), id(1, 7)),
            (Action::Move(2), id(2, 7)),
            (Action::Terminate, id(2, 7)),
        ],
    );
    let intrinsic = RewardBreakdown::new(Algo::Alg2, 0.4, 0.1, 0.0, 0.0, 0.2);
    let r = mixed_reward(&w, &omega, intrinsic, 30.0).unwrap();
    assert!((r.external_term - 0.7).abs() < 1e-12);
    assert!((r.alpha * r.external_term - 21.0).abs() < 1e-9);
    assert!((r.total_for_gradient - (0.5 + 21.0 - 0.2)).abs() < 1e-9);
    let pure = mixed_reward(&w, &omega, intrinsic, 0.0).unwrap();
    assert!((pure.total_for_gradient - intrinsic.total_for_gradient).abs() < 1e-12);

    let flat = make_world(WorldName::Det1d, SizeOverrides::default()).unwrap();
    let o = trace(&flat, flat.start_states[0], &[(Action::Terminate, flat.start_states[0].0)]);
    assert!(matches!(mixed_reward(&flat, &o, intrinsic, 30.0), Err(Error::Config(_))));
    assert!(mixed_reward(&flat, &o, intrinsic, 0.0).is_ok());
}

#[test]
fn random_agent_uses_only_external_reward() {
    let w = make_world(WorldName::Rooms35, SizeOverrides::default()).unwrap();
    let mut c = cfg(Algo::Random, WorldName::Rooms35);
    c.batch_size = 8;
    let mut b = bundle(&w, &c, 6);
    let s = train_batch(&mut b, &w, &c, &mut stream(6, 1), true).unwrap();
    for (omega, r) in s.episodes.iter().zip(&s.rewards) {
        assert_eq!(r.policy_term, 0.0);
        assert_eq!(r.transition_term, 0.0);
        assert_eq!(r.alpha, 30.0);
        assert_eq!(r.external_term, w.external_reward(omega).unwrap());
    }
}

#[test]
fn strong_entropy_bonus_keeps_policy_uniform() {
    let w = make_world(WorldName::Det1d, SizeOverrides::default()).unwrap();
    let mut c = cfg(Algo::Random, WorldName::Det1d);
    c.entropy_coef = 1e3;
    c.lr = Some(1e-2);
    let mut b = bundle(&w, &c, 8);
    let mut rng = stream(8, 1);
    for _ in 0..100 {
        train_batch(&mut b, &w, &c, &mut rng, true).unwrap();
    }
    let root = Trajectory::new(w.start_states[0]);
    let mut g = Graph::new(&b.policy.store);
    let enc = b.policy.encoder();
    let st = enc.start(&mut g);
    let st = enc.step(&mut g, st, root.current(), None, None);
    let lp = b.policy.log_probs_node(&mut g, st.h, &w.mask_at(root.current(), 0)).unwrap();
    let e = g.entropy(lp);
    let h = g.scalar(e);
    let max = (w.n_actions() as f64).ln();
    assert!(h >= 0.99 * max, "{h} vs {max}");
}

#[test]
fn rewards_equal_to_baseline_leave_policy_unchanged() {
    let w = make_world(WorldName::Det1d, SizeOverrides::default()).unwrap();
    let c = cfg(Algo::Vic, WorldName::Det1d);
    let mut b = bundle(&w, &c, 9);
    let mut rng = stream(9, 1);
    let batch: Vec<_> = (0..16)
        .map(|_| {
            let omega = sample_episode(&b, &w, &mut rng).unwrap();
            let r = reward_vic(&b, &w, &omega).unwrap();
            let r = r.with_baseline(r.before_baseline());
            (omega, r)
        })
        .collect();
    let before = b.policy.store.flat_values();
    policy_gradient_step(&mut b, &w, &batch, &c.adam()).unwrap();
    assert_eq!(before, b.policy.store.flat_values());
}

#[test]
fn policy_step_rejects_foreign_rewards() {
    let w = make_world(WorldName::Det1d, SizeOverrides::default()).unwrap();
    let c = cfg(Algo::Vic, WorldName::Det1d);
    let mut b = bundle(&w, &c, 9);
    let omega = sample_episode(&b, &w, &mut stream(1, 0)).unwrap();
    let r = RewardBreakdown::new(Algo::Alg1, 1.0, 0.0, 0.0, 0.0, 0.0);
    assert!(policy_gradient_step(&mut b, &w, &[(omega, r)], &c.adam()).is_err());
}

#[test]
fn batch_of_one_is_not_averaged() {
    let r = RewardBreakdown::new(Algo::Vic, 1.25, 0.0, 0.0, 0.0, 0.25);
    assert_eq!(gradient_weights(&[r]), vec![1.0]);
}

#[test]
fn policy_step_matches_train_batch_update() {
    let w = make_world(WorldName::Stoch1d, SizeOverrides::default()).unwrap();
    let c = cfg(Algo::Vic, WorldName::Stoch1d);
    let mut a = bundle(&w, &c, 10);
    let mut b = a.clone();
    let s = train_batch(&mut a, &w, &c, &mut stream(10, 1), true).unwrap();
    let batch: Vec<_> = s.episodes.iter().cloned().zip(s.rewards.iter().copied()).collect();
    policy_gradient_step(&mut b, &w, &batch, &c.adam()).unwrap();
    for (x, y) in a.policy.store.flat_values().iter().zip(b.policy.store.flat_values()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn config_defaults_and_validation() {
    let d = TrainConfig::default();
    assert_eq!(d.batch_size, 128);
    assert_eq!(d.t_smooth, 128);
    assert_eq!(d.n_gmm, 10);
    assert_eq!((d.beta1, d.beta2), (0.9, 0.999));
    assert_eq!(d.effective_lr(), 1e-3);
    assert_eq!(d.effective_alpha(), 0.0);
    let rooms = TrainConfig { world: WorldName::Rooms35, ..TrainConfig::default() };
    assert_eq!(rooms.effective_lr(), 1e-4);
    assert_eq!(rooms.effective_alpha(), 30.0);
    d.validate().unwrap();
    rooms.validate().unwrap();
    for bad in [
        TrainConfig { sigma: -1.0, ..TrainConfig::default() },
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { alpha: Some(30.0), ..TrainConfig::default() },
        TrainConfig { ema_decay: 1.0, ..TrainConfig::default() },
        TrainConfig { n_gmm: 0, ..TrainConfig::default() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
    for a in Algo::ALL {
        assert_eq!(a.as_str().parse::<Algo>().unwrap(), a);
    }
    assert!("vicc".parse::<Algo>().is_err());
}

#[test]
fn checkpoint_round_trip() {
    let w = make_world(WorldName::Stoch1d, SizeOverrides::default()).unwrap();
    let c = cfg(Algo::Alg2, WorldName::Stoch1d);
    let mut a = bundle(&w, &c, 12);
    train_batch(&mut a, &w, &c, &mut stream(12, 1), true).unwrap();
    let bytes = a.checkpoint().to_bytes();
    let mut b = bundle(&w, &c, 13);
    b.restore(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(a.checkpoint(), b.checkpoint());
    let mut v = bundle(&w, &cfg(Algo::Vic, WorldName::Stoch1d), 1);
    assert!(v.restore(&a.checkpoint()).is_ok());
    let mut wrong = bundle(&w, &c, 1);
    assert!(wrong.restore(&v.checkpoint()).is_err());
}

#[test]
fn training_is_deterministic() {
    let w = make_world(WorldName::Stoch1d, SizeOverrides::default()).unwrap();
    let c = cfg(Algo::Alg2, WorldName::Stoch1d);
    let run = || {
        let mut b = bundle(&w, &c, 14);
        let mut rng = stream(14, 1);
        for _ in 0..3 {
            train_batch(&mut b, &w, &c, &mut rng, true).unwrap();
        }
        b.checkpoint().to_bytes()
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn total_is_sum_of_terms(p in -5.0f64..5.0, t in -5.0f64..5.0, e in -5.0f64..5.0, a in 0.0f64..50.0, b in -5.0f64..5.0) {
        let r = RewardBreakdown::new(Algo::Alg1, p, t, e, a, b);
        prop_assert!((r.total_for_gradient - (p + t + a * e - b)).abs() < 1e-9);
        let shifted = r.with_baseline(b + 1.0);
        prop_assert!((r.total_for_gradient - shifted.total_for_gradient - 1.0).abs() < 1e-9);
    }

    #[test]
    fn vic_transition_term_is_zero(seed in 0u64..50) {
        let w = make_world(WorldName::Stoch2d, SizeOverrides { t_max: Some(3), ..Default::default() }).unwrap();
        let b = bundle(&w, &cfg(Algo::Vic, WorldName::Stoch2d), seed);
        let omega = sample_episode(&b, &w, &mut stream(seed, 1)).unwrap();
        prop_assert!(omega.steps.len() <= w.t_max + 1);
        prop_assert_eq!(omega.steps.last().unwrap().0, Action::Terminate);
        prop_assert_eq!(reward_vic(&b, &w, &omega).unwrap().transition_term, 0.0);
    }
}
