use super::*;
use crate::envs::{make_world, SizeOverrides, WorldName};
use crate::rng;
use crate::tensor::{AdamConfig, Graph};

fn world(name: WorldName) -> WorldSpec {
    make_world(name, SizeOverrides::default()).unwrap()
}

fn corridor(length: usize, t_max: usize) -> WorldSpec {
    let o = SizeOverrides {
        length: Some(length),
        t_max: Some(t_max),
        ..Default::default()
    };
    make_world(WorldName::Det1d, o).unwrap()
}

fn traj(w: &WorldSpec, moves: &[&str]) -> Trajectory {
    let mut r = rng::stream(0, 0);
    let mut t = Trajectory::new(w.start_states[0]);
    for m in moves {
        w.step(&mut r, &mut t, w.parse_action(m).unwrap()).unwrap();
    }
    t
}

/// Maximizes `sum` of the nodes returned by `f` with Adam.
fn fit(store: &mut ParamStore, steps: usize, lr: f64, f: &dyn Fn(&mut Graph<'_>) -> Vec<NodeId>) {
    let cfg = AdamConfig { lr, ..AdamConfig::default() };
    for _ in 0..steps {
        let mut buf = store.grad_buffer();
        {
            let mut g = Graph::new(store);
            let terms = f(&mut g);
            let total = g.add_n(&terms);
            g.backward(total, -1.0, &mut buf).unwrap();
        }
        store.accumulate(&buf, 1.0);
        store.adam_step(&cfg).unwrap();
    }
}

#[test]
fn policy_at_t_max_is_point_mass_on_terminate() {
    let w = corridor(11, 1);
    let mut r = rng::stream(1, 0);
    let head = ActionHead::new(&w, 8, false, &mut r, 0.5).unwrap();
    let t = traj(&w, &["left", "terminate"]);
    let lp = head.action_log_probs(&w, &t, None).unwrap();
    assert_eq!(lp[1], vec![f64::NEG_INFINITY, f64::NEG_INFINITY, 0.0]);
}

#[test]
fn zero_output_is_uniform_over_legal_actions() {
    let w = corridor(11, 5);
    let mut r = rng::stream(2, 0);
    for conditioned in [false, true] {
        let mut head = ActionHead::new(&w, 8, conditioned, &mut r, 0.1).unwrap();
        head.zero_output();
        let t = traj(&w, &["terminate"]);
        let sf = conditioned.then_some(t.final_state().unwrap());
        let lp = head.action_log_probs(&w, &t, sf).unwrap();
        for v in &lp[0] {
            assert!((v - (1.0f64 / 3.0).ln()).abs() < 1e-15);
        }
    }
}

#[test]
fn action_probabilities_normalize_and_respect_masks() {
    let w = world(WorldName::StochTree);
    let mut r = rng::stream(3, 0);
    let head = ActionHead::new(&w, 8, true, &mut r, 1.0).unwrap();
    let t = traj(&w, &["left", "right", "left", "left", "terminate"]);
    let lp = head.action_log_probs(&w, &t, Some(t.current())).unwrap();
    for (i, row) in lp.iter().enumerate() {
        let total: f64 = row.iter().map(|l| l.exp()).sum();
        assert!((total - 1.0).abs() < 1e-10);
        let mask = w.mask_at(t.state_at(i), i);
        for (l, legal) in row.iter().zip(mask) {
            if !legal {
                assert_eq!(l.exp(), 0.0);
            }
        }
    }
}

#[test]
fn conditioned_head_requires_final_state() {
    let w = corridor(5, 2);
    let mut r = rng::stream(4, 0);
    let head = ActionHead::new(&w, 4, true, &mut r, 0.1).unwrap();
    let t = traj(&w, &["terminate"]);
    assert!(head.action_log_probs(&w, &t, None).is_err());
}

#[test]
fn inference_head_is_sensitive_to_final_state() {
    let w = corridor(5, 2);
    let mut r = rng::stream(5, 0);
    let mut head = ActionHead::new(&w, 8, true, &mut r, 0.1).unwrap();
    let left = traj(&w, &["left", "terminate"]);
    let right = traj(&w, &["right", "terminate"]);
    let h = head.clone();
    let data = [left.clone(), right.clone()];
    fit(&mut head.store, 300, 0.02, &|g| {
        let mut out = Vec::new();
        for t in &data {
            let nodes = h.trace_nodes(g, &w, t, t.final_state()).unwrap();
            out.push(g.pick(nodes[0], w.action_index(t.steps[0].0)));
        }
        out
    });
    let p_left = |t: &Trajectory| head.action_log_probs(&w, t, t.final_state()).unwrap()[0][0].exp();
    assert!(p_left(&left) > 0.9, "{}", p_left(&left));
    assert!(p_left(&right) < 0.1, "{}", p_left(&right));
}

#[test]
fn zero_output_transition_head_is_uniform_over_states() {
    let w = world(WorldName::Det1d);
    let mut r = rng::stream(6, 0);
    let mut head = TransSoftmaxHead::new(&w, 8, false, &mut r, 0.1).unwrap();
    head.zero_output();
    let t = traj(&w, &["left", "terminate"]);
    let lp = head.transition_log_probs(&w, &t, None).unwrap();
    assert_eq!(lp.len(), 1);
    assert!((lp[0] - (1.0f64 / 11.0).ln()).abs() < 1e-14);
}

#[test]
fn transition_distribution_normalizes_and_rejects_terminate() {
    let w = world(WorldName::Det2d);
    let mut r = rng::stream(7, 0);
    let head = TransSoftmaxHead::new(&w, 8, true, &mut r, 1.0).unwrap();
    let mut g = Graph::new(&head.store);
    let st = head.enc.start(&mut g);
    let st = head.enc.step(&mut g, st, w.start_states[0], None, Some(StateId(3)));
    let lp = head.log_probs_node(&mut g, st.h, Action::Move(2)).unwrap();
    let total: f64 = g.value(lp).iter().map(|l| l.exp()).sum();
    assert!((total - 1.0).abs() < 1e-10);
    assert!(head.log_probs_node(&mut g, st.h, Action::Terminate).is_err());
}

#[test]
fn transition_head_fits_deterministic_corridor() {
    let w = world(WorldName::Det1d);
    let mut r = rng::stream(8, 0);
    let mut head = TransSoftmaxHead::new(&w, 8, false, &mut r, 0.1).unwrap();
    let data = [
        traj(&w, &["left", "left", "right", "terminate"]),
        traj(&w, &["right", "right", "terminate"]),
        traj(&w, &["left", "terminate"]),
    ];
    let h = head.clone();
    fit(&mut head.store, 300, 0.02, &|g| {
        data.iter().flat_map(|t| h.trace_nodes(g, &w, t, None).unwrap()).collect()
    });
    for t in &data {
        for lp in head.transition_log_probs(&w, t, None).unwrap() {
            assert!(lp >= 0.99f64.ln(), "{}", lp.exp());
        }
    }
}

#[test]
fn gmm_head_single_component_at_zero() {
    let w = world(WorldName::Det1d);
    let mut r = rng::stream(9, 0);
    let mut head = GmmHead::new(&w, 4, false, 1, 0.25, &mut r, 0.1).unwrap();
    head.store.blocks.iter_mut().for_each(|b| b.values.iter_mut().for_each(|v| *v = 0.0));
    let mut g = Graph::new(&head.store);
    let st = head.enc.start(&mut g);
    let st = head.enc.step(&mut g, st, w.start_states[0], None, None);
    let l = head.log_density_node(&mut g, st.h, Action::Move(0), vec![0.0]).unwrap();
    assert!((g.scalar(l) - 0.4672).abs() < 5e-4);
    assert!(head.log_density_node(&mut g, st.h, Action::Terminate, vec![0.0]).is_err());
}

#[test]
fn gmm_head_rejects_bad_sigma() {
    let w = world(WorldName::Det1d);
    let mut r = rng::stream(10, 0);
    assert!(matches!(GmmHead::new(&w, 4, false, 10, 0.0, &mut r, 0.1), Err(Error::Config(_))));
    assert!(GmmHead::new(&w, 4, false, 10, -1.0, &mut r, 0.1).is_err());
}

#[test]
fn gmm_trace_uses_displacements() {
    let w = world(WorldName::Det2d);
    let mut r = rng::stream(11, 0);
    let head = GmmHead::new(&w, 4, true, 3, 0.25, &mut r, 0.1).unwrap();
    let t = traj(&w, &["up", "right", "terminate"]);
    let sf = t.final_state();
    let v = head.transition_log_probs(&w, &t, sf).unwrap();
    assert_eq!(v.len(), 2);
    assert_eq!(displacement(&w, t.state_at(0), t.state_at(1)), vec![0.0, -1.0]);
}

#[test]
fn same_prefix_same_outputs() {
    let w = world(WorldName::Stoch1d);
    let mut r = rng::stream(12, 0);
    let head = ActionHead::new(&w, 8, false, &mut r, 0.5).unwrap();
    let a = traj(&w, &["terminate"]);
    let lp1 = head.action_log_probs(&w, &a, None).unwrap();
    let lp2 = head.action_log_probs(&w, &a.clone(), None).unwrap();
    assert_eq!(lp1, lp2);
}

#[test]
fn baseline_converges_to_constant_target() {
    let mut b = Baseline::new(3);
    assert_eq!(b.value(StateId(1)), 0.0);
    for _ in 0..500 {
        b.update(StateId(1), 1.0, 0.05);
    }
    assert!((b.value(StateId(1)) - 1.0).abs() < 1e-3);
    assert_eq!(b.value(StateId(0)), 0.0);
}
