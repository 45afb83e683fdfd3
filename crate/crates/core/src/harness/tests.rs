use proptest::prelude::*;

use super::*;
use crate::envs::make_world;
use crate::oracle::{ExactAnalysis, TabularPolicy, DEFAULT_CAP};

fn quick(algo: Algo, world: WorldName) -> TrainConfig {
    TrainConfig {
        algo,
        world,
        hidden: 8,
        batch_size: 16,
        t_smooth: 4,
        warmup_batches: 3,
        total_batches: 12,
        repetitions: 2,
        log_every: 4,
        eval_episodes: 10,
        ..Default::default()
    }
}

#[test]
fn uniform_over_four_states_is_log_four() {
    let mut e = EmpowermentEstimator::new(0.99).unwrap();
    let i = e.update(&[StateId(0), StateId(1), StateId(2), StateId(3)]).unwrap();
    assert!((i - 4f64.ln()).abs() < 1e-12);
    assert!((i - 1.386).abs() < 5e-4);
}

#[test]
fn decayed_point_mass_matches_hand_value() {
    let start = BTreeMap::from([(StateId(0), 1.0), (StateId(1), 0.0)]);
    let mut e = EmpowermentEstimator::with_dist(0.99, start).unwrap();
    let i = e.update(&[StateId(1); 8]).unwrap();
    assert!((e.ema_dist[&StateId(0)] - 0.99).abs() < 1e-12);
    assert!((e.ema_dist[&StateId(1)] - 0.01).abs() < 1e-12);
    let exact = -(0.99f64 * 0.99f64.ln() + 0.01 * 0.01f64.ln());
    assert!((i - exact).abs() < 1e-12);
    assert!((i - 0.0560).abs() < 5e-5);
}

#[test]
fn single_state_batches_drive_estimate_to_zero() {
    let mut e = EmpowermentEstimator::new(0.9).unwrap();
    e.update(&[StateId(0), StateId(1)]).unwrap();
    let mut i = 1.0;
    for _ in 0..400 {
        i = e.update(&[StateId(2)]).unwrap();
    }
    assert!(i < 1e-12);
}

#[test]
fn estimator_rejects_bad_input() {
    assert!(EmpowermentEstimator::new(1.0).is_err());
    assert!(EmpowermentEstimator::new(0.0).is_err());
    assert!(EmpowermentEstimator::new(0.5).unwrap().update(&[]).is_err());
}

#[test]
fn estimate_on_exact_marginal_equals_mutual_information() {
    let w = make_world(WorldName::Stoch1d, SizeOverrides { t_max: Some(3), ..Default::default() }).unwrap();
    let s0 = w.start_states[0];
    let mut rng = stream(1, 0);
    let pol = TabularPolicy::random(&w, s0, &mut rng, 1.0, DEFAULT_CAP).unwrap();
    let an = ExactAnalysis::new(&w, s0, &pol, DEFAULT_CAP).unwrap();
    let e = EmpowermentEstimator::with_dist(0.99, an.final_marginal.clone()).unwrap();
    assert!((e.estimate() - an.mi).abs() < 1e-9);
}

#[test]
fn identical_configs_give_identical_csv() {
    let cfg = quick(Algo::Alg2, WorldName::Stoch1d);
    let a = run_experiment(&cfg, &RunOutput::default()).unwrap().csv();
    let b = run_experiment(&cfg, &RunOutput::default()).unwrap().csv();
    assert_eq!(a, b);
    assert!(a.starts_with(CSV_HEADER));
    let rows = a.lines().count() - 1;
    // Batches 0, 4, 8, 12 and the last one (14), for two runs.
    assert_eq!(rows, 2 * 5);
}

#[test]
fn different_seeds_differ() {
    let cfg = quick(Algo::Vic, WorldName::Stoch1d);
    let other = TrainConfig { seed: 1, ..cfg.clone() };
    let a = run_experiment(&cfg, &RunOutput::default()).unwrap().csv();
    let b = run_experiment(&other, &RunOutput::default()).unwrap().csv();
    assert_ne!(a, b);
}

#[test]
fn single_repetition_is_supported() {
    let cfg = TrainConfig { repetitions: 1, ..quick(Algo::Alg1, WorldName::Det2d) };
    let r = run_experiment(&cfg, &RunOutput::default()).unwrap();
    assert_eq!(r.runs.len(), 1);
    assert_eq!(r.final_mean_i_hat, r.runs[0].final_i_hat);
    assert!(r.final_mean_i_hat <= r.ceiling + 1e-9);
}

#[test]
fn artifacts_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { checkpoint_every: 5, ..quick(Algo::Vic, WorldName::Det1d) };
    let out = RunOutput { dir: Some(dir.path().to_path_buf()) };
    let r = run_experiment(&cfg, &out).unwrap();
    let merged = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(merged, r.csv());
    let run0 = std::fs::read_to_string(dir.path().join("run0.csv")).unwrap();
    assert_eq!(run0, csv_string(&r.runs[0].records));
    assert!(dir.path().join("run1.ckpt").exists());
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(json["config"]["algo"], "vic");
}

#[test]
fn early_stop_when_target_reached() {
    let cfg = TrainConfig { target_i_hat: Some(0.0), total_batches: 50, ..quick(Algo::Vic, WorldName::Det1d) };
    let r = run_experiment(&cfg, &RunOutput::default()).unwrap();
    for run in &r.runs {
        assert_eq!(run.batches, cfg.warmup_batches + 1);
    }
}

#[test]
fn wall_time_is_zero_unless_enabled() {
    let r = run_experiment(&quick(Algo::Vic, WorldName::Det1d), &RunOutput::default()).unwrap();
    assert!(r.records().iter().all(|x| x.wall_ms == 0));
}

#[test]
fn uniform_heatmap_is_all_white() {
    let dir = tempfile::tempdir().unwrap();
    let w = make_world(WorldName::Det2d, SizeOverrides::default()).unwrap();
    let dist = vec![1.0 / 25.0; 25];
    let (csv, pgm) = emit_heatmap(&w, &dist, &dir.path().join("uniform")).unwrap();
    let bytes = std::fs::read(pgm).unwrap();
    let header = b"P5\n5 5\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    assert!(bytes[header.len()..].iter().all(|&p| p == 255));
    assert_eq!(bytes.len(), header.len() + 25);
    let text = std::fs::read_to_string(csv).unwrap();
    let total: f64 = text.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-9);
}

#[test]
fn point_mass_heatmap_has_one_white_pixel() {
    let dir = tempfile::tempdir().unwrap();
    let w = make_world(WorldName::Det1d, SizeOverrides::default()).unwrap();
    let mut dist = vec![0.0; 11];
    dist[3] = 1.0;
    let (_, pgm) = emit_heatmap(&w, &dist, &dir.path().join("point")).unwrap();
    let bytes = std::fs::read(pgm).unwrap();
    let pixels = &bytes[b"P5\n11 1\n255\n".len()..];
    assert_eq!(pixels.iter().filter(|&&p| p == 255).count(), 1);
    assert_eq!(pixels.iter().filter(|&&p| p == 0).count(), 10);
    assert_eq!(pixels[3], 255);
}

#[test]
fn heatmap_reports_unwritable_path() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let w = make_world(WorldName::Det1d, SizeOverrides::default()).unwrap();
    let err = emit_heatmap(&w, &vec![1.0; 11], &blocker.join("sub").join("map")).unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
}

#[test]
fn gain_examples() {
    assert_eq!(compute_gain(1.3, 1.3).unwrap().percent, 0.0);
    let g = compute_gain(2.0, 1.0).unwrap();
    assert_eq!((g.percent, g.ratio), (100.0, 2.0));
    assert!(compute_gain(1.0, 0.0).is_err());
}

#[test]
fn empty_config_gives_defaults() {
    let c = parse_config("").unwrap();
    assert_eq!(c, TrainConfig::default());
    assert_eq!(c.effective_lr(), 1e-3);
    assert_eq!((c.batch_size, c.sigma, c.n_gmm, c.t_smooth, c.ema_decay, c.repetitions), (128, 0.25, 10, 128, 0.99, 5));
}

#[test]
fn config_errors_carry_line_numbers() {
    assert!(matches!(parse_config("sigma = -1"), Err(Error::Config(_))));
    assert!(matches!(parse_config("# header\n\nfoo = 1"), Err(Error::Parse { line: 3, .. })));
    assert!(matches!(parse_config("seed = 1\nbatch_size = many"), Err(Error::Parse { line: 2, .. })));
    assert!(matches!(parse_config("just words"), Err(Error::Parse { line: 1, .. })));
    assert!(matches!(parse_config("seed = 1\nseed = 2"), Err(Error::Parse { line: 2, .. })));
    assert!(matches!(parse_config("algo = best"), Err(Error::Parse { line: 1, .. })));
}

#[test]
fn config_round_trips() {
    let c = parse_config("algo = alg2  # smoothed\nworld = stoch-1d\nt_max = 4\nlr = 0.002\n").unwrap();
    assert_eq!(c.algo, Algo::Alg2);
    assert_eq!(c.world, WorldName::Stoch1d);
    assert_eq!(c.sizes.t_max, Some(4));
    assert_eq!(parse_config(&config_to_text(&c)).unwrap(), c);
    let rooms = TrainConfig { world: WorldName::Rooms35, alpha: Some(12.5), target_i_hat: Some(1.0), ..Default::default() };
    assert_eq!(parse_config(&config_to_text(&rooms)).unwrap(), rooms);
}

proptest! {
    #[test]
    fn ema_stays_normalized(batches in prop::collection::vec(prop::collection::vec(0usize..6, 1..20), 1..30), decay in 0.01f64..0.999) {
        let mut e = EmpowermentEstimator::new(decay).unwrap();
        for b in batches {
            let finals: Vec<StateId> = b.into_iter().map(StateId).collect();
            let i = e.update(&finals).unwrap();
            let total: f64 = e.ema_dist.values().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            prop_assert!(i >= 0.0 && i <= 6f64.ln() + 1e-9);
        }
    }

    #[test]
    fn gain_is_scale_free(a in 0.01f64..10.0, b in 0.01f64..10.0, k in 0.1f64..10.0) {
        let g1 = compute_gain(a, b).unwrap();
        let g2 = compute_gain(k * a, k * b).unwrap();
        prop_assert!((g1.percent - g2.percent).abs() < 1e-9 * (1.0 + g1.percent.abs()));
    }
}
