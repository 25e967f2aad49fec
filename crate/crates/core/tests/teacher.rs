mod common;

use depthflow::blocks::residual_block_forward;
use depthflow::metrics::energy_distance;
use depthflow::scout::candidate_noises;
use depthflow::teacher::{
    freeflow_target, integrate_ode, train_base_velocity, BackboneConfig, BaseTrainConfig,
    FlowMapModel, MixtureSpec, Solver, VelocityField,
};
use depthflow::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small() -> BackboneConfig {
    let mut cfg = BackboneConfig::default();
    cfg.depth = 3;
    cfg.block.hidden = 16;
    cfg.block.cond_dim = 16;
    cfg.freq_dim = 16;
    cfg
}

fn scrambled_field(seed: u64) -> VelocityField<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = VelocityField::<f64>::init(small(), &mut rng).unwrap();
    common::scramble(u.0.params_mut(), 0.3, &mut rng);
    u
}

/// A field whose head ignores its input and emits `c`.
fn constant_field(c: [f64; 2]) -> VelocityField<f64> {
    let mut u = scrambled_field(1);
    let head = u.backbone().head();
    u.0.params_mut().get_mut(head.weight).data_mut().fill(0.0);
    u.0.params_mut()
        .get_mut(head.bias)
        .data_mut()
        .copy_from_slice(&c);
    u
}

#[test]
fn zero_field_leaves_noise_unchanged() {
    let u = VelocityField::<f64>::init(small(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let z = candidate_noises::<f64>(4, 6, 2);
    for steps in [1, 7, 64] {
        let x = integrate_ode(&u, &z, steps, &[0; 6], &[1.5; 6], Solver::Euler).unwrap();
        assert_eq!(x, z);
    }
}

#[test]
fn constant_field_displaces_by_minus_c() {
    let c = [0.75, -1.25];
    let u = constant_field(c);
    let z = candidate_noises::<f64>(5, 4, 2);
    let (y, w) = ([0, 3, 5, 7], [1.0, 1.0, 2.0, 1.5]);
    let fine = integrate_ode(&u, &z, 10_000, &y, &w, Solver::Euler).unwrap();
    let coarse = integrate_ode(&u, &z, 3, &y, &w, Solver::Rk4).unwrap();
    for i in 0..4 {
        for j in 0..2 {
            let closed = z.at(i, j) - c[j];
            assert!((fine.at(i, j) - closed).abs() < 1e-9);
            assert!((coarse.at(i, j) - closed).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_flow_map_target_is_the_field_at_the_far_end() {
    let u = scrambled_field(2);
    let flow = FlowMapModel::<f64>::init(small(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let z = candidate_noises::<f64>(6, 5, 2);
    let delta = [1.0, 0.5, 0.05, 0.3, 0.999];
    let y = [0, 1, 2, 3, 8];
    let w = [1.0, 1.5, 2.0, 1.0, 1.25];
    let target = freeflow_target(&flow, &u, &z, &delta, &y, &w, 1e-3).unwrap();
    let t_end: Vec<f64> = delta.iter().map(|d| 1.0 - d).collect();
    assert_eq!(target, u.guided(&z, &t_end, &y, &w).unwrap());
    assert!(freeflow_target(&flow, &u, &z, &[0.0, 0.5, 0.5, 0.5, 0.5], &y, &w, 1e-3).is_err());
    assert!(freeflow_target(&flow, &u, &z, &[1.5, 0.5, 0.5, 0.5, 0.5], &y, &w, 1e-3).is_err());
}

#[test]
fn target_derivative_term_matches_an_independent_difference() {
    let u = scrambled_field(4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut flow = FlowMapModel::<f64>::init(small(), &mut rng).unwrap();
    common::scramble(flow.0.params_mut(), 0.3, &mut rng);
    let z = candidate_noises::<f64>(7, 3, 2);
    let (delta, y, w) = ([0.4, 0.6, 0.8], [1, 2, 3], [1.0, 1.0, 2.0]);
    let target = freeflow_target(&flow, &u, &z, &delta, &y, &w, 1e-3).unwrap();

    let x = flow.flow_map(&z, &delta, &y, &w).unwrap();
    let t_end: Vec<f64> = delta.iter().map(|d| 1.0 - d).collect();
    let u_end = u.guided(&x, &t_end, &y, &w).unwrap();
    let h = 1e-5;
    let up: Vec<f64> = delta.iter().map(|d| d + h).collect();
    let dn: Vec<f64> = delta.iter().map(|d| d - h).collect();
    let f_up = flow.mean_velocity(&z, &up, &y, &w).unwrap();
    let f_dn = flow.mean_velocity(&z, &dn, &y, &w).unwrap();
    for i in 0..3 {
        for j in 0..2 {
            let dfdd = (f_up.at(i, j) - f_dn.at(i, j)) / (2.0 * h);
            let expected = u_end.at(i, j) - delta[i] * dfdd;
            // O(h²) truncation of the built-in 1e-3 step dominates the gap.
            assert!((target.at(i, j) - expected).abs() < 1e-3 * (1.0 + expected.abs()));
        }
    }
}

#[test]
fn target_does_not_depend_on_an_open_tape() {
    let u = scrambled_field(6);
    let flow = FlowMapModel::<f64>::init(small(), &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let z = candidate_noises::<f64>(8, 2, 2);
    let before = freeflow_target(&flow, &u, &z, &[0.5, 1.0], &[0, 1], &[1.0, 2.0], 1e-3).unwrap();
    let mut tape = Tape::new();
    let _leaf = tape.leaf(z.clone());
    let after = freeflow_target(&flow, &u, &z, &[0.5, 1.0], &[0, 1], &[1.0, 2.0], 1e-3).unwrap();
    assert_eq!(before, after);
}

#[test]
fn depth_trace_replays_block_by_block() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut flow = FlowMapModel::<f64>::init(small(), &mut rng).unwrap();
    common::scramble(flow.0.params_mut(), 0.3, &mut rng);
    let z = candidate_noises::<f64>(10, 4, 2);
    let (t, y, w) = ([0.7; 4], [2; 4], [1.5; 4]);
    let (trace, v) = flow.depth_trace(&z, &t, &y, &w).unwrap();
    assert_eq!(trace.states.len(), 4);
    assert_eq!(trace.coords, vec![0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]);
    assert_eq!(v, flow.mean_velocity(&z, &t, &y, &w).unwrap());

    let bb = flow.backbone();
    let cond = bb
        .embedder()
        .embed_condition(bb.params(), 0.7, 2, 1.5, 0.0)
        .unwrap();
    for (l, block) in bb.blocks().iter().enumerate() {
        let next =
            residual_block_forward(&trace.states[l], block, bb.params(), 1, Some(&cond)).unwrap();
        assert!(next.max_abs_diff(&trace.states[l + 1]) < 1e-12, "layer {l}");
    }

    let head = bb.head();
    let mut tape = Tape::no_grad();
    let bound = bb.params().bind_frozen(&mut tape);
    let h = tape.constant(trace.states[3].clone());
    let out = head.forward(&mut tape, &bound, h).unwrap();
    assert_eq!(tape.value(out), &v);

    let (again, _) = flow.depth_trace(&z, &t, &y, &w).unwrap();
    assert_eq!(again, trace);

    let shallow = BackboneConfig {
        depth: 1,
        ..small()
    };
    let one = FlowMapModel::<f64>::init(shallow, &mut rng).unwrap();
    assert_eq!(one.depth_trace(&z, &t, &y, &w).unwrap().0.states.len(), 2);
}

#[test]
fn tiny_interval_barely_moves_the_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut flow = FlowMapModel::<f64>::init(small(), &mut rng).unwrap();
    common::scramble(flow.0.params_mut(), 0.3, &mut rng);
    let z = candidate_noises::<f64>(12, 16, 2);
    let (y, w) = (vec![1; 16], vec![1.0; 16]);
    let f = flow.mean_velocity(&z, &[1e-3; 16], &y, &w).unwrap();
    let x = flow.flow_map(&z, &[1e-3; 16], &y, &w).unwrap();
    let scale = f.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(x.max_abs_diff(&z) <= 2e-3 * scale);
}

#[test]
fn untrained_field_samples_the_prior() {
    let dist = MixtureSpec::default().build().unwrap();
    let cfg = BaseTrainConfig {
        steps: 0,
        warmup: 0,
        ..BaseTrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (u, rows) =
        train_base_velocity::<f64, _>(&dist, BackboneConfig::default(), &cfg, &mut rng).unwrap();
    assert!(rows.is_empty());
    let z = candidate_noises::<f64>(14, 500, 2);
    let x = integrate_ode(&u, &z, 32, &[3; 500], &[1.0; 500], Solver::Euler).unwrap();
    let prior = candidate_noises::<f64>(15, 500, 2);
    assert!(energy_distance(&x, &prior).unwrap() < 0.05);
}

#[test]
fn short_base_run_reduces_its_loss() {
    let dist = MixtureSpec::default().build().unwrap();
    let cfg = BaseTrainConfig {
        steps: 300,
        batch: 64,
        log_every: 10,
        ..BaseTrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let (_, rows) = train_base_velocity::<f32, _>(&dist, small(), &cfg, &mut rng).unwrap();
    let head: f64 = rows[..3].iter().map(|r| r.loss).sum::<f64>() / 3.0;
    let tail: f64 = rows[rows.len() - 3..].iter().map(|r| r.loss).sum::<f64>() / 3.0;
    assert!(tail < 0.5 * head, "{head} -> {tail}");
}

#[test]
fn mismatched_mixture_is_rejected() {
    let dist = MixtureSpec::Ring {
        components: 4,
        radius: 1.0,
        scale: 0.1,
    }
    .build()
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(
        train_base_velocity::<f32, _>(&dist, small(), &BaseTrainConfig::default(), &mut rng)
            .is_err()
    );
    let z = Tensor::<f32>::zeros(&[2, 3]);
    let u = VelocityField::<f32>::init(small(), &mut rng).unwrap();
    assert!(u.velocity(&z, &[0.5, 0.5], &[0, 0]).is_err());
}
