mod common;

use std::path::Path;
use std::process::Command;

use depthflow::checkpoint::{load_checkpoint, Persist};
use depthflow::config::RunConfig;
use depthflow::distill::{continue_distill, SltTrainConfig};
use depthflow::scout::{
    candidate_noises, scout_and_refine, Counting, Scorer, ScorerKind, ScoutConfig,
};
use depthflow::student::{SltConfig, SltParams};
use depthflow::teacher::{integrate_with, BackboneConfig, FlowMapModel, Solver, VelocityField};
use depthflow::{Error, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scrambled_pair(seed: u64) -> (FlowMapModel<f32>, SltParams<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut teacher = FlowMapModel::<f32>::init(BackboneConfig::default(), &mut rng).unwrap();
    let mut student = SltParams::<f32>::init(SltConfig::default(), &mut rng).unwrap();
    common::scramble(teacher.0.params_mut(), 0.2, &mut rng);
    common::scramble(student.params_mut(), 0.2, &mut rng);
    (teacher, student)
}

#[test]
fn integrators_match_the_exponential_oracle() {
    let z = Tensor::<f64>::new(vec![2, 2], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
    // dx/dt = x run from t = 1 to 0 lands on z/e.
    let u = |x: &Tensor<f64>, _t: f64| Ok(x.clone());
    for steps in [1usize, 4, 64] {
        let euler = integrate_with(u, &z, steps, Solver::Euler).unwrap();
        let factor = (1.0 - 1.0 / steps as f64).powi(steps as i32);
        for (a, b) in euler.data().iter().zip(z.data()) {
            assert!((a - b * factor).abs() < 1e-12);
        }
    }
    // One RK4 step of a linear field multiplies by the quartic Taylor polynomial.
    let h: f64 = 1.0 / 8.0;
    let factor = (1.0 - h + h * h / 2.0 - h.powi(3) / 6.0 + h.powi(4) / 24.0).powi(8);
    let rk4 = integrate_with(u, &z, 8, Solver::Rk4).unwrap();
    for (a, b) in rk4.data().iter().zip(z.data()) {
        assert!((a - b * factor).abs() < 1e-12);
        assert!((a - b / std::f64::consts::E).abs() < 1e-5);
    }
    assert!(integrate_with(u, &z, 0, Solver::Euler).is_err());
}

#[test]
fn flow_map_is_an_euler_step_of_its_mean_velocity() {
    let (teacher, _) = scrambled_pair(1);
    let z = candidate_noises::<f32>(3, 5, 2);
    let delta = [1.0f32, 0.5, 0.25, 0.75, 0.1];
    let (y, w) = ([0, 1, 2, 3, 4], [1.0f32; 5]);
    let f = teacher.mean_velocity(&z, &delta, &y, &w).unwrap();
    let x = teacher.flow_map(&z, &delta, &y, &w).unwrap();
    for i in 0..5 {
        for j in 0..2 {
            assert_eq!(x.at(i, j), z.at(i, j) - delta[i] * f.at(i, j));
        }
    }
    let one = teacher.one_step(&z, &y, &w).unwrap();
    assert_eq!(one, teacher.flow_map(&z, &[1.0; 5], &y, &w).unwrap());
}

#[test]
fn velocity_field_guidance_interpolates_conditional_and_null() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut field = VelocityField::<f64>::init(BackboneConfig::default(), &mut rng).unwrap();
    common::scramble(field.0.params_mut(), 0.2, &mut rng);
    let x = Tensor::<f64>::randn(&[3, 2], 1.0, &mut rng);
    let t = [0.2, 0.5, 0.9];
    let y = [1, 4, 7];
    let cond = field.velocity(&x, &t, &y).unwrap();
    let null = field.velocity(&x, &t, &[field.null_class(); 3]).unwrap();
    let w = [0.0, 1.0, 2.5];
    let g = field.guided(&x, &t, &y, &w).unwrap();
    for i in 0..3 {
        for j in 0..2 {
            let expected = null.at(i, j) + w[i] * (cond.at(i, j) - null.at(i, j));
            assert!((g.at(i, j) - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn scout_refines_the_best_preview_with_one_teacher_call() {
    let (teacher, student) = scrambled_pair(2);
    let dist = RunConfig::default().mixture.build().unwrap();
    let cfg = ScoutConfig {
        n: 32,
        scorer: ScorerKind::Oracle,
        y: 5,
        w: 1.5,
        seed: 77,
    };
    let scorer = Scorer::from_kind(cfg.scorer, &dist);
    let counted = Counting::new(&teacher);
    let (x, report) = scout_and_refine(&student, &counted, &scorer, &cfg, 2).unwrap();
    assert_eq!(counted.calls(), 1);

    let z = candidate_noises::<f32>(77, 32, 2);
    let previews = student.one_step(&z, &[5; 32], &[1.5; 32]).unwrap();
    let scores: Vec<f64> = (0..32)
        .map(|i| {
            let row: Vec<f64> = previews.row(i).iter().map(|&v| v as f64).collect();
            dist.log_density(&row)
        })
        .collect();
    let best = (0..32).fold(0, |b, i| if scores[i] > scores[b] { i } else { b });
    assert_eq!(report.best, best);
    assert_eq!(report.candidates[best].score, scores[best]);
    let chosen = z.select_rows(&[best]).unwrap();
    assert_eq!(x, teacher.one_step(&chosen, &[5], &[1.5]).unwrap());

    let (again, _) = scout_and_refine(&student, &teacher, &scorer, &cfg, 2).unwrap();
    assert_eq!(again, x);
}

#[test]
fn lambda_changes_nothing_before_the_first_update() {
    let (teacher, _) = scrambled_pair(3);
    let run = |lambda: f64| {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut student = SltParams::<f32>::init(SltConfig::default(), &mut rng).unwrap();
        let cfg = SltTrainConfig {
            steps: 6,
            batch: 16,
            log_every: 1,
            warmup: 1,
            lambda,
            ..SltTrainConfig::default()
        };
        continue_distill(&teacher, &mut student, &cfg, &mut rng).unwrap()
    };
    let (a, b) = (run(0.0), run(0.5));
    assert_eq!(a[0].loss_output, b[0].loss_output);
    assert_eq!(a[0].loss_patches, b[0].loss_patches);
    assert_eq!(a[0].loss_total, a[0].loss_output);
    assert!(a[1..]
        .iter()
        .zip(&b[1..])
        .any(|(x, y)| x.loss_output != y.loss_output));
}

#[test]
fn distillation_rejects_mismatched_teacher() {
    let (teacher, _) = scrambled_pair(4);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = SltConfig {
        teacher_depth: 4,
        ..SltConfig::default()
    };
    let mut student = SltParams::<f32>::init(cfg, &mut rng).unwrap();
    let err =
        continue_distill(&teacher, &mut student, &SltTrainConfig::default(), &mut rng).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.dflb");
    let student = common::tiny_student().unwrap();
    student.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));

    let mut bad = bytes.clone();
    bad[0] = b'X';
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));

    let mut newer = bytes.clone();
    newer[4..8].copy_from_slice(&2u32.to_le_bytes());
    std::fs::write(&path, &newer).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Version { .. })));

    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(
        FlowMapModel::<f32>::load(&path),
        Err(Error::Format(_))
    ));
    assert!(matches!(
        SltParams::<f64>::load(&path),
        Err(Error::Format(_))
    ));
    let back = SltParams::<f32>::load(&path).unwrap();
    assert_eq!(
        back.to_checkpoint().unwrap(),
        student.to_checkpoint().unwrap()
    );
}

#[test]
fn fixture_loads_and_resaves_identically() {
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/slt_tiny.dflb");
    let dir = tempfile::tempdir().unwrap();
    let copy = dir.path().join("copy.dflb");
    let loaded = SltParams::<f32>::load(&fixture).unwrap();
    loaded.save(&copy).unwrap();
    assert_eq!(
        std::fs::read(&fixture).unwrap(),
        std::fs::read(&copy).unwrap()
    );
    assert_eq!(
        loaded.to_checkpoint().unwrap(),
        common::tiny_student().unwrap().to_checkpoint().unwrap()
    );
}

fn depthflow(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_depthflow"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

#[test]
fn command_line_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let config = dir.path().join("tiny.json");
    std::fs::write(
        &config,
        r#"{
            "base": {"steps": 10, "warmup": 2, "batch": 16, "log_every": 5},
            "freeflow": {"steps": 10, "warmup": 2, "batch": 16, "log_every": 5},
            "slt": {"steps": 10, "warmup": 2, "batch": 16, "log_every": 5},
            "scout": {"n": 8},
            "bench": {"warmup": 1, "runs": 30, "n": 8}
        }"#,
    )
    .unwrap();
    let (config, out_s) = (config.to_str().unwrap(), out.to_str().unwrap());
    let common = ["--config", config, "--out", out_s];

    let early = depthflow(&[&["distill-slt"][..], &common].concat());
    assert!(!early.status.success());
    assert!(String::from_utf8_lossy(&early.stderr).contains("flow_map.dflb"));

    for cmd in [
        "train-base",
        "distill-freeflow",
        "distill-slt",
        "scout",
        "generate",
        "bench",
    ] {
        let o = depthflow(&[&[cmd][..], &common].concat());
        assert!(
            o.status.success(),
            "{cmd}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
    for file in [
        "base.dflb",
        "base_metrics.csv",
        "flow_map.dflb",
        "freeflow_metrics.csv",
        "slt.dflb",
        "slt_metrics.csv",
        "scout_report.csv",
        "sample.txt",
        "bench.csv",
    ] {
        assert!(out.join(file).exists(), "{file} missing");
    }
    let bench = std::fs::read_to_string(out.join("bench.csv")).unwrap();
    assert_eq!(bench.lines().count(), 5);
    assert!(bench.starts_with("strategy,avg_ms,std_ms,runs"));
    let scout = std::fs::read_to_string(out.join("scout_report.csv")).unwrap();
    assert_eq!(scout.lines().filter(|l| l.ends_with(",1")).count(), 1);

    let params = depthflow(&["params"]);
    let text = String::from_utf8_lossy(&params.stdout);
    assert!(text.contains("teacher") && text.contains("ratio slt/teacher"));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"slt": {"lamda": 1.0}}"#).unwrap();
    let o = depthflow(&["params", "--config", bad.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("lamda"));
}
