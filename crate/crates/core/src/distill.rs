//! Data-free depth distillation of a frozen flow map into the shared-block student.

use log::{debug, info};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::optim::{clip_global_norm, AdamW, AdamWConfig, Schedule};
use crate::params::Bound;
use crate::student::{SltConfig, SltParams};
use crate::teacher::{DepthTrace, FlowMapModel};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SltTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    pub lambda: f64,
    pub clip_norm: f64,
    pub log_every: usize,
    pub w_min: f64,
    pub w_max: f64,
    /// Draw `t ~ U(0, 1]` instead of fixing `t = δ = 1`.
    pub sample_t: bool,
    pub adamw: AdamWConfig,
}

impl Default for SltTrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch: 128,
            lr: 2e-3,
            warmup: 100,
            lambda: 0.5,
            clip_norm: 1.0,
            log_every: 50,
            w_min: 1.0,
            w_max: 2.0,
            sample_t: false,
            adamw: AdamWConfig::default(),
        }
    }
}

impl SltTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule().validate()?;
        if self.batch == 0 || self.log_every == 0 {
            return Err(Error::Config("batch and log_every must be positive".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config("λ must be finite and ≥ 0".into()));
        }
        if !(self.w_min <= self.w_max) {
            return Err(Error::Config("w_min must not exceed w_max".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            base_lr: self.lr,
            warmup: self.warmup,
            total: self.steps,
        }
    }
}

/// Online conditioning sample; no dataset is involved.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillBatch<T> {
    pub z: Tensor<T>,
    pub y: Vec<usize>,
    pub t: Vec<T>,
    pub w: Vec<T>,
}

impl<T: Scalar> DistillBatch<T> {
    pub fn sample<R: Rng + ?Sized>(
        cfg: &SltTrainConfig,
        dim: usize,
        classes: usize,
        rng: &mut R,
    ) -> Self {
        let n = cfg.batch;
        let z = Tensor::from_fn(&[n, dim], |_| {
            let e: f64 = StandardNormal.sample(rng);
            T::lit(e)
        });
        let y = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let unit = Uniform::new(0.0f64, 1.0).expect("unit interval");
        let t = (0..n)
            .map(|_| {
                if cfg.sample_t {
                    T::lit(1.0 - unit.sample(rng))
                } else {
                    T::one()
                }
            })
            .collect();
        let w = (0..n)
            .map(|_| T::lit(cfg.w_min + (cfg.w_max - cfg.w_min) * unit.sample(rng)))
            .collect();
        Self { z, y, t, w }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// One row of the distillation metrics CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SltRow {
    pub step: usize,
    pub lr: f64,
    pub loss_output: f64,
    pub loss_patches: f64,
    pub loss_total: f64,
}

fn mse_value<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, op: &'static str) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(dim_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let sq: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = (*x - *y).to_f64().unwrap_or(f64::NAN);
            d * d
        })
        .sum();
    Ok(sq / a.numel() as f64)
}

/// Mean squared error between student and teacher velocities.
pub fn loss_output<T: Scalar>(v_student: &Tensor<T>, v_teacher: &Tensor<T>) -> Result<f64> {
    mse_value(v_student, v_teacher, "loss_output")
}

/// `(1/K)·Σ_i mse(P_i ĥ_i, h_T^{m(i)})` over the supervised student states.
pub fn loss_patches<T: Scalar>(
    student: &SltParams<T>,
    states: &[Tensor<T>],
    teacher: &DepthTrace<T>,
) -> Result<f64> {
    let map = student.config().layer_indices()?;
    if states.len() != map.len() {
        return Err(Error::Contract(format!(
            "{} student states for K = {}",
            states.len(),
            map.len()
        )));
    }
    let mut total = 0.0;
    for (i, (h, &m)) in states.iter().zip(&map).enumerate() {
        let target = teacher.states.get(m).ok_or_else(|| {
            Error::Contract(format!(
                "teacher trace has {} states, layer {m} requested",
                teacher.states.len()
            ))
        })?;
        total += mse_value(&student.project_step(i, h)?, target, "loss_patches")?;
    }
    Ok(total / map.len() as f64)
}

pub fn loss_total(loss_output: f64, loss_patches: f64, lambda: f64) -> f64 {
    loss_output + lambda * loss_patches
}

/// Graph handles of the three loss terms.
#[derive(Debug, Clone, Copy)]
pub struct LossGraph {
    pub output: Var,
    pub patches: Var,
    pub total: Var,
}

/// Records the student forward and all loss terms against a detached teacher trace.
pub fn loss_graph<T: Scalar>(
    tape: &mut Tape<'_, T>,
    bound: &Bound,
    student: &SltParams<T>,
    batch: &DistillBatch<T>,
    teacher: &DepthTrace<T>,
    v_teacher: &Tensor<T>,
    lambda: f64,
) -> Result<LossGraph> {
    let map = student.config().layer_indices()?;
    let z = tape.constant(batch.z.clone());
    let graph = student.forward(tape, bound, z, &batch.t, &batch.y, &batch.w)?;
    if graph.states.len() != map.len() {
        return Err(Error::Contract(format!(
            "{} student states for K = {}",
            graph.states.len(),
            map.len()
        )));
    }
    let vt = tape.constant(v_teacher.clone());
    let output = tape.mse(graph.velocity, vt)?;
    let mut terms = Vec::with_capacity(map.len());
    for (i, (&h, &m)) in graph.states.iter().zip(&map).enumerate() {
        let target = teacher
            .states
            .get(m)
            .ok_or_else(|| Error::Contract(format!("teacher layer {m} missing from trace")))?;
        let p = student.project_graph(tape, bound, i, h)?;
        let target = tape.constant(target.clone());
        terms.push(tape.mse(p, target)?);
    }
    let mut patches = terms[0];
    for &t in &terms[1..] {
        patches = tape.add(patches, t)?;
    }
    let patches = tape.scale(patches, T::lit(1.0 / map.len() as f64))?;
    let weighted = tape.scale(patches, T::lit(lambda))?;
    let total = tape.add(output, weighted)?;
    Ok(LossGraph {
        output,
        patches,
        total,
    })
}

fn check_pair<T: Scalar>(teacher: &FlowMapModel<T>, cfg: &SltConfig) -> Result<()> {
    let t = teacher.backbone().config();
    if cfg.teacher_hidden != t.block.hidden || cfg.teacher_depth != t.depth {
        return Err(Error::Config(format!(
            "student expects a teacher of depth {} and width {}, got {} and {}",
            cfg.teacher_depth, cfg.teacher_hidden, t.depth, t.block.hidden
        )));
    }
    if cfg.data_dim != t.data_dim || cfg.classes != t.classes {
        return Err(Error::Config(
            "student and teacher disagree on data_dim or classes".into(),
        ));
    }
    Ok(())
}

/// Teacher trace and velocity for a batch (the teacher's time slot carries `t`).
pub fn teacher_targets<T: Scalar>(
    teacher: &FlowMapModel<T>,
    batch: &DistillBatch<T>,
) -> Result<(DepthTrace<T>, Tensor<T>)> {
    teacher.depth_trace(&batch.z, &batch.t, &batch.y, &batch.w)
}

/// All three losses of `student` on a fixed batch, without updating anything.
pub fn evaluate<T: Scalar>(
    teacher: &FlowMapModel<T>,
    student: &SltParams<T>,
    batch: &DistillBatch<T>,
    lambda: f64,
) -> Result<SltRow> {
    let (trace, vt) = teacher_targets(teacher, batch)?;
    let st = student.rollout(&batch.z, &batch.t, &batch.y, &batch.w)?;
    let vs = student.predict_velocity(&batch.z, &batch.t, &batch.y, &batch.w)?;
    let out = loss_output(&vs, &vt)?;
    let p = loss_patches(student, st.supervised(), &trace)?;
    Ok(SltRow {
        step: 0,
        lr: 0.0,
        loss_output: out,
        loss_patches: p,
        loss_total: loss_total(out, p, lambda),
    })
}

/// Trains a fresh student against the frozen teacher.
pub fn distill_train<T: Scalar, R: Rng + ?Sized>(
    teacher: &FlowMapModel<T>,
    student_cfg: SltConfig,
    cfg: &SltTrainConfig,
    rng: &mut R,
) -> Result<(SltParams<T>, Vec<SltRow>)> {
    check_pair(teacher, &student_cfg)?;
    let mut student = SltParams::init(student_cfg, rng)?;
    let rows = continue_distill(teacher, &mut student, cfg, rng)?;
    Ok((student, rows))
}

pub fn continue_distill<T: Scalar, R: Rng + ?Sized>(
    teacher: &FlowMapModel<T>,
    student: &mut SltParams<T>,
    cfg: &SltTrainConfig,
    rng: &mut R,
) -> Result<Vec<SltRow>> {
    cfg.validate()?;
    check_pair(teacher, student.config())?;
    let schedule = cfg.schedule();
    let (dim, classes) = (student.config().data_dim, student.config().classes);
    let mut opt = AdamW::new(cfg.adamw, student.params());
    let mut rows = Vec::new();
    for step in 0..cfg.steps {
        let batch = DistillBatch::<T>::sample(cfg, dim, classes, rng);
        let (trace, vt) = teacher_targets(teacher, &batch)?;
        let lr = schedule.lr(step);
        let params = student.params();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let losses = loss_graph(&mut tape, &bound, student, &batch, &trace, &vt, cfg.lambda)?;
        let scalar = |v: Var| tape.value(v).data()[0].to_f64().unwrap_or(f64::NAN);
        let row = SltRow {
            step,
            lr,
            loss_output: scalar(losses.output),
            loss_patches: scalar(losses.patches),
            loss_total: scalar(losses.total),
        };
        if !row.loss_total.is_finite() {
            return Err(Error::Training {
                step,
                detail: "non-finite distillation loss".into(),
            });
        }
        let mut grads = tape.backward(losses.total).map_err(|e| Error::Training {
            step,
            detail: e.to_string(),
        })?;
        let mut aligned = params.collect_grads(&bound, &mut grads);
        drop(tape);
        clip_global_norm(&mut aligned, cfg.clip_norm);
        opt.step(student.params_mut(), &aligned, lr)?;
        if step % cfg.log_every == 0 {
            debug!(
                "slt step {step} lr {lr:.3e} out {:.5} patches {:.5}",
                row.loss_output, row.loss_patches
            );
            rows.push(row);
        }
    }
    info!("student distillation finished after {} steps", cfg.steps);
    Ok(rows)
}
