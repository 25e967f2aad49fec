use log::{debug, info};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use super::data::ToyDistribution;
use super::model::{step_along, BackboneConfig, FlowMapModel, VelocityField};
use crate::error::{dim_err, Error, Result};
use crate::optim::{clip_global_norm, AdamW, AdamWConfig, Schedule};
use crate::tensor::{Scalar, Tape, Tensor};

/// One row of a training-curve CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    pub label_drop: f64,
    pub clip_norm: f64,
    pub log_every: usize,
    pub adamw: AdamWConfig,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch: 128,
            lr: 2e-3,
            warmup: 100,
            label_drop: 0.1,
            clip_norm: 1.0,
            log_every: 50,
            adamw: AdamWConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FreeFlowConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    pub delta_min: f64,
    /// Fraction of batches drawn entirely at `δ = 1`.
    pub pin_one: f64,
    pub w_min: f64,
    pub w_max: f64,
    pub fd_step: f64,
    pub clip_norm: f64,
    pub log_every: usize,
    pub adamw: AdamWConfig,
}

impl Default for FreeFlowConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch: 128,
            lr: 2e-3,
            warmup: 100,
            delta_min: 0.05,
            pin_one: 0.25,
            w_min: 1.0,
            w_max: 2.0,
            fd_step: 1e-3,
            clip_norm: 1.0,
            log_every: 50,
            adamw: AdamWConfig::default(),
        }
    }
}

fn check_common(batch: usize, log_every: usize, schedule: &Schedule) -> Result<()> {
    schedule.validate()?;
    if batch == 0 || log_every == 0 {
        return Err(Error::Config("batch and log_every must be positive".into()));
    }
    Ok(())
}

fn randn<T: Scalar, R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(&[n, d], |_| {
        let e: f64 = StandardNormal.sample(rng);
        T::lit(e)
    })
}

/// Flow-matching regression for a freshly initialized field.
pub fn train_base_velocity<T: Scalar, R: Rng + ?Sized>(
    dist: &ToyDistribution,
    model: BackboneConfig,
    cfg: &BaseTrainConfig,
    rng: &mut R,
) -> Result<(VelocityField<T>, Vec<LossRow>)> {
    if model.data_dim != dist.dim() {
        return Err(Error::Config(format!(
            "model data_dim {} differs from mixture dimension {}",
            model.data_dim,
            dist.dim()
        )));
    }
    if model.classes != dist.components() {
        return Err(Error::Config(format!(
            "model has {} classes but the mixture has {} components",
            model.classes,
            dist.components()
        )));
    }
    let mut field = VelocityField::<T>::init(model, rng)?;
    let rows = continue_base_training(&mut field, dist, cfg, rng)?;
    Ok((field, rows))
}

/// Runs `cfg.steps` flow-matching updates on an existing field.
pub fn continue_base_training<T: Scalar, R: Rng + ?Sized>(
    field: &mut VelocityField<T>,
    dist: &ToyDistribution,
    cfg: &BaseTrainConfig,
    rng: &mut R,
) -> Result<Vec<LossRow>> {
    let schedule = Schedule {
        base_lr: cfg.lr,
        warmup: cfg.warmup,
        total: cfg.steps,
    };
    check_common(cfg.batch, cfg.log_every, &schedule)?;
    let d = dist.dim();
    let null = field.null_class();
    let mut opt = AdamW::new(cfg.adamw, field.0.params());
    let mut rows = Vec::new();
    let unit = Uniform::new(0.0f64, 1.0).expect("unit interval");
    for step in 0..cfg.steps {
        let (x, mut y) = dist.sample::<T, _>(cfg.batch, rng);
        let z = randn::<T, _>(cfg.batch, d, rng);
        let t: Vec<T> = (0..cfg.batch).map(|_| T::lit(unit.sample(rng))).collect();
        for label in y.iter_mut() {
            if unit.sample(rng) < cfg.label_drop {
                *label = null;
            }
        }
        let mut xt = Vec::with_capacity(cfg.batch * d);
        let mut target = Vec::with_capacity(cfg.batch * d);
        for i in 0..cfg.batch {
            for j in 0..d {
                let (xi, zi) = (x.at(i, j), z.at(i, j));
                xt.push((T::one() - t[i]) * xi + t[i] * zi);
                target.push(zi - xi);
            }
        }
        let xt = Tensor::from_parts(vec![cfg.batch, d], xt);
        let target = Tensor::from_parts(vec![cfg.batch, d], target);

        let lr = schedule.lr(step);
        let params = field.0.params();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let xv = tape.constant(xt);
        let tv = tape.constant(target);
        let (out, _) = field
            .0
            .forward(&mut tape, &bound, xv, &t, &y, None, false)?;
        let loss = tape.mse(out, tv)?;
        let loss_value = tape.value(loss).data()[0].to_f64().unwrap_or(f64::NAN);
        if !loss_value.is_finite() {
            return Err(Error::Training {
                step,
                detail: "non-finite base loss".into(),
            });
        }
        let mut grads = tape.backward(loss).map_err(|e| Error::Training {
            step,
            detail: e.to_string(),
        })?;
        let mut aligned = params.collect_grads(&bound, &mut grads);
        drop(tape);
        clip_global_norm(&mut aligned, cfg.clip_norm);
        opt.step(field.0.params_mut(), &aligned, lr)?;
        if step % cfg.log_every == 0 {
            debug!("base step {step} lr {lr:.3e} loss {loss_value:.5}");
            rows.push(LossRow {
                step,
                lr,
                loss: loss_value,
            });
        }
    }
    info!("base velocity training finished after {} steps", cfg.steps);
    Ok(rows)
}

/// Fixed-step integrators for `dx/dt = u(x, t)` run from `t = 1` down to `t = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    Euler,
    Rk4,
}

/// Integrates a batched field `u(x, t)` from noise to data.
pub fn integrate_with<T: Scalar>(
    mut u: impl FnMut(&Tensor<T>, T) -> Result<Tensor<T>>,
    z: &Tensor<T>,
    steps: usize,
    solver: Solver,
) -> Result<Tensor<T>> {
    if steps == 0 {
        return Err(Error::Input("integration needs at least one step".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut x = z.clone();
    let axpy = |x: &Tensor<T>, k: &Tensor<T>, s: f64| -> Result<Tensor<T>> {
        let s = T::lit(s);
        x.zip_map(k, |a, b| a - s * b)
    };
    for i in 0..steps {
        let t = 1.0 - i as f64 * dt;
        x = match solver {
            Solver::Euler => {
                let k = u(&x, T::lit(t))?;
                axpy(&x, &k, dt)?
            }
            Solver::Rk4 => {
                let k1 = u(&x, T::lit(t))?;
                let k2 = u(&axpy(&x, &k1, 0.5 * dt)?, T::lit(t - 0.5 * dt))?;
                let k3 = u(&axpy(&x, &k2, 0.5 * dt)?, T::lit(t - 0.5 * dt))?;
                let k4 = u(&axpy(&x, &k3, dt)?, T::lit(t - dt))?;
                let sixth = T::lit(1.0 / 6.0);
                let two = T::lit(2.0);
                let mut k = k1.clone();
                for (idx, v) in k.data_mut().iter_mut().enumerate() {
                    *v = sixth
                        * (k1.data()[idx]
                            + two * k2.data()[idx]
                            + two * k3.data()[idx]
                            + k4.data()[idx]);
                }
                axpy(&x, &k, dt)?
            }
        };
    }
    Ok(x)
}

/// Reference sampler: integrates the guided field with per-row labels and weights.
pub fn integrate_ode<T: Scalar>(
    u: &VelocityField<T>,
    z: &Tensor<T>,
    steps: usize,
    y: &[usize],
    w: &[T],
    solver: Solver,
) -> Result<Tensor<T>> {
    let n = z.rows();
    integrate_with(|x, t| u.guided(x, &vec![t; n], y, w), z, steps, solver)
}

/// Detached regression target `u(f(z, δ), 1 − δ) − δ·∂F/∂δ`.
pub fn freeflow_target<T: Scalar>(
    flow: &FlowMapModel<T>,
    u: &VelocityField<T>,
    z: &Tensor<T>,
    delta: &[T],
    y: &[usize],
    w: &[T],
    fd_step: f64,
) -> Result<Tensor<T>> {
    let n = z.rows();
    if delta.len() != n {
        return Err(dim_err("freeflow_target", "one interval per row"));
    }
    if let Some(bad) = delta.iter().find(|&&d| !(d > T::zero() && d <= T::one())) {
        return Err(Error::Input(format!("δ = {bad} outside (0, 1]")));
    }
    if !(fd_step > 0.0) {
        return Err(Error::Input(
            "finite-difference step must be positive".into(),
        ));
    }
    let h = T::lit(fd_step);
    let floor = T::lit(fd_step.min(1.0) * 1e-3);
    let hi: Vec<T> = delta.iter().map(|&d| (d + h).min(T::one())).collect();
    let lo: Vec<T> = delta.iter().map(|&d| (d - h).max(floor)).collect();

    let f_mid = flow.mean_velocity(z, delta, y, w)?;
    let f_hi = flow.mean_velocity(z, &hi, y, w)?;
    let f_lo = flow.mean_velocity(z, &lo, y, w)?;
    let x_hat = step_along(z, &f_mid, delta)?;
    let t_end: Vec<T> = delta.iter().map(|&d| T::one() - d).collect();
    let u_end = u.guided(&x_hat, &t_end, y, w)?;

    let d = z.cols();
    let mut out = u_end.into_data();
    for (idx, v) in out.iter_mut().enumerate() {
        let r = idx / d;
        let dfdd = (f_hi.data()[idx] - f_lo.data()[idx]) / (hi[r] - lo[r]);
        *v = *v - delta[r] * dfdd;
    }
    Tensor::new(vec![n, d], out)
}

/// Draws one FreeFlow batch of `(z, δ, y, w)`.
pub fn sample_freeflow_batch<T: Scalar, R: Rng + ?Sized>(
    cfg: &FreeFlowConfig,
    dim: usize,
    classes: usize,
    rng: &mut R,
) -> (Tensor<T>, Vec<T>, Vec<usize>, Vec<T>) {
    let n = cfg.batch;
    let z = randn::<T, _>(n, dim, rng);
    let unit = Uniform::new(0.0f64, 1.0).expect("unit interval");
    let pinned = unit.sample(rng) < cfg.pin_one;
    let delta = (0..n)
        .map(|_| {
            if pinned {
                T::one()
            } else {
                T::lit(cfg.delta_min + (1.0 - cfg.delta_min) * unit.sample(rng))
            }
        })
        .collect();
    let y = (0..n).map(|_| rng.random_range(0..classes)).collect();
    let w = (0..n)
        .map(|_| T::lit(cfg.w_min + (cfg.w_max - cfg.w_min) * unit.sample(rng)))
        .collect();
    (z, delta, y, w)
}

/// FreeFlow regression loss of `flow` on one batch, without updating it.
pub fn freeflow_loss<T: Scalar>(
    flow: &FlowMapModel<T>,
    u: &VelocityField<T>,
    batch: &(Tensor<T>, Vec<T>, Vec<usize>, Vec<T>),
    fd_step: f64,
) -> Result<f64> {
    let (z, delta, y, w) = batch;
    let target = freeflow_target(flow, u, z, delta, y, w, fd_step)?;
    let pred = flow.mean_velocity(z, delta, y, w)?;
    let sq: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| {
            let e = (*a - *b).to_f64().unwrap_or(f64::NAN);
            e * e
        })
        .sum();
    Ok(sq / pred.numel() as f64)
}

fn validate_freeflow(cfg: &FreeFlowConfig) -> Result<()> {
    if !(cfg.delta_min > 0.0 && cfg.delta_min <= 1.0) {
        return Err(Error::Config("delta_min must lie in (0, 1]".into()));
    }
    if !(0.0..=1.0).contains(&cfg.pin_one) {
        return Err(Error::Config("pin_one must lie in [0, 1]".into()));
    }
    if !(cfg.w_min <= cfg.w_max) {
        return Err(Error::Config("w_min must not exceed w_max".into()));
    }
    Ok(())
}

/// Data-free distillation of `u` into a fresh one-step flow map.
pub fn freeflow_distill<T: Scalar, R: Rng + ?Sized>(
    u: &VelocityField<T>,
    model: BackboneConfig,
    cfg: &FreeFlowConfig,
    rng: &mut R,
) -> Result<(FlowMapModel<T>, Vec<LossRow>)> {
    let base = u.backbone().config();
    if model.data_dim != base.data_dim || model.classes != base.classes {
        return Err(Error::Config(
            "flow map and base field disagree on data_dim or classes".into(),
        ));
    }
    let mut flow = FlowMapModel::<T>::init(model, rng)?;
    let rows = continue_freeflow(&mut flow, u, cfg, rng)?;
    Ok((flow, rows))
}

pub fn continue_freeflow<T: Scalar, R: Rng + ?Sized>(
    flow: &mut FlowMapModel<T>,
    u: &VelocityField<T>,
    cfg: &FreeFlowConfig,
    rng: &mut R,
) -> Result<Vec<LossRow>> {
    validate_freeflow(cfg)?;
    let schedule = Schedule {
        base_lr: cfg.lr,
        warmup: cfg.warmup,
        total: cfg.steps,
    };
    check_common(cfg.batch, cfg.log_every, &schedule)?;
    let dim = flow.backbone().config().data_dim;
    let classes = flow.backbone().config().classes;
    let mut opt = AdamW::new(cfg.adamw, flow.0.params());
    let mut rows = Vec::new();
    for step in 0..cfg.steps {
        let (z, delta, y, w) = sample_freeflow_batch::<T, _>(cfg, dim, classes, rng);
        let target = freeflow_target(flow, u, &z, &delta, &y, &w, cfg.fd_step)?;
        let lr = schedule.lr(step);
        let params = flow.0.params();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let zv = tape.constant_ref(&z);
        let tv = tape.constant(target);
        let (out, _) = flow
            .0
            .forward(&mut tape, &bound, zv, &delta, &y, Some(&w), false)?;
        let loss = tape.mse(out, tv)?;
        let loss_value = tape.value(loss).data()[0].to_f64().unwrap_or(f64::NAN);
        if !loss_value.is_finite() {
            return Err(Error::Training {
                step,
                detail: "non-finite freeflow loss".into(),
            });
        }
        let mut grads = tape.backward(loss).map_err(|e| Error::Training {
            step,
            detail: e.to_string(),
        })?;
        let mut aligned = params.collect_grads(&bound, &mut grads);
        drop(tape);
        clip_global_norm(&mut aligned, cfg.clip_norm);
        opt.step(flow.0.params_mut(), &aligned, lr)?;
        if step % cfg.log_every == 0 {
            debug!("freeflow step {step} lr {lr:.3e} loss {loss_value:.5}");
            rows.push(LossRow {
                step,
                lr,
                loss: loss_value,
            });
        }
    }
    info!("freeflow distillation finished after {} steps", cfg.steps);
    Ok(rows)
}
