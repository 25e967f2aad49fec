//! Single shared block unrolled along a normalized depth coordinate.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{
    count_params, BlockConfig, BlockParams, CondConfig, ConditionEmbedder, Extra, Linear,
};
use crate::error::{dim_err, Error, Result};
use crate::params::{Bound, ParamId, ParamSet};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// How many times the shared block is applied for `K` depth scalars.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutMode {
    /// Once per `τ_k`, producing `K` supervised post-update states.
    #[default]
    PerStep,
    /// `K − 1` applications; the embed itself is the first supervised state.
    Literal,
}

/// Teacher layer assigned to each supervised student state.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerMapSpec {
    /// `round((i + 1)·L / K)` clamped to `[1, L]`.
    #[default]
    Even,
    /// One 1-based teacher layer per student step.
    Explicit(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SltConfig {
    pub data_dim: usize,
    pub block: BlockConfig,
    pub k: usize,
    pub teacher_hidden: usize,
    pub teacher_depth: usize,
    pub classes: usize,
    pub freq_dim: usize,
    #[serde(default)]
    pub rollout: RolloutMode,
    #[serde(default)]
    pub layer_map: LayerMapSpec,
}

impl Default for SltConfig {
    fn default() -> Self {
        Self {
            data_dim: 2,
            block: BlockConfig {
                hidden: 32,
                heads: 4,
                mlp_ratio: 4,
                cond_dim: 32,
            },
            k: 8,
            teacher_hidden: 64,
            teacher_depth: 8,
            classes: 8,
            freq_dim: 64,
            rollout: RolloutMode::PerStep,
            layer_map: LayerMapSpec::Even,
        }
    }
}

impl SltConfig {
    pub fn validate(&self) -> Result<()> {
        self.block.validate()?;
        if self.k == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        if self.teacher_depth == 0 || self.teacher_hidden == 0 || self.data_dim == 0 {
            return Err(Error::Config(
                "teacher depth, teacher width and data_dim must be positive".into(),
            ));
        }
        if self.block.cond_dim == 0 {
            return Err(Error::Config(
                "the shared block must be conditioned (cond_dim > 0)".into(),
            ));
        }
        self.layer_indices()?;
        Ok(())
    }

    /// Teacher layer for every supervised step.
    pub fn layer_indices(&self) -> Result<Vec<usize>> {
        match &self.layer_map {
            LayerMapSpec::Even => (0..self.k)
                .map(|i| layer_map(i, self.k, self.teacher_depth))
                .collect(),
            LayerMapSpec::Explicit(list) => {
                if list.len() != self.k {
                    return Err(Error::Config(format!(
                        "explicit layer map has {} entries for K = {}",
                        list.len(),
                        self.k
                    )));
                }
                if list.iter().any(|&m| m == 0 || m > self.teacher_depth) {
                    return Err(Error::Config(format!(
                        "explicit layer map entries must lie in [1, {}]",
                        self.teacher_depth
                    )));
                }
                Ok(list.clone())
            }
        }
    }

    fn cond(&self) -> CondConfig {
        CondConfig {
            cond_dim: self.block.cond_dim,
            freq_dim: self.freq_dim,
            classes: self.classes,
            guidance: true,
            depth: true,
        }
    }

    pub fn projected(&self) -> bool {
        self.block.hidden != self.teacher_hidden
    }

    fn extras(&self) -> Vec<Extra> {
        let h = self.block.hidden;
        let mut out = vec![
            Extra::Linear {
                inputs: self.data_dim,
                outputs: h,
            },
            Extra::Linear {
                inputs: h,
                outputs: self.data_dim,
            },
        ];
        out.extend(crate::blocks::extras_for(&self.cond()));
        if self.projected() {
            out.extend((0..self.k).map(|_| Extra::Matrix {
                rows: h,
                cols: self.teacher_hidden,
            }));
        }
        out
    }

    /// Exact trainable parameter count.
    pub fn param_count(&self) -> usize {
        count_params(&self.block, 1, &self.extras())
    }

    /// Parameter count without the projections.
    pub fn core_param_count(&self) -> usize {
        let projections = if self.projected() {
            self.k * self.block.hidden * self.teacher_hidden
        } else {
            0
        };
        self.param_count() - projections
    }
}

/// `τ_k = k/(K−1)` for `k = 0…K−1`; `[0]` when `K = 1`.
pub fn depth_grid(k: usize) -> Result<Vec<f64>> {
    match k {
        0 => Err(Error::Input("depth grid needs K ≥ 1".into())),
        1 => Ok(vec![0.0]),
        _ => Ok((0..k).map(|i| i as f64 / (k - 1) as f64).collect()),
    }
}

/// `m(i) = round((i+1)·L/K)` clamped to `[1, L]`, with halves rounded up.
pub fn layer_map(i: usize, k: usize, l: usize) -> Result<usize> {
    if k == 0 || l == 0 {
        return Err(Error::Input("layer map needs K ≥ 1 and L ≥ 1".into()));
    }
    if i >= k {
        return Err(Error::Input(format!("step {i} out of range for K = {k}")));
    }
    let m = (2 * (i + 1) * l + k) / (2 * k);
    Ok(m.clamp(1, l))
}

/// Student hidden states along the unrolled depth.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentTrace<T> {
    /// `ĥ_0` (the embed) followed by one state per block application.
    pub states: Vec<Tensor<T>>,
    /// Depth scalar used for each application.
    pub taus: Vec<f64>,
    mode: RolloutMode,
}

impl<T> StudentTrace<T> {
    /// The `K` states aligned with teacher layers.
    pub fn supervised(&self) -> &[Tensor<T>] {
        match self.mode {
            RolloutMode::PerStep => &self.states[1..],
            RolloutMode::Literal => &self.states,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SltParams<T> {
    config: SltConfig,
    params: ParamSet<T>,
    input: Linear,
    block: BlockParams,
    head: Linear,
    cond: ConditionEmbedder,
    projections: Vec<ParamId>,
    grid: Vec<f64>,
}

/// Graph handles produced by [`SltParams::forward`].
#[derive(Debug, Clone)]
pub struct StudentGraph {
    pub velocity: Var,
    /// Supervised states, one per depth step.
    pub states: Vec<Var>,
}

impl<T: Scalar> SltParams<T> {
    /// Fresh student: closed gates and a zero head, so the untrained
    /// velocity is exactly 0.
    pub fn init<R: Rng + ?Sized>(config: SltConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let h = config.block.hidden;
        Linear::init(&mut params, "embed_in", config.data_dim, h, false, rng);
        BlockParams::init(config.block, &mut params, "block", rng)?;
        Linear::init(&mut params, "head", h, config.data_dim, true, rng);
        ConditionEmbedder::init(config.cond(), &mut params, "cond", rng)?;
        if config.projected() {
            for i in 0..config.k {
                params.add(
                    format!("proj.{i}"),
                    Tensor::randn(&[h, config.teacher_hidden], 1.0 / (h as f64).sqrt(), rng),
                );
            }
        }
        Self::from_params(config, params)
    }

    pub fn from_params(config: SltConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let h = config.block.hidden;
        let input = Linear::locate(&params, "embed_in", config.data_dim, h)?;
        let block = BlockParams::locate(config.block, &params, "block")?;
        let head = Linear::locate(&params, "head", h, config.data_dim)?;
        let cond = ConditionEmbedder::locate(config.cond(), &params, "cond")?;
        let projections = if config.projected() {
            (0..config.k)
                .map(|i| params.expect(&format!("proj.{i}"), &[h, config.teacher_hidden]))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        if params.count() != config.param_count() {
            return Err(Error::Format(format!(
                "student expects {} parameters, found {}",
                config.param_count(),
                params.count()
            )));
        }
        let grid = depth_grid(config.k)?;
        Ok(Self {
            config,
            params,
            input,
            block,
            head,
            cond,
            projections,
            grid,
        })
    }

    pub fn config(&self) -> &SltConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn block(&self) -> &BlockParams {
        &self.block
    }

    pub fn head(&self) -> Linear {
        self.head
    }

    pub fn embedder(&self) -> &ConditionEmbedder {
        &self.cond
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    fn applications(&self) -> usize {
        match self.config.rollout {
            RolloutMode::PerStep => self.config.k,
            RolloutMode::Literal => self.config.k - 1,
        }
    }

    /// Unrolls the shared block from an embedded state `h0`.
    ///
    /// `cond` is the `(t, y, w)` embedding with one row per sample; the depth
    /// term for `τ_k` is added before application `k`. Returns every state
    /// including `h0`.
    pub fn rollout_graph(
        &self,
        tape: &mut Tape<'_, T>,
        bound: &Bound,
        h0: Var,
        cond: Var,
    ) -> Result<Vec<Var>> {
        let width = tape.value(h0).shape().get(1).copied().unwrap_or(0);
        if width != self.config.block.hidden {
            return Err(dim_err(
                "rollout",
                format!(
                    "state width {width}, student hidden {}",
                    self.config.block.hidden
                ),
            ));
        }
        let mut states = vec![h0];
        let mut h = h0;
        for &tau in &self.grid[..self.applications()] {
            let d = self.cond.depth_row(tape, bound, T::lit(tau))?;
            let c = tape.add_row(cond, d)?;
            h = self.block.forward(tape, bound, h, 1, Some(c))?;
            states.push(h);
        }
        Ok(states)
    }

    /// Condition rows for a batch; a single row when every sample shares
    /// `(t, y, w)`, which the blocks broadcast.
    fn embed_shared(
        &self,
        tape: &mut Tape<'_, T>,
        bound: &Bound,
        t: &[T],
        y: &[usize],
        w: &[T],
    ) -> Result<Var> {
        let n = t.len();
        if y.len() != n || w.len() != n {
            return Err(dim_err(
                "student",
                "conditioning fields disagree with batch size",
            ));
        }
        let shared = n > 1
            && t.iter().all(|&v| v == t[0])
            && y.iter().all(|&v| v == y[0])
            && w.iter().all(|&v| v == w[0]);
        if shared {
            self.cond
                .embed(tape, bound, &t[..1], &y[..1], Some(&w[..1]))
        } else {
            self.cond.embed(tape, bound, t, y, Some(w))
        }
    }

    /// Records the full student forward: embed, rollout, velocity head.
    pub fn forward(
        &self,
        tape: &mut Tape<'_, T>,
        bound: &Bound,
        z: Var,
        t: &[T],
        y: &[usize],
        w: &[T],
    ) -> Result<StudentGraph> {
        let cond = self.embed_shared(tape, bound, t, y, w)?;
        let h0 = self.input.forward(tape, bound, z)?;
        let mut states = self.rollout_graph(tape, bound, h0, cond)?;
        let last = *states.last().expect("rollout keeps h0");
        let velocity = self.head.forward(tape, bound, last)?;
        if self.config.rollout == RolloutMode::PerStep {
            states.remove(0);
        }
        Ok(StudentGraph { velocity, states })
    }

    /// Projection `P_i` applied on the tape; the identity at equal widths.
    pub fn project_graph(
        &self,
        tape: &mut Tape<'_, T>,
        bound: &Bound,
        i: usize,
        h: Var,
    ) -> Result<Var> {
        if i >= self.config.k {
            return Err(Error::Input(format!(
                "projection {i} out of range for K = {}",
                self.config.k
            )));
        }
        match self.projections.get(i) {
            Some(&p) => tape.matmul(h, bound[p]),
            None => Ok(h),
        }
    }

    /// `P_i(ĥ_i)` on a plain tensor.
    pub fn project_step(&self, i: usize, h: &Tensor<T>) -> Result<Tensor<T>> {
        if h.shape().len() != 2 || h.cols() != self.config.block.hidden {
            return Err(dim_err(
                "project_step",
                format!(
                    "state {:?}, student hidden {}",
                    h.shape(),
                    self.config.block.hidden
                ),
            ));
        }
        let mut tape = Tape::no_grad();
        let bound = self.params.bind_frozen(&mut tape);
        let hv = tape.constant_ref(h);
        let out = self.project_graph(&mut tape, &bound, i, hv)?;
        Ok(tape.value(out).clone())
    }

    fn check_batch(&self, z: &Tensor<T>, t: &[T], y: &[usize], w: &[T]) -> Result<()> {
        if z.shape().len() != 2 || z.cols() != self.config.data_dim {
            return Err(dim_err(
                "student",
                format!(
                    "input {:?}, expected [n, {}]",
                    z.shape(),
                    self.config.data_dim
                ),
            ));
        }
        let n = z.rows();
        if t.len() != n || y.len() != n || w.len() != n {
            return Err(dim_err(
                "student",
                "conditioning fields disagree with batch size",
            ));
        }
        Ok(())
    }

    /// Rollout from the embedded `z`, returning plain tensors.
    pub fn rollout(&self, z: &Tensor<T>, t: &[T], y: &[usize], w: &[T]) -> Result<StudentTrace<T>> {
        self.check_batch(z, t, y, w)?;
        let mut tape = Tape::no_grad();
        let bound = self.params.bind_frozen(&mut tape);
        let zv = tape.constant_ref(z);
        let cond = self.embed_shared(&mut tape, &bound, t, y, w)?;
        let h0 = self.input.forward(&mut tape, &bound, zv)?;
        let states = self.rollout_graph(&mut tape, &bound, h0, cond)?;
        Ok(StudentTrace {
            states: states.iter().map(|&s| tape.value(s).clone()).collect(),
            taus: self.grid[..self.applications()].to_vec(),
            mode: self.config.rollout,
        })
    }

    /// Rollout of an arbitrary state with a fixed condition row per sample.
    pub fn rollout_from(&self, h0: &Tensor<T>, cond: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::no_grad();
        let bound = self.params.bind_frozen(&mut tape);
        let hv = tape.constant_ref(h0);
        let cv = tape.constant_ref(cond);
        let states = self.rollout_graph(&mut tape, &bound, hv, cv)?;
        Ok(states.iter().map(|&s| tape.value(s).clone()).collect())
    }

    /// `v_φ(z, t, y, w)`.
    pub fn predict_velocity(
        &self,
        z: &Tensor<T>,
        t: &[T],
        y: &[usize],
        w: &[T],
    ) -> Result<Tensor<T>> {
        self.check_batch(z, t, y, w)?;
        let mut tape = Tape::no_grad();
        let bound = self.params.bind_frozen(&mut tape);
        let zv = tape.constant_ref(z);
        let g = self.forward(&mut tape, &bound, zv, t, y, w)?;
        Ok(tape.value(g.velocity).clone())
    }

    /// One-step sample `z − v_φ(z, 1, y, w)`.
    pub fn one_step(&self, z: &Tensor<T>, y: &[usize], w: &[T]) -> Result<Tensor<T>> {
        let ones = vec![T::one(); z.rows()];
        let v = self.predict_velocity(z, &ones, y, w)?;
        crate::teacher::step_along(z, &v, &ones)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grids() {
        assert_eq!(depth_grid(1).unwrap(), vec![0.0]);
        assert_eq!(depth_grid(2).unwrap(), vec![0.0, 1.0]);
        let g4 = depth_grid(4).unwrap();
        for (a, b) in g4.iter().zip([0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(depth_grid(0).is_err());
    }

    #[test]
    fn layer_maps() {
        let m = |k, l| {
            (0..k)
                .map(|i| layer_map(i, k, l).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(m(4, 28), vec![7, 14, 21, 28]);
        assert_eq!(m(8, 8), (1..=8).collect::<Vec<_>>());
        assert_eq!(m(1, 8), vec![8]);
        assert!(layer_map(4, 4, 28).is_err());
    }

    #[test]
    fn explicit_layer_map_is_checked() {
        let mut c = SltConfig {
            k: 2,
            layer_map: LayerMapSpec::Explicit(vec![3, 8]),
            ..SltConfig::default()
        };
        assert_eq!(c.layer_indices().unwrap(), vec![3, 8]);
        c.layer_map = LayerMapSpec::Explicit(vec![0, 8]);
        assert!(c.validate().is_err());
    }

    #[test]
    fn count_is_invariant_in_k_when_widths_match() {
        let base = SltConfig {
            teacher_hidden: 32,
            ..SltConfig::default()
        };
        let a = SltConfig {
            k: 2,
            ..base.clone()
        };
        let b = SltConfig { k: 16, ..base };
        assert_eq!(a.param_count(), b.param_count());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            SltParams::<f32>::init(a.clone(), &mut rng)
                .unwrap()
                .params()
                .count(),
            a.param_count()
        );
    }

    #[test]
    fn projections_grow_count_linearly() {
        let c4 = SltConfig {
            k: 4,
            ..SltConfig::default()
        };
        let c8 = SltConfig {
            k: 8,
            ..SltConfig::default()
        };
        assert_eq!(c8.param_count() - c4.param_count(), 4 * 32 * 64);
        assert_eq!(c4.core_param_count(), c8.core_param_count());
    }

    #[test]
    fn untrained_student_predicts_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = SltParams::<f64>::init(SltConfig::default(), &mut rng).unwrap();
        let z = Tensor::randn(&[5, 2], 1.0, &mut rng);
        let v = s
            .predict_velocity(&z, &[1.0; 5], &[0, 1, 2, 3, 8], &[1.5; 5])
            .unwrap();
        assert!(v.data().iter().all(|&x| x == 0.0));
        assert_eq!(s.one_step(&z, &[0; 5], &[1.0; 5]).unwrap(), z);
    }

    #[test]
    fn literal_rollout_with_one_step_keeps_only_embed() {
        let cfg = SltConfig {
            k: 1,
            rollout: RolloutMode::Literal,
            ..SltConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = SltParams::<f64>::init(cfg, &mut rng).unwrap();
        let z = Tensor::randn(&[3, 2], 1.0, &mut rng);
        let trace = s.rollout(&z, &[1.0; 3], &[0; 3], &[1.0; 3]).unwrap();
        assert_eq!(trace.states.len(), 1);
        assert_eq!(trace.supervised().len(), 1);
        assert!(trace.taus.is_empty());
    }

    #[test]
    fn equal_width_projection_is_identity() {
        let cfg = SltConfig {
            teacher_hidden: 32,
            ..SltConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = SltParams::<f64>::init(cfg, &mut rng).unwrap();
        let h = Tensor::randn(&[4, 32], 1.0, &mut rng);
        assert_eq!(s.project_step(3, &h).unwrap(), h);
        assert!(s.project_step(8, &h).is_err());
    }
}
