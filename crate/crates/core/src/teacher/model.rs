use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{
    count_params, BlockConfig, BlockParams, CondConfig, ConditionEmbedder, Extra, Linear,
};
use crate::error::{dim_err, Error, Result};
use crate::params::{Bound, ParamSet};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Layout shared by the base velocity field and the one-step flow map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub data_dim: usize,
    pub depth: usize,
    pub block: BlockConfig,
    pub classes: usize,
    pub freq_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            data_dim: 2,
            depth: 8,
            block: BlockConfig {
                hidden: 64,
                heads: 4,
                mlp_ratio: 4,
                cond_dim: 64,
            },
            classes: 8,
            freq_dim: 64,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        self.block.validate()?;
        if self.depth == 0 {
            return Err(Error::Config("backbone depth must be at least 1".into()));
        }
        if self.data_dim == 0 {
            return Err(Error::Config("data_dim must be positive".into()));
        }
        if self.block.cond_dim == 0 {
            return Err(Error::Config(
                "backbone blocks must be conditioned (cond_dim > 0)".into(),
            ));
        }
        Ok(())
    }

    fn cond(&self, guidance: bool) -> CondConfig {
        CondConfig {
            cond_dim: self.block.cond_dim,
            freq_dim: self.freq_dim,
            classes: self.classes,
            guidance,
            depth: false,
        }
    }
}

/// Linear input embed, `depth` conditioned blocks, linear output head.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone<T> {
    config: BackboneConfig,
    guidance_input: bool,
    params: ParamSet<T>,
    input: Linear,
    blocks: Vec<BlockParams>,
    head: Linear,
    cond: ConditionEmbedder,
}

impl<T: Scalar> Backbone<T> {
    /// The output head starts at zero, so a fresh backbone outputs 0.
    pub fn init<R: Rng + ?Sized>(
        config: BackboneConfig,
        guidance_input: bool,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let h = config.block.hidden;
        Linear::init(&mut params, "embed_in", config.data_dim, h, false, rng);
        for l in 0..config.depth {
            BlockParams::init(config.block, &mut params, &format!("blocks.{l}"), rng)?;
        }
        Linear::init(&mut params, "head", h, config.data_dim, true, rng);
        ConditionEmbedder::init(config.cond(guidance_input), &mut params, "cond", rng)?;
        Self::from_params(config, guidance_input, params)
    }

    pub fn from_params(
        config: BackboneConfig,
        guidance_input: bool,
        params: ParamSet<T>,
    ) -> Result<Self> {
        config.validate()?;
        let h = config.block.hidden;
        let input = Linear::locate(&params, "embed_in", config.data_dim, h)?;
        let blocks = (0..config.depth)
            .map(|l| BlockParams::locate(config.block, &params, &format!("blocks.{l}")))
            .collect::<Result<_>>()?;
        let head = Linear::locate(&params, "head", h, config.data_dim)?;
        let cond = ConditionEmbedder::locate(config.cond(guidance_input), &params, "cond")?;
        let expected = count_params(
            &config.block,
            config.depth,
            &Self::extras_for(&config, guidance_input),
        );
        if params.count() != expected {
            return Err(Error::Format(format!(
                "backbone expects {expected} parameters, found {}",
                params.count()
            )));
        }
        Ok(Self {
            config,
            guidance_input,
            params,
            input,
            blocks,
            head,
            cond,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn blocks(&self) -> &[BlockParams] {
        &self.blocks
    }

    pub fn embedder(&self) -> &ConditionEmbedder {
        &self.cond
    }

    pub fn head(&self) -> Linear {
        self.head
    }

    pub fn takes_guidance(&self) -> bool {
        self.guidance_input
    }

    fn extras_for(config: &BackboneConfig, guidance: bool) -> Vec<Extra> {
        let h = config.block.hidden;
        let mut out = vec![
            Extra::Linear {
                inputs: config.data_dim,
                outputs: h,
            },
            Extra::Linear {
                inputs: h,
                outputs: config.data_dim,
            },
        ];
        out.extend(crate::blocks::extras_for(&config.cond(guidance)));
        out
    }

    /// Embedders and heads outside the block stack.
    pub fn extras(&self) -> Vec<Extra> {
        Self::extras_for(&self.config, self.guidance_input)
    }

    fn check_batch(
        &self,
        x: &Tensor<T>,
        n_time: usize,
        y: &[usize],
        w: Option<&[T]>,
    ) -> Result<usize> {
        if x.shape().len() != 2 || x.cols() != self.config.data_dim {
            return Err(dim_err(
                "backbone",
                format!(
                    "input {:?}, expected [n, {}]",
                    x.shape(),
                    self.config.data_dim
                ),
            ));
        }
        let n = x.rows();
        if n_time != n || y.len() != n || w.is_some_and(|w| w.len() != n) {
            return Err(dim_err(
                "backbone",
                "conditioning fields disagree with batch size",
            ));
        }
        Ok(n)
    }

    /// Records a forward pass. Returns the output and, when `keep_states`,
    /// the hidden state after the embed and after every block.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape<'_, T>,
        bound: &Bound,
        x: Var,
        t: &[T],
        y: &[usize],
        w: Option<&[T]>,
        keep_states: bool,
    ) -> Result<(Var, Vec<Var>)> {
        let w = if self.guidance_input {
            Some(w.ok_or_else(|| Error::Input("flow map needs a guidance weight".into()))?)
        } else {
            None
        };
        let cond = self.cond.embed(tape, bound, t, y, w)?;
        let mut h = self.input.forward(tape, bound, x)?;
        let mut states = Vec::new();
        if keep_states {
            states.push(h);
        }
        for block in &self.blocks {
            h = block.forward(tape, bound, h, 1, Some(cond))?;
            if keep_states {
                states.push(h);
            }
        }
        let out = self.head.forward(tape, bound, h)?;
        Ok((out, states))
    }

    /// Value-only evaluation.
    pub fn eval(&self, x: &Tensor<T>, t: &[T], y: &[usize], w: Option<&[T]>) -> Result<Tensor<T>> {
        self.check_batch(x, t.len(), y, w)?;
        let mut tape = Tape::no_grad();
        let bound = self.params.bind_frozen(&mut tape);
        let xv = tape.constant_ref(x);
        let (out, _) = self.forward(&mut tape, &bound, xv, t, y, w, false)?;
        Ok(tape.value(out).clone())
    }

    fn eval_with_states(
        &self,
        x: &Tensor<T>,
        t: &[T],
        y: &[usize],
        w: Option<&[T]>,
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        self.check_batch(x, t.len(), y, w)?;
        let mut tape = Tape::no_grad();
        let bound = self.params.bind_frozen(&mut tape);
        let xv = tape.constant_ref(x);
        let (out, states) = self.forward(&mut tape, &bound, xv, t, y, w, true)?;
        let states = states.iter().map(|&s| tape.value(s).clone()).collect();
        Ok((tape.value(out).clone(), states))
    }
}

/// Instantaneous velocity `u(x, t | y)`: points from data towards noise.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField<T>(pub Backbone<T>);

impl<T: Scalar> VelocityField<T> {
    pub fn init<R: Rng + ?Sized>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        Ok(Self(Backbone::init(config, false, rng)?))
    }

    pub fn backbone(&self) -> &Backbone<T> {
        &self.0
    }

    pub fn null_class(&self) -> usize {
        self.0.cond.null_class()
    }

    /// Class-conditional (or, with the null label, unconditional) velocity.
    pub fn velocity(&self, x: &Tensor<T>, t: &[T], y: &[usize]) -> Result<Tensor<T>> {
        self.0.eval(x, t, y, None)
    }

    /// Classifier-free guided velocity `u_∅ + w·(u_y − u_∅)`, per row.
    pub fn guided(&self, x: &Tensor<T>, t: &[T], y: &[usize], w: &[T]) -> Result<Tensor<T>> {
        if w.len() != x.rows() {
            return Err(dim_err("guided_velocity", "one guidance weight per row"));
        }
        if w.iter().all(|&wi| wi == T::one()) {
            return self.velocity(x, t, y);
        }
        let n = x.rows();
        let d = x.cols();
        let mut stacked = x.data().to_vec();
        stacked.extend_from_slice(x.data());
        let stacked = Tensor::new(vec![2 * n, d], stacked)?;
        let tt: Vec<T> = t.iter().chain(t).copied().collect();
        let null = self.null_class();
        let yy: Vec<usize> = y
            .iter()
            .copied()
            .chain(std::iter::repeat_n(null, n))
            .collect();
        let both = self.0.eval(&stacked, &tt, &yy, None)?;
        let (cond, uncond) = both.data().split_at(n * d);
        let out = (0..n * d)
            .map(|i| uncond[i] + w[i / d] * (cond[i] - uncond[i]))
            .collect();
        Tensor::new(vec![n, d], out)
    }
}

/// Hidden states along depth, `h⁽⁰⁾ … h⁽ᴸ⁾`, with normalized coordinates `l/L`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthTrace<T> {
    pub states: Vec<Tensor<T>>,
    pub coords: Vec<f64>,
}

/// One-step flow map. Its output is the mean velocity `F(z, δ | y, w)` with
/// the interval `δ` in the time slot, and `f(z, δ) = z − δ·F(z, δ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowMapModel<T>(pub Backbone<T>);

impl<T: Scalar> FlowMapModel<T> {
    pub fn init<R: Rng + ?Sized>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        Ok(Self(Backbone::init(config, true, rng)?))
    }

    pub fn backbone(&self) -> &Backbone<T> {
        &self.0
    }

    pub fn mean_velocity(
        &self,
        z: &Tensor<T>,
        delta: &[T],
        y: &[usize],
        w: &[T],
    ) -> Result<Tensor<T>> {
        self.0.eval(z, delta, y, Some(w))
    }

    pub fn flow_map(&self, z: &Tensor<T>, delta: &[T], y: &[usize], w: &[T]) -> Result<Tensor<T>> {
        let f = self.mean_velocity(z, delta, y, w)?;
        step_along(z, &f, delta)
    }

    /// `f(z, 1)`: the deployed one-step sample.
    pub fn one_step(&self, z: &Tensor<T>, y: &[usize], w: &[T]) -> Result<Tensor<T>> {
        let ones = vec![T::one(); z.rows()];
        self.flow_map(z, &ones, y, w)
    }

    /// Single pass recording every post-block state and the final velocity.
    pub fn depth_trace(
        &self,
        z: &Tensor<T>,
        t: &[T],
        y: &[usize],
        w: &[T],
    ) -> Result<(DepthTrace<T>, Tensor<T>)> {
        let (v, states) = self.0.eval_with_states(z, t, y, Some(w))?;
        let depth = self.0.config.depth as f64;
        let coords = (0..states.len()).map(|l| l as f64 / depth).collect();
        Ok((DepthTrace { states, coords }, v))
    }
}

/// `z − δ·F` with one `δ` per row.
pub(crate) fn step_along<T: Scalar>(
    z: &Tensor<T>,
    f: &Tensor<T>,
    delta: &[T],
) -> Result<Tensor<T>> {
    if z.shape() != f.shape() || delta.len() != z.rows() {
        return Err(dim_err("flow_map", "state, velocity and interval disagree"));
    }
    let d = z.cols();
    let out = z
        .data()
        .iter()
        .zip(f.data())
        .enumerate()
        .map(|(i, (&zi, &fi))| zi - delta[i / d] * fi)
        .collect();
    Tensor::new(z.shape().to_vec(), out)
}
