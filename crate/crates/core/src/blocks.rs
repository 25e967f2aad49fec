//! Conditioned residual transformer block and its conditioning embedder.
//!
//! The block computes `h + F(h, c)` with
//! `F = FFN(LN(h + SelfAttn(LN(h))))`. Conditioning enters as adaptive
//! shift/scale on both normalized inputs and a gate on each sub-layer output.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::params::{Bound, ParamId, ParamSet};
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    pub hidden: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Width of the conditioning vector; 0 disables modulation entirely.
    pub cond_dim: usize,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 {
            return Err(Error::Config("hidden and heads must be positive".into()));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads ({}) must divide hidden ({})",
                self.heads, self.hidden
            )));
        }
        if self.mlp_ratio < 1 {
            return Err(Error::Config("mlp_ratio must be at least 1".into()));
        }
        Ok(())
    }

    pub fn ffn_width(&self) -> usize {
        self.hidden * self.mlp_ratio
    }

    /// `(suffix, shape)` of every tensor in one block, in registration order.
    fn layout(&self) -> Vec<(&'static str, Vec<usize>)> {
        let h = self.hidden;
        let f = self.ffn_width();
        let mut out = vec![
            ("ln1.gain", vec![h]),
            ("ln1.bias", vec![h]),
            ("attn.q.w", vec![h, h]),
            ("attn.q.b", vec![h]),
            ("attn.k.w", vec![h, h]),
            ("attn.k.b", vec![h]),
            ("attn.v.w", vec![h, h]),
            ("attn.v.b", vec![h]),
            ("attn.out.w", vec![h, h]),
            ("attn.out.b", vec![h]),
            ("ln2.gain", vec![h]),
            ("ln2.bias", vec![h]),
            ("ffn.in.w", vec![h, f]),
            ("ffn.in.b", vec![f]),
            ("ffn.out.w", vec![f, h]),
            ("ffn.out.b", vec![h]),
        ];
        if self.cond_dim > 0 {
            out.push(("mod.w", vec![self.cond_dim, 6 * h]));
            out.push(("mod.b", vec![6 * h]));
        }
        out
    }
}

/// An affine map `x·W + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        set: &mut ParamSet<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        zero: bool,
        rng: &mut R,
    ) -> Self {
        let weight = if zero {
            Tensor::zeros(&[inputs, outputs])
        } else {
            Tensor::randn(&[inputs, outputs], 1.0 / (inputs as f64).sqrt(), rng)
        };
        Self {
            weight: set.add(format!("{name}.w"), weight),
            bias: set.add(format!("{name}.b"), Tensor::zeros(&[outputs])),
        }
    }

    pub fn locate<T: Scalar>(
        set: &ParamSet<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
    ) -> Result<Self> {
        Ok(Self {
            weight: set.expect(&format!("{name}.w"), &[inputs, outputs])?,
            bias: set.expect(&format!("{name}.b"), &[outputs])?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, bound: &Bound, x: Var) -> Result<Var> {
        tape.affine(x, bound[self.weight], bound[self.bias])
    }
}

/// Parameter handles of one residual block inside a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub config: BlockConfig,
    ln1: (ParamId, ParamId),
    q: Linear,
    k: Linear,
    v: Linear,
    attn_out: Linear,
    ln2: (ParamId, ParamId),
    ffn_in: Linear,
    ffn_out: Linear,
    modulation: Option<Linear>,
}

impl BlockParams {
    /// Registers a freshly initialized block under `prefix`.
    ///
    /// Attention and FFN weights are `N(0, 1/fan_in)`. The modulation map
    /// starts at zero so every gate is closed and the block is the identity.
    /// Without conditioning there are no gates, so the two residual output
    /// projections start at zero instead.
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        config: BlockConfig,
        set: &mut ParamSet<T>,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let conditioned = config.cond_dim > 0;
        for (suffix, shape) in config.layout() {
            let fan_in = shape[0] as f64;
            let zero_out = !conditioned && matches!(suffix, "attn.out.w" | "ffn.out.w");
            let value = if suffix.ends_with(".gain") {
                Tensor::ones(&shape)
            } else if shape.len() == 1 || suffix.starts_with("mod.") || zero_out {
                Tensor::zeros(&shape)
            } else {
                Tensor::randn(&shape, 1.0 / fan_in.sqrt(), rng)
            };
            set.add(format!("{prefix}.{suffix}"), value);
        }
        Self::locate(config, set, prefix)
    }

    /// Finds an existing block's tensors under `prefix`.
    pub fn locate<T: Scalar>(config: BlockConfig, set: &ParamSet<T>, prefix: &str) -> Result<Self> {
        config.validate()?;
        let (h, f) = (config.hidden, config.ffn_width());
        let vec = |s: &str| set.expect(&format!("{prefix}.{s}"), &[h]);
        let lin = |s: &str, i, o| Linear::locate(set, &format!("{prefix}.{s}"), i, o);
        Ok(Self {
            config,
            ln1: (vec("ln1.gain")?, vec("ln1.bias")?),
            q: lin("attn.q", h, h)?,
            k: lin("attn.k", h, h)?,
            v: lin("attn.v", h, h)?,
            attn_out: lin("attn.out", h, h)?,
            ln2: (vec("ln2.gain")?, vec("ln2.bias")?),
            ffn_in: lin("ffn.in", h, f)?,
            ffn_out: lin("ffn.out", f, h)?,
            modulation: if config.cond_dim > 0 {
                Some(lin("mod", config.cond_dim, 6 * h)?)
            } else {
                None
            },
        })
    }

    pub fn ffn_out(&self) -> Linear {
        self.ffn_out
    }

    pub fn attn_out(&self) -> Linear {
        self.attn_out
    }

    pub fn modulation(&self) -> Option<Linear> {
        self.modulation
    }

    /// The residual increment `F(h, cond)` alone.
    ///
    /// `h` holds `groups·tokens` rows; `cond` (when the block is conditioned)
    /// holds one row per group, or a single row for all of them.
    pub fn residual<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        bound: &Bound,
        h: Var,
        tokens: usize,
        cond: Option<Var>,
    ) -> Result<Var> {
        let cfg = self.config;
        let (rows, width) = {
            let s = tape.value(h).shape();
            if s.len() != 2 {
                return Err(dim_err(
                    "residual_block",
                    format!("expected matrix, got {s:?}"),
                ));
            }
            (s[0], s[1])
        };
        if width != cfg.hidden {
            return Err(dim_err(
                "residual_block",
                format!("input width {width}, block hidden {}", cfg.hidden),
            ));
        }
        if tokens == 0 || rows % tokens != 0 {
            return Err(dim_err(
                "residual_block",
                format!("{rows} rows in groups of {tokens}"),
            ));
        }
        let groups = rows / tokens;
        let eps = T::lit(LN_EPS);

        // Six modulation slices, plus whether they are single rows applied to
        // every row of `h`.
        let mods = match (self.modulation, cond) {
            (Some(lin), Some(c)) => {
                let cs = tape.value(c).shape();
                let shared = match cs {
                    [1, d] if *d == cfg.cond_dim => true,
                    [r, d] if *d == cfg.cond_dim && *r == groups => false,
                    _ => {
                        return Err(dim_err(
                            "residual_block",
                            format!("condition {cs:?}, expected [{groups}, {}]", cfg.cond_dim),
                        ))
                    }
                };
                let act = tape.silu(c)?;
                let m = lin.forward(tape, bound, act)?;
                let m = if shared {
                    m
                } else {
                    tape.repeat_rows(m, tokens)?
                };
                let mut parts = [m; 6];
                for (i, p) in parts.iter_mut().enumerate() {
                    *p = tape.slice_cols(m, i * cfg.hidden, cfg.hidden)?;
                }
                Some((parts, shared))
            }
            (None, None) => None,
            (Some(_), None) => {
                return Err(Error::Input(
                    "conditioned block needs a condition vector".into(),
                ))
            }
            (None, Some(_)) => {
                return Err(Error::Input(
                    "block has no conditioning but one was given".into(),
                ))
            }
        };

        let modulate =
            |tape: &mut Tape<'_, T>, x: Var, shift: usize, scale: usize| -> Result<Var> {
                match mods {
                    Some((m, shared)) => {
                        let s = tape.add_scalar(m[scale], T::one())?;
                        if shared {
                            let y = tape.mul_row(x, s)?;
                            tape.add_row(y, m[shift])
                        } else {
                            let y = tape.mul(x, s)?;
                            tape.add(y, m[shift])
                        }
                    }
                    None => Ok(x),
                }
            };
        let gate = |tape: &mut Tape<'_, T>, x: Var, g: usize| -> Result<Var> {
            match mods {
                Some((m, true)) => tape.mul_row(x, m[g]),
                Some((m, false)) => tape.mul(x, m[g]),
                None => Ok(x),
            }
        };

        let n1 = tape.layer_norm(h, Some(bound[self.ln1.0]), Some(bound[self.ln1.1]), eps)?;
        let a = modulate(tape, n1, 0, 1)?;
        let v = self.v.forward(tape, bound, a)?;
        // A lone token attends only to itself with weight one.
        let att = if tokens == 1 {
            v
        } else {
            let q = self.q.forward(tape, bound, a)?;
            let k = self.k.forward(tape, bound, a)?;
            tape.attention(q, k, v, groups, cfg.heads)?
        };
        let att = self.attn_out.forward(tape, bound, att)?;
        let att = gate(tape, att, 2)?;
        let inner = tape.add(h, att)?;

        let n2 = tape.layer_norm(inner, Some(bound[self.ln2.0]), Some(bound[self.ln2.1]), eps)?;
        let b = modulate(tape, n2, 3, 4)?;
        let f = self.ffn_in.forward(tape, bound, b)?;
        let f = tape.gelu(f)?;
        let f = self.ffn_out.forward(tape, bound, f)?;
        gate(tape, f, 5)
    }

    /// `h + F(h, cond)`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        bound: &Bound,
        h: Var,
        tokens: usize,
        cond: Option<Var>,
    ) -> Result<Var> {
        let f = self.residual(tape, bound, h, tokens, cond)?;
        tape.add(h, f)
    }
}

/// Evaluates one block on a plain tensor, outside any gradient context.
pub fn residual_block_forward<T: Scalar>(
    h: &Tensor<T>,
    block: &BlockParams,
    params: &ParamSet<T>,
    tokens: usize,
    cond: Option<&ConditionVector<T>>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::no_grad();
    let bound = params.bind_frozen(&mut tape);
    let hv = tape.constant(h.clone());
    let groups = h.rows() / tokens.max(1);
    let c = match cond {
        Some(c) => {
            let row = c.0.reshape(&[1, c.0.numel()])?;
            let rows: Vec<&[T]> = (0..groups).map(|_| row.data()).collect();
            Some(tape.constant(Tensor::from_rows(&rows)?))
        }
        None => None,
    };
    let out = block.forward(&mut tape, &bound, hv, tokens, c)?;
    Ok(tape.value(out).clone())
}

/// Which scalar inputs an embedder accepts besides time and class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CondConfig {
    pub cond_dim: usize,
    /// Width of each sinusoidal feature vector (even).
    pub freq_dim: usize,
    /// Number of real classes; index `classes` is the unconditional token.
    pub classes: usize,
    pub guidance: bool,
    pub depth: bool,
}

/// Conditioning embedding for one `(t, y, w, τ)` tuple.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionVector<T>(pub Tensor<T>);

impl<T: Scalar> ConditionVector<T> {
    pub fn values(&self) -> &[T] {
        self.0.data()
    }
}

const TIME_SCALE: f64 = 10.0;
const MAX_PERIOD: f64 = 100.0;

/// `[cos(s·f_i), sin(s·f_i)]` with geometrically spaced frequencies.
pub fn sinusoidal<T: Scalar>(s: T, freq_dim: usize, out: &mut Vec<T>) {
    let half = freq_dim / 2;
    let s = s.to_f64().unwrap_or(0.0) * TIME_SCALE;
    let start = out.len();
    out.resize(start + freq_dim, T::zero());
    for i in 0..half {
        let freq = (-(MAX_PERIOD.ln()) * i as f64 / half as f64).exp();
        out[start + i] = T::lit((s * freq).cos());
        out[start + half + i] = T::lit((s * freq).sin());
    }
}

/// Sinusoidal scalar embeddings mapped linearly to `cond_dim`, plus a class table.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEmbedder {
    pub config: CondConfig,
    time: Linear,
    guidance: Option<Linear>,
    depth: Option<Linear>,
    table: ParamId,
}

impl ConditionEmbedder {
    pub fn validate(config: &CondConfig) -> Result<()> {
        if config.cond_dim == 0 || config.freq_dim < 2 || config.freq_dim % 2 != 0 {
            return Err(Error::Config(
                "cond_dim must be positive and freq_dim an even number ≥ 2".into(),
            ));
        }
        if config.classes == 0 {
            return Err(Error::Config("at least one class is required".into()));
        }
        Ok(())
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(
        config: CondConfig,
        set: &mut ParamSet<T>,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        Self::validate(&config)?;
        let (f, c) = (config.freq_dim, config.cond_dim);
        let time = Linear::init(set, &format!("{prefix}.time"), f, c, false, rng);
        let guidance = config
            .guidance
            .then(|| Linear::init(set, &format!("{prefix}.guidance"), f, c, false, rng));
        let depth = config
            .depth
            .then(|| Linear::init(set, &format!("{prefix}.depth"), f, c, false, rng));
        let table = set.add(
            format!("{prefix}.class_table"),
            Tensor::randn(&[config.classes + 1, c], 1.0 / (c as f64).sqrt(), rng),
        );
        Ok(Self {
            config,
            time,
            guidance,
            depth,
            table,
        })
    }

    pub fn locate<T: Scalar>(config: CondConfig, set: &ParamSet<T>, prefix: &str) -> Result<Self> {
        Self::validate(&config)?;
        let (f, c) = (config.freq_dim, config.cond_dim);
        Ok(Self {
            config,
            time: Linear::locate(set, &format!("{prefix}.time"), f, c)?,
            guidance: if config.guidance {
                Some(Linear::locate(set, &format!("{prefix}.guidance"), f, c)?)
            } else {
                None
            },
            depth: if config.depth {
                Some(Linear::locate(set, &format!("{prefix}.depth"), f, c)?)
            } else {
                None
            },
            table: set.expect(&format!("{prefix}.class_table"), &[config.classes + 1, c])?,
        })
    }

    pub fn null_class(&self) -> usize {
        self.config.classes
    }

    /// Batched embedding of `(t, y, w)`, one row per sample, without the
    /// depth term.
    pub fn embed<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        bound: &Bound,
        t: &[T],
        y: &[usize],
        w: Option<&[T]>,
    ) -> Result<Var> {
        let n = t.len();
        if y.len() != n || w.is_some_and(|w| w.len() != n) {
            return Err(dim_err(
                "embed_condition",
                "batch fields disagree in length",
            ));
        }
        if n == 0 {
            return Err(Error::Input("empty conditioning batch".into()));
        }
        let f = self.config.freq_dim;
        let mut feats = Vec::with_capacity(n * f);
        for &s in t {
            sinusoidal(s, f, &mut feats);
        }
        let tf = tape.constant(Tensor::from_parts(vec![n, f], feats));
        let mut cond = self.time.forward(tape, bound, tf)?;

        match (self.guidance, w) {
            (Some(lin), Some(w)) => {
                let mut feats = Vec::with_capacity(n * f);
                for &s in w {
                    sinusoidal(s, f, &mut feats);
                }
                let wf = tape.constant(Tensor::from_parts(vec![n, f], feats));
                let g = lin.forward(tape, bound, wf)?;
                cond = tape.add(cond, g)?;
            }
            (None, None) => {}
            (Some(_), None) => {
                return Err(Error::Input(
                    "this embedder requires a guidance weight".into(),
                ))
            }
            (None, Some(_)) => {
                return Err(Error::Input(
                    "this embedder takes no guidance weight".into(),
                ))
            }
        }

        let rows = self.config.classes + 1;
        let mut onehot = vec![T::zero(); n * rows];
        for (i, &label) in y.iter().enumerate() {
            if label >= rows {
                return Err(Error::Input(format!(
                    "class {label} out of range for {} classes",
                    self.config.classes
                )));
            }
            onehot[i * rows + label] = T::one();
        }
        let oh = tape.constant(Tensor::from_parts(vec![n, rows], onehot));
        let cls = tape.matmul(oh, bound[self.table])?;
        tape.add(cond, cls)
    }

    /// The depth-coordinate contribution, a `[1 × cond_dim]` row.
    pub fn depth_row<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        bound: &Bound,
        tau: T,
    ) -> Result<Var> {
        let lin = self
            .depth
            .ok_or_else(|| Error::Input("this embedder has no depth input".into()))?;
        let mut feats = Vec::with_capacity(self.config.freq_dim);
        sinusoidal(tau, self.config.freq_dim, &mut feats);
        let x = tape.constant(Tensor::from_parts(vec![1, self.config.freq_dim], feats));
        lin.forward(tape, bound, x)
    }

    /// Embeds a single `(t, y, w, τ)`. `w` and `τ` are ignored by embedders
    /// that lack the corresponding input.
    pub fn embed_condition<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        t: T,
        y: usize,
        w: T,
        tau: T,
    ) -> Result<ConditionVector<T>> {
        if !(T::zero()..=T::one()).contains(&t) || !(T::zero()..=T::one()).contains(&tau) {
            return Err(Error::Input("t and τ must lie in [0, 1]".into()));
        }
        let mut tape = Tape::no_grad();
        let bound = params.bind_frozen(&mut tape);
        let ws = [w];
        let mut c = self.embed(
            &mut tape,
            &bound,
            &[t],
            &[y],
            self.guidance.map(|_| &ws[..]),
        )?;
        if self.depth.is_some() {
            let d = self.depth_row(&mut tape, &bound, tau)?;
            c = tape.add(c, d)?;
        }
        let v = tape.value(c);
        Ok(ConditionVector(v.reshape(&[v.numel()])?))
    }

    pub fn extras(&self) -> Vec<Extra> {
        extras_for(&self.config)
    }
}

/// Parameter groups outside the transformer blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Extra {
    Linear { inputs: usize, outputs: usize },
    Matrix { rows: usize, cols: usize },
}

impl Extra {
    pub fn count(&self) -> usize {
        match *self {
            Extra::Linear { inputs, outputs } => inputs * outputs + outputs,
            Extra::Matrix { rows, cols } => rows * cols,
        }
    }
}

pub fn extras_for(config: &CondConfig) -> Vec<Extra> {
    let lin = Extra::Linear {
        inputs: config.freq_dim,
        outputs: config.cond_dim,
    };
    let mut out = vec![lin];
    if config.guidance {
        out.push(lin);
    }
    if config.depth {
        out.push(lin);
    }
    out.push(Extra::Matrix {
        rows: config.classes + 1,
        cols: config.cond_dim,
    });
    out
}

/// Exact scalar-parameter count of `n_blocks` blocks plus the listed extras.
pub fn count_params(config: &BlockConfig, n_blocks: usize, extras: &[Extra]) -> usize {
    let per_block: usize = config
        .layout()
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum();
    n_blocks * per_block + extras.iter().map(Extra::count).sum::<usize>()
}
