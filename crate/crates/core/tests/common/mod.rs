//! Finite-difference gradient oracle shared by the integration tests.
#![allow(dead_code)]

use depthflow::blocks::{BlockConfig, BlockParams};
use depthflow::params::ParamSet;
use depthflow::student::{SltConfig, SltParams};
use depthflow::{Result, Scalar, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;

/// `‖a − b‖ / max(‖a‖ + ‖b‖, 1e-12)` over concatenated gradient vectors.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / (na + nb).max(1e-12)
}

/// Reduces a possibly non-scalar output to `Σ out ⊙ weights`, so every
/// output entry contributes with a distinct random weight.
fn reduce(tape: &mut Tape<'_, f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = tape.constant(weights.reshape(tape.value(out).shape())?);
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

fn weights_for<R: Rng + ?Sized>(out_numel: usize, rng: &mut R) -> Tensor<f64> {
    Tensor::randn(&[out_numel], 1.0, rng)
}

/// Checks analytic against central-difference gradients for every input.
/// Returns the norm-wise relative error.
pub fn check_inputs<'p, F, R>(inputs: &[Tensor<f64>], f: F, rng: &mut R) -> Result<f64>
where
    F: Fn(&mut Tape<'p, f64>, &[Var]) -> Result<Var>,
    R: Rng + ?Sized,
{
    let out_numel = {
        let mut tape = Tape::no_grad();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).numel()
    };
    let weights = weights_for(out_numel, rng);

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let loss = reduce(&mut tape, out, &weights)?;
    let grads = tape.backward(loss)?;
    let mut analytic = Vec::new();
    for (v, t) in vars.iter().zip(inputs) {
        match grads.get(*v) {
            Some(g) => analytic.extend_from_slice(g.data()),
            None => analytic.extend(std::iter::repeat_n(0.0, t.numel())),
        }
    }

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::no_grad();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let loss = reduce(&mut tape, out, &weights)?;
        Ok(tape.value(loss).data()[0])
    };
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut xs = inputs.to_vec();
    for i in 0..xs.len() {
        for j in 0..xs[i].numel() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + FD_STEP;
            let hi = eval(&xs)?;
            xs[i].data_mut()[j] = orig - FD_STEP;
            let lo = eval(&xs)?;
            xs[i].data_mut()[j] = orig;
            numeric.push((hi - lo) / (2.0 * FD_STEP));
        }
    }
    Ok(rel_err(&analytic, &numeric))
}

/// Same check with respect to (a sample of) model parameters. `f` records a
/// scalar loss from the bound parameters.
pub fn check_params<F, R>(
    params: &ParamSet<f64>,
    max_entries: usize,
    f: F,
    rng: &mut R,
) -> Result<f64>
where
    F: Fn(&ParamSet<f64>, &mut Tape<'_, f64>, &depthflow::params::Bound) -> Result<Var>,
    R: Rng + ?Sized,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let loss = f(params, &mut tape, &bound)?;
    let mut grads = tape.backward(loss)?;
    let aligned = params.collect_grads(&bound, &mut grads);
    drop(tape);

    let total: usize = params.iter().map(|(_, t)| t.numel()).sum();
    let picks: Vec<(usize, usize)> = {
        let flat: Vec<(usize, usize)> = params
            .iter()
            .enumerate()
            .flat_map(|(p, (_, t))| (0..t.numel()).map(move |j| (p, j)))
            .collect();
        if total <= max_entries {
            flat
        } else {
            (0..max_entries)
                .map(|_| flat[rng.random_range(0..total)])
                .collect()
        }
    };

    let eval = |ps: &ParamSet<f64>| -> Result<f64> {
        let mut tape = Tape::no_grad();
        let bound = ps.bind_frozen(&mut tape);
        let loss = f(ps, &mut tape, &bound)?;
        Ok(tape.value(loss).data()[0])
    };
    let mut work = params.clone();
    let ids: Vec<_> = (0..params.len())
        .map(|p| work.id(params.iter().nth(p).unwrap().0).unwrap())
        .collect();
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for &(p, j) in &picks {
        let orig = work.get(ids[p]).data()[j];
        work.get_mut(ids[p]).data_mut()[j] = orig + FD_STEP;
        let hi = eval(&work)?;
        work.get_mut(ids[p]).data_mut()[j] = orig - FD_STEP;
        let lo = eval(&work)?;
        work.get_mut(ids[p]).data_mut()[j] = orig;
        numeric.push((hi - lo) / (2.0 * FD_STEP));
        analytic.push(aligned[p].data()[j]);
    }
    Ok(rel_err(&analytic, &numeric))
}

fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

/// Overwrites every parameter with fresh Gaussian values so no branch is
/// trivially zero.
pub fn scramble<T: Scalar, R: Rng + ?Sized>(params: &mut ParamSet<T>, std: f64, rng: &mut R) {
    for t in params.tensors_mut() {
        let shape = t.shape().to_vec();
        *t = Tensor::randn(&shape, std, rng);
    }
}

/// Small projected student behind the committed checkpoint fixture.
pub fn tiny_student() -> Result<SltParams<f32>> {
    let cfg = SltConfig {
        block: BlockConfig {
            hidden: 8,
            heads: 2,
            mlp_ratio: 2,
            cond_dim: 8,
        },
        k: 3,
        teacher_hidden: 16,
        teacher_depth: 6,
        freq_dim: 8,
        ..SltConfig::default()
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
    let mut student = SltParams::init(cfg, &mut rng)?;
    scramble(student.params_mut(), 0.5, &mut rng);
    Ok(student)
}

type Case = (
    &'static str,
    Box<dyn Fn(&mut dyn rand::RngCore) -> Result<f64>>,
);

/// One case per primitive plus the composed block; each case draws a fresh
/// random instance and returns its relative error.
pub fn grad_cases() -> Vec<Case> {
    fn case(
        name: &'static str,
        shapes: Vec<Vec<usize>>,
        f: impl Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var> + 'static,
    ) -> Case {
        (
            name,
            Box::new(move |rng: &mut dyn rand::RngCore| {
                let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| randn(s, rng)).collect();
                check_inputs(&inputs, &f, rng)
            }),
        )
    }
    let mut cases = vec![
        case("matmul", vec![vec![3, 4], vec![4, 5]], |t, v| {
            t.matmul(v[0], v[1])
        }),
        case("add", vec![vec![3, 4], vec![3, 4]], |t, v| {
            t.add(v[0], v[1])
        }),
        case("sub", vec![vec![3, 4], vec![3, 4]], |t, v| {
            t.sub(v[0], v[1])
        }),
        case("mul", vec![vec![3, 4], vec![3, 4]], |t, v| {
            t.mul(v[0], v[1])
        }),
        case("scale", vec![vec![2, 5]], |t, v| t.scale(v[0], -1.7)),
        case("add_scalar", vec![vec![2, 5]], |t, v| {
            t.add_scalar(v[0], 0.3)
        }),
        case("add_row", vec![vec![4, 3], vec![3]], |t, v| {
            t.add_row(v[0], v[1])
        }),
        case("mul_row", vec![vec![4, 3], vec![3]], |t, v| {
            t.mul_row(v[0], v[1])
        }),
        case("affine", vec![vec![4, 3], vec![3, 5], vec![5]], |t, v| {
            t.affine(v[0], v[1], v[2])
        }),
        case("repeat_rows", vec![vec![2, 3]], |t, v| {
            t.repeat_rows(v[0], 3)
        }),
        case("gelu", vec![vec![3, 4]], |t, v| t.gelu(v[0])),
        case("silu", vec![vec![3, 4]], |t, v| t.silu(v[0])),
        case("softmax_rows", vec![vec![3, 5]], |t, v| t.softmax(v[0], 1)),
        case("softmax_cols", vec![vec![3, 5]], |t, v| t.softmax(v[0], 0)),
        case("layer_norm", vec![vec![4, 6], vec![6], vec![6]], |t, v| {
            t.layer_norm(v[0], Some(v[1]), Some(v[2]), 1e-5)
        }),
        case("layer_norm_plain", vec![vec![4, 6]], |t, v| {
            t.layer_norm(v[0], None, None, 1e-5)
        }),
        case(
            "attention",
            vec![vec![6, 4], vec![6, 4], vec![6, 4]],
            |t, v| t.attention(v[0], v[1], v[2], 2, 2),
        ),
        case("mse", vec![vec![3, 4], vec![3, 4]], |t, v| {
            t.mse(v[0], v[1])
        }),
        case("sum", vec![vec![3, 4]], |t, v| t.sum(v[0])),
        case("mean", vec![vec![3, 4]], |t, v| t.mean(v[0])),
        case("concat_cols", vec![vec![3, 2], vec![3, 4]], |t, v| {
            t.concat_cols(&[v[0], v[1]])
        }),
        case("slice_cols", vec![vec![3, 6]], |t, v| {
            t.slice_cols(v[0], 1, 3)
        }),
        case("transpose", vec![vec![3, 5]], |t, v| t.transpose(v[0])),
        case("reshape", vec![vec![3, 4]], |t, v| t.reshape(v[0], &[2, 6])),
    ];
    // (name, cond width, groups, tokens, condition rows)
    let blocks = [
        ("residual_block", 4usize, 2usize, 3usize, 2usize),
        ("residual_block_plain", 0, 2, 3, 1),
        ("residual_block_shared_cond", 4, 2, 3, 1),
        ("residual_block_single_token", 4, 5, 1, 5),
    ];
    for (name, cond_dim, groups, tokens, cond_rows) in blocks {
        cases.push((
            name,
            Box::new(move |rng: &mut dyn rand::RngCore| {
                let cfg = BlockConfig {
                    hidden: 8,
                    heads: 2,
                    mlp_ratio: 2,
                    cond_dim,
                };
                let mut params = ParamSet::new();
                let block = BlockParams::init(cfg, &mut params, "b", rng)?;
                scramble(&mut params, 0.4, rng);
                let h = randn(&[groups * tokens, 8], rng);
                let c = randn(&[cond_rows, cond_dim.max(1)], rng);
                let weights = Tensor::randn(&[groups * tokens * 8], 1.0, rng);
                let f =
                    |_: &ParamSet<f64>, tape: &mut Tape<'_, f64>, b: &depthflow::params::Bound| {
                        let hv = tape.constant(h.clone());
                        let cv = (cond_dim > 0).then(|| tape.constant(c.clone()));
                        let out = block.forward(tape, b, hv, tokens, cv)?;
                        reduce(tape, out, &weights)
                    };
                let e_params = check_params(&params, 200, f, rng)?;
                let inputs = if cond_dim > 0 {
                    vec![h.clone(), c.clone()]
                } else {
                    vec![h.clone()]
                };
                let e_inputs = check_inputs(
                    &inputs,
                    |tape, v| {
                        let bound = params.bind_frozen(tape);
                        block.forward(tape, &bound, v[0], tokens, v.get(1).copied())
                    },
                    rng,
                )?;
                Ok(e_params.max(e_inputs))
            }),
        ));
    }
    cases
}
