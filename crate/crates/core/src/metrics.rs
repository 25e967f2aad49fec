//! Two-sample discrepancy and paired-trial statistics.

use crate::error::{dim_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn mean_within(rows: &[Vec<f64>]) -> f64 {
    let n = rows.len();
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += dist(&rows[i], &rows[j]);
        }
    }
    2.0 * total / (n * n) as f64
}

fn to_rows<T: Scalar>(x: &Tensor<T>) -> Vec<Vec<f64>> {
    (0..x.rows())
        .map(|i| {
            x.row(i)
                .iter()
                .map(|v| v.to_f64().unwrap_or(f64::NAN))
                .collect()
        })
        .collect()
}

/// Energy distance `2·E‖X−Y‖ − E‖X−X'‖ − E‖Y−Y'‖` between the two
/// empirical distributions (V-statistic: within-sample means include the
/// zero diagonal). The value is never negative and is zero only for equal
/// samples up to reordering.
pub fn energy_distance<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.cols() {
        return Err(dim_err(
            "energy_distance",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::Input(
            "energy distance needs samples on both sides".into(),
        ));
    }
    let (ra, rb) = (to_rows(a), to_rows(b));
    let mut cross = 0.0;
    for x in &ra {
        for y in &rb {
            cross += dist(x, y);
        }
    }
    cross /= (ra.len() * rb.len()) as f64;
    let value = 2.0 * cross - mean_within(&ra) - mean_within(&rb);
    if !value.is_finite() {
        return Err(Error::NonFinite("energy_distance"));
    }
    Ok(value)
}

/// Outcome of a one-sided exact sign test on paired differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignTest {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// `P(Binomial(wins + losses, ½) ≥ wins)`.
    pub p_value: f64,
}

/// Tests whether `a` tends to exceed `b`; ties are discarded.
pub fn sign_test(a: &[f64], b: &[f64]) -> Result<SignTest> {
    if a.len() != b.len() {
        return Err(dim_err("sign_test", "paired samples differ in length"));
    }
    let (mut wins, mut losses, mut ties) = (0, 0, 0);
    for (x, y) in a.iter().zip(b) {
        if x > y {
            wins += 1;
        } else if x < y {
            losses += 1;
        } else {
            ties += 1;
        }
    }
    let n = wins + losses;
    let p_value = binomial_upper_tail(n, wins);
    Ok(SignTest {
        wins,
        losses,
        ties,
        p_value,
    })
}

/// `P(X ≥ k)` for `X ~ Binomial(n, ½)`, summed in log space.
fn binomial_upper_tail(n: usize, k: usize) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > n {
        return 0.0;
    }
    let ln_half_n = -(n as f64) * std::f64::consts::LN_2;
    let mut ln_choose = vec![0.0f64; n + 1];
    for i in 1..=n {
        ln_choose[i] = ln_choose[i - 1] + ((n - i + 1) as f64).ln() - (i as f64).ln();
    }
    (k..=n)
        .map(|i| (ln_choose[i] + ln_half_n).exp())
        .sum::<f64>()
        .min(1.0)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (`n − 1` denominator); 0 for fewer than two values.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}
