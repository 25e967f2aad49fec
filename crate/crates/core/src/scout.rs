//! Best-of-N sampling: the student previews candidates, the teacher refines one.

use std::cell::Cell;
use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::student::SltParams;
use crate::teacher::{FlowMapModel, ToyDistribution};
use crate::tensor::{Scalar, Tensor};

/// Anything that maps a batch of noises to samples in one evaluation.
pub trait OneStepGenerator<T: Scalar> {
    fn generate(&self, z: &Tensor<T>, y: &[usize], w: &[T]) -> Result<Tensor<T>>;
}

impl<T: Scalar> OneStepGenerator<T> for FlowMapModel<T> {
    fn generate(&self, z: &Tensor<T>, y: &[usize], w: &[T]) -> Result<Tensor<T>> {
        self.one_step(z, y, w)
    }
}

impl<T: Scalar> OneStepGenerator<T> for SltParams<T> {
    fn generate(&self, z: &Tensor<T>, y: &[usize], w: &[T]) -> Result<Tensor<T>> {
        self.one_step(z, y, w)
    }
}

/// Wraps a generator and counts its evaluations.
#[derive(Debug)]
pub struct Counting<'a, G> {
    inner: &'a G,
    calls: Cell<usize>,
}

impl<'a, G> Counting<'a, G> {
    pub fn new(inner: &'a G) -> Self {
        Self {
            inner,
            calls: Cell::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }
}

impl<T: Scalar, G: OneStepGenerator<T>> OneStepGenerator<T> for Counting<'_, G> {
    fn generate(&self, z: &Tensor<T>, y: &[usize], w: &[T]) -> Result<Tensor<T>> {
        self.calls.set(self.calls.get() + 1);
        self.inner.generate(z, y, w)
    }
}

/// Sample-space scoring functions; higher is better.
#[derive(Debug, Clone, PartialEq)]
pub enum Scorer {
    /// Exact log-density of the known mixture.
    MixtureLogDensity(ToyDistribution),
    /// Negative distance to the closest mixture mean.
    NearestMean(ToyDistribution),
    /// `−|‖x‖ − √d|`, using only the prior's typical radius.
    PriorShell,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    Oracle,
    NearestMean,
    PriorShell,
}

impl Scorer {
    pub fn from_kind(kind: ScorerKind, dist: &ToyDistribution) -> Self {
        match kind {
            ScorerKind::Oracle => Scorer::MixtureLogDensity(dist.clone()),
            ScorerKind::NearestMean => Scorer::NearestMean(dist.clone()),
            ScorerKind::PriorShell => Scorer::PriorShell,
        }
    }

    pub fn score(&self, x: &[f64]) -> Result<f64> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Scoring("sample contains non-finite values".into()));
        }
        let s = match self {
            Scorer::MixtureLogDensity(d) => d.log_density(x),
            Scorer::NearestMean(d) => -d.nearest_mean_distance(x),
            Scorer::PriorShell => {
                let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                -(norm - (x.len() as f64).sqrt()).abs()
            }
        };
        if !s.is_finite() {
            return Err(Error::Scoring(format!("score {s} is not finite")));
        }
        Ok(s)
    }

    /// Scores every row of a batch.
    pub fn score_rows<T: Scalar>(&self, x: &Tensor<T>) -> Result<Vec<f64>> {
        (0..x.rows())
            .map(|i| {
                let row: Vec<f64> = x
                    .row(i)
                    .iter()
                    .map(|v| v.to_f64().unwrap_or(f64::NAN))
                    .collect();
                self.score(&row)
            })
            .collect()
    }
}

/// Index of the highest score; the lowest index wins ties.
pub fn select_best(scores: &[f64]) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::Input("cannot select from zero candidates".into()));
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoutConfig {
    pub n: usize,
    pub scorer: ScorerKind,
    pub y: usize,
    pub w: f64,
    pub seed: u64,
}

impl Default for ScoutConfig {
    fn default() -> Self {
        Self {
            n: 100,
            scorer: ScorerKind::Oracle,
            y: 0,
            w: 1.0,
            seed: 0,
        }
    }
}

/// The first `n` standard-normal noises of the stream seeded by `seed`.
/// Streams are nested: the first `m < n` rows do not depend on `n`.
pub fn candidate_noises<T: Scalar>(seed: u64, n: usize, dim: usize) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[n, dim], |_| {
        let e: f64 = StandardNormal.sample(&mut rng);
        T::lit(e)
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate<T> {
    pub index: usize,
    pub z: Vec<T>,
    pub preview: Vec<T>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoutReport<T> {
    pub candidates: Vec<Candidate<T>>,
    pub best: usize,
    pub scout_ms: f64,
    pub refine_ms: f64,
    pub total_ms: f64,
}

impl<T: Scalar> ScoutReport<T> {
    /// `index,score,selected` rows followed by a `#` timing summary line.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["index", "score", "selected"])?;
        for c in &self.candidates {
            wtr.write_record([
                c.index.to_string(),
                format!("{:.17e}", c.score),
                u8::from(c.index == self.best).to_string(),
            ])?;
        }
        let mut out = wtr.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        writeln!(
            out,
            "# scout_ms={:.6},refine_ms={:.6},total_ms={:.6}",
            self.scout_ms, self.refine_ms, self.total_ms
        )?;
        Ok(())
    }
}

/// Scores a batch of generated samples and keeps the best row.
pub fn best_of_n<T: Scalar, G: OneStepGenerator<T> + ?Sized>(
    generator: &G,
    scorer: &Scorer,
    z: &Tensor<T>,
    y: usize,
    w: T,
) -> Result<(Tensor<T>, f64, usize)> {
    let n = z.rows();
    let x = generator.generate(z, &vec![y; n], &vec![w; n])?;
    let scores = scorer.score_rows(&x)?;
    let best = select_best(&scores)?;
    Ok((x.select_rows(&[best])?, scores[best], best))
}

/// Previews `cfg.n` noises with `student`, then spends exactly one `teacher`
/// evaluation on the best-scoring noise.
pub fn scout_and_refine<T, S, G>(
    student: &S,
    teacher: &G,
    scorer: &Scorer,
    cfg: &ScoutConfig,
    dim: usize,
) -> Result<(Tensor<T>, ScoutReport<T>)>
where
    T: Scalar,
    S: OneStepGenerator<T> + ?Sized,
    G: OneStepGenerator<T> + ?Sized,
{
    if cfg.n == 0 {
        return Err(Error::Input("scout needs at least one candidate".into()));
    }
    let w = T::lit(cfg.w);
    let start = Instant::now();
    let z = candidate_noises::<T>(cfg.seed, cfg.n, dim);
    let previews = student.generate(&z, &vec![cfg.y; cfg.n], &vec![w; cfg.n])?;
    let scores = scorer.score_rows(&previews)?;
    let best = select_best(&scores)?;
    let scout_done = Instant::now();
    let chosen = z.select_rows(&[best])?;
    let refined = teacher.generate(&chosen, &[cfg.y], &[w])?;
    let end = Instant::now();

    let candidates = scores
        .iter()
        .enumerate()
        .map(|(i, &score)| Candidate {
            index: i,
            z: z.row(i).to_vec(),
            preview: previews.row(i).to_vec(),
            score,
        })
        .collect();
    let ms = |a: Instant, b: Instant| (b - a).as_secs_f64() * 1e3;
    let report = ScoutReport {
        candidates,
        best,
        scout_ms: ms(start, scout_done),
        refine_ms: ms(scout_done, end),
        total_ms: ms(start, end),
    };
    Ok((refined, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selection_rules() {
        assert_eq!(select_best(&[0.1, 0.9, 0.5]).unwrap(), 1);
        assert_eq!(select_best(&[0.3]).unwrap(), 0);
        assert_eq!(select_best(&[2.0, 2.0, 2.0]).unwrap(), 0);
        assert!(select_best(&[]).is_err());
    }

    #[test]
    fn scorers_at_a_mean() {
        let d = ToyDistribution::ring(8, 2.0, 0.2).unwrap();
        let m = d.means()[0].clone();
        assert_eq!(Scorer::NearestMean(d.clone()).score(&m).unwrap(), 0.0);
        assert!(Scorer::PriorShell.score(&[f64::NAN, 0.0]).is_err());
        let shell = Scorer::PriorShell.score(&[2.0f64.sqrt(), 0.0]).unwrap();
        assert!(shell.abs() < 1e-15);
    }

    #[test]
    fn noise_streams_are_nested() {
        let a = candidate_noises::<f32>(7, 10, 2);
        let b = candidate_noises::<f32>(7, 100, 2);
        assert_eq!(a.data(), &b.data()[..20]);
    }
}
