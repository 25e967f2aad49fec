//! Wall-clock comparison of the sampling strategies.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::BenchConfig;
use crate::error::{Error, Result};
use crate::metrics::{mean, std_dev};
use crate::scout::{
    candidate_noises, scout_and_refine, Counting, OneStepGenerator, Scorer, ScoutConfig,
};
use crate::tensor::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub strategy: String,
    pub avg_ms: f64,
    pub std_ms: f64,
    pub runs: usize,
}

impl TimingRow {
    fn from_samples(strategy: String, samples: &[f64]) -> Self {
        Self {
            strategy,
            avg_ms: mean(samples),
            std_ms: std_dev(samples),
            runs: samples.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingReport {
    pub rows: Vec<TimingRow>,
    /// Teacher evaluations observed in each measured scout-and-refine call.
    pub teacher_calls: Vec<usize>,
    /// Per-run `(scout, refine, total)` milliseconds of scout-and-refine.
    pub phases: Vec<(f64, f64, f64)>,
}

impl TimingReport {
    pub fn row(&self, prefix: &str) -> Option<&TimingRow> {
        self.rows.iter().find(|r| r.strategy.starts_with(prefix))
    }

    /// `Ours (total)` average over the two-call teacher baseline.
    pub fn budget_ratio(&self) -> Option<f64> {
        Some(self.row("Ours")?.avg_ms / self.row("FreeFlow (2)")?.avg_ms)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["strategy", "avg_ms", "std_ms", "runs"])?;
        for r in &self.rows {
            wtr.write_record([
                r.strategy.clone(),
                format!("{:.6}", r.avg_ms),
                format!("{:.6}", r.std_ms),
                r.runs.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Times the two-sample teacher baseline and scout-and-refine.
///
/// The student-preview and refine rows are the two measured phases of each
/// scout-and-refine run, so all three share the same runs.
pub fn run_bench<T, S, G>(
    student: &S,
    teacher: &G,
    scorer: &Scorer,
    scout: &ScoutConfig,
    cfg: &BenchConfig,
    dim: usize,
) -> Result<TimingReport>
where
    T: Scalar,
    S: OneStepGenerator<T>,
    G: OneStepGenerator<T>,
{
    if cfg.runs < 30 {
        return Err(Error::Config(
            "at least 30 measured runs are required".into(),
        ));
    }
    let w = T::lit(scout.w);
    let scout_cfg = ScoutConfig { n: cfg.n, ..*scout };

    // Baseline and scout-and-refine alternate so drift in machine load
    // affects both strategies alike.
    let mut baseline = Vec::with_capacity(cfg.runs);
    let mut phases = Vec::with_capacity(cfg.runs);
    let mut teacher_calls = Vec::with_capacity(cfg.runs);
    for run in 0..cfg.warmup + cfg.runs {
        let seed = scout.seed.wrapping_add(run as u64);
        let z = candidate_noises::<T>(seed, 2, dim);
        let (a, b) = (z.select_rows(&[0])?, z.select_rows(&[1])?);
        let start = Instant::now();
        teacher.generate(&a, &[scout.y], &[w])?;
        teacher.generate(&b, &[scout.y], &[w])?;
        let ms = start.elapsed().as_secs_f64() * 1e3;

        let counted = Counting::new(teacher);
        let run_cfg = ScoutConfig { seed, ..scout_cfg };
        let (_, report) = scout_and_refine(student, &counted, scorer, &run_cfg, dim)?;
        if run >= cfg.warmup {
            baseline.push(ms);
            phases.push((report.scout_ms, report.refine_ms, report.total_ms));
            teacher_calls.push(counted.calls());
        }
    }

    let col = |f: fn(&(f64, f64, f64)) -> f64| phases.iter().map(f).collect::<Vec<_>>();
    let rows = vec![
        TimingRow::from_samples("FreeFlow (2)".into(), &baseline),
        TimingRow::from_samples(format!("SLT (N={})", cfg.n), &col(|p| p.0)),
        TimingRow::from_samples("FreeFlow Refine (1)".into(), &col(|p| p.1)),
        TimingRow::from_samples("Ours (total)".into(), &col(|p| p.2)),
    ];
    Ok(TimingReport {
        rows,
        teacher_calls,
        phases,
    })
}
