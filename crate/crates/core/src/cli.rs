//! Pipeline stages behind the command-line subcommands.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bench::{run_bench, TimingReport};
use crate::blocks::count_params;
use crate::checkpoint::Persist;
use crate::config::RunConfig;
use crate::distill::{distill_train, SltRow};
use crate::error::{Error, Result};
use crate::scout::{candidate_noises, scout_and_refine, Scorer, ScoutReport};
use crate::student::SltParams;
use crate::teacher::{freeflow_distill, train_base_velocity, FlowMapModel, LossRow, VelocityField};
use crate::tensor::Tensor;

/// Stream ids keep each stage's randomness independent of the others.
pub const STREAM_BASE: u64 = 1;
pub const STREAM_FREEFLOW: u64 = 2;
pub const STREAM_SLT: u64 = 3;

pub fn stage_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn resolve(out: &Path, name: &str) -> PathBuf {
    out.join(name)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

/// Serializes rows with a header derived from the row type.
pub fn write_rows<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(create(path)?);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Dependency(path.to_path_buf()))
    }
}

pub fn cmd_train_base(cfg: &RunConfig, out: &Path) -> Result<Vec<LossRow>> {
    let dist = cfg.mixture.build()?;
    let mut rng = stage_rng(cfg.seed, STREAM_BASE);
    let (field, rows) = train_base_velocity::<f32, _>(&dist, cfg.teacher, &cfg.base, &mut rng)?;
    std::fs::create_dir_all(out)?;
    let ckpt = resolve(out, &cfg.paths.base_checkpoint);
    field.save(&ckpt)?;
    write_rows(&resolve(out, &cfg.paths.base_metrics), &rows)?;
    info!("wrote {}", ckpt.display());
    Ok(rows)
}

pub fn cmd_distill_freeflow(cfg: &RunConfig, out: &Path) -> Result<Vec<LossRow>> {
    let base_path = resolve(out, &cfg.paths.base_checkpoint);
    require(&base_path)?;
    let field = VelocityField::<f32>::load(&base_path)?;
    let mut rng = stage_rng(cfg.seed, STREAM_FREEFLOW);
    let (flow, rows) = freeflow_distill(&field, cfg.teacher, &cfg.freeflow, &mut rng)?;
    let ckpt = resolve(out, &cfg.paths.flow_checkpoint);
    flow.save(&ckpt)?;
    write_rows(&resolve(out, &cfg.paths.flow_metrics), &rows)?;
    info!("wrote {}", ckpt.display());
    Ok(rows)
}

pub fn cmd_distill_slt(cfg: &RunConfig, out: &Path) -> Result<Vec<SltRow>> {
    let flow_path = resolve(out, &cfg.paths.flow_checkpoint);
    require(&flow_path)?;
    let teacher = FlowMapModel::<f32>::load(&flow_path)?;
    let mut rng = stage_rng(cfg.seed, STREAM_SLT);
    let (student, rows) = distill_train(&teacher, cfg.student.clone(), &cfg.slt, &mut rng)?;
    let ckpt = resolve(out, &cfg.paths.student_checkpoint);
    student.save(&ckpt)?;
    write_rows(&resolve(out, &cfg.paths.student_metrics), &rows)?;
    info!("wrote {}", ckpt.display());
    Ok(rows)
}

fn load_pair(cfg: &RunConfig, out: &Path) -> Result<(SltParams<f32>, FlowMapModel<f32>)> {
    let s = resolve(out, &cfg.paths.student_checkpoint);
    let t = resolve(out, &cfg.paths.flow_checkpoint);
    require(&s)?;
    require(&t)?;
    Ok((SltParams::load(&s)?, FlowMapModel::load(&t)?))
}

/// Writes one sample per line, values separated by spaces.
pub fn write_samples(path: &Path, x: &Tensor<f32>) -> Result<()> {
    let mut f = create(path)?;
    for i in 0..x.rows() {
        let line: Vec<String> = x.row(i).iter().map(|v| format!("{v:e}")).collect();
        writeln!(f, "{}", line.join(" "))?;
    }
    f.flush()?;
    Ok(())
}

pub fn cmd_scout(cfg: &RunConfig, out: &Path) -> Result<(Tensor<f32>, ScoutReport<f32>)> {
    let (student, teacher) = load_pair(cfg, out)?;
    let dist = cfg.mixture.build()?;
    let scorer = Scorer::from_kind(cfg.scout.scorer, &dist);
    let (sample, report) = scout_and_refine(&student, &teacher, &scorer, &cfg.scout, dist.dim())?;
    write_samples(&resolve(out, &cfg.paths.sample), &sample)?;
    report.write_csv(create(&resolve(out, &cfg.paths.scout_report))?)?;
    info!(
        "selected candidate {} of {} (score {:.4})",
        report.best,
        report.candidates.len(),
        report.candidates[report.best].score
    );
    Ok((sample, report))
}

/// Teacher one-step sample from the first noise of the scout stream.
pub fn cmd_generate(cfg: &RunConfig, out: &Path) -> Result<Tensor<f32>> {
    let t = resolve(out, &cfg.paths.flow_checkpoint);
    require(&t)?;
    let teacher = FlowMapModel::<f32>::load(&t)?;
    let z = candidate_noises::<f32>(cfg.scout.seed, 1, cfg.teacher.data_dim);
    let x = teacher.one_step(&z, &[cfg.scout.y], &[cfg.scout.w as f32])?;
    write_samples(&resolve(out, &cfg.paths.sample), &x)?;
    Ok(x)
}

pub fn cmd_bench(cfg: &RunConfig, out: &Path) -> Result<TimingReport> {
    let (student, teacher) = load_pair(cfg, out)?;
    let dist = cfg.mixture.build()?;
    let scorer = Scorer::from_kind(cfg.scout.scorer, &dist);
    let report = run_bench(
        &student,
        &teacher,
        &scorer,
        &cfg.scout,
        &cfg.bench,
        dist.dim(),
    )?;
    report.write_csv(create(&resolve(out, &cfg.paths.bench_report))?)?;
    if let Some(r) = report.budget_ratio() {
        info!("scout-and-refine / two teacher samples = {r:.3}");
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamRow {
    pub model: String,
    pub hidden: usize,
    pub heads: usize,
    pub depth: usize,
    pub params: usize,
}

/// Exact parameter counts of the configured teacher and student.
pub fn cmd_params(cfg: &RunConfig) -> Result<Vec<ParamRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let teacher = FlowMapModel::<f32>::init(cfg.teacher, &mut rng)?;
    let counted = count_params(
        &cfg.teacher.block,
        cfg.teacher.depth,
        &teacher.backbone().extras(),
    );
    debug_assert_eq!(counted, teacher.backbone().params().count());
    Ok(vec![
        ParamRow {
            model: "teacher".into(),
            hidden: cfg.teacher.block.hidden,
            heads: cfg.teacher.block.heads,
            depth: cfg.teacher.depth,
            params: counted,
        },
        ParamRow {
            model: "slt".into(),
            hidden: cfg.student.block.hidden,
            heads: cfg.student.block.heads,
            depth: cfg.student.k,
            params: cfg.student.param_count(),
        },
    ])
}

pub fn print_params<W: Write>(rows: &[ParamRow], mut out: W) -> Result<()> {
    writeln!(
        out,
        "{:<8} {:>6} {:>5} {:>6} {:>12}",
        "model", "hidden", "heads", "depth", "params"
    )?;
    for r in rows {
        writeln!(
            out,
            "{:<8} {:>6} {:>5} {:>6} {:>12}",
            r.model, r.hidden, r.heads, r.depth, r.params
        )?;
    }
    if let [t, s] = rows {
        writeln!(
            out,
            "ratio slt/teacher = {:.4}",
            s.params as f64 / t.params as f64
        )?;
    }
    Ok(())
}
