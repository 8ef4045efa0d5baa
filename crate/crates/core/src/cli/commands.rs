//! The six subcommands. Each writes `config.resolved` into its output
//! directory before doing any work.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::options::{AnalysisFormat, RunConfig};
use crate::analysis;
use crate::checkpoint;
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::models::{build_model, Model, ModelConfig};
use crate::scalar::{Precision, Real};
use crate::train::{self, EpochMetrics, Trainer};

pub const RESOLVED_FILE: &str = "config.resolved";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const GRADCHECK_FILE: &str = "gradcheck.txt";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const SWEEP_SUMMARY_FILE: &str = "sweep_summary.csv";
pub const ANALYSIS_DIR: &str = "analysis";

pub fn checkpoint_name(epoch: usize) -> String {
    format!("ckpt_{epoch}.upl")
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Creates the output directory and writes the resolved configuration.
fn prepare_out(rc: &RunConfig, command: &str) -> Result<PathBuf> {
    let out = rc.out_dir()?;
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let text = format!("# unipool {command}\n{}", rc.resolved()?);
    write_file(&out.join(RESOLVED_FILE), &text)?;
    Ok(out)
}

fn check_compatible(config: &ModelConfig, ds: &Dataset) -> Result<()> {
    if config.input_shape != ds.image_shape() || config.num_classes != ds.num_classes() {
        return Err(Error::Data(format!(
            "checkpoint expects {:?} images in {} classes, dataset has {:?} in {}",
            config.input_shape,
            config.num_classes,
            ds.image_shape(),
            ds.num_classes()
        )));
    }
    Ok(())
}

fn checkpoint_precision(path: &Path) -> Result<Precision> {
    let bytes = checkpoint::element_bytes(path)?;
    Precision::from_bits(bytes as u32 * 8).ok_or_else(|| {
        Error::Checkpoint(format!(
            "{}: unsupported element width {bytes}",
            path.display()
        ))
    })
}

fn require_checkpoint(rc: &RunConfig, command: &str) -> Result<PathBuf> {
    rc.checkpoint()
        .ok_or_else(|| Error::Config(format!("{command} needs --checkpoint <file>")))
}

/// Trains (or resumes) into `out`, keeping `metrics.csv` current after every
/// epoch and saving checkpoints as configured.
fn train_into<T: Real>(
    rc: &RunConfig,
    train_ds: &Dataset,
    test_ds: &Dataset,
    out: &Path,
    verbose: bool,
) -> Result<Vec<EpochMetrics>> {
    let mut trainer = match rc.checkpoint() {
        Some(path) => {
            let mut t = Trainer::<T>::load(&path)?;
            check_compatible(&t.model.config, train_ds)?;
            if rc.is_explicit("epochs") {
                let epochs: usize = rc.value("epochs")?;
                if epochs < t.state.epoch {
                    return Err(Error::Config(format!(
                        "epochs = {epochs} but the checkpoint has already completed {}",
                        t.state.epoch
                    )));
                }
                t.cfg.epochs = epochs;
            }
            t
        }
        None => {
            let cfg = rc.train_config()?;
            Trainer::new(build_model::<T>(rc.model_config(train_ds)?, cfg.seed)?, cfg)?
        }
    };
    let metrics_path = out.join(METRICS_FILE);
    let mut rows = Vec::new();
    if trainer.state.epoch > 0 && metrics_path.exists() {
        rows = train::read_metrics_csv(&metrics_path)?;
        rows.retain(|m| m.epoch <= trainer.state.epoch);
    }
    let every: usize = rc.value("checkpoint.every")?;
    train::write_metrics_csv(&metrics_path, &rows)?;
    let history = trainer.run(train_ds, test_ds, |t, m| {
        rows.push(*m);
        train::write_metrics_csv(&metrics_path, &rows)?;
        if verbose {
            println!(
                "epoch {:>4}  loss {:.5}  train@1 {:.4}  test@1 {:.4}  test@5 {:.4}  {:.1}s",
                m.epoch, m.train_loss, m.train_top1, m.test_top1, m.test_top5, m.wall_time_s
            );
        }
        if (every > 0 && m.epoch % every == 0) || m.epoch == t.cfg.epochs {
            t.save(out.join(checkpoint_name(m.epoch)))?;
        }
        Ok(())
    })?;
    Ok(history)
}

fn precision_of(rc: &RunConfig) -> Result<Precision> {
    Ok(match rc.checkpoint() {
        Some(path) => checkpoint_precision(&path)?,
        None => rc.value("precision")?,
    })
}

pub fn train(rc: &RunConfig) -> Result<()> {
    let out = prepare_out(rc, "train")?;
    let (train_ds, test_ds) = rc.load_data()?;
    let history = match precision_of(rc)? {
        Precision::F32 => train_into::<f32>(rc, &train_ds, &test_ds, &out, true)?,
        Precision::F64 => train_into::<f64>(rc, &train_ds, &test_ds, &out, true)?,
    };
    println!(
        "trained {} epochs; metrics in {}",
        history.len(),
        out.join(METRICS_FILE).display()
    );
    Ok(())
}

fn eval_with<T: Real>(
    path: &Path,
    rc: &RunConfig,
    test_ds: &Dataset,
) -> Result<train::EvalMetrics> {
    let trainer = Trainer::<T>::load(path)?;
    check_compatible(&trainer.model.config, test_ds)?;
    let batch_size: usize = rc.value("batch_size")?;
    train::evaluate(&trainer.model, test_ds, batch_size)
}

pub fn eval(rc: &RunConfig) -> Result<()> {
    let path = require_checkpoint(rc, "eval")?;
    let out = prepare_out(rc, "eval")?;
    let (_, test_ds) = rc.load_data()?;
    let m = match checkpoint_precision(&path)? {
        Precision::F32 => eval_with::<f32>(&path, rc, &test_ds)?,
        Precision::F64 => eval_with::<f64>(&path, rc, &test_ds)?,
    };
    write_file(
        &out.join(EVAL_FILE),
        &format!(
            "images,loss,top1,top5\n{},{},{},{}\n",
            test_ds.len(),
            m.loss,
            m.top1,
            m.top5
        ),
    )?;
    println!(
        "test images {}  loss {:.5}  top1 {:.4}  top5 {:.4}",
        test_ds.len(),
        m.loss,
        m.top1,
        m.top5
    );
    Ok(())
}

pub fn gradcheck(rc: &RunConfig) -> Result<()> {
    let out = prepare_out(rc, "gradcheck")?;
    let (train_ds, _) = rc.load_data()?;
    let seed: u64 = rc.value("seed")?;
    let mut model = build_model::<f64>(rc.model_config(&train_ds)?, seed)?;
    train::randomize_zero_params(&mut model, 0.1, seed);
    let n: usize = rc.value("gradcheck.batch")?;
    if n == 0 || n > train_ds.len() {
        return Err(Error::Config(format!(
            "gradcheck.batch must be in 1..={}, got {n}",
            train_ds.len()
        )));
    }
    let idx: Vec<usize> = (0..n).collect();
    let (x, labels) = train_ds.batch::<f64>(&idx);
    let report = train::grad_check(
        &mut model,
        &x,
        &labels,
        rc.value("gradcheck.max_elements")?,
        rc.value("gradcheck.step")?,
        seed,
    )?;
    let tolerance: f64 = rc.value("tolerance")?;
    let text = format!(
        "max_rel_err = {:e}\nchecked = {}\nskipped_kinks = {}\nworst = {}\nstep = {:e}\ntolerance = {:e}\n",
        report.max_rel_err, report.checked, report.skipped_kinks, report.worst, report.step, tolerance
    );
    write_file(&out.join(GRADCHECK_FILE), &text)?;
    print!("{text}");
    if report.checked == 0 {
        return Err(Error::Numerical(
            "every probed element straddled a ReLU or max-pool kink".into(),
        ));
    }
    if report.max_rel_err >= tolerance {
        return Err(Error::GradCheck {
            max_rel_err: report.max_rel_err,
            tolerance,
            worst: report.worst,
        });
    }
    Ok(())
}

fn analyze_with<T: Real>(path: &Path, rc: &RunConfig, test_ds: &Dataset, out: &Path) -> Result<()> {
    let trainer = Trainer::<T>::load(path)?;
    let model: &Model<T> = &trainer.model;
    check_compatible(&model.config, test_ds)?;
    let n: usize = rc.value("analysis.inputs")?;
    if n < 2 || n > test_ds.len() {
        return Err(Error::Config(format!(
            "analysis.inputs must be in 2..={}, got {n}",
            test_ds.len()
        )));
    }
    let idx: Vec<usize> = (0..n).collect();
    let sites = analysis::extract_weights(model, &test_ds.images::<T>(&idx))?;
    let thresholds = rc.thresholds()?;
    let mut profiles = Vec::new();
    for sw in &sites {
        profiles.extend(analysis::categorize(sw, &thresholds)?);
    }
    let dir = out.join(ANALYSIS_DIR);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let names: Vec<String> = model.sites().iter().map(|s| s.name.clone()).collect();
    let table = analysis::summary_table(&profiles, &names);
    write_file(
        &dir.join("profiles.csv"),
        &analysis::profiles_csv(&profiles),
    )?;
    write_file(&dir.join("summary.txt"), &table)?;
    let format = rc.analysis_format()?;
    if matches!(format, AnalysisFormat::Csv | AnalysisFormat::Both) {
        analysis::export_csv(&sites, dir.join("weights.csv"))?;
    }
    if matches!(format, AnalysisFormat::Pgm | AnalysisFormat::Both) {
        analysis::export_pgm(&sites, dir.join("pgm"))?;
    }
    print!("{table}");
    println!("exports in {}", dir.display());
    Ok(())
}

pub fn analyze(rc: &RunConfig) -> Result<()> {
    let path = require_checkpoint(rc, "analyze")?;
    let out = prepare_out(rc, "analyze")?;
    let (_, test_ds) = rc.load_data()?;
    match checkpoint_precision(&path)? {
        Precision::F32 => analyze_with::<f32>(&path, rc, &test_ds, &out),
        Precision::F64 => analyze_with::<f64>(&path, rc, &test_ds, &out),
    }
}

pub fn synth(rc: &RunConfig) -> Result<()> {
    let out = prepare_out(rc, "synth")?;
    let (spec, test_per_class) = rc.synthetic_spec()?;
    let (train_ds, test_ds) = data::synthetic_split(&spec, test_per_class)?;
    data::write_binary_dir(&out, &train_ds, &test_ds)?;
    let [c, h, w] = train_ds.image_shape();
    println!(
        "wrote {} training and {} test images ({c}x{h}x{w}, {} classes) to {}",
        train_ds.len(),
        test_ds.len(),
        train_ds.num_classes(),
        out.display()
    );
    Ok(())
}

/// Indicator, local pooling and global pooling of each comparison row.
pub const POOLING_GRID: [(&str, &str, &str); 11] = [
    ("V1", "max", "max"),
    ("V2", "avg", "avg"),
    ("V3", "stride", "avg"),
    ("V4", "mixed", "mixed"),
    ("V5", "gated-ch", "gated-ch"),
    ("V6", "gated-layer", "gated-layer"),
    ("P1", "universal:fc1", "universal:fc1"),
    ("P2", "universal:fc1", "universal:fc2"),
    ("P3", "universal:fc2", "universal:fc2"),
    ("P4", "universal:fc1", "universal:conv"),
    ("P5", "universal:fc2", "universal:conv"),
];

pub const SWEEP_HEADER: &str =
    "indicator,local_pool,global_pool,seed,status,epochs,train_loss,train_top1,test_top1,test_top5,wall_time_s";

pub fn sweep(rc: &RunConfig) -> Result<()> {
    match rc.get("grid") {
        Some("pooling") => {}
        other => {
            return Err(Error::Config(format!(
                "unknown sweep grid {other:?}; expected pooling"
            )))
        }
    }
    if rc.checkpoint().is_some() {
        return Err(Error::Config(
            "sweep trains every cell from scratch and takes no checkpoint".into(),
        ));
    }
    let out = prepare_out(rc, "sweep")?;
    let repeat: usize = rc.value("repeat")?;
    if repeat == 0 {
        return Err(Error::Config("repeat must be positive".into()));
    }
    let base_seed: u64 = rc.value("seed")?;
    let precision: Precision = rc.value("precision")?;
    let (train_ds, test_ds) = rc.load_data()?;
    let mut csv = format!("{SWEEP_HEADER}\n");
    let mut summary = String::from(
        "indicator,local_pool,global_pool,runs,mean_train_top1,mean_test_top1,mean_test_top5\n",
    );
    for (indicator, local, global) in POOLING_GRID {
        let (mut train1, mut test1, mut test5, mut ok) = (0.0, 0.0, 0.0, 0usize);
        for r in 0..repeat {
            let seed = base_seed + r as u64;
            let cell_dir = out.join(format!("{indicator}_seed{seed}"));
            let cell = rc
                .with("pool.local", local)?
                .with("pool.global", global)?
                .with("seed", seed)?
                .with("out", cell_dir.display())?;
            let cell_out = prepare_out(&cell, "train")?;
            let result = match precision {
                Precision::F32 => train_into::<f32>(&cell, &train_ds, &test_ds, &cell_out, false),
                Precision::F64 => train_into::<f64>(&cell, &train_ds, &test_ds, &cell_out, false),
            };
            let line = match result {
                Ok(history) => {
                    let last = history.last().expect("epochs is positive");
                    let wall: f64 = history.iter().map(|m| m.wall_time_s).sum();
                    train1 += last.train_top1;
                    test1 += last.test_top1;
                    test5 += last.test_top5;
                    ok += 1;
                    format!(
                        "ok,{},{},{},{},{},{:.3}",
                        last.epoch,
                        last.train_loss,
                        last.train_top1,
                        last.test_top1,
                        last.test_top5,
                        wall
                    )
                }
                Err(e @ Error::Diverged { .. }) => {
                    eprintln!("{indicator} seed {seed}: {e}");
                    "diverged,,,,,,".to_string()
                }
                Err(e) => return Err(e),
            };
            println!("{indicator} {local}/{global} seed {seed}: {line}");
            writeln!(csv, "{indicator},{local},{global},{seed},{line}").expect("string write");
            write_file(&out.join(SWEEP_FILE), &csv)?;
        }
        let mean = |v: f64| if ok == 0 { f64::NAN } else { v / ok as f64 };
        writeln!(
            summary,
            "{indicator},{local},{global},{ok},{},{},{}",
            mean(train1),
            mean(test1),
            mean(test5)
        )
        .expect("string write");
        write_file(&out.join(SWEEP_SUMMARY_FILE), &summary)?;
    }
    print!("{summary}");
    Ok(())
}
