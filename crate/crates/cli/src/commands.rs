//! One function per subcommand. Each writes into `cfg.output_dir`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use gapcast_core::data::{format_timestamp, synthetic_ar2, SeriesTable, Window};
use gapcast_core::eval::{default_taus, ScoreReport};
use gapcast_core::forecast::{read_samples_csv, write_quantiles_csv, write_samples_csv, ForecastEnsemble, LabeledForecast};
use gapcast_core::genmodel::{load_checkpoint, save_checkpoint, EpochStats, GenerativeModel, ModelHeader, Trainer};
use log::info;
use serde::Serialize;

use crate::config::{RunConfig, SweepAxis};
use crate::pipeline::{self, CycleResult, ModelForecasts};

pub const CHECKPOINT_FILE: &str = "model.json";

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    let dir = cfg.output_dir.as_path();
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn preamble_text(cfg: &RunConfig) -> String {
    cfg.preamble().iter().map(|l| format!("# {l}\n")).collect()
}

/// `epoch,mean_elbo,grad_norm`
pub fn write_trace(path: &Path, cfg: &RunConfig, trace: &[EpochStats]) -> Result<()> {
    let mut s = preamble_text(cfg);
    s.push_str("epoch,mean_elbo,grad_norm\n");
    for e in trace {
        writeln!(s, "{},{},{}", e.epoch, e.mean_elbo, e.grad_norm)?;
    }
    write_text(path, &s)
}

#[derive(Serialize)]
struct ReportFile<'a> {
    version: &'a str,
    config_hash: String,
    reports: &'a [ScoreReport],
}

pub fn write_reports(dir: &Path, cfg: &RunConfig, reports: &[ScoreReport]) -> Result<()> {
    let file = ReportFile {
        version: env!("CARGO_PKG_VERSION"),
        config_hash: cfg.hash(),
        reports,
    };
    write_text(&dir.join("report.json"), &(serde_json::to_string_pretty(&file)? + "\n"))?;
    let pre = cfg.preamble();
    ScoreReport::write_reliability_csv(reports, &dir.join("reliability.csv"), &pre)?;
    ScoreReport::write_sharpness_csv(reports, &dir.join("sharpness.csv"), &pre)?;
    Ok(())
}

fn print_reports(reports: &[ScoreReport]) {
    println!("{:<12} {:>8} {:>10}", "model", "cases", "CRPS x100");
    for r in reports {
        println!("{:<12} {:>8} {:>10.4}", r.model, r.n_cases, r.crps_x100);
    }
}

fn labeled<'a>(table: &SeriesTable, ensembles: &'a [ForecastEnsemble]) -> Vec<LabeledForecast<'a>> {
    ensembles
        .iter()
        .map(|e| LabeledForecast {
            origin_timestamp: format_timestamp(&table.timestamps()[e.origin]),
            ensemble: e,
        })
        .collect()
}

fn write_forecasts(dir: &Path, cfg: &RunConfig, table: &SeriesTable, f: &ModelForecasts, prefix: &str) -> Result<()> {
    let lab = labeled(table, &f.ensembles);
    let pre = cfg.preamble();
    write_samples_csv(&dir.join(format!("{prefix}forecasts.csv")), &pre, &lab)?;
    write_quantiles_csv(&dir.join(format!("{prefix}quantiles.csv")), &pre, &lab, &default_taus())?;
    Ok(())
}

/// Writes the synthetic series without gaps.
pub fn synth(cfg: &RunConfig, out: Option<&Path>) -> Result<PathBuf> {
    let table = synthetic_ar2(&cfg.synthetic.to_core())?;
    let path = match out {
        Some(p) => p.to_path_buf(),
        None => out_dir(cfg)?.join("synthetic.csv"),
    };
    table.write_csv(&path, &cfg.preamble())?;
    println!("wrote {} rows x {} sites to {}", table.n_rows(), table.n_sites(), path.display());
    Ok(path)
}

/// Applies simulated gaps and writes the gapped data and its mask.
pub fn simulate(cfg: &RunConfig) -> Result<()> {
    let table = pipeline::load_table(cfg)?;
    let observed = pipeline::simulate_missing(cfg, &table)?;
    let dir = out_dir(cfg)?;
    let pre = cfg.preamble();
    observed.write_csv(&dir.join("masked.csv"), &pre)?;
    observed.write_mask_csv(&dir.join("mask.csv"), &pre)?;
    let grid = observed.mask_grid();
    println!("realized missing rate {:.4} over {} cells", grid.missing_rate(), table.n_rows() * table.n_sites());
    for (c, name) in observed.names().iter().enumerate() {
        println!("  {name}: {:.4}", grid.column_missing_rate(c));
    }
    Ok(())
}

fn header(cfg: &RunConfig, model: &GenerativeModel, trainer: Option<&Trainer>) -> ModelHeader {
    ModelHeader {
        model: model.config().clone(),
        h: cfg.data.h,
        lead: cfg.data.lead,
        sites: cfg.site_names(),
        k: cfg.train.k,
        epochs_done: trainer.map_or(0, |t| t.epochs_done),
        train: None,
        adam_step: None,
    }
}

fn check_header(cfg: &RunConfig, h: &ModelHeader) -> Result<()> {
    if h.h != cfg.data.h || h.lead != cfg.data.lead || h.sites != cfg.site_names() {
        bail!(
            "checkpoint was trained with h={}, lead={}, sites={:?}; config has h={}, lead={}, sites={:?}",
            h.h,
            h.lead,
            h.sites,
            cfg.data.h,
            cfg.data.lead,
            cfg.site_names()
        );
    }
    Ok(())
}

/// Trains (or resumes) the model. The checkpoint is rewritten after every
/// epoch so an interrupted run can be resumed.
pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> Result<(GenerativeModel, Vec<EpochStats>)> {
    let (complete, observed) = pipeline::observed_table(cfg)?;
    let prep = pipeline::prepare(cfg, &complete, &observed)?;
    let (mut model, mut trainer) = match resume {
        Some(path) => {
            let (model, h, trainer) = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
            check_header(cfg, &h)?;
            let mut trainer = trainer.ok_or_else(|| anyhow!("{} has no optimizer state to resume", path.display()))?;
            trainer.config.epochs = cfg.train.epochs;
            info!("resuming at epoch {}", trainer.epochs_done);
            (model, trainer)
        }
        None => {
            let model = pipeline::new_model(cfg, prep.data_dim())?;
            let trainer = Trainer::new(&model, cfg.train.clone())?;
            (model, trainer)
        }
    };
    let dir = out_dir(cfg)?;
    let ck = dir.join(CHECKPOINT_FILE);
    let mut trace = Vec::new();
    while trainer.epochs_done < trainer.config.epochs {
        let stats = trainer.run_epoch(&mut model, &prep.train)?;
        info!("epoch {}: bound {:.4}, |g| {:.3}", stats.epoch, stats.mean_elbo, stats.grad_norm);
        trace.push(stats);
        save_checkpoint(&ck, &model, header(cfg, &model, Some(&trainer)), Some(&trainer))?;
    }
    save_checkpoint(&ck, &model, header(cfg, &model, Some(&trainer)), Some(&trainer))?;
    write_trace(&dir.join("trace.csv"), cfg, &trace)?;
    if let Some(last) = trace.last() {
        println!("trained {} epochs, final bound {:.4} nats/window", trainer.epochs_done, last.mean_elbo);
    }
    println!("checkpoint: {}", ck.display());
    Ok((model, trace))
}

fn load_model(cfg: &RunConfig, path: &Path) -> Result<GenerativeModel> {
    let (model, h, _) = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    check_header(cfg, &h)?;
    Ok(model)
}

/// Forecasts every test origin with a trained model.
pub fn forecast(cfg: &RunConfig, checkpoint: &Path) -> Result<()> {
    let model = load_model(cfg, checkpoint)?;
    let (complete, observed) = pipeline::observed_table(cfg)?;
    let prep = pipeline::prepare(cfg, &complete, &observed)?;
    let windows: Vec<&Window> = prep.test.iter().collect();
    let f = ModelForecasts {
        name: "proposed".into(),
        ensembles: pipeline::forecast_proposed(cfg, &model, &windows)?,
    };
    let dir = out_dir(cfg)?;
    write_forecasts(dir, cfg, &prep.observed, &f, "")?;
    println!("wrote {} forecasts to {}", f.ensembles.len(), dir.join("forecasts.csv").display());
    Ok(())
}

/// Scores sample files against the target column of the configured data.
/// Origins whose target is missing are skipped.
pub fn evaluate(cfg: &RunConfig, files: &[PathBuf], names: &[String]) -> Result<Vec<ScoreReport>> {
    if files.is_empty() {
        bail!("no forecast files given");
    }
    if !names.is_empty() && names.len() != files.len() {
        bail!("{} names for {} forecast files", names.len(), files.len());
    }
    let (_, observed) = pipeline::observed_table(cfg)?;
    let target = observed
        .site_index(&cfg.data.target)
        .ok_or_else(|| anyhow!("target `{}` not in data", cfg.data.target))?;
    let rows: BTreeMap<String, usize> = observed
        .timestamps()
        .iter()
        .enumerate()
        .map(|(i, t)| (format_timestamp(t), i))
        .collect();
    let mut reports = Vec::new();
    for (i, file) in files.iter().enumerate() {
        let name = names.get(i).cloned().unwrap_or_else(|| {
            file.file_stem()
                .map_or_else(|| format!("model{i}"), |s| s.to_string_lossy().into_owned())
        });
        let records = read_samples_csv(file)?;
        let (mut ens, mut obs, mut skipped) = (Vec::new(), Vec::new(), 0usize);
        for r in records {
            let origin = *rows
                .get(&r.origin_timestamp)
                .ok_or_else(|| anyhow!("{}: origin {} is not a data timestamp", file.display(), r.origin_timestamp))?;
            let row = origin + r.lead;
            if row >= observed.n_rows() {
                bail!("{}: origin {} + lead {} is past the end of the data", file.display(), r.origin_timestamp, r.lead);
            }
            let y = observed.column(target)[row];
            if y.is_nan() {
                skipped += 1;
                continue;
            }
            ens.push(r.samples);
            obs.push(y);
        }
        if skipped > 0 {
            info!("{name}: {skipped} origins skipped (target missing)");
        }
        let f = ModelForecasts {
            name,
            ensembles: ens
                .into_iter()
                .map(|samples| ForecastEnsemble {
                    origin: 0,
                    lead: 0,
                    samples,
                })
                .collect(),
        };
        reports.push(pipeline::score_forecasts(&f, &obs)?);
    }
    write_reports(out_dir(cfg)?, cfg, &reports)?;
    print_reports(&reports);
    Ok(reports)
}

/// Trains (or loads) the proposed model, runs the configured baselines and
/// scores everything on the test split.
pub fn benchmark(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Vec<ScoreReport>> {
    let (complete, observed) = pipeline::observed_table(cfg)?;
    let result = match checkpoint {
        Some(p) => {
            let prep = pipeline::prepare(cfg, &complete, &observed)?;
            let model = load_model(cfg, p)?;
            pipeline::score_cycle(cfg, &prep, model, Vec::new(), true)?
        }
        None => pipeline::run_cycle(cfg, &complete, &observed, true)?,
    };
    let dir = out_dir(cfg)?;
    write_cycle(dir, cfg, &observed, &result, true)?;
    print_reports(&result.reports);
    Ok(result.reports)
}

fn write_cycle(dir: &Path, cfg: &RunConfig, observed: &SeriesTable, r: &CycleResult, samples: bool) -> Result<()> {
    for f in &r.forecasts {
        let prefix = format!("{}_", f.name);
        if samples {
            write_forecasts(dir, cfg, observed, f, &prefix)?;
        } else {
            let lab = labeled(observed, &f.ensembles);
            write_quantiles_csv(&dir.join(format!("{prefix}quantiles.csv")), &cfg.preamble(), &lab, &default_taus())?;
        }
    }
    if !r.trace.is_empty() {
        write_trace(&dir.join("trace.csv"), cfg, &r.trace)?;
    }
    write_reports(dir, cfg, &r.reports)
}

/// Config of one sweep point.
pub fn sweep_point(cfg: &RunConfig, axis: SweepAxis, value: f64) -> Result<RunConfig> {
    let mut c = cfg.clone();
    let as_count = |v: f64| -> Result<usize> {
        if v >= 1.0 && v.fract() == 0.0 {
            Ok(v as usize)
        } else {
            Err(anyhow!("{axis} values must be positive integers, got {v}"))
        }
    };
    match axis {
        SweepAxis::MissingRate => c.missing.rate = value,
        SweepAxis::AuxMissingRate => c.missing.aux_rate = Some(value),
        SweepAxis::K => c.train.k = as_count(value)?,
        SweepAxis::Lead => c.data.lead = as_count(value)?,
    }
    c.validate()?;
    Ok(c)
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub value: f64,
    pub reports: Vec<ScoreReport>,
}

fn run_point(cfg: &RunConfig, complete: &SeriesTable, dir: &Path) -> Result<Vec<ScoreReport>> {
    let observed = pipeline::simulate_missing(cfg, complete)?;
    let r = pipeline::run_cycle(cfg, complete, &observed, cfg.sweep.baselines)?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_cycle(dir, cfg, &observed, &r, false)?;
    Ok(r.reports)
}

/// Runs the whole cycle at every value of the sweep axis. Points are
/// independent, so `jobs > 1` runs them on threads with identical output.
pub fn sweep(cfg: &RunConfig) -> Result<Vec<SweepRow>> {
    let s = &cfg.sweep;
    if s.values.is_empty() {
        bail!("sweep.values is empty");
    }
    let complete = pipeline::load_table(cfg)?;
    let dir = out_dir(cfg)?.to_path_buf();
    let points: Vec<(usize, f64, RunConfig)> = s
        .values
        .iter()
        .enumerate()
        .map(|(i, &v)| Ok((i, v, sweep_point(cfg, s.axis, v)?)))
        .collect::<Result<_>>()?;
    let point_dir = |i: usize, v: f64| dir.join(format!("point_{i:02}_{}_{v}", s.axis));
    let jobs = s.jobs.max(1);
    let mut results: Vec<Option<Result<Vec<ScoreReport>>>> = (0..points.len()).map(|_| None).collect();
    for chunk in points.chunks(jobs) {
        let done: Vec<(usize, Result<Vec<ScoreReport>>)> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|(i, v, c)| {
                    let complete = &complete;
                    let pd = point_dir(*i, *v);
                    scope.spawn(move || {
                        info!("sweep point {} = {v}", c.sweep.axis);
                        (*i, run_point(c, complete, &pd))
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("sweep worker panicked"))
                .collect()
        });
        for (i, r) in done {
            results[i] = Some(r);
        }
    }
    let mut rows = Vec::new();
    for ((_, v, _), r) in points.iter().zip(results) {
        let reports = r.expect("every point ran").with_context(|| format!("sweep point {} = {v}", s.axis))?;
        rows.push(SweepRow { value: *v, reports });
    }
    write_sweep_tables(&dir, cfg, &rows)?;
    println!("{:>10} {:<12} {:>10}", s.axis.to_string(), "model", "CRPS x100");
    for row in &rows {
        for r in &row.reports {
            println!("{:>10} {:<12} {:>10.4}", row.value, r.model, r.crps_x100);
        }
    }
    Ok(rows)
}

/// `summary.csv` (one row per point and model) and `table.csv` (one row
/// per point, one CRPS column per model).
pub fn write_sweep_tables(dir: &Path, cfg: &RunConfig, rows: &[SweepRow]) -> Result<()> {
    let axis = cfg.sweep.axis;
    let mut long = preamble_text(cfg);
    long.push_str("axis,value,model,crps_x100,n_cases\n");
    for row in rows {
        for r in &row.reports {
            writeln!(long, "{axis},{},{},{},{}", row.value, r.model, r.crps_x100, r.n_cases)?;
        }
    }
    write_text(&dir.join("summary.csv"), &long)?;

    let models: Vec<String> = rows[0].reports.iter().map(|r| r.model.clone()).collect();
    let mut wide = preamble_text(cfg);
    writeln!(wide, "{axis},{}", models.join(","))?;
    for row in rows {
        let cells: Vec<String> = row.reports.iter().map(|r| format!("{}", r.crps_x100)).collect();
        writeln!(wide, "{},{}", row.value, cells.join(","))?;
    }
    write_text(&dir.join("table.csv"), &wide)
}
