//! In-memory experiment cycle: gaps, windows, training, forecasts, scores.

use anyhow::{anyhow, bail, Context, Result};
use gapcast_core::bench::{
    climatology_forecast, reference_model, window_rows, GaussianRegressor, Imputer, QuantileRegressor,
};
use gapcast_core::data::{chronological_split, load_csv, load_mask_csv, make_windows, synthetic_ar2, SeriesTable, SplitSpec, Window};
use gapcast_core::dist::LogitTransform;
use gapcast_core::eval::{default_taus, score, ScoreReport, DEFAULT_LEVELS};
use gapcast_core::forecast::{forecast_window, ForecastEnsemble};
use gapcast_core::genmodel::{EpochStats, GenerativeModel, Trainer};
use gapcast_core::missing::{gen_mask_mar, gen_mask_mcar, MaskGrid, Mechanism};
use gapcast_core::rng;
use log::info;

use crate::config::RunConfig;

/// Stream id used for every climatology draw, so all origins share samples.
const CLIMATOLOGY_STREAM: u64 = u64::MAX;

/// The configured CSV (with its optional mask file), or the synthetic series.
pub fn load_table(cfg: &RunConfig) -> Result<SeriesTable> {
    match &cfg.data.path {
        Some(path) => {
            let table = load_csv(path).with_context(|| format!("loading {}", path.display()))?;
            match &cfg.data.mask_path {
                Some(mp) => Ok(table.with_mask(&load_mask_csv(mp, &table)?)?),
                None => Ok(table),
            }
        }
        None => Ok(synthetic_ar2(&cfg.synthetic.to_core())?),
    }
}

/// Table used by `train`/`forecast`/`benchmark`: a data file as given, or the
/// synthetic series with simulated gaps.
pub fn observed_table(cfg: &RunConfig) -> Result<(SeriesTable, SeriesTable)> {
    let table = load_table(cfg)?;
    if cfg.data.path.is_some() {
        return Ok((table.clone(), table));
    }
    let observed = simulate_missing(cfg, &table)?;
    Ok((table, observed))
}

/// Masks drawn for `table`: the target at `missing.rate`, every other column
/// at `missing.aux_rate` (default: the same rate). Each column has its own
/// random stream.
pub fn simulate_mask(cfg: &RunConfig, table: &SeriesTable) -> Result<MaskGrid> {
    let m = &cfg.missing;
    let n = table.n_rows();
    let mut grid = MaskGrid::new(n, table.n_sites());
    match m.mechanism {
        Mechanism::Mcar => {
            for c in 0..table.n_sites() {
                let rate = if table.names()[c] == cfg.data.target {
                    m.rate
                } else {
                    m.aux_rate.unwrap_or(m.rate)
                };
                let col = gen_mask_mcar(&m.to_core(rate), n, 1, &mut rng::stream(m.seed, c as u64))?;
                for r in 0..n {
                    grid.set(r, c, col.get(r, 0));
                }
            }
        }
        Mechanism::Mar => {
            grid = gen_mask_mar(&m.to_core(m.rate), table.columns(), &mut rng::stream(m.seed, 0))?;
        }
    }
    // cells already missing stay missing
    for c in 0..table.n_sites() {
        for r in 0..n {
            if table.is_missing(r, c) {
                grid.set(r, c, true);
            }
        }
    }
    Ok(grid)
}

pub fn simulate_missing(cfg: &RunConfig, table: &SeriesTable) -> Result<SeriesTable> {
    Ok(table.with_mask(&simulate_mask(cfg, table)?)?)
}

pub fn site_indices(cfg: &RunConfig, table: &SeriesTable) -> Result<Vec<usize>> {
    cfg.site_names()
        .iter()
        .map(|n| {
            table
                .site_index(n)
                .ok_or_else(|| anyhow!("site `{n}` not in data columns {:?}", table.names()))
        })
        .collect()
}

/// Windows of both tables split at the same origins.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub observed: SeriesTable,
    pub train: Vec<Window>,
    pub test: Vec<Window>,
    pub complete_train: Vec<Window>,
    pub complete_test: Vec<Window>,
}

impl Prepared {
    pub fn data_dim(&self) -> usize {
        self.train[0].dim()
    }

    /// Test windows with an observed target, the ones that are scored.
    pub fn scored(&self) -> Vec<(usize, &Window)> {
        self.test
            .iter()
            .enumerate()
            .filter(|(_, w)| !w.target_missing())
            .collect()
    }

    pub fn truths(&self) -> Vec<f64> {
        let tf = LogitTransform::default();
        self.scored()
            .iter()
            .map(|(_, w)| w.target_power(&tf).expect("scored windows have targets"))
            .collect()
    }
}

pub fn prepare(cfg: &RunConfig, complete: &SeriesTable, observed: &SeriesTable) -> Result<Prepared> {
    let sites = site_indices(cfg, observed)?;
    let split = SplitSpec {
        train_fraction: cfg.data.train_fraction,
    };
    let windows = make_windows(observed, cfg.data.h, cfg.data.lead, &sites)?;
    let (train, test) = chronological_split(&windows, split)?;
    let full = make_windows(complete, cfg.data.h, cfg.data.lead, &sites)?;
    let (complete_train, complete_test) = chronological_split(&full, split)?;
    Ok(Prepared {
        observed: observed.clone(),
        train,
        test,
        complete_train,
        complete_test,
    })
}

pub fn new_model(cfg: &RunConfig, data_dim: usize) -> Result<GenerativeModel> {
    Ok(GenerativeModel::new(cfg.model.to_core(data_dim), cfg.train.seed)?)
}

pub fn train_proposed(cfg: &RunConfig, prep: &Prepared) -> Result<(GenerativeModel, Vec<EpochStats>)> {
    let mut model = new_model(cfg, prep.data_dim())?;
    let mut trainer = Trainer::new(&model, cfg.train.clone())?;
    let trace = trainer.run(&mut model, &prep.train)?;
    Ok((model, trace))
}

/// Forecasts for each window, origin `i` using random stream `origin`.
pub fn forecast_proposed(cfg: &RunConfig, model: &GenerativeModel, windows: &[&Window]) -> Result<Vec<ForecastEnsemble>> {
    let fc = cfg.forecast.to_core();
    windows
        .iter()
        .map(|w| {
            let mut r = rng::stream(cfg.forecast.seed, w.origin as u64);
            Ok(forecast_window(model, w, &fc, &mut r)?)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct ModelForecasts {
    pub name: String,
    pub ensembles: Vec<ForecastEnsemble>,
}

fn observed_targets(windows: &[Window]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let kept: Vec<Window> = windows.iter().filter(|w| !w.target_missing()).cloned().collect();
    window_rows(&kept)
}

/// Forecasts of one baseline for the scored test windows.
pub fn forecast_baseline(cfg: &RunConfig, prep: &Prepared, name: &str) -> Result<ModelForecasts> {
    let scored = prep.scored();
    let m = cfg.forecast.m;
    let tf = LogitTransform::default();
    let per_origin = |origin: usize| rng::stream(cfg.forecast.seed, origin as u64);
    let ensembles: Vec<ForecastEnsemble> = match name {
        "climatology" => {
            let history: Vec<f64> = prep.train.iter().filter_map(|w| w.target_power(&tf)).collect();
            scored
                .iter()
                .map(|(_, w)| {
                    let mut r = rng::stream(cfg.forecast.seed, CLIMATOLOGY_STREAM);
                    Ok(ForecastEnsemble {
                        origin: w.origin,
                        lead: w.lead,
                        samples: climatology_forecast(&history, m, &mut r)?,
                    })
                })
                .collect::<Result<_>>()?
        }
        "qr-im" | "gauss-im" => {
            let (x, y) = observed_targets(&prep.train);
            let mut imputer = Imputer::new(cfg.bench.imputer);
            let x = imputer.fit(&x)?;
            let test_x: Vec<Vec<f64>> = scored.iter().map(|(_, w)| w.features().to_vec()).collect();
            let test_x = imputer.transform(&test_x)?;
            if name == "qr-im" {
                let qr = QuantileRegressor::fit(&x, &y, &cfg.bench.qr)?;
                scored
                    .iter()
                    .zip(&test_x)
                    .map(|((_, w), f)| {
                        Ok(ForecastEnsemble {
                            origin: w.origin,
                            lead: w.lead,
                            samples: qr.forecast(f, m, &mut per_origin(w.origin))?,
                        })
                    })
                    .collect::<Result<_>>()?
            } else {
                let g = GaussianRegressor::fit(&x, &y, &cfg.bench.gauss)?;
                scored
                    .iter()
                    .zip(&test_x)
                    .map(|((_, w), f)| {
                        Ok(ForecastEnsemble {
                            origin: w.origin,
                            lead: w.lead,
                            samples: g.forecast(f, m, &mut per_origin(w.origin))?,
                        })
                    })
                    .collect::<Result<_>>()?
            }
        }
        "reference" => {
            let qr = reference_model(&prep.complete_train, &cfg.bench.qr)?;
            scored
                .iter()
                .map(|&(i, w)| {
                    let full = &prep.complete_test[i];
                    Ok(ForecastEnsemble {
                        origin: w.origin,
                        lead: w.lead,
                        samples: qr.forecast(full.features(), m, &mut per_origin(w.origin))?,
                    })
                })
                .collect::<Result<_>>()?
        }
        other => bail!("unknown baseline `{other}`"),
    };
    Ok(ModelForecasts {
        name: name.to_string(),
        ensembles,
    })
}

pub fn score_forecasts(f: &ModelForecasts, truths: &[f64]) -> Result<ScoreReport> {
    let ens: Vec<Vec<f64>> = f.ensembles.iter().map(|e| e.samples.clone()).collect();
    Ok(score(&f.name, &ens, truths, &DEFAULT_LEVELS, &default_taus())?)
}

/// Everything produced by one train/forecast/evaluate cycle.
#[derive(Clone, Debug)]
pub struct CycleResult {
    pub trace: Vec<EpochStats>,
    pub model: GenerativeModel,
    pub forecasts: Vec<ModelForecasts>,
    pub reports: Vec<ScoreReport>,
}

/// Trains the model on `observed`, forecasts the test split and scores it,
/// with the configured baselines when `baselines` is set. `complete` only
/// feeds the reference model.
pub fn run_cycle(cfg: &RunConfig, complete: &SeriesTable, observed: &SeriesTable, baselines: bool) -> Result<CycleResult> {
    let prep = prepare(cfg, complete, observed)?;
    info!(
        "{} train / {} test windows, d = {}, missing rate {:.4}",
        prep.train.len(),
        prep.test.len(),
        prep.data_dim(),
        observed.missing_rate()
    );
    let (model, trace) = train_proposed(cfg, &prep)?;
    score_cycle(cfg, &prep, model, trace, baselines)
}

/// Forecasts and scores the test split with an already trained model.
pub fn score_cycle(
    cfg: &RunConfig,
    prep: &Prepared,
    model: GenerativeModel,
    trace: Vec<EpochStats>,
    baselines: bool,
) -> Result<CycleResult> {
    let scored: Vec<&Window> = prep.scored().into_iter().map(|(_, w)| w).collect();
    let truths = prep.truths();
    let mut forecasts = vec![ModelForecasts {
        name: "proposed".into(),
        ensembles: forecast_proposed(cfg, &model, &scored)?,
    }];
    if baselines {
        for name in &cfg.bench.models {
            forecasts.push(forecast_baseline(cfg, prep, name)?);
        }
    }
    let reports = forecasts
        .iter()
        .map(|f| score_forecasts(f, &truths))
        .collect::<Result<_>>()?;
    Ok(CycleResult {
        trace,
        model,
        forecasts,
        reports,
    })
}
