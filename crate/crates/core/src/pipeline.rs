//! The simulate → fit → predict → validate workflow and the scaling bench.
//!
//! Stages communicate through files in the output directory:
//! `train.csv`/`test.csv` (simulate), `fit.json` and `basis.jsonl` (fit),
//! `predictions.csv` (predict), `diagnostics.csv`/`diagnostics.txt`
//! (validate), `bench.csv`/`bench.txt` (bench). `run.json` records stage
//! timings.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::basis::BasisSet;
use crate::config::{PredictTarget, RunConfig};
use crate::data::{load_column, load_csv, load_points, Location, SpatialDataset};
use crate::diagnostics::{crps_sample, format_table, write_diagnostics_csv, Diagnostics};
use crate::em::{fit_em, FitResult};
use crate::engine::{kriging_baseline, predict, predict_dense, PredictiveResult, SreParams, Targets};
use crate::error::{FrkError, Result};
use crate::simulate::{simulate_sre, uniform_locations};
use crate::transgauss::{sample_back_transform, transform_dataset, BoxCox};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Fit,
    Predict,
    Validate,
    Bench,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineReport {
    pub outputs: Vec<PathBuf>,
    /// Human-readable summary.
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct RunTimes {
    fit_seconds: Option<f64>,
    predict_seconds: Option<f64>,
}

impl RunTimes {
    fn load(out: &Path) -> RunTimes {
        std::fs::read_to_string(out.join("run.json"))
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok())
            .unwrap_or_default()
    }

    fn save(&self, out: &Path) -> Result<()> {
        let path = out.join("run.json");
        let text = serde_json::to_string_pretty(self).map_err(|e| FrkError::Schema(e.to_string()))?;
        std::fs::write(&path, text).map_err(|e| FrkError::io(path, e))
    }
}

pub fn run_pipeline(cmd: Command, cfg: &RunConfig, out: &Path, seed: Option<u64>) -> Result<PipelineReport> {
    let mut cfg = cfg.clone();
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| FrkError::io(out, e))?;
    match cmd {
        Command::Simulate => simulate_stage(&cfg, out),
        Command::Fit => fit_stage(&cfg, out),
        Command::Predict => predict_stage(&cfg, out),
        Command::Validate => validate_stage(&cfg, out),
        Command::Bench => bench_stage(&cfg, out),
    }
}

/// Intercept plus the first `p − 1` coordinates.
fn trend_covariates(locs: &[Location], p: usize) -> Option<DMatrix<f64>> {
    (p > 0).then(|| DMatrix::from_fn(locs.len(), p, |i, j| if j == 0 { 1.0 } else { locs[i].coords()[j - 1] }))
}

fn write_csv(path: &Path, header: &[String], rows: impl Iterator<Item = Vec<f64>>) -> Result<()> {
    let err = |e: csv::Error| FrkError::Schema(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(header).map_err(err)?;
    for row in rows {
        w.write_record(row.iter().map(|v| v.to_string())).map_err(err)?;
    }
    w.flush().map_err(|e| FrkError::io(path, e))
}

fn simulate_stage(cfg: &RunConfig, out: &Path) -> Result<PipelineReport> {
    let basis = cfg.basis()?;
    let params = cfg.simulation_params()?;
    let n = cfg.sim_n_train + cfg.sim_n_test;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let locs = uniform_locations(&cfg.domain_lower, &cfg.domain_upper, n, &mut rng)?;
    let x = trend_covariates(&locs, params.beta.len());
    let sim = simulate_sre(&basis, &params, locs, x, cfg.seed.wrapping_add(1))?;

    let mut header = cfg.coords.clone();
    header.push(cfg.value.clone());
    let row = |i: usize| {
        let mut v = sim.data.locations()[i].coords().to_vec();
        v.push(sim.data.z()[i]);
        v
    };
    let train = out.join("train.csv");
    write_csv(&train, &header, (0..cfg.sim_n_train).map(row))?;
    header.push(cfg.truth.clone());
    let test = out.join("test.csv");
    write_csv(
        &test,
        &header,
        (cfg.sim_n_train..n).map(|i| {
            let mut v = row(i);
            v.push(sim.truth[i]);
            v
        }),
    )?;
    Ok(PipelineReport {
        outputs: vec![train, test],
        message: format!(
            "simulated {} training and {} test rows with r = {}",
            cfg.sim_n_train,
            cfg.sim_n_test,
            basis.len()
        ),
    })
}

fn training_data(cfg: &RunConfig) -> Result<SpatialDataset> {
    let ds = load_csv(&cfg.train, &cfg.schema())?;
    match cfg.box_cox_lambda {
        Some(l) => transform_dataset(&ds, BoxCox::new(l)?),
        None => Ok(ds),
    }
}

fn fit_stage(cfg: &RunConfig, out: &Path) -> Result<PipelineReport> {
    let ds = training_data(cfg)?;
    let basis = cfg.basis()?;
    let start = Instant::now();
    let fit = fit_em(&ds, &basis, cfg.template_params()?, cfg.em_config())?;
    let seconds = start.elapsed().as_secs_f64();
    let fit_path = out.join("fit.json");
    fit.save(&fit_path)?;
    let basis_path = out.join("basis.jsonl");
    basis.save(&basis_path)?;
    RunTimes {
        fit_seconds: Some(seconds),
        predict_seconds: None,
    }
    .save(out)?;
    Ok(PipelineReport {
        outputs: vec![fit_path, basis_path],
        message: format!(
            "fit: {} iterations, loglik {:.6}, {:?}, sigma2_xi {:.6}",
            fit.iterations,
            fit.loglik(),
            fit.termination,
            fit.params.noise.xi()
        ),
    })
}

fn load_fit(out: &Path) -> Result<(FitResult, BasisSet)> {
    let fit = FitResult::load(out.join("fit.json"))?;
    let basis = BasisSet::load(out.join("basis.jsonl"))?;
    Ok((fit, basis))
}

fn prediction_targets(cfg: &RunConfig) -> Result<Targets> {
    let path = cfg.targets.as_ref().unwrap_or(&cfg.test);
    let (locs, x) = load_points(path, &cfg.schema())?;
    Ok(Targets { locations: locs, covariates: x })
}

/// Gaussian predictions for the configured target, on the model scale.
fn gaussian_predictions(
    cfg: &RunConfig,
    ds: &SpatialDataset,
    basis: &BasisSet,
    params: &SreParams,
    targets: &Targets,
) -> Result<Vec<PredictiveResult>> {
    let preds = predict(ds, basis, params, targets, cfg.level)?;
    Ok(match cfg.predict_target {
        PredictTarget::Process => preds,
        PredictTarget::Observation => preds
            .into_iter()
            .map(|p| PredictiveResult::gaussian(p.location, p.mean, p.variance + params.noise.sigma2_eps, p.level))
            .collect(),
    })
}

fn predict_stage(cfg: &RunConfig, out: &Path) -> Result<PipelineReport> {
    let (fit, basis) = load_fit(out)?;
    let ds = training_data(cfg)?;
    let targets = prediction_targets(cfg)?;
    let start = Instant::now();
    let gauss = gaussian_predictions(cfg, &ds, &basis, &fit.params, &targets)?;
    let mut header = cfg.coords.clone();
    header.extend(["mean", "variance", "lower", "upper"].map(String::from));
    let rows: Vec<Vec<f64>> = match cfg.box_cox_lambda {
        None => gauss
            .iter()
            .map(|p| {
                let mut v = p.location.coords().to_vec();
                v.extend([p.mean, p.variance, p.lower, p.upper]);
                v
            })
            .collect(),
        Some(l) => {
            header.extend(["mc_se", "w_mean", "w_variance"].map(String::from));
            let bc = BoxCox::new(l)?;
            let mc = cfg.mc_config();
            gauss
                .iter()
                .enumerate()
                .map(|(i, g)| {
                    let t = sample_back_transform(g.mean, g.variance, bc, &mc, i as u64, cfg.level, g.location.clone())?;
                    let p = &t.result;
                    let mut v = p.location.coords().to_vec();
                    v.extend([p.mean, p.variance, p.lower, p.upper, t.mc_se, g.mean, g.variance]);
                    Ok(v)
                })
                .collect::<Result<_>>()?
        }
    };
    let seconds = start.elapsed().as_secs_f64();
    let path = out.join("predictions.csv");
    write_csv(&path, &header, rows.into_iter())?;
    let mut times = RunTimes::load(out);
    times.predict_seconds = Some(seconds);
    times.save(out)?;
    Ok(PipelineReport {
        outputs: vec![path],
        message: format!("predicted {} targets", targets.len()),
    })
}

fn read_predictions(cfg: &RunConfig, out: &Path) -> Result<(Vec<PredictiveResult>, Option<Vec<(f64, f64)>>)> {
    let path = out.join("predictions.csv");
    let col = |name: &str| load_column(&path, name);
    let (locs, _) = load_points(&path, &crate::data::CsvSchema::new(
        &cfg.coords.iter().map(String::as_str).collect::<Vec<_>>(),
        "mean",
    ))?;
    let (mean, var, lower, upper) = (col("mean")?, col("variance")?, col("lower")?, col("upper")?);
    let preds = locs
        .into_iter()
        .enumerate()
        .map(|(i, location)| PredictiveResult {
            location,
            mean: mean[i],
            variance: var[i],
            lower: lower[i],
            upper: upper[i],
            level: cfg.level,
        })
        .collect();
    let w = match cfg.box_cox_lambda {
        Some(_) => Some(col("w_mean")?.into_iter().zip(col("w_variance")?).collect()),
        None => None,
    };
    Ok((preds, w))
}

fn validate_stage(cfg: &RunConfig, out: &Path) -> Result<PipelineReport> {
    if (cfg.level - 0.9).abs() > 1e-12 {
        return Err(FrkError::Config("validate scores 90% intervals; set level = 0.9".into()));
    }
    let (preds, w) = read_predictions(cfg, out)?;
    let truth = load_column(&cfg.test, &cfg.truth)?;
    if truth.len() != preds.len() {
        return Err(FrkError::Schema(format!(
            "{} predictions but {} test rows; predict on the test file before validating",
            preds.len(),
            truth.len()
        )));
    }
    let times = RunTimes::load(out);
    let run_time = times.fit_seconds.unwrap_or(0.0) + times.predict_seconds.unwrap_or(0.0);
    let mut rows = Vec::new();
    match (w, cfg.box_cox_lambda) {
        (Some(w), Some(l)) => {
            let bc = BoxCox::new(l)?;
            let mc = cfg.mc_config();
            let mut crps = 0.0;
            for (i, ((m, v), z)) in w.iter().zip(&truth).enumerate() {
                let s = sample_back_transform(
                    *m,
                    *v,
                    bc,
                    &crate::transgauss::McConfig { keep_samples: true, ..mc },
                    i as u64,
                    cfg.level,
                    preds[i].location.clone(),
                )?;
                crps += crps_sample(s.samples.as_deref().unwrap_or(&[]), *z)?;
            }
            rows.push(Diagnostics::with_crps(
                "FRK (Box-Cox, EM)",
                &preds,
                &truth,
                crps / truth.len() as f64,
                run_time,
            )?);
        }
        _ => rows.push(Diagnostics::from_gaussian("FRK (EM)", &preds, &truth, run_time)?),
    }
    if cfg.baseline {
        rows.push(baseline_row(cfg, &truth)?);
    }
    let csv_path = out.join("diagnostics.csv");
    write_diagnostics_csv(&csv_path, &rows)?;
    let table = format_table(&rows);
    let txt_path = out.join("diagnostics.txt");
    std::fs::write(&txt_path, &table).map_err(|e| FrkError::io(&txt_path, e))?;
    Ok(PipelineReport {
        outputs: vec![csv_path, txt_path],
        message: table,
    })
}

fn baseline_row(cfg: &RunConfig, truth: &[f64]) -> Result<Diagnostics> {
    let start = Instant::now();
    let ds = training_data(cfg)?;
    let targets = prediction_targets(cfg)?;
    let (beta, resid) = match ds.covariates() {
        Some(x) => {
            let xtx = x.tr_mul(x);
            let beta = crate::engine::chol(xtx)
                .ok_or_else(|| FrkError::Singular("covariates rank deficient".into()))?
                .solve(&x.tr_mul(ds.z()));
            let r = ds.z() - x * &beta;
            (beta, r)
        }
        None => (DVector::zeros(0), ds.z().clone()),
    };
    let resid_ds = SpatialDataset::new(ds.locations().to_vec(), resid, None)?;
    let p = cfg.baseline_params()?;
    let mut preds = kriging_baseline(
        &resid_ds,
        &p,
        cfg.baseline_sigma2_eps,
        &targets.locations,
        cfg.level,
        cfg.baseline_max_n,
    )?;
    let fixed = targets.fixed_effect(&beta)?;
    for (i, pr) in preds.iter_mut().enumerate() {
        let var = match cfg.predict_target {
            PredictTarget::Process => pr.variance,
            PredictTarget::Observation => pr.variance + cfg.baseline_sigma2_eps,
        };
        *pr = PredictiveResult::gaussian(pr.location.clone(), pr.mean + fixed[i], var, cfg.level);
    }
    Diagnostics::from_gaussian("Matern kriging", &preds, truth, start.elapsed().as_secs_f64())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Least-squares slope of `log t` against `log n`.
pub fn loglog_slope(n: &[f64], t: &[f64]) -> Result<f64> {
    if n.len() != t.len() || n.len() < 2 || n.iter().chain(t).any(|v| !(*v > 0.0)) {
        return Err(FrkError::InvalidParameter("slope needs two or more positive (n, t) pairs".into()));
    }
    let x: Vec<f64> = n.iter().map(|v| v.ln()).collect();
    let y: Vec<f64> = t.iter().map(|v| v.ln()).collect();
    let k = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / k, y.iter().sum::<f64>() / k);
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        return Err(FrkError::InvalidParameter("slope needs distinct n".into()));
    }
    Ok(sxy / sxx)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub n: usize,
    pub r: usize,
    pub smw_seconds: f64,
    pub dense_seconds: Option<f64>,
}

/// Times prediction through the low-rank solver for each `n` (and through a
/// dense Cholesky of `C_Z` when `n` is small enough).
pub fn run_bench(cfg: &RunConfig) -> Result<(Vec<BenchRow>, f64)> {
    let basis = cfg.basis()?;
    let params = cfg.simulation_params()?;
    let p = params.beta.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let target_locs = uniform_locations(&cfg.domain_lower, &cfg.domain_upper, cfg.bench_targets, &mut rng)?;
    let targets = match trend_covariates(&target_locs, p) {
        Some(x) => Targets::with_covariates(target_locs, x)?,
        None => Targets::new(target_locs),
    };
    let mut rows = Vec::new();
    for (k, &n) in cfg.bench_n.iter().enumerate() {
        let locs = uniform_locations(&cfg.domain_lower, &cfg.domain_upper, n, &mut rng)?;
        let x = trend_covariates(&locs, p);
        let ds = simulate_sre(&basis, &params, locs, x, cfg.seed.wrapping_add(k as u64 + 1))?.data;
        let time = |f: &dyn Fn() -> Result<Vec<PredictiveResult>>| -> Result<f64> {
            let mut v = Vec::with_capacity(cfg.bench_repeats);
            for _ in 0..cfg.bench_repeats {
                let start = Instant::now();
                std::hint::black_box(f()?);
                v.push(start.elapsed().as_secs_f64());
            }
            Ok(median(v))
        };
        let smw = time(&|| predict(&ds, &basis, &params, &targets, cfg.level))?;
        let dense = if n <= cfg.bench_dense_max_n {
            Some(time(&|| predict_dense(&ds, &basis, &params, &targets, cfg.level))?)
        } else {
            None
        };
        rows.push(BenchRow {
            n,
            r: basis.len(),
            smw_seconds: smw,
            dense_seconds: dense,
        });
    }
    let ns: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let ts: Vec<f64> = rows.iter().map(|r| r.smw_seconds).collect();
    let slope = if rows.len() >= 2 { loglog_slope(&ns, &ts)? } else { f64::NAN };
    Ok((rows, slope))
}

fn bench_stage(cfg: &RunConfig, out: &Path) -> Result<PipelineReport> {
    let (rows, slope) = run_bench(cfg)?;
    let path = out.join("bench.csv");
    let err = |e: csv::Error| FrkError::Schema(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(&path).map_err(err)?;
    w.write_record(["n", "r", "smw_seconds", "dense_seconds"]).map_err(err)?;
    for r in &rows {
        w.write_record([
            r.n.to_string(),
            r.r.to_string(),
            r.smw_seconds.to_string(),
            r.dense_seconds.map_or(String::new(), |d| d.to_string()),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| FrkError::io(&path, e))?;
    let mut text = String::from("       n      r   smw (s)   dense (s)\n");
    for r in &rows {
        text.push_str(&format!(
            "{:>8} {:>6} {:>9.4} {:>11}\n",
            r.n,
            r.r,
            r.smw_seconds,
            r.dense_seconds.map_or("-".to_string(), |d| format!("{d:.4}"))
        ));
    }
    text.push_str(&format!("log-log slope (smw): {slope:.3}\n"));
    let txt = out.join("bench.txt");
    std::fs::write(&txt, &text).map_err(|e| FrkError::io(&txt, e))?;
    Ok(PipelineReport {
        outputs: vec![path, txt],
        message: text,
    })
}
