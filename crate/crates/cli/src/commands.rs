use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use chrono::NaiveDate;
use rgvix_core::data::{annualize_sum, build_rvcc, load_csv, write_csv, MarketSeries, MONTH_DAYS};
use rgvix_core::estimate::{
    estimate, evaluate, rolling_backtest, Backtest, BacktestOptions, EstimateOptions, FitResult,
};
use rgvix_core::eval::{evaluate_target, EvalReport};
use rgvix_core::filter::HInit;
use rgvix_core::measure::{Measure, MomentReport};
use rgvix_core::optim::OptimOptions;
use rgvix_core::params::{sp500_2004_2018, Family, ModelParams};
use rgvix_core::sim::{cumret_moments, density_grid, simulate_market, SimConfig};
use rgvix_core::vix::write_priced_csv;
use rgvix_core::vrp::{vrp_market_har, vrp_market_martingale, HarOptions, VrpSeries};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{MarketVrp, RunConfig};

/// Failure classes with distinct exit codes.
#[derive(Debug)]
pub enum CliError {
    Config(anyhow::Error),
    Run(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Run(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "configuration error: {e:#}"),
            CliError::Run(e) => write!(f, "{e:#}"),
        }
    }
}

pub trait Classify<T> {
    fn config_err(self) -> Result<T, CliError>;
    fn run_err(self) -> Result<T, CliError>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn config_err(self) -> Result<T, CliError> {
        self.map_err(|e| CliError::Config(e.into()))
    }

    fn run_err(self) -> Result<T, CliError> {
        self.map_err(|e| CliError::Run(e.into()))
    }
}

type CmdResult = Result<(), CliError>;

#[derive(Serialize)]
struct FileEntry {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    config_sha256: String,
    config: &'a RunConfig,
    estimation_seed: u64,
    simulation_seed: u64,
    threads: usize,
    files: Vec<FileEntry>,
    created_at: String,
}

/// Output directory that remembers what was written for the manifest.
pub struct Outputs {
    dir: PathBuf,
    files: Vec<FileEntry>,
}

impl Outputs {
    pub fn new(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("cannot create output directory {}", dir.display()))
            .config_err()?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            files: vec![],
        })
    }

    /// Writes `name` through `fill`, then records its hash.
    pub fn write<F>(&mut self, name: &str, fill: F) -> CmdResult
    where
        F: FnOnce(&mut dyn Write) -> rgvix_core::Result<()>,
    {
        let path = self.dir.join(name);
        let file = File::create(&path)
            .with_context(|| format!("cannot create {}", path.display()))
            .run_err()?;
        let mut w = BufWriter::new(file);
        fill(&mut w).with_context(|| format!("writing {name}")).run_err()?;
        w.flush().context("flush").run_err()?;
        drop(w);
        let bytes = std::fs::read(&path).context("re-reading output").run_err()?;
        self.files.push(FileEntry {
            path: name.to_string(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> CmdResult {
        self.write(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value)?;
            writeln!(w).map_err(rgvix_core::Error::from)
        })
    }

    pub fn finish(self, command: &str, cfg: &RunConfig) -> CmdResult {
        let text = cfg.to_toml();
        let manifest = Manifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            config_sha256: hex::encode(Sha256::digest(text.as_bytes())),
            config: cfg,
            estimation_seed: cfg.estimation.seed,
            simulation_seed: cfg.simulation.seed,
            threads: rayon::current_num_threads(),
            files: self.files,
            created_at: chrono::Utc::now().to_rfc3339(),
        };
        let path = self.dir.join("manifest.json");
        let file = File::create(&path).context("cannot create manifest").run_err()?;
        serde_json::to_writer_pretty(BufWriter::new(file), &manifest)
            .context("writing manifest")
            .run_err()
    }
}

fn load_series(cfg: &RunConfig) -> Result<MarketSeries, CliError> {
    let path = cfg.require_data().config_err()?;
    load_csv(path, &cfg.data.schema(), cfg.data.risk_free_rate)
        .with_context(|| format!("loading {}", path.display()))
        .run_err()
}

fn h_init(cfg: &RunConfig) -> HInit {
    cfg.estimation.h_init.map_or(HInit::Auto, HInit::Value)
}

fn estimate_options(cfg: &RunConfig) -> EstimateOptions {
    EstimateOptions {
        h_init: h_init(cfg),
        optim: OptimOptions {
            nm_max_evals: cfg.estimation.nm_max_evals,
            bfgs_max_iter: cfg.estimation.bfgs_max_iter,
            ..OptimOptions::default()
        },
        starts: cfg.estimation.starts,
        seed: cfg.estimation.seed,
        vix_weight: cfg.estimation.vix_weight,
        min_obs: cfg.estimation.min_obs,
        leverage: cfg.models.leverage,
        error_spec: cfg.models.error_spec,
    }
}

/// Fixed parameters for the pricing, VRP and simulation commands.
fn model_params(cfg: &RunConfig, family: Family) -> Result<ModelParams, CliError> {
    if cfg.models.params == "preset" {
        return Ok(match family {
            Family::Rg => ModelParams::Rg(sp500_2004_2018::rg()),
            Family::Eg => ModelParams::Eg(sp500_2004_2018::eg()),
            Family::G => ModelParams::G(sp500_2004_2018::g()),
            Family::Hn => ModelParams::Hn(sp500_2004_2018::hn()),
            Family::HnVd => ModelParams::Hn(sp500_2004_2018::hnvd()),
        });
    }
    let path = Path::new(&cfg.models.params).join(format!("fit_{family}.json"));
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("cannot read fitted parameters {}", path.display()))
        .config_err()?;
    let fit: FitResult = serde_json::from_str(&text)
        .with_context(|| format!("invalid fit file {}", path.display()))
        .config_err()?;
    if fit.params.family() != family {
        return Err(CliError::Config(anyhow!("{} holds {} parameters", path.display(), fit.params.family())));
    }
    Ok(fit.params)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn cmd_estimate(cfg: &RunConfig, out: &mut Outputs) -> CmdResult {
    let series = load_series(cfg)?;
    let opts = estimate_options(cfg);
    let mut fits = vec![];
    for &family in &cfg.models.families {
        log::info!("estimating {family} on {} observations", series.len());
        let fit = estimate(family, &series, &opts)
            .with_context(|| format!("estimating {family}"))
            .run_err()?;
        if !fit.converged {
            log::warn!("{family}: optimizer did not report convergence");
        }
        out.write(&format!("fit_{family}.json"), |w| fit.write_json(w))?;
        fits.push((family, fit));
    }
    // parameter rows, one value and one standard-error column per model
    out.write("estimates.csv", |w| {
        let mut names: Vec<String> = vec![];
        for (_, f) in &fits {
            for n in &f.names {
                if !names.contains(n) {
                    names.push(n.clone());
                }
            }
        }
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["parameter".to_string()];
        for (family, _) in &fits {
            header.push(family.to_string());
            header.push(format!("{family}_se"));
        }
        wtr.write_record(&header)?;
        for n in &names {
            let mut rec = vec![n.clone()];
            for (_, f) in &fits {
                let value = f.params.named_values().into_iter().find(|(k, _)| k == n).map(|(_, v)| v);
                rec.push(fmt_opt(value));
                rec.push(fmt_opt(f.se_of(n)));
            }
            wtr.write_record(&rec)?;
        }
        type Row = fn(&FitResult) -> Option<f64>;
        let rows: [(&str, Row); 5] = [
            ("ll_r", |f| Some(f.ll.ll_r)),
            ("ll_x", |f| f.ll.ll_x),
            ("ll_vix", |f| Some(f.ll.ll_vix)),
            ("ll_total", |f| Some(f.ll.total)),
            ("persistence", |f| Some(f.params.persistence())),
        ];
        for (label, get) in rows {
            let mut rec = vec![label.to_string()];
            for (_, f) in &fits {
                rec.push(fmt_opt(get(f)));
                rec.push(String::new());
            }
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    })
}

fn market_vrp(cfg: &RunConfig, series: &MarketSeries) -> Result<Vec<Option<f64>>, CliError> {
    let rvcc = build_rvcc(series);
    let vix = series.vix();
    match cfg.evaluation.market_vrp {
        MarketVrp::Martingale => vrp_market_martingale(&vix, &rvcc).run_err(),
        MarketVrp::Har => vrp_market_har(
            &vix,
            &rvcc,
            &HarOptions {
                window: cfg.evaluation.har_window,
                embargo: MONTH_DAYS,
                refit_every: cfg.evaluation.har_refit_every,
            },
        )
        .run_err(),
    }
}

/// Realized annualized volatility over the 22 days after each date.
fn forward_vol(series: &MarketSeries) -> Vec<Option<f64>> {
    let rvcc = build_rvcc(series);
    let n = rvcc.len();
    (0..n)
        .map(|t| (t + MONTH_DAYS < n).then(|| annualize_sum(rvcc[t + 1..=t + MONTH_DAYS].iter().sum(), MONTH_DAYS)))
        .collect()
}

pub fn cmd_backtest(cfg: &RunConfig, out: &mut Outputs) -> CmdResult {
    cfg.require_reference().config_err()?;
    let series = load_series(cfg)?;
    let opts = BacktestOptions {
        window: cfg.backtest.window,
        refit_every: cfg.backtest.refit_every,
        start_date: cfg.backtest.start_date,
        estimate: estimate_options(cfg),
    };
    let mut runs: Vec<(Family, Backtest)> = vec![];
    for &family in &cfg.models.families {
        log::info!("backtesting {family}");
        let bt = rolling_backtest(family, &series, &opts)
            .with_context(|| format!("backtesting {family}"))
            .run_err()?;
        out.write(&format!("backtest_{family}.csv"), |w| bt.write_csv(w))?;
        out.write_json(&format!("backtest_{family}_fits.json"), &bt.fits)?;
        runs.push((family, bt));
    }

    let vix = series.vix();
    let mvrp = market_vrp(cfg, &series)?;
    let fvol = forward_vol(&series);
    // dates forecast by every model
    let mut idx: Vec<usize> = runs[0].1.rows.iter().filter_map(|r| series.index_of(r.date)).collect();
    for (_, bt) in &runs[1..] {
        let dates: Vec<NaiveDate> = bt.rows.iter().map(|r| r.date).collect();
        idx.retain(|&t| dates.contains(&series.rows()[t].date));
    }
    fn row_at(bt: &Backtest, d: NaiveDate) -> &rgvix_core::estimate::BacktestRow {
        bt.rows.iter().find(|r| r.date == d).expect("date present")
    }
    type Market<'a> = &'a dyn Fn(usize) -> Option<f64>;
    type Pick = fn(&rgvix_core::estimate::BacktestRow) -> f64;
    let targets: [(&str, Market, Pick); 3] = [
        ("vrp", &|t| mvrp[t], |r| r.model_vrp),
        ("vix", &|t| Some(vix[t]), |r| r.model_vix),
        ("vol", &|t| fvol[t], |r| r.p_vol),
    ];
    let mut report = EvalReport::default();
    for (name, market, pick) in targets {
        let used: Vec<usize> = idx.iter().copied().filter(|&t| market(t).is_some()).collect();
        if used.len() < 2 {
            log::warn!("target {name}: fewer than two evaluation dates, skipped");
            continue;
        }
        let m: Vec<f64> = used.iter().map(|&t| market(t).unwrap()).collect();
        let models: Vec<(String, Vec<f64>)> = runs
            .iter()
            .map(|(f, bt)| (f.to_string(), used.iter().map(|&t| pick(row_at(bt, series.rows()[t].date))).collect()))
            .collect();
        report.targets.push(
            evaluate_target(
                name,
                &m,
                &models,
                cfg.evaluation.reference.as_str(),
                cfg.evaluation.bandwidth,
                cfg.evaluation.kurtosis,
            )
            .with_context(|| format!("evaluating {name}"))
            .run_err()?,
        );
    }
    out.write("eval_report.csv", |w| report.write_csv(w))?;
    out.write("eval_report.json", |w| report.write_json(w))
}

pub fn cmd_vix(cfg: &RunConfig, out: &mut Outputs) -> CmdResult {
    let series = load_series(cfg)?;
    for &family in &cfg.models.families {
        let params = model_params(cfg, family)?;
        let h0 = h_init(cfg)
            .resolve(family.is_log_variance(), &series)
            .run_err()?;
        let ev = evaluate(&params, &series, h0, cfg.models.error_spec, 1.0, false)
            .with_context(|| format!("pricing {family}"))
            .run_err()?;
        out.write(&format!("vix_{family}.csv"), |w| {
            write_priced_csv(&series.dates(), &series.vix(), &ev.model_vix, w)
        })?;
    }
    Ok(())
}

pub fn cmd_vrp(cfg: &RunConfig, out: &mut Outputs) -> CmdResult {
    let series = load_series(cfg)?;
    let har = HarOptions {
        window: cfg.evaluation.har_window,
        embargo: MONTH_DAYS,
        refit_every: cfg.evaluation.har_refit_every,
    };
    let mut models = vec![];
    for &family in &cfg.models.families {
        let params = model_params(cfg, family)?;
        let v = VrpSeries::build(&params, &series, h_init(cfg), &har)
            .with_context(|| format!("VRP for {family}"))
            .run_err()?;
        out.write(&format!("vrp_{family}.csv"), |w| v.write_csv(w))?;
        models.push((family, v));
    }
    let pick = |r: &rgvix_core::vrp::VrpRow| match cfg.evaluation.market_vrp {
        MarketVrp::Martingale => r.market_vrp_martingale,
        MarketVrp::Har => r.market_vrp_har,
    };
    let used: Vec<usize> = (0..series.len()).filter(|&t| pick(&models[0].1.rows[t]).is_some()).collect();
    if used.len() < 2 {
        log::warn!("no dates with a market VRP; skipping VRP statistics");
        return Ok(());
    }
    let market: Vec<f64> = used.iter().map(|&t| pick(&models[0].1.rows[t]).unwrap()).collect();
    let series_by_model: Vec<(String, Vec<f64>)> = models
        .iter()
        .map(|(f, v)| (f.to_string(), used.iter().map(|&t| v.rows[t].model_vrp).collect()))
        .collect();
    let reference = if cfg.models.families.contains(&cfg.evaluation.reference) {
        cfg.evaluation.reference
    } else {
        cfg.models.families[0]
    };
    let t = evaluate_target(
        "vrp",
        &market,
        &series_by_model,
        reference.as_str(),
        cfg.evaluation.bandwidth,
        cfg.evaluation.kurtosis,
    )
    .run_err()?;
    let report = EvalReport { targets: vec![t] };
    out.write("vrp_stats.csv", |w| report.write_csv(w))
}

pub fn cmd_simulate(cfg: &RunConfig, out: &mut Outputs) -> CmdResult {
    let s = &cfg.simulation;
    for &family in &cfg.models.families {
        let params = model_params(cfg, family)?;
        for (measure, tag) in [(Measure::P, "p"), (Measure::Q, "q")] {
            let sim = SimConfig {
                burn_in: s.burn_in,
                ..SimConfig::new(params, measure, s.n_paths, s.n_days, s.seed)
            };
            log::info!("simulating {family} under {tag}: {} paths x {} days", s.n_paths, s.n_days);
            let curve = cumret_moments(&sim, &s.horizons)
                .with_context(|| format!("simulating {family} under {tag}"))
                .run_err()?;
            out.write(&format!("moments_{family}_{tag}.csv"), |w| curve.write_csv(w))?;
            let grid = density_grid(&sim, s.density_horizon, s.density_bins).run_err()?;
            out.write(&format!("density_{family}_{tag}.csv"), |w| grid.write_csv(w))?;
        }
    }
    Ok(())
}

pub fn cmd_moments(cfg: &RunConfig, out: &mut Outputs) -> CmdResult {
    let ModelParams::Rg(p) = model_params(cfg, Family::Rg)? else {
        unreachable!("rg parameters")
    };
    let report = MomentReport::new(&p).context("moment report").run_err()?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    out.write("moments_report.json", |w| report.write_json(w))?;
    out.write("moments_report.csv", |w| report.write_csv(w))
}

fn read_value_csv(path: &Path) -> Result<Vec<(NaiveDate, f64)>, CliError> {
    let mut rdr = csv::Reader::from_path(path)
        .with_context(|| format!("cannot read {}", path.display()))
        .config_err()?;
    let mut out = vec![];
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.with_context(|| format!("{} line {}", path.display(), i + 2)).config_err()?;
        let date = rec
            .get(0)
            .and_then(|d| NaiveDate::parse_from_str(d.trim(), "%Y-%m-%d").ok())
            .ok_or_else(|| CliError::Config(anyhow!("{} line {}: bad date", path.display(), i + 2)))?;
        let value: f64 = rec
            .get(1)
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| CliError::Config(anyhow!("{} line {}: bad value", path.display(), i + 2)))?;
        out.push((date, value));
    }
    Ok(out)
}

pub fn cmd_dm(cfg: &RunConfig, out: &mut Outputs) -> CmdResult {
    let market_path = cfg
        .dm
        .market
        .as_ref()
        .ok_or_else(|| CliError::Config(anyhow!("dm.market is not set")))?;
    if cfg.dm.forecasts.len() < 2 {
        return Err(CliError::Config(anyhow!("dm.forecasts needs at least two files")));
    }
    let market = read_value_csv(market_path)?;
    let forecasts: Vec<(String, Vec<(NaiveDate, f64)>)> = cfg
        .dm
        .forecasts
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((format!("{}:{stem}", i + 1), read_value_csv(p)?))
        })
        .collect::<Result<_, CliError>>()?;
    // dates present in the market file and every forecast
    let dates: Vec<NaiveDate> = market
        .iter()
        .map(|(d, _)| *d)
        .filter(|d| forecasts.iter().all(|(_, f)| f.iter().any(|(fd, _)| fd == d)))
        .collect();
    let lookup = |v: &[(NaiveDate, f64)], d: NaiveDate| v.iter().find(|(x, _)| *x == d).map(|(_, y)| *y).unwrap();
    let m: Vec<f64> = dates.iter().map(|&d| lookup(&market, d)).collect();
    let models: Vec<(String, Vec<f64>)> = forecasts
        .iter()
        .map(|(n, f)| (n.clone(), dates.iter().map(|&d| lookup(f, d)).collect()))
        .collect();
    let t = evaluate_target(
        "forecast",
        &m,
        &models,
        &models[0].0,
        cfg.evaluation.bandwidth,
        cfg.evaluation.kurtosis,
    )
    .context("DM comparison")
    .run_err()?;
    let report = EvalReport { targets: vec![t] };
    out.write("dm_report.csv", |w| report.write_csv(w))?;
    out.write("dm_report.json", |w| report.write_json(w))
}

pub fn cmd_synth(cfg: &RunConfig, out: &mut Outputs) -> CmdResult {
    let family = cfg.models.families[0];
    let params = model_params(cfg, family)?;
    let start = NaiveDate::from_ymd_opt(2004, 1, 2).expect("valid date");
    let series = simulate_market(&params, cfg.simulation.synth_days, cfg.simulation.seed, start).run_err()?;
    let schema = cfg.data.schema();
    out.write(&format!("synthetic_{family}.csv"), |w| write_csv(&series, w, &schema))
}
