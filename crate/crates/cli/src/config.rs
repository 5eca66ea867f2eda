use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use chrono::NaiveDate;
use rgvix_core::data::{CsvSchema, RealizedScale};
use rgvix_core::eval::Kurtosis;
use rgvix_core::params::{Family, Leverage};
use rgvix_core::vix::ErrorSpec;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum MarketVrp {
    #[default]
    Martingale,
    Har,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Market data CSV; required by estimate, backtest, vix and vrp.
    pub path: Option<PathBuf>,
    pub date_column: String,
    pub return_column: String,
    pub realized_column: String,
    pub vix_column: String,
    /// Overnight return column; empty when the realized measure already covers the whole day.
    pub overnight_column: String,
    pub realized_scale: RealizedScale,
    /// Daily risk-free rate subtracted from returns.
    pub risk_free_rate: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        let s = CsvSchema::default();
        DataSection {
            path: None,
            date_column: s.date,
            return_column: s.log_return,
            realized_column: s.realized_measure,
            vix_column: s.vix,
            overnight_column: String::new(),
            realized_scale: s.realized_scale,
            risk_free_rate: 0.0,
        }
    }
}

impl DataSection {
    pub fn schema(&self) -> CsvSchema {
        CsvSchema {
            date: self.date_column.clone(),
            log_return: self.return_column.clone(),
            realized_measure: self.realized_column.clone(),
            vix: self.vix_column.clone(),
            overnight: (!self.overnight_column.is_empty()).then(|| self.overnight_column.clone()),
            realized_scale: self.realized_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelsSection {
    pub families: Vec<Family>,
    pub error_spec: ErrorSpec,
    pub leverage: Leverage,
    /// `"preset"` for the built-in S&P 500 estimates, otherwise a directory
    /// holding `fit_<model>.json` files written by `estimate`.
    pub params: String,
}

impl Default for ModelsSection {
    fn default() -> Self {
        ModelsSection {
            families: vec![Family::Rg],
            error_spec: ErrorSpec::Additive,
            leverage: Leverage::Quadratic,
            params: "preset".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimationSection {
    pub starts: usize,
    pub seed: u64,
    pub vix_weight: f64,
    pub min_obs: usize,
    /// Initial conditional variance; absent selects the data-driven rule.
    pub h_init: Option<f64>,
    pub nm_max_evals: usize,
    pub bfgs_max_iter: usize,
}

impl Default for EstimationSection {
    fn default() -> Self {
        EstimationSection {
            starts: 5,
            seed: 0,
            vix_weight: 1.0,
            min_obs: 100,
            h_init: None,
            nm_max_evals: 4000,
            bfgs_max_iter: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BacktestSection {
    pub window: usize,
    pub refit_every: usize,
    pub start_date: Option<NaiveDate>,
}

impl Default for BacktestSection {
    fn default() -> Self {
        BacktestSection {
            window: 750,
            refit_every: 22,
            start_date: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    pub reference: Family,
    pub bandwidth: usize,
    pub market_vrp: MarketVrp,
    pub kurtosis: Kurtosis,
    pub har_window: usize,
    pub har_refit_every: usize,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        EvaluationSection {
            reference: Family::Rg,
            bandwidth: 42,
            market_vrp: MarketVrp::Martingale,
            kurtosis: Kurtosis::Excess,
            har_window: 750,
            har_refit_every: 22,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSection {
    pub n_paths: usize,
    pub n_days: usize,
    pub burn_in: usize,
    pub seed: u64,
    pub horizons: Vec<usize>,
    pub density_horizon: usize,
    pub density_bins: usize,
    /// Length of the series written by `synth`.
    pub synth_days: usize,
}

impl Default for SimulationSection {
    fn default() -> Self {
        SimulationSection {
            n_paths: 100_000,
            n_days: 250,
            burn_in: 750,
            seed: 0,
            horizons: vec![1, 5, 22, 63, 125, 250],
            density_horizon: 22,
            density_bins: 100,
            synth_days: 3000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DmSection {
    /// CSV with columns `date, value` holding the market series.
    pub market: Option<PathBuf>,
    /// Forecast CSVs with columns `date, value`; the first is the reference.
    pub forecasts: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out_dir: Option<PathBuf>,
    pub data: DataSection,
    pub models: ModelsSection,
    pub estimation: EstimationSection,
    pub backtest: BacktestSection,
    pub evaluation: EvaluationSection,
    pub simulation: SimulationSection,
    pub dm: DmSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
        // relative paths are taken relative to the config file
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = cfg.data.path.as_mut() {
            fix(p);
        }
        if let Some(p) = cfg.dm.market.as_mut() {
            fix(p);
        }
        cfg.dm.forecasts.iter_mut().for_each(fix);
        if let Some(p) = cfg.out_dir.as_mut() {
            fix(p);
        }
        if cfg.models.params != "preset" {
            let mut p = PathBuf::from(&cfg.models.params);
            fix(&mut p);
            cfg.models.params = p.to_string_lossy().into_owned();
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.models.families.is_empty() {
            bail!("models.families is empty");
        }
        if self.estimation.starts == 0 {
            bail!("estimation.starts must be at least 1");
        }
        if self.backtest.window == 0 || self.backtest.refit_every == 0 {
            bail!("backtest.window and backtest.refit_every must be positive");
        }
        if self.evaluation.bandwidth == 0 {
            bail!("evaluation.bandwidth must be at least 1");
        }
        if self.simulation.n_paths == 0 || self.simulation.n_days == 0 {
            bail!("simulation.n_paths and simulation.n_days must be positive");
        }
        if self.simulation.horizons.iter().any(|&h| h == 0 || h > self.simulation.n_days) {
            bail!("simulation.horizons must lie in 1..=simulation.n_days");
        }
        if self.simulation.density_horizon == 0 || self.simulation.density_horizon > self.simulation.n_days {
            bail!("simulation.density_horizon must lie in 1..=simulation.n_days");
        }
        Ok(())
    }

    pub fn require_data(&self) -> anyhow::Result<&Path> {
        match &self.data.path {
            Some(p) if p.is_file() => Ok(p),
            Some(p) => bail!("data file {} does not exist", p.display()),
            None => bail!("data.path is not set"),
        }
    }

    pub fn require_reference(&self) -> anyhow::Result<()> {
        if !self.models.families.contains(&self.evaluation.reference) {
            bail!(
                "reference model {} is not among models.families",
                self.evaluation.reference
            );
        }
        Ok(())
    }
}
