//! Joint quasi-maximum-likelihood estimation, sandwich standard errors and
//! rolling-window re-estimation.

use std::io::Write;

use chrono::NaiveDate;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::MarketSeries;
use crate::error::{Error, Result};
use crate::filter::{filter, FilterOutput, HInit};
use crate::measure::Measure;
use crate::optim::{minimize, OptimOptions};
use crate::params::{EGParams, Family, GParams, HNParams, Leverage, ModelParams, RGParams};
use crate::vix::{loglik_vix_terms, profile_sigma_vix, ErrorSpec, Pricer};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimateOptions {
    pub h_init: HInit,
    pub optim: OptimOptions,
    /// Number of starting points; the first is the data-driven initial guess.
    pub starts: usize,
    pub seed: u64,
    /// Weight on the VIX likelihood. Zero estimates from returns (and the
    /// realized measure) alone.
    pub vix_weight: f64,
    pub min_obs: usize,
    /// Leverage shape for Realized GARCH.
    pub leverage: Leverage,
    pub error_spec: ErrorSpec,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        EstimateOptions {
            h_init: HInit::Auto,
            optim: OptimOptions::default(),
            starts: 5,
            seed: 0,
            vix_weight: 1.0,
            min_obs: 100,
            leverage: Leverage::Quadratic,
            error_spec: ErrorSpec::Additive,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LlComponents {
    pub ll_r: f64,
    pub ll_x: Option<f64>,
    pub ll_vix: f64,
    /// `ll_r + ll_x + vix_weight * ll_vix`
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: ModelParams,
    pub names: Vec<String>,
    /// Robust standard errors in `names` order; `None` where unavailable.
    pub se: Vec<Option<f64>>,
    pub ll: LlComponents,
    pub converged: bool,
    pub n_iter: usize,
    pub n_evals: usize,
    /// Half-open row range `[start, end)` of the estimation sample.
    pub window: (usize, usize),
    pub h_init: f64,
    pub error_spec: ErrorSpec,
    pub vix_weight: f64,
}

impl FitResult {
    pub fn write_json<W: Write>(&self, writer: W) -> Result<()> {
        serde_json::to_writer_pretty(writer, self)?;
        Ok(())
    }

    pub fn se_of(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).and_then(|i| self.se[i])
    }
}

/// Everything a likelihood evaluation produces.
#[derive(Debug, Clone)]
pub struct Evaluation {
    /// Input parameters, with `sigma_vix` replaced by its profile value when profiled.
    pub params: ModelParams,
    pub ll: LlComponents,
    pub filter: FilterOutput,
    pub model_vix: Vec<f64>,
}

/// Filters, prices and scores one parameter vector. With `profile` the VIX
/// error scale is set to its closed-form maximizer first.
pub fn evaluate(
    params: &ModelParams,
    series: &MarketSeries,
    h_init: f64,
    spec: ErrorSpec,
    vix_weight: f64,
    profile: bool,
) -> Result<Evaluation> {
    let out = filter(params, series, h_init)?;
    let model_vix = Pricer::new(params, Measure::Q)?.price_filtered(&out)?;
    let market = series.vix();
    let mut params = *params;
    if profile {
        params.set_sigma_vix(profile_sigma_vix(&model_vix, &market, spec)?);
    }
    let ll_vix: f64 = loglik_vix_terms(&model_vix, &market, params.sigma_vix(), spec)?.iter().sum();
    let ll_r = out.total_ll_r();
    let ll_x = out.total_ll_x();
    let total = ll_r + ll_x.unwrap_or(0.0) + vix_weight * ll_vix;
    if !total.is_finite() {
        return Err(Error::numeric("likelihood", "non-finite log-likelihood"));
    }
    Ok(Evaluation {
        params,
        ll: LlComponents {
            ll_r,
            ll_x,
            ll_vix,
            total,
        },
        filter: out,
        model_vix,
    })
}

/// Per-observation log-likelihood contributions at fixed `sigma_vix`.
pub fn loglik_contributions(
    params: &ModelParams,
    series: &MarketSeries,
    h_init: f64,
    spec: ErrorSpec,
    vix_weight: f64,
) -> Result<Vec<f64>> {
    params.validate()?;
    let out = filter(params, series, h_init)?;
    let model_vix = Pricer::new(params, Measure::Q)?.price_filtered(&out)?;
    let vix_terms = loglik_vix_terms(&model_vix, &series.vix(), params.sigma_vix(), spec)?;
    Ok((0..out.len())
        .map(|t| out.ll_r[t] + out.ll_x.as_ref().map_or(0.0, |x| x[t]) + vix_weight * vix_terms[t])
        .collect())
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Bijection between a family's parameters (without `sigma_vix`) and R^n.
#[derive(Debug, Clone, Copy)]
struct Transform {
    family: Family,
    leverage: Leverage,
    /// Return variance used to put HN parameters on unit scale.
    scale: f64,
}

impl Transform {
    fn decode(&self, x: &[f64]) -> ModelParams {
        match self.family {
            Family::Rg => ModelParams::Rg(RGParams {
                lambda: x[0],
                omega: x[1],
                beta: x[2].tanh(),
                tau1: x[3],
                tau2: x[4],
                gamma: x[5],
                kappa: x[6],
                phi: x[7],
                delta1: x[8],
                delta2: x[9],
                sigma: x[10].exp(),
                xi: x[11],
                sigma_vix: 1.0,
                leverage: self.leverage,
            }),
            Family::Eg => ModelParams::Eg(EGParams {
                lambda: x[0],
                omega: x[1],
                beta: x[2].tanh(),
                tau1: x[3],
                tau2: x[4],
                sigma_vix: 1.0,
            }),
            Family::G => {
                let persistence = logistic(x[2]);
                let alpha = persistence * logistic(x[3]);
                ModelParams::G(GParams {
                    lambda: x[0],
                    omega: x[1].exp(),
                    beta: persistence - alpha,
                    alpha,
                    sigma_vix: 1.0,
                })
            }
            Family::Hn | Family::HnVd => {
                let v = self.scale;
                ModelParams::Hn(HNParams {
                    lambda: x[0] / v.sqrt(),
                    omega: x[1] * v,
                    beta: x[2].tanh(),
                    alpha: x[3].exp() * v,
                    delta: x[4] / v.sqrt(),
                    sigma_vix: 1.0,
                    eta: (self.family == Family::HnVd).then(|| x[5].exp()),
                })
            }
        }
    }

    fn encode(&self, p: &ModelParams) -> Vec<f64> {
        match p {
            ModelParams::Rg(p) => vec![
                p.lambda,
                p.omega,
                p.beta.atanh(),
                p.tau1,
                p.tau2,
                p.gamma,
                p.kappa,
                p.phi,
                p.delta1,
                p.delta2,
                p.sigma.ln(),
                p.xi,
            ],
            ModelParams::Eg(p) => vec![p.lambda, p.omega, p.beta.atanh(), p.tau1, p.tau2],
            ModelParams::G(p) => {
                let persistence = p.alpha + p.beta;
                vec![p.lambda, p.omega.ln(), logit(persistence), logit(p.alpha / persistence)]
            }
            ModelParams::Hn(p) => {
                let v = self.scale;
                let mut x = vec![
                    p.lambda * v.sqrt(),
                    p.omega / v,
                    p.beta.atanh(),
                    (p.alpha / v).ln(),
                    p.delta * v.sqrt(),
                ];
                if let Some(eta) = p.eta {
                    x.push(eta.ln());
                }
                x
            }
        }
    }
}

/// Sample variance of returns (zero when numerically constant) and mean log realized measure.
fn sample_moments(series: &MarketSeries) -> (f64, f64) {
    let r = series.returns();
    let n = r.len() as f64;
    let mean = r.iter().sum::<f64>() / n;
    let mut var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if var <= 1e-12 * mean * mean {
        var = 0.0;
    }
    let lx = series.log_realized_measure();
    (var, lx.iter().sum::<f64>() / n)
}

/// Data-driven starting values.
pub fn initial_params(family: Family, series: &MarketSeries, leverage: Leverage) -> Result<ModelParams> {
    let (var, mean_log_x) = sample_moments(series);
    if !(var > 0.0) {
        return Err(Error::Degenerate("returns have zero sample variance".into()));
    }
    let beta = 0.97;
    Ok(match family {
        Family::Rg => ModelParams::Rg(RGParams {
            lambda: 0.02,
            omega: (1.0 - beta) * var.ln(),
            beta,
            tau1: -0.05,
            tau2: 0.02,
            gamma: 0.1,
            kappa: mean_log_x - var.ln(),
            phi: 1.0,
            delta1: -0.05,
            delta2: 0.05,
            sigma: 0.3f64.sqrt(),
            xi: -0.5,
            sigma_vix: 1.0,
            leverage,
        }),
        Family::Eg => ModelParams::Eg(EGParams {
            lambda: 0.05,
            omega: (1.0 - beta) * var.ln(),
            beta,
            tau1: -0.05,
            tau2: 0.1,
            sigma_vix: 1.0,
        }),
        Family::G => ModelParams::G(GParams {
            lambda: 0.05,
            omega: 0.05 * var,
            beta: 0.9,
            alpha: 0.05,
            sigma_vix: 1.0,
        }),
        Family::Hn | Family::HnVd => ModelParams::Hn(HNParams {
            lambda: 2.0,
            omega: 0.08 * var,
            beta: 0.8,
            alpha: 0.02 * var,
            delta: (5.0 / var).sqrt(),
            sigma_vix: 1.0,
            eta: (family == Family::HnVd).then_some(1.1),
        }),
    })
}

/// Maximizes the joint likelihood over the transformed parameter space.
pub fn estimate(family: Family, series: &MarketSeries, opts: &EstimateOptions) -> Result<FitResult> {
    estimate_from(family, series, opts, None)
}

/// As [`estimate`], optionally seeding the first start with given parameters.
pub fn estimate_from(
    family: Family,
    series: &MarketSeries,
    opts: &EstimateOptions,
    start: Option<&ModelParams>,
) -> Result<FitResult> {
    if series.len() < opts.min_obs {
        return Err(Error::InsufficientData(format!(
            "{} observations, need at least {}",
            series.len(),
            opts.min_obs
        )));
    }
    let base = match start {
        Some(p) if p.family() == family => *p,
        Some(p) => {
            return Err(Error::Contract(format!(
                "start parameters are {} but family is {family}",
                p.family()
            )))
        }
        None => initial_params(family, series, opts.leverage)?,
    };
    let h0 = opts.h_init.resolve(family.is_log_variance(), series)?;
    let tr = Transform {
        family,
        leverage: opts.leverage,
        scale: sample_moments(series).0,
    };
    let n = series.len() as f64;
    let objective = |x: &[f64]| -> f64 {
        let p = tr.decode(x);
        if p.validate().is_err() {
            return f64::INFINITY;
        }
        match evaluate(&p, series, h0, opts.error_spec, opts.vix_weight, true) {
            Ok(e) => -e.ll.total / n,
            Err(_) => f64::INFINITY,
        }
    };

    let x0 = tr.encode(&base);
    let starts: Vec<Vec<f64>> = (0..opts.starts.max(1))
        .map(|i| {
            if i == 0 {
                return x0.clone();
            }
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(i as u64);
            x0.iter()
                .map(|&v| v + 0.2 * v.abs().max(0.05) * rng.gen_range(-1.0..1.0))
                .collect()
        })
        .collect();
    let runs: Vec<_> = starts.par_iter().map(|x| minimize(objective, x, &opts.optim)).collect();
    let n_evals = runs.iter().map(|r| r.evals).sum();
    let best = runs
        .into_iter()
        .filter(|r| r.f.is_finite())
        .min_by(|a, b| a.f.total_cmp(&b.f))
        .ok_or_else(|| Error::Estimation("every start produced an inadmissible likelihood".into()))?;

    let eval = evaluate(&tr.decode(&best.x), series, h0, opts.error_spec, opts.vix_weight, true)?;
    let names = eval.params.named_values().iter().map(|(n, _)| n.to_string()).collect();
    let mut fit = FitResult {
        params: eval.params,
        names,
        se: vec![None; eval.params.named_values().len()],
        ll: eval.ll,
        converged: best.converged,
        n_iter: best.iterations,
        n_evals,
        window: (0, series.len()),
        h_init: h0,
        error_spec: opts.error_spec,
        vix_weight: opts.vix_weight,
    };
    if let ModelParams::Rg(p) = &fit.params {
        for w in p.sign_warnings() {
            log::warn!("{w}");
        }
    }
    if fit.converged {
        match robust_se(&fit, series) {
            Ok(se) => fit.se = se,
            // a finite-difference step can leave the admissible region at a boundary optimum
            Err(e) => log::warn!("{}: standard errors unavailable: {e}", fit.params.family()),
        }
    }
    Ok(fit)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeReport {
    /// `sqrt(diag(H^-1 S H^-1))`
    pub sandwich: Vec<Option<f64>>,
    /// `sqrt(diag(-H^-1))`
    pub hessian: Vec<Option<f64>>,
}

fn fd_step(v: f64) -> f64 {
    1e-4 * v.abs().max(1e-6)
}

/// Sandwich standard errors of the maximizer `theta` of `sum_t l_t(theta)`,
/// where `per_obs(theta)` returns the contributions `l_t`. The Hessian uses
/// four-point central differences of the total, the scores central
/// differences of each contribution.
pub fn sandwich_se<F>(per_obs: F, theta: &[f64]) -> Result<SeReport>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    let k = theta.len();
    let steps: Vec<f64> = theta.iter().map(|&v| fd_step(v)).collect();
    let base = per_obs(theta)?;
    let n = base.len();
    let f0: f64 = base.iter().sum();
    let shifted = |moves: &[(usize, f64)]| -> Result<Vec<f64>> {
        let mut t = theta.to_vec();
        for &(i, m) in moves {
            t[i] += m * steps[i];
        }
        per_obs(&t)
    };

    // one-parameter perturbations at +-1 and +-2 steps
    let singles: Vec<[Vec<f64>; 2]> = (0..k)
        .into_par_iter()
        .map(|i| Ok([shifted(&[(i, 1.0)])?, shifted(&[(i, -1.0)])?]))
        .collect::<Result<_>>()?;
    let total = |v: &Vec<f64>| v.iter().sum::<f64>();

    let mut scores = DMatrix::<f64>::zeros(n, k);
    let mut h = DMatrix::<f64>::zeros(k, k);
    for i in 0..k {
        let [p, m] = &singles[i];
        for t in 0..n {
            scores[(t, i)] = (p[t] - m[t]) / (2.0 * steps[i]);
        }
        h[(i, i)] = (total(p) - 2.0 * f0 + total(m)) / (steps[i] * steps[i]);
    }
    let pairs: Vec<(usize, usize)> = (0..k).flat_map(|i| (i + 1..k).map(move |j| (i, j))).collect();
    let cross: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let pp = total(&shifted(&[(i, 1.0), (j, 1.0)])?);
            let pm = total(&shifted(&[(i, 1.0), (j, -1.0)])?);
            let mp = total(&shifted(&[(i, -1.0), (j, 1.0)])?);
            let mm = total(&shifted(&[(i, -1.0), (j, -1.0)])?);
            Ok((pp - pm - mp + mm) / (4.0 * steps[i] * steps[j]))
        })
        .collect::<Result<_>>()?;
    for (&(i, j), v) in pairs.iter().zip(cross) {
        h[(i, j)] = v;
        h[(j, i)] = v;
    }

    let unavailable = SeReport {
        sandwich: vec![None; k],
        hessian: vec![None; k],
    };
    if h.iter().any(|v| !v.is_finite()) {
        return Ok(unavailable);
    }
    // invert in coordinates scaled by the parameter magnitudes
    let d = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(k, steps.iter().map(|s| s / 1e-4)));
    let hs = &d * &h * &d;
    let Some(hs_inv) = hs.clone().try_inverse() else {
        return Ok(unavailable);
    };
    if hs_inv.iter().any(|v| !v.is_finite()) || hs.rank(1e-12 * hs.amax()) < k {
        return Ok(unavailable);
    }
    let hinv = &d * hs_inv * &d;
    let s = scores.transpose() * &scores;
    let cov = &hinv * s * &hinv;
    let sd = |v: f64| (v.is_finite() && v > 0.0).then(|| v.sqrt());
    Ok(SeReport {
        sandwich: (0..k).map(|i| sd(cov[(i, i)])).collect(),
        hessian: (0..k).map(|i| sd(-hinv[(i, i)])).collect(),
    })
}

/// Robust standard errors for every entry of `fit.params.named_values()`,
/// including `sigma_vix`.
pub fn robust_se(fit: &FitResult, series: &MarketSeries) -> Result<Vec<Option<f64>>> {
    Ok(se_report(fit, series)?.sandwich)
}

pub fn se_report(fit: &FitResult, series: &MarketSeries) -> Result<SeReport> {
    let template = fit.params;
    let theta: Vec<f64> = template.named_values().iter().map(|(_, v)| *v).collect();
    sandwich_se(
        |t| {
            let p = template.with_values(t)?;
            loglik_contributions(&p, series, fit.h_init, fit.error_spec, fit.vix_weight)
        },
        &theta,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BacktestOptions {
    pub window: usize,
    pub refit_every: usize,
    /// First forecast date; defaults to the first date with a full window behind it.
    pub start_date: Option<NaiveDate>,
    pub estimate: EstimateOptions,
}

impl Default for BacktestOptions {
    fn default() -> Self {
        BacktestOptions {
            window: 750,
            refit_every: 22,
            start_date: None,
            estimate: EstimateOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestRow {
    pub date: NaiveDate,
    pub model_vix: f64,
    /// Annualized expected volatility under P, percent.
    pub p_vol: f64,
    pub model_vrp: f64,
    pub window_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowFit {
    pub window_id: usize,
    pub fit_range: (usize, usize),
    pub params: ModelParams,
    pub converged: bool,
    /// The window's own estimation failed and the previous parameters were reused.
    pub carried_forward: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Backtest {
    pub rows: Vec<BacktestRow>,
    pub fits: Vec<WindowFit>,
}

impl Backtest {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["date", "model_vix", "p_vol", "model_vrp", "window_id"])?;
        for r in &self.rows {
            wtr.write_record([
                r.date.format("%Y-%m-%d").to_string(),
                r.model_vix.to_string(),
                r.p_vol.to_string(),
                r.model_vrp.to_string(),
                r.window_id.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Estimates on a trailing window at every refit point and forecasts the
/// following `refit_every` days with frozen parameters, filtering from the
/// start of the estimation window.
pub fn rolling_backtest(family: Family, series: &MarketSeries, opts: &BacktestOptions) -> Result<Backtest> {
    if opts.window == 0 || opts.refit_every == 0 {
        return Err(Error::Contract("window and refit_every must be positive".into()));
    }
    let first = match opts.start_date {
        Some(d) => series
            .rows()
            .iter()
            .position(|r| r.date >= d)
            .ok_or_else(|| Error::InsufficientData(format!("no observations on or after {d}")))?,
        None => opts.window,
    };
    if first < opts.window {
        return Err(Error::InsufficientData(format!(
            "start needs {} days of history, only {first} available",
            opts.window
        )));
    }
    let refits: Vec<usize> = (first..series.len()).step_by(opts.refit_every).collect();
    if refits.is_empty() {
        return Err(Error::InsufficientData("no dates to forecast".into()));
    }

    let fits: Vec<Result<FitResult>> = refits
        .par_iter()
        .enumerate()
        .map(|(id, &s)| {
            let window = series.slice(s - opts.window, s)?;
            let mut eo = opts.estimate;
            eo.seed = opts.estimate.seed.wrapping_add(id as u64);
            let mut fit = estimate(family, &window, &eo)?;
            fit.window = (s - opts.window, s);
            Ok(fit)
        })
        .collect();

    let mut resolved: Vec<WindowFit> = Vec::with_capacity(refits.len());
    for (id, (fit, &s)) in fits.into_iter().zip(&refits).enumerate() {
        let range = (s - opts.window, s);
        match fit {
            Ok(f) => resolved.push(WindowFit {
                window_id: id,
                fit_range: range,
                params: f.params,
                converged: f.converged,
                carried_forward: false,
            }),
            Err(e) => {
                let prev = resolved.last().ok_or_else(|| {
                    Error::Estimation(format!("first backtest window failed with no fallback: {e}"))
                })?;
                log::warn!("window {id} ending {}: {e}; reusing previous parameters", series.rows()[s - 1].date);
                resolved.push(WindowFit {
                    window_id: id,
                    fit_range: range,
                    params: prev.params,
                    converged: false,
                    carried_forward: true,
                });
            }
        }
    }

    let blocks: Vec<Vec<BacktestRow>> = resolved
        .par_iter()
        .zip(&refits)
        .map(|(w, &s)| {
            let end = (s + opts.refit_every).min(series.len());
            let span = series.slice(w.fit_range.0, end)?;
            let fit_part = series.slice(w.fit_range.0, w.fit_range.1)?;
            let h0 = opts.estimate.h_init.resolve(family.is_log_variance(), &fit_part)?;
            let out = filter(&w.params, &span, h0)?;
            let q = Pricer::new(&w.params, Measure::Q)?;
            let p = Pricer::new(&w.params, Measure::P)?;
            (s..end)
                .map(|t| {
                    let local = t - w.fit_range.0;
                    let h = out.h_next(local);
                    let model_vix = q.vix(h)?;
                    let p_vol = p.vix(h)?;
                    Ok(BacktestRow {
                        date: series.rows()[t].date,
                        model_vix,
                        p_vol,
                        model_vrp: model_vix - p_vol,
                        window_id: w.window_id,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(Backtest {
        rows: blocks.into_iter().flatten().collect(),
        fits: resolved,
    })
}
