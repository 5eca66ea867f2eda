//! Conditional-variance filters and physical-measure likelihood terms.
//!
//! Every filter returns `h` with one more element than the series: `h[t]` is
//! the conditional variance of day `t` and `h[T]` the one-step forecast made
//! after the last observation. Model VIX on day `t` is priced off `h[t + 1]`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{build_rvcc, MarketSeries, MONTH_DAYS};
use crate::error::{Error, Result};
use crate::params::{EGParams, GParams, HNParams, ModelParams, RGParams};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Admissible range for `ln h`. Leaving it is a hard error, never a clamp.
pub const LOG_H_MIN: f64 = -30.0;
pub const LOG_H_MAX: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutput {
    /// Conditional variances, length `T + 1`.
    pub h: Vec<f64>,
    /// Standardized return shocks, length `T`.
    pub z: Vec<f64>,
    /// Measurement (volatility) shocks, Realized GARCH only.
    pub u: Option<Vec<f64>>,
    pub ll_r: Vec<f64>,
    pub ll_x: Option<Vec<f64>>,
}

impl FilterOutput {
    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    /// Variance forecast for the day after `t`.
    pub fn h_next(&self, t: usize) -> f64 {
        self.h[t + 1]
    }

    pub fn total_ll_r(&self) -> f64 {
        self.ll_r.iter().sum()
    }

    pub fn total_ll_x(&self) -> Option<f64> {
        self.ll_x.as_ref().map(|v| v.iter().sum())
    }

    /// CSV with columns `date,h,z,u,ll_r,ll_x` (empty cells where absent).
    pub fn write_csv<W: Write>(&self, series: &MarketSeries, writer: W) -> Result<()> {
        if series.len() != self.len() {
            return Err(Error::Contract("filter output and series lengths differ".into()));
        }
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["date", "h", "z", "u", "ll_r", "ll_x"])?;
        for (t, row) in series.rows().iter().enumerate() {
            let opt = |v: &Option<Vec<f64>>| v.as_ref().map(|v| v[t].to_string()).unwrap_or_default();
            wtr.write_record([
                row.date.format("%Y-%m-%d").to_string(),
                self.h[t].to_string(),
                self.z[t].to_string(),
                opt(&self.u),
                self.ll_r[t].to_string(),
                opt(&self.ll_x),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Rule for the initial conditional variance.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HInit {
    /// Log-variance models: `exp(mean(ln RVcc))` over the first 22 days.
    /// Affine models: sample variance of the returns.
    #[default]
    Auto,
    Value(f64),
}

impl HInit {
    pub fn resolve(self, log_variance: bool, series: &MarketSeries) -> Result<f64> {
        match self {
            HInit::Value(v) => {
                if v.is_finite() && v > 0.0 {
                    Ok(v)
                } else {
                    Err(Error::Contract(format!("h_init = {v} must be positive")))
                }
            }
            HInit::Auto => {
                if series.is_empty() {
                    return Err(Error::InsufficientData("empty series".into()));
                }
                if log_variance {
                    let rvcc = build_rvcc(series);
                    let n = rvcc.len().min(MONTH_DAYS);
                    let m = rvcc[..n].iter().map(|v| v.ln()).sum::<f64>() / n as f64;
                    Ok(m.exp())
                } else {
                    let r = series.returns();
                    let n = r.len() as f64;
                    let mean = r.iter().sum::<f64>() / n;
                    let var = r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
                    if var > 0.0 {
                        Ok(var)
                    } else {
                        Err(Error::Degenerate("returns have zero sample variance".into()))
                    }
                }
            }
        }
    }
}

fn check_h_init(h_init: f64) -> Result<()> {
    if h_init.is_finite() && h_init > 0.0 {
        Ok(())
    } else {
        Err(Error::Contract(format!("h_init = {h_init} must be positive")))
    }
}

#[inline]
fn guard_log_h(log_h: f64, series: &MarketSeries, t: usize) -> Result<()> {
    if log_h.is_finite() && (LOG_H_MIN..=LOG_H_MAX).contains(&log_h) {
        Ok(())
    } else {
        Err(Error::numeric(
            series.rows()[t].date.to_string(),
            format!("ln h = {log_h} left [{LOG_H_MIN}, {LOG_H_MAX}] after this date"),
        ))
    }
}

#[inline]
fn guard_h(h: f64, series: &MarketSeries, t: usize) -> Result<()> {
    if h > 0.0 && h.is_finite() {
        guard_log_h(h.ln(), series, t)
    } else {
        Err(Error::numeric(
            series.rows()[t].date.to_string(),
            format!("h = {h} is not a positive finite variance after this date"),
        ))
    }
}

/// Realized GARCH filter, driven by the reduced form
/// `ln h' = (w - g k) + (b - g phi) ln h + tau(z) - g delta(z) + g ln x`.
pub fn filter_rg(p: &RGParams, series: &MarketSeries, h_init: f64) -> Result<FilterOutput> {
    check_h_init(h_init)?;
    let n = series.len();
    let rf = series.risk_free_rate();
    let log_x = series.log_realized_measure();
    let ln_sigma2 = 2.0 * p.sigma.ln();
    let c0 = p.omega - p.gamma * p.kappa;
    let c1 = p.beta - p.gamma * p.phi;

    let mut h = Vec::with_capacity(n + 1);
    let mut z = Vec::with_capacity(n);
    let mut u = Vec::with_capacity(n);
    let mut ll_r = Vec::with_capacity(n);
    let mut ll_x = Vec::with_capacity(n);

    let mut log_h = h_init.ln();
    if !(LOG_H_MIN..=LOG_H_MAX).contains(&log_h) {
        return Err(Error::Contract(format!("ln h_init = {log_h} out of range")));
    }
    for (t, row) in series.rows().iter().enumerate() {
        let ht = log_h.exp();
        let sh = ht.sqrt();
        let zt = (row.log_return - rf - p.lambda * sh + 0.5 * ht) / sh;
        let dz = p.delta_fn(zt);
        let ut = (log_x[t] - p.kappa - p.phi * log_h - dz) / p.sigma;
        h.push(ht);
        z.push(zt);
        u.push(ut);
        ll_r.push(-0.5 * (LN_2PI + log_h + zt * zt));
        ll_x.push(-0.5 * (LN_2PI + ln_sigma2 + ut * ut));
        log_h = c0 + c1 * log_h + p.tau_fn(zt) - p.gamma * dz + p.gamma * log_x[t];
        guard_log_h(log_h, series, t)?;
    }
    h.push(log_h.exp());
    Ok(FilterOutput {
        h,
        z,
        u: Some(u),
        ll_r,
        ll_x: Some(ll_x),
    })
}

/// EGARCH filter with `ln h' = w + b ln h + tau1 z + tau2 (|z| - sqrt(2/pi))`
/// and return drift `r + lambda sqrt(h) - h/2`.
pub fn filter_eg(p: &EGParams, series: &MarketSeries, h_init: f64) -> Result<FilterOutput> {
    check_h_init(h_init)?;
    let n = series.len();
    let rf = series.risk_free_rate();
    let mut h = Vec::with_capacity(n + 1);
    let mut z = Vec::with_capacity(n);
    let mut ll_r = Vec::with_capacity(n);
    let mut log_h = h_init.ln();
    for (t, row) in series.rows().iter().enumerate() {
        let ht = log_h.exp();
        let sh = ht.sqrt();
        let zt = (row.log_return - rf - p.lambda * sh + 0.5 * ht) / sh;
        h.push(ht);
        z.push(zt);
        ll_r.push(-0.5 * (LN_2PI + log_h + zt * zt));
        log_h = p.omega + p.beta * log_h + p.tau_fn(zt);
        guard_log_h(log_h, series, t)?;
    }
    h.push(log_h.exp());
    Ok(FilterOutput {
        h,
        z,
        u: None,
        ll_r,
        ll_x: None,
    })
}

/// GARCH(1,1) filter `h' = w + b h + a h z^2`.
pub fn filter_g(p: &GParams, series: &MarketSeries, h_init: f64) -> Result<FilterOutput> {
    check_h_init(h_init)?;
    let n = series.len();
    let rf = series.risk_free_rate();
    let mut h = Vec::with_capacity(n + 1);
    let mut z = Vec::with_capacity(n);
    let mut ll_r = Vec::with_capacity(n);
    let mut ht = h_init;
    for (t, row) in series.rows().iter().enumerate() {
        let sh = ht.sqrt();
        let zt = (row.log_return - rf - p.lambda * sh + 0.5 * ht) / sh;
        h.push(ht);
        z.push(zt);
        ll_r.push(-0.5 * (LN_2PI + ht.ln() + zt * zt));
        ht = p.omega + p.beta * ht + p.alpha * ht * zt * zt;
        guard_h(ht, series, t)?;
    }
    h.push(ht);
    Ok(FilterOutput {
        h,
        z,
        u: None,
        ll_r,
        ll_x: None,
    })
}

/// Heston-Nandi filter `h' = w + b h + a (z - d sqrt(h))^2` with return drift
/// `r + lambda h - h/2`. Identical for both SDF variants.
pub fn filter_hn(p: &HNParams, series: &MarketSeries, h_init: f64) -> Result<FilterOutput> {
    check_h_init(h_init)?;
    let n = series.len();
    let rf = series.risk_free_rate();
    let mut h = Vec::with_capacity(n + 1);
    let mut z = Vec::with_capacity(n);
    let mut ll_r = Vec::with_capacity(n);
    let mut ht = h_init;
    for (t, row) in series.rows().iter().enumerate() {
        let sh = ht.sqrt();
        let zt = (row.log_return - rf - p.lambda * ht + 0.5 * ht) / sh;
        h.push(ht);
        z.push(zt);
        ll_r.push(-0.5 * (LN_2PI + ht.ln() + zt * zt));
        let e = zt - p.delta * sh;
        ht = p.omega + p.beta * ht + p.alpha * e * e;
        guard_h(ht, series, t)?;
    }
    h.push(ht);
    Ok(FilterOutput {
        h,
        z,
        u: None,
        ll_r,
        ll_x: None,
    })
}

pub fn filter(params: &ModelParams, series: &MarketSeries, h_init: f64) -> Result<FilterOutput> {
    match params {
        ModelParams::Rg(p) => filter_rg(p, series, h_init),
        ModelParams::Eg(p) => filter_eg(p, series, h_init),
        ModelParams::G(p) => filter_g(p, series, h_init),
        ModelParams::Hn(p) => filter_hn(p, series, h_init),
    }
}

/// Totals `(ll_r, ll_x)`; `ll_x` only for Realized GARCH.
pub fn loglik_p(params: &ModelParams, series: &MarketSeries, h_init: f64) -> Result<(f64, Option<f64>)> {
    let out = filter(params, series, h_init)?;
    Ok((out.total_ll_r(), out.total_ll_x()))
}
