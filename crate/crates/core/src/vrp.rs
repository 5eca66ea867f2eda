//! Volatility risk premium: model-free market measures and the model-implied series.

use std::io::Write;

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{annualize_sum, build_rvcc, trailing_annualized_vol, MarketSeries, MONTH_DAYS, TRADING_DAYS_PER_YEAR};
use crate::error::{Error, Result};
use crate::filter::{filter, HInit};
use crate::measure::Measure;
use crate::params::ModelParams;
use crate::vix::Pricer;

/// Fewest regression rows accepted for a HAR fit.
pub const MIN_HAR_OBS: usize = 100;

/// `VIX_t` minus the trailing 22-day realized volatility, aligned with the
/// input; `None` where fewer than 22 trailing values exist.
pub fn vrp_market_martingale(vix: &[f64], rvcc: &[f64]) -> Result<Vec<Option<f64>>> {
    if vix.len() != rvcc.len() {
        return Err(Error::Contract("vix and rvcc must have equal length".into()));
    }
    let vol = trailing_annualized_vol(rvcc);
    let skipped = vol.iter().filter(|v| v.is_none()).count();
    if skipped > 0 {
        log::warn!("market VRP skipped for {skipped} dates with fewer than {MONTH_DAYS} trailing RVcc values");
    }
    Ok(vix.iter().zip(vol).map(|(v, p)| p.map(|p| v - p)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OlsFit {
    pub coef: Vec<f64>,
    pub r2: f64,
}

/// Least squares of `y` on the rows of `x`; an intercept column must be supplied
/// by the caller. Fails on a rank-deficient design.
pub fn ols(x: &[Vec<f64>], y: &[f64]) -> Result<OlsFit> {
    let n = x.len();
    let k = x.first().map_or(0, Vec::len);
    if n != y.len() || n < k || k == 0 || x.iter().any(|r| r.len() != k) {
        return Err(Error::Contract("ols needs a rectangular design with at least as many rows as columns".into()));
    }
    let xm = DMatrix::from_fn(n, k, |i, j| x[i][j]);
    let yv = DVector::from_column_slice(y);
    // column scaling so the rank test is unit-free
    let scale: Vec<f64> = (0..k).map(|j| xm.column(j).norm()).collect();
    if scale.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
        return Err(Error::Degenerate("design has a zero or non-finite column".into()));
    }
    let xs = DMatrix::from_fn(n, k, |i, j| xm[(i, j)] / scale[j]);
    let svd = xs.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 1e-10 * smax) {
        return Err(Error::Degenerate(format!(
            "rank-deficient design (singular value ratio {:.3e})",
            smin / smax
        )));
    }
    let b = svd
        .solve(&yv, 0.0)
        .map_err(|e| Error::Degenerate(format!("least squares failed: {e}")))?;
    let coef: Vec<f64> = (0..k).map(|j| b[j] / scale[j]).collect();
    let fitted = &xm * DVector::from_column_slice(&coef);
    let ybar = yv.mean();
    let ss_res: f64 = (&yv - &fitted).norm_squared();
    let ss_tot: f64 = yv.iter().map(|v| (v - ybar).powi(2)).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { f64::NAN };
    Ok(OlsFit { coef, r2 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HarFit {
    pub beta0: f64,
    pub beta_d: f64,
    pub beta_w: f64,
    pub beta_m: f64,
    /// Inclusive range of regression dates `s` (target `RVcc_{s+1:s+22}`).
    pub window: (usize, usize),
    pub r2: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Daily, weekly and monthly regressors at `t` (requires `t >= 21`).
fn har_regressors(rvcc: &[f64], t: usize) -> [f64; 3] {
    [rvcc[t], mean(&rvcc[t - 4..=t]), mean(&rvcc[t + 1 - MONTH_DAYS..=t])]
}

/// Fits the HAR regression for a forecast made at date index `t`, using only
/// regression dates `s` in `[t - window, t - embargo]` so every target is
/// observed by `t`.
pub fn har_fit(rvcc: &[f64], t: usize, window: usize, embargo: usize) -> Result<HarFit> {
    if embargo < MONTH_DAYS {
        return Err(Error::Contract(format!("embargo {embargo} shorter than the {MONTH_DAYS}-day target")));
    }
    if t >= rvcc.len() || t < embargo {
        return Err(Error::InsufficientData(format!("no HAR sample ends before index {t}")));
    }
    let hi = t - embargo;
    let lo = t.saturating_sub(window).max(MONTH_DAYS - 1);
    if hi < lo || hi + 1 - lo < MIN_HAR_OBS {
        return Err(Error::InsufficientData(format!(
            "HAR fit at index {t} has fewer than {MIN_HAR_OBS} usable rows"
        )));
    }
    let mut x = Vec::with_capacity(hi + 1 - lo);
    let mut y = Vec::with_capacity(hi + 1 - lo);
    for s in lo..=hi {
        let [d, w, m] = har_regressors(rvcc, s);
        x.push(vec![1.0, d, w, m]);
        y.push(mean(&rvcc[s + 1..=s + MONTH_DAYS]));
    }
    let fit = ols(&x, &y)?;
    if fit.coef.iter().any(|c| !c.is_finite()) {
        return Err(Error::Degenerate("non-finite HAR coefficients".into()));
    }
    Ok(HarFit {
        beta0: fit.coef[0],
        beta_d: fit.coef[1],
        beta_w: fit.coef[2],
        beta_m: fit.coef[3],
        window: (lo, hi),
        r2: fit.r2,
    })
}

/// Forecast of the mean daily RVcc over the next 22 days from regressors at
/// `t`. Negative forecasts are floored at the smallest positive trailing value.
pub fn har_forecast(fit: &HarFit, rvcc: &[f64], t: usize) -> Result<f64> {
    if t + 1 < MONTH_DAYS || t >= rvcc.len() {
        return Err(Error::InsufficientData(format!("HAR regressors unavailable at index {t}")));
    }
    let [d, w, m] = har_regressors(rvcc, t);
    let f = fit.beta0 + fit.beta_d * d + fit.beta_w * w + fit.beta_m * m;
    if f > 0.0 {
        return Ok(f);
    }
    let floor = rvcc[t + 1 - MONTH_DAYS..=t]
        .iter()
        .copied()
        .filter(|v| *v > 0.0)
        .fold(f64::INFINITY, f64::min);
    if !floor.is_finite() {
        return Err(Error::Degenerate(format!("no positive trailing RVcc at index {t}")));
    }
    log::warn!("HAR forecast {f:.3e} at index {t} floored to {floor:.3e}");
    Ok(floor)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HarOptions {
    pub window: usize,
    pub embargo: usize,
    /// Days between refits; 1 refits daily.
    pub refit_every: usize,
}

impl Default for HarOptions {
    fn default() -> Self {
        HarOptions {
            window: 750,
            embargo: MONTH_DAYS,
            refit_every: MONTH_DAYS,
        }
    }
}

/// `VIX_t - 100 sqrt(252 * HAR forecast)` with rolling fits; `None` until the
/// first fit is available.
pub fn vrp_market_har(vix: &[f64], rvcc: &[f64], opts: &HarOptions) -> Result<Vec<Option<f64>>> {
    if vix.len() != rvcc.len() {
        return Err(Error::Contract("vix and rvcc must have equal length".into()));
    }
    if opts.refit_every == 0 {
        return Err(Error::Contract("refit_every must be positive".into()));
    }
    let first = (MONTH_DAYS - 1) + MIN_HAR_OBS - 1 + opts.embargo;
    if first >= rvcc.len() {
        log::warn!("series too short for a HAR fit; HAR market VRP unavailable");
        return Ok(vec![None; rvcc.len()]);
    }
    let refits: Vec<usize> = (first..rvcc.len()).step_by(opts.refit_every).collect();
    let fits: Vec<HarFit> = refits
        .par_iter()
        .map(|&t| har_fit(rvcc, t, opts.window, opts.embargo))
        .collect::<Result<_>>()?;
    let mut out = vec![None; rvcc.len()];
    for (k, fit) in fits.iter().enumerate() {
        let end = refits.get(k + 1).copied().unwrap_or(rvcc.len());
        for t in refits[k]..end {
            let f = har_forecast(fit, rvcc, t)?;
            out[t] = Some(vix[t] - 100.0 * (TRADING_DAYS_PER_YEAR * f).sqrt());
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelVrp {
    pub q_vol: f64,
    pub p_vol: f64,
    pub model_vrp: f64,
}

/// Annualized one-month expected volatility under Q and P at each `h_{t+1}`.
pub fn vrp_model(params: &ModelParams, h_next: &[f64]) -> Result<Vec<ModelVrp>> {
    let q = Pricer::new(params, Measure::Q)?;
    let p = Pricer::new(params, Measure::P)?;
    h_next
        .par_iter()
        .map(|&h| {
            let q_vol = annualize_sum(q.expected_path(h)?.iter().sum(), q.horizon());
            let p_vol = annualize_sum(p.expected_path(h)?.iter().sum(), p.horizon());
            Ok(ModelVrp {
                q_vol,
                p_vol,
                model_vrp: q_vol - p_vol,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VrpRow {
    pub date: NaiveDate,
    pub market_vrp_martingale: Option<f64>,
    pub market_vrp_har: Option<f64>,
    pub model_vrp: f64,
    pub p_vol: f64,
    pub q_vol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VrpSeries {
    pub rows: Vec<VrpRow>,
}

impl VrpSeries {
    /// Filters the series with fixed parameters and assembles both market
    /// measures next to the model-implied premium.
    pub fn build(params: &ModelParams, series: &MarketSeries, h_init: HInit, har: &HarOptions) -> Result<Self> {
        let h0 = h_init.resolve(params.family().is_log_variance(), series)?;
        let out = filter(params, series, h0)?;
        let h_next: Vec<f64> = (0..out.len()).map(|t| out.h_next(t)).collect();
        let model = vrp_model(params, &h_next)?;
        let rvcc = build_rvcc(series);
        let vix = series.vix();
        let mart = vrp_market_martingale(&vix, &rvcc)?;
        let harv = vrp_market_har(&vix, &rvcc, har)?;
        let rows = series
            .dates()
            .into_iter()
            .enumerate()
            .map(|(t, date)| VrpRow {
                date,
                market_vrp_martingale: mart[t],
                market_vrp_har: harv[t],
                model_vrp: model[t].model_vrp,
                p_vol: model[t].p_vol,
                q_vol: model[t].q_vol,
            })
            .collect();
        Ok(VrpSeries { rows })
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["date", "market_vrp_martingale", "market_vrp_har", "model_vrp", "p_vol", "q_vol"])?;
        for r in &self.rows {
            wtr.write_record([
                r.date.format("%Y-%m-%d").to_string(),
                opt(r.market_vrp_martingale),
                opt(r.market_vrp_har),
                r.model_vrp.to_string(),
                r.p_vol.to_string(),
                r.q_vol.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::sp500_2004_2018;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn martingale_constructed_case() {
        let daily = 0.15f64.powi(2) / 252.0;
        let rvcc = vec![daily; 30];
        let vix = vec![20.0; 30];
        let v = vrp_market_martingale(&vix, &rvcc).unwrap();
        assert!(v[..21].iter().all(Option::is_none));
        for x in &v[21..] {
            assert!((x.unwrap() - 5.0).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn martingale_translation_equivariant(seed in 0u64..1000, c in -10.0f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rvcc: Vec<f64> = (0..40).map(|_| rng.gen_range(1e-5..1e-3)).collect();
            let vix: Vec<f64> = (0..40).map(|_| rng.gen_range(10.0..40.0)).collect();
            let shifted: Vec<f64> = vix.iter().map(|v| v + c).collect();
            let a = vrp_market_martingale(&vix, &rvcc).unwrap();
            let b = vrp_market_martingale(&shifted, &rvcc).unwrap();
            for (x, y) in a.iter().zip(&b) {
                match (x, y) {
                    (Some(x), Some(y)) => prop_assert!((y - x - c).abs() < 1e-9),
                    (None, None) => {}
                    _ => prop_assert!(false),
                }
            }
        }
    }

    #[test]
    fn ols_exact_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut x = vec![];
        let mut y = vec![];
        for _ in 0..50 {
            let d: f64 = rng.gen();
            x.push(vec![1.0, d, rng.gen::<f64>(), rng.gen::<f64>()]);
            y.push(d);
        }
        let f = ols(&x, &y).unwrap();
        assert!((f.coef[1] - 1.0).abs() < 1e-10);
        assert!(f.coef[0].abs() < 1e-10 && f.coef[2].abs() < 1e-10 && f.coef[3].abs() < 1e-10);
        assert!((f.r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_series_is_rank_deficient() {
        let rvcc = vec![1e-4; 400];
        assert!(matches!(har_fit(&rvcc, 399, 750, 22), Err(Error::Degenerate(_))));
    }

    #[test]
    fn short_history_is_insufficient() {
        let rvcc = vec![1e-4; 100];
        assert!(matches!(har_fit(&rvcc, 99, 750, 22), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn intercept_only_reproduces_target_mean() {
        let y = [1.0, 3.0, 2.0, 6.0];
        let x: Vec<Vec<f64>> = y.iter().map(|_| vec![1.0]).collect();
        let f = ols(&x, &y).unwrap();
        assert!((f.coef[0] - 3.0).abs() < 1e-14);
    }

    fn ar1_rvcc(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = 1e-4;
        (0..n)
            .map(|_| {
                v = 2e-5 + 0.8 * v + 2e-5 * (rng.gen::<f64>() - 0.5);
                v
            })
            .collect()
    }

    #[test]
    fn embargo_blocks_look_ahead() {
        let rvcc = ar1_rvcc(1200, 4);
        let t = 1000;
        let a = har_fit(&rvcc, t, 750, 22).unwrap();
        let mut perturbed = rvcc.clone();
        for v in &mut perturbed[t + 1..] {
            *v *= 3.0;
        }
        let b = har_fit(&perturbed, t, 750, 22).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.window, (250, 978));
    }

    #[test]
    fn trivial_sdf_gives_zero_premium() {
        let mut p = sp500_2004_2018::rg();
        p.lambda = 0.0;
        p.xi = 0.0;
        let v = vrp_model(&ModelParams::Rg(p), &[5e-5, 1e-4, 4e-4]).unwrap();
        assert!(v.iter().all(|r| r.model_vrp.abs() < 1e-10));
        assert!(v.iter().all(|r| r.model_vrp == r.q_vol - r.p_vol));
    }

    #[test]
    fn table_parameters_give_positive_premium() {
        let params = ModelParams::Rg(sp500_2004_2018::rg());
        let q = Pricer::new(&params, Measure::Q).unwrap();
        let p = Pricer::new(&params, Measure::P).unwrap();
        for &h in &[1e-5, 5e-5, 1e-4, 1e-3] {
            let (eq, ep) = (q.expected_path(h).unwrap(), p.expected_path(h).unwrap());
            assert!(eq.iter().zip(&ep).skip(1).all(|(a, b)| a > b));
        }
        assert!(vrp_model(&params, &[1e-5, 1e-4, 1e-3]).unwrap().iter().all(|r| r.model_vrp > 0.0));
    }
}
