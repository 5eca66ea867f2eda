//! Closed-form model VIX and the VIX pricing-error likelihood.
//!
//! Log-variance models (RG, EG) satisfy
//! `ln E h_{t+k} = beta^(k-1) ln h_{t+1} + sum_{i<k-1} ln F_i`, so a [`Pricer`]
//! precomputes the cumulative `ln F_i` once per parameter vector and prices
//! each date with `horizon` exponentials. Affine models (G, HN) mean-revert
//! geometrically to a long-run variance.

use std::io::Write;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::data::{annualize_sum, MONTH_DAYS};
use crate::error::{Error, Result};
use crate::filter::{FilterOutput, LN_2PI};
use crate::measure::{hn_dynamics, log_mgf_normal_quadratic, rg_dynamics, Measure, QParamsHN, QParamsRG};
use crate::params::{EGParams, GParams, Leverage, ModelParams, SQRT_2_OVER_PI};

/// Trading days spanned by the VIX.
pub const VIX_HORIZON: usize = MONTH_DAYS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VixQuote {
    pub date: NaiveDate,
    pub model_vix: f64,
    /// `E_t h_{t+k}` for `k = 1..=horizon`, daily variance.
    pub eh_path: Vec<f64>,
}

#[inline]
fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// `ln E exp(a z + b |z|)` for `z = z* - shift`, `z*` standard normal.
fn log_mgf_abs(a: f64, b: f64, shift: f64) -> f64 {
    let neg = a - b;
    let pos = a + b;
    let lo = -neg * shift + 0.5 * neg * neg + norm_cdf(shift - neg).ln();
    let hi = -pos * shift + 0.5 * pos * pos + norm_cdf(pos - shift).ln();
    log_add_exp(lo, hi)
}

#[derive(Debug, Clone, PartialEq)]
enum Kernel {
    Log { beta_pow: Vec<f64>, log_c: Vec<f64> },
    Affine { long_run: f64, persistence: f64, h_scale: f64 },
}

/// Expected-variance engine for one parameter vector and one measure.
#[derive(Debug, Clone, PartialEq)]
pub struct Pricer {
    kernel: Kernel,
    horizon: usize,
}

impl Pricer {
    pub fn new(params: &ModelParams, measure: Measure) -> Result<Self> {
        Self::with_horizon(params, measure, VIX_HORIZON)
    }

    pub fn with_horizon(params: &ModelParams, measure: Measure, horizon: usize) -> Result<Self> {
        match params {
            ModelParams::Rg(p) => Self::rg(&rg_dynamics(p, measure), horizon),
            ModelParams::Eg(p) => {
                let shift = match measure {
                    Measure::P => 0.0,
                    Measure::Q => p.lambda,
                };
                Self::eg(p, shift, horizon)
            }
            ModelParams::G(p) => {
                let shift = match measure {
                    Measure::P => 0.0,
                    Measure::Q => p.lambda,
                };
                Self::g(p, shift, horizon)
            }
            ModelParams::Hn(p) => Self::hn(&hn_dynamics(p, measure)?, horizon),
        }
    }

    fn log_kernel(beta: f64, horizon: usize, log_f: impl Fn(usize, f64) -> Result<f64>) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::Contract("horizon must be positive".into()));
        }
        let mut beta_pow = Vec::with_capacity(horizon);
        let mut log_c = Vec::with_capacity(horizon);
        let mut bp = 1.0;
        let mut c = 0.0;
        for i in 0..horizon {
            beta_pow.push(bp);
            log_c.push(c);
            if i + 1 < horizon {
                c += log_f(i, bp)?;
                if !c.is_finite() {
                    return Err(Error::Pricing(format!("non-finite F_{i}")));
                }
            }
            bp *= beta;
        }
        Ok(Pricer {
            kernel: Kernel::Log { beta_pow, log_c },
            horizon,
        })
    }

    /// Realized GARCH under the supplied dynamics (use [`QParamsRG::physical`] for P).
    pub fn rg(q: &QParamsRG, horizon: usize) -> Result<Self> {
        let gs2 = (q.gamma * q.sigma).powi(2);
        Self::log_kernel(q.beta, horizon, |i, s| {
            let common = 0.5 * s * s * gs2;
            match q.leverage {
                Leverage::Quadratic => {
                    let m = log_mgf_normal_quadratic(s * q.tau1_q, s * q.tau2)
                        .map_err(|_| Error::Pricing(format!("1 - 2 beta^{i} tau2 <= 0: F_{i} diverges")))?;
                    Ok(s * (q.omega_q - q.tau2) + common + m)
                }
                Leverage::Absolute => Ok(s * (q.omega_q - q.tau2 * SQRT_2_OVER_PI)
                    + common
                    + log_mgf_abs(s * q.tau1_q, s * q.tau2, q.z_shift)),
            }
        })
    }

    /// EGARCH with return shock `z = z* - shift` (`shift = lambda` under Q, 0 under P).
    pub fn eg(p: &EGParams, shift: f64, horizon: usize) -> Result<Self> {
        Self::log_kernel(p.beta, horizon, |_, s| {
            Ok(s * (p.omega - p.tau2 * SQRT_2_OVER_PI) + log_mgf_abs(s * p.tau1, s * p.tau2, shift))
        })
    }

    /// GARCH(1,1) with return shock `z = z* - shift`; persistence `beta + alpha (1 + shift^2)`.
    pub fn g(p: &GParams, shift: f64, horizon: usize) -> Result<Self> {
        let persistence = p.beta + p.alpha * (1.0 + shift * shift);
        if persistence >= 1.0 {
            return Err(Error::Pricing(format!("GARCH persistence {persistence} >= 1")));
        }
        Self::affine(p.omega / (1.0 - persistence), persistence, 1.0, horizon)
    }

    pub fn hn(q: &QParamsHN, horizon: usize) -> Result<Self> {
        Self::affine(q.long_run_variance()?, q.persistence, q.h_scale, horizon)
    }

    fn affine(long_run: f64, persistence: f64, h_scale: f64, horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::Contract("horizon must be positive".into()));
        }
        if !long_run.is_finite() {
            return Err(Error::Pricing("non-finite long-run variance".into()));
        }
        Ok(Pricer {
            kernel: Kernel::Affine {
                long_run,
                persistence,
                h_scale,
            },
            horizon,
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    fn check_h(h_next: f64) -> Result<()> {
        if h_next.is_finite() && h_next > 0.0 {
            Ok(())
        } else {
            Err(Error::Contract(format!("h_next = {h_next} must be positive")))
        }
    }

    /// `E h_{t+k}`, `k = 1..=horizon`, from the filtered `h_{t+1}`.
    pub fn expected_path(&self, h_next: f64) -> Result<Vec<f64>> {
        Self::check_h(h_next)?;
        let path: Vec<f64> = match &self.kernel {
            Kernel::Log { beta_pow, log_c } => {
                let lh = h_next.ln();
                std::iter::once(h_next)
                    .chain(beta_pow.iter().zip(log_c).skip(1).map(|(b, c)| (b * lh + c).exp()))
                    .collect()
            }
            Kernel::Affine {
                long_run,
                persistence,
                h_scale,
            } => {
                let h = h_next * h_scale;
                let mut pk = 1.0;
                (0..self.horizon)
                    .map(|_| {
                        let v = long_run + pk * (h - long_run);
                        pk *= persistence;
                        v
                    })
                    .collect()
            }
        };
        if let Some(k) = path.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Pricing(format!(
                "expected variance {} at step {} is not positive and finite",
                path[k],
                k + 1
            )));
        }
        Ok(path)
    }

    pub fn vix(&self, h_next: f64) -> Result<f64> {
        let sum: f64 = self.expected_path(h_next)?.iter().sum();
        Ok(annualize_sum(sum, self.horizon))
    }

    pub fn quote(&self, date: NaiveDate, h_next: f64) -> Result<VixQuote> {
        let eh_path = self.expected_path(h_next)?;
        let model_vix = annualize_sum(eh_path.iter().sum(), self.horizon);
        Ok(VixQuote {
            date,
            model_vix,
            eh_path,
        })
    }

    /// Model VIX for every filtered date, priced off `h[t + 1]`.
    pub fn price_filtered(&self, out: &FilterOutput) -> Result<Vec<f64>> {
        (0..out.len()).map(|t| self.vix(out.h_next(t))).collect()
    }
}

pub fn expected_h_path_rg(q: &QParamsRG, h_next: f64, horizon: usize) -> Result<Vec<f64>> {
    Pricer::rg(q, horizon)?.expected_path(h_next)
}

pub fn vix_rg(q: &QParamsRG, h_next: f64) -> Result<f64> {
    Pricer::rg(q, VIX_HORIZON)?.vix(h_next)
}

/// Risk-neutral EGARCH VIX.
pub fn vix_eg(p: &EGParams, h_next: f64) -> Result<f64> {
    Pricer::eg(p, p.lambda, VIX_HORIZON)?.vix(h_next)
}

/// Risk-neutral GARCH VIX.
pub fn vix_g(p: &GParams, h_next: f64) -> Result<f64> {
    Pricer::g(p, p.lambda, VIX_HORIZON)?.vix(h_next)
}

/// Heston-Nandi VIX from already-mapped dynamics, ignoring `h_scale`.
pub fn vix_hn(q: &QParamsHN, h_next: f64) -> Result<f64> {
    let mut q = *q;
    q.h_scale = 1.0;
    Pricer::hn(&q, VIX_HORIZON)?.vix(h_next)
}

/// Variance-dependent Heston-Nandi VIX from the starred variance `h* = eta h`.
pub fn vix_hnvd(q: &QParamsHN, h_next_starred: f64) -> Result<f64> {
    vix_hn(q, h_next_starred)
}

/// Distribution of the VIX pricing error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorSpec {
    /// `VIX = VIX_model + e`, `e ~ N(0, sigma^2)`
    #[default]
    Additive,
    /// `VIX = VIX_model * eta`, `ln eta ~ N(-sigma^2 / 2, sigma^2)`
    Multiplicative,
}

impl std::str::FromStr for ErrorSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "additive" => Ok(ErrorSpec::Additive),
            "multiplicative" => Ok(ErrorSpec::Multiplicative),
            other => Err(Error::Contract(format!("unknown error spec '{other}'"))),
        }
    }
}

fn check_vix_inputs(model: &[f64], market: &[f64], spec: ErrorSpec) -> Result<()> {
    if model.len() != market.len() {
        return Err(Error::Contract(format!(
            "model and market VIX lengths differ ({} vs {})",
            model.len(),
            market.len()
        )));
    }
    if spec == ErrorSpec::Multiplicative && model.iter().chain(market).any(|v| !(*v > 0.0)) {
        return Err(Error::Contract("multiplicative errors need positive VIX levels".into()));
    }
    Ok(())
}

/// Per-date log-likelihood contributions. The multiplicative form is a
/// density for VIX itself (log-VIX density minus `ln VIX`), so it is on the
/// same footing as the additive form.
pub fn loglik_vix_terms(model: &[f64], market: &[f64], sigma_vix: f64, spec: ErrorSpec) -> Result<Vec<f64>> {
    check_vix_inputs(model, market, spec)?;
    if !(sigma_vix > 0.0 && sigma_vix.is_finite()) {
        return Err(Error::Contract(format!("sigma_vix = {sigma_vix} must be positive")));
    }
    let s2 = sigma_vix * sigma_vix;
    let c = LN_2PI + s2.ln();
    Ok(match spec {
        ErrorSpec::Additive => model
            .iter()
            .zip(market)
            .map(|(m, v)| -0.5 * (c + (v - m).powi(2) / s2))
            .collect(),
        ErrorSpec::Multiplicative => model
            .iter()
            .zip(market)
            .map(|(m, v)| {
                let e = v.ln() - m.ln() + 0.5 * s2;
                -0.5 * (c + e * e / s2) - v.ln()
            })
            .collect(),
    })
}

pub fn loglik_vix(model: &[f64], market: &[f64], sigma_vix: f64, spec: ErrorSpec) -> Result<f64> {
    Ok(loglik_vix_terms(model, market, sigma_vix, spec)?.iter().sum())
}

/// Maximizer of [`loglik_vix`] over `sigma_vix`.
pub fn profile_sigma_vix(model: &[f64], market: &[f64], spec: ErrorSpec) -> Result<f64> {
    check_vix_inputs(model, market, spec)?;
    if model.is_empty() {
        return Err(Error::InsufficientData("no VIX observations".into()));
    }
    let n = model.len() as f64;
    let s2 = match spec {
        ErrorSpec::Additive => model.iter().zip(market).map(|(m, v)| (v - m).powi(2)).sum::<f64>() / n,
        ErrorSpec::Multiplicative => {
            let m2 = model.iter().zip(market).map(|(m, v)| (v.ln() - m.ln()).powi(2)).sum::<f64>() / n;
            2.0 * ((1.0 + m2).sqrt() - 1.0)
        }
    };
    if s2 > 0.0 {
        Ok(s2.sqrt())
    } else {
        Err(Error::Degenerate("model matches market exactly: sigma_vix is zero".into()))
    }
}

/// CSV with columns `date,market_vix,model_vix,pricing_error`.
pub fn write_priced_csv<W: Write>(dates: &[NaiveDate], market: &[f64], model: &[f64], writer: W) -> Result<()> {
    if dates.len() != market.len() || dates.len() != model.len() {
        return Err(Error::Contract("priced series columns differ in length".into()));
    }
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["date", "market_vix", "model_vix", "pricing_error"])?;
    for ((d, v), m) in dates.iter().zip(market).zip(model) {
        wtr.write_record([d.format("%Y-%m-%d").to_string(), v.to_string(), m.to_string(), (m - v).to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::{map_hn_lrnvr, map_hn_vd, map_rg_to_q, mgf_normal_quadratic};
    use crate::params::{sp500_2004_2018, HNParams, RGParams};

    fn flat_rg() -> RGParams {
        let mut p = sp500_2004_2018::rg();
        p.tau1 = 0.0;
        p.tau2 = 0.0;
        p.gamma = 0.0;
        p.lambda = 0.0;
        p.xi = 0.0;
        p.omega = (1.0 - p.beta) * 1e-4f64.ln();
        p
    }

    #[test]
    fn degenerate_params_give_annualized_constant() {
        let target = 100.0 * (252.0f64 * 1e-4).sqrt();
        assert!((target - 15.8745).abs() < 1e-4);

        let rg = flat_rg();
        let mut eg = sp500_2004_2018::eg();
        eg.tau1 = 0.0;
        eg.tau2 = 0.0;
        eg.lambda = 0.0;
        eg.omega = (1.0 - eg.beta) * 1e-4f64.ln();
        let mut g = sp500_2004_2018::g();
        g.alpha = 0.0;
        g.omega = (1.0 - g.beta) * 1e-4;
        // HN with alpha -> 0 keeps persistence beta and long-run (omega + alpha)/(1 - beta)
        let hn = HNParams {
            lambda: 0.0,
            omega: 1e-4 * 0.1 - 1e-12,
            beta: 0.9,
            alpha: 1e-12,
            delta: 0.0,
            sigma_vix: 1.0,
            eta: None,
        };
        let mut hnvd = hn;
        hnvd.eta = Some(1.0);
        for params in [
            ModelParams::Rg(rg),
            ModelParams::Eg(eg),
            ModelParams::G(g),
            ModelParams::Hn(hn),
            ModelParams::Hn(hnvd),
        ] {
            for m in [Measure::P, Measure::Q] {
                let v = Pricer::new(&params, m).unwrap().vix(1e-4).unwrap();
                assert!((v - target).abs() < 1e-9, "{:?} {m:?}: {v}", params.family());
            }
        }
    }

    #[test]
    fn horizon_one_is_annualized_h_next() {
        for params in sp500_2004_2018::all() {
            let pr = Pricer::with_horizon(&params, Measure::Q, 1).unwrap();
            let h = 2.3e-4;
            let scale = match params {
                ModelParams::Hn(p) => p.eta.unwrap_or(1.0),
                _ => 1.0,
            };
            assert!((pr.vix(h).unwrap() - 100.0 * (252.0 * h * scale).sqrt()).abs() < 1e-10);
        }
    }

    #[test]
    fn second_step_equals_single_mgf_composition() {
        let p = sp500_2004_2018::rg();
        let q = map_rg_to_q(&p);
        let h = 1e-4;
        let path = expected_h_path_rg(&q, h, 2).unwrap();
        assert_eq!(path[0], h);
        let f0 = (q.omega_q - q.tau2).exp()
            * mgf_normal_quadratic(q.tau1_q, q.tau2).unwrap()
            * (0.5 * (q.gamma * q.sigma).powi(2)).exp();
        assert!((path[1] / (h.powf(q.beta) * f0) - 1.0).abs() < 1e-13);
    }

    #[test]
    fn divergent_mgf_names_step() {
        let mut p = sp500_2004_2018::rg();
        p.tau2 = 0.6;
        match Pricer::rg(&map_rg_to_q(&p), 22) {
            Err(Error::Pricing(msg)) => assert!(msg.contains("F_0"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn trivial_sdf_means_zero_vrp() {
        let mut p = sp500_2004_2018::rg();
        p.lambda = 0.0;
        p.xi = 0.0;
        let params = ModelParams::Rg(p);
        let q = Pricer::new(&params, Measure::Q).unwrap().vix(1.3e-4).unwrap();
        let pv = Pricer::new(&params, Measure::P).unwrap().vix(1.3e-4).unwrap();
        assert_eq!(q, pv);
    }

    #[test]
    fn hnvd_with_unit_eta_equals_hn() {
        let p = sp500_2004_2018::hn();
        let mut vd = p;
        vd.eta = Some(1.0);
        for h in [1e-5, 1e-4, 7e-4] {
            let a = vix_hn(&map_hn_lrnvr(&p), h).unwrap();
            let b = vix_hnvd(&map_hn_vd(&vd).unwrap(), h).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn eg_with_symmetric_shift_zero_matches_direct_sum() {
        // Under P with tau1 = 0, the |z| part is a centred folded normal.
        let mut p = sp500_2004_2018::eg();
        p.tau1 = 0.0;
        let pr = Pricer::eg(&p, 0.0, 2).unwrap();
        let h = 1e-4;
        let b = p.tau2;
        // E exp(b|z|) = 2 exp(b^2/2) Phi(b)
        let f0 = (p.omega - b * SQRT_2_OVER_PI).exp() * 2.0 * (0.5 * b * b).exp() * norm_cdf(b);
        let path = pr.expected_path(h).unwrap();
        assert!((path[1] / (h.powf(p.beta) * f0) - 1.0).abs() < 1e-13);
    }

    #[test]
    fn g_affine_path() {
        let p = sp500_2004_2018::g();
        let pi = p.beta + p.alpha * (1.0 + p.lambda * p.lambda);
        let lr = p.omega / (1.0 - pi);
        let path = Pricer::g(&p, p.lambda, 22).unwrap().expected_path(2e-4).unwrap();
        for (k, v) in path.iter().enumerate() {
            assert!((v - (lr + pi.powi(k as i32) * (2e-4 - lr))).abs() < 1e-18);
        }
        let mut bad = p;
        bad.lambda = 1.0;
        assert!(matches!(vix_g(&bad, 1e-4), Err(Error::Pricing(_))));
    }

    #[test]
    fn additive_loglik_against_density_oracle() {
        let model: [f64; 5] = [18.0, 20.5, 15.2, 30.1, 22.2];
        let market = [17.1, 21.0, 16.0, 28.5, 22.2];
        let s = 1.7;
        let oracle: f64 = model
            .iter()
            .zip(&market)
            .map(|(m, v)| {
                let d = (-(v - m) * (v - m) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
                d.ln()
            })
            .sum();
        let ll = loglik_vix(&model, &market, s, ErrorSpec::Additive).unwrap();
        assert!((ll - oracle).abs() < 1e-12);
        let exact = loglik_vix(&model, &model, 1.0, ErrorSpec::Additive).unwrap();
        assert!((exact + 2.5 * LN_2PI).abs() < 1e-12);
    }

    #[test]
    fn multiplicative_loglik_is_lognormal_density() {
        let model: [f64; 3] = [18.0, 20.5, 15.2];
        let market: [f64; 3] = [17.1, 21.0, 16.0];
        let s: f64 = 0.1;
        let oracle: f64 = model
            .iter()
            .zip(&market)
            .map(|(m, v)| {
                let mu = m.ln() - 0.5 * s * s;
                let z = (v.ln() - mu) / s;
                ((-0.5 * z * z).exp() / (v * s * (2.0 * std::f64::consts::PI).sqrt())).ln()
            })
            .sum();
        let ll = loglik_vix(&model, &market, s, ErrorSpec::Multiplicative).unwrap();
        assert!((ll - oracle).abs() < 1e-12);
        assert!(matches!(
            loglik_vix(&[1.0], &[-1.0], s, ErrorSpec::Multiplicative),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn profiled_sigma_maximizes() {
        let model: [f64; 5] = [18.0, 20.5, 15.2, 30.1, 22.2];
        let market = [17.1, 21.0, 16.0, 28.5, 23.2];
        for spec in [ErrorSpec::Additive, ErrorSpec::Multiplicative] {
            let s = profile_sigma_vix(&model, &market, spec).unwrap();
            let f = |x: f64| loglik_vix(&model, &market, x, spec).unwrap();
            assert!(f(s) >= f(s * 1.001) && f(s) >= f(s * 0.999), "{spec:?}");
        }
        assert!(matches!(
            profile_sigma_vix(&model, &model, ErrorSpec::Additive),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn priced_csv() {
        let d = [NaiveDate::from_ymd_opt(2020, 1, 2).unwrap()];
        let mut buf = Vec::new();
        write_priced_csv(&d, &[20.0], &[21.5], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "date,market_vix,model_vix,pricing_error\n2020-01-02,20,21.5,1.5\n"
        );
    }
}
