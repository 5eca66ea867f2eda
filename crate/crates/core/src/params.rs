//! Parameter records for the five model families.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Model family identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// Realized GARCH with the two-shock exponentially affine SDF.
    Rg,
    /// EGARCH with a return-shock measure change.
    Eg,
    /// GARCH(1,1) with a return-shock measure change.
    G,
    /// Heston-Nandi GARCH under LRNVR.
    Hn,
    /// Heston-Nandi GARCH under the variance-dependent SDF.
    HnVd,
}

impl Family {
    pub const ALL: [Family; 5] = [Family::Rg, Family::Eg, Family::G, Family::Hn, Family::HnVd];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Rg => "rg",
            Family::Eg => "eg",
            Family::G => "g",
            Family::Hn => "hn",
            Family::HnVd => "hnvd",
        }
    }

    /// Whether the conditional variance recursion is in logs.
    pub fn is_log_variance(self) -> bool {
        matches!(self, Family::Rg | Family::Eg)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rg" => Ok(Family::Rg),
            "eg" => Ok(Family::Eg),
            "g" => Ok(Family::G),
            "hn" => Ok(Family::Hn),
            "hnvd" | "hn_vd" => Ok(Family::HnVd),
            other => Err(Error::Contract(format!("unknown model family '{other}'"))),
        }
    }
}

/// Shape of the return-shock leverage function in the log-variance equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Leverage {
    /// `tau1 z + tau2 (z^2 - 1)`
    #[default]
    Quadratic,
    /// `tau1 z + tau2 (|z| - sqrt(2/pi))`
    Absolute,
}

/// Realized GARCH parameters plus SDF prices and the VIX error scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RGParams {
    pub lambda: f64,
    pub omega: f64,
    pub beta: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub gamma: f64,
    pub kappa: f64,
    pub phi: f64,
    pub delta1: f64,
    pub delta2: f64,
    /// Standard deviation of the measurement shock.
    pub sigma: f64,
    pub xi: f64,
    pub sigma_vix: f64,
    #[serde(default)]
    pub leverage: Leverage,
}

impl RGParams {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda, self.omega, self.beta, self.tau1, self.tau2, self.gamma, self.kappa,
            self.phi, self.delta1, self.delta2, self.sigma, self.xi, self.sigma_vix,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("RG parameters must be finite".into()));
        }
        if self.beta.abs() >= 1.0 {
            return Err(Error::Contract(format!("|beta| = {} must be < 1", self.beta.abs())));
        }
        if self.sigma <= 0.0 || self.sigma_vix <= 0.0 {
            return Err(Error::Contract("sigma and sigma_vix must be positive".into()));
        }
        Ok(())
    }

    /// Return-shock leverage function `tau(z)`.
    #[inline]
    pub fn tau_fn(&self, z: f64) -> f64 {
        match self.leverage {
            Leverage::Quadratic => self.tau1 * z + self.tau2 * (z * z - 1.0),
            Leverage::Absolute => self.tau1 * z + self.tau2 * (z.abs() - SQRT_2_OVER_PI),
        }
    }

    /// Measurement leverage function `delta(z)`.
    #[inline]
    pub fn delta_fn(&self, z: f64) -> f64 {
        self.delta1 * z + self.delta2 * (z * z - 1.0)
    }

    pub fn persistence(&self) -> f64 {
        self.beta
    }

    /// Sign pattern under which the moment results hold. Violations are
    /// reported, not rejected.
    pub fn sign_warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        let positive = [
            ("lambda", self.lambda),
            ("gamma", self.gamma),
            ("sigma", self.sigma),
            ("tau2", self.tau2),
            ("delta2", self.delta2),
        ];
        let negative = [("xi", self.xi), ("tau1", self.tau1), ("delta1", self.delta1)];
        for (name, v) in positive {
            if v <= 0.0 {
                out.push(format!("{name} = {v} is not positive"));
            }
        }
        for (name, v) in negative {
            if v >= 0.0 {
                out.push(format!("{name} = {v} is not negative"));
            }
        }
        out
    }
}

pub const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// EGARCH parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EGParams {
    pub lambda: f64,
    pub omega: f64,
    pub beta: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub sigma_vix: f64,
}

impl EGParams {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda, self.omega, self.beta, self.tau1, self.tau2, self.sigma_vix];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("EG parameters must be finite".into()));
        }
        if self.beta.abs() >= 1.0 {
            return Err(Error::Contract("|beta| must be < 1".into()));
        }
        if self.sigma_vix <= 0.0 {
            return Err(Error::Contract("sigma_vix must be positive".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn tau_fn(&self, z: f64) -> f64 {
        self.tau1 * z + self.tau2 * (z.abs() - SQRT_2_OVER_PI)
    }

    pub fn persistence(&self) -> f64 {
        self.beta
    }
}

/// GARCH(1,1) parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GParams {
    pub lambda: f64,
    pub omega: f64,
    pub beta: f64,
    pub alpha: f64,
    pub sigma_vix: f64,
}

impl GParams {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda, self.omega, self.beta, self.alpha, self.sigma_vix];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("G parameters must be finite".into()));
        }
        if self.omega <= 0.0 || self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::Contract("G needs omega > 0 and alpha, beta >= 0".into()));
        }
        if self.alpha + self.beta >= 1.0 {
            return Err(Error::Contract("G needs alpha + beta < 1".into()));
        }
        if self.sigma_vix <= 0.0 {
            return Err(Error::Contract("sigma_vix must be positive".into()));
        }
        Ok(())
    }

    pub fn persistence(&self) -> f64 {
        self.alpha + self.beta
    }
}

/// Heston-Nandi GARCH parameters. `eta = (1 + 2 alpha xi)^-1` is present only
/// for the variance-dependent SDF variant; `None` means LRNVR.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HNParams {
    /// Equity-risk price per unit of daily variance.
    pub lambda: f64,
    pub omega: f64,
    pub beta: f64,
    pub alpha: f64,
    pub delta: f64,
    pub sigma_vix: f64,
    #[serde(default)]
    pub eta: Option<f64>,
}

impl HNParams {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda, self.omega, self.beta, self.alpha, self.delta, self.sigma_vix];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("HN parameters must be finite".into()));
        }
        if self.alpha <= 0.0 {
            return Err(Error::Contract("HN needs alpha > 0".into()));
        }
        if self.persistence() >= 1.0 {
            return Err(Error::Contract(format!(
                "HN persistence {} must be < 1",
                self.persistence()
            )));
        }
        if let Some(eta) = self.eta {
            if !(eta.is_finite() && eta > 0.0) {
                return Err(Error::Contract("HN_vd needs eta > 0".into()));
            }
        }
        if self.sigma_vix <= 0.0 {
            return Err(Error::Contract("sigma_vix must be positive".into()));
        }
        Ok(())
    }

    /// `beta + alpha delta^2`
    pub fn persistence(&self) -> f64 {
        self.beta + self.alpha * self.delta * self.delta
    }

    /// Variance risk aversion implied by `eta`, for display only.
    pub fn implied_xi(&self) -> Option<f64> {
        self.eta.map(|eta| (1.0 / eta - 1.0) / (2.0 * self.alpha))
    }
}

/// Parameters of any family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum ModelParams {
    Rg(RGParams),
    Eg(EGParams),
    G(GParams),
    Hn(HNParams),
}

impl ModelParams {
    pub fn family(&self) -> Family {
        match self {
            ModelParams::Rg(_) => Family::Rg,
            ModelParams::Eg(_) => Family::Eg,
            ModelParams::G(_) => Family::G,
            ModelParams::Hn(p) if p.eta.is_some() => Family::HnVd,
            ModelParams::Hn(_) => Family::Hn,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelParams::Rg(p) => p.validate(),
            ModelParams::Eg(p) => p.validate(),
            ModelParams::G(p) => p.validate(),
            ModelParams::Hn(p) => p.validate(),
        }
    }

    pub fn sigma_vix(&self) -> f64 {
        match self {
            ModelParams::Rg(p) => p.sigma_vix,
            ModelParams::Eg(p) => p.sigma_vix,
            ModelParams::G(p) => p.sigma_vix,
            ModelParams::Hn(p) => p.sigma_vix,
        }
    }

    pub fn set_sigma_vix(&mut self, value: f64) {
        match self {
            ModelParams::Rg(p) => p.sigma_vix = value,
            ModelParams::Eg(p) => p.sigma_vix = value,
            ModelParams::G(p) => p.sigma_vix = value,
            ModelParams::Hn(p) => p.sigma_vix = value,
        }
    }

    /// Persistence of the conditional variance under the physical measure.
    pub fn persistence(&self) -> f64 {
        match self {
            ModelParams::Rg(p) => p.persistence(),
            ModelParams::Eg(p) => p.persistence(),
            ModelParams::G(p) => p.persistence(),
            ModelParams::Hn(p) => p.persistence(),
        }
    }

    /// Named parameter values in a fixed order (the order used for standard errors).
    pub fn named_values(&self) -> Vec<(&'static str, f64)> {
        match self {
            ModelParams::Rg(p) => vec![
                ("lambda", p.lambda),
                ("omega", p.omega),
                ("beta", p.beta),
                ("tau1", p.tau1),
                ("tau2", p.tau2),
                ("gamma", p.gamma),
                ("kappa", p.kappa),
                ("phi", p.phi),
                ("delta1", p.delta1),
                ("delta2", p.delta2),
                ("sigma", p.sigma),
                ("xi", p.xi),
                ("sigma_vix", p.sigma_vix),
            ],
            ModelParams::Eg(p) => vec![
                ("lambda", p.lambda),
                ("omega", p.omega),
                ("beta", p.beta),
                ("tau1", p.tau1),
                ("tau2", p.tau2),
                ("sigma_vix", p.sigma_vix),
            ],
            ModelParams::G(p) => vec![
                ("lambda", p.lambda),
                ("omega", p.omega),
                ("beta", p.beta),
                ("alpha", p.alpha),
                ("sigma_vix", p.sigma_vix),
            ],
            ModelParams::Hn(p) => {
                let mut v = vec![
                    ("lambda", p.lambda),
                    ("omega", p.omega),
                    ("beta", p.beta),
                    ("alpha", p.alpha),
                    ("delta", p.delta),
                ];
                if let Some(eta) = p.eta {
                    v.push(("eta", eta));
                }
                v.push(("sigma_vix", p.sigma_vix));
                v
            }
        }
    }

    /// Inverse of [`ModelParams::named_values`]: rebuilds a record of the same
    /// family from a value vector in the same order.
    pub fn with_values(&self, values: &[f64]) -> Result<ModelParams> {
        let n = self.named_values().len();
        if values.len() != n {
            return Err(Error::Contract(format!("expected {n} values, got {}", values.len())));
        }
        let v = values;
        Ok(match self {
            ModelParams::Rg(p) => ModelParams::Rg(RGParams {
                lambda: v[0],
                omega: v[1],
                beta: v[2],
                tau1: v[3],
                tau2: v[4],
                gamma: v[5],
                kappa: v[6],
                phi: v[7],
                delta1: v[8],
                delta2: v[9],
                sigma: v[10],
                xi: v[11],
                sigma_vix: v[12],
                leverage: p.leverage,
            }),
            ModelParams::Eg(_) => ModelParams::Eg(EGParams {
                lambda: v[0],
                omega: v[1],
                beta: v[2],
                tau1: v[3],
                tau2: v[4],
                sigma_vix: v[5],
            }),
            ModelParams::G(_) => ModelParams::G(GParams {
                lambda: v[0],
                omega: v[1],
                beta: v[2],
                alpha: v[3],
                sigma_vix: v[4],
            }),
            ModelParams::Hn(p) => ModelParams::Hn(HNParams {
                lambda: v[0],
                omega: v[1],
                beta: v[2],
                alpha: v[3],
                delta: v[4],
                eta: p.eta.map(|_| v[5]),
                sigma_vix: v[n - 1],
            }),
        })
    }
}

/// Full-sample estimates for daily S&P 500 data, January 2004 to December 2018,
/// with `sigma_vix` set to each model's in-sample VIX RMSE (the profile
/// maximizer of the additive VIX likelihood).
pub mod sp500_2004_2018 {
    use super::*;

    pub fn rg() -> RGParams {
        RGParams {
            lambda: 0.015,
            omega: -0.088,
            beta: 0.991,
            tau1: -0.073,
            tau2: 0.012,
            gamma: 0.080,
            kappa: 0.427,
            phi: 1.078,
            delta1: -0.083,
            delta2: 0.129,
            sigma: 0.325f64.sqrt(),
            xi: -1.07,
            sigma_vix: 2.504,
            leverage: Leverage::Quadratic,
        }
    }

    pub fn eg() -> EGParams {
        EGParams {
            lambda: 0.153,
            omega: -0.086,
            beta: 0.990,
            tau1: -0.062,
            tau2: 0.096,
            sigma_vix: 2.898,
        }
    }

    pub fn g() -> GParams {
        GParams {
            lambda: 0.305,
            omega: 1.60e-6,
            beta: 0.940,
            alpha: 0.054,
            sigma_vix: 3.012,
        }
    }

    pub fn hn() -> HNParams {
        HNParams {
            lambda: 4.518,
            omega: -1.44e-6,
            beta: 0.870,
            alpha: 3.10e-6,
            delta: 197.183,
            sigma_vix: 3.565,
            eta: None,
        }
    }

    pub fn hnvd() -> HNParams {
        HNParams {
            lambda: 9.128,
            omega: -1.39e-6,
            beta: 0.895,
            alpha: 2.24e-6,
            delta: 202.167,
            sigma_vix: 3.504,
            eta: Some(1.143),
        }
    }

    pub fn all() -> Vec<ModelParams> {
        vec![
            ModelParams::Rg(rg()),
            ModelParams::Eg(eg()),
            ModelParams::G(g()),
            ModelParams::Hn(hn()),
            ModelParams::Hn(hnvd()),
        ]
    }

    /// Robust standard errors reported alongside the RG estimates, in
    /// [`ModelParams::named_values`] order (`sigma` and `sigma_vix` excluded:
    /// the former is reported for `sigma^2`, the latter not at all).
    pub fn rg_standard_errors() -> Vec<(&'static str, f64)> {
        vec![
            ("lambda", 0.010),
            ("omega", 0.014),
            ("beta", 0.001),
            ("tau1", 0.005),
            ("tau2", 0.002),
            ("gamma", 0.009),
            ("kappa", 0.278),
            ("phi", 0.029),
            ("delta1", 0.010),
            ("delta2", 0.010),
            ("xi", 0.130),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn persistence_values() {
        let rg = sp500_2004_2018::rg();
        assert_eq!(rg.persistence(), 0.991);
        assert_eq!(sp500_2004_2018::eg().persistence(), 0.990);
        // 0.054 + 0.940 = 0.994; the reported 0.993 reflects rounding of the inputs
        assert!((sp500_2004_2018::g().persistence() - 0.993).abs() <= 0.001 + 1e-12);
        let hn = sp500_2004_2018::hn().persistence();
        assert!((hn - 0.990).abs() < 1e-3, "{hn}");
        let hnvd = sp500_2004_2018::hnvd().persistence();
        assert!((hnvd - 0.986).abs() < 1e-3, "{hnvd}");
    }

    #[test]
    fn family_round_trip_and_values() {
        for p in sp500_2004_2018::all() {
            let fam: Family = p.family().as_str().parse().unwrap();
            assert_eq!(fam, p.family());
            let vals: Vec<f64> = p.named_values().iter().map(|(_, v)| *v).collect();
            assert_eq!(p.with_values(&vals).unwrap(), p);
            p.validate().unwrap();
        }
    }

    #[test]
    fn sign_warnings_flag_violations() {
        let mut p = sp500_2004_2018::rg();
        assert!(p.sign_warnings().is_empty());
        p.lambda = -0.01;
        assert_eq!(p.sign_warnings().len(), 1);
    }

    #[test]
    fn hnvd_implied_xi() {
        let xi = sp500_2004_2018::hnvd().implied_xi().unwrap();
        // (1/1.143 - 1) / (2 * 2.24e-6)
        assert!((xi + 27_926.2).abs() < 1.0, "{xi}");
    }
}
