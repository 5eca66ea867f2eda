//! Exponentially affine SDF, P-to-Q parameter maps and the analytic moments
//! of log-variance under both measures.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{HNParams, Leverage, RGParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Measure {
    P,
    #[default]
    Q,
}

/// Prices of equity risk (`lambda`) and volatility risk (`xi`).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SdfState {
    pub lambda: f64,
    pub xi: f64,
}

impl SdfState {
    pub fn new(lambda: f64, xi: f64) -> Result<Self> {
        if lambda.is_finite() && xi.is_finite() {
            Ok(SdfState { lambda, xi })
        } else {
            Err(Error::Contract("SDF prices must be finite".into()))
        }
    }
}

/// `exp(-lambda z - xi u - (lambda^2 + xi^2) / 2)`
#[inline]
pub fn sdf_value(z: f64, u: f64, s: SdfState) -> f64 {
    (-s.lambda * z - s.xi * u - 0.5 * (s.lambda * s.lambda + s.xi * s.xi)).exp()
}

/// `E exp(aX + bX^2)` for standard normal `X`.
pub fn mgf_normal_quadratic(a: f64, b: f64) -> Result<f64> {
    log_mgf_normal_quadratic(a, b).map(f64::exp)
}

pub(crate) fn log_mgf_normal_quadratic(a: f64, b: f64) -> Result<f64> {
    let d = 1.0 - 2.0 * b;
    if !(d > 0.0) {
        return Err(Error::Pricing(format!("E exp(aX + bX^2) diverges for b = {b} >= 1/2")));
    }
    Ok(-0.5 * d.ln() + a * a / (2.0 * d))
}

/// Realized GARCH dynamics under Q. Shocks `z*`, `u*` are standard normal.
///
/// With quadratic leverage the change of measure folds entirely into the
/// intercepts and linear loadings and `z_shift` is zero. With absolute-value
/// leverage only the `u` shift folds in; `z_shift` carries `lambda` so that
/// `z = z* - z_shift` inside `tau`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QParamsRG {
    pub omega_q: f64,
    pub tau1_q: f64,
    pub kappa_q: f64,
    pub delta1_q: f64,
    pub beta: f64,
    pub tau2: f64,
    pub gamma: f64,
    pub sigma: f64,
    pub phi: f64,
    pub delta2: f64,
    pub leverage: Leverage,
    pub z_shift: f64,
}

impl QParamsRG {
    /// The P-dynamics written in the same layout (identity change of measure).
    pub fn physical(p: &RGParams) -> Self {
        QParamsRG {
            omega_q: p.omega,
            tau1_q: p.tau1,
            kappa_q: p.kappa,
            delta1_q: p.delta1,
            beta: p.beta,
            tau2: p.tau2,
            gamma: p.gamma,
            sigma: p.sigma,
            phi: p.phi,
            delta2: p.delta2,
            leverage: p.leverage,
            z_shift: 0.0,
        }
    }

    /// Substitute `z = z* - lambda`, `u = u* - xi` into these dynamics.
    ///
    /// `shift(l, x).shift(-l, -x)` recovers `self`; shifting twice by the
    /// same prices does not.
    pub fn shift(&self, lambda: f64, xi: f64) -> Self {
        let mut q = *self;
        q.omega_q -= self.gamma * self.sigma * xi;
        q.kappa_q -= self.sigma * xi;
        match self.leverage {
            Leverage::Quadratic => {
                q.omega_q += -self.tau1_q * lambda + self.tau2 * lambda * lambda;
                q.tau1_q -= 2.0 * self.tau2 * lambda;
                q.kappa_q += -self.delta1_q * lambda + self.delta2 * lambda * lambda;
                q.delta1_q -= 2.0 * self.delta2 * lambda;
            }
            Leverage::Absolute => {
                q.z_shift += lambda;
                q.kappa_q += -self.delta1_q * lambda + self.delta2 * lambda * lambda;
                q.delta1_q -= 2.0 * self.delta2 * lambda;
            }
        }
        q
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        [
            self.omega_q - other.omega_q,
            self.tau1_q - other.tau1_q,
            self.kappa_q - other.kappa_q,
            self.delta1_q - other.delta1_q,
            self.z_shift - other.z_shift,
        ]
        .iter()
        .fold(0.0f64, |m, d| m.max(d.abs()))
    }
}

pub fn map_rg_to_q(p: &RGParams) -> QParamsRG {
    QParamsRG::physical(p).shift(p.lambda, p.xi)
}

pub fn rg_dynamics(p: &RGParams, measure: Measure) -> QParamsRG {
    match measure {
        Measure::P => QParamsRG::physical(p),
        Measure::Q => map_rg_to_q(p),
    }
}

/// Heston-Nandi variance dynamics in the form
/// `h' = omega + beta h + alpha (z - delta sqrt(h))^2`, with `persistence =
/// beta + alpha delta^2`. Pricing starts from `h_scale * h_{t+1}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QParamsHN {
    pub omega: f64,
    pub alpha: f64,
    pub delta: f64,
    pub beta: f64,
    pub persistence: f64,
    pub h_scale: f64,
}

impl QParamsHN {
    fn build(omega: f64, alpha: f64, delta: f64, beta: f64, h_scale: f64) -> Self {
        QParamsHN {
            omega,
            alpha,
            delta,
            beta,
            persistence: beta + alpha * delta * delta,
            h_scale,
        }
    }

    pub fn physical(p: &HNParams) -> Self {
        Self::build(p.omega, p.alpha, p.delta, p.beta, 1.0)
    }

    /// Long-run variance `(omega + alpha) / (1 - persistence)`.
    pub fn long_run_variance(&self) -> Result<f64> {
        if self.persistence >= 1.0 {
            return Err(Error::Pricing(format!(
                "HN persistence {} >= 1: the variance forecast diverges",
                self.persistence
            )));
        }
        Ok((self.omega + self.alpha) / (1.0 - self.persistence))
    }
}

/// Locally risk-neutral valuation: `delta -> delta + lambda`.
pub fn map_hn_lrnvr(p: &HNParams) -> QParamsHN {
    QParamsHN::build(p.omega, p.alpha, p.delta + p.lambda, p.beta, 1.0)
}

/// Variance-dependent SDF with `eta = (1 + 2 alpha xi)^-1`.
pub fn map_hn_vd(p: &HNParams) -> Result<QParamsHN> {
    let eta = p
        .eta
        .ok_or_else(|| Error::Contract("variance-dependent map needs eta".into()))?;
    if !(eta.is_finite() && eta > 0.0) {
        return Err(Error::Contract(format!("eta = {eta} must be positive")));
    }
    let delta = (p.lambda + p.delta - 0.5) / eta + 0.5;
    Ok(QParamsHN::build(p.omega * eta, p.alpha * eta * eta, delta, p.beta, eta))
}

pub fn hn_dynamics(p: &HNParams, measure: Measure) -> Result<QParamsHN> {
    match (measure, p.eta) {
        (Measure::P, _) => Ok(QParamsHN::physical(p)),
        (Measure::Q, None) => Ok(map_hn_lrnvr(p)),
        (Measure::Q, Some(_)) => map_hn_vd(p),
    }
}

fn require_quadratic(p: &RGParams) -> Result<()> {
    if p.leverage == Leverage::Quadratic {
        Ok(())
    } else {
        Err(Error::Unsupported(
            "closed-form log-variance moments need quadratic leverage".into(),
        ))
    }
}

/// Unconditional mean and variance of `ln h`.
pub fn moments_logh(p: &RGParams, measure: Measure) -> Result<(f64, f64)> {
    require_quadratic(p)?;
    if p.beta.abs() >= 1.0 {
        return Err(Error::Contract("|beta| must be < 1".into()));
    }
    let q = rg_dynamics(p, measure);
    let mean = q.omega_q / (1.0 - p.beta);
    let var = (q.tau1_q.powi(2) + 2.0 * p.tau2.powi(2) + (p.gamma * p.sigma).powi(2)) / (1.0 - p.beta * p.beta);
    Ok((mean, var))
}

/// Conditional correlation between the return shock and the log-variance innovation.
pub fn leverage_corr(p: &RGParams, measure: Measure) -> Result<f64> {
    require_quadratic(p)?;
    let t1 = rg_dynamics(p, measure).tau1_q;
    let denom = (t1 * t1 + 2.0 * p.tau2 * p.tau2 + (p.gamma * p.sigma).powi(2)).sqrt();
    if denom == 0.0 {
        return Err(Error::Degenerate("all shock loadings are zero: correlation undefined".into()));
    }
    Ok(t1 / denom)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VrpDecomposition {
    /// `E^Q ln h - E^P ln h`
    pub total: f64,
    pub equity_share: f64,
    pub volatility_share: f64,
}

pub fn vrp_log_decomposition(p: &RGParams) -> Result<VrpDecomposition> {
    require_quadratic(p)?;
    if p.beta.abs() >= 1.0 {
        return Err(Error::Contract("|beta| must be < 1".into()));
    }
    let equity = -p.tau1 * p.lambda + p.tau2 * p.lambda * p.lambda;
    let vol = -p.gamma * p.sigma * p.xi;
    let sum = equity + vol;
    if sum == 0.0 {
        return Err(Error::Degenerate("log-VRP is zero: shares undefined".into()));
    }
    Ok(VrpDecomposition {
        total: sum / (1.0 - p.beta),
        equity_share: equity / sum,
        volatility_share: vol / sum,
    })
}

/// Everything the moment identities say about one parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub mean_logh_p: f64,
    pub mean_logh_q: f64,
    pub var_logh_p: f64,
    pub var_logh_q: f64,
    pub corr_p: f64,
    pub corr_q: f64,
    pub q_params: QParamsRG,
    pub decomposition: VrpDecomposition,
    pub warnings: Vec<String>,
}

impl MomentReport {
    pub fn new(p: &RGParams) -> Result<Self> {
        let (mean_logh_p, var_logh_p) = moments_logh(p, Measure::P)?;
        let (mean_logh_q, var_logh_q) = moments_logh(p, Measure::Q)?;
        Ok(MomentReport {
            mean_logh_p,
            mean_logh_q,
            var_logh_p,
            var_logh_q,
            corr_p: leverage_corr(p, Measure::P)?,
            corr_q: leverage_corr(p, Measure::Q)?,
            q_params: map_rg_to_q(p),
            decomposition: vrp_log_decomposition(p)?,
            warnings: p.sign_warnings(),
        })
    }

    pub fn write_json<W: Write>(&self, writer: W) -> Result<()> {
        serde_json::to_writer_pretty(writer, self)?;
        Ok(())
    }

    /// Two-column `quantity,value` table.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["quantity", "value"])?;
        let q = &self.q_params;
        let rows = [
            ("mean_logh_p", self.mean_logh_p),
            ("mean_logh_q", self.mean_logh_q),
            ("var_logh_p", self.var_logh_p),
            ("var_logh_q", self.var_logh_q),
            ("corr_p", self.corr_p),
            ("corr_q", self.corr_q),
            ("omega_q", q.omega_q),
            ("tau1_q", q.tau1_q),
            ("kappa_q", q.kappa_q),
            ("delta1_q", q.delta1_q),
            ("log_vrp_total", self.decomposition.total),
            ("equity_share", self.decomposition.equity_share),
            ("volatility_share", self.decomposition.volatility_share),
        ];
        for (name, v) in rows {
            wtr.write_record([name.to_string(), v.to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }
}
