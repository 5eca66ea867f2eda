//! Error statistics against market series and Diebold-Mariano comparisons.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Default DM bandwidth.
pub const DM_BANDWIDTH: usize = 42;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kurtosis {
    /// Fourth standardized moment minus 3.
    #[default]
    Excess,
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub n: usize,
    pub bias: f64,
    pub rmse: f64,
    pub mae: f64,
    /// `None` when either series is constant.
    pub corr: Option<f64>,
    pub ar1: Option<f64>,
    pub ar10: Option<f64>,
    pub ar22: Option<f64>,
    /// Moments of the model series; `var` uses the `n - 1` divisor, skewness
    /// and kurtosis are ratios of population central moments.
    pub mean: f64,
    pub var: f64,
    pub skew: f64,
    pub kurt: f64,
}

fn central(v: &[f64]) -> (f64, f64, f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let (mut c2, mut c3, mut c4) = (0.0, 0.0, 0.0);
    for x in v {
        let d = x - m;
        c2 += d * d;
        c3 += d * d * d;
        c4 += d * d * d * d;
    }
    (m, c2 / n, c3 / n, c4 / n)
}

/// Sample autocorrelation at `lag`; `None` without `lag + 1` points or variation.
pub fn autocorr(v: &[f64], lag: usize) -> Option<f64> {
    if v.len() < lag + 1 {
        return None;
    }
    let (m, c2, _, _) = central(v);
    if !(c2 > 0.0) {
        return None;
    }
    let n = v.len() as f64;
    let num: f64 = (lag..v.len()).map(|t| (v[t] - m) * (v[t - lag] - m)).sum::<f64>() / n;
    Some(num / c2)
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let (ma, va, _, _) = central(a);
    let (mb, vb, _, _) = central(b);
    if !(va > 0.0 && vb > 0.0) {
        return None;
    }
    let cov = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / a.len() as f64;
    Some((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

pub fn error_stats(model: &[f64], market: &[f64], kurtosis: Kurtosis) -> Result<ErrorStats> {
    if model.len() != market.len() {
        return Err(Error::Contract("model and market series must be aligned".into()));
    }
    if model.len() < 2 {
        return Err(Error::InsufficientData("error statistics need at least two points".into()));
    }
    if model.iter().chain(market).any(|v| !v.is_finite()) {
        return Err(Error::Contract("non-finite value in evaluated series".into()));
    }
    let e: Vec<f64> = model.iter().zip(market).map(|(a, b)| a - b).collect();
    let n = e.len() as f64;
    let (mean, c2, c3, c4) = central(model);
    let kurt = if c2 > 0.0 { c4 / (c2 * c2) } else { f64::NAN };
    Ok(ErrorStats {
        n: e.len(),
        bias: e.iter().sum::<f64>() / n,
        rmse: (e.iter().map(|x| x * x).sum::<f64>() / n).sqrt(),
        mae: e.iter().map(|x| x.abs()).sum::<f64>() / n,
        corr: pearson(model, market),
        ar1: autocorr(&e, 1),
        ar10: autocorr(&e, 10),
        ar22: autocorr(&e, 22),
        mean,
        var: c2 * n / (n - 1.0),
        skew: if c2 > 0.0 { c3 / c2.powf(1.5) } else { f64::NAN },
        kurt: match kurtosis {
            Kurtosis::Excess => kurt - 3.0,
            Kurtosis::Raw => kurt,
        },
    })
}

pub fn parzen_weight(x: f64) -> f64 {
    let x = x.abs();
    if x <= 0.5 {
        1.0 - 6.0 * x * x + 6.0 * x * x * x
    } else if x <= 1.0 {
        2.0 * (1.0 - x).powi(3)
    } else {
        0.0
    }
}

/// Parzen-kernel long-run variance with mean-centred, `1/T` autocovariances.
pub fn parzen_lrv(d: &[f64], bandwidth: usize) -> Result<f64> {
    if bandwidth == 0 {
        return Err(Error::Contract("bandwidth must be at least 1".into()));
    }
    if d.is_empty() {
        return Err(Error::InsufficientData("empty loss differential".into()));
    }
    let n = d.len();
    let m = d.iter().sum::<f64>() / n as f64;
    let c: Vec<f64> = d.iter().map(|x| x - m).collect();
    let gamma = |j: usize| c[j..].iter().zip(&c).map(|(a, b)| a * b).sum::<f64>() / n as f64;
    let mut s = gamma(0);
    for j in 1..bandwidth.min(n) {
        s += 2.0 * parzen_weight(j as f64 / bandwidth as f64) * gamma(j);
    }
    Ok(s.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Squared,
    Absolute,
}

impl LossKind {
    pub fn loss(self, e: f64) -> f64 {
        match self {
            LossKind::Squared => e * e,
            LossKind::Absolute => e.abs(),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            LossKind::Squared => "mse",
            LossKind::Absolute => "mae",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossDiffSeries {
    pub d: Vec<f64>,
    pub loss_kind: LossKind,
}

impl LossDiffSeries {
    /// `d_t = g(e_t) - g(e_ref,t)`.
    pub fn new(errors: &[f64], reference_errors: &[f64], loss_kind: LossKind) -> Result<Self> {
        if errors.len() != reference_errors.len() {
            return Err(Error::Contract("error series must be aligned".into()));
        }
        let d: Vec<f64> = errors
            .iter()
            .zip(reference_errors)
            .map(|(a, b)| loss_kind.loss(*a) - loss_kind.loss(*b))
            .collect();
        if d.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("non-finite loss differential".into()));
        }
        Ok(LossDiffSeries { d, loss_kind })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DmResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// `sqrt(T) mean(d) / sqrt(lrv)` with a two-sided normal p-value.
pub fn dm_test(d: &[f64], bandwidth: usize) -> Result<DmResult> {
    let n = d.len();
    if n < 2 {
        return Err(Error::InsufficientData("DM test needs at least two points".into()));
    }
    if n < 2 * bandwidth {
        log::warn!("DM test on {n} points with bandwidth {bandwidth}");
    }
    let mean = d.iter().sum::<f64>() / n as f64;
    let lrv = parzen_lrv(d, bandwidth)?;
    // a variance at rounding level of the data scale counts as zero
    let scale = d.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    if lrv <= 1e-28 * scale * scale {
        if mean.abs() <= 1e-14 * scale || scale == 0.0 {
            return Ok(DmResult {
                statistic: 0.0,
                p_value: 1.0,
            });
        }
        return Err(Error::Degenerate(format!("zero long-run variance with mean loss differential {mean:e}")));
    }
    let statistic = (n as f64).sqrt() * mean / lrv.sqrt();
    let p_value = 2.0 * Normal::new(0.0, 1.0).expect("standard normal").sf(statistic.abs());
    Ok(DmResult { statistic, p_value })
}

/// Relative loss increase of a model over the reference, `(loss - ref) / loss`.
pub fn delta_pct(loss: f64, reference_loss: f64) -> f64 {
    100.0 * (loss - reference_loss) / loss
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelStats {
    pub model: String,
    pub stats: ErrorStats,
    /// `None` for the reference model.
    pub delta_pct_rmse: Option<f64>,
    pub delta_pct_mae: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmEntry {
    pub model: String,
    pub reference: String,
    pub loss: LossKind,
    pub statistic: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetEval {
    pub target: String,
    pub reference: String,
    pub models: Vec<ModelStats>,
    pub dm: Vec<DmEntry>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub targets: Vec<TargetEval>,
}

/// Scores every model against `market` and compares each non-reference model
/// with `reference` by DM tests under both losses.
pub fn evaluate_target(
    target: &str,
    market: &[f64],
    models: &[(String, Vec<f64>)],
    reference: &str,
    bandwidth: usize,
    kurtosis: Kurtosis,
) -> Result<TargetEval> {
    let ref_series = &models
        .iter()
        .find(|(m, _)| m == reference)
        .ok_or_else(|| Error::Contract(format!("reference model {reference} not among the models")))?
        .1;
    let ref_err: Vec<f64> = ref_series.iter().zip(market).map(|(a, b)| a - b).collect();
    let ref_stats = error_stats(ref_series, market, kurtosis)?;
    let mut out = Vec::with_capacity(models.len());
    for (name, series) in models {
        let stats = error_stats(series, market, kurtosis)?;
        let is_ref = name == reference;
        out.push(ModelStats {
            model: name.clone(),
            stats,
            delta_pct_rmse: (!is_ref).then(|| delta_pct(stats.rmse, ref_stats.rmse)),
            delta_pct_mae: (!is_ref).then(|| delta_pct(stats.mae, ref_stats.mae)),
        });
    }
    let pairs: Vec<(&String, &Vec<f64>, LossKind)> = models
        .iter()
        .filter(|(m, _)| m != reference)
        .flat_map(|(m, s)| [(m, s, LossKind::Squared), (m, s, LossKind::Absolute)])
        .collect();
    let dm = pairs
        .par_iter()
        .map(|(m, s, kind)| {
            let e: Vec<f64> = s.iter().zip(market).map(|(a, b)| a - b).collect();
            let d = LossDiffSeries::new(&e, &ref_err, *kind)?;
            let r = dm_test(&d.d, bandwidth)?;
            Ok(DmEntry {
                model: (*m).clone(),
                reference: reference.to_string(),
                loss: *kind,
                statistic: r.statistic,
                p_value: r.p_value,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TargetEval {
        target: target.to_string(),
        reference: reference.to_string(),
        models: out,
        dm,
    })
}

impl EvalReport {
    pub fn write_json<W: Write>(&self, writer: W) -> Result<()> {
        serde_json::to_writer_pretty(writer, self)?;
        Ok(())
    }

    /// One block per target: statistic rows, model columns.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let names: Vec<String> = self
            .targets
            .iter()
            .flat_map(|t| t.models.iter().map(|m| m.model.clone()))
            .fold(Vec::new(), |mut acc, m| {
                if !acc.contains(&m) {
                    acc.push(m);
                }
                acc
            });
        let mut header = vec!["target".to_string(), "statistic".to_string()];
        header.extend(names.iter().cloned());
        wtr.write_record(&header)?;
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for t in &self.targets {
            type Getter = fn(&ModelStats) -> Option<f64>;
            let rows: [(&str, Getter); 13] = [
                ("bias", |m| Some(m.stats.bias)),
                ("rmse", |m| Some(m.stats.rmse)),
                ("mae", |m| Some(m.stats.mae)),
                ("corr", |m| m.stats.corr),
                ("ar1", |m| m.stats.ar1),
                ("ar10", |m| m.stats.ar10),
                ("ar22", |m| m.stats.ar22),
                ("mean", |m| Some(m.stats.mean)),
                ("var", |m| Some(m.stats.var)),
                ("skew", |m| Some(m.stats.skew)),
                ("kurt", |m| Some(m.stats.kurt)),
                ("delta_pct_rmse", |m| m.delta_pct_rmse),
                ("delta_pct_mae", |m| m.delta_pct_mae),
            ];
            for (label, get) in rows {
                let mut rec = vec![t.target.clone(), label.to_string()];
                for n in &names {
                    rec.push(fmt(t.models.iter().find(|m| &m.model == n).and_then(get)));
                }
                wtr.write_record(&rec)?;
            }
            for kind in [LossKind::Squared, LossKind::Absolute] {
                for (suffix, pick) in [("", false), ("_p", true)] {
                    let mut rec = vec![t.target.clone(), format!("dm_{}{}", kind.label(), suffix)];
                    for n in &names {
                        let v = t
                            .dm
                            .iter()
                            .find(|d| &d.model == n && d.loss == kind)
                            .map(|d| if pick { d.p_value } else { d.statistic });
                        rec.push(fmt(v));
                    }
                    wtr.write_record(&rec)?;
                }
            }
        }
        wtr.flush()?;
        Ok(())
    }
}
