//! Monte Carlo simulation under P or Q for every model family.
//!
//! Path `i` draws from ChaCha8 stream `i` of the configured seed, so each path
//! is reproducible on its own. Paths are split into a fixed number of
//! contiguous groups that are simulated in parallel and merged in group
//! order, which makes every output independent of the thread count.

use std::io::Write;

use chrono::NaiveDate;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{annualize_sum, MarketSeries, ObservationRow};
use crate::error::{Error, Result};
use crate::filter::{LOG_H_MAX, LOG_H_MIN};
use crate::measure::{hn_dynamics, rg_dynamics, sdf_value, Measure, QParamsHN, QParamsRG, SdfState};
use crate::params::{EGParams, GParams, HNParams, Leverage, ModelParams, RGParams, SQRT_2_OVER_PI};
use crate::vix::{Pricer, VIX_HORIZON};

/// Largest tolerated share of paths that leave the admissible variance range.
pub const MAX_FLAGGED_SHARE: f64 = 1e-4;

const DEFAULT_GROUPS: usize = 100;

/// Heston-Nandi variance is clamped here; a negative `omega` otherwise lets it
/// reach zero.
const HN_H_FLOOR: f64 = 1e-12;

/// Inverse standard normal CDF (Wichura's AS 241, double precision).
#[allow(clippy::excessive_precision)]
pub fn normal_inv(p: f64) -> f64 {
    const A: [f64; 8] = [
        3.387_132_872_796_366_608,
        133.141_667_891_784_377_45,
        1_971.590_950_306_551_442_7,
        13_731.693_765_509_461_125,
        45_921.953_931_549_871_457,
        67_265.770_927_008_700_853,
        33_430.575_583_588_128_105,
        2_509.080_928_730_122_672_7,
    ];
    const B: [f64; 8] = [
        1.0,
        42.313_330_701_600_911_252,
        687.187_007_492_057_908_3,
        5_394.196_021_424_751_107_7,
        21_213.794_301_586_595_867,
        39_307.895_800_092_710_61,
        28_729.085_735_721_942_674,
        5_226.495_278_852_854_561,
    ];
    const C: [f64; 8] = [
        1.423_437_110_749_683_577_34,
        4.630_337_846_156_545_295_9,
        5.769_497_221_460_691_405_5,
        3.647_848_324_763_204_605_04,
        1.270_458_252_452_368_382_58,
        0.241_780_725_177_450_611_77,
        0.022_723_844_989_269_184_583_3,
        7.745_450_142_783_414_076_4e-4,
    ];
    const D: [f64; 8] = [
        1.0,
        2.053_191_626_637_758_821_87,
        1.676_384_830_183_803_849_4,
        0.689_767_334_985_100_004_55,
        0.148_103_976_427_480_074_59,
        0.015_198_666_563_616_457_196_6,
        5.475_938_084_995_344_946e-4,
        1.050_750_071_644_416_843_24e-9,
    ];
    const E: [f64; 8] = [
        6.657_904_643_501_103_777_2,
        5.463_784_911_164_114_369_9,
        1.784_826_539_917_291_335_8,
        0.296_560_571_828_504_891_23,
        0.026_532_189_526_576_123_093,
        0.001_242_660_947_388_078_438_6,
        2.711_555_568_743_487_578_15e-5,
        2.010_334_399_292_288_132_65e-7,
    ];
    const F: [f64; 8] = [
        1.0,
        0.599_832_206_555_887_937_69,
        0.136_929_880_922_735_805_31,
        0.014_875_361_290_850_614_852_5,
        7.868_691_311_456_132_591e-4,
        1.846_318_317_510_054_681_8e-5,
        1.421_511_758_316_445_888_7e-7,
        2.044_263_103_389_939_785_64e-15,
    ];
    fn poly(c: &[f64; 8], x: f64) -> f64 {
        c.iter().rev().fold(0.0, |acc, &k| acc * x + k)
    }

    if !(p > 0.0 && p < 1.0) {
        return match p {
            0.0 => f64::NEG_INFINITY,
            1.0 => f64::INFINITY,
            _ => f64::NAN,
        };
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180_625 - q * q;
        return q * poly(&A, r) / poly(&B, r);
    }
    let mut r = if q < 0.0 { p } else { 1.0 - p };
    r = (-r.ln()).sqrt();
    let val = if r <= 5.0 {
        r -= 1.6;
        poly(&C, r) / poly(&D, r)
    } else {
        r -= 5.0;
        poly(&E, r) / poly(&F, r)
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}

/// Standard normal draws by inversion of 53-bit uniforms on (0, 1).
pub struct NormalStream {
    rng: ChaCha8Rng,
}

impl NormalStream {
    /// Stream `index` of `seed`.
    pub fn new(seed: u64, index: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index);
        NormalStream { rng }
    }

    #[inline]
    pub fn uniform(&mut self) -> f64 {
        ((self.rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    #[inline]
    pub fn normal(&mut self) -> f64 {
        normal_inv(self.uniform())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum HStart {
    /// Unconditional mean of `ln h` (or of `h` for affine models) under the
    /// simulated measure, followed by the burn-in.
    #[default]
    Stationary,
    /// Variance of the first simulated day, in P units.
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_paths: usize,
    pub n_days: usize,
    pub burn_in: usize,
    pub seed: u64,
    pub measure: Measure,
    pub params: ModelParams,
    #[serde(default)]
    pub risk_free_rate: f64,
    #[serde(default)]
    pub h_start: HStart,
}

impl SimConfig {
    pub fn new(params: ModelParams, measure: Measure, n_paths: usize, n_days: usize, seed: u64) -> Self {
        SimConfig {
            n_paths,
            n_days,
            burn_in: 750,
            seed,
            measure,
            params,
            risk_free_rate: 0.0,
            h_start: HStart::Stationary,
        }
    }

    fn check(&self) -> Result<()> {
        if self.n_paths == 0 || self.n_days == 0 {
            return Err(Error::Contract("n_paths and n_days must be positive".into()));
        }
        self.params.validate()
    }
}

/// `E |z|` for `z ~ N(m, 1)`.
fn folded_mean(m: f64) -> f64 {
    let phi = |x: f64| 0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2);
    SQRT_2_OVER_PI * (-0.5 * m * m).exp() + m * (1.0 - 2.0 * phi(-m))
}

#[derive(Debug, Clone, Copy)]
enum Dynamics {
    RgP(RGParams),
    RgQ(QParamsRG),
    Eg { p: EGParams, shift: f64, q: bool },
    G { p: GParams, shift: f64, q: bool },
    HnP(HNParams),
    HnQ(QParamsHN),
}

/// One simulated day: return, realized measure, drawn shocks.
#[derive(Debug, Clone, Copy)]
struct Day {
    r: f64,
    x: f64,
}

#[derive(Debug, Clone, Copy)]
struct State {
    h: f64,
    lh: f64,
}

impl Dynamics {
    fn new(params: &ModelParams, measure: Measure) -> Result<Self> {
        let q = measure == Measure::Q;
        Ok(match params {
            ModelParams::Rg(p) if q => Dynamics::RgQ(rg_dynamics(p, measure)),
            ModelParams::Rg(p) => Dynamics::RgP(*p),
            ModelParams::Eg(p) => Dynamics::Eg {
                p: *p,
                shift: if q { p.lambda } else { 0.0 },
                q,
            },
            ModelParams::G(p) => Dynamics::G {
                p: *p,
                shift: if q { p.lambda } else { 0.0 },
                q,
            },
            ModelParams::Hn(p) if q => Dynamics::HnQ(hn_dynamics(p, measure)?),
            ModelParams::Hn(p) => Dynamics::HnP(*p),
        })
    }

    fn log_model(&self) -> bool {
        matches!(self, Dynamics::RgP(_) | Dynamics::RgQ(_) | Dynamics::Eg { .. })
    }

    fn uses_u(&self) -> bool {
        matches!(self, Dynamics::RgP(_) | Dynamics::RgQ(_))
    }

    fn beta(&self) -> f64 {
        match self {
            Dynamics::RgP(p) => p.beta,
            Dynamics::RgQ(q) => q.beta,
            Dynamics::Eg { p, .. } => p.beta,
            Dynamics::G { p, .. } => p.beta,
            Dynamics::HnP(p) => p.beta,
            Dynamics::HnQ(q) => q.beta,
        }
    }

    /// Stationary starting variance (unconditional mean of `ln h` for log models).
    fn stationary_h(&self) -> Result<f64> {
        let h = match self {
            Dynamics::RgP(p) => (p.omega / (1.0 - p.beta)).exp(),
            Dynamics::RgQ(q) => {
                let lev = match q.leverage {
                    Leverage::Quadratic => 0.0,
                    Leverage::Absolute => {
                        -q.tau1_q * q.z_shift + q.tau2 * (folded_mean(-q.z_shift) - SQRT_2_OVER_PI)
                    }
                };
                ((q.omega_q + lev) / (1.0 - q.beta)).exp()
            }
            Dynamics::Eg { p, shift, .. } => {
                let lev = -p.tau1 * shift + p.tau2 * (folded_mean(-shift) - SQRT_2_OVER_PI);
                ((p.omega + lev) / (1.0 - p.beta)).exp()
            }
            Dynamics::G { p, shift, .. } => p.omega / (1.0 - p.beta - p.alpha * (1.0 + shift * shift)),
            Dynamics::HnP(p) => QParamsHN::physical(p).long_run_variance()?,
            Dynamics::HnQ(q) => q.long_run_variance()?,
        };
        if h.is_finite() && h > 0.0 {
            Ok(h)
        } else {
            Err(Error::Simulation(format!("no admissible stationary variance ({h})")))
        }
    }

    /// Converts a P-units variance into the simulated state variable.
    fn state_from(&self, h: f64) -> State {
        let h = match self {
            Dynamics::HnQ(q) => h * q.h_scale,
            _ => h,
        };
        State { h, lh: h.ln() }
    }

    /// Advances one day with standard normal draws `e1` (return) and `e2` (volatility).
    #[inline]
    fn step(&self, s: &mut State, e1: f64, e2: f64, rf: f64) -> Day {
        let h = s.h;
        let sh = h.sqrt();
        match self {
            Dynamics::RgP(p) => {
                let r = rf + p.lambda * sh - 0.5 * h + sh * e1;
                let x = (p.kappa + p.phi * s.lh + p.delta_fn(e1) + p.sigma * e2).exp();
                s.lh = p.omega + p.beta * s.lh + p.tau_fn(e1) + p.gamma * p.sigma * e2;
                s.h = s.lh.exp();
                Day { r, x }
            }
            Dynamics::RgQ(q) => {
                let r = rf - 0.5 * h + sh * e1;
                let dz = q.delta1_q * e1 + q.delta2 * (e1 * e1 - 1.0);
                let x = (q.kappa_q + q.phi * s.lh + dz + q.sigma * e2).exp();
                let z = e1 - q.z_shift;
                let tau = match q.leverage {
                    Leverage::Quadratic => q.tau1_q * z + q.tau2 * (z * z - 1.0),
                    Leverage::Absolute => q.tau1_q * z + q.tau2 * (z.abs() - SQRT_2_OVER_PI),
                };
                s.lh = q.omega_q + q.beta * s.lh + tau + q.gamma * q.sigma * e2;
                s.h = s.lh.exp();
                Day { r, x }
            }
            Dynamics::Eg { p, shift, q } => {
                let z = e1 - shift;
                let r = if *q { rf - 0.5 * h + sh * e1 } else { rf + p.lambda * sh - 0.5 * h + sh * e1 };
                s.lh = p.omega + p.beta * s.lh + p.tau_fn(z);
                s.h = s.lh.exp();
                Day { r, x: h }
            }
            Dynamics::G { p, shift, q } => {
                let z = e1 - shift;
                let r = if *q { rf - 0.5 * h + sh * e1 } else { rf + p.lambda * sh - 0.5 * h + sh * e1 };
                s.h = p.omega + p.beta * h + p.alpha * h * z * z;
                s.lh = s.h.ln();
                Day { r, x: h }
            }
            Dynamics::HnP(p) => {
                let r = rf + p.lambda * h - 0.5 * h + sh * e1;
                let e = e1 - p.delta * sh;
                s.h = (p.omega + p.beta * h + p.alpha * e * e).max(HN_H_FLOOR);
                s.lh = s.h.ln();
                Day { r, x: h }
            }
            Dynamics::HnQ(q) => {
                let r = rf - 0.5 * h + sh * e1;
                let e = e1 - q.delta * sh;
                s.h = (q.omega + q.beta * h + q.alpha * e * e).max(HN_H_FLOOR);
                s.lh = s.h.ln();
                Day { r, x: h }
            }
        }
    }
}

#[inline]
fn admissible(s: &State) -> bool {
    s.lh.is_finite() && (LOG_H_MIN..=LOG_H_MAX).contains(&s.lh)
}

/// Runs one path, calling `visit(day, h, e1, e2, r, x)` for each recorded
/// day. Returns `false` if the variance left the admissible range.
fn run_path<V: FnMut(usize, f64, f64, f64, Day)>(
    dynamics: &Dynamics,
    stream: &mut NormalStream,
    start: State,
    burn_in: usize,
    n_days: usize,
    rf: f64,
    mut visit: V,
) -> bool {
    let mut s = start;
    let uses_u = dynamics.uses_u();
    for day in 0..burn_in + n_days {
        let e1 = stream.normal();
        let e2 = if uses_u { stream.normal() } else { 0.0 };
        let h = s.h;
        let d = dynamics.step(&mut s, e1, e2, rf);
        if day >= burn_in {
            visit(day - burn_in, h, e1, e2, d);
        }
        if !admissible(&s) {
            return false;
        }
    }
    true
}

fn group_ranges(n_paths: usize) -> Vec<(usize, usize)> {
    let g = n_paths.min(DEFAULT_GROUPS);
    (0..g).map(|i| (i * n_paths / g, (i + 1) * n_paths / g)).collect()
}

fn start_state(cfg: &SimConfig, dynamics: &Dynamics) -> Result<State> {
    match cfg.h_start {
        HStart::Stationary => {
            let h = dynamics.stationary_h()?;
            // stationary_h is already in simulated-state units
            Ok(State { h, lh: h.ln() })
        }
        HStart::Fixed(h) => {
            if h.is_finite() && h > 0.0 {
                Ok(dynamics.state_from(h))
            } else {
                Err(Error::Contract(format!("h_start = {h} must be positive")))
            }
        }
    }
}

fn check_flagged(flagged: usize, n_paths: usize) -> Result<()> {
    if flagged > 0 {
        log::warn!("{flagged} of {n_paths} simulated paths left the admissible variance range");
    }
    if flagged as f64 > MAX_FLAGGED_SHARE * n_paths as f64 {
        return Err(Error::Simulation(format!(
            "{flagged} of {n_paths} paths overflowed (limit {MAX_FLAGGED_SHARE})"
        )));
    }
    Ok(())
}

/// Simulated returns, variances and realized measures for each path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    pub r: Vec<Vec<f64>>,
    /// Conditional variance of each recorded day (Q-starred units under HN_vd Q).
    pub h: Vec<Vec<f64>>,
    /// Realized measure (RG) or the conditional variance itself (other families).
    pub x: Vec<Vec<f64>>,
    /// Indices of paths dropped for leaving the admissible variance range.
    pub flagged: Vec<usize>,
}

/// Materializes every path. Meant for modest ensembles; the moment and
/// pricing routines stream instead.
pub fn simulate_paths(cfg: &SimConfig) -> Result<PathEnsemble> {
    cfg.check()?;
    let dynamics = Dynamics::new(&cfg.params, cfg.measure)?;
    let start = start_state(cfg, &dynamics)?;
    type One = Option<(Vec<f64>, Vec<f64>, Vec<f64>)>;
    let paths: Vec<One> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|i| {
            let mut stream = NormalStream::new(cfg.seed, i as u64);
            let (mut r, mut h, mut x) = (
                Vec::with_capacity(cfg.n_days),
                Vec::with_capacity(cfg.n_days),
                Vec::with_capacity(cfg.n_days),
            );
            let ok = run_path(&dynamics, &mut stream, start, cfg.burn_in, cfg.n_days, cfg.risk_free_rate, |_, hv, _, _, d| {
                r.push(d.r);
                h.push(hv);
                x.push(d.x);
            });
            ok.then_some((r, h, x))
        })
        .collect();
    let mut out = PathEnsemble {
        r: vec![],
        h: vec![],
        x: vec![],
        flagged: vec![],
    };
    for (i, p) in paths.into_iter().enumerate() {
        match p {
            Some((r, h, x)) => {
                out.r.push(r);
                out.h.push(h);
                out.x.push(x);
            }
            None => out.flagged.push(i),
        }
    }
    check_flagged(out.flagged.len(), cfg.n_paths)?;
    Ok(out)
}

/// Streaming central moments up to order four.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Moments {
    pub n: f64,
    pub mean: f64,
    m2: f64,
    m3: f64,
    m4: f64,
}

impl Moments {
    #[inline]
    pub fn push(&mut self, x: f64) {
        let n1 = self.n;
        self.n += 1.0;
        let n = self.n;
        let delta = x - self.mean;
        let dn = delta / n;
        let dn2 = dn * dn;
        let term1 = delta * dn * n1;
        self.mean += dn;
        self.m4 += term1 * dn2 * (n * n - 3.0 * n + 3.0) + 6.0 * dn2 * self.m2 - 4.0 * dn * self.m3;
        self.m3 += term1 * dn * (n - 2.0) - 3.0 * dn * self.m2;
        self.m2 += term1;
    }

    pub fn merge(&self, o: &Moments) -> Moments {
        if self.n == 0.0 {
            return *o;
        }
        if o.n == 0.0 {
            return *self;
        }
        let (na, nb) = (self.n, o.n);
        let n = na + nb;
        let d = o.mean - self.mean;
        let d2 = d * d;
        let m2 = self.m2 + o.m2 + d2 * na * nb / n;
        let m3 = self.m3 + o.m3 + d * d2 * na * nb * (na - nb) / (n * n)
            + 3.0 * d * (na * o.m2 - nb * self.m2) / n;
        let m4 = self.m4
            + o.m4
            + d2 * d2 * na * nb * (na * na - na * nb + nb * nb) / (n * n * n)
            + 6.0 * d2 * (na * na * o.m2 + nb * nb * self.m2) / (n * n)
            + 4.0 * d * (na * o.m3 - nb * self.m3) / n;
        Moments {
            n,
            mean: self.mean + d * nb / n,
            m2,
            m3,
            m4,
        }
    }

    /// Population variance.
    pub fn variance(&self) -> f64 {
        self.m2 / self.n
    }

    pub fn skewness(&self) -> f64 {
        self.n.sqrt() * self.m3 / self.m2.powf(1.5)
    }

    /// Fourth standardized moment minus 3.
    pub fn excess_kurtosis(&self) -> f64 {
        self.n * self.m4 / (self.m2 * self.m2) - 3.0
    }
}

/// Delete-one-group jackknife standard error of `stat`.
fn jackknife<S: Fn(&Moments) -> f64>(groups: &[Moments], stat: S) -> f64 {
    let g = groups.len();
    if g < 2 {
        return f64::NAN;
    }
    let mut prefix = vec![Moments::default(); g + 1];
    for i in 0..g {
        prefix[i + 1] = prefix[i].merge(&groups[i]);
    }
    let mut suffix = vec![Moments::default(); g + 1];
    for i in (0..g).rev() {
        suffix[i] = groups[i].merge(&suffix[i + 1]);
    }
    let loo: Vec<f64> = (0..g).map(|i| stat(&prefix[i].merge(&suffix[i + 1]))).collect();
    let mean = loo.iter().sum::<f64>() / g as f64;
    let ss: f64 = loo.iter().map(|v| (v - mean).powi(2)).sum();
    ((g as f64 - 1.0) / g as f64 * ss).sqrt()
}

/// Skewness and excess kurtosis of cumulative returns by horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentCurve {
    pub horizons: Vec<usize>,
    pub skew: Vec<f64>,
    pub skew_se: Vec<f64>,
    pub kurt: Vec<f64>,
    pub kurt_se: Vec<f64>,
    pub n_paths: usize,
    pub n_flagged: usize,
}

impl MomentCurve {
    pub fn at(&self, horizon: usize) -> Option<usize> {
        self.horizons.iter().position(|&h| h == horizon)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["horizon", "skew", "skew_se", "kurt", "kurt_se"])?;
        for i in 0..self.horizons.len() {
            wtr.write_record([
                self.horizons[i].to_string(),
                self.skew[i].to_string(),
                self.skew_se[i].to_string(),
                self.kurt[i].to_string(),
                self.kurt_se[i].to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Moments of `sum_{d < H} r_d` for each requested horizon `H` (in days,
/// each `1..=cfg.n_days`), with jackknife standard errors over path groups.
pub fn cumret_moments(cfg: &SimConfig, horizons: &[usize]) -> Result<MomentCurve> {
    cfg.check()?;
    if horizons.iter().any(|&h| h == 0 || h > cfg.n_days) {
        return Err(Error::Contract(format!("horizons must lie in 1..={}", cfg.n_days)));
    }
    let dynamics = Dynamics::new(&cfg.params, cfg.measure)?;
    let start = start_state(cfg, &dynamics)?;
    let last = *horizons.iter().max().unwrap_or(&0);
    let mut slot = vec![usize::MAX; last + 1];
    for (i, &h) in horizons.iter().enumerate() {
        slot[h] = i;
    }
    let groups: Vec<(Vec<Moments>, usize)> = group_ranges(cfg.n_paths)
        .into_par_iter()
        .map(|(a, b)| {
            let mut acc = vec![Moments::default(); horizons.len()];
            let mut cum = vec![0.0; horizons.len()];
            let mut flagged = 0;
            for i in a..b {
                let mut stream = NormalStream::new(cfg.seed, i as u64);
                let mut c = 0.0;
                let ok = run_path(&dynamics, &mut stream, start, cfg.burn_in, last, cfg.risk_free_rate, |day, _, _, _, d| {
                    c += d.r;
                    let k = slot[day + 1];
                    if k != usize::MAX {
                        cum[k] = c;
                    }
                });
                if ok {
                    for (m, &v) in acc.iter_mut().zip(&cum) {
                        m.push(v);
                    }
                } else {
                    flagged += 1;
                }
            }
            (acc, flagged)
        })
        .collect();
    let n_flagged: usize = groups.iter().map(|g| g.1).sum();
    check_flagged(n_flagged, cfg.n_paths)?;
    let mut curve = MomentCurve {
        horizons: horizons.to_vec(),
        skew: vec![],
        skew_se: vec![],
        kurt: vec![],
        kurt_se: vec![],
        n_paths: cfg.n_paths - n_flagged,
        n_flagged,
    };
    for k in 0..horizons.len() {
        let per_group: Vec<Moments> = groups.iter().map(|g| g.0[k]).collect();
        let total = per_group.iter().fold(Moments::default(), |a, b| a.merge(b));
        curve.skew.push(total.skewness());
        curve.kurt.push(total.excess_kurtosis());
        curve.skew_se.push(jackknife(&per_group, Moments::skewness));
        curve.kurt_se.push(jackknife(&per_group, Moments::excess_kurtosis));
    }
    Ok(curve)
}

/// Cumulative returns over `horizon` days, one per surviving path, in path order.
pub fn cumulative_returns(cfg: &SimConfig, horizon: usize) -> Result<Vec<f64>> {
    cfg.check()?;
    if horizon == 0 || horizon > cfg.n_days {
        return Err(Error::Contract(format!("horizon must lie in 1..={}", cfg.n_days)));
    }
    let dynamics = Dynamics::new(&cfg.params, cfg.measure)?;
    let start = start_state(cfg, &dynamics)?;
    let groups: Vec<(Vec<f64>, usize)> = group_ranges(cfg.n_paths)
        .into_par_iter()
        .map(|(a, b)| {
            let mut out = Vec::with_capacity(b - a);
            let mut flagged = 0;
            for i in a..b {
                let mut stream = NormalStream::new(cfg.seed, i as u64);
                let mut c = 0.0;
                if run_path(&dynamics, &mut stream, start, cfg.burn_in, horizon, cfg.risk_free_rate, |_, _, _, _, d| c += d.r) {
                    out.push(c);
                } else {
                    flagged += 1;
                }
            }
            (out, flagged)
        })
        .collect();
    check_flagged(groups.iter().map(|g| g.1).sum(), cfg.n_paths)?;
    Ok(groups.into_iter().flat_map(|g| g.0).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityGrid {
    pub centers: Vec<f64>,
    pub densities: Vec<f64>,
    pub bin_width: f64,
}

impl DensityGrid {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["center", "density"])?;
        for (c, d) in self.centers.iter().zip(&self.densities) {
            wtr.write_record([c.to_string(), d.to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Probability mass of bins whose centre lies below `x`.
    pub fn mass_below(&self, x: f64) -> f64 {
        self.centers
            .iter()
            .zip(&self.densities)
            .filter(|(c, _)| **c < x)
            .map(|(_, d)| d * self.bin_width)
            .sum()
    }
}

/// Demeans and scales by the cross-sectional standard deviation.
pub fn standardize(values: &mut [f64]) -> Result<()> {
    let mut m = Moments::default();
    values.iter().for_each(|&v| m.push(v));
    let sd = m.variance().sqrt();
    if !(sd > 0.0) {
        return Err(Error::Degenerate("cannot standardize a constant sample".into()));
    }
    values.iter_mut().for_each(|v| *v = (*v - m.mean) / sd);
    Ok(())
}

/// Histogram of `values` over `[min, max]` normalized to unit integral.
pub fn histogram_density(values: &[f64], n_bins: usize) -> Result<DensityGrid> {
    if n_bins < 10 {
        return Err(Error::Contract("density grid needs at least 10 bins".into()));
    }
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !(hi > lo) {
        return Err(Error::Degenerate("sample has no spread".into()));
    }
    let width = (hi - lo) / n_bins as f64;
    let mut counts = vec![0usize; n_bins];
    for &v in values {
        let k = (((v - lo) / width) as usize).min(n_bins - 1);
        counts[k] += 1;
    }
    let n = values.len() as f64;
    Ok(DensityGrid {
        centers: (0..n_bins).map(|k| lo + (k as f64 + 0.5) * width).collect(),
        densities: counts.iter().map(|&c| c as f64 / (n * width)).collect(),
        bin_width: width,
    })
}

/// Histogram density of standardized cumulative returns at `horizon`.
pub fn density_grid(cfg: &SimConfig, horizon: usize, n_bins: usize) -> Result<DensityGrid> {
    let mut v = cumulative_returns(cfg, horizon)?;
    standardize(&mut v)?;
    histogram_density(&v, n_bins)
}

/// Monte Carlo expectation of the variance path with standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McPath {
    /// `E h_{t+k}`, `k = 1..=horizon`.
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    pub vix: f64,
    pub vix_stderr: f64,
    pub n_paths: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Weighting {
    Direct,
    /// Simulate under P and weight by the product of one-day SDFs.
    Sdf,
}

#[derive(Default, Clone)]
struct PathSums {
    s1: Vec<f64>,
    s2: Vec<f64>,
    tot1: f64,
    tot2: f64,
    n: usize,
    flagged: usize,
}

impl PathSums {
    fn new(k: usize) -> Self {
        PathSums {
            s1: vec![0.0; k],
            s2: vec![0.0; k],
            ..Default::default()
        }
    }

    fn absorb(&mut self, o: &PathSums) {
        for i in 0..self.s1.len() {
            self.s1[i] += o.s1[i];
            self.s2[i] += o.s2[i];
        }
        self.tot1 += o.tot1;
        self.tot2 += o.tot2;
        self.n += o.n;
        self.flagged += o.flagged;
    }
}

fn mc_path(
    params: &ModelParams,
    measure: Measure,
    weighting: Weighting,
    h_next: f64,
    horizon: usize,
    n_paths: usize,
    seed: u64,
) -> Result<McPath> {
    params.validate()?;
    if n_paths < 2 || horizon == 0 {
        return Err(Error::Contract("need at least two paths and a positive horizon".into()));
    }
    let sim_measure = match weighting {
        Weighting::Direct => measure,
        Weighting::Sdf => Measure::P,
    };
    let dynamics = Dynamics::new(params, sim_measure)?;
    let sdf = match (weighting, params) {
        (Weighting::Direct, _) => None,
        (Weighting::Sdf, ModelParams::Rg(p)) => Some(SdfState::new(p.lambda, p.xi)?),
        (Weighting::Sdf, ModelParams::Eg(p)) => Some(SdfState::new(p.lambda, 0.0)?),
        (Weighting::Sdf, ModelParams::G(p)) => Some(SdfState::new(p.lambda, 0.0)?),
        (Weighting::Sdf, ModelParams::Hn(p)) if p.eta.is_none() => Some(SdfState::new(p.lambda, 0.0)?),
        (Weighting::Sdf, ModelParams::Hn(_)) => {
            return Err(Error::Unsupported(
                "SDF-weighted simulation is not implemented for the variance-dependent HN kernel".into(),
            ))
        }
    };
    let hn_variance_scaled = matches!(params, ModelParams::Hn(_));
    if !(h_next.is_finite() && h_next > 0.0) {
        return Err(Error::Contract(format!("h_next = {h_next} must be positive")));
    }
    let start = dynamics.state_from(h_next);
    let rf = 0.0;

    let sums: Vec<PathSums> = group_ranges(n_paths)
        .into_par_iter()
        .map(|(a, b)| {
            let mut acc = PathSums::new(horizon);
            let mut hk = vec![0.0; horizon];
            for i in a..b {
                let mut stream = NormalStream::new(seed, i as u64);
                let mut w = 1.0;
                // only horizon - 1 shocks matter; the last day's draw is unused
                let ok = run_path(&dynamics, &mut stream, start, 0, horizon, rf, |day, h, e1, e2, _| {
                    hk[day] = w * h;
                    if let Some(s) = sdf {
                        // HN's equity price is per unit of variance
                        let lam = if hn_variance_scaled { s.lambda * h.sqrt() } else { s.lambda };
                        w *= sdf_value(e1, e2, SdfState { lambda: lam, xi: s.xi });
                    }
                });
                if ok {
                    let tot: f64 = hk.iter().sum();
                    for k in 0..horizon {
                        acc.s1[k] += hk[k];
                        acc.s2[k] += hk[k] * hk[k];
                    }
                    acc.tot1 += tot;
                    acc.tot2 += tot * tot;
                    acc.n += 1;
                } else {
                    acc.flagged += 1;
                }
            }
            acc
        })
        .collect();
    let mut all = PathSums::new(horizon);
    for s in &sums {
        all.absorb(s);
    }
    check_flagged(all.flagged, n_paths)?;
    let n = all.n as f64;
    let se = |s1: f64, s2: f64| {
        let m = s1 / n;
        ((s2 / n - m * m).max(0.0) / (n - 1.0)).sqrt()
    };
    let mean: Vec<f64> = all.s1.iter().map(|s| s / n).collect();
    let stderr: Vec<f64> = (0..horizon).map(|k| se(all.s1[k], all.s2[k])).collect();
    let total = all.tot1 / n;
    let total_se = se(all.tot1, all.tot2);
    let vix = annualize_sum(total, horizon);
    // d VIX / d S = 100 * (252 / n) / (2 sqrt(252 S / n))
    let a = 252.0 / horizon as f64;
    let vix_stderr = if total > 0.0 { 100.0 * a * total_se / (2.0 * (a * total).sqrt()) } else { f64::NAN };
    Ok(McPath {
        mean,
        stderr,
        vix,
        vix_stderr,
        n_paths: all.n,
    })
}

/// Monte Carlo `E h_{t+k}` under `measure`, simulating that measure's dynamics directly.
pub fn mc_expected_path(
    params: &ModelParams,
    measure: Measure,
    h_next: f64,
    horizon: usize,
    n_paths: usize,
    seed: u64,
) -> Result<McPath> {
    mc_path(params, measure, Weighting::Direct, h_next, horizon, n_paths, seed)
}

/// Monte Carlo VIX from `h_{t+1} = h_next` under the mapped Q dynamics.
pub fn mc_vix_oracle(params: &ModelParams, h_next: f64, n_paths: usize, seed: u64) -> Result<McPath> {
    mc_path(params, Measure::Q, Weighting::Direct, h_next, VIX_HORIZON, n_paths, seed)
}

/// Q expectations estimated from P paths weighted by cumulative SDF products.
pub fn mc_expected_path_sdf_weighted(
    params: &ModelParams,
    h_next: f64,
    horizon: usize,
    n_paths: usize,
    seed: u64,
) -> Result<McPath> {
    mc_path(params, Measure::Q, Weighting::Sdf, h_next, horizon, n_paths, seed)
}

/// Long-run statistics of `ln h` from one long path, with batch-means standard errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogHStats {
    pub mean: f64,
    pub mean_se: f64,
    pub var: f64,
    pub var_se: f64,
    /// Correlation of the return shock with the next log-variance innovation.
    pub corr: f64,
    pub corr_se: f64,
}

pub fn long_run_logh_stats(params: &ModelParams, measure: Measure, n_days: usize, burn_in: usize, seed: u64) -> Result<LogHStats> {
    params.validate()?;
    const BATCHES: usize = 100;
    if n_days < BATCHES * 100 {
        return Err(Error::Contract(format!("need at least {} days", BATCHES * 100)));
    }
    let dynamics = Dynamics::new(params, measure)?;
    if !dynamics.log_model() {
        return Err(Error::Unsupported("log-variance statistics need a log-variance model".into()));
    }
    let start = dynamics.stationary_h()?;
    let beta = dynamics.beta();
    let mut stream = NormalStream::new(seed, 0);
    let mut lh = Vec::with_capacity(n_days + 1);
    let mut z = Vec::with_capacity(n_days);
    let ok = run_path(&dynamics, &mut stream, State { h: start, lh: start.ln() }, burn_in, n_days, 0.0, |_, h, e1, _, _| {
        lh.push(h.ln());
        z.push(e1);
    });
    if !ok {
        return Err(Error::Simulation("long path left the admissible variance range".into()));
    }
    let n = n_days as f64;
    let mean = lh.iter().sum::<f64>() / n;
    let var = lh.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    // innovations ln h_{t+1} - beta ln h_t up to a constant
    let innov: Vec<f64> = lh.windows(2).map(|w| w[1] - beta * w[0]).collect();
    let corr_of = |a: &[f64], b: &[f64]| -> f64 {
        let k = a.len() as f64;
        let ma = a.iter().sum::<f64>() / k;
        let mb = b.iter().sum::<f64>() / k;
        let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
        for (x, y) in a.iter().zip(b) {
            sab += (x - ma) * (y - mb);
            saa += (x - ma).powi(2);
            sbb += (y - mb).powi(2);
        }
        sab / (saa * sbb).sqrt()
    };
    let corr = corr_of(&z[..innov.len()], &innov);

    let size = n_days / BATCHES;
    let mut bm = Vec::with_capacity(BATCHES);
    let mut bv = Vec::with_capacity(BATCHES);
    let mut bc = Vec::with_capacity(BATCHES);
    for b in 0..BATCHES {
        let (lo, hi) = (b * size, (b + 1) * size);
        let seg = &lh[lo..hi];
        bm.push(seg.iter().sum::<f64>() / size as f64);
        bv.push(seg.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / size as f64);
        let hi_c = hi.min(innov.len());
        bc.push(corr_of(&z[lo..hi_c], &innov[lo..hi_c]));
    }
    let se = |v: &[f64]| {
        let k = v.len() as f64;
        let m = v.iter().sum::<f64>() / k;
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (k - 1.0) / k).sqrt()
    };
    Ok(LogHStats {
        mean,
        mean_se: se(&bm),
        var,
        var_se: se(&bv),
        corr,
        corr_se: se(&bc),
    })
}

/// Synthetic market data simulated under P: returns, realized measure (RG) or
/// a log-normally perturbed conditional variance (other families), and the
/// model VIX priced off `h_{t+1}` plus Gaussian noise with the parameters'
/// `sigma_vix`.
pub fn simulate_market(params: &ModelParams, n_days: usize, seed: u64, start_date: NaiveDate) -> Result<MarketSeries> {
    params.validate()?;
    let dynamics = Dynamics::new(params, Measure::P)?;
    let pricer = Pricer::new(params, Measure::Q)?;
    let start = dynamics.stationary_h()?;
    let mut stream = NormalStream::new(seed, 0);
    let mut noise = NormalStream::new(seed, 1);
    let mut s = State { h: start, lh: start.ln() };
    let uses_u = dynamics.uses_u();
    for _ in 0..750 {
        let e1 = stream.normal();
        let e2 = if uses_u { stream.normal() } else { 0.0 };
        dynamics.step(&mut s, e1, e2, 0.0);
    }
    let mut rows = Vec::with_capacity(n_days);
    let mut date = start_date;
    for _ in 0..n_days {
        let e1 = stream.normal();
        let e2 = if uses_u { stream.normal() } else { 0.0 };
        let d = dynamics.step(&mut s, e1, e2, 0.0);
        if !admissible(&s) {
            return Err(Error::Simulation("synthetic path left the admissible variance range".into()));
        }
        let x = if uses_u { d.x } else { d.x * (0.5 * noise.normal() - 0.125).exp() };
        let vix = pricer.vix(s.h)? + params.sigma_vix() * noise.normal();
        rows.push(ObservationRow {
            date,
            log_return: d.r,
            realized_measure: x,
            overnight_return: 0.0,
            vix: vix.max(0.01),
        });
        date = date.succ_opt().ok_or_else(|| Error::Simulation("date overflow".into()))?;
    }
    MarketSeries::new(rows, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::sp500_2004_2018;
    use proptest::prelude::*;
    use statrs::distribution::{ContinuousCDF, Normal};

    #[test]
    fn normal_inv_matches_reference() {
        let n = Normal::new(0.0, 1.0).unwrap();
        for &p in &[1e-300, 1e-20, 1e-10, 1e-5, 0.01, 0.1, 0.3, 0.5, 0.7, 0.975, 0.999_999, 1.0 - 1e-12] {
            let x = normal_inv(p);
            assert!((n.cdf(x) / p - 1.0).abs() < 1e-9 || (n.cdf(x) - p).abs() < 1e-15, "p = {p}");
        }
        assert!((normal_inv(0.975) - 1.959_963_984_540_054).abs() < 1e-14);
        assert_eq!(normal_inv(0.5), 0.0);
    }

    proptest! {
        #[test]
        fn normal_inv_is_antisymmetric(p in 1e-12f64..0.5) {
            prop_assert!((normal_inv(p) + normal_inv(1.0 - p)).abs() < 1e-9);
        }

        #[test]
        fn moments_merge_equals_sequential(v in proptest::collection::vec(-10.0f64..10.0, 4..60), cut in 1usize..3) {
            let k = v.len() / (cut + 1);
            let mut a = Moments::default();
            let mut b = Moments::default();
            let mut all = Moments::default();
            for (i, &x) in v.iter().enumerate() {
                if i < k { a.push(x) } else { b.push(x) }
                all.push(x);
            }
            let m = a.merge(&b);
            prop_assert!((m.mean - all.mean).abs() < 1e-9);
            prop_assert!((m.m2 - all.m2).abs() < 1e-7 * (1.0 + all.m2.abs()));
            prop_assert!((m.m3 - all.m3).abs() < 1e-7 * (1.0 + all.m3.abs()));
            prop_assert!((m.m4 - all.m4).abs() < 1e-7 * (1.0 + all.m4.abs()));
        }
    }

    #[test]
    fn moments_against_two_pass() {
        let v = [1.0, 4.0, -2.0, 0.5, 9.0, 3.3];
        let mut m = Moments::default();
        v.iter().for_each(|&x| m.push(x));
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let c = |k: i32| v.iter().map(|x| (x - mean).powi(k)).sum::<f64>() / n;
        assert!((m.skewness() - c(3) / c(2).powf(1.5)).abs() < 1e-12);
        assert!((m.excess_kurtosis() - (c(4) / (c(2) * c(2)) - 3.0)).abs() < 1e-12);
    }

    #[test]
    fn rng_sanity() {
        let mut s = NormalStream::new(42, 7);
        let n = 200_000;
        let mut m = Moments::default();
        for _ in 0..n {
            m.push(s.normal());
        }
        let se = (1.0 / n as f64).sqrt();
        assert!(m.mean.abs() < 4.0 * se);
        assert!((m.variance() - 1.0).abs() < 4.0 * (2.0f64 / n as f64).sqrt());
    }

    #[test]
    fn constant_variance_without_shocks() {
        let mut p = sp500_2004_2018::rg();
        p.tau1 = 0.0;
        p.tau2 = 0.0;
        p.gamma = 0.0;
        let cfg = SimConfig {
            burn_in: 10,
            ..SimConfig::new(ModelParams::Rg(p), Measure::P, 5, 30, 1)
        };
        let e = simulate_paths(&cfg).unwrap();
        let h0 = e.h[0][0];
        assert!(e.h.iter().flatten().all(|h| (h / h0 - 1.0).abs() < 1e-12));
    }

    #[test]
    fn degenerate_oracle_has_zero_stderr() {
        let mut p = sp500_2004_2018::g();
        p.alpha = 0.0;
        p.omega = (1.0 - p.beta) * 1e-4;
        let mc = mc_vix_oracle(&ModelParams::G(p), 1e-4, 100, 3).unwrap();
        assert!((mc.vix - 100.0 * (252.0f64 * 1e-4).sqrt()).abs() < 1e-10);
        assert!(mc.vix_stderr < 1e-12);
    }

    #[test]
    fn paths_do_not_depend_on_ensemble_size() {
        let params = ModelParams::Rg(sp500_2004_2018::rg());
        let small = simulate_paths(&SimConfig {
            burn_in: 5,
            ..SimConfig::new(params, Measure::Q, 3, 20, 9)
        })
        .unwrap();
        let large = simulate_paths(&SimConfig {
            burn_in: 5,
            ..SimConfig::new(params, Measure::Q, 8, 20, 9)
        })
        .unwrap();
        assert_eq!(small.r[2], large.r[2]);
    }

    #[test]
    fn density_normalization() {
        let mut p = sp500_2004_2018::g();
        p.alpha = 0.0;
        p.omega = (1.0 - p.beta) * 1e-4;
        let cfg = SimConfig::new(ModelParams::G(p), Measure::P, 20_000, 1, 5);
        let g = density_grid(&cfg, 1, 40).unwrap();
        let total: f64 = g.densities.iter().map(|d| d * g.bin_width).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(g.densities.iter().all(|d| *d >= 0.0));
        assert!(matches!(density_grid(&cfg, 1, 5), Err(Error::Contract(_))));
    }

    #[test]
    fn synthetic_market_is_valid() {
        let s = simulate_market(
            &ModelParams::Rg(sp500_2004_2018::rg()),
            300,
            1,
            NaiveDate::from_ymd_opt(2010, 1, 1).unwrap(),
        )
        .unwrap();
        assert_eq!(s.len(), 300);
        assert!(s.vix().iter().all(|v| *v > 0.0));
    }

    #[test]
    fn moment_curve_csv() {
        let cfg = SimConfig {
            burn_in: 0,
            ..SimConfig::new(ModelParams::Eg(sp500_2004_2018::eg()), Measure::P, 300, 5, 2)
        };
        let c = cumret_moments(&cfg, &[1, 5]).unwrap();
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 3);
        assert!(c.skew_se.iter().all(|s| *s > 0.0));
    }
}
