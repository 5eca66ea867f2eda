//! Unconstrained minimizers: adaptive Nelder-Mead followed by a BFGS polish
//! with central-difference gradients. Objectives may return `+inf` (or NaN)
//! for inadmissible points; both methods treat those as rejections.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimOptions {
    pub nm_max_evals: usize,
    /// Simplex stops when the spread of values is below `nm_ftol * (1 + |f|)`
    /// and its diameter below `nm_xtol`.
    pub nm_ftol: f64,
    pub nm_xtol: f64,
    pub nm_step: f64,
    pub bfgs_max_iter: usize,
    /// Stops when the largest gradient component is below `gtol * (1 + |f|)`.
    pub bfgs_gtol: f64,
}

impl Default for OptimOptions {
    fn default() -> Self {
        OptimOptions {
            nm_max_evals: 4000,
            nm_ftol: 1e-10,
            nm_xtol: 1e-7,
            nm_step: 0.1,
            bfgs_max_iter: 200,
            bfgs_gtol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
    pub iterations: usize,
    pub converged: bool,
    /// Best value after each iteration; non-increasing.
    pub trace: Vec<f64>,
}

fn clean(v: f64) -> f64 {
    if v.is_nan() {
        f64::INFINITY
    } else {
        v
    }
}

/// Nelder-Mead with dimension-adaptive coefficients.
pub fn nelder_mead<F: Fn(&[f64]) -> f64>(f: F, x0: &[f64], opts: &OptimOptions) -> Minimum {
    let n = x0.len();
    let nf = n as f64;
    let (alpha, gamma, rho, shrink) = if n >= 2 {
        (1.0, 1.0 + 2.0 / nf, 0.75 - 1.0 / (2.0 * nf), 1.0 - 1.0 / nf)
    } else {
        (1.0, 2.0, 0.5, 0.5)
    };
    let evals = std::cell::Cell::new(0usize);
    let eval = |x: &[f64]| {
        evals.set(evals.get() + 1);
        clean(f(x))
    };

    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x0.to_vec(), eval(x0)));
    for i in 0..n {
        let mut x = x0.to_vec();
        let step = if x[i].abs() > 1e-8 { opts.nm_step * x[i].abs().max(0.25) } else { opts.nm_step * 0.25 };
        x[i] += step;
        let fx = eval(&x);
        simplex.push((x, fx));
    }

    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    while evals.get() < opts.nm_max_evals {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        iterations += 1;
        let best = simplex[0].1;
        trace.push(best);
        let worst = simplex[n].1;
        let diameter = simplex[1..]
            .iter()
            .flat_map(|(x, _)| x.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()))
            .fold(0.0f64, f64::max);
        if best.is_finite() && (worst - best).abs() <= opts.nm_ftol * (1.0 + best.abs()) && diameter <= opts.nm_xtol {
            converged = true;
            break;
        }

        let mut centroid = vec![0.0; n];
        for (x, _) in &simplex[..n] {
            for (c, xi) in centroid.iter_mut().zip(x) {
                *c += xi / nf;
            }
        }
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&simplex[n].0)
                .map(|(c, w)| c + t * (c - w))
                .collect()
        };

        let xr = along(alpha);
        let fr = eval(&xr);
        if fr < simplex[0].1 {
            let xe = along(alpha * gamma);
            let fe = eval(&xe);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
            continue;
        }
        let (xc, fc) = if fr < simplex[n].1 {
            let xc = along(alpha * rho);
            let fc = eval(&xc);
            (xc, fc)
        } else {
            let xc = along(-rho);
            let fc = eval(&xc);
            (xc, fc)
        };
        if fc < simplex[n].1.min(fr) {
            simplex[n] = (xc, fc);
            continue;
        }
        let x_best = simplex[0].0.clone();
        for (x, fx) in simplex.iter_mut().skip(1) {
            for (xi, bi) in x.iter_mut().zip(&x_best) {
                *xi = bi + shrink * (*xi - bi);
            }
            *fx = eval(x);
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, fx) = simplex.swap_remove(0);
    if trace.last().is_none_or(|&t| fx < t) {
        trace.push(fx);
    }
    Minimum {
        x,
        f: fx,
        evals: evals.get(),
        iterations,
        converged,
        trace,
    }
}

/// Central-difference gradient; falls back to one-sided differences next to
/// inadmissible points and to zero when both sides are inadmissible.
pub fn numeric_gradient<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64], fx: f64, evals: &mut usize) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let h = 1e-5 * x[i].abs().max(1.0);
        xp[i] = x[i] + h;
        let fp = clean(f(&xp));
        xp[i] = x[i] - h;
        let fm = clean(f(&xp));
        xp[i] = x[i];
        *evals += 2;
        g[i] = match (fp.is_finite(), fm.is_finite()) {
            (true, true) => (fp - fm) / (2.0 * h),
            (true, false) => (fp - fx) / h,
            (false, true) => (fx - fm) / h,
            (false, false) => 0.0,
        };
    }
    g
}

/// BFGS with backtracking Armijo line search.
pub fn bfgs<F: Fn(&[f64]) -> f64>(f: F, x0: &[f64], opts: &OptimOptions) -> Minimum {
    let n = x0.len();
    let mut evals = 1;
    let mut x = DVector::from_column_slice(x0);
    let mut fx = clean(f(x0));
    let mut trace = vec![fx];
    if !fx.is_finite() {
        return Minimum {
            x: x0.to_vec(),
            f: fx,
            evals,
            iterations: 0,
            converged: false,
            trace,
        };
    }
    let mut g = DVector::from_vec(numeric_gradient(&f, x.as_slice(), fx, &mut evals));
    let mut hinv = DMatrix::<f64>::identity(n, n);
    let mut first = true;
    let mut converged = false;
    let mut iterations = 0;
    let mut stalls = 0;

    while iterations < opts.bfgs_max_iter {
        iterations += 1;
        if g.amax() <= opts.bfgs_gtol * (1.0 + fx.abs()) {
            converged = true;
            break;
        }
        let mut d = -(&hinv * &g);
        let mut slope = g.dot(&d);
        if !(slope < 0.0) {
            hinv = DMatrix::identity(n, n);
            d = -g.clone();
            slope = g.dot(&d);
        }
        if first {
            // keep the first trial step modest in the unconstrained coordinates
            let scale = (1.0 / d.amax()).min(1.0);
            d *= scale;
            slope *= scale;
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let xt = &x + t * &d;
            let ft = clean(f(xt.as_slice()));
            evals += 1;
            if ft.is_finite() && ft <= fx + 1e-4 * t * slope {
                accepted = Some((xt, ft));
                break;
            }
            t *= 0.5;
        }
        let Some((xn, fnew)) = accepted else {
            // No descent along a numerically estimated direction: treat as stationary.
            converged = g.amax() <= 1e3 * opts.bfgs_gtol * (1.0 + fx.abs());
            break;
        };
        let gn = DVector::from_vec(numeric_gradient(&f, xn.as_slice(), fnew, &mut evals));
        let s = &xn - &x;
        let y = &gn - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if first {
                hinv *= sy / y.dot(&y);
                first = false;
            }
            let rho = 1.0 / sy;
            let hy = &hinv * &y;
            let yhy = y.dot(&hy);
            hinv += ((1.0 + rho * yhy) * rho) * (&s * s.transpose()) - rho * (&hy * s.transpose() + &s * hy.transpose());
        }
        let improvement = fx - fnew;
        x = xn;
        g = gn;
        fx = fnew;
        trace.push(fx);
        if improvement <= 1e-13 * (1.0 + fx.abs()) {
            stalls += 1;
            if stalls >= 3 {
                converged = true;
                break;
            }
        } else {
            stalls = 0;
        }
    }
    Minimum {
        x: x.as_slice().to_vec(),
        f: fx,
        evals,
        iterations,
        converged,
        trace,
    }
}

/// Simplex search, then quasi-Newton polish from the simplex optimum.
pub fn minimize<F: Fn(&[f64]) -> f64>(f: F, x0: &[f64], opts: &OptimOptions) -> Minimum {
    let nm = nelder_mead(&f, x0, opts);
    if !nm.f.is_finite() {
        return nm;
    }
    let polish = bfgs(&f, &nm.x, opts);
    let mut trace = nm.trace;
    let mut best = trace.last().copied().unwrap_or(f64::INFINITY);
    for v in polish.trace {
        best = best.min(v);
        trace.push(best);
    }
    let (x, fx) = if polish.f <= nm.f { (polish.x, polish.f) } else { (nm.x, nm.f) };
    Minimum {
        x,
        f: fx,
        evals: nm.evals + polish.evals,
        iterations: nm.iterations + polish.iterations,
        converged: polish.converged || nm.converged,
        trace,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rosenbrock(x: &[f64]) -> f64 {
        x.windows(2).map(|w| 100.0 * (w[1] - w[0] * w[0]).powi(2) + (1.0 - w[0]).powi(2)).sum()
    }

    #[test]
    fn rosenbrock_minimum() {
        let m = minimize(rosenbrock, &[-1.2, 1.0, 0.5, -0.3], &OptimOptions::default());
        assert!(m.converged);
        for xi in &m.x {
            assert!((xi - 1.0).abs() < 1e-4, "{:?}", m.x);
        }
    }

    #[test]
    fn quadratic_bfgs_exact() {
        let f = |x: &[f64]| 3.0 * (x[0] - 2.0).powi(2) + 0.5 * (x[1] + 1.0).powi(2) + x[0] * x[1];
        let m = bfgs(f, &[0.0, 0.0], &OptimOptions::default());
        // stationary point of the quadratic
        let a = nalgebra::Matrix2::new(6.0, 1.0, 1.0, 1.0);
        let b = nalgebra::Vector2::new(12.0, -1.0);
        let sol = a.lu().solve(&b).unwrap();
        assert!((m.x[0] - sol[0]).abs() < 1e-5 && (m.x[1] - sol[1]).abs() < 1e-5);
    }

    #[test]
    fn infinite_region_is_avoided() {
        let f = |x: &[f64]| if x[0] <= 0.0 { f64::INFINITY } else { x[0] - x[0].ln() + (x[1] - 3.0).powi(2) };
        let m = minimize(f, &[5.0, 0.0], &OptimOptions::default());
        assert!((m.x[0] - 1.0).abs() < 1e-5 && (m.x[1] - 3.0).abs() < 1e-5);
    }

    #[test]
    fn nan_objective_does_not_poison() {
        let f = |x: &[f64]| if x[0] > 2.0 { f64::NAN } else { (x[0] - 1.0).powi(2) };
        let m = minimize(f, &[1.9], &OptimOptions::default());
        assert!((m.x[0] - 1.0).abs() < 1e-5);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn best_so_far_never_increases(a in -3.0f64..3.0, b in -3.0f64..3.0, c in 0.1f64..5.0) {
            let f = move |x: &[f64]| c * (x[0] - a).powi(2) + (x[1] - b).powi(4) + (x[0] * x[1]).sin();
            let m = minimize(f, &[0.0, 0.0], &OptimOptions::default());
            for w in m.trace.windows(2) {
                prop_assert!(w[1] <= w[0]);
            }
            prop_assert_eq!(*m.trace.last().unwrap(), m.f);
        }
    }
}
