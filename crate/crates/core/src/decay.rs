//! Decay rates `sup { <c, theta> : chi(theta) < 1 }` and the shape of the region.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernel::Lattice;
use crate::optimize::{self, Minimum};
use crate::spectral::{self, GRADIENT_TOL, MAX_DESCENT_ITERATIONS};

/// `gamma_dagger` at or above `1 - EMPTY_MARGIN` leaves no interior to search.
const EMPTY_MARGIN: f64 = 1e-12;
const OUTER_TOL: f64 = 1e-12;
const MAX_OUTER: usize = 200;
const MAX_DOUBLINGS: usize = 60;
/// Shift into the open orthant used by [`domain_contains`].
const DOMAIN_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Serialize)]
pub struct DecayDiagnostics {
    pub outer_iterations: usize,
    /// Width of the final outer bracket or the last Newton correction, whichever is smaller.
    pub outer_width: f64,
    pub inner_iterations: usize,
    /// Projected gradient norm of the final inner minimization.
    pub inner_gradient_norm: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DecayReport {
    pub c: Vec<i64>,
    pub rate: f64,
    pub theta_star: Vec<f64>,
    pub chi: f64,
    /// `-rate`: lower bound for the log-decay of the stationary tail of the
    /// associated reflected process along `c`.
    pub qbd_lower_bound: f64,
    pub diagnostics: DecayDiagnostics,
}

fn direction(k: &impl Lattice, c: &[i64]) -> Result<Vec<f64>> {
    if c.len() != k.dim() {
        return Err(Error::DimensionMismatch(format!("direction has {} components, kernel has d = {}", c.len(), k.dim())));
    }
    if c.iter().any(|&x| x < 0) {
        return Err(Error::InvariantViolation(format!("direction {c:?} has a negative component")));
    }
    if c.iter().all(|&x| x == 0) {
        return Err(Error::ZeroDirection);
    }
    Ok(c.iter().map(|&x| x as f64).collect())
}

fn nonempty(k: &impl Lattice) -> Result<spectral::SpectralSummary> {
    let summary = spectral::minimize_chi(k)?;
    if summary.gamma_dagger >= 1.0 - EMPTY_MARGIN {
        return Err(Error::EmptyGamma { gamma_dagger: summary.gamma_dagger });
    }
    Ok(summary)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `min { log chi(theta) : <c, theta> = t }` started from `warm` moved onto the hyperplane.
/// `None` when `chi` overflows at the start.
fn slice_minimum(k: &impl Lattice, c: &[f64], t: f64, warm: &[f64]) -> Result<Option<Minimum>> {
    let shift = (t - dot(c, warm)) / dot(c, c);
    let x0: Vec<f64> = warm.iter().zip(c).map(|(w, ci)| w + shift * ci).collect();
    if !spectral::chi(k, &x0)?.is_finite() {
        return Ok(None);
    }
    let min = optimize::bfgs(|th| spectral::log_chi_with_gradient(k, th), x0, Some(c), GRADIENT_TOL, MAX_DESCENT_ITERATIONS)?;
    Ok(Some(min))
}

/// Slope of the slice minimum in `t`: the normal part of the gradient.
fn slice_slope(c: &[f64], min: &Minimum) -> f64 {
    dot(&min.gradient, c) / dot(c, c)
}

/// Decay rate in direction `c` (nonnegative integers, not all zero).
///
/// `h(t) = min { log chi : <c, theta> = t }` is convex, negative at `<c, theta_dagger>`,
/// and the rate is its upper root. The root is bracketed by doubling and then
/// found by Newton steps from the right, which stay to the right of the root for
/// a convex increasing function; bisection takes over when a step leaves the bracket.
pub fn decay_rate<L: Lattice>(k: &L, c: &[i64]) -> Result<DecayReport> {
    let cf = direction(k, c)?;
    let summary = nonempty(k)?;
    let mut inner_iterations = 0;
    let mut eval = |t: f64, warm: &[f64]| -> Result<Option<Minimum>> {
        let m = slice_minimum(k, &cf, t, warm)?;
        if let Some(m) = &m {
            inner_iterations += m.iterations;
        }
        Ok(m)
    };

    let t0 = dot(&cf, &summary.theta_dagger);
    let scale = dot(&cf, &cf).sqrt();
    let mut lo = t0;
    let mut lo_min = Minimum {
        x: summary.theta_dagger.clone(),
        value: summary.gamma_dagger.ln(),
        gradient: vec![0.0; cf.len()],
        gradient_norm: summary.gradient_norm,
        iterations: 0,
        converged: summary.converged,
    };
    let mut step = scale;
    let mut hi_min = None;
    let mut hi = lo;
    for _ in 0..MAX_DOUBLINGS {
        hi = lo + step;
        match eval(hi, &lo_min.x)? {
            Some(m) if m.value <= 0.0 => {
                lo = hi;
                lo_min = m;
                step *= 2.0;
            }
            other => {
                hi_min = other;
                break;
            }
        }
    }
    if hi == lo {
        return Err(Error::BracketFailure { direction: cf });
    }

    let mut outer_iterations = 0;
    let mut last_correction = f64::INFINITY;
    while outer_iterations < MAX_OUTER && hi - lo > OUTER_TOL * hi.abs().max(1.0) {
        outer_iterations += 1;
        let newton = hi_min.as_ref().and_then(|m| {
            let slope = slice_slope(&cf, m);
            (slope > 0.0 && m.value.is_finite()).then(|| hi - m.value / slope)
        });
        let (t, warm) = match newton {
            Some(t) if t > lo && t < hi => (t, hi_min.as_ref().map_or(lo_min.x.clone(), |m| m.x.clone())),
            _ => (0.5 * (lo + hi), lo_min.x.clone()),
        };
        match eval(t, &warm)? {
            Some(m) if m.value <= 0.0 => {
                lo = t;
                lo_min = m;
            }
            other => {
                last_correction = hi - t;
                hi = t;
                hi_min = other;
            }
        }
        if last_correction <= OUTER_TOL * hi.abs().max(1.0) {
            break;
        }
    }

    // the endpoint closer to chi = 1 is the reported maximizer
    let use_hi = hi_min.as_ref().is_some_and(|h| h.value.abs() < lo_min.value.abs());
    let (rate, best) = if use_hi { (hi, hi_min.expect("checked above")) } else { (lo, lo_min) };
    let chi = spectral::chi(k, &best.x)?;
    Ok(DecayReport {
        c: c.to_vec(),
        rate,
        qbd_lower_bound: -rate,
        chi,
        diagnostics: DecayDiagnostics {
            outer_iterations,
            outer_width: (hi - lo).min(last_correction),
            inner_iterations,
            inner_gradient_norm: best.gradient_norm,
        },
        theta_star: best.x,
    })
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

/// `sup { c_min t : chi(t c) < 1 }` for mutually prime positive `c`.
///
/// Returns 0 when the part of the ray inside the region has no positive `t`.
pub fn marginal_decay_rate<L: Lattice>(k: &L, c: &[i64]) -> Result<f64> {
    if c.len() != k.dim() {
        return Err(Error::DimensionMismatch(format!("direction has {} components, kernel has d = {}", c.len(), k.dim())));
    }
    if c.iter().any(|&x| x < 1) || c.iter().copied().fold(0, gcd) != 1 {
        return Err(Error::NotCoprime(c.to_vec()));
    }
    nonempty(k)?;
    let cf: Vec<f64> = c.iter().map(|&x| x as f64).collect();
    let on_ray = |t: &[f64]| -> Result<(f64, Vec<f64>)> {
        let theta: Vec<f64> = cf.iter().map(|ci| ci * t[0]).collect();
        let (v, g) = spectral::log_chi_with_gradient(k, &theta)?;
        Ok((v, vec![dot(&g, &cf)]))
    };
    let min = optimize::bfgs(on_ray, vec![0.0], None, GRADIENT_TOL, MAX_DESCENT_ITERATIONS)?;
    if min.value >= 0.0 {
        return Ok(0.0);
    }
    let t_min = min.x[0];
    let center: Vec<f64> = cf.iter().map(|ci| ci * t_min).collect();
    let roots = spectral::ray_roots(k, &center, &cf)?;
    let t_plus = t_min + roots.t_plus / dot(&cf, &cf).sqrt();
    let c_min = c.iter().copied().min().expect("nonempty") as f64;
    Ok((c_min * t_plus).max(0.0))
}

/// Whether `theta` lies in the down-set `{theta : theta < theta' for some chi(theta') < 1}`.
///
/// Minimizes `log chi` over `theta' >= theta + eps` by projected gradient descent,
/// stopping as soon as a point with `chi < 1` is found.
pub fn domain_contains<L: Lattice>(k: &L, theta: &[f64]) -> Result<bool> {
    if theta.len() != k.dim() {
        return Err(Error::DimensionMismatch(format!("theta has {} components, kernel has d = {}", theta.len(), k.dim())));
    }
    let summary = nonempty(k)?;
    let lower: Vec<f64> = theta.iter().map(|t| t + DOMAIN_EPS).collect();
    let project = |x: &[f64]| -> Vec<f64> { x.iter().zip(&lower).map(|(a, b)| a.max(*b)).collect() };
    let mut x = project(&summary.theta_dagger);
    let (mut fx, mut g) = spectral::log_chi_with_gradient(k, &x)?;
    let mut alpha = 1.0;
    for _ in 0..MAX_DESCENT_ITERATIONS {
        if fx < 0.0 {
            return Ok(true);
        }
        let mut moved = false;
        for _ in 0..80 {
            let trial = project(&x.iter().zip(&g).map(|(a, b)| a - alpha * b).collect::<Vec<_>>());
            let (ft, gt) = spectral::log_chi_with_gradient(k, &trial)?;
            let step2: f64 = trial.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum();
            if step2 == 0.0 {
                break;
            }
            if ft.is_finite() && ft <= fx - 1e-4 * step2 / alpha {
                let step = step2.sqrt();
                x = trial;
                fx = ft;
                g = gt;
                alpha *= 2.0;
                moved = step > 1e-14 * (1.0 + x.iter().map(|v| v.abs()).fold(0.0, f64::max));
                break;
            }
            alpha *= 0.5;
        }
        if !moved {
            break;
        }
    }
    Ok(fx < 0.0)
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundaryPoint {
    /// Unit direction from `theta_dagger`.
    pub direction: Vec<f64>,
    pub theta: Vec<f64>,
    pub chi: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundaryTrace {
    pub center: Vec<f64>,
    pub points: Vec<BoundaryPoint>,
}

impl BoundaryTrace {
    pub fn to_csv(&self) -> String {
        let d = self.center.len();
        let mut out = String::new();
        let head: Vec<String> = (1..=d).map(|i| format!("dir_{i}")).chain((1..=d).map(|i| format!("theta_{i}"))).collect();
        let _ = writeln!(out, "{},chi", head.join(","));
        for p in &self.points {
            let cols: Vec<String> = p.direction.iter().chain(&p.theta).chain([&p.chi]).map(|v| format!("{v:.12e}")).collect();
            let _ = writeln!(out, "{}", cols.join(","));
        }
        out
    }

    /// Cross-product sign test on consecutive points of a planar trace.
    /// Returns `None` outside `d = 2`.
    pub fn is_convex(&self, tol: f64) -> Option<bool> {
        if self.center.len() != 2 || self.points.len() < 3 {
            return None;
        }
        let n = self.points.len();
        Some((0..n).all(|i| {
            let a = &self.points[i].theta;
            let b = &self.points[(i + 1) % n].theta;
            let c = &self.points[(i + 2) % n].theta;
            (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]) >= -tol
        }))
    }
}

/// Points where rays from `theta_dagger` leave the region, for `d` = 2 (equal
/// angles, counter-clockwise) or `d` = 3 (Fibonacci sphere).
pub fn gamma_boundary_trace<L: Lattice>(k: &L, n_rays: usize) -> Result<BoundaryTrace> {
    let d = k.dim();
    if d != 2 && d != 3 {
        return Err(Error::UnsupportedDimension(d));
    }
    let summary = nonempty(k)?;
    let directions: Vec<Vec<f64>> = (0..n_rays)
        .map(|i| {
            if d == 2 {
                let a = 2.0 * std::f64::consts::PI * i as f64 / n_rays as f64;
                vec![a.cos(), a.sin()]
            } else {
                let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
                let z = 1.0 - (2.0 * i as f64 + 1.0) / n_rays as f64;
                let r = (1.0 - z * z).sqrt();
                let a = golden * i as f64;
                vec![r * a.cos(), r * a.sin(), z]
            }
        })
        .collect();
    let points = directions
        .into_iter()
        .map(|u| {
            let roots = spectral::ray_roots(k, &summary.theta_dagger, &u)?;
            let theta = roots.point(roots.t_plus);
            let chi = spectral::chi(k, &theta)?;
            Ok(BoundaryPoint { direction: roots.direction, theta, chi })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BoundaryTrace { center: summary.theta_dagger, points })
}


#[cfg(test)]
mod properties {
    use super::*;
    use crate::kernel::{uniformize, Nu};
    use crate::models::{make_walk, polling_kernel, PollingParams, WalkSpec};
    use proptest::prelude::*;

    fn direction(d: usize) -> impl Strategy<Value = Vec<i64>> {
        prop::collection::vec(0i64..4, d).prop_filter("nonzero", |c| c.iter().any(|&x| x > 0))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn rate_is_homogeneous(c in direction(2), m in 2i64..4) {
            let k = make_walk(&WalkSpec::Product(vec![(0.2, 0.4, 0.4), (0.15, 0.45, 0.4)])).unwrap();
            let base = decay_rate(&k, &c).unwrap();
            prop_assert!(base.rate >= 0.0);
            let mc: Vec<i64> = c.iter().map(|x| x * m).collect();
            let scaled = decay_rate(&k, &mc).unwrap();
            prop_assert!((scaled.rate - m as f64 * base.rate).abs() < 1e-5);
        }

        #[test]
        fn rate_is_monotone_for_nonnegative_maximizers(c in direction(3), bump in 0usize..3, k in 1usize..4) {
            let kernel = uniformize(&polling_kernel(&PollingParams::table2(k)).unwrap(), Nu::Auto).unwrap();
            let small = decay_rate(&kernel, &c).unwrap();
            let mut larger = c.clone();
            larger[bump] += 1;
            let big = decay_rate(&kernel, &larger).unwrap();
            prop_assert!(small.rate >= 0.0 && big.rate >= 0.0);
            if small.theta_star.iter().all(|&t| t >= 0.0) {
                prop_assert!(small.rate <= big.rate + 1e-9);
            }
        }

        #[test]
        fn one_dimensional_rate_is_the_upper_root(p in 0.05..0.4f64, extra in 0.05..0.4f64, r in 0.0..0.3f64) {
            let q = p + extra;
            let s = p + q + r;
            let k = make_walk(&WalkSpec::Scalar { p: p / s, q: q / s, r: r / s }).unwrap();
            let rate = decay_rate(&k, &[1]).unwrap().rate;
            let summary = spectral::minimize_chi(&k).unwrap();
            let roots = spectral::ray_roots(&k, &summary.theta_dagger, &[1.0]).unwrap();
            prop_assert!((rate - roots.point(roots.t_plus)[0]).abs() < 1e-6);
            prop_assert!((rate - (q / p).ln()).abs() < 1e-8);
        }
    }
}
