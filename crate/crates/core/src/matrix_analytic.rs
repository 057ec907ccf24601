//! Rate matrix `R`, G-matrix `G`, level fundamental matrix `N` and the local
//! return kernel `H` of a block-tridiagonal kernel `{A_-1, A_0, A_1}`.
//!
//! `R` and `G` are the minimal nonnegative solutions of
//!
//! ```text
//! R = R^2 A_-1 + R A_0 + A_1,     G = A_-1 + A_0 G + A_1 G^2,
//! ```
//!
//! computed by the monotone iterations started from the zero matrix. In the
//! critical case (`gamma_dagger = 1`) those iterations converge sublinearly,
//! so every solve ends with Newton refinement of the matrix equation, which
//! keeps the minimal solution because it starts below it.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernel::{Blocks, Kernel, Lattice};
use crate::linalg;
use crate::oracle;
use crate::spectral;

/// `gamma_dagger` this close to 1 is treated as critical.
const CRITICAL_BAND: f64 = 1e-8;
/// Fixed-point budget before Newton takes over in the critical case.
const CRITICAL_BUDGET: usize = 10_000;
const MAX_NEWTON: usize = 100;
/// `spr(H)` this close to 1 cannot be told apart from a divergent `N`.
const SINGULAR_BAND: f64 = 1e-10;

/// Block-tridiagonal kernel `{A_-1, A_0, A_1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Triple {
    blocks: Blocks,
    m: usize,
}

impl Lattice for Triple {
    fn dim(&self) -> usize {
        1
    }
    fn phase_count(&self) -> usize {
        self.m
    }
    fn blocks(&self) -> &Blocks {
        &self.blocks
    }
}

impl Triple {
    pub fn new(a_minus: DMatrix<f64>, a_zero: DMatrix<f64>, a_plus: DMatrix<f64>) -> Result<Self> {
        let m = a_zero.nrows();
        for (name, b) in [("A_-1", &a_minus), ("A_0", &a_zero), ("A_1", &a_plus)] {
            if b.nrows() != m || b.ncols() != m {
                return Err(Error::DimensionMismatch(format!("{name} is {}x{}, expected {m}x{m}", b.nrows(), b.ncols())));
            }
            if b.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(Error::InvariantViolation(format!("{name} must be finite and nonnegative")));
            }
        }
        if m == 0 {
            return Err(Error::InvariantViolation("blocks are empty".into()));
        }
        if a_minus.iter().all(|&x| x == 0.0) || a_plus.iter().all(|&x| x == 0.0) {
            return Err(Error::InvariantViolation("A_-1 and A_1 must be nonzero".into()));
        }
        let mut blocks = BTreeMap::new();
        blocks.insert(vec![-1], a_minus);
        blocks.insert(vec![0], a_zero);
        blocks.insert(vec![1], a_plus);
        Ok(Self { blocks, m })
    }

    /// The triple of a one-dimensional kernel.
    pub fn from_kernel(k: &Kernel) -> Result<Self> {
        if k.dim() != 1 {
            return Err(Error::UnsupportedDimension(k.dim()));
        }
        let m = k.phase_count();
        let get = |i: i32| k.block(&[i]).cloned().unwrap_or_else(|| DMatrix::zeros(m, m));
        Self::new(get(-1), get(0), get(1))
    }

    pub fn a_minus(&self) -> &DMatrix<f64> {
        &self.blocks[&vec![-1]]
    }

    pub fn a_zero(&self) -> &DMatrix<f64> {
        &self.blocks[&vec![0]]
    }

    pub fn a_plus(&self) -> &DMatrix<f64> {
        &self.blocks[&vec![1]]
    }

    pub fn mgf(&self, theta: f64) -> DMatrix<f64> {
        self.a_minus() * (-theta).exp() + self.a_zero() + self.a_plus() * theta.exp()
    }

    fn r_map(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        x * x * self.a_minus() + x * self.a_zero() + self.a_plus()
    }

    fn g_map(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.a_minus() + self.a_zero() * x + self.a_plus() * x * x
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    /// Stop when successive iterates differ by less than this (max entry).
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { tol: 1e-13, max_iter: 1_000_000 }
    }
}

/// Solution of one matrix quadratic equation.
#[derive(Debug, Clone)]
pub struct FixedPoint {
    pub matrix: DMatrix<f64>,
    /// Iterations of the monotone fixed-point scheme.
    pub iterations: usize,
    pub newton_steps: usize,
    /// `|X - map(X)|_inf` at the returned matrix.
    pub residual: f64,
    pub gamma_dagger: f64,
}

#[derive(Clone, Copy)]
enum Equation {
    R,
    G,
}

fn precheck(t: &Triple) -> Result<f64> {
    let summary = spectral::minimize_chi(t)?;
    if summary.gamma_dagger > 1.0 + CRITICAL_BAND {
        return Err(Error::MayDiverge { gamma_dagger: summary.gamma_dagger });
    }
    Ok(summary.gamma_dagger)
}

/// Minimal nonnegative solution of `X = X^2 A_-1 + X A_0 + A_1`.
pub fn solve_r(t: &Triple, opts: SolveOptions) -> Result<FixedPoint> {
    solve(t, opts, Equation::R)
}

/// Minimal nonnegative solution of `X = A_-1 + A_0 X + A_1 X^2`.
pub fn solve_g(t: &Triple, opts: SolveOptions) -> Result<FixedPoint> {
    solve(t, opts, Equation::G)
}

fn solve(t: &Triple, opts: SolveOptions, eq: Equation) -> Result<FixedPoint> {
    let gamma_dagger = precheck(t)?;
    let critical = gamma_dagger >= 1.0 - CRITICAL_BAND;
    let map = |x: &DMatrix<f64>| match eq {
        Equation::R => t.r_map(x),
        Equation::G => t.g_map(x),
    };
    let budget = if critical { opts.max_iter.min(CRITICAL_BUDGET) } else { opts.max_iter };

    let m = t.m;
    let mut x = DMatrix::zeros(m, m);
    let mut snapshot = x.clone();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < budget {
        let next = map(&x);
        let step = linalg::max_abs(&(&next - &x));
        x = next;
        iterations += 1;
        if iterations % 100 == 0 {
            if x.iter().zip(snapshot.iter()).any(|(a, b)| a < &(b - 1e-14)) {
                return Err(Error::InvariantViolation("fixed-point iterates are not monotone".into()));
            }
            snapshot = x.clone();
        }
        if !step.is_finite() {
            return Err(Error::NoConvergence { what: "matrix fixed point", iterations });
        }
        if step < opts.tol {
            converged = true;
            break;
        }
    }
    if !converged && !critical {
        return Err(Error::NoConvergence { what: "matrix fixed point", iterations });
    }
    let (x, newton_steps) = newton_refine(t, x, eq);
    let residual = linalg::inf_norm(&(&x - map(&x)));
    Ok(FixedPoint { matrix: x, iterations, newton_steps, residual, gamma_dagger })
}

/// Newton steps on `F(X) = map(X) - X` as long as they reduce the residual.
fn newton_refine(t: &Triple, mut x: DMatrix<f64>, eq: Equation) -> (DMatrix<f64>, usize) {
    let m = t.m;
    let eye = DMatrix::<f64>::identity(m, m);
    let big_eye = DMatrix::<f64>::identity(m * m, m * m);
    let (am, a0, ap) = (t.a_minus(), t.a_zero(), t.a_plus());
    let map = |x: &DMatrix<f64>| match eq {
        Equation::R => t.r_map(x),
        Equation::G => t.g_map(x),
    };
    let mut residual = linalg::max_abs(&(map(&x) - &x));
    let mut steps = 0;
    for _ in 0..MAX_NEWTON {
        if residual == 0.0 {
            break;
        }
        // column-major vec: vec(A E B) = (B^T kron A) vec(E)
        let jac = match eq {
            Equation::R => a0.transpose().kronecker(&eye) + (&x * am).transpose().kronecker(&eye) + am.transpose().kronecker(&x) - &big_eye,
            Equation::G => eye.kronecker(a0) + x.transpose().kronecker(ap) + eye.kronecker(&(ap * &x)) - &big_eye,
        };
        let f = map(&x) - &x;
        let rhs = -DVector::from_column_slice(f.as_slice());
        let Some(e) = jac.lu().solve(&rhs) else { break };
        let mut candidate = &x + DMatrix::from_column_slice(m, m, e.as_slice());
        candidate.iter_mut().for_each(|v| *v = v.max(0.0));
        let r = linalg::max_abs(&(map(&candidate) - &candidate));
        if !(r < residual) {
            break;
        }
        x = candidate;
        residual = r;
        steps += 1;
    }
    (x, steps)
}

/// `N = (I - H)^-1` with `H = A_0 + A_1 G`.
pub fn solve_n(t: &Triple, g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let h = local_return_kernel(t, g);
    let spr = linalg::spectral_radius_any(&h);
    if (spr - 1.0).abs() <= SINGULAR_BAND {
        return Err(Error::Indeterminate { spr });
    }
    if spr > 1.0 {
        return Err(Error::Singular { spr });
    }
    let m = t.m;
    linalg::inverse(&(DMatrix::identity(m, m) - h))
}

pub fn local_return_kernel(t: &Triple, g: &DMatrix<f64>) -> DMatrix<f64> {
    t.a_zero() + t.a_plus() * g
}

#[derive(Debug, Clone, Serialize)]
pub struct Residuals {
    /// `|R - (R^2 A_-1 + R A_0 + A_1)|`
    pub r_equation: f64,
    /// `|G - (A_-1 + A_0 G + A_1 G^2)|`
    pub g_equation: f64,
    /// `max(|(I - H) N - I|, |N (I - H) - I|)`
    pub n_inverse: f64,
    /// `|R - A_1 N|`
    pub r_from_n: f64,
    /// `|G - N A_-1|`
    pub g_from_n: f64,
}

#[derive(Debug, Clone)]
pub struct MatrixAnalyticSolution {
    pub r: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub n: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub iterations_r: usize,
    pub iterations_g: usize,
    pub gamma_dagger: f64,
    pub residuals: Residuals,
}

pub fn solve_triple(t: &Triple, opts: SolveOptions) -> Result<MatrixAnalyticSolution> {
    let r = solve_r(t, opts)?;
    let g = solve_g(t, opts)?;
    let n = solve_n(t, &g.matrix)?;
    let h = local_return_kernel(t, &g.matrix);
    let m = t.m;
    let eye = DMatrix::<f64>::identity(m, m);
    let residuals = Residuals {
        r_equation: r.residual,
        g_equation: g.residual,
        n_inverse: linalg::inf_norm(&((&eye - &h) * &n - &eye)).max(linalg::inf_norm(&(&n * (&eye - &h) - &eye))),
        r_from_n: linalg::inf_norm(&(&r.matrix - t.a_plus() * &n)),
        g_from_n: linalg::inf_norm(&(&g.matrix - &n * t.a_minus())),
    };
    Ok(MatrixAnalyticSolution {
        r: r.matrix,
        g: g.matrix,
        n,
        h,
        iterations_r: r.iterations,
        iterations_g: g.iterations,
        gamma_dagger: r.gamma_dagger,
        residuals,
    })
}

/// `|(I - A*(theta)) - (I - e^theta R)(I - H)(I - e^-theta G)|_inf`.
pub fn wiener_hopf_residual(t: &Triple, sol: &MatrixAnalyticSolution, theta: f64) -> f64 {
    let m = t.m;
    let eye = DMatrix::<f64>::identity(m, m);
    let lhs = &eye - t.mgf(theta);
    let rhs = (&eye - &sol.r * theta.exp()) * (&eye - &sol.h) * (&eye - &sol.g * (-theta).exp());
    linalg::inf_norm(&(lhs - rhs))
}

/// Convergence parameters of `R` and `G` against the boundary of `{chi < 1}`.
#[derive(Debug, Clone, Serialize)]
pub struct CpIdentityReport {
    pub theta_lower: f64,
    pub theta_upper: f64,
    pub spr_r: f64,
    pub spr_g: f64,
    /// `|1/spr(R) - e^theta_upper| / e^theta_upper`
    pub rel_err_r: f64,
    /// `|1/spr(G) - e^-theta_lower| / e^-theta_lower`
    pub rel_err_g: f64,
    pub gamma_dagger: f64,
    /// Near-critical: reported, not asserted.
    pub critical: bool,
}

impl CpIdentityReport {
    pub fn holds(&self, tol: f64) -> bool {
        self.rel_err_r <= tol && self.rel_err_g <= tol
    }
}

pub fn cp_identities_check(t: &Triple, sol: &MatrixAnalyticSolution) -> Result<CpIdentityReport> {
    let summary = spectral::minimize_chi(t)?;
    let critical = (summary.gamma_dagger - 1.0).abs() <= CRITICAL_BAND;
    let center = summary.theta_dagger[0];
    let (theta_lower, theta_upper) = match spectral::ray_roots(t, &[center], &[1.0]) {
        Ok(roots) => (center + roots.t_minus, center + roots.t_plus),
        Err(Error::CenterNotInterior { .. }) if critical => (center, center),
        Err(e) => return Err(e),
    };
    let spr_r = linalg::spectral_radius_any(&sol.r);
    let spr_g = linalg::spectral_radius_any(&sol.g);
    let upper = theta_upper.exp();
    let lower = (-theta_lower).exp();
    Ok(CpIdentityReport {
        theta_lower,
        theta_upper,
        spr_r,
        spr_g,
        rel_err_r: (1.0 / spr_r - upper).abs() / upper,
        rel_err_g: (1.0 / spr_g - lower).abs() / lower,
        gamma_dagger: summary.gamma_dagger,
        critical,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct BlockTridiagCp {
    pub gamma_dagger: f64,
    /// `cp(Q) = 1 / gamma_dagger`.
    pub cp: f64,
    pub levels: usize,
    /// Spectral radius of `Q` cut to `levels` levels (killed outside).
    pub truncated_spr: f64,
}

/// `cp(Q)` of the infinite block-tridiagonal matrix, with the spectral radius of
/// its `levels`-level truncation as an independent cross-check.
pub fn block_tridiag_cp(t: &Triple, levels: usize) -> Result<BlockTridiagCp> {
    let summary = spectral::minimize_chi(t)?;
    Ok(BlockTridiagCp {
        gamma_dagger: summary.gamma_dagger,
        cp: 1.0 / summary.gamma_dagger,
        levels,
        truncated_spr: truncated_spectral_radius(t, levels),
    })
}

/// Spectral radius of the `levels`-level truncation of `Q`.
///
/// For a nonnegative `Q`, `s > spr(Q)` exactly when `sI - Q` is a nonsingular
/// M-matrix, i.e. when Gaussian elimination without pivoting has only positive
/// pivots. Block elimination level by level gives those pivots through the
/// Schur complements `S_1 = sI - A_0`, `S_{l+1} = sI - A_0 - A_-1 S_l^-1 A_1`,
/// so `spr` is found by bisection on `s`.
pub fn truncated_spectral_radius(t: &Triple, levels: usize) -> f64 {
    if levels == 0 {
        return 0.0;
    }
    let m = t.m;
    let upper = linalg::inf_norm(t.a_minus()) + linalg::inf_norm(t.a_zero()) + linalg::inf_norm(t.a_plus());
    let dominates = |s: f64| -> bool {
        let eye = DMatrix::<f64>::identity(m, m) * s;
        let mut schur = &eye - t.a_zero();
        for level in 0..levels {
            if !positive_pivots(&schur) {
                return false;
            }
            if level + 1 < levels {
                let Some(inv) = schur.clone().lu().try_inverse() else { return false };
                schur = &eye - t.a_zero() - t.a_minus() * inv * t.a_plus();
            }
        }
        true
    };
    let (mut lo, mut hi) = (0.0, upper.max(f64::MIN_POSITIVE) * (1.0 + 1e-12));
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi || hi - lo <= 1e-15 * hi {
            break;
        }
        if dominates(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

fn positive_pivots(a: &DMatrix<f64>) -> bool {
    let n = a.nrows();
    let mut w = a.clone();
    for k in 0..n {
        let p = w[(k, k)];
        if !(p > 0.0) {
            return false;
        }
        for i in k + 1..n {
            let f = w[(i, k)] / p;
            if f != 0.0 {
                for j in k..n {
                    let v = w[(k, j)];
                    w[(i, j)] -= f * v;
                }
            }
        }
    }
    true
}

#[derive(Debug, Clone, Serialize)]
pub struct GeometricRowsReport {
    pub box_size: usize,
    pub k_max: usize,
    /// Largest relative error over phases `j, j'` and levels `0..=k_max`
    /// among entries with positive predicted value.
    pub max_rel_error: f64,
    /// `(level, start phase, target phase, occupation, predicted)`.
    pub rows: Vec<(usize, usize, usize, f64, f64)>,
}

/// Occupation measures of a one-dimensional walk killed below level 0 against
/// `q(0 -> k) = N R^k`.
pub fn geometric_rows_check(k: &Kernel, box_size: usize, k_max: usize) -> Result<GeometricRowsReport> {
    if k.dim() != 1 {
        return Err(Error::UnsupportedDimension(k.dim()));
    }
    if 2 * k_max > box_size {
        return Err(Error::InsufficientData(format!("k_max = {k_max} is beyond half the box {box_size}")));
    }
    let t = Triple::from_kernel(k)?;
    let sol = solve_triple(&t, SolveOptions::default())?;
    let m = k.phase_count();
    let mut predicted = sol.n.clone();
    let mut rows = Vec::new();
    let mut max_rel_error: f64 = 0.0;
    let tables = (0..m)
        .map(|j| oracle::occupation_truncated(k, &oracle::State::new(vec![0], j), box_size))
        .collect::<Result<Vec<_>>>()?;
    for level in 0..=k_max {
        for (j, table) in tables.iter().enumerate() {
            for jp in 0..m {
                let observed = table.get(&[level as i64], jp);
                let expected = predicted[(j, jp)];
                if expected > 0.0 {
                    max_rel_error = max_rel_error.max((observed - expected).abs() / expected);
                } else if observed != 0.0 {
                    max_rel_error = f64::INFINITY;
                }
                rows.push((level, j, jp, observed, expected));
            }
        }
        predicted = predicted * &sol.r;
    }
    Ok(GeometricRowsReport { box_size, k_max, max_rel_error, rows })
}
