//! Perron roots and the convex region `Gamma = {theta : chi(theta) < 1}`.
//!
//! For a finite irreducible nonnegative matrix the convergence parameter is the
//! reciprocal of the Perron root, so `chi(theta)` is the Perron root of the
//! matrix moment generating function `A*(theta)`. `log chi` is convex, which
//! makes every search in this module a convex problem.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernel::{mgf, mgf_partial, Lattice};
use crate::linalg;
use crate::optimize;

/// Relative residual `|A v - r v| / (|A| |v|)` required of Perron vectors.
const PERRON_RESIDUAL: f64 = 1e-13;
const MAX_SQUARINGS: usize = 64;

/// Bisection floor for ray roots, relative to `max(1, |t|)`.
const RAY_TOL: f64 = 1e-13;
/// Bracket doubling limit.
const RAY_LIMIT: f64 = 1.152_921_504_606_847e18; // 2^60

/// Perron roots closer than this to 1 are treated as 1 by [`gamma_contains`].
const MEMBERSHIP_TOL: f64 = 1e-12;

pub const GRADIENT_TOL: f64 = 1e-9;
pub const MAX_DESCENT_ITERATIONS: usize = 10_000;

#[derive(Debug, Clone)]
pub struct PerronResult {
    pub radius: f64,
    /// Right Perron vector, normalized to sum 1.
    pub right: DVector<f64>,
    /// Left Perron vector, normalized to sum 1.
    pub left: DVector<f64>,
    /// Number of squarings of the shifted matrix.
    pub squarings: usize,
}

/// Perron root and vectors of an irreducible nonnegative matrix.
///
/// Power iteration on the shifted matrix `A + sI` (`s = |A|_inf`), which is
/// primitive even when `A` is periodic. The iteration is run by repeated
/// squaring: after `n` squarings the normalized matrix is `(A + sI)^(2^n)` up
/// to scale, whose row and column sums are the power iterates started from the
/// all-ones vector. The radius is the Rayleigh quotient `u A v / u v`.
pub fn spectral_radius(a: &DMatrix<f64>) -> Result<PerronResult> {
    let n = a.nrows();
    if n == 0 || n != a.ncols() {
        return Err(Error::DimensionMismatch(format!("matrix is {}x{}", a.nrows(), a.ncols())));
    }
    if a.iter().any(|&x| x < 0.0 || !x.is_finite()) {
        return Err(Error::InvariantViolation("matrix must be finite and nonnegative".into()));
    }
    if !linalg::is_irreducible(a) {
        return Err(Error::NotIrreducible);
    }
    if n == 1 {
        let one = DVector::from_element(1, 1.0);
        return Ok(PerronResult { radius: a[(0, 0)], right: one.clone(), left: one, squarings: 0 });
    }
    let shift = linalg::inf_norm(a);
    let scale = 2.0 * shift;
    let mut power = a + DMatrix::identity(n, n) * shift;
    power /= linalg::max_abs(&power);
    for squarings in 0..=MAX_SQUARINGS {
        let right = normalized(power.column_sum());
        let left = normalized(power.row_sum().transpose());
        let av = a * &right;
        let ua = a.tr_mul(&left);
        let radius = left.dot(&av) / left.dot(&right);
        let res_right = (&av - &right * radius).amax() / (scale * right.amax());
        let res_left = (&ua - &left * radius).amax() / (scale * left.amax());
        if res_right <= PERRON_RESIDUAL && res_left <= PERRON_RESIDUAL {
            return Ok(PerronResult { radius, right, left, squarings });
        }
        power = &power * &power;
        let top = linalg::max_abs(&power);
        if !(top > 0.0 && top.is_finite()) {
            break;
        }
        power /= top;
    }
    Err(Error::NoConvergence { what: "Perron power iteration", iterations: MAX_SQUARINGS })
}

fn normalized(v: DVector<f64>) -> DVector<f64> {
    let s = v.sum();
    v / s
}

/// `chi(theta)`: Perron root of `A*(theta)`. Returns `+inf` when `A*(theta)` overflows.
pub fn chi<L: Lattice + ?Sized>(k: &L, theta: &[f64]) -> Result<f64> {
    let a = mgf(k, theta);
    if a.iter().any(|x| !x.is_finite()) {
        return Ok(f64::INFINITY);
    }
    Ok(spectral_radius(&a)?.radius)
}

/// `log chi(theta)` and its gradient `u (dA*/dtheta_i) v / (chi u v)` from the
/// left and right Perron vectors.
pub fn log_chi_with_gradient<L: Lattice + ?Sized>(k: &L, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
    let a = mgf(k, theta);
    if a.iter().any(|x| !x.is_finite()) {
        return Ok((f64::INFINITY, vec![f64::NAN; theta.len()]));
    }
    let p = spectral_radius(&a)?;
    if p.radius <= 0.0 {
        return Err(Error::InvariantViolation("A*(theta) has zero Perron root".into()));
    }
    let norm = p.radius * p.left.dot(&p.right);
    let grad = (0..k.dim())
        .map(|axis| p.left.dot(&(mgf_partial(k, theta, axis) * &p.right)) / norm)
        .collect();
    Ok((p.radius.ln(), grad))
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct GammaMembership {
    pub inside: bool,
    pub chi: f64,
}

/// Strict membership `chi(theta) < 1`, with points within the Perron-root
/// accuracy of 1 counted as boundary points.
pub fn gamma_contains<L: Lattice + ?Sized>(k: &L, theta: &[f64]) -> Result<GammaMembership> {
    let chi = chi(k, theta)?;
    Ok(GammaMembership { inside: chi < 1.0 - MEMBERSHIP_TOL, chi })
}

/// Where the line `center + t * direction` crosses `chi = 1`.
#[derive(Debug, Clone, Serialize)]
pub struct RayRoots {
    pub center: Vec<f64>,
    /// Unit vector.
    pub direction: Vec<f64>,
    pub t_minus: f64,
    pub t_plus: f64,
}

impl RayRoots {
    pub fn point(&self, t: f64) -> Vec<f64> {
        along(&self.center, &self.direction, t)
    }
}

fn along(center: &[f64], direction: &[f64], t: f64) -> Vec<f64> {
    center.iter().zip(direction).map(|(c, d)| c + t * d).collect()
}

/// Both boundary crossings along a line through an interior point.
pub fn ray_roots<L: Lattice + ?Sized>(k: &L, center: &[f64], direction: &[f64]) -> Result<RayRoots> {
    if center.len() != k.dim() || direction.len() != k.dim() {
        return Err(Error::DimensionMismatch("center and direction must have length d".into()));
    }
    let norm = direction.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0) {
        return Err(Error::ZeroDirection);
    }
    let direction: Vec<f64> = direction.iter().map(|x| x / norm).collect();
    let at_center = chi(k, center)?;
    if !(at_center < 1.0) {
        return Err(Error::CenterNotInterior { chi: at_center });
    }
    let t_plus = crossing(k, center, &direction)?;
    let backwards: Vec<f64> = direction.iter().map(|x| -x).collect();
    let t_minus = -crossing(k, center, &backwards)?;
    Ok(RayRoots { center: center.to_vec(), direction, t_minus, t_plus })
}

/// Smallest `t > 0` with `chi(center + t u) = 1`, given `chi(center) < 1`.
fn crossing<L: Lattice + ?Sized>(k: &L, center: &[f64], u: &[f64]) -> Result<f64> {
    let f = |t: f64| chi(k, &along(center, u, t));
    let mut lo = 0.0;
    let mut hi = 1.0;
    while f(hi)? < 1.0 {
        lo = hi;
        hi *= 2.0;
        if hi > RAY_LIMIT {
            return Err(Error::BracketFailure { direction: u.to_vec() });
        }
    }
    while hi - lo > RAY_TOL * hi.abs().max(1.0) {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid)? < 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Minimizer and minimum of `chi`.
#[derive(Debug, Clone, Serialize)]
pub struct SpectralSummary {
    pub theta_dagger: Vec<f64>,
    pub gamma_dagger: f64,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
}

/// Global minimum of `chi` by quasi-Newton descent on `log chi` with Perron-vector
/// gradients. `log chi` is convex, so the stationary point found is global.
pub fn minimize_chi<L: Lattice + ?Sized>(k: &L) -> Result<SpectralSummary> {
    let start = vec![0.0; k.dim()];
    let min = optimize::bfgs(|t| log_chi_with_gradient(k, t), start, None, GRADIENT_TOL, MAX_DESCENT_ITERATIONS)?;
    if !min.converged && min.gradient_norm > 1e3 * GRADIENT_TOL {
        return Err(Error::NoConvergence { what: "chi minimization", iterations: min.iterations });
    }
    Ok(SpectralSummary {
        gamma_dagger: min.value.exp(),
        theta_dagger: min.x,
        converged: min.converged,
        iterations: min.iterations,
        gradient_norm: min.gradient_norm,
    })
}

/// Comparison of two Perron roots that should coincide.
#[derive(Debug, Clone, Serialize)]
pub struct CpComparison {
    /// Perron root of the lifted block matrix.
    pub lifted: f64,
    /// Perron root of the original matrix function.
    pub reference: f64,
    pub difference: f64,
}

fn check_irreducible(a: &DMatrix<f64>) -> Result<()> {
    if linalg::is_irreducible(a) {
        Ok(())
    } else {
        Err(Error::NotIrreducible)
    }
}

/// `C^[k](theta)`: block tridiagonal with `C_0` on the diagonal, `C_1` above,
/// `C_-1` below, and corners `exp(-theta) C_-1` (top right) and
/// `exp(theta) C_1` (bottom left).
pub fn circulant_block(c_minus: &DMatrix<f64>, c_zero: &DMatrix<f64>, c_plus: &DMatrix<f64>, kblocks: usize, theta: f64) -> DMatrix<f64> {
    let m = c_zero.nrows();
    let mut out = DMatrix::zeros(m * kblocks, m * kblocks);
    let mut add = |bi: usize, bj: usize, block: &DMatrix<f64>, w: f64| {
        let mut view = out.view_mut((bi * m, bj * m), (m, m));
        view += block * w;
    };
    for i in 0..kblocks {
        add(i, i, c_zero, 1.0);
        if i + 1 < kblocks {
            add(i, i + 1, c_plus, 1.0);
            add(i + 1, i, c_minus, 1.0);
        }
    }
    add(0, kblocks - 1, c_minus, (-theta).exp());
    add(kblocks - 1, 0, c_plus, theta.exp());
    out
}

/// Compares `spr(C^[k](k theta))` with `spr(C_*(theta))`,
/// `C_*(theta) = exp(-theta) C_-1 + C_0 + exp(theta) C_1`.
pub fn circulant_cp_check(
    c_minus: &DMatrix<f64>,
    c_zero: &DMatrix<f64>,
    c_plus: &DMatrix<f64>,
    kblocks: usize,
    theta: f64,
) -> Result<CpComparison> {
    if kblocks == 0 {
        return Err(Error::InvariantViolation("kblocks must be positive".into()));
    }
    check_irreducible(&(c_minus + c_zero + c_plus))?;
    let star = c_minus * (-theta).exp() + c_zero + c_plus * theta.exp();
    let lifted = spectral_radius(&circulant_block(c_minus, c_zero, c_plus, kblocks, kblocks as f64 * theta))?.radius;
    let reference = spectral_radius(&star)?.radius;
    Ok(CpComparison { lifted, reference, difference: (lifted - reference).abs() })
}

/// `Â*(theta)` built from the 2x2 block regrouping of a block quintuple-diagonal
/// matrix with blocks `A_-2..A_2` (`blocks[0]` is `A_-2`).
pub fn quintuple_lift(blocks: &[DMatrix<f64>; 5], theta: f64) -> DMatrix<f64> {
    let [a_m2, a_m1, a_0, a_1, a_2] = blocks;
    let m = a_0.nrows();
    let z = DMatrix::zeros(m, m);
    let join = |tl: &DMatrix<f64>, tr: &DMatrix<f64>, bl: &DMatrix<f64>, br: &DMatrix<f64>| {
        let mut out = DMatrix::zeros(2 * m, 2 * m);
        out.view_mut((0, 0), (m, m)).copy_from(tl);
        out.view_mut((0, m), (m, m)).copy_from(tr);
        out.view_mut((m, 0), (m, m)).copy_from(bl);
        out.view_mut((m, m), (m, m)).copy_from(br);
        out
    };
    let hat_minus = join(a_m2, a_m1, &z, a_m2);
    let hat_zero = join(a_0, a_1, a_m1, a_0);
    let hat_plus = join(a_2, &z, a_1, a_2);
    hat_minus * (-theta).exp() + hat_zero + hat_plus * theta.exp()
}

/// Compares `spr(Â*(theta))` with `spr(A*(theta / 2))`.
pub fn quintuple_cp_check(blocks: &[DMatrix<f64>; 5], theta: f64) -> Result<CpComparison> {
    let total = blocks.iter().skip(1).fold(blocks[0].clone(), |acc, b| acc + b);
    check_irreducible(&total)?;
    let half: DMatrix<f64> = blocks
        .iter()
        .zip(-2i32..=2)
        .fold(DMatrix::zeros(total.nrows(), total.ncols()), |acc, (b, i)| acc + b * (f64::from(i) * theta / 2.0).exp());
    let lifted = spectral_radius(&quintuple_lift(blocks, theta))?.radius;
    let reference = spectral_radius(&half)?.radius;
    Ok(CpComparison { lifted, reference, difference: (lifted - reference).abs() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{Blocks, Kernel, KernelKind};

    fn scalar(p: f64, q: f64, r: f64) -> Kernel {
        let mut blocks = Blocks::new();
        blocks.insert(vec![-1], DMatrix::from_element(1, 1, q));
        blocks.insert(vec![0], DMatrix::from_element(1, 1, r));
        blocks.insert(vec![1], DMatrix::from_element(1, 1, p));
        Kernel::new(1, Kernel::default_phases(1), blocks, KernelKind::Probability).unwrap()
    }

    #[test]
    fn perron_of_simple_matrices() {
        let eye = DMatrix::<f64>::identity(3, 3);
        assert!(matches!(spectral_radius(&eye), Err(Error::NotIrreducible)));
        let swap = DMatrix::from_row_slice(2, 2, &[0., 1., 1., 0.]);
        let p = spectral_radius(&swap).unwrap();
        assert!((p.radius - 1.0).abs() < 1e-14);
        assert!((p.right[0] - 0.5).abs() < 1e-14);
        assert!((spectral_radius(&DMatrix::from_element(1, 1, 2.0)).unwrap().radius - 2.0).abs() < 1e-15);
    }

    #[test]
    fn perron_residuals() {
        let a = DMatrix::from_row_slice(3, 3, &[0.1, 2.0, 0.0, 0.0, 0.3, 5.0, 0.7, 0.0, 0.2]);
        let p = spectral_radius(&a).unwrap();
        assert!((&a * &p.right - &p.right * p.radius).amax() < 1e-10);
        assert!((a.tr_mul(&p.left) - &p.left * p.radius).amax() < 1e-10);
        assert!((p.radius - linalg::spectral_radius_any(&a)).abs() < 1e-12);
    }

    #[test]
    fn scalar_chi_values() {
        let k = scalar(0.2, 0.4, 0.4);
        assert!((chi(&k, &[0.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((chi(&k, &[2f64.ln()]).unwrap() - 1.0).abs() < 1e-12);
        let expected = 0.4 * (-0.3f64).exp() + 0.4 + 0.2 * 0.3f64.exp();
        assert!((chi(&k, &[0.3]).unwrap() - expected).abs() < 1e-14);
        assert!((expected - 0.9663).abs() < 1e-4);
        assert!(!gamma_contains(&k, &[0.0]).unwrap().inside);
        assert!(gamma_contains(&k, &[0.3]).unwrap().inside);
        assert!(!gamma_contains(&k, &[1.0]).unwrap().inside);
    }

    #[test]
    fn scalar_ray_roots() {
        let k = scalar(0.2, 0.4, 0.4);
        let roots = ray_roots(&k, &[0.3], &[1.0]).unwrap();
        assert!((0.3 + roots.t_plus - 2f64.ln()).abs() < 1e-9);
        assert!((0.3 + roots.t_minus).abs() < 1e-9);
        assert!(matches!(ray_roots(&k, &[1.0], &[1.0]), Err(Error::CenterNotInterior { .. })));
    }

    #[test]
    fn scalar_minimum() {
        let k = scalar(0.2, 0.4, 0.4);
        let s = minimize_chi(&k).unwrap();
        assert!(s.converged);
        assert!((s.theta_dagger[0] - 0.5 * 2f64.ln()).abs() < 1e-9);
        assert!((s.gamma_dagger - (0.4 + 2.0 * 0.08f64.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn circulant_single_block_is_the_mgf() {
        let (a, b, c) = (DMatrix::from_element(1, 1, 0.4), DMatrix::from_element(1, 1, 0.4), DMatrix::from_element(1, 1, 0.2));
        let block = circulant_block(&a, &b, &c, 1, 0.7);
        let star = &a * (-0.7f64).exp() + &b + &c * 0.7f64.exp();
        assert_eq!(block, star);
        let r = circulant_cp_check(&a, &b, &c, 3, 0.5).unwrap();
        assert!(r.difference < 1e-10, "{r:?}");
        let r = circulant_cp_check(&a, &b, &c, 4, 0.0).unwrap();
        assert!((r.lifted - 1.0).abs() < 1e-12 && r.difference < 1e-12);
    }

    #[test]
    fn quintuple_scalar_checks() {
        let s = |x: f64| DMatrix::from_element(1, 1, x);
        let blocks = [s(0.1), s(0.2), s(0.4), s(0.2), s(0.1)];
        let r = quintuple_cp_check(&blocks, 0.6).unwrap();
        assert!(r.difference < 1e-10, "{r:?}");
        let r = quintuple_cp_check(&blocks, 0.0).unwrap();
        assert!((r.reference - 1.0).abs() < 1e-12 && r.difference < 1e-12);
        let tri = [s(0.0), s(0.3), s(0.3), s(0.4), s(0.0)];
        let r = quintuple_cp_check(&tri, -0.8).unwrap();
        assert!(r.difference < 1e-12, "{r:?}");
    }
}

#[cfg(test)]
mod properties {
    use super::*;
    use crate::models::{make_walk, polling_kernel, PollingParams, WalkSpec};
    use crate::kernel::{uniformize, Kernel, Nu};
    use proptest::prelude::*;

    fn kernels() -> Vec<Kernel> {
        vec![
            make_walk(&WalkSpec::Product(vec![(0.2, 0.4, 0.4), (0.15, 0.45, 0.4)])).unwrap(),
            uniformize(&polling_kernel(&PollingParams::table2(2)).unwrap(), Nu::Auto).unwrap(),
        ]
    }

    fn point(d: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-2.0..2.0f64, d)
    }

    fn unit(d: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-1.0..1.0f64, d).prop_filter("nonzero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-4)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn chi_is_log_convex(a in point(3), b in point(3), which in 0usize..2) {
            let k = &kernels()[which];
            let d = k.dim();
            let (a, b) = (&a[..d], &b[..d]);
            let (ca, cb) = (chi(k, a).unwrap(), chi(k, b).unwrap());
            for lam in [0.25, 0.5, 0.75] {
                let mid: Vec<f64> = a.iter().zip(b).map(|(x, y)| lam * x + (1.0 - lam) * y).collect();
                prop_assert!(chi(k, &mid).unwrap() <= ca.powf(lam) * cb.powf(1.0 - lam) * (1.0 + 1e-9));
            }
        }

        #[test]
        fn rays_leave_the_region(u in unit(3), which in 0usize..2) {
            let k = &kernels()[which];
            let d = k.dim();
            let s = minimize_chi(k).unwrap();
            let roots = ray_roots(k, &s.theta_dagger, &u[..d]).unwrap();
            prop_assert!(roots.t_minus < 0.0 && roots.t_plus > 0.0);
            prop_assert!(chi(k, &roots.point(0.5 * (roots.t_minus + roots.t_plus))).unwrap() < 1.0);
            prop_assert!((chi(k, &roots.point(roots.t_plus)).unwrap() - 1.0).abs() < 1e-8);
            // chi grows without bound along every ray
            let far = roots.point(64.0 * roots.t_plus.max(1.0));
            prop_assert!(chi(k, &far).unwrap() > 2.0);
        }
    }

    #[test]
    fn origin_is_on_the_boundary() {
        for k in kernels() {
            let m = gamma_contains(&k, &vec![0.0; k.dim()]).unwrap();
            assert!(!m.inside && (m.chi - 1.0).abs() < 1e-12);
        }
    }
}
