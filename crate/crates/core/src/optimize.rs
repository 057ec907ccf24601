//! Quasi-Newton minimization of smooth convex objectives, optionally restricted
//! to a hyperplane through the starting point.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    /// Full gradient at `x` (not projected).
    pub gradient: Vec<f64>,
    /// Norm of the gradient projected onto the feasible subspace.
    pub gradient_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

struct Projector {
    normal: Option<DVector<f64>>,
}

impl Projector {
    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        match &self.normal {
            Some(n) => v - n * (n.dot(v) / n.norm_squared()),
            None => v.clone(),
        }
    }

    fn matrix(&self, dim: usize) -> DMatrix<f64> {
        match &self.normal {
            Some(n) => DMatrix::identity(dim, dim) - n * n.transpose() / n.norm_squared(),
            None => DMatrix::identity(dim, dim),
        }
    }
}

/// BFGS with Armijo backtracking.
///
/// `objective` returns the value and gradient; a non-finite value marks a point
/// outside the domain and makes the line search back off. With `normal` set,
/// every step is orthogonal to it so iterates stay on the hyperplane through
/// `x0`. Stops when the projected gradient norm is at most `gtol`.
pub fn bfgs<F>(mut objective: F, x0: Vec<f64>, normal: Option<&[f64]>, gtol: f64, max_iter: usize) -> Result<Minimum>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let proj = Projector {
        normal: normal.map(DVector::from_column_slice).filter(|v| v.norm_squared() > 0.0),
    };
    let mut x = DVector::from_vec(x0);
    let (mut fx, raw) = objective(x.as_slice())?;
    if !fx.is_finite() {
        return Err(Error::InvariantViolation("objective is not finite at the starting point".into()));
    }
    let mut raw = DVector::from_vec(raw);
    let mut g = proj.apply(&raw);
    let p0 = proj.matrix(n);
    let mut h = p0.clone();
    let mut fresh = true;
    let mut iterations = 0;

    while iterations < max_iter {
        if g.norm() <= gtol {
            break;
        }
        iterations += 1;
        let mut d = proj.apply(&(-(&h * &g)));
        let mut slope = d.dot(&g);
        if slope >= 0.0 {
            h = p0.clone();
            fresh = true;
            d = -g.clone();
            slope = d.dot(&g);
        }
        if fresh && d.norm() > 1.0 {
            // unit trust length until curvature information exists
            let scale = 1.0 / d.norm();
            d *= scale;
            slope *= scale;
        }
        let noise = 4.0 * f64::EPSILON * (1.0 + fx.abs());
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..80 {
            let trial = &x + &d * alpha;
            let (ft, rt) = objective(trial.as_slice())?;
            if ft.is_finite() && ft <= fx + 1e-4 * alpha * slope + noise {
                let rt = DVector::from_vec(rt);
                let gt = proj.apply(&rt);
                // inside the rounding band only accept steps that also shrink the gradient
                if ft <= fx + 1e-4 * alpha * slope || gt.norm() < g.norm() {
                    accepted = Some((trial, ft, rt, gt));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((x_new, f_new, raw_new, g_new)) = accepted else {
            if fresh {
                break;
            }
            h = p0.clone();
            fresh = true;
            continue;
        };
        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-300 {
            if fresh {
                // scale the initial inverse Hessian guess
                h *= sy / y.norm_squared();
            }
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            h += (&s * s.transpose()) * (rho * rho * yhy + rho) - (&hy * s.transpose() + &s * hy.transpose()) * rho;
            fresh = false;
        }
        x = x_new;
        fx = f_new;
        raw = raw_new;
        g = g_new;
    }
    let gradient_norm = g.norm();
    Ok(Minimum {
        x: x.iter().copied().collect(),
        value: fx,
        gradient: raw.iter().copied().collect(),
        gradient_norm,
        iterations,
        converged: gradient_norm <= gtol,
    })
}
