//! Occupation measures computed without any of the spectral machinery.
//!
//! The walk is run on the box `[0, M]^d`; leaving the orthant or the box
//! absorbs it, so every table entry is an exact occupation measure of the
//! absorbed chain and a lower bound for the untruncated one.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernel::{drift, mgf, Lattice};
use crate::spectral;

const DRIFT_MARGIN: f64 = 1e-12;
const SWEEP_TOL: f64 = 1e-14;
const MAX_SWEEPS: usize = 10_000_000;

/// Lattice point and phase.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct State {
    pub x: Vec<i64>,
    pub phase: usize,
}

impl State {
    pub fn new(x: Vec<i64>, phase: usize) -> Self {
        Self { x, phase }
    }
}

/// Occupation measures are finite when the kernel leaks mass or some drift
/// component is negative.
pub fn finiteness_check<L: Lattice + ?Sized>(k: &L) -> Result<bool> {
    let total = mgf(k, &vec![0.0; k.dim()]);
    if total.row_iter().any(|r| r.sum() < 1.0 - 1e-12) && spectral::spectral_radius(&total).is_ok_and(|p| p.radius < 1.0) {
        return Ok(true);
    }
    let d = drift(k)?;
    Ok(d.a.iter().any(|&a| a < -DRIFT_MARGIN))
}

/// Transitions out of each phase: `(offset, target phase, probability)`.
fn transitions<L: Lattice + ?Sized>(k: &L) -> Vec<Vec<(Vec<i64>, usize, f64)>> {
    let m = k.phase_count();
    let mut out = vec![Vec::new(); m];
    for (offset, block) in k.blocks() {
        let off: Vec<i64> = offset.iter().map(|&o| i64::from(o)).collect();
        for i in 0..m {
            for j in 0..m {
                let p = block[(i, j)];
                if p > 0.0 {
                    out[i].push((off.clone(), j, p));
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct OccupationTable {
    pub start: State,
    pub box_size: usize,
    pub dim: usize,
    pub phases: usize,
    /// Dense values, row-major in the coordinates, phase fastest.
    values: Vec<f64>,
    pub converged: bool,
    /// `|v_n|_1` of the last Neumann term.
    pub tail_mass: f64,
    pub sweeps: usize,
}

impl OccupationTable {
    fn side(&self) -> usize {
        self.box_size + 1
    }

    fn index(&self, x: &[i64], phase: usize) -> Option<usize> {
        if x.len() != self.dim || phase >= self.phases {
            return None;
        }
        let mut idx = 0usize;
        for &c in x {
            if c < 0 || c as usize > self.box_size {
                return None;
            }
            idx = idx * self.side() + c as usize;
        }
        Some(idx * self.phases + phase)
    }

    fn coords(&self, mut cell: usize) -> Vec<i64> {
        let mut x = vec![0i64; self.dim];
        for c in x.iter_mut().rev() {
            *c = (cell % self.side()) as i64;
            cell /= self.side();
        }
        x
    }

    /// Occupation of `(x, phase)`; zero outside the box.
    pub fn get(&self, x: &[i64], phase: usize) -> f64 {
        self.index(x, phase).map_or(0.0, |i| self.values[i])
    }

    pub fn total_mass(&self) -> f64 {
        self.values.iter().sum()
    }

    /// `(x, phase, value)` for every state of the box.
    pub fn entries(&self) -> impl Iterator<Item = (Vec<i64>, usize, f64)> + '_ {
        self.values
            .iter()
            .enumerate()
            .map(|(i, &v)| (self.coords(i / self.phases), i % self.phases, v))
    }

    /// `max |q - 1_start - q P_box|` over the box.
    pub fn identity_residual<L: Lattice + ?Sized>(&self, k: &L) -> f64 {
        let mut image = sweep(self, k, &self.values);
        let s = self.index(&self.start.x, self.start.phase).expect("start inside box");
        image[s] += 1.0;
        image.iter().zip(&self.values).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 1..=self.dim {
            let _ = write!(out, "x_{i},");
        }
        out.push_str("phase,qtilde\n");
        for (x, phase, v) in self.entries() {
            for c in x {
                let _ = write!(out, "{c},");
            }
            let _ = writeln!(out, "{phase},{v:.12e}");
        }
        out
    }
}

/// One application of the box-absorbed kernel to a row vector.
fn sweep<L: Lattice + ?Sized>(tab: &OccupationTable, k: &L, v: &[f64]) -> Vec<f64> {
    let trans = transitions(k);
    let m = tab.phases;
    let mut next = vec![0.0; v.len()];
    let mut target = vec![0i64; tab.dim];
    for (i, &mass) in v.iter().enumerate() {
        if mass == 0.0 {
            continue;
        }
        let x = tab.coords(i / m);
        for (off, j, p) in &trans[i % m] {
            for (t, (a, b)) in target.iter_mut().zip(x.iter().zip(off)) {
                *t = a + b;
            }
            if let Some(dst) = tab.index(&target, *j) {
                next[dst] += mass * p;
            }
        }
    }
    next
}

/// Neumann summation `sum_n 1_start P_box^n` over the box `[0, M]^d`.
/// Jumps need not be skip-free.
pub fn occupation_truncated<L: Lattice + ?Sized>(k: &L, start: &State, box_size: usize) -> Result<OccupationTable> {
    if !finiteness_check(k)? {
        return Err(Error::NotFinite { drift: drift(k).map(|d| d.a).unwrap_or_default() });
    }
    let d = k.dim();
    let m = k.phase_count();
    let cells = (box_size + 1)
        .checked_pow(d as u32)
        .and_then(|c| c.checked_mul(m))
        .ok_or_else(|| Error::InvariantViolation("box is too large".into()))?;
    let mut tab = OccupationTable {
        start: start.clone(),
        box_size,
        dim: d,
        phases: m,
        values: vec![0.0; cells],
        converged: false,
        tail_mass: 0.0,
        sweeps: 0,
    };
    let s = tab.index(&start.x, start.phase).ok_or(Error::StartOutsideBox)?;

    let trans = transitions(k);
    // neighbour table: for each cell and transition, the destination index
    let mut dest: Vec<Vec<(usize, f64)>> = Vec::with_capacity(cells);
    let mut target = vec![0i64; d];
    for i in 0..cells {
        let x = tab.coords(i / m);
        let mut row = Vec::with_capacity(trans[i % m].len());
        for (off, j, p) in &trans[i % m] {
            for (t, (a, b)) in target.iter_mut().zip(x.iter().zip(off)) {
                *t = a + b;
            }
            if let Some(dst) = tab.index(&target, *j) {
                row.push((dst, *p));
            }
        }
        dest.push(row);
    }

    let mut v = vec![0.0; cells];
    v[s] = 1.0;
    let mut acc = vec![0.0; cells];
    let mut mass = 0.0;
    let mut norm = 1.0;
    while tab.sweeps < MAX_SWEEPS {
        for (a, x) in acc.iter_mut().zip(&v) {
            *a += x;
        }
        mass += norm;
        let mut next = vec![0.0; cells];
        for (i, &x) in v.iter().enumerate() {
            if x != 0.0 {
                for &(dst, p) in &dest[i] {
                    next[dst] += x * p;
                }
            }
        }
        v = next;
        norm = v.iter().sum();
        tab.sweeps += 1;
        if norm < SWEEP_TOL * mass {
            tab.converged = true;
            break;
        }
    }
    if !tab.converged {
        return Err(Error::NoConvergence { what: "occupation summation", iterations: tab.sweeps });
    }
    tab.values = acc;
    tab.tail_mass = norm;
    Ok(tab)
}

/// Least-squares fit of `log q` against `k`.
#[derive(Debug, Clone, Serialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub points: usize,
}

/// Regression slope of `log q(start -> (k c + l, phase))` over `k` in `window`.
pub fn slope_estimate(tab: &OccupationTable, c: &[i64], l: &[i64], phase: usize, window: (usize, usize)) -> Result<SlopeFit> {
    if c.len() != tab.dim || l.len() != tab.dim {
        return Err(Error::DimensionMismatch(format!("direction and offset must have {} components", tab.dim)));
    }
    if c.iter().any(|&x| x < 0) || c.iter().all(|&x| x == 0) {
        return Err(Error::ZeroDirection);
    }
    if l.iter().any(|&x| x < 0) {
        return Err(Error::InvariantViolation(format!("offset {l:?} has a negative component")));
    }
    let (k_min, k_max) = window;
    if k_max < k_min || k_max - k_min + 1 < 4 {
        return Err(Error::InsufficientData(format!("window [{k_min}, {k_max}] has fewer than 4 points")));
    }
    let reach = k_max as i64 * c.iter().copied().max().unwrap_or(0) + l.iter().copied().max().unwrap_or(0);
    if 2 * reach > tab.box_size as i64 {
        return Err(Error::InsufficientData(format!("window reaches {reach}, beyond half the box {}", tab.box_size)));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for k in k_min..=k_max {
        let x: Vec<i64> = c.iter().zip(l).map(|(ci, li)| k as i64 * ci + li).collect();
        let q = tab.get(&x, phase);
        if !(q > 0.0) {
            return Err(Error::ZeroMass { k });
        }
        xs.push(k as f64);
        ys.push(q.ln());
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(SlopeFit { slope, intercept: my - slope * mx, r_squared, points: xs.len() })
}

/// Monte Carlo visit estimate of one state.
#[derive(Debug, Clone, Serialize)]
pub struct VisitEstimate {
    pub state: State,
    pub mean: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulationSummary {
    pub seed: u64,
    pub n_paths: u64,
    pub cap: u64,
    /// Paths stopped by the step cap rather than by leaving the orthant.
    pub censored: u64,
    /// Sorted by state.
    pub estimates: Vec<VisitEstimate>,
}

impl SimulationSummary {
    pub fn estimate(&self, state: &State) -> Option<&VisitEstimate> {
        self.estimates.binary_search_by(|e| e.state.cmp(state)).ok().map(|i| &self.estimates[i])
    }
}

type Tally = BTreeMap<State, (u64, u128)>;

/// Sample paths from `start` until they leave `Z_+^d`, are killed, or hit `cap`
/// steps. Path `i` draws from stream `i` of a ChaCha8 generator seeded with
/// `seed`, and per-path counts are merged as integers, so the result does not
/// depend on thread scheduling.
pub fn simulate_paths<L: Lattice + Sync + ?Sized>(k: &L, start: &State, n_paths: u64, seed: u64, cap: u64) -> Result<SimulationSummary> {
    if !finiteness_check(k)? {
        return Err(Error::NotFinite { drift: drift(k).map(|d| d.a).unwrap_or_default() });
    }
    if start.x.len() != k.dim() || start.phase >= k.phase_count() || start.x.iter().any(|&c| c < 0) {
        return Err(Error::StartOutsideBox);
    }
    let trans = transitions(k);
    let (tally, censored) = (0..n_paths)
        .into_par_iter()
        .map(|path| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(path);
            let mut counts: HashMap<State, u64> = HashMap::new();
            let censored = run_path(&trans, start, cap, &mut rng, &mut counts);
            let mut t = Tally::new();
            for (s, c) in counts {
                t.insert(s, (c, u128::from(c) * u128::from(c)));
            }
            (t, u64::from(censored))
        })
        .reduce(|| (Tally::new(), 0), merge_tally);
    let n = n_paths as f64;
    let estimates = tally
        .into_iter()
        .map(|(state, (sum, sumsq))| {
            let mean = sum as f64 / n;
            let var = if n_paths > 1 { ((sumsq as f64) - (sum as f64) * mean) / (n - 1.0) } else { 0.0 };
            VisitEstimate { state, mean, std_error: (var.max(0.0) / n).sqrt() }
        })
        .collect();
    Ok(SimulationSummary { seed, n_paths, cap, censored, estimates })
}

fn merge_tally(mut a: (Tally, u64), b: (Tally, u64)) -> (Tally, u64) {
    for (s, (c, c2)) in b.0 {
        let e = a.0.entry(s).or_insert((0, 0));
        e.0 += c;
        e.1 += c2;
    }
    (a.0, a.1 + b.1)
}

fn run_path(trans: &[Vec<(Vec<i64>, usize, f64)>], start: &State, cap: u64, rng: &mut ChaCha8Rng, counts: &mut HashMap<State, u64>) -> bool {
    let mut state = start.clone();
    let mut steps = 0;
    loop {
        *counts.entry(state.clone()).or_insert(0) += 1;
        if steps >= cap {
            return true;
        }
        steps += 1;
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = None;
        for t in &trans[state.phase] {
            acc += t.2;
            if u < acc {
                chosen = Some(t);
                break;
            }
        }
        // the remaining mass of a substochastic row kills the path
        let Some((off, j, _)) = chosen else { return false };
        for (c, o) in state.x.iter_mut().zip(off) {
            *c += o;
        }
        if state.x.iter().any(|&c| c < 0) {
            return false;
        }
        state.phase = *j;
    }
}

/// Truncated moment generating function of one occupation row.
#[derive(Debug, Clone, Serialize)]
pub struct PhiEstimate {
    pub theta: Vec<f64>,
    /// `sum_x e^<x, theta> q(start -> (x, j'))` for each target phase `j'`.
    pub values: Vec<f64>,
    /// Contribution of states with some coordinate in `(M/2, M]`.
    pub shell: Vec<f64>,
    /// Largest `shell / value` ratio over phases.
    pub sensitivity: f64,
}

pub fn phi_truncated(tab: &OccupationTable, theta: &[f64]) -> Result<PhiEstimate> {
    if !tab.converged {
        return Err(Error::NotConverged);
    }
    if theta.len() != tab.dim {
        return Err(Error::DimensionMismatch(format!("theta must have {} components", tab.dim)));
    }
    let half = tab.box_size as i64 / 2;
    let mut values = vec![0.0; tab.phases];
    let mut shell = vec![0.0; tab.phases];
    for (x, j, q) in tab.entries() {
        if q == 0.0 {
            continue;
        }
        let w = (x.iter().zip(theta).map(|(&c, &t)| c as f64 * t).sum::<f64>()).exp() * q;
        values[j] += w;
        if x.iter().any(|&c| c > half) {
            shell[j] += w;
        }
    }
    let sensitivity = values
        .iter()
        .zip(&shell)
        .filter(|(v, _)| **v > 0.0)
        .map(|(v, s)| s / v)
        .fold(0.0, f64::max);
    Ok(PhiEstimate { theta: theta.to_vec(), values, shell, sensitivity })
}


#[cfg(test)]
mod properties {
    use super::*;
    use crate::decay::{decay_rate, domain_contains};
    use crate::models::{make_walk, WalkSpec};
    use proptest::prelude::*;

    fn walk(a: f64, b: f64) -> crate::kernel::Kernel {
        make_walk(&WalkSpec::Product(vec![(a, 0.45, 0.55 - a), (b, 0.5, 0.5 - b)])).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn tables_grow_with_the_box(a in 0.1..0.35f64, b in 0.1..0.35f64, x in 0i64..4, y in 0i64..4) {
            let k = walk(a, b);
            let start = State::new(vec![x, y], 0);
            let small = occupation_truncated(&k, &start, 12).unwrap();
            let big = occupation_truncated(&k, &start, 24).unwrap();
            prop_assert!(small.get(&[x, y], 0) >= 1.0);
            prop_assert!(small.identity_residual(&k) < 1e-10);
            for (pt, j, v) in small.entries() {
                prop_assert!(big.get(&pt, j) >= v * (1.0 - 1e-12));
            }
        }

        #[test]
        fn occupation_is_dominated_by_phi(a in 0.1..0.35f64, b in 0.1..0.35f64, s in 0.0..1.0f64) {
            let k = walk(a, b);
            let tab = occupation_truncated(&k, &State::new(vec![0, 0], 0), 30).unwrap();
            let star = decay_rate(&k, &[1, 1]).unwrap().theta_star;
            let theta: Vec<f64> = star.iter().map(|t| t * s - 0.05).collect();
            prop_assume!(domain_contains(&k, &theta).unwrap());
            let phi = phi_truncated(&tab, &theta).unwrap();
            for kk in 0..15i64 {
                let w = ((kk as f64) * (theta[0] + theta[1])).exp() * tab.get(&[kk, kk], 0);
                prop_assert!(w <= phi.values[0] * (1.0 + 1e-8));
            }
        }
    }
}
