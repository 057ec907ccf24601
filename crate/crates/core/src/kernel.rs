//! Markov-modulated random walk kernels.
//!
//! A kernel on `Z^d x {0..m}` is a sparse family of `m x m` nonnegative blocks
//! indexed by the jump vector. Skip-free kernels (every coordinate of every
//! offset in `{-1, 0, 1}`) are the main object; [`JumpKernel`] carries bounded
//! jumps until they are folded into a skip-free kernel by [`embed_bounded`].

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Jump vector of a block.
pub type Offset = Vec<i32>;

/// Blocks keyed by offset. Absent offsets are zero.
pub type Blocks = BTreeMap<Offset, DMatrix<f64>>;

const PROBABILITY_TOL: f64 = 1e-12;
const RATE_TOL: f64 = 1e-10;

/// Anything that exposes a lattice dimension, a phase count and offset blocks.
pub trait Lattice {
    fn dim(&self) -> usize;
    fn phase_count(&self) -> usize;
    fn blocks(&self) -> &Blocks;
}

/// `A*(theta) = sum_i exp(<i, theta>) A_i`.
pub fn mgf<L: Lattice + ?Sized>(k: &L, theta: &[f64]) -> DMatrix<f64> {
    let m = k.phase_count();
    let mut out = DMatrix::zeros(m, m);
    for (offset, block) in k.blocks() {
        out += block * dot(offset, theta).exp();
    }
    out
}

/// Partial derivative of `A*(theta)` with respect to `theta[axis]`.
pub fn mgf_partial<L: Lattice + ?Sized>(k: &L, theta: &[f64], axis: usize) -> DMatrix<f64> {
    let m = k.phase_count();
    let mut out = DMatrix::zeros(m, m);
    for (offset, block) in k.blocks() {
        if offset[axis] != 0 {
            out += block * (f64::from(offset[axis]) * dot(offset, theta).exp());
        }
    }
    out
}

fn dot(offset: &[i32], theta: &[f64]) -> f64 {
    offset.iter().zip(theta).map(|(&i, &t)| f64::from(i) * t).sum()
}

fn row_sums(blocks: &Blocks, m: usize) -> DVector<f64> {
    let mut sums = DVector::zeros(m);
    for block in blocks.values() {
        for (i, row) in block.row_iter().enumerate() {
            sums[i] += row.sum();
        }
    }
    sums
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Probability,
    Substochastic,
}

/// Skip-free MMRW transition kernel `{A_i : i in {-1,0,1}^d}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    dim: usize,
    phases: Vec<String>,
    blocks: Blocks,
    kind: KernelKind,
}

impl Lattice for Kernel {
    fn dim(&self) -> usize {
        self.dim
    }
    fn phase_count(&self) -> usize {
        self.phases.len()
    }
    fn blocks(&self) -> &Blocks {
        &self.blocks
    }
}

fn check_shape(dim: usize, phases: &[String], blocks: &Blocks, max_jump: Option<i32>) -> Result<()> {
    if dim == 0 {
        return Err(Error::InvariantViolation("dimension must be positive".into()));
    }
    if phases.is_empty() {
        return Err(Error::InvariantViolation("phase set is empty".into()));
    }
    let m = phases.len();
    for (offset, block) in blocks {
        if offset.len() != dim {
            return Err(Error::DimensionMismatch(format!(
                "offset {offset:?} has length {} but d = {dim}",
                offset.len()
            )));
        }
        if let Some(k) = max_jump {
            if offset.iter().any(|i| i.abs() > k) {
                return Err(if k == 1 {
                    Error::InvariantViolation(format!("offset {offset:?} is not skip-free"))
                } else {
                    Error::OffsetOutOfRange { offset: offset.clone(), k: k as usize }
                });
            }
        }
        if block.nrows() != m || block.ncols() != m {
            return Err(Error::DimensionMismatch(format!(
                "block {offset:?} is {}x{}, expected {m}x{m}",
                block.nrows(),
                block.ncols()
            )));
        }
        if block.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvariantViolation(format!("block {offset:?} has a non-finite entry")));
        }
    }
    Ok(())
}

fn check_nonnegative_stochastic(blocks: &Blocks, m: usize, kind: KernelKind) -> Result<()> {
    for (offset, block) in blocks {
        if block.iter().any(|&x| x < 0.0) {
            return Err(Error::InvariantViolation(format!("block {offset:?} has a negative entry")));
        }
    }
    let sums = row_sums(blocks, m);
    for (i, s) in sums.iter().enumerate() {
        let bad = match kind {
            KernelKind::Probability => (s - 1.0).abs() > PROBABILITY_TOL,
            KernelKind::Substochastic => *s > 1.0 + PROBABILITY_TOL,
        };
        if bad {
            return Err(Error::InvariantViolation(format!("row {i} sums to {s}")));
        }
    }
    Ok(())
}

fn drop_zero_blocks(blocks: Blocks) -> Blocks {
    blocks.into_iter().filter(|(_, b)| b.iter().any(|&x| x != 0.0)).collect()
}

impl Kernel {
    pub fn new(dim: usize, phases: Vec<String>, blocks: Blocks, kind: KernelKind) -> Result<Self> {
        check_shape(dim, &phases, &blocks, Some(1))?;
        check_nonnegative_stochastic(&blocks, phases.len(), kind)?;
        let blocks = drop_zero_blocks(blocks);
        let has_down = blocks.keys().any(|o| o.iter().any(|&i| i < 0));
        let has_up = blocks.keys().any(|o| o.iter().any(|&i| i > 0));
        if !has_down || !has_up {
            return Err(Error::InvariantViolation(
                "kernel needs nonzero blocks with both negative and positive offset components".into(),
            ));
        }
        Ok(Self { dim, phases, blocks, kind })
    }

    /// Phase labels `0..m` as strings.
    pub fn default_phases(m: usize) -> Vec<String> {
        (0..m).map(|j| j.to_string()).collect()
    }

    pub fn phases(&self) -> &[String] {
        &self.phases
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    pub fn block(&self, offset: &[i32]) -> Option<&DMatrix<f64>> {
        self.blocks.get(offset)
    }

    pub fn mgf(&self, theta: &[f64]) -> DMatrix<f64> {
        mgf(self, theta)
    }

    pub fn to_document(&self) -> KernelDocument {
        KernelDocument::from_blocks(self.dim, &self.phases, &self.blocks, DocumentKind::from(self.kind), None)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("kernel document serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}

/// Continuous-time rate blocks `{Ã_i}`; the zero-offset diagonal carries the
/// negated total exit rate.
#[derive(Debug, Clone, PartialEq)]
pub struct RateKernel {
    dim: usize,
    phases: Vec<String>,
    blocks: Blocks,
    nu_hint: Option<f64>,
}

impl Lattice for RateKernel {
    fn dim(&self) -> usize {
        self.dim
    }
    fn phase_count(&self) -> usize {
        self.phases.len()
    }
    fn blocks(&self) -> &Blocks {
        &self.blocks
    }
}

impl RateKernel {
    /// `nu_hint` is the uniformization constant used by [`Nu::Auto`]; when
    /// absent the maximal exit rate is used.
    pub fn new(dim: usize, phases: Vec<String>, blocks: Blocks, nu_hint: Option<f64>) -> Result<Self> {
        check_shape(dim, &phases, &blocks, Some(1))?;
        for (offset, block) in &blocks {
            let is_zero = offset.iter().all(|&i| i == 0);
            for i in 0..block.nrows() {
                for j in 0..block.ncols() {
                    if block[(i, j)] < 0.0 && !(is_zero && i == j) {
                        return Err(Error::InvariantViolation(format!(
                            "rate block {offset:?} has negative off-diagonal entry ({i}, {j})"
                        )));
                    }
                }
            }
        }
        let sums = row_sums(&blocks, phases.len());
        if let Some((i, s)) = sums.iter().enumerate().find(|(_, s)| s.abs() > RATE_TOL) {
            return Err(Error::InvariantViolation(format!("rate row {i} sums to {s}")));
        }
        if let Some(nu) = nu_hint {
            if !(nu.is_finite() && nu > 0.0) {
                return Err(Error::InvariantViolation(format!("uniformization hint {nu} is not positive")));
            }
        }
        Ok(Self { dim, phases, blocks: drop_zero_blocks(blocks), nu_hint })
    }

    pub fn phases(&self) -> &[String] {
        &self.phases
    }

    pub fn nu_hint(&self) -> Option<f64> {
        self.nu_hint
    }

    /// Total exit rate of each phase, `-Ã_0[j, j]`.
    pub fn exit_rates(&self) -> Vec<f64> {
        let m = self.phases.len();
        match self.blocks.get(&vec![0; self.dim]) {
            Some(b) => (0..m).map(|j| -b[(j, j)]).collect(),
            None => vec![0.0; m],
        }
    }

    pub fn to_document(&self) -> KernelDocument {
        KernelDocument::from_blocks(self.dim, &self.phases, &self.blocks, DocumentKind::Rate, self.nu_hint)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("kernel document serializes")
    }
}

/// Kernel with bounded (not necessarily skip-free) jumps.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpKernel {
    dim: usize,
    phases: Vec<String>,
    blocks: Blocks,
    kind: KernelKind,
}

impl Lattice for JumpKernel {
    fn dim(&self) -> usize {
        self.dim
    }
    fn phase_count(&self) -> usize {
        self.phases.len()
    }
    fn blocks(&self) -> &Blocks {
        &self.blocks
    }
}

impl JumpKernel {
    pub fn new(dim: usize, phases: Vec<String>, blocks: Blocks, kind: KernelKind) -> Result<Self> {
        check_shape(dim, &phases, &blocks, None)?;
        check_nonnegative_stochastic(&blocks, phases.len(), kind)?;
        Ok(Self { dim, phases, blocks: drop_zero_blocks(blocks), kind })
    }

    /// Largest absolute coordinate over all offsets.
    pub fn max_jump(&self) -> usize {
        self.blocks
            .keys()
            .flat_map(|o| o.iter().map(|i| i.unsigned_abs() as usize))
            .max()
            .unwrap_or(0)
    }
}

/// Outcome of [`validate_kernel`]. Every check is reported, none is assumed.
#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub dim: usize,
    pub phases: usize,
    /// `|row sum - 1|` for each phase.
    pub row_defects: Vec<f64>,
    pub stochastic: bool,
    /// Strong connectivity of the phase digraph of `A* = sum_i A_i`.
    pub mgf_irreducible: bool,
    /// For each coordinate: `(has a nonzero block with -1 there, has one with +1)`.
    pub coordinate_signs: Vec<(bool, bool)>,
    /// `A*` irreducible and every coordinate moves in both directions.
    /// Sufficient, not necessary, for irreducibility of the walk itself.
    pub walk_irreducible_sufficient: bool,
}

pub fn validate_kernel(k: &Kernel) -> ValidationReport {
    let m = k.phase_count();
    let sums = row_sums(&k.blocks, m);
    let row_defects: Vec<f64> = sums.iter().map(|s| (s - 1.0).abs()).collect();
    let stochastic = row_defects.iter().all(|&e| e <= PROBABILITY_TOL);
    let mgf_irreducible = linalg::is_irreducible(&k.mgf(&vec![0.0; k.dim]));
    let coordinate_signs: Vec<(bool, bool)> = (0..k.dim)
        .map(|axis| {
            let down = k.blocks.keys().any(|o| o[axis] == -1);
            let up = k.blocks.keys().any(|o| o[axis] == 1);
            (down, up)
        })
        .collect();
    let walk_irreducible_sufficient = mgf_irreducible && coordinate_signs.iter().all(|&(d, u)| d && u);
    ValidationReport {
        dim: k.dim,
        phases: m,
        row_defects,
        stochastic,
        mgf_irreducible,
        coordinate_signs,
        walk_irreducible_sufficient,
    }
}

/// Mean increment per step under the stationary phase law of `A*`.
#[derive(Debug, Clone, Serialize)]
pub struct DriftVector {
    pub a: Vec<f64>,
    pub pi_star: Vec<f64>,
}

/// `a_i = pi_* (dA*/dtheta_i)(0) 1` where `pi_* A* = pi_*`.
pub fn drift<L: Lattice + ?Sized>(k: &L) -> Result<DriftVector> {
    let zero = vec![0.0; k.dim()];
    let total = mgf(k, &zero);
    if !linalg::is_irreducible(&total) {
        return Err(Error::NotIrreducible);
    }
    let pi = linalg::stationary_distribution(&total)?;
    let ones = DVector::from_element(k.phase_count(), 1.0);
    let a = (0..k.dim())
        .map(|axis| (pi.transpose() * mgf_partial(k, &zero, axis) * &ones)[0])
        .collect();
    Ok(DriftVector { a, pi_star: pi.iter().copied().collect() })
}

/// Uniformization constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Nu {
    /// The kernel's hint if it has one, otherwise the largest exit rate.
    Auto,
    Value(f64),
}

/// `A_0 = I + Ã_0 / nu`, `A_i = Ã_i / nu` otherwise.
pub fn uniformize(rk: &RateKernel, nu: Nu) -> Result<Kernel> {
    let exits = rk.exit_rates();
    let max_exit = exits.iter().copied().fold(0.0, f64::max);
    let nu = match nu {
        Nu::Value(v) => v,
        Nu::Auto => rk.nu_hint.unwrap_or(max_exit),
    };
    if let Some((phase, &exit_rate)) = exits.iter().enumerate().find(|(_, &e)| e > nu) {
        return Err(Error::NuTooSmall { nu, exit_rate, phase });
    }
    if !(nu > 0.0) {
        return Err(Error::NuTooSmall { nu, exit_rate: max_exit, phase: 0 });
    }
    let m = rk.phase_count();
    let zero = vec![0; rk.dim];
    let mut blocks: Blocks = rk.blocks.iter().map(|(o, b)| (o.clone(), b / nu)).collect();
    *blocks.entry(zero).or_insert_with(|| DMatrix::zeros(m, m)) += DMatrix::<f64>::identity(m, m);
    // absorb rounding so the rows are exactly representable as probabilities
    for (_, b) in blocks.iter_mut() {
        b.iter_mut().filter(|x| **x < 0.0 && **x > -1e-15).for_each(|x| *x = 0.0);
    }
    Kernel::new(rk.dim, rk.phases.clone(), blocks, KernelKind::Probability)
}

/// Write `x = moduli ∘ x_hat + r` with `0 <= r < moduli` and take `(r, phase)`
/// as the new phase. Jumps of size at most `moduli` per coordinate become
/// skip-free in `x_hat`. Phases are ordered with the remainder as the major key
/// (row-major over coordinates) and the original phase as the minor key.
fn quotient_lattice(dim: usize, phases: &[String], blocks: &Blocks, moduli: &[usize]) -> (Vec<String>, Blocks) {
    let m = phases.len();
    let remainders = remainder_vectors(moduli);
    let index_of = |r: &[usize]| r.iter().zip(moduli).fold(0usize, |acc, (&ri, &mi)| acc * mi + ri);
    let size = remainders.len() * m;

    let new_phases = remainders
        .iter()
        .flat_map(|r| {
            phases.iter().map(move |label| {
                let r: Vec<String> = r.iter().map(|x| x.to_string()).collect();
                format!("({})/{}", r.join(","), label)
            })
        })
        .collect();

    let mut out: Blocks = BTreeMap::new();
    for r in &remainders {
        let row_base = index_of(r) * m;
        for (offset, block) in blocks {
            let mut hat = Vec::with_capacity(dim);
            let mut r_next = Vec::with_capacity(dim);
            for ((&ri, &s), &mi) in r.iter().zip(offset).zip(moduli) {
                let y = ri as i64 + i64::from(s);
                let q = y.div_euclid(mi as i64);
                hat.push(q as i32);
                r_next.push(y.rem_euclid(mi as i64) as usize);
            }
            let col_base = index_of(&r_next) * m;
            let target = out.entry(hat).or_insert_with(|| DMatrix::zeros(size, size));
            for i in 0..m {
                for j in 0..m {
                    target[(row_base + i, col_base + j)] += block[(i, j)];
                }
            }
        }
    }
    (new_phases, out)
}

fn remainder_vectors(moduli: &[usize]) -> Vec<Vec<usize>> {
    let mut all = vec![vec![]];
    for &mi in moduli {
        all = all
            .into_iter()
            .flat_map(|prefix| {
                (0..mi).map(move |r| {
                    let mut v = prefix.clone();
                    v.push(r);
                    v
                })
            })
            .collect();
    }
    all
}

/// Skip-free kernel equivalent to a bounded-jump kernel with jumps in `{-k..k}^d`,
/// through the state bijection `x = k x_hat + r`.
pub fn embed_bounded(jk: &JumpKernel, k: usize) -> Result<Kernel> {
    if k == 0 {
        return Err(Error::InvariantViolation("jump bound must be positive".into()));
    }
    if let Some(offset) = jk.blocks.keys().find(|o| o.iter().any(|&i| i.unsigned_abs() as usize > k)) {
        return Err(Error::OffsetOutOfRange { offset: offset.clone(), k });
    }
    if k == 1 {
        return Kernel::new(jk.dim, jk.phases.clone(), jk.blocks.clone(), jk.kind);
    }
    let (phases, blocks) = quotient_lattice(jk.dim, &jk.phases, &jk.blocks, &vec![k; jk.dim]);
    Kernel::new(jk.dim, phases, blocks, jk.kind)
}

/// Kernel of the walk observed on the coarser lattice `x = c ∘ x_hat + r`.
pub fn rescale(k: &Kernel, c: &[usize]) -> Result<Kernel> {
    if c.len() != k.dim {
        return Err(Error::DimensionMismatch(format!("c has length {}, d = {}", c.len(), k.dim)));
    }
    if c.iter().any(|&ci| ci == 0) {
        return Err(Error::InvariantViolation("rescaling factors must be positive".into()));
    }
    if c.iter().all(|&ci| ci == 1) {
        return Ok(k.clone());
    }
    let (phases, blocks) = quotient_lattice(k.dim, &k.phases, &k.blocks, c);
    Kernel::new(k.dim, phases, blocks, k.kind)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DocumentKind {
    Probability,
    Substochastic,
    Rate,
}

impl From<KernelKind> for DocumentKind {
    fn from(kind: KernelKind) -> Self {
        match kind {
            KernelKind::Probability => DocumentKind::Probability,
            KernelKind::Substochastic => DocumentKind::Substochastic,
        }
    }
}

/// Sparse JSON form of a kernel.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelDocument {
    pub d: usize,
    pub phases: Vec<String>,
    pub kind: DocumentKind,
    pub blocks: Vec<BlockDocument>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nu: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockDocument {
    pub offset: Vec<i32>,
    pub entries: Vec<(usize, usize, f64)>,
}

impl KernelDocument {
    fn from_blocks(dim: usize, phases: &[String], blocks: &Blocks, kind: DocumentKind, nu: Option<f64>) -> Self {
        let blocks = blocks
            .iter()
            .map(|(offset, b)| {
                let mut entries = Vec::new();
                for i in 0..b.nrows() {
                    for j in 0..b.ncols() {
                        if b[(i, j)] != 0.0 {
                            entries.push((i, j, b[(i, j)]));
                        }
                    }
                }
                BlockDocument { offset: offset.clone(), entries }
            })
            .collect();
        Self { d: dim, phases: phases.to_vec(), kind, blocks, nu }
    }

    fn to_blocks(&self) -> Result<Blocks> {
        let m = self.phases.len();
        let mut blocks: Blocks = BTreeMap::new();
        let mut seen = std::collections::BTreeSet::new();
        for block in &self.blocks {
            if block.offset.len() != self.d {
                return Err(Error::InvariantViolation(format!(
                    "offset {:?} does not have length d = {}",
                    block.offset, self.d
                )));
            }
            let target = blocks.entry(block.offset.clone()).or_insert_with(|| DMatrix::zeros(m, m));
            for &(i, j, v) in &block.entries {
                if i >= m || j >= m {
                    return Err(Error::InvariantViolation(format!(
                        "entry ({i}, {j}) in block {:?} is outside {m} phases",
                        block.offset
                    )));
                }
                if !seen.insert((block.offset.clone(), i, j)) {
                    return Err(Error::InvariantViolation(format!(
                        "duplicate entry ({i}, {j}) in block {:?}",
                        block.offset
                    )));
                }
                target[(i, j)] = v;
            }
        }
        Ok(blocks)
    }
}

/// A parsed kernel file, before any uniformization.
#[derive(Debug, Clone)]
pub enum KernelSource {
    Discrete(Kernel),
    Rate(RateKernel),
}

impl KernelSource {
    /// Discrete kernel; rate kernels are uniformized with [`Nu::Auto`].
    pub fn into_kernel(self) -> Result<Kernel> {
        match self {
            KernelSource::Discrete(k) => Ok(k),
            KernelSource::Rate(rk) => uniformize(&rk, Nu::Auto),
        }
    }
}

pub fn parse_kernel(text: &str) -> Result<KernelSource> {
    let doc: KernelDocument = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    let blocks = doc.to_blocks()?;
    Ok(match doc.kind {
        DocumentKind::Probability => {
            KernelSource::Discrete(Kernel::new(doc.d, doc.phases, blocks, KernelKind::Probability)?)
        }
        DocumentKind::Substochastic => {
            KernelSource::Discrete(Kernel::new(doc.d, doc.phases, blocks, KernelKind::Substochastic)?)
        }
        DocumentKind::Rate => KernelSource::Rate(RateKernel::new(doc.d, doc.phases, blocks, doc.nu)?),
    })
}

/// Load a kernel file; rate files are uniformized.
pub fn load_kernel(path: impl AsRef<Path>) -> Result<Kernel> {
    let text = std::fs::read_to_string(path)?;
    parse_kernel(&text)?.into_kernel()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(p: f64, q: f64, r: f64) -> Kernel {
        let mut blocks = Blocks::new();
        blocks.insert(vec![-1], DMatrix::from_element(1, 1, q));
        blocks.insert(vec![0], DMatrix::from_element(1, 1, r));
        blocks.insert(vec![1], DMatrix::from_element(1, 1, p));
        Kernel::new(1, Kernel::default_phases(1), blocks, KernelKind::Probability).unwrap()
    }

    const SCALAR_JSON: &str = r#"{"d":1,"phases":["a"],"kind":"probability","blocks":[
        {"offset":[-1],"entries":[[0,0,0.4]]},
        {"offset":[0],"entries":[[0,0,0.4]]},
        {"offset":[1],"entries":[[0,0,0.2]]}]}"#;

    #[test]
    fn parses_scalar_walk() {
        let k = parse_kernel(SCALAR_JSON).unwrap().into_kernel().unwrap();
        assert_eq!(k.dim(), 1);
        assert_eq!(k.phase_count(), 1);
        assert_eq!(k.block(&[-1]).unwrap()[(0, 0)], 0.4);
    }

    #[test]
    fn rejects_long_jump() {
        let text = SCALAR_JSON.replace("[1]", "[2]");
        assert!(matches!(parse_kernel(&text), Err(Error::InvariantViolation(_))));
    }

    #[test]
    fn rejects_duplicate_entry_and_bad_rows() {
        let dup = r#"{"d":1,"phases":["a"],"kind":"probability","blocks":[
            {"offset":[-1],"entries":[[0,0,0.4]]},{"offset":[-1],"entries":[[0,0,0.1]]},
            {"offset":[1],"entries":[[0,0,0.5]]}]}"#;
        assert!(matches!(parse_kernel(dup), Err(Error::InvariantViolation(_))));
        let bad = SCALAR_JSON.replace("0.2", "0.3");
        assert!(matches!(parse_kernel(&bad), Err(Error::InvariantViolation(_))));
        assert!(matches!(parse_kernel("{not json"), Err(Error::Parse(_))));
    }

    #[test]
    fn rejects_one_sided_kernel() {
        let mut blocks = Blocks::new();
        blocks.insert(vec![0], DMatrix::from_element(1, 1, 0.5));
        blocks.insert(vec![1], DMatrix::from_element(1, 1, 0.5));
        assert!(Kernel::new(1, Kernel::default_phases(1), blocks, KernelKind::Probability).is_err());
    }

    #[test]
    fn mgf_scalar_values() {
        let k = scalar(0.2, 0.4, 0.4);
        assert!((k.mgf(&[0.0])[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((k.mgf(&[2f64.ln()])[(0, 0)] - 1.0).abs() < 1e-15);
        let expected = 0.4 * (-1f64).exp() + 0.4 + 0.2 * 1f64.exp();
        assert!((k.mgf(&[1.0])[(0, 0)] - expected).abs() < 1e-15);
        assert!((expected - 1.0908).abs() < 1e-4);
    }

    #[test]
    fn validation_of_scalar_and_missing_up_jump() {
        let report = validate_kernel(&scalar(0.2, 0.4, 0.4));
        assert!(report.stochastic && report.mgf_irreducible && report.walk_irreducible_sufficient);

        // coordinate 0 never jumps up; coordinate 1 does
        let mut blocks = Blocks::new();
        blocks.insert(vec![-1, 0], DMatrix::from_element(1, 1, 0.3));
        blocks.insert(vec![0, 1], DMatrix::from_element(1, 1, 0.3));
        blocks.insert(vec![0, -1], DMatrix::from_element(1, 1, 0.4));
        let k = Kernel::new(2, Kernel::default_phases(1), blocks, KernelKind::Probability).unwrap();
        let report = validate_kernel(&k);
        assert_eq!(report.coordinate_signs[0], (true, false));
        assert!(!report.walk_irreducible_sufficient);
    }

    #[test]
    fn scalar_drift() {
        let d = drift(&scalar(0.2, 0.4, 0.4)).unwrap();
        assert!((d.a[0] + 0.2).abs() < 1e-15);
        assert_eq!(d.pi_star, vec![1.0]);
    }

    #[test]
    fn uniformize_checks_nu() {
        let mut blocks = Blocks::new();
        blocks.insert(vec![-1], DMatrix::from_element(1, 1, 2.0));
        blocks.insert(vec![1], DMatrix::from_element(1, 1, 1.0));
        blocks.insert(vec![0], DMatrix::from_element(1, 1, -3.0));
        let rk = RateKernel::new(1, Kernel::default_phases(1), blocks, None).unwrap();
        let k = uniformize(&rk, Nu::Auto).unwrap();
        assert_eq!(k.block(&[0]), None);
        assert!((k.block(&[-1]).unwrap()[(0, 0)] - 2.0 / 3.0).abs() < 1e-15);
        let k = uniformize(&rk, Nu::Value(6.0)).unwrap();
        assert!((k.block(&[0]).unwrap()[(0, 0)] - 0.5).abs() < 1e-15);
        assert!(matches!(uniformize(&rk, Nu::Value(2.0)), Err(Error::NuTooSmall { .. })));
    }

    #[test]
    fn identity_rescale_and_embedding() {
        let k = scalar(0.2, 0.4, 0.4);
        assert_eq!(rescale(&k, &[1]).unwrap(), k);
        let jk = JumpKernel::new(1, Kernel::default_phases(1), k.blocks().clone(), KernelKind::Probability).unwrap();
        assert_eq!(embed_bounded(&jk, 1).unwrap(), k);
    }

    #[test]
    fn embedding_of_even_jumps() {
        let mut blocks = Blocks::new();
        blocks.insert(vec![-2], DMatrix::from_element(1, 1, 0.3));
        blocks.insert(vec![0], DMatrix::from_element(1, 1, 0.3));
        blocks.insert(vec![2], DMatrix::from_element(1, 1, 0.4));
        let jk = JumpKernel::new(1, Kernel::default_phases(1), blocks, KernelKind::Probability).unwrap();
        let k = embed_bounded(&jk, 2).unwrap();
        assert_eq!(k.phase_count(), 2);
        // remainder r stays put under even jumps, so every block is diagonal
        let down = k.block(&[-1]).unwrap();
        assert_eq!(down, &DMatrix::from_row_slice(2, 2, &[0.3, 0.0, 0.0, 0.3]));
        let up = k.block(&[1]).unwrap();
        assert_eq!(up, &DMatrix::from_row_slice(2, 2, &[0.4, 0.0, 0.0, 0.4]));
        let total = k.mgf(&[0.0]);
        for i in 0..2 {
            assert!((total.row(i).sum() - 1.0).abs() < 1e-15);
        }
        let mut far = BTreeMap::new();
        far.insert(vec![3], DMatrix::from_element(1, 1, 1.0));
        let jk = JumpKernel::new(1, Kernel::default_phases(1), far, KernelKind::Probability).unwrap();
        assert!(matches!(embed_bounded(&jk, 2), Err(Error::OffsetOutOfRange { .. })));
    }

    #[test]
    fn odd_jump_embedding_moves_remainder() {
        let mut blocks = Blocks::new();
        blocks.insert(vec![-1], DMatrix::from_element(1, 1, 0.5));
        blocks.insert(vec![2], DMatrix::from_element(1, 1, 0.5));
        let jk = JumpKernel::new(1, Kernel::default_phases(1), blocks, KernelKind::Probability).unwrap();
        let k = embed_bounded(&jk, 2).unwrap();
        // x = 2 x_hat + r; from r = 0 a -1 jump lands at r = 1 one level down,
        // from r = 1 it stays on the level at r = 0.
        assert_eq!(k.block(&[-1]).unwrap()[(0, 1)], 0.5);
        assert_eq!(k.block(&[0]).unwrap()[(1, 0)], 0.5);
        assert_eq!(k.block(&[1]).unwrap()[(0, 0)], 0.5);
        assert_eq!(k.block(&[1]).unwrap()[(1, 1)], 0.5);
    }

    #[test]
    fn document_round_trip() {
        let k = scalar(0.2, 0.4, 0.4);
        let back = parse_kernel(&k.to_json()).unwrap().into_kernel().unwrap();
        assert_eq!(back, k);
    }
}

#[cfg(test)]
mod properties {
    use super::*;
    use crate::oracle::{occupation_truncated, State};
    use crate::spectral::chi;
    use proptest::prelude::*;

    fn product(laws: &[(f64, f64, f64)]) -> Kernel {
        let mut blocks = Blocks::new();
        blocks.insert(vec![], DMatrix::from_element(1, 1, 1.0));
        for &(p, q, r) in laws {
            let mut next = Blocks::new();
            for (o, w) in &blocks {
                for (s, prob) in [(-1, q), (0, r), (1, p)] {
                    let mut o = o.clone();
                    o.push(s);
                    next.insert(o, w * prob);
                }
            }
            blocks = next;
        }
        Kernel::new(laws.len(), Kernel::default_phases(1), blocks, KernelKind::Probability).unwrap()
    }

    /// Two-phase kernel on `Z^2` with phase switching.
    fn modulated() -> Kernel {
        let mut blocks = Blocks::new();
        let b = |a: f64, b: f64, c: f64, d: f64| DMatrix::from_row_slice(2, 2, &[a, b, c, d]);
        blocks.insert(vec![-1, 0], b(0.2, 0.05, 0.1, 0.1));
        blocks.insert(vec![0, -1], b(0.1, 0.05, 0.15, 0.05));
        blocks.insert(vec![1, 1], b(0.1, 0.0, 0.05, 0.05));
        blocks.insert(vec![0, 0], b(0.2, 0.1, 0.1, 0.2));
        blocks.insert(vec![1, -1], b(0.05, 0.15, 0.1, 0.1));
        Kernel::new(2, Kernel::default_phases(2), blocks, KernelKind::Probability).unwrap()
    }

    fn theta(d: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-2.0..2.0f64, d)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn mgf_entries_are_log_convex(a in theta(2), b in theta(2)) {
            let k = modulated();
            let (ma, mb) = (k.mgf(&a), k.mgf(&b));
            for lam in [0.25, 0.5, 0.75] {
                let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| lam * x + (1.0 - lam) * y).collect();
                let mm = k.mgf(&mid);
                for i in 0..mm.len() {
                    prop_assert!(mm[i] <= ma[i].powf(lam) * mb[i].powf(1.0 - lam) + 1e-12);
                }
            }
        }

        #[test]
        fn rescaling_preserves_perron_roots(t in theta(2), c1 in 1usize..4, c2 in 1usize..4) {
            let k = modulated();
            let rk = rescale(&k, &[c1, c2]).unwrap();
            prop_assert_eq!(rk.phase_count(), 2 * c1 * c2);
            let scaled = [t[0] * c1 as f64, t[1] * c2 as f64];
            let (a, b) = (chi(&rk, &scaled).unwrap(), chi(&k, &t).unwrap());
            prop_assert!((a - b).abs() <= 1e-10 * b.max(1.0), "{} vs {}", a, b);
        }

        #[test]
        fn drift_vector_is_stationary(p in 0.05..0.45f64, q in 0.05..0.45f64, s in 0.05..0.45f64, u in 0.05..0.45f64) {
            let k = product(&[(p, q, 1.0 - p - q), (s, u, 1.0 - s - u)]);
            let d = drift(&k).unwrap();
            prop_assert!((d.a[0] - (p - q)).abs() < 1e-12 && (d.a[1] - (s - u)).abs() < 1e-12);
            let k = modulated();
            let d = drift(&k).unwrap();
            let pi = DVector::from_vec(d.pi_star.clone());
            let total = k.mgf(&[0.0, 0.0]);
            prop_assert!((pi.transpose() * total - pi.transpose()).amax() < 1e-10);
        }

        #[test]
        fn embedding_preserves_occupation(w in prop::collection::vec(0.05..1.0f64, 5)) {
            let s: f64 = w.iter().sum();
            let probs: Vec<f64> = w.iter().map(|x| x / s).collect();
            let mean: f64 = probs.iter().zip(-2..=2).map(|(p, j)| p * f64::from(j)).sum();
            prop_assume!(mean < -0.05);
            let mut blocks = Blocks::new();
            for (p, j) in probs.iter().zip(-2..=2) {
                blocks.insert(vec![j], DMatrix::from_element(1, 1, *p));
            }
            let jk = JumpKernel::new(1, Kernel::default_phases(1), blocks, KernelKind::Probability).unwrap();
            let ek = embed_bounded(&jk, 2).unwrap();
            let original = occupation_truncated(&jk, &State::new(vec![0], 0), 21).unwrap();
            let embedded = occupation_truncated(&ek, &State::new(vec![0], 0), 10).unwrap();
            for x in 0..=21i64 {
                let (a, b) = (original.get(&[x], 0), embedded.get(&[x / 2], (x % 2) as usize));
                prop_assert!((a - b).abs() <= 1e-10 * a.max(1e-300), "x = {}: {} vs {}", x, a, b);
            }
        }
    }
}
