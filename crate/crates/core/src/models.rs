//! Fixture kernels: a three-queue polling system and homogeneous random walks.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::decay::decay_rate;
use crate::error::{Error, Result};
use crate::kernel::{uniformize, Blocks, Kernel, KernelKind, Nu, RateKernel};

/// Single server visiting queues 1, 2, 3 in turn; queues 1 and 2 are served
/// 1-limited and queue 3 is served `k`-limited.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PollingParams {
    pub lambda: [f64; 3],
    pub mu: [f64; 3],
    pub k: usize,
}

impl PollingParams {
    pub fn table1(k: usize) -> Self {
        Self { lambda: [0.25; 3], mu: [1.0; 3], k }
    }

    pub fn table2(k: usize) -> Self {
        Self { lambda: [0.1, 0.1, 0.5], mu: [1.0; 3], k }
    }

    fn validate(&self) -> Result<()> {
        if self.lambda.iter().chain(&self.mu).any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::InvariantViolation("polling rates must be finite and positive".into()));
        }
        if self.k == 0 {
            return Err(Error::InvariantViolation("service limit K must be positive".into()));
        }
        Ok(())
    }
}

/// Rate kernel of the polling system in the interior of the orthant.
///
/// Phase 0 serves queue 1, phase 1 serves queue 2, and phase `2 + i` serves
/// the `(i + 1)`-th customer of the current visit to queue 3. The uniformization
/// hint is `lambda_1 + lambda_2 + lambda_3 + mu_1 + mu_2 + mu_3`.
pub fn polling_kernel(p: &PollingParams) -> Result<RateKernel> {
    p.validate()?;
    let m = p.k + 2;
    let eye = DMatrix::<f64>::identity(m, m);
    let mut blocks: Blocks = BTreeMap::new();
    blocks.insert(vec![1, 0, 0], &eye * p.lambda[0]);
    blocks.insert(vec![0, 1, 0], &eye * p.lambda[1]);
    blocks.insert(vec![0, 0, 1], &eye * p.lambda[2]);
    let mut s1 = DMatrix::zeros(m, m);
    s1[(0, 1)] = p.mu[0];
    blocks.insert(vec![-1, 0, 0], s1);
    let mut s2 = DMatrix::zeros(m, m);
    s2[(1, 2)] = p.mu[1];
    blocks.insert(vec![0, -1, 0], s2);
    let mut s3 = DMatrix::zeros(m, m);
    for j in 2..=p.k {
        s3[(j, j + 1)] = p.mu[2];
    }
    s3[(p.k + 1, 0)] = p.mu[2];
    blocks.insert(vec![0, 0, -1], s3);

    let mut diag = DMatrix::zeros(m, m);
    for i in 0..m {
        let out: f64 = blocks.values().map(|b| b.row(i).sum()).sum();
        diag[(i, i)] = -out;
    }
    blocks.insert(vec![0, 0, 0], diag);
    let nu = p.lambda.iter().chain(&p.mu).sum();
    RateKernel::new(3, Kernel::default_phases(m), blocks, Some(nu))
}

/// Increment law of a lazy simple walk: up with `p`, down with `q`, stay with `r`.
pub type StepLaw = (f64, f64, f64);

#[derive(Debug, Clone, PartialEq)]
pub enum WalkSpec {
    Scalar { p: f64, q: f64, r: f64 },
    /// Independent coordinates, one law per coordinate.
    Product(Vec<StepLaw>),
}

/// Single-phase kernel of a walk with independent coordinates.
pub fn make_walk(spec: &WalkSpec) -> Result<Kernel> {
    let laws = match spec {
        WalkSpec::Scalar { p, q, r } => vec![(*p, *q, *r)],
        WalkSpec::Product(laws) => laws.clone(),
    };
    if laws.is_empty() {
        return Err(Error::BadProbabilities("no coordinates".into()));
    }
    for (i, &(p, q, r)) in laws.iter().enumerate() {
        if [p, q, r].iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::BadProbabilities(format!("coordinate {i}: ({p}, {q}, {r}) has a negative entry")));
        }
        if (p + q + r - 1.0).abs() > 1e-12 {
            return Err(Error::BadProbabilities(format!("coordinate {i}: ({p}, {q}, {r}) sums to {}", p + q + r)));
        }
    }
    let mut blocks: Blocks = BTreeMap::new();
    blocks.insert(vec![], DMatrix::from_element(1, 1, 1.0));
    for &(p, q, r) in &laws {
        let mut next = BTreeMap::new();
        for (offset, w) in &blocks {
            for (step, prob) in [(-1, q), (0, r), (1, p)] {
                let mut o = offset.clone();
                o.push(step);
                next.insert(o, w * prob);
            }
        }
        blocks = next;
    }
    Kernel::new(laws.len(), Kernel::default_phases(1), blocks, KernelKind::Probability)
}

pub const TABLE_K: [usize; 6] = [1, 2, 3, 5, 10, 20];
pub const TABLE_DIRECTIONS: [[i64; 3]; 5] = [[1, 1, 1], [1, 1, 0], [1, 0, 1], [1, 0, 0], [0, 0, 1]];

#[derive(Debug, Clone, Serialize)]
pub struct TableRow {
    pub k: usize,
    pub c: [i64; 3],
    pub rate: f64,
}

impl TableRow {
    /// Rate rounded to two decimals.
    pub fn rounded(&self) -> f64 {
        (self.rate * 100.0).round() / 100.0
    }
}

/// Decay rates of the uniformized polling kernel over the direction and `K` grid.
/// Rows are ordered by `K`, then by direction as in [`TABLE_DIRECTIONS`].
pub fn reproduce_table(table: u8) -> Result<Vec<TableRow>> {
    let params: fn(usize) -> PollingParams = match table {
        1 => PollingParams::table1,
        2 => PollingParams::table2,
        other => return Err(Error::InvariantViolation(format!("unknown table {other}"))),
    };
    let cells: Vec<(usize, [i64; 3])> = TABLE_K.iter().flat_map(|&k| TABLE_DIRECTIONS.iter().map(move |&c| (k, c))).collect();
    cells
        .into_par_iter()
        .map(|(k, c)| {
            let kernel = uniformize(&polling_kernel(&params(k))?, Nu::Auto)?;
            let report = decay_rate(&kernel, &c)?;
            Ok(TableRow { k, c, rate: report.rate })
        })
        .collect()
}

/// `K,c1,c2,c3,rate,raw_rate` with the rate to two decimals and to 12 significant digits.
pub fn table_csv(rows: &[TableRow]) -> String {
    let mut out = String::from("K,c1,c2,c3,rate,raw_rate\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{:.2},{:.11e}", r.k, r.c[0], r.c[1], r.c[2], r.rounded(), r.rate);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{validate_kernel, Lattice};

    #[test]
    fn polling_k1_structure() {
        let rk = polling_kernel(&PollingParams::table1(1)).unwrap();
        assert_eq!(rk.phase_count(), 3);
        let s3 = &rk.blocks()[&vec![0, 0, -1]];
        let nonzero: Vec<(usize, usize)> = (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).filter(|&(i, j)| s3[(i, j)] != 0.0).collect();
        assert_eq!(nonzero, vec![(2, 0)]);
        assert_eq!(rk.nu_hint(), Some(3.75));
    }

    #[test]
    fn service_chain_length() {
        for k in [1, 2, 5, 20] {
            let rk = polling_kernel(&PollingParams::table2(k)).unwrap();
            let s3 = &rk.blocks()[&vec![0, 0, -1]];
            assert_eq!(s3.iter().filter(|x| **x != 0.0).count(), k);
            let total = rk.blocks().values().fold(DMatrix::zeros(k + 2, k + 2), |a, b| a + b);
            for i in 0..k + 2 {
                assert_eq!(total.row(i).sum(), 0.0);
            }
        }
    }

    #[test]
    fn uniformized_polling_is_valid() {
        let k = uniformize(&polling_kernel(&PollingParams::table1(2)).unwrap(), Nu::Auto).unwrap();
        let report = validate_kernel(&k);
        assert!(report.stochastic && report.mgf_irreducible && report.walk_irreducible_sufficient);
    }

    #[test]
    fn product_walk_blocks() {
        let k = make_walk(&WalkSpec::Product(vec![(0.2, 0.4, 0.4), (0.15, 0.45, 0.4)])).unwrap();
        assert_eq!(k.dim(), 2);
        assert!((k.block(&[1, -1]).unwrap()[(0, 0)] - 0.09).abs() < 1e-15);
        assert!(matches!(make_walk(&WalkSpec::Scalar { p: 0.2, q: 0.3, r: 0.4 }), Err(Error::BadProbabilities(_))));
    }

    #[test]
    fn relabelling_queues_preserves_rates() {
        let k = uniformize(&polling_kernel(&PollingParams::table1(1)).unwrap(), Nu::Auto).unwrap();
        // swap queues 1 and 2 together with the phases that serve them
        let mut perm = DMatrix::<f64>::identity(3, 3);
        perm.swap_rows(0, 1);
        let blocks: Blocks = k
            .blocks()
            .iter()
            .map(|(o, b)| (vec![o[1], o[0], o[2]], &perm * b * perm.transpose()))
            .collect();
        let swapped = Kernel::new(3, Kernel::default_phases(3), blocks, KernelKind::Probability).unwrap();
        let a = decay_rate(&k, &[1, 0, 0]).unwrap().rate;
        let b = decay_rate(&swapped, &[0, 1, 0]).unwrap().rate;
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }

    #[test]
    fn csv_layout() {
        let rows = vec![TableRow { k: 1, c: [1, 0, 0], rate: 0.452_345_678_9 }];
        assert_eq!(table_csv(&rows), "K,c1,c2,c3,rate,raw_rate\n1,1,0,0,0.45,4.52345678900e-1\n");
    }
}
