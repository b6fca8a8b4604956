//! Stacked perturbations and their dominant right-singular direction.

use crate::iqcore::to_planar;
use crate::{Complex64, Error, Result};

/// Power iteration stops when successive iterates differ by less than this.
pub const PCA_TOL: f64 = 1e-10;
pub const PCA_MAX_ITERS: usize = 10_000;

/// `N` perturbations stacked as rows of planar reals `[I..., Q...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationBank {
    cols: usize,
    rows: Vec<Vec<f64>>,
}

impl PerturbationBank {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(Error::InputLength("perturbation bank needs at least one row".into()));
        };
        let cols = first.len();
        if cols == 0 {
            return Err(Error::InputLength("bank rows must be nonempty".into()));
        }
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::InputLength(format!("bank row {i} has {} values, expected {cols}", r.len())));
            }
            if !r.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidValue(format!("bank row {i} is not finite")));
            }
        }
        Ok(PerturbationBank { cols, rows })
    }

    pub fn from_complex(rows: &[Vec<Complex64>]) -> Result<Self> {
        Self::from_rows(rows.iter().map(|r| to_planar(r)).collect())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// `Δᵀ Δ v`.
    fn gram_apply(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in &self.rows {
            let s: f64 = r.iter().zip(v).map(|(a, b)| a * b).sum();
            for (o, a) in out.iter_mut().zip(r) {
                *o += s * a;
            }
        }
        out
    }
}

fn unit(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Flips `v` so that its first coordinate of magnitude above `1e-9` is positive.
pub fn canonical_sign(v: &mut [f64]) {
    if let Some(x) = v.iter().find(|x| x.abs() > 1e-9) {
        if *x < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

/// Unit right-singular vector of the (uncentered) bank for its largest
/// singular value, by power iteration on `ΔᵀΔ` started from the
/// largest-norm row. The sign is canonical.
pub fn first_principal_component(bank: &PerturbationBank) -> Result<Vec<f64>> {
    let norm2 = |r: &Vec<f64>| r.iter().map(|x| x * x).sum::<f64>();
    let start = bank
        .rows
        .iter()
        .max_by(|a, b| norm2(a).total_cmp(&norm2(b)))
        .expect("bank is nonempty");
    let mut v = start.clone();
    if unit(&mut v) == 0.0 {
        return Err(Error::Degenerate("perturbation bank has rank 0".into()));
    }
    for _ in 0..PCA_MAX_ITERS {
        let mut next = bank.gram_apply(&v);
        if unit(&mut next) == 0.0 {
            return Err(Error::Degenerate("perturbation bank has rank 0".into()));
        }
        let diff = next.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        v = next;
        if diff < PCA_TOL {
            break;
        }
    }
    canonical_sign(&mut v);
    Ok(v)
}

/// The principal direction turned to agree with the bank's rows on
/// average, so that a one-row bank yields that row's own direction.
pub fn oriented_component(bank: &PerturbationBank) -> Result<Vec<f64>> {
    let mut v = first_principal_component(bank)?;
    let along: f64 = bank.rows.iter().map(|r| r.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>()).sum();
    if along < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_rows() {
        let r = vec![-1.0, 2.0, 0.5];
        let bank = PerturbationBank::from_rows(vec![r.clone(); 4]).unwrap();
        let v = first_principal_component(&bank).unwrap();
        let n = (1.0f64 + 4.0 + 0.25).sqrt();
        for (a, b) in v.iter().zip(&r) {
            assert!((a + b / n).abs() < 1e-12);
        }
        let o = oriented_component(&bank).unwrap();
        for (a, b) in o.iter().zip(&r) {
            assert!((a - b / n).abs() < 1e-12);
        }
    }

    #[test]
    fn orthogonal_rows_pick_the_larger() {
        let bank = PerturbationBank::from_rows(vec![vec![0.0, 1.0, 0.0], vec![3.0, 0.0, 0.0]]).unwrap();
        let v = first_principal_component(&bank).unwrap();
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1].abs() < 1e-12);
    }

    #[test]
    fn zero_bank_is_degenerate() {
        let bank = PerturbationBank::from_rows(vec![vec![0.0; 4]; 3]).unwrap();
        assert!(matches!(first_principal_component(&bank), Err(Error::Degenerate(_))));
    }

    #[test]
    fn bank_validation() {
        assert!(PerturbationBank::from_rows(vec![]).is_err());
        assert!(PerturbationBank::from_rows(vec![vec![1.0], vec![1.0, 2.0]]).is_err());
        assert!(PerturbationBank::from_rows(vec![vec![f64::NAN]]).is_err());
    }
}
