//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use rfadvsim::classifier::Classifier;
use rfadvsim::nnad::softmax_rows;
use rfadvsim::Complex64;

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns the
/// eigenvalues and the eigenvectors as columns of the second matrix.
pub fn jacobi_eigen(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut a: Vec<Vec<f64>> = a.to_vec();
    let mut v = vec![vec![0.0; n]; n];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        let total: f64 = a.iter().flatten().map(|x| x * x).sum();
        if off <= 1e-30 * total.max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p][q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let vp = row[p];
                    let vq = row[q];
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i][i]).collect(), v)
}

/// Unit eigenvector of the largest eigenvalue of `rows^T rows`.
pub fn dominant_right_singular(rows: &[Vec<f64>]) -> Vec<f64> {
    let d = rows[0].len();
    let mut g = vec![vec![0.0; d]; d];
    for r in rows {
        for i in 0..d {
            for j in 0..d {
                g[i][j] += r[i] * r[j];
            }
        }
    }
    let (vals, vecs) = jacobi_eigen(&g);
    let k = (0..d).max_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap();
    let v: Vec<f64> = vecs.iter().map(|row| row[k]).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Cross-entropy of `frame` against `label`, from the logits alone.
pub fn ce_loss(model: &dyn Classifier, frame: &[Complex64], label: usize) -> f64 {
    let z = model.logits(&[frame]).unwrap().remove(0);
    -softmax_rows(&z, z.len())[label].ln()
}

fn central_diffs(model: &dyn Classifier, frame: &[Complex64], label: usize, h: f64) -> Vec<Complex64> {
    let n = frame.len();
    let mut probes: Vec<Vec<Complex64>> = Vec::with_capacity(4 * n);
    for j in 0..n {
        for d in [Complex64::new(h, 0.0), Complex64::new(-h, 0.0), Complex64::new(0.0, h), Complex64::new(0.0, -h)] {
            let mut x = frame.to_vec();
            x[j] += d;
            probes.push(x);
        }
    }
    let refs: Vec<&[Complex64]> = probes.iter().map(Vec::as_slice).collect();
    let z = model.logits(&refs).unwrap();
    let l: Vec<f64> = z.iter().map(|z| -softmax_rows(z, z.len())[label].ln()).collect();
    (0..n)
        .map(|j| {
            let b = 4 * j;
            Complex64::new((l[b] - l[b + 1]) / (2.0 * h), (l[b + 2] - l[b + 3]) / (2.0 * h))
        })
        .collect()
}

/// Central differences of the loss along every real and imaginary
/// coordinate, returned as a complex gradient `d/dRe + i d/dIm`.
///
/// A ReLU kink inside `[x - h, x + h]` spoils a central difference, so each
/// coordinate takes the first of the steps `h, h/10, h/100` whose estimate
/// agrees with the next smaller step.
pub fn fd_loss_grad(model: &dyn Classifier, frame: &[Complex64], label: usize, h: f64) -> Vec<Complex64> {
    let levels: Vec<Vec<Complex64>> = (0..4).map(|k| central_diffs(model, frame, label, h / 10f64.powi(k))).collect();
    let pick = |get: &dyn Fn(&Complex64) -> f64, j: usize| -> f64 {
        for k in 0..levels.len() - 1 {
            let (a, b) = (get(&levels[k][j]), get(&levels[k + 1][j]));
            if (a - b).abs() <= 1e-7 * (1.0 + b.abs()) {
                return a;
            }
        }
        get(&levels[levels.len() - 1][j])
    };
    (0..frame.len()).map(|j| Complex64::new(pick(&|c| c.re, j), pick(&|c| c.im, j))).collect()
}

/// Largest coordinate error relative to the largest coordinate of `reference`.
pub fn max_rel_error(got: &[Complex64], reference: &[Complex64]) -> f64 {
    let scale = reference.iter().map(|c| c.re.abs().max(c.im.abs())).fold(0.0, f64::max).max(1e-300);
    got.iter()
        .zip(reference)
        .map(|(a, b)| (a.re - b.re).abs().max((a.im - b.im).abs()))
        .fold(0.0, f64::max)
        / scale
}

pub fn power(x: &[Complex64]) -> f64 {
    x.iter().map(|c| c.norm_sqr()).sum()
}
