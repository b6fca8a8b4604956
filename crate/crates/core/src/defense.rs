//! Randomized smoothing: Gaussian training augmentation and a certified
//! prediction that abstains when the noisy votes are not decisive.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::classifier::Classifier;
use crate::iqcore::{DatasetRecord, IqFrame};
use crate::{Complex64, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothingParams {
    /// Noisy copies per frame.
    pub k: usize,
    /// Standard deviation per real component.
    pub sigma: f64,
    /// Significance level of the vote test.
    pub alpha: f64,
    /// Null probability of the binomial test.
    pub q: f64,
}

impl Default for SmoothingParams {
    fn default() -> Self {
        SmoothingParams {
            k: 20,
            sigma: 0.001,
            alpha: 0.05,
            q: 0.5,
        }
    }
}

impl SmoothingParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidValue(format!("alpha must be in (0, 1), got {}", self.alpha)));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidValue(format!("sigma must be finite and >= 0, got {}", self.sigma)));
        }
        if !(self.q > 0.0 && self.q < 1.0) {
            return Err(Error::InvalidValue(format!("q must be in (0, 1), got {}", self.q)));
        }
        Ok(())
    }
}

fn noisy<R: Rng + ?Sized>(x: &[Complex64], sigma: f64, rng: &mut R) -> Vec<Complex64> {
    if sigma == 0.0 {
        return x.to_vec();
    }
    let n = Normal::new(0.0, sigma).expect("sigma is finite and >= 0");
    x.iter()
        .map(|s| Complex64::new(s.re + n.sample(rng), s.im + n.sample(rng)))
        .collect()
}

/// Each record followed by `k` copies with i.i.d. Gaussian noise of std
/// `sigma` on every real component.
pub fn augment_training<R: Rng + ?Sized>(
    records: &[DatasetRecord],
    k: usize,
    sigma: f64,
    rng: &mut R,
) -> Result<Vec<DatasetRecord>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidValue(format!("sigma must be finite and >= 0, got {sigma}")));
    }
    let mut out = Vec::with_capacity(records.len() * (k + 1));
    for r in records {
        out.push(r.clone());
        for _ in 0..k {
            out.push(DatasetRecord {
                frame: IqFrame::new(noisy(r.frame.samples(), sigma, rng))?,
                label: r.label,
                snr_db: r.snr_db,
            });
        }
    }
    Ok(out)
}

/// Two-sided exact binomial test: the total probability under
/// `Bin(n_trials, q)` of the outcomes no more likely than `n_success`.
/// Probabilities are evaluated in log space.
pub fn binom_p_value(n_success: u64, n_trials: u64, q: f64) -> Result<f64> {
    if n_success > n_trials {
        return Err(Error::InvalidValue(format!("{n_success} successes in {n_trials} trials")));
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::InvalidValue(format!("q must be in (0, 1), got {q}")));
    }
    let n = n_trials as f64;
    let ln_c = libm::lgamma(n + 1.0);
    let (lq, lp) = (q.ln(), (-q).ln_1p());
    let ln_pmf = |i: u64| {
        let i = i as f64;
        ln_c - libm::lgamma(i + 1.0) - libm::lgamma(n - i + 1.0) + i * lq + (n - i) * lp
    };
    let cut = ln_pmf(n_success) + 1e-7f64.ln_1p();
    let logs: Vec<f64> = (0..=n_trials).map(ln_pmf).collect();
    // Normalizing by the computed total cancels the rounding of the
    // log-gamma terms, so including every outcome gives exactly 1.
    let all: f64 = logs.iter().map(|l| l.exp()).sum();
    let tail: f64 = logs.iter().filter(|&&l| l <= cut).map(|l| l.exp()).sum();
    Ok((tail / all).min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Class(usize),
    Abstain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CertifiedPrediction {
    pub outcome: Outcome,
    /// Votes per class over the noisy copies.
    pub counts: Vec<usize>,
    /// Most voted class (ties: lowest index) and its count.
    pub top: usize,
    pub n_a: usize,
    /// Count of the runner-up class.
    pub n_b: usize,
    pub p_value: f64,
}

/// Applies the vote test to per-class counts.
pub fn certify_from_counts(counts: &[usize], params: &SmoothingParams) -> Result<CertifiedPrediction> {
    params.validate()?;
    if counts.is_empty() || counts.iter().sum::<usize>() == 0 {
        return Err(Error::InvalidValue("need at least one vote".into()));
    }
    let mut top = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[top] {
            top = i;
        }
    }
    let n_a = counts[top];
    let n_b = counts.iter().enumerate().filter(|(i, _)| *i != top).map(|(_, &c)| c).max().unwrap_or(0);
    let p_value = binom_p_value(n_a as u64, (n_a + n_b) as u64, params.q)?;
    let outcome = if p_value <= params.alpha {
        Outcome::Class(top)
    } else {
        Outcome::Abstain
    };
    Ok(CertifiedPrediction {
        outcome,
        counts: counts.to_vec(),
        top,
        n_a,
        n_b,
        p_value,
    })
}

/// Classifies `k` noisy copies of `frame` and runs the vote test.
pub fn certified_predict<R: Rng + ?Sized>(
    model: &dyn Classifier,
    frame: &[Complex64],
    params: &SmoothingParams,
    rng: &mut R,
) -> Result<CertifiedPrediction> {
    params.validate()?;
    if params.k == 0 {
        return Err(Error::InvalidValue("certification needs k >= 1".into()));
    }
    let copies: Vec<Vec<Complex64>> = (0..params.k).map(|_| noisy(frame, params.sigma, rng)).collect();
    let refs: Vec<&[Complex64]> = copies.iter().map(Vec::as_slice).collect();
    let mut counts = vec![0usize; model.num_classes()];
    for p in model.predict_batch(&refs)? {
        counts[p] += 1;
    }
    certify_from_counts(&counts, params)
}
