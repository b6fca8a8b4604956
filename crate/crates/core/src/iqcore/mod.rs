//! Core signal types, digital modulation synthesis and the `RFIQ` dataset file.

mod dataset;
mod modulation;

pub use dataset::{
    decode_dataset, encode_dataset, generate_dataset, noise_power_for_snr, read_dataset, synth_clean, synth_record,
    write_dataset, Dataset, DatasetRecord, SynthConfig, HEADER_LEN, RECORD_LEN,
};
pub use modulation::{modulate, ModulationScheme, ModulatorConfig, PulseShape, NUM_CLASSES};

use crate::{Complex64, Error, Result, FRAME_LEN};

/// A frame of [`FRAME_LEN`] finite complex baseband samples.
///
/// This is both the transmitted signal `x` and what a receiver observes after
/// the channel. The network sees it as a 2x128 real tensor (I row, Q row).
#[derive(Debug, Clone, PartialEq)]
pub struct IqFrame(Vec<Complex64>);

impl IqFrame {
    pub fn new(samples: Vec<Complex64>) -> Result<Self> {
        if samples.len() != FRAME_LEN {
            return Err(Error::InputLength(format!(
                "frame needs {FRAME_LEN} samples, got {}",
                samples.len()
            )));
        }
        if let Some(j) = samples.iter().position(|s| !s.re.is_finite() || !s.im.is_finite()) {
            return Err(Error::InvalidValue(format!("non-finite sample at index {j}")));
        }
        Ok(IqFrame(samples))
    }

    pub fn zeros() -> Self {
        IqFrame(vec![Complex64::new(0.0, 0.0); FRAME_LEN])
    }

    pub fn samples(&self) -> &[Complex64] {
        &self.0
    }

    pub fn into_samples(self) -> Vec<Complex64> {
        self.0
    }

    /// Sum of squared magnitudes.
    pub fn energy(&self) -> f64 {
        energy(&self.0)
    }

    /// I row followed by Q row.
    pub fn to_planar(&self) -> Vec<f64> {
        to_planar(&self.0)
    }

    pub fn from_planar(values: &[f64]) -> Result<Self> {
        IqFrame::new(from_planar(values)?)
    }

    /// Round every component to the nearest `f32`, i.e. to what the dataset
    /// file can represent.
    pub fn quantize_f32(&mut self) {
        for s in &mut self.0 {
            *s = Complex64::new(s.re as f32 as f64, s.im as f32 as f64);
        }
    }
}

impl AsRef<[Complex64]> for IqFrame {
    fn as_ref(&self) -> &[Complex64] {
        &self.0
    }
}

pub fn energy(x: &[Complex64]) -> f64 {
    x.iter().map(|s| s.norm_sqr()).sum()
}

pub fn norm(x: &[Complex64]) -> f64 {
    energy(x).sqrt()
}

/// Planar real layout of a complex vector: all I components, then all Q.
pub fn to_planar(x: &[Complex64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * x.len());
    out.extend(x.iter().map(|s| s.re));
    out.extend(x.iter().map(|s| s.im));
    out
}

pub fn from_planar(values: &[f64]) -> Result<Vec<Complex64>> {
    if values.len() % 2 != 0 {
        return Err(Error::InputLength(format!(
            "planar I/Q data needs an even length, got {}",
            values.len()
        )));
    }
    let p = values.len() / 2;
    Ok((0..p)
        .map(|j| Complex64::new(values[j], values[p + j]))
        .collect())
}
