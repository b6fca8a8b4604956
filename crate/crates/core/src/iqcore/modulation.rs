use std::f64::consts::{FRAC_1_SQRT_2, PI};

use rand::Rng;

use super::IqFrame;
use crate::{Complex64, Error, Result, FRAME_LEN};

pub const NUM_CLASSES: usize = 8;

/// Internal oversampling used to integrate the phase of CPFSK/GFSK.
const FSK_OVERSAMPLE: usize = 16;
/// GFSK frequency pulses are truncated to this many symbols.
const GAUSS_SPAN: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModulationScheme {
    Bpsk,
    Qpsk,
    Psk8,
    Qam16,
    Qam64,
    Pam4,
    Cpfsk,
    Gfsk,
}

impl ModulationScheme {
    pub const ALL: [ModulationScheme; NUM_CLASSES] = [
        ModulationScheme::Bpsk,
        ModulationScheme::Qpsk,
        ModulationScheme::Psk8,
        ModulationScheme::Qam16,
        ModulationScheme::Qam64,
        ModulationScheme::Pam4,
        ModulationScheme::Cpfsk,
        ModulationScheme::Gfsk,
    ];

    /// Class index used as the classifier label.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ModulationScheme::Bpsk => "BPSK",
            ModulationScheme::Qpsk => "QPSK",
            ModulationScheme::Psk8 => "8PSK",
            ModulationScheme::Qam16 => "QAM16",
            ModulationScheme::Qam64 => "QAM64",
            ModulationScheme::Pam4 => "PAM4",
            ModulationScheme::Cpfsk => "CPFSK",
            ModulationScheme::Gfsk => "GFSK",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|s| s.name().eq_ignore_ascii_case(name))
    }

    pub fn bits_per_symbol(self) -> usize {
        match self {
            ModulationScheme::Bpsk | ModulationScheme::Cpfsk | ModulationScheme::Gfsk => 1,
            ModulationScheme::Qpsk | ModulationScheme::Pam4 => 2,
            ModulationScheme::Psk8 => 3,
            ModulationScheme::Qam16 => 4,
            ModulationScheme::Qam64 => 6,
        }
    }

    /// Memoryless schemes map each bit group to one constellation point.
    pub fn is_memoryless(self) -> bool {
        !matches!(self, ModulationScheme::Cpfsk | ModulationScheme::Gfsk)
    }

    /// Unit-average-energy constellation indexed by the integer value of the
    /// bit group (first bit most significant). `None` for the FSK schemes.
    pub fn constellation(self) -> Option<Vec<Complex64>> {
        let n = 1usize << self.bits_per_symbol();
        match self {
            ModulationScheme::Bpsk => Some(vec![Complex64::new(1.0, 0.0), Complex64::new(-1.0, 0.0)]),
            ModulationScheme::Qpsk => Some(
                (0..n)
                    .map(|v| {
                        let (b0, b1) = ((v >> 1) & 1, v & 1);
                        Complex64::new(1.0 - 2.0 * b0 as f64, 1.0 - 2.0 * b1 as f64) * FRAC_1_SQRT_2
                    })
                    .collect(),
            ),
            ModulationScheme::Psk8 => Some(
                (0..n)
                    .map(|v| Complex64::from_polar(1.0, 2.0 * PI * gray_decode(v) as f64 / 8.0))
                    .collect(),
            ),
            ModulationScheme::Qam16 => Some(square_qam(4)),
            ModulationScheme::Qam64 => Some(square_qam(8)),
            ModulationScheme::Pam4 => Some(
                (0..n)
                    .map(|v| Complex64::new(pam_level(v, 4) / 5f64.sqrt(), 0.0))
                    .collect(),
            ),
            ModulationScheme::Cpfsk | ModulationScheme::Gfsk => None,
        }
    }
}

impl std::fmt::Display for ModulationScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Transmit pulse shaping of the memoryless schemes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PulseShape {
    /// One sample per symbol, no filtering.
    None,
    RootRaisedCosine {
        rolloff: f64,
        samples_per_symbol: usize,
        /// Filter length in symbols.
        span: usize,
    },
}

impl PulseShape {
    pub fn samples_per_symbol(&self) -> usize {
        match *self {
            PulseShape::None => 1,
            PulseShape::RootRaisedCosine {
                samples_per_symbol, ..
            } => samples_per_symbol,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModulatorConfig {
    pub cpfsk_index: f64,
    pub gfsk_index: f64,
    pub gfsk_bt: f64,
    pub pulse: PulseShape,
    /// Start CPFSK/GFSK at a uniformly random phase instead of 0.
    pub random_fsk_phase: bool,
}

impl Default for ModulatorConfig {
    fn default() -> Self {
        ModulatorConfig {
            cpfsk_index: 0.5,
            gfsk_index: 0.5,
            gfsk_bt: 0.35,
            pulse: PulseShape::None,
            random_fsk_phase: false,
        }
    }
}

impl ModulatorConfig {
    pub fn validate(&self) -> Result<()> {
        let sps = self.pulse.samples_per_symbol();
        if sps == 0 || FRAME_LEN % sps != 0 || FSK_OVERSAMPLE % sps != 0 {
            return Err(Error::InvalidValue(format!(
                "samples per symbol must divide {FRAME_LEN} and {FSK_OVERSAMPLE}, got {sps}"
            )));
        }
        if let PulseShape::RootRaisedCosine { rolloff, span, .. } = self.pulse {
            if !(0.0..=1.0).contains(&rolloff) || span == 0 {
                return Err(Error::InvalidValue(format!(
                    "root-raised-cosine needs rolloff in [0,1] and span > 0, got {rolloff}, {span}"
                )));
            }
        }
        if !(self.gfsk_bt > 0.0) || !(self.cpfsk_index > 0.0) || !(self.gfsk_index > 0.0) {
            return Err(Error::InvalidValue("FSK index and BT must be positive".into()));
        }
        Ok(())
    }

    pub fn symbols_per_frame(&self) -> usize {
        FRAME_LEN / self.pulse.samples_per_symbol()
    }

    pub fn bits_per_frame(&self, scheme: ModulationScheme) -> usize {
        self.symbols_per_frame() * scheme.bits_per_symbol()
    }
}

/// Modulates `bits` (values 0/1, first bit most significant within a symbol)
/// into one frame. Extra bits beyond what the frame needs are ignored.
pub fn modulate<R: Rng + ?Sized>(
    scheme: ModulationScheme,
    bits: &[u8],
    config: &ModulatorConfig,
    rng: &mut R,
) -> Result<IqFrame> {
    config.validate()?;
    let needed = config.bits_per_frame(scheme);
    if bits.len() < needed {
        return Err(Error::InputLength(format!(
            "{scheme} needs {needed} bits per frame, got {}",
            bits.len()
        )));
    }
    if let Some(b) = bits[..needed].iter().find(|&&b| b > 1) {
        return Err(Error::InvalidValue(format!("bit values must be 0 or 1, got {b}")));
    }
    let n_sym = config.symbols_per_frame();
    let sps = config.pulse.samples_per_symbol();
    let samples = match scheme.constellation() {
        Some(points) => {
            let k = scheme.bits_per_symbol();
            let symbols: Vec<Complex64> = bits[..needed]
                .chunks(k)
                .map(|group| points[group.iter().fold(0usize, |v, &b| (v << 1) | b as usize)])
                .collect();
            match config.pulse {
                PulseShape::None => symbols,
                PulseShape::RootRaisedCosine { rolloff, span, .. } => {
                    shape_rrc(&symbols, sps, rolloff, span)
                }
            }
        }
        None => {
            let levels: Vec<f64> = bits[..n_sym].iter().map(|&b| 1.0 - 2.0 * b as f64).collect();
            let phase0 = if config.random_fsk_phase {
                rng.random_range(0.0..2.0 * PI)
            } else {
                0.0
            };
            let (index, pulse) = if scheme == ModulationScheme::Cpfsk {
                (config.cpfsk_index, FrequencyPulse::Rect)
            } else {
                (config.gfsk_index, FrequencyPulse::Gaussian(config.gfsk_bt))
            };
            continuous_phase(&levels, index, pulse, sps, phase0)
        }
    };
    IqFrame::new(samples)
}

fn square_qam(m: usize) -> Vec<Complex64> {
    let bits_axis = m.trailing_zeros() as usize;
    let scale = (2.0 * ((m * m) as f64 - 1.0) / 3.0).sqrt();
    (0..m * m)
        .map(|v| {
            let i = pam_level(v >> bits_axis, m);
            let q = pam_level(v & (m - 1), m);
            Complex64::new(i, q) / scale
        })
        .collect()
}

/// Gray-coded amplitude level in {-(m-1), ..., m-1}.
fn pam_level(bits: usize, m: usize) -> f64 {
    (2 * gray_decode(bits)) as f64 - (m as f64 - 1.0)
}

fn gray_decode(mut g: usize) -> usize {
    let mut b = g;
    while g > 0 {
        g >>= 1;
        b ^= g;
    }
    b
}

#[derive(Clone, Copy)]
enum FrequencyPulse {
    Rect,
    Gaussian(f64),
}

impl FrequencyPulse {
    /// Pulse value at time `t` (in symbols) relative to the symbol centre.
    /// Both pulses have unit area.
    fn at(self, t: f64) -> f64 {
        match self {
            FrequencyPulse::Rect => {
                if (-0.5..0.5).contains(&t) {
                    1.0
                } else {
                    0.0
                }
            }
            FrequencyPulse::Gaussian(bt) => {
                let k = PI * (2.0 / std::f64::consts::LN_2).sqrt() * bt;
                0.5 * (libm::erf(k * (t + 0.5)) - libm::erf(k * (t - 0.5)))
            }
        }
    }

    fn half_span(self) -> f64 {
        match self {
            FrequencyPulse::Rect => 0.5,
            FrequencyPulse::Gaussian(_) => GAUSS_SPAN / 2.0,
        }
    }
}

/// Continuous-phase FSK: the phase is the running integral of the filtered
/// frequency pulse train, scaled so each symbol advances it by `pi * index * a`.
fn continuous_phase(
    levels: &[f64],
    index: f64,
    pulse: FrequencyPulse,
    sps: usize,
    phase0: f64,
) -> Vec<Complex64> {
    let os = FSK_OVERSAMPLE;
    let dt = 1.0 / os as f64;
    // Tabulate the pulse at fine-grid midpoints and renormalize the truncated
    // pulse to unit area.
    let half = pulse.half_span();
    let taps = (2.0 * half * os as f64).round() as usize;
    let mut table: Vec<f64> = (0..taps)
        .map(|n| pulse.at(-half + (n as f64 + 0.5) * dt))
        .collect();
    let area: f64 = table.iter().sum::<f64>() * dt;
    table.iter_mut().for_each(|v| *v /= area);

    let n_fine = levels.len() * os;
    let mut freq = vec![0.0; n_fine];
    for (k, &a) in levels.iter().enumerate() {
        // Symbol k occupies [k, k+1); its pulse is centred on k + 0.5.
        let start = (k as f64 + 0.5 - half) * os as f64;
        for (n, &g) in table.iter().enumerate() {
            let idx = start.round() as isize + n as isize;
            if idx >= 0 && (idx as usize) < n_fine {
                freq[idx as usize] += a * g;
            }
        }
    }
    let step = os / sps;
    let mut out = Vec::with_capacity(levels.len() * sps);
    let mut phase = phase0;
    for (n, f) in freq.iter().enumerate() {
        if n % step == 0 {
            out.push(Complex64::from_polar(1.0, phase));
        }
        phase += PI * index * f * dt;
    }
    out
}

/// Upsamples by `sps` and filters with a unit-energy-per-symbol RRC filter.
fn shape_rrc(symbols: &[Complex64], sps: usize, rolloff: f64, span: usize) -> Vec<Complex64> {
    let taps = rrc_taps(rolloff, sps, span);
    let delay = taps.len() / 2;
    let n = symbols.len() * sps;
    let mut out = vec![Complex64::new(0.0, 0.0); n];
    for (k, &s) in symbols.iter().enumerate() {
        for (t, &h) in taps.iter().enumerate() {
            let idx = (k * sps + t) as isize - delay as isize;
            if idx >= 0 && (idx as usize) < n {
                out[idx as usize] += s * h;
            }
        }
    }
    out
}

fn rrc_taps(beta: f64, sps: usize, span: usize) -> Vec<f64> {
    let len = span * sps + 1;
    let mid = (len / 2) as f64;
    let mut taps: Vec<f64> = (0..len)
        .map(|i| {
            let t = (i as f64 - mid) / sps as f64;
            if t.abs() < 1e-12 {
                1.0 - beta + 4.0 * beta / PI
            } else if beta > 0.0 && (t.abs() - 1.0 / (4.0 * beta)).abs() < 1e-12 {
                beta / 2f64.sqrt()
                    * ((1.0 + 2.0 / PI) * (PI / (4.0 * beta)).sin()
                        + (1.0 - 2.0 / PI) * (PI / (4.0 * beta)).cos())
            } else {
                let num = (PI * t * (1.0 - beta)).sin() + 4.0 * beta * t * (PI * t * (1.0 + beta)).cos();
                let den = PI * t * (1.0 - (4.0 * beta * t).powi(2));
                num / den
            }
        })
        .collect();
    // Sum of squared taps = sps gives unit average sample power.
    let e: f64 = taps.iter().map(|h| h * h).sum();
    let g = (sps as f64 / e).sqrt();
    taps.iter_mut().for_each(|h| *h *= g);
    taps
}
