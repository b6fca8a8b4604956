use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use super::{modulate, IqFrame, ModulationScheme, ModulatorConfig};
use crate::channel;
use crate::rng::{substream, SimRng};
use crate::{Complex64, Error, Result, FRAME_LEN};

const MAGIC: &[u8; 4] = b"RFIQ";
const VERSION: u8 = 0x01;
/// magic(4) version(1) count(4) p(2) classes(1) reserved(1)
pub const HEADER_LEN: usize = 13;
/// label(1) snr(2) then p interleaved (I, Q) f32 pairs
pub const RECORD_LEN: usize = 1 + 2 + FRAME_LEN * 8;

const PURPOSE_SYNTH: u64 = 0x5159_4e54;
const PURPOSE_SPLIT: u64 = 0x5350_4c54;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub frame: IqFrame,
    pub label: usize,
    pub snr_db: i16,
}

/// A labelled set of frames with a seed-derived train/test split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<DatasetRecord>,
    num_classes: usize,
    seed: u64,
    train: Vec<usize>,
    test: Vec<usize>,
}

impl Dataset {
    pub fn new(records: Vec<DatasetRecord>, num_classes: usize, seed: u64) -> Result<Self> {
        if !(1..=u8::MAX as usize).contains(&num_classes) {
            return Err(Error::InvalidValue(format!("class count {num_classes} out of range")));
        }
        if let Some((i, r)) = records.iter().enumerate().find(|(_, r)| r.label >= num_classes) {
            return Err(Error::InvalidValue(format!(
                "record {i} has label {} but there are {num_classes} classes",
                r.label
            )));
        }
        let (train, test) = split_indices(records.len(), seed);
        Ok(Dataset {
            records,
            num_classes,
            seed,
            train,
            test,
        })
    }

    pub fn records(&self) -> &[DatasetRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.train
    }

    pub fn test_indices(&self) -> &[usize] {
        &self.test
    }

    pub fn train_records(&self) -> Vec<DatasetRecord> {
        self.train.iter().map(|&i| self.records[i].clone()).collect()
    }

    pub fn test_records(&self) -> Vec<DatasetRecord> {
        self.test.iter().map(|&i| self.records[i].clone()).collect()
    }
}

/// Half of the records train, the rest test; the permutation comes from the seed.
fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut substream(seed, PURPOSE_SPLIT, 0));
    let n_train = n.div_ceil(2);
    let mut train = perm[..n_train].to_vec();
    let mut test = perm[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub records: usize,
    pub snr_grid_db: Vec<i16>,
    /// Label of a scheme is its position in this list.
    pub schemes: Vec<ModulationScheme>,
    pub modulator: ModulatorConfig,
    /// Apply a flat Rayleigh gain (unit mean power) per frame on the
    /// transmitter-receiver link instead of the identity channel.
    pub flat_fading: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            records: 20_000,
            snr_grid_db: (0..10).map(|i| 2 * i).collect(),
            schemes: ModulationScheme::ALL.to_vec(),
            modulator: ModulatorConfig::default(),
            flat_fading: false,
            seed: 1,
        }
    }
}

impl SynthConfig {
    pub fn num_classes(&self) -> usize {
        self.schemes.len()
    }

    pub fn label_of(&self, scheme: ModulationScheme) -> Option<usize> {
        self.schemes.iter().position(|&s| s == scheme)
    }
}

/// Noise power per complex sample for a unit-power signal at `snr_db`.
pub fn noise_power_for_snr(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 10.0)
}

/// A noiseless frame of `scheme` from uniformly random bits.
pub fn synth_clean<R: Rng + ?Sized>(
    scheme: ModulationScheme,
    modulator: &ModulatorConfig,
    rng: &mut R,
) -> Result<IqFrame> {
    let bits: Vec<u8> = (0..modulator.bits_per_frame(scheme))
        .map(|_| rng.random_range(0..2u8))
        .collect();
    modulate(scheme, &bits, modulator, rng)
}

/// One record: random bits, modulation, transmitter channel, AWGN at `snr_db`.
/// Samples are rounded to `f32` so the record survives the file format exactly.
pub fn synth_record<R: Rng + ?Sized>(
    config: &SynthConfig,
    scheme: ModulationScheme,
    snr_db: i16,
    rng: &mut R,
) -> Result<DatasetRecord> {
    let label = config
        .label_of(scheme)
        .ok_or_else(|| Error::InvalidValue(format!("{scheme} is not in the configured scheme list")))?;
    let clean = synth_clean(scheme, &config.modulator, rng)?;
    let mut x = clean.into_samples();
    if config.flat_fading {
        let g = Complex64::new(rng.sample::<f64, _>(rand_distr::StandardNormal), rng.sample::<f64, _>(rand_distr::StandardNormal))
            * std::f64::consts::FRAC_1_SQRT_2;
        x.iter_mut().for_each(|s| *s *= g);
    }
    let y = channel::add_awgn(&x, noise_power_for_snr(snr_db as f64), rng)?;
    let mut frame = IqFrame::new(y)?;
    frame.quantize_f32();
    Ok(DatasetRecord {
        frame,
        label,
        snr_db,
    })
}

/// Record `i` uses scheme `i mod C`, SNR `grid[(i / C) mod G]` and its own
/// random stream, so records can be built in any order.
pub fn generate_dataset(config: &SynthConfig) -> Result<Dataset> {
    config.modulator.validate()?;
    if config.schemes.is_empty() || config.snr_grid_db.is_empty() {
        return Err(Error::InvalidValue("scheme list and SNR grid must be nonempty".into()));
    }
    let c = config.schemes.len();
    let g = config.snr_grid_db.len();
    let records = (0..config.records)
        .into_par_iter()
        .map(|i| {
            let mut rng: SimRng = substream(config.seed, PURPOSE_SYNTH, i as u64);
            let scheme = config.schemes[i % c];
            let snr = config.snr_grid_db[(i / c) % g];
            synth_record(config, scheme, snr, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(records, c, config.seed)
}

pub fn encode_dataset(ds: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + ds.len() * RECORD_LEN);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(ds.len() as u32).to_le_bytes());
    out.extend_from_slice(&(FRAME_LEN as u16).to_le_bytes());
    out.push(ds.num_classes as u8);
    out.push(0);
    for r in &ds.records {
        out.push(r.label as u8);
        out.extend_from_slice(&r.snr_db.to_le_bytes());
        for s in r.frame.samples() {
            out.extend_from_slice(&(s.re as f32).to_le_bytes());
            out.extend_from_slice(&(s.im as f32).to_le_bytes());
        }
    }
    out
}

/// Parses an `RFIQ` byte image. The split seed is not part of the file.
pub fn decode_dataset(bytes: &[u8], seed: u64) -> Result<Dataset> {
    let need = |offset: usize, len: usize, what: &str| -> Result<()> {
        if bytes.len() < offset + len {
            Err(Error::format(
                bytes.len() as u64,
                format!("truncated: {what} needs bytes {offset}..{}", offset + len),
            ))
        } else {
            Ok(())
        }
    };
    need(0, MAGIC.len(), "magic")?;
    if &bytes[..4] != MAGIC {
        return Err(Error::format(0, "bad magic, expected \"RFIQ\""));
    }
    need(4, HEADER_LEN - 4, "header")?;
    if bytes[4] != VERSION {
        return Err(Error::format(4, format!("unsupported version {}", bytes[4])));
    }
    let count = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let p = u16::from_le_bytes(bytes[9..11].try_into().unwrap()) as usize;
    if p != FRAME_LEN {
        return Err(Error::format(9, format!("frame length {p}, expected {FRAME_LEN}")));
    }
    let classes = bytes[11] as usize;
    if classes == 0 {
        return Err(Error::format(11, "class count is zero"));
    }
    if bytes[12] != 0 {
        return Err(Error::format(12, "reserved header byte must be zero"));
    }
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let base = HEADER_LEN + i * RECORD_LEN;
        need(base, RECORD_LEN, &format!("record {i}"))?;
        let label = bytes[base] as usize;
        if label >= classes {
            return Err(Error::format(
                base as u64,
                format!("label {label} >= class count {classes}"),
            ));
        }
        let snr_db = i16::from_le_bytes(bytes[base + 1..base + 3].try_into().unwrap());
        let mut samples = Vec::with_capacity(FRAME_LEN);
        for j in 0..FRAME_LEN {
            let off = base + 3 + 8 * j;
            let re = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
            let im = f32::from_le_bytes(bytes[off + 4..off + 8].try_into().unwrap());
            if !re.is_finite() || !im.is_finite() {
                return Err(Error::format(off as u64, "non-finite sample"));
            }
            samples.push(Complex64::new(re as f64, im as f64));
        }
        records.push(DatasetRecord {
            frame: IqFrame::new(samples)?,
            label,
            snr_db,
        });
    }
    let end = HEADER_LEN + count * RECORD_LEN;
    if bytes.len() != end {
        return Err(Error::format(end as u64, "trailing bytes after last record"));
    }
    Dataset::new(records, classes, seed)
}

pub fn write_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_dataset(ds))?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>, seed: u64) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn small(n: usize) -> Dataset {
        generate_dataset(&SynthConfig {
            records: n,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let ds = small(3);
        let bytes = encode_dataset(&ds);
        assert_eq!(bytes.len(), HEADER_LEN + 3 * RECORD_LEN);
        let back = decode_dataset(&bytes, ds.seed()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(encode_dataset(&back), bytes);
    }

    #[test]
    fn empty_dataset_is_header_only() {
        let ds = Dataset::new(vec![], 8, 0).unwrap();
        let bytes = encode_dataset(&ds);
        assert_eq!(bytes.len(), 13);
        assert_eq!(decode_dataset(&bytes, 0).unwrap(), ds);
    }

    #[test]
    fn corrupted_magic_names_offset_zero() {
        let mut bytes = encode_dataset(&small(1));
        bytes[0] = b'X';
        assert!(matches!(decode_dataset(&bytes, 0), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn truncated_and_bad_label_report_offsets() {
        let bytes = encode_dataset(&small(2));
        let cut = &bytes[..HEADER_LEN + RECORD_LEN + 10];
        match decode_dataset(cut, 0) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset as usize, cut.len()),
            other => panic!("{other:?}"),
        }
        let mut bad = bytes.clone();
        bad[HEADER_LEN + RECORD_LEN] = 8;
        match decode_dataset(&bad, 0) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset as usize, HEADER_LEN + RECORD_LEN),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn noise_power_matches_snr() {
        assert!((noise_power_for_snr(10.0) - 0.1).abs() < 1e-15);
        // Infinite SNR: the frame is the modulated signal itself.
        let cfg = SynthConfig::default();
        let clean = synth_clean(ModulationScheme::Qam16, &cfg.modulator, &mut seeded(4)).unwrap();
        let y = channel::add_awgn(clean.samples(), noise_power_for_snr(f64::INFINITY), &mut seeded(9)).unwrap();
        assert_eq!(y, clean.samples());
    }

    #[test]
    fn empirical_snr_within_point_two_db() {
        // 800 frames x 128 symbols > 1e5 symbols.
        let cfg = SynthConfig::default();
        let mut rng = seeded(21);
        let (mut sig, mut noise) = (0.0, 0.0);
        for i in 0..800 {
            let scheme = ModulationScheme::ALL[i % 8];
            let clean = synth_clean(scheme, &cfg.modulator, &mut rng).unwrap();
            let y = channel::add_awgn(clean.samples(), noise_power_for_snr(10.0), &mut rng).unwrap();
            sig += clean.energy();
            noise += y.iter().zip(clean.samples()).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>();
        }
        let snr = 10.0 * (sig / noise).log10();
        assert!((snr - 10.0).abs() < 0.2, "{snr}");
    }

    #[test]
    fn split_is_disjoint_and_balanced() {
        for n in [0, 1, 2, 7, 100] {
            let ds = small(n);
            let (tr, te) = (ds.train_indices(), ds.test_indices());
            assert!(tr.len().abs_diff(te.len()) <= 1);
            let mut all: Vec<usize> = tr.iter().chain(te).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn generation_is_balanced_and_deterministic() {
        let a = small(160);
        let b = small(160);
        assert_eq!(a, b);
        let mut counts = [0usize; 8];
        for r in a.records() {
            counts[r.label] += 1;
        }
        assert!(counts.iter().all(|&c| c == 20));
        assert!(a.records().iter().all(|r| r.snr_db % 2 == 0 && (0..=18).contains(&r.snr_db)));
    }

    #[test]
    fn unknown_scheme_rejected() {
        let cfg = SynthConfig {
            schemes: vec![ModulationScheme::Bpsk, ModulationScheme::Qpsk],
            ..Default::default()
        };
        assert!(synth_record(&cfg, ModulationScheme::Gfsk, 10, &mut seeded(0)).is_err());
        let r = synth_record(&cfg, ModulationScheme::Qpsk, 10, &mut seeded(0)).unwrap();
        assert_eq!(r.label, 1);
    }
}
