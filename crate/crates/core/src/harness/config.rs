//! Experiment configuration: a TOML document with one table per concern.
//!
//! Every key has a default, so an empty file is a valid configuration.
//! Unknown keys are rejected. `RFADVSIM_SEED` overrides the master seed.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::attack_limited::VaeConfig;
use crate::attack_wb::{AttackOptions, DEFAULT_GAMMA_GRID, DEFAULT_ITERATIONS};
use crate::channel::{ChannelParams, PnrConvention, ShadowingUnits};
use crate::classifier::{Architecture, TrainConfig};
use crate::defense::SmoothingParams;
use crate::iqcore::{ModulationScheme, SynthConfig};
use crate::nnad::AdamConfig;
use crate::{Error, Result};

use super::sweep::AttackKind;

pub const SEED_ENV: &str = "RFADVSIM_SEED";

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Where sweeps write their CSV.
    pub output: Option<PathBuf>,
    pub dataset: DatasetSection,
    pub channel: ChannelSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub attack: AttackSection,
    pub uap: UapSection,
    pub vae: VaeSection,
    pub eval: EvalSection,
    pub broadcast: BroadcastSection,
    pub defense: DefenseSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            output: None,
            dataset: DatasetSection::default(),
            channel: ChannelSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            attack: AttackSection::default(),
            uap: UapSection::default(),
            vae: VaeSection::default(),
            eval: EvalSection::default(),
            broadcast: BroadcastSection::default(),
            defense: DefenseSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// Existing `RFIQ` file; when absent the dataset is synthesized.
    pub path: Option<PathBuf>,
    pub records: usize,
    pub snr_grid_db: Vec<i16>,
    /// Scheme names, e.g. `["BPSK", "QAM16"]`; empty means all eight.
    pub schemes: Vec<String>,
    pub flat_fading: bool,
    /// Defaults to the master seed.
    pub seed: Option<u64>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let s = SynthConfig::default();
        DatasetSection {
            path: None,
            records: s.records,
            snr_grid_db: s.snr_grid_db,
            schemes: Vec::new(),
            flat_fading: false,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ConventionName {
    #[default]
    Transmit,
    Receiver,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ShadowUnitsName {
    #[default]
    Decibel,
    Natural,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelSection {
    pub k: f64,
    pub d0: f64,
    pub d: f64,
    pub gamma_pl: f64,
    pub shadow_sigma: f64,
    pub shadow_units: ShadowUnitsName,
    pub rayleigh_scale: f64,
    pub pnr_convention: ConventionName,
}

impl Default for ChannelSection {
    fn default() -> Self {
        let c = ChannelParams::default();
        ChannelSection {
            k: c.k,
            d0: c.d0,
            d: c.d,
            gamma_pl: c.gamma_pl,
            shadow_sigma: c.shadow_sigma,
            shadow_units: ShadowUnitsName::Decibel,
            rayleigh_scale: c.rayleigh_scale,
            pnr_convention: ConventionName::Transmit,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ArchitectureName {
    #[default]
    Vtcnn2,
    Surrogate,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub checkpoint: Option<PathBuf>,
    /// Surrogate used by the black-box attack.
    pub surrogate: Option<PathBuf>,
    pub architecture: ArchitectureName,
    /// Overrides of the architecture's layer widths.
    pub conv1_filters: Option<usize>,
    pub conv2_filters: Option<usize>,
    pub dense_units: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub dropout: f64,
    pub seed: Option<u64>,
    pub max_steps: Option<usize>,
    /// `[index, count]`: train on the `index`-th of `count` disjoint parts
    /// of the training split.
    pub shard: Option<[usize; 2]>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.adam.lr,
            dropout: Architecture::vtcnn2().dropout,
            seed: None,
            max_steps: None,
            shard: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    /// Attack names, see [`AttackKind`].
    pub kind: Vec<String>,
    pub gamma_grid: Vec<f64>,
    #[serde(rename = "E")]
    pub iterations: usize,
    pub eps_acc: Option<f64>,
    /// Channel realizations drawn by the limited-channel attack.
    pub limited_n: usize,
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection {
            kind: vec!["none".into(), "mrpp".into()],
            gamma_grid: DEFAULT_GAMMA_GRID.to_vec(),
            iterations: DEFAULT_ITERATIONS,
            eps_acc: None,
            limited_n: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum UapKind {
    #[default]
    Pca,
    Vae,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UapSection {
    pub kind: UapKind,
    /// Pre-collected inputs for the PCA constructions.
    #[serde(rename = "N")]
    pub n: usize,
    /// Perturbations (and channels) averaged per VAE perturbation.
    pub k: usize,
}

impl Default for UapSection {
    fn default() -> Self {
        UapSection {
            kind: UapKind::Pca,
            n: crate::attack_limited::DEFAULT_PCA_INPUTS,
            k: crate::attack_limited::DEFAULT_VAE_K,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeSection {
    pub latent: usize,
    pub scale_divisor: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta: f64,
    /// Training rows for each VAE.
    pub n_train: usize,
}

impl Default for VaeSection {
    fn default() -> Self {
        let v = VaeConfig::default();
        VaeSection {
            latent: v.latent,
            scale_divisor: v.scale_divisor,
            epochs: v.epochs,
            batch_size: v.batch_size,
            lr: v.adam.lr,
            beta: v.beta,
            n_train: crate::attack_limited::DEFAULT_VAE_TRAIN,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Only test frames at this SNR are evaluated.
    pub snr_db: i16,
    pub frames: usize,
    pub pnr_db: Vec<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            snr_db: 10,
            frames: 500,
            pnr_db: vec![-10.0, -5.0, 0.0, 5.0, 10.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BroadcastSection {
    pub m: usize,
    /// One classifier checkpoint per receiver.
    pub checkpoints: Vec<PathBuf>,
    /// Weight vectors to sweep, each summing to 1.
    pub weights: Vec<Vec<f64>>,
    pub rayleigh_scales: Vec<f64>,
    /// `idba` and/or `jdba`.
    pub attacks: Vec<String>,
    /// Also sweep the weights found by a grid search at each PNR.
    pub line_search: bool,
    pub grid_step: f64,
}

impl Default for BroadcastSection {
    fn default() -> Self {
        BroadcastSection {
            m: 2,
            checkpoints: Vec::new(),
            weights: vec![vec![0.5, 0.5]],
            rayleigh_scales: vec![1.0, 1.0],
            attacks: vec!["idba".into(), "jdba".into()],
            line_search: false,
            grid_step: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DefenseSection {
    pub k: usize,
    pub sigma: f64,
    pub alpha: f64,
    pub q: f64,
    /// Frames certified by the `certify` command.
    pub frames: usize,
    /// Attack applied before certification (`none` for clean frames).
    pub attack: String,
    pub pnr_db: f64,
}

impl Default for DefenseSection {
    fn default() -> Self {
        let s = SmoothingParams::default();
        DefenseSection {
            k: 10,
            sigma: s.sigma,
            alpha: s.alpha,
            q: s.q,
            frames: 200,
            attack: "mrpp".into(),
            pnr_db: 0.0,
        }
    }
}

fn finite_positive(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(key, format!("must be finite and > 0, got {v}")))
    }
}

impl ExperimentConfig {
    /// Parses TOML text without reading the environment.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let key = e
                .message()
                .split('`')
                .nth(1)
                .map(str::to_string)
                .unwrap_or_else(|| "<document>".into());
            let at = e.span().map(|s| format!(" (byte {})", s.start)).unwrap_or_default();
            Error::config(key, format!("{}{at}", e.message().trim()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a file and applies the `RFADVSIM_SEED` override.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml(&text)?;
        if let Ok(s) = std::env::var(SEED_ENV) {
            cfg.seed = s
                .trim()
                .parse()
                .map_err(|_| Error::config(SEED_ENV, format!("not an unsigned integer: `{s}`")))?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if d.records == 0 {
            return Err(Error::config("dataset.records", "must be > 0"));
        }
        if d.snr_grid_db.is_empty() {
            return Err(Error::config("dataset.snr_grid_db", "must be nonempty"));
        }
        self.schemes()?;
        self.channel_params().map_err(|e| Error::config("channel", e.to_string()))?;

        let m = &self.model;
        for (key, v) in [
            ("model.conv1_filters", m.conv1_filters),
            ("model.conv2_filters", m.conv2_filters),
            ("model.dense_units", m.dense_units),
        ] {
            if v == Some(0) {
                return Err(Error::config(key, "must be > 0"));
            }
        }

        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be > 0"));
        }
        finite_positive("train.lr", t.lr)?;
        if !(0.0..1.0).contains(&t.dropout) {
            return Err(Error::config("train.dropout", "must be in [0, 1)"));
        }
        if let Some([i, n]) = t.shard {
            if n == 0 || i >= n {
                return Err(Error::config("train.shard", format!("[{i}, {n}] is not a valid part index")));
            }
        }

        let a = &self.attack;
        for (i, name) in a.kind.iter().enumerate() {
            AttackKind::parse(name).map_err(|e| Error::config(format!("attack.kind[{i}]"), e.to_string()))?;
        }
        if a.gamma_grid.is_empty() {
            return Err(Error::config("attack.gamma_grid", "must be nonempty"));
        }
        for g in &a.gamma_grid {
            finite_positive("attack.gamma_grid", *g)?;
        }
        if a.iterations == 0 {
            return Err(Error::config("attack.E", "must be >= 1"));
        }
        if let Some(e) = a.eps_acc {
            finite_positive("attack.eps_acc", e)?;
        }
        if a.limited_n == 0 {
            return Err(Error::config("attack.limited_n", "must be >= 1"));
        }
        if self.uap.n == 0 {
            return Err(Error::config("uap.N", "must be >= 1"));
        }
        if self.uap.k == 0 {
            return Err(Error::config("uap.k", "must be >= 1"));
        }
        let v = &self.vae;
        if v.latent != 2 && v.latent != 4 {
            return Err(Error::config("vae.latent", format!("must be 2 or 4, got {}", v.latent)));
        }
        if v.scale_divisor == 0 || 40 % v.scale_divisor != 0 || 128 % v.scale_divisor != 0 {
            return Err(Error::config("vae.scale_divisor", "must divide both 128 and 40"));
        }
        if v.batch_size == 0 {
            return Err(Error::config("vae.batch_size", "must be > 0"));
        }
        finite_positive("vae.lr", v.lr)?;
        if !(v.beta >= 0.0 && v.beta.is_finite()) {
            return Err(Error::config("vae.beta", "must be finite and >= 0"));
        }
        if v.n_train < 2 {
            return Err(Error::config("vae.n_train", "must be >= 2"));
        }

        let e = &self.eval;
        if e.frames == 0 {
            return Err(Error::config("eval.frames", "must be >= 1"));
        }
        if e.pnr_db.is_empty() {
            return Err(Error::config("eval.pnr_db", "must be nonempty"));
        }
        if e.pnr_db.iter().any(|p| !p.is_finite()) || e.pnr_db.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("eval.pnr_db", "must be finite and strictly increasing"));
        }

        let b = &self.broadcast;
        if b.m == 0 || b.m > 4 {
            return Err(Error::config("broadcast.m", "must be between 1 and 4"));
        }
        if b.rayleigh_scales.len() != b.m {
            return Err(Error::config("broadcast.rayleigh_scales", format!("needs {} entries", b.m)));
        }
        for s in &b.rayleigh_scales {
            finite_positive("broadcast.rayleigh_scales", *s)?;
        }
        if !b.checkpoints.is_empty() && b.checkpoints.len() != b.m {
            return Err(Error::config("broadcast.checkpoints", format!("needs {} entries", b.m)));
        }
        for (i, w) in b.weights.iter().enumerate() {
            let key = format!("broadcast.weights[{i}]");
            if w.len() != b.m {
                return Err(Error::config(key, format!("needs {} entries", b.m)));
            }
            if w.iter().any(|x| !(*x >= 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::config(key, "must be nonnegative and sum to 1"));
            }
        }
        for (i, a) in b.attacks.iter().enumerate() {
            if a != "idba" && a != "jdba" {
                return Err(Error::config(format!("broadcast.attacks[{i}]"), format!("unknown broadcast attack `{a}`")));
            }
        }
        if b.line_search {
            crate::broadcast::simplex_grid(b.m, b.grid_step).map_err(|e| Error::config("broadcast.grid_step", e.to_string()))?;
        }

        self.smoothing().map_err(|e| Error::config("defense", e.to_string()))?;
        AttackKind::parse(&self.defense.attack).map_err(|e| Error::config("defense.attack", e.to_string()))?;
        if !self.defense.pnr_db.is_finite() {
            return Err(Error::config("defense.pnr_db", "must be finite"));
        }
        Ok(())
    }

    pub fn schemes(&self) -> Result<Vec<ModulationScheme>> {
        if self.dataset.schemes.is_empty() {
            return Ok(ModulationScheme::ALL.to_vec());
        }
        self.dataset
            .schemes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                ModulationScheme::from_name(s)
                    .ok_or_else(|| Error::config(format!("dataset.schemes[{i}]"), format!("unknown scheme `{s}`")))
            })
            .collect()
    }

    pub fn synth_config(&self) -> Result<SynthConfig> {
        Ok(SynthConfig {
            records: self.dataset.records,
            snr_grid_db: self.dataset.snr_grid_db.clone(),
            schemes: self.schemes()?,
            flat_fading: self.dataset.flat_fading,
            seed: self.dataset.seed.unwrap_or(self.seed),
            ..SynthConfig::default()
        })
    }

    pub fn channel_params(&self) -> Result<ChannelParams> {
        let c = &self.channel;
        let p = ChannelParams {
            k: c.k,
            d0: c.d0,
            d: c.d,
            gamma_pl: c.gamma_pl,
            shadow_sigma: c.shadow_sigma,
            shadow_units: match c.shadow_units {
                ShadowUnitsName::Decibel => ShadowingUnits::Decibel,
                ShadowUnitsName::Natural => ShadowingUnits::Natural,
            },
            rayleigh_scale: c.rayleigh_scale,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn convention(&self) -> PnrConvention {
        match self.channel.pnr_convention {
            ConventionName::Transmit => PnrConvention::Transmit,
            ConventionName::Receiver => PnrConvention::Receiver,
        }
    }

    pub fn architecture(&self) -> Architecture {
        let base = match self.model.architecture {
            ArchitectureName::Vtcnn2 => Architecture::vtcnn2(),
            ArchitectureName::Surrogate => Architecture::surrogate(),
        };
        Architecture {
            conv1_filters: self.model.conv1_filters.unwrap_or(base.conv1_filters),
            conv2_filters: self.model.conv2_filters.unwrap_or(base.conv2_filters),
            dense_units: self.model.dense_units.unwrap_or(base.dense_units),
            dropout: self.train.dropout,
            ..base
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            adam: AdamConfig {
                lr: self.train.lr,
                ..AdamConfig::default()
            },
            seed: self.train.seed.unwrap_or(self.seed),
            max_steps: self.train.max_steps,
        }
    }

    pub fn attack_options(&self) -> Result<AttackOptions> {
        Ok(AttackOptions {
            eps_acc: self.attack.eps_acc,
            iterations: self.attack.iterations,
            reference_gain: self.convention().reference_gain(&self.channel_params()?),
        })
    }

    pub fn vae_config(&self, seed: u64) -> VaeConfig {
        VaeConfig {
            latent: self.vae.latent,
            scale_divisor: self.vae.scale_divisor,
            epochs: self.vae.epochs,
            batch_size: self.vae.batch_size,
            adam: AdamConfig {
                lr: self.vae.lr,
                ..AdamConfig::default()
            },
            beta: self.vae.beta,
            seed,
        }
    }

    pub fn smoothing(&self) -> Result<SmoothingParams> {
        let p = SmoothingParams {
            k: self.defense.k,
            sigma: self.defense.sigma,
            alpha: self.defense.alpha,
            q: self.defense.q,
        };
        p.validate()?;
        Ok(p)
    }
}
