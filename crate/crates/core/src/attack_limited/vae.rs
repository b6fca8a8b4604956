//! Convolutional VAE over perturbation (or channel) rows.
//!
//! Rows are planar `[I..., Q...]` vectors of length `2p`, fed to the network
//! as a `[n, 1, 2, p]` tensor. Every row is rescaled to unit power per real
//! value before encoding, so the decoder output lives on that scale too.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::nnad::{glorot, Adam, AdamConfig, Graph, Padding, ParamSet, Reduction, Tensor, Var};
use crate::rng::substream;
use crate::{Error, Result, FRAME_LEN};

/// Filter counts of the full-size encoder/decoder.
pub const FULL_FILTERS: (usize, usize) = (128, 40);
const HIDDEN: usize = 16;
const HEAD: usize = 4;

const PURPOSE_INIT: u64 = 0x31;
const PURPOSE_SHUFFLE: u64 = 0x32;
const PURPOSE_NOISE: u64 = 0x33;

#[derive(Debug, Clone, PartialEq)]
pub struct VaeConfig {
    /// 2 (the 4-wide head split into mean and log-variance) or 4 (separate
    /// log-variance head).
    pub latent: usize,
    /// Divides both filter counts; 1 gives the full-size network.
    pub scale_divisor: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Weight of the KL term.
    pub beta: f64,
    pub seed: u64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            latent: 2,
            scale_divisor: 4,
            epochs: 10,
            batch_size: 32,
            adam: AdamConfig::default(),
            beta: 1.0,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeEpoch {
    pub epoch: usize,
    /// Mean over batches of the per-row squared reconstruction error.
    pub recon: f64,
    pub kl: f64,
}

#[derive(Debug, Clone)]
pub struct VaeModel {
    latent: usize,
    filters: (usize, usize),
    len: usize,
    params: ParamSet,
}

fn same(kh: usize, kw: usize) -> Padding {
    Padding::same(kh, kw)
}

impl VaeModel {
    pub fn new(latent: usize, scale_divisor: usize, len: usize, seed: u64) -> Result<Self> {
        if latent != 2 && latent != 4 {
            return Err(Error::InvalidValue(format!("VAE latent must be 2 or 4, got {latent}")));
        }
        if scale_divisor == 0 || FULL_FILTERS.1 % scale_divisor != 0 || FULL_FILTERS.0 % scale_divisor != 0 {
            return Err(Error::InvalidValue(format!(
                "scale divisor {scale_divisor} must divide both filter counts {FULL_FILTERS:?}"
            )));
        }
        if len == 0 {
            return Err(Error::InvalidValue("VAE row length must be > 0".into()));
        }
        let (f1, f2) = (FULL_FILTERS.0 / scale_divisor, FULL_FILTERS.1 / scale_divisor);
        let flat = 2 * len * f2;
        let mut rng = substream(seed, PURPOSE_INIT, 0);
        let mut p = ParamSet::new();
        p.push("enc.conv1.w", glorot(&[f1, 1, 1, 3], 3, f1 * 3, &mut rng));
        p.push("enc.conv1.b", Tensor::zeros(&[f1]));
        p.push("enc.conv2.w", glorot(&[f2, f1, 2, 3], f1 * 6, f2 * 6, &mut rng));
        p.push("enc.conv2.b", Tensor::zeros(&[f2]));
        p.push("enc.dense1.w", glorot(&[flat, HIDDEN], flat, HIDDEN, &mut rng));
        p.push("enc.dense1.b", Tensor::zeros(&[HIDDEN]));
        p.push("enc.dense2.w", glorot(&[HIDDEN, HEAD], HIDDEN, HEAD, &mut rng));
        p.push("enc.dense2.b", Tensor::zeros(&[HEAD]));
        if latent == 4 {
            p.push("enc.logvar.w", glorot(&[HIDDEN, latent], HIDDEN, latent, &mut rng));
            p.push("enc.logvar.b", Tensor::zeros(&[latent]));
        }
        p.push("dec.dense.w", glorot(&[latent, flat], latent, flat, &mut rng));
        p.push("dec.dense.b", Tensor::zeros(&[flat]));
        p.push("dec.deconv1.w", glorot(&[f2, f2, 2, 3], f2 * 6, f2 * 6, &mut rng));
        p.push("dec.deconv1.b", Tensor::zeros(&[f2]));
        p.push("dec.deconv2.w", glorot(&[f2, f1, 1, 3], f2 * 3, f1 * 3, &mut rng));
        p.push("dec.deconv2.b", Tensor::zeros(&[f1]));
        p.push("dec.deconv3.w", glorot(&[f1, 1, 3, 3], f1 * 9, 9, &mut rng));
        p.push("dec.deconv3.b", Tensor::zeros(&[1]));
        Ok(VaeModel {
            latent,
            filters: (f1, f2),
            len,
            params: p,
        })
    }

    /// Rebuilds a model from checkpointed weights.
    pub fn from_params(params: ParamSet) -> Result<Self> {
        let shape = |name: &str| -> Result<Vec<usize>> {
            params
                .get(name)
                .map(|t| t.shape().to_vec())
                .ok_or_else(|| Error::InvalidValue(format!("VAE checkpoint lacks tensor `{name}`")))
        };
        let f1 = shape("enc.conv1.w")?[0];
        let f2 = shape("enc.conv2.w")?[0];
        let latent = shape("dec.dense.w")?[0];
        let flat = shape("enc.dense1.w")?[0];
        if f1 == 0 || f2 == 0 || FULL_FILTERS.0 % f1 != 0 || flat % (2 * f2) != 0 {
            return Err(Error::InvalidValue("inconsistent VAE checkpoint".into()));
        }
        let mut model = VaeModel::new(latent, FULL_FILTERS.0 / f1, flat / (2 * f2), 0)?;
        model.params.assign(&params)?;
        Ok(model)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_params(ParamSet::load(path)?)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.params.save(path)
    }

    pub fn latent(&self) -> usize {
        self.latent
    }

    pub fn filters(&self) -> (usize, usize) {
        self.filters
    }

    /// Length `2p` of the rows this model encodes.
    pub fn row_len(&self) -> usize {
        2 * self.len
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Parameter count per layer, weights and biases together, in the order
    /// encoder conv1, conv2, dense1, dense2 (+ log-variance head), decoder
    /// dense, deconv1, deconv2, deconv3.
    pub fn layer_param_counts(&self) -> Vec<(String, usize)> {
        let t = self.params.tensors();
        let names = self.params.names();
        (0..t.len())
            .step_by(2)
            .map(|i| (names[i].trim_end_matches(".w").to_string(), t[i].len() + t[i + 1].len()))
            .collect()
    }

    fn batch(&self, rows: &[&[f64]]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(rows.len() * self.row_len());
        for r in rows {
            data.extend(normalized(r, self.row_len())?);
        }
        Tensor::new(&[rows.len(), 1, 2, self.len], data)
    }

    /// Mean and log-variance nodes.
    fn encoder<'a>(&self, g: &mut Graph<'a>, x: Var, w: &[Var]) -> Result<(Var, Var)> {
        let n = g.value(x).shape()[0];
        let (_, f2) = self.filters;
        let h = g.conv2d(x, w[0], w[1], same(1, 3))?;
        let h = g.relu(h);
        let h = g.conv2d(h, w[2], w[3], same(2, 3))?;
        let h = g.relu(h);
        let h = g.reshape(h, &[n, 2 * self.len * f2])?;
        let h = g.dense(h, w[4], w[5])?;
        let h = g.relu(h);
        let head = g.dense(h, w[6], w[7])?;
        if self.latent == 2 {
            Ok((g.slice_cols(head, 0, 2)?, g.slice_cols(head, 2, 2)?))
        } else {
            Ok((head, g.dense(h, w[8], w[9])?))
        }
    }

    fn decoder<'a>(&self, g: &mut Graph<'a>, z: Var, w: &[Var]) -> Result<Var> {
        let n = g.value(z).shape()[0];
        let (_, f2) = self.filters;
        let k = if self.latent == 2 { 8 } else { 10 };
        let h = g.dense(z, w[k], w[k + 1])?;
        let h = g.relu(h);
        let h = g.reshape(h, &[n, f2, 2, self.len])?;
        let h = g.conv_transpose2d(h, w[k + 2], w[k + 3], same(2, 3))?;
        let h = g.relu(h);
        let h = g.conv_transpose2d(h, w[k + 4], w[k + 5], same(1, 3))?;
        let h = g.relu(h);
        g.conv_transpose2d(h, w[k + 6], w[k + 7], same(3, 3))
    }

    /// Latent means of the (normalized) rows.
    pub fn encode_mean(&self, rows: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let w = self.params.register(&mut g, false);
        let x = g.constant(self.batch(rows)?);
        let (mu, _) = self.encoder(&mut g, x, &w)?;
        g.check_finite()?;
        Ok(g.value(mu).data().chunks(self.latent).map(<[f64]>::to_vec).collect())
    }

    /// Decoded rows of length `2p` for latent codes `z`.
    pub fn decode(&self, z: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        if z.is_empty() {
            return Ok(Vec::new());
        }
        let mut data = Vec::with_capacity(z.len() * self.latent);
        for c in z {
            if c.len() != self.latent {
                return Err(Error::InputLength(format!("latent code of {} values, expected {}", c.len(), self.latent)));
            }
            data.extend_from_slice(c);
        }
        let mut g = Graph::new();
        let w = self.params.register(&mut g, false);
        let zt = g.constant(Tensor::new(&[z.len(), self.latent], data)?);
        let out = self.decoder(&mut g, zt, &w)?;
        g.check_finite()?;
        Ok(g.value(out).data().chunks(self.row_len()).map(<[f64]>::to_vec).collect())
    }

    /// Decodes the average latent mean of `rows`.
    pub fn decode_average(&self, rows: &[&[f64]]) -> Result<Vec<f64>> {
        if rows.is_empty() {
            return Err(Error::InputLength("need at least one row to average".into()));
        }
        let means = self.encode_mean(rows)?;
        let mut avg = vec![0.0; self.latent];
        for m in &means {
            for (a, v) in avg.iter_mut().zip(m) {
                *a += v / means.len() as f64;
            }
        }
        Ok(self.decode(&[&avg])?.remove(0))
    }
}

/// `row` rescaled to unit mean square.
pub fn normalized(row: &[f64], len: usize) -> Result<Vec<f64>> {
    if row.len() != len {
        return Err(Error::InputLength(format!("VAE row of {} values, expected {len}", row.len())));
    }
    let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::Degenerate("VAE row has no usable norm".into()));
    }
    let s = (len as f64).sqrt() / n;
    Ok(row.iter().map(|x| x * s).collect())
}

/// Full-size model for frames of [`FRAME_LEN`] samples.
pub fn full_size(latent: usize, seed: u64) -> Result<VaeModel> {
    VaeModel::new(latent, 1, FRAME_LEN, seed)
}

/// Minimizes squared reconstruction error plus `beta` times the KL term with
/// Adam. Deterministic given `cfg.seed`.
pub fn train_vae(rows: &[Vec<f64>], cfg: &VaeConfig) -> Result<(VaeModel, Vec<VaeEpoch>)> {
    if rows.len() < 2 {
        return Err(Error::InputLength(format!("VAE training needs at least 2 rows, got {}", rows.len())));
    }
    let width = rows[0].len();
    if width % 2 != 0 || width == 0 {
        return Err(Error::InputLength(format!("row length {width} is not a nonzero even number")));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidValue("batch_size must be > 0".into()));
    }
    let mut model = VaeModel::new(cfg.latent, cfg.scale_divisor, width / 2, cfg.seed)?;
    let mut adam = Adam::new(cfg.adam);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut substream(cfg.seed, PURPOSE_SHUFFLE, epoch as u64));
        let (mut recon_sum, mut kl_sum, mut batches) = (0.0, 0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let br: Vec<&[f64]> = batch.iter().map(|&i| rows[i].as_slice()).collect();
            let n = br.len();
            let mut noise_rng = substream(cfg.seed, PURPOSE_NOISE, step);
            let eps: Vec<f64> = (0..n * model.latent).map(|_| StandardNormal.sample(&mut noise_rng)).collect();
            let eps = Tensor::new(&[n, model.latent], eps)?;
            let grads = {
                let mut g = Graph::new();
                let w = model.params.register(&mut g, true);
                let x = g.constant(model.batch(&br)?);
                let (mu, logvar) = model.encoder(&mut g, x, &w)?;
                let z = g.gaussian_reparam(mu, logvar, &eps)?;
                let out = model.decoder(&mut g, z, &w)?;
                let recon = g.sq_error(out, x, 1.0 / n as f64)?;
                let kl = g.kl_divergence(mu, logvar, Reduction::Mean)?;
                let klw = g.scale(kl, cfg.beta);
                let loss = g.add(recon, klw)?;
                let (rv, kv) = (g.value(recon).item(), g.value(kl).item());
                let lv = g.value(loss).item();
                if !lv.is_finite() || g.check_finite().is_err() {
                    return Err(Error::Divergence { epoch, loss: lv });
                }
                recon_sum += rv;
                kl_sum += kv;
                let mut gr = g.backward(loss).map_err(|_| Error::Divergence { epoch, loss: lv })?;
                w.iter().map(|v| gr.take(*v).expect("parameter gradient")).collect::<Vec<_>>()
            };
            adam.step(model.params.tensors_mut(), &grads)?;
            model.params.round_f32();
            if !model.params.tensors().iter().all(Tensor::is_finite) {
                return Err(Error::Divergence { epoch, loss: f64::NAN });
            }
            step += 1;
            batches += 1;
        }
        history.push(VaeEpoch {
            epoch,
            recon: recon_sum / batches as f64,
            kl: kl_sum / batches as f64,
        });
    }
    Ok((model, history))
}
