//! VT-CNN2 style modulation classifier, its training loop and evaluation.
//!
//! Frames enter the network as a `[n, 1, 2, p]` tensor (I row, then Q row).
//! Input gradients are returned as complex vectors `g_I + i g_Q`, so that a
//! first-order change of the loss under a complex perturbation `d` is
//! `Re(sum conj(g_j) d_j)`.

use rand::seq::SliceRandom;

use crate::iqcore::{DatasetRecord, IqFrame};
use crate::nnad::{glorot, one_hot, softmax_rows, Adam, AdamConfig, Graph, Padding, ParamSet, Reduction, Tensor, Var};
use crate::rng::{substream, SimRng};
use crate::{Complex64, Error, Result, FRAME_LEN};

/// Anything that maps complex frames to class scores and can differentiate
/// its loss with respect to the frame.
pub trait Classifier: Sync {
    fn num_classes(&self) -> usize;

    /// Logits, one row per frame.
    fn logits(&self, frames: &[&[Complex64]]) -> Result<Vec<Vec<f64>>>;

    /// Gradient of the cross-entropy loss of each frame against its label.
    fn loss_grads(&self, frames: &[&[Complex64]], labels: &[usize]) -> Result<Vec<Vec<Complex64>>>;

    fn probabilities(&self, frame: &[Complex64]) -> Result<Vec<f64>> {
        let z = self.logits(&[frame])?;
        Ok(softmax_rows(&z[0], z[0].len()))
    }

    fn predict(&self, frame: &[Complex64]) -> Result<usize> {
        Ok(argmax(&self.logits(&[frame])?[0]))
    }

    fn predict_batch(&self, frames: &[&[Complex64]]) -> Result<Vec<usize>> {
        Ok(self.logits(frames)?.iter().map(|z| argmax(z)).collect())
    }

    fn loss_grad(&self, frame: &[Complex64], label: usize) -> Result<Vec<Complex64>> {
        Ok(self.loss_grads(&[frame], &[label])?.remove(0))
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub conv1_filters: usize,
    pub conv2_filters: usize,
    pub dense_units: usize,
    /// Extra hidden dense layer after `dense_units` (the surrogate variant).
    pub extra_dense: Option<usize>,
    pub dropout: f64,
}

impl Architecture {
    pub fn vtcnn2() -> Self {
        Architecture {
            conv1_filters: 64,
            conv2_filters: 16,
            dense_units: 128,
            extra_dense: None,
            dropout: 0.5,
        }
    }

    pub fn surrogate() -> Self {
        Architecture {
            extra_dense: Some(256),
            ..Self::vtcnn2()
        }
    }

    /// Closed-form parameter count for `c` classes and frame length `p`.
    pub fn param_count(&self, c: usize, p: usize) -> usize {
        let (f1, f2, d) = (self.conv1_filters, self.conv2_filters, self.dense_units);
        let mut n = f1 * 3 + f1 + f2 * f1 * 6 + f2 + f2 * p * d + d;
        let last = match self.extra_dense {
            Some(e) => {
                n += d * e + e;
                e
            }
            None => d,
        };
        n + last * c + c
    }
}

impl Default for Architecture {
    fn default() -> Self {
        Self::vtcnn2()
    }
}

/// Trained or freshly initialized classifier weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    arch: Architecture,
    num_classes: usize,
    frame_len: usize,
    params: ParamSet,
}

const PURPOSE_INIT: u64 = 0x11;
const PURPOSE_SHUFFLE: u64 = 0x12;
const PURPOSE_DROPOUT: u64 = 0x13;

/// VT-CNN2 with default widths for `c` classes.
pub fn build_vtcnn2(c: usize, seed: u64) -> Result<ClassifierModel> {
    ClassifierModel::new(Architecture::vtcnn2(), c, FRAME_LEN, seed)
}

/// The black-box surrogate: VT-CNN2 plus a 256-unit hidden layer.
pub fn build_surrogate(c: usize, seed: u64) -> Result<ClassifierModel> {
    ClassifierModel::new(Architecture::surrogate(), c, FRAME_LEN, seed)
}

impl ClassifierModel {
    pub fn new(arch: Architecture, c: usize, frame_len: usize, seed: u64) -> Result<Self> {
        if c < 2 {
            return Err(Error::InvalidValue(format!("need at least 2 classes, got {c}")));
        }
        if frame_len == 0 || !(0.0..1.0).contains(&arch.dropout) {
            return Err(Error::InvalidValue("frame length must be > 0 and dropout in [0, 1)".into()));
        }
        let mut rng = substream(seed, PURPOSE_INIT, 0);
        let (f1, f2, d) = (arch.conv1_filters, arch.conv2_filters, arch.dense_units);
        let mut p = ParamSet::new();
        p.push("conv1.w", glorot(&[f1, 1, 1, 3], 3, f1 * 3, &mut rng));
        p.push("conv1.b", Tensor::zeros(&[f1]));
        p.push("conv2.w", glorot(&[f2, f1, 2, 3], f1 * 6, f2 * 6, &mut rng));
        p.push("conv2.b", Tensor::zeros(&[f2]));
        let flat = f2 * frame_len;
        p.push("dense1.w", glorot(&[flat, d], flat, d, &mut rng));
        p.push("dense1.b", Tensor::zeros(&[d]));
        let mut last = d;
        if let Some(e) = arch.extra_dense {
            p.push("dense_extra.w", glorot(&[d, e], d, e, &mut rng));
            p.push("dense_extra.b", Tensor::zeros(&[e]));
            last = e;
        }
        p.push("out.w", glorot(&[last, c], last, c, &mut rng));
        p.push("out.b", Tensor::zeros(&[c]));
        Ok(ClassifierModel {
            arch,
            num_classes: c,
            frame_len,
            params: p,
        })
    }

    /// Rebuilds a model from checkpointed weights, inferring the layer widths.
    pub fn from_params(params: ParamSet, dropout: f64) -> Result<Self> {
        let shape = |name: &str| -> Result<Vec<usize>> {
            params
                .get(name)
                .map(|t| t.shape().to_vec())
                .ok_or_else(|| Error::InvalidValue(format!("checkpoint lacks tensor `{name}`")))
        };
        let c1 = shape("conv1.w")?;
        let c2 = shape("conv2.w")?;
        let d1 = shape("dense1.w")?;
        let out = shape("out.w")?;
        let extra = params.get("dense_extra.w").map(|t| t.shape()[1]);
        let (f1, f2) = (c1[0], c2[0]);
        if f2 == 0 || d1[0] % f2 != 0 {
            return Err(Error::InvalidValue("inconsistent classifier checkpoint".into()));
        }
        let arch = Architecture {
            conv1_filters: f1,
            conv2_filters: f2,
            dense_units: d1[1],
            extra_dense: extra,
            dropout,
        };
        let mut model = ClassifierModel::new(arch, out[1], d1[0] / f2, 0)?;
        model.params.assign(&params)?;
        Ok(model)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_params(ParamSet::load(path)?, Architecture::vtcnn2().dropout)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.params.save(path)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn frame_len(&self) -> usize {
        self.frame_len
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    fn planar(&self, frames: &[&[Complex64]]) -> Result<Tensor> {
        let p = self.frame_len;
        let mut data = Vec::with_capacity(frames.len() * 2 * p);
        for f in frames {
            if f.len() != p {
                return Err(Error::InputLength(format!("classifier expects {p} samples, got {}", f.len())));
            }
            data.extend(f.iter().map(|s| s.re));
            data.extend(f.iter().map(|s| s.im));
        }
        Tensor::new(&[frames.len(), 1, 2, p], data)
    }

    /// Logits node for input `x`. Dropout is active only when `rng` is given.
    pub fn forward<'a>(&self, g: &mut Graph<'a>, x: Var, w: &[Var], mut rng: Option<&mut SimRng>) -> Result<Var> {
        let rate = self.arch.dropout;
        let n = g.value(x).shape()[0];
        let row = Padding { left: 1, right: 1, ..Padding::valid() };
        let h = g.conv2d(x, w[0], w[1], row)?;
        let h = g.relu(h);
        let h = g.dropout(h, rate, rng.as_deref_mut());
        let h = g.conv2d(h, w[2], w[3], row)?;
        let h = g.relu(h);
        let h = g.dropout(h, rate, rng.as_deref_mut());
        let h = g.reshape(h, &[n, self.arch.conv2_filters * self.frame_len])?;
        let h = g.dense(h, w[4], w[5])?;
        let h = g.relu(h);
        let mut h = g.dropout(h, rate, rng.as_deref_mut());
        let mut k = 6;
        if self.arch.extra_dense.is_some() {
            h = g.dense(h, w[6], w[7])?;
            h = g.relu(h);
            h = g.dropout(h, rate, rng.as_deref_mut());
            k = 8;
        }
        g.dense(h, w[k], w[k + 1])
    }

    fn logits_chunk(&self, frames: &[&[Complex64]]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let w = self.params.register(&mut g, false);
        let x = g.constant(self.planar(frames)?);
        let z = self.forward(&mut g, x, &w, None)?;
        g.check_finite()?;
        Ok(g.value(z).data().chunks(self.num_classes).map(<[f64]>::to_vec).collect())
    }
}

const EVAL_CHUNK: usize = 256;

impl Classifier for ClassifierModel {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn logits(&self, frames: &[&[Complex64]]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(frames.len());
        for chunk in frames.chunks(EVAL_CHUNK) {
            out.extend(self.logits_chunk(chunk)?);
        }
        Ok(out)
    }

    fn loss_grads(&self, frames: &[&[Complex64]], labels: &[usize]) -> Result<Vec<Vec<Complex64>>> {
        if frames.len() != labels.len() {
            return Err(Error::InputLength(format!("{} frames but {} labels", frames.len(), labels.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::InvalidValue(format!("label {l} out of range")));
        }
        let p = self.frame_len;
        let mut out = Vec::with_capacity(frames.len());
        for (fc, lc) in frames.chunks(EVAL_CHUNK).zip(labels.chunks(EVAL_CHUNK)) {
            let mut g = Graph::new();
            let w = self.params.register(&mut g, false);
            let x = g.input(self.planar(fc)?);
            let z = self.forward(&mut g, x, &w, None)?;
            // Rows are independent, so the gradient of the summed loss holds
            // each row's own input gradient.
            let loss = g.cross_entropy(z, &one_hot(lc, self.num_classes), Reduction::Sum)?;
            let mut grads = g.backward(loss)?;
            let gx = grads.take(x).expect("input gradient");
            out.extend(
                gx.data()
                    .chunks(2 * p)
                    .map(|r| (0..p).map(|j| Complex64::new(r[j], r[p + j])).collect::<Vec<_>>()),
            );
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Stops after this many optimizer steps in total, if set.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 6,
            batch_size: 64,
            adam: AdamConfig {
                lr: 3e-3,
                ..AdamConfig::default()
            },
            seed: 1,
            max_steps: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches (dropout active).
    pub loss: f64,
    /// Training accuracy of the batch predictions made while training.
    pub accuracy: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

/// Mini-batch Adam on the cross-entropy loss. Weights are rounded to `f32`
/// after every step. Deterministic given `cfg.seed`.
pub fn train(model: &mut ClassifierModel, records: &[DatasetRecord], cfg: &TrainConfig) -> Result<TrainHistory> {
    let frames: Vec<&[Complex64]> = records.iter().map(|r| r.frame.samples()).collect();
    let labels: Vec<usize> = records.iter().map(|r| r.label).collect();
    train_frames(model, &frames, &labels, cfg)
}

pub fn train_frames(
    model: &mut ClassifierModel,
    frames: &[&[Complex64]],
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    if frames.is_empty() || frames.len() != labels.len() {
        return Err(Error::InputLength(format!(
            "training needs matching nonempty frames/labels ({} / {})",
            frames.len(),
            labels.len()
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidValue("batch_size must be > 0".into()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= model.num_classes) {
        return Err(Error::InvalidValue(format!("label {l} out of range")));
    }
    let mut adam = Adam::new(cfg.adam);
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..frames.len()).collect();
    let mut steps = 0usize;
    let c = model.num_classes;
    for epoch in 0..cfg.epochs {
        if cfg.max_steps.is_some_and(|m| steps >= m) {
            break;
        }
        order.shuffle(&mut substream(cfg.seed, PURPOSE_SHUFFLE, epoch as u64));
        let mut drop_rng = substream(cfg.seed, PURPOSE_DROPOUT, epoch as u64);
        let (mut loss_sum, mut correct, mut seen, mut batches) = (0.0, 0usize, 0usize, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                break;
            }
            let bf: Vec<&[Complex64]> = batch.iter().map(|&i| frames[i]).collect();
            let bl: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let grads = {
                let mut g = Graph::new();
                let w = model.params.register(&mut g, true);
                let x = g.constant(model.planar(&bf)?);
                let z = model.forward(&mut g, x, &w, Some(&mut drop_rng))?;
                let loss = g.cross_entropy(z, &one_hot(&bl, c), Reduction::Mean)?;
                let lv = g.value(loss).item();
                if !lv.is_finite() || g.check_finite().is_err() {
                    return Err(Error::Divergence { epoch, loss: lv });
                }
                loss_sum += lv;
                for (row, &l) in g.value(z).data().chunks(c).zip(&bl) {
                    correct += usize::from(argmax(row) == l);
                }
                seen += bl.len();
                let mut gr = g.backward(loss).map_err(|_| Error::Divergence { epoch, loss: lv })?;
                w.iter().map(|v| gr.take(*v).expect("parameter gradient")).collect::<Vec<_>>()
            };
            adam.step(model.params.tensors_mut(), &grads)?;
            model.params.round_f32();
            if !model.params.tensors().iter().all(Tensor::is_finite) {
                return Err(Error::Divergence { epoch, loss: f64::NAN });
            }
            steps += 1;
            batches += 1;
        }
        history.epochs.push(EpochStats {
            epoch,
            loss: loss_sum / batches.max(1) as f64,
            accuracy: correct as f64 / seen.max(1) as f64,
            steps: batches,
        });
    }
    Ok(history)
}

/// Fraction of records classified as their label.
pub fn accuracy(model: &dyn Classifier, records: &[DatasetRecord]) -> Result<f64> {
    accuracy_with(model, records, |_, r| Ok(r.frame.samples().to_vec()))
}

/// Accuracy after replacing each record's frame by `observe(index, record)`,
/// e.g. the frame plus a received perturbation.
pub fn accuracy_with<F>(model: &dyn Classifier, records: &[DatasetRecord], observe: F) -> Result<f64>
where
    F: Fn(usize, &DatasetRecord) -> Result<Vec<Complex64>>,
{
    if records.is_empty() {
        return Err(Error::InputLength("accuracy needs at least one record".into()));
    }
    let mut correct = 0usize;
    for (ci, chunk) in records.chunks(EVAL_CHUNK).enumerate() {
        let observed: Vec<Vec<Complex64>> = chunk
            .iter()
            .enumerate()
            .map(|(k, r)| observe(ci * EVAL_CHUNK + k, r))
            .collect::<Result<_>>()?;
        let refs: Vec<&[Complex64]> = observed.iter().map(Vec::as_slice).collect();
        let pred = model.predict_batch(&refs)?;
        correct += pred.iter().zip(chunk).filter(|(p, r)| **p == r.label).count();
    }
    Ok(correct as f64 / records.len() as f64)
}

/// Convenience for frames that are already [`IqFrame`]s.
pub fn predict_frames(model: &dyn Classifier, frames: &[IqFrame]) -> Result<Vec<usize>> {
    let refs: Vec<&[Complex64]> = frames.iter().map(IqFrame::samples).collect();
    model.predict_batch(&refs)
}
