//! Fully-connected ReLU classifier with tap points on its hidden states.
//!
//! Layer `k` (0-based) maps hidden state `k` to hidden state `k + 1`, with
//! state 0 being the input. For the default `(784, 20, 20, 20, 20, 20, 10)`
//! network, the first and last layers are affine only and ReLU follows the
//! four layers in between, so every nonlinearity sits between the output of
//! layer 0 and the output of layer 4. Those two states are the snapshot taps.

use std::ops::Range;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ImageSet, NUM_CLASSES};
use crate::error::{Error, PathContext, Result};
use crate::real::Real;

pub const DEFAULT_LAYER_SIZES: [usize; 7] = [784, 20, 20, 20, 20, 20, 10];

const CHECKPOINT_MAGIC: &[u8; 8] = b"KNETMLP\0";
const CHECKPOINT_VERSION: u32 = 1;
const EVAL_CHUNK: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T = f64> {
    layer_sizes: Vec<usize>,
    weights: Vec<Array2<T>>,
    biases: Vec<Array1<T>>,
    activations: Vec<bool>,
}

/// Which hidden states form a snapshot pair.
///
/// `first` and `last` are layer indices whose outputs are tapped; the
/// sub-network between them is layers `first + 1 ..= last`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Taps {
    pub first: usize,
    pub last: usize,
    /// Tap the last state before its ReLU instead of after.
    pub last_pre_activation: bool,
}

impl Taps {
    /// First and last hidden layers, last state taken after its activation.
    pub fn standard<T: Real>(net: &Mlp<T>) -> Result<Self> {
        let n = net.num_layers();
        if n < 2 {
            return Err(Error::arg("taps need at least two layers"));
        }
        Ok(Self {
            first: 0,
            last: n - 2,
            last_pre_activation: false,
        })
    }

    /// Layers replaced by a surrogate map.
    pub fn inner_layers(&self) -> Range<usize> {
        self.first + 1..self.last + 1
    }
}

/// Output of [`Mlp::forward_with_taps`].
#[derive(Debug, Clone, PartialEq)]
pub struct TapOutput<T> {
    pub logits: Array1<T>,
    pub first: Array1<T>,
    pub last: Array1<T>,
}

/// Per-layer keep masks; `None` leaves a layer unconstrained.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightMask {
    pub keep: Vec<Option<Array2<bool>>>,
}

impl WeightMask {
    pub fn none(num_layers: usize) -> Self {
        Self {
            keep: vec![None; num_layers],
        }
    }

    pub fn zeroed_count(&self) -> usize {
        self.keep
            .iter()
            .flatten()
            .map(|m| m.iter().filter(|&&k| !k).count())
            .sum()
    }

    pub fn apply<T: Real>(&self, net: &mut Mlp<T>) {
        for (w, keep) in net.weights.iter_mut().zip(&self.keep) {
            if let Some(keep) = keep {
                Zip::from(w).and(keep).for_each(|w, &k| {
                    if !k {
                        *w = T::zero();
                    }
                });
            }
        }
    }
}

impl<T: Real> Mlp<T> {
    /// Seeded network: weights and biases uniform in `±1/sqrt(fan_in)`.
    pub fn new(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = layer_sizes.len() - 1;
        let mut weights = Vec::with_capacity(n);
        let mut biases = Vec::with_capacity(n);
        for k in 0..n {
            let (fan_in, fan_out) = (layer_sizes[k], layer_sizes[k + 1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut draw = || T::of(rng.random_range(-bound..bound));
            weights.push(Array2::from_shape_simple_fn((fan_out, fan_in), &mut draw));
            biases.push(Array1::from_shape_simple_fn(fan_out, &mut draw));
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
            activations: default_activations(n),
        })
    }

    pub fn zeros(layer_sizes: &[usize]) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let n = layer_sizes.len() - 1;
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            weights: (0..n)
                .map(|k| Array2::zeros((layer_sizes[k + 1], layer_sizes[k])))
                .collect(),
            biases: (0..n).map(|k| Array1::zeros(layer_sizes[k + 1])).collect(),
            activations: default_activations(n),
        })
    }

    pub fn from_parts(weights: Vec<Array2<T>>, biases: Vec<Array1<T>>, activations: Vec<bool>) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() || weights.len() != activations.len() {
            return Err(Error::arg("weights, biases and activation flags must have equal nonzero length"));
        }
        let mut sizes = vec![weights[0].ncols()];
        for (k, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.ncols() != *sizes.last().unwrap() {
                return Err(Error::shape(&format!("layer {k} weight"), (w.nrows(), sizes[k]), w.dim()));
            }
            if b.len() != w.nrows() {
                return Err(Error::shape(&format!("layer {k} bias"), w.nrows(), b.len()));
            }
            sizes.push(w.nrows());
        }
        validate_sizes(&sizes)?;
        Ok(Self {
            layer_sizes: sizes,
            weights,
            biases,
            activations,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[Array2<T>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<T>] {
        &self.biases
    }

    pub fn activations(&self) -> &[bool] {
        &self.activations
    }

    pub fn weight_mut(&mut self, k: usize) -> &mut Array2<T> {
        &mut self.weights[k]
    }

    pub fn bias_mut(&mut self, k: usize) -> &mut Array1<T> {
        &mut self.biases[k]
    }

    pub fn set_activation(&mut self, k: usize, on: bool) {
        self.activations[k] = on;
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// Weights plus biases of `layers`.
    pub fn param_count(&self, layers: Range<usize>) -> usize {
        layers.map(|k| self.weights[k].len() + self.biases[k].len()).sum()
    }

    fn affine(&self, k: usize, input: ArrayView2<T>) -> Array2<T> {
        let mut z = input.dot(&self.weights[k].t());
        z += &self.biases[k];
        z
    }

    fn layer(&self, k: usize, input: ArrayView2<T>) -> Array2<T> {
        let mut z = self.affine(k, input);
        if self.activations[k] {
            relu_inplace(&mut z);
        }
        z
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.input_dim() {
            return Err(Error::shape("network input", self.input_dim(), cols));
        }
        Ok(())
    }

    /// Runs layers `layers` on a batch (one sample per row), activations included.
    pub fn apply_layers(&self, layers: Range<usize>, x: ArrayView2<T>) -> Result<Array2<T>> {
        if layers.end > self.num_layers() || layers.start > layers.end {
            return Err(Error::arg(format!("layer range {layers:?} out of bounds")));
        }
        let expected = self.layer_sizes[layers.start];
        if x.ncols() != expected {
            return Err(Error::shape("sub-network input", expected, x.ncols()));
        }
        let mut h = x.to_owned();
        for k in layers {
            h = self.layer(k, h.view());
        }
        Ok(h)
    }

    pub fn forward_batch(&self, x: ArrayView2<T>) -> Result<Array2<T>> {
        self.check_input(x.ncols())?;
        self.apply_layers(0..self.num_layers(), x)
    }

    pub fn forward(&self, x: ArrayView1<T>) -> Result<Array1<T>> {
        let out = self.forward_batch(x.insert_axis(Axis(0)))?;
        Ok(out.index_axis_move(Axis(0), 0))
    }

    /// Batched taps: `(first, last)` hidden states, one row per sample.
    pub fn taps_batch(&self, x: ArrayView2<T>, taps: &Taps) -> Result<(Array2<T>, Array2<T>)> {
        self.check_taps(taps)?;
        self.check_input(x.ncols())?;
        let first = self.apply_layers(0..taps.first + 1, x)?;
        let last = self.inner_map(taps, first.view())?;
        Ok((first, last))
    }

    /// The exact map from the first tapped state to the last one.
    pub fn inner_map(&self, taps: &Taps, first: ArrayView2<T>) -> Result<Array2<T>> {
        self.check_taps(taps)?;
        let mut h = self.apply_layers(taps.first + 1..taps.last, first)?;
        if taps.last > taps.first {
            h = if taps.last_pre_activation {
                self.affine(taps.last, h.view())
            } else {
                self.layer(taps.last, h.view())
            };
        }
        Ok(h)
    }

    /// Logits from a last-tap state (re-applies the skipped ReLU for a pre-activation tap).
    pub fn head(&self, taps: &Taps, last: ArrayView2<T>) -> Result<Array2<T>> {
        self.check_taps(taps)?;
        let mut h = last.to_owned();
        if taps.last_pre_activation && self.activations[taps.last] {
            relu_inplace(&mut h);
        }
        self.apply_layers(taps.last + 1..self.num_layers(), h.view())
    }

    pub fn forward_with_taps(&self, x: ArrayView1<T>, taps: &Taps) -> Result<TapOutput<T>> {
        let (first, last) = self.taps_batch(x.insert_axis(Axis(0)), taps)?;
        let logits = self.head(taps, last.view())?;
        Ok(TapOutput {
            logits: logits.index_axis_move(Axis(0), 0),
            first: first.index_axis_move(Axis(0), 0),
            last: last.index_axis_move(Axis(0), 0),
        })
    }

    fn check_taps(&self, taps: &Taps) -> Result<()> {
        if taps.first > taps.last || taps.last + 1 >= self.num_layers() + 1 {
            return Err(Error::arg(format!("invalid taps {taps:?} for {} layers", self.num_layers())));
        }
        if self.layer_sizes[taps.first + 1] != self.layer_sizes[taps.last + 1] {
            return Err(Error::arg("tapped states must have equal width"));
        }
        Ok(())
    }

    pub fn predict_classes(&self, x: ArrayView2<T>) -> Result<Vec<usize>> {
        self.check_input(x.ncols())?;
        let mut out = Vec::with_capacity(x.nrows());
        for chunk in x.axis_chunks_iter(Axis(0), EVAL_CHUNK) {
            let logits = self.forward_batch(chunk)?;
            out.extend(logits.rows().into_iter().map(argmax));
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layer_sizes.len() as u32).to_le_bytes());
        for &n in &self.layer_sizes {
            out.extend_from_slice(&(n as u64).to_le_bytes());
        }
        out.extend(self.activations.iter().map(|&a| a as u8));
        for (w, b) in self.weights.iter().zip(&self.biases) {
            for &v in w.iter().chain(b.iter()) {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a network checkpoint".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let n = r.u32()? as usize;
        let sizes = (0..n).map(|_| r.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        validate_sizes(&sizes)?;
        let activations = r.take(n - 1)?.iter().map(|&b| b != 0).collect();
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for k in 0..n - 1 {
            let (i, o) = (sizes[k], sizes[k + 1]);
            weights.push(Array2::from_shape_vec((o, i), r.f64s::<T>(o * i)?).expect("length checked"));
            biases.push(Array1::from_vec(r.f64s::<T>(o)?));
        }
        r.finish()?;
        Self::from_parts(weights, biases, activations)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).at(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).at(path)?)
    }
}

fn validate_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 {
        return Err(Error::arg("a network needs at least an input and an output layer"));
    }
    if sizes.contains(&0) {
        return Err(Error::arg("layer sizes must be positive"));
    }
    Ok(())
}

/// No activation after the first and the last layer; ReLU everywhere else.
pub fn default_activations(num_layers: usize) -> Vec<bool> {
    (0..num_layers).map(|k| k != 0 && k + 1 != num_layers).collect()
}

pub fn relu_inplace<T: Real>(z: &mut Array2<T>) {
    z.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Real>(row: ArrayView1<T>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy_of(predicted: &[usize], labels: &[u8]) -> f64 {
    let hits = predicted.iter().zip(labels).filter(|(&p, &l)| p == l as usize).count();
    hits as f64 / labels.len() as f64
}

/// Fraction of samples whose argmax logit equals the label.
pub fn evaluate<T: Real>(net: &Mlp<T>, set: &ImageSet<T>) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::arg("cannot evaluate on an empty set"));
    }
    Ok(accuracy_of(&net.predict_classes(set.images.view())?, &set.labels))
}

/// Samples the network classifies correctly, in original order.
pub fn filter_correct<T: Real>(net: &Mlp<T>, set: &ImageSet<T>) -> Result<ImageSet<T>> {
    let predicted = net.predict_classes(set.images.view())?;
    let keep: Vec<usize> = predicted
        .iter()
        .zip(&set.labels)
        .enumerate()
        .filter(|(_, (&p, &l))| p == l as usize)
        .map(|(i, _)| i)
        .collect();
    Ok(set.subset(&keep, format!("{}-correct", set.name)))
}

/// Paired hidden states: row `i` of `y` is the sub-network applied to row `i` of `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotSet<T = f64> {
    pub x: Array2<T>,
    pub y: Array2<T>,
}

impl<T: Real> SnapshotSet<T> {
    pub fn new(x: Array2<T>, y: Array2<T>) -> Result<Self> {
        if x.dim() != y.dim() {
            return Err(Error::shape("snapshot Y", x.dim(), y.dim()));
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            x: self.x.select(Axis(0), rows),
            y: self.y.select(Axis(0), rows),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"KNETSNAP");
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u64).to_le_bytes());
        for &v in self.x.iter().chain(self.y.iter()) {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(8)? != b"KNETSNAP" {
            return Err(Error::Format("not a snapshot file".into()));
        }
        let m = r.u64()? as usize;
        let d = r.u64()? as usize;
        let x = Array2::from_shape_vec((m, d), r.f64s(m * d)?).expect("length checked");
        let y = Array2::from_shape_vec((m, d), r.f64s(m * d)?).expect("length checked");
        r.finish()?;
        Self::new(x, y)
    }
}

pub fn collect_snapshots<T: Real>(net: &Mlp<T>, set: &ImageSet<T>, taps: &Taps) -> Result<SnapshotSet<T>> {
    if set.is_empty() {
        return Err(Error::arg("cannot collect snapshots from an empty set"));
    }
    let (x, y) = net.taps_batch(set.images.view(), taps)?;
    SnapshotSet::new(x, y)
}

/// AdaDelta training schedule. The learning rate scales the AdaDelta step
/// and is multiplied by `lr_decay_per_epoch` after every epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub rho: f64,
    pub initial_lr: f64,
    pub lr_decay_per_epoch: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub adadelta_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 14,
            rho: 0.9,
            initial_lr: 1.0,
            lr_decay_per_epoch: 0.7,
            batch_size: 64,
            seed: 0,
            adadelta_eps: 1e-6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::arg(format!("rho {} not in (0, 1)", self.rho)));
        }
        if !(self.lr_decay_per_epoch > 0.0) {
            return Err(Error::arg("learning-rate decay must be positive"));
        }
        if !(self.initial_lr > 0.0) || !(self.adadelta_eps > 0.0) {
            return Err(Error::arg("learning rate and epsilon must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::arg("batch size must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub learning_rate: f64,
    pub mean_loss: f64,
    pub train_accuracy: f64,
}

/// AdaDelta accumulators for one parameter tensor.
#[derive(Debug, Clone)]
pub struct AdaDelta<T, D: ndarray::Dimension> {
    square_avg: ndarray::Array<T, D>,
    acc_delta: ndarray::Array<T, D>,
}

impl<T: Real, D: ndarray::Dimension> AdaDelta<T, D> {
    pub fn new(shape: D) -> Self {
        Self {
            square_avg: ndarray::Array::zeros(shape.clone()),
            acc_delta: ndarray::Array::zeros(shape),
        }
    }

    /// One step: `param -= lr * sqrt(acc_delta + eps) / sqrt(square_avg + eps) * grad`.
    pub fn step(&mut self, param: &mut ndarray::Array<T, D>, grad: &ndarray::Array<T, D>, rho: T, eps: T, lr: T) {
        let one = T::one();
        Zip::from(param)
            .and(grad)
            .and(&mut self.square_avg)
            .and(&mut self.acc_delta)
            .for_each(|p, &g, sq, acc| {
                *sq = rho * *sq + (one - rho) * g * g;
                let delta = (*acc + eps).sqrt() / (*sq + eps).sqrt() * g;
                *acc = rho * *acc + (one - rho) * delta * delta;
                *p -= lr * delta;
            });
    }
}

/// Minimizes mean softmax cross-entropy with AdaDelta.
pub fn train<T: Real>(net: &mut Mlp<T>, set: &ImageSet<T>, config: &TrainConfig) -> Result<Vec<EpochMetrics>> {
    train_masked(net, set, config, None)
}

/// [`train`] that keeps masked-out weights at exactly zero throughout.
pub fn train_masked<T: Real>(
    net: &mut Mlp<T>,
    set: &ImageSet<T>,
    config: &TrainConfig,
    mask: Option<&WeightMask>,
) -> Result<Vec<EpochMetrics>> {
    config.validate()?;
    if set.is_empty() {
        return Err(Error::arg("cannot train on an empty set"));
    }
    net.check_input(set.input_dim())?;
    if net.output_dim() < NUM_CLASSES && set.labels.iter().any(|&l| l as usize >= net.output_dim()) {
        return Err(Error::arg("labels exceed the network's output width"));
    }
    if let Some(mask) = mask {
        if mask.keep.len() != net.num_layers() {
            return Err(Error::arg("mask does not match the network depth"));
        }
        mask.apply(net);
    }

    let mut w_opt: Vec<_> = net.weights.iter().map(|w| AdaDelta::new(w.raw_dim())).collect();
    let mut b_opt: Vec<_> = net.biases.iter().map(|b| AdaDelta::new(b.raw_dim())).collect();
    let (rho, eps) = (T::of(config.rho), T::of(config.adadelta_eps));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..set.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let lr = config.initial_lr * config.lr_decay_per_epoch.powi(epoch as i32);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut hits = 0usize;
        for batch in order.chunks(config.batch_size) {
            let x = set.images.select(Axis(0), batch);
            let labels: Vec<usize> = batch.iter().map(|&i| set.labels[i] as usize).collect();
            let (loss, correct, mut grads) = net.loss_and_gradients(x.view(), &labels);
            loss_sum += loss * batch.len() as f64;
            hits += correct;
            for k in 0..net.num_layers() {
                if let Some(Some(keep)) = mask.map(|m| &m.keep[k]) {
                    Zip::from(&mut grads.weights[k]).and(keep).for_each(|g, &k| {
                        if !k {
                            *g = T::zero();
                        }
                    });
                }
                w_opt[k].step(&mut net.weights[k], &grads.weights[k], rho, eps, T::of(lr));
                b_opt[k].step(&mut net.biases[k], &grads.biases[k], rho, eps, T::of(lr));
            }
            if let Some(mask) = mask {
                mask.apply(net);
            }
        }
        history.push(EpochMetrics {
            epoch,
            learning_rate: lr,
            mean_loss: loss_sum / set.len() as f64,
            train_accuracy: hits as f64 / set.len() as f64,
        });
    }
    Ok(history)
}

pub struct Gradients<T> {
    pub weights: Vec<Array2<T>>,
    pub biases: Vec<Array1<T>>,
}

impl<T: Real> Mlp<T> {
    /// Mean cross-entropy over the batch, number of correct argmax predictions,
    /// and the gradients of the mean loss.
    pub fn loss_and_gradients(&self, x: ArrayView2<T>, labels: &[usize]) -> (f64, usize, Gradients<T>) {
        let n = self.num_layers();
        let batch = x.nrows();
        // inputs[k] is the input of layer k; pre[k] its pre-activation
        let mut inputs: Vec<Array2<T>> = Vec::with_capacity(n + 1);
        let mut pre: Vec<Array2<T>> = Vec::with_capacity(n);
        inputs.push(x.to_owned());
        for k in 0..n {
            let z = self.affine(k, inputs[k].view());
            let mut a = z.clone();
            if self.activations[k] {
                relu_inplace(&mut a);
            }
            pre.push(z);
            inputs.push(a);
        }

        let logits = &inputs[n];
        let mut delta = Array2::<T>::zeros(logits.raw_dim());
        let mut loss = 0.0;
        let mut correct = 0;
        let inv_b = T::one() / T::from_count(batch);
        for (i, row) in logits.rows().into_iter().enumerate() {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
            let sum: T = exps.iter().copied().sum();
            let label = labels[i];
            loss += (sum.ln() + max - row[label]).as_f64();
            if argmax(row) == label {
                correct += 1;
            }
            for (j, e) in exps.iter().enumerate() {
                let p = *e / sum;
                let target = if j == label { T::one() } else { T::zero() };
                delta[[i, j]] = (p - target) * inv_b;
            }
        }

        let mut gw = vec![Array2::zeros((0, 0)); n];
        let mut gb = vec![Array1::zeros(0); n];
        for k in (0..n).rev() {
            if self.activations[k] {
                Zip::from(&mut delta).and(&pre[k]).for_each(|d, &z| {
                    if z <= T::zero() {
                        *d = T::zero();
                    }
                });
            }
            gw[k] = delta.t().dot(&inputs[k]);
            gb[k] = delta.sum_axis(Axis(0));
            if k > 0 {
                delta = delta.dot(&self.weights[k]);
            }
        }
        (
            loss / batch as f64,
            correct,
            Gradients {
                weights: gw,
                biases: gb,
            },
        )
    }
}

/// Little-endian reader shared by the binary file formats.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Length {
            expected: self.pos.saturating_add(n),
            found: self.bytes.len(),
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64s<T: Real>(&mut self, n: usize) -> Result<Vec<T>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| T::of(f64::from_le_bytes(c.try_into().unwrap())))
            .collect())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}
