//! Fully-connected classifiers with layer normalization and ReLU.
//!
//! Hidden layer `l` computes `relu(LN(W h + b; gain, shift))`; the output
//! layer is affine. Layer normalization is taken per example over the hidden
//! units, before the activation.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{LabError, Result};
use crate::rng::{SeedPlan, StreamTag};
use crate::scalar::Scalar;

/// Stabilizer added to the per-example variance inside the square root.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub n_classes: usize,
    /// One flag per hidden layer.
    pub layer_norm: Vec<bool>,
}

impl NetSpec {
    /// MLP with layer normalization on every hidden layer.
    pub fn mlp(input_dim: usize, hidden: &[usize], n_classes: usize) -> Self {
        NetSpec {
            input_dim,
            hidden: hidden.to_vec(),
            n_classes,
            layer_norm: vec![true; hidden.len()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.n_classes == 0 || self.hidden.contains(&0) {
            return Err(LabError::Config(format!("all widths must be >= 1: {self:?}")));
        }
        if self.layer_norm.len() != self.hidden.len() {
            return Err(LabError::Config(format!(
                "{} layer-norm flags for {} hidden layers",
                self.layer_norm.len(),
                self.hidden.len()
            )));
        }
        Ok(())
    }

    /// Layer widths from input to output.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.input_dim);
        w.extend_from_slice(&self.hidden);
        w.push(self.n_classes);
        w
    }

    /// Number of affine layers.
    pub fn n_layers(&self) -> usize {
        self.hidden.len() + 1
    }

    pub fn has_norm(&self, layer: usize) -> bool {
        layer < self.hidden.len() && self.layer_norm[layer]
    }

    pub fn n_params(&self) -> usize {
        self.layout().iter().map(|s| s.len).sum()
    }

    /// Number of weight-matrix entries (excluding biases and norm parameters).
    pub fn n_weights(&self) -> usize {
        let w = self.widths();
        w.windows(2).map(|p| p[0] * p[1]).sum()
    }

    /// Position of every parameter tensor inside the flat vector.
    pub fn layout(&self) -> Vec<Segment> {
        let w = self.widths();
        let mut out = Vec::new();
        let mut offset = 0;
        for l in 0..self.n_layers() {
            let (fan_in, fan_out) = (w[l], w[l + 1]);
            let mut push = |kind, len| {
                out.push(Segment {
                    layer: l,
                    kind,
                    offset,
                    len,
                    fan_in,
                });
                offset += len;
            };
            push(TensorKind::Weight, fan_in * fan_out);
            push(TensorKind::Bias, fan_out);
            if self.has_norm(l) {
                push(TensorKind::Gain, fan_out);
                push(TensorKind::Shift, fan_out);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TensorKind {
    Weight,
    Bias,
    Gain,
    Shift,
}

/// A contiguous run of the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub layer: usize,
    pub kind: TensorKind,
    pub offset: usize,
    pub len: usize,
    pub fan_in: usize,
}

impl Segment {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm<T> {
    pub gain: Array1<T>,
    pub shift: Array1<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    /// `fan_out x fan_in`.
    pub weight: Array2<T>,
    pub bias: Array1<T>,
    pub norm: Option<Norm<T>>,
}

impl<T: Scalar> Layer<T> {
    fn tensors(&self) -> Vec<&[T]> {
        let mut v = vec![
            self.weight.as_slice().expect("standard layout"),
            self.bias.as_slice().expect("standard layout"),
        ];
        if let Some(n) = &self.norm {
            v.push(n.gain.as_slice().expect("standard layout"));
            v.push(n.shift.as_slice().expect("standard layout"));
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut v = vec![
            self.weight.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("standard layout"),
        ];
        if let Some(n) = &mut self.norm {
            v.push(n.gain.as_slice_mut().expect("standard layout"));
            v.push(n.shift.as_slice_mut().expect("standard layout"));
        }
        v
    }
}

/// All parameters of a network. The flat order is, per layer: weight
/// (row-major), bias, gain, shift.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    pub spec: NetSpec,
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn zeros(spec: &NetSpec) -> Self {
        let w = spec.widths();
        let layers = (0..spec.n_layers())
            .map(|l| Layer {
                weight: Array2::zeros((w[l + 1], w[l])),
                bias: Array1::zeros(w[l + 1]),
                norm: spec.has_norm(l).then(|| Norm {
                    gain: Array1::zeros(w[l + 1]),
                    shift: Array1::zeros(w[l + 1]),
                }),
            })
            .collect();
        ParamSet {
            spec: spec.clone(),
            layers,
        }
    }

    /// He-normal weights, zero biases, unit gains and zero shifts.
    pub fn init(spec: &NetSpec, seeds: &SeedPlan) -> Result<Self> {
        spec.validate()?;
        let mut p = Self::zeros(spec);
        for (l, layer) in p.layers.iter_mut().enumerate() {
            let fan_in = layer.weight.ncols();
            let std = (2.0 / fan_in as f64).sqrt();
            let mut s = seeds.stream(StreamTag::Init, l as u64);
            layer.weight.mapv_inplace(|_| T::of(std * s.next_gaussian()));
            if let Some(n) = &mut layer.norm {
                n.gain.fill(T::one());
            }
        }
        Ok(p)
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().flat_map(|l| l.tensors()).map(<[T]>::len).sum()
    }

    /// Parameter values in flat order.
    pub fn values(&self) -> impl Iterator<Item = &T> + '_ {
        self.layers.iter().flat_map(|l| l.tensors()).flatten()
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut T> + '_ {
        self.layers.iter_mut().flat_map(|l| l.tensors_mut()).flatten()
    }

    pub fn to_flat(&self) -> Vec<T> {
        self.values().copied().collect()
    }

    pub fn from_flat(spec: &NetSpec, flat: &[T]) -> Result<Self> {
        spec.validate()?;
        let mut p = Self::zeros(spec);
        if flat.len() != spec.n_params() {
            return Err(LabError::Shape(format!(
                "flat vector of length {} for a network with {} parameters",
                flat.len(),
                spec.n_params()
            )));
        }
        for (dst, &src) in p.values_mut().zip(flat) {
            *dst = src;
        }
        Ok(p)
    }

    pub fn same_shape(&self, other: &Self) -> Result<()> {
        if self.spec != other.spec {
            return Err(LabError::Shape(format!(
                "network specs differ: {:?} vs {:?}",
                self.spec, other.spec
            )));
        }
        Ok(())
    }

    /// `wa * a + wb * b`, elementwise.
    pub fn combine(a: &Self, wa: T, b: &Self, wb: T) -> Result<Self> {
        a.same_shape(b)?;
        let mut out = a.clone();
        for (o, (&x, &y)) in out.values_mut().zip(a.values().zip(b.values())) {
            *o = wa * x + wb * y;
        }
        Ok(out)
    }

    /// Point `wa * a + wb * b` on the segment between two networks (weights
    /// summing to 1). Entries equal in both endpoints are copied unchanged,
    /// so the path between identical networks is exactly constant.
    pub fn interpolate(a: &Self, wa: T, b: &Self, wb: T) -> Result<Self> {
        a.same_shape(b)?;
        let mut out = a.clone();
        for (o, (&x, &y)) in out.values_mut().zip(a.values().zip(b.values())) {
            if x != y {
                *o = wa * x + wb * y;
            }
        }
        Ok(out)
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        let flat: Vec<U> = self.values().map(|v| U::of(v.as_f64())).collect();
        ParamSet::from_flat(&self.spec, &flat).expect("same spec")
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }
}

/// Activations recorded during a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace<T> {
    /// Post-activation output of each hidden layer (`batch x width`).
    pub hidden: Vec<Array2<T>>,
    pub logits: Array2<T>,
}

impl<T: Scalar> ActivationTrace<T> {
    /// Output of the last hidden layer, or the logits for a network without
    /// hidden layers.
    pub fn penultimate(&self) -> &Array2<T> {
        self.hidden.last().unwrap_or(&self.logits)
    }
}

struct LayerCache<T> {
    input: Array2<T>,
    normalized: Option<(Array2<T>, Array1<T>)>,
    pre_activation: Array2<T>,
}

fn check_inputs<T: Scalar>(params: &ParamSet<T>, inputs: &ArrayView2<T>) -> Result<()> {
    if inputs.ncols() != params.spec.input_dim {
        return Err(LabError::Shape(format!(
            "inputs have {} columns, network expects {}",
            inputs.ncols(),
            params.spec.input_dim
        )));
    }
    if inputs.iter().any(|v| !v.is_finite()) {
        return Err(LabError::NonFinite("network inputs".into()));
    }
    Ok(())
}

fn affine<T: Scalar>(h: &ArrayView2<T>, layer: &Layer<T>) -> Array2<T> {
    let mut z = h.dot(&layer.weight.t());
    z += &layer.bias;
    z
}

/// Per-row layer normalization; returns (normalized, 1/std).
fn layer_norm<T: Scalar>(z: &Array2<T>) -> (Array2<T>, Array1<T>) {
    let width = T::of_usize(z.ncols());
    let eps = T::of(LN_EPS);
    let mut xhat = z.clone();
    let mut inv_std = Array1::zeros(z.nrows());
    for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.iter().copied().sum::<T>() / width;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<T>() / width;
        *inv = T::one() / (var + eps).sqrt();
        let s = *inv;
        row.mapv_inplace(|v| v * s);
    }
    (xhat, inv_std)
}

fn relu<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        T::zero()
    }
}

fn forward_impl<T: Scalar>(
    params: &ParamSet<T>,
    inputs: ArrayView2<T>,
    keep_cache: bool,
) -> (Array2<T>, Vec<Array2<T>>, Vec<LayerCache<T>>) {
    let n_layers = params.layers.len();
    let mut h = inputs.to_owned();
    let mut hidden = Vec::with_capacity(n_layers - 1);
    let mut caches = Vec::new();
    for (l, layer) in params.layers.iter().enumerate() {
        let z = affine(&h.view(), layer);
        if l + 1 == n_layers {
            if keep_cache {
                caches.push(LayerCache {
                    input: h,
                    normalized: None,
                    pre_activation: Array2::zeros((0, 0)),
                });
            }
            return (z, hidden, caches);
        }
        let (pre, normalized) = match &layer.norm {
            Some(norm) => {
                let (xhat, inv) = layer_norm(&z);
                let mut y = &xhat * &norm.gain;
                y += &norm.shift;
                (y, Some((xhat, inv)))
            }
            None => (z, None),
        };
        let a = pre.mapv(relu);
        hidden.push(a.clone());
        if keep_cache {
            caches.push(LayerCache {
                input: std::mem::replace(&mut h, a),
                normalized,
                pre_activation: pre,
            });
        } else {
            h = a;
        }
    }
    unreachable!("a network has at least one layer")
}

/// Logits and the activation trace for a batch of inputs.
pub fn forward<T: Scalar>(params: &ParamSet<T>, inputs: ArrayView2<T>) -> Result<(Array2<T>, ActivationTrace<T>)> {
    check_inputs(params, &inputs)?;
    let (logits, hidden, _) = forward_impl(params, inputs, false);
    let trace = ActivationTrace {
        hidden,
        logits: logits.clone(),
    };
    Ok((logits, trace))
}

/// Logits only.
pub fn logits<T: Scalar>(params: &ParamSet<T>, inputs: ArrayView2<T>) -> Result<Array2<T>> {
    check_inputs(params, &inputs)?;
    Ok(forward_impl(params, inputs, false).0)
}

fn log_softmax_row<T: Scalar>(row: ndarray::ArrayView1<T>) -> Array1<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    row.mapv(|v| v - lse)
}

/// Mean cross-entropy of `logits` against `labels`.
pub fn cross_entropy<T: Scalar>(logits: &Array2<T>, labels: &[usize]) -> T {
    let total: T = logits
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(row, &y)| -log_softmax_row(row)[y])
        .sum();
    total / T::of_usize(labels.len())
}

/// Index of the largest logit in each row; ties resolve to the lowest index.
pub fn argmax_rows<T: Scalar>(logits: &Array2<T>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy_of<T: Scalar>(logits: &Array2<T>, labels: &[usize]) -> f64 {
    let hits = argmax_rows(logits).iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}

pub fn loss_ce<T: Scalar>(params: &ParamSet<T>, data: &Dataset<T>) -> Result<T> {
    let z = logits(params, data.inputs.view())?;
    Ok(cross_entropy(&z, &data.labels))
}

pub fn error01<T: Scalar>(params: &ParamSet<T>, data: &Dataset<T>) -> Result<f64> {
    let z = logits(params, data.inputs.view())?;
    Ok(1.0 - accuracy_of(&z, &data.labels))
}

pub fn accuracy<T: Scalar>(params: &ParamSet<T>, data: &Dataset<T>) -> Result<f64> {
    Ok(1.0 - error01(params, data)?)
}

/// Mean cross-entropy over the batch and its exact gradient.
pub fn loss_and_grad<T: Scalar>(
    params: &ParamSet<T>,
    inputs: ArrayView2<T>,
    labels: &[usize],
) -> Result<(T, ParamSet<T>)> {
    check_inputs(params, &inputs)?;
    if inputs.nrows() != labels.len() || labels.is_empty() {
        return Err(LabError::Shape(format!(
            "{} input rows, {} labels",
            inputs.nrows(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= params.spec.n_classes) {
        return Err(LabError::Shape(format!(
            "label {bad} >= {} classes",
            params.spec.n_classes
        )));
    }
    let (z, _, caches) = forward_impl(params, inputs, true);
    let batch = T::of_usize(labels.len());

    let mut loss = T::zero();
    let mut delta = Array2::<T>::zeros(z.raw_dim());
    for ((row, mut d), &y) in z.rows().into_iter().zip(delta.rows_mut()).zip(labels) {
        let ls = log_softmax_row(row);
        loss -= ls[y];
        Zip::from(&mut d).and(&ls).for_each(|d, &l| *d = l.exp() / batch);
        d[y] -= T::one() / batch;
    }
    loss /= batch;

    let mut grads = ParamSet::zeros(&params.spec);
    for l in (0..params.layers.len()).rev() {
        let layer = &params.layers[l];
        let cache = &caches[l];
        let mut dz = delta;
        if l + 1 < params.layers.len() {
            // Through ReLU (subgradient 0 at 0), then layer norm.
            Zip::from(&mut dz).and(&cache.pre_activation).for_each(|d, &p| {
                if p <= T::zero() {
                    *d = T::zero();
                }
            });
            if let (Some(norm), Some((xhat, inv_std))) = (&layer.norm, &cache.normalized) {
                let gnorm = grads.layers[l].norm.as_mut().expect("norm grads");
                gnorm.gain = (&dz * xhat).sum_axis(Axis(0));
                gnorm.shift = dz.sum_axis(Axis(0));
                let width = T::of_usize(dz.ncols());
                let mut dxhat = dz * &norm.gain;
                for ((mut drow, xrow), &inv) in dxhat.rows_mut().into_iter().zip(xhat.rows()).zip(inv_std) {
                    let s1 = drow.iter().copied().sum::<T>();
                    let s2 = drow.iter().zip(xrow).map(|(&a, &b)| a * b).sum::<T>();
                    Zip::from(&mut drow)
                        .and(&xrow)
                        .for_each(|d, &x| *d = inv / width * (width * *d - s1 - x * s2));
                }
                dz = dxhat;
            }
        }
        grads.layers[l].bias = dz.sum_axis(Axis(0));
        grads.layers[l].weight = dz.t().dot(&cache.input);
        if l > 0 {
            delta = dz.dot(&layer.weight);
        } else {
            break;
        }
    }
    Ok((loss, grads))
}

/// Gradient of the mean cross-entropy, as a parameter set.
pub fn grad<T: Scalar>(params: &ParamSet<T>, inputs: ArrayView2<T>, labels: &[usize]) -> Result<ParamSet<T>> {
    Ok(loss_and_grad(params, inputs, labels)?.1)
}
