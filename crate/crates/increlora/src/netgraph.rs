//! Frozen MLP backbone with per-layer adapter deltas, plus losses and the
//! reverse pass.
//!
//! The backbone's weights and biases never train; every trainable parameter
//! lives in the adapters. `forward` materializes each layer's effective
//! weight `W0 + delta_w(adapter)` and caches what the reverse pass needs.
//! The cache is consumed by move, so a backward call can only follow its
//! matching forward. `backward` turns the per-layer weight gradients into
//! per-component `(dlambda, da, db)` grads, including for reserve
//! components: their frozen lambda still scales `da`/`db`, which is exactly
//! what lets a reserve train before it is activated.

use serde::{Deserialize, Serialize};

use crate::adapter::SvdAdapter;
use crate::numkernel::{dot, matmul, matmul_nt, matmul_tn, DenseMatrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the activated value y = act(x); both
    /// activations admit this, which spares caching the pre-activations.
    fn prime_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    SoftmaxCrossEntropy,
}

/// One frozen linear layer, `w0` laid out out_dim x in_dim.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub w0: DenseMatrix,
    pub bias: Option<Vec<f64>>,
}

/// Frozen feed-forward stack. The activation sits between layers; the last
/// layer's output is returned raw.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub layers: Vec<LinearLayer>,
    pub activation: Activation,
}

impl Backbone {
    /// Gaussian backbone over the dim chain `dims[0] -> ... -> dims[L]`.
    pub fn random(dims: &[usize], activation: Activation, w0_std: f64, with_bias: bool, rng: &mut Rng) -> Self {
        assert!(dims.len() >= 2, "need at least one layer, got dims {dims:?}");
        assert!(dims.iter().all(|&d| d > 0), "all dims must be positive, got {dims:?}");
        let layers = dims
            .windows(2)
            .map(|w| {
                let (in_dim, out_dim) = (w[0], w[1]);
                LinearLayer {
                    w0: crate::numkernel::gaussian_fill(rng, out_dim, in_dim, w0_std),
                    bias: with_bias.then(|| rng.normal_vec(out_dim, w0_std)),
                }
            })
            .collect();
        Backbone { layers, activation }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].w0.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].w0.rows()
    }

    /// Per-layer (in, out) pairs, the shape contract adapters must match.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| (l.w0.cols(), l.w0.rows())).collect()
    }
}

/// Activations captured by `forward`, consumed by the matching `backward`.
pub struct FwdCache {
    /// inputs[l] is the batch fed into layer l (inputs[0] is x itself).
    inputs: Vec<DenseMatrix>,
    /// Effective weight each layer actually used.
    w_eff: Vec<DenseMatrix>,
}

/// Gradients of one adapter component's parameters.
#[derive(Debug, Clone)]
pub struct CompGrads {
    pub id: u32,
    pub dlambda: f64,
    /// 1 x in_dim.
    pub da: DenseMatrix,
    /// out_dim x 1.
    pub db: DenseMatrix,
}

/// Per-layer output of the reverse pass.
pub struct LayerGrads {
    /// Gradient of the loss wrt the layer's effective weight, out x in.
    pub dw_eff: DenseMatrix,
    /// One entry per present adapter component, actives first, reserve last.
    pub comps: Vec<CompGrads>,
}

fn effective_weights(net: &Backbone, adapters: &[SvdAdapter]) -> Vec<DenseMatrix> {
    assert_eq!(
        net.num_layers(),
        adapters.len(),
        "adapter count {} does not match layer count {}",
        adapters.len(),
        net.num_layers()
    );
    net.layers
        .iter()
        .zip(adapters)
        .map(|(layer, ad)| {
            assert_eq!(
                (ad.out_dim(), ad.in_dim()),
                layer.w0.shape(),
                "adapter {} shape mismatch against its layer",
                ad.module()
            );
            // Skip the add when every present lambda is zero so a masked or
            // zeroed adapter reproduces the frozen weights bit for bit.
            if ad.components().all(|c| c.lambda * ad.scale() == 0.0) {
                layer.w0.clone()
            } else {
                layer.w0.add(&ad.delta_w())
            }
        })
        .collect()
}

fn forward_raw(net: &Backbone, weights: Vec<DenseMatrix>, x: &DenseMatrix) -> (DenseMatrix, FwdCache) {
    assert_eq!(
        x.cols(),
        net.in_dim(),
        "input has {} features but the first layer expects {}",
        x.cols(),
        net.in_dim()
    );
    let num = net.num_layers();
    let mut inputs = Vec::with_capacity(num);
    let mut h = x.clone();
    for (l, w) in weights.iter().enumerate() {
        let mut pre = matmul_nt(&h, w);
        if let Some(bias) = &net.layers[l].bias {
            for r in 0..pre.rows() {
                for c in 0..pre.cols() {
                    pre.set(r, c, pre.get(r, c) + bias[c]);
                }
            }
        }
        inputs.push(h);
        h = if l + 1 == num {
            pre
        } else {
            let mut act = pre;
            for v in act.as_mut_slice() {
                *v = net.activation.apply(*v);
            }
            act
        };
    }
    (h, FwdCache { inputs, w_eff: weights })
}

/// Forward pass through backbone + adapters. Returns the raw output batch
/// and the cache required by `backward`.
pub fn forward(net: &Backbone, adapters: &[SvdAdapter], x: &DenseMatrix) -> (DenseMatrix, FwdCache) {
    forward_raw(net, effective_weights(net, adapters), x)
}

/// Forward pass with the backbone weights alone.
pub fn forward_frozen(net: &Backbone, x: &DenseMatrix) -> DenseMatrix {
    let weights = net.layers.iter().map(|l| l.w0.clone()).collect();
    forward_raw(net, weights, x).0
}

/// Forward pass with explicit per-layer weight deltas (used by synthetic
/// teachers). Output only.
pub fn forward_with_deltas(net: &Backbone, deltas: &[DenseMatrix], x: &DenseMatrix) -> DenseMatrix {
    assert_eq!(deltas.len(), net.num_layers(), "one delta per layer required");
    let weights = net
        .layers
        .iter()
        .zip(deltas)
        .map(|(l, d)| l.w0.add(d))
        .collect();
    forward_raw(net, weights, x).0
}

/// Reverse pass. `grad_out` is dLoss/dOutput for the batch the cache came
/// from. Biases are frozen so no bias gradients exist.
pub fn backward(
    net: &Backbone,
    adapters: &[SvdAdapter],
    cache: FwdCache,
    grad_out: &DenseMatrix,
) -> Vec<LayerGrads> {
    let num = net.num_layers();
    assert_eq!(adapters.len(), num, "adapter count changed between forward and backward");
    assert_eq!(
        grad_out.shape(),
        (cache.inputs[0].rows(), net.out_dim()),
        "grad_out shape {:?} does not match the cached batch",
        grad_out.shape()
    );

    let mut grads: Vec<LayerGrads> = Vec::with_capacity(num);
    let mut g = grad_out.clone();
    for l in (0..num).rev() {
        // For hidden layers the incoming grad is wrt the activated output;
        // fold in the activation derivative to reach the pre-activation.
        let dpre = if l + 1 == num {
            g
        } else {
            let mut d = g;
            for (v, y) in d.as_mut_slice().iter_mut().zip(cache.inputs[l + 1].as_slice()) {
                *v *= net.activation.prime_from_output(*y);
            }
            d
        };
        let dw_eff = matmul_tn(&dpre, &cache.inputs[l]);
        let ad = &adapters[l];
        let comps = ad
            .components()
            .map(|c| {
                let bt_dw = matmul_tn(&c.b, &dw_eff);
                let dlambda = ad.scale() * dot(bt_dw.as_slice(), c.a.as_slice());
                let coef = ad.scale() * c.lambda;
                CompGrads {
                    id: c.id,
                    dlambda,
                    da: bt_dw.scale(coef),
                    db: matmul_nt(&dw_eff, &c.a).scale(coef),
                }
            })
            .collect();
        grads.push(LayerGrads { dw_eff, comps });
        g = if l > 0 {
            matmul(&dpre, &cache.w_eff[l])
        } else {
            break;
        };
    }
    grads.reverse();
    grads
}

/// Regression or classification targets for one batch.
#[derive(Debug, Clone)]
pub enum Targets {
    Values(DenseMatrix),
    Labels(Vec<usize>),
}

/// Task loss and its gradient wrt the network output.
pub fn task_loss_and_grad(kind: LossKind, pred: &DenseMatrix, targets: &Targets) -> (f64, DenseMatrix) {
    match (kind, targets) {
        (LossKind::Mse, Targets::Values(y)) => mse_loss_and_grad(pred, y),
        (LossKind::SoftmaxCrossEntropy, Targets::Labels(labels)) => softmax_ce_loss_and_grad(pred, labels),
        _ => panic!("loss kind does not match target kind"),
    }
}

/// Mean squared error over every output entry.
pub fn mse_loss_and_grad(pred: &DenseMatrix, target: &DenseMatrix) -> (f64, DenseMatrix) {
    assert_eq!(
        pred.shape(),
        target.shape(),
        "mse: prediction {:?} vs target {:?}",
        pred.shape(),
        target.shape()
    );
    let count = (pred.rows() * pred.cols()) as f64;
    let mut grad = DenseMatrix::zeros(pred.rows(), pred.cols());
    let mut loss = 0.0;
    for (i, (p, t)) in pred.as_slice().iter().zip(target.as_slice()).enumerate() {
        let d = p - t;
        loss += d * d;
        grad.as_mut_slice()[i] = 2.0 * d / count;
    }
    (loss / count, grad)
}

/// Softmax cross-entropy averaged over the batch, computed via logsumexp so
/// large logits cannot overflow.
pub fn softmax_ce_loss_and_grad(logits: &DenseMatrix, labels: &[usize]) -> (f64, DenseMatrix) {
    let (batch, classes) = logits.shape();
    assert_eq!(labels.len(), batch, "one label per batch row required");
    let mut grad = DenseMatrix::zeros(batch, classes);
    let mut loss = 0.0;
    for r in 0..batch {
        let row = logits.row(r);
        let label = labels[r];
        assert!(label < classes, "label {label} out of range for {classes} classes");
        let maxv = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|v| (v - maxv).exp()).sum();
        let lse = maxv + sum_exp.ln();
        loss += lse - row[label];
        for c in 0..classes {
            let softmax = (row[c] - lse).exp();
            let onehot = if c == label { 1.0 } else { 0.0 };
            grad.set(r, c, (softmax - onehot) / batch as f64);
        }
    }
    (loss / batch as f64, grad)
}

/// Fraction of rows whose argmax matches the label. Ties resolve to the
/// lowest index.
pub fn accuracy(logits: &DenseMatrix, labels: &[usize]) -> f64 {
    let (batch, _) = logits.shape();
    assert_eq!(labels.len(), batch, "one label per batch row required");
    let mut hits = 0usize;
    for r in 0..batch {
        if argmax(logits.row(r)) == labels[r] {
            hits += 1;
        }
    }
    hits as f64 / batch as f64
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
