//! Small convolutional classifiers with hand-written backpropagation.
//!
//! A [`Network`] is a convolutional backbone (ending in the feature maps
//! Grad-CAM reads), global average pooling, optional hidden dense layers with
//! ReLU, and a final classification layer. Everything runs on `f64` for a
//! single sample at a time; batches are formed by the trainer.

mod adam;
mod layers;

use ndarray::Array1;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::seed::Rng;

pub use adam::Adam;
pub use layers::{argmax, softmax, softmax_cross_entropy, Conv2d, Dense, Tensor3};
use layers::*;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Conv(Conv2d),
    Relu,
    MaxPool2,
    /// `relu(x + body(x))`; the body must preserve the shape.
    Residual(Vec<Layer>),
}

enum Cache {
    Conv(ndarray::Array2<f64>),
    Relu(Tensor3),
    Pool(Vec<usize>, (usize, usize, usize)),
    Residual(Vec<Cache>, Tensor3),
}

impl Layer {
    fn forward(&self, x: &Tensor3) -> (Tensor3, Cache) {
        match self {
            Layer::Conv(c) => {
                let (y, cols) = c.forward(x);
                (y, Cache::Conv(cols))
            }
            Layer::Relu => {
                let y = relu(x);
                (y.clone(), Cache::Relu(y))
            }
            Layer::MaxPool2 => {
                let (y, arg) = max_pool2(x);
                (y, Cache::Pool(arg, x.dim()))
            }
            Layer::Residual(body) => {
                let (inner, caches) = forward_seq(body, x);
                let y = relu(&(inner + x));
                (y.clone(), Cache::Residual(caches, y))
            }
        }
    }

    fn infer(&self, x: &Tensor3) -> Tensor3 {
        match self {
            Layer::Conv(c) => c.forward(x).0,
            Layer::Relu => relu(x),
            Layer::MaxPool2 => max_pool2(x).0,
            Layer::Residual(body) => {
                let inner = body.iter().fold(x.clone(), |a, l| l.infer(&a));
                relu(&(inner + x))
            }
        }
    }

    /// `grads` holds this layer's parameter gradients in visit order.
    fn backward(&self, cache: &Cache, dy: &Tensor3, grads: &mut [Vec<f64>]) -> Tensor3 {
        match (self, cache) {
            (Layer::Conv(c), Cache::Conv(cols)) => {
                let (gw, rest) = grads.split_first_mut().expect("conv weight grad");
                c.backward(cols, dy, gw, &mut rest[0])
            }
            (Layer::Relu, Cache::Relu(out)) => relu_backward(out, dy),
            (Layer::MaxPool2, Cache::Pool(arg, shape)) => max_pool2_backward(arg, *shape, dy),
            (Layer::Residual(body), Cache::Residual(caches, out)) => {
                let d = relu_backward(out, dy);
                let inner = backward_seq(body, caches, &d, grads);
                inner + &d
            }
            _ => unreachable!("cache does not match layer"),
        }
    }

    fn param_count(&self) -> usize {
        match self {
            Layer::Conv(_) => 2,
            Layer::Residual(body) => body.iter().map(Layer::param_count).sum(),
            _ => 0,
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a [f64])) {
        match self {
            Layer::Conv(c) => {
                f(format!("{prefix}.weight"), c.weight.as_slice().expect("contiguous"));
                f(format!("{prefix}.bias"), c.bias.as_slice().expect("contiguous"));
            }
            Layer::Residual(body) => {
                for (i, l) in body.iter().enumerate() {
                    l.visit(&format!("{prefix}.{i}"), f);
                }
            }
            _ => {}
        }
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut [f64])) {
        match self {
            Layer::Conv(c) => {
                f(c.weight.as_slice_mut().expect("contiguous"));
                f(c.bias.as_slice_mut().expect("contiguous"));
            }
            Layer::Residual(body) => body.iter_mut().for_each(|l| l.visit_mut(f)),
            _ => {}
        }
    }
}

fn forward_seq(layers: &[Layer], x: &Tensor3) -> (Tensor3, Vec<Cache>) {
    let mut caches = Vec::with_capacity(layers.len());
    let mut a = x.clone();
    for l in layers {
        let (y, c) = l.forward(&a);
        caches.push(c);
        a = y;
    }
    (a, caches)
}

fn backward_seq(layers: &[Layer], caches: &[Cache], dy: &Tensor3, grads: &mut [Vec<f64>]) -> Tensor3 {
    // split the gradient slots per layer, then walk backwards
    let mut slots = Vec::with_capacity(layers.len());
    let mut rest = grads;
    for l in layers {
        let (mine, tail) = rest.split_at_mut(l.param_count());
        slots.push(mine);
        rest = tail;
    }
    let mut d = dy.clone();
    for ((l, c), g) in layers.iter().zip(caches).zip(slots).rev() {
        d = l.backward(c, &d, g);
    }
    d
}

/// Result of a forward pass kept for backpropagation.
pub struct Trace {
    backbone: Vec<Cache>,
    pub features: Tensor3,
    pooled: Array1<f64>,
    /// Post-ReLU outputs of the hidden layers.
    hidden: Vec<Array1<f64>>,
    pub logits: Array1<f64>,
}

impl Trace {
    /// Input to the classification layer.
    pub fn penultimate(&self) -> &Array1<f64> {
        self.hidden.last().unwrap_or(&self.pooled)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub input_channels: usize,
    pub backbone: Vec<Layer>,
    pub hidden: Vec<Dense>,
    pub classifier: Dense,
}

impl Network {
    /// Per-sample forward pass returning logits.
    pub fn predict(&self, x: &Tensor3) -> Array1<f64> {
        let features = self.backbone.iter().fold(x.clone(), |a, l| l.infer(&a));
        self.head(&features)
    }

    pub fn features(&self, x: &Tensor3) -> Tensor3 {
        self.backbone.iter().fold(x.clone(), |a, l| l.infer(&a))
    }

    /// Logits from last-stage feature maps.
    pub fn head(&self, features: &Tensor3) -> Array1<f64> {
        let mut a = global_avg_pool(features);
        for d in &self.hidden {
            a = d.forward(&a).mapv(|v| v.max(0.0));
        }
        self.classifier.forward(&a)
    }

    /// Penultimate activations, i.e. the classification layer's input.
    pub fn embed(&self, x: &Tensor3) -> Array1<f64> {
        let mut a = global_avg_pool(&self.features(x));
        for d in &self.hidden {
            a = d.forward(&a).mapv(|v| v.max(0.0));
        }
        a
    }

    pub fn forward(&self, x: &Tensor3) -> Trace {
        let (features, backbone) = forward_seq(&self.backbone, x);
        let pooled = global_avg_pool(&features);
        let mut hidden = Vec::with_capacity(self.hidden.len());
        for d in &self.hidden {
            let h = d.forward(hidden.last().unwrap_or(&pooled)).mapv(|v| v.max(0.0));
            hidden.push(h);
        }
        let logits = self.classifier.forward(hidden.last().unwrap_or(&pooled));
        Trace {
            backbone,
            features,
            pooled,
            hidden,
            logits,
        }
    }

    /// Backpropagates `dlogits` through the head only; returns the gradient
    /// with respect to the feature maps and accumulates head parameter
    /// gradients into the tail of `grads`.
    fn backward_head(&self, trace: &Trace, dlogits: &Array1<f64>, grads: &mut [Vec<f64>]) -> Tensor3 {
        let n = grads.len();
        let (gw, gb) = {
            let (a, b) = grads[n - 2..].split_at_mut(1);
            (&mut a[0], &mut b[0])
        };
        let mut d = self.classifier.backward(trace.penultimate(), dlogits, gw, gb);
        let head_start = n - 2 - 2 * self.hidden.len();
        for (i, layer) in self.hidden.iter().enumerate().rev() {
            let out = &trace.hidden[i];
            d.zip_mut_with(out, |g, o| {
                if *o <= 0.0 {
                    *g = 0.0
                }
            });
            let input = if i == 0 { &trace.pooled } else { &trace.hidden[i - 1] };
            let slot = head_start + 2 * i;
            let (a, b) = grads[slot..slot + 2].split_at_mut(1);
            d = layer.backward(input, &d, &mut a[0], &mut b[0]);
        }
        global_avg_pool_backward(trace.features.dim(), &d)
    }

    /// Gradient of `dlogits · logits` w.r.t. the last feature maps.
    pub fn feature_gradient(&self, trace: &Trace, dlogits: &Array1<f64>) -> Tensor3 {
        let mut scratch = self.zero_grads();
        self.backward_head(trace, dlogits, &mut scratch)
    }

    /// Full backward pass; adds parameter gradients into `grads`.
    pub fn backward(&self, trace: &Trace, dlogits: &Array1<f64>, grads: &mut [Vec<f64>]) {
        let dfeat = self.backward_head(trace, dlogits, grads);
        let nb: usize = self.backbone.iter().map(Layer::param_count).sum();
        backward_seq(&self.backbone, &trace.backbone, &dfeat, &mut grads[..nb]);
    }

    /// Every parameter tensor with a dotted name, in a fixed order. The
    /// classification layer's weight and bias come last.
    pub fn named_params(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (i, l) in self.backbone.iter().enumerate() {
            l.visit(&format!("backbone.{i}"), &mut |n, p| out.push((n, p)));
        }
        for (i, d) in self.hidden.iter().enumerate() {
            out.push((format!("hidden.{i}.weight"), d.weight.as_slice().expect("contiguous")));
            out.push((format!("hidden.{i}.bias"), d.bias.as_slice().expect("contiguous")));
        }
        out.push(("classifier.weight".into(), self.classifier.weight.as_slice().expect("contiguous")));
        out.push(("classifier.bias".into(), self.classifier.bias.as_slice().expect("contiguous")));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in self.backbone.iter_mut() {
            l.visit_mut(&mut |p| out.push(p));
        }
        for d in self.hidden.iter_mut() {
            out.push(d.weight.as_slice_mut().expect("contiguous"));
            out.push(d.bias.as_slice_mut().expect("contiguous"));
        }
        out.push(self.classifier.weight.as_slice_mut().expect("contiguous"));
        out.push(self.classifier.bias.as_slice_mut().expect("contiguous"));
        out
    }

    pub fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.named_params().iter().map(|(_, p)| vec![0.0; p.len()]).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.outputs()
    }

    /// SHA-256 per layer (weight and bias hashed together), keyed by layer name.
    pub fn layer_checksums(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, Sha256)> = Vec::new();
        for (name, values) in self.named_params() {
            let layer = name.rsplit_once('.').map(|(l, _)| l.to_string()).unwrap_or(name);
            if out.last().map(|(l, _)| l != &layer).unwrap_or(true) {
                out.push((layer, Sha256::new()));
            }
            let hasher = &mut out.last_mut().expect("pushed").1;
            for v in values {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        out.into_iter()
            .map(|(l, h)| (l, hex::encode(h.finalize())))
            .collect()
    }

    /// Replaces the classification layer with a freshly initialized one.
    pub fn reset_classifier(&mut self, num_classes: usize, rng: &mut Rng) {
        let inputs = self.classifier.inputs();
        self.classifier = Dense::new(inputs, num_classes, rng);
    }
}

/// Architectures the trainer can build by name.
pub const ARCHITECTURES: [&str; 2] = ["small_cnn", "resnet_mini"];

/// Builds a named architecture. Unknown names return `None`.
pub fn build(arch: &str, num_classes: usize, rng: &mut Rng) -> Option<Network> {
    let conv = |i, o, rng: &mut Rng| Layer::Conv(Conv2d::new(i, o, rng));
    let backbone = match arch {
        "small_cnn" => vec![
            conv(3, 8, rng),
            Layer::Relu,
            Layer::MaxPool2,
            conv(8, 16, rng),
            Layer::Relu,
            Layer::MaxPool2,
            conv(16, 16, rng),
            Layer::Relu,
        ],
        "resnet_mini" => {
            let res = |c, rng: &mut Rng| {
                Layer::Residual(vec![conv(c, c, rng), Layer::Relu, conv(c, c, rng)])
            };
            vec![
                conv(3, 16, rng),
                Layer::Relu,
                Layer::MaxPool2,
                res(16, rng),
                conv(16, 32, rng),
                Layer::Relu,
                Layer::MaxPool2,
                res(32, rng),
            ]
        }
        _ => return None,
    };
    let width = backbone
        .iter()
        .rev()
        .find_map(last_channels)
        .expect("backbone has a convolution");
    Some(Network {
        input_channels: 3,
        backbone,
        hidden: Vec::new(),
        classifier: Dense::new(width, num_classes, rng),
    })
}

fn last_channels(layer: &Layer) -> Option<usize> {
    match layer {
        Layer::Conv(c) => Some(c.out_channels),
        Layer::Residual(body) => body.iter().rev().find_map(last_channels),
        _ => None,
    }
}
