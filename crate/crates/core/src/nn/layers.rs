use ndarray::{s, Array1, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::seed::Rng;

/// Single-sample activation, laid out (channels, height, width).
pub type Tensor3 = Array3<f64>;

/// 3x3 convolution, stride 1, zero padding 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    /// (out_channels, in_channels * 9)
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

const K: usize = 3;

impl Conv2d {
    pub fn new(in_channels: usize, out_channels: usize, rng: &mut Rng) -> Self {
        let fan_in = (in_channels * K * K) as f64;
        let std = (2.0 / fan_in).sqrt();
        let weight = Array2::from_shape_fn((out_channels, in_channels * K * K), |_| rng.normal() * std);
        Conv2d {
            in_channels,
            out_channels,
            weight,
            bias: Array1::zeros(out_channels),
        }
    }

    fn im2col(&self, x: &Tensor3) -> Array2<f64> {
        let (c, h, w) = x.dim();
        let mut cols = Array2::<f64>::zeros((c * K * K, h * w));
        for ci in 0..c {
            for ky in 0..K {
                for kx in 0..K {
                    let row = ci * K * K + ky * K + kx;
                    let mut dst = cols.row_mut(row);
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for xx in 0..w {
                            let sx = xx as isize + kx as isize - 1;
                            if sx >= 0 && sx < w as isize {
                                dst[y * w + xx] = x[[ci, sy as usize, sx as usize]];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &Array2<f64>, h: usize, w: usize) -> Tensor3 {
        let mut out = Tensor3::zeros((self.in_channels, h, w));
        for ci in 0..self.in_channels {
            for ky in 0..K {
                for kx in 0..K {
                    let src = cols.row(ci * K * K + ky * K + kx);
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for xx in 0..w {
                            let sx = xx as isize + kx as isize - 1;
                            if sx >= 0 && sx < w as isize {
                                out[[ci, sy as usize, sx as usize]] += src[y * w + xx];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward(&self, x: &Tensor3) -> (Tensor3, Array2<f64>) {
        let (_, h, w) = x.dim();
        let cols = self.im2col(x);
        let mut y = self.weight.dot(&cols);
        y += &self.bias.view().insert_axis(Axis(1));
        let y = y.into_shape_with_order((self.out_channels, h, w)).expect("conv output shape");
        (y, cols)
    }

    /// Returns the input gradient; accumulates parameter gradients into `gw`, `gb`.
    pub fn backward(
        &self,
        cols: &Array2<f64>,
        dy: &Tensor3,
        gw: &mut [f64],
        gb: &mut [f64],
    ) -> Tensor3 {
        let (_, h, w) = dy.dim();
        let dy2 = dy
            .view()
            .into_shape_with_order((self.out_channels, h * w))
            .expect("contiguous gradient");
        let dw = dy2.dot(&cols.t());
        for (g, d) in gw.iter_mut().zip(dw.iter()) {
            *g += d;
        }
        for (o, g) in gb.iter_mut().enumerate() {
            *g += dy2.row(o).sum();
        }
        let dcols = self.weight.t().dot(&dy2);
        self.col2im(&dcols, h, w)
    }
}

/// Fully connected layer `y = W x + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// (outputs, inputs)
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn new(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        let std = (1.0 / inputs as f64).sqrt();
        Dense {
            weight: Array2::from_shape_fn((outputs, inputs), |_| rng.normal() * std),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: &Array1<f64>) -> Array1<f64> {
        self.weight.dot(x) + &self.bias
    }

    pub fn backward(&self, x: &Array1<f64>, dy: &Array1<f64>, gw: &mut [f64], gb: &mut [f64]) -> Array1<f64> {
        let cols = x.len();
        for (o, d) in dy.iter().enumerate() {
            if *d == 0.0 {
                continue;
            }
            let row = &mut gw[o * cols..(o + 1) * cols];
            for (g, xi) in row.iter_mut().zip(x.iter()) {
                *g += d * xi;
            }
            gb[o] += d;
        }
        self.weight.t().dot(dy)
    }
}

pub fn relu(x: &Tensor3) -> Tensor3 {
    x.mapv(|v| v.max(0.0))
}

pub fn relu_backward(out: &Tensor3, dy: &Tensor3) -> Tensor3 {
    let mut d = dy.clone();
    d.zip_mut_with(out, |g, o| {
        if *o <= 0.0 {
            *g = 0.0
        }
    });
    d
}

/// 2x2 max pooling, stride 2. Returns the output and the flat argmax of each window.
pub fn max_pool2(x: &Tensor3) -> (Tensor3, Vec<usize>) {
    let (c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor3::zeros((c, oh, ow));
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let (sy, sx) = (2 * y + dy, 2 * xx + dx);
                    let v = x[[ci, sy, sx]];
                    if v > best {
                        best = v;
                        best_i = (ci * h + sy) * w + sx;
                    }
                }
                out[[ci, y, xx]] = best;
                arg.push(best_i);
            }
        }
    }
    (out, arg)
}

pub fn max_pool2_backward(arg: &[usize], in_shape: (usize, usize, usize), dy: &Tensor3) -> Tensor3 {
    let mut dx = Tensor3::zeros(in_shape);
    let flat = dx.as_slice_mut().expect("fresh array is contiguous");
    for (i, g) in arg.iter().zip(dy.iter()) {
        flat[*i] += g;
    }
    dx
}

pub fn global_avg_pool(x: &Tensor3) -> Array1<f64> {
    let (_, h, w) = x.dim();
    x.sum_axis(Axis(2)).sum_axis(Axis(1)) / (h * w) as f64
}

pub fn global_avg_pool_backward(shape: (usize, usize, usize), dy: &Array1<f64>) -> Tensor3 {
    let (c, h, w) = shape;
    let mut dx = Tensor3::zeros(shape);
    let scale = 1.0 / (h * w) as f64;
    for ci in 0..c {
        dx.slice_mut(s![ci, .., ..]).fill(dy[ci] * scale);
    }
    dx
}

/// Mean cross-entropy of softmax(logits) against `target`, with its gradient.
pub fn softmax_cross_entropy(logits: &Array1<f64>, target: usize) -> (f64, Array1<f64>) {
    let probs = softmax(logits);
    let loss = -probs[target].max(f64::MIN_POSITIVE).ln();
    let mut grad = probs;
    grad[target] -= 1.0;
    (loss, grad)
}

pub fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exp = logits.mapv(|v| (v - max).exp());
    let sum = exp.sum();
    exp / sum
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &Array1<f64>) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
