//! Grad-CAM saliency and overlay rendering.

use image::{imageops::FilterType, DynamicImage, Rgb, RgbImage};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::data::{preprocess, PreprocessConfig};
use crate::nn::{argmax, Network, Tensor3};
use crate::training::TrainedModel;

/// Peak opacity of the heatmap in overlays.
pub const OVERLAY_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CamMap {
    /// (height, width) of the preprocessed input, values in [0, 1].
    pub heatmap: Array2<f64>,
    pub target_class: String,
    /// Manifest path of the source image, when known.
    pub input_ref: Option<String>,
    pub channel_weights: Vec<f64>,
}

/// Channel weights (spatial mean of each gradient map) and the rectified,
/// max-normalized weighted sum of the feature maps, at feature resolution.
pub fn cam_from_features(features: &Tensor3, gradients: &Tensor3) -> (Vec<f64>, Array2<f64>) {
    let (c, h, w) = features.dim();
    let weights: Vec<f64> = (0..c)
        .map(|k| gradients.index_axis(ndarray::Axis(0), k).sum() / (h * w) as f64)
        .collect();
    let mut map = Array2::<f64>::zeros((h, w));
    for (k, a) in weights.iter().enumerate() {
        map.scaled_add(*a, &features.index_axis(ndarray::Axis(0), k));
    }
    map.mapv_inplace(|v| v.max(0.0));
    (weights, max_normalize(map))
}

fn max_normalize(mut map: Array2<f64>) -> Array2<f64> {
    let max = map.fold(0.0f64, |a, &b| a.max(b));
    if max > 0.0 {
        map.mapv_inplace(|v| v / max);
    }
    map
}

/// Bilinear resampling with half-pixel centers and edge clamping.
pub fn upsample_bilinear(map: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = map.dim();
    let coord = |dst: usize, n_in: usize, n_out: usize| {
        let src = ((dst as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, src - lo as f64)
    };
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let (y0, y1, fy) = coord(y, h, out_h);
        let (x0, x1, fx) = coord(x, w, out_w);
        let top = map[[y0, x0]] * (1.0 - fx) + map[[y0, x1]] * fx;
        let bottom = map[[y1, x0]] * (1.0 - fx) + map[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Grad-CAM of `class` for a preprocessed input; returns channel weights and
/// the heatmap at input resolution.
pub fn grad_cam_tensor(network: &Network, x: &Tensor3, class: usize) -> (Vec<f64>, Array2<f64>) {
    let trace = network.forward(x);
    let mut onehot = Array1::zeros(network.num_classes());
    onehot[class] = 1.0;
    let grads = network.feature_gradient(&trace, &onehot);
    let (weights, map) = cam_from_features(&trace.features, &grads);
    let (_, in_h, in_w) = x.dim();
    let up = upsample_bilinear(&map, in_h, in_w);
    (weights, max_normalize(up))
}

/// Grad-CAM for an image; `target_class` defaults to the predicted class.
pub fn grad_cam(
    model: &TrainedModel,
    image: &DynamicImage,
    config: &PreprocessConfig,
    target_class: Option<&str>,
) -> Result<CamMap, EvalError> {
    let x = preprocess(image, config)?;
    let class = match target_class {
        Some(label) => model
            .label_index(label)
            .ok_or_else(|| EvalError::UnknownClass(label.to_string()))?,
        None => argmax(&model.predict(&x)),
    };
    let (channel_weights, heatmap) = grad_cam_tensor(&model.network, &x, class);
    Ok(CamMap {
        heatmap,
        target_class: model.labels[class].clone(),
        input_ref: None,
        channel_weights,
    })
}

/// Jet colormap.
pub fn colormap(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    let f = |c: f64| (1.5 - (4.0 * v - c).abs()).clamp(0.0, 1.0);
    [f(3.0), f(2.0), f(1.0)]
}

/// Blends the heatmap over the image with per-pixel opacity
/// `OVERLAY_ALPHA * cam`, so zero saliency leaves a pixel untouched.
pub fn overlay(cam: &CamMap, original: &RgbImage) -> RgbImage {
    let (w, h) = original.dimensions();
    let heat = upsample_bilinear(&cam.heatmap, h as usize, w as usize);
    RgbImage::from_fn(w, h, |x, y| {
        let c = heat[[y as usize, x as usize]].clamp(0.0, 1.0);
        let color = colormap(c);
        let a = OVERLAY_ALPHA * c;
        let p = original.get_pixel(x, y);
        let mut out = [0u8; 3];
        for i in 0..3 {
            out[i] = (p[i] as f64 * (1.0 - a) + 255.0 * color[i] * a).round().clamp(0.0, 255.0) as u8;
        }
        Rgb(out)
    })
}

/// `<record-stem>__cam_<class>.png`
pub fn overlay_file_name(record_stem: &str, class: &str) -> String {
    format!("{record_stem}__cam_{class}.png")
}

/// Side-by-side panel: the original followed by each overlay, all scaled to
/// the original's height.
pub fn cam_panel(original: &RgbImage, overlays: &[RgbImage]) -> RgbImage {
    let h = original.height();
    let tiles: Vec<RgbImage> = std::iter::once(original.clone())
        .chain(overlays.iter().map(|o| {
            if o.height() == h {
                o.clone()
            } else {
                let w = (o.width() as u64 * h as u64 / o.height().max(1) as u64).max(1) as u32;
                image::imageops::resize(o, w, h, FilterType::Triangle)
            }
        }))
        .collect();
    let total: u32 = tiles.iter().map(|t| t.width()).sum();
    let mut panel = RgbImage::new(total, h);
    let mut x0 = 0;
    for t in &tiles {
        image::imageops::replace(&mut panel, t, x0 as i64, 0);
        x0 += t.width();
    }
    panel
}
