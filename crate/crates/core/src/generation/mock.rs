//! Offline procedural stand-in for a text-to-image model.
//!
//! Each image is a skin-colored background whose brightness follows the
//! Fitzpatrick grade, per-pixel Gaussian noise drawn from the request seed,
//! and a class pattern: a tinted sinusoidal grating whose hue, orientation
//! and frequency are derived from the condition label. The grating's
//! amplitude is scaled by `class_signal_strength`, so at 0 the class cannot
//! be recovered from the pixels at all.

use std::io::Cursor;

use image::{ImageFormat, Rgb, RgbImage};

use super::{GenerationBackend, GenerationError, GenerationRequest};
use crate::seed::{derive_seed, Rng};

const NOISE_STD: f64 = 10.0;
const PATTERN_AMPLITUDE: f64 = 70.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MockBackend {
    class_signal_strength: f64,
}

pub fn mock_backend(class_signal_strength: f64) -> MockBackend {
    MockBackend {
        class_signal_strength: class_signal_strength.clamp(0.0, 1.0),
    }
}

/// Label-keyed pattern parameters.
#[derive(Debug, Clone, Copy)]
struct ClassPattern {
    tint: [f64; 3],
    direction: (f64, f64),
    cycles: f64,
}

impl ClassPattern {
    fn for_label(label: &str) -> Self {
        let mut rng = Rng::new(derive_seed(0, &["mock-class", label]));
        let hue = rng.unit() * std::f64::consts::TAU;
        // unit chroma vector orthogonal to gray (1,1,1)
        let u1 = [1.0 / 2f64.sqrt(), -1.0 / 2f64.sqrt(), 0.0];
        let u2 = [1.0 / 6f64.sqrt(), 1.0 / 6f64.sqrt(), -2.0 / 6f64.sqrt()];
        let mut tint = [0.0; 3];
        for c in 0..3 {
            tint[c] = hue.cos() * u1[c] + hue.sin() * u2[c];
        }
        let angle = rng.unit() * std::f64::consts::PI;
        ClassPattern {
            tint,
            direction: (angle.cos(), angle.sin()),
            cycles: 2.0 + 4.0 * rng.unit(),
        }
    }
}

fn tone_base(ordinal: Option<usize>) -> [f64; 3] {
    let l = 230.0 - 28.0 * ordinal.unwrap_or(2) as f64;
    [l, l * 0.82, l * 0.70]
}

impl MockBackend {
    pub fn strength(&self) -> f64 {
        self.class_signal_strength
    }

    pub fn render(&self, request: &GenerationRequest) -> RgbImage {
        let inst = &request.instantiation;
        let pattern = ClassPattern::for_label(&inst.condition_label);
        let base = tone_base(Some(inst.slots.skin_tone.grade.ordinal()));
        let mut rng = Rng::new(derive_seed(request.seed, &["mock-image", &inst.rendered]));
        let phase = rng.unit() * std::f64::consts::TAU;
        let (w, h) = (request.width, request.height);
        let scale = 1.0 / w.max(h) as f64;
        let amp = self.class_signal_strength * PATTERN_AMPLITUDE;
        let mut img = RgbImage::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let t = (x as f64 * pattern.direction.0 + y as f64 * pattern.direction.1) * scale;
                let p = 0.5 + 0.5 * (std::f64::consts::TAU * pattern.cycles * t + phase).sin();
                let mut px = [0u8; 3];
                for c in 0..3 {
                    let v = base[c] + NOISE_STD * rng.normal() + amp * pattern.tint[c] * p;
                    px[c] = v.round().clamp(0.0, 255.0) as u8;
                }
                img.put_pixel(x, y, Rgb(px));
            }
        }
        img
    }
}

impl GenerationBackend for MockBackend {
    fn id(&self) -> String {
        format!("mock(strength={})", self.class_signal_strength)
    }

    fn generate(&self, request: &GenerationRequest) -> Result<Vec<u8>, GenerationError> {
        let img = self.render(request);
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, ImageFormat::Png)
            .map_err(|e| GenerationError::DecodeError(e.to_string()))?;
        Ok(out.into_inner())
    }
}

#[cfg(test)]
mod tests {
    use super::super::backend_generate;
    use super::*;
    use crate::prompt::{enumerate_instantiations, ConditionSpec, FitzpatrickGrade, SkinTone};

    fn inst(label: &str) -> crate::prompt::PromptInstantiation {
        let spec = ConditionSpec {
            label: label.into(),
            display_name: label.into(),
            visual_cues_pool: vec!["bumps".into()],
            sensation_pool: vec![],
            location_pool: vec!["on the arm".into()],
            tones: vec![SkinTone::default_for(FitzpatrickGrade::III)],
        };
        enumerate_instantiations(&spec, 1, 0).remove(0)
    }

    #[test]
    fn same_request_same_bytes() {
        let b = mock_backend(0.7);
        let req = GenerationRequest::new(inst("warts"), 11).with_size(48, 40);
        let a = backend_generate(&b, &req).unwrap();
        assert_eq!(a, backend_generate(&b, &req).unwrap());
        let img = image::load_from_memory(&a).unwrap();
        assert_eq!((img.width(), img.height()), (48, 40));
    }

    #[test]
    fn seeds_change_pixels() {
        let b = mock_backend(1.0);
        let one = b.render(&GenerationRequest::new(inst("warts"), 1).with_size(32, 32));
        let two = b.render(&GenerationRequest::new(inst("warts"), 2).with_size(32, 32));
        assert!(one.pixels().zip(two.pixels()).any(|(a, b)| a != b));
    }

    #[test]
    fn zero_strength_ignores_label_given_same_prompt_and_seed() {
        let b = mock_backend(0.0);
        let mut a = inst("warts");
        let mut c = inst("scabies");
        // same rendered prompt, different class
        c.rendered = a.rendered.clone();
        a.slots.skin_tone = c.slots.skin_tone.clone();
        let ia = b.render(&GenerationRequest::new(a, 5).with_size(32, 32));
        let ic = b.render(&GenerationRequest::new(c, 5).with_size(32, 32));
        assert_eq!(ia, ic);
    }
}
