//! Class-conditioned textured blobs on a cluttered background.
//!
//! Each class owns a color, a grating orientation and a grating frequency.
//! A sample places a Gaussian blob carrying that textured color at a jittered
//! position over a random color ramp plus pixel noise, so the class evidence
//! sits in a handful of foreground patches while the rest of the image is
//! class-agnostic.

use std::f64::consts::PI;

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Dataset;

#[derive(Debug, Clone, Copy)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    pub seed: u64,
}

struct ClassStyle {
    color: Vec<f64>,
    orientation: f64,
    frequency: f64,
}

fn class_style(class: usize, num_classes: usize, channels: usize) -> ClassStyle {
    let hue = 2.0 * PI * class as f64 / num_classes as f64;
    let brightness = if class.is_multiple_of(2) { 0.35 } else { -0.35 };
    let color = (0..channels)
        .map(|ch| 0.9 * (hue - 2.0 * PI * ch as f64 / channels.max(3) as f64).cos() + brightness)
        .collect();
    ClassStyle {
        color,
        orientation: PI * ((class * 3) % num_classes) as f64 / num_classes as f64,
        frequency: 1.0 + (class % 3) as f64,
    }
}

/// Generates `num_classes * samples_per_class` images, ordered class-major.
pub fn generate(spec: &SyntheticSpec) -> Dataset {
    let SyntheticSpec {
        num_classes,
        samples_per_class,
        image_size: s,
        channels,
        seed,
    } = *spec;
    let n = num_classes * samples_per_class;
    let mut images = Array4::<f32>::zeros((n, s, s, channels));
    let mut labels = Vec::with_capacity(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.25).expect("valid std");
    let size = s as f64;

    for class in 0..num_classes {
        let style = class_style(class, num_classes, channels);
        let (sin_o, cos_o) = style.orientation.sin_cos();
        for k in 0..samples_per_class {
            let idx = class * samples_per_class + k;
            labels.push(class);
            let jitter = size / 6.0;
            let cy = size / 2.0 + rng.random_range(-jitter..=jitter);
            let cx = size / 2.0 + rng.random_range(-jitter..=jitter);
            let radius = size / 5.0 * rng.random_range(0.9..1.1);
            let amplitude = rng.random_range(0.85..1.15);
            let phase = rng.random_range(0.0..2.0 * PI);
            let ramp_angle = rng.random_range(0.0..2.0 * PI);
            let ramp_color: Vec<f64> = (0..channels).map(|_| rng.random_range(-0.3..0.3)).collect();
            let (ramp_sin, ramp_cos) = ramp_angle.sin_cos();
            for y in 0..s {
                for x in 0..s {
                    let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
                    let r2 = (fy - cy).powi(2) + (fx - cx).powi(2);
                    let envelope = amplitude * (-r2 / (2.0 * radius * radius)).exp();
                    let along = (fx * cos_o + fy * sin_o) / size;
                    let texture = 0.65 + 0.35 * (2.0 * PI * style.frequency * along + phase).cos();
                    let ramp = ((fx - size / 2.0) * ramp_cos + (fy - size / 2.0) * ramp_sin) / size;
                    for ch in 0..channels {
                        let v = ramp * ramp_color[ch] * 2.0
                            + envelope * style.color[ch] * texture
                            + noise.sample(&mut rng);
                        images[[idx, y, x, ch]] = v as f32;
                    }
                }
            }
        }
    }
    Dataset {
        images,
        labels,
        num_classes,
    }
}
