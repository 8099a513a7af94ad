//! Synthetic nodule patches with known generating parameters.
//!
//! Every attribute mean is a fixed monotone function of one (or two) render
//! parameters, and malignancy is driven by size, spiculation and margin
//! blur, so all labels are recoverable from the image.

use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{NoduleSample, SampleLabels, IMAGE_SIZE};
use crate::numerics::Tensor;

const RADIUS: (f64, f64) = (2.5, 9.0);
const MAX_ELONGATION: f64 = 0.55;
const BLUR: (f64, f64) = (0.3, 2.0);
const MAX_LOBE: f64 = 0.35;
const MAX_SPIKES: u32 = 4;
const DENSITY: (f64, f64) = (0.3, 1.0);
const LOBE_FREQ: f64 = 3.0;
const RATER_NOISE: f64 = 0.6;

/// Render parameters of one synthetic nodule.
#[derive(Debug, Clone, PartialEq)]
pub struct NoduleParams {
    pub radius: f64,
    pub elongation: f64,
    pub rotation: f64,
    pub blur: f64,
    pub lobe_amplitude: f64,
    pub lobe_phase: f64,
    pub spikes: u32,
    pub spike_phase: f64,
    /// Mean nodule intensity; solid nodules are dense.
    pub density: f64,
    /// Fraction of the nodule occupied by a bright calcified core, 0 if none.
    pub calcification: f64,
    /// Relative size of an air-filled cavity, 0 if none.
    pub cavity: f64,
    pub offset: (f64, f64),
}

fn unit(v: f64, (lo, hi): (f64, f64)) -> f64 {
    ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
}

impl NoduleParams {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let lobe_amplitude = if rng.gen_bool(0.5) { 0.0 } else { rng.gen_range(0.0..MAX_LOBE) };
        let calcification = if rng.gen_bool(0.8) { 0.0 } else { rng.gen_range(0.2..1.0) };
        let cavity = if rng.gen_bool(0.85) { 0.0 } else { rng.gen_range(0.3..1.0) };
        Self {
            radius: rng.gen_range(RADIUS.0..RADIUS.1),
            elongation: rng.gen_range(0.0..MAX_ELONGATION),
            rotation: rng.gen_range(0.0..PI),
            blur: rng.gen_range(BLUR.0..BLUR.1),
            lobe_amplitude,
            lobe_phase: rng.gen_range(0.0..2.0 * PI),
            spikes: rng.gen_range(0..=MAX_SPIKES),
            spike_phase: rng.gen_range(0.0..2.0 * PI),
            density: rng.gen_range(DENSITY.0..DENSITY.1),
            calcification,
            cavity,
            offset: (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)),
        }
    }

    /// Attribute means in LIDC schema order.
    pub fn attribute_means(&self) -> Vec<f64> {
        let size = unit(self.radius, RADIUS);
        let subtlety = 1.0 + 4.0 * (0.5 * unit(self.density, DENSITY) + 0.5 * size);
        let internal = 1.0 + 3.0 * self.cavity;
        let calcification = if self.calcification > 0.0 {
            6.0 - 5.0 * self.calcification
        } else {
            6.0
        };
        let sphericity = 5.0 - 4.0 * self.elongation / MAX_ELONGATION;
        let margin = 5.0 - 4.0 * unit(self.blur, BLUR);
        let lobulation = 1.0 + 4.0 * self.lobe_amplitude / MAX_LOBE;
        let spiculation = 1.0 + self.spikes as f64;
        let texture = 1.0 + 4.0 * unit(self.density, DENSITY);
        vec![
            subtlety,
            internal,
            calcification,
            sphericity,
            margin,
            lobulation,
            spiculation,
            texture,
        ]
    }

    /// Noise-free malignancy score in `[1, 5]`.
    pub fn latent_malignancy(&self) -> f64 {
        let size = unit(self.radius, RADIUS);
        let spic = self.spikes as f64 / MAX_SPIKES as f64;
        let blur = unit(self.blur, BLUR);
        1.0 + 4.0 * (0.45 * size + 0.35 * spic + 0.2 * blur)
    }

    /// Renders `(image, mask)` on the stored 32x32 grid.
    pub fn render<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f32>, Vec<f32>) {
        let n = IMAGE_SIZE;
        let centre = (n as f64 / 2.0 + self.offset.0, n as f64 / 2.0 + self.offset.1);
        let (a, b) = (self.radius, self.radius * (1.0 - self.elongation));
        let r_eff = (a * b).sqrt();
        let (sin_r, cos_r) = self.rotation.sin_cos();
        let bg = Normal::new(0.0, 0.03).expect("valid sigma");
        let grain = Normal::new(0.0, 1.0).expect("valid sigma");
        let spike_len = 0.9 * self.radius + 2.0;
        let mut image = vec![0.0f32; n * n];
        let mut mask = vec![0.0f32; n * n];
        for y in 0..n {
            for x in 0..n {
                let (dx, dy) = (x as f64 + 0.5 - centre.0, y as f64 + 0.5 - centre.1);
                let (u, v) = (dx * cos_r + dy * sin_r, -dx * sin_r + dy * cos_r);
                let rho = ((u / a).powi(2) + (v / b).powi(2)).sqrt();
                let theta = v.atan2(u);
                let boundary = 1.0 + self.lobe_amplitude * (LOBE_FREQ * theta + self.lobe_phase).cos();
                let signed = (boundary - rho) * r_eff;
                let body = 1.0 / (1.0 + (-signed / self.blur).exp());
                let mut inside = signed > 0.0;

                let dist = (dx * dx + dy * dy).sqrt();
                let mut spike = 0.0f64;
                for k in 0..self.spikes {
                    let ang = self.spike_phase + 2.0 * PI * k as f64 / self.spikes as f64;
                    let (s, c) = ang.sin_cos();
                    let along = dx * c + dy * s;
                    let across = (-dx * s + dy * c).abs();
                    let reach = r_eff + spike_len;
                    if along > 0.0 && along < reach {
                        let width = 0.9 * (1.0 - along / reach) + 0.25;
                        if across < width {
                            spike = spike.max(1.0 - across / width);
                            inside = true;
                        }
                    }
                }

                let texture = 0.15 * (1.0 - self.density) * grain.sample(rng);
                let mut val = body.max(spike) * (self.density + texture);
                let core = dist / r_eff.max(1e-6);
                if self.calcification > 0.0 && core < 0.55 * self.calcification {
                    val = 1.0;
                }
                if self.cavity > 0.0 && core < 0.45 * self.cavity {
                    val *= 0.1;
                }
                let px = 0.08 + val + bg.sample(rng);
                image[y * n + x] = px.clamp(0.0, 1.0) as f32;
                mask[y * n + x] = if inside { 1.0 } else { 0.0 };
            }
        }
        (image, mask)
    }
}

/// Simulated rater scores around `latent`: returns `(mean, std, n_raters)`.
/// Redraws until the mean is not exactly 3.
fn rate<R: Rng + ?Sized>(latent: f64, rng: &mut R) -> (f64, f64, u32) {
    let noise = Normal::new(0.0, RATER_NOISE).expect("valid sigma");
    loop {
        let n_raters = if rng.gen_bool(0.5) { 3 } else { 4 };
        let scores: Vec<f64> = (0..n_raters)
            .map(|_| (latent + noise.sample(rng)).round().clamp(1.0, 5.0))
            .collect();
        let mean = scores.iter().sum::<f64>() / n_raters as f64;
        if mean == 3.0 {
            continue;
        }
        let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n_raters as f64;
        return (mean, var.sqrt(), n_raters);
    }
}

/// Generates `n` synthetic samples. Same `seed`, same bytes.
pub fn synth_generate(n: usize, seed: u64) -> Vec<NoduleSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let params = NoduleParams::sample(&mut rng);
            let (image, mask) = params.render(&mut rng);
            let (mal_mean, mal_std, n_raters) = rate(params.latent_malignancy(), &mut rng);
            NoduleSample {
                labels: SampleLabels {
                    id: format!("synth-{i:05}"),
                    mal_mean,
                    mal_std,
                    n_raters,
                    attr_means: params.attribute_means(),
                    b: 0,
                },
                image: Tensor::from_vec(&[1, IMAGE_SIZE, IMAGE_SIZE], image).expect("rendered plane"),
                mask: Tensor::from_vec(&[1, IMAGE_SIZE, IMAGE_SIZE], mask).expect("rendered plane"),
            }
        })
        .collect()
}
