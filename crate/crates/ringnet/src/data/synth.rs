//! Synthetic CIFAR-shaped corpus: each class is a fixed smooth color
//! template, each image that template plus its own smooth variation field
//! and white pixel noise. The signal-to-variation ratio is tunable, so
//! class difficulty (and how much training data a task needs) is too.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_for, standard_normal, stream};
use super::{ImageSet, LabeledPool, CIFAR10_CATEGORIES};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: usize,
    /// Amplitude of the class template.
    pub template_strength: f64,
    /// Amplitude of the per-image smooth field.
    pub variation: f64,
    /// Amplitude of per-pixel white noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 10,
            template_strength: 0.35,
            variation: 0.22,
            noise: 0.05,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.classes > CIFAR10_CATEGORIES.len() {
            return Err(Error::Config(format!(
                "classes must lie in 1..={}, got {}",
                CIFAR10_CATEGORIES.len(),
                self.classes
            )));
        }
        for (name, v) in [
            ("template_strength", self.template_strength),
            ("variation", self.variation),
            ("noise", self.noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// A smooth random field: a coarse N(0,1) grid bilinearly upsampled to
/// `side`x`side`, corner-aligned. One channel.
pub(crate) fn smooth_field(rng: &mut ChaCha8Rng, side: usize, coarse: usize) -> Vec<f64> {
    debug_assert!(coarse >= 2 && side >= 2);
    let grid: Vec<f64> = (0..coarse * coarse).map(|_| standard_normal(rng)).collect();
    let scale = (coarse - 1) as f64 / (side - 1) as f64;
    let mut out = Vec::with_capacity(side * side);
    for y in 0..side {
        let fy = y as f64 * scale;
        let y0 = (fy as usize).min(coarse - 2);
        let ty = fy - y0 as f64;
        for x in 0..side {
            let fx = x as f64 * scale;
            let x0 = (fx as usize).min(coarse - 2);
            let tx = fx - x0 as f64;
            let g = |yy: usize, xx: usize| grid[yy * coarse + xx];
            let top = g(y0, x0) * (1.0 - tx) + g(y0, x0 + 1) * tx;
            let bot = g(y0 + 1, x0) * (1.0 - tx) + g(y0 + 1, x0 + 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

const SIDE: usize = 32;
const COARSE: usize = 8;

/// The fixed template for one class: three smooth channel fields.
fn class_template(spec: &SynthSpec, class: usize) -> Vec<f64> {
    let mut rng = rng_for(spec.seed, &[stream::SYNTH_IMAGES, 0, class as u64]);
    let mut t = Vec::with_capacity(3 * SIDE * SIDE);
    for _ in 0..3 {
        t.extend(smooth_field(&mut rng, SIDE, COARSE));
    }
    t
}

fn render_image(spec: &SynthSpec, template: &[f64], rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut field = Vec::with_capacity(3 * SIDE * SIDE);
    for _ in 0..3 {
        field.extend(smooth_field(rng, SIDE, COARSE));
    }
    template
        .iter()
        .zip(&field)
        .map(|(&t, &f)| {
            let v = 0.5
                + spec.template_strength * t
                + spec.variation * f
                + spec.noise * standard_normal(rng);
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect()
}

/// Generate `per_class[c]` images of each class. `split_tag` separates the
/// training pool's random stream from the test pool's.
fn generate_set(spec: &SynthSpec, per_class: &[usize], split_tag: u64) -> Result<ImageSet> {
    let names: Vec<String> =
        CIFAR10_CATEGORIES[..spec.classes].iter().map(|s| s.to_string()).collect();
    let mut set = ImageSet::new(names)?;
    for (c, &n) in per_class.iter().enumerate() {
        let template = class_template(spec, c);
        for j in 0..n {
            let mut rng = rng_for(
                spec.seed,
                &[stream::SYNTH_IMAGES, 1, split_tag, c as u64, j as u64],
            );
            let pixels = render_image(spec, &template, &mut rng);
            set.push(c as u8, &pixels)?;
        }
    }
    Ok(set)
}

/// A full train+test pool with the given per-class counts.
pub fn synth_pool(
    spec: &SynthSpec,
    train_per_class: &[usize],
    test_per_class: &[usize],
) -> Result<LabeledPool> {
    spec.validate()?;
    if train_per_class.len() != spec.classes || test_per_class.len() != spec.classes {
        return Err(Error::Config(format!(
            "per-class count lists must have {} entries",
            spec.classes
        )));
    }
    let train = generate_set(spec, train_per_class, 0)?;
    let test = generate_set(spec, test_per_class, 1)?;
    LabeledPool::merge(train, &test)
}

/// Uniform counts: `n_train` and `n_test` images of every class.
pub fn synth_pool_uniform(spec: &SynthSpec, n_train: usize, n_test: usize) -> Result<LabeledPool> {
    synth_pool(spec, &vec![n_train; spec.classes], &vec![n_test; spec.classes])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::IMAGE_PIXELS;

    #[test]
    fn bilinear_upsample_aligns_corners() {
        // A 2x2 coarse grid upsampled to 4x4 keeps the corner values and
        // interpolates linearly along edges.
        let mut rng = rng_for(1, &[2]);
        let f = smooth_field(&mut rng, 4, 2);
        let mut rng2 = rng_for(1, &[2]);
        let g: Vec<f64> = (0..4).map(|_| standard_normal(&mut rng2)).collect();
        assert!((f[0] - g[0]).abs() < 1e-12); // top-left
        assert!((f[3] - g[1]).abs() < 1e-12); // top-right
        assert!((f[12] - g[2]).abs() < 1e-12); // bottom-left
        assert!((f[15] - g[3]).abs() < 1e-12); // bottom-right
        let expect = g[0] + (g[1] - g[0]) / 3.0;
        assert!((f[1] - expect).abs() < 1e-12, "edge interpolation");
    }

    #[test]
    fn same_seed_same_corpus() {
        let spec = SynthSpec { classes: 3, seed: 42, ..SynthSpec::default() };
        let a = synth_pool_uniform(&spec, 4, 2).unwrap();
        let b = synth_pool_uniform(&spec, 4, 2).unwrap();
        assert_eq!(a.images, b.images);
        let other = SynthSpec { seed: 43, ..spec };
        let c = synth_pool_uniform(&other, 4, 2).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn train_and_test_pools_draw_different_images() {
        let spec = SynthSpec { classes: 2, seed: 7, ..SynthSpec::default() };
        let pool = synth_pool_uniform(&spec, 3, 3).unwrap();
        // Same class and index across splits must still differ.
        let train0 = pool.images.record(0);
        let test0 = pool.images.record(6);
        assert_eq!(train0.label, test0.label);
        assert_ne!(train0.pixels, test0.pixels);
    }

    #[test]
    fn classes_are_separable_by_nearest_template_mean() {
        let spec = SynthSpec { classes: 2, seed: 11, ..SynthSpec::default() };
        let pool = synth_pool_uniform(&spec, 20, 20).unwrap();
        // Mean image per class over the training pool.
        let mut means = vec![vec![0.0f64; IMAGE_PIXELS]; 2];
        for c in 0..2u8 {
            let ids = pool.train_ids_with_label(c);
            for &id in &ids {
                for (m, &b) in means[c as usize].iter_mut().zip(pool.images.record(id).pixels) {
                    *m += b as f64 / ids.len() as f64;
                }
            }
        }
        // Classify held-out images by nearest mean.
        let mut wrong = 0;
        let mut total = 0;
        for c in 0..2u8 {
            for id in pool.test_ids_with_label(c) {
                let px = pool.images.record(id).pixels;
                let dist = |m: &[f64]| -> f64 {
                    px.iter().zip(m).map(|(&b, &v)| (b as f64 - v).powi(2)).sum()
                };
                let pred = if dist(&means[0]) <= dist(&means[1]) { 0 } else { 1 };
                wrong += (pred != c) as usize;
                total += 1;
            }
        }
        let err = wrong as f64 / total as f64;
        assert!(err < 0.15, "templates too weak to classify: error {err}");
    }

    #[test]
    fn infeasible_specs_rejected() {
        let mut spec = SynthSpec::default();
        spec.classes = 0;
        assert!(spec.validate().is_err());
        spec = SynthSpec::default();
        spec.noise = -1.0;
        assert!(spec.validate().is_err());
        let ok = SynthSpec { classes: 2, ..SynthSpec::default() };
        assert!(synth_pool(&ok, &[1, 1, 1], &[1, 1]).is_err(), "count list length");
    }
}
