//! Deterministic synthetic shapes dataset: rectangles (odd classes) and circles
//! (even classes) on a striped, noisy background. Each sample is a pure function
//! of `(seed, index)`.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::sat::SatTensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCfg {
    /// Class count including background (class 0).
    pub classes: usize,
    pub image_size: usize,
    pub shapes_min: usize,
    pub shapes_max: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthCfg {
    fn default() -> Self {
        SynthCfg {
            classes: 3,
            image_size: 64,
            shapes_min: 1,
            shapes_max: 3,
            noise_std: 0.03,
            seed: 0,
        }
    }
}

impl SynthCfg {
    pub fn validate(&self) -> Result<()> {
        if !(2..=255).contains(&self.classes) {
            return Err(Error::config(format!("classes must be in 2..=255, got {}", self.classes)));
        }
        if self.image_size < 8 || !self.image_size.is_multiple_of(8) {
            return Err(Error::config(format!(
                "image size must be a positive multiple of 8, got {}",
                self.image_size
            )));
        }
        if self.shapes_min > self.shapes_max {
            return Err(Error::config(format!(
                "shape range {}..={} is empty",
                self.shapes_min, self.shapes_max
            )));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::config(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        Ok(())
    }
}

/// One generated sample: `3 x S x S` planar RGB in `[0, 1]` and an `S x S` label map.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Vec<f32>,
    pub labels: Vec<u8>,
}

/// Shape colour. With two foreground classes the shape alone decides the class and
/// the colour is random; with more, hue bands keep classes that share a shape apart.
fn shape_colour(rng: &mut ChaCha8Rng, class: usize, classes: usize) -> [f64; 3] {
    if classes <= 3 {
        return [rng.gen(), rng.gen(), rng.gen()];
    }
    let hue = (class - 1) as f64 / (classes - 1) as f64 + rng.gen_range(-0.3..0.3) / (classes - 1) as f64;
    let ch = |o: f64| 0.5 + 0.45 * (2.0 * PI * (hue + o)).cos();
    [ch(0.0), ch(1.0 / 3.0), ch(2.0 / 3.0)]
}

pub fn generate_sample(cfg: &SynthCfg, index: u64) -> Sample {
    let s = cfg.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);

    let base: [f64; 3] = [rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8)];
    let freq = rng.gen_range(0.15..0.6);
    let angle = rng.gen_range(0.0..PI);
    let (ca, sa) = (angle.cos(), angle.sin());
    let mut rgb = vec![[0.0f64; 3]; s * s];
    for y in 0..s {
        for x in 0..s {
            let t = 0.08 * (freq * (x as f64 * ca + y as f64 * sa)).sin();
            rgb[y * s + x] = base.map(|b| b + t);
        }
    }

    let mut labels = vec![0u8; s * s];
    let n_shapes = rng.gen_range(cfg.shapes_min..=cfg.shapes_max);
    for _ in 0..n_shapes {
        let class = rng.gen_range(1..cfg.classes);
        let colour = shape_colour(&mut rng, class, cfg.classes);
        let inside: Box<dyn Fn(usize, usize) -> bool> = if class % 2 == 1 {
            let w = rng.gen_range(s / 5..=s / 2);
            let h = rng.gen_range(s / 5..=s / 2);
            let x0 = rng.gen_range(0..=s - w);
            let y0 = rng.gen_range(0..=s - h);
            Box::new(move |x, y| x >= x0 && x < x0 + w && y >= y0 && y < y0 + h)
        } else {
            let r = rng.gen_range(s / 10..=s / 4) as f64;
            let cx = rng.gen_range(r..s as f64 - r);
            let cy = rng.gen_range(r..s as f64 - r);
            Box::new(move |x, y| {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                dx * dx + dy * dy <= r * r
            })
        };
        for y in 0..s {
            for x in 0..s {
                if inside(x, y) {
                    rgb[y * s + x] = colour;
                    labels[y * s + x] = class as u8;
                }
            }
        }
    }

    let mut image = vec![0f32; 3 * s * s];
    for (i, px) in rgb.iter().enumerate() {
        for c in 0..3 {
            let v = px[c] + cfg.noise_std * rng.sample::<f64, _>(StandardNormal);
            image[c * s * s + i] = v.clamp(0.0, 1.0) as f32;
        }
    }
    Sample { image, labels }
}

/// `(C)` presence indicators of one label map.
pub fn presence(labels: &[u8], classes: usize) -> Vec<u8> {
    let mut p = vec![0u8; classes];
    for &l in labels {
        if (l as usize) < classes {
            p[l as usize] = 1;
        }
    }
    p
}

/// Writes `images/`, `labels/`, `presence.sat` and `meta.txt` under `dir`.
pub fn generate_dataset(cfg: &SynthCfg, count: usize, dir: &Path) -> Result<()> {
    cfg.validate()?;
    let s = cfg.image_size;
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("labels"))?;
    let mut pres = Vec::with_capacity(count * cfg.classes);
    for i in 0..count {
        let sample = generate_sample(cfg, i as u64);
        pres.extend(presence(&sample.labels, cfg.classes));
        SatTensor::f32(vec![3, s, s], sample.image).write(&dir.join(format!("images/{i:06}.sat")))?;
        SatTensor::u8(vec![s, s], sample.labels).write(&dir.join(format!("labels/{i:06}.sat")))?;
    }
    SatTensor::u8(vec![count, cfg.classes], pres).write(&dir.join("presence.sat"))?;
    let meta = format!(
        "classes = {}\nsize = {}\nseed = {}\ncount = {}\nshapes_min = {}\nshapes_max = {}\nnoise_std = {}\n",
        cfg.classes, s, cfg.seed, count, cfg.shapes_min, cfg.shapes_max, cfg.noise_std
    );
    fs::write(dir.join("meta.txt"), meta)?;
    Ok(())
}
