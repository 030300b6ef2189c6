//! Synthetic glyph dataset for tests and demos.
//!
//! Each category is a random stroke pattern; samples are jittered renderings
//! of that pattern. Good enough to train on and to tell categories apart,
//! with no external downloads.

use std::fs;
use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::save_image;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct ToySpec {
    pub categories: usize,
    pub samples_per_category: usize,
    pub resolution: usize,
    pub channels: usize,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            categories: 34,
            samples_per_category: 36,
            resolution: 32,
            channels: 1,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy)]
struct Stroke {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
    thickness: f64,
}

/// Render a glyph dataset under `root/<cat_XXX>/<img_XXX.png>`.
pub fn generate_toy_dataset(root: &Path, spec: &ToySpec) -> Result<()> {
    if spec.resolution % 16 != 0 {
        return Err(Error::Config(format!(
            "toy resolution {} must be a multiple of 16",
            spec.resolution
        )));
    }
    fs::create_dir_all(root).map_err(|e| Error::io(root.display().to_string(), e))?;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    for c in 0..spec.categories {
        let dir = root.join(format!("cat_{c:03}"));
        fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let strokes = glyph_prototype(&mut rng, spec.resolution);
        for s in 0..spec.samples_per_category {
            let img = render_sample(&strokes, spec, &mut rng);
            let path = dir.join(format!("img_{s:03}.png"));
            save_image(&img.view(), &path)?;
        }
    }
    Ok(())
}

fn glyph_prototype(rng: &mut ChaCha20Rng, res: usize) -> Vec<Stroke> {
    let n = rng.gen_range(3..=5);
    let r = res as f64;
    (0..n)
        .map(|_| Stroke {
            x0: rng.gen_range(0.15 * r..0.85 * r),
            y0: rng.gen_range(0.15 * r..0.85 * r),
            x1: rng.gen_range(0.15 * r..0.85 * r),
            y1: rng.gen_range(0.15 * r..0.85 * r),
            thickness: rng.gen_range(0.9..1.8) * r / 32.0,
        })
        .collect()
}

fn render_sample(strokes: &[Stroke], spec: &ToySpec, rng: &mut ChaCha20Rng) -> Array3<f64> {
    let res = spec.resolution;
    let r = res as f64;
    let dx = rng.gen_range(-0.06 * r..0.06 * r);
    let dy = rng.gen_range(-0.06 * r..0.06 * r);
    let gain = rng.gen_range(0.75..1.0);
    let mut canvas = ndarray::Array2::<f64>::zeros((res, res));
    for s in strokes {
        let jx0 = s.x0 + dx + rng.gen_range(-0.04 * r..0.04 * r);
        let jy0 = s.y0 + dy + rng.gen_range(-0.04 * r..0.04 * r);
        let jx1 = s.x1 + dx + rng.gen_range(-0.04 * r..0.04 * r);
        let jy1 = s.y1 + dy + rng.gen_range(-0.04 * r..0.04 * r);
        draw_stroke(&mut canvas, jx0, jy0, jx1, jy1, s.thickness, gain);
    }
    // Light additive noise keeps samples within a category distinct.
    for v in canvas.iter_mut() {
        *v = (*v + rng.gen_range(0.0..0.03)).min(1.0);
    }
    let mut img = Array3::<f64>::zeros((spec.channels, res, res));
    for ch in 0..spec.channels {
        let tint = if spec.channels == 1 {
            1.0
        } else {
            0.6 + 0.4 * ((ch as f64) / 2.0)
        };
        for y in 0..res {
            for x in 0..res {
                img[(ch, y, x)] = (canvas[(y, x)] * tint) * 2.0 - 1.0;
            }
        }
    }
    img
}

fn draw_stroke(
    canvas: &mut ndarray::Array2<f64>,
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
    thickness: f64,
    gain: f64,
) {
    let res = canvas.nrows();
    let len = ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt().max(1.0);
    let steps = (len * 3.0).ceil() as usize;
    let sigma2 = 2.0 * (thickness * 0.5).powi(2);
    let reach = (thickness * 1.5).ceil() as isize;
    for t in 0..=steps {
        let f = t as f64 / steps as f64;
        let px = x0 + f * (x1 - x0);
        let py = y0 + f * (y1 - y0);
        let cx = px.round() as isize;
        let cy = py.round() as isize;
        for yy in cy - reach..=cy + reach {
            for xx in cx - reach..=cx + reach {
                if yy < 0 || xx < 0 || yy >= res as isize || xx >= res as isize {
                    continue;
                }
                let d2 = (xx as f64 - px).powi(2) + (yy as f64 - py).powi(2);
                let v = gain * (-d2 / sigma2).exp();
                let cell = &mut canvas[(yy as usize, xx as usize)];
                if v > *cell {
                    *cell = v;
                }
            }
        }
    }
}
