//! Dataset manifests, category splits, and episodic sampling.
//!
//! On disk a dataset is `root/<category_name>/<image files>`. A scan produces
//! a [`DatasetManifest`] (categories sorted by name, per-category file lists
//! sorted and optionally capped); a seeded [`split_categories`] call assigns
//! categories to the seen / validation-seen / unseen roles. Episodes are
//! sampled from a [`LoadedDataset`], which holds every decoded image of the
//! requested categories in memory.

pub mod synth;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array3;
use rand::seq::index::sample as index_sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One decoded, normalized image.
#[derive(Debug, Clone)]
pub struct ImageSample {
    /// (channels, height, width), values in [-1, 1].
    pub pixels: Arc<Array3<f64>>,
    pub category_id: usize,
    pub source_path: String,
}

impl ImageSample {
    pub fn new(pixels: Array3<f64>, category_id: usize, source_path: String) -> Result<Self> {
        validate_pixels(&pixels)?;
        Ok(ImageSample {
            pixels: Arc::new(pixels),
            category_id,
            source_path,
        })
    }
}

/// Pixels must be finite, inside [-1, 1], with spatial dims a multiple of 16
/// (four exact stride-2 halvings).
pub fn validate_pixels(pixels: &Array3<f64>) -> Result<()> {
    let (_, h, w) = pixels.dim();
    if h % 16 != 0 || w % 16 != 0 {
        return Err(Error::Data(format!(
            "image dims {h}x{w} are not multiples of 16"
        )));
    }
    if !pixels.iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v)) {
        return Err(Error::Data("pixel values outside [-1, 1]".into()));
    }
    Ok(())
}

/// Map raw intensities in [0, 255] to [-1, 1].
pub fn normalize_image(raw: &Array3<f64>) -> Result<Array3<f64>> {
    if !raw.iter().all(|v| v.is_finite() && (0.0..=255.0).contains(v)) {
        return Err(Error::Data("raw pixel values outside [0, 255]".into()));
    }
    Ok(raw.mapv(|v| v / 127.5 - 1.0))
}

/// Inverse of [`normalize_image`]; output clamped to [0, 255].
pub fn denormalize_image(pixels: &Array3<f64>) -> Array3<f64> {
    pixels.mapv(|v| ((v + 1.0) * 127.5).clamp(0.0, 255.0))
}

/// A category with its (possibly capped) file list.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CategoryEntry {
    pub id: usize,
    pub name: String,
    /// Paths relative to the dataset root, in original sorted order.
    pub files: Vec<String>,
}

/// Scanned dataset description; serialized alongside splits so runs are
/// reproducible artifacts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub categories: Vec<CategoryEntry>,
    pub cap: Option<usize>,
    pub seed: u64,
}

impl DatasetManifest {
    /// Scan `root/<category>/<files>`, sort categories and files by name,
    /// and cap each category's list with a per-category seeded draw.
    pub fn scan(root: &Path, cap: Option<usize>, seed: u64) -> Result<Self> {
        let mut names: Vec<String> = Vec::new();
        let entries = fs::read_dir(root).map_err(|e| Error::io(root.display().to_string(), e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(root.display().to_string(), e))?;
            if entry
                .file_type()
                .map_err(|e| Error::io(root.display().to_string(), e))?
                .is_dir()
            {
                names.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        if names.is_empty() {
            return Err(Error::Data(format!(
                "no category directories under {}",
                root.display()
            )));
        }
        names.sort();
        let mut categories = Vec::with_capacity(names.len());
        for (id, name) in names.iter().enumerate() {
            let dir = root.join(name);
            let mut files: Vec<String> = fs::read_dir(&dir)
                .map_err(|e| Error::io(dir.display().to_string(), e))?
                .filter_map(|e| e.ok())
                .filter(|e| e.file_type().map(|t| t.is_file()).unwrap_or(false))
                .map(|e| format!("{}/{}", name, e.file_name().to_string_lossy()))
                .collect();
            files.sort();
            if files.is_empty() {
                return Err(Error::Data(format!("category {name} has no files")));
            }
            let files = match cap {
                // Independent stream per category id keeps capping stable
                // under changes elsewhere in the tree.
                Some(c) => cap_category_samples(&files, c, derive_seed(seed, id as u64))?,
                None => files,
            };
            categories.push(CategoryEntry {
                id,
                name: name.clone(),
                files,
            });
        }
        Ok(DatasetManifest {
            root: root.to_path_buf(),
            categories,
            cap,
            seed,
        })
    }

    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Data(format!("manifest encode: {e}")))?;
        fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("manifest decode: {e}")))
    }
}

fn derive_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 step; decorrelates per-category streams.
    let mut z = seed
        .wrapping_add(salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Keep at most `cap` files, chosen uniformly without replacement,
/// deterministic per seed, preserving the original relative order.
pub fn cap_category_samples(files: &[String], cap: usize, seed: u64) -> Result<Vec<String>> {
    if cap < 1 {
        return Err(Error::Config(format!("sample cap must be >= 1, got {cap}")));
    }
    if files.is_empty() {
        return Err(Error::Data("cannot cap an empty file list".into()));
    }
    if files.len() <= cap {
        return Ok(files.to_vec());
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut keep: Vec<usize> = index_sample(&mut rng, files.len(), cap).into_vec();
    keep.sort_unstable();
    Ok(keep.into_iter().map(|i| files[i].clone()).collect())
}

/// Disjoint category role assignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategorySplit {
    pub seed: u64,
    pub seen: BTreeSet<usize>,
    pub validation_seen: BTreeSet<usize>,
    pub unseen: BTreeSet<usize>,
}

impl CategorySplit {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Data(format!("split encode: {e}")))?;
        fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("split decode: {e}")))
    }

    pub fn validate(&self, total: usize) -> Result<()> {
        if !self.seen.is_disjoint(&self.validation_seen)
            || !self.seen.is_disjoint(&self.unseen)
            || !self.validation_seen.is_disjoint(&self.unseen)
        {
            return Err(Error::Data("split sets are not pairwise disjoint".into()));
        }
        let union = self.seen.len() + self.validation_seen.len() + self.unseen.len();
        if union != total {
            return Err(Error::Data(format!(
                "split covers {union} categories, manifest has {total}"
            )));
        }
        Ok(())
    }
}

/// Requested split sizes.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seen: usize,
    pub validation_seen: usize,
    pub unseen: usize,
}

/// Assign categories to roles by a seeded shuffle.
pub fn split_categories(
    manifest: &DatasetManifest,
    spec: SplitSpec,
    seed: u64,
) -> Result<CategorySplit> {
    let total = manifest.num_categories();
    let requested = spec.seen + spec.validation_seen + spec.unseen;
    if requested != total {
        return Err(Error::Config(format!(
            "split counts sum to {requested} but the manifest has {total} categories"
        )));
    }
    let mut ids: Vec<usize> = (0..total).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    // Fisher-Yates; explicit so the order is pinned by this code, not a
    // shuffle implementation that might change under us.
    for i in (1..ids.len()).rev() {
        let j = rng.gen_range(0..=i);
        ids.swap(i, j);
    }
    let seen: BTreeSet<usize> = ids[..spec.seen].iter().copied().collect();
    let validation_seen: BTreeSet<usize> = ids[spec.seen..spec.seen + spec.validation_seen]
        .iter()
        .copied()
        .collect();
    let unseen: BTreeSet<usize> = ids[spec.seen + spec.validation_seen..]
        .iter()
        .copied()
        .collect();
    let split = CategorySplit {
        seed,
        seen,
        validation_seen,
        unseen,
    };
    split.validate(total)?;
    Ok(split)
}

/// K same-category conditionals.
#[derive(Debug, Clone)]
pub struct Episode {
    pub conditionals: Vec<ImageSample>,
    pub category_id: usize,
    pub k: usize,
}

impl Episode {
    pub fn validate(&self) -> Result<()> {
        if self.conditionals.len() != self.k {
            return Err(Error::Data(format!(
                "episode holds {} conditionals, K={}",
                self.conditionals.len(),
                self.k
            )));
        }
        let mut paths = BTreeSet::new();
        for c in &self.conditionals {
            if c.category_id != self.category_id {
                return Err(Error::Data("episode mixes categories".into()));
            }
            if !paths.insert(c.source_path.as_str()) {
                return Err(Error::Data(format!(
                    "duplicate conditional {}",
                    c.source_path
                )));
            }
            validate_pixels(&c.pixels)?;
        }
        Ok(())
    }

    /// Same episode with conditionals reordered by `perm` (perm[i] = index
    /// into the original list).
    pub fn permuted(&self, perm: &[usize]) -> Episode {
        Episode {
            conditionals: perm.iter().map(|&i| self.conditionals[i].clone()).collect(),
            category_id: self.category_id,
            k: self.k,
        }
    }
}

/// All decoded images of a set of categories, held in memory.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub resolution: usize,
    pub channels: usize,
    pub images: Vec<ImageSample>,
    /// Sorted category id -> indices into `images`.
    pub by_category: std::collections::BTreeMap<usize, Vec<usize>>,
}

impl LoadedDataset {
    /// Decode every manifest file of the given categories. Images must
    /// already be at `resolution` x `resolution`.
    pub fn load(
        manifest: &DatasetManifest,
        categories: &BTreeSet<usize>,
        resolution: usize,
        channels: usize,
    ) -> Result<Self> {
        let mut images = Vec::new();
        let mut by_category = std::collections::BTreeMap::new();
        for entry in &manifest.categories {
            if !categories.contains(&entry.id) {
                continue;
            }
            let mut indices = Vec::with_capacity(entry.files.len());
            for rel in &entry.files {
                let path = manifest.root.join(rel);
                let sample = load_image(&path, entry.id, resolution, channels)?;
                indices.push(images.len());
                images.push(sample);
            }
            by_category.insert(entry.id, indices);
        }
        if images.is_empty() {
            return Err(Error::Data("no images loaded for requested categories".into()));
        }
        Ok(LoadedDataset {
            resolution,
            channels,
            images,
            by_category,
        })
    }

    pub fn category_ids(&self) -> Vec<usize> {
        self.by_category.keys().copied().collect()
    }

    pub fn images_of(&self, category: usize) -> &[usize] {
        self.by_category
            .get(&category)
            .map(|v| v.as_slice())
            .unwrap_or(&[])
    }
}

/// Decode one raster file into a normalized sample.
pub fn load_image(
    path: &Path,
    category_id: usize,
    resolution: usize,
    channels: usize,
) -> Result<ImageSample> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.display().to_string(),
        source: e,
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w != resolution || h != resolution {
        return Err(Error::Data(format!(
            "{} is {w}x{h}, expected {resolution}x{resolution}",
            path.display()
        )));
    }
    let mut raw = Array3::<f64>::zeros((channels, resolution, resolution));
    match channels {
        1 => {
            let gray = img.to_luma8();
            for (x, y, p) in gray.enumerate_pixels() {
                raw[(0, y as usize, x as usize)] = p.0[0] as f64;
            }
        }
        3 => {
            let rgb = img.to_rgb8();
            for (x, y, p) in rgb.enumerate_pixels() {
                for c in 0..3 {
                    raw[(c, y as usize, x as usize)] = p.0[c] as f64;
                }
            }
        }
        other => {
            return Err(Error::Config(format!(
                "unsupported channel count {other} (expected 1 or 3)"
            )))
        }
    }
    let pixels = normalize_image(&raw)?;
    ImageSample::new(pixels, category_id, path.display().to_string())
}

/// Write a normalized (C,H,W) tensor as a PNG.
pub fn save_image(pixels: &ndarray::ArrayView3<f64>, path: &Path) -> Result<()> {
    let (c, h, w) = pixels.dim();
    let raw = denormalize_image(&pixels.to_owned());
    match c {
        1 => {
            let mut buf = image::GrayImage::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    buf.put_pixel(x as u32, y as u32, image::Luma([raw[(0, y, x)].round() as u8]));
                }
            }
            buf.save(path).map_err(|e| Error::Image {
                path: path.display().to_string(),
                source: e,
            })
        }
        3 => {
            let mut buf = image::RgbImage::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    let px = [
                        raw[(0, y, x)].round() as u8,
                        raw[(1, y, x)].round() as u8,
                        raw[(2, y, x)].round() as u8,
                    ];
                    buf.put_pixel(x as u32, y as u32, image::Rgb(px));
                }
            }
            buf.save(path).map_err(|e| Error::Image {
                path: path.display().to_string(),
                source: e,
            })
        }
        other => Err(Error::Config(format!("cannot save {other}-channel image"))),
    }
}

/// Draw one episode: a uniform category from `categories`, then K images
/// without replacement from that category.
pub fn sample_episode(
    ds: &LoadedDataset,
    categories: &[usize],
    k: usize,
    rng: &mut ChaCha20Rng,
) -> Result<Episode> {
    if categories.is_empty() {
        return Err(Error::Usage("sample_episode needs at least one category".into()));
    }
    if k < 1 {
        return Err(Error::Usage("episode size K must be >= 1".into()));
    }
    let category = categories[rng.gen_range(0..categories.len())];
    sample_episode_from(ds, category, k, rng)
}

/// Draw one episode from a fixed category.
pub fn sample_episode_from(
    ds: &LoadedDataset,
    category: usize,
    k: usize,
    rng: &mut ChaCha20Rng,
) -> Result<Episode> {
    let pool = ds.images_of(category);
    if pool.len() < k {
        return Err(Error::Data(format!(
            "category {category} has {} images, episode needs K={k}",
            pool.len()
        )));
    }
    let picks = index_sample(rng, pool.len(), k);
    let conditionals: Vec<ImageSample> = picks
        .into_iter()
        .map(|i| ds.images[pool[i]].clone())
        .collect();
    Ok(Episode {
        conditionals,
        category_id: category,
        k,
    })
}

#[cfg(test)]
mod tests;
