//! Matching discriminator: a residual trunk shared by a one-output
//! adversarial head and a C^s-output classifier head, plus the hinge,
//! classification, and feature matching losses.

use ndarray::{Array1, Array3, Axis};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::generator::SimilarityScores;
use crate::nn::layers::{Binder, Conv2d, Linear, TensorMap};
use crate::tensor::{scalar_of, Tape, TensorData, Var};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DiscriminatorConfig {
    pub resolution: usize,
    pub image_channels: usize,
    /// Channel plan per stage; each stage is two residual blocks and a 2x2
    /// average pool.
    pub stage_channels: Vec<usize>,
    /// Number of seen categories C^s for the classifier head.
    pub num_classes: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            resolution: 32,
            image_channels: 1,
            stage_channels: vec![64, 128, 256, 512, 1024],
            num_classes: 10,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() {
            return Err(Error::Config("discriminator needs at least one stage".into()));
        }
        let stages = self.stage_channels.len();
        if self.resolution % (1 << stages) != 0 {
            return Err(Error::Config(format!(
                "resolution {} is not divisible by 2^{stages} stages of pooling",
                self.resolution
            )));
        }
        if self.num_classes < 1 {
            return Err(Error::Config("num_classes must be >= 1".into()));
        }
        Ok(())
    }

    /// Dimension of the discriminative feature (trunk output).
    pub fn feature_dim(&self) -> usize {
        *self.stage_channels.last().unwrap()
    }
}

struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
}

struct Stage {
    block1: ResBlock,
    block2: ResBlock,
}

pub struct Discriminator {
    pub cfg: DiscriminatorConfig,
    pub params: TensorMap,
    stem: Conv2d,
    stages: Vec<Stage>,
    adv_head: Linear,
    class_head: Linear,
}

impl Discriminator {
    pub fn new(cfg: DiscriminatorConfig, rng: &mut ChaCha20Rng) -> Result<Self> {
        cfg.validate()?;
        let mut params = TensorMap::new();
        let stem = Conv2d::init(
            &mut params,
            rng,
            "disc.stem",
            cfg.image_channels,
            cfg.stage_channels[0],
            3,
            1,
            1,
            INIT_STD,
        );
        let mut stages = Vec::with_capacity(cfg.stage_channels.len());
        let mut in_ch = cfg.stage_channels[0];
        for (s, &out_ch) in cfg.stage_channels.iter().enumerate() {
            let block1 = res_block(&mut params, rng, &format!("disc.s{s}.r0"), in_ch, out_ch);
            let block2 = res_block(&mut params, rng, &format!("disc.s{s}.r1"), out_ch, out_ch);
            stages.push(Stage { block1, block2 });
            in_ch = out_ch;
        }
        let fdim = cfg.feature_dim();
        let adv_head = Linear::init(&mut params, rng, "disc.adv_head", fdim, 1, INIT_STD);
        let class_head = Linear::init(
            &mut params,
            rng,
            "disc.class_head",
            fdim,
            cfg.num_classes,
            INIT_STD,
        );
        Ok(Discriminator {
            cfg,
            params,
            stem,
            stages,
            adv_head,
            class_head,
        })
    }

    // ---- tape-level forwards -------------------------------------------------

    /// Trunk features of `x: (N,C,H,W)` -> `(N,F)`, the post-pooling vector
    /// the heads consume.
    pub fn features_t(&self, tape: &Tape, binder: &mut Binder, x: Var) -> Var {
        let mut h = self.stem.apply(tape, binder, &self.params, x);
        for stage in &self.stages {
            h = self.apply_res_block(tape, binder, &stage.block1, h);
            h = self.apply_res_block(tape, binder, &stage.block2, h);
            h = tape.avg_pool2(h);
        }
        tape.global_avg_pool(h)
    }

    /// Adversarial scores from features: `(N,F)` -> `(N,)`.
    pub fn score_from_features_t(&self, tape: &Tape, binder: &mut Binder, feats: Var) -> Var {
        let s = self.adv_head.apply(tape, binder, &self.params, feats);
        let n = tape.shape(s)[0];
        tape.reshape(s, &[n])
    }

    /// Class logits from features: `(N,F)` -> `(N,C^s)`.
    pub fn class_logits_t(&self, tape: &Tape, binder: &mut Binder, feats: Var) -> Var {
        self.class_head.apply(tape, binder, &self.params, feats)
    }

    fn apply_res_block(&self, tape: &Tape, binder: &mut Binder, block: &ResBlock, x: Var) -> Var {
        let h = tape.relu(x);
        let h = block.conv1.apply(tape, binder, &self.params, h);
        let h = tape.relu(h);
        let h = block.conv2.apply(tape, binder, &self.params, h);
        let shortcut = match &block.shortcut {
            Some(conv) => conv.apply(tape, binder, &self.params, x),
            None => x,
        };
        tape.add(shortcut, h)
    }

    // ---- inference wrappers ---------------------------------------------------

    /// Adversarial score of one image.
    pub fn score(&self, pixels: &Array3<f64>) -> Result<f64> {
        let feats = self.extract_features(pixels)?;
        let tape = Tape::no_grad();
        let mut binder = Binder::new(&tape, false);
        let f = tape.leaf(feats.insert_axis(Axis(0)).into_dyn());
        let s = self.score_from_features_t(&tape, &mut binder, f);
        Ok(scalar_of(&tape.value(s)))
    }

    /// Discriminative feature of one image (trunk output, before any head).
    pub fn extract_features(&self, pixels: &Array3<f64>) -> Result<Array1<f64>> {
        self.check_image(pixels)?;
        let tape = Tape::no_grad();
        let mut binder = Binder::new(&tape, false);
        let x = tape.leaf(pixels.clone().insert_axis(Axis(0)).into_dyn());
        let f = self.features_t(&tape, &mut binder, x);
        Ok(tape
            .value(f)
            .index_axis(Axis(0), 0)
            .to_owned()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("feature rank"))
    }

    /// Class logits of one image.
    pub fn class_logits(&self, pixels: &Array3<f64>) -> Result<Array1<f64>> {
        let feats = self.extract_features(pixels)?;
        let tape = Tape::no_grad();
        let mut binder = Binder::new(&tape, false);
        let f = tape.leaf(feats.insert_axis(Axis(0)).into_dyn());
        let l = self.class_logits_t(&tape, &mut binder, f);
        Ok(tape
            .value(l)
            .index_axis(Axis(0), 0)
            .to_owned()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("logits rank"))
    }

    fn check_image(&self, pixels: &Array3<f64>) -> Result<()> {
        let (c, h, w) = pixels.dim();
        if c != self.cfg.image_channels || h != self.cfg.resolution || w != self.cfg.resolution {
            return Err(Error::Shape(format!(
                "image shape ({c},{h},{w}) does not match configured ({},{},{})",
                self.cfg.image_channels, self.cfg.resolution, self.cfg.resolution
            )));
        }
        Ok(())
    }
}

fn res_block(
    params: &mut TensorMap,
    rng: &mut ChaCha20Rng,
    name: &str,
    in_ch: usize,
    out_ch: usize,
) -> ResBlock {
    let conv1 = Conv2d::init(params, rng, &format!("{name}.c1"), in_ch, out_ch, 3, 1, 1, INIT_STD);
    let conv2 = Conv2d::init(params, rng, &format!("{name}.c2"), out_ch, out_ch, 3, 1, 1, INIT_STD);
    let shortcut = if in_ch != out_ch {
        Some(Conv2d::init(
            params,
            rng,
            &format!("{name}.sc"),
            in_ch,
            out_ch,
            1,
            1,
            0,
            INIT_STD,
        ))
    } else {
        None
    };
    ResBlock {
        conv1,
        conv2,
        shortcut,
    }
}

// ---- loss functions over plain values --------------------------------------

/// Hinge discriminator loss:
/// `mean(max(0, 1 + D(fake))) + mean(max(0, 1 − D(real)))`.
pub fn hinge_d_loss(fake_scores: &[f64], real_scores: &[f64]) -> Result<f64> {
    if fake_scores.is_empty() || real_scores.is_empty() {
        return Err(Error::Usage("hinge_d_loss needs non-empty score lists".into()));
    }
    let tape = Tape::no_grad();
    let f = tape.leaf(Array1::from_vec(fake_scores.to_vec()).into_dyn());
    let r = tape.leaf(Array1::from_vec(real_scores.to_vec()).into_dyn());
    Ok(scalar_of(&tape.value(tape.hinge_d(f, r))))
}

/// Generator adversarial loss: `−mean(D(fake))`.
pub fn adv_g_loss(fake_scores: &[f64]) -> Result<f64> {
    if fake_scores.is_empty() {
        return Err(Error::Usage("adv_g_loss needs a non-empty score list".into()));
    }
    let tape = Tape::no_grad();
    let f = tape.leaf(Array1::from_vec(fake_scores.to_vec()).into_dyn());
    Ok(scalar_of(&tape.value(tape.neg_mean(f))))
}

/// Cross-entropy of logits against a class index.
pub fn classification_loss(logits: &Array1<f64>, label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::Usage(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let tape = Tape::no_grad();
    let l = tape.leaf(logits.clone().insert_axis(Axis(0)).into_dyn());
    Ok(scalar_of(&tape.value(tape.cross_entropy(l, &[label]))))
}

/// Feature matching loss: `meanAbs(Σ_i a_i · D̂(x_i) − D̂(x̃))`.
pub fn feature_matching_loss(
    scores: &SimilarityScores,
    cond_feats: &[Array1<f64>],
    fake_feat: &Array1<f64>,
) -> Result<f64> {
    scores.validate()?;
    if cond_feats.len() != scores.0.len() {
        return Err(Error::Shape(format!(
            "{} conditional features but {} scores",
            cond_feats.len(),
            scores.0.len()
        )));
    }
    let fdim = fake_feat.len();
    for (i, f) in cond_feats.iter().enumerate() {
        if f.len() != fdim {
            return Err(Error::Shape(format!(
                "conditional feature {i} has dim {}, expected {fdim}",
                f.len()
            )));
        }
    }
    let k = cond_feats.len();
    let tape = Tape::no_grad();
    let s = tape.leaf(
        ndarray::Array2::from_shape_vec((1, k), scores.0.clone())
            .unwrap()
            .into_dyn(),
    );
    let mut c = ndarray::Array3::<f64>::zeros((1, k, fdim));
    for (i, f) in cond_feats.iter().enumerate() {
        c.index_axis_mut(Axis(0), 0)
            .index_axis_mut(Axis(0), i)
            .assign(f);
    }
    let cv = tape.leaf(c.into_dyn());
    let fv = tape.leaf(fake_feat.clone().insert_axis(Axis(0)).into_dyn());
    Ok(scalar_of(&tape.value(tape.feature_match_l1(s, cv, fv))))
}

/// Batched tape-level losses used by the training engine.
pub mod losses {
    use super::*;

    pub fn hinge_d_t(tape: &Tape, fake: Var, real: Var) -> Var {
        tape.hinge_d(fake, real)
    }

    pub fn adv_g_t(tape: &Tape, fake: Var) -> Var {
        tape.neg_mean(fake)
    }

    pub fn cross_entropy_t(tape: &Tape, logits: Var, labels: &[usize]) -> Var {
        tape.cross_entropy(logits, labels)
    }

    pub fn feature_match_t(tape: &Tape, scores: Var, cond_feats: Var, fake_feats: Var) -> Var {
        tape.feature_match_l1(scores, cond_feats, fake_feats)
    }

    pub fn weighted_l1_t(tape: &Tape, scores: Var, targets: &TensorData, gen: Var) -> Var {
        tape.weighted_l1(scores, targets, gen)
    }
}

#[cfg(test)]
mod tests;
