//! Matching generator.
//!
//! A noise vector and K conditional images are projected into a common
//! matching space; softmax-normalized cosine similarities become
//! interpolation coefficients that fuse the condition encoder's bottleneck
//! and skip features; a decoder with skip connections turns the fused
//! features into a new image of the same category.

use ndarray::{Array1, Array2, Array3, Axis};
use rand_chacha::ChaCha20Rng;

use crate::data::Episode;
use crate::error::{Error, Result};
use crate::nn::layers::{BatchNorm, Binder, BnMode, Conv2d, Linear, TensorMap};
use crate::nn::init;
use crate::tensor::{canonical_sum, Tape, TensorData, Var};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const COSINE_EPS: f64 = 1e-8;
pub const INIT_STD: f64 = 0.02;

/// How interpolation coefficients are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoefficientMode {
    /// Learned matching procedure (cosine similarity + softmax).
    Matched,
    /// Normalized uniform draws; the matching encoders are bypassed.
    Random,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GeneratorConfig {
    pub resolution: usize,
    pub image_channels: usize,
    /// Output channels of the four encoder blocks.
    pub enc_channels: [usize; 4],
    /// Output channels of the four decoder blocks.
    pub dec_channels: [usize; 4],
    /// Composite layers per block, the last being the down/up-scaling layer.
    pub composite_layers: usize,
    /// Number of skip connections L (1..=3).
    pub skip_connections: usize,
    /// Share the matching encoder with the feature encoder.
    pub shared_encoder: bool,
    pub d_z: usize,
    pub dropout: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            resolution: 32,
            image_channels: 1,
            enc_channels: [64, 64, 128, 128],
            dec_channels: [128, 128, 64, 64],
            composite_layers: 4,
            skip_connections: 2,
            shared_encoder: true,
            d_z: 128,
            dropout: 0.2,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 16 || self.resolution % 16 != 0 {
            return Err(Error::Config(format!(
                "resolution {} must be a positive multiple of 16",
                self.resolution
            )));
        }
        if !(self.image_channels == 1 || self.image_channels == 3) {
            return Err(Error::Config(format!(
                "image_channels must be 1 or 3, got {}",
                self.image_channels
            )));
        }
        if !(1..=3).contains(&self.skip_connections) {
            return Err(Error::Config(format!(
                "skip_connections must be 1, 2, or 3, got {}",
                self.skip_connections
            )));
        }
        if self.composite_layers < 1 {
            return Err(Error::Config("composite_layers must be >= 1".into()));
        }
        if self.d_z < 1 {
            return Err(Error::Config("d_z must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0,1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Matching-space dimension d: the bottleneck channel count.
    pub fn embedding_dim(&self) -> usize {
        self.enc_channels[3]
    }

    /// Spatial side of encoder block `b`'s output (0-based).
    fn block_side(&self, b: usize) -> usize {
        self.resolution >> (b + 1)
    }

    /// (channels, side) of pyramid level `j`.
    pub fn level_shape(&self, j: usize) -> (usize, usize) {
        if j == 0 {
            (self.enc_channels[3], self.block_side(3))
        } else {
            // level j taps encoder block 4-j (1-based), i.e. index 3-(j-1).
            let b = 3 - (j - 1);
            (self.enc_channels[b], self.block_side(b))
        }
    }
}

struct CompositeLayer {
    conv: Conv2d,
    bn: BatchNorm,
    /// Scaling layer: stride-2 conv (encoder) or upsample+conv (decoder),
    /// followed by dropout.
    scaling: bool,
    upscale: bool,
}

struct Block {
    layers: Vec<CompositeLayer>,
}

struct EncoderLayout {
    blocks: Vec<Block>,
}

struct DecoderLayout {
    blocks: Vec<Block>,
    out_conv: Conv2d,
}

/// Execution mode for a forward pass.
pub enum GenMode<'a> {
    Train {
        buffers: &'a mut TensorMap,
        dropout_rng: &'a mut ChaCha20Rng,
    },
    Infer {
        buffers: &'a TensorMap,
    },
}

pub struct Generator {
    pub cfg: GeneratorConfig,
    pub params: TensorMap,
    pub buffers: TensorMap,
    enc: EncoderLayout,
    /// Separate matching encoder when parameter sharing is disabled.
    enc_phi: Option<EncoderLayout>,
    noise_fc: Linear,
    dec: DecoderLayout,
}

/// Outputs of one batched generator pass.
pub struct GenOut {
    /// (B, C, H, W) generated images.
    pub images: Var,
    /// (B, K) interpolation coefficients.
    pub scores: Var,
    /// (B, K, C, H, W) conditional pixels as plain data.
    pub cond_pixels: TensorData,
}

impl Generator {
    pub fn new(cfg: GeneratorConfig, rng: &mut ChaCha20Rng) -> Result<Self> {
        cfg.validate()?;
        let mut params = TensorMap::new();
        let mut buffers = TensorMap::new();
        let enc = build_encoder(&cfg, &mut params, &mut buffers, rng, "enc");
        let enc_phi = if cfg.shared_encoder {
            None
        } else {
            Some(build_encoder(&cfg, &mut params, &mut buffers, rng, "enc_phi"))
        };
        let noise_fc = Linear::init(
            &mut params,
            rng,
            "noise_fc",
            cfg.d_z,
            cfg.embedding_dim(),
            INIT_STD,
        );
        let dec = build_decoder(&cfg, &mut params, &mut buffers, rng);
        Ok(Generator {
            cfg,
            params,
            buffers,
            enc,
            enc_phi,
            noise_fc,
            dec,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.cfg.embedding_dim()
    }

    /// Draw a unit-Gaussian noise vector.
    pub fn sample_noise(&self, rng: &mut ChaCha20Rng) -> Array1<f64> {
        Array1::from_vec(init::standard_normal(rng, self.cfg.d_z))
    }

    /// Draw a (B, d_z) batch of noise vectors.
    pub fn sample_noise_batch(&self, batch: usize, rng: &mut ChaCha20Rng) -> Array2<f64> {
        Array2::from_shape_vec(
            (batch, self.cfg.d_z),
            init::standard_normal(rng, batch * self.cfg.d_z),
        )
        .unwrap()
    }

    // ---- tape-level forwards -------------------------------------------------

    /// Noise embedding: (B, d_z) -> (B, d).
    pub fn embed_noise_t(&self, tape: &Tape, binder: &mut Binder, z: Var) -> Var {
        self.noise_fc.apply(tape, binder, &self.params, z)
    }

    /// Encoder feature pyramid of `x: (N,C,H,W)`: `[bottleneck, skip_1..skip_L]`,
    /// skips ordered deepest first.
    pub fn encode_pyramid_t(
        &self,
        tape: &Tape,
        binder: &mut Binder,
        mode: &mut GenMode,
        x: Var,
        matching_encoder: bool,
    ) -> Vec<Var> {
        let layout = if matching_encoder {
            self.enc_phi.as_ref().unwrap_or(&self.enc)
        } else {
            &self.enc
        };
        let mut h = x;
        let mut block_outputs = Vec::with_capacity(4);
        for block in &layout.blocks {
            for layer in &block.layers {
                h = self.apply_composite(tape, binder, mode, layer, h);
            }
            block_outputs.push(h);
        }
        let mut levels = vec![block_outputs[3]];
        for j in 1..=self.cfg.skip_connections {
            levels.push(block_outputs[3 - (j - 1)]);
        }
        levels
    }

    /// Decode fused pyramid levels into images.
    pub fn decode_t(
        &self,
        tape: &Tape,
        binder: &mut Binder,
        mode: &mut GenMode,
        fused: &[Var],
    ) -> Var {
        let l = self.cfg.skip_connections;
        assert_eq!(fused.len(), l + 1, "decoder expects L+1 fused levels");
        let mut h = tape.concat_channels(fused[0], fused[1]);
        for (b, block) in self.dec.blocks.iter().enumerate() {
            if b >= 1 && b < l {
                // skip level j = b+1 joins decoder block b's input.
                h = tape.concat_channels(h, fused[b + 1]);
            }
            for layer in &block.layers {
                h = self.apply_composite(tape, binder, mode, layer, h);
            }
        }
        let out = self.dec.out_conv.apply(tape, binder, &self.params, h);
        tape.tanh(out)
    }

    fn apply_composite(
        &self,
        tape: &Tape,
        binder: &mut Binder,
        mode: &mut GenMode,
        layer: &CompositeLayer,
        x: Var,
    ) -> Var {
        let h = tape.leaky_relu(x, LEAKY_SLOPE);
        let h = match mode {
            GenMode::Train { buffers, .. } => {
                layer
                    .bn
                    .apply(tape, binder, &self.params, &mut BnMode::Train(buffers), h)
            }
            GenMode::Infer { buffers } => {
                layer
                    .bn
                    .apply(tape, binder, &self.params, &mut BnMode::Infer(buffers), h)
            }
        };
        let h = if layer.upscale {
            tape.upsample_nearest2(h)
        } else {
            h
        };
        let h = layer.conv.apply(tape, binder, &self.params, h);
        if layer.scaling {
            match mode {
                GenMode::Train { dropout_rng, .. } => tape.dropout(h, self.cfg.dropout, dropout_rng),
                GenMode::Infer { .. } => h,
            }
        } else {
            h
        }
    }

    /// Full batched pass: episodes + noise -> images and scores.
    ///
    /// All episodes must share the same K. In `CoefficientMode::Random` the
    /// coefficients come from `coeff_rng` and the matching encoders do not
    /// participate.
    pub fn generate_t(
        &self,
        tape: &Tape,
        binder: &mut Binder,
        mode: &mut GenMode,
        episodes: &[Episode],
        z: &Array2<f64>,
        coeff_mode: CoefficientMode,
        coeff_rng: Option<&mut ChaCha20Rng>,
    ) -> Result<GenOut> {
        if episodes.is_empty() {
            return Err(Error::Usage("generate_t on an empty episode batch".into()));
        }
        let b = episodes.len();
        let k = episodes[0].k;
        for ep in episodes {
            if ep.k != k {
                return Err(Error::Shape(format!(
                    "episode batch mixes K={k} and K={}",
                    ep.k
                )));
            }
            ep.validate()?;
        }
        if z.dim() != (b, self.cfg.d_z) {
            return Err(Error::Shape(format!(
                "noise batch is {:?}, expected ({b}, {})",
                z.dim(),
                self.cfg.d_z
            )));
        }
        let (c, res) = (self.cfg.image_channels, self.cfg.resolution);
        let cond_pixels = stack_episodes(episodes, c, res)?;
        let x_all = tape.leaf(cond_pixels.clone());
        let x_flat = tape.reshape(x_all, &[b * k, c, res, res]);
        let pyramids = self.encode_pyramid_t(tape, binder, mode, x_flat, false);

        let scores = match coeff_mode {
            CoefficientMode::Matched => {
                let cond_emb_flat = if self.cfg.shared_encoder {
                    tape.global_avg_pool(pyramids[0])
                } else {
                    let phi_levels = self.encode_pyramid_t(tape, binder, mode, x_flat, true);
                    tape.global_avg_pool(phi_levels[0])
                };
                let d = self.embedding_dim();
                let cond_embs = tape.reshape(cond_emb_flat, &[b, k, d]);
                let z_var = tape.leaf(z.clone().into_dyn());
                let z_emb = self.embed_noise_t(tape, binder, z_var);
                let cos = tape.cosine_scores(z_emb, cond_embs, COSINE_EPS);
                tape.softmax_rows(cos)
            }
            CoefficientMode::Random => {
                let rng = coeff_rng.ok_or_else(|| {
                    Error::Usage("random coefficient mode needs an rng".into())
                })?;
                let mut vals = Vec::with_capacity(b * k);
                for _ in 0..b {
                    let row = random_coefficients(k, rng)?;
                    vals.extend_from_slice(&row.0);
                }
                tape.leaf(
                    Array2::from_shape_vec((b, k), vals)
                        .unwrap()
                        .into_dyn(),
                )
            }
        };

        let mut fused = Vec::with_capacity(pyramids.len());
        for level in &pyramids {
            let shape = tape.shape(*level);
            let mut episode_shape = vec![b, k];
            episode_shape.extend_from_slice(&shape[1..]);
            let grouped = tape.reshape(*level, &episode_shape);
            fused.push(tape.fuse(scores, grouped));
        }
        let images = self.decode_t(tape, binder, mode, &fused);
        Ok(GenOut {
            images,
            scores,
            cond_pixels,
        })
    }

    // ---- inference wrappers ---------------------------------------------------

    /// Embed one noise vector into the matching space.
    pub fn embed_noise(&self, z: &Array1<f64>) -> Result<Array1<f64>> {
        if z.len() != self.cfg.d_z {
            return Err(Error::Shape(format!(
                "noise dim {} does not match d_z {}",
                z.len(),
                self.cfg.d_z
            )));
        }
        let tape = Tape::no_grad();
        let mut binder = Binder::new(&tape, false);
        let zv = tape.leaf(z.clone().insert_axis(Axis(0)).into_dyn());
        let out = self.embed_noise_t(&tape, &mut binder, zv);
        Ok(row_of(&tape.value(out), 0))
    }

    /// Matching embedding of one conditional image: spatial average of the
    /// matching encoder's bottleneck feature.
    pub fn embed_condition(&self, pixels: &Array3<f64>) -> Result<Array1<f64>> {
        self.check_image(pixels)?;
        let tape = Tape::no_grad();
        let mut binder = Binder::new(&tape, false);
        let x = tape.leaf(pixels.clone().insert_axis(Axis(0)).into_dyn());
        let mut mode = GenMode::Infer {
            buffers: &self.buffers,
        };
        let levels = self.encode_pyramid_t(&tape, &mut binder, &mut mode, x, true);
        let emb = tape.global_avg_pool(levels[0]);
        Ok(row_of(&tape.value(emb), 0))
    }

    /// Feature pyramid of one image through the condition encoder.
    pub fn extract_feature_pyramid(&self, pixels: &Array3<f64>) -> Result<FeaturePyramid> {
        self.check_image(pixels)?;
        let tape = Tape::no_grad();
        let mut binder = Binder::new(&tape, false);
        let x = tape.leaf(pixels.clone().insert_axis(Axis(0)).into_dyn());
        let mut mode = GenMode::Infer {
            buffers: &self.buffers,
        };
        let levels = self.encode_pyramid_t(&tape, &mut binder, &mut mode, x, false);
        let mut out = Vec::with_capacity(levels.len());
        for v in levels {
            let val = tape.value(v);
            out.push(val.index_axis(Axis(0), 0).to_owned());
        }
        Ok(FeaturePyramid(out))
    }

    /// Decode one fused pyramid into an image (inference mode).
    pub fn decode(&self, fused: &FusedFeatures) -> Result<Array3<f64>> {
        if fused.0.len() != self.cfg.skip_connections + 1 {
            return Err(Error::Shape(format!(
                "fused features hold {} levels, expected {}",
                fused.0.len(),
                self.cfg.skip_connections + 1
            )));
        }
        for (j, level) in fused.0.iter().enumerate() {
            let (ch, side) = self.cfg.level_shape(j);
            if level.shape() != [ch, side, side] {
                return Err(Error::Shape(format!(
                    "fused level {j} has shape {:?}, expected [{ch}, {side}, {side}]",
                    level.shape()
                )));
            }
        }
        let tape = Tape::no_grad();
        let mut binder = Binder::new(&tape, false);
        let mut mode = GenMode::Infer {
            buffers: &self.buffers,
        };
        let vars: Vec<Var> = fused
            .0
            .iter()
            .map(|l| {
                let mut shape = vec![1];
                shape.extend_from_slice(l.shape());
                let leaf = tape.leaf(l.clone());
                tape.reshape(leaf, &shape)
            })
            .collect();
        let img = self.decode_t(&tape, &mut binder, &mut mode, &vars);
        let val = tape.value(img);
        Ok(val
            .index_axis(Axis(0), 0)
            .to_owned()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("decoded image rank"))
    }

    /// Generate one image from one episode (inference mode, matched
    /// coefficients).
    pub fn generate(
        &self,
        z: &Array1<f64>,
        episode: &Episode,
    ) -> Result<(Array3<f64>, SimilarityScores)> {
        self.generate_with(z, episode, CoefficientMode::Matched, None)
    }

    /// Generate with an explicit coefficient mode; `Random` requires an rng.
    pub fn generate_with(
        &self,
        z: &Array1<f64>,
        episode: &Episode,
        coeff_mode: CoefficientMode,
        coeff_rng: Option<&mut ChaCha20Rng>,
    ) -> Result<(Array3<f64>, SimilarityScores)> {
        if episode.k < 1 {
            return Err(Error::Usage("episode needs K >= 1".into()));
        }
        let tape = Tape::no_grad();
        let mut binder = Binder::new(&tape, false);
        let mut mode = GenMode::Infer {
            buffers: &self.buffers,
        };
        let zb = z.clone().insert_axis(Axis(0));
        let out = self.generate_t(
            &tape,
            &mut binder,
            &mut mode,
            std::slice::from_ref(episode),
            &zb,
            coeff_mode,
            coeff_rng,
        )?;
        let img = tape
            .value(out.images)
            .index_axis(Axis(0), 0)
            .to_owned()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("generated image rank");
        let scores = SimilarityScores(tape.value(out.scores).iter().copied().collect());
        Ok((img, scores))
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

fn build_encoder(
    cfg: &GeneratorConfig,
    params: &mut TensorMap,
    buffers: &mut TensorMap,
    rng: &mut ChaCha20Rng,
    prefix: &str,
) -> EncoderLayout {
    let mut blocks = Vec::with_capacity(4);
    let mut in_ch = cfg.image_channels;
    for (b, &out_ch) in cfg.enc_channels.iter().enumerate() {
        let mut layers = Vec::with_capacity(cfg.composite_layers);
        for li in 0..cfg.composite_layers {
            let scaling = li == cfg.composite_layers - 1;
            let name = format!("{prefix}.b{b}.l{li}");
            let cin = if li == 0 { in_ch } else { out_ch };
            let stride = if scaling { 2 } else { 1 };
            let conv = Conv2d::init(
                params,
                rng,
                &format!("{name}.conv"),
                cin,
                out_ch,
                3,
                stride,
                1,
                INIT_STD,
            );
            let bn = BatchNorm::init(params, buffers, &format!("{name}.bn"), cin, BN_MOMENTUM, BN_EPS);
            layers.push(CompositeLayer {
                conv,
                bn,
                scaling,
                upscale: false,
            });
        }
        blocks.push(Block { layers });
        in_ch = out_ch;
    }
    EncoderLayout { blocks }
}

fn build_decoder(
    cfg: &GeneratorConfig,
    params: &mut TensorMap,
    buffers: &mut TensorMap,
    rng: &mut ChaCha20Rng,
) -> DecoderLayout {
    let l = cfg.skip_connections;
    let mut blocks = Vec::with_capacity(4);
    for (b, &out_ch) in cfg.dec_channels.iter().enumerate() {
        // Block inputs: fused bottleneck plus the matching skip (block 0),
        // previous block output plus skip where one attaches (blocks 1..L-1).
        let mut in_ch = if b == 0 {
            2 * cfg.enc_channels[3]
        } else {
            cfg.dec_channels[b - 1]
        };
        if b >= 1 && b < l {
            in_ch += cfg.level_shape(b + 1).0;
        }
        let mut layers = Vec::with_capacity(cfg.composite_layers);
        for li in 0..cfg.composite_layers {
            // The upscaling composite comes first so skip features concatenate
            // at matching resolutions.
            let scaling = li == 0;
            let name = format!("dec.b{b}.l{li}");
            let cin = if li == 0 { in_ch } else { out_ch };
            let conv = Conv2d::init(
                params,
                rng,
                &format!("{name}.conv"),
                cin,
                out_ch,
                3,
                1,
                1,
                INIT_STD,
            );
            let bn = BatchNorm::init(params, buffers, &format!("{name}.bn"), cin, BN_MOMENTUM, BN_EPS);
            layers.push(CompositeLayer {
                conv,
                bn,
                scaling,
                upscale: scaling,
            });
        }
        blocks.push(Block { layers });
    }
    let out_conv = Conv2d::init(
        params,
        rng,
        "dec.out",
        cfg.dec_channels[3],
        cfg.image_channels,
        3,
        1,
        1,
        INIT_STD,
    );
    DecoderLayout { blocks, out_conv }
}

/// Stack episode conditionals into (B, K, C, H, W).
fn stack_episodes(episodes: &[Episode], channels: usize, res: usize) -> Result<TensorData> {
    let b = episodes.len();
    let k = episodes[0].k;
    let mut out = ndarray::Array5::<f64>::zeros((b, k, channels, res, res));
    for (bi, ep) in episodes.iter().enumerate() {
        for (ki, cond) in ep.conditionals.iter().enumerate() {
            let (c, h, w) = cond.pixels.dim();
            if (c, h, w) != (channels, res, res) {
                return Err(Error::Shape(format!(
                    "conditional {} has shape ({c},{h},{w}), expected ({channels},{res},{res})",
                    cond.source_path
                )));
            }
            out.index_axis_mut(Axis(0), bi)
                .index_axis_mut(Axis(0), ki)
                .assign(&cond.pixels.view());
        }
    }
    Ok(out.into_dyn())
}

fn row_of(t: &TensorData, row: usize) -> Array1<f64> {
    t.index_axis(Axis(0), row)
        .to_owned()
        .into_dimensionality::<ndarray::Ix1>()
        .expect("row extraction")
}

/// Interpolation coefficients on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityScores(pub Vec<f64>);

impl SimilarityScores {
    /// Entries strictly positive and summing to 1 within 1e-6.
    pub fn validate(&self) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::Usage("empty similarity scores".into()));
        }
        if !self.0.iter().all(|v| v.is_finite() && *v > 0.0) {
            return Err(Error::Numeric(format!(
                "scores must be strictly positive, got {:?}",
                self.0
            )));
        }
        let sum: f64 = self.0.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Numeric(format!("scores sum to {sum}, expected 1")));
        }
        Ok(())
    }
}

/// Per-image encoder features: level 0 is the bottleneck, levels 1..=L the
/// skip-connected block outputs, deepest first.
#[derive(Debug, Clone)]
pub struct FeaturePyramid(pub Vec<TensorData>);

/// Score-weighted convex combinations of K pyramids, level by level.
#[derive(Debug, Clone)]
pub struct FusedFeatures(pub Vec<TensorData>);

/// Softmax-normalized cosine similarities between a noise embedding and K
/// condition embeddings.
pub fn similarity_scores(
    z_emb: &Array1<f64>,
    cond_embs: &[Array1<f64>],
) -> Result<SimilarityScores> {
    if cond_embs.is_empty() {
        return Err(Error::Usage("similarity_scores needs K >= 1 embeddings".into()));
    }
    let d = z_emb.len();
    for (i, e) in cond_embs.iter().enumerate() {
        if e.len() != d {
            return Err(Error::Shape(format!(
                "embedding {i} has dim {}, expected {d}",
                e.len()
            )));
        }
    }
    if !z_emb.iter().all(|v| v.is_finite())
        || !cond_embs.iter().all(|e| e.iter().all(|v| v.is_finite()))
    {
        return Err(Error::Numeric("non-finite embedding input".into()));
    }
    let k = cond_embs.len();
    let tape = Tape::no_grad();
    let z = tape.leaf(z_emb.clone().insert_axis(Axis(0)).into_dyn());
    let mut c = ndarray::Array3::<f64>::zeros((1, k, d));
    for (i, e) in cond_embs.iter().enumerate() {
        c.index_axis_mut(Axis(0), 0)
            .index_axis_mut(Axis(0), i)
            .assign(e);
    }
    let cv = tape.leaf(c.into_dyn());
    let cos = tape.cosine_scores(z, cv, COSINE_EPS);
    let sm = tape.softmax_rows(cos);
    let scores = SimilarityScores(tape.value(sm).iter().copied().collect());
    scores.validate()?;
    Ok(scores)
}

/// Fuse K pyramids with simplex weights: `r^j = Σ_i a_i · level_j(x_i)`.
pub fn fuse_features(
    scores: &SimilarityScores,
    pyramids: &[FeaturePyramid],
) -> Result<FusedFeatures> {
    scores.validate()?;
    let k = pyramids.len();
    if k != scores.0.len() {
        return Err(Error::Shape(format!(
            "{k} pyramids but {} scores",
            scores.0.len()
        )));
    }
    let levels = pyramids[0].0.len();
    for p in pyramids {
        if p.0.len() != levels {
            return Err(Error::Shape("pyramids disagree on level count".into()));
        }
        for (j, l) in p.0.iter().enumerate() {
            if l.shape() != pyramids[0].0[j].shape() {
                return Err(Error::Shape(format!(
                    "pyramid level {j} shapes disagree: {:?} vs {:?}",
                    l.shape(),
                    pyramids[0].0[j].shape()
                )));
            }
        }
    }
    let tape = Tape::no_grad();
    let sv = tape.leaf(
        Array2::from_shape_vec((1, k), scores.0.clone())
            .unwrap()
            .into_dyn(),
    );
    let mut out = Vec::with_capacity(levels);
    for j in 0..levels {
        let mut shape = vec![1, k];
        shape.extend_from_slice(pyramids[0].0[j].shape());
        let mut stacked = TensorData::zeros(ndarray::IxDyn(&shape));
        for (i, p) in pyramids.iter().enumerate() {
            stacked
                .index_axis_mut(Axis(0), 0)
                .index_axis_mut(Axis(0), i)
                .assign(&p.0[j]);
        }
        let fv = tape.fuse(sv, tape.leaf(stacked));
        out.push(tape.value(fv).index_axis(Axis(0), 0).to_owned());
    }
    Ok(FusedFeatures(out))
}

/// Weighted reconstruction loss `Σ_i a_i · meanAbs(x_i − x̃)`.
pub fn weighted_reconstruction_loss(
    scores: &SimilarityScores,
    conditionals: &[Array3<f64>],
    generated: &Array3<f64>,
) -> Result<f64> {
    scores.validate()?;
    if conditionals.len() != scores.0.len() {
        return Err(Error::Shape(format!(
            "{} conditionals but {} scores",
            conditionals.len(),
            scores.0.len()
        )));
    }
    let shape = generated.dim();
    let mut terms = Vec::with_capacity(conditionals.len());
    for (i, x) in conditionals.iter().enumerate() {
        if x.dim() != shape {
            return Err(Error::Shape(format!(
                "conditional {i} shape {:?} does not match generated {:?}",
                x.dim(),
                shape
            )));
        }
        let dist = x
            .iter()
            .zip(generated.iter())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / generated.len() as f64;
        terms.push(scores.0[i] * dist);
    }
    Ok(canonical_sum(&mut terms))
}

/// Ablation coefficients: K uniform draws normalized to the simplex.
pub fn random_coefficients(k: usize, rng: &mut ChaCha20Rng) -> Result<SimilarityScores> {
    use rand::Rng;
    if k < 1 {
        return Err(Error::Usage("random_coefficients needs K >= 1".into()));
    }
    // Rejection on an all-but-impossible zero draw keeps entries positive.
    loop {
        let vals: Vec<f64> = (0..k).map(|_| rng.gen::<f64>()).collect();
        let mut sorted = vals.clone();
        let sum = canonical_sum(&mut sorted);
        if sum <= 0.0 {
            continue;
        }
        let scores = SimilarityScores(vals.into_iter().map(|v| v / sum).collect());
        if scores.validate().is_ok() {
            return Ok(scores);
        }
    }
}

#[cfg(test)]
mod tests;
