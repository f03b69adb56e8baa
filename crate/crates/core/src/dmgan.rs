//! Two-stage text-to-image generator with dynamic-memory refinement.
//!
//! Feature maps are `[C, h, w]`. The initial stage maps noise plus the
//! text condition to an 8×8 feature grid `R0` and renders it. Each
//! refinement stage runs the four memory steps against the caption's word
//! features, then residual blocks and a ×2 upsample:
//!
//! ```text
//! write     g_t  = σ(a·w_t + b·r̄ + bias)
//!           v_t  = g_t·(M_w w_t + b_w) + (1 − g_t)·(M_r r̄ + b_r)
//!           k_t  = K w_t + b_k
//! address   α_jt = softmax_t((Q r_j + b_q)·k_t)
//! read      o_j  = Σ_t α_jt v_t
//! respond   o'_j = P o_j + b_p
//!           g_j  = σ(u·o'_j + u'·r_j + bias')
//!           r_j ← g_j·o'_j + (1 − g_j)·r_j
//! ```
//!
//! where `r̄` is the spatial mean of `R` and `r_j` its feature at location
//! `j`. Residual blocks compute `x + F(x)` with no activation after the
//! sum, so a zeroed `F` is the identity.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::graph::{concat, Graph, Var};
use crate::imageops;
use crate::nn::{clip_grad_norm, Optimizer, ParamStore, Params, Sgd};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::text_encoder::{
    condition_augment, damsm_loss, encode_image_regions, init_condition, DamsmModel, EncodedText, GaussianCondition,
};

pub const DMGAN_KIND: &str = "dmgan";
const LEAK: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmGanConfig {
    pub noise_dim: usize,
    pub cond_dim: usize,
    pub channels: usize,
    /// Side of `R0` and `x0`.
    pub base_side: usize,
    pub n_stages: usize,
    /// Width of the word and sentence features.
    pub word_dim: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    pub res_blocks: usize,
    pub disc_channels: usize,
}

impl DmGanConfig {
    pub fn desk(word_dim: usize) -> Self {
        DmGanConfig {
            noise_dim: 16,
            cond_dim: 16,
            channels: 32,
            base_side: 8,
            n_stages: 3,
            word_dim,
            key_dim: 16,
            value_dim: 16,
            res_blocks: 1,
            disc_channels: 16,
        }
    }

    pub fn stage_side(&self, stage: usize) -> usize {
        self.base_side << stage
    }
}

fn init_memory_stage<T: Scalar>(s: &mut ParamStore<T>, cfg: &DmGanConfig, prefix: &str, rng: &mut impl Rng) {
    let (d, c) = (cfg.word_dim, cfg.channels);
    s.insert(
        format!("{prefix}write.gate_word"),
        rng::normal_tensor(rng, &[d], (1.0 / d as f64).sqrt()),
    );
    s.insert(
        format!("{prefix}write.gate_image"),
        rng::normal_tensor(rng, &[c], (1.0 / c as f64).sqrt()),
    );
    s.insert(format!("{prefix}write.gate_bias"), Tensor::zeros([1]));
    s.init_linear(rng, &format!("{prefix}write.value_word"), d, cfg.value_dim);
    s.init_linear(rng, &format!("{prefix}write.value_image"), c, cfg.value_dim);
    s.init_linear(rng, &format!("{prefix}write.key"), d, cfg.key_dim);
    s.init_linear(rng, &format!("{prefix}address.query"), c, cfg.key_dim);
    s.init_linear(rng, &format!("{prefix}respond.proj"), cfg.value_dim, c);
    s.insert(
        format!("{prefix}respond.gate_response"),
        rng::normal_tensor(rng, &[c], (1.0 / c as f64).sqrt()),
    );
    s.insert(
        format!("{prefix}respond.gate_image"),
        rng::normal_tensor(rng, &[c], (1.0 / c as f64).sqrt()),
    );
    s.insert(format!("{prefix}respond.gate_bias"), Tensor::zeros([1]));
}

/// Fresh generator (`g.*`) and discriminator (`d{i}.*`) parameters.
pub fn init_dmgan<T: Scalar>(cfg: &DmGanConfig, seed: u64) -> ParamStore<T> {
    let mut rng = rng::derive(seed, "dmgan-init");
    let mut s = ParamStore::new();
    let c = cfg.channels;
    let side = cfg.base_side;
    init_condition(&mut s, "g.", cfg.word_dim, cfg.cond_dim, &mut rng);
    s.init_linear(&mut rng, "g.init.fc", cfg.noise_dim + cfg.cond_dim, c * side * side);
    s.init_conv(&mut rng, "g.init.conv", c, c, 3);
    for i in 0..cfg.n_stages {
        s.init_conv(&mut rng, &format!("g.render{i}"), c, 3, 3);
        if i == 0 {
            continue;
        }
        let prefix = format!("g.s{i}.");
        init_memory_stage(&mut s, cfg, &prefix, &mut rng);
        for j in 0..cfg.res_blocks {
            s.init_conv(&mut rng, &format!("{prefix}res{j}.conv1"), c, c, 3);
            s.init_conv(&mut rng, &format!("{prefix}res{j}.conv2"), c, c, 3);
            // keep the residual branch small at the start
            scale_in_place(s.get_mut(&format!("{prefix}res{j}.conv2.weight")).expect("inserted"), 0.1);
        }
        s.init_conv(&mut rng, &format!("{prefix}up"), c, c, 3);
    }
    let cd = cfg.disc_channels;
    for i in 0..cfg.n_stages {
        s.init_conv(&mut rng, &format!("d{i}.conv0"), 3, cd, 3);
        s.init_conv(&mut rng, &format!("d{i}.conv1"), cd, 2 * cd, 3);
        s.init_conv(&mut rng, &format!("d{i}.joint"), 2 * cd + cfg.word_dim, 2 * cd, 1);
        s.init_conv(&mut rng, &format!("d{i}.out"), 2 * cd, 1, 1);
    }
    s
}

fn scale_in_place<T: Scalar>(t: &mut Tensor<T>, c: f64) {
    let c = T::lit(c);
    for x in t.data_mut() {
        *x *= c;
    }
}

/// Dense layer applied to every row of `[R, in]`, giving `[R, out]`.
fn rows_linear<'g, T: Scalar>(p: &Params<'g, '_, T>, name: &str, x: Var<'g, T>) -> Var<'g, T> {
    let w = p.get(&format!("{name}.weight"));
    let b = p.get(&format!("{name}.bias"));
    let rows = x.shape()[0];
    x.matmul(w.transpose()) + b.expand_rows(rows)
}

fn ones_like<'g, T: Scalar>(x: Var<'g, T>) -> Var<'g, T> {
    x.graph().constant(Tensor::ones(x.shape()))
}

/// Standard-normal noise `z`, reproducible from its seed.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseVector<T> {
    pub values: Tensor<T>,
    pub seed: u64,
}

impl<T: Scalar> NoiseVector<T> {
    pub fn new(dim: usize, seed: u64) -> Self {
        NoiseVector {
            values: rng::normal_tensor(&mut rng::derive(seed, "noise-z"), &[dim], 1.0),
            seed,
        }
    }
}

/// `R0 = G0(z, c)` and its rendering `x0 = tanh(conv(R0))`.
pub fn initial_stage<'g, T: Scalar>(
    p: &Params<'g, '_, T>,
    cfg: &DmGanConfig,
    z: Var<'g, T>,
    c: Var<'g, T>,
) -> Result<(Var<'g, T>, Var<'g, T>)> {
    if z.shape() != [cfg.noise_dim] || c.shape() != [cfg.cond_dim] {
        return Err(Error::Shape(format!(
            "initial stage expects z [{}] and c [{}], got {:?} and {:?}",
            cfg.noise_dim,
            cfg.cond_dim,
            z.shape(),
            c.shape()
        )));
    }
    let side = cfg.base_side;
    let h = p
        .linear("g.init.fc", concat(&[z, c]))
        .leaky_relu(T::lit(LEAK))
        .reshape([cfg.channels, side, side]);
    let r0 = p.conv("g.init.conv", h, 1).leaky_relu(T::lit(LEAK));
    let x0 = render(p, 0, r0);
    Ok((r0, x0))
}

fn render<'g, T: Scalar>(p: &Params<'g, '_, T>, stage: usize, r: Var<'g, T>) -> Var<'g, T> {
    p.conv(&format!("g.render{stage}"), r, 1).tanh()
}

pub struct MemorySlots<'g, T: Scalar> {
    /// `[T, Dk]`.
    pub keys: Var<'g, T>,
    /// `[T, Dv]`.
    pub values: Var<'g, T>,
    /// `[T]`, each in `[0, 1]`.
    pub gates: Var<'g, T>,
}

/// Write one memory slot per word, gating word content against the image's
/// mean feature. `words` holds only valid (unmasked) rows.
pub fn memory_write<'g, T: Scalar>(p: &Params<'g, '_, T>, prefix: &str, words: Var<'g, T>, r: Var<'g, T>) -> Result<MemorySlots<'g, T>> {
    let a = p.get(&format!("{prefix}write.gate_word"));
    let b = p.get(&format!("{prefix}write.gate_image"));
    let ws = words.shape();
    let rs = r.shape();
    if ws.len() != 2 || ws[1] != a.shape()[0] || rs.len() != 3 || rs[0] != b.shape()[0] {
        return Err(Error::Shape(format!("memory write: words {ws:?}, image feature {rs:?}")));
    }
    let t = ws[0];
    let rbar = r.channel_mean();
    let image_term = b.dot(rbar).reshape([1]) + p.get(&format!("{prefix}write.gate_bias"));
    let gates = (words.matmul(a) + image_term.broadcast([t])).sigmoid();
    let from_words = rows_linear(p, &format!("{prefix}write.value_word"), words);
    let dv = from_words.shape()[1];
    let from_image = p.linear(&format!("{prefix}write.value_image"), rbar).expand_rows(t);
    let g = gates.expand_cols(dv);
    let values = g * from_words + (ones_like(g) - g) * from_image;
    let keys = rows_linear(p, &format!("{prefix}write.key"), words);
    Ok(MemorySlots { keys, values, gates })
}

/// Softmax over slots of query·key scores: `[N, Dk] × [T, Dk] → [N, T]`.
pub fn address_weights<'g, T: Scalar>(queries: Var<'g, T>, keys: Var<'g, T>) -> Var<'g, T> {
    queries.matmul(keys.transpose()).softmax()
}

/// Addressing weights `[h·w, T]` from a learned query per location.
pub fn key_address<'g, T: Scalar>(p: &Params<'g, '_, T>, prefix: &str, mem: &MemorySlots<'g, T>, r: Var<'g, T>) -> Result<Var<'g, T>> {
    let rs = r.shape();
    let q_in = p.get(&format!("{prefix}address.query.weight")).shape()[1];
    if rs.len() != 3 || rs[0] != q_in {
        return Err(Error::Shape(format!("key addressing: image feature {rs:?}, query input {q_in}")));
    }
    let n = rs[1] * rs[2];
    let locations = r.reshape([rs[0], n]).transpose();
    let queries = rows_linear(p, &format!("{prefix}address.query"), locations);
    Ok(address_weights(queries, mem.keys))
}

/// Weighted slot sum per location, as a `[Dv, h, w]` map.
pub fn value_read<'g, T: Scalar>(values: Var<'g, T>, weights: Var<'g, T>, h: usize, w: usize) -> Var<'g, T> {
    let dv = values.shape()[1];
    weights.matmul(values).transpose().reshape([dv, h, w])
}

/// Gated merge of the projected memory response with the image feature.
/// Returns the new feature map and the per-location gate `[h·w]`.
pub fn respond<'g, T: Scalar>(
    p: &Params<'g, '_, T>,
    prefix: &str,
    response: Var<'g, T>,
    r: Var<'g, T>,
) -> Result<(Var<'g, T>, Var<'g, T>)> {
    let (os, rs) = (response.shape(), r.shape());
    if os.len() != 3 || rs.len() != 3 || os[1..] != rs[1..] {
        return Err(Error::Shape(format!("respond: response {os:?}, image feature {rs:?}")));
    }
    let (c, h, w) = (rs[0], rs[1], rs[2]);
    let n = h * w;
    let projected = rows_linear(p, &format!("{prefix}respond.proj"), response.reshape([os[0], n]).transpose());
    if projected.shape()[1] != c {
        return Err(Error::Shape(format!(
            "respond: projection to {} channels, feature has {c}",
            projected.shape()[1]
        )));
    }
    let rr = r.reshape([c, n]);
    let score = projected.matmul(p.get(&format!("{prefix}respond.gate_response")))
        + rr.transpose().matmul(p.get(&format!("{prefix}respond.gate_image")))
        + p.get(&format!("{prefix}respond.gate_bias")).broadcast([n]);
    let gate = score.sigmoid();
    let g = gate.expand_rows(c);
    let o = projected.transpose();
    let merged = g * o + (ones_like(g) - g) * rr;
    Ok((merged.reshape([c, h, w]), gate))
}

/// `x + conv2(leaky(conv1(x)))`.
pub fn gen_residual<'g, T: Scalar>(p: &Params<'g, '_, T>, name: &str, x: Var<'g, T>) -> Var<'g, T> {
    let f = p.conv(&format!("{name}.conv1"), x, 1).leaky_relu(T::lit(LEAK));
    x + p.conv(&format!("{name}.conv2"), f, 1)
}

/// Nearest-neighbour ×2 followed by a 3×3 convolution.
pub fn upsample<'g, T: Scalar>(p: &Params<'g, '_, T>, name: &str, r: Var<'g, T>) -> Var<'g, T> {
    p.conv(name, r.upsample2x(), 1)
}

/// Everything one refinement stage computes, for inspection and tests.
pub struct RefineTrace<'g, T: Scalar> {
    pub memory: MemorySlots<'g, T>,
    pub weights: Var<'g, T>,
    pub response: Var<'g, T>,
    pub response_gate: Var<'g, T>,
    pub features: Var<'g, T>,
    pub image: Var<'g, T>,
}

/// `x_i = G_i(R_{i−1}, W)`: memory write, key addressing, value reading,
/// response, residual blocks, upsample, render.
pub fn refine_stage<'g, T: Scalar>(
    p: &Params<'g, '_, T>,
    cfg: &DmGanConfig,
    stage: usize,
    r_prev: Var<'g, T>,
    words: Var<'g, T>,
) -> Result<RefineTrace<'g, T>> {
    if stage == 0 || stage >= cfg.n_stages {
        return Err(Error::invalid(format!("refinement stage {stage} outside 1..{}", cfg.n_stages)));
    }
    let prefix = format!("g.s{stage}.");
    let rs = r_prev.shape();
    let memory = memory_write(p, &prefix, words, r_prev)?;
    let weights = key_address(p, &prefix, &memory, r_prev)?;
    let read = value_read(memory.values, weights, rs[1], rs[2]);
    let (mut r, response_gate) = respond(p, &prefix, read, r_prev)?;
    for j in 0..cfg.res_blocks {
        r = gen_residual(p, &format!("{prefix}res{j}"), r);
    }
    let features = upsample(p, &format!("{prefix}up"), r);
    let image = render(p, stage, features);
    Ok(RefineTrace {
        memory,
        weights,
        response: read,
        response_gate,
        features,
        image,
    })
}

pub struct GeneratorOutput<'g, T: Scalar> {
    pub features: Vec<Var<'g, T>>,
    /// One `[3, S, S]` image in `[−1, 1]` per stage.
    pub images: Vec<Var<'g, T>>,
    pub condition: GaussianCondition<'g, T>,
    pub kl: Var<'g, T>,
}

/// Run the generator through `n_stages` stages. `words` holds only valid
/// word rows; `noise_seed` drives both `z` and the condition sample.
pub fn generator_forward<'g, T: Scalar>(
    p: &Params<'g, '_, T>,
    cfg: &DmGanConfig,
    words: Var<'g, T>,
    sentence: Var<'g, T>,
    noise_seed: u64,
    n_stages: usize,
) -> Result<GeneratorOutput<'g, T>> {
    if n_stages == 0 || n_stages > cfg.n_stages {
        return Err(Error::invalid(format!("n_stages must be in 1..={}, got {n_stages}", cfg.n_stages)));
    }
    if sentence.shape() != [cfg.word_dim] {
        return Err(Error::Shape(format!(
            "sentence feature {:?}, expected [{}]",
            sentence.shape(),
            cfg.word_dim
        )));
    }
    let g = p.graph();
    let z = g.constant(NoiseVector::<T>::new(cfg.noise_dim, noise_seed).values);
    let (condition, kl) = condition_augment(p, "g.", sentence, noise_seed);
    let (mut r, x0) = initial_stage(p, cfg, z, condition.sample)?;
    let mut features = vec![r];
    let mut images = vec![x0];
    for stage in 1..n_stages {
        let t = refine_stage(p, cfg, stage, r, words)?;
        r = t.features;
        features.push(r);
        images.push(t.image);
    }
    Ok(GeneratorOutput {
        features,
        images,
        condition,
        kl,
    })
}

/// Valid word rows of an encoded caption.
fn valid_words<T: Scalar>(text: &EncodedText<T>) -> Tensor<T> {
    let d = text.words.shape()[1];
    let mut data = Vec::new();
    for (i, &m) in text.mask.iter().enumerate() {
        if m {
            data.extend_from_slice(text.words.row(i));
        }
    }
    if data.is_empty() {
        // a caption of padding only still needs one slot
        data.extend_from_slice(text.words.row(0));
    }
    let t = data.len() / d;
    Tensor::from_vec(vec![t, d], data).expect("rows of width d")
}

/// Per-stage conditional critic: two stride-2 convolutions, the sentence
/// feature tiled and concatenated, a 1×1 joint layer, and the spatial mean
/// of a 1×1 output map.
pub fn discriminate<'g, T: Scalar>(p: &Params<'g, '_, T>, stage: usize, image: Var<'g, T>, sentence: Var<'g, T>) -> Var<'g, T> {
    let leak = T::lit(LEAK);
    let x = p.conv(&format!("d{stage}.conv0"), image, 2).leaky_relu(leak);
    let x = p.conv(&format!("d{stage}.conv1"), x, 2).leaky_relu(leak);
    let s = x.shape();
    let d = sentence.shape()[0];
    let tiled = sentence.expand_cols(s[1] * s[2]).reshape([d, s[1], s[2]]);
    let x = p.conv(&format!("d{stage}.joint"), concat(&[x, tiled]), 1).leaky_relu(leak);
    p.conv(&format!("d{stage}.out"), x, 1).mean()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub text: String,
    pub seed: u64,
    pub checkpoint_id: String,
    pub text_encoder_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedImage<T> {
    /// `[3, S, S]` in `[−1, 1]`.
    pub image: Tensor<T>,
    pub stage: usize,
    pub provenance: Provenance,
}

impl<T: Scalar> GeneratedImage<T> {
    pub fn to_png(&self) -> Vec<u8> {
        imageops::encode_png(&imageops::from_signed(&self.image))
    }

    /// Write the PNG and a JSON sidecar with the same stem.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::checkpoint::write_atomic(path, &self.to_png())?;
        let meta = serde_json::json!({ "stage": self.stage, "provenance": self.provenance });
        crate::checkpoint::write_atomic(&path.with_extension("json"), meta.to_string().as_bytes())
    }
}

/// Generator and discriminators together with the frozen text encoder
/// whose features they consume.
#[derive(Debug, Clone)]
pub struct GanModel<T> {
    pub config: DmGanConfig,
    pub params: ParamStore<T>,
    pub text: DamsmModel<T>,
}

impl<T: Scalar> GanModel<T> {
    pub fn new(config: DmGanConfig, text: DamsmModel<T>, seed: u64) -> Result<Self> {
        if config.word_dim != text.config.text.feature_dim() {
            return Err(Error::invalid(format!(
                "generator word width {} differs from text encoder width {}",
                config.word_dim,
                text.config.text.feature_dim()
            )));
        }
        Ok(GanModel {
            params: init_dmgan(&config, seed),
            config,
            text,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        let metadata = serde_json::json!({
            "config": self.config,
            "text_encoder": self.text.to_checkpoint().id(),
        });
        Checkpoint::new(DMGAN_KIND, metadata, self.params.clone())
    }

    /// Pair a generator checkpoint with the text encoder it was trained on.
    pub fn from_checkpoint(ck: Checkpoint<T>, text: DamsmModel<T>) -> Result<Self> {
        ck.expect_kind(DMGAN_KIND)?;
        let config: DmGanConfig =
            serde_json::from_value(ck.metadata["config"].clone()).map_err(|e| Error::Checkpoint(format!("bad generator config: {e}")))?;
        let expected = ck.metadata["text_encoder"].as_str().unwrap_or_default();
        let actual = text.to_checkpoint().id();
        if expected != actual {
            return Err(Error::Checkpoint(format!(
                "generator was trained with text encoder {expected}, got {actual}"
            )));
        }
        let template = GanModel::<T>::new(config, text, 0).map_err(|e| Error::Checkpoint(e.to_string()))?;
        ck.params.expect_layout(&template.params)?;
        Ok(GanModel {
            params: ck.params,
            ..template
        })
    }

    /// One image per stage for `text`; unknown words encode as UNK.
    pub fn generate(&self, text: &str, seed: u64, n_stages: usize) -> Result<Vec<GeneratedImage<T>>> {
        let encoded = self.text.encode_caption(text)?;
        let g = Graph::new();
        let p = Params::frozen(&g, &self.params);
        let out = generator_forward(
            &p,
            &self.config,
            g.constant(valid_words(&encoded)),
            g.constant(encoded.sentence.clone()),
            seed,
            n_stages,
        )?;
        let provenance = Provenance {
            text: text.to_string(),
            seed,
            checkpoint_id: self.to_checkpoint().id(),
            text_encoder_id: self.text.to_checkpoint().id(),
        };
        Ok(out
            .images
            .iter()
            .enumerate()
            .map(|(stage, x)| GeneratedImage {
                image: x.tensor(),
                stage,
                provenance: provenance.clone(),
            })
            .collect())
    }
}

/// A training pair: target images per stage in `[−1, 1]` plus the frozen
/// caption encoding.
#[derive(Debug, Clone)]
pub struct GanSample<T> {
    pub pyramid: Vec<Tensor<T>>,
    pub text: EncodedText<T>,
}

impl<T: Scalar> GanSample<T> {
    /// Build the per-stage targets from a `[3, H, W]` image in `[0, 1]`.
    pub fn new(model: &GanModel<T>, image: &Tensor<T>, caption: &str) -> Result<Self> {
        let text = model.text.encode_caption(caption)?;
        let two = T::lit(2.0);
        let pyramid = (0..model.config.n_stages)
            .map(|i| {
                let side = model.config.stage_side(i);
                let (h, w) = (image.shape()[1], image.shape()[2]);
                let small = if h == w && h % side == 0 {
                    imageops::downsample(image, h / side)
                } else {
                    imageops::resize_bilinear(image, side, side)
                };
                small.map(|x| x * two - T::one())
            })
            .collect();
        Ok(GanSample { pyramid, text })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanTrainConfig {
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub momentum: f64,
    pub lambda_adv: f64,
    pub lambda_ca: f64,
    pub lambda_damsm: f64,
    /// Weight of the per-stage pixel reconstruction term.
    pub lambda_rec: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// Reuse one noise seed per batch position instead of drawing fresh
    /// noise every step.
    pub fixed_noise: bool,
    pub freeze_discriminator: bool,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        GanTrainConfig {
            batch_size: 4,
            lr_g: 0.02,
            lr_d: 0.02,
            momentum: 0.5,
            lambda_adv: 0.1,
            lambda_ca: 1.0,
            lambda_damsm: 1.0,
            lambda_rec: 1.0,
            grad_clip: 5.0,
            seed: 0,
            fixed_noise: false,
            freeze_discriminator: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageLosses {
    pub discriminator: f64,
    pub generator_adv: f64,
    pub reconstruction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanLosses {
    /// Total generator objective.
    pub generator: f64,
    pub discriminator: f64,
    pub ca: f64,
    /// Matching-loss term; 0 when skipped (batch of one or zero weight).
    pub damsm: f64,
    pub reconstruction: f64,
    pub stages: Vec<StageLosses>,
}

pub struct GanTrainer<T: Scalar> {
    pub model: GanModel<T>,
    pub config: GanTrainConfig,
    pub step: u64,
    opt_g: Sgd<T>,
    opt_d: Sgd<T>,
}

fn finite(value: f64, term: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite { term: term.to_string() })
    }
}

impl<T: Scalar> GanTrainer<T> {
    pub fn new(model: GanModel<T>, config: GanTrainConfig) -> Self {
        let m = T::lit(config.momentum);
        GanTrainer {
            opt_g: Sgd::new(T::lit(config.lr_g), m),
            opt_d: Sgd::new(T::lit(config.lr_d), m),
            model,
            config,
            step: 0,
        }
    }

    fn noise_seed(&self, index: usize) -> u64 {
        let tag = if self.config.fixed_noise {
            format!("gan-noise-{index}")
        } else {
            format!("gan-noise-{}-{index}", self.step)
        };
        rng::derive(self.config.seed, &tag).random()
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self, batch: &[GanSample<T>]) -> Result<GanLosses> {
        if batch.is_empty() {
            return Err(Error::invalid("empty training batch"));
        }
        let cfg = self.model.config.clone();
        let n_stages = cfg.n_stages;
        let inv_b = T::one() / T::from_usize(batch.len()).unwrap();
        let seeds: Vec<u64> = (0..batch.len()).map(|i| self.noise_seed(i)).collect();
        let is_gen = |n: &str| n.starts_with("g.");

        // discriminator
        let mut d_stage = vec![0.0; n_stages];
        let d_total = {
            let g = Graph::new();
            let p = Params::with_trainable(&g, &self.model.params, |n| !is_gen(n));
            let mut terms = Vec::new();
            for (sample, &seed) in batch.iter().zip(&seeds) {
                let words = g.constant(valid_words(&sample.text));
                let sentence = g.constant(sample.text.sentence.clone());
                let out = generator_forward(&p, &cfg, words, sentence, seed, n_stages)?;
                for (stage, fake) in out.images.iter().enumerate() {
                    let fake = g.constant(fake.tensor());
                    let real = g.constant(sample.pyramid[stage].clone());
                    let lr = discriminate(&p, stage, real, sentence).neg().add_scalar(T::one()).relu();
                    let lf = discriminate(&p, stage, fake, sentence).add_scalar(T::one()).relu();
                    let l = (lr + lf).scale(inv_b);
                    d_stage[stage] += l.item().to_f64_lossy();
                    terms.push(l.reshape([1]));
                }
            }
            let loss = concat(&terms).sum();
            let value = finite(loss.item().to_f64_lossy(), "discriminator")?;
            if !self.config.freeze_discriminator {
                let grads = g.backward(loss);
                let mut gm = p.gradients(&grads);
                clip_grad_norm(&mut gm, T::lit(self.config.grad_clip));
                drop(p);
                self.opt_d.step(&mut self.model.params, &gm);
            }
            value
        };

        // generator
        let g = Graph::new();
        let p = Params::with_trainable(&g, &self.model.params, is_gen);
        let text_p = Params::frozen(&g, &self.model.text.params);
        let mut adv_stage = vec![0.0; n_stages];
        let mut rec_stage = vec![0.0; n_stages];
        let mut adv_terms = Vec::new();
        let mut rec_terms = Vec::new();
        let mut kl_terms = Vec::new();
        let mut sentences = Vec::new();
        let mut globals = Vec::new();
        for (sample, &seed) in batch.iter().zip(&seeds) {
            let words = g.constant(valid_words(&sample.text));
            let sentence = g.constant(sample.text.sentence.clone());
            let out = generator_forward(&p, &cfg, words, sentence, seed, n_stages)?;
            kl_terms.push(out.kl.reshape([1]));
            for (stage, &fake) in out.images.iter().enumerate() {
                let adv = discriminate(&p, stage, fake, sentence).neg().scale(inv_b);
                adv_stage[stage] += adv.item().to_f64_lossy();
                adv_terms.push(adv.reshape([1]));
                let target = g.constant(sample.pyramid[stage].clone());
                let rec = (fake - target).square().mean().scale(inv_b);
                rec_stage[stage] += rec.item().to_f64_lossy();
                rec_terms.push(rec.reshape([1]));
            }
            if batch.len() >= 2 && self.config.lambda_damsm != 0.0 {
                let last = *out.images.last().expect("at least one stage");
                let mut x = last.add_scalar(T::one()).scale(T::lit(0.5));
                let side = self.model.text.config.image_side;
                while x.shape()[1] < side {
                    x = x.upsample2x();
                }
                if x.shape()[1] != side {
                    return Err(Error::invalid(format!(
                        "final stage side {} cannot reach encoder side {side} by doubling",
                        x.shape()[1]
                    )));
                }
                let regions = encode_image_regions(&text_p, &self.model.text.config.image, x)?;
                sentences.push(sentence);
                globals.push(regions.global);
            }
        }
        let adv = concat(&adv_terms).sum();
        let rec = concat(&rec_terms).sum();
        let ca = concat(&kl_terms).mean();
        let mut total =
            adv.scale(T::lit(self.config.lambda_adv)) + ca.scale(T::lit(self.config.lambda_ca)) + rec.scale(T::lit(self.config.lambda_rec));
        let mut damsm = 0.0;
        if !sentences.is_empty() {
            let l = damsm_loss(&sentences, &globals, T::lit(self.model.text.config.temperature))?;
            damsm = finite(l.item().to_f64_lossy(), "matching")?;
            total = total + l.scale(T::lit(self.config.lambda_damsm));
        }
        finite(adv.item().to_f64_lossy(), "generator adversarial")?;
        let ca_v = finite(ca.item().to_f64_lossy(), "conditioning augmentation")?;
        let rec_v = finite(rec.item().to_f64_lossy(), "reconstruction")?;
        let total_v = finite(total.item().to_f64_lossy(), "generator")?;
        let grads = g.backward(total);
        let mut gm = p.gradients(&grads);
        clip_grad_norm(&mut gm, T::lit(self.config.grad_clip));
        drop(p);
        drop(text_p);
        self.opt_g.step(&mut self.model.params, &gm);
        if !self.model.params.is_finite() {
            return Err(Error::NonFinite {
                term: "generator parameters".into(),
            });
        }
        self.step += 1;

        Ok(GanLosses {
            generator: total_v,
            discriminator: d_total,
            ca: ca_v,
            damsm,
            reconstruction: rec_v,
            stages: (0..n_stages)
                .map(|i| StageLosses {
                    discriminator: d_stage[i],
                    generator_adv: adv_stage[i],
                    reconstruction: rec_stage[i],
                })
                .collect(),
        })
    }
}
