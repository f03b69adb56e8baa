//! Paired text/image encoders, word–region attention, the global matching
//! loss, and Gaussian conditioning augmentation.
//!
//! The text encoder is a bidirectional LSTM over token embeddings. Word
//! features are the concatenated forward/backward hidden states (width
//! `D = 2·hidden`); the sentence feature is a linear projection of the two
//! directions' final states back to `D`. The image encoder is a stack of
//! stride-2 convolutions whose last layer is linear, producing a `D`-channel
//! region grid; the global image feature is its spatial mean.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::graph::{concat, Graph, Var};
use crate::imageops;
use crate::nn::{clip_grad_norm, Adam, Optimizer, ParamStore, Params};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Denominator floor for cosine similarities.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Hidden width per direction; features are `2 * hidden` wide.
    pub hidden: usize,
}

impl TextEncoderConfig {
    pub fn feature_dim(&self) -> usize {
        2 * self.hidden
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageEncoderConfig {
    /// Output channels of each stride-2 convolution before the last one.
    pub channels: Vec<usize>,
    /// Region feature width; must equal the text feature width.
    pub feature_dim: usize,
}

impl ImageEncoderConfig {
    pub fn stride(&self) -> usize {
        1 << (self.channels.len() + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DamsmConfig {
    pub text: TextEncoderConfig,
    pub image: ImageEncoderConfig,
    /// Temperature applied to the similarity logits of the matching loss.
    pub temperature: f64,
    /// Weight of the word-level term in [`damsm_similarity`]; the global
    /// matching loss never uses it.
    pub word_weight: f64,
    /// Side length images are resized to before encoding.
    pub image_side: usize,
}

impl DamsmConfig {
    pub fn desk(vocab_size: usize) -> Self {
        DamsmConfig {
            text: TextEncoderConfig {
                vocab_size,
                embed_dim: 16,
                hidden: 16,
            },
            image: ImageEncoderConfig {
                channels: vec![16, 32],
                feature_dim: 32,
            },
            temperature: 1.0,
            word_weight: 0.0,
            image_side: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.text.feature_dim() != self.image.feature_dim {
            return Err(Error::invalid(format!(
                "text feature width {} differs from image feature width {}",
                self.text.feature_dim(),
                self.image.feature_dim
            )));
        }
        if !self.image_side.is_multiple_of(self.image.stride()) {
            return Err(Error::invalid("image side must be a multiple of the encoder stride"));
        }
        Ok(())
    }
}

pub fn init_text_encoder<T: Scalar>(store: &mut ParamStore<T>, cfg: &TextEncoderConfig, rng: &mut impl Rng) {
    let (e, h) = (cfg.embed_dim, cfg.hidden);
    store.insert("text.embed", rng::normal_tensor(rng, &[cfg.vocab_size, e], 0.5));
    for dir in ["fwd", "bwd"] {
        store.insert(
            format!("text.{dir}.w_ih"),
            rng::normal_tensor(rng, &[4 * h, e], (1.0 / e as f64).sqrt()),
        );
        store.insert(
            format!("text.{dir}.w_hh"),
            rng::normal_tensor(rng, &[4 * h, h], (1.0 / h as f64).sqrt()),
        );
        // forget-gate bias starts at 1
        let mut b = Tensor::zeros([4 * h]);
        for x in &mut b.data_mut()[h..2 * h] {
            *x = T::one();
        }
        store.insert(format!("text.{dir}.bias"), b);
    }
    store.init_linear(rng, "text.sent", 2 * h, cfg.feature_dim());
}

pub fn init_image_encoder<T: Scalar>(store: &mut ParamStore<T>, cfg: &ImageEncoderConfig, rng: &mut impl Rng) {
    let mut cin = 3;
    for (i, &c) in cfg.channels.iter().enumerate() {
        store.init_conv(rng, &format!("image.conv{i}"), cin, c, 3);
        cin = c;
    }
    store.init_conv(rng, &format!("image.conv{}", cfg.channels.len()), cin, cfg.feature_dim, 3);
}

/// Fresh text and image encoder parameters.
pub fn init_damsm<T: Scalar>(cfg: &DamsmConfig, seed: u64) -> ParamStore<T> {
    let mut rng = rng::derive(seed, "damsm-init");
    let mut store = ParamStore::new();
    init_text_encoder(&mut store, &cfg.text, &mut rng);
    init_image_encoder(&mut store, &cfg.image, &mut rng);
    store
}

/// Per-word features `[T, D]` with a validity mask (false at PAD).
#[derive(Clone, Copy)]
pub struct WordFeatures<'g, T: Scalar> {
    pub features: Var<'g, T>,
    pub mask: &'g [bool],
}

pub struct TextFeatures<'g, T: Scalar> {
    /// `[T, D]`.
    pub words: Var<'g, T>,
    /// `[D]`.
    pub sentence: Var<'g, T>,
    /// `true` for real tokens, `false` for PAD.
    pub mask: Vec<bool>,
}

/// Embedding rows `[T, E]` for `ids`.
pub fn embed<'g, T: Scalar>(p: &Params<'g, '_, T>, ids: &[usize]) -> Result<Var<'g, T>> {
    let table = p.get("text.embed");
    let vocab = table.shape()[0];
    if ids.is_empty() {
        return Err(Error::invalid("token sequence must have at least one id"));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
        return Err(Error::invalid(format!("token id {bad} out of range for vocabulary of {vocab}")));
    }
    Ok(table.gather_rows(ids))
}

fn lstm_step<'g, T: Scalar>(
    p: &Params<'g, '_, T>,
    dir: &str,
    x: Var<'g, T>,
    h: Var<'g, T>,
    c: Var<'g, T>,
    hidden: usize,
) -> (Var<'g, T>, Var<'g, T>) {
    let gates =
        p.get(&format!("text.{dir}.w_ih")).matmul(x) + p.get(&format!("text.{dir}.w_hh")).matmul(h) + p.get(&format!("text.{dir}.bias"));
    let i = gates.slice(0, hidden).sigmoid();
    let f = gates.slice(hidden, hidden).sigmoid();
    let g = gates.slice(2 * hidden, hidden).tanh();
    let o = gates.slice(3 * hidden, hidden).sigmoid();
    let c = f * c + i * g;
    (o * c.tanh(), c)
}

/// Bidirectional LSTM encoding of a token sequence.
pub fn encode_text<'g, T: Scalar>(p: &Params<'g, '_, T>, cfg: &TextEncoderConfig, ids: &[usize]) -> Result<TextFeatures<'g, T>> {
    let g = p.graph();
    let emb = embed(p, ids)?;
    let n = ids.len();
    let h = cfg.hidden;
    let xs: Vec<Var<'g, T>> = (0..n).map(|t| emb.slice(t, 1).reshape([cfg.embed_dim])).collect();

    let run = |dir: &str, order: &mut dyn Iterator<Item = usize>| {
        let mut hs = vec![None; n];
        let mut state = (g.constant(Tensor::zeros([h])), g.constant(Tensor::zeros([h])));
        for t in order {
            state = lstm_step(p, dir, xs[t], state.0, state.1, h);
            hs[t] = Some(state.0);
        }
        (hs.into_iter().map(|x| x.expect("every step visited")).collect::<Vec<_>>(), state.0)
    };
    let (fwd, fwd_last) = run("fwd", &mut (0..n));
    let (bwd, bwd_last) = run("bwd", &mut (0..n).rev());

    let rows: Vec<Var<'g, T>> = fwd.iter().zip(&bwd).map(|(&f, &b)| concat(&[f, b]).reshape([1, 2 * h])).collect();
    let words = concat(&rows);
    let sentence = p.linear("text.sent", concat(&[fwd_last, bwd_last]));
    Ok(TextFeatures {
        words,
        sentence,
        mask: ids.iter().map(|&i| i != crate::corpus::PAD).collect(),
    })
}

pub struct RegionFeatures<'g, T: Scalar> {
    /// `[D, h, w]`.
    pub grid: Var<'g, T>,
    /// `[D]`, spatial mean of the grid.
    pub global: Var<'g, T>,
}

/// Convolutional region features for a `[3, H, W]` image in `[0, 1]`.
pub fn encode_image_regions<'g, T: Scalar>(
    p: &Params<'g, '_, T>,
    cfg: &ImageEncoderConfig,
    image: Var<'g, T>,
) -> Result<RegionFeatures<'g, T>> {
    let shape = image.shape();
    let stride = cfg.stride();
    if shape.len() != 3
        || shape[0] != 3
        || !shape[1].is_multiple_of(stride)
        || !shape[2].is_multiple_of(stride)
        || shape[1] == 0
        || shape[2] == 0
    {
        return Err(Error::Shape(format!(
            "image encoder needs [3, H, W] with H, W multiples of {stride}, got {shape:?}"
        )));
    }
    let mut x = image;
    for i in 0..cfg.channels.len() {
        x = p.conv(&format!("image.conv{i}"), x, 2).relu();
    }
    let grid = p.conv(&format!("image.conv{}", cfg.channels.len()), x, 2);
    Ok(RegionFeatures {
        grid,
        global: grid.channel_mean(),
    })
}

pub struct Attention<'g, T: Scalar> {
    /// `[T, N]`, each row a distribution over the `N = h·w` regions.
    pub weights: Var<'g, T>,
    /// `[T, D]` attention-weighted region features per word.
    pub context: Var<'g, T>,
}

/// Softmax attention of each word over image regions. Masked words get a
/// uniform row.
pub fn word_region_attention<'g, T: Scalar>(
    words: Var<'g, T>,
    mask: &[bool],
    grid: Var<'g, T>,
    temperature: T,
) -> Result<Attention<'g, T>> {
    let g = words.graph();
    let ws = words.shape();
    let gs = grid.shape();
    if ws.len() != 2 || gs.len() != 3 || ws[1] != gs[0] || mask.len() != ws[0] {
        return Err(Error::Shape(format!(
            "attention: words {ws:?}, regions {gs:?}, mask {}",
            mask.len()
        )));
    }
    let (t, d) = (ws[0], ws[1]);
    let n = gs[1] * gs[2];
    let regions = grid.reshape([d, n]);
    let scores = words.matmul(regions).scale(temperature);
    let mut rows = Vec::with_capacity(t);
    for (i, &valid) in mask.iter().enumerate() {
        rows.push(if valid {
            scores.slice(i, 1).softmax()
        } else {
            g.constant(Tensor::full([1, n], T::one() / T::from_usize(n).unwrap()))
        });
    }
    let weights = concat(&rows);
    let context = weights.matmul(regions.transpose());
    Ok(Attention { weights, context })
}

/// Cosine similarity of two vectors, with the norm product floored at
/// [`COSINE_EPS`].
pub fn cosine<'g, T: Scalar>(a: Var<'g, T>, b: Var<'g, T>) -> Var<'g, T> {
    let norms = a.square().sum().sqrt() * b.square().sum().sqrt();
    let eps = T::lit(COSINE_EPS);
    let denom = if norms.item() < eps { a.graph().scalar(eps) } else { norms };
    a.dot(b).div(denom)
}

/// Image–text relevance: cosine of sentence and global image features,
/// plus `word_weight` times the mean word/context cosine over valid words.
pub fn damsm_similarity<'g, T: Scalar>(
    words: Var<'g, T>,
    mask: &[bool],
    sentence: Var<'g, T>,
    regions: &RegionFeatures<'g, T>,
    word_weight: T,
) -> Result<Var<'g, T>> {
    if sentence.shape() != regions.global.shape() {
        return Err(Error::Shape(format!(
            "sentence {:?} vs global image feature {:?}",
            sentence.shape(),
            regions.global.shape()
        )));
    }
    let global = cosine(sentence, regions.global);
    if word_weight == T::zero() {
        return Ok(global);
    }
    let att = word_region_attention(words, mask, regions.grid, T::one())?;
    let valid: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    if valid.is_empty() {
        return Ok(global);
    }
    let terms: Vec<Var<'g, T>> = valid
        .iter()
        .map(|&i| cosine(words.slice(i, 1).flatten(), att.context.slice(i, 1).flatten()).reshape([1]))
        .collect();
    Ok(global + concat(&terms).mean().scale(word_weight))
}

/// Symmetric cross-entropy over the `B × B` matrix of sentence/image cosine
/// logits: the mean of −log P(image i | caption i) plus the mean of
/// −log P(caption i | image i).
pub fn damsm_loss<'g, T: Scalar>(sentences: &[Var<'g, T>], images: &[Var<'g, T>], temperature: T) -> Result<Var<'g, T>> {
    let b = sentences.len();
    if b < 2 {
        return Err(Error::invalid("matching loss needs a batch of at least 2 pairs"));
    }
    if images.len() != b {
        return Err(Error::invalid(format!("{b} captions but {} images", images.len())));
    }
    let unit = |v: Var<'g, T>| {
        let n = v.square().sum().sqrt();
        let eps = T::lit(COSINE_EPS);
        let n = if n.item() < eps { v.graph().scalar(eps) } else { n };
        let d = v.shape()[0];
        v.div(n.broadcast([d])).reshape([1, d])
    };
    let s = concat(&sentences.iter().map(|&v| unit(v)).collect::<Vec<_>>());
    let im = concat(&images.iter().map(|&v| unit(v)).collect::<Vec<_>>());
    let logits = s.matmul(im.transpose()).scale(temperature);
    let diag: Vec<usize> = (0..b).map(|i| i * b + i).collect();
    let inv_b = T::one() / T::from_usize(b).unwrap();
    let text_to_image = logits.log_softmax().pick(&diag).sum();
    let image_to_text = logits.transpose().log_softmax().pick(&diag).sum();
    Ok((text_to_image + image_to_text).scale(-inv_b))
}

/// KL(N(μ, diag σ²) ‖ N(0, I)) = ½ Σ (μ² + σ² − 1 − log σ²), from
/// `log_var = log σ²`.
pub fn kl_gauss_std<'g, T: Scalar>(mu: Var<'g, T>, log_var: Var<'g, T>) -> Var<'g, T> {
    let terms = mu.square() + log_var.exp() - log_var;
    terms
        .sum()
        .add_scalar(-T::from_usize(mu.value().numel()).unwrap())
        .scale(T::lit(0.5))
}

/// Plain-value form of [`kl_gauss_std`].
pub fn kl_gauss_std_value<T: Scalar>(mu: &[T], log_var: &[T]) -> T {
    assert_eq!(mu.len(), log_var.len());
    let half = T::lit(0.5);
    mu.iter()
        .zip(log_var)
        .map(|(&m, &lv)| half * (m * m + lv.exp() - T::one() - lv))
        .sum()
}

pub struct GaussianCondition<'g, T: Scalar> {
    pub mu: Var<'g, T>,
    pub log_var: Var<'g, T>,
    /// `mu + exp(log_var / 2) ⊙ noise`.
    pub sample: Var<'g, T>,
    pub noise: Tensor<T>,
    pub noise_seed: u64,
}

pub fn init_condition<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, feature_dim: usize, cond_dim: usize, rng: &mut impl Rng) {
    store.init_linear(rng, &format!("{prefix}ca"), feature_dim, 2 * cond_dim);
    // start with a small variance head so early samples stay near the mean
    let w = store.get_mut(&format!("{prefix}ca.weight")).expect("just inserted");
    for x in w.data_mut() {
        *x *= T::lit(0.5);
    }
}

/// Standard-normal noise for the conditioning sample.
pub fn condition_noise<T: Scalar>(cond_dim: usize, seed: u64) -> Tensor<T> {
    rng::normal_tensor(&mut rng::derive(seed, "condition-noise"), &[cond_dim], 1.0)
}

/// Sample the text condition c ~ N(μ(s), Σ(s)) by reparameterization and
/// return it with its KL penalty toward N(0, I).
pub fn condition_augment<'g, T: Scalar>(
    p: &Params<'g, '_, T>,
    prefix: &str,
    sentence: Var<'g, T>,
    seed: u64,
) -> (GaussianCondition<'g, T>, Var<'g, T>) {
    let stats = p.linear(&format!("{prefix}ca"), sentence);
    let cond_dim = stats.shape()[0] / 2;
    let mu = stats.slice(0, cond_dim);
    let log_var = stats.slice(cond_dim, cond_dim);
    let noise = condition_noise::<T>(cond_dim, seed);
    let eps = p.graph().constant(noise.clone());
    let sample = mu + log_var.scale(T::lit(0.5)).exp() * eps;
    let kl = kl_gauss_std(mu, log_var);
    (
        GaussianCondition {
            mu,
            log_var,
            sample,
            noise,
            noise_seed: seed,
        },
        kl,
    )
}

/// Plain tensors from an inference pass of the text encoder.
#[derive(Debug, Clone)]
pub struct EncodedText<T> {
    pub words: Tensor<T>,
    pub sentence: Tensor<T>,
    pub mask: Vec<bool>,
}

pub fn encode_text_frozen<T: Scalar>(store: &ParamStore<T>, cfg: &TextEncoderConfig, ids: &[usize]) -> Result<EncodedText<T>> {
    let g = Graph::new();
    let p = Params::frozen(&g, store);
    let f = encode_text(&p, cfg, ids)?;
    Ok(EncodedText {
        words: f.words.tensor(),
        sentence: f.sentence.tensor(),
        mask: f.mask,
    })
}

/// Global image feature from an inference pass of the image encoder.
pub fn encode_image_frozen<T: Scalar>(
    store: &ParamStore<T>,
    cfg: &ImageEncoderConfig,
    image: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let g = Graph::new();
    let p = Params::frozen(&g, store);
    let r = encode_image_regions(&p, cfg, g.constant(image.clone()))?;
    Ok((r.grid.tensor(), r.global.tensor()))
}

pub const DAMSM_KIND: &str = "damsm";

/// Trained text/image encoder pair together with its vocabulary.
#[derive(Debug, Clone)]
pub struct DamsmModel<T> {
    pub config: DamsmConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore<T>,
}

impl<T: Scalar> DamsmModel<T> {
    pub fn new(config: DamsmConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.text.vocab_size != vocab.len() {
            return Err(Error::invalid(format!(
                "config vocabulary size {} but vocabulary has {} entries",
                config.text.vocab_size,
                vocab.len()
            )));
        }
        let params = init_damsm(&config, seed);
        Ok(DamsmModel { config, vocab, params })
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        let metadata = serde_json::json!({
            "config": self.config,
            "vocab": self.vocab.words(),
        });
        Checkpoint::new(DAMSM_KIND, metadata, self.params.clone())
    }

    pub fn from_checkpoint(ck: Checkpoint<T>) -> Result<Self> {
        ck.expect_kind(DAMSM_KIND)?;
        let config: DamsmConfig =
            serde_json::from_value(ck.metadata["config"].clone()).map_err(|e| Error::Checkpoint(format!("bad encoder config: {e}")))?;
        let words: Vec<String> =
            serde_json::from_value(ck.metadata["vocab"].clone()).map_err(|e| Error::Checkpoint(format!("bad vocabulary: {e}")))?;
        let vocab = Vocabulary::from_tokens(words)?;
        let template = DamsmModel::<T>::new(config, vocab, 0).map_err(|e| Error::Checkpoint(e.to_string()))?;
        ck.params.expect_layout(&template.params)?;
        Ok(DamsmModel {
            params: ck.params,
            ..template
        })
    }

    pub fn encode_caption(&self, text: &str) -> Result<EncodedText<T>> {
        encode_text_frozen(&self.params, &self.config.text, &self.vocab.encode(text))
    }

    /// Resize to the encoder's input side when needed.
    pub fn prepare_image(&self, image: &Tensor<T>) -> Tensor<T> {
        let side = self.config.image_side;
        if image.shape()[1] == side && image.shape()[2] == side {
            image.clone()
        } else {
            imageops::resize_bilinear(image, side, side)
        }
    }

    /// Region grid and global feature of a `[3, H, W]` image in `[0, 1]`.
    pub fn encode_image(&self, image: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        encode_image_frozen(&self.params, &self.config.image, &self.prepare_image(image))
    }

    /// Relevance of `text` to `image` under [`damsm_similarity`].
    pub fn similarity(&self, text: &EncodedText<T>, grid: &Tensor<T>) -> Result<T> {
        let g = Graph::new();
        let grid = g.constant(grid.clone());
        let regions = RegionFeatures {
            grid,
            global: grid.channel_mean(),
        };
        let s = damsm_similarity(
            g.constant(text.words.clone()),
            &text.mask,
            g.constant(text.sentence.clone()),
            &regions,
            T::lit(self.config.word_weight),
        )?;
        Ok(s.item())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DamsmTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for DamsmTrainConfig {
    fn default() -> Self {
        DamsmTrainConfig {
            steps: 150,
            batch_size: 6,
            lr: 3e-3,
            seed: 0,
        }
    }
}

/// One caption/image pair; the image is already at the encoder's side.
#[derive(Debug, Clone)]
pub struct DamsmPair<T> {
    pub image: Tensor<T>,
    pub ids: Vec<usize>,
}

/// Minimize the matching loss over random batches. Batches avoid repeating
/// a caption so every negative is a genuine mismatch. Returns the per-step
/// loss trace.
pub fn train_damsm<T: Scalar>(model: &mut DamsmModel<T>, pairs: &[DamsmPair<T>], cfg: &DamsmTrainConfig) -> Result<Vec<f64>> {
    if pairs.len() < 2 {
        return Err(Error::invalid("matching loss training needs at least 2 pairs"));
    }
    let mut rng = rng::derive(cfg.seed, "damsm-train");
    let mut opt = Adam::new(T::lit(cfg.lr));
    let mut trace = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng);
        let mut batch: Vec<usize> = Vec::new();
        for i in order {
            if batch.len() == cfg.batch_size.max(2) {
                break;
            }
            if batch.iter().all(|&j| pairs[j].ids != pairs[i].ids) {
                batch.push(i);
            }
        }
        if batch.len() < 2 {
            return Err(Error::invalid("need at least 2 distinct captions"));
        }
        let g = Graph::new();
        let p = Params::new(&g, &model.params);
        let mut sentences = Vec::new();
        let mut globals = Vec::new();
        for &i in &batch {
            sentences.push(encode_text(&p, &model.config.text, &pairs[i].ids)?.sentence);
            let r = encode_image_regions(&p, &model.config.image, g.constant(pairs[i].image.clone()))?;
            globals.push(r.global);
        }
        let loss = damsm_loss(&sentences, &globals, T::lit(model.config.temperature))?;
        let value = loss.item().to_f64_lossy();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                term: "matching loss".into(),
            });
        }
        let grads = g.backward(loss);
        let mut gm = p.gradients(&grads);
        clip_grad_norm(&mut gm, T::lit(5.0));
        drop(p);
        opt.step(&mut model.params, &gm);
        trace.push(value);
    }
    Ok(trace)
}
