//! Gram-matrix style transfer: a frozen feature extractor, content and
//! style losses, conditional instance normalisation, a style prediction
//! network, a feedforward transfer network, pixel-space optimisation and
//! multi-style chaining.
//!
//! Losses, for feature maps `f_l` with `n_l = c·h·w` units:
//!
//! ```text
//! content  L_c(x, c) = Σ_{j∈C} (1/n_j) ‖f_j(x) − f_j(c)‖²
//! style    L_s(x, s) = Σ_{i∈S} (1/n_i) ‖G(f_i(x)) − G(f_i(s))‖_F²
//! gram     G(f)_ab   = Σ_p f[a,p] f[b,p]        (no normalisation)
//! ```
//!
//! The style vector `S̃` holds, for every normalised layer of the transfer
//! network in order, that layer's `γ` followed by its `β`.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::imageops;
use crate::nn::{clip_grad_norm, Adam, Optimizer, ParamStore, Params};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CIN_EPS: f64 = 1e-5;
pub const PREDICTOR_KIND: &str = "style-predictor";
pub const TRANSFER_KIND: &str = "style-transfer";

/// Declared extractor layers: `(tag, in, out, stride)`.
pub const EXTRACTOR_LAYERS: [(&str, usize, usize, usize); 3] = [("conv1", 3, 8, 1), ("conv2", 8, 16, 2), ("conv3", 16, 16, 2)];

/// Frozen random convolutional feature extractor.
#[derive(Debug, Clone)]
pub struct Extractor<T> {
    pub seed: u64,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Extractor<T> {
    pub fn new(seed: u64) -> Self {
        let mut rng = rng::derive(seed, "style-extractor");
        let mut params = ParamStore::new();
        for (tag, cin, cout, _) in EXTRACTOR_LAYERS {
            params.init_conv(&mut rng, tag, cin, cout, 3);
        }
        Extractor { seed, params }
    }

    /// Smallest input side whose every layer keeps at least one position.
    pub fn min_side() -> usize {
        EXTRACTOR_LAYERS.iter().map(|l| l.3).product()
    }

    /// Activations for the requested layer tags.
    pub fn features<'g>(&self, g: &'g Graph<T>, image: Var<'g, T>, tags: &[String]) -> Result<FeatureMaps<'g, T>> {
        let p = Params::frozen(g, &self.params);
        extract_features(&p, image, tags)
    }
}

/// Per-layer activations `[c, h, w]` keyed by layer tag.
pub type FeatureMaps<'g, T> = BTreeMap<String, Var<'g, T>>;

/// Run the extractor bound in `p` up to the deepest requested layer.
pub fn extract_features<'g, T: Scalar>(p: &Params<'g, '_, T>, image: Var<'g, T>, tags: &[String]) -> Result<FeatureMaps<'g, T>> {
    for t in tags {
        if !EXTRACTOR_LAYERS.iter().any(|l| l.0 == t) {
            return Err(Error::invalid(format!("undeclared extractor layer {t:?}")));
        }
    }
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 || s[1] < Extractor::<T>::min_side() || s[2] < Extractor::<T>::min_side() {
        return Err(Error::Shape(format!(
            "extractor needs [3, H, W] with H, W ≥ {}, got {s:?}",
            Extractor::<T>::min_side()
        )));
    }
    let deepest = EXTRACTOR_LAYERS.iter().rposition(|l| tags.iter().any(|t| t == l.0));
    let mut out = BTreeMap::new();
    let mut x = image;
    if let Some(last) = deepest {
        for &(tag, _, _, stride) in &EXTRACTOR_LAYERS[..=last] {
            x = p.conv(tag, x, stride).relu();
            if tags.iter().any(|t| t == tag) {
                out.insert(tag.to_string(), x);
            }
        }
    }
    Ok(out)
}

/// Unnormalised Gram matrix `[c, c]` of a `[c, h, w]` map.
pub fn gram<'g, T: Scalar>(f: Var<'g, T>) -> Var<'g, T> {
    let s = f.shape();
    let flat = f.reshape([s[0], s[1..].iter().product::<usize>()]);
    flat.matmul(flat.transpose())
}

fn check_layers<T: Scalar>(a: &FeatureMaps<'_, T>, b: &FeatureMaps<'_, T>) -> Result<()> {
    if a.len() != b.len() || a.keys().zip(b.keys()).any(|(x, y)| x != y) {
        return Err(Error::invalid(format!(
            "layer sets differ: {:?} vs {:?}",
            a.keys().collect::<Vec<_>>(),
            b.keys().collect::<Vec<_>>()
        )));
    }
    for (k, v) in a {
        if v.shape() != b[k].shape() {
            return Err(Error::Shape(format!("layer {k}: {:?} vs {:?}", v.shape(), b[k].shape())));
        }
    }
    if a.is_empty() {
        return Err(Error::invalid("no layers to compare"));
    }
    Ok(())
}

fn sum_terms<'g, T: Scalar>(terms: Vec<Var<'g, T>>) -> Var<'g, T> {
    terms.into_iter().reduce(|a, b| a + b).expect("at least one layer")
}

/// `Σ_j (1/n_j) ‖x_j − c_j‖²` over the layers present in both maps.
pub fn content_loss<'g, T: Scalar>(x: &FeatureMaps<'g, T>, c: &FeatureMaps<'g, T>) -> Result<Var<'g, T>> {
    check_layers(x, c)?;
    Ok(sum_terms(
        x.iter()
            .map(|(k, &xv)| {
                let n = T::from_usize(xv.value().numel()).unwrap();
                (xv - c[k]).square().sum().scale(T::one() / n)
            })
            .collect(),
    ))
}

/// `Σ_i (1/n_i) ‖G(x_i) − G(s_i)‖_F²`.
pub fn style_loss<'g, T: Scalar>(x: &FeatureMaps<'g, T>, s: &FeatureMaps<'g, T>) -> Result<Var<'g, T>> {
    check_layers(x, s)?;
    let grams: BTreeMap<String, Var<'g, T>> = s.iter().map(|(k, &v)| (k.clone(), gram(v))).collect();
    style_loss_to_grams(x, &grams)
}

/// Style loss against precomputed target Grams.
pub fn style_loss_to_grams<'g, T: Scalar>(x: &FeatureMaps<'g, T>, targets: &BTreeMap<String, Var<'g, T>>) -> Result<Var<'g, T>> {
    if x.is_empty() || x.keys().ne(targets.keys()) {
        return Err(Error::invalid("style layer sets differ"));
    }
    Ok(sum_terms(
        x.iter()
            .map(|(k, &xv)| {
                let n = T::from_usize(xv.value().numel()).unwrap();
                (gram(xv) - targets[k]).square().sum().scale(T::one() / n)
            })
            .collect(),
    ))
}

/// Per-channel spatial standardisation (population variance, ε = 1e-5)
/// followed by the affine map `γ·x̂ + β`.
pub fn conditional_instance_norm<'g, T: Scalar>(f: Var<'g, T>, gamma: Var<'g, T>, beta: Var<'g, T>) -> Result<Var<'g, T>> {
    let s = f.shape();
    if s.len() != 3 || gamma.shape() != [s[0]] || beta.shape() != [s[0]] {
        return Err(Error::Shape(format!(
            "instance norm of {s:?} with gamma {:?} and beta {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    let (c, n) = (s[0], s[1] * s[2]);
    let inv_n = T::one() / T::from_usize(n).unwrap();
    let x = f.reshape([c, n]);
    let mean = x.sum_rows().scale(inv_n);
    let centered = x - mean.expand_cols(n);
    let var = centered.square().sum_rows().scale(inv_n);
    let inv_std = var.add_scalar(T::lit(CIN_EPS)).powf(T::lit(-0.5));
    let normed = centered * inv_std.expand_cols(n);
    Ok((normed * gamma.expand_cols(n) + beta.expand_cols(n)).reshape(s))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StylerConfig {
    pub extractor_seed: u64,
    pub content_layers: Vec<String>,
    pub style_layers: Vec<String>,
    pub content_weight: f64,
    pub style_weight: f64,
    /// Channels of the transfer network's two encoder convolutions; the
    /// residual block and decoder reuse them.
    pub channels: [usize; 2],
    pub predictor_hidden: usize,
}

impl Default for StylerConfig {
    fn default() -> Self {
        StylerConfig {
            extractor_seed: 7,
            content_layers: vec!["conv3".into()],
            style_layers: vec!["conv1".into(), "conv2".into()],
            content_weight: 1.0,
            style_weight: 1e-2,
            channels: [8, 16],
            predictor_hidden: 32,
        }
    }
}

impl StylerConfig {
    /// Channel count of every normalised transfer layer, in order.
    pub fn normalized_channels(&self) -> Vec<usize> {
        let [a, b] = self.channels;
        vec![a, b, b, b, a]
    }

    pub fn style_vector_len(&self) -> usize {
        2 * self.normalized_channels().iter().sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        if self.content_weight < 0.0 || self.style_weight < 0.0 || (self.content_weight == 0.0 && self.style_weight == 0.0) {
            return Err(Error::invalid("loss weights must be non-negative and not both zero"));
        }
        if self.content_layers.is_empty() || self.style_layers.is_empty() {
            return Err(Error::invalid("content and style layer sets must be non-empty"));
        }
        for t in self.content_layers.iter().chain(&self.style_layers) {
            if !EXTRACTOR_LAYERS.iter().any(|l| l.0 == t) {
                return Err(Error::invalid(format!("undeclared extractor layer {t:?}")));
            }
        }
        Ok(())
    }
}

/// Style vector `S̃` with the provenance of its source image.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleVector<T> {
    pub values: Tensor<T>,
    pub source: String,
}

/// Style prediction network and feedforward transfer network.
#[derive(Debug, Clone)]
pub struct StyleModel<T> {
    pub config: StylerConfig,
    pub predictor: ParamStore<T>,
    pub transfer: ParamStore<T>,
}

impl<T: Scalar> StyleModel<T> {
    pub fn new(config: StylerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::derive(seed, "styler-init");
        let [a, b] = config.channels;

        let mut pred = ParamStore::new();
        pred.init_conv(&mut rng, "enc1", 3, a, 3);
        pred.init_conv(&mut rng, "enc2", a, b, 3);
        pred.init_linear(&mut rng, "fc1", b, config.predictor_hidden);
        pred.init_linear(&mut rng, "fc2", config.predictor_hidden, config.style_vector_len());
        // start near the identity normalisation: γ ≈ 1, β ≈ 0
        let w = pred.get_mut("fc2.weight").expect("inserted");
        for x in w.data_mut() {
            *x *= T::lit(0.1);
        }
        let bias = pred.get_mut("fc2.bias").expect("inserted");
        let mut off = 0;
        for c in config.normalized_channels() {
            for x in &mut bias.data_mut()[off..off + c] {
                *x = T::one();
            }
            off += 2 * c;
        }

        let mut xfer = ParamStore::new();
        xfer.init_conv(&mut rng, "enc1", 3, a, 3);
        xfer.init_conv(&mut rng, "enc2", a, b, 3);
        xfer.init_conv(&mut rng, "res.conv1", b, b, 3);
        xfer.init_conv(&mut rng, "res.conv2", b, b, 3);
        xfer.init_conv(&mut rng, "dec1", b, a, 3);
        xfer.init_conv(&mut rng, "out", a, 3, 3);
        Ok(StyleModel {
            config,
            predictor: pred,
            transfer: xfer,
        })
    }

    pub fn extractor(&self) -> Extractor<T> {
        Extractor::new(self.config.extractor_seed)
    }

    pub fn to_checkpoints(&self) -> (Checkpoint<T>, Checkpoint<T>) {
        let meta = serde_json::json!({ "config": self.config });
        (
            Checkpoint::new(PREDICTOR_KIND, meta.clone(), self.predictor.clone()),
            Checkpoint::new(TRANSFER_KIND, meta, self.transfer.clone()),
        )
    }

    pub fn from_checkpoints(predictor: Checkpoint<T>, transfer: Checkpoint<T>) -> Result<Self> {
        predictor.expect_kind(PREDICTOR_KIND)?;
        transfer.expect_kind(TRANSFER_KIND)?;
        if predictor.metadata["config"] != transfer.metadata["config"] {
            return Err(Error::Checkpoint("predictor and transfer checkpoints disagree on config".into()));
        }
        let config: StylerConfig = serde_json::from_value(predictor.metadata["config"].clone())
            .map_err(|e| Error::Checkpoint(format!("bad styler config: {e}")))?;
        let template = StyleModel::<T>::new(config, 0).map_err(|e| Error::Checkpoint(e.to_string()))?;
        predictor.params.expect_layout(&template.predictor)?;
        transfer.params.expect_layout(&template.transfer)?;
        Ok(StyleModel {
            predictor: predictor.params,
            transfer: transfer.params,
            ..template
        })
    }

    /// `S̃` for a style image.
    pub fn predict<'g>(&self, p: &Params<'g, '_, T>, style: Var<'g, T>) -> Var<'g, T> {
        let x = p.conv("enc1", style, 2).relu();
        let x = p.conv("enc2", x, 2).relu().channel_mean();
        let h = p.linear("fc1", x).relu();
        p.linear("fc2", h)
    }

    /// Encoder–residual–decoder whose normalisation layers read their
    /// `(γ, β)` from `s`. Output in `[0, 1]`, same size as the input.
    pub fn stylize<'g>(&self, p: &Params<'g, '_, T>, content: Var<'g, T>, s: Var<'g, T>) -> Result<Var<'g, T>> {
        let cs = content.shape();
        if cs.len() != 3 || cs[0] != 3 || !cs[1].is_multiple_of(2) || !cs[2].is_multiple_of(2) || cs[1] == 0 {
            return Err(Error::Shape(format!("transfer network needs [3, H, W] with even H, W, got {cs:?}")));
        }
        if s.shape() != [self.config.style_vector_len()] {
            return Err(Error::Shape(format!(
                "style vector has {:?} entries, expected {}",
                s.shape(),
                self.config.style_vector_len()
            )));
        }
        let mut off = 0;
        let mut norm = |x: Var<'g, T>| -> Result<Var<'g, T>> {
            let c = x.shape()[0];
            let gamma = s.slice(off, c);
            let beta = s.slice(off + c, c);
            off += 2 * c;
            conditional_instance_norm(x, gamma, beta)
        };
        let x = norm(p.conv("enc1", content, 1))?.relu();
        let x = norm(p.conv("enc2", x, 2))?.relu();
        let r = norm(p.conv("res.conv1", x, 1))?.relu();
        let x = x + norm(p.conv("res.conv2", r, 1))?;
        let x = norm(p.conv("dec1", x.upsample2x(), 1))?.relu();
        Ok(p.conv("out", x, 1).sigmoid())
    }

    pub fn predict_style_vector(&self, style: &Tensor<T>, source: &str) -> Result<StyleVector<T>> {
        let s = style.shape();
        if s.len() != 3 || s[0] != 3 || s[1] < 4 || s[2] < 4 {
            return Err(Error::Shape(format!("style image must be [3, H, W] with H, W ≥ 4, got {s:?}")));
        }
        let g = Graph::new();
        let p = Params::frozen(&g, &self.predictor);
        Ok(StyleVector {
            values: self.predict(&p, g.constant(style.clone())).tensor(),
            source: source.to_string(),
        })
    }

    pub fn stylize_feedforward(&self, content: &Tensor<T>, style: &StyleVector<T>) -> Result<Tensor<T>> {
        let g = Graph::new();
        let p = Params::frozen(&g, &self.transfer);
        Ok(self
            .stylize(&p, g.constant(content.clone()), g.constant(style.values.clone()))?
            .tensor())
    }
}

/// Content and style loss of `x` against `content` and `style` under the
/// frozen extractor; the style image is resized to `x`'s size first.
pub fn eval_losses<T: Scalar>(
    cfg: &StylerConfig,
    ex: &Extractor<T>,
    x: &Tensor<T>,
    content: &Tensor<T>,
    style: &Tensor<T>,
) -> Result<(f64, f64)> {
    let g = Graph::new();
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let style = fit(style, h, w);
    let xf = ex.features(&g, g.constant(x.clone()), &cfg.content_layers)?;
    let cf = ex.features(&g, g.constant(content.clone()), &cfg.content_layers)?;
    let xs = ex.features(&g, g.constant(x.clone()), &cfg.style_layers)?;
    let ss = ex.features(&g, g.constant(style), &cfg.style_layers)?;
    Ok((
        content_loss(&xf, &cf)?.item().to_f64_lossy(),
        style_loss(&xs, &ss)?.item().to_f64_lossy(),
    ))
}

fn fit<T: Scalar>(img: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    if img.shape()[1] == h && img.shape()[2] == w {
        img.clone()
    } else {
        imageops::resize_bilinear(img, h, w)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeConfig {
    pub iters: usize,
    /// Fixed gradient-descent step on pixels.
    pub step: f64,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        OptimizeConfig { iters: 200, step: 0.05 }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizeResult<T> {
    pub image: Tensor<T>,
    /// Total loss of each iterate, starting with the initial image.
    pub trace: Vec<f64>,
    /// Running minimum of `trace`.
    pub best_so_far: Vec<f64>,
    pub initial_style: f64,
    pub best_style: f64,
}

/// Gradient descent on the pixels of `x` (initialised at `content`, kept in
/// `[0, 1]`) minimising `w_c·L_c + w_s·L_s`. Returns the lowest-loss iterate.
pub fn stylize_optimize<T: Scalar>(
    cfg: &StylerConfig,
    content: &Tensor<T>,
    style: &Tensor<T>,
    opt: &OptimizeConfig,
) -> Result<OptimizeResult<T>> {
    cfg.validate()?;
    if opt.iters == 0 {
        return Err(Error::invalid("iters must be at least 1"));
    }
    let ex = Extractor::<T>::new(cfg.extractor_seed);
    let (h, w) = (content.shape()[1], content.shape()[2]);
    let style = fit(style, h, w);
    let (wc, ws) = (T::lit(cfg.content_weight), T::lit(cfg.style_weight));

    let (content_targets, style_grams) = {
        let g = Graph::new();
        let cf = ex.features(&g, g.constant(content.clone()), &cfg.content_layers)?;
        let sf = ex.features(&g, g.constant(style), &cfg.style_layers)?;
        let c: BTreeMap<String, Tensor<T>> = cf.iter().map(|(k, v)| (k.clone(), v.tensor())).collect();
        let s: BTreeMap<String, Tensor<T>> = sf.iter().map(|(k, &v)| (k.clone(), gram(v).tensor())).collect();
        (c, s)
    };

    let mut x = content.clone();
    let mut best = (f64::INFINITY, x.clone(), 0.0);
    let mut trace = Vec::with_capacity(opt.iters + 1);
    let mut best_so_far = Vec::with_capacity(opt.iters + 1);
    let mut initial_style = 0.0;
    for it in 0..=opt.iters {
        let g = Graph::new();
        let xv = g.param(x.clone());
        let xc = ex.features(&g, xv, &cfg.content_layers)?;
        let xs = ex.features(&g, xv, &cfg.style_layers)?;
        let ct: FeatureMaps<'_, T> = content_targets.iter().map(|(k, v)| (k.clone(), g.constant(v.clone()))).collect();
        let st: BTreeMap<String, Var<'_, T>> = style_grams.iter().map(|(k, v)| (k.clone(), g.constant(v.clone()))).collect();
        let lc = content_loss(&xc, &ct)?;
        let ls = style_loss_to_grams(&xs, &st)?;
        let total = lc.scale(wc) + ls.scale(ws);
        let value = total.item().to_f64_lossy();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                term: format!("stylization loss at iteration {it}"),
            });
        }
        let style_value = ls.item().to_f64_lossy();
        if it == 0 {
            initial_style = style_value;
        }
        if value < best.0 {
            best = (value, x.clone(), style_value);
        }
        trace.push(value);
        best_so_far.push(best.0);
        if it == opt.iters {
            break;
        }
        let grad = g.backward(total).wrt(xv);
        let step = T::lit(opt.step);
        x = x.zip_map(&grad, |p, d| (p - step * d).max(T::zero()).min(T::one()));
    }
    Ok(OptimizeResult {
        image: best.1,
        trace,
        best_so_far,
        initial_style,
        best_style: best.2,
    })
}

/// How [`chain_styles`] stylizes each step.
pub enum ChainMode<'a, T> {
    Feedforward(&'a StyleModel<T>),
    Optimize(&'a StylerConfig, OptimizeConfig),
}

#[derive(Debug, Clone)]
pub struct ChainStep<T> {
    pub style: String,
    pub image: Tensor<T>,
}

/// Apply `styles` left to right, each to the previous step's output.
pub fn chain_styles<T: Scalar>(
    content: &Tensor<T>,
    styles: &[(String, Tensor<T>)],
    mode: &ChainMode<'_, T>,
) -> Result<(Tensor<T>, Vec<ChainStep<T>>)> {
    if styles.is_empty() {
        return Err(Error::invalid("style list must be non-empty"));
    }
    let mut x = content.clone();
    let mut steps = Vec::with_capacity(styles.len());
    for (label, style) in styles {
        x = match mode {
            ChainMode::Feedforward(m) => m.stylize_feedforward(&x, &m.predict_style_vector(style, label)?)?,
            ChainMode::Optimize(cfg, opt) => stylize_optimize(cfg, &x, style, opt)?.image,
        };
        steps.push(ChainStep {
            style: label.clone(),
            image: x.clone(),
        });
    }
    Ok((x, steps))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Training images are resized to this side.
    pub side: usize,
    pub seed: u64,
}

impl Default for TransferTrainConfig {
    fn default() -> Self {
        TransferTrainConfig {
            epochs: 20,
            lr: 5e-3,
            side: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferEpoch {
    pub epoch: usize,
    pub total: f64,
    pub content: f64,
    pub style: f64,
}

/// Jointly train the predictor and the transfer network over every
/// (content, style) pair once per epoch, in seeded random order.
pub fn train_transfer<T: Scalar>(
    model: &mut StyleModel<T>,
    styles: &[Tensor<T>],
    contents: &[Tensor<T>],
    cfg: &TransferTrainConfig,
) -> Result<Vec<TransferEpoch>> {
    if styles.is_empty() || contents.is_empty() {
        return Err(Error::invalid("style and content corpora must be non-empty"));
    }
    let sc = model.config.clone();
    let ex = model.extractor();
    let side = cfg.side;
    let styles: Vec<Tensor<T>> = styles.iter().map(|s| fit(s, side, side)).collect();
    let contents: Vec<Tensor<T>> = contents.iter().map(|c| fit(c, side, side)).collect();
    let grams: Vec<BTreeMap<String, Tensor<T>>> = styles
        .iter()
        .map(|s| {
            let g = Graph::new();
            let f = ex.features(&g, g.constant(s.clone()), &sc.style_layers)?;
            Ok(f.iter().map(|(k, &v)| (k.clone(), gram(v).tensor())).collect())
        })
        .collect::<Result<_>>()?;
    let content_feats: Vec<BTreeMap<String, Tensor<T>>> = contents
        .iter()
        .map(|c| {
            let g = Graph::new();
            let f = ex.features(&g, g.constant(c.clone()), &sc.content_layers)?;
            Ok(f.iter().map(|(k, v)| (k.clone(), v.tensor())).collect())
        })
        .collect::<Result<_>>()?;

    let mut rng = rng::derive(cfg.seed, "style-train");
    let mut opt_p = Adam::new(T::lit(cfg.lr));
    let mut opt_t = Adam::new(T::lit(cfg.lr));
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut pairs: Vec<(usize, usize)> = (0..contents.len()).flat_map(|c| (0..styles.len()).map(move |s| (c, s))).collect();
        pairs.shuffle(&mut rng);
        let (mut tot, mut con, mut sty) = (0.0, 0.0, 0.0);
        for &(ci, si) in &pairs {
            let g = Graph::new();
            let pp = Params::new(&g, &model.predictor);
            let pt = Params::new(&g, &model.transfer);
            let s_vec = model.predict(&pp, g.constant(styles[si].clone()));
            let out = model.stylize(&pt, g.constant(contents[ci].clone()), s_vec)?;
            let xc = ex.features(&g, out, &sc.content_layers)?;
            let xs = ex.features(&g, out, &sc.style_layers)?;
            let ct: FeatureMaps<'_, T> = content_feats[ci].iter().map(|(k, v)| (k.clone(), g.constant(v.clone()))).collect();
            let st: BTreeMap<String, Var<'_, T>> = grams[si].iter().map(|(k, v)| (k.clone(), g.constant(v.clone()))).collect();
            let lc = content_loss(&xc, &ct)?;
            let ls = style_loss_to_grams(&xs, &st)?;
            let total = lc.scale(T::lit(sc.content_weight)) + ls.scale(T::lit(sc.style_weight));
            let v = total.item().to_f64_lossy();
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    term: format!("transfer loss in epoch {epoch}"),
                });
            }
            tot += v;
            con += lc.item().to_f64_lossy();
            sty += ls.item().to_f64_lossy();
            let grads = g.backward(total);
            let mut gp = pp.gradients(&grads);
            let mut gt = pt.gradients(&grads);
            clip_grad_norm(&mut gp, T::lit(10.0));
            clip_grad_norm(&mut gt, T::lit(10.0));
            drop(pp);
            drop(pt);
            opt_p.step(&mut model.predictor, &gp);
            opt_t.step(&mut model.transfer, &gt);
        }
        let n = pairs.len() as f64;
        trace.push(TransferEpoch {
            epoch,
            total: tot / n,
            content: con / n,
            style: sty / n,
        });
    }
    Ok(trace)
}

/// Seeded random `[3, side, side]` content image in `[0, 1]`: smooth blobs
/// on a gradient, standing in for generated photographs.
pub fn synth_content<T: Scalar>(seed: u64, side: usize) -> Tensor<T> {
    let mut rng = rng::derive(seed, "synth-content");
    let base: [f64; 3] = [rng.random(), rng.random(), rng.random()];
    let blobs: Vec<(f64, f64, f64, [f64; 3])> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.0..side as f64),
                rng.random_range(0.0..side as f64),
                rng.random_range(side as f64 / 8.0..side as f64 / 3.0),
                [rng.random(), rng.random(), rng.random()],
            )
        })
        .collect();
    let mut data = vec![T::zero(); 3 * side * side];
    for y in 0..side {
        for x in 0..side {
            for c in 0..3 {
                let mut v = base[c] * (0.5 + 0.5 * y as f64 / side as f64);
                for &(bx, by, r, col) in &blobs {
                    let d2 = (x as f64 - bx).powi(2) + (y as f64 - by).powi(2);
                    v += col[c] * (-d2 / (2.0 * r * r)).exp();
                }
                data[(c * side + y) * side + x] = T::lit(v.clamp(0.0, 1.0));
            }
        }
    }
    Tensor::from_vec(vec![3, side, side], data).expect("sized above")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, check_param_gradients, GradCheck};

    fn tags(t: &[&str]) -> Vec<String> {
        t.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn extractor_contracts() {
        let ex = Extractor::<f64>::new(1);
        let g = Graph::new();
        let img = rng::uniform_tensor::<f64>(&mut rng::seeded(1), &[3, 16, 16], 0.0, 1.0);
        let all = tags(&["conv1", "conv2", "conv3"]);
        let a = ex.features(&g, g.constant(img.clone()), &all).unwrap();
        let b = ex.features(&g, g.constant(img), &all).unwrap();
        for k in &all {
            assert_eq!(a[k].tensor(), b[k].tensor());
        }
        assert_eq!(a["conv1"].shape(), vec![8, 16, 16]);
        assert_eq!(a["conv2"].shape(), vec![16, 8, 8]);
        assert_eq!(a["conv3"].shape(), vec![16, 4, 4]);
        let z = ex.features(&g, g.constant(Tensor::zeros([3, 16, 16])), &all).unwrap();
        assert!(z.values().all(|v| v.tensor().data().iter().all(|&x| x == 0.0)));
        assert!(ex.features(&g, g.constant(Tensor::zeros([3, 16, 16])), &tags(&["fc7"])).is_err());
    }

    #[test]
    fn gram_examples() {
        let g = Graph::<f64>::new();
        let f = g.constant(Tensor::full([1, 2, 3], 1.5));
        assert_eq!(gram(f).tensor().data(), &[6.0 * 2.25]);
        let f = g.constant(Tensor::from_f64([2, 1, 2], &[1.0, 0.0, 0.0, 2.0]).unwrap());
        let gm = gram(f).tensor();
        assert_eq!(gm.data()[1], 0.0);
        assert_eq!(gm.data()[2], 0.0);
    }

    #[test]
    fn loss_examples() {
        let g = Graph::<f64>::new();
        let mk = |v: Tensor<f64>| -> FeatureMaps<'_, f64> { [("conv3".to_string(), g.constant(v))].into_iter().collect() };
        let a = Tensor::from_f64([1, 2, 2], &[0.0, 1.0, 2.0, 3.0]).unwrap();
        let b = a.map(|x| x + 1.0);
        assert_eq!(content_loss(&mk(a.clone()), &mk(a.clone())).unwrap().item(), 0.0);
        assert!((content_loss(&mk(a.clone()), &mk(b)).unwrap().item() - 1.0).abs() < 1e-15);
        assert_eq!(style_loss(&mk(a.clone()), &mk(a.clone())).unwrap().item(), 0.0);

        // constant maps a vs b over m positions
        let (av, bv, m): (f64, f64, f64) = (0.7, 0.2, 4.0);
        let x = Tensor::full([1, 2, 2], av);
        let s = Tensor::full([1, 2, 2], bv);
        let expect = (1.0 / m) * (m * av * av - m * bv * bv).powi(2);
        assert!((style_loss(&mk(x), &mk(s)).unwrap().item() - expect).abs() < 1e-12);

        let other: FeatureMaps<'_, f64> = [("conv1".to_string(), g.constant(a.clone()))].into_iter().collect();
        assert!(content_loss(&mk(a.clone()), &other).is_err());
        assert!(style_loss(&mk(a), &other).is_err());
    }

    #[test]
    fn loss_gradients() {
        let mut r = rng::seeded(3);
        let inputs = vec![
            rng::normal_tensor::<f64>(&mut r, &[3, 4, 4], 1.0),
            rng::normal_tensor::<f64>(&mut r, &[3, 4, 4], 1.0),
            rng::normal_tensor::<f64>(&mut r, &[2, 2, 2], 1.0),
            rng::normal_tensor::<f64>(&mut r, &[2, 2, 2], 1.0),
        ];
        let rep = check_gradients(&inputs, GradCheck::default(), |_, v| {
            let x: FeatureMaps<'_, f64> = [("a".to_string(), v[0]), ("b".to_string(), v[2])].into_iter().collect();
            let t: FeatureMaps<'_, f64> = [("a".to_string(), v[1]), ("b".to_string(), v[3])].into_iter().collect();
            content_loss(&x, &t).unwrap() + style_loss(&x, &t).unwrap()
        });
        assert!(rep.passed(1e-4), "{rep:?}");
    }

    #[test]
    fn instance_norm_statistics_and_constant_channel() {
        let g = Graph::<f64>::new();
        let mut r = rng::seeded(4);
        let mut data = rng::normal_tensor::<f64>(&mut r, &[3, 4, 5], 3.0).into_vec();
        for x in &mut data[40..60] {
            *x = 2.5;
        }
        let f = g.constant(Tensor::from_vec(vec![3, 4, 5], data).unwrap());
        let out = conditional_instance_norm(f, g.constant(Tensor::ones([3])), g.constant(Tensor::zeros([3])))
            .unwrap()
            .tensor();
        for c in 0..2 {
            let ch = &out.data()[c * 20..(c + 1) * 20];
            let mean = ch.iter().sum::<f64>() / 20.0;
            let var = ch.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 20.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
        let beta = Tensor::from_f64([3], &[0.0, 0.0, -0.4]).unwrap();
        let out = conditional_instance_norm(f, g.constant(Tensor::full([3], 2.0)), g.constant(beta))
            .unwrap()
            .tensor();
        assert!(out.data()[40..60].iter().all(|&x| x == -0.4));
    }

    #[test]
    fn instance_norm_gradient() {
        let mut r = rng::seeded(5);
        let inputs = vec![
            rng::normal_tensor::<f64>(&mut r, &[2, 3, 3], 1.0),
            rng::normal_tensor::<f64>(&mut r, &[2], 1.0),
            rng::normal_tensor::<f64>(&mut r, &[2], 1.0),
        ];
        let w = rng::normal_tensor::<f64>(&mut r, &[2, 3, 3], 1.0);
        let rep = check_gradients(&inputs, GradCheck::default(), |g, v| {
            (conditional_instance_norm(v[0], v[1], v[2]).unwrap() * g.constant(w.clone())).sum()
        });
        assert!(rep.passed(1e-4), "{rep:?}");
    }

    #[test]
    fn style_vector_and_feedforward_contracts() {
        let m = StyleModel::<f64>::new(StylerConfig::default(), 1).unwrap();
        let style = rng::uniform_tensor::<f64>(&mut rng::seeded(1), &[3, 20, 20], 0.0, 1.0);
        let v = m.predict_style_vector(&style, "s").unwrap();
        assert_eq!(v.values.numel(), 2 * (8 + 16 + 16 + 16 + 8));
        assert_eq!(v, m.predict_style_vector(&style, "s").unwrap());
        let content = synth_content::<f64>(2, 12);
        let out = m.stylize_feedforward(&content, &v).unwrap();
        assert_eq!(out.shape(), content.shape());
        assert!(out.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        assert_eq!(out, m.stylize_feedforward(&content, &v).unwrap());
        let short = StyleVector {
            values: Tensor::zeros([5]),
            source: String::new(),
        };
        assert!(m.stylize_feedforward(&content, &short).is_err());
    }

    #[test]
    fn transfer_network_gradient() {
        let cfg = StylerConfig {
            channels: [2, 3],
            predictor_hidden: 3,
            ..Default::default()
        };
        let m = StyleModel::<f64>::new(cfg, 2).unwrap();
        let content = synth_content::<f64>(3, 4);
        let style = rng::uniform_tensor::<f64>(&mut rng::seeded(6), &[3, 4, 4], 0.0, 1.0);
        let mut both = m.transfer.clone();
        both.extend_scoped("pred.", &m.predictor);
        let rep = check_param_gradients(&both, GradCheck::default(), |g, p| {
            let s = {
                let x = p.conv("pred.enc1", g.constant(style.clone()), 2).relu();
                let x = p.conv("pred.enc2", x, 2).relu().channel_mean();
                let h = p.linear("pred.fc1", x).relu();
                p.linear("pred.fc2", h)
            };
            m.stylize(p, g.constant(content.clone()), s).unwrap().square().sum()
        });
        assert!(rep.passed(1e-3), "{rep:?}");
    }

    #[test]
    fn optimize_fixed_points() {
        let cfg = StylerConfig::default();
        let c = synth_content::<f64>(4, 16);
        let r = stylize_optimize(&cfg, &c, &c, &OptimizeConfig { iters: 3, step: 0.05 }).unwrap();
        assert_eq!(r.trace[0], 0.0);
        assert_eq!(r.image, c);
        let s = synth_content::<f64>(5, 16);
        let content_only = StylerConfig {
            style_weight: 0.0,
            ..cfg.clone()
        };
        let r = stylize_optimize(&content_only, &c, &s, &OptimizeConfig { iters: 3, step: 0.05 }).unwrap();
        assert_eq!(r.image, c);
        let zero = StylerConfig {
            style_weight: 0.0,
            content_weight: 0.0,
            ..cfg
        };
        assert!(stylize_optimize(&zero, &c, &s, &OptimizeConfig::default()).is_err());
    }

    #[test]
    fn zero_epochs_leave_initialisation() {
        let mut m = StyleModel::<f32>::new(StylerConfig::default(), 3).unwrap();
        let before = m.clone();
        let trace = train_transfer(
            &mut m,
            &[synth_content(1, 16)],
            &[synth_content(2, 16)],
            &TransferTrainConfig {
                epochs: 0,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(trace.is_empty());
        assert_eq!(m.predictor, before.predictor);
        assert_eq!(m.transfer, before.transfer);
    }
}
