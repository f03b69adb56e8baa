//! Residual genre classifier, genre→style recommendation and painting
//! picking.
//!
//! Residual blocks use the post-activation convention
//! `relu(F(x) + shortcut(x))` with `F = conv2 ∘ relu ∘ conv1`, so a block
//! whose `F` weights and biases are zero passes non-negative inputs through
//! unchanged.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::{GenreStyleStats, PaintingRecord, Split};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::imageops;
use crate::nn::{clip_grad_norm, Adam, Optimizer, ParamStore, Params};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CLASSIFIER_KIND: &str = "genre-classifier";

/// Residual block `name` with optional `{name}.proj` 1×1 shortcut.
pub fn residual_block<'g, T: Scalar>(p: &Params<'g, '_, T>, name: &str, x: Var<'g, T>, stride: usize) -> Result<Var<'g, T>> {
    let w1 = p.get(&format!("{name}.conv1.weight"));
    let w2 = p.get(&format!("{name}.conv2.weight"));
    let cin = x.shape()[0];
    let (mid_in, cout) = (w1.shape()[1], w2.shape()[0]);
    if cin != mid_in {
        return Err(Error::Shape(format!(
            "block {name}: input has {cin} channels, conv expects {mid_in}"
        )));
    }
    let proj = format!("{name}.proj");
    let has_proj = p.store().contains(&format!("{proj}.weight"));
    if !has_proj && (cin != cout || stride != 1) {
        return Err(Error::Shape(format!(
            "block {name}: {cin}→{cout} channels at stride {stride} needs a projection shortcut"
        )));
    }
    let f = p.conv(&format!("{name}.conv1"), x, stride).relu();
    let f = p.conv(&format!("{name}.conv2"), f, 1);
    let shortcut = if has_proj { p.conv(&proj, x, stride) } else { x };
    Ok((f + shortcut).relu())
}

pub fn init_residual_block<T: Scalar>(s: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, stride: usize, rng: &mut impl Rng) {
    s.init_conv(rng, &format!("{name}.conv1"), cin, cout, 3);
    s.init_conv(rng, &format!("{name}.conv2"), cout, cout, 3);
    if cin != cout || stride != 1 {
        s.init_conv(rng, &format!("{name}.proj"), cin, cout, 1);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub genres: Vec<String>,
    /// Images are resized (bilinear) to this side before classification.
    pub input_side: usize,
    pub stem_channels: usize,
    /// Output channels of the residual stages; stages after the first
    /// halve the resolution.
    pub stage_channels: Vec<usize>,
}

impl ClassifierConfig {
    pub fn desk(genres: Vec<String>) -> Self {
        ClassifierConfig {
            genres,
            input_side: 64,
            stem_channels: 8,
            stage_channels: vec![8, 16, 32],
        }
    }

    fn stage_stride(i: usize) -> usize {
        if i == 0 {
            1
        } else {
            2
        }
    }

    pub fn feature_dim(&self) -> usize {
        *self.stage_channels.last().unwrap_or(&self.stem_channels)
    }
}

#[derive(Debug, Clone)]
pub struct GenreModel<T> {
    pub config: ClassifierConfig,
    pub params: ParamStore<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenreDistribution {
    pub genres: Vec<String>,
    pub probs: Vec<f64>,
    pub label: String,
    pub index: usize,
}

impl GenreDistribution {
    pub fn from_probs(genres: Vec<String>, probs: Vec<f64>) -> Self {
        let index = (0..probs.len())
            .max_by(|&a, &b| probs[a].total_cmp(&probs[b]).then(b.cmp(&a)))
            .unwrap_or(0);
        GenreDistribution {
            label: genres.get(index).cloned().unwrap_or_default(),
            genres,
            probs,
            index,
        }
    }
}

impl<T: Scalar> GenreModel<T> {
    /// Seed-initialised network standing in for a pretrained backbone.
    pub fn base(config: ClassifierConfig, seed: u64) -> Result<Self> {
        if config.genres.len() < 2 {
            return Err(Error::invalid("classifier needs at least 2 genres"));
        }
        let mut rng = rng::derive(seed, "genre-init");
        let mut s = ParamStore::new();
        s.init_conv(&mut rng, "stem", 3, config.stem_channels, 3);
        let mut cin = config.stem_channels;
        for (i, &c) in config.stage_channels.iter().enumerate() {
            init_residual_block(&mut s, &format!("stage{i}"), cin, c, ClassifierConfig::stage_stride(i), &mut rng);
            cin = c;
        }
        s.init_linear(&mut rng, "head", cin, config.genres.len());
        Ok(GenreModel { config, params: s })
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        Checkpoint::new(CLASSIFIER_KIND, serde_json::json!({ "config": self.config }), self.params.clone())
    }

    pub fn from_checkpoint(ck: Checkpoint<T>) -> Result<Self> {
        ck.expect_kind(CLASSIFIER_KIND)?;
        let config: ClassifierConfig =
            serde_json::from_value(ck.metadata["config"].clone()).map_err(|e| Error::Checkpoint(format!("bad classifier config: {e}")))?;
        let template = GenreModel::<T>::base(config, 0).map_err(|e| Error::Checkpoint(e.to_string()))?;
        ck.params.expect_layout(&template.params)?;
        Ok(GenreModel {
            params: ck.params,
            ..template
        })
    }

    pub fn prepare(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::Shape(format!("classifier expects [3, H, W], got {s:?}")));
        }
        let side = self.config.input_side;
        Ok(if s[1] == side && s[2] == side {
            image.clone()
        } else {
            imageops::resize_bilinear(image, side, side)
        })
    }

    /// Pooled trunk features `[F]` of a prepared image.
    pub fn features<'g>(&self, p: &Params<'g, '_, T>, image: Var<'g, T>) -> Result<Var<'g, T>> {
        let mut x = p.conv("stem", image, 2).relu();
        for i in 0..self.config.stage_channels.len() {
            x = residual_block(p, &format!("stage{i}"), x, ClassifierConfig::stage_stride(i))?;
        }
        Ok(x.channel_mean())
    }

    pub fn logits<'g>(&self, p: &Params<'g, '_, T>, image: Var<'g, T>) -> Result<Var<'g, T>> {
        let f = self.features(p, image)?;
        Ok(p.linear("head", f))
    }

    pub fn classify(&self, image: &Tensor<T>) -> Result<GenreDistribution> {
        let x = self.prepare(image)?;
        let g = Graph::new();
        let p = Params::frozen(&g, &self.params);
        let probs = self.logits(&p, g.constant(x))?.softmax().tensor();
        Ok(GenreDistribution::from_probs(
            self.config.genres.clone(),
            probs.data().iter().map(|v| v.to_f64_lossy()).collect(),
        ))
    }

    fn pooled(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let g = Graph::new();
        let p = Params::frozen(&g, &self.params);
        Ok(self.features(&p, g.constant(self.prepare(image)?))?.tensor())
    }
}

/// One labelled painting for fine-tuning.
#[derive(Debug, Clone)]
pub struct LabelledImage<T> {
    pub image: Tensor<T>,
    pub genre: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Train every layer instead of only the classification head.
    pub all_layers: bool,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 10,
            lr: 0.05,
            batch_size: 16,
            all_layers: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRecord {
    pub epoch: usize,
    pub train_acc: f64,
    pub test_acc: f64,
}

fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
}

fn argmax<T: Scalar>(v: &[T]) -> usize {
    (0..v.len())
        .max_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap_or(std::cmp::Ordering::Equal).then(b.cmp(&a)))
        .unwrap_or(0)
}

/// Cross-entropy fine-tuning from `base`. The trace starts with the base
/// model's accuracy (epoch 0); the returned model is the one with the best
/// held-out accuracy, earliest on ties.
pub fn finetune<T: Scalar>(
    base: &GenreModel<T>,
    data: &[LabelledImage<T>],
    cfg: &FinetuneConfig,
) -> Result<(GenreModel<T>, Vec<AccuracyRecord>)> {
    let k = base.config.genres.len();
    if let Some(bad) = data.iter().find(|d| d.genre >= k) {
        return Err(Error::invalid(format!("genre index {} outside the {k} declared genres", bad.genre)));
    }
    let mut present: Vec<usize> = data.iter().map(|d| d.genre).collect();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(Error::invalid("fine-tuning needs at least 2 genres present"));
    }
    let train: Vec<&LabelledImage<T>> = data.iter().filter(|d| d.split == Split::Train).collect();
    let test: Vec<&LabelledImage<T>> = data.iter().filter(|d| d.split == Split::Test).collect();
    if train.is_empty() || test.is_empty() {
        return Err(Error::invalid("fine-tuning needs both train and test records"));
    }
    let prepared: Vec<Tensor<T>> = train.iter().map(|d| base.prepare(&d.image)).collect::<Result<_>>()?;
    let test_prepared: Vec<Tensor<T>> = test.iter().map(|d| base.prepare(&d.image)).collect::<Result<_>>()?;
    let train_labels: Vec<usize> = train.iter().map(|d| d.genre).collect();
    let test_labels: Vec<usize> = test.iter().map(|d| d.genre).collect();

    // head-only training works on cached pooled features
    let cache = |m: &GenreModel<T>, xs: &[Tensor<T>]| -> Result<Vec<Tensor<T>>> { xs.iter().map(|x| m.pooled(x)).collect() };
    let train_feats = if cfg.all_layers { Vec::new() } else { cache(base, &prepared)? };
    let test_feats = if cfg.all_layers { Vec::new() } else { cache(base, &test_prepared)? };

    let evaluate = |m: &GenreModel<T>| -> Result<AccuracyRecord> {
        let predict = |xs: &[Tensor<T>], feats: &[Tensor<T>]| -> Result<Vec<usize>> {
            if cfg.all_layers {
                xs.iter()
                    .map(|x| {
                        let g = Graph::new();
                        let p = Params::frozen(&g, &m.params);
                        Ok(argmax(m.logits(&p, g.constant(x.clone()))?.tensor().data()))
                    })
                    .collect()
            } else {
                feats
                    .iter()
                    .map(|f| {
                        let g = Graph::new();
                        let p = Params::frozen(&g, &m.params);
                        Ok(argmax(p.linear("head", g.constant(f.clone())).tensor().data()))
                    })
                    .collect()
            }
        };
        Ok(AccuracyRecord {
            epoch: 0,
            train_acc: accuracy(&predict(&prepared, &train_feats)?, &train_labels),
            test_acc: accuracy(&predict(&test_prepared, &test_feats)?, &test_labels),
        })
    };

    let mut model = base.clone();
    let mut trace = vec![evaluate(&model)?];
    let mut best = (trace[0].test_acc, model.params.clone());
    let mut opt = Adam::new(T::lit(cfg.lr));
    let mut rng = rng::derive(cfg.seed, "genre-finetune");
    let inv = |n: usize| T::one() / T::from_usize(n).unwrap();
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let g = Graph::new();
            let p = if cfg.all_layers {
                Params::new(&g, &model.params)
            } else {
                Params::with_trainable(&g, &model.params, |n| n.starts_with("head."))
            };
            let mut loss: Option<Var<'_, T>> = None;
            for &i in chunk {
                let logits = if cfg.all_layers {
                    model.logits(&p, g.constant(prepared[i].clone()))?
                } else {
                    p.linear("head", g.constant(train_feats[i].clone()))
                };
                let nll = logits.log_softmax().pick(&[train_labels[i]]).sum().neg();
                loss = Some(match loss {
                    Some(l) => l + nll,
                    None => nll,
                });
            }
            let loss = loss.expect("non-empty chunk").scale(inv(chunk.len()));
            if !loss.item().to_f64_lossy().is_finite() {
                return Err(Error::NonFinite {
                    term: "classification loss".into(),
                });
            }
            let grads = g.backward(loss);
            let mut gm = p.gradients(&grads);
            clip_grad_norm(&mut gm, T::lit(5.0));
            drop(p);
            opt.step(&mut model.params, &gm);
        }
        let mut rec = evaluate(&model)?;
        rec.epoch = epoch;
        if rec.test_acc > best.0 {
            best = (rec.test_acc, model.params.clone());
        }
        trace.push(rec);
    }
    model.params = best.1;
    Ok((model, trace))
}

/// Accuracy trace as line-delimited JSON.
pub fn trace_jsonl(trace: &[AccuracyRecord]) -> String {
    trace
        .iter()
        .map(|r| serde_json::to_string(r).expect("plain struct") + "\n")
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StyleRecommendation {
    pub genre: String,
    /// `(style, count)`, by descending count then style name.
    pub styles: Vec<(String, usize)>,
}

impl StyleRecommendation {
    pub fn contains(&self, style: &str) -> bool {
        self.styles.iter().any(|(s, _)| s == style)
    }

    pub fn style_ids(&self) -> Vec<String> {
        self.styles.iter().map(|(s, _)| s.clone()).collect()
    }
}

/// The `k` most common styles among paintings of `genre`. An unknown genre
/// yields an empty list.
pub fn recommend_styles(genre: &str, stats: &GenreStyleStats, k: usize) -> Result<StyleRecommendation> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let mut styles: Vec<(String, usize)> = stats
        .styles_for(genre)
        .filter(|&(_, c)| c > 0)
        .map(|(s, c)| (s.to_string(), c))
        .collect();
    styles.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    styles.truncate(k);
    Ok(StyleRecommendation {
        genre: genre.to_string(),
        styles,
    })
}

/// A painting of `style`, uniformly chosen by `seed`.
///
/// Seeds are grouped in blocks of `n` (the candidate count); each block is
/// a seeded permutation of the candidates, so incrementing the seed walks
/// through every alternative before any repeats within a block.
pub fn pick_painting<'a>(style: &str, corpus: &'a [PaintingRecord], seed: u64) -> Result<&'a PaintingRecord> {
    let candidates: Vec<&PaintingRecord> = corpus.iter().filter(|r| r.style == style).collect();
    let n = candidates.len() as u64;
    if n == 0 {
        return Err(Error::NotFound(format!("no painting with style {style:?}")));
    }
    let mut perm: Vec<usize> = (0..candidates.len()).collect();
    perm.shuffle(&mut rng::derive(seed / n, "pick-painting"));
    Ok(candidates[perm[(seed % n) as usize]])
}
