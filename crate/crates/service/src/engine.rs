//! The model stages a job runs, behind a trait so the pipeline can be
//! driven by stubs in tests.

use std::path::Path;

use atelier_core::corpus::{
    build_vocabulary_from_texts, load_painting_manifest, style_frequency_table, synth_paintings, write_painting_corpus, GenreStyleStats,
    PaintingManifest, SHAPE_COLORS, SHAPE_KINDS, SYNTH_GENRES,
};
use atelier_core::dmgan::{DmGanConfig, GanModel};
use atelier_core::genre::{pick_painting, recommend_styles, ClassifierConfig, GenreDistribution, GenreModel, StyleRecommendation};
use atelier_core::styler::{stylize_optimize, OptimizeConfig, StyleModel, StylerConfig};
use atelier_core::text_encoder::{DamsmConfig, DamsmModel};
use atelier_core::{imageops, Checkpoint, Error, Result, Tensor32};

use crate::config::AtelierConfig;
use crate::job::StyleMode;

pub const DAMSM_FILE: &str = "damsm.ckpt";
pub const GENERATOR_FILE: &str = "generator.ckpt";
pub const CLASSIFIER_FILE: &str = "classifier.ckpt";
pub const PREDICTOR_FILE: &str = "style-predictor.ckpt";
pub const TRANSFER_FILE: &str = "style-transfer.ckpt";
pub const PAINTINGS_FILE: &str = "paintings.jsonl";

/// Images cross this interface as `[3, H, W]` tensors in `[0, 1]`.
pub trait Engine: Send + Sync {
    fn generate(&self, text: &str, seed: u64, stages: Option<usize>) -> Result<Tensor32>;
    fn classify(&self, image: &Tensor32) -> Result<GenreDistribution>;
    fn recommend(&self, genre: &str, k: usize) -> Result<StyleRecommendation>;
    /// A painting of `style` chosen by `seed`: its identifier and image.
    fn pick(&self, style: &str, seed: u64) -> Result<(String, Tensor32)>;
    fn stylize(&self, content: &Tensor32, style: &Tensor32, label: &str, mode: StyleMode) -> Result<Tensor32>;
}

/// Engine backed by the real models and a painting corpus.
pub struct ModelEngine {
    pub gan: GanModel<f32>,
    pub classifier: GenreModel<f32>,
    pub styler: StyleModel<f32>,
    pub paintings: PaintingManifest,
    pub stats: GenreStyleStats,
    pub stages: usize,
}

fn load_ckpt(path: &Path) -> Result<Option<Checkpoint<f32>>> {
    if path.exists() {
        Checkpoint::load(path).map(Some)
    } else {
        Ok(None)
    }
}

/// Text encoder over the synthetic shape captions, used when no trained
/// encoder is present.
pub fn fallback_damsm(seed: u64) -> Result<DamsmModel<f32>> {
    let captions: Vec<String> = SHAPE_COLORS
        .iter()
        .flat_map(|c| SHAPE_KINDS.iter().map(move |k| format!("a {c} {k}")))
        .collect();
    let vocab = build_vocabulary_from_texts(captions.iter().map(String::as_str), 1);
    DamsmModel::new(DamsmConfig::desk(vocab.len()), vocab, seed)
}

/// The painting corpus under `dir`, written synthetically if absent.
pub fn load_or_write_corpus(dir: &Path, seed: u64, per_genre: usize) -> Result<PaintingManifest> {
    let path = dir.join(PAINTINGS_FILE);
    if path.exists() {
        return load_painting_manifest(&path);
    }
    let samples = synth_paintings::<f32>(seed, SYNTH_GENRES.len(), per_genre * atelier_core::corpus::SYNTH_STYLES.len(), 64);
    write_painting_corpus(dir, &samples, SYNTH_GENRES.len())
}

pub fn load_damsm(cfg: &AtelierConfig) -> Result<DamsmModel<f32>> {
    match load_ckpt(&cfg.models_dir().join(DAMSM_FILE))? {
        Some(ck) => DamsmModel::from_checkpoint(ck),
        None => fallback_damsm(cfg.model_seed),
    }
}

pub fn load_gan(cfg: &AtelierConfig, damsm: DamsmModel<f32>) -> Result<GanModel<f32>> {
    match load_ckpt(&cfg.models_dir().join(GENERATOR_FILE))? {
        Some(ck) => GanModel::from_checkpoint(ck, damsm),
        None => {
            let width = damsm.config.text.feature_dim();
            GanModel::new(DmGanConfig::desk(width), damsm, cfg.model_seed)
        }
    }
}

pub fn load_classifier(cfg: &AtelierConfig, genres: &[String]) -> Result<GenreModel<f32>> {
    match load_ckpt(&cfg.models_dir().join(CLASSIFIER_FILE))? {
        Some(ck) => {
            let m = GenreModel::from_checkpoint(ck)?;
            if m.config.genres != genres {
                return Err(Error::Checkpoint(format!(
                    "classifier genres {:?} differ from corpus genres {:?}",
                    m.config.genres, genres
                )));
            }
            Ok(m)
        }
        None => GenreModel::base(ClassifierConfig::desk(genres.to_vec()), cfg.model_seed),
    }
}

pub fn load_styler(cfg: &AtelierConfig) -> Result<StyleModel<f32>> {
    let dir = cfg.models_dir();
    match (load_ckpt(&dir.join(PREDICTOR_FILE))?, load_ckpt(&dir.join(TRANSFER_FILE))?) {
        (Some(p), Some(t)) => StyleModel::from_checkpoints(p, t),
        (None, None) => StyleModel::new(StylerConfig::default(), cfg.model_seed),
        _ => Err(Error::Checkpoint(
            "style predictor and transfer checkpoints must be present together".into(),
        )),
    }
}

impl ModelEngine {
    /// Checkpoints from the data directory where present, seed-initialised
    /// models otherwise.
    pub fn load(cfg: &AtelierConfig) -> Result<Self> {
        let paintings = load_or_write_corpus(&cfg.corpus_dir(), cfg.model_seed, cfg.corpus_per_genre)?;
        let damsm = load_damsm(cfg)?;
        let gan = load_gan(cfg, damsm)?;
        let classifier = load_classifier(cfg, &paintings.labels.genres)?;
        let styler = load_styler(cfg)?;
        let stats = style_frequency_table(&paintings.records);
        Ok(ModelEngine {
            stages: cfg.stages.min(gan.config.n_stages),
            gan,
            classifier,
            styler,
            paintings,
            stats,
        })
    }
}

impl Engine for ModelEngine {
    fn generate(&self, text: &str, seed: u64, stages: Option<usize>) -> Result<Tensor32> {
        let n = stages.unwrap_or(self.stages);
        if n == 0 || n > self.gan.config.n_stages {
            return Err(Error::InvalidArgument(format!(
                "stages must be in 1..={}",
                self.gan.config.n_stages
            )));
        }
        let images = self.gan.generate(text, seed, n)?;
        let last = images.last().expect("at least one stage");
        Ok(imageops::from_signed(&last.image))
    }

    fn classify(&self, image: &Tensor32) -> Result<GenreDistribution> {
        self.classifier.classify(image)
    }

    fn recommend(&self, genre: &str, k: usize) -> Result<StyleRecommendation> {
        recommend_styles(genre, &self.stats, k)
    }

    fn pick(&self, style: &str, seed: u64) -> Result<(String, Tensor32)> {
        let rec = pick_painting(style, &self.paintings.records, seed)?;
        Ok((rec.image_path.display().to_string(), imageops::load(&rec.image_path)?))
    }

    fn stylize(&self, content: &Tensor32, style: &Tensor32, label: &str, mode: StyleMode) -> Result<Tensor32> {
        match mode {
            StyleMode::Feedforward => {
                let v = self.styler.predict_style_vector(style, label)?;
                self.styler.stylize_feedforward(content, &v)
            }
            StyleMode::Optimize { iters } => Ok(stylize_optimize(
                &self.styler.config,
                content,
                style,
                &OptimizeConfig {
                    iters,
                    ..Default::default()
                },
            )?
            .image),
        }
    }
}
