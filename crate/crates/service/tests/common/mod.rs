#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use atelier_core::corpus::{GenreStyleStats, PaintingRecord};
use atelier_core::genre::{pick_painting, recommend_styles, GenreDistribution, StyleRecommendation};
use atelier_core::{Error, Result, Tensor32};
use atelier_service::artifacts::ArtifactStore;
use atelier_service::engine::Engine;
use atelier_service::store::JobStore;
use atelier_service::{Pipeline, StyleMode};

/// Deterministic stand-in for the models: images are flat colors derived
/// from seeds, the genre is fixed, stylization blends content and style.
pub struct StubEngine {
    pub fail_classify: bool,
    pub corpus: Vec<PaintingRecord>,
    pub stats: GenreStyleStats,
}

impl StubEngine {
    /// Genre "landscape" with styles impressionism (3 paintings), cubism (2)
    /// and minimalism (1).
    pub fn new() -> Self {
        let mut corpus = Vec::new();
        for (style, n) in [("impressionism", 3), ("cubism", 2), ("minimalism", 1)] {
            for i in 0..n {
                corpus.push(PaintingRecord {
                    image_path: format!("{style}-{i}").into(),
                    style: style.into(),
                    genre: "landscape".into(),
                });
            }
        }
        let stats = atelier_core::corpus::style_frequency_table(&corpus);
        StubEngine {
            fail_classify: false,
            corpus,
            stats,
        }
    }
}

fn flat(side: usize, v: [f32; 3]) -> Tensor32 {
    let mut d = Vec::with_capacity(3 * side * side);
    for c in v {
        d.extend(std::iter::repeat_n(c, side * side));
    }
    Tensor32::from_vec(vec![3, side, side], d).unwrap()
}

impl Engine for StubEngine {
    fn generate(&self, text: &str, seed: u64, _stages: Option<usize>) -> Result<Tensor32> {
        let h = text.len() as u64 * 31 + seed;
        Ok(flat(8, [(h % 7) as f32 / 7.0, (h % 5) as f32 / 5.0, (h % 3) as f32 / 3.0]))
    }

    fn classify(&self, _image: &Tensor32) -> Result<GenreDistribution> {
        if self.fail_classify {
            return Err(Error::InvalidArgument("classifier exploded".into()));
        }
        Ok(GenreDistribution::from_probs(
            vec!["landscape".into(), "portrait".into()],
            vec![0.9, 0.1],
        ))
    }

    fn recommend(&self, genre: &str, k: usize) -> Result<StyleRecommendation> {
        recommend_styles(genre, &self.stats, k)
    }

    fn pick(&self, style: &str, seed: u64) -> Result<(String, Tensor32)> {
        let rec = pick_painting(style, &self.corpus, seed)?;
        let id = rec.image_path.display().to_string();
        let k = id.bytes().map(|b| b as u32).sum::<u32>();
        Ok((id, flat(8, [(k % 11) as f32 / 11.0, (k % 13) as f32 / 13.0, 0.5])))
    }

    fn stylize(&self, content: &Tensor32, style: &Tensor32, _label: &str, mode: StyleMode) -> Result<Tensor32> {
        let a = match mode {
            StyleMode::Feedforward => 0.5,
            StyleMode::Optimize { .. } => 0.8,
        };
        Ok(content.zip_map(style, |c, s| (1.0 - a) * c + a * s))
    }
}

pub fn stub_pipeline(dir: &Path, engine: StubEngine) -> Pipeline {
    Pipeline::new(
        JobStore::open(dir.join("jobs")).unwrap(),
        ArtifactStore::open(dir.join("artifacts")).unwrap(),
        Arc::new(engine),
        3,
        50,
    )
}
