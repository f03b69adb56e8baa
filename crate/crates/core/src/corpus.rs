//! Caption and painting corpora: manifests, vocabulary, style statistics and
//! deterministic synthetic datasets.
//!
//! # Manifest format
//!
//! Manifests are JSON Lines. The first line is a header object; every
//! following non-blank line is one record. Image paths are relative to the
//! manifest's directory (absolute paths are kept as-is). An empty file is an
//! empty manifest.
//!
//! Caption manifest:
//!
//! ```text
//! {"format":"atelier-captions","version":1}
//! {"image":"img/0000.png","captions":["a red square"],"split":"train"}
//! ```
//!
//! Painting manifest; the header declares the closed genre and style sets:
//!
//! ```text
//! {"format":"atelier-paintings","version":1,"genres":["landscape",...],"styles":["cubism",...]}
//! {"image":"img/0000.png","style":"impressionism","genre":"landscape"}
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageops;
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CAPTION_FORMAT: &str = "atelier-captions";
pub const PAINTING_FORMAT: &str = "atelier-paintings";
pub const MANIFEST_VERSION: u32 = 1;
pub const MIN_IMAGE_SIDE: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionRecord {
    pub image_path: PathBuf,
    pub captions: Vec<String>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PaintingRecord {
    pub image_path: PathBuf,
    pub style: String,
    pub genre: String,
}

/// Closed label sets declared by a painting manifest header.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PaintingLabels {
    pub genres: Vec<String>,
    pub styles: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PaintingManifest {
    pub labels: PaintingLabels,
    pub records: Vec<PaintingRecord>,
}

#[derive(Serialize, Deserialize)]
struct CaptionHeader {
    format: String,
    version: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CaptionLine {
    image: String,
    captions: Vec<String>,
    split: Split,
}

#[derive(Serialize, Deserialize)]
struct PaintingHeader {
    format: String,
    version: u32,
    genres: Vec<String>,
    styles: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PaintingLine {
    image: String,
    style: String,
    genre: String,
}

fn manifest_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Manifest {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Non-blank lines with their 1-based line numbers.
fn manifest_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.to_string()))
        .collect())
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn check_image(path: &Path, manifest: &Path, line: usize) -> Result<()> {
    match image::image_dimensions(path) {
        Ok((w, h)) if w >= MIN_IMAGE_SIDE && h >= MIN_IMAGE_SIDE => Ok(()),
        Ok((w, h)) => Err(manifest_err(
            manifest,
            line,
            format!(
                "image {} is {w}x{h}, smaller than {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}",
                path.display()
            ),
        )),
        Err(e) => Err(manifest_err(manifest, line, format!("unreadable image {}: {e}", path.display()))),
    }
}

pub fn load_caption_manifest(path: impl AsRef<Path>) -> Result<Vec<CaptionRecord>> {
    let path = path.as_ref();
    let lines = manifest_lines(path)?;
    let Some(((hline, header), rest)) = lines.split_first() else {
        return Ok(Vec::new());
    };
    let header: CaptionHeader = serde_json::from_str(header).map_err(|e| manifest_err(path, *hline, format!("bad header: {e}")))?;
    if header.format != CAPTION_FORMAT || header.version != MANIFEST_VERSION {
        return Err(manifest_err(
            path,
            *hline,
            format!(
                "expected {CAPTION_FORMAT} v{MANIFEST_VERSION}, got {} v{}",
                header.format, header.version
            ),
        ));
    }
    let dir = base_dir(path);
    let mut out = Vec::with_capacity(rest.len());
    for (n, line) in rest {
        let rec: CaptionLine = serde_json::from_str(line).map_err(|e| manifest_err(path, *n, e.to_string()))?;
        if rec.captions.is_empty() {
            return Err(manifest_err(path, *n, "record has zero captions"));
        }
        if rec.captions.iter().any(|c| c.trim().is_empty()) {
            return Err(manifest_err(path, *n, "record has a blank caption"));
        }
        let image_path = dir.join(&rec.image);
        check_image(&image_path, path, *n)?;
        out.push(CaptionRecord {
            image_path,
            captions: rec.captions,
            split: rec.split,
        });
    }
    Ok(out)
}

pub fn load_painting_manifest(path: impl AsRef<Path>) -> Result<PaintingManifest> {
    let path = path.as_ref();
    let lines = manifest_lines(path)?;
    let Some(((hline, header), rest)) = lines.split_first() else {
        return Ok(PaintingManifest::default());
    };
    let header: PaintingHeader = serde_json::from_str(header).map_err(|e| manifest_err(path, *hline, format!("bad header: {e}")))?;
    if header.format != PAINTING_FORMAT || header.version != MANIFEST_VERSION {
        return Err(manifest_err(
            path,
            *hline,
            format!(
                "expected {PAINTING_FORMAT} v{MANIFEST_VERSION}, got {} v{}",
                header.format, header.version
            ),
        ));
    }
    let genres: BTreeSet<&str> = header.genres.iter().map(String::as_str).collect();
    let styles: BTreeSet<&str> = header.styles.iter().map(String::as_str).collect();
    let dir = base_dir(path);
    let mut records = Vec::with_capacity(rest.len());
    for (n, line) in rest {
        let rec: PaintingLine = serde_json::from_str(line).map_err(|e| manifest_err(path, *n, e.to_string()))?;
        if rec.style.trim().is_empty() || rec.genre.trim().is_empty() {
            return Err(manifest_err(path, *n, "style and genre must be non-empty"));
        }
        if !genres.contains(rec.genre.as_str()) {
            return Err(manifest_err(path, *n, format!("genre {:?} not declared in header", rec.genre)));
        }
        if !styles.contains(rec.style.as_str()) {
            return Err(manifest_err(path, *n, format!("style {:?} not declared in header", rec.style)));
        }
        let image_path = dir.join(&rec.image);
        check_image(&image_path, path, *n)?;
        records.push(PaintingRecord {
            image_path,
            style: rec.style,
            genre: rec.genre,
        });
    }
    Ok(PaintingManifest {
        labels: PaintingLabels {
            genres: header.genres,
            styles: header.styles,
        },
        records,
    })
}

fn relative_to(path: &Path, dir: &Path) -> String {
    path.strip_prefix(dir).unwrap_or(path).to_string_lossy().into_owned()
}

fn json_line<S: Serialize>(out: &mut String, value: &S) {
    out.push_str(&serde_json::to_string(value).expect("manifest records serialize"));
    out.push('\n');
}

pub fn write_caption_manifest(path: impl AsRef<Path>, records: &[CaptionRecord]) -> Result<()> {
    let path = path.as_ref();
    let dir = base_dir(path);
    let mut out = String::new();
    json_line(
        &mut out,
        &CaptionHeader {
            format: CAPTION_FORMAT.into(),
            version: MANIFEST_VERSION,
        },
    );
    for r in records {
        json_line(
            &mut out,
            &CaptionLine {
                image: relative_to(&r.image_path, &dir),
                captions: r.captions.clone(),
                split: r.split,
            },
        );
    }
    crate::checkpoint::write_atomic(path, out.as_bytes())
}

pub fn write_painting_manifest(path: impl AsRef<Path>, manifest: &PaintingManifest) -> Result<()> {
    let path = path.as_ref();
    let dir = base_dir(path);
    let mut out = String::new();
    json_line(
        &mut out,
        &PaintingHeader {
            format: PAINTING_FORMAT.into(),
            version: MANIFEST_VERSION,
            genres: manifest.labels.genres.clone(),
            styles: manifest.labels.styles.clone(),
        },
    );
    for r in &manifest.records {
        json_line(
            &mut out,
            &PaintingLine {
                image: relative_to(&r.image_path, &dir),
                style: r.style.clone(),
                genre: r.genre.clone(),
            },
        );
    }
    crate::checkpoint::write_atomic(path, out.as_bytes())
}

// ---- tokenization and vocabulary -------------------------------------------

/// Lowercase, split on whitespace and punctuation; punctuation is dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Reserved entries only.
    pub fn reserved() -> Self {
        Self::from_tokens(Vec::new()).expect("no duplicates")
    }

    /// Build from the non-reserved tokens in index order.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(tokens);
        let mut index = HashMap::with_capacity(all.len());
        for (i, t) in all.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens: all, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Non-reserved tokens in index order.
    pub fn words(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }

    /// Token ids of `text`; out-of-vocabulary tokens map to UNK. An input
    /// with no tokens encodes as a single UNK so encoders always see T ≥ 1.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let ids: Vec<usize> = tokenize(text).iter().map(|t| self.id(t).unwrap_or(UNK)).collect();
        if ids.is_empty() {
            vec![UNK]
        } else {
            ids
        }
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).unwrap_or(RESERVED[UNK]).to_string()).collect()
    }
}

/// Vocabulary of every token with corpus frequency ≥ `min_freq`, ordered
/// by descending frequency with lexicographic tie-break.
pub fn build_vocabulary(records: &[CaptionRecord], min_freq: usize) -> Vocabulary {
    let captions = records.iter().flat_map(|r| r.captions.iter().map(String::as_str));
    build_vocabulary_from_texts(captions, min_freq)
}

pub fn build_vocabulary_from_texts<'a>(texts: impl IntoIterator<Item = &'a str>, min_freq: usize) -> Vocabulary {
    let min_freq = min_freq.max(1);
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for text in texts {
        for t in tokenize(text) {
            *counts.entry(t).or_default() += 1;
        }
    }
    let mut kept: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_freq && !RESERVED.contains(&t.as_str()))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Vocabulary::from_tokens(kept.into_iter().map(|(t, _)| t).collect()).expect("tokens are unique")
}

// ---- genre/style statistics ------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GenreStyleStats {
    counts: BTreeMap<(String, String), usize>,
}

impl GenreStyleStats {
    pub fn from_counts(counts: impl IntoIterator<Item = ((String, String), usize)>) -> Self {
        GenreStyleStats {
            counts: counts.into_iter().filter(|(_, c)| *c > 0).collect(),
        }
    }

    pub fn count(&self, genre: &str, style: &str) -> usize {
        self.counts.get(&(genre.to_string(), style.to_string())).copied().unwrap_or(0)
    }

    /// `((genre, style), count)` in key order.
    pub fn iter(&self) -> impl Iterator<Item = (&(String, String), &usize)> {
        self.counts.iter()
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    /// `(style, count)` pairs recorded for `genre`.
    pub fn styles_for<'a>(&'a self, genre: &'a str) -> impl Iterator<Item = (&'a str, usize)> + 'a {
        self.counts
            .iter()
            .filter(move |((g, _), _)| g == genre)
            .map(|((_, s), &c)| (s.as_str(), c))
    }
}

pub fn style_frequency_table(records: &[PaintingRecord]) -> GenreStyleStats {
    let mut counts: BTreeMap<(String, String), usize> = BTreeMap::new();
    for r in records {
        *counts.entry((r.genre.clone(), r.style.clone())).or_default() += 1;
    }
    GenreStyleStats { counts }
}

// ---- synthetic shapes ------------------------------------------------------

pub const SHAPE_SIDE: usize = 64;
pub const SHAPE_COLORS: [&str; 3] = ["red", "green", "blue"];
pub const SHAPE_KINDS: [&str; 3] = ["square", "circle", "triangle"];

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeSample<T> {
    /// `[3, 64, 64]` in `[0, 1]`.
    pub image: Tensor<T>,
    pub caption: String,
    pub color: usize,
    pub kind: usize,
    pub split: Split,
}

/// `n` images of one coloured shape on black, captioned "a <color> <shape>".
///
/// Classes are balanced: every consecutive block of nine samples holds a
/// seeded permutation of the nine (color, shape) classes, so each class
/// count is within one of `n / 9`. Every eighth sample is held out as test.
pub fn synth_shapes_dataset<T: Scalar>(seed: u64, n: usize) -> Vec<ShapeSample<T>> {
    let mut rng = rng::derive(seed, "synth-shapes");
    let mut classes: Vec<usize> = Vec::new();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        if classes.is_empty() {
            let mut block: Vec<usize> = (0..9).collect();
            block.shuffle(&mut rng);
            block.reverse();
            classes = block;
        }
        let class = classes.pop().expect("refilled above");
        let (color, kind) = (class / 3, class % 3);
        let size = rng.random_range(20..=36) as f64;
        let margin = size / 2.0 + 2.0;
        let cx = rng.random_range(margin..(SHAPE_SIDE as f64 - margin));
        let cy = rng.random_range(margin..(SHAPE_SIDE as f64 - margin));
        out.push(ShapeSample {
            image: render_shape(color, kind, cx, cy, size),
            caption: format!("a {} {}", SHAPE_COLORS[color], SHAPE_KINDS[kind]),
            color,
            kind,
            split: if i % 8 == 7 { Split::Test } else { Split::Train },
        });
    }
    out
}

fn render_shape<T: Scalar>(color: usize, kind: usize, cx: f64, cy: f64, size: f64) -> Tensor<T> {
    let s = SHAPE_SIDE;
    let mut data = vec![T::zero(); 3 * s * s];
    let half = size / 2.0;
    for y in 0..s {
        for x in 0..s {
            let (px, py) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let inside = match kind {
                0 => px.abs() <= half && py.abs() <= half,
                1 => px * px + py * py <= half * half,
                _ => {
                    // apex up, base at the bottom
                    let t = (py + half) / size;
                    (0.0..=1.0).contains(&t) && px.abs() <= half * t
                }
            };
            if inside {
                data[(color * s + y) * s + x] = T::one();
            }
        }
    }
    Tensor::new([3, s, s], data)
}

/// Write `samples` as PNGs under `dir/images` plus `dir/captions.jsonl`.
pub fn write_shapes_dataset<T: Scalar>(dir: impl AsRef<Path>, samples: &[ShapeSample<T>]) -> Result<Vec<CaptionRecord>> {
    let dir = dir.as_ref();
    let mut records = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let image_path = dir.join("images").join(format!("shape_{i:05}.png"));
        imageops::save_png(&s.image, &image_path)?;
        records.push(CaptionRecord {
            image_path,
            captions: vec![s.caption.clone()],
            split: s.split,
        });
    }
    write_caption_manifest(dir.join("captions.jsonl"), &records)?;
    Ok(records)
}

// ---- synthetic paintings ---------------------------------------------------

/// Palette whose entry `g` is the colour of genre `g`.
pub const GENRE_PALETTE: [[f64; 3]; 10] = [
    [0.90, 0.10, 0.10],
    [0.10, 0.80, 0.10],
    [0.15, 0.25, 0.95],
    [0.95, 0.85, 0.10],
    [0.85, 0.15, 0.85],
    [0.10, 0.85, 0.85],
    [0.95, 0.55, 0.10],
    [0.55, 0.25, 0.85],
    [0.55, 0.55, 0.55],
    [0.95, 0.95, 0.95],
];

pub const SYNTH_GENRES: [&str; 10] = [
    "landscape",
    "portrait",
    "cityscape",
    "still-life",
    "religious",
    "abstract",
    "genre-painting",
    "sketch",
    "flower-painting",
    "marina",
];

pub const SYNTH_STYLES: [&str; 6] = ["impressionism", "cubism", "pointillism", "expressionism", "minimalism", "op-art"];

#[derive(Debug, Clone, PartialEq)]
pub struct PaintingSample<T> {
    pub image: Tensor<T>,
    pub genre: usize,
    pub style: usize,
}

/// Style texture in `[0, 1]` at pixel `(x, y)`.
fn style_texture(style: usize, x: usize, y: usize, phase: usize) -> f64 {
    let (x, y) = (x + phase, y + phase / 2);
    match style {
        0 => ((y / 4) % 2) as f64,                                                   // horizontal bands
        1 => (((x / 8) + (y / 8)) % 2) as f64,                                       // checks
        2 => ((x % 6 < 2) && (y % 6 < 2)) as u8 as f64,                              // dot grid
        3 => (((x + y) / 3) % 2) as f64,                                             // diagonals
        4 => 0.5,                                                                    // flat
        _ => (((x as f64 * 0.6).sin() * (y as f64 * 0.6).cos()) > 0.0) as u8 as f64, // waves
    }
}

/// Render one painting of `genre` (colour) in `style` (texture).
pub fn render_painting<T: Scalar>(genre: usize, style: usize, side: usize, phase: usize, rng: &mut impl Rng) -> Tensor<T> {
    let color = GENRE_PALETTE[genre % GENRE_PALETTE.len()];
    let mut data = vec![T::zero(); 3 * side * side];
    for y in 0..side {
        for x in 0..side {
            let t = 0.35 + 0.65 * style_texture(style % SYNTH_STYLES.len(), x, y, phase);
            for c in 0..3 {
                let noise: f64 = rng.random_range(-0.04..0.04);
                data[(c * side + y) * side + x] = T::lit((color[c] * t + noise).clamp(0.0, 1.0));
            }
        }
    }
    Tensor::new([3, side, side], data)
}

/// `n_per_genre` paintings for each of the first `n_genres` synthetic
/// genres. Each genre favours the style with the same index (mod the
/// style count) so the genre/style table has a clear most-popular style.
pub fn synth_paintings<T: Scalar>(seed: u64, n_genres: usize, n_per_genre: usize, side: usize) -> Vec<PaintingSample<T>> {
    assert!(n_genres <= SYNTH_GENRES.len());
    let mut rng = rng::derive(seed, "synth-paintings");
    let n_styles = SYNTH_STYLES.len();
    let mut out = Vec::with_capacity(n_genres * n_per_genre);
    for i in 0..n_per_genre {
        for g in 0..n_genres {
            let weights: Vec<f64> = (0..n_styles)
                .map(|s| 1.0 + 3.0 * (s == g % n_styles) as u8 as f64 + (s == (g + 1) % n_styles) as u8 as f64)
                .collect();
            let total: f64 = weights.iter().sum();
            let mut u = rng.random_range(0.0..total);
            let mut style = n_styles - 1;
            for (s, w) in weights.iter().enumerate() {
                if u < *w {
                    style = s;
                    break;
                }
                u -= w;
            }
            let phase = rng.random_range(0..8) + i % 3;
            out.push(PaintingSample {
                image: render_painting(g, style, side, phase, &mut rng),
                genre: g,
                style,
            });
        }
    }
    out
}

/// Write paintings as PNGs under `dir/images` plus `dir/paintings.jsonl`.
pub fn write_painting_corpus<T: Scalar>(dir: impl AsRef<Path>, samples: &[PaintingSample<T>], n_genres: usize) -> Result<PaintingManifest> {
    let dir = dir.as_ref();
    let labels = PaintingLabels {
        genres: SYNTH_GENRES[..n_genres].iter().map(|s| s.to_string()).collect(),
        styles: SYNTH_STYLES.iter().map(|s| s.to_string()).collect(),
    };
    let mut records = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let image_path = dir.join("images").join(format!("painting_{i:05}.png"));
        imageops::save_png(&s.image, &image_path)?;
        records.push(PaintingRecord {
            image_path,
            style: SYNTH_STYLES[s.style].to_string(),
            genre: SYNTH_GENRES[s.genre].to_string(),
        });
    }
    let manifest = PaintingManifest { labels, records };
    write_painting_manifest(dir.join("paintings.jsonl"), &manifest)?;
    Ok(manifest)
}

/// Held-out rule for painting corpora: within each genre, every fifth
/// record (by manifest order) is test.
pub fn painting_split(records: &[PaintingRecord]) -> Vec<Split> {
    let mut seen: HashMap<&str, usize> = HashMap::new();
    records
        .iter()
        .map(|r| {
            let k = seen.entry(r.genre.as_str()).or_default();
            *k += 1;
            if k.is_multiple_of(5) {
                Split::Test
            } else {
                Split::Train
            }
        })
        .collect()
}
