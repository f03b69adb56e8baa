//! Evaluation quantities: Inception Score, Fréchet distance between
//! Gaussian feature summaries, R-precision and the observed/unobserved
//! style-transfer loss report.
//!
//! IS and FID follow their usual external definitions:
//!
//! ```text
//! IS  = exp( mean_n KL(p(y|x_n) ‖ p(y)) ),  p(y) = mean_n p(y|x_n)
//! FID = ‖μ₁ − μ₂‖² + Tr(Σ₁ + Σ₂ − 2 (Σ₁^½ Σ₂ Σ₁^½)^½)
//! ```
//!
//! All reductions run in input order, so reports are bit-stable.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::styler::{eval_losses, StyleModel};
use crate::tensor::Tensor;

pub const PROB_EPS: f64 = 1e-12;

/// Reference figures reported for the pretrained text-to-image model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Table1Row {
    pub dataset: &'static str,
    pub inception_score: (f64, f64),
    pub r_precision: (f64, f64),
    pub fid: f64,
}

pub const TABLE1: [Table1Row; 2] = [
    Table1Row {
        dataset: "CUB",
        inception_score: (4.71, 0.06),
        r_precision: (0.7658, 0.0053),
        fid: 11.91,
    },
    Table1Row {
        dataset: "COCO",
        inception_score: (32.43, 0.58),
        r_precision: (0.9223, 0.0037),
        fid: 24.24,
    },
];

/// Reference style-transfer losses: `(split, style, content)` per model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Table2Model {
    pub name: &'static str,
    pub observed: (f64, f64),
    pub unobserved: (f64, f64),
}

pub const TABLE2: [Table2Model; 2] = [
    Table2Model {
        name: "Model A",
        observed: (7.48e5, 6.74e4),
        unobserved: (1.07e6, 6.48e4),
    },
    Table2Model {
        name: "Model B",
        observed: (2.08e4, 8.92e4),
        unobserved: (9.95e5, 7.54e4),
    },
];

/// Reference genre accuracy after 25 fine-tuning epochs on 10 genres.
pub const REFERENCE_GENRE_ACCURACY: f64 = 0.7592;
pub const REFERENCE_GENRE_EPOCHS: usize = 25;
pub const REFERENCE_PAINTINGS: usize = 45_502;
pub const REFERENCE_STYLES: usize = 27;

/// `N×K` conditional class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProbBatch {
    n: usize,
    k: usize,
    probs: Vec<f64>,
}

impl ClassProbBatch {
    pub fn new(rows: &[Vec<f64>]) -> Result<Self> {
        let k = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || k == 0 {
            return Err(Error::invalid("class probability batch is empty"));
        }
        for (i, r) in rows.iter().enumerate() {
            if r.len() != k {
                return Err(Error::Shape(format!("row {i} has {} classes, expected {k}", r.len())));
            }
            if r.iter().any(|&p| p.is_nan() || p < 0.0) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!("row {i} is not a probability distribution")));
            }
        }
        Ok(ClassProbBatch {
            n: rows.len(),
            k,
            probs: rows.concat(),
        })
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.probs.chunks(self.k)
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn marginal(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.k];
        for r in self.rows() {
            for (a, p) in m.iter_mut().zip(r) {
                *a += p;
            }
        }
        m.iter().map(|x| x / self.n as f64).collect()
    }
}

pub fn inception_score(batch: &ClassProbBatch) -> f64 {
    let marginal = batch.marginal();
    let mean_kl = batch
        .rows()
        .map(|r| {
            r.iter()
                .zip(&marginal)
                .filter(|(&p, _)| p > 0.0)
                .map(|(&p, &q)| p * (p.max(PROB_EPS).ln() - q.max(PROB_EPS).ln()))
                .sum::<f64>()
        })
        .sum::<f64>()
        / batch.n as f64;
    mean_kl.exp()
}

/// Eigen-decomposition of a symmetric `n×n` row-major matrix by cyclic
/// Jacobi rotations. Returns eigenvalues and column eigenvectors (row-major).
pub fn symmetric_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(a.len(), n * n);
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j].powi(2))
            .sum();
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| m[i * n + i]).collect(), v)
}

/// `V diag(f(λ)) Vᵀ` for a symmetric matrix.
fn spectral_map(a: &[f64], n: usize, f: impl Fn(f64) -> f64) -> Vec<f64> {
    let (vals, v) = symmetric_eigen(a, n);
    let fv: Vec<f64> = vals.into_iter().map(f).collect();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = (0..n).map(|k| v[i * n + k] * fv[k] * v[j * n + k]).sum();
        }
    }
    out
}

fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

/// Mean and covariance of a feature distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianSummary {
    pub mean: Vec<f64>,
    /// Row-major `D×D`.
    pub cov: Vec<f64>,
}

impl GaussianSummary {
    pub fn new(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 || cov.len() != d * d {
            return Err(Error::Shape(format!("mean of length {d} with covariance of {} entries", cov.len())));
        }
        for i in 0..d {
            for j in 0..i {
                if (cov[i * d + j] - cov[j * d + i]).abs() > 1e-10 {
                    return Err(Error::invalid(format!("covariance not symmetric at ({i}, {j})")));
                }
            }
        }
        let (vals, _) = symmetric_eigen(&cov, d);
        if let Some(min) = vals.iter().copied().reduce(f64::min).filter(|&m| m < -1e-8) {
            return Err(Error::invalid(format!(
                "covariance not positive semi-definite (eigenvalue {min:e})"
            )));
        }
        Ok(GaussianSummary { mean, cov })
    }

    /// Sample mean and unbiased covariance of the rows.
    pub fn from_samples(samples: &[Vec<f64>]) -> Result<Self> {
        let d = samples.first().map_or(0, Vec::len);
        if samples.len() < 2 || d == 0 || samples.iter().any(|s| s.len() != d) {
            return Err(Error::invalid("need at least two samples of equal, non-zero dimension"));
        }
        let n = samples.len() as f64;
        let mut mean = vec![0.0; d];
        for s in samples {
            for (m, x) in mean.iter_mut().zip(s) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut cov = vec![0.0; d * d];
        for s in samples {
            for i in 0..d {
                let di = s[i] - mean[i];
                for j in 0..=i {
                    cov[i * d + j] += di * (s[j] - mean[j]);
                }
            }
        }
        for i in 0..d {
            for j in 0..=i {
                let c = cov[i * d + j] / (n - 1.0);
                cov[i * d + j] = c;
                cov[j * d + i] = c;
            }
        }
        GaussianSummary::new(mean, cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

pub fn fid(a: &GaussianSummary, b: &GaussianSummary) -> Result<f64> {
    let d = a.dim();
    if b.dim() != d {
        return Err(Error::Shape(format!("summaries of dimension {d} and {}", b.dim())));
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
    let trace = |m: &[f64]| (0..d).map(|i| m[i * d + i]).sum::<f64>();
    let root_a = spectral_map(&a.cov, d, |l| l.max(0.0).sqrt());
    let mut inner = matmul(&matmul(&root_a, &b.cov, d), &root_a, d);
    for i in 0..d {
        for j in 0..i {
            let s = 0.5 * (inner[i * d + j] + inner[j * d + i]);
            inner[i * d + j] = s;
            inner[j * d + i] = s;
        }
    }
    let (vals, _) = symmetric_eigen(&inner, d);
    let cross: f64 = vals.iter().map(|l| l.max(0.0).sqrt()).sum();
    Ok((mean_term + trace(&a.cov) + trace(&b.cov) - 2.0 * cross).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RPrecisionConfig {
    /// Candidates per query, the true caption included.
    pub r: usize,
    /// Queries per batch for the standard error.
    pub batch: usize,
}

impl Default for RPrecisionConfig {
    fn default() -> Self {
        RPrecisionConfig { r: 100, batch: 10 }
    }
}

/// Whether `candidates[truth]` scores strictly above every other candidate;
/// ties count against the true caption.
pub fn r_precision_hit<C: PartialEq>(candidates: &[C], truth: usize, mut similarity: impl FnMut(&C) -> f64) -> Result<bool> {
    if candidates.len() < 2 || truth >= candidates.len() {
        return Err(Error::invalid(format!(
            "need R ≥ 2 candidates with the truth among them, got {}",
            candidates.len()
        )));
    }
    for i in 0..candidates.len() {
        if candidates[i + 1..].contains(&candidates[i]) {
            return Err(Error::invalid(format!("duplicate candidate at position {i}")));
        }
    }
    let t = similarity(&candidates[truth]);
    let mut hit = true;
    for (i, c) in candidates.iter().enumerate() {
        if i != truth && similarity(c) >= t {
            hit = false;
        }
    }
    Ok(hit)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStdErr {
    pub mean: f64,
    /// Standard error over batch means (0 with a single batch).
    pub std_err: f64,
    pub count: usize,
}

/// Mean hit rate and its standard error over consecutive batches.
pub fn summarize_hits(hits: &[bool], batch: usize) -> Result<MeanStdErr> {
    if hits.is_empty() || batch == 0 {
        return Err(Error::invalid("no queries to summarise"));
    }
    let mean = hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64;
    let means: Vec<f64> = hits
        .chunks(batch)
        .map(|c| c.iter().filter(|&&h| h).count() as f64 / c.len() as f64)
        .collect();
    let std_err = if means.len() < 2 {
        0.0
    } else {
        let m = means.iter().sum::<f64>() / means.len() as f64;
        let var = means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (means.len() - 1) as f64;
        (var / means.len() as f64).sqrt()
    };
    Ok(MeanStdErr {
        mean,
        std_err,
        count: hits.len(),
    })
}

/// Sorted distinct styles, the first `round(ρ·n)` observed, the rest not.
pub fn split_styles(styles: &[String], rho: f64) -> (Vec<String>, Vec<String>) {
    let sorted: Vec<String> = styles.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let k = ((rho.clamp(0.0, 1.0) * sorted.len() as f64).round() as usize).min(sorted.len());
    (sorted[..k].to_vec(), sorted[k..].to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitLosses {
    pub style: f64,
    pub content: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleEvalReport {
    pub model_id: String,
    pub corpus_id: String,
    pub observed: SplitLosses,
    pub unobserved: SplitLosses,
    pub samples: usize,
}

impl StyleEvalReport {
    /// Plain-text table with one row per split and loss columns.
    pub fn table(&self) -> String {
        let mut s = format!("model {}  corpus {}  samples {}\n", self.model_id, self.corpus_id, self.samples);
        s.push_str(&format!("{:<12} {:>12} {:>12} {:>6}\n", "split", "style", "content", "n"));
        for (name, l) in [("observed", &self.observed), ("unobserved", &self.unobserved)] {
            s.push_str(&format!("{:<12} {:>12.4e} {:>12.4e} {:>6}\n", name, l.style, l.content, l.count));
        }
        s
    }

    /// One JSON record per cell.
    pub fn jsonl(&self) -> String {
        let mut out = String::new();
        for (split, l) in [("observed", &self.observed), ("unobserved", &self.unobserved)] {
            for (loss, v) in [("style", l.style), ("content", l.content)] {
                out.push_str(
                    &serde_json::json!({
                        "model": self.model_id,
                        "corpus": self.corpus_id,
                        "split": split,
                        "loss": loss,
                        "value": v,
                        "count": l.count,
                    })
                    .to_string(),
                );
                out.push('\n');
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StyleEvalConfig {
    /// Fraction of sorted styles treated as observed.
    pub observed_fraction: f64,
}

impl Default for StyleEvalConfig {
    fn default() -> Self {
        StyleEvalConfig { observed_fraction: 0.8 }
    }
}

/// Stylize every content image with every painting of each split and
/// average the content and style losses per split, in corpus order.
pub fn eval_style_transfer<T: Scalar>(
    model: &StyleModel<T>,
    paintings: &[(String, Tensor<T>)],
    contents: &[Tensor<T>],
    cfg: &StyleEvalConfig,
) -> Result<StyleEvalReport> {
    if contents.is_empty() {
        return Err(Error::invalid("content set is empty"));
    }
    let labels: Vec<String> = paintings.iter().map(|p| p.0.clone()).collect();
    let (observed, unobserved) = split_styles(&labels, cfg.observed_fraction);
    let ex = model.extractor();
    let eval_split = |name: &str, styles: &[String]| -> Result<SplitLosses> {
        if styles.is_empty() {
            return Err(Error::invalid(format!("{name} split has no styles")));
        }
        let (mut style, mut content, mut count) = (0.0, 0.0, 0usize);
        for (label, img) in paintings.iter().filter(|p| styles.contains(&p.0)) {
            let v = model.predict_style_vector(img, label)?;
            for c in contents {
                let out = model.stylize_feedforward(c, &v)?;
                let (lc, ls) = eval_losses(&model.config, &ex, &out, c, img)?;
                content += lc;
                style += ls;
                count += 1;
            }
        }
        Ok(SplitLosses {
            style: style / count as f64,
            content: content / count as f64,
            count,
        })
    };
    let obs = eval_split("observed", &observed)?;
    let unobs = eval_split("unobserved", &unobserved)?;

    let mut h = Sha256::new();
    for (label, img) in paintings {
        h.update(label.as_bytes());
        h.update([0]);
        for x in img.data() {
            h.update(x.to_f64_lossy().to_le_bytes());
        }
    }
    Ok(StyleEvalReport {
        model_id: model.to_checkpoints().1.id(),
        corpus_id: hex::encode(&h.finalize()[..8]),
        observed: obs,
        unobserved: unobs,
        samples: obs.count + unobs.count,
    })
}
