//! The `atelier` command-line tool. Every command prints one JSON object
//! on stdout (except `evaluate`, which prints text tables, and `serve`);
//! failures print `error[<code>]: <message>` on one line to stderr.

use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use atelier_core::corpus::{
    build_vocabulary, load_caption_manifest, load_painting_manifest, painting_split, synth_paintings, synth_shapes_dataset,
    write_painting_corpus, write_shapes_dataset, Split, SHAPE_COLORS, SHAPE_KINDS, SYNTH_GENRES, SYNTH_STYLES,
};
use atelier_core::dmgan::{DmGanConfig, GanModel, GanSample, GanTrainConfig, GanTrainer};
use atelier_core::genre::{finetune, trace_jsonl, ClassifierConfig, FinetuneConfig, GenreModel, LabelledImage};
use atelier_core::metrics::{self, ClassProbBatch, GaussianSummary, StyleEvalConfig};
use atelier_core::styler::{
    stylize_optimize, synth_content, train_transfer, OptimizeConfig, StyleModel, StylerConfig, TransferTrainConfig,
};
use atelier_core::text_encoder::{train_damsm, DamsmConfig, DamsmModel, DamsmPair, DamsmTrainConfig};
use atelier_core::{imageops, Tensor32};
use clap::{Parser, Subcommand};
use serde::Deserialize;
use serde_json::json;

use crate::api::{self, AppState};
use crate::config::AtelierConfig;
use crate::engine::{self, Engine, ModelEngine};
use crate::error::{storage, Result, ServiceError};
use crate::job::{JobOverrides, JobRequest, JobState, StyleMode};
use crate::pipeline::Pipeline;

#[derive(Debug, Parser)]
#[command(name = "atelier", version, about = "Text → image → genre → style studio")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Data root; overrides the config file and the environment.
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate an image from a description.
    Generate {
        text: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        stages: Option<usize>,
        /// Also write the PNG (and a JSON sidecar) here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the whole workflow as a stored job.
    Pipeline {
        text: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Apply the top recommended style without asking.
        #[arg(long)]
        auto: bool,
        /// Styles to apply in order (each must be recommended).
        #[arg(long = "style")]
        styles: Vec<String>,
        /// Reshuffle the last pick this many times.
        #[arg(long, default_value_t = 0)]
        reshuffle: usize,
    },
    /// Predict the genre of an image.
    Classify { image: PathBuf },
    /// Stylize a content image with a style image.
    Stylize {
        content: PathBuf,
        #[arg(long)]
        style_image: PathBuf,
        /// Optimise pixels instead of using the feedforward network.
        #[arg(long)]
        optimize: bool,
        #[arg(long, default_value_t = 200)]
        iters: usize,
        #[arg(long, default_value = "stylized.png")]
        out: PathBuf,
    },
    /// Write a synthetic caption manifest and painting corpus.
    SynthData {
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        shapes: usize,
        #[arg(long, default_value_t = 3)]
        per_genre: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the text/image matching encoders on a caption manifest.
    TrainDamsm {
        manifest: PathBuf,
        #[arg(long, default_value_t = 150)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the generator on a caption manifest.
    TrainGan {
        manifest: PathBuf,
        #[arg(long, default_value_t = 300)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fine-tune the genre classifier on a painting manifest.
    TrainClassifier {
        manifest: PathBuf,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the style predictor and transfer network on a painting manifest.
    TrainStyler {
        manifest: PathBuf,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 4)]
        contents: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compute the evaluation tables described by a TOML file.
    Evaluate {
        #[arg(value_name = "EVAL_TOML")]
        spec: PathBuf,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
}

impl Cli {
    pub fn resolve_config(&self) -> Result<AtelierConfig> {
        let mut cfg = AtelierConfig::load(self.config.as_deref())?;
        if let Some(d) = &self.data_dir {
            cfg.data_dir = d.clone();
        }
        Ok(cfg)
    }
}

fn emit(out: &mut dyn Write, v: serde_json::Value) -> Result<()> {
    writeln!(out, "{v}").map_err(storage)
}

fn save_ckpt<T: atelier_core::Scalar>(ck: &atelier_core::Checkpoint<T>, path: &Path) -> Result<()> {
    std::fs::create_dir_all(path.parent().expect("checkpoint in a directory")).map_err(storage)?;
    ck.save(path)?;
    Ok(())
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let cfg = cli.resolve_config()?;
    match cli.command {
        Command::Generate {
            text,
            seed,
            stages,
            out: path,
        } => {
            let damsm = engine::load_damsm(&cfg)?;
            let gan = engine::load_gan(&cfg, damsm)?;
            let n = stages.unwrap_or(cfg.stages).min(gan.config.n_stages);
            let images = gan.generate(&text, seed, n)?;
            let last = images.last().ok_or_else(|| ServiceError::invalid("stages must be positive"))?;
            let store = crate::artifacts::ArtifactStore::open(cfg.artifacts_dir())?;
            let hash = store.put(&last.to_png())?;
            if let Some(p) = &path {
                last.save(p)?;
            }
            emit(
                out,
                json!({
                    "artifact": hash,
                    "path": path.unwrap_or_else(|| store.path(&hash)),
                    "side": last.image.shape()[1],
                    "provenance": last.provenance,
                }),
            )
        }
        Command::Pipeline {
            text,
            seed,
            auto,
            styles,
            reshuffle,
        } => {
            let engine: Arc<dyn Engine> = Arc::new(ModelEngine::load(&cfg)?);
            let p = Pipeline::open(&cfg, engine)?;
            let job = p.create_job(JobRequest {
                text,
                seed,
                overrides: JobOverrides::default(),
            })?;
            let mut job = p.run_until_parked(&job.id)?;
            if job.state == JobState::AwaitingStyleChoice {
                let chosen = if styles.is_empty() && auto {
                    job.recommended_ids().into_iter().take(1).collect()
                } else {
                    styles
                };
                for s in &chosen {
                    job = p.choose_style(&job.id, s, StyleMode::Feedforward)?;
                }
                if !chosen.is_empty() {
                    for _ in 0..reshuffle {
                        job = p.reshuffle(&job.id)?;
                    }
                }
            }
            if let Some(err) = &job.error {
                return Err(ServiceError::Storage(format!(
                    "job {} failed in {}: {}",
                    job.id, err.stage, err.message
                )));
            }
            let final_artifact = job.latest_artifact().map(|h| p.artifacts.path(h));
            emit(out, json!({ "job": job, "final_artifact": final_artifact }))
        }
        Command::Classify { image } => {
            let paintings = engine::load_or_write_corpus(&cfg.corpus_dir(), cfg.model_seed, cfg.corpus_per_genre)?;
            let clf = engine::load_classifier(&cfg, &paintings.labels.genres)?;
            let d = clf.classify(&imageops::load::<f32>(&image)?)?;
            emit(out, json!({ "genre": d.label, "genres": d.genres, "probs": d.probs }))
        }
        Command::Stylize {
            content,
            style_image,
            optimize,
            iters,
            out: path,
        } => {
            let styler = engine::load_styler(&cfg)?;
            let c = imageops::load::<f32>(&content)?;
            let s = imageops::load::<f32>(&style_image)?;
            let (c, even) = even_sized(&c);
            let img = if optimize {
                if iters == 0 || iters > cfg.max_optimize_iters {
                    return Err(ServiceError::invalid(format!("iters must be in 1..={}", cfg.max_optimize_iters)));
                }
                stylize_optimize(
                    &styler.config,
                    &c,
                    &s,
                    &OptimizeConfig {
                        iters,
                        ..Default::default()
                    },
                )?
                .image
            } else {
                let v = styler.predict_style_vector(&s, &style_image.display().to_string())?;
                styler.stylize_feedforward(&c, &v)?
            };
            imageops::save_png(&img, &path)?;
            emit(
                out,
                json!({ "out": path, "mode": if optimize { "optimize" } else { "feedforward" }, "cropped_to_even": !even }),
            )
        }
        Command::SynthData {
            out: dir,
            shapes,
            per_genre,
            seed,
        } => {
            let samples = synth_shapes_dataset::<f32>(seed, shapes);
            let records = write_shapes_dataset(dir.join("shapes"), &samples)?;
            let paintings = synth_paintings::<f32>(seed, SYNTH_GENRES.len(), per_genre * SYNTH_STYLES.len(), 64);
            let m = write_painting_corpus(dir.join("paintings"), &paintings, SYNTH_GENRES.len())?;
            emit(
                out,
                json!({
                    "captions": dir.join("shapes").join("captions.jsonl"),
                    "caption_records": records.len(),
                    "paintings": dir.join("paintings").join(engine::PAINTINGS_FILE),
                    "painting_records": m.records.len(),
                }),
            )
        }
        Command::TrainDamsm { manifest, steps, seed } => {
            let records = load_caption_manifest(&manifest)?;
            let vocab = build_vocabulary(&records, 1);
            let mut model = DamsmModel::<f32>::new(DamsmConfig::desk(vocab.len()), vocab, seed)?;
            let mut pairs = Vec::new();
            for r in records.iter().filter(|r| r.split == Split::Train) {
                let image = model.prepare_image(&imageops::load(&r.image_path)?);
                for c in &r.captions {
                    pairs.push(DamsmPair {
                        image: image.clone(),
                        ids: model.vocab.encode(c),
                    });
                }
            }
            let trace = train_damsm(
                &mut model,
                &pairs,
                &DamsmTrainConfig {
                    steps,
                    seed,
                    ..Default::default()
                },
            )?;
            let path = cfg.models_dir().join(engine::DAMSM_FILE);
            let ck = model.to_checkpoint();
            save_ckpt(&ck, &path)?;
            emit(
                out,
                json!({ "checkpoint": path, "id": ck.id(), "first_loss": trace.first(), "last_loss": trace.last() }),
            )
        }
        Command::TrainGan { manifest, steps, seed } => {
            let records = load_caption_manifest(&manifest)?;
            let damsm = engine::load_damsm(&cfg)?;
            let width = damsm.config.text.feature_dim();
            let model = GanModel::<f32>::new(DmGanConfig::desk(width), damsm, seed)?;
            let mut samples = Vec::new();
            for r in records.iter().filter(|r| r.split == Split::Train) {
                let image = imageops::load::<f32>(&r.image_path)?;
                for c in &r.captions {
                    samples.push(GanSample::new(&model, &image, c)?);
                }
            }
            if samples.is_empty() {
                return Err(ServiceError::invalid("manifest has no training captions"));
            }
            let tc = GanTrainConfig {
                seed,
                ..Default::default()
            };
            let bs = tc.batch_size;
            let mut trainer = GanTrainer::new(model, tc);
            let mut last = None;
            for step in 0..steps {
                let batch: Vec<_> = (0..bs).map(|i| samples[(step * bs + i) % samples.len()].clone()).collect();
                last = Some(trainer.train_step(&batch)?);
            }
            let path = cfg.models_dir().join(engine::GENERATOR_FILE);
            let ck = trainer.model.to_checkpoint();
            save_ckpt(&ck, &path)?;
            emit(
                out,
                json!({ "checkpoint": path, "id": ck.id(), "steps": steps, "last_losses": last.map(|l| json!({"generator": l.generator, "discriminator": l.discriminator})) }),
            )
        }
        Command::TrainClassifier { manifest, epochs, seed } => {
            let m = load_painting_manifest(&manifest)?;
            let split = painting_split(&m.records);
            let mut data = Vec::new();
            for (r, s) in m.records.iter().zip(split) {
                let genre = m
                    .labels
                    .genres
                    .iter()
                    .position(|g| *g == r.genre)
                    .expect("manifest genres are validated");
                data.push(LabelledImage {
                    image: imageops::load::<f32>(&r.image_path)?,
                    genre,
                    split: s,
                });
            }
            let base = GenreModel::<f32>::base(ClassifierConfig::desk(m.labels.genres.clone()), seed)?;
            let (model, trace) = finetune(
                &base,
                &data,
                &FinetuneConfig {
                    epochs,
                    seed,
                    ..Default::default()
                },
            )?;
            let path = cfg.models_dir().join(engine::CLASSIFIER_FILE);
            let ck = model.to_checkpoint();
            save_ckpt(&ck, &path)?;
            let trace_path = cfg.models_dir().join("classifier-trace.jsonl");
            std::fs::write(&trace_path, trace_jsonl(&trace)).map_err(storage)?;
            let best = trace.iter().map(|r| r.test_acc).fold(0.0, f64::max);
            emit(
                out,
                json!({ "checkpoint": path, "id": ck.id(), "best_test_acc": best, "trace": trace_path }),
            )
        }
        Command::TrainStyler {
            manifest,
            epochs,
            contents,
            seed,
        } => {
            let m = load_painting_manifest(&manifest)?;
            let mut styles = Vec::new();
            for s in &m.labels.styles {
                if let Some(r) = m.records.iter().find(|r| r.style == *s) {
                    styles.push(imageops::load::<f32>(&r.image_path)?);
                }
            }
            let content: Vec<Tensor32> = (0..contents as u64).map(|i| synth_content(seed.wrapping_add(i), 16)).collect();
            let mut model = StyleModel::<f32>::new(StylerConfig::default(), seed)?;
            let trace = train_transfer(
                &mut model,
                &styles,
                &content,
                &TransferTrainConfig {
                    epochs,
                    seed,
                    ..Default::default()
                },
            )?;
            let (p, t) = model.to_checkpoints();
            save_ckpt(&p, &cfg.models_dir().join(engine::PREDICTOR_FILE))?;
            save_ckpt(&t, &cfg.models_dir().join(engine::TRANSFER_FILE))?;
            emit(
                out,
                json!({ "predictor": p.id(), "transfer": t.id(), "styles": styles.len(), "epochs": trace }),
            )
        }
        Command::Evaluate { spec } => evaluate(&cfg, &spec, out),
        Command::Serve { port, host } => serve(cfg, &host, port),
    }
}

/// Drop a trailing row/column so both sides are even.
fn even_sized(img: &Tensor32) -> (Tensor32, bool) {
    let (c, h, w) = img.dims3();
    if h % 2 == 0 && w % 2 == 0 {
        return (img.clone(), true);
    }
    let (nh, nw) = (h - h % 2, w - w % 2);
    let mut data = Vec::with_capacity(c * nh * nw);
    for ch in 0..c {
        for y in 0..nh {
            data.extend_from_slice(&img.data()[(ch * h + y) * w..(ch * h + y) * w + nw]);
        }
    }
    (Tensor32::from_vec(vec![c, nh, nw], data).expect("sized above"), false)
}

/// Keys accepted by `atelier evaluate`.
///
/// ```toml
/// paintings = "corpus/paintings.jsonl"   # default: the data dir corpus
/// captions = ["a red square"]            # default: all shape captions
/// observed_fraction = 0.8
/// contents = 4                           # generated images used as content
/// r = 100                                # candidates per R-precision query
/// seed = 0
/// records = "eval.jsonl"                 # optional line-delimited output
/// ```
#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub paintings: Option<PathBuf>,
    pub captions: Vec<String>,
    pub observed_fraction: f64,
    pub contents: usize,
    pub r: usize,
    pub seed: u64,
    pub records: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            paintings: None,
            captions: Vec::new(),
            observed_fraction: 0.8,
            contents: 4,
            r: 100,
            seed: 0,
            records: None,
        }
    }
}

fn evaluate(cfg: &AtelierConfig, path: &Path, out: &mut dyn Write) -> Result<()> {
    let text = std::fs::read_to_string(path).map_err(|e| ServiceError::invalid(format!("{}: {e}", path.display())))?;
    let ec: EvalConfig = toml::from_str(&text).map_err(|e| ServiceError::invalid(format!("{}: {}", path.display(), e.message())))?;
    let captions: Vec<String> = if ec.captions.is_empty() {
        SHAPE_COLORS
            .iter()
            .flat_map(|c| SHAPE_KINDS.iter().map(move |k| format!("a {c} {k}")))
            .collect()
    } else {
        ec.captions.clone()
    };
    if captions.len() < 2 {
        return Err(ServiceError::invalid("evaluation needs at least 2 captions"));
    }
    let paintings = match &ec.paintings {
        Some(p) => load_painting_manifest(p)?,
        None => engine::load_or_write_corpus(&cfg.corpus_dir(), cfg.model_seed, cfg.corpus_per_genre)?,
    };
    let damsm = engine::load_damsm(cfg)?;
    let gan = engine::load_gan(cfg, damsm.clone())?;
    let clf = engine::load_classifier(cfg, &paintings.labels.genres)?;
    let styler = engine::load_styler(cfg)?;
    let stages = cfg.stages.min(gan.config.n_stages);

    let generated: Vec<Tensor32> = captions
        .iter()
        .enumerate()
        .map(|(i, c)| {
            Ok(imageops::from_signed(
                &gan.generate(c, ec.seed.wrapping_add(i as u64), stages)?
                    .pop()
                    .expect("stages ≥ 1")
                    .image,
            ))
        })
        .collect::<Result<_>>()?;

    let probs: Vec<Vec<f64>> = generated.iter().map(|g| Ok(clf.classify(g)?.probs)).collect::<Result<_>>()?;
    let is = metrics::inception_score(&ClassProbBatch::new(&probs)?);

    let r = ec.r.min(captions.len()).max(2);
    let encoded: Vec<_> = captions
        .iter()
        .map(|c| damsm.encode_caption(c))
        .collect::<std::result::Result<_, _>>()?;
    let mut hits = Vec::new();
    for (i, g) in generated.iter().enumerate() {
        let (grid, _) = damsm.encode_image(g)?;
        let mut cand: Vec<usize> = vec![i];
        cand.extend((1..captions.len()).map(|k| (i + k) % captions.len()).take(r - 1));
        let names: Vec<&String> = cand.iter().map(|&k| &captions[k]).collect();
        hits.push(metrics::r_precision_hit(&names, 0, |c| {
            let k = captions.iter().position(|x| x == *c).expect("candidate from pool");
            damsm.similarity(&encoded[k], &grid).map(|v| v as f64).unwrap_or(f64::NEG_INFINITY)
        })?);
    }
    let rp = metrics::summarize_hits(&hits, 10)?;

    let shapes = synth_shapes_dataset::<f32>(ec.seed, captions.len().max(8));
    let feats = |imgs: &mut dyn Iterator<Item = &Tensor32>| -> Result<Vec<Vec<f64>>> {
        imgs.map(|im| Ok(damsm.encode_image(im)?.1.data().iter().map(|&x| x as f64).collect()))
            .collect()
    };
    let fake = feats(&mut generated.iter())?;
    let real = feats(&mut shapes.iter().map(|s| &s.image))?;
    let fid = match (GaussianSummary::from_samples(&fake), GaussianSummary::from_samples(&real)) {
        (Ok(a), Ok(b)) => Some(metrics::fid(&a, &b)?),
        _ => None,
    };

    let styled: Vec<(String, Tensor32)> = paintings
        .records
        .iter()
        .map(|r| {
            Ok((
                r.style.clone(),
                imageops::resize_bilinear(&imageops::load::<f32>(&r.image_path)?, 16, 16),
            ))
        })
        .collect::<Result<_>>()?;
    let contents: Vec<Tensor32> = generated
        .iter()
        .take(ec.contents.max(1))
        .map(|g| imageops::resize_bilinear(g, 16, 16))
        .collect();
    let report = metrics::eval_style_transfer(
        &styler,
        &styled,
        &contents,
        &StyleEvalConfig {
            observed_fraction: ec.observed_fraction,
        },
    )?;

    let w = |out: &mut dyn Write, s: String| out.write_all(s.as_bytes()).map_err(storage);
    w(out, "Text-to-image (this run; ± is standard error)\n".into())?;
    w(out, format!("{:<10} {:>14} {:>18} {:>10}\n", "dataset", "IS", "R-precision", "FID"))?;
    w(
        out,
        format!(
            "{:<10} {:>14.3} {:>11.2}% ± {:>4.2}% {:>10}\n",
            "desk",
            is,
            100.0 * rp.mean,
            100.0 * rp.std_err,
            fid.map_or("n/a".into(), |f| format!("{f:.3}"))
        ),
    )?;
    w(out, "reference (pretrained model):\n".into())?;
    for row in metrics::TABLE1 {
        w(
            out,
            format!(
                "{:<10} {:>7.2} ± {:<4.2} {:>11.2}% ± {:>4.2}% {:>10.2}\n",
                row.dataset,
                row.inception_score.0,
                row.inception_score.1,
                100.0 * row.r_precision.0,
                100.0 * row.r_precision.1,
                row.fid
            ),
        )?;
    }
    w(out, "\nStyle transfer losses (this run)\n".into())?;
    w(out, report.table())?;
    w(out, "reference:\n".into())?;
    for m in metrics::TABLE2 {
        w(
            out,
            format!(
                "{:<8} observed style {:.2e} content {:.2e}; unobserved style {:.2e} content {:.2e}\n",
                m.name, m.observed.0, m.observed.1, m.unobserved.0, m.unobserved.1
            ),
        )?;
    }
    if let Some(p) = &ec.records {
        let mut lines = String::new();
        lines.push_str(&json!({ "metric": "inception_score", "value": is, "count": probs.len() }).to_string());
        lines.push('\n');
        lines.push_str(&json!({ "metric": "r_precision", "value": rp.mean, "std_err": rp.std_err, "count": rp.count, "r": r }).to_string());
        lines.push('\n');
        lines.push_str(&json!({ "metric": "fid", "value": fid }).to_string());
        lines.push('\n');
        lines.push_str(&report.jsonl());
        std::fs::write(p, lines).map_err(storage)?;
    }
    Ok(())
}

fn serve(cfg: AtelierConfig, host: &str, port: u16) -> Result<()> {
    let engine: Arc<dyn Engine> = Arc::new(ModelEngine::load(&cfg)?);
    let pipeline = Arc::new(Pipeline::open(&cfg, engine)?);
    let mut state = AppState::new(pipeline, cfg.max_concurrent_jobs, cfg.page_size);
    state.static_dir = cfg.static_dir.clone();
    let addr: SocketAddr = format!("{host}:{port}")
        .parse()
        .map_err(|e| ServiceError::invalid(format!("address {host}:{port}: {e}")))?;
    let rt = tokio::runtime::Runtime::new().map_err(storage)?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| ServiceError::Storage(format!("bind {addr}: {e}")))?;
        log::info!("listening on http://{addr} (data dir {})", cfg.data_dir.display());
        axum::serve(listener, api::router(state)).await.map_err(storage)
    })
}
