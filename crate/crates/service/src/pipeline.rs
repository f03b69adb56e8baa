//! Job orchestration: generate → classify → recommend, park for a style
//! choice, then pick a painting and stylize, optionally chaining further
//! styles or reshuffling the last pick.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use atelier_core::{imageops, rng, Tensor32};
use rand::Rng;

use crate::artifacts::ArtifactStore;
use crate::config::AtelierConfig;
use crate::engine::Engine;
use crate::error::{Result, ServiceError};
use crate::job::{GenreView, JobError, JobRequest, JobState, Pick, PipelineJob, StyleMode, StyleOption};
use crate::store::{JobPage, JobStore};

pub struct Pipeline {
    pub store: JobStore,
    pub artifacts: ArtifactStore,
    engine: Arc<dyn Engine>,
    styles: usize,
    max_optimize_iters: usize,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

/// Seed of the first pick for chain step `step`.
pub fn pick_seed(job_seed: u64, step: usize) -> u64 {
    rng::derive(job_seed, &format!("pick-{step}")).random::<u64>() >> 16
}

impl Pipeline {
    pub fn new(store: JobStore, artifacts: ArtifactStore, engine: Arc<dyn Engine>, styles: usize, max_optimize_iters: usize) -> Self {
        Pipeline {
            store,
            artifacts,
            engine,
            styles,
            max_optimize_iters,
            locks: Mutex::new(HashMap::new()),
        }
    }

    pub fn open(cfg: &AtelierConfig, engine: Arc<dyn Engine>) -> Result<Self> {
        Ok(Pipeline::new(
            JobStore::open(cfg.jobs_dir())?,
            ArtifactStore::open(cfg.artifacts_dir())?,
            engine,
            cfg.styles,
            cfg.max_optimize_iters,
        ))
    }

    pub fn engine(&self) -> &dyn Engine {
        self.engine.as_ref()
    }

    fn job_lock(&self, id: &str) -> Arc<Mutex<()>> {
        self.locks.lock().expect("lock table").entry(id.to_string()).or_default().clone()
    }

    pub fn create_job(&self, request: JobRequest) -> Result<PipelineJob> {
        if request.text.trim().is_empty() {
            return Err(ServiceError::invalid("text must not be empty"));
        }
        // id allocation and the first commit must not interleave
        let _guard = self.locks.lock().expect("lock table");
        let job = PipelineJob::new(self.store.next_id(), request);
        self.store.commit(&job)?;
        Ok(job)
    }

    pub fn get_job(&self, id: &str) -> Result<PipelineJob> {
        self.store.get(id)
    }

    pub fn list_jobs(&self, page: usize, per_page: usize) -> Result<JobPage> {
        self.store.list(page, per_page)
    }

    fn fail(&self, job: &mut PipelineJob, stage: JobState, err: ServiceError) -> Result<PipelineJob> {
        job.error = Some(JobError {
            stage: stage.name().to_string(),
            message: err.to_string(),
        });
        job.enter(JobState::Failed);
        self.store.commit(job)?;
        Ok(job.clone())
    }

    fn load_artifact(&self, hash: &str) -> Result<Tensor32> {
        Ok(imageops::decode_png(&self.artifacts.get(hash)?)?)
    }

    fn put_image(&self, image: &Tensor32) -> Result<String> {
        self.artifacts.put(&imageops::encode_png(image))
    }

    /// Run one stage of a queued, generating or classifying job.
    pub fn advance(&self, id: &str) -> Result<PipelineJob> {
        let lock = self.job_lock(id);
        let _g = lock.lock().expect("job lock");
        let mut job = self.store.get(id)?;
        match job.state {
            JobState::Queued | JobState::Generating => {
                if job.state == JobState::Queued {
                    job.enter(JobState::Generating);
                    self.store.commit(&job)?;
                }
                let r = &job.request;
                let generated = self
                    .engine
                    .generate(&r.text, r.seed, r.overrides.stages)
                    .map_err(ServiceError::from)
                    .and_then(|img| self.put_image(&img));
                match generated {
                    Ok(hash) => {
                        job.generated = Some(hash);
                        job.enter(JobState::Classifying);
                        self.store.commit(&job)?;
                        Ok(job)
                    }
                    Err(e) => self.fail(&mut job, JobState::Generating, e),
                }
            }
            JobState::Classifying => {
                let k = job.request.overrides.styles.unwrap_or(self.styles);
                let outcome = (|| -> Result<(GenreView, Vec<StyleOption>)> {
                    let hash = job
                        .generated
                        .as_deref()
                        .ok_or_else(|| ServiceError::Storage("generated image missing".into()))?;
                    let image = self.load_artifact(hash)?;
                    let dist = self.engine.classify(&image)?;
                    let rec = self.engine.recommend(&dist.label, k)?;
                    if rec.styles.is_empty() {
                        return Err(ServiceError::NotFound(format!("no styles recorded for genre {:?}", dist.label)));
                    }
                    Ok((
                        GenreView {
                            label: dist.label,
                            genres: dist.genres,
                            probs: dist.probs,
                        },
                        rec.styles.into_iter().map(|(style, count)| StyleOption { style, count }).collect(),
                    ))
                })();
                match outcome {
                    Ok((genre, styles)) => {
                        job.genre = Some(genre);
                        job.recommendation = Some(styles);
                        job.enter(JobState::AwaitingStyleChoice);
                        self.store.commit(&job)?;
                        Ok(job)
                    }
                    Err(e) => self.fail(&mut job, JobState::Classifying, e),
                }
            }
            s => Err(ServiceError::Conflict(format!("job {id} is {} and has no stage to run", s.name()))),
        }
    }

    /// Advance until the job parks for a style choice or fails.
    pub fn run_until_parked(&self, id: &str) -> Result<PipelineJob> {
        loop {
            let job = self.store.get(id)?;
            if !matches!(job.state, JobState::Queued | JobState::Generating | JobState::Classifying) {
                return Ok(job);
            }
            self.advance(id)?;
        }
    }

    fn check_mode(&self, mode: StyleMode) -> Result<()> {
        if let StyleMode::Optimize { iters } = mode {
            if iters == 0 || iters > self.max_optimize_iters {
                return Err(ServiceError::invalid(format!("iters must be in 1..={}", self.max_optimize_iters)));
            }
        }
        Ok(())
    }

    /// Pick a painting of the step's style and stylize `input` with it.
    fn stylize_step(&self, input: &str, pick: &Pick) -> Result<(String, String)> {
        let content = self.load_artifact(input)?;
        let (painting, style_img) = self.engine.pick(&pick.style, pick.seed)?;
        let out = self.engine.stylize(&content, &style_img, &pick.style, pick.mode)?;
        Ok((painting, self.put_image(&out)?))
    }

    /// Apply `style` to the job's latest image.
    pub fn choose_style(&self, id: &str, style: &str, mode: StyleMode) -> Result<PipelineJob> {
        self.check_mode(mode)?;
        let lock = self.job_lock(id);
        let _g = lock.lock().expect("job lock");
        let mut job = self.store.get(id)?;
        if !matches!(job.state, JobState::AwaitingStyleChoice | JobState::Done) {
            return Err(ServiceError::Conflict(format!(
                "job {id} is {}; styles can be chosen once it awaits a choice or is done",
                job.state.name()
            )));
        }
        let valid = job.recommended_ids();
        if !valid.iter().any(|s| s == style) {
            return Err(ServiceError::Invalid {
                message: format!(
                    "style {style:?} is not recommended for this job; choose one of {}",
                    valid.join(", ")
                ),
                valid: Some(valid),
            });
        }
        let input = job.latest_artifact().expect("parked jobs have an image").to_string();
        let seed = pick_seed(job.request.seed, job.picks.len());
        let mut pick = Pick {
            style: style.to_string(),
            painting: String::new(),
            seed,
            seed_history: vec![seed],
            mode,
        };
        job.enter(JobState::Stylizing);
        self.store.commit(&job)?;
        match self.stylize_step(&input, &pick) {
            Ok((painting, hash)) => {
                pick.painting = painting;
                job.chosen_styles.push(style.to_string());
                job.picks.push(pick);
                job.stylized.push(hash);
                job.enter(JobState::Done);
                self.store.commit(&job)?;
                Ok(job)
            }
            Err(e) => self.fail(&mut job, JobState::Stylizing, e),
        }
    }

    /// Re-pick the last step's painting with the next seed and redo that
    /// step, replacing its output.
    pub fn reshuffle(&self, id: &str) -> Result<PipelineJob> {
        let lock = self.job_lock(id);
        let _g = lock.lock().expect("job lock");
        let mut job = self.store.get(id)?;
        if job.picks.is_empty() {
            return Err(ServiceError::Conflict(format!("job {id} has no picks to reshuffle")));
        }
        if job.state != JobState::Done {
            return Err(ServiceError::Conflict(format!(
                "job {id} is {}; only done jobs can reshuffle",
                job.state.name()
            )));
        }
        let n = job.picks.len();
        let input = if n >= 2 {
            job.stylized[n - 2].clone()
        } else {
            job.generated.clone().expect("done jobs have an image")
        };
        let mut pick = job.picks[n - 1].clone();
        pick.seed = pick.seed.wrapping_add(1);
        pick.seed_history.push(pick.seed);
        job.enter(JobState::Stylizing);
        self.store.commit(&job)?;
        match self.stylize_step(&input, &pick) {
            Ok((painting, hash)) => {
                pick.painting = painting;
                job.picks[n - 1] = pick;
                job.stylized[n - 1] = hash;
                job.enter(JobState::Done);
                self.store.commit(&job)?;
                Ok(job)
            }
            Err(e) => self.fail(&mut job, JobState::Stylizing, e),
        }
    }

    /// Recommendation preview for a genre, independent of any job.
    pub fn preview_styles(&self, genre: &str, k: Option<usize>) -> Result<Vec<StyleOption>> {
        let rec = self.engine.recommend(genre, k.unwrap_or(self.styles))?;
        if rec.styles.is_empty() {
            return Err(ServiceError::NotFound(format!("genre {genre:?}")));
        }
        Ok(rec.styles.into_iter().map(|(style, count)| StyleOption { style, count }).collect())
    }
}
