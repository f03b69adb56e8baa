//! Pipeline job record and its state machine.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Generating,
    Classifying,
    AwaitingStyleChoice,
    Stylizing,
    Done,
    Failed,
}

impl JobState {
    pub const ALL: [JobState; 7] = [
        JobState::Queued,
        JobState::Generating,
        JobState::Classifying,
        JobState::AwaitingStyleChoice,
        JobState::Stylizing,
        JobState::Done,
        JobState::Failed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            JobState::Queued => "queued",
            JobState::Generating => "generating",
            JobState::Classifying => "classifying",
            JobState::AwaitingStyleChoice => "awaiting_style_choice",
            JobState::Stylizing => "stylizing",
            JobState::Done => "done",
            JobState::Failed => "failed",
        }
    }

    /// States where a worker is running a stage.
    pub fn is_active(self) -> bool {
        matches!(
            self,
            JobState::Queued | JobState::Generating | JobState::Classifying | JobState::Stylizing
        )
    }

    /// Whether `self → next` is a declared transition. `done → stylizing`
    /// covers chaining and reshuffling.
    pub fn can_become(self, next: JobState) -> bool {
        use JobState::*;
        match (self, next) {
            (Queued, Generating) | (Generating, Classifying) | (Classifying, AwaitingStyleChoice) => true,
            (AwaitingStyleChoice, Stylizing) | (Stylizing, Done) | (Done, Stylizing) => true,
            (s, Failed) => s.is_active(),
            _ => false,
        }
    }

    /// Actions a client may take: `(choose, reshuffle, add)`.
    pub fn actions(self) -> Actions {
        Actions {
            choose: self == JobState::AwaitingStyleChoice,
            reshuffle: self == JobState::Done,
            add: self == JobState::Done,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Actions {
    pub choose: bool,
    pub reshuffle: bool,
    pub add: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct JobOverrides {
    /// Generator stages to run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stages: Option<usize>,
    /// Number of recommended styles.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub styles: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRequest {
    pub text: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub overrides: JobOverrides,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenreView {
    pub label: String,
    pub genres: Vec<String>,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleOption {
    pub style: String,
    /// Paintings of this style in the predicted genre.
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pick {
    pub style: String,
    pub painting: String,
    pub seed: u64,
    /// Every pick seed used for this step, oldest first.
    pub seed_history: Vec<u64>,
    pub mode: StyleMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum StyleMode {
    #[default]
    Feedforward,
    Optimize {
        iters: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobError {
    pub stage: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: JobState,
    /// Milliseconds since the Unix epoch.
    pub at_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineJob {
    pub id: String,
    pub request: JobRequest,
    pub state: JobState,
    pub generated: Option<String>,
    pub genre: Option<GenreView>,
    pub recommendation: Option<Vec<StyleOption>>,
    pub chosen_styles: Vec<String>,
    pub picks: Vec<Pick>,
    pub stylized: Vec<String>,
    pub error: Option<JobError>,
    pub transitions: Vec<Transition>,
}

impl PipelineJob {
    pub fn new(id: String, request: JobRequest) -> Self {
        PipelineJob {
            id,
            request,
            state: JobState::Queued,
            generated: None,
            genre: None,
            recommendation: None,
            chosen_styles: Vec::new(),
            picks: Vec::new(),
            stylized: Vec::new(),
            error: None,
            transitions: vec![Transition {
                state: JobState::Queued,
                at_ms: now_ms(),
            }],
        }
    }

    pub fn recommended_ids(&self) -> Vec<String> {
        self.recommendation.iter().flatten().map(|s| s.style.clone()).collect()
    }

    /// Most recent artifact: last stylization, else the generated image.
    pub fn latest_artifact(&self) -> Option<&str> {
        self.stylized.last().or(self.generated.as_ref()).map(String::as_str)
    }

    pub(crate) fn enter(&mut self, state: JobState) {
        self.state = state;
        self.transitions.push(Transition { state, at_ms: now_ms() });
    }
}

fn now_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}
