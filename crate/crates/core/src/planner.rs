//! Planning prompts, text-generation backends, and parse-with-retry plan
//! generation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::plan::{
    parse_frame_plan, parse_high_level_plan, validate_frame_plan, validate_high_level_plan, FrameLevelPlan,
    HighLevelPlan, HighLevelRules, PlanError, RuleConfig, ValidationReport,
};

pub const HIGH_LEVEL_TEMPLATE: &str = include_str!("../templates/high_level.txt");
pub const FINE_GRAINED_TEMPLATE: &str = include_str!("../templates/fine_grained.txt");

pub const ENDPOINT_VAR: &str = "PLANNER_ENDPOINT";
pub const API_KEY_VAR: &str = "PLANNER_API_KEY";

#[derive(Debug, Error)]
pub enum PlannerError {
    #[error("slot {{{0}}} not provided")]
    MissingSlot(String),
    #[error("slot {{{0}}} is empty")]
    EmptySlot(String),
    #[error("template {id:?}: {reason}")]
    BadTemplate { id: TemplateId, reason: String },
    #[error("backend: {0}")]
    Backend(String),
    #[error("no parsable plan after {attempts} attempts: {last}")]
    ExhaustedRetries { attempts: usize, last: PlanError },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    HighLevel,
    FineGrained,
}

impl TemplateId {
    pub fn slots(self) -> &'static [&'static str] {
        match self {
            TemplateId::HighLevel => &["topic"],
            TemplateId::FineGrained => &["motions", "narration"],
        }
    }
}

impl std::str::FromStr for TemplateId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "high_level" | "high-level" | "story" => Ok(TemplateId::HighLevel),
            "fine_grained" | "fine-grained" | "scene" => Ok(TemplateId::FineGrained),
            _ => Err(format!("unknown template {s:?} (high_level|fine_grained)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: TemplateId,
    pub body: String,
}

impl PromptTemplate {
    pub fn builtin(id: TemplateId) -> Self {
        let body = match id {
            TemplateId::HighLevel => HIGH_LEVEL_TEMPLATE,
            TemplateId::FineGrained => FINE_GRAINED_TEMPLATE,
        };
        PromptTemplate {
            id,
            body: body.to_string(),
        }
    }

    /// Custom body; every declared slot must appear exactly once.
    pub fn new(id: TemplateId, body: String) -> Result<Self, PlannerError> {
        for slot in id.slots() {
            let n = body.matches(&format!("{{{slot}}}")).count();
            if n != 1 {
                return Err(PlannerError::BadTemplate {
                    id,
                    reason: format!("slot {{{slot}}} appears {n} times"),
                });
            }
        }
        Ok(PromptTemplate { id, body })
    }

    pub fn from_file(id: TemplateId, path: &Path) -> Result<Self, PlannerError> {
        Self::new(id, std::fs::read_to_string(path)?)
    }
}

/// Substitutes each declared slot; nothing else in the body changes.
pub fn render_prompt(template: &PromptTemplate, slots: &[(&str, &str)]) -> Result<String, PlannerError> {
    let mut out = template.body.clone();
    for &name in template.id.slots() {
        let value = slots
            .iter()
            .find(|(k, _)| *k == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| PlannerError::MissingSlot(name.to_string()))?;
        if value.trim().is_empty() {
            return Err(PlannerError::EmptySlot(name.to_string()));
        }
        out = out.replacen(&format!("{{{name}}}"), value, 1);
    }
    Ok(out)
}

/// Text-generation service.
pub trait TextBackend {
    fn generate(&mut self, prompt: &str) -> Result<String, PlannerError>;
}

/// Replays canned responses in order and records the prompts it received.
#[derive(Debug, Clone, Default)]
pub struct ReplayBackend {
    responses: Vec<String>,
    next: usize,
    pub prompts: Vec<String>,
}

impl ReplayBackend {
    pub fn new(responses: Vec<String>) -> Self {
        ReplayBackend {
            responses,
            ..Default::default()
        }
    }

    /// Every regular file in `dir`, in file-name order.
    pub fn from_dir(dir: &Path) -> Result<Self, PlannerError> {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        paths.sort();
        let responses = paths.iter().map(std::fs::read_to_string).collect::<Result<_, _>>()?;
        Ok(Self::new(responses))
    }

    pub fn calls(&self) -> usize {
        self.prompts.len()
    }
}

impl TextBackend for ReplayBackend {
    fn generate(&mut self, prompt: &str) -> Result<String, PlannerError> {
        self.prompts.push(prompt.to_string());
        let out = self
            .responses
            .get(self.next)
            .cloned()
            .ok_or_else(|| PlannerError::Backend(format!("replay exhausted after {} responses", self.next)))?;
        self.next += 1;
        Ok(out)
    }
}

/// `POST {"prompt": ...}` to an endpoint answering `{"text": ...}`.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    pub endpoint: String,
    pub api_key: Option<String>,
    pub timeout: std::time::Duration,
}

impl HttpBackend {
    pub fn from_env() -> Result<Self, PlannerError> {
        let endpoint =
            std::env::var(ENDPOINT_VAR).map_err(|_| PlannerError::Backend(format!("{ENDPOINT_VAR} is not set")))?;
        Ok(HttpBackend {
            endpoint,
            api_key: std::env::var(API_KEY_VAR).ok(),
            timeout: std::time::Duration::from_secs(120),
        })
    }
}

#[derive(Serialize)]
struct GenerateRequest<'a> {
    prompt: &'a str,
}

#[derive(Deserialize)]
struct GenerateResponse {
    text: String,
}

impl TextBackend for HttpBackend {
    fn generate(&mut self, prompt: &str) -> Result<String, PlannerError> {
        let mut req = ureq::post(&self.endpoint).timeout(self.timeout);
        if let Some(key) = &self.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        let resp: GenerateResponse = req
            .send_json(GenerateRequest { prompt })
            .map_err(|e| PlannerError::Backend(e.to_string()))?
            .into_json()
            .map_err(|e| PlannerError::Backend(format!("bad response body: {e}")))?;
        Ok(resp.text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoryRequest {
    pub topic: String,
    #[serde(default)]
    pub characters: Vec<(String, PathBuf)>,
    #[serde(default = "default_retries")]
    pub max_retries: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneRequest {
    pub motions: Vec<String>,
    pub narration: String,
    #[serde(default = "default_retries")]
    pub max_retries: usize,
}

fn default_retries() -> usize {
    3
}

impl StoryRequest {
    pub fn new(topic: &str) -> Self {
        StoryRequest {
            topic: topic.to_string(),
            characters: Vec::new(),
            max_retries: default_retries(),
        }
    }
}

impl SceneRequest {
    pub fn new(motions: &[&str], narration: &str) -> Self {
        SceneRequest {
            motions: motions.iter().map(|m| m.to_string()).collect(),
            narration: narration.to_string(),
            max_retries: default_retries(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GeneratedPlan {
    HighLevel(HighLevelPlan),
    FrameLevel(FrameLevelPlan),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub plan: GeneratedPlan,
    pub report: ValidationReport,
    pub attempts: usize,
}

fn retry_prompt(prompt: &str, err: &PlanError) -> String {
    format!("{prompt}\n\nYour previous answer could not be parsed ({err}). Answer again using exactly the output format above.\n")
}

/// Renders the template, queries the backend, and parses the answer. Parse
/// failures are retried up to `max_retries` times with the error appended to
/// the prompt.
pub fn generate_plan(
    backend: &mut dyn TextBackend,
    template: &PromptTemplate,
    slots: &[(&str, &str)],
    max_retries: usize,
) -> Result<Generation, PlannerError> {
    let base = render_prompt(template, slots)?;
    let mut prompt = base.clone();
    let mut last = None;
    for attempt in 1..=max_retries + 1 {
        let text = backend.generate(&prompt)?;
        let parsed = match template.id {
            TemplateId::HighLevel => parse_high_level_plan(&text).map(|p| {
                let report = validate_high_level_plan(&p, &HighLevelRules::default());
                (GeneratedPlan::HighLevel(p), report)
            }),
            TemplateId::FineGrained => parse_frame_plan(&text).map(|p| {
                let report = validate_frame_plan(&p, &RuleConfig::default());
                (GeneratedPlan::FrameLevel(p), report)
            }),
        };
        match parsed {
            Ok((plan, report)) => {
                return Ok(Generation {
                    plan,
                    report,
                    attempts: attempt,
                })
            }
            Err(e) => {
                prompt = retry_prompt(&base, &e);
                last = Some(e);
            }
        }
    }
    Err(PlannerError::ExhaustedRetries {
        attempts: max_retries + 1,
        last: last.expect("at least one attempt"),
    })
}

pub fn generate_story_plan(backend: &mut dyn TextBackend, request: &StoryRequest) -> Result<Generation, PlannerError> {
    let template = PromptTemplate::builtin(TemplateId::HighLevel);
    generate_plan(backend, &template, &[("topic", &request.topic)], request.max_retries)
}

pub fn generate_scene_plan(backend: &mut dyn TextBackend, request: &SceneRequest) -> Result<Generation, PlannerError> {
    let template = PromptTemplate::builtin(TemplateId::FineGrained);
    let motions = request.motions.join(", ");
    generate_plan(
        backend,
        &template,
        &[("motions", &motions), ("narration", &request.narration)],
        request.max_retries,
    )
}
