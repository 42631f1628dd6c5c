//! Free-text report to structured RoI extraction.
//!
//! Two backends sit behind [`Extractor`]: a remote LLM service and a
//! lexicon-driven rule extractor that needs no network and is fully
//! deterministic. Both produce [`ExtractedRoI`] records holding the source
//! sentence plus the five lesion fields compared during matching.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::embedding::normalize_text;
use crate::remote::{self, PostError};

pub const EXTRACTOR_API_KEY_ENV: &str = "EXTRACTOR_API_KEY";
pub const EXTRACTOR_ENDPOINT_ENV: &str = "EXTRACTOR_ENDPOINT";

/// The five comparable lesion fields, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    AnatomicRegion,
    LesionType,
    Density,
    Morphology,
    FdgUptake,
}

impl Field {
    pub const ALL: [Field; 5] = [
        Field::AnatomicRegion,
        Field::LesionType,
        Field::Density,
        Field::Morphology,
        Field::FdgUptake,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Field::AnatomicRegion => "anatomic_region",
            Field::LesionType => "lesion_type",
            Field::Density => "density",
            Field::Morphology => "morphology",
            Field::FdgUptake => "fdg_uptake",
        }
    }

    pub fn from_key(key: &str) -> Option<Field> {
        Field::ALL.into_iter().find(|f| f.key() == key)
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// One RoI found in a generated report. Empty strings mean "not stated".
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ExtractedRoI {
    pub extraction_text: String,
    pub anatomic_region: String,
    pub lesion_type: String,
    pub density: String,
    pub morphology: String,
    pub fdg_uptake: String,
}

impl ExtractedRoI {
    pub fn comparable_fields(&self) -> [&str; 5] {
        [
            &self.anatomic_region,
            &self.lesion_type,
            &self.density,
            &self.morphology,
            &self.fdg_uptake,
        ]
    }

    pub fn field_mut(&mut self, field: Field) -> &mut String {
        match field {
            Field::AnatomicRegion => &mut self.anatomic_region,
            Field::LesionType => &mut self.lesion_type,
            Field::Density => &mut self.density,
            Field::Morphology => &mut self.morphology,
            Field::FdgUptake => &mut self.fdg_uptake,
        }
    }
}

impl<'de> Deserialize<'de> for ExtractedRoI {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let value = Value::deserialize(d)?;
        validate_extracted(&value).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ValidationError {
    #[error("extracted RoI must be a JSON object")]
    NotAnObject,
    #[error("missing required key \"extraction_text\"")]
    MissingExtractionText,
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("key {0:?} must hold a string")]
    WrongType(String),
    #[error("extraction_text {0:?} does not occur in the source report")]
    NotInSource(String),
}

/// Strictly validate one raw extracted object.
///
/// Exactly the keys `extraction_text` plus the five field keys are allowed.
/// A missing field key is read as the empty string; `extraction_text` is
/// mandatory. Values must be strings.
pub fn validate_extracted(record: &Value) -> Result<ExtractedRoI, ValidationError> {
    let obj = record.as_object().ok_or(ValidationError::NotAnObject)?;
    if let Some(unknown) = obj
        .keys()
        .find(|k| *k != "extraction_text" && Field::from_key(k).is_none())
    {
        return Err(ValidationError::UnknownKey(unknown.clone()));
    }
    let text = |key: &str| -> Result<Option<String>, ValidationError> {
        match obj.get(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.clone())),
            Some(_) => Err(ValidationError::WrongType(key.to_owned())),
        }
    };
    let mut roi = ExtractedRoI {
        extraction_text: text("extraction_text")?.ok_or(ValidationError::MissingExtractionText)?,
        ..ExtractedRoI::default()
    };
    for field in Field::ALL {
        *roi.field_mut(field) = text(field.key())?.unwrap_or_default();
    }
    Ok(roi)
}

#[derive(Debug, Error)]
pub enum ExtractionError {
    #[error("extraction service transport failure: {0}")]
    Transport(String),
    #[error("extraction service error: {0}")]
    Service(String),
    #[error("extraction response item {index} rejected: {source}")]
    Schema {
        index: usize,
        #[source]
        source: ValidationError,
    },
    #[error("extraction response is not a JSON array")]
    NotAnArray,
    #[error("lexicon is empty")]
    EmptyLexicon,
    #[error("invalid lexicon: {0}")]
    Lexicon(String),
    #[error("cannot read lexicon {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid extractor configuration: {0}")]
    Config(String),
}

impl ExtractionError {
    /// Failures of the external service, as opposed to local configuration
    /// or schema problems.
    pub fn is_external(&self) -> bool {
        matches!(
            self,
            ExtractionError::Transport(_) | ExtractionError::Service(_)
        )
    }
}

impl From<PostError> for ExtractionError {
    fn from(e: PostError) -> Self {
        match e {
            PostError::Transport(m) => ExtractionError::Transport(m),
            other => ExtractionError::Service(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractorDescriptor {
    pub backend: String,
    pub model: String,
}

pub trait Extractor: Send + Sync {
    fn descriptor(&self) -> ExtractorDescriptor;

    /// Extract RoIs in sentence order. Every returned record passes
    /// [`validate_extracted`] and its `extraction_text` occurs in the report.
    fn extract(&self, report_text: &str) -> Result<Vec<ExtractedRoI>, ExtractionError>;
}

/// Surface form to field mapping used by [`RuleExtractor`].
#[derive(Debug, Clone, PartialEq)]
pub struct Lexicon {
    // per field: (normalized surface, surface as written), longest first
    entries: Vec<Vec<(String, String)>>,
    source: BTreeMap<String, Field>,
}

impl Lexicon {
    pub fn new(map: BTreeMap<String, Field>) -> Result<Self, ExtractionError> {
        let mut entries = vec![Vec::new(); Field::ALL.len()];
        for (surface, field) in &map {
            let normalized = normalize_text(surface);
            if normalized.is_empty() {
                return Err(ExtractionError::Lexicon(format!(
                    "blank surface form {surface:?}"
                )));
            }
            entries[field.index()].push((normalized, surface.clone()));
        }
        if map.is_empty() {
            return Err(ExtractionError::EmptyLexicon);
        }
        for list in &mut entries {
            list.sort_by(|a, b| {
                b.0.chars()
                    .count()
                    .cmp(&a.0.chars().count())
                    .then_with(|| a.0.cmp(&b.0))
            });
        }
        Ok(Lexicon {
            entries,
            source: map,
        })
    }

    /// Parse a JSON object mapping surface forms to field names.
    pub fn from_json(json: &str) -> Result<Self, ExtractionError> {
        let raw: HashMap<String, String> =
            serde_json::from_str(json).map_err(|e| ExtractionError::Lexicon(e.to_string()))?;
        let mut map = BTreeMap::new();
        for (surface, field) in raw {
            let field = Field::from_key(&field).ok_or_else(|| {
                ExtractionError::Lexicon(format!(
                    "{surface:?} maps to {field:?}, which is not an extractable field"
                ))
            })?;
            map.insert(surface, field);
        }
        Self::new(map)
    }

    pub fn load(path: &Path) -> Result<Self, ExtractionError> {
        let text = std::fs::read_to_string(path).map_err(|source| ExtractionError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    /// Longest surface form of `field` occurring on word boundaries in the
    /// already-normalized `sentence`. Equal lengths resolve to the earliest
    /// occurrence.
    fn lookup(&self, field: Field, sentence: &str) -> Option<&str> {
        let mut best: Option<(usize, usize, &str)> = None;
        for (normalized, surface) in &self.entries[field.index()] {
            let len = normalized.chars().count();
            if let Some((best_len, _, _)) = best {
                if len < best_len {
                    break;
                }
            }
            if let Some(pos) = find_word(sentence, normalized) {
                match best {
                    Some((_, best_pos, _)) if best_pos <= pos => {}
                    _ => best = Some((len, pos, surface)),
                }
            }
        }
        best.map(|(_, _, s)| s)
    }
}

fn find_word(haystack: &str, needle: &str) -> Option<usize> {
    let is_word = |c: char| c.is_alphanumeric();
    haystack.match_indices(needle).map(|(i, _)| i).find(|&i| {
        let before = haystack[..i].chars().next_back();
        let after = haystack[i + needle.len()..].chars().next();
        !before.is_some_and(is_word) && !after.is_some_and(is_word)
    })
}

/// Byte spans of sentences. Sentences end at a newline, or at `.`, `!` or
/// `?` followed by whitespace or end of text; the terminator stays in the
/// sentence. Spans are trimmed and never empty.
pub fn sentence_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = 0;
    let push = |s: usize, e: usize, spans: &mut Vec<(usize, usize)>| {
        let piece = &text[s..e];
        let lead = piece.len() - piece.trim_start().len();
        let trail = piece.len() - piece.trim_end().len();
        if s + lead < e - trail {
            spans.push((s + lead, e - trail));
        }
    };
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        let end = match c {
            '\n' => Some(i),
            '.' | '!' | '?' => match chars.peek() {
                None => Some(i + 1),
                Some(&(_, next)) if next.is_whitespace() => Some(i + 1),
                _ => None,
            },
            _ => None,
        };
        if let Some(end) = end {
            push(start, end, &mut spans);
            start = end;
        }
    }
    push(start, text.len(), &mut spans);
    spans
}

/// Deterministic extractor: one record per sentence containing at least one
/// lexicon hit.
#[derive(Debug, Clone)]
pub struct RuleExtractor {
    lexicon: Lexicon,
}

impl RuleExtractor {
    pub fn new(lexicon: Lexicon) -> Result<Self, ExtractionError> {
        if lexicon.is_empty() {
            return Err(ExtractionError::EmptyLexicon);
        }
        Ok(RuleExtractor { lexicon })
    }
}

impl Extractor for RuleExtractor {
    fn descriptor(&self) -> ExtractorDescriptor {
        ExtractorDescriptor {
            backend: "rules".into(),
            model: format!("lexicon[{}]", self.lexicon.len()),
        }
    }

    fn extract(&self, report_text: &str) -> Result<Vec<ExtractedRoI>, ExtractionError> {
        let mut out = Vec::new();
        for (s, e) in sentence_spans(report_text) {
            let sentence = &report_text[s..e];
            let normalized = normalize_text(sentence);
            let mut roi = ExtractedRoI {
                extraction_text: sentence.to_owned(),
                ..ExtractedRoI::default()
            };
            let mut hit = false;
            for field in Field::ALL {
                if let Some(surface) = self.lexicon.lookup(field, &normalized) {
                    *roi.field_mut(field) = surface.to_owned();
                    hit = true;
                }
            }
            if hit {
                out.push(roi);
            }
        }
        Ok(out)
    }
}

/// Prompt sent with every report when no template is configured.
pub const DEFAULT_PROMPT: &str = "Extract every region of interest described in the PET/CT report. \
For each sentence that describes a finding, return one JSON object with exactly these string keys: \
\"extraction_text\" (the sentence copied verbatim), \"anatomic_region\", \"lesion_type\", \"density\", \
\"morphology\", \"fdg_uptake\". Use an empty string for anything not stated. Do not report size, SUVmax, \
diagnoses, recommended examinations or notes. Respond with a JSON array of these objects in report order.";

#[derive(Serialize)]
struct ExtractRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    report_text: &'a str,
}

/// Client for an LLM extraction service.
pub struct RemoteExtractor {
    client: reqwest::blocking::Client,
    endpoint: String,
    model: String,
    prompt: String,
    api_key: Option<String>,
    max_retries: u32,
}

impl RemoteExtractor {
    pub fn new(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        prompt: impl Into<String>,
        api_key: Option<String>,
        timeout: Duration,
        max_retries: u32,
    ) -> Result<Self, ExtractionError> {
        Ok(RemoteExtractor {
            client: remote::build_client(timeout).map_err(ExtractionError::Config)?,
            endpoint: endpoint.into(),
            model: model.into(),
            prompt: prompt.into(),
            api_key,
            max_retries,
        })
    }
}

/// Validate a service response against the source report.
pub fn validate_response(
    response: &Value,
    report_text: &str,
) -> Result<Vec<ExtractedRoI>, ExtractionError> {
    let items = response.as_array().ok_or(ExtractionError::NotAnArray)?;
    let mut out = Vec::with_capacity(items.len());
    for (index, item) in items.iter().enumerate() {
        let roi =
            validate_extracted(item).map_err(|source| ExtractionError::Schema { index, source })?;
        let pos = report_text
            .find(&roi.extraction_text)
            .filter(|_| !roi.extraction_text.is_empty())
            .ok_or_else(|| ExtractionError::Schema {
                index,
                source: ValidationError::NotInSource(roi.extraction_text.clone()),
            })?;
        out.push((pos, roi));
    }
    out.sort_by_key(|(pos, _)| *pos);
    Ok(out.into_iter().map(|(_, roi)| roi).collect())
}

impl Extractor for RemoteExtractor {
    fn descriptor(&self) -> ExtractorDescriptor {
        ExtractorDescriptor {
            backend: "remote-llm".into(),
            model: self.model.clone(),
        }
    }

    fn extract(&self, report_text: &str) -> Result<Vec<ExtractedRoI>, ExtractionError> {
        if report_text.trim().is_empty() {
            return Ok(Vec::new());
        }
        let body = ExtractRequest {
            model: &self.model,
            prompt: &self.prompt,
            report_text,
        };
        let value = remote::post_json(
            &self.client,
            &self.endpoint,
            self.api_key.as_deref(),
            &body,
            self.max_retries,
        )?;
        validate_response(&value, report_text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractorBackend {
    RemoteLlm,
    Rules,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    pub backend: ExtractorBackend,
    pub endpoint: Option<String>,
    pub model_name: Option<String>,
    pub prompt_template: String,
    pub max_retries: u32,
    pub timeout_secs: u64,
    pub lexicon_path: Option<PathBuf>,
}

impl ExtractorConfig {
    pub fn rules(lexicon_path: impl Into<PathBuf>) -> Self {
        ExtractorConfig {
            backend: ExtractorBackend::Rules,
            endpoint: None,
            model_name: None,
            prompt_template: DEFAULT_PROMPT.into(),
            max_retries: 2,
            timeout_secs: 60,
            lexicon_path: Some(lexicon_path.into()),
        }
    }

    pub fn remote(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        ExtractorConfig {
            backend: ExtractorBackend::RemoteLlm,
            endpoint: Some(endpoint.into()),
            model_name: Some(model.into()),
            prompt_template: DEFAULT_PROMPT.into(),
            max_retries: 2,
            timeout_secs: 60,
            lexicon_path: None,
        }
    }

    /// Instantiate the backend. The remote API key comes from
    /// `EXTRACTOR_API_KEY`.
    pub fn build(&self) -> Result<Box<dyn Extractor>, ExtractionError> {
        match self.backend {
            ExtractorBackend::Rules => {
                let path = self.lexicon_path.as_ref().ok_or_else(|| {
                    ExtractionError::Config("rules backend requires a lexicon".into())
                })?;
                Ok(Box::new(RuleExtractor::new(Lexicon::load(path)?)?))
            }
            ExtractorBackend::RemoteLlm => {
                let endpoint = self.endpoint.clone().ok_or_else(|| {
                    ExtractionError::Config("remote backend requires an endpoint".into())
                })?;
                let model = self.model_name.clone().ok_or_else(|| {
                    ExtractionError::Config("remote backend requires a model name".into())
                })?;
                Ok(Box::new(RemoteExtractor::new(
                    endpoint,
                    model,
                    self.prompt_template.clone(),
                    std::env::var(EXTRACTOR_API_KEY_ENV).ok(),
                    Duration::from_secs(self.timeout_secs),
                    self.max_retries,
                )?))
            }
        }
    }
}

/// Build the configured backend and run it on one report.
pub fn extract_rois(
    report_text: &str,
    config: &ExtractorConfig,
) -> Result<Vec<ExtractedRoI>, ExtractionError> {
    config.build()?.extract(report_text)
}
