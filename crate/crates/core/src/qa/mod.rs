//! Question-answer pairs derived from quality metrics and artifact
//! provenance.
//!
//! Three fixed tasks are generated per volume: Classification (quality
//! level and signal description), Artifact (kinds, causes, visual
//! features) and Analysis (downstream usability and remediation). Texts
//! come from deterministic templates; an external LLM may rewrite them
//! afterwards, see [`llm_paraphrase`].
//!
//! The label thresholds are calibration constants of this toolkit, chosen
//! so that clean synthetic phantoms land Good and full-severity
//! corruptions land Bad.

mod corpus;
mod paraphrase;
mod templates;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifact::{ArtifactKind, ProvenanceRecord};
use crate::metrics::QualityMetrics;

pub use corpus::{
    corpus_id, export_jsonl, export_jsonl_file, read_jsonl, review_tsv, sample_qa, CorpusRecord, Turn,
};
pub use paraphrase::{llm_paraphrase, ParaphraseOutcome, ParaphraseReport, PARAPHRASE_SYSTEM_PROMPT};
pub use templates::{kinds_named, phrases, ArtifactPhrases};

#[derive(Debug, Error, PartialEq)]
pub enum QaError {
    #[error("label inputs undefined: {0}")]
    UndefinedInputs(String),
    #[error("invalid thresholds: {0}")]
    InvalidThresholds(String),
    #[error("sample fraction must be in (0, 1], got {0}")]
    InvalidFraction(f64),
    #[error("no image path for volume {0}")]
    MissingImage(String),
    #[error("corpus line {line}: {message}")]
    Corpus { line: usize, message: String },
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for QaError {
    fn from(e: std::io::Error) -> Self {
        QaError::Io(e.to_string())
    }
}

/// Three-tier quality level, ordered `Bad < Medium < Good`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum QualityLabel {
    Bad,
    Medium,
    Good,
}

impl QualityLabel {
    pub const ALL: [QualityLabel; 3] = [QualityLabel::Good, QualityLabel::Medium, QualityLabel::Bad];

    pub fn as_str(self) -> &'static str {
        match self {
            QualityLabel::Good => "Good",
            QualityLabel::Medium => "Medium",
            QualityLabel::Bad => "Bad",
        }
    }
}

impl fmt::Display for QualityLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for QualityLabel {
    type Err = QaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        QualityLabel::ALL
            .into_iter()
            .find(|l| l.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| QaError::UndefinedInputs(format!("unknown quality label {s:?}")))
    }
}

/// Case-insensitive whole-word occurrences of each label token, in
/// [`QualityLabel::ALL`] order.
pub fn label_token_counts(text: &str) -> [usize; 3] {
    let mut counts = [0; 3];
    for word in text.split(|c: char| !c.is_alphanumeric()) {
        for (i, l) in QualityLabel::ALL.iter().enumerate() {
            if word.eq_ignore_ascii_case(l.as_str()) {
                counts[i] += 1;
            }
        }
    }
    counts
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelThresholds {
    /// Minimum SNR1 for Good.
    pub snr_high: f64,
    /// SNR1 below this is Bad.
    pub snr_low: f64,
    /// Maximum EFC for Good.
    pub efc_low: f64,
    /// EFC above this is Bad.
    pub efc_high: f64,
}

impl Default for LabelThresholds {
    fn default() -> Self {
        Self {
            snr_high: 15.0,
            snr_low: 5.0,
            efc_low: 0.45,
            efc_high: 0.75,
        }
    }
}

impl LabelThresholds {
    pub fn validate(&self) -> Result<(), QaError> {
        let all = [self.snr_high, self.snr_low, self.efc_low, self.efc_high];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(QaError::InvalidThresholds("thresholds must be finite".into()));
        }
        if self.snr_low > self.snr_high || self.efc_low > self.efc_high {
            return Err(QaError::InvalidThresholds(format!(
                "need snr_low <= snr_high and efc_low <= efc_high, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Bad if `snr1 < snr_low` or `efc > efc_high`; Good if `snr1 >= snr_high`
/// and `efc <= efc_low`; Medium otherwise.
pub fn derive_label(m: &QualityMetrics, t: &LabelThresholds) -> Result<QualityLabel, QaError> {
    let snr1 = m.snr1.ok_or_else(|| QaError::UndefinedInputs("SNR1 is undefined".into()))?;
    let efc = m.efc.ok_or_else(|| QaError::UndefinedInputs("EFC is undefined".into()))?;
    Ok(if snr1 < t.snr_low || efc > t.efc_high {
        QualityLabel::Bad
    } else if snr1 >= t.snr_high && efc <= t.efc_low {
        QualityLabel::Good
    } else {
        QualityLabel::Medium
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum QaTask {
    Classification,
    Artifact,
    Analysis,
}

impl QaTask {
    pub const ALL: [QaTask; 3] = [QaTask::Classification, QaTask::Artifact, QaTask::Analysis];

    pub fn as_str(self) -> &'static str {
        match self {
            QaTask::Classification => "classification",
            QaTask::Artifact => "artifact",
            QaTask::Analysis => "analysis",
        }
    }
}

impl fmt::Display for QaTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QAPair {
    pub task: QaTask,
    pub question: String,
    pub answer: String,
    pub volume_id: String,
    pub label: QualityLabel,
    pub metrics_snapshot: QualityMetrics,
    pub provenance: Option<ProvenanceRecord>,
}

impl QAPair {
    /// Kinds that actually changed the volume.
    pub fn applied_kinds(&self) -> Vec<ArtifactKind> {
        self.provenance.as_ref().map(ProvenanceRecord::kinds).unwrap_or_default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QaConfig {
    pub thresholds: LabelThresholds,
    /// When false, answers carry no metric values and no digits at all.
    pub use_metrics: bool,
}

impl Default for QaConfig {
    fn default() -> Self {
        Self {
            thresholds: LabelThresholds::default(),
            use_metrics: true,
        }
    }
}

/// One pair per task, in [`QaTask::ALL`] order.
pub fn generate_qa(
    volume_id: &str,
    m: &QualityMetrics,
    prov: Option<&ProvenanceRecord>,
    cfg: &QaConfig,
) -> Result<Vec<QAPair>, QaError> {
    cfg.thresholds.validate()?;
    let label = derive_label(m, &cfg.thresholds)?;
    let kinds = prov.map(ProvenanceRecord::kinds).unwrap_or_default();
    let severity = prov.map_or(0.0, ProvenanceRecord::max_severity);
    Ok(QaTask::ALL
        .into_iter()
        .map(|task| {
            let (question, answer) = templates::render(task, label, m, &kinds, severity, cfg.use_metrics);
            QAPair {
                task,
                question,
                answer,
                volume_id: volume_id.to_string(),
                label,
                metrics_snapshot: m.clone(),
                provenance: prov.cloned(),
            }
        })
        .collect())
}
