//! Three-tier classification scores and LLM-judge score aggregation.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{ChatClient, LlmClientConfig, LlmError};
use crate::qa::QualityLabel;

/// `[text]` is replaced by the description under assessment.
pub const JUDGE_PROMPT_TEMPLATE: &str = "Assess the following MRI quality description [text] on a 0-100 scale for \
artifact identification and diagnostic relevance.";

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("{preds} predictions but {truths} ground-truth labels")]
    LengthMismatch { preds: usize, truths: usize },
    #[error("nothing to evaluate")]
    Empty,
    #[error(transparent)]
    Llm(#[from] LlmError),
}

fn class_index(l: QualityLabel) -> usize {
    QualityLabel::ALL.iter().position(|&c| c == l).expect("label is in ALL")
}

/// Counts indexed `[true][predicted]`, classes in [`QualityLabel::ALL`]
/// order (Good, Medium, Bad).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 3]; 3],
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..3).map(|i| self.counts[i][i]).sum()
    }

    pub fn is_diagonal(&self) -> bool {
        (0..3).all(|i| (0..3).all(|j| i == j || self.counts[i][j] == 0))
    }

    pub fn get(&self, truth: QualityLabel, pred: QualityLabel) -> u64 {
        self.counts[class_index(truth)][class_index(pred)]
    }
}

pub fn confusion(preds: &[QualityLabel], truths: &[QualityLabel]) -> Result<ConfusionMatrix, EvalError> {
    if preds.len() != truths.len() {
        return Err(EvalError::LengthMismatch { preds: preds.len(), truths: truths.len() });
    }
    if preds.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &t) in preds.iter().zip(truths) {
        cm.counts[class_index(t)][class_index(p)] += 1;
    }
    Ok(cm)
}

/// `trace / total`; 0 for an empty matrix.
pub fn accuracy(cm: &ConfusionMatrix) -> f64 {
    match cm.total() {
        0 => 0.0,
        n => cm.trace() as f64 / n as f64,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub label: QualityLabel,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

/// Per-class precision, recall and F1. A zero denominator yields 0.
pub fn per_class(cm: &ConfusionMatrix) -> [ClassScore; 3] {
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    std::array::from_fn(|c| {
        let tp = cm.counts[c][c];
        let support: u64 = cm.counts[c].iter().sum();
        let predicted: u64 = (0..3).map(|t| cm.counts[t][c]).sum();
        ClassScore {
            label: QualityLabel::ALL[c],
            precision: ratio(tp, predicted),
            recall: ratio(tp, support),
            f1: ratio(2 * tp, support + predicted),
            support,
        }
    })
}

/// Unweighted mean of the three per-class F1 scores.
pub fn macro_f1(cm: &ConfusionMatrix) -> f64 {
    per_class(cm).iter().map(|s| s.f1).sum::<f64>() / 3.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationSummary {
    pub n: u64,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassScore>,
    pub confusion: ConfusionMatrix,
}

pub fn summarize(cm: &ConfusionMatrix) -> ClassificationSummary {
    ClassificationSummary {
        n: cm.total(),
        accuracy: accuracy(cm),
        macro_f1: macro_f1(cm),
        per_class: per_class(cm).to_vec(),
        confusion: *cm,
    }
}

/// Rows `item, truth, prediction, correct` for each scored item.
pub fn predictions_tsv(items: &[String], truths: &[QualityLabel], preds: &[QualityLabel]) -> String {
    let mut s = String::from("item\ttruth\tprediction\tcorrect\n");
    for ((item, t), p) in items.iter().zip(truths).zip(preds) {
        s.push_str(&format!("{item}\t{t}\t{p}\t{}\n", u8::from(t == p)));
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JudgeScore {
    pub item_id: String,
    pub run: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JudgeConfig {
    pub client: LlmClientConfig,
    /// Independent judge runs per item.
    pub runs: usize,
    /// Maximum requests in flight.
    pub concurrency: usize,
    /// Expect `{"score": n}` instead of free text.
    pub json_mode: bool,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        Self {
            client: LlmClientConfig {
                api_key_env: "JUDGE_API_KEY".into(),
                temperature: 0.0,
                ..Default::default()
            },
            runs: 3,
            concurrency: 4,
            json_mode: false,
        }
    }
}

pub fn judge_prompt(description: &str) -> String {
    JUDGE_PROMPT_TEMPLATE.replace("[text]", description)
}

/// First number token of `text` (optionally signed, optionally decimal).
fn first_number(text: &str) -> Option<f64> {
    let b = text.as_bytes();
    let start = b.iter().position(|c| c.is_ascii_digit())?;
    let signed = start > 0 && b[start - 1] == b'-';
    let mut end = start;
    while end < b.len() && b[end].is_ascii_digit() {
        end += 1;
    }
    if end + 1 < b.len() && b[end] == b'.' && b[end + 1].is_ascii_digit() {
        end += 1;
        while end < b.len() && b[end].is_ascii_digit() {
            end += 1;
        }
    }
    let v: f64 = text[start..end].parse().ok()?;
    Some(if signed { -v } else { v })
}

/// Extracts a score in `[0, 100]` from a judge reply.
pub fn parse_judge_response(text: &str, json_mode: bool) -> Result<f64, LlmError> {
    let score = if json_mode {
        let v: serde_json::Value = serde_json::from_str(text.trim())
            .map_err(|e| LlmError::MalformedResponse(format!("judge reply is not JSON: {e}")))?;
        v.get("score")
            .and_then(serde_json::Value::as_f64)
            .ok_or_else(|| LlmError::MalformedResponse("judge reply has no numeric score".into()))?
    } else {
        first_number(text)
            .ok_or_else(|| LlmError::MalformedResponse(format!("no number in judge reply {text:?}")))?
    };
    if !(0.0..=100.0).contains(&score) {
        return Err(LlmError::MalformedResponse(format!("score {score} outside 0..=100")));
    }
    Ok(score)
}

fn request_with(client: &ChatClient, json_mode: bool, item_id: &str, run: usize, text: &str) -> Result<JudgeScore, EvalError> {
    let reply = client.chat("", &judge_prompt(text))?;
    Ok(JudgeScore {
        item_id: item_id.to_string(),
        run,
        score: parse_judge_response(&reply, json_mode)?,
    })
}

pub fn judge_request(item_id: &str, run: usize, description: &str, cfg: &JudgeConfig) -> Result<JudgeScore, EvalError> {
    let client = ChatClient::new(&cfg.client)?;
    request_with(&client, cfg.json_mode, item_id, run, description)
}

/// Scores every `(item, text)` `cfg.runs` times with at most
/// `cfg.concurrency` requests in flight. Results are ordered by item, then
/// run, regardless of completion order.
pub fn judge_batch(items: &[(String, String)], cfg: &JudgeConfig) -> Result<Vec<Result<JudgeScore, EvalError>>, EvalError> {
    let client = ChatClient::new(&cfg.client)?;
    let jobs: Vec<(usize, usize)> = (0..items.len()).flat_map(|i| (0..cfg.runs).map(move |r| (i, r))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.concurrency.max(1))
        .build()
        .map_err(|e| EvalError::Llm(LlmError::Config(e.to_string())))?;
    Ok(pool.install(|| {
        jobs.par_iter()
            .map(|&(i, r)| request_with(&client, cfg.json_mode, &items[i].0, r, &items[i].1))
            .collect()
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemAggregate {
    pub item_id: String,
    pub runs: usize,
    pub mean: f64,
    /// Population standard deviation across runs.
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreAggregate {
    /// Sorted by item id.
    pub items: Vec<ItemAggregate>,
    /// Unweighted mean of the per-item means.
    pub overall_mean: f64,
}

pub fn aggregate_scores(scores: &[JudgeScore]) -> Result<ScoreAggregate, EvalError> {
    if scores.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut by_item: BTreeMap<&str, Vec<(usize, f64)>> = BTreeMap::new();
    for s in scores {
        by_item.entry(&s.item_id).or_default().push((s.run, s.score));
    }
    let items: Vec<ItemAggregate> = by_item
        .into_iter()
        .map(|(id, mut runs)| {
            // fixed summation order makes the result independent of input order
            runs.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
            let n = runs.len() as f64;
            let mean = runs.iter().map(|r| r.1).sum::<f64>() / n;
            let var = runs.iter().map(|r| (r.1 - mean).powi(2)).sum::<f64>() / n;
            ItemAggregate { item_id: id.to_string(), runs: runs.len(), mean, std: var.sqrt() }
        })
        .collect();
    let overall_mean = items.iter().map(|i| i.mean).sum::<f64>() / items.len() as f64;
    Ok(ScoreAggregate { items, overall_mean })
}

pub fn scores_tsv(agg: &ScoreAggregate) -> String {
    let mut s = String::from("item\truns\tmean\tstd\n");
    for i in &agg.items {
        s.push_str(&format!("{}\t{}\t{}\t{}\n", i.item_id, i.runs, i.mean, i.std));
    }
    s
}
