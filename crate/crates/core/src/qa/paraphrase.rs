//! Optional rewriting of template pairs by an external chat model.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{kinds_named, label_token_counts, QAPair};
use crate::llm::{numeric_literals, ChatClient, LlmClientConfig, LlmError};

pub const PARAPHRASE_SYSTEM_PROMPT: &str = "You rewrite question-answer pairs about MRI image quality so they read \
naturally. Reply with a JSON object {\"question\": ..., \"answer\": ...} and nothing else. Keep the meaning. Do not \
change, add or remove the quality level word (Good, Medium or Bad), any artifact name, or any number; copy every \
number exactly as written.";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "reason", rename_all = "snake_case")]
pub enum ParaphraseOutcome {
    Accepted,
    /// The rewrite broke a preservation rule; the original was kept.
    Rejected(String),
    MalformedResponse(String),
    NetworkError(String),
    /// Not attempted because an earlier request failed at the network level.
    Skipped,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParaphraseReport {
    pub outcomes: Vec<ParaphraseOutcome>,
}

impl ParaphraseReport {
    pub fn accepted(&self) -> usize {
        self.outcomes.iter().filter(|o| **o == ParaphraseOutcome::Accepted).count()
    }

    pub fn fell_back(&self) -> usize {
        self.outcomes.len() - self.accepted()
    }
}

#[derive(Deserialize)]
struct Rewrite {
    question: String,
    answer: String,
}

fn parse_rewrite(content: &str) -> Result<Rewrite, String> {
    let trimmed = content.trim();
    let body = trimmed
        .strip_prefix("```json")
        .or_else(|| trimmed.strip_prefix("```"))
        .and_then(|s| s.strip_suffix("```"))
        .unwrap_or(trimmed);
    let v: Value = serde_json::from_str(body.trim()).map_err(|e| format!("reply is not JSON: {e}"))?;
    serde_json::from_value(v).map_err(|e| format!("reply lacks question/answer strings: {e}"))
}

fn sorted_numbers(s: &str) -> Vec<&str> {
    let mut v = numeric_literals(s);
    v.sort_unstable();
    v
}

/// Checks the preservation rules for one rewrite.
fn check(original: &QAPair, rw: &Rewrite) -> Result<(), String> {
    if rw.question.trim().is_empty() || rw.answer.trim().is_empty() {
        return Err("empty text".into());
    }
    let before = format!("{}\n{}", original.question, original.answer);
    let after = format!("{}\n{}", rw.question, rw.answer);
    if label_token_counts(&before) != label_token_counts(&after) {
        return Err("quality label changed".into());
    }
    if sorted_numbers(&before) != sorted_numbers(&after) {
        return Err("numeric values changed".into());
    }
    if kinds_named(&before) != kinds_named(&after) {
        return Err("artifact kinds changed".into());
    }
    Ok(())
}

/// Rewrites each pair through the chat endpoint. Any pair whose rewrite
/// fails validation or transport keeps its original text. After the first
/// network failure the remaining pairs are left untouched.
pub fn llm_paraphrase(pairs: &[QAPair], cfg: &LlmClientConfig) -> (Vec<QAPair>, ParaphraseReport) {
    let mut report = ParaphraseReport::default();
    let client = match ChatClient::new(cfg) {
        Ok(c) => c,
        Err(e) => {
            log::warn!("paraphrase disabled: {e}");
            report.outcomes = vec![ParaphraseOutcome::NetworkError(e.to_string()); pairs.len()];
            return (pairs.to_vec(), report);
        }
    };
    let mut out = Vec::with_capacity(pairs.len());
    let mut offline = false;
    for pair in pairs {
        if offline {
            report.outcomes.push(ParaphraseOutcome::Skipped);
            out.push(pair.clone());
            continue;
        }
        let user = serde_json::json!({"question": pair.question, "answer": pair.answer}).to_string();
        let outcome = match client.chat(PARAPHRASE_SYSTEM_PROMPT, &user) {
            Ok(content) => match parse_rewrite(&content) {
                Ok(rw) => match check(pair, &rw) {
                    Ok(()) => {
                        out.push(QAPair {
                            question: rw.question,
                            answer: rw.answer,
                            ..pair.clone()
                        });
                        report.outcomes.push(ParaphraseOutcome::Accepted);
                        continue;
                    }
                    Err(reason) => ParaphraseOutcome::Rejected(reason),
                },
                Err(reason) => ParaphraseOutcome::MalformedResponse(reason),
            },
            Err(LlmError::MalformedResponse(m)) => ParaphraseOutcome::MalformedResponse(m),
            Err(e) => {
                log::warn!("paraphrase endpoint unavailable, keeping template texts: {e}");
                offline = true;
                ParaphraseOutcome::NetworkError(e.to_string())
            }
        };
        log::info!("paraphrase of {}/{} fell back: {outcome:?}", pair.volume_id, pair.task);
        report.outcomes.push(outcome);
        out.push(pair.clone());
    }
    (out, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::QualityMetrics;
    use crate::qa::{QaTask, QualityLabel};

    fn pair() -> QAPair {
        QAPair {
            task: QaTask::Classification,
            question: "What is the quality?".into(),
            answer: "Quality level: Good. SNR1 is 20.03 and EFC is 0.431.".into(),
            volume_id: "v".into(),
            label: QualityLabel::Good,
            metrics_snapshot: QualityMetrics::default(),
            provenance: None,
        }
    }

    fn rw(q: &str, a: &str) -> Rewrite {
        Rewrite { question: q.into(), answer: a.into() }
    }

    #[test]
    fn accepts_faithful_rewrite() {
        let r = rw("How clean is it?", "This Good scan has EFC 0.431 and SNR1 20.03.");
        assert_eq!(check(&pair(), &r), Ok(()));
    }

    #[test]
    fn rejects_violations() {
        let p = pair();
        assert!(check(&p, &rw("q", "Quality: Bad. SNR1 20.03, EFC 0.431.")).unwrap_err().contains("label"));
        assert!(check(&p, &rw("q", "Good. SNR1 20.0, EFC 0.431.")).unwrap_err().contains("numeric"));
        assert!(check(&p, &rw("q", "  ")).unwrap_err().contains("empty"));
        assert!(check(&p, &rw("q", "Good. SNR1 20.03, EFC 0.431. Motion artifact.")).unwrap_err().contains("kinds"));
    }

    #[test]
    fn parses_fenced_json() {
        let r = parse_rewrite("```json\n{\"question\":\"a\",\"answer\":\"b\"}\n```").unwrap();
        assert_eq!((r.question.as_str(), r.answer.as_str()), ("a", "b"));
        assert!(parse_rewrite("sure, here it is").is_err());
        assert!(parse_rewrite("{\"question\":1}").is_err());
    }

    #[test]
    fn unreachable_client_returns_originals() {
        let cfg = LlmClientConfig {
            endpoint: "http://127.0.0.1:9/".into(),
            max_retries: 0,
            timeout_secs: 2.0,
            ..Default::default()
        };
        let input = vec![pair(), pair()];
        let (out, report) = llm_paraphrase(&input, &cfg);
        assert_eq!(out, input);
        assert!(matches!(report.outcomes[0], ParaphraseOutcome::NetworkError(_)));
        assert_eq!(report.outcomes[1], ParaphraseOutcome::Skipped);
        assert_eq!(report.fell_back(), 2);
    }
}
