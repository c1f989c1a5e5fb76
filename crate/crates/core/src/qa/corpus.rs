//! Sampling and serialization of QA corpora.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{QAPair, QaError, QaTask};

/// Stratified subsample: from each task's `n_t` pairs, `round(fraction · n_t)`
/// are kept (half away from zero), chosen by a seeded shuffle. The result
/// keeps the input order.
pub fn sample_qa(pairs: &[QAPair], fraction: f64, seed: u64) -> Result<Vec<QAPair>, QaError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(QaError::InvalidFraction(fraction));
    }
    let mut keep = vec![false; pairs.len()];
    for (stream, task) in QaTask::ALL.into_iter().enumerate() {
        let mut idx: Vec<usize> = (0..pairs.len()).filter(|&i| pairs[i].task == task).collect();
        let k = ((fraction * idx.len() as f64).round() as usize).min(idx.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream as u64);
        idx.shuffle(&mut rng);
        for &i in &idx[..k] {
            keep[i] = true;
        }
    }
    Ok(pairs.iter().zip(keep).filter(|(_, k)| *k).map(|(p, _)| p.clone()).collect())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub from: String,
    pub value: String,
}

/// One corpus line. Fields are declared in sorted order so the serialized
/// keys come out sorted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRecord {
    pub conversations: Vec<Turn>,
    pub id: String,
    pub image: String,
}

pub fn corpus_id(pair: &QAPair) -> String {
    format!("{}-{}", pair.volume_id, pair.task)
}

fn record(pair: &QAPair, images: &BTreeMap<String, String>) -> Result<CorpusRecord, QaError> {
    let image = images
        .get(&pair.volume_id)
        .ok_or_else(|| QaError::MissingImage(pair.volume_id.clone()))?;
    Ok(CorpusRecord {
        conversations: vec![
            Turn { from: "human".into(), value: pair.question.clone() },
            Turn { from: "assistant".into(), value: pair.answer.clone() },
        ],
        id: corpus_id(pair),
        image: image.clone(),
    })
}

/// Writes one JSON object per line and returns the line count. Every
/// pair's volume must have an entry in `images`; nothing is written
/// otherwise.
pub fn export_jsonl<W: Write>(
    pairs: &[QAPair],
    images: &BTreeMap<String, String>,
    mut out: W,
) -> Result<usize, QaError> {
    let records = pairs.iter().map(|p| record(p, images)).collect::<Result<Vec<_>, _>>()?;
    for r in &records {
        let line = serde_json::to_string(r).expect("corpus records serialize");
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(records.len())
}

pub fn export_jsonl_file(
    pairs: &[QAPair],
    images: &BTreeMap<String, String>,
    path: &Path,
) -> Result<usize, QaError> {
    // validate first so a failed export leaves no partial file behind
    for p in pairs {
        record(p, images)?;
    }
    export_jsonl(pairs, images, BufWriter::new(File::create(path)?))
}

pub fn read_jsonl<R: std::io::Read>(input: R) -> Result<Vec<CorpusRecord>, QaError> {
    BufReader::new(input)
        .lines()
        .enumerate()
        .filter(|(_, l)| !matches!(l, Ok(s) if s.trim().is_empty()))
        .map(|(i, line)| {
            let line = line?;
            serde_json::from_str(&line).map_err(|e| QaError::Corpus { line: i + 1, message: e.to_string() })
        })
        .collect()
}

fn tsv_field(s: &str) -> String {
    s.replace(['\t', '\n', '\r'], " ")
}

/// Review sheet with columns `volume_id, task, question, answer, label`.
pub fn review_tsv(pairs: &[QAPair]) -> String {
    let mut s = String::from("volume_id\ttask\tquestion\tanswer\tlabel\n");
    for p in pairs {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            tsv_field(&p.volume_id),
            p.task,
            tsv_field(&p.question),
            tsv_field(&p.answer),
            p.label
        ));
    }
    s
}
