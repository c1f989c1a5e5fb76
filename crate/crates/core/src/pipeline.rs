//! Batch run: volumes → masks → metrics → labels → QA corpus and reports.
//!
//! Configuration is TOML:
//!
//! ```toml
//! seed = 7
//! output_dir = "out"
//! qa_fraction = 1.0        # stratified share of pairs kept, (0, 1]
//! use_metrics = true       # false: answers carry no metric values
//! jobs = 4                 # worker threads, 0 = all cores
//! inputs = ["scan1.nii.gz"]
//!
//! [phantoms]               # synthetic volumes appended after `inputs`
//! count = 10
//! dims = [64, 64, 64]
//!
//! [thresholds]
//! snr_high = 15.0
//!
//! [[artifacts]]            # recipe 0: clean
//! steps = []
//! [[artifacts]]            # recipe 1
//! steps = [{ kind = "motion", severity = [0.5, 0.9] }]
//! ```
//!
//! Volume `i` gets recipe `i mod len(artifacts)`; an empty list leaves
//! every volume clean. Severities are drawn uniformly from each step's
//! range with an RNG keyed on `(seed, i)`, so results do not depend on the
//! number of workers.
//!
//! Masks come from the clean volume and are reused for the corrupted one.
//! Outputs in `output_dir`: `corpus.jsonl`, `review.tsv`, `metrics.tsv`,
//! `summary.json`, `errors.jsonl`, `report.html`, `thumbs/<id>.png`,
//! `volumes/<id>.nii.gz`, `provenance/<id>.json` and, with a judge
//! configured, `judge.tsv`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifact::{apply_artifacts, ArtifactKind, ArtifactParams, ArtifactSpec, ProvenanceRecord};
use crate::evaluation::{aggregate_scores, judge_batch, scores_tsv, JudgeConfig};
use crate::llm::LlmClientConfig;
use crate::metrics::{compute_metrics, MetricName, QualityMetrics};
use crate::qa::{
    corpus_id, export_jsonl_file, generate_qa, llm_paraphrase, review_tsv, sample_qa, LabelThresholds, QAPair,
    QaConfig, QualityLabel,
};
use crate::segmentation::{background_mask, foreground_mask};
use crate::volume::{generate_phantom, read_nifti, write_nifti, PhantomSpec, Volume};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("cannot write output {path}: {message}")]
    Output { path: PathBuf, message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomBatch {
    pub count: usize,
    pub dims: [usize; 3],
    pub tissue_intensity: f32,
    pub semi_axes: [f64; 3],
    pub noise_sigma: f32,
}

impl Default for PhantomBatch {
    fn default() -> Self {
        let p = PhantomSpec::default();
        Self {
            count: 0,
            dims: p.dims,
            tissue_intensity: p.tissue_intensity,
            semi_axes: p.semi_axes,
            noise_sigma: p.background_noise_sigma,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecipeStep {
    pub kind: ArtifactKind,
    /// Inclusive severity range `[lo, hi]`.
    pub severity: [f64; 2],
    #[serde(default)]
    pub params: ArtifactParams,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Recipe {
    #[serde(default)]
    pub steps: Vec<RecipeStep>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub inputs: Vec<PathBuf>,
    pub phantoms: PhantomBatch,
    pub artifacts: Vec<Recipe>,
    pub qa_fraction: f64,
    pub use_metrics: bool,
    pub thresholds: LabelThresholds,
    pub jobs: usize,
    pub llm: Option<LlmClientConfig>,
    pub judge: Option<JudgeConfig>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("mriqa-out"),
            inputs: Vec::new(),
            phantoms: PhantomBatch::default(),
            artifacts: Vec::new(),
            qa_fraction: 1.0,
            use_metrics: true,
            thresholds: LabelThresholds::default(),
            jobs: 0,
            llm: None,
            judge: None,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if !(self.qa_fraction > 0.0 && self.qa_fraction <= 1.0) {
            return bad(format!("qa_fraction must be in (0, 1], got {}", self.qa_fraction));
        }
        if self.inputs.is_empty() && self.phantoms.count == 0 {
            return bad("no volumes: set `inputs` or `phantoms.count`".into());
        }
        self.thresholds.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        for (r, recipe) in self.artifacts.iter().enumerate() {
            for step in &recipe.steps {
                let [lo, hi] = step.severity;
                if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
                    return bad(format!("recipe {r}: severity range {:?} not within [0, 1]", step.severity));
                }
            }
        }
        if self.phantoms.count > 0 {
            self.phantom_spec(0)
                .validate()
                .map_err(|e| PipelineError::Config(format!("phantoms: {e}")))?;
        }
        for c in self.llm.iter().chain(self.judge.as_ref().map(|j| &j.client)) {
            c.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        }
        Ok(())
    }

    fn phantom_spec(&self, seed: u64) -> PhantomSpec {
        PhantomSpec {
            dims: self.phantoms.dims,
            tissue_intensity: self.phantoms.tissue_intensity,
            semi_axes: self.phantoms.semi_axes,
            background_noise_sigma: self.phantoms.noise_sigma,
            seed,
            ..PhantomSpec::default()
        }
    }

    fn volume_count(&self) -> usize {
        self.inputs.len() + self.phantoms.count
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeStatus {
    Ok,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeReport {
    pub id: String,
    pub source: String,
    pub status: VolumeStatus,
    pub label: Option<QualityLabel>,
    pub artifacts: Vec<ArtifactKind>,
    pub max_severity: f64,
    pub pairs: usize,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: String,
    pub defined: usize,
    pub mean: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JudgeSummary {
    pub scored_items: usize,
    pub failed_requests: usize,
    pub overall_mean: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub volumes: Vec<VolumeReport>,
    pub succeeded: usize,
    pub failed: usize,
    pub pairs_generated: usize,
    pub corpus_lines: usize,
    pub label_counts: BTreeMap<String, usize>,
    pub metrics: Vec<MetricSummary>,
    pub paraphrase_accepted: Option<usize>,
    pub judge: Option<JudgeSummary>,
}

struct Processed {
    metrics: QualityMetrics,
    pairs: Vec<QAPair>,
    provenance: ProvenanceRecord,
}

fn volume_id(i: usize) -> String {
    format!("vol{i:03}")
}

fn source_of(cfg: &PipelineConfig, i: usize) -> String {
    match cfg.inputs.get(i) {
        Some(p) => p.display().to_string(),
        None => format!("phantom:{}", i - cfg.inputs.len()),
    }
}

fn output_err(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Output { path: path.to_path_buf(), message: e.to_string() }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), PipelineError> {
    fs::write(path, contents).map_err(|e| output_err(path, e))
}

/// Recipe steps realized for volume `i`, plus the phantom seed.
fn plan(cfg: &PipelineConfig, i: usize) -> (Vec<ArtifactSpec>, u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(i as u64);
    let phantom_seed = rng.random();
    let specs = match cfg.artifacts.len() {
        0 => Vec::new(),
        n => cfg.artifacts[i % n]
            .steps
            .iter()
            .map(|s| {
                let [lo, hi] = s.severity;
                let severity = if lo == hi { lo } else { lo + (hi - lo) * rng.random::<f64>() };
                ArtifactSpec::new(s.kind, severity, rng.random()).with_params(s.params.clone())
            })
            .collect(),
    };
    (specs, phantom_seed)
}

/// Middle axial slice, min-max scaled to 8 bits.
fn write_thumbnail(v: &Volume, path: &Path) -> Result<(), PipelineError> {
    let [nx, ny, nz] = v.dims();
    let slice = v.slice(nz / 2);
    let (lo, hi) = slice.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let pixels: Vec<u8> = slice.iter().map(|&x| ((x - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    let img = image::GrayImage::from_raw(nx as u32, ny as u32, pixels).expect("slice size matches image");
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| output_err(path, e))
}

fn process(cfg: &PipelineConfig, qa: &QaConfig, out: &Path, i: usize) -> Result<Processed, String> {
    let id = volume_id(i);
    let (specs, phantom_seed) = plan(cfg, i);
    let clean = match cfg.inputs.get(i) {
        Some(path) => read_nifti(path).map_err(|e| format!("read: {e}"))?,
        None => generate_phantom(&cfg.phantom_spec(phantom_seed)).map_err(|e| format!("phantom: {e}"))?.0,
    };
    let fg = foreground_mask(&clean).map_err(|e| format!("segmentation: {e}"))?;
    let bg = background_mask(&clean, &fg);
    for s in &specs {
        s.validate(clean.dims()).map_err(|e| format!("artifact: {e}"))?;
    }
    let (vol, provenance) = apply_artifacts(&clean, &specs).map_err(|e| format!("artifact: {e}"))?;
    let metrics = compute_metrics(&vol, &fg, &bg).map_err(|e| format!("metrics: {e}"))?;
    let prov = (!provenance.steps.is_empty()).then_some(&provenance);
    let pairs = generate_qa(&id, &metrics, prov, qa).map_err(|e| format!("qa: {e}"))?;

    let vol_path = out.join("volumes").join(format!("{id}.nii.gz"));
    write_nifti(&vol, &vol_path).map_err(|e| format!("write volume: {e}"))?;
    write_thumbnail(&vol, &out.join("thumbs").join(format!("{id}.png"))).map_err(|e| e.to_string())?;
    if prov.is_some() {
        let p = out.join("provenance").join(format!("{id}.json"));
        fs::write(&p, provenance.to_canonical_json() + "\n").map_err(|e| format!("write provenance: {e}"))?;
    }
    Ok(Processed { metrics, pairs, provenance })
}

fn metric_summaries(all: &[&QualityMetrics]) -> Vec<MetricSummary> {
    MetricName::ALL
        .iter()
        .map(|&name| {
            let vals: Vec<f64> = all.iter().filter_map(|m| m.get(name)).collect();
            let n = vals.len();
            MetricSummary {
                metric: name.column().to_string(),
                defined: n,
                mean: (n > 0).then(|| vals.iter().sum::<f64>() / n as f64),
                min: vals.iter().copied().reduce(f64::min),
                max: vals.iter().copied().reduce(f64::max),
            }
        })
        .collect()
}

fn html_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn render_html(report: &RunReport, metrics: &BTreeMap<String, QualityMetrics>) -> String {
    let mut h = String::from(
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>MRI quality report</title>\n\
         <style>body{font-family:sans-serif}table{border-collapse:collapse}\
         td,th{border:1px solid #999;padding:2px 6px;font-size:12px}img{width:96px;image-rendering:pixelated}</style>\n\
         </head><body>\n<h1>MRI quality report</h1>\n",
    );
    let _ = writeln!(
        h,
        "<p>{} volumes processed, {} failed, {} corpus lines.</p>",
        report.succeeded, report.failed, report.corpus_lines
    );
    h.push_str("<table>\n<tr><th>id</th><th>slice</th><th>label</th><th>artifacts</th>");
    for m in MetricName::ALL {
        let _ = write!(h, "<th>{}</th>", m.column());
    }
    h.push_str("</tr>\n");
    for v in &report.volumes {
        let _ = write!(h, "<tr><td>{}</td>", html_escape(&v.id));
        match v.status {
            VolumeStatus::Ok => {
                let _ = write!(
                    h,
                    "<td><img src=\"thumbs/{id}.png\" alt=\"{id}\"></td><td>{}</td><td>{}</td>",
                    v.label.map_or("", QualityLabel::as_str),
                    v.artifacts.iter().map(|k| k.as_str()).collect::<Vec<_>>().join(", "),
                    id = html_escape(&v.id)
                );
                let m = &metrics[&v.id];
                for name in MetricName::ALL {
                    let cell = m.get(name).map_or_else(|| "NA".to_string(), |x| format!("{x:.4}"));
                    let _ = write!(h, "<td>{cell}</td>");
                }
            }
            VolumeStatus::Failed => {
                let _ = write!(
                    h,
                    "<td></td><td colspan=\"{}\">failed: {}</td>",
                    MetricName::ALL.len() + 2,
                    html_escape(v.error.as_deref().unwrap_or(""))
                );
            }
        }
        h.push_str("</tr>\n");
    }
    h.push_str("</table>\n</body></html>\n");
    h
}

pub fn run(cfg: &PipelineConfig) -> Result<RunReport, PipelineError> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    for sub in ["", "volumes", "thumbs", "provenance"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(|e| output_err(&d, e))?;
    }
    let qa = QaConfig { thresholds: cfg.thresholds, use_metrics: cfg.use_metrics };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| PipelineError::Config(format!("worker pool: {e}")))?;
    let n = cfg.volume_count();
    let results: Vec<Result<Processed, String>> =
        pool.install(|| (0..n).into_par_iter().map(|i| process(cfg, &qa, out, i)).collect());

    let mut volumes = Vec::with_capacity(n);
    let mut errors = String::new();
    let mut all_pairs = Vec::new();
    let mut metrics_by_id = BTreeMap::new();
    let mut metrics_tsv = format!("volume_id\tsource\tlabel\tartifacts\tmax_severity\t{}\n", QualityMetrics::tsv_header());
    let mut images = BTreeMap::new();
    let mut label_counts = BTreeMap::new();
    for (i, r) in results.into_iter().enumerate() {
        let id = volume_id(i);
        let source = source_of(cfg, i);
        match r {
            Ok(p) => {
                let label = p.pairs.first().map(|q| q.label);
                let kinds = p.provenance.kinds();
                let kinds_str = if kinds.is_empty() {
                    "none".to_string()
                } else {
                    kinds.iter().map(|k| k.as_str()).collect::<Vec<_>>().join(",")
                };
                let _ = writeln!(
                    metrics_tsv,
                    "{id}\t{source}\t{}\t{kinds_str}\t{}\t{}",
                    label.map_or("NA", QualityLabel::as_str),
                    p.provenance.max_severity(),
                    p.metrics.tsv_row()
                );
                if let Some(l) = label {
                    *label_counts.entry(l.to_string()).or_insert(0) += 1;
                }
                images.insert(id.clone(), format!("volumes/{id}.nii.gz"));
                volumes.push(VolumeReport {
                    id: id.clone(),
                    source,
                    status: VolumeStatus::Ok,
                    label,
                    artifacts: kinds,
                    max_severity: p.provenance.max_severity(),
                    pairs: p.pairs.len(),
                    error: None,
                });
                metrics_by_id.insert(id, p.metrics);
                all_pairs.extend(p.pairs);
            }
            Err(e) => {
                log::warn!("{id} ({source}) failed: {e}");
                let line = serde_json::json!({"error": e, "source": source, "volume_id": id});
                errors.push_str(&(line.to_string() + "\n"));
                volumes.push(VolumeReport {
                    id,
                    source,
                    status: VolumeStatus::Failed,
                    label: None,
                    artifacts: Vec::new(),
                    max_severity: 0.0,
                    pairs: 0,
                    error: Some(e),
                });
            }
        }
    }

    let pairs_generated = all_pairs.len();
    let mut sampled = sample_qa(&all_pairs, cfg.qa_fraction, cfg.seed).map_err(|e| PipelineError::Config(e.to_string()))?;
    let mut paraphrase_accepted = None;
    if let Some(llm) = &cfg.llm {
        let mut by_volume: BTreeMap<String, Vec<QAPair>> = BTreeMap::new();
        for p in sampled.drain(..) {
            by_volume.entry(p.volume_id.clone()).or_default().push(p);
        }
        let groups: Vec<Vec<QAPair>> = by_volume.into_values().collect();
        let rewritten: Vec<_> = pool.install(|| groups.par_iter().map(|g| llm_paraphrase(g, llm)).collect());
        let mut accepted = 0;
        for (pairs, report) in rewritten {
            accepted += report.accepted();
            sampled.extend(pairs);
        }
        paraphrase_accepted = Some(accepted);
    }

    let corpus_path = out.join("corpus.jsonl");
    let corpus_lines = export_jsonl_file(&sampled, &images, &corpus_path).map_err(|e| output_err(&corpus_path, e))?;
    write_file(&out.join("review.tsv"), review_tsv(&sampled))?;
    write_file(&out.join("metrics.tsv"), metrics_tsv)?;
    write_file(&out.join("errors.jsonl"), errors)?;

    let judge = match &cfg.judge {
        Some(jc) => {
            let items: Vec<(String, String)> = sampled.iter().map(|p| (corpus_id(p), p.answer.clone())).collect();
            let results = judge_batch(&items, jc).map_err(|e| PipelineError::Config(e.to_string()))?;
            let failed_requests = results.iter().filter(|r| r.is_err()).count();
            let scores: Vec<_> = results.into_iter().filter_map(Result::ok).collect();
            let agg = aggregate_scores(&scores).ok();
            write_file(&out.join("judge.tsv"), agg.as_ref().map(scores_tsv).unwrap_or_default())?;
            Some(JudgeSummary {
                scored_items: agg.as_ref().map_or(0, |a| a.items.len()),
                failed_requests,
                overall_mean: agg.map(|a| a.overall_mean),
            })
        }
        None => None,
    };

    let succeeded = volumes.iter().filter(|v| v.status == VolumeStatus::Ok).count();
    let report = RunReport {
        failed: volumes.len() - succeeded,
        succeeded,
        pairs_generated,
        corpus_lines,
        label_counts,
        metrics: metric_summaries(&metrics_by_id.values().collect::<Vec<_>>()),
        paraphrase_accepted,
        judge,
        volumes,
    };
    let summary = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    write_file(&out.join("summary.json"), summary)?;
    write_file(&out.join("report.html"), render_html(&report, &metrics_by_id))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_documented_example() {
        let cfg = PipelineConfig::from_toml(
            r#"
            seed = 7
            output_dir = "out"
            qa_fraction = 1.0
            use_metrics = true
            jobs = 4
            inputs = ["scan1.nii.gz"]
            [phantoms]
            count = 10
            dims = [64, 64, 64]
            [thresholds]
            snr_high = 15.0
            [[artifacts]]
            steps = []
            [[artifacts]]
            steps = [{ kind = "motion", severity = [0.5, 0.9] }]
            "#,
        )
        .unwrap();
        assert_eq!(cfg.volume_count(), 11);
        assert_eq!(cfg.artifacts[1].steps[0].kind, ArtifactKind::Motion);
        cfg.validate().unwrap();
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(PipelineConfig::from_toml("bogus = 1").is_err());
        let none = PipelineConfig::default();
        assert!(matches!(none.validate(), Err(PipelineError::Config(_))));
        let mut cfg = PipelineConfig { phantoms: PhantomBatch { count: 1, ..Default::default() }, ..Default::default() };
        cfg.qa_fraction = 0.0;
        assert!(cfg.validate().is_err());
        cfg.qa_fraction = 1.0;
        cfg.artifacts = vec![Recipe {
            steps: vec![RecipeStep { kind: ArtifactKind::Noise, severity: [0.8, 0.2], params: Default::default() }],
        }];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn plan_is_keyed_on_index() {
        let cfg = PipelineConfig {
            seed: 3,
            artifacts: vec![
                Recipe::default(),
                Recipe {
                    steps: vec![RecipeStep { kind: ArtifactKind::Noise, severity: [0.2, 0.4], params: Default::default() }],
                },
            ],
            ..Default::default()
        };
        assert!(plan(&cfg, 0).0.is_empty());
        let (specs, _) = plan(&cfg, 1);
        assert_eq!(specs.len(), 1);
        assert!((0.2..=0.4).contains(&specs[0].severity));
        assert_eq!(plan(&cfg, 1), plan(&cfg, 1));
        assert_ne!(plan(&cfg, 1).1, plan(&cfg, 3).1);
    }

    #[test]
    fn html_escapes() {
        assert_eq!(html_escape("<a&\"b\">"), "&lt;a&amp;&quot;b&quot;&gt;");
    }
}
