//! `mriqa` command-line interface.
//!
//! Exit codes: 0 success, 1 operational error, 2 usage error.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mriqa_core::artifact::{apply_artifact, ArtifactKind, ArtifactParams, ArtifactSpec, ProvenanceRecord};
use mriqa_core::evaluation::{
    aggregate_scores, confusion, judge_batch, predictions_tsv, scores_tsv, summarize, JudgeConfig,
};
use mriqa_core::lora::{self, FdScheme, LoraAdapter};
use mriqa_core::metrics::{compute_metrics, QualityMetrics};
use mriqa_core::pipeline::{self, PipelineConfig};
use mriqa_core::qa::{
    export_jsonl_file, generate_qa, read_jsonl, review_tsv, sample_qa, LabelThresholds, QAPair, QaConfig, QualityLabel,
};
use mriqa_core::segmentation::{background_mask, foreground_mask, Mask};
use mriqa_core::volume::{generate_phantom, read_nifti, write_nifti, write_nifti_with, Datatype, PhantomSpec, Volume, WriteOptions};

#[derive(Parser)]
#[command(name = "mriqa", version, about = "MRI quality metrics, artifact simulation and QA corpus tools")]
#[command(arg_required_else_help = true)]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic ellipsoid phantom.
    Phantom(PhantomArgs),
    /// Write foreground and background masks.
    Segment(SegmentArgs),
    /// Print the 15 quality metrics as a TSV header and row.
    Metrics(MetricsArgs),
    /// Apply a seeded acquisition artifact.
    Corrupt(CorruptArgs),
    /// Generate Classification/Artifact/Analysis pairs for one volume.
    Qa(QaArgs),
    /// Stratified subsample of a pairs file.
    Sample(SampleArgs),
    /// Export pairs as a conversation corpus.
    Export(ExportArgs),
    /// Accuracy and macro-F1 of three-tier predictions.
    Eval(EvalArgs),
    /// Score descriptions with an LLM judge.
    Judge(JudgeArgs),
    /// Check low-rank adapter arithmetic and gradients.
    LoraCheck(LoraArgs),
    /// Run the batch pipeline from a TOML config.
    Run(RunArgs),
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = parse_triple::<usize>, default_value = "64,64,64")]
    dims: [usize; 3],
    #[arg(long, default_value_t = 100.0)]
    intensity: f32,
    /// Background noise standard deviation.
    #[arg(long, default_value_t = 5.0)]
    sigma: f32,
    /// Semi-axes in voxels.
    #[arg(long, value_parser = parse_triple::<f64>, default_value = "20,24,18")]
    semi_axes: [f64; 3],
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Foreground mask output.
    #[arg(long)]
    out: PathBuf,
    /// Background mask output.
    #[arg(long)]
    background: Option<PathBuf>,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Foreground mask (nonzero voxels); segmented automatically if absent.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Background mask; defaults to the complement of the dilated foreground.
    #[arg(long)]
    background: Option<PathBuf>,
    /// Take masks from this volume instead of the input.
    #[arg(long, conflicts_with = "mask")]
    clean: Option<PathBuf>,
}

#[derive(Args)]
struct CorruptArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// motion, ghosting, aliasing, noise or bias_field.
    #[arg(long)]
    kind: ArtifactKind,
    #[arg(long)]
    severity: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the provenance record here.
    #[arg(long)]
    provenance: Option<PathBuf>,
    #[arg(long)]
    period: Option<usize>,
    #[arg(long)]
    undersampling: Option<usize>,
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    order: Option<usize>,
    #[arg(long)]
    sigma_ref: Option<f64>,
}

#[derive(Args)]
struct LabelArgs {
    #[arg(long)]
    snr_high: Option<f64>,
    #[arg(long)]
    snr_low: Option<f64>,
    #[arg(long)]
    efc_low: Option<f64>,
    #[arg(long)]
    efc_high: Option<f64>,
}

impl LabelArgs {
    fn thresholds(&self) -> LabelThresholds {
        let d = LabelThresholds::default();
        LabelThresholds {
            snr_high: self.snr_high.unwrap_or(d.snr_high),
            snr_low: self.snr_low.unwrap_or(d.snr_low),
            efc_low: self.efc_low.unwrap_or(d.efc_low),
            efc_high: self.efc_high.unwrap_or(d.efc_high),
        }
    }
}

#[derive(Args)]
struct QaArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Provenance record written by `corrupt`.
    #[arg(long)]
    provenance: Option<PathBuf>,
    /// Take masks from this volume instead of the input.
    #[arg(long)]
    clean: Option<PathBuf>,
    #[arg(long, default_value = "vol000")]
    id: String,
    /// Leave metric values out of the answers.
    #[arg(long)]
    no_metrics: bool,
    #[command(flatten)]
    labels: LabelArgs,
    /// Pairs output (JSON lines); stdout if absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    /// Pairs file (JSON lines) from `qa` or `sample`.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Image path for a volume, as ID=PATH. Repeatable.
    #[arg(long = "image", value_parser = parse_key_val)]
    images: Vec<(String, String)>,
    /// Image path pattern for volumes without --image; `{id}` is replaced.
    #[arg(long)]
    image_template: Option<String>,
    /// Also write a review TSV.
    #[arg(long)]
    review: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// TSV with header `item<TAB>truth<TAB>prediction`.
    #[arg(long = "in")]
    input: PathBuf,
    /// JSON summary output; stdout if absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-item TSV output.
    #[arg(long)]
    tsv: Option<PathBuf>,
}

#[derive(Args)]
struct JudgeArgs {
    /// Corpus (.jsonl, assistant turns are judged) or TSV `item<TAB>text`.
    #[arg(long = "in")]
    input: PathBuf,
    /// TOML file with a JudgeConfig; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    concurrency: Option<usize>,
    #[arg(long)]
    json_mode: bool,
    /// Per-item TSV output; stdout if absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LoraArgs {
    #[arg(long, default_value_t = 16)]
    d_in: usize,
    #[arg(long, default_value_t = 12)]
    d_out: usize,
    #[arg(long, default_value_t = 4)]
    rank: usize,
    #[arg(long, default_value_t = 8.0)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also report finite-difference error at steps 1e-3, 1e-4, 1e-5.
    #[arg(long)]
    sweep: bool,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `jobs`.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `qa_fraction`.
    #[arg(long)]
    fraction: Option<f64>,
    /// Metric-free answers.
    #[arg(long)]
    no_metrics: bool,
}

/// Three comma-separated values, e.g. `64,64,32`.
fn parse_triple<T: std::str::FromStr>(s: &str) -> Result<[T; 3], String> {
    let parts: Vec<T> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("invalid value {p:?} in {s:?}")))
        .collect::<Result<_, _>>()?;
    <[T; 3]>::try_from(parts).map_err(|v| format!("expected 3 comma-separated values, got {}", v.len()))
}

fn parse_key_val(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .ok_or_else(|| format!("expected ID=PATH, got {s:?}"))
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(io::BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn load(path: &Path) -> Result<Volume> {
    read_nifti(path).with_context(|| format!("reading {}", path.display()))
}

fn load_mask(path: &Path, dims: [usize; 3]) -> Result<Mask> {
    let v = load(path)?;
    if v.dims() != dims {
        bail!("mask {} has dims {:?}, volume has {:?}", path.display(), v.dims(), dims);
    }
    Ok(Mask::new(dims, v.data().iter().map(|&x| x != 0.0).collect()))
}

fn write_mask(m: &Mask, like: &Volume, path: &Path) -> Result<()> {
    let v = like.with_data(m.as_slice().iter().map(|&b| f32::from(u8::from(b))).collect())?;
    let opts = WriteOptions { datatype: Datatype::U8, ..Default::default() };
    write_nifti_with(&v, path, opts).with_context(|| format!("writing {}", path.display()))
}

fn masks_for(v: &Volume, clean: Option<&Path>) -> Result<(Mask, Mask)> {
    let reference = match clean {
        Some(p) => {
            let c = load(p)?;
            if c.dims() != v.dims() {
                bail!("clean volume dims {:?} differ from input {:?}", c.dims(), v.dims());
            }
            c
        }
        None => v.clone(),
    };
    let fg = foreground_mask(&reference)?;
    let bg = background_mask(&reference, &fg);
    Ok((fg, bg))
}

fn report_undefined(m: &QualityMetrics) {
    for u in &m.undefined {
        eprintln!("{}: undefined ({})", u.metric.column(), u.cause);
    }
}

fn read_pairs(path: &Path) -> Result<Vec<QAPair>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    BufReader::new(f)
        .lines()
        .enumerate()
        .filter(|(_, l)| !matches!(l, Ok(s) if s.trim().is_empty()))
        .map(|(i, l)| serde_json::from_str(&l?).with_context(|| format!("{} line {}", path.display(), i + 1)))
        .collect()
}

fn write_pairs(pairs: &[QAPair], path: Option<&Path>) -> Result<()> {
    let mut w = output(path)?;
    for p in pairs {
        writeln!(w, "{}", serde_json::to_string(p)?)?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_phantom(a: PhantomArgs) -> Result<()> {
    let spec = PhantomSpec {
        dims: a.dims,
        tissue_intensity: a.intensity,
        semi_axes: a.semi_axes,
        background_noise_sigma: a.sigma,
        seed: a.seed,
        ..Default::default()
    };
    let (v, gt) = generate_phantom(&spec)?;
    write_nifti(&v, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    log::info!("phantom: {} foreground voxels, mean {}", gt.foreground.count(), gt.mu_f);
    Ok(())
}

fn cmd_segment(a: SegmentArgs) -> Result<()> {
    let v = load(&a.input)?;
    let fg = foreground_mask(&v)?;
    write_mask(&fg, &v, &a.out)?;
    let bg = background_mask(&v, &fg);
    if let Some(p) = &a.background {
        write_mask(&bg, &v, p)?;
    }
    println!("foreground\t{}\nbackground\t{}", fg.count(), bg.count());
    Ok(())
}

fn cmd_metrics(a: MetricsArgs) -> Result<()> {
    let v = load(&a.input)?;
    let (fg, auto_bg) = match &a.mask {
        Some(p) => {
            let fg = load_mask(p, v.dims())?;
            let bg = fg.dilate().complement();
            (fg, bg)
        }
        None => masks_for(&v, a.clean.as_deref())?,
    };
    let bg = match &a.background {
        Some(p) => load_mask(p, v.dims())?,
        None => auto_bg,
    };
    let m = compute_metrics(&v, &fg, &bg)?;
    report_undefined(&m);
    println!("{}\n{}", QualityMetrics::tsv_header(), m.tsv_row());
    Ok(())
}

fn cmd_corrupt(a: CorruptArgs) -> Result<()> {
    let v = load(&a.input)?;
    let params = ArtifactParams {
        period: a.period,
        undersampling: a.undersampling,
        shots: a.shots,
        order: a.order,
        sigma_ref: a.sigma_ref,
    };
    let spec = ArtifactSpec::new(a.kind, a.severity, a.seed).with_params(params);
    spec.validate(v.dims())?;
    let (out, prov) = apply_artifact(&v, &spec)?;
    write_nifti(&out, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(p) = &a.provenance {
        fs::write(p, prov.to_canonical_json() + "\n").with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn cmd_qa(a: QaArgs) -> Result<()> {
    let v = load(&a.input)?;
    let (fg, bg) = masks_for(&v, a.clean.as_deref())?;
    let m = compute_metrics(&v, &fg, &bg)?;
    let prov = match &a.provenance {
        Some(p) => Some(
            ProvenanceRecord::from_json(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
                .with_context(|| format!("parsing {}", p.display()))?,
        ),
        None => None,
    };
    let cfg = QaConfig { thresholds: a.labels.thresholds(), use_metrics: !a.no_metrics };
    let pairs = generate_qa(&a.id, &m, prov.as_ref(), &cfg)?;
    write_pairs(&pairs, a.out.as_deref())
}

fn cmd_sample(a: SampleArgs) -> Result<()> {
    let pairs = read_pairs(&a.input)?;
    let kept = sample_qa(&pairs, a.fraction, a.seed)?;
    log::info!("kept {} of {} pairs", kept.len(), pairs.len());
    write_pairs(&kept, a.out.as_deref())
}

fn cmd_export(a: ExportArgs) -> Result<()> {
    let pairs = read_pairs(&a.input)?;
    let mut images: BTreeMap<String, String> = a.images.into_iter().collect();
    if let Some(t) = &a.image_template {
        for p in &pairs {
            images.entry(p.volume_id.clone()).or_insert_with(|| t.replace("{id}", &p.volume_id));
        }
    }
    let n = export_jsonl_file(&pairs, &images, &a.out)?;
    if let Some(r) = &a.review {
        fs::write(r, review_tsv(&pairs)).with_context(|| format!("writing {}", r.display()))?;
    }
    log::info!("wrote {n} corpus lines");
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let text = fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().context("empty predictions file")?;
    if header.split('\t').collect::<Vec<_>>() != ["item", "truth", "prediction"] {
        bail!("expected header item<TAB>truth<TAB>prediction, got {header:?}");
    }
    let (mut items, mut truths, mut preds) = (Vec::new(), Vec::new(), Vec::new());
    for (i, line) in lines.enumerate() {
        let cols: Vec<&str> = line.split('\t').collect();
        let [item, t, p] = cols[..] else {
            bail!("line {}: expected 3 columns", i + 2);
        };
        items.push(item.to_string());
        truths.push(t.parse::<QualityLabel>().with_context(|| format!("line {}", i + 2))?);
        preds.push(p.parse::<QualityLabel>().with_context(|| format!("line {}", i + 2))?);
    }
    let cm = confusion(&preds, &truths)?;
    let mut w = output(a.out.as_deref())?;
    writeln!(w, "{}", serde_json::to_string_pretty(&summarize(&cm))?)?;
    w.flush()?;
    if let Some(p) = &a.tsv {
        fs::write(p, predictions_tsv(&items, &truths, &preds))?;
    }
    Ok(())
}

fn read_descriptions(path: &Path) -> Result<Vec<(String, String)>> {
    let is_jsonl = path.extension().is_some_and(|e| e == "jsonl");
    if is_jsonl {
        let records = read_jsonl(File::open(path)?)?;
        return Ok(records
            .into_iter()
            .filter_map(|r| {
                let answer = r.conversations.into_iter().find(|t| t.from == "assistant")?;
                Some((r.id, answer.value))
            })
            .collect());
    }
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.split_once('\t')
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .with_context(|| format!("line {}: expected item<TAB>text", i + 1))
        })
        .collect()
}

fn cmd_judge(a: JudgeArgs) -> Result<()> {
    let mut cfg: JudgeConfig = match &a.config {
        Some(p) => toml::from_str(&fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => JudgeConfig::default(),
    };
    if let Some(e) = a.endpoint {
        cfg.client.endpoint = e;
    }
    if let Some(m) = a.model {
        cfg.client.model = m;
    }
    if let Some(r) = a.runs {
        cfg.runs = r;
    }
    if let Some(c) = a.concurrency {
        cfg.concurrency = c;
    }
    cfg.json_mode |= a.json_mode;
    let items = read_descriptions(&a.input)?;
    let results = judge_batch(&items, &cfg)?;
    let mut scores = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(s) => scores.push(s),
            Err(e) => eprintln!("{} run {}: {e}", items[i / cfg.runs.max(1)].0, i % cfg.runs.max(1)),
        }
    }
    let agg = aggregate_scores(&scores).context("no judge request succeeded")?;
    let mut w = output(a.out.as_deref())?;
    write!(w, "{}", scores_tsv(&agg))?;
    w.flush()?;
    eprintln!("overall mean\t{}", agg.overall_mean);
    Ok(())
}

fn cmd_lora(a: LoraArgs) -> Result<()> {
    let ad = LoraAdapter::random(a.d_in, a.d_out, a.rank, a.alpha, a.seed)?;
    let x = lora::random_vector(a.d_in, a.seed ^ 0x5eed);
    let target = lora::random_vector(a.d_out, a.seed ^ 0x7a59);
    let update_rank = lora::numerical_rank(&ad.delta());
    let mut report = serde_json::json!({
        "d_in": a.d_in,
        "d_out": a.d_out,
        "rank": a.rank,
        "alpha": a.alpha,
        "trainable_fraction": lora::trainable_fraction(a.d_in, a.d_out, a.rank)?,
        "update_numerical_rank": update_rank,
        "grad_check": lora::grad_check(&ad, &x, &target)?,
    });
    if a.sweep {
        let steps = [1e-3, 1e-4, 1e-5];
        report["sweep"] = serde_json::json!({
            "central": lora::fd_sweep(&ad, &x, &target, &steps, FdScheme::Central)?,
            "forward": lora::fd_sweep(&ad, &x, &target, &steps, FdScheme::Forward)?,
        });
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    if !report["grad_check"]["passed"].as_bool().unwrap_or(false) {
        bail!("gradient check failed");
    }
    Ok(())
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let mut cfg = PipelineConfig::load(&a.config)?;
    if let Some(o) = a.out {
        cfg.output_dir = o;
    }
    if let Some(j) = a.jobs {
        cfg.jobs = j;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(f) = a.fraction {
        cfg.qa_fraction = f;
    }
    if a.no_metrics {
        cfg.use_metrics = false;
    }
    let report = pipeline::run(&cfg)?;
    println!(
        "{} volumes ok, {} failed, {} corpus lines in {}",
        report.succeeded,
        report.failed,
        report.corpus_lines,
        cfg.output_dir.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Phantom(a) => cmd_phantom(a),
        Command::Segment(a) => cmd_segment(a),
        Command::Metrics(a) => cmd_metrics(a),
        Command::Corrupt(a) => cmd_corrupt(a),
        Command::Qa(a) => cmd_qa(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Export(a) => cmd_export(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Judge(a) => cmd_judge(a),
        Command::LoraCheck(a) => cmd_lora(a),
        Command::Run(a) => cmd_run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
