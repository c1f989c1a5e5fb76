//! Shared test helpers: a brute-force metric reference, random volume
//! generators and a scripted chat-completions server.

#![allow(dead_code)]

use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use mriqa_core::mask::Mask;
use mriqa_core::volume::Volume;
use rand::Rng;
use serde_json::{json, Value};

/// `|a - b| <= tol * max(|a|, |b|)`; two exact zeros compare equal.
pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    a == b || (a - b).abs() <= tol * a.abs().max(b.abs())
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

// ---------------------------------------------------------------------------
// Brute-force metric reference. Written against the formula table only:
// plain loops, full sorts, no shared code with the library.

struct Grid<'a> {
    nx: usize,
    ny: usize,
    nz: usize,
    data: &'a [f32],
}

impl Grid<'_> {
    fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[x + self.nx * (y + self.ny * z)] as f64
    }
}

fn mean(xs: &[f64]) -> f64 {
    let mut s = 0.0;
    for x in xs {
        s += x;
    }
    s / xs.len() as f64
}

fn pop_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let mut s = 0.0;
    for x in xs {
        s += (x - m) * (x - m);
    }
    (s / xs.len() as f64).sqrt()
}

fn sorted_median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

/// Two-pass entropy focus criterion: energy first, entropy second.
pub fn efc_reference(data: &[f32]) -> Option<f64> {
    let mut energy = 0.0f64;
    for &x in data {
        energy += x as f64 * x as f64;
    }
    if energy == 0.0 {
        return None;
    }
    let n = data.len() as f64;
    if data.len() == 1 {
        return Some(0.0);
    }
    let bmax = energy.sqrt();
    let mut h = 0.0f64;
    for &x in data {
        if x != 0.0 {
            let p = (x as f64).abs() / bmax;
            h += p * p.ln();
        }
    }
    let e = h / (n.sqrt() * (1.0 / n.sqrt()).ln());
    Some(e.clamp(0.0, 1.0))
}

/// All fifteen metrics in table column order; `None` where undefined.
pub fn reference_metrics(v: &Volume, fg: &Mask, bg: &Mask) -> [Option<f64>; 15] {
    let [nx, ny, nz] = v.dims();
    let g = Grid { nx, ny, nz, data: v.data() };
    let in_fg = |x: usize, y: usize, z: usize| fg.as_slice()[x + nx * (y + ny * z)];
    let in_bg = |x: usize, y: usize, z: usize| bg.as_slice()[x + nx * (y + ny * z)];

    let mut f = Vec::new();
    let mut b = Vec::new();
    let mut fg_coords = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if in_fg(x, y, z) {
                    f.push(g.at(x, y, z));
                    fg_coords.push((x, y, z));
                }
                if in_bg(x, y, z) {
                    b.push(g.at(x, y, z));
                }
            }
        }
    }
    assert!(!f.is_empty() && !b.is_empty(), "reference needs both regions");

    let (mu_f, sd_f, mu_b, sd_b) = (mean(&f), pop_std(&f), mean(&b), pop_std(&b));
    let max_f = f.iter().cloned().fold(f64::MIN, f64::max);
    let min_f = f.iter().cloned().fold(f64::MAX, f64::min);

    let mut cpp_sum = 0.0;
    for &(x, y, z) in &fg_coords {
        let mut neighbours = 0.0;
        for yy in y as i64 - 1..=y as i64 + 1 {
            for xx in x as i64 - 1..=x as i64 + 1 {
                let outside = xx < 0 || yy < 0 || xx >= nx as i64 || yy >= ny as i64;
                if (xx, yy) != (x as i64, y as i64) && !outside {
                    neighbours += g.at(xx as usize, yy as usize, z);
                }
            }
        }
        cpp_sum += (8.0 * g.at(x, y, z) - neighbours).abs();
    }
    let cpp = cpp_sum / f.len() as f64;

    let clampi = |c: i64, n: usize| c.max(0).min(n as i64 - 1) as usize;
    let mut mse = 0.0;
    for &(x, y, z) in &fg_coords {
        let mut w = Vec::with_capacity(27);
        for dz in -1..=1i64 {
            for dy in -1..=1i64 {
                for dx in -1..=1i64 {
                    w.push(g.at(
                        clampi(x as i64 + dx, nx),
                        clampi(y as i64 + dy, ny),
                        clampi(z as i64 + dz, nz),
                    ));
                }
            }
        }
        w.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let d = g.at(x, y, z) - w[13];
        mse += d * d;
    }
    mse /= f.len() as f64;
    let psnr = if mse == 0.0 { None } else { finite(10.0 * (max_f * max_f / mse).log10()) };

    // foreground patch around the rounded centroid
    let dims = [nx, ny, nz];
    let mut csum = [0.0f64; 3];
    for &(x, y, z) in &fg_coords {
        csum[0] += x as f64;
        csum[1] += y as f64;
        csum[2] += z as f64;
    }
    let mut c = [0usize; 3];
    for a in 0..3 {
        c[a] = ((csum[a] / f.len() as f64).round() as usize).min(dims[a] - 1);
    }
    if !in_fg(c[0], c[1], c[2]) {
        let mut best = None;
        for &(x, y, z) in &fg_coords {
            let d2 = [x as i64 - c[0] as i64, y as i64 - c[1] as i64, z as i64 - c[2] as i64]
                .iter()
                .map(|d| d * d)
                .sum::<i64>();
            if best.is_none_or(|(bd, _)| d2 < bd) {
                best = Some((d2, [x, y, z]));
            }
        }
        c = best.unwrap().1;
    }
    let collect_box = |origin: [usize; 3], keep: &dyn Fn(usize, usize, usize) -> bool| {
        let mut out = Vec::new();
        for z in origin[2]..(origin[2] + 5).min(nz) {
            for y in origin[1]..(origin[1] + 5).min(ny) {
                for x in origin[0]..(origin[0] + 5).min(nx) {
                    if keep(x, y, z) {
                        out.push(g.at(x, y, z));
                    }
                }
            }
        }
        out
    };
    let p = collect_box([c[0].saturating_sub(2), c[1].saturating_sub(2), c[2].saturating_sub(2)], &in_fg);
    let (mu_p, sd_p) = (mean(&p), pop_std(&p));

    let mut bp = Vec::new();
    for corner in 0..8 {
        let origin = [
            if corner & 1 != 0 { nx.saturating_sub(5) } else { 0 },
            if corner & 2 != 0 { ny.saturating_sub(5) } else { 0 },
            if corner & 4 != 0 { nz.saturating_sub(5) } else { 0 },
        ];
        bp = collect_box(origin, &in_bg);
        if !bp.is_empty() {
            break;
        }
    }
    let (snr4, cnr) = if bp.is_empty() {
        (None, None)
    } else {
        let (mu_bp, sd_bp) = (mean(&bp), pop_std(&bp));
        (finite(mu_p / sd_bp), finite((mu_p - mu_bp).abs() / sd_bp))
    };

    let f2: Vec<f64> = f.iter().map(|x| x * x).collect();
    let b2: Vec<f64> = b.iter().map(|x| x * x).collect();

    [
        finite(mu_f),
        finite(max_f - min_f),
        finite(sd_f * sd_f),
        finite(sd_f / mu_f.abs()),
        finite(cpp),
        psnr,
        finite(mu_f / sd_b),
        finite(mu_p / sd_b),
        finite(mu_p / sd_p),
        snr4,
        cnr,
        finite(sd_p / mu_p.abs()),
        finite((sd_f + sd_b) / (mu_f - mu_b).abs()),
        efc_reference(v.data()),
        finite(sorted_median(&f2) / sorted_median(&b2)),
    ]
}

// ---------------------------------------------------------------------------
// Random inputs.

/// Small volume with random dims (each `1..=max_dim`) and random disjoint,
/// nonempty foreground and background masks. Every fourth case uses a few
/// integer levels so ties and zero spreads occur.
pub fn random_case(rng: &mut impl Rng, max_dim: usize) -> (Volume, Mask, Mask) {
    loop {
        let dims = [
            rng.random_range(1..=max_dim),
            rng.random_range(1..=max_dim),
            rng.random_range(1..=max_dim),
        ];
        let n = dims[0] * dims[1] * dims[2];
        if n < 2 {
            continue;
        }
        let quantized = rng.random_range(0..4) == 0;
        let data: Vec<f32> = (0..n)
            .map(|_| {
                if quantized {
                    rng.random_range(0..4) as f32
                } else {
                    rng.random_range(-20.0f32..120.0)
                }
            })
            .collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let fg = Mask::new(dims, labels.iter().map(|&l| l == 1).collect());
        let bg = Mask::new(dims, labels.iter().map(|&l| l == 2).collect());
        if fg.count() == 0 || bg.count() == 0 {
            continue;
        }
        return (Volume::from_data(dims, data).unwrap(), fg, bg);
    }
}

/// Noisy ellipsoid on a noisy background with masks given by the ellipsoid.
/// Foreground values stay well above zero, so ratios of region statistics
/// are well conditioned.
pub fn random_blob(rng: &mut impl Rng) -> (Volume, Mask, Mask) {
    let dims = [rng.random_range(8..=16), rng.random_range(8..=16), rng.random_range(8..=16)];
    let level = rng.random_range(50.0f64..200.0);
    let semi: [f64; 3] = std::array::from_fn(|a| dims[a] as f64 * rng.random_range(0.2..0.4));
    let inside = |x: usize, y: usize, z: usize| {
        let p = [x, y, z];
        (0..3)
            .map(|a| {
                let d = (p[a] as f64 - (dims[a] as f64 - 1.0) / 2.0) / semi[a];
                d * d
            })
            .sum::<f64>()
            <= 1.0
    };
    let fg = Mask::from_fn(dims, inside);
    let bg = fg.complement();
    let mut data = Vec::with_capacity(fg.len());
    for &is_fg in fg.as_slice() {
        let noise = rng.random_range(-1.0..1.0) * 0.1 * level;
        let base = if is_fg { level } else { 0.15 * level };
        data.push((base + noise) as f32);
    }
    (Volume::from_data(dims, data).unwrap(), fg, bg)
}

// ---------------------------------------------------------------------------
// Scripted chat-completions endpoint.

pub enum Reply {
    /// Wrapped as `choices[0].message.content`.
    Content(String),
    /// Sent verbatim with this status.
    Raw(u16, String),
}

pub type Script = Arc<dyn Fn(&str) -> Reply + Send + Sync>;

pub struct MockServer {
    pub url: String,
    hits: Arc<AtomicUsize>,
}

impl MockServer {
    /// Serves `POST /v1/chat/completions`; `script` sees the last user
    /// message and decides the reply.
    pub fn start(script: impl Fn(&str) -> Reply + Send + Sync + 'static) -> Self {
        use axum::{extract::State, http::StatusCode, response::IntoResponse, routing::post, Json, Router};

        let script: Script = Arc::new(script);
        let hits = Arc::new(AtomicUsize::new(0));
        let state = (script, hits.clone());
        let (tx, rx) = std::sync::mpsc::channel::<SocketAddr>();
        std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread()
                .worker_threads(2)
                .enable_all()
                .build()
                .unwrap();
            rt.block_on(async move {
                let app = Router::new()
                    .route(
                        "/v1/chat/completions",
                        post(
                            |State((script, hits)): State<(Script, Arc<AtomicUsize>)>, Json(body): Json<Value>| async move {
                                hits.fetch_add(1, Ordering::SeqCst);
                                let user = body["messages"]
                                    .as_array()
                                    .and_then(|m| m.last())
                                    .and_then(|m| m["content"].as_str())
                                    .unwrap_or_default()
                                    .to_string();
                                match script(&user) {
                                    Reply::Content(c) => (
                                        StatusCode::OK,
                                        json!({"choices": [{"message": {"role": "assistant", "content": c}}]})
                                            .to_string(),
                                    )
                                        .into_response(),
                                    Reply::Raw(status, body) => {
                                        (StatusCode::from_u16(status).unwrap(), body).into_response()
                                    }
                                }
                            },
                        ),
                    )
                    .with_state(state);
                let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
                tx.send(listener.local_addr().unwrap()).unwrap();
                axum::serve(listener, app).await.unwrap();
            });
        });
        let addr = rx.recv().unwrap();
        MockServer {
            url: format!("http://{addr}/v1/chat/completions"),
            hits,
        }
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }
}

// ---------------------------------------------------------------------------
// Evaluation references.

/// Macro-F1 from a `[true][pred]` count table via per-class precision and
/// recall; `F1 = 2PR/(P+R)`, 0 when undefined.
#[allow(clippy::needless_range_loop)]
pub fn brute_macro_f1(rows: [[u64; 3]; 3]) -> f64 {
    let mut total = 0.0;
    for c in 0..3 {
        let tp = rows[c][c] as f64;
        let mut predicted = 0.0;
        let mut actual = 0.0;
        for k in 0..3 {
            predicted += rows[k][c] as f64;
            actual += rows[c][k] as f64;
        }
        let p = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let r = if actual > 0.0 { tp / actual } else { 0.0 };
        total += if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    }
    total / 3.0
}

/// Expands a count table into aligned `(truths, preds)` label lists.
pub fn labels_from_counts(rows: [[u64; 3]; 3]) -> (Vec<mriqa_core::qa::QualityLabel>, Vec<mriqa_core::qa::QualityLabel>) {
    use mriqa_core::qa::QualityLabel::{Bad, Good, Medium};
    let classes = [Good, Medium, Bad];
    let (mut truths, mut preds) = (Vec::new(), Vec::new());
    for t in 0..3 {
        for p in 0..3 {
            for _ in 0..rows[t][p] {
                truths.push(classes[t]);
                preds.push(classes[p]);
            }
        }
    }
    (truths, preds)
}

/// Per-item mean and population std over `scores[item][run]`, then the
/// mean of item means.
pub fn nested_aggregate(scores: &[Vec<f64>]) -> (Vec<(f64, f64)>, f64) {
    let mut per_item = Vec::new();
    let mut overall = 0.0;
    for runs in scores {
        let mut s = 0.0;
        for r in runs {
            s += r;
        }
        let m = s / runs.len() as f64;
        let mut v = 0.0;
        for r in runs {
            v += (r - m) * (r - m);
        }
        per_item.push((m, (v / runs.len() as f64).sqrt()));
        overall += m;
    }
    let n = scores.len() as f64;
    (per_item, overall / n)
}

// ---------------------------------------------------------------------------
// Pipeline helpers.

/// Ten phantoms: recipes 0-2 clean, the other seven cover every kind.
pub fn mixed_config(out: &std::path::Path, dims: [usize; 3]) -> mriqa_core::pipeline::PipelineConfig {
    let semi: Vec<String> = dims.iter().map(|&d| format!("{:.1}", d as f64 * 0.3)).collect();
    let text = format!(
        r#"
seed = 42
output_dir = "{out}"
jobs = 4

[phantoms]
count = 10
dims = [{}, {}, {}]
semi_axes = [{}]

[[artifacts]]
[[artifacts]]
[[artifacts]]
[[artifacts]]
steps = [{{ kind = "motion", severity = [0.5, 0.9] }}]
[[artifacts]]
steps = [{{ kind = "ghosting", severity = [0.5, 0.9] }}]
[[artifacts]]
steps = [{{ kind = "aliasing", severity = [0.4, 0.8] }}]
[[artifacts]]
steps = [{{ kind = "noise", severity = [0.6, 1.0] }}]
[[artifacts]]
steps = [{{ kind = "bias_field", severity = [0.5, 1.0] }}]
[[artifacts]]
steps = [{{ kind = "motion", severity = [0.3, 0.6] }}, {{ kind = "noise", severity = [0.2, 0.4] }}]
[[artifacts]]
steps = [{{ kind = "ghosting", severity = [0.3, 0.6] }}, {{ kind = "aliasing", severity = [0.2, 0.4] }}]
"#,
        dims[0],
        dims[1],
        dims[2],
        semi.join(", "),
        out = out.display(),
    );
    mriqa_core::pipeline::PipelineConfig::from_toml(&text).unwrap()
}

/// Every way `out/corpus.jsonl` breaks the corpus contract: schema, ids,
/// image paths, and Artifact answers naming kinds that were not applied.
pub fn corpus_violations(out: &std::path::Path) -> Vec<String> {
    use mriqa_core::artifact::ProvenanceRecord;
    use mriqa_core::qa::{kinds_named, read_jsonl, QaTask};

    let mut bad = Vec::new();
    let file = match std::fs::File::open(out.join("corpus.jsonl")) {
        Ok(f) => f,
        Err(e) => return vec![format!("corpus.jsonl: {e}")],
    };
    let records = match read_jsonl(file) {
        Ok(r) => r,
        Err(e) => return vec![format!("schema: {e}")],
    };
    if records.is_empty() {
        bad.push("empty corpus".into());
    }
    for r in &records {
        let roles: Vec<&str> = r.conversations.iter().map(|t| t.from.as_str()).collect();
        if roles != ["human", "assistant"] || r.conversations.iter().any(|t| t.value.trim().is_empty()) {
            bad.push(format!("{}: bad conversation {roles:?}", r.id));
            continue;
        }
        let Some((vol, task)) = r.id.rsplit_once('-') else {
            bad.push(format!("{}: id has no task suffix", r.id));
            continue;
        };
        if !QaTask::ALL.iter().any(|t| t.as_str() == task) {
            bad.push(format!("{}: unknown task", r.id));
        }
        if r.image != format!("volumes/{vol}.nii.gz") || !out.join(&r.image).is_file() {
            bad.push(format!("{}: image {} missing", r.id, r.image));
        }
        if task == "artifact" {
            let applied = std::fs::read_to_string(out.join("provenance").join(format!("{vol}.json")))
                .map(|s| ProvenanceRecord::from_json(&s).unwrap().kinds())
                .unwrap_or_default();
            let named = kinds_named(&r.conversations[1].value);
            if named.iter().any(|k| !applied.contains(k)) {
                bad.push(format!("{}: names {named:?}, applied {applied:?}", r.id));
            }
        }
    }
    bad
}

/// Conversation texts of `out/corpus.jsonl` that contain a digit.
pub fn texts_with_digits(out: &std::path::Path) -> Vec<String> {
    let records = mriqa_core::qa::read_jsonl(std::fs::File::open(out.join("corpus.jsonl")).unwrap()).unwrap();
    records
        .into_iter()
        .flat_map(|r| r.conversations.into_iter().map(|t| t.value))
        .filter(|v| v.chars().any(|c| c.is_ascii_digit()))
        .collect()
}

/// Correlation of `corrupted - clean` with `clean` circularly shifted by
/// `s` rows along y, for every `s` in `0..ny`.
pub fn ghost_shift_scores(clean: &Volume, corrupted: &Volume) -> Vec<f64> {
    let [nx, ny, nz] = clean.dims();
    let d: Vec<f64> = corrupted.data().iter().zip(clean.data()).map(|(a, b)| *a as f64 - *b as f64).collect();
    (0..ny)
        .map(|s| {
            let mut acc = 0.0;
            for z in 0..nz {
                for y in 0..ny {
                    for x in 0..nx {
                        acc += d[x + nx * (y + ny * z)] * clean.get(x, (y + ny - s) % ny, z) as f64;
                    }
                }
            }
            acc
        })
        .collect()
}
