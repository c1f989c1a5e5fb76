//! Fixed question and answer templates.

use crate::artifact::ArtifactKind;
use crate::metrics::QualityMetrics;

use super::{QaTask, QualityLabel};

pub struct ArtifactPhrases {
    /// Display name; answers refer to a kind as `"{name} artifact"`.
    pub name: &'static str,
    pub cause: &'static str,
    pub features: &'static str,
    pub remediation: &'static str,
}

pub fn phrases(kind: ArtifactKind) -> ArtifactPhrases {
    match kind {
        ArtifactKind::Motion => ArtifactPhrases {
            name: "Motion",
            cause: "k-space disruption from subject movement between phase-encode segments",
            features: "ghosting or blur along the phase-encode direction",
            remediation: "switch to a motion-robust PROPELLER sequence or add prospective motion correction",
        },
        ArtifactKind::Ghosting => ArtifactPhrases {
            name: "Ghosting",
            cause: "periodic inconsistency between alternating phase-encode lines",
            features: "faint replicas of the anatomy shifted by half the field of view",
            remediation: "recalibrate the gradients and acquire phase-correction reference lines",
        },
        ArtifactKind::Aliasing => ArtifactPhrases {
            name: "Aliasing",
            cause: "undersampling of k-space below the Nyquist rate",
            features: "wrap-around of anatomy folded in from outside the field of view",
            remediation: "enlarge the field of view or increase the phase-encode sampling density",
        },
        ArtifactKind::Noise => ArtifactPhrases {
            name: "Noise",
            cause: "thermal noise in the receiver chain with too little signal averaging",
            features: "grainy texture and reduced contrast in homogeneous tissue",
            remediation: "increase signal averaging or voxel size, or use a coil array with more elements",
        },
        ArtifactKind::BiasField => ArtifactPhrases {
            name: "Bias field",
            cause: "spatial variation of the receive coil sensitivity",
            features: "smooth intensity inhomogeneity across the volume",
            remediation: "apply retrospective bias field correction or prescan intensity normalization",
        },
    }
}

/// Kinds whose `"{name} artifact"` phrase occurs in `text` (case-insensitive).
pub fn kinds_named(text: &str) -> Vec<ArtifactKind> {
    let lower = text.to_lowercase();
    ArtifactKind::ALL
        .into_iter()
        .filter(|&k| lower.contains(&format!("{} artifact", phrases(k).name.to_lowercase())))
        .collect()
}

fn severity_word(s: f64) -> &'static str {
    if s < 1.0 / 3.0 {
        "mild"
    } else if s < 2.0 / 3.0 {
        "moderate"
    } else {
        "severe"
    }
}

fn fmt_metric(name: &str, v: Option<f64>, decimals: usize) -> String {
    match v {
        Some(v) => format!("{name} is {v:.decimals$}"),
        None => format!("{name} is undefined"),
    }
}

fn signal_description(label: QualityLabel) -> &'static str {
    match label {
        QualityLabel::Good => {
            "The signal is clean with sharp tissue boundaries, and the scan is usable for diagnostic reading."
        }
        QualityLabel::Medium => {
            "The signal shows noticeable degradation, and the scan is usable for diagnostic reading with caution."
        }
        QualityLabel::Bad => {
            "The signal is severely degraded, and the scan is not reliable for diagnostic reading."
        }
    }
}

fn usability(label: QualityLabel) -> &'static str {
    match label {
        QualityLabel::Good => {
            "The volume is suitable for segmentation, registration and quantitative analysis without correction."
        }
        QualityLabel::Medium => {
            "The volume is suitable for qualitative review; quantitative analysis should follow artifact correction."
        }
        QualityLabel::Bad => {
            "The volume is not suitable for downstream processing and a repeat acquisition is advised."
        }
    }
}

pub(super) fn render(
    task: QaTask,
    label: QualityLabel,
    m: &QualityMetrics,
    kinds: &[ArtifactKind],
    severity: f64,
    use_metrics: bool,
) -> (String, String) {
    match task {
        QaTask::Classification => {
            let q = "What is the overall quality level of this MRI volume?".to_string();
            let mut a = format!("Quality level: {label}. ");
            if use_metrics {
                a.push_str(&format!(
                    "{}, {}, {} and {}. ",
                    fmt_metric("SNR1", m.snr1, 2),
                    fmt_metric("EFC", m.efc, 3),
                    fmt_metric("CNR", m.cnr, 2),
                    fmt_metric("CJV", m.cjv, 3),
                ));
            }
            a.push_str(signal_description(label));
            (q, a)
        }
        QaTask::Artifact => {
            let q = "Which artifacts affect this MRI volume, and what causes them?".to_string();
            let a = if kinds.is_empty() {
                "No dominant artifact detected. Intensities are consistent with an uncorrupted acquisition."
                    .to_string()
            } else {
                let parts: Vec<String> = kinds
                    .iter()
                    .map(|&k| {
                        let p = phrases(k);
                        format!("{} artifact, caused by {}; it appears as {}.", p.name, p.cause, p.features)
                    })
                    .collect();
                format!("Corruption is {}. {}", severity_word(severity), parts.join(" "))
            };
            (q, a)
        }
        QaTask::Analysis => {
            let q = "Is this MRI volume usable for downstream processing, and how could the acquisition be improved?"
                .to_string();
            let mut a = usability(label).to_string();
            if kinds.is_empty() {
                a.push_str(" No acquisition changes are needed.");
            } else {
                for &k in kinds {
                    let p = phrases(k);
                    a.push_str(&format!(" For the {} artifact, {}.", p.name.to_lowercase(), p.remediation));
                }
            }
            (q, a)
        }
    }
}
