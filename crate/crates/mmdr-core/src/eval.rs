//! Metrics, participant-level voting, evaluation over a dataset, and report
//! emission in JSON/CSV/Markdown.

use crate::config::Config;
use crate::data::Split;
use crate::error::{Error, Result};
use crate::fusion::PathChoice;
use crate::lm::model::LmModel;
use crate::lm::parse::Label;
use crate::lm::train::PreparedSample;
use crate::tensor::RngSeed;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Binary confusion counts at the participant level. Error predictions fold
/// into the wrong side of the true class (a miss for depressed participants,
/// a false alarm for controls) and are tallied separately, so
/// tp + fp + fn + tn equals the evaluated participant count.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub error_count: u64,
}

impl Confusion {
    pub fn record(&mut self, truth: u8, pred: Label) {
        match (truth, pred) {
            (1, Label::Depressed) => self.tp += 1,
            (1, Label::NotDepressed) => self.fn_ += 1,
            (0, Label::Depressed) => self.fp += 1,
            (0, Label::NotDepressed) => self.tn += 1,
            (1, Label::Error) => {
                self.fn_ += 1;
                self.error_count += 1;
            }
            (0, Label::Error) => {
                self.fp += 1;
                self.error_count += 1;
            }
            _ => unreachable!("labels are 0/1"),
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Headline metrics: accuracy over everything (errors included), with
/// precision/recall/F1 macro-averaged over the two classes. Zero-denominator
/// ratios are defined as 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub positive: ClassMetrics,
    pub negative: ClassMetrics,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn class_metrics(tp: u64, fp: u64, fn_: u64) -> ClassMetrics {
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    ClassMetrics {
        precision,
        recall,
        f1,
    }
}

pub fn metrics(c: &Confusion) -> Result<Metrics> {
    if c.total() == 0 {
        return Err(Error::Data("empty confusion".into()));
    }
    let positive = class_metrics(c.tp, c.fp, c.fn_);
    // The control class mirrors the counts.
    let negative = class_metrics(c.tn, c.fn_, c.fp);
    Ok(Metrics {
        accuracy: ratio(c.tp + c.tn, c.total()),
        precision: (positive.precision + negative.precision) / 2.0,
        recall: (positive.recall + negative.recall) / 2.0,
        f1: (positive.f1 + negative.f1) / 2.0,
        positive,
        negative,
    })
}

/// Participant vote: Depressed iff a strict majority of non-Error segment
/// predictions are Depressed; otherwise NotDepressed; all-Error participants
/// vote Error.
pub fn vote(preds: &[Label]) -> Result<Label> {
    if preds.is_empty() {
        return Err(Error::Data("vote over an empty prediction list".into()));
    }
    let valid: Vec<Label> = preds
        .iter()
        .copied()
        .filter(|l| *l != Label::Error)
        .collect();
    if valid.is_empty() {
        return Ok(Label::Error);
    }
    let dep = valid.iter().filter(|l| **l == Label::Depressed).count();
    if 2 * dep > valid.len() {
        Ok(Label::Depressed)
    } else {
        Ok(Label::NotDepressed)
    }
}

/// Which modalities the evaluation keeps; dropped modalities are removed
/// before fusion so routing takes the mandated bypass branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityConfig {
    pub use_audio: bool,
    pub use_video: bool,
}

impl ModalityConfig {
    pub const ALL: [ModalityConfig; 4] = [
        ModalityConfig {
            use_audio: false,
            use_video: false,
        },
        ModalityConfig {
            use_audio: true,
            use_video: false,
        },
        ModalityConfig {
            use_audio: false,
            use_video: true,
        },
        ModalityConfig {
            use_audio: true,
            use_video: true,
        },
    ];

    pub fn label(&self) -> &'static str {
        match (self.use_audio, self.use_video) {
            (false, false) => "T",
            (true, false) => "T+A",
            (false, true) => "T+V",
            (true, true) => "T+A+V",
        }
    }

    pub fn from_drops(drop_audio: bool, drop_video: bool) -> Self {
        ModalityConfig {
            use_audio: !drop_audio,
            use_video: !drop_video,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingCounts {
    pub fuse: u64,
    pub bypass_audio: u64,
    pub bypass_video: u64,
    pub text_only: u64,
}

impl RoutingCounts {
    fn record(&mut self, path: PathChoice) {
        match path {
            PathChoice::Fuse => self.fuse += 1,
            PathChoice::BypassAudio => self.bypass_audio += 1,
            PathChoice::BypassVideo => self.bypass_video += 1,
            PathChoice::TextOnly => self.text_only += 1,
        }
    }
}

/// One segment's prediction, ready for participant aggregation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentPrediction {
    pub id: String,
    pub participant_id: String,
    pub label: u8,
    pub pred: Label,
    pub response: String,
    pub path: PathChoice,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentOutcome {
    pub id: String,
    pub pred: Label,
    pub response: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParticipantOutcome {
    pub participant_id: String,
    pub label: u8,
    pub vote: Label,
    pub segments: Vec<SegmentOutcome>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub modality_config: String,
    pub confusion: Confusion,
    pub metrics: Metrics,
    pub routing: RoutingCounts,
    pub participants: Vec<ParticipantOutcome>,
    pub config_hash: String,
    pub seed: u64,
}

/// Aggregate per-segment predictions into votes, confusion, and metrics.
pub fn aggregate(
    dataset: &str,
    modality_config: &str,
    segments: &[SegmentPrediction],
    config_hash: &str,
    seed: u64,
) -> Result<EvalReport> {
    if segments.is_empty() {
        return Err(Error::Data(format!(
            "dataset {dataset}: nothing to evaluate"
        )));
    }
    let mut routing = RoutingCounts::default();
    let mut by_participant: BTreeMap<&str, Vec<&SegmentPrediction>> = BTreeMap::new();
    for s in segments {
        routing.record(s.path);
        by_participant.entry(&s.participant_id).or_default().push(s);
    }
    let mut confusion = Confusion::default();
    let mut participants = Vec::with_capacity(by_participant.len());
    for (pid, segs) in by_participant {
        let labels: Vec<u8> = segs.iter().map(|s| s.label).collect();
        if labels.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::Data(format!(
                "participant {pid} has inconsistent labels across segments"
            )));
        }
        let preds: Vec<Label> = segs.iter().map(|s| s.pred).collect();
        let decision = vote(&preds)?;
        confusion.record(labels[0], decision);
        participants.push(ParticipantOutcome {
            participant_id: pid.to_string(),
            label: labels[0],
            vote: decision,
            segments: segs
                .iter()
                .map(|s| SegmentOutcome {
                    id: s.id.clone(),
                    pred: s.pred,
                    response: s.response.clone(),
                })
                .collect(),
        });
    }
    Ok(EvalReport {
        dataset: dataset.to_string(),
        modality_config: modality_config.to_string(),
        confusion,
        metrics: metrics(&confusion)?,
        routing,
        participants,
        config_hash: config_hash.to_string(),
        seed,
    })
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Run the model over a dataset's test split under one modality
/// configuration. Dropped modalities never reach the encoders, so routing
/// exercises the availability branches.
pub fn evaluate(
    model: &LmModel,
    dataset: &str,
    samples: &[(Split, PreparedSample)],
    mc: ModalityConfig,
    cfg: &Config,
    seed: u64,
) -> Result<EvalReport> {
    let decode_cfg = cfg.eval.decode_cfg();
    let mut segments = Vec::new();
    for (split, prep) in samples {
        if *split != Split::Test {
            continue;
        }
        let mel = if mc.use_audio { prep.mel.as_ref() } else { None };
        let cues = if mc.use_video { prep.cues.as_ref() } else { None };
        // Per-sample decode stream derived from the evaluation seed and the
        // sample id keeps reports reproducible under any evaluation order.
        let mut rng = RngSeed(seed).derive(&[fnv1a(prep.id.as_bytes())]).stream();
        let p = model.predict(prep.scenario, &prep.text, mel, cues, &decode_cfg, &mut rng)?;
        segments.push(SegmentPrediction {
            id: prep.id.clone(),
            participant_id: prep.participant_id.clone(),
            label: prep.label,
            pred: p.label,
            response: p.response,
            path: p.path,
        });
    }
    aggregate(dataset, mc.label(), &segments, &cfg.hash(), seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

/// Write reports deterministically: key-sorted canonical JSON, a flat CSV,
/// and a dataset x modality Markdown grid. Returns the emitted paths.
pub fn write_reports(
    reports: &[EvalReport],
    dir: &Path,
    formats: &[ReportFormat],
) -> Result<Vec<PathBuf>> {
    if reports.is_empty() {
        return Err(Error::Data("no reports to write".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?;
    let mut sorted: Vec<&EvalReport> = reports.iter().collect();
    sorted.sort_by(|a, b| (&a.dataset, &a.modality_config).cmp(&(&b.dataset, &b.modality_config)));
    let mut written = Vec::new();
    for format in formats {
        match format {
            ReportFormat::Json => {
                let path = dir.join("report.json");
                // Through Value so map keys serialize sorted.
                let value = serde_json::to_value(&sorted)?;
                let mut text = serde_json::to_string_pretty(&value)?;
                text.push('\n');
                std::fs::write(&path, text)?;
                written.push(path);
            }
            ReportFormat::Csv => {
                let path = dir.join("report.csv");
                let mut out = String::from(
                    "dataset,modality_config,participants,accuracy,precision,recall,f1,tp,fp,fn,tn,error_count\n",
                );
                for r in &sorted {
                    out.push_str(&format!(
                        "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                        r.dataset,
                        r.modality_config,
                        r.confusion.total(),
                        r.metrics.accuracy,
                        r.metrics.precision,
                        r.metrics.recall,
                        r.metrics.f1,
                        r.confusion.tp,
                        r.confusion.fp,
                        r.confusion.fn_,
                        r.confusion.tn,
                        r.confusion.error_count,
                    ));
                }
                std::fs::write(&path, out)?;
                written.push(path);
            }
            ReportFormat::Markdown => {
                let path = dir.join("report.md");
                let mut configs: Vec<&str> =
                    sorted.iter().map(|r| r.modality_config.as_str()).collect();
                configs.sort_unstable();
                configs.dedup();
                let mut datasets: Vec<&str> = sorted.iter().map(|r| r.dataset.as_str()).collect();
                datasets.sort_unstable();
                datasets.dedup();
                let mut out = String::from(
                    "# Evaluation report\n\nMacro F1 by dataset and modality configuration.\n\n",
                );
                out.push_str("| dataset |");
                for c in &configs {
                    out.push_str(&format!(" {c} |"));
                }
                out.push_str("\n|---|");
                for _ in &configs {
                    out.push_str("---|");
                }
                out.push('\n');
                for d in &datasets {
                    out.push_str(&format!("| {d} |"));
                    for c in &configs {
                        let cell = sorted
                            .iter()
                            .find(|r| r.dataset == *d && r.modality_config == *c)
                            .map(|r| format!("{:.4}", r.metrics.f1))
                            .unwrap_or_else(|| "-".into());
                        out.push_str(&format!(" {cell} |"));
                    }
                    out.push('\n');
                }
                std::fs::write(&path, out)?;
                written.push(path);
            }
        }
    }
    Ok(written)
}
