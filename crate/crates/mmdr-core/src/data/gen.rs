//! Synthetic multi-source corpus generator with planted, per-modality
//! label signals of configurable strength.

use crate::data::{AudioPayload, AudioSamples, CuePayload, Sample, Split};
use crate::error::{Error, Result};
use crate::tensor::{RngSeed, SeededRng};
use crate::text::Scenario;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenSpec {
    pub seed: u64,
    pub datasets: Vec<DatasetSpec>,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            seed: 0,
            datasets: vec![
                DatasetSpec {
                    name: "synth_interview".into(),
                    scenario: Scenario::Interview,
                    ..DatasetSpec::default()
                },
                DatasetSpec {
                    name: "synth_questionnaire".into(),
                    scenario: Scenario::Questionnaire,
                    missing_video_rate: 1.0,
                    ..DatasetSpec::default()
                },
                DatasetSpec {
                    name: "synth_narration".into(),
                    scenario: Scenario::SelfNarration,
                    ..DatasetSpec::default()
                },
            ],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: String,
    pub scenario: Scenario,
    pub train_participants: usize,
    pub test_participants: usize,
    /// Probability a participant is depressed.
    pub class_prior: f64,
    pub segments_per_participant: [usize; 2],
    /// Question-answer pairs per segment (interview/questionnaire only).
    pub qa_pairs: [usize; 2],
    /// Probability a depressed answer carries a marker phrase.
    pub text_marker_prob: f64,
    /// Probability a control answer leaks a marker phrase.
    pub control_marker_prob: f64,
    pub marker_phrases: Vec<String>,
    /// Spectral anchor for control audio.
    pub audio_base_hz: f64,
    /// Depressed audio lowers its tone by this fraction.
    pub audio_centroid_shift: f64,
    /// Depressed action-unit channels scale their spread by this factor.
    pub au_variance_factor: f64,
    pub missing_audio_rate: f64,
    pub missing_video_rate: f64,
    pub audio_sample_rate_hz: u32,
    pub duration_s: [f64; 2],
    /// Sentences per self-narration segment.
    pub sentences: [usize; 2],
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            name: "synth".into(),
            scenario: Scenario::SelfNarration,
            train_participants: 8,
            test_participants: 4,
            class_prior: 0.5,
            segments_per_participant: [2, 3],
            qa_pairs: [2, 3],
            text_marker_prob: 1.0,
            control_marker_prob: 0.0,
            marker_phrases: vec![
                "hopeless".into(),
                "worthless".into(),
                "empty inside".into(),
            ],
            audio_base_hz: 1300.0,
            audio_centroid_shift: 0.6,
            au_variance_factor: 0.3,
            missing_audio_rate: 0.1,
            missing_video_rate: 0.1,
            audio_sample_rate_hz: 22050,
            duration_s: [0.7, 1.2],
            sentences: [1, 3],
        }
    }
}

impl DatasetSpec {
    fn validate(&self) -> Result<()> {
        let probs = [
            ("class_prior", self.class_prior),
            ("text_marker_prob", self.text_marker_prob),
            ("control_marker_prob", self.control_marker_prob),
            ("missing_audio_rate", self.missing_audio_rate),
            ("missing_video_rate", self.missing_video_rate),
            ("audio_centroid_shift", self.audio_centroid_shift),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!(
                    "{}: {name} = {p} outside [0, 1]",
                    self.name
                )));
            }
        }
        if self.train_participants == 0 && self.test_participants == 0 {
            return Err(Error::Config(format!("{}: no participants", self.name)));
        }
        if self.duration_s[0] <= 0.0 || self.duration_s[1] < self.duration_s[0] {
            return Err(Error::Config(format!("{}: bad duration range", self.name)));
        }
        if self.au_variance_factor < 0.0 {
            return Err(Error::Config(format!("{}: negative variance factor", self.name)));
        }
        let informative = self.text_marker_prob > 0.0
            || self.audio_centroid_shift > 0.0
            || (self.au_variance_factor - 1.0).abs() > 1e-12;
        if !informative {
            return Err(Error::Config(format!(
                "{}: no informative modality (zero text, audio, and cue signal)",
                self.name
            )));
        }
        if self.marker_phrases.is_empty() {
            return Err(Error::Config(format!("{}: empty marker list", self.name)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub samples: Vec<Sample>,
}

const QUESTIONS: [&str; 4] = [
    "How have you been sleeping?",
    "What fills your days lately?",
    "How is your appetite?",
    "Do you meet friends much?",
];

const ITEMS: [&str; 4] = [
    "I often feel down.",
    "I enjoy my usual activities.",
    "I struggle to focus.",
    "I feel calm most days.",
];

const NEUTRAL_ANSWERS: [&str; 4] = [
    "I sleep fine most nights.",
    "Work keeps me busy and content.",
    "Meals are regular and normal.",
    "I see friends every week.",
];

const FLAT_ANSWERS: [&str; 2] = ["Some days drag on.", "Rest is uneven lately."];

const NEUTRAL_SENTENCES: [&str; 3] = [
    "I walked to the market and enjoyed the sun.",
    "My week went smoothly with small wins.",
    "Dinner with family was warm and easy.",
];

fn marker_answer(rng: &mut SeededRng, markers: &[String]) -> String {
    let m = &markers[rng.range(markers.len())];
    match rng.range(2) {
        0 => format!("I feel {m} about most things."),
        _ => format!("Lately everything seems {m}."),
    }
}

fn plain_answer(rng: &mut SeededRng, depressed: bool) -> String {
    if depressed {
        FLAT_ANSWERS[rng.range(FLAT_ANSWERS.len())].to_string()
    } else {
        NEUTRAL_ANSWERS[rng.range(NEUTRAL_ANSWERS.len())].to_string()
    }
}

fn answer(rng: &mut SeededRng, spec: &DatasetSpec, depressed: bool) -> String {
    let marked = if depressed {
        rng.bernoulli(spec.text_marker_prob)
    } else {
        rng.bernoulli(spec.control_marker_prob)
    };
    if marked {
        marker_answer(rng, &spec.marker_phrases)
    } else {
        plain_answer(rng, depressed)
    }
}

fn segment_text(rng: &mut SeededRng, spec: &DatasetSpec, depressed: bool) -> String {
    match spec.scenario {
        Scenario::Interview | Scenario::Questionnaire => {
            let bank: &[&str] = if spec.scenario == Scenario::Interview {
                &QUESTIONS
            } else {
                &ITEMS
            };
            let lo = spec.qa_pairs[0].max(1);
            let hi = spec.qa_pairs[1].max(lo);
            let n = lo + rng.range(hi - lo + 1);
            let mut lines = Vec::with_capacity(n);
            for k in 0..n {
                let q = bank[(rng.range(bank.len()) + k) % bank.len()];
                lines.push(format!("Q: {q} A: {}", answer(rng, spec, depressed)));
            }
            lines.join("\n")
        }
        Scenario::SelfNarration => {
            let lo = spec.sentences[0].max(1);
            let hi = spec.sentences[1].max(lo);
            let n = lo + rng.range(hi - lo + 1);
            let mut sentences = Vec::with_capacity(n);
            let marked = if depressed {
                rng.bernoulli(spec.text_marker_prob)
            } else {
                rng.bernoulli(spec.control_marker_prob)
            };
            if marked {
                let m = &spec.marker_phrases[rng.range(spec.marker_phrases.len())];
                sentences.push(format!("I feel {m} and drained most days."));
            } else if depressed {
                sentences.push("Days feel slow and heavy often.".to_string());
            }
            while sentences.len() < n {
                sentences.push(NEUTRAL_SENTENCES[rng.range(NEUTRAL_SENTENCES.len())].to_string());
            }
            sentences.join(" ")
        }
    }
}

fn segment_audio(rng: &mut SeededRng, spec: &DatasetSpec, depressed: bool, dur: f64) -> AudioPayload {
    let sr = spec.audio_sample_rate_hz;
    let n = (dur * sr as f64).round() as usize;
    let mut f0 = spec.audio_base_hz * rng.uniform(0.9, 1.1);
    if depressed {
        f0 *= 1.0 - spec.audio_centroid_shift;
    }
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / sr as f64;
        let v = 0.55 * (2.0 * std::f64::consts::PI * f0 * t).sin()
            + 0.2 * (2.0 * std::f64::consts::PI * 2.1 * f0 * t).sin()
            + 0.08 * rng.normal(0.0, 1.0);
        samples.push(v.clamp(-1.0, 1.0));
    }
    AudioPayload {
        sample_rate_hz: sr,
        samples: AudioSamples::Mono(samples),
    }
}

fn segment_cues(rng: &mut SeededRng, spec: &DatasetSpec, depressed: bool, dur: f64) -> CuePayload {
    let fps = 30.0;
    let t = (dur * fps).round().max(1.0) as usize;
    let au_sigma = 0.2 * if depressed { spec.au_variance_factor } else { 1.0 };
    let gen = |cols: usize, base: fn(usize) -> f64, sigma: f64, rng: &mut SeededRng| {
        (0..t)
            .map(|_| (0..cols).map(|c| base(c) + rng.normal(0.0, sigma)).collect())
            .collect::<Vec<Vec<f64>>>()
    };
    CuePayload {
        fps,
        f2d: gen(136, |c| (c % 17) as f64 / 17.0 - 0.5, 0.05, rng),
        gaze: gen(8, |_| 0.0, 0.1, rng),
        hp: gen(6, |_| 0.0, 0.2, rng),
        au: gen(35, |_| 0.3, au_sigma, rng),
    }
}

/// Generate every configured dataset. Output is fully determined by the
/// spec (including its seed); regeneration is byte-identical.
pub fn synth(spec: &GenSpec) -> Result<Vec<Dataset>> {
    if spec.datasets.is_empty() {
        return Err(Error::Config("spec lists no datasets".into()));
    }
    let root = RngSeed(spec.seed);
    let mut out = Vec::with_capacity(spec.datasets.len());
    for (di, dspec) in spec.datasets.iter().enumerate() {
        dspec.validate()?;
        let mut samples = Vec::new();
        for (split, count, split_code) in [
            (Split::Train, dspec.train_participants, 0u64),
            (Split::Test, dspec.test_participants, 1u64),
        ] {
            for p in 0..count {
                let mut prng = root.derive(&[di as u64, split_code, p as u64]).stream();
                let depressed = prng.bernoulli(dspec.class_prior);
                let lo = dspec.segments_per_participant[0].max(1);
                let hi = dspec.segments_per_participant[1].max(lo);
                let n_segments = lo + prng.range(hi - lo + 1);
                let split_tag = match split {
                    Split::Train => "train",
                    Split::Test => "test",
                };
                let participant_id = format!("{}_{}_p{:03}", dspec.name, split_tag, p);
                for seg in 0..n_segments {
                    let mut rng = root
                        .derive(&[di as u64, split_code, p as u64, seg as u64 + 10])
                        .stream();
                    let dur = rng.uniform(dspec.duration_s[0], dspec.duration_s[1]);
                    let text = segment_text(&mut rng, dspec, depressed);
                    let audio = if rng.bernoulli(dspec.missing_audio_rate) {
                        None
                    } else {
                        Some(segment_audio(&mut rng, dspec, depressed, dur))
                    };
                    let cues = if rng.bernoulli(dspec.missing_video_rate) {
                        None
                    } else {
                        Some(segment_cues(&mut rng, dspec, depressed, dur))
                    };
                    samples.push(Sample {
                        id: format!("{participant_id}_s{seg}"),
                        participant_id: participant_id.clone(),
                        scenario: dspec.scenario,
                        label: depressed as u8,
                        split,
                        text: Some(text),
                        audio,
                        cues,
                        extra: serde_json::Map::new(),
                    });
                }
            }
        }
        samples.sort_by(|a, b| a.id.cmp(&b.id));
        out.push(Dataset {
            name: dspec.name.clone(),
            samples,
        });
    }
    Ok(out)
}
