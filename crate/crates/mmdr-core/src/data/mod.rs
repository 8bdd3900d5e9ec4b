//! Dataset schema, JSONL storage, the synthetic multi-source generator, and
//! the preprocessing/augmentation transforms.

mod gen;
mod jsonl;
mod prep;

pub use gen::{synth, Dataset, DatasetSpec, GenSpec};
pub use jsonl::{read_jsonl, write_jsonl, sample_to_line};
pub use prep::{prep_dataset, qa_augment, qa_recombine, unify_params, window, PrepReport};

use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::tensor::Matrix;
use crate::text::Scenario;
use crate::video::CueSet;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Audio payload as stored on disk; multi-channel data is a list of channel
/// arrays and collapses to mono during preprocessing.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AudioSamples {
    Mono(Vec<f64>),
    Multi(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AudioPayload {
    pub sample_rate_hz: u32,
    pub samples: AudioSamples,
}

impl AudioPayload {
    pub fn len(&self) -> usize {
        match &self.samples {
            AudioSamples::Mono(v) => v.len(),
            AudioSamples::Multi(chs) => chs.first().map_or(0, |c| c.len()),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / self.sample_rate_hz as f64
    }

    /// Mono view; multi-channel payloads must be unified first.
    pub fn as_waveform(&self) -> Result<Waveform> {
        match &self.samples {
            AudioSamples::Mono(v) => Ok(Waveform {
                sample_rate_hz: self.sample_rate_hz,
                samples: v.clone(),
            }),
            AudioSamples::Multi(_) => Err(Error::Data(
                "multi-channel audio must pass parameter unification first".into(),
            )),
        }
    }
}

/// Facial-cue payload: arrays-of-arrays per cue plus the frame rate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CuePayload {
    pub fps: f64,
    pub f2d: Vec<Vec<f64>>,
    pub gaze: Vec<Vec<f64>>,
    pub hp: Vec<Vec<f64>>,
    pub au: Vec<Vec<f64>>,
}

impl CuePayload {
    pub fn t(&self) -> usize {
        self.f2d.len()
    }

    pub fn duration_s(&self) -> f64 {
        self.t() as f64 / self.fps
    }

    pub fn to_cue_set(&self) -> Result<CueSet> {
        Ok(CueSet {
            f2d: Matrix::from_rows(&self.f2d)?,
            gaze: Matrix::from_rows(&self.gaze)?,
            hp: Matrix::from_rows(&self.hp)?,
            au: Matrix::from_rows(&self.au)?,
            fps: self.fps,
        })
    }
}

/// One sample: scenario-tagged, labeled, split-assigned, with optional
/// modality payloads. Unknown JSON fields survive a load/store round trip.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub participant_id: String,
    pub scenario: Scenario,
    pub label: u8,
    pub split: Split,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub audio: Option<AudioPayload>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cues: Option<CuePayload>,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl Sample {
    pub fn validate(&self) -> Result<()> {
        if self.label > 1 {
            return Err(Error::Data(format!(
                "sample {}: label {} outside {{0, 1}}",
                self.id, self.label
            )));
        }
        if self.text.is_none() && self.audio.is_none() && self.cues.is_none() {
            return Err(Error::Data(format!(
                "sample {}: no modality present",
                self.id
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_fields_survive_round_trip() {
        let line = r#"{"id":"a","participant_id":"p","scenario":"S","label":1,"split":"train","text":"hi","source_note":"kept"}"#;
        let s: Sample = serde_json::from_str(line).unwrap();
        assert_eq!(s.extra["source_note"], "kept");
        let back = serde_json::to_value(&s).unwrap();
        assert_eq!(back["source_note"], "kept");
    }

    #[test]
    fn modality_free_samples_are_rejected() {
        let line = r#"{"id":"a","participant_id":"p","scenario":"I","label":0,"split":"test"}"#;
        let s: Sample = serde_json::from_str(line).unwrap();
        assert!(s.validate().is_err());
    }

    #[test]
    fn stereo_audio_parses_as_multi() {
        let line = r#"{"id":"a","participant_id":"p","scenario":"I","label":0,"split":"train","audio":{"sample_rate_hz":48000,"samples":[[0.0,0.1],[0.2,0.3]]}}"#;
        let s: Sample = serde_json::from_str(line).unwrap();
        let audio = s.audio.unwrap();
        assert!(matches!(audio.samples, AudioSamples::Multi(ref c) if c.len() == 2));
        assert!(audio.as_waveform().is_err());
    }
}
