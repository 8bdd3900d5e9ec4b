//! Preprocessing and augmentation: parameter unification, synchronized
//! windowing of long samples, per-QA-pair expansion, and depressive-class
//! recombination on the training split.

use crate::config::DataSection;
use crate::data::{AudioPayload, AudioSamples, CuePayload, Sample, Split};
use crate::error::{Error, Result};
use crate::tensor::{RngSeed, SeededRng};
use crate::text::Scenario;

/// Linear-interpolation resampler; duration is preserved to within one
/// output sample.
fn resample_linear(input: &[f64], from_hz: f64, to_hz: f64) -> Vec<f64> {
    if input.is_empty() {
        return Vec::new();
    }
    let n_out = (((input.len() - 1) as f64) * to_hz / from_hz).floor() as usize + 1;
    let ratio = from_hz / to_hz;
    (0..n_out)
        .map(|i| {
            let pos = i as f64 * ratio;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(input.len() - 1);
            let frac = pos - lo as f64;
            input[lo] * (1.0 - frac) + input[hi] * frac
        })
        .collect()
}

fn resample_rows(rows: &[Vec<f64>], from_fps: f64, to_fps: f64) -> Vec<Vec<f64>> {
    if rows.is_empty() {
        return Vec::new();
    }
    let cols = rows[0].len();
    let n_out = (((rows.len() - 1) as f64) * to_fps / from_fps).floor() as usize + 1;
    let ratio = from_fps / to_fps;
    (0..n_out)
        .map(|i| {
            let pos = i as f64 * ratio;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(rows.len() - 1);
            let frac = pos - lo as f64;
            (0..cols)
                .map(|c| rows[lo][c] * (1.0 - frac) + rows[hi][c] * frac)
                .collect()
        })
        .collect()
}

fn decimate_rows(rows: &[Vec<f64>], step: usize) -> Vec<Vec<f64>> {
    rows.iter().step_by(step.max(1)).cloned().collect()
}

/// Normalize modality parameters: audio to mono at the target rate, cue
/// streams to the target fps then frame-decimated. Already-conforming
/// samples pass through untouched, so the transform is idempotent.
pub fn unify_params(sample: &Sample, cfg: &DataSection) -> Result<Sample> {
    let mut out = sample.clone();
    if let Some(audio) = &sample.audio {
        if audio.is_empty() {
            return Err(Error::Data(format!("sample {}: empty audio", sample.id)));
        }
        let mono: Option<Vec<f64>> = match &audio.samples {
            AudioSamples::Multi(chs) => {
                if chs.iter().any(|c| c.len() != chs[0].len()) {
                    return Err(Error::Data(format!(
                        "sample {}: ragged audio channels",
                        sample.id
                    )));
                }
                let n = chs[0].len();
                let k = chs.len() as f64;
                Some((0..n).map(|i| chs.iter().map(|c| c[i]).sum::<f64>() / k).collect())
            }
            AudioSamples::Mono(_) if audio.sample_rate_hz != cfg.audio_rate_hz => None,
            AudioSamples::Mono(_) => {
                // Conforming already; leave the payload untouched.
                return unify_cues_only(out, cfg);
            }
        };
        let work: Vec<f64> = match (&audio.samples, mono) {
            (_, Some(m)) => m,
            (AudioSamples::Mono(v), None) => v.clone(),
            _ => unreachable!(),
        };
        let samples = if audio.sample_rate_hz != cfg.audio_rate_hz {
            resample_linear(&work, audio.sample_rate_hz as f64, cfg.audio_rate_hz as f64)
        } else {
            work
        };
        out.audio = Some(AudioPayload {
            sample_rate_hz: cfg.audio_rate_hz,
            samples: AudioSamples::Mono(samples),
        });
    }
    unify_cues_only(out, cfg)
}

fn unify_cues_only(mut out: Sample, cfg: &DataSection) -> Result<Sample> {
    if let Some(cues) = out.cues.clone() {
        if cues.t() == 0 {
            return Err(Error::Data(format!("sample {}: empty cue streams", out.id)));
        }
        let effective = cfg.target_fps / cfg.frame_decimation as f64;
        if (cues.fps - effective).abs() < 1e-9 {
            return Ok(out); // already decimated
        }
        let at_target = |rows: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            if (cues.fps - cfg.target_fps).abs() < 1e-9 {
                rows.clone()
            } else {
                resample_rows(rows, cues.fps, cfg.target_fps)
            }
        };
        let f2d = decimate_rows(&at_target(&cues.f2d), cfg.frame_decimation);
        let gaze = decimate_rows(&at_target(&cues.gaze), cfg.frame_decimation);
        let hp = decimate_rows(&at_target(&cues.hp), cfg.frame_decimation);
        let au = decimate_rows(&at_target(&cues.au), cfg.frame_decimation);
        out.cues = Some(CuePayload {
            fps: effective,
            f2d,
            gaze,
            hp,
            au,
        });
    }
    Ok(out)
}

fn slice_audio(audio: &AudioPayload, t0: f64, t1: f64) -> AudioPayload {
    let sr = audio.sample_rate_hz as f64;
    let (a, b) = ((t0 * sr).round() as usize, (t1 * sr).round() as usize);
    let samples = match &audio.samples {
        AudioSamples::Mono(v) => v[a.min(v.len())..b.min(v.len())].to_vec(),
        AudioSamples::Multi(_) => unreachable!("windowing runs after unification"),
    };
    AudioPayload {
        sample_rate_hz: audio.sample_rate_hz,
        samples: AudioSamples::Mono(samples),
    }
}

fn slice_cues(cues: &CuePayload, t0: f64, t1: f64) -> CuePayload {
    let (a, b) = (
        (t0 * cues.fps).round() as usize,
        (t1 * cues.fps).round() as usize,
    );
    let cut = |rows: &Vec<Vec<f64>>| rows[a.min(rows.len())..b.min(rows.len())].to_vec();
    CuePayload {
        fps: cues.fps,
        f2d: cut(&cues.f2d),
        gaze: cut(&cues.gaze),
        hp: cut(&cues.hp),
        au: cut(&cues.au),
    }
}

fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        cur.push(ch);
        if matches!(ch, '.' | '?' | '!') {
            let s = cur.trim().to_string();
            if !s.is_empty() {
                out.push(s);
            }
            cur.clear();
        }
    }
    let tail = cur.trim().to_string();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

/// Cut a long sample into synchronized windows. The trailing remainder is
/// kept only when it reaches the configured minimum. Aligned text is
/// distributed to windows by proportional duration at sentence boundaries.
pub fn window(sample: &Sample, cfg: &DataSection) -> Result<Vec<Sample>> {
    let dur_audio = sample.audio.as_ref().map(|a| a.duration_s());
    let dur_cues = sample.cues.as_ref().map(|c| c.duration_s());
    let duration = match (dur_audio, dur_cues) {
        (Some(a), Some(v)) => {
            let tol = 1.0 / sample.cues.as_ref().expect("cues present").fps;
            if (a - v).abs() > tol {
                return Err(Error::Data(format!(
                    "sample {}: modality durations misaligned ({a:.3}s audio vs {v:.3}s cues)",
                    sample.id
                )));
            }
            a.min(v)
        }
        (Some(a), None) => a,
        (None, Some(v)) => v,
        (None, None) => return Ok(vec![sample.clone()]),
    };
    if duration <= cfg.window_s {
        return Ok(vec![sample.clone()]);
    }
    let full = (duration / cfg.window_s).floor() as usize;
    let remainder = duration - full as f64 * cfg.window_s;
    let mut bounds: Vec<(f64, f64)> = (0..full)
        .map(|k| (k as f64 * cfg.window_s, (k + 1) as f64 * cfg.window_s))
        .collect();
    if remainder >= cfg.min_remainder_s {
        bounds.push((full as f64 * cfg.window_s, duration));
    }
    let retained: f64 = bounds.iter().map(|(a, b)| b - a).sum();
    let sentences = sample.text.as_deref().map(split_sentences).unwrap_or_default();
    let total_chars: usize = sentences.iter().map(|s| s.len()).sum();
    let mut out = Vec::with_capacity(bounds.len());
    for (k, (t0, t1)) in bounds.iter().enumerate() {
        let mut text_part = Vec::new();
        if total_chars > 0 {
            let mut consumed = 0usize;
            for s in &sentences {
                let mid = (consumed as f64 + s.len() as f64 / 2.0) / total_chars as f64;
                let pos = mid * retained;
                if pos >= *t0 && pos < *t1 {
                    text_part.push(s.clone());
                }
                consumed += s.len();
            }
        }
        out.push(Sample {
            id: format!("{}_w{}", sample.id, k),
            participant_id: sample.participant_id.clone(),
            scenario: sample.scenario,
            label: sample.label,
            split: sample.split,
            text: if text_part.is_empty() {
                None
            } else {
                Some(text_part.join(" "))
            },
            audio: sample.audio.as_ref().map(|a| slice_audio(a, *t0, *t1)),
            cues: sample.cues.as_ref().map(|c| slice_cues(c, *t0, *t1)),
            extra: sample.extra.clone(),
        });
    }
    Ok(out)
}

fn parse_qa_pairs(text: &str) -> Vec<(String, String)> {
    let mut pairs = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        let Some(rest) = line.strip_prefix("Q:") else {
            continue;
        };
        let Some(split_at) = rest.find("A:") else {
            continue;
        };
        let q = rest[..split_at].trim().to_string();
        let a = rest[split_at + 2..].trim().to_string();
        if !q.is_empty() && !a.is_empty() {
            pairs.push((q, a));
        }
    }
    pairs
}

/// Expand interview/questionnaire samples into one instance per QA pair.
/// Unparseable structured text passes through unsplit with a warning record.
pub fn qa_augment(samples: &[Sample]) -> (Vec<Sample>, Vec<String>) {
    let mut out = Vec::with_capacity(samples.len());
    let mut warnings = Vec::new();
    for s in samples {
        if !matches!(s.scenario, Scenario::Interview | Scenario::Questionnaire) {
            out.push(s.clone());
            continue;
        }
        let pairs = s.text.as_deref().map(parse_qa_pairs).unwrap_or_default();
        if pairs.is_empty() {
            warnings.push(format!("sample {}: no parseable QA structure", s.id));
            out.push(s.clone());
            continue;
        }
        for (k, (q, a)) in pairs.iter().enumerate() {
            let mut inst = s.clone();
            inst.id = format!("{}_q{}", s.id, k);
            inst.text = Some(format!("Q: {q} A: {a}"));
            out.push(inst);
        }
    }
    (out, warnings)
}

/// Balance the training split by recombining questions and answers across
/// depressive QA instances until class counts differ by at most one.
/// Originals are retained; the test split is rejected outright.
pub fn qa_recombine(train: &[Sample], seed: RngSeed) -> Result<Vec<Sample>> {
    if train.iter().any(|s| s.split == Split::Test) {
        return Err(Error::Data(
            "recombination applies to the training split only; the test split remains unchanged"
                .into(),
        ));
    }
    let dep = train.iter().filter(|s| s.label == 1).count();
    let ctl = train.len() - dep;
    if dep >= ctl || ctl - dep <= 1 {
        return Ok(train.to_vec());
    }
    let needed = ctl - dep;
    let pool: Vec<&Sample> = train
        .iter()
        .filter(|s| {
            s.label == 1
                && matches!(s.scenario, Scenario::Interview | Scenario::Questionnaire)
                && s.text.as_deref().map(parse_qa_pairs).unwrap_or_default().len() == 1
        })
        .collect();
    if pool.len() < 2 {
        return Err(Error::Data(format!(
            "need at least 2 depressive QA instances to recombine, found {}",
            pool.len()
        )));
    }
    let mut rng: SeededRng = seed.stream();
    let mut out = train.to_vec();
    let mut made = 0usize;
    let mut perm: Vec<usize> = (0..pool.len()).collect();
    let mut k = pool.len(); // trigger an initial shuffle
    while made < needed {
        if k >= pool.len() {
            rng.shuffle(&mut perm);
            k = 0;
        }
        let q_src = pool[perm[k]];
        let a_src = pool[perm[(k + 1) % perm.len()]];
        k += 1;
        let q_pairs = parse_qa_pairs(q_src.text.as_deref().unwrap_or_default());
        let a_pairs = parse_qa_pairs(a_src.text.as_deref().unwrap_or_default());
        let (Some((q_text, _)), Some((_, a_text))) =
            (q_pairs.first().cloned(), a_pairs.first().cloned())
        else {
            continue;
        };
        let mut inst = a_src.clone();
        inst.id = format!("{}_rc{}", a_src.id, made);
        inst.text = Some(format!("Q: {q_text} A: {a_text}"));
        out.push(inst);
        made += 1;
    }
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct PrepReport {
    pub warnings: Vec<String>,
    pub input_count: usize,
    pub output_count: usize,
}

/// Full preprocessing chain for one dataset: unify → window → QA-augment →
/// recombine (train only), with output ordered by sample id.
pub fn prep_dataset(
    samples: &[Sample],
    cfg: &DataSection,
    seed: RngSeed,
) -> Result<(Vec<Sample>, PrepReport)> {
    let mut report = PrepReport {
        input_count: samples.len(),
        ..PrepReport::default()
    };
    let mut staged = Vec::new();
    for s in samples {
        let unified = unify_params(s, cfg)?;
        staged.extend(window(&unified, cfg)?);
    }
    let (augmented, warnings) = qa_augment(&staged);
    report.warnings = warnings;
    let (train, test): (Vec<Sample>, Vec<Sample>) = augmented
        .into_iter()
        .partition(|s| s.split == Split::Train);
    let balanced = if train.is_empty() {
        train
    } else {
        let dep = train.iter().filter(|s| s.label == 1).count();
        let ctl = train.len() - dep;
        if dep < ctl && ctl - dep > 1 {
            match qa_recombine(&train, seed) {
                Ok(b) => b,
                Err(e) => {
                    // No recombinable instances (e.g. narration-only sets):
                    // keep the imbalance and record it.
                    report.warnings.push(format!("recombination skipped: {e}"));
                    train
                }
            }
        } else {
            train
        }
    };
    let mut out: Vec<Sample> = balanced.into_iter().chain(test).collect();
    out.sort_by(|a, b| a.id.cmp(&b.id));
    report.output_count = out.len();
    Ok((out, report))
}
