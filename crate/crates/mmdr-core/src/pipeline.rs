//! End-to-end stage runners: synthesize → preprocess → pretrain → train →
//! evaluate → report. The command-line binary and the acceptance suite both
//! drive these.

use crate::audio::log_mel;
use crate::config::Config;
use crate::data::{
    prep_dataset, read_jsonl, synth, write_jsonl, GenSpec, Sample, Split,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, write_reports, EvalReport, ModalityConfig, ReportFormat};
use crate::lm::checkpoint::Checkpoint;
use crate::lm::model::LmModel;
use crate::lm::train::{pretrain_encoders, train_with_progress, PreparedSample, TrainTrace};
use crate::tensor::RngSeed;
use std::path::{Path, PathBuf};

/// Discover dataset files (`*.jsonl`) in sorted order; the stem names the
/// dataset.
pub fn list_datasets(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    let entries =
        std::fs::read_dir(dir).map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?;
        let path = entry.path();
        if path.extension().is_some_and(|e| e == "jsonl") {
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            out.push((stem, path));
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::Data(format!(
            "no .jsonl datasets under {}",
            dir.display()
        )));
    }
    Ok(out)
}

/// Convert stored samples into model-ready form, caching spectrogram frames
/// and cue matrices. Samples without usable text are skipped with a warning.
pub fn prepare_samples(
    samples: &[Sample],
    cfg: &Config,
) -> Result<(Vec<(Split, PreparedSample)>, Vec<String>)> {
    let mel_cfg = cfg.encoders.mel_cfg();
    let mut out = Vec::with_capacity(samples.len());
    let mut warnings = Vec::new();
    for s in samples {
        let Some(text) = s.text.as_ref().filter(|t| !t.trim().is_empty()) else {
            warnings.push(format!("sample {}: no text, skipped", s.id));
            continue;
        };
        let mel = match &s.audio {
            Some(a) => Some(log_mel(&a.as_waveform()?, &mel_cfg)?),
            None => None,
        };
        let cues = match &s.cues {
            Some(c) => {
                let set = c.to_cue_set()?;
                set.validate(&cfg.encoders.cue_dims)?;
                Some(set)
            }
            None => None,
        };
        out.push((
            s.split,
            PreparedSample {
                id: s.id.clone(),
                participant_id: s.participant_id.clone(),
                scenario: s.scenario,
                label: s.label,
                text: text.clone(),
                mel,
                cues,
            },
        ));
    }
    Ok((out, warnings))
}

pub fn run_synth(spec: &GenSpec, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let datasets = synth(spec)?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::Data(format!("{}: {e}", out_dir.display())))?;
    let mut paths = Vec::new();
    for d in datasets {
        let path = out_dir.join(format!("{}.jsonl", d.name));
        write_jsonl(&path, &d.samples)?;
        paths.push(path);
    }
    Ok(paths)
}

pub struct PrepSummary {
    pub datasets: Vec<(String, usize, usize)>,
    pub warnings: Vec<String>,
}

pub fn run_prep(in_dir: &Path, out_dir: &Path, cfg: &Config, seed: u64) -> Result<PrepSummary> {
    let mut summary = PrepSummary {
        datasets: Vec::new(),
        warnings: Vec::new(),
    };
    for (name, path) in list_datasets(in_dir)? {
        let samples = read_jsonl(&path)?;
        let (processed, report) =
            prep_dataset(&samples, &cfg.data, RngSeed(seed).derive(&[0x7e9]))?;
        write_jsonl(&out_dir.join(format!("{name}.jsonl")), &processed)?;
        summary
            .datasets
            .push((name, report.input_count, report.output_count));
        summary.warnings.extend(report.warnings);
    }
    Ok(summary)
}

fn load_all_prepared(
    data_dir: &Path,
    cfg: &Config,
) -> Result<Vec<(String, Vec<(Split, PreparedSample)>)>> {
    let mut out = Vec::new();
    for (name, path) in list_datasets(data_dir)? {
        let samples = read_jsonl(&path)?;
        let (prepared, _warnings) = prepare_samples(&samples, cfg)?;
        out.push((name, prepared));
    }
    Ok(out)
}

pub struct StageSummary {
    pub checkpoint: PathBuf,
    pub trace: TrainTrace,
}

/// Stage 1: pretrain encoders and fusion on paired train samples pooled from
/// every dataset.
pub fn run_pretrain(data_dir: &Path, cfg: &Config, seed: u64, out: &Path) -> Result<StageSummary> {
    let prepared = load_all_prepared(data_dir, cfg)?;
    let train_samples: Vec<PreparedSample> = prepared
        .iter()
        .flat_map(|(_, v)| v.iter())
        .filter(|(split, _)| *split == Split::Train)
        .map(|(_, p)| p.clone())
        .collect();
    let outcome = pretrain_encoders(&train_samples, cfg, RngSeed(seed))?;
    let mut model = outcome.model;
    let ckpt = Checkpoint::from_model(
        &mut model,
        cfg.hash(),
        cfg.canonical_json(),
        seed,
        outcome.trace.steps_run,
    );
    ckpt.save(out)?;
    Ok(StageSummary {
        checkpoint: out.to_path_buf(),
        trace: outcome.trace,
    })
}

/// Stage 2: build the language model, load pretrained encoders (or train
/// jointly when configured), and fit the adapters.
pub fn run_train(
    data_dir: &Path,
    cfg: &Config,
    seed: u64,
    encoders: Option<&Path>,
    out: &Path,
) -> Result<StageSummary> {
    let prepared = load_all_prepared(data_dir, cfg)?;
    let train_samples: Vec<PreparedSample> = prepared
        .iter()
        .flat_map(|(_, v)| v.iter())
        .filter(|(split, _)| *split == Split::Train)
        .map(|(_, p)| p.clone())
        .collect();
    let mut model = LmModel::init(cfg, RngSeed(seed))?;
    match encoders {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            ckpt.verify_hash(&cfg.hash())?;
            ckpt.restore_matching(&mut model, &|name| {
                name.starts_with("audio.") || name.starts_with("video.") || name.starts_with("fusion.")
            })?;
        }
        None => {
            if !cfg.train.joint {
                return Err(Error::Checkpoint(
                    "no encoder checkpoint given and joint training is disabled".into(),
                ));
            }
        }
    }
    let mut printer = |step: usize, loss: f64, acc: Option<f64>| match acc {
        Some(a) => eprintln!("step {step}: loss {loss:.4}, train acc {a:.3}"),
        None => eprintln!("step {step}: loss {loss:.4}"),
    };
    let outcome = train_with_progress(&train_samples, cfg, RngSeed(seed), model, Some(&mut printer))?;
    let mut model = outcome.model;
    let ckpt = Checkpoint::from_model(
        &mut model,
        cfg.hash(),
        cfg.canonical_json(),
        seed,
        outcome.trace.steps_run,
    )
    .with_optimizer(&outcome.optimizer);
    ckpt.save(out)?;
    Ok(StageSummary {
        checkpoint: out.to_path_buf(),
        trace: outcome.trace,
    })
}

/// Rebuild a model from a training checkpoint. The stored config governs the
/// architecture; a caller-provided config must hash-match.
pub fn load_model(ckpt_path: &Path, expect: Option<&Config>) -> Result<(LmModel, Config)> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let cfg: Config = serde_json::from_str(&ckpt.config_json)
        .map_err(|e| Error::Checkpoint(format!("stored config unreadable: {e}")))?;
    if let Some(expected) = expect {
        ckpt.verify_hash(&expected.hash())?;
    }
    let mut model = LmModel::init(&cfg, RngSeed(ckpt.seed))?;
    let lcfg = &cfg.train.lora;
    let mut lora_rng = RngSeed(ckpt.seed).derive(&[0x21]).stream();
    model.decoder.attach_lora(
        &lcfg.targets,
        lcfg.rank,
        lcfg.alpha,
        lcfg.dropout,
        &mut lora_rng,
    );
    ckpt.restore_into(&mut model)?;
    Ok((model, cfg))
}

/// Evaluate every dataset's test split under one modality configuration and
/// write one canonical JSON per dataset.
pub fn run_eval(
    ckpt_path: &Path,
    data_dir: &Path,
    mc: ModalityConfig,
    expect: Option<&Config>,
    out_dir: &Path,
    seed: u64,
) -> Result<Vec<EvalReport>> {
    let (model, cfg) = load_model(ckpt_path, expect)?;
    let prepared = load_all_prepared(data_dir, &cfg)?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::Data(format!("{}: {e}", out_dir.display())))?;
    let mut reports = Vec::new();
    for (name, samples) in prepared {
        let report = evaluate(&model, &name, &samples, mc, &cfg, seed)?;
        let file = out_dir.join(format!(
            "eval_{name}_{}.json",
            mc.label().replace('+', "_")
        ));
        let value = serde_json::to_value(&report)?;
        let mut text = serde_json::to_string_pretty(&value)?;
        text.push('\n');
        std::fs::write(&file, text)?;
        reports.push(report);
    }
    Ok(reports)
}

/// Collect `eval_*.json` files and emit the combined report files.
pub fn run_report(in_dir: &Path, out_dir: &Path, formats: &[ReportFormat]) -> Result<Vec<PathBuf>> {
    let mut reports = Vec::new();
    let mut files: Vec<PathBuf> = std::fs::read_dir(in_dir)
        .map_err(|e| Error::Data(format!("{}: {e}", in_dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("eval_") && n.ends_with(".json"))
        })
        .collect();
    files.sort();
    for f in files {
        let text =
            std::fs::read_to_string(&f).map_err(|e| Error::Data(format!("{}: {e}", f.display())))?;
        let report: EvalReport = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", f.display())))?;
        reports.push(report);
    }
    write_reports(&reports, out_dir, formats)
}

/// Per-segment inference dump: one JSON line per input sample.
pub fn run_infer(ckpt_path: &Path, input: &Path, out: &Path, seed: u64) -> Result<usize> {
    let (model, cfg) = load_model(ckpt_path, None)?;
    let samples = read_jsonl(input)?;
    let (prepared, _warnings) = prepare_samples(&samples, &cfg)?;
    let decode_cfg = cfg.eval.decode_cfg();
    let mut lines = Vec::with_capacity(prepared.len());
    for (_, p) in &prepared {
        let mut rng = RngSeed(seed).derive(&[p.id.len() as u64]).stream();
        let pred = model.predict(
            p.scenario,
            &p.text,
            p.mel.as_ref(),
            p.cues.as_ref(),
            &decode_cfg,
            &mut rng,
        )?;
        let value = serde_json::json!({
            "id": p.id,
            "participant_id": p.participant_id,
            "response": pred.response,
            "label": pred.label,
            "path": pred.path,
        });
        lines.push(serde_json::to_string(&value)?);
    }
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| Error::Data(format!("{}: {e}", parent.display())))?;
    }
    std::fs::write(out, lines.join("\n") + "\n")?;
    Ok(lines.len())
}
