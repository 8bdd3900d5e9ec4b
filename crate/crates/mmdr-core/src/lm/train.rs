//! Two-stage training: supervised encoder pretraining on paired audio-video
//! samples, then adapter-stage fine-tuning of the language model with the
//! base decoder frozen.

use crate::audio::{AudioEncCache, AudioEncoder, MelFrames};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::fusion::{
    gate_merge_backward, gate_merge_cached, vafm_attend_backward,
    vafm_attend_cached, AttendCache, FusionParams, GateCache, ModalityTokens,
};
use crate::lm::model::LmModel;
use crate::tensor::{
    softmax_unchecked, Adam, AdamCfg, Linear, Matrix, Param, ParamGroup, RngSeed,
};
use crate::text::{Scenario, Vocab};
use crate::video::{CueSet, VideoEncCache, VideoEncoder};
use serde::{Deserialize, Serialize};

/// One sample after preprocessing: text plus cached modality features.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub id: String,
    pub participant_id: String,
    pub scenario: Scenario,
    pub label: u8,
    pub text: String,
    pub mel: Option<MelFrames>,
    pub cues: Option<CueSet>,
}

impl PreparedSample {
    pub fn answer_id(&self) -> u32 {
        if self.label == 1 {
            Vocab::DEP
        } else {
            Vocab::NODEP
        }
    }
}

/// Encoder pretraining assembly: both encoders, the fusion core, and a small
/// classification head on the merged (pre-projection) features.
pub struct PretrainModel {
    pub audio_enc: AudioEncoder,
    pub video_enc: VideoEncoder,
    pub fusion: FusionParams,
    pub classifier: Linear,
}

pub struct PretrainCache {
    audio: AudioEncCache,
    video: VideoEncCache,
    attend: AttendCache,
    gate: GateCache,
    pooled: Matrix,
    d_logits: Matrix,
}

impl ParamGroup for PretrainModel {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        self.audio_enc.visit("audio", f);
        self.video_enc.visit("video", f);
        self.fusion.visit("fusion", f);
        self.classifier.visit("classifier", f);
    }
}

impl PretrainModel {
    pub fn init(cfg: &Config, seed: RngSeed) -> Result<Self> {
        let mut rng = seed.stream();
        let audio_enc = AudioEncoder::init(
            cfg.encoders.clusters,
            cfg.encoders.n_mels,
            cfg.fusion.n_f,
            cfg.fusion.d_f,
            &mut rng,
        );
        let video_enc = VideoEncoder::init(
            cfg.encoders.cue_dims,
            cfg.encoders.d_cue,
            cfg.encoders.conv_width,
            cfg.fusion.n_f,
            cfg.fusion.d_f,
            cfg.encoders.share_cross_kv,
            &mut rng,
        );
        let fusion = FusionParams::init(
            cfg.fusion.n_f,
            cfg.fusion.d_f,
            cfg.model.d_llm,
            cfg.fusion.heads,
            cfg.fusion.merge_width,
            cfg.fusion.concat_heads,
            &mut rng,
        )?;
        let classifier = Linear::init(cfg.fusion.d_f, 2, &mut rng);
        Ok(PretrainModel {
            audio_enc,
            video_enc,
            fusion,
            classifier,
        })
    }

    /// Supervised depression-prediction loss on the merged features.
    pub fn forward_example(
        &self,
        mel: &MelFrames,
        cues: &CueSet,
        label: u8,
    ) -> Result<(f64, bool, PretrainCache)> {
        let (a_tok, a_cache) = self.audio_enc.forward_cached(mel)?;
        let (v_tok, v_cache) = self.video_enc.forward_cached(cues)?;
        let a = ModalityTokens::present(a_tok);
        let v = ModalityTokens::present(v_tok);
        let ((a_prime, v_prime), attend) = vafm_attend_cached(&a, &v, &self.fusion)?;
        let (merged, gate) = gate_merge_cached(&a_prime, &v_prime, &a, &v, &self.fusion)?;
        // Mean-pool the merged tokens, then classify.
        let n_f = merged.rows() as f64;
        let mut pooled = Matrix::zeros(1, merged.cols());
        for r in 0..merged.rows() {
            for c in 0..merged.cols() {
                let cur = pooled.at(0, c);
                pooled.set(0, c, cur + merged.at(r, c) / n_f);
            }
        }
        let logits = self.classifier.forward(&pooled);
        let probs = softmax_unchecked(logits.row(0));
        let gold = label as usize;
        let loss = -probs[gold].max(f64::MIN_POSITIVE).ln();
        let hit = if probs[1] > probs[0] { 1 } else { 0 } == gold;
        let mut d_logits = Matrix::zeros(1, 2);
        for c in 0..2 {
            d_logits.set(0, c, probs[c] - if c == gold { 1.0 } else { 0.0 });
        }
        Ok((
            loss,
            hit,
            PretrainCache {
                audio: a_cache,
                video: v_cache,
                attend,
                gate,
                pooled,
                d_logits,
            },
        ))
    }

    pub fn backward_example(&mut self, cache: &PretrainCache, scale: f64) {
        let d_logits = cache.d_logits.scale(scale);
        let d_pooled = self.classifier.backward(&cache.pooled, &d_logits);
        let n_f = self.fusion.n_f;
        let mut d_merged = Matrix::zeros(n_f, self.fusion.d_f);
        for r in 0..n_f {
            for c in 0..self.fusion.d_f {
                d_merged.set(r, c, d_pooled.at(0, c) / n_f as f64);
            }
        }
        let (d_a_prime, d_v_prime, d_a_gate, d_v_gate) =
            gate_merge_backward(&mut self.fusion, &cache.gate, &d_merged);
        let (mut d_a, mut d_v) =
            vafm_attend_backward(&mut self.fusion, &cache.attend, &d_a_prime, &d_v_prime);
        d_a.add_assign(&d_a_gate);
        d_v.add_assign(&d_v_gate);
        self.audio_enc.backward(&cache.audio, &d_a);
        self.video_enc.backward(&cache.video, &d_v);
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainTrace {
    /// Mean batch loss per optimizer step.
    pub loss: Vec<f64>,
    /// (step, full-train accuracy) at each evaluation point.
    pub accuracy: Vec<(usize, f64)>,
    pub steps_run: usize,
    pub final_train_acc: f64,
}

pub struct PretrainOutcome {
    pub model: PretrainModel,
    pub trace: TrainTrace,
}

/// Stage-1 pretraining over samples carrying both audio and video.
pub fn pretrain_encoders(
    samples: &[PreparedSample],
    cfg: &Config,
    seed: RngSeed,
) -> Result<PretrainOutcome> {
    let pairs: Vec<&PreparedSample> = samples
        .iter()
        .filter(|s| s.mel.is_some() && s.cues.is_some())
        .collect();
    if pairs.is_empty() {
        return Err(Error::Data("no paired audio-video samples for pretraining".into()));
    }
    let mut model = PretrainModel::init(cfg, seed.derive(&[0x11]))?;
    let pcfg = &cfg.train.pretrain;
    let steps_per_epoch = pairs.len().div_ceil(pcfg.batch);
    let mut opt = Adam::new(AdamCfg::new(pcfg.lr, 0.0, pcfg.epochs * steps_per_epoch));
    let mut shuffle_rng = seed.derive(&[0x12]).stream();
    let mut trace = TrainTrace {
        loss: Vec::new(),
        accuracy: Vec::new(),
        steps_run: 0,
        final_train_acc: 0.0,
    };
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for epoch in 0..pcfg.epochs {
        shuffle_rng.shuffle(&mut order);
        for chunk in order.chunks(pcfg.batch) {
            model.zero_grads();
            let mut total = 0.0;
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let s = pairs[i];
                let (l, _, cache) = model.forward_example(
                    s.mel.as_ref().expect("paired"),
                    s.cues.as_ref().expect("paired"),
                    s.label,
                )?;
                total += l * scale;
                model.backward_example(&cache, scale);
            }
            opt.apply(&mut model, &|_| true);
            trace.loss.push(total);
            trace.steps_run += 1;
        }
        let mut hits = 0usize;
        for s in &pairs {
            let (_, hit, _) = model.forward_example(
                s.mel.as_ref().expect("paired"),
                s.cues.as_ref().expect("paired"),
                s.label,
            )?;
            hits += hit as usize;
        }
        let acc = hits as f64 / pairs.len() as f64;
        trace.accuracy.push((trace.steps_run, acc));
        trace.final_train_acc = acc;
        if acc >= pcfg.early_stop_acc {
            let _ = epoch;
            break;
        }
    }
    Ok(PretrainOutcome { model, trace })
}

pub struct TrainOutcome {
    pub model: LmModel,
    pub optimizer: Adam,
    pub trace: TrainTrace,
}

/// Adapter-stage trainability rules from the config's freeze axes.
pub fn trainable_predicate(cfg: &Config) -> impl Fn(&str) -> bool {
    let t = cfg.train.clone();
    move |name: &str| {
        if name.starts_with("lora.") {
            true
        } else if name == "fusion.shared_w" {
            t.train_shared_w
        } else if name.starts_with("audio.adapter") || name.starts_with("video.adapter") {
            t.train_adapters
        } else if name.starts_with("audio.") || name.starts_with("video.") {
            t.train_encoders
        } else if name.starts_with("fusion.") {
            t.train_fusion_core
        } else if name.starts_with("decoder.") {
            t.train_decoder
        } else {
            false
        }
    }
}

fn full_train_accuracy(model: &LmModel, samples: &[PreparedSample]) -> Result<f64> {
    let mut hits = 0usize;
    for s in samples {
        let pred = model.predict_answer_argmax(
            s.scenario,
            &s.text,
            s.mel.as_ref(),
            s.cues.as_ref(),
        )?;
        hits += (pred == s.answer_id()) as usize;
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// Progress observer: (step, recent mean loss, full-train accuracy when
/// evaluated).
pub type Progress<'a> = &'a mut dyn FnMut(usize, f64, Option<f64>);

/// Stage-2 training: freeze the base decoder, optimize adapters, the shared
/// projection, and modality adapters on the answer-token objective.
pub fn train(
    samples: &[PreparedSample],
    cfg: &Config,
    seed: RngSeed,
    model: LmModel,
) -> Result<TrainOutcome> {
    train_with_progress(samples, cfg, seed, model, None)
}

pub fn train_with_progress(
    samples: &[PreparedSample],
    cfg: &Config,
    seed: RngSeed,
    mut model: LmModel,
    mut progress: Option<Progress<'_>>,
) -> Result<TrainOutcome> {
    if samples.is_empty() {
        return Err(Error::Data("no training samples".into()));
    }
    let lcfg = &cfg.train.lora;
    let mut lora_rng = seed.derive(&[0x21]).stream();
    model.decoder.attach_lora(
        &lcfg.targets,
        lcfg.rank,
        lcfg.alpha,
        lcfg.dropout,
        &mut lora_rng,
    );
    let trainable = trainable_predicate(cfg);
    let mut opt = Adam::new(AdamCfg::new(lcfg.lr, lcfg.warmup_frac, lcfg.max_steps));
    let mut shuffle_rng = seed.derive(&[0x22]).stream();
    let mut dropout_rng = seed.derive(&[0x23]).stream();
    let mut trace = TrainTrace {
        loss: Vec::new(),
        accuracy: Vec::new(),
        steps_run: 0,
        final_train_acc: 0.0,
    };
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut cursor = order.len(); // force an initial shuffle
    for step in 0..lcfg.max_steps {
        let mut batch = Vec::with_capacity(lcfg.batch);
        while batch.len() < lcfg.batch {
            if cursor >= order.len() {
                shuffle_rng.shuffle(&mut order);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        model.zero_grads();
        let mut total = 0.0;
        let scale = 1.0 / batch.len() as f64;
        for &i in &batch {
            let s = &samples[i];
            let (l, cache) = model.forward_example(
                s.scenario,
                &s.text,
                s.mel.as_ref(),
                s.cues.as_ref(),
                s.label,
                true,
                Some(&mut dropout_rng),
            )?;
            total += l * scale;
            model.backward_example(&cache, scale);
        }
        opt.apply(&mut model, &trainable);
        trace.loss.push(total);
        trace.steps_run = step + 1;
        if (step + 1) % lcfg.eval_every == 0 || step + 1 == lcfg.max_steps {
            let window = trace.loss.len().min(lcfg.eval_every.max(1));
            let recent: f64 =
                trace.loss[trace.loss.len() - window..].iter().sum::<f64>() / window as f64;
            if let Some(cb) = progress.as_deref_mut() {
                cb(step + 1, recent, None);
            }
            // The accuracy sweep is expensive; run it once the loss says the
            // answer distribution has sharpened (or at the step limit).
            if recent <= lcfg.target_train_loss || step + 1 == lcfg.max_steps {
                let acc = full_train_accuracy(&model, samples)?;
                trace.accuracy.push((step + 1, acc));
                trace.final_train_acc = acc;
                if let Some(cb) = progress.as_deref_mut() {
                    cb(step + 1, recent, Some(acc));
                }
                if acc >= lcfg.target_train_acc && recent <= lcfg.target_train_loss {
                    break;
                }
            }
        }
    }
    if trace.accuracy.is_empty() {
        let acc = full_train_accuracy(&model, samples)?;
        trace.accuracy.push((trace.steps_run, acc));
        trace.final_train_acc = acc;
    }
    Ok(TrainOutcome {
        model,
        optimizer: opt,
        trace,
    })
}
