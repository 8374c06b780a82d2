//! Joint training of the animator and lip reader against a frozen speech
//! recognizer.
//!
//! Per sample: audio → recognizer gives latents and a pseudo-transcript;
//! audio → animator gives offsets Ŷ; Ŷ → lip reader gives latents and text
//! scores. The weighted sum of reconstruction, velocity, latent and CTC
//! losses is minimised with Adam; lip-reader losses reach the animator
//! through Ŷ.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::facial_animator::{AnimatorConfig, EncoderInput, EncoderKind, FacialAnimator};
use crate::lip_reading::{LipReader, LipReaderConfig};
use crate::losses::{ctc_min_frames, graph, total_loss, LatentNormalization, LossBreakdown, LossComponents, LossWeights};
use crate::mesh_corpus::{align_to_fps, AudioClip, CorpusSample, FaceMesh, Transcript, VertexSequence, Vocabulary};
use crate::metrics::{char_accuracy, lrp, lve, LveAggregation, DEFAULT_MU};
use crate::nn::{BindMode, ParamStore};
use crate::optim::{Adam, AdamConfig};
use crate::scalar::Scalar;
use crate::speech_recognizer::{greedy_ctc_decode, RecognizerOutput, SpeechRecognizer, TextDistribution};
use crate::tensor::Matrix;

/// Optional phase in which the lip reader reads ground-truth offsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Warmup {
    #[default]
    None,
    /// The first `epochs` epochs feed Y instead of Ŷ to the lip reader.
    LipreaderOnGt { epochs: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub warmup: Warmup,
    pub latent_normalization: LatentNormalization,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// A numbered checkpoint is written every this many epochs and after the
    /// last one.
    pub checkpoint_every: usize,
    /// LRP threshold for the per-epoch validation snapshot.
    pub mu: f64,
    /// Informational only; everything runs on the CPU.
    pub device: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            lr: adam.lr,
            batch_size: 1,
            epochs: 250,
            seed: 0,
            weights: LossWeights::default(),
            warmup: Warmup::None,
            latent_normalization: LatentNormalization::FeatureMean,
            adam_beta1: adam.beta1,
            adam_beta2: adam.beta2,
            adam_eps: adam.eps,
            checkpoint_every: 50,
            mu: DEFAULT_MU,
            device: "cpu".into(),
        }
    }
}

impl TrainConfig {
    /// Schedule for corpora of a few clips, where 250 epochs amount to only a
    /// few thousand steps: learning rate 3e-4, β₂ = 0.98 and a 100-epoch
    /// warmup in which the lip reader reads ground-truth offsets.
    pub fn desk_scale() -> Self {
        Self {
            lr: 3e-4,
            adam_beta2: 0.98,
            warmup: Warmup::LipreaderOnGt { epochs: 100 },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config("epochs, batch_size and checkpoint_every must be at least 1".into()));
        }
        if !(self.mu > 0.0) {
            return Err(Error::Config(format!("mu must be positive, got {}", self.mu)));
        }
        self.weights.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    fn lips_on_gt(&self, epoch: usize) -> bool {
        matches!(self.warmup, Warmup::LipreaderOnGt { epochs } if epoch < epochs)
    }
}

/// Architecture of a full model; stored in every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub animator: AnimatorConfig,
    pub lip_reader: LipReaderConfig,
    pub vocabulary: Vocabulary,
    /// Width of the recognizer latents the lip reader is matched against.
    pub recognizer_latent_dim: usize,
    pub seed: u64,
}

/// Animator and lip reader sharing one parameter store.
#[derive(Debug, Clone)]
pub struct SelfTalk<S> {
    config: ModelConfig,
    pub store: ParamStore<S>,
    animator: FacialAnimator,
    lip_reader: LipReader,
    template: FaceMesh<S>,
}

/// Result of running a trained model on one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference<S> {
    pub offsets: VertexSequence<S>,
    pub lip_text: TextDistribution<S>,
    pub lip_transcript: Transcript,
    pub recognizer_transcript: Transcript,
}

impl<S: Scalar> SelfTalk<S> {
    pub fn new(config: ModelConfig, template: FaceMesh<S>) -> Result<Self> {
        let mut store = ParamStore::new();
        let animator = FacialAnimator::new(&mut store, config.animator.clone(), config.seed)?;
        animator.check_template(&template)?;
        let lip_reader = LipReader::new(
            &mut store,
            config.lip_reader.clone(),
            config.vocabulary.clone(),
            &template,
            config.recognizer_latent_dim,
            config.seed.wrapping_add(1),
        )?;
        Ok(Self {
            config,
            store,
            animator,
            lip_reader,
            template,
        })
    }

    /// Rebuilds the model recorded in `checkpoint` and loads its parameters.
    pub fn from_checkpoint(checkpoint: &Checkpoint<S>, template: FaceMesh<S>) -> Result<Self> {
        let config = model_config_from_meta(&checkpoint.meta)?;
        let mut model = Self::new(config, template)?;
        model.store.load_values(&checkpoint.values())?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn animator(&self) -> &FacialAnimator {
        &self.animator
    }

    pub fn lip_reader(&self) -> &LipReader {
        &self.lip_reader
    }

    pub fn template(&self) -> &FaceMesh<S> {
        &self.template
    }

    pub fn checkpoint(&self, epoch: usize, step: u64, optimizer: Option<Adam<S>>, meta: serde_json::Value) -> Result<Checkpoint<S>> {
        let mut meta = match meta {
            serde_json::Value::Object(m) => m,
            serde_json::Value::Null => serde_json::Map::new(),
            other => return Err(Error::Checkpoint(format!("checkpoint meta must be an object, got {other}"))),
        };
        meta.insert("model".into(), serde_json::to_value(&self.config)?);
        Ok(Checkpoint {
            epoch,
            step,
            store: self.store.clone(),
            optimizer,
            meta: serde_json::Value::Object(meta),
        })
    }

    /// Encoder input for `audio`; the adapter encoder reads the recognizer
    /// latents, the spectrogram encoder ignores them.
    pub fn encoder_input(&self, audio: &AudioClip, recognized: &RecognizerOutput) -> Result<EncoderInput<S>> {
        match self.animator.config().encoder_kind {
            EncoderKind::MockConv => self.animator.audio_input(audio),
            EncoderKind::ExternalAsrAdapter => self.animator.latent_input(&recognized.latents, audio),
        }
    }

    pub fn infer(&self, audio: &AudioClip, recognizer: &dyn SpeechRecognizer) -> Result<Inference<S>> {
        let recognized = recognizer.recognize(audio)?;
        let input = self.encoder_input(audio, &recognized)?;
        let offsets = self.animator.animate_input(&self.store, &input, &self.template)?;
        let (_, lip_text, lip_transcript) = self.lip_reader.lipread(&self.store, &offsets, &self.template)?;
        Ok(Inference {
            offsets,
            lip_text,
            lip_transcript,
            recognizer_transcript: recognized.transcript,
        })
    }
}

/// Reads the `model` entry written by [`SelfTalk::checkpoint`].
pub fn model_config_from_meta(meta: &serde_json::Value) -> Result<ModelConfig> {
    let model = meta
        .get("model")
        .ok_or_else(|| Error::Checkpoint("checkpoint has no model configuration".into()))?;
    Ok(serde_json::from_value(model.clone())?)
}

/// A sample with every frozen-recognizer quantity computed once.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample<S> {
    pub id: String,
    pub input: EncoderInput<S>,
    /// Ground truth retimed to the animator frame rate, `T × 3V`.
    pub target: VertexSequence<S>,
    /// Recognizer latents on the same `T` frames.
    pub audio_latents: Matrix<S>,
    pub pseudo_transcript: Transcript,
    pub pseudo_target: Vec<usize>,
}

impl<S: Scalar> PreparedSample<S> {
    pub fn frames(&self) -> usize {
        self.target.frames()
    }

    /// Whether some alignment of `T` frames collapses to the pseudo-target.
    pub fn ctc_feasible(&self) -> bool {
        ctc_min_frames(&self.pseudo_target) <= self.frames()
    }
}

pub fn prepare_sample<S: Scalar>(
    model: &SelfTalk<S>,
    recognizer: &dyn SpeechRecognizer,
    sample: &CorpusSample<S>,
) -> Result<PreparedSample<S>> {
    let fps = model.animator.config().fps;
    sample.gt_offsets.check_mesh(&model.template).map_err(|e| {
        Error::ShapeMismatch(format!("sample {}: {e}", sample.sample_id))
    })?;
    let recognized = recognizer.recognize(&sample.audio)?;
    let input = model.encoder_input(&sample.audio, &recognized)?;
    let target = align_to_fps(&sample.gt_offsets, &sample.audio, fps);
    let (latents, _) = recognized.at_fps(target.frames(), fps);
    let pseudo_target = model.config.vocabulary.encode(&recognized.transcript)?;
    Ok(PreparedSample {
        id: sample.sample_id.clone(),
        input,
        target,
        audio_latents: latents.values().cast(),
        pseudo_transcript: recognized.transcript,
        pseudo_target,
    })
}

/// Graph values of one sample's losses.
struct SampleGraph {
    total: Var,
    breakdown: LossBreakdown,
}

fn build_losses<S: Scalar>(
    model: &SelfTalk<S>,
    tape: &mut Tape<S>,
    p: &crate::nn::Bound,
    sample: &PreparedSample<S>,
    weights: &LossWeights,
    norm: LatentNormalization,
    lips_on_gt: bool,
) -> SampleGraph {
    let v = model.template.vertex_count();
    let y_hat = model.animator.forward(tape, p, &sample.input);
    let y = tape.constant(sample.target.offsets().clone());
    let rec = graph::rec(tape, y, y_hat, v);
    let vel = graph::vel(tape, y, y_hat, v);
    let lips_input = if lips_on_gt { y } else { y_hat };
    let out = model.lip_reader.forward(tape, p, lips_input);
    let audio = tape.constant(sample.audio_latents.clone());
    let lat = graph::lat(tape, audio, out.latents, norm);
    let ctc = sample
        .ctc_feasible()
        .then(|| graph::ctc(tape, out.logits, &sample.pseudo_target, model.config.vocabulary.blank_index()))
        .filter(|&c| tape.value(c).item().is_finite());

    let value = |tape: &Tape<S>, x: Var| tape.value(x).item().to_f64().unwrap();
    let breakdown = total_loss(
        LossComponents {
            rec: value(tape, rec),
            vel: value(tape, vel),
            lat: value(tape, lat),
            ctc: ctc.map_or(f64::INFINITY, |c| value(tape, c)),
        },
        weights,
    );
    let mut total = tape.scale(rec, S::lit(weights.rec));
    for (term, w) in [(Some(vel), weights.vel), (Some(lat), weights.lat), (ctc, weights.ctc)] {
        if let Some(term) = term {
            let scaled = tape.scale(term, S::lit(w));
            total = tape.add(total, scaled);
        }
    }
    SampleGraph { total, breakdown }
}

/// Loss values of one sample without updating anything.
pub fn evaluate_losses<S: Scalar>(
    model: &SelfTalk<S>,
    sample: &PreparedSample<S>,
    cfg: &TrainConfig,
    lips_on_gt: bool,
) -> LossBreakdown {
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape, BindMode::Inference);
    build_losses(model, &mut tape, &p, sample, &cfg.weights, cfg.latent_normalization, lips_on_gt).breakdown
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub samples: Vec<String>,
    /// Mean over the samples of the batch that were not skipped.
    pub loss: Option<LossBreakdown>,
    pub skipped_samples: usize,
    pub ctc_skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_total: f64,
    pub val_lve: f64,
    pub val_lrp: f64,
    pub val_char_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step(StepRecord),
    Epoch(EpochRecord),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
    pub skipped_ctc: usize,
    pub skipped_steps: usize,
    pub recognizer_digest_before: String,
    pub recognizer_digest_after: String,
    pub wall_seconds: f64,
}

impl TrainLog {
    pub fn steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Step(s) => Some(s),
            LogRecord::Epoch(_) => None,
        })
    }

    pub fn epochs(&self) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Epoch(e) => Some(e),
            LogRecord::Step(_) => None,
        })
    }

    /// One JSON object per line; wall time is left out so that seeded runs
    /// produce identical logs.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut log = Self::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let record: LogRecord = serde_json::from_str(line)?;
            if let LogRecord::Step(s) = &record {
                log.skipped_ctc += s.ctc_skipped;
                log.skipped_steps += usize::from(s.loss.is_none());
            }
            log.records.push(record);
        }
        Ok(log)
    }
}

/// One optimizer step over `batch`, gradients averaged over the samples
/// whose loss is finite. Returns the step record (without step and epoch).
pub fn train_step<S: Scalar>(
    model: &mut SelfTalk<S>,
    optimizer: &mut Adam<S>,
    batch: &[&PreparedSample<S>],
    cfg: &TrainConfig,
    lips_on_gt: bool,
) -> StepRecord {
    let mut summed: Option<Vec<Option<Matrix<S>>>> = None;
    let mut losses = Vec::new();
    let mut skipped = 0;
    let mut ctc_skipped = 0;
    for sample in batch {
        let mut tape = Tape::new();
        let p = model.store.bind(&mut tape, BindMode::Train);
        let g = build_losses(model, &mut tape, &p, sample, &cfg.weights, cfg.latent_normalization, lips_on_gt);
        if g.breakdown.ctc_skipped() {
            ctc_skipped += 1;
        }
        if !g.breakdown.total.is_finite() || !tape.value(g.total).item().is_finite() {
            skipped += 1;
            continue;
        }
        let mut grads = tape.backward(g.total);
        let grads = p.take_grads(&mut grads);
        if grads.iter().flatten().any(|m| !m.all_finite()) {
            skipped += 1;
            continue;
        }
        summed = Some(match summed {
            None => grads,
            Some(mut acc) => {
                for (a, g) in acc.iter_mut().zip(grads) {
                    match (a.as_mut(), g) {
                        (Some(a), Some(g)) => a.add_assign(&g),
                        (None, Some(g)) => *a = Some(g),
                        _ => {}
                    }
                }
                acc
            }
        });
        losses.push(g.breakdown);
    }
    if let Some(mut grads) = summed {
        let k = S::lit(losses.len() as f64);
        for g in grads.iter_mut().flatten() {
            *g = g.map(|x| x / k);
        }
        optimizer.update(&mut model.store, &grads);
    }
    StepRecord {
        step: 0,
        epoch: 0,
        samples: batch.iter().map(|s| s.id.clone()).collect(),
        loss: mean_breakdown(&losses),
        skipped_samples: skipped,
        ctc_skipped,
    }
}

fn mean_breakdown(losses: &[LossBreakdown]) -> Option<LossBreakdown> {
    if losses.is_empty() {
        return None;
    }
    let n = losses.len() as f64;
    let mean = |f: fn(&LossBreakdown) -> f64| losses.iter().map(f).sum::<f64>() / n;
    let ctc: Vec<f64> = losses.iter().filter_map(|l| l.ctc).collect();
    Some(LossBreakdown {
        rec: mean(|l| l.rec),
        vel: mean(|l| l.vel),
        lat: mean(|l| l.lat),
        ctc: (!ctc.is_empty()).then(|| ctc.iter().sum::<f64>() / ctc.len() as f64),
        total: mean(|l| l.total),
    })
}

/// Per-sample outputs of the current model on prepared samples.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleEvaluation<S> {
    pub id: String,
    pub predicted: VertexSequence<S>,
    pub lip_transcript: Transcript,
    pub char_accuracy: f64,
}

pub fn evaluate_prepared<S: Scalar>(model: &SelfTalk<S>, sample: &PreparedSample<S>) -> Result<SampleEvaluation<S>> {
    let predicted = model.animator.animate_input(&model.store, &sample.input, &model.template)?;
    let (_, dist, _) = model.lip_reader.lipread(&model.store, &predicted, &model.template)?;
    let lip_transcript = greedy_ctc_decode(&dist, &model.config.vocabulary);
    let char_accuracy = char_accuracy(sample.pseudo_transcript.text(), lip_transcript.text());
    Ok(SampleEvaluation {
        id: sample.id.clone(),
        predicted,
        lip_transcript,
        char_accuracy,
    })
}

fn snapshot<S: Scalar>(model: &SelfTalk<S>, samples: &[PreparedSample<S>], mu: f64, epoch: usize, mean_total: f64) -> Result<EpochRecord> {
    let (mut l, mut r, mut a) = (0.0, 0.0, 0.0);
    for s in samples {
        let e = evaluate_prepared(model, s)?;
        l += lve(&s.target, &e.predicted, &model.template, LveAggregation::Max)?;
        r += lrp(&s.target, &e.predicted, &model.template, mu)?;
        a += e.char_accuracy;
    }
    let n = samples.len() as f64;
    Ok(EpochRecord {
        epoch,
        mean_total,
        val_lve: l / n,
        val_lrp: r / n,
        val_char_accuracy: a / n,
    })
}

/// Where and how [`train`] writes its artifacts.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOutput<'a> {
    pub dir: Option<&'a Path>,
    /// Written as `config.json` next to every parameter archive.
    pub snapshot: Option<&'a serde_json::Value>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<S> {
    pub log: TrainLog,
    pub optimizer: Adam<S>,
    /// Completed epochs, counting those before a resume.
    pub epochs: usize,
    pub steps: u64,
    pub best_epoch: Option<usize>,
    pub best_val_lve: f64,
}

fn write_checkpoint_dir<S: Scalar>(
    dir: &Path,
    model: &SelfTalk<S>,
    epoch: usize,
    step: u64,
    optimizer: &Adam<S>,
    best_val_lve: f64,
    log: &TrainLog,
    snapshot: Option<&serde_json::Value>,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = serde_json::json!({ "best_val_lve": best_val_lve });
    model
        .checkpoint(epoch, step, Some(optimizer.clone()), meta)?
        .save(dir.join("params.stck"))?;
    let default_snapshot;
    let snapshot = match snapshot {
        Some(s) => s,
        None => {
            default_snapshot = serde_json::json!({ "model": model.config });
            &default_snapshot
        }
    };
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(snapshot)?).map_err(|e| Error::io(&path, e))?;
    let path = dir.join("train_log.jsonl");
    let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
    w.write_all(log.to_jsonl()?.as_bytes()).map_err(|e| Error::io(&path, e))?;
    w.flush().map_err(|e| Error::io(&path, e))
}

/// Epoch `e` visits the samples in an order drawn from stream `e` of the
/// seeded generator, so a resumed run shuffles exactly like an
/// uninterrupted one.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Trains `model` in place.
///
/// `validation` drives the per-epoch snapshot and best-checkpoint choice;
/// when empty the training samples are used. With `resume`, parameters,
/// optimizer state and counters are restored from the checkpoint and
/// training continues at the next epoch.
pub fn train<S: Scalar>(
    model: &mut SelfTalk<S>,
    recognizer: &dyn SpeechRecognizer,
    train_samples: &[CorpusSample<S>],
    validation: &[CorpusSample<S>],
    cfg: &TrainConfig,
    output: TrainOutput<'_>,
    resume: Option<&Checkpoint<S>>,
) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    if train_samples.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    if recognizer.vocabulary() != &model.config.vocabulary {
        return Err(Error::Config("recognizer and lip reader use different vocabularies".into()));
    }
    if recognizer.latent_dim() != model.config.recognizer_latent_dim {
        return Err(Error::Config(format!(
            "recognizer latents have width {}, model expects {}",
            recognizer.latent_dim(),
            model.config.recognizer_latent_dim
        )));
    }
    let started = Instant::now();
    let digest_before = recognizer.parameter_digest();
    let prepared = train_samples
        .iter()
        .map(|s| prepare_sample(model, recognizer, s))
        .collect::<Result<Vec<_>>>()?;
    let held_out = validation
        .iter()
        .map(|s| prepare_sample(model, recognizer, s))
        .collect::<Result<Vec<_>>>()?;
    let val = if held_out.is_empty() { &prepared } else { &held_out };

    let (mut optimizer, start_epoch, mut step, mut best_val_lve) = match resume {
        Some(ck) => {
            let config = model_config_from_meta(&ck.meta)?;
            if config != model.config {
                return Err(Error::Checkpoint("checkpoint was written for a different model".into()));
            }
            model.store.load_values(&ck.values())?;
            let mut adam = ck
                .optimizer
                .clone()
                .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state to resume from".into()))?;
            adam.config = cfg.adam();
            let best = ck.meta.get("best_val_lve").and_then(|v| v.as_f64()).unwrap_or(f64::INFINITY);
            (adam, ck.epoch, ck.step, best)
        }
        None => (Adam::new(cfg.adam(), &model.store), 0, 0, f64::INFINITY),
    };
    let mut best_epoch = None;
    let mut log = TrainLog {
        recognizer_digest_before: digest_before,
        ..TrainLog::default()
    };

    for epoch in start_epoch..cfg.epochs {
        let order = epoch_order(cfg.seed, epoch, prepared.len());
        let lips_on_gt = cfg.lips_on_gt(epoch);
        let mut totals = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PreparedSample<S>> = chunk.iter().map(|&i| &prepared[i]).collect();
            let mut record = train_step(model, &mut optimizer, &batch, cfg, lips_on_gt);
            step += 1;
            record.step = step;
            record.epoch = epoch + 1;
            log.skipped_ctc += record.ctc_skipped;
            match &record.loss {
                Some(l) => totals.push(l.total),
                None => log.skipped_steps += 1,
            }
            log.records.push(LogRecord::Step(record));
        }
        let mean_total = if totals.is_empty() { f64::NAN } else { totals.iter().sum::<f64>() / totals.len() as f64 };
        let record = snapshot(model, val, cfg.mu, epoch + 1, mean_total)?;
        let improved = record.val_lve < best_val_lve;
        if improved {
            best_val_lve = record.val_lve;
            best_epoch = Some(epoch + 1);
        }
        log.records.push(LogRecord::Epoch(record));

        if let Some(dir) = output.dir {
            let done = epoch + 1;
            if done % cfg.checkpoint_every == 0 || done == cfg.epochs {
                let d = dir.join(format!("ckpt_epoch_{done}"));
                write_checkpoint_dir(&d, model, done, step, &optimizer, best_val_lve, &log, output.snapshot)?;
            }
            if improved {
                let d = dir.join("best");
                write_checkpoint_dir(&d, model, done, step, &optimizer, best_val_lve, &log, output.snapshot)?;
            }
        }
    }

    log.recognizer_digest_after = recognizer.parameter_digest();
    log.wall_seconds = started.elapsed().as_secs_f64();
    Ok(TrainOutcome {
        log,
        optimizer,
        epochs: cfg.epochs.max(start_epoch),
        steps: step,
        best_epoch,
        best_val_lve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh_corpus::{generate_synthetic_corpus, SynthConfig, SyntheticCorpus};
    use crate::speech_recognizer::MockRecognizer;

    fn corpus(samples: usize) -> SyntheticCorpus<f64> {
        let cfg = SynthConfig {
            samples,
            tokens_per_sample: 2,
            ..SynthConfig::default()
        };
        generate_synthetic_corpus(&cfg, 5).unwrap()
    }

    fn tiny_model(corpus: &SyntheticCorpus<f64>, latent_dim: usize) -> SelfTalk<f64> {
        let config = ModelConfig {
            animator: AnimatorConfig {
                feature_dim: 16,
                decoder_layers: 1,
                heads: 2,
                ffn_dim: 32,
                frontend_channels: 16,
                vertices: corpus.template.vertex_count(),
                ..AnimatorConfig::default()
            },
            lip_reader: LipReaderConfig {
                embed_dim: latent_dim,
                encoder_layers: 1,
                heads: 2,
                ffn_dim: 32,
                vocab_size: corpus.vocabulary.len(),
                ..LipReaderConfig::default()
            },
            vocabulary: corpus.vocabulary.clone(),
            recognizer_latent_dim: latent_dim,
            seed: 11,
        };
        SelfTalk::new(config, corpus.template.clone()).unwrap()
    }

    fn setup(samples: usize) -> (SyntheticCorpus<f64>, MockRecognizer, SelfTalk<f64>) {
        let c = corpus(samples);
        let rec = MockRecognizer::for_corpus(&c, 8, 2).unwrap();
        let model = tiny_model(&c, 8);
        (c, rec, model)
    }

    fn quick(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            lr: 1e-3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn one_epoch_logs_one_step_per_sample() {
        let (c, rec, mut model) = setup(2);
        let out = train(&mut model, &rec, &c.samples, &[], &quick(1), TrainOutput::default(), None).unwrap();
        assert_eq!(out.log.steps().count(), 2);
        assert_eq!(out.log.epochs().count(), 1);
        assert_eq!(out.steps, 2);
        let steps: Vec<u64> = out.log.steps().map(|s| s.step).collect();
        assert_eq!(steps, vec![1, 2]);
    }

    #[test]
    fn batches_share_one_step() {
        let (c, rec, mut model) = setup(3);
        let cfg = TrainConfig { batch_size: 2, ..quick(1) };
        let out = train(&mut model, &rec, &c.samples, &[], &cfg, TrainOutput::default(), None).unwrap();
        let sizes: Vec<usize> = out.log.steps().map(|s| s.samples.len()).collect();
        assert_eq!(sizes, vec![2, 1]);
    }

    #[test]
    fn seeded_runs_are_identical_and_recognizer_stays_frozen() {
        let (c, rec, model) = setup(2);
        let run = || {
            let mut m = model.clone();
            let out = train(&mut m, &rec, &c.samples, &[], &quick(2), TrainOutput::default(), None).unwrap();
            (m.store, out.log.to_jsonl().unwrap(), out.log)
        };
        let (a, la, log) = run();
        let (b, lb, _) = run();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert_eq!(log.recognizer_digest_before, log.recognizer_digest_after);
        assert_ne!(a, model.store);
    }

    #[test]
    fn resume_continues_like_an_uninterrupted_run() {
        let (c, rec, model) = setup(2);
        let dir = tempfile::tempdir().unwrap();
        let mut full = model.clone();
        let whole = train(&mut full, &rec, &c.samples, &[], &quick(3), TrainOutput::default(), None).unwrap();

        let mut first = model.clone();
        let cfg = TrainConfig { checkpoint_every: 1, ..quick(2) };
        let out = TrainOutput { dir: Some(dir.path()), snapshot: None };
        train(&mut first, &rec, &c.samples, &[], &cfg, out, None).unwrap();
        let ck = Checkpoint::load(dir.path().join("ckpt_epoch_2/params.stck")).unwrap();
        assert_eq!(ck.epoch, 2);
        let mut resumed = SelfTalk::from_checkpoint(&ck, c.template.clone()).unwrap();
        let rest = train(&mut resumed, &rec, &c.samples, &[], &quick(3), TrainOutput::default(), Some(&ck)).unwrap();

        let tail: Vec<&StepRecord> = whole.log.steps().skip(4).collect();
        let again: Vec<&StepRecord> = rest.log.steps().collect();
        assert_eq!(tail, again);
        assert_eq!(full.store, resumed.store);
        for f in ["config.json", "train_log.jsonl", "params.stck"] {
            assert!(dir.path().join("ckpt_epoch_1").join(f).exists());
        }
        assert!(dir.path().join("best/params.stck").exists());
        let text = std::fs::read_to_string(dir.path().join("ckpt_epoch_2/train_log.jsonl")).unwrap();
        assert_eq!(TrainLog::from_jsonl(&text).unwrap().steps().count(), 4);
    }

    #[test]
    fn wiring_errors_fail_before_training() {
        let (c, rec, mut model) = setup(1);
        let wrong = MockRecognizer::for_corpus(&c, 4, 2).unwrap();
        assert!(train(&mut model, &wrong, &c.samples, &[], &quick(1), TrainOutput::default(), None).is_err());
        let mut bad = c.samples[0].clone();
        bad.gt_offsets = VertexSequence::zeros(bad.gt_offsets.frames(), 7, 25.0).unwrap();
        assert!(train(&mut model, &rec, &[bad], &[], &quick(1), TrainOutput::default(), None).is_err());
        assert!(train(&mut model, &rec, &[], &[], &quick(1), TrainOutput::default(), None).is_err());
        assert!(train(&mut model, &rec, &c.samples, &[], &TrainConfig { lr: 0.0, ..quick(1) }, TrainOutput::default(), None).is_err());
    }

    #[test]
    fn infeasible_ctc_targets_are_dropped() {
        let (c, rec, model) = setup(1);
        let mut p = prepare_sample(&model, &rec, &c.samples[0]).unwrap();
        p.pseudo_target = vec![1; 200];
        let b = evaluate_losses(&model, &p, &TrainConfig::default(), false);
        assert!(b.ctc_skipped());
        assert!(b.total.is_finite());
        let mut m = model.clone();
        let mut adam = Adam::new(AdamConfig::default(), &m.store);
        let record = train_step(&mut m, &mut adam, &[&p], &TrainConfig::default(), false);
        assert_eq!(record.ctc_skipped, 1);
        assert!(record.loss.unwrap().ctc.is_none());
    }

    #[test]
    fn breakdown_matches_weighted_sum() {
        let (c, rec, model) = setup(1);
        let p = prepare_sample(&model, &rec, &c.samples[0]).unwrap();
        let w = LossWeights::default();
        let b = evaluate_losses(&model, &p, &TrainConfig::default(), false);
        let expected = w.rec * b.rec + w.vel * b.vel + w.lat * b.lat + w.ctc * b.ctc.unwrap();
        assert!((b.total - expected).abs() < 1e-9);
        assert!(b.lat > 0.0 && b.ctc.unwrap() > 0.0);
    }

    #[test]
    fn warmup_feeds_ground_truth_to_the_lip_reader() {
        let (c, rec, model) = setup(1);
        let p = prepare_sample(&model, &rec, &c.samples[0]).unwrap();
        let cfg = TrainConfig::default();
        let on_pred = evaluate_losses(&model, &p, &cfg, false);
        let on_gt = evaluate_losses(&model, &p, &cfg, true);
        assert_eq!(on_pred.rec, on_gt.rec);
        assert_ne!(on_pred.lat, on_gt.lat);
        let warm = TrainConfig { warmup: Warmup::LipreaderOnGt { epochs: 2 }, ..cfg };
        assert!(warm.lips_on_gt(1) && !warm.lips_on_gt(2));
    }

    #[test]
    fn epoch_orders_are_permutations_that_vary() {
        let a = epoch_order(3, 0, 8);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..8).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(3, 0, 8));
        assert!((1..5).any(|e| epoch_order(3, e, 8) != a));
    }
}
