//! One function per subcommand.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use selftalk::mesh_corpus::{
    generate_synthetic_corpus, load_audio, load_template, load_vertex_sequence, save_obj, save_vertex_sequence,
    SynthConfig,
};
use selftalk::metrics::{char_accuracy, evaluate_sample};
use selftalk::trainer::{train as run_training, TrainOutput};
use selftalk::{Checkpoint, EvalReport, FaceMesh, Matrix, ModelConfig, SelfTalk, SpeechRecognizer, Vocabulary};

use crate::config::RunConfig;
use crate::corpus::{self, MANIFEST};
use crate::plot;
use crate::ExportFormat;

pub const PARAMS_FILE: &str = "params.stck";
pub const SNAPSHOT_FILE: &str = "config.json";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const EVAL_JSON: &str = "eval.json";
pub const EVAL_CSV: &str = "eval.csv";

/// Recognizer settings stored next to every checkpoint so inference can
/// rebuild the exact recognizer used in training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum RecognizerSpec {
    Mock { synth: SynthConfig, latent_dim: usize, seed: u64 },
}

impl RecognizerSpec {
    fn build(&self) -> Result<Box<dyn SpeechRecognizer>> {
        match self {
            Self::Mock { synth, latent_dim, seed } => Ok(Box::new(corpus::mock_recognizer(synth, *latent_dim, *seed)?)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Snapshot {
    pub run: RunConfig,
    pub recognizer: RecognizerSpec,
}

fn require<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    path.as_deref()
        .with_context(|| format!("no {what} given; pass it as a flag or set it in the config file"))
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        bail!("{what} {} does not exist or is not a file", path.display());
    }
    Ok(())
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if !path.is_dir() {
        bail!("{what} {} does not exist or is not a directory", path.display());
    }
    Ok(())
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn template(path: &Path) -> Result<FaceMesh<f64>> {
    require_file(path, "template")?;
    load_template(path).with_context(|| format!("loading template {}", path.display()))
}

pub fn synth(cfg: &RunConfig, out_flag: Option<&Path>) -> Result<()> {
    let dir = match out_flag {
        Some(d) => d,
        None => require(&cfg.paths.data_dir, "corpus directory (--out or --data-dir)")?,
    };
    if dir.is_dir() && std::fs::read_dir(dir)?.next().is_some() && !dir.join(MANIFEST).is_file() {
        bail!("{} is not empty and holds no corpus; refusing to write into it", dir.display());
    }
    let corpus = generate_synthetic_corpus::<f64>(&cfg.synth, cfg.seed)?;
    let manifest = corpus::write_corpus(&corpus, dir)?;
    println!(
        "wrote {} samples ({} vertices, {} fps, letters {:?}, seed {}) to {}",
        manifest.samples.len(),
        corpus.template.vertex_count(),
        cfg.synth.fps,
        cfg.synth.letters,
        cfg.seed,
        dir.display()
    );
    Ok(())
}

fn model_config(cfg: &RunConfig, template: &FaceMesh<f64>, vocabulary: &Vocabulary) -> ModelConfig {
    let mut animator = cfg.animator.clone();
    animator.vertices = template.vertex_count();
    let mut lip_reader = cfg.lip_reader.clone();
    lip_reader.vocab_size = vocabulary.len();
    ModelConfig {
        recognizer_latent_dim: lip_reader.embed_dim,
        animator,
        lip_reader,
        vocabulary: vocabulary.clone(),
        seed: cfg.seed,
    }
}

pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> Result<()> {
    let data = require(&cfg.paths.data_dir, "corpus directory (--data-dir)")?;
    let out = require(&cfg.paths.out_dir, "run directory (--out)")?;
    require_dir(data, "corpus directory")?;
    let resume_ck = match resume {
        Some(dir) => {
            let path = params_path(dir);
            require_file(&path, "checkpoint")?;
            Some(Checkpoint::<f64>::load(&path).with_context(|| format!("loading {}", path.display()))?)
        }
        None => None,
    };
    create_dir(out)?;

    let loaded = corpus::load_corpus(data)?;
    let vocabulary = Vocabulary::with_letters(&loaded.manifest.synth.letters)?;
    let model_cfg = model_config(cfg, &loaded.template, &vocabulary);
    let spec = RecognizerSpec::Mock {
        synth: loaded.manifest.synth.clone(),
        latent_dim: model_cfg.recognizer_latent_dim,
        seed: loaded.manifest.seed,
    };
    let recognizer = spec.build()?;
    let mut model = SelfTalk::new(model_cfg, loaded.template)?;
    // paths are left out so a run directory can be moved or compared
    let snapshot = serde_json::to_value(Snapshot {
        run: RunConfig {
            paths: Default::default(),
            ..cfg.clone()
        },
        recognizer: spec,
    })?;
    let output = TrainOutput {
        dir: Some(out),
        snapshot: Some(&snapshot),
    };
    println!(
        "training on {} samples for {} epochs (lr {}, batch {}, weights {:?})",
        loaded.samples.len(),
        cfg.train.epochs,
        cfg.train.lr,
        cfg.train.batch_size,
        cfg.train.weights
    );
    let outcome = run_training(&mut model, recognizer.as_ref(), &loaded.samples, &[], &cfg.train, output, resume_ck.as_ref())?;
    let log_path = out.join(TRAIN_LOG_FILE);
    std::fs::write(&log_path, outcome.log.to_jsonl()?).with_context(|| format!("writing {}", log_path.display()))?;

    if let Some(last) = outcome.log.epochs().last() {
        println!(
            "epoch {}: mean loss {:.4e}, LVE {:.4e}, LRP {:.4} at mu {:e}, lip-reader char accuracy {:.4}",
            last.epoch, last.mean_total, last.val_lve, last.val_lrp, cfg.metrics.mu, last.val_char_accuracy
        );
    }
    if let Some(best) = outcome.best_epoch {
        println!("best epoch {best} (LVE {:.4e})", outcome.best_val_lve);
    }
    let log = &outcome.log;
    println!(
        "{} steps, {} skipped steps, {} skipped ctc terms, recognizer unchanged: {}, {:.1} s",
        outcome.steps,
        log.skipped_steps,
        log.skipped_ctc,
        log.recognizer_digest_before == log.recognizer_digest_after,
        log.wall_seconds
    );
    println!("checkpoints in {}", out.display());
    Ok(())
}

fn params_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(PARAMS_FILE)
    } else {
        p.to_path_buf()
    }
}

pub fn infer(cfg: &RunConfig, checkpoint: &Path, audio: &Path, template_path: &Path) -> Result<()> {
    let params = params_path(checkpoint);
    require_file(&params, "checkpoint")?;
    let snapshot_path = params.with_file_name(SNAPSHOT_FILE);
    require_file(&snapshot_path, "checkpoint config")?;
    require_file(audio, "audio")?;
    let mesh = template(template_path)?;
    let out = require(&cfg.paths.out_dir, "output path (--out)")?;
    // anything not named *.mseq is a directory to put `<audio stem>.mseq` in
    let is_file = out.extension().is_some_and(|e| e.eq_ignore_ascii_case("mseq")) && !out.is_dir();
    let out = if !is_file {
        let stem = audio.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
        out.join(format!("{stem}.mseq"))
    } else {
        out.to_path_buf()
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }

    let snapshot: Snapshot = serde_json::from_str(
        &std::fs::read_to_string(&snapshot_path).with_context(|| format!("reading {}", snapshot_path.display()))?,
    )
    .with_context(|| format!("parsing {}", snapshot_path.display()))?;
    let recognizer = snapshot.recognizer.build()?;
    let ck = Checkpoint::<f64>::load(&params).with_context(|| format!("loading {}", params.display()))?;
    let model = SelfTalk::from_checkpoint(&ck, mesh).context("checkpoint does not fit the template")?;
    let clip = load_audio(audio)?;
    let result = model.infer(&clip, recognizer.as_ref())?;
    save_vertex_sequence(&result.offsets, &out)?;

    let lip = result.lip_transcript.text();
    let heard = result.recognizer_transcript.text();
    println!("{:<12} {:?}", "lip reader", lip);
    println!("{:<12} {:?}", "recognizer", heard);
    println!("char accuracy {:.4}", char_accuracy(heard, lip));
    println!("wrote {} frames at {} fps to {}", result.offsets.frames(), result.offsets.fps(), out.display());
    Ok(())
}

pub fn eval(cfg: &RunConfig, gt: &Path, pred: &Path, template_path: &Path) -> Result<()> {
    require_dir(gt, "ground-truth directory")?;
    require_dir(pred, "prediction directory")?;
    let mesh = template(template_path)?;
    let out = require(&cfg.paths.out_dir, "report directory (--out)")?;

    let gt_ids = corpus::mseq_ids(gt)?;
    let pred_ids = corpus::mseq_ids(pred)?;
    let names = |v: &[(String, PathBuf)]| v.iter().map(|(id, _)| id.clone()).collect::<Vec<_>>();
    let (g, p) = (names(&gt_ids), names(&pred_ids));
    let no_pred: Vec<&String> = g.iter().filter(|id| !p.contains(id)).collect();
    let no_gt: Vec<&String> = p.iter().filter(|id| !g.contains(id)).collect();
    if !no_pred.is_empty() || !no_gt.is_empty() {
        bail!("sample sets differ; missing predictions: {no_pred:?}; missing ground truth: {no_gt:?}");
    }
    if gt_ids.is_empty() {
        bail!("no .mseq files in {}", gt.display());
    }
    create_dir(out)?;

    let params = cfg.metrics.params();
    let mut rows = Vec::with_capacity(gt_ids.len());
    for ((id, gt_path), (_, pred_path)) in gt_ids.iter().zip(&pred_ids) {
        let y = load_vertex_sequence::<f64>(gt_path)?;
        let y_hat = load_vertex_sequence::<f64>(pred_path)?;
        rows.push(evaluate_sample(id, &y, &y_hat, &mesh, params).with_context(|| format!("sample {id}"))?);
    }
    let report = EvalReport::from_samples(rows, params)?;
    std::fs::write(out.join(EVAL_JSON), report.to_json()? + "\n")?;
    std::fs::write(out.join(EVAL_CSV), report.to_csv())?;
    println!(
        "{} samples: LVE {:.4e} ({:?}), FDD {:.4e}, LRP {:.4} at mu {:e}",
        report.per_sample.len(),
        report.lve,
        report.lve_aggregation,
        report.fdd,
        report.lrp,
        report.mu
    );
    println!("report in {}", out.display());
    Ok(())
}

pub fn export(cfg: &RunConfig, seq_path: &Path, template_path: &Path, format: ExportFormat) -> Result<()> {
    require_file(seq_path, "sequence")?;
    let mesh = template(template_path)?;
    let out = require(&cfg.paths.out_dir, "output directory (--out)")?;
    let seq = load_vertex_sequence::<f64>(seq_path)?;
    seq.check_mesh(&mesh)?;
    create_dir(out)?;
    match format {
        ExportFormat::Obj => {
            let v = mesh.vertex_count();
            for t in 0..seq.frames() {
                let positions = Matrix::from_fn(v, 3, |r, c| mesh.vertices().get(r, c) + seq.offsets().get(t, 3 * r + c));
                save_obj(out.join(frame_file(t)), &positions, mesh.faces())?;
            }
            println!("wrote {} OBJ frames to {}", seq.frames(), out.display());
        }
        ExportFormat::Plot => {
            let stem = seq_path.file_stem().and_then(|s| s.to_str()).unwrap_or("sequence");
            let path = out.join(format!("{stem}_lips.png"));
            plot::lip_trajectories(&seq, &mesh)?.save(&path).with_context(|| format!("writing {}", path.display()))?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

pub fn frame_file(t: usize) -> String {
    format!("frame_{t:04}.obj")
}
