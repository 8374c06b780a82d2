use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use selftalk::mesh_corpus::{load_obj_positions, load_vertex_sequence, save_template, save_vertex_sequence, LIPS, UPPER_FACE};
use selftalk::{FaceMesh, Matrix, VertexSequence};

const BIN: &str = env!("CARGO_BIN_EXE_selftalk");

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env_remove("SELFTALK_DATA_DIR")
        .env("RUST_BACKTRACE", "0")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

/// Every file under `root` with its bytes, keyed by relative path.
fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

const TINY: &str = r#"
seed = 4
[synth]
samples = 2
tokens_per_sample = 2
[animator]
feature_dim = 16
decoder_layers = 1
heads = 2
ffn_dim = 32
frontend_channels = 16
[lip_reader]
embed_dim = 8
encoder_layers = 1
heads = 2
ffn_dim = 16
[train]
lr = 1e-3
epochs = 2
checkpoint_every = 1
"#;

fn tiny_setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    ok(dir.path(), &["--config", "tiny.toml", "synth", "--out", "corpus"]);
    dir
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--out", "a", "--seed", "7"]);
    ok(d, &["synth", "--out", "b", "--seed", "7"]);
    ok(d, &["synth", "--out", "c", "--seed", "8"]);
    let (a, b, c) = (tree(&d.join("a")), tree(&d.join("b")), tree(&d.join("c")));
    assert_eq!(a, b);
    assert_ne!(a, c);
    // eight samples by default, each with audio, offsets and transcript
    let count = |ext: &str| a.keys().filter(|p| p.extension().is_some_and(|e| e == ext)).count();
    assert_eq!((count("wav"), count("mseq"), count("txt")), (8, 8, 8));
    let manifest: serde_json::Value = serde_json::from_slice(&a[Path::new("manifest.json")]).unwrap();
    assert_eq!(manifest["seed"], 7);
    assert!(a.contains_key(Path::new("regions/lips.json")));
}

#[test]
fn synth_rejects_zero_samples_and_foreign_directories() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("zero.toml"), "[synth]\nsamples = 0\n").unwrap();
    let err = fails(d, &["--config", "zero.toml", "synth", "--out", "x"]);
    assert!(err.contains("samples"), "{err}");
    assert!(!d.join("x").exists());
    std::fs::create_dir(d.join("busy")).unwrap();
    std::fs::write(d.join("busy/keep.txt"), "mine").unwrap();
    fails(d, &["synth", "--out", "busy"]);
    assert_eq!(std::fs::read_dir(d.join("busy")).unwrap().count(), 1);
}

#[test]
fn data_dir_falls_back_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(BIN)
        .args(["synth"])
        .current_dir(dir.path())
        .env("SELFTALK_DATA_DIR", dir.path().join("from_env"))
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("from_env/manifest.json").is_file());
}

#[test]
fn unknown_config_keys_and_bad_flags_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("typo.toml"), "[train]\nlearning_rate = 1e-3\n").unwrap();
    let err = fails(d, &["--config", "typo.toml", "synth", "--out", "x"]);
    assert!(err.contains("learning_rate"), "{err}");
    fails(d, &["synth", "--out", "x", "--weights", "1,2,3"]);
    fails(d, &["synth", "--out", "x", "--lve-agg", "median"]);
}

#[test]
fn train_writes_the_checkpoint_layout_deterministically() {
    let dir = tiny_setup();
    let d = dir.path();
    for run in ["r1", "r2"] {
        let stdout = ok(d, &["--config", "tiny.toml", "train", "--data-dir", "corpus", "--out", run]);
        assert!(stdout.contains("recognizer unchanged: true"), "{stdout}");
    }
    for epoch in [1, 2] {
        for file in ["params.stck", "config.json", "train_log.jsonl"] {
            let p = format!("ckpt_epoch_{epoch}/{file}");
            let same = std::fs::read(d.join("r1").join(&p)).unwrap() == std::fs::read(d.join("r2").join(&p)).unwrap();
            assert!(same, "{p} differs between identical runs");
        }
    }
    assert!(d.join("r1/best/params.stck").is_file());
    let log = std::fs::read_to_string(d.join("r1/train_log.jsonl")).unwrap();
    let steps = log.lines().filter(|l| l.contains("\"kind\":\"step\"")).count();
    assert_eq!(steps, 4);

    // resuming from epoch 1 reproduces the uninterrupted epoch-2 parameters
    ok(d, &["--config", "tiny.toml", "train", "--data-dir", "corpus", "--out", "r3", "--resume", "r1/ckpt_epoch_1"]);
    let same = std::fs::read(d.join("r3/ckpt_epoch_2/params.stck")).unwrap()
        == std::fs::read(d.join("r1/ckpt_epoch_2/params.stck")).unwrap();
    assert!(same, "resumed parameters differ");
}

#[test]
fn train_fails_fast_without_a_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let err = fails(dir.path(), &["train", "--data-dir", "missing", "--out", "run"]);
    assert!(err.contains("missing"), "{err}");
    assert!(!dir.path().join("run").exists());
}

#[test]
fn infer_writes_one_frame_per_video_tick_and_fails_cleanly() {
    let dir = tiny_setup();
    let d = dir.path();
    ok(d, &["--config", "tiny.toml", "train", "--data-dir", "corpus", "--out", "run"]);
    let stdout = ok(
        d,
        &[
            "infer", "--checkpoint", "run/ckpt_epoch_2", "--audio", "corpus/samples/synth_0000.wav",
            "--template", "corpus/template.obj", "--out", "pred/one.mseq",
        ],
    );
    assert!(stdout.contains("lip reader") && stdout.contains("recognizer"), "{stdout}");
    let seq = load_vertex_sequence::<f64>(d.join("pred/one.mseq")).unwrap();
    let clip = selftalk::mesh_corpus::load_audio(d.join("corpus/samples/synth_0000.wav")).unwrap();
    assert_eq!(seq.frames(), (clip.duration() * 25.0).round() as usize);
    assert_eq!(seq.vertices(), 50);

    let err = fails(
        d,
        &[
            "infer", "--checkpoint", "run/ckpt_epoch_2", "--audio", "corpus/samples/synth_0000.wav",
            "--template", "nowhere.obj", "--out", "pred",
        ],
    );
    assert!(err.contains("nowhere.obj") && !err.contains("panicked"), "{err}");
    let err = fails(
        d,
        &["infer", "--checkpoint", "run/nope", "--audio", "corpus/samples/synth_0000.wav", "--template", "corpus/template.obj", "--out", "pred"],
    );
    assert!(!err.contains("panicked"), "{err}");
}

fn fixture_mesh(dir: &Path) -> PathBuf {
    let mesh = FaceMesh::new(
        Matrix::from_fn(4, 3, |r, c| (r * 3 + c) as f64 * 0.5),
        vec![[0, 1, 2], [0, 2, 3]],
        BTreeMap::from([(LIPS.to_string(), vec![0, 1]), (UPPER_FACE.to_string(), vec![0])]),
    )
    .unwrap();
    let path = dir.join("mesh/template.obj");
    std::fs::create_dir_all(dir.join("mesh")).unwrap();
    save_template(&mesh, &path).unwrap();
    path
}

/// Two frames; x offsets of vertices 0 and 1 per frame, everything else zero.
fn x_sequence(frames: [[f64; 2]; 2]) -> VertexSequence<f64> {
    VertexSequence::new(
        Matrix::from_fn(2, 12, |t, c| if c % 3 == 0 && c / 3 < 2 { frames[t][c / 3] } else { 0.0 }),
        25.0,
    )
    .unwrap()
}

#[test]
fn eval_reproduces_hand_fixtures_and_lists_missing_ids() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fixture_mesh(d);
    for sub in ["gt", "pred"] {
        std::fs::create_dir(d.join(sub)).unwrap();
    }
    save_vertex_sequence(&x_sequence([[0.0; 2]; 2]), d.join("gt/s1.mseq")).unwrap();
    save_vertex_sequence(&x_sequence([[0.125, 0.25], [0.375, 0.0625]]), d.join("pred/s1.mseq")).unwrap();

    ok(d, &["eval", "--gt", "gt", "--pred", "pred", "--template", "mesh/template.obj", "--mu", "0.25", "--out", "rep"]);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("rep/eval.json")).unwrap()).unwrap();
    // per frame max lip distance 0.25 and 0.375; v0 norms 0.125 and 0.375 have
    // population std 0.125; two of four lip distances fall below 0.25
    assert_eq!(report["lve"], 0.3125);
    assert_eq!(report["fdd"], 0.125);
    assert_eq!(report["lrp"], 0.5);
    let csv = std::fs::read_to_string(d.join("rep/eval.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("id,lve,fdd,lrp"));
    assert_eq!(csv.lines().count(), 2);

    ok(d, &["eval", "--gt", "gt", "--pred", "pred", "--template", "mesh/template.obj", "--mu", "0.25", "--lve-agg", "mean", "--out", "rep_mean"]);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("rep_mean/eval.json")).unwrap()).unwrap();
    assert_eq!(report["lve"], 0.203125);

    ok(d, &["eval", "--gt", "gt", "--pred", "gt", "--template", "mesh/template.obj", "--out", "self"]);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("self/eval.json")).unwrap()).unwrap();
    assert_eq!((report["lve"].as_f64(), report["fdd"].as_f64(), report["lrp"].as_f64()), (Some(0.0), Some(0.0), Some(1.0)));

    save_vertex_sequence(&x_sequence([[0.0; 2]; 2]), d.join("gt/s2.mseq")).unwrap();
    save_vertex_sequence(&x_sequence([[0.0; 2]; 2]), d.join("pred/s3.mseq")).unwrap();
    let err = fails(d, &["eval", "--gt", "gt", "--pred", "pred", "--template", "mesh/template.obj", "--out", "rep2"]);
    assert!(err.contains("s2") && err.contains("s3"), "{err}");
    assert!(!d.join("rep2").exists());
}

#[test]
fn export_writes_posed_frames_and_a_plot() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let template = fixture_mesh(d);
    let seq = x_sequence([[0.125, 0.25], [0.375, 0.0625]]);
    save_vertex_sequence(&seq, d.join("take.mseq")).unwrap();
    ok(d, &["export", "--seq", "take.mseq", "--template", "mesh/template.obj", "--out", "frames"]);
    let names: Vec<String> = std::fs::read_dir(d.join("frames")).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    assert_eq!(names.len(), 2);
    let (base, faces) = load_obj_positions::<f64>(&template).unwrap();
    for t in 0..2 {
        let (pos, f) = load_obj_positions::<f64>(d.join(format!("frames/frame_{t:04}.obj"))).unwrap();
        assert_eq!(f, faces);
        for v in 0..4 {
            for c in 0..3 {
                let want = base.get(v, c) + seq.offsets().get(t, 3 * v + c);
                assert!((pos.get(v, c) - want).abs() < 1e-6);
            }
        }
    }

    ok(d, &["export", "--seq", "take.mseq", "--template", "mesh/template.obj", "--out", "plots", "--format", "plot"]);
    let first = std::fs::read(d.join("plots/take_lips.png")).unwrap();
    ok(d, &["export", "--seq", "take.mseq", "--template", "mesh/template.obj", "--out", "plots", "--format", "plot"]);
    assert_eq!(std::fs::read_dir(d.join("plots")).unwrap().count(), 1);
    assert!(std::fs::read(d.join("plots/take_lips.png")).unwrap() == first);
    assert_eq!(&first[1..4], b"PNG");
}

#[test]
fn desk_run_lip_reads_its_training_audio() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    let config = config.to_str().unwrap();
    ok(d, &["--config", config, "synth", "--out", "corpus"]);
    ok(d, &["--config", config, "train", "--data-dir", "corpus", "--out", "run"]);
    let mut accuracies = Vec::new();
    for s in ["synth_0000", "synth_0005"] {
        let stdout = ok(
            d,
            &[
                "infer", "--checkpoint", "run/ckpt_epoch_250", "--audio", &format!("corpus/samples/{s}.wav"),
                "--template", "corpus/template.obj", "--out", "pred",
            ],
        );
        let acc: f64 = stdout
            .lines()
            .find_map(|l| l.strip_prefix("char accuracy "))
            .unwrap()
            .trim()
            .parse()
            .unwrap();
        accuracies.push(acc);
    }
    assert!(accuracies.iter().all(|&a| a >= 0.9), "{accuracies:?}");
}
