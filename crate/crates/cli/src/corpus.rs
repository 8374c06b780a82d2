//! On-disk corpus layout.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/template.obj
//! <dir>/regions/<region>.json
//! <dir>/samples/<id>.wav
//! <dir>/samples/<id>.mseq
//! <dir>/samples/<id>.txt
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use selftalk::mesh_corpus::{
    load_audio, load_template, load_vertex_sequence, save_audio, save_template, save_vertex_sequence, SynthConfig,
    SyntheticCorpus,
};
use selftalk::{CorpusSample, FaceMesh, MockRecognizer, Transcript, Vocabulary};

pub const MANIFEST: &str = "manifest.json";
pub const TEMPLATE: &str = "template.obj";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub id: String,
    pub audio: String,
    pub offsets: String,
    pub transcript: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    /// Generator settings; also what the mock recognizer is rebuilt from.
    pub synth: SynthConfig,
    pub template: String,
    pub samples: Vec<SampleEntry>,
}

/// Writes `corpus` under `dir`, which must be empty or absent.
pub fn write_corpus(corpus: &SyntheticCorpus<f64>, dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(dir.join("samples")).with_context(|| format!("creating {}", dir.display()))?;
    save_template(&corpus.template, dir.join(TEMPLATE))?;
    let mut samples = Vec::with_capacity(corpus.samples.len());
    for s in &corpus.samples {
        let entry = SampleEntry {
            id: s.sample_id.clone(),
            audio: format!("samples/{}.wav", s.sample_id),
            offsets: format!("samples/{}.mseq", s.sample_id),
            transcript: s.transcript.as_ref().map(|_| format!("samples/{}.txt", s.sample_id)),
        };
        save_audio(&s.audio, dir.join(&entry.audio))?;
        save_vertex_sequence(&s.gt_offsets, dir.join(&entry.offsets))?;
        if let (Some(t), Some(p)) = (&s.transcript, &entry.transcript) {
            std::fs::write(dir.join(p), t.text()).with_context(|| format!("writing {p}"))?;
        }
        samples.push(entry);
    }
    let manifest = Manifest {
        seed: corpus.seed,
        synth: corpus.config.clone(),
        template: TEMPLATE.into(),
        samples,
    };
    let path = dir.join(MANIFEST);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(manifest)
}

/// A corpus read back from disk.
pub struct LoadedCorpus {
    pub manifest: Manifest,
    pub template: FaceMesh<f64>,
    pub samples: Vec<CorpusSample<f64>>,
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn load_corpus(dir: &Path) -> Result<LoadedCorpus> {
    let manifest = read_manifest(dir)?;
    if manifest.samples.is_empty() {
        bail!("corpus {} lists no samples", dir.display());
    }
    let template = load_template(dir.join(&manifest.template))
        .with_context(|| format!("loading template {}", manifest.template))?;
    let vocabulary = Vocabulary::with_letters(&manifest.synth.letters)?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for e in &manifest.samples {
        let audio = load_audio(dir.join(&e.audio)).with_context(|| format!("sample {}", e.id))?;
        let offsets = load_vertex_sequence(dir.join(&e.offsets)).with_context(|| format!("sample {}", e.id))?;
        let transcript = match &e.transcript {
            Some(p) => {
                let text = std::fs::read_to_string(dir.join(p)).with_context(|| format!("reading {p}"))?;
                Some(Transcript::new(text.trim(), &vocabulary)?)
            }
            None => None,
        };
        samples.push(CorpusSample::new(e.id.clone(), audio, offsets, transcript).with_context(|| format!("sample {}", e.id))?);
    }
    Ok(LoadedCorpus {
        manifest,
        template,
        samples,
    })
}

/// The tone-classifying recognizer that goes with a synthetic corpus.
pub fn mock_recognizer(synth: &SynthConfig, latent_dim: usize, seed: u64) -> Result<MockRecognizer> {
    let vocabulary = Vocabulary::with_letters(&synth.letters)?;
    let mut frequencies = vec![0.0; vocabulary.len()];
    for (rank, c) in synth.letters.chars().enumerate() {
        let k = vocabulary.index_of(c).expect("letter is in its own vocabulary");
        frequencies[k] = synth.token_frequency(rank);
    }
    Ok(MockRecognizer::new(vocabulary, frequencies, latent_dim, seed)?)
}

/// Stems of every `*.mseq` in `dir`, sorted.
pub fn mseq_ids(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("mseq") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push((stem.to_string(), path.clone()));
            }
        }
    }
    out.sort();
    Ok(out)
}
