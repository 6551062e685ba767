//! On-disk scene corpora: generation, manifest and loading.
//!
//! Layout: `<root>/<split>/<scene_id>/{image.bin, mask.pgm, scene.json, qa.jsonl}`
//! with `manifest.json` and `vocab.json` at the root.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::error::TensorError;
use crate::geo::{generate_scene_with, render_with_sigma, scene_seed, GeoError, Scene, SceneKind, SceneParams, SemanticMask};
use crate::qa::{generate_qa_set, AnswerVocab, QAPair, QuestionVocab};
use crate::tensor::Tensor;

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

/// First scene id of each split; splits never share ids and therefore seeds.
pub const SPLIT_ID_BASE: [u64; 3] = [0, 1_000_000, 2_000_000];

/// Regeneration attempts per scene before giving up.
const MAX_ATTEMPTS: u64 = 64;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{0} already exists; pass --force to overwrite")]
    Exists(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("corpus error: {0}")]
    Invalid(String),
}

type Result<T> = std::result::Result<T, CorpusError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn json_err(path: &Path) -> impl FnOnce(serde_json::Error) -> CorpusError + '_ {
    move |source| CorpusError::Json {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
    #[serde(default)]
    pub params: SceneParams,
}

impl CorpusSpec {
    pub fn new(n_train: usize, n_val: usize, n_test: usize, seed: u64) -> Self {
        Self {
            n_train,
            n_val,
            n_test,
            seed,
            params: SceneParams::default(),
        }
    }

    fn count(&self, split: usize) -> usize {
        [self.n_train, self.n_val, self.n_test][split]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub scene_id: u64,
    pub kind: SceneKind,
    pub qa_count: usize,
    /// sha256 over the scene's four files in layout order.
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: CorpusSpec,
    pub splits: BTreeMap<String, Vec<SceneEntry>>,
    pub answer_vocab_size: usize,
    pub question_vocab_size: usize,
    /// sha256 over all scene checksums in split order.
    pub sha256: String,
}

impl DatasetManifest {
    pub fn scenes(&self, split: &str) -> &[SceneEntry] {
        self.splits.get(split).map_or(&[], |v| v.as_slice())
    }

    pub fn qa_count(&self) -> usize {
        self.splits.values().flatten().map(|e| e.qa_count).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusVocab {
    pub answers: AnswerVocab,
    pub questions: QuestionVocab,
}

impl CorpusVocab {
    pub fn build(count_cap: u32) -> Self {
        Self {
            answers: AnswerVocab::build(count_cap),
            questions: QuestionVocab::build(),
        }
    }

    fn reindexed(self) -> Self {
        Self {
            answers: self.answers.reindexed(),
            questions: self.questions.reindexed(),
        }
    }
}

/// Kind of the `i`-th scene of a split: even positions urban, odd rural.
pub fn split_kind(i: usize) -> SceneKind {
    if i.is_multiple_of(2) {
        SceneKind::Urban
    } else {
        SceneKind::Rural
    }
}

/// Generates scene `scene_id`, retrying with the next attempt seed on placement failure.
pub fn generate_corpus_scene(corpus_seed: u64, scene_id: u64, kind: SceneKind, params: &SceneParams) -> Result<Scene> {
    let mut last = None;
    for attempt in 0..MAX_ATTEMPTS {
        match generate_scene_with(scene_seed(corpus_seed, scene_id, attempt), kind, params) {
            Ok(mut s) => {
                s.scene_id = scene_id;
                return Ok(s);
            }
            Err(e @ GeoError::Placement { .. }) => last = Some(e),
            Err(e) => return Err(e.into()),
        }
    }
    Err(last.expect("at least one attempt").into())
}

/// Serialized files of one scene, in layout order.
struct SceneFiles {
    image: Vec<u8>,
    mask: Vec<u8>,
    scene: Vec<u8>,
    qa: Vec<u8>,
}

impl SceneFiles {
    fn build(scene: &Scene, sigma: f64) -> Result<(Self, usize)> {
        let raster = render_with_sigma(scene, sigma);
        let mut image = Vec::new();
        raster.image.write_to(&mut image)?;
        let qa = generate_qa_set(scene);
        let mut qa_bytes = Vec::new();
        for pair in &qa {
            serde_json::to_writer(&mut qa_bytes, pair).expect("serializable");
            qa_bytes.push(b'\n');
        }
        let mut scene_bytes = serde_json::to_vec_pretty(scene).expect("serializable");
        scene_bytes.push(b'\n');
        let files = Self {
            image,
            mask: raster.mask.to_pgm(),
            scene: scene_bytes,
            qa: qa_bytes,
        };
        Ok((files, qa.len()))
    }

    fn named(&self) -> [(&'static str, &[u8]); 4] {
        [
            ("image.bin", &self.image),
            ("mask.pgm", &self.mask),
            ("scene.json", &self.scene),
            ("qa.jsonl", &self.qa),
        ]
    }

    fn sha256(&self) -> String {
        let mut h = Sha256::new();
        for (name, bytes) in self.named() {
            h.update(name.as_bytes());
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(bytes);
        }
        hex::encode(h.finalize())
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(json_err(path))?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(json_err(path))
}

/// Writes a full corpus under `root`. An existing `root` is refused unless `force`.
pub fn build_corpus(root: &Path, spec: &CorpusSpec, force: bool) -> Result<DatasetManifest> {
    for split in 0..3 {
        if spec.count(split) == 0 {
            return Err(CorpusError::Invalid(format!("split {} needs at least one scene", SPLITS[split])));
        }
    }
    if root.exists() {
        if !force {
            return Err(CorpusError::Exists(root.to_path_buf()));
        }
        fs::remove_dir_all(root).map_err(io_err(root))?;
    }
    fs::create_dir_all(root).map_err(io_err(root))?;

    let vocab = CorpusVocab::build(crate::qa::AnnotatorConfig::default().count_cap);
    let mut splits = BTreeMap::new();
    let mut all = Sha256::new();
    for (si, name) in SPLITS.iter().enumerate() {
        let mut entries = Vec::with_capacity(spec.count(si));
        for i in 0..spec.count(si) {
            let scene_id = SPLIT_ID_BASE[si] + i as u64;
            let kind = split_kind(i);
            let scene = generate_corpus_scene(spec.seed, scene_id, kind, &spec.params)?;
            let (files, qa_count) = SceneFiles::build(&scene, spec.params.noise_sigma)?;
            let dir = root.join(name).join(scene_id.to_string());
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            for (file, bytes) in files.named() {
                let p = dir.join(file);
                fs::write(&p, bytes).map_err(io_err(&p))?;
            }
            let sha = files.sha256();
            all.update(sha.as_bytes());
            entries.push(SceneEntry {
                scene_id,
                kind,
                qa_count,
                sha256: sha,
            });
        }
        splits.insert(name.to_string(), entries);
    }
    let manifest = DatasetManifest {
        spec: spec.clone(),
        splits,
        answer_vocab_size: vocab.answers.len(),
        question_vocab_size: vocab.questions.len(),
        sha256: hex::encode(all.finalize()),
    };
    write_json(&root.join("vocab.json"), &vocab)?;
    write_json(&root.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// One loaded scene with its rendered image, mask and QA pairs.
#[derive(Clone, Debug)]
pub struct Sample {
    pub scene: Scene,
    pub image: Tensor<f64>,
    pub mask: SemanticMask,
    pub qa: Vec<QAPair>,
}

/// Read access to a corpus directory.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub vocab: CorpusVocab,
}

impl Corpus {
    pub fn open(root: &Path) -> Result<Self> {
        if !root.join("manifest.json").is_file() {
            return Err(CorpusError::Invalid(format!("no corpus at {} (manifest.json missing)", root.display())));
        }
        let manifest: DatasetManifest = read_json(&root.join("manifest.json"))?;
        let vocab: CorpusVocab = read_json::<CorpusVocab>(&root.join("vocab.json"))?.reindexed();
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            vocab,
        })
    }

    fn scene_dir(&self, split: &str, scene_id: u64) -> PathBuf {
        self.root.join(split).join(scene_id.to_string())
    }

    /// Finds the split holding `scene_id`.
    pub fn split_of(&self, scene_id: u64) -> Option<&str> {
        self.manifest
            .splits
            .iter()
            .find(|(_, v)| v.iter().any(|e| e.scene_id == scene_id))
            .map(|(k, _)| k.as_str())
    }

    pub fn load_sample(&self, split: &str, scene_id: u64) -> Result<Sample> {
        let dir = self.scene_dir(split, scene_id);
        let scene: Scene = read_json(&dir.join("scene.json"))?;
        let image = Tensor::load(dir.join("image.bin"))?;
        let mask_path = dir.join("mask.pgm");
        let mask = SemanticMask::from_pgm(&fs::read(&mask_path).map_err(io_err(&mask_path))?)?;
        let qa_path = dir.join("qa.jsonl");
        let file = fs::File::open(&qa_path).map_err(io_err(&qa_path))?;
        let mut qa = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(io_err(&qa_path))?;
            if !line.trim().is_empty() {
                qa.push(serde_json::from_str(&line).map_err(json_err(&qa_path))?);
            }
        }
        Ok(Sample { scene, image, mask, qa })
    }

    pub fn load_split(&self, split: &str) -> Result<Vec<Sample>> {
        if !self.manifest.splits.contains_key(split) {
            return Err(CorpusError::Invalid(format!("unknown split {split:?}")));
        }
        self.manifest
            .scenes(split)
            .iter()
            .map(|e| self.load_sample(split, e.scene_id))
            .collect()
    }

    /// Recomputes every scene checksum from disk and compares with the manifest.
    pub fn verify(&self) -> Result<()> {
        for (split, entries) in &self.manifest.splits {
            for e in entries {
                let dir = self.scene_dir(split, e.scene_id);
                let mut h = Sha256::new();
                for name in ["image.bin", "mask.pgm", "scene.json", "qa.jsonl"] {
                    let p = dir.join(name);
                    let bytes = fs::read(&p).map_err(io_err(&p))?;
                    h.update(name.as_bytes());
                    h.update((bytes.len() as u64).to_le_bytes());
                    h.update(&bytes);
                }
                if hex::encode(h.finalize()) != e.sha256 {
                    return Err(CorpusError::Invalid(format!("checksum mismatch for {split}/{}", e.scene_id)));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_corpus_layout_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let spec = CorpusSpec::new(4, 2, 2, 1);
        let a = build_corpus(&dir.path().join("a"), &spec, false).unwrap();
        let b = build_corpus(&dir.path().join("b"), &spec, false).unwrap();
        assert_eq!(a.sha256, b.sha256);
        assert_eq!(a.splits.len(), 3);
        let train = a.scenes("train");
        assert_eq!(train.iter().filter(|e| e.kind == SceneKind::Urban).count(), 2);
        let ids = |s: &str| a.scenes(s).iter().map(|e| e.scene_id).collect::<std::collections::BTreeSet<_>>();
        assert!(ids("train").is_disjoint(&ids("val")));
        assert!(ids("val").is_disjoint(&ids("test")));

        let c = Corpus::open(&dir.path().join("a")).unwrap();
        c.verify().unwrap();
        let s = c.load_sample("train", 0).unwrap();
        assert_eq!(s.qa.len(), 14);
        assert_eq!(s.image.shape(), &[3, 64, 64]);
        assert_eq!(s.mask, crate::geo::rasterize(&s.scene));
    }

    #[test]
    fn refuses_existing_directory_without_force() {
        let dir = tempfile::tempdir().unwrap();
        let spec = CorpusSpec::new(1, 1, 1, 3);
        assert!(matches!(build_corpus(dir.path(), &spec, false), Err(CorpusError::Exists(_))));
        build_corpus(dir.path(), &spec, true).unwrap();
    }

    #[test]
    fn zero_count_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let spec = CorpusSpec::new(0, 1, 1, 3);
        assert!(build_corpus(&dir.path().join("x"), &spec, false).is_err());
    }
}
