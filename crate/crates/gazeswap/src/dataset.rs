//! On-disk dataset generation and loading.
//!
//! Layout:
//! ```text
//! <root>/<identity_id>/frames/<idx>.png
//! <root>/<identity_id>/masks/<idx>_{face,eyes,em}.png
//! <root>/<identity_id>/meta.csv      # frame_index,pitch_mu,yaw_phi,offset_x,offset_y
//! ```
//! Images are 16-bit PNG and all metadata floats are written with
//! shortest-round-trip formatting, so `load_dataset(generate_dataset(..))`
//! reproduces the in-memory samples exactly.

use crate::faces::{FaceError, FaceImage, GazeAngles, MaskSet};
use crate::synth::{render_face, FrameSample, RenderError, SyntheticIdentity};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("gaze sampler spec invalid: {0}")]
    BadSampler(String),
    #[error("need at least two identities, got {0}")]
    TooFewIdentities(usize),
    #[error("frames_per_identity must be >= 1")]
    NoFrames,
    #[error("io at {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("render failed for identity {identity} frame {frame}: {source}")]
    Render { identity: String, frame: u32, source: RenderError },
    #[error("missing {kind} for identity {identity} frame {frame_index}: {path}")]
    MissingFile { kind: &'static str, identity: String, frame_index: u32, path: PathBuf },
    #[error("corrupt metadata in {path} line {line} (frame {frame}): {detail}")]
    CorruptMeta { path: PathBuf, line: usize, frame: String, detail: String },
    #[error("image error for identity {identity} frame {frame_index}: {source}")]
    Image { identity: String, frame_index: u32, source: FaceError },
    #[error("no identities found under {0}")]
    EmptyRoot(PathBuf),
    #[error(transparent)]
    Face(#[from] FaceError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.display().to_string(), source }
}

/// Uniform sampler over a pitch/yaw box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GazeSamplerSpec {
    pub pitch_min: f64,
    pub pitch_max: f64,
    pub yaw_min: f64,
    pub yaw_max: f64,
}

impl Default for GazeSamplerSpec {
    /// The box over which pupil-centroid gaze recovery is accurate:
    /// pitch within ±π/6, yaw within π/6 of π/2.
    fn default() -> Self {
        let sixth = std::f64::consts::PI / 6.0;
        let half = std::f64::consts::FRAC_PI_2;
        Self {
            pitch_min: -sixth,
            pitch_max: sixth,
            yaw_min: half - sixth,
            yaw_max: half + sixth,
        }
    }
}

impl GazeSamplerSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let pi = std::f64::consts::PI;
        for (name, v) in [
            ("pitch_min", self.pitch_min),
            ("pitch_max", self.pitch_max),
            ("yaw_min", self.yaw_min),
            ("yaw_max", self.yaw_max),
        ] {
            if !v.is_finite() {
                return Err(DatasetError::BadSampler(format!("{name} is not finite")));
            }
        }
        if self.pitch_min > self.pitch_max || self.yaw_min > self.yaw_max {
            return Err(DatasetError::BadSampler("min exceeds max".into()));
        }
        if self.pitch_min < -pi || self.pitch_max > pi {
            return Err(DatasetError::BadSampler("pitch outside [-pi, pi]".into()));
        }
        if self.yaw_min < 0.0 || self.yaw_max > pi {
            return Err(DatasetError::BadSampler("yaw outside [0, pi]".into()));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> GazeAngles {
        let pitch = if self.pitch_min == self.pitch_max {
            self.pitch_min
        } else {
            rng.gen_range(self.pitch_min..=self.pitch_max)
        };
        let yaw = if self.yaw_min == self.yaw_max {
            self.yaw_min
        } else {
            rng.gen_range(self.yaw_min..=self.yaw_max)
        };
        GazeAngles::new(pitch, yaw).expect("sampler box validated")
    }
}

/// Generation parameters besides the identity list.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub resolution: usize,
    pub frames_per_identity: u32,
    pub gaze: GazeSamplerSpec,
    /// Head offsets are sampled uniformly from `[-max, max]²`.
    pub head_offset_max: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            resolution: 64,
            frames_per_identity: 100,
            gaze: GazeSamplerSpec::default(),
            head_offset_max: 3.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub root: PathBuf,
    pub identities: Vec<String>,
    pub frames_per_identity: u32,
    /// SHA-256 over every dataset file, in sorted path order.
    pub content_hash: String,
}

/// Splitmix64 step, used to derive independent stream seeds. Outputs are
/// masked to 63 bits so they stay representable in TOML configs.
pub fn derive_seed(master: u64, tag: u64) -> u64 {
    let mut z = master ^ tag.wrapping_mul(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    (z ^ (z >> 31)) & 0x7FFF_FFFF_FFFF_FFFF
}

fn float_csv(v: f64) -> String {
    // Shortest representation that parses back to the same f64.
    format!("{v}")
}

/// Renders `identities.len() × frames_per_identity` frames to `root`.
/// Identity directories are named `id00`, `id01`, ... in input order.
pub fn generate_dataset(
    root: &Path,
    identities: &[SyntheticIdentity],
    spec: &DatasetSpec,
) -> Result<DatasetSummary, DatasetError> {
    if identities.len() < 2 {
        return Err(DatasetError::TooFewIdentities(identities.len()));
    }
    if spec.frames_per_identity == 0 {
        return Err(DatasetError::NoFrames);
    }
    if spec.seed > i64::MAX as u64 {
        return Err(DatasetError::BadSampler("seed must fit in 63 bits (TOML limit)".into()));
    }
    spec.gaze.validate()?;

    fs::create_dir_all(root).map_err(io_err(root))?;
    let mut identity_ids = Vec::new();
    for (i, identity) in identities.iter().enumerate() {
        let id = format!("id{i:02}");
        let dir = root.join(&id);
        let frames_dir = dir.join("frames");
        let masks_dir = dir.join("masks");
        fs::create_dir_all(&frames_dir).map_err(io_err(&frames_dir))?;
        fs::create_dir_all(&masks_dir).map_err(io_err(&masks_dir))?;

        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, i as u64));
        let mut meta = String::from("frame_index,pitch_mu,yaw_phi,offset_x,offset_y\n");
        for frame in 0..spec.frames_per_identity {
            let gaze = spec.gaze.sample(&mut rng);
            let off = (
                rng.gen_range(-spec.head_offset_max..=spec.head_offset_max),
                rng.gen_range(-spec.head_offset_max..=spec.head_offset_max),
            );
            let frame_seed = rng.gen::<u64>();
            let mut sample = render_face(identity, gaze, off, frame_seed, spec.resolution)
                .map_err(|source| DatasetError::Render { identity: id.clone(), frame, source })?;
            sample.identity_id = id.clone();
            sample.frame_index = frame;

            let stem = format!("{frame:04}");
            sample
                .image
                .save_png(&frames_dir.join(format!("{stem}.png")))
                .map_err(|source| DatasetError::Image { identity: id.clone(), frame_index: frame, source })?;
            sample
                .masks
                .save_pngs(&masks_dir, &stem)
                .map_err(|source| DatasetError::Image { identity: id.clone(), frame_index: frame, source })?;
            meta.push_str(&format!(
                "{},{},{},{},{}\n",
                frame,
                float_csv(gaze.pitch_mu()),
                float_csv(gaze.yaw_phi()),
                float_csv(off.0),
                float_csv(off.1)
            ));
        }
        let meta_path = dir.join("meta.csv");
        fs::write(&meta_path, meta).map_err(io_err(&meta_path))?;
        identity_ids.push(id);
    }

    let spec_path = root.join("dataset.toml");
    let spec_text = toml::to_string_pretty(spec).expect("spec serializes");
    fs::write(&spec_path, format!("schema_version = 1\n\n{spec_text}"))
        .map_err(io_err(&spec_path))?;

    let content_hash = hash_dataset(root)?;
    Ok(DatasetSummary {
        root: root.to_path_buf(),
        identities: identity_ids,
        frames_per_identity: spec.frames_per_identity,
        content_hash,
    })
}

/// SHA-256 over all regular files under `root` in sorted relative-path order.
pub fn hash_dataset(root: &Path) -> Result<String, DatasetError> {
    let mut files = Vec::new();
    collect_files(root, root, &mut files)?;
    files.sort();
    let mut hasher = Sha256::new();
    for rel in files {
        hasher.update(rel.as_bytes());
        let full = root.join(&rel);
        let bytes = fs::read(&full).map_err(io_err(&full))?;
        hasher.update(&bytes);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<(), DatasetError> {
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
            out.push(rel);
        }
    }
    Ok(())
}

/// Lists identity directory names under a dataset root, sorted.
pub fn list_identities(root: &Path) -> Result<Vec<String>, DatasetError> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(root).map_err(io_err(root))? {
        let entry = entry.map_err(io_err(root))?;
        if entry.path().is_dir() {
            ids.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    ids.sort();
    if ids.is_empty() {
        return Err(DatasetError::EmptyRoot(root.to_path_buf()));
    }
    Ok(ids)
}

/// Parsed meta.csv row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameMeta {
    pub frame_index: u32,
    pub gaze: GazeAngles,
    pub offset: (f64, f64),
}

/// Reads one identity's meta.csv.
pub fn load_meta(root: &Path, identity: &str) -> Result<Vec<FrameMeta>, DatasetError> {
    let path = root.join(identity).join("meta.csv");
    if !path.exists() {
        return Err(DatasetError::MissingFile {
            kind: "meta.csv",
            identity: identity.to_string(),
            frame_index: 0,
            path,
        });
    }
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let mut rows = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        if line_no == 0 {
            continue; // header
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let corrupt = |detail: String| DatasetError::CorruptMeta {
            path: path.clone(),
            line: line_no + 1,
            frame: fields.first().unwrap_or(&"?").to_string(),
            detail,
        };
        if fields.len() != 5 {
            return Err(corrupt(format!("expected 5 fields, got {}", fields.len())));
        }
        let frame_index: u32 =
            fields[0].parse().map_err(|e| corrupt(format!("frame_index: {e}")))?;
        let mut vals = [0.0f64; 4];
        for (i, v) in vals.iter_mut().enumerate() {
            *v = fields[i + 1]
                .parse()
                .map_err(|e| corrupt(format!("field {}: {e}", i + 1)))?;
        }
        let gaze = GazeAngles::new(vals[0], vals[1]).map_err(|e| corrupt(e.to_string()))?;
        rows.push(FrameMeta { frame_index, gaze, offset: (vals[2], vals[3]) });
    }
    Ok(rows)
}

/// Loads every frame of one identity.
pub fn load_identity(root: &Path, identity: &str) -> Result<Vec<FrameSample>, DatasetError> {
    let meta = load_meta(root, identity)?;
    let dir = root.join(identity);
    let mut samples = Vec::with_capacity(meta.len());
    for m in meta {
        let stem = format!("{:04}", m.frame_index);
        let frame_path = dir.join("frames").join(format!("{stem}.png"));
        if !frame_path.exists() {
            return Err(DatasetError::MissingFile {
                kind: "frame png",
                identity: identity.to_string(),
                frame_index: m.frame_index,
                path: frame_path,
            });
        }
        for suffix in ["face", "eyes", "em"] {
            let mask_path = dir.join("masks").join(format!("{stem}_{suffix}.png"));
            if !mask_path.exists() {
                return Err(DatasetError::MissingFile {
                    kind: "mask png",
                    identity: identity.to_string(),
                    frame_index: m.frame_index,
                    path: mask_path,
                });
            }
        }
        let image = FaceImage::load_png(&frame_path).map_err(|source| DatasetError::Image {
            identity: identity.to_string(),
            frame_index: m.frame_index,
            source,
        })?;
        let masks = MaskSet::load_pngs(&dir.join("masks"), &stem).map_err(|source| {
            DatasetError::Image { identity: identity.to_string(), frame_index: m.frame_index, source }
        })?;
        samples.push(FrameSample {
            image,
            masks,
            true_gaze: m.gaze,
            identity_id: identity.to_string(),
            frame_index: m.frame_index,
        });
    }
    Ok(samples)
}

/// Loads the whole dataset, identities in sorted order.
pub fn load_dataset(root: &Path) -> Result<Vec<FrameSample>, DatasetError> {
    let mut all = Vec::new();
    for id in list_identities(root)? {
        all.extend(load_identity(root, &id)?);
    }
    Ok(all)
}

/// A (character, original) identity pairing.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PairSpec {
    pub character: String,
    pub original: String,
}

impl PairSpec {
    pub fn label(&self) -> String {
        format!("{}-{}", self.character, self.original)
    }
}

/// All ordered pairings within each group. Two groups of three identities
/// yield 12 pairs (3·2 per group).
pub fn enumerate_pairs(groups: &[Vec<String>]) -> Vec<PairSpec> {
    let mut pairs = Vec::new();
    for group in groups {
        for character in group {
            for original in group {
                if character != original {
                    pairs.push(PairSpec {
                        character: character.clone(),
                        original: original.clone(),
                    });
                }
            }
        }
    }
    pairs
}
