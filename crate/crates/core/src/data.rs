//! Drive sequences, their binary format, dataset manifests, sensor
//! standardization, and the synthetic scenario generator.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::binio::{read_file, write_file, Reader, Writer};
use crate::concepts::{ConceptSet, SourceTag};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::{derived_rng, Rng};

const CGSQ_MAGIC: &[u8; 4] = b"CGSQ";
const CGSQ_VERSION: u32 = 1;
const FLAG_DESCRIPTION: u32 = 1;
const PROFILE_SHIFT: u32 = 1;
const PROFILE_MASK: u32 = 0b11 << PROFILE_SHIFT;

/// Sensor channel order inside a sequence's `T×3` sensor matrix.
pub const SPEED: usize = 0;
pub const ANGLE: usize = 1;
pub const DISTANCE: usize = 2;
pub const SENSOR_CHANNELS: usize = 3;

/// Lead distances above this are excluded from the distance task.
pub const DEFAULT_DISTANCE_CAP: f64 = 70.0;

pub const SPLIT_RATIOS: (f64, f64, f64) = (0.85, 0.05, 0.10);

/// Recording profile a sequence claims to follow.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    #[default]
    None,
    /// 240 frames at 4 fps.
    Comma,
    /// 20 frames at 1 fps.
    Nuscenes,
}

impl Profile {
    /// Required `(frames, fps)`, if any.
    pub fn shape(self) -> Option<(usize, f32)> {
        match self {
            Profile::None => None,
            Profile::Comma => Some((240, 4.0)),
            Profile::Nuscenes => Some((20, 1.0)),
        }
    }

    fn code(self) -> u32 {
        match self {
            Profile::None => 0,
            Profile::Comma => 1,
            Profile::Nuscenes => 2,
        }
    }

    fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Profile::None),
            1 => Some(Profile::Comma),
            2 => Some(Profile::Nuscenes),
            _ => None,
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::None => "none",
            Profile::Comma => "comma",
            Profile::Nuscenes => "nuscenes",
        })
    }
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Profile::None),
            "comma" => Ok(Profile::Comma),
            "nuscenes" => Ok(Profile::Nuscenes),
            other => Err(Error::Parameter(format!("unknown profile `{other}`"))),
        }
    }
}

/// Regression targets at the final frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Targets {
    /// Steering angle, degrees.
    pub angle: f64,
    /// Lead-vehicle distance, meters.
    pub distance: f64,
}

/// One clip: image embeddings, sensor history and targets.
///
/// `sensors` row `t` holds `(v, a, d)` measured at frame `t`. The model only
/// ever sees the previous frame's row at frame `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct DriveSequence {
    pub id: String,
    pub frame_embeddings: Tensor,
    pub sensors: Tensor,
    pub targets: Targets,
    pub fps: f32,
    pub profile: Profile,
    pub description: Option<String>,
}

impl DriveSequence {
    pub fn frames(&self) -> usize {
        self.frame_embeddings.rows()
    }

    pub fn embedding_width(&self) -> usize {
        self.frame_embeddings.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.frames();
        if self.frame_embeddings.shape().len() != 2 || t < 2 {
            return Err(Error::validation(
                "T",
                format!("need at least 2 frames, found {t}"),
            ));
        }
        if self.sensors.shape() != [t, SENSOR_CHANNELS] {
            return Err(Error::validation(
                "sensors",
                format!("expected shape [{t}, 3], found {:?}", self.sensors.shape()),
            ));
        }
        if !self.frame_embeddings.is_finite() {
            return Err(Error::validation("frame_embeddings", "non-finite value"));
        }
        for (name, c) in [("v", SPEED), ("a", ANGLE), ("d", DISTANCE)] {
            for f in 0..t {
                let x = self.sensors.at(f, c);
                if !x.is_finite() {
                    return Err(Error::validation(name, format!("non-finite at frame {f}")));
                }
                if c != ANGLE && x < 0.0 {
                    return Err(Error::validation(
                        name,
                        format!("negative value {x} at frame {f}"),
                    ));
                }
            }
        }
        if !self.targets.angle.is_finite() {
            return Err(Error::validation("target.angle", "non-finite"));
        }
        if !self.targets.distance.is_finite() || self.targets.distance < 0.0 {
            return Err(Error::validation(
                "target.d",
                format!("invalid distance {}", self.targets.distance),
            ));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(Error::validation(
                "fps",
                format!("invalid fps {}", self.fps),
            ));
        }
        if let Some((frames, fps)) = self.profile.shape() {
            if t != frames || self.fps != fps {
                return Err(Error::validation(
                    "profile",
                    format!(
                        "{} profile needs {frames} frames at {fps} fps, found {t} at {}",
                        self.profile, self.fps
                    ),
                ));
            }
        }
        Ok(())
    }
}

/// Serializes a sequence in the CGSQ layout.
pub fn encode_sequence(seq: &DriveSequence) -> Result<Vec<u8>> {
    seq.validate()?;
    let mut w = Writer::default();
    w.bytes(CGSQ_MAGIC);
    w.u32(CGSQ_VERSION);
    w.len_u32(seq.frames())?;
    w.len_u32(seq.embedding_width())?;
    w.f32(seq.fps);
    let mut flags = seq.profile.code() << PROFILE_SHIFT;
    if seq.description.is_some() {
        flags |= FLAG_DESCRIPTION;
    }
    w.u32(flags);
    for &v in seq.frame_embeddings.data() {
        w.f32(v as f32);
    }
    for &v in seq.sensors.data() {
        w.f64(v);
    }
    w.f64(seq.targets.angle);
    w.f64(seq.targets.distance);
    if let Some(desc) = &seq.description {
        w.len_u32(desc.len())?;
        w.bytes(desc.as_bytes());
    }
    Ok(w.buf)
}

/// Parses and validates a CGSQ buffer.
pub fn decode_sequence(bytes: &[u8], id: &str) -> Result<DriveSequence> {
    let mut r = Reader::new(bytes);
    r.magic(CGSQ_MAGIC)?;
    r.version(CGSQ_VERSION)?;
    let t = r.u32()? as usize;
    let l = r.u32()? as usize;
    let fps = r.f32()?;
    let flags_at = r.offset();
    let flags = r.u32()?;
    let profile = Profile::from_code((flags & PROFILE_MASK) >> PROFILE_SHIFT).ok_or_else(|| {
        Error::Format {
            offset: flags_at,
            message: format!("unknown profile code in flags {flags:#x}"),
        }
    })?;
    if flags & !(FLAG_DESCRIPTION | PROFILE_MASK) != 0 {
        return Err(Error::Format {
            offset: flags_at,
            message: format!("unknown flag bits {flags:#x}"),
        });
    }
    let n = t.checked_mul(l).ok_or_else(|| r.fail("T·l overflows"))?;
    let emb = r.f32s(n)?;
    let sensors = r.f64s(t * SENSOR_CHANNELS)?;
    let angle = r.f64()?;
    let distance = r.f64()?;
    let description = if flags & FLAG_DESCRIPTION != 0 {
        let len = r.u32()? as usize;
        let at = r.offset();
        let raw = r.bytes(len)?;
        Some(String::from_utf8(raw.to_vec()).map_err(|_| Error::Format {
            offset: at,
            message: "description is not UTF-8".into(),
        })?)
    } else {
        None
    };
    r.finish()?;
    let seq = DriveSequence {
        id: id.to_string(),
        frame_embeddings: Tensor::matrix(t, l, emb)?,
        sensors: Tensor::matrix(t, SENSOR_CHANNELS, sensors)?,
        targets: Targets { angle, distance },
        fps,
        profile,
        description,
    };
    seq.validate()?;
    Ok(seq)
}

/// Reads a CGSQ file; the sequence id is the file stem.
pub fn read_sequence(path: &Path) -> Result<DriveSequence> {
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_sequence(&read_file(path)?, &id)
}

pub fn write_sequence(seq: &DriveSequence, path: &Path) -> Result<()> {
    write_file(path, &encode_sequence(seq)?)
}

/// Train/validation/test partition.
#[derive(Clone, Debug, Default)]
pub struct SplitData {
    pub train: Vec<DriveSequence>,
    pub val: Vec<DriveSequence>,
    pub test: Vec<DriveSequence>,
}

impl SplitData {
    pub fn embedding_width(&self) -> Result<usize> {
        let mut widths = self
            .train
            .iter()
            .chain(&self.val)
            .chain(&self.test)
            .map(DriveSequence::embedding_width);
        let w = widths
            .next()
            .ok_or_else(|| Error::validation("sequences", "dataset is empty"))?;
        if widths.any(|x| x != w) {
            return Err(Error::validation("frame_embeddings", "inconsistent widths"));
        }
        Ok(w)
    }
}

/// Per-channel standardization statistics, fit on the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub sensor_mean: [f64; 3],
    pub sensor_std: [f64; 3],
    /// Angle then distance.
    pub target_mean: [f64; 2],
    pub target_std: [f64; 2],
}

const STD_FLOOR: f64 = 1e-6;

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count();
    if n == 0 {
        return (0.0, 1.0);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt().max(STD_FLOOR))
}

impl Default for Normalizer {
    fn default() -> Self {
        Normalizer {
            sensor_mean: [0.0; 3],
            sensor_std: [1.0; 3],
            target_mean: [0.0; 2],
            target_std: [1.0; 2],
        }
    }
}

impl Normalizer {
    /// Statistics over every frame of every training sequence. Distance
    /// target statistics skip sequences beyond `distance_cap`.
    pub fn fit(train: &[DriveSequence], distance_cap: f64) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::validation(
                "train",
                "cannot normalize an empty split",
            ));
        }
        let mut out = Normalizer::default();
        for c in 0..SENSOR_CHANNELS {
            let vals = train
                .iter()
                .flat_map(move |s| (0..s.frames()).map(move |t| s.sensors.at(t, c)));
            (out.sensor_mean[c], out.sensor_std[c]) = mean_std(vals);
        }
        (out.target_mean[0], out.target_std[0]) = mean_std(train.iter().map(|s| s.targets.angle));
        (out.target_mean[1], out.target_std[1]) = mean_std(
            train
                .iter()
                .map(|s| s.targets.distance)
                .filter(|d| *d <= distance_cap),
        );
        Ok(out)
    }

    /// Standardized copy of a `T×3` sensor matrix.
    pub fn transform_sensors(&self, sensors: &Tensor) -> Tensor {
        let mut out = sensors.clone();
        for t in 0..out.rows() {
            for (c, v) in out.row_mut(t).iter_mut().enumerate() {
                *v = (*v - self.sensor_mean[c]) / self.sensor_std[c];
            }
        }
        out
    }

    /// `task` is 0 for angle, 1 for distance.
    pub fn normalize_target(&self, task: usize, y: f64) -> f64 {
        (y - self.target_mean[task]) / self.target_std[task]
    }

    pub fn denormalize_target(&self, task: usize, z: f64) -> f64 {
        z * self.target_std[task] + self.target_mean[task]
    }
}

/// Units declared by a manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Units {
    pub angle: String,
    pub distance: String,
    pub speed: String,
}

impl Default for Units {
    fn default() -> Self {
        Units {
            angle: "degrees".into(),
            distance: "meters".into(),
            speed: "m/s".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptFiles {
    pub embeddings: String,
    pub source_tag: SourceTag,
    pub texts: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceEntry {
    pub path: String,
    pub profile: Profile,
}

/// `manifest.json`: what a dataset directory contains. Paths are relative to
/// the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub concepts: ConceptFiles,
    pub dataset: String,
    pub embedding_width: usize,
    pub sequences: Vec<SequenceEntry>,
    pub units: Units,
}

/// A manifest with everything it references loaded and cross-checked.
#[derive(Clone, Debug)]
pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    pub concepts: ConceptSet,
    pub sequences: Vec<DriveSequence>,
}

/// Serializes any value as pretty JSON with lexicographically sorted keys.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value).map_err(|e| Error::Json {
        path: PathBuf::from("<memory>"),
        source: e,
    })?;
    // serde_json's default map is ordered by key.
    let mut s = serde_json::to_string_pretty(&v).expect("values always serialize");
    s.push('\n');
    Ok(s)
}

impl DatasetManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, canonical_json(self)?.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let raw = read_file(path)?;
        serde_json::from_slice(&raw).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })
    }

    /// Reads the manifest and every file it names, checking widths.
    pub fn load(path: &Path) -> Result<LoadedDataset> {
        let manifest = Self::read(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let concepts = ConceptSet::load(
            &base.join(&manifest.concepts.texts),
            &base.join(&manifest.concepts.embeddings),
            manifest.concepts.source_tag,
        )?;
        if concepts.width() != manifest.embedding_width {
            return Err(Error::validation(
                "embedding_width",
                format!(
                    "manifest declares {} but concepts have width {}",
                    manifest.embedding_width,
                    concepts.width()
                ),
            ));
        }
        let mut sequences = Vec::with_capacity(manifest.sequences.len());
        for entry in &manifest.sequences {
            let p = base.join(&entry.path);
            let seq = read_sequence(&p)?;
            if seq.embedding_width() != manifest.embedding_width {
                return Err(Error::validation(
                    "embedding_width",
                    format!(
                        "{} has width {} but manifest declares {}",
                        p.display(),
                        seq.embedding_width(),
                        manifest.embedding_width
                    ),
                ));
            }
            if entry.profile != Profile::None && seq.profile != entry.profile {
                return Err(Error::validation(
                    "profile",
                    format!(
                        "{} is {} but manifest declares {}",
                        p.display(),
                        seq.profile,
                        entry.profile
                    ),
                ));
            }
            sequences.push(seq);
        }
        Ok(LoadedDataset {
            manifest,
            concepts,
            sequences,
        })
    }
}

/// Writes a complete dataset directory (`concepts.txt`, `concepts.emb`, one
/// `<id>.cgsq` per sequence and `manifest.json`) and returns the manifest.
pub fn save_dataset(
    dir: &Path,
    name: &str,
    concepts: &ConceptSet,
    sequences: &[DriveSequence],
) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    crate::concepts::write_concept_texts(&dir.join("concepts.txt"), concepts.texts())?;
    crate::concepts::write_embeddings(&dir.join("concepts.emb"), concepts.embeddings())?;
    let mut entries = Vec::with_capacity(sequences.len());
    for seq in sequences {
        let file = format!("{}.cgsq", seq.id);
        write_sequence(seq, &dir.join(&file))?;
        entries.push(SequenceEntry {
            path: file,
            profile: seq.profile,
        });
    }
    let manifest = DatasetManifest {
        concepts: ConceptFiles {
            embeddings: "concepts.emb".into(),
            source_tag: concepts.source_tag(),
            texts: "concepts.txt".into(),
        },
        dataset: name.to_string(),
        embedding_width: concepts.width(),
        sequences: entries,
        units: Units::default(),
    };
    manifest.write(&dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Parameters of the synthetic scenario generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_sequences: usize,
    pub frames: usize,
    pub embed_dim: usize,
    pub concepts: usize,
    pub seed: u64,
    /// Expected norm of the additive embedding noise; also the standard
    /// deviation of the additive target noise.
    pub noise_std: f64,
    /// Number of concepts the targets depend on (at least 3).
    pub informative: usize,
    pub profile: Profile,
    pub fps: f32,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_sequences: 96,
            frames: 20,
            embed_dim: 32,
            concepts: 24,
            seed: 0,
            noise_std: 0.05,
            informative: 3,
            profile: Profile::None,
            fps: 1.0,
        }
    }
}

/// The hidden rule mapping a frame's concept mix to its targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRule {
    pub distance_base: f64,
    /// `(concept index, coefficient)` pairs added to `distance_base`.
    pub distance_terms: Vec<(usize, f64)>,
    pub angle_terms: Vec<(usize, f64)>,
    pub target_noise_std: f64,
    pub text: String,
}

impl GroundTruthRule {
    fn for_informative(n: usize) -> Self {
        let mut distance_terms = vec![(0, -45.0)];
        let mut angle_terms = vec![(1, 12.0), (2, -12.0)];
        for i in 3..n {
            if i % 2 == 1 {
                distance_terms.push((i, -20.0));
            } else {
                let sign = if (i / 2) % 2 == 0 { 1.0 } else { -1.0 };
                angle_terms.push((i, 6.0 * sign));
            }
        }
        let fmt_terms = |terms: &[(usize, f64)]| {
            terms
                .iter()
                .map(|(j, c)| format!("{c:+}·w[{j}]"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let text = format!(
            "distance = max(0, 60 {}) + noise; angle = {} + noise; w = unit-L2 concept mix of the final frame",
            fmt_terms(&distance_terms),
            fmt_terms(&angle_terms)
        );
        GroundTruthRule {
            distance_base: 60.0,
            distance_terms,
            angle_terms,
            target_noise_std: 0.0,
            text,
        }
    }

    /// Noiseless distance for a sparse mix.
    pub fn distance(&self, mix: &[(usize, f64)]) -> f64 {
        (self.distance_base + apply_terms(&self.distance_terms, mix)).max(0.0)
    }

    pub fn angle(&self, mix: &[(usize, f64)]) -> f64 {
        apply_terms(&self.angle_terms, mix)
    }

    pub fn informative(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .distance_terms
            .iter()
            .chain(&self.angle_terms)
            .map(|t| t.0)
            .collect();
        v.sort_unstable();
        v
    }
}

fn apply_terms(terms: &[(usize, f64)], mix: &[(usize, f64)]) -> f64 {
    terms
        .iter()
        .map(|(j, c)| c * mix.iter().find(|m| m.0 == *j).map_or(0.0, |m| m.1))
        .sum()
}

/// Generated dataset plus everything needed to compute oracle errors.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub concepts: ConceptSet,
    pub sequences: Vec<DriveSequence>,
    pub rule: GroundTruthRule,
    /// Per sequence, per frame: the unit-L2 `(concept, weight)` mix.
    pub mixes: Vec<Vec<Vec<(usize, f64)>>>,
    /// Per sequence: the concept present in every frame.
    pub scene_concepts: Vec<usize>,
}

const SUBJECTS: &[&str] = &[
    "a vehicle in close proximity ahead",
    "a car approaching a junction",
    "a straight empty highway",
    "a truck merging into the lane",
    "a cyclist on the shoulder",
    "a parked car on the roadside",
    "a traffic light turning red",
    "a car changing lanes",
    "a motorcycle splitting lanes",
    "a bus stopping at a station",
    "a trailer truck in the right lane",
    "a slow vehicle ahead",
    "a car braking suddenly",
    "a roundabout",
    "a highway exit ramp",
    "a construction zone with cones",
    "a toll booth",
    "a stop sign at a crossroad",
    "a delivery van double parked",
    "an emergency vehicle with lights",
    "a school zone",
    "a narrow bridge",
    "a tunnel entrance",
    "a car pulling out of a driveway",
    "a lane closure",
];

const CONTEXTS: &[&str] = &[
    "",
    " in the rain",
    " at night",
    " in heavy traffic",
    " on a sunny day",
    " in fog",
    " on a wet road",
    " at dusk",
    " in a residential area",
    " downtown",
    " on a multi-lane freeway",
    " with pedestrians nearby",
    " near a t-junction",
    " in snow",
    " on a curved road",
    " under an overpass",
    " in stop and go traffic",
    " with glare from the sun",
    " near a parking lot",
    " on a rural road",
    " at an intersection",
    " behind a large truck",
    " next to a bike lane",
    " with road markings faded",
    " during rush hour",
    " on a hill",
];

/// Deterministic list of `k` distinct templated scenario texts.
pub fn scenario_texts(k: usize) -> Vec<String> {
    let mut out = Vec::with_capacity(k);
    'outer: for ctx in CONTEXTS {
        for subj in SUBJECTS {
            if out.len() == k {
                break 'outer;
            }
            out.push(format!("a photo of {subj}{ctx}"));
        }
    }
    let mut i = 0;
    while out.len() < k {
        out.push(format!("a photo of driving scenario {i}"));
        i += 1;
    }
    out
}

fn gaussian_vector(rng: &mut Rng, l: usize) -> Vec<f64> {
    (0..l).map(|_| StandardNormal.sample(rng)).collect()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

/// Unit concept vectors; orthonormal whenever `l ≥ k`.
fn concept_vectors(rng: &mut Rng, k: usize, l: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(k);
    while out.len() < k {
        let mut v = gaussian_vector(rng, l);
        if l >= k {
            for u in &out {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
        }
        if v.iter().map(|x| x * x).sum::<f64>() > 1e-6 {
            normalize(&mut v);
            out.push(v);
        }
    }
    out
}

const SCENE_WEIGHT: std::ops::Range<f64> = 0.7..1.0;
const EXTRA_WEIGHT: std::ops::Range<f64> = 0.1..0.6;
/// Per-frame standard deviation of the raw mix-weight random walk.
const WEIGHT_DRIFT: f64 = 0.02;

/// Builds a dataset whose targets are a known function of the final frame's
/// concept mix.
///
/// Every frame mixes the sequence's scene concept (largest weight) with up to
/// two extra concepts, half the time drawn from the informative set. The
/// concepts are fixed per sequence while their weights drift from frame to
/// frame. The scene
/// concept's text becomes the sequence description.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    if spec.concepts < 4 || spec.embed_dim < 4 {
        return Err(Error::Parameter(
            "need at least 4 concepts and embedding width 4".into(),
        ));
    }
    if spec.informative < 3 || spec.informative > spec.concepts {
        return Err(Error::Parameter(format!(
            "informative concepts must be in 3..={}, got {}",
            spec.concepts, spec.informative
        )));
    }
    if spec.frames < 2 || spec.n_sequences == 0 {
        return Err(Error::Parameter(
            "need at least one sequence of 2 frames".into(),
        ));
    }
    if !(spec.noise_std >= 0.0 && spec.noise_std.is_finite()) {
        return Err(Error::Parameter(format!(
            "invalid noise_std {}",
            spec.noise_std
        )));
    }
    if let Some((frames, fps)) = spec.profile.shape() {
        if spec.frames != frames || spec.fps != fps {
            return Err(Error::Parameter(format!(
                "{} profile needs {frames} frames at {fps} fps",
                spec.profile
            )));
        }
    }
    let (k, l) = (spec.concepts, spec.embed_dim);
    let mut rng = derived_rng(spec.seed, "synthetic-concepts");
    let vectors = concept_vectors(&mut rng, k, l);
    let texts = scenario_texts(k);
    let concepts = ConceptSet::new(
        texts.clone(),
        Tensor::matrix(k, l, vectors.concat())?,
        SourceTag::Generated,
    )?;
    let mut rule = GroundTruthRule::for_informative(spec.informative);
    rule.target_noise_std = spec.noise_std;
    let informative: Vec<usize> = (0..spec.informative).collect();
    let emb_noise = spec.noise_std / (l as f64).sqrt();
    let target_noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");

    let mut sequences = Vec::with_capacity(spec.n_sequences);
    let mut mixes = Vec::with_capacity(spec.n_sequences);
    let mut scene_concepts = Vec::with_capacity(spec.n_sequences);
    let mut rng = derived_rng(spec.seed, "synthetic-sequences");
    for s in 0..spec.n_sequences {
        let scene = if rng.random_bool(0.5) {
            *informative.choose(&mut rng).expect("nonempty")
        } else {
            rng.random_range(0..k)
        };
        let mut seq_mixes = Vec::with_capacity(spec.frames);
        let mut emb = Vec::with_capacity(spec.frames * l);
        let mut sensors = Vec::with_capacity(spec.frames * SENSOR_CHANNELS);
        let mut speed: f64 = rng.random_range(5.0..30.0);
        let mut raw = vec![(scene, rng.random_range(SCENE_WEIGHT))];
        for _ in 0..rng.random_range(0..=2usize) {
            let pick = if rng.random_bool(0.8) {
                *informative.choose(&mut rng).expect("nonempty")
            } else {
                rng.random_range(0..k)
            };
            if raw.iter().all(|m| m.0 != pick) {
                raw.push((pick, rng.random_range(EXTRA_WEIGHT)));
            }
        }
        for frame in 0..spec.frames {
            if frame > 0 {
                for (i, (_, w)) in raw.iter_mut().enumerate() {
                    let range = if i == 0 { SCENE_WEIGHT } else { EXTRA_WEIGHT };
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *w = (*w + WEIGHT_DRIFT * z).clamp(range.start, range.end);
                }
            }
            let mut mix = raw.clone();
            let norm = mix.iter().map(|m| m.1 * m.1).sum::<f64>().sqrt();
            mix.iter_mut().for_each(|m| m.1 /= norm);

            let mut x = vec![0.0; l];
            for &(j, w) in &mix {
                x.iter_mut().zip(&vectors[j]).for_each(|(a, b)| *a += w * b);
            }
            if emb_noise > 0.0 {
                for a in x.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *a += emb_noise * z;
                }
            }
            // Stored as f32 on disk; keep in-memory data identical.
            emb.extend(x.into_iter().map(|v| v as f32 as f64));

            let (mut a, mut d) = (rule.angle(&mix), rule.distance(&mix));
            if spec.noise_std > 0.0 {
                a += target_noise.sample(&mut rng);
                d = (d + target_noise.sample(&mut rng)).max(0.0);
            }
            let jolt: f64 = StandardNormal.sample(&mut rng);
            speed = (speed + 0.5 * jolt).max(0.0);
            sensors.extend([speed, a, d]);
            seq_mixes.push(mix);
        }
        let last = (spec.frames - 1) * SENSOR_CHANNELS;
        let targets = Targets {
            angle: sensors[last + ANGLE],
            distance: sensors[last + DISTANCE],
        };
        let seq = DriveSequence {
            id: format!("seq_{s:04}"),
            frame_embeddings: Tensor::matrix(spec.frames, l, emb)?,
            sensors: Tensor::matrix(spec.frames, SENSOR_CHANNELS, sensors)?,
            targets,
            fps: spec.fps,
            profile: spec.profile,
            description: Some(texts[scene].clone()),
        };
        seq.validate()?;
        sequences.push(seq);
        mixes.push(seq_mixes);
        scene_concepts.push(scene);
    }
    Ok(SyntheticDataset {
        concepts,
        sequences,
        rule,
        mixes,
        scene_concepts,
    })
}
