//! Sample records, the procedural toy face corpus, neighbor augmentation,
//! subject-wise LOSO folds, and ingestion of pre-cropped real corpora.

use crate::error::{Error, Result};
use crate::pgm;
use crate::rng;
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const IMAGE_SIZE: usize = 128;
const NPIX: usize = IMAGE_SIZE * IMAGE_SIZE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetId {
    Toy,
    Smic,
    Casme2,
    Samm,
}

impl std::str::FromStr for DatasetId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "toy" => Ok(DatasetId::Toy),
            "smic" => Ok(DatasetId::Smic),
            "casme2" | "casme_ii" | "casmeii" => Ok(DatasetId::Casme2),
            "samm" => Ok(DatasetId::Samm),
            other => Err(Error::Corpus(format!("unknown dataset id {other:?}"))),
        }
    }
}

impl std::fmt::Display for DatasetId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            DatasetId::Toy => "toy",
            DatasetId::Smic => "smic",
            DatasetId::Casme2 => "casme2",
            DatasetId::Samm => "samm",
        };
        f.write_str(s)
    }
}

/// The three-class micro-expression scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeClass {
    Positive,
    Negative,
    Surprise,
}

pub const N_CLASSES: usize = 3;

impl MeClass {
    pub fn index(self) -> usize {
        match self {
            MeClass::Positive => 0,
            MeClass::Negative => 1,
            MeClass::Surprise => 2,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(MeClass::Positive),
            1 => Ok(MeClass::Negative),
            2 => Ok(MeClass::Surprise),
            other => Err(Error::InvalidClass {
                got: other,
                n_classes: N_CLASSES,
            }),
        }
    }

    pub const ALL: [MeClass; 3] = [MeClass::Positive, MeClass::Negative, MeClass::Surprise];
}

impl std::fmt::Display for MeClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            MeClass::Positive => "positive",
            MeClass::Negative => "negative",
            MeClass::Surprise => "surprise",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for MeClass {
    type Err = Error;
    /// Maps raw corpus emotion labels onto the three-class scheme.
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "positive" | "pos" | "happiness" | "happy" => Ok(MeClass::Positive),
            "negative" | "neg" | "disgust" | "repression" | "anger" | "contempt" | "fear"
            | "sadness" => Ok(MeClass::Negative),
            "surprise" | "sur" => Ok(MeClass::Surprise),
            other => Err(Error::Corpus(format!("unknown class label {other:?}"))),
        }
    }
}

/// One onset/apex pair. Images are `[1,1,128,128]` tensors in [-1,1].
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub subject_id: String,
    pub dataset: DatasetId,
    pub class: MeClass,
    pub onset: Tensor,
    pub apex: Tensor,
    /// 0 for the apex frame itself, -2..2 for neighbor variants.
    pub neighbor_index: i8,
}

// ---- toy face geometry ----

/// Per-subject identity: oval geometry, anchor coordinates and a smooth
/// texture field, all derived deterministically from the corpus seed.
#[derive(Clone, Debug)]
pub struct SubjectGeometry {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    pub skin: f64,
    pub eye_dx: f64,
    pub eye_y: f64,
    pub brow_y: f64,
    pub mouth_y: f64,
    pub mouth_hw: f64,
    texture: Vec<(f64, f64, f64, f64)>, // (amp, fx, fy, phase)
}

impl SubjectGeometry {
    pub fn derive(seed: u64, subject: usize) -> Self {
        let mut r = rng::stream(seed, &format!("toy/subject{subject}/geometry"));
        let cx = 64.0 + r.gen_range(-4.0..4.0);
        let cy = 66.0 + r.gen_range(-4.0..4.0);
        let rx = r.gen_range(38.0..46.0);
        let ry = r.gen_range(48.0..56.0);
        let skin = r.gen_range(0.58..0.75);
        let eye_dx = 0.42 * rx;
        let eye_y = cy - 0.30 * ry;
        let brow_y = eye_y - 0.18 * ry;
        let mouth_y = cy + 0.45 * ry;
        let mouth_hw = 0.26 * rx;
        let texture = (0..4)
            .map(|_| {
                (
                    r.gen_range(0.01..0.025),
                    r.gen_range(0.5..3.0) / IMAGE_SIZE as f64,
                    r.gen_range(0.5..3.0) / IMAGE_SIZE as f64,
                    r.gen_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        SubjectGeometry {
            cx,
            cy,
            rx,
            ry,
            skin,
            eye_dx,
            eye_y,
            brow_y,
            mouth_y,
            mouth_hw,
            texture,
        }
    }

    /// Neutral base face in [0,1].
    pub fn draw_base(&self) -> Vec<f64> {
        let mut img = vec![0.0; NPIX];
        for y in 0..IMAGE_SIZE {
            for x in 0..IMAGE_SIZE {
                let (xf, yf) = (x as f64, y as f64);
                let d = ((xf - self.cx) / self.rx).powi(2) + ((yf - self.cy) / self.ry).powi(2);
                let edge = ((1.0 - d) / 0.08).clamp(0.0, 1.0);
                let mut tex = 0.0;
                for &(a, fx, fy, ph) in &self.texture {
                    tex += a * (std::f64::consts::TAU * (fx * xf + fy * yf) + ph).cos();
                }
                let skin_here = self.skin + tex;
                let mut v = 0.12 + edge * (skin_here - 0.12);

                // Facial features as smooth darkening fields.
                let mut dark = 0.0;
                for side in [-1.0, 1.0] {
                    let ex = self.cx + side * self.eye_dx;
                    dark += 0.38 * blob(xf, yf, ex, self.eye_y, 0.11 * self.rx, 0.06 * self.ry);
                    dark += 0.30 * blob(xf, yf, ex, self.brow_y, 0.16 * self.rx, 0.035 * self.ry);
                }
                dark += 0.30 * blob(xf, yf, self.cx, self.mouth_y, self.mouth_hw, 0.045 * self.ry);
                dark += 0.10 * blob(xf, yf, self.cx, self.cy + 0.12 * self.ry, 0.05 * self.rx, 0.16 * self.ry);
                v -= edge * dark;
                img[y * IMAGE_SIZE + x] = v.clamp(0.0, 1.0);
            }
        }
        img
    }

    /// Blob centers of the class-specific deformation.
    pub fn patch_centers(&self, class: MeClass) -> Vec<(f64, f64)> {
        match class {
            MeClass::Positive => vec![
                (self.cx - 1.15 * self.mouth_hw, self.mouth_y),
                (self.cx + 1.15 * self.mouth_hw, self.mouth_y),
            ],
            MeClass::Negative => vec![(self.cx, self.brow_y - 0.06 * self.ry)],
            MeClass::Surprise => vec![
                (self.cx - 0.46 * self.rx, self.brow_y - 0.14 * self.ry),
                (self.cx + 0.46 * self.rx, self.brow_y - 0.14 * self.ry),
            ],
        }
    }

    pub fn patch_sigma(&self) -> f64 {
        0.09 * self.rx
    }

    /// Additive deformation field with unit peak amplitude.
    pub fn patch_field(&self, class: MeClass) -> Vec<f64> {
        let sigma = self.patch_sigma();
        let centers = self.patch_centers(class);
        let mut field = vec![0.0; NPIX];
        for y in 0..IMAGE_SIZE {
            for x in 0..IMAGE_SIZE {
                let (xf, yf) = (x as f64, y as f64);
                let mut v = 0.0;
                for &(px, py) in &centers {
                    let d2 = (xf - px).powi(2) + (yf - py).powi(2);
                    v += (-d2 / (2.0 * sigma * sigma)).exp();
                }
                field[y * IMAGE_SIZE + x] = v;
            }
        }
        field
    }

    /// Ground-truth patch mask at 10% of peak deformation.
    pub fn patch_mask(&self, class: MeClass) -> Vec<bool> {
        self.patch_field(class).iter().map(|&v| v >= 0.1).collect()
    }
}

fn blob(x: f64, y: f64, cx: f64, cy: f64, sx: f64, sy: f64) -> f64 {
    let dx = (x - cx) / sx;
    let dy = (y - cy) / sy;
    (-(dx * dx + dy * dy) / 2.0).exp()
}

fn to_signed(img01: &[f64]) -> Tensor {
    Tensor::new(
        vec![1, 1, IMAGE_SIZE, IMAGE_SIZE],
        img01.iter().map(|v| v * 2.0 - 1.0).collect(),
    )
    .expect("static dims")
}

/// Deterministic procedural corpus: `n_subjects` toy identities, a balanced
/// class rotation of `samples_per_subject` apex samples each.
pub fn generate_toy_corpus(
    n_subjects: usize,
    samples_per_subject: usize,
    seed: u64,
) -> Result<Vec<Sample>> {
    if n_subjects < 3 || samples_per_subject == 0 {
        return Err(Error::Corpus(format!(
            "degenerate toy corpus: {n_subjects} subjects x {samples_per_subject} samples"
        )));
    }
    let mut corpus = Vec::with_capacity(n_subjects * samples_per_subject);
    for si in 0..n_subjects {
        let geom = SubjectGeometry::derive(seed, si);
        let base = geom.draw_base();
        for ii in 0..samples_per_subject {
            let class = MeClass::from_index(ii % N_CLASSES)?;
            let mut r = rng::stream(seed, &format!("toy/subject{si}/sample{ii}"));
            let amplitude = r.gen_range(0.15..0.30);
            let field = geom.patch_field(class);
            let mut onset01 = base.clone();
            // Per-sample sensor noise, shared by onset and apex so the
            // difference map carries the deformation only.
            for v in onset01.iter_mut() {
                *v = (*v + r.gen_range(-0.005..0.005)).clamp(0.0, 1.0);
            }
            let apex01: Vec<f64> = onset01
                .iter()
                .zip(&field)
                .map(|(&v, &f)| (v - amplitude * f).clamp(0.0, 1.0))
                .collect();
            let subject_id = format!("s{si:02}");
            corpus.push(Sample {
                id: format!("{subject_id}_e{ii:02}"),
                subject_id,
                dataset: DatasetId::Toy,
                class,
                onset: to_signed(&onset01),
                apex: to_signed(&apex01),
                neighbor_index: 0,
            });
        }
    }
    Ok(corpus)
}

/// Apex plus four neighbor variants of equal expressive intensity class.
/// Toy neighbors jitter the apex deformation by up to ±10%.
pub fn augment_neighbors(sample: &Sample) -> Vec<Sample> {
    const FACTORS: [(i8, f64); 5] = [(-2, 0.90), (-1, 0.95), (0, 1.0), (1, 1.05), (2, 1.10)];
    FACTORS
        .iter()
        .map(|&(idx, factor)| {
            if idx == 0 {
                let mut s = sample.clone();
                s.neighbor_index = 0;
                return s;
            }
            let apex: Vec<f64> = sample
                .onset
                .data
                .iter()
                .zip(&sample.apex.data)
                .map(|(&on, &ap)| (on + (ap - on) * factor).clamp(-1.0, 1.0))
                .collect();
            Sample {
                id: format!("{}_n{idx:+}", sample.id),
                subject_id: sample.subject_id.clone(),
                dataset: sample.dataset,
                class: sample.class,
                onset: sample.onset.clone(),
                apex: Tensor::new(sample.apex.shape.clone(), apex).expect("same dims"),
                neighbor_index: idx,
            }
        })
        .collect()
}

// ---- LOSO splits ----

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Cross-database: all datasets pooled.
    Cde,
    /// Single-database: one dataset only.
    Sde(DatasetId),
}

/// One leave-one-subject-out fold, holding sample indices into the corpus.
#[derive(Clone, Debug)]
pub struct LosoSplit {
    pub held_out: String,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub mode: EvalMode,
}

/// One fold per subject, in sorted subject order. SDE filters to a single
/// dataset before splitting.
pub fn loso_folds(corpus: &[Sample], mode: EvalMode) -> Result<Vec<LosoSplit>> {
    let in_scope = |s: &Sample| match mode {
        EvalMode::Cde => true,
        EvalMode::Sde(d) => s.dataset == d,
    };
    let mut subjects: Vec<String> = corpus
        .iter()
        .filter(|s| in_scope(s))
        .map(|s| s.subject_id.clone())
        .collect();
    subjects.sort();
    subjects.dedup();
    if subjects.len() < 2 {
        return Err(Error::Corpus(format!(
            "LOSO requires at least 2 subjects, found {}",
            subjects.len()
        )));
    }
    Ok(subjects
        .iter()
        .map(|held| {
            let mut train = Vec::new();
            let mut test = Vec::new();
            for (i, s) in corpus.iter().enumerate() {
                if !in_scope(s) {
                    continue;
                }
                if &s.subject_id == held {
                    test.push(i);
                } else {
                    train.push(i);
                }
            }
            LosoSplit {
                held_out: held.clone(),
                train,
                test,
                mode,
            }
        })
        .collect())
}

// ---- real-data ingestion ----

#[derive(Debug, Deserialize)]
struct ManifestRow {
    subject: String,
    dataset: String,
    class: String,
    onset_path: String,
    apex_path: String,
}

/// Validated ingestion of pre-cropped 128x128 grayscale corpora described
/// by a CSV manifest. All problems are itemized; any error fails the whole
/// ingest. An empty manifest yields an empty list plus a warning.
pub fn ingest_real(manifest_path: &Path) -> Result<(Vec<Sample>, Vec<String>)> {
    let mut reader = csv::Reader::from_path(manifest_path).map_err(Error::Csv)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut samples = Vec::new();
    let mut problems = Vec::new();
    let mut warnings = Vec::new();
    for (i, row) in reader.deserialize::<ManifestRow>().enumerate() {
        let line = i + 2; // header is line 1
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                problems.push(format!("line {line}: malformed row: {e}"));
                continue;
            }
        };
        let dataset = match row.dataset.parse::<DatasetId>() {
            Ok(d) => d,
            Err(e) => {
                problems.push(format!("line {line}: {e}"));
                continue;
            }
        };
        let class = match row.class.parse::<MeClass>() {
            Ok(c) => c,
            Err(e) => {
                problems.push(format!("line {line}: {e}"));
                continue;
            }
        };
        let mut load = |which: &str, rel: &str| -> Option<Tensor> {
            let p = base.join(rel);
            match pgm::read_pgm(&p) {
                Err(e) => {
                    problems.push(format!("line {line}: {which} image: {e}"));
                    None
                }
                Ok(t) => {
                    if t.shape != [1, 1, IMAGE_SIZE, IMAGE_SIZE] {
                        problems.push(format!(
                            "line {line}: {which} image {}: expected {IMAGE_SIZE}x{IMAGE_SIZE}, got {}x{}",
                            p.display(),
                            t.shape[2],
                            t.shape[3]
                        ));
                        None
                    } else {
                        Some(t)
                    }
                }
            }
        };
        let onset = load("onset", &row.onset_path);
        let apex = load("apex", &row.apex_path);
        if let (Some(onset), Some(apex)) = (onset, apex) {
            samples.push(Sample {
                id: format!("{}_{}_{}", row.dataset, row.subject, i),
                subject_id: row.subject,
                dataset,
                class,
                onset,
                apex,
                neighbor_index: 0,
            });
        }
    }
    if !problems.is_empty() {
        return Err(Error::Manifest(problems));
    }
    if samples.is_empty() {
        warnings.push(format!(
            "manifest {} contains no samples",
            manifest_path.display()
        ));
    }
    Ok((samples, warnings))
}
