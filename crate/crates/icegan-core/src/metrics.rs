//! Recognition metrics (UF1, UAR, macro-F1), the LOSO evaluation harness
//! with pluggable per-fold classifiers, and squared-difference maps with
//! top-region reports.

use crate::data::{LosoSplit, MeClass, Sample, N_CLASSES};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::Serialize;
use std::collections::BTreeMap;

/// 3x3 integer counts, rows = true class, columns = predicted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; N_CLASSES]; N_CLASSES],
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, true_class: usize, predicted: usize) {
        self.counts[true_class][predicted] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for t in 0..N_CLASSES {
            for p in 0..N_CLASSES {
                self.counts[t][p] += other.counts[t][p];
            }
        }
    }

    pub fn per_class_f1(&self) -> [f64; N_CLASSES] {
        let mut f1 = [0.0; N_CLASSES];
        for c in 0..N_CLASSES {
            let tp = self.counts[c][c];
            let fp: u64 = (0..N_CLASSES).filter(|&t| t != c).map(|t| self.counts[t][c]).sum();
            let fn_: u64 = (0..N_CLASSES).filter(|&p| p != c).map(|p| self.counts[c][p]).sum();
            let denom = 2 * tp + fp + fn_;
            f1[c] = if denom == 0 {
                0.0
            } else {
                2.0 * tp as f64 / denom as f64
            };
        }
        f1
    }

    pub fn per_class_recall(&self) -> [f64; N_CLASSES] {
        let mut rec = [0.0; N_CLASSES];
        for c in 0..N_CLASSES {
            let tp = self.counts[c][c];
            let total: u64 = self.counts[c].iter().sum();
            rec[c] = if total == 0 {
                0.0
            } else {
                tp as f64 / total as f64
            };
        }
        rec
    }

    /// Unweighted F1 (macro mean of per-class F1) and unweighted average
    /// recall. Errors on an empty matrix.
    pub fn uf1_uar(&self) -> Result<(f64, f64)> {
        if self.total() == 0 {
            return Err(Error::Corpus("metrics over an empty confusion matrix".into()));
        }
        let uf1 = self.per_class_f1().iter().sum::<f64>() / N_CLASSES as f64;
        let uar = self.per_class_recall().iter().sum::<f64>() / N_CLASSES as f64;
        Ok((uf1, uar))
    }
}

/// Per-dataset sub-report inside a metrics report.
#[derive(Clone, Debug, Serialize)]
pub struct SubReport {
    pub uf1: f64,
    pub uar: f64,
    pub macro_f1: f64,
    pub confusion: ConfusionMatrix,
}

impl SubReport {
    fn from_cm(cm: ConfusionMatrix) -> Result<Self> {
        let (uf1, uar) = cm.uf1_uar()?;
        Ok(SubReport {
            uf1,
            uar,
            macro_f1: uf1,
            confusion: cm,
        })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricsReport {
    pub uf1: f64,
    pub uar: f64,
    pub macro_f1: f64,
    pub per_class_f1: [f64; N_CLASSES],
    pub per_class_recall: [f64; N_CLASSES],
    pub confusion: ConfusionMatrix,
    pub per_dataset: BTreeMap<String, SubReport>,
    pub fold_count: usize,
    pub skipped_folds: Vec<String>,
    pub incomplete: bool,
}

impl MetricsReport {
    pub fn from_confusions(
        pooled: ConfusionMatrix,
        per_dataset_cms: BTreeMap<String, ConfusionMatrix>,
        fold_count: usize,
        skipped_folds: Vec<String>,
    ) -> Result<Self> {
        let (uf1, uar) = pooled.uf1_uar()?;
        let mut per_dataset = BTreeMap::new();
        for (k, cm) in per_dataset_cms {
            if cm.total() > 0 {
                per_dataset.insert(k, SubReport::from_cm(cm)?);
            }
        }
        Ok(MetricsReport {
            uf1,
            uar,
            macro_f1: uf1,
            per_class_f1: pooled.per_class_f1(),
            per_class_recall: pooled.per_class_recall(),
            confusion: pooled,
            per_dataset,
            fold_count,
            incomplete: !skipped_folds.is_empty(),
            skipped_folds,
        })
    }

    /// Fixed-width results table: pooled scores first, then one row per
    /// dataset.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str("+----------------+--------+--------+--------+---------+\n");
        out.push_str("| Scope          | UF1    | UAR    | F1     | Samples |\n");
        out.push_str("+----------------+--------+--------+--------+---------+\n");
        out.push_str(&format!(
            "| {:<14} | {:>6.4} | {:>6.4} | {:>6.4} | {:>7} |\n",
            "pooled",
            self.uf1,
            self.uar,
            self.macro_f1,
            self.confusion.total()
        ));
        for (name, sub) in &self.per_dataset {
            out.push_str(&format!(
                "| {:<14} | {:>6.4} | {:>6.4} | {:>6.4} | {:>7} |\n",
                name,
                sub.uf1,
                sub.uar,
                sub.macro_f1,
                sub.confusion.total()
            ));
        }
        out.push_str("+----------------+--------+--------+--------+---------+\n");
        if self.incomplete {
            out.push_str(&format!(
                "incomplete: skipped folds {:?}\n",
                self.skipped_folds
            ));
        }
        out
    }
}

/// One evaluated sample, written to the JSON-lines prediction dump.
#[derive(Clone, Debug, Serialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub subject_id: String,
    pub dataset: String,
    pub true_class: String,
    pub predicted_class: String,
    pub adv_len: Option<f64>,
    pub exp_lengths: Vec<f64>,
}

/// Classifier output on one sample.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub class: usize,
    pub exp_lengths: Vec<f64>,
    pub adv_len: Option<f64>,
}

/// A trained per-fold model.
pub trait FoldClassifier: Send {
    fn predict(&self, sample: &Sample) -> Result<Prediction>;
}

/// Trains one classifier per LOSO fold.
pub trait ClassifierFactory: Sync {
    fn train_fold(
        &self,
        corpus: &[Sample],
        fold: &LosoSplit,
        fold_idx: usize,
    ) -> Result<Box<dyn FoldClassifier>>;
}

pub struct LosoOutcome {
    pub report: MetricsReport,
    pub records: Vec<PredictionRecord>,
    pub per_fold: Vec<(String, Option<ConfusionMatrix>)>,
}

/// Trains per fold, predicts the held-out subject, pools one global
/// confusion matrix plus per-dataset matrices. Failed folds are recorded
/// and skipped; the report flags incompleteness. `jobs` caps fold-level
/// parallelism.
pub fn evaluate_loso(
    factory: &dyn ClassifierFactory,
    corpus: &[Sample],
    folds: &[LosoSplit],
    jobs: usize,
) -> Result<LosoOutcome> {
    let jobs = jobs.max(1);
    type FoldResult = Result<(ConfusionMatrix, Vec<PredictionRecord>)>;

    let run_fold = |fold_idx: usize, fold: &LosoSplit| -> FoldResult {
        let model = factory.train_fold(corpus, fold, fold_idx)?;
        let mut cm = ConfusionMatrix::new();
        let mut records = Vec::with_capacity(fold.test.len());
        for &i in &fold.test {
            let s = &corpus[i];
            let pred = model.predict(s)?;
            cm.record(s.class.index(), pred.class);
            records.push(PredictionRecord {
                sample_id: s.id.clone(),
                subject_id: s.subject_id.clone(),
                dataset: s.dataset.to_string(),
                true_class: s.class.to_string(),
                predicted_class: MeClass::from_index(pred.class)?.to_string(),
                adv_len: pred.adv_len,
                exp_lengths: pred.exp_lengths,
            });
        }
        Ok((cm, records))
    };

    let mut results: Vec<Option<FoldResult>> = (0..folds.len()).map(|_| None).collect();
    if jobs == 1 {
        for (i, fold) in folds.iter().enumerate() {
            results[i] = Some(run_fold(i, fold));
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots: Vec<std::sync::Mutex<Option<FoldResult>>> =
            (0..folds.len()).map(|_| std::sync::Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..jobs.min(folds.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if i >= folds.len() {
                        break;
                    }
                    let out = run_fold(i, &folds[i]);
                    *slots[i].lock().expect("poisoned fold slot") = Some(out);
                });
            }
        });
        for (i, slot) in slots.into_iter().enumerate() {
            results[i] = slot.into_inner().expect("poisoned fold slot");
        }
    }

    let mut pooled = ConfusionMatrix::new();
    let mut per_dataset: BTreeMap<String, ConfusionMatrix> = BTreeMap::new();
    let mut per_fold = Vec::new();
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for (fold, outcome) in folds.iter().zip(results) {
        match outcome.expect("every fold executed") {
            Ok((cm, recs)) => {
                pooled.merge(&cm);
                for r in &recs {
                    per_dataset
                        .entry(r.dataset.clone())
                        .or_default()
                        .record(
                            r.true_class.parse::<MeClass>()?.index(),
                            r.predicted_class.parse::<MeClass>()?.index(),
                        );
                }
                records.extend(recs);
                per_fold.push((fold.held_out.clone(), Some(cm)));
            }
            Err(e) => {
                eprintln!("warning: fold {} failed and was skipped: {e}", fold.held_out);
                skipped.push(fold.held_out.clone());
                per_fold.push((fold.held_out.clone(), None));
            }
        }
    }
    let report = MetricsReport::from_confusions(pooled, per_dataset, folds.len(), skipped)?;
    Ok(LosoOutcome {
        report,
        records,
        per_fold,
    })
}

// ---- reference classifiers for harness self-tests ----

/// Upper-bound harness check: reads the true label.
pub struct OracleFactory;

impl ClassifierFactory for OracleFactory {
    fn train_fold(&self, _: &[Sample], _: &LosoSplit, _: usize) -> Result<Box<dyn FoldClassifier>> {
        struct Oracle;
        impl FoldClassifier for Oracle {
            fn predict(&self, sample: &Sample) -> Result<Prediction> {
                Ok(Prediction {
                    class: sample.class.index(),
                    exp_lengths: vec![0.0; N_CLASSES],
                    adv_len: None,
                })
            }
        }
        Ok(Box::new(Oracle))
    }
}

/// Uniform random predictions, deterministic per sample id.
pub struct UniformRandomFactory {
    pub seed: u64,
}

impl ClassifierFactory for UniformRandomFactory {
    fn train_fold(&self, _: &[Sample], _: &LosoSplit, _: usize) -> Result<Box<dyn FoldClassifier>> {
        struct Rnd {
            seed: u64,
        }
        impl FoldClassifier for Rnd {
            fn predict(&self, sample: &Sample) -> Result<Prediction> {
                let h = crate::rng::derive_seed(self.seed, &sample.id);
                Ok(Prediction {
                    class: (h % N_CLASSES as u64) as usize,
                    exp_lengths: vec![0.0; N_CLASSES],
                    adv_len: None,
                })
            }
        }
        Ok(Box::new(Rnd { seed: self.seed }))
    }
}

/// Always predicts the training fold's most frequent class.
pub struct MajorityFactory;

impl ClassifierFactory for MajorityFactory {
    fn train_fold(
        &self,
        corpus: &[Sample],
        fold: &LosoSplit,
        _: usize,
    ) -> Result<Box<dyn FoldClassifier>> {
        let mut counts = [0usize; N_CLASSES];
        for &i in &fold.train {
            counts[corpus[i].class.index()] += 1;
        }
        let majority = counts
            .iter()
            .enumerate()
            .max_by_key(|(_, &c)| c)
            .map(|(i, _)| i)
            .unwrap_or(0);
        struct Majority {
            class: usize,
        }
        impl FoldClassifier for Majority {
            fn predict(&self, _: &Sample) -> Result<Prediction> {
                Ok(Prediction {
                    class: self.class,
                    exp_lengths: vec![0.0; N_CLASSES],
                    adv_len: None,
                })
            }
        }
        Ok(Box::new(Majority { class: majority }))
    }
}

// ---- difference maps ----

#[derive(Clone, Debug, Serialize)]
pub struct RegionReport {
    pub centroid: (f64, f64),
    /// (y0, x0, y1, x1) inclusive.
    pub bbox: (usize, usize, usize, usize),
    pub pixels: usize,
}

pub struct DiffMap {
    /// Min-max normalized squared differences in [0,1], shape `[h, w]`.
    pub map: Tensor,
    /// Indices of the top-5% intensity pixels, empty for a flat map.
    pub top_region: Vec<usize>,
    pub region: Option<RegionReport>,
}

/// Per-pixel squared difference between a synthetic image and its onset,
/// min-max normalized, with the top-5% intensity region summarized.
pub fn norm2_diff(x_syn: &Tensor, x_on: &Tensor) -> Result<DiffMap> {
    if x_syn.shape != x_on.shape {
        return Err(Error::ShapeMismatch {
            context: "norm2_diff".into(),
            lhs: x_syn.shape.clone(),
            rhs: x_on.shape.clone(),
        });
    }
    let (h, w) = match x_syn.shape.as_slice() {
        [1, 1, h, w] => (*h, *w),
        [h, w] => (*h, *w),
        other => {
            return Err(Error::BadGeometry {
                expected: "single grayscale image".into(),
                got: format!("{other:?}"),
            })
        }
    };
    let mut map: Vec<f64> = x_syn
        .data
        .iter()
        .zip(&x_on.data)
        .map(|(a, b)| (a - b) * (a - b))
        .collect();
    let max = map.iter().cloned().fold(0.0, f64::max);
    let min = map.iter().cloned().fold(f64::INFINITY, f64::min);
    let flat = max - min <= 0.0;
    if !flat {
        for v in map.iter_mut() {
            *v = (*v - min) / (max - min);
        }
    } else {
        map.fill(0.0);
    }
    let (top_region, region) = if flat {
        (Vec::new(), None)
    } else {
        let k = ((h * w) as f64 * 0.05).ceil().max(1.0) as usize;
        let mut order: Vec<usize> = (0..map.len()).collect();
        order.sort_by(|&a, &b| map[b].partial_cmp(&map[a]).expect("finite map").then(a.cmp(&b)));
        let mut top: Vec<usize> = order.into_iter().take(k).collect();
        top.sort_unstable();
        let mut sy = 0.0;
        let mut sx = 0.0;
        let (mut y0, mut x0, mut y1, mut x1) = (usize::MAX, usize::MAX, 0, 0);
        for &i in &top {
            let (y, x) = (i / w, i % w);
            sy += y as f64;
            sx += x as f64;
            y0 = y0.min(y);
            x0 = x0.min(x);
            y1 = y1.max(y);
            x1 = x1.max(x);
        }
        let n = top.len() as f64;
        let report = RegionReport {
            centroid: (sy / n, sx / n),
            bbox: (y0, x0, y1, x1),
            pixels: top.len(),
        };
        (top, Some(report))
    };
    Ok(DiffMap {
        map: Tensor::new(vec![h, w], map)?,
        top_region,
        region,
    })
}

/// Intersection-over-union between a pixel-index set and a boolean mask.
pub fn region_iou(region: &[usize], mask: &[bool]) -> f64 {
    let mask_count = mask.iter().filter(|&&m| m).count();
    if region.is_empty() && mask_count == 0 {
        return 1.0;
    }
    let inter = region.iter().filter(|&&i| mask[i]).count();
    let union = mask_count + region.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Brute-force UF1/UAR recomputation with bare loops; the oracle the tape
/// implementation is checked against.
pub fn uf1_uar_naive(cm: &ConfusionMatrix) -> (f64, f64) {
    let mut f1_sum = 0.0;
    let mut rec_sum = 0.0;
    for c in 0..N_CLASSES {
        let mut tp = 0u64;
        let mut fp = 0u64;
        let mut fn_ = 0u64;
        let mut support = 0u64;
        for t in 0..N_CLASSES {
            for p in 0..N_CLASSES {
                let n = cm.counts[t][p];
                if t == c {
                    support += n;
                    if p == c {
                        tp += n;
                    } else {
                        fn_ += n;
                    }
                } else if p == c {
                    fp += n;
                }
            }
        }
        f1_sum += if 2 * tp + fp + fn_ == 0 {
            0.0
        } else {
            2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
        };
        rec_sum += if support == 0 {
            0.0
        } else {
            tp as f64 / support as f64
        };
    }
    (f1_sum / N_CLASSES as f64, rec_sum / N_CLASSES as f64)
}
