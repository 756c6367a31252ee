//! Overlap, detection and confusion-matrix metrics. All percentages.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::components::{split_components, Connectivity};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::tumor_mask::{axial_diameter, SMALL_TUMOR_MM};
use crate::volume::LabelMap;

/// Dice overlap of the nonzero voxels, in percent; 100 when both are empty.
pub fn dice(pre: &Grid<u8>, gro: &Grid<u8>) -> Result<f64> {
    pre.ensure_same_shape(gro)?;
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&p, &g) in pre.as_slice().iter().zip(gro.as_slice()) {
        let (p, g) = (p != 0, g != 0);
        a += usize::from(p);
        b += usize::from(g);
        both += usize::from(p && g);
    }
    if a + b == 0 {
        return Ok(100.0);
    }
    Ok(200.0 * both as f64 / (a + b) as f64)
}

/// Ground-truth instances as 26-connected components.
pub fn gt_instances(gt: &Grid<u8>) -> Vec<Grid<u8>> {
    split_components(gt, Connectivity::Full26)
}

/// An instance is detected when any predicted voxel falls inside it.
pub fn detect_instances(pred: &Grid<u8>, instances: &[Grid<u8>]) -> Result<Vec<bool>> {
    let mut owner = vec![usize::MAX; pred.len()];
    for (k, inst) in instances.iter().enumerate() {
        pred.ensure_same_shape(inst)?;
        for (i, &v) in inst.as_slice().iter().enumerate() {
            if v != 0 {
                if owner[i] != usize::MAX {
                    return Err(Error::OverlappingInstances(owner[i], k));
                }
                owner[i] = k;
            }
        }
    }
    let mut hit = vec![false; instances.len()];
    for (i, &p) in pred.as_slice().iter().enumerate() {
        if p != 0 && owner[i] != usize::MAX {
            hit[owner[i]] = true;
        }
    }
    Ok(hit)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub n_total: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, tn: u64, fp: u64, fn_: u64) -> Self {
        ConfusionCounts {
            tp,
            tn,
            fp,
            fn_,
            n_total: tp + tn + fp + fn_,
        }
    }

    pub fn add(&mut self, o: &ConfusionCounts) {
        *self = ConfusionCounts::new(self.tp + o.tp, self.tn + o.tn, self.fp + o.fp, self.fn_ + o.fn_);
    }

    pub fn is_consistent(&self) -> bool {
        self.tp + self.tn + self.fp + self.fn_ == self.n_total
    }
}

/// `None` marks a 0/0 ratio.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ConfusionMetrics {
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

fn pct(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| 100.0 * num as f64 / den as f64)
}

pub fn confusion_metrics(c: &ConfusionCounts) -> ConfusionMetrics {
    let precision = pct(c.tp, c.tp + c.fp);
    let recall = pct(c.tp, c.tp + c.fn_);
    ConfusionMetrics {
        sensitivity: recall,
        specificity: pct(c.tn, c.tn + c.fp),
        accuracy: pct(c.tp + c.tn, c.n_total),
        precision,
        recall,
        // Count form of the harmonic mean; also covers P = R = 0.
        f1: pct(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
    }
}

/// Mean of the defined values; `None` when nothing is defined.
pub fn mean_defined(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values.into_iter().flatten() {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

/// Splits instance indices by diameter: `(small, large)`.
pub fn stratify_small(instances: &[Grid<u8>], spacing: [f64; 3]) -> Result<(Vec<usize>, Vec<usize>)> {
    let (mut small, mut large) = (Vec::new(), Vec::new());
    for (i, inst) in instances.iter().enumerate() {
        if axial_diameter(inst, spacing)? < SMALL_TUMOR_MM {
            small.push(i);
        } else {
            large.push(i);
        }
    }
    Ok((small, large))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DetectionBucket {
    pub detected: u64,
    pub total: u64,
    pub sensitivity: Option<f64>,
}

impl DetectionBucket {
    fn push(&mut self, hit: bool) {
        self.total += 1;
        self.detected += u64::from(hit);
        self.sensitivity = pct(self.detected, self.total);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DetectionBySize {
    pub small: DetectionBucket,
    pub large: DetectionBucket,
    pub all: DetectionBucket,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case: String,
    pub dice: f64,
    pub gt_instances: usize,
    pub detected: usize,
    pub false_positive_components: usize,
    pub predicted_positive: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Mean per-case Dice.
    pub dice: Option<f64>,
    /// Instance level: TP = detected instances, FN = missed instances,
    /// FP = predicted components touching no instance.
    pub f1: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    /// Volume level: positive = case contains tumor.
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub accuracy: Option<f64>,
    pub instance_counts: ConfusionCounts,
    pub volume_counts: ConfusionCounts,
    pub detection: DetectionBySize,
    pub per_case: Vec<CaseMetrics>,
}

/// Evaluates `(prediction, ground truth)` pairs in the given order.
pub fn evaluate(pairs: &[(&LabelMap, &LabelMap)]) -> Result<MetricsReport> {
    let mut inst = ConfusionCounts::default();
    let mut vol = ConfusionCounts::default();
    let mut detection = DetectionBySize::default();
    let mut per_case = Vec::with_capacity(pairs.len());
    for (pred, gt) in pairs {
        let (p, g) = (&pred.data, &gt.data);
        let d = dice(p, g)?;
        let instances = gt_instances(g);
        let hits = detect_instances(p, &instances)?;
        let (small, _) = stratify_small(&instances, gt.spacing)?;
        for (i, &h) in hits.iter().enumerate() {
            detection.all.push(h);
            if small.contains(&i) {
                detection.small.push(h);
            } else {
                detection.large.push(h);
            }
        }
        let fp_components = split_components(p, Connectivity::Full26)
            .iter()
            .filter(|c| c.as_slice().iter().zip(g.as_slice()).all(|(&a, &b)| a == 0 || b == 0))
            .count();
        let detected = hits.iter().filter(|&&h| h).count();
        inst.add(&ConfusionCounts::new(
            detected as u64,
            0,
            fp_components as u64,
            (hits.len() - detected) as u64,
        ));
        let pos_pred = p.count_nonzero() > 0;
        let pos_gt = !instances.is_empty();
        vol.add(&ConfusionCounts::new(
            u64::from(pos_pred && pos_gt),
            u64::from(!pos_pred && !pos_gt),
            u64::from(pos_pred && !pos_gt),
            u64::from(!pos_pred && pos_gt),
        ));
        per_case.push(CaseMetrics {
            case: gt.id.clone(),
            dice: d,
            gt_instances: instances.len(),
            detected,
            false_positive_components: fp_components,
            predicted_positive: pos_pred,
        });
    }
    let im = confusion_metrics(&inst);
    let vm = confusion_metrics(&vol);
    Ok(MetricsReport {
        dice: mean_defined(per_case.iter().map(|c| Some(c.dice))),
        f1: im.f1,
        precision: im.precision,
        recall: im.recall,
        sensitivity: vm.sensitivity,
        specificity: vm.specificity,
        accuracy: vm.accuracy,
        instance_counts: inst,
        volume_counts: vol,
        detection,
        per_case,
    })
}

/// Shuffles `ids` with `seed` and deals them round-robin into `k` folds.
pub fn kfold_split(ids: &[String], k: usize, seed: u64) -> Result<Vec<Vec<String>>> {
    if k == 0 || k > ids.len() {
        return Err(Error::InvalidArgument(format!(
            "k must be in 1..={}, got {k}",
            ids.len()
        )));
    }
    let mut order = ids.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::new(); k];
    for (i, id) in order.into_iter().enumerate() {
        folds[i % k].push(id);
    }
    Ok(folds)
}
