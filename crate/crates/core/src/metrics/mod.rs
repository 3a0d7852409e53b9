//! Segmentation quality: overlap scores, HD95, clDice and the skeleton
//! transport distance (reported as GWD, also known as SMD).

mod distance;
mod report;
mod sinkhorn;
mod skeleton;

pub use distance::{hd95, percentile_linear, squared_edt, surface, surface_distances, Hd95};
pub use report::{evaluate, evaluate_dir, Aggregate, MetricsReport, VolumeMetrics};
pub use sinkhorn::{sinkhorn, sinkhorn_divergence, subsample, SinkhornParams, Transport};
pub use skeleton::{count_components, is_simple, thin};

use crate::error::{Error, Result};
use crate::volume::Volume;

/// Probability voxels at or above this are foreground.
pub const THRESHOLD: f32 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// `2TP / (2TP + FP + FN)`; 1 when both masks are empty.
    pub fn dsc(&self) -> f64 {
        let den = 2 * self.tp + self.fp + self.fn_;
        if den == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / den as f64
        }
    }

    /// `TP / (TP + FP + FN)`; 1 when both masks are empty.
    pub fn jaccard(&self) -> f64 {
        let den = self.tp + self.fp + self.fn_;
        if den == 0 {
            1.0
        } else {
            self.tp as f64 / den as f64
        }
    }

    pub fn accuracy(&self) -> f64 {
        let t = self.total();
        if t == 0 {
            1.0
        } else {
            (self.tp + self.tn) as f64 / t as f64
        }
    }
}

fn check_len(pred: &[bool], gt: &[bool]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Validation(format!(
            "prediction has {} voxels, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    Ok(())
}

pub fn confusion_masks(pred: &[bool], gt: &[bool]) -> Result<ConfusionCounts> {
    check_len(pred, gt)?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

pub fn mask_of(v: &Volume) -> Vec<bool> {
    v.to_mask(THRESHOLD)
}

pub fn confusion(pred: &Volume, gt: &Volume) -> Result<ConfusionCounts> {
    if pred.dims != gt.dims {
        return Err(Error::Validation(format!(
            "dims differ: prediction {:?}, ground truth {:?}",
            pred.dims, gt.dims
        )));
    }
    confusion_masks(&mask_of(pred), &mask_of(gt))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkeletonSource {
    Prediction,
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonCloud {
    pub points: Vec<[usize; 3]>,
    pub source: SkeletonSource,
}

impl SkeletonCloud {
    pub fn as_f64(&self) -> Vec<[f64; 3]> {
        self.points.iter().map(|p| p.map(|c| c as f64)).collect()
    }
}

pub fn skeletonize3d(mask: &[bool], dims: [usize; 3], source: SkeletonSource) -> SkeletonCloud {
    SkeletonCloud {
        points: thin(mask, dims),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClDice {
    pub value: f64,
    /// Set when a skeleton is empty or both topology scores are zero.
    pub degenerate: bool,
}

fn fraction_inside(points: &[[usize; 3]], mask: &[bool], dims: [usize; 3]) -> Option<f64> {
    if points.is_empty() {
        return None;
    }
    let inside = points
        .iter()
        .filter(|p| mask[(p[0] * dims[1] + p[1]) * dims[2] + p[2]])
        .count();
    Some(inside as f64 / points.len() as f64)
}

pub fn cl_dice_with(
    pred: &[bool],
    gt: &[bool],
    dims: [usize; 3],
    s_pred: &SkeletonCloud,
    s_gt: &SkeletonCloud,
) -> ClDice {
    let tprec = fraction_inside(&s_pred.points, gt, dims);
    let tsens = fraction_inside(&s_gt.points, pred, dims);
    match (tprec, tsens) {
        (Some(p), Some(s)) if p + s > 0.0 => ClDice {
            value: 2.0 * p * s / (p + s),
            degenerate: false,
        },
        _ => ClDice {
            value: 0.0,
            degenerate: true,
        },
    }
}

pub fn cl_dice(pred: &[bool], gt: &[bool], dims: [usize; 3]) -> ClDice {
    let sp = skeletonize3d(pred, dims, SkeletonSource::Prediction);
    let sg = skeletonize3d(gt, dims, SkeletonSource::GroundTruth);
    cl_dice_with(pred, gt, dims, &sp, &sg)
}

/// Transport cost between two skeletons; `None` when either is empty.
pub fn sinkhorn_smd(a: &SkeletonCloud, b: &SkeletonCloud, p: &SinkhornParams) -> Option<Transport> {
    if a.points.is_empty() || b.points.is_empty() {
        return None;
    }
    Some(sinkhorn(&a.as_f64(), &b.as_f64(), p))
}

/// Debiased skeleton transport distance, the value reported as GWD.
pub fn skeleton_divergence(
    a: &SkeletonCloud,
    b: &SkeletonCloud,
    p: &SinkhornParams,
) -> Option<Transport> {
    if a.points.is_empty() || b.points.is_empty() {
        return None;
    }
    Some(sinkhorn_divergence(&a.as_f64(), &b.as_f64(), p))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counts() {
        let c = ConfusionCounts {
            tp: 3,
            fp: 1,
            fn_: 2,
            tn: 10,
        };
        assert!((c.dsc() - 6.0 / 9.0).abs() < 1e-15);
        assert_eq!(c.jaccard(), 0.5);
        assert_eq!(c.accuracy(), 13.0 / 16.0);
    }

    #[test]
    fn all_ones_vs_all_zeros() {
        let c = confusion_masks(&[true; 8], &[false; 8]).unwrap();
        assert_eq!(c.fp, 8);
        assert_eq!(c.dsc(), 0.0);
        let e = confusion_masks(&[false; 8], &[false; 8]).unwrap();
        assert_eq!((e.dsc(), e.jaccard(), e.accuracy()), (1.0, 1.0, 1.0));
        assert!(confusion_masks(&[true; 8], &[true; 7]).is_err());
    }

    #[test]
    fn two_voxels_five_apart() {
        let dims = [1, 1, 8];
        let mut a = vec![false; 8];
        let mut b = vec![false; 8];
        a[1] = true;
        b[6] = true;
        assert_eq!(hd95(&a, &b, dims, [1.0; 3]).value, 5.0);
        assert_eq!(hd95(&a, &a, dims, [1.0; 3]).value, 0.0);
        assert!(hd95(&a, &[false; 8], dims, [1.0; 3]).empty_mask);
    }
}
