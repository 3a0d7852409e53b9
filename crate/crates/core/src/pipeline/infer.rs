//! Tiled whole-volume inference and teacher pseudo-labels.

use vpbsd_tensor::Graph;

use super::train::TeacherState;
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::metrics::confusion;
use crate::networks::Student;
use crate::tiling::{stitch, tile};
use crate::volume::Volume;

#[derive(Clone, Copy)]
pub enum Predictor<'a> {
    Teacher(&'a TeacherState),
    Student(&'a Student),
}

impl Predictor<'_> {
    /// Foreground probabilities of one `p³` cube.
    pub fn forward(&self, x: Vec<f64>, p: usize) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let shape = [1, 1, p, p, p];
        let prob = match self {
            Predictor::Teacher(t) => {
                let b = t.teacher.params.bind(&mut g);
                let x = g.constant(shape, x)?;
                t.teacher.segment(&mut g, &b, x)?.0
            }
            Predictor::Student(s) => {
                let b = s.params.bind(&mut g);
                let x = g.constant(shape, x)?;
                s.forward(&mut g, &b, x)?.seg
            }
        };
        Ok(g.value(prob).to_vec())
    }
}

/// Tiles `v`, predicts every tile and averages the overlaps.
pub fn infer_volume(
    pred: Predictor<'_>,
    v: &Volume,
    patch: usize,
    overlap: usize,
) -> Result<Volume> {
    infer_tiled(|x| pred.forward(x, patch), v, patch, overlap)
}

/// Tiled inference with any per-cube predictor returning probabilities.
pub fn infer_tiled(
    mut predict: impl FnMut(Vec<f64>) -> Result<Vec<f64>>,
    v: &Volume,
    patch: usize,
    overlap: usize,
) -> Result<Volume> {
    if v.as_f32().is_none() {
        return Err(Error::Validation("inference needs a float image".into()));
    }
    let mut out = Vec::new();
    for (idx, cube) in tile(v, patch, overlap)? {
        let prob = predict(cube.to_f64())?;
        if prob.len() != patch * patch * patch {
            return Err(Error::Validation(format!(
                "predictor returned {} values for a {patch}^3 cube",
                prob.len()
            )));
        }
        let data = prob.into_iter().map(|p| p as f32).collect();
        out.push((
            idx,
            Volume::probability([patch; 3], data)?.with_spacing(v.spacing_um),
        ));
    }
    stitch(&out)
}

/// Foreground where the probability is at least `threshold`.
pub fn binarize(prob: &Volume, threshold: f64) -> Result<Volume> {
    let p = prob
        .as_f32()
        .ok_or_else(|| Error::Validation("binarize needs a probability volume".into()))?;
    let data = p.iter().map(|&v| u8::from(v as f64 >= threshold)).collect();
    Ok(Volume::label(prob.dims, data)?.with_spacing(prob.spacing_um))
}

/// Static teacher pseudo-labels for the unlabeled volumes.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelSet {
    pub teacher_hash: String,
    pub threshold: f64,
    pub labels: Vec<(String, Volume)>,
    /// Mean DSC of the same procedure against ground truth on labeled volumes.
    pub labeled_dsc: Option<f64>,
}

impl PseudoLabelSet {
    /// Errors unless the set lists exactly `samples`, in order.
    pub fn check_matches(&self, samples: &[Sample]) -> Result<()> {
        let names = self.labels.iter().map(|(n, _)| n.as_str());
        if !names.eq(samples.iter().map(|s| s.name.as_str())) {
            return Err(Error::Validation(
                "pseudo-labels do not correspond to the unlabeled volumes".into(),
            ));
        }
        for ((n, l), s) in self.labels.iter().zip(samples) {
            if l.dims != s.image.dims {
                return Err(Error::Validation(format!(
                    "pseudo-label {n} has dims {:?}",
                    l.dims
                )));
            }
        }
        Ok(())
    }
}

pub fn generate_pseudo_labels(
    teacher: &TeacherState,
    unlabeled: &[Sample],
    labeled: &[Sample],
    patch: usize,
    overlap: usize,
    threshold: f64,
) -> Result<PseudoLabelSet> {
    let pred = Predictor::Teacher(teacher);
    let label = |s: &Sample| -> Result<Volume> {
        binarize(&infer_volume(pred, &s.image, patch, overlap)?, threshold)
    };
    let labels = unlabeled
        .iter()
        .map(|s| Ok((s.name.clone(), label(s)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut dscs = Vec::new();
    for s in labeled {
        if let Some(gt) = &s.label {
            dscs.push(confusion(&label(s)?, gt)?.dsc());
        }
    }
    let labeled_dsc = (!dscs.is_empty()).then(|| dscs.iter().sum::<f64>() / dscs.len() as f64);
    Ok(PseudoLabelSet {
        teacher_hash: teacher.hash(),
        threshold,
        labels,
        labeled_dsc,
    })
}
