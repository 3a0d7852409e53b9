use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use super::{
    cl_dice_with, confusion, hd95, mask_of, skeleton_divergence, skeletonize3d, SinkhornParams,
    SkeletonSource,
};
use crate::error::{Error, Result};
use crate::volume::{read_volume, Volume};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VolumeMetrics {
    pub name: String,
    pub dsc: f64,
    pub accuracy: f64,
    pub jaccard: f64,
    /// `None` when either mask is empty.
    pub hd95: Option<f64>,
    /// Debiased skeleton transport distance; `None` when either skeleton is empty.
    pub gwd: Option<f64>,
    pub gwd_converged: bool,
    pub cl_dice: f64,
    pub cl_dice_degenerate: bool,
}

pub fn evaluate(
    name: &str,
    pred: &Volume,
    gt: &Volume,
    sinkhorn: &SinkhornParams,
) -> Result<VolumeMetrics> {
    let c = confusion(pred, gt)?;
    let (p, g) = (mask_of(pred), mask_of(gt));
    let spacing = gt.spacing_um.map(|s| s as f64);
    let h = hd95(&p, &g, gt.dims, spacing);
    let sp = skeletonize3d(&p, pred.dims, SkeletonSource::Prediction);
    let sg = skeletonize3d(&g, gt.dims, SkeletonSource::GroundTruth);
    let cl = cl_dice_with(&p, &g, gt.dims, &sp, &sg);
    let t = skeleton_divergence(&sp, &sg, sinkhorn);
    Ok(VolumeMetrics {
        name: name.to_string(),
        dsc: c.dsc(),
        accuracy: c.accuracy(),
        jaccard: c.jaccard(),
        hd95: (!h.empty_mask).then_some(h.value),
        gwd: t.map(|t| t.cost),
        gwd_converged: t.is_some_and(|t| t.converged),
        cl_dice: cl.value,
        cl_dice_degenerate: cl.degenerate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Option<Self> {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return None;
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Some(Self {
            mean,
            std: var.sqrt(),
            n: v.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub dsc: Option<MeanStd>,
    pub accuracy: Option<MeanStd>,
    pub hd95: Option<MeanStd>,
    pub jaccard: Option<MeanStd>,
    pub gwd: Option<MeanStd>,
    pub cl_dice: Option<MeanStd>,
}

impl Aggregate {
    pub fn of(v: &[VolumeMetrics]) -> Self {
        Self {
            dsc: MeanStd::of(v.iter().map(|m| m.dsc)),
            accuracy: MeanStd::of(v.iter().map(|m| m.accuracy)),
            hd95: MeanStd::of(v.iter().filter_map(|m| m.hd95)),
            jaccard: MeanStd::of(v.iter().map(|m| m.jaccard)),
            gwd: MeanStd::of(v.iter().filter_map(|m| m.gwd)),
            cl_dice: MeanStd::of(v.iter().map(|m| m.cl_dice)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub volumes: Vec<VolumeMetrics>,
    pub aggregate: Aggregate,
    /// Files present on only one side, skipped.
    pub unmatched: Vec<String>,
}

impl MetricsReport {
    pub fn new(volumes: Vec<VolumeMetrics>, unmatched: Vec<String>) -> Self {
        let aggregate = Aggregate::of(&volumes);
        Self {
            volumes,
            aggregate,
            unmatched,
        }
    }

    /// One JSON record per volume, then the aggregate.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for v in &self.volumes {
            out.push_str(&serde_json::to_string(v).expect("plain data"));
            out.push('\n');
        }
        out.push_str(&serde_json::to_string(&self.aggregate).expect("plain data"));
        out.push('\n');
        out
    }

    /// Aligned `mean ± std` summary in the column order
    /// DSC, Accuracy, HD95, Jaccard, GWD, clDice.
    pub fn summary_table(&self, label: &str) -> String {
        let a = &self.aggregate;
        let cols = [
            ("DSC", a.dsc),
            ("Accuracy", a.accuracy),
            ("HD95", a.hd95),
            ("Jaccard", a.jaccard),
            ("GWD", a.gwd),
            ("clDice", a.cl_dice),
        ];
        let cell = |m: Option<MeanStd>| match m {
            Some(m) => format!("{:.3} ± {:.3}", m.mean, m.std),
            None => "n/a".to_string(),
        };
        let mut s = String::new();
        let _ = write!(s, "{:<12}", "Method");
        for (h, _) in &cols {
            let _ = write!(s, "{h:>17}");
        }
        s.push('\n');
        let _ = write!(s, "{label:<12}");
        for (_, m) in &cols {
            let _ = write!(s, "{:>17}", cell(*m));
        }
        s.push('\n');
        s
    }
}

fn volume_files(dir: &Path) -> Result<BTreeMap<String, std::path::PathBuf>> {
    let mut out = BTreeMap::new();
    for e in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let e = e.map_err(|e| Error::io(dir, e))?;
        let p = e.path();
        if p.extension().is_some_and(|x| x == "vpbv") {
            let stem = p
                .file_stem()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned();
            out.insert(stem, p);
        }
    }
    Ok(out)
}

/// Evaluates every prediction in `pred_dir` against the ground-truth
/// file with the same name in `gt_dir`. Unpaired files are listed in
/// [`MetricsReport::unmatched`].
pub fn evaluate_dir(
    pred_dir: &Path,
    gt_dir: &Path,
    sinkhorn: &SinkhornParams,
) -> Result<MetricsReport> {
    let preds = volume_files(pred_dir)?;
    let gts = volume_files(gt_dir)?;
    let mut volumes = Vec::new();
    let mut unmatched = Vec::new();
    for (name, p) in &preds {
        match gts.get(name) {
            Some(g) => volumes.push(evaluate(
                name,
                &read_volume(p)?,
                &read_volume(g)?,
                sinkhorn,
            )?),
            None => unmatched.push(p.display().to_string()),
        }
    }
    unmatched.extend(
        gts.iter()
            .filter(|(n, _)| !preds.contains_key(*n))
            .map(|(_, g)| g.display().to_string()),
    );
    if volumes.is_empty() {
        return Err(Error::Validation(format!(
            "no matching volumes between {} and {}",
            pred_dir.display(),
            gt_dir.display()
        )));
    }
    Ok(MetricsReport::new(volumes, unmatched))
}
