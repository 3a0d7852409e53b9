//! Training objectives and the warm-up schedule of the semi-supervised weight.

use serde::{Deserialize, Serialize};
use vpbsd_tensor::{Graph, Var};

use crate::error::{Error, Result};

pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconLoss {
    #[default]
    Mse,
    L1,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Codebook loss weight during pretraining.
    pub alpha: f64,
    pub beta_max: f64,
    pub ramp_epochs: usize,
    /// Feature distillation weight.
    pub gamma: f64,
    /// Commitment weight inside the codebook loss.
    pub lambda: f64,
    pub reconstruction: ReconLoss,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta_max: 1.0,
            ramp_epochs: 60,
            gamma: 1.0,
            lambda: 0.25,
            reconstruction: ReconLoss::Mse,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("alpha", self.alpha),
            ("beta_max", self.beta_max),
            ("gamma", self.gamma),
            ("lambda", self.lambda),
        ];
        if let Some((n, v)) = named.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!(
                "loss weight {n} = {v} must be finite and non-negative"
            )));
        }
        if self.ramp_epochs == 0 {
            return Err(Error::Config("ramp_epochs must be at least 1".into()));
        }
        Ok(())
    }

    pub fn beta(&self, epoch: usize) -> f64 {
        beta_ramp(epoch, self.ramp_epochs, self.beta_max)
    }
}

/// `β_max · exp(−5 (1 − min(e / ramp, 1))²)`.
pub fn beta_ramp(epoch: usize, ramp_epochs: usize, beta_max: f64) -> f64 {
    let t = (epoch as f64 / ramp_epochs.max(1) as f64).min(1.0);
    beta_max * (-5.0 * (1.0 - t).powi(2)).exp()
}

/// Per-term values of one batch and the weights they entered the total with.
/// Absent terms are 0.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageLossReport {
    pub rec: f64,
    pub cb: f64,
    pub seg: f64,
    pub semi: f64,
    pub dis: f64,
    pub w_cb: f64,
    pub w_semi: f64,
    pub w_dis: f64,
    pub total: f64,
}

impl StageLossReport {
    pub const TERMS: [&'static str; 5] = ["rec", "cb", "seg", "semi", "dis"];

    pub fn weighted_sum(&self) -> f64 {
        self.rec + self.w_cb * self.cb + self.seg + self.w_semi * self.semi + self.w_dis * self.dis
    }

    pub fn terms(&self) -> [f64; 5] {
        [self.rec, self.cb, self.seg, self.semi, self.dis]
    }

    /// Element-wise running mean over `n` previously folded reports.
    pub fn fold_mean(&mut self, other: &StageLossReport, n: usize) {
        let k = n as f64;
        let mix = |a: &mut f64, b: f64| *a = (*a * k + b) / (k + 1.0);
        mix(&mut self.rec, other.rec);
        mix(&mut self.cb, other.cb);
        mix(&mut self.seg, other.seg);
        mix(&mut self.semi, other.semi);
        mix(&mut self.dis, other.dis);
        mix(&mut self.w_cb, other.w_cb);
        mix(&mut self.w_semi, other.w_semi);
        mix(&mut self.w_dis, other.w_dis);
        mix(&mut self.total, other.total);
    }
}

pub struct StageLoss {
    pub total: Var,
    pub report: StageLossReport,
}

fn same_shape(g: &Graph, op: &str, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::Validation(format!(
            "{op}: shapes {:?} and {:?} differ",
            g.shape(a),
            g.shape(b)
        )));
    }
    Ok(())
}

pub fn mse_loss(g: &mut Graph, x: Var, y: Var) -> Result<Var> {
    same_shape(g, "mse", x, y)?;
    let d = g.sub(y, x)?;
    let s = g.square(d);
    Ok(g.mean(s))
}

pub fn l1_loss(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    same_shape(g, "l1", a, b)?;
    let d = g.sub(a, b)?;
    let s = g.abs(d);
    Ok(g.mean(s))
}

/// `1 − (2Σpt + s) / (Σp + Σt + s)` over the whole batch.
pub fn soft_dice_loss(g: &mut Graph, pred: Var, target: Var, smooth: f64) -> Result<Var> {
    same_shape(g, "dice", pred, target)?;
    if !(smooth > 0.0) {
        return Err(Error::Config(format!(
            "dice smoothing {smooth} must be positive"
        )));
    }
    let pt = g.mul(pred, target)?;
    let inter = g.sum(pt);
    let num = g.scale(inter, 2.0);
    let num = g.add_scalar(num, smooth);
    let sp = g.sum(pred);
    let st = g.sum(target);
    let den = g.add(sp, st)?;
    let den = g.add_scalar(den, smooth);
    let ratio = g.div(num, den)?;
    let neg = g.scale(ratio, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

/// Reconstruction plus `α` times the codebook loss.
pub fn teacher_pretrain_loss(
    g: &mut Graph,
    x: Var,
    x_rec: Var,
    cb_loss: Var,
    w: &LossWeights,
) -> Result<StageLoss> {
    let rec = match w.reconstruction {
        ReconLoss::Mse => mse_loss(g, x, x_rec)?,
        ReconLoss::L1 => l1_loss(g, x, x_rec)?,
    };
    let mut report = StageLossReport {
        rec: g.item(rec),
        cb: g.item(cb_loss),
        w_cb: w.alpha,
        ..Default::default()
    };
    let total = if w.alpha > 0.0 {
        let c = g.scale(cb_loss, w.alpha);
        g.add(rec, c)?
    } else {
        rec
    };
    report.total = g.item(total);
    Ok(StageLoss { total, report })
}

pub fn teacher_finetune_loss(g: &mut Graph, seg: Var, y: Var) -> Result<StageLoss> {
    let total = soft_dice_loss(g, seg, y, DICE_SMOOTH)?;
    let v = g.item(total);
    Ok(StageLoss {
        total,
        report: StageLossReport {
            seg: v,
            total: v,
            ..Default::default()
        },
    })
}

/// Targets of one student batch. Labeled batches carry `y_gt`, unlabeled
/// ones `y_pse`; `z_tea` is the teacher's quantized bottleneck when
/// distillation features are available.
#[derive(Debug, Clone, Copy, Default)]
pub struct StudentTargets {
    pub y_gt: Option<Var>,
    pub y_pse: Option<Var>,
    pub z_tea: Option<Var>,
}

/// Student objective for one batch. A term whose weight is zero is reported
/// but left out of the graph, so it contributes no gradient.
pub fn student_loss(
    g: &mut Graph,
    seg: Var,
    z_stu: Var,
    targets: StudentTargets,
    w: &LossWeights,
    epoch: usize,
) -> Result<StageLoss> {
    let StudentTargets { y_gt, y_pse, z_tea } = targets;
    let beta = w.beta(epoch);
    if y_gt.is_none() && y_pse.is_none() && beta > 0.0 {
        return Err(Error::Validation(
            "student batch has neither labels nor pseudo-labels".into(),
        ));
    }
    let mut report = StageLossReport {
        w_semi: beta,
        w_dis: w.gamma,
        ..Default::default()
    };
    let mut parts: Vec<Var> = Vec::new();
    if let Some(y) = y_gt {
        let l = soft_dice_loss(g, seg, y, DICE_SMOOTH)?;
        report.seg = g.item(l);
        parts.push(l);
    }
    if let Some(y) = y_pse {
        let l = soft_dice_loss(g, seg, y, DICE_SMOOTH)?;
        report.semi = g.item(l);
        if beta > 0.0 {
            parts.push(g.scale(l, beta));
        }
    }
    if let Some(zt) = z_tea {
        let l = l1_loss(g, z_stu, zt)?;
        report.dis = g.item(l);
        if w.gamma > 0.0 {
            parts.push(g.scale(l, w.gamma));
        }
    }
    let mut total = match parts.first() {
        Some(&p) => p,
        None => {
            let zero = g.scale(seg, 0.0);
            g.sum(zero)
        }
    };
    for &p in parts.iter().skip(1) {
        total = g.add(total, p)?;
    }
    report.total = g.item(total);
    Ok(StageLoss { total, report })
}
