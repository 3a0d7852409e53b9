//! Teacher pretraining and fine-tuning, and student distillation.
//!
//! Every epoch draws its batch order, crops and Gumbel noise from a stream
//! derived from `(seed, stream name, epoch)`, so a run resumed from a
//! checkpoint continues exactly like an uninterrupted one.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use vpbsd_tensor::{Adam, AdamConfig, Graph, ParamSet};

use super::checkpoint::{
    param_hash, Architecture, CodebookShape, CodebookState, ModelCheckpoint, ModelKind,
};
use super::config::{Quantizer, RunConfig, Stage};
use super::infer::PseudoLabelSet;
use super::log::EpochRecord;
use crate::codebook::{
    codebook_loss, init_codebook, AlignmentPair, Codebook, CodebookInit, QuantMode,
};
use crate::dataset::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::losses::{
    student_loss, teacher_finetune_loss, teacher_pretrain_loss, LossWeights, StageLossReport,
    StudentTargets,
};
use crate::networks::{Student, Teacher, DOWNSCALE, SEG_DECODER};

/// Crops used to seed the k-means warm start.
const WARM_START_CROPS: usize = 16;

/// Independent sub-seed for one named component of a run.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let d = digest(seed, tag, 0);
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn digest(seed: u64, tag: &str, epoch: usize) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((tag.len() as u64).to_le_bytes());
    h.update(tag.as_bytes());
    h.update((epoch as u64).to_le_bytes());
    h.finalize().into()
}

fn stream(seed: u64, tag: &str, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(digest(seed, tag, epoch))
}

/// Where a stage starts and stops, and what to do after each epoch.
#[derive(Default)]
pub struct StageOptions<'a> {
    /// Epochs already completed (from a checkpoint).
    pub start_epoch: usize,
    /// Stop after this many epochs in total instead of the configured count.
    pub stop_epoch: Option<usize>,
    /// Optimizer state to continue from.
    pub adam: Option<Adam>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochRecord)>,
}

#[derive(Debug, Clone)]
pub struct Progress {
    pub adam: Adam,
    pub records: Vec<EpochRecord>,
    /// Total loss of every optimizer step, in order.
    pub step_totals: Vec<f64>,
    pub epochs_done: usize,
}

/// The frozen-after-training teacher: network, alignment pair and codebook.
pub struct TeacherState {
    pub teacher: Teacher,
    pub align: AlignmentPair,
    pub codebook: Codebook,
}

impl TeacherState {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let teacher = Teacher::new(cfg.teacher, derive_seed(cfg.seed, "teacher"))?;
        let d_s = cfg.student.bottleneck();
        let align = AlignmentPair::new(
            cfg.teacher.bottleneck(),
            d_s,
            derive_seed(cfg.seed, "align"),
        )?;
        let codebook = init_codebook(
            derive_seed(cfg.seed, "codebook"),
            cfg.codebook.size,
            d_s,
            CodebookInit::Uniform,
            None,
            cfg.codebook.tau_start,
        )?;
        Ok(Self {
            teacher,
            align,
            codebook,
        })
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            kind: ModelKind::Teacher,
            teacher: Some(self.teacher.config),
            student: None,
            codebook: Some(CodebookShape {
                size: self.codebook.len(),
                dim: self.codebook.dim(),
            }),
        }
    }

    fn sets(&self) -> [&ParamSet; 3] {
        [
            &self.teacher.params,
            &self.align.params,
            &self.codebook.params,
        ]
    }

    /// Hash over all teacher, alignment and codebook parameters.
    pub fn hash(&self) -> String {
        param_hash(&self.sets())
    }

    pub fn checkpoint(
        &self,
        cfg: &RunConfig,
        stage: Stage,
        epochs_done: usize,
        adam: Option<&Adam>,
    ) -> ModelCheckpoint {
        let mut c = ModelCheckpoint::new(
            self.architecture(),
            stage,
            epochs_done,
            cfg.seed,
            cfg.hash(),
            &self.sets(),
        );
        c.header.codebook = Some(CodebookState {
            usage: self.codebook.usage.clone(),
            temperature: self.codebook.temperature,
        });
        match adam {
            Some(a) => c.with_optimizer(a),
            None => c,
        }
    }

    pub fn from_checkpoint(c: &ModelCheckpoint) -> Result<Self> {
        let a = &c.header.architecture;
        let (ModelKind::Teacher, Some(tc), Some(shape)) = (a.kind, a.teacher, a.codebook) else {
            return Err(Error::Checkpoint(format!(
                "not a teacher checkpoint: {a:?}"
            )));
        };
        let state =
            c.header.codebook.as_ref().ok_or_else(|| {
                Error::Checkpoint("teacher checkpoint lacks codebook state".into())
            })?;
        let mut teacher = Teacher::new(tc, 0)?;
        let mut align = AlignmentPair::new(tc.bottleneck(), shape.dim, 0)?;
        let mut cb = Codebook::from_entries(
            shape.size,
            shape.dim,
            vec![0.0; shape.size * shape.dim],
            state.temperature,
        )?;
        c.restore_into(&mut teacher.params)?;
        c.restore_into(&mut align.params)?;
        c.restore_into(&mut cb.params)?;
        let expected = teacher.params.len() + align.params.len() + cb.params.len();
        if c.tensors.len() != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, teacher expects {expected}",
                c.tensors.len()
            )));
        }
        let codebook = Codebook::from_params(cb.params, state.usage.clone(), state.temperature)?;
        Ok(Self {
            teacher,
            align,
            codebook,
        })
    }

    /// Replaces the codebook with k-means centroids of aligned encoder
    /// features from a few crops.
    pub fn warm_start(&mut self, cfg: &RunConfig, samples: &[Sample]) -> Result<()> {
        let items = items(samples, false)?;
        let mut rng = stream(cfg.seed, "warm-start", 0);
        let p = cfg.patch_size;
        let mut rows = Vec::new();
        for i in 0..WARM_START_CROPS.min(items.len()) {
            let origin = random_origin(items[i].dims, p, &mut rng)?;
            let mut x = Vec::new();
            crop(&items[i].image, items[i].dims, origin, p, &mut x);
            let mut g = Graph::new();
            let bt = self.teacher.params.bind(&mut g);
            let ba = self.align.params.bind(&mut g);
            let xv = g.constant([1, 1, p, p, p], x)?;
            let enc = self.teacher.encode(&mut g, &bt, xv)?;
            let zd = self.align.down(&mut g, &ba, enc.z)?;
            let t = g.channels_to_tokens(zd)?;
            rows.extend_from_slice(g.value(t));
        }
        self.codebook = init_codebook(
            derive_seed(cfg.seed, "codebook"),
            cfg.codebook.size,
            self.codebook.dim(),
            CodebookInit::KmeansWarmstart,
            Some(&rows),
            cfg.codebook.tau_start,
        )?;
        Ok(())
    }

    /// Nearest-code counts over every full crop of `samples`.
    pub fn code_usage(&self, samples: &[Sample], patch: usize) -> Result<Vec<u64>> {
        let mut cb = self.codebook.clone();
        cb.reset_usage();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for s in samples {
            for (_, cube) in crate::tiling::tile(&s.image, patch, 0)? {
                let mut g = Graph::new();
                let bt = self.teacher.params.bind(&mut g);
                let ba = self.align.params.bind(&mut g);
                let bc = cb.params.bind(&mut g);
                let xv = g.constant([1, 1, patch, patch, patch], cube.to_f64())?;
                let enc = self.teacher.encode(&mut g, &bt, xv)?;
                let zd = self.align.down(&mut g, &ba, enc.z)?;
                let table = cb.table(&bc);
                cb.quantize(&mut g, table, zd, QuantMode::ArgmaxEval, &mut rng)?;
            }
        }
        Ok(cb.usage)
    }

    /// Quantized, aligned teacher features `Z'_tea` of one crop, with the
    /// codebook width as channels.
    fn code_features(&self, cb: &mut Codebook, x: Vec<f64>, p: usize) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let bt = self.teacher.params.bind(&mut g);
        let ba = self.align.params.bind(&mut g);
        let bc = cb.params.bind(&mut g);
        let xv = g.constant([1, 1, p, p, p], x)?;
        let enc = self.teacher.encode(&mut g, &bt, xv)?;
        let zd = self.align.down(&mut g, &ba, enc.z)?;
        let table = cb.table(&bc);
        let q = cb.quantize(
            &mut g,
            table,
            zd,
            QuantMode::ArgmaxEval,
            &mut ChaCha8Rng::seed_from_u64(0),
        )?;
        Ok(g.value(q.z_q).to_vec())
    }
}

pub fn student_architecture(cfg: &RunConfig) -> Architecture {
    Architecture {
        kind: ModelKind::Student,
        teacher: None,
        student: Some(cfg.student),
        codebook: None,
    }
}

pub fn student_checkpoint(
    cfg: &RunConfig,
    student: &Student,
    epochs_done: usize,
    adam: Option<&Adam>,
) -> ModelCheckpoint {
    let c = ModelCheckpoint::new(
        student_architecture(cfg),
        Stage::Distill,
        epochs_done,
        cfg.seed,
        cfg.hash(),
        &[&student.params],
    );
    match adam {
        Some(a) => c.with_optimizer(a),
        None => c,
    }
}

pub fn student_from_checkpoint(c: &ModelCheckpoint) -> Result<Student> {
    let a = &c.header.architecture;
    let (ModelKind::Student, Some(sc)) = (a.kind, a.student) else {
        return Err(Error::Checkpoint(format!(
            "not a student checkpoint: {a:?}"
        )));
    };
    let mut s = Student::new(sc, 0)?;
    c.restore_into(&mut s.params)?;
    if c.tensors.len() != s.params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, student expects {}",
            c.tensors.len(),
            s.params.len()
        )));
    }
    Ok(s)
}

/// A training volume converted once to `f64`.
struct Item {
    image: Vec<f64>,
    label: Option<Vec<f64>>,
    dims: [usize; 3],
}

fn items(samples: &[Sample], need_labels: bool) -> Result<Vec<Item>> {
    samples
        .iter()
        .map(|s| {
            if need_labels && s.label.is_none() {
                return Err(Error::Config(format!("volume {} has no label", s.name)));
            }
            Ok(Item {
                image: s.image.to_f64(),
                label: s.label.as_ref().map(|l| l.to_f64()),
                dims: s.image.dims,
            })
        })
        .collect()
}

fn random_origin(dims: [usize; 3], p: usize, rng: &mut impl Rng) -> Result<[usize; 3]> {
    if dims.iter().any(|&d| d < p) {
        return Err(Error::Config(format!(
            "volume {dims:?} is smaller than patch {p}"
        )));
    }
    Ok(dims.map(|d| {
        if d == p {
            0
        } else {
            rng.random_range(0..=d - p)
        }
    }))
}

fn crop(src: &[f64], dims: [usize; 3], o: [usize; 3], p: usize, out: &mut Vec<f64>) {
    let [_, h, w] = dims;
    for z in 0..p {
        for y in 0..p {
            let start = ((o[0] + z) * h + o[1] + y) * w + o[2];
            out.extend_from_slice(&src[start..start + p]);
        }
    }
}

struct Batch {
    x: Vec<f64>,
    y: Option<Vec<f64>>,
    keys: Vec<(usize, [usize; 3])>,
}

impl Batch {
    fn shape(&self, p: usize) -> [usize; 5] {
        [self.keys.len(), 1, p, p, p]
    }
}

fn make_batch(
    items: &[Item],
    idx: &[usize],
    p: usize,
    labels: bool,
    rng: &mut impl Rng,
) -> Result<Batch> {
    let mut b = Batch {
        x: Vec::with_capacity(idx.len() * p * p * p),
        y: labels.then(Vec::new),
        keys: Vec::with_capacity(idx.len()),
    };
    for &i in idx {
        let it = &items[i];
        let o = random_origin(it.dims, p, rng)?;
        crop(&it.image, it.dims, o, p, &mut b.x);
        if let Some(y) = &mut b.y {
            let l = it
                .label
                .as_ref()
                .ok_or_else(|| Error::Config("labeled batch drawn from unlabeled volume".into()))?;
            crop(l, it.dims, o, p, y);
        }
        b.keys.push((i, o));
    }
    Ok(b)
}

fn shuffled(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(rng);
    v
}

fn check_finite(stage: Stage, epoch: usize, step: usize, r: &StageLossReport) -> Result<()> {
    if r.total.is_finite() {
        return Ok(());
    }
    Err(Error::NonFinite(format!(
        "{} epoch {epoch} step {step}: loss terms {r:?}",
        stage.name()
    )))
}

fn optimizer(opts: &mut StageOptions<'_>, lr: f64, decay: f64) -> Result<Adam> {
    match opts.adam.take() {
        Some(a) => Ok(a),
        None => Ok(Adam::new(AdamConfig::new(lr, decay))?),
    }
}

fn epoch_range(opts: &StageOptions<'_>, epochs: usize) -> std::ops::Range<usize> {
    let stop = opts.stop_epoch.unwrap_or(epochs).min(epochs);
    opts.start_epoch.min(stop)..stop
}

fn finish_epoch(opts: &mut StageOptions<'_>, progress: &mut Progress, rec: EpochRecord) {
    if let Some(f) = opts.on_epoch.as_mut() {
        f(&rec);
    }
    progress.epochs_done = rec.epoch + 1;
    progress.records.push(rec);
}

/// Reconstruction pretraining of encoder, reconstruction decoder, alignment
/// pair and codebook on unlabeled volumes.
pub fn pretrain_teacher(
    cfg: &RunConfig,
    state: &mut TeacherState,
    unlabeled: &[Sample],
    mut opts: StageOptions<'_>,
) -> Result<Progress> {
    if unlabeled.is_empty() {
        return Err(Error::Config("pretraining needs unlabeled volumes".into()));
    }
    let sc = cfg.pretrain;
    let p = cfg.patch_size;
    let w = &cfg.weights;
    let data = items(unlabeled, false)?;
    if opts.start_epoch == 0 && cfg.codebook.init == CodebookInit::KmeansWarmstart {
        state.warm_start(cfg, unlabeled)?;
    }
    let range = epoch_range(&opts, sc.epochs);
    let mut progress = Progress {
        adam: optimizer(&mut opts, sc.learning_rate, cfg.lr_decay)?,
        records: Vec::new(),
        step_totals: Vec::new(),
        epochs_done: range.start,
    };
    state
        .teacher
        .params
        .set_trainable(|n| !n.starts_with(SEG_DECODER));
    state.align.params.set_trainable(|_| true);
    state.codebook.params.set_trainable(|_| true);
    for epoch in range {
        let mut rng = stream(cfg.seed, "pretrain", epoch);
        let order = shuffled(data.len(), &mut rng);
        let tau = cfg.codebook.temperature(epoch, sc.epochs);
        state.codebook.temperature = tau;
        state.codebook.reset_usage();
        let mode = match cfg.codebook.quantizer {
            Quantizer::Gumbel => QuantMode::GumbelTrain { noise: true },
            Quantizer::Hard => QuantMode::HardTrain,
        };
        let mut mean = StageLossReport::default();
        let mut steps = 0;
        for idx in order.chunks(cfg.batch_size) {
            let batch = make_batch(&data, idx, p, false, &mut rng)?;
            let mut g = Graph::new();
            let bt = state.teacher.params.bind(&mut g);
            let ba = state.align.params.bind(&mut g);
            let bc = state.codebook.params.bind(&mut g);
            let x = g.constant(batch.shape(p), batch.x)?;
            let enc = state.teacher.encode(&mut g, &bt, x)?;
            let zd = state.align.down(&mut g, &ba, enc.z)?;
            let table = state.codebook.table(&bc);
            let q = state.codebook.quantize(&mut g, table, zd, mode, &mut rng)?;
            let cb = codebook_loss(&mut g, table, &q, w.lambda)?;
            let zu = state.align.up(&mut g, &ba, q.z_q)?;
            let rec = state.teacher.reconstruct(&mut g, &bt, zu)?;
            let loss = teacher_pretrain_loss(&mut g, x, rec, cb.total, w)?;
            check_finite(Stage::Pretrain, epoch, steps, &loss.report)?;
            g.backward(loss.total)?;
            state.teacher.params.collect_grads(&g, &bt)?;
            state.align.params.collect_grads(&g, &ba)?;
            state.codebook.params.collect_grads(&g, &bc)?;
            progress.adam.step(
                &mut [
                    &mut state.teacher.params,
                    &mut state.align.params,
                    &mut state.codebook.params,
                ],
                epoch,
            );
            progress.step_totals.push(loss.report.total);
            mean.fold_mean(&loss.report, steps);
            steps += 1;
        }
        let rec = EpochRecord {
            stage: Stage::Pretrain,
            epoch,
            steps,
            lr: progress.adam.lr_at(epoch),
            temperature: Some(tau),
            perplexity: Some(state.codebook.perplexity()),
            report: mean,
        };
        finish_epoch(&mut opts, &mut progress, rec);
    }
    Ok(progress)
}

/// Supervised fine-tuning of encoder and segmentation decoder; the
/// alignment pair and codebook stay frozen.
pub fn finetune_teacher(
    cfg: &RunConfig,
    state: &mut TeacherState,
    labeled: &[Sample],
    mut opts: StageOptions<'_>,
) -> Result<Progress> {
    if labeled.is_empty() {
        return Err(Error::Config("fine-tuning needs labeled volumes".into()));
    }
    let sc = cfg.finetune;
    let p = cfg.patch_size;
    let data = items(labeled, true)?;
    let range = epoch_range(&opts, sc.epochs);
    let mut progress = Progress {
        adam: optimizer(&mut opts, sc.learning_rate, cfg.lr_decay)?,
        records: Vec::new(),
        step_totals: Vec::new(),
        epochs_done: range.start,
    };
    state
        .teacher
        .params
        .set_trainable(|n| n.starts_with(crate::networks::ENCODER) || n.starts_with(SEG_DECODER));
    for epoch in range {
        let mut rng = stream(cfg.seed, "finetune", epoch);
        let order = shuffled(data.len(), &mut rng);
        let mut mean = StageLossReport::default();
        let mut steps = 0;
        for idx in order.chunks(cfg.batch_size) {
            let batch = make_batch(&data, idx, p, true, &mut rng)?;
            let shape = batch.shape(p);
            let mut g = Graph::new();
            let bt = state.teacher.params.bind(&mut g);
            let x = g.constant(shape, batch.x)?;
            let y = g.constant(shape, batch.y.expect("labeled batch"))?;
            let (seg, _) = state.teacher.segment(&mut g, &bt, x)?;
            let loss = teacher_finetune_loss(&mut g, seg, y)?;
            check_finite(Stage::Finetune, epoch, steps, &loss.report)?;
            g.backward(loss.total)?;
            state.teacher.params.collect_grads(&g, &bt)?;
            progress.adam.step(&mut [&mut state.teacher.params], epoch);
            progress.step_totals.push(loss.report.total);
            mean.fold_mean(&loss.report, steps);
            steps += 1;
        }
        let rec = EpochRecord {
            stage: Stage::Finetune,
            epoch,
            steps,
            lr: progress.adam.lr_at(epoch),
            temperature: None,
            perplexity: None,
            report: mean,
        };
        finish_epoch(&mut opts, &mut progress, rec);
    }
    Ok(progress)
}

#[derive(Debug, Clone)]
pub struct StudentRun {
    pub progress: Progress,
    /// Hash of the teacher before and after training; equal when frozen.
    pub teacher_hash: Option<(String, String)>,
}

/// Trains the student. Without a teacher and pseudo-labels this is the
/// supervised baseline. Each labeled batch is followed by one unlabeled
/// batch whenever an unlabeled term is active.
pub fn train_student(
    cfg: &RunConfig,
    student: &mut Student,
    teacher: Option<&TeacherState>,
    pseudo: Option<&PseudoLabelSet>,
    data: &Dataset,
    mut opts: StageOptions<'_>,
) -> Result<StudentRun> {
    if data.labeled.is_empty() {
        return Err(Error::Config(
            "student training needs labeled volumes".into(),
        ));
    }
    let sc = cfg.distill;
    let p = cfg.patch_size;
    let w = &cfg.weights;
    let labeled = items(&data.labeled, true)?;
    let mut unlabeled = items(&data.unlabeled, false)?;
    if let Some(ps) = pseudo {
        ps.check_matches(&data.unlabeled)?;
        for (it, (_, y)) in unlabeled.iter_mut().zip(&ps.labels) {
            it.label = Some(y.to_f64());
        }
    }
    if let Some(t) = teacher {
        if t.codebook.dim() != student.config.bottleneck() {
            return Err(Error::Config(format!(
                "codebook width {} differs from student bottleneck {}",
                t.codebook.dim(),
                student.config.bottleneck()
            )));
        }
    }
    if p % DOWNSCALE != 0 {
        return Err(Error::Config(format!(
            "patch {p} is not a multiple of {DOWNSCALE}"
        )));
    }
    let semi_on = w.beta_max > 0.0 && pseudo.is_some();
    let dis_labeled = teacher.is_some() && cfg.distill_on.labeled();
    let dis_unlabeled = teacher.is_some() && w.gamma > 0.0 && cfg.distill_on.unlabeled();
    let use_unlabeled = !unlabeled.is_empty() && (semi_on || dis_unlabeled);
    let w_unlabeled = LossWeights {
        beta_max: if semi_on { w.beta_max } else { 0.0 },
        ..*w
    };
    let before = teacher.map(|t| t.hash());
    let mut cb = teacher.map(|t| t.codebook.clone());
    let mut memo: HashMap<(bool, usize, [usize; 3]), Vec<f64>> = HashMap::new();
    let mut z_tea = |g: &mut Graph,
                     from_unlabeled: bool,
                     batch: &Batch,
                     items: &[Item],
                     z_shape: &[usize]|
     -> Result<_> {
        let (Some(t), Some(cb)) = (teacher, cb.as_mut()) else {
            return Ok(None);
        };
        let mut all = Vec::new();
        for &(i, o) in &batch.keys {
            let key = (from_unlabeled, i, o);
            if !memo.contains_key(&key) {
                let mut x = Vec::with_capacity(p * p * p);
                crop(&items[i].image, items[i].dims, o, p, &mut x);
                memo.insert(key, t.code_features(cb, x, p)?);
            }
            all.extend_from_slice(&memo[&key]);
        }
        if all.len() != z_shape.iter().product::<usize>() {
            return Err(Error::Config(format!(
                "teacher bottleneck of {} values per batch does not match student bottleneck {z_shape:?}",
                all.len()
            )));
        }
        Ok(Some(g.constant(z_shape.to_vec(), all)?))
    };
    let range = epoch_range(&opts, sc.epochs);
    let mut progress = Progress {
        adam: optimizer(&mut opts, sc.learning_rate, cfg.lr_decay)?,
        records: Vec::new(),
        step_totals: Vec::new(),
        epochs_done: range.start,
    };
    student.params.set_trainable(|_| true);
    let batch_size = cfg.batch_size;
    for epoch in range {
        let mut rl = stream(cfg.seed, "distill-labeled", epoch);
        let mut ru = stream(cfg.seed, "distill-unlabeled", epoch);
        let order_l = shuffled(labeled.len(), &mut rl);
        let order_u = shuffled(unlabeled.len(), &mut ru);
        let mut mean = StageLossReport::default();
        let mut steps = 0;
        for (k, idx) in order_l.chunks(batch_size).enumerate() {
            let mut passes = vec![(false, idx.to_vec())];
            if use_unlabeled {
                let u: Vec<usize> = (0..batch_size)
                    .map(|j| order_u[(k * batch_size + j) % order_u.len()])
                    .collect();
                passes.push((true, u));
            }
            for (from_unlabeled, idx) in passes {
                let (src, rng) = if from_unlabeled {
                    (&unlabeled, &mut ru)
                } else {
                    (&labeled, &mut rl)
                };
                let batch = make_batch(src, &idx, p, !from_unlabeled || semi_on, rng)?;
                let shape = batch.shape(p);
                let mut g = Graph::new();
                let b = student.params.bind(&mut g);
                let x = g.constant(shape, batch.x.clone())?;
                let out = student.forward(&mut g, &b, x)?;
                let z_shape = g.shape(out.z).to_vec();
                let want_dis = if from_unlabeled {
                    dis_unlabeled
                } else {
                    dis_labeled
                };
                let zt = if want_dis {
                    z_tea(&mut g, from_unlabeled, &batch, src, &z_shape)?
                } else {
                    None
                };
                let y = batch.y.clone().map(|y| g.constant(shape, y)).transpose()?;
                let (targets, weights) = if from_unlabeled {
                    (
                        StudentTargets {
                            y_gt: None,
                            y_pse: y,
                            z_tea: zt,
                        },
                        &w_unlabeled,
                    )
                } else {
                    (
                        StudentTargets {
                            y_gt: y,
                            y_pse: None,
                            z_tea: zt,
                        },
                        w,
                    )
                };
                let loss = student_loss(&mut g, out.seg, out.z, targets, weights, epoch)?;
                check_finite(Stage::Distill, epoch, steps, &loss.report)?;
                g.backward(loss.total)?;
                student.params.collect_grads(&g, &b)?;
                progress.adam.step(&mut [&mut student.params], epoch);
                progress.step_totals.push(loss.report.total);
                mean.fold_mean(&loss.report, steps);
                steps += 1;
            }
        }
        let rec = EpochRecord {
            stage: Stage::Distill,
            epoch,
            steps,
            lr: progress.adam.lr_at(epoch),
            temperature: None,
            perplexity: None,
            report: mean,
        };
        finish_epoch(&mut opts, &mut progress, rec);
    }
    let teacher_hash = before.zip(teacher.map(|t| t.hash()));
    Ok(StudentRun {
        progress,
        teacher_hash,
    })
}
