use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use vpbsd_core::codebook::code_perplexity;
use vpbsd_core::dataset::{make_dataset, Dataset, DatasetCounts, Manifest, Split};
use vpbsd_core::metrics::{evaluate as evaluate_pair, evaluate_dir, MetricsReport, SinkhornParams};
use vpbsd_core::networks::Student;
use vpbsd_core::phantom::PhantomParams;
use vpbsd_core::pipeline::derive_seed;
use vpbsd_core::pipeline::{
    append_log, binarize, finetune_teacher, generate_pseudo_labels, infer_volume, pretrain_teacher,
    read_log, student_checkpoint, student_from_checkpoint, train_student, EpochRecord,
    ModelCheckpoint, ModelKind, Predictor, Quantizer, RunConfig, Stage, StageOptions, TeacherState,
    METRICS_FILE,
};
use vpbsd_core::{percentile_clip_normalize, read_volume, write_volume, Error, Result};

use crate::config::{output_root, snapshot_beside, snapshot_name};
use crate::{
    Distill, Evaluate, ExportCurves, Finetune, GenData, Infer, InspectCodebook, Pretrain,
    QuantizerArg,
};

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_file(p: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(p, contents).map_err(|e| Error::io(p, e))
}

fn checkpoint_file(stage: Stage) -> &'static str {
    match stage {
        Stage::Pretrain => "teacher_pretrain.vpbc",
        Stage::Finetune => "teacher_finetune.vpbc",
        Stage::Distill => "student.vpbc",
    }
}

fn epoch_line(r: &EpochRecord) {
    let mut line = format!(
        "{} epoch {:>3}  steps {:>3}  lr {:.2e}  loss {:.5}",
        r.stage.name(),
        r.epoch + 1,
        r.steps,
        r.lr,
        r.report.total
    );
    if let Some(p) = r.perplexity {
        line.push_str(&format!("  perplexity {p:.1}"));
    }
    eprintln!("{line}");
}

/// Output directory, checkpoint path and config snapshot of one training
/// stage. Refuses to clobber an earlier result unless forced.
struct StageOutput {
    dir: PathBuf,
    stage: Stage,
}

impl StageOutput {
    fn prepare(dir: PathBuf, stage: Stage, force: bool, resuming: bool) -> Result<Self> {
        let out = Self { dir, stage };
        if out.checkpoint().exists() && !force && !resuming {
            return Err(Error::Validation(format!(
                "{} already exists; pass --force to retrain",
                out.checkpoint().display()
            )));
        }
        create_dir(&out.dir)?;
        if !resuming {
            out.drop_stage_records()?;
        }
        Ok(out)
    }

    fn checkpoint(&self) -> PathBuf {
        self.dir.join(checkpoint_file(self.stage))
    }

    fn log(&self) -> PathBuf {
        self.dir.join(METRICS_FILE)
    }

    fn drop_stage_records(&self) -> Result<()> {
        let path = self.log();
        if !path.exists() {
            return Ok(());
        }
        let keep: Vec<EpochRecord> = read_log(&path)?
            .into_iter()
            .filter(|r| r.stage != self.stage)
            .collect();
        let text: String = keep.iter().map(|r| r.to_line() + "\n").collect();
        write_file(&path, text)
    }

    fn finish(
        &self,
        cfg: &RunConfig,
        ckpt: &ModelCheckpoint,
        records: &[EpochRecord],
    ) -> Result<()> {
        write_file(&self.dir.join(snapshot_name(self.stage)), cfg.to_toml())?;
        append_log(self.log(), records)?;
        let hash = ckpt.save(self.checkpoint())?;
        println!("{} ({hash})", self.checkpoint().display());
        Ok(())
    }
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let m = cfg
        .manifest
        .as_ref()
        .expect("resolved configs name a manifest");
    Dataset::load(m, cfg.clip_percentile)
}

fn require_checkpoint(flag: &str, path: Option<&PathBuf>, what: &str) -> Result<ModelCheckpoint> {
    let p = path.ok_or_else(|| {
        Error::Validation(format!("missing --{flag}: pass the {what} checkpoint"))
    })?;
    if !p.is_file() {
        return Err(Error::Validation(format!(
            "--{flag} {}: no such checkpoint file",
            p.display()
        )));
    }
    ModelCheckpoint::load(p)
}

pub fn gen_data(a: GenData) -> Result<()> {
    if a.dims == 0 {
        return Err(Error::Validation("--dims must be positive".into()));
    }
    let out = a.out.unwrap_or_else(|| output_root().join("data"));
    let counts = DatasetCounts {
        unlabeled: a.unlabeled,
        labeled: a.labeled,
        test: a.test,
    };
    let m = make_dataset(
        a.seed,
        counts,
        [a.dims; 3],
        PhantomParams::default(),
        &out,
        a.force,
    )?;
    println!(
        "{} ({} volumes)",
        out.join(vpbsd_core::dataset::MANIFEST_FILE).display(),
        m.volumes.len()
    );
    Ok(())
}

pub fn pretrain(a: Pretrain) -> Result<()> {
    let resumed = a.resume.as_ref().map(ModelCheckpoint::load).transpose()?;
    let inherited = a
        .resume
        .as_deref()
        .and_then(|p| snapshot_beside(p, Stage::Pretrain));
    let (cfg, dir) = a.cfg.resolve(Stage::Pretrain, inherited, |c| {
        if let Some(q) = a.quantizer {
            c.codebook.quantizer = match q {
                QuantizerArg::Gumbel => Quantizer::Gumbel,
                QuantizerArg::Hard => Quantizer::Hard,
            };
        }
        if let Some(n) = a.codebook_size {
            c.codebook.size = n;
        }
    })?;
    let out = StageOutput::prepare(dir, Stage::Pretrain, a.cfg.force, resumed.is_some())?;
    let ds = load_dataset(&cfg)?;
    let mut on_epoch = epoch_line;
    let (mut state, mut opts) = match &resumed {
        Some(c) => {
            if c.header.stage != Stage::Pretrain {
                return Err(Error::Validation(
                    "--resume needs a pretraining checkpoint".into(),
                ));
            }
            let state = TeacherState::from_checkpoint(c)?;
            c.require_architecture(&state.architecture())?;
            let opts = StageOptions {
                start_epoch: c.header.epochs_done,
                adam: c.optimizer()?,
                ..Default::default()
            };
            (state, opts)
        }
        None => (TeacherState::new(&cfg)?, StageOptions::default()),
    };
    if state.architecture().teacher != Some(cfg.teacher) {
        return Err(Error::Config(
            "resumed checkpoint does not match the configured teacher widths".into(),
        ));
    }
    opts.on_epoch = Some(&mut on_epoch);
    let progress = pretrain_teacher(&cfg, &mut state, &ds.unlabeled, opts)?;
    let mut ckpt = state.checkpoint(
        &cfg,
        Stage::Pretrain,
        progress.epochs_done,
        Some(&progress.adam),
    );
    ckpt.header.parent = resumed.map(|c| c.hash());
    out.finish(&cfg, &ckpt, &progress.records)
}

pub fn finetune(a: Finetune) -> Result<()> {
    let input = require_checkpoint("teacher", a.teacher.as_ref(), "pretrained teacher")?;
    let teacher_path = a.teacher.as_deref().expect("checked above");
    let inherited = snapshot_beside(teacher_path, input.header.stage);
    let (cfg, dir) = a.cfg.resolve(Stage::Finetune, inherited, |_| {})?;
    let out = StageOutput::prepare(dir, Stage::Finetune, a.cfg.force, false)?;
    let mut state = TeacherState::from_checkpoint(&input)?;
    if state.architecture().teacher != Some(cfg.teacher) {
        return Err(Error::Config(
            "teacher checkpoint does not match the configured teacher widths".into(),
        ));
    }
    let ds = load_dataset(&cfg)?;
    let mut on_epoch = epoch_line;
    let opts = StageOptions {
        on_epoch: Some(&mut on_epoch),
        ..Default::default()
    };
    let progress = finetune_teacher(&cfg, &mut state, &ds.labeled, opts)?;
    let mut ckpt = state.checkpoint(
        &cfg,
        Stage::Finetune,
        progress.epochs_done,
        Some(&progress.adam),
    );
    ckpt.header.parent = Some(input.hash());
    out.finish(&cfg, &ckpt, &progress.records)
}

pub fn distill(a: Distill) -> Result<()> {
    let input = if a.baseline {
        None
    } else {
        let c = require_checkpoint(
            "teacher",
            a.teacher.as_ref(),
            "fine-tuned teacher (or use --baseline)",
        )?;
        if c.header.stage != Stage::Finetune {
            return Err(Error::Validation(format!(
                "--teacher is a {} checkpoint; run finetune on it first",
                c.header.stage.name()
            )));
        }
        Some(c)
    };
    let inherited = a
        .teacher
        .as_deref()
        .and_then(|p| snapshot_beside(p, Stage::Finetune));
    let (cfg, dir) = a.cfg.resolve(Stage::Distill, inherited, |c| {
        if let Some(b) = a.beta {
            c.weights.beta_max = b;
        }
        if let Some(g) = a.gamma {
            c.weights.gamma = g;
        }
    })?;
    let out = StageOutput::prepare(dir, Stage::Distill, a.cfg.force, false)?;
    let ds = load_dataset(&cfg)?;
    let teacher = input
        .as_ref()
        .map(TeacherState::from_checkpoint)
        .transpose()?;
    let pseudo = match &teacher {
        Some(t) => {
            let ps = generate_pseudo_labels(
                t,
                &ds.unlabeled,
                &ds.labeled,
                cfg.patch_size,
                cfg.infer_overlap,
                cfg.pseudo_threshold,
            )?;
            let pdir = out.dir.join("pseudo");
            create_dir(&pdir)?;
            for (name, v) in &ps.labels {
                write_volume(v, pdir.join(format!("{name}.vpbv")))?;
            }
            if let Some(d) = ps.labeled_dsc {
                eprintln!("pseudo-label DSC on labeled volumes: {d:.4}");
            }
            Some(ps)
        }
        None => None,
    };
    let mut student = Student::new(cfg.student, derive_seed(cfg.seed, "student"))?;
    let mut on_epoch = epoch_line;
    let opts = StageOptions {
        on_epoch: Some(&mut on_epoch),
        ..Default::default()
    };
    let run = train_student(
        &cfg,
        &mut student,
        teacher.as_ref(),
        pseudo.as_ref(),
        &ds,
        opts,
    )?;
    if let Some((before, after)) = &run.teacher_hash {
        if before != after {
            return Err(Error::NonFinite(
                "teacher parameters changed during distillation".into(),
            ));
        }
    }
    let mut ckpt = student_checkpoint(
        &cfg,
        &student,
        run.progress.epochs_done,
        Some(&run.progress.adam),
    );
    ckpt.header.parent = input.map(|c| c.hash());
    out.finish(&cfg, &ckpt, &run.progress.records)
}

/// (name, path) of every volume named by `input`.
fn inputs(input: &Path, split: &str) -> Result<Vec<(String, PathBuf)>> {
    if input.is_dir() {
        let mut v = Vec::new();
        for e in fs::read_dir(input).map_err(|e| Error::io(input, e))? {
            let p = e.map_err(|e| Error::io(input, e))?.path();
            if p.extension().is_some_and(|x| x == "vpbv") {
                v.push((stem(&p), p));
            }
        }
        v.sort();
        return Ok(v);
    }
    if !input.is_file() {
        return Err(Error::Validation(format!(
            "--input {}: no such file or directory",
            input.display()
        )));
    }
    if input.extension().is_some_and(|x| x == "toml") {
        let split = match split {
            "unlabeled" => Split::Unlabeled,
            "labeled" => Split::Labeled,
            "test" => Split::Test,
            other => return Err(Error::Validation(format!("unknown split {other:?}"))),
        };
        let m = Manifest::load(input)?;
        let root = input.parent().unwrap_or(Path::new("."));
        return Ok(m
            .entries(split)
            .map(|e| (e.name.clone(), root.join(&e.image)))
            .collect());
    }
    Ok(vec![(stem(input), input.to_path_buf())])
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .unwrap_or_default()
        .to_string_lossy()
        .into_owned()
}

pub fn infer(a: Infer) -> Result<()> {
    let ckpt = ModelCheckpoint::load(&a.checkpoint)?;
    let base = match snapshot_beside(&a.checkpoint, ckpt.header.stage) {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::desk(),
    };
    let patch = a.patch_size.unwrap_or(base.patch_size);
    let overlap = a.overlap.unwrap_or(base.infer_overlap);
    let threshold = a.threshold.unwrap_or(base.pseudo_threshold);
    let clip = a.clip.unwrap_or(base.clip_percentile);
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Validation(format!(
            "--threshold {threshold} outside [0, 1]"
        )));
    }
    let files = inputs(&a.input, &a.split)?;
    if files.is_empty() {
        return Err(Error::Validation(format!(
            "no volumes found in {}",
            a.input.display()
        )));
    }
    let out = a.out.unwrap_or_else(|| output_root().join("predictions"));
    let prob_dir = out.join("prob");
    create_dir(&out)?;
    if a.probabilities {
        create_dir(&prob_dir)?;
    }
    let (teacher, student);
    let pred = match ckpt.header.architecture.kind {
        ModelKind::Teacher => {
            teacher = TeacherState::from_checkpoint(&ckpt)?;
            Predictor::Teacher(&teacher)
        }
        ModelKind::Student => {
            student = student_from_checkpoint(&ckpt)?;
            Predictor::Student(&student)
        }
    };
    for (name, path) in files {
        let target = out.join(format!("{name}.vpbv"));
        if target.exists() && !a.force {
            return Err(Error::Validation(format!(
                "{} already exists; pass --force",
                target.display()
            )));
        }
        let image = percentile_clip_normalize(&read_volume(&path)?, clip)?;
        let prob = infer_volume(pred, &image, patch, overlap)?;
        write_volume(&binarize(&prob, threshold)?, &target)?;
        if a.probabilities {
            write_volume(&prob, prob_dir.join(format!("{name}.vpbv")))?;
        }
        println!("{}", target.display());
    }
    Ok(())
}

pub fn evaluate(a: Evaluate) -> Result<()> {
    let sinkhorn = SinkhornParams::default();
    let report = match (a.pred.is_dir(), a.gt.is_dir()) {
        (true, true) => evaluate_dir(&a.pred, &a.gt, &sinkhorn)?,
        (false, false) => {
            let m = evaluate_pair(
                &stem(&a.pred),
                &read_volume(&a.pred)?,
                &read_volume(&a.gt)?,
                &sinkhorn,
            )?;
            MetricsReport::new(vec![m], Vec::new())
        }
        _ => {
            return Err(Error::Validation(
                "--pred and --gt must both be files or both be directories".into(),
            ))
        }
    };
    for u in &report.unmatched {
        eprintln!("skipped unpaired {u}");
    }
    print!("{}", report.summary_table(&a.label));
    if let Some(p) = a.out {
        write_file(&p, report.to_json_lines())?;
    }
    Ok(())
}

#[derive(Serialize)]
struct CodebookDump {
    checkpoint: String,
    stage: Stage,
    size: usize,
    dim: usize,
    temperature: f64,
    perplexity: f64,
    codes_used: usize,
    usage: Vec<u64>,
    entries: Vec<Vec<f64>>,
}

pub fn inspect_codebook(a: InspectCodebook) -> Result<()> {
    let ckpt = ModelCheckpoint::load(&a.checkpoint)?;
    if ckpt.header.architecture.kind != ModelKind::Teacher {
        return Err(Error::Validation(format!(
            "{} is a student checkpoint; only teachers carry a codebook",
            a.checkpoint.display()
        )));
    }
    let state = TeacherState::from_checkpoint(&ckpt)?;
    let cb = &state.codebook;
    let dump = CodebookDump {
        checkpoint: ckpt.hash(),
        stage: ckpt.header.stage,
        size: cb.len(),
        dim: cb.dim(),
        temperature: cb.temperature,
        perplexity: code_perplexity(&cb.usage),
        codes_used: cb.usage.iter().filter(|&&u| u > 0).count(),
        usage: cb.usage.clone(),
        entries: (0..cb.len()).map(|j| cb.entry(j).to_vec()).collect(),
    };
    let text = serde_json::to_string_pretty(&dump).expect("plain data") + "\n";
    match a.out {
        Some(p) => write_file(&p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub const CURVE_COLUMNS: [&str; 14] = [
    "epoch",
    "steps",
    "lr",
    "temperature",
    "perplexity",
    "rec",
    "cb",
    "seg",
    "semi",
    "dis",
    "w_cb",
    "w_semi",
    "w_dis",
    "total",
];

pub fn export_curves(a: ExportCurves) -> Result<()> {
    let log = a.run.join(METRICS_FILE);
    if !log.is_file() {
        return Err(Error::Validation(format!("{} not found", log.display())));
    }
    let records = read_log(&log)?;
    if records.is_empty() {
        return Err(Error::Validation(format!("{} is empty", log.display())));
    }
    let mut by_stage: BTreeMap<Stage, Vec<&EpochRecord>> = BTreeMap::new();
    for r in &records {
        by_stage.entry(r.stage).or_default().push(r);
    }
    let out = a.out.unwrap_or(a.run);
    create_dir(&out)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (stage, rows) in by_stage {
        let path = out.join(format!("{}_curves.csv", stage.name()));
        let csv_err = |e: csv::Error| Error::Validation(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
        w.write_record(CURVE_COLUMNS).map_err(csv_err)?;
        for r in rows {
            let p = &r.report;
            let fields = [
                r.epoch.to_string(),
                r.steps.to_string(),
                r.lr.to_string(),
                opt(r.temperature),
                opt(r.perplexity),
            ]
            .into_iter()
            .chain(
                [
                    p.rec, p.cb, p.seg, p.semi, p.dis, p.w_cb, p.w_semi, p.w_dis, p.total,
                ]
                .map(|x| x.to_string()),
            );
            w.write_record(fields).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        println!("{}", path.display());
    }
    Ok(())
}
