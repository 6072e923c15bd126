use std::path::Path;

use anyhow::{Context, Result};
use resrep::ablation::minimal_structure;
use resrep::checkpoint::{read_meta, Checkpoint, CheckpointMeta, ModelKind, Normalization};
use resrep::data::{Dataset, Split};
use resrep::flops::{model_flops, FlopsModel};
use resrep::models::{ArchFamily, ArchSpec};
use resrep::reparam::{convert_model, insert_compactors};
use resrep::report::WidthReport;
use resrep::resrep::ResRepConfig;
use resrep::train::{evaluate, TrainMode, Trainer};
use resrep::{DType, Scalar};

use crate::dataset::{normalization, DataArgs};
use crate::output::{sibling, write_events, write_log, write_minimal, write_trace, write_width_report};
use crate::{usage, AblateArgs, AblationMode, ConvertArgs, EvalArgs, PenaltyArgs, Precision, ResrepArgs, ScheduleArgs, TrainBaseArgs};

const BASE_EPOCHS: usize = 180;
const BASE_LR: f64 = 0.1;
const EVAL_BATCH: usize = 256;

macro_rules! with_dtype {
    ($dtype:expr, $f:ident ( $($arg:expr),* )) => {
        match $dtype {
            DType::F32 => $f::<f32>($($arg),*),
            DType::F64 => $f::<f64>($($arg),*),
        }
    };
}

fn meta_of(path: &Path) -> Result<CheckpointMeta> {
    read_meta(path).with_context(|| format!("reading {}", path.display()))
}

fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

/// Where a run writes and what it carries over into every checkpoint.
struct RunContext<'a> {
    out: &'a Path,
    arch: Option<ArchSpec>,
    normalization: Option<Normalization>,
}

impl RunContext<'_> {
    fn save<T: Scalar>(&self, tr: &Trainer<T>) -> Result<()> {
        let mut ck = Checkpoint::of_trainer(tr, self.arch.clone());
        ck.meta.normalization = self.normalization.clone();
        ck.save(self.out).with_context(|| format!("writing {}", self.out.display()))?;
        write_log(&sibling(self.out, "log.csv"), &tr.logs)?;
        if tr.mode != TrainMode::Plain {
            write_events(&sibling(self.out, "events.jsonl"), &tr.events)?;
            write_trace(&sibling(self.out, "trace.csv"), &tr.trace(&tr.state.masks))?;
        }
        Ok(())
    }

    /// Trains epoch by epoch, checkpointing after each one.
    fn drive<T: Scalar>(&self, tr: &mut Trainer<T>, data: &Dataset, stop_after: Option<usize>) -> Result<()> {
        let until = stop_after.unwrap_or(usize::MAX).min(tr.config.total_epochs);
        while tr.state.epoch < until {
            let log = tr.run_epoch(data)?;
            eprintln!(
                "epoch {:>4}  lr {:.6}  loss {:.4}  train acc {:.4}",
                log.epoch, log.lr, log.loss, log.accuracy
            );
            if let Some(ev) = tr.events.last().filter(|e| e.epoch == log.epoch) {
                eprintln!(
                    "           {} channels masked, FLOPs reduction {:.2}%{}",
                    ev.masked.len(),
                    100.0 * ev.reduction,
                    if ev.reached { " (target reached)" } else { "" }
                );
            }
            self.save(tr)?;
        }
        self.save(tr)
    }
}

fn finished<T>(tr: &Trainer<T>) -> bool {
    tr.state.epoch >= tr.config.total_epochs
}

/// A trainer resumed from `out`, when asked for and present.
fn resumed<T: Scalar>(schedule: &ScheduleArgs, out: &Path) -> Result<Option<(Trainer<T>, CheckpointMeta)>> {
    if !schedule.resume || !out.exists() {
        return Ok(None);
    }
    let ck = load::<T>(out)?;
    let meta = ck.meta.clone();
    let tr = ck.into_trainer().map_err(|e| usage(format!("cannot resume from {}: {e}", out.display())))?;
    eprintln!("resuming {} at epoch {}", out.display(), tr.state.epoch);
    Ok(Some((tr, meta)))
}

fn resume_dtype(schedule: &ScheduleArgs, out: &Path) -> Result<Option<DType>> {
    if schedule.resume && out.exists() {
        Ok(Some(meta_of(out)?.dtype))
    } else {
        Ok(None)
    }
}

// ---------------------------------------------------------------- train-base

pub fn train_base(a: &TrainBaseArgs) -> Result<()> {
    let mut arch = ArchSpec::by_name(&a.arch).ok_or_else(|| usage(format!("unknown architecture {:?}", a.arch)))?;
    if let Some(w) = &a.widths {
        if arch.family != ArchFamily::Miniconv {
            return Err(usage("--widths applies to miniconv only"));
        }
        if w.is_empty() || w.contains(&0) {
            return Err(usage("--widths must be positive"));
        }
        arch.widths = w.clone();
    }
    if let Some(size) = a.input_size {
        if arch.family != ArchFamily::Miniconv {
            return Err(usage("--input-size applies to miniconv only"));
        }
        if size == 0 {
            return Err(usage("--input-size must be positive"));
        }
        arch.input[1] = size;
        arch.input[2] = size;
    }
    let dtype = match resume_dtype(&a.schedule, &a.out)? {
        Some(d) => d,
        None => match a.dtype {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        },
    };
    with_dtype!(dtype, train_base_as(a, arch))
}

fn train_base_as<T: Scalar>(a: &TrainBaseArgs, arch: ArchSpec) -> Result<()> {
    let (mut tr, arch) = match resumed::<T>(&a.schedule, &a.out)? {
        Some((tr, meta)) => (tr, meta.arch),
        None => {
            let s = &a.schedule;
            let cfg = ResRepConfig {
                total_epochs: s.epochs.unwrap_or(BASE_EPOCHS),
                initial_lr: s.lr.unwrap_or(BASE_LR),
                batch_size: s.batch_size,
                augment: !s.no_augment,
                ..ResRepConfig::default()
            };
            cfg.validate().map_err(|e| usage(e.to_string()))?;
            let model = arch.build::<T>(s.seed)?;
            (Trainer::new(model, TrainMode::Plain, cfg, s.seed)?, Some(arch))
        }
    };
    let train = a.data.load(Split::Train, &tr.model)?;
    let ctx = RunContext {
        out: &a.out,
        arch,
        normalization: Some(normalization(&train)),
    };
    ctx.drive(&mut tr, &train, a.schedule.stop_after)?;
    if let Some(last) = tr.logs.last() {
        println!("epoch {} train accuracy {:.4}", last.epoch, last.accuracy);
    }
    Ok(())
}

// ---------------------------------------------------------------- resrep / ablate

fn check_target(target: Option<f64>, required: bool) -> Result<f64> {
    match target {
        Some(t) if t > 0.0 && t < 1.0 => Ok(t),
        Some(t) => Err(usage(format!("--flops-target must lie in (0, 1), got {t}"))),
        None if required => Err(usage("--flops-target is required")),
        None => Ok(ResRepConfig::default().flops_target),
    }
}

fn penalty_config(p: &PenaltyArgs, s: &ScheduleArgs, target: f64) -> Result<ResRepConfig> {
    if p.lambda.is_nan() || p.lambda <= 0.0 {
        return Err(usage(format!("--lambda must be positive, got {}", p.lambda)));
    }
    let d = ResRepConfig::default();
    let cfg = ResRepConfig {
        lambda: p.lambda,
        theta_init: p.theta_init,
        theta_step: p.theta_step,
        selection_interval: p.interval,
        warmup_epochs: p.warmup_epochs,
        flops_target: target,
        compactor_momentum: p.compactor_momentum,
        total_epochs: s.epochs.unwrap_or(d.total_epochs),
        batch_size: s.batch_size,
        initial_lr: s.lr.unwrap_or(d.initial_lr),
        augment: !s.no_augment,
        ..d
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

struct PenaltyRun<'a> {
    base: &'a Path,
    out: &'a Path,
    mode: TrainMode,
    config: ResRepConfig,
    schedule: &'a ScheduleArgs,
    data: &'a DataArgs,
}

impl PenaltyRun<'_> {
    fn dtype(&self) -> Result<DType> {
        match resume_dtype(self.schedule, self.out)? {
            Some(d) => Ok(d),
            None => Ok(meta_of(self.base)?.dtype),
        }
    }

    /// Trains from the base checkpoint (or resumes) and returns the trainer
    /// with the data it saw.
    fn run<T: Scalar>(&self) -> Result<(Trainer<T>, RunContext<'_>, DataArgs)> {
        let (mut tr, arch, norm) = match resumed::<T>(self.schedule, self.out)? {
            Some((tr, meta)) => (tr, meta.arch, meta.normalization),
            None => {
                let ck = load::<T>(self.base)?;
                if ck.meta.kind != ModelKind::Base || ck.model.has_compactors() {
                    return Err(usage(format!("{} is not a base checkpoint", self.base.display())));
                }
                if ck.model.targets.is_empty() {
                    return Err(usage("the base model has no target layers"));
                }
                let model = if self.mode.uses_compactors() {
                    insert_compactors(&ck.model)?
                } else {
                    ck.model
                };
                let tr = Trainer::new(model, self.mode, self.config.clone(), self.schedule.seed)?;
                (tr, ck.meta.arch, ck.meta.normalization)
            }
        };
        let train = self.data.load(Split::Train, &tr.model)?;
        let ctx = RunContext {
            out: self.out,
            arch,
            normalization: norm.or_else(|| Some(normalization(&train))),
        };
        ctx.drive(&mut tr, &train, self.schedule.stop_after)?;
        Ok((tr, ctx, self.data.clone()))
    }
}

pub fn resrep(a: &ResrepArgs) -> Result<()> {
    let target = check_target(a.penalty.flops_target, true)?;
    let run = PenaltyRun {
        base: &a.base,
        out: &a.out,
        mode: TrainMode::Resrep,
        config: penalty_config(&a.penalty, &a.schedule, target)?,
        schedule: &a.schedule,
        data: &a.data,
    };
    with_dtype!(run.dtype()?, resrep_as(&run))
}

fn resrep_as<T: Scalar>(run: &PenaltyRun<'_>) -> Result<()> {
    let (tr, _, _) = run.run::<T>()?;
    report_selection(&tr);
    Ok(())
}

fn report_selection<T>(tr: &Trainer<T>) {
    let masked: usize = tr.state.masks.iter().flatten().filter(|&&b| !b).count();
    let reduction = tr.events.last().map_or(0.0, |e| e.reduction);
    println!(
        "epoch {} of {}: {masked} channels masked, deduced FLOPs reduction {:.2}%, {} selection events",
        tr.state.epoch,
        tr.config.total_epochs,
        100.0 * reduction,
        tr.events.len()
    );
}

pub fn ablate(a: &AblateArgs) -> Result<()> {
    let mode = match a.mode {
        AblationMode::GroupLasso => TrainMode::GroupLasso,
        AblationMode::ResOnly => TrainMode::ResOnly,
        AblationMode::RepOnly => TrainMode::RepOnly,
        AblationMode::Resrep => TrainMode::Resrep,
    };
    let target = check_target(a.penalty.flops_target, mode.selects())?;
    if a.granularity == 0 {
        return Err(usage("--granularity must be at least 1"));
    }
    let run = PenaltyRun {
        base: &a.base,
        out: &a.out,
        mode,
        config: penalty_config(&a.penalty, &a.schedule, target)?,
        schedule: &a.schedule,
        data: &a.data,
    };
    with_dtype!(run.dtype()?, ablate_as(&run, a.granularity))
}

fn ablate_as<T: Scalar>(run: &PenaltyRun<'_>, granularity: usize) -> Result<()> {
    let (tr, ctx, data) = run.run::<T>()?;
    if tr.mode.selects() {
        report_selection(&tr);
    }
    if !finished(&tr) {
        return Ok(());
    }
    let test = data.load(Split::Test, &tr.model)?;
    let (ms, _) = minimal_structure(&tr.model, &test, granularity, EVAL_BATCH)?;
    write_minimal(&sibling(ctx.out, "minimal.json"), &ms)?;
    write_trace(&sibling(ctx.out, "trace.csv"), &tr.trace(&ms.masks))?;
    println!(
        "minimal structure: widths {:?} -> {:?}, FLOPs reduction {:.2}%, accuracy {:.4} -> {:.4}",
        ms.original_widths,
        ms.widths,
        100.0 * ms.reduction,
        ms.accuracy_before,
        ms.accuracy_after
    );
    Ok(())
}

// ---------------------------------------------------------------- convert

pub fn convert(a: &ConvertArgs) -> Result<()> {
    if a.epsilon.is_nan() || a.epsilon <= 0.0 {
        return Err(usage(format!("--epsilon must be positive, got {}", a.epsilon)));
    }
    with_dtype!(meta_of(&a.input)?.dtype, convert_as(a))
}

fn convert_as<T: Scalar>(a: &ConvertArgs) -> Result<()> {
    let ck = load::<T>(&a.input)?;
    if !ck.model.has_compactors() {
        return Err(usage(format!("{} has no compactors to convert", a.input.display())));
    }
    let test = if a.skip_eval { None } else { Some(a.data.load(Split::Test, &ck.model)?) };
    let (converted, widths) = convert_model(&ck.model, a.epsilon)?;
    let original = FlopsModel::new(&ck.model)?.original();
    let mut report = WidthReport::new(widths, original, model_flops(&converted)?);
    if let Some(test) = &test {
        report.accuracy_before = Some(evaluate(&ck.model, test, EVAL_BATCH)?);
        report.accuracy_after = Some(evaluate(&converted, test, EVAL_BATCH)?);
    }
    let mut out = Checkpoint::of_model(&converted, ck.meta.arch.clone(), ck.meta.seed);
    out.meta.kind = ModelKind::Converted;
    out.meta.epoch = ck.meta.epoch;
    out.meta.masks = ck.meta.masks.clone();
    out.meta.normalization = ck.meta.normalization.clone();
    out.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let (csv_path, json_path) = write_width_report(&a.out, &report)?;
    for l in &report.layers {
        println!("{:>3} {:<24} {:>4} -> {:>4}", l.target, l.name, l.original, l.final_width);
    }
    println!(
        "FLOPs {} -> {} (reduction {:.2}%)",
        report.original_flops, report.final_flops, report.reduction_pct
    );
    if let (Some(b), Some(f)) = (report.accuracy_before, report.accuracy_after) {
        println!("accuracy before {b:.4} after {f:.4}");
    }
    eprintln!("wrote {}, {}, {}", a.out.display(), csv_path.display(), json_path.display());
    Ok(())
}

// ---------------------------------------------------------------- eval

pub fn eval(a: &EvalArgs) -> Result<()> {
    if a.batch_size == 0 {
        return Err(usage("--batch-size must be at least 1"));
    }
    with_dtype!(meta_of(&a.checkpoint)?.dtype, eval_as(a))
}

fn eval_as<T: Scalar>(a: &EvalArgs) -> Result<()> {
    let ck = load::<T>(&a.checkpoint)?;
    let test = a.data.load(Split::Test, &ck.model)?;
    let acc = evaluate(&ck.model, &test, a.batch_size)?;
    println!("{acc:.4}");
    Ok(())
}
