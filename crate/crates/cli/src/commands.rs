use std::path::{Path, PathBuf};
use std::time::Instant;

use affordance_core::dataset::{
    build_iras_dataset, build_rops_dataset, build_vocabulary, validate, Manifest, Split, Task,
};
use affordance_core::geometry::read_cloud;
use affordance_core::metrics::{self, arr, EvaluationReport, PredictionRecord};
use affordance_core::model::{Checkpoint, Model, Stage};
use affordance_core::training::{
    evaluate_iras, finetune_iras_with, predict_iras, predict_rops, pretrain_rops_with, EpochRecord,
    TrainConfig,
};
use affordance_core::{Error, Result};

use crate::config::Config;
use crate::manifest::{io_err, run_path, snapshot, write_atomic, RunManifest};
use crate::{
    AblationArg, Command, Common, EvalArgs, FinetuneArgs, GenDataArgs, PredictArgs, PretrainArgs,
    ReportArgs, SplitArg, TaskArg, TrainFlags,
};

/// What a subcommand read and wrote, and where its run manifest goes.
struct Outcome {
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    manifest: Option<PathBuf>,
}

pub fn dispatch(command: Command) -> Result<()> {
    if let Command::Rerun { args } = &command {
        return rerun(&args.manifest);
    }
    let command = absolute(command)?;
    let cfg = resolve(common(&command))?;
    execute(&command, cfg)
}

fn common(command: &Command) -> &Common {
    match command {
        Command::GenData { common, .. }
        | Command::Pretrain { common, .. }
        | Command::Finetune { common, .. }
        | Command::Eval { common, .. }
        | Command::Predict { common, .. }
        | Command::Report { common, .. }
        | Command::ShowConfig { common } => common,
        Command::Rerun { .. } => unreachable!("rerun carries no config"),
    }
}

fn resolve(common: &Common) -> Result<Config> {
    let mut cfg = Config::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

/// Runs a command against a resolved config and records its manifest.
fn execute(command: &Command, mut cfg: Config) -> Result<()> {
    let start = Instant::now();
    let single = || pool(1);
    let outcome = match command {
        Command::GenData { args, .. } => single()?.install(|| gen_data(args, &cfg))?,
        Command::Pretrain { args, .. } => single()?.install(|| pretrain(args, &mut cfg))?,
        Command::Finetune { args, .. } => single()?.install(|| finetune(args, &mut cfg))?,
        Command::Eval { args, .. } => pool(args.jobs)?.install(|| eval(args, &mut cfg))?,
        Command::Predict { args, .. } => single()?.install(|| predict(args, &mut cfg))?,
        Command::Report { args, .. } => single()?.install(|| report(args, &cfg))?,
        Command::ShowConfig { .. } => {
            print!("{}", cfg.to_toml());
            return Ok(());
        }
        Command::Rerun { .. } => unreachable!(),
    };
    if let Some(path) = outcome.manifest {
        let seed = match command {
            Command::Pretrain { .. } => cfg.pretrain.seed,
            Command::Finetune { .. } => cfg.finetune.seed,
            _ => cfg.dataset.seed,
        };
        RunManifest {
            subcommand: command.name().to_string(),
            command: command.clone(),
            config: cfg,
            inputs: outcome.inputs,
            outputs: outcome.outputs,
            seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            duration_secs: start.elapsed().as_secs_f64(),
        }
        .write(&path)?;
    }
    Ok(())
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))
}

fn abs(p: &Path) -> Result<PathBuf> {
    std::path::absolute(p).map_err(|e| io_err(p, e))
}

fn abs_opt(p: &Option<PathBuf>) -> Result<Option<PathBuf>> {
    p.as_deref().map(abs).transpose()
}

/// Makes every path in the command absolute so a manifest replays from any
/// working directory.
fn absolute(mut command: Command) -> Result<Command> {
    match &mut command {
        Command::GenData { args, common } => {
            args.out = abs(&args.out)?;
            common.config = abs_opt(&common.config)?;
        }
        Command::Pretrain { args, common } => {
            args.data = abs(&args.data)?;
            args.out = abs(&args.out)?;
            args.train.log = abs_opt(&args.train.log)?;
            common.config = abs_opt(&common.config)?;
        }
        Command::Finetune { args, common } => {
            args.data = abs(&args.data)?;
            args.out = abs(&args.out)?;
            args.init = abs_opt(&args.init)?;
            args.train.log = abs_opt(&args.train.log)?;
            common.config = abs_opt(&common.config)?;
        }
        Command::Eval { args, common } => {
            args.ckpt = abs(&args.ckpt)?;
            args.data = abs(&args.data)?;
            args.out = abs(&args.out)?;
            args.dump = abs_opt(&args.dump)?;
            common.config = abs_opt(&common.config)?;
        }
        Command::Predict { args, common } => {
            args.ckpt = abs(&args.ckpt)?;
            args.cloud = abs(&args.cloud)?;
            args.dump_mask = abs_opt(&args.dump_mask)?;
            common.config = abs_opt(&common.config)?;
        }
        Command::Report { args, common } => {
            args.input = abs(&args.input)?;
            common.config = abs_opt(&common.config)?;
        }
        Command::ShowConfig { common } => common.config = abs_opt(&common.config)?,
        Command::Rerun { .. } => {}
    }
    Ok(command)
}

fn rerun(path: &Path) -> Result<()> {
    let m = RunManifest::read(path)?;
    let before = snapshot(&m.outputs)?;
    execute(&m.command, m.config.clone())?;
    let after = snapshot(&m.outputs)?;
    for (p, bytes) in &before {
        match after.get(p) {
            Some(b) if b == bytes => {}
            Some(_) => {
                return Err(Error::Contract(format!(
                    "{} differs from the recorded run",
                    p.display()
                )))
            }
            None => {
                return Err(Error::Contract(format!(
                    "{} was not regenerated",
                    p.display()
                )))
            }
        }
    }
    println!(
        "reproduced {} file(s) of the {} run bit-exactly",
        before.len(),
        m.subcommand
    );
    Ok(())
}

fn split(s: SplitArg) -> Split {
    match s {
        SplitArg::Train => Split::Train,
        SplitArg::Close => Split::Close,
        SplitArg::Open => Split::Open,
    }
}

fn gen_data(args: &GenDataArgs, cfg: &Config) -> Result<Outcome> {
    cfg.dataset.check()?;
    let tasks: &[Task] = match args.task {
        TaskArg::Rops => &[Task::Rops],
        TaskArg::Iras => &[Task::Iras],
        TaskArg::All => &[Task::Rops, Task::Iras],
    };
    for &task in tasks {
        let m = match task {
            Task::Rops => build_rops_dataset(&cfg.dataset)?,
            Task::Iras => build_iras_dataset(&cfg.dataset)?,
        };
        validate(&m)?;
        m.write(&args.out)?;
        print_census(&m);
    }
    let name = match args.task {
        TaskArg::Rops => "rops",
        TaskArg::Iras => "iras",
        TaskArg::All => "all",
    };
    Ok(Outcome {
        inputs: vec![],
        outputs: vec![args.out.clone()],
        manifest: Some(args.out.join(format!("gen-data-{name}.run.json"))),
    })
}

fn print_census(m: &Manifest) {
    println!(
        "{}: {} samples, {} clouds, vocabulary {} tokens ({})",
        m.task.name(),
        m.samples.len(),
        m.clouds.len(),
        m.vocab.len(),
        m.vocab.fingerprint()
    );
    for s in [Split::Train, Split::Close, Split::Open] {
        let census = m.census(s);
        if census.is_empty() {
            continue;
        }
        let arrs: Vec<f64> = m.split(s).map(|x| arr(&x.mask)).collect();
        let mean = arrs.iter().sum::<f64>() / arrs.len() as f64;
        let min = arrs.iter().copied().fold(f64::INFINITY, f64::min);
        let max = arrs.iter().copied().fold(0.0, f64::max);
        println!(
            "  {:<6} {:>6} samples, {} classes, Arr mean {mean:.3} min {min:.3} max {max:.3}",
            s.name(),
            arrs.len(),
            census.len()
        );
        for (class, n) in &census {
            println!("    {class:<14} {n:>6}");
        }
    }
}

fn apply_flags(t: &mut TrainConfig, f: &TrainFlags) -> Result<()> {
    if let Some(e) = f.epochs {
        t.epochs = e;
    }
    if let Some(lr) = f.lr {
        t.learning_rate = lr;
    }
    if let Some(b) = f.batch_size {
        t.batch_size = b;
    }
    t.check()
}

fn log_path(out: &Path, flags: &TrainFlags) -> PathBuf {
    flags.log.clone().unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".log.jsonl");
        PathBuf::from(s)
    })
}

fn progress(stage: &'static str, total: usize) -> impl FnMut(&EpochRecord) {
    let start = Instant::now();
    move |e: &EpochRecord| {
        let text = e
            .mean_text_loss
            .map(|t| format!(" text {t:.4}"))
            .unwrap_or_default();
        eprintln!(
            "{stage} epoch {}/{total}: loss {:.4}{text} mask {:.4} ({:.0}s)",
            e.epoch + 1,
            e.mean_loss,
            e.mean_mask_loss,
            start.elapsed().as_secs_f64()
        );
    }
}

fn pretrain(args: &PretrainArgs, cfg: &mut Config) -> Result<Outcome> {
    apply_flags(&mut cfg.pretrain, &args.train)?;
    let data = Manifest::read(&args.data, Task::Rops)?;
    let mut on_epoch = progress("pretrain", cfg.pretrain.epochs);
    let (ckpt, log) = pretrain_rops_with(&cfg.pretrain, &cfg.model, &data, &mut on_epoch)?;
    ckpt.save(&args.out)?;
    let log_file = log_path(&args.out, &args.train);
    log.write(&log_file)?;
    let snap = if data.split(Split::Close).next().is_some() {
        Split::Close
    } else {
        Split::Train
    };
    let recs = predict_rops(&ckpt, &data, snap, cfg.eval.threshold)?;
    let r = metrics::evaluate(&recs, cfg.eval.metrics)?;
    println!(
        "pretrain {} split: mIoU_i {:.4}  mIoU_c {:.4}  mAP50 {:.4}",
        snap.name(),
        r.miou_i,
        r.miou_c,
        r.map50_i
    );
    Ok(Outcome {
        inputs: vec![args.data.clone()],
        outputs: vec![args.out.clone(), log_file],
        manifest: Some(run_path(&args.out)),
    })
}

fn finetune(args: &FinetuneArgs, cfg: &mut Config) -> Result<Outcome> {
    apply_flags(&mut cfg.finetune, &args.train)?;
    let ab = &mut cfg.finetune.ablation;
    for a in &args.ablation {
        match a {
            AblationArg::WoPc => ab.disable_pretrain_transfer = true,
            AblationArg::WoUl => ab.disable_unbalanced = true,
            AblationArg::DiceOnly => ab.dice_only = true,
            AblationArg::BceOnly => ab.bce_only = true,
        }
    }
    if args.init.is_none() && !ab.disable_pretrain_transfer {
        eprintln!("warning: no --init checkpoint; training as the wo-pc ablation");
        ab.disable_pretrain_transfer = true;
    }
    if args.init.is_some() && ab.disable_pretrain_transfer {
        eprintln!("warning: wo-pc ablation ignores --init");
    }
    cfg.finetune.check()?;
    let data = Manifest::read(&args.data, Task::Iras)?;
    let init = match (&args.init, cfg.finetune.ablation.disable_pretrain_transfer) {
        (Some(p), false) => Some(Checkpoint::load(p)?),
        _ => None,
    };
    eprintln!("finetune ablation: {}", cfg.finetune.ablation.name());
    let mut on_epoch = progress("finetune", cfg.finetune.epochs);
    let (ckpt, log) = finetune_iras_with(
        &cfg.finetune,
        &cfg.model,
        &data,
        init.as_ref(),
        &mut on_epoch,
    )?;
    ckpt.save(&args.out)?;
    let log_file = log_path(&args.out, &args.train);
    log.write(&log_file)?;
    let model = Model::from_checkpoint(ckpt, data.vocab.clone())?;
    if data.split(Split::Close).next().is_some() {
        let r = evaluate_iras(
            &model,
            &data,
            Split::Close,
            cfg.eval.threshold,
            cfg.eval.metrics,
        )?;
        println!(
            "finetune close split: mIoU_i {:.4}  mIoU_c {:.4}  mAP50 {:.4}  <AFF> {:.1}%",
            r.miou_i,
            r.miou_c,
            r.map50_i,
            100.0 * r.aff_rate.unwrap_or(0.0)
        );
    }
    let mut inputs = vec![args.data.clone()];
    inputs.extend(args.init.clone());
    Ok(Outcome {
        inputs,
        outputs: vec![args.out.clone(), log_file],
        manifest: Some(run_path(&args.out)),
    })
}

fn eval(args: &EvalArgs, cfg: &mut Config) -> Result<Outcome> {
    if let Some(t) = args.threshold {
        cfg.eval.threshold = t;
    }
    let threshold = cfg.eval.threshold;
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let s = split(args.split);
    let (records, aff_rate) = match ckpt.meta.stage {
        Stage::Iras => {
            let data = Manifest::read(&args.data, Task::Iras)?;
            let model = Model::from_checkpoint(ckpt, data.vocab.clone())?;
            let (r, a) = predict_iras(&model, &data, s, threshold)?;
            (r, Some(a))
        }
        Stage::Rops => {
            let data = Manifest::read(&args.data, Task::Rops)?;
            (predict_rops(&ckpt, &data, s, threshold)?, None)
        }
    };
    let mut report = metrics::evaluate(&records, cfg.eval.metrics)?;
    report.aff_rate = aff_rate;

    let dump = args.dump.clone().unwrap_or_else(|| {
        let mut p = args.out.as_os_str().to_owned();
        p.push(".predictions.jsonl");
        PathBuf::from(p)
    });
    let mut lines = Vec::new();
    for r in &records {
        serde_json::to_writer(&mut lines, r)?;
        lines.push(b'\n');
    }
    write_atomic(&dump, &lines)?;
    let mut json = serde_json::to_vec_pretty(&report)?;
    json.push(b'\n');
    write_atomic(&args.out, &json)?;
    println!("{} split\n{report}", s.name());
    Ok(Outcome {
        inputs: vec![args.ckpt.clone(), args.data.clone()],
        outputs: vec![args.out.clone(), dump],
        manifest: Some(run_path(&args.out)),
    })
}

fn predict(args: &PredictArgs, cfg: &mut Config) -> Result<Outcome> {
    if let Some(t) = args.threshold {
        cfg.eval.threshold = t;
    }
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let model = Model::from_checkpoint(ckpt, build_vocabulary())?;
    let cloud = read_cloud(&args.cloud)?;
    let p = model.predict_mask(&cloud, &args.ask, cfg.eval.threshold)?;
    println!("response: {}", p.text);
    if !p.aff_found {
        eprintln!("warning: response has no <AFF> token; returning an empty mask");
    }
    println!(
        "positive points: {} of {}",
        p.mask.iter().filter(|&&m| m != 0).count(),
        p.mask.len()
    );
    println!("confidence: {:.4}", p.confidence);
    let Some(out) = &args.dump_mask else {
        return Ok(Outcome {
            inputs: vec![],
            outputs: vec![],
            manifest: None,
        });
    };
    write_atomic(out, &p.mask)?;
    Ok(Outcome {
        inputs: vec![args.ckpt.clone(), args.cloud.clone()],
        outputs: vec![out.clone()],
        manifest: Some(run_path(out)),
    })
}

fn report(args: &ReportArgs, cfg: &Config) -> Result<Outcome> {
    let text = std::fs::read_to_string(&args.input).map_err(|e| io_err(&args.input, e))?;
    let bad = |detail: String| Error::Format {
        path: args.input.clone(),
        detail,
    };
    let report: EvaluationReport = if args.input.extension().is_some_and(|e| e == "jsonl") {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str::<PredictionRecord>(l)
                    .map_err(|e| bad(format!("line {}: {e}", i + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        metrics::evaluate(&records, cfg.eval.metrics)?
    } else {
        serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?
    };
    println!("{report}");
    Ok(Outcome {
        inputs: vec![args.input.clone()],
        outputs: vec![],
        manifest: None,
    })
}
