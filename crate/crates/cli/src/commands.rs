use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use lightsleep::adapt::{adapt, AdaptMode};
use lightsleep::complexity::{analyze_model, sweep_blocks, sweep_table};
use lightsleep::data::{
    read_edf_signal, read_hypnogram_csv, segment_epochs, sepb_read, sepb_write, subject_kfold_split,
    synth_generate, trim_wake, Dataset, SynthConfig,
};
use lightsleep::loss::{batch_loss, GradHistogramAccumulator, LossSpec};
use lightsleep::metrics::{metrics_report, ConfusionMatrix, MetricsReport};
use lightsleep::nn::checkpoint::{self, Checkpoint};
use lightsleep::nn::{Model, ModelConfig};
use lightsleep::train::{fit_with, predict, TrainConfig};
use lightsleep::{Error, Result};
use log::info;
use serde::Serialize;

use crate::config::{Resolved, RunConfig};
use crate::{
    AdaptArgs, AnalyzeArgs, Command, EvalArgs, GenSynthArgs, GradHistArgs, IngestArgs, OnOff,
    RunConfigArgs, SweepArgs, TrainArgs,
};

pub fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenSynth(a) => gen_synth(a),
        Command::IngestEdf(a) => ingest_edf(a),
        Command::Train(a) => train(a),
        Command::Adapt(a) => adapt_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Analyze(a) => analyze(a),
        Command::SweepBlocks(a) => sweep(a),
        Command::ExportGradHist(a) => grad_hist(a),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.with_file_name(name)
}

fn load_model_config(path: Option<&Path>) -> Result<ModelConfig> {
    let cfg = match path {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)
            .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => ModelConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn resolve(args: RunConfigArgs) -> Result<Resolved> {
    let mut r = Resolved::load(args.config.as_deref(), args.model.as_deref())?;
    r.flag("epochs", args.epochs, |t, v| t.epochs = v);
    r.flag("batch_size", args.batch, |t, v| t.batch_size = v);
    r.flag("base_lr", args.lr, |t, v| t.base_lr = v);
    r.flag("reweighting", args.reweight, |t, v| t.reweighting = matches!(v, OnOff::On));
    r.flag("bins", args.bins, |t, v| t.bins = v);
    r.flag("seed", args.seed, |t, v| t.seed = v);
    r.config.train.validate()?;
    Ok(r)
}

fn gen_synth(a: GenSynthArgs) -> Result<()> {
    let cfg = SynthConfig::new(a.subjects, a.epochs_per_class, a.seed).with_scales(a.shift_scales);
    let ds = synth_generate(&cfg)?;
    sepb_write(&ds, &a.out)?;
    info!("wrote {} epochs for {} subjects to {}", ds.len(), a.subjects, a.out.display());
    Ok(())
}

fn ingest_edf(a: IngestArgs) -> Result<()> {
    let (samples, rate) = read_edf_signal(&a.edf, &a.channel)?;
    let hyp = read_hypnogram_csv(&a.hypnogram)?;
    let subject = match a.subject {
        Some(s) => s,
        None => a
            .edf
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "subject".into()),
    };
    let seg = segment_epochs(&samples, rate, &hyp.entries, &subject, a.night)?;
    let ds = match a.trim_wake {
        Some(k) => trim_wake(&seg.dataset, k),
        None => seg.dataset,
    };
    sepb_write(&ds, &a.out)?;
    info!(
        "{}: {} epochs kept, {} movement/unknown excluded",
        a.out.display(),
        ds.len(),
        seg.excluded
    );
    println!("{}", serde_json::json!({ "epochs": ds.len(), "excluded": seg.excluded }));
    Ok(())
}

#[derive(Serialize)]
struct TrainManifest<'a> {
    command: &'static str,
    data: String,
    checkpoint: String,
    resolved: &'a Resolved,
    final_loss: Option<f64>,
}

fn checkpoint_path(out: &Path, epoch: usize) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = out.extension().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "lsnc".into());
    out.with_file_name(format!("{stem}.epoch{epoch:03}.{ext}"))
}

fn train(a: TrainArgs) -> Result<()> {
    let resolved = resolve(a.run)?;
    let data = sepb_read(&a.data)?;
    let RunConfig { model: model_cfg, train: train_cfg } = resolved.config.clone();
    let model = Model::<f32>::new(model_cfg, train_cfg.seed)?;
    info!(
        "training {} parameters on {} epochs for {} passes",
        model.param_count(),
        data.len(),
        train_cfg.epochs
    );
    let every = a.checkpoint_every.filter(|&k| k > 0);
    let (model, log) = fit_with(model, &data, &train_cfg, |e, m, entry| {
        info!(
            "epoch {:>3} loss {:.4} acc {:.3} beta {:.3} lr {:.2e} ({:.1}s)",
            e, entry.loss, entry.accuracy, entry.mean_beta, entry.lr, entry.wall_secs
        );
        if let Some(k) = every {
            if (e + 1) % k == 0 {
                checkpoint::save(&Checkpoint::new(m.clone()), checkpoint_path(&a.out, e + 1))?;
            }
        }
        Ok(())
    })?;
    checkpoint::save(&Checkpoint::new(model), &a.out)?;
    let log_path = a.log.unwrap_or_else(|| sibling(&a.out, "trainlog.csv"));
    log.write_csv(fs::File::create(&log_path)?)?;
    fs::write(log_path.with_extension("json"), log.to_json()?)?;
    write_json(
        &a.out.with_extension("manifest.json"),
        &TrainManifest {
            command: "train",
            data: a.data.display().to_string(),
            checkpoint: a.out.display().to_string(),
            resolved: &resolved,
            final_loss: log.epochs.last().map(|e| e.loss),
        },
    )?;
    Ok(())
}

fn adapt_cmd(a: AdaptArgs) -> Result<()> {
    let ckpt = checkpoint::load::<f32>(&a.ckpt)?;
    // Labels are dropped on load so nothing below can depend on them.
    let target = sepb_read(&a.target)?.without_labels();
    let batches = target.batches::<f32>(a.batch)?;
    let (adapted, stats, deltas) = adapt(&ckpt.model, &batches, a.mode)?;
    checkpoint::save(
        &Checkpoint {
            model: adapted,
            adabn_accumulators: Some(stats),
        },
        &a.out,
    )?;
    let deltas_path = a.deltas.unwrap_or_else(|| sibling(&a.out, "stats-delta.json"));
    write_json(&deltas_path, &deltas)?;
    info!("adapted {} BN layers on {} target epochs", deltas.len(), target.len());
    Ok(())
}

fn score(model: &Model<f32>, data: &Dataset, batch: usize, adabn: Option<AdaptMode>) -> Result<ConfusionMatrix> {
    let adapted;
    let model = match adabn {
        Some(mode) => {
            adapted = adapt(model, &data.without_labels().batches::<f32>(batch)?, mode)?.0;
            &adapted
        }
        None => model,
    };
    let all: Vec<usize> = (0..data.len()).collect();
    let truth = data.labels(&all)?;
    let pred = predict(model, data, batch)?;
    let mut cm = ConfusionMatrix::new();
    cm.accumulate(&truth, &pred)?;
    Ok(cm)
}

#[derive(Serialize)]
struct FoldResult {
    fold: usize,
    test_subjects: Vec<String>,
    report: MetricsReport,
}

#[derive(Serialize)]
struct CrossValidation {
    folds: Vec<FoldResult>,
    pooled: MetricsReport,
    train: TrainConfig,
    model: ModelConfig,
}

fn eval(a: EvalArgs) -> Result<()> {
    let data = sepb_read(&a.data)?;
    if let Some(k) = a.kfold {
        let resolved = Resolved::load(a.train_cfg.as_deref(), None)?;
        let mut model_cfg = resolved.config.model.clone();
        if let Some(p) = &a.ckpt {
            model_cfg = checkpoint::load::<f32>(p)?.model.config().clone();
        }
        let train_cfg = resolved.config.train.clone();
        let folds = subject_kfold_split(&data, k)?;
        let mut pooled = ConfusionMatrix::new();
        let mut results = Vec::with_capacity(k);
        for (i, fold) in folds.iter().enumerate() {
            let train_set = data.subset(&fold.train_indices(&data));
            let test_set = data.subset(&fold.test_indices(&data));
            info!("fold {}/{k}: {} train, {} test epochs", i + 1, train_set.len(), test_set.len());
            let model = Model::<f32>::new(model_cfg.clone(), train_cfg.seed)?;
            let (model, _) = fit_with(model, &train_set, &train_cfg, |_, _, _| Ok(()))?;
            let cm = score(&model, &test_set, a.batch, a.adabn)?;
            pooled.merge(&cm);
            results.push(FoldResult {
                fold: i,
                test_subjects: fold.test_subjects.clone(),
                report: metrics_report(&cm)?,
            });
        }
        let pooled = metrics_report(&pooled)?;
        print!("{}", pooled.to_table());
        if let Some(p) = &a.report {
            write_json(
                p,
                &CrossValidation {
                    folds: results,
                    pooled,
                    train: train_cfg,
                    model: model_cfg,
                },
            )?;
        }
        return Ok(());
    }
    let ckpt_path = a.ckpt.as_deref().ok_or_else(|| Error::Config("--ckpt is required".into()))?;
    let ckpt = checkpoint::load::<f32>(ckpt_path)?;
    let report = metrics_report(&score(&ckpt.model, &data, a.batch, a.adabn)?)?;
    print!("{}", report.to_table());
    if let Some(p) = &a.report {
        write_json(p, &report)?;
    }
    Ok(())
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    let cost = analyze_model(&load_model_config(a.model.as_deref())?, a.flop_convention)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&cost)?);
    } else {
        print!("{}", cost.to_table());
    }
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let base = load_model_config(a.model.as_deref())?;
    let rows = match (&a.train_data, &a.test_data) {
        (Some(train_path), Some(test_path)) => {
            let train_set = sepb_read(train_path)?;
            let test_set = sepb_read(test_path)?;
            let train_cfg = Resolved::load(a.train_cfg.as_deref(), None)?.config.train;
            let mut acc = |cfg: &ModelConfig| -> Result<f64> {
                let model = Model::<f32>::new(cfg.clone(), train_cfg.seed)?;
                let (model, _) = fit_with(model, &train_set, &train_cfg, |_, _, _| Ok(()))?;
                lightsleep::train::accuracy(&model, &test_set, 40)
            };
            sweep_blocks(&base, a.max_blocks, a.flop_convention, Some(&mut acc))?
        }
        _ => sweep_blocks(&base, a.max_blocks, a.flop_convention, None)?,
    };
    if a.json {
        println!("{}", serde_json::to_string_pretty(&rows)?);
    } else {
        print!("{}", sweep_table(&rows));
    }
    Ok(())
}

fn grad_hist(a: GradHistArgs) -> Result<()> {
    let ckpt = checkpoint::load::<f32>(&a.ckpt)?;
    let data = sepb_read(&a.data)?;
    let spec = LossSpec {
        reweight: true,
        bins: a.bins,
    };
    let mut acc = GradHistogramAccumulator::new(a.bins)?;
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(a.batch.max(1)) {
        let logits = ckpt.model.forward_eval(&data.to_tensor::<f32>(idx)?)?;
        let (report, _) = batch_loss(&logits, &data.labels(idx)?, spec)?;
        acc.add_report(&report)?;
    }
    match a.out {
        Some(p) => acc.write_csv(fs::File::create(p)?)?,
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            acc.write_csv(&mut lock)?;
            lock.flush()?;
        }
    }
    Ok(())
}
