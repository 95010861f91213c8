use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read};
use std::path::{Path, PathBuf};

use jmt_core::data::{SyntheticDataset, DATASET_MAGIC};
use jmt_core::harness::checkpoint::CHECKPOINT_MAGIC;
use jmt_core::harness::{
    ablation_run, grid_search, kfold_run, prepare_features, preset, train, Checkpoint, RunConfig, TrainOptions,
};
use jmt_core::metrics::{read_jsonl, MetricsRecord};
use jmt_core::{codec, Error, Result};
use log::info;
use serde_json::json;

use crate::output::{verify_manifest, RunDir, RunInfo, METRICS_JSONL};
use crate::{Command, ModelArgs, RunArgs};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenerateData { run } => generate_data(&run),
        Command::Train {
            run,
            model,
            resume,
            stop_after,
        } => train_command(&run, &model, resume.as_deref(), stop_after),
        Command::GridSearch { run, model, lr } => grid_command(&run, &model, lr),
        Command::Kfold { run, model, k } => kfold_command(&run, &model, k),
        Command::Ablate { run, seeds } => ablate_command(&run, seeds),
        Command::Report { runs, out } => report_command(&runs, out.as_deref()),
        Command::Verify { paths } => verify_command(&paths),
    }
}

fn open_input(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

fn load_config(run: &RunArgs) -> Result<RunConfig> {
    let base = preset(&run.preset)?;
    let mut cfg = match &run.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            RunConfig::from_toml_over(&base, &text).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
                other => other,
            })?
        }
        None => base,
    };
    if let Some(seed) = run.seed {
        cfg.seed = seed;
        cfg.dataset.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Loads `--data` when given (its dataset config then replaces the run's),
/// otherwise generates from the config.
fn dataset_for(cfg: &mut RunConfig, data: Option<&Path>) -> Result<SyntheticDataset> {
    match data {
        Some(path) => {
            let ds = SyntheticDataset::load(BufReader::new(open_input(path)?))?;
            cfg.dataset = ds.config.clone();
            cfg.validate()?;
            Ok(ds)
        }
        None => SyntheticDataset::generate(&cfg.dataset),
    }
}

fn info_for(run: &RunArgs, cfg: &RunConfig) -> RunInfo {
    RunInfo {
        preset: Some(run.preset.clone()),
        seed: Some(cfg.seed),
        config_hash: Some(cfg.hash_hex()),
        dataset_hash: Some(codec::hash_hex(cfg.dataset.hash())),
    }
}

fn score(record: &MetricsRecord) -> Option<f64> {
    record.mean_ccc.or(record.accuracy)
}

fn log_progress(r: &MetricsRecord) {
    if r.split != "train" {
        let metric = score(r).map_or("n/a".into(), |v| format!("{v:.4}"));
        info!(
            "{} epoch {} {}: metric {metric} loss {:.4}",
            r.run_id, r.epoch, r.split, r.loss
        );
    }
}

fn generate_data(run: &RunArgs) -> Result<()> {
    let cfg = load_config(run)?;
    let out = RunDir::create(&run.out, "generate-data")?;
    let ds = SyntheticDataset::generate(&cfg.dataset)?;
    ds.dump(BufWriter::new(File::create(out.file("dataset.bin"))?))?;
    out.write_text("config.toml", &cfg.to_toml()?)?;
    info!(
        "wrote {} sequences from {} subjects",
        ds.len(),
        cfg.dataset.num_subjects
    );
    out.finish(
        info_for(run, &cfg),
        "ok",
        json!({
            "samples": ds.len(),
            "subjects": cfg.dataset.num_subjects,
            "folds": ds.folds.k,
            "frames_per_sequence": cfg.dataset.frames_per_sequence(),
        }),
    )?;
    Ok(())
}

fn train_command(run: &RunArgs, model: &ModelArgs, resume: Option<&Path>, stop_after: Option<usize>) -> Result<()> {
    let mut cfg = load_config(run)?;
    if let Some(kind) = model.model {
        cfg.model = kind;
    }
    let ds = dataset_for(&mut cfg, model.data.as_deref())?;
    let resume = resume
        .map(|p| Checkpoint::read(BufReader::new(open_input(p)?)))
        .transpose()?;
    let out = RunDir::create(&run.out, "train")?;
    out.write_text("config.toml", &cfg.to_toml()?)?;
    let features = prepare_features(&cfg, &ds)?;
    let mut log = out.metrics_log(resume.as_ref().map(|c| c.epochs_completed))?;
    let mut sink = |r: &MetricsRecord| {
        log_progress(r);
        log.append(r)
    };
    let result = train(
        &cfg,
        &features,
        TrainOptions {
            resume,
            stop_after_epochs: stop_after,
            checkpoint_dir: Some(out.path()),
            run_id: None,
            on_record: Some(&mut sink),
        },
    );
    let outcome = match result {
        Ok(o) => o,
        Err(e @ Error::Divergence { .. }) => {
            if let Error::Divergence { epoch, step, loss } = &e {
                out.write_json(
                    "divergence.json",
                    &json!({
                        "run_id": cfg.run_label(),
                        "epoch": epoch,
                        "step": step,
                        "loss": loss.to_string(),
                        "learning_rate": cfg.optimizer.learning_rate,
                        "config_hash": cfg.hash_hex(),
                    }),
                )?;
            }
            out.finish(info_for(run, &cfg), "diverged", json!({ "error": e.to_string() }))?;
            return Err(e);
        }
        Err(e) => return Err(e),
    };
    let status = if outcome.interrupted { "interrupted" } else { "ok" };
    let summary = json!({
        "run_id": outcome.run_id,
        "model": cfg.model,
        "best_epoch": outcome.best_epoch,
        "best_val_metric": outcome.best_val_metric,
        "test": outcome.test,
        "epochs_run": outcome.epochs_run,
        "steps": outcome.steps,
        "data_order_hash": outcome.data_order_hash,
    });
    out.finish(info_for(run, &cfg), status, summary)?;
    match &outcome.test {
        Some(t) => println!(
            "{}: best epoch {} val {:.4}, test {}",
            outcome.run_id,
            outcome.best_epoch.unwrap_or(0),
            outcome.best_val_metric,
            score(t).map_or("n/a".into(), |v| format!("{v:.4}"))
        ),
        None => println!(
            "{}: stopped after {} epochs; resume from {}",
            outcome.run_id,
            outcome.epochs_run,
            out.file("last.ckpt").display()
        ),
    }
    Ok(())
}

fn grid_command(run: &RunArgs, model: &ModelArgs, lr: Option<Vec<f64>>) -> Result<()> {
    let mut cfg = load_config(run)?;
    if let Some(kind) = model.model {
        cfg.model = kind;
    }
    if let Some(grid) = lr {
        cfg.lr_grid = grid;
    }
    let ds = dataset_for(&mut cfg, model.data.as_deref())?;
    let out = RunDir::create(&run.out, "grid-search")?;
    out.write_text("config.toml", &cfg.to_toml()?)?;
    let features = prepare_features(&cfg, &ds)?;
    let mut log = out.metrics_log(None)?;
    let mut sink = |r: &MetricsRecord| {
        log_progress(r);
        log.append(r)
    };
    let grid = grid_search(&cfg, &features, Some(&mut sink))?;
    let best = &grid.points[grid.best_index];
    out.write_text("best_config.toml", &grid.best_config.to_toml()?)?;
    out.write_json(
        "grid.json",
        &json!({ "points": grid.points, "best_index": grid.best_index }),
    )?;
    out.finish(
        info_for(run, &cfg),
        "ok",
        json!({ "best_learning_rate": best.learning_rate, "best_val_metric": best.best_val_metric }),
    )?;
    for p in &grid.points {
        println!("lr {:e}: val {:.4}", p.learning_rate, p.best_val_metric);
    }
    println!("best lr {:e}", best.learning_rate);
    Ok(())
}

fn kfold_command(run: &RunArgs, model: &ModelArgs, k: Option<usize>) -> Result<()> {
    let mut cfg = load_config(run)?;
    if let Some(kind) = model.model {
        cfg.model = kind;
    }
    let ds = dataset_for(&mut cfg, model.data.as_deref())?;
    let k = k.unwrap_or(cfg.dataset.folds);
    let out = RunDir::create(&run.out, "kfold")?;
    out.write_text("config.toml", &cfg.to_toml()?)?;
    let mut log = out.metrics_log(None)?;
    let mut sink = |r: &MetricsRecord| {
        log_progress(r);
        log.append(r)
    };
    let result = kfold_run(&cfg, &ds, k, Some(&mut sink))?;
    out.write_json("kfold.json", &result)?;
    out.finish(
        info_for(run, &cfg),
        "ok",
        json!({ "k": k, "mean": result.mean, "std": result.std }),
    )?;
    for f in &result.folds {
        println!("fold {} (val {}): test {:.4}", f.fold, f.val_fold, f.test_metric);
    }
    println!("{k}-fold mean {:.4} +- {:.4}", result.mean, result.std);
    Ok(())
}

fn ablate_command(run: &RunArgs, seeds: Option<Vec<u64>>) -> Result<()> {
    let cfg = load_config(run)?;
    let seeds = seeds.unwrap_or_else(|| cfg.ablation_seeds.clone());
    let out = RunDir::create(&run.out, "ablate")?;
    out.write_text("config.toml", &cfg.to_toml()?)?;
    let mut log = out.metrics_log(None)?;
    let mut sink = |r: &MetricsRecord| {
        if r.split == "test" {
            log_progress(r);
        }
        log.append(r)
    };
    let table = ablation_run(&cfg, &seeds, Some(&mut sink))?;
    out.write_text("ablation.csv", &table.to_csv())?;
    out.write_text("ablation.txt", &table.to_text())?;
    out.write_json("ablation.json", &table)?;
    let info = RunInfo {
        seed: None,
        ..info_for(run, &cfg)
    };
    out.finish(info, "ok", json!({ "seeds": seeds, "metric": table.metric }))?;
    print!("{}", table.to_text());
    Ok(())
}

struct RunSummary {
    epochs: usize,
    best_epoch: Option<usize>,
    best_val: Option<f64>,
    test: Option<f64>,
    metric: &'static str,
}

fn summarise(records: &[MetricsRecord]) -> BTreeMap<String, RunSummary> {
    let mut runs: BTreeMap<String, RunSummary> = BTreeMap::new();
    for r in records {
        let s = runs.entry(r.run_id.clone()).or_insert(RunSummary {
            epochs: 0,
            best_epoch: None,
            best_val: None,
            test: None,
            metric: if r.accuracy.is_some() && r.mean_ccc.is_none() {
                "accuracy"
            } else {
                "mean_ccc"
            },
        });
        match r.split.as_str() {
            "train" => s.epochs = s.epochs.max(r.epoch + 1),
            "val" => {
                if let Some(v) = score(r) {
                    if s.best_val.is_none_or(|b| v > b) {
                        s.best_val = Some(v);
                        s.best_epoch = Some(r.epoch);
                    }
                }
            }
            "test" => s.test = score(r),
            _ => {}
        }
    }
    runs
}

fn report_command(runs: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
    let mut text = String::new();
    for path in runs {
        let file = if path.is_dir() {
            path.join(METRICS_JSONL)
        } else {
            path.clone()
        };
        let mut body = String::new();
        open_input(&file)?.read_to_string(&mut body)?;
        let records = read_jsonl(&body)?;
        if records.is_empty() {
            return Err(Error::Input(format!("{} holds no metrics records", file.display())));
        }
        let _ = writeln!(text, "{}", file.display());
        let _ = writeln!(
            text,
            "  {:<28} {:>6} {:>10} {:>10} {:>10}  metric",
            "run", "epochs", "best_epoch", "best_val", "test"
        );
        for (id, s) in summarise(&records) {
            let _ = writeln!(
                text,
                "  {:<28} {:>6} {:>10} {:>10} {:>10}  {}",
                id,
                s.epochs,
                s.best_epoch.map_or("-".into(), |e| e.to_string()),
                fmt(s.best_val),
                fmt(s.test),
                s.metric
            );
        }
    }
    print!("{text}");
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.txt"), &text)?;
    }
    Ok(())
}

fn magic_of(path: &Path) -> Result<[u8; 8]> {
    let mut magic = [0u8; 8];
    let mut f = open_input(path)?;
    let mut read = 0;
    while read < 8 {
        match f.read(&mut magic[read..])? {
            0 => break,
            n => read += n,
        }
    }
    Ok(magic)
}

fn verify_checkpoint(path: &Path) -> Result<String> {
    let ck = Checkpoint::read(BufReader::new(open_input(path)?))?;
    let values: usize = ck.parameters.iter().map(|a| a.data.len()).sum();
    let finite = ck.parameters.iter().all(|a| a.data.iter().all(|v| v.is_finite()));
    if !finite {
        return Err(Error::Numeric {
            op: "verify",
            detail: format!("{} holds non-finite parameters", path.display()),
        });
    }
    Ok(format!(
        "checkpoint {} for config {}: {} tensors / {values} values, {} epochs, {} steps",
        ck.model,
        codec::hash_hex(ck.config_hash),
        ck.parameters.len(),
        ck.epochs_completed,
        ck.steps
    ))
}

fn verify_dataset(path: &Path) -> Result<String> {
    let ds = SyntheticDataset::load(BufReader::new(open_input(path)?))?;
    let regenerated = SyntheticDataset::generate(&ds.config)?;
    if regenerated != ds {
        return Err(Error::Corrupt {
            offset: 0,
            detail: format!("{} does not match a regeneration from its own config", path.display()),
        });
    }
    Ok(format!(
        "dataset {}: {} sequences, regenerates bit-identically",
        codec::hash_hex(ds.hash()),
        ds.len()
    ))
}

fn verify_command(paths: &[PathBuf]) -> Result<()> {
    for path in paths {
        let line = if path.is_dir() {
            let manifest = verify_manifest(path)?;
            let mut parts = vec![format!("{} files match the manifest", manifest.files.len())];
            for entry in &manifest.files {
                let file = path.join(&entry.path);
                if entry.path.ends_with(".ckpt") {
                    parts.push(format!("{}: {}", entry.path, verify_checkpoint(&file)?));
                } else if entry.path == METRICS_JSONL {
                    let n = read_jsonl(&fs::read_to_string(&file)?)?.len();
                    parts.push(format!("{METRICS_JSONL}: {n} records"));
                }
            }
            parts.join("; ")
        } else {
            let magic = magic_of(path)?;
            if &magic == CHECKPOINT_MAGIC {
                verify_checkpoint(path)?
            } else if &magic == DATASET_MAGIC {
                verify_dataset(path)?
            } else {
                return Err(Error::Input(format!(
                    "{}: not a run directory, checkpoint or dataset",
                    path.display()
                )));
            }
        };
        println!("ok {}: {line}", path.display());
    }
    Ok(())
}
