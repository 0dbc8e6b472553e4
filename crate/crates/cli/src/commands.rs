use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use pointabm::blocks::Params;
use pointabm::data::{
    load_manifest, make_synthetic_dataset, make_synthetic_split, write_dataset, Dataset, Split, SyntheticSpec,
};
use pointabm::model::{
    evaluate, evaluate_prepared, init_from, param_breakdown, prepare_dataset, train_epoch, Checkpoint, CheckpointKind,
    CheckpointMeta, ModelConfig, Objective, TrainState,
};
use pointabm::PatchSet;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::{CliError, RunConfig};

const METRICS_HEADER: [&str; 6] = ["epoch", "step", "lr", "loss", "train_acc", "val_acc"];

fn synthetic_spec(cfg: &RunConfig) -> SyntheticSpec {
    SyntheticSpec {
        kinds: cfg.run.shapes.clone(),
        n_per_class: cfg.run.n_per_class,
        n_points: cfg.model.points_per_cloud,
        noise: cfg.run.noise,
        seed: cfg.run.data_seed,
    }
}

/// Train and test splits, from manifests under `data` or generated.
/// `known` fixes the label order for manifests.
fn load_data(cfg: &RunConfig, known: &[String]) -> Result<(Dataset, Dataset), CliError> {
    match &cfg.run.data {
        Some(dir) => {
            let train = load_manifest(&dir.join("train_manifest.tsv"), Split::Train, known)?;
            let test = load_manifest(&dir.join("test_manifest.tsv"), Split::Test, &train.class_names)?;
            Ok((train, test))
        }
        None => {
            let spec = synthetic_spec(cfg);
            Ok(match cfg.run.n_test_per_class {
                0 => make_synthetic_dataset(&spec)?,
                n => make_synthetic_split(&spec, n)?,
            })
        }
    }
}

/// Sets `num_classes` from the data unless the config fixes it.
fn resolve_classes(cfg: &mut RunConfig, class_names: &[String]) -> Result<(), CliError> {
    let k = class_names.len();
    if !cfg.explicit.contains("num_classes") {
        cfg.model.num_classes = k;
    } else if cfg.model.num_classes != k {
        return Err(CliError::usage(format!(
            "num_classes is {} but the dataset has {k} classes",
            cfg.model.num_classes
        )));
    }
    cfg.validate()
}

/// Parameters as stored on disk, so reported metrics match a reloaded
/// checkpoint.
fn storage_rounded(params: &Params) -> Params {
    let mut p = params.clone();
    for t in p.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
    p
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Checkpoint::load(path).map_err(|e| {
        let mut e = CliError::from(e);
        e.message = format!("{}: {}", path.display(), e.message);
        e
    })
}

fn initial_params(cfg: &RunConfig, objective: Objective, seed: u64) -> Result<Params, CliError> {
    let specs = objective.specs(&cfg.model);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match &cfg.run.init {
        None => Ok(Params::init(&specs, &mut rng)),
        Some(path) => {
            let ck = load_checkpoint(path)?;
            Ok(init_from(&specs, &ck.params, &mut rng)?)
        }
    }
}

struct Labeled {
    patches: Vec<PatchSet>,
    labels: Vec<usize>,
}

impl Labeled {
    fn new(data: &Dataset, model: &ModelConfig, seed: u64) -> Result<Self, CliError> {
        Ok(Self {
            patches: prepare_dataset(data, model, seed)?,
            labels: (0..data.len()).map(|i| data.label(i)).collect(),
        })
    }

    fn accuracy(&self, params: &Params, model: &ModelConfig) -> Result<f64, CliError> {
        Ok(evaluate_prepared(params, model, &self.patches, &self.labels)?.accuracy)
    }
}

fn write_row(w: &mut csv::Writer<fs::File>, row: [String; 6]) -> Result<(), CliError> {
    w.write_record(&row)?;
    w.flush()?;
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn save(path: &Path, model: &ModelConfig, params: Params, meta: CheckpointMeta) -> Result<(), CliError> {
    Checkpoint {
        config: model.clone(),
        params: storage_rounded(&params),
        meta,
    }
    .save(path)?;
    Ok(())
}

fn fit(cfg: &RunConfig, seed: u64, objective: Objective) -> Result<(), CliError> {
    let mut cfg = cfg.clone();
    let (train_set, test_set) = load_data(&cfg, &[])?;
    resolve_classes(&mut cfg, &test_set.class_names)?;
    let pretrain = objective == Objective::Pretrain;
    let model = cfg.model.clone();
    let train = cfg.train_config(pretrain);
    let specs = objective.specs(&model);
    let params = initial_params(&cfg, objective, seed)?;
    let mut state = TrainState::new(params, &specs, &train, train.total_steps(train_set.len()))?;

    let out = &cfg.run.out;
    fs::create_dir_all(out).map_err(|e| CliError::io(format!("{}: {e}", out.display())))?;
    fs::write(out.join("config.json"), cfg.to_json() + "\n")?;
    let mut metrics = csv::Writer::from_path(out.join("metrics.csv"))?;
    metrics.write_record(METRICS_HEADER)?;

    let evals = if pretrain {
        None
    } else {
        Some((
            Labeled::new(&train_set, &model, seed)?,
            Labeled::new(&test_set, &model, seed)?,
        ))
    };
    let accuracies = |params: &Params| -> Result<(Option<f64>, Option<f64>), CliError> {
        match &evals {
            None => Ok((None, None)),
            Some((tr, te)) => {
                let p = storage_rounded(params);
                Ok((Some(tr.accuracy(&p, &model)?), Some(te.accuracy(&p, &model)?)))
            }
        }
    };
    let (tr0, te0) = accuracies(&state.params)?;
    write_row(
        &mut metrics,
        ["0".into(), "0".into(), String::new(), String::new(), opt(tr0), opt(te0)],
    )?;

    let (kind, file) = match objective {
        Objective::Classify => (CheckpointKind::Classifier, "checkpoint"),
        Objective::Pretrain => (CheckpointKind::Encoder, "encoder"),
    };
    let meta = |epoch: usize, m: BTreeMap<String, f64>| CheckpointMeta {
        kind,
        seed,
        epoch,
        metrics: m,
        class_names: test_set.class_names.clone(),
    };
    let to_save = |p: &Params| {
        if pretrain {
            p.filter_prefix("encoder.")
        } else {
            p.clone()
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f7a);
    let mut last = BTreeMap::new();
    for epoch in 1..=train.epochs {
        let stats = train_epoch(&train_set, &mut state, &model, &train, objective, &mut rng)?;
        let (tr, te) = accuracies(&state.params)?;
        write_row(
            &mut metrics,
            [
                epoch.to_string(),
                stats.step.to_string(),
                stats.lr.to_string(),
                stats.loss.to_string(),
                opt(tr),
                opt(te),
            ],
        )?;
        println!(
            "epoch {epoch}/{} loss {:.5} lr {:.3e}{}",
            train.epochs,
            stats.loss,
            stats.lr,
            match (tr, te) {
                (Some(a), Some(b)) => format!(" train_acc {a:.4} val_acc {b:.4}"),
                _ => String::new(),
            }
        );
        last = BTreeMap::from([("loss".to_string(), stats.loss)]);
        if let (Some(a), Some(b)) = (tr, te) {
            last.insert("train_acc".into(), a);
            last.insert("val_acc".into(), b);
        }
        if cfg.run.save_every > 0 && epoch % cfg.run.save_every == 0 && epoch < train.epochs {
            let path = out.join(format!("{file}_epoch{epoch:04}.pabm"));
            save(&path, &model, to_save(&state.params), meta(epoch, last.clone()))?;
        }
    }
    let path = out.join(format!("{file}.pabm"));
    save(&path, &model, to_save(&state.params), meta(train.epochs, last))?;
    println!("saved {}", path.display());
    Ok(())
}

pub fn train(cfg: &RunConfig, seed: u64) -> Result<(), CliError> {
    fit(cfg, seed, Objective::Classify)
}

pub fn pretrain(cfg: &RunConfig, seed: u64) -> Result<(), CliError> {
    fit(cfg, seed, Objective::Pretrain)
}

/// With `cfg`, its model fields must match the checkpoint; without, the
/// checkpoint's model and default data settings are used. The seed defaults
/// to the one the checkpoint was trained with.
pub fn eval(
    cfg: Option<&RunConfig>,
    checkpoint: &Path,
    seed: Option<u64>,
    train_split: bool,
    json: bool,
) -> Result<(), CliError> {
    let ck = load_checkpoint(checkpoint)?;
    if ck.meta.kind != CheckpointKind::Classifier {
        return Err(CliError::usage(format!(
            "{} holds no classification head",
            checkpoint.display()
        )));
    }
    let mut run = match cfg {
        Some(c) => c.clone(),
        None => RunConfig {
            model: ck.config.clone(),
            ..RunConfig::default()
        },
    };
    if !run.explicit.contains("num_classes") {
        run.model.num_classes = ck.config.num_classes;
    }
    if run.model != ck.config {
        return Err(CliError::usage("model config does not match the checkpoint"));
    }
    let (tr, te) = load_data(&run, &ck.meta.class_names)?;
    let data = if train_split { tr } else { te };
    if !ck.meta.class_names.is_empty() && data.class_names != ck.meta.class_names {
        return Err(CliError::usage(format!(
            "dataset classes {:?} differ from the checkpoint's {:?}",
            data.class_names, ck.meta.class_names
        )));
    }
    let seed = seed.or(run.run.seed).unwrap_or(ck.meta.seed);
    let ev = evaluate(&ck.params, &ck.config, &data, seed)?;
    let hist = data.class_histogram();
    let hits = |acc: f64, n: usize| (acc * n as f64).round() as usize;
    if json {
        let per_class: serde_json::Map<_, _> = data
            .class_names
            .iter()
            .zip(&ev.per_class)
            .map(|(name, a)| (name.clone(), json!(a)))
            .collect();
        let report = json!({
            "accuracy": ev.accuracy,
            "loss": ev.loss,
            "n": data.len(),
            "per_class": per_class,
        });
        println!("{report}");
    } else {
        println!(
            "accuracy {:.4} ({}/{})",
            ev.accuracy,
            hits(ev.accuracy, data.len()),
            data.len()
        );
        let w = data.class_names.iter().map(String::len).max().unwrap_or(0);
        for ((name, a), &n) in data.class_names.iter().zip(&ev.per_class).zip(&hist) {
            match a {
                Some(a) => println!("  {name:<w$}  {a:.4} ({}/{n})", hits(*a, n)),
                None => println!("  {name:<w$}  -"),
            }
        }
    }
    Ok(())
}

pub fn inspect(cfg: &RunConfig, json: bool) -> Result<(), CliError> {
    let rows = param_breakdown(&cfg.model.classifier_specs());
    let total: usize = rows.iter().map(|r| r.1).sum();
    if json {
        let modules: Vec<_> = rows.iter().map(|(m, n)| json!({"module": m, "params": n})).collect();
        println!("{}", json!({"modules": modules, "total": total}));
    } else {
        let w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(5);
        for (m, n) in &rows {
            println!("{m:<w$}  {n:>10}");
        }
        println!("{:<w$}  {total:>10}", "total");
    }
    Ok(())
}

pub fn gen(cfg: &RunConfig) -> Result<(), CliError> {
    if cfg.run.data.is_some() {
        return Err(CliError::usage("gen writes the synthetic dataset; unset `data`"));
    }
    let (train, test) = load_data(cfg, &[])?;
    for split in [&train, &test] {
        let manifest = write_dataset(&cfg.run.out, split)?;
        println!("{} samples -> {}", split.len(), manifest.display());
    }
    Ok(())
}
