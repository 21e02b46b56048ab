use std::fs;
use std::path::Path;
use std::time::Instant;

use msvit_core::checkpoint::{decode, encode};
use msvit_core::config::profile as named_profile;
use msvit_core::data::SynthSpec;
use msvit_core::energy::{count_flops, E_MAC_PJ};
use msvit_core::model::{build_model, Model, ModelConfig};
use msvit_core::train::{
    evaluate, train_loop, write_metrics_csv, EpochMetrics, EvalReport, TrainConfig, TrainHooks,
};
use serde::{Deserialize, Serialize};

use crate::data::{write_event_split, Need, TEST_SEED_OFFSET};
use crate::outputs::Outputs;
use crate::{EvalArgs, Failure, InspectArgs, ModelArgs, ProfileArgs, SynthDataArgs, TrainArgs};

const METRICS: &str = "metrics.csv";
const SUMMARY: &str = "summary.json";
const CHECKPOINT: &str = "model.ckpt";
const ENERGY: &str = "energy.json";
const PROFILE: &str = "profile.json";

fn read_file(path: &Path, what: &str, errs: &mut Vec<String>) -> Option<String> {
    match fs::read_to_string(path) {
        Ok(s) => Some(s),
        Err(e) => {
            errs.push(format!("{what} {}: {e}", path.display()));
            None
        }
    }
}

fn collect<T>(r: msvit_core::Result<T>, errs: &mut Vec<String>) -> Option<T> {
    match r {
        Ok(v) => Some(v),
        Err(msvit_core::Error::Config(e)) => {
            errs.extend(e);
            None
        }
        Err(e) => {
            errs.push(e.to_string());
            None
        }
    }
}

/// Resolves `--profile`/`--config` plus overrides into a validated config.
fn model_config(args: &ModelArgs, errs: &mut Vec<String>) -> Option<ModelConfig> {
    let mut cfg = match (&args.profile, &args.config) {
        (Some(name), None) => collect(named_profile(name), errs)?,
        (None, Some(path)) => {
            let text = read_file(path, "model config", errs)?;
            collect(ModelConfig::from_toml(&text), errs)?
        }
        _ => {
            errs.push("one of --profile or --config is required".into());
            return None;
        }
    };
    if let Some(t) = args.timesteps {
        cfg.timesteps = t;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    collect(cfg.validate(), errs)?;
    Some(cfg)
}

fn check_file(path: &Path, what: &str, errs: &mut Vec<String>) {
    if !path.is_file() {
        errs.push(format!("{what} {} does not exist", path.display()));
    }
}

fn load_model(path: &Path, expected: Option<&ModelConfig>) -> Result<Model, Failure> {
    let bytes = fs::read(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    Ok(decode(&bytes, expected)?)
}

fn to_json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s.into_bytes()
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainSummary {
    command: String,
    model: ModelConfig,
    train: TrainConfig,
    train_samples: usize,
    test_samples: usize,
    param_count: usize,
    model_hash: String,
    epochs_completed: usize,
    optimizer_steps: u64,
    skipped_steps: u64,
    final_eval: Option<EvalReport>,
    /// Absent in deterministic runs.
    wall_seconds: Option<f64>,
}

fn train_config(a: &TrainArgs, errs: &mut Vec<String>) -> Option<TrainConfig> {
    let mut tc = match &a.train_config {
        Some(path) => {
            let text = read_file(path, "train config", errs)?;
            match toml::from_str::<TrainConfig>(&text) {
                Ok(tc) => tc,
                Err(e) => {
                    errs.push(format!("{}: {}", path.display(), e.message()));
                    return None;
                }
            }
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = a.epochs {
        tc.epochs = v;
    }
    if let Some(v) = a.batch {
        tc.batch_size = v;
    }
    if let Some(v) = a.lr {
        tc.base_lr = v;
    }
    if let Some(v) = a.accum_steps {
        tc.accum_steps = v;
    }
    if let Some(v) = a.model.seed {
        tc.seed = v;
    }
    tc.augment |= a.augment;
    tc.deterministic |= a.deterministic;
    collect(tc.validate(), errs)?;
    Some(tc)
}

pub fn train(a: TrainArgs) -> Result<(), Failure> {
    let started = Instant::now();
    let mut errs = Vec::new();
    let cfg = model_config(&a.model, &mut errs);
    let tc = train_config(&a, &mut errs);
    if !a.data.is_set() {
        errs.push("--dataset is required".into());
    }
    if let Some(cfg) = &cfg {
        a.data.validate(cfg, &mut errs);
    }
    if let Some(dir) = &a.resume {
        check_file(&dir.join(CHECKPOINT), "resume checkpoint", &mut errs);
        check_file(&dir.join(SUMMARY), "resume summary", &mut errs);
    }
    let (Some(cfg), Some(tc)) = (cfg, tc) else {
        return Err(Failure::Config(errs));
    };
    if !errs.is_empty() {
        return Err(Failure::Config(errs));
    }

    let (mut model, start_epoch, mut history) = match &a.resume {
        None => (build_model(&cfg)?, 0, Vec::new()),
        Some(dir) => {
            let model = load_model(&dir.join(CHECKPOINT), Some(&cfg))?;
            let text = fs::read_to_string(dir.join(SUMMARY))
                .map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
            let prior: TrainSummary = serde_json::from_str(&text)
                .map_err(|e| Failure::Runtime(format!("{}: {e}", dir.join(SUMMARY).display())))?;
            let rows = read_metrics(&dir.join(METRICS))?;
            (model, prior.epochs_completed, rows)
        }
    };
    if start_epoch >= tc.epochs {
        return Err(Failure::config(format!(
            "--epochs {} does not exceed the {start_epoch} epochs already completed",
            tc.epochs
        )));
    }
    let mut outputs = Outputs::prepare(&a.out)?;
    let ds = a.data.load(&cfg, &[Need::Train, Need::Test])?;
    if ds.train.is_empty() {
        return Err(Failure::Runtime("the training split is empty".into()));
    }
    eprintln!(
        "training {} ({} parameters) on {} samples, evaluating on {}",
        cfg.name,
        model.param_count(),
        ds.train.len(),
        ds.test.len()
    );
    let mut progress = |m: &EpochMetrics| {
        let fr = m.firing_rate.map_or("-".to_string(), |f| format!("{f:.4}"));
        eprintln!(
            "epoch {:>3} {:<5} loss {:.4} acc {:.4} fr {fr}",
            m.epoch,
            format!("{:?}", m.split).to_lowercase(),
            m.loss,
            m.acc
        );
    };
    let report = train_loop(
        &mut model,
        &ds.train,
        &ds.test,
        &tc,
        TrainHooks {
            start_epoch,
            normalize: ds.normalize.clone(),
            on_metrics: Some(&mut progress),
        },
    )?;
    history.extend(report.history.iter().cloned());

    let mut csv = Vec::new();
    write_metrics_csv(&history, &mut csv)?;
    outputs.write(METRICS, &csv)?;
    let summary = TrainSummary {
        command: "train".into(),
        model: model.config().clone(),
        train: tc.clone(),
        train_samples: ds.train.len(),
        test_samples: ds.test.len(),
        param_count: model.param_count(),
        model_hash: model.hash(),
        epochs_completed: tc.epochs,
        optimizer_steps: report.optimizer_steps,
        skipped_steps: report.skipped_steps,
        final_eval: report.final_eval,
        wall_seconds: (!tc.deterministic).then(|| started.elapsed().as_secs_f64()),
    };
    outputs.write(SUMMARY, &to_json(&summary))?;
    outputs.write(CHECKPOINT, &encode(&model))?;
    for p in outputs.commit()? {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>, Failure> {
    let err = |e: csv::Error| Failure::Runtime(format!("{}: {e}", path.display()));
    let mut rd = csv::Reader::from_path(path).map_err(err)?;
    rd.deserialize().collect::<Result<Vec<_>, _>>().map_err(err)
}

#[derive(Debug, Serialize)]
struct EvalSummary<'a> {
    command: &'static str,
    checkpoint: String,
    model_hash: String,
    report: &'a EvalReport,
}

pub fn eval(a: EvalArgs) -> Result<(), Failure> {
    let mut errs = Vec::new();
    check_file(&a.checkpoint, "checkpoint", &mut errs);
    if !a.data.is_set() {
        errs.push("--dataset is required".into());
    }
    if a.energy && a.out.is_none() {
        errs.push("--energy needs --out for energy.json".into());
    }
    if a.batch == 0 {
        errs.push("--batch must be at least 1".into());
    }
    if !errs.is_empty() {
        return Err(Failure::Config(errs));
    }
    let model = load_model(&a.checkpoint, None)?;
    a.data.validate(model.config(), &mut errs);
    if !errs.is_empty() {
        return Err(Failure::Config(errs));
    }
    let mut outputs = a.out.as_deref().map(Outputs::prepare).transpose()?;
    let ds = a.data.load(model.config(), &[Need::Test])?;
    let (report, profiler) = evaluate(&model, &ds.test, a.batch, ds.normalize.as_ref())?;
    println!(
        "samples {}  top1 {:.4}  top5 {:.4}  loss {:.4}  firing rate {}",
        report.samples,
        report.top1,
        report.top5,
        report.loss,
        report.firing_rate.map_or("-".into(), |f| format!("{f:.4}"))
    );
    if let Some(out) = outputs.as_mut() {
        let summary = EvalSummary {
            command: "eval",
            checkpoint: a.checkpoint.display().to_string(),
            model_hash: model.hash(),
            report: &report,
        };
        out.write(SUMMARY, &to_json(&summary))?;
        if a.energy {
            let energy = profiler.energy_report()?;
            print!("{}", energy.to_table());
            out.write(ENERGY, &to_json(&energy))?;
        }
    }
    if let Some(out) = outputs {
        for p in out.commit()? {
            println!("wrote {}", p.display());
        }
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct StaticRow {
    path: String,
    kind: String,
    flops_per_step: u64,
    params: usize,
}

#[derive(Debug, Serialize)]
struct ProfileSummary {
    model: String,
    timesteps: usize,
    param_count: usize,
    total_flops_per_step: u64,
    /// Present with `--ann-equivalent`.
    ann_equivalent_pj: Option<f64>,
    layers: Vec<StaticRow>,
}

fn model_from(
    model: &ModelArgs,
    checkpoint: Option<&Path>,
    errs: &mut Vec<String>,
) -> Result<Option<Model>, Failure> {
    match checkpoint {
        Some(path) => {
            check_file(path, "checkpoint", errs);
            if model.timesteps.is_some() || model.seed.is_some() {
                errs.push("--timesteps and --seed cannot override a checkpoint".into());
            }
            if !errs.is_empty() {
                return Ok(None);
            }
            Ok(Some(load_model(path, None)?))
        }
        None => match model_config(model, errs) {
            Some(cfg) if errs.is_empty() => Ok(Some(build_model(&cfg)?)),
            _ => Ok(None),
        },
    }
}

pub fn profile(a: ProfileArgs) -> Result<(), Failure> {
    let mut errs = Vec::new();
    if a.batch == 0 || a.samples == 0 {
        errs.push("--batch and --samples must be at least 1".into());
    }
    let model = model_from(&a.model, a.checkpoint.as_deref(), &mut errs)?;
    if let Some(m) = &model {
        a.data.validate(m.config(), &mut errs);
    }
    let Some(model) = model.filter(|_| errs.is_empty()) else {
        return Err(Failure::Config(errs));
    };
    let mut outputs = a.out.as_deref().map(Outputs::prepare).transpose()?;
    let cfg = model.config();

    let rows: Vec<StaticRow> = model
        .layer_table()
        .into_iter()
        .map(|r| StaticRow {
            kind: serde_json::to_value(r.desc).expect("serializable")["kind"]
                .as_str()
                .unwrap_or_default()
                .to_string(),
            flops_per_step: count_flops(&r.desc),
            path: r.path,
            params: r.params,
        })
        .collect();
    let width = rows.iter().map(|r| r.path.len()).max().unwrap_or(5).max(5);
    println!("{:<width$}  {:>15}  {:>15}  {:>10}", "layer", "kind", "FLOPs/step", "params");
    for r in &rows {
        println!(
            "{:<width$}  {:>15}  {:>15}  {:>10}",
            r.path, r.kind, r.flops_per_step, r.params
        );
    }
    let total_flops: u64 = rows.iter().map(|r| r.flops_per_step).sum();
    println!(
        "total: {total_flops} FLOPs per timestep, {} parameters, T = {}",
        model.param_count(),
        cfg.timesteps
    );
    let ann = a.ann_equivalent.then_some(E_MAC_PJ * total_flops as f64);
    if let Some(pj) = ann {
        println!(
            "ANN-equivalent energy: {E_MAC_PJ} pJ x {total_flops} FLOPs = {pj:.1} pJ ({:.4} mJ)",
            pj / 1e9
        );
    }
    let summary = ProfileSummary {
        model: cfg.name.clone(),
        timesteps: cfg.timesteps,
        param_count: model.param_count(),
        total_flops_per_step: total_flops,
        ann_equivalent_pj: ann,
        layers: rows,
    };
    if let Some(out) = outputs.as_mut() {
        out.write(PROFILE, &to_json(&summary))?;
    }
    if a.data.is_set() {
        let mut ds = a.data.load(cfg, &[Need::Test])?;
        ds.test.truncate(a.samples);
        let (_, profiler) = evaluate(&model, &ds.test, a.batch, ds.normalize.as_ref())?;
        let energy = profiler.energy_report()?;
        print!("{}", energy.to_table());
        if let Some(out) = outputs.as_mut() {
            out.write(ENERGY, &to_json(&energy))?;
        }
    }
    if let Some(out) = outputs {
        for p in out.commit()? {
            println!("wrote {}", p.display());
        }
    }
    Ok(())
}

fn millions(n: usize) -> String {
    format!("{:.2}M", n as f64 / 1e6)
}

pub fn inspect(a: InspectArgs) -> Result<(), Failure> {
    let mut errs = Vec::new();
    let Some(model) = model_from(&a.model, a.checkpoint.as_deref(), &mut errs)? else {
        return Err(Failure::Config(errs));
    };
    let cfg = model.config();
    println!(
        "# {}: {} parameters ({}), model hash {}",
        cfg.name,
        model.param_count(),
        millions(model.param_count()),
        model.hash()
    );
    println!(
        "# input {}x{}x{}, T = {}, {} classes",
        cfg.in_channels, cfg.height, cfg.width, cfg.timesteps, cfg.num_classes
    );
    for (i, (s, label)) in cfg.stages().iter().zip(["N", "N/4", "N/16"]).enumerate() {
        println!(
            "# stage {}: dim {}, depth {}, attention {}, grid {}x{}, tokens {} ({label})",
            i + 1,
            s.dim,
            s.depth,
            serde_json::to_value(s.attention).expect("serializable").as_str().unwrap_or_default(),
            s.height,
            s.width,
            s.tokens
        );
    }
    if let Some(path) = &a.checkpoint {
        println!("# weights from {}", path.display());
    }
    print!("{}", cfg.to_toml());
    Ok(())
}

pub fn synth_data(a: SynthDataArgs) -> Result<(), Failure> {
    if a.per_class == 0 && a.test_per_class == 0 {
        return Err(Failure::config("nothing to write: both per-class counts are 0"));
    }
    if a.out.exists() && !a.out.is_dir() {
        return Err(Failure::config(format!(
            "--out {} exists and is not a directory",
            a.out.display()
        )));
    }
    let created = !a.out.exists();
    let spec = SynthSpec::default();
    let result = write_event_split(&a.out.join("train"), a.per_class, a.seed, &spec).and_then(
        |n| {
            let m = write_event_split(
                &a.out.join("test"),
                a.test_per_class,
                a.seed + TEST_SEED_OFFSET,
                &spec,
            )?;
            Ok((n, m))
        },
    );
    match result {
        Ok((n, m)) => {
            println!(
                "wrote {n} training and {m} test streams to {}",
                a.out.display()
            );
            Ok(())
        }
        Err(e) => {
            if created {
                let _ = fs::remove_dir_all(&a.out);
            }
            Err(e)
        }
    }
}
