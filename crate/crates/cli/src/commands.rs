use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use optbp::analysis::{self, Sidecar, SimilarityConfig};
use optbp::data::{default_data_dir, fetch as fetch_files, Dataset, DatasetName, FetchStatus, Manifest, Part, Split};
use optbp::network::{load_checkpoint, LayerKind};
use optbp::trainer::{self, init_weights, RunRecord, TrainOptions, INIT_STREAM};
use optbp::{Architecture, Error, Kind, Network, Result, Rng, Tensor};

use crate::config::{Experiment, RunArgs};

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    Ok(csv::Writer::from_path(path)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn load_data(exp: &Experiment) -> Result<(Dataset, Split)> {
    let data = Dataset::load(exp.dataset, &exp.data_dir)?;
    let mut split = data.split(exp.split_seed)?;
    if let Some(n) = exp.limit_train {
        split.train.truncate(n);
    }
    Ok((data, split))
}

#[derive(Serialize)]
struct RunFile<'a> {
    experiment: &'a Experiment,
    record: &'a RunRecord,
}

/// Builds, initializes and trains one network, writing its files into `exp.out`.
fn run_one(exp: &Experiment, data: &Dataset, split: &Split) -> Result<RunRecord> {
    fs::create_dir_all(&exp.out)?;
    let mut net: Network = exp.arch.build(data.n_classes(), &exp.spec, exp.pool)?;
    init_weights(&mut net, &exp.train.init_scheme, &mut Rng::new(exp.train.seed).derive(INIT_STREAM));
    let options = TrainOptions { checkpoint: Some(exp.out.join("best.json")), eval_batch: None };
    let record = trainer::train(&mut net, data, split, &exp.train, &options)?;
    record.save_csv(&exp.out.join("metrics.csv"))?;
    write_json(&exp.out.join("run.json"), &RunFile { experiment: exp, record: &record })?;
    Ok(record)
}

pub fn train(args: RunArgs) -> Result<()> {
    let exp = Experiment::resolve(&args, Architecture::Fc1, None)?;
    let (data, split) = load_data(&exp)?;
    let record = run_one(&exp, &data, &split)?;
    println!(
        "best epoch {} val_acc {:.4} test_acc {:.4} ({})",
        record.best_epoch,
        record.best_val_acc,
        record.test_accuracy,
        exp.out.display()
    );
    Ok(())
}

pub fn sweep_alpha(args: RunArgs, alphas: &[f64]) -> Result<()> {
    if args.nl.as_deref().is_some_and(|nl| nl != "sa") {
        return Err(Error::validation("nl", "the optical-depth sweep uses sa"));
    }
    if args.alpha0.is_some() || args.deriv.is_some() {
        return Err(Error::validation("alpha0", "set by the sweep; use --alphas"));
    }
    let base = Experiment::resolve(&args, Architecture::Fc2, None)?;
    let (data, split) = load_data(&base)?;
    let master = Rng::new(base.train.seed);
    let mut runs = Vec::new();
    for &a0 in alphas {
        for deriv in ["exact", "optical"] {
            let index = runs.len() as u64;
            let seed = master.derive(index).seed();
            let dir = base.out.join(format!("alpha{a0}-{deriv}"));
            let run_args = RunArgs {
                alpha0: Some(a0),
                deriv: Some(deriv.into()),
                seed: Some(seed),
                out: Some(dir),
                ..args.clone()
            };
            runs.push((a0, deriv, Experiment::resolve(&run_args, Architecture::Fc2, None)?));
        }
    }
    let results: Vec<_> = runs
        .par_iter()
        .map(|(_, _, exp)| {
            let r = run_one(exp, &data, &split);
            if let Err(e) = &r {
                log::warn!("{}: {e}", exp.out.display());
            }
            r
        })
        .collect();
    fs::create_dir_all(&base.out)?;
    let mut w = csv_writer(&base.out.join("sweep.csv"))?;
    w.write_record(["alpha0", "deriv", "seed", "best_epoch", "val_acc", "test_acc", "status"])?;
    for ((a0, deriv, exp), result) in runs.iter().zip(&results) {
        let seed = exp.train.seed.to_string();
        match result {
            Ok(r) => w.write_record([
                a0.to_string(),
                deriv.to_string(),
                seed,
                r.best_epoch.to_string(),
                r.best_val_acc.to_string(),
                r.test_accuracy.to_string(),
                "ok".into(),
            ])?,
            Err(e) => w.write_record([a0.to_string(), deriv.to_string(), seed, String::new(), String::new(), String::new(), e.to_string()])?,
        }
    }
    w.flush()?;
    println!("{}", base.out.join("sweep.csv").display());
    Ok(())
}

pub fn approx_error(alphas: &[f64], out: &Path) -> Result<()> {
    let curve = analysis::optical_error_curve(alphas)?;
    fs::create_dir_all(out)?;
    let mut w = csv_writer(&out.join("approx_error.csv"))?;
    w.write_record(["alpha0", "sigma", "error"])?;
    for p in &curve {
        w.write_record([p.alpha0.to_string(), p.sigma.to_string(), p.error.to_string()])?;
        println!("alpha0 {:>6} sigma {:.6} error {:.6}", p.alpha0, p.sigma, p.error);
    }
    w.flush()?;
    let configs = alphas.iter().map(|&a| SimilarityConfig::for_alpha(a)).collect::<Result<Vec<_>>>()?;
    write_json(&out.join("approx_error.json"), &Sidecar::new("approx-error", &configs, Vec::new()))
}

#[derive(Serialize)]
struct RandomStudyFile {
    #[serde(flatten)]
    sidecar: Sidecar,
    experiment: Experiment,
    exact_accuracy: f64,
    targets: Vec<f64>,
}

pub fn random_study(args: RunArgs, count: usize, min_error: f64, max_error: f64) -> Result<()> {
    if args.nl.as_deref().is_some_and(|nl| nl != "sa") {
        return Err(Error::validation("nl", "the random-derivative study uses sa"));
    }
    if args.deriv.is_some() || args.table.is_some() {
        return Err(Error::validation("deriv", "set by the study"));
    }
    if count == 0 {
        return Err(Error::validation("count", "must be at least 1"));
    }
    if !(0.0..=1.0).contains(&min_error) || max_error < min_error || max_error > 1.0 {
        return Err(Error::validation("min_error", "need 0 ≤ min-error ≤ max-error ≤ 1"));
    }
    let exp = Experiment::resolve(&RunArgs { deriv: Some("exact".into()), ..args }, Architecture::Fc1, Some(10))?;
    let (data, split) = load_data(&exp)?;
    let targets = analysis::error_grid(min_error, max_error, count);
    let report = analysis::robustness_study(&data, &split, exp.arch, exp.spec.depth(), &targets, &exp.train)?;
    fs::create_dir_all(&exp.out)?;
    let mut w = csv_writer(&exp.out.join("random_study.csv"))?;
    w.write_record(["index", "target_error", "error", "accuracy", "exact_accuracy", "status"])?;
    for row in &report.rows {
        w.write_record([
            row.index.to_string(),
            row.target_error.to_string(),
            row.error.to_string(),
            row.accuracy.map(|a| a.to_string()).unwrap_or_default(),
            report.exact_accuracy.to_string(),
            row.failure.clone().unwrap_or_else(|| "ok".into()),
        ])?;
    }
    w.flush()?;
    let file = RandomStudyFile {
        sidecar: Sidecar::new("random-study", &[report.similarity], vec![exp.train.seed]),
        exact_accuracy: report.exact_accuracy,
        targets,
        experiment: exp.clone(),
    };
    write_json(&exp.out.join("random_study.json"), &file)?;
    println!("{}", exp.out.join("random_study.csv").display());
    Ok(())
}

/// Weighted layers as matrices; conv kernels flatten to `c_out × (c_in·kh·kw)`.
fn weight_matrices(net: &Network) -> Vec<(usize, &'static str, Tensor<f32>)> {
    let mut out = Vec::new();
    for (i, layer) in net.layers().iter().enumerate() {
        let (Some(w), kind) = (layer.weights(), layer.kind()) else { continue };
        let name = match kind {
            LayerKind::Conv { .. } => "conv",
            _ => "dense",
        };
        let rows = w.shape()[0];
        let m = w.clone().reshape(vec![rows, w.len() / rows]).expect("same length");
        out.push((i, name, m));
    }
    out
}

pub fn gain_bounds(checkpoint: &Path, out: &Path) -> Result<()> {
    let (net, seed): (Network, u64) = load_checkpoint(checkpoint)?;
    fs::create_dir_all(out)?;
    let mut w = csv_writer(&out.join("gain_bounds.csv"))?;
    w.write_record(["layer", "kind", "rows", "cols", "lower", "upper", "iterations"])?;
    let mut reports = Vec::new();
    for (layer, kind, m) in weight_matrices(&net) {
        let r = analysis::gain_bounds(&m)?;
        w.write_record([
            layer.to_string(),
            kind.to_string(),
            m.shape()[0].to_string(),
            m.shape()[1].to_string(),
            r.lower.to_string(),
            r.upper.to_string(),
            r.iterations.to_string(),
        ])?;
        println!("layer {layer} ({kind}): lower {:.6} upper {:.6}", r.lower, r.upper);
        reports.push(serde_json::json!({"layer": layer, "kind": kind, "report": r}));
    }
    w.flush()?;
    write_json(
        &out.join("gain_bounds.json"),
        &serde_json::json!({"checkpoint": checkpoint, "seed": seed, "tolerance": 1e-8, "layers": reports}),
    )
}

pub fn histogram(checkpoint: &Path, args: RunArgs, samples: usize, bins: usize) -> Result<()> {
    let (mut net, seed): (Network, u64) = load_checkpoint(checkpoint)?;
    let spec = net
        .activation_specs()
        .first()
        .map(|s| (*s).clone())
        .ok_or_else(|| Error::validation("checkpoint", "network has no activation layer"))?;
    let alpha0 = if spec.kind() == Kind::Sa { spec.depth() } else { 0.0 };
    let dataset: DatasetName = args.dataset.as_deref().unwrap_or("mnist").parse()?;
    let data = Dataset::load(dataset, &args.data_dir.clone().unwrap_or_else(default_data_dir))?;
    let arch = if net.layers().iter().any(|l| matches!(l.kind(), LayerKind::Conv { .. })) {
        Architecture::Conv
    } else {
        Architecture::Fc1
    };
    let scale = args.input_scale.unwrap_or_else(|| trainer::default_input_scale(arch, &spec));
    let n = samples.min(data.len(Part::Train));
    let indices: Vec<usize> = (0..n).collect();
    let sim = SimilarityConfig::for_alpha(alpha0)?;
    let h = analysis::neuron_input_histogram(&mut net, &data, Part::Train, &indices, scale, sim.sigma, bins)?;
    let out = args.out.unwrap_or_else(|| PathBuf::from("runs"));
    fs::create_dir_all(&out)?;
    let mut w = csv_writer(&out.join("histogram.csv"))?;
    w.write_record(["bin_lo", "bin_hi", "count"])?;
    for (i, c) in h.counts.iter().enumerate() {
        w.write_record([h.edges[i].to_string(), h.edges[i + 1].to_string(), c.to_string()])?;
    }
    w.flush()?;
    println!("{} inputs, {:.4} inside |z| <= sigma = {:.4}", h.n_values, h.inside_fraction, h.sigma);
    let mut sidecar = serde_json::to_value(Sidecar::new("histogram", &[sim], vec![seed]))?;
    sidecar["inside_fraction"] = h.inside_fraction.into();
    sidecar["skewness"] = h.skewness.into();
    sidecar["n_values"] = h.n_values.into();
    write_json(&out.join("histogram.json"), &sidecar)
}

pub fn fetch(
    dataset: &str,
    manifest: Option<&Path>,
    mirror: Option<&str>,
    offline: bool,
    data_dir: Option<PathBuf>,
) -> Result<()> {
    let name: DatasetName = dataset.parse()?;
    let manifest = match manifest {
        Some(path) => Manifest::load(path)?,
        None => Manifest::builtin(name).ok_or_else(|| {
            Error::validation("manifest", format!("no built-in manifest for {name}; pass --manifest FILE"))
        })?,
    };
    if manifest.name != name {
        return Err(Error::validation("manifest", format!("describes {}, not {name}", manifest.name)));
    }
    let dir = data_dir.unwrap_or_else(default_data_dir);
    for (kind, status) in fetch_files(&manifest, &dir, mirror, offline)? {
        let verb = match status {
            FetchStatus::Cached => "cached",
            FetchStatus::Downloaded => "downloaded",
        };
        println!("{verb:>10} {}", kind.file_name());
    }
    Ok(())
}
