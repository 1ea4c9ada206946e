use std::path::PathBuf;
use std::sync::Arc;

use clap::Args;
use serde::{Deserialize, Serialize};

use optbp::data::{default_data_dir, DatasetName};
use optbp::network::{default_pooling, validate_pooling};
use optbp::trainer::{default_epochs, default_input_scale, InitScheme, TrainConfig};
use optbp::{Architecture, DerivativeMode, DerivativeTable, Error, Kind, LossKind, NonlinearitySpec, PoolMode, Result};

/// Run parameters shared by the training commands. Every field is optional so
/// that flags, a JSON config file and built-in defaults can be layered.
#[derive(Args, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunArgs {
    /// mnist | kmnist | emnist-balanced
    #[arg(long)]
    pub dataset: Option<String>,
    /// fc1 | fc2 | conv
    #[arg(long)]
    pub arch: Option<String>,
    /// sa | gs | relu | sigmoid | tanh | linear
    #[arg(long)]
    pub nl: Option<String>,
    /// Optical depth of the saturable absorber.
    #[arg(long)]
    pub alpha0: Option<f64>,
    /// Gain of the saturable amplifier.
    #[arg(long)]
    pub g0: Option<f64>,
    /// exact | optical | tabulated
    #[arg(long)]
    pub deriv: Option<String>,
    /// Derivative table (JSON) for `--deriv tabulated`.
    #[arg(long)]
    pub table: Option<PathBuf>,
    /// mse | cce
    #[arg(long)]
    pub loss: Option<String>,
    /// Epochs (default depends on the preset)
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Seed for initialization and shuffling
    #[arg(long)]
    pub seed: Option<u64>,
    /// Seed of the validation/test halving.
    #[arg(long)]
    pub split_seed: Option<u64>,
    /// Adam learning rate
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Multiplier on pixel values in [0, 1]
    #[arg(long)]
    pub input_scale: Option<f64>,
    /// mean | max
    #[arg(long)]
    pub pool: Option<String>,
    /// Train on only the first N training images.
    #[arg(long)]
    pub limit_train: Option<usize>,
    /// Dataset cache (default $OPTBP_DATA_DIR or ~/.cache/optbp)
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl RunArgs {
    /// Fields set here win over `lower`.
    pub fn over(self, lower: RunArgs) -> RunArgs {
        macro_rules! pick {
            ($($f:ident),*) => { RunArgs { $($f: self.$f.or(lower.$f)),* } };
        }
        pick!(
            dataset, arch, nl, alpha0, g0, deriv, table, loss, epochs, seed, split_seed, lr, batch_size,
            input_scale, pool, limit_train, data_dir, out
        )
    }

    pub fn from_json(text: &str) -> Result<RunArgs> {
        serde_json::from_str(text).map_err(|e| Error::validation("config", e.to_string()))
    }
}

/// Fully resolved run.
#[derive(Clone, Debug, Serialize)]
pub struct Experiment {
    pub dataset: DatasetName,
    pub arch: Architecture,
    pub spec: NonlinearitySpec,
    pub pool: PoolMode,
    pub train: TrainConfig,
    pub split_seed: u64,
    pub limit_train: Option<usize>,
    pub data_dir: PathBuf,
    pub out: PathBuf,
}

fn parse_mode(name: &str, table: Option<&PathBuf>) -> Result<DerivativeMode> {
    match name.to_ascii_lowercase().as_str() {
        "exact" => Ok(DerivativeMode::Exact),
        "optical" | "optical-approx" => Ok(DerivativeMode::OpticalApprox),
        "tabulated" => {
            let path = table.ok_or_else(|| Error::validation("table", "`--deriv tabulated` needs `--table FILE`"))?;
            Ok(DerivativeMode::Tabulated(Arc::new(DerivativeTable::load(path)?)))
        }
        other => Err(Error::validation("deriv", format!("unknown derivative mode `{other}`"))),
    }
}

impl Experiment {
    pub fn resolve(args: &RunArgs, default_arch: Architecture, default_epochs_override: Option<usize>) -> Result<Self> {
        let dataset: DatasetName = args.dataset.as_deref().unwrap_or("mnist").parse()?;
        let arch: Architecture = match &args.arch {
            Some(a) => a.parse()?,
            None => default_arch,
        };
        let kind: Kind = args.nl.as_deref().unwrap_or("sa").parse()?;
        let depth = match kind {
            Kind::Sa => {
                if args.g0.is_some() {
                    return Err(Error::validation("g0", "applies only to `--nl gs`"));
                }
                args.alpha0.unwrap_or(10.0)
            }
            Kind::Gs => {
                if args.alpha0.is_some() {
                    return Err(Error::validation("alpha0", "applies only to `--nl sa`"));
                }
                args.g0.unwrap_or(3.0)
            }
            _ => {
                if args.alpha0.is_some() || args.g0.is_some() {
                    let field = if args.alpha0.is_some() { "alpha0" } else { "g0" };
                    return Err(Error::validation(field, format!("not used by `{}`", kind.name())));
                }
                0.0
            }
        };
        let default_mode = if kind.is_optical() { "optical" } else { "exact" };
        let mode_name = args.deriv.as_deref().unwrap_or(default_mode);
        if args.table.is_some() && mode_name != "tabulated" {
            return Err(Error::validation("table", "only used with `--deriv tabulated`"));
        }
        let mode = parse_mode(mode_name, args.table.as_ref())?;
        let spec = NonlinearitySpec::new(kind, depth, mode.clone())?;
        let pool = match args.pool.as_deref() {
            None => default_pooling(&spec),
            Some("mean") => PoolMode::Mean,
            Some("max") => PoolMode::Max,
            Some(other) => return Err(Error::validation("pool", format!("unknown pooling `{other}`"))),
        };
        validate_pooling(&spec, pool)?;
        let loss: LossKind = args.loss.as_deref().unwrap_or("mse").parse()?;
        let epochs = args
            .epochs
            .or(default_epochs_override)
            .unwrap_or_else(|| default_epochs(arch, &spec));
        if epochs == 0 {
            return Err(Error::validation("epochs", "must be at least 1"));
        }
        if args.limit_train == Some(0) {
            return Err(Error::validation("limit_train", "must be at least 1"));
        }
        let train = TrainConfig {
            learning_rate: args.lr.unwrap_or(5e-4),
            batch_size: args.batch_size.unwrap_or(64),
            epochs,
            init_scheme: InitScheme::for_run(arch, &spec),
            input_scale: args.input_scale.unwrap_or_else(|| default_input_scale(arch, &spec)),
            seed: args.seed.unwrap_or(0),
            derivative_mode: mode,
            loss,
            ..TrainConfig::default()
        };
        train.validate()?;
        Ok(Self {
            dataset,
            arch,
            spec,
            pool,
            train,
            split_seed: args.split_seed.unwrap_or(0),
            limit_train: args.limit_train,
            data_dir: args.data_dir.clone().unwrap_or_else(default_data_dir),
            out: args.out.clone().unwrap_or_else(|| PathBuf::from("runs")),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_file_beat_defaults() {
        let cli = RunArgs { epochs: Some(3), ..Default::default() };
        let file = RunArgs::from_json(r#"{"epochs": 7, "alpha0": 30, "loss": "cce"}"#).unwrap();
        let merged = cli.over(file);
        assert_eq!(merged.epochs, Some(3));
        assert_eq!(merged.alpha0, Some(30.0));
        let exp = Experiment::resolve(&merged, Architecture::Fc1, None).unwrap();
        assert_eq!(exp.train.loss, LossKind::Cce);
        assert_eq!(exp.train.batch_size, 64);
        assert_eq!(exp.pool, PoolMode::Mean);
    }

    #[test]
    fn unknown_config_field_is_named() {
        let err = RunArgs::from_json(r#"{"epohcs": 3}"#).unwrap_err();
        assert!(err.to_string().contains("epohcs"), "{err}");
    }

    #[test]
    fn validation_names_fields() {
        let field = |args: RunArgs| match Experiment::resolve(&args, Architecture::Fc1, None) {
            Err(Error::Validation { field, .. }) => field,
            other => panic!("{other:?}"),
        };
        assert_eq!(field(RunArgs { g0: Some(60.0), nl: Some("gs".into()), ..Default::default() }), "g0");
        assert_eq!(field(RunArgs { nl: Some("relu".into()), alpha0: Some(1.0), ..Default::default() }), "alpha0");
        assert_eq!(field(RunArgs { nl: Some("relu".into()), deriv: Some("optical".into()), ..Default::default() }), "deriv");
        assert_eq!(field(RunArgs { pool: Some("max".into()), ..Default::default() }), "pool");
        assert_eq!(field(RunArgs { lr: Some(-1.0), ..Default::default() }), "learning_rate");
        assert_eq!(field(RunArgs { deriv: Some("tabulated".into()), ..Default::default() }), "table");
    }

    #[test]
    fn conv_defaults() {
        let exp = Experiment::resolve(&RunArgs { arch: Some("conv".into()), ..Default::default() }, Architecture::Fc1, None).unwrap();
        assert_eq!(exp.train.epochs, 40);
        assert_eq!(exp.train.input_scale, 5.0);
        let relu = RunArgs { arch: Some("conv".into()), nl: Some("relu".into()), ..Default::default() };
        let exp = Experiment::resolve(&relu, Architecture::Fc1, None).unwrap();
        assert_eq!((exp.train.epochs, exp.pool), (20, PoolMode::Max));
    }
}
