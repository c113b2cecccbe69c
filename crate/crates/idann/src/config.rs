//! Experiment configuration: a flat `key = value` text format with dotted
//! section prefixes (`data.`, `train.`, `sweep.`), parsed into typed
//! structs with field-level validation errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::data::{ShiftKind, Synthetic2dKind};
use crate::error::{Error, Result};
use crate::idann::Hyperparams;
use crate::model::ArchitectureId;
use crate::selection::PolicyTag;

/// Where the source/target data comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSpec {
    /// Procedurally rendered digit images; the target domain is the source
    /// generator re-seeded and pushed through a shift pipeline.
    SyntheticDigits {
        source_count: usize,
        target_count: usize,
        test_count: usize,
        shift: ShiftKind,
    },
    /// IDX file pairs for source and target.
    Idx {
        source_images: PathBuf,
        source_labels: PathBuf,
        target_images: PathBuf,
        target_labels: PathBuf,
        test_count: usize,
    },
    /// Low-dimensional point sets for smoke experiments.
    Synthetic2d {
        kind: Synthetic2dKind,
        n_per_class: usize,
        rotation_deg: f64,
        translation: (f64, f64),
        test_count: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub arch: ArchitectureId,
    pub out_dir: PathBuf,
    pub data: DataSpec,
    pub hyperparams: Hyperparams,
    /// Epochs for the final from-scratch classifier fit.
    pub final_epochs: usize,
    /// Score pseudo-labels and accuracies against target ground truth.
    pub eval_ground_truth: bool,
    pub verbosity: u8,
    pub sweep: Option<SweepSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub batch_sizes: Vec<usize>,
    pub lambda0s: Vec<f64>,
    pub seeds: Vec<u64>,
    pub cap: usize,
}

/// Raw parsed file: key → (value, line number), with consumption tracking
/// so unknown keys can be reported.
struct RawConfig {
    entries: BTreeMap<String, (String, usize)>,
    consumed: std::cell::RefCell<std::collections::BTreeSet<String>>,
}

impl RawConfig {
    fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got {raw:?}",
                    lineno + 1
                )));
            };
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            if entries.insert(key.clone(), (value.trim().to_string(), lineno + 1)).is_some() {
                return Err(Error::Config(format!(
                    "line {}: duplicate key `{key}`",
                    lineno + 1
                )));
            }
        }
        Ok(RawConfig { entries, consumed: Default::default() })
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.consumed.borrow_mut().insert(key.to_string());
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
    }

    fn typed<T: std::str::FromStr>(&self, key: &str, s: &str) -> Result<T> {
        s.parse().map_err(|_| {
            Error::Config(format!(
                "key `{key}`: cannot parse {s:?} as {}",
                std::any::type_name::<T>()
            ))
        })
    }

    fn parse_as<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            Some(s) => Ok(Some(self.typed(key, s)?)),
            None => Ok(None),
        }
    }

    fn or_default<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.parse_as(key)?.unwrap_or(default))
    }

    fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(other) => Err(Error::Config(format!(
                "key `{key}`: expected true/false, got {other:?}"
            ))),
        }
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let s = self.require(key)?;
        s.split(',')
            .map(|item| self.typed(key, item.trim()))
            .collect()
    }

    fn reject_unknown(&self) -> Result<()> {
        let consumed = self.consumed.borrow();
        for (key, (_, lineno)) in &self.entries {
            if !consumed.contains(key) {
                return Err(Error::Config(format!("line {lineno}: unknown key `{key}`")));
            }
        }
        Ok(())
    }
}

fn parse_shift(raw: &RawConfig) -> Result<ShiftKind> {
    let pipeline = raw.get("data.shift").unwrap_or("invert+colorize-noise");
    let noise_scale = raw.or_default("data.shift.noise_scale", 0.1)?;
    let blend = raw.or_default("data.shift.blend", 0.85)?;
    let rotate = raw.or_default("data.shift.rotate", 10.0)?;
    let translate = raw.or_default("data.shift.translate", 2.0)?;
    let mut stages = Vec::new();
    for name in pipeline.split('+') {
        stages.push(match name.trim() {
            "invert" => ShiftKind::Invert,
            "colorize-noise" => ShiftKind::ColorizeNoise { noise_scale, blend },
            "affine-jitter" => ShiftKind::AffineJitter {
                max_rotate_deg: rotate,
                max_translate: translate,
            },
            "none" => continue,
            other => {
                return Err(Error::Config(format!(
                    "key `data.shift`: unknown stage {other:?}"
                )))
            }
        });
    }
    Ok(match stages.len() {
        1 => stages.pop().unwrap(),
        _ => ShiftKind::Composite(stages),
    })
}

fn parse_data(raw: &RawConfig) -> Result<DataSpec> {
    let kind = raw.get("data.kind").unwrap_or("synthetic-digits");
    match kind {
        "synthetic-digits" => Ok(DataSpec::SyntheticDigits {
            source_count: raw.or_default("data.source_count", 5000)?,
            target_count: raw.or_default("data.target_count", 2000)?,
            test_count: raw.or_default("data.test_count", 1000)?,
            shift: parse_shift(raw)?,
        }),
        "idx" => {
            let path = |key: &str| -> Result<PathBuf> {
                let p = PathBuf::from(raw.require(key)?);
                if !p.exists() {
                    return Err(Error::Config(format!(
                        "key `{key}`: path {} does not exist",
                        p.display()
                    )));
                }
                Ok(p)
            };
            Ok(DataSpec::Idx {
                source_images: path("data.source_images")?,
                source_labels: path("data.source_labels")?,
                target_images: path("data.target_images")?,
                target_labels: path("data.target_labels")?,
                test_count: raw.or_default("data.test_count", 1000)?,
            })
        }
        "synthetic-2d" => Ok(DataSpec::Synthetic2d {
            kind: Synthetic2dKind::parse(raw.get("data.2d_kind").unwrap_or("two-blobs"))?,
            n_per_class: raw.or_default("data.n_per_class", 200)?,
            rotation_deg: raw.or_default("data.rotation", 30.0)?,
            translation: (
                raw.or_default("data.translate_x", 0.0)?,
                raw.or_default("data.translate_y", 0.0)?,
            ),
            test_count: raw.or_default("data.test_count", 100)?,
        }),
        other => Err(Error::Config(format!(
            "key `data.kind`: unknown dataset kind {other:?}"
        ))),
    }
}

fn parse_hyperparams(raw: &RawConfig, seed: u64) -> Result<Hyperparams> {
    let mut hp = Hyperparams { seed, ..Hyperparams::default() };
    hp.epochs = raw.or_default("train.epochs", hp.epochs)?;
    hp.inc_epochs = raw.or_default("train.inc_epochs", hp.inc_epochs)?;
    hp.batch_size = raw.or_default("train.batch_size", hp.batch_size)?;
    hp.p_percent = raw.or_default("train.p_percent", hp.p_percent)?;
    hp.beta = raw.or_default("train.beta", hp.beta)?;
    hp.lambda0 = raw.or_default("train.lambda0", hp.lambda0)?;
    hp.lambda_step = raw.or_default("train.lambda_step", hp.lambda_step)?;
    hp.cumulative_lambda = raw.bool_or("train.cumulative_lambda", hp.cumulative_lambda)?;
    hp.k = raw.or_default("train.k", hp.k)?;
    if let Some(policy) = raw.get("train.policy") {
        hp.policy = PolicyTag::parse(policy)
            .map_err(|_| Error::Config(format!("key `train.policy`: unknown policy {policy:?}")))?;
    }
    hp.epsilon = raw.or_default("train.epsilon", hp.epsilon)?;
    hp.optimizer.learning_rate = raw.or_default("train.learning_rate", hp.optimizer.learning_rate)?;
    hp.optimizer.decay = raw.or_default("train.decay", hp.optimizer.decay)?;
    hp.optimizer.momentum = raw.or_default("train.momentum", hp.optimizer.momentum)?;
    if hp.lambda0 < 0.0 {
        return Err(Error::Config(format!(
            "key `train.lambda0`: must be >= 0, got {}",
            hp.lambda0
        )));
    }
    hp.validate().map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("train section: {msg}")),
        other => other,
    })?;
    Ok(hp)
}

fn parse_sweep(raw: &RawConfig) -> Result<Option<SweepSpec>> {
    if raw.get("sweep.batch_sizes").is_none() {
        return Ok(None);
    }
    let spec = SweepSpec {
        batch_sizes: raw.list("sweep.batch_sizes")?,
        lambda0s: raw.list("sweep.lambda0s")?,
        seeds: raw.list("sweep.seeds")?,
        cap: raw.or_default("sweep.cap", 64)?,
    };
    if spec.batch_sizes.is_empty() || spec.lambda0s.is_empty() || spec.seeds.is_empty() {
        return Err(Error::Config("sweep grid lists must be non-empty".into()));
    }
    let cells = spec.batch_sizes.len() * spec.lambda0s.len() * spec.seeds.len();
    if cells > spec.cap {
        return Err(Error::Config(format!(
            "key `sweep.cap`: grid has {cells} cells, cap is {}",
            spec.cap
        )));
    }
    if spec.lambda0s.iter().any(|&l| l < 0.0) {
        return Err(Error::Config("key `sweep.lambda0s`: values must be >= 0".into()));
    }
    Ok(Some(spec))
}

impl ExperimentConfig {
    pub fn from_str(text: &str) -> Result<Self> {
        let raw = RawConfig::parse(text)?;
        let seed: u64 = raw
            .parse_as("seed")?
            .ok_or_else(|| Error::Config("missing required key `seed`".into()))?;
        let arch = match raw.get("arch") {
            Some(s) => ArchitectureId::parse(s)?,
            None => ArchitectureId::Model1Small,
        };
        let out_dir = PathBuf::from(raw.get("out_dir").unwrap_or("out"));
        let data = parse_data(&raw)?;
        let hyperparams = parse_hyperparams(&raw, seed)?;
        let final_epochs = raw.or_default("train.final_epochs", hyperparams.epochs)?;
        let eval_ground_truth = raw.bool_or("eval_ground_truth", true)?;
        let verbosity = raw.or_default("verbosity", 1u8)?;
        let sweep = parse_sweep(&raw)?;
        raw.reject_unknown()?;
        Ok(ExperimentConfig {
            seed,
            arch,
            out_dir,
            data,
            hyperparams,
            final_epochs,
            eval_ground_truth,
            verbosity,
            sweep,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_str(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "seed = 7\n";

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = ExperimentConfig::from_str(MINIMAL).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.arch, ArchitectureId::Model1Small);
        assert!(matches!(cfg.data, DataSpec::SyntheticDigits { .. }));
        assert!(cfg.sweep.is_none());
        assert_eq!(cfg.hyperparams.seed, 7);
    }

    #[test]
    fn missing_seed_is_an_error() {
        let err = ExperimentConfig::from_str("arch = model1\n").unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
    }

    #[test]
    fn negative_lambda0_names_the_field() {
        let err =
            ExperimentConfig::from_str("seed = 1\ntrain.lambda0 = -0.5\n").unwrap_err();
        assert!(err.to_string().contains("train.lambda0"), "{err}");
    }

    #[test]
    fn unknown_key_is_rejected_with_line() {
        let err = ExperimentConfig::from_str("seed = 1\nbogus.key = 3\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bogus.key") && msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let text = "# experiment\nseed = 3   # root seed\n\ntrain.epochs = 12\n";
        let cfg = ExperimentConfig::from_str(text).unwrap();
        assert_eq!(cfg.hyperparams.epochs, 12);
    }

    #[test]
    fn shift_pipeline_parses_composite() {
        let text = "seed = 1\ndata.shift = invert+colorize-noise\ndata.shift.blend = 0.5\n";
        let cfg = ExperimentConfig::from_str(text).unwrap();
        let DataSpec::SyntheticDigits { shift, .. } = cfg.data else {
            panic!("wrong data kind");
        };
        assert_eq!(
            shift,
            ShiftKind::Composite(vec![
                ShiftKind::Invert,
                ShiftKind::ColorizeNoise { noise_scale: 0.1, blend: 0.5 },
            ])
        );
    }

    #[test]
    fn sweep_grid_is_parsed_and_capped() {
        let text = "seed = 1\nsweep.batch_sizes = 32, 64\nsweep.lambda0s = 0.001, 0.01\nsweep.seeds = 1,2\n";
        let cfg = ExperimentConfig::from_str(text).unwrap();
        let sweep = cfg.sweep.unwrap();
        assert_eq!(sweep.batch_sizes, vec![32, 64]);
        assert_eq!(sweep.lambda0s, vec![0.001, 0.01]);

        let capped = format!("{text}sweep.cap = 3\n");
        let err = ExperimentConfig::from_str(&capped).unwrap_err();
        assert!(err.to_string().contains("cap"), "{err}");
    }

    #[test]
    fn duplicate_key_is_rejected() {
        let err = ExperimentConfig::from_str("seed = 1\nseed = 2\n").unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn idx_paths_must_exist() {
        let text = "seed = 1\ndata.kind = idx\ndata.source_images = /nonexistent/a\ndata.source_labels = /nonexistent/b\ndata.target_images = /nonexistent/c\ndata.target_labels = /nonexistent/d\n";
        let err = ExperimentConfig::from_str(text).unwrap_err();
        assert!(err.to_string().contains("data.source_images"), "{err}");
    }
}
