//! Experiment configuration.
//!
//! Grammar (one statement per line):
//!   `# comment`            full-line comments
//!   `include "path.cfg"`   splice another file, relative to this one
//!   `key = value`          dotted lowercase keys; later keys win
//!
//! Values are bare tokens or double-quoted strings; numbers and bools
//! parse on demand. The README documents every key.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use dbkd_core::data::ImageShape;
use dbkd_core::gan::{GanModelConfig, GanTrainConfig};
use dbkd_core::metrics::CoverageConfig;
use dbkd_core::teacher::{ClassifierArch, ClassifierTrainConfig};

#[derive(Debug)]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error at `{}`: {}", self.field, self.message)
    }
}

impl std::error::Error for ConfigError {}

fn err(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError { field: field.to_string(), message: message.into() }
}

/// Raw parsed key-value view, before typing.
#[derive(Debug, Default, Clone)]
pub struct RawConfig {
    pub values: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn parse_file(path: &Path) -> Result<Self, ConfigError> {
        let mut raw = RawConfig::default();
        raw.load(path, 0)?;
        Ok(raw)
    }

    fn load(&mut self, path: &Path, depth: usize) -> Result<(), ConfigError> {
        if depth > 8 {
            return Err(err("include", "include depth exceeds 8 (cycle?)"));
        }
        let text = std::fs::read_to_string(path)
            .map_err(|e| err("include", format!("cannot read {}: {e}", path.display())))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix("include") {
                let target = unquote(rest.trim());
                if target.is_empty() {
                    return Err(err("include", format!("{}:{}: missing path", path.display(), lineno + 1)));
                }
                self.load(&dir.join(target), depth + 1)?;
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(err(
                    "syntax",
                    format!("{}:{}: expected `key = value`", path.display(), lineno + 1),
                ));
            };
            let key = key.trim();
            if key.is_empty() || !key.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '.' || c == '_') {
                return Err(err(
                    "syntax",
                    format!("{}:{}: bad key `{key}`", path.display(), lineno + 1),
                ));
            }
            self.values.insert(key.to_string(), unquote(value.trim()).to_string());
        }
        Ok(())
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn required(&self, key: &str) -> Result<&str, ConfigError> {
        self.get(key).ok_or_else(|| err(key, "missing required key"))
    }

    fn usize_or(&self, key: &str, default: usize) -> Result<usize, ConfigError> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| err(key, format!("`{v}` is not an integer"))),
        }
    }

    fn usize_req(&self, key: &str) -> Result<usize, ConfigError> {
        let v = self.required(key)?;
        v.parse().map_err(|_| err(key, format!("`{v}` is not an integer")))
    }

    fn u64_or(&self, key: &str, default: u64) -> Result<u64, ConfigError> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| err(key, format!("`{v}` is not an integer"))),
        }
    }

    fn f64_or(&self, key: &str, default: f64) -> Result<f64, ConfigError> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| err(key, format!("`{v}` is not a number"))),
        }
    }

    fn arch(&self, key: &str) -> Result<ClassifierArch, ConfigError> {
        let v = self.required(key)?;
        ClassifierArch::parse(v).ok_or_else(|| {
            err(key, format!("unknown architecture `{v}` (lenet5, lenet5-half, alexnet-like, alexnet-half, small-resnet)"))
        })
    }
}

fn unquote(s: &str) -> &str {
    s.strip_prefix('"').and_then(|s| s.strip_suffix('"')).unwrap_or(s)
}

/// Fully typed experiment configuration.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ExperimentConfig {
    pub dataset_name: String,
    pub dataset_root: PathBuf,
    /// Cap on the train split (0 = use all); micro presets shrink it.
    pub train_cap: usize,
    pub n_real: usize,
    pub m_synthetic: usize,
    pub quantile: f64,
    pub teacher_arch: ClassifierArch,
    pub student_arch: ClassifierArch,
    pub teacher_train: ClassifierTrainConfig,
    /// Optional pre-trained weights to attach instead of training.
    pub teacher_weights: Option<PathBuf>,
    /// Optional remote endpoint; set by --teacher-url too.
    pub teacher_url: Option<String>,
    pub student_train: ClassifierTrainConfig,
    pub student_full_epochs: usize,
    /// Epochs for the DivBFKD student (its set is N+M, far larger than
    /// the few-shot runs); defaults to student.epochs.
    pub student_divbfkd_epochs: usize,
    pub student_lambda: f64,
    pub gan_model: GanModelConfig,
    pub gan_train: GanTrainConfig,
    pub coverage: CoverageConfig,
    pub balance_cap_factor: u64,
    pub master_seed: u64,
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let raw = RawConfig::parse_file(path)?;
        Self::from_raw(&raw)
    }

    pub fn from_raw(raw: &RawConfig) -> Result<Self, ConfigError> {
        let dataset_name = raw.required("dataset.name")?.to_string();
        let dataset_root = PathBuf::from(raw.required("dataset.root")?);
        let (default_shape, default_latent, fixed_lr) = match dataset_name.as_str() {
            "mnist" => (ImageShape { c: 1, h: 32, w: 32 }, 100, true),
            "fmnist" => (ImageShape { c: 1, h: 32, w: 32 }, 200, true),
            _ => (ImageShape { c: 3, h: 32, w: 32 }, 256, false),
        };

        let num_classes = raw.usize_or("dataset.num_classes", 10)?;
        if num_classes < 2 {
            return Err(err("dataset.num_classes", "need at least 2 classes"));
        }
        let n_real = raw.usize_req("budget.n")?;
        let m_synthetic = raw.usize_req("budget.m")?;
        if n_real == 0 || n_real % num_classes != 0 {
            return Err(err("budget.n", format!("{n_real} not divisible by {num_classes} classes")));
        }
        if m_synthetic % num_classes != 0 {
            return Err(err("budget.m", format!("{m_synthetic} not divisible by {num_classes} classes")));
        }
        let quantile = raw.f64_or("quantile", 0.1)?;
        if !(0.0..=1.0).contains(&quantile) {
            return Err(err("quantile", "must lie in [0,1]"));
        }

        let teacher_arch = raw.arch("teacher.arch")?;
        let student_arch = raw.arch("student.arch")?;

        let teacher_epochs = raw.usize_req("teacher.epochs")?;
        let teacher_batch = raw.usize_or("teacher.batch_size", 128)?;
        let mut teacher_train = if fixed_lr {
            ClassifierTrainConfig::fixed_lr(teacher_epochs, teacher_batch)
        } else {
            ClassifierTrainConfig::stepped_lr(teacher_epochs, teacher_batch)
        };
        if let Some(lr) = raw.get("teacher.base_lr") {
            teacher_train.base_lr =
                lr.parse().map_err(|_| err("teacher.base_lr", "not a number"))?;
        }

        let student_epochs = raw.usize_req("student.epochs")?;
        let student_batch = raw.usize_or("student.batch_size", 250)?;
        let mut student_train = if fixed_lr {
            ClassifierTrainConfig::fixed_lr(student_epochs, student_batch)
        } else {
            ClassifierTrainConfig::stepped_lr(student_epochs, student_batch)
        };
        if let Some(lr) = raw.get("student.base_lr") {
            student_train.base_lr =
                lr.parse().map_err(|_| err("student.base_lr", "not a number"))?;
        }
        let student_lambda = raw.f64_or("student.lambda", 0.9)?;
        if !(0.0..=1.0).contains(&student_lambda) {
            return Err(err("student.lambda", "must lie in [0,1]"));
        }

        let gan_model = GanModelConfig {
            latent_dim: raw.usize_or("gan.latent_dim", default_latent)?,
            base_maps: raw.usize_or("gan.base_maps", 256)?,
            image_shape: default_shape,
        };
        let master_seed = raw.u64_or("seed", 0)?;
        let gan_train = GanTrainConfig {
            learning_rate: raw.f64_or("gan.learning_rate", 5e-5)?,
            batch_size: raw.usize_or("gan.batch_size", 250)?,
            n_critic: raw.usize_or("gan.n_critic", 5)?,
            gp_coefficient: raw.f64_or("gan.gp_coefficient", 10.0)?,
            epochs: raw.usize_req("gan.epochs")?,
            seed: 0, // derived per run
        };
        gan_model.validate().map_err(|e| err("gan", e.to_string()))?;
        gan_train.validate().map_err(|e| err("gan", e.to_string()))?;

        let coverage = CoverageConfig {
            k_neighbors: raw.usize_or("coverage.k_neighbors", 5)?,
            max_reference: raw.usize_or("coverage.max_reference", 5000)?,
            subsample_seed: 0, // derived per run
        };
        if coverage.k_neighbors == 0 {
            return Err(err("coverage.k_neighbors", "must be positive"));
        }

        Ok(ExperimentConfig {
            dataset_name,
            dataset_root,
            train_cap: raw.usize_or("dataset.train_cap", 0)?,
            n_real,
            m_synthetic,
            quantile,
            teacher_arch,
            student_arch,
            teacher_train,
            teacher_weights: raw.get("teacher.weights").map(PathBuf::from),
            teacher_url: raw.get("teacher.url").map(String::from),
            student_train,
            student_full_epochs: raw.usize_or("student.full_epochs", student_epochs)?,
            student_divbfkd_epochs: raw.usize_or("student.divbfkd_epochs", student_epochs)?,
            student_lambda,
            gan_model,
            gan_train,
            coverage,
            balance_cap_factor: raw.u64_or("balance.cap_factor", 200)?,
            master_seed,
        })
    }

    /// Stable hash of the semantic content (serialized form).
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        let d = h.finalize();
        d.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_cfg(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        let mut f = std::fs::File::create(&p).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn parses_includes_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        write_cfg(
            dir.path(),
            "base.cfg",
            "dataset.name = mnist\ndataset.root = /data\nbudget.n = 100\nbudget.m = 100\n\
             teacher.arch = lenet5\nstudent.arch = lenet5-half\nteacher.epochs = 1\n\
             student.epochs = 1\ngan.epochs = 1\n",
        );
        let main = write_cfg(
            dir.path(),
            "main.cfg",
            "include \"base.cfg\"\n# comment\nbudget.n = 200\nseed = 7\n",
        );
        let cfg = ExperimentConfig::from_file(&main).unwrap();
        assert_eq!(cfg.n_real, 200);
        assert_eq!(cfg.master_seed, 7);
        assert_eq!(cfg.quantile, 0.1);
        assert_eq!(cfg.gan_model.latent_dim, 100);
        assert_eq!(cfg.student_lambda, 0.9);
    }

    #[test]
    fn rejects_bad_values_with_field_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_cfg(
            dir.path(),
            "bad.cfg",
            "dataset.name = mnist\ndataset.root = /data\nbudget.n = 101\nbudget.m = 100\n\
             teacher.arch = lenet5\nstudent.arch = lenet5-half\nteacher.epochs = 1\n\
             student.epochs = 1\ngan.epochs = 1\n",
        );
        let e = ExperimentConfig::from_file(&p).unwrap_err();
        assert_eq!(e.field, "budget.n");
    }

    #[test]
    fn rejects_unknown_arch_and_syntax() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_cfg(dir.path(), "a.cfg", "dataset.name mnist\n");
        assert!(ExperimentConfig::from_file(&p).is_err());
        let p2 = write_cfg(
            dir.path(),
            "b.cfg",
            "dataset.name = mnist\ndataset.root = /d\nbudget.n = 10\nbudget.m = 10\n\
             teacher.arch = vgg99\nstudent.arch = lenet5\nteacher.epochs = 1\n\
             student.epochs = 1\ngan.epochs = 1\n",
        );
        let e = ExperimentConfig::from_file(&p2).unwrap_err();
        assert_eq!(e.field, "teacher.arch");
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let dir = tempfile::tempdir().unwrap();
        let body = "dataset.name = mnist\ndataset.root = /d\nbudget.n = 100\nbudget.m = 100\n\
             teacher.arch = lenet5\nstudent.arch = lenet5-half\nteacher.epochs = 1\n\
             student.epochs = 1\ngan.epochs = 1\n";
        let p = write_cfg(dir.path(), "a.cfg", body);
        let c1 = ExperimentConfig::from_file(&p).unwrap();
        let c2 = ExperimentConfig::from_file(&p).unwrap();
        assert_eq!(c1.content_hash(), c2.content_hash());
        let p3 = write_cfg(dir.path(), "c.cfg", &format!("{body}quantile = 0.25\n"));
        let c3 = ExperimentConfig::from_file(&p3).unwrap();
        assert_ne!(c1.content_hash(), c3.content_hash());
    }
}
