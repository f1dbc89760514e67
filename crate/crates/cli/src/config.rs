//! Run configuration: a TOML file naming the corpus and model config files
//! plus the balance, strategy and adaptation settings of one run.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::Result;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use speech_chain::chain::{AdaptConfig, AdaptMode, GradBalanceConfig, TrainStrategy};
use speech_chain::experiment::ExperimentConfig;

/// Environment variable overriding the run's output directory.
pub const OUTPUT_ROOT_ENV: &str = "SPEECH_CHAIN_OUT";

/// A configuration or argument problem; maps to exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Exit code for a failed command: 2 for config or argument errors, 3 for
/// everything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<speech_chain::Error>() {
            if matches!(e, speech_chain::Error::Config(_) | speech_chain::Error::Argument(_)) {
                return 2;
            }
        }
    }
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigPaths {
    pub corpus: PathBuf,
    pub asr: PathBuf,
    pub tts: PathBuf,
    pub speaker: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategySection {
    pub update_asr: bool,
    pub update_tts: bool,
    pub mode: AdaptMode,
}

impl Default for StrategySection {
    fn default() -> Self {
        Self {
            update_asr: true,
            update_tts: true,
            mode: AdaptMode::DomainAdapt,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfigFile {
    seed: i64,
    output_dir: PathBuf,
    configs: ConfigPaths,
    #[serde(default)]
    balance: GradBalanceConfig,
    #[serde(default)]
    strategy: StrategySection,
    #[serde(default)]
    adapt: AdaptConfig,
}

/// Fully resolved run configuration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Config file paths, resolved against the run config's directory.
    pub paths: ConfigPaths,
    pub strategy: TrainStrategy,
    pub experiment: ExperimentConfig,
}

pub fn read_text(path: &Path, what: &str) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read {what} {}: {e}", path.display())))
}

pub fn parse_toml<T: DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = read_text(path, what)?;
    toml::from_str(&text).map_err(|e| usage(format!("invalid {what} {}: {e}", path.display())))
}

impl RunConfig {
    /// Loads `path`; `seed` overrides the file's seed and the output root
    /// environment variable overrides its output directory.
    pub fn load(path: &Path, seed: Option<u64>) -> Result<Self> {
        let file: RunConfigFile = parse_toml(path, "run config")?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        let paths = ConfigPaths {
            corpus: resolve(&file.configs.corpus),
            asr: resolve(&file.configs.asr),
            tts: resolve(&file.configs.tts),
            speaker: resolve(&file.configs.speaker),
        };
        for (what, p) in [
            ("corpus config", &paths.corpus),
            ("ASR config", &paths.asr),
            ("TTS config", &paths.tts),
            ("speaker config", &paths.speaker),
        ] {
            if !p.is_file() {
                return Err(usage(format!("{what} {} does not exist", p.display())));
            }
        }
        let seed = match seed {
            Some(s) => s,
            None => u64::try_from(file.seed).map_err(|_| usage(format!("seed {} must be non-negative", file.seed)))?,
        };
        let output_dir = match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if !root.is_empty() => PathBuf::from(root),
            _ => resolve(&file.output_dir),
        };
        let strategy = TrainStrategy {
            update_asr: file.strategy.update_asr,
            update_tts: file.strategy.update_tts,
            mode: file.strategy.mode,
        };
        strategy.validate()?;
        let experiment = ExperimentConfig {
            corpus: parse_toml(&paths.corpus, "corpus config")?,
            asr: parse_toml(&paths.asr, "ASR config")?,
            tts: parse_toml(&paths.tts, "TTS config")?,
            speaker: parse_toml(&paths.speaker, "speaker config")?,
            balance: file.balance,
            adapt: file.adapt,
        };
        experiment.validate()?;
        Ok(Self {
            seed,
            output_dir,
            paths,
            strategy,
            experiment,
        })
    }

    /// Hash of everything that determines the run's outputs.
    pub fn hash(&self) -> Result<String> {
        let v = serde_json::json!({
            "seed": self.seed,
            "strategy": self.strategy,
            "experiment": self.experiment,
        });
        Ok(speech_chain::checkpoint::config_hash(&v)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_configs(dir: &Path, run: &str) -> PathBuf {
        for f in ["corpus", "asr", "tts", "speaker"] {
            std::fs::write(dir.join(format!("{f}.toml")), "").unwrap();
        }
        let p = dir.join("run.toml");
        std::fs::write(&p, run).unwrap();
        p
    }

    const RUN: &str = r#"
seed = 7
output_dir = "out"
[configs]
corpus = "corpus.toml"
asr = "asr.toml"
tts = "tts.toml"
speaker = "speaker.toml"
"#;

    #[test]
    fn resolves_relative_paths_and_defaults() {
        let d = tempfile::tempdir().unwrap();
        let rc = RunConfig::load(&write_configs(d.path(), RUN), None).unwrap();
        assert_eq!(rc.seed, 7);
        assert_eq!(rc.paths.asr, d.path().join("asr.toml"));
        assert_eq!(rc.experiment, ExperimentConfig::default());
        assert!(rc.strategy.update_tts);
        assert_eq!(RunConfig::load(&d.path().join("run.toml"), Some(9)).unwrap().seed, 9);
    }

    #[test]
    fn missing_referenced_file_is_usage_error() {
        let d = tempfile::tempdir().unwrap();
        let p = write_configs(d.path(), RUN);
        std::fs::remove_file(d.path().join("tts.toml")).unwrap();
        let err = RunConfig::load(&p, None).unwrap_err();
        assert_eq!(exit_code(&err), 2);
        assert!(err.to_string().contains("tts.toml"));
    }

    #[test]
    fn negative_seed_and_unknown_keys_rejected() {
        let d = tempfile::tempdir().unwrap();
        let p = write_configs(d.path(), &RUN.replace("seed = 7", "seed = -1"));
        assert_eq!(exit_code(&RunConfig::load(&p, None).unwrap_err()), 2);
        let p = write_configs(d.path(), &format!("{RUN}\nbogus = 1\n"));
        assert_eq!(exit_code(&RunConfig::load(&p, None).unwrap_err()), 2);
    }

    #[test]
    fn runtime_errors_map_to_three() {
        let e: anyhow::Error = speech_chain::Error::State("x".into()).into();
        assert_eq!(exit_code(&e), 3);
        let e: anyhow::Error = speech_chain::Error::Config("x".into()).into();
        assert_eq!(exit_code(&e), 2);
    }
}
