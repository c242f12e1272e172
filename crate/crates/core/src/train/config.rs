use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::encoder::DurationConfig;
use crate::error::{Error, Result};
use crate::frontend::{FrontendConfig, FrontendVariant};
use crate::model::{ModelConfig, DECODER_HEADS, ENCODER_HEADS};

/// Training configuration, read from a plain `key = value` file.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub d: usize,
    /// Acoustic feature width, i.e. the number of filterbank bands.
    pub d0: usize,
    pub d1: usize,
    /// Acoustic frames per motion frame after interpolation.
    pub n: usize,
    pub fps: f64,
    pub sample_rate: u32,
    pub win_ms: f64,
    pub hop_ms: f64,
    pub n_subjects: usize,
    pub encoder_heads: usize,
    pub decoder_heads: usize,
    pub durations: DurationConfig,
    pub epochs: u64,
    /// Stops after this many optimizer steps when set; 0 means no limit.
    pub max_steps: u64,
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub single_branch: bool,
    pub random_mask_init: bool,
    pub disable_hierarchy: bool,
    pub frontend_variant: FrontendVariant,
    /// Use the model's own rollout instead of ground truth as decoder history.
    pub autoregressive_training: bool,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            d: 128,
            d0: 80,
            d1: 32,
            n: 1,
            fps: 30.0,
            sample_rate: 16000,
            win_ms: 25.0,
            hop_ms: 10.0,
            n_subjects: 8,
            encoder_heads: ENCODER_HEADS,
            decoder_heads: DECODER_HEADS,
            durations: DurationConfig::default(),
            epochs: 100,
            max_steps: 0,
            base_lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            single_branch: false,
            random_mask_init: false,
            disable_hierarchy: false,
            frontend_variant: FrontendVariant::Mel,
            autoregressive_training: false,
        }
    }
}

/// Keys that control only how long a run lasts; they are left out of the hash.
const RUN_KEYS: [&str; 2] = ["epochs", "max_steps"];

fn parse_value<T: FromStr>(key: &str, raw: &str) -> std::result::Result<T, String> {
    raw.parse().map_err(|_| format!("invalid value `{raw}` for `{key}`"))
}

fn parse_range(key: &str, raw: &str) -> std::result::Result<(f64, f64), String> {
    let (a, b) = raw.split_once(',').ok_or_else(|| format!("`{key}` expects `lo,hi`, got `{raw}`"))?;
    Ok((parse_value(key, a.trim())?, parse_value(key, b.trim())?))
}

impl Config {
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let c = self;
        vec![
            ("d", c.d.to_string()),
            ("d0", c.d0.to_string()),
            ("d1", c.d1.to_string()),
            ("n", c.n.to_string()),
            ("fps", format!("{:?}", c.fps)),
            ("sample_rate", c.sample_rate.to_string()),
            ("win_ms", format!("{:?}", c.win_ms)),
            ("hop_ms", format!("{:?}", c.hop_ms)),
            ("n_subjects", c.n_subjects.to_string()),
            ("encoder_heads", c.encoder_heads.to_string()),
            ("decoder_heads", c.decoder_heads.to_string()),
            ("phoneme_ms", format!("{:?},{:?}", c.durations.phoneme_ms.0, c.durations.phoneme_ms.1)),
            ("word_ms", format!("{:?},{:?}", c.durations.word_ms.0, c.durations.word_ms.1)),
            ("epochs", c.epochs.to_string()),
            ("max_steps", c.max_steps.to_string()),
            ("base_lr", format!("{:?}", c.base_lr)),
            ("beta1", format!("{:?}", c.beta1)),
            ("beta2", format!("{:?}", c.beta2)),
            ("adam_eps", format!("{:?}", c.adam_eps)),
            ("seed", c.seed.to_string()),
            ("single_branch", c.single_branch.to_string()),
            ("random_mask_init", c.random_mask_init.to_string()),
            ("disable_hierarchy", c.disable_hierarchy.to_string()),
            ("frontend_variant", c.frontend_variant.to_string()),
            ("autoregressive_training", c.autoregressive_training.to_string()),
        ]
    }

    fn set(&mut self, key: &str, raw: &str) -> std::result::Result<(), String> {
        match key {
            "d" => self.d = parse_value(key, raw)?,
            "d0" => self.d0 = parse_value(key, raw)?,
            "d1" => self.d1 = parse_value(key, raw)?,
            "n" => self.n = parse_value(key, raw)?,
            "fps" => self.fps = parse_value(key, raw)?,
            "sample_rate" => self.sample_rate = parse_value(key, raw)?,
            "win_ms" => self.win_ms = parse_value(key, raw)?,
            "hop_ms" => self.hop_ms = parse_value(key, raw)?,
            "n_subjects" => self.n_subjects = parse_value(key, raw)?,
            "encoder_heads" => self.encoder_heads = parse_value(key, raw)?,
            "decoder_heads" => self.decoder_heads = parse_value(key, raw)?,
            "phoneme_ms" => self.durations.phoneme_ms = parse_range(key, raw)?,
            "word_ms" => self.durations.word_ms = parse_range(key, raw)?,
            "epochs" => self.epochs = parse_value(key, raw)?,
            "max_steps" => self.max_steps = parse_value(key, raw)?,
            "base_lr" => self.base_lr = parse_value(key, raw)?,
            "beta1" => self.beta1 = parse_value(key, raw)?,
            "beta2" => self.beta2 = parse_value(key, raw)?,
            "adam_eps" => self.adam_eps = parse_value(key, raw)?,
            "seed" => self.seed = parse_value(key, raw)?,
            "single_branch" => self.single_branch = parse_value(key, raw)?,
            "random_mask_init" => self.random_mask_init = parse_value(key, raw)?,
            "disable_hierarchy" => self.disable_hierarchy = parse_value(key, raw)?,
            "frontend_variant" => self.frontend_variant = parse_value(key, raw)?,
            "autoregressive_training" => self.autoregressive_training = parse_value(key, raw)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. Blank lines and `#` comments are ignored.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut config = Config::default();
        let mut seen = std::collections::HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |detail: String| Error::Parse { path: path.to_path_buf(), line: i + 1, detail };
            let (key, value) =
                line.split_once('=').ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(err(format!("duplicate key `{key}`")));
            }
            config.set(key, value.trim()).map_err(err)?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path)?, path)
    }

    /// Every key in a fixed order; parsing this text yields the same config.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// SHA-256 over the canonical text of every key except the run-length ones.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if !RUN_KEYS.contains(&k) {
                h.update(format!("{k} = {v}\n").as_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.sample_rate == 0 || self.epochs == 0 {
            return Err(Error::Config("n, sample_rate and epochs must be positive".into()));
        }
        if !(self.win_ms > 0.0 && self.hop_ms > 0.0) {
            return Err(Error::Config("frontend window and hop must be positive".into()));
        }
        if !(self.base_lr > 0.0)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.adam_eps > 0.0)
        {
            return Err(Error::Config("invalid optimizer settings".into()));
        }
        self.model_config(1).validate()
    }

    pub fn frontend(&self) -> FrontendConfig {
        FrontendConfig { n_bands: self.d0, win_ms: self.win_ms, hop_ms: self.hop_ms, variant: self.frontend_variant }
    }

    pub fn model_config(&self, n_vertices: usize) -> ModelConfig {
        ModelConfig {
            d0: self.d0,
            d: self.d,
            d1: self.d1,
            encoder_heads: self.encoder_heads,
            decoder_heads: self.decoder_heads,
            fps: self.fps,
            durations: self.durations,
            n_vertices,
            n_subjects: self.n_subjects,
            single_branch: self.single_branch,
            disable_hierarchy: self.disable_hierarchy,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let c = Config {
            d: 64,
            base_lr: 3e-4,
            single_branch: true,
            frontend_variant: FrontendVariant::Linear,
            ..Config::default()
        };
        let back = Config::parse(&c.to_text(), Path::new("c.cfg")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn parse_errors_name_the_line() {
        let err = Config::parse("d = 64\n\nbogus = 1\n", Path::new("x.cfg")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        assert!(Config::parse("d = 64\nd = 32\n", Path::new("x.cfg")).is_err());
        assert!(Config::parse("d = many\n", Path::new("x.cfg")).is_err());
        assert!(Config::parse("d = 0\n", Path::new("x.cfg")).is_err());
    }

    #[test]
    fn hash_ignores_run_length() {
        let a = Config::default();
        let b = Config { epochs: 7, max_steps: 10, ..a.clone() };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), Config { seed: 1, ..a.clone() }.hash());
    }

    #[test]
    fn comments_and_defaults() {
        let c = Config::parse("# overfit\nd = 64 # width\nphoneme_ms = 40, 180\n", Path::new("c")).unwrap();
        assert_eq!(c.d, 64);
        assert_eq!(c.d1, 32);
        assert_eq!(c.durations.phoneme_ms, (40.0, 180.0));
    }
}
