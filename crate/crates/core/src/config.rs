//! `key=value` run configuration shared by the CLI, training and
//! checkpoints.

use std::fs;
use std::path::Path;

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::heads::{HeadConfig, HeadKind, HeadSettings};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub head: HeadKind,
    pub head_settings: HeadSettings,
    pub encoder: EncoderConfig,
    /// Optional vector file for the embedding table.
    pub vectors: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 10,
            learning_rate: 1e-3,
            seed: 42,
            head: HeadKind::Linear,
            head_settings: HeadSettings::default(),
            encoder: EncoderConfig::default(),
            vectors: None,
        }
    }
}

/// Every accepted key, in the order they are applied and rendered.
pub const KEYS: &[&str] = &[
    "head",
    "batch_size",
    "epochs",
    "learning_rate",
    "seed",
    "max_len",
    "embedding",
    "vectors",
    "encoder_layers",
    "encoder_heads",
    "dim",
    "ffn_dim",
    "encoder_dropout",
    "kernel_sizes",
    "kernels_per_size",
    "layers",
    "hidden",
    "channels",
    "kernel",
    "pool_window",
    "pool_stride",
    "dropout",
];

/// Parsed `key=value` pairs. Later assignments replace earlier ones.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    pairs: Vec<(String, String)>,
}

impl ConfigFile {
    pub fn parse(content: &str) -> Result<Self> {
        let mut cf = Self::default();
        for (i, raw) in content.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse { line: i + 1, msg: format!("expected key=value, got {line:?}") })?;
            cf.set(k.trim(), v.trim()).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        }
        Ok(cf)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !KEYS.contains(&key) {
            return Err(Error::Config(format!("unknown key {key:?}")));
        }
        self.pairs.retain(|(k, _)| k != key);
        self.pairs.push((key.to_string(), value.to_string()));
        Ok(())
    }

    /// `other` takes precedence.
    pub fn merge(&mut self, other: &ConfigFile) {
        for (k, v) in &other.pairs {
            self.pairs.retain(|(kk, _)| kk != k);
            self.pairs.push((k.clone(), v.clone()));
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.pairs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Applies the pairs over `base` in canonical key order, so `dim`
    /// (which resets `ffn_dim` to 4·dim) is seen before `ffn_dim`.
    pub fn apply(&self, base: &TrainConfig) -> Result<TrainConfig> {
        let mut cfg = base.clone();
        for key in KEYS {
            if let Some(v) = self.get(key) {
                cfg.set(key, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

impl TrainConfig {
    pub fn head_config(&self) -> HeadConfig {
        HeadConfig::from_settings(self.head, &self.head_settings)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let h = &mut self.head_settings;
        let e = &mut self.encoder;
        match key {
            "head" => self.head = v.parse()?,
            "batch_size" => self.batch_size = num(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "learning_rate" => self.learning_rate = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "max_len" => e.max_len = num(key, v)?,
            "embedding" => e.kind = v.parse()?,
            "vectors" => self.vectors = (!v.is_empty()).then(|| v.to_string()),
            "encoder_layers" => e.layers = num(key, v)?,
            "encoder_heads" => e.heads = num(key, v)?,
            "dim" => {
                e.dim = num(key, v)?;
                e.ffn_dim = 4 * e.dim;
            }
            "ffn_dim" => e.ffn_dim = num(key, v)?,
            "encoder_dropout" => e.dropout = num(key, v)?,
            "kernel_sizes" => {
                h.kernel_sizes = v.split(',').map(|s| num(key, s.trim())).collect::<Result<Vec<usize>>>()?
            }
            "kernels_per_size" => h.kernels_per_size = num(key, v)?,
            "layers" => h.layers = num(key, v)?,
            "hidden" => h.hidden = num(key, v)?,
            "channels" => h.channels = num(key, v)?,
            "kernel" => h.kernel = num(key, v)?,
            "pool_window" => h.pool_window = num(key, v)?,
            "pool_stride" => h.pool_stride = num(key, v)?,
            "dropout" => h.dropout = num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.head_settings.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.head_settings.dropout)));
        }
        self.encoder.validate()?;
        let head = self.head_config();
        head.validate()?;
        if self.encoder.max_len < head.min_len() {
            return Err(Error::Config(format!(
                "max_len {} is shorter than the {} head's minimum {}",
                self.encoder.max_len,
                self.head,
                head.min_len()
            )));
        }
        Ok(())
    }

    /// Canonical `key=value` lines; parsing them back yields `self`.
    pub fn to_lines(&self) -> Vec<String> {
        let h = &self.head_settings;
        let e = &self.encoder;
        let sizes: Vec<String> = h.kernel_sizes.iter().map(|k| k.to_string()).collect();
        let mut lines = vec![
            format!("head={}", self.head),
            format!("batch_size={}", self.batch_size),
            format!("epochs={}", self.epochs),
            format!("learning_rate={:?}", self.learning_rate),
            format!("seed={}", self.seed),
            format!("max_len={}", e.max_len),
            format!("embedding={}", e.kind),
        ];
        if let Some(v) = &self.vectors {
            lines.push(format!("vectors={v}"));
        }
        lines.extend([
            format!("encoder_layers={}", e.layers),
            format!("encoder_heads={}", e.heads),
            format!("dim={}", e.dim),
            format!("ffn_dim={}", e.ffn_dim),
            format!("encoder_dropout={:?}", e.dropout),
            format!("kernel_sizes={}", sizes.join(",")),
            format!("kernels_per_size={}", h.kernels_per_size),
            format!("layers={}", h.layers),
            format!("hidden={}", h.hidden),
            format!("channels={}", h.channels),
            format!("kernel={}", h.kernel),
            format!("pool_window={}", h.pool_window),
            format!("pool_stride={}", h.pool_stride),
            format!("dropout={:?}", h.dropout),
        ]);
        lines
    }

    pub fn from_lines<'a>(lines: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut cf = ConfigFile::default();
        for line in lines {
            let (k, v) =
                line.split_once('=').ok_or_else(|| Error::Config(format!("expected key=value, got {line:?}")))?;
            cf.set(k, v)?;
        }
        cf.apply(&TrainConfig::default())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_full_size_values() {
        let c = TrainConfig::default();
        assert_eq!((c.batch_size, c.epochs, c.encoder.max_len), (64, 10, 128));
        assert_eq!(c.head_settings.kernel_sizes, vec![2, 3, 4]);
        assert_eq!(c.head_settings.kernels_per_size, 100);
        assert_eq!(c.head_settings.hidden, 768);
        assert_eq!(c.head_settings.channels, 250);
        assert_eq!(c.head_settings.dropout, 0.1);
        assert_eq!(c.encoder.ffn_dim, 4 * c.encoder.dim);
    }

    #[test]
    fn parse_file_with_comments() {
        let cf = ConfigFile::parse("# run\nhead=dpcnn\nbatch_size = 16 # small\n\nseed=7\n").unwrap();
        let c = cf.apply(&TrainConfig::default()).unwrap();
        assert_eq!(c.head, HeadKind::Dpcnn);
        assert_eq!(c.batch_size, 16);
        assert_eq!(c.seed, 7);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = ConfigFile::parse("head=linear\nwidth=3\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn flags_override_file_override_defaults() {
        let file = ConfigFile::parse("epochs=3\nbatch_size=8\n").unwrap();
        let mut flags = ConfigFile::default();
        flags.set("batch_size", "4").unwrap();
        let mut merged = file.clone();
        merged.merge(&flags);
        let c = merged.apply(&TrainConfig::default()).unwrap();
        assert_eq!((c.epochs, c.batch_size, c.seed), (3, 4, 42));
    }

    #[test]
    fn dim_resets_ffn_unless_given() {
        let c =
            ConfigFile::parse("ffn_dim=10\ndim=8\nencoder_heads=2").unwrap().apply(&TrainConfig::default()).unwrap();
        assert_eq!((c.encoder.dim, c.encoder.ffn_dim), (8, 10));
        let c = ConfigFile::parse("dim=8\nencoder_heads=2").unwrap().apply(&TrainConfig::default()).unwrap();
        assert_eq!(c.encoder.ffn_dim, 32);
    }

    #[test]
    fn lines_round_trip() {
        let mut c = TrainConfig { learning_rate: 0.1 + 0.2, head: HeadKind::Rcnn, ..TrainConfig::default() };
        c.head_settings.kernel_sizes = vec![1, 5];
        c.vectors = Some("v.txt".into());
        let lines = c.to_lines();
        let back = TrainConfig::from_lines(lines.iter().map(String::as_str)).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn invalid_values() {
        assert!(ConfigFile::parse("batch_size=0").unwrap().apply(&TrainConfig::default()).is_err());
        assert!(ConfigFile::parse("dim=10\nencoder_heads=4").unwrap().apply(&TrainConfig::default()).is_err());
        assert!(ConfigFile::parse("head=textcnn\nmax_len=3").unwrap().apply(&TrainConfig::default()).is_err());
        assert!(ConfigFile::parse("dropout=1.0").unwrap().apply(&TrainConfig::default()).is_err());
    }
}
