//! Flat key=value run configuration.
//!
//! One format serves config files, CLI overrides, and the effective-config
//! echo: `key=value` lines, `#` comments, unknown keys rejected, duplicates
//! rejected. The `FRLA_SEED` environment variable overrides the file seed;
//! explicit CLI flags override both.

use crate::error::{Error, Result};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub tau: f64,
    pub lambda_la: f64,
    pub seed: u64,
    pub enable_dis: bool,
    pub enable_fr: bool,
    pub enable_la: bool,
    pub teacher_logit_scale: f64,
    pub target_logit_scale: f64,
    pub pretrain_epochs: usize,
    /// Teacher pretraining step size; the adaptation lr drives the
    /// norm-divided class head hard enough to kill relu units.
    pub teacher_pretrain_lr: f64,
    pub image_size: usize,
    pub num_classes: usize,
    /// Refresh the bank only once, before epoch 0 (ablation flag).
    pub freeze_bank: bool,
    /// Drop every patch of samples without a confident bank label.
    pub drop_unconfident_patches: bool,
    /// Relu between the bottleneck and the heads.
    pub bottleneck_relu: bool,
    pub dump_bank: bool,
    pub dump_patches: bool,
    pub target_data: Option<String>,
    pub source_ckpt: Option<String>,
    pub teacher_ckpt: Option<String>,
    pub out_dir: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            epochs: 15,
            batch_size: 16,
            lr: 1e-3,
            momentum: 0.9,
            tau: 0.95,
            lambda_la: 0.3,
            seed: 7,
            enable_dis: true,
            enable_fr: true,
            enable_la: true,
            teacher_logit_scale: 10.0,
            target_logit_scale: 1.0,
            pretrain_epochs: 15,
            teacher_pretrain_lr: 1.5e-4,
            image_size: 32,
            num_classes: 4,
            freeze_bank: false,
            drop_unconfident_patches: false,
            bottleneck_relu: false,
            dump_bank: false,
            dump_patches: false,
            target_data: None,
            source_ckpt: None,
            teacher_ckpt: None,
            out_dir: None,
        }
    }
}

fn bad_value(key: &str, value: &str, want: &str) -> Error {
    Error::Config(format!("key {key}: cannot parse {value:?} as {want}"))
}

impl RunConfig {
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        macro_rules! parse {
            ($want:literal) => {
                value.parse().map_err(|_| bad_value(key, value, $want))?
            };
        }
        match key {
            "epochs" => self.epochs = parse!("integer"),
            "batch_size" => {
                self.batch_size = parse!("integer");
                if self.batch_size == 0 {
                    return Err(Error::Config("batch_size must be at least 1".into()));
                }
            }
            "lr" => self.lr = parse!("float"),
            "momentum" => self.momentum = parse!("float"),
            "tau" => {
                self.tau = parse!("float");
                if !(0.0..=1.0).contains(&self.tau) {
                    return Err(Error::Config(format!("tau {} outside [0,1]", self.tau)));
                }
            }
            "lambda_la" => self.lambda_la = parse!("float"),
            "seed" => self.seed = parse!("integer"),
            "enable_dis" => self.enable_dis = parse!("bool"),
            "enable_fr" => self.enable_fr = parse!("bool"),
            "enable_la" => self.enable_la = parse!("bool"),
            "teacher_logit_scale" => self.teacher_logit_scale = parse!("float"),
            "target_logit_scale" => self.target_logit_scale = parse!("float"),
            "pretrain_epochs" => self.pretrain_epochs = parse!("integer"),
            "teacher_pretrain_lr" => self.teacher_pretrain_lr = parse!("float"),
            "image_size" => self.image_size = parse!("integer"),
            "num_classes" => self.num_classes = parse!("integer"),
            "freeze_bank" => self.freeze_bank = parse!("bool"),
            "drop_unconfident_patches" => self.drop_unconfident_patches = parse!("bool"),
            "bottleneck_relu" => self.bottleneck_relu = parse!("bool"),
            "dump_bank" => self.dump_bank = parse!("bool"),
            "dump_patches" => self.dump_patches = parse!("bool"),
            "target_data" => self.target_data = Some(value.to_string()),
            "source_ckpt" => self.source_ckpt = Some(value.to_string()),
            "teacher_ckpt" => self.teacher_ckpt = Some(value.to_string()),
            "out_dir" => self.out_dir = Some(value.to_string()),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got {line:?}", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if seen.contains(&key.to_string()) {
                return Err(Error::Config(format!("duplicate key {key:?}")));
            }
            seen.push(key.to_string());
            cfg.apply_kv(key, value)?;
        }
        Ok(cfg)
    }

    /// Reads a config file; a missing file names the offending path.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config file {}: {e}", path.display()))
        })?;
        let mut cfg = Self::from_kv_text(&text)?;
        cfg.apply_env();
        Ok(cfg)
    }

    /// FRLA_SEED overrides the config seed when set.
    pub fn apply_env(&mut self) {
        if let Ok(v) = std::env::var("FRLA_SEED") {
            if let Ok(seed) = v.trim().parse() {
                self.seed = seed;
            }
        }
    }

    /// Echo form: every key, sorted, one per line. Parsing this text
    /// reproduces the config exactly.
    pub fn to_kv_text(&self) -> String {
        let mut pairs: Vec<(&str, String)> = vec![
            ("batch_size", self.batch_size.to_string()),
            ("bottleneck_relu", self.bottleneck_relu.to_string()),
            ("drop_unconfident_patches", self.drop_unconfident_patches.to_string()),
            ("dump_bank", self.dump_bank.to_string()),
            ("dump_patches", self.dump_patches.to_string()),
            ("enable_dis", self.enable_dis.to_string()),
            ("enable_fr", self.enable_fr.to_string()),
            ("enable_la", self.enable_la.to_string()),
            ("epochs", self.epochs.to_string()),
            ("freeze_bank", self.freeze_bank.to_string()),
            ("image_size", self.image_size.to_string()),
            ("lambda_la", format_f64(self.lambda_la)),
            ("lr", format_f64(self.lr)),
            ("momentum", format_f64(self.momentum)),
            ("num_classes", self.num_classes.to_string()),
            ("pretrain_epochs", self.pretrain_epochs.to_string()),
            ("seed", self.seed.to_string()),
            ("target_logit_scale", format_f64(self.target_logit_scale)),
            ("tau", format_f64(self.tau)),
            ("teacher_pretrain_lr", format_f64(self.teacher_pretrain_lr)),
            ("teacher_logit_scale", format_f64(self.teacher_logit_scale)),
        ];
        for (key, v) in [
            ("out_dir", &self.out_dir),
            ("source_ckpt", &self.source_ckpt),
            ("target_data", &self.target_data),
            ("teacher_ckpt", &self.teacher_ckpt),
        ] {
            if let Some(v) = v {
                pairs.push((key, v.clone()));
            }
        }
        pairs.sort_by(|a, b| a.0.cmp(b.0));
        let mut out = String::new();
        for (k, v) in pairs {
            writeln!(out, "{k}={v}").unwrap();
        }
        out
    }
}

/// Shortest f64 formatting that round-trips (`{}` uses the Grisu/Ryū path).
fn format_f64(v: f64) -> String {
    format!("{v}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_experimental_setup() {
        let c = RunConfig::default();
        assert_eq!(c.epochs, 15);
        assert_eq!(c.batch_size, 16);
        assert_eq!(c.lr, 1e-3);
        assert_eq!(c.momentum, 0.9);
        assert_eq!(c.tau, 0.95);
        assert_eq!(c.lambda_la, 0.3);
        assert!(c.enable_dis && c.enable_fr && c.enable_la);
        assert_eq!(c.teacher_logit_scale, 10.0);
        assert_eq!(c.target_logit_scale, 1.0);
    }

    #[test]
    fn kv_roundtrip_reproduces_config() {
        let mut c = RunConfig::default();
        c.epochs = 3;
        c.enable_la = false;
        c.lambda_la = 0.125;
        c.target_data = Some("data/target".into());
        let text = c.to_kv_text();
        let back = RunConfig::from_kv_text(&text).unwrap();
        assert_eq!(c, back);
    }

    #[test]
    fn unknown_key_and_duplicates_rejected() {
        assert!(matches!(
            RunConfig::from_kv_text("nonsense=1"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_kv_text("epochs=3\nepochs=4"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_kv_text("epochs=abc"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let text = "# a comment\n\nepochs=2\n  tau = 0.5  \n";
        let c = RunConfig::from_kv_text(text).unwrap();
        assert_eq!(c.epochs, 2);
        assert_eq!(c.tau, 0.5);
    }

    #[test]
    fn missing_file_names_path() {
        let err = RunConfig::from_file(Path::new("/no/such/config.cfg")).unwrap_err();
        assert!(err.to_string().contains("/no/such/config.cfg"));
    }

    #[test]
    fn env_seed_overrides_file() {
        // set/unset carefully; tests in this binary run in parallel threads
        std::env::set_var("FRLA_SEED", "4242");
        let mut c = RunConfig::default();
        c.apply_env();
        std::env::remove_var("FRLA_SEED");
        assert_eq!(c.seed, 4242);
    }
}
