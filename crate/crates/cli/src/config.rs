//! `key = value` run configuration. Every key is known up front; unknown keys
//! and out-of-range values are rejected while parsing.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};
use tweetattn::classifier::{FineTuneHyper, TrainHyper};
use tweetattn::corpus::DatasetSource;
use tweetattn::encoder::{EncoderConfig, MlmHyper};
use tweetattn::features::{AttnReduce, FeatureConfig, HiddenMode};
use tweetattn::baseline::LogRegHyper;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,

    pub data_pos: Option<PathBuf>,
    pub data_neg: Option<PathBuf>,
    pub data_tsv: Option<PathBuf>,
    pub synthetic_n: usize,
    pub synthetic_vocab: usize,
    pub test_fraction: f64,

    pub vocab_max_size: usize,
    pub max_len: usize,
    pub unbounded_cap: usize,

    pub enc_layers: usize,
    pub enc_heads: usize,
    pub enc_hidden: usize,
    pub enc_ffn: usize,

    pub pretrain_mask_prob: f64,
    pub pretrain_lr: f64,
    pub pretrain_batch: usize,
    pub pretrain_epochs: usize,
    pub pretrain_weight_decay: f64,
    /// 0 uses the whole training split.
    pub pretrain_subsample: usize,

    pub finetune_lr: f64,
    pub finetune_batch: usize,
    pub finetune_epochs: usize,
    pub finetune_weight_decay: f64,
    pub finetune_subsample: usize,
    pub finetune_freeze: bool,

    pub hidden_mode: HiddenMode,
    pub corner_k: usize,
    pub attn_reduce: AttnReduce,
    pub include_attention: bool,

    /// 0 applies the width rule to the input length.
    pub mlp_width: usize,
    pub mlp_dropout: f64,
    pub mlp_lr: f64,
    pub mlp_batch: usize,
    pub mlp_epochs: usize,
    pub mlp_weight_decay: f64,
    pub folds: usize,

    pub logreg_lr: f64,
    pub logreg_epochs: usize,
    pub logreg_l2: f64,
    pub logreg_batch: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mlp = TrainHyper::mlp_defaults();
        let ft = TrainHyper::finetune_defaults();
        let mlm = MlmHyper::default();
        let lr = LogRegHyper::default();
        let fc = FeatureConfig::default();
        RunConfig {
            seed: 1,
            out: PathBuf::from("run"),
            data_pos: None,
            data_neg: None,
            data_tsv: None,
            synthetic_n: 10_000,
            synthetic_vocab: 200,
            test_fraction: 0.2,
            vocab_max_size: 30_000,
            max_len: fc.max_len,
            unbounded_cap: fc.unbounded_cap,
            enc_layers: 4,
            enc_heads: 4,
            enc_hidden: 192,
            enc_ffn: 384,
            pretrain_mask_prob: mlm.mask_prob,
            pretrain_lr: mlm.lr,
            pretrain_batch: mlm.batch,
            pretrain_epochs: mlm.epochs,
            pretrain_weight_decay: mlm.weight_decay,
            pretrain_subsample: 0,
            finetune_lr: ft.lr,
            finetune_batch: ft.batch,
            finetune_epochs: ft.epochs,
            finetune_weight_decay: ft.weight_decay,
            finetune_subsample: 0,
            finetune_freeze: false,
            hidden_mode: fc.hidden_mode,
            corner_k: fc.k,
            attn_reduce: fc.attn_reduce,
            include_attention: fc.include_attention,
            mlp_width: 0,
            mlp_dropout: 0.9,
            mlp_lr: mlp.lr,
            mlp_batch: mlp.batch,
            mlp_epochs: mlp.epochs,
            mlp_weight_decay: mlp.weight_decay,
            folds: 5,
            logreg_lr: lr.lr,
            logreg_epochs: lr.epochs,
            logreg_l2: lr.l2,
            logreg_batch: lr.batch,
        }
    }
}

/// Every accepted key, in canonical order.
pub const KEYS: &[&str] = &[
    "seed",
    "out",
    "data_pos",
    "data_neg",
    "data_tsv",
    "synthetic_n",
    "synthetic_vocab",
    "test_fraction",
    "vocab_max_size",
    "max_len",
    "unbounded_cap",
    "enc_layers",
    "enc_heads",
    "enc_hidden",
    "enc_ffn",
    "pretrain_mask_prob",
    "pretrain_lr",
    "pretrain_batch",
    "pretrain_epochs",
    "pretrain_weight_decay",
    "pretrain_subsample",
    "finetune_lr",
    "finetune_batch",
    "finetune_epochs",
    "finetune_weight_decay",
    "finetune_subsample",
    "finetune_freeze",
    "hidden_mode",
    "corner_k",
    "attn_reduce",
    "include_attention",
    "mlp_width",
    "mlp_dropout",
    "mlp_lr",
    "mlp_batch",
    "mlp_epochs",
    "mlp_weight_decay",
    "folds",
    "logreg_lr",
    "logreg_epochs",
    "logreg_l2",
    "logreg_batch",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| CliError::Usage(format!("{key}: cannot parse `{value}`: {e}")))
}

fn at_least(key: &str, v: usize, min: usize) -> Result<usize, CliError> {
    if v < min {
        return Err(CliError::Usage(format!("{key} must be >= {min}, got {v}")));
    }
    Ok(v)
}

fn positive(key: &str, v: f64) -> Result<f64, CliError> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(CliError::Usage(format!("{key} must be positive and finite, got {v}")));
    }
    Ok(v)
}

fn non_negative(key: &str, v: f64) -> Result<f64, CliError> {
    if !(v >= 0.0 && v.is_finite()) {
        return Err(CliError::Usage(format!("{key} must be >= 0 and finite, got {v}")));
    }
    Ok(v)
}

fn in_range(key: &str, v: f64, lo: f64, hi_exclusive: f64) -> Result<f64, CliError> {
    if !(v >= lo && v < hi_exclusive) {
        return Err(CliError::Usage(format!("{key} must be in [{lo}, {hi_exclusive}), got {v}")));
    }
    Ok(v)
}

fn path_or_none(value: &str) -> Option<PathBuf> {
    if value.is_empty() {
        None
    } else {
        Some(PathBuf::from(value))
    }
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Sets one key from its textual value, validating its range.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "data_pos" => self.data_pos = path_or_none(v),
            "data_neg" => self.data_neg = path_or_none(v),
            "data_tsv" => self.data_tsv = path_or_none(v),
            "synthetic_n" => self.synthetic_n = at_least(key, parse(key, v)?, 2)?,
            "synthetic_vocab" => self.synthetic_vocab = at_least(key, parse(key, v)?, 20)?,
            "test_fraction" => {
                let f: f64 = parse(key, v)?;
                if !(f > 0.0 && f < 1.0) {
                    return Err(CliError::Usage(format!("test_fraction must be in (0, 1), got {f}")));
                }
                self.test_fraction = f;
            }
            "vocab_max_size" => self.vocab_max_size = at_least(key, parse(key, v)?, 4)?,
            "max_len" => self.max_len = at_least(key, parse(key, v)?, 1)?,
            "unbounded_cap" => self.unbounded_cap = at_least(key, parse(key, v)?, 16)?,
            "enc_layers" => self.enc_layers = at_least(key, parse(key, v)?, 1)?,
            "enc_heads" => self.enc_heads = at_least(key, parse(key, v)?, 1)?,
            "enc_hidden" => self.enc_hidden = at_least(key, parse(key, v)?, 1)?,
            "enc_ffn" => self.enc_ffn = at_least(key, parse(key, v)?, 1)?,
            "pretrain_mask_prob" => {
                let p: f64 = parse(key, v)?;
                if !(0.0..=1.0).contains(&p) {
                    return Err(CliError::Usage(format!("pretrain_mask_prob must be in [0, 1], got {p}")));
                }
                self.pretrain_mask_prob = p;
            }
            "pretrain_lr" => self.pretrain_lr = positive(key, parse(key, v)?)?,
            "pretrain_batch" => self.pretrain_batch = at_least(key, parse(key, v)?, 1)?,
            // 0 skips pretraining and fine-tunes the initial encoder
            "pretrain_epochs" => self.pretrain_epochs = parse(key, v)?,
            "pretrain_weight_decay" => self.pretrain_weight_decay = non_negative(key, parse(key, v)?)?,
            "pretrain_subsample" => self.pretrain_subsample = parse(key, v)?,
            "finetune_lr" => self.finetune_lr = positive(key, parse(key, v)?)?,
            "finetune_batch" => self.finetune_batch = at_least(key, parse(key, v)?, 1)?,
            "finetune_epochs" => self.finetune_epochs = at_least(key, parse(key, v)?, 1)?,
            "finetune_weight_decay" => self.finetune_weight_decay = non_negative(key, parse(key, v)?)?,
            "finetune_subsample" => self.finetune_subsample = parse(key, v)?,
            "finetune_freeze" => self.finetune_freeze = parse(key, v)?,
            "hidden_mode" => self.hidden_mode = parse(key, v)?,
            "corner_k" => {
                let k: usize = at_least(key, parse(key, v)?, 2)?;
                if !k.is_multiple_of(2) {
                    return Err(CliError::Usage(format!("corner_k must be even, got {k}")));
                }
                self.corner_k = k;
            }
            "attn_reduce" => self.attn_reduce = parse(key, v)?,
            "include_attention" => self.include_attention = parse(key, v)?,
            "mlp_width" => self.mlp_width = parse(key, v)?,
            "mlp_dropout" => self.mlp_dropout = in_range(key, parse(key, v)?, 0.0, 1.0)?,
            "mlp_lr" => self.mlp_lr = positive(key, parse(key, v)?)?,
            "mlp_batch" => self.mlp_batch = at_least(key, parse(key, v)?, 1)?,
            "mlp_epochs" => self.mlp_epochs = at_least(key, parse(key, v)?, 1)?,
            "mlp_weight_decay" => self.mlp_weight_decay = non_negative(key, parse(key, v)?)?,
            "folds" => self.folds = at_least(key, parse(key, v)?, 2)?,
            "logreg_lr" => self.logreg_lr = positive(key, parse(key, v)?)?,
            "logreg_epochs" => self.logreg_epochs = at_least(key, parse(key, v)?, 1)?,
            "logreg_l2" => self.logreg_l2 = non_negative(key, parse(key, v)?)?,
            "logreg_batch" => self.logreg_batch = at_least(key, parse(key, v)?, 1)?,
            _ => return Err(CliError::Usage(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Canonical textual value of `key`.
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "seed" => self.seed.to_string(),
            "out" => self.out.display().to_string(),
            "data_pos" => show_path(&self.data_pos),
            "data_neg" => show_path(&self.data_neg),
            "data_tsv" => show_path(&self.data_tsv),
            "synthetic_n" => self.synthetic_n.to_string(),
            "synthetic_vocab" => self.synthetic_vocab.to_string(),
            "test_fraction" => self.test_fraction.to_string(),
            "vocab_max_size" => self.vocab_max_size.to_string(),
            "max_len" => self.max_len.to_string(),
            "unbounded_cap" => self.unbounded_cap.to_string(),
            "enc_layers" => self.enc_layers.to_string(),
            "enc_heads" => self.enc_heads.to_string(),
            "enc_hidden" => self.enc_hidden.to_string(),
            "enc_ffn" => self.enc_ffn.to_string(),
            "pretrain_mask_prob" => self.pretrain_mask_prob.to_string(),
            "pretrain_lr" => self.pretrain_lr.to_string(),
            "pretrain_batch" => self.pretrain_batch.to_string(),
            "pretrain_epochs" => self.pretrain_epochs.to_string(),
            "pretrain_weight_decay" => self.pretrain_weight_decay.to_string(),
            "pretrain_subsample" => self.pretrain_subsample.to_string(),
            "finetune_lr" => self.finetune_lr.to_string(),
            "finetune_batch" => self.finetune_batch.to_string(),
            "finetune_epochs" => self.finetune_epochs.to_string(),
            "finetune_weight_decay" => self.finetune_weight_decay.to_string(),
            "finetune_subsample" => self.finetune_subsample.to_string(),
            "finetune_freeze" => self.finetune_freeze.to_string(),
            "hidden_mode" => self.hidden_mode.to_string(),
            "corner_k" => self.corner_k.to_string(),
            "attn_reduce" => self.attn_reduce.to_string(),
            "include_attention" => self.include_attention.to_string(),
            "mlp_width" => self.mlp_width.to_string(),
            "mlp_dropout" => self.mlp_dropout.to_string(),
            "mlp_lr" => self.mlp_lr.to_string(),
            "mlp_batch" => self.mlp_batch.to_string(),
            "mlp_epochs" => self.mlp_epochs.to_string(),
            "mlp_weight_decay" => self.mlp_weight_decay.to_string(),
            "folds" => self.folds.to_string(),
            "logreg_lr" => self.logreg_lr.to_string(),
            "logreg_epochs" => self.logreg_epochs.to_string(),
            "logreg_l2" => self.logreg_l2.to_string(),
            "logreg_batch" => self.logreg_batch.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("{origin}:{}: expected `key = value`", idx + 1)))?;
            self.set(key.trim(), value)
                .map_err(|e| CliError::Usage(format!("{origin}:{}: {e}", idx + 1)))?;
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text, "<config>")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks that hold across keys.
    pub fn validate(&self) -> Result<(), CliError> {
        match (&self.data_pos, &self.data_neg, &self.data_tsv) {
            (Some(_), Some(_), None) | (None, None, _) => {}
            _ => {
                return Err(CliError::Usage(
                    "give either data_pos and data_neg together, or data_tsv, or neither for the synthetic corpus".into(),
                ))
            }
        }
        if !self.enc_hidden.is_multiple_of(self.enc_heads) {
            return Err(CliError::Usage(format!(
                "enc_hidden {} is not divisible by enc_heads {}",
                self.enc_hidden, self.enc_heads
            )));
        }
        if self.enc_layers < self.hidden_mode.layers_used() {
            return Err(CliError::Usage(format!(
                "hidden_mode {} needs at least {} encoder layers",
                self.hidden_mode,
                self.hidden_mode.layers_used()
            )));
        }
        if let AttnReduce::SingleHead { layer, head } = self.attn_reduce {
            if layer >= self.enc_layers || head >= self.enc_heads {
                return Err(CliError::Usage(format!("attn_reduce {} is outside the encoder", self.attn_reduce)));
            }
        }
        if self.unbounded_cap < self.corner_k {
            return Err(CliError::Usage("unbounded_cap must be >= corner_k".into()));
        }
        Ok(())
    }

    /// Canonical `key = value` text, `out` excluded since it does not affect results.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        for key in KEYS.iter().filter(|&&k| k != "out") {
            let _ = writeln!(s, "{key} = {}", self.get(key).expect("known key"));
        }
        s
    }

    /// Hex sha256 over `keys` (with their values) and `extra`.
    pub fn fingerprint_of(&self, keys: &[&str], extra: &[&str]) -> String {
        let mut h = Sha256::new();
        for key in keys {
            h.update(format!("{key}={}\n", self.get(key).expect("known key")));
        }
        for e in extra {
            h.update(e.as_bytes());
            h.update(b"\n");
        }
        hex(&h.finalize())
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.canonical());
        h.update(format!(
            "param-format={} embed-format={}\n",
            tweetattn::io::PARAM_VERSION,
            tweetattn::io::EMBED_VERSION
        ));
        hex(&h.finalize())
    }

    pub fn dataset_source(&self) -> Option<DatasetSource> {
        match (&self.data_pos, &self.data_neg, &self.data_tsv) {
            (_, _, Some(tsv)) => Some(DatasetSource::Tsv(tsv.clone())),
            (Some(p), Some(n), None) => Some(DatasetSource::TwoFile {
                positive: p.clone(),
                negative: n.clone(),
            }),
            _ => None,
        }
    }

    pub fn encoder_config(&self, vocab: usize) -> EncoderConfig {
        EncoderConfig {
            layers: self.enc_layers,
            heads: self.enc_heads,
            hidden: self.enc_hidden,
            ffn: self.enc_ffn,
            vocab,
            max_pos: self.unbounded_cap.max(self.max_len),
        }
    }

    pub fn mlm_hyper(&self, seed: u64) -> MlmHyper {
        MlmHyper {
            mask_prob: self.pretrain_mask_prob,
            lr: self.pretrain_lr,
            batch: self.pretrain_batch,
            epochs: self.pretrain_epochs,
            seed,
            weight_decay: self.pretrain_weight_decay,
            max_len: self.max_len,
        }
    }

    pub fn finetune_hyper(&self, seed: u64) -> FineTuneHyper {
        FineTuneHyper {
            train: TrainHyper {
                lr: self.finetune_lr,
                batch: self.finetune_batch,
                epochs: self.finetune_epochs,
                seed,
                weight_decay: self.finetune_weight_decay,
            },
            max_len: self.max_len,
            freeze_encoder: self.finetune_freeze,
        }
    }

    /// Feature extraction settings; attention is always extracted so the
    /// cache serves both feature sets.
    pub fn feature_config(&self) -> FeatureConfig {
        FeatureConfig {
            hidden_mode: self.hidden_mode,
            k: self.corner_k,
            attn_reduce: self.attn_reduce,
            include_attention: true,
            max_len: self.max_len,
            unbounded_cap: self.unbounded_cap,
        }
    }

    pub fn mlp_hyper(&self, seed: u64) -> TrainHyper {
        TrainHyper {
            lr: self.mlp_lr,
            batch: self.mlp_batch,
            epochs: self.mlp_epochs,
            seed,
            weight_decay: self.mlp_weight_decay,
        }
    }

    pub fn mlp_width_for(&self, d_in: usize) -> usize {
        if self.mlp_width == 0 {
            tweetattn::classifier::default_width(d_in)
        } else {
            self.mlp_width
        }
    }

    pub fn logreg_hyper(&self, seed: u64) -> LogRegHyper {
        LogRegHyper {
            lr: self.logreg_lr,
            epochs: self.logreg_epochs,
            l2: self.logreg_l2,
            batch: self.logreg_batch,
            seed,
        }
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_round_trips() {
        let cfg = RunConfig::default();
        for key in KEYS {
            let value = cfg.get(key).unwrap_or_else(|| panic!("{key} has no getter"));
            let mut other = cfg.clone();
            other.set(key, &value).unwrap_or_else(|e| panic!("{key}: {e}"));
            assert_eq!(other, cfg, "{key}");
        }
        let again = RunConfig::parse_str(&cfg.canonical()).unwrap();
        assert_eq!(again.canonical(), cfg.canonical());
    }

    #[test]
    fn parses_comments_and_overrides() {
        let cfg = RunConfig::parse_str("# desk run\nseed = 7  # root seed\n\nmlp_lr=1e-3\nhidden_mode = last2-concat\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.mlp_lr, 1e-3);
        assert_eq!(cfg.hidden_mode, HiddenMode::Last2Concat);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_ranges() {
        assert!(RunConfig::parse_str("sede = 1").is_err());
        assert!(RunConfig::parse_str("mlp_dropout = 1.0").is_err());
        assert!(RunConfig::parse_str("mlp_lr = -1").is_err());
        assert!(RunConfig::parse_str("corner_k = 15").is_err());
        assert!(RunConfig::parse_str("folds = 1").is_err());
        assert!(RunConfig::parse_str("test_fraction = 1").is_err());
        assert!(RunConfig::parse_str("enc_heads = 5").is_err());
        assert!(RunConfig::parse_str("data_pos = a.txt").is_err());
        assert!(RunConfig::parse_str("just words").is_err());
        assert!(RunConfig::parse_str("enc_layers = 2").is_err());
        assert!(RunConfig::parse_str("enc_layers = 2\nhidden_mode = last2-concat").is_ok());
    }

    #[test]
    fn fingerprint_tracks_values_but_not_out() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.out = PathBuf::from("elsewhere");
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.seed = 2;
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint_of(&["seed"], &[]), b.fingerprint_of(&["seed"], &[]));
        assert_eq!(a.fingerprint_of(&["mlp_lr"], &[]), b.fingerprint_of(&["mlp_lr"], &[]));
    }

    #[test]
    fn width_rule_applies_when_unset() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.mlp_width_for(1024), 1500);
        let cfg = RunConfig::parse_str("mlp_width = 64").unwrap();
        assert_eq!(cfg.mlp_width_for(1024), 64);
    }
}
