//! Staged, resumable experiment. Every stage writes its artifacts into the
//! output directory plus a `<stage>.fp` sidecar holding the stage
//! fingerprint and the sha256 of each artifact. A stage whose sidecar matches
//! is skipped and its artifacts are loaded from disk.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{s, ArrayView2};
use sha2::{Digest, Sha256};
use tweetattn::baseline::{bow_featurize, train_logreg, BowVector};
use tweetattn::classifier::{builtin_classify, fine_tune, format_log, train_mlp, HeadParams};
use tweetattn::corpus::{generate_synthetic, load_dataset, split_folds, subsample_indices, train_test_split, DatasetSource, LabeledDataset};
use tweetattn::encoder::pretrain_mlm;
use tweetattn::ensemble::{evaluate, train_ensemble, Ensemble, Evaluation, MemberSpec};
use tweetattn::features::embed_all;
use tweetattn::io::{EmbeddingCache, EMBED_VERSION, PARAM_VERSION};
use tweetattn::rng::derive_seed;
use tweetattn::tokenizer::Vocabulary;
use tweetattn::{Encoder, Head, LogReg, Mlp};

use crate::config::{hex, RunConfig};
use crate::error::{CliError, CliResult};

/// Which embedding columns a classifier sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeatureSet {
    Hidden,
    HiddenAttention,
}

impl FeatureSet {
    pub fn from_include_attention(include: bool) -> Self {
        if include {
            FeatureSet::HiddenAttention
        } else {
            FeatureSet::Hidden
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            FeatureSet::Hidden => "hidden",
            FeatureSet::HiddenAttention => "hidden-attention",
        }
    }

    fn file_tag(self) -> &'static str {
        match self {
            FeatureSet::Hidden => "hidden",
            FeatureSet::HiddenAttention => "full",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Data,
    Vocab,
    Pretrain,
    Finetune,
    Embed,
    Mlp(FeatureSet),
    Ensemble(FeatureSet),
    LogReg,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Data => "data",
            Stage::Vocab => "vocab",
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
            Stage::Embed => "embed",
            Stage::Mlp(FeatureSet::Hidden) => "mlp_hidden",
            Stage::Mlp(FeatureSet::HiddenAttention) => "mlp_full",
            Stage::Ensemble(FeatureSet::Hidden) => "ensemble_hidden",
            Stage::Ensemble(FeatureSet::HiddenAttention) => "ensemble_full",
            Stage::LogReg => "logreg",
        }
    }

    pub fn artifacts(self) -> Vec<String> {
        match self {
            Stage::Data => vec!["train.tsv".into(), "test.tsv".into()],
            Stage::Vocab => vec!["vocab.txt".into()],
            Stage::Pretrain => vec!["encoder_pretrained.atsn".into()],
            Stage::Finetune => vec!["encoder_finetuned.atsn".into(), "head.atsn".into()],
            Stage::Embed => vec!["embed_train.atse".into(), "embed_test.atse".into()],
            Stage::Mlp(f) => vec![format!("mlp_{}.atsn", f.file_tag())],
            Stage::Ensemble(f) => vec![format!("ensemble_{}.atsn", f.file_tag())],
            Stage::LogReg => vec!["logreg.atsn".into()],
        }
    }

    /// Config keys the stage reads directly; upstream keys enter through the
    /// parent fingerprint.
    fn keys(self) -> &'static [&'static str] {
        match self {
            Stage::Data => &["seed", "data_pos", "data_neg", "data_tsv", "synthetic_n", "synthetic_vocab", "test_fraction"],
            Stage::Vocab => &["vocab_max_size"],
            Stage::Pretrain => &[
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
            ],
            Stage::Finetune => &[
                "finetune_lr",
                "finetune_batch",
                "finetune_epochs",
                "finetune_weight_decay",
                "finetune_subsample",
                "finetune_freeze",
            ],
            Stage::Embed => &["hidden_mode", "corner_k", "attn_reduce"],
            Stage::Mlp(_) => &["mlp_width", "mlp_dropout", "mlp_lr", "mlp_batch", "mlp_epochs", "mlp_weight_decay"],
            Stage::Ensemble(_) => &[
                "mlp_width",
                "mlp_dropout",
                "mlp_lr",
                "mlp_batch",
                "mlp_epochs",
                "mlp_weight_decay",
                "folds",
            ],
            Stage::LogReg => &["logreg_lr", "logreg_epochs", "logreg_l2", "logreg_batch"],
        }
    }

    fn parent(self) -> Option<Stage> {
        match self {
            Stage::Data => None,
            Stage::Vocab => Some(Stage::Data),
            Stage::Pretrain => Some(Stage::Vocab),
            Stage::Finetune => Some(Stage::Pretrain),
            Stage::Embed => Some(Stage::Finetune),
            Stage::Mlp(_) | Stage::Ensemble(_) => Some(Stage::Embed),
            Stage::LogReg => Some(Stage::Vocab),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    pub stage: &'static str,
    pub cached: bool,
    pub seconds: f64,
}

/// Rows of the results table, in this order.
pub const REPORT_MODELS: [&str; 5] = [
    "builtin-head",
    "hidden-mlp",
    "hidden-attention-mlp",
    "hidden-attention-ensemble",
    "bow-logreg",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ResultsReport {
    pub config_fingerprint: String,
    pub rows: Vec<(String, Evaluation)>,
}

impl ResultsReport {
    pub fn accuracy(&self, model: &str) -> Option<f64> {
        self.rows.iter().find(|(m, _)| m == model).map(|(_, e)| e.accuracy)
    }

    /// Fails unless every expected model appears exactly once.
    pub fn check_complete(&self) -> CliResult<()> {
        for m in REPORT_MODELS {
            let n = self.rows.iter().filter(|(r, _)| r == m).count();
            if n != 1 {
                return Err(CliError::Report(format!("report has {n} rows for `{m}`")));
            }
        }
        Ok(())
    }

    pub fn to_tsv(&self) -> String {
        let mut s = format!("config_fingerprint\t{}\n", self.config_fingerprint);
        s.push_str("model\taccuracy\ttrue_pos\ttrue_neg\tfalse_pos\tfalse_neg\n");
        for (m, e) in &self.rows {
            let _ = writeln!(
                s,
                "{m}\t{:.6}\t{}\t{}\t{}\t{}",
                e.accuracy, e.true_pos, e.true_neg, e.false_pos, e.false_neg
            );
        }
        s
    }
}

fn sha256_file(path: &Path) -> Option<String> {
    fs::read(path).ok().map(|b| hex(&Sha256::digest(&b)))
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(tweetattn::Error::io(path, e))
}

pub struct Pipeline {
    pub cfg: RunConfig,
    pub dir: PathBuf,
    /// Stage status lines go to stderr unless cleared.
    pub verbose: bool,
    fingerprints: HashMap<Stage, String>,
    pub records: Vec<StageRecord>,
}

impl Pipeline {
    pub fn new(cfg: RunConfig) -> CliResult<Self> {
        let dir = cfg.out.clone();
        fs::create_dir_all(dir.join("logs")).map_err(|e| io_err(&dir, e))?;
        Ok(Pipeline {
            cfg,
            dir,
            verbose: true,
            fingerprints: HashMap::new(),
            records: Vec::new(),
        })
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    fn note(&self, msg: &str) {
        if self.verbose {
            eprintln!("{msg}");
        }
    }

    fn seed(&self, label: &str) -> u64 {
        derive_seed(self.cfg.seed, label)
    }

    fn input_digests(&self) -> CliResult<Vec<String>> {
        let mut out = vec![format!("param-format={PARAM_VERSION} embed-format={EMBED_VERSION}")];
        for p in [&self.cfg.data_pos, &self.cfg.data_neg, &self.cfg.data_tsv].into_iter().flatten() {
            let digest = sha256_file(p).ok_or_else(|| {
                CliError::Core(tweetattn::Error::io(p, std::io::Error::from(std::io::ErrorKind::NotFound)))
            })?;
            out.push(digest);
        }
        Ok(out)
    }

    fn stage_fingerprint(&mut self, stage: Stage) -> CliResult<String> {
        let mut extra = match stage.parent() {
            Some(p) => vec![self.ensure(p)?],
            None => self.input_digests()?,
        };
        extra.push(stage.name().to_string());
        let refs: Vec<&str> = extra.iter().map(String::as_str).collect();
        Ok(self.cfg.fingerprint_of(stage.keys(), &refs))
    }

    fn sidecar(&self, stage: Stage) -> PathBuf {
        self.path(&format!("{}.fp", stage.name()))
    }

    fn is_fresh(&self, stage: Stage, fp: &str) -> bool {
        let Ok(text) = fs::read_to_string(self.sidecar(stage)) else {
            return false;
        };
        let mut lines = text.lines();
        if lines.next() != Some(fp) {
            return false;
        }
        let recorded: HashMap<&str, &str> = lines.filter_map(|l| l.split_once('\t')).collect();
        stage.artifacts().iter().all(|a| {
            recorded.get(a.as_str()).is_some_and(|&d| sha256_file(&self.path(a)).as_deref() == Some(d))
        })
    }

    fn seal(&self, stage: Stage, fp: &str) -> CliResult<()> {
        let mut s = format!("{fp}\n");
        for a in stage.artifacts() {
            let d = sha256_file(&self.path(&a))
                .ok_or_else(|| CliError::Report(format!("stage `{}` did not write {a}", stage.name())))?;
            let _ = writeln!(s, "{a}\t{d}");
        }
        let path = self.sidecar(stage);
        fs::write(&path, s).map_err(|e| io_err(&path, e))
    }

    /// Brings `stage` and everything upstream up to date; returns its fingerprint.
    pub fn ensure(&mut self, stage: Stage) -> CliResult<String> {
        if let Some(fp) = self.fingerprints.get(&stage) {
            return Ok(fp.clone());
        }
        let fp = self.stage_fingerprint(stage)?;
        let start = Instant::now();
        let cached = self.is_fresh(stage, &fp);
        if cached {
            self.note(&format!("[{}] up to date", stage.name()));
        } else {
            if self.sidecar(stage).exists() {
                self.note(&format!("[{}] stale, rebuilding", stage.name()));
            } else {
                self.note(&format!("[{}] running", stage.name()));
            }
            let name = stage.name();
            self.produce(stage).map_err(|e| match e {
                CliError::Core(source) => CliError::Stage { stage: name, source },
                other => other,
            })?;
            self.seal(stage, &fp)?;
        }
        self.records.push(StageRecord {
            stage: stage.name(),
            cached,
            seconds: start.elapsed().as_secs_f64(),
        });
        self.fingerprints.insert(stage, fp.clone());
        Ok(fp)
    }

    fn write_log(&self, name: &str, text: &str) -> CliResult<()> {
        let path = self.path(&format!("logs/{name}.tsv"));
        fs::write(&path, format!("epoch\tloss\ttrain_acc\tval_acc\n{text}")).map_err(|e| io_err(&path, e))
    }

    fn produce(&mut self, stage: Stage) -> CliResult<()> {
        match stage {
            Stage::Data => {
                let data = match self.cfg.dataset_source() {
                    Some(src) => load_dataset(&src)?,
                    None => generate_synthetic(self.cfg.synthetic_n, self.cfg.synthetic_vocab, self.cfg.seed)?,
                };
                let (train, test) = train_test_split(data.len(), self.cfg.test_fraction, self.seed("split"))?;
                data.subset(&train).save_tsv(&self.path("train.tsv"))?;
                data.subset(&test).save_tsv(&self.path("test.tsv"))?;
            }
            Stage::Vocab => {
                Vocabulary::build(&self.train_set()?, self.cfg.vocab_max_size)?.save(&self.path("vocab.txt"))?;
            }
            Stage::Pretrain => {
                let vocab = self.vocab()?;
                let train = self.train_set()?;
                let enc = Encoder::init(self.cfg.encoder_config(vocab.len()), self.seed("encoder-init"))?;
                let enc = if self.cfg.pretrain_epochs == 0 {
                    enc
                } else {
                    let idx = subsample_indices(train.len(), self.cfg.pretrain_subsample, self.seed("pretrain-subsample"));
                    let (enc, report) =
                        pretrain_mlm(enc, &train.subset(&idx), &vocab, &self.cfg.mlm_hyper(self.seed("pretrain")))?;
                    let mut log = String::from("epoch\tmasked_loss\n");
                    for (i, l) in report.epoch_losses.iter().enumerate() {
                        let _ = writeln!(log, "{}\t{l:.6}", i + 1);
                    }
                    let path = self.path("logs/pretrain.tsv");
                    fs::write(&path, log).map_err(|e| io_err(&path, e))?;
                    enc
                };
                enc.save(&self.path("encoder_pretrained.atsn"))?;
            }
            Stage::Finetune => {
                let vocab = self.vocab()?;
                let train = self.train_set()?;
                let enc = Encoder::load(&self.path("encoder_pretrained.atsn"))?;
                let head = HeadParams::init(enc.config.hidden, self.seed("head-init"));
                let idx = subsample_indices(train.len(), self.cfg.finetune_subsample, self.seed("finetune-subsample"));
                let (enc, head, log) =
                    fine_tune(enc, head, &train.subset(&idx), &vocab, &self.cfg.finetune_hyper(self.seed("finetune")))?;
                self.write_log("finetune", &format_log(&log))?;
                enc.save(&self.path("encoder_finetuned.atsn"))?;
                head.save(&self.path("head.atsn"))?;
            }
            Stage::Embed => {
                let vocab = self.vocab()?;
                let enc = self.encoder()?;
                let fcfg = self.cfg.feature_config();
                for (set, file) in [(self.train_set()?, "embed_train.atse"), (self.test_set()?, "embed_test.atse")] {
                    let x = embed_all(&enc, set.texts(), &vocab, &fcfg)?;
                    EmbeddingCache::new(x, set.labels())?.save(&self.path(file))?;
                }
            }
            Stage::Mlp(f) => {
                let (train, test) = (self.embeddings("embed_train.atse")?, self.embeddings("embed_test.atse")?);
                let xtr = self.features(train.view(), f);
                let xte = self.features(test.view(), f);
                let seed = self.seed(&format!("mlp-{}", f.tag()));
                let init = Mlp::init(xtr.ncols(), self.cfg.mlp_width_for(xtr.ncols()), self.cfg.mlp_dropout, seed)?;
                let (model, log) = train_mlp(init, xtr, &train.labels, &self.cfg.mlp_hyper(seed), Some((xte, &test.labels)))?;
                self.write_log(stage.name(), &format_log(&log))?;
                model.save(&self.path(&stage.artifacts()[0]))?;
            }
            Stage::Ensemble(f) => {
                let train = self.embeddings("embed_train.atse")?;
                let xtr = self.features(train.view(), f);
                let folds = split_folds(xtr.nrows(), self.cfg.folds, self.seed("folds"))?;
                let spec = MemberSpec {
                    width: self.cfg.mlp_width_for(xtr.ncols()),
                    dropout: self.cfg.mlp_dropout,
                };
                let meta = format!("{}:{}", self.fingerprints[&Stage::Embed], f.tag());
                let (ens, logs) =
                    train_ensemble(xtr, &train.labels, &folds, spec, &self.cfg.mlp_hyper(self.seed("ensemble")), &meta)?;
                for (i, log) in logs.iter().enumerate() {
                    self.write_log(&format!("{}_{i}", stage.name()), &format_log(log))?;
                }
                ens.save(&self.path(&stage.artifacts()[0]))?;
            }
            Stage::LogReg => {
                let vocab = self.vocab()?;
                let train = self.train_set()?;
                let x: Vec<BowVector> = train.texts().map(|t| bow_featurize(t, &vocab)).collect();
                let fit = train_logreg::<f32>(&x, &train.labels(), vocab.len(), &self.cfg.logreg_hyper(self.seed("logreg")))?;
                if let Some(w) = &fit.warning {
                    self.note(&format!("[logreg] warning: {w}"));
                }
                let mut log = String::from("epoch\tloss\n");
                for (i, l) in fit.epoch_losses.iter().enumerate() {
                    let _ = writeln!(log, "{}\t{l:.6}", i + 1);
                }
                let path = self.path("logs/logreg.tsv");
                fs::write(&path, log).map_err(|e| io_err(&path, e))?;
                fit.params.save(&self.path("logreg.atsn"))?;
            }
        }
        Ok(())
    }

    pub fn train_set(&self) -> CliResult<LabeledDataset> {
        Ok(load_dataset(&DatasetSource::Tsv(self.path("train.tsv")))?)
    }

    pub fn test_set(&self) -> CliResult<LabeledDataset> {
        Ok(load_dataset(&DatasetSource::Tsv(self.path("test.tsv")))?)
    }

    pub fn vocab(&self) -> CliResult<Vocabulary> {
        Ok(Vocabulary::load(&self.path("vocab.txt"))?)
    }

    /// The fine-tuned encoder.
    pub fn encoder(&self) -> CliResult<Encoder> {
        Ok(Encoder::load(&self.path("encoder_finetuned.atsn"))?)
    }

    pub fn head(&self) -> CliResult<Head> {
        Ok(Head::load(&self.path("head.atsn"))?)
    }

    pub fn embeddings(&self, file: &str) -> CliResult<EmbeddingCache> {
        Ok(EmbeddingCache::load(&self.path(file))?)
    }

    /// Column view of a cached embedding matrix for one feature set.
    pub fn features<'a>(&self, x: ArrayView2<'a, f32>, f: FeatureSet) -> ArrayView2<'a, f32> {
        match f {
            FeatureSet::HiddenAttention => x,
            FeatureSet::Hidden => {
                let h = self.cfg.feature_config().hidden_len(self.cfg.enc_hidden);
                x.slice_move(s![.., ..h])
            }
        }
    }

    fn eval_builtin(&self) -> CliResult<Evaluation> {
        let (enc, head, vocab, test) = (self.encoder()?, self.head()?, self.vocab()?, self.test_set()?);
        let mut pred = Vec::with_capacity(test.len());
        for t in test.texts() {
            pred.push(u8::from(builtin_classify(&enc, &head, t, &vocab, self.cfg.max_len)? > 0.5));
        }
        Ok(Evaluation::from_labels(&pred, &test.labels())?)
    }

    fn eval_logreg(&self) -> CliResult<Evaluation> {
        let (model, vocab, test) = (LogReg::load(&self.path("logreg.atsn"))?, self.vocab()?, self.test_set()?);
        let mut pred = Vec::with_capacity(test.len());
        for t in test.texts() {
            let p = tweetattn::baseline::predict_logreg(&model, &bow_featurize(t, &vocab))?;
            pred.push(u8::from(p > 0.5));
        }
        Ok(Evaluation::from_labels(&pred, &test.labels())?)
    }

    /// Runs every stage and writes `report.tsv` and `timing.tsv`.
    pub fn run_all(&mut self) -> CliResult<ResultsReport> {
        let stages = [
            Stage::Data,
            Stage::Vocab,
            Stage::Pretrain,
            Stage::Finetune,
            Stage::Embed,
            Stage::Mlp(FeatureSet::Hidden),
            Stage::Mlp(FeatureSet::HiddenAttention),
            Stage::Ensemble(FeatureSet::HiddenAttention),
            Stage::LogReg,
        ];
        for s in stages {
            self.ensure(s)?;
        }
        let start = Instant::now();
        let test = self.embeddings("embed_test.atse")?;
        let wrap = |e: tweetattn::Error| CliError::Stage { stage: "evaluate", source: e };
        let mlp_h = Mlp::load(&self.path("mlp_hidden.atsn")).map_err(wrap)?;
        let mlp_f = Mlp::load(&self.path("mlp_full.atsn")).map_err(wrap)?;
        let ens = Ensemble::load(&self.path("ensemble_full.atsn")).map_err(wrap)?;
        let xh = self.features(test.view(), FeatureSet::Hidden);
        let xf = self.features(test.view(), FeatureSet::HiddenAttention);
        let unwrap_stage = |r: CliResult<Evaluation>| {
            r.map_err(|e| match e {
                CliError::Core(source) => CliError::Stage { stage: "evaluate", source },
                other => other,
            })
        };
        let rows = vec![
            (REPORT_MODELS[0].to_string(), unwrap_stage(self.eval_builtin())?),
            (REPORT_MODELS[1].to_string(), evaluate(&mlp_h, xh, &test.labels).map_err(wrap)?),
            (REPORT_MODELS[2].to_string(), evaluate(&mlp_f, xf, &test.labels).map_err(wrap)?),
            (REPORT_MODELS[3].to_string(), evaluate(&ens, xf, &test.labels).map_err(wrap)?),
            (REPORT_MODELS[4].to_string(), unwrap_stage(self.eval_logreg())?),
        ];
        let report = ResultsReport {
            config_fingerprint: self.cfg.fingerprint(),
            rows,
        };
        report.check_complete()?;
        let path = self.path("report.tsv");
        fs::write(&path, report.to_tsv()).map_err(|e| io_err(&path, e))?;
        self.records.push(StageRecord {
            stage: "evaluate",
            cached: false,
            seconds: start.elapsed().as_secs_f64(),
        });
        self.write_timing()?;
        Ok(report)
    }

    pub fn write_timing(&self) -> CliResult<()> {
        let mut s = String::from("stage\tstatus\tseconds\n");
        for r in &self.records {
            let _ = writeln!(s, "{}\t{}\t{:.3}", r.stage, if r.cached { "cached" } else { "ran" }, r.seconds);
        }
        let total: f64 = self.records.iter().map(|r| r.seconds).sum();
        let _ = writeln!(s, "total\t-\t{total:.3}");
        let path = self.path("timing.tsv");
        fs::write(&path, s).map_err(|e| io_err(&path, e))
    }

    pub fn was_cached(&self, stage: &str) -> Option<bool> {
        self.records.iter().rev().find(|r| r.stage == stage).map(|r| r.cached)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subsample_is_sorted_and_seeded() {
        assert_eq!(subsample_indices(5, 0, 1), vec![0, 1, 2, 3, 4]);
        assert_eq!(subsample_indices(5, 9, 1), vec![0, 1, 2, 3, 4]);
        let a = subsample_indices(100, 10, 3);
        assert_eq!(a.len(), 10);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(a, subsample_indices(100, 10, 3));
        assert_ne!(a, subsample_indices(100, 10, 4));
    }

    #[test]
    fn report_completeness() {
        let e = Evaluation::from_labels(&[1], &[1]).unwrap();
        let mut r = ResultsReport {
            config_fingerprint: "x".into(),
            rows: REPORT_MODELS.iter().map(|m| (m.to_string(), e)).collect(),
        };
        r.check_complete().unwrap();
        assert!(r.to_tsv().contains("hidden-attention-mlp\t1.000000\t1\t0\t0\t0\n"));
        r.rows.pop();
        assert!(r.check_complete().is_err());
        r.rows.push(r.rows[0].clone());
        assert!(r.check_complete().is_err());
    }
}
