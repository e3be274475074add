//! Command bodies that sit outside the staged pipeline.

use std::fmt::Write as _;
use std::path::Path;

use tweetattn::baseline::{bow_featurize, predict_logreg};
use tweetattn::classifier::builtin_classify;
use tweetattn::corpus::{generate_synthetic, load_dataset, word_counts};
use tweetattn::ensemble::{evaluate, Evaluation, Predictor};
use tweetattn::features::embed_all;
use tweetattn::io::Section;
use tweetattn::{Ensemble, Head, LogReg, Mlp};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::pipeline::{FeatureSet, Pipeline};

pub const BUCKET_WIDTH: usize = 5;

/// `(bucket start, count)` for width-5 buckets from 0 through the bucket
/// holding the longest tweet. Empty buckets are kept.
pub fn histogram(counts: &[usize]) -> CliResult<Vec<(usize, usize)>> {
    let max = *counts
        .iter()
        .max()
        .ok_or_else(|| CliError::Core(tweetattn::Error::invalid("dataset is empty")))?;
    let mut buckets = vec![0usize; max / BUCKET_WIDTH + 1];
    for &c in counts {
        buckets[c / BUCKET_WIDTH] += 1;
    }
    Ok(buckets.into_iter().enumerate().map(|(i, n)| (i * BUCKET_WIDTH, n)).collect())
}

pub fn format_histogram(h: &[(usize, usize)]) -> String {
    let mut s = String::from("bucket\tcount\n");
    for &(lo, n) in h {
        let _ = writeln!(s, "[{lo},{})\t{n}", lo + BUCKET_WIDTH);
    }
    s
}

/// Word-count histogram of the configured dataset, also written to `stats.tsv`.
pub fn cmd_stats(cfg: &RunConfig) -> CliResult<String> {
    let data = match cfg.dataset_source() {
        Some(src) => load_dataset(&src)?,
        None => generate_synthetic(cfg.synthetic_n, cfg.synthetic_vocab, cfg.seed)?,
    };
    let text = format_histogram(&histogram(&word_counts(&data))?);
    std::fs::create_dir_all(&cfg.out).map_err(|e| tweetattn::Error::io(&cfg.out, e))?;
    let path = cfg.out.join("stats.tsv");
    std::fs::write(&path, &text).map_err(|e| tweetattn::Error::io(&path, e))?;
    Ok(text)
}

#[derive(Debug, Clone)]
pub enum LoadedModel {
    Mlp(Mlp),
    Ensemble(Ensemble),
    Head(Head),
    LogReg(LogReg),
}

impl LoadedModel {
    pub fn kind(&self) -> &'static str {
        match self {
            LoadedModel::Mlp(_) => "mlp",
            LoadedModel::Ensemble(_) => "ensemble",
            LoadedModel::Head(_) => "builtin-head",
            LoadedModel::LogReg(_) => "bow-logreg",
        }
    }
}

/// Loads any model file, dispatching on its section kind.
pub fn load_model(path: &Path) -> CliResult<LoadedModel> {
    let section = Section::load(path)?;
    Ok(match &section.kind {
        b"MLPP" => LoadedModel::Mlp(Mlp::from_section(&section)?),
        b"ENSM" => LoadedModel::Ensemble(Ensemble::from_section(&section)?),
        b"HEAD" => LoadedModel::Head(Head::from_section(&section)?),
        b"LOGR" => LoadedModel::LogReg(LogReg::from_section(&section)?),
        _ => {
            return Err(CliError::Core(tweetattn::Error::Format(format!(
                "{} holds a `{}` section, not a classifier",
                path.display(),
                section.kind_str()
            ))))
        }
    })
}

/// Feature set matching a classifier's input length.
fn feature_set_for(p: &Pipeline, d_in: usize) -> CliResult<FeatureSet> {
    let fc = p.cfg.feature_config();
    if d_in == fc.embedding_len(p.cfg.enc_hidden) {
        Ok(FeatureSet::HiddenAttention)
    } else if d_in == fc.hidden_len(p.cfg.enc_hidden) {
        Ok(FeatureSet::Hidden)
    } else {
        Err(CliError::Core(tweetattn::Error::Dimension {
            expected: fc.embedding_len(p.cfg.enc_hidden),
            got: d_in,
        }))
    }
}

fn predict_embedded<P: Predictor<f32>>(p: &Pipeline, model: &P, texts: &[&str]) -> CliResult<Vec<(u8, f64)>> {
    let x = embed_all(&p.encoder()?, texts.iter().copied(), &p.vocab()?, &p.cfg.feature_config())?;
    let x = p.features(x.view(), feature_set_for(p, model.d_in())?);
    let labels = model.predict_labels(x)?;
    let probs = model.predict_proba(x)?;
    Ok(labels.into_iter().zip(probs).collect())
}

/// `(label, probability)` per text. Embedding-based models read the vocabulary
/// and fine-tuned encoder from the output directory.
pub fn predict_texts(p: &Pipeline, model: &LoadedModel, texts: &[&str]) -> CliResult<Vec<(u8, f64)>> {
    match model {
        LoadedModel::Mlp(m) => predict_embedded(p, m, texts),
        LoadedModel::Ensemble(e) => predict_embedded(p, e, texts),
        LoadedModel::Head(h) => {
            let (enc, vocab) = (p.encoder()?, p.vocab()?);
            texts
                .iter()
                .map(|t| {
                    let prob = f64::from(builtin_classify(&enc, h, t, &vocab, p.cfg.max_len)?);
                    Ok((u8::from(prob > 0.5), prob))
                })
                .collect()
        }
        LoadedModel::LogReg(m) => {
            let vocab = p.vocab()?;
            texts
                .iter()
                .map(|t| {
                    let prob = f64::from(predict_logreg(m, &bow_featurize(t, &vocab))?);
                    Ok((u8::from(prob > 0.5), prob))
                })
                .collect()
        }
    }
}

/// Accuracy and confusion counts on the held-out split.
pub fn cmd_evaluate(p: &Pipeline, model: &LoadedModel) -> CliResult<Evaluation> {
    match model {
        LoadedModel::Mlp(m) => {
            let test = p.embeddings("embed_test.atse")?;
            let x = p.features(test.view(), feature_set_for(p, m.d_in())?);
            Ok(evaluate(m, x, &test.labels)?)
        }
        LoadedModel::Ensemble(e) => {
            let test = p.embeddings("embed_test.atse")?;
            let x = p.features(test.view(), feature_set_for(p, Predictor::d_in(e))?);
            Ok(evaluate(e, x, &test.labels)?)
        }
        _ => {
            let test = p.test_set()?;
            let texts: Vec<&str> = test.texts().collect();
            let pred: Vec<u8> = predict_texts(p, model, &texts)?.into_iter().map(|(l, _)| l).collect();
            Ok(Evaluation::from_labels(&pred, &test.labels())?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_buckets() {
        assert_eq!(histogram(&[3, 4]).unwrap(), vec![(0, 2)]);
        assert_eq!(histogram(&[3, 5, 12, 0]).unwrap(), vec![(0, 2), (5, 1), (10, 1)]);
        assert!(histogram(&[]).is_err());
        let text = format_histogram(&histogram(&[3, 4]).unwrap());
        assert_eq!(text, "bucket\tcount\n[0,5)\t2\n");
    }
}
