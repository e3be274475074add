//! Masked-token pretraining, the stand-in for a pre-trained checkpoint.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;

use super::EncoderParams;
use crate::corpus::LabeledDataset;
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig, ParamSet};
use crate::rng::{rng_from_seed, Rng};
use crate::scalar::Scalar;
use crate::tokenizer::{encode, TokenSequence, Vocabulary, MASK};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlmHyper {
    pub mask_prob: f64,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub weight_decay: f64,
    /// Encoding length used for pretraining sequences.
    pub max_len: usize,
}

impl Default for MlmHyper {
    fn default() -> Self {
        MlmHyper {
            mask_prob: 0.15,
            lr: 1e-3,
            batch: 32,
            epochs: 3,
            seed: 0,
            weight_decay: 0.01,
            max_len: crate::tokenizer::DEFAULT_MAX_LEN,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlmReport {
    /// Mean cross-entropy per masked token, per epoch.
    pub epoch_losses: Vec<f64>,
    pub masked_tokens: usize,
}

fn apply_mask(seq: &TokenSequence, prob: f64, rng: &mut Rng) -> (TokenSequence, Vec<(usize, u32)>) {
    let mut masked = seq.clone();
    let mut targets = Vec::new();
    for i in 0..seq.len() {
        if seq.mask[i] == 1 && rng.random_bool(prob) {
            targets.push((i, seq.ids[i]));
            masked.ids[i] = MASK;
        }
    }
    (masked, targets)
}

/// Cross-entropy summed over `targets`; accumulates gradients when `grads` is given.
fn mlm_loss_one<T: Scalar>(
    params: &EncoderParams<T>,
    input: &TokenSequence,
    targets: &[(usize, u32)],
    weight: T,
    grads: Option<&mut EncoderParams<T>>,
) -> Result<f64> {
    if targets.is_empty() {
        return Ok(0.0);
    }
    let (trace, caches) = params.forward_cached(input)?;
    let last = trace.last_hidden();
    let rows: Vec<usize> = targets.iter().map(|&(i, _)| i).collect();
    let h = last.select(Axis(0), &rows);
    let mut logits = h.dot(&params.mlm_w) + &params.mlm_b;
    let mut loss = 0.0;
    for (mut row, &(_, target)) in logits.rows_mut().into_iter().zip(targets) {
        let max = row.fold(T::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
        loss -= row[target as usize].as_f64().max(f64::MIN_POSITIVE).ln();
        // d(loss)/d(logits) = softmax - onehot
        row[target as usize] -= T::one();
        row.mapv_inplace(|v| v * weight);
    }
    if let Some(grads) = grads {
        let dlogits = logits;
        ndarray::linalg::general_mat_mul(T::one(), &h.t(), &dlogits, T::one(), &mut grads.mlm_w);
        grads.mlm_b += &dlogits.sum_axis(Axis(0));
        let dh = dlogits.dot(&params.mlm_w.t());
        let mut d_last = Array2::zeros(last.raw_dim());
        for (r, &i) in rows.iter().enumerate() {
            let mut dst = d_last.row_mut(i);
            dst += &dh.row(r);
        }
        params.backward(input, &trace, &caches, d_last, grads);
    }
    Ok(loss)
}

/// Mean masked-token cross-entropy with masks drawn from `seed`; no update.
pub fn mlm_eval_loss<T: Scalar>(params: &EncoderParams<T>, seqs: &[TokenSequence], mask_prob: f64, seed: u64) -> Result<f64> {
    let mut rng = rng_from_seed(seed);
    let mut total = 0.0;
    let mut count = 0;
    for seq in seqs {
        let (input, targets) = apply_mask(seq, mask_prob, &mut rng);
        total += mlm_loss_one(params, &input.real_prefix(), &targets, T::one(), None)?;
        count += targets.len();
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

pub fn pretrain_mlm<T: Scalar>(
    params: EncoderParams<T>,
    corpus: &LabeledDataset,
    vocab: &Vocabulary,
    hyper: &MlmHyper,
) -> Result<(EncoderParams<T>, MlmReport)> {
    let seqs = corpus
        .texts()
        .map(|t| encode(t, vocab, hyper.max_len))
        .collect::<Result<Vec<_>>>()?;
    pretrain_mlm_sequences(params, &seqs, hyper)
}

/// Masks each real token with probability `mask_prob` and trains the encoder
/// plus its prediction head to recover the original ids. Batches without a
/// single masked token are skipped.
pub fn pretrain_mlm_sequences<T: Scalar>(
    mut params: EncoderParams<T>,
    seqs: &[TokenSequence],
    hyper: &MlmHyper,
) -> Result<(EncoderParams<T>, MlmReport)> {
    if seqs.is_empty() {
        return Err(Error::invalid("pretraining corpus is empty"));
    }
    if seqs.iter().all(|s| s.real_len() < 2) {
        return Err(Error::invalid("every pretraining sequence is shorter than 2 tokens"));
    }
    if !(0.0..=1.0).contains(&hyper.mask_prob) || hyper.lr <= 0.0 || hyper.batch == 0 || hyper.epochs == 0 {
        return Err(Error::invalid(format!("invalid pretraining hyperparameters: {hyper:?}")));
    }
    let seqs: Vec<TokenSequence> = seqs.iter().map(TokenSequence::real_prefix).filter(|s| !s.is_empty()).collect();

    let mut rng = rng_from_seed(hyper.seed);
    let mut opt = Adam::new(AdamConfig::new(hyper.lr, hyper.weight_decay));
    let mut grads = params.zeros_like();
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut report = MlmReport {
        epoch_losses: Vec::with_capacity(hyper.epochs),
        masked_tokens: 0,
    };

    for _ in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_count = 0usize;
        for chunk in order.chunks(hyper.batch) {
            let batch: Vec<_> = chunk.iter().map(|&i| apply_mask(&seqs[i], hyper.mask_prob, &mut rng)).collect();
            let count: usize = batch.iter().map(|(_, t)| t.len()).sum();
            if count == 0 {
                continue;
            }
            grads.fill_zero();
            let weight = T::one() / T::of(count as f64);
            for (input, targets) in &batch {
                epoch_loss += mlm_loss_one(&params, input, targets, weight, Some(&mut grads))?;
            }
            epoch_count += count;
            opt.step(&mut params, &grads);
        }
        let mean = if epoch_count == 0 { 0.0 } else { epoch_loss / epoch_count as f64 };
        if !mean.is_finite() || !params.all_finite() {
            return Err(Error::Numeric(format!("masked-token loss diverged ({mean})")));
        }
        report.epoch_losses.push(mean);
        report.masked_tokens += epoch_count;
    }
    Ok((params, report))
}

#[cfg(test)]
pub(crate) fn mlm_loss_and_grad<T: Scalar>(
    params: &EncoderParams<T>,
    input: &TokenSequence,
    targets: &[(usize, u32)],
) -> Result<(f64, EncoderParams<T>)> {
    let mut grads = params.zeros_like();
    let loss = mlm_loss_one(params, input, targets, T::one(), Some(&mut grads))?;
    Ok((loss, grads))
}
