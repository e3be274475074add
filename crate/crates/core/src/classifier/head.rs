use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};

use super::{EpochLog, TrainHyper};
use crate::corpus::LabeledDataset;
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::io::{Section, TensorData};
use crate::optim::{Adam, AdamConfig, ParamSet};
use crate::rng::{derive_seed, rng_from_seed};
use crate::scalar::{bce_with_logit, sigmoid, Scalar};
use crate::tokenizer::{encode, TokenSequence, Vocabulary};

const SECTION_KIND: [u8; 4] = *b"HEAD";

/// Linear map from the mean-pooled last hidden layer to one logit.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<T> {
    pub w: Array1<T>,
    /// Length-1 so the bias participates in [`ParamSet`] like any tensor.
    pub b: Array1<T>,
}

impl<T: Scalar> HeadParams<T> {
    pub fn zeros(hidden: usize) -> Self {
        HeadParams {
            w: Array1::zeros(hidden),
            b: Array1::zeros(1),
        }
    }

    pub fn init(hidden: usize, seed: u64) -> Self {
        let dist = Normal::new(0.0, 1.0 / (hidden as f64).sqrt()).expect("valid std");
        let mut rng = rng_from_seed(seed);
        HeadParams {
            w: (0..hidden).map(|_| T::of(dist.sample(&mut rng))).collect(),
            b: Array1::zeros(1),
        }
    }

    pub fn logit(&self, pooled: &Array1<T>) -> T {
        pooled.dot(&self.w) + self.b[0]
    }

    pub fn to_section(&self) -> Section {
        let mut s = Section::new(SECTION_KIND);
        s.config = vec![self.w.len() as u64];
        s.tensors = self.tensors().into_iter().map(TensorData::from_view).collect();
        s
    }

    pub fn from_section(section: &Section) -> Result<Self> {
        section.expect_kind(SECTION_KIND)?;
        let mut head = Self::zeros(section.config_at(0)? as usize);
        crate::encoder::load_tensors(&mut head, &section.tensors)?;
        Ok(head)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_section().save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_section(&Section::load(path)?)
    }
}

impl<T: Scalar> ParamSet<T> for HeadParams<T> {
    fn tensors(&self) -> Vec<ArrayViewD<'_, T>> {
        vec![self.w.view().into_dyn(), self.b.view().into_dyn()]
    }

    fn tensors_mut(&mut self) -> Vec<ArrayViewMutD<'_, T>> {
        vec![self.w.view_mut().into_dyn(), self.b.view_mut().into_dyn()]
    }
}

/// Encoder and head trained together.
#[derive(Debug, Clone, PartialEq)]
pub struct Joint<T> {
    pub encoder: EncoderParams<T>,
    pub head: HeadParams<T>,
}

impl<T: Scalar> ParamSet<T> for Joint<T> {
    fn tensors(&self) -> Vec<ArrayViewD<'_, T>> {
        let mut t = self.encoder.tensors();
        t.extend(self.head.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<ArrayViewMutD<'_, T>> {
        let mut t = self.encoder.tensors_mut();
        t.extend(self.head.tensors_mut());
        t
    }
}

/// Probability from the built-in head: mean-pool the last hidden layer over
/// real tokens of the padded encoding, apply the head, squash.
pub fn builtin_classify<T: Scalar>(
    encoder: &EncoderParams<T>,
    head: &HeadParams<T>,
    text: &str,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<T> {
    let seq = encode(text, vocab, max_len)?.real_prefix();
    let trace = encoder.forward(&seq)?;
    if head.w.len() != encoder.config.hidden {
        return Err(Error::Dimension {
            expected: encoder.config.hidden,
            got: head.w.len(),
        });
    }
    Ok(sigmoid(head.logit(&encoder.pooled_last(&trace, &seq.mask))))
}

/// Mean BCE of the built-in head over a batch of unpadded sequences. When
/// `grads` is given, accumulates the gradient for head and encoder; returns
/// (loss, correct predictions).
pub fn finetune_loss_and_grad<T: Scalar>(
    params: &Joint<T>,
    seqs: &[TokenSequence],
    labels: &[u8],
    mut grads: Option<&mut Joint<T>>,
) -> Result<(f64, usize)> {
    let n = T::of(seqs.len() as f64);
    let mut loss = 0.0;
    let mut correct = 0;
    for (seq, &label) in seqs.iter().zip(labels) {
        let (trace, caches) = params.encoder.forward_cached(seq)?;
        let pooled = params.encoder.pooled_last(&trace, &seq.mask);
        let z = params.head.logit(&pooled);
        let y = T::of(f64::from(label));
        loss += bce_with_logit(z, y).as_f64();
        correct += usize::from(u8::from(z > T::zero()) == label);
        if let Some(g) = grads.as_deref_mut() {
            let dz = (sigmoid(z) - y) / n;
            g.head.w.scaled_add(dz, &pooled);
            g.head.b[0] += dz;
            let real = T::of(seq.real_len() as f64);
            let d_row = &params.head.w * (dz / real);
            let mut d_last = Array2::zeros(trace.last_hidden().raw_dim());
            for (mut row, &m) in d_last.rows_mut().into_iter().zip(&seq.mask) {
                if m == 1 {
                    row.assign(&d_row);
                }
            }
            params.encoder.backward(seq, &trace, &caches, d_last, &mut g.encoder);
        }
    }
    Ok((loss / seqs.len().max(1) as f64, correct))
}

/// Worst relative error of the fine-tuning gradient against central differences.
pub fn encoder_gradient_check(
    encoder: &EncoderParams<f64>,
    head: &HeadParams<f64>,
    seqs: &[TokenSequence],
    labels: &[u8],
) -> Result<f64> {
    let params = Joint {
        encoder: encoder.clone(),
        head: head.clone(),
    };
    let mut grads = params.zeros_like();
    finetune_loss_and_grad(&params, seqs, labels, Some(&mut grads))?;
    Ok(crate::gradcheck::max_relative_error(
        &params,
        &grads,
        |p| finetune_loss_and_grad(p, seqs, labels, None).expect("valid batch").0,
        crate::gradcheck::FD_STEP,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FineTuneHyper {
    pub train: TrainHyper,
    pub max_len: usize,
    /// Train only the head and leave the encoder as is.
    pub freeze_encoder: bool,
}

impl Default for FineTuneHyper {
    fn default() -> Self {
        FineTuneHyper {
            train: TrainHyper::finetune_defaults(),
            max_len: crate::tokenizer::DEFAULT_MAX_LEN,
            freeze_encoder: false,
        }
    }
}

/// Joint AdamW training of the head and every encoder parameter on BCE.
pub fn fine_tune<T: Scalar>(
    encoder: EncoderParams<T>,
    head: HeadParams<T>,
    data: &LabeledDataset,
    vocab: &Vocabulary,
    hyper: &FineTuneHyper,
) -> Result<(EncoderParams<T>, HeadParams<T>, Vec<EpochLog>)> {
    hyper.train.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("fine-tuning set is empty"));
    }
    if head.w.len() != encoder.config.hidden {
        return Err(Error::Dimension {
            expected: encoder.config.hidden,
            got: head.w.len(),
        });
    }
    let seqs = data
        .texts()
        .map(|t| encode(t, vocab, hyper.max_len).map(|s| s.real_prefix()))
        .collect::<Result<Vec<_>>>()?;
    let labels = data.labels();

    let mut params = Joint { encoder, head };
    let mut grads = params.zeros_like();
    let adam = AdamConfig::new(hyper.train.lr, hyper.train.weight_decay);
    let mut joint_opt = Adam::new(adam);
    let mut head_opt = Adam::new(adam);
    let mut rng = rng_from_seed(derive_seed(hyper.train.seed, "finetune-shuffle"));
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut log = Vec::with_capacity(hyper.train.epochs);

    for epoch in 1..=hyper.train.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut correct = 0;
        for idx in order.chunks(hyper.train.batch) {
            let bs: Vec<TokenSequence> = idx.iter().map(|&i| seqs[i].clone()).collect();
            let bl: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
            grads.fill_zero();
            let (loss, hits) = finetune_loss_and_grad(&params, &bs, &bl, Some(&mut grads))?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("fine-tuning loss is {loss} at epoch {epoch}")));
            }
            total += loss * idx.len() as f64;
            correct += hits;
            if hyper.freeze_encoder {
                head_opt.step(&mut params.head, &grads.head);
            } else {
                joint_opt.step(&mut params, &grads);
            }
        }
        log.push(EpochLog {
            epoch,
            loss: total / seqs.len() as f64,
            train_acc: correct as f64 / seqs.len() as f64,
            val_acc: None,
        });
    }
    Ok((params.encoder, params.head, log))
}
