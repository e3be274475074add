//! Bag-of-words featurizer and L2-regularised logistic regression.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, ArrayViewD, ArrayViewMutD};
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::io::{Section, TensorData};
use crate::optim::ParamSet;
use crate::rng::{derive_seed, rng_from_seed};
use crate::scalar::{bce_with_logit, sigmoid, Scalar};
use crate::tokenizer::Vocabulary;

const SECTION_KIND: [u8; 4] = *b"LOGR";

/// Sparse token-id → count map. Word order is discarded.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BowVector {
    pub counts: BTreeMap<u32, u32>,
}

impl BowVector {
    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn max_key(&self) -> Option<u32> {
        self.counts.keys().next_back().copied()
    }

    pub fn to_dense<T: Scalar>(&self, dim: usize) -> Result<Array1<T>> {
        let mut v = Array1::zeros(dim);
        for (&k, &c) in &self.counts {
            if k as usize >= dim {
                return Err(Error::invalid(format!("bag-of-words key {k} outside dimension {dim}")));
            }
            v[k as usize] = T::of(c as f64);
        }
        Ok(v)
    }

    pub fn dot<T: Scalar>(&self, w: &Array1<T>) -> Result<T> {
        let mut acc = T::zero();
        for (&k, &c) in &self.counts {
            let wk = w
                .get(k as usize)
                .ok_or_else(|| Error::invalid(format!("bag-of-words key {k} outside dimension {}", w.len())))?;
            acc += *wk * T::of(c as f64);
        }
        Ok(acc)
    }
}

/// Counts vocabulary ids of the tweet's tokens; unknown words count under UNK.
pub fn bow_featurize(text: &str, vocab: &Vocabulary) -> BowVector {
    let mut counts = BTreeMap::new();
    for id in vocab.ids(text) {
        *counts.entry(id).or_insert(0) += 1;
    }
    BowVector { counts }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRegParams<T> {
    pub weights: Array1<T>,
    /// Length-1 so the bias participates in [`ParamSet`].
    pub bias: Array1<T>,
}

impl<T: Scalar> ParamSet<T> for LogRegParams<T> {
    fn tensors(&self) -> Vec<ArrayViewD<'_, T>> {
        vec![self.weights.view().into_dyn(), self.bias.view().into_dyn()]
    }

    fn tensors_mut(&mut self) -> Vec<ArrayViewMutD<'_, T>> {
        vec![self.weights.view_mut().into_dyn(), self.bias.view_mut().into_dyn()]
    }
}

impl<T: Scalar> LogRegParams<T> {
    pub fn zeros(dim: usize) -> Self {
        LogRegParams {
            weights: Array1::zeros(dim),
            bias: Array1::zeros(1),
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn logit(&self, x: &BowVector) -> Result<T> {
        Ok(x.dot(&self.weights)? + self.bias[0])
    }

    pub fn weight_norm(&self) -> f64 {
        self.weights.iter().map(|w| w.as_f64().powi(2)).sum::<f64>().sqrt()
    }

    pub fn to_section(&self) -> Section {
        let mut s = Section::new(SECTION_KIND);
        s.config = vec![self.dim() as u64];
        s.tensors = self.tensors().into_iter().map(TensorData::from_view).collect();
        s
    }

    pub fn from_section(section: &Section) -> Result<Self> {
        section.expect_kind(SECTION_KIND)?;
        let mut p = Self::zeros(section.config_at(0)? as usize);
        crate::encoder::load_tensors(&mut p, &section.tensors)?;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_section().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_section(&Section::load(path)?)
    }
}

/// Sigmoid of the sparse dot product plus bias.
pub fn predict_logreg<T: Scalar>(params: &LogRegParams<T>, x: &BowVector) -> Result<T> {
    Ok(sigmoid(params.logit(x)?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRegHyper {
    pub lr: f64,
    pub epochs: usize,
    pub l2: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for LogRegHyper {
    fn default() -> Self {
        LogRegHyper {
            lr: 0.5,
            epochs: 20,
            l2: 1e-4,
            batch: 64,
            seed: 0,
        }
    }
}

impl LogRegHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("logreg lr must be positive, got {}", self.lr)));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::invalid(format!("logreg l2 must be >= 0, got {}", self.l2)));
        }
        if self.batch == 0 || self.epochs == 0 {
            return Err(Error::invalid("logreg batch and epochs must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRegFit<T> {
    pub params: LogRegParams<T>,
    pub epoch_losses: Vec<f64>,
    /// Set when every training label is the same.
    pub warning: Option<String>,
}

/// Mean BCE over `rows` plus `l2/2 ‖w‖²`. Fills `grads` when given.
pub fn logreg_loss_and_grad<T: Scalar>(
    params: &LogRegParams<T>,
    x: &[BowVector],
    y: &[u8],
    rows: &[usize],
    l2: f64,
    grads: Option<&mut LogRegParams<T>>,
) -> Result<f64> {
    let inv_n = 1.0 / rows.len() as f64;
    let mut loss = 0.0;
    let mut g = grads;
    if let Some(g) = g.as_deref_mut() {
        g.fill_zero();
    }
    for &r in rows {
        let z = params.logit(&x[r])?;
        let target = T::of(f64::from(y[r]));
        loss += bce_with_logit(z, target).as_f64();
        if let Some(g) = g.as_deref_mut() {
            let dz = (sigmoid(z) - target) * T::of(inv_n);
            for (&k, &c) in &x[r].counts {
                g.weights[k as usize] += dz * T::of(c as f64);
            }
            g.bias[0] += dz;
        }
    }
    loss *= inv_n;
    loss += 0.5 * l2 * params.weights.iter().map(|w| w.as_f64().powi(2)).sum::<f64>();
    if let Some(g) = g {
        g.weights.scaled_add(T::of(l2), &params.weights);
    }
    Ok(loss)
}

/// Mini-batch gradient descent from zero weights. Shuffling is seeded.
pub fn train_logreg<T: Scalar>(x: &[BowVector], y: &[u8], dim: usize, hyper: &LogRegHyper) -> Result<LogRegFit<T>> {
    hyper.validate()?;
    if x.is_empty() {
        return Err(Error::invalid("logistic regression needs at least one example"));
    }
    if x.len() != y.len() {
        return Err(Error::Dimension {
            expected: x.len(),
            got: y.len(),
        });
    }
    crate::classifier::check_labels(y)?;
    if let Some(k) = x.iter().filter_map(BowVector::max_key).max() {
        if k as usize >= dim {
            return Err(Error::invalid(format!("bag-of-words key {k} outside dimension {dim}")));
        }
    }
    let warning = if y.iter().all(|&l| l == y[0]) {
        Some(format!("all {} training labels are {}", y.len(), y[0]))
    } else {
        None
    };

    let mut params = LogRegParams::<T>::zeros(dim);
    let mut grads = params.zeros_like();
    let mut rng = rng_from_seed(derive_seed(hyper.seed, "logreg-shuffle"));
    let mut order: Vec<usize> = (0..x.len()).collect();
    let batch = hyper.batch.min(x.len());
    let mut epoch_losses = Vec::with_capacity(hyper.epochs);
    for _ in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for rows in order.chunks(batch) {
            let loss = logreg_loss_and_grad(&params, x, y, rows, hyper.l2, Some(&mut grads))?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("logistic regression loss became {loss}")));
            }
            total += loss * rows.len() as f64;
            params.weights.scaled_add(T::of(-hyper.lr), &grads.weights);
            params.bias.scaled_add(T::of(-hyper.lr), &grads.bias);
        }
        epoch_losses.push(total / x.len() as f64);
    }
    Ok(LogRegFit {
        params,
        epoch_losses,
        warning,
    })
}

/// Worst finite-difference relative error of the full-batch loss gradient.
pub fn logreg_gradient_check(params: &LogRegParams<f64>, x: &[BowVector], y: &[u8], l2: f64) -> Result<f64> {
    let rows: Vec<usize> = (0..x.len()).collect();
    let mut analytic = params.zeros_like();
    logreg_loss_and_grad(params, x, y, &rows, l2, Some(&mut analytic))?;
    Ok(crate::gradcheck::max_relative_error(
        params,
        &analytic,
        |p| logreg_loss_and_grad(p, x, y, &rows, l2, None).expect("keys checked"),
        crate::gradcheck::FD_STEP,
    ))
}

/// Fraction of `x` whose thresholded probability matches `y`.
pub fn logreg_accuracy<T: Scalar>(params: &LogRegParams<T>, x: &[BowVector], y: &[u8]) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let mut correct = 0usize;
    for (v, &l) in x.iter().zip(y) {
        let p = predict_logreg(params, v)?.as_f64();
        correct += usize::from(u8::from(p > 0.5) == l);
    }
    Ok(correct as f64 / x.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, train_test_split, SyntheticLexicon};
    use proptest::prelude::*;

    fn vocab() -> Vocabulary {
        Vocabulary::from_texts(["good good bad meh", "bad ok"], 100).unwrap()
    }

    fn bow(pairs: &[(u32, u32)]) -> BowVector {
        BowVector {
            counts: pairs.iter().copied().collect(),
        }
    }

    #[test]
    fn featurize_counts_words() {
        let v = vocab();
        let b = bow_featurize("good good bad", &v);
        assert_eq!(b.counts.len(), 2);
        assert_eq!(b.counts[&v.id("good")], 2);
        assert_eq!(b.counts[&v.id("bad")], 1);
        assert!(bow_featurize("", &v).is_empty());
        let unk = bow_featurize("zzz yyy good", &v);
        assert_eq!(unk.counts[&crate::tokenizer::UNK], 2);
    }

    #[test]
    fn predict_examples() {
        let zero = LogRegParams::<f64>::zeros(5);
        assert_eq!(predict_logreg(&zero, &bow(&[(1, 3)])).unwrap(), 0.5);

        let mut p = LogRegParams::<f64>::zeros(5);
        p.weights[3] = 0.7;
        p.bias[0] = -0.2;
        assert_eq!(predict_logreg(&p, &BowVector::default()).unwrap(), sigmoid(-0.2));
        let one = p.logit(&bow(&[(3, 1)])).unwrap() - p.bias[0];
        let two = p.logit(&bow(&[(3, 2)])).unwrap() - p.bias[0];
        assert!((two - 2.0 * one).abs() < 1e-15);
        assert!(predict_logreg(&p, &bow(&[(5, 1)])).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let x = vec![bow(&[(0, 1), (2, 3)]), bow(&[(1, 2)]), bow(&[(0, 2), (1, 1), (3, 1)]), bow(&[])];
        let y = [1, 0, 1, 0];
        let p = LogRegParams {
            weights: Array1::from(vec![0.3, -0.2, 0.1, 0.5]),
            bias: Array1::from(vec![-0.1]),
        };
        for l2 in [0.0, 0.1, 2.0] {
            let err = logreg_gradient_check(&p, &x, &y, l2).unwrap();
            assert!(err <= 1e-6, "l2={l2} err={err}");
        }
    }

    #[test]
    fn separable_single_feature() {
        let x: Vec<BowVector> = (0..40).map(|i| bow(&[(i % 2, 1)])).collect();
        let y: Vec<u8> = (0..40).map(|i| (i % 2) as u8).collect();
        let hyper = LogRegHyper {
            lr: 0.5,
            epochs: 50,
            l2: 0.0,
            batch: 8,
            seed: 3,
        };
        let fit = train_logreg::<f64>(&x, &y, 2, &hyper).unwrap();
        assert!(fit.warning.is_none());
        assert_eq!(logreg_accuracy(&fit.params, &x, &y).unwrap(), 1.0);
        assert!(fit.epoch_losses.last() < fit.epoch_losses.first());
    }

    #[test]
    fn shrinkage_is_monotone() {
        let x: Vec<BowVector> = (0..60).map(|i| bow(&[(i % 3, 1 + i % 2), (3, 1)])).collect();
        let y: Vec<u8> = (0..60).map(|i| u8::from(i % 3 == 0)).collect();
        let norms: Vec<f64> = [0.1, 1.0, 10.0]
            .iter()
            .map(|&l2| {
                let hyper = LogRegHyper {
                    lr: 0.05,
                    epochs: 200,
                    l2,
                    batch: 60,
                    seed: 0,
                };
                train_logreg::<f64>(&x, &y, 4, &hyper).unwrap().params.weight_norm()
            })
            .collect();
        assert!(norms[0] > norms[1] && norms[1] > norms[2], "{norms:?}");
    }

    #[test]
    fn single_class_flags_warning() {
        let x = vec![bow(&[(0, 1)]), bow(&[(1, 1)])];
        let fit = train_logreg::<f32>(&x, &[1, 1], 2, &LogRegHyper::default()).unwrap();
        assert!(fit.warning.is_some());
        assert!(train_logreg::<f32>(&[], &[], 2, &LogRegHyper::default()).is_err());
        assert!(train_logreg::<f32>(&x, &[0, 1], 1, &LogRegHyper::default()).is_err());
    }

    #[test]
    fn deterministic_and_round_trips() {
        let x: Vec<BowVector> = (0..30).map(|i| bow(&[(i % 5, 1)])).collect();
        let y: Vec<u8> = (0..30).map(|i| u8::from(i % 5 < 2)).collect();
        let a = train_logreg::<f32>(&x, &y, 5, &LogRegHyper::default()).unwrap();
        let b = train_logreg::<f32>(&x, &y, 5, &LogRegHyper::default()).unwrap();
        assert_eq!(a, b);
        let back = LogRegParams::<f32>::from_section(&Section::from_bytes(&a.params.to_section().to_bytes()).unwrap()).unwrap();
        assert_eq!(back, a.params);
    }

    #[test]
    fn synthetic_corpus_is_learnable() {
        let data = generate_synthetic(2000, 200, 1).unwrap();
        let lex = SyntheticLexicon::new(200, 1).unwrap();
        let ceiling = data
            .tweets()
            .iter()
            .filter(|t| u8::from(lex.score(&t.text) > 0) == t.label.unwrap())
            .count() as f64
            / data.len() as f64;
        assert_eq!(ceiling, 1.0);

        let vocab = Vocabulary::build(&data, 1000).unwrap();
        let x: Vec<BowVector> = data.texts().map(|t| bow_featurize(t, &vocab)).collect();
        let y = data.labels();
        let (train, test) = train_test_split(data.len(), 0.2, 1).unwrap();
        let xt: Vec<BowVector> = train.iter().map(|&i| x[i].clone()).collect();
        let yt: Vec<u8> = train.iter().map(|&i| y[i]).collect();
        let fit = train_logreg::<f32>(&xt, &yt, vocab.len(), &LogRegHyper::default()).unwrap();
        let xe: Vec<BowVector> = test.iter().map(|&i| x[i].clone()).collect();
        let ye: Vec<u8> = test.iter().map(|&i| y[i]).collect();
        let acc = logreg_accuracy(&fit.params, &xe, &ye).unwrap();
        assert!(acc >= 0.85, "held-out accuracy {acc}");
    }

    proptest! {
        #[test]
        fn sparse_dot_equals_dense(pairs in proptest::collection::btree_map(0u32..20, 1u32..5, 0..10),
                                   w in proptest::collection::vec(-2.0f64..2.0, 20)) {
            let x = BowVector { counts: pairs };
            let w = Array1::from(w);
            let sparse = x.dot(&w).unwrap();
            let dense = x.to_dense::<f64>(20).unwrap().dot(&w);
            prop_assert!((sparse - dense).abs() < 1e-12);
        }

        #[test]
        fn order_invariant(words in proptest::collection::vec(prop::sample::select(vec!["good", "bad", "meh", "ok", "zzz"]), 0..12),
                           seed in any::<u64>()) {
            let v = vocab();
            let mut shuffled = words.clone();
            shuffled.shuffle(&mut rng_from_seed(seed));
            prop_assert_eq!(bow_featurize(&words.join(" "), &v), bow_featurize(&shuffled.join(" "), &v));
        }
    }
}
