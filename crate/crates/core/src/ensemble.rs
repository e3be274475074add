//! k-fold majority-vote ensemble: model i is trained on every fold except
//! fold i, and the final label is the most common thresholded vote.

use ndarray::{ArrayView1, ArrayView2, Axis};

use crate::classifier::{train_mlp, EpochLog, MlpParams, TrainHyper};
use crate::corpus::FoldAssignment;
use crate::error::{Error, Result};
use crate::io::Section;
use crate::scalar::Scalar;

const SECTION_KIND: [u8; 4] = *b"ENSM";
/// Predict positive iff the probability is strictly above this.
pub const THRESHOLD: f64 = 0.5;

/// Thresholds each probability to a vote and returns the most common vote.
/// An even split goes to the mean probability against the threshold.
pub fn majority_vote(probs: &[f64], threshold: f64) -> u8 {
    let ones = probs.iter().filter(|&&p| p > threshold).count();
    let zeros = probs.len() - ones;
    match ones.cmp(&zeros) {
        std::cmp::Ordering::Greater => 1,
        std::cmp::Ordering::Less => 0,
        std::cmp::Ordering::Equal => {
            let mean = probs.iter().sum::<f64>() / probs.len().max(1) as f64;
            u8::from(mean > threshold)
        }
    }
}

/// Anything that maps embedding rows to binary labels.
pub trait Predictor<T: Scalar> {
    fn d_in(&self) -> usize;

    /// Positive-class score per row; for ensembles, the mean member probability.
    fn predict_proba(&self, x: ArrayView2<'_, T>) -> Result<Vec<f64>>;

    fn predict_labels(&self, x: ArrayView2<'_, T>) -> Result<Vec<u8>> {
        Ok(self
            .predict_proba(x)?
            .into_iter()
            .map(|p| u8::from(p > THRESHOLD))
            .collect())
    }

    fn predict_one(&self, x: ArrayView1<'_, T>) -> Result<(u8, f64)> {
        let row = x.insert_axis(Axis(0));
        Ok((self.predict_labels(row)?[0], self.predict_proba(row)?[0]))
    }
}

impl<T: Scalar> Predictor<T> for MlpParams<T> {
    fn d_in(&self) -> usize {
        MlpParams::d_in(self)
    }

    fn predict_proba(&self, x: ArrayView2<'_, T>) -> Result<Vec<f64>> {
        Ok(self.predict_batch(x)?.iter().map(|p| p.as_f64()).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble<T> {
    pub models: Vec<MlpParams<T>>,
    pub folds: FoldAssignment,
    /// Identifies the feature configuration the models were trained on.
    pub feature_fingerprint: String,
}

impl<T: Scalar> Ensemble<T> {
    pub fn k(&self) -> usize {
        self.models.len()
    }

    /// Rows model `i` was trained on.
    pub fn training_indices(&self, i: usize) -> Vec<usize> {
        self.folds.complement(i)
    }

    fn member_probs(&self, x: ArrayView2<'_, T>) -> Result<Vec<Vec<f64>>> {
        self.models.iter().map(|m| m.predict_proba(x)).collect()
    }

    pub fn to_section(&self) -> Section {
        let mut s = Section::new(SECTION_KIND);
        s.meta = self.feature_fingerprint.clone();
        s.config = [self.folds.k as u64, self.folds.len() as u64]
            .into_iter()
            .chain(self.folds.fold_of.iter().map(|&f| f as u64))
            .collect();
        s.children = self.models.iter().map(MlpParams::to_section).collect();
        s
    }

    pub fn from_section(section: &Section) -> Result<Self> {
        section.expect_kind(SECTION_KIND)?;
        let k = section.config_at(0)? as usize;
        let n = section.config_at(1)? as usize;
        if section.config.len() != n + 2 {
            return Err(Error::Format("ensemble fold table length mismatch".into()));
        }
        let fold_of: Vec<usize> = section.config[2..].iter().map(|&f| f as usize).collect();
        if fold_of.iter().any(|&f| f >= k) {
            return Err(Error::Format("fold id out of range".into()));
        }
        let models = section
            .children
            .iter()
            .map(MlpParams::from_section)
            .collect::<Result<Vec<_>>>()?;
        if models.len() != k {
            return Err(Error::Format(format!("ensemble declares {k} folds but holds {} models", models.len())));
        }
        Ok(Ensemble {
            models,
            folds: FoldAssignment { k, fold_of },
            feature_fingerprint: section.meta.clone(),
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_section().save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_section(&Section::load(path)?)
    }
}

impl<T: Scalar> Predictor<T> for Ensemble<T> {
    fn d_in(&self) -> usize {
        self.models[0].d_in()
    }

    fn predict_proba(&self, x: ArrayView2<'_, T>) -> Result<Vec<f64>> {
        let probs = self.member_probs(x)?;
        Ok((0..x.nrows())
            .map(|r| probs.iter().map(|p| p[r]).sum::<f64>() / self.k() as f64)
            .collect())
    }

    fn predict_labels(&self, x: ArrayView2<'_, T>) -> Result<Vec<u8>> {
        let probs = self.member_probs(x)?;
        Ok((0..x.nrows())
            .map(|r| {
                let votes: Vec<f64> = probs.iter().map(|p| p[r]).collect();
                majority_vote(&votes, THRESHOLD)
            })
            .collect())
    }
}

/// Width and dropout shared by every ensemble member.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemberSpec {
    pub width: usize,
    pub dropout: f64,
}

/// Trains one MLP per fold on the complement of that fold. Member `i` is
/// initialised and trained with seed `hyper.seed + i`.
pub fn train_ensemble<T: Scalar>(
    x: ArrayView2<'_, T>,
    y: &[u8],
    folds: &FoldAssignment,
    spec: MemberSpec,
    hyper: &TrainHyper,
    feature_fingerprint: &str,
) -> Result<(Ensemble<T>, Vec<Vec<EpochLog>>)> {
    if folds.k < 2 {
        return Err(Error::invalid(format!("ensemble needs k >= 2 folds, got {}", folds.k)));
    }
    if folds.len() != x.nrows() || y.len() != x.nrows() {
        return Err(Error::Dimension {
            expected: x.nrows(),
            got: folds.len(),
        });
    }
    let mut models = Vec::with_capacity(folds.k);
    let mut logs = Vec::with_capacity(folds.k);
    for i in 0..folds.k {
        let seed = hyper.seed.wrapping_add(i as u64);
        let rows = folds.complement(i);
        let xi = x.select(Axis(0), &rows);
        let yi: Vec<u8> = rows.iter().map(|&r| y[r]).collect();
        let init = MlpParams::init(x.ncols(), spec.width, spec.dropout, seed)?;
        let (model, log) = train_mlp(init, xi.view(), &yi, &TrainHyper { seed, ..*hyper }, None)?;
        models.push(model);
        logs.push(log);
    }
    Ok((
        Ensemble {
            models,
            folds: folds.clone(),
            feature_fingerprint: feature_fingerprint.to_string(),
        },
        logs,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub true_pos: usize,
    pub true_neg: usize,
    pub false_pos: usize,
    pub false_neg: usize,
}

impl Evaluation {
    pub fn from_labels(predicted: &[u8], actual: &[u8]) -> Result<Self> {
        if actual.is_empty() {
            return Err(Error::invalid("evaluation set is empty"));
        }
        if predicted.len() != actual.len() {
            return Err(Error::Dimension {
                expected: actual.len(),
                got: predicted.len(),
            });
        }
        let mut e = Evaluation {
            accuracy: 0.0,
            true_pos: 0,
            true_neg: 0,
            false_pos: 0,
            false_neg: 0,
        };
        for (&p, &a) in predicted.iter().zip(actual) {
            match (p, a) {
                (1, 1) => e.true_pos += 1,
                (0, 0) => e.true_neg += 1,
                (1, 0) => e.false_pos += 1,
                (0, 1) => e.false_neg += 1,
                _ => return Err(Error::invalid(format!("non-binary label pair ({p}, {a})"))),
            }
        }
        e.accuracy = (e.true_pos + e.true_neg) as f64 / actual.len() as f64;
        Ok(e)
    }
}

pub fn evaluate<T: Scalar, P: Predictor<T> + ?Sized>(predictor: &P, x: ArrayView2<'_, T>, y: &[u8]) -> Result<Evaluation> {
    if x.nrows() != y.len() {
        return Err(Error::Dimension {
            expected: x.nrows(),
            got: y.len(),
        });
    }
    if y.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    Evaluation::from_labels(&predictor.predict_labels(x)?, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::split_folds;
    use ndarray::Array2;
    use proptest::prelude::*;

    #[test]
    fn vote_examples() {
        assert_eq!(majority_vote(&[0.9, 0.8, 0.2, 0.1, 0.7], 0.5), 1);
        assert_eq!(majority_vote(&[0.4; 5], 0.5), 0);
        assert_eq!(majority_vote(&[0.9, 0.9, 0.2, 0.2], 0.5), 1);
        assert_eq!(majority_vote(&[0.6, 0.6, 0.1, 0.1], 0.5), 0);
        assert_eq!(majority_vote(&[0.5], 0.5), 0);
    }

    /// Mode by counting every distinct vote value.
    fn brute_mode(votes: &[u8], probs: &[f64]) -> u8 {
        let mut counts = [0usize; 2];
        for &v in votes {
            counts[v as usize] += 1;
        }
        if counts[0] != counts[1] {
            return if counts[1] > counts[0] { 1 } else { 0 };
        }
        u8::from(probs.iter().sum::<f64>() / probs.len() as f64 > 0.5)
    }

    #[test]
    fn vote_matches_exhaustive_mode() {
        for k in 1..=9usize {
            for pattern in 0u32..(1 << k) {
                let probs: Vec<f64> = (0..k).map(|i| if pattern >> i & 1 == 1 { 0.8 } else { 0.3 }).collect();
                let votes: Vec<u8> = probs.iter().map(|&p| u8::from(p > 0.5)).collect();
                assert_eq!(majority_vote(&probs, 0.5), brute_mode(&votes, &probs), "k={k} {pattern:b}");
                if k % 2 == 1 {
                    let ones = votes.iter().filter(|&&v| v == 1).count();
                    assert_ne!(2 * ones, k);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn unanimous_votes_agree_with_members(k in 1usize..10, high in any::<bool>(), probs in proptest::collection::vec(0.0f64..0.5, 9)) {
            let probs: Vec<f64> = probs[..k].iter().map(|&p| if high { 1.0 - p } else { p }).collect();
            let expected = u8::from(probs[0] > 0.5);
            prop_assert_eq!(majority_vote(&probs, 0.5), expected);
        }

        #[test]
        fn odd_k_never_ties(k in (0usize..5).prop_map(|i| 2 * i + 1), probs in proptest::collection::vec(0.0f64..=1.0, 9)) {
            let ones = probs[..k].iter().filter(|&&p| p > 0.5).count();
            prop_assert_ne!(2 * ones, k);
        }
    }

    struct Constant(f64);

    impl Predictor<f32> for Constant {
        fn d_in(&self) -> usize {
            1
        }
        fn predict_proba(&self, x: ArrayView2<'_, f32>) -> Result<Vec<f64>> {
            Ok(vec![self.0; x.nrows()])
        }
    }

    #[test]
    fn evaluation_counts() {
        let e = Evaluation::from_labels(&[1, 0, 1, 1], &[1, 0, 0, 1]).unwrap();
        assert_eq!(e.accuracy, 0.75);
        assert_eq!((e.true_pos, e.true_neg, e.false_pos, e.false_neg), (2, 1, 1, 0));
        assert_eq!(Evaluation::from_labels(&[1, 0], &[1, 0]).unwrap().accuracy, 1.0);
        assert!(Evaluation::from_labels(&[], &[]).is_err());
    }

    #[test]
    fn half_probability_predicts_negative() {
        let x = Array2::<f32>::zeros((5, 1));
        let e = evaluate(&Constant(0.5), x.view(), &[0, 0, 1, 0, 1]).unwrap();
        assert_eq!(e.accuracy, 0.6);
    }

    fn toy_data(n: usize) -> (Array2<f32>, Vec<u8>) {
        let x = Array2::from_shape_fn((n, 3), |(i, j)| ((i * 7 + j * 3) % 11) as f32 / 11.0 - 0.5);
        let y = x.rows().into_iter().map(|r| u8::from(r[0] - r[2] > 0.0)).collect();
        (x, y)
    }

    #[test]
    fn ensemble_training_sets_and_determinism() {
        let (x, y) = toy_data(100);
        let folds = split_folds(100, 5, 3).unwrap();
        let hyper = TrainHyper {
            lr: 1e-2,
            batch: 16,
            epochs: 3,
            seed: 10,
            weight_decay: 0.0,
        };
        let spec = MemberSpec { width: 8, dropout: 0.2 };
        let (ens, logs) = train_ensemble(x.view(), &y, &folds, spec, &hyper, "fp").unwrap();
        assert_eq!(ens.k(), 5);
        assert_eq!(logs.len(), 5);
        for i in 0..5 {
            let train = ens.training_indices(i);
            assert_eq!(train.len(), 80);
            let dropped = folds.fold_indices(i);
            assert!(train.iter().all(|r| !dropped.contains(r)));
            assert_eq!(train.len() + dropped.len(), 100);
        }
        // member 2 equals a standalone model with seed + 2
        let rows = folds.complement(2);
        let init = MlpParams::init(3, 8, 0.2, 12).unwrap();
        let xi = x.select(Axis(0), &rows);
        let yi: Vec<u8> = rows.iter().map(|&r| y[r]).collect();
        let (solo, _) = train_mlp(init, xi.view(), &yi, &TrainHyper { seed: 12, ..hyper }, None).unwrap();
        assert_eq!(solo, ens.models[2]);

        let (again, _) = train_ensemble(x.view(), &y, &folds, spec, &hyper, "fp").unwrap();
        assert_eq!(ens, again);

        let back = Ensemble::<f32>::from_section(&Section::from_bytes(&ens.to_section().to_bytes()).unwrap()).unwrap();
        assert_eq!(back, ens);
        assert_eq!(back.predict_labels(x.view()).unwrap(), ens.predict_labels(x.view()).unwrap());
    }

    #[test]
    fn ensemble_vote_uses_members() {
        let (x, y) = toy_data(40);
        let folds = split_folds(40, 3, 1).unwrap();
        let hyper = TrainHyper {
            lr: 1e-2,
            batch: 8,
            epochs: 2,
            seed: 4,
            weight_decay: 0.0,
        };
        let (ens, _) = train_ensemble(x.view(), &y, &folds, MemberSpec { width: 6, dropout: 0.0 }, &hyper, "").unwrap();
        let labels = ens.predict_labels(x.view()).unwrap();
        for (r, &label) in labels.iter().enumerate() {
            let probs: Vec<f64> = ens
                .models
                .iter()
                .map(|m| m.predict_proba(x.slice(ndarray::s![r..r + 1, ..])).unwrap()[0])
                .collect();
            assert_eq!(label, majority_vote(&probs, 0.5));
        }
        assert!(evaluate(&ens, x.view(), &y).unwrap().accuracy > 0.0);
        let bad = FoldAssignment { k: 1, fold_of: vec![0; 40] };
        assert!(train_ensemble(x.view(), &y, &bad, MemberSpec { width: 6, dropout: 0.0 }, &hyper, "").is_err());
    }
}
