//! Dataset ingestion, the synthetic lexicon corpus, and fold assignment.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tweet {
    pub text: String,
    /// 0 = negative, 1 = positive.
    pub label: Option<u8>,
}

impl Tweet {
    pub fn labeled(text: impl Into<String>, label: u8) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::invalid("tweet text is empty"));
        }
        if label > 1 {
            return Err(Error::invalid(format!("label {label} is not binary")));
        }
        Ok(Tweet {
            text,
            label: Some(label),
        })
    }
}

/// An ordered, fully labeled collection of tweets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledDataset {
    tweets: Vec<Tweet>,
    pub source: String,
}

impl LabeledDataset {
    pub fn new(tweets: Vec<Tweet>, source: impl Into<String>) -> Result<Self> {
        for (i, t) in tweets.iter().enumerate() {
            match t.label {
                Some(0) | Some(1) => {}
                _ => return Err(Error::invalid(format!("tweet {i} has no binary label"))),
            }
            if t.text.trim().is_empty() {
                return Err(Error::invalid(format!("tweet {i} is empty")));
            }
        }
        Ok(LabeledDataset {
            tweets,
            source: source.into(),
        })
    }

    pub fn tweets(&self) -> &[Tweet] {
        &self.tweets
    }

    pub fn len(&self) -> usize {
        self.tweets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tweets.is_empty()
    }

    pub fn label(&self, i: usize) -> u8 {
        self.tweets[i].label.expect("labeled dataset")
    }

    pub fn labels(&self) -> Vec<u8> {
        (0..self.len()).map(|i| self.label(i)).collect()
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.tweets.iter().map(|t| t.text.as_str())
    }

    /// Dataset restricted to `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            tweets: indices.iter().map(|&i| self.tweets[i].clone()).collect(),
            source: format!("{}[subset {}]", self.source, indices.len()),
        }
    }

    /// Writes the dataset in the `label<TAB>text` format.
    pub fn save_tsv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.tweets {
            out.push_str(&format!("{}\t{}\n", t.label.unwrap_or(0), t.text));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DatasetSource {
    /// One file of positive tweets and one of negative tweets, a tweet per line.
    TwoFile { positive: PathBuf, negative: PathBuf },
    /// `label<TAB>text` lines.
    Tsv(PathBuf),
}

fn read_lines(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(source: &DatasetSource) -> Result<LabeledDataset> {
    match source {
        DatasetSource::TwoFile { positive, negative } => {
            let mut tweets = Vec::new();
            for (path, label) in [(positive, 1u8), (negative, 0u8)] {
                let content = read_lines(path)?;
                for line in content.lines() {
                    let text = line.trim();
                    if text.is_empty() {
                        continue;
                    }
                    tweets.push(Tweet {
                        text: text.to_string(),
                        label: Some(label),
                    });
                }
            }
            LabeledDataset::new(
                tweets,
                format!("{}+{}", positive.display(), negative.display()),
            )
        }
        DatasetSource::Tsv(path) => {
            let content = read_lines(path)?;
            let mut tweets = Vec::new();
            for (idx, line) in content.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let parse_err = |msg: &str| Error::Parse {
                    path: path.clone(),
                    line: idx + 1,
                    msg: msg.to_string(),
                };
                let (label, text) = line
                    .split_once('\t')
                    .ok_or_else(|| parse_err("expected `label<TAB>text`"))?;
                let label = match label.trim() {
                    "0" => 0,
                    "1" => 1,
                    other => return Err(parse_err(&format!("label `{other}` is not 0 or 1"))),
                };
                let text = text.trim();
                if text.is_empty() {
                    return Err(parse_err("empty tweet text"));
                }
                tweets.push(Tweet {
                    text: text.to_string(),
                    label: Some(label),
                });
            }
            LabeledDataset::new(tweets, path.display().to_string())
        }
    }
}

/// The word list behind [`generate_synthetic`]: a disjoint positive and
/// negative word set, 10% of the vocabulary each, the rest neutral.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticLexicon {
    pub words: Vec<String>,
    pub positive: Vec<usize>,
    pub negative: Vec<usize>,
    pub neutral: Vec<usize>,
}

impl SyntheticLexicon {
    pub fn new(vocab_size: usize, seed: u64) -> Result<Self> {
        if vocab_size < 20 {
            return Err(Error::invalid(format!(
                "synthetic vocabulary needs at least 20 words, got {vocab_size}"
            )));
        }
        let words: Vec<String> = (0..vocab_size).map(|i| format!("w{i}")).collect();
        let mut order: Vec<usize> = (0..vocab_size).collect();
        order.shuffle(&mut rng_from_seed(seed ^ 0x1e71_c0de));
        let per_class = vocab_size / 10;
        let positive = order[..per_class].to_vec();
        let negative = order[per_class..2 * per_class].to_vec();
        let mut neutral = order[2 * per_class..].to_vec();
        neutral.sort_unstable();
        Ok(SyntheticLexicon {
            words,
            positive,
            negative,
            neutral,
        })
    }

    /// Brute-force scorer: positive word count minus negative word count.
    pub fn score(&self, text: &str) -> i64 {
        let pos: std::collections::HashSet<&str> =
            self.positive.iter().map(|&i| self.words[i].as_str()).collect();
        let neg: std::collections::HashSet<&str> =
            self.negative.iter().map(|&i| self.words[i].as_str()).collect();
        text.split_whitespace()
            .map(|w| i64::from(pos.contains(w)) - i64::from(neg.contains(w)))
            .sum()
    }
}

const END_ZONE: usize = 3;

/// Deterministic lexicon corpus. Every tweet has 5 to 30 words; its label is
/// the majority class among its sentiment words and at least one sentiment
/// word sits in the first or last three positions.
pub fn generate_synthetic(n: usize, vocab_size: usize, seed: u64) -> Result<LabeledDataset> {
    if n < 2 {
        return Err(Error::invalid(format!("synthetic corpus needs n >= 2, got {n}")));
    }
    let lex = SyntheticLexicon::new(vocab_size, seed)?;
    let mut rng = rng_from_seed(seed);

    let mut labels: Vec<u8> = (0..n).map(|i| (i % 2 == 0) as u8).collect();
    labels.shuffle(&mut rng);

    let mut tweets = Vec::with_capacity(n);
    for &label in &labels {
        let len = rng.random_range(5..=30usize);
        let n_major = rng.random_range(1..=3usize);
        let n_minor = rng.random_range(0..n_major);
        let (major, minor) = if label == 1 {
            (&lex.positive, &lex.negative)
        } else {
            (&lex.negative, &lex.positive)
        };

        let mut slots: Vec<Option<usize>> = vec![None; len];
        let end_zone: Vec<usize> = (0..END_ZONE).chain(len - END_ZONE..len).collect();
        let first = end_zone[rng.random_range(0..end_zone.len())];
        slots[first] = Some(major[rng.random_range(0..major.len())]);

        let rest = std::iter::repeat_n(major, n_major - 1).chain(std::iter::repeat_n(minor, n_minor));
        for set in rest {
            let free_ends: Vec<usize> = end_zone.iter().copied().filter(|&p| slots[p].is_none()).collect();
            let pos = if !free_ends.is_empty() && rng.random_bool(0.5) {
                free_ends[rng.random_range(0..free_ends.len())]
            } else {
                let free: Vec<usize> = (0..len).filter(|&p| slots[p].is_none()).collect();
                free[rng.random_range(0..free.len())]
            };
            slots[pos] = Some(set[rng.random_range(0..set.len())]);
        }

        let text = slots
            .into_iter()
            .map(|s| {
                let id = s.unwrap_or_else(|| lex.neutral[rng.random_range(0..lex.neutral.len())]);
                lex.words[id].as_str()
            })
            .collect::<Vec<_>>()
            .join(" ");
        tweets.push(Tweet {
            text,
            label: Some(label),
        });
    }
    LabeledDataset::new(tweets, format!("synthetic(n={n},vocab={vocab_size},seed={seed})"))
}

/// Assignment of every dataset index to one of `k` folds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    pub k: usize,
    pub fold_of: Vec<usize>,
}

impl FoldAssignment {
    pub fn len(&self) -> usize {
        self.fold_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fold_of.is_empty()
    }

    pub fn fold_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.fold_of[i] == fold).collect()
    }

    /// Indices outside `fold`: the training set of the model that drops it.
    pub fn complement(&self, fold: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.fold_of[i] != fold).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.fold_of {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Seeded shuffle followed by round-robin assignment.
pub fn split_folds(n: usize, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::invalid(format!("fold count must be >= 2, got {k}")));
    }
    if n < k {
        return Err(Error::invalid(format!("cannot split {n} items into {k} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from_seed(seed));
    let mut fold_of = vec![0; n];
    for (j, &i) in order.iter().enumerate() {
        fold_of[i] = j % k;
    }
    Ok(FoldAssignment { k, fold_of })
}

/// Seeded train/test split; returns sorted index lists.
pub fn train_test_split(n: usize, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::invalid(format!("test fraction {test_fraction} not in [0, 1)")));
    }
    let n_test = (n as f64 * test_fraction).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from_seed(seed));
    let mut test = order[..n_test].to_vec();
    let mut train = order[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok((train, test))
}

/// Sorted seeded subset of `0..n` with `k` elements; all of `0..n` when `k`
/// is 0 or at least `n`.
pub fn subsample_indices(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    if k == 0 || k >= n {
        return idx;
    }
    idx.shuffle(&mut rng_from_seed(seed));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Word count per tweet, whitespace-delimited.
pub fn word_counts(dataset: &LabeledDataset) -> Vec<usize> {
    dataset.texts().map(|t| t.split_whitespace().count()).collect()
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
    fn two_file_format_orders_positives_first() {
        let dir = tempfile::tempdir().unwrap();
        let pos = dir.path().join("pos.txt");
        let neg = dir.path().join("neg.txt");
        fs::write(&pos, "good\n\n").unwrap();
        fs::write(&neg, "bad\n").unwrap();
        let ds = load_dataset(&DatasetSource::TwoFile {
            positive: pos,
            negative: neg,
        })
        .unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels(), vec![1, 0]);
        assert_eq!(ds.tweets()[0].text, "good");
    }

    #[test]
    fn tsv_format() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.tsv");
        fs::write(&p, "1\thello\n0\tugh\n").unwrap();
        let ds = load_dataset(&DatasetSource::Tsv(p)).unwrap();
        assert_eq!(ds.labels(), vec![1, 0]);
    }

    #[test]
    fn tsv_bad_label_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.tsv");
        fs::write(&p, "2\thello\n").unwrap();
        match load_dataset(&DatasetSource::Tsv(p)) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_file_errors() {
        let err = load_dataset(&DatasetSource::Tsv("/nonexistent/x.tsv".into())).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn tsv_round_trip_keeps_order() {
        let ds = generate_synthetic(30, 50, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.tsv");
        ds.save_tsv(&p).unwrap();
        let back = load_dataset(&DatasetSource::Tsv(p)).unwrap();
        assert_eq!(back.tweets(), ds.tweets());
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = generate_synthetic(10, 100, 7).unwrap();
        let b = generate_synthetic(10, 100, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_synthetic(10, 100, 8).unwrap());
    }

    #[test]
    fn synthetic_balanced() {
        let ds = generate_synthetic(1000, 200, 1).unwrap();
        let pos = ds.labels().iter().filter(|&&l| l == 1).count();
        assert_eq!(pos, 500);
        let odd = generate_synthetic(11, 200, 1).unwrap();
        let pos = odd.labels().iter().filter(|&&l| l == 1).count() as i64;
        assert!((2 * pos - 11).abs() <= 1);
    }

    #[test]
    fn synthetic_labels_match_lexicon_rescoring() {
        let ds = generate_synthetic(2000, 120, 5).unwrap();
        let lex = SyntheticLexicon::new(120, 5).unwrap();
        for t in ds.tweets() {
            let score = lex.score(&t.text);
            assert_ne!(score, 0);
            assert_eq!(t.label.unwrap(), (score > 0) as u8, "{}", t.text);
        }
    }

    #[test]
    fn synthetic_shape_and_end_placement() {
        let ds = generate_synthetic(500, 100, 2).unwrap();
        let lex = SyntheticLexicon::new(100, 2).unwrap();
        for t in ds.tweets() {
            let words: Vec<&str> = t.text.split_whitespace().collect();
            assert!((5..=30).contains(&words.len()));
            let n = words.len();
            let ends = [0, 1, 2, n - 3, n - 2, n - 1];
            assert!(ends.iter().any(|&p| lex.score(words[p]) != 0));
        }
    }

    #[test]
    fn synthetic_rejects_bad_sizes() {
        assert!(generate_synthetic(1, 100, 0).is_err());
        assert!(generate_synthetic(10, 19, 0).is_err());
    }

    #[test]
    fn folds_balanced_partition() {
        let f = split_folds(10, 5, 3).unwrap();
        assert_eq!(f.sizes(), vec![2; 5]);
        let mut all: Vec<usize> = (0..5).flat_map(|k| f.fold_indices(k)).collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(f, split_folds(10, 5, 3).unwrap());
        assert!(split_folds(3, 5, 0).is_err());
        assert!(split_folds(3, 1, 0).is_err());
    }

    #[test]
    fn train_test_split_partitions() {
        let (tr, te) = train_test_split(100, 0.2, 4).unwrap();
        assert_eq!(te.len(), 20);
        assert_eq!(tr.len(), 80);
        let mut all: Vec<usize> = tr.iter().chain(&te).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }
}
