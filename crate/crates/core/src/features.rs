//! Fixed-length tweet embeddings from an encoder trace: token-averaged
//! hidden states from the top layers, followed by the four corner blocks
//! of an attention matrix.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView2};

use crate::encoder::{mean_over_mask, EncoderParams, EncoderTrace};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tokenizer::{encode, encode_unbounded, Vocabulary, DEFAULT_MAX_LEN, DEFAULT_UNBOUNDED_CAP};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HiddenMode {
    Last1,
    Last2Concat,
    Last4Concat,
    Last4Sum,
}

impl HiddenMode {
    pub fn layers_used(self) -> usize {
        match self {
            HiddenMode::Last1 => 1,
            HiddenMode::Last2Concat => 2,
            HiddenMode::Last4Concat | HiddenMode::Last4Sum => 4,
        }
    }

    pub fn feature_len(self, hidden: usize) -> usize {
        match self {
            HiddenMode::Last1 | HiddenMode::Last4Sum => hidden,
            HiddenMode::Last2Concat => 2 * hidden,
            HiddenMode::Last4Concat => 4 * hidden,
        }
    }
}

impl fmt::Display for HiddenMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HiddenMode::Last1 => "last1",
            HiddenMode::Last2Concat => "last2-concat",
            HiddenMode::Last4Concat => "last4-concat",
            HiddenMode::Last4Sum => "last4-sum",
        })
    }
}

impl FromStr for HiddenMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last1" => Ok(HiddenMode::Last1),
            "last2-concat" => Ok(HiddenMode::Last2Concat),
            "last4-concat" => Ok(HiddenMode::Last4Concat),
            "last4-sum" => Ok(HiddenMode::Last4Sum),
            other => Err(Error::invalid(format!("unknown hidden mode `{other}`"))),
        }
    }
}

/// Which attention matrix the corner features are read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnReduce {
    MeanHeadsLastLayer,
    SingleHead { layer: usize, head: usize },
}

impl fmt::Display for AttnReduce {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttnReduce::MeanHeadsLastLayer => f.write_str("mean-heads-last-layer"),
            AttnReduce::SingleHead { layer, head } => write!(f, "single-head({layer},{head})"),
        }
    }
}

impl FromStr for AttnReduce {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "mean-heads-last-layer" {
            return Ok(AttnReduce::MeanHeadsLastLayer);
        }
        let inner = s
            .strip_prefix("single-head(")
            .and_then(|r| r.strip_suffix(')'))
            .ok_or_else(|| Error::invalid(format!("unknown attention reduction `{s}`")))?;
        let (l, h) = inner
            .split_once(',')
            .ok_or_else(|| Error::invalid(format!("expected single-head(layer,head), got `{s}`")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::invalid(format!("bad index in `{s}`")))
        };
        Ok(AttnReduce::SingleHead {
            layer: parse(l)?,
            head: parse(h)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureConfig {
    pub hidden_mode: HiddenMode,
    /// Corner window: four (k/2)×(k/2) blocks, k² values in total.
    pub k: usize,
    pub attn_reduce: AttnReduce,
    pub include_attention: bool,
    /// Padded length for the hidden-state pass.
    pub max_len: usize,
    /// Length guard for the unpadded attention pass.
    pub unbounded_cap: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            hidden_mode: HiddenMode::Last4Concat,
            k: 16,
            attn_reduce: AttnReduce::MeanHeadsLastLayer,
            include_attention: true,
            max_len: DEFAULT_MAX_LEN,
            unbounded_cap: DEFAULT_UNBOUNDED_CAP,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 || !self.k.is_multiple_of(2) {
            return Err(Error::invalid(format!("corner window k={} must be even and >= 2", self.k)));
        }
        if self.max_len == 0 {
            return Err(Error::invalid("max_len must be >= 1"));
        }
        Ok(())
    }

    pub fn hidden_len(&self, hidden: usize) -> usize {
        self.hidden_mode.feature_len(hidden)
    }

    pub fn embedding_len(&self, hidden: usize) -> usize {
        self.hidden_len(hidden) + if self.include_attention { self.k * self.k } else { 0 }
    }
}

/// Hidden features first, attention features after.
#[derive(Debug, Clone, PartialEq)]
pub struct TweetEmbedding<T> {
    pub values: Array1<T>,
    pub hidden_len: usize,
}

impl<T: Scalar> TweetEmbedding<T> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn hidden(&self) -> ndarray::ArrayView1<'_, T> {
        self.values.slice(s![..self.hidden_len])
    }

    pub fn attention(&self) -> ndarray::ArrayView1<'_, T> {
        self.values.slice(s![self.hidden_len..])
    }
}

/// Per-token vector built from the selected layers, averaged over the
/// positions where `mask` is 1.
pub fn hidden_features<T: Scalar>(trace: &EncoderTrace<T>, mask: &[u8], mode: HiddenMode) -> Result<Array1<T>> {
    let n = trace.seq_len();
    if mask.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: mask.len(),
        });
    }
    if !mask.contains(&1) {
        return Err(Error::invalid("hidden features need at least one real token"));
    }
    let layers = trace.hidden.len() - 1;
    let used = mode.layers_used();
    if layers < used {
        return Err(Error::invalid(format!("mode {mode} needs {used} layers, encoder has {layers}")));
    }
    let top = &trace.hidden[trace.hidden.len() - used..];
    let pooled: Vec<Array1<T>> = top.iter().map(|h| mean_over_mask(h, mask)).collect();
    Ok(match mode {
        HiddenMode::Last4Sum => pooled.into_iter().reduce(|a, b| a + b).expect("four layers"),
        _ => ndarray::concatenate(ndarray::Axis(0), &pooled.iter().map(|p| p.view()).collect::<Vec<_>>())
            .expect("1-d concatenation"),
    })
}

pub fn attn_reduce<T: Scalar>(trace: &EncoderTrace<T>, rule: AttnReduce) -> Result<Array2<T>> {
    let last = trace
        .attention
        .last()
        .ok_or_else(|| Error::invalid("trace has no attention layers"))?;
    match rule {
        AttnReduce::MeanHeadsLastLayer => {
            let sum = last.iter().fold(Array2::zeros(last[0].raw_dim()), |acc, a| acc + a);
            Ok(sum / T::of(last.len() as f64))
        }
        AttnReduce::SingleHead { layer, head } => trace
            .attention
            .get(layer)
            .and_then(|l| l.get(head))
            .cloned()
            .ok_or_else(|| {
                Error::invalid(format!(
                    "attention head ({layer},{head}) out of range for {} layers × {} heads",
                    trace.attention.len(),
                    last.len()
                ))
            }),
    }
}

/// Row-major values of the four (k/2)×(k/2) corner blocks in the order
/// top-left, top-right, bottom-left, bottom-right. Matrices smaller than
/// k×k are zero-padded on the bottom and right first.
pub fn attention_corners<T: Scalar>(a: ArrayView2<'_, T>, k: usize) -> Result<Array1<T>> {
    if k < 2 || !k.is_multiple_of(2) {
        return Err(Error::invalid(format!("corner window k={k} must be even and >= 2")));
    }
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Dimension {
            expected: n,
            got: a.ncols(),
        });
    }
    let padded;
    let (a, n) = if n < k {
        let mut p = Array2::zeros((k, k));
        p.slice_mut(s![..n, ..n]).assign(&a);
        padded = p;
        (padded.view(), k)
    } else {
        (a, n)
    };
    let half = k / 2;
    let mut out = Vec::with_capacity(k * k);
    for rows in [0..half, n - half..n] {
        for cols in [0..half, n - half..n] {
            for i in rows.clone() {
                out.extend(a.slice(s![i, cols.clone()]).iter().copied());
            }
        }
    }
    Ok(Array1::from(out))
}

/// Full embedding for one tweet: hidden features from the padded encoding,
/// attention corners from the unpadded one.
pub fn embed_tweet<T: Scalar>(
    params: &EncoderParams<T>,
    text: &str,
    vocab: &Vocabulary,
    fcfg: &FeatureConfig,
) -> Result<TweetEmbedding<T>> {
    fcfg.validate()?;
    let bounded = encode(text, vocab, fcfg.max_len)?;

    // Padding is inert, so the hidden pass runs on the real tokens only. When
    // the tweet fits in both encodings, one forward pass serves both.
    let (hidden, attention) = if fcfg.include_attention {
        let unbounded = encode_unbounded(text, vocab, fcfg.unbounded_cap)?;
        let trace = params.forward(&unbounded)?;
        let hidden = if unbounded.ids[..] == bounded.real_prefix().ids[..] {
            hidden_features(&trace, &unbounded.mask, fcfg.hidden_mode)?
        } else {
            let prefix = bounded.real_prefix();
            hidden_features(&params.forward(&prefix)?, &prefix.mask, fcfg.hidden_mode)?
        };
        let reduced = attn_reduce(&trace, fcfg.attn_reduce)?;
        (hidden, Some(attention_corners(reduced.view(), fcfg.k)?))
    } else {
        let prefix = bounded.real_prefix();
        (hidden_features(&params.forward(&prefix)?, &prefix.mask, fcfg.hidden_mode)?, None)
    };

    let hidden_len = hidden.len();
    let values = match attention {
        Some(att) => ndarray::concatenate(ndarray::Axis(0), &[hidden.view(), att.view()]).expect("1-d concatenation"),
        None => hidden,
    };
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("embedding contains non-finite values".into()));
    }
    Ok(TweetEmbedding { values, hidden_len })
}

/// Embeds every text, one row per text in input order.
pub fn embed_all<'a, T: Scalar>(
    params: &EncoderParams<T>,
    texts: impl IntoIterator<Item = &'a str>,
    vocab: &Vocabulary,
    fcfg: &FeatureConfig,
) -> Result<Array2<T>> {
    let dim = fcfg.embedding_len(params.config.hidden);
    let mut flat = Vec::new();
    let mut rows = 0;
    for text in texts {
        let e = embed_tweet(params, text, vocab, fcfg)?;
        debug_assert_eq!(e.len(), dim);
        flat.extend(e.values.iter().copied());
        rows += 1;
    }
    Ok(Array2::from_shape_vec((rows, dim), flat).expect("row-major embeddings"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use proptest::prelude::*;
    use rand::Rng as _;

    /// Independent oracle: scan every (i, j), keep the corner entries, then
    /// order them by block and row-major within each block.
    fn corners_brute_force(a: &Array2<f64>, k: usize) -> Vec<f64> {
        let n = a.nrows();
        let half = k / 2;
        let near = |x: usize| x < half || x >= n - half;
        let block = |i: usize, j: usize| 2 * usize::from(i >= half) + usize::from(j >= half);
        let mut keep: Vec<(usize, usize, usize, f64)> = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if near(i) && near(j) {
                    keep.push((block(i, j), i, j, a[[i, j]]));
                }
            }
        }
        keep.sort_by_key(|&(b, i, j, _)| (b, i, j));
        keep.into_iter().map(|t| t.3).collect()
    }

    fn random_matrix(n: usize, seed: u64) -> Array2<f64> {
        let mut rng = crate::rng::rng_from_seed(seed);
        Array2::from_shape_simple_fn((n, n), || rng.random::<f64>())
    }

    #[test]
    fn corners_n20_k16_match_enumeration() {
        let a = random_matrix(20, 1);
        let got = attention_corners(a.view(), 16).unwrap();
        assert_eq!(got.len(), 256);
        assert_eq!(got.to_vec(), corners_brute_force(&a, 16));
        // first block starts at a[0][0], second at a[0][12]
        assert_eq!(got[0], a[[0, 0]]);
        assert_eq!(got[64], a[[0, 12]]);
        assert_eq!(got[128], a[[12, 0]]);
        assert_eq!(got[255], a[[19, 19]]);
    }

    #[test]
    fn corners_of_uniform_matrix() {
        let a = Array2::from_elem((20, 20), 1.0 / 20.0);
        let got = attention_corners(a.view(), 16).unwrap();
        assert!(got.iter().all(|&v| v == 0.05));
    }

    #[test]
    fn corners_degenerate_and_padded() {
        let a = ndarray::array![[1.0, 2.0], [3.0, 4.0]];
        assert_eq!(attention_corners(a.view(), 2).unwrap().to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
        // n=3 < k=4: padded to 4×4; TL block is rows 0-1 cols 0-1, TR rows 0-1 cols 2-3, ...
        let b = ndarray::array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.0]];
        let got = attention_corners(b.view(), 4).unwrap().to_vec();
        assert_eq!(
            got,
            vec![1.0, 2.0, 4.0, 5.0, 3.0, 0.0, 6.0, 0.0, 7.0, 8.0, 0.0, 0.0, 9.0, 0.0, 0.0, 0.0]
        );
        assert!(attention_corners(b.view(), 3).is_err());
    }

    proptest! {
        #[test]
        fn corners_match_oracle(n in 16usize..=40, seed in any::<u64>()) {
            let a = random_matrix(n, seed);
            prop_assert_eq!(attention_corners(a.view(), 16).unwrap().to_vec(), corners_brute_force(&a, 16));
        }

        #[test]
        fn corners_are_linear(n in 2usize..24, seed in any::<u64>()) {
            let a = random_matrix(n, seed);
            let b = random_matrix(n, seed.wrapping_add(1));
            let lhs = attention_corners((&a + &b).view(), 8).unwrap();
            let rhs = attention_corners(a.view(), 8).unwrap() + attention_corners(b.view(), 8).unwrap();
            for (x, y) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    fn constant_trace(layers: usize, n: usize, h: usize, c: f64) -> EncoderTrace<f64> {
        EncoderTrace {
            hidden: vec![Array2::from_elem((n, h), c); layers + 1],
            attention: vec![vec![Array2::from_elem((n, n), 1.0 / n as f64)]; layers],
        }
    }

    #[test]
    fn pooling_constant_layers() {
        let t = constant_trace(4, 5, 3, 2.5);
        let v = hidden_features(&t, &[1, 1, 0, 0, 0], HiddenMode::Last4Concat).unwrap();
        assert_eq!(v.len(), 12);
        assert!(v.iter().all(|&x| x == 2.5));
        let s = hidden_features(&t, &[1, 0, 0, 0, 0], HiddenMode::Last4Sum).unwrap();
        assert!(s.iter().all(|&x| x == 10.0));
        assert!(hidden_features(&t, &[0; 5], HiddenMode::Last1).is_err());
        assert!(hidden_features(&t, &[1; 4], HiddenMode::Last1).is_err());
        assert!(hidden_features(&constant_trace(2, 5, 3, 1.0), &[1; 5], HiddenMode::Last4Sum).is_err());
    }

    #[test]
    fn pooling_single_token_is_its_concatenation() {
        let mut t = constant_trace(4, 3, 2, 0.0);
        for (l, h) in t.hidden.iter_mut().enumerate() {
            h[[1, 0]] = l as f64;
            h[[1, 1]] = 10.0 + l as f64;
            h[[0, 0]] = 99.0;
        }
        let v = hidden_features(&t, &[0, 1, 0], HiddenMode::Last2Concat).unwrap();
        assert_eq!(v.to_vec(), vec![3.0, 13.0, 4.0, 14.0]);
        let v = hidden_features(&t, &[0, 1, 0], HiddenMode::Last1).unwrap();
        assert_eq!(v.to_vec(), vec![4.0, 14.0]);
    }

    #[test]
    fn feature_lengths_per_mode() {
        assert_eq!(HiddenMode::Last4Concat.feature_len(192), 768);
        assert_eq!(HiddenMode::Last4Sum.feature_len(192), 192);
        assert_eq!(HiddenMode::Last2Concat.feature_len(192), 384);
        let cfg = FeatureConfig::default();
        assert_eq!(cfg.embedding_len(192), 1024);
    }

    #[test]
    fn attn_reduce_rules() {
        let mut t = constant_trace(2, 3, 2, 0.0);
        let a = ndarray::array![[0.2, 0.3, 0.5], [1.0, 0.0, 0.0], [0.1, 0.1, 0.8]];
        t.attention[1] = vec![a.clone()];
        assert_eq!(attn_reduce(&t, AttnReduce::MeanHeadsLastLayer).unwrap(), a);
        t.attention[1] = vec![a.clone(), a.clone(), a.clone()];
        let m = attn_reduce(&t, AttnReduce::MeanHeadsLastLayer).unwrap();
        for (x, y) in m.iter().zip(a.iter()) {
            assert!((x - y).abs() < 1e-15);
        }
        let b = Array2::from_elem((3, 3), 1.0 / 3.0);
        t.attention[1][2] = b.clone();
        let m = attn_reduce(&t, AttnReduce::MeanHeadsLastLayer).unwrap();
        for row in m.rows() {
            assert!((row.sum() - 1.0).abs() <= 1e-12);
        }
        assert_eq!(attn_reduce(&t, AttnReduce::SingleHead { layer: 1, head: 2 }).unwrap(), b);
        assert!(attn_reduce(&t, AttnReduce::SingleHead { layer: 2, head: 0 }).is_err());
        assert!(attn_reduce(&t, AttnReduce::SingleHead { layer: 0, head: 1 }).is_err());
    }

    #[test]
    fn mode_and_rule_parsing() {
        for m in ["last1", "last2-concat", "last4-concat", "last4-sum"] {
            assert_eq!(m.parse::<HiddenMode>().unwrap().to_string(), m);
        }
        assert!("last3".parse::<HiddenMode>().is_err());
        assert_eq!(
            "single-head(3,1)".parse::<AttnReduce>().unwrap(),
            AttnReduce::SingleHead { layer: 3, head: 1 }
        );
        assert_eq!(AttnReduce::SingleHead { layer: 3, head: 1 }.to_string(), "single-head(3,1)");
        assert!("single-head(3)".parse::<AttnReduce>().is_err());
    }

    fn desk_setup() -> (EncoderParams<f32>, Vocabulary) {
        let texts = ["good day", "bad night !", "a b c d e f g h i j k l m n o p q r s t u v w x y z"];
        let vocab = Vocabulary::from_texts(texts.iter().copied(), 100).unwrap();
        let params = EncoderParams::init(EncoderConfig::desk(vocab.len()), 3).unwrap();
        (params, vocab)
    }

    #[test]
    fn default_embedding_is_1024_and_768_without_attention() {
        let (params, vocab) = desk_setup();
        let cfg = FeatureConfig::default();
        let e = embed_tweet(&params, "good day !", &vocab, &cfg).unwrap();
        assert_eq!(e.len(), 1024);
        assert_eq!(e.hidden().len(), 768);
        assert_eq!(e.attention().len(), 256);
        let no_att = FeatureConfig {
            include_attention: false,
            ..cfg
        };
        assert_eq!(embed_tweet(&params, "good day !", &vocab, &no_att).unwrap().len(), 768);
        assert_eq!(e, embed_tweet(&params, "good day !", &vocab, &cfg).unwrap());
    }

    #[test]
    fn embedding_matches_direct_padded_pipeline() {
        let (params, vocab) = desk_setup();
        let cfg = FeatureConfig::default();
        let long = ["a b c d e f g h i j"; 7].join(" ");
        for text in ["good day", long.as_str()] {
            let e = embed_tweet(&params, text, &vocab, &cfg).unwrap();
            let seq = encode(text, &vocab, 50).unwrap();
            let direct = hidden_features(&params.forward(&seq).unwrap(), &seq.mask, cfg.hidden_mode).unwrap();
            for (x, y) in e.hidden().iter().zip(direct.iter()) {
                assert!((x - y).abs() <= 1e-5, "{x} vs {y}");
            }
            let useq = encode_unbounded(text, &vocab, 128).unwrap();
            let reduced = attn_reduce(&params.forward(&useq).unwrap(), cfg.attn_reduce).unwrap();
            let corners = attention_corners(reduced.view(), 16).unwrap();
            assert_eq!(e.attention().to_vec(), corners.to_vec());
        }
    }

    #[test]
    fn lengths_for_every_mode() {
        let (params, vocab) = desk_setup();
        for mode in [HiddenMode::Last1, HiddenMode::Last2Concat, HiddenMode::Last4Concat, HiddenMode::Last4Sum] {
            for include_attention in [false, true] {
                for k in [2, 8, 16] {
                    let cfg = FeatureConfig {
                        hidden_mode: mode,
                        k,
                        include_attention,
                        ..FeatureConfig::default()
                    };
                    let e = embed_tweet(&params, "bad night", &vocab, &cfg).unwrap();
                    assert_eq!(e.len(), mode.feature_len(192) + if include_attention { k * k } else { 0 });
                }
            }
        }
        let bad = FeatureConfig {
            k: 5,
            ..FeatureConfig::default()
        };
        assert!(embed_tweet(&params, "bad", &vocab, &bad).is_err());
        assert!(embed_tweet(&params, "", &vocab, &FeatureConfig::default()).is_err());
    }

    #[test]
    fn embed_all_rows_in_order() {
        let (params, vocab) = desk_setup();
        let cfg = FeatureConfig::default();
        let m = embed_all(&params, ["good day", "bad night"], &vocab, &cfg).unwrap();
        assert_eq!(m.shape(), &[2, 1024]);
        assert_eq!(m.row(1).to_vec(), embed_tweet(&params, "bad night", &vocab, &cfg).unwrap().values.to_vec());
    }
}
