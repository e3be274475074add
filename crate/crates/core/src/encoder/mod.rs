//! Miniature post-layer-norm transformer encoder whose forward pass records
//! every hidden state and every head's attention matrix.
//!
//! Rows are tokens. Each layer computes
//!
//! ```text
//! Y1 = LN(X + MHA(X) Wo + bo)
//! Y2 = LN(Y1 + relu(Y1 W1 + b1) W2 + b2)
//! ```
//!
//! with padded keys excluded from attention by −∞ logits.

mod backward;
mod mlm;

use ndarray::{s, Array1, Array2, ArrayViewD, ArrayViewMutD, Axis};
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::io::Section;
use crate::optim::ParamSet;
use crate::rng::rng_from_seed;
use crate::scalar::{relu, Scalar};
use crate::tokenizer::TokenSequence;

pub use mlm::{mlm_eval_loss, pretrain_mlm, pretrain_mlm_sequences, MlmHyper, MlmReport};

pub const LAYER_NORM_EPS: f64 = 1e-5;
const SECTION_KIND: [u8; 4] = *b"ENCD";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub vocab: usize,
    pub max_pos: usize,
}

impl EncoderConfig {
    /// Desk-scale defaults: 4 layers of width 192, so four concatenated layers
    /// give 768 features per token.
    pub fn desk(vocab: usize) -> Self {
        EncoderConfig {
            layers: 4,
            heads: 4,
            hidden: 192,
            ffn: 384,
            vocab,
            max_pos: 128,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.hidden == 0 || self.ffn == 0 || self.max_pos == 0 {
            return Err(Error::invalid(format!("encoder dimensions must be positive: {self:?}")));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "hidden size {} is not divisible by head count {}",
                self.hidden, self.heads
            )));
        }
        if self.vocab < 4 {
            return Err(Error::invalid(format!("vocabulary size {} < 4", self.vocab)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub wq: Array2<T>,
    pub bq: Array1<T>,
    pub wk: Array2<T>,
    pub bk: Array1<T>,
    pub wv: Array2<T>,
    pub bv: Array1<T>,
    pub wo: Array2<T>,
    pub bo: Array1<T>,
    pub ln1_gamma: Array1<T>,
    pub ln1_beta: Array1<T>,
    pub w1: Array2<T>,
    pub b1: Array1<T>,
    pub w2: Array2<T>,
    pub b2: Array1<T>,
    pub ln2_gamma: Array1<T>,
    pub ln2_beta: Array1<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    pub config: EncoderConfig,
    pub tok_emb: Array2<T>,
    pub pos_emb: Array2<T>,
    pub layers: Vec<LayerParams<T>>,
    /// Masked-token prediction head, hidden → vocab.
    pub mlm_w: Array2<T>,
    pub mlm_b: Array1<T>,
}

/// Hidden states (`layers + 1` matrices, index 0 = embedding output) and
/// attention matrices indexed `[layer][head]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderTrace<T> {
    pub hidden: Vec<Array2<T>>,
    pub attention: Vec<Vec<Array2<T>>>,
}

impl<T: Scalar> EncoderTrace<T> {
    pub fn seq_len(&self) -> usize {
        self.hidden[0].nrows()
    }

    pub fn last_hidden(&self) -> &Array2<T> {
        self.hidden.last().expect("trace has hidden states")
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LnCache<T> {
    xhat: Array2<T>,
    inv_std: Array1<T>,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerCache<T> {
    x: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    ctx: Array2<T>,
    ln1: LnCache<T>,
    y1: Array2<T>,
    h_pre: Array2<T>,
    h_act: Array2<T>,
    ln2: LnCache<T>,
}

fn normal_matrix<T: Scalar>(rows: usize, cols: usize, std: f64, rng: &mut crate::rng::Rng) -> Array2<T> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_simple_fn((rows, cols), || T::of(dist.sample(rng)))
}

pub(crate) fn layer_norm<T: Scalar>(z: &Array2<T>, gamma: &Array1<T>, beta: &Array1<T>) -> (Array2<T>, LnCache<T>) {
    let width = T::of(z.ncols() as f64);
    let eps = T::of(LAYER_NORM_EPS);
    let mut xhat = z.clone();
    let mut inv_std = Array1::zeros(z.nrows());
    for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / width;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<T>() / width;
        *inv = T::one() / (var + eps).sqrt();
        let s = *inv;
        row.mapv_inplace(|v| v * s);
    }
    let y = &xhat * gamma + beta;
    (y, LnCache { xhat, inv_std })
}

/// Row softmax with masked columns forced to exactly zero.
pub(crate) fn masked_softmax<T: Scalar>(scores: &mut Array2<T>, key_mask: &[u8]) {
    for mut row in scores.rows_mut() {
        let mut max = T::neg_infinity();
        for (j, &v) in row.iter().enumerate() {
            if key_mask[j] == 1 && v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        for (j, v) in row.iter_mut().enumerate() {
            *v = if key_mask[j] == 1 { (*v - max).exp() } else { T::zero() };
            sum += *v;
        }
        row.mapv_inplace(|v| v / sum);
    }
}

impl<T: Scalar> EncoderParams<T> {
    /// Deterministic initialisation: weights ~ N(0, 1/√hidden), biases 0,
    /// layer-norm scale 1 and shift 0.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(seed);
        let (h, f) = (config.hidden, config.ffn);
        let std = 1.0 / (h as f64).sqrt();
        let tok_emb = normal_matrix(config.vocab, h, std, &mut rng);
        let pos_emb = normal_matrix(config.max_pos, h, std, &mut rng);
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                wq: normal_matrix(h, h, std, &mut rng),
                bq: Array1::zeros(h),
                wk: normal_matrix(h, h, std, &mut rng),
                bk: Array1::zeros(h),
                wv: normal_matrix(h, h, std, &mut rng),
                bv: Array1::zeros(h),
                wo: normal_matrix(h, h, std, &mut rng),
                bo: Array1::zeros(h),
                ln1_gamma: Array1::ones(h),
                ln1_beta: Array1::zeros(h),
                w1: normal_matrix(h, f, std, &mut rng),
                b1: Array1::zeros(f),
                w2: normal_matrix(f, h, std, &mut rng),
                b2: Array1::zeros(h),
                ln2_gamma: Array1::ones(h),
                ln2_beta: Array1::zeros(h),
            })
            .collect();
        let mlm_w = normal_matrix(h, config.vocab, std, &mut rng);
        Ok(EncoderParams {
            config,
            tok_emb,
            pos_emb,
            layers,
            mlm_w,
            mlm_b: Array1::zeros(config.vocab),
        })
    }

    pub fn forward(&self, tokens: &TokenSequence) -> Result<EncoderTrace<T>> {
        self.forward_cached(tokens).map(|(trace, _)| trace)
    }

    fn check_input(&self, tokens: &TokenSequence) -> Result<()> {
        let n = tokens.len();
        if n > self.config.max_pos {
            return Err(Error::invalid(format!(
                "sequence length {n} exceeds max_pos {}",
                self.config.max_pos
            )));
        }
        if tokens.mask.len() != n {
            return Err(Error::Dimension {
                expected: n,
                got: tokens.mask.len(),
            });
        }
        if tokens.real_len() == 0 {
            return Err(Error::invalid("sequence has no real tokens"));
        }
        if let Some(&bad) = tokens.ids.iter().find(|&&id| id as usize >= self.config.vocab) {
            return Err(Error::invalid(format!("token id {bad} outside vocabulary")));
        }
        Ok(())
    }

    pub(crate) fn forward_cached(&self, tokens: &TokenSequence) -> Result<(EncoderTrace<T>, Vec<LayerCache<T>>)> {
        self.check_input(tokens)?;
        let n = tokens.len();
        let cfg = &self.config;
        let dh = cfg.head_dim();
        let scale = T::one() / T::of(dh as f64).sqrt();

        let mut x = Array2::zeros((n, cfg.hidden));
        for (i, &id) in tokens.ids.iter().enumerate() {
            let mut row = x.row_mut(i);
            row.assign(&self.tok_emb.row(id as usize));
            row += &self.pos_emb.row(i);
        }

        let mut hidden = Vec::with_capacity(cfg.layers + 1);
        let mut attention = Vec::with_capacity(cfg.layers);
        let mut caches = Vec::with_capacity(cfg.layers);
        hidden.push(x.clone());

        for layer in &self.layers {
            let q = x.dot(&layer.wq) + &layer.bq;
            let k = x.dot(&layer.wk) + &layer.bk;
            let v = x.dot(&layer.wv) + &layer.bv;
            let mut ctx = Array2::zeros((n, cfg.hidden));
            let mut heads = Vec::with_capacity(cfg.heads);
            for hd in 0..cfg.heads {
                let cols = s![.., hd * dh..(hd + 1) * dh];
                let mut a = q.slice(cols).dot(&k.slice(cols).t());
                a.mapv_inplace(|v| v * scale);
                masked_softmax(&mut a, &tokens.mask);
                ctx.slice_mut(cols).assign(&a.dot(&v.slice(cols)));
                heads.push(a);
            }
            let z1 = ctx.dot(&layer.wo) + &layer.bo + &x;
            let (y1, ln1) = layer_norm(&z1, &layer.ln1_gamma, &layer.ln1_beta);
            let h_pre = y1.dot(&layer.w1) + &layer.b1;
            let h_act = h_pre.mapv(relu);
            let z2 = h_act.dot(&layer.w2) + &layer.b2 + &y1;
            let (y2, ln2) = layer_norm(&z2, &layer.ln2_gamma, &layer.ln2_beta);

            caches.push(LayerCache {
                x,
                q,
                k,
                v,
                ctx,
                ln1,
                y1,
                h_pre,
                h_act,
                ln2,
            });
            attention.push(heads);
            hidden.push(y2.clone());
            x = y2;
        }
        Ok((EncoderTrace { hidden, attention }, caches))
    }

    /// Mean of the last hidden layer over real tokens.
    pub fn pooled_last(&self, trace: &EncoderTrace<T>, mask: &[u8]) -> Array1<T> {
        mean_over_mask(trace.last_hidden(), mask)
    }

    pub fn to_section(&self) -> Section {
        let c = &self.config;
        let mut s = Section::new(SECTION_KIND);
        s.config = [c.layers, c.heads, c.hidden, c.ffn, c.vocab, c.max_pos]
            .iter()
            .map(|&v| v as u64)
            .collect();
        s.tensors = self.tensors().into_iter().map(crate::io::TensorData::from_view).collect();
        s
    }

    pub fn from_section(section: &Section) -> Result<Self> {
        section.expect_kind(SECTION_KIND)?;
        let at = |i| section.config_at(i).map(|v| v as usize);
        let config = EncoderConfig {
            layers: at(0)?,
            heads: at(1)?,
            hidden: at(2)?,
            ffn: at(3)?,
            vocab: at(4)?,
            max_pos: at(5)?,
        };
        config.validate()?;
        let mut params = Self::init_zeros(config);
        load_tensors(&mut params, &section.tensors)?;
        Ok(params)
    }

    fn init_zeros(config: EncoderConfig) -> Self {
        let (h, f) = (config.hidden, config.ffn);
        let layer = LayerParams {
            wq: Array2::zeros((h, h)),
            bq: Array1::zeros(h),
            wk: Array2::zeros((h, h)),
            bk: Array1::zeros(h),
            wv: Array2::zeros((h, h)),
            bv: Array1::zeros(h),
            wo: Array2::zeros((h, h)),
            bo: Array1::zeros(h),
            ln1_gamma: Array1::zeros(h),
            ln1_beta: Array1::zeros(h),
            w1: Array2::zeros((h, f)),
            b1: Array1::zeros(f),
            w2: Array2::zeros((f, h)),
            b2: Array1::zeros(h),
            ln2_gamma: Array1::zeros(h),
            ln2_beta: Array1::zeros(h),
        };
        EncoderParams {
            config,
            tok_emb: Array2::zeros((config.vocab, h)),
            pos_emb: Array2::zeros((config.max_pos, h)),
            layers: vec![layer; config.layers],
            mlm_w: Array2::zeros((h, config.vocab)),
            mlm_b: Array1::zeros(config.vocab),
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_section().save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_section(&Section::load(path)?)
    }

    /// The same parameters in another precision.
    pub fn cast<U: Scalar>(&self) -> EncoderParams<U> {
        let mut out = EncoderParams::<U>::init_zeros(self.config);
        for (mut dst, src) in out.tensors_mut().into_iter().zip(self.tensors()) {
            dst.zip_mut_with(&src, |d, &s| *d = U::of(s.as_f64()));
        }
        out
    }
}

/// Copies serialized tensors into `params`, checking every shape.
pub(crate) fn load_tensors<T: Scalar, P: ParamSet<T>>(params: &mut P, tensors: &[crate::io::TensorData]) -> Result<()> {
    let mut dst = params.tensors_mut();
    if dst.len() != tensors.len() {
        return Err(Error::Format(format!(
            "expected {} tensors, found {}",
            dst.len(),
            tensors.len()
        )));
    }
    for (i, (d, t)) in dst.iter_mut().zip(tensors).enumerate() {
        if d.shape() != t.dims.as_slice() {
            return Err(Error::Format(format!(
                "tensor {i}: expected shape {:?}, found {:?}",
                d.shape(),
                t.dims
            )));
        }
        for (dv, &sv) in d.iter_mut().zip(&t.values) {
            if !sv.is_finite() {
                return Err(Error::Format(format!("tensor {i} holds a non-finite value")));
            }
            *dv = T::of(sv as f64);
        }
    }
    Ok(())
}

/// Arithmetic mean of the rows of `m` whose mask entry is 1.
pub fn mean_over_mask<T: Scalar>(m: &Array2<T>, mask: &[u8]) -> Array1<T> {
    let mut acc = Array1::zeros(m.ncols());
    let mut count = 0usize;
    for (row, &keep) in m.axis_iter(Axis(0)).zip(mask) {
        if keep == 1 {
            acc += &row;
            count += 1;
        }
    }
    acc / T::of(count.max(1) as f64)
}

impl<T: Scalar> ParamSet<T> for EncoderParams<T> {
    fn tensors(&self) -> Vec<ArrayViewD<'_, T>> {
        let mut out = vec![self.tok_emb.view().into_dyn(), self.pos_emb.view().into_dyn()];
        for l in &self.layers {
            out.extend([
                l.wq.view().into_dyn(),
                l.bq.view().into_dyn(),
                l.wk.view().into_dyn(),
                l.bk.view().into_dyn(),
                l.wv.view().into_dyn(),
                l.bv.view().into_dyn(),
                l.wo.view().into_dyn(),
                l.bo.view().into_dyn(),
                l.ln1_gamma.view().into_dyn(),
                l.ln1_beta.view().into_dyn(),
                l.w1.view().into_dyn(),
                l.b1.view().into_dyn(),
                l.w2.view().into_dyn(),
                l.b2.view().into_dyn(),
                l.ln2_gamma.view().into_dyn(),
                l.ln2_beta.view().into_dyn(),
            ]);
        }
        out.push(self.mlm_w.view().into_dyn());
        out.push(self.mlm_b.view().into_dyn());
        out
    }

    fn tensors_mut(&mut self) -> Vec<ArrayViewMutD<'_, T>> {
        let mut out = vec![self.tok_emb.view_mut().into_dyn(), self.pos_emb.view_mut().into_dyn()];
        for l in &mut self.layers {
            out.extend([
                l.wq.view_mut().into_dyn(),
                l.bq.view_mut().into_dyn(),
                l.wk.view_mut().into_dyn(),
                l.bk.view_mut().into_dyn(),
                l.wv.view_mut().into_dyn(),
                l.bv.view_mut().into_dyn(),
                l.wo.view_mut().into_dyn(),
                l.bo.view_mut().into_dyn(),
                l.ln1_gamma.view_mut().into_dyn(),
                l.ln1_beta.view_mut().into_dyn(),
                l.w1.view_mut().into_dyn(),
                l.b1.view_mut().into_dyn(),
                l.w2.view_mut().into_dyn(),
                l.b2.view_mut().into_dyn(),
                l.ln2_gamma.view_mut().into_dyn(),
                l.ln2_beta.view_mut().into_dyn(),
            ]);
        }
        out.push(self.mlm_w.view_mut().into_dyn());
        out.push(self.mlm_b.view_mut().into_dyn());
        out
    }
}

#[cfg(test)]
mod tests;
