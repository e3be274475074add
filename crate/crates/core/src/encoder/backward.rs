use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Axis};

use super::{EncoderParams, EncoderTrace, LayerCache, LnCache};
use crate::scalar::Scalar;
use crate::tokenizer::TokenSequence;

/// Backward pass of `y = gamma * xhat + beta`; returns d(pre-norm input).
fn layer_norm_backward<T: Scalar>(
    dy: &Array2<T>,
    cache: &LnCache<T>,
    gamma: &Array1<T>,
    d_gamma: &mut Array1<T>,
    d_beta: &mut Array1<T>,
) -> Array2<T> {
    *d_gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
    *d_beta += &dy.sum_axis(Axis(0));
    let width = T::of(dy.ncols() as f64);
    let mut dz = dy * gamma;
    for ((mut row, xhat), &inv) in dz
        .rows_mut()
        .into_iter()
        .zip(cache.xhat.rows())
        .zip(cache.inv_std.iter())
    {
        let mean_d = row.sum() / width;
        let mean_dx = row.iter().zip(xhat).map(|(&d, &x)| d * x).sum::<T>() / width;
        row.zip_mut_with(&xhat, |d, &x| *d = inv * (*d - mean_d - x * mean_dx));
    }
    dz
}

/// `c += a · b`
fn acc<T: Scalar>(c: &mut Array2<T>, a: &ndarray::ArrayView2<'_, T>, b: &ndarray::ArrayView2<'_, T>) {
    general_mat_mul(T::one(), a, b, T::one(), c);
}

impl<T: Scalar> EncoderParams<T> {
    /// Accumulates into `grads` the parameter gradient of a loss whose
    /// derivative with respect to the last hidden layer is `d_last`.
    pub(crate) fn backward(
        &self,
        tokens: &TokenSequence,
        trace: &EncoderTrace<T>,
        caches: &[LayerCache<T>],
        d_last: Array2<T>,
        grads: &mut EncoderParams<T>,
    ) {
        let cfg = &self.config;
        let dh = cfg.head_dim();
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut dy = d_last;

        for (li, (layer, cache)) in self.layers.iter().zip(caches).enumerate().rev() {
            let g = &mut grads.layers[li];

            let dz2 = layer_norm_backward(&dy, &cache.ln2, &layer.ln2_gamma, &mut g.ln2_gamma, &mut g.ln2_beta);
            acc(&mut g.w2, &cache.h_act.t(), &dz2.view());
            g.b2 += &dz2.sum_axis(Axis(0));
            let mut dh_pre = dz2.dot(&layer.w2.t());
            dh_pre.zip_mut_with(&cache.h_pre, |d, &p| {
                if p <= T::zero() {
                    *d = T::zero();
                }
            });
            acc(&mut g.w1, &cache.y1.t(), &dh_pre.view());
            g.b1 += &dh_pre.sum_axis(Axis(0));
            let dy1 = dz2 + dh_pre.dot(&layer.w1.t());

            let dz1 = layer_norm_backward(&dy1, &cache.ln1, &layer.ln1_gamma, &mut g.ln1_gamma, &mut g.ln1_beta);
            acc(&mut g.wo, &cache.ctx.t(), &dz1.view());
            g.bo += &dz1.sum_axis(Axis(0));
            let dctx = dz1.dot(&layer.wo.t());

            let n = dz1.nrows();
            let mut dq = Array2::zeros((n, cfg.hidden));
            let mut dk = Array2::zeros((n, cfg.hidden));
            let mut dv = Array2::zeros((n, cfg.hidden));
            for (hd, a) in trace.attention[li].iter().enumerate() {
                let cols = s![.., hd * dh..(hd + 1) * dh];
                let dctx_h = dctx.slice(cols);
                let mut ds = dctx_h.dot(&cache.v.slice(cols).t());
                dv.slice_mut(cols).assign(&a.t().dot(&dctx_h));
                // softmax backward: dS = A ⊙ (dA − rowsum(dA ⊙ A))
                for (mut drow, arow) in ds.rows_mut().into_iter().zip(a.rows()) {
                    let dot = drow.iter().zip(arow).map(|(&d, &p)| d * p).sum::<T>();
                    drow.zip_mut_with(&arow, |d, &p| *d = p * (*d - dot) * scale);
                }
                dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
                dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
            }

            let xt = cache.x.t();
            acc(&mut g.wq, &xt, &dq.view());
            acc(&mut g.wk, &xt, &dk.view());
            acc(&mut g.wv, &xt, &dv.view());
            g.bq += &dq.sum_axis(Axis(0));
            g.bk += &dk.sum_axis(Axis(0));
            g.bv += &dv.sum_axis(Axis(0));

            let mut dx = dz1;
            acc(&mut dx, &dq.view(), &layer.wq.t());
            acc(&mut dx, &dk.view(), &layer.wk.t());
            acc(&mut dx, &dv.view(), &layer.wv.t());
            dy = dx;
        }

        for (i, (&id, row)) in tokens.ids.iter().zip(dy.rows()).enumerate() {
            let mut t = grads.tok_emb.row_mut(id as usize);
            t += &row;
            let mut p = grads.pos_emb.row_mut(i);
            p += &row;
        }
    }
}
