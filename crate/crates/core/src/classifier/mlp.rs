use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::{check_labels, EpochLog, TrainHyper};
use crate::error::{Error, Result};
use crate::io::{Section, TensorData};
use crate::optim::{Adam, AdamConfig, ParamSet};
use crate::rng::{derive_seed, rng_from_seed, Rng};
use crate::scalar::{bce_with_logit, sigmoid, relu, Scalar};

const SECTION_KIND: [u8; 4] = *b"MLPP";
pub const HIDDEN_LAYERS: usize = 3;

/// Width rule: half again the input size, rounded down to a multiple of 50
/// while staying above the input size. 1024 inputs give 1500.
pub fn default_width(d_in: usize) -> usize {
    let w = (d_in + d_in / 2).max(d_in + 1);
    let rounded = w - w % 50;
    if rounded > d_in {
        rounded
    } else {
        w
    }
}

/// Three ReLU hidden layers of equal width and a single logit output.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<T> {
    pub weights: Vec<Array2<T>>,
    pub biases: Vec<Array1<T>>,
    /// Probability of dropping a hidden unit during training.
    pub dropout: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropoutMode {
    Eval,
    /// Dropout masks drawn from this seed.
    Train(u64),
}

struct ForwardCache<T> {
    /// Layer inputs: x, then each hidden activation after dropout.
    inputs: Vec<Array2<T>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Array2<T>>,
    /// Per-unit multipliers (0 or 1/(1-p)) when training with dropout.
    masks: Vec<Option<Array2<T>>>,
    logits: Array1<T>,
}

/// Zeroes each entry with probability `p` and scales survivors by 1/(1−p).
pub fn dropout_mask<T: Scalar>(shape: (usize, usize), p: f64, rng: &mut Rng) -> Array2<T> {
    let keep = T::of(1.0 / (1.0 - p));
    Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() < p { T::zero() } else { keep })
}

impl<T: Scalar> MlpParams<T> {
    pub fn init(d_in: usize, width: usize, dropout: f64, seed: u64) -> Result<Self> {
        if d_in == 0 || width == 0 {
            return Err(Error::invalid(format!("MLP dims must be positive (d_in={d_in}, width={width})")));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::invalid(format!("dropout {dropout} not in [0, 1)")));
        }
        let mut rng = rng_from_seed(seed);
        let widths = [d_in, width, width, width, 1];
        let mut weights = Vec::with_capacity(4);
        let mut biases = Vec::with_capacity(4);
        for pair in widths.windows(2) {
            let dist = Normal::new(0.0, 1.0 / (pair[0] as f64).sqrt()).expect("valid std");
            weights.push(Array2::from_shape_simple_fn((pair[0], pair[1]), || T::of(dist.sample(&mut rng))));
            biases.push(Array1::zeros(pair[1]));
        }
        Ok(MlpParams {
            weights,
            biases,
            dropout,
        })
    }

    pub fn d_in(&self) -> usize {
        self.weights[0].nrows()
    }

    pub fn width(&self) -> usize {
        self.weights[0].ncols()
    }

    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        self.weights.iter().map(|w| w.dim()).collect()
    }

    fn forward_batch(&self, x: ArrayView2<'_, T>, mode: DropoutMode) -> ForwardCache<T> {
        let mut rng = match mode {
            DropoutMode::Train(seed) if self.dropout > 0.0 => Some(rng_from_seed(seed)),
            _ => None,
        };
        let n_layers = self.weights.len();
        let mut inputs = vec![x.to_owned()];
        let mut pre = Vec::with_capacity(n_layers - 1);
        let mut masks = Vec::with_capacity(n_layers - 1);
        for (w, b) in self.weights[..n_layers - 1].iter().zip(&self.biases) {
            let z = inputs.last().expect("input").dot(w) + b;
            let mut a = z.mapv(relu);
            let mask = rng.as_mut().map(|r| dropout_mask::<T>(a.dim(), self.dropout, r));
            if let Some(m) = &mask {
                a *= m;
            }
            pre.push(z);
            masks.push(mask);
            inputs.push(a);
        }
        let logits = (inputs.last().expect("hidden").dot(&self.weights[n_layers - 1]) + &self.biases[n_layers - 1])
            .remove_axis(Axis(1));
        ForwardCache {
            inputs,
            pre,
            masks,
            logits,
        }
    }

    /// Probability of the positive class for one embedding.
    pub fn forward(&self, x: ArrayView1<'_, T>, mode: DropoutMode) -> Result<T> {
        if x.len() != self.d_in() {
            return Err(Error::Dimension {
                expected: self.d_in(),
                got: x.len(),
            });
        }
        let cache = self.forward_batch(x.insert_axis(Axis(0)), mode);
        Ok(sigmoid(cache.logits[0]))
    }

    /// Eval-mode probabilities for every row.
    pub fn predict_batch(&self, x: ArrayView2<'_, T>) -> Result<Array1<T>> {
        if x.ncols() != self.d_in() {
            return Err(Error::Dimension {
                expected: self.d_in(),
                got: x.ncols(),
            });
        }
        let mut out = Vec::with_capacity(x.nrows());
        for chunk in x.axis_chunks_iter(Axis(0), 1024) {
            out.extend(self.forward_batch(chunk, DropoutMode::Eval).logits.iter().map(|&z| sigmoid(z)));
        }
        Ok(Array1::from(out))
    }

    /// Mean BCE over the batch; when `grads` is given, accumulates its gradient.
    /// Dropped units pass no gradient back, so their incoming weights are
    /// untouched by that sample.
    fn loss_and_grad(&self, x: ArrayView2<'_, T>, y: &[u8], mode: DropoutMode, grads: Option<&mut Self>) -> (T, Array1<T>) {
        let cache = self.forward_batch(x, mode);
        let n = T::of(y.len() as f64);
        let targets: Array1<T> = y.iter().map(|&l| T::of(f64::from(l))).collect();
        let loss = cache
            .logits
            .iter()
            .zip(&targets)
            .map(|(&z, &t)| bce_with_logit(z, t))
            .sum::<T>()
            / n;
        if let Some(g) = grads {
            let mut delta: Array2<T> = ((cache.logits.mapv(sigmoid) - &targets) / n).insert_axis(Axis(1));
            for l in (0..self.weights.len()).rev() {
                ndarray::linalg::general_mat_mul(T::one(), &cache.inputs[l].t(), &delta, T::one(), &mut g.weights[l]);
                g.biases[l] += &delta.sum_axis(Axis(0));
                if l == 0 {
                    break;
                }
                let mut d_act = delta.dot(&self.weights[l].t());
                if let Some(m) = &cache.masks[l - 1] {
                    d_act *= m;
                }
                d_act.zip_mut_with(&cache.pre[l - 1], |d, &z| {
                    if z <= T::zero() {
                        *d = T::zero();
                    }
                });
                delta = d_act;
            }
        }
        (loss, cache.logits)
    }

    pub fn to_section(&self) -> Section {
        let mut s = Section::new(SECTION_KIND);
        s.config = vec![self.d_in() as u64, self.width() as u64, HIDDEN_LAYERS as u64, self.dropout.to_bits()];
        s.tensors = self.tensors().into_iter().map(TensorData::from_view).collect();
        s
    }

    pub fn from_section(section: &Section) -> Result<Self> {
        section.expect_kind(SECTION_KIND)?;
        let d_in = section.config_at(0)? as usize;
        let width = section.config_at(1)? as usize;
        if section.config_at(2)? != HIDDEN_LAYERS as u64 {
            return Err(Error::Format("unsupported MLP depth".into()));
        }
        let dropout = f64::from_bits(section.config_at(3)?);
        let mut params = Self::init(d_in, width, dropout, 0)?;
        crate::encoder::load_tensors(&mut params, &section.tensors)?;
        Ok(params)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_section().save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_section(&Section::load(path)?)
    }
}

impl<T: Scalar> ParamSet<T> for MlpParams<T> {
    fn tensors(&self) -> Vec<ArrayViewD<'_, T>> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w.view().into_dyn(), b.view().into_dyn()])
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<ArrayViewMutD<'_, T>> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w.view_mut().into_dyn(), b.view_mut().into_dyn()])
            .collect()
    }
}

fn accuracy_of<T: Scalar>(logits: &Array1<T>, y: &[u8]) -> usize {
    logits
        .iter()
        .zip(y)
        .filter(|(&z, &l)| u8::from(z > T::zero()) == l)
        .count()
}

/// Mini-batch Adam(W) on binary cross-entropy. Batches are capped at the
/// dataset size; every epoch reshuffles with a seeded generator and every
/// batch draws fresh dropout masks.
pub fn train_mlp<T: Scalar>(
    init: MlpParams<T>,
    x: ArrayView2<'_, T>,
    y: &[u8],
    hyper: &TrainHyper,
    validation: Option<(ArrayView2<'_, T>, &[u8])>,
) -> Result<(MlpParams<T>, Vec<EpochLog>)> {
    hyper.validate()?;
    if x.nrows() == 0 {
        return Err(Error::invalid("training set is empty"));
    }
    if x.nrows() != y.len() {
        return Err(Error::Dimension {
            expected: x.nrows(),
            got: y.len(),
        });
    }
    if x.ncols() != init.d_in() {
        return Err(Error::Dimension {
            expected: init.d_in(),
            got: x.ncols(),
        });
    }
    check_labels(y)?;
    if let Some((vx, vy)) = validation {
        check_labels(vy)?;
        if vx.nrows() != vy.len() {
            return Err(Error::Dimension {
                expected: vx.nrows(),
                got: vy.len(),
            });
        }
    }

    let batch = hyper.batch.min(x.nrows());
    let mut params = init;
    let mut opt = Adam::new(AdamConfig::new(hyper.lr, hyper.weight_decay));
    let mut grads = params.zeros_like();
    let mut shuffle_rng = rng_from_seed(derive_seed(hyper.seed, "mlp-shuffle"));
    let dropout_root = derive_seed(hyper.seed, "mlp-dropout");
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    let mut log = Vec::with_capacity(hyper.epochs);
    let mut step: u64 = 0;

    for epoch in 1..=hyper.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total_loss = 0.0;
        let mut correct = 0usize;
        for (b, idx) in order.chunks(batch).enumerate() {
            let xb = x.select(Axis(0), idx);
            let yb: Vec<u8> = idx.iter().map(|&i| y[i]).collect();
            grads.fill_zero();
            let mode = DropoutMode::Train(dropout_root.wrapping_add(step));
            let (loss, logits) = params.loss_and_grad(xb.view(), &yb, mode, Some(&mut grads));
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("MLP loss is {loss} at epoch {epoch}, batch {b}")));
            }
            total_loss += loss.as_f64() * idx.len() as f64;
            correct += accuracy_of(&logits, &yb);
            opt.step(&mut params, &grads);
            step += 1;
        }
        let val_acc = match validation {
            Some((vx, vy)) if !vy.is_empty() => {
                let p = params.predict_batch(vx)?;
                let hits = p.iter().zip(vy).filter(|(&p, &l)| u8::from(p > T::of(0.5)) == l).count();
                Some(hits as f64 / vy.len() as f64)
            }
            _ => None,
        };
        log.push(EpochLog {
            epoch,
            loss: total_loss / x.nrows() as f64,
            train_acc: correct as f64 / x.nrows() as f64,
            val_acc,
        });
    }
    Ok((params, log))
}

/// Worst relative error between backpropagated and central-difference
/// gradients of the mean BCE over `(x, y)`, for every parameter.
pub fn gradient_check(params: &MlpParams<f64>, x: ArrayView2<'_, f64>, y: &[u8]) -> Result<f64> {
    if params.dropout != 0.0 {
        return Err(Error::invalid("gradient check requires dropout 0"));
    }
    if x.ncols() != params.d_in() || x.nrows() != y.len() {
        return Err(Error::Dimension {
            expected: params.d_in(),
            got: x.ncols(),
        });
    }
    check_labels(y)?;
    let mut grads = params.zeros_like();
    params.loss_and_grad(x, y, DropoutMode::Eval, Some(&mut grads));
    Ok(crate::gradcheck::max_relative_error(
        params,
        &grads,
        |p| p.loss_and_grad(x, y, DropoutMode::Eval, None).0,
        crate::gradcheck::FD_STEP,
    ))
}
