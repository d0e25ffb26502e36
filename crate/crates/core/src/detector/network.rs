use ndarray::{Array1, Array2, Array4, ArrayD, ArrayView1, ArrayView2, Axis, Ix1, Ix2, IxDyn, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::descriptor::{ArchitectureDescriptor, NormKind};
use super::layers::{self, BnCache, Real};
use crate::error::{Error, Result};

const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct BnSlots {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct BlockSlots {
    kernel: usize,
    pool: bool,
    w: usize,
    b: usize,
    bn: Option<BnSlots>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct HeadSlots {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    /// Batch statistics for BN, dropout masks drawn from the given seed.
    Train { dropout_seed: u64 },
    Eval,
}

/// Plain CNN: `[conv -> (BN) -> ReLU -> (pool)]* -> GAP -> dense -> ReLU ->
/// dropout -> dense(1)`. Parameters live in a flat registry so optimisers
/// and serialisation can treat them uniformly.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T: Real> {
    desc: ArchitectureDescriptor,
    params: Vec<ArrayD<T>>,
    buffers: Vec<ArrayD<T>>,
    blocks: Vec<BlockSlots>,
    head: HeadSlots,
}

#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    inputs: Vec<Array4<T>>,
    bn: Vec<Option<BnCache<T>>>,
    acts: Vec<Array4<T>>,
    pool_idx: Vec<Option<Array4<u32>>>,
    last_pooled_shape: (usize, usize, usize, usize),
    gap: Array2<T>,
    hidden: Array2<T>,
    dropped: Array2<T>,
    mask: Option<Array2<T>>,
    pub logits: Array1<T>,
}

impl<T: Real> ForwardCache<T> {
    /// Post-ReLU, pre-pool activation of the last conv block.
    pub fn last_activation(&self) -> &Array4<T> {
        self.acts.last().expect("at least one block")
    }

    /// Per-block (mean, biased variance) from batch statistics, if any.
    pub fn batch_stats(&self) -> Vec<Option<(&[f64], &[f64])>> {
        self.bn
            .iter()
            .map(|c| c.as_ref().map(|c| (c.mean.as_slice(), c.var.as_slice())))
            .collect()
    }
}

impl<T: Real> Network<T> {
    pub fn new(desc: &ArchitectureDescriptor, seed: u64) -> Result<Self> {
        desc.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params: Vec<ArrayD<T>> = Vec::new();
        let mut buffers: Vec<ArrayD<T>> = Vec::new();
        let push = |v: &mut Vec<ArrayD<T>>, a: ArrayD<T>| {
            v.push(a);
            v.len() - 1
        };
        let normal = |shape: &[usize], std: f64, rng: &mut ChaCha8Rng| {
            ArrayD::from_shape_fn(IxDyn(shape), |_| {
                let z: f64 = StandardNormal.sample(rng);
                T::of(z * std)
            })
        };
        let mut c_in = desc.input_shape.0;
        let mut blocks = Vec::new();
        for spec in &desc.conv_blocks {
            let fan_in = c_in * spec.kernel * spec.kernel;
            let w = push(&mut params, normal(&[spec.filters, fan_in], (2.0 / fan_in as f64).sqrt(), &mut rng));
            let b = push(&mut params, ArrayD::zeros(IxDyn(&[spec.filters])));
            let bn = match desc.normalization {
                NormKind::Batch => Some(BnSlots {
                    gamma: push(&mut params, ArrayD::ones(IxDyn(&[spec.filters]))),
                    beta: push(&mut params, ArrayD::zeros(IxDyn(&[spec.filters]))),
                    mean: push(&mut buffers, ArrayD::zeros(IxDyn(&[spec.filters]))),
                    var: push(&mut buffers, ArrayD::ones(IxDyn(&[spec.filters]))),
                }),
                NormKind::None => None,
            };
            blocks.push(BlockSlots { kernel: spec.kernel, pool: spec.pool, w, b, bn });
            c_in = spec.filters;
        }
        let u = desc.dense_units;
        let head = HeadSlots {
            w1: push(&mut params, normal(&[u, c_in], (2.0 / c_in as f64).sqrt(), &mut rng)),
            b1: push(&mut params, ArrayD::zeros(IxDyn(&[u]))),
            w2: push(&mut params, normal(&[1, u], (1.0 / u as f64).sqrt(), &mut rng)),
            b2: push(&mut params, ArrayD::zeros(IxDyn(&[1]))),
        };
        Ok(Self { desc: desc.clone(), params, buffers, blocks, head })
    }

    pub fn descriptor(&self) -> &ArchitectureDescriptor {
        &self.desc
    }

    pub fn params(&self) -> &[ArrayD<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [ArrayD<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[ArrayD<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [ArrayD<T>] {
        &mut self.buffers
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Zeroes the output layer, which makes every input gradient vanish.
    pub fn zero_output_layer(&mut self) {
        self.params[self.head.w2].fill(T::zero());
        self.params[self.head.b2].fill(T::zero());
    }

    fn p1(&self, i: usize) -> ArrayView1<'_, T> {
        self.params[i].view().into_dimensionality::<Ix1>().expect("1-d parameter")
    }

    fn p2(&self, i: usize) -> ArrayView2<'_, T> {
        self.params[i].view().into_dimensionality::<Ix2>().expect("2-d parameter")
    }

    fn b1(&self, i: usize) -> Array1<T> {
        self.buffers[i].view().into_dimensionality::<Ix1>().expect("1-d buffer").to_owned()
    }

    pub fn check_input(&self, x: &Array4<T>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if (c, h, w) != self.desc.input_shape || x.dim().0 == 0 {
            return Err(Error::ShapeMismatch(format!(
                "batch {:?} does not match input shape {:?}",
                x.dim(),
                self.desc.input_shape
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Array4<T>, mode: Mode) -> Result<ForwardCache<T>> {
        self.check_input(x)?;
        let n = self.blocks.len();
        let mut inputs = Vec::with_capacity(n);
        let mut bn = Vec::with_capacity(n);
        let mut acts = Vec::with_capacity(n);
        let mut pool_idx = Vec::with_capacity(n);
        let mut cur = x.clone();
        for blk in &self.blocks {
            let b = self.p1(blk.b).to_owned();
            let z = layers::conv_forward(&cur, self.p2(blk.w), &b, blk.kernel);
            let (y, cache) = match (blk.bn, mode) {
                (None, _) => (z, None),
                (Some(s), Mode::Train { .. }) => {
                    let (y, c) = layers::bn_train_forward(&z, &self.p1(s.gamma).to_owned(), &self.p1(s.beta).to_owned());
                    (y, Some(c))
                }
                (Some(s), Mode::Eval) => (
                    layers::bn_eval_forward(
                        &z,
                        &self.p1(s.gamma).to_owned(),
                        &self.p1(s.beta).to_owned(),
                        &self.b1(s.mean),
                        &self.b1(s.var),
                    ),
                    None,
                ),
            };
            let a = layers::relu(y);
            inputs.push(std::mem::replace(&mut cur, Array4::zeros((0, 0, 0, 0))));
            bn.push(cache);
            if blk.pool {
                let (p, idx) = layers::maxpool_forward(&a);
                cur = p;
                pool_idx.push(Some(idx));
            } else {
                cur = a.clone();
                pool_idx.push(None);
            }
            acts.push(a);
        }
        let last_pooled_shape = cur.dim();
        let (gap, hidden, dropped, mask, logits) = self.head_forward(&cur, mode);
        Ok(ForwardCache {
            inputs,
            bn,
            acts,
            pool_idx,
            last_pooled_shape,
            gap,
            hidden,
            dropped,
            mask,
            logits,
        })
    }

    #[allow(clippy::type_complexity)]
    fn head_forward(&self, pooled: &Array4<T>, mode: Mode) -> (Array2<T>, Array2<T>, Array2<T>, Option<Array2<T>>, Array1<T>) {
        let (bs, f, h, w) = pooled.dim();
        let inv = T::of(1.0 / (h * w) as f64);
        let gap = pooled
            .to_shape((bs, f, h * w))
            .expect("pooled layout")
            .sum_axis(Axis(2))
            .mapv(|v| v * inv);
        let mut hidden = gap.dot(&self.p2(self.head.w1).t());
        hidden += &self.p1(self.head.b1);
        let mut dropped = hidden.mapv(|v| v.max(T::zero()));
        let p = self.desc.dropout;
        let mask = match mode {
            Mode::Train { dropout_seed } if p > 0.0 => {
                let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
                let keep = T::of(1.0 / (1.0 - p));
                let m = Array2::from_shape_fn(dropped.raw_dim(), |_| {
                    if rng.gen::<f64>() >= p {
                        keep
                    } else {
                        T::zero()
                    }
                });
                dropped *= &m;
                Some(m)
            }
            _ => None,
        };
        let logits = dropped.dot(&self.p2(self.head.w2).t()).column(0).mapv(|v| v + self.params[self.head.b2][0]);
        (gap, hidden, dropped, mask, logits)
    }

    /// Logits as a function of the last block's post-ReLU activation, in
    /// eval mode.
    pub fn head_logits(&self, last_act: &Array4<T>) -> Array1<T> {
        let last = self.blocks.last().expect("at least one block");
        let pooled = if last.pool {
            layers::maxpool_forward(last_act).0
        } else {
            last_act.clone()
        };
        self.head_forward(&pooled, Mode::Eval).4
    }

    pub fn logits(&self, x: &Array4<T>) -> Result<Array1<T>> {
        Ok(self.forward(x, Mode::Eval)?.logits)
    }

    /// Backprop from `dlogits` to the last block's activation. Head
    /// parameter gradients are written into `grads` when given.
    fn head_backward(&self, cache: &ForwardCache<T>, dlogits: ArrayView1<'_, T>, mut grads: Option<&mut Vec<ArrayD<T>>>) -> Array4<T> {
        let bs = dlogits.len();
        let dz = dlogits.to_owned().into_shape_with_order((bs, 1)).expect("column");
        let mut dd = dz.dot(&self.p2(self.head.w2));
        if let Some(g) = grads.as_deref_mut() {
            g[self.head.w2] = dz.t().dot(&cache.dropped).into_dyn();
            g[self.head.b2] = Array1::from_elem(1, dlogits.sum()).into_dyn();
        }
        if let Some(m) = &cache.mask {
            dd *= m;
        }
        Zip::from(&mut dd).and(&cache.hidden).for_each(|d, &h| {
            if h <= T::zero() {
                *d = T::zero();
            }
        });
        if let Some(g) = grads.as_deref_mut() {
            g[self.head.w1] = dd.t().dot(&cache.gap).into_dyn();
            g[self.head.b1] = dd.sum_axis(Axis(0)).into_dyn();
        }
        let dgap = dd.dot(&self.p2(self.head.w1));
        let (b, f, h, w) = cache.last_pooled_shape;
        let inv = T::of(1.0 / (h * w) as f64);
        let dpooled = Array4::from_shape_fn((b, f, h, w), |(s, c, _, _)| dgap[[s, c]] * inv);
        let last = self.blocks.len() - 1;
        match &cache.pool_idx[last] {
            Some(idx) => layers::maxpool_backward(&dpooled, idx, cache.acts[last].dim()),
            None => dpooled,
        }
    }

    /// Gradient of `sum(dlogits * logits)` w.r.t. the last block's
    /// post-ReLU activation.
    pub fn last_activation_grad(&self, cache: &ForwardCache<T>, dlogits: ArrayView1<'_, T>) -> Array4<T> {
        self.head_backward(cache, dlogits, None)
    }

    /// Parameter gradients of `sum(dlogits * logits)`.
    pub fn backward(&self, cache: &ForwardCache<T>, dlogits: ArrayView1<'_, T>) -> Vec<ArrayD<T>> {
        let mut grads: Vec<ArrayD<T>> = self.params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
        let mut da = self.head_backward(cache, dlogits, Some(&mut grads));
        for i in (0..self.blocks.len()).rev() {
            let blk = self.blocks[i];
            let mut dz = layers::relu_backward(da, &cache.acts[i]);
            if let Some(s) = blk.bn {
                let gamma = self.p1(s.gamma).to_owned();
                match &cache.bn[i] {
                    Some(bc) => {
                        let (dx, dg, db) = layers::bn_backward(&dz, bc, &gamma);
                        grads[s.gamma] = dg.into_dyn();
                        grads[s.beta] = db.into_dyn();
                        dz = dx;
                    }
                    None => {
                        // eval-mode normalisation is a fixed per-channel affine map
                        let rv = self.b1(s.var);
                        for (c, mut ch) in dz.axis_iter_mut(Axis(1)).enumerate() {
                            let scale = gamma[c] / (rv[c] + T::of(layers::BN_EPS)).sqrt();
                            ch.mapv_inplace(|v| v * scale);
                        }
                    }
                }
            }
            let (dw, db, dx) = layers::conv_backward(&cache.inputs[i], self.p2(blk.w), blk.kernel, &dz, i > 0);
            grads[blk.w] = dw.into_dyn();
            grads[blk.b] = db.into_dyn();
            if i == 0 {
                break;
            }
            let dx = dx.expect("requested");
            da = match &cache.pool_idx[i - 1] {
                Some(idx) => layers::maxpool_backward(&dx, idx, cache.acts[i - 1].dim()),
                None => dx,
            };
        }
        grads
    }

    /// Exponential moving update of BN running statistics from a training
    /// forward pass (unbiased variance, momentum 0.1).
    pub fn update_running_stats(&mut self, cache: &ForwardCache<T>) {
        for (blk, bc) in self.blocks.clone().iter().zip(&cache.bn) {
            let (Some(s), Some(bc)) = (blk.bn, bc) else { continue };
            let n = (bc.xhat.len() / bc.mean.len()) as f64;
            let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            for c in 0..bc.mean.len() {
                let m = &mut self.buffers[s.mean][c];
                *m = T::of((1.0 - BN_MOMENTUM) * m.f64() + BN_MOMENTUM * bc.mean[c]);
                let v = &mut self.buffers[s.var][c];
                *v = T::of((1.0 - BN_MOMENTUM) * v.f64() + BN_MOMENTUM * bc.var[c] * unbias);
            }
        }
    }

    /// Same architecture and values in another float type.
    pub fn cast<U: Real>(&self) -> Network<U> {
        let conv = |v: &Vec<ArrayD<T>>| v.iter().map(|a| a.mapv(|x| U::of(x.f64()))).collect();
        Network {
            desc: self.desc.clone(),
            params: conv(&self.params),
            buffers: conv(&self.buffers),
            blocks: self.blocks.clone(),
            head: self.head,
        }
    }
}
