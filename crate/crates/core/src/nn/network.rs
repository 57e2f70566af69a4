use ndarray::{Array1, Array2, Array4, ArrayD, Axis, IxDyn};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::ops::{self, BnCache, ConvCache, ConvGeom};
use super::params::ParamSet;
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;

/// Architecture of the desk-scale residual classifier.
///
/// One basic residual block per entry of `widths`; the first stage keeps the
/// input resolution and every later stage halves it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub n_classes: usize,
    pub widths: Vec<usize>,
}

impl NetworkConfig {
    pub fn new(in_channels: usize, n_classes: usize, widths: Vec<usize>) -> Self {
        Self {
            in_channels,
            n_classes,
            widths,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.n_classes == 0 || self.widths.is_empty() {
            return Err(Error::InvalidArgument(
                "network needs input channels, classes and at least one stage".into(),
            ));
        }
        if self.widths.contains(&0) {
            return Err(Error::InvalidArgument("stage widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalisation layers.
    Train,
    /// Running statistics in normalisation layers.
    Eval,
}

#[derive(Clone, Debug)]
struct Conv {
    weight: usize,
    geom: ConvGeom,
}

#[derive(Clone, Debug)]
struct Bn {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Clone, Debug)]
struct Block {
    conv_a: Conv,
    bn_a: Bn,
    conv_b: Conv,
    bn_b: Bn,
    shortcut: Option<(Conv, Bn)>,
}

#[derive(Clone, Debug)]
struct Layout {
    stem: Conv,
    stem_bn: Bn,
    blocks: Vec<Block>,
    fc_weight: usize,
    fc_bias: usize,
}

struct BlockTape<T> {
    conv_a: ConvCache<T>,
    bn_a: BnCache<T>,
    mid: Array4<T>,
    conv_b: ConvCache<T>,
    bn_b: BnCache<T>,
    shortcut: Option<(ConvCache<T>, BnCache<T>)>,
    out: Array4<T>,
}

/// Activations recorded by a forward pass, consumed by [`Network::backward`].
pub struct Tape<T> {
    mode: Mode,
    stem_conv: ConvCache<T>,
    stem_bn: BnCache<T>,
    stem_out: Array4<T>,
    blocks: Vec<BlockTape<T>>,
    pooled: Array2<T>,
    pub logits: Array2<T>,
}

impl<T: Scalar> Tape<T> {
    /// Output of residual stage `stage` (after its final ReLU).
    pub fn stage_output(&self, stage: usize) -> &Array4<T> {
        &self.blocks[stage].out
    }

    pub fn n_stages(&self) -> usize {
        self.blocks.len()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Want {
    pub params: bool,
    pub input: bool,
}

impl Want {
    pub const PARAMS: Want = Want {
        params: true,
        input: false,
    };
    pub const INPUT: Want = Want {
        params: false,
        input: true,
    };
    pub const BOTH: Want = Want {
        params: true,
        input: true,
    };
}

pub struct Gradients<T> {
    pub params: Option<ParamSet<T>>,
    pub input: Option<Array4<T>>,
}

/// Small pre-activation-free ResNet: conv-BN-ReLU stem, basic residual
/// blocks, global average pooling and a linear head.
#[derive(Clone, Debug)]
pub struct Network<T> {
    config: NetworkConfig,
    params: ParamSet<T>,
    buffers: ParamSet<T>,
    layout: Layout,
}

fn add_bn<T: Scalar>(name: &str, c: usize, params: &mut ParamSet<T>, buffers: &mut ParamSet<T>) -> Bn {
    Bn {
        gamma: params.push(format!("{name}.gamma"), ArrayD::from_elem(IxDyn(&[c]), T::one())),
        beta: params.push(format!("{name}.beta"), ArrayD::zeros(IxDyn(&[c]))),
        mean: buffers.push(format!("{name}.running_mean"), ArrayD::zeros(IxDyn(&[c]))),
        var: buffers.push(format!("{name}.running_var"), ArrayD::from_elem(IxDyn(&[c]), T::one())),
    }
}

fn add_conv<T: Scalar>(name: &str, geom: ConvGeom, params: &mut ParamSet<T>) -> Conv {
    Conv {
        weight: params.push(format!("{name}.weight"), ArrayD::zeros(IxDyn(&geom.weight_shape()))),
        geom,
    }
}

impl<T: Scalar> Network<T> {
    /// Builds a network with all parameters zero (BN scales one).
    pub fn zeroed(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut buffers = ParamSet::new();
        let w0 = config.widths[0];
        let stem = add_conv(
            "stem.conv",
            ConvGeom {
                in_c: config.in_channels,
                out_c: w0,
                kernel: 3,
                stride: 1,
                pad: 1,
            },
            &mut params,
        );
        let stem_bn = add_bn("stem.bn", w0, &mut params, &mut buffers);
        let mut blocks = Vec::new();
        let mut in_c = w0;
        for (i, &w) in config.widths.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            let p = format!("stage{i}");
            let conv_a = add_conv(
                &format!("{p}.conv_a"),
                ConvGeom {
                    in_c,
                    out_c: w,
                    kernel: 3,
                    stride,
                    pad: 1,
                },
                &mut params,
            );
            let bn_a = add_bn(&format!("{p}.bn_a"), w, &mut params, &mut buffers);
            let conv_b = add_conv(
                &format!("{p}.conv_b"),
                ConvGeom {
                    in_c: w,
                    out_c: w,
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                },
                &mut params,
            );
            let bn_b = add_bn(&format!("{p}.bn_b"), w, &mut params, &mut buffers);
            let shortcut = (stride != 1 || in_c != w).then(|| {
                let conv = add_conv(
                    &format!("{p}.shortcut.conv"),
                    ConvGeom {
                        in_c,
                        out_c: w,
                        kernel: 1,
                        stride,
                        pad: 0,
                    },
                    &mut params,
                );
                let bn = add_bn(&format!("{p}.shortcut.bn"), w, &mut params, &mut buffers);
                (conv, bn)
            });
            blocks.push(Block {
                conv_a,
                bn_a,
                conv_b,
                bn_b,
                shortcut,
            });
            in_c = w;
        }
        let fc_weight = params.push("fc.weight", ArrayD::zeros(IxDyn(&[config.n_classes, in_c])));
        let fc_bias = params.push("fc.bias", ArrayD::zeros(IxDyn(&[config.n_classes])));
        Ok(Self {
            config,
            params,
            buffers,
            layout: Layout {
                stem,
                stem_bn,
                blocks,
                fc_weight,
                fc_bias,
            },
        })
    }

    /// He-normal convolution weights, uniform ±1/√fan_in head.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        let mut net = Self::zeroed(config)?;
        let mut r = rng::stream(seed, rng::INIT, &[]);
        let mut convs = vec![&net.layout.stem];
        for b in &net.layout.blocks {
            convs.push(&b.conv_a);
            convs.push(&b.conv_b);
            if let Some((c, _)) = &b.shortcut {
                convs.push(c);
            }
        }
        let convs: Vec<(usize, usize)> = convs.iter().map(|c| (c.weight, c.geom.fan_in())).collect();
        for (idx, fan_in) in convs {
            let std = (2.0 / fan_in as f64).sqrt();
            net.params.get_mut(idx).mapv_inplace(|_| {
                let z: f64 = StandardNormal.sample(&mut r);
                T::lit(z * std)
            });
        }
        let fan = *net.config.widths.last().expect("validated") as f64;
        let bound = 1.0 / fan.sqrt();
        for idx in [net.layout.fc_weight, net.layout.fc_bias] {
            net.params
                .get_mut(idx)
                .mapv_inplace(|_| T::lit(r.random_range(-bound..bound)));
        }
        Ok(net)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn buffers(&self) -> &ParamSet<T> {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.buffers
    }

    pub fn n_stages(&self) -> usize {
        self.layout.blocks.len()
    }

    /// Indices of parameters that are weight matrices or kernels (rank ≥ 2).
    pub fn weight_indices(&self) -> Vec<usize> {
        (0..self.params.len())
            .filter(|&i| self.params.get(i).ndim() >= 2)
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            params: self.params.cast(),
            buffers: self.buffers.cast(),
            layout: self.layout.clone(),
        }
    }

    fn slice(&self, idx: usize) -> &[T] {
        self.params.get(idx).as_slice().expect("contiguous parameter")
    }

    fn conv(&self, x: &Array4<T>, c: &Conv) -> (Array4<T>, ConvCache<T>) {
        ops::conv_forward(x, &self.params.get(c.weight).view(), &c.geom)
    }

    fn bn(&self, x: &Array4<T>, bn: &Bn, mode: Mode) -> (Array4<T>, BnCache<T>) {
        let running = match mode {
            Mode::Train => None,
            Mode::Eval => Some((
                self.buffers.get(bn.mean).as_slice().expect("contiguous"),
                self.buffers.get(bn.var).as_slice().expect("contiguous"),
            )),
        };
        ops::bn_forward(x, self.slice(bn.gamma), self.slice(bn.beta), running)
    }

    fn check_input(&self, x: &Array4<T>) -> Result<()> {
        let (b, c, h, w) = x.dim();
        if b == 0 || c != self.config.in_channels || h < 1 || w < 1 {
            return Err(Error::Shape(format!(
                "network expects [B>=1, {}, H, W] input, got {:?}",
                self.config.in_channels,
                x.dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Array4<T>, mode: Mode) -> Result<Tape<T>> {
        self.check_input(x)?;
        let x = x.as_standard_layout().into_owned();
        let (s, stem_conv) = self.conv(&x, &self.layout.stem);
        let (mut s, stem_bn) = self.bn(&s, &self.layout.stem_bn, mode);
        ops::relu_inplace(&mut s);
        let mut cur = s.clone();
        let mut blocks = Vec::with_capacity(self.layout.blocks.len());
        for blk in &self.layout.blocks {
            let (a, conv_a) = self.conv(&cur, &blk.conv_a);
            let (mut mid, bn_a) = self.bn(&a, &blk.bn_a, mode);
            ops::relu_inplace(&mut mid);
            let (b, conv_b) = self.conv(&mid, &blk.conv_b);
            let (mut out, bn_b) = self.bn(&b, &blk.bn_b, mode);
            let shortcut = match &blk.shortcut {
                Some((c, bn)) => {
                    let (sc, cc) = self.conv(&cur, c);
                    let (sc, bc) = self.bn(&sc, bn, mode);
                    out += &sc;
                    Some((cc, bc))
                }
                None => {
                    out += &cur;
                    None
                }
            };
            ops::relu_inplace(&mut out);
            cur = out.clone();
            blocks.push(BlockTape {
                conv_a,
                bn_a,
                mid,
                conv_b,
                bn_b,
                shortcut,
                out,
            });
        }
        let pooled = ops::global_avg_pool(&cur);
        let fc_w = self
            .params
            .get(self.layout.fc_weight)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("fc weight rank");
        let fc_b = self
            .params
            .get(self.layout.fc_bias)
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("fc bias rank");
        let logits = pooled.dot(&fc_w.t()) + &fc_b;
        Ok(Tape {
            mode,
            stem_conv,
            stem_bn,
            stem_out: s,
            blocks,
            pooled,
            logits,
        })
    }

    /// Inference-mode logits.
    pub fn predict(&self, x: &Array4<T>) -> Result<Array2<T>> {
        Ok(self.forward(x, Mode::Eval)?.logits)
    }

    /// Reverse pass. `grad_logits` is the upstream gradient of the logits
    /// (absent means zero); `taps` adds upstream gradients directly at stage
    /// outputs, which is how feature-space objectives are differentiated.
    pub fn backward(
        &self,
        tape: &Tape<T>,
        grad_logits: Option<&Array2<T>>,
        taps: &[(usize, &Array4<T>)],
        want: Want,
    ) -> Result<Gradients<T>> {
        let mut grads = want.params.then(|| self.params.zeros_like());
        let last = &tape.blocks.last().expect("at least one stage").out;
        let mut d = match grad_logits {
            Some(g) => {
                if g.dim() != tape.logits.dim() {
                    return Err(Error::Shape(format!(
                        "logit gradient {:?} vs logits {:?}",
                        g.dim(),
                        tape.logits.dim()
                    )));
                }
                if let Some(gr) = grads.as_mut() {
                    let dw = g.t().dot(&tape.pooled);
                    gr.get_mut(self.layout.fc_weight).assign(&dw.into_dyn());
                    gr.get_mut(self.layout.fc_bias).assign(&g.sum_axis(Axis(0)).into_dyn());
                }
                let fc_w = self
                    .params
                    .get(self.layout.fc_weight)
                    .view()
                    .into_dimensionality::<ndarray::Ix2>()
                    .expect("fc weight rank");
                ops::global_avg_pool_backward(&g.dot(&fc_w), last.dim())
            }
            None => Array4::zeros(last.dim()),
        };
        for (i, (blk, bt)) in self.layout.blocks.iter().zip(&tape.blocks).enumerate().rev() {
            for (stage, tg) in taps {
                if *stage == i {
                    if tg.dim() != d.dim() {
                        return Err(Error::Shape(format!("tap gradient for stage {i} has wrong shape")));
                    }
                    d += *tg;
                }
            }
            ops::relu_backward_inplace(&mut d, &bt.out);
            // main branch
            let d_main = self.bn_back(&d, &blk.bn_b, &bt.bn_b, grads.as_mut());
            let mut d_mid = self.conv_back(&d_main, &blk.conv_b, &bt.conv_b, true, grads.as_mut());
            ops::relu_backward_inplace(&mut d_mid, &bt.mid);
            let d_a = self.bn_back(&d_mid, &blk.bn_a, &bt.bn_a, grads.as_mut());
            let mut d_in = self.conv_back(&d_a, &blk.conv_a, &bt.conv_a, true, grads.as_mut());
            match (&blk.shortcut, &bt.shortcut) {
                (Some((c, bn)), Some((cc, bc))) => {
                    let ds = self.bn_back(&d, bn, bc, grads.as_mut());
                    d_in += &self.conv_back(&ds, c, cc, true, grads.as_mut());
                }
                _ => d_in += &d,
            }
            d = d_in;
        }
        ops::relu_backward_inplace(&mut d, &tape.stem_out);
        let ds = self.bn_back(&d, &self.layout.stem_bn, &tape.stem_bn, grads.as_mut());
        let input = if want.input || want.params {
            let dx = self.conv_back(&ds, &self.layout.stem, &tape.stem_conv, want.input, grads.as_mut());
            want.input.then_some(dx)
        } else {
            None
        };
        Ok(Gradients {
            params: grads,
            input,
        })
    }

    fn bn_back(&self, d: &Array4<T>, bn: &Bn, cache: &BnCache<T>, grads: Option<&mut ParamSet<T>>) -> Array4<T> {
        let (dx, dg, db) = ops::bn_backward(d, self.slice(bn.gamma), cache, true);
        if let Some(gr) = grads {
            gr.get_mut(bn.gamma).assign(&Array1::from(dg).into_dyn());
            gr.get_mut(bn.beta).assign(&Array1::from(db).into_dyn());
        }
        dx.expect("requested input gradient")
    }

    fn conv_back(
        &self,
        d: &Array4<T>,
        c: &Conv,
        cache: &ConvCache<T>,
        want_input: bool,
        grads: Option<&mut ParamSet<T>>,
    ) -> Array4<T> {
        let (dx, dw) = ops::conv_backward(
            d,
            &self.params.get(c.weight).view(),
            &c.geom,
            cache,
            want_input,
            grads.is_some(),
        );
        if let (Some(gr), Some(dw)) = (grads, dw) {
            gr.get_mut(c.weight).assign(&dw.into_dyn());
        }
        dx.unwrap_or_else(|| Array4::zeros((0, 0, 0, 0)))
    }

    /// Folds the batch statistics of a training-mode pass into the running
    /// estimates (exponential average with momentum 0.1).
    pub fn absorb_batch_stats(&mut self, tape: &Tape<T>) {
        if tape.mode != Mode::Train {
            return;
        }
        let mut pairs: Vec<(&Bn, &BnCache<T>)> = vec![(&self.layout.stem_bn, &tape.stem_bn)];
        for (blk, bt) in self.layout.blocks.iter().zip(&tape.blocks) {
            pairs.push((&blk.bn_a, &bt.bn_a));
            pairs.push((&blk.bn_b, &bt.bn_b));
            if let (Some((_, bn)), Some((_, bc))) = (&blk.shortcut, &bt.shortcut) {
                pairs.push((bn, bc));
            }
        }
        let m = T::lit(ops::BN_MOMENTUM);
        let updates: Vec<(usize, usize, Vec<T>, Vec<T>)> = pairs
            .into_iter()
            .filter_map(|(bn, c)| c.stats.as_ref().map(|(mu, v)| (bn.mean, bn.var, mu.clone(), v.clone())))
            .collect();
        for (mi, vi, mu, var) in updates {
            for (r, &s) in self.buffers.get_mut(mi).iter_mut().zip(&mu) {
                *r = (T::one() - m) * *r + m * s;
            }
            for (r, &s) in self.buffers.get_mut(vi).iter_mut().zip(&var) {
                *r = (T::one() - m) * *r + m * s;
            }
        }
    }
}
