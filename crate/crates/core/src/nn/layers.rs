use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::params::{Ctx, ParamId, ParamStore};
use crate::tensor::{ConvGeom, Scalar, Tensor, Var};

pub(crate) fn normal_tensor<T: Scalar>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_vec(shape, (0..n).map(|_| T::lit(dist.sample(rng))).collect())
}

pub(crate) fn uniform_tensor<T: Scalar>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| T::lit(rng.random_range(-bound..=bound))).collect())
}

/// Affine map over the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    pub(crate) weight: ParamId,
    pub(crate) bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Uniform `±1/sqrt(in)` initialization.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add_param(&format!("{name}.weight"), uniform_tensor(&[out_dim, in_dim], bound, rng));
        let bias = store.add_param(&format!("{name}.bias"), uniform_tensor(&[out_dim], bound, rng));
        Self { weight, bias, in_dim, out_dim }
    }

    /// Normal(0, std) weights and zero bias.
    pub fn with_normal<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add_param(&format!("{name}.weight"), normal_tensor(&[out_dim, in_dim], std, rng));
        let bias = store.add_param(&format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<T>, x: &Var<T>) -> Var<T> {
        x.linear(&ctx.param(self.weight), Some(&ctx.param(self.bias)))
    }

    pub fn weight_id(&self) -> ParamId {
        self.weight
    }

    pub fn bias_id(&self) -> ParamId {
        self.bias
    }
}

/// 3-D convolution with He-normal initialization.
#[derive(Debug, Clone)]
pub struct Conv3d {
    weight: ParamId,
    bias: Option<ParamId>,
    pub geom: ConvGeom,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv3d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        geom: ConvGeom,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let [kt, kh, kw] = geom.kernel;
        let fan_in = (in_channels * kt * kh * kw) as f64;
        let weight = store.add_param(
            &format!("{name}.weight"),
            normal_tensor(&[out_channels, in_channels, kt, kh, kw], (2.0 / fan_in).sqrt(), rng),
        );
        let bias = bias.then(|| store.add_param(&format!("{name}.bias"), Tensor::zeros(&[out_channels])));
        Self { weight, bias, geom, in_channels, out_channels }
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<T>, x: &Var<T>) -> Var<T> {
        let b = self.bias.map(|id| ctx.param(id));
        x.conv3d(&ctx.param(self.weight), b.as_ref(), self.geom)
    }

    pub fn num_weights(&self) -> usize {
        self.out_channels * self.in_channels * self.geom.kernel.iter().product::<usize>()
    }
}

/// Batch normalization over axis 1 with running statistics kept as buffers.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add_param(&format!("{name}.gamma"), Tensor::full(&[channels], T::one())),
            beta: store.add_param(&format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(&format!("{name}.running_var"), Tensor::full(&[channels], T::one())),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<T>, x: &Var<T>) -> Var<T> {
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        if ctx.is_train() {
            let (y, stats) = x.batch_norm_train(&gamma, &beta, self.eps);
            let m = T::lit(self.momentum);
            let blend = |old: &Tensor<T>, new: &[T]| {
                let data = old.data().iter().zip(new).map(|(&o, &n)| (T::one() - m) * o + m * n).collect();
                Tensor::from_vec(old.shape(), data)
            };
            ctx.push_buffer_update(self.running_mean, blend(ctx.buffer(self.running_mean), &stats.mean));
            ctx.push_buffer_update(self.running_var, blend(ctx.buffer(self.running_var), &stats.var));
            y
        } else {
            x.batch_norm_eval(
                &gamma,
                &beta,
                ctx.buffer(self.running_mean).data(),
                ctx.buffer(self.running_var).data(),
                self.eps,
            )
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add_param(&format!("{name}.gamma"), Tensor::full(&[dim], T::one())),
            beta: store.add_param(&format!("{name}.beta"), Tensor::zeros(&[dim])),
            eps: 1e-12,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<T>, x: &Var<T>) -> Var<T> {
        x.layer_norm(&ctx.param(self.gamma), &ctx.param(self.beta), self.eps)
    }
}
