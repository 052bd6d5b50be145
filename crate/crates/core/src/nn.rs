//! Parameterized layers shared by the generator, critics and segmenters.
//!
//! Weights are stored as unit-variance draws and scaled by `1/sqrt(fan_in)`
//! at run time (equalized learning rate), so Adam sees comparable step sizes
//! for every layer.

use crate::autograd::{lit, ParamStore, Scalar, Tape, Tensor, Var};
use crate::rng::normal_tensor;
use ndarray::IxDyn;
use rand::Rng;

/// A parameter store bound to a tape for one forward pass.
pub struct Bind<'a, T: Scalar> {
    pub tape: &'a Tape<T>,
    pub store: &'a ParamStore<T>,
    pub trainable: bool,
}

impl<'a, T: Scalar> Bind<'a, T> {
    pub fn new(tape: &'a Tape<T>, store: &'a ParamStore<T>, trainable: bool) -> Self {
        Self {
            tape,
            store,
            trainable,
        }
    }

    pub fn p(&self, index: usize) -> Var {
        self.tape.param(self.store, index, self.trainable)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Normal,
    Zero,
}

/// Fully connected layer on `[N, in]` inputs.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
    pub fan_in: usize,
    pub lr_mul: f64,
}

impl Linear {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias_init: f64,
        lr_mul: f64,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let w = match init {
            Init::Normal => normal_tensor::<T>(rng, &[fan_in, fan_out]).mapv(|x| x / lit(lr_mul)),
            Init::Zero => Tensor::zeros(IxDyn(&[fan_in, fan_out])),
        };
        let weight = store.push(format!("{name}.weight"), w);
        let bias = store.push(
            format!("{name}.bias"),
            Tensor::from_elem(IxDyn(&[1, fan_out]), lit(bias_init / lr_mul)),
        );
        Self {
            weight,
            bias,
            fan_in,
            lr_mul,
        }
    }

    pub fn forward<T: Scalar>(&self, b: &Bind<T>, x: Var) -> Var {
        let t = b.tape;
        let w = t.mul_scalar(b.p(self.weight), lit(self.lr_mul / (self.fan_in as f64).sqrt()));
        let y = t.matmul(x, w);
        let bias = t.mul_scalar(b.p(self.bias), lit(self.lr_mul));
        t.add(y, bias)
    }
}

/// Square-kernel convolution with optional bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: usize,
    pub bias: Option<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub fan_in: usize,
    /// Run-time weight multiplier.
    pub scale: f64,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let shape = [c_out, c_in, kernel, kernel];
        let w = match init {
            Init::Normal => normal_tensor::<T>(rng, &shape),
            Init::Zero => Tensor::zeros(IxDyn(&shape)),
        };
        let weight = store.push(format!("{name}.weight"), w);
        let bias = bias.then(|| {
            store.push(
                format!("{name}.bias"),
                Tensor::zeros(IxDyn(&[1, c_out, 1, 1])),
            )
        });
        Self {
            weight,
            bias,
            kernel,
            stride,
            pad: (kernel - 1) / 2,
            fan_in: c_in * kernel * kernel,
            scale: 1.0 / ((c_in * kernel * kernel) as f64).sqrt(),
        }
    }

    /// Same layer without the run-time scale: weights are stored already
    /// divided by `sqrt(fan_in)` and Adam steps act on them directly.
    #[allow(clippy::too_many_arguments)]
    pub fn plain<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let mut conv = Self::new(store, name, c_in, c_out, kernel, stride, bias, init, rng);
        let s: T = lit(conv.scale);
        store.get_mut(conv.weight).mapv_inplace(|w| w * s);
        conv.scale = 1.0;
        conv
    }

    /// Kernel after the run-time scale.
    pub fn scaled_weight<T: Scalar>(&self, b: &Bind<T>) -> Var {
        b.tape
            .mul_scalar(b.p(self.weight), lit(self.scale))
    }

    pub fn forward<T: Scalar>(&self, b: &Bind<T>, x: Var) -> Var {
        let w = self.scaled_weight(b);
        let y = b.tape.conv2d(x, w, self.stride, self.pad);
        match self.bias {
            Some(bi) => b.tape.add(y, b.p(bi)),
            None => y,
        }
    }
}
