//! Parameterized layers. Each layer owns only [`ParamId`]s; values live in a
//! [`ParamStore`] and a forward pass runs inside a [`Session`].

use rand::Rng;

use crate::autodiff::{Conv2dConfig, Tape, Var};
use crate::error::Result;
use crate::store::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// One forward pass over a model: the tape, the parameter store it reads,
/// and whether layers run in training mode.
pub struct Session<'s> {
    pub tape: Tape,
    pub store: &'s mut ParamStore,
    pub train: bool,
}

impl<'s> Session<'s> {
    /// Gradient-tracking pass in training mode.
    pub fn train(store: &'s mut ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            store,
            train: true,
        }
    }

    /// Evaluation-mode pass whose parameters are constants.
    pub fn eval(store: &'s mut ParamStore) -> Self {
        Self {
            tape: Tape::inference(),
            store,
            train: false,
        }
    }

    /// Gradient-tracking pass in evaluation mode (running statistics are used
    /// and left untouched).
    pub fn tracked_eval(store: &'s mut ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            store,
            train: false,
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }

    pub fn input(&mut self, x: Tensor) -> Result<Var> {
        self.tape.constant(x)
    }
}

fn he_normal<R: Rng + ?Sized>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::randn(shape, (2.0 / fan_in.max(1) as f64).sqrt(), rng)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add_param(
            format!("{name}.weight"),
            he_normal(vec![fan_out, fan_in], fan_in, rng),
        )?;
        let bias = if bias {
            Some(store.add_param(format!("{name}.bias"), Tensor::zeros([fan_out]))?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        s.tape.linear(x, w, b)
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cfg: Conv2dConfig,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        cfg: Conv2dConfig,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let (kh, kw) = cfg.kernel;
        let weight = store.add_param(
            format!("{name}.weight"),
            he_normal(vec![out_ch, in_ch, kh, kw], in_ch * kh * kw, rng),
        )?;
        let bias = if bias {
            Some(store.add_param(format!("{name}.bias"), Tensor::zeros([out_ch]))?)
        } else {
            None
        };
        Ok(Self { weight, bias, cfg })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        s.tape.conv2d(x, w, b, self.cfg)
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

/// Transposed convolution; weight layout is [in, out, kh, kw].
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cfg: Conv2dConfig,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        cfg: Conv2dConfig,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let (kh, kw) = cfg.kernel;
        let weight = store.add_param(
            format!("{name}.weight"),
            he_normal(vec![in_ch, out_ch, kh, kw], in_ch * kh * kw, rng),
        )?;
        let bias = if bias {
            Some(store.add_param(format!("{name}.bias"), Tensor::zeros([out_ch]))?)
        } else {
            None
        };
        Ok(Self { weight, bias, cfg })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        s.tape.conv_transpose2d(x, w, b, self.cfg)
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub const MOMENTUM: f64 = 0.1;
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add_param(format!("{name}.weight"), Tensor::ones([channels]))?,
            beta: store.add_param(format!("{name}.bias"), Tensor::zeros([channels]))?,
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros([channels]))?,
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::ones([channels]))?,
            momentum: Self::MOMENTUM,
            eps: Self::EPS,
        })
    }

    /// Normalizes with batch statistics and folds them into the running
    /// estimates when the session trains; uses the running estimates otherwise.
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let g = s.param(self.gamma);
        let b = s.param(self.beta);
        let (y, stats) = {
            let rm = s.store.get(self.running_mean);
            let rv = s.store.get(self.running_var);
            s.tape.batch_norm(x, g, b, (rm, rv), s.train, self.eps)?
        };
        if let Some(stats) = stats {
            let m = self.momentum;
            for (r, v) in s.store.get_mut(self.running_mean).data_mut().iter_mut().zip(&stats.mean) {
                *r = (1.0 - m) * *r + m * v;
            }
            for (r, v) in s.store.get_mut(self.running_var).data_mut().iter_mut().zip(&stats.var) {
                *r = (1.0 - m) * *r + m * v;
            }
        }
        Ok(y)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }

    pub fn buffers(&self) -> Vec<ParamId> {
        vec![self.running_mean, self.running_var]
    }
}
