//! Parameterized building blocks shared by the model components.

use crate::autodiff::{BatchNormMode, ConvGeometry, Tape, Var};
use crate::error::Result;
use crate::params::{BufferId, Init, ParamGroup, ParamId, ParamStore};

/// Whether normalization layers use batch statistics (and update their
/// running statistics) or the stored running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Convolution with an optional per-channel bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geometry: ConvGeometry,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        cin: usize,
        cout: usize,
        kernel: usize,
        geometry: ConvGeometry,
        bias: bool,
        gain: f64,
        seed: u64,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let init = if gain == 0.0 { Init::Zeros } else { Init::FanInUniform { fan_in, gain } };
        let weight = store.register(&format!("{name}.weight"), group, &[cout, cin, kernel, kernel], init, seed);
        let bias = bias.then(|| store.register(&format!("{name}.bias"), group, &[cout], Init::Zeros, seed));
        Conv { weight, bias, geometry }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let y = tape.conv2d_with(x, w, self.geometry)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.channel_bias(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

/// 3×3 convolution (stride 1, padding 1, no bias), batch normalization, ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: BufferId,
}

impl ConvBnRelu {
    pub fn register(store: &mut ParamStore, name: &str, group: ParamGroup, cin: usize, cout: usize, seed: u64) -> Self {
        let conv = Conv::register(store, name, group, cin, cout, 3, ConvGeometry::symmetric(1, 1), false, 1.0, seed);
        let gamma = store.register(&format!("{name}.bn.gamma"), group, &[cout], Init::Ones, seed);
        let beta = store.register(&format!("{name}.bn.beta"), group, &[cout], Init::Zeros, seed);
        let stats = store.register_buffer(&format!("{name}.bn.running"), cout);
        ConvBnRelu { conv, gamma, beta, stats }
    }

    pub fn forward(&self, tape: &mut Tape, store: &mut ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let y = self.conv.forward(tape, store, x)?;
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        let y = match mode {
            Mode::Train => tape.batchnorm2d(y, g, b, BatchNormMode::Train(store.buffer_mut(self.stats)))?,
            Mode::Eval => tape.batchnorm2d(y, g, b, BatchNormMode::Eval(store.buffer(self.stats)))?,
        };
        Ok(tape.relu(y))
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.conv.params();
        p.extend([self.gamma, self.beta]);
        p
    }
}
