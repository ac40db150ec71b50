//! Fully connected networks `x -> W_L(...act(x W_1 + b_1)...) + b_L`.
//!
//! Parameters are stored as `[W_1, b_1, ..., W_L, b_L]` with `W_i` of shape
//! `fan_in x fan_out` (inputs are row vectors) and `b_i` of shape `1 x fan_out`.
//!
//! Initialisation: every weight uniform in `[-sqrt(6/fan_in), sqrt(6/fan_in))`,
//! drawn row-major layer by layer from one [`SplitMix64`] stream; biases 0.
//! When the last hidden layer is a sine, the output weights are further
//! divided by their `fan_in`, which bounds every initial output by `sqrt(6/fan_in)`.

use super::mat::Mat;
use super::tape::Var;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Tanh,
    Sine,
    Identity,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Silu => "silu",
            Activation::Tanh => "tanh",
            Activation::Sine => "sine",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "silu" => Activation::Silu,
            "tanh" => Activation::Tanh,
            "sine" => Activation::Sine,
            "identity" => Activation::Identity,
            _ => return Err(Error::Config(format!("unknown activation `{s}`"))),
        })
    }

    fn apply(self, x: Var<'_>) -> Var<'_> {
        match self {
            Activation::Silu => x.silu(),
            Activation::Tanh => x.tanh(),
            Activation::Sine => x.sin(),
            Activation::Identity => x,
        }
    }
}

/// Layer widths `[inputs, hidden.., outputs]`; `hidden` acts after every hidden
/// layer except the last, which uses `last_hidden`. The output layer is affine.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub hidden: Activation,
    pub last_hidden: Activation,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, hidden: Activation, last_hidden: Activation) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config(format!(
                "MLP widths must have >= 2 positive entries, got {widths:?}"
            )));
        }
        if matches!(hidden, Activation::Sine | Activation::Identity) {
            return Err(Error::Config("hidden activation must be silu or tanh".into()));
        }
        if !matches!(last_hidden, Activation::Sine | Activation::Identity) {
            return Err(Error::Config(
                "last hidden activation must be sine or identity".into(),
            ));
        }
        Ok(Self {
            widths,
            hidden,
            last_hidden,
        })
    }

    /// `depth` hidden layers of `width` units.
    pub fn uniform(inputs: usize, width: usize, depth: usize, outputs: usize) -> Result<Self> {
        let mut widths = vec![inputs];
        widths.extend(std::iter::repeat(width).take(depth));
        widths.push(outputs);
        Self::new(widths, Activation::Silu, Activation::Sine)
    }

    pub fn inputs(&self) -> usize {
        self.widths[0]
    }

    pub fn outputs(&self) -> usize {
        *self.widths.last().expect("non-empty")
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Activation after layer `i` (0-based), `None` for the output layer.
    pub fn activation(&self, i: usize) -> Option<Activation> {
        let n = self.n_layers();
        if i + 1 == n {
            None
        } else if i + 2 == n {
            Some(self.last_hidden)
        } else {
            Some(self.hidden)
        }
    }

    pub fn check_params(&self, params: &[Mat]) -> Result<()> {
        if params.len() != 2 * self.n_layers() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, got {}",
                2 * self.n_layers(),
                params.len()
            )));
        }
        for (i, w) in self.widths.windows(2).enumerate() {
            if params[2 * i].shape() != (w[0], w[1]) || params[2 * i + 1].shape() != (1, w[1]) {
                return Err(Error::Shape(format!("layer {i} parameters have the wrong shape")));
            }
        }
        Ok(())
    }
}

pub fn mlp_init(spec: &MlpSpec, seed: u64) -> Vec<Mat> {
    let mut rng = SplitMix64::new(seed);
    let n = spec.n_layers();
    let mut params = Vec::with_capacity(2 * n);
    for (i, w) in spec.widths.windows(2).enumerate() {
        let (fan_in, fan_out) = (w[0], w[1]);
        let bound = (6.0 / fan_in as f64).sqrt();
        let shrink = if i + 1 == n && spec.last_hidden == Activation::Sine && n > 1 {
            1.0 / fan_in as f64
        } else {
            1.0
        };
        let data = (0..fan_in * fan_out)
            .map(|_| rng.uniform_in(-bound, bound) * shrink)
            .collect();
        params.push(Mat::new(fan_in, fan_out, data));
        params.push(Mat::zeros(1, fan_out));
    }
    params
}

/// Forward pass on a batch `x` of shape `B x inputs`.
pub fn mlp_forward<'t>(spec: &MlpSpec, params: &[Var<'t>], x: Var<'t>) -> Var<'t> {
    assert_eq!(params.len(), 2 * spec.n_layers(), "parameter count mismatch");
    let mut h = x;
    for i in 0..spec.n_layers() {
        h = h.matmul(params[2 * i]).add_row(params[2 * i + 1]);
        if let Some(act) = spec.activation(i) {
            h = act.apply(h);
        }
    }
    h
}
