use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::error::Result;
use crate::tensor::{Graph, Tensor, Var};

/// Name of the separator embedding in checkpoints.
pub const SEPARATOR: &str = "separator";

const INIT_STD: f64 = 0.02;

/// One-hidden-layer perceptron with a linear skip connection.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock<T> {
    pub w_hidden: T,
    pub b_hidden: T,
    pub w_out: T,
    pub b_out: T,
    pub w_skip: T,
    pub b_skip: T,
}

/// Pre-norm transformer layer: attention then feed-forward, each residual.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerLayer<T> {
    pub attn_norm_gain: T,
    pub attn_norm_bias: T,
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
    pub ff_norm_gain: T,
    pub ff_norm_bias: T,
    pub ff_w1: T,
    pub ff_b1: T,
    pub ff_w2: T,
    pub ff_b2: T,
}

/// Every learnable value of the model, generic over the leaf type so the same
/// layout serves weights (`Tensor`), graph bindings (`Var`) and optimizer
/// moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub input: ResidualBlock<T>,
    pub layers: Vec<TransformerLayer<T>>,
    pub final_norm_gain: T,
    pub final_norm_bias: T,
    pub output: ResidualBlock<T>,
    pub separator: T,
}

pub type ModelParams = Params<Tensor>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitKind {
    Weight,
    Zeros,
    Ones,
}

impl<T> ResidualBlock<T> {
    fn build(
        prefix: &str,
        input: usize,
        hidden: usize,
        output: usize,
        f: &mut impl FnMut(&str, &[usize], InitKind) -> Result<T>,
    ) -> Result<Self> {
        use InitKind::*;
        Ok(Self {
            w_hidden: f(&format!("{prefix}.w_hidden"), &[input, hidden], Weight)?,
            b_hidden: f(&format!("{prefix}.b_hidden"), &[hidden], Zeros)?,
            w_out: f(&format!("{prefix}.w_out"), &[hidden, output], Weight)?,
            b_out: f(&format!("{prefix}.b_out"), &[output], Zeros)?,
            w_skip: f(&format!("{prefix}.w_skip"), &[input, output], Weight)?,
            b_skip: f(&format!("{prefix}.b_skip"), &[output], Zeros)?,
        })
    }

    fn fields<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        for (n, t) in [
            ("w_hidden", &self.w_hidden),
            ("b_hidden", &self.b_hidden),
            ("w_out", &self.w_out),
            ("b_out", &self.b_out),
            ("w_skip", &self.w_skip),
            ("b_skip", &self.b_skip),
        ] {
            out.push((format!("{prefix}.{n}"), t));
        }
    }

    fn fields_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        out.extend([
            &mut self.w_hidden,
            &mut self.b_hidden,
            &mut self.w_out,
            &mut self.b_out,
            &mut self.w_skip,
            &mut self.b_skip,
        ]);
    }
}

impl<T> TransformerLayer<T> {
    fn build(
        prefix: &str,
        cfg: &ModelConfig,
        f: &mut impl FnMut(&str, &[usize], InitKind) -> Result<T>,
    ) -> Result<Self> {
        use InitKind::*;
        let d = cfg.d_model;
        let ff = cfg.d_ff;
        Ok(Self {
            attn_norm_gain: f(&format!("{prefix}.attn_norm_gain"), &[d], Ones)?,
            attn_norm_bias: f(&format!("{prefix}.attn_norm_bias"), &[d], Zeros)?,
            wq: f(&format!("{prefix}.wq"), &[d, d], Weight)?,
            wk: f(&format!("{prefix}.wk"), &[d, d], Weight)?,
            wv: f(&format!("{prefix}.wv"), &[d, d], Weight)?,
            wo: f(&format!("{prefix}.wo"), &[d, d], Weight)?,
            ff_norm_gain: f(&format!("{prefix}.ff_norm_gain"), &[d], Ones)?,
            ff_norm_bias: f(&format!("{prefix}.ff_norm_bias"), &[d], Zeros)?,
            ff_w1: f(&format!("{prefix}.ff_w1"), &[d, ff], Weight)?,
            ff_b1: f(&format!("{prefix}.ff_b1"), &[ff], Zeros)?,
            ff_w2: f(&format!("{prefix}.ff_w2"), &[ff, d], Weight)?,
            ff_b2: f(&format!("{prefix}.ff_b2"), &[d], Zeros)?,
        })
    }

    fn fields<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        for (n, t) in [
            ("attn_norm_gain", &self.attn_norm_gain),
            ("attn_norm_bias", &self.attn_norm_bias),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("ff_norm_gain", &self.ff_norm_gain),
            ("ff_norm_bias", &self.ff_norm_bias),
            ("ff_w1", &self.ff_w1),
            ("ff_b1", &self.ff_b1),
            ("ff_w2", &self.ff_w2),
            ("ff_b2", &self.ff_b2),
        ] {
            out.push((format!("{prefix}.{n}"), t));
        }
    }

    fn fields_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        out.extend([
            &mut self.attn_norm_gain,
            &mut self.attn_norm_bias,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ff_norm_gain,
            &mut self.ff_norm_bias,
            &mut self.ff_w1,
            &mut self.ff_b1,
            &mut self.ff_w2,
            &mut self.ff_b2,
        ]);
    }
}

impl<T> Params<T> {
    /// Constructs every leaf in canonical order from its name, shape and
    /// initialization kind.
    pub fn build(
        cfg: &ModelConfig,
        mut f: impl FnMut(&str, &[usize], InitKind) -> Result<T>,
    ) -> Result<Self> {
        let d = cfg.d_model;
        let input = ResidualBlock::build("input", cfg.patch_len, d, d, &mut f)?;
        let layers = (0..cfg.n_layers)
            .map(|i| TransformerLayer::build(&format!("layers.{i}"), cfg, &mut f))
            .collect::<Result<Vec<_>>>()?;
        let final_norm_gain = f("final_norm_gain", &[d], InitKind::Ones)?;
        let final_norm_bias = f("final_norm_bias", &[d], InitKind::Zeros)?;
        let output = ResidualBlock::build("output", d, d, cfg.horizon_len, &mut f)?;
        let separator = f(SEPARATOR, &[d], InitKind::Weight)?;
        Ok(Self {
            input,
            layers,
            final_norm_gain,
            final_norm_bias,
            output,
            separator,
        })
    }

    /// Named leaves in canonical order.
    pub fn fields(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.input.fields("input", &mut out);
        for (i, layer) in self.layers.iter().enumerate() {
            layer.fields(&format!("layers.{i}"), &mut out);
        }
        out.push(("final_norm_gain".into(), &self.final_norm_gain));
        out.push(("final_norm_bias".into(), &self.final_norm_bias));
        self.output.fields("output", &mut out);
        out.push((SEPARATOR.into(), &self.separator));
        out
    }

    /// Mutable leaves in the same order as [`Params::fields`].
    pub fn fields_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        self.input.fields_mut(&mut out);
        for layer in &mut self.layers {
            layer.fields_mut(&mut out);
        }
        out.push(&mut self.final_norm_gain);
        out.push(&mut self.final_norm_bias);
        self.output.fields_mut(&mut out);
        out.push(&mut self.separator);
        out
    }

    /// Rebuilds the same structure from per-leaf values in canonical order.
    pub fn map<U>(&self, cfg: &ModelConfig, mut f: impl FnMut(&T) -> U) -> Params<U> {
        let mut leaves = self.fields().into_iter();
        Params::build(cfg, |_, _, _| {
            let (_, t) = leaves.next().expect("same layout");
            Ok(f(t))
        })
        .expect("infallible")
    }
}

impl ModelParams {
    /// Truncated-normal (±2σ, σ = 0.02) weights and separator, zero biases,
    /// unit norm gains.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Params::build(cfg, |_, shape, kind| Ok(init_tensor(shape, kind, &mut rng)))
            .expect("infallible")
    }

    pub fn zeros_like(&self, cfg: &ModelConfig) -> Self {
        self.map(cfg, |t| Tensor::zeros(t.shape()))
    }

    /// Registers every leaf as a graph input.
    pub fn bind(&self, cfg: &ModelConfig, g: &mut Graph) -> Params<Var> {
        self.map(cfg, |t| g.input(t.clone()))
    }

    pub fn num_values(&self) -> usize {
        self.fields().iter().map(|(_, t)| t.len()).sum()
    }
}

pub(crate) fn init_tensor(shape: &[usize], kind: InitKind, rng: &mut ChaCha8Rng) -> Tensor {
    match kind {
        InitKind::Zeros => Tensor::zeros(shape),
        InitKind::Ones => Tensor::full(shape, 1.0),
        InitKind::Weight => {
            let normal = Normal::new(0.0, INIT_STD).expect("valid std");
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| loop {
                    let z: f64 = normal.sample(rng);
                    if z.abs() <= 2.0 * INIT_STD {
                        break z;
                    }
                })
                .collect();
            Tensor::new(shape.to_vec(), data).expect("shape matches")
        }
    }
}

/// Fresh separator embedding drawn like any other weight.
pub fn init_separator(cfg: &ModelConfig, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_tensor(&[cfg.d_model], InitKind::Weight, &mut rng)
}
