use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::math;
use crate::matrix::Matrix;
use crate::rng;

const LAYER_FIELDS: [&str; 10] = [
    "w_q",
    "w_k",
    "w_v",
    "w_o",
    "w_ff1",
    "w_ff2",
    "norm1_gain",
    "norm1_bias",
    "norm2_gain",
    "norm2_bias",
];

/// Weights of one encoder block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub w_ff1: Matrix,
    pub w_ff2: Matrix,
    pub norm1_gain: Matrix,
    pub norm1_bias: Matrix,
    pub norm2_gain: Matrix,
    pub norm2_bias: Matrix,
}

impl LayerParams {
    fn fields(&self) -> [&Matrix; 10] {
        [
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.w_o,
            &self.w_ff1,
            &self.w_ff2,
            &self.norm1_gain,
            &self.norm1_bias,
            &self.norm2_gain,
            &self.norm2_bias,
        ]
    }

    fn fields_mut(&mut self) -> [&mut Matrix; 10] {
        [
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.w_ff1,
            &mut self.w_ff2,
            &mut self.norm1_gain,
            &mut self.norm1_bias,
            &mut self.norm2_gain,
            &mut self.norm2_bias,
        ]
    }

    fn expected_shapes(d: usize, d_ff: usize) -> [(usize, usize); 10] {
        [
            (d, d),
            (d, d),
            (d, d),
            (d, d),
            (d_ff, d),
            (d, d_ff),
            (1, d),
            (1, d),
            (1, d),
            (1, d),
        ]
    }
}

/// All trainable weights of the encoder classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub embed_w: Matrix,
    pub embed_b: Matrix,
    pub cls: Matrix,
    pub pos: Matrix,
    pub layers: Vec<LayerParams>,
    pub final_gain: Matrix,
    pub final_bias: Matrix,
    pub head_w: Matrix,
    pub head_b: Matrix,
}

fn xavier<R: rand::RngCore + ?Sized>(out: usize, inp: usize, rng: &mut R) -> Matrix {
    let bound = math::sqrt(6.0 / (out + inp) as f64);
    rng::uniform(out, inp, bound, rng)
}

impl EncoderParams {
    /// Seed-deterministic initialization: Xavier-uniform projections, unit
    /// norm gains, zero biases, small uniform CLS and positional embeddings.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, 0x1417);
        let (d, d_ff) = (config.d_model, config.d_ff);
        let embed_w = xavier(d, config.input_dim, &mut rng);
        let cls = rng::uniform(1, d, 0.1, &mut rng);
        let pos = rng::uniform(config.max_tokens + 1, d, 0.1, &mut rng);
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                w_q: xavier(d, d, &mut rng),
                w_k: xavier(d, d, &mut rng),
                w_v: xavier(d, d, &mut rng),
                w_o: xavier(d, d, &mut rng),
                w_ff1: xavier(d_ff, d, &mut rng),
                w_ff2: xavier(d, d_ff, &mut rng),
                norm1_gain: Matrix::filled(1, d, 1.0),
                norm1_bias: Matrix::zeros(1, d),
                norm2_gain: Matrix::filled(1, d, 1.0),
                norm2_bias: Matrix::zeros(1, d),
            })
            .collect();
        let head_w = xavier(config.num_classes, d, &mut rng);
        Ok(EncoderParams {
            embed_w,
            embed_b: Matrix::zeros(1, d),
            cls,
            pos,
            layers,
            final_gain: Matrix::filled(1, d, 1.0),
            final_bias: Matrix::zeros(1, d),
            head_w,
            head_b: Matrix::zeros(1, config.num_classes),
        })
    }

    /// Tensor names, in the fixed order shared by [`Self::tensors`],
    /// [`Self::tensors_mut`] and [`BoundParams::vars`].
    pub fn names(&self) -> Vec<String> {
        let mut out: Vec<String> = ["embed.w", "embed.b", "cls", "pos"]
            .iter()
            .map(|s| String::from(*s))
            .collect();
        for l in 0..self.layers.len() {
            out.extend(LAYER_FIELDS.iter().map(|f| format!("layers.{l}.{f}")));
        }
        out.extend(
            ["final_norm.gain", "final_norm.bias", "head.w", "head.b"]
                .iter()
                .map(|s| String::from(*s)),
        );
        out
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out = alloc::vec![&self.embed_w, &self.embed_b, &self.cls, &self.pos];
        for layer in &self.layers {
            out.extend(layer.fields());
        }
        out.extend([&self.final_gain, &self.final_bias, &self.head_w, &self.head_b]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = alloc::vec![
            &mut self.embed_w,
            &mut self.embed_b,
            &mut self.cls,
            &mut self.pos
        ];
        for layer in &mut self.layers {
            out.extend(layer.fields_mut());
        }
        out.extend([
            &mut self.final_gain,
            &mut self.final_bias,
            &mut self.head_w,
            &mut self.head_b,
        ]);
        out
    }

    pub fn named(&self) -> Vec<(String, &Matrix)> {
        self.names().into_iter().zip(self.tensors()).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|m| m.data().len()).sum()
    }

    /// Rebuilds parameters from `(name, matrix)` pairs in [`Self::names`]
    /// order, checking that the shapes are mutually consistent.
    pub fn from_named(tensors: Vec<(String, Matrix)>) -> Result<Self> {
        let n = tensors.len();
        if n < 8 || !(n - 8).is_multiple_of(LAYER_FIELDS.len()) {
            return Err(Error::contract(format!("{n} tensors do not form an encoder")));
        }
        let mut it = tensors.into_iter();
        let mut take = |expected: &str| -> Result<Matrix> {
            let (name, m) = it.next().ok_or_else(|| Error::contract("missing tensor"))?;
            if name != expected {
                return Err(Error::contract(format!("expected tensor {expected}, found {name}")));
            }
            Ok(m)
        };
        let embed_w = take("embed.w")?;
        let embed_b = take("embed.b")?;
        let cls = take("cls")?;
        let pos = take("pos")?;
        let num_layers = (n - 8) / LAYER_FIELDS.len();
        let mut layers = Vec::with_capacity(num_layers);
        for l in 0..num_layers {
            let mut fields = Vec::with_capacity(LAYER_FIELDS.len());
            for f in LAYER_FIELDS {
                fields.push(take(&format!("layers.{l}.{f}"))?);
            }
            let mut f = fields.into_iter();
            let mut next = || f.next().unwrap();
            layers.push(LayerParams {
                w_q: next(),
                w_k: next(),
                w_v: next(),
                w_o: next(),
                w_ff1: next(),
                w_ff2: next(),
                norm1_gain: next(),
                norm1_bias: next(),
                norm2_gain: next(),
                norm2_bias: next(),
            });
        }
        let params = EncoderParams {
            embed_w,
            embed_b,
            cls,
            pos,
            layers,
            final_gain: take("final_norm.gain")?,
            final_bias: take("final_norm.bias")?,
            head_w: take("head.w")?,
            head_b: take("head.b")?,
        };
        params.check_shapes()?;
        Ok(params)
    }

    /// Infers `(input_dim, max_tokens, d_model, d_ff, num_classes)` and checks
    /// every tensor against it.
    pub fn check_shapes(&self) -> Result<()> {
        let (d, input_dim) = self.embed_w.shape();
        let d_ff = self.layers.first().map(|l| l.w_ff1.rows()).unwrap_or(1);
        let classes = self.head_w.rows();
        let mismatch = |name: &str, m: &Matrix, want: (usize, usize)| -> Result<()> {
            if m.shape() != want {
                return Err(Error::contract(format!(
                    "tensor {name} is {}x{}, expected {}x{}",
                    m.rows(),
                    m.cols(),
                    want.0,
                    want.1
                )));
            }
            Ok(())
        };
        mismatch("embed.w", &self.embed_w, (d, input_dim))?;
        mismatch("embed.b", &self.embed_b, (1, d))?;
        mismatch("cls", &self.cls, (1, d))?;
        if self.pos.cols() != d || self.pos.rows() < 2 {
            return Err(Error::contract("tensor pos has the wrong shape"));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            for ((m, want), f) in layer
                .fields()
                .iter()
                .zip(LayerParams::expected_shapes(d, d_ff))
                .zip(LAYER_FIELDS)
            {
                mismatch(&format!("layers.{l}.{f}"), m, want)?;
            }
        }
        mismatch("final_norm.gain", &self.final_gain, (1, d))?;
        mismatch("final_norm.bias", &self.final_bias, (1, d))?;
        mismatch("head.w", &self.head_w, (classes, d))?;
        mismatch("head.b", &self.head_b, (1, classes))?;
        Ok(())
    }

    /// Checks these parameters against an architecture.
    pub fn check_matches(&self, config: &ModelConfig) -> Result<()> {
        self.check_shapes()?;
        let ok = self.embed_w.shape() == (config.d_model, config.input_dim)
            && self.pos.rows() == config.max_tokens + 1
            && self.layers.len() == config.layers
            && self.layers.iter().all(|l| l.w_ff1.rows() == config.d_ff)
            && self.head_w.rows() == config.num_classes;
        if ok {
            Ok(())
        } else {
            Err(Error::contract("parameters do not match the model configuration"))
        }
    }

    /// Adds every tensor to `g` as a leaf.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        let mut leaf = |m: &Matrix| g.leaf(m.clone());
        BoundParams {
            embed_w: leaf(&self.embed_w),
            embed_b: leaf(&self.embed_b),
            cls: leaf(&self.cls),
            pos: leaf(&self.pos),
            layers: self
                .layers
                .iter()
                .map(|l| BoundLayer {
                    w_q: leaf(&l.w_q),
                    w_k: leaf(&l.w_k),
                    w_v: leaf(&l.w_v),
                    w_o: leaf(&l.w_o),
                    w_ff1: leaf(&l.w_ff1),
                    w_ff2: leaf(&l.w_ff2),
                    norm1_gain: leaf(&l.norm1_gain),
                    norm1_bias: leaf(&l.norm1_bias),
                    norm2_gain: leaf(&l.norm2_gain),
                    norm2_bias: leaf(&l.norm2_bias),
                })
                .collect(),
            final_gain: leaf(&self.final_gain),
            final_bias: leaf(&self.final_bias),
            head_w: leaf(&self.head_w),
            head_b: leaf(&self.head_b),
        }
    }
}

/// Graph handles for one layer's weights.
#[derive(Debug, Clone, Copy)]
pub struct BoundLayer {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub w_ff1: Var,
    pub w_ff2: Var,
    pub norm1_gain: Var,
    pub norm1_bias: Var,
    pub norm2_gain: Var,
    pub norm2_bias: Var,
}

/// [`EncoderParams`] placed on a [`Graph`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub embed_w: Var,
    pub embed_b: Var,
    pub cls: Var,
    pub pos: Var,
    pub layers: Vec<BoundLayer>,
    pub final_gain: Var,
    pub final_bias: Var,
    pub head_w: Var,
    pub head_b: Var,
}

impl BoundParams {
    /// Handles in [`EncoderParams::names`] order.
    pub fn vars(&self) -> Vec<Var> {
        let mut out = alloc::vec![self.embed_w, self.embed_b, self.cls, self.pos];
        for l in &self.layers {
            out.extend([
                l.w_q,
                l.w_k,
                l.w_v,
                l.w_o,
                l.w_ff1,
                l.w_ff2,
                l.norm1_gain,
                l.norm1_bias,
                l.norm2_gain,
                l.norm2_bias,
            ]);
        }
        out.extend([self.final_gain, self.final_bias, self.head_w, self.head_b]);
        out
    }

    /// Gradients of every parameter, in [`EncoderParams::names`] order.
    pub fn grads(&self, g: &Graph) -> Vec<Matrix> {
        self.vars().into_iter().map(|v| g.grad(v).clone()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::NormPlacement;

    fn config() -> ModelConfig {
        ModelConfig {
            input_dim: 3,
            max_tokens: 4,
            d_model: 8,
            d_ff: 16,
            layers: 2,
            heads: 2,
            num_classes: 3,
            norm: NormPlacement::Pre,
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = EncoderParams::init(&config(), 9).unwrap();
        let b = EncoderParams::init(&config(), 9).unwrap();
        let c = EncoderParams::init(&config(), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn names_tensors_and_vars_align() {
        let p = EncoderParams::init(&config(), 1).unwrap();
        let mut g = Graph::new();
        let bound = p.bind(&mut g);
        assert_eq!(p.names().len(), p.tensors().len());
        assert_eq!(p.names().len(), bound.vars().len());
        for (v, m) in bound.vars().iter().zip(p.tensors()) {
            assert_eq!(g.value(*v), m);
        }
        p.check_matches(&config()).unwrap();
    }

    #[test]
    fn from_named_round_trips_and_rejects_bad_shapes() {
        let p = EncoderParams::init(&config(), 1).unwrap();
        let named: Vec<(String, Matrix)> =
            p.named().into_iter().map(|(n, m)| (n, m.clone())).collect();
        assert_eq!(EncoderParams::from_named(named.clone()).unwrap(), p);
        let mut bad = named;
        bad[6].1 = Matrix::zeros(2, 2);
        assert!(EncoderParams::from_named(bad).is_err());
    }
}
