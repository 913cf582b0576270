//! Layer specifications and their parameterized instances.

use rand::Rng;

use crate::error::{dim_err, Result};
use crate::nn::params::{ParamId, ParamStore};
use crate::nn::tape::{Tape, Var};
use crate::nn::ops::{ATTN_DIM, ATTN_WIDTH};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Dense,
    Conv3x3,
    Relu,
    /// Two 3×3 convolutions with a skip path (image input).
    ResidualBlock,
    /// Two dense layers with a skip path (row-vector input).
    DenseResidualBlock,
    SelfAttention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl LayerSpec {
    pub fn new(kind: LayerKind, in_channels: usize, out_channels: usize) -> Self {
        Self {
            kind,
            in_channels,
            out_channels,
        }
    }

    /// Register this layer's parameters under `prefix` and return the instance.
    pub fn build(&self, store: &mut ParamStore, prefix: &str, rng: &mut impl Rng) -> Result<Layer> {
        let (i, o) = (self.in_channels, self.out_channels);
        if i == 0 || o == 0 {
            return Err(dim_err!("layer {prefix}: channel counts must be positive"));
        }
        Ok(match self.kind {
            LayerKind::Dense => Layer::Dense(Affine::dense(store, prefix, i, o, rng)?),
            LayerKind::Conv3x3 => Layer::Conv3x3(Affine::conv(store, prefix, i, o, rng)?),
            LayerKind::Relu => {
                if i != o {
                    return Err(dim_err!("relu cannot change width ({i} -> {o})"));
                }
                Layer::Relu
            }
            LayerKind::ResidualBlock => Layer::Residual(ResidualBlock::conv(store, prefix, i, o, rng)?),
            LayerKind::DenseResidualBlock => Layer::Residual(ResidualBlock::dense(store, prefix, i, o, rng)?),
            LayerKind::SelfAttention => {
                if i != ATTN_WIDTH || o != ATTN_WIDTH {
                    return Err(dim_err!("self-attention width must be {ATTN_WIDTH}"));
                }
                Layer::SelfAttention(SelfAttention::new(store, prefix, rng)?)
            }
        })
    }
}

/// Uniform in ±√(6/(fan_in+fan_out)).
pub fn glorot(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
    Tensor::from_fn(shape, |_| rng.random_range(-limit..=limit))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum AffineKind {
    Dense,
    Conv3x3,
    Pointwise,
}

/// Weight + bias pair for dense, 3×3 and 1×1 layers.
#[derive(Debug, Clone, Copy)]
pub struct Affine {
    kind: AffineKind,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Affine {
    fn register(
        store: &mut ParamStore,
        prefix: &str,
        kind: AffineKind,
        shape: &[usize],
        fans: (usize, usize),
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.add(format!("{prefix}.weight"), glorot(shape, fans.0, fans.1, rng))?;
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros(&[shape[0]]))?;
        Ok(Self { kind, weight, bias })
    }

    pub fn dense(store: &mut ParamStore, prefix: &str, i: usize, o: usize, rng: &mut impl Rng) -> Result<Self> {
        Self::register(store, prefix, AffineKind::Dense, &[o, i], (i, o), rng)
    }

    pub fn conv(store: &mut ParamStore, prefix: &str, i: usize, o: usize, rng: &mut impl Rng) -> Result<Self> {
        Self::register(store, prefix, AffineKind::Conv3x3, &[o, i, 3, 3], (i * 9, o * 9), rng)
    }

    pub fn pointwise(store: &mut ParamStore, prefix: &str, i: usize, o: usize, rng: &mut impl Rng) -> Result<Self> {
        Self::register(store, prefix, AffineKind::Pointwise, &[o, i], (i, o), rng)
    }

    /// Apply the layer, optionally computing only the listed output channels.
    pub fn forward_rows(&self, tape: &mut Tape, store: &ParamStore, x: Var, rows: Option<&[usize]>) -> Result<Var> {
        let mut w = tape.param(store, self.weight);
        let mut b = tape.param(store, self.bias);
        if let Some(rows) = rows {
            w = tape.select_rows(w, rows)?;
            b = tape.select_rows(b, rows)?;
        }
        match self.kind {
            AffineKind::Dense => tape.dense(x, w, b),
            AffineKind::Conv3x3 => tape.conv3x3(x, w, b),
            AffineKind::Pointwise => tape.pointwise(x, w, b),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        self.forward_rows(tape, store, x, None)
    }

    /// Overwrite weight and bias with zeros.
    pub fn zero(&self, store: &mut ParamStore) {
        store.value_mut(self.weight).data_mut().fill(0.0);
        store.value_mut(self.bias).data_mut().fill(0.0);
    }
}

/// `first → ReLU → second`, plus identity or learned 1×1/dense projection on
/// the skip path, then a final ReLU unless the block is the network output.
///
/// The inner width is `min(in, out)`, so widening blocks expand in their
/// second layer.
#[derive(Debug, Clone, Copy)]
pub struct ResidualBlock {
    pub first: Affine,
    pub second: Affine,
    pub projection: Option<Affine>,
    pub final_relu: bool,
}

impl ResidualBlock {
    pub fn conv(store: &mut ParamStore, prefix: &str, i: usize, o: usize, rng: &mut impl Rng) -> Result<Self> {
        let mid = i.min(o);
        Ok(Self {
            first: Affine::conv(store, &format!("{prefix}.conv1"), i, mid, rng)?,
            second: Affine::conv(store, &format!("{prefix}.conv2"), mid, o, rng)?,
            projection: if i != o {
                Some(Affine::pointwise(store, &format!("{prefix}.proj"), i, o, rng)?)
            } else {
                None
            },
            final_relu: true,
        })
    }

    pub fn dense(store: &mut ParamStore, prefix: &str, i: usize, o: usize, rng: &mut impl Rng) -> Result<Self> {
        let mid = i.min(o);
        Ok(Self {
            first: Affine::dense(store, &format!("{prefix}.fc1"), i, mid, rng)?,
            second: Affine::dense(store, &format!("{prefix}.fc2"), mid, o, rng)?,
            projection: if i != o {
                Some(Affine::dense(store, &format!("{prefix}.proj"), i, o, rng)?)
            } else {
                None
            },
            final_relu: true,
        })
    }

    pub fn forward_rows(&self, tape: &mut Tape, store: &ParamStore, x: Var, rows: Option<&[usize]>) -> Result<Var> {
        let h = self.first.forward(tape, store, x)?;
        let h = tape.relu(h);
        let h = self.second.forward_rows(tape, store, h, rows)?;
        let skip = match (&self.projection, rows) {
            (Some(p), _) => p.forward_rows(tape, store, x, rows)?,
            (None, None) => x,
            (None, Some(rows)) => tape.select_rows(x, rows)?,
        };
        let y = tape.add(h, skip)?;
        Ok(if self.final_relu { tape.relu(y) } else { y })
    }
}

/// Learned 8×8 query/key/value projections for [`Tape::attention`].
#[derive(Debug, Clone, Copy)]
pub struct SelfAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, prefix: &str, rng: &mut impl Rng) -> Result<Self> {
        let mut mk = |n: &str| {
            store.add(
                format!("{prefix}.{n}"),
                glorot(&[ATTN_DIM, ATTN_DIM], ATTN_DIM, ATTN_DIM, rng),
            )
        };
        Ok(Self {
            wq: mk("wq")?,
            wk: mk("wk")?,
            wv: mk("wv")?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let q = tape.param(store, self.wq);
        let k = tape.param(store, self.wk);
        let v = tape.param(store, self.wv);
        tape.attention(x, q, k, v)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Layer {
    Dense(Affine),
    Conv3x3(Affine),
    Relu,
    Residual(ResidualBlock),
    SelfAttention(SelfAttention),
}

impl Layer {
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        match self {
            Layer::Dense(a) | Layer::Conv3x3(a) => a.forward(tape, store, x),
            Layer::Relu => Ok(tape.relu(x)),
            Layer::Residual(r) => r.forward_rows(tape, store, x, None),
            Layer::SelfAttention(s) => s.forward(tape, store, x),
        }
    }
}
