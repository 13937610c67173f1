//! Parameterized building blocks shared by the encoder and the restorer.

use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::{init, ParamId, ParamSet};
use super::tensor::Tensor;
use crate::error::Result;
use crate::scalar::Scalar;

/// Registers parameters under a dotted name prefix.
pub struct ParamBuilder<'a, T> {
    params: &'a mut ParamSet<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Scalar> ParamBuilder<'a, T> {
    pub fn new(params: &'a mut ParamSet<T>, rng: &'a mut ChaCha8Rng) -> Self {
        ParamBuilder { params, rng, prefix: String::new() }
    }

    pub fn child(&mut self, name: &str) -> ParamBuilder<'_, T> {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{}", self.prefix, name) };
        ParamBuilder { params: self.params, rng: self.rng, prefix }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    pub fn add(&mut self, name: &str, t: Tensor<T>) -> Result<ParamId> {
        let full = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{}", self.prefix, name) };
        self.params.add(full, t)
    }

    pub fn xavier(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize) -> Result<ParamId> {
        let t = init::xavier(self.rng, shape, fan_in, fan_out);
        self.add(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn full(&mut self, name: &str, shape: &[usize], v: f64) -> Result<ParamId> {
        self.add(name, Tensor::full(shape, T::of(v)))
    }
}

/// Dense layer over column vectors (or `[in, N]` matrices).
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, inputs: usize, outputs: usize, bias: bool) -> Result<Self> {
        let w = pb.xavier("w", &[outputs, inputs], inputs, outputs)?;
        let b = if bias { Some(pb.zeros("b", &[outputs])?) } else { None };
        Ok(Linear { w, b })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let y = g.matmul(w, x)?;
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_rows(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Layer normalization over the leading axis with learned scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, channels: usize) -> Result<Self> {
        Ok(LayerNorm { weight: pb.full("weight", &[channels], 1.0)?, bias: pb.zeros("bias", &[channels])? })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let n = g.layer_norm_cols(x);
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.mul_rows(n, w)?;
        g.add_rows(y, b)
    }
}

/// Bias-free pointwise convolution.
#[derive(Clone, Debug)]
pub struct Conv1x1 {
    pub w: ParamId,
}

impl Conv1x1 {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, cin: usize, cout: usize) -> Result<Self> {
        Ok(Conv1x1 { w: pb.xavier("w", &[cout, cin], cin, cout)? })
    }

    pub fn zeros<T: Scalar>(pb: &mut ParamBuilder<'_, T>, cin: usize, cout: usize) -> Result<Self> {
        Ok(Conv1x1 { w: pb.zeros("w", &[cout, cin])? })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        g.conv1x1(x, w)
    }
}

/// Bias-free 3×3 depth-wise convolution.
#[derive(Clone, Debug)]
pub struct DwConv3 {
    pub w: ParamId,
}

impl DwConv3 {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, channels: usize) -> Result<Self> {
        Ok(DwConv3 { w: pb.xavier("w", &[channels, 3, 3], 9, 9)? })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        g.dwconv3(x, w)
    }
}

/// Dense 3×3 convolution with optional per-channel bias.
#[derive(Clone, Debug)]
pub struct Conv3 {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
}

impl Conv3 {
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        cin: usize,
        cout: usize,
        stride: usize,
        bias: bool,
    ) -> Result<Self> {
        let w = pb.xavier("w", &[cout, cin, 3, 3], cin * 9, cout * 9)?;
        let b = if bias { Some(pb.zeros("b", &[cout])?) } else { None };
        Ok(Conv3 { w, b, stride })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let y = g.conv3(x, w, self.stride)?;
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_rows(y, b)
            }
            None => Ok(y),
        }
    }
}
