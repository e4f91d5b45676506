//! Parameterized layers that register their tensors in a [`ParamStore`] under
//! dotted names (`<prefix>.weight`, `<prefix>.bias`, ...).

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ops::ConvGeom;
use crate::params::{BufferId, ParamId, ParamStore};
use crate::tensor::{Real, Shape4, Tensor4};

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
}

impl Conv2d {
    /// Square `k x k` kernel; the weight is Kaiming-uniform over its fan-in.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        geom: ConvGeom,
        bias: bool,
    ) -> Result<Self> {
        if geom.groups == 0 || !c_in.is_multiple_of(geom.groups) || !c_out.is_multiple_of(geom.groups) {
            return Err(Error::shape(format!(
                "{prefix}: {c_in} -> {c_out} channels not divisible into {} groups",
                geom.groups
            )));
        }
        let shape = Shape4::new(c_out, c_in / geom.groups, k, k);
        let weight = store.add_kaiming(&format!("{prefix}.weight"), shape, shape.c * k * k)?;
        let bias = if bias {
            Some(store.add(&format!("{prefix}.bias"), Tensor4::zeros(Shape4::new(1, c_out, 1, 1)))?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            geom,
            c_in,
            c_out,
            k,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        g.conv2d(x, self.weight, self.bias, self.geom)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl BatchNorm2d {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, c: usize) -> Result<Self> {
        let s = Shape4::new(1, c, 1, 1);
        Ok(BatchNorm2d {
            gamma: store.add(&format!("{prefix}.gamma"), Tensor4::full(s, T::one()))?,
            beta: store.add(&format!("{prefix}.beta"), Tensor4::zeros(s))?,
            running_mean: store.add_buffer(&format!("{prefix}.running_mean"), Tensor4::zeros(s))?,
            running_var: store.add_buffer(&format!("{prefix}.running_var"), Tensor4::full(s, T::one()))?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        g.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var)
    }
}

/// Fully connected layer on `(n, c, 1, 1)` features.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
}

impl Linear {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Linear {
            weight: store.add_kaiming(&format!("{prefix}.weight"), Shape4::new(c_out, c_in, 1, 1), c_in)?,
            bias: store.add(&format!("{prefix}.bias"), Tensor4::zeros(Shape4::new(1, c_out, 1, 1)))?,
            c_in,
            c_out,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        g.linear(x, self.weight, Some(self.bias))
    }
}

/// Convolution followed by an optional normalization. The convolution carries a
/// bias only when there is no normalization to absorb it.
#[derive(Debug, Clone)]
pub struct ConvNorm {
    pub conv: Conv2d,
    pub norm: Option<BatchNorm2d>,
}

impl ConvNorm {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        geom: ConvGeom,
        norm: bool,
    ) -> Result<Self> {
        let conv = Conv2d::new(store, &format!("{prefix}.conv"), c_in, c_out, k, geom, !norm)?;
        let norm = if norm {
            Some(BatchNorm2d::new(store, &format!("{prefix}.bn"), c_out)?)
        } else {
            None
        };
        Ok(ConvNorm { conv, norm })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        match &self.norm {
            Some(bn) => bn.forward(g, y),
            None => Ok(y),
        }
    }
}
