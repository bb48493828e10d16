//! Uniform kind-tagged entry point over the graph primitives.

use super::graph::{Graph, VarId};
use super::Scalar;
use crate::error::{AmcError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    MatMul,
    Add,
    Mul,
    Scale,
    SoftmaxOverAxis,
    LayerNorm,
    Gelu,
    LeakyRelu,
    Reshape,
    Transpose,
    Concat,
    SliceSelect,
    MeanOverAxis,
    Conv3d,
    TrilinearUpsample,
    Sigmoid,
    Log,
    Power,
}

/// Attribute bag for [`forward_primitive`]. Only the fields a kind needs are read.
#[derive(Debug, Clone, Default)]
pub struct Attrs {
    pub axis: Option<usize>,
    pub scalar: Option<f64>,
    pub shape: Option<Vec<usize>>,
    pub axes: Option<Vec<usize>>,
    pub start: Option<usize>,
    pub len: Option<usize>,
    pub factors: Option<[usize; 3]>,
}

fn arity<T: Scalar>(g: &Graph<T>, kind: OpKind, inputs: &[VarId], n: usize) -> Result<()> {
    let _ = g;
    if inputs.len() != n {
        return Err(AmcError::Contract(format!(
            "{kind:?} takes {n} inputs, got {}",
            inputs.len()
        )));
    }
    Ok(())
}

fn need<A>(v: Option<A>, kind: OpKind, what: &str) -> Result<A> {
    v.ok_or_else(|| AmcError::Contract(format!("{kind:?} requires attr {what}")))
}

/// Records one primitive on the tape; the output carries a tape node whenever
/// any input requires gradients.
pub fn forward_primitive<T: Scalar>(
    g: &mut Graph<T>,
    kind: OpKind,
    inputs: &[VarId],
    attrs: &Attrs,
) -> Result<VarId> {
    match kind {
        OpKind::MatMul => {
            arity(g, kind, inputs, 2)?;
            g.matmul(inputs[0], inputs[1])
        }
        OpKind::Add => {
            arity(g, kind, inputs, 2)?;
            g.add(inputs[0], inputs[1])
        }
        OpKind::Mul => {
            arity(g, kind, inputs, 2)?;
            g.mul(inputs[0], inputs[1])
        }
        OpKind::Scale => {
            arity(g, kind, inputs, 1)?;
            g.scale(inputs[0], need(attrs.scalar, kind, "scalar")?)
        }
        OpKind::SoftmaxOverAxis => {
            arity(g, kind, inputs, 1)?;
            g.softmax(inputs[0], need(attrs.axis, kind, "axis")?)
        }
        OpKind::LayerNorm => {
            arity(g, kind, inputs, 3)?;
            g.layer_norm(inputs[0], inputs[1], inputs[2])
        }
        OpKind::Gelu => {
            arity(g, kind, inputs, 1)?;
            g.gelu(inputs[0])
        }
        OpKind::LeakyRelu => {
            arity(g, kind, inputs, 1)?;
            g.leaky_relu(inputs[0], need(attrs.scalar, kind, "scalar (slope)")?)
        }
        OpKind::Reshape => {
            arity(g, kind, inputs, 1)?;
            g.reshape(inputs[0], need(attrs.shape.clone(), kind, "shape")?)
        }
        OpKind::Transpose => {
            arity(g, kind, inputs, 1)?;
            match &attrs.axes {
                Some(axes) => g.permute(inputs[0], axes.clone()),
                None => g.transpose2(inputs[0]),
            }
        }
        OpKind::Concat => g.concat(inputs, need(attrs.axis, kind, "axis")?),
        OpKind::SliceSelect => {
            arity(g, kind, inputs, 1)?;
            g.slice(
                inputs[0],
                need(attrs.axis, kind, "axis")?,
                need(attrs.start, kind, "start")?,
                need(attrs.len, kind, "len")?,
            )
        }
        OpKind::MeanOverAxis => {
            arity(g, kind, inputs, 1)?;
            g.mean_axis(inputs[0], need(attrs.axis, kind, "axis")?)
        }
        OpKind::Conv3d => {
            arity(g, kind, inputs, 3)?;
            g.conv3d(inputs[0], inputs[1], inputs[2])
        }
        OpKind::TrilinearUpsample => {
            arity(g, kind, inputs, 1)?;
            g.trilinear_upsample(inputs[0], need(attrs.factors, kind, "factors")?)
        }
        OpKind::Sigmoid => {
            arity(g, kind, inputs, 1)?;
            g.sigmoid(inputs[0])
        }
        OpKind::Log => {
            arity(g, kind, inputs, 1)?;
            g.log(inputs[0])
        }
        OpKind::Power => {
            arity(g, kind, inputs, 1)?;
            g.pow(inputs[0], need(attrs.scalar, kind, "scalar (exponent)")?)
        }
    }
}
