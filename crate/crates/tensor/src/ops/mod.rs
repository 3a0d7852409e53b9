mod activation;
mod attention;
mod conv;
mod elementwise;
mod linalg;
mod norm;
mod quant;

pub(crate) use conv::out_extent as conv_out_extent;
pub use quant::squared_distance;

use crate::graph::{Node, Op};

pub(crate) fn propagate(nodes: &[Node], id: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
    match nodes[id].op {
        Op::Leaf => {}
        Op::Conv3 { .. } => conv::conv3_backward(nodes, id, gout, grads),
        Op::GroupNorm { .. } => norm::group_norm_backward(nodes, id, gout, grads),
        Op::LeakyRelu { .. } | Op::Sigmoid(_) | Op::Softmax { .. } | Op::UpsampleNearest { .. } => {
            activation::backward(nodes, id, gout, grads)
        }
        Op::Add(..)
        | Op::Sub(..)
        | Op::Mul(..)
        | Op::Div(..)
        | Op::Scale(..)
        | Op::AddScalar(_)
        | Op::Square(_)
        | Op::Abs(_)
        | Op::Sum(_)
        | Op::Mean(_) => elementwise::backward(nodes, id, gout, grads),
        Op::MatMul { .. }
        | Op::BatchMatMul { .. }
        | Op::TransposeLast2(_)
        | Op::Reshape(_)
        | Op::ChannelsToTokens(_)
        | Op::TokensToChannels(_) => linalg::backward(nodes, id, gout, grads),
        Op::SqDist { .. } | Op::GatherRows { .. } | Op::StraightThrough { .. } => {
            quant::backward(nodes, id, gout, grads)
        }
    }
}
