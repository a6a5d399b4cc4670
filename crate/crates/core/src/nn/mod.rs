//! Parameters, models, reverse-mode differentiation and optimizers.

pub mod checkpoint;
mod classifier;
mod graph;
mod loss;
mod optim;
mod scalar;
mod tensor;
#[cfg(test)]
pub(crate) mod testing;

pub use checkpoint::CheckpointMeta;
pub use classifier::{Classifier, ClassifierConfig, Encoder, LabeledBatch};
pub(crate) use classifier::collect_grads;
pub use graph::{Graph, LeafGrad, Var};
pub(crate) use graph::log_softmax_parts;
pub use loss::{bce_item, bce_loss, PROB_EPS};
pub use optim::{sgd_step, sgd_step_in_place, Optimizer, OptimizerConfig};
pub use scalar::{Dual, Real};
pub use tensor::{GradientMap, ParamSet, Tensor};

use crate::error::Result;

/// A scalar objective of a [`ParamSet`] over some batch type, with exact
/// first derivatives and Hessian-vector products.
pub trait Differentiable {
    type Batch;

    fn loss(&self, params: &ParamSet, batch: &Self::Batch) -> Result<f64>;

    fn loss_and_grad(&self, params: &ParamSet, batch: &Self::Batch) -> Result<(f64, GradientMap)>;

    /// `∇²L(params) · direction`.
    fn hessian_vector(
        &self,
        params: &ParamSet,
        batch: &Self::Batch,
        direction: &ParamSet,
    ) -> Result<GradientMap>;
}
