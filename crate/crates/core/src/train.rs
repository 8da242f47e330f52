//! One optimisation step of joint detection and contrastive training.
//!
//! Per pair the step runs three forward passes through the shared backbone:
//! the augmented clean image into the detection head, then the untouched clean
//! and degraded images into the projection head. All of them live in one
//! graph, so a single backward accumulates every parameter gradient.

use alloc::vec::Vec;

use crate::augment::TrainInput;
use crate::image::Image;
use crate::losses::{assign_targets, total_loss, AssignmentMap, DacConfig, LossBreakdown, LossError, LossVars};
use crate::model::{Bound, DetectorModel, ModelError};
use crate::optim::Optimizer;
use crate::tensor::{Graph, TensorError};
use crate::{BBox, Scalar};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("batch of {0} pairs is too small for the contrastive term (needs at least 2)")]
    BatchTooSmall(usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite loss: {0:?}")]
    NonFinite(LossBreakdown),
}

/// Borrowed view of one training pair.
#[derive(Clone, Copy, Debug)]
pub struct StepInput<'a> {
    /// Augmented clean image and its boxes, for the detection branch.
    pub det_image: &'a Image,
    pub det_boxes: &'a [BBox],
    /// Unaugmented clean and degraded images, for the contrastive branch.
    pub dac_hcm: &'a Image,
    pub dac_lcm: &'a Image,
}

impl<'a> From<&'a TrainInput<'a>> for StepInput<'a> {
    fn from(t: &'a TrainInput<'a>) -> Self {
        Self { det_image: &t.detection.image, det_boxes: &t.detection.boxes, dac_hcm: t.dac_hcm, dac_lcm: t.dac_lcm }
    }
}

/// Forward graph of the full objective for one batch.
pub struct ForwardPass<T> {
    pub graph: Graph<T>,
    pub bound: Bound,
    pub loss: LossVars,
}

impl<T: Scalar> ForwardPass<T> {
    pub fn breakdown(&self) -> LossBreakdown {
        self.loss.breakdown(&self.graph)
    }
}

/// Builds the objective over `batch`. The contrastive branches are only run
/// when `dac.lambda_dac > 0`.
pub fn forward<T: Scalar>(
    model: &DetectorModel<T>,
    batch: &[StepInput<'_>],
    dac: &DacConfig,
    requires_grad: bool,
) -> Result<ForwardPass<T>, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let use_dac = dac.lambda_dac > 0.0;
    if use_dac && batch.len() < 2 {
        return Err(TrainError::BatchTooSmall(batch.len()));
    }
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, requires_grad);
    let mut heads = Vec::with_capacity(batch.len());
    let mut maps: Vec<AssignmentMap> = Vec::with_capacity(batch.len());
    for s in batch {
        let x = model.input(&mut g, s.det_image)?;
        let f = model.backbone(&mut g, &p, x)?;
        let h = model.detection_head(&mut g, &p, f)?;
        maps.push(assign_targets(s.det_boxes, g.shape(h).dims()[1]));
        heads.push(h);
    }
    let (mut z_h, mut z_l) = (Vec::new(), Vec::new());
    if use_dac {
        for s in batch {
            for (img, out) in [(s.dac_hcm, &mut z_h), (s.dac_lcm, &mut z_l)] {
                let x = model.input(&mut g, img)?;
                let f = model.backbone(&mut g, &p, x)?;
                out.push(model.projection_head(&mut g, &p, f)?);
            }
        }
    }
    let map_refs: Vec<&AssignmentMap> = maps.iter().collect();
    let emb = if use_dac { Some((z_h.as_slice(), z_l.as_slice())) } else { None };
    let loss = total_loss(&mut g, &heads, &map_refs, emb, dac)?;
    Ok(ForwardPass { graph: g, bound: p, loss })
}

/// Forward, backward and one optimizer update. Parameter gradients are reset
/// first, so after the call they hold this batch's gradient. A non-finite
/// loss leaves the weights untouched.
pub fn train_step<T: Scalar>(
    model: &mut DetectorModel<T>,
    opt: &mut Optimizer<T>,
    batch: &[StepInput<'_>],
    dac: &DacConfig,
) -> Result<LossBreakdown, TrainError> {
    let mut fp = forward(model, batch, dac, true)?;
    let bd = fp.breakdown();
    let finite = [bd.l_cls, bd.l_loc, bd.l_obj, bd.l_dac, bd.total].iter().all(|v| v.is_finite());
    if !finite {
        return Err(TrainError::NonFinite(bd));
    }
    fp.graph.backward(fp.loss.total)?;
    model.params.zero_grads();
    model.params.accumulate_grads(&fp.graph, &fp.bound);
    opt.step(&mut model.params);
    Ok(bd)
}
