//! Central finite-difference check of every parameter gradient of the full
//! objective, run in f64 on a tiny model.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::losses::{DacConfig, LossVars};
use crate::model::{DetectorModel, ModelConfig, ModelError};
use crate::synth::{synthesize_pair, DegradationRanges, GenConfig, PairedSample, Split, SynthError};
use crate::tensor::{OpKind, TensorError, Var};
use crate::train::{forward, StepInput, TrainError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GradCheckError {
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid grad-check config: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    pub image_size: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    pub model: ModelConfig,
    pub dac: DacConfig,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            batch_size: 2,
            seed: 7,
            step: 1e-5,
            tolerance: 1e-6,
            model: ModelConfig::tiny(),
            dac: DacConfig::default(),
        }
    }
}

pub const COMPONENTS: [&str; 5] = ["l_cls", "l_loc", "l_obj", "l_dac", "total"];

/// Worst error of one loss component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentReport {
    pub component: String,
    pub max_rel_error: f64,
    pub worst_param: String,
    /// Parameter tensors with at least one coordinate over tolerance.
    pub failing: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub n_tensors: usize,
    pub n_scalars: usize,
    pub components: Vec<ComponentReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.components.iter().all(|c| c.failing.is_empty())
    }

    pub fn max_rel_error(&self) -> f64 {
        self.components.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }

    /// Every parameter tensor that failed in any component, in order.
    pub fn failing_params(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for c in &self.components {
            for p in &c.failing {
                if !out.contains(p) {
                    out.push(p.clone());
                }
            }
        }
        out
    }
}

/// `|a − b| / max(1, |a|, |b|)`.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

fn pick(l: &LossVars, c: usize) -> Var {
    match c {
        0 => l.l_cls,
        1 => l.l_loc,
        2 => l.l_obj,
        3 => l.l_dac.expect("contrastive term enabled"),
        _ => l.total,
    }
}

fn values(l: &LossVars, g: &crate::tensor::Graph<f64>) -> [f64; 5] {
    core::array::from_fn(|c| g.item(pick(l, c)))
}

/// Data used by the check: `batch_size` small synthetic pairs.
pub fn check_data(cfg: &GradCheckConfig) -> Result<Vec<PairedSample>, GradCheckError> {
    let gen = GenConfig {
        seed: cfg.seed,
        image_size: cfg.image_size,
        n_train: cfg.batch_size,
        n_test: 0,
        parasites_per_image: [1, 2],
        radius_range: [2.0, 3.0],
        cells_per_image: [1, 2],
        degradation: DegradationRanges { max_shift_px: 0, ..DegradationRanges::default() },
        write_test_hcm: false,
        ..GenConfig::default()
    };
    (0..cfg.batch_size).map(|i| Ok(synthesize_pair(&gen, Split::Train, i)?)).collect()
}

/// Runs the check. `fault` scales the parameter-side backward of one op kind,
/// which must make the check fail on that op's parameters.
pub fn grad_check(cfg: &GradCheckConfig, fault: Option<(OpKind, f64)>) -> Result<GradCheckReport, GradCheckError> {
    if cfg.batch_size < 2 || cfg.dac.lambda_dac <= 0.0 {
        return Err(GradCheckError::InvalidConfig("needs batch_size >= 2 and lambda_dac > 0".to_string()));
    }
    if !(cfg.step > 0.0 && cfg.tolerance > 0.0) {
        return Err(GradCheckError::InvalidConfig("step and tolerance must be positive".to_string()));
    }
    let pairs = check_data(cfg)?;
    let batch: Vec<StepInput> = pairs
        .iter()
        .map(|p| StepInput { det_image: &p.x_h, det_boxes: &p.y_h, dac_hcm: &p.x_h, dac_lcm: &p.x_l })
        .collect();
    let mut model = DetectorModel::<f64>::new(cfg.model.clone(), cfg.seed)?;

    // analytic gradients, one backward per component
    let mut fp = forward(&model, &batch, &cfg.dac, true)?;
    if let Some((kind, factor)) = fault {
        fp.graph.inject_backward_fault(kind, factor);
    }
    let mut analytic: Vec<Vec<Vec<f64>>> = Vec::with_capacity(COMPONENTS.len());
    for c in 0..COMPONENTS.len() {
        fp.graph.zero_grads();
        fp.graph.backward(pick(&fp.loss, c))?;
        analytic.push(fp.bound.vars().iter().map(|&v| fp.graph.grad(v).to_vec()).collect());
    }

    let n_tensors = model.params.len();
    let mut reports: Vec<ComponentReport> = COMPONENTS
        .iter()
        .map(|c| ComponentReport { component: c.to_string(), max_rel_error: 0.0, worst_param: String::new(), failing: Vec::new() })
        .collect();
    let h = cfg.step;
    for t in 0..n_tensors {
        let name = model.params.iter().nth(t).expect("index").name.clone();
        let len = model.params.iter().nth(t).expect("index").data.len();
        for k in 0..len {
            let mut eval = |delta: f64| -> Result<[f64; 5], GradCheckError> {
                let p = model.params.iter_mut().nth(t).expect("index");
                let orig = p.data[k];
                p.data[k] = orig + delta;
                let out = forward(&model, &batch, &cfg.dac, false);
                model.params.iter_mut().nth(t).expect("index").data[k] = orig;
                let out = out?;
                Ok(values(&out.loss, &out.graph))
            };
            let up = eval(h)?;
            let dn = eval(-h)?;
            for c in 0..COMPONENTS.len() {
                let fd = (up[c] - dn[c]) / (2.0 * h);
                let err = rel_error(analytic[c][t][k], fd);
                let r = &mut reports[c];
                if err > r.max_rel_error || r.worst_param.is_empty() {
                    r.max_rel_error = r.max_rel_error.max(err);
                    r.worst_param = name.clone();
                }
                if !(err <= cfg.tolerance) && !r.failing.contains(&name) {
                    r.failing.push(name.clone());
                }
            }
        }
    }
    Ok(GradCheckReport { tolerance: cfg.tolerance, n_tensors, n_scalars: model.params.num_scalars(), components: reports })
}
