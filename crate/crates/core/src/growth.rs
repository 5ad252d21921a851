//! Function-preserving neuron growth.
//!
//! Each selected neuron `i` of a host layer receives a pair of new neurons
//! with opposite polarity. Their summed output `s = O₊ + O₋` is fed back into
//! the host neuron both through a GeLU and through an identity skip:
//!
//! ```text
//! O'ᵢ = Oᵢ + GeLU(s) + s,   s = (W₊ᵢ·I + b₊ᵢ) + (W₋ᵢ·I + b₋ᵢ)
//! ```
//!
//! At creation `W₋ = −W₊` and `b₋ = −b₊` bitwise, so `s` is exactly zero and
//! the layer output is unchanged. The skip term keeps the gradient of both new
//! neurons nonzero at that point, where the GeLU path alone would cancel.

use std::collections::HashSet;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GrowableLinear, Model};
use crate::tensor::{Element, Graph, Tensor, Var};

pub const DEFAULT_SCALING_FACTOR: f32 = 0.2;

/// Paired ± neurons attached to a set of host neurons.
#[derive(Clone, Debug, PartialEq)]
pub struct GrowthBranch {
    selected: Vec<usize>,
    pub w_plus: Tensor,
    pub b_plus: Tensor,
    pub w_minus: Tensor,
    pub b_minus: Tensor,
    created_at: usize,
    scaling_factor: f32,
}

/// One growth operation as recorded in a model's history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrowthEvent {
    pub epoch: usize,
    pub layer_id: String,
    pub indices: Vec<usize>,
    pub scaling_factor: f32,
    pub param_delta: usize,
}

fn validate_indices(indices: &[usize], out_dim: usize) -> Result<Vec<usize>> {
    if indices.is_empty() {
        return Err(Error::Growth("empty neuron index set".into()));
    }
    let mut sorted = indices.to_vec();
    sorted.sort_unstable();
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::Growth(format!("duplicate neuron index {}", w[0])));
    }
    if let Some(&last) = sorted.last().filter(|&&l| l >= out_dim) {
        return Err(Error::Growth(format!(
            "neuron index {last} out of range for {out_dim} neurons"
        )));
    }
    Ok(sorted)
}

impl GrowthBranch {
    /// Branch over `indices` initialized from the host's current weights:
    /// `W₊ = factor·W[S]`, `b₊ = factor·b[S]`, `W₋ = −W₊`, `b₋ = −b₊`.
    pub fn initialize(
        host: &GrowableLinear,
        indices: &[usize],
        scaling_factor: f32,
        epoch: usize,
    ) -> Result<Self> {
        if !(scaling_factor > 0.0 && scaling_factor.is_finite()) {
            return Err(Error::Growth(format!(
                "scaling factor must be positive, got {scaling_factor}"
            )));
        }
        let selected = validate_indices(indices, host.out_dim())?;
        let scale = |t: Tensor| -> Result<Tensor> {
            let shape = t.shape().to_vec();
            Tensor::param(shape, t.into_data().into_iter().map(|v| scaling_factor * v).collect())
        };
        let negate = |t: &Tensor| -> Result<Tensor> {
            Tensor::param(t.shape().to_vec(), t.data().iter().map(|v| -v).collect())
        };
        let w_plus = scale(host.weight.select_rows(&selected)?)?;
        let b_plus = scale(host.bias.select_rows(&selected)?)?;
        let w_minus = negate(&w_plus)?;
        let b_minus = negate(&b_plus)?;
        Ok(Self {
            selected,
            w_plus,
            b_plus,
            w_minus,
            b_minus,
            created_at: epoch,
            scaling_factor,
        })
    }

    /// All-zero branch with the given structure; used when restoring a
    /// checkpoint before tensors are loaded.
    pub fn placeholder(
        indices: &[usize],
        out_dim: usize,
        in_dim: usize,
        scaling_factor: f32,
        epoch: usize,
    ) -> Result<Self> {
        let selected = validate_indices(indices, out_dim)?;
        let k = selected.len();
        let zeros = |shape: Vec<usize>| {
            let n = shape.iter().product();
            Tensor::param(shape, vec![0.0; n])
        };
        Ok(Self {
            w_plus: zeros(vec![k, in_dim])?,
            b_plus: zeros(vec![k])?,
            w_minus: zeros(vec![k, in_dim])?,
            b_minus: zeros(vec![k])?,
            selected,
            created_at: epoch,
            scaling_factor,
        })
    }

    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    pub fn created_at(&self) -> usize {
        self.created_at
    }

    pub fn scaling_factor(&self) -> f32 {
        self.scaling_factor
    }

    pub fn in_dim(&self) -> usize {
        self.w_plus.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.w_plus.numel() + self.b_plus.numel() + self.w_minus.numel() + self.b_minus.numel()
    }

    pub(crate) fn tensors(&self) -> [(&'static str, &Tensor); 4] {
        [
            ("w_plus", &self.w_plus),
            ("b_plus", &self.b_plus),
            ("w_minus", &self.w_minus),
            ("b_minus", &self.b_minus),
        ]
    }

    pub(crate) fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 4] {
        [
            ("w_plus", &mut self.w_plus),
            ("b_plus", &mut self.b_plus),
            ("w_minus", &mut self.w_minus),
            ("b_minus", &mut self.b_minus),
        ]
    }
}

/// Parameters added by a branch over `k` neurons with fan-in `in_dim`.
pub fn branch_param_cost(k: usize, in_dim: usize) -> usize {
    2 * k * (in_dim + 1)
}

/// Graph form of the branch update: returns `base` with
/// `GeLU(s) + s` added to the selected columns, `s = O₊ + O₋`.
#[allow(clippy::too_many_arguments)]
pub fn branch_forward<T: Element>(
    g: &mut Graph<T>,
    input: Var,
    base: Var,
    w_plus: Var,
    b_plus: Var,
    w_minus: Var,
    b_minus: Var,
    selected: Rc<[usize]>,
) -> Result<Var> {
    let o_plus = g.linear(input, w_plus, Some(b_plus))?;
    let o_minus = g.linear(input, w_minus, Some(b_minus))?;
    let s = g.add(o_plus, o_minus)?;
    let act = g.gelu(s);
    // GeLU(s) + s is summed before touching the base output so that an exact
    // zero `s` leaves the base bitwise unchanged.
    let delta = g.add(act, s)?;
    g.index_add_cols(base, delta, selected)
}

/// Appends a new branch to `layer`, leaving its existing weights untouched.
pub fn grow<'a>(
    layer: &'a mut GrowableLinear,
    indices: &[usize],
    scaling_factor: f32,
    epoch: usize,
) -> Result<&'a GrowthBranch> {
    let branch = GrowthBranch::initialize(layer, indices, scaling_factor, epoch)?;
    layer.branches.push(branch);
    Ok(layer.branches.last().expect("just pushed"))
}

/// Outcome of comparing logits with and without freshly added branches.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreservationReport {
    /// Max absolute logit deviation in the `f32` forward.
    pub max_abs_deviation: f64,
    /// Same comparison with the whole forward evaluated in `f64`.
    pub max_abs_deviation_f64: f64,
}

impl PreservationReport {
    pub const F32_TOLERANCE: f64 = 1e-5;
    pub const F64_TOLERANCE: f64 = 1e-12;

    pub fn is_preserved(&self) -> bool {
        self.max_abs_deviation <= Self::F32_TOLERANCE && self.max_abs_deviation_f64 <= Self::F64_TOLERANCE
    }
}

fn max_deviation<T: Element>(
    model: &Model,
    branches: &HashSet<(String, usize)>,
    probes: &[Tensor],
) -> Result<f64> {
    let mut worst = 0.0f64;
    for images in probes {
        let with = model.logits::<T>(images, &HashSet::new())?;
        let without = model.logits::<T>(images, branches)?;
        for (a, b) in with.iter().zip(&without) {
            worst = worst.max((a.as_f64() - b.as_f64()).abs());
        }
    }
    Ok(worst)
}

/// Max logit deviation between the model as is and the model with the given
/// `(layer_id, branch_index)` branches switched off.
///
/// Meant to be called right after growth, before any optimizer step. A
/// violation is reported in the returned value rather than as an error.
pub fn verify_function_preservation(
    model: &Model,
    branches: &[(String, usize)],
    probes: &[Tensor],
) -> Result<PreservationReport> {
    for (layer_id, idx) in branches {
        let layer = model
            .layer(layer_id)
            .ok_or_else(|| Error::UnknownLayer(layer_id.clone()))?;
        if *idx >= layer.branches.len() {
            return Err(Error::Growth(format!("{layer_id} has no branch {idx}")));
        }
    }
    let set: HashSet<(String, usize)> = branches.iter().cloned().collect();
    Ok(PreservationReport {
        max_abs_deviation: max_deviation::<f32>(model, &set, probes)?,
        max_abs_deviation_f64: max_deviation::<f64>(model, &set, probes)?,
    })
}
