use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::init::trunc_normal;
use super::ForwardPass;
use crate::error::{Error, Result};
use crate::growth::{branch_forward, GrowthBranch};
use crate::tensor::{Element, Tensor, Var};

/// Position of a linear layer inside the transformer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Qkv,
    Proj,
    Fc1,
    Fc2,
    Head,
    Embed,
}

impl Role {
    /// QKV, projection and both MLP layers accept growth branches.
    pub fn is_growth_eligible(self) -> bool {
        matches!(self, Role::Qkv | Role::Proj | Role::Fc1 | Role::Fc2)
    }

    /// Whether the layer's outputs pass through an elementwise GeLU.
    pub fn is_gelu_fronted(self) -> bool {
        self == Role::Fc1
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Qkv => "qkv",
            Role::Proj => "proj",
            Role::Fc1 => "fc1",
            Role::Fc2 => "fc2",
            Role::Head => "head",
            Role::Embed => "embed",
        }
    }
}

impl std::str::FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "qkv" => Role::Qkv,
            "proj" => Role::Proj,
            "fc1" => Role::Fc1,
            "fc2" => Role::Fc2,
            "head" => Role::Head,
            "embed" => Role::Embed,
            other => return Err(Error::Config(format!("unknown layer role `{other}`"))),
        })
    }
}

/// Affine layer `W·I + b` plus any growth branches attached to it.
///
/// The output width never changes; branches only add to selected outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct GrowableLinear {
    id: String,
    role: Role,
    pub weight: Tensor,
    pub bias: Tensor,
    pub branches: Vec<GrowthBranch>,
}

impl GrowableLinear {
    pub fn new<R: Rng>(id: impl Into<String>, role: Role, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let weight = Tensor::param(vec![out_dim, in_dim], trunc_normal(rng, out_dim * in_dim, 0.02))
            .expect("shape matches buffer");
        let bias = Tensor::param(vec![out_dim], vec![0.0; out_dim]).expect("shape matches buffer");
        Self {
            id: id.into(),
            role,
            weight,
            bias,
            branches: Vec::new(),
        }
    }

    pub fn from_parts(id: impl Into<String>, role: Role, weight: Tensor, bias: Tensor) -> Result<Self> {
        match (weight.shape(), bias.shape()) {
            ([out, _], [b]) if out == b => {}
            (w, b) => {
                return Err(Error::Shape(format!("weight {w:?} and bias {b:?} do not pair up")))
            }
        }
        let mut weight = weight;
        let mut bias = bias;
        weight.set_requires_grad(true);
        bias.set_requires_grad(true);
        Ok(Self {
            id: id.into(),
            role,
            weight,
            bias,
            branches: Vec::new(),
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.id)
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel() + self.branches.iter().map(GrowthBranch::param_count).sum::<usize>()
    }

    /// Multiply-accumulates per input row, branches included.
    pub fn macs_per_row(&self) -> usize {
        let branch: usize = self.branches.iter().map(|b| 2 * b.selected().len() * b.in_dim()).sum();
        self.in_dim() * self.out_dim() + branch
    }

    pub(crate) fn visit<'a>(&'a self, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{}.weight", self.id), &self.weight));
        out.push((format!("{}.bias", self.id), &self.bias));
        for (k, b) in self.branches.iter().enumerate() {
            for (suffix, t) in b.tensors() {
                out.push((format!("{}.branches.{k}.{suffix}", self.id), t));
            }
        }
    }

    pub(crate) fn visit_mut<'a>(&'a mut self, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{}.weight", self.id), &mut self.weight));
        out.push((format!("{}.bias", self.id), &mut self.bias));
        for (k, b) in self.branches.iter_mut().enumerate() {
            for (suffix, t) in b.tensors_mut() {
                out.push((format!("{}.branches.{k}.{suffix}", self.id), t));
            }
        }
    }

    /// Base affine output followed by every enabled branch, in creation
    /// order.
    pub(crate) fn forward<T: Element>(&self, pass: &mut ForwardPass<'_, T>, input: Var) -> Result<Var> {
        let w = pass.bind(self.weight_name(), &self.weight);
        let b = pass.bind(format!("{}.bias", self.id), &self.bias);
        let mut out = pass.graph.linear(input, w, Some(b))?;
        for (k, branch) in self.branches.iter().enumerate() {
            if pass.is_disabled(&self.id, k) {
                continue;
            }
            let [wp, bp, wm, bm] = branch
                .tensors()
                .map(|(suffix, t)| pass.bind(format!("{}.branches.{k}.{suffix}", self.id), t));
            out = branch_forward(
                &mut pass.graph,
                input,
                out,
                wp,
                bp,
                wm,
                bm,
                Rc::from(branch.selected()),
            )?;
        }
        pass.record_layer(&self.id, input, out);
        Ok(out)
    }
}
