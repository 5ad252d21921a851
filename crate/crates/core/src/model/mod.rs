//! DeiT-style vision transformer built from graph primitives.
//!
//! Layout: patch embedding → class token and learned position embeddings →
//! `depth` pre-norm blocks (MHSA then MLP, each with a residual) → final norm
//! → classifier on the class token. Only the QKV and FC1 output widths are
//! reducible; everything on the residual path keeps `embed_dim`.

mod checkpoint;
mod config;
mod init;
mod linear;

use std::collections::{HashMap, HashSet};
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::ModelConfig;
pub use linear::{GrowableLinear, Role};

use crate::error::{Error, Result};
use crate::growth::{GrowthBranch, GrowthEvent};
use crate::tensor::{Element, Graph, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    id: String,
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    fn new(id: impl Into<String>, dim: usize) -> Self {
        Self {
            id: id.into(),
            gamma: Tensor::param(vec![dim], vec![1.0; dim]).expect("shape matches"),
            beta: Tensor::param(vec![dim], vec![0.0; dim]).expect("shape matches"),
        }
    }

    fn forward<T: Element>(&self, pass: &mut ForwardPass<'_, T>, x: Var) -> Result<Var> {
        let g = pass.bind(format!("{}.weight", self.id), &self.gamma);
        let b = pass.bind(format!("{}.bias", self.id), &self.beta);
        pass.graph.layer_norm(x, g, b, LAYER_NORM_EPS)
    }

    fn visit<'a>(&'a self, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{}.weight", self.id), &self.gamma));
        out.push((format!("{}.bias", self.id), &self.beta));
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{}.weight", self.id), &mut self.gamma));
        out.push((format!("{}.bias", self.id), &mut self.beta));
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub norm1: LayerNorm,
    pub qkv: GrowableLinear,
    pub proj: GrowableLinear,
    pub norm2: LayerNorm,
    pub fc1: GrowableLinear,
    pub fc2: GrowableLinear,
}

/// A labelled mini-batch of images shaped `[B, C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self> {
        match images.shape() {
            [b, _, _, _] if *b == labels.len() => Ok(Self { images, labels }),
            s => Err(Error::Shape(format!(
                "{} labels for image batch of shape {s:?}",
                labels.len()
            ))),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Intermediate values captured for one linear layer during a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LayerProbe {
    /// Layer input rows (`[rows, in_dim]`).
    pub input: Var,
    /// Layer output after branches (`[rows, out_dim]`).
    pub output: Var,
    /// GeLU applied to `output`, for GeLU-fronted layers.
    pub activation: Option<Var>,
}

/// Replaces one weight row with 64-bit values for a single forward pass.
#[derive(Clone, Debug)]
pub struct RowOverride {
    pub layer_id: String,
    pub row: usize,
    pub values: Vec<f64>,
}

/// One forward evaluation of a [`Model`] on a fresh [`Graph`].
pub struct ForwardPass<'m, T: Element> {
    model: &'m Model,
    pub graph: Graph<T>,
    trainable: Option<HashSet<String>>,
    train: bool,
    bound: Vec<(String, Var)>,
    probe_ids: HashSet<String>,
    probes: HashMap<String, LayerProbe>,
    row_override: Option<RowOverride>,
    disabled: HashSet<(String, usize)>,
}

impl<'m, T: Element> ForwardPass<'m, T> {
    /// Every trainable tensor becomes a graph leaf.
    pub fn train(model: &'m Model) -> Self {
        Self::build(model, true)
    }

    /// Parameters are bound as constants; no backward is possible.
    pub fn eval(model: &'m Model) -> Self {
        Self::build(model, false)
    }

    fn build(model: &'m Model, train: bool) -> Self {
        Self {
            model,
            graph: Graph::new(),
            trainable: None,
            train,
            bound: Vec::new(),
            probe_ids: HashSet::new(),
            probes: HashMap::new(),
            row_override: None,
            disabled: HashSet::new(),
        }
    }

    pub fn with_graph(mut self, graph: Graph<T>) -> Self {
        self.graph = graph;
        self
    }

    /// Restricts graph leaves to the named parameters.
    pub fn only_trainable<I: IntoIterator<Item = String>>(mut self, names: I) -> Self {
        self.trainable = Some(names.into_iter().collect());
        self
    }

    pub fn probe<I: IntoIterator<Item = String>>(mut self, layer_ids: I) -> Self {
        self.probe_ids.extend(layer_ids);
        self
    }

    pub fn with_row_override(mut self, row_override: RowOverride) -> Self {
        self.row_override = Some(row_override);
        self
    }

    pub fn without_branches(mut self, branches: HashSet<(String, usize)>) -> Self {
        self.disabled = branches;
        self
    }

    pub fn model(&self) -> &'m Model {
        self.model
    }

    fn is_disabled(&self, layer_id: &str, k: usize) -> bool {
        !self.disabled.is_empty() && self.disabled.contains(&(layer_id.to_string(), k))
    }

    fn bind(&mut self, name: String, t: &Tensor) -> Var {
        let leaf = self.train
            && t.requires_grad()
            && self.trainable.as_ref().is_none_or(|set| set.contains(&name));
        let mut data: Vec<T> = t.data().iter().map(|&v| T::from_f32(v)).collect();
        if let Some(ov) = &self.row_override {
            if name.len() == ov.layer_id.len() + 7 && name.starts_with(&ov.layer_id) && name.ends_with(".weight") {
                let cols = t.shape()[1];
                for (dst, v) in data[ov.row * cols..(ov.row + 1) * cols].iter_mut().zip(&ov.values) {
                    *dst = T::from_f64(*v);
                }
            }
        }
        let shape = t.shape().to_vec();
        let var = if leaf {
            self.graph.leaf(shape, data)
        } else {
            self.graph.constant(shape, data)
        }
        .expect("tensor shape matches its buffer");
        if leaf {
            self.bound.push((name, var));
        }
        var
    }

    fn record_layer(&mut self, layer_id: &str, input: Var, output: Var) {
        if self.probe_ids.contains(layer_id) {
            self.probes.insert(
                layer_id.to_string(),
                LayerProbe {
                    input,
                    output,
                    activation: None,
                },
            );
        }
    }

    fn record_activation(&mut self, layer_id: &str, activation: Var) {
        if let Some(p) = self.probes.get_mut(layer_id) {
            p.activation = Some(activation);
        }
    }

    pub fn probe_of(&self, layer_id: &str) -> Option<LayerProbe> {
        self.probes.get(layer_id).copied()
    }

    /// Graph var of a bound parameter.
    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.bound.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    /// Gradients of every bound parameter after [`Graph::backward`].
    pub fn param_grads(&self) -> Vec<(String, Vec<T>)> {
        self.bound
            .iter()
            .filter_map(|(n, v)| self.graph.grad(*v).map(|g| (n.clone(), g.to_vec())))
            .collect()
    }

    /// Records the full forward and returns `[batch, num_classes]` logits.
    pub fn logits(&mut self, images: &Tensor) -> Result<Var> {
        let model = self.model;
        let cfg = &model.config;
        let batch = check_images(cfg, images)?;
        let (d, t, p) = (cfg.embed_dim, cfg.seq_len(), cfg.num_patches());

        let patches = extract_patches(cfg, images);
        let patches = self.graph.constant(vec![batch * p, cfg.patch_dim()], patches)?;
        let x = model.patch_embed.forward(self, patches)?;
        let cls = self.bind("cls_token".into(), &model.cls_token);
        let stacked = self.graph.concat(&[cls, x])?;
        let index: Rc<[usize]> = (0..batch * t)
            .flat_map(|r| {
                let (b, tok) = (r / t, r % t);
                let src = if tok == 0 { 0 } else { 1 + b * p + tok - 1 };
                (0..d).map(move |j| src * d + j)
            })
            .collect();
        let tokens = self.graph.gather(stacked, index, vec![batch * t, d])?;
        let pos = self.bind("pos_embed".into(), &model.pos_embed);
        let mut x = self.graph.add_broadcast(tokens, pos)?;

        let layout = HeadLayout::new(cfg, batch);
        for block in &model.blocks {
            x = self.block(block, &layout, x)?;
        }

        let x = model.norm.forward(self, x)?;
        let cls_index: Rc<[usize]> = (0..batch).flat_map(|b| (0..d).map(move |j| b * t * d + j)).collect();
        let cls_out = self.graph.gather(x, cls_index, vec![batch, d])?;
        model.head.forward(self, cls_out)
    }

    fn block(&mut self, block: &Block, layout: &HeadLayout, x: Var) -> Result<Var> {
        let cfg = &self.model.config;
        let h = block.norm1.forward(self, x)?;
        let qkv = block.qkv.forward(self, h)?;
        let q = self.graph.gather(qkv, Rc::clone(&layout.split[0]), layout.head_shape.clone())?;
        let k = self.graph.gather(qkv, Rc::clone(&layout.split[1]), layout.head_shape.clone())?;
        let v = self.graph.gather(qkv, Rc::clone(&layout.split[2]), layout.head_shape.clone())?;
        let scores = self.graph.bmm(q, k, true)?;
        let scores = self.graph.scale(scores, T::from_f64(1.0 / (cfg.head_dim() as f64).sqrt()));
        let attn = self.graph.softmax(scores)?;
        let ctx = self.graph.bmm(attn, v, false)?;
        let merged = self.graph.gather(ctx, Rc::clone(&layout.merge), layout.merged_shape.clone())?;
        let y = block.proj.forward(self, merged)?;
        let x = self.graph.add(x, y)?;

        let h = block.norm2.forward(self, x)?;
        let f = block.fc1.forward(self, h)?;
        let a = self.graph.gelu(f);
        self.record_activation(block.fc1.id(), a);
        let f2 = block.fc2.forward(self, a)?;
        self.graph.add(x, f2)
    }

    /// Mean cross-entropy loss on top of [`ForwardPass::logits`].
    pub fn loss(&mut self, images: &Tensor, labels: &[usize]) -> Result<Var> {
        let logits = self.logits(images)?;
        self.graph.cross_entropy(logits, labels)
    }
}

/// Gather indices that split fused QKV rows into heads and merge them back.
struct HeadLayout {
    split: [Rc<[usize]>; 3],
    merge: Rc<[usize]>,
    head_shape: Vec<usize>,
    merged_shape: Vec<usize>,
}

impl HeadLayout {
    fn new(cfg: &ModelConfig, batch: usize) -> Self {
        let (t, h, dh, dr) = (cfg.seq_len(), cfg.num_heads, cfg.head_dim(), cfg.attn_width());
        let split = |which: usize| -> Rc<[usize]> {
            let mut idx = Vec::with_capacity(batch * h * t * dh);
            for b in 0..batch {
                for head in 0..h {
                    for tok in 0..t {
                        let row = (b * t + tok) * 3 * dr + which * dr + head * dh;
                        idx.extend(row..row + dh);
                    }
                }
            }
            idx.into()
        };
        let mut merge = Vec::with_capacity(batch * t * dr);
        for b in 0..batch {
            for tok in 0..t {
                for head in 0..h {
                    let src = ((b * h + head) * t + tok) * dh;
                    merge.extend(src..src + dh);
                }
            }
        }
        Self {
            split: [split(0), split(1), split(2)],
            merge: merge.into(),
            head_shape: vec![batch * h, t, dh],
            merged_shape: vec![batch * t, dr],
        }
    }
}

fn check_images(cfg: &ModelConfig, images: &Tensor) -> Result<usize> {
    match *images.shape() {
        [b, c, h, w] if c == cfg.in_chans && h == cfg.image_size && w == cfg.image_size && b > 0 => Ok(b),
        ref s => Err(Error::Shape(format!(
            "expected images [B, {}, {}, {}], got {s:?}",
            cfg.in_chans, cfg.image_size, cfg.image_size
        ))),
    }
}

/// Non-overlapping patches flattened as `(channel, row, col)`, one row per
/// patch, patches in raster order.
fn extract_patches<T: Element>(cfg: &ModelConfig, images: &Tensor) -> Vec<T> {
    let (c, s, ps, grid) = (cfg.in_chans, cfg.image_size, cfg.patch_size, cfg.grid());
    let batch = images.shape()[0];
    let data = images.data();
    let mut out = Vec::with_capacity(batch * cfg.num_patches() * cfg.patch_dim());
    for b in 0..batch {
        for gy in 0..grid {
            for gx in 0..grid {
                for ch in 0..c {
                    for py in 0..ps {
                        let row = ((b * c + ch) * s + gy * ps + py) * s + gx * ps;
                        out.extend(data[row..row + ps].iter().map(|&v| T::from_f32(v)));
                    }
                }
            }
        }
    }
    out
}

/// A vision transformer whose linear layers can grow branches.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    pub patch_embed: GrowableLinear,
    pub cls_token: Tensor,
    pub pos_embed: Tensor,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub head: GrowableLinear,
    history: Vec<GrowthEvent>,
}

impl Model {
    /// Randomly initialized model (truncated normal, std 0.02; zero biases).
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let patch_embed = GrowableLinear::new("patch_embed", Role::Embed, config.patch_dim(), d, &mut rng);
        let cls_token = Tensor::param(vec![1, d], init::trunc_normal(&mut rng, d, 0.02))?;
        let t = config.seq_len();
        let pos_embed = Tensor::param(vec![t, d], init::trunc_normal(&mut rng, t * d, 0.02))?;
        let blocks = (0..config.depth)
            .map(|i| {
                let p = |name: &str| format!("blocks.{i}.{name}");
                Block {
                    norm1: LayerNorm::new(p("norm1"), d),
                    qkv: GrowableLinear::new(p("attn.qkv"), Role::Qkv, d, 3 * config.attn_width(), &mut rng),
                    proj: GrowableLinear::new(p("attn.proj"), Role::Proj, config.attn_width(), d, &mut rng),
                    norm2: LayerNorm::new(p("norm2"), d),
                    fc1: GrowableLinear::new(p("mlp.fc1"), Role::Fc1, d, config.mlp_hidden(), &mut rng),
                    fc2: GrowableLinear::new(p("mlp.fc2"), Role::Fc2, config.mlp_hidden(), d, &mut rng),
                }
            })
            .collect();
        let head = GrowableLinear::new("head", Role::Head, d, config.num_classes, &mut rng);
        Ok(Self {
            config,
            patch_embed,
            cls_token,
            pos_embed,
            blocks,
            norm: LayerNorm::new("norm", d),
            head,
            history: Vec::new(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn history(&self) -> &[GrowthEvent] {
        &self.history
    }

    /// All linear layers in forward order.
    pub fn layers(&self) -> Vec<&GrowableLinear> {
        let mut out = vec![&self.patch_embed];
        for b in &self.blocks {
            out.extend([&b.qkv, &b.proj, &b.fc1, &b.fc2]);
        }
        out.push(&self.head);
        out
    }

    fn layers_mut(&mut self) -> Vec<&mut GrowableLinear> {
        let mut out = vec![&mut self.patch_embed];
        for b in &mut self.blocks {
            out.extend([&mut b.qkv, &mut b.proj, &mut b.fc1, &mut b.fc2]);
        }
        out.push(&mut self.head);
        out
    }

    pub fn layer(&self, id: &str) -> Option<&GrowableLinear> {
        self.layers().into_iter().find(|l| l.id() == id)
    }

    pub fn layer_mut(&mut self, id: &str) -> Option<&mut GrowableLinear> {
        self.layers_mut().into_iter().find(|l| l.id() == id)
    }

    /// Layers that accept growth (QKV, projection, FC1, FC2).
    pub fn growable_layers(&self) -> Vec<&GrowableLinear> {
        self.layers().into_iter().filter(|l| l.role().is_growth_eligible()).collect()
    }

    /// Named parameters in canonical order.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.patch_embed.visit(&mut out);
        out.push(("cls_token".into(), &self.cls_token));
        out.push(("pos_embed".into(), &self.pos_embed));
        for b in &self.blocks {
            b.norm1.visit(&mut out);
            b.qkv.visit(&mut out);
            b.proj.visit(&mut out);
            b.norm2.visit(&mut out);
            b.fc1.visit(&mut out);
            b.fc2.visit(&mut out);
        }
        self.norm.visit(&mut out);
        self.head.visit(&mut out);
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.patch_embed.visit_mut(&mut out);
        out.push(("cls_token".into(), &mut self.cls_token));
        out.push(("pos_embed".into(), &mut self.pos_embed));
        for b in &mut self.blocks {
            b.norm1.visit_mut(&mut out);
            b.qkv.visit_mut(&mut out);
            b.proj.visit_mut(&mut out);
            b.norm2.visit_mut(&mut out);
            b.fc1.visit_mut(&mut out);
            b.fc2.visit_mut(&mut out);
        }
        self.norm.visit_mut(&mut out);
        self.head.visit_mut(&mut out);
        out
    }

    /// Exact number of trainable scalars, branches included.
    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Multiply-accumulate count of one image's forward pass (the usual
    /// "FLOPs" convention for vision transformers).
    pub fn flop_estimate(&self) -> u64 {
        let cfg = &self.config;
        let (t, p) = (cfg.seq_len() as u64, cfg.num_patches() as u64);
        let attn = 2 * (cfg.num_heads * cfg.head_dim()) as u64 * t * t;
        let mut total = p * self.patch_embed.macs_per_row() as u64;
        for b in &self.blocks {
            total += t * [&b.qkv, &b.proj, &b.fc1, &b.fc2].iter().map(|l| l.macs_per_row() as u64).sum::<u64>();
            total += attn;
        }
        total + self.head.macs_per_row() as u64
    }

    pub fn zero_grad(&mut self) {
        for (_, t) in self.params_mut() {
            t.zero_grad();
        }
    }

    /// Adds named gradients into the matching parameters.
    pub fn accumulate_grads<T: Element>(&mut self, grads: &[(String, Vec<T>)]) -> Result<()> {
        let lookup: HashMap<&str, &Vec<T>> = grads.iter().map(|(n, g)| (n.as_str(), g)).collect();
        for (name, t) in self.params_mut() {
            if let Some(g) = lookup.get(name.as_str()) {
                let g32: Vec<f32> = g.iter().map(|v| v.as_f32()).collect();
                t.accumulate_grad(&g32)?;
            }
        }
        Ok(())
    }

    /// Logits as a flat `[batch × num_classes]` buffer, optionally with some
    /// branches switched off.
    pub fn logits<T: Element>(&self, images: &Tensor, disabled: &HashSet<(String, usize)>) -> Result<Vec<T>> {
        let mut pass = ForwardPass::<T>::eval(self).without_branches(disabled.clone());
        let out = pass.logits(images)?;
        Ok(pass.graph.value(out).to_vec())
    }

    /// Adds a growth branch to `layer_id` and records it in the history.
    pub fn grow(&mut self, layer_id: &str, indices: &[usize], scaling_factor: f32, epoch: usize) -> Result<GrowthEvent> {
        let layer = self.layer_mut(layer_id).ok_or_else(|| Error::UnknownLayer(layer_id.into()))?;
        if !layer.role().is_growth_eligible() {
            return Err(Error::Growth(format!(
                "{layer_id} ({}) is not growth-eligible",
                layer.role().as_str()
            )));
        }
        let branch = crate::growth::grow(layer, indices, scaling_factor, epoch)?;
        let event = GrowthEvent {
            epoch,
            layer_id: layer_id.to_string(),
            indices: branch.selected().to_vec(),
            scaling_factor,
            param_delta: branch.param_count(),
        };
        self.history.push(event.clone());
        Ok(event)
    }

    /// Re-creates branch structure from a history (weights zeroed).
    pub(crate) fn replay_history(&mut self, history: &[GrowthEvent]) -> Result<()> {
        for event in history {
            let layer = self
                .layer_mut(&event.layer_id)
                .ok_or_else(|| Error::UnknownLayer(event.layer_id.clone()))?;
            let branch = GrowthBranch::placeholder(
                &event.indices,
                layer.out_dim(),
                layer.in_dim(),
                event.scaling_factor,
                event.epoch,
            )?;
            layer.branches.push(branch);
            self.history.push(event.clone());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            embed_dim: 8,
            depth: 2,
            num_heads: 2,
            mlp_ratio: 2.0,
            fc_reduce: 2,
            attn_reduce: 2,
            patch_size: 2,
            image_size: 4,
            in_chans: 1,
            num_classes: 3,
        }
    }

    #[test]
    fn param_names_are_unique() {
        let m = Model::new(tiny(), 0).unwrap();
        let names: HashSet<String> = m.params().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), m.params().len());
    }

    #[test]
    fn rejects_wrong_image_shape() {
        let m = Model::new(tiny(), 0).unwrap();
        let bad = Tensor::zeros(vec![1, 1, 5, 5]);
        assert!(m.logits::<f32>(&bad, &HashSet::new()).is_err());
    }

    #[test]
    fn head_and_embed_cannot_grow() {
        let mut m = Model::new(tiny(), 0).unwrap();
        assert!(m.grow("head", &[0], 0.2, 0).is_err());
        assert!(m.grow("patch_embed", &[0], 0.2, 0).is_err());
        assert!(m.grow("nope", &[0], 0.2, 0).is_err());
        assert!(m.grow("blocks.0.mlp.fc1", &[0], 0.2, 0).is_ok());
    }

    #[test]
    fn patches_follow_raster_order() {
        let cfg = tiny();
        let img = Tensor::new(vec![1, 1, 4, 4], (0..16).map(|v| v as f32).collect()).unwrap();
        let p: Vec<f32> = extract_patches(&cfg, &img);
        assert_eq!(&p[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&p[4..8], &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(&p[12..], &[10.0, 11.0, 14.0, 15.0]);
    }
}
