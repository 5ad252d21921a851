//! Per-neuron curvature of the loss with respect to a neuron's fan-in weights.
//!
//! For a GeLU-fronted neuron `σ(x) = gelu(wᵀx + b)` the Hessian of the loss
//! with respect to `w` splits into a Gauss–Newton part `φ″·σ′ᵀσ′` and the
//! splitting matrix `φ′·σ″`. The latter is assembled here from per-row traces
//!
//! ```text
//! S = (1/N) Σₙ gₙ · gelu″(zₙ) · xₙxₙᵀ
//! ```
//!
//! where `N` counts images and `gₙ` is the derivative of the summed per-image
//! loss with respect to the neuron's activation on token row `n`.
//!
//! Neurons without an elementwise nonlinearity (QKV, projection, FC2) have a
//! zero splitting matrix. For those the analysis either reports that zero
//! ([`LinearCurvature::StrictZero`]) or substitutes the exact fan-in block
//! Hessian assembled from Hessian-vector products
//! ([`LinearCurvature::BlockHessian`]). The choice is recorded in every
//! [`SplittingSpectrum`] as its [`Curvature`].

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::eigen::{sym_eigvals, SymmetricMatrix};
use crate::error::{Error, Result};
use crate::model::{Batch, ForwardPass, Model, RowOverride};
use crate::tensor::{gelu_second, hvp, Element};

/// A neuron carries a saddle signal when its minimum eigenvalue is below this.
pub const SADDLE_THRESHOLD: f64 = -1e-6;

pub const DEFAULT_SPECTRUM_BATCHES: usize = 4;

/// How neurons without an elementwise nonlinearity are analyzed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearCurvature {
    /// Exact fan-in block Hessian from Hessian-vector products.
    #[default]
    BlockHessian,
    /// The splitting matrix as defined, which is identically zero.
    StrictZero,
}

/// Which matrix a spectrum was computed from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Curvature {
    Splitting,
    BlockHessian,
    StrictZero,
}

impl Curvature {
    pub fn as_str(self) -> &'static str {
        match self {
            Curvature::Splitting => "splitting",
            Curvature::BlockHessian => "block_hessian",
            Curvature::StrictZero => "strict_zero",
        }
    }
}

impl std::str::FromStr for Curvature {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "splitting" => Ok(Curvature::Splitting),
            "block_hessian" => Ok(Curvature::BlockHessian),
            "strict_zero" => Ok(Curvature::StrictZero),
            other => Err(Error::Config(format!("unknown curvature kind `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumOptions {
    /// Mini-batches averaged into each estimate.
    #[serde(default = "default_batches")]
    pub max_batches: usize,
    #[serde(default)]
    pub linear: LinearCurvature,
}

fn default_batches() -> usize {
    DEFAULT_SPECTRUM_BATCHES
}

impl Default for SpectrumOptions {
    fn default() -> Self {
        Self {
            max_batches: DEFAULT_SPECTRUM_BATCHES,
            linear: LinearCurvature::default(),
        }
    }
}

/// Per-row quantities of one layer needed for its splitting matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    in_dim: usize,
    out_dim: usize,
    /// Layer inputs, `rows × in_dim`.
    x: Vec<f64>,
    /// Pre-activations, `rows × out_dim`.
    z: Vec<f64>,
    /// Loss derivative with respect to the activations, `rows × out_dim`.
    g: Vec<f64>,
    samples: usize,
}

impl LayerTrace {
    /// `samples` is the number of loss terms (images) the rows came from.
    pub fn new(in_dim: usize, out_dim: usize, x: Vec<f64>, z: Vec<f64>, g: Vec<f64>, samples: usize) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 || x.len() % in_dim != 0 {
            return Err(Error::Shape(format!("{} inputs do not form rows of {in_dim}", x.len())));
        }
        let rows = x.len() / in_dim;
        if z.len() != rows * out_dim || g.len() != rows * out_dim {
            return Err(Error::Shape(format!(
                "{rows} input rows but {} pre-activations and {} gradients for width {out_dim}",
                z.len(),
                g.len()
            )));
        }
        if samples == 0 {
            return Err(Error::Shape("a trace needs at least one sample".into()));
        }
        if let Some(bad) = x.iter().chain(&z).chain(&g).find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("trace entry {bad}")));
        }
        Ok(Self {
            in_dim,
            out_dim,
            x,
            z,
            g,
            samples,
        })
    }

    pub fn rows(&self) -> usize {
        self.x.len() / self.in_dim
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// Appends another trace of the same layer; the result averages over the
    /// union of samples.
    pub fn merge(&mut self, other: LayerTrace) -> Result<()> {
        if (self.in_dim, self.out_dim) != (other.in_dim, other.out_dim) {
            return Err(Error::Shape(format!(
                "cannot merge traces of {}→{} and {}→{}",
                self.in_dim, self.out_dim, other.in_dim, other.out_dim
            )));
        }
        self.x.extend(other.x);
        self.z.extend(other.z);
        self.g.extend(other.g);
        self.samples += other.samples;
        Ok(())
    }

    /// Same trace with every `gₙ` multiplied by `c` (a loss rescaling).
    pub fn with_loss_scale(&self, c: f64) -> Self {
        Self {
            g: self.g.iter().map(|v| v * c).collect(),
            ..self.clone()
        }
    }
}

/// Splitting matrix of `neuron` for a GeLU-fronted layer.
pub fn splitting_matrix(trace: &LayerTrace, neuron: usize) -> Result<SymmetricMatrix> {
    let (d, m) = (trace.in_dim, trace.out_dim);
    if neuron >= m {
        return Err(Error::Growth(format!("neuron {neuron} out of range for {m} neurons")));
    }
    let rows = trace.rows();
    let inv = 1.0 / trace.samples as f64;
    let mut weighted = trace.x.clone();
    for r in 0..rows {
        let c = inv * trace.g[r * m + neuron] * gelu_second(trace.z[r * m + neuron]);
        weighted[r * d..(r + 1) * d].iter_mut().for_each(|v| *v *= c);
    }
    let mut out = vec![0.0; d * d];
    // Xᵀ·diag(c)·X
    f64::gemm(d, rows, d, &trace.x, (1, d as isize), &weighted, (d as isize, 1), 0.0, &mut out);
    if let Some(bad) = out.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("splitting matrix entry {bad}")));
    }
    SymmetricMatrix::new(d, out)
}

fn check_batches<'a>(batches: &'a [Batch], opts: &SpectrumOptions) -> Result<&'a [Batch]> {
    if opts.max_batches == 0 {
        return Err(Error::Config("spectrum estimation needs at least one batch".into()));
    }
    if opts.max_batches > batches.len() {
        return Err(Error::Dataset(format!(
            "{} batches requested for spectrum estimation, {} available",
            opts.max_batches,
            batches.len()
        )));
    }
    Ok(&batches[..opts.max_batches])
}

/// Collects `(x, z, g)` rows of a GeLU-fronted layer over `batches` with the
/// model frozen. The forward runs in `f64`.
pub fn collect_trace(model: &Model, layer_id: &str, batches: &[Batch]) -> Result<LayerTrace> {
    let layer = model.layer(layer_id).ok_or_else(|| Error::UnknownLayer(layer_id.into()))?;
    if !layer.role().is_gelu_fronted() {
        return Err(Error::Growth(format!(
            "{layer_id} ({}) has no elementwise nonlinearity",
            layer.role().as_str()
        )));
    }
    let mut trace: Option<LayerTrace> = None;
    for batch in batches {
        let mut pass = ForwardPass::<f64>::train(model)
            .only_trainable([layer.weight_name()])
            .probe([layer_id.to_string()]);
        let loss = pass.loss(&batch.images, &batch.labels)?;
        pass.graph.backward(loss)?;
        let probe = pass.probe_of(layer_id).expect("probed layer");
        let act = probe.activation.expect("GeLU-fronted layer records its activation");
        // the loss is a batch mean; rescale to the summed per-image loss
        let n = batch.len() as f64;
        let g = pass
            .graph
            .grad(act)
            .ok_or(Error::NoGraph)?
            .iter()
            .map(|v| v * n)
            .collect();
        let t = LayerTrace::new(
            layer.in_dim(),
            layer.out_dim(),
            pass.graph.value(probe.input).to_vec(),
            pass.graph.value(probe.output).to_vec(),
            g,
            batch.len(),
        )?;
        match trace.as_mut() {
            Some(acc) => acc.merge(t)?,
            None => trace = Some(t),
        }
    }
    trace.ok_or_else(|| Error::Dataset("no batches for trace collection".into()))
}

/// Gradient of the sample-weighted mean loss over `batches` with respect to
/// one weight row, with that row set to `row_values`.
pub fn row_gradient(model: &Model, layer_id: &str, row: usize, row_values: &[f64], batches: &[Batch]) -> Result<Vec<f64>> {
    let layer = model.layer(layer_id).ok_or_else(|| Error::UnknownLayer(layer_id.into()))?;
    let (d, name) = (layer.in_dim(), layer.weight_name());
    if row >= layer.out_dim() {
        return Err(Error::Growth(format!("neuron {row} out of range for {}", layer.out_dim())));
    }
    if row_values.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: row_values.len(),
        });
    }
    let total: usize = batches.iter().map(Batch::len).sum();
    let mut out = vec![0.0; d];
    for batch in batches {
        let mut pass = ForwardPass::<f64>::train(model)
            .only_trainable([name.clone()])
            .with_row_override(RowOverride {
                layer_id: layer_id.to_string(),
                row,
                values: row_values.to_vec(),
            });
        let loss = pass.loss(&batch.images, &batch.labels)?;
        pass.graph.backward(loss)?;
        let w = pass.param_var(&name).ok_or(Error::NoGraph)?;
        let grad = pass.graph.grad(w).ok_or(Error::NoGraph)?;
        let weight = batch.len() as f64 / total as f64;
        for (o, g) in out.iter_mut().zip(&grad[row * d..(row + 1) * d]) {
            *o += weight * g;
        }
    }
    Ok(out)
}

/// Exact loss Hessian with respect to one neuron's fan-in weights, one
/// Hessian-vector product per column, symmetrized.
pub fn block_hessian(model: &Model, layer_id: &str, neuron: usize, batches: &[Batch]) -> Result<SymmetricMatrix> {
    let layer = model.layer(layer_id).ok_or_else(|| Error::UnknownLayer(layer_id.into()))?;
    let d = layer.in_dim();
    if neuron >= layer.out_dim() {
        return Err(Error::Growth(format!("neuron {neuron} out of range for {}", layer.out_dim())));
    }
    let params: Vec<f64> = layer.weight.data()[neuron * d..(neuron + 1) * d]
        .iter()
        .map(|&v| v as f64)
        .collect();
    let grad = |p: &[f64]| row_gradient(model, layer_id, neuron, p, batches);
    let mut cols = vec![0.0; d * d];
    let mut e = vec![0.0; d];
    for k in 0..d {
        e[k] = 1.0;
        let col = hvp(grad, &params, &e)?;
        e[k] = 0.0;
        for (i, v) in col.into_iter().enumerate() {
            cols[i * d + k] = v;
        }
    }
    SymmetricMatrix::new(d, cols)
}

/// Minimum eigenvalue of every neuron of one layer at one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplittingSpectrum {
    pub layer_id: String,
    pub epoch: usize,
    /// One entry per neuron, in neuron order.
    pub min_eigvals: Vec<f32>,
    /// Sum of `|λ|` over all negative eigenvalues of all neurons.
    pub negative_mass: f64,
    pub batch_count: usize,
    /// Fan-in of the layer, which prices a growth branch.
    pub in_dim: usize,
    pub curvature: Curvature,
}

impl SplittingSpectrum {
    /// Spectrum built from one matrix per neuron.
    pub fn from_matrices(
        layer_id: impl Into<String>,
        epoch: usize,
        in_dim: usize,
        batch_count: usize,
        curvature: Curvature,
        matrices: &[SymmetricMatrix],
    ) -> Self {
        let spectra: Vec<Vec<f64>> = matrices.par_iter().map(sym_eigvals).collect();
        Self::from_eigvals(layer_id, epoch, in_dim, batch_count, curvature, &spectra)
    }

    fn from_eigvals(
        layer_id: impl Into<String>,
        epoch: usize,
        in_dim: usize,
        batch_count: usize,
        curvature: Curvature,
        spectra: &[Vec<f64>],
    ) -> Self {
        Self {
            layer_id: layer_id.into(),
            epoch,
            min_eigvals: spectra.iter().map(|s| s[0] as f32).collect(),
            negative_mass: spectra.iter().flatten().filter(|v| **v < 0.0).map(|v| -v).sum(),
            batch_count,
            in_dim,
            curvature,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.min_eigvals.len()
    }

    /// Neurons whose minimum eigenvalue is below [`SADDLE_THRESHOLD`].
    pub fn eligible(&self) -> Vec<usize> {
        (0..self.min_eigvals.len())
            .filter(|&i| (self.min_eigvals[i] as f64) < SADDLE_THRESHOLD)
            .collect()
    }

    /// Median of `|λ|` over the negative minimum eigenvalues, if any.
    pub fn median_negative_magnitude(&self) -> Option<f64> {
        median(self.min_eigvals.iter().filter(|v| **v < 0.0).map(|v| -(*v as f64)).collect())
    }
}

pub(crate) fn median(mut values: Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Spectrum of a growth-eligible layer on the first `opts.max_batches`
/// batches. Neurons are analyzed in parallel.
pub fn layer_spectrum(
    model: &Model,
    layer_id: &str,
    epoch: usize,
    batches: &[Batch],
    opts: &SpectrumOptions,
) -> Result<SplittingSpectrum> {
    let layer = model.layer(layer_id).ok_or_else(|| Error::UnknownLayer(layer_id.into()))?;
    if !layer.role().is_growth_eligible() {
        return Err(Error::Growth(format!(
            "{layer_id} ({}) is not growth-eligible",
            layer.role().as_str()
        )));
    }
    let batches = check_batches(batches, opts)?;
    let (d, m) = (layer.in_dim(), layer.out_dim());
    let (curvature, matrices) = if layer.role().is_gelu_fronted() {
        let trace = collect_trace(model, layer_id, batches)?;
        let matrices = (0..m)
            .into_par_iter()
            .map(|j| splitting_matrix(&trace, j))
            .collect::<Result<Vec<_>>>()?;
        (Curvature::Splitting, matrices)
    } else {
        match opts.linear {
            LinearCurvature::StrictZero => (Curvature::StrictZero, vec![SymmetricMatrix::zeros(d); m]),
            LinearCurvature::BlockHessian => {
                let matrices = (0..m)
                    .into_par_iter()
                    .map(|j| block_hessian(model, layer_id, j, batches))
                    .collect::<Result<Vec<_>>>()?;
                (Curvature::BlockHessian, matrices)
            }
        }
    };
    Ok(SplittingSpectrum::from_matrices(
        layer_id,
        epoch,
        d,
        batches.len(),
        curvature,
        &matrices,
    ))
}

fn file_stem(layer_id: &str) -> String {
    layer_id.replace(['/', '\\'], "_")
}

/// Writes `{dir}/{epoch}/{layer_id}.csv` and `.svg` for every spectrum and
/// returns the paths written.
pub fn export_spectrum(spectra: &[SplittingSpectrum], dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    if spectra.is_empty() {
        return Err(Error::Config("no spectra to export".into()));
    }
    let mut written = Vec::new();
    for s in spectra {
        let epoch_dir = dir.as_ref().join(s.epoch.to_string());
        fs::create_dir_all(&epoch_dir).map_err(|e| Error::io(&epoch_dir, e))?;
        let stem = file_stem(&s.layer_id);
        let csv = epoch_dir.join(format!("{stem}.csv"));
        fs::write(&csv, spectrum_csv(s)).map_err(|e| Error::io(&csv, e))?;
        let svg = epoch_dir.join(format!("{stem}.svg"));
        fs::write(&svg, spectrum_svg(s)).map_err(|e| Error::io(&svg, e))?;
        written.extend([csv, svg]);
    }
    Ok(written)
}

pub const CSV_HEADER: &str = "epoch,layer_id,neuron_index,min_eigval,curvature";

/// One row per neuron; eigenvalues carry 9 significant digits so they parse
/// back to the identical `f32`.
pub fn spectrum_csv(s: &SplittingSpectrum) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for (i, v) in s.min_eigvals.iter().enumerate() {
        writeln!(out, "{},{},{i},{v:.8e},{}", s.epoch, s.layer_id, s.curvature.as_str()).expect("string write");
    }
    out
}

/// Parses CSV written by [`spectrum_csv`]. Rows may cover several layers;
/// one spectrum per `(epoch, layer_id)` is returned in first-seen order.
/// `in_dim`, `negative_mass` and `batch_count` are not part of the CSV: they
/// come back as zero, with `negative_mass` recomputed from the minima.
pub fn parse_spectrum_csv(text: &str) -> Result<Vec<SplittingSpectrum>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(h) if h.trim() == CSV_HEADER => {}
        Some(h) if h.trim() == "epoch,layer_id,neuron_index,min_eigval" => {}
        other => return Err(Error::Config(format!("unexpected spectrum CSV header {other:?}"))),
    }
    let mut out: Vec<SplittingSpectrum> = Vec::new();
    for (n, line) in lines.enumerate() {
        let bad = |what: &str| Error::Config(format!("spectrum CSV row {}: {what}", n + 1));
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() != 4 && cols.len() != 5 {
            return Err(bad("wrong column count"));
        }
        let epoch: usize = cols[0].parse().map_err(|_| bad("bad epoch"))?;
        let layer_id = cols[1].to_string();
        let idx: usize = cols[2].parse().map_err(|_| bad("bad neuron index"))?;
        let value: f32 = cols[3].parse().map_err(|_| bad("bad eigenvalue"))?;
        let curvature = match cols.get(4) {
            Some(c) => c.parse()?,
            None => Curvature::Splitting,
        };
        let pos = out.iter().position(|s| s.epoch == epoch && s.layer_id == layer_id);
        let s = match pos {
            Some(p) => &mut out[p],
            None => {
                out.push(SplittingSpectrum {
                    layer_id,
                    epoch,
                    min_eigvals: Vec::new(),
                    negative_mass: 0.0,
                    batch_count: 0,
                    in_dim: 0,
                    curvature,
                });
                out.last_mut().expect("just pushed")
            }
        };
        if idx != s.min_eigvals.len() {
            return Err(bad("neuron indices must be consecutive from 0"));
        }
        s.min_eigvals.push(value);
    }
    for s in &mut out {
        s.negative_mass = s.min_eigvals.iter().filter(|v| **v < 0.0).map(|v| -(*v as f64)).sum();
    }
    Ok(out)
}

/// Scatter of `|λ|` for negative minimum eigenvalues against neuron index.
pub fn spectrum_svg(s: &SplittingSpectrum) -> String {
    const W: f64 = 640.0;
    const H: f64 = 360.0;
    const PAD: f64 = 48.0;
    let points: Vec<(usize, f64)> = s
        .min_eigvals
        .iter()
        .enumerate()
        .filter(|(_, v)| **v < 0.0)
        .map(|(i, v)| (i, -(*v as f64)))
        .collect();
    let x_max = s.min_eigvals.len().saturating_sub(1).max(1) as f64;
    let y_max = points.iter().map(|p| p.1).fold(0.0, f64::max);
    let y_max = if y_max > 0.0 { y_max } else { 1.0 };
    let sx = |i: usize| PAD + (W - 2.0 * PAD) * i as f64 / x_max;
    let sy = |v: f64| H - PAD - (H - 2.0 * PAD) * v / y_max;

    let mut out = String::new();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    )
    .expect("string write");
    writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#).expect("string write");
    writeln!(
        out,
        r#"<text x="{}" y="20" font-family="sans-serif" font-size="14" text-anchor="middle">{} (epoch {}, {})</text>"#,
        W / 2.0,
        xml_escape(&s.layer_id),
        s.epoch,
        s.curvature.as_str()
    )
    .expect("string write");
    writeln!(
        out,
        r#"<g class="axes" stroke="black"><line x1="{PAD}" y1="{b}" x2="{r}" y2="{b}"/><line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{b}"/></g>"#,
        b = H - PAD,
        r = W - PAD
    )
    .expect("string write");
    writeln!(
        out,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">neuron index</text>"#,
        W / 2.0,
        H - 12.0
    )
    .expect("string write");
    writeln!(
        out,
        r#"<text x="14" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 14 {})">|negative eigenvalue|</text>"#,
        H / 2.0,
        H / 2.0
    )
    .expect("string write");
    writeln!(
        out,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="10" text-anchor="end">{y_max:.3e}</text>"#,
        PAD - 4.0,
        PAD + 4.0
    )
    .expect("string write");
    out.push_str("<g class=\"points\" fill=\"steelblue\">\n");
    for (i, v) in &points {
        writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="3"/>"#, sx(*i), sy(*v)).expect("string write");
    }
    out.push_str("</g>\n</svg>\n");
    out
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
