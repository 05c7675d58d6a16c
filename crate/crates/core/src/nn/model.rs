use nalgebra::DMatrix;
use rand::Rng as _;

use super::gemm::{gemm, View};
use super::layers::{Activation, DenseLayer, SpaceTimeConvLayer};
use crate::dataset::Example;
use crate::error::{Error, Result};
use crate::forward::{Fingerprint, SourceSpace, Vec3};
use crate::rng;

/// Hidden widths of the published dense stack.
pub const HIDDEN_WIDTHS: [usize; 3] = [3000, 2500, 1200];
pub const CONV_FILTERS: usize = 32;
pub const CONV_TAPS: usize = 5;

/// Fixed, parameter-free input normalization applied before the first layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InputScaling {
    #[default]
    None,
    /// Divide the flattened input by its root-mean-square value.
    UnitRms,
}

impl InputScaling {
    pub(crate) fn code(self) -> u8 {
        match self {
            InputScaling::None => 0,
            InputScaling::UnitRms => 1,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(InputScaling::None),
            1 => Some(InputScaling::UnitRms),
            _ => None,
        }
    }

    fn apply(self, x: &mut [f64]) {
        if self == InputScaling::UnitRms {
            let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
            if rms > 0.0 {
                x.iter_mut().for_each(|v| *v /= rms);
            }
        }
    }
}

/// Fixed affine map from raw network outputs to meters, applied per
/// coordinate triple: `position = center + scale·output`. Training compares
/// raw outputs with targets mapped the opposite way, so the regression runs
/// on coordinates of order one whatever the head size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutputFrame {
    pub center: Vec3,
    pub scale: f64,
}

impl Default for OutputFrame {
    fn default() -> Self {
        Self { center: Vec3::zeros(), scale: 1.0 }
    }
}

impl OutputFrame {
    pub fn new(center: Vec3, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) || !center.iter().all(|c| c.is_finite()) {
            return Err(Error::invalid("output frame needs a finite center and a scale > 0"));
        }
        Ok(Self { center, scale })
    }

    /// Centroid of the grid and RMS distance of its points from it.
    pub fn for_space(space: &SourceSpace) -> Result<Self> {
        let c = space.centroid();
        let ms = space.positions().iter().map(|p| (p - c).norm_squared()).sum::<f64>() / space.len() as f64;
        Self::new(c, ms.sqrt())
    }

    fn to_meters(&self, out: &mut [f64]) {
        for t in out.chunks_exact_mut(3) {
            for (k, v) in t.iter_mut().enumerate() {
                *v = self.center[k] + self.scale * *v;
            }
        }
    }

    fn from_meters(&self, out: &mut [f64]) {
        for t in out.chunks_exact_mut(3) {
            for (k, v) in t.iter_mut().enumerate() {
                *v = (*v - self.center[k]) / self.scale;
            }
        }
    }
}

/// Optional space-time convolution followed by a stack of dense layers,
/// regressing 3Q source coordinates from an M×N measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    pub(crate) sensors: usize,
    pub(crate) samples: usize,
    pub(crate) scaling: InputScaling,
    pub(crate) conv: Option<SpaceTimeConvLayer>,
    pub(crate) dense: Vec<DenseLayer>,
    pub(crate) frame: OutputFrame,
    /// Lead field the model was trained against; unset for fresh models.
    pub fingerprint: Fingerprint,
}

impl NetworkModel {
    pub fn new(
        sensors: usize,
        samples: usize,
        scaling: InputScaling,
        conv: Option<SpaceTimeConvLayer>,
        dense: Vec<DenseLayer>,
    ) -> Result<Self> {
        if sensors == 0 || samples == 0 {
            return Err(Error::invalid("model input shape must be non-empty"));
        }
        let mut width = match &conv {
            Some(c) => {
                if c.sensors != sensors {
                    return Err(Error::invalid("conv layer sensor count differs from input"));
                }
                if samples < c.taps {
                    return Err(Error::invalid(format!(
                        "{samples} samples are fewer than the {} conv taps",
                        c.taps
                    )));
                }
                c.filters * c.output_width(samples)
            }
            None => sensors * samples,
        };
        if dense.is_empty() {
            return Err(Error::invalid("model needs at least one dense layer"));
        }
        for (i, d) in dense.iter().enumerate() {
            if d.inputs != width {
                return Err(Error::invalid(format!(
                    "dense layer {i} expects {} inputs but receives {width}",
                    d.inputs
                )));
            }
            width = d.outputs;
        }
        if width == 0 || width % 3 != 0 {
            return Err(Error::invalid(
                "output width must be a positive multiple of 3",
            ));
        }
        Ok(Self {
            sensors,
            samples,
            scaling,
            conv,
            dense,
            frame: OutputFrame::default(),
            fingerprint: Fingerprint::default(),
        })
    }

    pub fn output_frame(&self) -> OutputFrame {
        self.frame
    }

    pub fn set_output_frame(&mut self, frame: OutputFrame) {
        self.frame = frame;
    }

    /// Frames outputs on the grid the model will be trained for.
    pub fn set_output_frame_from(&mut self, space: &SourceSpace) -> Result<()> {
        self.frame = OutputFrame::for_space(space)?;
        Ok(())
    }

    pub fn sensors(&self) -> usize {
        self.sensors
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn input_dim(&self) -> usize {
        self.sensors * self.samples
    }

    pub fn output_dim(&self) -> usize {
        self.dense.last().map_or(0, |d| d.outputs)
    }

    pub fn n_sources(&self) -> usize {
        self.output_dim() / 3
    }

    pub fn scaling(&self) -> InputScaling {
        self.scaling
    }

    pub fn conv(&self) -> Option<&SpaceTimeConvLayer> {
        self.conv.as_ref()
    }

    pub fn dense_layers(&self) -> &[DenseLayer] {
        &self.dense
    }

    pub fn parameter_count(&self) -> usize {
        self.conv.as_ref().map_or(0, |c| c.parameter_count())
            + self
                .dense
                .iter()
                .map(|d| d.parameter_count())
                .sum::<usize>()
    }

    /// Parameter blocks in canonical order: conv kernels, conv biases, then
    /// each dense layer's weights and biases.
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        if let Some(c) = &self.conv {
            out.push(&c.kernels);
            out.push(&c.biases);
        }
        for d in &self.dense {
            out.push(&d.weights);
            out.push(&d.biases);
        }
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        if let Some(c) = &mut self.conv {
            out.push(&mut c.kernels);
            out.push(&mut c.biases);
        }
        for d in &mut self.dense {
            out.push(&mut d.weights);
            out.push(&mut d.biases);
        }
        out
    }

    /// Flattens (row-major: sensor, then sample) and normalizes one input.
    pub fn prepare_input(&self, measurement: &DMatrix<f64>) -> Result<Vec<f64>> {
        if measurement.shape() != (self.sensors, self.samples) {
            return Err(Error::invalid(format!(
                "input is {}×{}, model expects {}×{}",
                measurement.nrows(),
                measurement.ncols(),
                self.sensors,
                self.samples
            )));
        }
        let mut x: Vec<f64> = measurement.transpose().as_slice().to_vec();
        self.scaling.apply(&mut x);
        Ok(x)
    }

    fn layer_offset(&self) -> usize {
        usize::from(self.conv.is_some())
    }

    /// Source coordinates in meters for one measurement.
    pub fn forward(&self, measurement: &DMatrix<f64>) -> Result<Vec<f64>> {
        let x = self.prepare_input(measurement)?;
        let mut h = match &self.conv {
            Some(c) => {
                let f = conv_forward(c, &x, 1, self.samples);
                check_finite(&f, 0)?;
                f
            }
            None => x,
        };
        for (i, d) in self.dense.iter().enumerate() {
            h = d.forward_one(&h);
            check_finite(&h, i + self.layer_offset())?;
        }
        self.frame.to_meters(&mut h);
        Ok(h)
    }
}

fn check_finite(values: &[f64], layer: usize) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { layer })
    }
}

fn glorot(rng: &mut rng::Rng, n: usize, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.random_range(-limit..=limit)).collect()
}

fn dense_stack(
    input: usize,
    hidden: &[usize],
    outputs: usize,
    seed: u64,
    offset: u64,
) -> Vec<DenseLayer> {
    let mut layers = Vec::with_capacity(hidden.len() + 1);
    let mut width = input;
    let sizes = hidden
        .iter()
        .map(|&h| (h, Activation::Sigmoid))
        .chain([(outputs, Activation::Identity)]);
    for (k, (out, act)) in sizes.enumerate() {
        let mut r = rng::rng(rng::derive_seed(seed, &[offset + k as u64]));
        let mut layer = DenseLayer::zeros(width, out, act);
        layer.weights = glorot(&mut r, width * out, width, out);
        layers.push(layer);
        width = out;
    }
    layers
}

fn check_q(q: usize) -> Result<()> {
    if (1..=3).contains(&q) {
        Ok(())
    } else {
        Err(Error::invalid(format!("Q must be 1, 2 or 3, got {q}")))
    }
}

/// Snapshot regressor with the published hidden widths.
pub fn build_mlp(sensors: usize, q: usize, seed: u64) -> Result<NetworkModel> {
    build_mlp_with_hidden(sensors, q, &HIDDEN_WIDTHS, seed)
}

/// Sigmoid hidden layers of the given widths, identity output of 3Q.
/// Weights are uniform in ±√(6/(fan_in+fan_out)), biases zero.
pub fn build_mlp_with_hidden(
    sensors: usize,
    q: usize,
    hidden: &[usize],
    seed: u64,
) -> Result<NetworkModel> {
    check_q(q)?;
    let dense = dense_stack(sensors, hidden, 3 * q, seed, 1);
    NetworkModel::new(sensors, 1, InputScaling::UnitRms, None, dense)
}

/// Multi-snapshot regressor: 32 kernels of 5 taps, then the published stack.
pub fn build_cnn(sensors: usize, samples: usize, q: usize, seed: u64) -> Result<NetworkModel> {
    build_cnn_with(
        sensors,
        samples,
        q,
        CONV_FILTERS,
        CONV_TAPS,
        &HIDDEN_WIDTHS,
        seed,
    )
}

pub fn build_cnn_with(
    sensors: usize,
    samples: usize,
    q: usize,
    filters: usize,
    taps: usize,
    hidden: &[usize],
    seed: u64,
) -> Result<NetworkModel> {
    check_q(q)?;
    if samples < taps {
        return Err(Error::invalid(format!(
            "{samples} samples are fewer than {taps} taps"
        )));
    }
    let mut conv = SpaceTimeConvLayer::from_parts(
        sensors,
        taps,
        filters,
        vec![0.0; filters * sensors * taps],
        vec![0.0; filters],
    )?;
    let mut r = rng::rng(rng::derive_seed(seed, &[0]));
    conv.kernels = glorot(&mut r, conv.kernels.len(), sensors * taps, filters * taps);
    let flat = filters * conv.output_width(samples);
    let dense = dense_stack(flat, hidden, 3 * q, seed, 1);
    NetworkModel::new(sensors, samples, InputScaling::UnitRms, Some(conv), dense)
}

pub fn forward_pass(model: &NetworkModel, measurement: &DMatrix<f64>) -> Result<Vec<f64>> {
    model.forward(measurement)
}

/// Output reshaped into Q coordinate triples.
pub fn predict_locations(model: &NetworkModel, measurement: &DMatrix<f64>) -> Result<Vec<Vec3>> {
    Ok(model
        .forward(measurement)?
        .chunks_exact(3)
        .map(Vec3::from_column_slice)
        .collect())
}

/// Conv features for a batch, laid out `batch × (filters·width)` with the
/// filter index major and time minor.
fn conv_forward(c: &SpaceTimeConvLayer, x: &[f64], batch: usize, samples: usize) -> Vec<f64> {
    let p = c.im2col(x, batch, samples);
    conv_from_patches(c, &p, batch, samples)
}

fn conv_from_patches(c: &SpaceTimeConvLayer, p: &[f64], batch: usize, samples: usize) -> Vec<f64> {
    let width = c.output_width(samples);
    let cols = batch * width;
    let mt = c.sensors * c.taps;
    let mut f = vec![0.0; c.filters * cols];
    gemm(
        1.0,
        View::row_major(&c.kernels, c.filters, mt),
        View::row_major(p, mt, cols),
        0.0,
        &mut f,
    );
    let lw = c.filters * width;
    let mut out = vec![0.0; batch * lw];
    for l in 0..c.filters {
        for b in 0..batch {
            let src = &f[l * cols + b * width..l * cols + (b + 1) * width];
            let dst = &mut out[b * lw + l * width..b * lw + (l + 1) * width];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s + c.biases[l];
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RegType {
    #[default]
    None,
    /// `‖Θ‖²` over weights.
    Tikhonov,
    /// `‖Θ‖₁` over weights.
    L1,
}

/// Penalty `weight·R(Θ)`; biases are never penalized.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Regularization {
    pub kind: RegType,
    pub weight: f64,
}

impl Regularization {
    pub fn none() -> Self {
        Self::default()
    }

    fn is_active(&self) -> bool {
        self.kind != RegType::None && self.weight != 0.0
    }

    fn penalty(&self, w: &[f64]) -> f64 {
        match self.kind {
            RegType::None => 0.0,
            RegType::Tikhonov => w.iter().map(|v| v * v).sum(),
            RegType::L1 => w.iter().map(|v| v.abs()).sum(),
        }
    }

    fn add_gradient(&self, w: &[f64], g: &mut [f64]) {
        let a = self.weight;
        match self.kind {
            RegType::None => {}
            RegType::Tikhonov => g.iter_mut().zip(w).for_each(|(g, w)| *g += 2.0 * a * w),
            RegType::L1 => g.iter_mut().zip(w).for_each(|(g, w)| {
                if *w != 0.0 {
                    *g += a * w.signum()
                }
            }),
        }
    }

    /// `w ← w − lr·∂(weight·R)/∂w`.
    fn descend(&self, w: &mut [f64], lr: f64) {
        if !self.is_active() {
            return;
        }
        let a = self.weight;
        match self.kind {
            RegType::None => {}
            RegType::Tikhonov => w.iter_mut().for_each(|w| *w -= lr * (2.0 * a * *w)),
            RegType::L1 => w.iter_mut().for_each(|w| {
                if *w != 0.0 {
                    *w -= lr * (a * w.signum())
                }
            }),
        }
    }
}

/// Prepared minibatch: inputs `size × input_dim` and targets
/// `size × output_dim`, both row-major. Targets are given in meters and stored
/// in the model's output frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub(crate) inputs: Vec<f64>,
    pub(crate) targets: Vec<f64>,
    pub(crate) size: usize,
}

impl Batch {
    pub fn new(
        model: &NetworkModel,
        inputs: &[DMatrix<f64>],
        targets: &[Vec<f64>],
    ) -> Result<Self> {
        if inputs.is_empty() || inputs.len() != targets.len() {
            return Err(Error::invalid(
                "batch must be non-empty with one target per input",
            ));
        }
        let mut xs = Vec::with_capacity(inputs.len() * model.input_dim());
        let mut ts = Vec::with_capacity(inputs.len() * model.output_dim());
        for (x, t) in inputs.iter().zip(targets) {
            xs.extend(model.prepare_input(x)?);
            if t.len() != model.output_dim() {
                return Err(Error::invalid(format!(
                    "target has {} values, model emits {}",
                    t.len(),
                    model.output_dim()
                )));
            }
            let start = ts.len();
            ts.extend_from_slice(t);
            model.frame.from_meters(&mut ts[start..]);
        }
        Ok(Self {
            inputs: xs,
            targets: ts,
            size: inputs.len(),
        })
    }

    pub fn from_examples(model: &NetworkModel, examples: &[Example]) -> Result<Self> {
        let inputs: Vec<DMatrix<f64>> = examples.iter().map(|e| e.measurement.clone()).collect();
        let targets: Vec<Vec<f64>> = examples.iter().map(|e| e.flat_targets()).collect();
        Self::new(model, &inputs, &targets)
    }

    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGradient {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

/// Gradient blocks shaped and ordered like [`NetworkModel::param_slices`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub conv_kernels: Vec<f64>,
    pub conv_biases: Vec<f64>,
    pub dense: Vec<DenseGradient>,
    has_conv: bool,
}

impl Gradients {
    pub fn zeros_like(model: &NetworkModel) -> Self {
        Self {
            conv_kernels: model
                .conv
                .as_ref()
                .map_or(Vec::new(), |c| vec![0.0; c.kernels.len()]),
            conv_biases: model
                .conv
                .as_ref()
                .map_or(Vec::new(), |c| vec![0.0; c.biases.len()]),
            dense: model
                .dense
                .iter()
                .map(|d| DenseGradient {
                    weights: vec![0.0; d.weights.len()],
                    biases: vec![0.0; d.outputs],
                })
                .collect(),
            has_conv: model.conv.is_some(),
        }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        if self.has_conv {
            out.push(&self.conv_kernels);
            out.push(&self.conv_biases);
        }
        for d in &self.dense {
            out.push(&d.weights);
            out.push(&d.biases);
        }
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        if self.has_conv {
            out.push(&mut self.conv_kernels);
            out.push(&mut self.conv_biases);
        }
        for d in &mut self.dense {
            out.push(&mut d.weights);
            out.push(&mut d.biases);
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    /// Data term plus penalty.
    pub total: f64,
    /// Mean over the batch of the mean squared coordinate error, in output-frame units.
    pub data: f64,
    /// `weight·R(Θ)`.
    pub reg: f64,
}

struct ForwardCache {
    patches: Option<Vec<f64>>,
    /// Input to dense layer 0, then every dense layer's output.
    acts: Vec<Vec<f64>>,
}

fn forward_cache(model: &NetworkModel, batch: &Batch) -> Result<ForwardCache> {
    let b = batch.size;
    if b == 0 {
        return Err(Error::invalid("empty batch"));
    }
    if batch.inputs.len() != b * model.input_dim() || batch.targets.len() != b * model.output_dim()
    {
        return Err(Error::invalid("batch shape does not match the model"));
    }
    let offset = model.layer_offset();

    let patches = model
        .conv
        .as_ref()
        .map(|c| c.im2col(&batch.inputs, b, model.samples));
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(model.dense.len() + 1);
    acts.push(match (&model.conv, &patches) {
        (Some(c), Some(p)) => {
            let f = conv_from_patches(c, p, b, model.samples);
            check_finite(&f, 0)?;
            f
        }
        _ => batch.inputs.clone(),
    });
    for (i, d) in model.dense.iter().enumerate() {
        let x = acts.last().unwrap();
        let mut z = vec![0.0; b * d.outputs];
        for row in z.chunks_exact_mut(d.outputs) {
            row.copy_from_slice(&d.biases);
        }
        // Z = X·Wᵀ + b, with W column-major (element (o, i) at i·out + o)
        let wt = View {
            data: &d.weights,
            rows: d.inputs,
            cols: d.outputs,
            rs: d.outputs,
            cs: 1,
        };
        gemm(1.0, View::row_major(x, b, d.inputs), wt, 1.0, &mut z);
        z.iter_mut().for_each(|v| *v = d.activation.apply(*v));
        check_finite(&z, i + offset)?;
        acts.push(z);
    }
    Ok(ForwardCache { patches, acts })
}

/// Mean squared error and its gradient with respect to the network output.
fn output_error(model: &NetworkModel, cache: &ForwardCache, batch: &Batch) -> (f64, Vec<f64>) {
    let out_dim = model.output_dim();
    let y = cache.acts.last().unwrap();
    let mut sq = 0.0;
    let mut delta = vec![0.0; batch.size * out_dim];
    let scale = 1.0 / (batch.size * out_dim) as f64;
    for ((dv, yv), tv) in delta.iter_mut().zip(y).zip(&batch.targets) {
        let e = yv - tv;
        sq += e * e;
        *dv = 2.0 * e * scale;
    }
    (sq * scale, delta)
}

fn penalty(model: &NetworkModel, reg: &Regularization) -> f64 {
    if !reg.is_active() {
        return 0.0;
    }
    let conv = model.conv.as_ref().map_or(0.0, |c| reg.penalty(&c.kernels));
    let dense: f64 = model.dense.iter().map(|d| reg.penalty(&d.weights)).sum();
    (conv + dense) * reg.weight
}

/// Receives parameter gradients from the backward pass, output layer first.
///
/// A block is handed over only after its weights have been used to
/// propagate the error further back, so a sink may overwrite them.
trait GradientSink {
    fn model(&self) -> &NetworkModel;

    /// `∂W = Xᵀ·δ` (stored like W) and `∂b = Σ_rows δ` for dense layer `i`.
    fn dense(&mut self, i: usize, x: View<'_>, delta: View<'_>);

    /// `∂K = ∂F·Pᵀ` and `∂b_l = Σ ∂F_l` for the conv layer; `df` is
    /// `filters × cols`, `patches` is `(sensors·taps) × cols`.
    fn conv(&mut self, df: View<'_>, patches: View<'_>);
}

fn backward(sink: &mut impl GradientSink, cache: &ForwardCache, mut delta: Vec<f64>, b: usize) {
    let n_dense = sink.model().dense.len();
    let has_conv = sink.model().conv.is_some();
    for i in (0..n_dense).rev() {
        let (a_in, a_out) = (&cache.acts[i], &cache.acts[i + 1]);
        let d = &sink.model().dense[i];
        let (inputs, outputs) = (d.inputs, d.outputs);
        for (dv, av) in delta.iter_mut().zip(a_out) {
            *dv *= d.activation.derivative(*av);
        }
        let prev = (i > 0 || has_conv).then(|| {
            let mut prev = vec![0.0; b * inputs];
            let w = View {
                data: &d.weights,
                rows: outputs,
                cols: inputs,
                rs: 1,
                cs: outputs,
            };
            gemm(1.0, View::row_major(&delta, b, outputs), w, 0.0, &mut prev);
            prev
        });
        sink.dense(
            i,
            View::row_major(a_in, b, inputs),
            View::row_major(&delta, b, outputs),
        );
        if let Some(p) = prev {
            delta = p;
        }
    }

    if let (Some(c), Some(p)) = (&sink.model().conv, &cache.patches) {
        let width = c.output_width(sink.model().samples);
        let cols = b * width;
        let lw = c.filters * width;
        let (filters, mt) = (c.filters, c.sensors * c.taps);
        let mut df = vec![0.0; filters * cols];
        for bi in 0..b {
            for l in 0..filters {
                df[l * cols + bi * width..l * cols + (bi + 1) * width]
                    .copy_from_slice(&delta[bi * lw + l * width..bi * lw + (l + 1) * width]);
            }
        }
        sink.conv(
            View::row_major(&df, filters, cols),
            View::row_major(p, mt, cols),
        );
    }
}

fn row_sums(m: View<'_>, out: &mut [f64], scale: f64) {
    for r in 0..m.rows {
        let row = &m.data[r * m.rs..r * m.rs + m.cols];
        out.iter_mut().zip(row).for_each(|(o, v)| *o += scale * v);
    }
}

struct Collect<'a> {
    model: &'a NetworkModel,
    grads: Gradients,
}

impl GradientSink for Collect<'_> {
    fn model(&self) -> &NetworkModel {
        self.model
    }

    fn dense(&mut self, i: usize, x: View<'_>, delta: View<'_>) {
        let g = &mut self.grads.dense[i];
        // ∂Wᵀ (in × out, row-major) shares W's column-major layout
        gemm(1.0, x.t(), delta, 0.0, &mut g.weights);
        for row in delta.data.chunks_exact(delta.cols) {
            g.biases.iter_mut().zip(row).for_each(|(gb, dv)| *gb += dv);
        }
    }

    fn conv(&mut self, df: View<'_>, patches: View<'_>) {
        gemm(1.0, df, patches.t(), 0.0, &mut self.grads.conv_kernels);
        for (l, gb) in self.grads.conv_biases.iter_mut().enumerate() {
            *gb = df.data[l * df.cols..(l + 1) * df.cols].iter().sum();
        }
    }
}

/// Applies `Θ ← Θ − λ·∇` block by block without materializing `∇`.
struct Descend<'a> {
    model: &'a mut NetworkModel,
    reg: &'a Regularization,
    learning_rate: f64,
}

impl GradientSink for Descend<'_> {
    fn model(&self) -> &NetworkModel {
        self.model
    }

    fn dense(&mut self, i: usize, x: View<'_>, delta: View<'_>) {
        let lr = self.learning_rate;
        let d = &mut self.model.dense[i];
        // penalty gradient is taken at the pre-step weights
        self.reg.descend(&mut d.weights, lr);
        gemm(-lr, x.t(), delta, 1.0, &mut d.weights);
        row_sums(delta, &mut d.biases, -lr);
    }

    fn conv(&mut self, df: View<'_>, patches: View<'_>) {
        let lr = self.learning_rate;
        let c = self.model.conv.as_mut().expect("conv gradient without conv layer");
        self.reg.descend(&mut c.kernels, lr);
        gemm(-lr, df, patches.t(), 1.0, &mut c.kernels);
        for (l, b) in c.biases.iter_mut().enumerate() {
            *b -= lr * df.data[l * df.cols..(l + 1) * df.cols].iter().sum::<f64>();
        }
    }
}

/// Loss and its exact gradient by reverse-mode differentiation.
pub fn loss_and_gradients(
    model: &NetworkModel,
    batch: &Batch,
    reg: &Regularization,
) -> Result<(LossBreakdown, Gradients)> {
    let cache = forward_cache(model, batch)?;
    let (data, delta) = output_error(model, &cache, batch);
    let mut sink = Collect {
        model,
        grads: Gradients::zeros_like(model),
    };
    backward(&mut sink, &cache, delta, batch.size);
    let mut grads = sink.grads;
    if reg.is_active() {
        if let Some(c) = &model.conv {
            reg.add_gradient(&c.kernels, &mut grads.conv_kernels);
        }
        for (d, g) in model.dense.iter().zip(&mut grads.dense) {
            reg.add_gradient(&d.weights, &mut g.weights);
        }
    }
    let reg_term = penalty(model, reg);
    Ok((
        LossBreakdown {
            total: data + reg_term,
            data,
            reg: reg_term,
        },
        grads,
    ))
}

/// One SGD step on `batch`, updating `model` in place. Returns the loss at
/// the pre-step parameters. Agrees with [`loss_and_gradients`] followed by
/// [`sgd_step`] up to rounding, without allocating a gradient copy.
pub(crate) fn descend_on_batch(
    model: &mut NetworkModel,
    batch: &Batch,
    reg: &Regularization,
    learning_rate: f64,
) -> Result<LossBreakdown> {
    let cache = forward_cache(model, batch)?;
    let (data, delta) = output_error(model, &cache, batch);
    let reg_term = penalty(model, reg);
    let mut sink = Descend {
        model,
        reg,
        learning_rate,
    };
    backward(&mut sink, &cache, delta, batch.size);
    Ok(LossBreakdown {
        total: data + reg_term,
        data,
        reg: reg_term,
    })
}

/// Loss only, without gradients.
pub fn batch_loss(
    model: &NetworkModel,
    batch: &Batch,
    reg: &Regularization,
) -> Result<LossBreakdown> {
    loss_and_gradients(model, batch, reg).map(|(l, _)| l)
}

fn apply_sgd(
    model: &mut NetworkModel,
    grads: &Gradients,
    learning_rate: f64,
) -> Result<()> {
    let gs = grads.slices();
    let mut ps = model.param_slices_mut();
    if gs.len() != ps.len() || gs.iter().zip(&ps).any(|(g, p)| g.len() != p.len()) {
        return Err(Error::invalid("gradient shapes do not match the model"));
    }
    for (p, g) in ps.iter_mut().zip(gs) {
        p.iter_mut()
            .zip(g)
            .for_each(|(p, g)| *p -= learning_rate * g);
    }
    Ok(())
}

/// `Θ ← Θ − λ·∇`, returning the updated model and leaving the input intact.
pub fn sgd_step(
    model: &NetworkModel,
    grads: &Gradients,
    learning_rate: f64,
) -> Result<NetworkModel> {
    let mut next = model.clone();
    apply_sgd(&mut next, grads, learning_rate)?;
    Ok(next)
}
