use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation output `a = f(z)`.
    #[inline]
    pub fn derivative(self, a: f64) -> f64 {
        match self {
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::Sigmoid => 0,
            Activation::Relu => 1,
            Activation::Identity => 2,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Activation::Sigmoid),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// Fully connected layer `y = f(W·x + b)`.
///
/// `W` is `outputs × inputs`, held column-major internally so a single input
/// vector is applied as a sequence of contiguous axpy updates.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub(crate) inputs: usize,
    pub(crate) outputs: usize,
    pub(crate) weights: Vec<f64>,
    pub(crate) biases: Vec<f64>,
    pub(crate) activation: Activation,
}

impl DenseLayer {
    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
            activation,
        }
    }

    /// `weights` given row-major (`outputs × inputs`).
    pub fn from_row_major(
        inputs: usize,
        outputs: usize,
        weights: &[f64],
        biases: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        if weights.len() != inputs * outputs || biases.len() != outputs {
            return Err(Error::invalid(
                "dense layer parameter sizes do not match its shape",
            ));
        }
        let mut layer = Self::zeros(inputs, outputs, activation);
        for o in 0..outputs {
            for i in 0..inputs {
                layer.weights[i * outputs + o] = weights[o * inputs + i];
            }
        }
        layer.biases = biases;
        Ok(layer)
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weight(&self, output: usize, input: usize) -> f64 {
        self.weights[input * self.outputs + output]
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    pub fn weights_row_major(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.weights.len()];
        for i in 0..self.inputs {
            for o in 0..self.outputs {
                out[o * self.inputs + i] = self.weights[i * self.outputs + o];
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.inputs * self.outputs + self.outputs
    }

    pub(crate) fn forward_one(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.inputs);
        let mut y = self.biases.clone();
        matvec_acc(&self.weights, self.outputs, x, &mut y);
        y.iter_mut().for_each(|v| *v = self.activation.apply(*v));
        y
    }
}

/// `y += W·x` for column-major `W` with `y.len()` rows. Four columns are
/// folded per pass over `y`; summation order is fixed, so the result does not
/// depend on which instruction set runs it.
fn matvec_acc(w: &[f64], rows: usize, x: &[f64], y: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: the required feature was detected at runtime.
            return unsafe { matvec_acc_avx2(w, rows, x, y) };
        }
    }
    matvec_acc_generic(w, rows, x, y)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn matvec_acc_avx2(w: &[f64], rows: usize, x: &[f64], y: &mut [f64]) {
    matvec_acc_generic(w, rows, x, y)
}

#[inline(always)]
fn matvec_acc_generic(w: &[f64], rows: usize, x: &[f64], y: &mut [f64]) {
    let y = &mut y[..rows];
    let mut quads = w.chunks_exact(4 * rows);
    let mut xs = x.chunks_exact(4);
    for (block, xq) in (&mut quads).zip(&mut xs) {
        let (c0, rest) = block.split_at(rows);
        let (c1, rest) = rest.split_at(rows);
        let (c2, c3) = rest.split_at(rows);
        for o in 0..rows {
            y[o] = y[o] + xq[0] * c0[o] + xq[1] * c1[o] + xq[2] * c2[o] + xq[3] * c3[o];
        }
    }
    for (col, &xi) in quads.remainder().chunks_exact(rows).zip(xs.remainder()) {
        for (yv, c) in y.iter_mut().zip(col) {
            *yv += xi * c;
        }
    }
}

/// Bank of `filters` space-time kernels, each spanning every sensor over
/// `taps` consecutive samples. Applied as a valid cross-correlation in time:
/// `C_l(t) = Σ_m Σ_τ K_l(m, τ)·Y(m, t + τ) + b_l`, with no activation.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeConvLayer {
    pub(crate) sensors: usize,
    pub(crate) taps: usize,
    pub(crate) filters: usize,
    /// `[filter][sensor][tap]`, row-major.
    pub(crate) kernels: Vec<f64>,
    pub(crate) biases: Vec<f64>,
}

impl SpaceTimeConvLayer {
    pub fn zeros(sensors: usize, taps: usize, filters: usize) -> Self {
        Self {
            sensors,
            taps,
            filters,
            kernels: vec![0.0; filters * sensors * taps],
            biases: vec![0.0; filters],
        }
    }

    pub fn from_parts(
        sensors: usize,
        taps: usize,
        filters: usize,
        kernels: Vec<f64>,
        biases: Vec<f64>,
    ) -> Result<Self> {
        if sensors == 0 || taps == 0 || filters == 0 {
            return Err(Error::invalid(
                "conv layer needs sensors, taps and filters >= 1",
            ));
        }
        if kernels.len() != filters * sensors * taps || biases.len() != filters {
            return Err(Error::invalid(
                "conv layer parameter sizes do not match its shape",
            ));
        }
        Ok(Self {
            sensors,
            taps,
            filters,
            kernels,
            biases,
        })
    }

    pub fn sensors(&self) -> usize {
        self.sensors
    }

    pub fn taps(&self) -> usize {
        self.taps
    }

    pub fn filters(&self) -> usize {
        self.filters
    }

    pub fn kernel(&self, filter: usize, sensor: usize, tap: usize) -> f64 {
        self.kernels[(filter * self.sensors + sensor) * self.taps + tap]
    }

    pub fn kernels(&self) -> &[f64] {
        &self.kernels
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    pub fn output_width(&self, samples: usize) -> usize {
        samples + 1 - self.taps
    }

    pub fn parameter_count(&self) -> usize {
        self.kernels.len() + self.biases.len()
    }

    /// Unrolls a batch of row-major `sensors × samples` inputs into the
    /// `(sensors·taps) × (batch·width)` patch matrix.
    pub(crate) fn im2col(&self, x: &[f64], batch: usize, samples: usize) -> Vec<f64> {
        let (m, t_len) = (self.sensors, self.taps);
        let width = self.output_width(samples);
        let cols = batch * width;
        let in_dim = m * samples;
        let mut p = vec![0.0; m * t_len * cols];
        for b in 0..batch {
            let xb = &x[b * in_dim..(b + 1) * in_dim];
            for s in 0..m {
                let row_in = &xb[s * samples..(s + 1) * samples];
                for tau in 0..t_len {
                    let r = s * t_len + tau;
                    let dst = &mut p[r * cols + b * width..r * cols + (b + 1) * width];
                    dst.copy_from_slice(&row_in[tau..tau + width]);
                }
            }
        }
        p
    }
}
