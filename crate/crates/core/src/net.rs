//! Minimal dense-network engine: forward, backward from an injected output
//! residual, and SGD-with-momentum updates.
//!
//! Both modality networks are plain stacks of dense layers. The final layer
//! of a stack is always `tanh` with as many units as the code has bits, so
//! its activations can be binarized by sign. Losses live elsewhere: backward
//! takes the residual at the output pre-activations and only propagates it,
//! which keeps the pairwise bookkeeping out of the layer engine.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::matrix::Matrix;
use crate::{Error, Result};

/// Element-wise layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative evaluated at the pre-activation. ReLU uses the subgradient
    /// 0 at exactly 0 to keep backward deterministic.
    #[inline]
    pub fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::Relu => write!(f, "relu"),
            Activation::Tanh => write!(f, "tanh"),
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Config(format!("unknown activation '{other}'"))),
        }
    }
}

/// Shape and behavior of one dense layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub activation: Activation,
    pub dropout_rate: f64,
}

impl LayerSpec {
    pub fn new(input_dim: usize, output_dim: usize, activation: Activation) -> Self {
        LayerSpec {
            input_dim,
            output_dim,
            activation,
            dropout_rate: 0.0,
        }
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.dropout_rate = rate;
        self
    }

    fn validate(&self, index: usize) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config(format!(
                "layer {index}: dimensions must be positive, got {}x{}",
                self.input_dim, self.output_dim
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "layer {index}: dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// Validates that a stack of specs chains dimensionally and ends in a
/// dropout-free tanh layer (its activations must stay inside (-1, 1) so they
/// can be binarized and inverted through atanh).
fn validate_specs(specs: &[LayerSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::Config("network needs at least one layer".into()));
    }
    for (i, spec) in specs.iter().enumerate() {
        spec.validate(i)?;
        if i > 0 && specs[i - 1].output_dim != spec.input_dim {
            return Err(Error::Config(format!(
                "layer {} input dim {} does not chain with previous output dim {}",
                i,
                spec.input_dim,
                specs[i - 1].output_dim
            )));
        }
    }
    let last = specs.last().unwrap();
    if last.activation != Activation::Tanh {
        return Err(Error::Config(
            "final layer must use tanh so outputs are binarizable".into(),
        ));
    }
    if last.dropout_rate != 0.0 {
        return Err(Error::Config(
            "final layer must not use dropout; embeddings must stay in (-1, 1)".into(),
        ));
    }
    Ok(())
}

/// One modality's network: per-layer weights `(out, in)` and biases.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityNet {
    layers: Vec<LayerSpec>,
    weights: Vec<Matrix>,
    biases: Vec<Vec<f64>>,
}

/// Seeded fan-scaled uniform initialization: weights i.i.d. on `[-s, s]`
/// with `s = sqrt(6 / (in + out))`, biases zero. Identical seeds produce
/// bit-identical networks.
pub fn init_network(specs: &[LayerSpec], seed: u64) -> Result<ModalityNet> {
    validate_specs(specs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Vec::with_capacity(specs.len());
    let mut biases = Vec::with_capacity(specs.len());
    for spec in specs {
        let s = (6.0 / (spec.input_dim + spec.output_dim) as f64).sqrt();
        let mut w = Matrix::zeros(spec.output_dim, spec.input_dim);
        for v in w.as_mut_slice() {
            *v = rng.random_range(-s..=s);
        }
        weights.push(w);
        biases.push(vec![0.0; spec.output_dim]);
    }
    Ok(ModalityNet {
        layers: specs.to_vec(),
        weights,
        biases,
    })
}

impl ModalityNet {
    /// Builds a network from explicit parameters (mainly for tests and I/O).
    pub fn from_parameters(
        specs: Vec<LayerSpec>,
        weights: Vec<Matrix>,
        biases: Vec<Vec<f64>>,
    ) -> Result<Self> {
        validate_specs(&specs)?;
        if weights.len() != specs.len() || biases.len() != specs.len() {
            return Err(Error::Shape(
                "parameter count does not match layer count".into(),
            ));
        }
        for (i, spec) in specs.iter().enumerate() {
            if weights[i].rows() != spec.output_dim || weights[i].cols() != spec.input_dim {
                return Err(Error::Shape(format!(
                    "layer {i}: weight shape {}x{} does not match spec {}x{}",
                    weights[i].rows(),
                    weights[i].cols(),
                    spec.output_dim,
                    spec.input_dim
                )));
            }
            if biases[i].len() != spec.output_dim {
                return Err(Error::Shape(format!("layer {i}: bias length mismatch")));
            }
            if !weights[i].is_finite() || !biases[i].iter().all(|v| v.is_finite()) {
                return Err(Error::Input(format!("layer {i}: non-finite parameters")));
            }
        }
        Ok(ModalityNet {
            layers: specs,
            weights,
            biases,
        })
    }

    pub fn layer_specs(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim
    }

    /// Output width of the final (tanh) layer, i.e. the code length in bits.
    pub fn bits(&self) -> usize {
        self.layers.last().unwrap().output_dim
    }

    pub fn weights(&self, layer: usize) -> &Matrix {
        &self.weights[layer]
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut Matrix {
        &mut self.weights[layer]
    }

    pub fn biases(&self, layer: usize) -> &[f64] {
        &self.biases[layer]
    }

    pub fn biases_mut(&mut self, layer: usize) -> &mut [f64] {
        &mut self.biases[layer]
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.output_dim * (l.input_dim + 1))
            .sum()
    }
}

/// Forward execution mode. Training draws dropout masks from the given seed;
/// evaluation is mask-free and a pure function of `(net, input)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Eval,
    Train { dropout_seed: u64 },
}

/// Everything backward needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    input: Vec<f64>,
    /// Pre-activations per layer.
    pre: Vec<Vec<f64>>,
    /// Propagated values per layer: activation output, after dropout when a
    /// mask was drawn.
    post: Vec<Vec<f64>>,
    /// Keep-masks per layer; `None` in eval mode or when dropout_rate is 0.
    masks: Vec<Option<Vec<bool>>>,
}

impl ForwardTrace {
    /// Final-layer activations: the continuous embedding in (-1, 1)^b.
    pub fn embedding(&self) -> &[f64] {
        self.post.last().unwrap()
    }

    pub fn pre_activations(&self, layer: usize) -> &[f64] {
        &self.pre[layer]
    }

    pub fn post_activations(&self, layer: usize) -> &[f64] {
        &self.post[layer]
    }

    pub fn mask(&self, layer: usize) -> Option<&[bool]> {
        self.masks[layer].as_deref()
    }
}

/// Runs the stack on one input vector, recording the full trace.
pub fn forward(net: &ModalityNet, input: &[f64], mode: ForwardMode) -> Result<ForwardTrace> {
    if input.len() != net.input_dim() {
        return Err(Error::Shape(format!(
            "input length {} does not match first layer input dim {}",
            input.len(),
            net.input_dim()
        )));
    }
    if !input.iter().all(|v| v.is_finite()) {
        return Err(Error::Input("non-finite input vector".into()));
    }

    let mut dropout_rng = match mode {
        ForwardMode::Train { dropout_seed } => Some(ChaCha8Rng::seed_from_u64(dropout_seed)),
        ForwardMode::Eval => None,
    };

    let mut pre = Vec::with_capacity(net.layer_count());
    let mut post = Vec::with_capacity(net.layer_count());
    let mut masks = Vec::with_capacity(net.layer_count());
    let mut current = input.to_vec();

    for (l, spec) in net.layers.iter().enumerate() {
        let mut z = vec![0.0; spec.output_dim];
        net.weights[l].mat_vec(&current, &mut z);
        for (zk, bk) in z.iter_mut().zip(&net.biases[l]) {
            *zk += bk;
        }
        let mut activated: Vec<f64> = z.iter().map(|&v| spec.activation.apply(v)).collect();

        let mask = match (&mut dropout_rng, spec.dropout_rate > 0.0) {
            (Some(rng), true) => {
                let p = spec.dropout_rate;
                let keep_scale = 1.0 / (1.0 - p);
                let mask: Vec<bool> = (0..spec.output_dim)
                    .map(|_| rng.random::<f64>() >= p)
                    .collect();
                for (a, &keep) in activated.iter_mut().zip(&mask) {
                    *a = if keep { *a * keep_scale } else { 0.0 };
                }
                Some(mask)
            }
            _ => None,
        };

        pre.push(z);
        current = activated.clone();
        post.push(activated);
        masks.push(mask);
    }

    Ok(ForwardTrace {
        input: input.to_vec(),
        pre,
        post,
        masks,
    })
}

/// Per-layer parameter gradients, shaped like the network.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub d_weights: Vec<Matrix>,
    pub d_biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &ModalityNet) -> Self {
        Gradients {
            d_weights: net
                .layers
                .iter()
                .map(|l| Matrix::zeros(l.output_dim, l.input_dim))
                .collect(),
            d_biases: net.layers.iter().map(|l| vec![0.0; l.output_dim]).collect(),
        }
    }

    /// Accumulates another gradient set (used to sum over a mini-batch).
    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.d_weights.iter_mut().zip(&other.d_weights) {
            for (x, y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
                *x += y;
            }
        }
        for (a, b) in self.d_biases.iter_mut().zip(&other.d_biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    /// Scales every gradient entry (e.g. to per-pair means before a step).
    pub fn scale(&mut self, factor: f64) {
        for m in &mut self.d_weights {
            for x in m.as_mut_slice() {
                *x *= factor;
            }
        }
        for b in &mut self.d_biases {
            for x in b.iter_mut() {
                *x *= factor;
            }
        }
    }
}

/// Backpropagates an output-layer residual (dL/d pre-activation of the final
/// layer) through the trace. Hidden residuals only ever see `(delta, W, pre)`
/// plus the recorded dropout masks; no pairwise data enters here.
pub fn backward(
    net: &ModalityNet,
    trace: &ForwardTrace,
    output_residual: &[f64],
) -> Result<Gradients> {
    let last = net.layer_count() - 1;
    if output_residual.len() != net.layers[last].output_dim {
        return Err(Error::Shape(format!(
            "residual length {} does not match output dim {}",
            output_residual.len(),
            net.layers[last].output_dim
        )));
    }

    let mut grads = Gradients::zeros_like(net);
    let mut delta = output_residual.to_vec();

    for l in (0..=last).rev() {
        let layer_input: &[f64] = if l == 0 {
            &trace.input
        } else {
            &trace.post[l - 1]
        };

        // dW = delta (outer) input, db = delta
        let dw = &mut grads.d_weights[l];
        for (k, &d) in delta.iter().enumerate() {
            let row = dw.row_mut(k);
            for (slot, &x) in row.iter_mut().zip(layer_input) {
                *slot = d * x;
            }
        }
        grads.d_biases[l].copy_from_slice(&delta);

        if l == 0 {
            break;
        }

        // delta_{l-1} = (W_l^T delta_l) * mask-scale * a'(pre_{l-1})
        let prev_spec = &net.layers[l - 1];
        let w = &net.weights[l];
        let mut next = vec![0.0; prev_spec.output_dim];
        for (kp, &d) in delta.iter().enumerate() {
            let row = w.row(kp);
            for (nk, &wv) in next.iter_mut().zip(row) {
                *nk += d * wv;
            }
        }
        if let Some(mask) = &trace.masks[l - 1] {
            let keep_scale = 1.0 / (1.0 - prev_spec.dropout_rate);
            for (v, &keep) in next.iter_mut().zip(mask) {
                *v = if keep { *v * keep_scale } else { 0.0 };
            }
        }
        for (v, &z) in next.iter_mut().zip(&trace.pre[l - 1]) {
            *v *= prev_spec.activation.derivative(z);
        }
        delta = next;
    }

    Ok(grads)
}

/// Per-parameter velocity buffers for SGD with momentum.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    velocity_w: Vec<Matrix>,
    velocity_b: Vec<Vec<f64>>,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Learning-rate multiplier for the final (hashing) layer.
    pub output_lr_multiplier: f64,
}

impl OptimizerState {
    pub fn new(net: &ModalityNet, learning_rate: f64, momentum: f64) -> Result<Self> {
        if learning_rate <= 0.0 || !learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        Ok(OptimizerState {
            velocity_w: net
                .layers
                .iter()
                .map(|l| Matrix::zeros(l.output_dim, l.input_dim))
                .collect(),
            velocity_b: net.layers.iter().map(|l| vec![0.0; l.output_dim]).collect(),
            learning_rate,
            momentum,
            output_lr_multiplier: 1.0,
        })
    }

    pub fn with_output_lr_multiplier(mut self, multiplier: f64) -> Self {
        self.output_lr_multiplier = multiplier;
        self
    }
}

/// One momentum update: `v <- momentum*v - lr*g; theta <- theta + v`.
pub fn sgd_step(
    net: &mut ModalityNet,
    grads: &Gradients,
    state: &mut OptimizerState,
) -> Result<()> {
    let last = net.layer_count() - 1;
    for l in 0..net.layer_count() {
        let finite =
            grads.d_weights[l].is_finite() && grads.d_biases[l].iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Divergence(format!(
                "non-finite gradient in layer {l}"
            )));
        }
    }
    for l in 0..net.layer_count() {
        let lr = if l == last {
            state.learning_rate * state.output_lr_multiplier
        } else {
            state.learning_rate
        };
        let m = state.momentum;
        for ((w, v), g) in net.weights[l]
            .as_mut_slice()
            .iter_mut()
            .zip(state.velocity_w[l].as_mut_slice())
            .zip(grads.d_weights[l].as_slice())
        {
            *v = m * *v - lr * g;
            *w += *v;
        }
        for ((b, v), g) in net.biases[l]
            .iter_mut()
            .zip(state.velocity_b[l].iter_mut())
            .zip(&grads.d_biases[l])
        {
            *v = m * *v - lr * g;
            *b += *v;
        }
    }
    Ok(())
}

// --- model file I/O -------------------------------------------------------
//
// Text format, value-exact round trip:
//   CHNM v1
//   layers=<k>
//   layer <i> <in> <out> <activation> <dropout>
//   W
//   <out rows of in whitespace-separated decimals>
//   b
//   <one row>

const MODEL_MAGIC: &str = "CHNM v1";

impl ModalityNet {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path)?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)
    }

    pub fn write_to(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "{MODEL_MAGIC}")?;
        writeln!(out, "layers={}", self.layers.len())?;
        for (i, spec) in self.layers.iter().enumerate() {
            writeln!(
                out,
                "layer {} {} {} {} {}",
                i + 1,
                spec.input_dim,
                spec.output_dim,
                spec.activation,
                spec.dropout_rate
            )?;
            writeln!(out, "W")?;
            for r in 0..spec.output_dim {
                let row = self.weights[i].row(r);
                write_decimal_row(out, row)?;
            }
            writeln!(out, "b")?;
            write_decimal_row(out, &self.biases[i])?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = crate::error::open_file(path)?;
        Self::read_from(BufReader::new(file))
    }

    pub fn read_from(reader: impl BufRead) -> Result<Self> {
        let mut lines = NumberedLines::new(reader);

        let (n, magic) = lines.next_line()?;
        if magic != MODEL_MAGIC {
            return Err(Error::parse(n, format!("expected '{MODEL_MAGIC}'")));
        }
        let (n, header) = lines.next_line()?;
        let count: usize = header
            .strip_prefix("layers=")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::parse(n, "expected 'layers=<k>'"))?;
        if count == 0 {
            return Err(Error::parse(n, "layer count must be positive"));
        }

        let mut specs = Vec::with_capacity(count);
        let mut weights = Vec::with_capacity(count);
        let mut biases = Vec::with_capacity(count);

        for expected in 1..=count {
            let (n, line) = lines.next_line()?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 6 || fields[0] != "layer" {
                return Err(Error::parse(
                    n,
                    "expected 'layer <i> <in> <out> <activation> <dropout>'",
                ));
            }
            let index: usize = fields[1]
                .parse()
                .map_err(|_| Error::parse(n, "bad layer index"))?;
            if index != expected {
                return Err(Error::parse(
                    n,
                    format!("layer index {index} out of order, expected {expected}"),
                ));
            }
            let input_dim: usize = fields[2]
                .parse()
                .map_err(|_| Error::parse(n, "bad input dim"))?;
            let output_dim: usize = fields[3]
                .parse()
                .map_err(|_| Error::parse(n, "bad output dim"))?;
            let activation: Activation = fields[4].parse().map_err(|e| match e {
                Error::Config(msg) => Error::parse(n, msg),
                other => other,
            })?;
            let dropout_rate: f64 = fields[5]
                .parse()
                .map_err(|_| Error::parse(n, "bad dropout rate"))?;

            let (n, w_marker) = lines.next_line()?;
            if w_marker != "W" {
                return Err(Error::parse(n, "expected 'W'"));
            }
            let mut w = Matrix::zeros(output_dim, input_dim);
            for r in 0..output_dim {
                let (n, row_line) = lines.next_line()?;
                let row = parse_decimal_row(n, &row_line, input_dim)?;
                w.row_mut(r).copy_from_slice(&row);
            }

            let (n, b_marker) = lines.next_line()?;
            if b_marker != "b" {
                return Err(Error::parse(n, "expected 'b'"));
            }
            let (n, bias_line) = lines.next_line()?;
            let bias = parse_decimal_row(n, &bias_line, output_dim)?;

            specs.push(LayerSpec {
                input_dim,
                output_dim,
                activation,
                dropout_rate,
            });
            weights.push(w);
            biases.push(bias);
        }

        ModalityNet::from_parameters(specs, weights, biases)
    }
}

struct NumberedLines<R> {
    reader: R,
    line: usize,
}

impl<R: BufRead> NumberedLines<R> {
    fn new(reader: R) -> Self {
        NumberedLines { reader, line: 0 }
    }

    fn next_line(&mut self) -> Result<(usize, String)> {
        let mut buf = String::new();
        let read = self.reader.read_line(&mut buf)?;
        self.line += 1;
        if read == 0 {
            return Err(Error::parse(self.line, "unexpected end of file"));
        }
        while buf.ends_with('\n') || buf.ends_with('\r') {
            buf.pop();
        }
        Ok((self.line, buf))
    }
}

fn write_decimal_row(out: &mut impl Write, row: &[f64]) -> Result<()> {
    let mut first = true;
    for v in row {
        if first {
            write!(out, "{v}")?;
            first = false;
        } else {
            write!(out, " {v}")?;
        }
    }
    writeln!(out)?;
    Ok(())
}

fn parse_decimal_row(line_no: usize, line: &str, expected: usize) -> Result<Vec<f64>> {
    let mut values = Vec::with_capacity(expected);
    for token in line.split_whitespace() {
        let v: f64 = token
            .parse()
            .map_err(|_| Error::parse(line_no, format!("non-numeric token '{token}'")))?;
        if !v.is_finite() {
            return Err(Error::parse(line_no, format!("non-finite value '{token}'")));
        }
        values.push(v);
    }
    if values.len() != expected {
        return Err(Error::parse(
            line_no,
            format!("expected {expected} values, found {}", values.len()),
        ));
    }
    Ok(values)
}
