//! Pairwise squared cosine correlation losses, the cosine quantization loss,
//! and their exact output-layer residuals.
//!
//! The joint objective over a similarity set `S` of pairs `(i, j, s)` with
//! `s` in {-1, +1} is
//!
//! ```text
//! L = c_xy + lambda*(c_xx + c_yy) + gamma*(q_x + q_y)
//!
//! c_xy = sum (s - cos(u_i, v_j))^2 + (s - cos(v_i, u_j))^2
//! c_xx = sum (s - cos(u_i, u_j))^2             (c_yy analogous on v)
//! q_x  = -sum [cos(|u_i|, 1) + cos(|u_j|, 1)]  (q_y analogous on v)
//! ```
//!
//! Residuals returned by [`output_residuals`] are the exact analytic gradient
//! of this objective with respect to the final-layer pre-activations (chain
//! rule through tanh). In particular the quantization term enters with the
//! sign and weight obtained by differentiating the `-gamma * cos(|u|, 1)`
//! summands directly; it does not pick up the factor 2 that the squared
//! terms contribute. [`finite_diff_check`] arbitrates: backpropagating these
//! residuals must match central finite differences of the joint loss, and
//! [`finite_diff_check_quant_flipped`] demonstrates that the harness catches
//! a deliberately mis-signed quantization residual.

use std::collections::HashSet;

use crate::hashing::sign;
use crate::matrix::{dot, norm, Matrix};
use crate::net::{backward, forward, ForwardMode, ForwardTrace, Gradients, ModalityNet};
use crate::{Error, Result};

/// Norm floor for cosine denominators; zero vectors yield cosine 0 instead
/// of NaN.
pub const NORM_EPSILON: f64 = 1e-12;

/// Clamp applied to embeddings before inverting tanh, so `|u| = 1` cannot
/// overflow atanh.
const TANH_CLAMP: f64 = 1.0 - 1e-12;

/// Cosine similarity with epsilon-guarded norms, clamped to [-1, 1].
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!(
            "cosine inputs have lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let denom = norm(u).max(NORM_EPSILON) * norm(v).max(NORM_EPSILON);
    Ok((dot(u, v) / denom).clamp(-1.0, 1.0))
}

/// Gradient of `cos(u, v)` with respect to both arguments:
/// `d/du_k = v_k/(|u||v|) - u_k <u,v>/(|u|^3 |v|)`, symmetric in `v`.
pub fn grad_cosine(u: &[f64], v: &[f64]) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(u.len(), v.len(), "grad_cosine length mismatch");
    let nu = norm(u).max(NORM_EPSILON);
    let nv = norm(v).max(NORM_EPSILON);
    let uv = dot(u, v);
    let gu = u
        .iter()
        .zip(v)
        .map(|(&uk, &vk)| vk / (nu * nv) - uk * uv / (nu * nu * nu * nv))
        .collect();
    let gv = u
        .iter()
        .zip(v)
        .map(|(&uk, &vk)| uk / (nu * nv) - vk * uv / (nv * nv * nv * nu))
        .collect();
    (gu, gv)
}

/// Cosine of `|u|` against the all-ones vector.
pub fn quant_cosine(u: &[f64]) -> f64 {
    let b = u.len() as f64;
    let nu = norm(u).max(NORM_EPSILON);
    let abs_sum: f64 = u.iter().map(|x| x.abs()).sum();
    (abs_sum / (nu * b.sqrt())).clamp(-1.0, 1.0)
}

/// Gradient of the per-item quantization loss `-cos(|u|, 1)`:
/// component `k` is `-[sgn(u_k)/(sqrt(b)|u|) - u_k <|u|,1>/(sqrt(b)|u|^3)]`,
/// with `sgn(0) = -1`.
pub fn grad_quant(u: &[f64]) -> Vec<f64> {
    let b = u.len() as f64;
    let sqrt_b = b.sqrt();
    let nu = norm(u).max(NORM_EPSILON);
    let abs_sum: f64 = u.iter().map(|x| x.abs()).sum();
    u.iter()
        .map(|&uk| -(sign(uk) / (sqrt_b * nu) - uk * abs_sum / (sqrt_b * nu * nu * nu)))
        .collect()
}

/// One labeled pair: indices into the embedding matrices plus `s` in {-1,+1}.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimilarityPair {
    pub i: usize,
    pub j: usize,
    pub s: i8,
}

/// A set of labeled pairs. Self-pairs and duplicate `(i, j)` entries are
/// rejected at construction.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimilaritySet {
    pairs: Vec<SimilarityPair>,
}

impl SimilaritySet {
    pub fn new(pairs: Vec<(usize, usize, i8)>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(pairs.len());
        let mut out = Vec::with_capacity(pairs.len());
        for (i, j, s) in pairs {
            if s != 1 && s != -1 {
                return Err(Error::Input(format!(
                    "similarity label must be +1 or -1, got {s} for pair ({i}, {j})"
                )));
            }
            if i == j {
                return Err(Error::Input(format!("self-pair ({i}, {i}) not allowed")));
            }
            if !seen.insert((i, j)) {
                return Err(Error::Input(format!("duplicate pair ({i}, {j})")));
            }
            out.push(SimilarityPair { i, j, s });
        }
        Ok(SimilaritySet { pairs: out })
    }

    pub fn pairs(&self) -> &[SimilarityPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn positive_count(&self) -> usize {
        self.pairs.iter().filter(|p| p.s == 1).count()
    }

    fn check_bounds(&self, rows: usize) -> Result<()> {
        for p in &self.pairs {
            if p.i >= rows || p.j >= rows {
                return Err(Error::Index(format!(
                    "pair ({}, {}) out of range for {rows} items",
                    p.i, p.j
                )));
            }
        }
        Ok(())
    }
}

/// Per-term loss values and the assembled total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub c_xy: f64,
    pub c_xx: f64,
    pub c_yy: f64,
    pub q_x: f64,
    pub q_y: f64,
    pub total: f64,
    pub lambda: f64,
    pub gamma: f64,
}

/// Which objective terms are active, and with what weights. The ablation
/// variants are expressed through this: dropping the cross-modal term zeroes
/// its reported value so `total` always equals
/// `c_xy + lambda*(c_xx + c_yy) + gamma*(q_x + q_y)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub include_cross: bool,
    pub lambda: f64,
    pub gamma: f64,
}

impl LossWeights {
    pub fn full(lambda: f64, gamma: f64) -> Self {
        LossWeights {
            include_cross: true,
            lambda,
            gamma,
        }
    }
}

/// Residuals (dL/d pre-activation of the final tanh layer) for both sides.
#[derive(Debug, Clone)]
pub struct ResidualPair {
    pub image: Matrix,
    pub text: Matrix,
}

fn validate_embeddings(u: &Matrix, v: &Matrix, s: &SimilaritySet) -> Result<()> {
    if u.rows() != v.rows() || u.cols() != v.cols() {
        return Err(Error::Shape(format!(
            "embedding shapes {}x{} and {}x{} do not match",
            u.rows(),
            u.cols(),
            v.rows(),
            v.cols()
        )));
    }
    s.check_bounds(u.rows())
}

/// Joint objective over a similarity set.
pub fn joint_loss(
    u: &Matrix,
    v: &Matrix,
    s: &SimilaritySet,
    lambda: f64,
    gamma: f64,
) -> Result<LossReport> {
    joint_loss_weighted(u, v, s, LossWeights::full(lambda, gamma))
}

/// Joint objective with per-term masking (ablation variants).
pub fn joint_loss_weighted(
    u: &Matrix,
    v: &Matrix,
    s: &SimilaritySet,
    w: LossWeights,
) -> Result<LossReport> {
    validate_embeddings(u, v, s)?;

    let mut c_xy = 0.0;
    let mut c_xx = 0.0;
    let mut c_yy = 0.0;
    let mut q_x = 0.0;
    let mut q_y = 0.0;

    for p in s.pairs() {
        let sij = f64::from(p.s);
        let (ui, uj) = (u.row(p.i), u.row(p.j));
        let (vi, vj) = (v.row(p.i), v.row(p.j));

        if w.include_cross {
            let a = sij - cosine(ui, vj)?;
            let b = sij - cosine(vi, uj)?;
            c_xy += a * a + b * b;
        }
        let a = sij - cosine(ui, uj)?;
        c_xx += a * a;
        let b = sij - cosine(vi, vj)?;
        c_yy += b * b;

        q_x -= quant_cosine(ui) + quant_cosine(uj);
        q_y -= quant_cosine(vi) + quant_cosine(vj);
    }

    let total = c_xy + w.lambda * (c_xx + c_yy) + w.gamma * (q_x + q_y);
    Ok(LossReport {
        c_xy,
        c_xx,
        c_yy,
        q_x,
        q_y,
        total,
        lambda: w.lambda,
        gamma: w.gamma,
    })
}

/// Derivative of tanh at the pre-activation recovered from the embedding:
/// `1 - u^2`, with `u` clamped away from +-1 so atanh stays finite.
fn tanh_derivative_from_output(u: f64) -> f64 {
    let c = u.clamp(-TANH_CLAMP, TANH_CLAMP);
    1.0 - c * c
}

/// Exact analytic residuals of [`joint_loss`] at the final-layer
/// pre-activations of both networks.
pub fn output_residuals(
    u: &Matrix,
    v: &Matrix,
    s: &SimilaritySet,
    lambda: f64,
    gamma: f64,
) -> Result<ResidualPair> {
    output_residuals_weighted(u, v, s, LossWeights::full(lambda, gamma))
}

/// Residuals with per-term masking, matching [`joint_loss_weighted`].
pub fn output_residuals_weighted(
    u: &Matrix,
    v: &Matrix,
    s: &SimilaritySet,
    w: LossWeights,
) -> Result<ResidualPair> {
    validate_embeddings(u, v, s)?;
    let (rows, b) = (u.rows(), u.cols());

    // Gradients with respect to the embeddings themselves.
    let mut gu = Matrix::zeros(rows, b);
    let mut gv = Matrix::zeros(rows, b);

    let axpy = |target: &mut [f64], coef: f64, src: &[f64]| {
        for (t, &x) in target.iter_mut().zip(src) {
            *t += coef * x;
        }
    };

    for p in s.pairs() {
        let sij = f64::from(p.s);
        let (ui, uj) = (u.row(p.i), u.row(p.j));
        let (vi, vj) = (v.row(p.i), v.row(p.j));

        if w.include_cross {
            // (s - cos(u_i, v_j))^2
            let c = cosine(ui, vj)?;
            let (d_ui, d_vj) = grad_cosine(ui, vj);
            axpy(gu.row_mut(p.i), 2.0 * (c - sij), &d_ui);
            axpy(gv.row_mut(p.j), 2.0 * (c - sij), &d_vj);
            // (s - cos(v_i, u_j))^2
            let c = cosine(vi, uj)?;
            let (d_vi, d_uj) = grad_cosine(vi, uj);
            axpy(gv.row_mut(p.i), 2.0 * (c - sij), &d_vi);
            axpy(gu.row_mut(p.j), 2.0 * (c - sij), &d_uj);
        }

        if w.lambda != 0.0 {
            let c = cosine(ui, uj)?;
            let (d_ui, d_uj) = grad_cosine(ui, uj);
            axpy(gu.row_mut(p.i), 2.0 * w.lambda * (c - sij), &d_ui);
            axpy(gu.row_mut(p.j), 2.0 * w.lambda * (c - sij), &d_uj);

            let c = cosine(vi, vj)?;
            let (d_vi, d_vj) = grad_cosine(vi, vj);
            axpy(gv.row_mut(p.i), 2.0 * w.lambda * (c - sij), &d_vi);
            axpy(gv.row_mut(p.j), 2.0 * w.lambda * (c - sij), &d_vj);
        }

        if w.gamma != 0.0 {
            axpy(gu.row_mut(p.i), w.gamma, &grad_quant(ui));
            axpy(gu.row_mut(p.j), w.gamma, &grad_quant(uj));
            axpy(gv.row_mut(p.i), w.gamma, &grad_quant(vi));
            axpy(gv.row_mut(p.j), w.gamma, &grad_quant(vj));
        }
    }

    // Chain through tanh to reach the pre-activations.
    for i in 0..rows {
        for k in 0..b {
            let du = gu.get(i, k) * tanh_derivative_from_output(u.get(i, k));
            gu.set(i, k, du);
            let dv = gv.get(i, k) * tanh_derivative_from_output(v.get(i, k));
            gv.set(i, k, dv);
        }
    }

    Ok(ResidualPair {
        image: gu,
        text: gv,
    })
}

/// Forward-passes every row of `inputs`, returning the embedding matrix and
/// the per-row traces. In train mode, row `r` uses `dropout_seed + r`.
pub fn embed_batch(
    net: &ModalityNet,
    inputs: &Matrix,
    mode: ForwardMode,
) -> Result<(Matrix, Vec<ForwardTrace>)> {
    let mut embeddings = Matrix::zeros(inputs.rows(), net.bits());
    let mut traces = Vec::with_capacity(inputs.rows());
    for r in 0..inputs.rows() {
        let row_mode = match mode {
            ForwardMode::Eval => ForwardMode::Eval,
            ForwardMode::Train { dropout_seed } => ForwardMode::Train {
                dropout_seed: dropout_seed.wrapping_add(r as u64),
            },
        };
        let trace = forward(net, inputs.row(r), row_mode)?;
        embeddings.row_mut(r).copy_from_slice(trace.embedding());
        traces.push(trace);
    }
    Ok((embeddings, traces))
}

/// Accumulates parameter gradients for one network by backpropagating the
/// given residual rows through the recorded traces.
pub fn accumulate_gradients(
    net: &ModalityNet,
    traces: &[ForwardTrace],
    residuals: &Matrix,
) -> Result<Gradients> {
    let mut total = Gradients::zeros_like(net);
    for (r, trace) in traces.iter().enumerate() {
        let g = backward(net, trace, residuals.row(r))?;
        total.accumulate(&g);
    }
    Ok(total)
}

/// Maximum relative error between backpropagated analytic gradients and
/// central finite differences of the joint loss, over every parameter of
/// both networks. Denominator is `max(|analytic|, |numeric|, 1e-8)`.
#[allow(clippy::too_many_arguments)]
pub fn finite_diff_check(
    image_net: &ModalityNet,
    text_net: &ModalityNet,
    image_inputs: &Matrix,
    text_inputs: &Matrix,
    pairs: &SimilaritySet,
    lambda: f64,
    gamma: f64,
    step: f64,
) -> Result<f64> {
    finite_diff_check_inner(
        image_net,
        text_net,
        image_inputs,
        text_inputs,
        pairs,
        lambda,
        gamma,
        gamma,
        step,
    )
}

/// Same harness, but with the quantization sign flipped in the analytic
/// residuals. A healthy gradient checker must report a large error here;
/// used to prove the oracle is actually sensitive.
#[allow(clippy::too_many_arguments)]
pub fn finite_diff_check_quant_flipped(
    image_net: &ModalityNet,
    text_net: &ModalityNet,
    image_inputs: &Matrix,
    text_inputs: &Matrix,
    pairs: &SimilaritySet,
    lambda: f64,
    gamma: f64,
    step: f64,
) -> Result<f64> {
    finite_diff_check_inner(
        image_net,
        text_net,
        image_inputs,
        text_inputs,
        pairs,
        lambda,
        gamma,
        -gamma,
        step,
    )
}

#[allow(clippy::too_many_arguments)]
fn finite_diff_check_inner(
    image_net: &ModalityNet,
    text_net: &ModalityNet,
    image_inputs: &Matrix,
    text_inputs: &Matrix,
    pairs: &SimilaritySet,
    lambda: f64,
    gamma: f64,
    residual_gamma: f64,
    step: f64,
) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&step) {
        return Err(Error::Config(format!(
            "finite-difference step {step} outside [1e-7, 1e-3]"
        )));
    }

    let loss_of = |img: &ModalityNet, txt: &ModalityNet| -> Result<f64> {
        let (u, _) = embed_batch(img, image_inputs, ForwardMode::Eval)?;
        let (v, _) = embed_batch(txt, text_inputs, ForwardMode::Eval)?;
        Ok(joint_loss(&u, &v, pairs, lambda, gamma)?.total)
    };

    // Analytic gradients via the residual path.
    let (u, img_traces) = embed_batch(image_net, image_inputs, ForwardMode::Eval)?;
    let (v, txt_traces) = embed_batch(text_net, text_inputs, ForwardMode::Eval)?;
    let residuals = output_residuals(&u, &v, pairs, lambda, residual_gamma)?;
    let img_grads = accumulate_gradients(image_net, &img_traces, &residuals.image)?;
    let txt_grads = accumulate_gradients(text_net, &txt_traces, &residuals.text)?;

    let img_max = scan_parameters(image_net, &img_grads, step, |net| loss_of(net, text_net))?;
    let txt_max = scan_parameters(text_net, &txt_grads, step, |net| loss_of(image_net, net))?;
    Ok(img_max.max(txt_max))
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// One randomly drawn gradient-check instance: two small networks, a batch
/// of inputs for each, a similarity set over the batch, and loss weights.
#[derive(Debug, Clone)]
pub struct GradCheckCase {
    pub image_net: ModalityNet,
    pub text_net: ModalityNet,
    pub image_inputs: Matrix,
    pub text_inputs: Matrix,
    pub pairs: SimilaritySet,
    pub lambda: f64,
    pub gamma: f64,
}

impl GradCheckCase {
    pub fn check(&self, step: f64) -> Result<f64> {
        finite_diff_check(
            &self.image_net,
            &self.text_net,
            &self.image_inputs,
            &self.text_inputs,
            &self.pairs,
            self.lambda,
            self.gamma,
            step,
        )
    }

    pub fn check_quant_flipped(&self, step: f64) -> Result<f64> {
        finite_diff_check_quant_flipped(
            &self.image_net,
            &self.text_net,
            &self.image_inputs,
            &self.text_inputs,
            &self.pairs,
            self.lambda,
            self.gamma,
            step,
        )
    }
}

/// Draws a small random configuration for the gradient harness: layer sizes,
/// batch, pair labels, and (lambda, gamma) all vary with the seed.
///
/// Central differences are only meaningful where the loss is smooth and the
/// gradient is resolvable above round-off, so draws are rejected when they
/// put a ReLU pre-activation, a tanh saturation, or an embedding |u| kink
/// within reach of the probe step, or when some parameter's gradient is
/// nonzero yet too small to separate from difference noise. The mutation
/// harness ([`GradCheckCase::check_quant_flipped`]) certifies that this
/// filtering does not blunt the oracle.
pub fn gradcheck_case(seed: u64) -> GradCheckCase {
    for attempt in 0..4096 {
        let stream = seed ^ (attempt as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let case = draw_gradcheck_case(stream);
        if gradcheck_case_is_well_conditioned(&case) {
            return case;
        }
    }
    unreachable!("no well-conditioned gradient-check draw in 4096 attempts for seed {seed}");
}

fn gradcheck_case_is_well_conditioned(case: &GradCheckCase) -> bool {
    const KINK_MARGIN: f64 = 1e-3;
    const SATURATION_LIMIT: f64 = 6.0;
    // The cosine terms carry 1/||u||^3 factors; small rows make the loss
    // curvature (and so the central-difference truncation error) explode.
    const NORM_FLOOR: f64 = 0.5;
    // Exactly-zero gradients (dead ReLU paths) difference to exactly zero;
    // anything between 0 and this floor drowns in f64 round-off.
    const GRADIENT_FLOOR: f64 = 3e-4;

    let smooth_net = |net: &ModalityNet, inputs: &Matrix| -> bool {
        let Ok((embeddings, traces)) = embed_batch(net, inputs, ForwardMode::Eval) else {
            return false;
        };
        for trace in &traces {
            for l in 0..net.layer_count() - 1 {
                if trace
                    .pre_activations(l)
                    .iter()
                    .any(|z| z.abs() < KINK_MARGIN)
                {
                    return false;
                }
            }
            let last = net.layer_count() - 1;
            if trace
                .pre_activations(last)
                .iter()
                .any(|z| z.abs() > SATURATION_LIMIT)
            {
                return false;
            }
        }
        if !embeddings.as_slice().iter().all(|u| u.abs() > KINK_MARGIN) {
            return false;
        }
        (0..embeddings.rows()).all(|r| norm(embeddings.row(r)) >= NORM_FLOOR)
    };
    if !smooth_net(&case.image_net, &case.image_inputs)
        || !smooth_net(&case.text_net, &case.text_inputs)
    {
        return false;
    }

    let Ok((u, img_traces)) = embed_batch(&case.image_net, &case.image_inputs, ForwardMode::Eval)
    else {
        return false;
    };
    let Ok((v, txt_traces)) = embed_batch(&case.text_net, &case.text_inputs, ForwardMode::Eval)
    else {
        return false;
    };
    let Ok(residuals) = output_residuals(&u, &v, &case.pairs, case.lambda, case.gamma) else {
        return false;
    };
    let resolvable = |grads: &Gradients| {
        let entry_ok = |g: f64| g == 0.0 || g.abs() >= GRADIENT_FLOOR;
        grads
            .d_weights
            .iter()
            .all(|m| m.as_slice().iter().all(|&g| entry_ok(g)))
            && grads
                .d_biases
                .iter()
                .all(|b| b.iter().all(|&g| entry_ok(g)))
    };
    let Ok(img_grads) = accumulate_gradients(&case.image_net, &img_traces, &residuals.image) else {
        return false;
    };
    let Ok(txt_grads) = accumulate_gradients(&case.text_net, &txt_traces, &residuals.text) else {
        return false;
    };
    resolvable(&img_grads) && resolvable(&txt_grads)
}

fn draw_gradcheck_case(seed: u64) -> GradCheckCase {
    use crate::net::{init_network, Activation, LayerSpec};
    use rand::{Rng, SeedableRng};

    fn draw_net(rng: &mut rand_chacha::ChaCha8Rng, input_dim: usize, bits: usize) -> ModalityNet {
        let depth = rng.random_range(1..=2);
        let mut specs = Vec::with_capacity(depth + 1);
        let mut prev = input_dim;
        for _ in 0..depth {
            let hidden = rng.random_range(3..=6);
            specs.push(LayerSpec::new(prev, hidden, Activation::Relu));
            prev = hidden;
        }
        specs.push(LayerSpec::new(prev, bits, Activation::Tanh));
        let mut net = init_network(&specs, rng.random()).unwrap();
        // Fan-scaled init keeps pre-activations small; pushed through tanh
        // that leaves embeddings near zero, exactly where the cosine
        // curvature hurts finite differences. Boost the output layer so
        // embeddings land in a healthy band instead of rejecting most draws.
        let boost = rng.random_range(2.0..=4.0);
        let last = net.layer_count() - 1;
        for w in net.weights_mut(last).as_mut_slice() {
            *w *= boost;
        }
        net
    }
    fn draw_inputs(rng: &mut rand_chacha::ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| rng.random_range(-1.0..=1.0))
                .collect(),
        )
        .unwrap()
    }

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let bits = rng.random_range(2..=4);
    let rows = rng.random_range(4..=8);
    let d_img = rng.random_range(3..=6);
    let d_txt = rng.random_range(3..=6);
    let image_net = draw_net(&mut rng, d_img, bits);
    let text_net = draw_net(&mut rng, d_txt, bits);
    let image_inputs = draw_inputs(&mut rng, rows, d_img);
    let text_inputs = draw_inputs(&mut rng, rows, d_txt);

    let mut pairs = Vec::new();
    for i in 0..rows {
        for j in (i + 1)..rows {
            if rng.random::<f64>() < 0.6 {
                pairs.push((i, j, if rng.random::<bool>() { 1 } else { -1 }));
            }
        }
    }
    if pairs.is_empty() {
        pairs.push((0, 1, 1));
    }

    GradCheckCase {
        image_net,
        text_net,
        image_inputs,
        text_inputs,
        pairs: SimilaritySet::new(pairs).unwrap(),
        lambda: rng.random_range(0.0..=2.0),
        gamma: rng.random_range(0.0..=1.0),
    }
}

/// Perturbs every parameter of `base` by +-step, re-evaluating `eval`, and
/// returns the worst relative error against the analytic gradients.
fn scan_parameters(
    base: &ModalityNet,
    grads: &Gradients,
    step: f64,
    eval: impl Fn(&ModalityNet) -> Result<f64>,
) -> Result<f64> {
    let mut net = base.clone();
    let mut max_rel = 0.0_f64;
    for l in 0..net.layer_count() {
        for idx in 0..net.weights(l).as_slice().len() {
            let analytic = grads.d_weights[l].as_slice()[idx];
            let original = net.weights(l).as_slice()[idx];
            net.weights_mut(l).as_mut_slice()[idx] = original + step;
            let plus = eval(&net)?;
            net.weights_mut(l).as_mut_slice()[idx] = original - step;
            let minus = eval(&net)?;
            net.weights_mut(l).as_mut_slice()[idx] = original;
            max_rel = max_rel.max(relative_error(analytic, (plus - minus) / (2.0 * step)));
        }
        for idx in 0..net.biases(l).len() {
            let analytic = grads.d_biases[l][idx];
            let original = net.biases(l)[idx];
            net.biases_mut(l)[idx] = original + step;
            let plus = eval(&net)?;
            net.biases_mut(l)[idx] = original - step;
            let minus = eval(&net)?;
            net.biases_mut(l)[idx] = original;
            max_rel = max_rel.max(relative_error(analytic, (plus - minus) / (2.0 * step)));
        }
    }
    Ok(max_rel)
}
