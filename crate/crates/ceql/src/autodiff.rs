//! Reverse-mode differentiation of the scalar training loss with respect to
//! the real and imaginary parts of every edge weight.
//!
//! Each complex weight is treated as two independent real parameters.
//! Real-projected operators have `∂out/∂Re(in)` given by the real derivative
//! and `∂out/∂Im(in) = 0`; division differentiates `Re(Re(x)/y)` through the
//! exact complex quotient rule in `(Re y, Im y)`; log and sqrt use the
//! holomorphic derivatives `1/z` and `1/(2√z)` decomposed into their 2×2
//! real Jacobians. Samples flagged during the forward pass are excluded from
//! both the loss value and the gradient.

use crate::complex::{Complex, OperatorKind};
use crate::graph::{EdgeSource, Network, Trace};
use crate::train::{DataTerm, LossSpec, TrainError};

/// Per-edge pairs (∂Loss/∂Re(w), ∂Loss/∂Im(w)), indexed by global edge id.
/// Inactive edges carry exactly (0, 0).
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    pub d: Vec<(f64, f64)>,
}

impl GradientVector {
    pub fn zeros(n: usize) -> Self {
        Self { d: vec![(0.0, 0.0); n] }
    }

    pub fn len(&self) -> usize {
        self.d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d.is_empty()
    }

    pub fn max_abs(&self) -> f64 {
        self.d
            .iter()
            .map(|(r, i)| r.abs().max(i.abs()))
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.d.iter().all(|(r, i)| r.is_finite() && i.is_finite())
    }
}

/// Decomposed value of the composite loss over one batch.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossParts {
    pub total: f64,
    /// Configured data term (MSE or relative MSE).
    pub data_term: f64,
    /// Plain mean squared error over unflagged samples, for reporting.
    pub mse: f64,
    /// Σ|w| over active edges.
    pub l1_mass: f64,
    /// Σ Im(w)² over active edges.
    pub im_mass: f64,
    /// Mean of Im(z)² over (log/sqrt node, unflagged sample) pairs.
    pub arg_penalty: f64,
    pub flagged: usize,
    pub valid: usize,
}

/// A borrowed view of a batch: row-major inputs and targets.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub x: &'a [f64],
    pub y: &'a [f64],
    pub dim: usize,
}

impl<'a> Batch<'a> {
    pub fn new(x: &'a [f64], y: &'a [f64], dim: usize) -> Self {
        debug_assert_eq!(x.len(), y.len() * dim);
        Self { x, y, dim }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn row(&self, i: usize) -> &'a [f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }
}

/// Adjoint pullback through multiplication by `d` (complex product or any
/// holomorphic factor with derivative `d`): transpose of the real 2×2
/// Jacobian applied to the adjoint.
#[inline]
fn chain(adj: Complex, d: Complex) -> Complex {
    Complex::new(
        adj.re * d.re + adj.im * d.im,
        adj.im * d.re - adj.re * d.im,
    )
}

/// Reusable buffers for repeated loss/gradient evaluations.
#[derive(Debug, Default)]
pub struct GradWorkspace {
    pub(crate) traces: Vec<Trace>,
    pub(crate) preds: Vec<f64>,
    pub(crate) valid: Vec<bool>,
}

/// Composite loss and (optionally) its gradient over the batch.
///
/// The gradient is accumulated per sample in index order so repeated calls
/// are bitwise reproducible.
pub fn loss_and_grad(
    net: &Network,
    batch: Batch<'_>,
    spec: &LossSpec,
    ws: &mut GradWorkspace,
    want_grad: bool,
) -> Result<(LossParts, Option<GradientVector>), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let n = batch.len();
    if ws.traces.len() != n || ws.traces.first().map(|t| t.summations.len()) != Some(net.layers.len())
    {
        ws.traces = (0..n).map(|_| Trace::for_network(net)).collect();
        ws.preds = vec![0.0; n];
        ws.valid = vec![false; n];
    } else {
        for t in &mut ws.traces {
            if t.summations
                .iter()
                .zip(&net.layers)
                .any(|(z, l)| z.len() != l.spec.summation_count())
            {
                *t = Trace::for_network(net);
            }
        }
    }

    let mut n_valid = 0usize;
    for i in 0..n {
        let (pred, flag) = net.forward_into(batch.row(i), &mut ws.traces[i]);
        ws.preds[i] = pred;
        ws.valid[i] = flag.is_none();
        if flag.is_none() {
            n_valid += 1;
        }
    }
    if n_valid == 0 {
        return Err(TrainError::EmptyBatch);
    }

    let mut sq_sum = 0.0;
    let mut y2_sum = 0.0;
    for i in 0..n {
        if ws.valid[i] {
            let r = batch.y[i] - ws.preds[i];
            sq_sum += r * r;
            y2_sum += batch.y[i] * batch.y[i];
        }
    }
    let mse = sq_sum / n_valid as f64;
    let pivot = y2_sum / n_valid as f64 + 1e-8;
    let data_term = match spec.data_term {
        DataTerm::Mse => mse,
        DataTerm::RelativeMse => mse / pivot,
    };

    let mut l1_mass = 0.0;
    let mut im_mass = 0.0;
    for (_, e) in net.edges() {
        if e.active {
            l1_mass += e.weight.abs();
            im_mass += e.weight.im * e.weight.im;
        }
    }

    let arg_nodes = net.fed_log_sqrt_nodes();
    let arg_count = arg_nodes.len() * n_valid;
    let mut arg_sq = 0.0;
    if !arg_nodes.is_empty() {
        for i in 0..n {
            if ws.valid[i] {
                for &(li, j) in &arg_nodes {
                    let im = ws.traces[i].summations[li][j].im;
                    arg_sq += im * im;
                }
            }
        }
    }
    let arg_penalty = if arg_count > 0 {
        arg_sq / arg_count as f64
    } else {
        0.0
    };

    let parts = LossParts {
        total: data_term
            + spec.lambda_l1 * l1_mass
            + spec.lambda_im * im_mass
            + spec.lambda_arg * arg_penalty,
        data_term,
        mse,
        l1_mass,
        im_mass,
        arg_penalty,
        flagged: n - n_valid,
        valid: n_valid,
    };

    if !want_grad {
        return Ok((parts, None));
    }

    let mut grad = GradientVector::zeros(net.edge_count());
    let dscale = match spec.data_term {
        DataTerm::Mse => 2.0 / n_valid as f64,
        DataTerm::RelativeMse => 2.0 / (n_valid as f64 * pivot),
    };
    let arg_scale = if arg_count > 0 {
        2.0 * spec.lambda_arg / arg_count as f64
    } else {
        0.0
    };
    for i in 0..n {
        if ws.valid[i] {
            let dpred = dscale * (ws.preds[i] - batch.y[i]);
            backprop_sample(net, batch.row(i), &ws.traces[i], dpred, arg_scale, &mut grad);
        }
    }

    // weight-level penalty terms
    for (id, e) in net.edges() {
        if !e.active {
            continue;
        }
        let w = e.weight;
        let mag = w.abs();
        if spec.lambda_l1 > 0.0 && mag > 0.0 {
            grad.d[id].0 += spec.lambda_l1 * w.re / mag;
            grad.d[id].1 += spec.lambda_l1 * w.im / mag;
        }
        if spec.lambda_im > 0.0 {
            grad.d[id].1 += 2.0 * spec.lambda_im * w.im;
        }
    }

    Ok((parts, Some(grad)))
}

/// Loss and gradient with the spec's `backward` signature.
pub fn backward(
    net: &Network,
    batch: Batch<'_>,
    spec: &LossSpec,
) -> Result<(f64, GradientVector), TrainError> {
    let mut ws = GradWorkspace::default();
    let (parts, grad) = loss_and_grad(net, batch, spec, &mut ws, true)?;
    Ok((parts.total, grad.expect("gradient requested")))
}

/// Backpropagate one sample's adjoint through the trace, accumulating
/// weight gradients. `dpred` seeds the real part of the output sum;
/// `arg_scale` injects the branch-argument penalty adjoint at every
/// log/sqrt summation node.
pub(crate) fn backprop_sample(
    net: &Network,
    inputs: &[f64],
    trace: &Trace,
    dpred: f64,
    arg_scale: f64,
    grad: &mut GradientVector,
) {
    let n_layers = net.layers.len();
    // global edge-id offset of each layer's edge block, then the output block
    let mut offsets = Vec::with_capacity(n_layers + 1);
    let mut off = 0usize;
    for l in &net.layers {
        offsets.push(off);
        off += l.edges.len();
    }
    let out_off = off;

    // output fan-in values and adjoints
    let last_acts = &trace.activations[n_layers - 1];
    let mut fan_vals: Vec<Complex> = last_acts.clone();
    if net.skip_inputs {
        fan_vals.extend(inputs.iter().map(|&x| Complex::from_real(x)));
    }
    let mut adj_fan = vec![Complex::ZERO; fan_vals.len()];
    let adj_s = Complex::new(dpred, 0.0);
    for (k, e) in net.output_edges.iter().enumerate() {
        if !e.active {
            continue;
        }
        if let EdgeSource::Activation(i) = e.source {
            let g = chain(adj_s, fan_vals[i]);
            grad.d[out_off + k].0 += g.re;
            grad.d[out_off + k].1 += g.im;
            adj_fan[i] += chain(adj_s, e.weight);
        }
    }

    let mut adj_h: Vec<Complex> = adj_fan[..last_acts.len()].to_vec();

    for li in (0..n_layers).rev() {
        let layer = &net.layers[li];
        let m = layer.spec.unary_ops.len();
        let z = &trace.summations[li];
        let h = &trace.activations[li];

        // operator pullback: activation adjoints -> summation adjoints;
        // unfed log/sqrt/div nodes are structural zeros with no gradient
        let fed = &trace.fed[li];
        let mut adj_z = vec![Complex::ZERO; layer.spec.summation_count()];
        for (j, op) in layer.spec.unary_ops.iter().enumerate() {
            let lam = adj_h[j];
            match op {
                OperatorKind::Identity => adj_z[j] = Complex::new(lam.re, 0.0),
                OperatorKind::Square => adj_z[j] = Complex::new(lam.re * 2.0 * z[j].re, 0.0),
                OperatorKind::Constant => {} // summation input ignored
                OperatorKind::Log => {
                    if fed[j] {
                        adj_z[j] = chain(lam, z[j].recip());
                    }
                }
                OperatorKind::Sqrt => {
                    // d/dz sqrt(z) = 1/(2 sqrt(z)); at the exact origin the
                    // forward bypassed the log, contribute no gradient there
                    let s = h[j];
                    if fed[j] && s != Complex::ZERO {
                        adj_z[j] = chain(lam, s.scale(2.0).recip());
                    }
                }
                other => unreachable!("{other} is not unary"),
            }
        }
        for (k, op) in layer.spec.binary_ops.iter().enumerate() {
            let lam = adj_h[m + k];
            let (jl, jr) = (m + 2 * k, m + 2 * k + 1);
            match op {
                OperatorKind::Multiply => {
                    adj_z[jl] = Complex::new(lam.re * z[jr].re, 0.0);
                    adj_z[jr] = Complex::new(lam.re * z[jl].re, 0.0);
                }
                OperatorKind::Divide => {
                    if fed[jl] && fed[jr] {
                        let a = z[jl].re;
                        let y = z[jr];
                        let d = y.abs_sq();
                        adj_z[jl] = Complex::new(lam.re * y.re / d, 0.0);
                        adj_z[jr] = Complex::new(
                            lam.re * a * (y.im * y.im - y.re * y.re) / (d * d),
                            lam.re * (-2.0 * a * y.re * y.im) / (d * d),
                        );
                    }
                }
                other => unreachable!("{other} is not binary"),
            }
        }
        if arg_scale != 0.0 {
            for (j, op) in layer.spec.unary_ops.iter().enumerate() {
                if matches!(op, OperatorKind::Log | OperatorKind::Sqrt) && fed[j] {
                    adj_z[j].im += arg_scale * z[j].im;
                }
            }
        }

        // summation pullback: summation adjoints -> edge grads + fan-in adjoints
        let fan_vals: Vec<Complex> = if li == 0 {
            inputs.iter().map(|&x| Complex::from_real(x)).collect()
        } else {
            let mut f: Vec<Complex> = trace.activations[li - 1].clone();
            if net.skip_inputs {
                f.extend(inputs.iter().map(|&x| Complex::from_real(x)));
            }
            f
        };
        let mut adj_fan = vec![Complex::ZERO; fan_vals.len()];
        let base = offsets[li];
        for (k, e) in layer.edges.iter().enumerate() {
            if !e.active {
                continue;
            }
            match e.source {
                EdgeSource::Activation(i) => {
                    let lam = adj_z[e.target];
                    let g = chain(lam, fan_vals[i]);
                    grad.d[base + k].0 += g.re;
                    grad.d[base + k].1 += g.im;
                    adj_fan[i] += chain(lam, e.weight);
                }
                EdgeSource::Bias => {
                    // constant node output is the bias weight itself
                    let lam = adj_h[e.target];
                    grad.d[base + k].0 += lam.re;
                    grad.d[base + k].1 += lam.im;
                }
            }
        }

        if li > 0 {
            adj_h = adj_fan[..trace.activations[li - 1].len()].to_vec();
        }
    }
}

/// Central-difference gradient over every real coordinate of every active
/// weight. Flagged samples are excluded by the same forward-pass rule as the
/// analytic path; this is the independent oracle the analytic gradients are
/// checked against.
pub fn finite_difference_oracle(
    net: &Network,
    batch: Batch<'_>,
    spec: &LossSpec,
    h: f64,
) -> Result<GradientVector, TrainError> {
    debug_assert!((1e-8..=1e-4).contains(&h), "step size outside [1e-8, 1e-4]");
    let mut work = net.clone();
    let mut ws = GradWorkspace::default();
    let mut grad = GradientVector::zeros(net.edge_count());
    let ids: Vec<usize> = net
        .edges()
        .filter(|(_, e)| e.active)
        .map(|(id, _)| id)
        .collect();

    let eval = |w: &mut Network, ws: &mut GradWorkspace| -> Result<f64, TrainError> {
        let (parts, _) = loss_and_grad(w, batch, spec, ws, false)?;
        Ok(parts.total)
    };

    for id in ids {
        for coord in 0..2 {
            let orig = {
                let (_, e) = work.edges().find(|(i, _)| *i == id).expect("edge id");
                e.weight
            };
            let perturbed = |delta: f64| {
                if coord == 0 {
                    Complex::new(orig.re + delta, orig.im)
                } else {
                    Complex::new(orig.re, orig.im + delta)
                }
            };
            set_weight(&mut work, id, perturbed(h));
            let up = eval(&mut work, &mut ws)?;
            set_weight(&mut work, id, perturbed(-h));
            let down = eval(&mut work, &mut ws)?;
            set_weight(&mut work, id, orig);
            let g = (up - down) / (2.0 * h);
            if coord == 0 {
                grad.d[id].0 = g;
            } else {
                grad.d[id].1 = g;
            }
        }
    }
    Ok(grad)
}

fn set_weight(net: &mut Network, id: usize, w: Complex) {
    for (i, e) in net.edges_mut() {
        if i == id {
            e.weight = w;
            return;
        }
    }
    panic!("edge id {id} out of range");
}
