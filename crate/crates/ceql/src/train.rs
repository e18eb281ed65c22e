//! Three-phase optimization: composite loss, Adam updates over the real and
//! imaginary coordinates of every weight, magnitude-threshold pruning at the
//! end of phase 1, impact-based iterative pruning through phase 2, cascade
//! cleanup after every prune, and plateau learning-rate decay in phase 3.

use crate::autodiff::{loss_and_grad, Batch, GradWorkspace, GradientVector, LossParts};
use crate::complex::{Complex, OperatorKind};
use crate::graph::{EdgeSource, Network};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum TrainError {
    #[error("batch is empty after removing flagged samples")]
    EmptyBatch,
    #[error("training data must contain at least 2 samples")]
    InsufficientData,
    #[error("pruning emptied the graph; the run produced a degenerate model")]
    DegenerateModel,
    #[error("non-finite gradient entry; aborting the run")]
    NonFiniteGradient,
}

/// Data term of the composite loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataTerm {
    Mse,
    /// Pivoted relative MSE: mean squared error divided by the mean squared
    /// target plus a small stabilizer.
    RelativeMse,
}

/// Composite loss configuration:
/// `data_term + λ_l1·Σ|w| + λ_im·Σ Im(w)² + λ_arg·mean Im(z_arg)²`,
/// the last term averaged over log/sqrt nodes and unflagged samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub data_term: DataTerm,
    pub lambda_l1: f64,
    pub lambda_im: f64,
    pub lambda_arg: f64,
}

/// Phase-3 loss: sparsity regularization is structurally absent, not merely
/// zeroed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinalLossSpec {
    pub data_term: DataTerm,
    pub lambda_im: f64,
    pub lambda_arg: f64,
}

impl FinalLossSpec {
    pub fn to_loss_spec(self) -> LossSpec {
        LossSpec {
            data_term: self.data_term,
            lambda_l1: 0.0,
            lambda_im: self.lambda_im,
            lambda_arg: self.lambda_arg,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauSpec {
    pub patience: usize,
    pub factor: f64,
    pub min_lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrunePolicy {
    /// Deactivate every edge with |w| below the threshold, once, at the end
    /// of the phase.
    ThresholdOnce { threshold: f64 },
    /// Every `interval_epochs`, remove the `fraction` of active edges with
    /// the smallest impact on the batch loss, never going below `min_edges`.
    ImpactIterative {
        interval_epochs: usize,
        fraction: f64,
        min_edges: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub epochs: usize,
    pub lr: f64,
    pub loss: LossSpec,
    pub pruning: Option<PrunePolicy>,
    pub lr_plateau: Option<PlateauSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinalPhase {
    pub epochs: usize,
    pub lr: f64,
    pub loss: FinalLossSpec,
    pub lr_plateau: Option<PlateauSpec>,
}

/// Early-stop rule shared by all phases: a phase ends once the loss has not
/// improved by more than `threshold` for `patience` consecutive epochs (in
/// phase 3 the plateau scheduler consumes those events to decay the learning
/// rate first).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceSpec {
    pub threshold: f64,
    pub patience: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSchedule {
    pub phase1: Phase,
    pub phase2: Phase,
    pub phase3: FinalPhase,
    pub convergence: ConvergenceSpec,
}

impl PhaseSchedule {
    /// The benchmark defaults: epochs (100k, 200k, 50k) at lr 1e-2; phase
    /// penalties λ_im (1e-10, 1e-3, 1e3), λ_l1 (1e-10, 1e-7, —), λ_arg
    /// (1e-10, 1e3, 1e3); magnitude threshold 1e-2 after phase 1; impact
    /// pruning every 10k epochs at fraction 0.1 down to 15 edges; phase-3
    /// plateau decay (patience 2000, factor 0.1, min lr 1e-5) with
    /// convergence threshold 1e-7.
    pub fn benchmark_defaults() -> Self {
        PhaseSchedule {
            phase1: Phase {
                epochs: 100_000,
                lr: 1e-2,
                loss: LossSpec {
                    data_term: DataTerm::Mse,
                    lambda_l1: 1e-10,
                    lambda_im: 1e-10,
                    lambda_arg: 1e-10,
                },
                pruning: Some(PrunePolicy::ThresholdOnce { threshold: 1e-2 }),
                lr_plateau: None,
            },
            phase2: Phase {
                epochs: 200_000,
                lr: 1e-2,
                loss: LossSpec {
                    data_term: DataTerm::Mse,
                    lambda_l1: 1e-7,
                    lambda_im: 1e-3,
                    lambda_arg: 1e3,
                },
                pruning: Some(PrunePolicy::ImpactIterative {
                    interval_epochs: 10_000,
                    fraction: 0.1,
                    min_edges: 15,
                }),
                lr_plateau: None,
            },
            phase3: FinalPhase {
                epochs: 50_000,
                lr: 1e-2,
                loss: FinalLossSpec {
                    data_term: DataTerm::Mse,
                    lambda_im: 1e3,
                    lambda_arg: 1e3,
                },
                lr_plateau: Some(PlateauSpec {
                    patience: 2000,
                    factor: 0.1,
                    min_lr: 1e-5,
                }),
            },
            convergence: ConvergenceSpec {
                threshold: 1e-7,
                patience: 2000,
            },
        }
    }

    /// Scale every epoch count (phase lengths, pruning intervals, patience
    /// windows) by `f` for desk-scale runs.
    pub fn scaled(&self, f: f64) -> Self {
        let se = |e: usize| ((e as f64 * f).round() as usize).max(if e > 0 { 1 } else { 0 });
        let sp = |p: usize| se(p).max(50);
        let scale_policy = |p: &Option<PrunePolicy>| {
            p.map(|pol| match pol {
                PrunePolicy::ThresholdOnce { threshold } => {
                    PrunePolicy::ThresholdOnce { threshold }
                }
                PrunePolicy::ImpactIterative {
                    interval_epochs,
                    fraction,
                    min_edges,
                } => PrunePolicy::ImpactIterative {
                    interval_epochs: se(interval_epochs).max(1),
                    fraction,
                    min_edges,
                },
            })
        };
        let scale_plateau = |p: &Option<PlateauSpec>| {
            p.map(|pl| PlateauSpec {
                patience: sp(pl.patience),
                ..pl
            })
        };
        PhaseSchedule {
            phase1: Phase {
                epochs: se(self.phase1.epochs),
                pruning: scale_policy(&self.phase1.pruning),
                lr_plateau: scale_plateau(&self.phase1.lr_plateau),
                ..self.phase1
            },
            phase2: Phase {
                epochs: se(self.phase2.epochs),
                pruning: scale_policy(&self.phase2.pruning),
                lr_plateau: scale_plateau(&self.phase2.lr_plateau),
                ..self.phase2
            },
            phase3: FinalPhase {
                epochs: se(self.phase3.epochs),
                lr_plateau: scale_plateau(&self.phase3.lr_plateau),
                ..self.phase3
            },
            convergence: ConvergenceSpec {
                threshold: self.convergence.threshold,
                patience: sp(self.convergence.patience),
            },
        }
    }
}

/// Composite loss over the batch under the given spec.
pub fn composite_loss(net: &Network, batch: Batch<'_>, spec: &LossSpec) -> Result<f64, TrainError> {
    let mut ws = GradWorkspace::default();
    let (parts, _) = loss_and_grad(net, batch, spec, &mut ws, false)?;
    Ok(parts.total)
}

/// First/second-moment Adam state over flat real coordinates (two per
/// complex weight). Moments start at zero; a fresh state is created at each
/// phase boundary.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    inv_bc1: f64,
    inv_bc2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n_coords: usize) -> Self {
        AdamState {
            m: vec![0.0; n_coords],
            v: vec![0.0; n_coords],
            t: 0,
            inv_bc1: 1.0,
            inv_bc2: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Advance the step counter and cache the bias corrections.
    pub fn begin_step(&mut self) {
        self.t += 1;
        self.inv_bc1 = 1.0 / (1.0 - self.beta1.powf(self.t as f64));
        self.inv_bc2 = 1.0 / (1.0 - self.beta2.powf(self.t as f64));
    }

    /// Moment update for one coordinate; returns the (positive-signed)
    /// update to subtract from the parameter.
    #[inline]
    pub fn coord_step(&mut self, idx: usize, g: f64, lr: f64) -> f64 {
        let m = &mut self.m[idx];
        *m = self.beta1 * *m + (1.0 - self.beta1) * g;
        let v = &mut self.v[idx];
        *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
        let m_hat = *m * self.inv_bc1;
        let v_hat = *v * self.inv_bc2;
        lr * m_hat / (v_hat.sqrt() + self.eps)
    }
}

/// One Adam update of every active weight; inactive-edge coordinates are
/// untouched, moments included.
pub fn adam_step(
    state: &mut AdamState,
    net: &mut Network,
    grad: &GradientVector,
    lr: f64,
) -> Result<(), TrainError> {
    if !grad.is_finite() {
        return Err(TrainError::NonFiniteGradient);
    }
    state.begin_step();
    for (id, e) in net.edges_mut() {
        if !e.active {
            continue;
        }
        let (gr, gi) = grad.d[id];
        e.weight.re -= state.coord_step(2 * id, gr, lr);
        e.weight.im -= state.coord_step(2 * id + 1, gi, lr);
    }
    Ok(())
}

/// Deactivate every active edge with |w| below the threshold; pruned edges
/// are held at zero and never reactivate.
pub fn threshold_prune(net: &mut Network, threshold: f64) -> usize {
    let mut pruned = 0;
    for (_, e) in net.edges_mut() {
        if e.active && e.weight.abs() < threshold {
            e.active = false;
            e.weight = Complex::ZERO;
            pruned += 1;
        }
    }
    pruned
}

fn act_index(spec: &crate::graph::LayerSpec, node: usize) -> usize {
    let m = spec.unary_ops.len();
    if node < m {
        node
    } else {
        m + (node - m) / 2
    }
}

/// Forward/backward liveness of every activation under the active edge set.
fn liveness(net: &Network) -> (Vec<Vec<bool>>, Vec<Vec<bool>>) {
    let n_layers = net.layers.len();
    let mut fwd: Vec<Vec<bool>> = Vec::with_capacity(n_layers);
    for (li, layer) in net.layers.iter().enumerate() {
        let m = layer.spec.unary_ops.len();
        let mut fed_live = vec![false; layer.spec.summation_count()];
        let mut bias_live = vec![false; m];
        for e in &layer.edges {
            if !e.active {
                continue;
            }
            match e.source {
                EdgeSource::Activation(i) => {
                    let live = if li == 0 {
                        true
                    } else {
                        let prev_acts = net.layers[li - 1].spec.activation_count();
                        if i < prev_acts {
                            fwd[li - 1][i]
                        } else {
                            true // skip input
                        }
                    };
                    if live {
                        fed_live[e.target] = true;
                    }
                }
                EdgeSource::Bias => bias_live[e.target] = true,
            }
        }
        let mut acts = vec![false; layer.spec.activation_count()];
        for (j, op) in layer.spec.unary_ops.iter().enumerate() {
            acts[j] = match op {
                OperatorKind::Constant => bias_live[j],
                _ => fed_live[j],
            };
        }
        for k in 0..layer.spec.binary_ops.len() {
            acts[m + k] = fed_live[m + 2 * k] && fed_live[m + 2 * k + 1];
        }
        fwd.push(acts);
    }

    let mut bwd: Vec<Vec<bool>> = net
        .layers
        .iter()
        .map(|l| vec![false; l.spec.activation_count()])
        .collect();
    let last = n_layers - 1;
    let last_acts = net.layers[last].spec.activation_count();
    for e in &net.output_edges {
        if e.active {
            if let EdgeSource::Activation(i) = e.source {
                if i < last_acts {
                    bwd[last][i] = true;
                }
            }
        }
    }
    for li in (1..n_layers).rev() {
        let prev_acts = net.layers[li - 1].spec.activation_count();
        for e in &net.layers[li].edges {
            if !e.active {
                continue;
            }
            if let EdgeSource::Activation(i) = e.source {
                if i < prev_acts {
                    let a = act_index(&net.layers[li].spec, e.target);
                    if bwd[li][a] && fwd[li][a] {
                        bwd[li - 1][i] = true;
                    }
                }
            }
        }
    }
    (fwd, bwd)
}

/// Deactivate every edge that is not on an active input→output path.
/// Binary operators with either summation arm disconnected are removed
/// together with their surviving input edges. Runs to a fixpoint; returns
/// the number of edges removed.
pub fn cascade_cleanup(net: &mut Network) -> usize {
    let mut removed = 0;
    loop {
        let (fwd, bwd) = liveness(net);
        let mut changed = 0;
        let n_layers = net.layers.len();
        for li in 0..n_layers {
            let prev_acts = if li == 0 {
                0
            } else {
                net.layers[li - 1].spec.activation_count()
            };
            let prev_fwd = if li == 0 { None } else { Some(&fwd[li - 1]) };
            let spec = net.layers[li].spec.clone();
            for e in &mut net.layers[li].edges {
                if !e.active {
                    continue;
                }
                let a = act_index(&spec, e.target);
                let src_live = match e.source {
                    EdgeSource::Bias => true,
                    EdgeSource::Activation(i) => {
                        if li == 0 || i >= prev_acts {
                            true
                        } else {
                            prev_fwd.unwrap()[i]
                        }
                    }
                };
                if !(src_live && fwd[li][a] && bwd[li][a]) {
                    e.active = false;
                    e.weight = Complex::ZERO;
                    changed += 1;
                }
            }
        }
        let last_acts = net.layers[n_layers - 1].spec.activation_count();
        let last_fwd = &fwd[n_layers - 1];
        for e in &mut net.output_edges {
            if !e.active {
                continue;
            }
            if let EdgeSource::Activation(i) = e.source {
                if i < last_acts && !last_fwd[i] {
                    e.active = false;
                    e.weight = Complex::ZERO;
                    changed += 1;
                }
            }
        }
        removed += changed;
        if changed == 0 {
            return removed;
        }
    }
}

/// Impact-based pruning: the impact of an edge is the absolute change of
/// the batch loss when its weight is zeroed. The `⌊fraction·active⌋`
/// smallest-impact edges are deactivated (ties by smaller |w|, then edge
/// id), stopping early if removal (with its cascade fallout) would take the
/// active count below `min_edges`. Returns the pruned edge ids.
pub fn impact_prune(
    net: &mut Network,
    batch: Batch<'_>,
    spec: &LossSpec,
    fraction: f64,
    min_edges: usize,
) -> Result<Vec<usize>, TrainError> {
    let active0 = net.active_edge_count();
    if active0 <= min_edges {
        return Ok(Vec::new());
    }
    let cap = ((active0 as f64) * fraction).floor() as usize;
    if cap == 0 {
        return Ok(Vec::new());
    }

    let mut ws = GradWorkspace::default();
    let base = loss_and_grad(net, batch, spec, &mut ws, false)?.0.total;

    let ids: Vec<(usize, f64)> = net
        .edges()
        .filter(|(_, e)| e.active)
        .map(|(id, e)| (id, e.weight.abs()))
        .collect();
    let mut impacts = Vec::with_capacity(ids.len());
    for &(id, mag) in &ids {
        let saved = zero_weight(net, id);
        let trial = loss_and_grad(net, batch, spec, &mut ws, false)
            .map(|(p, _)| (p.total - base).abs())
            .unwrap_or(f64::INFINITY);
        restore_weight(net, id, saved);
        impacts.push((trial, mag, id));
    }
    impacts.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal))
            .then(a.2.cmp(&b.2))
    });

    let mut pruned = Vec::new();
    for &(_, _, id) in &impacts {
        if pruned.len() == cap {
            break;
        }
        // account for cascade fallout before committing
        let mut trial = net.clone();
        deactivate(&mut trial, id);
        cascade_cleanup(&mut trial);
        if trial.active_edge_count() < min_edges {
            break;
        }
        deactivate(net, id);
        pruned.push(id);
    }
    Ok(pruned)
}

fn zero_weight(net: &mut Network, id: usize) -> Complex {
    for (i, e) in net.edges_mut() {
        if i == id {
            let w = e.weight;
            e.weight = Complex::ZERO;
            return w;
        }
    }
    unreachable!("edge id {id}")
}

fn restore_weight(net: &mut Network, id: usize, w: Complex) {
    for (i, e) in net.edges_mut() {
        if i == id {
            e.weight = w;
            return;
        }
    }
}

fn deactivate(net: &mut Network, id: usize) {
    for (i, e) in net.edges_mut() {
        if i == id {
            e.active = false;
            e.weight = Complex::ZERO;
            return;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: u8,
    pub loss: f64,
    pub data_mse: f64,
    pub l1_mass: f64,
    pub im_mass: f64,
    pub arg_penalty: f64,
    pub active_edges: usize,
    pub lr: f64,
    pub flagged_samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PruneEvent {
    pub epoch: usize,
    pub kind: PruneKind,
    pub removed: usize,
    pub active_after: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneKind {
    Threshold,
    Impact,
    Cascade,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct History {
    pub seed: u64,
    pub records: Vec<EpochRecord>,
    pub prune_events: Vec<PruneEvent>,
    /// Sign flips of Im(z) across consecutive epochs at log/sqrt arguments
    /// with Re(z) < 0: traversals of the branch cut.
    pub branch_crossings: u64,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "epoch,phase,loss,data_mse,l1_mass,im_mass,arg_penalty,active_edges,lr,flagged_samples\n",
        );
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.epoch,
                r.phase,
                r.loss,
                r.data_mse,
                r.l1_mass,
                r.im_mass,
                r.arg_penalty,
                r.active_edges,
                r.lr,
                r.flagged_samples
            ));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    /// Best phase-3 snapshot with imaginary parts projected to zero.
    pub net: Network,
    pub best_loss: f64,
    pub best_epoch: usize,
    /// Σ Im(w)² of the best snapshot before the final real-axis projection.
    pub im_mass_final: f64,
    /// Plain MSE of the returned model on the training batch.
    pub train_mse: f64,
}

/// Tracks branch-cut traversals of log/sqrt arguments between consecutive
/// epochs.
struct BranchTracker {
    nodes: Vec<(usize, usize)>,
    prev: Vec<i8>,
    n_samples: usize,
    crossings: u64,
}

impl BranchTracker {
    fn new(net: &Network, n_samples: usize) -> Self {
        let nodes = net.log_sqrt_nodes();
        BranchTracker {
            prev: vec![0; nodes.len() * n_samples],
            nodes,
            n_samples,
            crossings: 0,
        }
    }

    fn update(&mut self, ws: &GradWorkspace) {
        for (ni, &(li, j)) in self.nodes.iter().enumerate() {
            for s in 0..self.n_samples {
                let slot = ni * self.n_samples + s;
                if !ws.valid[s] {
                    continue;
                }
                let z = ws.traces[s].summations[li][j];
                if z.re < 0.0 && z.im != 0.0 {
                    let sign = if z.im > 0.0 { 1 } else { -1 };
                    if self.prev[slot] != 0 && self.prev[slot] != sign {
                        self.crossings += 1;
                    }
                    self.prev[slot] = sign;
                } else {
                    self.prev[slot] = 0;
                }
            }
        }
    }
}

struct PhaseParams {
    phase_no: u8,
    epochs: usize,
    lr: f64,
    loss: LossSpec,
    impact: Option<(usize, f64, usize)>,
    plateau: Option<PlateauSpec>,
    track_best: bool,
}

struct RunState<'a> {
    batch: Batch<'a>,
    ws: GradWorkspace,
    history: History,
    tracker: BranchTracker,
    epoch: usize,
    best: Option<(f64, Network, usize)>,
}

fn prune_and_cascade(
    net: &mut Network,
    st: &mut RunState,
    loss: &LossSpec,
    fraction: f64,
    min_edges: usize,
) -> Result<usize, TrainError> {
    let pruned = impact_prune(net, st.batch, loss, fraction, min_edges)?;
    if !pruned.is_empty() {
        st.history.prune_events.push(PruneEvent {
            epoch: st.epoch,
            kind: PruneKind::Impact,
            removed: pruned.len(),
            active_after: net.active_edge_count(),
        });
        let swept = cascade_cleanup(net);
        if swept > 0 {
            st.history.prune_events.push(PruneEvent {
                epoch: st.epoch,
                kind: PruneKind::Cascade,
                removed: swept,
                active_after: net.active_edge_count(),
            });
        }
        if !net.output_edges.iter().any(|e| e.active) {
            return Err(TrainError::DegenerateModel);
        }
    }
    Ok(pruned.len())
}

fn run_phase(
    net: &mut Network,
    p: &PhaseParams,
    conv: &ConvergenceSpec,
    st: &mut RunState,
) -> Result<(), TrainError> {
    if p.epochs == 0 {
        return Ok(());
    }
    let mut adam = AdamState::new(2 * net.edge_count());
    let mut lr = p.lr;
    let mut best_seen = f64::INFINITY;
    let mut since_improve = 0usize;
    let patience = p
        .plateau
        .map(|pl| pl.patience)
        .unwrap_or(conv.patience)
        .max(1);

    let mut ep = 0usize;
    while ep < p.epochs {
        if let Some((interval, fraction, min_edges)) = p.impact {
            if ep > 0 && ep % interval == 0 {
                prune_and_cascade(net, st, &p.loss, fraction, min_edges)?;
                best_seen = f64::INFINITY;
                since_improve = 0;
            }
        }

        let (parts, grad) = loss_and_grad(net, st.batch, &p.loss, &mut st.ws, true)?;
        let grad = grad.expect("gradient requested");
        record_epoch(st, p.phase_no, &parts, net.active_edge_count(), lr);
        st.tracker.update(&st.ws);

        if p.track_best {
            match &mut st.best {
                Some(b) if parts.total >= b.0 => {}
                slot => *slot = Some((parts.total, net.clone(), st.epoch)),
            }
        }

        adam_step(&mut adam, net, &grad, lr)?;
        st.epoch += 1;
        ep += 1;

        if parts.total < best_seen - conv.threshold {
            best_seen = parts.total;
            since_improve = 0;
        } else {
            since_improve += 1;
            if since_improve >= patience {
                if let Some(pl) = p.plateau {
                    if lr > pl.min_lr {
                        lr = (lr * pl.factor).max(pl.min_lr);
                        since_improve = 0;
                        continue;
                    }
                }
                if let Some((_, fraction, min_edges)) = p.impact {
                    // converged between pruning events: bring the next prune
                    // forward instead of idling until the interval
                    let n = prune_and_cascade(net, st, &p.loss, fraction, min_edges)?;
                    if n > 0 {
                        best_seen = f64::INFINITY;
                        since_improve = 0;
                        continue;
                    }
                }
                break;
            }
        }
    }
    Ok(())
}

fn record_epoch(st: &mut RunState, phase: u8, parts: &LossParts, active: usize, lr: f64) {
    st.history.records.push(EpochRecord {
        epoch: st.epoch,
        phase,
        loss: parts.total,
        data_mse: parts.mse,
        l1_mass: parts.l1_mass,
        im_mass: parts.im_mass,
        arg_penalty: parts.arg_penalty,
        active_edges: active,
        lr,
        flagged_samples: parts.flagged,
    });
}

/// Execute the three-phase schedule on `net` over the full training batch.
///
/// Phase 1 ends with magnitude-threshold pruning and cascade cleanup; phase
/// 2 interleaves impact pruning with training; phase 3 fine-tunes under
/// plateau learning-rate decay and returns the best-loss snapshot with its
/// imaginary parts projected onto the real axis.
pub fn run_training(
    mut net: Network,
    batch: Batch<'_>,
    schedule: &PhaseSchedule,
    seed: u64,
) -> Result<(TrainedModel, History), TrainError> {
    if batch.len() < 2 {
        return Err(TrainError::InsufficientData);
    }
    let mut st = RunState {
        batch,
        ws: GradWorkspace::default(),
        history: History {
            seed,
            ..History::default()
        },
        tracker: BranchTracker::new(&net, batch.len()),
        epoch: 0,
        best: None,
    };

    for (phase_no, phase) in [(1u8, &schedule.phase1), (2u8, &schedule.phase2)] {
        let impact = match phase.pruning {
            Some(PrunePolicy::ImpactIterative {
                interval_epochs,
                fraction,
                min_edges,
            }) => Some((interval_epochs, fraction, min_edges)),
            _ => None,
        };
        run_phase(
            &mut net,
            &PhaseParams {
                phase_no,
                epochs: phase.epochs,
                lr: phase.lr,
                loss: phase.loss,
                impact,
                plateau: phase.lr_plateau,
                track_best: false,
            },
            &schedule.convergence,
            &mut st,
        )?;
        if phase.epochs > 0 {
            if let Some(PrunePolicy::ThresholdOnce { threshold }) = phase.pruning {
                let pruned = threshold_prune(&mut net, threshold);
                st.history.prune_events.push(PruneEvent {
                    epoch: st.epoch,
                    kind: PruneKind::Threshold,
                    removed: pruned,
                    active_after: net.active_edge_count(),
                });
                let swept = cascade_cleanup(&mut net);
                if swept > 0 {
                    st.history.prune_events.push(PruneEvent {
                        epoch: st.epoch,
                        kind: PruneKind::Cascade,
                        removed: swept,
                        active_after: net.active_edge_count(),
                    });
                }
                if !net.output_edges.iter().any(|e| e.active) {
                    return Err(TrainError::DegenerateModel);
                }
            }
        }
    }

    run_phase(
        &mut net,
        &PhaseParams {
            phase_no: 3,
            epochs: schedule.phase3.epochs,
            lr: schedule.phase3.lr,
            loss: schedule.phase3.loss.to_loss_spec(),
            impact: None,
            plateau: schedule.phase3.lr_plateau,
            track_best: true,
        },
        &schedule.convergence,
        &mut st,
    )?;

    let (best_loss, mut best_net, best_epoch) = match st.best.take() {
        Some(b) => b,
        None => {
            // phase 3 did not run; the current state is the result
            let spec = schedule.phase3.loss.to_loss_spec();
            let loss = loss_and_grad(&net, batch, &spec, &mut st.ws, false)
                .map(|(p, _)| p.total)
                .unwrap_or(f64::NAN);
            (loss, net.clone(), st.epoch)
        }
    };

    // final projection onto the real axis; the residual mass is recorded
    let im_mass_final: f64 = best_net
        .edges()
        .filter(|(_, e)| e.active)
        .map(|(_, e)| e.weight.im * e.weight.im)
        .sum();
    for (_, e) in best_net.edges_mut() {
        e.weight.im = 0.0;
    }

    let mse_spec = LossSpec {
        data_term: DataTerm::Mse,
        lambda_l1: 0.0,
        lambda_im: 0.0,
        lambda_arg: 0.0,
    };
    let train_mse = loss_and_grad(&best_net, batch, &mse_spec, &mut st.ws, false)?
        .0
        .mse;

    st.history.branch_crossings = st.tracker.crossings;
    Ok((
        TrainedModel {
            net: best_net,
            best_loss,
            best_epoch,
            im_mass_final,
            train_mse,
        },
        st.history,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::complex::OperatorKind::*;
    use crate::graph::{default_layer_specs, InitPolicy, Layer1Variant, LayerSpec};

    fn mse_spec() -> LossSpec {
        LossSpec {
            data_term: DataTerm::Mse,
            lambda_l1: 0.0,
            lambda_im: 0.0,
            lambda_arg: 0.0,
        }
    }

    fn linear_batch() -> (Vec<f64>, Vec<f64>) {
        let xs: Vec<f64> = (0..16).map(|i| -2.0 + 0.26 * i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 1.87 * x + 2.01).collect();
        (xs, ys)
    }

    #[test]
    fn composite_loss_examples() {
        // perfect predictor with all penalties off scores zero
        let spec_l = LayerSpec::new(vec![Identity], vec![]);
        let mut net = Network::build_inactive(1, vec![spec_l.clone()], false).unwrap();
        net.wire_layer(0, 0, 0, Complex::ONE);
        net.wire_output(0, Complex::ONE);
        let x = [1.0, 2.0, 3.0];
        let y = [1.0, 2.0, 3.0];
        let l = composite_loss(&net, Batch::new(&x, &y, 1), &mse_spec()).unwrap();
        assert_eq!(l, 0.0);

        // zero network: MSE = mean(y²)
        let mut net0 = Network::build_inactive(1, vec![spec_l.clone()], false).unwrap();
        // keep one active zero-weight path so the output is a live zero
        net0.wire_layer(0, 0, 0, Complex::ZERO);
        net0.wire_output(0, Complex::ZERO);
        let y = [1.0, -3.0, 2.0];
        let l = composite_loss(&net0, Batch::new(&x, &y, 1), &mse_spec()).unwrap();
        let expect = (1.0 + 9.0 + 4.0) / 3.0;
        assert!((l - expect).abs() < 1e-15);

        // single weight w = 3+4i with unit penalties: |w| + Im² = 5 + 16
        let mut net1 = Network::build_inactive(1, vec![spec_l], false).unwrap();
        net1.wire_layer(0, 0, 0, Complex::new(3.0, 4.0));
        let spec = LossSpec {
            data_term: DataTerm::Mse,
            lambda_l1: 1.0,
            lambda_im: 1.0,
            lambda_arg: 0.0,
        };
        // no active output edge -> prediction 0; zero targets keep the data
        // term at zero
        let y0 = [0.0, 0.0, 0.0];
        let l = composite_loss(&net1, Batch::new(&x, &y0, 1), &spec).unwrap();
        assert!((l - 21.0).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_magnitude() {
        let mut s = AdamState::new(2);
        s.begin_step();
        let d = s.coord_step(0, 0.3, 1e-2);
        // bias-corrected first step is lr·g/(|g| + ε) ≈ lr·sign(g)
        assert!((d - 1e-2 * 0.3 / (0.3 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_keeps_weights() {
        let spec_l = LayerSpec::new(vec![Identity], vec![]);
        let mut net = Network::build(1, vec![spec_l], false, InitPolicy::default(), 3).unwrap();
        let before: Vec<Complex> = net.edges().map(|(_, e)| e.weight).collect();
        let grad = GradientVector::zeros(net.edge_count());
        let mut adam = AdamState::new(2 * net.edge_count());
        adam_step(&mut adam, &mut net, &grad, 1e-2).unwrap();
        let after: Vec<Complex> = net.edges().map(|(_, e)| e.weight).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn threshold_prune_counts() {
        let spec_l = LayerSpec::new(vec![Identity, Identity], vec![]);
        let mut net = Network::build_inactive(1, vec![spec_l], false).unwrap();
        net.wire_layer(0, 0, 0, Complex::from_real(0.005));
        net.wire_layer(0, 0, 1, Complex::from_real(0.02));
        assert_eq!(threshold_prune(&mut net, 0.01), 1);
        assert_eq!(net.active_edge_count(), 1);
    }

    #[test]
    fn cascade_noop_on_fresh_network() {
        let mut net = Network::build(
            1,
            default_layer_specs(Layer1Variant::AsPrinted),
            true,
            InitPolicy::default(),
            0,
        )
        .unwrap();
        assert_eq!(cascade_cleanup(&mut net), 0);
    }

    #[test]
    fn cascade_removes_upstream_of_dead_output() {
        // divide node whose only consumer is a deactivated output edge:
        // all of its input edges must be swept
        let l1 = LayerSpec::new(vec![Constant], vec![]);
        let l2 = LayerSpec::new(vec![Identity], vec![Divide]);
        let mut net = Network::build_inactive(1, vec![l1, l2], true).unwrap();
        net.wire_bias(0, 0, Complex::ONE);
        net.wire_layer(1, 0, 1, Complex::ONE); // div numerator <- const
        net.wire_layer(1, 1, 2, Complex::ONE); // div denominator <- skip x
        net.wire_layer(1, 1, 0, Complex::ONE); // identity <- skip x
        net.wire_output(0, Complex::ONE); // identity reaches output
        net.wire_output(1, Complex::ONE); // divide reaches output
        net.output_edge_mut(1).active = false; // ...not anymore
        let removed = cascade_cleanup(&mut net);
        // both divide input edges, then the constant's bias edge once its
        // only consumer is gone
        assert_eq!(removed, 3);
        // identity path survives
        let f = net.forward(&[0.7]);
        assert_eq!(f.prediction, 0.7);
    }

    #[test]
    fn cascade_removes_one_armed_binary() {
        let l1 = LayerSpec::new(vec![Constant], vec![]);
        let l2 = LayerSpec::new(vec![Identity], vec![Multiply]);
        let mut net = Network::build_inactive(1, vec![l1, l2], true).unwrap();
        net.wire_layer(1, 1, 1, Complex::ONE); // mul left arm <- x
        // right arm never wired: one-armed multiply
        net.wire_layer(1, 1, 0, Complex::from_real(2.0));
        net.wire_output(0, Complex::ONE);
        net.wire_output(1, Complex::ONE);
        let removed = cascade_cleanup(&mut net);
        // the surviving mul arm edge and the output edge reading the dead mul
        assert_eq!(removed, 2);
        assert_eq!(net.forward(&[1.5]).prediction, 3.0);
    }

    #[test]
    fn cascade_preserves_predictions_when_dead_parts_removed() {
        let specs = default_layer_specs(Layer1Variant::AsPrinted);
        let mut net = Network::build(1, specs, true, InitPolicy::default(), 8).unwrap();
        // kill some output edges; their upstream-only subgraphs become dead
        net.output_edge_mut(2).active = false;
        net.output_edge_mut(5).active = false;
        let probe: Vec<f64> = (0..64).map(|i| -2.0 + i as f64 * 0.0635).collect();
        let before: Vec<_> = probe
            .iter()
            .map(|&x| {
                let f = net.forward(&[x]);
                (f.prediction.to_bits(), f.flag.is_some())
            })
            .collect();
        cascade_cleanup(&mut net);
        for (i, &x) in probe.iter().enumerate() {
            let f = net.forward(&[x]);
            if !before[i].1 && f.flag.is_none() {
                assert_eq!(f.prediction.to_bits(), before[i].0, "x = {x}");
            }
        }
    }

    #[test]
    fn impact_prune_zero_weight_goes_first() {
        let spec_l = LayerSpec::new(vec![Identity, Identity, Identity], vec![]);
        let mut net = Network::build_inactive(1, vec![spec_l], false).unwrap();
        net.wire_layer(0, 0, 0, Complex::from_real(1.5));
        net.wire_layer(0, 0, 1, Complex::ZERO);
        net.wire_layer(0, 0, 2, Complex::from_real(0.5));
        net.wire_output(0, Complex::ONE);
        net.wire_output(1, Complex::ONE);
        net.wire_output(2, Complex::ONE);
        let (xs, ys) = linear_batch();
        let batch = Batch::new(&xs, &ys, 1);
        let pruned = impact_prune(&mut net, batch, &mse_spec(), 0.2, 1).unwrap();
        assert_eq!(pruned.len(), 1);
        let (_, e) = net.edges().find(|(id, _)| *id == pruned[0]).unwrap();
        assert!(!e.active);
        // the zero-weight edge was the one removed
        assert_eq!(pruned[0], 1);
    }

    #[test]
    fn impact_prune_respects_floor() {
        let spec_l = LayerSpec::new(vec![Identity], vec![]);
        let mut net = Network::build(1, vec![spec_l], false, InitPolicy::default(), 4).unwrap();
        let (xs, ys) = linear_batch();
        let active = net.active_edge_count();
        let pruned =
            impact_prune(&mut net, Batch::new(&xs, &ys, 1), &mse_spec(), 0.5, active).unwrap();
        assert!(pruned.is_empty());
    }

    #[test]
    fn impact_prune_count_matches_fraction() {
        let spec_l = LayerSpec::new(vec![Identity; 10], vec![]);
        let mut net = Network::build(2, vec![spec_l], false, InitPolicy::default(), 5).unwrap();
        // 10 nodes × 2 inputs + 10 output edges = 30 edges; fraction 0.1 -> 3
        let n = net.active_edge_count();
        assert_eq!(n, 30);
        let xs: Vec<f64> = (0..32).map(|i| (i as f64) * 0.1 - 1.6).collect();
        let ys: Vec<f64> = (0..16).map(|i| (i as f64) * 0.3).collect();
        let pruned =
            impact_prune(&mut net, Batch::new(&xs, &ys, 2), &mse_spec(), 0.1, 1).unwrap();
        assert_eq!(pruned.len(), 3);
    }

    fn quick_schedule() -> PhaseSchedule {
        let mut s = PhaseSchedule::benchmark_defaults();
        s.phase1.epochs = 400;
        s.phase2.epochs = 400;
        s.phase3.epochs = 200;
        s.phase2.pruning = Some(PrunePolicy::ImpactIterative {
            interval_epochs: 100,
            fraction: 0.1,
            min_edges: 4,
        });
        s.convergence.patience = 100;
        s.phase3.lr_plateau = Some(PlateauSpec {
            patience: 50,
            factor: 0.1,
            min_lr: 1e-4,
        });
        s
    }

    #[test]
    fn zero_epoch_schedule_returns_initialized_network() {
        let specs = default_layer_specs(Layer1Variant::AsPrinted);
        let net = Network::build(1, specs, true, InitPolicy::default(), 6).unwrap();
        let reference = net.clone();
        let mut schedule = PhaseSchedule::benchmark_defaults();
        schedule.phase1.epochs = 0;
        schedule.phase2.epochs = 0;
        schedule.phase3.epochs = 0;
        let (xs, ys) = linear_batch();
        let (model, history) =
            run_training(net, Batch::new(&xs, &ys, 1), &schedule, 0).unwrap();
        assert!(history.records.is_empty());
        assert!(history.prune_events.is_empty());
        // weights unchanged up to the imaginary-part projection
        for ((_, a), (_, b)) in model.net.edges().zip(reference.edges()) {
            assert_eq!(a.weight.re, b.weight.re);
            assert_eq!(a.weight.im, 0.0);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let specs = default_layer_specs(Layer1Variant::AsPrinted);
        let schedule = quick_schedule();
        let (xs, ys) = linear_batch();
        let run = || {
            let net = Network::build(1, specs.clone(), true, InitPolicy::default(), 12).unwrap();
            run_training(net, Batch::new(&xs, &ys, 1), &schedule, 12).unwrap()
        };
        let (m1, h1) = run();
        let (m2, h2) = run();
        assert_eq!(h1.records.len(), h2.records.len());
        for (a, b) in h1.records.iter().zip(&h2.records) {
            assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        }
        assert_eq!(m1.best_loss.to_bits(), m2.best_loss.to_bits());
        for ((_, a), (_, b)) in m1.net.edges().zip(m2.net.edges()) {
            assert_eq!(a.weight.re.to_bits(), b.weight.re.to_bits());
        }
    }

    #[test]
    fn training_reduces_loss_and_prunes_monotonically() {
        let specs = default_layer_specs(Layer1Variant::AsPrinted);
        let net = Network::build(1, specs, true, InitPolicy::default(), 1).unwrap();
        let schedule = quick_schedule();
        let (xs, ys) = linear_batch();
        let (model, history) =
            run_training(net, Batch::new(&xs, &ys, 1), &schedule, 1).unwrap();
        let first = history.records.first().unwrap().loss;
        assert!(
            model.train_mse < first,
            "training made no progress: {first} -> {}",
            model.train_mse
        );
        // active-edge count is monotone non-increasing across records
        let mut prev = usize::MAX;
        for r in &history.records {
            assert!(r.active_edges <= prev);
            prev = r.active_edges;
        }
        // imaginary parts were projected away
        for (_, e) in model.net.edges() {
            assert_eq!(e.weight.im, 0.0);
        }
    }

    #[test]
    fn degenerate_threshold_reports_failure() {
        let specs = default_layer_specs(Layer1Variant::AsPrinted);
        let net = Network::build(1, specs, true, InitPolicy::default(), 2).unwrap();
        let mut schedule = quick_schedule();
        schedule.phase1.pruning = Some(PrunePolicy::ThresholdOnce { threshold: 1e9 });
        let (xs, ys) = linear_batch();
        let r = run_training(net, Batch::new(&xs, &ys, 1), &schedule, 2);
        assert!(matches!(r, Err(TrainError::DegenerateModel)));
    }

    #[test]
    fn too_small_dataset_rejected() {
        let specs = default_layer_specs(Layer1Variant::AsPrinted);
        let net = Network::build(1, specs, true, InitPolicy::default(), 0).unwrap();
        let schedule = quick_schedule();
        let r = run_training(net, Batch::new(&[1.0], &[2.0], 1), &schedule, 0);
        assert!(matches!(r, Err(TrainError::InsufficientData)));
    }

    #[test]
    fn scaled_schedule_shrinks_epoch_counts() {
        let s = PhaseSchedule::benchmark_defaults().scaled(0.2);
        assert_eq!(s.phase1.epochs, 20_000);
        assert_eq!(s.phase2.epochs, 40_000);
        assert_eq!(s.phase3.epochs, 10_000);
        match s.phase2.pruning {
            Some(PrunePolicy::ImpactIterative {
                interval_epochs, ..
            }) => assert_eq!(interval_epochs, 2000),
            _ => panic!("expected impact pruning"),
        }
        assert_eq!(s.convergence.patience, 400);
    }
}
