//! The operator-graph network: layers of summation nodes with complex edge
//! weights feeding a fixed operator library, skip-connected inputs, and a
//! single real-projected output node.
//!
//! Layer `L` exposes `m + 2n` summation nodes for `m` unary and `n` binary
//! operators. Summation node `j` holds `z_j = Σ w_ij · h_i` over the layer's
//! fan-in (previous activations, concatenated with the raw inputs when skip
//! connections are enabled). The first `m` nodes feed the unary operators;
//! the remaining `2n` are consumed in consecutive pairs by the binary
//! operators. The prediction is the real part of a weighted sum over the
//! final layer's activations (plus skip inputs).

use crate::complex::{
    principal_log, principal_sqrt, real_projected_binary, real_projected_unary, surrogate_div,
    Complex, OpError, OperatorKind,
};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("invalid network configuration: {0}")]
    InvalidConfig(String),
}

/// Why a forward evaluation was flagged invalid for one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlagReason {
    DivisionNearZero,
    LogOfZero,
    NonFinite,
}

impl From<OpError> for FlagReason {
    fn from(e: OpError) -> Self {
        match e {
            OpError::DivisionNearZero => FlagReason::DivisionNearZero,
            OpError::LogOfZero => FlagReason::LogOfZero,
        }
    }
}

/// Operator content of one layer: `unary_ops` then `binary_ops`, in order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub unary_ops: Vec<OperatorKind>,
    pub binary_ops: Vec<OperatorKind>,
}

impl LayerSpec {
    pub fn new(unary_ops: Vec<OperatorKind>, binary_ops: Vec<OperatorKind>) -> Self {
        Self {
            unary_ops,
            binary_ops,
        }
    }

    /// Number of summation nodes the layer exposes: m + 2n.
    pub fn summation_count(&self) -> usize {
        self.unary_ops.len() + 2 * self.binary_ops.len()
    }

    /// Number of activations the layer produces: m + n.
    pub fn activation_count(&self) -> usize {
        self.unary_ops.len() + self.binary_ops.len()
    }

    fn validate(&self) -> Result<(), GraphError> {
        if self.unary_ops.is_empty() && self.binary_ops.is_empty() {
            return Err(GraphError::InvalidConfig(
                "layer has an empty operator library".into(),
            ));
        }
        for op in &self.unary_ops {
            if op.is_binary() {
                return Err(GraphError::InvalidConfig(format!(
                    "binary operator {op} listed as unary"
                )));
            }
        }
        for op in &self.binary_ops {
            if !op.is_binary() {
                return Err(GraphError::InvalidConfig(format!(
                    "unary operator {op} listed as binary"
                )));
            }
        }
        Ok(())
    }
}

/// Where an edge draws its value from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EdgeSource {
    /// Index into the layer's fan-in vector (previous activations, then raw
    /// inputs when skip connections are on). For output edges the fan-in is
    /// the final layer's activations (then raw inputs).
    Activation(usize),
    /// The dedicated unit source of a Constant operator; the edge weight is
    /// the learned constant.
    Bias,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub source: EdgeSource,
    pub target: usize,
    pub weight: Complex,
    pub active: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub spec: LayerSpec,
    pub edges: Vec<Edge>,
}

/// Weight initialization ranges. Imaginary parts start nonzero by default:
/// the complex degrees of freedom are what lets optimization detour around
/// real-axis degeneracies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitPolicy {
    pub re_lo: f64,
    pub re_hi: f64,
    pub im_lo: f64,
    pub im_hi: f64,
}

impl Default for InitPolicy {
    fn default() -> Self {
        Self {
            re_lo: -1.0,
            re_hi: 1.0,
            im_lo: -0.5,
            im_hi: 0.5,
        }
    }
}

/// Which operator multiset the first default layer carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer1Variant {
    /// const×2, square×2, const×2, mul×2.
    AsPrinted,
    /// const×2, square×2, id×2, mul×2.
    IdSubstituted,
}

/// The default two-layer operator library used by the benchmark runs.
pub fn default_layer_specs(variant: Layer1Variant) -> Vec<LayerSpec> {
    use OperatorKind::*;
    let layer1_unary = match variant {
        Layer1Variant::AsPrinted => vec![Constant, Constant, Square, Square, Constant, Constant],
        Layer1Variant::IdSubstituted => {
            vec![Constant, Constant, Square, Square, Identity, Identity]
        }
    };
    vec![
        LayerSpec::new(layer1_unary, vec![Multiply, Multiply]),
        LayerSpec::new(vec![Identity, Log, Log, Sqrt, Sqrt], vec![Divide, Divide]),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub input_dim: usize,
    pub skip_inputs: bool,
    pub layers: Vec<Layer>,
    pub output_edges: Vec<Edge>,
}

/// Per-sample forward record: every summation-node and activation value,
/// kept for penalty terms, backprop, and impact analysis. `fed` marks
/// summation nodes with at least one active incoming edge; operators on
/// unfed nodes emit a structural zero instead of evaluating (a pruned-away
/// log must not flag every sample as log-of-zero).
#[derive(Debug, Clone, Default)]
pub struct Trace {
    pub summations: Vec<Vec<Complex>>,
    pub activations: Vec<Vec<Complex>>,
    pub fed: Vec<Vec<bool>>,
    pub output_sum: Complex,
}

impl Trace {
    pub fn for_network(net: &Network) -> Self {
        Trace {
            summations: net
                .layers
                .iter()
                .map(|l| vec![Complex::ZERO; l.spec.summation_count()])
                .collect(),
            activations: net
                .layers
                .iter()
                .map(|l| vec![Complex::ZERO; l.spec.activation_count()])
                .collect(),
            fed: net
                .layers
                .iter()
                .map(|l| vec![false; l.spec.summation_count()])
                .collect(),
            output_sum: Complex::ZERO,
        }
    }
}

/// Result of one forward evaluation.
#[derive(Debug, Clone)]
pub struct Forward {
    pub prediction: f64,
    pub flag: Option<FlagReason>,
    pub trace: Trace,
}

impl Network {
    /// Build a fully connected network with all edges active and weights
    /// drawn from the seeded generator. Deterministic for a fixed seed: the
    /// draw order is layers in order, summation nodes in order, fan-in
    /// sources in order (bias edge after its node's fan-in edges), output
    /// edges last; real part before imaginary part.
    pub fn build(
        input_dim: usize,
        layer_specs: Vec<LayerSpec>,
        skip_inputs: bool,
        init: InitPolicy,
        seed: u64,
    ) -> Result<Network, GraphError> {
        if input_dim == 0 {
            return Err(GraphError::InvalidConfig("input_dim must be >= 1".into()));
        }
        if layer_specs.is_empty() {
            return Err(GraphError::InvalidConfig(
                "network needs at least one layer".into(),
            ));
        }
        for spec in &layer_specs {
            spec.validate()?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draw = |rng: &mut ChaCha8Rng| {
            let re = rng.gen_range(init.re_lo..init.re_hi);
            let im = rng.gen_range(init.im_lo..init.im_hi);
            Complex::new(re, im)
        };

        let mut layers = Vec::with_capacity(layer_specs.len());
        let mut prev_acts = 0usize;
        for (li, spec) in layer_specs.into_iter().enumerate() {
            let fan_in = if li == 0 {
                input_dim
            } else {
                prev_acts + if skip_inputs { input_dim } else { 0 }
            };
            let mut edges = Vec::new();
            for j in 0..spec.summation_count() {
                for i in 0..fan_in {
                    edges.push(Edge {
                        source: EdgeSource::Activation(i),
                        target: j,
                        weight: draw(&mut rng),
                        active: true,
                    });
                }
                if j < spec.unary_ops.len() && spec.unary_ops[j] == OperatorKind::Constant {
                    edges.push(Edge {
                        source: EdgeSource::Bias,
                        target: j,
                        weight: draw(&mut rng),
                        active: true,
                    });
                }
            }
            prev_acts = spec.activation_count();
            layers.push(Layer { spec, edges });
        }

        let out_fan_in = prev_acts + if skip_inputs { input_dim } else { 0 };
        let output_edges = (0..out_fan_in)
            .map(|i| Edge {
                source: EdgeSource::Activation(i),
                target: 0,
                weight: draw(&mut rng),
                active: true,
            })
            .collect();

        Ok(Network {
            input_dim,
            skip_inputs,
            layers,
            output_edges,
        })
    }

    /// Same topology as [`Network::build`] but with every edge inactive at
    /// weight zero. Used to hand-wire reference models.
    pub fn build_inactive(
        input_dim: usize,
        layer_specs: Vec<LayerSpec>,
        skip_inputs: bool,
    ) -> Result<Network, GraphError> {
        let mut net = Self::build(input_dim, layer_specs, skip_inputs, InitPolicy::default(), 0)?;
        for (_, e) in net.edges_mut() {
            e.weight = Complex::ZERO;
            e.active = false;
        }
        Ok(net)
    }

    /// Fan-in width of layer `li`.
    pub fn fan_in(&self, li: usize) -> usize {
        if li == 0 {
            self.input_dim
        } else {
            self.layers[li - 1].spec.activation_count()
                + if self.skip_inputs { self.input_dim } else { 0 }
        }
    }

    /// Fan-in width of the output node.
    pub fn output_fan_in(&self) -> usize {
        self.layers.last().map_or(0, |l| l.spec.activation_count())
            + if self.skip_inputs { self.input_dim } else { 0 }
    }

    pub fn edge_count(&self) -> usize {
        self.layers.iter().map(|l| l.edges.len()).sum::<usize>() + self.output_edges.len()
    }

    pub fn active_edge_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| &l.edges)
            .chain(&self.output_edges)
            .filter(|e| e.active)
            .count()
    }

    /// Edges in global id order: layer edges in layer order, output edges
    /// last. The id order is the coordinate order of gradient vectors and
    /// optimizer state.
    pub fn edges(&self) -> impl Iterator<Item = (usize, &Edge)> {
        self.layers
            .iter()
            .flat_map(|l| &l.edges)
            .chain(&self.output_edges)
            .enumerate()
    }

    pub fn edges_mut(&mut self) -> impl Iterator<Item = (usize, &mut Edge)> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.edges.iter_mut())
            .chain(self.output_edges.iter_mut())
            .enumerate()
    }

    /// Mutable access to a layer edge by (source, target). Panics if absent;
    /// intended for hand-wiring reference networks.
    pub fn layer_edge_mut(&mut self, li: usize, source: EdgeSource, target: usize) -> &mut Edge {
        self.layers[li]
            .edges
            .iter_mut()
            .find(|e| e.source == source && e.target == target)
            .expect("no such edge")
    }

    /// Mutable access to the output edge reading fan-in slot `source_idx`.
    pub fn output_edge_mut(&mut self, source_idx: usize) -> &mut Edge {
        self.output_edges
            .iter_mut()
            .find(|e| e.source == EdgeSource::Activation(source_idx))
            .expect("no such output edge")
    }

    /// Activate an edge and set its weight; shorthand for wiring tests and
    /// reference models.
    pub fn wire_layer(&mut self, li: usize, source: usize, target: usize, w: Complex) {
        let e = self.layer_edge_mut(li, EdgeSource::Activation(source), target);
        e.weight = w;
        e.active = true;
    }

    pub fn wire_bias(&mut self, li: usize, target: usize, w: Complex) {
        let e = self.layer_edge_mut(li, EdgeSource::Bias, target);
        e.weight = w;
        e.active = true;
    }

    pub fn wire_output(&mut self, source: usize, w: Complex) {
        let e = self.output_edge_mut(source);
        e.weight = w;
        e.active = true;
    }

    /// (layer, summation-node) positions of every Log/Sqrt operator whose
    /// argument carries the branch-cut penalty.
    pub fn log_sqrt_nodes(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (li, layer) in self.layers.iter().enumerate() {
            for (j, op) in layer.spec.unary_ops.iter().enumerate() {
                if matches!(op, OperatorKind::Log | OperatorKind::Sqrt) {
                    out.push((li, j));
                }
            }
        }
        out
    }

    /// Like [`Network::log_sqrt_nodes`] but restricted to nodes that still
    /// have an active incoming edge; unfed operators are structurally absent
    /// from the model and carry no argument penalty.
    pub fn fed_log_sqrt_nodes(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (li, layer) in self.layers.iter().enumerate() {
            for (j, op) in layer.spec.unary_ops.iter().enumerate() {
                if matches!(op, OperatorKind::Log | OperatorKind::Sqrt)
                    && layer.edges.iter().any(|e| {
                        e.active && e.target == j && matches!(e.source, EdgeSource::Activation(_))
                    })
                {
                    out.push((li, j));
                }
            }
        }
        out
    }

    /// Evaluate the network on one input row, reusing `trace` buffers.
    /// Returns the real-projected prediction, or a flag when an operator
    /// guard fires or a non-finite value appears; flagged samples contribute
    /// nothing to losses or gradients.
    pub fn forward_into(&self, inputs: &[f64], trace: &mut Trace) -> (f64, Option<FlagReason>) {
        debug_assert_eq!(inputs.len(), self.input_dim);
        let mut fan_in: Vec<Complex> = inputs.iter().map(|&x| Complex::from_real(x)).collect();

        for (li, layer) in self.layers.iter().enumerate() {
            let m = layer.spec.unary_ops.len();
            let z = &mut trace.summations[li];
            z.iter_mut().for_each(|v| *v = Complex::ZERO);
            let fed = &mut trace.fed[li];
            fed.iter_mut().for_each(|f| *f = false);
            let mut bias = vec![Complex::ZERO; m];
            for e in &layer.edges {
                if !e.active {
                    continue;
                }
                match e.source {
                    EdgeSource::Activation(i) => {
                        z[e.target] += e.weight * fan_in[i];
                        fed[e.target] = true;
                    }
                    EdgeSource::Bias => {
                        bias[e.target] += e.weight;
                        fed[e.target] = true;
                    }
                }
            }

            let h = &mut trace.activations[li];
            for (j, op) in layer.spec.unary_ops.iter().enumerate() {
                h[j] = match op {
                    OperatorKind::Identity | OperatorKind::Square => {
                        real_projected_unary(*op, z[j])
                    }
                    OperatorKind::Constant => bias[j],
                    OperatorKind::Log if !fed[j] => Complex::ZERO,
                    OperatorKind::Log => match principal_log(z[j]) {
                        Ok(v) => v,
                        Err(e) => return (f64::NAN, Some(e.into())),
                    },
                    OperatorKind::Sqrt if !fed[j] => Complex::ZERO,
                    OperatorKind::Sqrt => match principal_sqrt(z[j]) {
                        Ok(v) => v,
                        Err(e) => return (f64::NAN, Some(e.into())),
                    },
                    other => unreachable!("{other} is not unary"),
                };
            }
            for (k, op) in layer.spec.binary_ops.iter().enumerate() {
                let (jl, jr) = (m + 2 * k, m + 2 * k + 1);
                let zl = z[jl];
                let zr = z[jr];
                h[m + k] = match op {
                    OperatorKind::Multiply => real_projected_binary(*op, zl, zr),
                    OperatorKind::Divide if !(fed[jl] && fed[jr]) => Complex::ZERO,
                    OperatorKind::Divide => match surrogate_div(zl, zr) {
                        Ok(v) => v,
                        Err(e) => return (f64::NAN, Some(e.into())),
                    },
                    other => unreachable!("{other} is not binary"),
                };
            }

            fan_in.clear();
            fan_in.extend_from_slice(h);
            if self.skip_inputs {
                fan_in.extend(inputs.iter().map(|&x| Complex::from_real(x)));
            }
        }

        let mut s = Complex::ZERO;
        for e in &self.output_edges {
            if e.active {
                if let EdgeSource::Activation(i) = e.source {
                    s += e.weight * fan_in[i];
                }
            }
        }
        trace.output_sum = s;

        for layer_vals in trace.summations.iter().chain(trace.activations.iter()) {
            for v in layer_vals {
                if !v.is_finite() {
                    return (f64::NAN, Some(FlagReason::NonFinite));
                }
            }
        }
        if !s.is_finite() {
            return (f64::NAN, Some(FlagReason::NonFinite));
        }
        (s.re, None)
    }

    /// Convenience wrapper allocating a fresh trace.
    pub fn forward(&self, inputs: &[f64]) -> Forward {
        let mut trace = Trace::for_network(self);
        let (prediction, flag) = self.forward_into(inputs, &mut trace);
        Forward {
            prediction,
            flag,
            trace,
        }
    }

    /// Structural sanity check for deserialized networks.
    pub fn validate(&self) -> Result<(), GraphError> {
        if self.input_dim == 0 || self.layers.is_empty() {
            return Err(GraphError::InvalidConfig("empty network".into()));
        }
        for (li, layer) in self.layers.iter().enumerate() {
            layer.spec.validate()?;
            let fan_in = self.fan_in(li);
            for e in &layer.edges {
                if e.target >= layer.spec.summation_count() {
                    return Err(GraphError::InvalidConfig(format!(
                        "edge targets node {} beyond layer {li}",
                        e.target
                    )));
                }
                match e.source {
                    EdgeSource::Activation(i) if i >= fan_in => {
                        return Err(GraphError::InvalidConfig(format!(
                            "edge reads fan-in slot {i} beyond layer {li} width {fan_in}"
                        )));
                    }
                    EdgeSource::Bias => {
                        let is_const = e.target < layer.spec.unary_ops.len()
                            && layer.spec.unary_ops[e.target] == OperatorKind::Constant;
                        if !is_const {
                            return Err(GraphError::InvalidConfig(format!(
                                "bias edge on non-constant node {} in layer {li}",
                                e.target
                            )));
                        }
                    }
                    _ => {}
                }
            }
        }
        let out_fan_in = self.output_fan_in();
        for e in &self.output_edges {
            match e.source {
                EdgeSource::Activation(i) if i < out_fan_in => {}
                _ => {
                    return Err(GraphError::InvalidConfig(
                        "output edge reads beyond the final fan-in".into(),
                    ))
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("network serialization cannot fail")
    }

    pub fn from_json(s: &str) -> Result<Network, GraphError> {
        let net: Network = serde_json::from_str(s)
            .map_err(|e| GraphError::InvalidConfig(format!("bad network JSON: {e}")))?;
        net.validate()?;
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_library_counts() {
        let specs = default_layer_specs(Layer1Variant::AsPrinted);
        // layer 1: m=6 unary (4 const + 2 square), n=2 binary -> 10 summation
        // nodes, 8 activations; layer 2: m=5, n=2 -> 9 and 7.
        assert_eq!(specs[0].summation_count(), 10);
        assert_eq!(specs[0].activation_count(), 8);
        assert_eq!(specs[1].summation_count(), 9);
        assert_eq!(specs[1].activation_count(), 7);

        let net = Network::build(1, specs, true, InitPolicy::default(), 0).unwrap();
        // layer 1: 10 nodes x fan-in 1 + 4 bias edges = 14
        assert_eq!(net.layers[0].edges.len(), 14);
        // layer 2: 9 nodes x fan-in (8 acts + 1 skip) = 81
        assert_eq!(net.layers[1].edges.len(), 81);
        // output: 7 acts + 1 skip
        assert_eq!(net.output_edges.len(), 8);
        assert_eq!(net.edge_count(), 14 + 81 + 8);
        assert_eq!(net.active_edge_count(), net.edge_count());
    }

    #[test]
    fn smallest_network() {
        let spec = LayerSpec::new(vec![OperatorKind::Identity], vec![]);
        let net = Network::build(2, vec![spec], false, InitPolicy::default(), 7).unwrap();
        assert_eq!(net.layers[0].edges.len(), 2);
        assert_eq!(net.output_edges.len(), 1);
        assert_eq!(net.edge_count(), 3);
    }

    #[test]
    fn build_is_deterministic() {
        let specs = default_layer_specs(Layer1Variant::AsPrinted);
        let a = Network::build(1, specs.clone(), true, InitPolicy::default(), 42).unwrap();
        let b = Network::build(1, specs, true, InitPolicy::default(), 42).unwrap();
        for ((_, ea), (_, eb)) in a.edges().zip(b.edges()) {
            assert_eq!(ea.weight.re.to_bits(), eb.weight.re.to_bits());
            assert_eq!(ea.weight.im.to_bits(), eb.weight.im.to_bits());
        }
    }

    #[test]
    fn empty_library_rejected() {
        let spec = LayerSpec::new(vec![], vec![]);
        let e = Network::build(1, vec![spec], true, InitPolicy::default(), 0);
        assert!(matches!(e, Err(GraphError::InvalidConfig(_))));
    }

    fn identity_chain() -> Network {
        let spec = LayerSpec::new(vec![OperatorKind::Identity], vec![]);
        let mut net = Network::build_inactive(1, vec![spec], false).unwrap();
        net.wire_layer(0, 0, 0, Complex::ONE);
        net.wire_output(0, Complex::ONE);
        net
    }

    #[test]
    fn forward_identity_chain() {
        let net = identity_chain();
        let f = net.forward(&[3.0]);
        assert_eq!(f.prediction, 3.0);
        assert!(f.flag.is_none());
    }

    #[test]
    fn forward_projects_imaginary_input_weight() {
        let mut net = identity_chain();
        net.layer_edge_mut(0, EdgeSource::Activation(0), 0).weight = Complex::I;
        // Identity real-projects Re(i*3) = 0.
        let f = net.forward(&[3.0]);
        assert_eq!(f.prediction, 0.0);
    }

    /// 1/(x + a) with a = 0.5: constant carried by a layer-1 const node.
    fn reciprocal_model(a: Complex) -> Network {
        let l1 = LayerSpec::new(vec![OperatorKind::Constant], vec![]);
        let l2 = LayerSpec::new(vec![], vec![OperatorKind::Divide]);
        let mut net = Network::build_inactive(1, vec![l1, l2], true).unwrap();
        net.wire_bias(0, 0, Complex::ONE);
        // numerator node 0: 1·const ; denominator node 1: 1·x + a·const
        net.wire_layer(1, 0, 0, Complex::ONE);
        net.wire_layer(1, 1, 1, Complex::ONE); // skip input x
        net.wire_layer(1, 0, 1, a);
        net.wire_output(0, Complex::ONE);
        net
    }

    #[test]
    fn forward_reciprocal() {
        let net = reciprocal_model(Complex::from_real(0.5));
        let f = net.forward(&[1.0]);
        assert!((f.prediction - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn forward_flags_division_near_zero() {
        let net = reciprocal_model(Complex::ZERO);
        let f = net.forward(&[0.0]);
        assert_eq!(f.flag, Some(FlagReason::DivisionNearZero));
        assert!(f.prediction.is_nan());
    }

    #[test]
    fn active_edge_count_tracks_deactivation() {
        let mut net = Network::build(
            1,
            default_layer_specs(Layer1Variant::AsPrinted),
            true,
            InitPolicy::default(),
            3,
        )
        .unwrap();
        let total = net.edge_count();
        assert_eq!(net.active_edge_count(), total);
        for (id, e) in net.edges_mut() {
            if id < 5 {
                e.active = false;
            }
        }
        assert_eq!(net.active_edge_count(), total - 5);
    }

    #[test]
    fn zero_weight_edge_deactivation_is_invisible() {
        let specs = default_layer_specs(Layer1Variant::AsPrinted);
        let mut net = Network::build(1, specs, true, InitPolicy::default(), 11).unwrap();
        // zero one edge's weight, compare predictions with it active/inactive
        let probe: Vec<f64> = (0..32).map(|i| -2.0 + 0.129 * i as f64).collect();
        let id0 = 20usize;
        for (id, e) in net.edges_mut() {
            if id == id0 {
                e.weight = Complex::ZERO;
            }
        }
        let before: Vec<f64> = probe.iter().map(|&x| net.forward(&[x]).prediction).collect();
        for (id, e) in net.edges_mut() {
            if id == id0 {
                e.active = false;
            }
        }
        let after: Vec<f64> = probe.iter().map(|&x| net.forward(&[x]).prediction).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn skip_connections_represent_identity() {
        // two-layer network representing f(x) = x through a skip edge into a
        // final identity node
        let specs = default_layer_specs(Layer1Variant::AsPrinted);
        let mut net = Network::build_inactive(1, specs, true).unwrap();
        // layer-2 identity node is summation node 0; skip input is fan-in
        // slot 8 (after the 8 layer-1 activations)
        net.wire_layer(1, 8, 0, Complex::ONE);
        net.wire_output(0, Complex::ONE);
        for x in [-2.0, -0.3, 0.0, 1.7] {
            assert_eq!(net.forward(&[x]).prediction, x);
        }
    }

    #[test]
    fn real_init_real_ops_keep_trace_real() {
        use OperatorKind::*;
        let specs = vec![
            LayerSpec::new(vec![Constant, Square], vec![Multiply]),
            LayerSpec::new(vec![Identity], vec![Multiply]),
        ];
        let mut net = Network::build(2, specs, true, InitPolicy::default(), 5).unwrap();
        for (_, e) in net.edges_mut() {
            e.weight.im = 0.0;
        }
        let f = net.forward(&[0.7, -1.2]);
        for layer in f.trace.activations.iter().chain(f.trace.summations.iter()) {
            for v in layer {
                assert_eq!(v.im, 0.0);
            }
        }
    }

    #[test]
    fn json_round_trip_is_lossless() {
        let specs = default_layer_specs(Layer1Variant::IdSubstituted);
        let net = Network::build(2, specs, true, InitPolicy::default(), 99).unwrap();
        let restored = Network::from_json(&net.to_json()).unwrap();
        assert_eq!(net.input_dim, restored.input_dim);
        for ((_, a), (_, b)) in net.edges().zip(restored.edges()) {
            assert_eq!(a.weight.re.to_bits(), b.weight.re.to_bits());
            assert_eq!(a.weight.im.to_bits(), b.weight.im.to_bits());
            assert_eq!(a.active, b.active);
        }
    }
}
