//! Frequency-response surrogate: a linear broadband trend plus a sum of
//! resonant terms `A_i / ((ω − h_i(d))² + γ_i)`, where each resonance
//! location `h_i(d)` is a small two-layer symbolic subnetwork over the
//! damage indicator `d`. Fitting reuses the three-phase optimizer with a
//! global minimum-edge floor across all subnetworks; pruning can delete
//! entire resonant terms.

use crate::autodiff::{backprop_sample, GradientVector};
use crate::complex::{Complex, OperatorKind, POLE_EPS};
use crate::expr::{extract, Expr, ExtractError, IM_TOLERANCE};
use crate::graph::{FlagReason, GraphError, InitPolicy, LayerSpec, Network, Trace};
use crate::train::{
    cascade_cleanup, threshold_prune, AdamState, ConvergenceSpec, EpochRecord, History,
    LossSpec, PhaseSchedule, PlateauSpec, PruneEvent, PruneKind, PrunePolicy, TrainError,
};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Error)]
pub enum FrfError {
    #[error("need at least {min} samples, got {got}")]
    InsufficientData { min: usize, got: usize },
    #[error("peak window is empty or outside the data range")]
    InvalidWindow,
    #[error("synthetic generator requires gamma > 0 for every resonance")]
    NonPositiveGamma,
    #[error("csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Extract(#[from] ExtractError),
}

/// One measurement tuple: excitation frequency (kHz), damage indicator
/// (percent mass loss), inertance magnitude (linear scale).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrfSample {
    pub omega: f64,
    pub d: f64,
    pub y: f64,
}

/// Sample set with parallel repetition ids (several sweeps per condition).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrfDataset {
    pub samples: Vec<FrfSample>,
    pub rep: Vec<u32>,
}

impl FrfDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sorted distinct damage levels.
    pub fn damage_levels(&self) -> Vec<f64> {
        let mut levels: Vec<f64> = Vec::new();
        for s in &self.samples {
            if !levels.iter().any(|&l| l == s.d) {
                levels.push(s.d);
            }
        }
        levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
        levels
    }

    /// CSV with header `omega_khz,damage_pct,magnitude_linear,repetition_id`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("omega_khz,damage_pct,magnitude_linear,repetition_id\n");
        for (s, r) in self.samples.iter().zip(&self.rep) {
            out.push_str(&format!("{:.16e},{:.16e},{:.16e},{r}\n", s.omega, s.d, s.y));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<FrfDataset, FrfError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| FrfError::Csv("empty csv".into()))?;
        let expect = "omega_khz,damage_pct,magnitude_linear,repetition_id";
        if header.trim() != expect {
            return Err(FrfError::Csv(format!(
                "expected header {expect}, got {header}"
            )));
        }
        let mut out = FrfDataset::default();
        for (ln, line) in lines.enumerate() {
            let parts: Vec<&str> = line.split(',').map(str::trim).collect();
            if parts.len() != 4 {
                return Err(FrfError::Csv(format!("line {}: expected 4 columns", ln + 2)));
            }
            let f = |s: &str| -> Result<f64, FrfError> {
                s.parse()
                    .map_err(|e| FrfError::Csv(format!("line {}: {e}", ln + 2)))
            };
            out.samples.push(FrfSample {
                omega: f(parts[0])?,
                d: f(parts[1])?,
                y: f(parts[2])?,
            });
            out.rep.push(
                parts[3]
                    .parse()
                    .map_err(|e| FrfError::Csv(format!("line {}: {e}", ln + 2)))?,
            );
        }
        Ok(out)
    }
}

/// Operator library of the resonance-shift subnetworks: one layer of
/// {id, const, square} unary plus {mul} binary, stacked twice.
pub fn shift_subnet_specs() -> Vec<LayerSpec> {
    use OperatorKind::*;
    let layer = LayerSpec::new(vec![Identity, Constant, Square], vec![Multiply]);
    vec![layer.clone(), layer]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrfTerm {
    pub amp: f64,
    pub gamma: f64,
    pub subnet: Network,
    pub active: bool,
}

impl FrfTerm {
    /// Resonance location at damage level `d`.
    pub fn shift(&self, d: f64) -> Result<f64, FlagReason> {
        let f = self.subnet.forward(&[d]);
        match f.flag {
            None => Ok(f.prediction),
            Some(r) => Err(r),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrfModel {
    pub trend_slope: f64,
    pub trend_intercept: f64,
    pub terms: Vec<FrfTerm>,
}

impl FrfModel {
    pub fn active_terms(&self) -> usize {
        self.terms.iter().filter(|t| t.active).count()
    }

    pub fn active_subnet_edges(&self) -> usize {
        self.terms
            .iter()
            .filter(|t| t.active)
            .map(|t| t.subnet.active_edge_count())
            .sum()
    }

    /// Real pole locations at damage level `d`: each term with γ < 0 has
    /// denominator roots at h(d) ± √(−γ).
    pub fn pole_locations(&self, d: f64) -> Vec<f64> {
        let mut out = Vec::new();
        for t in self.terms.iter().filter(|t| t.active) {
            if t.gamma < 0.0 {
                if let Ok(h) = t.shift(d) {
                    let w = (-t.gamma).sqrt();
                    out.push(h - w);
                    out.push(h + w);
                }
            }
        }
        out.sort_by(|a, b| a.partial_cmp(b).unwrap());
        out
    }

    /// Extracted shift expressions, one per active term.
    pub fn export(&self, precision: usize) -> Result<FrfModelExport, ExtractError> {
        let mut terms = Vec::new();
        for t in self.terms.iter().filter(|t| t.active) {
            let ast = extract(&t.subnet, IM_TOLERANCE)?;
            let text = crate::expr::render(&ast, precision);
            terms.push(FrfTermExport {
                amp: t.amp,
                gamma: t.gamma,
                shift_text: text,
                shift_ast: ast,
            });
        }
        Ok(FrfModelExport {
            trend_slope: self.trend_slope,
            trend_intercept: self.trend_intercept,
            terms,
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FrfTermExport {
    pub amp: f64,
    pub gamma: f64,
    pub shift_text: String,
    pub shift_ast: Expr,
}

#[derive(Debug, Clone, Serialize)]
pub struct FrfModelExport {
    pub trend_slope: f64,
    pub trend_intercept: f64,
    pub terms: Vec<FrfTermExport>,
}

/// Evaluate the surrogate at one point. Denominators follow the same
/// guard policy as network division: a near-zero denominator flags the
/// sample instead of producing infinities.
pub fn frf_forward(m: &FrfModel, omega: f64, d: f64) -> Result<f64, FlagReason> {
    let mut acc = m.trend_slope * omega + m.trend_intercept;
    for t in m.terms.iter().filter(|t| t.active) {
        let h = t.shift(d)?;
        let den = (omega - h) * (omega - h) + t.gamma;
        if den.abs() < POLE_EPS {
            return Err(FlagReason::DivisionNearZero);
        }
        acc += t.amp / den;
    }
    if acc.is_finite() {
        Ok(acc)
    } else {
        Err(FlagReason::NonFinite)
    }
}

// ---------------------------------------------------------------------------
// Synthetic generator

/// Ground-truth generator spec: trend plus resonances with polynomial
/// damage shifts; all γ must be positive so the generator is finite.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub trend_slope: f64,
    pub trend_intercept: f64,
    pub resonances: Vec<SynthResonance>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthResonance {
    pub amp: f64,
    pub gamma: f64,
    /// Shift polynomial coefficients in d: h(d) = c[0] + c[1]·d + …
    pub shift: Vec<f64>,
}

impl SynthResonance {
    pub fn shift_at(&self, d: f64) -> f64 {
        self.shift
            .iter()
            .rev()
            .fold(0.0, |acc, &c| acc * d + c)
    }
}

impl SynthSpec {
    pub fn value(&self, omega: f64, d: f64) -> f64 {
        let mut acc = self.trend_slope * omega + self.trend_intercept;
        for r in &self.resonances {
            let dw = omega - r.shift_at(d);
            acc += r.amp / (dw * dw + r.gamma);
        }
        acc
    }
}

/// Sample the generator on a uniform ω grid over [0, 2] kHz per damage
/// level, with additive Gaussian magnitude noise clipped at zero.
pub fn synth_frf(
    spec: &SynthSpec,
    damage_levels: &[f64],
    noise_sd: f64,
    n_per_level: usize,
    seed: u64,
) -> Result<FrfDataset, FrfError> {
    if spec.resonances.iter().any(|r| r.gamma <= 0.0) {
        return Err(FrfError::NonPositiveGamma);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise_sd.max(f64::MIN_POSITIVE)).expect("valid sd");
    let mut out = FrfDataset::default();
    for &d in damage_levels {
        for k in 0..n_per_level {
            let omega = 2.0 * (k as f64 + 0.5) / n_per_level as f64;
            let clean = spec.value(omega, d);
            let y = if noise_sd > 0.0 {
                (clean + normal.sample(&mut rng)).max(0.0)
            } else {
                clean
            };
            out.samples.push(FrfSample { omega, d, y });
            out.rep.push(0);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Peak analysis

#[derive(Debug, Clone, Copy)]
pub enum PeakSource<'a> {
    Data(&'a FrfDataset),
    Model(&'a FrfModel),
}

/// Evaluation grid step for model-side peak detection (kHz).
pub const PEAK_GRID_STEP: f64 = 1e-4;

/// Mean peak frequency inside `window` at one damage level: per repetition
/// the argmax of the magnitude over the window (for a model, the argmax
/// over a fixed evaluation grid), averaged across repetitions.
pub fn detect_peak(
    source: PeakSource<'_>,
    window: (f64, f64),
    damage_level: f64,
) -> Result<f64, FrfError> {
    let (lo, hi) = window;
    if !(lo < hi) || lo < 0.0 {
        return Err(FrfError::InvalidWindow);
    }
    match source {
        PeakSource::Data(data) => {
            let mut by_rep: Vec<(u32, f64, f64)> = Vec::new(); // rep, best y, best omega
            for (s, &r) in data.samples.iter().zip(&data.rep) {
                if s.d != damage_level || s.omega < lo || s.omega > hi {
                    continue;
                }
                match by_rep.iter_mut().find(|(rep, _, _)| *rep == r) {
                    Some(slot) => {
                        if s.y > slot.1 {
                            slot.1 = s.y;
                            slot.2 = s.omega;
                        }
                    }
                    None => by_rep.push((r, s.y, s.omega)),
                }
            }
            if by_rep.is_empty() {
                return Err(FrfError::InvalidWindow);
            }
            Ok(by_rep.iter().map(|(_, _, w)| w).sum::<f64>() / by_rep.len() as f64)
        }
        PeakSource::Model(model) => {
            let n = ((hi - lo) / PEAK_GRID_STEP).ceil() as usize;
            let mut best = f64::NEG_INFINITY;
            let mut best_w = lo;
            for k in 0..=n {
                let w = lo + k as f64 * PEAK_GRID_STEP;
                if w > hi {
                    break;
                }
                if let Ok(v) = frf_forward(model, w, damage_level) {
                    if v > best {
                        best = v;
                        best_w = w;
                    }
                }
            }
            if best.is_finite() {
                Ok(best_w)
            } else {
                Err(FrfError::InvalidWindow)
            }
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PeakRow {
    pub damage: f64,
    pub window_lo: f64,
    pub window_hi: f64,
    pub measured: f64,
    pub predicted: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PeakReport {
    pub rows: Vec<PeakRow>,
    pub warnings: Vec<String>,
}

impl PeakReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("damage_pct,window_lo_khz,window_hi_khz,measured_peak_khz,predicted_peak_khz\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.damage, r.window_lo, r.window_hi, r.measured, r.predicted
            ));
        }
        out
    }
}

/// Measured vs predicted mean peak per (damage level, window); levels
/// missing from the data are skipped with a warning.
pub fn peak_report(
    model: &FrfModel,
    data: &FrfDataset,
    windows: &[(f64, f64)],
) -> Result<PeakReport, FrfError> {
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for &window in windows {
        for &level in &data.damage_levels() {
            let measured = match detect_peak(PeakSource::Data(data), window, level) {
                Ok(v) => v,
                Err(_) => {
                    warnings.push(format!(
                        "level {level}: no data in window [{}, {}]",
                        window.0, window.1
                    ));
                    continue;
                }
            };
            let predicted = detect_peak(PeakSource::Model(model), window, level)?;
            rows.push(PeakRow {
                damage: level,
                window_lo: window.0,
                window_hi: window.1,
                measured,
                predicted,
            });
        }
    }
    Ok(PeakReport { rows, warnings })
}

// ---------------------------------------------------------------------------
// Fitting

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrfConfig {
    pub n_terms: usize,
    pub schedule: PhaseSchedule,
    pub init: InitPolicy,
    /// Uniform init range for the resonance amplitudes A_i.
    pub amp_init: (f64, f64),
    /// Uniform init range for the resonance widths γ_i.
    pub gamma_init: (f64, f64),
}

impl Default for FrfConfig {
    fn default() -> Self {
        let mut schedule = PhaseSchedule::benchmark_defaults();
        schedule.phase2.pruning = Some(PrunePolicy::ImpactIterative {
            interval_epochs: 10_000,
            fraction: 0.1,
            min_edges: 50,
        });
        FrfConfig {
            n_terms: 20,
            schedule,
            init: InitPolicy {
                re_lo: -0.6,
                re_hi: 0.6,
                im_lo: -0.3,
                im_hi: 0.3,
            },
            amp_init: (0.005, 0.1),
            gamma_init: (0.05, 0.4),
        }
    }
}

/// Fresh model with `n_terms` resonant terms and randomly initialized
/// subnetworks.
pub fn init_model(cfg: &FrfConfig, input_seed: u64) -> Result<FrfModel, FrfError> {
    let mut rng = ChaCha8Rng::seed_from_u64(crate::bench::substream(input_seed, 11));
    let mut terms = Vec::with_capacity(cfg.n_terms);
    for i in 0..cfg.n_terms {
        let subnet = Network::build(
            1,
            shift_subnet_specs(),
            true,
            cfg.init,
            crate::bench::substream(input_seed, 100 + i as u64),
        )?;
        terms.push(FrfTerm {
            amp: rng.gen_range(cfg.amp_init.0..cfg.amp_init.1),
            gamma: rng.gen_range(cfg.gamma_init.0..cfg.gamma_init.1),
            subnet,
            active: true,
        });
    }
    Ok(FrfModel {
        trend_slope: 0.0,
        trend_intercept: 0.0,
        terms,
    })
}

/// Scratch state for one fit.
struct FitState {
    levels: Vec<f64>,
    level_of: Vec<usize>,
    traces: Vec<Vec<Trace>>,       // [term][level]
    h: Vec<Vec<f64>>,              // [term][level]
    h_ok: Vec<Vec<bool>>,          // [term][level]
    den: Vec<f64>,                 // [sample*n_terms] scratch
    preds: Vec<f64>,
    valid: Vec<bool>,
    subnet_grads: Vec<GradientVector>,
    dh: Vec<Vec<f64>>,             // [term][level] adjoint of the shift
}

struct CoordLayout {
    n_terms: usize,
    subnet_off: Vec<usize>,
    total: usize,
}

impl CoordLayout {
    fn new(model: &FrfModel) -> Self {
        let n = model.terms.len();
        let mut off = Vec::with_capacity(n);
        let mut acc = 2 + 2 * n;
        for t in &model.terms {
            off.push(acc);
            acc += 2 * t.subnet.edge_count();
        }
        CoordLayout {
            n_terms: n,
            subnet_off: off,
            total: acc,
        }
    }

    fn amp(&self, i: usize) -> usize {
        2 + i
    }

    fn gamma(&self, i: usize) -> usize {
        2 + self.n_terms + i
    }
}

struct FrfLoss {
    total: f64,
    mse: f64,
    l1_mass: f64,
    im_mass: f64,
    flagged: usize,
    valid: usize,
}

/// Loss (and optionally gradient over the flat coordinate vector) of the
/// model on the dataset. Subnet forwards are cached per damage level.
fn frf_loss_and_grad(
    model: &FrfModel,
    data: &FrfDataset,
    spec: &LossSpec,
    st: &mut FitState,
    grad: Option<&mut Vec<f64>>,
    layout: &CoordLayout,
) -> Result<FrfLoss, TrainError> {
    let n_samples = data.len();
    let n_terms = model.terms.len();

    // per-level subnet evaluation
    for (i, t) in model.terms.iter().enumerate() {
        for (l, &d) in st.levels.iter().enumerate() {
            if !t.active {
                st.h_ok[i][l] = false;
                continue;
            }
            let (v, flag) = t.subnet.forward_into(&[d], &mut st.traces[i][l]);
            st.h[i][l] = v;
            st.h_ok[i][l] = flag.is_none();
        }
    }

    let mut sq = 0.0;
    let mut n_valid = 0usize;
    for (s, sample) in data.samples.iter().enumerate() {
        let l = st.level_of[s];
        let mut acc = model.trend_slope * sample.omega + model.trend_intercept;
        let mut ok = true;
        for (i, t) in model.terms.iter().enumerate() {
            if !t.active {
                continue;
            }
            if !st.h_ok[i][l] {
                ok = false;
                break;
            }
            let dw = sample.omega - st.h[i][l];
            let den = dw * dw + t.gamma;
            st.den[s * n_terms + i] = den;
            if den.abs() < POLE_EPS {
                ok = false;
                break;
            }
            acc += t.amp / den;
        }
        let ok = ok && acc.is_finite();
        st.preds[s] = acc;
        st.valid[s] = ok;
        if ok {
            let r = sample.y - acc;
            sq += r * r;
            n_valid += 1;
        }
    }
    if n_valid == 0 {
        return Err(TrainError::EmptyBatch);
    }
    let mse = sq / n_valid as f64;
    let data_term = match spec.data_term {
        crate::train::DataTerm::Mse => mse,
        crate::train::DataTerm::RelativeMse => {
            let y2 = data
                .samples
                .iter()
                .enumerate()
                .filter(|(s, _)| st.valid[*s])
                .map(|(_, smp)| smp.y * smp.y)
                .sum::<f64>()
                / n_valid as f64;
            mse / (y2 + 1e-8)
        }
    };

    let mut l1_mass = 0.0;
    let mut im_mass = 0.0;
    for t in model.terms.iter().filter(|t| t.active) {
        for (_, e) in t.subnet.edges() {
            if e.active {
                l1_mass += e.weight.abs();
                im_mass += e.weight.im * e.weight.im;
            }
        }
    }
    let total = data_term + spec.lambda_l1 * l1_mass + spec.lambda_im * im_mass;
    let out = FrfLoss {
        total,
        mse,
        l1_mass,
        im_mass,
        flagged: n_samples - n_valid,
        valid: n_valid,
    };

    let Some(grad) = grad else {
        return Ok(out);
    };
    grad.iter_mut().for_each(|g| *g = 0.0);
    for v in st.dh.iter_mut() {
        v.iter_mut().for_each(|g| *g = 0.0);
    }
    let dscale = match spec.data_term {
        crate::train::DataTerm::Mse => 2.0 / n_valid as f64,
        crate::train::DataTerm::RelativeMse => {
            let y2 = data
                .samples
                .iter()
                .enumerate()
                .filter(|(s, _)| st.valid[*s])
                .map(|(_, smp)| smp.y * smp.y)
                .sum::<f64>()
                / n_valid as f64;
            2.0 / (n_valid as f64 * (y2 + 1e-8))
        }
    };
    for (s, sample) in data.samples.iter().enumerate() {
        if !st.valid[s] {
            continue;
        }
        let l = st.level_of[s];
        let c = dscale * (st.preds[s] - sample.y);
        grad[0] += c * sample.omega;
        grad[1] += c;
        for (i, t) in model.terms.iter().enumerate() {
            if !t.active {
                continue;
            }
            let den = st.den[s * n_terms + i];
            let dw = sample.omega - st.h[i][l];
            grad[layout.amp(i)] += c / den;
            grad[layout.gamma(i)] += -c * t.amp / (den * den);
            st.dh[i][l] += c * t.amp * 2.0 * dw / (den * den);
        }
    }
    for (i, t) in model.terms.iter().enumerate() {
        if !t.active {
            continue;
        }
        let g = &mut st.subnet_grads[i];
        g.d.iter_mut().for_each(|p| *p = (0.0, 0.0));
        for (l, &d) in st.levels.iter().enumerate() {
            if st.dh[i][l] != 0.0 && st.h_ok[i][l] {
                backprop_sample(&t.subnet, &[d], &st.traces[i][l], st.dh[i][l], 0.0, g);
            }
        }
        // weight penalties
        for (id, e) in t.subnet.edges() {
            if !e.active {
                continue;
            }
            let mag = e.weight.abs();
            if spec.lambda_l1 > 0.0 && mag > 0.0 {
                g.d[id].0 += spec.lambda_l1 * e.weight.re / mag;
                g.d[id].1 += spec.lambda_l1 * e.weight.im / mag;
            }
            if spec.lambda_im > 0.0 {
                g.d[id].1 += 2.0 * spec.lambda_im * e.weight.im;
            }
        }
        let base = layout.subnet_off[i];
        for (id, _) in t.subnet.edges() {
            grad[base + 2 * id] = g.d[id].0;
            grad[base + 2 * id + 1] = g.d[id].1;
        }
    }
    Ok(out)
}

fn frf_adam_step(
    adam: &mut AdamState,
    model: &mut FrfModel,
    grad: &[f64],
    lr: f64,
    layout: &CoordLayout,
) -> Result<(), TrainError> {
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient);
    }
    adam.begin_step();
    model.trend_slope -= adam.coord_step(0, grad[0], lr);
    model.trend_intercept -= adam.coord_step(1, grad[1], lr);
    for i in 0..model.terms.len() {
        if !model.terms[i].active {
            continue;
        }
        let ga = grad[layout.amp(i)];
        let gg = grad[layout.gamma(i)];
        model.terms[i].amp -= adam.coord_step(layout.amp(i), ga, lr);
        model.terms[i].gamma -= adam.coord_step(layout.gamma(i), gg, lr);
        let base = layout.subnet_off[i];
        for (id, e) in model.terms[i].subnet.edges_mut() {
            if !e.active {
                continue;
            }
            e.weight.re -= adam.coord_step(base + 2 * id, grad[base + 2 * id], lr);
            e.weight.im -= adam.coord_step(base + 2 * id + 1, grad[base + 2 * id + 1], lr);
        }
    }
    Ok(())
}

/// A term dies when its amplitude is pruned or its subnetwork loses every
/// active output edge.
fn cleanup_terms(model: &mut FrfModel) {
    for t in &mut model.terms {
        if t.active && !t.subnet.output_edges.iter().any(|e| e.active) {
            t.active = false;
        }
        if !t.active {
            t.amp = 0.0;
            for (_, e) in t.subnet.edges_mut() {
                e.active = false;
                e.weight = Complex::ZERO;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Candidate {
    Edge { term: usize, edge: usize },
    Amp(usize),
}

/// Global impact pruning across all subnetworks plus term amplitudes,
/// respecting the global minimum-edge floor including cascade fallout.
fn frf_impact_prune(
    model: &mut FrfModel,
    data: &FrfDataset,
    spec: &LossSpec,
    st: &mut FitState,
    layout: &CoordLayout,
    fraction: f64,
    min_edges: usize,
) -> Result<usize, TrainError> {
    let active0 = model.active_subnet_edges();
    if active0 <= min_edges {
        return Ok(0);
    }
    let cap = ((active0 as f64) * fraction).floor() as usize;
    if cap == 0 {
        return Ok(0);
    }
    let base = frf_loss_and_grad(model, data, spec, st, None, layout)?.total;

    let mut candidates: Vec<(f64, f64, usize, Candidate)> = Vec::new();
    let edge_list: Vec<(usize, usize, f64)> = model
        .terms
        .iter()
        .enumerate()
        .filter(|(_, t)| t.active)
        .flat_map(|(i, t)| {
            t.subnet
                .edges()
                .filter(|(_, e)| e.active)
                .map(move |(id, e)| (i, id, e.weight.abs()))
                .collect::<Vec<_>>()
        })
        .collect();
    for (order, &(i, id, mag)) in edge_list.iter().enumerate() {
        let saved = {
            let mut saved = Complex::ZERO;
            for (eid, e) in model.terms[i].subnet.edges_mut() {
                if eid == id {
                    saved = e.weight;
                    e.weight = Complex::ZERO;
                }
            }
            saved
        };
        let impact = frf_loss_and_grad(model, data, spec, st, None, layout)
            .map(|l| (l.total - base).abs())
            .unwrap_or(f64::INFINITY);
        for (eid, e) in model.terms[i].subnet.edges_mut() {
            if eid == id {
                e.weight = saved;
            }
        }
        candidates.push((impact, mag, order, Candidate::Edge { term: i, edge: id }));
    }
    let n_edges = edge_list.len();
    let term_ids: Vec<usize> = model
        .terms
        .iter()
        .enumerate()
        .filter(|(_, t)| t.active)
        .map(|(i, _)| i)
        .collect();
    for (k, &i) in term_ids.iter().enumerate() {
        let saved = model.terms[i].amp;
        model.terms[i].amp = 0.0;
        let impact = frf_loss_and_grad(model, data, spec, st, None, layout)
            .map(|l| (l.total - base).abs())
            .unwrap_or(f64::INFINITY);
        model.terms[i].amp = saved;
        candidates.push((impact, saved.abs(), n_edges + k, Candidate::Amp(i)));
    }

    candidates.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal))
            .then(a.2.cmp(&b.2))
    });

    let mut removed = 0usize;
    for &(_, _, _, cand) in &candidates {
        if removed >= cap {
            break;
        }
        match cand {
            Candidate::Edge { term, edge } => {
                if !model.terms[term].active {
                    continue;
                }
                let mut trial = model.terms[term].subnet.clone();
                for (eid, e) in trial.edges_mut() {
                    if eid == edge {
                        e.active = false;
                        e.weight = Complex::ZERO;
                    }
                }
                cascade_cleanup(&mut trial);
                let others: usize = model
                    .terms
                    .iter()
                    .enumerate()
                    .filter(|(j, t)| *j != term && t.active)
                    .map(|(_, t)| t.subnet.active_edge_count())
                    .sum();
                let survives_output = trial.output_edges.iter().any(|e| e.active);
                let after = others + if survives_output { trial.active_edge_count() } else { 0 };
                if after < min_edges {
                    break;
                }
                model.terms[term].subnet = trial;
                if !survives_output {
                    model.terms[term].active = false;
                }
                removed += 1;
            }
            Candidate::Amp(i) => {
                if !model.terms[i].active {
                    continue;
                }
                let others: usize = model
                    .terms
                    .iter()
                    .enumerate()
                    .filter(|(j, t)| *j != i && t.active)
                    .map(|(_, t)| t.subnet.active_edge_count())
                    .sum();
                if others < min_edges {
                    break;
                }
                model.terms[i].active = false;
                removed += 1;
            }
        }
    }
    cleanup_terms(model);
    Ok(removed)
}

/// Fit the surrogate to the dataset with the three-phase schedule. Returns
/// the best phase-3 snapshot (subnet imaginary parts projected away) and
/// the training history.
pub fn fit_frf(
    data: &FrfDataset,
    cfg: &FrfConfig,
    seed: u64,
) -> Result<(FrfModel, History), FrfError> {
    if data.len() < 100 {
        return Err(FrfError::InsufficientData {
            min: 100,
            got: data.len(),
        });
    }
    let mut model = init_model(cfg, seed)?;
    let layout = CoordLayout::new(&model);
    let levels = data.damage_levels();
    let level_of: Vec<usize> = data
        .samples
        .iter()
        .map(|s| levels.iter().position(|&l| l == s.d).unwrap())
        .collect();
    let n_terms = model.terms.len();
    let mut st = FitState {
        traces: model
            .terms
            .iter()
            .map(|t| {
                levels
                    .iter()
                    .map(|_| Trace::for_network(&t.subnet))
                    .collect()
            })
            .collect(),
        h: vec![vec![0.0; levels.len()]; n_terms],
        h_ok: vec![vec![false; levels.len()]; n_terms],
        dh: vec![vec![0.0; levels.len()]; n_terms],
        den: vec![0.0; data.len() * n_terms],
        preds: vec![0.0; data.len()],
        valid: vec![false; data.len()],
        subnet_grads: model
            .terms
            .iter()
            .map(|t| GradientVector::zeros(t.subnet.edge_count()))
            .collect(),
        levels,
        level_of,
    };

    let mut history = History {
        seed,
        ..History::default()
    };
    let mut grad = vec![0.0; layout.total];
    let mut epoch = 0usize;
    let mut best: Option<(f64, FrfModel, usize)> = None;

    let phases: [(u8, usize, f64, LossSpec, Option<PrunePolicy>, Option<PlateauSpec>); 3] = [
        (
            1,
            cfg.schedule.phase1.epochs,
            cfg.schedule.phase1.lr,
            cfg.schedule.phase1.loss,
            cfg.schedule.phase1.pruning,
            cfg.schedule.phase1.lr_plateau,
        ),
        (
            2,
            cfg.schedule.phase2.epochs,
            cfg.schedule.phase2.lr,
            cfg.schedule.phase2.loss,
            cfg.schedule.phase2.pruning,
            cfg.schedule.phase2.lr_plateau,
        ),
        (
            3,
            cfg.schedule.phase3.epochs,
            cfg.schedule.phase3.lr,
            cfg.schedule.phase3.loss.to_loss_spec(),
            None,
            cfg.schedule.phase3.lr_plateau,
        ),
    ];
    let conv: ConvergenceSpec = cfg.schedule.convergence;

    for (phase_no, epochs, lr0, spec, pruning, plateau) in phases {
        if epochs == 0 {
            continue;
        }
        let impact = match pruning {
            Some(PrunePolicy::ImpactIterative {
                interval_epochs,
                fraction,
                min_edges,
            }) => Some((interval_epochs, fraction, min_edges)),
            _ => None,
        };
        let mut adam = AdamState::new(layout.total);
        let mut lr = lr0;
        let mut best_seen = f64::INFINITY;
        let mut since = 0usize;
        let patience = plateau.map(|p| p.patience).unwrap_or(conv.patience).max(1);

        let mut ep = 0usize;
        while ep < epochs {
            if let Some((interval, fraction, min_edges)) = impact {
                if ep > 0 && ep % interval == 0 {
                    let n = frf_impact_prune(
                        &mut model, data, &spec, &mut st, &layout, fraction, min_edges,
                    )?;
                    if n > 0 {
                        history.prune_events.push(PruneEvent {
                            epoch,
                            kind: PruneKind::Impact,
                            removed: n,
                            active_after: model.active_subnet_edges(),
                        });
                        best_seen = f64::INFINITY;
                        since = 0;
                    }
                }
            }
            let parts =
                frf_loss_and_grad(&model, data, &spec, &mut st, Some(&mut grad), &layout)?;
            history.records.push(EpochRecord {
                epoch,
                phase: phase_no,
                loss: parts.total,
                data_mse: parts.mse,
                l1_mass: parts.l1_mass,
                im_mass: parts.im_mass,
                arg_penalty: 0.0,
                active_edges: model.active_subnet_edges(),
                lr,
                flagged_samples: parts.flagged,
            });
            if phase_no == 3 {
                match &mut best {
                    Some(b) if parts.total >= b.0 => {}
                    slot => *slot = Some((parts.total, model.clone(), epoch)),
                }
            }
            frf_adam_step(&mut adam, &mut model, &grad, lr, &layout)?;
            epoch += 1;
            ep += 1;

            if parts.total < best_seen - conv.threshold {
                best_seen = parts.total;
                since = 0;
            } else {
                since += 1;
                if since >= patience {
                    if let Some(pl) = plateau {
                        if lr > pl.min_lr {
                            lr = (lr * pl.factor).max(pl.min_lr);
                            since = 0;
                            continue;
                        }
                    }
                    if let Some((_, fraction, min_edges)) = impact {
                        let n = frf_impact_prune(
                            &mut model, data, &spec, &mut st, &layout, fraction, min_edges,
                        )?;
                        if n > 0 {
                            history.prune_events.push(PruneEvent {
                                epoch,
                                kind: PruneKind::Impact,
                                removed: n,
                                active_after: model.active_subnet_edges(),
                            });
                            best_seen = f64::INFINITY;
                            since = 0;
                            continue;
                        }
                    }
                    break;
                }
            }
        }

        if epochs > 0 {
            if let Some(PrunePolicy::ThresholdOnce { threshold }) = pruning {
                let mut pruned = 0;
                for t in model.terms.iter_mut().filter(|t| t.active) {
                    pruned += threshold_prune(&mut t.subnet, threshold);
                    cascade_cleanup(&mut t.subnet);
                }
                cleanup_terms(&mut model);
                history.prune_events.push(PruneEvent {
                    epoch,
                    kind: PruneKind::Threshold,
                    removed: pruned,
                    active_after: model.active_subnet_edges(),
                });
            }
        }
    }

    let (_, mut best_model, _) = best.unwrap_or_else(|| (f64::NAN, model.clone(), epoch));
    for t in &mut best_model.terms {
        for (_, e) in t.subnet.edges_mut() {
            e.weight.im = 0.0;
        }
    }
    Ok((best_model, history))
}

/// Hand-wire a shift subnetwork realizing the polynomial
/// `c[0] + c[1]d + c[2]d² + c[3]d³ + c[4]d⁴` (missing coefficients may be
/// omitted; d² in the quartic factor pair is routed through the layer-1
/// square node).
pub fn wire_shift_polynomial(coeffs: &[f64]) -> Result<Network, GraphError> {
    assert!(coeffs.len() <= 5, "degree at most 4");
    let mut c = [0.0; 5];
    c[..coeffs.len()].copy_from_slice(coeffs);
    let mut net = Network::build_inactive(1, shift_subnet_specs(), true)?;
    // layer-1 nodes: id=0, const=1, square=2, mul=(3,4); activations
    // id=0, const=1, square=2, mul=3; layer-2 fan-in = those 4 then skip d.
    net.wire_bias(0, 1, Complex::ONE); // const activation = 1
    net.wire_layer(0, 0, 2, Complex::ONE); // square activation = d²
    // layer-2 identity (node 0) carries c0 + c1·d + c2·d²
    net.wire_layer(1, 1, 0, Complex::from_real(c[0])); // const act
    net.wire_layer(1, 4, 0, Complex::from_real(c[1])); // skip d
    net.wire_layer(1, 2, 0, Complex::from_real(c[2])); // square act
    net.wire_output(0, Complex::ONE);
    if c[3] != 0.0 || c[4] != 0.0 {
        // layer-2 multiply (nodes 3, 4): d² · (c4·d² + c3·d)
        net.wire_layer(1, 2, 3, Complex::ONE);
        net.wire_layer(1, 2, 4, Complex::from_real(c[4]));
        net.wire_layer(1, 4, 4, Complex::from_real(c[3]));
        net.wire_output(3, Complex::ONE);
    }
    Ok(net)
}

/// The published nine-term beam surrogate, hand-wired for re-evaluation.
/// Shift polynomials are in the damage percentage d; frequencies in kHz.
pub fn reference_beam_model() -> FrfModel {
    let mk = |amp: f64, gamma: f64, coeffs: &[f64]| FrfTerm {
        amp,
        gamma,
        subnet: wire_shift_polynomial(coeffs).expect("reference wiring"),
        active: true,
    };
    FrfModel {
        trend_slope: 5.21654,
        trend_intercept: -0.3154,
        terms: vec![
            mk(0.08445, -0.01625, &[0.89, 0.00386, 0.0, -0.00217, 0.0007]),
            mk(0.0577, -0.1399, &[1.26425, 0.25854, -0.05572]),
            mk(0.47169, -0.36363, &[-0.17194, 0.37289, -0.03456]),
            mk(2.42351, -0.0339, &[0.23462, -0.061, 0.02541]),
            mk(-0.76141, 0.04658, &[0.50138, -0.08937, 0.03146]),
            mk(-0.26376, 0.00551, &[0.76732, 0.20983]),
            mk(0.48817, 0.31504, &[0.20312, 0.27162]),
            mk(0.08136, -0.14816, &[0.76341, 0.52067]),
            mk(0.29455, 0.06101, &[0.69792]),
        ],
    }
}
