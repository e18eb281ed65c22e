//! Benchmark registry (E-1…E-10), dataset sampling with domain splits and
//! validity filtering, metric computation, multi-seed aggregation, and the
//! single-parameter division-pathology demonstrator.

use crate::autodiff::Batch;
use crate::complex::{Complex, POLE_EPS};
use crate::expr::{eval_expr, extract, node_count, Expr, ExtractError, IM_TOLERANCE};
use crate::graph::{default_layer_specs, GraphError, InitPolicy, Layer1Variant, Network};
use crate::train::{run_training, AdamState, History, PhaseSchedule, TrainError, TrainedModel};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Inner (training/interpolation) half-width of the sampling domain.
pub const INNER_BOUND: f64 = 2.0;
/// Outer bound of the extrapolation band per dimension.
pub const OUTER_BOUND: f64 = 4.0;
/// Samples with |y| above this are discarded during generation.
pub const TARGET_CAP: f64 = 100.0;

#[derive(Debug, Clone, Error)]
pub enum BenchError {
    #[error("rejection sampling starved: acceptance rate below 1e-4 over 1e6 draws")]
    SamplingStarved,
    #[error("unknown benchmark id {0}")]
    UnknownBenchmark(String),
    #[error(transparent)]
    Extraction(#[from] ExtractError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IllPosedness {
    None,
    /// Log or sqrt argument changes sign inside the training domain.
    UndefinedRegion,
    /// Number of real denominator roots inside the training domain.
    Pole(u32),
}

/// A registry entry: expression shape plus its fixed reference coefficients.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub id: &'static str,
    pub input_dim: usize,
    pub illposedness: IllPosedness,
    pub coeffs: Vec<f64>,
    shape: fn(&[f64]) -> Expr,
}

impl Benchmark {
    /// The expression with the registry's reference coefficients.
    pub fn expr(&self) -> Expr {
        (self.shape)(&self.coeffs)
    }

    /// The expression with caller-provided coefficients (same shape).
    pub fn expr_with(&self, coeffs: &[f64]) -> Expr {
        assert_eq!(coeffs.len(), self.coeffs.len());
        (self.shape)(coeffs)
    }
}

fn term(c: f64, i: usize) -> Expr {
    Expr::product(vec![Expr::Const(c), Expr::Var(i)])
}

fn term_sq(c: f64, i: usize) -> Expr {
    Expr::product(vec![
        Expr::Const(c),
        Expr::power(Expr::Var(i), Expr::Const(2.0)),
    ])
}

fn quad1(c: &[f64]) -> Expr {
    Expr::sum(vec![term_sq(c[0], 1), term(c[1], 1), Expr::Const(c[2])])
}

fn e1(c: &[f64]) -> Expr {
    Expr::sum(vec![term(c[0], 1), Expr::Const(c[1])])
}

fn e2(c: &[f64]) -> Expr {
    Expr::sum(vec![term(c[0], 1), term(c[1], 2), Expr::Const(c[2])])
}

fn e3(c: &[f64]) -> Expr {
    quad1(c)
}

fn e4(c: &[f64]) -> Expr {
    Expr::sum(vec![
        term_sq(c[0], 1),
        Expr::product(vec![Expr::Const(c[1]), Expr::Var(1), Expr::Var(2)]),
        term_sq(c[2], 2),
        term(c[3], 1),
        term(c[4], 2),
        Expr::Const(c[5]),
    ])
}

fn e5(c: &[f64]) -> Expr {
    Expr::product(vec![Expr::Const(c[0]), Expr::log(quad1(&c[1..]))])
}

fn e6(c: &[f64]) -> Expr {
    Expr::product(vec![Expr::Const(c[0]), Expr::sqrt(quad1(&c[1..]))])
}

fn e7(c: &[f64]) -> Expr {
    Expr::divide(
        Expr::sum(vec![Expr::Const(c[0]), term(c[1], 1)]),
        Expr::sum(vec![term(c[2], 1), Expr::Const(c[3])]),
    )
}

fn e8(c: &[f64]) -> Expr {
    Expr::divide(
        Expr::sum(vec![term(c[0], 1), term(c[1], 2), Expr::Const(c[2])]),
        Expr::sum(vec![term(c[3], 1), term(c[4], 2), Expr::Const(c[5])]),
    )
}

fn e9(c: &[f64]) -> Expr {
    Expr::divide(quad1(&c[..3]), quad1(&c[3..]))
}

/// The ten benchmark expressions with their reference coefficients.
pub fn registry() -> Vec<Benchmark> {
    vec![
        Benchmark {
            id: "E-1",
            input_dim: 1,
            illposedness: IllPosedness::None,
            coeffs: vec![1.87, 2.01],
            shape: e1,
        },
        Benchmark {
            id: "E-2",
            input_dim: 2,
            illposedness: IllPosedness::None,
            coeffs: vec![1.56, 1.59, -2.91],
            shape: e2,
        },
        Benchmark {
            id: "E-3",
            input_dim: 1,
            illposedness: IllPosedness::None,
            coeffs: vec![2.48, 1.92, -0.68],
            shape: e3,
        },
        Benchmark {
            id: "E-4",
            input_dim: 2,
            illposedness: IllPosedness::None,
            coeffs: vec![0.55, 2.45, 2.95, 1.65, 0.80, 0.86],
            shape: e4,
        },
        Benchmark {
            id: "E-5",
            input_dim: 1,
            illposedness: IllPosedness::UndefinedRegion,
            coeffs: vec![-2.05, 1.56, -0.55, -2.15],
            shape: e5,
        },
        Benchmark {
            id: "E-6",
            input_dim: 1,
            illposedness: IllPosedness::UndefinedRegion,
            coeffs: vec![2.31, 2.52, -1.52, -2.24],
            shape: e6,
        },
        Benchmark {
            id: "E-7",
            input_dim: 1,
            illposedness: IllPosedness::Pole(1),
            coeffs: vec![0.53, -2.94, 2.32, 1.80],
            shape: e7,
        },
        Benchmark {
            id: "E-8",
            input_dim: 2,
            illposedness: IllPosedness::Pole(1),
            coeffs: vec![1.00, 2.48, -1.36, 2.26, -0.91, 1.94],
            shape: e8,
        },
        Benchmark {
            id: "E-9",
            input_dim: 1,
            illposedness: IllPosedness::Pole(1),
            coeffs: vec![2.84, 1.84, -2.33, -0.66, 2.94, 1.35],
            shape: e9,
        },
        Benchmark {
            id: "E-10",
            input_dim: 1,
            illposedness: IllPosedness::Pole(2),
            coeffs: vec![-1.08, -2.85, -2.08, 2.56, 1.78, -0.74],
            shape: e9,
        },
    ]
}

pub fn by_id(id: &str) -> Result<Benchmark, BenchError> {
    registry()
        .into_iter()
        .find(|b| b.id.eq_ignore_ascii_case(id))
        .ok_or_else(|| BenchError::UnknownBenchmark(id.to_string()))
}

/// Fresh coefficients for a benchmark shape: each slot independently draws
/// `c = s·u` with `s ∈ {−1,+1}`, `u ~ U(0.5, 3.0)`, rounded to two decimal
/// places.
pub fn sample_coefficients(b: &Benchmark, seed: u64) -> Expr {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coeffs: Vec<f64> = (0..b.coeffs.len())
        .map(|_| {
            let s = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let u: f64 = rng.gen_range(0.5..3.0);
            (s * u * 100.0).round() / 100.0
        })
        .collect();
    b.expr_with(&coeffs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Interp,
    Extrap,
}

/// Real input matrix (row-major) with targets, tagged by domain split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub split: Split,
    pub dim: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_batch(&self) -> Batch<'_> {
        Batch::new(&self.x, &self.y, self.dim)
    }

    /// CSV with header `x1[,x2],y` and 17-significant-digit values.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for d in 1..=self.dim {
            out.push_str(&format!("x{d},"));
        }
        out.push_str("y\n");
        for i in 0..self.len() {
            for v in self.row(i) {
                out.push_str(&format!("{v:.16e},"));
            }
            out.push_str(&format!("{:.16e}\n", self.y[i]));
        }
        out
    }

    /// Parse the CSV format produced by [`Dataset::to_csv`].
    pub fn from_csv(text: &str, split: Split) -> Result<Dataset, String> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or("empty csv")?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.last() != Some(&"y") || cols.len() < 2 {
            return Err(format!("expected header x1[,x2],y, got {header}"));
        }
        let dim = cols.len() - 1;
        let mut x = Vec::new();
        let mut y = Vec::new();
        for (ln, line) in lines.enumerate() {
            let vals: Result<Vec<f64>, _> =
                line.split(',').map(|v| v.trim().parse::<f64>()).collect();
            let vals = vals.map_err(|e| format!("line {}: {e}", ln + 2))?;
            if vals.len() != dim + 1 {
                return Err(format!("line {}: expected {} columns", ln + 2, dim + 1));
            }
            x.extend_from_slice(&vals[..dim]);
            y.push(vals[dim]);
        }
        Ok(Dataset { split, dim, x, y })
    }
}

/// Rejection-sample a dataset: draw uniformly from the split's domain,
/// evaluate the target expression, and discard non-finite, undefined, or
/// |y| > 100 draws until `n` valid rows are collected.
pub fn sample_dataset(
    b: &Benchmark,
    split: Split,
    n: usize,
    seed: u64,
) -> Result<Dataset, BenchError> {
    sample_dataset_for(&b.expr(), b.input_dim, split, n, seed)
}

/// Like [`sample_dataset`] but for an arbitrary target expression.
pub fn sample_dataset_for(
    target: &Expr,
    dim: usize,
    split: Split,
    n: usize,
    seed: u64,
) -> Result<Dataset, BenchError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(n * dim);
    let mut y = Vec::with_capacity(n);
    let mut row = vec![0.0; dim];
    let mut attempts: u64 = 0;
    while y.len() < n {
        attempts += 1;
        if attempts == 1_000_000 && (y.len() as f64) < 1e-4 * attempts as f64 {
            return Err(BenchError::SamplingStarved);
        }
        for v in row.iter_mut() {
            *v = match split {
                Split::Train | Split::Interp => rng.gen_range(-INNER_BOUND..INNER_BOUND),
                Split::Extrap => {
                    let mag = rng.gen_range(INNER_BOUND..OUTER_BOUND);
                    if rng.gen_bool(0.5) {
                        mag
                    } else {
                        -mag
                    }
                }
            };
        }
        match eval_expr(target, &row) {
            Ok(v) if v.abs() <= TARGET_CAP => {
                x.extend_from_slice(&row);
                y.push(v);
            }
            _ => {}
        }
    }
    Ok(Dataset { split, dim, x, y })
}

/// Per-run evaluation record.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub interp_mse: f64,
    pub extrap_mse: f64,
    pub node_count: usize,
    pub train_mse: f64,
    /// Model-side invalid evaluations, reported separately from the MSE.
    pub interp_flagged: usize,
    pub extrap_flagged: usize,
}

#[derive(Debug, Clone, Copy)]
pub enum ModelRef<'a> {
    Tree(&'a Expr),
    Net(&'a Network),
}

/// MSE of the model on the interpolation and extrapolation sets plus its
/// node count. Flagged model evaluations are excluded from the mean and
/// counted separately.
pub fn evaluate_model(
    model: ModelRef<'_>,
    interp: &Dataset,
    extrap: &Dataset,
) -> Result<RunMetrics, BenchError> {
    let eval_set = |ds: &Dataset| -> (f64, usize) {
        let mut sq = 0.0;
        let mut valid = 0usize;
        for i in 0..ds.len() {
            let pred = match model {
                ModelRef::Tree(t) => eval_expr(t, ds.row(i)).ok(),
                ModelRef::Net(n) => {
                    let f = n.forward(ds.row(i));
                    f.flag.is_none().then_some(f.prediction)
                }
            };
            if let Some(p) = pred {
                let r = ds.y[i] - p;
                sq += r * r;
                valid += 1;
            }
        }
        let mse = if valid > 0 { sq / valid as f64 } else { f64::NAN };
        (mse, ds.len() - valid)
    };
    let (interp_mse, interp_flagged) = eval_set(interp);
    let (extrap_mse, extrap_flagged) = eval_set(extrap);
    let nc = match model {
        ModelRef::Tree(t) => node_count(t),
        ModelRef::Net(n) => node_count(&extract(n, IM_TOLERANCE)?),
    };
    Ok(RunMetrics {
        seed: 0,
        interp_mse,
        extrap_mse,
        node_count: nc,
        train_mse: 0.0,
        interp_flagged,
        extrap_flagged,
    })
}

/// Mean ± standard deviation per metric. The standard deviation is the
/// population convention (divide by n), recorded in the output so tables
/// are self-describing.
#[derive(Debug, Clone, Serialize)]
pub struct Aggregate {
    pub runs: usize,
    pub failed_runs: usize,
    pub interp_mse_mean: f64,
    pub interp_mse_std: f64,
    pub extrap_mse_mean: f64,
    pub extrap_mse_std: f64,
    pub nc_mean: f64,
    pub nc_std: f64,
    pub std_convention: &'static str,
}

pub fn aggregate(runs: &[RunMetrics]) -> Aggregate {
    fn mean_std(vals: &[f64]) -> (f64, f64) {
        if vals.is_empty() {
            return (f64::NAN, f64::NAN);
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        (mean, var.sqrt())
    }
    let (im, is) = mean_std(&runs.iter().map(|r| r.interp_mse).collect::<Vec<_>>());
    let (em, es) = mean_std(&runs.iter().map(|r| r.extrap_mse).collect::<Vec<_>>());
    let (nm, ns) = mean_std(&runs.iter().map(|r| r.node_count as f64).collect::<Vec<_>>());
    Aggregate {
        runs: runs.len(),
        failed_runs: 0,
        interp_mse_mean: im,
        interp_mse_std: is,
        extrap_mse_mean: em,
        extrap_mse_std: es,
        nc_mean: nm,
        nc_std: ns,
        std_convention: "population",
    }
}

// ---------------------------------------------------------------------------
// Full benchmark pipeline

/// Everything a single benchmark run needs beyond the expression itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRunConfig {
    pub schedule: PhaseSchedule,
    pub layer1_variant: Layer1Variant,
    pub init: InitPolicy,
    pub skip_inputs: bool,
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for BenchRunConfig {
    fn default() -> Self {
        BenchRunConfig {
            schedule: PhaseSchedule::benchmark_defaults(),
            layer1_variant: Layer1Variant::AsPrinted,
            init: InitPolicy::default(),
            skip_inputs: true,
            n_train: 128,
            n_test: 8192,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchRunOutput {
    pub metrics: RunMetrics,
    pub expr: Expr,
    pub model: TrainedModel,
    pub history: History,
}

/// Distinct deterministic streams derived from one run seed (splitmix64
/// finalizer).
pub fn substream(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Train a fresh network on one benchmark with one seed and evaluate the
/// extracted expression.
pub fn run_benchmark(
    b: &Benchmark,
    seed: u64,
    cfg: &BenchRunConfig,
) -> Result<BenchRunOutput, BenchError> {
    let train = sample_dataset(b, Split::Train, cfg.n_train, substream(seed, 1))?;
    let interp = sample_dataset(b, Split::Interp, cfg.n_test, substream(seed, 2))?;
    let extrap = sample_dataset(b, Split::Extrap, cfg.n_test, substream(seed, 3))?;

    let net = Network::build(
        b.input_dim,
        default_layer_specs(cfg.layer1_variant),
        cfg.skip_inputs,
        cfg.init,
        substream(seed, 0),
    )?;
    let (model, history) = run_training(net, train.as_batch(), &cfg.schedule, seed)?;
    let tree = extract(&model.net, IM_TOLERANCE)?;
    let mut metrics = evaluate_model(ModelRef::Tree(&tree), &interp, &extrap)?;
    metrics.seed = seed;
    metrics.train_mse = model.train_mse;
    Ok(BenchRunOutput {
        metrics,
        expr: tree,
        model,
        history,
    })
}

/// Run several seeds of one benchmark, up to `jobs` in parallel. Results
/// come back in seed order regardless of scheduling.
pub fn run_seeds(
    b: &Benchmark,
    seeds: &[u64],
    cfg: &BenchRunConfig,
    jobs: usize,
) -> Vec<(u64, Result<BenchRunOutput, BenchError>)> {
    let jobs = jobs.max(1).min(seeds.len().max(1));
    if jobs <= 1 || seeds.len() <= 1 {
        return seeds
            .iter()
            .map(|&s| (s, run_benchmark(b, s, cfg)))
            .collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results: Vec<std::sync::Mutex<Option<Result<BenchRunOutput, BenchError>>>> =
        seeds.iter().map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= seeds.len() {
                    break;
                }
                let r = run_benchmark(b, seeds[i], cfg);
                *results[i].lock().unwrap() = Some(r);
            });
        }
    });
    seeds
        .iter()
        .zip(results)
        .map(|(&s, m)| (s, m.into_inner().unwrap().expect("worker finished")))
        .collect()
}

// ---------------------------------------------------------------------------
// Division-pathology demonstrator

/// One step of the recorded optimization trajectory of the parameter `a`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct DemoStep {
    pub step: usize,
    pub re_a: f64,
    pub im_a: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DemoResult {
    pub trajectory: Vec<DemoStep>,
    pub final_a: Complex,
    pub final_loss: f64,
    pub restrict_real: bool,
}

impl DemoResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,re_a,im_a,loss\n");
        for s in &self.trajectory {
            out.push_str(&format!("{},{},{},{}\n", s.step, s.re_a, s.im_a, s.loss));
        }
        out
    }
}

/// Gradient of one sample's squared error `(1/x − Re(1/(x+a)))²` with
/// respect to (Re a, Im a).
pub fn division_demo_gradient(x: f64, a: Complex) -> (f64, f64) {
    let y = Complex::new(x + a.re, a.im);
    let pred = y.recip().re;
    // the target 1/x goes through the same reciprocal path as the model so
    // that the residual vanishes exactly at a = 0
    let residual = Complex::from_real(x).recip().re - pred;
    // d/da of 1/(x+a) is -1/(x+a)²; pred = Re(·), so ∂pred/∂Re a = Re(g'),
    // ∂pred/∂Im a = -Im(g')
    let gp = -(y * y).recip();
    (2.0 * residual * (-gp.re), 2.0 * residual * gp.im)
}

/// Fit `1/(x+a)` to `1/x` over `steps` Adam updates of the single complex
/// parameter `a`, recording the trajectory. With `restrict_real`, Im(a) is
/// clamped to zero after every step, reproducing real-valued optimization.
pub fn division_pathology_demo(
    init_a: Complex,
    restrict_real: bool,
    steps: usize,
    lr: f64,
    seed: u64,
) -> DemoResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<f64> = (0..100).map(|_| rng.gen_range(-3.0..3.0)).collect();

    let loss_of = |a: Complex| -> f64 {
        let mut sq = 0.0;
        let mut n = 0usize;
        for &x in &xs {
            let den = Complex::new(x + a.re, a.im);
            if den.abs() < POLE_EPS || x.abs() < POLE_EPS {
                continue; // flagged, as in training
            }
            let r = Complex::from_real(x).recip().re - den.recip().re;
            sq += r * r;
            n += 1;
        }
        sq / n.max(1) as f64
    };

    let mut a = if restrict_real {
        Complex::from_real(init_a.re)
    } else {
        init_a
    };
    let mut adam = AdamState::new(2);
    let mut trajectory = Vec::with_capacity(steps + 1);
    for step in 0..steps {
        let mut gr = 0.0;
        let mut gi = 0.0;
        let mut n = 0usize;
        for &x in &xs {
            let den = Complex::new(x + a.re, a.im);
            if den.abs() < POLE_EPS || x.abs() < POLE_EPS {
                continue;
            }
            let (dr, di) = division_demo_gradient(x, a);
            gr += dr;
            gi += di;
            n += 1;
        }
        let n = n.max(1) as f64;
        gr /= n;
        gi /= n;
        if restrict_real {
            gi = 0.0;
        }
        trajectory.push(DemoStep {
            step,
            re_a: a.re,
            im_a: a.im,
            loss: loss_of(a),
        });
        adam.begin_step();
        a.re -= adam.coord_step(0, gr, lr);
        a.im -= adam.coord_step(1, gi, lr);
        if restrict_real {
            a.im = 0.0;
        }
    }
    let final_loss = loss_of(a);
    trajectory.push(DemoStep {
        step: steps,
        re_a: a.re,
        im_a: a.im,
        loss: final_loss,
    });
    DemoResult {
        trajectory,
        final_a: a,
        final_loss,
        restrict_real,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_spot_checks() {
        let reg = registry();
        assert_eq!(reg.len(), 10);
        let e1 = &reg[0];
        let v = eval_expr(&e1.expr(), &[1.0]).unwrap();
        assert!((v - (1.87 + 2.01)).abs() < 1e-15);
        let e10 = &reg[9];
        assert_eq!(e10.illposedness, IllPosedness::Pole(2));
        let v = eval_expr(&e10.expr(), &[0.0]).unwrap();
        assert!((v - (-2.08 / -0.74)).abs() < 1e-12);
        // E-7 at x = 0: 0.53/1.80
        let e7 = by_id("E-7").unwrap();
        let v = eval_expr(&e7.expr(), &[0.0]).unwrap();
        assert!((v - 0.53 / 1.80).abs() < 1e-15);
    }

    #[test]
    fn ground_truth_scores_zero_on_own_datasets() {
        for b in registry() {
            let interp = sample_dataset(&b, Split::Interp, 64, 7).unwrap();
            let extrap = sample_dataset(&b, Split::Extrap, 64, 8).unwrap();
            let tree = b.expr();
            let m = evaluate_model(ModelRef::Tree(&tree), &interp, &extrap).unwrap();
            assert_eq!(m.interp_mse, 0.0, "{}", b.id);
            assert_eq!(m.extrap_mse, 0.0, "{}", b.id);
            assert_eq!(m.interp_flagged, 0);
            assert_eq!(m.extrap_flagged, 0);
        }
    }

    #[test]
    fn sampled_coefficients_bounded_and_rounded() {
        let b = by_id("E-4").unwrap();
        for seed in 0..20 {
            let tree = sample_coefficients(&b, seed);
            fn collect_consts(e: &Expr, out: &mut Vec<f64>) {
                match e {
                    Expr::Const(c) => out.push(*c),
                    Expr::Sum(ch) | Expr::Product(ch) => {
                        ch.iter().for_each(|c| collect_consts(c, out))
                    }
                    Expr::Power(b, x) => {
                        collect_consts(b, out);
                        collect_consts(x, out);
                    }
                    Expr::Log(a) | Expr::Sqrt(a) => collect_consts(a, out),
                    Expr::Divide(n, d) => {
                        collect_consts(n, out);
                        collect_consts(d, out);
                    }
                    Expr::Var(_) => {}
                }
            }
            let mut consts = Vec::new();
            collect_consts(&tree, &mut consts);
            for c in consts {
                if c == 2.0 {
                    continue; // the square exponent
                }
                let a = c.abs();
                assert!((0.5..=3.0).contains(&a), "|{c}| out of range");
                assert!(
                    ((c * 100.0).round() - c * 100.0).abs() < 1e-9,
                    "{c} not two-decimal"
                );
            }
        }
        // determinism
        assert_eq!(sample_coefficients(&b, 5), sample_coefficients(&b, 5));
    }

    #[test]
    fn dataset_domains_and_determinism() {
        let b = by_id("E-2").unwrap();
        let train = sample_dataset(&b, Split::Train, 128, 3).unwrap();
        assert_eq!(train.len(), 128);
        for i in 0..train.len() {
            for &v in train.row(i) {
                assert!(v.abs() <= INNER_BOUND);
            }
        }
        let extrap = sample_dataset(&b, Split::Extrap, 128, 3).unwrap();
        for i in 0..extrap.len() {
            for &v in extrap.row(i) {
                assert!(v.abs() >= INNER_BOUND && v.abs() <= OUTER_BOUND);
            }
            assert!(extrap.y[i].abs() <= TARGET_CAP);
        }
        let again = sample_dataset(&b, Split::Extrap, 128, 3).unwrap();
        assert_eq!(extrap, again);
    }

    #[test]
    fn e5_training_rows_have_positive_argument() {
        let b = by_id("E-5").unwrap();
        let ds = sample_dataset(&b, Split::Train, 128, 11).unwrap();
        for i in 0..ds.len() {
            let x = ds.row(i)[0];
            let arg = 1.56 * x * x - 0.55 * x - 2.15;
            assert!(arg > 0.0, "x = {x} gives arg {arg}");
        }
    }

    #[test]
    fn e7_extrap_avoids_the_pole() {
        let b = by_id("E-7").unwrap();
        let ds = sample_dataset(&b, Split::Extrap, 64, 13).unwrap();
        let pole = -1.80 / 2.32;
        for i in 0..ds.len() {
            assert!((ds.row(i)[0] - pole).abs() > 1e-6);
        }
    }

    #[test]
    fn rational_rows_stay_clear_of_denominator_roots() {
        for id in ["E-7", "E-8", "E-9", "E-10"] {
            let b = by_id(id).unwrap();
            let ds = sample_dataset(&b, Split::Train, 128, 17).unwrap();
            let den = match b.expr() {
                Expr::Divide(_, d) => d,
                _ => unreachable!(),
            };
            for i in 0..ds.len() {
                let dv = eval_expr(&den, ds.row(i)).unwrap();
                assert!(dv.abs() > 1e-9, "{id} row {i} sits on a root");
            }
        }
    }

    #[test]
    fn constant_zero_model_scores_mean_square_target() {
        let b = by_id("E-1").unwrap();
        let interp = sample_dataset(&b, Split::Interp, 256, 5).unwrap();
        let extrap = sample_dataset(&b, Split::Extrap, 256, 6).unwrap();
        let zero = Expr::Const(0.0);
        let m = evaluate_model(ModelRef::Tree(&zero), &interp, &extrap).unwrap();
        let expect = interp.y.iter().map(|y| y * y).sum::<f64>() / interp.len() as f64;
        assert!((m.interp_mse - expect).abs() < 1e-12);
        assert_eq!(m.node_count, 1);
    }

    #[test]
    fn recovered_e7_expression_scores_near_reference() {
        // the best published recovery of E-7, re-evaluated on fresh sets
        let den = || {
            Expr::sum(vec![
                Expr::product(vec![Expr::Const(-1.0), Expr::Var(1)]),
                Expr::Const(-0.77586),
            ])
        };
        let tree = Expr::sum(vec![
            Expr::divide(
                Expr::product(vec![Expr::Const(0.79672), Expr::Var(1)]),
                den(),
            ),
            Expr::Const(-0.47051),
            Expr::divide(
                Expr::Const(-0.5935),
                den(),
            ),
        ]);
        let b = by_id("E-7").unwrap();
        let interp = sample_dataset(&b, Split::Interp, 8192, 21).unwrap();
        let extrap = sample_dataset(&b, Split::Extrap, 8192, 22).unwrap();
        let m = evaluate_model(ModelRef::Tree(&tree), &interp, &extrap).unwrap();
        assert!(
            m.interp_mse > 8.6e-9 && m.interp_mse < 8.6e-7,
            "interp mse {} outside an order of magnitude of the reference",
            m.interp_mse
        );
    }

    #[test]
    fn aggregate_population_std() {
        let mk = |v: f64| RunMetrics {
            seed: 0,
            interp_mse: v,
            extrap_mse: v,
            node_count: 5,
            train_mse: v,
            interp_flagged: 0,
            extrap_flagged: 0,
        };
        let a = aggregate(&[mk(1.0), mk(3.0)]);
        assert_eq!(a.interp_mse_mean, 2.0);
        assert_eq!(a.interp_mse_std, 1.0);
        assert_eq!(a.nc_std, 0.0);
        assert_eq!(a.std_convention, "population");
    }

    #[test]
    fn demo_per_sample_gradient_matches_closed_form() {
        // g(x, a) = a/(x(x+a)³); at a = 1, x = 1 the loss gradient is 2g = ¼
        let (dr, di) = division_demo_gradient(1.0, Complex::ONE);
        assert!((dr - 0.25).abs() < 1e-15);
        assert_eq!(di, 0.0);
    }

    #[test]
    fn demo_gradient_sign_structure() {
        // sign(g) = sign(a)·sign(x)·sign(x+a) for real a
        for &a in &[0.7f64, 1.5, -0.8] {
            for &x in &[-2.5f64, -1.0, -0.3, 0.2, 1.0, 2.8] {
                if (x + a).abs() < 1e-9 {
                    continue;
                }
                let (dr, _) = division_demo_gradient(x, Complex::from_real(a));
                let expect = a.signum() * x.signum() * (x + a).signum();
                if dr.abs() > 1e-12 {
                    assert_eq!(dr.signum(), expect, "x={x}, a={a}");
                }
            }
        }
    }

    #[test]
    fn demo_stationary_at_origin() {
        let r = division_pathology_demo(Complex::ZERO, false, 50, 1e-2, 0);
        assert_eq!(r.final_loss, 0.0);
        assert!(r.final_a.abs() < 1e-12);
    }

    #[test]
    fn csv_round_trip() {
        let b = by_id("E-2").unwrap();
        let ds = sample_dataset(&b, Split::Train, 32, 9).unwrap();
        let csv = ds.to_csv();
        let back = Dataset::from_csv(&csv, Split::Train).unwrap();
        assert_eq!(ds.dim, back.dim);
        for (a, b) in ds.x.iter().zip(&back.x) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in ds.y.iter().zip(&back.y) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
