//! Symbolic expression trees: extraction from a pruned network, real-domain
//! evaluation, flattened n-ary node counting, light simplification, and
//! deterministic infix rendering.

use crate::complex::OperatorKind;
use crate::graph::{EdgeSource, Network};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Coefficients below this magnitude are dropped from extracted sums. Kept
/// conservative: well below double-precision training noise, well above
/// true zero, so that genuinely small recovered terms survive.
pub const COEFF_DROP: f64 = 1e-9;

/// Default bound on the residual imaginary part of any weight at
/// extraction time.
pub const IM_TOLERANCE: f64 = 1e-4;

/// Denominator guard for real-domain tree evaluation.
pub const DIV_EPS: f64 = 1e-12;

/// Flattened n-ary symbolic expression. `Sum` and `Product` children are
/// kept flat (no Sum directly under a Sum); `Var` indices are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Expr {
    Sum(Vec<Expr>),
    Product(Vec<Expr>),
    Power(Box<Expr>, Box<Expr>),
    Log(Box<Expr>),
    Sqrt(Box<Expr>),
    Divide(Box<Expr>, Box<Expr>),
    Var(usize),
    Const(f64),
}

/// Why a real-domain evaluation was rejected; mirrors the benchmark
/// protocol's discard rule for non-finite or undefined samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum EvalFlag {
    #[error("log of a non-positive argument")]
    LogUndefined,
    #[error("square root of a negative argument")]
    SqrtUndefined,
    #[error("division by a near-zero denominator")]
    DivisionNearZero,
    #[error("power with undefined real value")]
    PowerUndefined,
    #[error("non-finite result")]
    NonFinite,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ExtractError {
    /// Some active weight still carries imaginary mass above the tolerance;
    /// offenders are reported as (edge id, |Im w|) pairs.
    #[error("residual imaginary weight above tolerance on {} edge(s)", offenders.len())]
    ImaginaryResidue { offenders: Vec<(usize, f64)> },
    #[error("network has no active path to the output")]
    DegenerateModel,
}

impl Expr {
    pub fn var(i: usize) -> Expr {
        Expr::Var(i)
    }

    pub fn con(v: f64) -> Expr {
        Expr::Const(v)
    }

    pub fn sum(children: Vec<Expr>) -> Expr {
        Expr::Sum(children)
    }

    pub fn product(children: Vec<Expr>) -> Expr {
        Expr::Product(children)
    }

    pub fn power(base: Expr, exp: Expr) -> Expr {
        Expr::Power(Box::new(base), Box::new(exp))
    }

    pub fn log(arg: Expr) -> Expr {
        Expr::Log(Box::new(arg))
    }

    pub fn sqrt(arg: Expr) -> Expr {
        Expr::Sqrt(Box::new(arg))
    }

    pub fn divide(num: Expr, den: Expr) -> Expr {
        Expr::Divide(Box::new(num), Box::new(den))
    }

    /// Stable JSON AST (node tag + children).
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("expression serialization cannot fail")
    }

    pub fn from_json(s: &str) -> Result<Expr, serde_json::Error> {
        serde_json::from_str(s)
    }
}

/// Canonical structural key used for like-term grouping and factor merging.
/// Constants are keyed by their exact bits.
fn canon_key(e: &Expr, out: &mut String) {
    match e {
        Expr::Sum(ch) => {
            out.push_str("S(");
            let mut keys: Vec<String> = ch
                .iter()
                .map(|c| {
                    let mut s = String::new();
                    canon_key(c, &mut s);
                    s
                })
                .collect();
            keys.sort();
            out.push_str(&keys.join(","));
            out.push(')');
        }
        Expr::Product(ch) => {
            out.push_str("P(");
            let mut keys: Vec<String> = ch
                .iter()
                .map(|c| {
                    let mut s = String::new();
                    canon_key(c, &mut s);
                    s
                })
                .collect();
            keys.sort();
            out.push_str(&keys.join(","));
            out.push(')');
        }
        Expr::Power(b, x) => {
            out.push_str("W(");
            canon_key(b, out);
            out.push(',');
            canon_key(x, out);
            out.push(')');
        }
        Expr::Log(a) => {
            out.push_str("L(");
            canon_key(a, out);
            out.push(')');
        }
        Expr::Sqrt(a) => {
            out.push_str("Q(");
            canon_key(a, out);
            out.push(')');
        }
        Expr::Divide(n, d) => {
            out.push_str("D(");
            canon_key(n, out);
            out.push(',');
            canon_key(d, out);
            out.push(')');
        }
        Expr::Var(i) => {
            out.push('V');
            out.push_str(&i.to_string());
        }
        Expr::Const(c) => {
            out.push('C');
            out.push_str(&format!("{:016x}", c.to_bits()));
        }
    }
}

fn key_of(e: &Expr) -> String {
    let mut s = String::new();
    canon_key(e, &mut s);
    s
}

/// Split a sum term into (numeric coefficient, non-constant factors). The
/// coefficient is pulled through products and through the numerators of
/// divisions, so a fraction with a vanishing numerator has a vanishing
/// coefficient.
fn split_term(e: &Expr) -> (f64, Vec<Expr>) {
    match e {
        Expr::Const(c) => (*c, vec![]),
        Expr::Product(ch) => {
            let mut coeff = 1.0;
            let mut core = Vec::new();
            for c in ch {
                let (cc, cr) = split_term(c);
                coeff *= cc;
                core.extend(cr);
            }
            (coeff, core)
        }
        Expr::Divide(n, d) => {
            let (cn, ncore) = split_term(n);
            let num = match ncore.len() {
                0 => Expr::Const(1.0),
                1 => ncore.into_iter().next().unwrap(),
                _ => Expr::Product(ncore),
            };
            (cn, vec![Expr::divide(num, d.as_ref().clone())])
        }
        other => (1.0, vec![other.clone()]),
    }
}

/// Light, semantics-preserving normalization: flatten nested sums and
/// products, fold constant subtrees, merge repeated factors into powers,
/// collapse nested constant exponents, collect like terms of a sum, and
/// turn division by a constant into a product.
pub fn normalize(e: &Expr) -> Expr {
    match e {
        Expr::Var(_) | Expr::Const(_) => e.clone(),
        Expr::Sum(children) => {
            let mut flat = Vec::new();
            for c in children {
                match normalize(c) {
                    Expr::Sum(inner) => flat.extend(inner),
                    other => flat.push(other),
                }
            }
            collect_like_terms(flat)
        }
        Expr::Product(children) => {
            let mut flat = Vec::new();
            for c in children {
                match normalize(c) {
                    Expr::Product(inner) => flat.extend(inner),
                    other => flat.push(other),
                }
            }
            rebuild_product(flat)
        }
        Expr::Power(base, exp) => {
            let b = normalize(base);
            let x = normalize(exp);
            if let (Expr::Power(b2, p2), Expr::Const(q)) = (&b, &x) {
                if let Expr::Const(p) = p2.as_ref() {
                    return normalize(&Expr::power(b2.as_ref().clone(), Expr::Const(p * q)));
                }
            }
            if let Expr::Const(p) = x {
                if p == 1.0 {
                    return b;
                }
                if let Expr::Const(c) = b {
                    if let Some(v) = fold_power(c, p) {
                        return Expr::Const(v);
                    }
                }
            }
            Expr::power(b, x)
        }
        Expr::Log(arg) => {
            let a = normalize(arg);
            if let Expr::Const(c) = a {
                if c > 0.0 && c.ln().is_finite() {
                    return Expr::Const(c.ln());
                }
            }
            Expr::log(a)
        }
        Expr::Sqrt(arg) => {
            let a = normalize(arg);
            if let Expr::Const(c) = a {
                if c >= 0.0 {
                    return Expr::Const(c.sqrt());
                }
            }
            Expr::sqrt(a)
        }
        Expr::Divide(num, den) => {
            let n = normalize(num);
            let d = normalize(den);
            if let Expr::Const(k) = d {
                if k.abs() >= DIV_EPS {
                    return normalize(&Expr::product(vec![Expr::Const(1.0 / k), n]));
                }
            }
            if n == Expr::Const(0.0) {
                return Expr::Const(0.0);
            }
            Expr::divide(n, d)
        }
    }
}

fn fold_power(c: f64, p: f64) -> Option<f64> {
    let v = if p.fract() == 0.0 && p.abs() <= 64.0 {
        c.powi(p as i32)
    } else if c > 0.0 {
        c.powf(p)
    } else {
        return None;
    };
    v.is_finite().then_some(v)
}

/// Merge sum terms that share the same non-constant core; constants fold
/// into a single trailing term. Terms that stay alone keep their original
/// (already normalized) shape.
fn collect_like_terms(terms: Vec<Expr>) -> Expr {
    struct Group {
        key: String,
        coeff: f64,
        first: Expr,
        core: Vec<Expr>,
        count: usize,
    }
    let mut const_acc = 0.0;
    let mut has_const = false;
    let mut groups: Vec<Group> = Vec::new();
    for term in terms {
        let (coeff, core) = split_term(&term);
        if core.is_empty() {
            const_acc += coeff;
            has_const = true;
            continue;
        }
        let mut key = String::new();
        let mut core_keys: Vec<String> = core.iter().map(key_of).collect();
        core_keys.sort();
        key.push_str(&core_keys.join("|"));
        if let Some(g) = groups.iter_mut().find(|g| g.key == key) {
            g.coeff += coeff;
            g.count += 1;
        } else {
            groups.push(Group {
                key,
                coeff,
                first: term,
                core,
                count: 1,
            });
        }
    }

    let mut out = Vec::new();
    for g in groups {
        if g.count == 1 {
            out.push(g.first);
        } else if g.coeff != 0.0 {
            let mut ch = vec![Expr::Const(g.coeff)];
            ch.extend(g.core);
            out.push(rebuild_product(ch));
        }
    }
    if has_const && (const_acc != 0.0 || out.is_empty()) {
        out.push(Expr::Const(const_acc));
    }
    match out.len() {
        0 => Expr::Const(0.0),
        1 => out.into_iter().next().unwrap(),
        _ => Expr::Sum(out),
    }
}

/// Fold the constant factors of a flattened product and merge repeated
/// bases into powers.
fn rebuild_product(factors: Vec<Expr>) -> Expr {
    let mut coeff = 1.0;
    struct Factor {
        key: String,
        base: Expr,
        exp: f64,
    }
    let mut merged: Vec<Factor> = Vec::new();
    for f in factors {
        match f {
            Expr::Const(c) => {
                if c == 0.0 {
                    return Expr::Const(0.0);
                }
                coeff *= c;
            }
            other => {
                let (base, exp) = match other {
                    Expr::Power(b, x) => match *x {
                        Expr::Const(p) => (*b, p),
                        x_other => (Expr::Power(b, Box::new(x_other)), 1.0),
                    },
                    o => (o, 1.0),
                };
                let key = key_of(&base);
                if let Some(m) = merged.iter_mut().find(|m| m.key == key) {
                    m.exp += exp;
                } else {
                    merged.push(Factor { key, base, exp });
                }
            }
        }
    }
    let mut out = Vec::new();
    if coeff != 1.0 {
        out.push(Expr::Const(coeff));
    }
    for m in merged {
        if m.exp == 0.0 {
            continue;
        }
        if m.exp == 1.0 {
            out.push(m.base);
        } else {
            out.push(Expr::power(m.base, Expr::Const(m.exp)));
        }
    }
    match out.len() {
        0 => Expr::Const(coeff),
        1 => out.into_iter().next().unwrap(),
        _ => Expr::Product(out),
    }
}

/// Remove sum terms whose coefficient magnitude falls below `eps`.
pub fn drop_small_terms(e: &Expr, eps: f64) -> Expr {
    fn walk(e: &Expr, eps: f64) -> Expr {
        match e {
            Expr::Sum(ch) => {
                let kept: Vec<Expr> = ch
                    .iter()
                    .map(|c| walk(c, eps))
                    .filter(|c| split_term(c).0.abs() >= eps)
                    .collect();
                match kept.len() {
                    0 => Expr::Const(0.0),
                    1 => kept.into_iter().next().unwrap(),
                    _ => Expr::Sum(kept),
                }
            }
            Expr::Product(ch) => Expr::Product(ch.iter().map(|c| walk(c, eps)).collect()),
            Expr::Power(b, x) => Expr::power(walk(b, eps), walk(x, eps)),
            Expr::Log(a) => Expr::log(walk(a, eps)),
            Expr::Sqrt(a) => Expr::sqrt(walk(a, eps)),
            Expr::Divide(n, d) => Expr::divide(walk(n, eps), walk(d, eps)),
            other => other.clone(),
        }
    }
    let w = walk(e, eps);
    if split_term(&w).0.abs() < eps {
        Expr::Const(0.0)
    } else {
        w
    }
}

/// Node count of a flattened n-ary tree: `Sum` and `Product` count one node
/// each regardless of child count; `Power` counts one plus its base and
/// exponent subtrees (a literal exponent is one `Const` node); `Var` and
/// `Const` count one each, signed constants included. This convention is
/// what makes the linear/polynomial reference expressions count 5, 8, 10
/// and 22 nodes respectively.
pub fn node_count(e: &Expr) -> usize {
    match e {
        Expr::Sum(ch) | Expr::Product(ch) => 1 + ch.iter().map(node_count).sum::<usize>(),
        Expr::Power(b, x) => 1 + node_count(b) + node_count(x),
        Expr::Log(a) | Expr::Sqrt(a) => 1 + node_count(a),
        Expr::Divide(n, d) => 1 + node_count(n) + node_count(d),
        Expr::Var(_) | Expr::Const(_) => 1,
    }
}

/// Real-domain evaluation. Logs of non-positive arguments, square roots of
/// negative arguments, near-zero denominators, undefined powers and
/// non-finite results flag the sample invalid.
pub fn eval_expr(e: &Expr, inputs: &[f64]) -> Result<f64, EvalFlag> {
    let v = eval_inner(e, inputs)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(EvalFlag::NonFinite)
    }
}

fn eval_inner(e: &Expr, inputs: &[f64]) -> Result<f64, EvalFlag> {
    match e {
        Expr::Sum(ch) => {
            let mut s = 0.0;
            for c in ch {
                s += eval_inner(c, inputs)?;
            }
            Ok(s)
        }
        Expr::Product(ch) => {
            let mut p = 1.0;
            for c in ch {
                p *= eval_inner(c, inputs)?;
            }
            Ok(p)
        }
        Expr::Power(b, x) => {
            let vb = eval_inner(b, inputs)?;
            let vx = eval_inner(x, inputs)?;
            if vx.fract() == 0.0 && vx.abs() <= i32::MAX as f64 {
                Ok(vb.powi(vx as i32))
            } else if vb > 0.0 {
                Ok(vb.powf(vx))
            } else if vb == 0.0 && vx > 0.0 {
                Ok(0.0)
            } else {
                Err(EvalFlag::PowerUndefined)
            }
        }
        Expr::Log(a) => {
            let v = eval_inner(a, inputs)?;
            if v <= 0.0 {
                Err(EvalFlag::LogUndefined)
            } else {
                Ok(v.ln())
            }
        }
        Expr::Sqrt(a) => {
            let v = eval_inner(a, inputs)?;
            if v < 0.0 {
                Err(EvalFlag::SqrtUndefined)
            } else {
                Ok(v.sqrt())
            }
        }
        Expr::Divide(n, d) => {
            let vn = eval_inner(n, inputs)?;
            let vd = eval_inner(d, inputs)?;
            if vd.abs() < DIV_EPS {
                Err(EvalFlag::DivisionNearZero)
            } else {
                Ok(vn / vd)
            }
        }
        Expr::Var(i) => Ok(inputs[i - 1]),
        Expr::Const(c) => Ok(*c),
    }
}

/// Extract the symbolic expression induced by the active connections.
/// Every weight becomes its real part; extraction refuses networks whose
/// weights still carry imaginary mass above `im_tolerance`.
pub fn extract(net: &Network, im_tolerance: f64) -> Result<Expr, ExtractError> {
    let mut offenders = Vec::new();
    for (id, e) in net.edges() {
        if e.active && e.weight.im.abs() > im_tolerance {
            offenders.push((id, e.weight.im.abs()));
        }
    }
    if !offenders.is_empty() {
        return Err(ExtractError::ImaginaryResidue { offenders });
    }
    if !net.output_edges.iter().any(|e| e.active) {
        return Err(ExtractError::DegenerateModel);
    }

    // Symbolic activations layer by layer. A summation node with no active
    // edges is the constant 0, mirroring the forward pass exactly.
    let mut prev_acts: Vec<Expr> = Vec::new();
    for (li, layer) in net.layers.iter().enumerate() {
        let fan_in: Vec<Expr> = if li == 0 {
            (1..=net.input_dim).map(Expr::Var).collect()
        } else {
            let mut f = prev_acts.clone();
            if net.skip_inputs {
                f.extend((1..=net.input_dim).map(Expr::Var));
            }
            f
        };

        let m = layer.spec.unary_ops.len();
        let mut z_terms: Vec<Vec<Expr>> = vec![Vec::new(); layer.spec.summation_count()];
        let mut bias: Vec<f64> = vec![0.0; m];
        for e in &layer.edges {
            if !e.active {
                continue;
            }
            match e.source {
                EdgeSource::Activation(i) => z_terms[e.target].push(Expr::product(vec![
                    Expr::Const(e.weight.re),
                    fan_in[i].clone(),
                ])),
                EdgeSource::Bias => bias[e.target] += e.weight.re,
            }
        }
        // an unfed summation node is a structural zero, mirroring forward:
        // a pruned-away log/sqrt/div emits 0, not log(0)
        let fed: Vec<bool> = z_terms.iter().map(|t| !t.is_empty()).collect();
        let z: Vec<Expr> = z_terms.into_iter().map(Expr::Sum).collect();

        let mut acts = Vec::with_capacity(layer.spec.activation_count());
        for (j, op) in layer.spec.unary_ops.iter().enumerate() {
            acts.push(match op {
                OperatorKind::Identity => z[j].clone(),
                OperatorKind::Square => Expr::power(z[j].clone(), Expr::Const(2.0)),
                OperatorKind::Constant => Expr::Const(bias[j]),
                OperatorKind::Log if !fed[j] => Expr::Const(0.0),
                OperatorKind::Log => Expr::log(z[j].clone()),
                OperatorKind::Sqrt if !fed[j] => Expr::Const(0.0),
                OperatorKind::Sqrt => Expr::sqrt(z[j].clone()),
                other => unreachable!("{other} is not unary"),
            });
        }
        for (k, op) in layer.spec.binary_ops.iter().enumerate() {
            let (jl, jr) = (m + 2 * k, m + 2 * k + 1);
            let zl = z[jl].clone();
            let zr = z[jr].clone();
            acts.push(match op {
                OperatorKind::Multiply => Expr::product(vec![zl, zr]),
                OperatorKind::Divide if !(fed[jl] && fed[jr]) => Expr::Const(0.0),
                OperatorKind::Divide => Expr::divide(zl, zr),
                other => unreachable!("{other} is not binary"),
            });
        }
        prev_acts = acts;
    }

    let mut out_fan_in = prev_acts;
    if net.skip_inputs {
        out_fan_in.extend((1..=net.input_dim).map(Expr::Var));
    }
    let mut terms = Vec::new();
    for e in &net.output_edges {
        if e.active {
            if let EdgeSource::Activation(i) = e.source {
                terms.push(Expr::product(vec![
                    Expr::Const(e.weight.re),
                    out_fan_in[i].clone(),
                ]));
            }
        }
    }

    let tree = normalize(&Expr::Sum(terms));
    let tree = drop_small_terms(&tree, COEFF_DROP);
    Ok(normalize(&tree))
}

/// Polynomial degree in the input variables; `None` when the tree is not a
/// polynomial (contains log, sqrt, division, or fractional powers).
pub fn poly_degree(e: &Expr) -> Option<usize> {
    match e {
        Expr::Sum(ch) => ch.iter().map(poly_degree).try_fold(0, |m, d| Some(m.max(d?))),
        Expr::Product(ch) => ch.iter().map(poly_degree).try_fold(0, |s, d| Some(s + d?)),
        Expr::Power(b, x) => match x.as_ref() {
            Expr::Const(p) if p.fract() == 0.0 && *p >= 0.0 && *p <= 64.0 => {
                Some(poly_degree(b)? * (*p as usize))
            }
            _ => None,
        },
        Expr::Var(_) => Some(1),
        Expr::Const(_) => Some(0),
        _ => None,
    }
}

// ---------------------------------------------------------------------------
// Rendering

/// Deterministic infix rendering. Sum terms are ordered by their variable
/// multiset (lowest index first, higher total degree first), then by
/// structure, then by coefficient; numbers keep at most `precision` decimal
/// places with trailing zeros trimmed down to one.
pub fn render(e: &Expr, precision: usize) -> String {
    render_node(e, precision)
}

fn var_multiset(e: &Expr) -> Vec<usize> {
    fn walk(e: &Expr, out: &mut Vec<usize>) {
        match e {
            Expr::Var(i) => out.push(*i),
            Expr::Const(_) => {}
            Expr::Sum(ch) | Expr::Product(ch) => ch.iter().for_each(|c| walk(c, out)),
            Expr::Power(b, x) => {
                if let Expr::Const(p) = x.as_ref() {
                    if p.fract() == 0.0 && *p >= 1.0 && *p <= 8.0 {
                        for _ in 0..*p as usize {
                            walk(b, out);
                        }
                        return;
                    }
                }
                walk(b, out);
                walk(x, out);
            }
            Expr::Log(a) | Expr::Sqrt(a) => walk(a, out),
            Expr::Divide(n, d) => {
                walk(n, out);
                walk(d, out);
            }
        }
    }
    let mut v = Vec::new();
    walk(e, &mut v);
    v.sort_unstable();
    v
}

fn term_order(a: &Expr, b: &Expr) -> std::cmp::Ordering {
    use std::cmp::Ordering;
    let (va, vb) = (var_multiset(a), var_multiset(b));
    let n = va.len().max(vb.len());
    for i in 0..n {
        let xa = va.get(i).copied().unwrap_or(usize::MAX);
        let xb = vb.get(i).copied().unwrap_or(usize::MAX);
        match xa.cmp(&xb) {
            Ordering::Equal => {}
            other => return other,
        }
    }
    match key_of(a).cmp(&key_of(b)) {
        Ordering::Equal => {}
        other => return other,
    }
    let (ca, cb) = (split_term(a).0, split_term(b).0);
    cb.abs()
        .partial_cmp(&ca.abs())
        .unwrap_or(Ordering::Equal)
}

/// Pull a leading minus sign out of a term so sums can join with " - ".
fn sign_split(e: &Expr) -> (bool, Expr) {
    match e {
        Expr::Const(c) if *c < 0.0 => (true, Expr::Const(-c)),
        Expr::Product(ch) => {
            if let Some(Expr::Const(c)) = ch.first() {
                if *c < 0.0 {
                    let mut flipped = ch.clone();
                    flipped[0] = Expr::Const(-c);
                    return (true, Expr::Product(flipped));
                }
            }
            (false, e.clone())
        }
        Expr::Divide(n, d) => {
            let (neg, n2) = sign_split(n);
            if neg {
                (true, Expr::divide(n2, d.as_ref().clone()))
            } else {
                (false, e.clone())
            }
        }
        _ => (false, e.clone()),
    }
}

fn fmt_num(v: f64, precision: usize) -> String {
    if v == 0.0 {
        return "0".into();
    }
    // values too small to carry significant digits at this precision switch
    // to scientific notation
    if v.abs() < 10f64.powi(1 - precision as i32) {
        let sci = format!("{v:.precision$e}");
        return trim_decimal(&sci);
    }
    trim_decimal(&format!("{v:.precision$}"))
}

fn trim_decimal(s: &str) -> String {
    if !s.contains('.') {
        return s.to_string();
    }
    let (mantissa, exp) = match s.find(['e', 'E']) {
        Some(i) => (&s[..i], &s[i..]),
        None => (s, ""),
    };
    let trimmed = mantissa.trim_end_matches('0');
    let trimmed = if trimmed.ends_with('.') {
        format!("{trimmed}0")
    } else {
        trimmed.to_string()
    };
    format!("{trimmed}{exp}")
}

fn render_node(e: &Expr, p: usize) -> String {
    match e {
        Expr::Sum(ch) => {
            let mut terms: Vec<&Expr> = ch.iter().collect();
            terms.sort_by(|a, b| term_order(a, b));
            let mut out = String::new();
            for (i, t) in terms.iter().enumerate() {
                let (neg, abs) = sign_split(t);
                if i == 0 {
                    if neg {
                        out.push('-');
                    }
                } else if neg {
                    out.push_str(" - ");
                } else {
                    out.push_str(" + ");
                }
                out.push_str(&render_factorish(&abs, p));
            }
            out
        }
        other => {
            let (neg, abs) = sign_split(other);
            let body = render_factorish(&abs, p);
            if neg {
                format!("-{body}")
            } else {
                body
            }
        }
    }
}

/// Render anything that can stand as a sum term.
fn render_factorish(e: &Expr, p: usize) -> String {
    match e {
        Expr::Product(ch) => {
            let mut consts: Vec<&Expr> = Vec::new();
            let mut rest: Vec<&Expr> = Vec::new();
            for c in ch {
                match c {
                    Expr::Const(_) => consts.push(c),
                    _ => rest.push(c),
                }
            }
            rest.sort_by(|a, b| term_order(a, b));
            let parts: Vec<String> = consts
                .into_iter()
                .chain(rest)
                .map(|c| render_factor(c, p))
                .collect();
            parts.join("*")
        }
        Expr::Divide(n, d) => {
            let ns = match n.as_ref() {
                Expr::Sum(_) | Expr::Product(_) | Expr::Divide(..) => {
                    format!("({})", render_node(n, p))
                }
                _ => render_factor(n, p),
            };
            let ds = match d.as_ref() {
                Expr::Var(_) => render_factor(d, p),
                Expr::Const(c) if *c >= 0.0 => fmt_num(*c, p),
                _ => format!("({})", render_node(d, p)),
            };
            format!("{ns}/{ds}")
        }
        other => render_factor(other, p),
    }
}

/// Render a single multiplicative factor, parenthesizing where needed.
fn render_factor(e: &Expr, p: usize) -> String {
    match e {
        Expr::Sum(_) => format!("({})", render_node(e, p)),
        Expr::Product(_) | Expr::Divide(..) => format!("({})", render_factorish(e, p)),
        Expr::Power(b, x) => {
            let bs = match b.as_ref() {
                Expr::Var(_) => render_factor(b, p),
                Expr::Const(c) if *c >= 0.0 => fmt_num(*c, p),
                _ => format!("({})", render_node(b, p)),
            };
            let xs = match x.as_ref() {
                Expr::Const(q) if q.fract() == 0.0 && q.abs() < 1e15 => format!("{}", *q as i64),
                Expr::Const(q) => fmt_num(*q, p),
                other => format!("({})", render_node(other, p)),
            };
            format!("{bs}^{xs}")
        }
        Expr::Log(a) => format!("log({})", render_node(a, p)),
        Expr::Sqrt(a) => format!("sqrt({})", render_node(a, p)),
        Expr::Var(i) => format!("x{i}"),
        Expr::Const(c) => fmt_num(*c, p),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::complex::Complex;
    use crate::graph::{LayerSpec, Network};

    fn e1_tree() -> Expr {
        Expr::sum(vec![
            Expr::product(vec![Expr::con(1.87), Expr::var(1)]),
            Expr::con(2.01),
        ])
    }

    #[test]
    fn node_count_reference_conventions() {
        // linear: 5 nodes
        assert_eq!(node_count(&e1_tree()), 5);
        // two-variable linear: 8
        let e2 = Expr::sum(vec![
            Expr::product(vec![Expr::con(1.56), Expr::var(1)]),
            Expr::product(vec![Expr::con(1.59), Expr::var(2)]),
            Expr::con(-2.91),
        ]);
        assert_eq!(node_count(&e2), 8);
        // quadratic: 10
        let e3 = Expr::sum(vec![
            Expr::product(vec![
                Expr::con(2.48),
                Expr::power(Expr::var(1), Expr::con(2.0)),
            ]),
            Expr::product(vec![Expr::con(1.92), Expr::var(1)]),
            Expr::con(-0.68),
        ]);
        assert_eq!(node_count(&e3), 10);
        // full bivariate quadratic: 22
        let e4 = Expr::sum(vec![
            Expr::product(vec![
                Expr::con(0.55),
                Expr::power(Expr::var(1), Expr::con(2.0)),
            ]),
            Expr::product(vec![Expr::con(2.45), Expr::var(1), Expr::var(2)]),
            Expr::product(vec![
                Expr::con(2.95),
                Expr::power(Expr::var(2), Expr::con(2.0)),
            ]),
            Expr::product(vec![Expr::con(1.65), Expr::var(1)]),
            Expr::product(vec![Expr::con(0.80), Expr::var(2)]),
            Expr::con(0.86),
        ]);
        assert_eq!(node_count(&e4), 22);
    }

    #[test]
    fn node_count_invariant_under_reordering() {
        let e = Expr::sum(vec![
            Expr::con(1.0),
            Expr::product(vec![Expr::con(2.0), Expr::var(1)]),
            Expr::var(2),
        ]);
        let r = Expr::sum(vec![
            Expr::var(2),
            Expr::con(1.0),
            Expr::product(vec![Expr::var(1), Expr::con(2.0)]),
        ]);
        assert_eq!(node_count(&e), node_count(&r));
    }

    #[test]
    fn eval_examples() {
        // (0.53 - 2.94x)/(2.32x + 1.80) at x = 0
        let e7 = Expr::divide(
            Expr::sum(vec![
                Expr::con(0.53),
                Expr::product(vec![Expr::con(-2.94), Expr::var(1)]),
            ]),
            Expr::sum(vec![
                Expr::product(vec![Expr::con(2.32), Expr::var(1)]),
                Expr::con(1.80),
            ]),
        );
        let v = eval_expr(&e7, &[0.0]).unwrap();
        assert!((v - 0.53 / 1.80).abs() < 1e-15);

        // log of a negative argument flags
        let e5 = Expr::log(Expr::sum(vec![
            Expr::product(vec![
                Expr::con(1.56),
                Expr::power(Expr::var(1), Expr::con(2.0)),
            ]),
            Expr::product(vec![Expr::con(-0.55), Expr::var(1)]),
            Expr::con(-2.15),
        ]));
        assert_eq!(eval_expr(&e5, &[0.0]), Err(EvalFlag::LogUndefined));

        assert_eq!(eval_expr(&Expr::var(1), &[7.0]).unwrap(), 7.0);
    }

    #[test]
    fn eval_division_guard() {
        let e = Expr::divide(Expr::con(1.0), Expr::var(1));
        assert_eq!(eval_expr(&e, &[0.0]), Err(EvalFlag::DivisionNearZero));
        assert!(eval_expr(&e, &[2.0]).is_ok());
    }

    #[test]
    fn render_examples() {
        assert_eq!(render(&e1_tree(), 5), "1.87*x1 + 2.01");
        assert_eq!(render(&Expr::con(0.0), 5), "0");
        // denominator of a recovered rational form
        let den = Expr::sum(vec![
            Expr::product(vec![
                Expr::con(1.4382),
                Expr::power(Expr::var(1), Expr::con(2.0)),
            ]),
            Expr::product(vec![Expr::con(1.0), Expr::var(1)]),
            Expr::con(-0.41573),
        ]);
        let frac = Expr::divide(
            Expr::product(vec![Expr::con(-1.17925), Expr::var(1)]),
            den,
        );
        let s = render(&frac, 5);
        assert!(
            s.contains("1.4382*x1^2 + 1.0*x1 - 0.41573"),
            "rendered: {s}"
        );
    }

    #[test]
    fn render_orders_terms_by_variable_then_degree() {
        let e = Expr::sum(vec![
            Expr::con(0.86),
            Expr::product(vec![Expr::con(0.80), Expr::var(2)]),
            Expr::product(vec![Expr::con(2.45), Expr::var(1), Expr::var(2)]),
            Expr::product(vec![
                Expr::con(0.55),
                Expr::power(Expr::var(1), Expr::con(2.0)),
            ]),
        ]);
        assert_eq!(
            render(&e, 5),
            "0.55*x1^2 + 2.45*x1*x2 + 0.8*x2 + 0.86"
        );
    }

    #[test]
    fn normalize_flattens_and_folds() {
        let e = Expr::sum(vec![
            Expr::sum(vec![Expr::con(1.0), Expr::var(1)]),
            Expr::con(2.0),
        ]);
        let n = normalize(&e);
        assert_eq!(n, Expr::sum(vec![Expr::var(1), Expr::con(3.0)]));

        let p = Expr::product(vec![
            Expr::product(vec![Expr::con(2.0), Expr::var(1)]),
            Expr::con(3.0),
        ]);
        assert_eq!(
            normalize(&p),
            Expr::product(vec![Expr::con(6.0), Expr::var(1)])
        );
    }

    #[test]
    fn normalize_merges_like_terms_and_factors() {
        // 2x + 3x -> 5x
        let e = Expr::sum(vec![
            Expr::product(vec![Expr::con(2.0), Expr::var(1)]),
            Expr::product(vec![Expr::con(3.0), Expr::var(1)]),
        ]);
        assert_eq!(
            normalize(&e),
            Expr::product(vec![Expr::con(5.0), Expr::var(1)])
        );
        // x * x -> x^2
        let e = Expr::product(vec![Expr::var(1), Expr::var(1)]);
        assert_eq!(
            normalize(&e),
            Expr::power(Expr::var(1), Expr::con(2.0))
        );
    }

    #[test]
    fn normalize_collapses_nested_exponents() {
        let e = Expr::power(
            Expr::power(Expr::var(1), Expr::con(2.0)),
            Expr::con(2.0),
        );
        assert_eq!(normalize(&e), Expr::power(Expr::var(1), Expr::con(4.0)));
    }

    #[test]
    fn normalize_folds_constant_denominator() {
        let e = Expr::divide(Expr::var(1), Expr::con(2.0));
        assert_eq!(
            normalize(&e),
            Expr::product(vec![Expr::con(0.5), Expr::var(1)])
        );
    }

    #[test]
    fn drop_small_terms_removes_noise() {
        let e = Expr::sum(vec![
            Expr::product(vec![Expr::con(1e-12), Expr::var(1)]),
            Expr::con(2.0),
        ]);
        assert_eq!(drop_small_terms(&e, COEFF_DROP), Expr::con(2.0));
    }

    fn linear_net() -> Network {
        // 1.87x + 2.01 hand-wired: const -> layer-2 identity, skip x to output
        use crate::complex::OperatorKind::*;
        let specs = vec![
            LayerSpec::new(vec![Constant], vec![]),
            LayerSpec::new(vec![Identity], vec![]),
        ];
        let mut net = Network::build_inactive(1, specs, true).unwrap();
        net.wire_bias(0, 0, Complex::from_real(2.01));
        net.wire_layer(1, 0, 0, Complex::ONE); // const activation -> id node
        net.wire_output(0, Complex::ONE); // id activation
        net.wire_output(1, Complex::from_real(1.87)); // skip x
        net
    }

    #[test]
    fn extract_linear_network() {
        let tree = extract(&linear_net(), IM_TOLERANCE).unwrap();
        assert_eq!(
            tree,
            Expr::sum(vec![
                Expr::product(vec![Expr::con(1.87), Expr::var(1)]),
                Expr::con(2.01),
            ])
        );
        assert_eq!(node_count(&tree), 5);
        assert_eq!(render(&tree, 5), "1.87*x1 + 2.01");
    }

    #[test]
    fn extract_skip_identity_path() {
        use crate::complex::OperatorKind::*;
        let specs = vec![
            LayerSpec::new(vec![Constant], vec![]),
            LayerSpec::new(vec![Identity], vec![]),
        ];
        let mut net = Network::build_inactive(1, specs, true).unwrap();
        net.wire_output(1, Complex::ONE); // skip x straight to output
        let tree = extract(&net, IM_TOLERANCE).unwrap();
        assert_eq!(tree, Expr::var(1));
    }

    #[test]
    fn extract_rejects_imaginary_residue() {
        let mut net = linear_net();
        net.output_edge_mut(1).weight = Complex::new(1.87, 0.002);
        let err = extract(&net, IM_TOLERANCE).unwrap_err();
        assert!(matches!(err, ExtractError::ImaginaryResidue { .. }));
    }

    #[test]
    fn extract_preserves_divide_denominator() {
        use crate::complex::OperatorKind::*;
        // -(0.5935)/(-1.0 x - 0.77586) style wiring
        let specs = vec![
            LayerSpec::new(vec![Constant], vec![]),
            LayerSpec::new(vec![], vec![Divide]),
        ];
        let mut net = Network::build_inactive(1, specs, true).unwrap();
        net.wire_bias(0, 0, Complex::ONE);
        net.wire_layer(1, 0, 0, Complex::from_real(-0.5935)); // numerator: const
        net.wire_layer(1, 1, 1, Complex::from_real(-1.0)); // denominator: x
        net.wire_layer(1, 0, 1, Complex::from_real(-0.77586)); // denominator: const
        net.wire_output(0, Complex::ONE);
        let tree = extract(&net, IM_TOLERANCE).unwrap();
        let s = render(&tree, 5);
        assert!(s.contains("-1.0*x1 - 0.77586"), "rendered: {s}");
        let v = eval_expr(&tree, &[0.0]).unwrap();
        assert!((v - (-0.5935 / -0.77586)).abs() < 1e-12);
    }

    #[test]
    fn extract_degenerate_network() {
        use crate::complex::OperatorKind::*;
        let specs = vec![LayerSpec::new(vec![Identity], vec![])];
        let net = Network::build_inactive(1, specs, false).unwrap();
        assert_eq!(
            extract(&net, IM_TOLERANCE),
            Err(ExtractError::DegenerateModel)
        );
    }

    #[test]
    fn poly_degree_bounds() {
        let quartic = Expr::sum(vec![
            Expr::product(vec![
                Expr::con(-0.0007),
                Expr::power(Expr::var(1), Expr::con(4.0)),
            ]),
            Expr::product(vec![Expr::con(0.00217), Expr::var(1)]),
        ]);
        assert_eq!(poly_degree(&quartic), Some(4));
        assert_eq!(poly_degree(&Expr::log(Expr::var(1))), None);
        assert_eq!(poly_degree(&Expr::con(3.0)), Some(0));
    }

    #[test]
    fn json_ast_round_trip() {
        let e = e1_tree();
        let j = e.to_json();
        let back = Expr::from_json(&j).unwrap();
        assert_eq!(e, back);
    }

    #[test]
    fn fmt_num_keeps_one_decimal() {
        assert_eq!(fmt_num(1.0, 5), "1.0");
        assert_eq!(fmt_num(1.87, 5), "1.87");
        assert_eq!(fmt_num(0.5935, 5), "0.5935");
        assert_eq!(fmt_num(-0.41573, 5), "-0.41573");
        assert_eq!(fmt_num(1e-5, 5), "1.0e-5");
    }
}
