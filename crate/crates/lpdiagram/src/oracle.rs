//! Numerical cross-checks: fiber integrals with endpoint singularities,
//! sup estimates, the triangle-type inequalities and limits along curves.
//!
//! Everything here is floating point and advisory.

use std::collections::BTreeMap;
use std::num::NonZeroUsize;

use gauss_quad::GaussLegendre;
use serde::{Deserialize, Serialize};

use crate::exact::Rat;
use crate::lclass::DiagramPiece;
use crate::prepared::PreparedSum;
use crate::rectilinear::{Jacobian, MonCell, PreparedMonomial};
use crate::series::{eval_curve, Leading, TruncPoly};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Converges,
    Diverges,
    Inconclusive,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvergenceVerdict {
    pub verdict: Verdict,
    pub estimate: Option<f64>,
    /// Fitted `σ` in `I(ε_{k-1}) − I(ε_k) ≈ C·ε^σ·log(1/ε)^s`.
    pub growth_exponent: f64,
    pub log_power: f64,
    /// `I(ε_k)` for `ε_k = 2^{-4k}`, `k = 1..10`.
    pub partial: Vec<f64>,
    pub evaluations: u64,
}

#[derive(Clone, Debug)]
pub struct OracleOptions {
    pub compact_nodes: usize,
    pub start_nodes: usize,
    pub budget: u64,
    pub dead_band: f64,
}

impl Default for OracleOptions {
    fn default() -> OracleOptions {
        OracleOptions { compact_nodes: 8, start_nodes: 8, budget: 1 << 22, dead_band: 0.05 }
    }
}

/// Shells `ε ∈ [2^{-4(k+1)}, 2^{-4k}]` in `t = −log y`.
const SHELLS: usize = 10;
const SHELL_WIDTH: f64 = 4.0 * std::f64::consts::LN_2;

fn gl(n: usize) -> Vec<(f64, f64)> {
    GaussLegendre::new(NonZeroUsize::new(n).unwrap()).as_node_weight_pairs().to_vec()
}

/// Nodes of `[a, b]`.
fn mapped(rule: &[(f64, f64)], a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
    let (c, h) = ((a + b) / 2.0, (b - a) / 2.0);
    rule.iter().map(move |&(t, w)| (c + h * t, w * h))
}

/// Quadrature over the compact coordinates `y_<l` of a rectilinear cell.
fn compact_points(cell: &MonCell, l: usize, x: &[f64], nodes: usize) -> Vec<(Vec<f64>, f64)> {
    let rule = gl(nodes);
    let mut pts = vec![(vec![0.5; cell.n], 1.0)];
    for j in 0..l {
        let c = &cell.coords[j];
        let mut next = Vec::new();
        for (y, w) in &pts {
            let lo = c.lower.as_ref().map(|b| b.eval(x, y)).unwrap_or(0.0);
            let hi = c.upper.eval(x, y);
            if !(hi > lo) {
                continue;
            }
            for (t, wt) in mapped(&rule, lo, hi) {
                let mut y2 = y.clone();
                y2[j] = t;
                next.push((y2, w * wt));
            }
        }
        pts = next;
    }
    pts
}

/// `∫ g` over the fiber of an `l`-rectilinear cell at `x`, truncated to
/// `y_i ≥ ε_k` on the free coordinates, for every `k`.
pub fn integrate_fiber(
    cell: &MonCell,
    l: usize,
    x: &[f64],
    g: impl Fn(&[f64]) -> f64,
    opts: &OracleOptions,
) -> Result<ConvergenceVerdict> {
    if !cell.is_l_rectilinear(l) {
        return Err(Error::Argument(format!("cell is not {l}-rectilinear")));
    }
    if !cell.base_contains(x) {
        return Err(Error::Domain(format!("x = {x:?} is outside the base")));
    }
    let d = cell.n - l;
    let compact = compact_points(cell, l, x, opts.compact_nodes);
    let mut nodes = opts.start_nodes;
    let mut prev: Option<(Vec<f64>, u64)> = None;
    let mut used = 0u64;
    loop {
        let cost = compact.len() as u64 * ((SHELLS * nodes) as u64).pow(d as u32);
        if prev.is_some() && used + cost > opts.budget {
            break;
        }
        let shells = shell_sums(&compact, l, d, nodes, &g);
        used += cost;
        let total: f64 = shells.iter().sum();
        let agree = prev.as_ref().is_some_and(|(p, _)| {
            let t: f64 = p.iter().sum();
            (t - total).abs() <= 1e-8 * total.abs().max(1e-300)
        });
        prev = Some((shells, used));
        if agree || d == 0 && nodes >= 4 * opts.start_nodes {
            break;
        }
        nodes *= 2;
    }
    let (shells, evaluations) = prev.unwrap();
    if shells.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite quadrature value".into()));
    }
    Ok(verdict_from_shells(&shells, d, evaluations, opts.dead_band))
}

fn shell_sums(compact: &[(Vec<f64>, f64)], l: usize, d: usize, nodes: usize, g: &impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let rule = gl(nodes);
    // Per free dimension: (shell, y, weight including dy = e^{-t} dt).
    let mut axis = Vec::new();
    for k in 0..SHELLS {
        for (t, w) in mapped(&rule, k as f64 * SHELL_WIDTH, (k + 1) as f64 * SHELL_WIDTH) {
            let y = (-t).exp();
            axis.push((k, y, w * y));
        }
    }
    let mut shells = vec![0.0; SHELLS];
    let mut idx = vec![0usize; d];
    for (yc, wc) in compact {
        let mut y = yc.clone();
        loop {
            let mut w = *wc;
            let mut shell = 0;
            for (i, &k) in idx.iter().enumerate() {
                let (s, yv, wv) = axis[k];
                y[l + i] = yv;
                w *= wv;
                shell = shell.max(s);
            }
            let v = g(&y);
            if v != 0.0 {
                shells[shell] += w * v;
            }
            // Odometer.
            let mut pos = 0;
            while pos < d {
                idx[pos] += 1;
                if idx[pos] < axis.len() {
                    break;
                }
                idx[pos] = 0;
                pos += 1;
            }
            if pos == d {
                break;
            }
        }
    }
    shells
}

/// Least-squares fit of `log Δ = c − σT + s·log T` over the outer shells.
fn fit(shells: &[f64]) -> Option<(f64, f64)> {
    let rows: Vec<(f64, f64)> =
        (2..SHELLS).filter(|&k| shells[k] > 0.0).map(|k| ((k + 1) as f64 * SHELL_WIDTH, shells[k].ln())).collect();
    if rows.len() < 4 {
        return None;
    }
    let mut a = [[0.0f64; 3]; 3];
    let mut b = [0.0f64; 3];
    for &(t, v) in &rows {
        let r = [1.0, -t, t.ln()];
        for i in 0..3 {
            for j in 0..3 {
                a[i][j] += r[i] * r[j];
            }
            b[i] += r[i] * v;
        }
    }
    let sol = solve3(a, b)?;
    Some((sol[1], sol[2]))
}

/// Slope of `log Δ` against `log T`, for shells with no exponential trend.
fn fit_log_power(shells: &[f64]) -> Option<f64> {
    let rows: Vec<(f64, f64)> = (2..SHELLS)
        .filter(|&k| shells[k] > 0.0)
        .map(|k| (((k + 1) as f64 * SHELL_WIDTH).ln(), shells[k].ln()))
        .collect();
    if rows.len() < 4 {
        return None;
    }
    let n = rows.len() as f64;
    let (mx, my) = rows.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x / n, b + y / n));
    let sxy: f64 = rows.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = rows.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    Some(sxy / sxx)
}

fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    for c in 0..3 {
        let p = (c..3).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))?;
        if a[p][c].abs() < 1e-300 {
            return None;
        }
        a.swap(p, c);
        b.swap(p, c);
        for r in c + 1..3 {
            let f = a[r][c] / a[c][c];
            for k in c..3 {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = [0.0; 3];
    for c in (0..3).rev() {
        let s: f64 = (c + 1..3).map(|k| a[c][k] * x[k]).sum();
        x[c] = (b[c] - s) / a[c][c];
    }
    Some(x)
}

fn verdict_from_shells(shells: &[f64], d: usize, evaluations: u64, band: f64) -> ConvergenceVerdict {
    let mut partial = Vec::with_capacity(SHELLS);
    let mut acc = 0.0;
    for s in shells {
        acc += s;
        partial.push(acc);
    }
    let total = acc;
    let last = shells[SHELLS - 1];
    // Increments negligible at double precision: nothing left to diverge.
    let negligible = d == 0 || last <= 1e-15 * total.abs() || last == 0.0;
    let (sigma, s) = if negligible { (f64::INFINITY, 0.0) } else { fit(shells).unwrap_or((f64::INFINITY, 0.0)) };
    let verdict = if negligible || sigma > band {
        Verdict::Converges
    } else if sigma < -band {
        Verdict::Diverges
    } else {
        // In the band σ and s trade off against each other; pin σ = 0.
        match fit_log_power(shells) {
            Some(s0) if s0 > -0.5 => Verdict::Diverges,
            Some(s0) if s0 < -1.5 => Verdict::Converges,
            _ => Verdict::Inconclusive,
        }
    };
    let estimate = (verdict == Verdict::Converges).then(|| {
        let prev = shells[SHELLS - 2];
        let tail = if prev > 0.0 && last < prev {
            let rho = last / prev;
            last * rho / (1.0 - rho)
        } else {
            0.0
        };
        total + tail
    });
    ConvergenceVerdict {
        verdict,
        estimate,
        growth_exponent: if sigma.is_finite() { sigma } else { f64::MAX },
        log_power: s,
        partial,
        evaluations,
    }
}

/// `∫ |f|^p |μ|^q |jac| dy` over the fiber at `x`.
pub fn fiber_integral(
    f: &PreparedSum,
    mu: &PreparedSum,
    jac: Option<&Jacobian>,
    p: f64,
    q: f64,
    x: &[f64],
) -> Result<ConvergenceVerdict> {
    fiber_integral_with(f, mu, jac, p, q, x, &OracleOptions::default())
}

pub fn fiber_integral_with(
    f: &PreparedSum,
    mu: &PreparedSum,
    jac: Option<&Jacobian>,
    p: f64,
    q: f64,
    x: &[f64],
    opts: &OracleOptions,
) -> Result<ConvergenceVerdict> {
    if !(p > 0.0 && q > 0.0) {
        return Err(Error::Domain(format!("p and q must be positive, got p = {p}, q = {q}")));
    }
    let g = |y: &[f64]| {
        let fv = f.eval_unchecked(x, y).abs();
        if fv == 0.0 {
            return 0.0;
        }
        let mv = mu.eval_unchecked(x, y).abs();
        let jv = jac.map(|j| j.eval(x, y).abs()).unwrap_or(1.0);
        fv.powf(p) * mv.powf(q) * jv
    };
    integrate_fiber(&f.cell, f.l, x, g, opts)
}

/// The Jacobian `y^γ` on the free coordinates of a piece.
pub fn piece_jacobian(piece: &DiagramPiece) -> Jacobian {
    let n = piece.f.n();
    let l = piece.f.l;
    let exps: Vec<(usize, Rat)> = piece.gamma.iter().enumerate().map(|(i, g)| (l + i, g.clone())).collect();
    Jacobian { sign: 1, monomial: PreparedMonomial::monomial(n, crate::expr::Expr::one(), &exps) }
}

pub fn fiber_integral_piece(piece: &DiagramPiece, p: f64, q: f64, x: &[f64]) -> Result<ConvergenceVerdict> {
    let jac = piece_jacobian(piece);
    fiber_integral(&piece.f, &piece.mu, Some(&jac), p, q, x)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SupEstimate {
    /// Sup at the finest truncation.
    pub sup: f64,
    pub bounded: bool,
    /// `(ε, sup)` for successive halvings.
    pub levels: Vec<(f64, f64)>,
}

/// Sup of `|g|` over a cell fiber, every coordinate kept a relative distance
/// `ε` away from its bounds; repeated while halving `ε`.
pub fn sup_on_cell(cell: &MonCell, x: &[f64], eps: f64, g: impl Fn(&[f64]) -> f64) -> Result<SupEstimate> {
    if !(eps > 0.0 && eps < 0.5) {
        return Err(Error::Domain(format!("eps must lie in (0, 1/2), got {eps}")));
    }
    let n = cell.n;
    const PRIMES: [u8; 8] = [2, 3, 5, 7, 11, 13, 17, 19];
    const HALVINGS: usize = 16;
    const POINTS: usize = 512;
    let mut levels = Vec::new();
    let mut e = eps;
    for _ in 0..=HALVINGS {
        let mut sup: f64 = 0.0;
        let mut visit = |u: &[f64]| {
            let mut y = vec![0.5; n];
            for j in 0..n {
                let c = &cell.coords[j];
                let lo = c.lower.as_ref().map(|b| b.eval(x, &y)).unwrap_or(0.0);
                let hi = c.upper.eval(x, &y);
                if !(hi > lo) {
                    return;
                }
                y[j] = lo + (hi - lo) * u[j];
            }
            let v = g(&y).abs();
            if v.is_finite() {
                sup = sup.max(v);
            }
        };
        // Corners and midpoints of the truncated cube, then Halton points.
        let marks = [e, 0.5, 1.0 - e];
        for mut k in 0..3usize.pow(n as u32) {
            let u: Vec<f64> = (0..n)
                .map(|_| {
                    let m = marks[k % 3];
                    k /= 3;
                    m
                })
                .collect();
            visit(&u);
        }
        for i in 1..=POINTS {
            let u: Vec<f64> = (0..n).map(|j| e + (1.0 - 2.0 * e) * halton::number(PRIMES[j % PRIMES.len()], i)).collect();
            visit(&u);
        }
        levels.push((e, sup));
        e /= 2.0;
    }
    let incs: Vec<f64> = levels.windows(2).map(|w| w[1].1 - w[0].1).collect();
    let last = levels.last().unwrap().1;
    let biggest = incs.iter().cloned().fold(0.0, f64::max);
    let tail = incs[incs.len() - 1];
    let bounded = tail <= 1e-9 * (1.0 + last) || tail <= 0.1 * biggest;
    Ok(SupEstimate { sup: last, bounded, levels })
}

pub fn sup_estimate(f: &PreparedSum, x: &[f64], eps: f64) -> Result<SupEstimate> {
    sup_on_cell(&f.cell, x, eps, |y| f.eval_unchecked(x, y))
}

/// Weighted nodes for integrals over `(0,1)^d` with `y = e^{-t}`,
/// `t ∈ [0, tmax]`.
#[derive(Clone, Debug)]
pub struct Quadrature {
    pub points: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl Quadrature {
    pub fn exp_cube(d: usize, panels: usize, nodes: usize, tmax: f64) -> Quadrature {
        let rule = gl(nodes);
        let width = tmax / panels as f64;
        let mut axis = Vec::new();
        for k in 0..panels {
            for (t, w) in mapped(&rule, k as f64 * width, (k + 1) as f64 * width) {
                let y = (-t).exp();
                axis.push((y, w * y));
            }
        }
        let mut points = vec![Vec::new()];
        let mut weights = vec![1.0];
        for _ in 0..d {
            let mut np = Vec::new();
            let mut nw = Vec::new();
            for (p, w) in points.iter().zip(&weights) {
                for &(y, wy) in &axis {
                    let mut q = p.clone();
                    q.push(y);
                    np.push(q);
                    nw.push(w * wy);
                }
            }
            points = np;
            weights = nw;
        }
        Quadrature { points, weights }
    }

    pub fn integrate(&self, g: impl Fn(&[f64]) -> f64) -> f64 {
        self.points.iter().zip(&self.weights).map(|(p, w)| w * g(p)).sum()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TriangleCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
    /// `rhs − lhs`.
    pub slack: f64,
}

pub type Family<'a> = [&'a dyn Fn(&[f64]) -> f64];

/// `∫|Σf_i|^p|Σg_j|^q` against the bound by the pairwise integrals.
pub fn check_triangle(fs: &Family, gs: &Family, p: f64, q: f64, quad: &Quadrature) -> Result<TriangleCheck> {
    if !(p > 0.0 && q > 0.0) {
        return Err(Error::Domain(format!("p and q must be positive, got p = {p}, q = {q}")));
    }
    let lhs = quad.integrate(|y| {
        let a: f64 = fs.iter().map(|f| f(y)).sum();
        let b: f64 = gs.iter().map(|g| g(y)).sum();
        a.abs().powf(p) * b.abs().powf(q)
    });
    let big_m = p.max(q);
    let pair = |f: &dyn Fn(&[f64]) -> f64, g: &dyn Fn(&[f64]) -> f64| quad.integrate(|y| f(y).abs().powf(p) * g(y).abs().powf(q));
    let mut rhs = 0.0;
    for f in fs {
        for g in gs {
            let v = pair(*f, *g);
            rhs += if big_m < 1.0 { v } else { v.powf(1.0 / big_m) };
        }
    }
    if big_m >= 1.0 {
        rhs = rhs.powf(big_m);
    }
    let holds = lhs <= rhs + 1e-12 * rhs.abs();
    Ok(TriangleCheck { lhs, rhs, holds, slack: rhs - lhs })
}

/// `(Σx)^p ≤ Σx^p` for `0 < p ≤ 1`, in floating point.
pub fn weak_triangle(xs: &[f64], p: f64) -> Result<TriangleCheck> {
    if !(p > 0.0 && p <= 1.0) || xs.iter().any(|&v| v < 0.0) {
        return Err(Error::Domain("need 0 < p <= 1 and nonnegative summands".into()));
    }
    let lhs = xs.iter().sum::<f64>().powf(p);
    let rhs: f64 = xs.iter().map(|v| v.powf(p)).sum();
    Ok(TriangleCheck { lhs, rhs, holds: lhs <= rhs + 1e-12 * rhs, slack: rhs - lhs })
}

/// Exact form with `x_i = z_i^b` and `p = a/b`: `(Σ z_i^b)^a ≤ (Σ z_i^a)^b`.
pub fn weak_triangle_exact(zs: &[Rat], a: u32, b: u32) -> Result<bool> {
    if a == 0 || a > b || zs.iter().any(|z| z.is_negative()) {
        return Err(Error::Domain("need 0 < a <= b and nonnegative z".into()));
    }
    let s_b: Rat = zs.iter().map(|z| z.powi(b as i32)).sum();
    let s_a: Rat = zs.iter().map(|z| z.powi(a as i32)).sum();
    Ok(s_b.powi(a as i32) <= s_a.powi(b as i32))
}

/// `10^{-3}, …, 10^{-9}`.
pub fn default_curve_grid() -> Vec<f64> {
    (3..=9).map(|k| 10f64.powi(-k)).collect()
}

/// Limit of `g∘η(x,t) / (x^{p+qt}(log x)^r)` as `x → 0`, Aitken-extrapolated
/// from the last three grid points.
pub fn limit_along_curve(g: &BTreeMap<u32, TruncPoly>, lead: &Leading, t: f64, grid: &[f64]) -> Result<f64> {
    let eps = lead.eps.to_f64();
    if !(t > 0.0 && t < eps) {
        return Err(Error::Domain(format!("t = {t} is outside (0, {eps})")));
    }
    if grid.len() < 3 {
        return Err(Error::Argument("the x grid needs at least three points".into()));
    }
    let mut vals = Vec::new();
    for &x in grid {
        let norm = x.powf(lead.p as f64 + lead.q as f64 * t) * x.ln().powi(lead.r as i32);
        let v = eval_curve(g, x, t) / norm;
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite ratio at x = {x}")));
        }
        vals.push(v);
    }
    let k = vals.len();
    let (a, b, c) = (vals[k - 3], vals[k - 2], vals[k - 1]);
    let den = (c - b) - (b - a);
    let acc = if den.abs() > 1e-14 * c.abs().max(1.0) { c - (c - b) * (c - b) / den } else { c };
    Ok(if acc.is_finite() && (acc - c).abs() <= (c - b).abs().max(1e-15) * 10.0 { acc } else { c })
}
