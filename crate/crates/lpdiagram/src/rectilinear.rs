//! Cells with monomial bounds, the pullback constructions and the
//! rectilinearization driver.
//!
//! A cell over a box base `E ⊂ R^m` is described coordinate by coordinate as
//! `a_j(x, y_<j) < y_j < b_j(x, y_<j)` where each bound is `0` or a prepared
//! monomial `ĉ(x)·y^α·u` with a certified unit. A pullback step replaces the
//! cell by another one together with a map `F` from the new cell onto (part
//! of) the old one. Everything that lives on the old cell (later bounds, the
//! Jacobian so far, the components of the composed map) is rewritten exactly.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::exact::Rat;
use crate::expr::{Expr, Iv};
use crate::prepared::{rat_pow_bounds, CoeffFn, PreparedTerm, UnitSeries};
use crate::{Error, Result};

fn one_expr() -> Expr {
    Expr::one()
}

/// `coef(x)·Π y_i^{y_exp_i}·unit(x, y)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreparedMonomial {
    #[serde(default = "one_expr")]
    pub coef: Expr,
    #[serde(default)]
    pub y_exp: Vec<Rat>,
    #[serde(default)]
    pub unit: UnitSeries,
}

impl PreparedMonomial {
    pub fn constant(n: usize, c: Rat) -> PreparedMonomial {
        PreparedMonomial { coef: Expr::Const(c), y_exp: vec![Rat::zero(); n], unit: UnitSeries::one() }
    }

    pub fn one(n: usize) -> PreparedMonomial {
        PreparedMonomial::constant(n, Rat::one())
    }

    pub fn y(n: usize, j: usize) -> PreparedMonomial {
        PreparedMonomial::monomial(n, Expr::one(), &[(j, Rat::one())])
    }

    pub fn monomial(n: usize, coef: Expr, exps: &[(usize, Rat)]) -> PreparedMonomial {
        let mut y_exp = vec![Rat::zero(); n];
        for (j, e) in exps {
            y_exp[*j] = e.clone();
        }
        PreparedMonomial { coef, y_exp, unit: UnitSeries::one() }
    }

    pub fn with_unit(mut self, unit: UnitSeries) -> PreparedMonomial {
        self.unit = unit;
        self
    }

    pub fn n(&self) -> usize {
        self.y_exp.len()
    }

    pub fn is_one(&self) -> bool {
        self.coef.is_one() && self.y_exp.iter().all(|e| e.is_zero()) && self.unit.is_one()
    }

    /// Same value as a product of `coef` and `y`-powers only.
    pub fn is_pure_monomial(&self) -> bool {
        self.unit.is_one()
    }

    pub fn uses_y(&self, j: usize) -> bool {
        !self.y_exp[j].is_zero() || self.unit.expr.uses_y_index(j)
    }

    pub fn max_y_used(&self) -> Option<usize> {
        (0..self.n()).rev().find(|&j| self.uses_y(j))
    }

    pub fn monomial_expr(&self) -> Expr {
        let mut fs = vec![self.coef.clone()];
        for (j, e) in self.y_exp.iter().enumerate() {
            if !e.is_zero() {
                fs.push(Expr::pow(Expr::Y(j), e.clone()));
            }
        }
        Expr::product(fs)
    }

    pub fn value_expr(&self) -> Expr {
        Expr::mul(self.monomial_expr(), self.unit.expr.clone())
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut v = self.coef.eval(x, y) * self.unit.eval(x, y);
        for (yj, e) in y.iter().zip(&self.y_exp) {
            if !e.is_zero() {
                v *= yj.powf(e.to_f64());
            }
        }
        v
    }

    pub fn mul(&self, o: &PreparedMonomial) -> PreparedMonomial {
        PreparedMonomial {
            coef: Expr::mul(self.coef.clone(), o.coef.clone()),
            y_exp: self.y_exp.iter().zip(&o.y_exp).map(|(a, b)| a + b).collect(),
            unit: self.unit.mul(&o.unit),
        }
    }

    pub fn powr(&self, e: &Rat) -> PreparedMonomial {
        PreparedMonomial {
            coef: Expr::pow(self.coef.clone(), e.clone()),
            y_exp: self.y_exp.iter().map(|a| a * e).collect(),
            unit: self.unit.powr(e),
        }
    }

    pub fn recip(&self) -> PreparedMonomial {
        self.powr(&Rat::int(-1))
    }

    /// Enclosure of `coef·y^α` without the unit.
    pub fn monomial_range(&self, xr: &[Iv], yr: &[Iv]) -> Iv {
        self.monomial_expr().range(xr, yr)
    }

    /// Enclosure using the unit certificate.
    pub fn range(&self, xr: &[Iv], yr: &[Iv]) -> Iv {
        self.monomial_range(xr, yr).mul(Iv::new(self.unit.lo.to_f64(), self.unit.hi.to_f64()))
    }

    /// Moves `y_j^{α_j}` into the unit, given `lo ≤ y_j ≤ 1` on the cell.
    pub fn absorb(&self, j: usize, lo: &Rat) -> PreparedMonomial {
        let e = self.y_exp[j].clone();
        if e.is_zero() {
            return self.clone();
        }
        let (a, b) = rat_pow_bounds(lo, &Rat::one(), &e);
        let u = UnitSeries { expr: Expr::pow(Expr::Y(j), e), lo: a, hi: b };
        let mut out = self.clone();
        out.y_exp[j] = Rat::zero();
        out.unit = out.unit.mul(&u);
        out
    }

    fn subst_unit(&self, j: usize, repl: &Expr) -> PreparedMonomial {
        let mut out = self.clone();
        out.unit = self.unit.subst_expr(|e| e.subst_y(j, repl));
        out
    }

    /// `self(x, comps(x, y))` for prepared components.
    pub fn compose(&self, comps: &[PreparedMonomial]) -> PreparedMonomial {
        let n = comps[0].n();
        let mut out = PreparedMonomial { coef: self.coef.clone(), y_exp: vec![Rat::zero(); n], unit: UnitSeries::one() };
        for (c, e) in comps.iter().zip(&self.y_exp) {
            if !e.is_zero() {
                out = out.mul(&c.powr(e));
            }
        }
        let args: Vec<Expr> = comps.iter().map(|c| c.value_expr()).collect();
        out.unit = out.unit.mul(&self.unit.subst_expr(|u| u.subst_all_y(&args)));
        out
    }

    fn swap(&self, i: usize, j: usize) -> PreparedMonomial {
        let mut out = self.clone();
        out.y_exp.swap(i, j);
        out.unit = self.unit.subst_expr(|e| e.swap_y(i, j));
        out
    }
}

impl fmt::Display for PreparedMonomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.monomial_expr())?;
        if !self.unit.is_one() {
            write!(f, " * [{} in [{}, {}]]", self.unit.expr, self.unit.lo, self.unit.hi)?;
        }
        Ok(())
    }
}

/// `(c_1(x)·y^{γ_1}, …, c_M(x)·y^{γ_M})`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonomialMap {
    pub components: Vec<PreparedMonomial>,
}

impl MonomialMap {
    pub fn coordinates(n: usize) -> MonomialMap {
        MonomialMap { components: (0..n).map(|j| PreparedMonomial::y(n, j)).collect() }
    }
}

/// Bounds of one fiber coordinate; `lower = None` means `0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoordBounds {
    #[serde(default)]
    pub lower: Option<PreparedMonomial>,
    pub upper: PreparedMonomial,
}

impl CoordBounds {
    pub fn free(n: usize) -> CoordBounds {
        CoordBounds { lower: None, upper: PreparedMonomial::one(n) }
    }
}

/// Cell over a rational box base.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MonCell {
    pub m: usize,
    pub n: usize,
    pub base: Vec<(Rat, Rat)>,
    pub coords: Vec<CoordBounds>,
    /// Number of leading compact coordinates, when the cell is rectilinear.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l: Option<usize>,
    /// Translation data `θ_j(x, y_<j)`; only the zero center is rectilinearized.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub center: Option<Vec<Expr>>,
}

#[derive(Deserialize)]
struct RawCoord {
    #[serde(default)]
    lower: Option<PreparedMonomial>,
    #[serde(default)]
    upper: Option<PreparedMonomial>,
}

#[derive(Deserialize)]
struct RawCell {
    m: usize,
    n: usize,
    base: Vec<(Rat, Rat)>,
    #[serde(default)]
    coords: Option<Vec<RawCoord>>,
    #[serde(default)]
    l: Option<usize>,
    #[serde(default)]
    center: Option<Vec<Expr>>,
}

impl<'de> Deserialize<'de> for MonCell {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<MonCell, D::Error> {
        let raw = RawCell::deserialize(d)?;
        let n = raw.n;
        let pad = |mut p: PreparedMonomial| -> PreparedMonomial {
            if p.y_exp.is_empty() {
                p.y_exp = vec![Rat::zero(); n];
            }
            p
        };
        let coords = match raw.coords {
            None => (0..n).map(|_| CoordBounds::free(n)).collect(),
            Some(cs) => cs
                .into_iter()
                .map(|c| CoordBounds {
                    lower: c.lower.map(pad),
                    upper: c.upper.map(pad).unwrap_or_else(|| PreparedMonomial::one(n)),
                })
                .collect(),
        };
        Ok(MonCell { m: raw.m, n, base: raw.base, coords, l: raw.l, center: raw.center })
    }
}

impl MonCell {
    /// `base × (0,1)^n`.
    pub fn unit_box(m: usize, n: usize, base: Vec<(Rat, Rat)>) -> MonCell {
        MonCell { m, n, base, coords: (0..n).map(|_| CoordBounds::free(n)).collect(), l: Some(0), center: None }
    }

    /// Rectilinear cell whose first coordinates lie in constant boxes.
    pub fn rect_with_inner(m: usize, n: usize, base: Vec<(Rat, Rat)>, inner: Vec<(Rat, Rat)>) -> MonCell {
        let mut c = MonCell::unit_box(m, n, base);
        for (j, (lo, hi)) in inner.iter().enumerate() {
            c.coords[j] =
                CoordBounds { lower: Some(PreparedMonomial::constant(n, lo.clone())), upper: PreparedMonomial::constant(n, hi.clone()) };
        }
        c.l = Some(inner.len());
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.base.len() != self.m {
            return Err(Error::Argument(format!("base has {} intervals, expected m = {}", self.base.len(), self.m)));
        }
        if self.coords.len() != self.n {
            return Err(Error::Argument(format!("cell has {} coordinates, expected n = {}", self.coords.len(), self.n)));
        }
        for (i, (lo, hi)) in self.base.iter().enumerate() {
            if lo >= hi {
                return Err(Error::Argument(format!("base interval {} is empty", i + 1)));
            }
        }
        for (j, c) in self.coords.iter().enumerate() {
            for b in c.lower.iter().chain(std::iter::once(&c.upper)) {
                if b.n() != self.n {
                    return Err(Error::Argument(format!("bound of y{} has the wrong arity", j + 1)));
                }
                if b.coef.uses_y() {
                    return Err(Error::Argument(format!("bound coefficient of y{} depends on y", j + 1)));
                }
                if let Some(k) = b.max_y_used() {
                    if k >= j {
                        return Err(Error::Argument(format!("bound of y{} depends on y{}", j + 1, k + 1)));
                    }
                }
                if !b.unit.lo.is_positive() || b.unit.lo > b.unit.hi {
                    return Err(Error::Argument(format!("unit certificate of y{} is invalid", j + 1)));
                }
            }
        }
        Ok(())
    }

    pub fn is_l_rectilinear(&self, l: usize) -> bool {
        if l > self.n {
            return false;
        }
        self.coords.iter().enumerate().all(|(j, c)| {
            if j < l {
                c.lower.is_some() && c.upper.y_exp.iter().all(|e| e.is_zero())
            } else {
                c.lower.is_none() && c.upper.is_one()
            }
        })
    }

    pub fn base_iv(&self) -> Vec<Iv> {
        self.base.iter().map(|(a, b)| Iv::new(a.to_f64(), b.to_f64())).collect()
    }

    pub fn base_contains(&self, x: &[f64]) -> bool {
        x.iter().zip(&self.base).all(|(v, (a, b))| *v > a.to_f64() && *v < b.to_f64())
    }

    pub fn contains_f64(&self, x: &[f64], y: &[f64]) -> bool {
        if !self.base_contains(x) {
            return false;
        }
        self.coords.iter().enumerate().all(|(j, c)| {
            let lo = c.lower.as_ref().map(|b| b.eval(x, y)).unwrap_or(0.0);
            let hi = c.upper.eval(x, y);
            y[j] > lo && y[j] < hi
        })
    }

    /// Enclosures of every coordinate over the whole cell.
    pub fn coord_ranges(&self, xr: &[Iv]) -> Vec<Iv> {
        let mut yr: Vec<Iv> = Vec::with_capacity(self.n);
        for c in &self.coords {
            let lo = c.lower.as_ref().map(|b| b.range(xr, &pad_ranges(&yr, self.n)).lo.max(0.0)).unwrap_or(0.0);
            let hi = c.upper.range(xr, &pad_ranges(&yr, self.n)).hi;
            yr.push(Iv::new(lo, hi.max(lo)));
        }
        yr
    }

    /// A point of the fiber over `x`, each coordinate uniform between its bounds.
    pub fn sample_fiber(&self, x: &[f64], rng: &mut impl Rng) -> Option<Vec<f64>> {
        let mut y = vec![0.5; self.n];
        for (j, c) in self.coords.iter().enumerate() {
            let lo = c.lower.as_ref().map(|b| b.eval(x, &y)).unwrap_or(0.0);
            let hi = c.upper.eval(x, &y);
            if !(hi > lo) {
                return None;
            }
            y[j] = lo + (hi - lo) * rng.gen_range(1e-9..1.0 - 1e-9);
        }
        Some(y)
    }

    /// A point with every coordinate inside the middle part `[t, 1−t]` of its
    /// fiber interval.
    pub fn sample_inner(&self, x: &[f64], t: f64, rng: &mut impl Rng) -> Option<Vec<f64>> {
        let mut y = vec![0.5; self.n];
        for (j, c) in self.coords.iter().enumerate() {
            let lo = c.lower.as_ref().map(|b| b.eval(x, &y)).unwrap_or(0.0);
            let hi = c.upper.eval(x, &y);
            if !(hi > lo) {
                return None;
            }
            y[j] = lo + (hi - lo) * rng.gen_range(t..1.0 - t);
        }
        Some(y)
    }

    pub fn sample_base(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.base.iter().map(|(a, b)| a.to_f64() + (b.to_f64() - a.to_f64()) * rng.gen_range(0.02..0.98)).collect()
    }
}

fn pad_ranges(yr: &[Iv], n: usize) -> Vec<Iv> {
    let mut v = yr.to_vec();
    v.resize(n, Iv::new(0.0, 1.0));
    v
}

impl fmt::Display for MonCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (a, b)) in self.base.iter().enumerate() {
            write!(f, "{a} < x{} < {b}; ", i + 1)?;
        }
        for (j, c) in self.coords.iter().enumerate() {
            let lo = c.lower.as_ref().map(|b| b.to_string()).unwrap_or_else(|| "0".into());
            write!(f, "{lo} < y{} < {}", j + 1, c.upper)?;
            if j + 1 < self.coords.len() {
                write!(f, "; ")?;
            }
        }
        Ok(())
    }
}

/// Restriction to a sub-cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Restriction {
    Base { base: Vec<(Rat, Rat)> },
    Lower { j: usize, bound: PreparedMonomial },
    Upper { j: usize, bound: PreparedMonomial },
}

/// One of the six constructions. Coordinates are 0-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "snake_case")]
pub enum PullbackStep {
    /// Moves the powers of `y_j` in everything above `j` into units.
    Adjustment { j: usize },
    Restriction(Restriction),
    PowerSub { j: usize, p: u32 },
    Blowup { j: usize },
    Flip { j: usize },
    Swap { i: usize, j: usize },
}

/// A step together with the data it was applied with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AppliedStep {
    pub step: PullbackStep,
    /// Blowup: the upper bound divided out.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bound: Option<PreparedMonomial>,
    /// Adjustment and flip: certified `inf y_j` on the cell.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lo: Option<Rat>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub triangle: bool,
}

impl AppliedStep {
    fn plain(step: PullbackStep) -> AppliedStep {
        AppliedStep { step, bound: None, lo: None, triangle: false }
    }

    /// New coordinates to old ones.
    pub fn forward_point(&self, x: &[f64], y: &mut [f64]) {
        match &self.step {
            PullbackStep::PowerSub { j, p } => y[*j] = y[*j].powi(*p as i32),
            PullbackStep::Blowup { j } => {
                let b = self.bound.as_ref().unwrap().eval(x, y);
                y[*j] *= b;
            }
            PullbackStep::Flip { j } => y[*j] = 1.0 - y[*j],
            PullbackStep::Swap { i, j } => y.swap(*i, *j),
            PullbackStep::Adjustment { .. } | PullbackStep::Restriction(_) => {}
        }
    }

    /// Old coordinates to new ones.
    pub fn backward_point(&self, x: &[f64], y: &mut [f64]) {
        match &self.step {
            PullbackStep::PowerSub { j, p } => y[*j] = y[*j].powf(1.0 / *p as f64),
            PullbackStep::Blowup { j } => {
                let b = self.bound.as_ref().unwrap().eval(x, y);
                y[*j] /= b;
            }
            PullbackStep::Flip { j } => y[*j] = 1.0 - y[*j],
            PullbackStep::Swap { i, j } => y.swap(*i, *j),
            PullbackStep::Adjustment { .. } | PullbackStep::Restriction(_) => {}
        }
    }

    /// `pm ∘ F_step`, exactly.
    pub fn pull(&self, pm: &PreparedMonomial) -> Result<PreparedMonomial> {
        Ok(match &self.step {
            PullbackStep::Adjustment { j } => pm.absorb(*j, self.lo.as_ref().unwrap()),
            PullbackStep::Restriction(_) => pm.clone(),
            PullbackStep::PowerSub { j, p } => {
                let pr = Rat::int(*p as i64);
                let mut out = pm.subst_unit(*j, &Expr::pow(Expr::Y(*j), pr.clone()));
                out.y_exp[*j] = &out.y_exp[*j] * &pr;
                out
            }
            PullbackStep::Blowup { j } => {
                let b = self.bound.as_ref().unwrap();
                let repl = Expr::mul(Expr::Y(*j), b.value_expr());
                let out = pm.subst_unit(*j, &repl);
                let e = pm.y_exp[*j].clone();
                if e.is_zero() {
                    out
                } else {
                    out.mul(&b.powr(&e))
                }
            }
            PullbackStep::Flip { j } => {
                if !pm.y_exp[*j].is_zero() {
                    return Err(Error::StepRejected(format!(
                        "flip in y{}: a monomial still contains a power of y{}; adjust first",
                        j + 1,
                        j + 1
                    )));
                }
                pm.subst_unit(*j, &Expr::one_minus(Expr::Y(*j)))
            }
            PullbackStep::Swap { i, j } => pm.swap(*i, *j),
        })
    }
}

/// `det ∂F/∂y = sign·H(x)·y^γ·U(x, y)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Jacobian {
    pub sign: i8,
    pub monomial: PreparedMonomial,
}

impl Jacobian {
    pub fn identity(n: usize) -> Jacobian {
        Jacobian { sign: 1, monomial: PreparedMonomial::one(n) }
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        self.sign as f64 * self.monomial.eval(x, y)
    }

    pub fn gamma(&self) -> &[Rat] {
        &self.monomial.y_exp
    }
}

/// Cell and everything tracked through a sequence of steps.
#[derive(Clone, Debug)]
pub struct Tracked {
    pub source: MonCell,
    pub cell: MonCell,
    pub phi: MonomialMap,
    pub jacobian: Jacobian,
    /// Old coordinates as functions of the current ones.
    pub forward: Vec<PreparedMonomial>,
    /// Current coordinates as functions of the old ones; lost after a flip.
    pub inverse: Option<Vec<PreparedMonomial>>,
    pub steps: Vec<AppliedStep>,
    pub flips: Vec<u32>,
}

impl Tracked {
    pub fn new(cell: MonCell, phi: MonomialMap) -> Tracked {
        let n = cell.n;
        Tracked {
            source: cell.clone(),
            cell,
            phi,
            jacobian: Jacobian::identity(n),
            forward: (0..n).map(|j| PreparedMonomial::y(n, j)).collect(),
            inverse: Some((0..n).map(|j| PreparedMonomial::y(n, j)).collect()),
            steps: Vec::new(),
            flips: vec![0; n],
        }
    }

    fn inf_of(&self, j: usize) -> Result<Rat> {
        let c = &self.cell.coords[j];
        let xr = self.cell.base_iv();
        let yr = self.cell.coord_ranges(&xr);
        let lo = match &c.lower {
            None => 0.0,
            Some(b) => b.range(&xr, &yr).lo,
        };
        if !(lo > 0.0) {
            return Err(Error::StepRejected(format!("y{} is not bounded below by a positive constant", j + 1)));
        }
        Ok(Rat::below(lo))
    }

    /// Applies a step; rejects it if a precondition fails.
    pub fn apply(&mut self, step: PullbackStep) -> Result<()> {
        let n = self.cell.n;
        let mut applied = AppliedStep::plain(step.clone());
        let mut cell = self.cell.clone();
        match &step {
            PullbackStep::Adjustment { j } => {
                check_index(*j, n)?;
                if !cell.coords[*j].upper.is_one() {
                    return Err(Error::StepRejected(format!("adjustment in y{}: upper bound is not 1", j + 1)));
                }
                applied.lo = Some(self.inf_of(*j)?);
            }
            PullbackStep::Restriction(Restriction::Base { base }) => {
                if base.len() != cell.m || base.iter().zip(&cell.base).any(|((a, b), (c, d))| a < c || b > d || a >= b) {
                    return Err(Error::StepRejected("base restriction is not a nonempty sub-box".into()));
                }
                cell.base = base.clone();
            }
            PullbackStep::Restriction(Restriction::Lower { j, bound }) => {
                check_index(*j, n)?;
                check_bound(bound, *j, n)?;
                cell.coords[*j].lower = Some(bound.clone());
            }
            PullbackStep::Restriction(Restriction::Upper { j, bound }) => {
                check_index(*j, n)?;
                check_bound(bound, *j, n)?;
                cell.coords[*j].upper = bound.clone();
            }
            PullbackStep::PowerSub { j, p } => {
                check_index(*j, n)?;
                if *p < 1 {
                    return Err(Error::StepRejected("power substitution needs p ≥ 1".into()));
                }
                let root = Rat::new(1, *p as i64);
                let c = &mut cell.coords[*j];
                c.lower = c.lower.as_ref().map(|b| b.powr(&root));
                if !c.upper.is_one() {
                    c.upper = c.upper.powr(&root);
                }
            }
            PullbackStep::Blowup { j } => {
                check_index(*j, n)?;
                let b = cell.coords[*j].upper.clone();
                let c = &mut cell.coords[*j];
                c.lower = c.lower.as_ref().map(|a| a.mul(&b.recip()));
                c.upper = PreparedMonomial::one(n);
                applied.bound = Some(b);
            }
            PullbackStep::Flip { j } => {
                check_index(*j, n)?;
                if self.flips[*j] > 0 {
                    return Err(Error::StepRejected(format!("y{} was already flipped", j + 1)));
                }
                if !cell.coords[*j].upper.is_one() {
                    return Err(Error::StepRejected(format!("flip in y{}: upper bound is not 1", j + 1)));
                }
                let lo = self.inf_of(*j)?;
                let a = cell.coords[*j].lower.clone().unwrap();
                cell.coords[*j] = CoordBounds { lower: None, upper: one_minus(&a, &cell, *j)? };
                applied.lo = Some(lo);
            }
            PullbackStep::Swap { i, j } => {
                let (i, j) = (*i.min(j), *i.max(j));
                check_index(j, n)?;
                if i == j {
                    return Err(Error::StepRejected("swap needs two distinct coordinates".into()));
                }
                let ci = cell.coords[i].clone();
                let cj = cell.coords[j].clone();
                let middle_free = (i + 1..j).all(|k| {
                    let c = &cell.coords[k];
                    !c.upper.uses_y(i) && !c.lower.as_ref().is_some_and(|b| b.uses_y(i))
                });
                let j_early = (i..j).all(|k| !cj.upper.uses_y(k) && !cj.lower.as_ref().is_some_and(|b| b.uses_y(k)));
                let free_i = ci.lower.is_none() && ci.upper.is_one();
                let tri = free_i
                    && cj.upper.is_one()
                    && cj.lower.as_ref() == Some(&PreparedMonomial::y(n, i))
                    && middle_free;
                if middle_free && j_early {
                    cell.coords[i] = cj.clone();
                    cell.coords[j] = ci.clone();
                } else if tri {
                    cell.coords[i] = CoordBounds::free(n);
                    cell.coords[j] = CoordBounds { lower: None, upper: PreparedMonomial::y(n, i) };
                    applied.triangle = true;
                } else {
                    return Err(Error::StepRejected(format!(
                        "swap of y{} and y{} would not give a cell",
                        i + 1,
                        j + 1
                    )));
                }
                applied.step = PullbackStep::Swap { i, j };
            }
        }
        // Bounds of later coordinates (for swaps: of every coordinate above i).
        let from = match &applied.step {
            PullbackStep::Swap { j, .. } => *j + 1,
            PullbackStep::Restriction(_) => n,
            s => step_index(s) + 1,
        };
        for k in from..n {
            let c = &mut cell.coords[k];
            c.lower = match &c.lower {
                Some(b) => Some(applied.pull(b)?),
                None => None,
            };
            c.upper = applied.pull(&c.upper)?;
        }
        self.pull_tracked(&applied)?;
        self.push_inverse(&applied);
        self.phi = pull_phi(&self.phi, &applied);
        if let PullbackStep::Flip { j } = applied.step {
            self.flips[j] += 1;
        }
        if let PullbackStep::Swap { i, j } = applied.step {
            self.flips.swap(i, j);
        }
        self.cell = cell;
        self.steps.push(applied);
        Ok(())
    }

    fn pull_tracked(&mut self, st: &AppliedStep) -> Result<()> {
        let n = self.cell.n;
        let mut jac = st.pull(&self.jacobian.monomial)?;
        match &st.step {
            PullbackStep::PowerSub { j, p } => {
                let d = PreparedMonomial::monomial(n, Expr::int(*p as i64), &[(*j, Rat::int(*p as i64 - 1))]);
                jac = jac.mul(&d);
            }
            PullbackStep::Blowup { .. } => jac = jac.mul(st.bound.as_ref().unwrap()),
            PullbackStep::Flip { .. } => self.jacobian.sign = -self.jacobian.sign,
            PullbackStep::Swap { .. } => self.jacobian.sign = -self.jacobian.sign,
            _ => {}
        }
        self.jacobian.monomial = jac;
        let fw: Result<Vec<_>> = self.forward.iter().map(|c| st.pull(c)).collect();
        self.forward = fw?;
        Ok(())
    }

    fn push_inverse(&mut self, st: &AppliedStep) {
        let Some(inv) = self.inverse.take() else { return };
        self.inverse = match &st.step {
            PullbackStep::PowerSub { j, p } => {
                let mut v = inv;
                v[*j] = v[*j].powr(&Rat::new(1, *p as i64));
                Some(v)
            }
            PullbackStep::Blowup { j } => {
                let b = st.bound.as_ref().unwrap().compose(&inv);
                let mut v = inv;
                v[*j] = v[*j].mul(&b.recip());
                Some(v)
            }
            PullbackStep::Flip { .. } => None,
            PullbackStep::Swap { i, j } => {
                let mut v = inv;
                v.swap(*i, *j);
                Some(v)
            }
            _ => Some(inv),
        };
    }

    pub fn forward_point(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let mut v = y.to_vec();
        for st in self.steps.iter().rev() {
            st.forward_point(x, &mut v);
        }
        v
    }

    pub fn backward_point(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let mut v = y.to_vec();
        for st in &self.steps {
            st.backward_point(x, &mut v);
        }
        v
    }
}

fn check_index(j: usize, n: usize) -> Result<()> {
    if j >= n {
        return Err(Error::StepRejected(format!("coordinate index {} out of range", j + 1)));
    }
    Ok(())
}

fn check_bound(b: &PreparedMonomial, j: usize, n: usize) -> Result<()> {
    if b.n() != n || b.coef.uses_y() || b.max_y_used().is_some_and(|k| k >= j) {
        return Err(Error::StepRejected(format!("restriction bound for y{} must depend on y_<{} only", j + 1, j + 1)));
    }
    Ok(())
}

fn step_index(s: &PullbackStep) -> usize {
    match s {
        PullbackStep::Adjustment { j }
        | PullbackStep::PowerSub { j, .. }
        | PullbackStep::Blowup { j }
        | PullbackStep::Flip { j } => *j,
        PullbackStep::Swap { j, .. } => *j,
        PullbackStep::Restriction(_) => 0,
    }
}

/// `1 − a` as a bound: an `x`-coefficient when `a` depends on `x` only,
/// otherwise a unit certified by `sup a < 1`.
fn one_minus(a: &PreparedMonomial, cell: &MonCell, j: usize) -> Result<PreparedMonomial> {
    let n = cell.n;
    let xr = cell.base_iv();
    let yr = cell.coord_ranges(&xr);
    let r = a.range(&xr, &yr);
    // An x-only bound needs no certificate: it stays below the old upper bound 1
    // wherever the fiber is nonempty.
    if a.max_y_used().is_none() && r.hi <= 1.0 + 1e-12 {
        if let Some(c) = a.unit.as_constant() {
            let coef = Expr::one_minus(Expr::mul(a.coef.clone(), Expr::Const(c)));
            return Ok(PreparedMonomial { coef, y_exp: vec![Rat::zero(); n], unit: UnitSeries::one() });
        }
    }
    if !(r.hi < 1.0) {
        return Err(Error::StepRejected(format!("flip in y{}: cannot certify that the lower bound stays below 1", j + 1)));
    }
    let unit = UnitSeries { expr: Expr::one_minus(a.value_expr()), lo: Rat::below(1.0 - r.hi), hi: Rat::above(1.0 - r.lo.max(0.0)) };
    Ok(PreparedMonomial::one(n).with_unit(unit))
}

/// Monomial part of the pullback; units never enter `φ`.
fn pull_phi(phi: &MonomialMap, st: &AppliedStep) -> MonomialMap {
    let strip = |p: &PreparedMonomial| PreparedMonomial { unit: UnitSeries::one(), ..p.clone() };
    let mut comps: Vec<PreparedMonomial> = match &st.step {
        PullbackStep::Adjustment { j } | PullbackStep::Flip { j } => {
            let mut v: Vec<PreparedMonomial> = phi
                .components
                .iter()
                .map(|c| {
                    let mut c = c.clone();
                    if c != PreparedMonomial::y(c.n(), *j) {
                        c.y_exp[*j] = Rat::zero();
                    }
                    c
                })
                .collect();
            let n = st.lo.as_ref().map(|_| 0).unwrap_or(0) + phi.components.first().map(|c| c.n()).unwrap_or(0);
            if n > 0 && !v.contains(&PreparedMonomial::y(n, *j)) {
                v.push(PreparedMonomial::y(n, *j));
            }
            v
        }
        PullbackStep::Blowup { j } => {
            let b = strip(st.bound.as_ref().unwrap());
            phi.components
                .iter()
                .map(|c| {
                    let e = c.y_exp[*j].clone();
                    if e.is_zero() {
                        c.clone()
                    } else {
                        c.mul(&b.powr(&e))
                    }
                })
                .collect()
        }
        _ => phi.components.iter().map(|c| st.pull(c).unwrap_or_else(|_| c.clone())).collect(),
    };
    for c in &mut comps {
        *c = strip(c);
    }
    comps.dedup();
    MonomialMap { components: comps }
}

/// Applies one step to a cell and its monomial map.
pub fn apply_step(cell: &MonCell, phi: &MonomialMap, step: &PullbackStep) -> Result<(MonCell, MonomialMap)> {
    let mut t = Tracked::new(cell.clone(), phi.clone());
    t.apply(step.clone())?;
    Ok((t.cell, t.phi))
}

/// Jacobian of the composition of `steps` started on `cell`.
pub fn jacobian_of(cell: &MonCell, steps: &[PullbackStep]) -> Result<Jacobian> {
    let mut t = Tracked::new(cell.clone(), MonomialMap::coordinates(cell.n));
    for s in steps {
        t.apply(s.clone())?;
    }
    Ok(t.jacobian)
}

/// Rectilinear target cell with the map back to the source.
#[derive(Clone, Debug, Serialize)]
pub struct RectPiece {
    pub target: MonCell,
    pub l: usize,
    pub steps: Vec<AppliedStep>,
    pub jacobian: Jacobian,
    pub forward: Vec<PreparedMonomial>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inverse: Option<Vec<PreparedMonomial>>,
    pub phi: MonomialMap,
}

impl RectPiece {
    fn from_tracked(t: Tracked, l: usize) -> RectPiece {
        let mut target = t.cell;
        target.l = Some(l);
        RectPiece { target, l, steps: t.steps, jacobian: t.jacobian, forward: t.forward, inverse: t.inverse, phi: t.phi }
    }

    pub fn forward_point(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let mut v = y.to_vec();
        for st in self.steps.iter().rev() {
            st.forward_point(x, &mut v);
        }
        v
    }

    /// Preimage of a source point, if it lies in this piece.
    pub fn preimage(&self, x: &[f64], y: &[f64]) -> Option<Vec<f64>> {
        let mut v = y.to_vec();
        for st in &self.steps {
            st.backward_point(x, &mut v);
        }
        if v.iter().all(|t| t.is_finite()) && self.target.contains_f64(x, &v) {
            Some(v)
        } else {
            None
        }
    }

    pub fn flip_counts(&self) -> Vec<u32> {
        let mut c = vec![0; self.target.n];
        for st in &self.steps {
            match st.step {
                PullbackStep::Flip { j } => c[j] += 1,
                PullbackStep::Swap { i, j } => c.swap(i, j),
                _ => {}
            }
        }
        c
    }

    pub fn inverse_components(&self) -> Result<&[PreparedMonomial]> {
        self.inverse.as_deref().ok_or_else(|| {
            Error::Unsupported("the inverse of a flip is not a prepared monomial map".into())
        })
    }

    /// Human-readable formulas of the composed map.
    pub fn formulas(&self) -> Vec<String> {
        self.forward.iter().enumerate().map(|(j, c)| format!("y{} = {}", j + 1, c)).collect()
    }
}

/// Options of the driver.
#[derive(Clone, Debug)]
pub struct RectOptions {
    pub max_depth: u32,
    pub max_pieces: usize,
}

impl Default for RectOptions {
    fn default() -> RectOptions {
        RectOptions { max_depth: 12, max_pieces: 4096 }
    }
}

struct Work {
    t: Tracked,
    j: usize,
    l: usize,
    depth: u32,
}

pub fn rectilinearize(cell: &MonCell, phi: &MonomialMap) -> Result<Vec<RectPiece>> {
    rectilinearize_with(cell, phi, &RectOptions::default())
}

/// Splits the cell into rectilinear pieces, coordinate by coordinate.
pub fn rectilinearize_with(cell: &MonCell, phi: &MonomialMap, opts: &RectOptions) -> Result<Vec<RectPiece>> {
    cell.validate()?;
    if let Some(c) = &cell.center {
        if c.iter().any(|e| e.as_const().is_none_or(|v| !v.is_zero())) {
            return Err(Error::Unsupported("only the zero center can be rectilinearized".into()));
        }
    }
    let mut stack = vec![Work { t: Tracked::new(cell.clone(), phi.clone()), j: 0, l: 0, depth: 0 }];
    let mut out = Vec::new();
    while let Some(w) = stack.pop() {
        if out.len() + stack.len() > opts.max_pieces {
            return Err(Error::Resource(format!("more than {} pieces", opts.max_pieces)));
        }
        match step_driver(w, opts)? {
            Next::Done(p) => out.push(*p),
            Next::More(ws) => stack.extend(ws.into_iter().rev()),
        }
    }
    Ok(out)
}

enum Next {
    Done(Box<RectPiece>),
    More(Vec<Work>),
}

fn step_driver(mut w: Work, opts: &RectOptions) -> Result<Next> {
    let n = w.t.cell.n;
    if w.j == n {
        finalize(&mut w)?;
        return Ok(Next::Done(Box::new(RectPiece::from_tracked(w.t, w.l))));
    }
    let j = w.j;
    let l = w.l;
    if !w.t.cell.coords[j].upper.is_one() {
        w.t.apply(PullbackStep::Blowup { j })?;
        return Ok(Next::More(vec![w]));
    }
    let Some(a) = w.t.cell.coords[j].lower.clone() else {
        w.j += 1;
        return Ok(Next::More(vec![w]));
    };
    for k in l..j {
        if a.y_exp[k].is_negative() {
            return Err(Error::Argument(format!("lower bound of y{} is unbounded in y{}", j + 1, k + 1)));
        }
        if a.unit.expr.uses_y_index(k) {
            return Err(Error::Unsupported(format!("unit in the lower bound of y{} depends on the free y{}", j + 1, k + 1)));
        }
    }
    let supp: Vec<usize> = (l..j).filter(|&k| !a.y_exp[k].is_zero()).collect();
    if supp.is_empty() {
        return no_free_support(w, a, opts);
    }
    // Bring a support coordinate to position l and make its exponent 1.
    let i0 = supp[0];
    if i0 != l {
        w.t.apply(PullbackStep::Swap { i: l, j: i0 })?;
    }
    let al = w.t.cell.coords[j].lower.as_ref().unwrap().y_exp[l].clone();
    let den = al.denom().clone();
    if den != 1.into() {
        w.t.apply(PullbackStep::PowerSub { j: l, p: big_u32(&den)? })?;
    }
    let al = w.t.cell.coords[j].lower.as_ref().unwrap().y_exp[l].clone();
    if al != Rat::one() {
        w.t.apply(PullbackStep::PowerSub { j, p: big_u32(al.numer())? })?;
    }
    let a = w.t.cell.coords[j].lower.clone().unwrap();
    let mut rest = a.clone();
    rest.y_exp[l] = Rat::zero();
    let xr = w.t.cell.base_iv();
    let yr = w.t.cell.coord_ranges(&xr);
    let sup = rest.range(&xr, &yr).hi;
    if !sup.is_finite() {
        return Err(Error::Unsupported(format!("lower bound of y{} has no finite supremum", j + 1)));
    }
    let c = Rat::int(sup.max(1.0).ceil() as i64 + 1);
    let cinv = PreparedMonomial::constant(n, c.recip());
    let cy = PreparedMonomial::monomial(n, Expr::Const(c.clone()), &[(l, Rat::one())]);

    let mut first = Work { t: w.t.clone(), j, l: l + 1, depth: w.depth };
    first.t.apply(PullbackStep::Restriction(Restriction::Lower { j: l, bound: cinv.clone() }))?;

    let mut second = Work { t: w.t.clone(), j, l, depth: w.depth };
    second.t.apply(PullbackStep::Restriction(Restriction::Upper { j: l, bound: cinv.clone() }))?;
    second.t.apply(PullbackStep::Restriction(Restriction::Upper { j, bound: cy.clone() }))?;
    second.t.apply(PullbackStep::Blowup { j: l })?;

    let mut third = w;
    third.t.apply(PullbackStep::Restriction(Restriction::Upper { j: l, bound: cinv }))?;
    third.t.apply(PullbackStep::Restriction(Restriction::Lower { j, bound: cy }))?;
    third.t.apply(PullbackStep::Blowup { j: l })?;
    third.t.apply(PullbackStep::Swap { i: l, j })?;
    Ok(Next::More(vec![first, second, third]))
}

fn big_u32(v: &num_bigint::BigInt) -> Result<u32> {
    use num_traits::ToPrimitive;
    v.to_u32().filter(|&p| p >= 1).ok_or_else(|| Error::Unsupported(format!("exponent denominator {v} out of range")))
}

fn no_free_support(mut w: Work, a: PreparedMonomial, opts: &RectOptions) -> Result<Next> {
    let n = w.t.cell.n;
    let (j, l) = (w.j, w.l);
    let xr = w.t.cell.base_iv();
    let yr = w.t.cell.coord_ranges(&xr);
    let g = a.monomial_range(&xr, &yr);
    let (ulo, uhi) = (a.unit.lo.to_f64(), a.unit.hi.to_f64());
    if g.lo * ulo > 0.0 {
        // Bounded below by a positive constant: flip, then blow up by 1 − a.
        let mut t = w.t.clone();
        let flipped = t
            .apply(PullbackStep::Adjustment { j })
            .and_then(|_| t.apply(PullbackStep::Flip { j }))
            .and_then(|_| t.apply(PullbackStep::Blowup { j }));
        match flipped {
            Ok(()) => {
                w.t = t;
                w.j += 1;
                return Ok(Next::More(vec![w]));
            }
            Err(Error::StepRejected(_)) => {}
            Err(e) => return Err(e),
        }
    }
    if g.hi.is_finite() && g.hi * uhi < 1.0 {
        let c = rational_between(&a.unit.hi, g.hi);
        let mut tc = a.clone();
        tc.unit = UnitSeries::one();
        tc.coef = Expr::mul(tc.coef, Expr::Const(c));
        let mut first = Work { t: w.t.clone(), j, l, depth: w.depth };
        first.t.apply(PullbackStep::Restriction(Restriction::Upper { j, bound: tc.clone() }))?;
        first.t.apply(PullbackStep::Blowup { j })?;
        let mut second = w;
        second.t.apply(PullbackStep::Restriction(Restriction::Lower { j, bound: tc }))?;
        if l != j {
            second.t.apply(PullbackStep::Swap { i: l, j })?;
        }
        second.l += 1;
        second.j += 1;
        return Ok(Next::More(vec![first, second]));
    }
    // Not uniform over the base: bisect it.
    if w.depth >= opts.max_depth {
        return Err(Error::Resource(format!(
            "base subdivision for y{} did not separate the bound from 1 within depth {}",
            j + 1,
            opts.max_depth
        )));
    }
    let base = w.t.cell.base.clone();
    let k = (0..base.len())
        .max_by(|&a, &b| (&base[a].1 - &base[a].0).cmp(&(&base[b].1 - &base[b].0)))
        .ok_or_else(|| Error::Unsupported(format!("lower bound of y{} is not separated from 1", j + 1)))?;
    let mid = (&base[k].0 + &base[k].1) * Rat::new(1, 2);
    let mut out = Vec::new();
    for half in [(base[k].0.clone(), mid.clone()), (mid, base[k].1.clone())] {
        let mut b = base.clone();
        b[k] = half;
        let mut c = Work { t: w.t.clone(), j, l, depth: w.depth + 1 };
        c.t.apply(PullbackStep::Restriction(Restriction::Base { base: b }))?;
        out.push(c);
    }
    let _ = n;
    Ok(Next::More(out))
}

/// A simple rational `C` with `u_hi < C < 1/g_hi`.
fn rational_between(u_hi: &Rat, g_hi: f64) -> Rat {
    if g_hi <= 0.0 {
        return u_hi + &Rat::one();
    }
    let top = Rat::below(1.0 / g_hi);
    for den in 1..=1024i64 {
        let d = Rat::int(den);
        let c = (&(u_hi * &d).floor() + &Rat::one()) / d;
        if &c > u_hi && c < top {
            return c;
        }
    }
    (u_hi + &top) * Rat::new(1, 2)
}

/// Power substitutions on free coordinates so that `φ` has natural exponents there.
fn finalize(w: &mut Work) -> Result<()> {
    let n = w.t.cell.n;
    for k in w.l..n {
        let lcm = Rat::lcm_denoms(w.t.phi.components.iter().map(|c| &c.y_exp[k]));
        if lcm != 1.into() {
            w.t.apply(PullbackStep::PowerSub { j: k, p: big_u32(&lcm)? })?;
        }
    }
    Ok(())
}

/// Substitutes prepared components into a term: `t(x, G(x, y))`.
///
/// Each component must be `c·x^δ·y^β·V`. Logs expand as
/// `log G_j = δ_j·log x + log y^{β_j} + (log c_j + log V_j)` and are
/// distributed multinomially; bounded factors are turned back into positive
/// units, splitting `P = (P + c) − c` when their sign is not fixed.
pub fn compose_term(term: &PreparedTerm, comps: &[PreparedMonomial], cell: &MonCell) -> Result<Vec<PreparedTerm>> {
    let m = term.m();
    let n_old = term.n();
    if comps.len() != n_old {
        return Err(Error::Argument("component count differs from the term arity".into()));
    }
    let n = comps[0].n();
    if (0..n_old).any(|j| term.coeff.uses_y(j)) {
        return Err(Error::Unsupported("terms with y-dependent coefficients cannot be transported".into()));
    }
    let mut xm: Vec<(Rat, Vec<Rat>)> = Vec::new();
    for c in comps {
        xm.push(c.coef.as_x_monomial(m).ok_or_else(|| {
            Error::Unsupported(format!("component coefficient {} is not a monomial in x", c.coef))
        })?);
    }
    if xm.iter().any(|(c, _)| !c.is_positive()) {
        return Err(Error::Unsupported("component coefficients must be positive".into()));
    }
    let args: Vec<Expr> = comps.iter().map(|c| c.value_expr()).collect();
    let xr = cell.base_iv();
    let yr = cell.coord_ranges(&xr);

    // y^r, the x-powers it produces and the unit.
    let mut x_exp = term.x_exp.clone();
    let mut r_new = vec![Rat::zero(); n];
    let mut unit_fs = vec![term.unit.expr.subst_all_y(&args)];
    for (j, r) in term.r.iter().enumerate() {
        if r.is_zero() {
            continue;
        }
        for (i, d) in xm[j].1.iter().enumerate() {
            x_exp[i] = &x_exp[i] + &(d * r);
        }
        for (k, b) in comps[j].y_exp.iter().enumerate() {
            r_new[k] = &r_new[k] + &(b * r);
        }
        unit_fs.push(Expr::pow(Expr::Const(xm[j].0.clone()), r.clone()));
        unit_fs.push(Expr::pow(comps[j].unit.expr.clone(), r.clone()));
    }
    let base_unit = Expr::product(unit_fs);
    let base_coeff = term.coeff.clone();
    let nn = CoeffFn { m, n, poly: base_coeff.poly.embed(2 * m + n, &(0..2 * m).chain(std::iter::repeat_n(0, n_old)).collect::<Vec<_>>()) };

    // Each log row splits into an L-linear part, a y-log row and a bounded rest.
    struct Row {
        l_part: CoeffFn,
        y_row: Vec<Rat>,
        w: Expr,
        s: u32,
    }
    let mut rows = Vec::new();
    for (beta, &s) in term.beta.iter().zip(&term.s) {
        if s == 0 {
            continue;
        }
        let mut l_part = CoeffFn::zero(m, n);
        let mut y_row = vec![Rat::zero(); n];
        let mut w = Vec::new();
        for (j, b) in beta.iter().enumerate() {
            if b.is_zero() {
                continue;
            }
            for (i, d) in xm[j].1.iter().enumerate() {
                if !d.is_zero() {
                    l_part = l_part.add(&CoeffFn::log_x(m, n, i).scale(&(b * d)));
                }
            }
            for (k, g) in comps[j].y_exp.iter().enumerate() {
                y_row[k] = &y_row[k] + &(b * g);
            }
            let mut inner = Vec::new();
            if xm[j].0 != Rat::one() {
                inner.push(Expr::ln(Expr::Const(xm[j].0.clone())));
            }
            if !comps[j].unit.is_one() {
                inner.push(Expr::ln(comps[j].unit.expr.clone()));
            }
            if !inner.is_empty() {
                w.push(Expr::mul(Expr::Const(b.clone()), Expr::sum(inner)));
            }
        }
        rows.push(Row { l_part, y_row, w: Expr::sum(w), s });
    }

    // Expand Π_i (A_i + B_i + W_i)^{s_i}.
    let mut partial: Vec<(CoeffFn, Vec<(Vec<Rat>, u32)>, Vec<Expr>)> = vec![(nn, Vec::new(), Vec::new())];
    for row in &rows {
        let mut next = Vec::new();
        for (coef, logs, ws) in &partial {
            for a in 0..=row.s {
                for b in 0..=(row.s - a) {
                    let w = row.s - a - b;
                    let w_zero = matches!(row.w.as_const(), Some(v) if v.is_zero());
                    if w > 0 && w_zero {
                        continue;
                    }
                    if a > 0 && row.l_part.is_zero() {
                        continue;
                    }
                    if b > 0 && row.y_row.iter().all(|v| v.is_zero()) {
                        continue;
                    }
                    let mult = multinomial(row.s, &[a, b, w]);
                    let mut c = coef.scale(&Rat::int(mult as i64));
                    for _ in 0..a {
                        c = c.mul(&row.l_part);
                    }
                    let mut lg = logs.clone();
                    if b > 0 {
                        match lg.iter_mut().find(|(r, _)| *r == row.y_row) {
                            Some(slot) => slot.1 += b,
                            None => lg.push((row.y_row.clone(), b)),
                        }
                    }
                    let mut wf = ws.clone();
                    if w > 0 {
                        wf.push(Expr::pow(row.w.clone(), Rat::int(w as i64)));
                    }
                    next.push((c, lg, wf));
                }
            }
        }
        partial = next;
    }

    let mut out = Vec::new();
    for (coef, logs, ws) in partial {
        if coef.is_zero() {
            continue;
        }
        let mut fs = vec![base_unit.clone()];
        fs.extend(ws);
        let p = Expr::product(fs);
        let (beta, s): (Vec<Vec<Rat>>, Vec<u32>) = logs.into_iter().unzip();
        let mk = |coeff: CoeffFn, unit: UnitSeries| PreparedTerm {
            coeff,
            x_exp: x_exp.clone(),
            r: r_new.clone(),
            s: s.clone(),
            beta: beta.clone(),
            unit,
        };
        if let Some(c) = p.as_const() {
            out.push(mk(coef.scale(c), UnitSeries::one()));
            continue;
        }
        let rg = p.range(&xr, &yr);
        if !rg.is_bounded() {
            return Err(Error::Unsupported(format!("factor {p} is not bounded on the cell")));
        }
        if rg.lo > 0.0 {
            out.push(mk(coef, UnitSeries { expr: p, lo: Rat::below(rg.lo), hi: Rat::above(rg.hi) }));
        } else if rg.hi < 0.0 {
            let q = Expr::neg(p);
            out.push(mk(coef.scale(&Rat::int(-1)), UnitSeries { expr: q, lo: Rat::below(-rg.hi), hi: Rat::above(-rg.lo) }));
        } else {
            let c = Rat::above(-rg.lo + 1.0).ceil();
            let shifted = Expr::sum(vec![p, Expr::Const(c.clone())]);
            let lo = Rat::below(rg.lo + c.to_f64());
            out.push(mk(coef.clone(), UnitSeries { expr: shifted, lo, hi: Rat::above(rg.hi + c.to_f64()) }));
            out.push(mk(coef.scale(&-c), UnitSeries::one()));
        }
    }
    Ok(out)
}

fn multinomial(s: u32, parts: &[u32]) -> u64 {
    let f = |k: u32| (1..=k as u64).product::<u64>();
    parts.iter().fold(f(s), |acc, &k| acc / f(k))
}

/// A term on the piece's target, written on the source cell.
pub fn pushforward_term(term: &PreparedTerm, piece: &RectPiece, source: &MonCell) -> Result<Vec<PreparedTerm>> {
    compose_term(term, piece.inverse_components()?, source)
}

/// A term on the source cell, written on the piece's target.
pub fn pullback_term(term: &PreparedTerm, piece: &RectPiece) -> Result<Vec<PreparedTerm>> {
    compose_term(term, &piece.forward, &piece.target)
}

/// Numeric self-check of a set of pieces over one base point.
#[derive(Clone, Debug, Serialize)]
pub struct PieceCheck {
    pub samples: usize,
    /// Fraction of source samples hit by exactly one piece.
    pub coverage: f64,
    pub collisions: usize,
    pub roundtrip_max: f64,
    pub jacobian_rel_err: f64,
    pub max_flips: u32,
}

pub fn check_pieces(source: &MonCell, pieces: &[RectPiece], x: &[f64], samples: usize, seed: u64) -> PieceCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = source.n;
    let mut exact_one = 0usize;
    let mut drawn = 0usize;
    for _ in 0..samples {
        let Some(y) = source.sample_fiber(x, &mut rng) else { continue };
        drawn += 1;
        let hits = pieces.iter().filter(|p| p.preimage(x, &y).is_some()).count();
        if hits == 1 {
            exact_one += 1;
        }
    }
    let mut collisions = 0;
    let mut roundtrip_max: f64 = 0.0;
    let mut jac_err: f64 = 0.0;
    for p in pieces.iter().filter(|p| p.target.base_contains(x)) {
        let mut images: Vec<Vec<f64>> = Vec::new();
        for k in 0..200 {
            let Some(b) = p.target.sample_inner(x, 0.05, &mut rng) else { continue };
            let a = p.forward_point(x, &b);
            let mut back = a.clone();
            for st in &p.steps {
                st.backward_point(x, &mut back);
            }
            let err = back.iter().zip(&b).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
            roundtrip_max = roundtrip_max.max(err);
            if k < 100 {
                let fd = fd_det(|y| p.forward_point(x, y), &b);
                let rec = p.jacobian.eval(x, &b);
                let rel = (fd - rec).abs() / rec.abs().max(1e-300);
                jac_err = jac_err.max(rel);
            }
            images.push(a);
        }
        for i in 0..images.len() {
            for j in 0..i {
                let d = images[i].iter().zip(&images[j]).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
                if d <= 1e-12 {
                    collisions += 1;
                }
            }
        }
        let _ = n;
    }
    PieceCheck {
        samples: drawn,
        coverage: if drawn == 0 { 0.0 } else { exact_one as f64 / drawn as f64 },
        collisions,
        roundtrip_max,
        jacobian_rel_err: jac_err,
        max_flips: pieces.iter().flat_map(|p| p.flip_counts()).max().unwrap_or(0),
    }
}

/// Central finite-difference determinant of `f` at `y`.
pub fn fd_det(f: impl Fn(&[f64]) -> Vec<f64>, y: &[f64]) -> f64 {
    let n = y.len();
    let mut jm = vec![vec![0.0; n]; n];
    for k in 0..n {
        let h = 1e-5 * y[k].abs().max(1e-3);
        let mut yp = y.to_vec();
        let mut ym = y.to_vec();
        yp[k] += h;
        ym[k] -= h;
        let (fp, fm) = (f(&yp), f(&ym));
        for i in 0..n {
            jm[i][k] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    det(jm)
}

fn det(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut d = 1.0;
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        if a[p][c] == 0.0 {
            return 0.0;
        }
        if p != c {
            a.swap(p, c);
            d = -d;
        }
        d *= a[c][c];
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
        }
    }
    d
}

/// The cell `{0 < y1 < 1, x·y1 < y2 < y1}` over `0 < x < 1`.
pub fn countex_cell() -> MonCell {
    let n = 2;
    let mut c = MonCell::unit_box(1, n, vec![(Rat::zero(), Rat::one())]);
    c.coords[1] = CoordBounds {
        lower: Some(PreparedMonomial::monomial(n, Expr::X(0), &[(0, Rat::one())])),
        upper: PreparedMonomial::y(n, 0),
    };
    c.l = None;
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tri() -> MonCell {
        // 0 < y1 < 1, 0 < y2 < y1
        let mut c = MonCell::unit_box(1, 2, vec![(Rat::zero(), Rat::one())]);
        c.coords[1].upper = PreparedMonomial::y(2, 0);
        c.l = None;
        c
    }

    #[test]
    fn power_sub_doubles_exponents() {
        let c = MonCell::unit_box(1, 1, vec![(Rat::zero(), Rat::one())]);
        let phi = MonomialMap { components: vec![PreparedMonomial::monomial(1, Expr::one(), &[(0, Rat::new(1, 2))])] };
        let (_, psi) = apply_step(&c, &phi, &PullbackStep::PowerSub { j: 0, p: 2 }).unwrap();
        assert_eq!(psi.components[0].y_exp, vec![Rat::one()]);
    }

    #[test]
    fn blowup_of_triangle() {
        let phi = MonomialMap::coordinates(2);
        let (c, psi) = apply_step(&tri(), &phi, &PullbackStep::Blowup { j: 1 }).unwrap();
        assert!(c.is_l_rectilinear(0));
        assert_eq!(psi.components[1].y_exp, vec![Rat::one(), Rat::one()]);
        let j = jacobian_of(&tri(), &[PullbackStep::Blowup { j: 1 }]).unwrap();
        assert_eq!(j.gamma(), &[Rat::one(), Rat::zero()]);
        assert!(j.monomial.coef.is_one());
    }

    #[test]
    fn power_sub_then_blowup_jacobian() {
        let j = jacobian_of(&tri(), &[PullbackStep::PowerSub { j: 0, p: 2 }, PullbackStep::Blowup { j: 1 }]).unwrap();
        assert_eq!(j.gamma(), &[Rat::int(3), Rat::zero()]);
        assert_eq!(j.monomial.coef, Expr::int(2));
        assert!(jacobian_of(&tri(), &[]).unwrap().monomial.is_one());
    }

    #[test]
    fn triangle_swap() {
        // 0 < y1 < 1, y1 < y2 < 1 becomes 0 < y1 < 1, 0 < y2 < y1.
        let mut c = MonCell::unit_box(1, 2, vec![(Rat::zero(), Rat::one())]);
        c.coords[1].lower = Some(PreparedMonomial::y(2, 0));
        let (d, _) = apply_step(&c, &MonomialMap::coordinates(2), &PullbackStep::Swap { i: 0, j: 1 }).unwrap();
        assert_eq!(d.coords[1].upper, PreparedMonomial::y(2, 0));
        assert!(d.coords[1].lower.is_none());
        // y2 bounded by y1 cannot be relabeled.
        assert!(apply_step(&tri(), &MonomialMap::coordinates(2), &PullbackStep::Swap { i: 0, j: 1 }).is_err());
    }

    #[test]
    fn flip_requires_adjustment() {
        let mut c = MonCell::unit_box(1, 2, vec![(Rat::zero(), Rat::one())]);
        c.coords[0].lower = Some(PreparedMonomial::constant(2, Rat::new(1, 2)));
        c.coords[1].upper = PreparedMonomial::y(2, 0);
        let mut t = Tracked::new(c, MonomialMap::coordinates(2));
        assert!(matches!(t.apply(PullbackStep::Flip { j: 0 }), Err(Error::StepRejected(_))));
        t.apply(PullbackStep::Adjustment { j: 0 }).unwrap();
        t.apply(PullbackStep::Flip { j: 0 }).unwrap();
        assert!(matches!(t.apply(PullbackStep::Flip { j: 0 }), Err(Error::StepRejected(_))));
    }

    #[test]
    fn rectilinear_inputs_are_kept() {
        let c = MonCell::unit_box(1, 2, vec![(Rat::zero(), Rat::one())]);
        let ps = rectilinearize(&c, &MonomialMap::coordinates(2)).unwrap();
        assert_eq!(ps.len(), 1);
        assert!(ps[0].steps.is_empty());
    }

    #[test]
    fn triangle_needs_one_blowup() {
        let ps = rectilinearize(&tri(), &MonomialMap::coordinates(2)).unwrap();
        assert_eq!(ps.len(), 1);
        assert_eq!(ps[0].l, 0);
        assert_eq!(ps[0].steps.len(), 1);
        assert!(ps[0].target.is_l_rectilinear(0));
    }

    #[test]
    fn countex_cell_pieces() {
        let c = countex_cell();
        let ps = rectilinearize(&c, &MonomialMap::coordinates(2)).unwrap();
        assert!(ps.len() >= 2);
        for x in [0.1, 0.37, 0.81] {
            let chk = check_pieces(&c, &ps, &[x], 4000, 7);
            assert!(chk.coverage >= 0.999, "{x}: {chk:?}");
            assert_eq!(chk.collisions, 0);
            assert!(chk.jacobian_rel_err < 1e-6, "{chk:?}");
            assert!(chk.roundtrip_max < 1e-9);
            assert!(chk.max_flips <= 1);
        }
        for p in &ps {
            assert!(p.target.is_l_rectilinear(p.l));
        }
    }

    #[test]
    fn compose_log_through_xy() {
        let m = 1;
        let cell = MonCell::unit_box(1, 1, vec![(Rat::new(1, 4), Rat::one())]);
        let g = vec![PreparedMonomial::monomial(1, Expr::X(0), &[(0, Rat::one())])];
        let t1 = PreparedTerm::simple(CoeffFn::constant(m, 1, Rat::one()), vec![Rat::zero()], vec![1]);
        assert_eq!(compose_term(&t1, &g, &cell).unwrap().len(), 2);
        let t2 = PreparedTerm::simple(CoeffFn::constant(m, 1, Rat::one()), vec![Rat::zero()], vec![2]);
        let out = compose_term(&t2, &g, &cell).unwrap();
        assert_eq!(out.len(), 3);
        for (x, y) in [(0.3, 0.2), (0.9, 0.7)] {
            let want = (x * y as f64).ln().powi(2);
            let got: f64 = out.iter().map(|t| t.eval(&[x], &[y])).sum();
            assert!((want - got).abs() < 1e-12);
        }
        let t3 = PreparedTerm::simple(CoeffFn::constant(m, 1, Rat::one()), vec![Rat::new(3, 2)], vec![0]);
        let out = compose_term(&t3, &g, &cell).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].x_exp, vec![Rat::new(3, 2)]);
    }

    #[test]
    fn push_pull_round_trip() {
        let c = tri();
        let ps = rectilinearize(&c, &MonomialMap::coordinates(2)).unwrap();
        let p = &ps[0];
        let t = PreparedTerm::simple(CoeffFn::constant(1, 2, Rat::one()), vec![Rat::new(-1, 2), Rat::int(1)], vec![1, 0]);
        let pushed = pushforward_term(&t, p, &c).unwrap();
        let mut back = Vec::new();
        for u in &pushed {
            back.extend(pullback_term(u, p).unwrap());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let y = p.target.sample_inner(&[0.5], 0.01, &mut rng).unwrap();
            let want = t.eval(&[0.5], &y);
            let got: f64 = back.iter().map(|u| u.eval(&[0.5], &y)).sum();
            assert!((want - got).abs() <= 1e-9 * want.abs().max(1.0));
        }
    }
}
