//! Prepared sums on rectilinear cells.
//!
//! A term is `g(x)·x^δ·y^r·Π_i (log y^{β_i})^{s_i}·u(x, y)` where `g` is a
//! polynomial in `x`, the formal symbols `L_i = log|x_i|` and `y`, and `u` is a
//! unit with certified bounds. Terms are collected into labeled groups keyed by
//! their exponents on the free coordinates `y_{>l}`; critical groups have
//! coefficients depending on `(x, y_{≤l})` only and control integrability.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use num_bigint::BigInt;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::dickson::MultiIndex;
use crate::exact::Rat;
use crate::expr::{Expr, Iv};
use crate::rectilinear::{MonCell, MonomialMap};
use crate::series::{DicksonMode, TruncPoly};
use crate::{Error, Result};

/// Polynomial in `x_1..x_m`, `L_1..L_m` (with `L_i = log|x_i|`) and `y_1..y_n`,
/// stored in that variable order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoeffFn {
    pub m: usize,
    pub n: usize,
    pub poly: TruncPoly,
}

impl CoeffFn {
    pub fn new(m: usize, n: usize, poly: TruncPoly) -> Result<CoeffFn> {
        if poly.nvars != 2 * m + n {
            return Err(Error::Argument(format!(
                "coefficient polynomial has {} variables, expected 2m + n = {}",
                poly.nvars,
                2 * m + n
            )));
        }
        Ok(CoeffFn { m, n, poly })
    }

    pub fn constant(m: usize, n: usize, c: Rat) -> CoeffFn {
        CoeffFn { m, n, poly: TruncPoly::constant(2 * m + n, c) }
    }

    pub fn zero(m: usize, n: usize) -> CoeffFn {
        CoeffFn { m, n, poly: TruncPoly::zero(2 * m + n) }
    }

    pub fn x(m: usize, n: usize, i: usize) -> CoeffFn {
        CoeffFn { m, n, poly: TruncPoly::var(2 * m + n, i) }
    }

    pub fn log_x(m: usize, n: usize, i: usize) -> CoeffFn {
        CoeffFn { m, n, poly: TruncPoly::var(2 * m + n, m + i) }
    }

    pub fn y(m: usize, n: usize, j: usize) -> CoeffFn {
        CoeffFn { m, n, poly: TruncPoly::var(2 * m + n, 2 * m + j) }
    }

    /// A polynomial in `x` alone, given with `m` variables.
    pub fn from_x_poly(n: usize, p: &TruncPoly) -> CoeffFn {
        let m = p.nvars;
        let map: Vec<usize> = (0..m).collect();
        CoeffFn { m, n, poly: p.embed(2 * m + n, &map) }
    }

    pub fn is_zero(&self) -> bool {
        self.poly.is_zero()
    }

    pub fn add(&self, o: &CoeffFn) -> CoeffFn {
        CoeffFn { m: self.m, n: self.n, poly: self.poly.add(&o.poly) }
    }

    pub fn mul(&self, o: &CoeffFn) -> CoeffFn {
        CoeffFn { m: self.m, n: self.n, poly: self.poly.mul(&o.poly) }
    }

    pub fn scale(&self, c: &Rat) -> CoeffFn {
        CoeffFn { m: self.m, n: self.n, poly: self.poly.scale(c) }
    }

    pub fn uses_y(&self, j: usize) -> bool {
        self.poly.support_vars().contains(&(2 * self.m + j))
    }

    pub fn uses_logs(&self) -> bool {
        self.poly.support_vars().iter().any(|&v| v >= self.m && v < 2 * self.m)
    }

    pub fn eval_f64(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut pt = Vec::with_capacity(2 * self.m + self.n);
        pt.extend_from_slice(x);
        pt.extend(x.iter().map(|v| v.abs().ln()));
        pt.extend_from_slice(&y[..self.n]);
        self.poly.eval_f64(&pt)
    }

    /// Exact restriction to the parameter point `x`: a polynomial in the
    /// prime-log symbols of `x` (see [`log_symbols`]) followed by `y_1..y_n`.
    pub fn at_point(&self, x: &[Rat]) -> Result<TruncPoly> {
        let syms = log_symbols(x)?;
        let nl = syms.primes.len();
        let total = nl + self.n;
        let mut out = TruncPoly::zero(total);
        for (e, c) in self.poly.terms() {
            let mut coef = c.clone();
            for i in 0..self.m {
                let k = e.0[i];
                if k > 0 {
                    coef = &coef * &x[i].powi(k as i32);
                }
            }
            if coef.is_zero() {
                continue;
            }
            let mut yexp = vec![0u32; total];
            for j in 0..self.n {
                yexp[nl + j] = e.0[2 * self.m + j];
            }
            let mut t = TruncPoly::monomial(yexp, coef);
            for i in 0..self.m {
                let k = e.0[self.m + i];
                if k > 0 {
                    if x[i].is_zero() {
                        return Err(Error::Domain(format!("log|x_{}| at x_{} = 0", i + 1, i + 1)));
                    }
                    let lin = syms.linear_form(i, total);
                    t = t.mul(&lin.pow(k));
                }
            }
            out = out.add(&t);
        }
        Ok(out)
    }

    /// Whether the coefficient vanishes identically in `y` at `x`.
    pub fn vanishes_at(&self, x: &[Rat]) -> Result<bool> {
        Ok(self.at_point(x)?.is_zero())
    }
}

impl fmt::Display for CoeffFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.poly.is_zero() {
            return write!(f, "0");
        }
        let name = |v: usize| -> String {
            if v < self.m {
                format!("x{}", v + 1)
            } else if v < 2 * self.m {
                format!("log|x{}|", v - self.m + 1)
            } else {
                format!("y{}", v - 2 * self.m + 1)
            }
        };
        for (i, (e, c)) in self.poly.terms().enumerate() {
            if i > 0 {
                write!(f, " + ")?;
            }
            write!(f, "{c}")?;
            for (v, &k) in e.0.iter().enumerate() {
                match k {
                    0 => {}
                    1 => write!(f, "*{}", name(v))?,
                    _ => write!(f, "*{}^{k}", name(v))?,
                }
            }
        }
        Ok(())
    }
}

/// `log|x_i| = Σ_p v_p(x_i) log p` over the primes (and unfactored cofactors)
/// of the parameter point. Distinct prime logs are treated as algebraically
/// independent symbols.
pub struct LogSymbols {
    pub primes: Vec<BigInt>,
    pub valuations: Vec<BTreeMap<usize, i64>>,
}

impl LogSymbols {
    fn linear_form(&self, i: usize, total: usize) -> TruncPoly {
        let mut p = TruncPoly::zero(total);
        for (&k, &v) in &self.valuations[i] {
            p.add_term(MultiIndex::unit(total, k), Rat::int(v));
        }
        p
    }
}

fn factor(mut n: BigInt, into: &mut BTreeMap<BigInt, i64>, sign: i64) {
    let mut d = BigInt::from(2);
    let limit = BigInt::from(100_000);
    while &d * &d <= n && d <= limit {
        while (&n % &d).is_zero() {
            *into.entry(d.clone()).or_insert(0) += sign;
            n /= &d;
        }
        d += 1;
    }
    if n > BigInt::one() {
        *into.entry(n).or_insert(0) += sign;
    }
}

pub fn log_symbols(x: &[Rat]) -> Result<LogSymbols> {
    let mut per: Vec<BTreeMap<BigInt, i64>> = Vec::new();
    for v in x {
        let mut f = BTreeMap::new();
        if !v.is_zero() {
            factor(v.numer().abs(), &mut f, 1);
            factor(v.denom().clone(), &mut f, -1);
        }
        f.retain(|_, e| *e != 0);
        per.push(f);
    }
    let primes: Vec<BigInt> = per.iter().flat_map(|f| f.keys().cloned()).collect::<BTreeSet<_>>().into_iter().collect();
    let valuations = per
        .iter()
        .map(|f| f.iter().map(|(p, &e)| (primes.iter().position(|q| q == p).unwrap(), e)).collect())
        .collect();
    Ok(LogSymbols { primes, valuations })
}

/// Positive unit with certified bounds `0 < lo ≤ u ≤ hi` on its cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitSeries {
    pub expr: Expr,
    pub lo: Rat,
    pub hi: Rat,
}

impl Default for UnitSeries {
    fn default() -> UnitSeries {
        UnitSeries::one()
    }
}

impl UnitSeries {
    pub fn one() -> UnitSeries {
        UnitSeries { expr: Expr::one(), lo: Rat::one(), hi: Rat::one() }
    }

    pub fn constant(c: Rat) -> Result<UnitSeries> {
        if !c.is_positive() {
            return Err(Error::Argument(format!("unit constant {c} is not positive")));
        }
        Ok(UnitSeries { expr: Expr::Const(c.clone()), lo: c.clone(), hi: c })
    }

    pub fn new(expr: Expr, lo: Rat, hi: Rat) -> Result<UnitSeries> {
        if !lo.is_positive() || lo > hi {
            return Err(Error::Argument(format!("unit bounds [{lo}, {hi}] must satisfy 0 < lo ≤ hi")));
        }
        Ok(UnitSeries { expr, lo, hi })
    }

    /// `P(φ_1, …, φ_M)` for the components of a monomial map.
    pub fn series(poly: TruncPoly, map: &MonomialMap, lo: Rat, hi: Rat) -> Result<UnitSeries> {
        if poly.nvars != map.components.len() {
            return Err(Error::Argument("unit series arity differs from the monomial map".into()));
        }
        let args = map.components.iter().map(|c| c.value_expr()).collect();
        UnitSeries::new(Expr::Poly(poly, args), lo, hi)
    }

    pub fn as_constant(&self) -> Option<Rat> {
        match &self.expr {
            Expr::Const(c) => Some(c.clone()),
            _ => None,
        }
    }

    pub fn is_one(&self) -> bool {
        self.expr.is_one()
    }

    pub fn mul(&self, o: &UnitSeries) -> UnitSeries {
        let expr = Expr::mul(self.expr.clone(), o.expr.clone());
        // Cancelled quotients keep exact bounds.
        if let Expr::Const(c) = &expr {
            if c.is_positive() {
                return UnitSeries { lo: c.clone(), hi: c.clone(), expr };
            }
        }
        UnitSeries { expr, lo: &self.lo * &o.lo, hi: &self.hi * &o.hi }
    }

    pub fn recip(&self) -> UnitSeries {
        UnitSeries { expr: Expr::pow(self.expr.clone(), Rat::int(-1)), lo: self.hi.recip(), hi: self.lo.recip() }
    }

    /// `u^e` with outward-rounded bounds when `e` is not an integer.
    pub fn powr(&self, e: &Rat) -> UnitSeries {
        if e.is_zero() {
            return UnitSeries::one();
        }
        let (a, b) = rat_pow_bounds(&self.lo, &self.hi, e);
        UnitSeries { expr: Expr::pow(self.expr.clone(), e.clone()), lo: a, hi: b }
    }

    pub fn subst_expr(&self, f: impl Fn(&Expr) -> Expr) -> UnitSeries {
        UnitSeries { expr: f(&self.expr), lo: self.lo.clone(), hi: self.hi.clone() }
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        self.expr.eval(x, y)
    }
}

/// Bounds of `v^e` for `v ∈ [lo, hi]`, `lo > 0`.
pub fn rat_pow_bounds(lo: &Rat, hi: &Rat, e: &Rat) -> (Rat, Rat) {
    let one = |v: &Rat, up: bool| -> Rat {
        if let Some(k) = e.to_i64() {
            if k.abs() <= 64 {
                return v.powi(k as i32);
            }
        }
        let f = v.to_f64().powf(e.to_f64());
        if up {
            Rat::above(f)
        } else {
            Rat::below(f)
        }
    };
    if e.is_negative() {
        (one(hi, false), one(lo, true))
    } else {
        (one(lo, false), one(hi, true))
    }
}

/// One prepared term.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PreparedTerm {
    pub coeff: CoeffFn,
    /// Monomial factor `x^δ`; only allowed on bases inside `(0, ∞)^m`.
    pub x_exp: Vec<Rat>,
    pub r: Vec<Rat>,
    pub s: Vec<u32>,
    /// Row `i` gives the log argument `Π_j y_j^{β_ij}`.
    pub beta: Vec<Vec<Rat>>,
    pub unit: UnitSeries,
}

#[derive(Deserialize)]
struct TermRecord {
    coeff: CoeffRecord,
    #[serde(default)]
    x_exp: Option<Vec<Rat>>,
    r: Vec<Rat>,
    #[serde(default)]
    s: Option<Vec<u32>>,
    #[serde(default)]
    beta: Option<Vec<Vec<Rat>>>,
    #[serde(default)]
    unit: Option<UnitSeries>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum CoeffRecord {
    Full(CoeffFn),
    Const(Rat),
}

impl<'de> Deserialize<'de> for PreparedTerm {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<PreparedTerm, D::Error> {
        let rec = TermRecord::deserialize(d)?;
        let n = rec.r.len();
        let coeff = match rec.coeff {
            CoeffRecord::Full(c) => c,
            CoeffRecord::Const(c) => {
                let m = rec.x_exp.as_ref().map(|v| v.len()).unwrap_or(0);
                CoeffFn::constant(m, n, c)
            }
        };
        let m = coeff.m;
        if coeff.n != n {
            return Err(serde::de::Error::custom(format!("coefficient has n = {} but r has length {n}", coeff.n)));
        }
        let beta = rec.beta.unwrap_or_else(|| identity(n));
        let s = rec.s.unwrap_or_else(|| vec![0; beta.len()]);
        Ok(PreparedTerm {
            coeff,
            x_exp: rec.x_exp.unwrap_or_else(|| vec![Rat::zero(); m]),
            r: rec.r,
            s,
            beta,
            unit: rec.unit.unwrap_or_default(),
        })
    }
}

pub fn identity(n: usize) -> Vec<Vec<Rat>> {
    (0..n).map(|i| (0..n).map(|j| if i == j { Rat::one() } else { Rat::zero() }).collect()).collect()
}

impl PreparedTerm {
    /// `c·y^r·(log y)^s` with identity log rows and unit 1.
    pub fn simple(coeff: CoeffFn, r: Vec<Rat>, s: Vec<u32>) -> PreparedTerm {
        let n = r.len();
        let m = coeff.m;
        PreparedTerm { coeff, x_exp: vec![Rat::zero(); m], r, s, beta: identity(n), unit: UnitSeries::one() }
    }

    pub fn m(&self) -> usize {
        self.coeff.m
    }

    pub fn n(&self) -> usize {
        self.r.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if self.coeff.n != n {
            return Err(Error::Argument("term coefficient arity differs from r".into()));
        }
        if self.x_exp.len() != self.coeff.m {
            return Err(Error::Argument("x exponent arity differs from m".into()));
        }
        if self.s.len() != self.beta.len() || self.beta.iter().any(|row| row.len() != n) {
            return Err(Error::Argument("log rows and powers have inconsistent shapes".into()));
        }
        if !self.unit.lo.is_positive() || self.unit.lo > self.unit.hi {
            return Err(Error::Argument("unit bounds must satisfy 0 < lo ≤ hi".into()));
        }
        Ok(())
    }

    pub fn has_identity_logs(&self) -> bool {
        self.beta == identity(self.n())
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        let c = self.coeff.eval_f64(x, y);
        if c == 0.0 {
            return 0.0;
        }
        let mut v = c * self.unit.eval(x, y);
        for (xi, d) in x.iter().zip(&self.x_exp) {
            if !d.is_zero() {
                v *= xi.powf(d.to_f64());
            }
        }
        for (yj, r) in y.iter().zip(&self.r) {
            if !r.is_zero() {
                v *= yj.powf(r.to_f64());
            }
        }
        for (row, &s) in self.beta.iter().zip(&self.s) {
            if s > 0 {
                let l: f64 = row.iter().zip(y).map(|(b, yj)| b.to_f64() * yj.ln()).sum();
                v *= l.powi(s as i32);
            }
        }
        v
    }

    /// Product of two terms; log rows are merged when equal.
    pub fn mul(&self, o: &PreparedTerm) -> PreparedTerm {
        let mut beta = self.beta.clone();
        let mut s = self.s.clone();
        for (row, &k) in o.beta.iter().zip(&o.s) {
            match beta.iter().position(|b| b == row) {
                Some(i) => s[i] += k,
                None => {
                    beta.push(row.clone());
                    s.push(k);
                }
            }
        }
        PreparedTerm {
            coeff: self.coeff.mul(&o.coeff),
            x_exp: self.x_exp.iter().zip(&o.x_exp).map(|(a, b)| a + b).collect(),
            r: self.r.iter().zip(&o.r).map(|(a, b)| a + b).collect(),
            s,
            beta,
            unit: self.unit.mul(&o.unit),
        }
    }
}

/// Labeled group of terms sharing `(r_{>l}, s_{>l})`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Group {
    pub label: String,
    pub critical: bool,
    pub terms: Vec<PreparedTerm>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum GroupRecord {
    Many { label: String, critical: bool, terms: Vec<PreparedTerm> },
    One {
        label: String,
        critical: bool,
        #[serde(flatten)]
        term: PreparedTerm,
    },
}

impl<'de> Deserialize<'de> for Group {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Group, D::Error> {
        Ok(match GroupRecord::deserialize(d)? {
            GroupRecord::Many { label, critical, terms } => Group { label, critical, terms },
            GroupRecord::One { label, critical, term } => Group { label, critical, terms: vec![term] },
        })
    }
}

/// Exponent key of a group on the free coordinates.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GroupKey {
    pub r: Vec<Rat>,
    pub s: Vec<u32>,
}

impl Group {
    pub fn new(label: impl Into<String>, critical: bool, terms: Vec<PreparedTerm>) -> Group {
        Group { label: label.into(), critical, terms }
    }

    pub fn key(&self, l: usize) -> Option<GroupKey> {
        let t = self.terms.first()?;
        Some(GroupKey { r: t.r[l..].to_vec(), s: t.s[l..].to_vec() })
    }

    /// Terms merged into classes that are linearly independent over the
    /// coefficient ring: same fractional parts of `(δ, r_{≤l})`, same log
    /// powers and unit. Integer offsets are moved into the coefficient.
    pub fn merged_coefficients(&self, l: usize) -> Vec<CoeffFn> {
        struct Class {
            frac_x: Vec<Rat>,
            frac_r: Vec<Rat>,
            s: Vec<u32>,
            unit: Expr,
            members: Vec<(Vec<Rat>, Vec<Rat>, CoeffFn)>,
        }
        let frac = |v: &Rat| v - &v.floor();
        let mut classes: Vec<Class> = Vec::new();
        for t in &self.terms {
            let (coeff, unit) = match t.unit.as_constant() {
                Some(c) => (t.coeff.scale(&c), Expr::one()),
                None => (t.coeff.clone(), t.unit.expr.clone()),
            };
            let fx: Vec<Rat> = t.x_exp.iter().map(frac).collect();
            let fr: Vec<Rat> = t.r[..l].iter().map(frac).collect();
            let s = t.s[..l.min(t.s.len())].to_vec();
            let slot = classes.iter_mut().find(|c| c.frac_x == fx && c.frac_r == fr && c.s == s && c.unit == unit);
            let member = (t.x_exp.clone(), t.r[..l].to_vec(), coeff);
            match slot {
                Some(c) => c.members.push(member),
                None => classes.push(Class { frac_x: fx, frac_r: fr, s, unit, members: vec![member] }),
            }
        }
        classes
            .into_iter()
            .map(|c| {
                let m = c.members[0].2.m;
                let n = c.members[0].2.n;
                let min_x: Vec<Rat> =
                    (0..m).map(|i| c.members.iter().map(|mb| mb.0[i].clone()).min().unwrap()).collect();
                let min_r: Vec<Rat> =
                    (0..l).map(|j| c.members.iter().map(|mb| mb.1[j].clone()).min().unwrap()).collect();
                let mut acc = CoeffFn::zero(m, n);
                for (dx, dr, coeff) in c.members {
                    let mut shift = vec![0u32; 2 * m + n];
                    for i in 0..m {
                        shift[i] = (&dx[i] - &min_x[i]).to_i64().unwrap() as u32;
                    }
                    for j in 0..l {
                        shift[2 * m + j] = (&dr[j] - &min_r[j]).to_i64().unwrap() as u32;
                    }
                    let shifted = coeff.poly.shift(&MultiIndex(shift));
                    acc = acc.add(&CoeffFn { m, n, poly: shifted });
                }
                acc
            })
            .collect()
    }

    pub fn generically_nonzero(&self, l: usize) -> bool {
        self.merged_coefficients(l).iter().any(|c| !c.is_zero())
    }

    /// Nonvanishing of the group's `(x, y_{≤l})` function at the point `x`.
    pub fn nonzero_at(&self, l: usize, x: &[Rat]) -> Result<bool> {
        for c in self.merged_coefficients(l) {
            if !c.vanishes_at(x)? {
                return Ok(true);
            }
        }
        Ok(false)
    }
}

/// A prepared sum on an `l`-rectilinear cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreparedSum {
    pub cell: MonCell,
    pub l: usize,
    #[serde(default = "default_mode")]
    pub mode: DicksonMode,
    pub groups: Vec<Group>,
}

fn default_mode() -> DicksonMode {
    DicksonMode::Generic
}

/// Where critical sets are computed.
#[derive(Clone, Debug, PartialEq)]
pub enum DeltaConfig {
    Generic,
    Point(Vec<Rat>),
}

/// `(r̄_i, s̄_i)` for `i ∈ {l+1..n}`; `None` stands for `+∞`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CriticalProfile {
    pub rbar: Vec<Option<Rat>>,
    pub sbar: Vec<u32>,
}

impl CriticalProfile {
    pub fn is_empty(&self) -> bool {
        self.rbar.iter().all(|r| r.is_none())
    }
}

impl PreparedSum {
    /// Validates the rectilinear form and the critical domination condition.
    pub fn new(cell: MonCell, l: usize, groups: Vec<Group>, mode: DicksonMode) -> Result<PreparedSum> {
        let sum = PreparedSum { cell, l, mode, groups };
        sum.validate()?;
        Ok(sum)
    }

    pub fn m(&self) -> usize {
        self.cell.m
    }

    pub fn n(&self) -> usize {
        self.cell.n
    }

    pub fn zero(cell: MonCell, l: usize) -> PreparedSum {
        PreparedSum { cell, l, mode: DicksonMode::Generic, groups: Vec::new() }
    }

    pub fn terms(&self) -> impl Iterator<Item = &PreparedTerm> {
        self.groups.iter().flat_map(|g| g.terms.iter())
    }

    pub fn critical_groups(&self) -> impl Iterator<Item = &Group> {
        self.groups.iter().filter(|g| g.critical)
    }

    pub fn group(&self, label: &str) -> Option<&Group> {
        self.groups.iter().find(|g| g.label == label)
    }

    pub fn validate(&self) -> Result<()> {
        let (m, n, l) = (self.m(), self.n(), self.l);
        if l > n {
            return Err(Error::Argument(format!("l = {l} exceeds n = {n}")));
        }
        self.cell.validate()?;
        if !self.cell.is_l_rectilinear(l) {
            return Err(Error::Argument(format!("cell is not {l}-rectilinear")));
        }
        let positive_base = self.cell.base.iter().all(|(lo, _)| !lo.is_negative());
        let mut labels = BTreeSet::new();
        for g in &self.groups {
            if !labels.insert(g.label.clone()) {
                return Err(Error::Argument(format!("duplicate group label {}", g.label)));
            }
            if g.terms.is_empty() {
                return Err(Error::Argument(format!("group {} has no terms", g.label)));
            }
            let key = g.key(l).unwrap();
            for t in &g.terms {
                t.validate()?;
                if t.m() != m || t.n() != n {
                    return Err(Error::Argument(format!("group {} has a term of the wrong arity", g.label)));
                }
                if !t.has_identity_logs() {
                    return Err(Error::Unsupported(format!(
                        "group {} uses general log arguments; diagrams need log y_i factors",
                        g.label
                    )));
                }
                if (GroupKey { r: t.r[l..].to_vec(), s: t.s[l..].to_vec() }) != key {
                    return Err(Error::Argument(format!("terms of group {} disagree on exponents of y_>l", g.label)));
                }
                if !positive_base && t.x_exp.iter().any(|d| !d.is_zero()) {
                    return Err(Error::Argument("x^δ factors need a base inside (0, ∞)^m".into()));
                }
                if g.critical
                    && (l..n).any(|j| t.coeff.uses_y(j) || t.unit.expr.uses_y_index(j)) {
                        return Err(Error::Argument(format!("critical group {} depends on y_>l", g.label)));
                    }
            }
        }
        // Critical keys are unique and disjoint from noncritical keys.
        let mut cr: BTreeMap<GroupKey, &str> = BTreeMap::new();
        for g in self.critical_groups() {
            if let Some(prev) = cr.insert(g.key(l).unwrap(), &g.label) {
                return Err(Error::Argument(format!("critical groups {prev} and {} share exponents", g.label)));
            }
        }
        for g in self.groups.iter().filter(|g| !g.critical) {
            if let Some(c) = cr.get(&g.key(l).unwrap()) {
                return Err(Error::Argument(format!("group {} shares exponents with critical group {c}", g.label)));
            }
        }
        self.check_domination()
    }

    fn dominators<'a>(&'a self, g: &Group) -> Vec<&'a Group> {
        let k = g.key(self.l).unwrap();
        self.critical_groups()
            .filter(|c| {
                let ck = c.key(self.l).unwrap();
                ck.s == k.s && ck.r.iter().zip(&k.r).all(|(a, b)| a <= b)
            })
            .collect()
    }

    /// Points where domination is checked exactly: the declared samples, or
    /// in generic mode a rational grid of the base plus every rational zero
    /// of the dominating coefficients that lies in the base.
    fn check_points(&self) -> Vec<Vec<Rat>> {
        match &self.mode {
            DicksonMode::Sampled(pts) => pts.clone(),
            DicksonMode::Generic => {
                let mut pts = base_grid(&self.cell.base, 4);
                if self.m() == 1 {
                    for g in self.critical_groups() {
                        for c in g.merged_coefficients(self.l) {
                            for r in rational_roots_in_x(&c) {
                                let (lo, hi) = &self.cell.base[0];
                                if &r > lo && &r < hi {
                                    pts.push(vec![r]);
                                }
                            }
                        }
                    }
                }
                pts.sort();
                pts.dedup();
                pts
            }
        }
    }

    fn check_domination(&self) -> Result<()> {
        let pts = self.check_points();
        for g in self.groups.iter().filter(|g| !g.critical) {
            let doms = self.dominators(g);
            if g.generically_nonzero(self.l) && !doms.iter().any(|d| d.generically_nonzero(self.l)) {
                return Err(Error::Argument(format!("noncritical group {} has no nonzero critical group below it", g.label)));
            }
            for x in &pts {
                // Noncritical coefficients may involve y_>l; vanishing means in all of y.
                let nz = g.terms.iter().any(|t| t.coeff.vanishes_at(x).map(|z| !z).unwrap_or(true));
                if !nz {
                    continue;
                }
                let mut ok = false;
                for d in &doms {
                    if d.nonzero_at(self.l, x)? {
                        ok = true;
                        break;
                    }
                }
                if !ok {
                    return Err(Error::Argument(format!(
                        "noncritical group {} is not dominated at x = {:?}",
                        g.label, x
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn critical_delta(&self, config: &DeltaConfig) -> Result<Vec<String>> {
        let mut out = Vec::new();
        for g in self.critical_groups() {
            let live = match config {
                DeltaConfig::Generic => g.generically_nonzero(self.l),
                DeltaConfig::Point(x) => g.nonzero_at(self.l, x)?,
            };
            if live {
                out.push(g.label.clone());
            }
        }
        Ok(out)
    }

    /// Profile of the critical groups with the given labels.
    pub fn profile_of(&self, labels: &[String]) -> CriticalProfile {
        let keys: Vec<GroupKey> =
            self.critical_groups().filter(|g| labels.contains(&g.label)).map(|g| g.key(self.l).unwrap()).collect();
        profile(&keys, self.n() - self.l)
    }

    /// `g(x)`: sum of squares of the `(x, log x)` coefficients of every
    /// critical group's expansion in `y_{≤l}`.
    pub fn fiber_vanishing_witness(&self) -> Result<CoeffFn> {
        let (m, n, l) = (self.m(), self.n(), self.l);
        let outer: Vec<usize> = (0..l).map(|j| 2 * m + j).collect();
        let mut acc = TruncPoly::zero(2 * m);
        for g in self.critical_groups() {
            for c in g.merged_coefficients(l) {
                if (l..n).any(|j| c.uses_y(j)) {
                    return Err(Error::Unsupported(format!("critical group {} depends on y_>l", g.label)));
                }
                for (_, inner) in c.poly.collect_by(&outer) {
                    // `inner` is in (x, L, y_>l) with y_>l unused; drop those variables.
                    let keep: Vec<(usize, Rat)> = (2 * m..inner.nvars).map(|v| (v, Rat::zero())).collect();
                    let xl = inner.partial_eval(&keep);
                    acc = acc.add(&xl.mul(&xl));
                }
            }
        }
        Ok(CoeffFn { m, n: 0, poly: acc })
    }

    /// Floating evaluation at an interior point.
    pub fn evaluate(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        if y.len() != self.n() || x.len() != self.m() {
            return Err(Error::Argument("point arity".into()));
        }
        if y.iter().any(|&v| !(v > 0.0 && v < 1.0)) {
            return Err(Error::Domain(format!("point {y:?} is not inside (0,1)^n")));
        }
        if !self.cell.contains_f64(x, y) {
            return Err(Error::Domain(format!("point {y:?} is outside the cell")));
        }
        Ok(self.terms().map(|t| t.eval(x, y)).sum())
    }

    /// Evaluation without domain checks, for quadrature inner loops.
    pub fn eval_unchecked(&self, x: &[f64], y: &[f64]) -> f64 {
        self.terms().map(|t| t.eval(x, y)).sum()
    }
}

/// Profile over the free coordinates for a set of critical keys.
pub fn profile(keys: &[GroupKey], free: usize) -> CriticalProfile {
    let mut rbar = vec![None; free];
    let mut sbar = vec![0u32; free];
    for i in 0..free {
        for k in keys {
            let r = &k.r[i];
            let s = k.s[i];
            match &rbar[i] {
                None => {
                    rbar[i] = Some(r.clone());
                    sbar[i] = s;
                }
                Some(cur) if r < cur => {
                    rbar[i] = Some(r.clone());
                    sbar[i] = s;
                }
                Some(cur) if r == cur => sbar[i] = sbar[i].max(s),
                _ => {}
            }
        }
    }
    CriticalProfile { rbar, sbar }
}

/// Interior rational grid with `k` points per side.
pub fn base_grid(base: &[(Rat, Rat)], k: i64) -> Vec<Vec<Rat>> {
    let mut pts = vec![Vec::new()];
    for (lo, hi) in base {
        let mut next = Vec::new();
        for p in &pts {
            for i in 1..=k {
                let mut q = p.clone();
                q.push(lo + &(&(hi - lo) * &Rat::new(i, k + 1)));
                next.push(q);
            }
        }
        pts = next;
    }
    pts
}

/// Rational roots of the `x`-only part structure of a one-parameter
/// coefficient: every rational `x` at which the coefficient could vanish
/// identically in the other variables.
pub fn rational_roots_in_x(c: &CoeffFn) -> Vec<Rat> {
    if c.m != 1 || c.is_zero() {
        return Vec::new();
    }
    // Common rational roots of the x-polynomials multiplying each monomial in (L, y).
    let outer: Vec<usize> = (1..c.poly.nvars).collect();
    let parts = c.poly.collect_by(&outer);
    let mut common: Option<BTreeSet<Rat>> = None;
    for (_, p) in parts {
        let roots: BTreeSet<Rat> = univariate_rational_roots(&p).into_iter().collect();
        common = Some(match common {
            None => roots,
            Some(c) => c.intersection(&roots).cloned().collect(),
        });
    }
    common.unwrap_or_default().into_iter().collect()
}

fn divisors(n: &BigInt) -> Option<Vec<BigInt>> {
    let n = n.abs();
    if n.is_zero() {
        return Some(vec![]);
    }
    if n > BigInt::from(10_000_000u64) {
        return None;
    }
    let v = n.to_u64()?;
    let mut out = Vec::new();
    let mut d = 1u64;
    while d * d <= v {
        if v % d == 0 {
            out.push(BigInt::from(d));
            if d * d != v {
                out.push(BigInt::from(v / d));
            }
        }
        d += 1;
    }
    Some(out)
}

/// Rational roots of a univariate polynomial; candidates too large to
/// enumerate are skipped.
pub fn univariate_rational_roots(p: &TruncPoly) -> Vec<Rat> {
    assert_eq!(p.nvars, 1);
    if p.is_zero() {
        return Vec::new();
    }
    let lcm = Rat::lcm_denoms(p.terms().map(|(_, c)| c));
    let scale = Rat::from_big(num_rational::BigRational::from_integer(lcm));
    let ints: BTreeMap<u32, BigInt> = p.terms().map(|(e, c)| (e.0[0], (c * &scale).numer().clone())).collect();
    let low = *ints.keys().next().unwrap();
    let high = *ints.keys().last().unwrap();
    let mut roots = Vec::new();
    if low > 0 {
        roots.push(Rat::zero());
    }
    let a0 = &ints[&low];
    let an = &ints[&high];
    let (Some(ps), Some(qs)) = (divisors(a0), divisors(an)) else {
        return roots;
    };
    let mut seen = BTreeSet::new();
    for pn in &ps {
        for qd in &qs {
            for sign in [1i64, -1] {
                let cand = Rat::from_big(num_rational::BigRational::new(pn * BigInt::from(sign), qd.clone()));
                if seen.insert(cand.clone()) && p.eval(std::slice::from_ref(&cand)).is_zero() {
                    roots.push(cand);
                }
            }
        }
    }
    roots.sort();
    roots.dedup();
    roots
}

/// Enclosure helper for callers that need a unit's range over a box.
pub fn unit_range(u: &UnitSeries, xr: &[Iv], yr: &[Iv]) -> Iv {
    u.expr.range(xr, yr)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(n: usize, base: (Rat, Rat)) -> MonCell {
        MonCell::unit_box(1, n, vec![base])
    }

    fn cx(n: usize) -> CoeffFn {
        CoeffFn::x(1, n, 0)
    }

    fn one(n: usize) -> CoeffFn {
        CoeffFn::constant(1, n, Rat::one())
    }

    fn two_group_sum() -> PreparedSum {
        let g1 = Group::new("a", true, vec![PreparedTerm::simple(one(1), vec![Rat::int(-1)], vec![0])]);
        let g2 = Group::new("b", true, vec![PreparedTerm::simple(cx(1), vec![Rat::int(2)], vec![1])]);
        PreparedSum::new(rect(1, (Rat::int(-1), Rat::int(2))), 0, vec![g1, g2], DicksonMode::Generic).unwrap()
    }

    #[test]
    fn delta_examples() {
        let s = two_group_sum();
        assert_eq!(s.critical_delta(&DeltaConfig::Generic).unwrap(), vec!["a", "b"]);
        assert_eq!(s.critical_delta(&DeltaConfig::Point(vec![Rat::zero()])).unwrap(), vec!["a"]);
        let z = PreparedSum::zero(rect(1, (Rat::zero(), Rat::one())), 0);
        assert!(z.critical_delta(&DeltaConfig::Generic).unwrap().is_empty());
    }

    #[test]
    fn profile_examples() {
        let k = |r: i64, s: u32| GroupKey { r: vec![Rat::int(r)], s: vec![s] };
        let p = profile(&[k(-1, 0), k(2, 1)], 1);
        assert_eq!(p.rbar, vec![Some(Rat::int(-1))]);
        assert_eq!(p.sbar, vec![0]);
        let p = profile(&[], 1);
        assert_eq!(p.rbar, vec![None]);
        assert_eq!(p.sbar, vec![0]);
        let p = profile(&[k(0, 3), k(0, 1)], 1);
        assert_eq!((p.rbar[0].clone(), p.sbar[0]), (Some(Rat::zero()), 3));
    }

    #[test]
    fn witness_examples() {
        // x(1 − x)·y^{-1}
        let c = cx(1).mul(&one(1).add(&cx(1).scale(&Rat::int(-1))));
        let g = Group::new("g", true, vec![PreparedTerm::simple(c, vec![Rat::int(-1)], vec![0])]);
        let s = PreparedSum::new(rect(1, (Rat::int(-1), Rat::int(2))), 0, vec![g], DicksonMode::Generic).unwrap();
        let w = s.fiber_vanishing_witness().unwrap();
        for (x, zero) in [(Rat::zero(), true), (Rat::one(), true), (Rat::new(1, 2), false)] {
            assert_eq!(w.poly.eval(&[x.clone(), Rat::zero()]).is_zero(), zero);
            assert_eq!(!s.critical_delta(&DeltaConfig::Point(vec![x])).unwrap().is_empty(), !zero);
        }
        let z = PreparedSum::zero(rect(1, (Rat::zero(), Rat::one())), 0);
        assert!(z.fiber_vanishing_witness().unwrap().is_zero());
    }

    #[test]
    fn evaluation_examples() {
        let t = |r: i64, s: u32| {
            let g = Group::new("g", true, vec![PreparedTerm::simple(one(1), vec![Rat::int(r)], vec![s])]);
            PreparedSum::new(rect(1, (Rat::zero(), Rat::one())), 0, vec![g], DicksonMode::Generic).unwrap()
        };
        assert!((t(1, 0).evaluate(&[0.5], &[0.5]).unwrap() - 0.5).abs() < 1e-15);
        assert!((t(-1, 0).evaluate(&[0.5], &[0.25]).unwrap() - 4.0).abs() < 1e-15);
        let e = (-1.0f64).exp();
        assert!((t(0, 1).evaluate(&[0.5], &[e]).unwrap() + 1.0).abs() < 1e-12);
        assert!(t(0, 1).evaluate(&[0.5], &[1.0]).is_err());
        assert!(t(0, 1).evaluate(&[0.5], &[0.0]).is_err());
    }

    #[test]
    fn domination_is_enforced() {
        // Noncritical y^{-1/2} above critical x·y^{-1}: fails at the root x = 0.
        let cr = Group::new("c", true, vec![PreparedTerm::simple(cx(1), vec![Rat::int(-1)], vec![0])]);
        let nc = Group::new("n", false, vec![PreparedTerm::simple(one(1), vec![Rat::new(-1, 2)], vec![0])]);
        let cell = rect(1, (Rat::int(-1), Rat::int(1)));
        assert!(PreparedSum::new(cell.clone(), 0, vec![cr.clone(), nc.clone()], DicksonMode::Generic).is_err());
        let cell = rect(1, (Rat::new(1, 2), Rat::int(1)));
        assert!(PreparedSum::new(cell, 0, vec![cr, nc], DicksonMode::Generic).is_ok());
    }

    #[test]
    fn log_symbols_are_exact() {
        // 2·L at x = 4 equals log 16, which is nonzero; L² − (log 2)²·4 has no
        // rational meaning, so only identities in the prime logs vanish.
        let c = CoeffFn::log_x(1, 0, 0);
        assert!(!c.vanishes_at(&[Rat::int(4)]).unwrap());
        assert!(c.vanishes_at(&[Rat::one()]).unwrap());
        assert!(c.vanishes_at(&[Rat::int(-1)]).unwrap());
        assert!(c.vanishes_at(&[Rat::zero()]).is_err());
        // 2·L1 − L2 vanishes at (2, 4).
        let d = CoeffFn::log_x(2, 0, 0).scale(&Rat::int(2)).add(&CoeffFn::log_x(2, 0, 1).scale(&Rat::int(-1)));
        assert!(d.vanishes_at(&[Rat::int(2), Rat::int(4)]).unwrap());
        assert!(!d.vanishes_at(&[Rat::int(2), Rat::int(3)]).unwrap());
    }

    #[test]
    fn rational_roots() {
        let p = TruncPoly::from_terms(1, [(vec![2], Rat::int(6)), (vec![1], Rat::int(-5)), (vec![0], Rat::int(1))]);
        assert_eq!(univariate_rational_roots(&p), vec![Rat::new(1, 3), Rat::new(1, 2)]);
        let q = TruncPoly::from_terms(1, [(vec![3], Rat::one()), (vec![1], Rat::int(-1))]);
        assert_eq!(univariate_rational_roots(&q), vec![Rat::int(-1), Rat::zero(), Rat::one()]);
    }

    #[test]
    fn merging_cancels_integer_shifts() {
        // y1^{1/2}·y1 − y1^{3/2} is identically zero on a 1-rectilinear cell.
        let cell = MonCell::rect_with_inner(1, 2, vec![(Rat::zero(), Rat::one())], vec![(Rat::new(1, 2), Rat::one())]);
        let t1 = PreparedTerm::simple(CoeffFn::y(1, 2, 0), vec![Rat::new(1, 2), Rat::int(-1)], vec![0, 0]);
        let t2 = PreparedTerm::simple(one(2).scale(&Rat::int(-1)), vec![Rat::new(3, 2), Rat::int(-1)], vec![0, 0]);
        let g = Group::new("g", true, vec![t1, t2]);
        let s = PreparedSum::new(cell, 1, vec![g], DicksonMode::Generic).unwrap();
        assert!(s.critical_delta(&DeltaConfig::Generic).unwrap().is_empty());
    }
}
