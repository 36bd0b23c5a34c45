//! Truncated multivariate polynomials, the critical/noncritical split of a
//! coefficient family, and collapsed coefficients along `(x, x^t, x^{1−t})`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dickson::{min_antichain, partition_complement, upward_closure_contains, MultiIndex, UpsetPart};
use crate::exact::Rat;
use crate::{Error, Result};

/// Sparse polynomial over the rationals. Terms of total degree above
/// `truncation` are discarded by every operation; `None` keeps everything.
#[derive(Clone, PartialEq, Eq, Hash, Default)]
pub struct TruncPoly {
    pub nvars: usize,
    pub truncation: Option<u32>,
    terms: BTreeMap<MultiIndex, Rat>,
}

#[derive(Serialize, Deserialize)]
struct TermRecord {
    exponents: MultiIndex,
    coefficient: Rat,
}

#[derive(Serialize, Deserialize)]
struct PolyRecord {
    nvars: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    truncation: Option<u32>,
    terms: Vec<TermRecord>,
}

impl Serialize for TruncPoly {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        PolyRecord {
            nvars: self.nvars,
            truncation: self.truncation,
            terms: self.terms.iter().map(|(e, c)| TermRecord { exponents: e.clone(), coefficient: c.clone() }).collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for TruncPoly {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<TruncPoly, D::Error> {
        let rec = PolyRecord::deserialize(d)?;
        let mut p = TruncPoly { nvars: rec.nvars, truncation: rec.truncation, terms: BTreeMap::new() };
        for t in rec.terms {
            if t.exponents.arity() != rec.nvars {
                return Err(serde::de::Error::custom(format!(
                    "exponent {:?} has arity {} but nvars is {}",
                    t.exponents,
                    t.exponents.arity(),
                    rec.nvars
                )));
            }
            p.add_term(t.exponents, t.coefficient);
        }
        Ok(p)
    }
}

impl fmt::Debug for TruncPoly {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self)
    }
}

impl fmt::Display for TruncPoly {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        for (i, (e, c)) in self.terms.iter().enumerate() {
            if i > 0 {
                write!(f, " + ")?;
            }
            write!(f, "{c}")?;
            for (v, &k) in e.0.iter().enumerate() {
                match k {
                    0 => {}
                    1 => write!(f, "*v{v}")?,
                    _ => write!(f, "*v{v}^{k}")?,
                }
            }
        }
        Ok(())
    }
}

impl TruncPoly {
    pub fn zero(nvars: usize) -> TruncPoly {
        TruncPoly { nvars, truncation: None, terms: BTreeMap::new() }
    }

    pub fn truncated(nvars: usize, degree: u32) -> TruncPoly {
        TruncPoly { nvars, truncation: Some(degree), terms: BTreeMap::new() }
    }

    pub fn constant(nvars: usize, c: Rat) -> TruncPoly {
        let mut p = TruncPoly::zero(nvars);
        p.add_term(MultiIndex::zeros(nvars), c);
        p
    }

    pub fn var(nvars: usize, i: usize) -> TruncPoly {
        let mut p = TruncPoly::zero(nvars);
        p.add_term(MultiIndex::unit(nvars, i), Rat::one());
        p
    }

    pub fn monomial(exps: Vec<u32>, c: Rat) -> TruncPoly {
        let mut p = TruncPoly::zero(exps.len());
        p.add_term(MultiIndex(exps), c);
        p
    }

    pub fn from_terms(nvars: usize, terms: impl IntoIterator<Item = (Vec<u32>, Rat)>) -> TruncPoly {
        let mut p = TruncPoly::zero(nvars);
        for (e, c) in terms {
            assert_eq!(e.len(), nvars, "exponent arity");
            p.add_term(MultiIndex(e), c);
        }
        p
    }

    pub fn with_truncation(mut self, t: Option<u32>) -> TruncPoly {
        self.truncation = t;
        if let Some(t) = t {
            self.terms.retain(|e, _| e.degree() <= t);
        }
        self
    }

    /// Adds `c·v^e`, dropping it if it exceeds the truncation degree.
    pub fn add_term(&mut self, e: MultiIndex, c: Rat) {
        if c.is_zero() {
            return;
        }
        if let Some(t) = self.truncation {
            if e.degree() > t {
                return;
            }
        }
        let slot = self.terms.entry(e.clone()).or_insert_with(Rat::zero);
        *slot = &*slot + &c;
        if slot.is_zero() {
            self.terms.remove(&e);
        }
    }

    pub fn terms(&self) -> impl Iterator<Item = (&MultiIndex, &Rat)> {
        self.terms.iter()
    }

    pub fn coeff(&self, e: &MultiIndex) -> Rat {
        self.terms.get(e).cloned().unwrap_or_else(Rat::zero)
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn total_degree(&self) -> u32 {
        self.terms.keys().map(|e| e.degree()).max().unwrap_or(0)
    }

    fn merged_truncation(&self, o: &TruncPoly) -> Option<u32> {
        match (self.truncation, o.truncation) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    pub fn add(&self, o: &TruncPoly) -> TruncPoly {
        assert_eq!(self.nvars, o.nvars, "arity mismatch");
        let mut out = self.clone().with_truncation(self.merged_truncation(o));
        for (e, c) in &o.terms {
            out.add_term(e.clone(), c.clone());
        }
        out
    }

    pub fn scale(&self, s: &Rat) -> TruncPoly {
        let mut out = TruncPoly { nvars: self.nvars, truncation: self.truncation, terms: BTreeMap::new() };
        for (e, c) in &self.terms {
            out.add_term(e.clone(), c * s);
        }
        out
    }

    pub fn neg(&self) -> TruncPoly {
        self.scale(&Rat::int(-1))
    }

    pub fn sub(&self, o: &TruncPoly) -> TruncPoly {
        self.add(&o.neg())
    }

    pub fn mul(&self, o: &TruncPoly) -> TruncPoly {
        assert_eq!(self.nvars, o.nvars, "arity mismatch");
        let mut out = TruncPoly { nvars: self.nvars, truncation: self.merged_truncation(o), terms: BTreeMap::new() };
        for (e1, c1) in &self.terms {
            for (e2, c2) in &o.terms {
                out.add_term(e1.add(e2), c1 * c2);
            }
        }
        out
    }

    pub fn pow(&self, k: u32) -> TruncPoly {
        let mut out = TruncPoly::constant(self.nvars, Rat::one()).with_truncation(self.truncation);
        for _ in 0..k {
            out = out.mul(self);
        }
        out
    }

    /// Multiplies by the monomial `v^e`.
    pub fn shift(&self, e: &MultiIndex) -> TruncPoly {
        let mut out = TruncPoly { nvars: self.nvars, truncation: self.truncation, terms: BTreeMap::new() };
        for (e1, c) in &self.terms {
            out.add_term(e1.add(e), c.clone());
        }
        out
    }

    /// Re-embeds into `new_nvars` variables, variable `i` going to `map[i]`.
    pub fn embed(&self, new_nvars: usize, map: &[usize]) -> TruncPoly {
        let mut out = TruncPoly { nvars: new_nvars, truncation: self.truncation, terms: BTreeMap::new() };
        for (e, c) in &self.terms {
            let mut v = vec![0u32; new_nvars];
            for (i, &k) in e.0.iter().enumerate() {
                v[map[i]] += k;
            }
            out.add_term(MultiIndex(v), c.clone());
        }
        out
    }

    pub fn eval(&self, pt: &[Rat]) -> Rat {
        assert_eq!(pt.len(), self.nvars, "point arity");
        let mut acc = Rat::zero();
        for (e, c) in &self.terms {
            let mut t = c.clone();
            for (v, &k) in pt.iter().zip(&e.0) {
                if k > 0 {
                    t = &t * &v.powi(k as i32);
                }
            }
            acc = &acc + &t;
        }
        acc
    }

    pub fn eval_f64(&self, pt: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (e, c) in &self.terms {
            let mut t = c.to_f64();
            for (v, &k) in pt.iter().zip(&e.0) {
                if k > 0 {
                    t *= v.powi(k as i32);
                }
            }
            acc += t;
        }
        acc
    }

    /// Substitutes exact values for the variables in `fixed` (index, value),
    /// keeping the remaining variables in their original order.
    pub fn partial_eval(&self, fixed: &[(usize, Rat)]) -> TruncPoly {
        let keep: Vec<usize> = (0..self.nvars).filter(|i| !fixed.iter().any(|(j, _)| j == i)).collect();
        let mut out = TruncPoly { nvars: keep.len(), truncation: self.truncation, terms: BTreeMap::new() };
        for (e, c) in &self.terms {
            let mut t = c.clone();
            for (j, v) in fixed {
                let k = e.0[*j];
                if k > 0 {
                    t = &t * &v.powi(k as i32);
                }
            }
            let rest = MultiIndex(keep.iter().map(|&i| e.0[i]).collect());
            out.add_term(rest, t);
        }
        out
    }

    /// Groups terms by the exponents of the variables in `outer`; each value is
    /// the coefficient polynomial in the remaining variables.
    pub fn collect_by(&self, outer: &[usize]) -> BTreeMap<MultiIndex, TruncPoly> {
        let inner: Vec<usize> = (0..self.nvars).filter(|i| !outer.contains(i)).collect();
        let mut out: BTreeMap<MultiIndex, TruncPoly> = BTreeMap::new();
        for (e, c) in &self.terms {
            let key = MultiIndex(outer.iter().map(|&i| e.0[i]).collect());
            let rest = MultiIndex(inner.iter().map(|&i| e.0[i]).collect());
            out.entry(key).or_insert_with(|| TruncPoly::zero(inner.len())).add_term(rest, c.clone());
        }
        out.retain(|_, p| !p.is_zero());
        out
    }

    /// Variables that occur with positive exponent.
    pub fn support_vars(&self) -> BTreeSet<usize> {
        let mut s = BTreeSet::new();
        for e in self.terms.keys() {
            for (i, &k) in e.0.iter().enumerate() {
                if k > 0 {
                    s.insert(i);
                }
            }
        }
        s
    }
}

/// `f(x, y, z) = Σ_α f_α(x, y) z^α` with `α ∈ N^k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoeffFamily {
    pub k: usize,
    pub nvars: usize,
    pub coeffs: BTreeMap<MultiIndex, TruncPoly>,
}

impl CoeffFamily {
    pub fn new(k: usize, nvars: usize) -> CoeffFamily {
        CoeffFamily { k, nvars, coeffs: BTreeMap::new() }
    }

    pub fn insert(&mut self, alpha: MultiIndex, f: TruncPoly) {
        assert_eq!(alpha.arity(), self.k, "z-block arity");
        assert_eq!(f.nvars, self.nvars, "(x,y)-block arity");
        if !f.is_zero() {
            self.coeffs.insert(alpha, f);
        }
    }

    pub fn get(&self, alpha: &MultiIndex) -> Option<&TruncPoly> {
        self.coeffs.get(alpha)
    }

    /// Nonzero coefficients only, for comparisons.
    pub fn normalized(&self) -> BTreeMap<MultiIndex, TruncPoly> {
        self.coeffs
            .iter()
            .filter(|(_, p)| !p.is_zero())
            .map(|(a, p)| (a.clone(), p.clone().with_truncation(None)))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        for (a, p) in &self.coeffs {
            if a.arity() != self.k || p.nvars != self.nvars {
                return Err(Error::Argument(format!("coefficient {a:?} has inconsistent arity")));
            }
        }
        Ok(())
    }
}

/// How the union of pointwise minimal supports is approximated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DicksonMode {
    /// `min {α : f_α ≢ 0}`.
    Generic,
    /// Union of pointwise minimal supports over the listed points. The union
    /// is kept as is: minimizing it would lose the indices that dominate the
    /// tails at points where lower coefficients vanish.
    Sampled(Vec<Vec<Rat>>),
}

pub fn pointwise_min_support(fam: &CoeffFamily, pt: &[Rat]) -> Vec<MultiIndex> {
    let live: Vec<&MultiIndex> = fam.coeffs.iter().filter(|(_, f)| !f.eval(pt).is_zero()).map(|(a, _)| a).collect();
    min_antichain(live)
}

pub fn dickson_union(fam: &CoeffFamily, mode: &DicksonMode) -> Result<Vec<MultiIndex>> {
    match mode {
        DicksonMode::Generic => Ok(min_antichain(fam.coeffs.iter().filter(|(_, f)| !f.is_zero()).map(|(a, _)| a))),
        DicksonMode::Sampled(points) => {
            if points.is_empty() {
                return Err(Error::Argument("sampled mode needs at least one point".into()));
            }
            let mut all = BTreeSet::new();
            for pt in points {
                if pt.len() != fam.nvars {
                    return Err(Error::Argument(format!("sample point has arity {} not {}", pt.len(), fam.nvars)));
                }
                all.extend(pointwise_min_support(fam, pt));
            }
            Ok(all.into_iter().collect())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticalEntry {
    pub alpha: MultiIndex,
    pub coeff: TruncPoly,
}

/// A noncritical index `β` with its part and tail series in `(x, y, z)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoncriticalEntry {
    pub beta: MultiIndex,
    pub part: UpsetPart,
    pub tail: TruncPoly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub k: usize,
    pub nvars: usize,
    pub critical: Vec<CriticalEntry>,
    pub noncritical: Vec<NoncriticalEntry>,
}

impl SplitResult {
    pub fn m_cr(&self) -> Vec<MultiIndex> {
        self.critical.iter().map(|c| c.alpha.clone()).collect()
    }

    pub fn m_nc(&self) -> Vec<MultiIndex> {
        self.noncritical.iter().map(|c| c.beta.clone()).collect()
    }

    /// Expands `Σ z^α f_α + Σ z^β f_β(x, y, z)` back into a coefficient family.
    pub fn recombine(&self) -> CoeffFamily {
        let mut acc: BTreeMap<MultiIndex, TruncPoly> = BTreeMap::new();
        let mut push = |a: MultiIndex, p: TruncPoly| {
            let slot = acc.entry(a).or_insert_with(|| TruncPoly::zero(self.nvars));
            *slot = slot.add(&p.with_truncation(None));
        };
        for c in &self.critical {
            push(c.alpha.clone(), c.coeff.clone());
        }
        let zvars: Vec<usize> = (self.nvars..self.nvars + self.k).collect();
        for nc in &self.noncritical {
            for (dz, p) in nc.tail.collect_by(&zvars) {
                push(nc.beta.add(&dz), p);
            }
        }
        let mut fam = CoeffFamily::new(self.k, self.nvars);
        for (a, p) in acc {
            fam.insert(a, p);
        }
        fam
    }

    /// The domination clause at one `(x, y)` point: a tail that is nonzero for
    /// some `z` must sit above a critical index whose coefficient is nonzero.
    pub fn domination_holds_at(&self, pt: &[Rat]) -> bool {
        let live: Vec<&MultiIndex> =
            self.critical.iter().filter(|c| !c.coeff.eval(pt).is_zero()).map(|c| &c.alpha).collect();
        let fixed: Vec<(usize, Rat)> = pt.iter().cloned().enumerate().collect();
        self.noncritical.iter().all(|nc| {
            let tail_at = nc.tail.partial_eval(&fixed);
            tail_at.is_zero() || live.iter().any(|a| MultiIndex::leq(a, &nc.beta))
        })
    }
}

/// Splits `fam` along the finite set `m_cr`, which must have every nonzero
/// coefficient index in its upward closure.
pub fn critical_split(fam: &CoeffFamily, m_cr: &[MultiIndex]) -> Result<SplitResult> {
    fam.validate()?;
    let mut m_cr: Vec<MultiIndex> = m_cr.to_vec();
    m_cr.sort();
    m_cr.dedup();
    if m_cr.iter().any(|a| a.arity() != fam.k) {
        return Err(Error::Argument("M_CR members have the wrong arity".into()));
    }
    for (a, f) in &fam.coeffs {
        if !f.is_zero() && !upward_closure_contains(&m_cr, a) {
            return Err(Error::Argument(format!("coefficient at {a:?} is nonzero but not above M_CR")));
        }
    }
    let critical = m_cr
        .iter()
        .map(|a| CriticalEntry { alpha: a.clone(), coeff: fam.get(a).cloned().unwrap_or_else(|| TruncPoly::zero(fam.nvars)) })
        .collect();
    let total = fam.nvars + fam.k;
    let xy_map: Vec<usize> = (0..fam.nvars).collect();
    let mut noncritical = Vec::new();
    for part in partition_complement(&m_cr) {
        let beta = part.base.clone();
        let mut tail = TruncPoly::zero(total);
        for (a, f) in &fam.coeffs {
            if part.contains(a) {
                let dz = a.sub(&beta).expect("part members dominate the base");
                let shift = MultiIndex::zeros(fam.nvars).concat(&dz);
                tail = tail.add(&f.embed(total, &xy_map).shift(&shift));
            }
        }
        noncritical.push(NoncriticalEntry { beta, part, tail });
    }
    Ok(SplitResult { k: fam.k, nvars: fam.nvars, critical, noncritical })
}

/// `G_i^{[k,l]}` keyed by `(i, k, l)`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct CollapsedTable {
    pub entries: BTreeMap<(u32, i64, i64), Rat>,
}

impl Serialize for CollapsedTable {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Row<'a> {
            i: u32,
            k: i64,
            l: i64,
            value: &'a Rat,
        }
        let rows: Vec<Row> = self.entries.iter().map(|(&(i, k, l), v)| Row { i, k, l, value: v }).collect();
        rows.serialize(s)
    }
}

/// Collapses each `G_i(x, z, w)` under `z = x^t`, `w = x^{1−t}`: the monomial
/// `x^a z^b w^c` becomes `x^{(a+c) + (b−c)t}`.
pub fn collapse_series(g: &BTreeMap<u32, TruncPoly>) -> Result<CollapsedTable> {
    let mut table = CollapsedTable::default();
    for (&i, poly) in g {
        if poly.nvars != 3 {
            return Err(Error::Argument(format!("G_{i} must have 3 variables (x, z, w)")));
        }
        for (e, c) in poly.terms() {
            let (a, b, w) = (e.0[0] as i64, e.0[1] as i64, e.0[2] as i64);
            let key = (i, a + w, b - w);
            let slot = table.entries.entry(key).or_insert_with(Rat::zero);
            *slot = &*slot + c;
        }
    }
    table.entries.retain(|_, v| !v.is_zero());
    Ok(table)
}

/// `g∘η(x, t) ~ a·x^{p+qt}(log x)^r` for `t ∈ (0, ε)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Leading {
    pub p: i64,
    pub q: i64,
    pub r: u32,
    pub a: Rat,
    pub eps: Rat,
}

pub fn leading_asymptotics(table: &CollapsedTable) -> Result<Leading> {
    let (p, q) = table
        .entries
        .keys()
        .filter(|&&(_, k, l)| k + l >= 0)
        .map(|&(_, k, l)| (k, l))
        .min()
        .ok_or_else(|| Error::Domain("no nonzero entry with k + l ≥ 0".into()))?;
    let (r, a) = table
        .entries
        .iter()
        .filter(|(&(_, k, l), _)| (k, l) == (p, q))
        .map(|(&(i, _, _), v)| (i, v.clone()))
        .max_by_key(|(i, _)| *i)
        .expect("the minimum came from an entry");
    let eps = Rat::new(1, p + q + 1);
    Ok(Leading { p, q, r, a, eps })
}

/// `Σ_i (log x)^i G_i(x, x^t, x^{1−t})` in floating point.
pub fn eval_curve(g: &BTreeMap<u32, TruncPoly>, x: f64, t: f64) -> f64 {
    let lx = x.ln();
    let mut acc = 0.0;
    for (&i, poly) in g {
        let mut s = 0.0;
        for (e, c) in poly.terms() {
            let expo = e.0[0] as f64 + t * e.0[1] as f64 + (1.0 - t) * e.0[2] as f64;
            s += c.to_f64() * x.powf(expo);
        }
        acc += s * lx.powi(i as i32);
    }
    acc
}
