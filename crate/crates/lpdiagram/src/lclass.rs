//! Integrability and boundedness verdicts, the per-configuration interval of
//! `p` and the assembled diagram.
//!
//! For fixed `x` the class of `p` depends only on which critical groups of `f`
//! and of `μ` vanish identically at `x`. A [`VanishConfig`] names the vanishing
//! ones; the diagram lists every configuration, its interval, and for each
//! distinct interval a formula in the vanishing atoms describing where it is
//! attained.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::exact::{interval_intersect, solve_halfline, ExtValue, PInterval, QLin, Rat};
use crate::prepared::{base_grid, rational_roots_in_x, CoeffFn, CriticalProfile, DeltaConfig, Group, PreparedSum, PreparedTerm};
use crate::rectilinear::MonCell;
use crate::series::DicksonMode;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict1D {
    pub integrable: bool,
    pub bounded: bool,
}

/// `t ↦ t^α (log t)^β` on `(0, 1)`.
pub fn classify_monomial_1d(alpha: &Rat, beta: u32) -> Verdict1D {
    let integrable = alpha > &Rat::int(-1);
    let bounded = alpha.is_positive() || (alpha.is_zero() && beta == 0);
    Verdict1D { integrable, bounded }
}

/// `Π_i y_i^{α_i}(log y_i)^{β_i}` on a cell whose first `l` coordinates are compact.
pub fn classify_rect(alpha: &[Rat], beta: &[u32], l: usize) -> Verdict1D {
    assert!(l <= alpha.len() && alpha.len() == beta.len(), "arity");
    let mut out = Verdict1D { integrable: true, bounded: true };
    for (a, &b) in alpha[l..].iter().zip(&beta[l..]) {
        let v = classify_monomial_1d(a, b);
        out.integrable &= v.integrable;
        out.bounded &= v.bounded;
    }
    out
}

/// The set of `p ∈ (0, ∞]` with `f ∈ L^p(|μ|^q·y^γ)` for the given critical profiles.
pub fn lc_interval(
    pf: &CriticalProfile,
    pmu: &CriticalProfile,
    gamma: &[Rat],
    q: &Rat,
    mu_empty: bool,
    f_empty: bool,
) -> PInterval {
    if f_empty || mu_empty {
        return PInterval::full();
    }
    let mut iv = PInterval::all_finite();
    let mut infinity = true;
    for i in 0..gamma.len() {
        let rf = pf.rbar[i].as_ref().expect("nonempty profile");
        let rm = pmu.rbar[i].as_ref().expect("nonempty profile");
        let c = QLin::new(gamma[i].clone(), rm.clone());
        iv = interval_intersect(&iv, &solve_halfline(rf, &c, q), q);
        infinity &= rf.is_positive() || (rf.is_zero() && pf.sbar[i] == 0);
    }
    iv.includes_infinity = infinity;
    iv
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SumKind {
    F,
    Mu,
}

/// "Critical group `label` of `f` (or `μ`) on piece `piece` vanishes at `x`".
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Atom {
    pub piece: usize,
    pub sum: SumKind,
    pub label: String,
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self.sum {
            SumKind::F => "f",
            SumKind::Mu => "mu",
        };
        write!(f, "{s}{}.{}", self.piece, self.label)
    }
}

/// Boolean formula over vanishing atoms.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Locus {
    True,
    False,
    Vanishes(Atom),
    NotVanishes(Atom),
    And(Vec<Locus>),
    Or(Vec<Locus>),
}

impl Locus {
    pub fn eval(&self, vanishing: &BTreeSet<Atom>) -> bool {
        match self {
            Locus::True => true,
            Locus::False => false,
            Locus::Vanishes(a) => vanishing.contains(a),
            Locus::NotVanishes(a) => !vanishing.contains(a),
            Locus::And(v) => v.iter().all(|l| l.eval(vanishing)),
            Locus::Or(v) => v.iter().any(|l| l.eval(vanishing)),
        }
    }
}

impl fmt::Display for Locus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |f: &mut fmt::Formatter<'_>, v: &[Locus], sep: &str| -> fmt::Result {
            write!(f, "(")?;
            for (i, l) in v.iter().enumerate() {
                if i > 0 {
                    write!(f, " {sep} ")?;
                }
                write!(f, "{l}")?;
            }
            write!(f, ")")
        };
        match self {
            Locus::True => write!(f, "true"),
            Locus::False => write!(f, "false"),
            Locus::Vanishes(a) => write!(f, "{a} = 0"),
            Locus::NotVanishes(a) => write!(f, "{a} != 0"),
            Locus::And(v) => join(f, v, "and"),
            Locus::Or(v) => join(f, v, "or"),
        }
    }
}

/// Minimized disjunctive form of the set of `minterms` (one bool per atom,
/// `true` = vanishes).
fn dnf(atoms: &[Atom], minterms: &[Vec<bool>]) -> Locus {
    if minterms.is_empty() {
        return Locus::False;
    }
    type Cube = Vec<Option<bool>>;
    let mut level: BTreeSet<Cube> = minterms.iter().map(|m| m.iter().map(|&b| Some(b)).collect()).collect();
    let mut primes: BTreeSet<Cube> = BTreeSet::new();
    while !level.is_empty() {
        let lookup: HashSet<&Cube> = level.iter().collect();
        let mut next = BTreeSet::new();
        let mut used: HashSet<&Cube> = HashSet::new();
        for c in &level {
            for i in 0..c.len() {
                if let Some(b) = c[i] {
                    let mut nb = c.clone();
                    nb[i] = Some(!b);
                    if let Some(other) = lookup.get(&nb) {
                        used.insert(c);
                        used.insert(other);
                        let mut merged = c.clone();
                        merged[i] = None;
                        next.insert(merged);
                    }
                }
            }
        }
        for c in &level {
            if !used.contains(c) {
                primes.insert(c.clone());
            }
        }
        level = next;
    }
    // Greedy cover of the minterms by prime cubes.
    let covers = |c: &Cube, m: &Vec<bool>| c.iter().zip(m).all(|(a, b)| a.is_none_or(|v| v == *b));
    let mut uncovered: Vec<&Vec<bool>> = minterms.iter().collect();
    let primes: Vec<Cube> = primes.into_iter().collect();
    let mut chosen: Vec<&Cube> = Vec::new();
    while !uncovered.is_empty() {
        let best = primes.iter().max_by_key(|c| (uncovered.iter().filter(|m| covers(c, m)).count(), std::cmp::Reverse(*c))).unwrap();
        uncovered.retain(|m| !covers(best, m));
        chosen.push(best);
    }
    chosen.sort();
    let clauses: Vec<Locus> = chosen
        .into_iter()
        .map(|c| {
            let lits: Vec<Locus> = c
                .iter()
                .enumerate()
                .filter_map(|(i, v)| {
                    v.map(|b| if b { Locus::Vanishes(atoms[i].clone()) } else { Locus::NotVanishes(atoms[i].clone()) })
                })
                .collect();
            match lits.len() {
                0 => Locus::True,
                1 => lits.into_iter().next().unwrap(),
                _ => Locus::And(lits),
            }
        })
        .collect();
    if clauses.contains(&Locus::True) {
        return Locus::True;
    }
    if clauses.len() == 1 {
        clauses.into_iter().next().unwrap()
    } else {
        Locus::Or(clauses)
    }
}

/// `f`, `μ` and the Jacobian exponents on the free coordinates of one piece.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagramPiece {
    pub f: PreparedSum,
    pub mu: PreparedSum,
    pub gamma: Vec<Rat>,
}

impl DiagramPiece {
    pub fn new(f: PreparedSum, mu: PreparedSum, gamma: Vec<Rat>) -> Result<DiagramPiece> {
        let p = DiagramPiece { f, mu, gamma };
        p.validate()?;
        Ok(p)
    }

    /// `μ = 1` and no Jacobian.
    pub fn unweighted(f: PreparedSum) -> DiagramPiece {
        let mu = unit_weight(&f.cell, f.l);
        let gamma = vec![Rat::zero(); f.n() - f.l];
        DiagramPiece { f, mu, gamma }
    }

    pub fn validate(&self) -> Result<()> {
        if self.f.n() != self.mu.n() || self.f.l != self.mu.l || self.f.m() != self.mu.m() {
            return Err(Error::Argument("f and mu live on cells of different shape".into()));
        }
        if self.gamma.len() != self.f.n() - self.f.l {
            return Err(Error::Argument(format!(
                "gamma has {} entries, expected n - l = {}",
                self.gamma.len(),
                self.f.n() - self.f.l
            )));
        }
        Ok(())
    }

    pub fn free(&self) -> usize {
        self.f.n() - self.f.l
    }
}

/// The constant weight `1` on a cell.
pub fn unit_weight(cell: &MonCell, l: usize) -> PreparedSum {
    let (m, n) = (cell.m, cell.n);
    let t = PreparedTerm::simple(CoeffFn::constant(m, n, Rat::one()), vec![Rat::zero(); n], vec![0; n]);
    PreparedSum { cell: cell.clone(), l, mode: DicksonMode::Generic, groups: vec![Group::new("1", true, vec![t])] }
}

/// Critical groups declared to vanish identically at `x`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
pub struct VanishConfig {
    pub vanishing: BTreeSet<Atom>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigEntry {
    pub vanishing: Vec<Atom>,
    pub interval: usize,
    /// Realized at some sampled base point.
    pub feasible: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiagramEntry {
    pub interval: PInterval,
    pub locus: Locus,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum InfTag {
    Inf,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum WireEnd {
    Finite(QLin),
    Inf(InfTag),
}

#[derive(Serialize, Deserialize)]
struct WireEntry {
    lo: QLin,
    hi: WireEnd,
    infinity: bool,
    locus: Locus,
}

impl Serialize for DiagramEntry {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let lo = match &self.interval.lo {
            ExtValue::Finite(v) => v.clone(),
            ExtValue::PlusInfinity => return Err(serde::ser::Error::custom("infinite lower endpoint")),
        };
        let hi = match &self.interval.hi {
            ExtValue::Finite(v) => WireEnd::Finite(v.clone()),
            ExtValue::PlusInfinity => WireEnd::Inf(InfTag::Inf),
        };
        WireEntry { lo, hi, infinity: self.interval.includes_infinity, locus: self.locus.clone() }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for DiagramEntry {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<DiagramEntry, D::Error> {
        let w = WireEntry::deserialize(d)?;
        let hi = match w.hi {
            WireEnd::Finite(v) => ExtValue::Finite(v),
            WireEnd::Inf(_) => ExtValue::PlusInfinity,
        };
        Ok(DiagramEntry {
            interval: PInterval { lo: ExtValue::Finite(w.lo), hi, includes_infinity: w.infinity },
            locus: w.locus,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagram {
    pub q: Rat,
    pub atoms: Vec<Atom>,
    pub intervals: Vec<DiagramEntry>,
    pub configs: Vec<ConfigEntry>,
}

#[derive(Clone, Debug)]
pub struct DiagramOptions {
    pub max_configs: u64,
    /// Random rational base points tried for feasibility, besides a grid and
    /// rational roots of the group coefficients.
    pub samples: usize,
    pub seed: u64,
}

impl Default for DiagramOptions {
    fn default() -> DiagramOptions {
        DiagramOptions { max_configs: 1 << 16, samples: 64, seed: 0 }
    }
}

/// A critical group that is generically nonzero but might vanish at some `x`:
/// none of its coefficients has a nonzero part free of `x` and `log x`.
pub fn can_vanish(g: &Group, l: usize) -> bool {
    if !g.generically_nonzero(l) {
        return false;
    }
    !g.merged_coefficients(l).iter().any(|c| {
        let ys: Vec<usize> = (2 * c.m..c.poly.nvars).collect();
        c.poly.collect_by(&ys).values().any(|p| p.len() == 1 && p.total_degree() == 0 && !p.is_zero())
    })
}

/// Atoms of the critical groups that can vanish, in a fixed order.
pub fn diagram_atoms(pieces: &[DiagramPiece]) -> Vec<Atom> {
    let mut atoms = Vec::new();
    for (k, p) in pieces.iter().enumerate() {
        for (kind, sum) in [(SumKind::F, &p.f), (SumKind::Mu, &p.mu)] {
            for g in sum.critical_groups() {
                if can_vanish(g, sum.l) {
                    atoms.push(Atom { piece: k, sum: kind, label: g.label.clone() });
                }
            }
        }
    }
    atoms.sort();
    atoms
}

/// Interval for one configuration: intersection over pieces.
pub fn config_interval(pieces: &[DiagramPiece], config: &VanishConfig, q: &Rat) -> PInterval {
    let mut iv = PInterval::full();
    for (k, p) in pieces.iter().enumerate() {
        let live = |kind: SumKind, sum: &PreparedSum| -> Vec<String> {
            sum.critical_groups()
                .filter(|g| g.generically_nonzero(sum.l))
                .filter(|g| !config.vanishing.contains(&Atom { piece: k, sum: kind, label: g.label.clone() }))
                .map(|g| g.label.clone())
                .collect()
        };
        let lf = live(SumKind::F, &p.f);
        let lm = live(SumKind::Mu, &p.mu);
        let pf = p.f.profile_of(&lf);
        let pm = p.mu.profile_of(&lm);
        let piece_iv = lc_interval(&pf, &pm, &p.gamma, q, lm.is_empty(), lf.is_empty());
        iv = interval_intersect(&iv, &piece_iv, q);
    }
    iv
}

/// Configuration realized at a rational base point.
pub fn config_at(pieces: &[DiagramPiece], x: &[Rat]) -> Result<VanishConfig> {
    let mut vanishing = BTreeSet::new();
    for (k, p) in pieces.iter().enumerate() {
        for (kind, sum) in [(SumKind::F, &p.f), (SumKind::Mu, &p.mu)] {
            let live = sum.critical_delta(&DeltaConfig::Point(x.to_vec()))?;
            for g in sum.critical_groups() {
                if g.generically_nonzero(sum.l) && !live.contains(&g.label) {
                    vanishing.insert(Atom { piece: k, sum: kind, label: g.label.clone() });
                }
            }
        }
    }
    Ok(VanishConfig { vanishing })
}

fn interval_order(a: &PInterval, b: &PInterval, q: &Rat) -> std::cmp::Ordering {
    let (alo, ahi, ainf) = a.key(q);
    let (blo, bhi, binf) = b.key(q);
    (ahi.is_none(), ahi, alo, ainf).cmp(&(bhi.is_none(), bhi, blo, binf))
}

pub fn assemble_diagram(pieces: &[DiagramPiece], q: &Rat) -> Result<Diagram> {
    assemble_diagram_with(pieces, q, &DiagramOptions::default())
}

pub fn assemble_diagram_with(pieces: &[DiagramPiece], q: &Rat, opts: &DiagramOptions) -> Result<Diagram> {
    if !q.is_positive() {
        return Err(Error::Domain(format!("q must be positive, got {q}")));
    }
    for p in pieces {
        p.validate()?;
    }
    if let Some(first) = pieces.first() {
        if pieces.iter().any(|p| p.f.cell.base != first.f.cell.base) {
            return Err(Error::Argument("pieces must share the base box".into()));
        }
    }
    let atoms = diagram_atoms(pieces);
    let k = atoms.len();
    let count: u64 = if k >= 64 { u64::MAX } else { 1u64 << k };
    if count > opts.max_configs {
        return Err(Error::Resource(format!(
            "{k} critical groups give 2^{k} vanishing configurations, above the cap {}",
            opts.max_configs
        )));
    }
    let feasible = sampled_configs(pieces, opts)?;

    // Lexicographic order on labels: bit i of the mask is atom i.
    let mut intervals: Vec<PInterval> = Vec::new();
    let mut raw: Vec<(Vec<bool>, usize)> = Vec::new();
    for mask in 0..count {
        let bits: Vec<bool> = (0..k).map(|i| mask >> i & 1 == 1).collect();
        let config = VanishConfig { vanishing: atoms.iter().zip(&bits).filter(|(_, b)| **b).map(|(a, _)| a.clone()).collect() };
        let iv = config_interval(pieces, &config, q);
        let idx = match intervals.iter().position(|j| j.key(q) == iv.key(q)) {
            Some(i) => i,
            None => {
                intervals.push(iv);
                intervals.len() - 1
            }
        };
        raw.push((bits, idx));
    }
    let mut order: Vec<usize> = (0..intervals.len()).collect();
    order.sort_by(|&a, &b| interval_order(&intervals[a], &intervals[b], q));
    let mut rank = vec![0; intervals.len()];
    for (new, &old) in order.iter().enumerate() {
        rank[old] = new;
    }
    let entries: Vec<DiagramEntry> = order
        .iter()
        .map(|&old| {
            let mins: Vec<Vec<bool>> = raw.iter().filter(|(_, i)| *i == old).map(|(b, _)| b.clone()).collect();
            DiagramEntry { interval: intervals[old].clone(), locus: dnf(&atoms, &mins) }
        })
        .collect();
    let configs = raw
        .into_iter()
        .map(|(bits, idx)| {
            let vanishing: Vec<Atom> = atoms.iter().zip(&bits).filter(|(_, b)| **b).map(|(a, _)| a.clone()).collect();
            let set: BTreeSet<Atom> = vanishing.iter().cloned().collect();
            ConfigEntry { feasible: feasible.contains(&set), vanishing, interval: rank[idx] }
        })
        .collect();
    Ok(Diagram { q: q.clone(), atoms, intervals: entries, configs })
}

/// Base points used to decide feasibility: a grid, rational roots of the
/// group coefficients in one variable, and seeded random rationals.
pub fn feasibility_points(pieces: &[DiagramPiece], opts: &DiagramOptions) -> Vec<Vec<Rat>> {
    let Some(first) = pieces.first() else { return Vec::new() };
    let base = &first.f.cell.base;
    let mut pts = base_grid(base, if base.len() <= 2 { 5 } else { 3 });
    if base.len() == 1 {
        let (lo, hi) = &base[0];
        let mut roots = BTreeSet::new();
        for p in pieces {
            for sum in [&p.f, &p.mu] {
                for g in sum.critical_groups() {
                    for c in g.merged_coefficients(sum.l) {
                        roots.extend(rational_roots_in_x(&c).into_iter().filter(|r| r > lo && r < hi));
                    }
                }
            }
        }
        pts.extend(roots.into_iter().map(|r| vec![r]));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for _ in 0..opts.samples {
        pts.push(base.iter().map(|(a, b)| a + &(&(b - a) * &Rat::new(rng.gen_range(1..1000), 1000))).collect());
    }
    pts
}

fn sampled_configs(pieces: &[DiagramPiece], opts: &DiagramOptions) -> Result<BTreeSet<BTreeSet<Atom>>> {
    let mut seen = BTreeSet::new();
    for x in feasibility_points(pieces, opts) {
        match config_at(pieces, &x) {
            Ok(c) => {
                seen.insert(c.vanishing);
            }
            Err(Error::Domain(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(seen)
}

impl Diagram {
    pub fn entry_for(&self, config: &VanishConfig) -> Option<&DiagramEntry> {
        let v: Vec<Atom> = config.vanishing.iter().cloned().collect();
        self.configs.iter().find(|c| c.vanishing == v).map(|c| &self.intervals[c.interval])
    }

    /// Distinct intervals in display order.
    pub fn interval_set(&self) -> Vec<&PInterval> {
        self.intervals.iter().map(|e| &e.interval).collect()
    }
}

/// Where `p` (`None` for `∞`) lies in the class.
pub fn int_p_locus(d: &Diagram, p: Option<&Rat>) -> Locus {
    let hit = |iv: &PInterval| match p {
        Some(p) => iv.contains(p, &d.q),
        None => iv.includes_infinity,
    };
    let mins: Vec<Vec<bool>> = d
        .configs
        .iter()
        .filter(|c| hit(&d.intervals[c.interval].interval))
        .map(|c| d.atoms.iter().map(|a| c.vanishing.contains(a)).collect())
        .collect();
    dnf(&d.atoms, &mins)
}

pub fn lebesgue_set_at(d: &Diagram, config: &VanishConfig) -> Result<PInterval> {
    if let Some(a) = config.vanishing.iter().find(|a| !d.atoms.contains(a)) {
        return Err(Error::Argument(format!("unknown atom {a}")));
    }
    d.entry_for(config).map(|e| e.interval.clone()).ok_or_else(|| Error::Argument("configuration not in the diagram".into()))
}

/// The real problem equivalent to a complex one.
#[derive(Clone, Debug, Serialize)]
pub struct ComplexReduction {
    pub f: PreparedSum,
    pub mu: PreparedSum,
    /// `p` of the complex problem corresponds to `p·scale` here, and `q` likewise.
    pub scale: Rat,
    pub note: String,
}

/// `|f|² = f_re² + f_im²`, `|μ|² = μ_re² + μ_im²`.
pub fn complex_reduce(f_re: &PreparedSum, f_im: &PreparedSum, mu_re: &PreparedSum, mu_im: &PreparedSum) -> Result<ComplexReduction> {
    for s in [f_im, mu_re, mu_im] {
        if s.cell != f_re.cell || s.l != f_re.l {
            return Err(Error::Argument("complex parts must live on the same cell".into()));
        }
    }
    Ok(ComplexReduction {
        f: sum_of_squares(f_re, f_im)?,
        mu: sum_of_squares(mu_re, mu_im)?,
        scale: Rat::new(1, 2),
        note: "p is in the class of (f, |mu|^q) iff p/2 is in the class of (|f|^2, (|mu|^2)^(q/2))".into(),
    })
}

/// `a² + b²`, expanded term by term; groups with equal keys are merged.
pub fn sum_of_squares(a: &PreparedSum, b: &PreparedSum) -> Result<PreparedSum> {
    let l = a.l;
    let mut by_key: BTreeMap<(Vec<Rat>, Vec<u32>), (Vec<String>, bool, Vec<PreparedTerm>)> = BTreeMap::new();
    let mut mixed = false;
    for (tag, s) in [("re", a), ("im", b)] {
        let gs = &s.groups;
        for i in 0..gs.len() {
            for j in i..gs.len() {
                let two = if i == j { Rat::one() } else { Rat::int(2) };
                let mut terms = Vec::new();
                for t in &gs[i].terms {
                    for u in &gs[j].terms {
                        let mut p = t.mul(u);
                        p.coeff = p.coeff.scale(&two);
                        terms.push(p);
                    }
                }
                let Some(first) = terms.first() else { continue };
                let key = (first.r[l..].to_vec(), first.s[l..].to_vec());
                let label = if i == j {
                    format!("{tag}:{}^2", gs[i].label)
                } else {
                    format!("{tag}:{}*{}", gs[i].label, gs[j].label)
                };
                let critical = gs[i].critical && gs[j].critical;
                let slot = by_key.entry(key).or_insert_with(|| (Vec::new(), critical, Vec::new()));
                mixed |= slot.1 != critical;
                slot.1 |= critical;
                slot.0.push(label);
                slot.2.extend(terms);
            }
        }
    }
    if mixed {
        return Err(Error::Unsupported("a critical and a noncritical product share exponents".into()));
    }
    let groups = by_key.into_values().map(|(labels, critical, terms)| Group::new(labels.join("+"), critical, terms)).collect();
    PreparedSum::new(a.cell.clone(), l, groups, a.mode.clone())
}
