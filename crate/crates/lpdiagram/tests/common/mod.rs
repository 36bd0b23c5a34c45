//! Random instance generators shared by the integration tests.
#![allow(dead_code)]

use lpdiagram::dickson::MultiIndex;
use lpdiagram::expr::Expr;
use lpdiagram::lclass::DiagramPiece;
use lpdiagram::prepared::{CoeffFn, Group, PreparedSum, PreparedTerm};
use lpdiagram::rectilinear::{CoordBounds, MonCell, PreparedMonomial};
use lpdiagram::series::{CoeffFamily, DicksonMode, TruncPoly};
use lpdiagram::Rat;
use rand::seq::SliceRandom;
use rand::Rng;

pub fn r(n: i64, d: i64) -> Rat {
    Rat::new(n, d)
}

pub fn unit_base() -> Vec<(Rat, Rat)> {
    vec![(Rat::zero(), Rat::one())]
}

/// `f = x·y^{-1} + (x - 1/2)·y^{-2}` on `(0,1) × (0,1)`.
pub fn two_term() -> DiagramPiece {
    let cell = MonCell::unit_box(1, 1, unit_base());
    let g1 = CoeffFn::x(1, 1, 0);
    let g2 = CoeffFn::x(1, 1, 0).add(&CoeffFn::constant(1, 1, r(-1, 2)));
    let groups = vec![
        Group::new("g1", true, vec![PreparedTerm::simple(g1, vec![Rat::int(-1)], vec![0])]),
        Group::new("g2", true, vec![PreparedTerm::simple(g2, vec![Rat::int(-2)], vec![0])]),
    ];
    DiagramPiece::unweighted(PreparedSum::new(cell, 0, groups, DicksonMode::Generic).unwrap())
}

/// Random monomial bound `c·x^a·Π y_i^{e_i}` over earlier coordinates, with
/// value in `(0, 1]` on the cell.
fn random_upper(rng: &mut impl Rng, n: usize, j: usize) -> PreparedMonomial {
    if j == 0 || rng.gen_bool(0.3) {
        let c = [r(1, 1), r(1, 2), r(3, 4)].choose(rng).unwrap().clone();
        return PreparedMonomial::constant(n, c);
    }
    let i = rng.gen_range(0..j);
    let e = [r(1, 2), r(1, 1), r(2, 1)].choose(rng).unwrap().clone();
    let mut exps = vec![(i, e)];
    if j >= 2 && rng.gen_bool(0.3) {
        let k = (i + 1) % j;
        exps.push((k, Rat::one()));
    }
    let coef = if rng.gen_bool(0.3) { Expr::X(0) } else { Expr::one() };
    PreparedMonomial::monomial(n, coef, &exps)
}

/// Monomially bounded cell over `(0,1)` with `n` fiber coordinates: every
/// coordinate sits under a monomial upper bound, and some also over `x` or a
/// constant times it.
pub fn random_cell(rng: &mut impl Rng, n: usize) -> MonCell {
    let mut c = MonCell::unit_box(1, n, unit_base());
    for j in 0..n {
        let upper = random_upper(rng, n, j);
        let lower = match rng.gen_range(0..4) {
            0 => Some(upper.mul(&PreparedMonomial::monomial(n, Expr::X(0), &[]))),
            1 => Some(upper.mul(&PreparedMonomial::constant(n, r(1, 3)))),
            _ => None,
        };
        c.coords[j] = CoordBounds { lower, upper };
    }
    c.l = None;
    c
}

/// Random polynomial of total degree at most `deg`, integer coefficients.
pub fn random_poly(rng: &mut impl Rng, nvars: usize, deg: u32) -> TruncPoly {
    let mut p = TruncPoly::zero(nvars);
    for _ in 0..rng.gen_range(1..5) {
        let mut e = vec![0u32; nvars];
        let mut left = rng.gen_range(0..=deg);
        for slot in e.iter_mut() {
            let take = rng.gen_range(0..=left);
            *slot = take;
            left -= take;
        }
        let c = rng.gen_range(-3i64..=3);
        if c != 0 {
            p.add_term(MultiIndex(e), Rat::int(c));
        }
    }
    p
}

/// `k ≤ 2`, two `(x, y)` variables, coefficient degree at most 4.
pub fn random_family(rng: &mut impl Rng) -> CoeffFamily {
    let k = rng.gen_range(1..=2);
    let mut fam = CoeffFamily::new(k, 2);
    for _ in 0..rng.gen_range(1..8) {
        let a = MultiIndex((0..k).map(|_| rng.gen_range(0..5)).collect());
        let p = random_poly(rng, 2, 4);
        let merged = fam.get(&a).map(|q| q.add(&p)).unwrap_or(p);
        fam.coeffs.remove(&a);
        fam.insert(a, merged);
    }
    fam
}

/// Coefficients in `x` that vanish somewhere in `(0,1)` or nowhere.
fn random_coeff(rng: &mut impl Rng, n: usize) -> CoeffFn {
    let one = CoeffFn::constant(1, n, Rat::one());
    let x = CoeffFn::x(1, n, 0);
    match rng.gen_range(0..5) {
        0 => one.scale(&Rat::int(rng.gen_range(1..4))),
        1 => x,
        2 => x.add(&one.scale(&r(-1, 2))),
        3 => x.add(&one.scale(&r(-1, 3))).scale(&Rat::int(3)),
        _ => x.add(&one.scale(&r(1, 4))),
    }
}

fn exps(rng: &mut impl Rng, d: usize, range: &[Rat]) -> Vec<Rat> {
    (0..d).map(|_| range.choose(rng).unwrap().clone()).collect()
}

/// A prepared sum with free coordinates `l..n` and groups keyed by random
/// exponents; noncritical groups sit above a critical one with a
/// proportional coefficient.
pub fn random_sum(rng: &mut impl Rng, n: usize, l: usize, r_range: &[Rat], s_max: u32, max_groups: usize) -> PreparedSum {
    let inner: Vec<(Rat, Rat)> = (0..l).map(|_| (r(1, 4), r(3, 4))).collect();
    let cell = MonCell::rect_with_inner(1, n, unit_base(), inner);
    let d = n - l;
    let mut groups: Vec<Group> = Vec::new();
    let mut keys: Vec<(Vec<Rat>, Vec<u32>)> = Vec::new();
    for gi in 0..rng.gen_range(1..=max_groups) {
        let rr = exps(rng, d, r_range);
        let ss: Vec<u32> = (0..d).map(|_| rng.gen_range(0..=s_max)).collect();
        if keys.contains(&(rr.clone(), ss.clone())) {
            continue;
        }
        keys.push((rr.clone(), ss.clone()));
        let mut full_r = exps(rng, l, &[Rat::zero(), Rat::one()]);
        full_r.extend(rr);
        let mut full_s = vec![0; l];
        full_s.extend(ss);
        let coeff = random_coeff(rng, n);
        groups.push(Group::new(format!("c{gi}"), true, vec![PreparedTerm::simple(coeff, full_r, full_s)]));
    }
    let crit = groups.clone();
    for (gi, g) in crit.iter().enumerate() {
        if !rng.gen_bool(0.3) {
            continue;
        }
        let t = &g.terms[0];
        let mut t2 = t.clone();
        let bump = rng.gen_range(l..n);
        t2.r[bump] = &t2.r[bump] + &r(1, 2);
        t2.coeff = t2.coeff.scale(&Rat::int(-2));
        let key = (t2.r[l..].to_vec(), t2.s[l..].to_vec());
        if keys.contains(&key) {
            continue;
        }
        keys.push(key);
        groups.push(Group::new(format!("n{gi}"), false, vec![t2]));
    }
    PreparedSum::new(cell, l, groups, DicksonMode::Generic).expect("generated sums are valid")
}

pub struct RandomInstance {
    pub piece: DiagramPiece,
    pub q: Rat,
}

/// Exponents `r ∈ {-1, -1/2, 0, 1/2, 1}`, log powers up to 2, at most three
/// free coordinates.
pub fn random_instance(rng: &mut impl Rng) -> RandomInstance {
    let r_range: Vec<Rat> = (-2..=2).map(|k| r(k, 2)).collect();
    let d = rng.gen_range(1..=3);
    let l = if d < 3 && rng.gen_bool(0.3) { 1 } else { 0 };
    let n = d + l;
    let f = random_sum(rng, n, l, &r_range, 2, 3);
    let mu = if rng.gen_bool(0.5) {
        lpdiagram::lclass::unit_weight(&f.cell, l)
    } else {
        let mut m = random_sum(rng, n, l, &r_range, 1, 2);
        for g in &mut m.groups {
            g.label = format!("m{}", g.label);
        }
        m
    };
    let gamma = exps(rng, d, &[r(-1, 2), Rat::zero(), r(1, 2)]);
    let q = [r(1, 2), Rat::one(), Rat::int(2)].choose(rng).unwrap().clone();
    RandomInstance { piece: DiagramPiece::new(f, mu, gamma).unwrap(), q }
}
