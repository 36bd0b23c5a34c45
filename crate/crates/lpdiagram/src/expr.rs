//! Symbolic real functions of `(x, y)`.
//!
//! Units of prepared terms and coefficients of cell bounds are stored as
//! expression trees so that substitutions performed by changes of variables
//! stay exact. Floating evaluation and interval enclosures are provided for
//! the numeric checks; exact decisions never depend on them.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::exact::Rat;
use crate::series::TruncPoly;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expr {
    Const(Rat),
    X(usize),
    Y(usize),
    Sum(Vec<Expr>),
    Prod(Vec<Expr>),
    Pow(Box<Expr>, Rat),
    Ln(Box<Expr>),
    /// A polynomial evaluated at the argument expressions.
    Poly(TruncPoly, Vec<Expr>),
}

/// Closed interval of floats, `lo ≤ hi`, possibly unbounded.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Iv {
    pub lo: f64,
    pub hi: f64,
}

impl Iv {
    pub fn new(lo: f64, hi: f64) -> Iv {
        Iv { lo, hi }
    }

    pub fn point(v: f64) -> Iv {
        Iv { lo: v, hi: v }
    }

    pub fn whole() -> Iv {
        Iv { lo: f64::NEG_INFINITY, hi: f64::INFINITY }
    }

    // One ulp-scale pad per operation keeps the enclosure conservative.
    fn pad(self) -> Iv {
        let w = |v: f64| v.abs() * 4e-16 + 1e-300;
        let (lo, hi) = (self.lo - w(self.lo), self.hi + w(self.hi));
        if lo.is_nan() || hi.is_nan() {
            Iv::whole()
        } else {
            Iv { lo, hi }
        }
    }

    pub fn add(self, o: Iv) -> Iv {
        Iv { lo: self.lo + o.lo, hi: self.hi + o.hi }.pad()
    }

    pub fn neg(self) -> Iv {
        Iv { lo: -self.hi, hi: -self.lo }
    }

    pub fn mul(self, o: Iv) -> Iv {
        let c = [self.lo * o.lo, self.lo * o.hi, self.hi * o.lo, self.hi * o.hi];
        if c.iter().any(|v| v.is_nan()) {
            // 0·∞: the product is unbounded in the direction of the infinite factor.
            return Iv::whole();
        }
        let lo = c.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = c.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Iv { lo, hi }.pad()
    }

    pub fn powr(self, e: &Rat) -> Iv {
        if e.is_zero() {
            return Iv::point(1.0);
        }
        let ef = e.to_f64();
        if let Some(k) = e.to_i64() {
            if self.lo < 0.0 {
                let k = k as i32;
                let a = self.lo.powi(k);
                let b = self.hi.powi(k);
                if k > 0 && k % 2 == 0 {
                    let lo = if self.hi >= 0.0 { 0.0 } else { b };
                    return Iv { lo, hi: a.max(b) }.pad();
                }
                if k > 0 {
                    return Iv { lo: a, hi: b }.pad();
                }
                if self.hi >= 0.0 {
                    return Iv::whole();
                }
                return Iv { lo: a.min(b), hi: a.max(b) }.pad();
            }
        }
        if self.lo < 0.0 {
            return Iv::whole();
        }
        let a = self.lo.powf(ef);
        let b = self.hi.powf(ef);
        Iv { lo: a.min(b), hi: a.max(b) }.pad()
    }

    pub fn ln(self) -> Iv {
        if self.hi <= 0.0 {
            return Iv::whole();
        }
        let lo = if self.lo <= 0.0 { f64::NEG_INFINITY } else { self.lo.ln() };
        Iv { lo, hi: self.hi.ln() }.pad()
    }

    pub fn hull(self, o: Iv) -> Iv {
        Iv { lo: self.lo.min(o.lo), hi: self.hi.max(o.hi) }
    }

    pub fn is_bounded(&self) -> bool {
        self.lo.is_finite() && self.hi.is_finite()
    }
}

impl Expr {
    pub fn c(v: Rat) -> Expr {
        Expr::Const(v)
    }

    pub fn int(v: i64) -> Expr {
        Expr::Const(Rat::int(v))
    }

    pub fn one() -> Expr {
        Expr::Const(Rat::one())
    }

    pub fn as_const(&self) -> Option<&Rat> {
        match self {
            Expr::Const(v) => Some(v),
            _ => None,
        }
    }

    pub fn is_one(&self) -> bool {
        matches!(self, Expr::Const(v) if *v == Rat::one())
    }

    pub fn mul(a: Expr, b: Expr) -> Expr {
        Expr::product(vec![a, b])
    }

    /// Product with constants folded and nested products flattened.
    pub fn product(fs: Vec<Expr>) -> Expr {
        let mut c = Rat::one();
        let mut rest = Vec::new();
        for f in fs {
            match f {
                Expr::Const(v) => c = c * v,
                Expr::Prod(inner) => {
                    for g in inner {
                        match g {
                            Expr::Const(v) => c = c * v,
                            g => rest.push(g),
                        }
                    }
                }
                g => rest.push(g),
            }
        }
        if c.is_zero() {
            return Expr::Const(c);
        }
        // Merge repeated bases so that quotients of equal factors cancel.
        let mut merged: Vec<(Expr, Rat)> = Vec::new();
        for f in rest {
            let (b, e) = match f {
                Expr::Pow(b, e) => (*b, e),
                f => (f, Rat::one()),
            };
            match merged.iter_mut().find(|(b0, _)| *b0 == b) {
                Some(slot) => slot.1 = &slot.1 + &e,
                None => merged.push((b, e)),
            }
        }
        let mut rest: Vec<Expr> = merged
            .into_iter()
            .filter(|(_, e)| !e.is_zero())
            .map(|(b, e)| if e == Rat::one() { b } else { Expr::Pow(Box::new(b), e) })
            .collect();
        if rest.is_empty() {
            return Expr::Const(c);
        }
        if c != Rat::one() {
            rest.insert(0, Expr::Const(c));
        }
        if rest.len() == 1 {
            return rest.pop().unwrap();
        }
        Expr::Prod(rest)
    }

    pub fn sum(fs: Vec<Expr>) -> Expr {
        let mut c = Rat::zero();
        let mut rest = Vec::new();
        for f in fs {
            match f {
                Expr::Const(v) => c = c + v,
                Expr::Sum(inner) => {
                    for g in inner {
                        match g {
                            Expr::Const(v) => c = c + v,
                            g => rest.push(g),
                        }
                    }
                }
                g => rest.push(g),
            }
        }
        if rest.is_empty() {
            return Expr::Const(c);
        }
        if !c.is_zero() {
            rest.insert(0, Expr::Const(c));
        }
        if rest.len() == 1 {
            return rest.pop().unwrap();
        }
        Expr::Sum(rest)
    }

    pub fn neg(a: Expr) -> Expr {
        Expr::mul(Expr::int(-1), a)
    }

    /// `1 − a`.
    pub fn one_minus(a: Expr) -> Expr {
        Expr::sum(vec![Expr::one(), Expr::neg(a)])
    }

    pub fn pow(a: Expr, e: Rat) -> Expr {
        if e.is_zero() {
            return Expr::one();
        }
        if e == Rat::one() {
            return a;
        }
        match a {
            Expr::Const(ref v) => {
                if let Some(k) = e.to_i64() {
                    if k.abs() <= 64 && !(v.is_zero() && k < 0) {
                        return Expr::Const(v.powi(k as i32));
                    }
                }
                if *v == Rat::one() {
                    return Expr::one();
                }
                Expr::Pow(Box::new(a), e)
            }
            Expr::Pow(b, e0) => Expr::pow(*b, e0 * e),
            Expr::Prod(fs) => Expr::product(fs.into_iter().map(|f| Expr::pow(f, e.clone())).collect()),
            a => Expr::Pow(Box::new(a), e),
        }
    }

    pub fn ln(a: Expr) -> Expr {
        if a.is_one() {
            return Expr::Const(Rat::zero());
        }
        Expr::Ln(Box::new(a))
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        match self {
            Expr::Const(v) => v.to_f64(),
            Expr::X(i) => x[*i],
            Expr::Y(j) => y[*j],
            Expr::Sum(fs) => fs.iter().map(|f| f.eval(x, y)).sum(),
            Expr::Prod(fs) => fs.iter().map(|f| f.eval(x, y)).product(),
            Expr::Pow(b, e) => {
                let v = b.eval(x, y);
                match e.to_i64() {
                    Some(k) if k.abs() < 1 << 20 => v.powi(k as i32),
                    _ => v.powf(e.to_f64()),
                }
            }
            Expr::Ln(a) => a.eval(x, y).ln(),
            Expr::Poly(p, args) => {
                let vals: Vec<f64> = args.iter().map(|a| a.eval(x, y)).collect();
                p.eval_f64(&vals)
            }
        }
    }

    /// Enclosure of the range over the box `xr × yr`.
    pub fn range(&self, xr: &[Iv], yr: &[Iv]) -> Iv {
        match self {
            Expr::Const(v) => {
                let f = v.to_f64();
                Iv::point(f).pad()
            }
            Expr::X(i) => xr[*i],
            Expr::Y(j) => yr[*j],
            Expr::Sum(fs) => fs.iter().fold(Iv::point(0.0), |acc, f| acc.add(f.range(xr, yr))),
            Expr::Prod(fs) => fs.iter().fold(Iv::point(1.0), |acc, f| acc.mul(f.range(xr, yr))),
            Expr::Pow(b, e) => b.range(xr, yr).powr(e),
            Expr::Ln(a) => a.range(xr, yr).ln(),
            Expr::Poly(p, args) => {
                let ranges: Vec<Iv> = args.iter().map(|a| a.range(xr, yr)).collect();
                let mut acc = Iv::point(0.0);
                for (e, c) in p.terms() {
                    let mut t = Iv::point(c.to_f64()).pad();
                    for (r, &k) in ranges.iter().zip(&e.0) {
                        if k > 0 {
                            t = t.mul(r.powr(&Rat::int(k as i64)));
                        }
                    }
                    acc = acc.add(t);
                }
                acc
            }
        }
    }

    fn map_y(&self, f: &dyn Fn(usize) -> Expr) -> Expr {
        match self {
            Expr::Const(_) | Expr::X(_) => self.clone(),
            Expr::Y(j) => f(*j),
            Expr::Sum(fs) => Expr::sum(fs.iter().map(|g| g.map_y(f)).collect()),
            Expr::Prod(fs) => Expr::product(fs.iter().map(|g| g.map_y(f)).collect()),
            Expr::Pow(b, e) => Expr::pow(b.map_y(f), e.clone()),
            Expr::Ln(a) => Expr::ln(a.map_y(f)),
            Expr::Poly(p, args) => Expr::Poly(p.clone(), args.iter().map(|g| g.map_y(f)).collect()),
        }
    }

    /// Replaces `y_j` by `e`.
    pub fn subst_y(&self, j: usize, e: &Expr) -> Expr {
        self.map_y(&|k| if k == j { e.clone() } else { Expr::Y(k) })
    }

    /// Replaces every `y_k` by `es[k]` simultaneously.
    pub fn subst_all_y(&self, es: &[Expr]) -> Expr {
        self.map_y(&|k| es[k].clone())
    }

    pub fn swap_y(&self, i: usize, j: usize) -> Expr {
        self.map_y(&|k| {
            if k == i {
                Expr::Y(j)
            } else if k == j {
                Expr::Y(i)
            } else {
                Expr::Y(k)
            }
        })
    }

    pub fn uses_y(&self) -> bool {
        match self {
            Expr::Const(_) | Expr::X(_) => false,
            Expr::Y(_) => true,
            Expr::Sum(fs) | Expr::Prod(fs) => fs.iter().any(|f| f.uses_y()),
            Expr::Pow(b, _) => b.uses_y(),
            Expr::Ln(a) => a.uses_y(),
            Expr::Poly(_, args) => args.iter().any(|f| f.uses_y()),
        }
    }

    pub fn uses_y_index(&self, j: usize) -> bool {
        match self {
            Expr::Const(_) | Expr::X(_) => false,
            Expr::Y(k) => *k == j,
            Expr::Sum(fs) | Expr::Prod(fs) => fs.iter().any(|f| f.uses_y_index(j)),
            Expr::Pow(b, _) => b.uses_y_index(j),
            Expr::Ln(a) => a.uses_y_index(j),
            Expr::Poly(_, args) => args.iter().any(|f| f.uses_y_index(j)),
        }
    }

    /// `c·Π x_i^{δ_i}` when the expression has that shape.
    pub fn as_x_monomial(&self, m: usize) -> Option<(Rat, Vec<Rat>)> {
        match self {
            Expr::Const(v) => Some((v.clone(), vec![Rat::zero(); m])),
            Expr::X(i) => {
                let mut d = vec![Rat::zero(); m];
                d[*i] = Rat::one();
                Some((Rat::one(), d))
            }
            Expr::Prod(fs) => {
                let mut c = Rat::one();
                let mut d = vec![Rat::zero(); m];
                for f in fs {
                    let (c1, d1) = f.as_x_monomial(m)?;
                    c = c * c1;
                    for (a, b) in d.iter_mut().zip(d1) {
                        *a = &*a + &b;
                    }
                }
                Some((c, d))
            }
            Expr::Pow(b, e) => {
                let (c, d) = b.as_x_monomial(m)?;
                let ci = if c == Rat::one() {
                    Rat::one()
                } else {
                    let k = e.to_i64()?;
                    if k.abs() > 64 {
                        return None;
                    }
                    c.powi(k as i32)
                };
                Some((ci, d.into_iter().map(|v| v * e).collect()))
            }
            _ => None,
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(v) => {
                if v.is_integer() && !v.is_negative() {
                    write!(f, "{v}")
                } else {
                    write!(f, "({v})")
                }
            }
            Expr::X(i) => write!(f, "x{}", i + 1),
            Expr::Y(j) => write!(f, "y{}", j + 1),
            Expr::Sum(fs) => {
                write!(f, "(")?;
                for (i, g) in fs.iter().enumerate() {
                    if i > 0 {
                        write!(f, " + ")?;
                    }
                    write!(f, "{g}")?;
                }
                write!(f, ")")
            }
            Expr::Prod(fs) => {
                for (i, g) in fs.iter().enumerate() {
                    if i > 0 {
                        write!(f, "*")?;
                    }
                    write!(f, "{g}")?;
                }
                Ok(())
            }
            Expr::Pow(b, e) => {
                if e.is_integer() && !e.is_negative() {
                    write!(f, "{b}^{e}")
                } else {
                    write!(f, "{b}^({e})")
                }
            }
            Expr::Ln(a) => write!(f, "log({a})"),
            Expr::Poly(p, args) => {
                write!(f, "P[{p}](")?;
                for (i, g) in args.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{g}")?;
                }
                write!(f, ")")
            }
        }
    }
}
