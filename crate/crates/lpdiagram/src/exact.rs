//! Exact rationals, numbers of the form `a + b·q`, and open subintervals of `(0, ∞]`.

use std::cmp::Ordering;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::str::FromStr;

use num_bigint::BigInt;
use num_integer::Integer;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::Error;

/// Arbitrary precision rational in lowest terms with positive denominator.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Rat(BigRational);

impl Rat {
    pub fn new(num: i64, den: i64) -> Rat {
        assert!(den != 0, "zero denominator");
        Rat(BigRational::new(BigInt::from(num), BigInt::from(den)))
    }

    pub fn int(n: i64) -> Rat {
        Rat(BigRational::from_integer(BigInt::from(n)))
    }

    pub fn zero() -> Rat {
        Rat(BigRational::zero())
    }

    pub fn one() -> Rat {
        Rat(BigRational::one())
    }

    pub fn from_big(r: BigRational) -> Rat {
        Rat(r)
    }

    pub fn as_big(&self) -> &BigRational {
        &self.0
    }

    pub fn numer(&self) -> &BigInt {
        self.0.numer()
    }

    pub fn denom(&self) -> &BigInt {
        self.0.denom()
    }

    pub fn is_zero(&self) -> bool {
        self.0.is_zero()
    }

    pub fn is_positive(&self) -> bool {
        self.0.is_positive()
    }

    pub fn is_negative(&self) -> bool {
        self.0.is_negative()
    }

    pub fn is_integer(&self) -> bool {
        self.0.is_integer()
    }

    pub fn abs(&self) -> Rat {
        Rat(self.0.abs())
    }

    pub fn recip(&self) -> Rat {
        Rat(self.0.recip())
    }

    pub fn floor(&self) -> Rat {
        Rat(self.0.floor())
    }

    pub fn ceil(&self) -> Rat {
        Rat(self.0.ceil())
    }

    /// Integer power; negative exponents invert.
    pub fn powi(&self, e: i32) -> Rat {
        Rat(num_traits::pow::Pow::pow(&self.0, e))
    }

    pub fn to_f64(&self) -> f64 {
        match self.0.to_f64() {
            Some(v) => v,
            None => {
                // Huge numerator and denominator: scale through logs.
                let n = self.numer().to_f64().unwrap_or(f64::NAN);
                let d = self.denom().to_f64().unwrap_or(f64::NAN);
                n / d
            }
        }
    }

    /// Exact conversion of a finite float.
    pub fn from_f64(v: f64) -> Option<Rat> {
        BigRational::from_float(v).map(Rat)
    }

    /// A rational within relative `1e-12` of `v`, never above it.
    pub fn below(v: f64) -> Rat {
        let w = if v > 0.0 { v * (1.0 - 1e-12) } else { v * (1.0 + 1e-12) - 1e-300 };
        Rat::from_f64(w).expect("finite value").simplify_down()
    }

    /// A rational within relative `1e-12` of `v`, never below it.
    pub fn above(v: f64) -> Rat {
        let w = if v > 0.0 { v * (1.0 + 1e-12) + 1e-300 } else { v * (1.0 - 1e-12) };
        Rat::from_f64(w).expect("finite value").simplify_up()
    }

    // Dyadic floats have huge denominators; round outward to a 2^-40 grid.
    fn simplify_down(self) -> Rat {
        let scale = Rat(BigRational::from_integer(BigInt::from(1u64 << 40)));
        let scaled = &self * &scale;
        if scaled.abs() < Rat::int(1 << 20) {
            return self;
        }
        &scaled.floor() / &scale
    }

    fn simplify_up(self) -> Rat {
        let scale = Rat(BigRational::from_integer(BigInt::from(1u64 << 40)));
        let scaled = &self * &scale;
        if scaled.abs() < Rat::int(1 << 20) {
            return self;
        }
        &scaled.ceil() / &scale
    }

    /// `self` as an `i64` when it is an integer in range.
    pub fn to_i64(&self) -> Option<i64> {
        if self.is_integer() {
            self.numer().to_i64()
        } else {
            None
        }
    }

    pub fn min(a: &Rat, b: &Rat) -> Rat {
        if a <= b {
            a.clone()
        } else {
            b.clone()
        }
    }

    pub fn max(a: &Rat, b: &Rat) -> Rat {
        if a >= b {
            a.clone()
        } else {
            b.clone()
        }
    }

    /// Least common multiple of the denominators of `xs`.
    pub fn lcm_denoms<'a>(xs: impl IntoIterator<Item = &'a Rat>) -> BigInt {
        xs.into_iter().fold(BigInt::one(), |acc, r| acc.lcm(r.denom()))
    }
}

impl fmt::Display for Rat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_integer() {
            write!(f, "{}", self.0.numer())
        } else {
            write!(f, "{}/{}", self.0.numer(), self.0.denom())
        }
    }
}

impl fmt::Debug for Rat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl FromStr for Rat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Rat, Error> {
        let s = s.trim();
        let bad = || Error::Parse(format!("not a rational: {s:?}"));
        let (n, d) = match s.split_once('/') {
            Some((n, d)) => (n.trim(), d.trim()),
            None => (s, "1"),
        };
        let n: BigInt = n.parse().map_err(|_| bad())?;
        let d: BigInt = d.parse().map_err(|_| bad())?;
        if d.is_zero() {
            return Err(bad());
        }
        Ok(Rat(BigRational::new(n, d)))
    }
}

impl Serialize for Rat {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{}/{}", self.0.numer(), self.0.denom()))
    }
}

impl<'de> Deserialize<'de> for Rat {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Rat, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            S(String),
            I(i64),
        }
        match Raw::deserialize(d)? {
            Raw::S(s) => s.parse().map_err(serde::de::Error::custom),
            Raw::I(i) => Ok(Rat::int(i)),
        }
    }
}

impl From<i64> for Rat {
    fn from(v: i64) -> Rat {
        Rat::int(v)
    }
}

macro_rules! binop {
    ($tr:ident, $m:ident) => {
        impl $tr<&Rat> for &Rat {
            type Output = Rat;
            fn $m(self, o: &Rat) -> Rat {
                Rat((&self.0).$m(&o.0))
            }
        }
        impl $tr<Rat> for Rat {
            type Output = Rat;
            fn $m(self, o: Rat) -> Rat {
                Rat(self.0.$m(o.0))
            }
        }
        impl $tr<&Rat> for Rat {
            type Output = Rat;
            fn $m(self, o: &Rat) -> Rat {
                Rat(self.0.$m(&o.0))
            }
        }
    };
}
binop!(Add, add);
binop!(Sub, sub);
binop!(Mul, mul);
binop!(Div, div);

impl Neg for Rat {
    type Output = Rat;
    fn neg(self) -> Rat {
        Rat(-self.0)
    }
}

impl Neg for &Rat {
    type Output = Rat;
    fn neg(self) -> Rat {
        Rat(-&self.0)
    }
}

impl std::iter::Sum for Rat {
    fn sum<I: Iterator<Item = Rat>>(it: I) -> Rat {
        it.fold(Rat::zero(), |a, b| a + b)
    }
}

/// `a + b·q` for the instance parameter `q`.
#[derive(Clone, PartialEq, Eq, Hash, Debug, Serialize, Deserialize, Default)]
pub struct QLin {
    pub a: Rat,
    pub b: Rat,
}

impl QLin {
    pub fn new(a: Rat, b: Rat) -> QLin {
        QLin { a, b }
    }

    pub fn constant(a: Rat) -> QLin {
        QLin { a, b: Rat::zero() }
    }

    pub fn zero() -> QLin {
        QLin::default()
    }

    pub fn add(&self, o: &QLin) -> QLin {
        QLin { a: &self.a + &o.a, b: &self.b + &o.b }
    }

    pub fn scale(&self, s: &Rat) -> QLin {
        QLin { a: &self.a * s, b: &self.b * s }
    }
}

impl fmt::Display for QLin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.a.is_zero(), self.b.is_zero()) {
            (_, true) => write!(f, "{}", self.a),
            (true, false) => write!(f, "{}q", self.b),
            (false, false) => write!(f, "{} + {}q", self.a, self.b),
        }
    }
}

pub fn qlin_eval(v: &QLin, q: &Rat) -> Result<Rat, Error> {
    if !q.is_positive() {
        return Err(Error::Domain(format!("q must be positive, got {q}")));
    }
    Ok(&v.a + &(&v.b * q))
}

/// Endpoint value: finite `a + b·q` or `+∞`.
#[derive(Clone, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
pub enum ExtValue {
    Finite(QLin),
    PlusInfinity,
}

impl ExtValue {
    pub fn zero() -> ExtValue {
        ExtValue::Finite(QLin::zero())
    }

    /// Numeric value at `q`; `None` for `+∞`.
    pub fn value(&self, q: &Rat) -> Option<Rat> {
        match self {
            ExtValue::Finite(v) => Some(&v.a + &(&v.b * q)),
            ExtValue::PlusInfinity => None,
        }
    }

    pub fn cmp_at(&self, o: &ExtValue, q: &Rat) -> Ordering {
        match (self.value(q), o.value(q)) {
            (Some(a), Some(b)) => a.cmp(&b),
            (Some(_), None) => Ordering::Less,
            (None, Some(_)) => Ordering::Greater,
            (None, None) => Ordering::Equal,
        }
    }
}

impl fmt::Display for ExtValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExtValue::Finite(v) => write!(f, "{v}"),
            ExtValue::PlusInfinity => write!(f, "inf"),
        }
    }
}

/// `(lo, hi) ∩ (0, ∞)`, together with `{∞}` when `includes_infinity` is set.
///
/// The finite part is empty exactly when `lo = hi`; the canonical empty finite
/// part is `lo = hi = 0`.
#[derive(Clone, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
pub struct PInterval {
    pub lo: ExtValue,
    pub hi: ExtValue,
    pub includes_infinity: bool,
}

impl PInterval {
    /// `(0, ∞) ∪ {∞}`.
    pub fn full() -> PInterval {
        PInterval { lo: ExtValue::zero(), hi: ExtValue::PlusInfinity, includes_infinity: true }
    }

    /// `(0, ∞)` without the point at infinity.
    pub fn all_finite() -> PInterval {
        PInterval { lo: ExtValue::zero(), hi: ExtValue::PlusInfinity, includes_infinity: false }
    }

    pub fn empty() -> PInterval {
        PInterval { lo: ExtValue::zero(), hi: ExtValue::zero(), includes_infinity: false }
    }

    /// Builds `(lo, hi)` and canonicalizes an empty finite part.
    pub fn new(lo: ExtValue, hi: ExtValue, includes_infinity: bool, q: &Rat) -> PInterval {
        let lo = match lo.value(q) {
            Some(v) if v.is_negative() => ExtValue::zero(),
            _ => lo,
        };
        if lo.cmp_at(&hi, q) != Ordering::Less {
            return PInterval { lo: ExtValue::zero(), hi: ExtValue::zero(), includes_infinity };
        }
        PInterval { lo, hi, includes_infinity }
    }

    pub fn finite_is_empty(&self, q: &Rat) -> bool {
        self.lo.cmp_at(&self.hi, q) != Ordering::Less
    }

    pub fn is_empty(&self, q: &Rat) -> bool {
        self.finite_is_empty(q) && !self.includes_infinity
    }

    /// Membership of a finite positive `p`.
    pub fn contains(&self, p: &Rat, q: &Rat) -> bool {
        if !p.is_positive() {
            return false;
        }
        let above = match self.lo.value(q) {
            Some(lo) => p > &lo,
            None => false,
        };
        let below = match self.hi.value(q) {
            Some(hi) => p < &hi,
            None => true,
        };
        above && below
    }

    /// Membership of a float `p`, `f64::INFINITY` meaning the point at infinity.
    pub fn contains_f64(&self, p: f64, q: &Rat) -> bool {
        if p.is_infinite() {
            return self.includes_infinity;
        }
        let lo = self.lo.value(q).map(|v| v.to_f64()).unwrap_or(f64::INFINITY);
        let hi = self.hi.value(q).map(|v| v.to_f64()).unwrap_or(f64::INFINITY);
        p > 0.0 && p > lo && p < hi
    }

    /// Finite endpoints as rationals (the upper one `None` when infinite).
    pub fn endpoints(&self, q: &Rat) -> (Rat, Option<Rat>) {
        (self.lo.value(q).unwrap_or_else(Rat::zero), self.hi.value(q))
    }

    /// Canonical form used for equality across different `QLin` spellings.
    pub fn key(&self, q: &Rat) -> (Rat, Option<Rat>, bool) {
        if self.finite_is_empty(q) {
            return (Rat::zero(), Some(Rat::zero()), self.includes_infinity);
        }
        let (lo, hi) = self.endpoints(q);
        (lo, hi, self.includes_infinity)
    }
}

impl fmt::Display for PInterval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let empty_finite = self.lo == self.hi;
        match (empty_finite, self.includes_infinity) {
            (true, true) => write!(f, "{{inf}}"),
            (true, false) => write!(f, "empty"),
            (false, true) => write!(f, "({}, {}) u {{inf}}", self.lo, self.hi),
            (false, false) => write!(f, "({}, {})", self.lo, self.hi),
        }
    }
}

/// `{p ∈ (0, ∞) : r·p + c(q) > −1}`.
pub fn solve_halfline(r: &Rat, c: &QLin, q: &Rat) -> PInterval {
    let cq = &c.a + &(&c.b * q);
    if r.is_zero() {
        return if cq > Rat::int(-1) { PInterval::all_finite() } else { PInterval::empty() };
    }
    // Threshold e with r·e + c = −1, kept in a + b·q form.
    let e = QLin { a: &(Rat::int(-1) - &c.a) / r, b: &(-&c.b) / r };
    if r.is_positive() {
        PInterval::new(ExtValue::Finite(e), ExtValue::PlusInfinity, false, q)
    } else {
        PInterval::new(ExtValue::zero(), ExtValue::Finite(e), false, q)
    }
}

pub fn interval_intersect(i: &PInterval, j: &PInterval, q: &Rat) -> PInterval {
    let lo = if i.lo.cmp_at(&j.lo, q) == Ordering::Less { j.lo.clone() } else { i.lo.clone() };
    let hi = if i.hi.cmp_at(&j.hi, q) == Ordering::Greater { j.hi.clone() } else { i.hi.clone() };
    let inf = i.includes_infinity && j.includes_infinity;
    if i.finite_is_empty(q) || j.finite_is_empty(q) {
        return PInterval { lo: ExtValue::zero(), hi: ExtValue::zero(), includes_infinity: inf };
    }
    PInterval::new(lo, hi, inf, q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn r(n: i64, d: i64) -> Rat {
        Rat::new(n, d)
    }

    fn fin(a: Rat) -> ExtValue {
        ExtValue::Finite(QLin::constant(a))
    }

    #[test]
    fn parse_and_print() {
        assert_eq!("1/3".parse::<Rat>().unwrap(), r(1, 3));
        assert_eq!("-4/6".parse::<Rat>().unwrap(), r(-2, 3));
        assert_eq!("7".parse::<Rat>().unwrap(), Rat::int(7));
        assert!("1/0".parse::<Rat>().is_err());
        assert!("x".parse::<Rat>().is_err());
        assert_eq!(serde_json::to_string(&r(2, 4)).unwrap(), "\"1/2\"");
        assert_eq!(serde_json::to_string(&Rat::int(3)).unwrap(), "\"3/1\"");
        let back: Rat = serde_json::from_str("\"3/9\"").unwrap();
        assert_eq!(back, r(1, 3));
    }

    #[test]
    fn qlin_eval_examples() {
        assert_eq!(qlin_eval(&QLin::zero(), &Rat::one()).unwrap(), Rat::zero());
        assert_eq!(qlin_eval(&QLin::new(Rat::one(), Rat::int(2)), &r(1, 2)).unwrap(), Rat::int(2));
        assert_eq!(qlin_eval(&QLin::new(Rat::int(-1), Rat::one()), &Rat::int(3)).unwrap(), Rat::int(2));
        assert!(qlin_eval(&QLin::zero(), &Rat::zero()).is_err());
    }

    #[test]
    fn halfline_examples() {
        let q = Rat::one();
        assert_eq!(solve_halfline(&Rat::zero(), &QLin::zero(), &q), PInterval::all_finite());
        let i = solve_halfline(&Rat::int(-1), &QLin::zero(), &q);
        assert_eq!(i.endpoints(&q), (Rat::zero(), Some(Rat::one())));
        let q = r(1, 2);
        let i = solve_halfline(&Rat::int(-2), &QLin::new(Rat::zero(), Rat::one()), &q);
        assert_eq!(i.endpoints(&q), (Rat::zero(), Some(r(3, 4))));
        match &i.hi {
            ExtValue::Finite(v) => assert_eq!(v, &QLin::new(r(1, 2), r(1, 2))),
            _ => panic!(),
        }
        // r = 0 with c ≤ −1 leaves nothing.
        assert!(solve_halfline(&Rat::zero(), &QLin::constant(Rat::int(-1)), &q).is_empty(&q));
        // r < 0 with threshold ≤ 0 is empty.
        assert!(solve_halfline(&Rat::int(-1), &QLin::constant(Rat::int(-2)), &q).is_empty(&q));
    }

    #[test]
    fn intersect_examples() {
        let q = Rat::one();
        let a = PInterval::new(ExtValue::zero(), fin(Rat::one()), false, &q);
        let b = PInterval::new(fin(r(1, 2)), ExtValue::PlusInfinity, true, &q);
        let c = interval_intersect(&a, &b, &q);
        assert_eq!(c.endpoints(&q), (r(1, 2), Some(Rat::one())));
        assert!(!c.includes_infinity);
        assert_eq!(interval_intersect(&a, &PInterval::full(), &q), a);
        let d = PInterval::new(ExtValue::zero(), fin(r(1, 2)), false, &q);
        let e = PInterval::new(fin(r(1, 2)), ExtValue::PlusInfinity, false, &q);
        assert_eq!(interval_intersect(&d, &e, &q), PInterval::empty());
    }

    #[test]
    fn infinity_only_interval() {
        let q = Rat::one();
        let a = PInterval { lo: ExtValue::zero(), hi: ExtValue::zero(), includes_infinity: true };
        assert!(!a.is_empty(&q));
        assert!(a.contains_f64(f64::INFINITY, &q));
        assert!(!a.contains(&Rat::one(), &q));
    }

    #[test]
    fn outward_rounding() {
        for v in [0.3, 1.0 / 3.0, 2.0f64.sqrt(), 1e-9, 123456.789, -0.7] {
            assert!(Rat::below(v).to_f64() <= v);
            assert!(Rat::above(v).to_f64() >= v);
            assert!((Rat::below(v).to_f64() - v).abs() <= 1e-9 * v.abs().max(1e-3));
        }
    }

    fn arb_rat() -> impl Strategy<Value = Rat> {
        (-40i64..40, 1i64..12).prop_map(|(n, d)| Rat::new(n, d))
    }

    fn arb_interval() -> impl Strategy<Value = PInterval> {
        (0i64..30, 0i64..30, 1i64..6, any::<bool>(), any::<bool>()).prop_map(|(a, b, d, open, inf)| {
            let q = Rat::one();
            let lo = fin(Rat::new(a.min(b), d));
            let hi = if open { ExtValue::PlusInfinity } else { fin(Rat::new(a.max(b), d)) };
            PInterval::new(lo, hi, inf, &q)
        })
    }

    proptest! {
        #[test]
        fn intersect_laws(a in arb_interval(), b in arb_interval(), c in arb_interval()) {
            let q = Rat::one();
            let ab = interval_intersect(&a, &b, &q);
            prop_assert_eq!(ab.key(&q), interval_intersect(&b, &a, &q).key(&q));
            prop_assert_eq!(
                interval_intersect(&ab, &c, &q).key(&q),
                interval_intersect(&a, &interval_intersect(&b, &c, &q), &q).key(&q)
            );
            prop_assert_eq!(interval_intersect(&a, &a, &q).key(&q), a.key(&q));
            prop_assert_eq!(interval_intersect(&a, &PInterval::full(), &q).key(&q), a.key(&q));
        }

        #[test]
        fn halfline_membership(r in arb_rat(), ca in arb_rat(), cb in arb_rat(), qn in 1i64..8, qd in 1i64..8) {
            let q = Rat::new(qn, qd);
            let c = QLin::new(ca, cb);
            let iv = solve_halfline(&r, &c, &q);
            prop_assert!(!iv.includes_infinity);
            let cq = qlin_eval(&c, &q).unwrap();
            for k in 1..60i64 {
                for d in [1i64, 3, 7] {
                    let p = Rat::new(k, d);
                    let direct = &(&r * &p) + &cq > Rat::int(-1);
                    prop_assert_eq!(iv.contains(&p, &q), direct, "p = {}", p);
                }
            }
            for e in [&iv.lo, &iv.hi] {
                if let ExtValue::Finite(v) = e {
                    let val = qlin_eval(v, &q).unwrap();
                    prop_assert_eq!(e.value(&q).unwrap(), val);
                }
            }
        }
    }
}
