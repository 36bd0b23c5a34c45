//! Instance parsing and the JSON report pipeline behind the `lpdiagram` binary.
//!
//! An instance is one JSON object. `q` is always required; each command reads
//! the fields it needs and ignores the rest.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::dickson::{min_antichain, partition_complement, MultiIndex};
use crate::exact::{ExtValue, PInterval, QLin, Rat};
use crate::lclass::{
    assemble_diagram_with, classify_monomial_1d, classify_rect, complex_reduce, config_at, Diagram, DiagramEntry,
    DiagramOptions, DiagramPiece,
};
use crate::oracle::{fiber_integral_piece, limit_along_curve, sup_on_cell, default_curve_grid, Verdict};
use crate::prepared::PreparedSum;
use crate::rectilinear::{check_pieces, countex_cell, rectilinearize_with, MonCell, MonomialMap, RectOptions};
use crate::series::{collapse_series, critical_split, dickson_union, leading_asymptotics, CoeffFamily, DicksonMode, TruncPoly};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Classify,
    Diagram,
    Rectilinearize,
    Split,
    Dickson,
    Countex,
    Verify,
}

impl Command {
    pub const ALL: [Command; 7] = [
        Command::Classify,
        Command::Diagram,
        Command::Rectilinearize,
        Command::Split,
        Command::Dickson,
        Command::Countex,
        Command::Verify,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Classify => "classify",
            Command::Diagram => "diagram",
            Command::Rectilinearize => "rectilinearize",
            Command::Split => "split",
            Command::Dickson => "dickson",
            Command::Countex => "countex",
            Command::Verify => "verify",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Command> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown command `{s}`")))
    }
}

/// One diagram piece: `f`, an optional weight (default `1`) and the Jacobian
/// exponents on the free coordinates (default `0`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PieceSpec {
    pub f: PreparedSum,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<PreparedSum>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<Vec<Rat>>,
}

impl PieceSpec {
    pub fn build(&self) -> Result<DiagramPiece> {
        let mu = self.mu.clone().unwrap_or_else(|| crate::lclass::unit_weight(&self.f.cell, self.f.l));
        let gamma = self.gamma.clone().unwrap_or_else(|| vec![Rat::zero(); self.f.n() - self.f.l]);
        DiagramPiece::new(self.f.clone(), mu, gamma)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexSpec {
    pub f_re: PreparedSum,
    pub f_im: PreparedSum,
    pub mu_re: PreparedSum,
    pub mu_im: PreparedSum,
}

/// `y^α (log y)^β` with the first `l` coordinates compact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonomialSpec {
    pub alpha: Vec<Rat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<Vec<u32>>,
    #[serde(default)]
    pub l: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoeffEntry {
    pub alpha: MultiIndex,
    pub coeff: TruncPoly,
}

/// `Σ_α f_α(x, y) z^α`, listed by index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilySpec {
    pub k: usize,
    pub nvars: usize,
    pub coeffs: Vec<CoeffEntry>,
}

impl FamilySpec {
    pub fn build(&self) -> Result<CoeffFamily> {
        let mut fam = CoeffFamily::new(self.k, self.nvars);
        for (i, e) in self.coeffs.iter().enumerate() {
            if e.alpha.arity() != self.k || e.coeff.nvars != self.nvars {
                return Err(Error::Parse(format!("$.family.coeffs[{i}]: arity does not match k = {} and nvars = {}", self.k, self.nvars)));
            }
            let merged = fam.get(&e.alpha).map(|p| p.add(&e.coeff)).unwrap_or_else(|| e.coeff.clone());
            fam.coeffs.remove(&e.alpha);
            fam.insert(e.alpha.clone(), merged);
        }
        Ok(fam)
    }
}

/// A candidate `g = Σ_i (log x)^i G_i(x, z, w)` for the curve asymptotics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    #[serde(default)]
    pub label: String,
    pub g: BTreeMap<u32, TruncPoly>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Options {
    pub max_configs: u64,
    pub feasibility_samples: usize,
    pub max_depth: u32,
    pub max_pieces: usize,
    /// Base point for the piece self-check of `rectilinearize`.
    pub check_x: Option<Vec<f64>>,
    pub check_samples: usize,
    pub countex_x: f64,
    pub sup_eps: f64,
    pub verify_samples: usize,
    /// Required fraction of oracle agreement in `verify`.
    pub verify_threshold: f64,
    /// `p` is kept at least this far from every finite endpoint in `verify`.
    pub endpoint_margin: f64,
    pub p_max: f64,
}

impl Default for Options {
    fn default() -> Options {
        Options {
            max_configs: 1 << 16,
            feasibility_samples: 64,
            max_depth: 12,
            max_pieces: 4096,
            check_x: None,
            check_samples: 2000,
            countex_x: 0.1,
            sup_eps: 0.25,
            verify_samples: 100,
            verify_threshold: 0.99,
            endpoint_margin: 0.1,
            p_max: 4.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub q: Rat,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pieces: Vec<PieceSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub complex: Option<ComplexSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub monomials: Vec<MonomialSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cell: Option<MonCell>,
    /// Map to rectilinearize along; the coordinate functions by default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map: Option<MonomialMap>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<FamilySpec>,
    /// Critical index set for `split`; the generic Dickson set by default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m_cr: Option<Vec<MultiIndex>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<DicksonMode>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub indices: Vec<MultiIndex>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<Candidate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagram: Option<Diagram>,
    #[serde(default)]
    pub options: Options,
}

/// Parses an instance; errors carry the JSON path of the offending value.
pub fn parse_instance(bytes: &[u8]) -> Result<Instance> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    let inst: Instance = serde_path_to_error::deserialize(de).map_err(|e| {
        let mut path = format!("$.{}", e.path()).replace("$..", "$").replace(".[", "[");
        if path == "$." {
            path = "$".into();
        }
        let inner = e.into_inner().to_string();
        // serde reports a missing field at its parent.
        if let Some(field) = inner.strip_prefix("missing field `").and_then(|s| s.split('`').next()) {
            return Error::Parse(format!("{path}.{field}: missing field"));
        }
        Error::Parse(format!("{path}: {inner}"))
    })?;
    if !inst.q.is_positive() {
        return Err(Error::Parse("$.q: q must be positive".into()));
    }
    Ok(inst)
}

/// Canonical serialization of an instance.
pub fn serialize_instance(inst: &Instance) -> String {
    serde_json::to_string_pretty(inst).expect("instances serialize")
}

/// A report plus an invariant failure found while producing it.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub report: Value,
    pub violation: Option<String>,
}

impl Outcome {
    fn ok(report: Value) -> Outcome {
        Outcome { report, violation: None }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.report).expect("reports serialize");
        s.push('\n');
        s
    }
}

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Resource(_) => 3,
        Error::Invariant(_) | Error::Numeric(_) => 4,
        _ => 2,
    }
}

pub fn run(cmd: Command, inst: &Instance) -> Result<Outcome> {
    match cmd {
        Command::Classify => classify(inst).map(Outcome::ok),
        Command::Diagram => diagram(inst).and_then(|d| to_value(&d)).map(Outcome::ok),
        Command::Rectilinearize => rect(inst).map(Outcome::ok),
        Command::Split => split(inst).map(Outcome::ok),
        Command::Dickson => dickson(inst).map(Outcome::ok),
        Command::Countex => countex(inst).map(Outcome::ok),
        Command::Verify => verify(inst),
    }
}

fn to_value<T: Serialize>(v: &T) -> Result<Value> {
    serde_json::to_value(v).map_err(|e| Error::Invariant(format!("report serialization failed: {e}")))
}

fn require<'a, T>(v: &'a Option<T>, path: &str) -> Result<&'a T> {
    v.as_ref().ok_or_else(|| Error::Parse(format!("{path}: missing field")))
}

fn pieces(inst: &Instance) -> Result<Vec<DiagramPiece>> {
    if inst.pieces.is_empty() {
        return Err(Error::Parse("$.pieces: at least one piece is required".into()));
    }
    inst.pieces.iter().map(PieceSpec::build).collect()
}

fn classify(inst: &Instance) -> Result<Value> {
    let mut monos = Vec::new();
    for (i, m) in inst.monomials.iter().enumerate() {
        let beta = m.beta.clone().unwrap_or_else(|| vec![0; m.alpha.len()]);
        if beta.len() != m.alpha.len() || m.l > m.alpha.len() {
            return Err(Error::Parse(format!("$.monomials[{i}]: alpha, beta and l are inconsistent")));
        }
        let v = if m.alpha.len() == 1 && m.l == 0 {
            classify_monomial_1d(&m.alpha[0], beta[0])
        } else {
            classify_rect(&m.alpha, &beta, m.l)
        };
        monos.push(json!({ "alpha": m.alpha, "beta": beta, "l": m.l, "integrable": v.integrable, "bounded": v.bounded }));
    }
    let mut terms = Vec::new();
    for (k, p) in inst.pieces.iter().enumerate() {
        for g in &p.f.groups {
            for (t_idx, t) in g.terms.iter().enumerate() {
                let v = classify_rect(&t.r, &t.s, p.f.l);
                terms.push(json!({
                    "piece": k, "group": g.label, "term": t_idx,
                    "integrable": v.integrable, "bounded": v.bounded,
                }));
            }
        }
    }
    if monos.is_empty() && terms.is_empty() {
        return Err(Error::Parse("$.monomials: nothing to classify".into()));
    }
    Ok(json!({ "monomials": monos, "terms": terms }))
}

fn diagram_options(inst: &Instance) -> DiagramOptions {
    DiagramOptions { max_configs: inst.options.max_configs, samples: inst.options.feasibility_samples, seed: inst.seed }
}

/// The diagram of the instance; complex instances are reduced to real ones
/// and the endpoints mapped back.
pub fn diagram(inst: &Instance) -> Result<Diagram> {
    if let Some(c) = &inst.complex {
        let red = complex_reduce(&c.f_re, &c.f_im, &c.mu_re, &c.mu_im)?;
        let q2 = &inst.q * &red.scale;
        let piece = DiagramPiece::new(red.f, red.mu, vec![Rat::zero(); c.f_re.n() - c.f_re.l])?;
        let d = assemble_diagram_with(&[piece], &q2, &diagram_options(inst))?;
        return Ok(rescale(d, &red.scale, &inst.q));
    }
    assemble_diagram_with(&pieces(inst)?, &inst.q, &diagram_options(inst))
}

/// `p' = a + b·q'` with `p' = s·p`, `q' = s·q` gives `p = a/s + b·q`.
fn rescale(d: Diagram, s: &Rat, q: &Rat) -> Diagram {
    let map = |v: ExtValue| match v {
        ExtValue::Finite(l) => ExtValue::Finite(QLin::new(&l.a / s, l.b)),
        ExtValue::PlusInfinity => ExtValue::PlusInfinity,
    };
    let intervals = d
        .intervals
        .into_iter()
        .map(|e| DiagramEntry {
            interval: PInterval { lo: map(e.interval.lo), hi: map(e.interval.hi), includes_infinity: e.interval.includes_infinity },
            locus: e.locus,
        })
        .collect();
    Diagram { q: q.clone(), atoms: d.atoms, intervals, configs: d.configs }
}

fn rect(inst: &Instance) -> Result<Value> {
    let cell = require(&inst.cell, "$.cell")?;
    let phi = inst.map.clone().unwrap_or_else(|| MonomialMap::coordinates(cell.n));
    let opts = RectOptions { max_depth: inst.options.max_depth, max_pieces: inst.options.max_pieces };
    let pieces = rectilinearize_with(cell, &phi, &opts)?;
    let mut out = json!({ "count": pieces.len(), "pieces": to_value(&pieces)? });
    if let Some(x) = &inst.options.check_x {
        if x.len() != cell.m {
            return Err(Error::Parse(format!("$.options.check_x: expected {} coordinates", cell.m)));
        }
        let chk = check_pieces(cell, &pieces, x, inst.options.check_samples, inst.seed);
        out["check"] = to_value(&chk)?;
    }
    Ok(out)
}

fn split(inst: &Instance) -> Result<Value> {
    let fam = require(&inst.family, "$.family")?.build()?;
    let m_cr = match &inst.m_cr {
        Some(m) => m.clone(),
        None => dickson_union(&fam, inst.mode.as_ref().unwrap_or(&DicksonMode::Generic))?,
    };
    let res = critical_split(&fam, &m_cr)?;
    let recombined = res.recombine().normalized() == fam.normalized();
    if !recombined {
        return Err(Error::Invariant("split does not recombine to the input family".into()));
    }
    Ok(json!({ "split": to_value(&res)?, "recombines": recombined }))
}

fn dickson(inst: &Instance) -> Result<Value> {
    if let Some(k) = inst.indices.first().map(|a| a.arity()) {
        if let Some(i) = inst.indices.iter().position(|a| a.arity() != k) {
            return Err(Error::Parse(format!("$.indices[{i}]: arity differs from the first index")));
        }
    }
    let anti = min_antichain(&inst.indices);
    let parts = partition_complement(&inst.indices);
    let parts: Vec<Value> = parts
        .iter()
        .map(|p| json!({ "minimal": p.minimal_member(), "free_coords": p.free_coords, "thresholds": p.thresholds }))
        .collect();
    Ok(json!({ "antichain": anti, "partition": parts }))
}

fn countex(inst: &Instance) -> Result<Value> {
    let x = inst.options.countex_x;
    if !(x > 0.0 && x < 1.0) {
        return Err(Error::Parse("$.options.countex_x: must lie in (0, 1)".into()));
    }
    let cell = countex_cell();
    let eps = inst.options.sup_eps;
    let xs = [x];
    let f = sup_on_cell(&cell, &xs, eps, |y| (y[0] / y[1]).ln())?;
    let l1 = sup_on_cell(&cell, &xs, eps, |y| y[0].ln())?;
    let l2 = sup_on_cell(&cell, &xs, eps, |y| y[1].ln())?;
    let mut cands = Vec::new();
    for c in &inst.candidates {
        let lead = leading_asymptotics(&collapse_series(&c.g)?)?;
        let t = lead.eps.to_f64() / 2.0;
        let limit = limit_along_curve(&c.g, &lead, t, &default_curve_grid())?;
        cands.push(json!({ "label": c.label, "leading": to_value(&lead)?, "t": t, "curve_limit": limit }));
    }
    let sup = |s: &crate::oracle::SupEstimate| json!({ "sup": s.sup, "bounded": s.bounded });
    Ok(json!({
        "x": x,
        "f": { "expr": "log(y1/y2)", "sup": f.sup, "bounded": f.bounded, "log_inv_x": -x.ln() },
        "split_terms": { "log y1": sup(&l1), "log y2": sup(&l2) },
        "candidates": cands,
    }))
}

fn verify(inst: &Instance) -> Result<Outcome> {
    let ps = pieces(inst)?;
    let d = match &inst.diagram {
        Some(d) => {
            if d.q != inst.q {
                return Err(Error::Parse("$.diagram.q: differs from $.q".into()));
            }
            d.clone()
        }
        None => diagram(inst)?,
    };
    let base = &ps[0].f.cell.base;
    let mut rng = ChaCha8Rng::seed_from_u64(inst.seed);
    let q = inst.q.to_f64();
    let o = &inst.options;
    let mut agree = 0usize;
    let mut inconclusive = 0usize;
    let mut disagreements = Vec::new();
    for _ in 0..o.verify_samples {
        let x: Vec<Rat> = base
            .iter()
            .map(|(lo, hi)| {
                let k = rng.gen_range(1..1000);
                lo + &((hi - lo) * Rat::new(k, 1000))
            })
            .collect();
        let cfg = config_at(&ps, &x)?;
        let entry = d.entry_for(&cfg).ok_or_else(|| Error::Invariant(format!("configuration {cfg:?} missing from the diagram")))?;
        let (lo, hi) = entry.interval.endpoints(&inst.q);
        let ends: Vec<f64> = [Some(lo), hi].into_iter().flatten().map(|r| r.to_f64()).filter(|v| *v > 0.0).collect();
        let p = loop {
            let p = rng.gen_range(o.endpoint_margin..o.p_max);
            if ends.iter().all(|e| (p - e).abs() >= o.endpoint_margin) {
                break p;
            }
        };
        let predicted = entry.interval.contains_f64(p, &inst.q);
        let xf: Vec<f64> = x.iter().map(Rat::to_f64).collect();
        let mut oracle = Verdict::Converges;
        for piece in &ps {
            match fiber_integral_piece(piece, p, q, &xf)?.verdict {
                Verdict::Converges => {}
                v => {
                    oracle = v;
                    if v == Verdict::Diverges {
                        break;
                    }
                }
            }
        }
        match oracle {
            Verdict::Inconclusive => inconclusive += 1,
            v if (v == Verdict::Converges) == predicted => agree += 1,
            _ => {}
        }
        if oracle == Verdict::Inconclusive || (oracle == Verdict::Converges) != predicted {
            disagreements.push(json!({ "x": x, "p": p, "predicted": predicted, "oracle": oracle }));
        }
    }
    let n = o.verify_samples.max(1);
    let rate = agree as f64 / n as f64;
    let report = json!({
        "samples": o.verify_samples,
        "agree": agree,
        "inconclusive": inconclusive,
        "agreement": rate,
        "threshold": o.verify_threshold,
        "disagreements": disagreements,
    });
    let violation = (rate < o.verify_threshold).then(|| format!("oracle agreement {rate} below {}", o.verify_threshold));
    Ok(Outcome { report, violation })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_term() -> &'static str {
        r#"{
          "q": "1",
          "pieces": [{ "f": {
            "cell": { "m": 1, "n": 1, "base": [["0", "1"]] },
            "l": 0,
            "groups": [
              { "label": "g1", "critical": true, "coeff": { "m": 1, "n": 1, "poly": { "nvars": 3, "terms": [{ "exponents": [1,0,0], "coefficient": "1" }] } }, "r": ["-1"] },
              { "label": "g2", "critical": true, "coeff": { "m": 1, "n": 1, "poly": { "nvars": 3, "terms": [
                  { "exponents": [1,0,0], "coefficient": "1" }, { "exponents": [0,0,0], "coefficient": "-1/2" } ] } }, "r": ["-2"] }
            ]
          }}]
        }"#
    }

    #[test]
    fn missing_q_path() {
        let e = parse_instance(br#"{"pieces": []}"#).unwrap_err();
        assert!(e.to_string().contains("$.q"), "{e}");
        assert_eq!(exit_code(&e), 2);
    }

    #[test]
    fn nested_path() {
        let e = parse_instance(br#"{"q": "1", "monomials": [{"alpha": ["1/3", "x"]}]}"#).unwrap_err();
        assert!(e.to_string().contains("$.monomials[0].alpha[1]"), "{e}");
    }

    #[test]
    fn exponent_parses() {
        let i = parse_instance(br#"{"q": "1/2", "monomials": [{"alpha": ["1/3"]}]}"#).unwrap();
        assert_eq!(i.monomials[0].alpha[0], Rat::new(1, 3));
        let again = parse_instance(serialize_instance(&i).as_bytes()).unwrap();
        assert_eq!(again, i);
    }

    #[test]
    fn unknown_command() {
        assert!("frobnicate".parse::<Command>().is_err());
        for c in Command::ALL {
            assert_eq!(c.name().parse::<Command>().unwrap(), c);
        }
    }

    #[test]
    fn diagram_three_intervals() {
        let inst = parse_instance(two_term().as_bytes()).unwrap();
        let out = run(Command::Diagram, &inst).unwrap();
        assert_eq!(out.report["intervals"].as_array().unwrap().len(), 3);
        let again = run(Command::Diagram, &inst).unwrap();
        assert_eq!(out.to_json(), again.to_json());
    }

    #[test]
    fn verify_agrees() {
        let inst = parse_instance(two_term().as_bytes()).unwrap();
        let out = run(Command::Verify, &inst).unwrap();
        assert!(out.violation.is_none(), "{}", out.to_json());
        assert!(out.report["agreement"].as_f64().unwrap() >= 0.99);
    }

    #[test]
    fn countex_report() {
        let inst = parse_instance(br#"{"q": "1"}"#).unwrap();
        let out = run(Command::Countex, &inst).unwrap().report;
        assert!((out["f"]["sup"].as_f64().unwrap() - 10f64.ln()).abs() < 1e-3);
        assert_eq!(out["f"]["bounded"], true);
        assert_eq!(out["split_terms"]["log y1"]["bounded"], false);
    }

    #[test]
    fn dickson_report() {
        let inst = parse_instance(br#"{"q": "1", "indices": [[1,2],[2,1],[2,2]]}"#).unwrap();
        let out = run(Command::Dickson, &inst).unwrap().report;
        assert_eq!(out["antichain"], json!([[1, 2], [2, 1]]));
    }
}
