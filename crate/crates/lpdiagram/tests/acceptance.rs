//! The acceptance suite: one line per criterion, nonzero exit on any failure.

mod common;

use std::collections::BTreeMap;
use std::time::Instant;

use common::{r, random_cell, random_family, random_instance, two_term};
use lpdiagram::cli::{parse_instance, run, Command};
use lpdiagram::dickson::{is_antichain, min_antichain, partition_complement, upward_closure_contains, MultiIndex};
use lpdiagram::exact::{ExtValue, QLin};
use lpdiagram::lclass::{assemble_diagram, classify_monomial_1d, config_at, int_p_locus, DiagramPiece};
use lpdiagram::oracle::{
    check_triangle, fiber_integral, fiber_integral_piece, limit_along_curve, sup_estimate, weak_triangle, weak_triangle_exact,
    Quadrature, Verdict,
};
use lpdiagram::prepared::{CoeffFn, Group, PreparedSum, PreparedTerm};
use lpdiagram::rectilinear::{check_pieces, countex_cell, rectilinearize, MonCell, MonomialMap};
use lpdiagram::series::{collapse_series, critical_split, dickson_union, leading_asymptotics, DicksonMode, TruncPoly};
use lpdiagram::Rat;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn monomial_sum(alpha: Rat, beta: u32) -> PreparedSum {
    let cell = MonCell::unit_box(1, 1, common::unit_base());
    let t = PreparedTerm::simple(CoeffFn::constant(1, 1, Rat::one()), vec![alpha], vec![beta]);
    PreparedSum::new(cell, 0, vec![Group::new("a", true, vec![t])], DicksonMode::Generic).unwrap()
}

fn c1_classifier() -> Outcome {
    let start = Instant::now();
    let alphas = [r(-2, 1), r(-1, 1), r(-3, 4), r(-1, 2), r(0, 1), r(1, 2), r(1, 1)];
    let one = monomial_sum(Rat::zero(), 0);
    let (mut agree, mut total, mut threshold_ok) = (0, 0, true);
    for a in &alphas {
        for b in 0..=2u32 {
            let v = classify_monomial_1d(a, b);
            if *a == r(-1, 1) {
                threshold_ok &= !v.integrable;
                continue;
            }
            total += 1;
            let o = fiber_integral(&monomial_sum(a.clone(), b), &one, None, 1.0, 1.0, &[0.5]).unwrap();
            if (o.verdict == Verdict::Converges) == v.integrable && o.verdict != Verdict::Inconclusive {
                agree += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(agree == 18 && total == 18 && threshold_ok && secs < 60.0, format!("{agree}/{total} agree, threshold row exact: {threshold_ok}, {secs:.1}s"))
}

/// `a + b·q` endpoints must come from `(-1 - γ_i - ρ_i·q) / r_i` over the
/// critical exponents.
fn endpoint_explained(e: &QLin, piece: &DiagramPiece) -> bool {
    if e.a.is_zero() && e.b.is_zero() {
        return true;
    }
    let l = piece.f.l;
    let keys = |s: &PreparedSum| -> Vec<Vec<Rat>> { s.critical_groups().map(|g| g.key(l).unwrap().r).collect() };
    let (fk, mk) = (keys(&piece.f), keys(&piece.mu));
    for i in 0..piece.gamma.len() {
        for rf in fk.iter().map(|k| &k[i]).filter(|v| !v.is_zero()) {
            for rm in mk.iter().map(|k| &k[i]) {
                let a = (-(&Rat::one() + &piece.gamma[i])) / rf.clone();
                let b = -(rm / rf);
                if a == e.a && b == e.b {
                    return true;
                }
            }
        }
    }
    false
}

fn c2_random_intervals() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut trials, mut agree, mut inconclusive, mut bad_endpoints) = (0usize, 0usize, 0usize, 0usize);
    for _ in 0..200 {
        let inst = random_instance(&mut rng);
        let pieces = [inst.piece];
        let d = assemble_diagram(&pieces, &inst.q).unwrap();
        for e in &d.intervals {
            for v in [&e.interval.lo, &e.interval.hi] {
                if let ExtValue::Finite(ql) = v {
                    if !endpoint_explained(ql, &pieces[0]) {
                        bad_endpoints += 1;
                    }
                }
            }
        }
        for _ in 0..2 {
            let x = if rng.gen_bool(0.25) {
                [r(1, 2), r(1, 3)].choose(&mut rng).unwrap().clone()
            } else {
                r(rng.gen_range(1..1000), 1000)
            };
            let cfg = config_at(&pieces, std::slice::from_ref(&x)).unwrap();
            let iv = &d.entry_for(&cfg).unwrap().interval;
            let (lo, hi) = iv.endpoints(&inst.q);
            let ends: Vec<f64> = [Some(lo), hi].into_iter().flatten().map(|v| v.to_f64()).filter(|v| *v > 0.0).collect();
            let p = loop {
                let p: f64 = rng.gen_range(0.1..4.0);
                if ends.iter().all(|e| (p - e).abs() >= 0.1) {
                    break p;
                }
            };
            let o = fiber_integral_piece(&pieces[0], p, inst.q.to_f64(), &[x.to_f64()]).unwrap();
            trials += 1;
            match o.verdict {
                Verdict::Inconclusive => inconclusive += 1,
                v if (v == Verdict::Converges) == iv.contains_f64(p, &inst.q) => agree += 1,
                _ => {}
            }
        }
    }
    let rate = agree as f64 / trials as f64;
    outcome(
        rate >= 0.99 && bad_endpoints == 0,
        format!(
            "{agree}/{trials} trials agree ({:.2}%), {inconclusive} inconclusive, {bad_endpoints} unexplained endpoints, {:.1}s",
            100.0 * rate,
            start.elapsed().as_secs_f64()
        ),
    )
}

fn box_points(k: usize, b: u32) -> Vec<MultiIndex> {
    let mut pts = vec![vec![]];
    for _ in 0..k {
        pts = pts.into_iter().flat_map(|p: Vec<u32>| (0..=b).map(move |v| [p.clone(), vec![v]].concat())).collect();
    }
    pts.into_iter().map(MultiIndex).collect()
}

fn c3_dickson() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut failures = 0;
    for _ in 0..100 {
        let m: Vec<MultiIndex> =
            (0..rng.gen_range(1..10)).map(|_| MultiIndex((0..3).map(|_| rng.gen_range(0..=6)).collect())).collect();
        let anti = min_antichain(&m);
        if !is_antichain(&anti) {
            failures += 1;
        }
        let parts = partition_complement(&m);
        let bmax = parts.iter().flat_map(|p| p.thresholds.iter().copied()).max().unwrap_or(0).max(6) + 2;
        for a in box_points(3, bmax) {
            let in_m = upward_closure_contains(&m, &a);
            if in_m != upward_closure_contains(&anti, &a) {
                failures += 1;
            }
            let hits = parts.iter().filter(|p| p.contains(&a)).count();
            let want = usize::from(in_m && !m.contains(&a));
            if hits != want {
                failures += 1;
            }
            for p in parts.iter().filter(|p| p.contains(&a)) {
                if !p.minimal_member().leq(&a) || !p.contains(p.minimal_member()) {
                    failures += 1;
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(failures == 0 && secs < 10.0, format!("{failures} failures over 100 sets, {secs:.1}s"))
}

fn c4_split() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut recomb_fail, mut dom_fail) = (0, 0);
    for _ in 0..100 {
        let fam = random_family(&mut rng);
        let m = dickson_union(&fam, &DicksonMode::Generic).unwrap();
        let s = critical_split(&fam, &m).unwrap();
        if s.recombine().normalized() != fam.normalized() {
            recomb_fail += 1;
        }
        for _ in 0..1000 {
            let pt: Vec<Rat> = (0..2).map(|_| {
                let den = rng.gen_range(1000..100_000);
                r(rng.gen_range(1..den), den)
            }).collect();
            if !s.domination_holds_at(&pt) {
                dom_fail += 1;
            }
        }
    }
    outcome(recomb_fail + dom_fail == 0, format!("{recomb_fail} recombination and {dom_fail} domination failures over 100 families"))
}

fn c5_rect() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut cases: Vec<(MonCell, Vec<f64>)> = vec![(countex_cell(), vec![0.1, 0.37, 0.81])];
    for i in 0..20 {
        cases.push((random_cell(&mut rng, 1 + i % 3), vec![0.3141, 0.7182]));
    }
    let (mut worst_cov, mut coll, mut jac, mut flips, mut errors) = (1.0f64, 0usize, 0.0f64, 0u32, 0usize);
    for (k, (cell, xs)) in cases.iter().enumerate() {
        let ps = match rectilinearize(cell, &MonomialMap::coordinates(cell.n)) {
            Ok(ps) => ps,
            Err(_) => {
                errors += 1;
                continue;
            }
        };
        for x in xs {
            let c = check_pieces(cell, &ps, &[*x], 4000, k as u64);
            worst_cov = worst_cov.min(c.coverage);
            coll += c.collisions;
            jac = jac.max(c.jacobian_rel_err);
            flips = flips.max(c.max_flips);
        }
    }
    outcome(
        errors == 0 && worst_cov >= 0.999 && coll == 0 && jac <= 1e-6 && flips <= 1,
        format!("{} cells, {errors} errors, coverage >= {worst_cov:.4}, {coll} collisions, jacobian rel err {jac:.1e}, max flips {flips}", cases.len()),
    )
}

fn c6_countex() -> Outcome {
    let mut g_log = BTreeMap::new();
    g_log.insert(1u32, TruncPoly::constant(3, Rat::one()));
    let mut g_t = BTreeMap::new();
    g_t.insert(0u32, TruncPoly::var(3, 1).add(&TruncPoly::var(3, 2)));
    let l1 = leading_asymptotics(&collapse_series(&g_log).unwrap()).unwrap();
    let l2 = leading_asymptotics(&collapse_series(&g_t).unwrap()).unwrap();
    let ok1 = (l1.p, l1.q, l1.r, l1.a.clone(), l1.eps.clone()) == (0, 0, 1, Rat::one(), Rat::one());
    let ok2 = (l2.p, l2.q, l2.r, l2.a.clone(), l2.eps.clone()) == (0, 1, 0, Rat::one(), r(1, 2));
    let grid: Vec<f64> = (3..=8).map(|k| 10f64.powi(-k)).collect();
    let e1 = (limit_along_curve(&g_log, &l1, 0.3, &grid).unwrap() - 1.0).abs();
    let e2 = (limit_along_curve(&g_t, &l2, 0.25, &grid).unwrap() - 1.0).abs();
    let inst = parse_instance(br#"{"q": "1", "options": {"countex_x": 0.1}}"#).unwrap();
    let rep = run(Command::Countex, &inst).unwrap().report;
    let sup = rep["f"]["sup"].as_f64().unwrap();
    let contrast = rep["f"]["bounded"] == true && rep["split_terms"]["log y1"]["bounded"] == false;
    let sup_ok = (sup - 10f64.ln()).abs() < 1e-3;
    outcome(
        ok1 && ok2 && e1 < 1e-3 && e2 < 1e-3 && sup_ok && contrast,
        format!("log x -> {ok1}, x^t + x^(1-t) -> {ok2}, curve errors {e1:.1e}/{e2:.1e}, sup {sup:.6} vs log 10, log y1 unbounded: {contrast}"),
    )
}

fn c7_triangle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let quad = Quadrature::exp_cube(1, 8, 8, 30.0);
    let mut viol = 0;
    for _ in 0..500 {
        let p: f64 = rng.gen_range(0.1..3.0);
        let q: f64 = rng.gen_range(0.1..3.0);
        // Exponents keep |f|^p|g|^q integrable.
        let family = |rng: &mut ChaCha8Rng, k: usize| -> Vec<(f64, f64, i32)> {
            (0..k).map(|_| (rng.gen_range(-2.0..2.0), rng.gen_range(-0.45..1.0) / p.max(q), rng.gen_range(0..3))).collect()
        };
        let kf = rng.gen_range(1..4);
        let fs = family(&mut rng, kf);
        let kg = rng.gen_range(1..3);
        let gs = family(&mut rng, kg);
        let mk = |(c, a, s): (f64, f64, i32)| move |y: &[f64]| c * y[0].powf(a) * y[0].ln().powi(s);
        let fb: Vec<Box<dyn Fn(&[f64]) -> f64>> = fs.iter().map(|&t| Box::new(mk(t)) as Box<dyn Fn(&[f64]) -> f64>).collect();
        let gb: Vec<Box<dyn Fn(&[f64]) -> f64>> = gs.iter().map(|&t| Box::new(mk(t)) as Box<dyn Fn(&[f64]) -> f64>).collect();
        let fr: Vec<&dyn Fn(&[f64]) -> f64> = fb.iter().map(|b| b.as_ref()).collect();
        let gr: Vec<&dyn Fn(&[f64]) -> f64> = gb.iter().map(|b| b.as_ref()).collect();
        if !check_triangle(&fr, &gr, p, q, &quad).unwrap().holds {
            viol += 1;
        }
    }
    let mut weak_viol = 0;
    for _ in 0..500 {
        let xs: Vec<f64> = (0..rng.gen_range(1..8)).map(|_| 10f64.powf(rng.gen_range(-6.0..6.0))).collect();
        let p: f64 = rng.gen_range(0.01..=1.0);
        if !weak_triangle(&xs, p).unwrap().holds {
            weak_viol += 1;
        }
        let zs: Vec<Rat> = (0..rng.gen_range(1..5)).map(|_| r(rng.gen_range(0..20), rng.gen_range(1..10))).collect();
        let b = rng.gen_range(1..5u32);
        let a = rng.gen_range(1..=b);
        if !weak_triangle_exact(&zs, a, b).unwrap() {
            weak_viol += 1;
        }
    }
    outcome(viol + weak_viol == 0, format!("{viol} triangle and {weak_viol} weak-triangle violations in 500 + 500 checks"))
}

fn c8_diagram_queries() -> Outcome {
    let piece = two_term();
    let q = Rat::one();
    let d = assemble_diagram(std::slice::from_ref(&piece), &q).unwrap();
    let mut loci = Vec::new();
    let mut ps: Vec<Rat> = (1..=300).map(|k| r(k, 100)).collect();
    ps.extend([r(1, 2), r(1, 1), r(1, 1000), r(1000, 1)]);
    let mut all: Vec<Option<Rat>> = ps.into_iter().map(Some).collect();
    all.push(None);
    for p in &all {
        let l = int_p_locus(&d, p.as_ref());
        if !loci.contains(&l) {
            loci.push(l);
        }
    }
    let inf = int_p_locus(&d, None);
    let mut xs: Vec<Rat> = (1..50).map(|k| r(k, 50)).collect();
    xs.push(r(1, 3));
    let mut mismatches = 0;
    for x in &xs {
        let cfg = config_at(std::slice::from_ref(&piece), std::slice::from_ref(x)).unwrap();
        let predicted = inf.eval(&cfg.vanishing);
        let s = sup_estimate(&piece.f, &[x.to_f64()], 0.25).unwrap();
        if s.bounded != predicted {
            mismatches += 1;
        }
    }
    outcome(
        loci.len() == 3 && mismatches == 0,
        format!("{} distinct loci over {} values of p, p = inf locus vs sup estimate: {mismatches}/{} mismatches", loci.len(), all.len(), xs.len()),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("1-D classifier vs oracle", c1_classifier),
        ("random interval agreement", c2_random_intervals),
        ("Dickson combinatorics", c3_dickson),
        ("critical split", c4_split),
        ("rectilinearization", c5_rect),
        ("curve asymptotics and countex", c6_countex),
        ("triangle inequalities", c7_triangle),
        ("diagram queries", c8_diagram_queries),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let o = f();
        println!("criterion {}: {} [{name}] {}", i + 1, if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
