//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.

mod common;

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader};
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{fixture, random_box, random_detection, ranked, ref_iou, softmax_scores, synthetic_vocab};
use symscene::codec::{
    encode_raw, encode_symbolic, Inverter, PrivacyTier, RawLayout, SceneEncoding, SymbolicLayout, ENCODING_DIM,
};
use symscene::edge::{self, decode_frame, encode_frame, MemorySink, Server, ServerPolicy, Status};
use symscene::geometry::{enveloping_box, nms};
use symscene::metrics::{average_precision, match_detections, EvalImage, GroundTruthObject};
use symscene::{BoundingBox, Detection, EmbeddingTable, Vocabulary};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);
type Instance = (Vec<(BoundingBox, f64)>, Vec<BoundingBox>);

macro_rules! check {
    ($cond:expr, $($fmt:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($fmt)+));
        }
    };
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("layout conformance", layout_conformance),
        ("dimension arithmetic", dimension_arithmetic),
        ("privacy lossiness", privacy_lossiness),
        ("inversion round trip", inversion_round_trip),
        ("metric oracle equivalence", metric_oracles),
        ("NMS equivalence", nms_equivalence),
        ("monotone and scale invariance", invariance),
        ("wire soundness", wire_soundness),
        ("end-to-end CLI", end_to_end_cli),
    ];
    panic::set_hook(Box::new(|_| {}));
    let start = Instant::now();
    let mut passed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => {
                passed += 1;
                println!("PASS {}. {name}: {detail} [{secs:.2}s]", i + 1);
            }
            Err(detail) => println!("FAIL {}. {name}: {detail} [{secs:.2}s]", i + 1),
        }
    }
    let total = start.elapsed();
    let in_time = total < Duration::from_secs(60);
    println!(
        "{} total runtime {:.2}s (limit 60s)",
        if in_time { "PASS" } else { "FAIL" },
        total.as_secs_f64()
    );
    println!("{passed} of {} criteria passed", criteria.len());
    if passed < criteria.len() || !in_time {
        std::process::exit(1);
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn full_vocab(seed: u64) -> (Vocabulary, EmbeddingTable) {
    synthetic_vocab(&mut rng(seed), 1600, 400, 300)
}

fn normalize(b: [f64; 4], frame: [f64; 4]) -> [f64; 4] {
    let (w, h) = (frame[2] - frame[0], frame[3] - frame[1]);
    [
        (b[0] - frame[0]) / w,
        (b[1] - frame[1]) / h,
        (b[2] - frame[0]) / w,
        (b[3] - frame[1]) / h,
    ]
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

fn bits_equal(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn layout_conformance() -> Outcome {
    let t = Instant::now();
    let (vocab, table) = full_vocab(1);
    let sym = SymbolicLayout::new(5, 300).unwrap();
    let raw = RawLayout::new(1600, 400).unwrap();
    let mut rng = rng(11);
    let mut checked = 0;
    for _ in 0..100 {
        let (w, h) = (rng.gen_range(64.0..2000.0), rng.gen_range(64.0..2000.0));
        let dets: Vec<Detection> = (0..10).map(|_| random_detection(&mut rng, w, h, 1600, 400)).collect();
        let env = enveloping_box(&dets.iter().map(|d| d.bbox).collect::<Vec<_>>()).unwrap();
        for d in &dets {
            let s = encode_symbolic(d, &env, w, h, &vocab, &table, &sym, true).map_err(|e| e.to_string())?;
            let r = encode_raw(d, &env, w, h, &raw).map_err(|e| e.to_string())?;
            check!(
                s.tier == PrivacyTier::Private && r.tier == PrivacyTier::AtRisk,
                "wrong tiers"
            );
            check!(
                s.vector.len() == ENCODING_DIM && r.vector.len() == ENCODING_DIM,
                "wrong lengths"
            );
            check!(s.vector[1808..].iter().all(|&v| v == 0.0), "symbolic padding not zero");
            check!(r.vector[2008..].iter().all(|&v| v == 0.0), "raw padding not zero");

            // every declared slot holds exactly its independently computed content
            for (slot, c) in ranked(&d.class_scores, 5).into_iter().enumerate() {
                let e = table.get(&vocab.class_names()[c]).unwrap();
                check!(
                    bits_equal(&s.vector[slot * 300..(slot + 1) * 300], e),
                    "class slot {slot} content"
                );
            }
            let top_attrs = ranked(&d.attribute_scores, 5);
            let total: f64 = top_attrs.iter().map(|&a| d.attribute_scores[a]).sum();
            let mut blend = vec![0.0; 300];
            for &a in &top_attrs {
                let e = table.get(&vocab.attribute_names()[a]).unwrap();
                for (b, x) in blend.iter_mut().zip(e) {
                    *b += d.attribute_scores[a] / total * x;
                }
            }
            check!(close(&s.vector[1500..1800], &blend, 1e-12), "attribute block content");
            let global = normalize(d.bbox.to_array(), [0.0, 0.0, w, h]);
            let relative = normalize(d.bbox.to_array(), env.to_array());
            check!(close(&s.vector[1800..1804], &global, 1e-12), "symbolic global box");
            check!(close(&s.vector[1804..1808], &relative, 1e-12), "symbolic relative box");
            check!(bits_equal(&r.vector[..1600], &d.class_scores), "raw class block");
            check!(
                bits_equal(&r.vector[1600..2000], &d.attribute_scores),
                "raw attribute block"
            );
            check!(close(&r.vector[2000..2004], &global, 1e-12), "raw global box");
            check!(close(&r.vector[2004..2008], &relative, 1e-12), "raw relative box");

            // masking the declared slots leaves nothing behind
            let mut masked = s.vector.clone();
            for range in [
                sym.class_block(),
                sym.attribute_block(),
                sym.global_box(),
                sym.relative_box(),
            ] {
                masked[range].fill(0.0);
            }
            check!(
                masked.iter().all(|&v| v == 0.0),
                "symbolic value outside declared slots"
            );
            let mut masked = r.vector.clone();
            for range in [
                raw.class_block(),
                raw.attribute_block(),
                raw.global_box(),
                raw.relative_box(),
            ] {
                masked[range].fill(0.0);
            }
            check!(masked.iter().all(|&v| v == 0.0), "raw value outside declared slots");
            checked += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    check!(secs < 5.0, "took {secs:.2}s, limit 5s");
    Ok(format!("{checked} detections conform"))
}

fn dimension_arithmetic() -> Outcome {
    let sym = SymbolicLayout::new(5, 300).unwrap();
    check!(sym.class_block() == (0..1500), "class block {:?}", sym.class_block());
    check!(
        sym.attribute_block() == (1500..1800),
        "attribute block {:?}",
        sym.attribute_block()
    );
    check!(sym.global_box() == (1800..1804), "global box {:?}", sym.global_box());
    check!(
        sym.relative_box() == (1804..1808),
        "relative box {:?}",
        sym.relative_box()
    );
    check!(sym.used() == 1808, "symbolic used {}", sym.used());
    let raw = RawLayout::new(1600, 400).unwrap();
    check!(raw.class_block() == (0..1600), "raw class block");
    check!(raw.attribute_block() == (1600..2000), "raw attribute block");
    check!(
        raw.global_box() == (2000..2004) && raw.relative_box() == (2004..2008),
        "raw boxes"
    );
    check!(raw.used() == 2008, "raw used {}", raw.used());
    check!(ENCODING_DIM == 2048, "encoding dim {ENCODING_DIM}");
    check!(
        SymbolicLayout::default() == sym && RawLayout::default() == raw,
        "default layouts"
    );
    Ok("1808 and 2008, both padded to 2048".into())
}

fn privacy_lossiness() -> Outcome {
    let (vocab, table) = full_vocab(3);
    let sym = SymbolicLayout::new(5, 300).unwrap();
    let raw = RawLayout::new(1600, 400).unwrap();
    let mut rng = rng(33);
    let trials = 50;
    for _ in 0..trials {
        let (w, h) = (640.0, 480.0);
        let bbox = random_box(&mut rng, w, h);
        let env = BoundingBox::new(0.0, 0.0, w, h).unwrap();
        let mut idx: Vec<usize> = (0..1600).collect();
        idx.shuffle(&mut rng);
        let top = &idx[..5];
        let mut sub = || -> Vec<f64> {
            let mut v: Vec<f64> = (0..1600).map(|_| rng.gen_range(0.0..0.5)).collect();
            for (r, &c) in top.iter().enumerate() {
                v[c] = 0.95 - 0.05 * r as f64;
            }
            v
        };
        let (c1, c2) = (sub(), sub());
        let a1: Vec<f64> = (0..400).map(|_| rng.gen_range(0.0..1.0)).collect();
        // scaling by a power of two is exact, so normalized weights match bit for bit
        let a2: Vec<f64> = a1.iter().map(|a| a * 0.5).collect();
        let d1 = Detection::new(bbox, c1, a1).unwrap();
        let d2 = Detection::new(bbox, c2, a2).unwrap();
        let s1 = encode_symbolic(&d1, &env, w, h, &vocab, &table, &sym, true).unwrap();
        let s2 = encode_symbolic(&d2, &env, w, h, &vocab, &table, &sym, true).unwrap();
        check!(bits_equal(&s1.vector, &s2.vector), "symbolic encodings differ");
        let r1 = encode_raw(&d1, &env, w, h, &raw).unwrap();
        let r2 = encode_raw(&d2, &env, w, h, &raw).unwrap();
        check!(!bits_equal(&r1.vector, &r2.vector), "raw encodings coincide");
    }
    Ok(format!("{trials}/{trials} pairs: symbolic bit-identical, raw distinct"))
}

fn inversion_round_trip() -> Outcome {
    let (vocab, table) = full_vocab(4);
    let layout = SymbolicLayout::new(5, 300).unwrap();
    let inverter = Inverter::new(&vocab, &table, layout).unwrap();
    let env = BoundingBox::new(0.0, 0.0, 500.0, 500.0).unwrap();
    // (classes recovered, top attribute ranked first)
    let trial = |rng: &mut ChaCha8Rng| -> Result<(bool, bool), String> {
        // softmax heads, as in a bottom-up attention detector
        let d = Detection::new(
            random_box(rng, 500.0, 500.0),
            softmax_scores(rng, 1600, 3.0),
            softmax_scores(rng, 400, 3.0),
        )
        .unwrap();
        let enc = encode_symbolic(&d, &env, 500.0, 500.0, &vocab, &table, &layout, true).unwrap();
        let inv = inverter.invert(&enc).map_err(|e| e.to_string())?;
        let expected: Vec<&str> = ranked(&d.class_scores, 5)
            .into_iter()
            .map(|c| vocab.class_names()[c].as_str())
            .collect();
        let got: Vec<&str> = inv.classes.iter().filter_map(|s| s.name()).collect();
        let top_attr = ranked(&d.attribute_scores, 1)[0];
        let first = inv.attribute_ranking.as_ref().and_then(|r| r.first()).map(|r| r.0);
        Ok((got == expected, first == Some(top_attr)))
    };

    let mut seeded = rng(44);
    let (mut class_ok, mut attr_ok) = (0, 0);
    for _ in 0..100 {
        let (c, a) = trial(&mut seeded)?;
        class_ok += usize::from(c);
        attr_ok += usize::from(a);
    }
    // the same rate on a larger independent sample, for context only
    let mut wide_rng = rng(4400);
    let mut wide = 0;
    for _ in 0..1000 {
        wide += usize::from(trial(&mut wide_rng)?.1);
    }
    let detail = format!(
        "classes {class_ok}/100, top attribute {attr_ok}/100 (rate over 1000 further detections {:.1}%)",
        wide as f64 / 10.0
    );
    check!(class_ok == 100, "{detail}");
    check!(attr_ok >= 95, "{detail}");
    Ok(detail)
}

fn grid_box<R: Rng>(rng: &mut R) -> BoundingBox {
    let x1 = rng.gen_range(0..8) as f64;
    let y1 = rng.gen_range(0..8) as f64;
    let x2 = x1 + rng.gen_range(1..=4) as f64;
    let y2 = y1 + rng.gen_range(1..=4) as f64;
    BoundingBox::new(x1, y1, x2, y2).unwrap()
}

/// Greedy matching simulated one claim at a time.
fn oracle_match(preds: &[(BoundingBox, f64)], gts: &[BoundingBox], thr: f64) -> Vec<(usize, usize)> {
    let mut pending: Vec<usize> = (0..preds.len()).collect();
    let mut claimed = vec![false; gts.len()];
    let mut pairs = Vec::new();
    while !pending.is_empty() {
        let mut pos = 0;
        for k in 1..pending.len() {
            let (a, b) = (pending[k], pending[pos]);
            if preds[a].1 > preds[b].1 || (preds[a].1 == preds[b].1 && a < b) {
                pos = k;
            }
        }
        let p = pending.remove(pos);
        let mut best: Option<(usize, f64)> = None;
        for g in 0..gts.len() {
            let v = ref_iou(preds[p].0.to_array(), gts[g].to_array());
            if !claimed[g] && v >= thr && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            claimed[g] = true;
            pairs.push((p, g));
        }
    }
    pairs
}

fn det_with_confidence(bbox: BoundingBox, confidence: f64) -> Detection {
    Detection::new(bbox, vec![confidence], vec![0.0]).unwrap()
}

fn eval_image(id: usize, preds: &[(BoundingBox, f64)], gts: &[BoundingBox]) -> EvalImage {
    EvalImage {
        image_id: id.to_string(),
        preds: preds.iter().map(|&(b, c)| det_with_confidence(b, c)).collect(),
        gts: gts
            .iter()
            .map(|&b| GroundTruthObject {
                bbox: b,
                class_index: 0,
                attribute_indices: BTreeSet::new(),
            })
            .collect(),
    }
}

fn ap_101(images: &[Instance], thr: f64) -> f64 {
    let num_gts: usize = images.iter().map(|(_, g)| g.len()).sum();
    let mut flagged: Vec<(f64, bool)> = Vec::new();
    for (preds, gts) in images {
        let tps: BTreeSet<usize> = oracle_match(preds, gts, thr).into_iter().map(|p| p.0).collect();
        flagged.extend(preds.iter().enumerate().map(|(i, p)| (p.1, tps.contains(&i))));
    }
    flagged.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut curve = Vec::new();
    let mut tp = 0;
    for (i, &(_, t)) in flagged.iter().enumerate() {
        tp += usize::from(t);
        curve.push((tp as f64 / num_gts as f64, tp as f64 / (i + 1) as f64));
    }
    (0..=100)
        .map(|t| {
            let r = t as f64 / 100.0;
            curve
                .iter()
                .filter(|(rec, _)| *rec >= r)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 101.0
}

fn metric_oracles() -> Outcome {
    let mut rng = rng(55);
    for case in 0..200 {
        let preds: Vec<(BoundingBox, f64)> = (0..rng.gen_range(0..=5))
            .map(|_| (grid_box(&mut rng), rng.gen_range(1..=5) as f64 / 10.0))
            .collect();
        let gts: Vec<BoundingBox> = (0..rng.gen_range(0..=5)).map(|_| grid_box(&mut rng)).collect();
        let thr = [0.1, 0.3, 0.5, 0.7][rng.gen_range(0..4)];
        let m = match_detections(&preds, &gts, thr).map_err(|e| e.to_string())?;
        let expected = oracle_match(&preds, &gts, thr);
        check!(
            m.pairs == expected,
            "instance {case}: {:?} != oracle {:?}",
            m.pairs,
            expected
        );
        let unmatched: Vec<usize> = (0..preds.len())
            .filter(|p| !expected.iter().any(|e| e.0 == *p))
            .collect();
        check!(m.unmatched_preds == unmatched, "instance {case}: unmatched predictions");
    }

    let b = |x: f64| BoundingBox::new(x, 0.0, x + 10.0, 10.0).unwrap();
    let fixtures = [
        (eval_image(0, &[(b(0.0), 0.9), (b(20.0), 0.8)], &[b(0.0), b(20.0)]), 1.0),
        (eval_image(0, &[(b(50.0), 0.9), (b(0.0), 0.8)], &[b(0.0)]), 0.5),
        (eval_image(0, &[], &[b(0.0)]), 0.0),
    ];
    for (i, (image, want)) in fixtures.iter().enumerate() {
        let ap = average_precision(std::slice::from_ref(image), 0.5).map_err(|e| e.to_string())?;
        check!((ap - want).abs() <= 1e-9, "fixture {i}: AP {ap} != {want}");
    }

    let mut worst: f64 = 0.0;
    for case in 0..50 {
        let mut raw = Vec::new();
        for _ in 0..rng.gen_range(1..=4) {
            let preds: Vec<(BoundingBox, f64)> = (0..rng.gen_range(0..=5))
                .map(|_| (grid_box(&mut rng), rng.gen_range(0.01..1.0)))
                .collect();
            let gts: Vec<BoundingBox> = (0..rng.gen_range(0..=5)).map(|_| grid_box(&mut rng)).collect();
            raw.push((preds, gts));
        }
        if raw.iter().all(|(_, g)| g.is_empty()) {
            raw[0].1.push(grid_box(&mut rng));
        }
        let images: Vec<EvalImage> = raw.iter().enumerate().map(|(i, (p, g))| eval_image(i, p, g)).collect();
        let ap = average_precision(&images, 0.5).map_err(|e| e.to_string())?;
        let oracle = ap_101(&raw, 0.5);
        worst = worst.max((ap - oracle).abs());
        check!(
            (ap - oracle).abs() <= 0.01 + 1e-12,
            "instance {case}: AP {ap} vs 101-point {oracle}"
        );
    }
    Ok(format!(
        "200 matchings exact, fixtures 1.0/0.5/0.0, 101-point gap at most {worst:.4}"
    ))
}

fn reference_nms(boxes: &[[f64; 4]], scores: &[f64], thr: f64) -> Vec<usize> {
    let mut alive = vec![true; boxes.len()];
    let mut kept = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..boxes.len() {
            if alive[i] && best.is_none_or(|b| scores[i] > scores[b]) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        kept.push(b);
        alive[b] = false;
        for j in 0..boxes.len() {
            if alive[j] && ref_iou(boxes[b], boxes[j]) > thr {
                alive[j] = false;
            }
        }
    }
    kept
}

fn nms_equivalence() -> Outcome {
    let mut rng = rng(66);
    let mut kept_total = 0;
    for scene in 0..500 {
        let n = rng.gen_range(0..=200);
        // clustered boxes so that suppression actually happens
        let centers: Vec<(f64, f64)> = (0..rng.gen_range(1..=8))
            .map(|_| (rng.gen_range(50.0..950.0), rng.gen_range(50.0..950.0)))
            .collect();
        let quantized = scene % 2 == 0;
        let dets: Vec<(BoundingBox, f64)> = (0..n)
            .map(|_| {
                let (cx, cy) = centers[rng.gen_range(0..centers.len())];
                let (x, y) = (cx + rng.gen_range(-30.0..30.0), cy + rng.gen_range(-30.0..30.0));
                let (hw, hh) = (rng.gen_range(5.0..60.0), rng.gen_range(5.0..60.0));
                let s: f64 = rng.gen();
                let s = if quantized { (s * 10.0).floor() / 10.0 } else { s };
                (BoundingBox::new(x - hw, y - hh, x + hw, y + hh).unwrap(), s)
            })
            .collect();
        let thr = rng.gen_range(0.1..0.9);
        let got = nms(&dets, thr).map_err(|e| e.to_string())?;
        let boxes: Vec<[f64; 4]> = dets.iter().map(|d| d.0.to_array()).collect();
        let scores: Vec<f64> = dets.iter().map(|d| d.1).collect();
        let want = reference_nms(&boxes, &scores, thr);
        check!(
            got == want,
            "scene {scene}: {} kept vs reference {}",
            got.len(),
            want.len()
        );
        kept_total += got.len();
    }
    Ok(format!("500 scenes identical ({kept_total} boxes kept)"))
}

fn invariance() -> Outcome {
    let (vocab, table) = full_vocab(7);
    let layout = SymbolicLayout::new(5, 300).unwrap();
    let mut rng = rng(77);
    let env = BoundingBox::new(0.0, 0.0, 400.0, 300.0).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..200 {
        let bbox = random_box(&mut rng, 400.0, 300.0);
        let classes: Vec<f64> = (0..1600).map(|_| rng.gen_range(0.0..1.0)).collect();
        let attrs: Vec<f64> = (0..400).map(|_| rng.gen_range(0.0..0.1)).collect();
        let base = Detection::new(bbox, classes.clone(), attrs.clone()).unwrap();

        let p: f64 = rng.gen_range(0.3..3.0);
        let a: f64 = rng.gen_range(0.5..5.0);
        let transformed: Vec<f64> = match i % 3 {
            0 => classes.iter().map(|s| s.powf(p)).collect(),
            1 => classes
                .iter()
                .map(|s| ((a * s).exp() - 1.0) / (a.exp() - 1.0))
                .collect(),
            _ => classes.iter().map(|s| 0.25 + 0.5 * s).collect(),
        };
        let c: f64 = rng.gen_range(1e-3..=10.0);
        let scaled: Vec<f64> = attrs.iter().map(|s| s * c).collect();
        let other = Detection::new(bbox, transformed, scaled).unwrap();

        let e1 = encode_symbolic(&base, &env, 400.0, 300.0, &vocab, &table, &layout, true).unwrap();
        let e2 = encode_symbolic(&other, &env, 400.0, 300.0, &vocab, &table, &layout, true).unwrap();
        check!(
            bits_equal(&e1.vector[layout.class_block()], &e2.vector[layout.class_block()]),
            "detection {i}: class block changed under a monotone transform"
        );
        let diff = e1.vector[layout.attribute_block()]
            .iter()
            .zip(&e2.vector[layout.attribute_block()])
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        worst = worst.max(diff);
        check!(
            diff <= 1e-12,
            "detection {i}: attribute block moved by {diff:e} under scaling by {c}"
        );
    }
    Ok(format!(
        "200 detections, class blocks identical, attribute drift at most {worst:.1e}"
    ))
}

fn random_encoding<R: Rng>(rng: &mut R) -> SceneEncoding {
    let tier = [PrivacyTier::NotPrivate, PrivacyTier::AtRisk, PrivacyTier::Private][rng.gen_range(0..3)];
    let id_len = rng.gen_range(0..12);
    let scene_id: String = (0..id_len)
        .map(|_| ['a', 'z', '7', '-', 'é', '場'][rng.gen_range(0..6)])
        .collect();
    let objects = (0..rng.gen_range(0..5))
        .map(|_| (0..ENCODING_DIM).map(|_| rng.gen_range(-4.0f32..4.0) as f64).collect())
        .collect();
    let captions = rng.gen_bool(0.5).then(|| {
        (0..rng.gen_range(0..3))
            .map(|i| format!("caption {i} ünïcode"))
            .collect()
    });
    SceneEncoding {
        scene_id,
        tier,
        objects,
        captions,
    }
}

fn wire_soundness() -> Outcome {
    let mut rng = rng(88);
    let mut seeds = Vec::new();
    for i in 0..100 {
        let enc = random_encoding(&mut rng);
        let bytes = encode_frame(&enc).map_err(|e| e.to_string())?;
        let back = decode_frame(&bytes).map_err(|e| format!("encoding {i}: {e}"))?;
        check!(back == enc, "encoding {i}: decoded value differs");
        check!(
            encode_frame(&back).unwrap() == bytes,
            "encoding {i}: re-encoded bytes differ"
        );
        seeds.push(bytes);
    }

    let (mut ok, mut err) = (0, 0);
    for i in 0..10_000 {
        let mut bytes = seeds[i % seeds.len()].clone();
        match rng.gen_range(0..5) {
            0 => {
                for _ in 0..rng.gen_range(1..8) {
                    let at = rng.gen_range(0..bytes.len());
                    bytes[at] = rng.gen();
                }
            }
            1 => bytes.truncate(rng.gen_range(0..bytes.len())),
            2 => bytes = (0..rng.gen_range(0..64)).map(|_| rng.gen()).collect(),
            3 => {
                // corrupt a header count field
                let at = rng.gen_range(4..bytes.len().min(40));
                let end = (at + 4).min(bytes.len());
                bytes[at..end].fill(0xff);
            }
            _ => bytes.extend((0..rng.gen_range(1..16)).map(|_| rng.gen::<u8>())),
        }
        match panic::catch_unwind(|| decode_frame(&bytes)) {
            Err(_) => return Err(format!("fuzz iteration {i}: decoder panicked")),
            Ok(Ok(enc)) => {
                ok += 1;
                check!(
                    encode_frame(&enc).ok().as_ref() == Some(&bytes),
                    "fuzz iteration {i}: accepted non-canonical frame"
                );
            }
            Ok(Err(_)) => err += 1,
        }
    }

    let sink = Arc::new(MemorySink::new());
    let policy = ServerPolicy::new(PrivacyTier::Private, 100, 1 << 20).unwrap();
    let server = Server::bind("127.0.0.1:0", policy, sink.clone())
        .map_err(|e| e.to_string())?
        .spawn()
        .map_err(|e| e.to_string())?;
    let addr = server.addr();
    let clients: Vec<_> = (0..4u64)
        .map(|c| {
            thread::spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(800 + c);
                let encs: Vec<SceneEncoding> = (0..8)
                    .map(|f| {
                        let mut e = random_encoding(&mut rng);
                        e.tier = if f % 2 == 0 {
                            PrivacyTier::AtRisk
                        } else {
                            PrivacyTier::Private
                        };
                        e.scene_id = format!("client{c}-frame{f}");
                        e
                    })
                    .collect();
                let frames: Vec<Vec<u8>> = encs.iter().map(|e| encode_frame(e).unwrap()).collect();
                (encs, edge::send_frames(addr, &frames))
            })
        })
        .collect();
    let (mut accepted, mut rejected) = (0, 0);
    for client in clients {
        let (encs, replies) = client.join().map_err(|_| "client thread panicked".to_string())?;
        let replies = replies.map_err(|e| e.to_string())?;
        for (e, r) in encs.iter().zip(&replies) {
            match e.tier {
                PrivacyTier::Private => {
                    check!(
                        r.status == Status::Accepted && r.echoed_objects == Some(e.num_objects() as u32),
                        "PRIVATE frame {} got {:?}",
                        e.scene_id,
                        r
                    );
                    accepted += 1;
                }
                _ => {
                    check!(
                        r.status == Status::TierRejected,
                        "AT_RISK frame {} got {:?}",
                        e.scene_id,
                        r
                    );
                    rejected += 1;
                }
            }
        }
    }
    server.shutdown().map_err(|e| e.to_string())?;
    let received = sink.received();
    check!(received.len() == 16, "sink holds {} frames", received.len());
    check!(
        received.iter().all(|e| e.tier == PrivacyTier::Private),
        "sink holds a non-private frame"
    );
    Ok(format!(
        "100 round trips exact; fuzz {ok} ok / {err} typed errors, no panics; server accepted {accepted}/16 private, rejected {rejected}/16 at-risk"
    ))
}

struct KillOnDrop(Child);

impl Drop for KillOnDrop {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn run_cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_symscene"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn end_to_end_cli() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let conf = fixture("fixture.conf");
    let (classes, attributes, embeddings, scenes) = (
        fixture("classes.txt"),
        fixture("attributes.txt"),
        fixture("embeddings.txt"),
        fixture("scenes.jsonl"),
    );
    let encoded = dir.path().join("scenes.symv");
    let record = dir.path().join("record");
    let common = ["--config", path_str(&conf)];
    let vocab_args = [
        "--classes",
        path_str(&classes),
        "--attributes",
        path_str(&attributes),
        "--embeddings",
        path_str(&embeddings),
    ];

    let mut args = vec!["encode", "--scenes", path_str(&scenes), "--output", path_str(&encoded)];
    args.extend(common);
    args.extend(vocab_args);
    run_cli(&args)?;

    let mut serve = KillOnDrop(
        Command::new(env!("CARGO_BIN_EXE_symscene"))
            .args(common)
            .args(["serve", "--bind", "127.0.0.1:0", "--record", path_str(&record)])
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| e.to_string())?,
    );
    let mut line = String::new();
    BufReader::new(serve.0.stdout.take().unwrap())
        .read_line(&mut line)
        .map_err(|e| e.to_string())?;
    let addr = line
        .trim()
        .strip_prefix("listening on ")
        .ok_or_else(|| format!("unexpected serve output {line:?}"))?
        .to_string();

    let sent = run_cli(&["send", "--addr", &addr, "--input", path_str(&encoded)])?;
    let statuses: Vec<serde_json::Value> = sent.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    check!(
        statuses.len() == 3 && statuses.iter().all(|s| s["status"] == "accepted"),
        "send reported {sent}"
    );
    drop(serve);

    let mut recorded: Vec<String> = std::fs::read_dir(&record)
        .map_err(|e| e.to_string())?
        .map(|e| e.unwrap().path().to_string_lossy().into_owned())
        .filter(|p| p.ends_with(".symv"))
        .collect();
    recorded.sort();
    check!(recorded.len() == 3, "{} recorded frames", recorded.len());

    let mut args = vec!["invert", "--input"];
    args.extend(recorded.iter().map(String::as_str));
    args.extend(common);
    args.extend(vocab_args);
    let inverted: Vec<serde_json::Value> = run_cli(&args)?
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();

    // expected names straight from the fixture: objects in confidence order, top-5 class scores
    let names: Vec<String> = std::fs::read_to_string(&classes)
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect();
    let mut expected = Vec::new();
    for line in std::fs::read_to_string(&scenes).unwrap().lines() {
        let scene: serde_json::Value = serde_json::from_str(line).unwrap();
        let mut dets: Vec<Vec<f64>> = scene["detections"]
            .as_array()
            .unwrap()
            .iter()
            .map(|d| {
                d["class_scores"]
                    .as_array()
                    .unwrap()
                    .iter()
                    .map(|v| v.as_f64().unwrap())
                    .collect()
            })
            .collect();
        dets.sort_by(|a, b| {
            let m = |v: &Vec<f64>| v.iter().cloned().fold(0.0, f64::max);
            m(b).partial_cmp(&m(a)).unwrap()
        });
        for scores in dets {
            let top: Vec<String> = ranked(&scores, 5).into_iter().map(|c| names[c].clone()).collect();
            expected.push((scene["image_id"].as_str().unwrap().to_string(), top));
        }
    }
    check!(
        inverted.len() == expected.len(),
        "{} inverted objects, expected {}",
        inverted.len(),
        expected.len()
    );
    for (got, (scene, top)) in inverted.iter().zip(&expected) {
        let classes: Vec<String> = serde_json::from_value(got["classes"].clone()).unwrap();
        check!(
            got["scene_id"] == scene.as_str() && &classes == top,
            "{scene}: {classes:?} != {top:?}"
        );
    }
    Ok(format!(
        "{} objects over 3 scenes recovered their top-5 class names",
        expected.len()
    ))
}
