//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.
//!
//! `cargo test -p celldet-core --test acceptance -- 6 7` runs a subset.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use celldet_core::assignment::{build_cost_matrix, compute_loss, hungarian_match, softmax_rows};
use celldet_core::data::{generate_synthetic, image_to_tensor, write_mfov_dataset};
use celldet_core::geometry::{bilinear_sample, bilinear_sample_with_grad, image_to_feature_coords, mfov_crop_limits};
use celldet_core::metrics::{average_precision, match_for_eval};
use celldet_core::model::{BackboneConfig, HeadConfig, UpsampleKind};
use celldet_core::training::{evaluate, evaluate_loss, loss_and_gradients, train};
use celldet_core::*;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn rel_close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()) || (a - b).abs() < 1e-12
}

fn small_model(levels: Vec<u32>, k: usize) -> ModelConfig {
    let n = *levels.last().unwrap() as usize - 1;
    ModelConfig {
        backbone: BackboneConfig {
            stage_channels: (0..n).map(|t| 4 + 2 * t).collect(),
            pyramid_channels: 6,
            levels,
        },
        head: HeadConfig {
            hidden_dim: 8,
            dropout_rate: 0.1,
            num_classes: 3,
        },
        mfov_k: k,
        ..Default::default()
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn synth_samples(spec: &SynthSpec, n: usize, k: usize) -> Vec<Sample> {
    generate_synthetic(spec, n, k)
        .unwrap()
        .into_iter()
        .enumerate()
        .map(|(i, s)| Sample {
            name: format!("s{i}"),
            views: s.images.iter().map(image_to_tensor).collect(),
            cells: s.cells,
        })
        .collect()
}

fn brute_force(rows: usize, cols: usize, cost: &[f64]) -> f64 {
    fn go(r: usize, rows: usize, cols: usize, cost: &[f64], used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if r == rows {
            *best = best.min(acc);
            return;
        }
        for c in 0..cols {
            if !used[c] {
                used[c] = true;
                go(r + 1, rows, cols, cost, used, acc + cost[r * cols + c], best);
                used[c] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(0, rows, cols, cost, &mut vec![false; cols], 0.0, &mut best);
    best
}

fn matcher_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for trial in 0..1000 {
        let m = rng.random_range(1..=7);
        let n = rng.random_range(0..=m);
        let points: Vec<Point> = (0..m)
            .map(|_| Point::new(rng.random_range(0.0..64.0), rng.random_range(0.0..64.0)))
            .collect();
        let logits = random_tensor(&mut rng, &[m, 4]);
        let gts: Vec<Cell> = (0..n)
            .map(|_| Cell {
                x: rng.random_range(0.0..64.0),
                y: rng.random_range(0.0..64.0),
                class: rng.random_range(0..3),
            })
            .collect();
        // every few trials use small integer costs so ties are common
        let cost = if trial % 4 == 0 {
            CostMatrix::from_values(n, m, (0..n * m).map(|_| rng.random_range(0..3) as f64).collect())
        } else {
            build_cost_matrix(&points, &softmax_rows(&logits), &gts, 0.05).unwrap()
        };
        let a = hungarian_match(&cost).unwrap();
        let got = a.total_cost(&cost);
        let want = if n == 0 { 0.0 } else { brute_force(n, m, &cost.values) };
        if a.matched.len() != n || got != want {
            return outcome(false, format!("trial {trial}: {n}x{m} hungarian {got} vs brute force {want}"));
        }
        worst = worst.max((got - want).abs());
    }
    outcome(true, format!("1000 matrices, max |diff| {worst:e}"))
}

fn explicit_bilinear(level: &PyramidLevel, p: Point) -> Vec<f64> {
    let (c, h, w) = level.data.dims3();
    let (u, v) = image_to_feature_coords(p, level.stride());
    let (u, v) = (u.clamp(0.0, (w - 1) as f64), v.clamp(0.0, (h - 1) as f64));
    let mut out = vec![0.0; c];
    for qy in 0..h {
        for qx in 0..w {
            let g = (1.0 - (u - qx as f64).abs()).max(0.0) * (1.0 - (v - qy as f64).abs()).max(0.0);
            if g > 0.0 {
                for (ch, o) in out.iter_mut().enumerate() {
                    *o += g * level.data.get3(ch, qy, qx);
                }
            }
        }
    }
    out
}

fn random_level(rng: &mut ChaCha8Rng) -> PyramidLevel {
    let j = rng.random_range(2..=5u32);
    let (c, h, w) = (rng.random_range(1..6), rng.random_range(2..9), rng.random_range(2..9));
    PyramidLevel::new(j, random_tensor(rng, &[c, h, w]))
}

fn bilinear_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for i in 0..10_000 {
        let level = random_level(&mut rng);
        let s = level.stride();
        let (h, w) = (level.height() as f64 * s, level.width() as f64 * s);
        let p = Point::new(rng.random_range(0.0..w), rng.random_range(0.0..h));
        let got = bilinear_sample(&level, p);
        let want = explicit_bilinear(&level, p);
        for (a, b) in got.iter().zip(&want) {
            let rel = (a - b).abs() / b.abs().max(1e-9);
            worst = worst.max(rel);
            if rel > 1e-6 {
                return outcome(false, format!("pair {i}: {a} vs {b} at {p:?}"));
            }
        }
        // integral feature coordinates hit a grid value exactly
        let (qx, qy) = (rng.random_range(0..level.width()), rng.random_range(0..level.height()));
        let q = Point::new((qx as f64 + 0.5) * s - 0.5, (qy as f64 + 0.5) * s - 0.5);
        let got = bilinear_sample(&level, q);
        for (ch, v) in got.iter().enumerate() {
            if *v != level.data.get3(ch, qy, qx) {
                return outcome(false, format!("pair {i}: not exact at integral point {q:?}"));
            }
        }
    }
    outcome(true, format!("10000 pairs, max rel err {worst:.1e}, integral points exact"))
}

fn near_integer(x: f64) -> bool {
    (x - x.round()).abs() < 1e-3
}

fn gradient_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut track = |a: f64, n: f64| {
        if a != n {
            worst = worst.max((a - n).abs() / a.abs().max(n.abs()));
        }
        rel_close(a, n, 1e-3)
    };

    // (a) bilinear sampling with respect to the point
    let mut checked_a = 0;
    while checked_a < 200 {
        let level = random_level(&mut rng);
        let s = level.stride();
        let p = Point::new(
            rng.random_range(0.0..level.width() as f64 * s),
            rng.random_range(0.0..level.height() as f64 * s),
        );
        let (u, v) = image_to_feature_coords(p, s);
        if near_integer(u) || near_integer(v) || u <= 0.0 || v <= 0.0 {
            continue;
        }
        if u >= (level.width() - 1) as f64 || v >= (level.height() - 1) as f64 {
            continue;
        }
        let (_, grads) = bilinear_sample_with_grad(&level, p);
        for (axis, d) in [(0, Point::new(h, 0.0)), (1, Point::new(0.0, h))] {
            let plus = bilinear_sample(&level, p + d);
            let minus = bilinear_sample(&level, Point::new(p.x - d.x, p.y - d.y));
            for ch in 0..grads.len() {
                let fd = (plus[ch] - minus[ch]) / (2.0 * h);
                if !track(grads[ch][axis], fd) {
                    return outcome(false, format!("(a) d/d{axis} channel {ch}: {} vs {fd}", grads[ch][axis]));
                }
            }
        }
        checked_a += 1;
    }

    // (b) loss with respect to logits and points
    let cfg = LossConfig::default();
    for trial in 0..20 {
        let m = 12;
        let points: Vec<Point> = (0..m)
            .map(|_| Point::new(rng.random_range(0.0..32.0), rng.random_range(0.0..32.0)))
            .collect();
        let logits = random_tensor(&mut rng, &[m, 4]);
        let gts: Vec<Cell> = (0..3)
            .map(|_| Cell {
                x: rng.random_range(0.0..32.0),
                y: rng.random_range(0.0..32.0),
                class: rng.random_range(0..3),
            })
            .collect();
        let a = hungarian_match(&build_cost_matrix(&points, &softmax_rows(&logits), &gts, cfg.tau).unwrap()).unwrap();
        let lg = compute_loss(&points, &logits, &gts, &a, &cfg).unwrap();
        let total = |pts: &[Point], lo: &Tensor| compute_loss(pts, lo, &gts, &a, &cfg).unwrap().breakdown.total;
        for k in 0..logits.len() {
            let (mut lp, mut lm) = (logits.clone(), logits.clone());
            lp.data_mut()[k] += h;
            lm.data_mut()[k] -= h;
            let fd = (total(&points, &lp) - total(&points, &lm)) / (2.0 * h);
            if !track(lg.d_logits.data()[k], fd) {
                return outcome(false, format!("(b) trial {trial} logit {k}: {} vs {fd}", lg.d_logits.data()[k]));
            }
        }
        for k in 0..2 * m {
            let (mut pp, mut pm) = (points.clone(), points.clone());
            let bump = |p: &mut Point, d: f64| if k % 2 == 0 { p.x += d } else { p.y += d };
            bump(&mut pp[k / 2], h);
            bump(&mut pm[k / 2], -h);
            let fd = (total(&pp, &logits) - total(&pm, &logits)) / (2.0 * h);
            if !track(lg.d_points.data()[k], fd) {
                return outcome(false, format!("(b) trial {trial} point {k}: {} vs {fd}", lg.d_points.data()[k]));
            }
        }
    }

    // (c) total loss with respect to sampled parameters, matching held fixed
    let mut model = Model::new(small_model(vec![2, 3, 4], 1), 5).unwrap();
    for (name, t) in model.params_mut().iter_mut() {
        if name.contains("fc2") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
        }
    }
    let input = ModelInput::single(random_tensor(&mut rng, &[3, 32, 32]));
    let gts = vec![
        Cell { x: 5.0, y: 7.0, class: 0 },
        Cell { x: 20.0, y: 12.0, class: 1 },
        Cell { x: 14.0, y: 26.0, class: 2 },
    ];
    let lcfg = LossConfig {
        lambda_loc: 1e-2,
        ..Default::default()
    };
    let sg = loss_and_gradients::<ChaCha8Rng>(&model, &input, &gts, &lcfg, None, None).unwrap();
    let fixed = sg.assignment.clone();
    let names: Vec<String> = sg.grads.keys().cloned().collect();
    let step = (names.len() / 24).max(1);
    let mut checked = Vec::new();
    for name in names.iter().step_by(step) {
        let g = &sg.grads[name];
        let Some(k) = (0..g.len()).find(|&k| g.data()[k].abs() > 1e-8) else {
            continue;
        };
        let loss_at = |delta: f64| {
            let mut m = model.clone();
            m.params_mut().get_mut(name).unwrap().data_mut()[k] += delta;
            evaluate_loss(&m, &input, &gts, &lcfg, Some(&fixed)).unwrap().1.total
        };
        let fd = (loss_at(h) - loss_at(-h)) / (2.0 * h);
        if !track(g.data()[k], fd) {
            return outcome(false, format!("(c) {name}[{k}]: {} vs {fd}", g.data()[k]));
        }
        checked.push(name.clone());
    }
    if checked.len() < 20 {
        return outcome(false, format!("(c) only {} parameters had a nonzero gradient", checked.len()));
    }
    let backbone = checked.iter().filter(|n| n.starts_with("backbone")).count();
    outcome(
        true,
        format!(
            "(a) 200 points (b) 20 losses (c) {} parameters ({backbone} in the backbone), max rel err {worst:.1e}",
            checked.len()
        ),
    )
}

fn mfov_geometry() -> Outcome {
    for (k_total, k, lo, hi) in [(2, 1, 0.25, 0.75), (3, 2, 0.25, 0.75), (3, 1, 0.375, 0.625), (4, 2, 0.375, 0.625)] {
        let c = mfov_crop_limits(k_total, k).unwrap();
        if (c.lo, c.hi) != (lo, hi) {
            return outcome(false, format!("K={k_total} k={k}: [{}, {})", c.lo, c.hi));
        }
    }
    for k_total in 2..=4u32 {
        for k in 1..k_total {
            let c = mfov_crop_limits(k_total, k).unwrap();
            let half = 0.5 / f64::from(1u32 << (k_total - k));
            if (c.lo, c.hi) != (0.5 - half, 0.5 + half) || c.upsample_factor != 1 << (k_total - k) {
                return outcome(false, format!("K={k_total} k={k}: {c:?}"));
            }
        }
        for up in [UpsampleKind::TransposedConv, UpsampleKind::Bilinear] {
            let cfg = ModelConfig {
                mfov_upsample: up,
                ..small_model(vec![2, 3, 4], k_total as usize)
            };
            let model = Model::new(cfg, 0).unwrap();
            let size = model.config().required_divisor();
            let mut rng = ChaCha8Rng::seed_from_u64(k_total as u64);
            let views: Vec<Tensor> = (0..k_total).map(|_| random_tensor(&mut rng, &[3, size, size])).collect();
            let fused = model.pyramid(&ModelInput { views: views.clone() }).unwrap();
            let own = model.view_pyramid(views.last().unwrap()).unwrap();
            for (a, b) in fused.iter().zip(&own) {
                if a.data.shape() != b.data.shape() || a.level != b.level {
                    return outcome(false, format!("K={k_total}: {:?} vs {:?}", a.data.shape(), b.data.shape()));
                }
            }
        }
    }
    outcome(true, "crop limits exact for K=2..4, fused shapes equal innermost shapes")
}

fn identity_at_init() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for mode in [RefineMode::Dpa, RefineMode::Iterative] {
        let cfg = ModelConfig {
            mode,
            ..small_model(vec![2, 3, 4, 5], 1)
        };
        let model = Model::new(cfg, 6).unwrap();
        let x = ModelInput::single(random_tensor(&mut rng, &[3, 64, 96]));
        let out = model.infer(&x).unwrap();
        let grid = model.proposals(64, 96).unwrap().initial;
        if out.final_points != grid || out.proposals.deformed.as_ref() != Some(&grid) {
            return outcome(false, format!("{mode}: final points moved at initialization"));
        }
    }
    let mut model = Model::new(small_model(vec![2, 3, 4], 1), 7).unwrap();
    for (name, t) in model.params_mut().iter_mut() {
        if name.contains("fc2") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
        }
    }
    let image = random_tensor(&mut rng, &[3, 32, 48]);
    let via_fusion = model.pyramid(&ModelInput::single(image.clone())).unwrap();
    let plain = model.view_pyramid(&image).unwrap();
    let diff = via_fusion
        .iter()
        .zip(&plain)
        .map(|(a, b)| a.data.max_abs_diff(&b.data))
        .fold(0.0, f64::max);
    if diff != 0.0 {
        return outcome(false, format!("K=1 fused pyramid differs by {diff}"));
    }
    outcome(true, "grid returned exactly in both modes, K=1 fusion max abs diff 0")
}

fn overfit() -> Outcome {
    let spec = SynthSpec {
        canvas_size: 64,
        seed: 11,
        ..Default::default()
    };
    let samples = synth_samples(&spec, 8, 1);
    let mcfg = ModelConfig {
        backbone: BackboneConfig {
            stage_channels: vec![8, 16, 16, 16],
            pyramid_channels: 16,
            levels: vec![2, 3, 4, 5],
        },
        head: HeadConfig {
            hidden_dim: 64,
            dropout_rate: 0.1,
            num_classes: 3,
        },
        interval: 16.0,
        ..Default::default()
    };
    let tcfg = TrainConfig {
        learning_rate: 1e-3,
        max_steps: 2000,
        batch_size: 8,
        augment: false,
        eval_every: 0,
        loss: LossConfig {
            lambda_loc: 2e-3,
            ..Default::default()
        },
        ..Default::default()
    };
    let ecfg = EvalConfig {
        match_radius: 6.0,
        num_classes: 3,
        confidence_threshold: 0.5,
    };
    let out = train(Model::new(mcfg, 0).unwrap(), &samples, &[], &tcfg, &ecfg, None, |_| {}).unwrap();
    let report = evaluate(&out.model, &samples, &ecfg).unwrap();
    let (mut deformed, mut initial, mut n) = (0.0, 0.0, 0);
    for s in &samples {
        let input = ModelInput { views: s.views.clone() };
        let o = out.model.infer(&input).unwrap();
        let (a, _) = evaluate_loss(&out.model, &input, &s.cells, &tcfg.loss, None).unwrap();
        let def = o.proposals.deformed.as_ref().unwrap();
        for &(j, i) in &a.matched {
            let g = s.cells[j].point();
            deformed += def[i].dist(&g);
            initial += o.proposals.initial[i].dist(&g);
            n += 1;
        }
    }
    let ratio = deformed / initial;
    let first = out.steps[0].loss.loc_loss;
    let at_200 = out.steps[199].loss.loc_loss;
    outcome(
        report.macro_f1 >= 0.90 && ratio <= 0.5 && at_200 * 10.0 <= first,
        format!(
            "macro F1 {:.4} (>= 0.90), deformed/initial distance {ratio:.3} (<= 0.5) over {n} positives \
             ({:.2} px vs {:.2} px), loc loss {first:.1} -> {at_200:.2} after 200 steps (>= 10x)",
            report.macro_f1,
            deformed / n as f64,
            initial / n as f64
        ),
    )
}

fn mfov_benefit() -> Outcome {
    let spec = |seed| SynthSpec {
        canvas_size: 64,
        context_classes: true,
        seed,
        ..Default::default()
    };
    let train2 = synth_samples(&spec(21), 24, 2);
    let val2 = synth_samples(&spec(22), 16, 2);
    let inner = |s: &[Sample]| s.iter().map(|x| x.innermost(1).unwrap()).collect::<Vec<_>>();
    let (train1, val1) = (inner(&train2), inner(&val2));
    let ecfg = EvalConfig {
        match_radius: 6.0,
        num_classes: 3,
        confidence_threshold: 0.5,
    };
    let tcfg = TrainConfig {
        learning_rate: 1e-3,
        max_steps: 800,
        batch_size: 8,
        augment: false,
        eval_every: 0,
        loss: LossConfig {
            lambda_loc: 2e-3,
            ..Default::default()
        },
        ..Default::default()
    };
    let mut f1 = [0.0; 2];
    for (slot, (k, tr, va)) in [(1, &train1, &val1), (2, &train2, &val2)].into_iter().enumerate() {
        let mcfg = ModelConfig {
            backbone: BackboneConfig {
                stage_channels: vec![8, 16, 16],
                pyramid_channels: 16,
                levels: vec![2, 3, 4],
            },
            head: HeadConfig {
                hidden_dim: 32,
                dropout_rate: 0.1,
                num_classes: 3,
            },
            mfov_k: k,
            ..Default::default()
        };
        let out = train(Model::new(mcfg, 0).unwrap(), tr, &[], &tcfg, &ecfg, None, |_| {}).unwrap();
        f1[slot] = evaluate(&out.model, va, &ecfg).unwrap().macro_f1;
    }
    let gain = 100.0 * (f1[1] - f1[0]);
    outcome(
        gain >= 5.0,
        format!("validation macro F1 K=1 {:.4}, K=2 {:.4}, gain {gain:.1} points (>= 5)", f1[0], f1[1]),
    )
}

fn iterative_structure() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = ModelInput::single(random_tensor(&mut rng, &[3, 64, 64]));
    let gts = vec![
        Cell { x: 10.0, y: 10.0, class: 0 },
        Cell { x: 40.0, y: 20.0, class: 1 },
        Cell { x: 30.0, y: 50.0, class: 2 },
    ];
    let cfg = LossConfig::default();
    let mut counts = Vec::new();
    for (mode, stages) in [(RefineMode::Dpa, 1), (RefineMode::Iterative, 2)] {
        let mcfg = ModelConfig {
            mode,
            refine_stages: stages,
            ..small_model(vec![2, 3, 4], 1)
        };
        let mut model = Model::new(mcfg, 3).unwrap();
        for (name, t) in model.params_mut().iter_mut() {
            if name.contains(".cls") || name.contains("cls.") {
                t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
            }
        }
        let sg = loss_and_gradients::<ChaCha8Rng>(&model, &x, &gts, &cfg, None, None).unwrap();
        counts.push((sg.output.len(), sg.output.candidate_points.len(), sg.assignment.matched.len()));
    }
    let [(m, cand1, pos1), (m2, cand2, pos2)] = [counts[0], counts[1]];
    let frac = |pos: usize, total: usize| pos as f64 / total as f64;
    let halves = frac(pos2, cand2) == frac(pos1, cand1) / 2.0;
    let pass = m == m2 && cand1 == m && cand2 == 2 * m && pos1 == pos2 && pos1 == gts.len() && halves;
    outcome(
        pass,
        format!(
            "M={m}: matcher sees {cand1} vs {cand2} candidates, {pos1} vs {pos2} positives, \
             positive fraction {:.5} -> {:.5} (pos:neg {:.5} -> {:.5})",
            frac(pos1, cand1),
            frac(pos2, cand2),
            pos1 as f64 / (cand1 - pos1) as f64,
            pos2 as f64 / (cand2 - pos2) as f64
        ),
    )
}

fn det(x: f64, y: f64, class: usize, conf: f64) -> Detection {
    Detection { x, y, class, conf }
}

fn gt(x: f64, y: f64, class: usize) -> Cell {
    Cell { x, y, class }
}

fn metrics_oracles() -> Outcome {
    struct Fixture {
        name: &'static str,
        dets: Vec<Detection>,
        gts: Vec<Cell>,
        class: usize,
        tp_fp_fn: (usize, usize, usize),
        ap: Option<f64>,
    }
    let fixtures = [
        Fixture {
            name: "precision 2/3",
            dets: vec![det(10.0, 11.0, 0, 0.9), det(31.0, 30.0, 0, 0.8), det(50.0, 50.0, 0, 0.7)],
            gts: vec![gt(10.0, 10.0, 0), gt(30.0, 30.0, 0)],
            class: 0,
            tp_fp_fn: (2, 1, 0),
            ap: Some(1.0),
        },
        Fixture {
            name: "staircase",
            dets: vec![det(10.0, 10.0, 0, 0.9), det(50.0, 50.0, 0, 0.8), det(30.0, 31.0, 0, 0.7)],
            gts: vec![gt(10.0, 10.0, 0), gt(30.0, 30.0, 0)],
            class: 0,
            tp_fp_fn: (2, 1, 0),
            ap: Some(0.5 + 0.5 * (2.0 / 3.0)),
        },
        Fixture {
            name: "radius is exclusive",
            dets: vec![det(16.0, 10.0, 0, 0.9), det(10.0, 25.999, 0, 0.8)],
            gts: vec![gt(10.0, 10.0, 0), gt(10.0, 20.0, 0)],
            class: 0,
            tp_fp_fn: (1, 1, 1),
            ap: Some(0.5 * 0.5),
        },
        Fixture {
            name: "greedy by confidence",
            dets: vec![det(14.0, 10.0, 1, 0.9), det(10.0, 11.0, 1, 0.6)],
            gts: vec![gt(10.0, 10.0, 1)],
            class: 1,
            tp_fp_fn: (1, 1, 0),
            ap: Some(1.0),
        },
        Fixture {
            name: "classes do not cross",
            dets: vec![det(10.0, 10.0, 1, 0.9)],
            gts: vec![gt(10.0, 10.0, 0)],
            class: 0,
            tp_fp_fn: (0, 0, 1),
            ap: Some(0.0),
        },
        Fixture {
            name: "class without ground truth",
            dets: vec![det(10.0, 10.0, 1, 0.9)],
            gts: vec![gt(10.0, 10.0, 0)],
            class: 1,
            tp_fp_fn: (0, 1, 0),
            ap: None,
        },
    ];
    for f in &fixtures {
        let r = match_for_eval(&f.dets, &f.gts, 6.0, f.class);
        let ap = average_precision(&[(&f.dets, &f.gts)], 6.0, f.class);
        if (r.tp, r.fp, r.fn_) != f.tp_fp_fn || ap != f.ap {
            return outcome(
                false,
                format!("{}: got {:?} AP {ap:?}, want {:?} AP {:?}", f.name, (r.tp, r.fp, r.fn_), f.tp_fp_fn, f.ap),
            );
        }
    }
    let precision = 2.0 / 3.0;
    let r = match_for_eval(&fixtures[0].dets, &fixtures[0].gts, 6.0, 0);
    if r.tp as f64 / (r.tp + r.fp) as f64 != precision {
        return outcome(false, "precision 2/3 fixture");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for trial in 0..200 {
        let gts: Vec<Cell> = (0..rng.random_range(0..8))
            .map(|_| gt(rng.random_range(0.0..64.0), rng.random_range(0.0..64.0), rng.random_range(0..2)))
            .collect();
        let dets: Vec<Detection> = (0..rng.random_range(0..10))
            .map(|_| {
                det(
                    rng.random_range(0.0..64.0),
                    rng.random_range(0.0..64.0),
                    rng.random_range(0..2),
                    rng.random_range(0.0..1.0),
                )
            })
            .collect();
        let radius = rng.random_range(2.0..12.0);
        for s in [0.5, 2.0, 10.0] {
            let sd: Vec<Detection> = dets.iter().map(|d| det(d.x * s, d.y * s, d.class, d.conf)).collect();
            let sg: Vec<Cell> = gts.iter().map(|g| gt(g.x * s, g.y * s, g.class)).collect();
            for class in 0..2 {
                let a = match_for_eval(&dets, &gts, radius, class);
                let b = match_for_eval(&sd, &sg, radius * s, class);
                let ap_a = average_precision(&[(&dets, &gts)], radius, class);
                let ap_b = average_precision(&[(&sd, &sg)], radius * s, class);
                if (a.tp, a.fp, a.fn_, &a.pairs) != (b.tp, b.fp, b.fn_, &b.pairs) || ap_a != ap_b {
                    return outcome(false, format!("scale {s} trial {trial} class {class} changed the result"));
                }
            }
        }
    }
    outcome(true, format!("{} fixtures exact, scale consistency for 0.5/2/10 on 200 cases", fixtures.len()))
}

fn files_under(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Outcome {
    let spec = SynthSpec {
        canvas_size: 64,
        seed: 7,
        ..Default::default()
    };
    let samples = synth_samples(&spec, 4, 1);
    let tcfg = TrainConfig {
        learning_rate: 1e-3,
        max_steps: 20,
        batch_size: 4,
        seed: 7,
        strict_deterministic: true,
        eval_every: 0,
        ..Default::default()
    };
    let ecfg = EvalConfig::default();
    let run = || {
        let m = Model::new(small_model(vec![2, 3, 4], 1), 7).unwrap();
        train(m, &samples, &[], &tcfg, &ecfg, None, |_| {}).unwrap()
    };
    let (a, b) = (run(), run());
    if a.steps != b.steps || a.model.params() != b.model.params() {
        return outcome(false, "strict training runs diverged");
    }

    let dir = tempfile::tempdir().unwrap();
    let mut trees = Vec::new();
    for name in ["a", "b"] {
        let root = dir.path().join(name);
        write_mfov_dataset(&root, &generate_synthetic(&spec, 6, 3).unwrap()).unwrap();
        trees.push(files_under(&root));
    }
    if trees[0] != trees[1] || trees[0].len() != 6 * 4 {
        return outcome(false, "synthetic datasets differ");
    }
    outcome(
        true,
        format!("20-step loss histories identical, 2 x {} generated files byte-identical", trees[0].len()),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome, Duration); 10] = [
        ("matcher oracle", matcher_oracle, Duration::from_secs(30)),
        ("bilinear sampling oracle", bilinear_oracle, Duration::MAX),
        ("gradient checks", gradient_checks, Duration::from_secs(120)),
        ("multi-view crop geometry", mfov_geometry, Duration::MAX),
        ("identity at initialization", identity_at_init, Duration::MAX),
        ("overfit with deformable proposals", overfit, Duration::from_secs(15 * 60)),
        ("context from the outer view", mfov_benefit, Duration::from_secs(30 * 60)),
        ("iterative refinement structure", iterative_structure, Duration::MAX),
        ("metrics oracles", metrics_oracles, Duration::MAX),
        ("determinism", determinism, Duration::MAX),
    ];
    let filter: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, check, budget)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !filter.is_empty() && !filter.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let o = check();
        let took = start.elapsed();
        let pass = o.pass && took <= *budget;
        if !pass {
            failed += 1;
        }
        let timing = if *budget == Duration::MAX {
            format!("{:.1}s", took.as_secs_f64())
        } else {
            format!("{:.1}s of {}s", took.as_secs_f64(), budget.as_secs())
        };
        println!("{} {n:>2} {name}: {} [{timing}]", if pass { "PASS" } else { "FAIL" }, o.detail);
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
