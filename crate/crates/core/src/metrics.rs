//! Distance-threshold detection metrics.
//!
//! A detection is a true positive when it lies strictly closer than the match
//! radius to a still-unmatched ground truth of its class. Detections are
//! processed by descending confidence (ties by index) and each takes the
//! nearest candidate (ties by lowest ground-truth index).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Cell;
use crate::error::{Error, Result};
use crate::geometry::Point;

/// How AP is computed; written into every report.
pub const AP_METHOD: &str = "per-class confidence-sweep AP, all-points interpolation over the monotone precision envelope";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub x: f64,
    pub y: f64,
    pub class: usize,
    pub conf: f64,
}

impl Detection {
    pub fn point(&self) -> Point {
        Point::new(self.x, self.y)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Pixels; a hit needs distance strictly below this.
    pub match_radius: f64,
    pub num_classes: usize,
    /// Detections below this confidence are ignored for precision/recall/F1.
    pub confidence_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            match_radius: 6.0,
            num_classes: 3,
            confidence_threshold: 0.5,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.match_radius > 0.0 && self.match_radius.is_finite()) {
            return Err(Error::invalid(format!("match radius must be positive, got {}", self.match_radius)));
        }
        if self.num_classes == 0 {
            return Err(Error::invalid("num_classes must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(Error::invalid("confidence threshold must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Counts from one class on one image. `pairs` holds (detection, gt) indices
/// into the slices given to [`match_for_eval`].
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub pairs: Vec<(usize, usize)>,
}

/// Detection indices of `class`, by descending confidence, ties by index.
fn ranked(dets: &[Detection], class: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].class == class).collect();
    idx.sort_by(|&a, &b| dets[b].conf.total_cmp(&dets[a].conf));
    idx
}

/// Greedy one-to-one matcher. Returns whether each ranked detection hit.
fn greedy(dets: &[Detection], order: &[usize], gts: &[Cell], radius: f64, class: usize) -> (Vec<Option<usize>>, usize) {
    let candidates: Vec<usize> = (0..gts.len()).filter(|&j| gts[j].class == class).collect();
    let mut taken = vec![false; gts.len()];
    let hits = order
        .iter()
        .map(|&i| {
            let p = dets[i].point();
            let mut best: Option<(usize, f64)> = None;
            for &j in &candidates {
                if taken[j] {
                    continue;
                }
                let d = p.dist(&gts[j].point());
                if d < radius && best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((j, d));
                }
            }
            best.map(|(j, _)| {
                taken[j] = true;
                j
            })
        })
        .collect();
    (hits, candidates.len())
}

pub fn match_for_eval(dets: &[Detection], gts: &[Cell], radius: f64, class: usize) -> MatchResult {
    let order = ranked(dets, class);
    let (hits, n_gt) = greedy(dets, &order, gts, radius, class);
    let pairs: Vec<(usize, usize)> = order.iter().zip(&hits).filter_map(|(&i, h)| h.map(|j| (i, j))).collect();
    let tp = pairs.len();
    MatchResult {
        tp,
        fp: order.len() - tp,
        fn_: n_gt - tp,
        pairs,
    }
}

/// One entry of a pooled confidence sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepPoint {
    pub conf: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Precision/recall after each detection of `class`, pooled over images.
/// Returns the sweep and the total ground-truth count.
pub fn pr_sweep(images: &[(&[Detection], &[Cell])], radius: f64, class: usize) -> (Vec<SweepPoint>, usize) {
    let mut hits: Vec<(f64, usize, usize, bool)> = Vec::new();
    let mut n_gt = 0;
    for (img, (dets, gts)) in images.iter().enumerate() {
        let order = ranked(dets, class);
        let (h, n) = greedy(dets, &order, gts, radius, class);
        n_gt += n;
        hits.extend(order.iter().zip(h).map(|(&i, m)| (dets[i].conf, img, i, m.is_some())));
    }
    // per-image order is preserved, so the per-image greedy result is the
    // same as matching the pooled list incrementally
    hits.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut tp = 0;
    let sweep = hits
        .iter()
        .enumerate()
        .map(|(k, &(conf, _, _, hit))| {
            tp += hit as usize;
            SweepPoint {
                conf,
                precision: tp as f64 / (k + 1) as f64,
                recall: if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 },
            }
        })
        .collect();
    (sweep, n_gt)
}

/// Area under the monotone precision envelope of a sweep.
pub fn envelope_ap(sweep: &[SweepPoint]) -> f64 {
    let mut env: Vec<f64> = sweep.iter().map(|s| s.precision).collect();
    for i in (0..env.len().saturating_sub(1)).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (s, p) in sweep.iter().zip(env) {
        ap += (s.recall - prev_r) * p;
        prev_r = s.recall;
    }
    ap
}

/// Pooled AP of one class; `None` when the class has no ground truth.
pub fn average_precision(images: &[(&[Detection], &[Cell])], radius: f64, class: usize) -> Option<f64> {
    let (sweep, n_gt) = pr_sweep(images, radius, class);
    (n_gt > 0).then(|| envelope_ap(&sweep))
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: usize,
    pub num_gt: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Absent when the class has no ground truth.
    pub ap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap_method: String,
    pub match_radius: f64,
    pub confidence_threshold: f64,
    pub images: usize,
    pub per_class: Vec<ClassReport>,
    /// Mean over classes with at least one ground truth.
    pub macro_f1: f64,
    pub macro_ap: f64,
    /// Classes left out of the macro averages for lack of ground truth.
    pub excluded_classes: Vec<usize>,
    pub images_per_second: Option<f64>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "AP: {}", self.ap_method);
        let _ = writeln!(s, "radius {} px, threshold {}, {} images", self.match_radius, self.confidence_threshold, self.images);
        let _ = writeln!(
            s,
            "{:>5} {:>6} {:>6} {:>6} {:>6} {:>9} {:>9} {:>9} {:>9}",
            "class", "gt", "tp", "fp", "fn", "precision", "recall", "f1", "ap"
        );
        for c in &self.per_class {
            let ap = c.ap.map_or_else(|| "n/a".to_string(), |a| format!("{a:.4}"));
            let _ = writeln!(
                s,
                "{:>5} {:>6} {:>6} {:>6} {:>6} {:>9.4} {:>9.4} {:>9.4} {:>9}",
                c.class, c.num_gt, c.tp, c.fp, c.fn_, c.precision, c.recall, c.f1, ap
            );
        }
        let _ = writeln!(s, "macro F1 {:.4}  macro AP {:.4}", self.macro_f1, self.macro_ap);
        if !self.excluded_classes.is_empty() {
            let _ = writeln!(s, "excluded (no ground truth): {:?}", self.excluded_classes);
        }
        if let Some(ips) = self.images_per_second {
            let _ = writeln!(s, "throughput {ips:.2} images/s");
        }
        s
    }
}

/// Pools every class over all images. Keys of both maps must agree.
pub fn evaluate_dataset(
    predictions: &BTreeMap<String, Vec<Detection>>,
    annotations: &BTreeMap<String, Vec<Cell>>,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    if let Some(k) = annotations.keys().find(|k| !predictions.contains_key(*k)) {
        return Err(Error::invalid(format!("no predictions for image '{k}'")));
    }
    if let Some(k) = predictions.keys().find(|k| !annotations.contains_key(*k)) {
        return Err(Error::invalid(format!("no annotations for image '{k}'")));
    }
    let all: Vec<(&[Detection], &[Cell])> = annotations
        .iter()
        .map(|(k, gts)| (predictions[k].as_slice(), gts.as_slice()))
        .collect();
    let kept: Vec<Vec<Detection>> = all
        .iter()
        .map(|(d, _)| d.iter().copied().filter(|d| d.conf >= cfg.confidence_threshold).collect())
        .collect();

    let mut per_class = Vec::with_capacity(cfg.num_classes);
    let mut excluded = Vec::new();
    let (mut f1_sum, mut ap_sum, mut counted) = (0.0, 0.0, 0usize);
    for class in 0..cfg.num_classes {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (dets, (_, gts)) in kept.iter().zip(&all) {
            let m = match_for_eval(dets, gts, cfg.match_radius, class);
            tp += m.tp;
            fp += m.fp;
            fn_ += m.fn_;
        }
        let (precision, recall) = (ratio(tp, tp + fp), ratio(tp, tp + fn_));
        let f1 = f1_score(precision, recall);
        let ap = average_precision(&all, cfg.match_radius, class);
        match ap {
            Some(a) => {
                f1_sum += f1;
                ap_sum += a;
                counted += 1;
            }
            None => excluded.push(class),
        }
        per_class.push(ClassReport {
            class,
            num_gt: tp + fn_,
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
            ap,
        });
    }
    Ok(EvalReport {
        ap_method: AP_METHOD.to_string(),
        match_radius: cfg.match_radius,
        confidence_threshold: cfg.confidence_threshold,
        images: annotations.len(),
        per_class,
        macro_f1: ratio_f(f1_sum, counted),
        macro_ap: ratio_f(ap_sum, counted),
        excluded_classes: excluded,
        images_per_second: None,
    })
}

fn ratio_f(sum: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn det(x: f64, y: f64, conf: f64) -> Detection {
        Detection { x, y, class: 0, conf }
    }

    fn gt(x: f64, y: f64) -> Cell {
        Cell { x, y, class: 0 }
    }

    #[test]
    fn identical_detections_are_all_hits() {
        let gts = vec![gt(1.0, 2.0), gt(10.0, 10.0), gt(30.0, 5.0)];
        let dets: Vec<_> = gts.iter().map(|g| det(g.x, g.y, 0.9)).collect();
        let m = match_for_eval(&dets, &gts, 6.0, 0);
        assert_eq!((m.tp, m.fp, m.fn_), (3, 0, 0));
    }

    #[test]
    fn radius_is_exclusive() {
        let gts = vec![gt(0.0, 0.0)];
        let m = match_for_eval(&[det(6.0, 0.0, 0.9)], &gts, 6.0, 0);
        assert_eq!((m.tp, m.fp, m.fn_), (0, 1, 1));
        let m = match_for_eval(&[det(6.0 + 1e-9, 0.0, 0.9)], &gts, 6.0, 0);
        assert_eq!((m.tp, m.fp, m.fn_), (0, 1, 1));
        let m = match_for_eval(&[det(6.0 - 1e-9, 0.0, 0.9)], &gts, 6.0, 0);
        assert_eq!((m.tp, m.fp, m.fn_), (1, 0, 0));
    }

    #[test]
    fn two_thirds_precision_case() {
        let gts = vec![gt(0.0, 0.0), gt(50.0, 0.0)];
        let dets = vec![det(1.0, 0.0, 0.9), det(51.0, 1.0, 0.8), det(100.0, 100.0, 0.7)];
        let m = match_for_eval(&dets, &gts, 6.0, 0);
        assert_eq!((m.tp, m.fp, m.fn_), (2, 1, 0));
        let (p, r) = (ratio(m.tp, m.tp + m.fp), ratio(m.tp, m.tp + m.fn_));
        assert_eq!(p, 2.0 / 3.0);
        assert_eq!(r, 1.0);
        assert!((f1_score(p, r) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn higher_confidence_takes_the_contested_gt() {
        // both detections are in range of the single gt; the confident one wins
        let gts = vec![gt(0.0, 0.0)];
        let dets = vec![det(1.0, 0.0, 0.3), det(4.0, 0.0, 0.8)];
        let m = match_for_eval(&dets, &gts, 6.0, 0);
        assert_eq!(m.pairs, vec![(1, 0)]);
        assert_eq!((m.tp, m.fp, m.fn_), (1, 1, 0));
    }

    #[test]
    fn nearest_gt_is_taken() {
        let gts = vec![gt(0.0, 0.0), gt(4.0, 0.0)];
        let dets = vec![det(3.0, 0.0, 0.9), det(-1.0, 0.0, 0.8)];
        let m = match_for_eval(&dets, &gts, 6.0, 0);
        assert_eq!(m.pairs, vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn other_classes_are_ignored() {
        let gts = vec![gt(0.0, 0.0), Cell { x: 20.0, y: 0.0, class: 1 }];
        let dets = vec![det(20.0, 0.0, 0.9), Detection { x: 0.0, y: 0.0, class: 1, conf: 0.9 }];
        let m = match_for_eval(&dets, &gts, 6.0, 0);
        assert_eq!((m.tp, m.fp, m.fn_), (0, 1, 1));
        let m = match_for_eval(&dets, &gts, 6.0, 1);
        assert_eq!((m.tp, m.fp, m.fn_), (0, 1, 1));
    }

    #[test]
    fn duplicate_adds_exactly_one_fp() {
        let gts = vec![gt(0.0, 0.0), gt(20.0, 0.0)];
        let mut dets = vec![det(0.5, 0.0, 0.9), det(20.0, 0.5, 0.8)];
        let before = match_for_eval(&dets, &gts, 6.0, 0);
        dets.push(det(0.0, 0.5, 0.7));
        let after = match_for_eval(&dets, &gts, 6.0, 0);
        assert_eq!((after.tp, after.fp, after.fn_), (before.tp, before.fp + 1, before.fn_));
    }

    #[test]
    fn perfect_and_hopeless_ap() {
        let gts = vec![gt(0.0, 0.0), gt(30.0, 0.0)];
        let dets = vec![det(0.0, 0.0, 0.6), det(30.0, 0.0, 0.9)];
        assert_eq!(average_precision(&[(&dets, &gts)], 6.0, 0), Some(1.0));
        let far = vec![det(100.0, 0.0, 0.6), det(130.0, 0.0, 0.9)];
        assert_eq!(average_precision(&[(&far, &gts)], 6.0, 0), Some(0.0));
        assert_eq!(average_precision(&[(&far, &[])], 6.0, 0), None);
    }

    #[test]
    fn staircase_by_hand() {
        // hit, miss, hit, miss: PR = (1,.5) (.5,.5) (2/3,1) (.5,1)
        let gts = vec![gt(0.0, 0.0), gt(40.0, 0.0)];
        let dets = vec![det(0.0, 1.0, 0.9), det(80.0, 0.0, 0.8), det(40.0, 1.0, 0.7), det(120.0, 0.0, 0.6)];
        let ap = average_precision(&[(&dets, &gts)], 6.0, 0).unwrap();
        assert_eq!(ap, 0.5 * 1.0 + 0.5 * (2.0 / 3.0));
    }

    /// AP from the prefixes of the ranked list, each matched from scratch.
    fn prefix_oracle(dets: &[Detection], gts: &[Cell], radius: f64) -> f64 {
        let order = ranked(dets, 0);
        let n_gt = gts.len() as f64;
        let mut pr = Vec::new();
        for k in 1..=order.len() {
            let prefix: Vec<Detection> = order[..k].iter().map(|&i| dets[i]).collect();
            let m = match_for_eval(&prefix, gts, radius, 0);
            pr.push((m.tp as f64 / k as f64, m.tp as f64 / n_gt));
        }
        let mut ap = 0.0;
        let mut prev = 0.0;
        for i in 0..pr.len() {
            let best = pr[i..].iter().map(|x| x.0).fold(0.0, f64::max);
            ap += (pr[i].1 - prev) * best;
            prev = pr[i].1;
        }
        ap
    }

    #[test]
    fn ap_matches_prefix_enumeration() {
        let gts = vec![gt(0.0, 0.0), gt(10.0, 0.0)];
        let dets = vec![det(5.0, 0.0, 0.95), det(1.0, 0.0, 0.5), det(9.0, 2.0, 0.8), det(30.0, 0.0, 0.7)];
        let ap = average_precision(&[(&dets, &gts)], 6.0, 0).unwrap();
        assert_eq!(ap, prefix_oracle(&dets, &gts, 6.0));
    }

    fn fixture() -> (BTreeMap<String, Vec<Detection>>, BTreeMap<String, Vec<Cell>>) {
        let mut p = BTreeMap::new();
        let mut a = BTreeMap::new();
        a.insert("a".into(), vec![gt(0.0, 0.0), gt(20.0, 20.0), Cell { x: 40.0, y: 0.0, class: 1 }]);
        p.insert(
            "a".into(),
            vec![det(1.0, 0.0, 0.9), det(25.0, 25.0, 0.6), Detection { x: 40.0, y: 1.0, class: 1, conf: 0.4 }],
        );
        a.insert("b".into(), vec![gt(5.0, 5.0)]);
        p.insert("b".into(), vec![det(5.0, 6.0, 0.7), det(60.0, 6.0, 0.95)]);
        a.insert("c".into(), vec![]);
        p.insert("c".into(), vec![det(3.0, 3.0, 0.55), Detection { x: 0.0, y: 0.0, class: 2, conf: 0.99 }]);
        (p, a)
    }

    #[test]
    fn pooled_report_matches_recount() {
        let (p, a) = fixture();
        let cfg = EvalConfig {
            match_radius: 6.0,
            num_classes: 3,
            confidence_threshold: 0.5,
        };
        let r = evaluate_dataset(&p, &a, &cfg).unwrap();
        // class 0: a: hit, miss (25,25 is 7.07 away) ; b: far det (fp) then hit ; c: fp
        let c0 = &r.per_class[0];
        assert_eq!((c0.tp, c0.fp, c0.fn_), (2, 3, 1));
        // class 1: the only det is below threshold
        let c1 = &r.per_class[1];
        assert_eq!((c1.tp, c1.fp, c1.fn_), (0, 0, 1));
        assert_eq!(c1.ap, Some(1.0));
        assert_eq!(r.excluded_classes, vec![2]);
        let f1_0 = f1_score(2.0 / 5.0, 2.0 / 3.0);
        assert!((r.macro_f1 - f1_0 / 2.0).abs() < 1e-15);
        // pooled sweep for class 0: .95 miss, .9 hit, .7 hit, .6 miss, .55 miss;
        // the envelope is 2/3 over both recall steps
        let ap0 = 4.0 / 9.0;
        assert!((c0.ap.unwrap() - ap0).abs() < 1e-15);
        assert!(r.render_table().contains("macro F1"));
        let back: EvalReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn macro_f1_averages_classes() {
        let mut a = BTreeMap::new();
        a.insert("x".to_string(), vec![gt(0.0, 0.0), Cell { x: 30.0, y: 0.0, class: 1 }]);
        let mut p = BTreeMap::new();
        p.insert("x".to_string(), vec![det(0.0, 0.0, 0.9), Detection { x: 90.0, y: 0.0, class: 1, conf: 0.9 }]);
        let cfg = EvalConfig {
            num_classes: 2,
            ..Default::default()
        };
        let r = evaluate_dataset(&p, &a, &cfg).unwrap();
        assert_eq!(r.macro_f1, 0.5);
        let mut exact = BTreeMap::new();
        exact.insert("x".to_string(), vec![det(0.0, 0.0, 0.9)]);
        let mut one = BTreeMap::new();
        one.insert("x".to_string(), vec![gt(0.0, 0.0)]);
        let r = evaluate_dataset(&exact, &one, &EvalConfig { num_classes: 1, ..Default::default() }).unwrap();
        assert_eq!((r.macro_f1, r.macro_ap), (1.0, 1.0));
    }

    #[test]
    fn missing_key_is_named() {
        let (mut p, a) = fixture();
        p.remove("b");
        let err = evaluate_dataset(&p, &a, &EvalConfig::default()).unwrap_err();
        assert!(err.to_string().contains("'b'"));
    }

    fn arb_case() -> impl Strategy<Value = (Vec<Detection>, Vec<Cell>)> {
        let d = prop::collection::vec((0.0..50.0f64, 0.0..50.0f64, 0usize..2, 0.0..1.0f64), 0..12)
            .prop_map(|v| v.into_iter().map(|(x, y, class, conf)| Detection { x, y, class, conf }).collect());
        let g = prop::collection::vec((0.0..50.0f64, 0.0..50.0f64, 0usize..2), 0..10)
            .prop_map(|v| v.into_iter().map(|(x, y, class)| Cell { x, y, class }).collect());
        (d, g)
    }

    proptest! {
        #[test]
        fn scale_consistency((dets, gts) in arb_case(), f in prop::sample::select(vec![0.5, 2.0, 10.0])) {
            let sd: Vec<_> = dets.iter().map(|d| Detection { x: d.x * f, y: d.y * f, ..*d }).collect();
            let sg: Vec<_> = gts.iter().map(|g| Cell { x: g.x * f, y: g.y * f, ..*g }).collect();
            for class in 0..2 {
                prop_assert_eq!(match_for_eval(&dets, &gts, 6.0, class), match_for_eval(&sd, &sg, 6.0 * f, class));
                prop_assert_eq!(average_precision(&[(&dets, &gts)], 6.0, class), average_precision(&[(&sd, &sg)], 6.0 * f, class));
            }
        }

        #[test]
        fn one_to_one_and_bounded((dets, gts) in arb_case()) {
            for class in 0..2 {
                let m = match_for_eval(&dets, &gts, 8.0, class);
                let nd = dets.iter().filter(|d| d.class == class).count();
                let ng = gts.iter().filter(|g| g.class == class).count();
                prop_assert!(m.tp <= nd.min(ng));
                let mut gs: Vec<_> = m.pairs.iter().map(|p| p.1).collect();
                gs.sort();
                gs.dedup();
                prop_assert_eq!(gs.len(), m.tp);
                if ng > 0 {
                    let ap = average_precision(&[(&dets, &gts)], 8.0, class).unwrap();
                    prop_assert!((0.0..=1.0).contains(&ap));
                }
            }
        }

        #[test]
        fn threshold_f1_equals_sweep_point((dets, gts) in arb_case(), t in 0.0..1.0f64) {
            let kept: Vec<_> = dets.iter().copied().filter(|d| d.conf >= t).collect();
            let m = match_for_eval(&kept, &gts, 8.0, 0);
            let (sweep, n_gt) = pr_sweep(&[(&dets, &gts)], 8.0, 0);
            let cut = sweep.iter().filter(|s| s.conf >= t).count();
            let tp = if cut == 0 { 0.0 } else { sweep[cut - 1].precision * cut as f64 };
            prop_assert!((tp - m.tp as f64).abs() < 1e-9);
            prop_assert_eq!(m.tp + m.fn_, n_gt);
        }

        #[test]
        fn dropping_a_false_positive_keeps_precision((dets, gts) in arb_case()) {
            let m = match_for_eval(&dets, &gts, 8.0, 0);
            let hit: Vec<usize> = m.pairs.iter().map(|p| p.0).collect();
            if let Some(fp) = (0..dets.len()).find(|i| dets[*i].class == 0 && !hit.contains(i)) {
                let mut fewer = dets.clone();
                fewer.remove(fp);
                let before = pr_sweep(&[(&dets, &gts)], 8.0, 0).0;
                let after = pr_sweep(&[(&fewer, &gts)], 8.0, 0).0;
                // precision at each recall level reached is never lower
                for a in &after {
                    let best_before = before.iter().filter(|b| b.recall == a.recall).map(|b| b.precision).fold(0.0, f64::max);
                    let best_after = after.iter().filter(|b| b.recall == a.recall).map(|b| b.precision).fold(0.0, f64::max);
                    prop_assert!(best_after >= best_before);
                }
            }
        }
    }
}
