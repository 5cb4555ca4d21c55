//! Per-class precision, recall and F1, confusion matrices, and one-vs-rest
//! ROC curves with Mann-Whitney AUC.

use std::fmt::Write as _;
use std::ops::{Add, AddAssign};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgcore::{class, LabelMask, ProbabilityMap};

/// `counts[truth][predicted]` pixel counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; class::COUNT]; class::COUNT],
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn true_positives(&self, c: usize) -> u64 {
        self.counts[c][c]
    }

    /// Pixels predicted `c` whose truth is another class.
    pub fn false_positives(&self, c: usize) -> u64 {
        (0..class::COUNT).filter(|&t| t != c).map(|t| self.counts[t][c]).sum()
    }

    /// Pixels of class `c` predicted as another class.
    pub fn false_negatives(&self, c: usize) -> u64 {
        (0..class::COUNT).filter(|&p| p != c).map(|p| self.counts[c][p]).sum()
    }

    pub fn true_negatives(&self, c: usize) -> u64 {
        self.total() - self.true_positives(c) - self.false_positives(c) - self.false_negatives(c)
    }
}

impl Add for ConfusionMatrix {
    type Output = ConfusionMatrix;

    fn add(mut self, rhs: ConfusionMatrix) -> ConfusionMatrix {
        self += rhs;
        self
    }
}

impl AddAssign for ConfusionMatrix {
    fn add_assign(&mut self, rhs: ConfusionMatrix) {
        for (row, other) in self.counts.iter_mut().zip(rhs.counts) {
            for (a, b) in row.iter_mut().zip(other) {
                *a += b;
            }
        }
    }
}

pub fn confusion(pred: &LabelMask, truth: &LabelMask) -> Result<ConfusionMatrix> {
    if pred.dims() != truth.dims() {
        return Err(Error::DimensionMismatch(format!(
            "prediction {:?} vs truth {:?}",
            pred.dims(),
            truth.dims()
        )));
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
        cm.counts[t as usize][p as usize] += 1;
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: [f64; class::COUNT],
    pub recall: [f64; class::COUNT],
    pub f1: [f64; class::COUNT],
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Precision and recall with zero denominators read as 0; F1 is 0 when
/// both are 0.
pub fn scores(cm: &ConfusionMatrix) -> ClassScores {
    let mut s = ClassScores {
        precision: [0.0; class::COUNT],
        recall: [0.0; class::COUNT],
        f1: [0.0; class::COUNT],
    };
    for c in 0..class::COUNT {
        let tp = cm.true_positives(c);
        let p = ratio(tp, tp + cm.false_positives(c));
        let r = ratio(tp, tp + cm.false_negatives(c));
        s.precision[c] = p;
        s.recall[c] = r;
        s.f1[c] = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub class: u8,
    /// `(false positive rate, true positive rate)` from the strictest
    /// threshold to the loosest, starting at (0, 0) and ending at (1, 1).
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

impl RocCurve {
    /// Area under the swept curve by the trapezoid rule.
    pub fn trapezoid_area(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
            .sum()
    }
}

/// One-vs-rest ROC for `c` from per-pixel scores and binary truth.
///
/// The AUC is the Mann-Whitney statistic: the share of (positive,
/// negative) pairs ranked correctly, ties counting one half.
pub fn roc_from_scores(c: u8, scored: &mut [(f64, bool)]) -> Result<RocCurve> {
    let pos = scored.iter().filter(|s| s.1).count() as u64;
    let neg = scored.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::EmptyInput(if pos == 0 {
            "ROC needs at least one positive pixel"
        } else {
            "ROC needs at least one negative pixel"
        }));
    }
    if scored.iter().any(|s| !s.0.is_finite()) {
        return Err(Error::InvalidProbabilities("non-finite score".into()));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut points = vec![(0.0, 0.0)];
    // twice the Mann-Whitney U, kept integral
    let mut u2: u128 = 0;
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < scored.len() {
        let score = scored[i].0;
        let (mut gp, mut gn) = (0u64, 0u64);
        while i < scored.len() && scored[i].0 == score {
            if scored[i].1 {
                gp += 1;
            } else {
                gn += 1;
            }
            i += 1;
        }
        // positives in this group beat every negative scored lower and tie
        // with the negatives of the group
        u2 += gp as u128 * (2 * (neg - fp - gn) as u128 + gn as u128);
        tp += gp;
        fp += gn;
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    let auc = u2 as f64 / (2 * pos as u128 * neg as u128) as f64;
    Ok(RocCurve { class: c, points, auc })
}

pub fn roc_auc(probs: &ProbabilityMap, truth: &LabelMask, c: u8) -> Result<RocCurve> {
    check_pair(probs, truth)?;
    let mut scored: Vec<(f64, bool)> = probs
        .class_scores(c as usize)
        .zip(truth.labels())
        .map(|(s, &t)| (s, t == c))
        .collect();
    roc_from_scores(c, &mut scored)
}

fn check_pair(probs: &ProbabilityMap, truth: &LabelMask) -> Result<()> {
    if probs.dims() != truth.dims() {
        return Err(Error::DimensionMismatch(format!(
            "probabilities {:?} vs truth {:?}",
            probs.dims(),
            truth.dims()
        )));
    }
    if probs.num_classes() != class::COUNT {
        return Err(Error::InvalidProbabilities(format!(
            "expected {} classes, got {}",
            class::COUNT,
            probs.num_classes()
        )));
    }
    Ok(())
}

/// One frame's model output: hard labels plus, optionally, probabilities.
#[derive(Debug, Clone)]
pub struct FrameOutput {
    pub prediction: LabelMask,
    pub probabilities: Option<ProbabilityMap>,
}

impl FrameOutput {
    pub fn from_probabilities(pm: ProbabilityMap) -> Self {
        FrameOutput {
            prediction: pm.argmax_labels(),
            probabilities: Some(pm),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub averaging: String,
    pub frames: usize,
    pub pixels: u64,
    pub confusion: ConfusionMatrix,
    pub scores: ClassScores,
    /// Pixel-pooled AUC per class; `None` when probabilities were missing or
    /// the class had no positive or no negative pixels.
    pub auc: [Option<f64>; class::COUNT],
    #[serde(skip)]
    pub roc: Vec<RocCurve>,
}

/// Sums confusion matrices over frames before scoring and pools every
/// pixel's score for the AUC.
pub fn evaluate_dataset(outputs: &[FrameOutput], truths: &[LabelMask]) -> Result<EvalReport> {
    if outputs.len() != truths.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} outputs for {} truth masks",
            outputs.len(),
            truths.len()
        )));
    }
    if outputs.is_empty() {
        return Err(Error::EmptyInput("nothing to evaluate"));
    }
    let mut cm = ConfusionMatrix::default();
    let with_probs = outputs.iter().all(|o| o.probabilities.is_some());
    let mut pooled: Vec<Vec<(f64, bool)>> = vec![Vec::new(); class::COUNT];
    for (o, t) in outputs.iter().zip(truths) {
        cm += confusion(&o.prediction, t)?;
        if let (true, Some(pm)) = (with_probs, &o.probabilities) {
            check_pair(pm, t)?;
            for (c, pool) in pooled.iter_mut().enumerate() {
                pool.extend(pm.class_scores(c).zip(t.labels()).map(|(s, &l)| (s, l as usize == c)));
            }
        }
    }
    let mut auc = [None; class::COUNT];
    let mut roc = Vec::new();
    if with_probs {
        for (c, pool) in pooled.iter_mut().enumerate() {
            match roc_from_scores(c as u8, pool) {
                Ok(curve) => {
                    auc[c] = Some(curve.auc);
                    roc.push(curve);
                }
                Err(Error::EmptyInput(_)) => {}
                Err(e) => return Err(e),
            }
        }
    }
    Ok(EvalReport {
        averaging: "micro: confusion summed over frames; AUC pooled over pixels".into(),
        frames: outputs.len(),
        pixels: cm.total(),
        scores: scores(&cm),
        confusion: cm,
        auc,
        roc,
    })
}

impl EvalReport {
    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# {} ({} frames, {} pixels)", self.averaging, self.frames, self.pixels);
        let _ = writeln!(s, "{:<6} {:>9} {:>9} {:>9} {:>9}", "class", "precision", "recall", "f1", "auc");
        for c in 0..class::COUNT {
            let auc = self.auc[c].map_or("-".to_string(), |a| format!("{a:.4}"));
            let _ = writeln!(
                s,
                "{:<6} {:>9.4} {:>9.4} {:>9.4} {:>9}",
                class::NAMES[c],
                self.scores.precision[c],
                self.scores.recall[c],
                self.scores.f1[c],
                auc
            );
        }
        let _ = writeln!(s, "confusion (rows: truth, cols: predicted)");
        let _ = writeln!(s, "{:<6} {:>10} {:>10} {:>10}", "", class::NAMES[0], class::NAMES[1], class::NAMES[2]);
        for (c, row) in self.confusion.counts.iter().enumerate() {
            let _ = writeln!(s, "{:<6} {:>10} {:>10} {:>10}", class::NAMES[c], row[0], row[1], row[2]);
        }
        s
    }

    /// `class,fpr,tpr` rows for every swept ROC point.
    pub fn roc_csv(&self) -> String {
        let mut s = String::from("class,fpr,tpr\n");
        for curve in &self.roc {
            for (fpr, tpr) in &curve.points {
                let _ = writeln!(s, "{},{fpr},{tpr}", class::NAMES[curve.class as usize]);
            }
        }
        s
    }

    /// Writes `<stem>.json`, `<stem>.txt` and, with probabilities,
    /// `<stem>_roc.csv` next to each other.
    pub fn write(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: String, text: String| {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        write(format!("{stem}.json"), serde_json::to_string_pretty(self)? + "\n")?;
        write(format!("{stem}.txt"), self.to_table())?;
        if !self.roc.is_empty() {
            write(format!("{stem}_roc.csv"), self.roc_csv())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask(labels: Vec<u8>) -> LabelMask {
        LabelMask::new(labels.len() as u32, 1, labels).unwrap()
    }

    fn roc(pos: &[f64], neg: &[f64]) -> RocCurve {
        let mut s: Vec<(f64, bool)> = pos
            .iter()
            .map(|&p| (p, true))
            .chain(neg.iter().map(|&n| (n, false)))
            .collect();
        roc_from_scores(0, &mut s).unwrap()
    }

    #[test]
    fn perfect_prediction_is_diagonal() {
        let m = mask(vec![0, 1, 2, 2, 1, 0, 0]);
        let cm = confusion(&m, &m).unwrap();
        assert_eq!(cm.counts[0][0] + cm.counts[1][1] + cm.counts[2][2], 7);
        assert_eq!(cm.total(), 7);
        let s = scores(&cm);
        assert_eq!(s.f1, [1.0; 3]);
    }

    #[test]
    fn all_weed_predicted_crop() {
        let cm = confusion(&mask(vec![1; 5]), &mask(vec![2; 5])).unwrap();
        assert_eq!(cm.counts[2][1], 5);
        assert!(confusion(&mask(vec![1; 5]), &mask(vec![2; 4])).is_err());
    }

    #[test]
    fn recount_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p: Vec<u8> = (0..200).map(|_| rng.gen_range(0..3)).collect();
        let t: Vec<u8> = (0..200).map(|_| rng.gen_range(0..3)).collect();
        let cm = confusion(&mask(p.clone()), &mask(t.clone())).unwrap();
        for a in 0..3u8 {
            for b in 0..3u8 {
                let n = p.iter().zip(&t).filter(|(&pp, &tt)| tt == a && pp == b).count();
                assert_eq!(cm.counts[a as usize][b as usize], n as u64);
            }
        }
    }

    #[test]
    fn score_formulas() {
        let mut cm = ConfusionMatrix::default();
        cm.counts[1][1] = 8;
        cm.counts[0][1] = 2;
        cm.counts[1][0] = 2;
        let s = scores(&cm);
        assert!((s.precision[1] - 0.8).abs() < 1e-15);
        assert!((s.recall[1] - 0.8).abs() < 1e-15);
        assert!((s.f1[1] - 0.8).abs() < 1e-15);

        let mut cm = ConfusionMatrix::default();
        cm.counts[2][0] = 5;
        let s = scores(&cm);
        assert_eq!((s.precision[2], s.recall[2], s.f1[2]), (0.0, 0.0, 0.0));
        assert_eq!(cm.true_negatives(1), 5);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc(&[0.9, 0.8], &[0.1, 0.2]).auc, 1.0);
        assert_eq!(roc(&[0.8, 0.4], &[0.6, 0.2]).auc, 0.75);
        assert_eq!(roc(&[0.5; 3], &[0.5; 4]).auc, 0.5);
        let mut only_pos = vec![(0.3, true)];
        assert!(roc_from_scores(0, &mut only_pos).is_err());
    }

    #[test]
    fn curve_endpoints() {
        let c = roc(&[0.8, 0.4], &[0.6, 0.2]);
        assert_eq!(c.points.first(), Some(&(0.0, 0.0)));
        assert_eq!(c.points.last(), Some(&(1.0, 1.0)));
        assert!(c.points.windows(2).all(|w| w[1].0 >= w[0].0 && w[1].1 >= w[0].1));
    }

    proptest! {
        #[test]
        fn mann_whitney_matches_trapezoid(
            scores in prop::collection::vec((0u8..20, any::<bool>()), 2..200)
        ) {
            let mut s: Vec<(f64, bool)> = scores.iter().map(|&(v, b)| (v as f64 / 19.0, b)).collect();
            prop_assume!(s.iter().any(|x| x.1) && s.iter().any(|x| !x.1));
            let c = roc_from_scores(0, &mut s).unwrap();
            prop_assert!((c.auc - c.trapezoid_area()).abs() < 1e-9);
        }

        #[test]
        fn f1_between_precision_and_recall(counts in prop::array::uniform9(0u64..50)) {
            let mut cm = ConfusionMatrix::default();
            for (i, v) in counts.iter().enumerate() {
                cm.counts[i / 3][i % 3] = *v;
            }
            let s = scores(&cm);
            for c in 0..3 {
                let (lo, hi) = (s.precision[c].min(s.recall[c]), s.precision[c].max(s.recall[c]));
                prop_assert!(s.f1[c] >= lo - 1e-12 && s.f1[c] <= hi + 1e-12);
            }
        }
    }

    fn random_frame(rng: &mut ChaCha8Rng, n: usize) -> (FrameOutput, LabelMask) {
        let truth: Vec<u8> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        let mut probs = Vec::with_capacity(3 * n);
        for _ in 0..n {
            let raw: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
            let s: f64 = raw.iter().sum();
            probs.extend(raw.iter().map(|v| v / s));
        }
        let pm = ProbabilityMap::new(n as u32, 1, 3, probs).unwrap();
        (FrameOutput::from_probabilities(pm), mask(truth))
    }

    #[test]
    fn micro_average_of_duplicates() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (o, t) = random_frame(&mut rng, 40);
        let one = evaluate_dataset(std::slice::from_ref(&o), std::slice::from_ref(&t)).unwrap();
        let two = evaluate_dataset(&[o.clone(), o], &[t.clone(), t]).unwrap();
        assert_eq!(one.scores, two.scores);
        assert_eq!(one.auc, two.auc);
    }

    #[test]
    fn dataset_matches_concatenated_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let frames: Vec<_> = (0..4).map(|k| random_frame(&mut rng, 10 + 7 * k)).collect();
        let (outs, truths): (Vec<_>, Vec<_>) = frames.iter().cloned().unzip();
        let report = evaluate_dataset(&outs, &truths).unwrap();

        let pred_all: Vec<u8> = outs.iter().flat_map(|o| o.prediction.labels().to_vec()).collect();
        let truth_all: Vec<u8> = truths.iter().flat_map(|t| t.labels().to_vec()).collect();
        let cm = confusion(&mask(pred_all), &mask(truth_all.clone())).unwrap();
        assert_eq!(report.confusion, cm);
        assert_eq!(report.scores, scores(&cm));
        let probs_all: Vec<f64> = outs
            .iter()
            .flat_map(|o| o.probabilities.as_ref().unwrap().probs().to_vec())
            .collect();
        let pm = ProbabilityMap::new(truth_all.len() as u32, 1, 3, probs_all).unwrap();
        for c in 0..3u8 {
            let r = roc_auc(&pm, &mask(truth_all.clone()), c).unwrap();
            assert_eq!(report.auc[c as usize], Some(r.auc));
        }
        // order and partition invariance
        let rev_o: Vec<_> = outs.iter().rev().cloned().collect();
        let rev_t: Vec<_> = truths.iter().rev().cloned().collect();
        assert_eq!(evaluate_dataset(&rev_o, &rev_t).unwrap().confusion, report.confusion);
    }

    #[test]
    fn report_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (o, t) = random_frame(&mut rng, 30);
        let r = evaluate_dataset(&[o], &[t]).unwrap();
        let table = r.to_table();
        assert!(table.contains("weed") && table.contains("precision"));
        assert!(r.roc_csv().lines().count() > 3);
        let dir = tempfile::tempdir().unwrap();
        r.write(dir.path(), "report").unwrap();
        for f in ["report.json", "report.txt", "report_roc.csv"] {
            assert!(dir.path().join(f).is_file());
        }
        assert!(evaluate_dataset(&[], &[]).is_err());
    }
}
