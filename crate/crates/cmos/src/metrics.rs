//! Evaluation metrics: 4-class segment accuracy, per-subject motion score
//! index (MSI) correlation, and binary abnormality detection with Cohen's
//! kappa.

use std::fmt;

use crate::data::{NUM_CLASSES, SEGMENTS_PER_SUBJECT};
use crate::error::{Error, Result};

/// Motion score index: mean of one subject's 16 segment scores on the
/// internal 0-3 scale. (The clinical 1-4 scale differs by +1, which leaves
/// the Pearson correlation unchanged.)
pub fn msi(scores: &[u8]) -> Result<f64> {
    if scores.len() != SEGMENTS_PER_SUBJECT {
        return Err(Error::InvalidArgument(format!(
            "MSI needs exactly {SEGMENTS_PER_SUBJECT} scores, got {}",
            scores.len()
        )));
    }
    Ok(scores.iter().map(|&s| s as f64).sum::<f64>() / scores.len() as f64)
}

/// Product-moment correlation. Errors on fewer than 2 points or zero
/// variance in either argument.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "pearson needs two equal-length series of >= 2 points, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate(
            "pearson input has zero variance".into(),
        ));
    }
    Ok(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// Collapses 0-3 motion scores to binary abnormality: 0 normal, 1,2,3 abnormal.
pub fn binary_collapse(scores: &[u8]) -> Vec<u8> {
    scores.iter().map(|&s| u8::from(s != 0)).collect()
}

/// Cohen's kappa for binary labels: `(p_o - p_e) / (1 - p_e)` with
/// marginal-product chance agreement; 0 by convention when `p_e == 1`.
pub fn cohen_kappa(pred: &[u8], truth: &[u8]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "kappa needs two equal nonempty label lists, got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    let n = pred.len() as f64;
    let mut agree = 0usize;
    let mut pred_pos = 0usize;
    let mut truth_pos = 0usize;
    for (&p, &t) in pred.iter().zip(truth) {
        if p == t {
            agree += 1;
        }
        pred_pos += (p != 0) as usize;
        truth_pos += (t != 0) as usize;
    }
    let po = agree as f64 / n;
    let pp = pred_pos as f64 / n;
    let tp = truth_pos as f64 / n;
    let pe = pp * tp + (1.0 - pp) * (1.0 - tp);
    if (1.0 - pe).abs() < 1e-15 {
        return Ok(0.0);
    }
    Ok((po - pe) / (1.0 - pe))
}

/// Row = truth, column = prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Confusion {
    pub classes: usize,
    pub counts: Vec<usize>,
}

impl Confusion {
    pub fn new(classes: usize) -> Confusion {
        Confusion {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_labels(pred: &[u8], truth: &[u8], classes: usize) -> Result<Confusion> {
        if pred.len() != truth.len() {
            return Err(Error::InvalidArgument(
                "confusion needs equal-length label lists".into(),
            ));
        }
        let mut c = Confusion::new(classes);
        for (&p, &t) in pred.iter().zip(truth) {
            if (p as usize) >= classes || (t as usize) >= classes {
                return Err(Error::InvalidArgument(format!(
                    "label out of range for {classes} classes: pred {p}, truth {t}"
                )));
            }
            c.counts[t as usize * classes + p as usize] += 1;
        }
        Ok(c)
    }

    pub fn get(&self, truth: usize, pred: usize) -> usize {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Accuracy as trace over total.
    pub fn accuracy(&self) -> f64 {
        let trace: usize = (0..self.classes).map(|i| self.get(i, i)).sum();
        trace as f64 / self.total() as f64
    }

    pub fn row_sum(&self, truth: usize) -> usize {
        (0..self.classes).map(|p| self.get(truth, p)).sum()
    }
}

impl fmt::Display for Confusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "truth\\pred {}", (0..self.classes).map(|c| format!("{c:>6}")).collect::<String>())?;
        for t in 0..self.classes {
            write!(f, "{t:>10} ")?;
            for p in 0..self.classes {
                write!(f, "{:>6}", self.get(t, p))?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Everything one evaluation run reports.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    /// 4-class segment accuracy.
    pub acc_ms: f64,
    /// Pearson correlation of predicted vs true MSI over subjects; undefined
    /// when either side has no variance.
    pub rho_msi: Option<f64>,
    /// Binary abnormality accuracy.
    pub acc_ad: f64,
    /// Binary abnormality Cohen's kappa.
    pub kappa_ad: f64,
    pub confusion_4: Confusion,
    pub confusion_2: Confusion,
    pub n_subjects: usize,
    pub n_segments: usize,
    /// `(fold index, segment accuracy, subject count)` per fold.
    pub per_fold: Vec<(usize, f64, usize)>,
}

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        let ok_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !ok_unit(self.acc_ms) || !ok_unit(self.acc_ad) {
            return Err(Error::InvalidArgument("accuracy out of [0,1]".into()));
        }
        if !(-1.0..=1.0).contains(&self.kappa_ad) {
            return Err(Error::InvalidArgument("kappa out of [-1,1]".into()));
        }
        if let Some(r) = self.rho_msi {
            if !(-1.0..=1.0).contains(&r) {
                return Err(Error::InvalidArgument("rho out of [-1,1]".into()));
            }
        }
        Ok(())
    }

    /// Line-oriented `key=value` form; `rho_msi` is `nan` when undefined.
    pub fn to_key_values(&self) -> String {
        format!(
            "acc_ms={:.6}\nrho_msi={}\nacc_ad={:.6}\nkappa_ad={:.6}\nn_subjects={}\nn_segments={}\n",
            self.acc_ms,
            self.rho_msi
                .map(|r| format!("{r:.6}"))
                .unwrap_or_else(|| "nan".into()),
            self.acc_ad,
            self.kappa_ad,
            self.n_subjects,
            self.n_segments
        )
    }

    /// Human-readable table, optionally with the per-fold breakdown.
    pub fn to_table(&self, with_folds: bool) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "segments          {:>8}\nsubjects          {:>8}\n",
            self.n_segments, self.n_subjects
        ));
        out.push_str(&format!("4-class accuracy  {:>8.4}\n", self.acc_ms));
        out.push_str(&format!(
            "MSI correlation   {:>8}\n",
            self.rho_msi
                .map(|r| format!("{r:.4}"))
                .unwrap_or_else(|| "undefined".into())
        ));
        out.push_str(&format!("binary accuracy   {:>8.4}\n", self.acc_ad));
        out.push_str(&format!("binary kappa      {:>8.4}\n", self.kappa_ad));
        out.push_str("\n4-class confusion (rows = truth):\n");
        out.push_str(&self.confusion_4.to_string());
        out.push_str("\nbinary confusion (rows = truth):\n");
        out.push_str(&self.confusion_2.to_string());
        if with_folds && !self.per_fold.is_empty() {
            out.push_str("\nper-fold breakdown:\n");
            for (fold, acc, subjects) in &self.per_fold {
                out.push_str(&format!(
                    "  fold {fold}: acc_ms {acc:.4} over {subjects} subjects\n"
                ));
            }
        }
        out
    }
}

/// Builds the full report from pooled per-subject predictions:
/// `(fold, subject predicted scores, subject true scores)` per subject.
pub fn report_from_predictions(
    subjects: &[(usize, Vec<u8>, Vec<u8>)],
) -> Result<MetricsReport> {
    if subjects.is_empty() {
        return Err(Error::InvalidArgument("no subjects to evaluate".into()));
    }
    let mut pred_all = Vec::new();
    let mut truth_all = Vec::new();
    let mut msi_pred = Vec::new();
    let mut msi_truth = Vec::new();
    for (_, pred, truth) in subjects {
        pred_all.extend_from_slice(pred);
        truth_all.extend_from_slice(truth);
        msi_pred.push(msi(pred)?);
        msi_truth.push(msi(truth)?);
    }
    let confusion_4 = Confusion::from_labels(&pred_all, &truth_all, NUM_CLASSES)?;
    let pred_bin = binary_collapse(&pred_all);
    let truth_bin = binary_collapse(&truth_all);
    let confusion_2 = Confusion::from_labels(&pred_bin, &truth_bin, 2)?;
    let rho_msi = if msi_pred.len() < 2 {
        None
    } else {
        match pearson(&msi_pred, &msi_truth) {
            Ok(r) => Some(r),
            Err(Error::Degenerate(_)) => None,
            Err(e) => return Err(e),
        }
    };
    let mut per_fold = Vec::new();
    let max_fold = subjects.iter().map(|(f, _, _)| *f).max().unwrap_or(0);
    for fold in 0..=max_fold {
        let members: Vec<&(usize, Vec<u8>, Vec<u8>)> =
            subjects.iter().filter(|(f, _, _)| *f == fold).collect();
        if members.is_empty() {
            continue;
        }
        let mut correct = 0usize;
        let mut total = 0usize;
        for (_, pred, truth) in members.iter() {
            correct += pred.iter().zip(truth).filter(|(a, b)| a == b).count();
            total += pred.len();
        }
        per_fold.push((fold, correct as f64 / total as f64, members.len()));
    }
    let report = MetricsReport {
        acc_ms: confusion_4.accuracy(),
        rho_msi,
        acc_ad: confusion_2.accuracy(),
        kappa_ad: cohen_kappa(&pred_bin, &truth_bin)?,
        confusion_4,
        confusion_2,
        n_subjects: subjects.len(),
        n_segments: pred_all.len(),
        per_fold,
    };
    report.validate()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn msi_examples() {
        assert_eq!(msi(&[0; 16]).unwrap(), 0.0);
        let mut half = vec![0u8; 8];
        half.extend(vec![2u8; 8]);
        assert_eq!(msi(&half).unwrap(), 1.0);
        // Scores summing to 20 give 20/16 = 1.25.
        let mut v = vec![1u8; 16];
        v[0] = 2;
        v[1] = 2;
        v[2] = 2;
        v[3] = 2;
        assert_eq!(v.iter().map(|&x| x as u32).sum::<u32>(), 20);
        assert_eq!(msi(&v).unwrap(), 1.25);
        assert!(msi(&[0; 15]).is_err());
    }

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y2: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        assert!((pearson(&x, &y2).unwrap() - 1.0).abs() < 1e-12);
        let yn: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &yn).unwrap() + 1.0).abs() < 1e-12);
        // Hand evaluation: cov = 4, var_x = var_y = 5, r = 0.8.
        let y = [1.0, 3.0, 2.0, 4.0];
        assert!((pearson(&x, &y).unwrap() - 0.8).abs() < 1e-12);
        // Constant input is degenerate.
        assert!(matches!(
            pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn pearson_is_invariant_under_common_affine_rescaling() {
        let x = [0.5, 1.25, 0.0, 2.0, 1.0];
        let y = [1.0, 0.75, 0.25, 1.5, 1.25];
        let r = pearson(&x, &y).unwrap();
        // Report both MSI axes on a 1-4 style scale instead of 0-3.
        let xs: Vec<f64> = x.iter().map(|v| v + 1.0).collect();
        let ys: Vec<f64> = y.iter().map(|v| v + 1.0).collect();
        assert!((pearson(&xs, &ys).unwrap() - r).abs() < 1e-12);
        let xs: Vec<f64> = x.iter().map(|v| 3.0 * v + 2.0).collect();
        let ys: Vec<f64> = y.iter().map(|v| 3.0 * v + 2.0).collect();
        assert!((pearson(&xs, &ys).unwrap() - r).abs() < 1e-12);
    }

    #[test]
    fn binary_collapse_examples() {
        assert_eq!(binary_collapse(&[0, 0]), vec![0, 0]);
        assert_eq!(binary_collapse(&[1, 2, 3]), vec![1, 1, 1]);
        assert_eq!(binary_collapse(&[0, 3, 1, 0]), vec![0, 1, 1, 0]);
    }

    #[test]
    fn kappa_perfect_agreement() {
        let a = [0u8, 1, 0, 1, 1, 0];
        assert!((cohen_kappa(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kappa_hand_computed_confusion() {
        // Confusion [[40,10],[5,45]] (rows = truth): p_o = 0.85, p_e = 0.5.
        let mut pred = Vec::new();
        let mut truth = Vec::new();
        for (t, p, n) in [(0u8, 0u8, 40), (0, 1, 10), (1, 0, 5), (1, 1, 45)] {
            truth.extend(std::iter::repeat(t).take(n));
            pred.extend(std::iter::repeat(p).take(n));
        }
        let k = cohen_kappa(&pred, &truth).unwrap();
        assert!((k - 0.70).abs() < 1e-12, "kappa {k}");
    }

    #[test]
    fn kappa_of_independent_predictions_is_near_zero() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(123);
        let n = 10_000;
        let truth: Vec<u8> = (0..n).map(|_| u8::from(rng.gen_bool(0.3))).collect();
        let pred: Vec<u8> = (0..n).map(|_| u8::from(rng.gen_bool(0.6))).collect();
        let k = cohen_kappa(&pred, &truth).unwrap();
        assert!(k.abs() < 0.1, "kappa {k}");
    }

    #[test]
    fn kappa_symmetry_and_label_swap_invariance() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let n = rng.gen_range(4..40);
            let a: Vec<u8> = (0..n).map(|_| u8::from(rng.gen_bool(0.5))).collect();
            let b: Vec<u8> = (0..n).map(|_| u8::from(rng.gen_bool(0.4))).collect();
            let k_ab = cohen_kappa(&a, &b).unwrap();
            let k_ba = cohen_kappa(&b, &a).unwrap();
            assert!((k_ab - k_ba).abs() < 1e-12);
            let swap = |v: &[u8]| v.iter().map(|&x| 1 - x).collect::<Vec<u8>>();
            let k_swapped = cohen_kappa(&swap(&a), &swap(&b)).unwrap();
            assert!((k_ab - k_swapped).abs() < 1e-12);
        }
    }

    #[test]
    fn kappa_degenerate_chance_agreement() {
        // Both raters constant and identical: p_e == 1, convention 0.
        assert_eq!(cohen_kappa(&[1, 1, 1], &[1, 1, 1]).unwrap(), 0.0);
    }

    #[test]
    fn confusion_accuracy_is_trace_over_total() {
        let pred = [0u8, 1, 2, 3, 0, 1, 1, 2];
        let truth = [0u8, 1, 2, 3, 1, 1, 0, 3];
        let c = Confusion::from_labels(&pred, &truth, 4).unwrap();
        assert_eq!(c.total(), 8);
        let trace: usize = (0..4).map(|i| c.get(i, i)).sum();
        assert_eq!(trace, 5);
        assert!((c.accuracy() - 5.0 / 8.0).abs() < 1e-12);
        // Row sums equal class supports.
        for t in 0..4u8 {
            let support = truth.iter().filter(|&&x| x == t).count();
            assert_eq!(c.row_sum(t as usize), support);
        }
    }

    #[test]
    fn perfect_predictor_report() {
        // Subjects with distinct score mixes so MSI varies across subjects.
        let subjects: Vec<(usize, Vec<u8>, Vec<u8>)> = (0..4usize)
            .map(|i| {
                let scores: Vec<u8> = (0..16)
                    .map(|k| if k < 2 * i { (i % 3) as u8 + 1 } else { 0 })
                    .collect();
                (i % 2, scores.clone(), scores)
            })
            .collect();
        let report = report_from_predictions(&subjects).unwrap();
        assert_eq!(report.acc_ms, 1.0);
        assert!((report.rho_msi.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(report.acc_ad, 1.0);
        assert_eq!(report.kappa_ad, 1.0);
        assert_eq!(report.n_subjects, 4);
        assert_eq!(report.n_segments, 64);
        assert_eq!(report.per_fold.len(), 2);
    }

    #[test]
    fn constant_predictor_on_all_normal_data_has_undefined_rho() {
        let subjects: Vec<(usize, Vec<u8>, Vec<u8>)> =
            (0..3).map(|_| (0, vec![0u8; 16], vec![0u8; 16])).collect();
        let report = report_from_predictions(&subjects).unwrap();
        assert_eq!(report.acc_ms, 1.0);
        assert_eq!(report.rho_msi, None);
        assert!(report.to_key_values().contains("rho_msi=nan"));
        assert!(report.to_table(false).contains("undefined"));
    }

    #[test]
    fn report_keys_are_exactly_the_schema() {
        let subjects = vec![(0usize, vec![0u8; 16], {
            let mut t = vec![0u8; 16];
            t[0] = 1;
            t
        })];
        let report = report_from_predictions(&subjects).unwrap();
        let keys: Vec<String> = report
            .to_key_values()
            .lines()
            .map(|l| l.split('=').next().unwrap().to_string())
            .collect();
        assert_eq!(
            keys,
            ["acc_ms", "rho_msi", "acc_ad", "kappa_ad", "n_subjects", "n_segments"]
        );
    }
}
