//! Detection matching and metrics, Ki-67 and TIL scores with clinical
//! cut-off bands, RMSE, per-patient aggregation and threshold tuning.

use std::collections::BTreeMap;
use std::fmt;

use crate::annotation::{CellAnnotation, CellClass, CellCounts};
use crate::density::DensityMap;
use crate::postprocess::{extract_channel, PostprocessConfig};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("score lists differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("no scores to compare")]
    Empty,
    #[error("image {0:?} is not mapped to a patient")]
    UnmappedImage(String),
    #[error("image {0:?} has predicted counts but no ground truth")]
    MissingTruth(String),
    #[error("matching radius must be positive, got {0}")]
    Radius(f64),
    #[error("threshold tuning needs a non-empty validation set")]
    EmptyValidation,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchConfig {
    /// A prediction may match a ground-truth cell only if strictly closer than this.
    pub radius: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self { radius: 6.0 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClassTally {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ClassTally {
    pub fn new(tp: u64, fp: u64, fn_: u64) -> Self {
        Self { tp, fp, fn_ }
    }
}

impl std::ops::AddAssign for ClassTally {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

/// An accepted ground-truth/prediction pair, by index into the inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchedPair {
    pub class: CellClass,
    pub gt: usize,
    pub pred: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchReport {
    /// Indexed by [`CellClass::channel`].
    pub tallies: [ClassTally; 3],
    pub pairs: Vec<MatchedPair>,
}

impl MatchReport {
    pub fn tally(&self, class: CellClass) -> ClassTally {
        self.tallies[class.channel()]
    }

    /// Pools the tallies of several reports; pairs are not carried over.
    pub fn merge_tallies(&mut self, other: &MatchReport) {
        for (a, b) in self.tallies.iter_mut().zip(other.tallies) {
            *a += b;
        }
    }
}

fn squared_distance(a: &CellAnnotation, b: &CellAnnotation) -> u64 {
    let dx = a.x.abs_diff(b.x) as u64;
    let dy = a.y.abs_diff(b.y) as u64;
    dx * dx + dy * dy
}

/// Per class, candidate pairs closer than the radius are accepted
/// greedily in order of (distance, gt index, pred index) whenever both
/// ends are still free.
pub fn match_detections(
    gt: &[CellAnnotation],
    pred: &[CellAnnotation],
    cfg: &MatchConfig,
) -> Result<MatchReport, EvalError> {
    if !(cfg.radius > 0.0) {
        return Err(EvalError::Radius(cfg.radius));
    }
    let mut report = MatchReport::default();
    for class in CellClass::ALL {
        let gi: Vec<usize> = (0..gt.len()).filter(|&i| gt[i].class == class).collect();
        let pi: Vec<usize> = (0..pred.len()).filter(|&j| pred[j].class == class).collect();
        let mut cands = Vec::new();
        for &i in &gi {
            for &j in &pi {
                let d2 = squared_distance(&gt[i], &pred[j]);
                if (d2 as f64).sqrt() < cfg.radius {
                    cands.push((d2, i, j));
                }
            }
        }
        cands.sort_unstable();
        let mut gt_used = vec![false; gt.len()];
        let mut pred_used = vec![false; pred.len()];
        let mut tp = 0;
        for (d2, i, j) in cands {
            if gt_used[i] || pred_used[j] {
                continue;
            }
            gt_used[i] = true;
            pred_used[j] = true;
            tp += 1;
            report.pairs.push(MatchedPair {
                class,
                gt: i,
                pred: j,
                distance: (d2 as f64).sqrt(),
            });
        }
        report.tallies[class.channel()] = ClassTally::new(tp, pi.len() as u64 - tp, gi.len() as u64 - tp);
    }
    Ok(report)
}

/// Precision, recall and F1. `degenerate` marks a zero denominator
/// somewhere, in which case the affected values are 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub degenerate: bool,
}

fn ratio(num: f64, den: f64) -> (f64, bool) {
    if den == 0.0 {
        (0.0, true)
    } else {
        (num / den, false)
    }
}

/// Harmonic mean of precision and recall.
pub fn f1_score(precision: f64, recall: f64) -> (f64, bool) {
    ratio(2.0 * precision * recall, precision + recall)
}

pub fn prf(t: ClassTally) -> Prf {
    let (precision, dp) = ratio(t.tp as f64, (t.tp + t.fp) as f64);
    let (recall, dr) = ratio(t.tp as f64, (t.tp + t.fn_) as f64);
    let (f1, df) = f1_score(precision, recall);
    Prf {
        precision,
        recall,
        f1,
        degenerate: dp || dr || df,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrfReport {
    /// Indexed by [`CellClass::channel`].
    pub per_class: [Prf; 3],
    /// From TP/FP/FN pooled over classes.
    pub micro: Prf,
}

pub fn compute_prf(report: &MatchReport) -> PrfReport {
    let mut pooled = ClassTally::default();
    for t in report.tallies {
        pooled += t;
    }
    PrfReport {
        per_class: report.tallies.map(prf),
        micro: prf(pooled),
    }
}

/// A ratio score with a flag for an empty denominator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Score {
    pub value: f64,
    pub degenerate: bool,
}

/// `pos / (pos + neg)`.
pub fn ki67_score(counts: &CellCounts) -> Score {
    let (value, degenerate) = ratio(
        counts.immunopositive as f64,
        (counts.immunopositive + counts.immunonegative) as f64,
    );
    Score { value, degenerate }
}

/// `lym / (lym + pos + neg)`.
pub fn til_score(counts: &CellCounts) -> Score {
    let (value, degenerate) = ratio(counts.lymphocyte as f64, counts.total() as f64);
    Score { value, degenerate }
}

/// Proliferation band: `[0, 0.16)`, `[0.16, 0.30]`, `(0.30, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Ki67Band {
    Low,
    Average,
    High,
}

/// Infiltration band: `[0, 0.10]`, `(0.10, 0.40)`, `[0.40, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TilBand {
    Low,
    Mid,
    High,
}

impl Ki67Band {
    pub fn classify(ki67: f64) -> Self {
        if ki67 < 0.16 {
            Ki67Band::Low
        } else if ki67 <= 0.30 {
            Ki67Band::Average
        } else {
            Ki67Band::High
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Ki67Band::Low => "low",
            Ki67Band::Average => "average",
            Ki67Band::High => "high",
        }
    }
}

impl TilBand {
    pub fn classify(til: f64) -> Self {
        if til <= 0.10 {
            TilBand::Low
        } else if til < 0.40 {
            TilBand::Mid
        } else {
            TilBand::High
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TilBand::Low => "low",
            TilBand::Mid => "mid",
            TilBand::High => "high",
        }
    }
}

impl fmt::Display for Ki67Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for TilBand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn classify_cutoffs(ki67: f64, til: f64) -> (Ki67Band, TilBand) {
    (Ki67Band::classify(ki67), TilBand::classify(til))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreReport {
    pub ki67: Score,
    pub til: Score,
    pub ki67_band: Ki67Band,
    pub til_band: TilBand,
}

impl ScoreReport {
    pub fn from_counts(counts: &CellCounts) -> Self {
        let ki67 = ki67_score(counts);
        let til = til_score(counts);
        let (ki67_band, til_band) = classify_cutoffs(ki67.value, til.value);
        Self {
            ki67,
            til,
            ki67_band,
            til_band,
        }
    }
}

pub fn rmse_scores(predicted: &[f64], truth: &[f64]) -> Result<f64, EvalError> {
    if predicted.len() != truth.len() {
        return Err(EvalError::LengthMismatch(predicted.len(), truth.len()));
    }
    if predicted.is_empty() {
        return Err(EvalError::Empty);
    }
    let sum: f64 = predicted.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((sum / predicted.len() as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientReport {
    pub patient: String,
    pub predicted_counts: CellCounts,
    pub truth_counts: CellCounts,
    pub predicted: ScoreReport,
    pub truth: ScoreReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientAggregate {
    /// Sorted by patient id.
    pub patients: Vec<PatientReport>,
    /// Fraction of patients whose predicted band equals the true band.
    pub ki67_accuracy: f64,
    pub til_accuracy: f64,
    pub ki67_rmse: f64,
    pub til_rmse: f64,
}

/// Sums counts per patient, scores each patient and compares bands.
pub fn aggregate_patient(
    image_to_patient: &BTreeMap<String, String>,
    predicted: &BTreeMap<String, CellCounts>,
    truth: &BTreeMap<String, CellCounts>,
) -> Result<PatientAggregate, EvalError> {
    let mut sums: BTreeMap<&str, (CellCounts, CellCounts)> = BTreeMap::new();
    for (image, t) in truth {
        let patient = image_to_patient
            .get(image)
            .ok_or_else(|| EvalError::UnmappedImage(image.clone()))?;
        let p = predicted.get(image).copied().unwrap_or_default();
        let e = sums.entry(patient.as_str()).or_default();
        e.0 += p;
        e.1 += *t;
    }
    if let Some(image) = predicted.keys().find(|k| !truth.contains_key(*k)) {
        return Err(EvalError::MissingTruth(image.clone()));
    }
    if sums.is_empty() {
        return Err(EvalError::Empty);
    }
    let patients: Vec<PatientReport> = sums
        .into_iter()
        .map(|(patient, (p, t))| PatientReport {
            patient: patient.to_string(),
            predicted_counts: p,
            truth_counts: t,
            predicted: ScoreReport::from_counts(&p),
            truth: ScoreReport::from_counts(&t),
        })
        .collect();
    let n = patients.len() as f64;
    let agree = |f: &dyn Fn(&PatientReport) -> bool| patients.iter().filter(|r| f(r)).count() as f64 / n;
    let ki67_accuracy = agree(&|r| r.predicted.ki67_band == r.truth.ki67_band);
    let til_accuracy = agree(&|r| r.predicted.til_band == r.truth.til_band);
    let column = |f: &dyn Fn(&ScoreReport) -> f64| -> (Vec<f64>, Vec<f64>) {
        (
            patients.iter().map(|r| f(&r.predicted)).collect(),
            patients.iter().map(|r| f(&r.truth)).collect(),
        )
    };
    let (kp, kt) = column(&|s| s.ki67.value);
    let (tp, tt) = column(&|s| s.til.value);
    Ok(PatientAggregate {
        ki67_rmse: rmse_scores(&kp, &kt)?,
        til_rmse: rmse_scores(&tp, &tt)?,
        ki67_accuracy,
        til_accuracy,
        patients,
    })
}

/// The swept thresholds `0, 5, …, 255`.
pub fn threshold_grid() -> Vec<f64> {
    (0..=255).step_by(5).map(f64::from).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneResult {
    /// Best threshold per class.
    pub thresholds: [f64; 3],
    /// F1 attained at the best threshold, per class.
    pub f1: [f64; 3],
    /// `(threshold, per-class pooled F1)` for every swept value.
    pub curve: Vec<(f64, [f64; 3])>,
}

/// Per-class pooled tallies over a validation set at one threshold.
pub fn tally_at_threshold(
    validation: &[(DensityMap, Vec<CellAnnotation>)],
    class: CellClass,
    tau: f64,
    match_cfg: &MatchConfig,
    post: &PostprocessConfig,
) -> Result<ClassTally, EvalError> {
    let mut total = ClassTally::default();
    for (map, gt) in validation {
        let pred: Vec<CellAnnotation> = extract_channel(&map.channel_grid(class), tau, post)
            .into_iter()
            .map(|(x, y, _)| CellAnnotation::new(x as u32, y as u32, class))
            .collect();
        let gt: Vec<CellAnnotation> = gt.iter().filter(|c| c.class == class).copied().collect();
        total += match_detections(&gt, &pred, match_cfg)?.tally(class);
    }
    Ok(total)
}

/// For each class independently, sweeps [`threshold_grid`] over the
/// predicted maps of a validation set and keeps the threshold with the
/// highest pooled F1, the lowest one on ties.
pub fn tune_thresholds(
    validation: &[(DensityMap, Vec<CellAnnotation>)],
    match_cfg: &MatchConfig,
    post: &PostprocessConfig,
) -> Result<TuneResult, EvalError> {
    if validation.is_empty() {
        return Err(EvalError::EmptyValidation);
    }
    let grid = threshold_grid();
    let mut curve: Vec<(f64, [f64; 3])> = grid.iter().map(|&t| (t, [0.0; 3])).collect();
    for class in CellClass::ALL {
        for (tau, f1s) in curve.iter_mut() {
            f1s[class.channel()] = prf(tally_at_threshold(validation, class, *tau, match_cfg, post)?).f1;
        }
    }
    let mut thresholds = [0.0; 3];
    let mut f1 = [f64::NEG_INFINITY; 3];
    for (tau, f1s) in &curve {
        for c in 0..3 {
            if f1s[c] > f1[c] {
                f1[c] = f1s[c];
                thresholds[c] = *tau;
            }
        }
    }
    Ok(TuneResult { thresholds, f1, curve })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(x: u32, y: u32, class: CellClass) -> CellAnnotation {
        CellAnnotation::new(x, y, class)
    }

    #[test]
    fn nearer_prediction_wins() {
        let gt = [cell(10, 10, CellClass::Immunopositive)];
        let pred = [cell(14, 10, CellClass::Immunopositive), cell(12, 10, CellClass::Immunopositive)];
        let r = match_detections(&gt, &pred, &MatchConfig::default()).unwrap();
        assert_eq!(r.tally(CellClass::Immunopositive), ClassTally::new(1, 1, 0));
        assert_eq!(r.pairs[0].pred, 1);
        assert_eq!(r.pairs[0].distance, 2.0);
    }

    #[test]
    fn classes_never_cross() {
        let gt = [cell(10, 10, CellClass::Immunopositive)];
        let pred = [cell(10, 10, CellClass::Immunonegative)];
        let r = match_detections(&gt, &pred, &MatchConfig::default()).unwrap();
        assert_eq!(r.tally(CellClass::Immunopositive), ClassTally::new(0, 0, 1));
        assert_eq!(r.tally(CellClass::Immunonegative), ClassTally::new(0, 1, 0));
    }

    #[test]
    fn radius_is_strict() {
        let gt = [cell(0, 0, CellClass::Lymphocyte)];
        let pred = [cell(6, 0, CellClass::Lymphocyte)];
        let r = match_detections(&gt, &pred, &MatchConfig::default()).unwrap();
        assert_eq!(r.tally(CellClass::Lymphocyte).tp, 0);
        assert!(match_detections(&gt, &pred, &MatchConfig { radius: 0.0 }).is_err());
    }

    #[test]
    fn prf_values() {
        let p = prf(ClassTally::new(2, 1, 2));
        assert!((p.precision - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(p.recall, 0.5);
        assert!((p.f1 - 4.0 / 7.0).abs() < 1e-12);
        assert!(!p.degenerate);
        let z = prf(ClassTally::default());
        assert_eq!((z.precision, z.recall, z.f1, z.degenerate), (0.0, 0.0, 0.0, true));
    }

    #[test]
    fn bands_at_boundaries() {
        assert_eq!(Ki67Band::classify(0.1599), Ki67Band::Low);
        assert_eq!(Ki67Band::classify(0.16), Ki67Band::Average);
        assert_eq!(Ki67Band::classify(0.30), Ki67Band::Average);
        assert_eq!(Ki67Band::classify(0.3001), Ki67Band::High);
        assert_eq!(TilBand::classify(0.10), TilBand::Low);
        assert_eq!(TilBand::classify(0.1001), TilBand::Mid);
        assert_eq!(TilBand::classify(0.3999), TilBand::Mid);
        assert_eq!(TilBand::classify(0.40), TilBand::High);
    }

    #[test]
    fn scores_degenerate_on_empty() {
        let s = ki67_score(&CellCounts::default());
        assert_eq!((s.value, s.degenerate), (0.0, true));
        let s = til_score(&CellCounts::new(0, 0, 3));
        assert_eq!((s.value, s.degenerate), (1.0, false));
    }

    #[test]
    fn rmse_basics() {
        assert_eq!(rmse_scores(&[0.3, 0.1], &[0.3, 0.1]).unwrap(), 0.0);
        assert!((rmse_scores(&[0.2], &[0.4]).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(rmse_scores(&[], &[]), Err(EvalError::Empty));
        assert_eq!(rmse_scores(&[1.0], &[]), Err(EvalError::LengthMismatch(1, 0)));
    }

    #[test]
    fn grid_has_52_values() {
        let g = threshold_grid();
        assert_eq!(g.len(), 52);
        assert_eq!((g[0], g[51]), (0.0, 255.0));
    }
}
