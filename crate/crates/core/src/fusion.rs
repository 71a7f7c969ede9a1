//! Decision fusion and classification metrics.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{Label, Severity};

/// How the two stage probabilities are combined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum FusionRule {
    Mean,
    Max,
    /// `w·p1 + (1 − w)·p2` with `w` fit on validation data.
    Weighted(f64),
}

impl Default for FusionRule {
    fn default() -> Self {
        FusionRule::Mean
    }
}

impl fmt::Display for FusionRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FusionRule::Mean => f.write_str("mean"),
            FusionRule::Max => f.write_str("max"),
            FusionRule::Weighted(w) => write!(f, "weighted:{w}"),
        }
    }
}

impl FromStr for FusionRule {
    type Err = Error;

    /// Accepts `mean`, `max`, `learned` (weight 0.5 until fit) and `weighted:W`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(FusionRule::Mean),
            "max" => Ok(FusionRule::Max),
            "learned" => Ok(FusionRule::Weighted(0.5)),
            _ => {
                let w = s
                    .strip_prefix("weighted:")
                    .and_then(|w| w.parse::<f64>().ok())
                    .filter(|w| (0.0..=1.0).contains(w))
                    .ok_or_else(|| Error::Config(format!("unknown fusion rule {s:?}")))?;
                Ok(FusionRule::Weighted(w))
            }
        }
    }
}

impl FusionRule {
    pub fn fuse(self, p1: f64, p2: f64) -> f64 {
        match self {
            FusionRule::Mean => (p1 + p2) / 2.0,
            FusionRule::Max => p1.max(p2),
            FusionRule::Weighted(w) => w * p1 + (1.0 - w) * p2,
        }
    }
}

/// Unweighted mean of the two stage probabilities.
pub fn fuse(p1: f64, p2: f64) -> f64 {
    FusionRule::Mean.fuse(p1, p2)
}

/// Grid-searches the stage-1 weight in steps of 0.05 for the best fused macro F1.
/// Ties go to the weight nearest 0.5.
pub fn fit_fusion_weight(p1: &[f64], p2: &[f64], truths: &[Label]) -> Result<f64> {
    if p1.len() != p2.len() || p1.len() != truths.len() {
        return Err(Error::Data("fusion inputs differ in length".into()));
    }
    let truth_idx: Vec<usize> = truths.iter().map(|l| l.index()).collect();
    let mut best: (f64, f64) = (f64::NEG_INFINITY, 0.5);
    for step in 0..=20 {
        let w = step as f64 / 20.0;
        let preds: Vec<usize> =
            p1.iter().zip(p2).map(|(&a, &b)| Label::from_probability(w * a + (1.0 - w) * b).index()).collect();
        let score = macro_f1(&preds, &truth_idx, 2)?;
        let closer = (w - 0.5).abs() < (best.1 - 0.5).abs();
        if score > best.0 || (score == best.0 && closer) {
            best = (score, w);
        }
    }
    Ok(best.1)
}

/// Final per-volume decision with the probabilities behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumePrediction {
    pub volume_id: String,
    pub p_stage1: f64,
    pub p_stage2: f64,
    pub p_fused: f64,
    pub label_pred: Label,
    pub severity_pred: Option<Severity>,
}

impl VolumePrediction {
    pub fn new(volume_id: &str, p_stage1: f64, p_stage2: f64, rule: FusionRule, severity: Option<Severity>) -> Self {
        let p_fused = rule.fuse(p_stage1, p_stage2);
        Self {
            volume_id: volume_id.to_string(),
            p_stage1,
            p_stage2,
            p_fused,
            label_pred: Label::from_probability(p_fused),
            severity_pred: severity,
        }
    }
}

/// Confusion counts indexed `[truth][prediction]`.
pub fn confusion_matrix(preds: &[usize], truths: &[usize], classes: usize) -> Result<Vec<Vec<usize>>> {
    if preds.len() != truths.len() {
        return Err(Error::Data(format!("{} predictions for {} truths", preds.len(), truths.len())));
    }
    if preds.is_empty() {
        return Err(Error::Data("no predictions to score".into()));
    }
    let mut m = vec![vec![0usize; classes]; classes];
    for (&p, &t) in preds.iter().zip(truths) {
        if p >= classes || t >= classes {
            return Err(Error::Data(format!("class index outside 0..{classes}")));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub confusion: Vec<Vec<usize>>,
}

impl MetricsReport {
    /// Scores class indices over the declared names, absent classes included.
    pub fn compute(preds: &[usize], truths: &[usize], class_names: &[&str]) -> Result<Self> {
        let k = class_names.len();
        let confusion = confusion_matrix(preds, truths, k)?;
        let per_class: Vec<ClassMetrics> = (0..k)
            .map(|c| {
                let tp = confusion[c][c];
                let predicted: usize = (0..k).map(|t| confusion[t][c]).sum();
                let support: usize = confusion[c].iter().sum();
                let precision = ratio(tp, predicted);
                let recall = ratio(tp, support);
                let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
                ClassMetrics { class: class_names[c].to_string(), precision, recall, f1, support }
            })
            .collect();
        let macro_f1 = per_class.iter().map(|c| c.f1).sum::<f64>() / k as f64;
        let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
        Ok(Self { per_class, macro_f1, accuracy: correct as f64 / preds.len() as f64, confusion })
    }
}

/// Macro F1 over classes `0..classes`.
pub fn macro_f1(preds: &[usize], truths: &[usize], classes: usize) -> Result<f64> {
    let names: Vec<String> = (0..classes).map(|c| c.to_string()).collect();
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    Ok(MetricsReport::compute(preds, truths, &refs)?.macro_f1)
}

/// Ground truth for one volume.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VolumeTruth {
    pub label: Label,
    pub severity: Option<Severity>,
}

/// Reports for each head; severity only when covid volumes carry severity labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub stage1: MetricsReport,
    pub stage2: MetricsReport,
    pub fused: MetricsReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub severity: Option<MetricsReport>,
}

const LABEL_NAMES: [&str; 2] = ["non_covid", "covid"];
const SEVERITY_NAMES: [&str; 4] = ["mild", "moderate", "severe", "critical"];

/// Scores predictions against truths paired by position.
pub fn evaluate(predictions: &[VolumePrediction], truths: &[VolumeTruth]) -> Result<Evaluation> {
    if predictions.len() != truths.len() {
        return Err(Error::Data(format!("{} predictions for {} truths", predictions.len(), truths.len())));
    }
    let truth: Vec<usize> = truths.iter().map(|t| t.label.index()).collect();
    let head = |f: &dyn Fn(&VolumePrediction) -> usize| -> Result<MetricsReport> {
        let preds: Vec<usize> = predictions.iter().map(f).collect();
        MetricsReport::compute(&preds, &truth, &LABEL_NAMES)
    };
    let stage1 = head(&|p| Label::from_probability(p.p_stage1).index())?;
    let stage2 = head(&|p| Label::from_probability(p.p_stage2).index())?;
    let fused = head(&|p| p.label_pred.index())?;

    let mut sev_preds = Vec::new();
    let mut sev_truths = Vec::new();
    // Without a severity model no volume carries a grade, and the head is not scored.
    let graded = predictions.iter().any(|p| p.severity_pred.is_some());
    for (p, t) in predictions.iter().zip(truths).filter(|_| graded) {
        if let (Label::Covid, Some(s)) = (t.label, t.severity) {
            let pred = p.severity_pred.ok_or_else(|| {
                Error::Data(format!("volume {} has a severity label but no severity prediction", p.volume_id))
            })?;
            sev_preds.push(pred.index());
            sev_truths.push(s.index());
        }
    }
    let severity = if sev_truths.is_empty() {
        None
    } else {
        Some(MetricsReport::compute(&sev_preds, &sev_truths, &SEVERITY_NAMES)?)
    };
    Ok(Evaluation { stage1, stage2, fused, severity })
}

impl Evaluation {
    /// Plain-text macro F1 table.
    pub fn table(&self) -> String {
        let mut rows = vec![("stage1", &self.stage1), ("stage2", &self.stage2), ("fused", &self.fused)];
        if let Some(s) = &self.severity {
            rows.push(("severity", s));
        }
        let mut out = format!("{:<10}{:>10}{:>10}\n", "head", "macro_f1", "accuracy");
        for (name, r) in rows {
            out.push_str(&format!("{name:<10}{:>10.4}{:>10.4}\n", r.macro_f1, r.accuracy));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn fuse_examples() {
        assert!((fuse(0.9, 0.7) - 0.8).abs() < 1e-15);
        assert_eq!(Label::from_probability(fuse(0.9, 0.7)), Label::Covid);
        assert_eq!(Label::from_probability(fuse(0.5, 0.5)), Label::Covid);
        assert_eq!(Label::from_probability(fuse(0.2, 0.2)), Label::NonCovid);
    }

    #[test]
    fn rule_parsing() {
        assert_eq!("mean".parse::<FusionRule>().unwrap(), FusionRule::Mean);
        assert_eq!("weighted:0.25".parse::<FusionRule>().unwrap(), FusionRule::Weighted(0.25));
        assert!("weighted:1.5".parse::<FusionRule>().is_err());
        assert!("vote".parse::<FusionRule>().is_err());
    }

    #[test]
    fn macro_f1_examples() {
        assert_eq!(macro_f1(&[0, 1, 1], &[0, 1, 1], 2).unwrap(), 1.0);
        let m = macro_f1(&[1, 0, 0, 0], &[1, 1, 0, 0], 2).unwrap();
        assert!((m - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-12);
        let m = macro_f1(&[0, 0, 0, 0], &[1, 1, 0, 0], 2).unwrap();
        assert!((m - 1.0 / 3.0).abs() < 1e-12);
        assert!(macro_f1(&[], &[], 2).is_err());
        assert!(macro_f1(&[0], &[0, 1], 2).is_err());
    }

    #[test]
    fn severity_report_is_optional() {
        let preds = vec![
            VolumePrediction::new("a", 0.9, 0.8, FusionRule::Mean, Some(Severity::Mild)),
            VolumePrediction::new("b", 0.1, 0.3, FusionRule::Mean, None),
        ];
        let truths = vec![
            VolumeTruth { label: Label::Covid, severity: None },
            VolumeTruth { label: Label::NonCovid, severity: None },
        ];
        let e = evaluate(&preds, &truths).unwrap();
        assert!(e.severity.is_none());
        assert_eq!(e.fused.macro_f1, 1.0);
        let truths = vec![
            VolumeTruth { label: Label::Covid, severity: Some(Severity::Mild) },
            VolumeTruth { label: Label::NonCovid, severity: None },
        ];
        let e = evaluate(&preds, &truths).unwrap();
        assert_eq!(e.severity.unwrap().accuracy, 1.0);

        let mut ungraded = preds.clone();
        ungraded[0].severity_pred = None;
        assert!(evaluate(&ungraded, &truths).unwrap().severity.is_none());
        let truths = vec![
            VolumeTruth { label: Label::Covid, severity: Some(Severity::Mild) },
            VolumeTruth { label: Label::Covid, severity: Some(Severity::Severe) },
        ];
        assert!(evaluate(&preds, &truths).is_err());
    }

    #[test]
    fn learned_weight_prefers_the_informative_stage() {
        let truths = [Label::Covid, Label::Covid, Label::NonCovid, Label::NonCovid];
        let p1 = [0.9, 0.8, 0.1, 0.2];
        let p2 = [0.1, 0.2, 0.9, 0.8];
        assert_eq!(fit_fusion_weight(&p1, &p2, &truths).unwrap(), 0.55);
        let w = fit_fusion_weight(&p1, &p1, &truths).unwrap();
        assert_eq!(w, 0.5);
    }

    proptest! {
        #[test]
        fn macro_f1_bounded_and_relabel_invariant(
            pairs in prop::collection::vec((0usize..4, 0usize..4), 1..60),
            perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle(),
        ) {
            let (p, t): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let m = macro_f1(&p, &t, 4).unwrap();
            prop_assert!((0.0..=1.0).contains(&m));
            let pp: Vec<usize> = p.iter().map(|&c| perm[c]).collect();
            let tt: Vec<usize> = t.iter().map(|&c| perm[c]).collect();
            prop_assert!((macro_f1(&pp, &tt, 4).unwrap() - m).abs() < 1e-12);
            let all_present = (0..4).all(|c| t.contains(&c));
            if all_present {
                prop_assert_eq!(m == 1.0, p == t);
            }
        }

        #[test]
        fn fusion_symmetric_monotone_and_agreeing(a in 0.0f64..=1.0, b in 0.0f64..=1.0, d in 0.0f64..0.5) {
            for rule in [FusionRule::Mean, FusionRule::Max] {
                prop_assert_eq!(rule.fuse(a, b), rule.fuse(b, a));
                prop_assert!(rule.fuse((a + d).min(1.0), b) >= rule.fuse(a, b));
                let f = rule.fuse(a, b);
                prop_assert!((0.0..=1.0).contains(&f));
                if a >= 0.5 && b >= 0.5 {
                    prop_assert_eq!(Label::from_probability(f), Label::Covid);
                }
                if a < 0.5 && b < 0.5 {
                    prop_assert_eq!(Label::from_probability(f), Label::NonCovid);
                }
            }
        }
    }
}
