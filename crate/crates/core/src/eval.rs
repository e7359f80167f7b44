//! Candidate ranking, macro-averaged metrics and the most-frequent baseline.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{Dictionary, SentenceSample};
use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::model::{DualPathModel, Tokenizers};

/// Anything that assigns a score to each candidate long form of a sample.
pub trait CandidateScorer: Sync {
    /// One score per entry of `candidates`, in the same order.
    fn score(&self, sample: &SentenceSample, candidates: &[String]) -> Result<Vec<f64>>;
}

/// Scores candidates with the trained classifier (one forward pass each).
pub struct ModelScorer<'a> {
    pub model: &'a DualPathModel,
    pub tokenizers: &'a Tokenizers,
}

impl CandidateScorer for ModelScorer<'_> {
    fn score(&self, sample: &SentenceSample, candidates: &[String]) -> Result<Vec<f64>> {
        candidates
            .iter()
            .map(|lf| {
                let x = self.tokenizers.encode(&sample.tokens, sample.acronym_index, lf, 0)?;
                self.model.predict_proba(&x)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub prediction: String,
    pub scores: BTreeMap<String, f64>,
}

/// Index of the largest score; the earliest index wins ties.
pub fn argmax(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

pub fn predict(scorer: &dyn CandidateScorer, sample: &SentenceSample, dict: &Dictionary) -> Result<PredictionRecord> {
    let acronym = sample
        .tokens
        .get(sample.acronym_index)
        .ok_or_else(|| Error::invalid("sample", format!("{}: acronym_index out of range", sample.id)))?;
    let candidates = dict
        .candidates(acronym)
        .ok_or_else(|| Error::UnknownAcronym(acronym.clone()))?;
    let scores = scorer.score(sample, candidates)?;
    if scores.len() != candidates.len() {
        return Err(Error::DimensionMismatch {
            expected: candidates.len(),
            actual: scores.len(),
        });
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score {s} for sample {}", sample.id)));
    }
    let best = argmax(&scores).expect("dictionary entries are non-empty");
    Ok(PredictionRecord {
        id: sample.id.clone(),
        prediction: candidates[best].clone(),
        scores: candidates.iter().cloned().zip(scores).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub n_classes: usize,
    pub per_class: Vec<ClassMetrics>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Macro precision/recall over the union of gold and predicted labels; macro
/// F1 is the harmonic mean of the two macro averages.
pub fn macro_metrics<S: AsRef<str>>(gold: &[S], pred: &[S]) -> Result<MetricsReport> {
    macro_metrics_over(gold, pred, std::iter::empty::<&str>())
}

/// As [`macro_metrics`], with `extra` labels added to the class set (for
/// example every long form in the dictionary).
pub fn macro_metrics_over<S, E, I>(gold: &[S], pred: &[S], extra: I) -> Result<MetricsReport>
where
    S: AsRef<str>,
    E: AsRef<str>,
    I: IntoIterator<Item = E>,
{
    if gold.len() != pred.len() {
        return Err(Error::DimensionMismatch {
            expected: gold.len(),
            actual: pred.len(),
        });
    }
    if gold.is_empty() {
        return Err(Error::invalid("metrics", "no labels to score"));
    }
    let mut classes: BTreeSet<String> = extra.into_iter().map(|e| e.as_ref().to_owned()).collect();
    classes.extend(gold.iter().chain(pred).map(|s| s.as_ref().to_owned()));

    let mut counts: HashMap<&str, [u64; 3]> = HashMap::new();
    for (g, p) in gold.iter().zip(pred) {
        let (g, p) = (g.as_ref(), p.as_ref());
        if g == p {
            counts.entry(g).or_default()[0] += 1;
        } else {
            counts.entry(p).or_default()[1] += 1;
            counts.entry(g).or_default()[2] += 1;
        }
    }
    let per_class: Vec<ClassMetrics> = classes
        .into_iter()
        .map(|label| {
            let [tp, fp, fn_] = counts.get(label.as_str()).copied().unwrap_or_default();
            let precision = ratio(tp, tp + fp);
            let recall = ratio(tp, tp + fn_);
            ClassMetrics {
                label,
                precision,
                recall,
                f1: harmonic(precision, recall),
                tp,
                fp,
                fn_,
            }
        })
        .collect();
    let n = per_class.len();
    let macro_precision = per_class.iter().map(|c| c.precision).sum::<f64>() / n as f64;
    let macro_recall = per_class.iter().map(|c| c.recall).sum::<f64>() / n as f64;
    Ok(MetricsReport {
        macro_precision,
        macro_recall,
        macro_f1: harmonic(macro_precision, macro_recall),
        n_classes: n,
        per_class,
    })
}

/// Predicts each acronym's most frequent training long form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfBaseline {
    /// Gold counts per acronym, aligned with the dictionary's candidates.
    pub counts: BTreeMap<String, Vec<u64>>,
}

/// Count gold long forms per acronym. Samples without gold, or whose gold is
/// not a dictionary candidate, are ignored.
pub fn mf_baseline(train: &[SentenceSample], dict: &Dictionary) -> MfBaseline {
    let mut counts: BTreeMap<String, Vec<u64>> = BTreeMap::new();
    for s in train {
        let (Some(acr), Some(gold)) = (s.tokens.get(s.acronym_index), s.long_form.as_ref()) else {
            continue;
        };
        let Some(cands) = dict.candidates(acr) else { continue };
        if let Some(i) = cands.iter().position(|c| c == gold) {
            counts.entry(acr.clone()).or_insert_with(|| vec![0; cands.len()])[i] += 1;
        }
    }
    MfBaseline { counts }
}

impl CandidateScorer for MfBaseline {
    /// Add-one smoothed relative frequency, so scores stay in (0, 1) and
    /// keep the order of the raw counts.
    fn score(&self, sample: &SentenceSample, candidates: &[String]) -> Result<Vec<f64>> {
        let k = candidates.len() as f64;
        let counts = self.counts.get(sample.acronym()).filter(|c| c.len() == candidates.len());
        let total: u64 = counts.map_or(0, |c| c.iter().sum());
        Ok((0..candidates.len())
            .map(|i| (counts.map_or(0, |c| c[i]) as f64 + 1.0) / (total as f64 + k))
            .collect())
    }
}

/// Which labels enter the macro average.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassSet {
    /// Gold and predicted labels of the evaluated split.
    #[default]
    Union,
    /// Additionally every long form in the dictionary.
    Dictionary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub predictions: Vec<PredictionRecord>,
}

/// Predict every sample (in parallel when requested) and score against gold.
pub fn evaluate(
    scorer: &dyn CandidateScorer,
    samples: &[SentenceSample],
    dict: &Dictionary,
    class_set: ClassSet,
    mode: ExecMode,
) -> Result<Evaluation> {
    for s in samples {
        if s.long_form.is_none() {
            return Err(Error::invalid("sample", format!("{}: missing gold long form", s.id)));
        }
    }
    let predictions = predict_all(scorer, samples, dict, mode)?;
    let gold: Vec<&str> = samples.iter().map(|s| s.long_form.as_deref().unwrap_or_default()).collect();
    let pred: Vec<&str> = predictions.iter().map(|p| p.prediction.as_str()).collect();
    let report = match class_set {
        ClassSet::Union => macro_metrics(&gold, &pred)?,
        ClassSet::Dictionary => macro_metrics_over(&gold, &pred, dict.iter().flat_map(|(_, lfs)| lfs))?,
    };
    Ok(Evaluation { report, predictions })
}

/// Predictions for samples that may lack gold labels, in input order.
pub fn predict_all(
    scorer: &dyn CandidateScorer,
    samples: &[SentenceSample],
    dict: &Dictionary,
    mode: ExecMode,
) -> Result<Vec<PredictionRecord>> {
    exec::map(mode, samples, |_, s| predict(scorer, s, dict)).into_iter().collect()
}

pub fn predictions_to_json(records: &[PredictionRecord]) -> String {
    let mut s = serde_json::to_string_pretty(records).expect("records serialize");
    s.push('\n');
    s
}

/// One line of a system comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub system: String,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

impl ComparisonRow {
    pub fn new(system: impl Into<String>, r: &MetricsReport) -> Self {
        Self {
            system: system.into(),
            macro_precision: r.macro_precision,
            macro_recall: r.macro_recall,
            macro_f1: r.macro_f1,
        }
    }
}

/// Markdown table of macro scores in percent.
pub fn comparison_table(rows: &[ComparisonRow]) -> String {
    let mut s = String::from("| System | Macro P | Macro R | Macro F1 |\n|---|---:|---:|---:|\n");
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | {:.2} | {:.2} | {:.2} |",
            r.system,
            100.0 * r.macro_precision,
            100.0 * r.macro_recall,
            100.0 * r.macro_f1
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed(Vec<f64>);

    impl CandidateScorer for Fixed {
        fn score(&self, _: &SentenceSample, c: &[String]) -> Result<Vec<f64>> {
            Ok(self.0[..c.len()].to_vec())
        }
    }

    fn dict() -> Dictionary {
        let mut d = Dictionary::new();
        d.insert("L", vec!["L1".into(), "L2".into(), "L3".into()]).unwrap();
        d.insert("S", vec!["Single".into()]).unwrap();
        d.insert("CNN", vec!["ConvNet".into(), "CableNews".into()]).unwrap();
        d
    }

    fn sample(id: &str, acr: &str, gold: Option<&str>) -> SentenceSample {
        SentenceSample {
            id: id.into(),
            tokens: vec!["the".into(), acr.into(), "model".into()],
            acronym_index: 1,
            long_form: gold.map(Into::into),
        }
    }

    #[test]
    fn argmax_and_ties() {
        let d = dict();
        let s = sample("x", "L", None);
        assert_eq!(predict(&Fixed(vec![0.9, 0.3, 0.1]), &s, &d).unwrap().prediction, "L1");
        assert_eq!(predict(&Fixed(vec![0.5, 0.5, 0.1]), &s, &d).unwrap().prediction, "L1");
        assert_eq!(predict(&Fixed(vec![0.1, 0.2, 0.7]), &s, &d).unwrap().prediction, "L3");
        let single = sample("y", "S", None);
        assert_eq!(predict(&Fixed(vec![0.01]), &single, &d).unwrap().prediction, "Single");
        assert!(matches!(
            predict(&Fixed(vec![0.1]), &sample("z", "NOPE", None), &d),
            Err(Error::UnknownAcronym(_))
        ));
        assert_eq!(argmax(&[]), None);
    }

    #[test]
    fn metric_examples() {
        let r = macro_metrics(&["A1", "A1", "B1", "B2"], &["A1", "A2", "B1", "B2"]).unwrap();
        assert_eq!(r.n_classes, 4);
        assert!((r.macro_precision - 0.75).abs() < 1e-15);
        assert!((r.macro_recall - 0.625).abs() < 1e-15);
        assert!((r.macro_f1 - 2.0 * 0.75 * 0.625 / 1.375).abs() < 1e-15);

        let perfect = macro_metrics(&["a", "b", "b"], &["a", "b", "b"]).unwrap();
        assert_eq!((perfect.macro_precision, perfect.macro_recall, perfect.macro_f1), (1.0, 1.0, 1.0));
        let wrong = macro_metrics(&["a", "b"], &["b", "a"]).unwrap();
        assert_eq!((wrong.macro_precision, wrong.macro_recall, wrong.macro_f1), (0.0, 0.0, 0.0));

        assert!(macro_metrics::<&str>(&[], &[]).is_err());
        assert!(macro_metrics(&["a"], &["a", "b"]).is_err());

        let wide = macro_metrics_over(&["a"], &["a"], ["z"]).unwrap();
        assert_eq!(wide.n_classes, 2);
        assert_eq!(wide.macro_precision, 0.5);
    }

    #[test]
    fn report_json_shape() {
        let r = macro_metrics(&["a"], &["a"]).unwrap();
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        for k in ["macro_precision", "macro_recall", "macro_f1", "n_classes", "per_class"] {
            assert!(v.get(k).is_some(), "{k}");
        }
        let c = &v["per_class"][0];
        for k in ["label", "precision", "recall", "f1", "tp", "fp", "fn"] {
            assert!(c.get(k).is_some(), "{k}");
        }
    }

    #[test]
    fn mf_counts_and_fallback() {
        let d = dict();
        let train = vec![
            sample("1", "CNN", Some("ConvNet")),
            sample("2", "CNN", Some("CableNews")),
            sample("3", "CNN", Some("ConvNet")),
            sample("4", "CNN", Some("ConvNet")),
        ];
        let mf = mf_baseline(&train, &d);
        assert_eq!(mf.counts["CNN"], vec![3, 1]);
        assert_eq!(predict(&mf, &sample("q", "CNN", None), &d).unwrap().prediction, "ConvNet");
        assert_eq!(predict(&mf, &sample("q", "L", None), &d).unwrap().prediction, "L1");

        let mf2 = mf_baseline(&[sample("1", "CNN", Some("CableNews"))], &d);
        let rec = predict(&mf2, &sample("q", "CNN", None), &d).unwrap();
        assert_eq!(rec.prediction, "CableNews");
        assert!(rec.scores.values().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn evaluate_gold_passthrough_is_perfect() {
        struct Oracle;
        impl CandidateScorer for Oracle {
            fn score(&self, s: &SentenceSample, c: &[String]) -> Result<Vec<f64>> {
                Ok(c.iter().map(|lf| if Some(lf) == s.long_form.as_ref() { 0.9 } else { 0.1 }).collect())
            }
        }
        let d = dict();
        let samples = vec![
            sample("1", "L", Some("L2")),
            sample("2", "L", Some("L3")),
            sample("3", "CNN", Some("CableNews")),
        ];
        for mode in [ExecMode::Sequential, ExecMode::Parallel] {
            let e = evaluate(&Oracle, &samples, &d, ClassSet::Union, mode).unwrap();
            assert_eq!(e.report.macro_f1, 1.0);
            assert_eq!(e.predictions.iter().map(|p| p.id.as_str()).collect::<Vec<_>>(), ["1", "2", "3"]);
        }
        let e = evaluate(&Oracle, &samples, &d, ClassSet::Dictionary, ExecMode::Sequential).unwrap();
        assert_eq!(e.report.n_classes, 6);
        assert!(evaluate(&Oracle, &[sample("4", "L", None)], &d, ClassSet::Union, ExecMode::Sequential).is_err());
    }

    #[test]
    fn comparison_table_format() {
        let r = macro_metrics(&["a", "b"], &["a", "a"]).unwrap();
        let t = comparison_table(&[ComparisonRow::new("MF", &r)]);
        assert!(t.contains("| MF | 25.00 | 50.00 | 33.33 |"), "{t}");
    }
}
