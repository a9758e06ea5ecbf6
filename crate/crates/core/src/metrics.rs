//! Evaluation metrics. Scores are fractions in [0, 1] (Pearson in [-1, 1]);
//! reports multiply by 100.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tasks::{normalize_answer, Prediction, PredictionPayload, Span, TaskFamily};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf { precision, recall, f1 }
    }
}

fn check_len(what: &'static str, a: usize, b: usize) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            op: what,
            lhs: vec![a],
            rhs: vec![b],
        })
    }
}

/// Exact-match entity scores with counts pooled over sentences.
pub fn entity_f1<G: AsRef<[Span]>, P: AsRef<[Span]>>(gold: &[G], pred: &[P]) -> Result<Prf> {
    check_len("entity_f1", gold.len(), pred.len())?;
    let (mut tp, mut n_gold, mut n_pred) = (0, 0, 0);
    for (g, p) in gold.iter().zip(pred) {
        let g: BTreeSet<&Span> = g.as_ref().iter().collect();
        let p: BTreeSet<&Span> = p.as_ref().iter().collect();
        tp += g.intersection(&p).count();
        n_gold += g.len();
        n_pred += p.len();
    }
    Ok(Prf::from_counts(tp, n_pred - tp, n_gold - tp))
}

/// Micro F1 with true positives, false positives and false negatives
/// counted over the `positive` classes only.
pub fn micro_f1<S: AsRef<str>>(gold: &[S], pred: &[S], positive: &[S]) -> Result<Prf> {
    check_len("micro_f1", gold.len(), pred.len())?;
    if positive.is_empty() {
        return Err(Error::invalid("micro_f1 needs at least one positive class"));
    }
    let pos: HashSet<&str> = positive.iter().map(AsRef::as_ref).collect();
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (g, p) in gold.iter().zip(pred) {
        let (g, p) = (g.as_ref(), p.as_ref());
        if g == p {
            tp += pos.contains(g) as usize;
        } else {
            fp += pos.contains(p) as usize;
            fn_ += pos.contains(g) as usize;
        }
    }
    Ok(Prf::from_counts(tp, fp, fn_))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Average {
    /// Counts pooled over all (document, label) pairs.
    #[default]
    Micro,
    /// Unweighted mean of per-label F1.
    Macro,
}

pub fn multilabel_f1<M: AsRef<[bool]>>(gold: &[M], pred: &[M], average: Average) -> Result<f64> {
    check_len("multilabel_f1", gold.len(), pred.len())?;
    let width = gold.first().map_or(0, |g| g.as_ref().len());
    let mut counts = vec![(0usize, 0usize, 0usize); width];
    for (g, p) in gold.iter().zip(pred) {
        let (g, p) = (g.as_ref(), p.as_ref());
        check_len("multilabel_f1 mask", width, g.len())?;
        check_len("multilabel_f1 mask", width, p.len())?;
        for (c, (&g, &p)) in counts.iter_mut().zip(g.iter().zip(p)) {
            match (g, p) {
                (true, true) => c.0 += 1,
                (false, true) => c.1 += 1,
                (true, false) => c.2 += 1,
                (false, false) => {}
            }
        }
    }
    Ok(match average {
        Average::Micro => {
            let (tp, fp, fn_) = counts.iter().fold((0, 0, 0), |a, c| (a.0 + c.0, a.1 + c.1, a.2 + c.2));
            Prf::from_counts(tp, fp, fn_).f1
        }
        Average::Macro if width == 0 => 0.0,
        Average::Macro => {
            counts
                .iter()
                .map(|&(tp, fp, fn_)| Prf::from_counts(tp, fp, fn_).f1)
                .sum::<f64>()
                / width as f64
        }
    })
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_len("pearson", x.len(), y.len())?;
    if x.len() < 2 {
        return Err(Error::invalid("pearson needs at least two points"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("pearson"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::invalid("pearson is undefined for zero variance"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

pub fn accuracy<T: PartialEq>(gold: &[T], pred: &[T]) -> Result<f64> {
    check_len("accuracy", gold.len(), pred.len())?;
    if gold.is_empty() {
        return Err(Error::invalid("accuracy of an empty set"));
    }
    Ok(gold.iter().zip(pred).filter(|(g, p)| g == p).count() as f64 / gold.len() as f64)
}

/// Fraction of questions where some normalised gold synonym equals some
/// normalised candidate.
pub fn lenient_accuracy<C: AsRef<[String]>, G: AsRef<[String]>>(candidates: &[C], gold: &[G]) -> Result<f64> {
    check_len("lenient_accuracy", candidates.len(), gold.len())?;
    if gold.is_empty() {
        return Err(Error::invalid("lenient accuracy of an empty set"));
    }
    let mut hits = 0;
    for (c, g) in candidates.iter().zip(gold) {
        if g.as_ref().is_empty() {
            return Err(Error::invalid("question without gold answers"));
        }
        let g: HashSet<String> = g.as_ref().iter().map(|s| normalize_answer(s)).collect();
        hits += c.as_ref().iter().any(|s| g.contains(&normalize_answer(s))) as usize;
    }
    Ok(hits as f64 / gold.len() as f64)
}

/// Unweighted mean score per family, families in first-seen order.
pub fn blurb(scores: &[(TaskFamily, f64)]) -> Result<Vec<(TaskFamily, f64)>> {
    if scores.is_empty() {
        return Err(Error::invalid("no scores to average"));
    }
    let mut order = Vec::new();
    let mut sums: HashMap<TaskFamily, (f64, usize)> = HashMap::new();
    for &(family, s) in scores {
        let e = sums.entry(family).or_insert_with(|| {
            order.push(family);
            (0.0, 0)
        });
        e.0 += s;
        e.1 += 1;
    }
    Ok(order
        .into_iter()
        .map(|f| {
            let (sum, n) = sums[&f];
            (f, sum / n as f64)
        })
        .collect())
}

/// Rounds to two decimals, half away from zero. Values within 1e-6 of a
/// hundredths tie count as the tie.
pub fn round2(x: f64) -> f64 {
    let snapped = ((x * 100.0) * 1e6).round() / 1e6;
    snapped.round() / 100.0
}

pub fn format_pct(x: f64) -> String {
    let r = round2(x);
    format!("{:.2}", if r == 0.0 { 0.0 } else { r })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "entity-f1")]
    EntityF1,
    #[serde(rename = "micro-f1")]
    MicroF1,
    #[serde(rename = "f1")]
    F1,
    #[serde(rename = "accuracy")]
    Accuracy,
    #[serde(rename = "pearson")]
    Pearson,
    #[serde(rename = "lenient-accuracy")]
    LenientAccuracy,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::EntityF1,
        Metric::MicroF1,
        Metric::F1,
        Metric::Accuracy,
        Metric::Pearson,
        Metric::LenientAccuracy,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::EntityF1 => "entity-f1",
            Metric::MicroF1 => "micro-f1",
            Metric::F1 => "f1",
            Metric::Accuracy => "accuracy",
            Metric::Pearson => "pearson",
            Metric::LenientAccuracy => "lenient-accuracy",
        }
    }

    pub fn for_family(family: TaskFamily) -> Metric {
        match family {
            TaskFamily::Ner => Metric::EntityF1,
            TaskFamily::Re => Metric::MicroF1,
            TaskFamily::MultiLabel => Metric::F1,
            TaskFamily::Nli => Metric::Accuracy,
            TaskFamily::Sts => Metric::Pearson,
            TaskFamily::Qa => Metric::LenientAccuracy,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown metric {s:?}")))
    }
}

/// One line of a prediction file. Either payload may be missing in files
/// that carry only predictions or only gold values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub family: TaskFamily,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction: Option<PredictionPayload>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<PredictionPayload>,
}

impl From<Prediction> for PredictionRecord {
    fn from(p: Prediction) -> Self {
        PredictionRecord {
            id: p.id,
            family: p.family,
            prediction: Some(p.prediction),
            gold: Some(p.gold),
        }
    }
}

impl PredictionRecord {
    fn predicted(&self) -> Result<&PredictionPayload> {
        self.prediction
            .as_ref()
            .or(self.gold.as_ref())
            .ok_or_else(|| Error::invalid(format!("record {:?} has no payload", self.id)))
    }

    fn reference(&self) -> Result<&PredictionPayload> {
        self.gold
            .as_ref()
            .or(self.prediction.as_ref())
            .ok_or_else(|| Error::invalid(format!("record {:?} has no payload", self.id)))
    }
}

/// Pairs predictions with gold values. Without a gold file each record must
/// carry both payloads. With one, predictions are joined to it on id in gold
/// order; every gold id must be predicted exactly once and nothing else.
pub fn join_records(pred: &[PredictionRecord], gold: Option<&[PredictionRecord]>) -> Result<Vec<Prediction>> {
    let pair = |p: &PredictionRecord, predicted: &PredictionPayload, reference: &PredictionPayload| Prediction {
        id: p.id.clone(),
        family: p.family,
        prediction: predicted.clone(),
        gold: reference.clone(),
    };
    let Some(gold) = gold else {
        return pred
            .iter()
            .map(|p| match (&p.prediction, &p.gold) {
                (Some(a), Some(b)) => Ok(pair(p, a, b)),
                _ => Err(Error::invalid(format!(
                    "record {:?} needs both prediction and gold without a gold file",
                    p.id
                ))),
            })
            .collect();
    };
    let mut by_id: HashMap<&str, &PredictionRecord> = HashMap::with_capacity(pred.len());
    for p in pred {
        if by_id.insert(&p.id, p).is_some() {
            return Err(Error::invalid(format!("duplicate prediction id {:?}", p.id)));
        }
    }
    let mut seen = HashSet::with_capacity(gold.len());
    let mut out = Vec::with_capacity(gold.len());
    for g in gold {
        if !seen.insert(g.id.as_str()) {
            return Err(Error::invalid(format!("duplicate gold id {:?}", g.id)));
        }
        let p = by_id
            .get(g.id.as_str())
            .ok_or_else(|| Error::invalid(format!("no prediction for id {:?}", g.id)))?;
        if p.family != g.family {
            return Err(Error::invalid(format!(
                "id {:?}: predicted {} but gold is {}",
                g.id, p.family, g.family
            )));
        }
        out.push(pair(p, p.predicted()?, g.reference()?));
    }
    if pred.len() != gold.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} gold records",
            pred.len(),
            gold.len()
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalOptions {
    /// Relation classes that count as "no relation" for micro F1. When
    /// empty, labels such as `false`, `0`, `none` or `*-false` are detected.
    pub negative_classes: Vec<String>,
    /// Score the negative class like any other.
    pub include_negative: bool,
    pub average: Average,
}

pub fn is_negative_label(label: &str) -> bool {
    let l = label.to_ascii_lowercase();
    matches!(l.as_str(), "0" | "false" | "negative" | "none" | "no" | "other")
        || l.ends_with("-false")
        || l.ends_with(":false")
        || l.ends_with("_false")
}

/// Scores aligned prediction/gold pairs.
pub fn evaluate(pairs: &[Prediction], metric: Metric, opts: &EvalOptions) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("nothing to evaluate"));
    }
    let pairs: Vec<(&PredictionPayload, &PredictionPayload)> = pairs.iter().map(|p| (&p.prediction, &p.gold)).collect();
    match metric {
        Metric::EntityF1 => {
            let (p, g): (Vec<&[Span]>, Vec<&[Span]>) = collect2(&pairs, PredictionPayload::spans)?;
            Ok(entity_f1(&g, &p)?.f1)
        }
        Metric::MicroF1 => {
            let (p, g): (Vec<&str>, Vec<&str>) = collect2(&pairs, PredictionPayload::class)?;
            let classes: BTreeSet<&str> = g.iter().chain(&p).copied().collect();
            let positive: Vec<&str> = classes
                .into_iter()
                .filter(|c| {
                    opts.include_negative
                        || if opts.negative_classes.is_empty() {
                            !is_negative_label(c)
                        } else {
                            !opts.negative_classes.iter().any(|n| n == c)
                        }
                })
                .collect();
            Ok(micro_f1(&g, &p, &positive)?.f1)
        }
        Metric::Accuracy => {
            let (p, g): (Vec<&str>, Vec<&str>) = collect2(&pairs, PredictionPayload::class)?;
            accuracy(&g, &p)
        }
        Metric::F1 => {
            let (p, g): (Vec<Vec<bool>>, Vec<Vec<bool>>) = collect2(&pairs, PredictionPayload::mask)?;
            multilabel_f1(&g, &p, opts.average)
        }
        Metric::Pearson => {
            let (p, g): (Vec<f64>, Vec<f64>) = collect2(&pairs, PredictionPayload::score)?;
            pearson(&p, &g)
        }
        Metric::LenientAccuracy => {
            let (p, g): (Vec<&[String]>, Vec<&[String]>) = collect2(&pairs, PredictionPayload::answers)?;
            lenient_accuracy(&p, &g)
        }
    }
}

fn collect2<'a, T>(
    pairs: &[(&'a PredictionPayload, &'a PredictionPayload)],
    get: impl Fn(&'a PredictionPayload) -> Result<T>,
) -> Result<(Vec<T>, Vec<T>)> {
    let mut p = Vec::with_capacity(pairs.len());
    let mut g = Vec::with_capacity(pairs.len());
    for &(a, b) in pairs {
        p.push(get(a)?);
        g.push(get(b)?);
    }
    Ok((p, g))
}
