//! Sentence F1, token precision/recall/F1 and token-ranking MAP.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Confusion {
    pub fn count(pred: &[u8], gold: &[u8]) -> Self {
        assert_eq!(pred.len(), gold.len(), "prediction and gold lengths differ");
        let mut c = Self::default();
        for (&p, &g) in pred.iter().zip(gold) {
            match (p == 1, g == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
        c
    }

    pub fn add(&mut self, other: Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn prf(&self) -> Prf {
        let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        Prf {
            precision,
            recall,
            f1: f1(precision, recall),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// Precision, recall and F1 of the positive class; empty denominators give 0.
pub fn binary_prf(pred: &[u8], gold: &[u8]) -> Prf {
    Confusion::count(pred, gold).prf()
}

pub fn sentence_f1(pred: &[u8], gold: &[u8]) -> f64 {
    binary_prf(pred, gold).f1
}

/// How token rankings are formed for MAP.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapOptions {
    /// Rank all tokens of the corpus together instead of per sentence.
    pub global: bool,
    /// Count sentences without positive tokens as AP 0 instead of skipping them.
    pub empty_as_zero: bool,
}

/// Average precision of one ranking. Tokens are ordered by descending score,
/// ties by position. `None` when there is no positive token.
pub fn average_precision(scores: &[f64], gold: &[u8]) -> Option<f64> {
    assert_eq!(scores.len(), gold.len(), "scores and gold lengths differ");
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if gold[i] == 1 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

pub fn mean_average_precision(scores: &[Vec<f64>], gold: &[Vec<u8>], opts: MapOptions) -> Result<f64> {
    assert_eq!(scores.len(), gold.len(), "sentence counts differ");
    if opts.global {
        let flat_s: Vec<f64> = scores.iter().flatten().copied().collect();
        let flat_g: Vec<u8> = gold.iter().flatten().copied().collect();
        return average_precision(&flat_s, &flat_g)
            .ok_or_else(|| Error::Undefined("MAP: no positive tokens in the corpus".into()));
    }
    let aps: Vec<f64> = scores
        .iter()
        .zip(gold)
        .filter_map(|(s, g)| match average_precision(s, g) {
            Some(ap) => Some(ap),
            None if opts.empty_as_zero => Some(0.0),
            None => None,
        })
        .collect();
    if aps.is_empty() {
        return Err(Error::Undefined("MAP: no sentence has a positive token".into()));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    /// Absent for methods that do not classify sentences.
    pub sentence_f1: Option<f64>,
    pub token_map: Option<f64>,
    pub token_precision: f64,
    pub token_recall: f64,
    pub token_f1: f64,
    pub sentence_counts: Option<Confusion>,
    pub token_counts: Confusion,
}

impl EvalReport {
    /// Scores a labeling of `gold` token labels. `sentence_pred` is given for
    /// methods that also classify sentences.
    pub fn compute(
        method: &str,
        token_scores: &[Vec<f64>],
        token_pred: &[Vec<u8>],
        gold_tokens: &[Vec<u8>],
        sentence_pred: Option<(&[u8], &[u8])>,
        map: MapOptions,
    ) -> Self {
        let mut token_counts = Confusion::default();
        for (p, g) in token_pred.iter().zip(gold_tokens) {
            token_counts.add(Confusion::count(p, g));
        }
        let prf = token_counts.prf();
        let sentence_counts = sentence_pred.map(|(p, g)| Confusion::count(p, g));
        Self {
            method: method.to_string(),
            sentence_f1: sentence_counts.map(|c| c.prf().f1),
            token_map: mean_average_precision(token_scores, gold_tokens, map).ok(),
            token_precision: prf.precision,
            token_recall: prf.recall,
            token_f1: prf.f1,
            sentence_counts,
            token_counts,
        }
    }

    /// Human-readable `key: value` lines with 4 decimals.
    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        format!(
            "method: {}\nsentence_f1: {}\ntoken_map: {}\ntoken_precision: {:.4}\ntoken_recall: {:.4}\ntoken_f1: {:.4}\n",
            self.method,
            opt(self.sentence_f1),
            opt(self.token_map),
            self.token_precision,
            self.token_recall,
            self.token_f1
        )
    }

    /// One JSON object at full precision.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

fn mean_opt(values: impl Iterator<Item = Option<f64>> + Clone) -> Option<f64> {
    let all: Option<Vec<f64>> = values.collect();
    all.filter(|v| !v.is_empty()).map(|v| mean(v.into_iter()))
}

/// Arithmetic mean per metric; counts are summed.
pub fn average_reports(reports: &[EvalReport]) -> Result<EvalReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Contract("nothing to average".into()))?;
    // Sorting by value keeps the mean independent of report order.
    let sorted = |f: &dyn Fn(&EvalReport) -> f64| {
        let mut v: Vec<f64> = reports.iter().map(f).collect();
        v.sort_by(f64::total_cmp);
        mean(v.into_iter())
    };
    let sorted_opt = |f: &dyn Fn(&EvalReport) -> Option<f64>| {
        let mut v: Vec<Option<f64>> = reports.iter().map(f).collect();
        v.sort_by(|a, b| match (a, b) {
            (Some(x), Some(y)) => x.total_cmp(y),
            _ => std::cmp::Ordering::Equal,
        });
        mean_opt(v.into_iter())
    };
    let mut token_counts = Confusion::default();
    let mut sentence_counts = first.sentence_counts.map(|_| Confusion::default());
    for r in reports {
        token_counts.add(r.token_counts);
        if let (Some(acc), Some(c)) = (sentence_counts.as_mut(), r.sentence_counts) {
            acc.add(c);
        }
    }
    Ok(EvalReport {
        method: first.method.clone(),
        sentence_f1: sorted_opt(&|r| r.sentence_f1),
        token_map: sorted_opt(&|r| r.token_map),
        token_precision: sorted(&|r| r.token_precision),
        token_recall: sorted(&|r| r.token_recall),
        token_f1: sorted(&|r| r.token_f1),
        sentence_counts,
        token_counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn prf_examples() {
        let p = binary_prf(&[1, 0, 1], &[1, 0, 1]);
        assert_eq!((p.precision, p.recall, p.f1), (1.0, 1.0, 1.0));
        let p = binary_prf(&[0, 0, 0], &[1, 0, 1]);
        assert_eq!((p.precision, p.recall, p.f1), (0.0, 0.0, 0.0));
        let p = binary_prf(&[1, 1, 0], &[1, 0, 0]);
        assert_eq!((p.precision, p.recall), (0.5, 1.0));
        assert_abs_diff_eq!(p.f1, 2.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn sentence_f1_examples() {
        assert_eq!(sentence_f1(&[1, 0, 1], &[1, 0, 1]), 1.0);
        assert_eq!(sentence_f1(&[0, 0, 0], &[1, 0, 1]), 0.0);
        assert_eq!(sentence_f1(&[1, 0, 1, 0], &[1, 1, 0, 0]), 0.5);
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[0.9, 0.8, 0.1, 0.2, 0.3], &[1, 1, 0, 0, 0]), Some(1.0));
        assert_eq!(average_precision(&[0.9, 0.5, 0.1], &[0, 1, 0]), Some(0.5));
        assert_abs_diff_eq!(
            average_precision(&[0.9, 0.8, 0.7], &[0, 1, 1]).unwrap(),
            7.0 / 12.0,
            epsilon = 1e-15
        );
        assert_eq!(average_precision(&[0.1, 0.2], &[0, 0]), None);
    }

    #[test]
    fn ties_rank_earlier_tokens_first() {
        assert_eq!(average_precision(&[0.5, 0.5], &[1, 0]), Some(1.0));
        assert_eq!(average_precision(&[0.5, 0.5], &[0, 1]), Some(0.5));
    }

    #[test]
    fn map_modes() {
        let scores = vec![vec![0.9, 0.1], vec![0.2, 0.8], vec![0.3]];
        let gold = vec![vec![1, 0], vec![1, 0], vec![0]];
        let skip = mean_average_precision(&scores, &gold, MapOptions::default()).unwrap();
        assert_abs_diff_eq!(skip, 0.75);
        let zero = mean_average_precision(
            &scores,
            &gold,
            MapOptions {
                empty_as_zero: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert_abs_diff_eq!(zero, 0.5);
        let global = mean_average_precision(
            &scores,
            &gold,
            MapOptions {
                global: true,
                ..Default::default()
            },
        )
        .unwrap();
        // Ranking 0.9(+) 0.8(-) 0.3(-) 0.2(+) 0.1(-): (1/1 + 2/4) / 2.
        assert_abs_diff_eq!(global, 0.75);
        assert!(matches!(
            mean_average_precision(&[vec![0.1]], &[vec![0]], MapOptions::default()),
            Err(Error::Undefined(_))
        ));
    }

    fn report(f: f64) -> EvalReport {
        EvalReport {
            method: "m".into(),
            sentence_f1: Some(f),
            token_map: Some(f),
            token_precision: f,
            token_recall: f,
            token_f1: f,
            ..Default::default()
        }
    }

    #[test]
    fn averaging() {
        let one = average_reports(&[report(0.6)]).unwrap();
        assert_eq!(one.token_f1, 0.6);
        assert_eq!(one.sentence_f1, Some(0.6));
        let two = average_reports(&[report(0.6), report(0.8)]).unwrap();
        assert_abs_diff_eq!(two.token_f1, 0.7, epsilon = 1e-15);
        let a = average_reports(&[report(0.1), report(0.7), report(0.3)]).unwrap();
        let b = average_reports(&[report(0.3), report(0.1), report(0.7)]).unwrap();
        assert_eq!(a, b);
        assert!(average_reports(&[]).is_err());
    }

    #[test]
    fn report_text_uses_four_decimals() {
        let mut r = report(2.0 / 3.0);
        r.sentence_f1 = None;
        let text = r.to_text();
        assert!(text.contains("token_f1: 0.6667"));
        assert!(text.contains("sentence_f1: -"));
        let back: EvalReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }
}
