//! Confusion matrices, balanced accuracy, F1 and the before/after
//! probability histogram.

use std::fmt::Write as _;
use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::DatasetExample;
use crate::providers::RequestCounts;
use crate::types::{TaskMode, Verdict, VerdictTrace};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("{golds} gold labels but {preds} predictions")]
    LengthMismatch { golds: usize, preds: usize },
    #[error("label {0} is not among the matrix classes")]
    UnknownClass(Verdict),
    #[error("no class has gold examples; the metric is undefined")]
    Undefined,
    #[error("histogram needs at least one bin")]
    ZeroBins,
}

/// How two-way evaluation treats NEI predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
pub enum NeiPolicy {
    /// An NEI prediction is wrong for either gold class.
    #[default]
    #[value(name = "count-as-error")]
    #[serde(alias = "count-as-error")]
    CountAsError,
    /// NEI predictions are tallied separately and left out of the metrics.
    #[value(name = "separate-column")]
    #[serde(alias = "separate-column")]
    SeparateColumn,
}

/// Rows are gold labels, columns predictions, both indexed by `classes`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<Verdict>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: &[Verdict]) -> Self {
        Self { classes: classes.to_vec(), counts: vec![vec![0; classes.len()]; classes.len()] }
    }

    fn index(&self, v: Verdict) -> Result<usize, MetricsError> {
        self.classes.iter().position(|c| *c == v).ok_or(MetricsError::UnknownClass(v))
    }

    pub fn add(&mut self, gold: Verdict, pred: Verdict) -> Result<(), MetricsError> {
        let (g, p) = (self.index(gold)?, self.index(pred)?);
        self.counts[g][p] += 1;
        Ok(())
    }

    pub fn get(&self, gold: Verdict, pred: Verdict) -> u64 {
        match (self.index(gold), self.index(pred)) {
            (Ok(g), Ok(p)) => self.counts[g][p],
            _ => 0,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.classes.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn gold_support(&self, c: Verdict) -> u64 {
        self.index(c).map(|i| self.counts[i].iter().sum()).unwrap_or(0)
    }

    pub fn predicted(&self, c: Verdict) -> u64 {
        self.index(c).map(|j| self.counts.iter().map(|row| row[j]).sum()).unwrap_or(0)
    }

    /// Classes with at least one gold example, in matrix order.
    pub fn gold_classes(&self) -> Vec<Verdict> {
        self.classes.iter().copied().filter(|c| self.gold_support(*c) > 0).collect()
    }

    /// `None` when the class has no gold examples.
    pub fn recall(&self, c: Verdict) -> Option<f64> {
        let support = self.gold_support(c);
        (support > 0).then(|| self.get(c, c) as f64 / support as f64)
    }

    /// Zero when the class is never predicted.
    pub fn precision(&self, c: Verdict) -> f64 {
        let predicted = self.predicted(c);
        if predicted == 0 {
            0.0
        } else {
            self.get(c, c) as f64 / predicted as f64
        }
    }
}

pub fn confusion(golds: &[Verdict], preds: &[Verdict], classes: &[Verdict]) -> Result<ConfusionMatrix, MetricsError> {
    if golds.len() != preds.len() {
        return Err(MetricsError::LengthMismatch { golds: golds.len(), preds: preds.len() });
    }
    let mut cm = ConfusionMatrix::zeros(classes);
    for (g, p) in golds.iter().zip(preds) {
        cm.add(*g, *p)?;
    }
    Ok(cm)
}

/// Mean recall over classes that have gold examples.
pub fn balanced_accuracy(cm: &ConfusionMatrix) -> Result<f64, MetricsError> {
    let recalls: Vec<f64> = cm.classes.iter().filter_map(|c| cm.recall(*c)).collect();
    if recalls.is_empty() {
        return Err(MetricsError::Undefined);
    }
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

pub fn f1(cm: &ConfusionMatrix, positive: Verdict) -> f64 {
    let p = cm.precision(positive);
    let r = cm.recall(positive).unwrap_or(0.0);
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Unweighted mean F1 over classes present in gold; zero if there are none.
pub fn macro_f1(cm: &ConfusionMatrix) -> f64 {
    let classes = cm.gold_classes();
    if classes.is_empty() {
        return 0.0;
    }
    classes.iter().map(|c| f1(cm, *c)).sum::<f64>() / classes.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: Verdict,
    pub support: u64,
    pub predicted: u64,
    pub precision: f64,
    pub recall: Option<f64>,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: TaskMode,
    pub nei_policy: NeiPolicy,
    pub examples: usize,
    /// Pairs that entered the confusion matrix.
    pub evaluated: usize,
    /// Two-way NEI predictions left out under the separate-column policy.
    pub abstentions: usize,
    /// Two-way examples whose gold label is NEI; never scored.
    pub excluded_gold_nei: usize,
    pub accuracy: f64,
    pub balanced_accuracy: Option<f64>,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: ConfusionMatrix,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub requests: Option<RequestCounts>,
}

impl MetricsReport {
    /// Fixed-width plain-text rendering.
    pub fn to_table(&self) -> String {
        let fmt = |x: Option<f64>| x.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        let mut out = String::new();
        let _ = writeln!(out, "task               {:?}", self.task);
        let _ = writeln!(out, "nei policy         {:?}", self.nei_policy);
        let _ = writeln!(out, "examples           {}", self.examples);
        let _ = writeln!(out, "evaluated          {}", self.evaluated);
        let _ = writeln!(out, "abstentions        {}", self.abstentions);
        let _ = writeln!(out, "excluded gold NEI  {}", self.excluded_gold_nei);
        let _ = writeln!(out, "accuracy           {}", fmt(Some(self.accuracy)));
        let _ = writeln!(out, "balanced accuracy  {}", fmt(self.balanced_accuracy));
        let _ = writeln!(out, "macro F1           {}", fmt(Some(self.macro_f1)));
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "{:<10} {:>8} {:>9} {:>9} {:>9} {:>9}",
            "class", "support", "predicted", "precision", "recall", "f1"
        );
        for c in &self.per_class {
            let _ = writeln!(
                out,
                "{:<10} {:>8} {:>9} {:>9} {:>9} {:>9}",
                c.class.as_str(),
                c.support,
                c.predicted,
                fmt(Some(c.precision)),
                fmt(c.recall),
                fmt(Some(c.f1))
            );
        }
        let _ = writeln!(out);
        let _ = write!(out, "{:<10}", "gold\\pred");
        for c in &self.confusion.classes {
            let _ = write!(out, " {:>9}", c.as_str());
        }
        let _ = writeln!(out);
        for (g, row) in self.confusion.classes.iter().zip(&self.confusion.counts) {
            let _ = write!(out, "{:<10}", g.as_str());
            for n in row {
                let _ = write!(out, " {n:>9}");
            }
            let _ = writeln!(out);
        }
        if let Some(r) = self.requests {
            let _ = writeln!(out);
            let _ = writeln!(
                out,
                "requests           chat {} / embedding {} / verifier {} / search {}",
                r.chat, r.embedding, r.verifier, r.search
            );
        }
        out
    }
}

/// Scores `(gold, predicted)` pairs.
pub fn evaluate_pairs(pairs: &[(Verdict, Verdict)], task: TaskMode, policy: NeiPolicy) -> MetricsReport {
    let mut abstentions = 0;
    let mut excluded_gold_nei = 0;
    let cm = match task {
        TaskMode::ThreeWay => {
            let mut cm = ConfusionMatrix::zeros(&Verdict::ALL);
            for (g, p) in pairs {
                cm.add(*g, *p).expect("all verdicts are classes");
            }
            cm
        }
        TaskMode::TwoWay => {
            let classes: &[Verdict] = match policy {
                NeiPolicy::CountAsError => &Verdict::ALL,
                NeiPolicy::SeparateColumn => &[Verdict::Supported, Verdict::Refuted],
            };
            let mut cm = ConfusionMatrix::zeros(classes);
            for (g, p) in pairs {
                if *g == Verdict::Nei {
                    excluded_gold_nei += 1;
                } else if *p == Verdict::Nei && policy == NeiPolicy::SeparateColumn {
                    abstentions += 1;
                } else {
                    cm.add(*g, *p).expect("pair within classes");
                }
            }
            cm
        }
    };
    let evaluated = cm.total() as usize;
    let per_class = cm
        .gold_classes()
        .into_iter()
        .map(|c| ClassMetrics {
            class: c,
            support: cm.gold_support(c),
            predicted: cm.predicted(c),
            precision: cm.precision(c),
            recall: cm.recall(c),
            f1: f1(&cm, c),
        })
        .collect();
    MetricsReport {
        task,
        nei_policy: policy,
        examples: pairs.len(),
        evaluated,
        abstentions,
        excluded_gold_nei,
        accuracy: if evaluated == 0 { 0.0 } else { cm.correct() as f64 / evaluated as f64 },
        balanced_accuracy: balanced_accuracy(&cm).ok(),
        macro_f1: macro_f1(&cm),
        per_class,
        confusion: cm,
        requests: None,
    }
}

/// Scores predictions aligned with `examples` by position.
pub fn evaluate(
    examples: &[DatasetExample],
    predictions: &[Verdict],
    task: TaskMode,
    policy: NeiPolicy,
) -> Result<MetricsReport, MetricsError> {
    if examples.len() != predictions.len() {
        return Err(MetricsError::LengthMismatch { golds: examples.len(), preds: predictions.len() });
    }
    let pairs: Vec<_> = examples.iter().map(|e| e.gold).zip(predictions.iter().copied()).collect();
    Ok(evaluate_pairs(&pairs, task, policy))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub bin_low: f64,
    pub bin_high: f64,
    pub count_before: u64,
    pub count_after: u64,
}

fn bin_edge(i: usize, bins: usize) -> f64 {
    i as f64 / bins as f64
}

/// Bin `i` covers `[i/bins, (i+1)/bins)`; the last bin also holds 1.0.
fn bin_of(p: f64, bins: usize) -> usize {
    let p = p.clamp(0.0, 1.0);
    let mut i = ((p * bins as f64).floor() as usize).min(bins - 1);
    if i + 1 < bins && p >= bin_edge(i + 1, bins) {
        i += 1;
    } else if i > 0 && p < bin_edge(i, bins) {
        i -= 1;
    }
    i
}

/// Equal-width histograms of `p_local` and `p_final` over every assessment.
pub fn histogram_before_after(traces: &[VerdictTrace], bins: usize) -> Result<Vec<HistogramBin>, MetricsError> {
    if bins == 0 {
        return Err(MetricsError::ZeroBins);
    }
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|i| HistogramBin {
            bin_low: bin_edge(i, bins),
            bin_high: bin_edge(i + 1, bins),
            count_before: 0,
            count_after: 0,
        })
        .collect();
    for a in traces.iter().flat_map(|t| &t.assessments) {
        out[bin_of(a.p_local, bins)].count_before += 1;
        out[bin_of(a.p_final, bins)].count_after += 1;
    }
    Ok(out)
}

/// CSV with header `bin_low,bin_high,count_before,count_after`.
pub fn write_histogram_csv<W: io::Write>(bins: &[HistogramBin], w: W) -> Result<(), csv::Error> {
    let mut wr = csv::Writer::from_writer(w);
    for b in bins {
        wr.serialize(b)?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Ablation, AtomicFact, Chunk, Claim, FactAssessment, Regime, SelectionMethod, Thresholds};
    use crate::verify::gate;
    use proptest::prelude::*;
    use Verdict::{Nei as N, Refuted as R, Supported as S};

    const EPS: f64 = 1e-12;

    #[test]
    fn confusion_examples() {
        let cm = confusion(&[S, S, R], &[S, R, R], &[S, R]).unwrap();
        assert_eq!((cm.get(S, S), cm.get(S, R), cm.get(R, R), cm.get(R, S)), (1, 1, 1, 0));
        let empty = confusion(&[], &[], &Verdict::ALL).unwrap();
        assert_eq!(empty.total(), 0);
        assert!(matches!(confusion(&[S], &[], &[S]), Err(MetricsError::LengthMismatch { .. })));
        assert_eq!(confusion(&[S], &[N], &[S, R]), Err(MetricsError::UnknownClass(N)));
        let n = confusion(&[S, R, N, S], &[S, R, N, S], &Verdict::ALL).unwrap();
        assert_eq!(n.correct(), 4);
    }

    fn two_class(s_correct: u64, s_total: u64, r_correct: u64, r_total: u64) -> ConfusionMatrix {
        ConfusionMatrix {
            classes: vec![S, R],
            counts: vec![vec![s_correct, s_total - s_correct], vec![r_total - r_correct, r_correct]],
        }
    }

    #[test]
    fn balanced_accuracy_examples() {
        assert!((balanced_accuracy(&two_class(5, 5, 5, 5)).unwrap() - 1.0).abs() < EPS);
        assert!((balanced_accuracy(&two_class(8, 10, 6, 10)).unwrap() - 0.7).abs() < EPS);
        assert!((balanced_accuracy(&two_class(10, 10, 0, 10)).unwrap() - 0.5).abs() < EPS);
        assert_eq!(balanced_accuracy(&ConfusionMatrix::zeros(&[S, R])), Err(MetricsError::Undefined));
        // A class absent from gold is left out of the mean.
        let cm = confusion(&[S, S], &[S, N], &Verdict::ALL).unwrap();
        assert!((balanced_accuracy(&cm).unwrap() - 0.5).abs() < EPS);
    }

    #[test]
    fn f1_examples() {
        let perfect = confusion(&[S, R, N], &[S, R, N], &Verdict::ALL).unwrap();
        for c in Verdict::ALL {
            assert_eq!(f1(&perfect, c), 1.0);
        }
        // S: tp 1, fp 1, fn 1 → P = R = 0.5
        let cm = confusion(&[S, S, R], &[S, R, S], &[S, R]).unwrap();
        assert!((f1(&cm, S) - 0.5).abs() < EPS);
        // Per-class F1 {1.0, 0.5, 0.0}: S perfect; R tp 1 fp 1 fn 1; N never right.
        let cm = confusion(&[S, R, R, N], &[S, R, N, R], &Verdict::ALL).unwrap();
        assert!((f1(&cm, S) - 1.0).abs() < EPS);
        assert!((f1(&cm, R) - 0.5).abs() < EPS);
        assert_eq!(f1(&cm, N), 0.0);
        assert!((macro_f1(&cm) - 0.5).abs() < EPS);
    }

    #[test]
    fn evaluate_policies() {
        let three = evaluate_pairs(&[(S, S), (R, R), (N, N)], TaskMode::ThreeWay, NeiPolicy::CountAsError);
        assert_eq!(three.macro_f1, 1.0);

        let pairs = [(S, S), (S, N), (R, R), (R, R)];
        let err = evaluate_pairs(&pairs, TaskMode::TwoWay, NeiPolicy::CountAsError);
        assert_eq!(err.evaluated, 4);
        assert!((err.accuracy - 0.75).abs() < EPS);
        assert!((err.balanced_accuracy.unwrap() - 0.75).abs() < EPS);
        assert_eq!(err.per_class.len(), 2);

        let sep = evaluate_pairs(&pairs, TaskMode::TwoWay, NeiPolicy::SeparateColumn);
        assert_eq!((sep.evaluated, sep.abstentions), (3, 1));
        assert_eq!(sep.accuracy, 1.0);

        let gold_nei = evaluate_pairs(&[(N, S), (S, S)], TaskMode::TwoWay, NeiPolicy::CountAsError);
        assert_eq!((gold_nei.excluded_gold_nei, gold_nei.evaluated), (1, 1));

        let ex = vec![DatasetExample { id: "1".into(), claim: "c".into(), document: "d".into(), gold: S }];
        assert!(evaluate(&ex, &[], TaskMode::TwoWay, NeiPolicy::CountAsError).is_err());
        let table = evaluate(&ex, &[S], TaskMode::TwoWay, NeiPolicy::CountAsError).unwrap().to_table();
        assert!(table.contains("balanced accuracy") && table.contains("Supported"));
    }

    fn trace_with(ps: &[(f64, f64)]) -> VerdictTrace {
        let t = Thresholds::default();
        VerdictTrace {
            example_id: "e".into(),
            claim: Claim::new("c").unwrap(),
            baseline_verdict: None,
            assessments: ps
                .iter()
                .enumerate()
                .map(|(i, (a, b))| FactAssessment {
                    fact: AtomicFact::new(format!("f{}", i + 1), "x", vec![]),
                    snippet: Chunk { start: 0, end: 1, text: "x".into() },
                    selection_method: SelectionMethod::Overlap,
                    p_local: *a,
                    p_final: *b,
                    rescored: a != b,
                    label: gate(*b, &t),
                    web_evidence: None,
                    citations: vec![],
                    conflict: false,
                    note: None,
                })
                .collect(),
            judge_verdict: N,
            judge_explanation: String::new(),
            used_facts: vec![],
            regime: Regime::ContextWeb,
            ablation: Ablation::None,
        }
    }

    #[test]
    fn histogram_examples() {
        let empty = histogram_before_after(&[], 4).unwrap();
        assert_eq!(empty.len(), 4);
        assert!(empty.iter().all(|b| b.count_before == 0 && b.count_after == 0));
        let h = histogram_before_after(&[trace_with(&[(0.5, 0.9)])], 10).unwrap();
        assert_eq!(h[5].count_before, 1);
        assert_eq!(h[9].count_after, 1);
        let h = histogram_before_after(&[trace_with(&[(1.0, 0.0), (0.29, 0.3)])], 100).unwrap();
        assert_eq!((h[99].count_before, h[0].count_after), (1, 1));
        assert_eq!((h[29].count_before, h[30].count_after), (1, 1));
        assert_eq!(histogram_before_after(&[], 0), Err(MetricsError::ZeroBins));

        let mut buf = Vec::new();
        write_histogram_csv(&histogram_before_after(&[], 2).unwrap(), &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "bin_low,bin_high,count_before,count_after\n0.0,0.5,0,0\n0.5,1.0,0,0\n"
        );
    }

    fn brute(pairs: &[(Verdict, Verdict)]) -> (Option<f64>, Vec<(Verdict, f64)>, f64) {
        let present: Vec<Verdict> = Verdict::ALL.into_iter().filter(|c| pairs.iter().any(|(g, _)| g == c)).collect();
        let mut recalls = Vec::new();
        let mut f1s = Vec::new();
        for c in &present {
            let tp = pairs.iter().filter(|(g, p)| g == c && p == c).count() as f64;
            let gold = pairs.iter().filter(|(g, _)| g == c).count() as f64;
            let pred = pairs.iter().filter(|(_, p)| p == c).count() as f64;
            let r = tp / gold;
            let p = if pred == 0.0 { 0.0 } else { tp / pred };
            recalls.push(r);
            f1s.push((*c, if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) }));
        }
        let ba = (!recalls.is_empty()).then(|| recalls.iter().sum::<f64>() / recalls.len() as f64);
        let mf = if f1s.is_empty() { 0.0 } else { f1s.iter().map(|x| x.1).sum::<f64>() / f1s.len() as f64 };
        (ba, f1s, mf)
    }

    fn verdict() -> impl Strategy<Value = Verdict> {
        (0usize..3).prop_map(|i| Verdict::ALL[i])
    }

    proptest! {
        #[test]
        fn metrics_match_brute_force(pairs in prop::collection::vec((verdict(), verdict()), 0..60)) {
            let report = evaluate_pairs(&pairs, TaskMode::ThreeWay, NeiPolicy::CountAsError);
            let (ba, f1s, mf) = brute(&pairs);
            match (report.balanced_accuracy, ba) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-9),
                (a, b) => prop_assert_eq!(a, b),
            }
            prop_assert!((report.macro_f1 - mf).abs() < 1e-9);
            for (c, v) in f1s {
                prop_assert!((f1(&report.confusion, c) - v).abs() < 1e-9);
            }
            prop_assert_eq!(report.confusion.total() as usize, pairs.len());
        }

        #[test]
        fn histogram_conserves_counts(ps in prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 0..40), bins in 1usize..25) {
            let h = histogram_before_after(&[trace_with(&ps)], bins).unwrap();
            prop_assert_eq!(h.iter().map(|b| b.count_before).sum::<u64>() as usize, ps.len());
            prop_assert_eq!(h.iter().map(|b| b.count_after).sum::<u64>() as usize, ps.len());
            for (a, _) in &ps {
                let i = h.iter().position(|b| *a >= b.bin_low && (*a < b.bin_high || (b.bin_high == 1.0 && *a <= 1.0))).unwrap();
                prop_assert_eq!(bin_of(*a, bins), i);
            }
        }
    }
}
