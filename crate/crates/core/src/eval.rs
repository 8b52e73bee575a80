//! Per-class F1, macro F1 and edge-cut metrics.
//!
//! Conventions: a ratio with a zero denominator is 0 for per-class scores;
//! the macro average skips classes that appear neither in the ground truth
//! nor in the predictions. Cut precision is 1 when no cut is predicted and
//! cut recall is 1 when no cut exists.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::format::Prediction;
use crate::graph::{LabelSpace, CUT_LABEL};
use crate::learning::TrainSample;

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// `2PR / (P + R)`, 0 when both are 0.
pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassScore {
    pub label: usize,
    pub support: u64,
    pub predicted: u64,
    pub true_positives: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ClassScore {
    /// Whether the class takes part in the macro average.
    pub fn present(&self) -> bool {
        self.support > 0 || self.predicted > 0
    }
}

/// Confusion counts `counts[gt - 1][pred - 1]` over one label space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    pub labels: LabelSpace,
    pub counts: Vec<Vec<u64>>,
}

impl Confusion {
    pub fn new(labels: LabelSpace) -> Self {
        let l = labels.len();
        Confusion {
            labels,
            counts: vec![vec![0; l]; l],
        }
    }

    pub fn add(&mut self, gt: usize, pred: usize) -> Result<()> {
        let l = self.labels.len();
        for (what, v) in [("ground-truth label", gt), ("predicted label", pred)] {
            if v == 0 || v > l {
                return Err(Error::IndexOutOfRange {
                    context: format!("{what} (labels are 1..={l})"),
                    index: v,
                    len: l,
                });
            }
        }
        self.counts[gt - 1][pred - 1] += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) -> Result<()> {
        if self.labels != other.labels {
            return Err(Error::Shape(
                "cannot merge confusion matrices of different label spaces".into(),
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let correct: u64 = (0..self.labels.len()).map(|l| self.counts[l][l]).sum();
        ratio(correct, self.total())
    }

    pub fn scores(&self) -> Vec<ClassScore> {
        let l = self.labels.len();
        (0..l)
            .map(|c| {
                let tp = self.counts[c][c];
                let support: u64 = self.counts[c].iter().sum();
                let predicted: u64 = (0..l).map(|g| self.counts[g][c]).sum();
                let precision = ratio(tp, predicted);
                let recall = ratio(tp, support);
                ClassScore {
                    label: c + 1,
                    support,
                    predicted,
                    true_positives: tp,
                    precision,
                    recall,
                    f1: f1(precision, recall),
                }
            })
            .collect()
    }

    /// Mean F1 over present classes; 0 when no class is present.
    pub fn macro_f1(&self) -> f64 {
        let present: Vec<f64> = self.scores().iter().filter(|s| s.present()).map(|s| s.f1).collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModalityReport {
    pub id: String,
    pub confusion: Confusion,
}

/// Confusion of one label sequence pair.
pub fn f1_scores(pred: &[usize], gt: &[usize], labels: &LabelSpace) -> Result<Confusion> {
    if pred.len() != gt.len() {
        return Err(Error::dims("predicted labels", gt.len(), pred.len()));
    }
    let mut c = Confusion::new(labels.clone());
    for (&p, &g) in pred.iter().zip(gt) {
        c.add(g, p)?;
    }
    Ok(c)
}

/// Counts of cut (label 0) decisions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CutCounts {
    pub true_positives: u64,
    pub false_positives: u64,
    pub false_negatives: u64,
    pub total: u64,
}

impl CutCounts {
    pub fn from_labels(pred: &[usize], gt: &[usize]) -> Result<Self> {
        if pred.len() != gt.len() {
            return Err(Error::dims("predicted latent labels", gt.len(), pred.len()));
        }
        let mut c = CutCounts::default();
        for (&p, &g) in pred.iter().zip(gt) {
            match (p == CUT_LABEL, g == CUT_LABEL) {
                (true, true) => c.true_positives += 1,
                (true, false) => c.false_positives += 1,
                (false, true) => c.false_negatives += 1,
                (false, false) => {}
            }
        }
        c.total = pred.len() as u64;
        Ok(c)
    }

    pub fn merge(&mut self, other: &CutCounts) {
        self.true_positives += other.true_positives;
        self.false_positives += other.false_positives;
        self.false_negatives += other.false_negatives;
        self.total += other.total;
    }

    pub fn precision(&self) -> f64 {
        let predicted = self.true_positives + self.false_positives;
        if predicted == 0 {
            1.0
        } else {
            self.true_positives as f64 / predicted as f64
        }
    }

    pub fn recall(&self) -> f64 {
        let actual = self.true_positives + self.false_negatives;
        if actual == 0 {
            1.0
        } else {
            self.true_positives as f64 / actual as f64
        }
    }
}

/// Precision and recall of predicting the cut label.
pub fn edge_cut_metrics(pred: &[usize], gt: &[usize]) -> Result<(f64, f64)> {
    let c = CutCounts::from_labels(pred, gt)?;
    Ok((c.precision(), c.recall()))
}

/// Metrics aggregated over one or more scenes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalReport {
    pub modalities: Vec<ModalityReport>,
    /// Present when the predictions carried latent decisions.
    pub cuts: Option<CutCounts>,
}

impl EvalReport {
    /// Compare `pred` with the ground truth of `sample`.
    pub fn evaluate(sample: &TrainSample, pred: &Prediction) -> Result<Self> {
        let g = &sample.graph;
        if pred.id != sample.id {
            return Err(Error::Config(format!(
                "prediction for scene {:?} paired with scene {:?}",
                pred.id, sample.id
            )));
        }
        if pred.nodes.len() != g.node_count() {
            return Err(Error::dims(
                format!("node labels of scene {}", sample.id),
                g.node_count(),
                pred.nodes.len(),
            ));
        }
        let mut modalities: Vec<ModalityReport> = g
            .modalities()
            .iter()
            .map(|m| ModalityReport {
                id: m.id.clone(),
                confusion: Confusion::new(m.labels.clone()),
            })
            .collect();
        for (i, (n, &p)) in g.nodes().iter().zip(&pred.nodes).enumerate() {
            let gt = n.gt.ok_or(Error::MissingGroundTruth { node: i })?;
            modalities[n.modality].confusion.add(gt, p)?;
        }

        let cuts = if pred.latent.is_empty() {
            None
        } else {
            let aug = if g.is_augmented() {
                g.clone()
            } else {
                g.augment_with_latent()?
            };
            let latent = aug.latent_nodes();
            let mut p = Vec::with_capacity(pred.latent.len());
            let mut t = Vec::with_capacity(pred.latent.len());
            for &(k, l) in &pred.latent {
                let gt = latent.get(k).and_then(|ln| ln.gt).ok_or(Error::MissingGroundTruth {
                    node: aug.latent_variable(k),
                })?;
                p.push(l);
                t.push(gt);
            }
            Some(CutCounts::from_labels(&p, &t)?)
        };
        Ok(EvalReport { modalities, cuts })
    }

    pub fn merge(&mut self, other: &EvalReport) -> Result<()> {
        if self.modalities.len() != other.modalities.len()
            || self.modalities.iter().zip(&other.modalities).any(|(a, b)| a.id != b.id)
        {
            return Err(Error::Shape("cannot merge reports over different modalities".into()));
        }
        for (a, b) in self.modalities.iter_mut().zip(&other.modalities) {
            a.confusion.merge(&b.confusion)?;
        }
        self.cuts = match (self.cuts, other.cuts) {
            (Some(mut a), Some(b)) => {
                a.merge(&b);
                Some(a)
            }
            (a, b) => a.or(b),
        };
        Ok(())
    }

    pub fn aggregate(reports: &[EvalReport]) -> Result<EvalReport> {
        let (first, rest) = reports
            .split_first()
            .ok_or_else(|| Error::Config("no predictions to evaluate".into()))?;
        let mut out = first.clone();
        for r in rest {
            out.merge(r)?;
        }
        Ok(out)
    }

    pub fn modality(&self, id: &str) -> Option<&ModalityReport> {
        self.modalities.iter().find(|m| m.id == id)
    }

    /// Human-readable tables.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for m in &self.modalities {
            let c = &m.confusion;
            let _ = writeln!(out, "modality {} ({} nodes)", m.id, c.total());
            let _ = writeln!(
                out,
                "  {:<20} {:>8} {:>8} {:>9} {:>9} {:>9}",
                "class", "support", "pred", "precision", "recall", "f1"
            );
            for s in c.scores() {
                let name = c.labels.name(s.label).unwrap_or("?");
                if s.present() {
                    let _ = writeln!(
                        out,
                        "  {:<20} {:>8} {:>8} {:>9.4} {:>9.4} {:>9.4}",
                        name, s.support, s.predicted, s.precision, s.recall, s.f1
                    );
                } else {
                    let _ = writeln!(out, "  {:<20} {:>8} {:>8} {:>9} {:>9} {:>9}", name, 0, 0, "#", "#", "#");
                }
            }
            let _ = writeln!(out, "  accuracy {:.4}  macro-f1 {:.4}", c.accuracy(), c.macro_f1());
        }
        if let Some(cuts) = &self.cuts {
            let _ = writeln!(
                out,
                "cuts: {} links, precision {:.4}, recall {:.4}",
                cuts.total,
                cuts.precision(),
                cuts.recall()
            );
        }
        out
    }

    /// One flat `key=value` record per line: one per (modality, class), one
    /// aggregate per modality, one for cuts.
    pub fn to_records(&self) -> String {
        let mut out = String::new();
        for m in &self.modalities {
            let c = &m.confusion;
            for s in c.scores() {
                let _ = writeln!(
                    out,
                    "modality={} class={} support={} predicted={} tp={} precision={:?} recall={:?} f1={:?}",
                    m.id,
                    c.labels.name(s.label).unwrap_or("?"),
                    s.support,
                    s.predicted,
                    s.true_positives,
                    s.precision,
                    s.recall,
                    s.f1
                );
            }
            let _ = writeln!(
                out,
                "modality={} class=* nodes={} accuracy={:?} macro_f1={:?}",
                m.id,
                c.total(),
                c.accuracy(),
                c.macro_f1()
            );
        }
        if let Some(cuts) = &self.cuts {
            let _ = writeln!(
                out,
                "cuts links={} tp={} fp={} fn={} precision={:?} recall={:?}",
                cuts.total,
                cuts.true_positives,
                cuts.false_positives,
                cuts.false_negatives,
                cuts.precision(),
                cuts.recall()
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space(l: usize) -> LabelSpace {
        LabelSpace::numbered(l, "c").unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let gt = [1, 2, 3, 3, 1];
        let c = f1_scores(&gt, &gt, &space(3)).unwrap();
        assert!(c.scores().iter().all(|s| s.f1 == 1.0));
        assert_eq!(c.macro_f1(), 1.0);
    }

    #[test]
    fn two_thirds() {
        // Class 1: one hit, one false alarm.
        let c = f1_scores(&[1, 1], &[1, 2], &space(2)).unwrap();
        assert!((c.scores()[0].f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn absent_classes_excluded() {
        let c = f1_scores(&[1, 2], &[1, 2], &space(4)).unwrap();
        assert_eq!(c.macro_f1(), 1.0);
        assert!(!c.scores()[3].present());
    }

    #[test]
    fn out_of_range_label() {
        assert!(f1_scores(&[0], &[1], &space(2)).is_err());
        assert!(f1_scores(&[1], &[3], &space(2)).is_err());
        assert!(f1_scores(&[1], &[1, 1], &space(2)).is_err());
    }

    #[test]
    fn cut_metrics() {
        assert_eq!(edge_cut_metrics(&[0, 1, 0], &[0, 1, 0]).unwrap(), (1.0, 1.0));
        assert_eq!(edge_cut_metrics(&[1, 2], &[1, 2]).unwrap(), (1.0, 1.0));
        // gt cuts {a, b}, predicted {b, c}.
        assert_eq!(edge_cut_metrics(&[1, 0, 0], &[0, 0, 1]).unwrap(), (0.5, 0.5));
    }
}
