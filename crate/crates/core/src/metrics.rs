//! Detection counts, precision/recall/F1, confusion matrices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{BoxTarget, GridSpec, Situation};

/// Maximum number of prediction/target pairs under `compatible`, each side
/// used at most once (augmenting paths).
pub fn max_matching(
    predictions: usize,
    targets: usize,
    compatible: impl Fn(usize, usize) -> bool,
) -> usize {
    fn augment(
        p: usize,
        adj: &[Vec<usize>],
        seen: &mut [bool],
        owner: &mut [Option<usize>],
    ) -> bool {
        for &t in &adj[p] {
            if seen[t] {
                continue;
            }
            seen[t] = true;
            if owner[t].is_none_or(|q| augment(q, adj, seen, owner)) {
                owner[t] = Some(p);
                return true;
            }
        }
        false
    }
    let adj: Vec<Vec<usize>> = (0..predictions)
        .map(|p| (0..targets).filter(|&t| compatible(p, t)).collect())
        .collect();
    let mut owner = vec![None; targets];
    (0..predictions)
        .filter(|&p| augment(p, &adj, &mut vec![false; targets], &mut owner))
        .count()
}

/// `2PR / (P + R)`; zero whenever a term is undefined.
pub fn f1(t: usize, np: usize, nt: usize) -> Result<f64> {
    Ok(Metrics::from_counts(t, np, nt)?.f1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub t: usize,
    pub np: usize,
    pub nt: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when F1 fell back to 0 because precision or recall was undefined
    /// or both were zero.
    pub degenerate: bool,
}

impl Metrics {
    pub fn from_counts(t: usize, np: usize, nt: usize) -> Result<Self> {
        if t > np || t > nt {
            return Err(Error::invalid(format!(
                "inconsistent counts: T={t} exceeds NP={np} or NT={nt}"
            )));
        }
        let precision = if np > 0 { t as f64 / np as f64 } else { 0.0 };
        let recall = if nt > 0 { t as f64 / nt as f64 } else { 0.0 };
        let degenerate = np == 0 || nt == 0 || precision + recall == 0.0;
        let f1 = if degenerate {
            0.0
        } else {
            2.0 * recall * precision / (recall + precision)
        };
        Ok(Self {
            t,
            np,
            nt,
            precision,
            recall,
            f1,
            degenerate,
        })
    }

    pub fn csv_header() -> &'static str {
        "T,NP,NT,precision,recall,f1,degenerate"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{:.6},{}",
            self.t, self.np, self.nt, self.precision, self.recall, self.f1, self.degenerate
        )
    }
}

/// Rows are the actual situation, columns the predicted one.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[usize; 3]; 3],
}

impl ConfusionMatrix {
    pub fn record(&mut self, actual: Situation, predicted: Situation) {
        self.counts[actual.index()][predicted.index()] += 1;
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> usize {
        (0..3).map(|i| self.counts[i][i]).sum()
    }

    pub fn errors(&self) -> usize {
        self.total() - self.correct()
    }

    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => self.correct() as f64 / n as f64,
        }
    }

    pub fn row_sums(&self) -> [usize; 3] {
        self.counts.map(|row| row.iter().sum())
    }

    /// Errors that confuse "nothing there" with either object situation.
    pub fn none_vs_object_errors(&self) -> usize {
        let n = Situation::NoObject.index();
        (0..3).filter(|&i| i != n).map(|i| self.counts[n][i] + self.counts[i][n]).sum()
    }

    /// Errors between the two object situations.
    pub fn far_vs_close_errors(&self) -> usize {
        let (f, c) = (Situation::FarObjects.index(), Situation::CloseObject.index());
        self.counts[f][c] + self.counts[c][f]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("actual\\predicted");
        for s in Situation::ALL {
            out.push(',');
            out.push_str(s.name());
        }
        out.push('\n');
        for s in Situation::ALL {
            out.push_str(s.name());
            for c in self.counts[s.index()] {
                out.push_str(&format!(",{c}"));
            }
            out.push('\n');
        }
        out
    }
}

pub fn evaluate_meta(
    pairs: impl IntoIterator<Item = (Situation, Situation)>,
) -> Result<ConfusionMatrix> {
    let mut m = ConfusionMatrix::default();
    for (actual, predicted) in pairs {
        m.record(actual, predicted);
    }
    if m.total() == 0 {
        return Err(Error::invalid("meta evaluation needs a non-empty test set"));
    }
    Ok(m)
}

/// Counts for one far-view frame: predicted cells are those whose softmax
/// probability reaches `threshold`; a predicted cell is true when it holds an
/// unmatched ground-truth center.
pub fn rough_counts(
    probabilities: &[f64],
    centers: &[(f64, f64)],
    grid: &GridSpec,
    threshold: f64,
) -> Result<(usize, usize, usize)> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid(format!("score threshold {threshold} outside (0, 1)")));
    }
    if probabilities.len() != grid.cells() {
        return Err(Error::shape("rough_counts", &[probabilities.len()], &[grid.cells()]));
    }
    let predicted: Vec<usize> = (0..probabilities.len())
        .filter(|&i| probabilities[i] >= threshold)
        .collect();
    let cells = centers
        .iter()
        .map(|&(x, y)| grid.cell_index(x, y))
        .collect::<Result<Vec<_>>>()?;
    let t = max_matching(predicted.len(), cells.len(), |p, q| predicted[p] == cells[q]);
    Ok((t, predicted.len(), cells.len()))
}

pub fn evaluate_rough<'a>(
    frames: impl IntoIterator<Item = (&'a [f64], &'a [(f64, f64)])>,
    grid: &GridSpec,
    threshold: f64,
) -> Result<Metrics> {
    let (mut t, mut np, mut nt, mut n) = (0, 0, 0, 0);
    for (probs, centers) in frames {
        let (a, b, c) = rough_counts(probs, centers, grid, threshold)?;
        t += a;
        np += b;
        nt += c;
        n += 1;
    }
    if n == 0 {
        return Err(Error::invalid("rough evaluation needs a non-empty test set"));
    }
    Metrics::from_counts(t, np, nt)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineEvaluation {
    pub metrics: Metrics,
    pub mean_iou: f64,
}

/// One prediction and one target per close-view frame; a match needs
/// `IoU ≥ iou_threshold`.
pub fn evaluate_fine(pairs: &[(BoxTarget, BoxTarget)], iou_threshold: f64) -> Result<FineEvaluation> {
    if pairs.is_empty() {
        return Err(Error::invalid("fine evaluation needs a non-empty test set"));
    }
    let ious: Vec<f64> = pairs.iter().map(|(p, t)| p.iou(t)).collect();
    let t = ious.iter().filter(|&&v| v >= iou_threshold).count();
    Ok(FineEvaluation {
        metrics: Metrics::from_counts(t, pairs.len(), pairs.len())?,
        mean_iou: ious.iter().sum::<f64>() / ious.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f1_examples() {
        assert_eq!(f1(7, 7, 7).unwrap(), 1.0);
        assert_eq!(f1(0, 0, 5).unwrap(), 0.0);
        assert_eq!(f1(0, 3, 0).unwrap(), 0.0);
        let m = Metrics::from_counts(3, 4, 5).unwrap();
        assert_eq!((m.precision, m.recall), (0.75, 0.6));
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!(Metrics::from_counts(0, 4, 5).unwrap().degenerate);
        assert!(f1(5, 4, 6).is_err());
    }

    #[test]
    fn matching_respects_single_use() {
        assert_eq!(max_matching(3, 1, |_, _| true), 1);
        assert_eq!(max_matching(2, 2, |p, t| p == 0 || t == 0), 2);
        assert_eq!(max_matching(0, 4, |_, _| true), 0);
    }

    #[test]
    fn rough_counts_examples() {
        let g = GridSpec::default();
        let mut p = vec![0.0; 16];
        p[10] = 0.9;
        p[0] = 0.1;
        assert_eq!(rough_counts(&p, &[(0.5, 0.5)], &g, 0.5).unwrap(), (1, 1, 1));
        assert_eq!(rough_counts(&p, &[(0.5, 0.5), (0.55, 0.55)], &g, 0.5).unwrap(), (1, 1, 2));
        assert_eq!(rough_counts(&p, &[(0.1, 0.1)], &g, 0.5).unwrap(), (0, 1, 1));
        assert!(rough_counts(&p, &[(0.1, 0.1)], &g, 1.0).is_err());
        assert!(rough_counts(&p, &[(0.1, 0.1)], &g, 0.0).is_err());
    }

    #[test]
    fn fine_examples() {
        let t = BoxTarget::new(0.5, 0.5, 0.4, 0.4).unwrap();
        let p = BoxTarget::new(0.5, 0.5, 0.2, 0.2).unwrap();
        let e = evaluate_fine(&[(t, t)], 0.5).unwrap();
        assert_eq!((e.mean_iou, e.metrics.f1), (1.0, 1.0));
        let e = evaluate_fine(&[(p, t)], 0.5).unwrap();
        assert!((e.mean_iou - 0.25).abs() < 1e-12);
        assert_eq!(e.metrics.t, 0);
        assert!(evaluate_fine(&[], 0.5).is_err());
    }

    #[test]
    fn confusion_examples() {
        let truth = [
            Situation::NoObject,
            Situation::FarObjects,
            Situation::CloseObject,
            Situation::FarObjects,
        ];
        let perfect = evaluate_meta(truth.iter().map(|&s| (s, s))).unwrap();
        assert_eq!(perfect.accuracy(), 1.0);
        assert_eq!(perfect.counts, [[1, 0, 0], [0, 2, 0], [0, 0, 1]]);
        let constant = evaluate_meta(truth.iter().map(|&s| (s, Situation::FarObjects))).unwrap();
        assert_eq!(constant.counts, [[0, 1, 0], [0, 2, 0], [0, 1, 0]]);
        assert_eq!(constant.row_sums(), [1, 2, 1]);
        assert_eq!(constant.none_vs_object_errors(), 1);
        assert_eq!(constant.far_vs_close_errors(), 1);
        assert!(evaluate_meta(std::iter::empty()).is_err());
    }
}
