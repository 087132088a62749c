//! Expected calibration error over equal-width confidence bins.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::EncoderModel;
use crate::tasks::Dataset;
use crate::tensor::softmax_rows;
use crate::Tensor;

pub const DEFAULT_BINS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    /// Maximum class probability.
    pub confidence: f64,
    pub predicted: usize,
    pub label: usize,
}

impl PredictionRecord {
    pub fn correct(&self) -> bool {
        self.predicted == self.label
    }

    /// Confidence and arg-max class of a logit vector. Ties go to the lowest index.
    pub fn from_logits(logits: &Tensor, label: usize) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::Input("empty logits".into()));
        }
        let row = Tensor::new(vec![1, logits.len()], logits.data().to_vec())?;
        let probs = softmax_rows(&row, None)?;
        let mut predicted = 0;
        for (k, &p) in probs.data().iter().enumerate() {
            if p > probs.data()[predicted] {
                predicted = k;
            }
        }
        Ok(Self {
            confidence: probs.data()[predicted],
            predicted,
            label,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub low: f64,
    pub high: f64,
    pub count: usize,
    /// Zero for an empty bin.
    pub mean_confidence: f64,
    /// Zero for an empty bin.
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub n_bins: usize,
    pub bins: Vec<CalibrationBin>,
    pub total: usize,
    pub ece: f64,
}

impl CalibrationReport {
    /// ECE recomputed from the bin summaries alone.
    pub fn ece_from_bins(&self) -> f64 {
        let n = self.total as f64;
        self.bins
            .iter()
            .filter(|b| b.count > 0)
            .map(|b| b.count as f64 / n * (b.accuracy - b.mean_confidence).abs())
            .sum()
    }

    /// `bin_low,bin_high,count,mean_confidence,accuracy`, one row per bin.
    pub fn reliability_csv(&self) -> String {
        let mut out = String::from("bin_low,bin_high,count,mean_confidence,accuracy\n");
        for b in &self.bins {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                b.low, b.high, b.count, b.mean_confidence, b.accuracy
            ));
        }
        out
    }
}

/// 0-based bin of confidence `c`: `⌈c·n⌉` in 1-based terms, with `c = 0` in
/// the first bin.
pub fn bin_index(c: f64, n_bins: usize) -> usize {
    let b = (c * n_bins as f64).ceil() as usize;
    b.clamp(1, n_bins) - 1
}

pub fn ece(records: &[PredictionRecord], n_bins: usize) -> Result<CalibrationReport> {
    if records.is_empty() {
        return Err(Error::Input("ece needs at least one prediction".into()));
    }
    if n_bins == 0 {
        return Err(Error::Input("ece needs at least one bin".into()));
    }
    let mut count = vec![0usize; n_bins];
    let mut conf = vec![0.0f64; n_bins];
    let mut hits = vec![0usize; n_bins];
    for r in records {
        if !(0.0..=1.0).contains(&r.confidence) {
            return Err(Error::Input(format!("confidence {} outside [0, 1]", r.confidence)));
        }
        let b = bin_index(r.confidence, n_bins);
        count[b] += 1;
        conf[b] += r.confidence;
        hits[b] += usize::from(r.correct());
    }
    let bins: Vec<CalibrationBin> = (0..n_bins)
        .map(|b| {
            let (mean_confidence, accuracy) = if count[b] == 0 {
                (0.0, 0.0)
            } else {
                (conf[b] / count[b] as f64, hits[b] as f64 / count[b] as f64)
            };
            CalibrationBin {
                low: b as f64 / n_bins as f64,
                high: (b + 1) as f64 / n_bins as f64,
                count: count[b],
                mean_confidence,
                accuracy,
            }
        })
        .collect();
    let mut report = CalibrationReport {
        n_bins,
        bins,
        total: records.len(),
        ece: 0.0,
    };
    report.ece = report.ece_from_bins();
    Ok(report)
}

/// Evaluation-mode predictions for every example, in dataset order.
pub fn collect_predictions(model: &EncoderModel, data: &Dataset) -> Result<Vec<PredictionRecord>> {
    data.examples
        .iter()
        .map(|e| PredictionRecord::from_logits(&model.forward(&e.tokens, false, 0)?, e.label))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(confidence: f64, correct: bool) -> PredictionRecord {
        PredictionRecord {
            confidence,
            predicted: 0,
            label: usize::from(!correct),
        }
    }

    #[test]
    fn extremes() {
        let perfect = vec![rec(1.0, true); 7];
        assert_eq!(ece(&perfect, 10).unwrap().ece, 0.0);
        let worst = vec![rec(1.0, false); 7];
        assert_eq!(ece(&worst, 10).unwrap().ece, 1.0);
    }

    #[test]
    fn split_bin() {
        let r = ece(&[rec(0.95, true), rec(0.95, false)], 10).unwrap();
        assert!((r.ece - 0.45).abs() < 1e-12);
        let b = &r.bins[9];
        assert_eq!(b.count, 2);
        assert_eq!(b.accuracy, 0.5);
        assert!((b.mean_confidence - 0.95).abs() < 1e-15);
    }

    #[test]
    fn bin_boundaries() {
        assert_eq!(bin_index(0.0, 10), 0);
        assert_eq!(bin_index(0.05, 10), 0);
        assert_eq!(bin_index(0.5, 10), 4);
        assert_eq!(bin_index(0.51, 10), 5);
        assert_eq!(bin_index(1.0, 10), 9);
        assert_eq!(bin_index(0.7, 1), 0);
    }

    #[test]
    fn errors() {
        assert!(matches!(ece(&[], 10), Err(Error::Input(_))));
        assert!(matches!(ece(&[rec(0.5, true)], 0), Err(Error::Input(_))));
        assert!(matches!(ece(&[rec(1.5, true)], 10), Err(Error::Input(_))));
    }

    #[test]
    fn from_logits_cases() {
        let r = PredictionRecord::from_logits(&Tensor::vector(vec![10.0, -10.0]), 0).unwrap();
        assert_eq!(r.predicted, 0);
        assert!((r.confidence - 1.0).abs() < 1e-8);
        let u = PredictionRecord::from_logits(&Tensor::vector(vec![0.3; 4]), 2).unwrap();
        assert!((u.confidence - 0.25).abs() < 1e-15);
    }

    #[test]
    fn csv_layout() {
        let r = ece(&[rec(0.95, true)], 2).unwrap();
        let csv = r.reliability_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "bin_low,bin_high,count,mean_confidence,accuracy");
        assert_eq!(lines[1], "0,0.5,0,0,0");
        assert_eq!(lines[2], "0.5,1,1,0.95,1");
    }

    fn records() -> impl Strategy<Value = Vec<PredictionRecord>> {
        prop::collection::vec((0.0f64..=1.0, 0usize..3, 0usize..3), 1..60).prop_map(|v| {
            v.into_iter()
                .map(|(confidence, predicted, label)| PredictionRecord {
                    confidence,
                    predicted,
                    label,
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn permutation_invariant(rs in records(), seed in any::<u64>()) {
            let mut shuffled = rs.clone();
            crate::rng::SplitMix64::new(seed).shuffle(&mut shuffled);
            let a = ece(&rs, 10).unwrap();
            let b = ece(&shuffled, 10).unwrap();
            prop_assert!((a.ece - b.ece).abs() < 1e-12);
            prop_assert_eq!(
                a.bins.iter().map(|b| b.count).collect::<Vec<_>>(),
                b.bins.iter().map(|b| b.count).collect::<Vec<_>>()
            );
        }

        #[test]
        fn report_is_consistent(rs in records(), n_bins in 1usize..20) {
            let r = ece(&rs, n_bins).unwrap();
            prop_assert_eq!(r.bins.iter().map(|b| b.count).sum::<usize>(), rs.len());
            prop_assert!((0.0..=1.0).contains(&r.ece));
            // Independent per-record evaluation of the definition.
            let n = rs.len() as f64;
            let mut direct = 0.0;
            for b in 0..n_bins {
                let members: Vec<&PredictionRecord> = rs
                    .iter()
                    .filter(|x| {
                        let k = (x.confidence * n_bins as f64).ceil() as usize;
                        k.max(1).min(n_bins) - 1 == b
                    })
                    .collect();
                if members.is_empty() {
                    continue;
                }
                let m = members.len() as f64;
                let acc = members.iter().filter(|x| x.predicted == x.label).count() as f64 / m;
                let conf = members.iter().map(|x| x.confidence).sum::<f64>() / m;
                direct += m / n * (acc - conf).abs();
            }
            prop_assert!((r.ece - direct).abs() < 1e-12);
        }

        #[test]
        fn logit_scaling_keeps_argmax(l in prop::collection::vec(-5.0f64..5.0, 2..6), s in 0.1f64..10.0) {
            let a = PredictionRecord::from_logits(&Tensor::vector(l.clone()), 0).unwrap();
            let b = PredictionRecord::from_logits(&Tensor::vector(l.iter().map(|v| v * s).collect()), 0).unwrap();
            prop_assert_eq!(a.predicted, b.predicted);
        }
    }
}
