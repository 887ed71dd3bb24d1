//! Dataset-level precision / recall / F1 / accuracy over binary masks.
//!
//! Counts aggregate over every pixel of every sample before any ratio is
//! formed, so the report reflects the whole dataset rather than a mean of
//! per-image scores. A ratio with a zero denominator is defined as 0.

use crate::error::{Error, Result};
use crate::lidar::MaskGrid;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SampleCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    pub true_neg: u64,
}

impl SampleCounts {
    fn add(&mut self, other: &SampleCounts) {
        self.true_pos += other.true_pos;
        self.false_pos += other.false_pos;
        self.false_neg += other.false_neg;
        self.true_neg += other.true_neg;
    }

    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.false_neg + self.true_neg
    }
}

#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    pub true_neg: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub per_sample: Vec<SampleCounts>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl EvalReport {
    pub fn from_counts(total: SampleCounts, per_sample: Vec<SampleCounts>) -> Self {
        let precision = ratio(total.true_pos, total.true_pos + total.false_pos);
        let recall = ratio(total.true_pos, total.true_pos + total.false_neg);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        let accuracy = ratio(total.true_pos + total.true_neg, total.total());
        EvalReport {
            true_pos: total.true_pos,
            false_pos: total.false_pos,
            false_neg: total.false_neg,
            true_neg: total.true_neg,
            precision,
            recall,
            f1,
            accuracy,
            per_sample,
        }
    }

    /// `TP,FP,FN,TN,precision,recall,f1,accuracy` with fixed 6-digit floats.
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6}",
            self.true_pos,
            self.false_pos,
            self.false_neg,
            self.true_neg,
            self.precision,
            self.recall,
            self.f1,
            self.accuracy
        )
    }
}

fn count_pair(pred: &MaskGrid, truth: &MaskGrid) -> SampleCounts {
    let mut c = SampleCounts::default();
    for (&p, &t) in pred.data.iter().zip(&truth.data) {
        match (p, t) {
            (1, 1) => c.true_pos += 1,
            (1, 0) => c.false_pos += 1,
            (0, 1) => c.false_neg += 1,
            _ => c.true_neg += 1,
        }
    }
    c
}

/// Aggregates confusion counts over all (prediction, truth) pairs.
pub fn evaluate(preds: &[MaskGrid], truths: &[MaskGrid]) -> Result<EvalReport> {
    if preds.len() != truths.len() {
        return Err(Error::dim(
            "evaluate",
            format!("{} predictions vs {} truths", preds.len(), truths.len()),
        ));
    }
    let mut total = SampleCounts::default();
    let mut per_sample = Vec::with_capacity(preds.len());
    for (i, (p, t)) in preds.iter().zip(truths).enumerate() {
        if p.height != t.height || p.width != t.width {
            return Err(Error::dim(
                "evaluate",
                format!(
                    "sample {i}: prediction {}x{} vs truth {}x{}",
                    p.height, p.width, t.height, t.width
                ),
            ));
        }
        p.validate_binary()?;
        t.validate_binary()?;
        let c = count_pair(p, t);
        total.add(&c);
        per_sample.push(c);
    }
    Ok(EvalReport::from_counts(total, per_sample))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lidar::Grid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask(h: usize, w: usize, ones: &[(usize, usize)]) -> MaskGrid {
        let mut g = Grid::filled(h, w, 0u8);
        for &(hi, wi) in ones {
            g.set(hi, wi, 1);
        }
        g
    }

    #[test]
    fn class_skew_example() {
        // 100 pixels: 90 non-cloud, 10 cloud. Prediction correct on all 90
        // non-cloud and exactly 1 cloud.
        let truth_ones: Vec<(usize, usize)> = (0..10).map(|i| (0, i)).collect();
        let truth = mask(10, 10, &truth_ones);
        let pred = mask(10, 10, &[(0, 0)]);
        let r = evaluate(&[pred], &[truth]).unwrap();
        assert_eq!(r.accuracy, 0.91);
        assert_eq!(r.recall, 0.10);
        assert_eq!(r.precision, 1.0);
        assert!((r.f1 - 2.0 * 0.1 / 1.1).abs() <= 1e-12);
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let truth = mask(4, 4, &[(1, 1), (2, 3)]);
        let r = evaluate(&[truth.clone()], &[truth]).unwrap();
        assert_eq!(r.precision, 1.0);
        assert_eq!(r.recall, 1.0);
        assert_eq!(r.f1, 1.0);
        assert_eq!(r.accuracy, 1.0);
    }

    #[test]
    fn degenerate_denominators_are_zero() {
        let truth = mask(2, 2, &[(0, 0)]);
        let pred = mask(2, 2, &[]);
        let r = evaluate(&[pred], &[truth]).unwrap();
        assert_eq!(r.precision, 0.0);
        assert_eq!(r.recall, 0.0);
        assert_eq!(r.f1, 0.0);
    }

    #[test]
    fn f1_is_the_harmonic_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let data_p: Vec<u8> = (0..64).map(|_| rng.gen_range(0..=1u8)).collect();
            let data_t: Vec<u8> = (0..64).map(|_| rng.gen_range(0..=1u8)).collect();
            let p = Grid::new(8, 8, data_p).unwrap();
            let t = Grid::new(8, 8, data_t).unwrap();
            let r = evaluate(&[p], &[t]).unwrap();
            if r.precision > 0.0 && r.recall > 0.0 {
                let expect = 2.0 * r.precision * r.recall / (r.precision + r.recall);
                assert!((r.f1 - expect).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn dataset_aggregation_is_permutation_and_concat_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let make = |rng: &mut ChaCha8Rng| -> MaskGrid {
            Grid::new(4, 6, (0..24).map(|_| rng.gen_range(0..=1u8)).collect()).unwrap()
        };
        let preds: Vec<MaskGrid> = (0..5).map(|_| make(&mut rng)).collect();
        let truths: Vec<MaskGrid> = (0..5).map(|_| make(&mut rng)).collect();
        let direct = evaluate(&preds, &truths).unwrap();

        let mut rp = preds.clone();
        let mut rt = truths.clone();
        rp.reverse();
        rt.reverse();
        let reversed = evaluate(&rp, &rt).unwrap();
        assert_eq!(direct.f1, reversed.f1);
        assert_eq!(direct.true_pos, reversed.true_pos);

        // Single concatenated grid gives the same dataset-level result.
        let cat = |gs: &[MaskGrid]| -> MaskGrid {
            Grid::new(20, 6, gs.iter().flat_map(|g| g.data.clone()).collect()).unwrap()
        };
        let concat = evaluate(&[cat(&preds)], &[cat(&truths)]).unwrap();
        assert_eq!(direct.f1, concat.f1);
        assert_eq!(direct.accuracy, concat.accuracy);
    }

    #[test]
    fn matches_brute_force_confusion_oracle() {
        // Independent recount: literal per-pixel double loop over the grid.
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        for _ in 0..50 {
            let h = rng.gen_range(2..10);
            let w = rng.gen_range(2..10);
            let p = Grid::new(h, w, (0..h * w).map(|_| rng.gen_range(0..=1u8)).collect()).unwrap();
            let t = Grid::new(h, w, (0..h * w).map(|_| rng.gen_range(0..=1u8)).collect()).unwrap();
            let (mut tp, mut fp, mut fneg, mut tn) = (0u64, 0u64, 0u64, 0u64);
            for hi in 0..h {
                for wi in 0..w {
                    match (p.get(hi, wi), t.get(hi, wi)) {
                        (1, 1) => tp += 1,
                        (1, 0) => fp += 1,
                        (0, 1) => fneg += 1,
                        _ => tn += 1,
                    }
                }
            }
            let r = evaluate(&[p], &[t]).unwrap();
            assert_eq!((r.true_pos, r.false_pos, r.false_neg, r.true_neg), (tp, fp, fneg, tn));
        }
    }

    #[test]
    fn counts_sum_to_total_pixels() {
        let truth = mask(5, 5, &[(0, 0), (4, 4)]);
        let pred = mask(5, 5, &[(0, 0), (1, 1)]);
        let r = evaluate(&[pred], &[truth]).unwrap();
        assert_eq!(r.true_pos + r.false_pos + r.false_neg + r.true_neg, 25);
    }
}
