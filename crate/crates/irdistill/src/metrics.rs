//! Segmentation quality metrics: pixel IoU (dataset-level and per-image),
//! target-level detection probability, false-alarm rate, and the recovery
//! rate used to compare label-efficient runs against full supervision.
//!
//! Counting is exact integer arithmetic, so accumulating over a dataset in
//! any batch order yields identical reports.

use crate::tensor::{Real, Tensor};
use crate::{Error, Result};

/// A predicted component detects a target when their centroids are at most
/// this many pixels apart.
pub const CENTROID_MATCH_RADIUS: f64 = 3.0;

/// False alarms are reported per this many pixels.
pub const FA_SCALE: f64 = 1e6;

/// Raw counts underlying a [`MetricsReport`]; merging two of these is
/// associative, so datasets can be scored batch by batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricCounts {
    pub tp_px: u64,
    pub fp_px: u64,
    pub fn_px: u64,
    pub detected_targets: u64,
    pub total_targets: u64,
    pub total_px: u64,
    pub images: u64,
    /// Sum of per-image IoU values (empty-union images count as 1).
    pub iou_sum: f64,
}

impl MetricCounts {
    pub fn merge(&mut self, other: &MetricCounts) {
        self.tp_px += other.tp_px;
        self.fp_px += other.fp_px;
        self.fn_px += other.fn_px;
        self.detected_targets += other.detected_targets;
        self.total_targets += other.total_targets;
        self.total_px += other.total_px;
        self.images += other.images;
        self.iou_sum += other.iou_sum;
    }
}

/// Final metrics plus the counts they were computed from.
#[derive(Clone, Debug)]
pub struct MetricsReport {
    /// Dataset-level IoU: tp / (tp + fp + fn); 1 when the denominator is 0.
    pub miou: f64,
    /// Mean of per-image IoU values.
    pub niou: f64,
    /// Fraction of ground-truth targets matched by a predicted component
    /// centroid within [`CENTROID_MATCH_RADIUS`]; 1 when there are none.
    pub pd: f64,
    /// False-positive pixels per million pixels.
    pub fa: f64,
    /// Percentage of a reference score retained; filled in by
    /// [`recovery_rate`] when a baseline is available.
    pub recovery: Option<f64>,
    pub threshold: f64,
    pub counts: MetricCounts,
}

impl MetricsReport {
    pub fn from_counts(counts: MetricCounts, threshold: f64) -> Self {
        let denom = counts.tp_px + counts.fp_px + counts.fn_px;
        let miou = if denom == 0 { 1.0 } else { counts.tp_px as f64 / denom as f64 };
        let niou = if counts.images == 0 { 1.0 } else { counts.iou_sum / counts.images as f64 };
        let pd = if counts.total_targets == 0 {
            1.0
        } else {
            counts.detected_targets as f64 / counts.total_targets as f64
        };
        let fa = if counts.total_px == 0 {
            0.0
        } else {
            counts.fp_px as f64 / counts.total_px as f64 * FA_SCALE
        };
        MetricsReport { miou, niou, pd, fa, recovery: None, threshold, counts }
    }

    pub fn csv_header() -> &'static str {
        "run_id,split,miou,niou,pd,fa,recovery,tp_px,fp_px,fn_px,detected_targets,total_targets,total_px,threshold"
    }

    pub fn csv_row(&self, run_id: &str, split: &str) -> String {
        let recovery = self.recovery.map(|r| format!("{r}")).unwrap_or_default();
        format!(
            "{run_id},{split},{:.6},{:.6},{:.6},{:.4},{recovery},{},{},{},{},{},{},{}",
            self.miou,
            self.niou,
            self.pd,
            self.fa,
            self.counts.tp_px,
            self.counts.fp_px,
            self.counts.fn_px,
            self.counts.detected_targets,
            self.counts.total_targets,
            self.counts.total_px,
            self.threshold,
        )
    }
}

/// Integer percentage of the full-supervision score retained by `ours`.
pub fn recovery_rate(ours: f64, full_baseline: f64) -> Result<f64> {
    if !(full_baseline > 0.0) {
        return Err(Error::Contract(format!(
            "recovery_rate: baseline {full_baseline} is not positive"
        )));
    }
    Ok((100.0 * ours / full_baseline).round())
}

/// 8-connected components of a binary image; returns per-component pixel
/// lists in first-pixel scan order.
fn components(mask: &[bool], h: usize, w: usize) -> Vec<Vec<(usize, usize)>> {
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    let mut queue = Vec::new();
    for start in 0..h * w {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.clear();
        queue.push(start);
        let mut pixels = Vec::new();
        while let Some(idx) = queue.pop() {
            let (i, j) = (idx / w, idx % w);
            pixels.push((i, j));
            for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    let (ni, nj) = (i as i64 + di, j as i64 + dj);
                    if ni < 0 || nj < 0 || ni >= h as i64 || nj >= w as i64 {
                        continue;
                    }
                    let n = ni as usize * w + nj as usize;
                    if mask[n] && !seen[n] {
                        seen[n] = true;
                        queue.push(n);
                    }
                }
            }
        }
        out.push(pixels);
    }
    out
}

fn centroid(pixels: &[(usize, usize)]) -> (f64, f64) {
    let n = pixels.len() as f64;
    let (si, sj) = pixels
        .iter()
        .fold((0.0, 0.0), |(si, sj), &(i, j)| (si + i as f64, sj + j as f64));
    (si / n, sj / n)
}

/// Score a batch of probability maps against binary ground truth. Both must
/// be (N, 1, H, W) with matching shapes; a pixel is predicted positive when
/// its probability exceeds `threshold`.
pub fn accumulate_metrics<F: Real>(
    pred_prob: &Tensor<F>,
    gt: &Tensor<F>,
    threshold: f64,
) -> Result<MetricCounts> {
    let s = pred_prob.shape();
    if s != gt.shape() || s.len() != 4 || s[1] != 1 {
        return Err(Error::Dimension(format!(
            "metrics: pred {:?} vs gt {:?}, expected matching (N, 1, H, W)",
            s,
            gt.shape()
        )));
    }
    for v in gt.data() {
        let v = v.as_f64();
        if v != 0.0 && v != 1.0 {
            return Err(Error::Contract(format!("metrics: gt value {v} is not 0 or 1")));
        }
    }
    let (n, h, w) = (s[0], s[2], s[3]);
    let hw = h * w;
    let mut counts = MetricCounts::default();
    for img in 0..n {
        let pred: Vec<bool> =
            pred_prob.data()[img * hw..][..hw].iter().map(|v| v.as_f64() > threshold).collect();
        let truth: Vec<bool> =
            gt.data()[img * hw..][..hw].iter().map(|v| v.as_f64() == 1.0).collect();
        let (mut tp, mut fp, mut fneg) = (0u64, 0u64, 0u64);
        for (p, t) in pred.iter().zip(&truth) {
            match (p, t) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                _ => {}
            }
        }
        counts.tp_px += tp;
        counts.fp_px += fp;
        counts.fn_px += fneg;
        counts.total_px += hw as u64;
        counts.images += 1;
        let union = tp + fp + fneg;
        counts.iou_sum += if union == 0 { 1.0 } else { tp as f64 / union as f64 };

        let pred_centroids: Vec<(f64, f64)> =
            components(&pred, h, w).iter().map(|c| centroid(c)).collect();
        for target in components(&truth, h, w) {
            counts.total_targets += 1;
            let (ti, tj) = centroid(&target);
            let hit = pred_centroids
                .iter()
                .any(|&(pi, pj)| ((pi - ti).powi(2) + (pj - tj).powi(2)).sqrt() <= CENTROID_MATCH_RADIUS);
            if hit {
                counts.detected_targets += 1;
            }
        }
    }
    Ok(counts)
}

/// One-shot scoring of a full dataset already materialized in memory.
pub fn segmentation_metrics<F: Real>(
    pred_prob: &Tensor<F>,
    gt: &Tensor<F>,
    threshold: f64,
) -> Result<MetricsReport> {
    let counts = accumulate_metrics(pred_prob, gt, threshold)?;
    Ok(MetricsReport::from_counts(counts, threshold))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn image(h: usize, w: usize, ones: &[(usize, usize)]) -> Tensor<f64> {
        let mut t = Tensor::zeros(&[1, 1, h, w]);
        for &(i, j) in ones {
            t.data_mut()[i * w + j] = 1.0;
        }
        t
    }

    fn block(i0: usize, j0: usize, side: usize) -> Vec<(usize, usize)> {
        let mut v = Vec::new();
        for i in i0..i0 + side {
            for j in j0..j0 + side {
                v.push((i, j));
            }
        }
        v
    }

    #[test]
    fn exact_prediction_scores_perfectly() {
        let gt = image(8, 8, &block(2, 2, 3));
        let r = segmentation_metrics(&gt, &gt, 0.5).unwrap();
        assert_eq!(r.miou, 1.0);
        assert_eq!(r.niou, 1.0);
        assert_eq!(r.pd, 1.0);
        assert_eq!(r.fa, 0.0);
        assert_eq!(r.counts.tp_px, 9);
        assert_eq!(r.counts.total_targets, 1);
    }

    #[test]
    fn empty_prediction_on_a_real_target_scores_zero() {
        let gt = image(8, 8, &block(2, 2, 3));
        let pred = Tensor::zeros(&[1, 1, 8, 8]);
        let r = segmentation_metrics(&pred, &gt, 0.5).unwrap();
        assert_eq!(r.miou, 0.0);
        assert_eq!(r.niou, 0.0);
        assert_eq!(r.pd, 0.0);
        assert_eq!(r.fa, 0.0);
    }

    #[test]
    fn empty_scene_with_empty_prediction_is_perfect() {
        let zeros = Tensor::<f64>::zeros(&[1, 1, 8, 8]);
        let r = segmentation_metrics(&zeros, &zeros, 0.5).unwrap();
        assert_eq!(r.miou, 1.0);
        assert_eq!(r.niou, 1.0);
        assert_eq!(r.pd, 1.0);
        assert_eq!(r.fa, 0.0);
    }

    #[test]
    fn two_target_scene_matches_hand_counts() {
        // Targets: 2x2 blocks at (2,2) and (10,10). Prediction covers the
        // first exactly and adds a 5-pixel stray cluster far from both.
        let mut gt_px = block(2, 2, 2);
        gt_px.extend(block(10, 10, 2));
        let gt = image(16, 16, &gt_px);

        let mut pred_px = block(2, 2, 2);
        pred_px.extend([(14, 2), (14, 3), (14, 4), (15, 2), (15, 3)]);
        let pred = image(16, 16, &pred_px);

        let r = segmentation_metrics(&pred, &gt, 0.5).unwrap();
        assert_eq!(r.counts.tp_px, 4);
        assert_eq!(r.counts.fp_px, 5);
        assert_eq!(r.counts.fn_px, 4);
        assert_eq!(r.pd, 0.5);
        assert!((r.fa - 5.0 / 256.0 * 1e6).abs() <= 1e-9);
        assert!((r.miou - 4.0 / 13.0).abs() <= 1e-12);
        assert!((r.niou - 4.0 / 13.0).abs() <= 1e-12);
    }

    #[test]
    fn centroid_match_respects_the_radius() {
        let gt = image(16, 16, &[(8, 8)]);
        // Centroid distance 3 exactly: detected.
        let close = image(16, 16, &[(8, 11)]);
        assert_eq!(segmentation_metrics(&close, &gt, 0.5).unwrap().pd, 1.0);
        // Distance 4: missed even though pixels exist.
        let far = image(16, 16, &[(8, 12)]);
        assert_eq!(segmentation_metrics(&far, &gt, 0.5).unwrap().pd, 0.0);
    }

    #[test]
    fn diagonal_pixels_form_one_component() {
        // 8-connectivity: a diagonal chain is a single target whose centroid
        // sits between the pixels.
        let gt = image(8, 8, &[(2, 2), (3, 3), (4, 4)]);
        let pred = image(8, 8, &[(3, 3)]);
        let r = segmentation_metrics(&pred, &gt, 0.5).unwrap();
        assert_eq!(r.counts.total_targets, 1);
        assert_eq!(r.pd, 1.0);
    }

    #[test]
    fn miou_is_recomputable_from_the_stored_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pred = Tensor::from_fn(&[3, 1, 12, 12], |_| rng.gen_range(0.0..1.0));
        let gt = Tensor::from_fn(&[3, 1, 12, 12], |_| if rng.gen_bool(0.2) { 1.0 } else { 0.0 });
        let r = segmentation_metrics(&pred, &gt, 0.5).unwrap();
        let c = &r.counts;
        assert_eq!(r.miou, c.tp_px as f64 / (c.tp_px + c.fp_px + c.fn_px) as f64);
        assert_eq!(c.tp_px + c.fn_px, gt.data().iter().filter(|v| **v == 1.0).count() as u64);
    }

    #[test]
    fn batch_accumulation_matches_one_shot_scoring() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pred = Tensor::from_fn(&[4, 1, 10, 10], |_| rng.gen_range(0.0..1.0));
        let gt = Tensor::from_fn(&[4, 1, 10, 10], |_| if rng.gen_bool(0.15) { 1.0 } else { 0.0 });
        let whole = accumulate_metrics(&pred, &gt, 0.5).unwrap();

        let slice = |t: &Tensor<f64>, img: usize| {
            Tensor::new(&[1, 1, 10, 10], t.data()[img * 100..][..100].to_vec()).unwrap()
        };
        let mut merged = MetricCounts::default();
        for img in 0..4 {
            let part = accumulate_metrics(&slice(&pred, img), &slice(&gt, img), 0.5).unwrap();
            merged.merge(&part);
        }
        assert_eq!(whole, merged);
    }

    #[test]
    fn non_binary_ground_truth_is_rejected() {
        let pred = Tensor::zeros(&[1, 1, 4, 4]);
        let gt = Tensor::full(&[1, 1, 4, 4], 0.25);
        assert!(matches!(segmentation_metrics(&pred, &gt, 0.5), Err(Error::Contract(_))));
        let wrong = Tensor::zeros(&[1, 2, 4, 4]);
        assert!(matches!(
            segmentation_metrics(&pred, &wrong, 0.5),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn recovery_rate_rounds_to_integer_percent() {
        assert_eq!(recovery_rate(65.26, 63.05).unwrap(), 104.0);
        assert_eq!(recovery_rate(56.90, 62.52).unwrap(), 91.0);
        assert_eq!(recovery_rate(0.42, 0.42).unwrap(), 100.0);
        assert!(matches!(recovery_rate(1.0, 0.0), Err(Error::Contract(_))));
        assert!(matches!(recovery_rate(1.0, -2.0), Err(Error::Contract(_))));
    }

    #[test]
    fn csv_row_carries_every_field() {
        let gt = image(8, 8, &block(2, 2, 3));
        let mut r = segmentation_metrics(&gt, &gt, 0.5).unwrap();
        r.recovery = Some(recovery_rate(0.9, 0.9).unwrap());
        let row = r.csv_row("run-a", "val");
        assert_eq!(row, "run-a,val,1.000000,1.000000,1.000000,0.0000,100,9,0,0,1,1,64,0.5");
        assert_eq!(
            MetricsReport::csv_header().split(',').count(),
            row.split(',').count()
        );
    }

    #[test]
    fn threshold_controls_binarization() {
        let mut pred = Tensor::zeros(&[1, 1, 4, 4]);
        pred.data_mut()[5] = 0.6;
        let gt = image(4, 4, &[(1, 1)]);
        assert_eq!(segmentation_metrics(&pred, &gt, 0.5).unwrap().miou, 1.0);
        assert_eq!(segmentation_metrics(&pred, &gt, 0.7).unwrap().miou, 0.0);
        // A probability exactly at the threshold stays negative.
        assert_eq!(segmentation_metrics(&pred, &gt, 0.6).unwrap().miou, 0.0);
    }
}
