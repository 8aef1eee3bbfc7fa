//! Classification metrics (per-class and mean ROC AUC) and visual
//! explanation extraction: picking the most active masks of a block,
//! upsampling them to input resolution, rendering overlays, and scoring
//! them against ground-truth regions.

use std::path::Path;

use serde_json::{json, Map, Value};

use crate::data::{pnm, Sample};
use crate::error::{Error, Result};
use crate::model::{BlockTrace, Model};
use crate::tensor::{kernels, Tape};

/// Mann–Whitney AUC with tie handling: (#concordant + ½·#ties)/(#pos·#neg),
/// computed from average ranks. Errors when either class is absent.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "roc_auc: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "roc_auc needs both classes, got {n_pos} positives / {n_neg} negatives"
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("roc_auc: NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("no NaN"));
    // Average ranks over tie groups (1-based ranks).
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let n_pos_f = n_pos as f64;
    Ok((rank_sum_pos - n_pos_f * (n_pos_f + 1.0) / 2.0) / (n_pos_f * n_neg as f64))
}

/// Arithmetic mean over the defined class AUCs; undefined entries are
/// excluded. Errors when every entry is undefined.
pub fn mean_auc(per_class: &[Option<f64>]) -> Result<f64> {
    let defined: Vec<f64> = per_class.iter().filter_map(|v| *v).collect();
    if defined.is_empty() {
        return Err(Error::Contract(
            "mean_auc: no class has a defined AUC".into(),
        ));
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

/// How a mask's activity is aggregated from its weighted mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivityMeasure {
    /// Total weighted-mask mass Σ_{h,w} wm.
    Mass,
    /// Peak weighted-mask value max_{h,w} wm.
    ArgmaxPeak,
}

/// Explanation data extracted from one block's forward trace.
pub struct ExplanationSet {
    pub stage: usize,
    pub block: usize,
    pub resolution: usize,
    /// Mask count L.
    pub n_masks: usize,
    pub masks: Vec<f64>,
    pub attn: Vec<f64>,
    pub weighted_masks: Vec<f64>,
    pub activities: Vec<f64>,
}

impl ExplanationSet {
    pub fn from_trace(bt: &BlockTrace, measure: ActivityMeasure) -> Self {
        let shape = bt.trace.weighted_masks.shape();
        let (l, hw) = (shape[0], shape[1] * shape[2]);
        let wm = bt.trace.weighted_masks.to_vec();
        let activities = (0..l)
            .map(|i| {
                let row = &wm[i * hw..(i + 1) * hw];
                match measure {
                    ActivityMeasure::Mass => row.iter().sum(),
                    ActivityMeasure::ArgmaxPeak => row.iter().copied().fold(f64::MIN, f64::max),
                }
            })
            .collect();
        ExplanationSet {
            stage: bt.stage,
            block: bt.block,
            resolution: bt.resolution,
            n_masks: l,
            masks: bt.trace.masks.to_vec(),
            attn: bt.trace.attn.to_vec(),
            weighted_masks: wm,
            activities,
        }
    }
}

/// One selected mask with its heatmap at target resolution.
pub struct ActiveMask {
    pub index: usize,
    pub activity: f64,
    /// Min-max normalized to [0,1]; all zeros when `flat` is set.
    pub heatmap: Vec<f64>,
    /// Degenerate weighted mask (no dynamic range).
    pub flat: bool,
}

/// Picks the k most active masks (ties broken by lowest index) and upsamples
/// their weighted masks to `(target_h, target_w)`.
pub fn select_active_masks(
    expl: &ExplanationSet,
    k: usize,
    target_h: usize,
    target_w: usize,
) -> Result<Vec<ActiveMask>> {
    if k > expl.n_masks {
        return Err(Error::Contract(format!(
            "select_active_masks: k={k} exceeds mask count {}",
            expl.n_masks
        )));
    }
    let mut order: Vec<usize> = (0..expl.n_masks).collect();
    order.sort_by(|&a, &b| {
        expl.activities[b]
            .partial_cmp(&expl.activities[a])
            .expect("finite activities")
            .then(a.cmp(&b))
    });
    let hw = expl.resolution * expl.resolution;
    let mut out = Vec::with_capacity(k);
    for &idx in order.iter().take(k) {
        let src = &expl.weighted_masks[idx * hw..(idx + 1) * hw];
        let up = bilinear_upsample(src, expl.resolution, expl.resolution, target_h, target_w);
        let max = up.iter().copied().fold(f64::MIN, f64::max);
        let min = up.iter().copied().fold(f64::MAX, f64::min);
        let flat = (max - min).abs() < 1e-12;
        let heatmap = if flat {
            vec![0.0; target_h * target_w]
        } else {
            up.iter().map(|v| (v - min) / (max - min)).collect()
        };
        out.push(ActiveMask {
            index: idx,
            activity: expl.activities[idx],
            heatmap,
            flat,
        });
    }
    Ok(out)
}

/// Bilinear upsampling with half-pixel centers.
pub fn bilinear_upsample(
    src: &[f64],
    src_h: usize,
    src_w: usize,
    dst_h: usize,
    dst_w: usize,
) -> Vec<f64> {
    assert_eq!(src.len(), src_h * src_w);
    let mut dst = vec![0.0; dst_h * dst_w];
    for y in 0..dst_h {
        let sy = ((y as f64 + 0.5) * src_h as f64 / dst_h as f64 - 0.5)
            .clamp(0.0, (src_h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(src_h - 1);
        let fy = sy - y0 as f64;
        for x in 0..dst_w {
            let sx = ((x as f64 + 0.5) * src_w as f64 / dst_w as f64 - 0.5)
                .clamp(0.0, (src_w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(src_w - 1);
            let fx = sx - x0 as f64;
            let top = src[y0 * src_w + x0] * (1.0 - fx) + src[y0 * src_w + x1] * fx;
            let bottom = src[y1 * src_w + x0] * (1.0 - fx) + src[y1 * src_w + x1] * fx;
            dst[y * dst_w + x] = top * (1.0 - fy) + bottom * fy;
        }
    }
    dst
}

/// Blue→red heatmap color for a [0,1] value.
fn heat_color(v: f64) -> (u8, u8, u8) {
    let v = v.clamp(0.0, 1.0);
    ((v * 255.0).round() as u8, 0, ((1.0 - v) * 255.0).round() as u8)
}

/// Writes the overlay as PPM (heatmap alpha-blended at 0.5 over the
/// grayscale image) and the raw heatmap as a sibling PGM with the same stem.
pub fn render_overlay(
    image: &[f64],
    heatmap: &[f64],
    height: usize,
    width: usize,
    ppm_path: &Path,
) -> Result<()> {
    if image.len() != height * width || heatmap.len() != height * width {
        return Err(Error::Dimension(format!(
            "render_overlay: image {} / heatmap {} vs {}x{}",
            image.len(),
            heatmap.len(),
            height,
            width
        )));
    }
    if heatmap.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Contract(
            "render_overlay: heatmap values must lie in [0,1]".into(),
        ));
    }
    const ALPHA: f64 = 0.5;
    let mut rgb = Vec::with_capacity(height * width * 3);
    for (g, h) in image.iter().zip(heatmap) {
        let gray = g.clamp(0.0, 1.0) * 255.0;
        let (r, gg, b) = heat_color(*h);
        rgb.push(((1.0 - ALPHA) * gray + ALPHA * r as f64).round() as u8);
        rgb.push(((1.0 - ALPHA) * gray + ALPHA * gg as f64).round() as u8);
        rgb.push(((1.0 - ALPHA) * gray + ALPHA * b as f64).round() as u8);
    }
    pnm::write_ppm(ppm_path, height, width, &rgb)?;
    pnm::write_pgm8(&ppm_path.with_extension("pgm"), height, width, heatmap)?;
    Ok(())
}

/// IoU of the half-max-thresholded heatmap against the ground-truth region,
/// plus the pointing-game hit (argmax pixel inside the region).
pub fn localization_score(heatmap: &[f64], gt_region: &[bool]) -> Result<(f64, bool)> {
    if heatmap.len() != gt_region.len() {
        return Err(Error::Dimension(format!(
            "localization_score: heatmap {} vs region {}",
            heatmap.len(),
            gt_region.len()
        )));
    }
    if !gt_region.iter().any(|&b| b) {
        return Err(Error::Contract(
            "localization_score: empty ground-truth region".into(),
        ));
    }
    let max = heatmap.iter().copied().fold(f64::MIN, f64::max);
    let threshold = 0.5 * max;
    let mut inter = 0usize;
    let mut union = 0usize;
    let mut argmax = 0usize;
    for (i, (&h, &g)) in heatmap.iter().zip(gt_region).enumerate() {
        let on = h >= threshold && max > 0.0;
        if on && g {
            inter += 1;
        }
        if on || g {
            union += 1;
        }
        if h > heatmap[argmax] {
            argmax = i;
        }
    }
    let iou = if union == 0 { 0.0 } else { inter as f64 / union as f64 };
    Ok((iou, gt_region[argmax]))
}

/// Evaluation summary; serialized as one flat JSON object.
pub struct MetricsReport {
    pub class_names: Vec<String>,
    pub per_class_auc: Vec<Option<f64>>,
    pub mean_auc: Option<f64>,
    /// Fraction of scored samples with IoU ≥ 0.5.
    pub iou_rate: Option<f64>,
    pub pointing_rate: Option<f64>,
    pub mean_iou: Option<f64>,
}

impl MetricsReport {
    pub fn to_json(&self) -> Value {
        let mut map = Map::new();
        for (name, auc) in self.class_names.iter().zip(&self.per_class_auc) {
            map.insert(name.clone(), auc.map_or(Value::Null, |v| json!(v)));
        }
        map.insert("mean_auc".into(), self.mean_auc.map_or(Value::Null, |v| json!(v)));
        map.insert("iou_rate".into(), self.iou_rate.map_or(Value::Null, |v| json!(v)));
        map.insert(
            "pointing_rate".into(),
            self.pointing_rate.map_or(Value::Null, |v| json!(v)),
        );
        map.insert("mean_iou".into(), self.mean_iou.map_or(Value::Null, |v| json!(v)));
        Value::Object(map)
    }
}

/// Per-class sigmoid scores for a batch of samples.
pub fn score_samples(model: &Model, samples: &[Sample]) -> Result<Vec<Vec<f64>>> {
    let mut all = Vec::with_capacity(samples.len());
    for sample in samples {
        let mut tape = Tape::inference();
        let (logits, _) = model.forward(&mut tape, &sample.image, false)?;
        all.push(logits.to_vec().iter().map(|&l| kernels::sigmoid(l)).collect());
    }
    Ok(all)
}

/// Per-class AUC over samples; classes with a single label value are None.
pub fn per_class_auc(
    scores: &[Vec<f64>],
    samples: &[Sample],
    n_classes: usize,
) -> Result<Vec<Option<f64>>> {
    let mut out = Vec::with_capacity(n_classes);
    for class in 0..n_classes {
        let class_scores: Vec<f64> = scores.iter().map(|s| s[class]).collect();
        let labels: Vec<bool> = samples.iter().map(|s| s.labels[class] == 1.0).collect();
        match roc_auc(&class_scores, &labels) {
            Ok(auc) => out.push(Some(auc)),
            Err(Error::UndefinedMetric(_)) => out.push(None),
            Err(other) => return Err(other),
        }
    }
    Ok(out)
}

/// Full evaluation: classification AUCs, and, when ground-truth regions are
/// present, localization of the top-1 most active mask of the final block.
/// Multi-positive samples are scored against the union of their regions.
pub fn evaluate(model: &Model, samples: &[Sample], class_names: &[String]) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Contract("evaluate: empty dataset".into()));
    }
    let n_classes = model.config.n_classes;
    if samples.iter().any(|s| s.labels.len() != n_classes) {
        return Err(Error::Config(format!(
            "evaluate: dataset labels do not match the model's {n_classes} classes"
        )));
    }
    let scores = score_samples(model, samples)?;
    let per_class = per_class_auc(&scores, samples, n_classes)?;
    let mean = mean_auc(&per_class).ok();

    let mut ious = Vec::new();
    let mut hits = Vec::new();
    for sample in samples {
        if let Some(gt) = union_gt_region(sample) {
            let (iou, hit) = localize_top_mask(model, sample, &gt)?;
            ious.push(iou);
            hits.push(hit);
        }
    }
    let (iou_rate, pointing_rate, mean_iou) = if ious.is_empty() {
        (None, None, None)
    } else {
        let n = ious.len() as f64;
        (
            Some(ious.iter().filter(|&&v| v >= 0.5).count() as f64 / n),
            Some(hits.iter().filter(|&&h| h).count() as f64 / n),
            Some(ious.iter().sum::<f64>() / n),
        )
    };
    Ok(MetricsReport {
        class_names: class_names.to_vec(),
        per_class_auc: per_class,
        mean_auc: mean,
        iou_rate,
        pointing_rate,
        mean_iou,
    })
}

/// Union of ground-truth regions over the sample's positive classes.
pub fn union_gt_region(sample: &Sample) -> Option<Vec<bool>> {
    let mut union: Option<Vec<bool>> = None;
    for region in sample.gt_regions.iter().flatten() {
        match &mut union {
            Some(u) => u.iter_mut().zip(region).for_each(|(a, &b)| *a |= b),
            None => union = Some(region.clone()),
        }
    }
    union.filter(|u| u.iter().any(|&b| b))
}

/// Scores the top-1 most active mask of the final block against a region.
pub fn localize_top_mask(model: &Model, sample: &Sample, gt: &[bool]) -> Result<(f64, bool)> {
    let mut tape = Tape::inference();
    let (_, traces) = model.forward(&mut tape, &sample.image, true)?;
    let traces = traces.expect("traces requested");
    let last = traces.last().expect("model has at least one block");
    let expl = ExplanationSet::from_trace(last, ActivityMeasure::Mass);
    let size = model.config.input_size;
    let top = select_active_masks(&expl, 1, size, size)?;
    localization_score(&top[0].heatmap, gt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfectly_ranked_scores_give_one() {
        let auc = roc_auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap();
        assert_eq!(auc, 1.0);
    }

    #[test]
    fn all_equal_scores_give_half() {
        let auc = roc_auc(&[0.5, 0.5, 0.5, 0.5], &[false, true, false, true]).unwrap();
        assert!((auc - 0.5).abs() < 1e-12);
    }

    #[test]
    fn worked_example_is_three_quarters() {
        let auc = roc_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
        assert!((auc - 0.75).abs() < 1e-12);
    }

    #[test]
    fn single_class_labels_are_undefined() {
        assert!(matches!(
            roc_auc(&[0.1, 0.2], &[true, true]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn auc_is_invariant_under_strictly_increasing_transforms() {
        // Integer-valued scores so the cubed-shifted transform is exact.
        let scores: Vec<f64> = vec![3.0, -7.0, 12.0, 0.0, 5.0, -2.0, 9.0, 3.0];
        let labels = vec![true, false, true, false, true, false, false, true];
        let transformed: Vec<f64> = scores.iter().map(|&s| s * s * s + 17.0).collect();
        let a = roc_auc(&scores, &labels).unwrap();
        let b = roc_auc(&transformed, &labels).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn auc_of_negated_scores_complements_for_tie_free_input() {
        let scores: Vec<f64> = vec![0.125, 0.5, 0.25, 0.875, 0.0625, 0.75];
        let negated: Vec<f64> = scores.iter().map(|s| -s).collect();
        let labels = vec![true, false, true, true, false, false];
        let a = roc_auc(&scores, &labels).unwrap();
        let b = roc_auc(&negated, &labels).unwrap();
        assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mean_auc_cases() {
        assert_eq!(mean_auc(&[Some(0.5), Some(0.5)]).unwrap(), 0.5);
        assert_eq!(mean_auc(&[Some(1.0), None, Some(0.5)]).unwrap(), 0.75);
        assert_eq!(mean_auc(&[None, Some(0.9)]).unwrap(), 0.9);
        assert!(mean_auc(&[None, None]).is_err());
    }

    #[test]
    fn mean_auc_matches_hand_computed_14_class_rows() {
        let row_a = [
            0.752, 0.873, 0.817, 0.696, 0.784, 0.738, 0.699, 0.850, 0.734, 0.837, 0.893, 0.807,
            0.765, 0.928,
        ];
        let row_b = [
            0.663, 0.808, 0.740, 0.614, 0.660, 0.591, 0.590, 0.688, 0.624, 0.755, 0.697, 0.686,
            0.665, 0.773,
        ];
        let to_opts = |row: &[f64]| row.iter().map(|&v| Some(v)).collect::<Vec<_>>();
        assert!((mean_auc(&to_opts(&row_a)).unwrap() - 0.798).abs() < 5e-4);
        assert!((mean_auc(&to_opts(&row_b)).unwrap() - 0.682).abs() < 5e-4);
    }

    fn test_expl(wm: Vec<f64>, l: usize, res: usize) -> ExplanationSet {
        let hw = res * res;
        let activities = (0..l).map(|i| wm[i * hw..(i + 1) * hw].iter().sum()).collect();
        ExplanationSet {
            stage: 0,
            block: 0,
            resolution: res,
            n_masks: l,
            masks: vec![0.0; l * hw],
            attn: vec![0.0; l * l],
            weighted_masks: wm,
            activities,
        }
    }

    #[test]
    fn dominant_mask_ranks_first() {
        let mut wm = vec![0.0; 3 * 4];
        wm[4..8].copy_from_slice(&[0.9, 1.0, 0.8, 1.0]); // mask 1 holds all mass
        let expl = test_expl(wm, 3, 2);
        let picked = select_active_masks(&expl, 1, 4, 4).unwrap();
        assert_eq!(picked[0].index, 1);
        assert!(!picked[0].flat);
    }

    #[test]
    fn ties_break_toward_lowest_index() {
        let wm = vec![0.25; 4 * 4];
        let expl = test_expl(wm, 4, 2);
        let picked = select_active_masks(&expl, 4, 2, 2).unwrap();
        let indices: Vec<usize> = picked.iter().map(|m| m.index).collect();
        assert_eq!(indices, vec![0, 1, 2, 3]);
        assert!(picked[0].flat);
        assert!(picked[0].heatmap.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ranking_matches_exhaustive_sort_and_rescaling() {
        let wm: Vec<f64> = (0..5 * 9).map(|i| ((i * 37 + 11) % 17) as f64 * 0.1).collect();
        let expl = test_expl(wm.clone(), 5, 3);
        let picked = select_active_masks(&expl, 5, 3, 3).unwrap();
        let mut expect: Vec<(usize, f64)> = expl
            .activities
            .iter()
            .copied()
            .enumerate()
            .collect();
        expect.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let got: Vec<usize> = picked.iter().map(|m| m.index).collect();
        let want: Vec<usize> = expect.iter().map(|(i, _)| *i).collect();
        assert_eq!(got, want);

        // Positive rescaling of all activities keeps the ranking.
        let scaled = test_expl(wm.iter().map(|v| v * 3.5).collect(), 5, 3);
        let picked2 = select_active_masks(&scaled, 5, 3, 3).unwrap();
        let got2: Vec<usize> = picked2.iter().map(|m| m.index).collect();
        assert_eq!(got, got2);
    }

    #[test]
    fn topk_beyond_mask_count_is_a_contract_error() {
        let expl = test_expl(vec![0.0; 2 * 4], 2, 2);
        assert!(matches!(
            select_active_masks(&expl, 3, 2, 2),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn localization_identity_and_disjoint() {
        let gt = vec![false, true, true, false];
        let heat = vec![0.0, 1.0, 1.0, 0.0];
        let (iou, hit) = localization_score(&heat, &gt).unwrap();
        assert_eq!(iou, 1.0);
        assert!(hit);

        let heat = vec![1.0, 0.0, 0.0, 1.0];
        let (iou, hit) = localization_score(&heat, &gt).unwrap();
        assert_eq!(iou, 0.0);
        assert!(!hit);
    }

    #[test]
    fn half_overlapping_squares_give_one_third() {
        // 4x4 grid: gt covers columns 0-1, heatmap covers columns 1-2.
        let mut gt = vec![false; 16];
        let mut heat = vec![0.0; 16];
        for y in 0..4 {
            gt[y * 4] = true;
            gt[y * 4 + 1] = true;
            heat[y * 4 + 1] = 1.0;
            heat[y * 4 + 2] = 1.0;
        }
        let (iou, _) = localization_score(&heat, &gt).unwrap();
        assert!((iou - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_ground_truth_is_a_contract_error() {
        assert!(matches!(
            localization_score(&[0.1, 0.2], &[false, false]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn overlay_extremes_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let image = vec![0.5; 4];
        let blue = dir.path().join("blue.ppm");
        render_overlay(&image, &[0.0; 4], 2, 2, &blue).unwrap();
        let bytes = std::fs::read(&blue).unwrap();
        let pix = &bytes[bytes.len() - 12..];
        // Pure blue tint over mid-gray: r=g=64, b=191.
        assert_eq!(&pix[..3], &[64, 64, 191]);

        let red = dir.path().join("red.ppm");
        render_overlay(&image, &[1.0; 4], 2, 2, &red).unwrap();
        let bytes = std::fs::read(&red).unwrap();
        let pix = &bytes[bytes.len() - 12..];
        assert_eq!(&pix[..3], &[191, 64, 64]);

        // Same inputs, same bytes.
        let again = dir.path().join("blue2.ppm");
        render_overlay(&image, &[0.0; 4], 2, 2, &again).unwrap();
        assert_eq!(std::fs::read(&blue).unwrap(), std::fs::read(&again).unwrap());
        assert!(blue.with_extension("pgm").is_file());
    }

    #[test]
    fn overlay_rejects_out_of_range_heatmap() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ppm");
        assert!(matches!(
            render_overlay(&[0.0; 4], &[1.5, 0.0, 0.0, 0.0], 2, 2, &path),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn bilinear_upsample_preserves_constants_and_interpolates() {
        let up = bilinear_upsample(&[0.3; 4], 2, 2, 8, 8);
        assert!(up.iter().all(|&v| (v - 0.3).abs() < 1e-12));
        let up = bilinear_upsample(&[0.0, 1.0, 0.0, 1.0], 2, 2, 2, 4);
        assert!(up[0] < up[1] && up[1] < up[2] && up[2] < up[3]);
    }
}
