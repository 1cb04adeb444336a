//! Pixelwise evaluation: ROC/AUC, normalized partial AUC, and per-defect
//! coverage via connected components.

use ndarray::Array2;

use crate::error::{Result, TexanomError};

/// Monotone (FPR, TPR) polyline from a threshold sweep, including the
/// endpoints (0,0) and (1,1).
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub points: Vec<(f64, f64)>,
}

/// Sweeps the threshold over the distinct score values, descending. Tied
/// scores move the operating point in one step, which the trapezoidal area
/// treats as a diagonal segment (the standard tie handling).
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(TexanomError::Contract(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(TexanomError::Evaluation("non-finite score".into()));
    }
    let pos = labels.iter().filter(|&&l| l != 0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(TexanomError::Evaluation(format!(
            "ROC needs both classes; got {pos} positive and {neg} negative pixels"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut points = Vec::with_capacity(scores.len() + 2);
    points.push((0.0, 0.0));
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        // consume the whole tie group as one step
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] != 0 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    debug_assert_eq!(*points.last().unwrap(), (1.0, 1.0));
    Ok(RocCurve { points })
}

/// Trapezoidal area under the full curve.
pub fn auc(curve: &RocCurve) -> f64 {
    curve
        .points
        .windows(2)
        .map(|p| (p[1].0 - p[0].0) * (p[0].1 + p[1].1) / 2.0)
        .sum()
}

/// Area restricted to FPR in `[0, fpr_max]` (linear interpolation at the
/// cut), divided by `fpr_max` so a perfect detector scores 1.
pub fn partial_auc_normalized(curve: &RocCurve, fpr_max: f64) -> Result<f64> {
    if !(0.0 < fpr_max && fpr_max <= 1.0) {
        return Err(TexanomError::Config(format!(
            "fpr_max {fpr_max} must lie in (0, 1]"
        )));
    }
    let mut area = 0.0;
    for p in curve.points.windows(2) {
        let (x0, y0) = p[0];
        let (x1, y1) = p[1];
        if x0 >= fpr_max {
            break;
        }
        if x1 <= fpr_max {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            // cut the segment at fpr_max
            let t = (fpr_max - x0) / (x1 - x0);
            let y_cut = y0 + t * (y1 - y0);
            area += (fpr_max - x0) * (y0 + y_cut) / 2.0;
            break;
        }
    }
    Ok(area / fpr_max)
}

/// Convenience wrapper: AUC straight from scores and labels.
pub fn auc_of(scores: &[f64], labels: &[u8]) -> Result<f64> {
    Ok(auc(&roc_curve(scores, labels)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Connectivity {
    Four,
    Eight,
}

/// Labeled components of a binary mask. Labels start at 1 and are assigned
/// in raster-scan order of each component's first pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Components {
    pub labels: Array2<u32>,
    pub count: usize,
}

pub fn connected_components(mask: &Array2<u8>, connectivity: Connectivity) -> Components {
    let (h, w) = mask.dim();
    let mut labels = Array2::<u32>::zeros((h, w));
    let neighbors: &[(isize, isize)] = match connectivity {
        Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
        Connectivity::Eight => &[
            (-1, -1),
            (-1, 0),
            (-1, 1),
            (0, -1),
            (0, 1),
            (1, -1),
            (1, 0),
            (1, 1),
        ],
    };
    let mut count = 0u32;
    let mut stack = Vec::new();
    for i in 0..h {
        for j in 0..w {
            if mask[[i, j]] == 0 || labels[[i, j]] != 0 {
                continue;
            }
            count += 1;
            labels[[i, j]] = count;
            stack.push((i, j));
            while let Some((y, x)) = stack.pop() {
                for &(dy, dx) in neighbors {
                    let ny = y as isize + dy;
                    let nx = x as isize + dx;
                    if ny < 0 || nx < 0 {
                        continue;
                    }
                    let (ny, nx) = (ny as usize, nx as usize);
                    if ny < h && nx < w && mask[[ny, nx]] != 0 && labels[[ny, nx]] == 0 {
                        labels[[ny, nx]] = count;
                        stack.push((ny, nx));
                    }
                }
            }
        }
    }
    Components {
        labels,
        count: count as usize,
    }
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CoverageReport {
    /// Per ground-truth component: covered fraction |C ∩ pred| / |C|.
    pub coverages: Vec<f64>,
    pub median_coverage: f64,
}

/// Fraction of each ground-truth defect component that the prediction marks.
pub fn defect_coverage(
    gt: &Array2<u8>,
    pred: &Array2<u8>,
    connectivity: Connectivity,
) -> Result<CoverageReport> {
    if gt.dim() != pred.dim() {
        return Err(TexanomError::Contract(format!(
            "ground truth {:?} vs prediction {:?}",
            gt.dim(),
            pred.dim()
        )));
    }
    let comps = connected_components(gt, connectivity);
    if comps.count == 0 {
        return Err(TexanomError::Evaluation(
            "ground truth contains no defect component".into(),
        ));
    }
    let mut sizes = vec![0usize; comps.count];
    let mut hits = vec![0usize; comps.count];
    for ((i, j), &label) in comps.labels.indexed_iter() {
        if label == 0 {
            continue;
        }
        let c = (label - 1) as usize;
        sizes[c] += 1;
        if pred[[i, j]] != 0 {
            hits[c] += 1;
        }
    }
    let coverages: Vec<f64> = hits
        .iter()
        .zip(&sizes)
        .map(|(&h, &s)| h as f64 / s as f64)
        .collect();
    let mut sorted = coverages.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(CoverageReport {
        median_coverage: median(&sorted),
        coverages,
    })
}

/// Full evaluation summary, serialized as JSON by the CLI.
///
/// Coverage here divides the intersection with the prediction by the size of
/// each ground-truth component; coverages are pooled over all defects of all
/// test images before taking the median.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub auc: f64,
    /// Partial AUC up to FPR 0.3, normalized so the maximum is 1.
    pub normalized_auc_03: f64,
    pub coverages: Vec<f64>,
    pub median_coverage: f64,
    pub gamma: f64,
    pub positive_pixels: usize,
    pub negative_pixels: usize,
    pub config_hash: String,
}

impl EvalReport {
    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| TexanomError::Format(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| TexanomError::io(path.display().to_string(), e))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<EvalReport> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| TexanomError::io(path.display().to_string(), e))?;
        serde_json::from_str(&text)
            .map_err(|e| TexanomError::Format(format!("{}: {e}", path.display())))
    }
}

/// Pools per-pixel scores and labels from anomaly maps and ground-truth
/// masks across images, then evaluates the full protocol.
pub fn evaluate(
    maps: &[Array2<f64>],
    gt_masks: &[Array2<u8>],
    pred_masks: &[Array2<u8>],
    gamma: f64,
    connectivity: Connectivity,
    config_hash: &str,
) -> Result<EvalReport> {
    if maps.len() != gt_masks.len() || maps.len() != pred_masks.len() {
        return Err(TexanomError::Contract(format!(
            "{} maps, {} ground-truth masks, {} predictions",
            maps.len(),
            gt_masks.len(),
            pred_masks.len()
        )));
    }
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (map, gt) in maps.iter().zip(gt_masks) {
        if map.dim() != gt.dim() {
            return Err(TexanomError::Contract(format!(
                "map {:?} and mask {:?} differ in shape",
                map.dim(),
                gt.dim()
            )));
        }
        scores.extend(map.iter().copied());
        labels.extend(gt.iter().map(|&v| u8::from(v != 0)));
    }
    let curve = roc_curve(&scores, &labels)?;
    let mut coverages = Vec::new();
    for (gt, pred) in gt_masks.iter().zip(pred_masks) {
        let comps = connected_components(gt, connectivity);
        if comps.count == 0 {
            continue; // defect-free test image contributes only to the ROC
        }
        coverages.extend(defect_coverage(gt, pred, connectivity)?.coverages);
    }
    if coverages.is_empty() {
        return Err(TexanomError::Evaluation(
            "no ground-truth defect component in any test image".into(),
        ));
    }
    let mut sorted = coverages.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let positive_pixels = labels.iter().filter(|&&l| l != 0).count();
    Ok(EvalReport {
        auc: auc(&curve),
        normalized_auc_03: partial_auc_normalized(&curve, 0.3)?,
        median_coverage: median(&sorted),
        coverages,
        gamma,
        positive_pixels,
        negative_pixels: labels.len() - positive_pixels,
        config_hash: config_hash.to_string(),
    })
}
