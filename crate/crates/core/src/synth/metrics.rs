use serde::Serialize;

use crate::error::{Error, Result};
use crate::labeling::InstanceLabeling;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Score {
    pub mean_iou: f64,
    pub purity: f64,
}

/// Instance-level agreement between a predicted and a ground-truth labeling.
///
/// `mean_iou` matches predicted and true instances one-to-one, greedily in
/// order of decreasing IoU, and averages the matched IoU over true instances
/// (0 for unmatched ones). Greedy matching can underestimate the optimal
/// assignment. `purity` is the fraction of true foreground pixels whose
/// predicted cluster has their own instance as its majority; ties go to the
/// lowest id and unclustered pixels count as impure.
pub fn score(pred: &InstanceLabeling, gt: &InstanceLabeling) -> Result<Score> {
    if !pred.same_grid(gt) {
        return Err(Error::invalid(format!(
            "labelings differ in shape: {}x{} vs {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let kp = pred.count();
    let kg = gt.count();
    // inter[p][g] over ids including background 0.
    let mut inter = vec![vec![0usize; kg + 1]; kp + 1];
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        inter[p as usize][g as usize] += 1;
    }
    let pred_size: Vec<usize> = inter.iter().map(|row| row.iter().sum()).collect();
    let gt_size: Vec<usize> = (0..=kg).map(|g| inter.iter().map(|row| row[g]).sum()).collect();

    let mut pairs = Vec::new();
    for p in 1..=kp {
        for g in 1..=kg {
            let i = inter[p][g];
            if i > 0 {
                let iou = i as f64 / (pred_size[p] + gt_size[g] - i) as f64;
                pairs.push((iou, g, p));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut gt_done = vec![false; kg + 1];
    let mut pred_done = vec![false; kp + 1];
    let mut total_iou = 0.0;
    for (iou, g, p) in pairs {
        if !gt_done[g] && !pred_done[p] {
            gt_done[g] = true;
            pred_done[p] = true;
            total_iou += iou;
        }
    }
    let mean_iou = if kg == 0 { 0.0 } else { total_iou / kg as f64 };

    let mut pure = 0usize;
    for row in inter.iter().skip(1) {
        let mut major = 0;
        for g in 1..=kg {
            if row[g] > row[major] || (major == 0 && row[g] > 0) {
                major = g;
            }
        }
        if major > 0 {
            pure += row[major];
        }
    }
    let fg: usize = gt_size[1..].iter().sum();
    let purity = if fg == 0 { 0.0 } else { pure as f64 / fg as f64 };
    Ok(Score { mean_iou, purity })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lab(labels: &[u16]) -> InstanceLabeling {
        InstanceLabeling::new(1, labels.len(), labels.to_vec()).unwrap()
    }

    #[test]
    fn identical() {
        let g = lab(&[0, 1, 1, 2, 2, 0, 3]);
        let s = score(&g, &g).unwrap();
        assert_eq!(s, Score { mean_iou: 1.0, purity: 1.0 });
    }

    #[test]
    fn permuted_ids() {
        let g = lab(&[0, 1, 1, 2, 2, 0, 3]);
        let p = lab(&[0, 3, 3, 1, 1, 0, 2]);
        assert_eq!(score(&p, &g).unwrap().mean_iou, 1.0);
    }

    #[test]
    fn one_cluster_over_equal_instances() {
        let g = lab(&[1, 1, 2, 2, 3, 3, 4, 4]);
        let p = lab(&[1; 8]);
        let s = score(&p, &g).unwrap();
        assert_eq!(s.purity, 0.25);
        assert_eq!(s.mean_iou, 0.25 / 4.0);
    }

    #[test]
    fn shape_mismatch() {
        assert!(score(&lab(&[0, 1]), &lab(&[1])).is_err());
    }
}
