use super::{Labeling, PRUNED};
use crate::error::{Error, Result};

/// Mean of `channel` over each label's voxels, `None` for empty labels.
pub fn label_means(l: &Labeling, channel: &[f32]) -> Vec<Option<f64>> {
    let mut sum = vec![0f64; l.n_labels];
    let mut cnt = vec![0usize; l.n_labels];
    for (i, &lab) in l.label_of.iter().enumerate() {
        if lab != PRUNED {
            sum[lab as usize] += channel[i] as f64;
            cnt[lab as usize] += 1;
        }
    }
    sum.iter()
        .zip(&cnt)
        .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
        .collect()
}

/// Largest-gap threshold over a set of means.
///
/// Returns the indices whose mean lies strictly above the midpoint of the
/// widest gap between consecutive sorted values (first such gap on ties),
/// and that midpoint. With no positive gap, everything is retained and the
/// threshold sits one unit below the minimum.
pub fn largest_gap_split(means: &[f64]) -> Result<(Vec<usize>, f64)> {
    if means.is_empty() {
        return Err(Error::invalid("supervoxels", "nothing to prune"));
    }
    let mut sorted = means.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut best = (0.0, f64::NAN);
    for w in sorted.windows(2) {
        let gap = w[1] - w[0];
        if gap > best.0 {
            best = (gap, 0.5 * (w[0] + w[1]));
        }
    }
    let threshold = if best.1.is_nan() {
        sorted[0] - 1.0
    } else {
        best.1
    };
    let keep = (0..means.len()).filter(|&i| means[i] > threshold).collect();
    Ok((keep, threshold))
}

/// Background pruning on mean T1 per supervoxel. Returns retained label ids
/// in ascending order and the threshold.
pub fn prune_background(l: &Labeling, t1: &[f32]) -> Result<(Vec<u32>, f64)> {
    let means = label_means(l, t1);
    let present: Vec<(u32, f64)> = means
        .iter()
        .enumerate()
        .filter_map(|(i, m)| m.map(|m| (i as u32, m)))
        .collect();
    let values: Vec<f64> = present.iter().map(|p| p.1).collect();
    let (keep, threshold) = largest_gap_split(&values)?;
    Ok((keep.into_iter().map(|i| present[i].0).collect(), threshold))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn five_means() {
        let (keep, thr) = largest_gap_split(&[0.01, 0.02, 0.03, 0.50, 0.55]).unwrap();
        assert!((thr - 0.265).abs() < 1e-12);
        assert_eq!(keep, vec![3, 4]);
    }

    #[test]
    fn equal_means_keep_everything() {
        let (keep, thr) = largest_gap_split(&[0.4; 5]).unwrap();
        assert_eq!(keep.len(), 5);
        assert!(thr < 0.4);
    }

    #[test]
    fn two_means() {
        let (keep, thr) = largest_gap_split(&[0.9, 0.1]).unwrap();
        assert!((thr - 0.5).abs() < 1e-12);
        assert_eq!(keep, vec![0]);
    }

    #[test]
    fn empty_is_an_error() {
        assert!(largest_gap_split(&[]).is_err());
    }

    #[test]
    fn retained_means_dominate_discarded() {
        let means = [0.3, 0.05, 0.7, 0.71, 0.02, 0.33, 0.69];
        let (keep, _) = largest_gap_split(&means).unwrap();
        let lo = keep.iter().map(|&i| means[i]).fold(f64::INFINITY, f64::min);
        let hi = (0..means.len())
            .filter(|i| !keep.contains(i))
            .map(|i| means[i])
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(lo > hi);
    }
}
