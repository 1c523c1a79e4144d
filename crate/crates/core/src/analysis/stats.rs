/// Pearson correlation; zero when either side has no variance.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "pearson needs equal lengths");
    let n = a.len() as f64;
    if a.is_empty() {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    // relative cutoff so float noise on a constant series does not count as signal
    let tiny = 1e-24 * n;
    if saa <= tiny || sbb <= tiny {
        return 0.0;
    }
    (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)
}

/// 0-based ranks with ties sharing their average rank.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&i, &j| xs[i].total_cmp(&xs[j]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation (Pearson on tie-averaged ranks).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&ranks(a), &ranks(b))
}

/// Linear interpolation of `xs` onto `n` evenly spaced points.
pub fn resample_linear(xs: &[f64], n: usize) -> Vec<f64> {
    match (xs.len(), n) {
        (_, 0) => vec![],
        (0, _) => vec![0.0; n],
        (1, _) => vec![xs[0]; n],
        (_, 1) => vec![xs[0]],
        (len, _) => (0..n)
            .map(|i| {
                let t = i as f64 * (len - 1) as f64 / (n - 1) as f64;
                let lo = (t.floor() as usize).min(len - 2);
                let f = t - lo as f64;
                xs[lo] * (1.0 - f) + xs[lo + 1] * f
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn spearman_known_values() {
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 35.0, 100.0]) - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-15);
        // scipy.stats.spearmanr([1,2,3,4,5],[5,6,7,8,7]) = 0.8207826816681233
        let r = spearman(&[1.0, 2.0, 3.0, 4.0, 5.0], &[5.0, 6.0, 7.0, 8.0, 7.0]);
        assert!((r - 0.8207826816681233).abs() < 1e-12, "{r}");
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[4.0, 4.0, 4.0]), 0.0);
    }

    #[test]
    fn tied_ranks_are_averaged() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![2.5, 0.0, 2.5, 1.0]);
    }

    #[test]
    fn pearson_known_value() {
        // numpy.corrcoef([1,2,3,4],[2,1,4,3])[0,1] = 0.6
        assert!((pearson(&[1.0, 2.0, 3.0, 4.0], &[2.0, 1.0, 4.0, 3.0]) - 0.6).abs() < 1e-12);
    }

    #[test]
    fn resampling_keeps_endpoints_and_lines() {
        let r = resample_linear(&[0.0, 1.0, 2.0], 5);
        assert_eq!(r, vec![0.0, 0.5, 1.0, 1.5, 2.0]);
        assert_eq!(resample_linear(&[7.0], 3), vec![7.0; 3]);
        assert_eq!(resample_linear(&[1.0, 9.0], 32).last(), Some(&9.0));
    }

    proptest! {
        #[test]
        fn spearman_is_invariant_to_monotone_maps(xs in proptest::collection::vec(-10.0f64..10.0, 3..20)) {
            let idx: Vec<f64> = (0..xs.len()).map(|i| i as f64).collect();
            let cubed: Vec<f64> = xs.iter().map(|x| x * x * x + 2.0 * x).collect();
            prop_assert!((spearman(&idx, &xs) - spearman(&idx, &cubed)).abs() < 1e-12);
        }

        #[test]
        fn correlations_are_bounded(a in proptest::collection::vec(-1.0f64..1.0, 2..30), seed in 0u64..100) {
            let b: Vec<f64> = a.iter().enumerate().map(|(i, x)| ((i as u64 * 31 + seed) % 7) as f64 - x).collect();
            let p = pearson(&a, &b);
            let s = spearman(&a, &b);
            prop_assert!((-1.0..=1.0).contains(&p) && (-1.0..=1.0).contains(&s));
        }
    }
}
