use super::EvalError;

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::DimensionMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    if na == 0.0 || nb == 0.0 {
        return Err(EvalError::ZeroVector);
    }
    // sqrt(na·nb) rather than sqrt(na)·sqrt(nb): cosine(v, v) is then exactly 1.
    Ok((dot / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of their positional ranks.
pub fn ranks_with_ties(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&i, &j| xs[i].total_cmp(&xs[j]));
    let mut ranks = vec![0.0; xs.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && xs[order[end]] == xs[order[start]] {
            end += 1;
        }
        // Positions start+1 ..= end share their average.
        let avg = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, EvalError> {
    if xs.len() != ys.len() {
        return Err(EvalError::LengthMismatch {
            left: xs.len(),
            right: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(EvalError::TooFewPoints(xs.len()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(EvalError::DegenerateInput);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson correlation of tie-averaged ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64, EvalError> {
    if xs.len() != ys.len() {
        return Err(EvalError::LengthMismatch {
            left: xs.len(),
            right: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(EvalError::TooFewPoints(xs.len()));
    }
    let constant = |v: &[f64]| v.iter().all(|x| *x == v[0]);
    if constant(xs) || constant(ys) {
        return Err(EvalError::DegenerateInput);
    }
    pearson(&ranks_with_ties(xs), &ranks_with_ties(ys))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cosine_cases() {
        let v = [0.3, -1.2, 4.0];
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert_eq!(cosine(&v, &v).unwrap(), 1.0);
        assert_eq!(cosine(&v, &neg).unwrap(), -1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(EvalError::ZeroVector)));
        assert!(matches!(
            cosine(&[1.0], &[1.0, 0.0]),
            Err(EvalError::DimensionMismatch { left: 1, right: 2 })
        ));
    }

    #[test]
    fn rank_cases() {
        assert_eq!(ranks_with_ties(&[10.0, 20.0, 30.0]), vec![1.0, 2.0, 3.0]);
        assert_eq!(ranks_with_ties(&[5.0, 5.0]), vec![1.5, 1.5]);
        assert_eq!(ranks_with_ties(&[3.0, 1.0, 3.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn spearman_cases() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(spearman(&xs, &[2.0, 4.0, 8.0, 16.0]).unwrap(), 1.0);
        assert_eq!(spearman(&xs, &[4.0, 3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert!(matches!(
            spearman(&xs, &[1.0; 4]),
            Err(EvalError::DegenerateInput)
        ));
        assert!(matches!(spearman(&[1.0], &[1.0]), Err(EvalError::TooFewPoints(1))));
    }

    proptest! {
        #[test]
        fn spearman_symmetric_and_monotone_invariant(
            pairs in proptest::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 3..40)
        ) {
            let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            if let Ok(r) = spearman(&xs, &ys) {
                prop_assert_eq!(r, spearman(&ys, &xs).unwrap());
                // Power-of-two scaling is exact, so no ties are created or broken.
                let tx: Vec<f64> = xs.iter().map(|x| x * 8.0).collect();
                let ty: Vec<f64> = ys.iter().map(|y| y / 4.0).collect();
                prop_assert_eq!(r, spearman(&tx, &ty).unwrap());
                prop_assert!((-1.0..=1.0).contains(&r));
            }
        }

        #[test]
        fn cosine_positive_scale_invariant(
            v in proptest::collection::vec(-10.0f64..10.0, 4),
            w in proptest::collection::vec(-10.0f64..10.0, 4),
            k in 0.01f64..100.0,
        ) {
            if let Ok(c) = cosine(&v, &w) {
                let scaled: Vec<f64> = v.iter().map(|x| x * k).collect();
                prop_assert!((cosine(&scaled, &w).unwrap() - c).abs() < 1e-12);
            }
        }
    }
}
