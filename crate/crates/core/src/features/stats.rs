use crate::scalar::Scalar;

/// `[min, max, median, mean, std]` over a sparse profile's observed values.
/// An empty profile is a node with no training invocations at this time
/// step; it gets the zero vector (0 is the "invalid" sentinel of the data
/// format, so this stays consistent with ingestion).
pub fn statistical_features<S: Scalar>(profile: &[S]) -> [S; 5] {
    if profile.is_empty() {
        return [S::zero(); 5];
    }
    let mut vals = profile.to_vec();
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let count = vals.len();
    let cnt = S::cast(count as f64);
    let mean = vals.iter().copied().sum::<S>() / cnt;
    let median = if count % 2 == 1 {
        vals[count / 2]
    } else {
        (vals[count / 2 - 1] + vals[count / 2]) / S::cast(2.0)
    };
    let var = vals
        .iter()
        .map(|&v| (v - mean) * (v - mean))
        .sum::<S>()
        / cnt;
    [vals[0], vals[count - 1], median, mean, var.sqrt()]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_example() {
        let f = statistical_features(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(f[0], 1.0);
        assert_eq!(f[1], 5.0);
        assert_eq!(f[2], 3.0);
        assert_eq!(f[3], 3.0);
        assert!((f[4] - 2.0_f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn single_value() {
        assert_eq!(statistical_features(&[7.0]), [7.0, 7.0, 7.0, 7.0, 0.0]);
    }

    #[test]
    fn empty_is_zero() {
        assert_eq!(statistical_features::<f64>(&[]), [0.0; 5]);
    }

    #[test]
    fn order_independent() {
        let a = statistical_features(&[3.0, 1.0, 2.0]);
        let b = statistical_features(&[2.0, 3.0, 1.0]);
        assert_eq!(a, b);
    }
}
