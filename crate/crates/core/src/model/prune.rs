use crate::error::{invalid, Result};

/// Decoder layers kept when pruning `n_from` layers down to `n_to`.
///
/// The first and last layers always survive; the rest are spread evenly at
/// `round(j·(n_from−1)/(n_to−1))`.
pub fn prune_layer_indices(n_from: usize, n_to: usize) -> Result<Vec<usize>> {
    if n_to < 2 || n_to > n_from {
        return invalid(format!("cannot prune {n_from} layers to {n_to}"));
    }
    let span = (n_from - 1) as f64 / (n_to - 1) as f64;
    Ok((0..n_to).map(|j| (j as f64 * span).round() as usize).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn known_cases() {
        assert_eq!(
            prune_layer_indices(24, 12).unwrap(),
            vec![0, 2, 4, 6, 8, 10, 13, 15, 17, 19, 21, 23]
        );
        assert_eq!(prune_layer_indices(12, 12).unwrap(), (0..12).collect::<Vec<_>>());
        assert_eq!(prune_layer_indices(12, 8).unwrap(), vec![0, 2, 3, 5, 6, 8, 9, 11]);
    }

    #[test]
    fn rejects_bad_targets() {
        assert!(prune_layer_indices(12, 1).is_err());
        assert!(prune_layer_indices(12, 13).is_err());
    }

    proptest! {
        #[test]
        fn strictly_increasing_with_endpoints(n_from in 2usize..200, frac in 0.0f64..1.0) {
            let n_to = 2 + ((n_from - 2) as f64 * frac) as usize;
            let idx = prune_layer_indices(n_from, n_to).unwrap();
            prop_assert_eq!(idx.len(), n_to);
            prop_assert_eq!(idx[0], 0);
            prop_assert_eq!(*idx.last().unwrap(), n_from - 1);
            prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
