use std::ops::Range;

use crate::error::{invalid, Result};
use crate::model::KVCache;
use crate::numcore::Tensor;

/// Splits `n_layers` decoder layers into `n_groups` contiguous groups;
/// group `l` (1-based) covers `[n_layers/n_groups·(l−1), n_layers/n_groups·l)`.
pub fn group_layers(n_layers: usize, n_groups: usize) -> Result<Vec<Range<usize>>> {
    if n_groups == 0 {
        return invalid("at least one layer group is required");
    }
    if !n_layers.is_multiple_of(n_groups) {
        return invalid(format!(
            "{n_layers} decoder layers cannot be split evenly into {n_groups} groups"
        ));
    }
    let size = n_layers / n_groups;
    Ok((1..=n_groups).map(|l| size * (l - 1)..size * l).collect())
}

/// Keys and values of a layer group for positions `< len_per_layer`,
/// flattened layer after layer.
#[derive(Clone, Debug)]
pub struct GroupedKvView {
    pub group: Range<usize>,
    pub len_per_layer: usize,
    /// `[(|group|·len_per_layer) × d_model]`
    pub keys: Tensor,
    pub values: Tensor,
}

impl GroupedKvView {
    /// Number of key/value pairs visible through the view.
    pub fn len(&self) -> usize {
        self.keys.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flattens the cached keys/values of `group` over positions `0..i`.
pub fn grouped_view(cache: &KVCache, group: Range<usize>, i: usize) -> Result<GroupedKvView> {
    if group.end > cache.n_layers() || group.is_empty() {
        return invalid(format!(
            "group {group:?} outside {} cached layers",
            cache.n_layers()
        ));
    }
    if i > cache.len() {
        return invalid(format!("view over {i} positions but cache holds {}", cache.len()));
    }
    let d = cache.keys(group.start).cols();
    let mut keys = Vec::with_capacity(group.len() * i * d);
    let mut values = Vec::with_capacity(group.len() * i * d);
    for l in group.clone() {
        keys.extend_from_slice(&cache.keys(l).data()[..i * d]);
        values.extend_from_slice(&cache.values(l).data()[..i * d]);
    }
    let rows = group.len() * i;
    Ok(GroupedKvView {
        group,
        len_per_layer: i,
        keys: Tensor::matrix(rows, d, keys)?,
        values: Tensor::matrix(rows, d, values)?,
    })
}
