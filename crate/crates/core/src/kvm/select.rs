use std::cmp::Ordering;

use crate::error::{dim_err, Error, Result};
use crate::numerics::{dot, Tensor};
use crate::scalar::Scalar;

/// Per-head split of an overflow block into appended and merged tokens.
/// Indices are offsets within the block, ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AppendSplit {
    pub append: Vec<Vec<usize>>,
    pub merge: Vec<Vec<usize>>,
}

impl AppendSplit {
    pub fn append_flat(&self) -> Vec<usize> {
        self.append.concat()
    }

    pub fn merge_flat(&self) -> Vec<usize> {
        self.merge.concat()
    }
}

fn check_heads<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize)> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
        return Err(Error::ShapeMismatch {
            op,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        });
    }
    Ok((sa[0], sa[2]))
}

/// Chooses the `n_append` least redundant overflow tokens per head.
///
/// `memory_keys` is `[H, C, d_h]`, `key_view` the normalized state keys
/// `[H, m, d_h]` before appending. A token's redundancy is its largest dot
/// product with any state row; the smallest scores are appended, ties going
/// to the earlier position.
pub fn select_append<T: Scalar>(memory_keys: &Tensor<T>, key_view: &Tensor<T>, n_append: usize) -> Result<AppendSplit> {
    let (heads, dh) = check_heads("select_append", memory_keys, key_view)?;
    let block = memory_keys.shape()[1];
    let m = key_view.shape()[1];
    if n_append > block {
        return dim_err("select_append", format!("n_append {n_append} exceeds block {block}"));
    }
    let mut split = AppendSplit {
        append: Vec::with_capacity(heads),
        merge: Vec::with_capacity(heads),
    };
    for h in 0..heads {
        let keys = &memory_keys.data()[h * block * dh..(h + 1) * block * dh];
        let view = &key_view.data()[h * m * dh..(h + 1) * m * dh];
        let mut order: Vec<(T, usize)> = if n_append == 0 || n_append == block {
            (0..block).map(|j| (T::zero(), j)).collect()
        } else {
            keys.chunks(dh)
                .enumerate()
                .map(|(j, kj)| {
                    let score = view
                        .chunks(dh)
                        .map(|si| dot(kj, si))
                        .fold(T::neg_infinity(), T::max);
                    (score, j)
                })
                .collect()
        };
        order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
        let mut append: Vec<usize> = order[..n_append].iter().map(|&(_, j)| j).collect();
        let mut merge: Vec<usize> = order[n_append..].iter().map(|&(_, j)| j).collect();
        append.sort_unstable();
        merge.sort_unstable();
        split.append.push(append);
        split.merge.push(merge);
    }
    Ok(split)
}

/// Winner-take-all merge targets: for every row of `memory_keys`
/// (`[H, k, d_h]`), the row `i >= sinks` of `key_view` (`[H, m, d_h]`, the
/// normalized post-append state) with the largest dot product. Ties go to
/// the lowest index.
pub fn merge_targets<T: Scalar>(memory_keys: &Tensor<T>, key_view: &Tensor<T>, sinks: usize) -> Result<Vec<Vec<usize>>> {
    let (heads, dh) = check_heads("merge_targets", memory_keys, key_view)?;
    let k = memory_keys.shape()[1];
    let m = key_view.shape()[1];
    if k > 0 && m <= sinks {
        return Err(Error::NoMergeTarget { rows: m, sinks });
    }
    let mut out = Vec::with_capacity(heads);
    for h in 0..heads {
        let keys = &memory_keys.data()[h * k * dh..(h + 1) * k * dh];
        let view = &key_view.data()[h * m * dh..(h + 1) * m * dh];
        let targets = keys
            .chunks(dh)
            .map(|kj| {
                let mut best = sinks;
                let mut best_score = T::neg_infinity();
                for (i, si) in view.chunks(dh).enumerate().skip(sinks) {
                    let s = dot(kj, si);
                    if s > best_score {
                        best_score = s;
                        best = i;
                    }
                }
                best
            })
            .collect();
        out.push(targets);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: [usize; 3], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn append_extremes() {
        let keys = t([1, 3, 2], &[1., 0., 0., 1., 1., 1.]);
        let view = t([1, 2, 2], &[1., 0., 0., 1.]);
        let none = select_append(&keys, &view, 0).unwrap();
        assert!(none.append[0].is_empty());
        assert_eq!(none.merge[0], vec![0, 1, 2]);
        let all = select_append(&keys, &view, 3).unwrap();
        assert_eq!(all.append[0], vec![0, 1, 2]);
        assert!(all.merge[0].is_empty());
    }

    #[test]
    fn novel_token_is_appended_first() {
        // State row equals token 0's key; token 1 is orthogonal to the row.
        // Scores: token 0 -> 1, token 1 -> 0.
        let keys = t([1, 2, 2], &[1., 0., 0., 1.]);
        let view = t([1, 1, 2], &[1., 0.]);
        let s = select_append(&keys, &view, 1).unwrap();
        assert_eq!(s.append[0], vec![1]);
        assert_eq!(s.merge[0], vec![0]);
    }

    #[test]
    fn append_ties_prefer_earlier_position() {
        let keys = t([1, 3, 2], &[0., 1., 0., 1., 0., 1.]);
        let view = t([1, 1, 2], &[1., 0.]);
        assert_eq!(select_append(&keys, &view, 2).unwrap().append[0], vec![0, 1]);
    }

    #[test]
    fn sink_is_never_a_target() {
        let keys = t([1, 1, 2], &[1., 0.]);
        let view = t([1, 2, 2], &[10., 0., 1., 0.]);
        assert_eq!(merge_targets(&keys, &view, 1).unwrap(), vec![vec![1]]);
        assert_eq!(merge_targets(&keys, &view, 0).unwrap(), vec![vec![0]]);
    }

    #[test]
    fn positive_rescale_keeps_target() {
        let keys = t([1, 1, 3], &[0.3, -1.2, 0.7]);
        let view = t([1, 3, 3], &[1., 0., 0., 0., -1., 0., 0., 0., 1.]);
        let base = merge_targets(&keys, &view, 0).unwrap();
        for g in [1e-3, 0.5, 7.0, 1e4] {
            let scaled = keys.map(|x| x * g);
            assert_eq!(merge_targets(&scaled, &view, 0).unwrap(), base);
        }
    }

    #[test]
    fn duplicate_rows_pick_lowest_index() {
        let keys = t([1, 1, 2], &[1., 1.]);
        let view = t([1, 3, 2], &[0., 0., 1., 1., 1., 1.]);
        assert_eq!(merge_targets(&keys, &view, 1).unwrap(), vec![vec![1]]);
    }

    #[test]
    fn all_rows_protected_is_an_error() {
        let keys = t([1, 1, 2], &[1., 1.]);
        let view = t([1, 1, 2], &[1., 1.]);
        assert!(matches!(
            merge_targets(&keys, &view, 1),
            Err(Error::NoMergeTarget { rows: 1, sinks: 1 })
        ));
    }
}
