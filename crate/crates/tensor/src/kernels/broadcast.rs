use crate::error::{Result, TensorError};

/// Numpy-style broadcast of two shapes, aligned from the right.
pub fn broadcast_dims(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = dim_from_right(a, rank, i);
        let db = dim_from_right(b, rank, i);
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(TensorError::shape("broadcast", format!("{:?} vs {:?}", a, b))),
        };
    }
    Ok(out)
}

fn dim_from_right(dims: &[usize], rank: usize, i: usize) -> usize {
    let offset = rank - dims.len();
    if i < offset {
        1
    } else {
        dims[i - offset]
    }
}

/// Strides of `dims` when read through the broadcast shape `out`; broadcast
/// axes get stride 0.
pub fn broadcast_strides(dims: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..rank).rev() {
        let d = dim_from_right(dims, rank, i);
        strides[i] = if d == 1 { 0 } else { acc };
        acc *= d;
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every element of `out`.
pub fn for_each_pair(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total: usize = out.iter().product();
    if total == 0 {
        return;
    }
    if out.is_empty() {
        f(0, 0, 0);
        return;
    }
    let rank = out.len();
    let inner = out[rank - 1];
    let (ia_step, ib_step) = (sa[rank - 1], sb[rank - 1]);
    let mut counter = vec![0usize; rank - 1];
    let (mut base_a, mut base_b) = (0usize, 0usize);
    let mut o = 0;
    loop {
        let (mut ia, mut ib) = (base_a, base_b);
        for _ in 0..inner {
            f(o, ia, ib);
            o += 1;
            ia += ia_step;
            ib += ib_step;
        }
        // odometer over the outer axes
        let mut axis = rank - 1;
        loop {
            if axis == 0 {
                return;
            }
            axis -= 1;
            counter[axis] += 1;
            base_a += sa[axis];
            base_b += sb[axis];
            if counter[axis] < out[axis] {
                break;
            }
            base_a -= sa[axis] * out[axis];
            base_b -= sb[axis] * out[axis];
            counter[axis] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dims_follow_numpy_rules() {
        assert_eq!(broadcast_dims(&[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_dims(&[1, 4, 1, 1], &[2, 4, 5, 5]).unwrap(), vec![2, 4, 5, 5]);
        assert_eq!(broadcast_dims(&[], &[2]).unwrap(), vec![2]);
        assert!(broadcast_dims(&[2, 3], &[4]).is_err());
    }

    #[test]
    fn pairs_visit_expected_indices() {
        let out = [2, 3];
        let sa = broadcast_strides(&[2, 1], &out);
        let sb = broadcast_strides(&[3], &out);
        let mut seen = Vec::new();
        for_each_pair(&out, &sa, &sb, |o, a, b| seen.push((o, a, b)));
        assert_eq!(
            seen,
            vec![(0, 0, 0), (1, 0, 1), (2, 0, 2), (3, 1, 0), (4, 1, 1), (5, 1, 2)]
        );
    }
}
