//! Inner loops shared by the tensor ops.
//!
//! With the `parallel` feature (on by default) row-independent kernels are
//! split across the rayon pool. Every output element is computed by exactly one
//! task with a fixed accumulation order, so results are bit-identical to the
//! sequential path regardless of thread count.

use crate::tensor::Float;

/// Minimum amount of work (multiply-adds) before a kernel is parallelised.
#[cfg(feature = "parallel")]
const PAR_THRESHOLD: usize = 1 << 15;

/// Applies `f(row_index, row)` to each `row_len`-sized chunk of `out`.
pub fn for_each_row<T, F>(out: &mut [T], row_len: usize, work_per_row: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if row_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        let rows = out.len() / row_len;
        if rows > 1 && rows * work_per_row >= PAR_THRESHOLD {
            use rayon::prelude::*;
            out.par_chunks_mut(row_len)
                .enumerate()
                .for_each(|(i, r)| f(i, r));
            return;
        }
    }
    let _ = work_per_row;
    out.chunks_mut(row_len).enumerate().for_each(|(i, r)| f(i, r));
}

#[inline]
fn matmul_row<T: Float>(a_row: &[T], b: &[T], q: usize, out: &mut [T]) {
    for (k, &av) in a_row.iter().enumerate() {
        if av == T::zero() {
            continue;
        }
        let b_row = &b[k * q..(k + 1) * q];
        for (o, &bv) in out.iter_mut().zip(b_row) {
            *o = *o + av * bv;
        }
    }
}

/// `[m, p] x [p, q]` row-major product, always sequential.
pub fn matmul_seq<T: Float>(a: &[T], b: &[T], m: usize, p: usize, q: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * p);
    debug_assert_eq!(b.len(), p * q);
    let mut out = vec![T::zero(); m * q];
    for (i, row) in out.chunks_mut(q).enumerate() {
        matmul_row(&a[i * p..(i + 1) * p], b, q, row);
    }
    out
}

/// `[m, p] x [p, q]` row-major product split over output rows.
#[cfg(feature = "parallel")]
pub fn matmul_par<T: Float>(a: &[T], b: &[T], m: usize, p: usize, q: usize) -> Vec<T> {
    use rayon::prelude::*;
    debug_assert_eq!(a.len(), m * p);
    debug_assert_eq!(b.len(), p * q);
    let mut out = vec![T::zero(); m * q];
    out.par_chunks_mut(q).enumerate().for_each(|(i, row)| {
        matmul_row(&a[i * p..(i + 1) * p], b, q, row);
    });
    out
}

/// Dispatching matrix product.
pub fn matmul<T: Float>(a: &[T], b: &[T], m: usize, p: usize, q: usize) -> Vec<T> {
    #[cfg(feature = "parallel")]
    if m > 1 && m * p * q >= PAR_THRESHOLD {
        return matmul_par(a, b, m, p, q);
    }
    matmul_seq(a, b, m, p, q)
}

pub fn transpose<T: Float>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Sum whose result does not depend on the order of `values`: the values are
/// sorted by IEEE total order and then added left to right.
pub fn ordered_sum<T: Float>(values: &mut [T]) -> T {
    values.sort_by(|a, b| {
        a.to_f64()
            .unwrap()
            .total_cmp(&b.to_f64().unwrap())
    });
    values.iter().fold(T::zero(), |acc, &v| acc + v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ordered_sum_is_permutation_invariant() {
        let mut a = vec![1e8f32, 1.0, -1e8, 3.5, 1e-3];
        let mut b = vec![3.5f32, -1e8, 1e-3, 1.0, 1e8];
        assert_eq!(ordered_sum(&mut a).to_bits(), ordered_sum(&mut b).to_bits());
    }

    #[test]
    fn transpose_roundtrip() {
        let a: Vec<f64> = (0..6).map(f64::from).collect();
        let t = transpose(&a, 2, 3);
        assert_eq!(t, vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        assert_eq!(transpose(&t, 3, 2), a);
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_matmul_matches_sequential_bitwise() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (m, p, q) = (37, 29, 41);
        let a: Vec<f32> = (0..m * p).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..p * q).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s = matmul_seq(&a, &b, m, p, q);
        let r = matmul_par(&a, &b, m, p, q);
        assert!(s.iter().zip(&r).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
