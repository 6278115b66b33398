//! Row-parallel inner loops.
//!
//! Every kernel writes each output row from a single sequential loop, so the
//! parallel and sequential paths produce bit-identical results. With the
//! `parallel` feature disabled, [`Exec::Parallel`] silently runs sequentially.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many output values a kernel never fans out.
pub const PAR_THRESHOLD: usize = 16 * 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    Parallel,
}

impl Exec {
    /// Parallel for large outputs, sequential otherwise.
    pub fn auto(work: usize) -> Exec {
        if cfg!(feature = "parallel") && work >= PAR_THRESHOLD {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

/// Calls `f(row_index, row)` for every `row_len`-wide chunk of `out`.
pub fn for_each_row<F>(out: &mut [f64], row_len: usize, exec: Exec, f: F)
where
    F: Fn(usize, &mut [f64]) + Send + Sync,
{
    if row_len == 0 {
        return;
    }
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => out.par_chunks_mut(row_len).enumerate().for_each(|(i, row)| f(i, row)),
        _ => out.chunks_mut(row_len).enumerate().for_each(|(i, row)| f(i, row)),
    }
}

/// Order-preserving map over `0..n`.
pub fn map_indexed<T, F>(n: usize, exec: Exec, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => (0..n).into_par_iter().map(f).collect(),
        _ => (0..n).map(f).collect(),
    }
}

/// `out[p×r] = a[p×q] · b[q×r]`.
pub fn matmul(a: &[f64], b: &[f64], out: &mut [f64], p: usize, q: usize, r: usize, exec: Exec) {
    debug_assert_eq!(a.len(), p * q);
    debug_assert_eq!(b.len(), q * r);
    debug_assert_eq!(out.len(), p * r);
    for_each_row(out, r, exec, |i, row| {
        row.iter_mut().for_each(|v| *v = 0.0);
        let a_row = &a[i * q..(i + 1) * q];
        for (k, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let b_row = &b[k * r..(k + 1) * r];
            for (o, &bkj) in row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    });
}

/// `out[p×r] = a[p×q] · b[r×q]ᵀ`.
pub fn matmul_bt(a: &[f64], b: &[f64], out: &mut [f64], p: usize, q: usize, r: usize, exec: Exec) {
    debug_assert_eq!(a.len(), p * q);
    debug_assert_eq!(b.len(), r * q);
    for_each_row(out, r, exec, |i, row| {
        let a_row = &a[i * q..(i + 1) * q];
        for (j, o) in row.iter_mut().enumerate() {
            *o = dot(a_row, &b[j * q..(j + 1) * q]);
        }
    });
}

/// `out[q×r] = a[p×q]ᵀ · b[p×r]`.
pub fn matmul_at(a: &[f64], b: &[f64], out: &mut [f64], p: usize, q: usize, r: usize, exec: Exec) {
    debug_assert_eq!(a.len(), p * q);
    debug_assert_eq!(b.len(), p * r);
    for_each_row(out, r, exec, |k, row| {
        row.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..p {
            let aik = a[i * q + k];
            if aik == 0.0 {
                continue;
            }
            for (o, &bij) in row.iter_mut().zip(&b[i * r..(i + 1) * r]) {
                *o += aik * bij;
            }
        }
    });
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
        let mut out = vec![0.0; p * r];
        for i in 0..p {
            for j in 0..r {
                for k in 0..q {
                    out[i * r + j] += a[i * q + k] * b[k * r + j];
                }
            }
        }
        out
    }

    #[test]
    fn parallel_and_sequential_agree_bitwise() {
        let (p, q, r) = (150, 37, 130);
        let a: Vec<f64> = (0..p * q).map(|i| ((i * 7919) % 101) as f64 / 13.0 - 3.0).collect();
        let b: Vec<f64> = (0..q * r).map(|i| ((i * 104729) % 97) as f64 / 11.0 - 4.0).collect();
        let mut s = vec![0.0; p * r];
        let mut par = vec![0.0; p * r];
        matmul(&a, &b, &mut s, p, q, r, Exec::Sequential);
        matmul(&a, &b, &mut par, p, q, r, Exec::Parallel);
        assert_eq!(s, par);
        let oracle = naive(&a, &b, p, q, r);
        for (x, y) in s.iter().zip(&oracle) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn transposed_variants_match_naive() {
        let (p, q, r) = (4, 3, 5);
        let a: Vec<f64> = (0..p * q).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..q * r).map(|i| 1.0 - i as f64 * 0.25).collect();
        let expect = naive(&a, &b, p, q, r);

        // b stored transposed (r×q)
        let mut bt = vec![0.0; r * q];
        for k in 0..q {
            for j in 0..r {
                bt[j * q + k] = b[k * r + j];
            }
        }
        let mut out = vec![0.0; p * r];
        matmul_bt(&a, &bt, &mut out, p, q, r, Exec::Sequential);
        assert_eq!(out, expect);

        // a stored transposed (q×p)
        let mut at = vec![0.0; q * p];
        for i in 0..p {
            for k in 0..q {
                at[k * p + i] = a[i * q + k];
            }
        }
        let mut out = vec![0.0; p * r];
        matmul_at(&at, &b, &mut out, q, p, r, Exec::Sequential);
        assert_eq!(out, expect);
    }
}
