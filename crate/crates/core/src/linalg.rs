//! Small dense matrix helpers for the router MLP and low-rank factors.
//! Matrices are row-major.

use crate::real::Real;

/// c[m,n] = a[m,k] * b[k,n]
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow.iter()) {
                *cv = *cv + av * *bv;
            }
        }
    }
    c
}

/// c[k,n] = a^T[k,m] * b[m,n] with a stored [m,k]
pub fn matmul_at_b<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); k * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[i * n..(i + 1) * n];
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow.iter()) {
                *cv = *cv + av * *bv;
            }
        }
    }
    c
}

/// c[m,k] = a[m,n] * b^T[n,k] with b stored [k,n]
pub fn matmul_a_bt<T: Real>(a: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for (av, bv) in arow.iter().zip(brow.iter()) {
                acc = acc + *av * *bv;
            }
            c[i * k + p] = acc;
        }
    }
    c
}

/// y[m] = w[m,n] * v[n]
pub fn matvec<T: Real>(w: &[T], v: &[T], m: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(w.len(), m * n);
    debug_assert_eq!(v.len(), n);
    (0..m)
        .map(|i| {
            let row = &w[i * n..(i + 1) * n];
            let mut acc = T::zero();
            for (a, b) in row.iter().zip(v.iter()) {
                acc = acc + *a * *b;
            }
            acc
        })
        .collect()
}

/// y[n] = w^T[n,m] * v[m] with w stored [m,n]
pub fn matvec_t<T: Real>(w: &[T], v: &[T], m: usize, n: usize) -> Vec<T> {
    let mut y = vec![T::zero(); n];
    for i in 0..m {
        let vi = v[i];
        if vi == T::zero() {
            continue;
        }
        let row = &w[i * n..(i + 1) * n];
        for (o, a) in y.iter_mut().zip(row.iter()) {
            *o = *o + vi * *a;
        }
    }
    y
}

/// Frobenius norm.
pub fn frobenius<T: Real>(a: &[T]) -> f64 {
    a.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // [1 2; 3 4] * [5 6; 7 8] = [19 22; 43 50]
        let a = vec![1.0f64, 2.0, 3.0, 4.0];
        let b = vec![5.0f64, 6.0, 7.0, 8.0];
        assert_eq!(matmul(&a, &b, 2, 2, 2), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn transposed_variants_agree() {
        let a = vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = vec![1.0f64, 0.0, 2.0, 1.0, 0.0, 1.0]; // 3x2... as [m,n] Layouts below
        // a^T (3x2) * a (2x3) = 3x3
        let c = matmul_at_b(&a, &a, 2, 3, 3);
        // manual: a^T a
        let at = vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let expect = matmul(&at, &a, 3, 2, 3);
        assert_eq!(c, expect);
        // a (2x3) * b^T where b is [2,3]
        let d = matmul_a_bt(&a, &b, 2, 3, 2);
        let bt = vec![1.0, 1.0, 0.0, 0.0, 2.0, 1.0]; // 3x2
        let expect2 = matmul(&a, &bt, 2, 3, 2);
        assert_eq!(d, expect2);
    }

    #[test]
    fn matvec_and_transpose() {
        let w = vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let v = vec![1.0f64, 0.5, -1.0];
        assert_eq!(matvec(&w, &v, 2, 3), vec![-1.0, 0.5]);
        let u = vec![2.0f64, -1.0];
        assert_eq!(matvec_t(&w, &u, 2, 3), vec![-2.0, -1.0, 0.0]);
    }
}
