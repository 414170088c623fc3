//! Power-iteration estimate of the largest singular value.

use super::tensor::Real;

/// Result of [`power_iteration`].
#[derive(Debug, Clone, PartialEq)]
pub struct PowerIteration<T> {
    /// `σ̂ = uᵀ W v`.
    pub sigma: T,
    pub u: Vec<T>,
    pub v: Vec<T>,
    /// Set when `W` (or `Wᵀu`) vanished; `u` is then returned unchanged and `σ̂ = 0`.
    pub degenerate: bool,
}

fn norm<T: Real>(x: &[T]) -> T {
    x.iter().map(|&v| v * v).sum::<T>().sqrt()
}

/// Runs `iters` rounds of `v ← Wᵀu/‖Wᵀu‖, u ← Wv/‖Wv‖` on the row-major
/// `rows × cols` matrix `w` and returns `σ̂ = uᵀWv` with the updated vectors.
///
/// Convolution kernels are viewed as `c_out × (c_in·k_h·k_w)`, which is exactly
/// their row-major storage.
pub fn power_iteration<T: Real>(w: &[T], rows: usize, cols: usize, u: &[T], iters: usize) -> PowerIteration<T> {
    assert_eq!(w.len(), rows * cols);
    assert_eq!(u.len(), rows);
    let degenerate = || PowerIteration {
        sigma: T::zero(),
        u: u.to_vec(),
        v: vec![T::zero(); cols],
        degenerate: true,
    };
    let mut u_cur = u.to_vec();
    let mut v = vec![T::zero(); cols];
    let mut wv = vec![T::zero(); rows];
    for _ in 0..iters.max(1) {
        v.fill(T::zero());
        for (r, &ur) in u_cur.iter().enumerate() {
            for (vc, &wrc) in v.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
                *vc += wrc * ur;
            }
        }
        let nv = norm(&v);
        if !(nv > T::zero()) {
            return degenerate();
        }
        v.iter_mut().for_each(|x| *x /= nv);
        matvec(w, cols, &v, &mut wv);
        let nu = norm(&wv);
        if !(nu > T::zero()) {
            return degenerate();
        }
        for (ur, &x) in u_cur.iter_mut().zip(&wv) {
            *ur = x / nu;
        }
    }
    matvec(w, cols, &v, &mut wv);
    let sigma = u_cur.iter().zip(&wv).map(|(&a, &b)| a * b).sum();
    PowerIteration {
        sigma,
        u: u_cur,
        v,
        degenerate: false,
    }
}

fn matvec<T: Real>(w: &[T], cols: usize, v: &[T], out: &mut [T]) {
    for (o, row) in out.iter_mut().zip(w.chunks(cols)) {
        *o = row.iter().zip(v).map(|(&a, &b)| a * b).sum();
    }
}
