//! Batched layer kernels.
//!
//! Activations inside the trunk use a channel-major layout `[C][B][H][W]`, so a
//! 3×3 convolution over a batch chunk is a single GEMM of the `[C_out × 9·C_in]`
//! weight against an im2col buffer `[9·C_in × B·H·W]`.

use super::tensor::{gemm, MatMut, MatRef, Real};

/// Upper bound on im2col buffer elements; larger batches are processed in chunks.
const COL_BUDGET: usize = 1 << 22;

/// Spatial extent of a channel-major activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
}

impl Plane {
    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

/// `[B][C][H][W]` → `[C][B][H][W]`.
pub fn to_channel_major<T: Real>(x: &[T], batch: usize, channels: usize, area: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..batch {
        for c in 0..channels {
            let src = &x[(b * channels + c) * area..][..area];
            out[(c * batch + b) * area..][..area].copy_from_slice(src);
        }
    }
    out
}

fn chunk_size(c_in: usize, area: usize, batch: usize) -> usize {
    (COL_BUDGET / (9 * c_in * area).max(1)).clamp(1, batch)
}

fn im2col<T: Real>(x: &[T], c_in: usize, batch: usize, plane: Plane, b0: usize, nb: usize, col: &mut [T]) {
    let (h, w) = (plane.height, plane.width);
    let area = plane.area();
    let n = nb * area;
    for ci in 0..c_in {
        for kh in 0..3 {
            for kw in 0..3 {
                let row = &mut col[((ci * 9) + kh * 3 + kw) * n..][..n];
                let x_lo = if kw == 0 { 1 } else { 0 };
                let x_hi = if kw == 2 { w.saturating_sub(1) } else { w };
                for bi in 0..nb {
                    let src = &x[(ci * batch + b0 + bi) * area..][..area];
                    let dst = &mut row[bi * area..][..area];
                    for oy in 0..h {
                        let iy = oy as isize + kh as isize - 1;
                        let out_row = &mut dst[oy * w..][..w];
                        if iy < 0 || iy >= h as isize {
                            out_row.fill(T::zero());
                            continue;
                        }
                        let in_row = &src[iy as usize * w..][..w];
                        if x_lo > 0 {
                            out_row[0] = T::zero();
                        }
                        if x_hi < w {
                            out_row[w - 1] = T::zero();
                        }
                        for ox in x_lo..x_hi {
                            out_row[ox] = in_row[ox + kw - 1];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(col: &[T], c_in: usize, batch: usize, plane: Plane, b0: usize, nb: usize, dx: &mut [T]) {
    let (h, w) = (plane.height, plane.width);
    let area = plane.area();
    let n = nb * area;
    for ci in 0..c_in {
        for kh in 0..3 {
            for kw in 0..3 {
                let row = &col[((ci * 9) + kh * 3 + kw) * n..][..n];
                let x_lo = if kw == 0 { 1 } else { 0 };
                let x_hi = if kw == 2 { w.saturating_sub(1) } else { w };
                for bi in 0..nb {
                    let dst = &mut dx[(ci * batch + b0 + bi) * area..][..area];
                    let src = &row[bi * area..][..area];
                    for oy in 0..h {
                        let iy = oy as isize + kh as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let col_row = &src[oy * w..][..w];
                        let in_row = &mut dst[iy as usize * w..][..w];
                        for ox in x_lo..x_hi {
                            in_row[ox + kw - 1] += col_row[ox];
                        }
                    }
                }
            }
        }
    }
}

/// 3×3 convolution, stride 1, zero padding 1. `weight` is `[c_out][c_in][3][3]`.
pub fn conv3x3_forward<T: Real>(
    x: &[T],
    c_in: usize,
    batch: usize,
    plane: Plane,
    weight: &[T],
    bias: &[T],
    c_out: usize,
) -> Vec<T> {
    let area = plane.area();
    let total = batch * area;
    let k = 9 * c_in;
    let mut y = vec![T::zero(); c_out * total];
    for (co, row) in y.chunks_mut(total).enumerate() {
        row.fill(bias[co]);
    }
    if area == 1 {
        // Only the centre tap ever meets a non-padding input.
        gemm(
            T::one(),
            MatRef::new(&weight[4..], c_out, c_in, k, 9),
            MatRef::row_major(x, c_in, batch),
            T::one(),
            MatMut::row_major(&mut y, c_out, batch),
        );
        return y;
    }
    let chunk = chunk_size(c_in, area, batch);
    let mut col = vec![T::zero(); k * chunk * area];
    let mut b0 = 0;
    while b0 < batch {
        let nb = chunk.min(batch - b0);
        let n = nb * area;
        im2col(x, c_in, batch, plane, b0, nb, &mut col);
        gemm(
            T::one(),
            MatRef::row_major(weight, c_out, k),
            MatRef::row_major(&col[..k * n], k, n),
            T::one(),
            MatMut::new(&mut y[b0 * area..], c_out, n, total, 1),
        );
        b0 += nb;
    }
    y
}

/// Accumulates `dweight`/`dbias` and, when `dx` is given, writes the input gradient.
#[allow(clippy::too_many_arguments)]
pub fn conv3x3_backward<T: Real>(
    x: &[T],
    c_in: usize,
    batch: usize,
    plane: Plane,
    weight: &[T],
    c_out: usize,
    dy: &[T],
    dweight: &mut [T],
    dbias: &mut [T],
    mut dx: Option<&mut [T]>,
) {
    let area = plane.area();
    let total = batch * area;
    let k = 9 * c_in;
    for (co, row) in dy.chunks(total).enumerate() {
        dbias[co] += row.iter().copied().sum::<T>();
    }
    if let Some(dx) = dx.as_deref_mut() {
        dx.fill(T::zero());
    }
    if area == 1 {
        gemm(
            T::one(),
            MatRef::row_major(dy, c_out, batch),
            MatRef::row_major(x, c_in, batch).t(),
            T::one(),
            MatMut::new(&mut dweight[4..], c_out, c_in, k, 9),
        );
        if let Some(dx) = dx {
            gemm(
                T::one(),
                MatRef::new(&weight[4..], c_out, c_in, k, 9).t(),
                MatRef::row_major(dy, c_out, batch),
                T::zero(),
                MatMut::row_major(dx, c_in, batch),
            );
        }
        return;
    }
    let chunk = chunk_size(c_in, area, batch);
    let mut col = vec![T::zero(); k * chunk * area];
    let mut dcol = if dx.is_some() {
        vec![T::zero(); k * chunk * area]
    } else {
        Vec::new()
    };
    let mut b0 = 0;
    while b0 < batch {
        let nb = chunk.min(batch - b0);
        let n = nb * area;
        im2col(x, c_in, batch, plane, b0, nb, &mut col);
        let dy_chunk = MatRef::new(&dy[b0 * area..], c_out, n, total, 1);
        gemm(
            T::one(),
            dy_chunk,
            MatRef::row_major(&col[..k * n], k, n).t(),
            T::one(),
            MatMut::row_major(dweight, c_out, k),
        );
        if let Some(dx) = dx.as_deref_mut() {
            gemm(
                T::one(),
                MatRef::row_major(weight, c_out, k).t(),
                dy_chunk,
                T::zero(),
                MatMut::row_major(&mut dcol[..k * n], k, n),
            );
            col2im_add(&dcol[..k * n], c_in, batch, plane, b0, nb, dx);
        }
        b0 += nb;
    }
}

/// Output extent of the 3×3, stride-2, padding-1 max pool.
pub fn pool_plane(plane: Plane) -> Plane {
    Plane {
        height: plane.height.div_ceil(2),
        width: plane.width.div_ceil(2),
    }
}

/// 3×3 max pool with stride 2 and padding 1 over every `[H][W]` plane.
/// Returns the pooled values and, per output, the flat index of the winner.
pub fn maxpool3x3s2_forward<T: Real>(x: &[T], planes: usize, plane: Plane) -> (Vec<T>, Vec<u32>) {
    let out = pool_plane(plane);
    let windows = |o: usize, extent: usize| {
        let lo = (2 * o).saturating_sub(1);
        let hi = (2 * o + 2).min(extent);
        lo..hi
    };
    let ys: Vec<_> = (0..out.height).map(|oy| windows(oy, plane.height)).collect();
    let xs: Vec<_> = (0..out.width).map(|ox| windows(ox, plane.width)).collect();
    pool_with_windows(x, planes, plane, out, &ys, &xs)
}

/// Adaptive max pool to `size × size`, window `[⌊i·H/s⌋, ⌈(i+1)·H/s⌉)`.
pub fn adaptive_maxpool_forward<T: Real>(x: &[T], planes: usize, plane: Plane, size: usize) -> (Vec<T>, Vec<u32>) {
    let windows = |extent: usize| -> Vec<std::ops::Range<usize>> {
        (0..size)
            .map(|i| (i * extent / size)..((i + 1) * extent).div_ceil(size))
            .collect()
    };
    let out = Plane {
        height: size,
        width: size,
    };
    pool_with_windows(x, planes, plane, out, &windows(plane.height), &windows(plane.width))
}

fn pool_with_windows<T: Real>(
    x: &[T],
    planes: usize,
    plane: Plane,
    out: Plane,
    ys: &[std::ops::Range<usize>],
    xs: &[std::ops::Range<usize>],
) -> (Vec<T>, Vec<u32>) {
    let in_area = plane.area();
    let out_area = out.area();
    // flat input offsets of every output window, shared by all planes
    let mut offsets = Vec::new();
    let mut bounds = Vec::with_capacity(out_area + 1);
    bounds.push(0);
    for yr in ys {
        for xr in xs {
            for iy in yr.clone() {
                offsets.extend(xr.clone().map(|ix| (iy * plane.width + ix) as u32));
            }
            bounds.push(offsets.len());
        }
    }
    let mut values = Vec::with_capacity(planes * out_area);
    let mut argmax = Vec::with_capacity(planes * out_area);
    if offsets.len() == out_area {
        // every window is a single input: a plain gather
        for src in x.chunks_exact(in_area).take(planes) {
            values.extend(offsets.iter().map(|&i| src[i as usize]));
            argmax.extend_from_slice(&offsets);
        }
        return (values, argmax);
    }
    for src in x.chunks_exact(in_area).take(planes) {
        for w in bounds.windows(2) {
            let mut best = T::neg_infinity();
            let mut best_i = 0;
            for &i in &offsets[w[0]..w[1]] {
                let v = src[i as usize];
                if v > best {
                    best = v;
                    best_i = i;
                }
            }
            values.push(best);
            argmax.push(best_i);
        }
    }
    (values, argmax)
}

/// Routes pooled gradients back to the recorded winners.
pub fn pool_backward<T: Real>(dy: &[T], argmax: &[u32], planes: usize, in_area: usize, out_area: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); planes * in_area];
    for p in 0..planes {
        let g = &dy[p * out_area..][..out_area];
        let idx = &argmax[p * out_area..][..out_area];
        let dst = &mut dx[p * in_area..][..in_area];
        for (&gi, &i) in g.iter().zip(idx) {
            dst[i as usize] += gi;
        }
    }
    dx
}

pub fn relu<T: Real>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect()
}

/// Zeroes `grad` wherever the ReLU output `activated` is not positive.
pub fn relu_mask_in_place<T: Real>(grad: &mut [T], activated: &[T]) {
    for (g, &a) in grad.iter_mut().zip(activated) {
        if a <= T::zero() {
            *g = T::zero();
        }
    }
}

/// `y = x·wᵀ + b` for `x: [batch × fan_in]`, `w: [fan_out × fan_in]`.
pub fn dense_forward<T: Real>(x: &[T], batch: usize, fan_in: usize, w: &[T], b: &[T], fan_out: usize) -> Vec<T> {
    let mut y = Vec::with_capacity(batch * fan_out);
    for _ in 0..batch {
        y.extend_from_slice(b);
    }
    gemm(
        T::one(),
        MatRef::row_major(x, batch, fan_in),
        MatRef::row_major(w, fan_out, fan_in).t(),
        T::one(),
        MatMut::row_major(&mut y, batch, fan_out),
    );
    y
}

/// Returns `(dw, db, dx)`; `dx` only when requested.
pub fn dense_backward<T: Real>(
    x: &[T],
    batch: usize,
    fan_in: usize,
    w: &[T],
    fan_out: usize,
    dy: &[T],
    want_dx: bool,
) -> (Vec<T>, Vec<T>, Option<Vec<T>>) {
    let mut dw = vec![T::zero(); fan_out * fan_in];
    gemm(
        T::one(),
        MatRef::row_major(dy, batch, fan_out).t(),
        MatRef::row_major(x, batch, fan_in),
        T::zero(),
        MatMut::row_major(&mut dw, fan_out, fan_in),
    );
    let mut db = vec![T::zero(); fan_out];
    for row in dy.chunks(fan_out) {
        for (d, &g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    let dx = want_dx.then(|| {
        let mut dx = vec![T::zero(); batch * fan_in];
        gemm(
            T::one(),
            MatRef::row_major(dy, batch, fan_out),
            MatRef::row_major(w, fan_out, fan_in),
            T::zero(),
            MatMut::row_major(&mut dx, batch, fan_in),
        );
        dx
    });
    (dw, db, dx)
}

/// `q = v + a − mean_actions(a)`, row by row.
pub fn dueling_combine<T: Real>(v: &[T], a: &[T], batch: usize, actions: usize) -> Vec<T> {
    assert_eq!(v.len(), batch);
    assert_eq!(a.len(), batch * actions);
    let inv = T::one() / T::of(actions as f64);
    let mut q = Vec::with_capacity(batch * actions);
    for (vb, row) in v.iter().zip(a.chunks(actions)) {
        let mean = row.iter().copied().sum::<T>() * inv;
        q.extend(row.iter().map(|&x| *vb + x - mean));
    }
    q
}

/// Gradients of [`dueling_combine`] with respect to `v` and `a`.
pub fn dueling_backward<T: Real>(dq: &[T], batch: usize, actions: usize) -> (Vec<T>, Vec<T>) {
    let inv = T::one() / T::of(actions as f64);
    let mut dv = Vec::with_capacity(batch);
    let mut da = Vec::with_capacity(batch * actions);
    for row in dq.chunks(actions) {
        let s = row.iter().copied().sum::<T>();
        dv.push(s);
        let mean = s * inv;
        da.extend(row.iter().map(|&g| g - mean));
    }
    (dv, da)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], c_in: usize, batch: usize, h: usize, w: usize, weight: &[f64], bias: &[f64], c_out: usize) -> Vec<f64> {
        let area = h * w;
        let mut y = vec![0.0; c_out * batch * area];
        for co in 0..c_out {
            for b in 0..batch {
                for oy in 0..h {
                    for ox in 0..w {
                        let mut s = bias[co];
                        for ci in 0..c_in {
                            for kh in 0..3 {
                                for kw in 0..3 {
                                    let iy = oy as isize + kh as isize - 1;
                                    let ix = ox as isize + kw as isize - 1;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    s += weight[((co * c_in + ci) * 3 + kh) * 3 + kw]
                                        * x[(ci * batch + b) * area + iy as usize * w + ix as usize];
                                }
                            }
                        }
                        y[(co * batch + b) * area + oy * w + ox] = s;
                    }
                }
            }
        }
        y
    }

    fn pseudo(n: usize, seed: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 + 1.0) * seed).sin()).collect()
    }

    #[test]
    fn conv_matches_direct_loops() {
        for &(h, w) in &[(5, 4), (1, 1), (1, 3), (2, 2)] {
            let (c_in, c_out, batch) = (2, 3, 2);
            let x = pseudo(c_in * batch * h * w, 0.37);
            let wt = pseudo(c_out * c_in * 9, 1.3);
            let b = pseudo(c_out, 2.1);
            let got = conv3x3_forward(&x, c_in, batch, Plane { height: h, width: w }, &wt, &b, c_out);
            let want = naive_conv(&x, c_in, batch, h, w, &wt, &b, c_out);
            for (g, e) in got.iter().zip(&want) {
                assert!((g - e).abs() < 1e-12, "{h}x{w}: {g} vs {e}");
            }
        }
    }

    #[test]
    fn maxpool_shapes_and_values() {
        let x: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let (y, idx) = maxpool3x3s2_forward(&x, 1, Plane { height: 4, width: 4 });
        // windows rows {0,1},{1,2,3}; cols likewise
        assert_eq!(y, vec![5.0, 7.0, 13.0, 15.0]);
        assert_eq!(idx, vec![5, 7, 13, 15]);
        assert_eq!(pool_plane(Plane { height: 84, width: 84 }), Plane { height: 42, width: 42 });
        assert_eq!(pool_plane(Plane { height: 21, width: 21 }), Plane { height: 11, width: 11 });
        assert_eq!(pool_plane(Plane { height: 1, width: 1 }), Plane { height: 1, width: 1 });
    }

    #[test]
    fn adaptive_pool_windows() {
        let x: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let (y, _) = adaptive_maxpool_forward(&x, 1, Plane { height: 4, width: 4 }, 2);
        assert_eq!(y, vec![5.0, 7.0, 13.0, 15.0]);
        // upsampling replicates
        let (y, idx) = adaptive_maxpool_forward(&[3.0f64], 1, Plane { height: 1, width: 1 }, 6);
        assert_eq!(y, vec![3.0; 36]);
        assert!(idx.iter().all(|&i| i == 0));
        let dx = pool_backward(&vec![1.0f64; 36], &idx, 1, 1, 36);
        assert_eq!(dx, vec![36.0]);
    }

    #[test]
    fn dueling_examples() {
        assert_eq!(dueling_combine(&[0.0f64], &[1.0, 2.0, 3.0], 1, 3), vec![-1.0, 0.0, 1.0]);
        assert_eq!(dueling_combine(&[5.0f64], &[0.0, 0.0], 1, 2), vec![5.0, 5.0]);
        assert_eq!(dueling_combine(&[2.0f64], &[1.0, 3.0, 5.0, 7.0], 1, 4), vec![-1.0, 1.0, 3.0, 5.0]);
    }

    #[test]
    fn channel_major_transpose() {
        // batch 2, channels 2, area 1
        let x = [1.0f64, 2.0, 3.0, 4.0];
        assert_eq!(to_channel_major(&x, 2, 2, 1), vec![1.0, 3.0, 2.0, 4.0]);
    }
}
