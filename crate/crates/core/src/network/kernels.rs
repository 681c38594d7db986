//! Raw 3D kernels on channel-planar buffers.
//!
//! Every forward kernel has a matching backward that accumulates parameter
//! gradients and (optionally) returns the input gradient.

use crate::real::{gemm, Real};
use crate::volume::Dims;

pub(crate) const NORM_EPS: f64 = 1e-5;

/// Unfold a 3×3×3, padding 1, stride 1 neighbourhood: `[cin*27, n]`.
pub(crate) fn im2col3<T: Real>(input: &[T], cin: usize, dims: Dims, col: &mut Vec<T>) {
    let n = dims.voxels();
    let (d, h, w) = (dims.d, dims.h, dims.w);
    col.clear();
    col.resize(cin * 27 * n, T::zero());
    for ci in 0..cin {
        let plane = &input[ci * n..(ci + 1) * n];
        for kz in 0..3 {
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = (ci * 27 + (kz * 3 + ky) * 3 + kx) * n;
                    let x0 = 1usize.saturating_sub(kx);
                    let x1 = (w + 1 - kx).min(w);
                    if x0 >= x1 {
                        continue;
                    }
                    for z in 0..d {
                        let iz = z + kz;
                        if iz == 0 || iz > d {
                            continue;
                        }
                        let iz = iz - 1;
                        for y in 0..h {
                            let iy = y + ky;
                            if iy == 0 || iy > h {
                                continue;
                            }
                            let iy = iy - 1;
                            let dst = row + (z * h + y) * w;
                            let src = (iz * h + iy) * w;
                            col[dst + x0..dst + x1]
                                .copy_from_slice(&plane[src + x0 + kx - 1..src + x1 + kx - 1]);
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col3`]: scatter-add columns back onto the input grid.
pub(crate) fn col2im3<T: Real>(col: &[T], cin: usize, dims: Dims, out: &mut [T]) {
    let n = dims.voxels();
    let (d, h, w) = (dims.d, dims.h, dims.w);
    for ci in 0..cin {
        let plane = &mut out[ci * n..(ci + 1) * n];
        for kz in 0..3 {
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = (ci * 27 + (kz * 3 + ky) * 3 + kx) * n;
                    let x0 = 1usize.saturating_sub(kx);
                    let x1 = (w + 1 - kx).min(w);
                    if x0 >= x1 {
                        continue;
                    }
                    for z in 0..d {
                        let iz = z + kz;
                        if iz == 0 || iz > d {
                            continue;
                        }
                        let iz = iz - 1;
                        for y in 0..h {
                            let iy = y + ky;
                            if iy == 0 || iy > h {
                                continue;
                            }
                            let iy = iy - 1;
                            let src = row + (z * h + y) * w;
                            let dst = (iz * h + iy) * w;
                            for (o, &c) in plane[dst + x0 + kx - 1..dst + x1 + kx - 1]
                                .iter_mut()
                                .zip(&col[src + x0..src + x1])
                            {
                                *o += c;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gather non-overlapping 2×2×2 blocks: `[c*8, n/8]`, coarse grid `dims.halved()`.
pub(crate) fn gather2<T: Real>(input: &[T], c: usize, fine: Dims, out: &mut Vec<T>) {
    let coarse = fine.halved();
    let n = fine.voxels();
    let m = coarse.voxels();
    out.clear();
    out.resize(c * 8 * m, T::zero());
    for ci in 0..c {
        let plane = &input[ci * n..(ci + 1) * n];
        for k in 0..8 {
            let (dz, dy, dx) = (k >> 2, (k >> 1) & 1, k & 1);
            let row = &mut out[(ci * 8 + k) * m..(ci * 8 + k + 1) * m];
            for z in 0..coarse.d {
                for y in 0..coarse.h {
                    let src = fine.index(2 * z + dz, 2 * y + dy, dx);
                    let dst = coarse.index(z, y, 0);
                    for x in 0..coarse.w {
                        row[dst + x] = plane[src + 2 * x];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`gather2`] (a permutation, so plain assignment).
pub(crate) fn scatter2<T: Real>(blocks: &[T], c: usize, fine: Dims, out: &mut [T]) {
    let coarse = fine.halved();
    let n = fine.voxels();
    let m = coarse.voxels();
    for ci in 0..c {
        let plane = &mut out[ci * n..(ci + 1) * n];
        for k in 0..8 {
            let (dz, dy, dx) = (k >> 2, (k >> 1) & 1, k & 1);
            let row = &blocks[(ci * 8 + k) * m..(ci * 8 + k + 1) * m];
            for z in 0..coarse.d {
                for y in 0..coarse.h {
                    let dst = fine.index(2 * z + dz, 2 * y + dy, dx);
                    let src = coarse.index(z, y, 0);
                    for x in 0..coarse.w {
                        plane[dst + 2 * x] = row[src + x];
                    }
                }
            }
        }
    }
}

/// 3×3×3 same-padding convolution without bias. `weight` is `[cout, cin*27]`.
pub(crate) fn conv3_forward<T: Real>(
    input: &[T],
    cin: usize,
    cout: usize,
    dims: Dims,
    weight: &[T],
    scratch: &mut Vec<T>,
) -> Vec<T> {
    let n = dims.voxels();
    im2col3(input, cin, dims, scratch);
    let mut out = vec![T::zero(); cout * n];
    gemm(cout, cin * 27, n, weight, false, scratch, false, &mut out, false);
    out
}

/// Returns the input gradient when `need_input_grad`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3_backward<T: Real>(
    input: &[T],
    cin: usize,
    cout: usize,
    dims: Dims,
    weight: &[T],
    grad_out: &[T],
    grad_weight: &mut [T],
    need_input_grad: bool,
    scratch: &mut Vec<T>,
) -> Option<Vec<T>> {
    let n = dims.voxels();
    let k = cin * 27;
    im2col3(input, cin, dims, scratch);
    gemm(cout, n, k, grad_out, false, scratch, true, grad_weight, true);
    if !need_input_grad {
        return None;
    }
    // reuse the column buffer for the column gradient
    gemm(k, cout, n, weight, true, grad_out, false, scratch, false);
    let mut grad_in = vec![T::zero(); cin * n];
    col2im3(scratch, cin, dims, &mut grad_in);
    Some(grad_in)
}

/// 2×2×2 stride-2 convolution. `weight` is `[cout, cin*8]`; output on `fine.halved()`.
pub(crate) fn down_forward<T: Real>(
    input: &[T],
    cin: usize,
    cout: usize,
    fine: Dims,
    weight: &[T],
    scratch: &mut Vec<T>,
) -> Vec<T> {
    let m = fine.halved().voxels();
    gather2(input, cin, fine, scratch);
    let mut out = vec![T::zero(); cout * m];
    gemm(cout, cin * 8, m, weight, false, scratch, false, &mut out, false);
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn down_backward<T: Real>(
    input: &[T],
    cin: usize,
    cout: usize,
    fine: Dims,
    weight: &[T],
    grad_out: &[T],
    grad_weight: &mut [T],
    scratch: &mut Vec<T>,
) -> Vec<T> {
    let m = fine.halved().voxels();
    let k = cin * 8;
    gather2(input, cin, fine, scratch);
    gemm(cout, m, k, grad_out, false, scratch, true, grad_weight, true);
    gemm(k, cout, m, weight, true, grad_out, false, scratch, false);
    let mut grad_in = vec![T::zero(); cin * fine.voxels()];
    scatter2(scratch, cin, fine, &mut grad_in);
    grad_in
}

/// 2×2×2 stride-2 transposed convolution. `weight` is `[cin, cout*8]`;
/// `coarse` is the input grid, output lives on `coarse.doubled()`.
pub(crate) fn up_forward<T: Real>(
    input: &[T],
    cin: usize,
    cout: usize,
    coarse: Dims,
    weight: &[T],
    scratch: &mut Vec<T>,
) -> Vec<T> {
    let m = coarse.voxels();
    let fine = coarse.doubled();
    scratch.clear();
    scratch.resize(cout * 8 * m, T::zero());
    gemm(cout * 8, cin, m, weight, true, input, false, scratch, false);
    let mut out = vec![T::zero(); cout * fine.voxels()];
    scatter2(scratch, cout, fine, &mut out);
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn up_backward<T: Real>(
    input: &[T],
    cin: usize,
    cout: usize,
    coarse: Dims,
    weight: &[T],
    grad_out: &[T],
    grad_weight: &mut [T],
    scratch: &mut Vec<T>,
) -> Vec<T> {
    let m = coarse.voxels();
    let fine = coarse.doubled();
    gather2(grad_out, cout, fine, scratch);
    gemm(cin, m, cout * 8, input, false, scratch, true, grad_weight, true);
    let mut grad_in = vec![T::zero(); cin * m];
    gemm(cin, cout * 8, m, weight, false, scratch, false, &mut grad_in, false);
    grad_in
}

/// Per-channel normalization over the spatial grid, followed by an affine map.
/// Returns `(output, normalized, inv_std)`.
pub(crate) fn norm_forward<T: Real>(
    input: &[T],
    channels: usize,
    n: usize,
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut out = vec![T::zero(); channels * n];
    let mut xhat = vec![T::zero(); channels * n];
    let mut inv_std = vec![T::zero(); channels];
    for c in 0..channels {
        let plane = &input[c * n..(c + 1) * n];
        let mean = plane.iter().map(|v| v.as_f64()).sum::<f64>() / n as f64;
        let var = plane
            .iter()
            .map(|v| {
                let d = v.as_f64() - mean;
                d * d
            })
            .sum::<f64>()
            / n as f64;
        let inv = 1.0 / (var + NORM_EPS).sqrt();
        inv_std[c] = T::from_f64(inv);
        let (g, b) = (gamma[c], beta[c]);
        let mean_t = T::from_f64(mean);
        let inv_t = T::from_f64(inv);
        for ((o, xh), &v) in out[c * n..(c + 1) * n]
            .iter_mut()
            .zip(&mut xhat[c * n..(c + 1) * n])
            .zip(plane)
        {
            *xh = (v - mean_t) * inv_t;
            *o = g * *xh + b;
        }
    }
    (out, xhat, inv_std)
}

/// Consumes `grad_out` and returns the input gradient in its place.
pub(crate) fn norm_backward<T: Real>(
    mut grad: Vec<T>,
    xhat: &[T],
    inv_std: &[T],
    channels: usize,
    n: usize,
    gamma: &[T],
    grad_gamma: &mut [T],
    grad_beta: &mut [T],
) -> Vec<T> {
    let nf = n as f64;
    for c in 0..channels {
        let g = &mut grad[c * n..(c + 1) * n];
        let xh = &xhat[c * n..(c + 1) * n];
        let mut sum_g = 0.0f64;
        let mut sum_gx = 0.0f64;
        for (&gv, &xv) in g.iter().zip(xh) {
            sum_g += gv.as_f64();
            sum_gx += (gv * xv).as_f64();
        }
        grad_gamma[c] += T::from_f64(sum_gx);
        grad_beta[c] += T::from_f64(sum_g);
        // d/dz = gamma * inv / n * (n*g - sum_g - xhat * sum_gx)
        let scale = T::from_f64(gamma[c].as_f64() * inv_std[c].as_f64() / nf);
        let mean_g = T::from_f64(sum_g);
        let mean_gx = T::from_f64(sum_gx);
        let nt = T::from_f64(nf);
        for (gv, &xv) in g.iter_mut().zip(xh) {
            *gv = scale * (nt * *gv - mean_g - xv * mean_gx);
        }
    }
    grad
}

#[inline]
pub(crate) fn elu<T: Real>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        v.exp_m1()
    }
}

/// ELU derivative expressed through its output.
#[inline]
pub(crate) fn elu_grad_from_output<T: Real>(y: T) -> T {
    if y > T::zero() {
        T::one()
    } else {
        y + T::one()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) - 0.5
    }

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n).map(|_| lcg(&mut s)).collect()
    }

    /// Direct-loop reference convolution.
    fn conv3_naive(input: &[f64], cin: usize, cout: usize, dims: Dims, weight: &[f64]) -> Vec<f64> {
        let n = dims.voxels();
        let mut out = vec![0.0; cout * n];
        for co in 0..cout {
            for z in 0..dims.d as isize {
                for y in 0..dims.h as isize {
                    for x in 0..dims.w as isize {
                        let mut s = 0.0;
                        for ci in 0..cin {
                            for kz in 0..3isize {
                                for ky in 0..3isize {
                                    for kx in 0..3isize {
                                        let (iz, iy, ix) = (z + kz - 1, y + ky - 1, x + kx - 1);
                                        if iz < 0
                                            || iy < 0
                                            || ix < 0
                                            || iz >= dims.d as isize
                                            || iy >= dims.h as isize
                                            || ix >= dims.w as isize
                                        {
                                            continue;
                                        }
                                        let wv = weight[co * cin * 27
                                            + ci * 27
                                            + ((kz * 3 + ky) * 3 + kx) as usize];
                                        s += wv
                                            * input[ci * n
                                                + dims.index(iz as usize, iy as usize, ix as usize)];
                                    }
                                }
                            }
                        }
                        out[co * n + dims.index(z as usize, y as usize, x as usize)] = s;
                    }
                }
            }
        }
        out
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn conv3_matches_direct_loops() {
        let dims = Dims::new(3, 4, 5);
        let (cin, cout) = (2, 3);
        let input = rand_vec(cin * dims.voxels(), 1);
        let weight = rand_vec(cout * cin * 27, 2);
        let mut scratch = Vec::new();
        let got = conv3_forward(&input, cin, cout, dims, &weight, &mut scratch);
        let want = conv3_naive(&input, cin, cout, dims, &weight);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn im2col_adjoint_identity() {
        // <im2col(x), c> == <x, col2im(c)>
        let dims = Dims::new(2, 3, 4);
        let cin = 2;
        let x = rand_vec(cin * dims.voxels(), 3);
        let c = rand_vec(cin * 27 * dims.voxels(), 4);
        let mut col = Vec::new();
        im2col3(&x, cin, dims, &mut col);
        let mut back = vec![0.0; x.len()];
        col2im3(&c, cin, dims, &mut back);
        assert!((dot(&col, &c) - dot(&x, &back)).abs() < 1e-10);
    }

    #[test]
    fn gather_scatter_are_inverse_permutations() {
        let fine = Dims::new(4, 2, 6);
        let x = rand_vec(3 * fine.voxels(), 5);
        let mut blocks = Vec::new();
        gather2(&x, 3, fine, &mut blocks);
        let mut back = vec![0.0; x.len()];
        scatter2(&blocks, 3, fine, &mut back);
        assert_eq!(back, x);
    }

    #[test]
    fn up_is_adjoint_of_down_with_transposed_weights() {
        // down weight [cout, cin*8] equals up weight [cin', cout'*8] with roles swapped
        let fine = Dims::cube(4);
        let coarse = fine.halved();
        let (c_fine, c_coarse) = (2, 3);
        let w = rand_vec(c_coarse * c_fine * 8, 6);
        let x = rand_vec(c_fine * fine.voxels(), 7);
        let y = rand_vec(c_coarse * coarse.voxels(), 8);
        let mut s = Vec::new();
        let dx = down_forward(&x, c_fine, c_coarse, fine, &w, &mut s);
        let uy = up_forward(&y, c_coarse, c_fine, coarse, &w, &mut s);
        assert!((dot(&dx, &y) - dot(&x, &uy)).abs() < 1e-10);
    }

    #[test]
    fn norm_output_is_standardized() {
        let n = 50;
        let x = rand_vec(2 * n, 9);
        let (out, _, _) = norm_forward(&x, 2, n, &[1.0, 1.0], &[0.0, 0.0]);
        for c in 0..2 {
            let p = &out[c * n..(c + 1) * n];
            let mean: f64 = p.iter().sum::<f64>() / n as f64;
            let var: f64 = p.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn elu_is_continuous_with_matching_derivative() {
        assert_eq!(elu(2.0f64), 2.0);
        assert!((elu(-1.0f64) - ((-1.0f64).exp() - 1.0)).abs() < 1e-15);
        assert_eq!(elu_grad_from_output(elu(0.5f64)), 1.0);
        let h = 1e-6;
        let fd = (elu(-0.3f64 + h) - elu(-0.3f64 - h)) / (2.0 * h);
        assert!((fd - elu_grad_from_output(elu(-0.3f64))).abs() < 1e-8);
    }
}
