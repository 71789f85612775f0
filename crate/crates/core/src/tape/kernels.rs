//! Shared numeric kernels. The tape ops and the tape-free query paths both
//! call these, so recorded and plain evaluations produce identical bits.

use rayon::prelude::*;

/// Work threshold below which kernels stay single-threaded.
const PAR_FLOPS: usize = 1 << 20;

/// out[m,n] = a[m,k] * b[k,n] (out must be zeroed by the caller).
pub fn matmul_acc(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let body = |i: usize, out_row: &mut [f64]| {
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_FLOPS && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in out.chunks_mut(n).enumerate() {
            body(i, row);
        }
    }
}

/// out[m,k] += a[m,n] * b[k,n]^T  (i.e. a * transpose(b)).
pub fn matmul_nt_acc(a: &[f64], m: usize, n: usize, b: &[f64], k: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    let body = |i: usize, out_row: &mut [f64]| {
        let a_row = &a[i * n..(i + 1) * n];
        for (kk, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            let mut s = 0.0;
            for (av, bv) in a_row.iter().zip(b_row) {
                s += av * bv;
            }
            *o += s;
        }
    };
    if m * k * n >= PAR_FLOPS && m > 1 {
        out.par_chunks_mut(k).enumerate().for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in out.chunks_mut(k).enumerate() {
            body(i, row);
        }
    }
}

/// out[k,n] += a[m,k]^T * b[m,n]  (i.e. transpose(a) * b).
pub fn matmul_tn_acc(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    let body = |kk: usize, out_row: &mut [f64]| {
        for i in 0..m {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_FLOPS && k > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(kk, row)| body(kk, row));
    } else {
        for (kk, row) in out.chunks_mut(n).enumerate() {
            body(kk, row);
        }
    }
}

/// Trilinear weight of corner `bits` (bit order x=4, y=2, z=1) at local
/// position `u` in [0,1]^3.
pub fn trilinear_weight(bits: usize, u: [f64; 3]) -> f64 {
    let fx = if bits & 4 != 0 { u[0] } else { 1.0 - u[0] };
    let fy = if bits & 2 != 0 { u[1] } else { 1.0 - u[1] };
    let fz = if bits & 1 != 0 { u[2] } else { 1.0 - u[2] };
    fx * fy * fz
}

/// Gradient of [`trilinear_weight`] with respect to `u`.
pub fn trilinear_weight_grad(bits: usize, u: [f64; 3]) -> [f64; 3] {
    let f = [
        if bits & 4 != 0 { u[0] } else { 1.0 - u[0] },
        if bits & 2 != 0 { u[1] } else { 1.0 - u[1] },
        if bits & 1 != 0 { u[2] } else { 1.0 - u[2] },
    ];
    let s = [
        if bits & 4 != 0 { 1.0 } else { -1.0 },
        if bits & 2 != 0 { 1.0 } else { -1.0 },
        if bits & 1 != 0 { 1.0 } else { -1.0 },
    ];
    [s[0] * f[1] * f[2], s[1] * f[0] * f[2], s[2] * f[0] * f[1]]
}

/// out[c] = sum_i trilinear_weight(i, u) * corners[i*cols + c].
pub fn trilerp_acc(corners: &[f64], cols: usize, u: [f64; 3], out: &mut [f64]) {
    debug_assert_eq!(corners.len(), 8 * cols);
    debug_assert_eq!(out.len(), cols);
    for bits in 0..8 {
        let w = trilinear_weight(bits, u);
        let row = &corners[bits * cols..(bits + 1) * cols];
        for (o, &v) in out.iter_mut().zip(row) {
            *o += w * v;
        }
    }
}

/// Periodic positional window 0.5 - 0.5*cos(2*pi*x); continuous (and smooth)
/// across integer boundaries of x.
pub fn cos_window(x: f64) -> f64 {
    0.5 - 0.5 * (std::f64::consts::TAU * x).cos()
}

pub fn cos_window_grad(x: f64) -> f64 {
    std::f64::consts::PI * (std::f64::consts::TAU * x).sin()
}

pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

pub fn leaky_relu_grad(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        slope
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn clamp11(x: f64) -> f64 {
    x.clamp(-1.0, 1.0)
}

pub fn clamp11_grad(x: f64) -> f64 {
    if x > -1.0 && x < 1.0 {
        1.0
    } else {
        0.0
    }
}
