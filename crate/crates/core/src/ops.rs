//! Small dense kernels shared by the attention and decoder layers. Matrices
//! are row-major `[rows][cols]` and act on row vectors from the left (`v·M`).

use rand::Rng;

/// `out = v · m` for `m` of shape `v.len() × cols`.
#[inline]
pub fn vec_mat(v: &[f64], m: &[f64], cols: usize, out: &mut [f64]) {
    debug_assert_eq!(m.len(), v.len() * cols);
    out.iter_mut().for_each(|o| *o = 0.0);
    for (i, &a) in v.iter().enumerate() {
        let row = &m[i * cols..(i + 1) * cols];
        for (o, &w) in out.iter_mut().zip(row) {
            *o += a * w;
        }
    }
}

/// `out += m · g` (i.e. `g · mᵀ`), the backward of [`vec_mat`] w.r.t. `v`.
#[inline]
pub fn mat_vec_acc(m: &[f64], g: &[f64], out: &mut [f64]) {
    let cols = g.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &m[i * cols..(i + 1) * cols];
        let mut s = 0.0;
        for (&w, &gv) in row.iter().zip(g) {
            s += w * gv;
        }
        *o += s;
    }
}

/// `m += vᵀ · g`, the backward of [`vec_mat`] w.r.t. the matrix.
#[inline]
pub fn outer_acc(v: &[f64], g: &[f64], m: &mut [f64]) {
    let cols = g.len();
    for (i, &a) in v.iter().enumerate() {
        let row = &mut m[i * cols..(i + 1) * cols];
        for (r, &gv) in row.iter_mut().zip(g) {
            *r += a * gv;
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn uniform<R: Rng + ?Sized>(n: usize, bound: f64, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()
}
