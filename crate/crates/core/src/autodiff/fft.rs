//! Row-wise real transforms in the packed half-spectrum layout used by the tape.
//!
//! A length-`N` real row maps to `2H` numbers, `H = N/2 + 1`:
//! `[Re c_0 .. Re c_{N/2}, Im c_0 .. Im c_{N/2}]` with `c_k = (1/N) sum_j x_j e^{-2 pi i jk/N}`.
//! `Im c_0` and `Im c_{N/2}` are always stored as 0; negative modes are implied
//! by Hermitian symmetry.
//!
//! The four maps come in adjoint pairs: `rfft`/`rfft_adj` and `irfft`/`irfft_adj`.

use num_complex::Complex64;

use super::mat::Mat;
use crate::spectral::fft_plan;

pub fn half_len(n: usize) -> usize {
    n / 2 + 1
}

/// `(1/N) sum_j x_j e^{-i theta}` for `k = 0..=N/2`, written into `out` (length `2H`).
fn analysis(x: &[f64], out: &mut [f64], buf: &mut [Complex64], scale: f64, interior: f64) {
    let n = x.len();
    let h = half_len(n);
    for (b, &v) in buf.iter_mut().zip(x) {
        *b = Complex64::new(v, 0.0);
    }
    fft_plan(n, false).process(buf);
    let s = scale / n as f64;
    for k in 0..h {
        let w = if k == 0 || k == n / 2 { s } else { s * interior };
        out[k] = buf[k].re * w;
        out[h + k] = buf[k].im * w;
    }
    out[h] = 0.0;
    out[2 * h - 1] = 0.0;
}

/// `Re sum_k Z_k e^{i theta}` over the full Hermitian extension of `z`
/// (imaginary parts at `k = 0` and `N/2` ignored), interior modes weighted by `interior`.
fn synthesis(z: &[f64], out: &mut [f64], buf: &mut [Complex64], scale: f64, interior: f64) {
    let n = out.len();
    let h = half_len(n);
    buf[0] = Complex64::new(z[0] * scale, 0.0);
    buf[n / 2] = Complex64::new(z[h - 1] * scale, 0.0);
    let w = scale * interior;
    for k in 1..n / 2 {
        let c = Complex64::new(z[k] * w, z[h + k] * w);
        buf[k] = c;
        buf[n - k] = c.conj();
    }
    fft_plan(n, true).process(buf);
    for (o, b) in out.iter_mut().zip(buf.iter()) {
        *o = b.re;
    }
}

fn map_rows_to_half(x: &Mat, scale: f64, interior: f64) -> Mat {
    let n = x.cols;
    let h = half_len(n);
    let mut out = Mat::zeros(x.rows, 2 * h);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for r in 0..x.rows {
        analysis(
            x.row_slice(r),
            &mut out.data[r * 2 * h..(r + 1) * 2 * h],
            &mut buf,
            scale,
            interior,
        );
    }
    out
}

fn map_half_to_rows(z: &Mat, n: usize, scale: f64, interior: f64) -> Mat {
    let h = half_len(n);
    assert_eq!(z.cols, 2 * h, "half-spectrum width {} does not match N = {n}", z.cols);
    let mut out = Mat::zeros(z.rows, n);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for r in 0..z.rows {
        synthesis(
            z.row_slice(r),
            &mut out.data[r * n..(r + 1) * n],
            &mut buf,
            scale,
            interior,
        );
    }
    out
}

/// Width `2H` to grid size `N`.
pub fn grid_len(half_width: usize) -> usize {
    assert!(half_width >= 4 && half_width % 2 == 0, "bad half-spectrum width {half_width}");
    half_width - 2
}

pub fn rfft_rows(x: &Mat) -> Mat {
    map_rows_to_half(x, 1.0, 1.0)
}

pub fn irfft_adj_rows(g: &Mat) -> Mat {
    map_rows_to_half(g, g.cols as f64, 2.0)
}

pub fn irfft_rows(z: &Mat) -> Mat {
    map_half_to_rows(z, grid_len(z.cols), 1.0, 1.0)
}

pub fn rfft_adj_rows(g: &Mat) -> Mat {
    let n = grid_len(g.cols);
    map_half_to_rows(g, n, 1.0 / n as f64, 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use std::f64::consts::PI;

    fn random(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = SplitMix64::new(seed);
        Mat::new(rows, cols, (0..rows * cols).map(|_| rng.uniform_in(-1.0, 1.0)).collect())
    }

    fn dot(a: &Mat, b: &Mat) -> f64 {
        a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
    }

    fn zero_edge_imag(z: &mut Mat) {
        let h = z.cols / 2;
        for r in 0..z.rows {
            z.set(r, h, 0.0);
            z.set(r, 2 * h - 1, 0.0);
        }
    }

    #[test]
    fn rfft_matches_direct_sum() {
        let x = random(2, 12, 1);
        let z = rfft_rows(&x);
        let h = 7;
        for r in 0..2 {
            for k in 0..h {
                let (mut re, mut im) = (0.0, 0.0);
                for j in 0..12 {
                    let th = 2.0 * PI * (j * k) as f64 / 12.0;
                    re += x.at(r, j) * th.cos() / 12.0;
                    im -= x.at(r, j) * th.sin() / 12.0;
                }
                assert!((z.at(r, k) - re).abs() < 1e-14);
                assert!((z.at(r, h + k) - im).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn irfft_inverts_rfft() {
        let x = random(3, 16, 2);
        let y = irfft_rows(&rfft_rows(&x));
        for (a, b) in x.data.iter().zip(&y.data) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn adjoint_pairs() {
        let x = random(3, 16, 3);
        let mut z = random(3, 18, 4);
        // <R x, z> = <x, R^T z>
        assert!((dot(&rfft_rows(&x), &z) - dot(&x, &rfft_adj_rows(&z))).abs() < 1e-13);
        // <I z, x> = <z, I^T x> on spectra whose edge imaginary parts are zero.
        zero_edge_imag(&mut z);
        assert!((dot(&irfft_rows(&z), &x) - dot(&z, &irfft_adj_rows(&x))).abs() < 1e-12);
    }
}
