//! Interpolating cubic B-spline sampler.
//!
//! The energy needs intensities, gradients and Hessians at arbitrary warped
//! positions, and the Gauss-Newton Jacobian must be the exact derivative of
//! what the residuals sample. Bilinear interpolation has kinks on every pixel
//! line, so residual evaluation goes through this C2 interpolant instead. It
//! reproduces the stored value at every pixel, and coefficients are extended
//! by clamping, which keeps the function C2 and bounded outside the raster.

use super::Image;

#[derive(Clone, Debug)]
pub struct SplineImage {
    width: usize,
    height: usize,
    coeffs: Vec<f64>,
}

/// Value, gradient and Hessian of the interpolant at one position.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SplineSample {
    pub value: f64,
    pub grad: [f64; 2],
    /// `[xx, xy, yy]`
    pub hess: [f64; 3],
}

impl SplineImage {
    pub fn new(img: &Image) -> Self {
        let (w, h) = (img.width(), img.height());
        let mut coeffs = img.data().to_vec();
        let mut line = Vec::new();
        let mut scratch = Vec::new();
        for y in 0..h {
            line.clear();
            line.extend_from_slice(&coeffs[y * w..(y + 1) * w]);
            prefilter(&mut line, &mut scratch);
            coeffs[y * w..(y + 1) * w].copy_from_slice(&line);
        }
        for x in 0..w {
            line.clear();
            line.extend((0..h).map(|y| coeffs[y * w + x]));
            prefilter(&mut line, &mut scratch);
            for (y, v) in line.iter().enumerate() {
                coeffs[y * w + x] = *v;
            }
        }
        SplineImage {
            width: w,
            height: h,
            coeffs,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    fn coeff(&self, x: isize, y: isize) -> f64 {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.coeffs[yc * self.width + xc]
    }

    pub fn value(&self, x: f64, y: f64) -> f64 {
        let (ix, bx) = basis(x);
        let (iy, by) = basis(y);
        let mut acc = 0.0;
        for (j, wy) in by.iter().enumerate() {
            let mut row = 0.0;
            for (i, wx) in bx.iter().enumerate() {
                row += wx * self.coeff(ix + i as isize - 1, iy + j as isize - 1);
            }
            acc += wy * row;
        }
        acc
    }

    pub fn sample(&self, x: f64, y: f64) -> SplineSample {
        let (ix, bx, dx, ddx) = basis_d2(x);
        let (iy, by, dy, ddy) = basis_d2(y);
        let mut out = SplineSample::default();
        for j in 0..4 {
            let (mut r0, mut r1, mut r2) = (0.0, 0.0, 0.0);
            for i in 0..4 {
                let c = self.coeff(ix + i as isize - 1, iy + j as isize - 1);
                r0 += bx[i] * c;
                r1 += dx[i] * c;
                r2 += ddx[i] * c;
            }
            out.value += by[j] * r0;
            out.grad[0] += by[j] * r1;
            out.grad[1] += dy[j] * r0;
            out.hess[0] += by[j] * r2;
            out.hess[1] += dy[j] * r1;
            out.hess[2] += ddy[j] * r0;
        }
        out
    }
}

/// Solves `(c[i-1] + 4 c[i] + c[i+1]) / 6 = v[i]` with `c[-1] = c[0]` and
/// `c[n] = c[n-1]` in place (Thomas algorithm).
fn prefilter(line: &mut [f64], scratch: &mut Vec<f64>) {
    let n = line.len();
    if n == 1 {
        return;
    }
    scratch.clear();
    scratch.resize(n, 0.0);
    let diag = |i: usize| if i == 0 || i == n - 1 { 5.0 } else { 4.0 };
    // forward sweep: scratch holds the modified super-diagonal
    let mut denom = diag(0);
    scratch[0] = 1.0 / denom;
    line[0] = 6.0 * line[0] / denom;
    for i in 1..n {
        denom = diag(i) - scratch[i - 1];
        scratch[i] = 1.0 / denom;
        line[i] = (6.0 * line[i] - line[i - 1]) / denom;
    }
    for i in (0..n - 1).rev() {
        line[i] -= scratch[i] * line[i + 1];
    }
}

#[inline]
fn basis(p: f64) -> (isize, [f64; 4]) {
    let f = p.floor();
    let t = p - f;
    let t2 = t * t;
    let t3 = t2 * t;
    let u = 1.0 - t;
    (
        f as isize,
        [
            u * u * u / 6.0,
            (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0,
            (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0,
            t3 / 6.0,
        ],
    )
}

#[inline]
fn basis_d2(p: f64) -> (isize, [f64; 4], [f64; 4], [f64; 4]) {
    let (i, b) = basis(p);
    let t = p - p.floor();
    let t2 = t * t;
    let u = 1.0 - t;
    let d = [
        -0.5 * u * u,
        0.5 * (3.0 * t2 - 4.0 * t),
        0.5 * (-3.0 * t2 + 2.0 * t + 1.0),
        0.5 * t2,
    ];
    let dd = [u, 3.0 * t - 2.0, 1.0 - 3.0 * t, t];
    (i, b, d, dd)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(w, h, |_, _| rng.gen::<f64>())
    }

    #[test]
    fn interpolates_pixels() {
        let img = random_image(9, 6, 1);
        let s = SplineImage::new(&img);
        for y in 0..6 {
            for x in 0..9 {
                assert!((s.value(x as f64, y as f64) - img.get(x, y)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_and_symmetric_midpoint() {
        let s = SplineImage::new(&Image::filled(4, 3, 0.6));
        let p = s.sample(-3.2, 7.9);
        assert!((p.value - 0.6).abs() < 1e-12);
        assert!(p.grad.iter().chain(&p.hess).all(|v| v.abs() < 1e-12));

        let two = SplineImage::new(&Image::new(2, 1, vec![0.0, 1.0]).unwrap());
        assert!((two.value(0.5, 0.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn linear_ramp_is_reproduced_inside() {
        let img = Image::from_fn(12, 4, |x, _| 0.05 * x as f64);
        let s = SplineImage::new(&img);
        // the clamped extension bends the ramp only near the ends
        for &x in &[4.0, 5.3, 6.75] {
            let p = s.sample(x, 1.5);
            assert!((p.value - 0.05 * x).abs() < 2e-3, "{}", p.value);
            assert!((p.grad[0] - 0.05).abs() < 5e-3);
        }
    }

    #[test]
    fn derivatives_match_finite_differences_everywhere() {
        let s = SplineImage::new(&random_image(7, 8, 9));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = 1e-5;
        for _ in 0..500 {
            // includes positions outside the raster and on pixel lines
            let mut x = rng.gen_range(-3.0..10.0);
            let y = rng.gen_range(-3.0..11.0);
            if rng.gen_bool(0.2) {
                x = (x as f64).round();
            }
            let p = s.sample(x, y);
            let px = s.sample(x + h, y);
            let mx = s.sample(x - h, y);
            let py = s.sample(x, y + h);
            let my = s.sample(x, y - h);
            let tol = 1e-6;
            assert!(((px.value - mx.value) / (2.0 * h) - p.grad[0]).abs() < tol);
            assert!(((py.value - my.value) / (2.0 * h) - p.grad[1]).abs() < tol);
            // second derivatives are only piecewise linear, so a central
            // difference across a pixel line is off by O(h)
            let tol = 1e-4;
            assert!(((px.grad[0] - mx.grad[0]) / (2.0 * h) - p.hess[0]).abs() < tol);
            assert!(((py.grad[0] - my.grad[0]) / (2.0 * h) - p.hess[1]).abs() < tol);
            assert!(((px.grad[1] - mx.grad[1]) / (2.0 * h) - p.hess[1]).abs() < tol);
            assert!(((py.grad[1] - my.grad[1]) / (2.0 * h) - p.hess[2]).abs() < tol);
            assert!((s.value(x, y) - p.value).abs() < 1e-14);
        }
    }
}
