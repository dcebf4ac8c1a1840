//! Monochrome intensity images, sampling, filtering and pyramids.
//!
//! Intensities are stored as `f64`. Loaded images are normalized to `[0, 1]`
//! by the format's maximum value; images built in memory may hold any finite
//! value. Every operation that reads outside the raster clamps to the border
//! pixel.

mod io;
mod spline;

pub use io::{load_image, save_png16, save_png8};
pub use spline::{SplineImage, SplineSample};

use crate::error::{Error, Result};

/// Regularizer added to the smallest structure-tensor eigenvalue.
pub const STRUCTURE_DELTA: f64 = 1e-4;
/// Upper clamp of the feature weight; featureless patches get this value.
pub const STRUCTURE_WEIGHT_MAX: f64 = 100.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidParameter(format!(
                "image must be non-empty, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} samples for a {width}x{height} image",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "non-finite intensity at index {i}"
            )));
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        assert!(width > 0 && height > 0, "image must be non-empty");
        Image {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(width > 0 && height > 0, "image must be non-empty");
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Image {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    /// Pixel lookup with edge clamping for signed coordinates.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> f64 {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.data[yc * self.width + xc]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Bilinear interpolation with edge clamping.
pub fn sample_bilinear(img: &Image, x: f64, y: f64) -> f64 {
    debug_assert!(x.is_finite() && y.is_finite());
    let xc = x.clamp(0.0, (img.width - 1) as f64);
    let yc = y.clamp(0.0, (img.height - 1) as f64);
    let x0 = (xc.floor() as usize).min(img.width.saturating_sub(2));
    let y0 = (yc.floor() as usize).min(img.height.saturating_sub(2));
    let x1 = (x0 + 1).min(img.width - 1);
    let y1 = (y0 + 1).min(img.height - 1);
    let tx = xc - x0 as f64;
    let ty = yc - y0 as f64;
    let top = img.get(x0, y0) * (1.0 - tx) + img.get(x1, y0) * tx;
    let bottom = img.get(x0, y1) * (1.0 - tx) + img.get(x1, y1) * tx;
    top * (1.0 - ty) + bottom * ty
}

/// Gradient of the bilinear interpolant in intensity per pixel.
///
/// Inside a cell this is the exact derivative of [`sample_bilinear`]. On a
/// pixel line, where the interpolant has a kink, the central difference is
/// used instead (one-sided on the border). Outside the raster the clamped
/// interpolant is flat.
pub fn image_gradient(img: &Image, x: f64, y: f64) -> [f64; 2] {
    [
        axis_derivative(img, x, y, true),
        axis_derivative(img, x, y, false),
    ]
}

fn axis_derivative(img: &Image, x: f64, y: f64, along_x: bool) -> f64 {
    let (p, n) = if along_x {
        (x, img.width)
    } else {
        (y, img.height)
    };
    if n < 2 || p < 0.0 || p > (n - 1) as f64 {
        return 0.0;
    }
    let at = |q: f64| {
        if along_x {
            sample_bilinear(img, q, y)
        } else {
            sample_bilinear(img, x, q)
        }
    };
    let fl = p.floor();
    if p == fl {
        let i = fl as usize;
        if i == 0 {
            at(1.0) - at(0.0)
        } else if i == n - 1 {
            at(i as f64) - at(i as f64 - 1.0)
        } else {
            0.5 * (at(i as f64 + 1.0) - at(i as f64 - 1.0))
        }
    } else {
        at(fl + 1.0) - at(fl)
    }
}

/// Halves the resolution by averaging 2x2 blocks. Odd trailing rows and
/// columns average whatever part of the block exists.
pub fn downsample_mipmap(img: &Image) -> Result<Image> {
    if img.is_empty() {
        return Err(Error::InvalidParameter("cannot downsample an empty image".into()));
    }
    let w = img.width.div_ceil(2);
    let h = img.height.div_ceil(2);
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let mut sum = 0.0;
            let mut count = 0usize;
            for sy in 2 * y..(2 * y + 2).min(img.height) {
                for sx in 2 * x..(2 * x + 2).min(img.width) {
                    sum += img.get(sx, sy);
                    count += 1;
                }
            }
            data.push(sum / count as f64);
        }
    }
    Ok(Image {
        width: w,
        height: h,
        data,
    })
}

/// Normalized 1-D Gaussian kernel with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "gaussian sigma must be positive, got {sigma}"
        )));
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    Ok(k)
}

/// Separable Gaussian blur with edge clamping.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Result<Image> {
    let kernel = gaussian_kernel(sigma)?;
    let r = (kernel.len() / 2) as isize;
    let (w, h) = (img.width, img.height);
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                acc += k * img.get_clamped(x as isize + i as isize - r, y as isize);
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                let yy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                acc += k * tmp[yy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    Ok(Image {
        width: w,
        height: h,
        data: out,
    })
}

/// Per-pixel central-difference gradient, one-sided on the border.
pub fn pixel_gradient(img: &Image, x: usize, y: usize) -> [f64; 2] {
    image_gradient(img, x as f64, y as f64)
}

/// Feature weight of the 3x3 neighbourhood around `(cx, cy)`.
///
/// Builds the structure tensor of the pixel gradients in the window and maps
/// its smaller eigenvalue to `1 / (lambda_min + delta)`, clamped to
/// `[1, STRUCTURE_WEIGHT_MAX]`. Flat or edge-only patches get the maximum.
pub fn structure_weight(img: &Image, cx: usize, cy: usize) -> f64 {
    let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
    for dy in -1isize..=1 {
        for dx in -1isize..=1 {
            let x = (cx as isize + dx).clamp(0, img.width as isize - 1) as usize;
            let y = (cy as isize + dy).clamp(0, img.height as isize - 1) as usize;
            let [gx, gy] = pixel_gradient(img, x, y);
            a += gx * gx;
            b += gx * gy;
            c += gy * gy;
        }
    }
    let half_trace = 0.5 * (a + c);
    let disc = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let lambda_min = (half_trace - disc).max(0.0);
    (1.0 / (lambda_min + STRUCTURE_DELTA)).clamp(1.0, STRUCTURE_WEIGHT_MAX)
}

/// Mip-map hierarchy, level 0 is the input resolution.
#[derive(Clone, Debug)]
pub struct Pyramid {
    levels: Vec<Image>,
}

impl Pyramid {
    pub fn build(base: Image, levels: usize) -> Result<Self> {
        if levels == 0 {
            return Err(Error::InvalidParameter("pyramid needs at least one level".into()));
        }
        let mut out = Vec::with_capacity(levels);
        out.push(base);
        for _ in 1..levels {
            let next = downsample_mipmap(out.last().unwrap())?;
            out.push(next);
        }
        Ok(Pyramid { levels: out })
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn level(&self, i: usize) -> &Image {
        &self.levels[i]
    }

    pub fn levels(&self) -> &[Image] {
        &self.levels
    }
}

/// Dimensions of pyramid level `level` for a base of `(w, h)`.
pub fn level_dims(w: usize, h: usize, level: usize) -> (usize, usize) {
    let (mut w, mut h) = (w, h);
    for _ in 0..level {
        w = w.div_ceil(2);
        h = h.div_ceil(2);
    }
    (w, h)
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
    fn rejects_bad_buffers() {
        assert!(Image::new(2, 2, vec![0.0; 3]).is_err());
        assert!(Image::new(0, 2, vec![]).is_err());
        assert!(Image::new(1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn bilinear_examples() {
        let c = Image::filled(5, 4, 0.3);
        assert_eq!(sample_bilinear(&c, 1.7, -3.0), 0.3);
        let r = random_image(6, 5, 1);
        for y in 0..5 {
            for x in 0..6 {
                assert_eq!(sample_bilinear(&r, x as f64, y as f64), r.get(x, y));
            }
        }
        let ramp = Image::new(2, 1, vec![0.0, 1.0]).unwrap();
        assert!((sample_bilinear(&ramp, 0.5, 0.0) - 0.5).abs() < 1e-15);
        // outside: edge clamp
        assert_eq!(sample_bilinear(&ramp, 7.0, 3.0), 1.0);
        assert_eq!(sample_bilinear(&ramp, -7.0, -3.0), 0.0);
    }

    #[test]
    fn gradient_examples() {
        let c = Image::filled(6, 6, 0.7);
        assert_eq!(image_gradient(&c, 2.3, 3.1), [0.0, 0.0]);
        let w = 8usize;
        let ramp = Image::from_fn(w, 5, |x, _| x as f64 / w as f64);
        for &(x, y) in &[(1.0, 1.0), (3.5, 2.25), (6.0, 3.0), (0.0, 0.0)] {
            let g = image_gradient(&ramp, x, y);
            assert!((g[0] - 1.0 / w as f64).abs() < 1e-12, "{g:?}");
            assert!(g[1].abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences_of_sampler() {
        let img = random_image(8, 8, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = 1e-3;
        for _ in 0..200 {
            let x = rng.gen_range(1.0..6.0);
            let y = rng.gen_range(1.0..6.0);
            // keep the stencil inside one cell
            if (x - (x as f64).round()).abs() < 2.0 * h || (y - (y as f64).round()).abs() < 2.0 * h {
                continue;
            }
            let fdx = (sample_bilinear(&img, x + h, y) - sample_bilinear(&img, x - h, y)) / (2.0 * h);
            let fdy = (sample_bilinear(&img, x, y + h) - sample_bilinear(&img, x, y - h)) / (2.0 * h);
            let g = image_gradient(&img, x, y);
            assert!((g[0] - fdx).abs() < 1e-4);
            assert!((g[1] - fdy).abs() < 1e-4);
        }
    }

    #[test]
    fn downsample_examples() {
        let img = Image::new(2, 2, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let d = downsample_mipmap(&img).unwrap();
        assert_eq!((d.width(), d.height()), (1, 1));
        assert_eq!(d.get(0, 0), 0.5);

        let c = downsample_mipmap(&Image::filled(6, 4, 0.25)).unwrap();
        assert_eq!((c.width(), c.height()), (3, 2));
        assert!(c.data().iter().all(|&v| v == 0.25));

        let checker = Image::from_fn(4, 4, |x, y| ((x + y) % 2) as f64);
        let d = downsample_mipmap(&checker).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.5));

        let odd = downsample_mipmap(&random_image(5, 3, 2)).unwrap();
        assert_eq!((odd.width(), odd.height()), (3, 2));
    }

    #[test]
    fn downsample_keeps_mean_for_even_sizes() {
        let img = random_image(16, 10, 11);
        let d = downsample_mipmap(&img).unwrap();
        assert!((img.mean() - d.mean()).abs() < 1e-6);
    }

    #[test]
    fn blur_constant_and_impulse() {
        assert!(gaussian_blur(&Image::filled(4, 4, 1.0), 0.0).is_err());
        let c = gaussian_blur(&Image::filled(9, 7, 0.4), 1.5).unwrap();
        assert!(c.data().iter().all(|v| (v - 0.4).abs() < 1e-12));

        let k = gaussian_kernel(3.2).unwrap();
        assert_eq!(k.len(), 2 * 10 + 1);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-9);

        let n = 41;
        let mut imp = Image::filled(n, n, 0.0);
        imp.set(20, 20, 1.0);
        let b = gaussian_blur(&imp, 2.0).unwrap();
        assert!((b.data().iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let k = gaussian_kernel(2.0).unwrap();
        let r = k.len() / 2;
        assert!((b.get(20, 20) - k[r] * k[r]).abs() < 1e-12);
        assert!((b.get(22, 19) - k[r + 2] * k[r - 1]).abs() < 1e-12);
    }

    #[test]
    fn blur_semigroup_on_interior() {
        let img = random_image(64, 64, 5);
        let s = 2.0;
        let twice = gaussian_blur(&gaussian_blur(&img, s).unwrap(), s).unwrap();
        let once = gaussian_blur(&img, s * 2f64.sqrt()).unwrap();
        for y in 16..48 {
            for x in 16..48 {
                assert!((twice.get(x, y) - once.get(x, y)).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn structure_weight_examples() {
        let flat = Image::filled(5, 5, 0.5);
        assert_eq!(structure_weight(&flat, 2, 2), STRUCTURE_WEIGHT_MAX);

        // a horizontal ramp is an edge: one eigenvalue is zero
        let ramp = Image::from_fn(5, 5, |x, _| 0.1 * x as f64);
        assert_eq!(structure_weight(&ramp, 2, 2), STRUCTURE_WEIGHT_MAX);

        // strong two-directional texture
        let corner = Image::from_fn(7, 7, |x, y| 10.0 * (((x / 2) + (y / 2)) % 2) as f64);
        assert_eq!(structure_weight(&corner, 3, 3), 1.0);
    }

    #[test]
    fn structure_weight_ignores_constant_offset() {
        let img = random_image(9, 9, 4).map(|v| 0.05 * v);
        let shifted = img.map(|v| v + 0.3);
        for y in 0..9 {
            for x in 0..9 {
                let a = structure_weight(&img, x, y);
                let b = structure_weight(&shifted, x, y);
                assert!((a - b).abs() <= 1e-9 * a, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn pyramid_dims() {
        let p = Pyramid::build(Image::filled(17, 13, 0.0), 4).unwrap();
        let dims: Vec<_> = p.levels().iter().map(|l| (l.width(), l.height())).collect();
        assert_eq!(dims, vec![(17, 13), (9, 7), (5, 4), (3, 2)]);
        assert_eq!(level_dims(17, 13, 3), (3, 2));
    }
}
