//! Synthetic rectified scenes with exact ground truth.
//!
//! A scene is a stack of textured planar layers seen by a rectified rig. A
//! layer point with cyclopean coordinates `q` at frame 0 appears in camera
//! `c` at frame `tau` at `q + tau v + sigma_c s(q, tau) e_x`, so in the
//! window of frames `k, k + 1` its halfway flows are `s`, `m = v / 2` and
//! `d = ds/dtau / 2`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::domain::{sign, Flow, PixelFlow, Vec2};
use crate::error::{Error, Result};
use crate::geometry::StereoRig;
use crate::image::{Image, SplineImage};

struct Wave {
    k: Vec2,
    phase: f64,
}

/// Sum of random plane waves over several octaves, squashed into
/// `[0.05, 0.95]`.
pub struct ProceduralTexture {
    waves: Vec<Wave>,
    norm: f64,
}

impl ProceduralTexture {
    /// Octaves halve the wavelength from `max_wavelength` down to
    /// `min_wavelength`; each holds `per_octave` waves.
    pub fn new(seed: u64, min_wavelength: f64, max_wavelength: f64, per_octave: usize) -> Result<Self> {
        if !(min_wavelength >= 2.0 && max_wavelength >= min_wavelength && per_octave > 0) {
            return Err(Error::InvalidParameter(format!(
                "texture wavelengths {min_wavelength}..{max_wavelength} with {per_octave} waves per octave"
            )));
        }
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut waves = Vec::new();
        let mut lambda = max_wavelength;
        while lambda >= min_wavelength * 0.999 {
            for _ in 0..per_octave {
                let l = (lambda * rng.gen_range(0.85..1.15)).max(min_wavelength);
                let angle = rng.gen_range(0.0..std::f64::consts::PI);
                let omega = 2.0 * std::f64::consts::PI / l;
                waves.push(Wave {
                    k: Vec2::new(omega * angle.cos(), omega * angle.sin()),
                    phase: rng.gen_range(0.0..2.0 * std::f64::consts::PI),
                });
            }
            lambda *= 0.5;
        }
        let norm = (waves.len() as f64 / 2.0).sqrt();
        Ok(ProceduralTexture { waves, norm })
    }

    pub fn value(&self, x: f64, y: f64) -> f64 {
        let sum: f64 = self.waves.iter().map(|w| (w.k.x * x + w.k.y * y + w.phase).cos()).sum();
        0.5 + 0.45 * (1.5 * sum / self.norm).tanh()
    }
}

pub enum Texture {
    Procedural(ProceduralTexture),
    /// Image texture, sampled with clamped cubic B-splines.
    Image(SplineImage),
}

impl Texture {
    /// Default procedural texture: wavelengths 4.5 to 72 px.
    pub fn procedural(seed: u64) -> Self {
        Texture::Procedural(ProceduralTexture::new(seed, 4.5, 72.0, 3).expect("valid defaults"))
    }

    pub fn value(&self, p: Vec2) -> f64 {
        match self {
            Texture::Procedural(t) => t.value(p.x, p.y),
            Texture::Image(img) => img.value(p.x, p.y),
        }
    }
}

/// A planar layer. Half-shifts are horizontal (rectified rig).
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// Half-shift `s_x` at `center` and frame 0.
    pub disparity: f64,
    /// Gradient of `s_x` with respect to `q`.
    pub slope: Vec2,
    pub center: Vec2,
    /// Change of `s_x` per frame.
    pub disparity_rate: f64,
    /// Image motion per frame.
    pub velocity: Vec2,
    /// `[x0, y0, x1, y1]` in frame-0 cyclopean coordinates; `None` = infinite.
    pub region: Option<[f64; 4]>,
    pub texture_offset: Vec2,
}

impl Layer {
    pub fn plane(disparity: f64) -> Self {
        Layer {
            disparity,
            slope: Vec2::zeros(),
            center: Vec2::zeros(),
            disparity_rate: 0.0,
            velocity: Vec2::zeros(),
            region: None,
            texture_offset: Vec2::zeros(),
        }
    }

    fn half_shift(&self, q: Vec2, tau: f64) -> f64 {
        self.disparity + self.slope.dot(&(q - self.center)) + tau * self.disparity_rate
    }

    fn covers(&self, q: Vec2) -> bool {
        match self.region {
            None => true,
            Some([x0, y0, x1, y1]) => q.x >= x0 && q.x < x1 && q.y >= y0 && q.y < y1,
        }
    }

    /// Frame-0 point seen at `p` by camera `c` (or by the cyclopean eye
    /// for `c = None`) at time `tau`. The half-shift is affine in `q`, so
    /// this is exact.
    fn source(&self, p: Vec2, tau: f64, c: Option<usize>) -> Vec2 {
        let pp = p - tau * self.velocity;
        let sc = c.map_or(0.0, sign);
        let qy = pp.y;
        let rest = self.disparity - self.slope.x * self.center.x + self.slope.y * (qy - self.center.y) + tau * self.disparity_rate;
        let qx = (pp.x - sc * rest) / (1.0 + sc * self.slope.x);
        Vec2::new(qx, qy)
    }
}

/// Layered scene description. Photometric settings are per view
/// `c + 2t` of a window.
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub texture: Texture,
    pub layers: Vec<Layer>,
    pub noise: f64,
    pub gain: [f64; 4],
    pub offset: [f64; 4],
    pub seed: u64,
}

/// Rendered window of two frames with ground truth on halfway pixels.
pub struct SyntheticScene {
    pub width: usize,
    pub height: usize,
    pub images: [Image; 4],
    /// Ground-truth `s`, `m`, `d` per halfway pixel.
    pub flows: [Vec<Vec2>; 3],
    /// Ground-truth visibility of each halfway pixel in each view.
    pub visible: Vec<[bool; 4]>,
    /// Index of the layer seen at each halfway pixel.
    pub layer: Vec<usize>,
    pub rig: StereoRig,
}

impl SyntheticScene {
    pub fn flow(&self, flow: Flow) -> &[Vec2] {
        &self.flows[flow.index()]
    }

    pub fn pixel_flow(&self, i: usize) -> PixelFlow {
        PixelFlow::new(self.flows[0][i], self.flows[1][i], self.flows[2][i])
    }

    /// Per-pixel flag: visible in all four views.
    pub fn visible_everywhere(&self) -> Vec<bool> {
        self.visible.iter().map(|v| v.iter().all(|b| *b)).collect()
    }
}

impl SceneSpec {
    fn with_layers(width: usize, height: usize, seed: u64, layers: Vec<Layer>) -> Self {
        SceneSpec {
            width,
            height,
            texture: Texture::procedural(seed),
            layers,
            noise: 0.0,
            gain: [1.0; 4],
            offset: [0.0; 4],
            seed,
        }
    }

    fn image_center(width: usize, height: usize) -> Vec2 {
        Vec2::new((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0)
    }

    /// Fronto-parallel plane with stereo half-shift `u` (shift `2u`).
    pub fn constant_disparity(width: usize, height: usize, u: f64, seed: u64) -> Self {
        Self::with_layers(width, height, seed, vec![Layer::plane(u)])
    }

    /// Plane whose half-shift is `u` at the image center and changes by
    /// `slope` per pixel.
    pub fn slanted(width: usize, height: usize, u: f64, slope: Vec2, seed: u64) -> Self {
        let mut layer = Layer::plane(u);
        layer.slope = slope;
        layer.center = Self::image_center(width, height);
        Self::with_layers(width, height, seed, vec![layer])
    }

    /// Background plane with half-shift `u_bg` behind a square of side
    /// `side` centered in the image with half-shift `u_fg`.
    pub fn two_layer(width: usize, height: usize, u_bg: f64, u_fg: f64, side: f64, seed: u64) -> Self {
        let c = Self::image_center(width, height);
        let mut fg = Layer::plane(u_fg);
        fg.region = Some([c.x - side / 2.0, c.y - side / 2.0, c.x + side / 2.0, c.y + side / 2.0]);
        fg.texture_offset = Vec2::new(1013.0, 577.0);
        Self::with_layers(width, height, seed, vec![Layer::plane(u_bg), fg])
    }

    /// Plane with half-shift `u` translating by `motion` pixels per frame.
    pub fn moving_plane(width: usize, height: usize, u: f64, motion: Vec2, seed: u64) -> Self {
        let mut layer = Layer::plane(u);
        layer.velocity = motion;
        Self::with_layers(width, height, seed, vec![layer])
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 2 || self.height < 2 {
            return Err(Error::InvalidParameter(format!("scene size {}x{}", self.width, self.height)));
        }
        if self.layers.is_empty() || self.layers.iter().all(|l| l.region.is_some()) {
            return Err(Error::InvalidParameter("scene needs an unbounded background layer".into()));
        }
        for l in &self.layers {
            if !(l.slope.x.abs() < 0.5 && l.slope.y.abs() < 0.5) {
                return Err(Error::InvalidParameter(format!("layer slope {:?} must be below 0.5", l.slope)));
            }
        }
        if !(self.noise >= 0.0) || self.gain.iter().chain(&self.offset).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("noise and photometric settings must be finite".into()));
        }
        Ok(())
    }

    /// Rectified rig matching the scene: focal length = width, baseline 0.1.
    pub fn rig(&self) -> StereoRig {
        let c = Self::image_center(self.width, self.height);
        StereoRig::rectified(self.width as f64, c.x, c.y, 0.1)
    }

    /// Front-most layer at image position `p`, with its frame-0 point.
    /// Larger half-shift is nearer; later layers win ties.
    fn front(&self, p: Vec2, tau: f64, c: Option<usize>) -> (usize, Vec2) {
        let mut best: Option<(usize, Vec2, f64)> = None;
        for (i, layer) in self.layers.iter().enumerate() {
            let q = layer.source(p, tau, c);
            if !layer.covers(q) {
                continue;
            }
            let s = layer.half_shift(q, tau);
            if best.is_none_or(|(_, _, bs)| s >= bs) {
                best = Some((i, q, s));
            }
        }
        let (i, q, _) = best.expect("validated scene has a background layer");
        (i, q)
    }

    /// Image of camera `c` at frame `frame`, using the photometric settings
    /// of view `c + 2 slot`.
    fn render(&self, frame: usize, c: usize, slot: usize) -> Image {
        let v = c + 2 * slot;
        let tau = frame as f64;
        let mut img = Image::from_fn(self.width, self.height, |x, y| {
            let (i, q) = self.front(Vec2::new(x as f64, y as f64), tau, Some(c));
            self.gain[v] * self.texture.value(q + self.layers[i].texture_offset) + self.offset[v]
        });
        if self.noise > 0.0 {
            let stream = (frame as u64) << 1 | c as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_0000_0000_0000 ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let normal = Normal::new(0.0, self.noise).expect("noise validated");
            img.data_mut().iter_mut().for_each(|p| *p += normal.sample(&mut rng));
        }
        img
    }

    /// Renders the window of frames `k` and `k + 1`.
    pub fn window(&self, k: usize) -> Result<SyntheticScene> {
        self.validate()?;
        let (w, h) = (self.width, self.height);
        let images = [
            self.render(k, 0, 0),
            self.render(k, 1, 0),
            self.render(k + 1, 0, 1),
            self.render(k + 1, 1, 1),
        ];
        let tau = k as f64 + 0.5;
        let n = w * h;
        let mut flows = [vec![Vec2::zeros(); n], vec![Vec2::zeros(); n], vec![Vec2::zeros(); n]];
        let mut visible = vec![[true; 4]; n];
        let mut layer_of = vec![0; n];
        for i in 0..n {
            let x = Vec2::new((i % w) as f64, (i / w) as f64);
            let (li, q) = self.front(x, tau, None);
            let layer = &self.layers[li];
            let f = PixelFlow::new(
                Vec2::new(layer.half_shift(q, tau), 0.0),
                layer.velocity / 2.0,
                Vec2::new(layer.disparity_rate / 2.0, 0.0),
            );
            for v in 0..4 {
                let (c, t) = (v % 2, v / 2);
                let p = crate::domain::warp_position(x, &f, c, t);
                visible[i][v] = self.front(p, (k + t) as f64, Some(c)).0 == li;
            }
            flows[0][i] = f.s;
            flows[1][i] = f.m;
            flows[2][i] = f.d;
            layer_of[i] = li;
        }
        Ok(SyntheticScene {
            width: w,
            height: h,
            images,
            flows,
            visible,
            layer: layer_of,
            rig: self.rig(),
        })
    }

    /// Stereo pairs of frames `0..frames`, with the photometric settings of
    /// views 0 and 1.
    pub fn sequence(&self, frames: usize) -> Result<Vec<[Image; 2]>> {
        self.validate()?;
        Ok((0..frames).map(|k| [self.render(k, 0, 0), self.render(k, 1, 0)]).collect())
    }
}

/// Endpoint errors `|a - b|` over pixels where `mask` holds.
pub fn endpoint_errors(a: &[Vec2], b: &[Vec2], mask: Option<&[bool]>) -> Vec<f64> {
    a.iter()
        .zip(b)
        .enumerate()
        .filter(|(i, _)| mask.is_none_or(|m| m[*i]))
        .map(|(_, (p, q))| (p - q).norm())
        .collect()
}

/// Nearest-rank percentile, `q` in `[0, 1]`. NaN for empty input.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

/// Mask of pixels at least `margin` away from the image border.
pub fn interior_mask(width: usize, height: usize, margin: usize) -> Vec<bool> {
    (0..width * height)
        .map(|i| {
            let (x, y) = (i % width, i / width);
            x >= margin && y >= margin && x + margin < width && y + margin < height
        })
        .collect()
}
