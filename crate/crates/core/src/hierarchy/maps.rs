//! Occlusion and illumination maps and their prolongation.

use rayon::prelude::*;

use crate::domain::{warp_position, Vec2, WarpGrid, CHECKS, VIEWS};
use crate::energy::{pixel_flows, CheckMask};
use crate::image::{gaussian_blur, Image, SplineImage};

/// Slack on the nearness test, in pixels of disparity.
pub const NEARNESS_TOLERANCE: f64 = 0.5;
/// Gaussian width for the low-frequency illumination residual.
pub const ILLUMINATION_SIGMA: f64 = 3.2;

/// Per-view visibility of the halfway pixels of one level.
#[derive(Clone, Debug, PartialEq)]
pub struct OcclusionMaps {
    pub width: usize,
    pub height: usize,
    /// `visible[v][p]` for view `v = c + 2t`.
    pub visible: [Vec<bool>; 4],
}

impl OcclusionMaps {
    pub fn all_visible(width: usize, height: usize) -> Self {
        OcclusionMaps {
            width,
            height,
            visible: std::array::from_fn(|_| vec![true; width * height]),
        }
    }

    /// Check `k` is usable iff both of its views are visible.
    pub fn check_masks(&self) -> Vec<CheckMask> {
        (0..self.width * self.height)
            .map(|p| {
                CHECKS.iter().enumerate().fold(0, |m, (k, (a, b))| {
                    if self.visible[a.index()][p] && self.visible[b.index()][p] {
                        m | 1 << k
                    } else {
                        m
                    }
                })
            })
            .collect()
    }

    pub fn occluded_count(&self, view: usize) -> usize {
        self.visible[view].iter().filter(|v| !**v).count()
    }

    /// Bilinear interpolation of the 0/1 masks to a level of size
    /// `(width, height)` (twice as fine), thresholded at 0.5.
    pub fn prolongate(&self, width: usize, height: usize) -> OcclusionMaps {
        let visible = std::array::from_fn(|v| {
            let coarse: Vec<f64> = self.visible[v].iter().map(|b| f64::from(u8::from(*b))).collect();
            (0..width * height)
                .map(|p| {
                    let (x, y) = fine_to_coarse(p % width, p / width);
                    bilinear(&coarse, self.width, self.height, x, y) >= 0.5
                })
                .collect()
        });
        OcclusionMaps { width, height, visible }
    }
}

/// Additive intensity corrections of one level, per view.
#[derive(Clone, Debug, PartialEq)]
pub struct IlluminationMaps {
    pub width: usize,
    pub height: usize,
    pub maps: [Vec<f64>; 4],
}

impl IlluminationMaps {
    pub fn zeros(width: usize, height: usize) -> Self {
        IlluminationMaps {
            width,
            height,
            maps: std::array::from_fn(|_| vec![0.0; width * height]),
        }
    }

    /// Box-filter (nearest parent) upsampling.
    pub fn prolongate(&self, width: usize, height: usize) -> IlluminationMaps {
        let maps = std::array::from_fn(|v| {
            (0..width * height)
                .map(|p| {
                    let x = ((p % width) / 2).min(self.width - 1);
                    let y = ((p / width) / 2).min(self.height - 1);
                    self.maps[v][y * self.width + x]
                })
                .collect()
        });
        IlluminationMaps { width, height, maps }
    }
}

/// Continuous coarse coordinates of a fine pixel: coarse pixel `i` covers
/// fine pixels `2i` and `2i + 1`.
#[inline]
pub fn fine_to_coarse(x: usize, y: usize) -> (f64, f64) {
    ((x as f64 - 0.5) / 2.0, (y as f64 - 0.5) / 2.0)
}

/// Bilinear lookup with clamping at the borders.
pub fn bilinear(data: &[f64], w: usize, h: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (tx, ty) = (x - x0 as f64, y - y0 as f64);
    let at = |xx: usize, yy: usize| data[yy * w + xx];
    (1.0 - ty) * ((1.0 - tx) * at(x0, y0) + tx * at(x1, y0)) + ty * ((1.0 - tx) * at(x0, y1) + tx * at(x1, y1))
}

/// Renders the halfway pixel lattice (two triangles per cell) into every
/// view with a z-buffer on nearness `|2s|` (larger disparity is nearer). A halfway pixel is visible in a
/// view iff it lands inside the image and no surface is nearer at its
/// projected position.
pub fn compute_occlusion_maps(acc: &WarpGrid) -> OcclusionMaps {
    let (w, h) = (acc.width(), acc.height());
    let flows = pixel_flows(acc);
    let nearness: Vec<f64> = flows.iter().map(|f| 2.0 * f.s.norm()).collect();
    let visible = VIEWS.map(|v| {
        let proj: Vec<Vec2> = (0..w * h)
            .map(|p| warp_position(Vec2::new((p % w) as f64, (p / w) as f64), &flows[p], v.camera, v.time))
            .collect();
        let zbuf = rasterize(w, h, &proj, &nearness);
        (0..w * h)
            .into_par_iter()
            .map(|p| {
                let q = proj[p];
                let (x, y) = (q.x.round(), q.y.round());
                if !(x >= 0.0 && y >= 0.0 && x < w as f64 && y < h as f64) {
                    return false;
                }
                let z = zbuf[y as usize * w + x as usize];
                nearness[p] + NEARNESS_TOLERANCE >= z
            })
            .collect()
    });
    OcclusionMaps { width: w, height: h, visible }
}

/// Maximum nearness per image pixel center; `-inf` where nothing lands.
/// Inverted (folded-over) triangles are skipped.
fn rasterize(w: usize, h: usize, proj: &[Vec2], nearness: &[f64]) -> Vec<f64> {
    let mut zbuf = vec![f64::NEG_INFINITY; w * h];
    let mut draw = |a: usize, b: usize, c: usize| {
        let (pa, pb, pc) = (proj[a], proj[b], proj[c]);
        let area = (pb - pa).perp(&(pc - pa));
        // lattice triangles are listed with positive signed area
        if !(area > 1e-12) {
            return;
        }
        let x0 = pa.x.min(pb.x).min(pc.x).ceil().max(0.0);
        let x1 = pa.x.max(pb.x).max(pc.x).floor().min((w - 1) as f64);
        let y0 = pa.y.min(pb.y).min(pc.y).ceil().max(0.0);
        let y1 = pa.y.max(pb.y).max(pc.y).floor().min((h - 1) as f64);
        if x0 > x1 || y0 > y1 {
            return;
        }
        for y in y0 as usize..=y1 as usize {
            for x in x0 as usize..=x1 as usize {
                let q = Vec2::new(x as f64, y as f64);
                let l0 = (pb - q).perp(&(pc - q)) / area;
                let l1 = (pc - q).perp(&(pa - q)) / area;
                let l2 = 1.0 - l0 - l1;
                const EDGE: f64 = -1e-9;
                if l0 < EDGE || l1 < EDGE || l2 < EDGE {
                    continue;
                }
                let z = l0 * nearness[a] + l1 * nearness[b] + l2 * nearness[c];
                let slot = &mut zbuf[y * w + x];
                if z > *slot {
                    *slot = z;
                }
            }
        }
    };
    for y in 0..h.saturating_sub(1) {
        for x in 0..w.saturating_sub(1) {
            let i = y * w + x;
            draw(i, i + 1, i + w);
            draw(i + 1, i + w + 1, i + w);
        }
    }
    // single-row or single-column images have no triangles
    if w == 1 || h == 1 {
        for (p, q) in proj.iter().enumerate() {
            let (x, y) = (q.x.round(), q.y.round());
            if x >= 0.0 && y >= 0.0 && x < w as f64 && y < h as f64 {
                let slot = &mut zbuf[y as usize * w + x as usize];
                *slot = slot.max(nearness[p]);
            }
        }
    }
    zbuf
}

/// Low-frequency stereo residual per time step, split evenly between the
/// two cameras: `L_0 = +blur(r)/2`, `L_1 = -blur(r)/2` with
/// `r = I_1(warp) - I_0(warp)` (zero where either view is occluded).
pub fn compute_illumination_maps(
    images: &[SplineImage; 4],
    acc: &WarpGrid,
    occlusion: &OcclusionMaps,
) -> crate::Result<IlluminationMaps> {
    let (w, h) = (acc.width(), acc.height());
    let flows = pixel_flows(acc);
    let mut out = IlluminationMaps::zeros(w, h);
    for t in 0..2 {
        let (v0, v1) = (2 * t, 2 * t + 1);
        let r: Vec<f64> = (0..w * h)
            .into_par_iter()
            .map(|p| {
                if !(occlusion.visible[v0][p] && occlusion.visible[v1][p]) {
                    return 0.0;
                }
                let x = Vec2::new((p % w) as f64, (p / w) as f64);
                let q0 = warp_position(x, &flows[p], 0, t);
                let q1 = warp_position(x, &flows[p], 1, t);
                images[v1].value(q1.x, q1.y) - images[v0].value(q0.x, q0.y)
            })
            .collect();
        let low = gaussian_blur(&Image::new(w, h, r)?, ILLUMINATION_SIGMA)?;
        out.maps[v0] = low.data().iter().map(|v| 0.5 * v).collect();
        out.maps[v1] = low.data().iter().map(|v| -0.5 * v).collect();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::PixelFlow;

    #[test]
    fn zero_flow_is_fully_visible() {
        let g = WarpGrid::zeros(20, 14, 2);
        let occ = compute_occlusion_maps(&g);
        assert!(occ.visible.iter().all(|m| m.iter().all(|v| *v)));
        assert!(occ.check_masks().iter().all(|m| *m == crate::energy::ALL_CHECKS));
    }

    #[test]
    fn constant_disparity_only_loses_the_border() {
        let g = WarpGrid::constant(30, 20, 2, PixelFlow::new(Vec2::new(2.0, 0.0), Vec2::zeros(), Vec2::zeros()));
        let occ = compute_occlusion_maps(&g);
        for p in 0..600 {
            let x = p % 30;
            assert_eq!(occ.visible[0][p], x >= 2, "{p}");
            assert_eq!(occ.visible[1][p], x < 28, "{p}");
        }
    }

    #[test]
    fn foreground_square_occludes_bands() {
        let (w, h) = (48, 32);
        let mut g = WarpGrid::zeros(w, h, 1);
        for k in 0..g.node_count() {
            let p = g.node_position(k);
            let fg = (18.0..30.0).contains(&p.x) && (10.0..22.0).contains(&p.y);
            g.field_mut(crate::domain::Flow::Stereo)[k] = Vec2::new(if fg { 4.0 } else { 1.0 }, 0.0);
        }
        let occ = compute_occlusion_maps(&g);
        let row = 16 * w;
        let left_only: Vec<usize> = (0..w).filter(|x| !occ.visible[0][row + x] && occ.visible[1][row + x]).collect();
        let right_only: Vec<usize> = (0..w).filter(|x| occ.visible[0][row + x] && !occ.visible[1][row + x]).collect();
        // background left of the square is hidden from the left camera
        assert!(left_only.iter().any(|&x| (15..18).contains(&x)), "{left_only:?}");
        assert!(right_only.iter().any(|&x| (30..33).contains(&x)), "{right_only:?}");
        // foreground is never occluded
        assert!((18..30).all(|x| occ.visible[0][row + x] && occ.visible[1][row + x]));
    }

    #[test]
    fn prolongation_of_masks() {
        let occ = OcclusionMaps::all_visible(5, 4);
        let fine = occ.prolongate(10, 8);
        assert!(fine.visible.iter().all(|m| m.iter().all(|v| *v)));
        let mut half = OcclusionMaps::all_visible(4, 1);
        half.visible[0] = vec![true, true, false, false];
        let fine = half.prolongate(8, 2);
        assert_eq!(&fine.visible[0][..8], &[true, true, true, true, false, false, false, false]);
    }

    #[test]
    fn box_upsampling_of_illumination() {
        let mut il = IlluminationMaps::zeros(2, 2);
        il.maps[1] = vec![1.0, 2.0, 3.0, 4.0];
        let fine = il.prolongate(3, 4);
        assert_eq!(fine.maps[1], vec![1.0, 1.0, 2.0, 1.0, 1.0, 2.0, 3.0, 3.0, 4.0, 3.0, 3.0, 4.0]);
    }

    #[test]
    fn constant_offset_is_split_between_cameras() {
        let (w, h) = (24, 20);
        let base = Image::from_fn(w, h, |x, y| 0.4 + 0.2 * ((x as f64) * 0.5).sin() * ((y as f64) * 0.3).cos());
        let bright = base.map(|v| v + 0.1);
        let imgs = [base.clone(), bright.clone(), base, bright].map(|i| SplineImage::new(&i));
        let g = WarpGrid::zeros(w, h, 2);
        let il = compute_illumination_maps(&imgs, &g, &OcclusionMaps::all_visible(w, h)).unwrap();
        // the blur normalizes at the borders, so the offset is exact everywhere
        for p in 0..w * h {
            assert!((il.maps[0][p] - 0.05).abs() < 1e-9);
            assert!((il.maps[1][p] + 0.05).abs() < 1e-9);
        }
        let same = [0, 0, 0, 0].map(|_| imgs[0].clone());
        let il = compute_illumination_maps(&same, &g, &OcclusionMaps::all_visible(w, h)).unwrap();
        assert!(il.maps.iter().flatten().all(|v| v.abs() < 1e-12));
    }
}
