//! Calibration, triangulation and per-pixel outputs.

mod io;

pub use io::{parse_calibration, read_calibration, read_flo, read_pfm, write_calibration, write_flo, write_obj, write_pfm};

use nalgebra::{Matrix3, Matrix3x4, Matrix4, Vector3, Vector4};

use crate::domain::{warp_position, Flow, PixelFlow, Vec2, WarpGrid};
use crate::error::{Error, Result};

/// Fundamental matrix with optional projection matrices. The epipolar
/// constraint is `l^T F r = 0` with `l` in camera 0 (left) and `r` in
/// camera 1 (right).
#[derive(Clone, Debug, PartialEq)]
pub struct StereoRig {
    pub f: Matrix3<f64>,
    pub projections: Option<[Matrix3x4<f64>; 2]>,
}

/// Relative tolerance of the rank and consistency checks.
const RIG_TOL: f64 = 1e-6;

impl StereoRig {
    pub fn new(f: Matrix3<f64>, projections: Option<[Matrix3x4<f64>; 2]>) -> Result<Self> {
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::Calibration("fundamental matrix has non-finite entries".into()));
        }
        let mut sv: Vec<f64> = f.svd(false, false).singular_values.iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        if sv[0] == 0.0 || sv[1] <= RIG_TOL * sv[0] || sv[2] > RIG_TOL * sv[0] {
            return Err(Error::Calibration(format!(
                "fundamental matrix must have rank 2 (singular values {:e}, {:e}, {:e})",
                sv[0], sv[1], sv[2]
            )));
        }
        let rig = StereoRig { f, projections };
        if let Some([p0, p1]) = &rig.projections {
            let fnorm = f / f.norm();
            for x in [
                Vector4::new(0.1, -0.2, 5.0, 1.0),
                Vector4::new(1.0, 0.5, 9.0, 1.0),
                Vector4::new(-2.0, 1.0, 20.0, 1.0),
            ] {
                let (l, r) = (p0 * x, p1 * x);
                if l.z.abs() < f64::EPSILON || r.z.abs() < f64::EPSILON {
                    continue;
                }
                let (l, r) = (l / l.z, r / r.z);
                let e = l.dot(&(fnorm * r)).abs() / (l.norm() * r.norm());
                if e > RIG_TOL {
                    return Err(Error::Calibration(format!(
                        "fundamental matrix is inconsistent with the projection matrices (epipolar residual {e:e})"
                    )));
                }
            }
        }
        Ok(rig)
    }

    /// Rectified pair: `P0 = K[I|0]`, `P1 = K[I|(b,0,0)]`, `F = [e1]_x`.
    pub fn rectified(focal: f64, cx: f64, cy: f64, baseline: f64) -> Self {
        let k = Matrix3::new(focal, 0.0, cx, 0.0, focal, cy, 0.0, 0.0, 1.0);
        let mut rt0 = Matrix3x4::zeros();
        rt0.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
        let mut rt1 = rt0;
        rt1[(0, 3)] = baseline;
        StereoRig {
            f: rectified_fundamental(),
            projections: Some([k * rt0, k * rt1]),
        }
    }

    /// `F` for pixel coordinates of pyramid level `level`, where a level
    /// pixel `x` sits at `2^level * x + (2^level - 1) / 2` at full resolution.
    /// Scaled by `2^-level` so the residual stays in level pixel units.
    pub fn level_fundamental(&self, level: usize) -> Matrix3<f64> {
        let s = (1u64 << level) as f64;
        let o = (s - 1.0) / 2.0;
        let m = Matrix3::new(s, 0.0, o, 0.0, s, o, 0.0, 0.0, 1.0);
        m.transpose() * self.f * m / s
    }

    /// Unit direction of the epipolar line through `l` in the right image,
    /// oriented with non-negative x.
    pub fn epipolar_direction(&self, l: Vec2) -> Vec2 {
        let line = self.f.transpose() * Vector3::new(l.x, l.y, 1.0);
        let d = Vec2::new(line.y, -line.x);
        let n = d.norm();
        if n == 0.0 {
            return Vec2::new(1.0, 0.0);
        }
        let d = d / n;
        if d.x < 0.0 || (d.x == 0.0 && d.y < 0.0) {
            -d
        } else {
            d
        }
    }
}

/// `[e1]_x`: horizontal epipolar lines, `l^T F r = r_y - l_y`.
pub fn rectified_fundamental() -> Matrix3<f64> {
    Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0)
}

/// Linear triangulation of a correspondence. `None` when the rays are
/// (near) parallel.
pub fn triangulate_points(p0: &Matrix3x4<f64>, p1: &Matrix3x4<f64>, l: Vec2, r: Vec2) -> Option<Vector3<f64>> {
    let mut a = Matrix4::zeros();
    let rows = [
        p0.row(2) * l.x - p0.row(0),
        p0.row(2) * l.y - p0.row(1),
        p1.row(2) * r.x - p1.row(0),
        p1.row(2) * r.y - p1.row(1),
    ];
    for (i, row) in rows.iter().enumerate() {
        let n = row.norm();
        if n == 0.0 {
            return None;
        }
        a.set_row(i, &(row / n));
    }
    let svd = a.svd(false, true);
    let sv = svd.singular_values;
    let v_t = svd.v_t?;
    let (imin, _) = sv.argmin();
    let mut sorted: Vec<f64> = sv.iter().copied().collect();
    sorted.sort_by(|x, y| y.partial_cmp(x).unwrap());
    // the null direction is expected; the remaining three must be well conditioned
    if !(sorted[2] > 0.0) || sorted[0] / sorted[2] > 1e8 {
        return None;
    }
    let x = v_t.row(imin).transpose();
    let xyz = Vector3::new(x[0], x[1], x[2]);
    if x[3] == 0.0 || xyz.norm() / x[3].abs() > 1e8 {
        return None;
    }
    Some(xyz / x[3])
}

/// Triangulates halfway pixel `x` at time `t`.
pub fn triangulate(x: Vec2, f: &PixelFlow, t: usize, rig: &StereoRig) -> Result<Option<Vector3<f64>>> {
    let [p0, p1] = rig
        .projections
        .as_ref()
        .ok_or_else(|| Error::Calibration("triangulation needs projection matrices P0 and P1".into()))?;
    let l = warp_position(x, f, 0, t);
    let r = warp_position(x, f, 1, t);
    Ok(triangulate_points(p0, p1, l, r))
}

/// Full resolution per-pixel outputs of a solve.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowResult {
    pub width: usize,
    pub height: usize,
    pub flows: [Vec<Vec2>; 3],
    /// Signed `2 s` along the epipolar direction.
    pub disparity: Vec<f64>,
    /// Visible in all four views.
    pub visible: Vec<bool>,
    /// 3D points at time 0 when projection matrices are known.
    pub points: Option<Vec<Option<Vector3<f64>>>>,
    /// 3D scene flow `X(t=1) - X(t=0)`.
    pub motion: Option<Vec<Option<Vector3<f64>>>>,
}

impl FlowResult {
    pub fn from_grid(acc: &WarpGrid, visible: Vec<bool>, rig: Option<&StereoRig>) -> Self {
        let (w, h) = (acc.width(), acc.height());
        assert_eq!(visible.len(), w * h);
        let mut flows: [Vec<Vec2>; 3] = std::array::from_fn(|_| Vec::with_capacity(w * h));
        let mut pixel_flows = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let f = acc.flow_clamped(x as f64, y as f64);
                for flow in Flow::ALL {
                    flows[flow.index()].push(f.get(flow));
                }
                pixel_flows.push(f);
            }
        }
        let disparity = pixel_flows
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let x = Vec2::new((i % w) as f64, (i / w) as f64);
                let dir = rig.map_or(Vec2::new(1.0, 0.0), |r| r.epipolar_direction(warp_position(x, f, 0, 0)));
                2.0 * f.s.dot(&dir)
            })
            .collect();
        let (points, motion) = match rig {
            Some(rig) if rig.projections.is_some() => {
                let mut pts = Vec::with_capacity(w * h);
                let mut mot = Vec::with_capacity(w * h);
                for (i, f) in pixel_flows.iter().enumerate() {
                    let x = Vec2::new((i % w) as f64, (i / w) as f64);
                    let p0 = triangulate(x, f, 0, rig).unwrap();
                    let p1 = triangulate(x, f, 1, rig).unwrap();
                    pts.push(p0);
                    mot.push(p0.zip(p1).map(|(a, b)| b - a));
                }
                (Some(pts), Some(mot))
            }
            _ => (None, None),
        };
        FlowResult {
            width: w,
            height: h,
            flows,
            disparity,
            visible,
            points,
            motion,
        }
    }

    pub fn flow(&self, flow: Flow) -> &[Vec2] {
        &self.flows[flow.index()]
    }

    pub fn pixel_flow(&self, i: usize) -> PixelFlow {
        PixelFlow::new(self.flows[0][i], self.flows[1][i], self.flows[2][i])
    }

    /// Largest absolute flow component over all pixels and fields.
    pub fn max_abs(&self) -> f64 {
        self.flows
            .iter()
            .flat_map(|f| f.iter())
            .map(|v| v.x.abs().max(v.y.abs()))
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_check() {
        assert!(StereoRig::new(rectified_fundamental(), None).is_ok());
        assert!(StereoRig::new(Matrix3::identity(), None).is_err());
        assert!(StereoRig::new(Matrix3::zeros(), None).is_err());
        let rig = StereoRig::rectified(100.0, 32.0, 24.0, 0.1);
        assert!(StereoRig::new(rig.f, rig.projections).is_ok());
        let mut p = rig.projections.unwrap();
        p[1][(1, 3)] = 5.0;
        assert!(StereoRig::new(rig.f, Some(p)).is_err());
    }

    #[test]
    fn rectified_epipolar_examples() {
        let f = rectified_fundamental();
        let l = Vector3::new(0.0, 0.0, 1.0);
        assert_eq!(l.dot(&(f * Vector3::new(5.0, 0.0, 1.0))), 0.0);
        assert_eq!(l.dot(&(f * Vector3::new(5.0, 1.0, 1.0))).abs(), 1.0);
    }

    #[test]
    fn level_fundamental_keeps_level_units() {
        let rig = StereoRig::new(rectified_fundamental(), None).unwrap();
        let f2 = rig.level_fundamental(2);
        // one level-2 pixel of vertical offset is one unit of residual
        let l = Vector3::new(3.0, 4.0, 1.0);
        let r = Vector3::new(7.0, 5.0, 1.0);
        assert!((l.dot(&(f2 * r)) - 1.0).abs() < 1e-12);
        assert_eq!(rig.level_fundamental(0), rig.f);
    }

    #[test]
    fn triangulation_round_trip() {
        let rig = StereoRig::rectified(200.0, 40.0, 30.0, 0.2);
        let [p0, p1] = rig.projections.unwrap();
        let x = Vector4::new(0.3, -0.1, 4.0, 1.0);
        let (l, r) = (p0 * x, p1 * x);
        let (l, r) = (Vec2::new(l.x / l.z, l.y / l.z), Vec2::new(r.x / r.z, r.y / r.z));
        let p = triangulate_points(&p0, &p1, l, r).unwrap();
        assert!((p - x.xyz()).norm() < 1e-6);
        let back = p0 * p.push(1.0);
        assert!((Vec2::new(back.x / back.z, back.y / back.z) - l).norm() < 1e-6);

        // halfway parameterization of the same correspondence
        let h = (l + r) / 2.0;
        let f = PixelFlow::new((r - l) / 2.0, Vec2::zeros(), Vec2::zeros());
        let p = triangulate(h, &f, 0, &rig).unwrap().unwrap();
        assert!((p - x.xyz()).norm() < 1e-6);
        let q = triangulate(h, &f, 1, &rig).unwrap().unwrap();
        assert!((q - p).norm() < 1e-12, "zero motion gives zero scene flow");
    }

    #[test]
    fn zero_disparity_is_invalid() {
        let rig = StereoRig::rectified(200.0, 40.0, 30.0, 0.2);
        let f = PixelFlow::default();
        assert_eq!(triangulate(Vec2::new(10.0, 5.0), &f, 0, &rig).unwrap(), None);
        let no_p = StereoRig::new(rectified_fundamental(), None).unwrap();
        assert!(triangulate(Vec2::new(1.0, 1.0), &f, 0, &no_p).is_err());
    }

    #[test]
    fn disparity_is_twice_stereo_flow() {
        let g = WarpGrid::constant(5, 4, 2, PixelFlow::new(Vec2::new(1.5, 0.0), Vec2::zeros(), Vec2::zeros()));
        let rig = StereoRig::new(rectified_fundamental(), None).unwrap();
        let res = FlowResult::from_grid(&g, vec![true; 20], Some(&rig));
        assert!(res.disparity.iter().all(|d| (d - 3.0).abs() < 1e-12));
        assert!(res.points.is_none());
    }
}
