#![allow(dead_code)]

use halfway_sceneflow::domain::{Flow, Vec2, WarpGrid};
use halfway_sceneflow::gradcheck::Instance;

/// Bilinear node interpolation written out by hand, clamped to the grid.
fn interpolate(grid: &WarpGrid, flow: Flow, x: f64, y: f64) -> Vec2 {
    let (gw, gh, step) = (grid.grid_w(), grid.grid_h(), grid.step() as f64);
    let gx = (x / step).clamp(0.0, (gw - 1) as f64);
    let gy = (y / step).clamp(0.0, (gh - 1) as f64);
    let a0 = (gx.floor() as usize).min(gw.saturating_sub(2));
    let b0 = (gy.floor() as usize).min(gh.saturating_sub(2));
    let (fx, fy) = (gx - a0 as f64, gy - b0 as f64);
    let a1 = (a0 + 1).min(gw - 1);
    let b1 = (b0 + 1).min(gh - 1);
    let f = grid.field(flow);
    f[b0 * gw + a0] * ((1.0 - fx) * (1.0 - fy))
        + f[b0 * gw + a1] * (fx * (1.0 - fy))
        + f[b1 * gw + a0] * ((1.0 - fx) * fy)
        + f[b1 * gw + a1] * (fx * fy)
}

fn added(a: &WarpGrid, b: &WarpGrid) -> WarpGrid {
    let mut out = a.clone();
    for flow in Flow::ALL {
        for (o, v) in out.field_mut(flow).iter_mut().zip(b.field(flow)) {
            *o += v;
        }
    }
    out
}

/// The energy summed term by term from its definition: data terms over all
/// pixel checks, smoothness over right and down node pairs, epipolar
/// constraints at both times, magnitude of the delta.
pub fn direct_energy(inst: &Instance, delta: &WarpGrid) -> f64 {
    let p = &inst.params;
    let acc = added(&inst.base, delta);
    let (w, h) = (acc.width(), acc.height());
    // view c + 2t sits at x + sc s + st m + sc st d with s0 = -1, s1 = +1
    let sign = |i: usize| if i == 0 { -1.0 } else { 1.0 };
    let pos = |x: Vec2, s: Vec2, m: Vec2, d: Vec2, c: usize, t: usize| {
        x + s * sign(c) + m * sign(t) + d * (sign(c) * sign(t))
    };
    // (minuend, subtrahend) views of each check
    let checks = [(1, 0), (3, 2), (2, 0), (3, 1), (3, 0), (2, 1)];
    let mut photo = 0.0;
    let mut grad = 0.0;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !inst.weights.inlier[i] {
                continue;
            }
            let (xf, yf) = (x as f64, y as f64);
            let s = interpolate(&acc, Flow::Stereo, xf, yf);
            let m = interpolate(&acc, Flow::Motion, xf, yf);
            let d = interpolate(&acc, Flow::Difference, xf, yf);
            let samples: Vec<(f64, [f64; 2])> = (0..4)
                .map(|v| {
                    let q = pos(Vec2::new(xf, yf), s, m, d, v % 2, v / 2);
                    let smp = inst.images[v].sample(q.x, q.y);
                    (smp.value + inst.illumination[v][i], smp.grad)
                })
                .collect();
            for (k, (a, b)) in checks.iter().enumerate() {
                if inst.weights.visibility[i] & (1 << k) == 0 {
                    continue;
                }
                let dv = samples[*a].0 - samples[*b].0;
                let gx = samples[*a].1[0] - samples[*b].1[0];
                let gy = samples[*a].1[1] - samples[*b].1[1];
                let g2 = gx * gx + gy * gy;
                photo += (dv * dv + p.eps_huber * p.eps_huber).sqrt();
                grad += (g2 * g2 + p.eps_huber * p.eps_huber).sqrt();
            }
        }
    }
    let (gw, gh) = (acc.grid_w(), acc.grid_h());
    let lambda = [p.w_s, p.w_m, p.w_d];
    let mu = [p.m_s, p.m_m, p.m_d];
    let mut smooth = 0.0;
    for b in 0..gh {
        for a in 0..gw {
            let i = b * gw + a;
            let mut nb = Vec::new();
            if a + 1 < gw {
                nb.push(i + 1);
            }
            if b + 1 < gh {
                nb.push(i + gw);
            }
            for flow in Flow::ALL {
                let f = acc.field(flow);
                for j in &nb {
                    smooth += inst.weights.feature[i] * lambda[flow.index()] * (f[i] - f[*j]).norm_squared();
                }
            }
        }
    }
    let mut epi = 0.0;
    let f = &inst.fundamental;
    for k in 0..acc.node_count() {
        let x = Vec2::new(((k % gw) * acc.step()) as f64, ((k / gw) * acc.step()) as f64);
        let (s, m, d) = (acc.field(Flow::Stereo)[k], acc.field(Flow::Motion)[k], acc.field(Flow::Difference)[k]);
        for t in 0..2 {
            let l = pos(x, s, m, d, 0, t);
            let r = pos(x, s, m, d, 1, t);
            let l = nalgebra::Vector3::new(l.x, l.y, 1.0);
            let r = nalgebra::Vector3::new(r.x, r.y, 1.0);
            epi += l.dot(&(f * r)).powi(2);
        }
    }
    let mut mag = 0.0;
    for flow in Flow::ALL {
        mag += mu[flow.index()] * delta.field(flow).iter().map(|v| v.norm_squared()).sum::<f64>();
    }
    p.w_photo * photo + p.w_grad * grad + p.w_reg * (p.w_smooth * smooth + p.w_epi * epi + p.w_mag * mag)
}

/// Largest relative gap between the residual energy and the direct sum
/// over `count` seeded random states.
pub fn energy_equivalence(count: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..count {
        let opts = halfway_sceneflow::gradcheck::GradCheckOptions {
            width: 17,
            height: 13,
            seed: 100 + seed,
            ..Default::default()
        };
        let inst = Instance::random(&opts).expect("valid instance");
        let r = inst.problem().energy(&inst.delta);
        let e = direct_energy(&inst, &inst.delta);
        worst = worst.max((r - e).abs() / e.abs().max(1e-300));
    }
    worst
}
