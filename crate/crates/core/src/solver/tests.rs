use super::*;
use crate::domain::{Flow, PixelFlow, Vec2};
use crate::energy::{Preset, ALL_CHECKS};
use crate::image::Image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn texture(x: f64, y: f64) -> f64 {
    0.5 + 0.2 * (0.45 * x + 0.2 * y).sin() + 0.15 * (0.31 * y - 0.17 * x).cos() + 0.1 * (0.9 * x).sin() * (0.7 * y).cos()
}

fn splines(imgs: [Image; 4]) -> [SplineImage; 4] {
    imgs.map(|i| SplineImage::new(&i))
}

struct Fixture {
    images: [SplineImage; 4],
    illum: [Vec<f64>; 4],
    vis: Vec<CheckMask>,
    base: WarpGrid,
    params: EnergyParams,
}

impl Fixture {
    fn new(images: [SplineImage; 4], params: EnergyParams) -> Self {
        let (w, h) = (images[0].width(), images[0].height());
        Fixture {
            images,
            illum: std::array::from_fn(|_| vec![0.0; w * h]),
            vis: vec![ALL_CHECKS; w * h],
            base: WarpGrid::zeros(w, h, 2),
            params,
        }
    }

    fn input(&self) -> LevelInput<'_> {
        LevelInput {
            images: &self.images,
            illumination: &self.illum,
            visibility: &self.vis,
            base: &self.base,
            params: &self.params,
            fundamental: None,
            active: [true; 3],
            level: 0,
        }
    }
}

fn random_fixture(w: usize, h: usize, seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let imgs: [Image; 4] = std::array::from_fn(|_| {
        let (ox, oy) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        Image::from_fn(w, h, |x, y| texture(x as f64 + ox, y as f64 + oy))
    });
    Fixture::new(splines(imgs), EnergyParams::preset(Preset::Facial))
}

fn random_delta(w: usize, h: usize, seed: u64, scale: f64) -> WarpGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = WarpGrid::zeros(w, h, 2);
    for k in 0..g.node_count() {
        let mut v = || Vec2::new(rng.gen_range(-scale..scale), rng.gen_range(-scale..scale));
        g.set_node(k, PixelFlow::new(v(), v(), v()));
    }
    g
}

#[test]
fn normal_matrix_matches_explicit_jacobian() {
    let fx = random_fixture(9, 7, 1);
    let input = fx.input();
    let delta = random_delta(9, 7, 2, 0.3);
    let weights = input.initial_weights(&delta);
    let problem = input.problem(&weights);
    let sys = NormalSystem::build(&problem, &delta, 0.0).unwrap();
    let a = sys.to_dense();
    assert_eq!(a, a.transpose(), "assembly must be exactly symmetric");

    // explicit J^T J differs only in the smoothness block, which the system
    // treats as an exact quadratic; compare with smoothness switched off
    let mut params = fx.params.clone();
    params.w_smooth = 0.0;
    let problem = LevelProblem {
        params: &params,
        ..problem
    };
    let sys = NormalSystem::build(&problem, &delta, 0.0).unwrap();
    let jac = problem.jacobian(&delta);
    let jtj = jac.normal_matrix();
    let diff = (sys.to_dense() - &jtj).abs().max();
    assert!(diff < 1e-9 * jtj.abs().max().max(1.0), "{diff}");
    let r = problem.residuals(&delta);
    let jtr = jac.transpose_mul(&r.values);
    for (b, g) in sys.rhs().iter().zip(&jtr) {
        assert!((b + g).abs() < 1e-9 * (1.0 + g.abs()));
    }
}

#[test]
fn smoothness_rhs_is_minus_half_gradient() {
    let fx = random_fixture(9, 7, 4);
    let input = fx.input();
    let delta = random_delta(9, 7, 5, 0.3);
    let weights = input.initial_weights(&delta);
    let problem = input.problem(&weights);
    let sys = NormalSystem::build(&problem, &delta, 0.0).unwrap();
    let jac = problem.jacobian(&delta);
    let r = problem.residuals(&delta);
    let jtr = jac.transpose_mul(&r.values);
    for (b, g) in sys.rhs().iter().zip(&jtr) {
        assert!((b + g).abs() < 1e-8 * (1.0 + g.abs()), "{b} vs {g}");
    }
}

#[test]
fn flat_images_leave_only_regularizers() {
    let (w, h) = (7, 7);
    let imgs = std::array::from_fn(|_| Image::filled(w, h, 0.3));
    let mut params = EnergyParams::default();
    params.w_smooth = 0.0;
    let fx = Fixture::new(splines(imgs), params);
    let input = fx.input();
    let delta = WarpGrid::zeros(w, h, 2);
    let weights = input.initial_weights(&delta);
    let problem = input.problem(&weights);
    let jac = problem.jacobian(&delta);
    let n = w * h;
    assert!(jac.rows[..2 * n].iter().all(|r| r.iter().all(|e| e.1 == 0.0)));
    let a = NormalSystem::build(&problem, &delta, 0.0).unwrap().to_dense();
    let p = &fx.params;
    for k in 0..delta.node_count() {
        for flow in Flow::ALL {
            for axis in 0..2 {
                let i = crate::energy::unknown_index(k, flow, axis);
                let expected = p.w_mag * p.w_reg * p.mag_weight(flow);
                assert!((a[(i, i)] - expected).abs() < 1e-12);
            }
        }
    }
    assert_eq!(a.clone() - nalgebra::DMatrix::from_diagonal(&a.diagonal()), a.clone() * 0.0);
}

#[test]
fn system_is_positive_definite() {
    let fx = random_fixture(9, 9, 7);
    let input = fx.input();
    let delta = random_delta(9, 9, 8, 0.2);
    let weights = input.initial_weights(&delta);
    let sys = NormalSystem::build(&input.problem(&weights), &delta, 0.0).unwrap();
    let eig = sys.to_dense().symmetric_eigen();
    assert!(eig.eigenvalues.min() > 0.0);
}

#[test]
fn single_subdomain_equals_global_pcg() {
    let fx = random_fixture(16, 12, 3);
    let input = fx.input();
    let delta = WarpGrid::zeros(16, 12, 2);
    let weights = input.initial_weights(&delta);
    let sys = NormalSystem::build(&input.problem(&weights), &delta, 0.0).unwrap();
    let global = pcg(&sys, sys.rhs(), 5).unwrap();
    let tiled = schwarz_solve(&sys, &Tiling::single(sys.grid_w(), sys.grid_h()), 1, 5).unwrap();
    for (a, b) in global.x.iter().zip(&tiled.step) {
        assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
    }
}

#[test]
fn separable_system_is_solved_in_one_sweep() {
    // flat images and no smoothness: every node decouples
    let (w, h) = (19, 9);
    let imgs = std::array::from_fn(|_| Image::filled(w, h, 0.3));
    let mut params = EnergyParams::default();
    params.w_smooth = 0.0;
    let fx = Fixture::new(splines(imgs), params);
    let input = fx.input();
    let delta = random_delta(w, h, 9, 1.0);
    let weights = input.initial_weights(&delta);
    let sys = NormalSystem::build(&input.problem(&weights), &delta, 0.0).unwrap();
    let tiling = Tiling::new(sys.grid_w(), sys.grid_h(), 2, 10, 2);
    assert_eq!(tiling.tiles.len(), 2);
    let res = schwarz_solve(&sys, &tiling, 1, 1).unwrap();
    // the exact step cancels delta
    let flat = flatten(&delta);
    for (s, d) in res.step.iter().zip(&flat) {
        assert!((s + d).abs() < 1e-12);
    }
}

#[test]
fn tiling_interiors_partition_the_grid() {
    let t = Tiling::new(33, 20, 2, 16, 2);
    let mut seen = vec![0; 33 * 20];
    for tile in &t.tiles {
        for b in tile.b0..tile.b1 {
            for a in tile.a0..tile.a1 {
                seen[b * 33 + a] += 1;
            }
        }
        assert!(tile.width() <= 8 && tile.height() <= 8);
        if tile.a0 > 0 {
            assert!(tile.is_boundary(tile.a0 - 1, tile.b0));
        }
    }
    assert!(seen.iter().all(|c| *c == 1));
}

#[test]
fn schwarz_is_close_to_global_solve() {
    let scene = crate::synth::SceneSpec::constant_disparity(64, 64, 1.5, 4).window(0).unwrap();
    let fx = Fixture::new(splines(scene.images.clone()), EnergyParams::default());
    let input = fx.input();
    let delta = WarpGrid::zeros(64, 64, 2);
    let weights = input.initial_weights(&delta);
    let problem = input.problem(&weights);
    let sys = NormalSystem::build(&problem, &delta, 0.0).unwrap();
    let energy = |step: &[f64]| {
        let mut d = delta.clone();
        add_flat(&mut d, step);
        problem.energy(&d)
    };
    let global = pcg(&sys, sys.rhs(), 25).unwrap();
    let tiled = schwarz_solve(&sys, &Tiling::new(sys.grid_w(), sys.grid_h(), 2, 16, 2), 5, 5).unwrap();
    let (eg, et) = (energy(&global.x), energy(&tiled.step));
    assert!(et < sys.energy());
    assert!((et - eg).abs() <= 0.02 * eg, "global {eg} schwarz {et}");
    assert!(tiled.linear_energy.windows(2).all(|w| w[1] <= w[0] + 1e-9));
}

#[test]
fn identical_images_stay_at_zero() {
    let (w, h) = (24, 20);
    let img = Image::from_fn(w, h, |x, y| texture(x as f64, y as f64));
    let fx = Fixture::new(splines(std::array::from_fn(|_| img.clone())), EnergyParams::default());
    let sol = gauss_newton(&fx.input(), WarpGrid::zeros(w, h, 2), &SolverSettings::default()).unwrap();
    assert!(sol.delta.max_abs() < 1e-6, "{}", sol.delta.max_abs());
}

#[test]
fn recovers_small_constant_disparity() {
    let (w, h) = (48, 40);
    let u = 0.75;
    let tex = |x: f64, y: f64| 0.5 + 0.45 * (0.8 * x + 0.3 * y).sin() * (0.6 * y - 0.2 * x).cos();
    let left = Image::from_fn(w, h, |x, y| tex(x as f64 + u, y as f64));
    let right = Image::from_fn(w, h, |x, y| tex(x as f64 - u, y as f64));
    let mut fx = Fixture::new(
        splines([left.clone(), right.clone(), left, right]),
        EnergyParams::default(),
    );
    fx.params.eps_color = 1.0;
    let settings = SolverSettings {
        gn_iters: 10,
        ..SolverSettings::default()
    };
    let sol = gauss_newton(&fx.input(), WarpGrid::zeros(w, h, 2), &settings).unwrap();
    let mut good = 0;
    let mut total = 0;
    for y in 4..h - 4 {
        for x in 4..w - 4 {
            let s = sol.delta.flow_clamped(x as f64, y as f64).s;
            total += 1;
            if (s - Vec2::new(u, 0.0)).norm() < 0.25 {
                good += 1;
            }
        }
    }
    assert!(good as f64 >= 0.9 * total as f64, "{good}/{total}");
}

#[test]
fn solve_is_thread_count_independent() {
    let fx = random_fixture(30, 26, 11);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| gauss_newton(&fx.input(), WarpGrid::zeros(30, 26, 2), &SolverSettings::default()).unwrap())
    };
    let (a, b) = (run(1), run(4));
    assert_eq!(flatten(&a.delta), flatten(&b.delta));
}
