//! Command-line front end of the `halfway` binary.
//!
//! Exit codes: 0 success, 1 bad input, 2 solver failure, 3 failed gradient
//! check. Every flag can also be set through an `HWSF_*` environment
//! variable.

use std::ffi::OsString;
use std::fmt::Display;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{parse_list, Config};
use crate::domain::{Flow, Vec2};
use crate::energy::Preset;
use crate::error::{Error, Result};
use crate::geometry::{read_calibration, read_flo, write_calibration, write_flo, write_obj, write_pfm, FlowResult, StereoRig};
use crate::gradcheck::{self, GradCheckOptions};
use crate::hierarchy::{HierarchyState, Pipeline, RunReport, SceneFlowOutput};
use crate::image::{load_image, save_png8, Image, SplineImage};
use crate::synth::{endpoint_errors, interior_mask, percentile, SceneSpec, Texture};

#[derive(Parser, Debug)]
#[command(name = "halfway", version, about = "Scene flow from two stereo frames in the halfway domain")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long, global = true, env = "HWSF_CONFIG")]
    config: Option<PathBuf>,
    /// Parameter preset: live, facial or stereo-hq.
    #[arg(long, global = true, env = "HWSF_PRESET")]
    preset: Option<Preset>,
    /// Calibration: 9 numbers of F, optionally followed by P0 and P1.
    #[arg(long, global = true, env = "HWSF_CALIB")]
    calib: Option<PathBuf>,
    #[arg(long, global = true, env = "HWSF_LEVELS")]
    levels: Option<usize>,
    /// Pixel spacing of warp grid nodes: 1, 2 or 4.
    #[arg(long, global = true, env = "HWSF_GRID_STEP")]
    grid_step: Option<usize>,
    /// Gauss-Newton iterations per level, finest first, e.g. `2,2,5,5,5`.
    #[arg(long, global = true, env = "HWSF_GN_ITERS")]
    gn_iters: Option<String>,
    #[arg(long, global = true, env = "HWSF_PCG_ITERS")]
    pcg_iters: Option<usize>,
    /// Schwarz sweeps per PCG iteration.
    #[arg(long, global = true, env = "HWSF_PATCH_ITERS")]
    patch_iters: Option<usize>,
    #[arg(long, global = true, env = "HWSF_OUT_DIR")]
    out_dir: Option<PathBuf>,
    /// Write per-level debug images to `<out-dir>/debug`.
    #[arg(long, global = true, env = "HWSF_DUMP_DEBUG")]
    dump_debug: bool,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, env = "HWSF_THREADS", default_value_t = 0)]
    threads: usize,
    #[arg(long, global = true, env = "HWSF_SEED", default_value_t = 1)]
    seed: u64,
    /// Extra `key=value` setting, as in a config file. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Scene flow from four images: left0 right0 left1 right1.
    Flow {
        images: Vec<PathBuf>,
        /// Also write a triangle mesh.
        #[arg(long)]
        obj: bool,
        /// Directory with ground truth `s.flo`, `m.flo`, `d.flo` to score against.
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Border excluded from the scores, in pixels.
        #[arg(long, default_value_t = 8)]
        eval_margin: usize,
    },
    /// Disparity from one rectified pair: left right.
    Stereo {
        images: Vec<PathBuf>,
        #[arg(long)]
        obj: bool,
    },
    /// Sliding two-frame windows over frames given as left/right pairs.
    Sequence {
        images: Vec<PathBuf>,
        #[arg(long)]
        obj: bool,
    },
    /// Renders a synthetic scene with ground truth.
    Synth(SynthArgs),
    /// Compares the analytic Jacobian with finite differences.
    Checkgrad(CheckgradArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum SceneKind {
    Constant,
    Slanted,
    TwoLayer,
    Moving,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, value_enum, default_value_t = SceneKind::Constant)]
    kind: SceneKind,
    #[arg(long, default_value_t = 256)]
    width: usize,
    #[arg(long, default_value_t = 256)]
    height: usize,
    /// Stereo half-shift `s_x` of the (background) plane.
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    disparity: f64,
    /// Half-shift of the occluding square.
    #[arg(long, default_value_t = 4.0, allow_negative_numbers = true)]
    fg_disparity: f64,
    /// Side of the occluding square in pixels.
    #[arg(long, default_value_t = 96.0)]
    side: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    slope_x: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    slope_y: f64,
    /// Image motion per frame.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    motion_x: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    motion_y: f64,
    /// Standard deviation of additive Gaussian noise.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 1.0)]
    right_gain: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    right_offset: f64,
    /// Image used as texture instead of procedural noise.
    #[arg(long)]
    texture: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    frames: usize,
}

#[derive(Args, Debug)]
struct CheckgradArgs {
    #[arg(long, default_value_t = 16)]
    width: usize,
    #[arg(long, default_value_t = 16)]
    height: usize,
    #[arg(long, default_value_t = 2)]
    step: usize,
    /// Number of random instances, seeded `seed, seed + 1, ...`.
    #[arg(long, default_value_t = 1)]
    instances: u64,
    #[arg(long, default_value_t = 0.001)]
    eps_huber: f64,
    /// Central difference step; truncation error grows as its square.
    #[arg(long, default_value_t = 1e-5)]
    fd_step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, hide = true)]
    corrupt_warp_sign: bool,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.common.threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return 1;
        }
    };
    match pool.install(|| dispatch(&cli)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_solver_failure() {
                2
            } else {
                1
            }
        }
    }
}

fn dispatch(cli: &Cli) -> Result<i32> {
    let c = &cli.common;
    match &cli.command {
        Command::Flow { images, obj, gt, eval_margin } => {
            let cfg = resolve_config(c)?;
            let images = load_inputs(images, &cfg, 4)?;
            let imgs = [images[0].clone(), images[1].clone(), images[2].clone(), images[3].clone()];
            let rig = load_rig(&cfg)?;
            let out_dir = out_dir(&cfg)?;
            let out = pipeline_run(&cfg, rig.as_ref(), false, &out_dir, c.dump_debug, &imgs, None)?;
            let mut report = Report::new("flow", c);
            report.run(&out);
            if let Some(gt) = gt {
                score(&mut report, &out.result, gt, *eval_margin)?;
            }
            finish(&out_dir, &out.result, *obj, report)?;
            Ok(0)
        }
        Command::Stereo { images, obj } => {
            let cfg = resolve_config(c)?;
            let pair = load_inputs(images, &cfg, 2)?;
            let rig = load_rig(&cfg)?;
            let out_dir = out_dir(&cfg)?;
            let imgs = [pair[0].clone(), pair[1].clone(), pair[0].clone(), pair[1].clone()];
            let out = pipeline_run(&cfg, rig.as_ref(), true, &out_dir, c.dump_debug, &imgs, None)?;
            let mut report = Report::new("stereo", c);
            report.run(&out);
            finish(&out_dir, &out.result, *obj, report)?;
            Ok(0)
        }
        Command::Sequence { images, obj } => {
            let cfg = resolve_config(c)?;
            let paths = input_paths(images, &cfg);
            if paths.len() < 4 || !paths.len().is_multiple_of(2) {
                return Err(Error::InvalidParameter(format!(
                    "sequence needs left/right pairs of at least two frames, got {} images",
                    paths.len()
                )));
            }
            let frames: Vec<Image> = paths.iter().map(load_image).collect::<Result<_>>()?;
            let rig = load_rig(&cfg)?;
            let out_dir = out_dir(&cfg)?;
            let mut summary = Report::new("sequence", c);
            summary.push("windows", paths.len() / 2 - 1);
            let mut prev: Option<HierarchyState> = None;
            for k in 0..paths.len() / 2 - 1 {
                let imgs = [frames[2 * k].clone(), frames[2 * k + 1].clone(), frames[2 * k + 2].clone(), frames[2 * k + 3].clone()];
                let dir = out_dir.join(format!("window{k}"));
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                let out = pipeline_run(&cfg, rig.as_ref(), false, &dir, c.dump_debug, &imgs, prev.as_ref())?;
                let mut report = Report::new("flow", c);
                report.push("window", k);
                report.run(&out);
                summary.push(format!("window{k}.initial_energy"), out.report.initial_energy);
                summary.push(format!("window{k}.final_energy"), out.report.final_energy);
                finish(&dir, &out.result, *obj, report)?;
                prev = Some(out.state);
            }
            summary.save(&out_dir.join("report.txt"))?;
            Ok(0)
        }
        Command::Synth(args) => {
            synth(args, c)?;
            Ok(0)
        }
        Command::Checkgrad(args) => checkgrad(args, c.seed),
    }
}

/// Defaults, then the config file, then `--preset`, then individual flags,
/// then `--set` pairs.
fn resolve_config(c: &Common) -> Result<Config> {
    let mut cfg = match &c.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(p) = c.preset {
        cfg.set_preset(p);
    }
    let s = &mut cfg.schedule;
    if let Some(v) = c.levels {
        s.levels = v;
    }
    if let Some(v) = c.grid_step {
        s.grid_step = v;
    }
    if let Some(v) = &c.gn_iters {
        s.gn_iters = parse_list(v).map_err(|m| Error::Config(format!("--gn-iters: {m}")))?;
    }
    if let Some(v) = c.pcg_iters {
        s.pcg_iters = v;
    }
    if let Some(v) = c.patch_iters {
        s.patch_iters = v;
    }
    if let Some(v) = &c.calib {
        cfg.calib = Some(v.clone());
    }
    if let Some(v) = &c.out_dir {
        cfg.out_dir = Some(v.clone());
    }
    for kv in &c.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set `{kv}`: expected KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn input_paths(given: &[PathBuf], cfg: &Config) -> Vec<PathBuf> {
    if given.is_empty() {
        cfg.inputs.clone()
    } else {
        given.to_vec()
    }
}

fn load_inputs(given: &[PathBuf], cfg: &Config, n: usize) -> Result<Vec<Image>> {
    let paths = input_paths(given, cfg);
    if paths.len() != n {
        return Err(Error::InvalidParameter(format!("expected {n} input images, got {}", paths.len())));
    }
    paths.iter().map(load_image).collect()
}

fn load_rig(cfg: &Config) -> Result<Option<StereoRig>> {
    match &cfg.calib {
        Some(path) => Ok(Some(read_calibration(path)?)),
        None if cfg.params.w_epi > 0.0 => Err(Error::Calibration(format!(
            "w_epi = {} needs a calibration file (--calib), none was given",
            cfg.params.w_epi
        ))),
        None => Ok(None),
    }
}

fn out_dir(cfg: &Config) -> Result<PathBuf> {
    let dir = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("halfway-out"));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn pipeline_run(
    cfg: &Config,
    rig: Option<&StereoRig>,
    stereo_only: bool,
    out_dir: &Path,
    dump: bool,
    images: &[Image; 4],
    prev: Option<&HierarchyState>,
) -> Result<SceneFlowOutput> {
    let debug = out_dir.join("debug");
    if dump {
        std::fs::create_dir_all(&debug).map_err(|e| Error::io(&debug, e))?;
    }
    Pipeline {
        params: &cfg.params,
        schedule: &cfg.schedule,
        rig,
        stereo_only,
        dump_dir: dump.then_some(debug.as_path()),
    }
    .run(images, prev)
}

/// Writes `s.flo`, `m.flo`, `d.flo`, `disparity.pfm`, `depth.pfm` when
/// points were triangulated, `mesh.obj` on request, and `report.txt`.
fn finish(dir: &Path, result: &FlowResult, obj: bool, mut report: Report) -> Result<()> {
    let (w, h) = (result.width, result.height);
    for flow in Flow::ALL {
        write_flo(dir.join(format!("{}.flo", flow.name())), w, h, result.flow(flow))?;
    }
    write_pfm(dir.join("disparity.pfm"), w, h, &result.disparity)?;
    if let Some(points) = &result.points {
        let depth: Vec<f64> = points.iter().map(|p| p.map_or(f64::NAN, |p| p.z)).collect();
        write_pfm(dir.join("depth.pfm"), w, h, &depth)?;
    }
    if obj {
        let (v, f) = write_obj(dir.join("mesh.obj"), result)?;
        report.push("mesh.vertices", v);
        report.push("mesh.faces", f);
    }
    report.save(&dir.join("report.txt"))
}

fn score(report: &mut Report, result: &FlowResult, gt: &Path, margin: usize) -> Result<()> {
    let (w, h) = (result.width, result.height);
    let mut mask = interior_mask(w, h, margin);
    for v in 0..4 {
        let path = gt.join(format!("visible{v}.png"));
        if path.exists() {
            let img = load_image(&path)?;
            check_size(&path, img.width(), img.height(), w, h)?;
            mask.iter_mut().zip(img.data()).for_each(|(m, p)| *m &= *p > 0.5);
        }
    }
    report.push("eval.pixels", mask.iter().filter(|m| **m).count());
    for flow in Flow::ALL {
        let path = gt.join(format!("{}.flo", flow.name()));
        let (gw, gh, truth) = read_flo(&path)?;
        check_size(&path, gw, gh, w, h)?;
        let epe = endpoint_errors(result.flow(flow), &truth, Some(&mask));
        let name = flow.name();
        report.push(format!("epe.{name}.median"), percentile(&epe, 0.5));
        report.push(format!("epe.{name}.p90"), percentile(&epe, 0.9));
    }
    Ok(())
}

fn check_size(path: &Path, gw: usize, gh: usize, w: usize, h: usize) -> Result<()> {
    if (gw, gh) != (w, h) {
        return Err(Error::DimensionMismatch(format!("{}: {gw}x{gh}, expected {w}x{h}", path.display())));
    }
    Ok(())
}

fn synth(a: &SynthArgs, c: &Common) -> Result<()> {
    if a.frames < 2 {
        return Err(Error::InvalidParameter(format!("--frames {} (need at least 2)", a.frames)));
    }
    let (w, h, seed) = (a.width, a.height, c.seed);
    let motion = Vec2::new(a.motion_x, a.motion_y);
    let mut spec = match a.kind {
        SceneKind::Constant => SceneSpec::constant_disparity(w, h, a.disparity, seed),
        SceneKind::Slanted => SceneSpec::slanted(w, h, a.disparity, Vec2::new(a.slope_x, a.slope_y), seed),
        SceneKind::TwoLayer => SceneSpec::two_layer(w, h, a.disparity, a.fg_disparity, a.side, seed),
        SceneKind::Moving => SceneSpec::moving_plane(w, h, a.disparity, motion, seed),
    };
    if a.kind != SceneKind::Moving && motion != Vec2::zeros() {
        spec.layers.iter_mut().for_each(|l| l.velocity = motion);
    }
    if let Some(path) = &a.texture {
        spec.texture = Texture::Image(SplineImage::new(&load_image(path)?));
    }
    spec.noise = a.noise;
    spec.gain = [1.0, a.right_gain, 1.0, a.right_gain];
    spec.offset = [0.0, a.right_offset, 0.0, a.right_offset];
    spec.validate()?;

    let dir = c.out_dir.clone().unwrap_or_else(|| PathBuf::from("halfway-synth"));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let frames = spec.sequence(a.frames)?;
    for (k, [l, r]) in frames.iter().enumerate() {
        write_pfm(dir.join(format!("left{k}.pfm")), w, h, l.data())?;
        write_pfm(dir.join(format!("right{k}.pfm")), w, h, r.data())?;
    }
    for k in 0..a.frames - 1 {
        let scene = spec.window(k)?;
        let gt = dir.join("gt").join(format!("window{k}"));
        std::fs::create_dir_all(&gt).map_err(|e| Error::io(&gt, e))?;
        for flow in Flow::ALL {
            write_flo(gt.join(format!("{}.flo", flow.name())), w, h, scene.flow(flow))?;
        }
        for v in 0..4 {
            let mask = Image::from_fn(w, h, |x, y| if scene.visible[y * w + x][v] { 1.0 } else { 0.0 });
            save_png8(&mask, gt.join(format!("visible{v}.png")))?;
        }
    }
    write_calibration(dir.join("calib.txt"), &spec.rig())?;
    let mut report = Report::new("synth", c);
    report.push("kind", format!("{:?}", a.kind).to_lowercase());
    report.push("width", w);
    report.push("height", h);
    report.push("frames", a.frames);
    report.push("disparity", a.disparity);
    report.push("motion_x", a.motion_x);
    report.push("motion_y", a.motion_y);
    report.save(&dir.join("scene.txt"))
}

fn checkgrad(a: &CheckgradArgs, seed: u64) -> Result<i32> {
    let mut worst: Option<(u64, gradcheck::GradCheckReport)> = None;
    for i in 0..a.instances.max(1) {
        let opts = GradCheckOptions {
            width: a.width,
            height: a.height,
            step: a.step,
            seed: seed + i,
            eps_huber: a.eps_huber,
            h: a.fd_step,
        };
        let r = gradcheck::run(&opts, a.corrupt_warp_sign)?;
        if worst.as_ref().is_none_or(|(_, w)| r.max_rel_error.is_nan() || r.max_rel_error > w.max_rel_error) {
            worst = Some((opts.seed, r));
        }
    }
    let (s, r) = worst.expect("at least one instance");
    println!("instances={}", a.instances.max(1));
    println!("unknowns={}", r.unknowns);
    println!("residuals={}", r.residuals);
    println!("max_rel_error={:e}", r.max_rel_error);
    let pass = r.max_rel_error < a.tolerance;
    println!("pass={pass}");
    if pass {
        return Ok(0);
    }
    println!("worst.seed={s}");
    println!("worst.unknown={}", r.worst_unknown);
    println!("worst.residual={}", r.worst_residual);
    eprintln!(
        "gradient check failed: error {:e} at unknown {}, residual {} (seed {s})",
        r.max_rel_error, r.worst_unknown, r.worst_residual
    );
    Ok(3)
}

/// Ordered `key=value` lines, printed and saved.
struct Report {
    lines: Vec<(String, String)>,
}

impl Report {
    fn new(command: &str, c: &Common) -> Self {
        let mut r = Report { lines: Vec::new() };
        r.push("command", command);
        r.push("seed", c.seed);
        r
    }

    fn push(&mut self, key: impl Into<String>, value: impl Display) {
        self.lines.push((key.into(), value.to_string()));
    }

    fn run(&mut self, out: &SceneFlowOutput) {
        let RunReport {
            levels,
            initial_energy,
            final_energy,
            elapsed_ms,
        } = &out.report;
        self.push("width", out.result.width);
        self.push("height", out.result.height);
        self.push("levels", levels.len());
        for l in levels {
            let k = format!("level{}", l.level);
            self.push(format!("{k}.size"), format!("{}x{}", l.width, l.height));
            self.push(format!("{k}.nodes"), l.nodes);
            self.push(format!("{k}.unknowns"), l.unknowns);
            self.push(format!("{k}.residuals"), l.residuals);
            self.push(format!("{k}.gn_iters"), l.iterations.len());
            self.push(format!("{k}.energy_initial"), l.energy_initial);
            self.push(format!("{k}.energy_final"), l.energy_final);
            let occ: Vec<String> = l.occluded.iter().map(|n| n.to_string()).collect();
            self.push(format!("{k}.occluded"), occ.join(","));
            self.push(format!("{k}.elapsed_ms"), format!("{:.2}", l.elapsed_ms));
        }
        let finest = levels.last();
        self.push("unknowns", finest.map_or(0, |l| l.unknowns));
        self.push("residuals", finest.map_or(0, |l| l.residuals));
        self.push("initial_energy", initial_energy);
        self.push("final_energy", final_energy);
        self.push("max_abs_flow", out.result.max_abs());
        let visible = out.result.visible.iter().filter(|v| **v).count();
        self.push("visible_fraction", visible as f64 / out.result.visible.len() as f64);
        self.push("elapsed_ms", format!("{elapsed_ms:.2}"));
    }

    fn save(&self, path: &Path) -> Result<()> {
        let text: String = self.lines.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        print!("{text}");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
