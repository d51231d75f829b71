//! Command-line entry points: collision micro-benchmarks, contact-boundary
//! sweeps, and closed-loop episode runs. Everything emits CSV; plotting is
//! out of scope.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{
    gjk_intersect, lp_min_scaling, random_cuboid, sat_margin, ssat_margin_with, ssat_value,
    Cuboid, HalfSpace2, PoseParameterization, WhichBody,
};
use crate::model::{default_legs, InputVector};
use crate::planner::{CommandScript, PlannerConfig, Tripod};
use crate::safety::{
    build_body_collision_rows, build_foot_height_rows, build_foothold_rows,
    build_joint_limit_rows, build_stability_rows, build_toe_collision_rows, QpProblem, QpStatus,
    SafetyFilter,
};
use crate::simharness::{
    initial_state, load_scene, run_episode, verify_safety, EpisodeConfig, SceneFile, Toggles,
};
use crate::smoothmath::{AbsVariant, MaxVariant, SmoothingParams};
use crate::{Error, Result};

#[derive(Parser)]
#[command(name = "locofilter", version, about = "Safety-filtered locomotion toolkit")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Collision-margin micro-benchmarks over random cuboid pairs.
    Bench {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Number of cuboid pairs; the same stream feeds every method.
        #[arg(long, default_value_t = 100_000)]
        n: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write bench.csv under --out (or the working directory).
        #[arg(long)]
        csv: bool,
    },
    /// Contact-boundary sweep of a tilted cuboid pair.
    Boundary {
        /// Smoothing sharpness values to sweep.
        #[arg(long, value_delimiter = ',', default_values_t = vec![10.0, 50.0, 100.0])]
        alphas: Vec<f64>,
        /// Sweep resolution in degrees.
        #[arg(long, default_value_t = 1.0)]
        step: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Closed-loop episode runs emitting CSV logs.
    Run {
        #[command(subcommand)]
        mode: RunMode,
    },
}

#[derive(Subcommand)]
enum RunMode {
    /// Single episode with the configured constraint toggles.
    Episode(RunArgs),
    /// Paired runs: all constraints on, then all off.
    Ablation(RunArgs),
    /// Synthetic full-load ticks; per-tick assembly and solve times.
    Timing {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 500)]
        ticks: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Scene JSON (planes / obstacles / stairs).
    #[arg(long)]
    scene: PathBuf,
    /// Velocity script JSON; defaults to a constant 0.25 m/s crawl.
    #[arg(long)]
    script: Option<PathBuf>,
    /// Episode config JSON; defaults apply field-wise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Bench { seed, n, out, csv } => {
            let report = bench_collision(seed, n)?;
            print!("{}", report.render_table());
            if csv {
                let path = out_path(out.as_deref(), "bench.csv")?;
                fs::write(&path, report.render_csv())?;
                println!("wrote {}", path.display());
            }
            Ok(())
        }
        Command::Boundary { alphas, step, out } => {
            let (a, b) = default_boundary_boxes();
            let points = boundary_sweep(&a, &b, &alphas, step)?;
            let path = out_path(out.as_deref(), "boundary.csv")?;
            let mut w = Vec::new();
            writeln!(w, "method,alpha,theta_deg,radius,x,y")?;
            for p in &points {
                writeln!(
                    w,
                    "{},{},{},{},{},{}",
                    p.method.name(),
                    p.method.alpha(),
                    p.theta_deg,
                    p.radius,
                    p.x,
                    p.y
                )?;
            }
            fs::write(&path, w)?;
            println!("wrote {} ({} points)", path.display(), points.len());
            Ok(())
        }
        Command::Run { mode } => match mode {
            RunMode::Episode(args) => run_episode_cmd(&args),
            RunMode::Ablation(args) => run_ablation_cmd(&args),
            RunMode::Timing { seed, ticks, out } => {
                let report = timing_run(seed, ticks)?;
                let path = out_path(out.as_deref(), "timing.csv")?;
                fs::write(&path, report.render_csv())?;
                println!(
                    "{} ticks, {} rows: assembly median {:.1} us, solve median {:.1} us, total median {:.1} us",
                    report.ticks.len(),
                    report.rows_per_tick,
                    report.median_assembly_us,
                    report.median_solve_us,
                    report.median_total_us
                );
                println!("wrote {}", path.display());
                Ok(())
            }
        },
    }
}

fn out_path(dir: Option<&Path>, name: &str) -> Result<PathBuf> {
    let dir = dir.unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    Ok(dir.join(name))
}

fn load_config(path: Option<&Path>) -> Result<EpisodeConfig> {
    let cfg = match path {
        None => EpisodeConfig::default(),
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn load_script(path: Option<&Path>, planner: &PlannerConfig) -> Result<CommandScript> {
    match path {
        None => Ok(CommandScript::constant(0.25, 0.0)),
        Some(p) => {
            let raw: CommandScript = serde_json::from_str(&fs::read_to_string(p)?)?;
            CommandScript::new(raw.entries, planner.v_max, planner.omega_max)
        }
    }
}

fn run_episode_cmd(args: &RunArgs) -> Result<()> {
    let scene = load_scene(&args.scene)?;
    let cfg = load_config(args.config.as_deref())?;
    let script = load_script(args.script.as_deref(), &cfg.planner)?;
    let log = run_episode(&scene, &script, &cfg)?;
    let path = out_path(args.out.as_deref(), "episode.csv")?;
    let mut buf = Vec::new();
    log.write_csv(&mut buf)?;
    fs::write(&path, buf)?;
    let report = verify_safety(&log, &scene, &cfg);
    println!("{report}");
    println!("wrote {}", path.display());
    Ok(())
}

fn run_ablation_cmd(args: &RunArgs) -> Result<()> {
    let scene = load_scene(&args.scene)?;
    let base = load_config(args.config.as_deref())?;
    let script = load_script(args.script.as_deref(), &base.planner)?;
    for (name, toggles) in [("cbf_on", Toggles::default()), ("cbf_off", Toggles::all_off())] {
        let cfg = EpisodeConfig { toggles, ..base.clone() };
        let log = run_episode(&scene, &script, &cfg)?;
        let path = out_path(args.out.as_deref(), &format!("{name}.csv"))?;
        let mut buf = Vec::new();
        log.write_csv(&mut buf)?;
        fs::write(&path, buf)?;
        let report = verify_safety(&log, &scene, &cfg);
        println!("{name}: {report}");
        println!("wrote {}", path.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Benchmarks

/// Per-pair wall-time statistics in microseconds.
#[derive(Clone, Copy, Debug)]
pub struct MethodStats {
    pub mean_us: f64,
    pub median_us: f64,
    pub p99_us: f64,
}

#[derive(Clone, Debug)]
pub struct BenchLine {
    pub method: &'static str,
    pub evaluate: MethodStats,
    /// Only the smooth margins have a differentiate path.
    pub evaluate_diff: Option<MethodStats>,
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub n: usize,
    pub seed: u64,
    /// Harness overhead per pair (empty-method baseline), already subtracted
    /// from every line.
    pub overhead_us: f64,
    pub lines: Vec<BenchLine>,
    /// Median SSAT(LSE+xtanh) evaluate over median SAT evaluate.
    pub ratio_ssat_sat: f64,
    /// Median LP evaluate over median SSAT(LSE+xtanh) evaluate.
    pub ratio_lp_ssat: f64,
}

const BATCH: usize = 32;

fn stats(mut samples: Vec<f64>) -> MethodStats {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = samples.len();
    MethodStats {
        mean_us: samples.iter().sum::<f64>() / n as f64,
        median_us: samples[n / 2],
        p99_us: samples[((n as f64 * 0.99) as usize).min(n - 1)],
    }
}

/// One method's turn per round: long enough to re-warm caches and branch
/// predictors after the other methods ran, short enough that clock drift
/// over the run is shared by all methods instead of biasing whole
/// sequential blocks.
const SLICE: usize = BATCH * 256;

/// Batched per-pair timings (us), round-robin across methods one slice at a
/// time. The first few batches of each slice re-warm the method's code and
/// are discarded.
fn time_interleaved(
    pairs: &[(Cuboid, Cuboid)],
    methods: &mut [Box<dyn FnMut(&(Cuboid, Cuboid)) + '_>],
) -> Vec<Vec<f64>> {
    let mut samples = vec![Vec::with_capacity(pairs.len() / BATCH + 1); methods.len()];
    for slice in pairs.chunks(SLICE) {
        for (m, f) in methods.iter_mut().enumerate() {
            for (bi, batch) in slice.chunks(BATCH).enumerate() {
                let t0 = Instant::now();
                for p in batch {
                    f(p);
                }
                let us = t0.elapsed().as_secs_f64() * 1e6 / batch.len() as f64;
                if bi >= 4 {
                    samples[m].push(us);
                }
            }
        }
    }
    samples
}

fn subtract(stats: MethodStats, overhead: f64) -> MethodStats {
    MethodStats {
        mean_us: (stats.mean_us - overhead).max(0.0),
        median_us: (stats.median_us - overhead).max(0.0),
        p99_us: (stats.p99_us - overhead).max(0.0),
    }
}

/// Time every collision method over the same random cuboid stream.
pub fn bench_collision(seed: u64, n: usize) -> Result<BenchReport> {
    if n < 100_000 {
        return Err(Error::InvalidParam("bench needs at least 1e5 pairs".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs: Vec<(Cuboid, Cuboid)> = (0..n)
        .map(|_| (random_cuboid(&mut rng), random_cuboid(&mut rng)))
        .collect();
    let sp = SmoothingParams::default();
    let wrt = PoseParameterization::full_pose(WhichBody::B);

    let eval_ssat = |maxv: MaxVariant, absv: AbsVariant| {
        let sp = &sp;
        move |p: &(Cuboid, Cuboid)| {
            std::hint::black_box(ssat_value(&p.0, &p.1, sp, maxv, absv));
        }
    };
    let diff_ssat = |maxv: MaxVariant, absv: AbsVariant| {
        let sp = &sp;
        let wrt = wrt.clone();
        move |p: &(Cuboid, Cuboid)| {
            std::hint::black_box(ssat_margin_with(&p.0, &p.1, sp, &wrt, maxv, absv).unwrap());
        }
    };

    let variants = [
        ("SSAT(LSE+xtanh)", MaxVariant::Lse, AbsVariant::XTanh),
        ("SSAT(LSE+sqrt)", MaxVariant::Lse, AbsVariant::Sqrt),
        ("SSAT(Boltz+xtanh)", MaxVariant::Boltzmann, AbsVariant::XTanh),
    ];
    let mut methods: Vec<Box<dyn FnMut(&(Cuboid, Cuboid)) + '_>> = vec![
        Box::new(|p| {
            std::hint::black_box(p);
        }),
        Box::new(|p| {
            std::hint::black_box(sat_margin(&p.0, &p.1));
        }),
    ];
    for &(_, maxv, absv) in &variants {
        methods.push(Box::new(eval_ssat(maxv, absv)));
        methods.push(Box::new(diff_ssat(maxv, absv)));
    }
    methods.push(Box::new(|p| {
        std::hint::black_box(gjk_intersect(&p.0, &p.1));
    }));
    methods.push(Box::new(|p| {
        std::hint::black_box(lp_min_scaling(&p.0, &p.1).ok());
    }));

    let mut samples = time_interleaved(&pairs, &mut methods).into_iter();
    let oh = stats(samples.next().unwrap()).median_us;

    let mut lines = Vec::new();
    lines.push(BenchLine {
        method: "SAT",
        evaluate: subtract(stats(samples.next().unwrap()), oh),
        evaluate_diff: None,
    });
    for (name, _, _) in variants {
        lines.push(BenchLine {
            method: name,
            evaluate: subtract(stats(samples.next().unwrap()), oh),
            evaluate_diff: Some(subtract(stats(samples.next().unwrap()), oh)),
        });
    }
    lines.push(BenchLine {
        method: "GJK",
        evaluate: subtract(stats(samples.next().unwrap()), oh),
        evaluate_diff: None,
    });
    lines.push(BenchLine {
        method: "LP",
        evaluate: subtract(stats(samples.next().unwrap()), oh),
        evaluate_diff: None,
    });

    let sat_med = lines[0].evaluate.median_us;
    let ssat_med = lines[1].evaluate.median_us;
    let lp_med = lines.last().unwrap().evaluate.median_us;
    Ok(BenchReport {
        n,
        seed,
        overhead_us: oh,
        lines,
        ratio_ssat_sat: ssat_med / sat_med,
        ratio_lp_ssat: lp_med / ssat_med,
    })
}

impl BenchReport {
    pub fn line(&self, method: &str) -> &BenchLine {
        self.lines.iter().find(|l| l.method == method).unwrap()
    }

    pub fn render_table(&self) -> String {
        let mut s = format!(
            "collision bench: {} pairs, seed {}, overhead {:.4} us/pair (subtracted)\n\
             {:<20} {:>10} {:>10} {:>10}   {:>10} {:>10} {:>10}\n",
            self.n, self.seed, self.overhead_us,
            "method", "eval mean", "median", "p99", "diff mean", "median", "p99",
        );
        for l in &self.lines {
            s += &format!(
                "{:<20} {:>10.4} {:>10.4} {:>10.4}",
                l.method, l.evaluate.mean_us, l.evaluate.median_us, l.evaluate.p99_us
            );
            if let Some(d) = l.evaluate_diff {
                s += &format!("   {:>10.4} {:>10.4} {:>10.4}", d.mean_us, d.median_us, d.p99_us);
            }
            s += "\n";
        }
        s += &format!(
            "ratios: SSAT/SAT = {:.2}, LP/SSAT = {:.2}\n",
            self.ratio_ssat_sat, self.ratio_lp_ssat
        );
        s
    }

    pub fn render_csv(&self) -> String {
        let mut s = String::from(
            "method,eval_mean_us,eval_median_us,eval_p99_us,diff_mean_us,diff_median_us,diff_p99_us\n",
        );
        for l in &self.lines {
            s += &format!(
                "{},{},{},{}",
                l.method, l.evaluate.mean_us, l.evaluate.median_us, l.evaluate.p99_us
            );
            match l.evaluate_diff {
                Some(d) => s += &format!(",{},{},{}\n", d.mean_us, d.median_us, d.p99_us),
                None => s += ",,,\n",
            }
        }
        s
    }
}

// ---------------------------------------------------------------------------
// Boundary sweep

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SweepMethod {
    Sat,
    Lse(f64),
    Boltzmann(f64),
}

impl SweepMethod {
    pub fn name(self) -> &'static str {
        match self {
            SweepMethod::Sat => "sat",
            SweepMethod::Lse(_) => "lse",
            SweepMethod::Boltzmann(_) => "boltzmann",
        }
    }

    pub fn alpha(self) -> f64 {
        match self {
            SweepMethod::Sat => f64::INFINITY,
            SweepMethod::Lse(a) | SweepMethod::Boltzmann(a) => a,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundaryPoint {
    pub method: SweepMethod,
    pub theta_deg: f64,
    /// Distance of B's center from A's center at first contact.
    pub radius: f64,
    pub x: f64,
    pub y: f64,
}

/// The Fig.-6 style pair: axis-aligned A at the origin, B yawed 10 degrees,
/// swept in the xy plane at equal height.
pub fn default_boundary_boxes() -> (Cuboid, Cuboid) {
    let a = Cuboid::axis_aligned(Vector3::zeros(), Vector3::new(0.5, 0.3, 0.2)).unwrap();
    let b = Cuboid::from_yaw_pitch(
        Vector3::zeros(),
        10f64.to_radians(),
        0.0,
        Vector3::new(0.4, 0.25, 0.2),
    )
    .unwrap();
    (a, b)
}

/// Margin of the pair with B's center moved to `c` (z unchanged).
pub fn sweep_margin(a: &Cuboid, b: &Cuboid, method: SweepMethod, c: Vector2<f64>) -> f64 {
    let mut b = b.clone();
    b.center.x = c.x;
    b.center.y = c.y;
    match method {
        SweepMethod::Sat => sat_margin(a, &b),
        SweepMethod::Lse(alpha) | SweepMethod::Boltzmann(alpha) => {
            let sp = SmoothingParams {
                alpha_max: alpha,
                alpha_abs: alpha,
                ..SmoothingParams::default()
            };
            let maxv = if matches!(method, SweepMethod::Lse(_)) {
                MaxVariant::Lse
            } else {
                MaxVariant::Boltzmann
            };
            ssat_value(a, &b, &sp, maxv, AbsVariant::XTanh)
        }
    }
}

/// Radial bisection for the h = 0 contact radius along direction `theta`.
fn contact_radius(a: &Cuboid, b: &Cuboid, method: SweepMethod, theta: f64) -> Result<f64> {
    let dir = Vector2::new(theta.cos(), theta.sin());
    let h0 = sweep_margin(a, b, method, Vector2::zeros());
    if h0 >= 0.0 {
        return Err(Error::Numerical(
            "boundary sweep: boxes not overlapping at zero offset".into(),
        ));
    }
    let mut lo = 0.0;
    let mut hi = 2.0;
    while sweep_margin(a, b, method, dir * hi) <= 0.0 {
        hi *= 2.0;
        if hi > 64.0 {
            return Err(Error::Numerical("boundary sweep: no sign change".into()));
        }
    }
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if sweep_margin(a, b, method, dir * mid) <= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Sweep the contact boundary for SAT and both smooth variants at each alpha.
pub fn boundary_sweep(
    a: &Cuboid,
    b: &Cuboid,
    alphas: &[f64],
    step_deg: f64,
) -> Result<Vec<BoundaryPoint>> {
    if !(step_deg > 0.0 && step_deg <= 90.0) {
        return Err(Error::InvalidParam("sweep step must be in (0, 90] deg".into()));
    }
    let mut methods = vec![SweepMethod::Sat];
    for &al in alphas {
        if !(al > 0.0) {
            return Err(Error::InvalidParam("alpha must be positive".into()));
        }
        methods.push(SweepMethod::Lse(al));
        methods.push(SweepMethod::Boltzmann(al));
    }
    let steps = (360.0 / step_deg).round() as usize;
    let mut out = Vec::with_capacity(methods.len() * steps);
    for method in methods {
        for k in 0..steps {
            let theta_deg = k as f64 * step_deg;
            let theta = theta_deg.to_radians();
            let r = contact_radius(a, b, method, theta)?;
            out.push(BoundaryPoint {
                method,
                theta_deg,
                radius: r,
                x: r * theta.cos(),
                y: r * theta.sin(),
            });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Synthetic timing load

#[derive(Clone, Copy, Debug)]
pub struct TimingTick {
    /// Row counts in `simharness::KIND_ORDER` order.
    pub rows_per_kind: [usize; 6],
    pub assembly_us: f64,
    pub solve_us: f64,
    pub qp_optimal: bool,
}

#[derive(Clone, Debug)]
pub struct TimingReport {
    pub rows_per_tick: usize,
    pub ticks: Vec<TimingTick>,
    pub median_assembly_us: f64,
    pub median_solve_us: f64,
    pub median_total_us: f64,
}

/// Worst-case constraint census the load below reproduces: 24 joint rows,
/// 53 body rows, 159 toe rows (3 swing legs), 15 foothold rows (3 support
/// legs, 5 edges), 6 foot-height rows, 12 stability rows.
pub const TIMING_ROWS: usize = 269;

/// Repeatedly assemble and solve a full-load tick: a standing robot boxed in
/// by 53 overhead slabs, each close enough that no toe row is pruned.
pub fn timing_run(seed: u64, ticks: usize) -> Result<TimingReport> {
    if ticks == 0 {
        return Err(Error::Empty("timing run needs at least one tick"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let legs = default_legs();
    let ground = crate::planner::Plane {
        id: 0,
        height: 0.0,
        polygon: vec![
            Vector2::new(-5.0, -5.0),
            Vector2::new(5.0, -5.0),
            Vector2::new(5.0, 5.0),
            Vector2::new(-5.0, 5.0),
        ],
    };
    let scene = SceneFile { planes: vec![ground], ..Default::default() }.build()?;
    let cfg = EpisodeConfig::default();
    let x = initial_state(&scene, &cfg, &legs);

    // Slabs hover 1.6..1.75 m up: outside every toe's superellipsoid but
    // inside its pruning band, and clear of the body box.
    let obstacles: Vec<Cuboid> = (0..53)
        .map(|_| {
            Cuboid::axis_aligned(
                Vector3::new(
                    rng.gen_range(-0.1..0.1),
                    rng.gen_range(-0.1..0.1),
                    rng.gen_range(1.60..1.75),
                ),
                Vector3::new(3.0, 3.0, 1.0),
            )
            .unwrap()
        })
        .collect();

    let mut swing = [false; 6];
    for leg in Tripod::A.legs() {
        swing[leg.index()] = true;
    }
    let constrained = swing.map(|s| !s);
    // Pentagon foothold region around the stance, positive-margin inside.
    let region: Vec<HalfSpace2> = (0..5)
        .map(|k| {
            let ang = k as f64 * std::f64::consts::TAU / 5.0;
            HalfSpace2 { a: Vector2::new(-ang.cos(), -ang.sin()), b: 3.0 }
        })
        .collect();
    let floors = [-1e-3; 6];

    let mut filter = SafetyFilter::new();
    let mut out = Vec::with_capacity(ticks);
    for _ in 0..ticks {
        let t0 = Instant::now();
        let mut rows = build_joint_limit_rows(&x, &legs, &cfg.safety);
        let mut per_kind = [rows.len(), 0, 0, 0, 0, 0];
        let body = build_body_collision_rows(&x, &obstacles, &cfg.safety);
        per_kind[1] = body.len();
        rows.extend(body);
        let toe = build_toe_collision_rows(&x, &obstacles, &legs, &swing, &cfg.safety);
        per_kind[2] = toe.len();
        rows.extend(toe);
        let foothold = build_foothold_rows(&x, &region, &legs, &constrained, &cfg.safety);
        per_kind[3] = foothold.len();
        rows.extend(foothold);
        let height = build_foot_height_rows(&x, &floors, &cfg.safety);
        per_kind[4] = height.len();
        rows.extend(height);
        let stab = build_stability_rows(&x, &legs, &cfg.safety);
        per_kind[5] = stab.len();
        rows.extend(stab);
        let assembly_us = t0.elapsed().as_secs_f64() * 1e6;

        if rows.len() != TIMING_ROWS {
            return Err(Error::Numerical(format!(
                "synthetic load produced {} rows, expected {TIMING_ROWS} ({per_kind:?})",
                rows.len()
            )));
        }

        let mut u_ref = InputVector::zeros();
        for v in u_ref.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let problem = QpProblem::new(u_ref, cfg.safety.w_u, rows, cfg.safety.input_limits);
        let t1 = Instant::now();
        let sol = filter.solve(&problem);
        let solve_us = t1.elapsed().as_secs_f64() * 1e6;
        out.push(TimingTick {
            rows_per_kind: per_kind,
            assembly_us,
            solve_us,
            qp_optimal: sol.status == QpStatus::Optimal,
        });
    }

    let median = |f: &dyn Fn(&TimingTick) -> f64| {
        let mut v: Vec<f64> = out.iter().map(f).collect();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[v.len() / 2]
    };
    Ok(TimingReport {
        rows_per_tick: TIMING_ROWS,
        median_assembly_us: median(&|t| t.assembly_us),
        median_solve_us: median(&|t| t.solve_us),
        median_total_us: median(&|t| t.assembly_us + t.solve_us),
        ticks: out,
    })
}

impl TimingReport {
    pub fn render_csv(&self) -> String {
        let mut s = String::from(
            "tick,joint,body,toe,foothold,height,stability,assembly_us,solve_us,total_us,qp_optimal\n",
        );
        for (i, t) in self.ticks.iter().enumerate() {
            let k = t.rows_per_kind;
            s += &format!(
                "{i},{},{},{},{},{},{},{},{},{},{}\n",
                k[0], k[1], k[2], k[3], k[4], k[5],
                t.assembly_us,
                t.solve_us,
                t.assembly_us + t.solve_us,
                t.qp_optimal
            );
        }
        s
    }
}
