//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `ACCEPTANCE_ONLY=2,3` restricts the run to the listed criteria.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng as _;

use isarlab::config::ExperimentConfig;
use isarlab::experiment::{run_experiment, Command, RunOptions, RunSummary};
use isarlab::report::{compare_runs, median, seed_rows};
use isarlab_core::autodiff::gradcheck::{check_all, Tolerance};
use isarlab_core::autodiff::{backward, Tensor, Var};
use isarlab_core::env::{generate_world, AltitudeLevel, Task};
use isarlab_core::invariants;
use isarlab_core::isar::{meta_objective, run_episode, Algorithm, GradMode, IsarConfig};
use isarlab_core::policy_net::{init_params, AdamState, LayoutEntry, NetConfig, ParamVars, ParameterVector, PolicyNet};
use isarlab_core::rl::{HyperParams, SurrogateLoss};
use isarlab_core::seed;

type Outcome = Result<String, String>;

fn workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get()).min(4)
}

fn config(out: &Path, body: &str) -> ExperimentConfig {
    let text = format!("schema_version = 1\nout_dir = \"{}\"\n{body}", out.display());
    ExperimentConfig::from_toml_str(&text).unwrap_or_else(|e| panic!("acceptance config: {e}\n{text}"))
}

fn run(cfg: &ExperimentConfig, cmd: Command) -> Result<RunSummary, String> {
    run_experiment(cfg, cmd, &RunOptions::default()).map_err(|e| e.to_string())
}

fn fmt_rows(s: &RunSummary) -> String {
    seed_rows(&s.seeds)
        .iter()
        .map(|r| format!("{}{}", r.episodes, if r.censored { "*" } else { "" }))
        .collect::<Vec<_>>()
        .join(",")
}

fn run_median(s: &RunSummary) -> f64 {
    median(&seed_rows(&s.seeds).iter().map(|r| r.episodes as f64).collect::<Vec<_>>())
}

// 1 ──────────────────────────────────────────────────────────────────────────────

fn autodiff_gradients() -> Outcome {
    let t = Instant::now();
    let reports = check_all(100, 20_240_601, Tolerance::default()).map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();
    let failed: Vec<String> = reports.iter().filter(|r| !r.passed()).map(|r| format!("{}: {}", r.op, r.failures[0])).collect();
    let worst1 = reports.iter().map(|r| r.worst_first).fold(0.0, f64::max);
    let worst2 = reports.iter().map(|r| r.worst_second).fold(0.0, f64::max);
    let detail = format!(
        "{} ops x 100 cases; worst rel err above the abs floor {worst1:.1e} (1st, tol 1e-4) / {worst2:.1e} (2nd, tol 1e-3); {:.1}s",
        reports.len(),
        elapsed.as_secs_f64()
    );
    if !failed.is_empty() {
        return Err(format!("{detail}; failures: {}", failed.join("; ")));
    }
    if elapsed > Duration::from_secs(60) {
        return Err(format!("{detail}; exceeds 60 s"));
    }
    Ok(detail)
}

// 2 ──────────────────────────────────────────────────────────────────────────────

struct Quadratic(Vec<f64>);

impl SurrogateLoss for Quadratic {
    fn loss(&self, p: &ParamVars) -> isarlab_core::Result<Var> {
        let d = p.vars()[0].sub(&Var::constant(Tensor::vector(self.0.clone())))?;
        Ok(d.mul(&d)?.sum().scalar_mul(0.5))
    }
}

fn meta_gradient_oracle() -> Outcome {
    let mut rng = seed::rng(77);
    let trials = 2000;
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let dim = rng.gen_range(1..=8);
        let k = rng.gen_range(1..=3);
        let alpha: f64 = rng.gen_range(1e-6..1.0);
        let phi: Vec<f64> = (0..dim).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let cs: Vec<Vec<f64>> = (0..k).map(|_| (0..dim).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
        let point = ParameterVector::from_flat(vec![LayoutEntry::new("w".into(), vec![dim])], phi.clone()).unwrap();
        let losses: Vec<Quadratic> = cs.iter().cloned().map(Quadratic).collect();
        let objs: Vec<&dyn SurrogateLoss> = losses.iter().map(|q| q as &dyn SurrogateLoss).collect();
        for (mode, factor) in [(GradMode::ExactSecondOrder, (1.0 - alpha).powi(2)), (GradMode::FirstOrder, 1.0 - alpha)] {
            let vars = point.to_vars(true);
            let loss = meta_objective(&vars, &objs, alpha, mode).map_err(|e| e.to_string())?;
            let got = vars.gradient(&backward(&loss, false).map_err(|e| e.to_string())?);
            for (d, g) in got.flat().iter().enumerate() {
                let expected: f64 = cs.iter().map(|c| factor * (phi[d] - c[d])).sum();
                let err = (g - expected).abs();
                worst = worst.max(err);
                if err > 1e-10 {
                    return Err(format!("trial {trial} {mode:?} dim {d}: {g} vs {expected}"));
                }
            }
        }
    }
    Ok(format!("{trials} random (alpha, K, dim) cases, both modes, max abs err {worst:.1e}"))
}

// 3 ──────────────────────────────────────────────────────────────────────────────

fn structural_reductions() -> Outcome {
    let world = std::sync::Arc::new(generate_world(12, 12, 0.15, (10.0, 100.0), 5).map_err(|e| e.to_string())?);
    let occ = world.render_level(&AltitudeLevel::low());
    let target = world.full_region().cells().filter(|&(x, y)| !occ.is_blocked(x, y)).nth(40).ok_or("no target")?;
    let task = Task::full(world, AltitudeLevel::low(), target, 30).map_err(|e| e.to_string())?;
    let cfg = NetConfig { obs_dim: task.obs_dim(), embed_dim: 16, n_hidden: 1, n_actions: 4 };
    let net = PolicyNet::new(cfg.clone()).map_err(|e| e.to_string())?;
    let isar = |n: usize, k: usize, alpha: f64, beta: f64, mode: GradMode| IsarConfig {
        hyper: HyperParams { segment_len: n, adapt_steps: k, alpha, beta, max_steps: 30, ..Default::default() },
        grad_mode: mode,
        trailing_window: true,
    };
    let episode = |alg, phi: &ParameterVector, c: &IsarConfig, s: u64| {
        run_episode(alg, &net, phi, &AdamState::for_params(phi), &task, c, &mut seed::rng(s)).map_err(|e| e.to_string())
    };
    let trials = 20;
    let mut worst: f64 = 0.0;
    for s in 0..trials {
        let phi = init_params(&cfg, 1000 + s).map_err(|e| e.to_string())?;
        // (a) one segment spanning the episode, K = 1.
        for mode in [GradMode::ExactSecondOrder, GradMode::FirstOrder] {
            let c = isar(30, 1, 0.05, 1e-2, mode);
            let (a, b) = (episode(Algorithm::Isar, &phi, &c, s)?, episode(Algorithm::Baseline, &phi, &c, s)?);
            if a.updated_phi != b.updated_phi {
                return Err(format!("(a) trial {s} {mode:?}: ISAR and baseline phi differ"));
            }
        }
        // (b) alpha = 0.
        let a = episode(Algorithm::Isar, &phi, &isar(5, 3, 0.0, 1e-2, GradMode::ExactSecondOrder), s)?;
        let b = episode(Algorithm::Isar, &phi, &isar(5, 3, 0.0, 1e-2, GradMode::FirstOrder), s)?;
        for (x, y) in a.updated_phi.flat().iter().zip(b.updated_phi.flat()) {
            worst = worst.max((x - y).abs());
        }
        if worst > 1e-12 {
            return Err(format!("(b) trial {s}: exact and first-order differ by {worst:.1e}"));
        }
        // (c) beta = 0.
        for alg in [Algorithm::Isar, Algorithm::Baseline, Algorithm::A3c] {
            let out = episode(alg, &phi, &isar(5, 3, 0.05, 0.0, GradMode::ExactSecondOrder), s)?;
            if out.updated_phi != phi {
                return Err(format!("(c) trial {s} {alg:?}: phi changed with beta = 0"));
            }
        }
    }
    Ok(format!("{trials} episodes each: (a) bit-identical, (b) max diff {worst:.1e}, (c) phi unchanged"))
}

// 4 ──────────────────────────────────────────────────────────────────────────────

fn a3c_learnability(out: &Path) -> Outcome {
    let t = Instant::now();
    let cfg = config(
        out,
        &format!(
            r#"
run_id = "c4-a3c"
algorithm = "a3c"
seeds = [0, 1, 2, 3, 4]
workers = {}
[world]
width = 16
height = 16
obstacle_density = 0.0
[task]
max_steps = 70
[training]
max_episodes = 20000
checkpoint_every = 100000
"#,
            workers()
        ),
    );
    let s = run(&cfg, Command::Train)?;
    let converged = s.seeds.iter().filter(|x| x.converged()).count();
    let elapsed = t.elapsed();
    let detail = format!("{converged}/5 seeds converged (episodes {}), {:.0}s", fmt_rows(&s), elapsed.as_secs_f64());
    if converged >= 4 && elapsed < Duration::from_secs(15 * 60) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// 5 ──────────────────────────────────────────────────────────────────────────────

fn isar_vs_baseline(out: &Path) -> Outcome {
    let t = Instant::now();
    let mut isar_all = Vec::new();
    let mut base_all = Vec::new();
    let mut good_worlds = 0;
    let mut lines = Vec::new();
    for world_seed in [11u64, 12, 13] {
        let mut dirs = Vec::new();
        for alg in ["baseline", "isar"] {
            let cfg = config(
                out,
                &format!(
                    r#"
run_id = "c5-w{world_seed}-{alg}"
algorithm = "{alg}"
seeds = [0, 1, 2, 3, 4]
workers = {}
[world]
width = 32
height = 32
obstacle_density = 0.2
seed = {world_seed}
[task]
max_steps = 70
[hyper]
alpha = 1e-3
beta = 1e-3
[isar]
grad_mode = "first_order"
[training]
max_episodes = 10000
checkpoint_every = 100000
"#,
                    workers()
                ),
            );
            let s = run(&cfg, Command::Train)?;
            let rows = seed_rows(&s.seeds);
            let eps = rows.iter().map(|r| r.episodes as f64);
            if alg == "isar" { isar_all.extend(eps) } else { base_all.extend(eps) }
            dirs.push(cfg.run_dir());
        }
        let report = compare_runs(&[dirs[0].as_path(), dirs[1].as_path()]).map_err(|e| e.to_string())?;
        let (b, i) = (&report.variants[0], &report.variants[1]);
        let ratio = i.median / b.median;
        good_worlds += (ratio <= 0.8) as usize;
        lines.push(format!("world {world_seed}: isar {:.0} vs baseline {:.0} (ratio {ratio:.2})", i.median, b.median));
    }
    let (mi, mb) = (median(&isar_all), median(&base_all));
    let detail = format!(
        "{}; pooled median isar {mi:.0} vs baseline {mb:.0}; {good_worlds}/3 worlds at ratio <= 0.8; {:.0}s",
        lines.join("; "),
        t.elapsed().as_secs_f64()
    );
    if mi <= mb && good_worlds >= 2 && t.elapsed() < Duration::from_secs(2 * 3600) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// 6 ──────────────────────────────────────────────────────────────────────────────

const C6_WORLD: &str = r#"
[world]
width = 48
height = 48
obstacle_density = 0.3
seed = 7
[hyper]
alpha = 1e-3
beta = 1e-3
eta = 1e-3
[isar]
grad_mode = "first_order"
"#;

fn curriculum_vs_scratch(out: &Path) -> Outcome {
    let t = Instant::now();
    let scratch = config(
        out,
        &format!(
            r#"
run_id = "c6-scratch"
seeds = [0, 1, 2]
workers = {}
[task]
level = "low"
max_steps = 120
[training]
max_episodes = 10000
checkpoint_every = 100000
{C6_WORLD}"#,
            workers()
        ),
    );
    let curriculum = config(
        out,
        &format!(
            r#"
run_id = "c6-curriculum"
seeds = [0, 1, 2]
workers = {}
[training]
checkpoint_every = 100000
[meta]
tasks = 8
region_size = 16
max_steps = 70
level = "meta"
batch_size = 8
max_iterations = 25
[curriculum]
levels = ["high", "mid", "low"]
budgets = [5000, 5000, 20000]
max_steps = 120
meta_train = true
{C6_WORLD}"#,
            workers()
        ),
    );
    let s = run(&scratch, Command::Train)?;
    let c = run(&curriculum, Command::Curriculum)?;
    let (ms, mc) = (run_median(&s), run_median(&c));
    let per_stage: Vec<String> = c
        .seeds
        .iter()
        .map(|x| {
            format!("{}+{}", x.meta_episodes, x.stages.iter().map(|st| st.episodes.to_string()).collect::<Vec<_>>().join("+"))
        })
        .collect();
    let detail = format!(
        "curriculum total median {mc:.0} [{}] ({}) vs scratch median {ms:.0} ({}); * = not converged, censored at budget; {:.0}s",
        per_stage.join(", "),
        fmt_rows(&c),
        fmt_rows(&s),
        t.elapsed().as_secs_f64()
    );
    let curriculum_converged = c.seeds.iter().filter(|x| x.converged()).count() * 2 > c.seeds.len();
    if mc < ms && curriculum_converged {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// 7 ──────────────────────────────────────────────────────────────────────────────

const C7_COMMON: &str = r#"
seeds = [0, 1, 2]
[world]
width = 96
height = 96
obstacle_density = 0.1
seed = 7
[task]
level = "low"
max_steps = 200
[hyper]
alpha = 1e-3
beta = 1e-3
eta = 3e-3
[isar]
grad_mode = "first_order"
[training]
max_episodes = 6000
checkpoint_every = 100000
"#;

fn transfer_vs_scratch(out: &Path) -> Outcome {
    let t = Instant::now();
    let scratch = config(out, &format!("run_id = \"c7-scratch\"\nworkers = {}\n{C7_COMMON}", workers()));
    let transfer = config(
        out,
        &format!(
            r#"
run_id = "c7-transfer"
workers = {}
{C7_COMMON}
[meta]
tasks = 32
region_size = 16
max_steps = 70
level = "low"
batch_size = 8
max_iterations = 400
stop_on_convergence = false
[meta.world]
width = 32
height = 32
obstacle_density = 0.1
seed = 99
"#,
            workers()
        ),
    );
    let s = run(&scratch, Command::Train)?;
    let tr = run(&transfer, Command::Transfer)?;
    let (ms, mt) = (run_median(&s), run_median(&tr));
    let detail = format!(
        "fine-tune median {mt:.0} ({}) vs scratch median {ms:.0} ({}); ratio {:.2}; meta-training {} episodes per seed on a different world; {:.0}s",
        fmt_rows(&tr),
        fmt_rows(&s),
        mt / ms,
        tr.seeds.first().map_or(0, |x| x.meta_episodes),
        t.elapsed().as_secs_f64()
    );
    let transfer_converged = tr.seeds.iter().filter(|x| x.converged()).count() * 2 > tr.seeds.len();
    if mt <= 0.5 * ms && transfer_converged {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// 8 ──────────────────────────────────────────────────────────────────────────────

fn invariant_suites() -> Outcome {
    let t = Instant::now();
    let per_check = 2_500u64;
    let mut violations = Vec::new();
    for (i, (name, check)) in invariants::ALL.iter().enumerate() {
        for trial in 0..per_check {
            if let Err(e) = check(seed::derive(8_000 + i as u64, &[trial])) {
                violations.push(format!("{name} trial {trial}: {e}"));
            }
        }
    }
    let total = per_check * invariants::ALL.len() as u64;
    let elapsed = t.elapsed();
    let detail = format!("{total} trials over {} suites, {} violations, {:.1}s", invariants::ALL.len(), violations.len(), elapsed.as_secs_f64());
    if violations.is_empty() && elapsed < Duration::from_secs(120) {
        Ok(detail)
    } else {
        Err(format!("{detail}; first: {}", violations.first().map_or("-", String::as_str)))
    }
}

fn main() -> ExitCode {
    let only: Option<Vec<usize>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let dir = tempfile::tempdir().expect("temporary output directory");
    let out = dir.path();
    let criteria: [(usize, &str, Box<dyn Fn() -> Outcome + '_>); 8] = [
        (1, "autodiff gradients vs finite differences", Box::new(autodiff_gradients)),
        (2, "meta-gradient quadratic oracle", Box::new(meta_gradient_oracle)),
        (3, "structural reductions", Box::new(structural_reductions)),
        (4, "A3C learnability on 16x16 open grid", Box::new(|| a3c_learnability(out))),
        (5, "ISAR vs baseline convergence", Box::new(|| isar_vs_baseline(out))),
        (6, "meta + curriculum vs scratch", Box::new(|| curriculum_vs_scratch(out))),
        (7, "transfer vs scratch", Box::new(|| transfer_vs_scratch(out))),
        (8, "environment and harness invariants", Box::new(invariant_suites)),
    ];
    let mut failed = 0;
    for (n, name, f) in &criteria {
        if only.as_ref().is_some_and(|o| !o.contains(n)) {
            continue;
        }
        match f() {
            Ok(d) => println!("PASS [{n}] {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL [{n}] {name}: {d}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
