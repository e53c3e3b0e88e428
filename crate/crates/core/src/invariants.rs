//! Randomised environment and metrics invariants, one trial per seed.
//!
//! Each check draws its own scenario from the trial seed and returns a description of
//! the first violation it finds. Used by the property tests and the acceptance suite.

use std::sync::Arc;

use rand::Rng as _;

use crate::env::{generate_world, Action, AltitudeLevel, EnvState, Task, World, STEP_PENALTY, SUCCESS_REWARD};
use crate::error::Error;
use crate::metrics::{convergence_episode, MetricsRecord};
use crate::policy_net::{init_params, NetConfig, PolicyNet};
use crate::rl::rollout_segment;
use crate::seed::{self, Rng};

pub type Check = fn(u64) -> Result<(), String>;

/// Every check, by name.
pub const ALL: [(&str, Check); 5] = [
    ("reward accounting identity", reward_accounting),
    ("blocking monotonicity", blocking_monotonicity),
    ("absorbing done", absorbing_done),
    ("bit-exact replay", bit_exact_replay),
    ("convergence-window brute force", convergence_window),
];

fn random_world(rng: &mut Rng) -> World {
    let w = rng.gen_range(8..=20);
    let h = rng.gen_range(8..=20);
    let density = rng.gen_range(0.0..0.35);
    generate_world(w, h, density, (10.0, 100.0), rng.gen()).expect("generator retries until connected")
}

fn random_task(rng: &mut Rng) -> Task {
    let world = Arc::new(random_world(rng));
    let level = AltitudeLevel::standard()[rng.gen_range(0..4)];
    let occ = world.render_level(&level);
    let open: Vec<(usize, usize)> =
        world.full_region().cells().filter(|&(x, y)| !occ.is_blocked(x, y)).collect();
    let target = open[rng.gen_range(0..open.len())];
    Task::full(world, level, target, rng.gen_range(1..=60)).expect("open target in a connected world")
}

fn random_action(rng: &mut Rng) -> Action {
    Action::ALL[rng.gen_range(0..4)]
}

/// Random-action episode: the visited states and per-step rewards.
fn random_episode(task: &Task, rng: &mut Rng) -> Result<(Vec<EnvState>, Vec<f64>), String> {
    let mut state = task.reset_with(rng);
    let (mut states, mut rewards) = (vec![state], Vec::new());
    while !state.done {
        let tr = task.step(&state, random_action(rng)).map_err(|e| format!("step failed: {e}"))?;
        rewards.push(tr.reward);
        state = tr.state;
        states.push(state);
    }
    Ok((states, rewards))
}

/// Episode return equals `SUCCESS_REWARD·success + STEP_PENALTY·(steps − success)`.
pub fn reward_accounting(trial: u64) -> Result<(), String> {
    let mut rng = seed::rng(trial);
    let task = random_task(&mut rng);
    let (states, rewards) = random_episode(&task, &mut rng)?;
    let last = states.last().expect("at least the start state");
    let success = last.succeeded as u32;
    let steps = last.step_count;
    if rewards.len() != steps as usize {
        return Err(format!("{} rewards for {steps} steps", rewards.len()));
    }
    let expected = SUCCESS_REWARD * success as f64 + STEP_PENALTY * (steps - success) as f64;
    let total: f64 = rewards.iter().sum();
    if (total - expected).abs() > 1e-9 {
        return Err(format!("return {total} != {expected} (steps {steps}, success {success})"));
    }
    Ok(())
}

/// Lower altitudes block a superset of the cells blocked higher up; no agent ever
/// stands on a blocked cell.
pub fn blocking_monotonicity(trial: u64) -> Result<(), String> {
    let mut rng = seed::rng(trial);
    let world = random_world(&mut rng);
    let levels = AltitudeLevel::standard();
    for pair in levels.windows(2) {
        let (hi, lo) = (world.render_level(&pair[0]), world.render_level(&pair[1]));
        if let Some(i) = (0..hi.blocked.len()).find(|&i| hi.blocked[i] && !lo.blocked[i]) {
            return Err(format!("cell {i} blocked at {:?} but open at {:?}", pair[0].name, pair[1].name));
        }
    }
    let task = random_task(&mut rng);
    let (states, _) = random_episode(&task, &mut rng)?;
    for s in &states {
        if task.is_blocked(s.agent.0 as i64, s.agent.1 as i64) {
            return Err(format!("agent on blocked cell {:?}", s.agent));
        }
    }
    Ok(())
}

/// `done` exactly on success or at the step limit, and stepping past it is refused.
pub fn absorbing_done(trial: u64) -> Result<(), String> {
    let mut rng = seed::rng(trial);
    let task = random_task(&mut rng);
    let (states, _) = random_episode(&task, &mut rng)?;
    for s in &states {
        let should = s.succeeded || s.step_count >= task.max_steps();
        if s.done != should {
            return Err(format!("done = {} at {s:?}", s.done));
        }
        if s.step_count > 0 && s.succeeded != (s.agent == task.target()) {
            return Err(format!("success flag inconsistent at {s:?}"));
        }
    }
    let last = *states.last().expect("at least the start state");
    match task.step(&last, random_action(&mut rng)) {
        Err(Error::EpisodeDone) => Ok(()),
        other => Err(format!("step after done returned {other:?}")),
    }
}

/// Same world seed, reset seed and policy rng give identical trajectories.
pub fn bit_exact_replay(trial: u64) -> Result<(), String> {
    let mut rng = seed::rng(trial);
    let w = rng.gen_range(8..=16);
    let density = rng.gen_range(0.0..0.3);
    let world_seed: u64 = rng.gen();
    let a = generate_world(w, w, density, (10.0, 100.0), world_seed).map_err(|e| e.to_string())?;
    let b = generate_world(w, w, density, (10.0, 100.0), world_seed).map_err(|e| e.to_string())?;
    if a != b {
        return Err("world generation is not deterministic".into());
    }
    let task = {
        let world = Arc::new(a);
        let occ = world.render_level(&AltitudeLevel::low());
        let target = world.full_region().cells().find(|&(x, y)| !occ.is_blocked(x, y)).expect("open cell");
        Task::full(world, AltitudeLevel::low(), target, 30).map_err(|e| e.to_string())?
    };
    let cfg = NetConfig { obs_dim: task.obs_dim(), embed_dim: 8, n_hidden: 1, n_actions: 4 };
    let net = PolicyNet::new(cfg.clone()).map_err(|e| e.to_string())?;
    let params = init_params(&cfg, trial).map_err(|e| e.to_string())?;
    let episode_seed: u64 = rng.gen();
    let run = || {
        let mut r = seed::rng(episode_seed);
        let start = task.reset_with(&mut r);
        rollout_segment(&net, &params, &task, &start, 30, &mut r).map(|(seg, end)| {
            let trace: Vec<(usize, u64, u64)> =
                seg.steps.iter().map(|s| (s.action, s.reward.to_bits(), s.value.to_bits())).collect();
            (start, trace, end)
        })
    };
    let (x, y) = (run().map_err(|e| e.to_string())?, run().map_err(|e| e.to_string())?);
    if x != y {
        return Err("replayed rollouts differ".into());
    }
    Ok(())
}

fn brute_force_convergence(success: &[bool], threshold: f64, window: usize) -> Option<u64> {
    (window..=success.len())
        .find(|&end| {
            let hits = success[end - window..end].iter().filter(|&&s| s).count();
            hits as f64 / window as f64 >= threshold
        })
        .map(|end| end as u64)
}

/// Streaming convergence detection agrees with a direct scan of every window.
pub fn convergence_window(trial: u64) -> Result<(), String> {
    let mut rng = seed::rng(trial);
    let len = rng.gen_range(0..400);
    let window = rng.gen_range(1..=60);
    let p: f64 = rng.gen();
    let threshold = [0.0, 0.5, 0.9, 1.0, rng.gen()][rng.gen_range(0..5)];
    let success: Vec<bool> = (0..len).map(|_| rng.gen_bool(p)).collect();
    let series: Vec<MetricsRecord> = success
        .iter()
        .enumerate()
        .map(|(i, &s)| MetricsRecord {
            run_id: String::new(),
            seed: 0,
            stage: 1,
            episode: i as u64 + 1,
            steps: 1,
            total_reward: 0.0,
            success: s as u8,
            inner_loss: 0.0,
            adapt_loss: 0.0,
            wallclock_ms: 0,
        })
        .collect();
    let fast = convergence_episode(&series, threshold, window);
    let slow = brute_force_convergence(&success, threshold, window);
    if fast != slow {
        return Err(format!("len {len} window {window} threshold {threshold}: {fast:?} != {slow:?}"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checks_pass_on_a_few_seeds() {
        for (name, check) in ALL {
            for t in 0..20 {
                check(t).unwrap_or_else(|e| panic!("{name}, trial {t}: {e}"));
            }
        }
    }

    #[test]
    fn brute_force_reference() {
        let s = [true, false, true, true, true];
        assert_eq!(brute_force_convergence(&s, 1.0, 3), Some(5));
        assert_eq!(brute_force_convergence(&s, 0.6, 3), Some(3));
        assert_eq!(brute_force_convergence(&s, 0.0, 6), None);
    }
}
