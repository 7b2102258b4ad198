//! Scratch probe: adapt a checkpoint on each test task, then print the
//! post-adaptation episode-length distribution and per-task means.

use famp::envs::{canonical_map, optimal_return, task_family};
use famp::harness::rollout;
use famp::meta::MetaConfig;
use famp::policy::load_checkpoint;

fn main() {
    let path = std::env::args().nth(1).expect("usage: adaptation_diagnose <checkpoint>");
    let (mut params, header) = load_checkpoint(std::path::Path::new(&path)).unwrap();
    let cfg: MetaConfig = serde_json::from_value(header.config.clone()).unwrap();
    if let Ok(term) = std::env::var("FORCE_TERM_LOGIT") {
        let v: f64 = term.parse().unwrap();
        for t in params.theta_term.iter_mut() {
            *t = v;
        }
    }
    let family = task_family(&canonical_map(), cfg.family_seed);

    let mut grand = 0.0;
    for task in family.test_tasks() {
        // mirror adapt_and_eval's adaptation loop, keeping the values
        let mut values = params.clone();
        if cfg.adapt_resets_high_level() {
            for v in values.theta_hi.iter_mut() {
                *v = 0.0;
            }
        }
        let blocks = cfg.inner_blocks();
        let lr = cfg.adapt_learning_rate();
        for step in 0..10 {
            famp::meta::adaptation_step(
                &mut values,
                &family.map,
                &task,
                &cfg,
                &blocks,
                lr,
                cfg.seed,
                &[famp::rng::tag::INNER_EPISODES, task.id as u64, step as u64],
            )
            .unwrap();
        }
        let trajs = rollout(
            &family.map,
            &task,
            &values,
            30,
            cfg.termination_mode(),
            cfg.seed,
            &[famp::rng::tag::EVAL_EPISODES, 999, task.id as u64],
        )
        .unwrap();
        let mut lens: Vec<usize> = trajs.iter().map(|t| t.len()).collect();
        lens.sort_unstable();
        let mean_ret: f64 =
            trajs.iter().map(|t| t.undiscounted_return()).sum::<f64>() / trajs.len() as f64;
        let opt = optimal_return(&family.map, &task);
        let opt_len = ((2.0 - opt) / 0.1).round() as usize;
        grand += mean_ret / 12.0;
        println!(
            "task {:2} opt_len {:3} | mean {:7.2} | lens p10 {:4} p50 {:4} p90 {:4} max {:4} | fails {:2}/30",
            task.id,
            opt_len,
            mean_ret,
            lens[2],
            lens[14],
            lens[26],
            lens[29],
            trajs.iter().filter(|t| !t.done_by_goal).count(),
        );
    }
    println!("grand mean: {grand:.3}");
}
