//! Scratch probe: how well do idealized corner-seeking options of a given
//! logit magnitude adapt on the test split? Bounds what meta-training can
//! reach once outer updates have moved logits by roughly that much.

use famp::envs::{canonical_map, optimal_return, task_family, Action, Cell};
use famp::meta::{adapt_and_eval, AblationMode, MetaConfig};
use famp::policy::ParamValues;

fn main() {
    let map = canonical_map();
    let family = task_family(&map, 0);
    let n = 4;
    let magnitude: f64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(3.0);

    // Option i: walk toward corner i along shortest paths, pick-up/drop-off
    // there, terminate there.
    let mut params = ParamValues::init(map.encoding_dim(), n, 6, 0);
    for v in params.theta_sub.iter_mut() {
        *v = 0.0;
    }
    for (option, &corner) in map.specials.iter().enumerate() {
        let dist = map.distances_from(corner);
        for carrying in 0..2usize {
            for row in 0..map.height {
                for col in 0..map.width {
                    let cell = Cell { row, col };
                    let s_idx = carrying * map.n_cells() + map.cell_index(cell);
                    let base = (option * params.s + s_idx) * 6;
                    if cell == corner {
                        params.theta_sub[base + 4] = magnitude;
                    } else {
                        for (a, next) in [
                            (0usize, map.move_from(cell, Action::Up)),
                            (1, map.move_from(cell, Action::Down)),
                            (2, map.move_from(cell, Action::Left)),
                            (3, map.move_from(cell, Action::Right)),
                        ] {
                            if dist[map.cell_index(next)] + 1 == dist[map.cell_index(cell)] {
                                params.theta_sub[base + a] = magnitude;
                                break;
                            }
                        }
                    }
                    // terminate at the corner, keep going elsewhere
                    params.theta_term[option * params.s + s_idx] =
                        if cell == corner { magnitude } else { -magnitude };
                }
            }
        }
    }

    let cfg = MetaConfig {
        n_options: n,
        k_episodes: 10,
        mode: AblationMode::Famp,
        ..MetaConfig::default()
    };
    let mut total = 0.0;
    let mut opt_total = 0.0;
    for task in family.test_tasks() {
        let curve = adapt_and_eval(&map, &task, &params, 10, &cfg, 7).unwrap();
        let last = *curve.returns.last().unwrap();
        total += last;
        opt_total += optimal_return(&map, &task);
        println!("task {:2}: final {:7.3} optimal {:5.2}", task.id, last, optimal_return(&map, &task));
    }
    println!(
        "magnitude {magnitude}: mean final {:.3}, optimal mean {:.3}, bar {:.3}",
        total / 12.0,
        opt_total / 12.0,
        opt_total / 12.0 - 1.0
    );
}
