//! Trains the toy policy under every reward mode and prints the final
//! greedy-caption metrics.
//!
//! cargo run --release -p distcap-core --example toy_ablation [epochs] [seed] [lr]

use distcap::scstreward::{RewardConfig, RewardMode};
use distcap::toytrain::{train, LrSchedule, ToyWorld, TrainOptions, WorldParams, DEFAULT_LR};

fn main() {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().and_then(|a| a.parse().ok()).unwrap_or(200);
    let seed = args.next().and_then(|a| a.parse().ok()).unwrap_or(0);
    let lr = args.next().and_then(|a| a.parse().ok()).unwrap_or(DEFAULT_LR);
    let world = ToyWorld::new(WorldParams {
        seed,
        ..WorldParams::default()
    })
    .expect("default world");
    let runs = [
        ("SCST (beta=0)", RewardConfig { beta: 0.0, ..RewardConfig::default() }),
        ("ER", RewardConfig { mode: RewardMode::Er, ..RewardConfig::default() }),
        ("GEG_AVG", RewardConfig::default()),
        ("GEG_MIN", RewardConfig { mode: RewardMode::GegMin, ..RewardConfig::default() }),
        ("GEG_SOLE", RewardConfig { mode: RewardMode::GegSole, ..RewardConfig::default() }),
    ];
    println!("{:<14} {:>9} {:>9} {:>9} {:>7} {:>8}", "run", "reward", "geg_avg", "geg_min", "R@1", "cider");
    for (name, config) in runs {
        let out = train(&world, &config, &TrainOptions { epochs, seed, schedule: LrSchedule::Constant(lr), ..TrainOptions::default() })
            .expect("training");
        let e = out.log.last().copied().unwrap();
        println!(
            "{name:<14} {:>9.4} {:>9.4} {:>9.4} {:>7.2} {:>8.4}",
            e.mean_reward, e.mean_geg_avg, e.mean_geg_min, e.r_at_1, e.mean_cider
        );
    }
}
