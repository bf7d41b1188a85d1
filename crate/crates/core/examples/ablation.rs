//! Rule ablation on the 6-camera corridor scenario over several seeds.
//!
//! Usage: `ablation [SEEDS] [SIGMA]`, e.g. `ablation 1,2,3 0.25`. A sigma
//! of `0` also switches off box jitter and missed detections.

use std::sync::Arc;
use std::time::Instant;

use mctrack::mct::{MctParams, RuleToggles};
use mctrack::pipeline::{evaluate_against, load_sources, run_streams, PipelineConfig, PrecomputedProvider, SourceConfig};
use mctrack::simkit::{Layout, NoiseProfile, ScenarioConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seeds: Vec<u64> = args.get(1).map_or(vec![1], |s| s.split(',').map(|x| x.trim().parse().expect("seed")).collect());
    let sigma: f64 = args.get(2).map_or(0.25, |s| s.parse().expect("sigma"));
    let noise = if sigma == 0.0 {
        NoiseProfile::zero()
    } else {
        NoiseProfile { box_jitter_std: 2.0, miss_rate: 0.1, false_positive_rate: 0.0, embedding_noise_std: sigma }
    };

    println!("{:>6} {:>9} {:>9} {:>9} {:>8}", "seed", "baseline", "+rule4", "+rule5", "time_s");
    for seed in seeds {
        let scenario = ScenarioConfig::new(seed, 6, 50, 120.0, 10.0, Layout::Corridor);
        let base = PipelineConfig { source: SourceConfig::Simkit { scenario, noise, render_seed: None }, ..Default::default() };
        let t0 = Instant::now();
        let src = load_sources(&base).expect("scenario");
        let gt = src.ground_truth.clone().expect("ground truth");
        let mut idf1 = Vec::new();
        for (adjacency, direction) in [(false, false), (true, false), (true, true)] {
            let cfg = PipelineConfig { mct: MctParams { rules: RuleToggles { adjacency, direction }, ..MctParams::default() }, ..base.clone() };
            let report = run_streams(&src.topology, src.streams.clone(), &cfg, Arc::new(PrecomputedProvider)).expect("run");
            idf1.push(evaluate_against(&gt, &report).expect("evaluation").idf1);
        }
        println!("{seed:>6} {:>9.4} {:>9.4} {:>9.4} {:>8.2}", idf1[0], idf1[1], idf1[2], t0.elapsed().as_secs_f64());
    }
}
