//! Trains a small network for a few hundred steps on freshly generated data
//! and reports validation scores.

use rootseg::net::NetConfig;
use rootseg::synth::{generate_sample, DatasetConfig, Split};
use rootseg::train::{train, Dataset, TrainConfig, TrainOutputs};

fn main() -> rootseg::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let gen = DatasetConfig { n_train: 6, n_val: 2, volume_size: 56, ..DatasetConfig::default() };
    let data = Dataset {
        train: (0..gen.n_train).map(|i| generate_sample(&gen, Split::Train, i).map(|s| s.0)).collect::<Result<_, _>>()?,
        val: (0..gen.n_val).map(|i| generate_sample(&gen, Split::Val, i).map(|s| s.0)).collect::<Result<_, _>>()?,
    };
    let mut cfg = TrainConfig { crop_size: 48, steps, validation_interval: 100, ..TrainConfig::default() };
    cfg.loss.root_weight = 10.0;
    cfg.loss.use_dontcare = true;
    let out = std::env::temp_dir().join("rootseg-train");
    let result = train(&NetConfig::with_base(4), &cfg, &data, &TrainOutputs { dir: Some(out.clone()) })?;

    let losses = result.log.losses();
    for chunk in losses.chunks(50).enumerate() {
        println!("steps {:>4}..: mean loss {:.4}", chunk.0 * 50 + 1, chunk.1.iter().sum::<f64>() / chunk.1.len() as f64);
    }
    for (step, report) in &result.log.validations {
        let e = report.micro.at(1.0).expect("tolerance 1 is configured");
        println!("step {step}: tolerance 1 precision {:.3} recall {:.3} F1 {:.3}", e.precision, e.recall, e.f1);
    }
    println!("checkpoints and logs in {}", out.display());
    Ok(())
}
