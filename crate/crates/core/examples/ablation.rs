//! A reduced motion-loss ablation: two variants, three seeds, few epochs.
//! The CLI's `ablate` command runs the full study.

use mesh_imitate::body_model::BodyModel;
use mesh_imitate::metrics::{ablate, LabelledSample, Study};
use mesh_imitate::smoother::{SmootherConfig, TrainOptions};
use mesh_imitate::synth::{generate_benchmark, BenchmarkConfig};

fn main() -> mesh_imitate::error::Result<()> {
    let bench = generate_benchmark(
        &BodyModel::humanoid(),
        &BenchmarkConfig {
            train_clips: 12,
            test_clips: 6,
            ..BenchmarkConfig::default()
        },
    )?;
    let train = bench.train.iter().map(|c| c.sample()).collect::<Result<Vec<_>, _>>()?;
    let test = bench
        .test
        .iter()
        .map(|c| {
            Ok(LabelledSample {
                id: c.entry.clip.source_id.clone(),
                video: format!("s{}/a{}", c.entry.subject, c.entry.action),
                sample: c.sample()?,
            })
        })
        .collect::<mesh_imitate::error::Result<Vec<_>>>()?;

    let study = Study::MotionLoss;
    let opts = TrainOptions {
        epochs: 20,
        eval_every: 0,
        ..TrainOptions::default()
    };
    let table = ablate(study.title(), &bench.model, &train, &test, &study.variants(&SmootherConfig::default())?, &[0, 1, 2], &opts)?;
    print!("{}", table.to_text());
    let v = table.compare("with motion loss", "without motion loss")?;
    println!("with motion loss no worse in {}/{} seeds", v.a_not_worse, v.seeds);
    Ok(())
}
