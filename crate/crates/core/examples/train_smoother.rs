//! Train the mesh-sequence smoother on a small benchmark and compare its
//! held-out MPJPE with the noisy input.
//!
//!     cargo run --release --example train_smoother -- [epochs]

use mesh_imitate::body_model::BodyModel;
use mesh_imitate::smoother::{smooth, train_smoother, SmootherConfig, TrainOptions};
use mesh_imitate::synth::{generate_benchmark, BenchmarkConfig};

fn main() -> mesh_imitate::error::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(40);
    let config = BenchmarkConfig {
        train_clips: 16,
        test_clips: 8,
        ..BenchmarkConfig::default()
    };
    let bench = generate_benchmark(&BodyModel::humanoid(), &config)?;
    let train = bench.train.iter().map(|c| c.sample()).collect::<Result<Vec<_>, _>>()?;
    let test = bench.test.iter().map(|c| c.sample()).collect::<Result<Vec<_>, _>>()?;

    let opts = TrainOptions {
        epochs,
        eval_every: 10,
        ..TrainOptions::default()
    };
    let trained = train_smoother(SmootherConfig::default(), &bench.model, &train, &test, &opts)?;
    for line in trained.log.iter().filter(|l| l.heldout_mpjpe_mm.is_some()) {
        println!("epoch {:4}  loss {:.5}  held-out {:.1} mm", line.epoch, line.train_loss, line.heldout_mpjpe_mm.unwrap());
    }
    println!("input {:.1} mm", bench.manifest.reference_input_mpjpe_mm.test);

    // smoothing keeps the cuboid's shape
    let out = smooth(&trained.params, &test[0].noisy, &bench.model)?;
    assert_eq!((out.frames(), out.vertices()), (test[0].noisy.frames(), test[0].noisy.vertices()));
    Ok(())
}
