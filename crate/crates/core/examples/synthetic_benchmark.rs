//! Generate a small synthetic benchmark, write it to disk and load it back.

use mesh_imitate::body_model::BodyModel;
use mesh_imitate::metrics::mpjpe;
use mesh_imitate::synth::{make_benchmark, BenchmarkConfig, LoadedBenchmark};

fn main() -> mesh_imitate::error::Result<()> {
    let dir = std::env::temp_dir().join("mesh-imitate-example-bench");
    let config = BenchmarkConfig {
        train_clips: 8,
        test_clips: 4,
        ..BenchmarkConfig::default()
    };
    let bench = make_benchmark(&BodyModel::humanoid(), &config, &dir)?;
    println!(
        "input MPJPE: train {:.1} mm, test {:.1} mm",
        bench.manifest.reference_input_mpjpe_mm.train, bench.manifest.reference_input_mpjpe_mm.test
    );

    let loaded = LoadedBenchmark::load(&dir)?;
    for clip in &loaded.test {
        let noisy = mesh_imitate::metrics::regress_cuboid(&loaded.model, &clip.noisy)?;
        println!(
            "{:>24}  subject {} action {}  {:.1} mm",
            clip.entry.clip.source_id,
            clip.entry.subject,
            clip.entry.action,
            mpjpe(&noisy, &clip.gt_joints, true)?
        );
    }
    println!("benchmark in {}", dir.display());
    Ok(())
}
