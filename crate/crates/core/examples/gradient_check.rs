//! Finite-difference checks of both trainable networks' gradients.

use mesh_imitate::body_model::BodyModel;
use mesh_imitate::cli::{smoother_gradcheck, transfer_gradcheck};

fn main() -> mesh_imitate::error::Result<()> {
    let model = BodyModel::humanoid();
    for seed in 0..3 {
        let s = smoother_gradcheck(&model, seed, 20)?;
        let t = transfer_gradcheck(&model, seed, 20)?;
        println!(
            "seed {seed}: smoother {:.2e} ({} kinks skipped), transfer {:.2e} ({} kinks skipped)",
            s.max_rel_error, s.kink_skips, t.max_rel_error, t.kink_skips
        );
        for p in s.probes.iter().take(3) {
            println!("    {}[{}]  analytic {:+.6e}  numeric {:+.6e}", p.name, p.index, p.analytic, p.numeric);
        }
    }
    Ok(())
}
