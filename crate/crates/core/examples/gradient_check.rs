//! Compares the MLP's analytic gradient with central finite differences on
//! a random batch, coordinate by coordinate.
//!
//! ```text
//! cargo run --release --example gradient_check
//! ```

use fedpda::model::{Batch, Mlp, MlpArchitecture, Model, SegmentKind};
use fedpda::numerics::{Matrix, Rng};

fn main() -> fedpda::Result<()> {
    let model = Mlp::new(MlpArchitecture::new(5, vec![8, 6], 3, 0)?)?;
    let mut rng = Rng::new(11);
    let params = model.init_params(&mut rng);
    let n = 16;
    let x = Matrix::from_vec(n, 5, rng.gaussian_vec(n * 5, 0.0, 1.0)?)?;
    let y = (0..n).map(|_| rng.below(3)).collect();
    let batch = Batch::new(x, y)?;

    let (_, grad) = model.loss_and_grad(&params, &batch)?;
    let h = 1e-5;
    let mut probe = params.clone();
    println!("{:<14} {:>6} {:>12}", "segment", "coords", "max rel err");
    for seg in model.layout().segments() {
        if !seg.kind.is_trainable() {
            continue;
        }
        let mut worst: f64 = 0.0;
        for i in seg.range.clone() {
            probe.as_mut_slice()[i] = params[i] + h;
            let up = model.loss_and_grad(&probe, &batch)?.0;
            probe.as_mut_slice()[i] = params[i] - h;
            let down = model.loss_and_grad(&probe, &batch)?.0;
            probe.as_mut_slice()[i] = params[i];
            let fd = (up - down) / (2.0 * h);
            let denom = grad[i].abs().max(fd.abs()).max(1e-4);
            worst = worst.max((grad[i] - fd).abs() / denom);
        }
        let name = match seg.kind {
            SegmentKind::Weight => format!("weight[{}]", seg.layer),
            SegmentKind::Bias => format!("bias[{}]", seg.layer),
            SegmentKind::BnScale => "bn scale".into(),
            SegmentKind::BnShift => "bn shift".into(),
            _ => unreachable!(),
        };
        println!("{name:<14} {:>6} {worst:>12.2e}", seg.range.len());
    }
    Ok(())
}
