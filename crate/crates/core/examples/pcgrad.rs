//! Gradient surgery on a few hand-picked gradients: conflicting pairs are
//! projected until no gradient points against one it was checked against.

use fedpda::algorithms::{pcgrad_combine, pcgrad_surgery};
use fedpda::numerics::{dot, GradientVector, Rng};

fn show(label: &str, g: &GradientVector) {
    let v: Vec<String> = g.iter().map(|x| format!("{x:+.3}")).collect();
    println!("{label:<10} [{}]", v.join(", "));
}

fn main() -> fedpda::Result<()> {
    let grads = vec![
        GradientVector::new(vec![1.0, 0.2, 0.0]),
        GradientVector::new(vec![-0.8, 1.0, 0.1]),
        GradientVector::new(vec![0.1, -1.0, 0.5]),
    ];
    for (i, g) in grads.iter().enumerate() {
        show(&format!("g{i}"), g);
    }
    println!();
    let mut rng = Rng::new(3);
    let surgered = pcgrad_surgery(&grads, &mut rng)?;
    for (i, s) in surgered.iter().enumerate() {
        show(&format!("g{i}'"), &s.grad);
        for &j in &s.projected_against {
            println!("           · g{j} = {:+.3e}", dot(&s.grad, &grads[j])?);
        }
    }
    println!();
    show("combined", &pcgrad_combine(&grads, &mut Rng::new(3))?);
    show("plain avg", &GradientVector::mean(&grads)?);
    Ok(())
}
