use crate::error::{check_len, Error, Result};
use crate::numerics::{dot_slices, mean_slices, GradientVector, Rng};

/// One gradient after surgery.
#[derive(Debug, Clone, PartialEq)]
pub struct Surgered {
    pub grad: GradientVector,
    /// Indices of the input gradients it was projected against.
    pub projected_against: Vec<usize>,
}

/// Gradient surgery: every gradient is projected off each other gradient it
/// conflicts with (negative inner product), visiting the others in random
/// order; the surgered gradients are averaged.
///
/// With three or more gradients a later projection can re-create a conflict
/// that an earlier one removed. When that happens the gradient is instead
/// projected onto the cone `{v : v·g_j ≥ 0}` of every gradient it was
/// projected against, the closest direction that conflicts with none of them.
pub fn pcgrad_combine(grads: &[GradientVector], rng: &mut Rng) -> Result<GradientVector> {
    let surgered = pcgrad_surgery(grads, rng)?;
    let refs: Vec<&[f64]> = surgered.iter().map(|s| s.grad.as_slice()).collect();
    mean_slices(&refs).map(GradientVector::new)
}

/// The per-gradient half of [`pcgrad_combine`], before averaging.
pub fn pcgrad_surgery(grads: &[GradientVector], rng: &mut Rng) -> Result<Vec<Surgered>> {
    if grads.len() < 2 {
        return Err(Error::invalid("pcgrad needs at least two gradients"));
    }
    let dim = grads[0].len();
    if dim == 0 {
        return Err(Error::invalid("pcgrad on zero-length gradients"));
    }
    for g in grads {
        check_len(dim, g.len())?;
    }
    let mut surgered = Vec::with_capacity(grads.len());
    for (i, g) in grads.iter().enumerate() {
        let mut others: Vec<usize> = (0..grads.len()).filter(|&j| j != i).collect();
        rng.shuffle(&mut others);
        let mut v = g.as_slice().to_vec();
        let mut projected_against = Vec::new();
        for &j in &others {
            let gj = grads[j].as_slice();
            let d = dot_slices(&v, gj)?;
            if d < 0.0 {
                let nn = dot_slices(gj, gj)?;
                for (a, b) in v.iter_mut().zip(gj) {
                    *a -= d / nn * b;
                }
                projected_against.push(j);
            }
        }
        let conflicts_left = projected_against
            .iter()
            .any(|&j| dot_slices(&v, grads[j].as_slice()).unwrap_or(0.0) < 0.0);
        if conflicts_left {
            let cone: Vec<&[f64]> = projected_against.iter().map(|&j| grads[j].as_slice()).collect();
            v = project_onto_dual_cone(g.as_slice(), &cone);
        }
        surgered.push(Surgered {
            grad: GradientVector::new(v),
            projected_against,
        });
    }
    Ok(surgered)
}

/// Closest point to `g` in `{v : v·a ≥ 0 for every a in normals}`.
///
/// Solved through its active set: `v = g + Σ_{a∈A} μ_a a` with `v·a = 0` on
/// `A` and `μ ≥ 0`. Small sets are enumerated exactly; larger ones fall back
/// to Dykstra's alternating projections.
fn project_onto_dual_cone(g: &[f64], normals: &[&[f64]]) -> Vec<f64> {
    let m = normals.len();
    if m <= 12 {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for subset in 1u32..(1 << m) {
            let active: Vec<&[f64]> = (0..m)
                .filter(|b| subset & (1 << b) != 0)
                .map(|b| normals[b])
                .collect();
            let Some(v) = kkt_point(g, &active) else { continue };
            // rounding in v is relative to g, which may nearly cancel
            let feasible = normals.iter().all(|a| {
                let scale = norm(a) * norm(&v).max(norm(g));
                dot(&v, a) >= -1e-12 * scale.max(f64::MIN_POSITIVE)
            });
            if feasible {
                let dist: f64 = v.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum();
                if best.as_ref().is_none_or(|(d, _)| dist < *d) {
                    best = Some((dist, v));
                }
            }
        }
        if let Some((_, v)) = best {
            return clean_residual_conflicts(v, g, normals);
        }
    }
    dykstra(g, normals)
}

/// Solves `(A Aᵀ) μ = −A g` for the active set and keeps the point only if
/// every multiplier is non-negative.
fn kkt_point(g: &[f64], active: &[&[f64]]) -> Option<Vec<f64>> {
    let k = active.len();
    let mut gram = vec![0.0; k * k];
    let mut rhs = vec![0.0; k];
    for i in 0..k {
        for j in 0..k {
            gram[i * k + j] = dot(active[i], active[j]);
        }
        rhs[i] = -dot(active[i], g);
    }
    let mu = solve(gram, rhs, k)?;
    if mu.iter().any(|&x| x < -1e-12) {
        return None;
    }
    let mut v = g.to_vec();
    for (a, &c) in active.iter().zip(&mu) {
        for (x, y) in v.iter_mut().zip(a.iter()) {
            *x += c * y;
        }
    }
    Some(v)
}

/// Removes rounding-level negative inner products left by the exact solve.
///
/// Every constraint that is violated or within rounding of its boundary is
/// corrected at once (a small Gram solve), with a margin at the scale of the
/// dot product's own rounding error so the result stays non-negative when
/// the inner products are recomputed. Correcting one constraint at a time
/// stalls in thin wedges. If rounding still wins, the apex `0` is returned:
/// it is feasible and, in such a wedge, within rounding of the answer.
fn clean_residual_conflicts(mut v: Vec<f64>, g: &[f64], normals: &[&[f64]]) -> Vec<f64> {
    let ulp_scale = v.len() as f64 * f64::EPSILON;
    if norm(&v) <= 16.0 * ulp_scale * norm(g) {
        return vec![0.0; v.len()];
    }
    for _ in 0..8 {
        let margin = |a: &[f64], v: &[f64]| 4.0 * ulp_scale * norm(v) * norm(a);
        if normals.iter().all(|a| dot(&v, a) >= 0.0) {
            return v;
        }
        let active: Vec<&[f64]> = normals
            .iter()
            .copied()
            .filter(|a| dot(&v, a) < margin(a, &v))
            .collect();
        let k = active.len();
        let mut gram = vec![0.0; k * k];
        let mut rhs = vec![0.0; k];
        for i in 0..k {
            for j in 0..k {
                gram[i * k + j] = dot(active[i], active[j]);
            }
            rhs[i] = margin(active[i], &v) - dot(&v, active[i]);
        }
        let Some(mu) = solve(gram, rhs, k) else { break };
        for (a, c) in active.iter().zip(&mu) {
            for (x, y) in v.iter_mut().zip(a.iter()) {
                *x += c * y;
            }
        }
    }
    if normals.iter().all(|a| dot(&v, a) >= 0.0) {
        v
    } else {
        vec![0.0; v.len()]
    }
}

fn dykstra(g: &[f64], normals: &[&[f64]]) -> Vec<f64> {
    let mut x = g.to_vec();
    let mut corrections = vec![vec![0.0; g.len()]; normals.len()];
    for _ in 0..10_000 {
        let mut moved = 0.0;
        for (a, p) in normals.iter().zip(corrections.iter_mut()) {
            let y: Vec<f64> = x.iter().zip(p.iter()).map(|(u, w)| u + w).collect();
            let d = dot(&y, a);
            let nn = dot(a, a);
            let proj: Vec<f64> = if d < 0.0 {
                y.iter().zip(a.iter()).map(|(u, w)| u - d / nn * w).collect()
            } else {
                y.clone()
            };
            for ((pi, yi), qi) in p.iter_mut().zip(&y).zip(&proj) {
                *pi = yi - qi;
            }
            moved += proj.iter().zip(&x).map(|(u, w)| (u - w).abs()).sum::<f64>();
            x = proj;
        }
        if moved < 1e-15 {
            break;
        }
    }
    clean_residual_conflicts(x, g, normals)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Gaussian elimination with partial pivoting; `None` when singular.
fn solve(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> Option<Vec<f64>> {
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))?;
        if a[piv * n + col].abs() <= 1e-12 * scale {
            return None;
        }
        if piv != col {
            for k in 0..n {
                a.swap(piv * n + k, col * n + k);
            }
            b.swap(piv, col);
        }
        for row in col + 1..n {
            let f = a[row * n + col] / a[col * n + col];
            for k in col..n {
                a[row * n + k] -= f * a[col * n + k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row * n + k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row * n + row];
    }
    Some(x)
}
