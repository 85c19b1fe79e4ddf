use crate::data::DomainDataset;
use crate::error::{check_len, Error, Result};
use crate::numerics::{GradientVector, Matrix, ParamVector, Rng};

use super::linear::argmax;
use super::{Batch, EvalMetrics, MlpArchitecture, Model, ParamLayout, SegmentKind};

/// Weight of the newest batch in the running-statistic moving average.
pub const BN_MOMENTUM: f64 = 0.1;
/// Variance floor inside the normalizer; small enough that normalized batch
/// features have unit variance to ~1e-12 for any non-degenerate layer.
pub const BN_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Normalize with batch moments.
    Train,
    /// Normalize with the running statistics stored in the parameters.
    Eval,
}

/// Multilayer perceptron with `tanh` hidden units and one batch-norm layer
/// placed before the activation of hidden layer `bn_after_layer`.
#[derive(Debug, Clone)]
pub struct Mlp {
    arch: MlpArchitecture,
    layout: ParamLayout,
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
    mean: Vec<f64>,
    var: Vec<f64>,
}

/// Logits plus whatever the backward pass needs.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: Matrix,
    mode: Mode,
    /// Input to each linear layer.
    inputs: Vec<Matrix>,
    bn: BnCache,
}

impl ForwardPass {
    /// Mean and (biased) variance of the batch-norm inputs over this batch.
    /// In eval mode these are the running statistics that were used.
    pub fn bn_moments(&self) -> (&[f64], &[f64]) {
        (&self.bn.mean, &self.bn.var)
    }

    /// Batch-norm output before the affine transform.
    pub fn normalized(&self) -> &Matrix {
        &self.bn.xhat
    }
}

impl Mlp {
    pub fn new(arch: MlpArchitecture) -> Result<Self> {
        let layout = ParamLayout::for_architecture(&arch)?;
        Ok(Mlp { arch, layout })
    }

    pub fn architecture(&self) -> &MlpArchitecture {
        &self.arch
    }

    fn num_layers(&self) -> usize {
        self.arch.hidden_dims.len() + 1
    }

    fn seg<'a>(&self, params: &'a [f64], kind: SegmentKind, layer: usize) -> &'a [f64] {
        let r = self
            .layout
            .find(kind, layer)
            .expect("layout built from this architecture");
        &params[r]
    }

    /// Gaussian weights with std `1/√fan_in`, zero biases, identity batch norm.
    pub fn init_params(&self, rng: &mut Rng) -> ParamVector {
        let widths = self.arch.widths();
        let mut p = vec![0.0; self.layout.len()];
        for s in self.layout.segments() {
            let slot = &mut p[s.range.clone()];
            match s.kind {
                SegmentKind::Weight => {
                    let std = 1.0 / (widths[s.layer] as f64).sqrt();
                    for v in slot.iter_mut() {
                        *v = std * rng.standard_normal();
                    }
                }
                SegmentKind::BnScale | SegmentKind::BnRunningVar => slot.fill(1.0),
                SegmentKind::Bias | SegmentKind::BnShift | SegmentKind::BnRunningMean => {}
            }
        }
        ParamVector::new(p)
    }

    fn check_inputs(&self, params: &ParamVector, features: &Matrix) -> Result<()> {
        check_len(self.layout.len(), params.len())?;
        check_len(self.arch.input_dim, features.cols())?;
        if features.rows() == 0 {
            return Err(Error::BatchSize { got: 0, min: 1 });
        }
        Ok(())
    }

    pub fn forward(&self, params: &ParamVector, features: &Matrix, mode: Mode) -> Result<ForwardPass> {
        self.check_inputs(params, features)?;
        if mode == Mode::Train && features.rows() < 2 {
            return Err(Error::BatchSize {
                got: features.rows(),
                min: 2,
            });
        }
        let p = params.as_slice();
        let layers = self.num_layers();
        let mut inputs = Vec::with_capacity(layers);
        let mut h = features.clone();
        let mut bn = None;
        for l in 0..layers {
            let mut z = h.affine(
                self.seg(p, SegmentKind::Weight, l),
                self.seg(p, SegmentKind::Bias, l),
            );
            inputs.push(h);
            if l == layers - 1 {
                let cache = bn.expect("batch-norm layer precedes the output layer");
                return Ok(ForwardPass {
                    logits: z,
                    mode,
                    inputs,
                    bn: cache,
                });
            }
            if l == self.arch.bn_after_layer {
                let (mean, var) = match mode {
                    Mode::Train => column_moments(&z),
                    Mode::Eval => (
                        self.seg(p, SegmentKind::BnRunningMean, l).to_vec(),
                        self.seg(p, SegmentKind::BnRunningVar, l).to_vec(),
                    ),
                };
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                let gamma = self.seg(p, SegmentKind::BnScale, l);
                let beta = self.seg(p, SegmentKind::BnShift, l);
                let mut xhat = z.clone();
                for i in 0..z.rows() {
                    let xr = xhat.row_mut(i);
                    for j in 0..xr.len() {
                        xr[j] = (xr[j] - mean[j]) * inv_std[j];
                    }
                    let zr = z.row_mut(i);
                    for j in 0..zr.len() {
                        zr[j] = gamma[j] * xhat.get(i, j) + beta[j];
                    }
                }
                bn = Some(BnCache {
                    xhat,
                    inv_std,
                    mean,
                    var,
                });
            }
            z.as_mut_slice().iter_mut().for_each(|v| *v = v.tanh());
            h = z;
        }
        unreachable!("loop returns at the output layer")
    }

    /// Mean cross-entropy and its gradient from a train-mode pass.
    fn backward(&self, params: &ParamVector, pass: &ForwardPass, labels: &[usize]) -> Result<(f64, GradientVector)> {
        debug_assert_eq!(pass.mode, Mode::Train);
        let p = params.as_slice();
        let n = labels.len();
        let (loss, mut d) = softmax_xent(&pass.logits, labels)?;
        d.as_mut_slice().iter_mut().for_each(|v| *v /= n as f64);

        let mut grad = vec![0.0; self.layout.len()];
        for l in (0..self.num_layers()).rev() {
            let h = &pass.inputs[l];
            let (fan_in, fan_out) = (h.cols(), d.cols());
            let w_range = self.layout.find(SegmentKind::Weight, l).unwrap();
            let b_range = self.layout.find(SegmentKind::Bias, l).unwrap();
            {
                let gw = &mut grad[w_range.clone()];
                for r in 0..n {
                    let (dr, hr) = (d.row(r), h.row(r));
                    for o in 0..fan_out {
                        let row = &mut gw[o * fan_in..(o + 1) * fan_in];
                        for (g, x) in row.iter_mut().zip(hr) {
                            *g += dr[o] * x;
                        }
                    }
                }
                let gb = &mut grad[b_range];
                for r in 0..n {
                    for (g, v) in gb.iter_mut().zip(d.row(r)) {
                        *g += v;
                    }
                }
            }
            if l == 0 {
                break;
            }
            // dL/dh, then through tanh (h is the activation of layer l-1)
            let w = &p[w_range];
            let mut dy = Matrix::zeros(n, fan_in);
            for r in 0..n {
                let dr = d.row(r);
                let hr = h.row(r);
                let out = dy.row_mut(r);
                for (o, &dv) in dr.iter().enumerate() {
                    for (i, slot) in out.iter_mut().enumerate() {
                        *slot += dv * w[o * fan_in + i];
                    }
                }
                for (slot, a) in out.iter_mut().zip(hr) {
                    *slot *= 1.0 - a * a;
                }
            }
            let below = l - 1;
            if below == self.arch.bn_after_layer {
                d = self.bn_backward(p, pass, &dy, &mut grad, below);
            } else {
                d = dy;
            }
        }
        Ok((loss, GradientVector::new(grad)))
    }

    fn bn_backward(&self, p: &[f64], pass: &ForwardPass, dy: &Matrix, grad: &mut [f64], layer: usize) -> Matrix {
        let bn = &pass.bn;
        let (n, m) = (dy.rows(), dy.cols());
        let gamma = self.seg(p, SegmentKind::BnScale, layer);
        let scale_r = self.layout.find(SegmentKind::BnScale, layer).unwrap();
        let shift_r = self.layout.find(SegmentKind::BnShift, layer).unwrap();
        let mut sum_dx = vec![0.0; m];
        let mut sum_dx_xhat = vec![0.0; m];
        for r in 0..n {
            for j in 0..m {
                let g = dy.get(r, j);
                let xh = bn.xhat.get(r, j);
                grad[scale_r.start + j] += g * xh;
                grad[shift_r.start + j] += g;
                let dxh = g * gamma[j];
                sum_dx[j] += dxh;
                sum_dx_xhat[j] += dxh * xh;
            }
        }
        let nf = n as f64;
        let mut dz = Matrix::zeros(n, m);
        for r in 0..n {
            for j in 0..m {
                let dxh = dy.get(r, j) * gamma[j];
                let xh = bn.xhat.get(r, j);
                dz.set(
                    r,
                    j,
                    bn.inv_std[j] / nf * (nf * dxh - sum_dx[j] - xh * sum_dx_xhat[j]),
                );
            }
        }
        dz
    }

    /// Exponential moving average of the running statistics toward `pass`'s batch moments.
    fn track_running_stats(&self, params: &mut ParamVector, pass: &ForwardPass) {
        let l = self.arch.bn_after_layer;
        let mean_r = self.layout.find(SegmentKind::BnRunningMean, l).unwrap();
        let var_r = self.layout.find(SegmentKind::BnRunningVar, l).unwrap();
        let p = params.as_mut_slice();
        for (slot, m) in p[mean_r].iter_mut().zip(&pass.bn.mean) {
            *slot = (1.0 - BN_MOMENTUM) * *slot + BN_MOMENTUM * m;
        }
        for (slot, v) in p[var_r].iter_mut().zip(&pass.bn.var) {
            *slot = (1.0 - BN_MOMENTUM) * *slot + BN_MOMENTUM * v;
        }
    }

    /// Inputs to the batch-norm layer for every row of `features`.
    fn bn_inputs(&self, params: &ParamVector, features: &Matrix) -> Result<Matrix> {
        self.check_inputs(params, features)?;
        let p = params.as_slice();
        let mut h = features.clone();
        for l in 0..=self.arch.bn_after_layer {
            let z = h.affine(
                self.seg(p, SegmentKind::Weight, l),
                self.seg(p, SegmentKind::Bias, l),
            );
            if l == self.arch.bn_after_layer {
                return Ok(z);
            }
            h = z;
            h.as_mut_slice().iter_mut().for_each(|v| *v = v.tanh());
        }
        unreachable!()
    }

    /// Replaces the running statistics with the population moments of the
    /// batch-norm inputs over `data`; every other coordinate is left as is.
    pub fn bn_stat_refresh(&self, params: &ParamVector, data: &DomainDataset) -> Result<ParamVector> {
        if data.len() < 2 {
            return Err(Error::BatchSize {
                got: data.len(),
                min: 2,
            });
        }
        let z = self.bn_inputs(params, data.features())?;
        let (mean, var) = column_moments(&z);
        let l = self.arch.bn_after_layer;
        let mut out = params.clone();
        let p = out.as_mut_slice();
        p[self.layout.find(SegmentKind::BnRunningMean, l).unwrap()].copy_from_slice(&mean);
        p[self.layout.find(SegmentKind::BnRunningVar, l).unwrap()].copy_from_slice(&var);
        Ok(out)
    }
}

impl Model for Mlp {
    fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    fn min_batch(&self) -> usize {
        2
    }

    fn loss_and_grad(&self, params: &ParamVector, batch: &Batch) -> Result<(f64, GradientVector)> {
        let pass = self.forward(params, &batch.features, Mode::Train)?;
        self.backward(params, &pass, &batch.labels)
    }

    /// Also moves the running statistics toward the batch moments, unless
    /// `alpha` is zero, which freezes the model entirely.
    fn sgd_step_with(
        &self,
        params: &ParamVector,
        batch: &Batch,
        alpha: f64,
        direction: &mut dyn FnMut(GradientVector) -> Result<GradientVector>,
    ) -> Result<(ParamVector, GradientVector)> {
        let pass = self.forward(params, &batch.features, Mode::Train)?;
        let (_, grad) = self.backward(params, &pass, &batch.labels)?;
        let dir = direction(grad)?;
        check_len(params.len(), dir.len())?;
        if alpha == 0.0 {
            return Ok((params.clone(), dir));
        }
        let mut next = crate::numerics::axpy(params, -alpha, &dir)?;
        self.track_running_stats(&mut next, &pass);
        Ok((next, dir))
    }

    fn evaluate(&self, params: &ParamVector, data: &DomainDataset) -> Result<EvalMetrics> {
        if data.is_empty() {
            return Err(Error::invalid("cannot evaluate on an empty dataset"));
        }
        let pass = self.forward(params, data.features(), Mode::Eval)?;
        let (loss, _) = softmax_xent(&pass.logits, data.labels())?;
        let preds: Vec<usize> = (0..pass.logits.rows())
            .map(|i| argmax(pass.logits.row(i)))
            .collect();
        EvalMetrics::from_predictions(&preds, data.labels(), self.arch.num_classes, loss)
    }
}

/// Per-column mean and biased variance, computed in two passes.
fn column_moments(z: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let (n, m) = (z.rows() as f64, z.cols());
    let mut mean = vec![0.0; m];
    for i in 0..z.rows() {
        for (acc, v) in mean.iter_mut().zip(z.row(i)) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= n);
    let mut var = vec![0.0; m];
    for i in 0..z.rows() {
        for ((acc, v), mu) in var.iter_mut().zip(z.row(i)).zip(&mean) {
            *acc += (v - mu) * (v - mu);
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    (mean, var)
}

/// Total cross-entropy averaged over rows, and `softmax - onehot` per row.
fn softmax_xent(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    check_len(logits.rows(), labels.len())?;
    let mut probs = logits.clone();
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = probs.row_mut(i);
        if y >= row.len() {
            return Err(Error::invalid(format!("label {y} out of range")));
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[y];
        for v in row.iter_mut() {
            *v = (*v - log_z).exp();
        }
        row[y] -= 1.0;
    }
    let loss = loss / labels.len() as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross-entropy"));
    }
    Ok((loss, probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DomainDataset;

    fn net() -> Mlp {
        Mlp::new(MlpArchitecture::new(2, vec![8, 4], 2, 0).unwrap()).unwrap()
    }

    fn random_batch(rng: &mut Rng, n: usize, d: usize, c: usize) -> Batch {
        let x = Matrix::from_vec(n, d, rng.gaussian_vec(n * d, 0.0, 1.0).unwrap()).unwrap();
        let y = (0..n).map(|_| rng.below(c)).collect();
        Batch::new(x, y).unwrap()
    }

    #[test]
    fn zero_network_is_uniform() {
        let m = net();
        let params = ParamVector::zeros(m.layout().len());
        let mut rng = Rng::new(1);
        let batch = random_batch(&mut rng, 6, 2, 2);
        let pass = m.forward(&params, &batch.features, Mode::Train).unwrap();
        assert!(pass.logits.as_slice().iter().all(|&v| v == 0.0));
        let (loss, _) = m.loss_and_grad(&params, &batch).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn normalization_identity() {
        let m = net();
        let mut rng = Rng::new(2);
        let params = m.init_params(&mut rng);
        let batch = random_batch(&mut rng, 13, 2, 2);
        let pass = m.forward(&params, &batch.features, Mode::Train).unwrap();
        let (mean, var) = column_moments(pass.normalized());
        for (mu, v) in mean.iter().zip(&var) {
            assert!(mu.abs() < 1e-9, "mean {mu}");
            assert!((v - 1.0).abs() < 1e-9, "var {v}");
        }
    }

    #[test]
    fn train_mode_needs_two_rows() {
        let m = net();
        let params = m.init_params(&mut Rng::new(0));
        let batch = random_batch(&mut Rng::new(0), 1, 2, 2);
        assert!(matches!(
            m.loss_and_grad(&params, &batch),
            Err(Error::BatchSize { got: 1, min: 2 })
        ));
        assert!(m.forward(&params, &batch.features, Mode::Eval).is_ok());
    }

    #[test]
    fn eval_mode_permutes_with_rows() {
        let m = net();
        let mut rng = Rng::new(3);
        let params = m.init_params(&mut rng);
        let batch = random_batch(&mut rng, 9, 2, 2);
        let perm = rng.permutation(9);
        let a = m.forward(&params, &batch.features, Mode::Eval).unwrap();
        let b = m
            .forward(&params, &batch.features.select_rows(&perm), Mode::Eval)
            .unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(a.logits.row(i), b.logits.row(k));
        }
    }

    #[test]
    fn running_stat_gradient_is_zero() {
        let m = net();
        let mut rng = Rng::new(4);
        let params = m.init_params(&mut rng);
        let batch = random_batch(&mut rng, 8, 2, 2);
        let (_, g) = m.loss_and_grad(&params, &batch).unwrap();
        for r in m.layout().running_stat_ranges() {
            assert!(g.segment(r).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn duplicated_rows_leave_loss_and_grad() {
        let m = net();
        let mut rng = Rng::new(5);
        let params = m.init_params(&mut rng);
        let batch = random_batch(&mut rng, 7, 2, 2);
        let idx: Vec<usize> = (0..7).chain(0..7).collect();
        let doubled = Batch::new(
            batch.features.select_rows(&idx),
            idx.iter().map(|&i| batch.labels[i]).collect(),
        )
        .unwrap();
        let (l1, g1) = m.loss_and_grad(&params, &batch).unwrap();
        let (l2, g2) = m.loss_and_grad(&params, &doubled).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.iter().zip(g2.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_step_freezes_everything() {
        let m = net();
        let mut rng = Rng::new(6);
        let params = m.init_params(&mut rng);
        let batch = random_batch(&mut rng, 8, 2, 2);
        let (next, _) = m.sgd_step(&params, &batch, 0.0).unwrap();
        assert!(next.bit_eq(&params));
        let (moved, _) = m.sgd_step(&params, &batch, 0.1).unwrap();
        assert!(!moved.bit_eq(&params));
    }

    fn dataset(rng: &mut Rng, n: usize) -> DomainDataset {
        let b = random_batch(rng, n, 2, 2);
        DomainDataset::new("d", b.features, b.labels, 2).unwrap()
    }

    #[test]
    fn bn_refresh_matches_two_pass_oracle() {
        let m = net();
        let mut rng = Rng::new(7);
        let params = m.init_params(&mut rng);
        let data = dataset(&mut rng, 40);
        let refreshed = m.bn_stat_refresh(&params, &data).unwrap();

        // oracle: recompute first-layer pre-activations by hand
        let p = params.as_slice();
        let w = &p[m.layout().find(SegmentKind::Weight, 0).unwrap()];
        let b = &p[m.layout().find(SegmentKind::Bias, 0).unwrap()];
        let mut cols = vec![Vec::new(); 8];
        for i in 0..data.len() {
            let x = data.features().row(i);
            for o in 0..8 {
                cols[o].push(b[o] + w[2 * o] * x[0] + w[2 * o + 1] * x[1]);
            }
        }
        let mean_r = m.layout().find(SegmentKind::BnRunningMean, 0).unwrap();
        let var_r = m.layout().find(SegmentKind::BnRunningVar, 0).unwrap();
        for o in 0..8 {
            let mu = cols[o].iter().sum::<f64>() / 40.0;
            let var = cols[o].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 40.0;
            assert!((refreshed[mean_r.start + o] - mu).abs() < 1e-10);
            assert!((refreshed[var_r.start + o] - var).abs() < 1e-10);
        }
        // isolation
        let bn_stats: Vec<bool> = {
            let mut mask = vec![false; params.len()];
            for r in m.layout().running_stat_ranges() {
                mask[r].iter_mut().for_each(|v| *v = true);
            }
            mask
        };
        for i in 0..params.len() {
            if !bn_stats[i] {
                assert_eq!(params[i].to_bits(), refreshed[i].to_bits());
            }
        }
        // fixed point
        let again = m.bn_stat_refresh(&refreshed, &data).unwrap();
        for i in 0..params.len() {
            assert!((again[i] - refreshed[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn bn_refresh_needs_two_rows() {
        let m = net();
        let mut rng = Rng::new(8);
        let params = m.init_params(&mut rng);
        let data = dataset(&mut rng, 1);
        assert!(matches!(
            m.bn_stat_refresh(&params, &data),
            Err(Error::BatchSize { .. })
        ));
    }

    #[test]
    fn evaluate_is_permutation_invariant() {
        let m = net();
        let mut rng = Rng::new(9);
        let params = m.init_params(&mut rng);
        let data = dataset(&mut rng, 30);
        let perm = rng.permutation(30);
        let shuffled = data.select(&perm);
        let a = m.evaluate(&params, &data).unwrap();
        let b = m.evaluate(&params, &shuffled).unwrap();
        assert_eq!(a.per_class_accuracy, b.per_class_accuracy);
        assert!((a.loss - b.loss).abs() < 1e-12);
    }
}
