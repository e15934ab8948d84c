//! Neural-network operations: softmax, layer normalization, GELU,
//! embedding lookup, masked cross-entropy and dropout.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{IdTensor, Scalar, Tensor, TensorError, TensorResult, NO_LABEL};

impl<S: Scalar> Tensor<S> {
    /// Softmax along the last axis, computed with max-subtraction.
    ///
    /// Entries may be large negative sentinels (attention masking); NaN
    /// input is rejected.
    pub fn softmax(&self) -> TensorResult<Tensor<S>> {
        let last = *self.shape().last().unwrap();
        let src = self.data();
        if src.iter().any(|v| v.is_nan_val()) {
            return Err(TensorError::NumericError("NaN input to softmax".into()));
        }
        let mut data = Vec::with_capacity(src.len());
        for row in src.chunks(last) {
            let max = row
                .iter()
                .copied()
                .fold(row[0], |acc, v| acc.maximum(v));
            let mut denom = S::ZERO;
            let start = data.len();
            for &v in row {
                let e = (v - max).exp();
                denom += e;
                data.push(e);
            }
            for v in &mut data[start..] {
                *v = *v / denom;
            }
        }
        drop(src);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |grads, out_grad, out_data, inputs| {
                if !inputs[0].requires_grad() {
                    return;
                }
                // dx = y ⊙ (dy − Σ_j dy_j·y_j) per row
                let mut contrib = vec![S::ZERO; out_grad.len()];
                for r in 0..out_grad.len() / last {
                    let o = r * last;
                    let mut dot = S::ZERO;
                    for j in 0..last {
                        dot += out_grad[o + j] * out_data[o + j];
                    }
                    for j in 0..last {
                        contrib[o + j] = out_data[o + j] * (out_grad[o + j] - dot);
                    }
                }
                grads.add(&inputs[0], &contrib);
            }),
        ))
    }

    /// Per-position standardization over the last axis followed by the
    /// affine map `gamma * xhat + beta`.
    pub fn layer_norm(
        &self,
        gamma: &Tensor<S>,
        beta: &Tensor<S>,
        eps: f64,
    ) -> TensorResult<Tensor<S>> {
        let hidden = *self.shape().last().unwrap();
        if gamma.numel() != hidden || beta.numel() != hidden {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                left: self.shape().to_vec(),
                right: gamma.shape().to_vec(),
            });
        }
        if eps <= 0.0 {
            return Err(TensorError::InvalidShape("layer_norm eps must be > 0".into()));
        }
        let eps = S::from_f64(eps);
        let inv_h = S::from_f64(1.0 / hidden as f64);

        let src = self.data();
        let g = gamma.data();
        let b = beta.data();
        let rows = src.len() / hidden;
        let mut data = Vec::with_capacity(src.len());
        let mut inv_std = Vec::with_capacity(rows);
        for row in src.chunks(hidden) {
            let mut mean = S::ZERO;
            for &v in row {
                mean += v;
            }
            mean = mean * inv_h;
            let mut var = S::ZERO;
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var = var * inv_h;
            let istd = S::ONE / (var + eps).sqrt();
            inv_std.push(istd);
            for (j, &v) in row.iter().enumerate() {
                data.push(g[j] * ((v - mean) * istd) + b[j]);
            }
        }
        drop(src);
        drop(g);
        drop(b);

        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |grads, out_grad, _out, inputs| {
                let (x, gamma, beta) = (&inputs[0], &inputs[1], &inputs[2]);
                let src = x.data();
                let g = gamma.data();
                let rows = src.len() / hidden;

                let mut dx = if x.requires_grad() {
                    vec![S::ZERO; src.len()]
                } else {
                    Vec::new()
                };
                let mut dgamma = vec![S::ZERO; hidden];
                let mut dbeta = vec![S::ZERO; hidden];

                for r in 0..rows {
                    let o = r * hidden;
                    let row = &src[o..o + hidden];
                    let mut mean = S::ZERO;
                    for &v in row {
                        mean += v;
                    }
                    mean = mean * inv_h;
                    let mut var = S::ZERO;
                    for &v in row {
                        let d = v - mean;
                        var += d * d;
                    }
                    var = var * inv_h;
                    let istd = S::ONE / (var + eps).sqrt();

                    // dy scaled by gamma, plus the two row means needed for dx
                    let mut mean_gdy = S::ZERO;
                    let mut mean_gdy_xhat = S::ZERO;
                    for j in 0..hidden {
                        let xhat = (row[j] - mean) * istd;
                        let dy = out_grad[o + j];
                        dgamma[j] += dy * xhat;
                        dbeta[j] += dy;
                        let gdy = g[j] * dy;
                        mean_gdy += gdy;
                        mean_gdy_xhat += gdy * xhat;
                    }
                    mean_gdy = mean_gdy * inv_h;
                    mean_gdy_xhat = mean_gdy_xhat * inv_h;
                    if x.requires_grad() {
                        for j in 0..hidden {
                            let xhat = (row[j] - mean) * istd;
                            let gdy = g[j] * out_grad[o + j];
                            dx[o + j] = (gdy - mean_gdy - xhat * mean_gdy_xhat) * istd;
                        }
                    }
                }
                drop(src);
                drop(g);
                if x.requires_grad() {
                    grads.add(x, &dx);
                }
                if gamma.requires_grad() {
                    grads.add(gamma, &dgamma);
                }
                if beta.requires_grad() {
                    grads.add(beta, &dbeta);
                }
            }),
        ))
    }

    /// Exact Gaussian-CDF GELU: `0.5 · x · (1 + erf(x / sqrt(2)))`.
    pub fn gelu(&self) -> Tensor<S> {
        let half = S::from_f64(0.5);
        let inv_sqrt2 = S::from_f64(std::f64::consts::FRAC_1_SQRT_2);
        let data: Vec<S> = self
            .data()
            .iter()
            .map(|&x| half * x * (S::ONE + (x * inv_sqrt2).erf()))
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |grads, out_grad, _out, inputs| {
                if !inputs[0].requires_grad() {
                    return;
                }
                // d/dx = Φ(x) + x·φ(x)
                let inv_sqrt_2pi = S::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                let x = inputs[0].data();
                let contrib: Vec<S> = x
                    .iter()
                    .zip(out_grad)
                    .map(|(&x, &dy)| {
                        let cdf = half * (S::ONE + (x * inv_sqrt2).erf());
                        let pdf = inv_sqrt_2pi * (-half * x * x).exp();
                        dy * (cdf + x * pdf)
                    })
                    .collect();
                drop(x);
                grads.add(&inputs[0], &contrib);
            }),
        )
    }

    /// Row gather: `self` is a `[V, H]` table, ids select rows; the result
    /// has shape `ids.shape() ++ [H]`. Backward scatter-adds into the table.
    pub fn embedding_lookup(&self, ids: &IdTensor) -> TensorResult<Tensor<S>> {
        if self.ndim() != 2 {
            return Err(TensorError::InvalidShape(format!(
                "embedding table must be 2-D, got {:?}",
                self.shape()
            )));
        }
        let vocab = self.shape()[0];
        let hidden = self.shape()[1];
        if let Some(&bad) = ids.data().iter().find(|&&id| id as usize >= vocab) {
            return Err(TensorError::IndexOutOfRange {
                index: bad as i64,
                bound: vocab,
            });
        }
        let table = self.data();
        let mut data = Vec::with_capacity(ids.numel() * hidden);
        for &id in ids.data() {
            let o = id as usize * hidden;
            data.extend_from_slice(&table[o..o + hidden]);
        }
        drop(table);
        let mut out_shape = ids.shape().to_vec();
        out_shape.push(hidden);
        let id_list: Vec<u32> = ids.data().to_vec();
        Ok(Tensor::from_op(
            out_shape,
            data,
            vec![self.clone()],
            Box::new(move |grads, out_grad, _out, inputs| {
                if !inputs[0].requires_grad() {
                    return;
                }
                let mut contrib = vec![S::ZERO; inputs[0].numel()];
                for (pos, &id) in id_list.iter().enumerate() {
                    let dst = id as usize * hidden;
                    let src = pos * hidden;
                    for j in 0..hidden {
                        contrib[dst + j] += out_grad[src + j];
                    }
                }
                grads.add(&inputs[0], &contrib);
            }),
        ))
    }

    /// Mean negative log-softmax over labeled rows of an `[N, C]` logit
    /// matrix. Rows whose target is [`NO_LABEL`] contribute neither loss
    /// nor gradient; with zero labeled rows the loss is 0 with zero
    /// gradient.
    pub fn cross_entropy(&self, targets: &[i64]) -> TensorResult<Tensor<S>> {
        if self.ndim() != 2 {
            return Err(TensorError::InvalidShape(format!(
                "cross_entropy expects [N, C] logits, got {:?}",
                self.shape()
            )));
        }
        let (rows, classes) = (self.shape()[0], self.shape()[1]);
        if targets.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: self.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        for &t in targets {
            if t != NO_LABEL && !(0..classes as i64).contains(&t) {
                return Err(TensorError::IndexOutOfRange {
                    index: t,
                    bound: classes,
                });
            }
        }

        let labeled = targets.iter().filter(|&&t| t != NO_LABEL).count();
        let logits = self.data();
        let mut total = S::ZERO;
        for (r, &t) in targets.iter().enumerate() {
            if t == NO_LABEL {
                continue;
            }
            let row = &logits[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(row[0], |a, v| a.maximum(v));
            let mut denom = S::ZERO;
            for &v in row {
                denom += (v - max).exp();
            }
            // -log softmax = logsumexp - logit[target]
            total += denom.ln() + max - row[t as usize];
        }
        let loss = if labeled == 0 {
            S::ZERO
        } else {
            total / S::from_f64(labeled as f64)
        };
        drop(logits);

        let targets: Vec<i64> = targets.to_vec();
        Ok(Tensor::from_op(
            vec![1],
            vec![loss],
            vec![self.clone()],
            Box::new(move |grads, out_grad, _out, inputs| {
                if !inputs[0].requires_grad() || labeled == 0 {
                    return;
                }
                let upstream = out_grad[0] / S::from_f64(labeled as f64);
                let logits = inputs[0].data();
                let mut contrib = vec![S::ZERO; logits.len()];
                for (r, &t) in targets.iter().enumerate() {
                    if t == NO_LABEL {
                        continue;
                    }
                    let row = &logits[r * classes..(r + 1) * classes];
                    let max = row.iter().copied().fold(row[0], |a, v| a.maximum(v));
                    let mut denom = S::ZERO;
                    for &v in row {
                        denom += (v - max).exp();
                    }
                    for j in 0..classes {
                        let p = (row[j] - max).exp() / denom;
                        let onehot = if j as i64 == t { S::ONE } else { S::ZERO };
                        contrib[r * classes + j] = (p - onehot) * upstream;
                    }
                }
                drop(logits);
                grads.add(&inputs[0], &contrib);
            }),
        ))
    }

    /// Inverted dropout: keeps each element with probability `1 - rate`,
    /// scaling survivors by `1 / (1 - rate)`. A rate of 0 is the identity.
    pub fn dropout(&self, rate: f64, rng: &mut ChaCha8Rng) -> Tensor<S> {
        if rate <= 0.0 {
            return self.clone();
        }
        let keep_scale = S::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<S> = (0..self.numel())
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    S::ZERO
                } else {
                    keep_scale
                }
            })
            .collect();
        let data: Vec<S> = self
            .data()
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m)
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |grads, out_grad, _out, inputs| {
                if !inputs[0].requires_grad() {
                    return;
                }
                let contrib: Vec<S> = out_grad
                    .iter()
                    .zip(&mask)
                    .map(|(&g, &m)| g * m)
                    .collect();
                grads.add(&inputs[0], &contrib);
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() < tol, "{a} vs {b}");
    }

    #[test]
    fn softmax_symmetry_and_closed_form() {
        let t = Tensor::<f32>::from_vec(&[2], vec![0.0, 0.0]).unwrap();
        assert_eq!(t.softmax().unwrap().to_vec(), vec![0.5, 0.5]);

        let t = Tensor::<f64>::from_vec(
            &[3],
            vec![1.0f64.ln(), 2.0f64.ln(), 3.0f64.ln()],
        )
        .unwrap();
        let out = t.softmax().unwrap().to_vec();
        assert_close(out[0], 1.0 / 6.0, 1e-12);
        assert_close(out[1], 2.0 / 6.0, 1e-12);
        assert_close(out[2], 3.0 / 6.0, 1e-12);
    }

    #[test]
    fn softmax_shift_invariance() {
        let x = Tensor::<f32>::from_vec(&[3], vec![0.1, -0.7, 2.3]).unwrap();
        let shifted = x.add(&Tensor::scalar(1000.0)).unwrap();
        let a = x.softmax().unwrap().to_vec();
        let b = shifted.softmax().unwrap().to_vec();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let t = Tensor::<f32>::uniform(&[4, 7], -5.0, 5.0, 9).unwrap();
        let out = t.softmax().unwrap();
        for row in out.to_vec().chunks(7) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        let t = Tensor::<f32>::from_vec(&[2], vec![f32::NAN, 0.0]).unwrap();
        assert!(matches!(
            t.softmax(),
            Err(TensorError::NumericError(_))
        ));
    }

    #[test]
    fn layer_norm_constant_row_maps_to_beta() {
        let x = Tensor::<f32>::constant(&[1, 3], 4.2).unwrap();
        let gamma = Tensor::<f32>::constant(&[3], 1.0).unwrap();
        let beta = Tensor::<f32>::zeros(&[3]).unwrap();
        let out = x.layer_norm(&gamma, &beta, 1e-12).unwrap().to_vec();
        for v in out {
            assert!(v.abs() < 1e-4);
        }

        let beta5 = Tensor::<f32>::constant(&[2], 5.0).unwrap();
        let gamma2 = Tensor::<f32>::constant(&[2], 1.0).unwrap();
        let x2 = Tensor::<f32>::constant(&[1, 2], 7.0).unwrap();
        let out = x2.layer_norm(&gamma2, &beta5, 1e-12).unwrap().to_vec();
        assert_eq!(out, vec![5.0, 5.0]);
    }

    #[test]
    fn layer_norm_already_standardized() {
        let x = Tensor::<f64>::from_vec(&[1, 2], vec![1.0, -1.0]).unwrap();
        let gamma = Tensor::<f64>::constant(&[2], 1.0).unwrap();
        let beta = Tensor::<f64>::zeros(&[2]).unwrap();
        let out = x.layer_norm(&gamma, &beta, 1e-12).unwrap().to_vec();
        assert_close(out[0], 1.0, 1e-6);
        assert_close(out[1], -1.0, 1e-6);
    }

    #[test]
    fn layer_norm_h_mismatch() {
        let x = Tensor::<f32>::zeros(&[2, 4]).unwrap();
        let gamma = Tensor::<f32>::constant(&[3], 1.0).unwrap();
        let beta = Tensor::<f32>::zeros(&[3]).unwrap();
        assert!(x.layer_norm(&gamma, &beta, 1e-12).is_err());
    }

    #[test]
    fn gelu_reference_points() {
        let x = Tensor::<f64>::from_vec(&[3], vec![0.0, 1.0, 10.0]).unwrap();
        let y = x.gelu().to_vec();
        assert_eq!(y[0], 0.0);
        assert_close(y[1], 0.8413447460685429, 1e-9); // Φ(1)
        assert_close(y[2], 10.0, 1e-6);
    }

    #[test]
    fn embedding_gather_and_scatter() {
        let table = Tensor::<f32>::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0])
            .unwrap()
            .trainable();
        let ids = IdTensor::new(&[1, 2], vec![1, 0]).unwrap();
        let out = table.embedding_lookup(&ids).unwrap();
        assert_eq!(out.shape(), &[1, 2, 2]);
        assert_eq!(out.to_vec(), vec![3.0, 4.0, 1.0, 2.0]);

        // duplicate ids scatter-add
        let dup = IdTensor::new(&[1, 2], vec![0, 0]).unwrap();
        table.zero_grad();
        let looked = table.embedding_lookup(&dup).unwrap();
        let w = Tensor::<f32>::from_vec(&[1, 2, 2], vec![1.0, 2.0, 10.0, 20.0]).unwrap();
        looked.mul(&w).unwrap().sum_all().backward().unwrap();
        assert_eq!(table.grad().unwrap(), vec![11.0, 22.0, 0.0, 0.0]);
    }

    #[test]
    fn embedding_rejects_out_of_range() {
        let table = Tensor::<f32>::zeros(&[2, 2]).unwrap();
        let ids = IdTensor::new(&[1, 1], vec![2]).unwrap();
        assert!(matches!(
            table.embedding_lookup(&ids),
            Err(TensorError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Tensor::<f64>::zeros(&[1, 8]).unwrap();
        let loss = logits.cross_entropy(&[3]).unwrap().item().unwrap();
        assert_close(loss, (8.0f64).ln(), 1e-12);
    }

    #[test]
    fn cross_entropy_all_no_label_is_zero() {
        let logits = Tensor::<f32>::uniform(&[3, 4], -1.0, 1.0, 2)
            .unwrap()
            .trainable();
        let loss = logits.cross_entropy(&[NO_LABEL; 3]).unwrap();
        assert_eq!(loss.item().unwrap(), 0.0);
        loss.backward().unwrap();
        assert_eq!(logits.grad().unwrap(), vec![0.0; 12]);
    }

    #[test]
    fn cross_entropy_confident_logit() {
        let logits = Tensor::<f64>::from_vec(&[1, 2], vec![10.0, 0.0]).unwrap();
        let loss = logits.cross_entropy(&[0]).unwrap().item().unwrap();
        assert_close(loss, (1.0 + (-10.0f64).exp()).ln(), 1e-12);
        assert_close(loss, 4.54e-5, 1e-7);
    }

    #[test]
    fn cross_entropy_rejects_large_target() {
        let logits = Tensor::<f32>::zeros(&[1, 4]).unwrap();
        assert!(matches!(
            logits.cross_entropy(&[4]),
            Err(TensorError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn cross_entropy_masks_unlabeled_rows() {
        // Row 1 is unlabeled: its logits must receive zero gradient.
        let logits = Tensor::<f32>::from_vec(&[2, 2], vec![1.0, -1.0, 3.0, 2.0])
            .unwrap()
            .trainable();
        let loss = logits.cross_entropy(&[0, NO_LABEL]).unwrap();
        loss.backward().unwrap();
        let g = logits.grad().unwrap();
        assert!(g[0] != 0.0 && g[1] != 0.0);
        assert_eq!(&g[2..], &[0.0, 0.0]);
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        let x = Tensor::<f32>::uniform(&[10], -1.0, 1.0, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = x.dropout(0.0, &mut rng);
        assert_eq!(x.to_vec(), y.to_vec());
    }

    #[test]
    fn dropout_is_deterministic_given_seed() {
        let x = Tensor::<f32>::constant(&[100], 1.0).unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(42);
        let mut r2 = ChaCha8Rng::seed_from_u64(42);
        let a = x.dropout(0.5, &mut r1).to_vec();
        let b = x.dropout(0.5, &mut r2).to_vec();
        assert_eq!(a, b);
        assert!(a.iter().any(|&v| v == 0.0));
        assert!(a.iter().any(|&v| v == 2.0));
    }
}
