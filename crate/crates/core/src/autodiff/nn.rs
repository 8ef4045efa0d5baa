use super::{GradSink, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Which statistics normalize a batch-norm input.
#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a, T> {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with stored running statistics.
    Eval { mean: &'a [T], var: &'a [T] },
}

/// Per-channel statistics of a training-mode batch; `var` is the unbiased
/// estimate used to update running averages.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// `(batch, channels, spatial)` for `[N, C]` or `[N, C, H, W]` inputs.
fn bn_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [n, c] => Ok((n, c, 1)),
        [n, c, h, w] => Ok((n, c, h * w)),
        _ => Err(Error::invalid_shape(
            "batch_norm",
            format!("expected [N, C] or [N, C, H, W], got {shape:?}"),
        )),
    }
}

impl<T: Real> Tape<T> {
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let (n, c, hw) = bn_dims(self.shape(input))?;
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(Error::shape("batch_norm", self.shape(input), self.shape(p)));
            }
        }
        let x = self.value(input).data();
        let count = n * hw;
        if count == 0 {
            return Err(Error::invalid_shape("batch_norm", "empty batch"));
        }
        let count_t = T::from_usize(count).expect("count fits");
        let channel =
            |ch: usize| (0..n).flat_map(move |s| (s * c + ch) * hw..(s * c + ch + 1) * hw);

        let (mean, var, stats) = match mode {
            BnMode::Train => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut acc = T::zero();
                    for i in channel(ch) {
                        acc += x[i];
                    }
                    mean[ch] = acc / count_t;
                    let mut sq = T::zero();
                    for i in channel(ch) {
                        let d = x[i] - mean[ch];
                        sq += d * d;
                    }
                    var[ch] = sq / count_t;
                }
                let unbiased = if count > 1 {
                    let corr = count_t / (count_t - T::one());
                    var.iter().map(|&v| v * corr).collect()
                } else {
                    var.clone()
                };
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::invalid_shape(
                        "batch_norm",
                        format!(
                            "running statistics have {} entries, input has {c} channels",
                            mean.len()
                        ),
                    ));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };

        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for ch in 0..c {
            for i in channel(ch) {
                let h = (x[i] - mean[ch]) * inv_std[ch];
                xhat[i] = h;
                out[i] = g[ch] * h + b[ch];
            }
        }
        let shape = self.shape(input).to_vec();
        let op = Op::BatchNorm {
            input,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats: stats.is_some(),
        };
        let v = self.push(
            "batch_norm",
            op,
            Tensor::new(shape, out)?,
            &[input, gamma, beta],
        )?;
        Ok((v, stats))
    }

    /// Mean softmax cross-entropy of `logits[N, K]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = match *self.shape(logits) {
            [n, k] => (n, k),
            ref s => {
                return Err(Error::invalid_shape(
                    "cross_entropy",
                    format!("logits must be [N, K], got {s:?}"),
                ))
            }
        };
        if labels.len() != n {
            return Err(Error::InvalidArgument(format!(
                "cross_entropy: {} labels for {n} rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidArgument(format!(
                "cross_entropy: label {bad} out of range [0, {k})"
            )));
        }
        let z = self.value(logits).data();
        let mut probs = vec![T::zero(); n * k];
        let mut total = T::zero();
        for (row, &label) in labels.iter().enumerate() {
            let zr = &z[row * k..(row + 1) * k];
            let m = zr.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for (p, &zi) in probs[row * k..(row + 1) * k].iter_mut().zip(zr) {
                *p = (zi - m).exp();
                s += *p;
            }
            probs[row * k..(row + 1) * k]
                .iter_mut()
                .for_each(|p| *p /= s);
            total += m + s.ln() - zr[label];
        }
        let loss = total / T::from_usize(n.max(1)).expect("count fits");
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.push("cross_entropy", op, Tensor::scalar(loss), &[logits])
    }
}

pub(super) fn backward<T: Real>(tape: &Tape<T>, op: &Op<T>, dy: &[T], sink: &mut GradSink<'_, T>) {
    match op {
        Op::BatchNorm {
            input,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
        } => {
            let (n, c, hw) = bn_dims(tape.shape(*input)).expect("checked in forward");
            let channel =
                |ch: usize| (0..n).flat_map(move |s| (s * c + ch) * hw..(s * c + ch + 1) * hw);
            let g = tape.value(*gamma).data();
            let mut sum_dy = vec![T::zero(); c];
            let mut sum_dy_xhat = vec![T::zero(); c];
            for ch in 0..c {
                for i in channel(ch) {
                    sum_dy[ch] += dy[i];
                    sum_dy_xhat[ch] += dy[i] * xhat[i];
                }
            }
            if let Some(gg) = sink.get(*gamma) {
                gg.iter_mut().zip(&sum_dy_xhat).for_each(|(a, &b)| *a += b);
            }
            if let Some(gb) = sink.get(*beta) {
                gb.iter_mut().zip(&sum_dy).for_each(|(a, &b)| *a += b);
            }
            if let Some(gx) = sink.get(*input) {
                let m = T::from_usize(n * hw).expect("count fits");
                for ch in 0..c {
                    let scale = g[ch] * inv_std[ch];
                    if *batch_stats {
                        let mean_dy = sum_dy[ch] / m;
                        let mean_dy_xhat = sum_dy_xhat[ch] / m;
                        for i in channel(ch) {
                            gx[i] += scale * (dy[i] - mean_dy - xhat[i] * mean_dy_xhat);
                        }
                    } else {
                        for i in channel(ch) {
                            gx[i] += scale * dy[i];
                        }
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            if let Some(gl) = sink.get(*logits) {
                let n = labels.len();
                let k = probs.len() / n.max(1);
                let scale = dy[0] / T::from_usize(n.max(1)).expect("count fits");
                for (row, &label) in labels.iter().enumerate() {
                    for j in 0..k {
                        let onehot = if j == label { T::one() } else { T::zero() };
                        gl[row * k + j] += scale * (probs[row * k + j] - onehot);
                    }
                }
            }
        }
        _ => unreachable!("not a normalization/loss op"),
    }
}
