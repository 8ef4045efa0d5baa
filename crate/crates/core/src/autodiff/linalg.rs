use super::{GradSink, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{nchw, Tensor};

/// `[B?, M, K] x [B?, K, N]` extents, with B = 1 for plain matrices.
fn bmm_dims(
    op: &'static str,
    sa: &[usize],
    sb: &[usize],
    batched: bool,
) -> Result<(usize, usize, usize, usize)> {
    let (b, m, k, k2, n) = match (batched, sa, sb) {
        (false, &[m, k], &[k2, n]) => (1, m, k, k2, n),
        (true, &[b, m, k], &[b2, k2, n]) if b == b2 => (b, m, k, k2, n),
        _ => return Err(Error::shape(op, sa, sb)),
    };
    if k != k2 {
        return Err(Error::shape(op, sa, sb));
    }
    Ok((b, m, k, n))
}

impl<T: Real> Tape<T> {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, m, k, n) = bmm_dims("matmul", self.shape(a), self.shape(b), false)?;
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        self.push(
            "matmul",
            Op::MatMul(a, b),
            Tensor::new(vec![m, n], out)?,
            &[a, b],
        )
    }

    /// Independent matrix products per leading index.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (batch, m, k, n) = bmm_dims("batch_matmul", self.shape(a), self.shape(b), true)?;
        let mut out = vec![T::zero(); batch * m * n];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &va[i * m * k..(i + 1) * m * k],
                k as isize,
                1,
                &vb[i * k * n..(i + 1) * k * n],
                n as isize,
                1,
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
                n as isize,
                1,
            );
        }
        self.push(
            "batch_matmul",
            Op::BatchMatMul(a, b),
            Tensor::new(vec![batch, m, n], out)?,
            &[a, b],
        )
    }

    /// Adds a bias along the last axis: `x[.., r, j] + b[.., j]`, where the
    /// bias shape is the input shape with the row axis removed.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x);
        let sb = self.shape(b);
        let rank = sx.len();
        let expected: Option<Vec<usize>> = (rank >= 2).then(|| {
            let mut s = sx.to_vec();
            s.remove(rank - 2);
            s
        });
        if expected.as_deref() != Some(sb) {
            return Err(Error::shape("add_bias", sx, sb));
        }
        let n = sx[rank - 1];
        let rows = sx[rank - 2];
        let vb = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for (i, chunk) in out.chunks_mut(rows * n).enumerate() {
            let bias = &vb[i * n..(i + 1) * n];
            for row in chunk.chunks_mut(n) {
                row.iter_mut().zip(bias).for_each(|(o, &bv)| *o += bv);
            }
        }
        let shape = sx.to_vec();
        self.push(
            "add_bias",
            Op::AddBias(x, b),
            Tensor::new(shape, out)?,
            &[x, b],
        )
    }

    /// `x[n, c, h, w] + b[c]`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let [_, c, h, w] = nchw("add_channel_bias", self.shape(x))?;
        if self.shape(b) != [c] {
            return Err(Error::shape(
                "add_channel_bias",
                self.shape(x),
                self.shape(b),
            ));
        }
        let vb = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for (i, plane) in out.chunks_mut(h * w).enumerate() {
            let bv = vb[i % c];
            plane.iter_mut().for_each(|o| *o += bv);
        }
        let shape = self.shape(x).to_vec();
        self.push(
            "add_channel_bias",
            Op::AddChannelBias(x, b),
            Tensor::new(shape, out)?,
            &[x, b],
        )
    }
}

pub(super) fn backward<T: Real>(tape: &Tape<T>, op: &Op<T>, dy: &[T], sink: &mut GradSink<'_, T>) {
    match *op {
        Op::MatMul(a, b) | Op::BatchMatMul(a, b) => {
            let batched = matches!(op, Op::BatchMatMul(..));
            let (batch, m, k, n) = bmm_dims("matmul", tape.shape(a), tape.shape(b), batched)
                .expect("checked in forward");
            let va = tape.value(a).data();
            let vb = tape.value(b).data();
            if let Some(ga) = sink.get(a) {
                // dA = dC · Bᵀ
                for i in 0..batch {
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        &dy[i * m * n..(i + 1) * m * n],
                        n as isize,
                        1,
                        &vb[i * k * n..(i + 1) * k * n],
                        1,
                        n as isize,
                        T::one(),
                        &mut ga[i * m * k..(i + 1) * m * k],
                        k as isize,
                        1,
                    );
                }
            }
            if let Some(gb) = sink.get(b) {
                // dB = Aᵀ · dC
                for i in 0..batch {
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        &va[i * m * k..(i + 1) * m * k],
                        1,
                        k as isize,
                        &dy[i * m * n..(i + 1) * m * n],
                        n as isize,
                        1,
                        T::one(),
                        &mut gb[i * k * n..(i + 1) * k * n],
                        n as isize,
                        1,
                    );
                }
            }
        }
        Op::AddBias(x, b) => {
            if let Some(gx) = sink.get(x) {
                gx.iter_mut().zip(dy).for_each(|(g, &d)| *g += d);
            }
            let sx = tape.shape(x);
            let rank = sx.len();
            let (rows, n) = (sx[rank - 2], sx[rank - 1]);
            if let Some(gb) = sink.get(b) {
                for (i, chunk) in dy.chunks(rows * n).enumerate() {
                    let gbias = &mut gb[i * n..(i + 1) * n];
                    for row in chunk.chunks(n) {
                        gbias.iter_mut().zip(row).for_each(|(g, &d)| *g += d);
                    }
                }
            }
        }
        Op::AddChannelBias(x, b) => {
            if let Some(gx) = sink.get(x) {
                gx.iter_mut().zip(dy).for_each(|(g, &d)| *g += d);
            }
            let [_, c, h, w] = nchw("add_channel_bias", tape.shape(x)).expect("checked in forward");
            if let Some(gb) = sink.get(b) {
                for (i, plane) in dy.chunks(h * w).enumerate() {
                    let mut acc = T::zero();
                    for &d in plane {
                        acc += d;
                    }
                    gb[i % c] += acc;
                }
            }
        }
        _ => unreachable!("not a linear-algebra op"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn identity_times_matrix() {
        let mut tape = Tape::new();
        let i = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = tape.matmul(i, m).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn row_times_column_is_dot() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.leaf(t(&[2, 1], &[3.0, 4.0]));
        let p = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(p).data(), &[11.0]);
    }

    #[test]
    fn inner_extent_mismatch_is_rejected() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::<f64>::zeros(vec![2, 3]));
        let b = tape.leaf(Tensor::<f64>::zeros(vec![2, 3]));
        assert!(tape.matmul(a, b).is_err());
    }

    #[test]
    fn matmul_gradients_match_closed_form() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.leaf(t(&[2, 1], &[3.0, 4.0]));
        let p = tape.matmul(a, b).unwrap();
        let loss = tape.sum(p).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.raw(a).unwrap(), &[3.0, 4.0]);
        assert_eq!(g.raw(b).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn add_bias_broadcasts_over_rows() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::zeros(vec![2, 3, 2]));
        let b = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.add_bias(x, b).unwrap();
        assert_eq!(
            tape.value(y).data(),
            &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0, 3.0, 4.0]
        );
        let bad = tape.leaf(Tensor::<f64>::zeros(vec![2]));
        assert!(tape.add_bias(x, bad).is_err());
    }
}
