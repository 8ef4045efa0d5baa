use super::{GradSink, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy)]
enum Bin {
    Add,
    Sub,
    Mul,
    Div,
}

/// Output shape of a binary op. Equal shapes, or one operand holding a
/// single element.
fn binary_shape<T: Real>(tape: &Tape<T>, name: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa == sb {
        return Ok(sa.to_vec());
    }
    let na = tape.value(a).numel();
    let nb = tape.value(b).numel();
    if nb == 1 {
        Ok(sa.to_vec())
    } else if na == 1 {
        Ok(sb.to_vec())
    } else {
        Err(Error::shape(name, sa, sb))
    }
}

fn stride_of(numel: usize) -> usize {
    usize::from(numel != 1)
}

impl<T: Real> Tape<T> {
    fn binary(&mut self, kind: Bin, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            Bin::Add => "add",
            Bin::Sub => "sub",
            Bin::Mul => "mul",
            Bin::Div => "div",
        };
        let shape = binary_shape(self, name, a, b)?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let (sa, sb) = (stride_of(va.len()), stride_of(vb.len()));
        let numel: usize = shape.iter().product();
        let data: Vec<T> = (0..numel)
            .map(|i| {
                let (x, y) = (va[i * sa], vb[i * sb]);
                match kind {
                    Bin::Add => x + y,
                    Bin::Sub => x - y,
                    Bin::Mul => x * y,
                    Bin::Div => x / y,
                }
            })
            .collect();
        let op = match kind {
            Bin::Add => Op::Add(a, b),
            Bin::Sub => Op::Sub(a, b),
            Bin::Mul => Op::Mul(a, b),
            Bin::Div => Op::Div(a, b),
        };
        self.push(name, op, Tensor::new(shape, data)?, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Bin::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Bin::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Bin::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Bin::Div, a, b)
    }

    fn unary(&mut self, name: &'static str, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let value = self.value(a).map(f);
        self.push(name, op, value, &[a])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary("neg", a, Op::Neg(a), |x| -x)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        self.unary("scale", a, Op::Scale(a, s), |x| x * s)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, Op::Exp(a), |x| x.exp())
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, Op::Sigmoid(a), logistic)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, Op::Relu(a), |x| {
            if x > T::zero() {
                x
            } else {
                T::zero()
            }
        })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push("sum", Op::Sum(a), Tensor::scalar(s), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let n = T::from_usize(v.numel()).expect("element count fits");
        let m = v.sum() / n;
        self.push("mean", Op::Mean(a), Tensor::scalar(m), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        self.push("reshape", Op::Reshape(a), value, &[a])
    }

    /// Collapses all but the leading dimension.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a);
        let Some(&n) = shape.first() else {
            return Err(Error::invalid_shape("flatten", "rank-0 input"));
        };
        let rest: usize = shape[1..].iter().product();
        self.reshape(a, &[n, rest])
    }
}

pub(crate) fn logistic<T: Real>(x: T) -> T {
    // Split by sign so exp never overflows.
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn accumulate_broadcast<T: Real>(
    sink: &mut GradSink<'_, T>,
    v: Var,
    contrib: impl Fn(usize) -> T,
    n: usize,
) {
    if let Some(g) = sink.get(v) {
        if g.len() == n {
            for (i, gi) in g.iter_mut().enumerate() {
                *gi += contrib(i);
            }
        } else {
            // Scalar operand broadcast over the output.
            let mut acc = T::zero();
            for i in 0..n {
                acc += contrib(i);
            }
            g[0] += acc;
        }
    }
}

pub(super) fn backward<T: Real>(
    tape: &Tape<T>,
    op: &Op<T>,
    out: &Tensor<T>,
    dy: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let n = dy.len();
    match *op {
        Op::Add(a, b) => {
            accumulate_broadcast(sink, a, |i| dy[i], n);
            accumulate_broadcast(sink, b, |i| dy[i], n);
        }
        Op::Sub(a, b) => {
            accumulate_broadcast(sink, a, |i| dy[i], n);
            accumulate_broadcast(sink, b, |i| -dy[i], n);
        }
        Op::Mul(a, b) => {
            let (va, vb) = (tape.value(a).data(), tape.value(b).data());
            let (sa, sb) = (stride_of(va.len()), stride_of(vb.len()));
            accumulate_broadcast(sink, a, |i| dy[i] * vb[i * sb], n);
            accumulate_broadcast(sink, b, |i| dy[i] * va[i * sa], n);
        }
        Op::Div(a, b) => {
            let (va, vb) = (tape.value(a).data(), tape.value(b).data());
            let (sa, sb) = (stride_of(va.len()), stride_of(vb.len()));
            accumulate_broadcast(sink, a, |i| dy[i] / vb[i * sb], n);
            accumulate_broadcast(
                sink,
                b,
                |i| {
                    let y = vb[i * sb];
                    -dy[i] * va[i * sa] / (y * y)
                },
                n,
            );
        }
        Op::Neg(a) => accumulate_broadcast(sink, a, |i| -dy[i], n),
        Op::Scale(a, s) => accumulate_broadcast(sink, a, |i| dy[i] * s, n),
        Op::Exp(a) => {
            let y = out.data();
            accumulate_broadcast(sink, a, |i| dy[i] * y[i], n);
        }
        Op::Sigmoid(a) => {
            let y = out.data();
            accumulate_broadcast(sink, a, |i| dy[i] * y[i] * (T::one() - y[i]), n);
        }
        Op::Relu(a) => {
            let x = tape.value(a).data();
            accumulate_broadcast(
                sink,
                a,
                |i| if x[i] > T::zero() { dy[i] } else { T::zero() },
                n,
            );
        }
        Op::Sum(a) => {
            if let Some(g) = sink.get(a) {
                g.iter_mut().for_each(|gi| *gi += dy[0]);
            }
        }
        Op::Mean(a) => {
            if let Some(g) = sink.get(a) {
                let scale = dy[0] / T::from_usize(g.len()).expect("element count fits");
                g.iter_mut().for_each(|gi| *gi += scale);
            }
        }
        Op::Reshape(a) => accumulate_broadcast(sink, a, |i| dy[i], n),
        _ => unreachable!("not an elementwise op"),
    }
}
