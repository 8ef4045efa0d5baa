//! Block-partitioned pooling primitives. Every op tiles the covered
//! `⌊H/S⌋·S × ⌊W/S⌋·S` region with disjoint S×S blocks; trailing rows and
//! columns outside the tiling are ignored.

use super::elementwise::logistic;
use super::{same_shape, GradSink, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{nchw, Tensor};

/// Scope of a gated-pooling gate vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GateGranularity {
    /// One gate vector per channel.
    Channel,
    /// One gate vector shared by every channel of the layer.
    Layer,
}

/// Disjoint rectangular tiling of an NCHW tensor.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BlockGrid {
    pub planes: usize,
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub bh: usize,
    pub bw: usize,
    pub rows: usize,
    pub cols: usize,
}

impl BlockGrid {
    pub(crate) fn new(op: &'static str, shape: &[usize], bh: usize, bw: usize) -> Result<Self> {
        let [n, c, h, w] = nchw(op, shape)?;
        if bh == 0 || bw == 0 {
            return Err(Error::invalid_shape(op, "pooling size must be positive"));
        }
        if bh > h || bw > w {
            return Err(Error::invalid_shape(
                op,
                format!("pooling block {bh}×{bw} larger than spatial extent {h}×{w}"),
            ));
        }
        Ok(BlockGrid {
            planes: n * c,
            channels: c,
            h,
            w,
            bh,
            bw,
            rows: h / bh,
            cols: w / bw,
        })
    }

    pub(crate) fn square(op: &'static str, shape: &[usize], s: usize) -> Result<Self> {
        Self::new(op, shape, s, s)
    }

    pub(crate) fn block_len(&self) -> usize {
        self.bh * self.bw
    }

    pub(crate) fn blocks_per_plane(&self) -> usize {
        self.rows * self.cols
    }

    pub(crate) fn output_shape(&self) -> Vec<usize> {
        vec![
            self.planes / self.channels,
            self.channels,
            self.rows,
            self.cols,
        ]
    }

    /// Flat index of the top-left element of block `(p, q)` in `plane`.
    #[inline]
    pub(crate) fn base(&self, plane: usize, p: usize, q: usize) -> usize {
        plane * self.h * self.w + p * self.bh * self.w + q * self.bw
    }

    /// Flat index of in-block element `k` (row-major within the block).
    #[inline]
    pub(crate) fn elem(&self, base: usize, k: usize) -> usize {
        base + (k / self.bw) * self.w + k % self.bw
    }

    /// Calls `f(plane, block_index, base)` for every block in output order.
    pub(crate) fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let mut out = 0;
        for plane in 0..self.planes {
            for p in 0..self.rows {
                for q in 0..self.cols {
                    f(plane, out, self.base(plane, p, q));
                    out += 1;
                }
            }
        }
    }
}

/// Lowest row-major index holding the block maximum.
fn block_argmax<T: Real>(x: &[T], grid: &BlockGrid, base: usize) -> usize {
    let mut best = grid.elem(base, 0);
    for k in 1..grid.block_len() {
        let i = grid.elem(base, k);
        if x[i] > x[best] {
            best = i;
        }
    }
    best
}

fn block_mean<T: Real>(x: &[T], grid: &BlockGrid, base: usize) -> T {
    let mut acc = T::zero();
    for k in 0..grid.block_len() {
        acc += x[grid.elem(base, k)];
    }
    acc / T::from_usize(grid.block_len()).expect("block size fits")
}

impl<T: Real> Tape<T> {
    pub fn max_pool(&mut self, input: Var, size: usize) -> Result<Var> {
        let grid = BlockGrid::square("max_pool", self.shape(input), size)?;
        let x = self.value(input).data();
        let mut argmax = Vec::with_capacity(grid.planes * grid.blocks_per_plane());
        grid.for_each(|_, _, base| argmax.push(block_argmax(x, &grid, base)));
        let out = argmax.iter().map(|&i| x[i]).collect();
        let value = Tensor::new(grid.output_shape(), out)?;
        self.push("max_pool", Op::MaxPool { input, argmax }, value, &[input])
    }

    pub fn avg_pool(&mut self, input: Var, size: usize) -> Result<Var> {
        let grid = BlockGrid::square("avg_pool", self.shape(input), size)?;
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(grid.planes * grid.blocks_per_plane());
        grid.for_each(|_, _, base| out.push(block_mean(x, &grid, base)));
        let value = Tensor::new(grid.output_shape(), out)?;
        self.push("avg_pool", Op::AvgPool { input, size }, value, &[input])
    }

    /// Samples the element at `offset = (row, col)` inside every block.
    pub fn stride_pool(&mut self, input: Var, size: usize, offset: (usize, usize)) -> Result<Var> {
        let grid = BlockGrid::square("stride_pool", self.shape(input), size)?;
        if offset.0 >= size || offset.1 >= size {
            return Err(Error::InvalidArgument(format!(
                "stride_pool offset {offset:?} outside a {size}×{size} block"
            )));
        }
        let x = self.value(input).data();
        let mut picks = Vec::with_capacity(grid.planes * grid.blocks_per_plane());
        grid.for_each(|_, _, base| picks.push(base + offset.0 * grid.w + offset.1));
        let out = picks.iter().map(|&i| x[i]).collect();
        let value = Tensor::new(grid.output_shape(), out)?;
        self.push(
            "stride_pool",
            Op::StridePool { input, picks },
            value,
            &[input],
        )
    }

    /// `σ(a)·max + (1 − σ(a))·mean` per block, with a single-element `mix = a`.
    pub fn mixed_pool(&mut self, input: Var, mix: Var, size: usize) -> Result<Var> {
        let grid = BlockGrid::square("mixed_pool", self.shape(input), size)?;
        if self.value(mix).numel() != 1 {
            return Err(Error::invalid_shape(
                "mixed_pool",
                format!(
                    "mixing parameter must hold one element, shape {:?}",
                    self.shape(mix)
                ),
            ));
        }
        let sigma = logistic(self.value(mix).data()[0]);
        let x = self.value(input).data();
        let n_out = grid.planes * grid.blocks_per_plane();
        let mut argmax = Vec::with_capacity(n_out);
        let mut max_minus_avg = Vec::with_capacity(n_out);
        let mut out = Vec::with_capacity(n_out);
        grid.for_each(|_, _, base| {
            let am = block_argmax(x, &grid, base);
            let mean = block_mean(x, &grid, base);
            argmax.push(am);
            max_minus_avg.push(x[am] - mean);
            out.push(sigma * x[am] + (T::one() - sigma) * mean);
        });
        let value = Tensor::new(grid.output_shape(), out)?;
        let op = Op::MixedPool {
            input,
            mix,
            size,
            argmax,
            max_minus_avg,
        };
        self.push("mixed_pool", op, value, &[input, mix])
    }

    /// Per block `b`: `g = σ(ω·vec(b))`, output `g·max(b) + (1 − g)·mean(b)`.
    /// `omega` is `[C, S²]` for [`GateGranularity::Channel`] and `[S²]` for
    /// [`GateGranularity::Layer`].
    pub fn gated_pool(
        &mut self,
        input: Var,
        omega: Var,
        size: usize,
        granularity: GateGranularity,
    ) -> Result<Var> {
        let grid = BlockGrid::square("gated_pool", self.shape(input), size)?;
        let len = grid.block_len();
        let expected = match granularity {
            GateGranularity::Channel => vec![grid.channels, len],
            GateGranularity::Layer => vec![len],
        };
        if self.shape(omega) != expected.as_slice() {
            return Err(Error::shape("gated_pool", &expected, self.shape(omega)));
        }
        let x = self.value(input).data();
        let w = self.value(omega).data();
        let n_out = grid.planes * grid.blocks_per_plane();
        let mut argmax = Vec::with_capacity(n_out);
        let mut gates = Vec::with_capacity(n_out);
        let mut max_minus_avg = Vec::with_capacity(n_out);
        let mut out = Vec::with_capacity(n_out);
        grid.for_each(|plane, _, base| {
            let wv = match granularity {
                GateGranularity::Channel => {
                    let c = plane % grid.channels;
                    &w[c * len..(c + 1) * len]
                }
                GateGranularity::Layer => w,
            };
            let mut z = T::zero();
            for (k, &wk) in wv.iter().enumerate() {
                z += wk * x[grid.elem(base, k)];
            }
            let g = logistic(z);
            let am = block_argmax(x, &grid, base);
            let mean = block_mean(x, &grid, base);
            argmax.push(am);
            gates.push(g);
            max_minus_avg.push(x[am] - mean);
            out.push(g * x[am] + (T::one() - g) * mean);
        });
        let value = Tensor::new(grid.output_shape(), out)?;
        let op = Op::GatedPool {
            input,
            omega,
            size,
            granularity,
            argmax,
            gates,
            max_minus_avg,
        };
        self.push("gated_pool", op, value, &[input, omega])
    }

    /// Softmax over every disjoint S×S block. Positions outside the tiling
    /// are set to zero.
    pub fn block_softmax(&mut self, input: Var, size: usize) -> Result<Var> {
        let grid = BlockGrid::square("block_softmax", self.shape(input), size)?;
        let x = self.value(input).data();
        let mut out = vec![T::zero(); x.len()];
        grid.for_each(|_, _, base| {
            let m = (0..grid.block_len())
                .map(|k| x[grid.elem(base, k)])
                .fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for k in 0..grid.block_len() {
                let i = grid.elem(base, k);
                out[i] = (x[i] - m).exp();
                s += out[i];
            }
            for k in 0..grid.block_len() {
                out[grid.elem(base, k)] /= s;
            }
        });
        let value = Tensor::new(self.shape(input).to_vec(), out)?;
        self.push(
            "block_softmax",
            Op::BlockSoftmax { input, size },
            value,
            &[input],
        )
    }

    /// `o[p, q] = Σ_block weights · features` for every S×S block.
    pub fn block_weighted_sum(&mut self, weights: Var, features: Var, size: usize) -> Result<Var> {
        same_shape(self, "block_weighted_sum", weights, features)?;
        let grid = BlockGrid::square("block_weighted_sum", self.shape(features), size)?;
        let pi = self.value(weights).data();
        let f = self.value(features).data();
        let mut out = Vec::with_capacity(grid.planes * grid.blocks_per_plane());
        grid.for_each(|_, _, base| {
            let mut acc = T::zero();
            for k in 0..grid.block_len() {
                let i = grid.elem(base, k);
                acc += pi[i] * f[i];
            }
            out.push(acc);
        });
        let value = Tensor::new(grid.output_shape(), out)?;
        let op = Op::BlockWeightedSum {
            weights,
            features,
            size,
        };
        self.push("block_weighted_sum", op, value, &[weights, features])
    }

    /// Gathers `[N, C, H, W]` into per-channel row matrices
    /// `[C, N·P·Q, bh·bw]`, one row per block (row-major inside the block).
    pub fn blocks_to_rows(&mut self, input: Var, block: (usize, usize)) -> Result<Var> {
        let grid = BlockGrid::new("blocks_to_rows", self.shape(input), block.0, block.1)?;
        let x = self.value(input).data();
        let (c, len, per_plane) = (grid.channels, grid.block_len(), grid.blocks_per_plane());
        let n = grid.planes / c;
        let mut out = vec![T::zero(); c * n * per_plane * len];
        grid.for_each(|plane, idx, base| {
            let (s, ch) = (plane / c, plane % c);
            let row = s * per_plane + idx % per_plane;
            let dst = (ch * n * per_plane + row) * len;
            for k in 0..len {
                out[dst + k] = x[grid.elem(base, k)];
            }
        });
        let value = Tensor::new(vec![c, n * per_plane, len], out)?;
        self.push(
            "blocks_to_rows",
            Op::BlocksToRows { input, block },
            value,
            &[input],
        )
    }

    /// Inverse of [`Tape::blocks_to_rows`] onto an `[N, C, H, W]` map; cells
    /// outside the tiling are zero.
    pub fn rows_to_blocks(
        &mut self,
        input: Var,
        nchw_shape: [usize; 4],
        block: (usize, usize),
    ) -> Result<Var> {
        let grid = BlockGrid::new("rows_to_blocks", &nchw_shape, block.0, block.1)?;
        let (c, len, per_plane) = (grid.channels, grid.block_len(), grid.blocks_per_plane());
        let n = grid.planes / c;
        let expected = [c, n * per_plane, len];
        if self.shape(input) != expected {
            return Err(Error::shape("rows_to_blocks", self.shape(input), &expected));
        }
        let x = self.value(input).data();
        let mut out = vec![T::zero(); nchw_shape.iter().product()];
        grid.for_each(|plane, idx, base| {
            let (s, ch) = (plane / c, plane % c);
            let src = (ch * n * per_plane + s * per_plane + idx % per_plane) * len;
            for k in 0..len {
                out[grid.elem(base, k)] = x[src + k];
            }
        });
        let value = Tensor::new(nchw_shape.to_vec(), out)?;
        self.push(
            "rows_to_blocks",
            Op::RowsToBlocks { input, block },
            value,
            &[input],
        )
    }
}

pub(super) fn backward<T: Real>(
    tape: &Tape<T>,
    op: &Op<T>,
    out: &Tensor<T>,
    dy: &[T],
    sink: &mut GradSink<'_, T>,
) {
    match op {
        Op::MaxPool { input, argmax } => {
            if let Some(gx) = sink.get(*input) {
                for (&i, &d) in argmax.iter().zip(dy) {
                    gx[i] += d;
                }
            }
        }
        Op::StridePool { input, picks } => {
            if let Some(gx) = sink.get(*input) {
                for (&i, &d) in picks.iter().zip(dy) {
                    gx[i] += d;
                }
            }
        }
        Op::AvgPool { input, size } => {
            let grid = BlockGrid::square("avg_pool", tape.shape(*input), *size)
                .expect("checked in forward");
            if let Some(gx) = sink.get(*input) {
                let inv = T::one() / T::from_usize(grid.block_len()).expect("block size fits");
                grid.for_each(|_, o, base| {
                    for k in 0..grid.block_len() {
                        gx[grid.elem(base, k)] += dy[o] * inv;
                    }
                });
            }
        }
        Op::MixedPool {
            input,
            mix,
            size,
            argmax,
            max_minus_avg,
        } => {
            let grid = BlockGrid::square("mixed_pool", tape.shape(*input), *size)
                .expect("checked in forward");
            let sigma = logistic(tape.value(*mix).data()[0]);
            if let Some(ga) = sink.get(*mix) {
                let mut acc = T::zero();
                for (&d, &diff) in dy.iter().zip(max_minus_avg) {
                    acc += d * diff;
                }
                ga[0] += acc * sigma * (T::one() - sigma);
            }
            if let Some(gx) = sink.get(*input) {
                let inv =
                    (T::one() - sigma) / T::from_usize(grid.block_len()).expect("block size fits");
                grid.for_each(|_, o, base| {
                    for k in 0..grid.block_len() {
                        gx[grid.elem(base, k)] += dy[o] * inv;
                    }
                    gx[argmax[o]] += dy[o] * sigma;
                });
            }
        }
        Op::GatedPool {
            input,
            omega,
            size,
            granularity,
            argmax,
            gates,
            max_minus_avg,
        } => {
            let grid = BlockGrid::square("gated_pool", tape.shape(*input), *size)
                .expect("checked in forward");
            let len = grid.block_len();
            let x = tape.value(*input).data();
            let w = tape.value(*omega).data();
            let gate_offset = |plane: usize| match granularity {
                GateGranularity::Channel => (plane % grid.channels) * len,
                GateGranularity::Layer => 0,
            };
            let dz: Vec<T> = (0..dy.len())
                .map(|o| dy[o] * max_minus_avg[o] * gates[o] * (T::one() - gates[o]))
                .collect();
            if let Some(gw) = sink.get(*omega) {
                grid.for_each(|plane, o, base| {
                    let off = gate_offset(plane);
                    for k in 0..len {
                        gw[off + k] += dz[o] * x[grid.elem(base, k)];
                    }
                });
            }
            if let Some(gx) = sink.get(*input) {
                let inv_len = T::one() / T::from_usize(len).expect("block size fits");
                grid.for_each(|plane, o, base| {
                    let off = gate_offset(plane);
                    let g = gates[o];
                    let uniform = dy[o] * (T::one() - g) * inv_len;
                    for k in 0..len {
                        gx[grid.elem(base, k)] += dz[o] * w[off + k] + uniform;
                    }
                    gx[argmax[o]] += dy[o] * g;
                });
            }
        }
        Op::BlockSoftmax { input, size } => {
            if let Some(gx) = sink.get(*input) {
                let grid = BlockGrid::square("block_softmax", tape.shape(*input), *size)
                    .expect("checked in forward");
                let pi = out.data();
                grid.for_each(|_, _, base| {
                    let mut dot = T::zero();
                    for k in 0..grid.block_len() {
                        let i = grid.elem(base, k);
                        dot += pi[i] * dy[i];
                    }
                    for k in 0..grid.block_len() {
                        let i = grid.elem(base, k);
                        gx[i] += pi[i] * (dy[i] - dot);
                    }
                });
            }
        }
        Op::BlockWeightedSum {
            weights,
            features,
            size,
        } => {
            let grid = BlockGrid::square("block_weighted_sum", tape.shape(*features), *size)
                .expect("checked in forward");
            if let Some(gw) = sink.get(*weights) {
                let f = tape.value(*features).data();
                grid.for_each(|_, o, base| {
                    for k in 0..grid.block_len() {
                        let i = grid.elem(base, k);
                        gw[i] += dy[o] * f[i];
                    }
                });
            }
            if let Some(gf) = sink.get(*features) {
                let pi = tape.value(*weights).data();
                grid.for_each(|_, o, base| {
                    for k in 0..grid.block_len() {
                        let i = grid.elem(base, k);
                        gf[i] += dy[o] * pi[i];
                    }
                });
            }
        }
        Op::BlocksToRows { input, block } => {
            if let Some(gx) = sink.get(*input) {
                let grid = BlockGrid::new("blocks_to_rows", tape.shape(*input), block.0, block.1)
                    .expect("checked in forward");
                scatter_rows(&grid, dy, gx, true);
            }
        }
        Op::RowsToBlocks { input, block } => {
            if let Some(gx) = sink.get(*input) {
                let grid = BlockGrid::new("rows_to_blocks", out.shape(), block.0, block.1)
                    .expect("checked in forward");
                scatter_rows(&grid, dy, gx, false);
            }
        }
        _ => unreachable!("not a pooling op"),
    }
}

/// Moves gradient between map layout and row layout. `to_map` accumulates
/// row-layout `src` into map-layout `dst`; otherwise the reverse.
fn scatter_rows<T: Real>(grid: &BlockGrid, src: &[T], dst: &mut [T], to_map: bool) {
    let (c, len, per_plane) = (grid.channels, grid.block_len(), grid.blocks_per_plane());
    let n = grid.planes / c;
    grid.for_each(|plane, idx, base| {
        let (s, ch) = (plane / c, plane % c);
        let row = (ch * n * per_plane + s * per_plane + idx % per_plane) * len;
        for k in 0..len {
            let m = grid.elem(base, k);
            if to_map {
                dst[m] += src[row + k];
            } else {
                dst[row + k] += src[m];
            }
        }
    });
}
