//! 2-D cross-correlation via per-sample im2col + GEMM, with channel groups.

use super::{GradSink, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{nchw, Tensor};

/// Static extents of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Conv2dGeometry {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        let [batch, in_channels, height, width] = nchw("conv2d", input)?;
        let [out_channels, group_in, kernel_h, kernel_w] = match kernel {
            &[a, b, c, d] => [a, b, c, d],
            _ => return Err(Error::shape("conv2d", input, kernel)),
        };
        if stride == 0 || groups == 0 {
            return Err(Error::invalid_shape(
                "conv2d",
                "stride and groups must be positive",
            ));
        }
        if in_channels % groups != 0
            || out_channels % groups != 0
            || group_in * groups != in_channels
        {
            return Err(Error::invalid_shape(
                "conv2d",
                format!("channel mismatch: input {input:?}, kernel {kernel:?}, groups {groups}"),
            ));
        }
        let out_extent = |size: usize, k: usize| -> Result<usize> {
            let padded = size + 2 * padding;
            if padded < k || k == 0 {
                return Err(Error::invalid_shape(
                    "conv2d",
                    format!("kernel {k} does not fit padded extent {padded}"),
                ));
            }
            Ok((padded - k) / stride + 1)
        };
        let out_h = out_extent(height, kernel_h)?;
        let out_w = out_extent(width, kernel_w)?;
        Ok(Conv2dGeometry {
            batch,
            in_channels,
            out_channels,
            height,
            width,
            kernel_h,
            kernel_w,
            stride,
            padding,
            groups,
            out_h,
            out_w,
        })
    }

    fn group_in(&self) -> usize {
        self.in_channels / self.groups
    }

    fn group_out(&self) -> usize {
        self.out_channels / self.groups
    }

    fn col_rows(&self) -> usize {
        self.group_in() * self.kernel_h * self.kernel_w
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }

    /// Input row/column for an output coordinate and kernel tap, if inside.
    #[inline]
    fn source(&self, out: usize, tap: usize, extent: usize) -> Option<usize> {
        let pos = (out * self.stride + tap) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }

    /// `planes` holds the group's input channels of one sample.
    fn im2col<T: Real>(&self, planes: &[T], cols: &mut [T]) {
        let (h, w) = (self.height, self.width);
        let p = self.positions();
        for c in 0..self.group_in() {
            let plane = &planes[c * h * w..(c + 1) * h * w];
            for ki in 0..self.kernel_h {
                for kj in 0..self.kernel_w {
                    let row = (c * self.kernel_h + ki) * self.kernel_w + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.out_h {
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        match self.source(oy, ki, h) {
                            None => line.fill(T::zero()),
                            Some(iy) => {
                                for (ox, d) in line.iter_mut().enumerate() {
                                    *d = match self.source(ox, kj, w) {
                                        Some(ix) => plane[iy * w + ix],
                                        None => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, cols: &[T], planes: &mut [T]) {
        let (h, w) = (self.height, self.width);
        let p = self.positions();
        for c in 0..self.group_in() {
            let plane = &mut planes[c * h * w..(c + 1) * h * w];
            for ki in 0..self.kernel_h {
                for kj in 0..self.kernel_w {
                    let row = (c * self.kernel_h + ki) * self.kernel_w + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.out_h {
                        let Some(iy) = self.source(oy, ki, h) else {
                            continue;
                        };
                        for ox in 0..self.out_w {
                            if let Some(ix) = self.source(ox, kj, w) {
                                plane[iy * w + ix] += src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    fn in_plane_range(&self, n: usize, g: usize) -> std::ops::Range<usize> {
        let hw = self.height * self.width;
        let start = (n * self.in_channels + g * self.group_in()) * hw;
        start..start + self.group_in() * hw
    }

    fn out_plane_range(&self, n: usize, g: usize) -> std::ops::Range<usize> {
        let p = self.positions();
        let start = (n * self.out_channels + g * self.group_out()) * p;
        start..start + self.group_out() * p
    }

    fn kernel_range(&self, g: usize) -> std::ops::Range<usize> {
        let len = self.group_out() * self.col_rows();
        g * len..(g + 1) * len
    }
}

impl<T: Real> Tape<T> {
    /// Cross-correlation of `input[N, Cin, H, W]` with `kernel[Cout, Cin/groups, kh, kw]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        self.conv2d_grouped(input, kernel, stride, padding, 1)
    }

    pub fn conv2d_grouped(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let geom = Conv2dGeometry::new(
            self.shape(input),
            self.shape(kernel),
            stride,
            padding,
            groups,
        )?;
        let x = self.value(input).data();
        let k = self.value(kernel).data();
        let (rows, p, cog) = (geom.col_rows(), geom.positions(), geom.group_out());
        let mut out = vec![T::zero(); geom.output_shape().iter().product()];
        let mut cols = vec![T::zero(); rows * p];
        for n in 0..geom.batch {
            for g in 0..geom.groups {
                geom.im2col(&x[geom.in_plane_range(n, g)], &mut cols);
                T::gemm(
                    cog,
                    rows,
                    p,
                    T::one(),
                    &k[geom.kernel_range(g)],
                    rows as isize,
                    1,
                    &cols,
                    p as isize,
                    1,
                    T::zero(),
                    &mut out[geom.out_plane_range(n, g)],
                    p as isize,
                    1,
                );
            }
        }
        let value = Tensor::new(geom.output_shape().to_vec(), out)?;
        self.push(
            "conv2d",
            Op::Conv2d {
                input,
                kernel,
                geom,
            },
            value,
            &[input, kernel],
        )
    }
}

pub(super) fn backward<T: Real>(tape: &Tape<T>, op: &Op<T>, dy: &[T], sink: &mut GradSink<'_, T>) {
    let Op::Conv2d {
        input,
        kernel,
        geom,
    } = *op
    else {
        unreachable!("not a conv op");
    };
    let x = tape.value(input).data();
    let k = tape.value(kernel).data();
    let (rows, p, cog) = (geom.col_rows(), geom.positions(), geom.group_out());
    let mut cols = vec![T::zero(); rows * p];

    if let Some(gk) = sink.get(kernel) {
        for n in 0..geom.batch {
            for g in 0..geom.groups {
                geom.im2col(&x[geom.in_plane_range(n, g)], &mut cols);
                // dK_g += dY_g · colsᵀ
                T::gemm(
                    cog,
                    p,
                    rows,
                    T::one(),
                    &dy[geom.out_plane_range(n, g)],
                    p as isize,
                    1,
                    &cols,
                    1,
                    p as isize,
                    T::one(),
                    &mut gk[geom.kernel_range(g)],
                    rows as isize,
                    1,
                );
            }
        }
    }
    if let Some(gx) = sink.get(input) {
        for n in 0..geom.batch {
            for g in 0..geom.groups {
                // dcols = K_gᵀ · dY_g
                T::gemm(
                    rows,
                    cog,
                    p,
                    T::one(),
                    &k[geom.kernel_range(g)],
                    1,
                    rows as isize,
                    &dy[geom.out_plane_range(n, g)],
                    p as isize,
                    1,
                    T::zero(),
                    &mut cols,
                    p as isize,
                    1,
                );
                geom.col2im(&cols, &mut gx[geom.in_plane_range(n, g)]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_1x1_kernel_is_identity() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..18).map(|v| v as f64 * 0.5 - 3.0).collect();
        let x = tape.leaf(Tensor::new(vec![1, 2, 3, 3], data.clone()).unwrap());
        let k = tape.leaf(Tensor::from_f64(vec![2, 2, 1, 1], &[1.0, 0.0, 0.0, 1.0]).unwrap());
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);
    }

    #[test]
    fn ones_kernel_on_ones_sums_to_nine() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(vec![1, 1, 3, 3]));
        let k = tape.leaf(Tensor::ones(vec![1, 1, 3, 3]));
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[9.0]);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(vec![1, 3, 4, 4]));
        let k = tape.leaf(Tensor::ones(vec![2, 2, 3, 3]));
        assert!(tape.conv2d(x, k, 1, 1).is_err());
    }

    #[test]
    fn non_positive_output_extent_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(vec![1, 1, 2, 2]));
        let k = tape.leaf(Tensor::ones(vec![1, 1, 3, 3]));
        assert!(tape.conv2d(x, k, 1, 0).is_err());
    }

    #[test]
    fn output_extent_follows_floor_formula() {
        let g = Conv2dGeometry::new(&[2, 3, 8, 8], &[4, 3, 3, 3], 2, 1, 1).unwrap();
        assert_eq!(g.output_shape(), [2, 4, 4, 4]);
        let g = Conv2dGeometry::new(&[1, 1, 7, 7], &[1, 1, 3, 3], 2, 0, 1).unwrap();
        assert_eq!(g.output_shape(), [1, 1, 3, 3]);
    }

    #[test]
    fn groups_keep_channels_apart() {
        let mut tape = Tape::<f64>::new();
        // Two channels, each convolved with its own scalar kernel.
        let x = tape.leaf(Tensor::from_f64(vec![1, 2, 1, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let k = tape.leaf(Tensor::from_f64(vec![2, 1, 1, 1], &[10.0, -1.0]).unwrap());
        let y = tape.conv2d_grouped(x, k, 1, 0, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[10.0, 20.0, -3.0, -4.0]);
    }
}
