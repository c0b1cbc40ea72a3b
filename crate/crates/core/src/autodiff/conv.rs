//! conv2d forward/backward via im2col + GEMM.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use ndarray::ArrayView2;

pub(crate) struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvDims {
    pub fn check(
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<ConvDims> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(Error::Dimension {
                context: "conv2d",
                left: input.to_vec(),
                right: kernel.to_vec(),
            });
        }
        if stride == 0 {
            return Err(Error::Domain("conv2d stride must be positive".into()));
        }
        let (n, cin, h, w) = (input[0], input[1], input[2], input[3]);
        let (cout, kcin, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if kcin != cin {
            return Err(Error::Dimension {
                context: "conv2d channels",
                left: input.to_vec(),
                right: kernel.to_vec(),
            });
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::Dimension {
                context: "conv2d kernel larger than padded input",
                left: vec![h + 2 * padding, w + 2 * padding],
                right: vec![kh, kw],
            });
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        Ok(ConvDims {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            oh,
            ow,
            stride,
            padding,
        })
    }

    fn patch_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn patch_cols(&self) -> usize {
        self.n * self.oh * self.ow
    }
}

/// Gathers input patches into a [cin*kh*kw, n*oh*ow] matrix (zero padding).
fn im2col(input: &Tensor, d: &ConvDims) -> Vec<f64> {
    let src = input.data();
    let (rows, cols) = (d.patch_rows(), d.patch_cols());
    let mut patches = vec![0.0; rows * cols];
    for i_n in 0..d.n {
        for oy in 0..d.oh {
            for ox in 0..d.ow {
                let col = (i_n * d.oh + oy) * d.ow + ox;
                for ci in 0..d.cin {
                    for ky in 0..d.kh {
                        let y = (oy * d.stride + ky) as isize - d.padding as isize;
                        if y < 0 || y >= d.h as isize {
                            continue;
                        }
                        for kx in 0..d.kw {
                            let x = (ox * d.stride + kx) as isize - d.padding as isize;
                            if x < 0 || x >= d.w as isize {
                                continue;
                            }
                            let row = (ci * d.kh + ky) * d.kw + kx;
                            patches[row * cols + col] =
                                src[((i_n * d.cin + ci) * d.h + y as usize) * d.w + x as usize];
                        }
                    }
                }
            }
        }
    }
    patches
}

pub(crate) fn forward(input: &Tensor, kernel: &Tensor, d: &ConvDims) -> Tensor {
    let patches = im2col(input, d);
    let (rows, cols) = (d.patch_rows(), d.patch_cols());
    let k = ArrayView2::from_shape((d.cout, rows), kernel.data()).expect("kernel view");
    let p = ArrayView2::from_shape((rows, cols), &patches).expect("patch view");
    let o = k.dot(&p); // [cout, n*oh*ow]
    let o = o.into_raw_vec_and_offset().0;
    let mut out = vec![0.0; d.n * d.cout * d.oh * d.ow];
    let ohw = d.oh * d.ow;
    for i_n in 0..d.n {
        for co in 0..d.cout {
            for k_sp in 0..ohw {
                out[(i_n * d.cout + co) * ohw + k_sp] = o[co * cols + i_n * ohw + k_sp];
            }
        }
    }
    Tensor::new(vec![d.n, d.cout, d.oh, d.ow], out).expect("conv output shape")
}

pub(crate) fn backward(
    input: &Tensor,
    kernel: &Tensor,
    grad: &Tensor,
    d: &ConvDims,
) -> (Tensor, Tensor) {
    let (rows, cols) = (d.patch_rows(), d.patch_cols());
    let ohw = d.oh * d.ow;

    // grad [n, cout, oh, ow] -> Gm [cout, n*oh*ow]
    let gd = grad.data();
    let mut gm = vec![0.0; d.cout * cols];
    for i_n in 0..d.n {
        for co in 0..d.cout {
            for k_sp in 0..ohw {
                gm[co * cols + i_n * ohw + k_sp] = gd[(i_n * d.cout + co) * ohw + k_sp];
            }
        }
    }
    let gm_v = ArrayView2::from_shape((d.cout, cols), &gm).expect("grad view");

    let patches = im2col(input, d);
    let p_v = ArrayView2::from_shape((rows, cols), &patches).expect("patch view");
    let dk = gm_v.dot(&p_v.t()); // [cout, rows]
    let dkernel = Tensor::new(
        kernel.shape().to_vec(),
        dk.into_raw_vec_and_offset().0,
    )
    .expect("kernel grad shape");

    let k_v = ArrayView2::from_shape((d.cout, rows), kernel.data()).expect("kernel view");
    let dp = k_v.t().dot(&gm_v); // [rows, cols]
    let dp = dp.into_raw_vec_and_offset().0;

    // col2im: scatter-add patch gradients back onto the input
    let mut dinput = vec![0.0; input.len()];
    for i_n in 0..d.n {
        for oy in 0..d.oh {
            for ox in 0..d.ow {
                let col = (i_n * d.oh + oy) * d.ow + ox;
                for ci in 0..d.cin {
                    for ky in 0..d.kh {
                        let y = (oy * d.stride + ky) as isize - d.padding as isize;
                        if y < 0 || y >= d.h as isize {
                            continue;
                        }
                        for kx in 0..d.kw {
                            let x = (ox * d.stride + kx) as isize - d.padding as isize;
                            if x < 0 || x >= d.w as isize {
                                continue;
                            }
                            let row = (ci * d.kh + ky) * d.kw + kx;
                            dinput[((i_n * d.cin + ci) * d.h + y as usize) * d.w + x as usize] +=
                                dp[row * cols + col];
                        }
                    }
                }
            }
        }
    }
    let dinput = Tensor::new(input.shape().to_vec(), dinput).expect("input grad shape");
    (dinput, dkernel)
}
