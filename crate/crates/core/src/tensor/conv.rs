//! Convolution kernels on raw NCHW buffers (cross-correlation, no flip).

use crate::error::{Error, Result};

/// Stride and zero padding per spatial axis, `[height, width]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dOpts {
    pub stride: [usize; 2],
    pub padding: [usize; 2],
}

impl Conv2dOpts {
    pub fn new(stride: usize, padding: usize) -> Self {
        Conv2dOpts {
            stride: [stride, stride],
            padding: [padding, padding],
        }
    }
}

impl Default for Conv2dOpts {
    fn default() -> Self {
        Self::new(1, 0)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub opts: Conv2dOpts,
    pub depthwise: bool,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize], opts: Conv2dOpts, depthwise: bool) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(Error::shape(format!(
                "conv expects 4-d input and kernel, got {input:?} and {kernel:?}"
            )));
        }
        if opts.stride.contains(&0) {
            return Err(Error::shape("conv stride must be positive"));
        }
        let (n, c, h, w) = (input[0], input[1], input[2], input[3]);
        let (f, kc, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if depthwise {
            if f != c || kc != 1 {
                return Err(Error::shape(format!(
                    "depthwise kernel {kernel:?} does not match {c} input channels"
                )));
            }
        } else if kc != c {
            return Err(Error::shape(format!(
                "kernel {kernel:?} expects {kc} channels, input has {c}"
            )));
        }
        let ph = h + 2 * opts.padding[0];
        let pw = w + 2 * opts.padding[1];
        if kh > ph || kw > pw {
            return Err(Error::shape(format!(
                "kernel {kh}x{kw} larger than padded input {ph}x{pw}"
            )));
        }
        Ok(ConvGeom {
            n,
            c,
            h,
            w,
            f,
            kh,
            kw,
            oh: (ph - kh) / opts.stride[0] + 1,
            ow: (pw - kw) / opts.stride[1] + 1,
            opts,
            depthwise,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.f, self.oh, self.ow]
    }

    /// Input channels feeding output channel `f`.
    fn in_channels(&self, f: usize) -> std::ops::Range<usize> {
        if self.depthwise {
            f..f + 1
        } else {
            0..self.c
        }
    }

    fn kernel_offset(&self, f: usize, c: usize) -> usize {
        let per_filter = if self.depthwise { 1 } else { self.c };
        let kc = if self.depthwise { 0 } else { c };
        (f * per_filter + kc) * self.kh * self.kw
    }

    /// Calls `visit(input_idx, kernel_idx, output_idx)` for every
    /// multiply-accumulate term of the convolution.
    #[inline]
    fn for_each_tap(&self, mut visit: impl FnMut(usize, usize, usize)) {
        let [sh, sw] = self.opts.stride;
        let [ph, pw] = self.opts.padding;
        for n in 0..self.n {
            for f in 0..self.f {
                let out_base = (n * self.f + f) * self.oh * self.ow;
                for c in self.in_channels(f) {
                    let in_base = (n * self.c + c) * self.h * self.w;
                    let k_base = self.kernel_offset(f, c);
                    for ky in 0..self.kh {
                        for kx in 0..self.kw {
                            let k_idx = k_base + ky * self.kw + kx;
                            for oy in 0..self.oh {
                                let iy = (oy * sh + ky) as isize - ph as isize;
                                if iy < 0 || iy >= self.h as isize {
                                    continue;
                                }
                                let row_in = in_base + iy as usize * self.w;
                                let row_out = out_base + oy * self.ow;
                                for ox in 0..self.ow {
                                    let ix = (ox * sw + kx) as isize - pw as isize;
                                    if ix < 0 || ix >= self.w as isize {
                                        continue;
                                    }
                                    visit(row_in + ix as usize, k_idx, row_out + ox);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, input: &[f64], kernel: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n * self.f * self.oh * self.ow];
        self.for_each_tap(|i, k, o| out[o] += input[i] * kernel[k]);
        out
    }

    /// Returns `(d_input, d_kernel)` given the output gradient.
    pub fn backward(&self, input: &[f64], kernel: &[f64], grad_out: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut d_in = vec![0.0; input.len()];
        let mut d_k = vec![0.0; kernel.len()];
        self.for_each_tap(|i, k, o| {
            let g = grad_out[o];
            d_in[i] += g * kernel[k];
            d_k[k] += g * input[i];
        });
        (d_in, d_k)
    }
}
