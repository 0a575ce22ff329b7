//! Direct 2-D convolution kernels over `[N, C, H, W]` buffers.
//!
//! Every output element accumulates its contributions in the fixed order
//! (input channel, kernel row, kernel column), so results are bit-identical
//! across runs. Taps that fall entirely into the zero padding are skipped,
//! which matters for the tiny spatial extents of the deep layers.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.k_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.k_w) / self.stride + 1
    }

    /// Output index range whose input coordinate `o * stride + k - pad` is in bounds.
    fn valid(&self, k: usize, in_len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.pad as isize;
        // smallest o with o*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest o with o*s + off <= in_len - 1
        let hi_num = in_len as isize - 1 - off;
        let hi = if hi_num < 0 { -1 } else { hi_num / s };
        let hi = hi.min(out_len as isize - 1);
        if hi < lo {
            (0, 0)
        } else {
            (lo as usize, hi as usize + 1)
        }
    }

    fn taps(&self) -> Vec<Tap> {
        let (oh, ow) = (self.out_h(), self.out_w());
        let mut taps = Vec::with_capacity(self.k_h * self.k_w);
        for ky in 0..self.k_h {
            let (y0, y1) = self.valid(ky, self.in_h, oh);
            for kx in 0..self.k_w {
                let (x0, x1) = self.valid(kx, self.in_w, ow);
                taps.push(Tap {
                    index: ky * self.k_w + kx,
                    ky,
                    kx,
                    y0,
                    y1,
                    x0,
                    x1,
                });
            }
        }
        taps
    }
}

#[derive(Debug, Clone, Copy)]
struct Tap {
    index: usize,
    ky: usize,
    kx: usize,
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
}

impl Tap {
    fn is_empty(&self) -> bool {
        self.y0 >= self.y1 || self.x0 >= self.x1
    }

    fn in_y(&self, oy: usize, g: &ConvGeometry) -> usize {
        oy * g.stride + self.ky - g.pad
    }

    fn in_x(&self, ox: usize, g: &ConvGeometry) -> usize {
        ox * g.stride + self.kx - g.pad
    }
}

pub fn forward(g: &ConvGeometry, input: &[f64], kernel: &[f64]) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let in_plane = g.in_h * g.in_w;
    let out_plane = oh * ow;
    let kk = g.k_h * g.k_w;
    let taps: Vec<Tap> = g.taps().into_iter().filter(|t| !t.is_empty()).collect();
    let mut out = vec![0.0; g.batch * g.out_channels * out_plane];
    for n in 0..g.batch {
        for o in 0..g.out_channels {
            let dst = &mut out[(n * g.out_channels + o) * out_plane..][..out_plane];
            for c in 0..g.in_channels {
                let src = &input[(n * g.in_channels + c) * in_plane..][..in_plane];
                let w = &kernel[(o * g.in_channels + c) * kk..][..kk];
                for t in &taps {
                    let wt = w[t.index];
                    for oy in t.y0..t.y1 {
                        let iy = t.in_y(oy, g);
                        let drow = &mut dst[oy * ow..][..ow];
                        let srow = &src[iy * g.in_w..][..g.in_w];
                        if g.stride == 1 {
                            let ix0 = t.in_x(t.x0, g);
                            let n_x = t.x1 - t.x0;
                            for (d, s) in drow[t.x0..t.x1].iter_mut().zip(&srow[ix0..ix0 + n_x]) {
                                *d += wt * s;
                            }
                        } else {
                            for ox in t.x0..t.x1 {
                                drow[ox] += wt * srow[t.in_x(ox, g)];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient with respect to the input, given the output gradient.
pub fn backward_input(g: &ConvGeometry, grad_out: &[f64], kernel: &[f64]) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let in_plane = g.in_h * g.in_w;
    let out_plane = oh * ow;
    let kk = g.k_h * g.k_w;
    let taps: Vec<Tap> = g.taps().into_iter().filter(|t| !t.is_empty()).collect();
    let mut grad_in = vec![0.0; g.batch * g.in_channels * in_plane];
    for n in 0..g.batch {
        for c in 0..g.in_channels {
            let dst = &mut grad_in[(n * g.in_channels + c) * in_plane..][..in_plane];
            for o in 0..g.out_channels {
                let src = &grad_out[(n * g.out_channels + o) * out_plane..][..out_plane];
                let w = &kernel[(o * g.in_channels + c) * kk..][..kk];
                for t in &taps {
                    let wt = w[t.index];
                    for oy in t.y0..t.y1 {
                        let iy = t.in_y(oy, g);
                        let drow = &mut dst[iy * g.in_w..][..g.in_w];
                        let srow = &src[oy * ow..][..ow];
                        if g.stride == 1 {
                            let ix0 = t.in_x(t.x0, g);
                            let n_x = t.x1 - t.x0;
                            for (d, s) in drow[ix0..ix0 + n_x].iter_mut().zip(&srow[t.x0..t.x1]) {
                                *d += wt * s;
                            }
                        } else {
                            for ox in t.x0..t.x1 {
                                drow[t.in_x(ox, g)] += wt * srow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
    grad_in
}

/// Gradient with respect to the kernel, given the output gradient.
pub fn backward_kernel(g: &ConvGeometry, grad_out: &[f64], input: &[f64]) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let in_plane = g.in_h * g.in_w;
    let out_plane = oh * ow;
    let kk = g.k_h * g.k_w;
    let taps: Vec<Tap> = g.taps().into_iter().filter(|t| !t.is_empty()).collect();
    let mut grad_k = vec![0.0; g.out_channels * g.in_channels * kk];
    for n in 0..g.batch {
        for o in 0..g.out_channels {
            let go = &grad_out[(n * g.out_channels + o) * out_plane..][..out_plane];
            for c in 0..g.in_channels {
                let src = &input[(n * g.in_channels + c) * in_plane..][..in_plane];
                let gk = &mut grad_k[(o * g.in_channels + c) * kk..][..kk];
                for t in &taps {
                    let mut acc = 0.0;
                    for oy in t.y0..t.y1 {
                        let iy = t.in_y(oy, g);
                        let grow = &go[oy * ow..][..ow];
                        let srow = &src[iy * g.in_w..][..g.in_w];
                        if g.stride == 1 {
                            let ix0 = t.in_x(t.x0, g);
                            let n_x = t.x1 - t.x0;
                            for (a, b) in grow[t.x0..t.x1].iter().zip(&srow[ix0..ix0 + n_x]) {
                                acc += a * b;
                            }
                        } else {
                            for ox in t.x0..t.x1 {
                                acc += grow[ox] * srow[t.in_x(ox, g)];
                            }
                        }
                    }
                    gk[t.index] += acc;
                }
            }
        }
    }
    grad_k
}
