//! Dense kernels for the spatial ops. Batches are processed in parallel, one
//! sample per task; every cross-sample reduction is summed in sample order so
//! results do not depend on the worker count.

use rayon::prelude::*;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        self.height + 2 * self.padding + 1 - self.kernel_h
    }

    pub fn out_w(&self) -> usize {
        self.width + 2 * self.padding + 1 - self.kernel_w
    }

    fn in_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    fn out_len(&self) -> usize {
        self.out_channels * self.out_h() * self.out_w()
    }

    fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel_h * self.kernel_w
    }

    /// Valid output-column range for kernel column `kw`.
    fn col_range(&self, kw: usize) -> (usize, usize) {
        let lo = self.padding.saturating_sub(kw);
        let hi = (self.width + self.padding)
            .saturating_sub(kw)
            .min(self.out_w());
        (lo, hi.max(lo))
    }

    fn row_range(&self, kh: usize) -> (usize, usize) {
        let lo = self.padding.saturating_sub(kh);
        let hi = (self.height + self.padding)
            .saturating_sub(kh)
            .min(self.out_h());
        (lo, hi.max(lo))
    }
}

pub(crate) fn conv2d_forward(
    g: &ConvGeometry,
    input: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = vec![0.0; g.batch * g.out_len()];
    out.par_chunks_mut(g.out_len().max(1))
        .zip(input.par_chunks(g.in_len().max(1)))
        .for_each(|(out_s, in_s)| {
            for o in 0..g.out_channels {
                let plane = &mut out_s[o * oh * ow..(o + 1) * oh * ow];
                if let Some(b) = bias {
                    plane.iter_mut().for_each(|v| *v = b[o]);
                }
                for c in 0..g.in_channels {
                    let in_plane = &in_s[c * g.height * g.width..(c + 1) * g.height * g.width];
                    for kh in 0..g.kernel_h {
                        let (y0, y1) = g.row_range(kh);
                        for kw in 0..g.kernel_w {
                            let w = weight
                                [((o * g.in_channels + c) * g.kernel_h + kh) * g.kernel_w + kw];
                            if w == 0.0 {
                                continue;
                            }
                            let (x0, x1) = g.col_range(kw);
                            for y in y0..y1 {
                                let iy = y + kh - g.padding;
                                let out_row = &mut plane[y * ow + x0..y * ow + x1];
                                let ix0 = x0 + kw - g.padding;
                                let in_row =
                                    &in_plane[iy * g.width + ix0..iy * g.width + ix0 + (x1 - x0)];
                                for (acc, &v) in out_row.iter_mut().zip(in_row) {
                                    *acc += w * v;
                                }
                            }
                        }
                    }
                }
            }
        });
    out
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(
    g: &ConvGeometry,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> ConvGrads {
    let (oh, ow) = (g.out_h(), g.out_w());
    let per_sample: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..g.batch)
        .into_par_iter()
        .map(|n| {
            let in_s = &input[n * g.in_len()..(n + 1) * g.in_len()];
            let go_s = &grad_out[n * g.out_len()..(n + 1) * g.out_len()];
            let mut gin = if need_input {
                vec![0.0; g.in_len()]
            } else {
                Vec::new()
            };
            let mut gw = if need_weight {
                vec![0.0; g.weight_len()]
            } else {
                Vec::new()
            };
            let mut gb = if need_bias {
                vec![0.0; g.out_channels]
            } else {
                Vec::new()
            };
            for o in 0..g.out_channels {
                let go_plane = &go_s[o * oh * ow..(o + 1) * oh * ow];
                if need_bias {
                    gb[o] = go_plane.iter().sum();
                }
                for c in 0..g.in_channels {
                    let plane_off = c * g.height * g.width;
                    for kh in 0..g.kernel_h {
                        let (y0, y1) = g.row_range(kh);
                        for kw in 0..g.kernel_w {
                            let widx =
                                ((o * g.in_channels + c) * g.kernel_h + kh) * g.kernel_w + kw;
                            let w = weight[widx];
                            let (x0, x1) = g.col_range(kw);
                            let ix0 = x0 + kw - g.padding;
                            let mut acc = 0.0;
                            for y in y0..y1 {
                                let iy = y + kh - g.padding;
                                let go_row = &go_plane[y * ow + x0..y * ow + x1];
                                let start = plane_off + iy * g.width + ix0;
                                if need_weight {
                                    let in_row = &in_s[start..start + (x1 - x0)];
                                    acc +=
                                        go_row.iter().zip(in_row).map(|(a, b)| a * b).sum::<f64>();
                                }
                                if need_input && w != 0.0 {
                                    let gin_row = &mut gin[start..start + (x1 - x0)];
                                    for (gi, &gv) in gin_row.iter_mut().zip(go_row) {
                                        *gi += w * gv;
                                    }
                                }
                            }
                            if need_weight {
                                gw[widx] = acc;
                            }
                        }
                    }
                }
            }
            (gin, gw, gb)
        })
        .collect();

    let input_grad = need_input.then(|| {
        let mut all = Vec::with_capacity(g.batch * g.in_len());
        for (gin, _, _) in &per_sample {
            all.extend_from_slice(gin);
        }
        all
    });
    let weight_grad = need_weight.then(|| {
        let mut total = vec![0.0; g.weight_len()];
        for (_, gw, _) in &per_sample {
            for (t, v) in total.iter_mut().zip(gw) {
                *t += v;
            }
        }
        total
    });
    let bias_grad = need_bias.then(|| {
        let mut total = vec![0.0; g.out_channels];
        for (_, _, gb) in &per_sample {
            for (t, v) in total.iter_mut().zip(gb) {
                *t += v;
            }
        }
        total
    });
    ConvGrads {
        input: input_grad,
        weight: weight_grad,
        bias: bias_grad,
    }
}

/// Non-overlapping 2×2 mean pooling over `[planes, h, w]` with even `h`, `w`.
pub(crate) fn avg_pool2_forward(input: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &input[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                let a = src[2 * y * w + 2 * x];
                let b = src[2 * y * w + 2 * x + 1];
                let c = src[(2 * y + 1) * w + 2 * x];
                let d = src[(2 * y + 1) * w + 2 * x + 1];
                dst[y * ow + x] = 0.25 * (a + b + c + d);
            }
        }
    }
    out
}

pub(crate) fn avg_pool2_backward(grad_out: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut gin = vec![0.0; planes * h * w];
    for p in 0..planes {
        let src = &grad_out[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut gin[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                let g = 0.25 * src[y * ow + x];
                dst[2 * y * w + 2 * x] = g;
                dst[2 * y * w + 2 * x + 1] = g;
                dst[(2 * y + 1) * w + 2 * x] = g;
                dst[(2 * y + 1) * w + 2 * x + 1] = g;
            }
        }
    }
    gin
}
