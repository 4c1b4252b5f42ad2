// Direct (loop) 2-D convolution kernels, NCHW layout, square kernels.

use crate::Tensor;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    #[inline]
    fn x_idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c_in + c) * self.h + y) * self.w + x
    }

    #[inline]
    fn o_idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c_out + c) * self.h_out + y) * self.w_out + x
    }

    /// Input coordinate touched by output coordinate `o` and kernel tap `k`
    /// for a forward convolution.
    #[inline]
    fn src(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }
}

// Forward convolution: weight [c_out, c_in, k, k].

pub(crate) fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, g: &ConvGeom) -> Tensor {
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    let mut out = vec![0.0; g.n * g.c_out * g.h_out * g.w_out];
    let kk = g.k * g.k;
    for n in 0..g.n {
        for co in 0..g.c_out {
            for oy in 0..g.h_out {
                for ox in 0..g.w_out {
                    let mut acc = bd[co];
                    for ci in 0..g.c_in {
                        let wbase = (co * g.c_in + ci) * kk;
                        for ky in 0..g.k {
                            let Some(iy) = g.src(oy, ky, g.h) else { continue };
                            for kx in 0..g.k {
                                let Some(ix) = g.src(ox, kx, g.w) else { continue };
                                acc += xd[g.x_idx(n, ci, iy, ix)] * wd[wbase + ky * g.k + kx];
                            }
                        }
                    }
                    out[g.o_idx(n, co, oy, ox)] = acc;
                }
            }
        }
    }
    Tensor::from_parts(vec![g.n, g.c_out, g.h_out, g.w_out], out)
}

pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    grad: &Tensor,
    g: &ConvGeom,
) -> (Tensor, Tensor, Tensor) {
    let (xd, wd, gd) = (x.data(), w.data(), grad.data());
    let mut dx = vec![0.0; xd.len()];
    let mut dw = vec![0.0; wd.len()];
    let mut db = vec![0.0; g.c_out];
    let kk = g.k * g.k;
    for n in 0..g.n {
        for co in 0..g.c_out {
            for oy in 0..g.h_out {
                for ox in 0..g.w_out {
                    let go = gd[g.o_idx(n, co, oy, ox)];
                    if go == 0.0 {
                        continue;
                    }
                    db[co] += go;
                    for ci in 0..g.c_in {
                        let wbase = (co * g.c_in + ci) * kk;
                        for ky in 0..g.k {
                            let Some(iy) = g.src(oy, ky, g.h) else { continue };
                            for kx in 0..g.k {
                                let Some(ix) = g.src(ox, kx, g.w) else { continue };
                                let xi = g.x_idx(n, ci, iy, ix);
                                let wi = wbase + ky * g.k + kx;
                                dw[wi] += go * xd[xi];
                                dx[xi] += go * wd[wi];
                            }
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(w.shape().to_vec(), dw),
        Tensor::from_parts(vec![g.c_out], db),
    )
}

// Transposed convolution: weight [c_in, c_out, k, k]; every input pixel
// scatters a scaled kernel into the output.

#[inline]
fn dst(g: &ConvGeom, i: usize, k: usize, limit: usize) -> Option<usize> {
    let pos = (i * g.stride + k) as isize - g.pad as isize;
    (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
}

pub(crate) fn conv_transpose2d(x: &Tensor, w: &Tensor, b: &Tensor, g: &ConvGeom) -> Tensor {
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    let plane = g.h_out * g.w_out;
    let mut out = vec![0.0; g.n * g.c_out * plane];
    for n in 0..g.n {
        for co in 0..g.c_out {
            let base = (n * g.c_out + co) * plane;
            out[base..base + plane].iter_mut().for_each(|v| *v = bd[co]);
        }
    }
    let kk = g.k * g.k;
    for n in 0..g.n {
        for ci in 0..g.c_in {
            for iy in 0..g.h {
                for ix in 0..g.w {
                    let v = xd[g.x_idx(n, ci, iy, ix)];
                    if v == 0.0 {
                        continue;
                    }
                    for co in 0..g.c_out {
                        let wbase = (ci * g.c_out + co) * kk;
                        for ky in 0..g.k {
                            let Some(oy) = dst(g, iy, ky, g.h_out) else { continue };
                            for kx in 0..g.k {
                                let Some(ox) = dst(g, ix, kx, g.w_out) else { continue };
                                out[g.o_idx(n, co, oy, ox)] += v * wd[wbase + ky * g.k + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![g.n, g.c_out, g.h_out, g.w_out], out)
}

pub(crate) fn conv_transpose2d_backward(
    x: &Tensor,
    w: &Tensor,
    grad: &Tensor,
    g: &ConvGeom,
) -> (Tensor, Tensor, Tensor) {
    let (xd, wd, gd) = (x.data(), w.data(), grad.data());
    let mut dx = vec![0.0; xd.len()];
    let mut dw = vec![0.0; wd.len()];
    let mut db = vec![0.0; g.c_out];
    let plane = g.h_out * g.w_out;
    for n in 0..g.n {
        for co in 0..g.c_out {
            let base = (n * g.c_out + co) * plane;
            db[co] += gd[base..base + plane].iter().sum::<f64>();
        }
    }
    let kk = g.k * g.k;
    for n in 0..g.n {
        for ci in 0..g.c_in {
            for iy in 0..g.h {
                for ix in 0..g.w {
                    let xi = g.x_idx(n, ci, iy, ix);
                    let v = xd[xi];
                    let mut acc = 0.0;
                    for co in 0..g.c_out {
                        let wbase = (ci * g.c_out + co) * kk;
                        for ky in 0..g.k {
                            let Some(oy) = dst(g, iy, ky, g.h_out) else { continue };
                            for kx in 0..g.k {
                                let Some(ox) = dst(g, ix, kx, g.w_out) else { continue };
                                let go = gd[g.o_idx(n, co, oy, ox)];
                                let wi = wbase + ky * g.k + kx;
                                acc += go * wd[wi];
                                dw[wi] += go * v;
                            }
                        }
                    }
                    dx[xi] = acc;
                }
            }
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(w.shape().to_vec(), dw),
        Tensor::from_parts(vec![g.c_out], db),
    )
}
