//! Same-padded 3-D convolution by im2col + GEMM.
//!
//! Activations are `channels x D x H x W` row-major `f64`. A kernel of
//! extent `[kd, kh, kw]` is laid out `[out][in][kd][kh][kw]`, which is
//! exactly the row-major `out x (in * kd * kh * kw)` GEMM operand.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvShape {
    pub cin: usize,
    pub cout: usize,
    pub dims: [usize; 3],
    pub ext: [usize; 3],
}

impl ConvShape {
    fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    fn taps(&self) -> usize {
        self.ext.iter().product()
    }

    fn rows(&self) -> usize {
        self.cin * self.taps()
    }
}

/// Iterates `(row, src, dst)` triples mapping input voxels to column entries.
fn for_each_tap(s: &ConvShape, mut f: impl FnMut(usize, usize, usize)) {
    let [d, h, w] = s.dims;
    let [kd, kh, kw] = s.ext;
    let (pd, ph, pw) = (kd / 2, kh / 2, kw / 2);
    let p = s.voxels();
    for c in 0..s.cin {
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let row = ((c * kd + a) * kh + b) * kw + e;
                    for z in 0..d {
                        let zz = z + a;
                        if zz < pd || zz - pd >= d {
                            continue;
                        }
                        for y in 0..h {
                            let yy = y + b;
                            if yy < ph || yy - ph >= h {
                                continue;
                            }
                            let x_lo = pw.saturating_sub(e);
                            let x_hi = (w + pw).saturating_sub(e).min(w);
                            let src_row = c * p + ((zz - pd) * h + (yy - ph)) * w;
                            let dst_row = (z * h + y) * w;
                            for x in x_lo..x_hi {
                                f(row, src_row + x + e - pw, dst_row + x);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn im2col(input: &[f64], s: &ConvShape) -> Array2<f64> {
    let p = s.voxels();
    let mut cols = Array2::<f64>::zeros((s.rows(), p));
    let buf = cols.as_slice_mut().expect("standard layout");
    for_each_tap(s, |row, src, dst| buf[row * p + dst] = input[src]);
    cols
}

fn col2im(cols: &Array2<f64>, s: &ConvShape) -> Vec<f64> {
    let p = s.voxels();
    let buf = cols.as_slice().expect("standard layout");
    let mut out = vec![0.0; s.cin * p];
    for_each_tap(s, |row, src, dst| out[src] += buf[row * p + dst]);
    out
}

pub(crate) fn forward(input: &[f64], kernel: &[f64], bias: &[f64], s: &ConvShape) -> Vec<f64> {
    let p = s.voxels();
    debug_assert_eq!(input.len(), s.cin * p);
    let cols = im2col(input, s);
    let k = ArrayView2::from_shape((s.cout, s.rows()), kernel).expect("kernel layout");
    let mut out = Array2::<f64>::zeros((s.cout, p));
    for (mut row, &b) in out.rows_mut().into_iter().zip(bias) {
        row.fill(b);
    }
    general_mat_mul(1.0, &k, &cols, 1.0, &mut out);
    out.into_raw_vec_and_offset().0
}

pub(crate) struct ConvGrads {
    pub input: Vec<f64>,
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

pub(crate) fn backward(input: &[f64], kernel: &[f64], dout: &[f64], s: &ConvShape) -> ConvGrads {
    let p = s.voxels();
    let cols = im2col(input, s);
    let k = ArrayView2::from_shape((s.cout, s.rows()), kernel).expect("kernel layout");
    let g = ArrayView2::from_shape((s.cout, p), dout).expect("gradient layout");

    let mut dk = Array2::<f64>::zeros((s.cout, s.rows()));
    general_mat_mul(1.0, &g, &cols.t(), 0.0, &mut dk);
    let mut dcols = Array2::<f64>::zeros((s.rows(), p));
    general_mat_mul(1.0, &k.t(), &g, 0.0, &mut dcols);
    let bias = g.rows().into_iter().map(|r| r.sum()).collect();

    ConvGrads {
        input: col2im(&dcols, s),
        kernel: dk.into_raw_vec_and_offset().0,
        bias,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution with zero padding.
    fn naive(input: &[f64], kernel: &[f64], bias: &[f64], s: &ConvShape) -> Vec<f64> {
        let [d, h, w] = s.dims;
        let [kd, kh, kw] = s.ext;
        let mut out = vec![0.0; s.cout * d * h * w];
        for o in 0..s.cout {
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        let mut acc = bias[o];
                        for c in 0..s.cin {
                            for a in 0..kd {
                                for b in 0..kh {
                                    for e in 0..kw {
                                        let zz = z as isize + a as isize - (kd / 2) as isize;
                                        let yy = y as isize + b as isize - (kh / 2) as isize;
                                        let xx = x as isize + e as isize - (kw / 2) as isize;
                                        if zz < 0 || yy < 0 || xx < 0 {
                                            continue;
                                        }
                                        let (zz, yy, xx) = (zz as usize, yy as usize, xx as usize);
                                        if zz >= d || yy >= h || xx >= w {
                                            continue;
                                        }
                                        let kv = kernel[(((o * s.cin + c) * kd + a) * kh + b) * kw + e];
                                        acc += kv * input[((c * d + zz) * h + yy) * w + xx];
                                    }
                                }
                            }
                        }
                        out[((o * d + z) * h + y) * w + x] = acc;
                    }
                }
            }
        }
        out
    }

    fn random(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (dims, ext) in [
            ([1, 7, 6], [1, 3, 3]),
            ([4, 5, 3], [3, 3, 3]),
            ([5, 4, 6], [3, 3, 1]),
            ([2, 3, 3], [1, 5, 5]),
        ] {
            let s = ConvShape { cin: 3, cout: 2, dims, ext };
            let input = random(s.cin * s.voxels(), &mut rng);
            let kernel = random(s.cout * s.rows(), &mut rng);
            let bias = random(s.cout, &mut rng);
            let fast = forward(&input, &kernel, &bias, &s);
            let slow = naive(&input, &kernel, &bias, &s);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_is_the_adjoint() {
        // <conv(x), g> = <x, dx> + <k, dk> - <b,db> relations via bilinearity
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = ConvShape { cin: 2, cout: 3, dims: [3, 5, 4], ext: [3, 3, 3] };
        let x = random(s.cin * s.voxels(), &mut rng);
        let k = random(s.cout * s.rows(), &mut rng);
        let g = random(s.cout * s.voxels(), &mut rng);
        let zero_b = vec![0.0; s.cout];
        let y = forward(&x, &k, &zero_b, &s);
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let gr = backward(&x, &k, &g, &s);
        let via_x: f64 = x.iter().zip(&gr.input).map(|(a, b)| a * b).sum();
        let via_k: f64 = k.iter().zip(&gr.kernel).map(|(a, b)| a * b).sum();
        assert!((lhs - via_x).abs() < 1e-10 * lhs.abs().max(1.0));
        assert!((lhs - via_k).abs() < 1e-10 * lhs.abs().max(1.0));
        let gsum: Vec<f64> = g.chunks(s.voxels()).map(|c| c.iter().sum()).collect();
        for (a, b) in gr.bias.iter().zip(&gsum) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
