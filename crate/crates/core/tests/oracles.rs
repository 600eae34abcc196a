//! Kernels checked against direct reference implementations.

use oxygan::data::{crop_slide, resize_bilinear};
use oxygan::tensor::RunningStats;
use oxygan::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = dims.iter().product();
    Tensor::new(dims, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol * (1.0 + y.abs()), "element {i}: {x} vs {y}");
    }
}

/// out[n][o][i][j] = b[o] + Σ x[n][c][i·s + ki − p][j·s + kj − p] · w[o][c][ki][kj]
fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], s: usize, p: usize) -> (Vec<usize>, Vec<f64>) {
    let (xd, wd) = (x.dims(), w.dims());
    let (n, c, h, wi) = (xd[0], xd[1], xd[2], xd[3]);
    let (o, k) = (wd[0], wd[2]);
    let oh = (h + 2 * p - k) / s + 1;
    let ow = (wi + 2 * p - k) / s + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for ni in 0..n {
        for oi in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = b[oi];
                    for ci in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let (r, col) = ((i * s + ki) as isize - p as isize, (j * s + kj) as isize - p as isize);
                                if r < 0 || col < 0 || r >= h as isize || col >= wi as isize {
                                    continue;
                                }
                                let xv = x.data()[((ni * c + ci) * h + r as usize) * wi + col as usize];
                                acc += xv * w.data()[((oi * c + ci) * k + ki) * k + kj];
                            }
                        }
                    }
                    out[((ni * o + oi) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    (vec![n, o, oh, ow], out)
}

/// Scatter form: every input pixel adds x · w[c][o] into a k×k output patch.
fn conv_transpose_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], s: usize, p: usize) -> (Vec<usize>, Vec<f64>) {
    let (xd, wd) = (x.dims(), w.dims());
    let (n, c, h, wi) = (xd[0], xd[1], xd[2], xd[3]);
    let (o, k) = (wd[1], wd[2]);
    let oh = (h - 1) * s + k - 2 * p;
    let ow = (wi - 1) * s + k - 2 * p;
    let mut out = vec![0.0; n * o * oh * ow];
    for ni in 0..n {
        for oi in 0..o {
            for v in &mut out[(ni * o + oi) * oh * ow..(ni * o + oi + 1) * oh * ow] {
                *v = b[oi];
            }
        }
        for ci in 0..c {
            for i in 0..h {
                for j in 0..wi {
                    let xv = x.data()[((ni * c + ci) * h + i) * wi + j];
                    for oi in 0..o {
                        for ki in 0..k {
                            for kj in 0..k {
                                let (r, col) = ((i * s + ki) as isize - p as isize, (j * s + kj) as isize - p as isize);
                                if r < 0 || col < 0 || r >= oh as isize || col >= ow as isize {
                                    continue;
                                }
                                out[((ni * o + oi) * oh + r as usize) * ow + col as usize] +=
                                    xv * w.data()[((ci * o + oi) * k + ki) * k + kj];
                            }
                        }
                    }
                }
            }
        }
    }
    (vec![n, o, oh, ow], out)
}

#[test]
fn conv2d_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (n, c, o, h, w, k, s, p) in [
        (2, 3, 4, 8, 8, 4, 2, 1),
        (1, 2, 3, 7, 9, 3, 1, 1),
        (3, 1, 2, 6, 5, 2, 1, 0),
        (1, 6, 1, 9, 9, 4, 1, 1),
    ] {
        let x = random(&[n, c, h, w], &mut rng);
        let wt = random(&[o, c, k, k], &mut rng);
        let b: Vec<f64> = (0..o).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut tape: Tape<f64> = Tape::new();
        let (xv, wv) = (tape.constant(x.clone()), tape.constant(wt.clone()));
        let bv = tape.constant(Tensor::new(&[o], b.clone()).unwrap());
        let y = tape.conv2d(xv, wv, Some(bv), s, p).unwrap();
        let (dims, want) = conv_oracle(&x, &wt, &b, s, p);
        assert_eq!(tape.value(y).dims(), dims.as_slice());
        close(tape.value(y).data(), &want, 1e-12);
    }
}

#[test]
fn conv_transpose2d_matches_scatter() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (n, c, o, h, w, k, s, p) in [(2, 4, 3, 4, 4, 4, 2, 1), (1, 2, 2, 3, 5, 3, 1, 1), (1, 3, 1, 2, 2, 4, 2, 1)] {
        let x = random(&[n, c, h, w], &mut rng);
        let wt = random(&[c, o, k, k], &mut rng);
        let b: Vec<f64> = (0..o).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut tape: Tape<f64> = Tape::new();
        let (xv, wv) = (tape.constant(x.clone()), tape.constant(wt.clone()));
        let bv = tape.constant(Tensor::new(&[o], b.clone()).unwrap());
        let y = tape.conv_transpose2d(xv, wv, Some(bv), s, p).unwrap();
        let (dims, want) = conv_transpose_oracle(&x, &wt, &b, s, p);
        assert_eq!(tape.value(y).dims(), dims.as_slice());
        close(tape.value(y).data(), &want, 1e-12);
    }
}

/// ⟨conv(x, W), y⟩ = ⟨x, convᵀ(y, W)⟩ for the same weight tensor.
#[test]
fn conv_transpose_is_the_adjoint_of_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n, ci, co, h, k, s, p) = (2, 3, 5, 8, 4, 2, 1);
    let x = random(&[n, ci, h, h], &mut rng);
    let wt = random(&[co, ci, k, k], &mut rng);
    let mut tape: Tape<f64> = Tape::new();
    let (xv, wv) = (tape.constant(x.clone()), tape.constant(wt));
    let cx = tape.conv2d(xv, wv, None, s, p).unwrap();
    let y = random(tape.value(cx).dims(), &mut rng);
    let yv = tape.constant(y.clone());
    let ty = tape.conv_transpose2d(yv, wv, None, s, p).unwrap();
    assert_eq!(tape.value(ty).dims(), x.dims());
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(a, b)| a * b).sum::<f64>();
    let lhs = dot(tape.value(cx).data(), y.data());
    let rhs = dot(x.data(), tape.value(ty).data());
    assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
}

#[test]
fn batch_norm_matches_two_pass_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (n, c, h, w) = (3, 2, 4, 5);
    let x = random(&[n, c, h, w], &mut rng).map(|v| 3.0 * v + 1.5);
    let gamma = [0.7, -1.3];
    let beta = [0.2, 0.5];
    let mut stats = RunningStats::<f64>::new(c);
    stats.mean = vec![0.25, -0.5];
    stats.var = vec![2.0, 0.5];
    let (mom, eps) = (stats.momentum, stats.eps);
    let (old_mean, old_var) = (stats.mean.clone(), stats.var.clone());

    let mut tape: Tape<f64> = Tape::new();
    let xv = tape.constant(x.clone());
    let g = tape.constant(Tensor::new(&[c], gamma.to_vec()).unwrap());
    let b = tape.constant(Tensor::new(&[c], beta.to_vec()).unwrap());
    let y = tape.batch_norm2d(xv, g, b, &mut stats, true).unwrap();

    let hw = h * w;
    let m = (n * hw) as f64;
    let mut want = vec![0.0; x.numel()];
    for ch in 0..c {
        let members: Vec<usize> = (0..n).flat_map(|ni| (0..hw).map(move |i| (ni * c + ch) * hw + i)).collect();
        let mean = members.iter().map(|&i| x.data()[i]).sum::<f64>() / m;
        let var = members.iter().map(|&i| (x.data()[i] - mean).powi(2)).sum::<f64>() / m;
        for &i in &members {
            want[i] = gamma[ch] * (x.data()[i] - mean) / (var + eps).sqrt() + beta[ch];
        }
        let run_mean = (1.0 - mom) * old_mean[ch] + mom * mean;
        let run_var = (1.0 - mom) * old_var[ch] + mom * var * m / (m - 1.0);
        assert!((stats.mean[ch] - run_mean).abs() < 1e-12);
        assert!((stats.var[ch] - run_var).abs() < 1e-12);
    }
    close(tape.value(y).data(), &want, 1e-12);

    let frozen = stats.clone();
    let y_eval = tape.batch_norm2d(xv, g, b, &mut stats, false).unwrap();
    assert_eq!(stats, frozen);
    let want_eval: Vec<f64> = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = (i / hw) % c;
            gamma[ch] * (v - frozen.mean[ch]) / (frozen.var[ch] + eps).sqrt() + beta[ch]
        })
        .collect();
    close(tape.value(y_eval).data(), &want_eval, 1e-12);
}

/// Corner-aligned bilinear sampling written out per output pixel.
fn bilinear_oracle(img: &Tensor, oh: usize, ow: usize) -> Vec<f64> {
    let d = img.dims();
    let (c, h, w) = (d[0], d[1], d[2]);
    let at = |ch: usize, r: usize, col: usize| img.data()[(ch * h + r) * w + col] as f64;
    let mut out = Vec::new();
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let sy = if oh > 1 { i as f64 * (h - 1) as f64 / (oh - 1) as f64 } else { 0.0 };
                let sx = if ow > 1 { j as f64 * (w - 1) as f64 / (ow - 1) as f64 } else { 0.0 };
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                out.push(
                    at(ch, y0, x0) * (1.0 - fy) * (1.0 - fx)
                        + at(ch, y0, x1) * (1.0 - fy) * fx
                        + at(ch, y1, x0) * fy * (1.0 - fx)
                        + at(ch, y1, x1) * fy * fx,
                );
            }
        }
    }
    out
}

#[test]
fn bilinear_resize_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (h, w, oh, ow) in [(128, 128, 256, 256), (5, 7, 9, 4), (16, 16, 8, 8), (3, 3, 1, 5)] {
        let img = random(&[2, h, w], &mut rng).cast::<f32>();
        let got = resize_bilinear(&img, oh, ow).unwrap();
        assert_eq!(got.dims(), &[2, oh, ow]);
        let got: Vec<f64> = got.data().iter().map(|&v| v as f64).collect();
        close(&got, &bilinear_oracle(&img, oh, ow), 1e-6);
    }
}

#[test]
fn crops_match_direct_indexing() {
    let (c, h, w, win, stride) = (3, 20, 27, 8, 5);
    let img = Tensor::from_fn(&[c, h, w], |i| i as f32);
    let crops = crop_slide(&img, win, stride).unwrap();
    let cols = (w - win) / stride + 1;
    assert_eq!(crops.len(), ((h - win) / stride + 1) * cols);
    for (idx, crop) in crops.iter().enumerate() {
        let (top, left) = ((idx / cols) * stride, (idx % cols) * stride);
        for ch in 0..c {
            for r in 0..win {
                for col in 0..win {
                    let want = ((ch * h + top + r) * w + left + col) as f32;
                    assert_eq!(crop.data()[(ch * win + r) * win + col], want);
                }
            }
        }
    }
}
