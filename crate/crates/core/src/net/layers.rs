//! Forward and backward passes of the individual layers.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// `c = a * b + beta * c` for strided `a` (m x k) and `b` (k x n), with `c`
/// row-major m x n.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(m * n <= c.len());
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` is a distinct, densely strided buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds one `(channels, h, w)` item into a `(channels*k*k, h*w)` matrix
/// of zero-padded `k x k` patches.
fn im2col(input: &[f64], channels: usize, h: usize, w: usize, k: usize, col: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for c in 0..channels {
        let plane = &input[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((c * k + ky) * k + kx) * hw..][..hw];
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    let out = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    out[..x_lo].fill(0.0);
                    out[x_hi..].fill(0.0);
                    let s0 = (x_lo as isize + dx) as usize;
                    out[x_lo..x_hi].copy_from_slice(&src[s0..s0 + (x_hi - x_lo)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
fn col2im(col: &[f64], channels: usize, h: usize, w: usize, k: usize, out: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    out.fill(0.0);
    for c in 0..channels {
        let plane = &mut out[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((c * k + ky) * k + kx) * hw..][..hw];
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let s0 = (x_lo as isize + dx) as usize;
                    for (d, &g) in dst[s0..s0 + (x_hi - x_lo)]
                        .iter_mut()
                        .zip(&row[y * w + x_lo..y * w + x_hi])
                    {
                        *d += g;
                    }
                }
            }
        }
    }
}

fn check_conv(x: &Tensor, weight: &Tensor, bias: &[f64]) -> Result<usize> {
    let [cout, cin, kh, kw] = weight.shape();
    if kh != kw || kh % 2 == 0 {
        return Err(Error::Shape(format!(
            "kernel must be square and odd, got {kh}x{kw}"
        )));
    }
    if x.channels() != cin {
        return Err(Error::Shape(format!(
            "conv expects {cin} input channels, got {}",
            x.channels()
        )));
    }
    if bias.len() != cout {
        return Err(Error::Shape(format!(
            "conv has {cout} filters but {} biases",
            bias.len()
        )));
    }
    Ok(kh)
}

/// Cross-correlation with zero "same" padding; `weight` is
/// `(out_channels, in_channels, k, k)` with odd `k`.
pub fn conv2d_forward(x: &Tensor, weight: &Tensor, bias: &[f64]) -> Result<Tensor> {
    let k = check_conv(x, weight, bias)?;
    let [n, cin, h, w] = x.shape();
    let cout = weight.shape()[0];
    let (rows, hw) = (cin * k * k, h * w);
    let mut out = Tensor::zeros([n, cout, h, w]);
    let mut col = vec![0.0; rows * hw];
    for i in 0..n {
        im2col(x.item(i), cin, h, w, k, &mut col);
        let o = out.item_mut(i);
        for (c, &b) in bias.iter().enumerate() {
            o[c * hw..(c + 1) * hw].fill(b);
        }
        gemm(cout, rows, hw, weight.data(), (rows, 1), &col, (hw, 1), 1.0, o);
    }
    Ok(out)
}

/// Gradients of [`conv2d_forward`] with respect to input, weight and bias.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let [cout, cin, k, _] = weight.shape();
    let bias_dummy = vec![0.0; cout];
    check_conv(x, weight, &bias_dummy)?;
    let [n, _, h, w] = x.shape();
    grad_out.ensure_shape([n, cout, h, w], "conv gradient")?;
    let (rows, hw) = (cin * k * k, h * w);
    let mut grad_x = Tensor::zeros(x.shape());
    let mut grad_w = Tensor::zeros(weight.shape());
    let mut grad_b = vec![0.0; cout];
    let mut col = vec![0.0; rows * hw];
    let mut grad_col = vec![0.0; rows * hw];
    for i in 0..n {
        let g = grad_out.item(i);
        for (c, gb) in grad_b.iter_mut().enumerate() {
            *gb += g[c * hw..(c + 1) * hw].iter().sum::<f64>();
        }
        im2col(x.item(i), cin, h, w, k, &mut col);
        // dW += G (cout x hw) * col^T (hw x rows)
        gemm(cout, hw, rows, g, (hw, 1), &col, (1, hw), 1.0, grad_w.data_mut());
        // dcol = W^T (rows x cout) * G (cout x hw)
        gemm(rows, cout, hw, weight.data(), (1, rows), g, (hw, 1), 0.0, &mut grad_col);
        col2im(&grad_col, cin, h, w, k, grad_x.item_mut(i));
    }
    Ok((grad_x, grad_w, grad_b))
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor::new(x.shape(), x.data().iter().map(|&v| v.max(0.0)).collect())
        .expect("shape preserved")
}

/// Passes the gradient where `x > 0`; the subgradient at 0 is 0.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    grad_out.ensure_shape(x.shape(), "relu gradient")?;
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(x.shape(), data)
}

/// Argmax position of every 2x2 pooling window, encoded as `dy * 2 + dx`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolIndices {
    shape: [usize; 4],
    indices: Vec<u8>,
}

impl PoolIndices {
    /// `shape` is the pooled output shape.
    pub fn new(shape: [usize; 4], indices: Vec<u8>) -> Result<Self> {
        if indices.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "{} pool indices for pooled shape {shape:?}",
                indices.len()
            )));
        }
        if let Some(bad) = indices.iter().find(|&&i| i > 3) {
            return Err(Error::Shape(format!("pool index {bad} outside its 2x2 window")));
        }
        Ok(PoolIndices { shape, indices })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn indices(&self) -> &[u8] {
        &self.indices
    }
}

/// 2x2 max pooling, stride 2. Ties keep the first cell in row-major window
/// order.
pub fn maxpool2x2(x: &Tensor) -> Result<(Tensor, PoolIndices)> {
    let [n, c, h, w] = x.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "2x2 pooling needs even spatial dims, got {h}x{w}"
        )));
    }
    let (ph, pw) = (h / 2, w / 2);
    let shape = [n, c, ph, pw];
    let mut out = Vec::with_capacity(n * c * ph * pw);
    let mut indices = Vec::with_capacity(out.capacity());
    for plane in x.data().chunks_exact(h * w) {
        for py in 0..ph {
            for px in 0..pw {
                let base = 2 * py * w + 2 * px;
                let cells = [plane[base], plane[base + 1], plane[base + w], plane[base + w + 1]];
                let mut best = 0;
                for (i, &v) in cells.iter().enumerate().skip(1) {
                    if v > cells[best] {
                        best = i;
                    }
                }
                out.push(cells[best]);
                indices.push(best as u8);
            }
        }
    }
    Ok((Tensor::new(shape, out)?, PoolIndices { shape, indices }))
}

/// Places each value at its recorded window position, zeros elsewhere.
/// Also the backward pass of [`maxpool2x2`].
pub fn unpool2x2(y: &Tensor, idx: &PoolIndices) -> Result<Tensor> {
    y.ensure_shape(idx.shape, "unpool input")?;
    let [n, c, ph, pw] = y.shape();
    let (h, w) = (2 * ph, 2 * pw);
    let mut out = Tensor::zeros([n, c, h, w]);
    for (plane_i, (vals, ids)) in y
        .data()
        .chunks_exact(ph * pw)
        .zip(idx.indices.chunks_exact(ph * pw))
        .enumerate()
    {
        let plane = &mut out.data_mut()[plane_i * h * w..(plane_i + 1) * h * w];
        for py in 0..ph {
            for px in 0..pw {
                let i = py * pw + px;
                let (dy, dx) = ((ids[i] / 2) as usize, (ids[i] % 2) as usize);
                plane[(2 * py + dy) * w + 2 * px + dx] = vals[i];
            }
        }
    }
    Ok(out)
}

/// Backward pass of [`unpool2x2`]: gathers the gradient at the recorded
/// positions.
pub fn unpool2x2_backward(grad_out: &Tensor, idx: &PoolIndices) -> Result<Tensor> {
    let [n, c, ph, pw] = idx.shape;
    let (h, w) = (2 * ph, 2 * pw);
    grad_out.ensure_shape([n, c, h, w], "unpool gradient")?;
    let mut out = Vec::with_capacity(n * c * ph * pw);
    for (plane, ids) in grad_out
        .data()
        .chunks_exact(h * w)
        .zip(idx.indices.chunks_exact(ph * pw))
    {
        for py in 0..ph {
            for px in 0..pw {
                let id = ids[py * pw + px];
                let (dy, dx) = ((id / 2) as usize, (id % 2) as usize);
                out.push(plane[(2 * py + dy) * w + 2 * px + dx]);
            }
        }
    }
    Tensor::new(idx.shape, out)
}

/// Softmax over the channel axis at every pixel, max-subtracted.
pub fn softmax_per_pixel(logits: &Tensor) -> Tensor {
    let [n, c, h, w] = logits.shape();
    let hw = h * w;
    let mut out = Tensor::zeros(logits.shape());
    for i in 0..n {
        let src = logits.item(i);
        let dst = out.item_mut(i);
        for p in 0..hw {
            let max = (0..c).map(|k| src[k * hw + p]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for k in 0..c {
                let e = (src[k * hw + p] - max).exp();
                dst[k * hw + p] = e;
                sum += e;
            }
            for k in 0..c {
                dst[k * hw + p] /= sum;
            }
        }
    }
    out
}

/// Floor applied inside the logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

/// Class-weighted cross-entropy averaged over all pixels of the batch.
///
/// `targets` holds one class id per pixel in `(n, y, x)` order. Returns the
/// loss and its gradient with respect to the logits that produced `probs`.
pub fn weighted_cross_entropy(
    probs: &Tensor,
    targets: &[u8],
    weights: &[f64],
) -> Result<(f64, Tensor)> {
    let [n, c, h, w] = probs.shape();
    let hw = h * w;
    if targets.len() != n * hw {
        return Err(Error::Shape(format!(
            "{} targets for {n}x{h}x{w} pixels",
            targets.len()
        )));
    }
    if weights.len() != c {
        return Err(Error::Shape(format!(
            "{} class weights for {c} classes",
            weights.len()
        )));
    }
    let total = (n * hw) as f64;
    let mut loss = 0.0;
    let mut grad = probs.clone();
    for i in 0..n {
        let labels = &targets[i * hw..(i + 1) * hw];
        let p = probs.item(i);
        let g = grad.item_mut(i);
        for (px, &y) in labels.iter().enumerate() {
            let y = y as usize;
            if y >= c {
                return Err(Error::InvalidLabel {
                    label: y as u8,
                    index: i * hw + px,
                });
            }
            let wy = weights[y];
            loss -= wy * p[y * hw + px].max(LOG_FLOOR).ln();
            for k in 0..c {
                let onehot = if k == y { 1.0 } else { 0.0 };
                g[k * hw + px] = wy * (p[k * hw + px] - onehot) / total;
            }
        }
    }
    Ok((loss / total, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Direct nested-loop convolution.
    fn naive_conv(x: &Tensor, wt: &Tensor, b: &[f64]) -> Tensor {
        let [n, cin, h, w] = x.shape();
        let [cout, _, k, _] = wt.shape();
        let pad = (k / 2) as isize;
        Tensor::from_fn([n, cout, h, w], |idx| {
            let xx = idx % w;
            let yy = idx / w % h;
            let co = idx / (w * h) % cout;
            let ni = idx / (w * h * cout);
            let mut s = b[co];
            for ci in 0..cin {
                for ky in 0..k {
                    for kx in 0..k {
                        let sy = yy as isize + ky as isize - pad;
                        let sx = xx as isize + kx as isize - pad;
                        if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                            s += wt.at(co, ci, ky, kx) * x.at(ni, ci, sy as usize, sx as usize);
                        }
                    }
                }
            }
            s
        })
    }

    #[test]
    fn unit_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random([2, 1, 4, 5], &mut rng);
        let wt = Tensor::new([1, 1, 1, 1], vec![1.0]).unwrap();
        assert_eq!(conv2d_forward(&x, &wt, &[0.0]).unwrap(), x);
    }

    #[test]
    fn zero_input_gives_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::zeros([1, 2, 3, 3]);
        let wt = random([3, 2, 3, 3], &mut rng);
        let out = conv2d_forward(&x, &wt, &[0.5, -1.0, 2.0]).unwrap();
        for c in 0..3 {
            for p in 0..9 {
                assert_eq!(out.item(0)[c * 9 + p], [0.5, -1.0, 2.0][c]);
            }
        }
    }

    #[test]
    fn conv_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for shape in [[1, 2, 5, 5], [2, 3, 4, 7], [1, 1, 1, 1], [1, 2, 2, 3]] {
            let x = random(shape, &mut rng);
            let wt = random([3, shape[1], 3, 3], &mut rng);
            let b = vec![0.1, -0.2, 0.3];
            let fast = conv2d_forward(&x, &wt, &b).unwrap();
            let slow = naive_conv(&x, &wt, &b);
            for (a, e) in fast.data().iter().zip(slow.data()) {
                assert!((a - e).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn conv_shape_errors() {
        let x = Tensor::zeros([1, 2, 4, 4]);
        assert!(conv2d_forward(&x, &Tensor::zeros([1, 3, 3, 3]), &[0.0]).is_err());
        assert!(conv2d_forward(&x, &Tensor::zeros([1, 2, 2, 2]), &[0.0]).is_err());
        assert!(conv2d_forward(&x, &Tensor::zeros([1, 2, 3, 3]), &[]).is_err());
        let g = Tensor::zeros([1, 1, 4, 3]);
        assert!(conv2d_backward(&x, &Tensor::zeros([1, 2, 3, 3]), &g).is_err());
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random([2, 2, 4, 4], &mut rng);
        let wt = random([3, 2, 3, 3], &mut rng);
        let (gx, gw, gb) = conv2d_backward(&x, &wt, &Tensor::zeros([2, 3, 4, 4])).unwrap();
        assert!(gx.data().iter().chain(gw.data()).chain(&gb).all(|&v| v == 0.0));
    }

    #[test]
    fn bias_gradient_is_upstream_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random([2, 2, 3, 4], &mut rng);
        let wt = random([2, 2, 3, 3], &mut rng);
        let g = random([2, 2, 3, 4], &mut rng);
        let (_, _, gb) = conv2d_backward(&x, &wt, &g).unwrap();
        for (k, &b) in gb.iter().enumerate() {
            let expect: f64 = (0..2)
                .flat_map(|n| (0..12).map(move |p| (n, p)))
                .map(|(n, p)| g.item(n)[k * 12 + p])
                .sum();
            assert!((b - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn relu_basics() {
        let x = Tensor::new([1, 1, 1, 4], vec![-1.0, 0.0, 0.5, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 0.5, 2.0]);
        let g = Tensor::new([1, 1, 1, 4], vec![1.0; 4]).unwrap();
        assert_eq!(relu_backward(&x, &g).unwrap().data(), &[0.0, 0.0, 1.0, 1.0]);
        let pos = Tensor::new([1, 1, 1, 2], vec![0.0, 3.0]).unwrap();
        assert_eq!(relu(&pos), pos);
    }

    #[test]
    fn pool_and_unpool_example() {
        let x = Tensor::new([1, 1, 2, 2], vec![1.0, 3.0, 2.0, 4.0]).unwrap();
        let (y, idx) = maxpool2x2(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(idx.indices(), &[3]);
        assert_eq!(unpool2x2(&y, &idx).unwrap().data(), &[0.0, 0.0, 0.0, 4.0]);
    }

    #[test]
    fn pool_ties_take_first_in_scan_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        // values from a tiny alphabet so ties are common
        let x = Tensor::from_fn([2, 3, 6, 8], |_| rng.gen_range(0..3) as f64);
        let (_, idx) = maxpool2x2(&x).unwrap();
        let [n, c, h, w] = x.shape();
        let mut k = 0;
        for ni in 0..n {
            for ci in 0..c {
                for py in 0..h / 2 {
                    for px in 0..w / 2 {
                        let cells = [
                            x.at(ni, ci, 2 * py, 2 * px),
                            x.at(ni, ci, 2 * py, 2 * px + 1),
                            x.at(ni, ci, 2 * py + 1, 2 * px),
                            x.at(ni, ci, 2 * py + 1, 2 * px + 1),
                        ];
                        let max = cells.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let first = cells.iter().position(|&v| v == max).unwrap();
                        assert_eq!(idx.indices()[k] as usize, first);
                        k += 1;
                    }
                }
            }
        }
    }

    #[test]
    fn unpool_of_pool_keeps_only_window_maxima() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random([1, 2, 4, 6], &mut rng);
        let (y, idx) = maxpool2x2(&x).unwrap();
        let u = unpool2x2(&y, &idx).unwrap();
        let nonzero = u.data().iter().filter(|&&v| v != 0.0).count();
        assert!(nonzero * 4 <= u.len());
        for (i, (&a, &b)) in u.data().iter().zip(x.data()).enumerate() {
            let (xx, yy) = (i % 6, i / 6 % 4);
            let plane = i / 24;
            let win_max = (0..2)
                .flat_map(|dy| (0..2).map(move |dx| (dy, dx)))
                .map(|(dy, dx)| x.at(0, plane, yy / 2 * 2 + dy, xx / 2 * 2 + dx))
                .fold(f64::NEG_INFINITY, f64::max);
            if a != 0.0 {
                assert_eq!(a, b);
                assert_eq!(a, win_max);
            }
        }
    }

    #[test]
    fn pool_errors() {
        assert!(maxpool2x2(&Tensor::zeros([1, 1, 3, 4])).is_err());
        assert!(PoolIndices::new([1, 1, 1, 1], vec![4]).is_err());
        let idx = PoolIndices::new([1, 1, 1, 1], vec![0]).unwrap();
        assert!(unpool2x2(&Tensor::zeros([1, 1, 2, 1]), &idx).is_err());
    }

    #[test]
    fn softmax_cases() {
        let z = Tensor::new([1, 3, 1, 1], vec![0.0, 0.0, 0.0]).unwrap();
        for &p in softmax_per_pixel(&z).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = Tensor::new([1, 3, 1, 1], vec![1000.0, 0.0, 0.0]).unwrap();
        let p = softmax_per_pixel(&big);
        assert_eq!(p.data()[0], 1.0);
        assert!(p.data()[1] < 1e-300);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let l = random([2, 3, 2, 2], &mut rng);
        let shifted = Tensor::new(l.shape(), l.data().iter().map(|v| v + 17.5).collect()).unwrap();
        let (a, b) = (softmax_per_pixel(&l), softmax_per_pixel(&shifted));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-7);
        }
        for n in 0..2 {
            for p in 0..4 {
                let s: f64 = (0..3).map(|c| a.item(n)[c * 4 + p]).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn uniform_cross_entropy_is_ln3() {
        let probs = Tensor::new([1, 3, 1, 2], vec![1.0 / 3.0; 6]).unwrap();
        let (loss, _) = weighted_cross_entropy(&probs, &[0, 2], &[1.0; 3]).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn weed_weight_scales_weed_contribution() {
        let probs = Tensor::new([1, 3, 1, 2], vec![0.2, 0.5, 0.3, 0.4, 0.5, 0.3]).unwrap();
        let targets = [0u8, 2];
        let (base, _) = weighted_cross_entropy(&probs, &targets, &[1.0, 1.0, 1.0]).unwrap();
        let (doubled, _) = weighted_cross_entropy(&probs, &targets, &[1.0, 1.0, 2.0]).unwrap();
        let weed_term = -(0.3f64).ln() / 2.0;
        assert!((doubled - base - weed_term).abs() < 1e-12);
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    /// Central difference of `f` along coordinate `i` of `v`.
    fn central(v: &Tensor, i: usize, eps: f64, f: &dyn Fn(&Tensor) -> f64) -> f64 {
        let mut plus = v.clone();
        plus.data_mut()[i] += eps;
        let mut minus = v.clone();
        minus.data_mut()[i] -= eps;
        (f(&plus) - f(&minus)) / (2.0 * eps)
    }

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let x = random([2, 2, 4, 5], &mut rng);
            let wt = random([3, 2, 3, 3], &mut rng);
            let b = vec![0.1, 0.2, -0.3];
            let probe = random([2, 3, 4, 5], &mut rng);
            let (gx, gw, gb) = conv2d_backward(&x, &wt, &probe).unwrap();
            let eps = 1e-3;
            for i in 0..x.len() {
                let fd = central(&x, i, eps, &|v| dot(&conv2d_forward(v, &wt, &b).unwrap(), &probe));
                assert!(rel_err(fd, gx.data()[i]) < 1e-3);
            }
            for i in 0..wt.len() {
                let fd = central(&wt, i, eps, &|v| dot(&conv2d_forward(&x, v, &b).unwrap(), &probe));
                assert!(rel_err(fd, gw.data()[i]) < 1e-3);
            }
            for k in 0..3 {
                let mut bp = b.clone();
                bp[k] += eps;
                let mut bm = b.clone();
                bm[k] -= eps;
                let fd = (dot(&conv2d_forward(&x, &wt, &bp).unwrap(), &probe)
                    - dot(&conv2d_forward(&x, &wt, &bm).unwrap(), &probe))
                    / (2.0 * eps);
                assert!(rel_err(fd, gb[k]) < 1e-3);
            }
        }
    }

    #[test]
    fn relu_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        // keep samples away from the kink
        let x = Tensor::from_fn([1, 2, 3, 3], |_| {
            let v: f64 = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) { v } else { -v }
        });
        let probe = random(x.shape(), &mut rng);
        let g = relu_backward(&x, &probe).unwrap();
        for i in 0..x.len() {
            let fd = central(&x, i, 1e-3, &|v| dot(&relu(v), &probe));
            assert!((fd - g.data()[i]).abs() < 1e-4);
        }
    }

    #[test]
    fn pool_and_unpool_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random([2, 2, 4, 6], &mut rng);
        let (y, idx) = maxpool2x2(&x).unwrap();
        let probe = random(y.shape(), &mut rng);
        let gx = unpool2x2(&probe, &idx).unwrap();
        for i in 0..x.len() {
            let fd = central(&x, i, 1e-3, &|v| dot(&maxpool2x2(v).unwrap().0, &probe));
            assert!((fd - gx.data()[i]).abs() < 1e-6);
        }
        let up_probe = random(x.shape(), &mut rng);
        let gy = unpool2x2_backward(&up_probe, &idx).unwrap();
        for i in 0..y.len() {
            let fd = central(&y, i, 1e-3, &|v| dot(&unpool2x2(v, &idx).unwrap(), &up_probe));
            assert!((fd - gy.data()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let logits = random([2, 3, 2, 3], &mut rng);
        let targets: Vec<u8> = (0..12).map(|_| rng.gen_range(0..3)).collect();
        let w = [0.4, 1.0, 2.5];
        let (_, g) = weighted_cross_entropy(&softmax_per_pixel(&logits), &targets, &w).unwrap();
        for i in 0..logits.len() {
            let fd = central(&logits, i, 1e-3, &|v| {
                weighted_cross_entropy(&softmax_per_pixel(v), &targets, &w).unwrap().0
            });
            assert!(rel_err(fd, g.data()[i]) < 1e-3);
        }
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let probs = Tensor::new([1, 3, 1, 1], vec![1.0 / 3.0; 3]).unwrap();
        assert!(matches!(
            weighted_cross_entropy(&probs, &[3], &[1.0; 3]),
            Err(Error::InvalidLabel { label: 3, .. })
        ));
    }
}
