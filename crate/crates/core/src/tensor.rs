//! Dense f64 tensors and the handful of differentiable kernels the model
//! is built from. Every forward kernel has a hand-written backward.

use rand::Rng;

use crate::error::{Error, Result};

/// Row-major dense tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Numeric(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Uniform in `±sqrt(1/fan_in)`.
    pub fn uniform_init<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Self {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|_| rng.random_range(-bound..=bound)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn scale(&mut self, k: f64) {
        self.data.iter_mut().for_each(|x| *x *= k);
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn expect_rank(&self, rank: usize, what: &str) -> Result<()> {
        if self.shape.len() != rank {
            return Err(shape_error(what, &format!("rank {rank}"), &self.shape));
        }
        Ok(())
    }
}

fn shape_error(what: &str, expected: &str, got: &[usize]) -> Error {
    Error::Numeric(format!("shape mismatch for {what}: expected {expected}, got {got:?}"))
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for i in 0..chunks {
        let k = i * 4;
        acc[0] += a[k] * b[k];
        acc[1] += a[k + 1] * b[k + 1];
        acc[2] += a[k + 2] * b[k + 2];
        acc[3] += a[k + 3] * b[k + 3];
    }
    let mut tail = 0.0;
    for k in chunks * 4..n {
        tail += a[k] * b[k];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Valid kernel-tap range `[i0, i1)` for output position `t`.
#[inline]
fn tap_range(t: usize, len: usize, k: usize, pad: usize) -> (usize, usize) {
    let i0 = pad.saturating_sub(t);
    let i1 = k.min(len + pad - t);
    (i0, i1.max(i0))
}

/// Same-length convolution along the time axis of an `N x L x d` input.
///
/// `out[n,c,t] = bias[c] + sum_{i,j} x[n, t+i-pad, j] * w[c,i,j]` with
/// `pad = k / 2` and out-of-range rows treated as zero.
pub fn conv_time(x: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    x.expect_rank(3, "conv input")?;
    weights.expect_rank(3, "conv weights")?;
    let (n, l, d) = (x.shape[0], x.shape[1], x.shape[2]);
    let (c_out, k, wd) = (weights.shape[0], weights.shape[1], weights.shape[2]);
    if wd != d {
        return Err(shape_error("conv weights", &format!("[C, k, {d}]"), &weights.shape));
    }
    if bias.shape != [c_out] {
        return Err(shape_error("conv bias", &format!("[{c_out}]"), &bias.shape));
    }
    let pad = k / 2;
    if k > l + 2 * pad {
        return Err(Error::Numeric(format!("kernel {k} too wide for length {l}")));
    }
    let mut out = Tensor::zeros(&[n, c_out, l]);
    for b in 0..n {
        let xb = &x.data[b * l * d..(b + 1) * l * d];
        for t in 0..l {
            let (i0, i1) = tap_range(t, l, k, pad);
            let xs = &xb[(t + i0 - pad) * d..(t + i1 - pad) * d];
            for c in 0..c_out {
                let ws = &weights.data[(c * k + i0) * d..(c * k + i1) * d];
                out.data[(b * c_out + c) * l + t] = bias.data[c] + dot(ws, xs);
            }
        }
    }
    Ok(out)
}

/// Parameter gradients of [`conv_time`] given `d_out` (`N x C x L`).
pub fn conv_time_backward(x: &Tensor, weights_shape: &[usize], d_out: &Tensor) -> (Tensor, Tensor) {
    let (n, l, d) = (x.shape[0], x.shape[1], x.shape[2]);
    let (c_out, k) = (weights_shape[0], weights_shape[1]);
    let pad = k / 2;
    let mut dw = Tensor::zeros(weights_shape);
    let mut db = Tensor::zeros(&[c_out]);
    for b in 0..n {
        let xb = &x.data[b * l * d..(b + 1) * l * d];
        for t in 0..l {
            let (i0, i1) = tap_range(t, l, k, pad);
            let xs = &xb[(t + i0 - pad) * d..(t + i1 - pad) * d];
            for c in 0..c_out {
                let g = d_out.data[(b * c_out + c) * l + t];
                if g == 0.0 {
                    continue;
                }
                db.data[c] += g;
                axpy(g, xs, &mut dw.data[(c * k + i0) * d..(c * k + i1) * d]);
            }
        }
    }
    (dw, db)
}

/// Width-expanding (1 -> d) transposed convolution: maps per-time channel
/// features `N x C x L` back to `N x L x d`.
///
/// `out[n,t,j] = bias[j] + sum_c f[n,c,t] * w[c,0,j]`.
pub fn tconv_embed(f: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    f.expect_rank(3, "tconv input")?;
    weights.expect_rank(3, "tconv weights")?;
    let (n, c_in, l) = (f.shape[0], f.shape[1], f.shape[2]);
    if weights.shape[0] != c_in || weights.shape[1] != 1 {
        return Err(shape_error("tconv weights", &format!("[{c_in}, 1, d]"), &weights.shape));
    }
    let d = weights.shape[2];
    if bias.shape != [d] {
        return Err(shape_error("tconv bias", &format!("[{d}]"), &bias.shape));
    }
    let mut out = Tensor::zeros(&[n, l, d]);
    for b in 0..n {
        for t in 0..l {
            let row = &mut out.data[(b * l + t) * d..(b * l + t + 1) * d];
            row.copy_from_slice(&bias.data);
            for c in 0..c_in {
                let v = f.data[(b * c_in + c) * l + t];
                if v != 0.0 {
                    axpy(v, &weights.data[c * d..(c + 1) * d], row);
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`tconv_embed`]: `(d_f, d_weights, d_bias)`.
pub fn tconv_embed_backward(f: &Tensor, weights: &Tensor, d_out: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (n, c_in, l) = (f.shape[0], f.shape[1], f.shape[2]);
    let d = weights.shape[2];
    let mut df = Tensor::zeros(&f.shape);
    let mut dw = Tensor::zeros(&weights.shape);
    let mut db = Tensor::zeros(&[d]);
    for b in 0..n {
        for t in 0..l {
            let g = &d_out.data[(b * l + t) * d..(b * l + t + 1) * d];
            if g.iter().all(|&x| x == 0.0) {
                continue;
            }
            axpy(1.0, g, &mut db.data);
            for c in 0..c_in {
                let wc = &weights.data[c * d..(c + 1) * d];
                df.data[(b * c_in + c) * l + t] = dot(wc, g);
                let v = f.data[(b * c_in + c) * l + t];
                if v != 0.0 {
                    axpy(v, g, &mut dw.data[c * d..(c + 1) * d]);
                }
            }
        }
    }
    (df, dw, db)
}

pub fn relu_inplace(t: &mut Tensor) {
    t.data.iter_mut().for_each(|x| {
        if *x < 0.0 {
            *x = 0.0
        }
    });
}

/// Zeroes `grad` wherever the ReLU output was not positive.
pub fn relu_backward_inplace(activated: &Tensor, grad: &mut Tensor) {
    for (g, &a) in grad.data.iter_mut().zip(&activated.data) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

fn real_counts(pad_mask: &[bool], n: usize, l: usize) -> Result<Vec<usize>> {
    (0..n)
        .map(|b| {
            let c = pad_mask[b * l..(b + 1) * l].iter().filter(|&&m| m).count();
            if c == 0 {
                Err(Error::data(format!("sequence {b} in batch has no real positions")))
            } else {
                Ok(c)
            }
        })
        .collect()
}

/// Mean over real time steps: `N x C x L` -> `N x C`.
pub fn masked_mean_pool(f: &Tensor, pad_mask: &[bool]) -> Result<Tensor> {
    f.expect_rank(3, "pool input")?;
    let (n, c, l) = (f.shape[0], f.shape[1], f.shape[2]);
    if pad_mask.len() != n * l {
        return Err(Error::Numeric(format!("pad mask has {} entries, expected {}", pad_mask.len(), n * l)));
    }
    let counts = real_counts(pad_mask, n, l)?;
    let mut out = Tensor::zeros(&[n, c]);
    for b in 0..n {
        let m = &pad_mask[b * l..(b + 1) * l];
        for ch in 0..c {
            let row = &f.data[(b * c + ch) * l..(b * c + ch + 1) * l];
            let s: f64 = row.iter().zip(m).filter(|(_, &keep)| keep).map(|(v, _)| v).sum();
            out.data[b * c + ch] = s / counts[b] as f64;
        }
    }
    Ok(out)
}

/// Accumulates the gradient of [`masked_mean_pool`] into `d_f`.
pub fn masked_mean_pool_backward(d_z: &Tensor, pad_mask: &[bool], d_f: &mut Tensor) {
    let (n, c, l) = (d_f.shape[0], d_f.shape[1], d_f.shape[2]);
    for b in 0..n {
        let m = &pad_mask[b * l..(b + 1) * l];
        let count = m.iter().filter(|&&x| x).count().max(1) as f64;
        for ch in 0..c {
            let g = d_z.data[b * c + ch] / count;
            let row = &mut d_f.data[(b * c + ch) * l..(b * c + ch + 1) * l];
            for (v, &keep) in row.iter_mut().zip(m) {
                if keep {
                    *v += g;
                }
            }
        }
    }
}

/// Squared error over selected `d`-wide rows divided by `selected * d`.
/// `mask` has one entry per row; no selected rows gives 0.
pub fn masked_mse(a: &Tensor, b: &Tensor, mask: &[bool], d: usize) -> f64 {
    let selected = mask.iter().filter(|&&m| m).count();
    if selected == 0 {
        return 0.0;
    }
    let mut sum = 0.0;
    for (row, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (ra, rb) = (&a.data[row * d..(row + 1) * d], &b.data[row * d..(row + 1) * d]);
        sum += ra.iter().zip(rb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    }
    sum / (selected * d) as f64
}

/// Gradient of [`masked_mse`] with respect to `a`, scaled by `scale`.
pub fn masked_mse_grad(a: &Tensor, b: &Tensor, mask: &[bool], d: usize, scale: f64) -> Tensor {
    let mut g = Tensor::zeros(&a.shape);
    let selected = mask.iter().filter(|&&m| m).count();
    if selected == 0 {
        return g;
    }
    let k = 2.0 * scale / (selected * d) as f64;
    for (row, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        for j in row * d..(row + 1) * d {
            g.data[j] = k * (a.data[j] - b.data[j]);
        }
    }
    g
}

/// Named learnable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    init_seed: u64,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new(init_seed: u64) -> Self {
        ParamSet {
            init_seed,
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    /// Adds a tensor and returns its slot index.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<usize> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::config(format!("duplicate parameter name {name:?}")));
        }
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Tensor {
        &self.tensors[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.tensors[idx]
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut()
    }

    pub fn zeros_like(&self) -> Self {
        ParamSet {
            init_seed: self.init_seed,
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(&t.shape)).collect(),
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.tensors.iter_mut().for_each(|t| t.scale(k));
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Fails naming the first parameter holding a non-finite value.
    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in self.iter() {
            if !t.is_finite() {
                return Err(Error::Numeric(format!("non-finite value in {name}")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_zero_input_gives_bias() {
        let x = Tensor::zeros(&[2, 4, 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Tensor::uniform_init(&[5, 3, 3], 9, &mut rng);
        let b = t(&[5], &[1.0, 2.0, 3.0, 4.0, 5.0]);
        let out = conv_time(&x, &w, &b).unwrap();
        assert_eq!(out.shape(), &[2, 5, 4]);
        for n in 0..2 {
            for c in 0..5 {
                for tt in 0..4 {
                    assert_eq!(out.data()[(n * 5 + c) * 4 + tt], b.data()[c]);
                }
            }
        }
    }

    #[test]
    fn conv_hand_example() {
        let x = t(&[1, 3, 1], &[1.0, 2.0, 3.0]);
        let w = t(&[1, 3, 1], &[1.0, 1.0, 1.0]);
        let out = conv_time(&x, &w, &t(&[1], &[0.0])).unwrap();
        assert_eq!(out.data(), &[3.0, 6.0, 5.0]);
    }

    #[test]
    fn conv_even_kernel_taps() {
        // k = 4, pad = 2: out[t] = x[t-2] + 2 x[t-1] + 3 x[t] + 4 x[t+1]
        let x = t(&[1, 3, 1], &[1.0, 10.0, 100.0]);
        let w = t(&[1, 4, 1], &[1.0, 2.0, 3.0, 4.0]);
        let out = conv_time(&x, &w, &t(&[1], &[0.0])).unwrap();
        assert_eq!(out.data(), &[3.0 + 40.0, 2.0 + 30.0 + 400.0, 1.0 + 20.0 + 300.0]);
    }

    #[test]
    fn conv_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform_init(&[2, 5, 3], 1, &mut rng);
        let w = Tensor::uniform_init(&[4, 5, 3], 15, &mut rng);
        let b = Tensor::uniform_init(&[4], 1, &mut rng);
        let mut x2 = x.clone();
        x2.scale(2.0);
        let o1 = conv_time(&x, &w, &b).unwrap();
        let o2 = conv_time(&x2, &w, &b).unwrap();
        for (i, (a, c)) in o1.data().iter().zip(o2.data()).enumerate() {
            let bias = b.data()[(i / 5) % 4];
            assert!(((c - bias) - 2.0 * (a - bias)).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_shape_mismatch() {
        let x = Tensor::zeros(&[1, 3, 2]);
        let w = Tensor::zeros(&[1, 3, 3]);
        assert!(conv_time(&x, &w, &Tensor::zeros(&[1])).is_err());
        let w = Tensor::zeros(&[1, 3, 2]);
        assert!(conv_time(&x, &w, &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn tconv_examples() {
        let f = Tensor::zeros(&[1, 2, 3]);
        let w = Tensor::zeros(&[2, 1, 2]);
        let bias = t(&[2], &[0.5, -1.0]);
        let out = tconv_embed(&f, &w, &bias).unwrap();
        for row in out.data().chunks(2) {
            assert_eq!(row, &[0.5, -1.0]);
        }
        let f = t(&[1, 1, 3], &[1.0, 1.0, 1.0]);
        let w = t(&[1, 1, 2], &[3.0, 4.0]);
        let out = tconv_embed(&f, &w, &Tensor::zeros(&[2])).unwrap();
        assert_eq!(out.data(), &[3.0, 4.0, 3.0, 4.0, 3.0, 4.0]);
    }

    #[test]
    fn pool_examples() {
        let f = t(&[1, 1, 2], &[1.0, 3.0]);
        assert_eq!(masked_mean_pool(&f, &[true, true]).unwrap().data(), &[2.0]);
        let f = t(&[1, 1, 3], &[1.0, 3.0, 99.0]);
        assert_eq!(masked_mean_pool(&f, &[true, true, false]).unwrap().data(), &[2.0]);
        let f = t(&[1, 2, 3], &[7.0; 6]);
        assert_eq!(masked_mean_pool(&f, &[true, false, false]).unwrap().data(), &[7.0, 7.0]);
        assert!(masked_mean_pool(&f, &[false, false, false]).is_err());
    }

    #[test]
    fn mse_examples() {
        let a = t(&[1, 1, 2], &[1.0, 0.0]);
        let b = t(&[1, 1, 2], &[0.0, 0.0]);
        assert_eq!(masked_mse(&a, &b, &[true], 2), 0.5);
        assert_eq!(masked_mse(&a, &a, &[true], 2), 0.0);
        assert_eq!(masked_mse(&a, &b, &[false], 2), 0.0);
    }

    #[test]
    fn param_set_names_unique() {
        let mut p = ParamSet::new(0);
        p.push("w", Tensor::zeros(&[2])).unwrap();
        assert!(p.push("w", Tensor::zeros(&[2])).is_err());
        p.get_mut(0).data_mut()[1] = f64::NAN;
        let err = p.check_finite().unwrap_err().to_string();
        assert!(err.contains("w"));
    }
}
