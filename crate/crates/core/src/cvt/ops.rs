//! Dense tensor kernels for the CvT forward pass. Feature maps are CHW,
//! token sequences are row-major `[n][d]`, linear weights are `[out][in]`.

use super::CvtError;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// `[h*w][c]` tokens in raster order.
    pub fn to_tokens(&self) -> Tokens {
        let n = self.height * self.width;
        let mut data = vec![0f32; n * self.channels];
        for c in 0..self.channels {
            for p in 0..n {
                data[p * self.channels + c] = self.data[c * n + p];
            }
        }
        Tokens {
            n,
            d: self.channels,
            data,
        }
    }

    pub fn from_tokens(t: &Tokens, height: usize, width: usize) -> Result<Self, CvtError> {
        if t.n != height * width {
            return Err(CvtError::Shape(format!(
                "{} tokens do not form a {height}x{width} grid",
                t.n
            )));
        }
        let mut data = vec![0f32; t.n * t.d];
        for p in 0..t.n {
            for c in 0..t.d {
                data[c * t.n + p] = t.data[p * t.d + c];
            }
        }
        Ok(Self {
            channels: t.d,
            height,
            width,
            data,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tokens {
    pub n: usize,
    pub d: usize,
    pub data: Vec<f32>,
}

impl Tokens {
    pub fn zeros(n: usize, d: usize) -> Self {
        Self {
            n,
            d,
            data: vec![0.0; n * d],
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    /// Sequence of `first` followed by all rows of `self`.
    pub fn prepend(&self, first: &[f32]) -> Tokens {
        assert_eq!(first.len(), self.d);
        let mut data = Vec::with_capacity((self.n + 1) * self.d);
        data.extend_from_slice(first);
        data.extend_from_slice(&self.data);
        Tokens {
            n: self.n + 1,
            d: self.d,
            data,
        }
    }

    /// Splits off the first row.
    pub fn split_first(&self) -> (Vec<f32>, Tokens) {
        (
            self.data[..self.d].to_vec(),
            Tokens {
                n: self.n - 1,
                d: self.d,
                data: self.data[self.d..].to_vec(),
            },
        )
    }

    pub fn add_assign(&mut self, other: &Tokens) {
        assert_eq!((self.n, self.d), (other.n, other.d));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Eight-lane dot product; the fixed lane split keeps results bit-stable.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// Geometry of a 2-D convolution. Weights are `[out][in / groups][k][k]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn output_size(&self, height: usize, width: usize) -> Result<(usize, usize), CvtError> {
        let (k, p, s) = (self.kernel, self.padding, self.stride);
        if s == 0 || k == 0 {
            return Err(CvtError::Shape("kernel and stride must be positive".into()));
        }
        if height + 2 * p < k || width + 2 * p < k {
            return Err(CvtError::Shape(format!(
                "{height}x{width} input (padding {p}) is smaller than the {k}x{k} kernel"
            )));
        }
        Ok(((height + 2 * p - k) / s + 1, (width + 2 * p - k) / s + 1))
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * (self.in_channels / self.groups) * self.kernel * self.kernel
    }

    fn check(&self, x: &FeatureMap, weight: &[f32], bias: Option<&[f32]>) -> Result<(), CvtError> {
        if self.groups == 0
            || self.in_channels % self.groups != 0
            || self.out_channels % self.groups != 0
        {
            return Err(CvtError::Shape(format!(
                "{} -> {} channels cannot be split into {} groups",
                self.in_channels, self.out_channels, self.groups
            )));
        }
        if x.channels != self.in_channels {
            return Err(CvtError::Shape(format!(
                "expected {} input channels, got {}",
                self.in_channels, x.channels
            )));
        }
        if weight.len() != self.weight_len() || bias.is_some_and(|b| b.len() != self.out_channels) {
            return Err(CvtError::Shape(
                "convolution weight or bias has the wrong length".into(),
            ));
        }
        Ok(())
    }
}

/// Grouped 2-D convolution with zero padding. Depthwise convolutions take a
/// direct path; everything else is lowered per group to im2col rows and
/// dotted against the filters.
pub fn conv2d(
    x: &FeatureMap,
    weight: &[f32],
    bias: Option<&[f32]>,
    spec: &ConvSpec,
) -> Result<FeatureMap, CvtError> {
    spec.check(x, weight, bias)?;
    let (oh, ow) = spec.output_size(x.height, x.width)?;
    if spec.groups == spec.in_channels && spec.groups == spec.out_channels {
        return Ok(depthwise(x, weight, bias, spec, oh, ow));
    }
    let (k, s, pad) = (spec.kernel, spec.stride, spec.padding as isize);
    let icg = spec.in_channels / spec.groups;
    let ocg = spec.out_channels / spec.groups;
    let kk = icg * k * k;
    let np = oh * ow;
    let mut out = FeatureMap::zeros(spec.out_channels, oh, ow);
    let mut cols = vec![0f32; np * kk];
    for g in 0..spec.groups {
        cols.iter_mut().for_each(|v| *v = 0.0);
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &mut cols[(oy * ow + ox) * kk..(oy * ow + ox + 1) * kk];
                for ic in 0..icg {
                    let c = g * icg + ic;
                    for ky in 0..k {
                        let iy = (oy * s + ky) as isize - pad;
                        if iy < 0 || iy >= x.height as isize {
                            continue;
                        }
                        let base = (c * x.height + iy as usize) * x.width;
                        for kx in 0..k {
                            let ix = (ox * s + kx) as isize - pad;
                            if ix >= 0 && ix < x.width as isize {
                                row[(ic * k + ky) * k + kx] = x.data[base + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        for p in 0..np {
            let col = &cols[p * kk..(p + 1) * kk];
            for o in 0..ocg {
                let oc = g * ocg + o;
                let w = &weight[oc * kk..(oc + 1) * kk];
                out.data[oc * np + p] = dot(w, col) + bias.map_or(0.0, |b| b[oc]);
            }
        }
    }
    Ok(out)
}

fn depthwise(
    x: &FeatureMap,
    weight: &[f32],
    bias: Option<&[f32]>,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
) -> FeatureMap {
    let (k, s, pad) = (spec.kernel, spec.stride, spec.padding as isize);
    let mut out = FeatureMap::zeros(spec.out_channels, oh, ow);
    for c in 0..spec.in_channels {
        let w = &weight[c * k * k..(c + 1) * k * k];
        let b = bias.map_or(0.0, |b| b[c]);
        let plane = &x.data[c * x.height * x.width..(c + 1) * x.height * x.width];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0f32;
                for ky in 0..k {
                    let iy = (oy * s + ky) as isize - pad;
                    if iy < 0 || iy >= x.height as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * s + kx) as isize - pad;
                        if ix >= 0 && ix < x.width as isize {
                            acc += w[ky * k + kx] * plane[iy as usize * x.width + ix as usize];
                        }
                    }
                }
                out.data[(c * oh + oy) * ow + ox] = acc + b;
            }
        }
    }
    out
}

/// `y = x W^T + b` with `W` as `[out][in]`.
pub fn linear(x: &Tokens, weight: &[f32], bias: Option<&[f32]>, out_dim: usize) -> Tokens {
    assert_eq!(weight.len(), out_dim * x.d, "linear weight shape");
    let mut y = Tokens::zeros(x.n, out_dim);
    for i in 0..x.n {
        let xi = x.row(i);
        let yi = &mut y.data[i * out_dim..(i + 1) * out_dim];
        for (o, v) in yi.iter_mut().enumerate() {
            *v = dot(&weight[o * x.d..(o + 1) * x.d], xi) + bias.map_or(0.0, |b| b[o]);
        }
    }
    y
}

pub const NORM_EPS: f32 = 1e-5;

/// Normalizes each token over its channels.
pub fn layer_norm(x: &Tokens, gamma: &[f32], beta: &[f32]) -> Tokens {
    let mut y = x.clone();
    let d = x.d as f64;
    for i in 0..x.n {
        let row = &mut y.data[i * x.d..(i + 1) * x.d];
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d;
        let inv = 1.0 / (var + NORM_EPS as f64).sqrt();
        for (c, v) in row.iter_mut().enumerate() {
            *v = ((*v as f64 - mean) * inv) as f32 * gamma[c] + beta[c];
        }
    }
    y
}

/// Inference-mode batch normalization with running statistics.
pub fn batch_norm(x: &mut FeatureMap, gamma: &[f32], beta: &[f32], mean: &[f32], var: &[f32]) {
    let n = x.height * x.width;
    for c in 0..x.channels {
        let scale = gamma[c] / (var[c] + NORM_EPS).sqrt();
        let shift = beta[c] - mean[c] * scale;
        for v in &mut x.data[c * n..(c + 1) * n] {
            *v = *v * scale + shift;
        }
    }
}

/// Exact (erf-based) GELU.
pub fn gelu(v: f32) -> f32 {
    0.5 * v * (1.0 + libm::erff(v * std::f32::consts::FRAC_1_SQRT_2))
}

/// Numerically stable softmax in place.
pub fn softmax_in_place(row: &mut [f32]) {
    let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut s = 0f32;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// Attention probabilities `softmax(q_h k_h^T / sqrt(d_head))`, laid out
/// `[head][query][key]`.
pub fn attention_probs(q: &Tokens, k: &Tokens, heads: usize) -> Vec<f32> {
    assert_eq!(q.d, k.d);
    assert_eq!(q.d % heads, 0);
    let dh = q.d / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut p = vec![0f32; heads * q.n * k.n];
    for h in 0..heads {
        for i in 0..q.n {
            let qi = &q.row(i)[h * dh..(h + 1) * dh];
            let row = &mut p[(h * q.n + i) * k.n..(h * q.n + i + 1) * k.n];
            for (j, v) in row.iter_mut().enumerate() {
                *v = dot(qi, &k.row(j)[h * dh..(h + 1) * dh]) * scale;
            }
            softmax_in_place(row);
        }
    }
    p
}

/// Multi-head scaled dot-product attention, heads concatenated (before the
/// output projection).
pub fn attention(q: &Tokens, k: &Tokens, v: &Tokens, heads: usize) -> Tokens {
    assert_eq!(k.n, v.n);
    assert_eq!(q.d, v.d);
    let dh = q.d / heads;
    let p = attention_probs(q, k, heads);
    let mut out = Tokens::zeros(q.n, q.d);
    for h in 0..heads {
        for i in 0..q.n {
            let prow = &p[(h * q.n + i) * k.n..(h * q.n + i + 1) * k.n];
            let oi = &mut out.data[i * q.d + h * dh..i * q.d + (h + 1) * dh];
            for (j, &w) in prow.iter().enumerate() {
                for (o, &vv) in oi.iter_mut().zip(&v.row(j)[h * dh..(h + 1) * dh]) {
                    *o += w * vv;
                }
            }
        }
    }
    out
}
