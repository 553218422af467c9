//! Scale-invariant keypoints and 128-bin gradient-histogram descriptors.
//!
//! Difference-of-Gaussian scale space with three layers per octave, sub-pixel
//! extremum refinement, edge-response rejection, dominant-orientation
//! assignment and 4x4x8 descriptors. Conventions (angle direction, y-flip in
//! the gradient) follow the common OpenCV layout so descriptors are
//! comparable across implementations.

use serde::{Deserialize, Serialize};

use crate::imaging::RasterImage;

pub const DESCRIPTOR_LEN: usize = 128;

const IMG_BORDER: usize = 5;
const MAX_INTERP_STEPS: usize = 5;
const ORI_HIST_BINS: usize = 36;
const ORI_SIG_FCTR: f32 = 1.5;
const ORI_RADIUS: f32 = 3.0 * ORI_SIG_FCTR;
const ORI_PEAK_RATIO: f32 = 0.8;
const DESCR_WIDTH: usize = 4;
const DESCR_HIST_BINS: usize = 8;
const DESCR_SCL_FCTR: f32 = 3.0;
const DESCR_MAG_THR: f32 = 0.2;
const INIT_SIGMA: f32 = 0.5;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SiftParams {
    pub octave_layers: usize,
    pub sigma: f32,
    /// DoG contrast threshold on images scaled to `[0, 1]`.
    pub contrast_threshold: f32,
    pub edge_threshold: f32,
    /// Double the input before building the pyramid.
    pub upsample: bool,
    /// Keep at most this many keypoints, strongest response first.
    pub max_keypoints: usize,
}

impl Default for SiftParams {
    fn default() -> Self {
        Self {
            octave_layers: 3,
            sigma: 1.6,
            contrast_threshold: 0.04,
            edge_threshold: 10.0,
            upsample: true,
            max_keypoints: 500,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f32,
    pub y: f32,
    /// Diameter of the meaningful neighbourhood, in input pixels.
    pub scale: f32,
    /// Degrees in `[0, 360)`.
    pub orientation: f32,
    pub response: f32,
    #[serde(skip)]
    octave: i32,
    #[serde(skip)]
    layer: usize,
}

/// Keypoints and their descriptors for one frame.
#[derive(Clone, Debug, Default)]
pub struct KeypointDescriptorSet {
    pub frame: usize,
    pub width: usize,
    pub height: usize,
    pub keypoints: Vec<Keypoint>,
    pub descriptors: Vec<[f32; DESCRIPTOR_LEN]>,
}

impl KeypointDescriptorSet {
    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }
}

#[derive(Clone)]
struct Plane {
    w: usize,
    h: usize,
    data: Vec<f32>,
}

impl Plane {
    #[inline]
    fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.w + x]
    }

    fn upsample2(&self) -> Plane {
        let (w, h) = (self.w * 2, self.h * 2);
        let mut data = vec![0f32; w * h];
        for y in 0..h {
            let sy = (y as f32 * 0.5).min((self.h - 1) as f32);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(self.h - 1);
            let fy = sy - y0 as f32;
            for x in 0..w {
                let sx = (x as f32 * 0.5).min((self.w - 1) as f32);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(self.w - 1);
                let fx = sx - x0 as f32;
                let top = self.at(x0, y0) * (1.0 - fx) + self.at(x1, y0) * fx;
                let bot = self.at(x0, y1) * (1.0 - fx) + self.at(x1, y1) * fx;
                data[y * w + x] = top * (1.0 - fy) + bot * fy;
            }
        }
        Plane { w, h, data }
    }

    fn downsample2(&self) -> Plane {
        let (w, h) = (self.w.div_ceil(2), self.h.div_ceil(2));
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                data.push(self.at(2 * x, 2 * y));
            }
        }
        Plane { w, h, data }
    }

    fn blur(&self, sigma: f32) -> Plane {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = ((4.0 * sigma).ceil() as usize).max(1);
        let mut kernel: Vec<f32> = (0..=2 * radius)
            .map(|i| {
                let d = i as f32 - radius as f32;
                (-d * d / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let sum: f32 = kernel.iter().sum();
        kernel.iter_mut().for_each(|k| *k /= sum);
        let reflect = |i: isize, n: usize| -> usize {
            // reflect-101 border
            let n = n as isize;
            if n == 1 {
                return 0;
            }
            let mut i = i;
            loop {
                if i < 0 {
                    i = -i;
                } else if i >= n {
                    i = 2 * n - 2 - i;
                } else {
                    return i as usize;
                }
            }
        };
        let (w, h) = (self.w, self.h);
        let mut tmp = vec![0f32; w * h];
        for y in 0..h {
            let row = &self.data[y * w..(y + 1) * w];
            let out = &mut tmp[y * w..(y + 1) * w];
            for (x, o) in out.iter_mut().enumerate() {
                let mut acc = 0.0;
                if x >= radius && x + radius < w {
                    let win = &row[x - radius..=x + radius];
                    for (k, v) in kernel.iter().zip(win) {
                        acc += k * v;
                    }
                } else {
                    for (k, kv) in kernel.iter().enumerate() {
                        acc += kv * row[reflect(x as isize + k as isize - radius as isize, w)];
                    }
                }
                *o = acc;
            }
        }
        let mut data = vec![0f32; w * h];
        for y in 0..h {
            let out = &mut data[y * w..(y + 1) * w];
            for (k, kv) in kernel.iter().enumerate() {
                let sy = reflect(y as isize + k as isize - radius as isize, h);
                let src = &tmp[sy * w..(sy + 1) * w];
                for (o, s) in out.iter_mut().zip(src) {
                    *o += kv * s;
                }
            }
        }
        Plane { w, h, data }
    }
}

struct Pyramid {
    gauss: Vec<Vec<Plane>>,
    dog: Vec<Vec<Plane>>,
    first_octave: i32,
}

fn build_pyramid(base: Plane, p: &SiftParams) -> Pyramid {
    let (base, first_octave) = if p.upsample {
        let up = base.upsample2();
        let diff = (p.sigma * p.sigma - 4.0 * INIT_SIGMA * INIT_SIGMA)
            .max(0.01)
            .sqrt();
        (up.blur(diff), -1)
    } else {
        let diff = (p.sigma * p.sigma - INIT_SIGMA * INIT_SIGMA)
            .max(0.01)
            .sqrt();
        (base.blur(diff), 0)
    };
    let min_side = base.w.min(base.h) as f32;
    let n_octaves = ((min_side.log2().round() as i32) - 2).max(1) as usize;

    let layers = p.octave_layers;
    let k = 2f32.powf(1.0 / layers as f32);
    let mut sig = vec![p.sigma; layers + 3];
    for (i, s) in sig.iter_mut().enumerate().skip(1) {
        let prev = p.sigma * k.powi(i as i32 - 1);
        let total = prev * k;
        *s = (total * total - prev * prev).sqrt();
    }

    let mut gauss: Vec<Vec<Plane>> = Vec::with_capacity(n_octaves);
    for o in 0..n_octaves {
        let mut octave = Vec::with_capacity(layers + 3);
        let first = if o == 0 {
            base.clone()
        } else {
            gauss[o - 1][layers].downsample2()
        };
        octave.push(first);
        for s in sig.iter().skip(1) {
            let next = octave.last().unwrap().blur(*s);
            octave.push(next);
        }
        let done = octave[0].w < 2 * IMG_BORDER + 2 || octave[0].h < 2 * IMG_BORDER + 2;
        gauss.push(octave);
        if done {
            break;
        }
    }
    let dog = gauss
        .iter()
        .map(|oct| {
            oct.windows(2)
                .map(|pair| Plane {
                    w: pair[0].w,
                    h: pair[0].h,
                    data: pair[1]
                        .data
                        .iter()
                        .zip(&pair[0].data)
                        .map(|(a, b)| a - b)
                        .collect(),
                })
                .collect()
        })
        .collect();
    Pyramid {
        gauss,
        dog,
        first_octave,
    }
}

fn is_extremum(dog: &[Plane], layer: usize, x: usize, y: usize, threshold: f32) -> bool {
    let v = dog[layer].at(x, y);
    if v.abs() <= threshold {
        return false;
    }
    for plane in &dog[layer - 1..=layer + 1] {
        for yy in y - 1..=y + 1 {
            for xx in x - 1..=x + 1 {
                let n = plane.at(xx, yy);
                if (v > 0.0 && n > v) || (v < 0.0 && n < v) {
                    return false;
                }
            }
        }
    }
    true
}

/// Sub-pixel refinement by fitting a quadratic in (x, y, scale). Returns the
/// refined keypoint in input-image coordinates, or `None` when it drifts out,
/// has low contrast, or sits on an edge.
fn refine(
    pyr: &Pyramid,
    octave: usize,
    mut layer: usize,
    mut x: usize,
    mut y: usize,
    p: &SiftParams,
) -> Option<Keypoint> {
    let dog = &pyr.dog[octave];
    let (w, h) = (dog[0].w, dog[0].h);
    let layers = p.octave_layers;
    let mut offset = [0f32; 3];
    let mut converged = false;
    for _ in 0..MAX_INTERP_STEPS {
        let (prev, cur, next) = (&dog[layer - 1], &dog[layer], &dog[layer + 1]);
        let g = [
            (cur.at(x + 1, y) - cur.at(x - 1, y)) * 0.5,
            (cur.at(x, y + 1) - cur.at(x, y - 1)) * 0.5,
            (next.at(x, y) - prev.at(x, y)) * 0.5,
        ];
        let v2 = cur.at(x, y) * 2.0;
        let dxx = cur.at(x + 1, y) + cur.at(x - 1, y) - v2;
        let dyy = cur.at(x, y + 1) + cur.at(x, y - 1) - v2;
        let dss = next.at(x, y) + prev.at(x, y) - v2;
        let dxy = (cur.at(x + 1, y + 1) - cur.at(x - 1, y + 1) - cur.at(x + 1, y - 1)
            + cur.at(x - 1, y - 1))
            * 0.25;
        let dxs =
            (next.at(x + 1, y) - next.at(x - 1, y) - prev.at(x + 1, y) + prev.at(x - 1, y)) * 0.25;
        let dys =
            (next.at(x, y + 1) - next.at(x, y - 1) - prev.at(x, y + 1) + prev.at(x, y - 1)) * 0.25;
        let hess = nalgebra::Matrix3::new(
            dxx as f64, dxy as f64, dxs as f64, dxy as f64, dyy as f64, dys as f64, dxs as f64,
            dys as f64, dss as f64,
        );
        let rhs = nalgebra::Vector3::new(g[0] as f64, g[1] as f64, g[2] as f64);
        let sol = hess.lu().solve(&rhs)?;
        offset = [-sol[0] as f32, -sol[1] as f32, -sol[2] as f32];
        if offset.iter().all(|o| o.abs() < 0.5) {
            converged = true;
            break;
        }
        if offset.iter().any(|o| o.abs() > 1e6) {
            return None;
        }
        let nx = x as isize + offset[0].round() as isize;
        let ny = y as isize + offset[1].round() as isize;
        let nl = layer as isize + offset[2].round() as isize;
        if nl < 1
            || nl > layers as isize
            || nx < IMG_BORDER as isize
            || nx >= (w - IMG_BORDER) as isize
            || ny < IMG_BORDER as isize
            || ny >= (h - IMG_BORDER) as isize
        {
            return None;
        }
        x = nx as usize;
        y = ny as usize;
        layer = nl as usize;
    }
    if !converged {
        return None;
    }

    let (prev, cur, next) = (&dog[layer - 1], &dog[layer], &dog[layer + 1]);
    let g = [
        (cur.at(x + 1, y) - cur.at(x - 1, y)) * 0.5,
        (cur.at(x, y + 1) - cur.at(x, y - 1)) * 0.5,
        (next.at(x, y) - prev.at(x, y)) * 0.5,
    ];
    let contrast = cur.at(x, y) + 0.5 * (g[0] * offset[0] + g[1] * offset[1] + g[2] * offset[2]);
    if contrast.abs() * (layers as f32) < p.contrast_threshold {
        return None;
    }
    let v2 = cur.at(x, y) * 2.0;
    let dxx = cur.at(x + 1, y) + cur.at(x - 1, y) - v2;
    let dyy = cur.at(x, y + 1) + cur.at(x, y - 1) - v2;
    let dxy = (cur.at(x + 1, y + 1) - cur.at(x - 1, y + 1) - cur.at(x + 1, y - 1)
        + cur.at(x - 1, y - 1))
        * 0.25;
    let tr = dxx + dyy;
    let det = dxx * dyy - dxy * dxy;
    let r = p.edge_threshold;
    if det <= 0.0 || tr * tr * r >= (r + 1.0) * (r + 1.0) * det {
        return None;
    }

    let oct_scale = 2f32.powi(octave as i32 + pyr.first_octave);
    Some(Keypoint {
        x: (x as f32 + offset[0]) * oct_scale,
        y: (y as f32 + offset[1]) * oct_scale,
        scale: p.sigma * 2f32.powf((layer as f32 + offset[2]) / layers as f32) * oct_scale * 2.0,
        orientation: 0.0,
        response: contrast.abs(),
        octave: octave as i32,
        layer,
    })
}

fn orientation_histogram(
    img: &Plane,
    px: isize,
    py: isize,
    radius: isize,
    sigma: f32,
) -> [f32; ORI_HIST_BINS] {
    let mut raw = [0f32; ORI_HIST_BINS];
    let expf = -1.0 / (2.0 * sigma * sigma);
    for i in -radius..=radius {
        let y = py + i;
        if y <= 0 || y >= img.h as isize - 1 {
            continue;
        }
        for j in -radius..=radius {
            let x = px + j;
            if x <= 0 || x >= img.w as isize - 1 {
                continue;
            }
            let (xu, yu) = (x as usize, y as usize);
            let dx = img.at(xu + 1, yu) - img.at(xu - 1, yu);
            let dy = img.at(xu, yu - 1) - img.at(xu, yu + 1);
            let weight = (((i * i + j * j) as f32) * expf).exp();
            let mag = (dx * dx + dy * dy).sqrt();
            let ori = dy.atan2(dx).to_degrees();
            let mut bin = (ori * ORI_HIST_BINS as f32 / 360.0).round() as isize;
            bin = bin.rem_euclid(ORI_HIST_BINS as isize);
            raw[bin as usize] += weight * mag;
        }
    }
    let n = ORI_HIST_BINS;
    let mut hist = [0f32; ORI_HIST_BINS];
    for i in 0..n {
        let at = |k: isize| raw[(i as isize + k).rem_euclid(n as isize) as usize];
        hist[i] = (at(-2) + at(2)) * (1.0 / 16.0)
            + (at(-1) + at(1)) * (4.0 / 16.0)
            + at(0) * (6.0 / 16.0);
    }
    hist
}

fn descriptor(img: &Plane, kp: &Keypoint, oct_scale: f32) -> [f32; DESCRIPTOR_LEN] {
    let d = DESCR_WIDTH;
    let n = DESCR_HIST_BINS;
    let (ptx, pty) = (
        (kp.x / oct_scale).round() as isize,
        (kp.y / oct_scale).round() as isize,
    );
    let mut angle = 360.0 - kp.orientation;
    if (angle - 360.0).abs() < f32::EPSILON {
        angle = 0.0;
    }
    let scl = kp.scale * 0.5 / oct_scale;
    let (sin_t, cos_t) = angle.to_radians().sin_cos();
    let bins_per_deg = n as f32 / 360.0;
    let exp_scale = -1.0 / (d as f32 * d as f32 * 0.5);
    let hist_width = DESCR_SCL_FCTR * scl;
    let diag = ((img.w * img.w + img.h * img.h) as f32).sqrt();
    let radius = ((hist_width * std::f32::consts::SQRT_2 * (d as f32 + 1.0) * 0.5).round())
        .min(diag) as isize;
    let (cos_t, sin_t) = (cos_t / hist_width, sin_t / hist_width);

    let stride_r = (d + 2) * (n + 2);
    let stride_c = n + 2;
    let mut hist = vec![0f32; (d + 2) * (d + 2) * (n + 2)];
    for i in -radius..=radius {
        for j in -radius..=radius {
            let c_rot = j as f32 * cos_t - i as f32 * sin_t;
            let r_rot = j as f32 * sin_t + i as f32 * cos_t;
            let rbin = r_rot + d as f32 / 2.0 - 0.5;
            let cbin = c_rot + d as f32 / 2.0 - 0.5;
            let (r, c) = (pty + i, ptx + j);
            if !(rbin > -1.0 && rbin < d as f32 && cbin > -1.0 && cbin < d as f32) {
                continue;
            }
            if r <= 0 || r >= img.h as isize - 1 || c <= 0 || c >= img.w as isize - 1 {
                continue;
            }
            let (ru, cu) = (r as usize, c as usize);
            let dx = img.at(cu + 1, ru) - img.at(cu - 1, ru);
            let dy = img.at(cu, ru - 1) - img.at(cu, ru + 1);
            let weight = ((c_rot * c_rot + r_rot * r_rot) * exp_scale).exp();
            let mag = (dx * dx + dy * dy).sqrt() * weight;
            let ori = dy.atan2(dx).to_degrees();
            let mut obin = (ori - angle) * bins_per_deg;

            let r0 = rbin.floor();
            let c0 = cbin.floor();
            let o0f = obin.floor();
            let (rf, cf) = (rbin - r0, cbin - c0);
            obin -= o0f;
            let of = obin;
            let mut o0 = o0f as isize;
            o0 = o0.rem_euclid(n as isize);

            let v_r1 = mag * rf;
            let v_r0 = mag - v_r1;
            let v_rc11 = v_r1 * cf;
            let v_rc10 = v_r1 - v_rc11;
            let v_rc01 = v_r0 * cf;
            let v_rc00 = v_r0 - v_rc01;
            let idx = ((r0 as isize + 1) as usize) * stride_r
                + ((c0 as isize + 1) as usize) * stride_c
                + o0 as usize;
            let mut add = |base: usize, v: f32| {
                let v1 = v * of;
                hist[base] += v - v1;
                hist[base + 1] += v1;
            };
            add(idx, v_rc00);
            add(idx + stride_c, v_rc01);
            add(idx + stride_r, v_rc10);
            add(idx + stride_r + stride_c, v_rc11);
        }
    }

    let mut out = [0f32; DESCRIPTOR_LEN];
    for i in 0..d {
        for j in 0..d {
            let base = (i + 1) * stride_r + (j + 1) * stride_c;
            // fold the wrap-around bins
            hist[base] += hist[base + n];
            hist[base + 1] += hist[base + n + 1];
            for k in 0..n {
                out[(i * d + j) * n + k] = hist[base + k];
            }
        }
    }
    let norm = out.iter().map(|v| v * v).sum::<f32>().sqrt();
    let thr = norm * DESCR_MAG_THR;
    out.iter_mut().for_each(|v| *v = v.min(thr));
    let norm = out
        .iter()
        .map(|v| v * v)
        .sum::<f32>()
        .sqrt()
        .max(f32::EPSILON);
    out.iter_mut().for_each(|v| *v /= norm);
    out
}

/// Detects keypoints and computes descriptors. Constant images yield an
/// empty set. Output order is deterministic.
pub fn detect_features(img: &RasterImage, params: &SiftParams) -> KeypointDescriptorSet {
    let base = Plane {
        w: img.width(),
        h: img.height(),
        data: img.to_gray_f32(),
    };
    let mut set = KeypointDescriptorSet {
        frame: 0,
        width: img.width(),
        height: img.height(),
        ..Default::default()
    };
    if base.w < 2 * IMG_BORDER + 3 || base.h < 2 * IMG_BORDER + 3 {
        return set;
    }
    let pyr = build_pyramid(base, params);
    let layers = params.octave_layers;
    let threshold = 0.5 * params.contrast_threshold / layers as f32;

    let mut kps: Vec<Keypoint> = Vec::new();
    for (o, dog) in pyr.dog.iter().enumerate() {
        let (w, h) = (dog[0].w, dog[0].h);
        if w <= 2 * IMG_BORDER || h <= 2 * IMG_BORDER {
            continue;
        }
        for layer in 1..=layers {
            for y in IMG_BORDER..h - IMG_BORDER {
                for x in IMG_BORDER..w - IMG_BORDER {
                    if !is_extremum(dog, layer, x, y, threshold) {
                        continue;
                    }
                    let Some(kp) = refine(&pyr, o, layer, x, y, params) else {
                        continue;
                    };
                    let oct_scale = 2f32.powi(kp.octave + pyr.first_octave);
                    let scl_octv = kp.scale * 0.5 / oct_scale;
                    let gimg = &pyr.gauss[o][kp.layer];
                    let hist = orientation_histogram(
                        gimg,
                        (kp.x / oct_scale).round() as isize,
                        (kp.y / oct_scale).round() as isize,
                        (ORI_RADIUS * scl_octv).round() as isize,
                        ORI_SIG_FCTR * scl_octv,
                    );
                    let max = hist.iter().cloned().fold(0f32, f32::max);
                    let n = ORI_HIST_BINS;
                    for j in 0..n {
                        let l = hist[(j + n - 1) % n];
                        let r = hist[(j + 1) % n];
                        if hist[j] > l && hist[j] > r && hist[j] >= ORI_PEAK_RATIO * max {
                            let mut bin = j as f32 + 0.5 * (l - r) / (l - 2.0 * hist[j] + r);
                            if bin < 0.0 {
                                bin += n as f32;
                            } else if bin >= n as f32 {
                                bin -= n as f32;
                            }
                            let mut ori = 360.0 - 360.0 / n as f32 * bin;
                            if (ori - 360.0).abs() < f32::EPSILON {
                                ori = 0.0;
                            }
                            kps.push(Keypoint {
                                orientation: ori,
                                ..kp
                            });
                        }
                    }
                }
            }
        }
    }

    kps.sort_by(|a, b| {
        b.response
            .total_cmp(&a.response)
            .then(a.y.total_cmp(&b.y))
            .then(a.x.total_cmp(&b.x))
            .then(a.scale.total_cmp(&b.scale))
            .then(a.orientation.total_cmp(&b.orientation))
    });
    kps.dedup_by(|a, b| {
        a.x == b.x && a.y == b.y && a.scale == b.scale && a.orientation == b.orientation
    });
    kps.truncate(params.max_keypoints);
    kps.retain(|k| {
        k.x >= 0.0
            && k.y >= 0.0
            && k.x <= (img.width() - 1) as f32
            && k.y <= (img.height() - 1) as f32
    });

    set.descriptors = kps
        .iter()
        .map(|kp| {
            let oct_scale = 2f32.powi(kp.octave + pyr.first_octave);
            descriptor(&pyr.gauss[kp.octave as usize][kp.layer], kp, oct_scale)
        })
        .collect();
    set.keypoints = kps;
    set
}
