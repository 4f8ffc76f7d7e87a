//! Direct-loop reference implementations in f64 used as test oracles.
#![allow(dead_code)]

use strawdet::rng::SplitMix64;
use strawdet::tensor::{BnParams, ConvParams, Tensor};

/// Plain nested-loop convolution with zero padding.
pub fn conv_ref(x: &Tensor, p: &ConvParams) -> ([usize; 4], Vec<f64>) {
    let [n, c, h, w] = x.shape();
    let (k, s, pad) = (p.kernel, p.stride, p.padding);
    let oh = (h + 2 * pad - k) / s + 1;
    let ow = (w + 2 * pad - k) / s + 1;
    let mut out = vec![0.0f64; n * p.out_channels * oh * ow];
    for b in 0..n {
        for o in 0..p.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = p.bias[o] as f64;
                    for i in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * s + ky) as isize - pad as isize;
                                let ix = (ox * s + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let wv = p.weights[((o * c + i) * k + ky) * k + kx] as f64;
                                acc += wv * x.at([b, i, iy as usize, ix as usize]) as f64;
                            }
                        }
                    }
                    out[((b * p.out_channels + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    ([n, p.out_channels, oh, ow], out)
}

/// Max over the in-bounds window; padding never wins.
pub fn maxpool_ref(x: &Tensor, k: usize, s: usize, pad: usize) -> ([usize; 4], Vec<f32>) {
    let [n, c, h, w] = x.shape();
    let oh = (h + 2 * pad - k) / s + 1;
    let ow = (w + 2 * pad - k) / s + 1;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut m = f32::NEG_INFINITY;
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * s + ky) as isize - pad as isize;
                            let ix = (ox * s + kx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && iy < h as isize && ix < w as isize {
                                m = m.max(x.at([b, ch, iy as usize, ix as usize]));
                            }
                        }
                    }
                    out.push(m);
                }
            }
        }
    }
    ([n, c, oh, ow], out)
}

/// Batch norm applied to a reference conv output.
pub fn bn_ref(shape: [usize; 4], y: &[f64], bn: &BnParams) -> Vec<f64> {
    let hw = shape[2] * shape[3];
    y.iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = (i / hw) % shape[1];
            let inv = 1.0 / (bn.running_var[c] as f64 + bn.epsilon as f64).sqrt();
            (v - bn.running_mean[c] as f64) * inv * bn.gamma[c] as f64 + bn.beta[c] as f64
        })
        .collect()
}

/// `|a - b| <= tol * max(|b|, 1)`.
pub fn close(a: f32, b: f64, tol: f64) -> bool {
    (a as f64 - b).abs() <= tol * b.abs().max(1.0)
}

fn fill(rng: &mut SplitMix64, n: usize, lo: f64, hi: f64) -> Vec<f32> {
    (0..n).map(|_| rng.uniform(lo, hi) as f32).collect()
}

pub fn random_tensor(rng: &mut SplitMix64, shape: [usize; 4]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, fill(rng, n, -1.0, 1.0)).unwrap()
}

/// Random conv geometry and values with a non-empty output.
pub fn random_conv_case(seed: u64) -> (Tensor, ConvParams) {
    let mut rng = SplitMix64::new(seed);
    let k: usize = [1, 2, 3, 5, 6][rng.below(5) as usize];
    let stride = 1 + rng.below(3) as usize;
    let pad = rng.below(k as u64 / 2 + 2) as usize;
    let cin = 1 + rng.below(6) as usize;
    let cout = 1 + rng.below(11) as usize;
    let min = k.saturating_sub(2 * pad).max(1);
    let h = min + rng.below(10) as usize;
    let w = min + rng.below(10) as usize;
    let n = 1 + rng.below(2) as usize;
    let x = random_tensor(&mut rng, [n, cin, h, w]);
    let weights = fill(&mut rng, cout * cin * k * k, -0.5, 0.5);
    let bias = fill(&mut rng, cout, -0.5, 0.5);
    (x, ConvParams::new(cin, cout, k, stride, pad, weights, bias).unwrap())
}

pub fn random_bn(seed: u64, channels: usize) -> BnParams {
    let mut rng = SplitMix64::new(seed ^ 0xb17);
    BnParams {
        gamma: fill(&mut rng, channels, 0.5, 1.5),
        beta: fill(&mut rng, channels, -0.5, 0.5),
        running_mean: fill(&mut rng, channels, -0.3, 0.3),
        running_var: fill(&mut rng, channels, 0.2, 2.0),
        epsilon: 1e-3,
    }
}

/// Random pool geometry: `(tensor, k, stride, pad)` with `pad <= k / 2`.
pub fn random_pool_case(seed: u64) -> (Tensor, usize, usize, usize) {
    let mut rng = SplitMix64::new(seed);
    let k = 1 + rng.below(6) as usize;
    let stride = 1 + rng.below(3) as usize;
    let pad = rng.below(k as u64 / 2 + 1) as usize;
    let h = k + rng.below(9) as usize;
    let w = k + rng.below(9) as usize;
    let c = 1 + rng.below(4) as usize;
    (random_tensor(&mut rng, [1, c, h, w]), k, stride, pad)
}

use strawdet::bbox::BBox;
use strawdet::detect::Detection;
use strawdet::metrics::GtBox;

pub fn det_xyxy(class_id: usize, score: f32, x0: f32, y0: f32, x1: f32, y1: f32) -> Detection {
    Detection {
        cx: (x0 + x1) / 2.0,
        cy: (y0 + y1) / 2.0,
        w: x1 - x0,
        h: y1 - y0,
        class_id,
        score,
    }
}

/// Exhaustive matching oracle. Among all one-to-one same-class assignments
/// with IoU above `thresh`, picks the one whose per-detection IoU sequence
/// (detections by descending score, ties by index; lower GT index preferred
/// on equal IoU) is lexicographically largest.
pub fn lexmax_matching(dets: &[Detection], gts: &[GtBox], thresh: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap());
    let mut search = Search {
        order: &order,
        dets,
        gts,
        thresh,
        used: vec![false; gts.len()],
        key: Vec::new(),
        pick: Vec::new(),
        best_key: None,
        best_pick: Vec::new(),
    };
    search.run(0);
    let mut tp = vec![false; dets.len()];
    for (p, &i) in search.best_pick.iter().zip(&order) {
        tp[i] = p.is_some();
    }
    tp
}

struct Search<'a> {
    order: &'a [usize],
    dets: &'a [Detection],
    gts: &'a [GtBox],
    thresh: f64,
    used: Vec<bool>,
    key: Vec<(f64, i64)>,
    pick: Vec<Option<usize>>,
    best_key: Option<Vec<(f64, i64)>>,
    best_pick: Vec<Option<usize>>,
}

impl Search<'_> {
    fn run(&mut self, pos: usize) {
        if pos == self.order.len() {
            let better = match &self.best_key {
                None => true,
                Some(k) => self.key.partial_cmp(k) == Some(std::cmp::Ordering::Greater),
            };
            if better {
                self.best_key = Some(self.key.clone());
                self.best_pick = self.pick.clone();
            }
            return;
        }
        let d = self.dets[self.order[pos]];
        for j in 0..self.gts.len() {
            let g = self.gts[j];
            let v = d.bbox().iou(&g.bbox);
            if !self.used[j] && g.class_id == d.class_id && v > self.thresh {
                self.used[j] = true;
                self.descend(pos, (v, -(j as i64)), Some(j));
                self.used[j] = false;
            }
        }
        self.descend(pos, (-1.0, 0), None);
    }

    fn descend(&mut self, pos: usize, key: (f64, i64), pick: Option<usize>) {
        self.key.push(key);
        self.pick.push(pick);
        self.run(pos + 1);
        self.pick.pop();
        self.key.pop();
    }
}

/// Every instance with up to 5 detections drawn from a 6-box palette, any
/// subset of 3 fixed ground truths, and three score patterns. The palette
/// covers exact hits, an equal-IoU tie between two ground truths, a class
/// confusion and a sub-threshold overlap.
pub fn enumerated_matching_instances() -> Vec<(Vec<Detection>, Vec<GtBox>)> {
    let gt_all = [
        GtBox { class_id: 0, bbox: BBox::new(0.0, 0.0, 10.0, 10.0) },
        GtBox { class_id: 0, bbox: BBox::new(6.0, 0.0, 16.0, 10.0) },
        GtBox { class_id: 1, bbox: BBox::new(30.0, 0.0, 40.0, 10.0) },
    ];
    let palette: [(usize, [f32; 4]); 6] = [
        (0, [0.0, 0.0, 10.0, 10.0]),
        (0, [3.0, 0.0, 13.0, 10.0]),
        (0, [5.0, 0.0, 15.0, 10.0]),
        (1, [30.0, 0.0, 40.0, 8.0]),
        (1, [0.0, 0.0, 10.0, 10.0]),
        (0, [0.0, 0.0, 10.0, 4.0]),
    ];
    let mut out = Vec::new();
    for mask in 0..8u32 {
        let gts: Vec<GtBox> = (0..3).filter(|j| mask & (1 << j) != 0).map(|j| gt_all[j]).collect();
        for n in 0..=5u32 {
            for code in 0..6usize.pow(n) {
                for pattern in 0..3 {
                    let mut c = code;
                    let dets = (0..n as usize)
                        .map(|i| {
                            let (cls, b) = palette[c % 6];
                            c /= 6;
                            let score = match pattern {
                                0 => 0.9 - 0.1 * i as f32,
                                1 => 0.5,
                                _ => 0.1 + 0.1 * i as f32,
                            };
                            det_xyxy(cls, score, b[0], b[1], b[2], b[3])
                        })
                        .collect();
                    out.push((dets, gts.clone()));
                }
            }
        }
    }
    out
}
