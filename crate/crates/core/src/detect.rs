//! Letterbox preprocessing, anchor decoding of raw head outputs, class-aware
//! NMS, mapping back to the original image, and box rendering.

use std::fmt::Write as _;

use thiserror::Error;

use crate::bbox::BBox;
use crate::graph::{AnchorSet, GraphError, Model, ANCHORS_PER_SCALE};
use crate::image::{ImageError, RasterImage, Rgb};
use crate::tensor::{sigmoid, Tensor};

pub const DEFAULT_CONF: f32 = 0.25;
pub const DEFAULT_NMS_IOU: f32 = 0.45;
pub const PAD_VALUE: u8 = 114;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("head {scale}: expected {expected} channels (3 x (nc + 5)), got {actual}")]
    ChannelMismatch { scale: usize, expected: usize, actual: usize },
    #[error("head {scale}: batch size must be 1, got {actual}")]
    Batch { scale: usize, actual: usize },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// One box in pixels, centre/size form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
    pub class_id: usize,
    pub score: f32,
}

impl Detection {
    pub fn bbox(&self) -> BBox {
        BBox::from_cxcywh(self.cx as f64, self.cy as f64, self.w as f64, self.h as f64)
    }
}

/// Maps between original-image pixels and the square network input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LetterboxTransform {
    pub scale: f64,
    /// Left padding in pixels.
    pub pad_x: usize,
    /// Top padding in pixels.
    pub pad_y: usize,
    pub orig_w: usize,
    pub orig_h: usize,
    pub target: usize,
    pub resized_w: usize,
    pub resized_h: usize,
}

impl LetterboxTransform {
    pub fn new(orig_w: usize, orig_h: usize, target: usize) -> Result<Self, ImageError> {
        if orig_w == 0 || orig_h == 0 || target == 0 {
            return Err(ImageError::ZeroSize);
        }
        let scale = (target as f64 / orig_w as f64).min(target as f64 / orig_h as f64);
        let resized_w = ((orig_w as f64 * scale).round() as usize).clamp(1, target);
        let resized_h = ((orig_h as f64 * scale).round() as usize).clamp(1, target);
        Ok(LetterboxTransform {
            scale,
            pad_x: (target - resized_w) / 2,
            pad_y: (target - resized_h) / 2,
            orig_w,
            orig_h,
            target,
            resized_w,
            resized_h,
        })
    }

    pub fn to_letterbox(&self, d: &Detection) -> Detection {
        let s = self.scale;
        Detection {
            cx: (d.cx as f64 * s + self.pad_x as f64) as f32,
            cy: (d.cy as f64 * s + self.pad_y as f64) as f32,
            w: (d.w as f64 * s) as f32,
            h: (d.h as f64 * s) as f32,
            ..*d
        }
    }

    pub fn to_original(&self, d: &Detection) -> Detection {
        let s = self.scale;
        Detection {
            cx: ((d.cx as f64 - self.pad_x as f64) / s) as f32,
            cy: ((d.cy as f64 - self.pad_y as f64) / s) as f32,
            w: (d.w as f64 / s) as f32,
            h: (d.h as f64 / s) as f32,
            ..*d
        }
    }
}

/// Aspect-preserving bilinear resize, then symmetric gray padding to a
/// `target x target` square. Odd padding puts the extra pixel at the
/// bottom/right.
pub fn letterbox(img: &RasterImage, target: usize) -> Result<(RasterImage, LetterboxTransform), ImageError> {
    if img.is_empty() {
        return Err(ImageError::ZeroSize);
    }
    let t = LetterboxTransform::new(img.width(), img.height(), target)?;
    let resized = img.resize_bilinear(t.resized_w, t.resized_h)?;
    if t.resized_w == target && t.resized_h == target {
        return Ok((resized, t));
    }
    let mut out = RasterImage::filled(target, target, [PAD_VALUE; 3]);
    for y in 0..t.resized_h {
        let src = &resized.pixels()[3 * y * t.resized_w..3 * (y + 1) * t.resized_w];
        let start = 3 * ((y + t.pad_y) * target + t.pad_x);
        out.pixels_mut()[start..start + src.len()].copy_from_slice(src);
    }
    Ok((out, t))
}

/// Decodes raw head logits into boxes in the letterboxed frame.
///
/// Channel `a * (nc + 5) + j` of each head holds, for anchor `a`,
/// `tx, ty, tw, th, obj, cls_0 .. cls_{nc-1}`. A box is emitted when
/// `sigmoid(obj) * sigmoid(best class)` is strictly above `conf_thresh`.
pub fn decode(heads: &[Tensor; 3], anchors: &AnchorSet, conf_thresh: f32, nc: usize) -> Result<Vec<Detection>, DetectError> {
    let per_anchor = nc + 5;
    let mut dets = Vec::new();
    for (scale, head) in heads.iter().enumerate() {
        let [n, c, gh, gw] = head.shape();
        if c != ANCHORS_PER_SCALE * per_anchor {
            return Err(DetectError::ChannelMismatch {
                scale,
                expected: ANCHORS_PER_SCALE * per_anchor,
                actual: c,
            });
        }
        if n != 1 {
            return Err(DetectError::Batch { scale, actual: n });
        }
        let stride = anchors.strides[scale] as f32;
        for (a, &(aw, ah)) in anchors.anchors[scale].iter().enumerate() {
            let ch = |j: usize| head.plane(0, a * per_anchor + j);
            let (tx, ty, tw, th, obj) = (ch(0), ch(1), ch(2), ch(3), ch(4));
            for gy in 0..gh {
                for gx in 0..gw {
                    let i = gy * gw + gx;
                    let obj_p = sigmoid(obj[i]);
                    if obj_p <= conf_thresh {
                        continue;
                    }
                    let (mut best, mut best_logit) = (0, f32::NEG_INFINITY);
                    for k in 0..nc {
                        let v = ch(5 + k)[i];
                        if v > best_logit {
                            best = k;
                            best_logit = v;
                        }
                    }
                    let score = obj_p * sigmoid(best_logit);
                    if score <= conf_thresh {
                        continue;
                    }
                    let sw = 2.0 * sigmoid(tw[i]);
                    let sh = 2.0 * sigmoid(th[i]);
                    dets.push(Detection {
                        cx: (2.0 * sigmoid(tx[i]) - 0.5 + gx as f32) * stride,
                        cy: (2.0 * sigmoid(ty[i]) - 0.5 + gy as f32) * stride,
                        w: aw * sw * sw,
                        h: ah * sh * sh,
                        class_id: best,
                        score,
                    });
                }
            }
        }
    }
    Ok(dets)
}

/// Class-aware greedy NMS. Survivors are sorted by descending score (ties
/// keep input order) and no two survivors of the same class overlap with
/// IoU `>= iou_thresh`.
pub fn nms(dets: &[Detection], iou_thresh: f32) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut kept: Vec<Detection> = Vec::new();
    let mut boxes: Vec<BBox> = Vec::new();
    for i in order {
        let d = dets[i];
        let bb = d.bbox();
        let suppressed = kept
            .iter()
            .zip(&boxes)
            .any(|(k, kb)| k.class_id == d.class_id && kb.iou(&bb) >= iou_thresh as f64);
        if !suppressed {
            kept.push(d);
            boxes.push(bb);
        }
    }
    kept
}

/// Builds head tensors whose decode yields exactly `boxes` (letterboxed
/// pixels, `(class, cx, cy, w, h)`). Each box is assigned to the anchor whose
/// shape ratio is closest; every other position gets strongly negative
/// objectness. Boxes more than 4x an anchor's side cannot be represented and
/// are skipped; the count of skipped boxes is returned.
pub fn ideal_heads(
    boxes: &[(usize, f32, f32, f32, f32)],
    anchors: &AnchorSet,
    nc: usize,
    input_h: usize,
    input_w: usize,
) -> ([Tensor; 3], usize) {
    const OFF: f32 = -20.0;
    const ON: f32 = 20.0;
    let per_anchor = nc + 5;
    let mut heads: [Tensor; 3] = std::array::from_fn(|s| {
        let stride = anchors.strides[s];
        let shape = [1, ANCHORS_PER_SCALE * per_anchor, input_h / stride, input_w / stride];
        Tensor::from_fn(shape, |[_, c, _, _]| if c % per_anchor >= 4 { OFF } else { 0.0 })
    });
    let logit = |p: f64| (p / (1.0 - p)).ln() as f32;
    let mut skipped = 0;
    for &(class, cx, cy, w, h) in boxes {
        let mut best: Option<(f32, usize, usize)> = None;
        for (s, scale) in anchors.anchors.iter().enumerate() {
            for (a, &(aw, ah)) in scale.iter().enumerate() {
                let ratio = (w / aw).max(aw / w).max(h / ah).max(ah / h);
                if ratio < 3.9 && best.is_none_or(|(r, _, _)| ratio < r) {
                    best = Some((ratio, s, a));
                }
            }
        }
        let Some((_, s, a)) = best else {
            skipped += 1;
            continue;
        };
        let stride = anchors.strides[s] as f64;
        let (aw, ah) = anchors.anchors[s][a];
        let head = &mut heads[s];
        let [_, _, gh, gw] = head.shape();
        let gx = ((cx as f64 / stride).floor() as usize).min(gw - 1);
        let gy = ((cy as f64 / stride).floor() as usize).min(gh - 1);
        let ox = cx as f64 / stride - gx as f64;
        let oy = cy as f64 / stride - gy as f64;
        let mut values = vec![
            logit((ox + 0.5) / 2.0),
            logit((oy + 0.5) / 2.0),
            logit((w as f64 / aw as f64).sqrt() / 2.0),
            logit((h as f64 / ah as f64).sqrt() / 2.0),
            ON,
        ];
        values.extend((0..nc).map(|k| if k == class { ON } else { OFF }));
        for (j, v) in values.into_iter().enumerate() {
            let idx = head.index([0, a * per_anchor + j, gy, gx]);
            head.data_mut()[idx] = v;
        }
    }
    (heads, skipped)
}

/// Inference settings for [`detect_image`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectConfig {
    pub input_size: usize,
    pub conf_thresh: f32,
    pub nms_iou: f32,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            input_size: 640,
            conf_thresh: DEFAULT_CONF,
            nms_iou: DEFAULT_NMS_IOU,
        }
    }
}

/// letterbox -> forward -> decode -> NMS -> original-frame boxes.
pub fn detect_image(model: &Model, img: &RasterImage, cfg: &DetectConfig) -> Result<Vec<Detection>, DetectError> {
    let (input, t) = letterbox(img, cfg.input_size)?;
    let heads = model.forward(&input.to_tensor())?;
    let graph = model.graph();
    let dets = decode(&heads, &graph.anchors, cfg.conf_thresh, graph.nc)?;
    Ok(nms(&dets, cfg.nms_iou).iter().map(|d| t.to_original(d)).collect())
}

/// Border colour per maturity class.
pub fn class_color(class_id: usize) -> Rgb {
    const PALETTE: [Rgb; 3] = [[255, 0, 0], [255, 165, 0], [255, 105, 180]];
    const EXTRA: [Rgb; 4] = [[0, 255, 255], [0, 0, 255], [0, 255, 0], [255, 255, 0]];
    match PALETTE.get(class_id) {
        Some(&c) => c,
        None => EXTRA[(class_id - PALETTE.len()) % EXTRA.len()],
    }
}

/// Short caption for a box, e.g. `mature 0.87`.
pub fn caption(det: &Detection) -> String {
    let name = crate::dataset::MaturityClass::from_id(det.class_id)
        .map(|c| c.name().to_string())
        .unwrap_or_else(|| format!("class{}", det.class_id));
    format!("{name} {:.2}", det.score)
}

pub const BORDER: i64 = 2;

/// Draws a 2-pixel border for every box in its class colour. Boxes are
/// clipped to the image.
pub fn render(img: &RasterImage, dets: &[Detection]) -> RasterImage {
    let mut out = img.clone();
    let (iw, ih) = (img.width() as i64, img.height() as i64);
    for d in dets {
        let x0 = (d.cx as f64 - d.w as f64 / 2.0).round() as i64;
        let x1 = (d.cx as f64 + d.w as f64 / 2.0).round() as i64;
        let y0 = (d.cy as f64 - d.h as f64 / 2.0).round() as i64;
        let y1 = (d.cy as f64 + d.h as f64 / 2.0).round() as i64;
        let color = class_color(d.class_id);
        for y in y0.max(0)..y1.min(ih) {
            for x in x0.max(0)..x1.min(iw) {
                let edge = x < x0 + BORDER || x >= x1 - BORDER || y < y0 + BORDER || y >= y1 - BORDER;
                if edge {
                    out.set(x as usize, y as usize, color);
                }
            }
        }
    }
    out
}

/// One line per box: `class_id score cx cy w h`, four decimals.
pub fn format_detections(dets: &[Detection]) -> String {
    let mut s = String::new();
    for d in dets {
        let _ = writeln!(s, "{} {:.4} {:.4} {:.4} {:.4} {:.4}", d.class_id, d.score, d.cx, d.cy, d.w, d.h);
    }
    s
}

pub fn parse_detections(text: &str) -> Result<Vec<Detection>, DetectError> {
    let mut dets = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let err = |msg: String| DetectError::Parse { line: line_no, msg };
        if fields.len() != 6 {
            return Err(err(format!("expected 6 fields, found {}", fields.len())));
        }
        let class_id: usize = fields[0]
            .parse()
            .map_err(|_| err(format!("bad class id '{}'", fields[0])))?;
        let mut v = [0f32; 5];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f.parse().map_err(|_| err(format!("bad number '{f}'")))?;
        }
        if !(0.0..=1.0).contains(&v[0]) {
            return Err(err(format!("score {} outside [0, 1]", v[0])));
        }
        dets.push(Detection {
            class_id,
            score: v[0],
            cx: v[1],
            cy: v[2],
            w: v[3],
            h: v[4],
        });
    }
    Ok(dets)
}
