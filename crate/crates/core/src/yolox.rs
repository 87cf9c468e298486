//! YOLOX head post-processing: anchor-free grid decode, objectness x class
//! score fusion, IoU and class-aware greedy NMS.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor_io::{HeadTensor, RawTensorSet, BOX_CHANNELS, LEVELS};

#[derive(Debug, Error, PartialEq)]
pub enum DecodeError {
    #[error("non-finite value {value} at cell (x={x}, y={y}) channel {channel}, stride {stride}")]
    NonFinite {
        stride: u32,
        x: u32,
        y: u32,
        channel: u32,
        value: f32,
    },
    #[error("decoded box at cell (x={x}, y={y}), stride {stride} is not finite")]
    NonFiniteBox { stride: u32, x: u32, y: u32 },
    #[error("geometry: {0}")]
    Geometry(String),
}

/// Axis-aligned box in image pixels, origin top-left.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite())
            && self.x1 <= self.x2
            && self.y1 <= self.y2
    }

    pub fn clip(&self, width: f64, height: f64) -> Self {
        let x1 = self.x1.clamp(0.0, width);
        let y1 = self.y1.clamp(0.0, height);
        Self {
            x1,
            y1,
            x2: self.x2.clamp(x1, width),
            y2: self.y2.clamp(y1, height),
        }
    }

    pub fn intersection_area(&self, other: &Self) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box", with = "box_array")]
    pub bbox: BoundingBox,
    pub score: f64,
    #[serde(rename = "class")]
    pub class_id: u32,
}

mod box_array {
    use super::BoundingBox;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(b: &BoundingBox, s: S) -> Result<S::Ok, S::Error> {
        [b.x1, b.y1, b.x2, b.y2].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BoundingBox, D::Error> {
        let [x1, y1, x2, y2] = <[f64; 4]>::deserialize(d)?;
        Ok(BoundingBox { x1, y1, x2, y2 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub strides: [u32; LEVELS],
    pub num_classes: u32,
    pub conf_threshold: f64,
    pub nms_iou_threshold: f64,
    pub person_class_id: u32,
    pub train_class_id: u32,
}

impl Default for DecodeConfig {
    /// COCO-80 head: person is class 0, train is class 6.
    fn default() -> Self {
        Self {
            strides: [8, 16, 32],
            num_classes: 80,
            conf_threshold: 0.30,
            nms_iou_threshold: 0.45,
            person_class_id: 0,
            train_class_id: 6,
        }
    }
}

impl DecodeConfig {
    /// Two-class head (person = 0, train = 1) used by the synthetic station scenes.
    pub fn station() -> Self {
        Self {
            num_classes: 2,
            person_class_id: 0,
            train_class_id: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, t) in [
            ("conf_threshold", self.conf_threshold),
            ("nms_iou_threshold", self.nms_iou_threshold),
        ] {
            if !(0.0..=1.0).contains(&t) {
                return Err(format!("{name} {t} outside [0, 1]"));
            }
        }
        if self.strides[0] == 0 || !self.strides.windows(2).all(|w| w[0] < w[1]) {
            return Err(format!(
                "strides {:?} are not strictly increasing",
                self.strides
            ));
        }
        if self.num_classes == 0 {
            return Err("num_classes must be at least 1".into());
        }
        if self.person_class_id == self.train_class_id {
            return Err("person_class_id and train_class_id must differ".into());
        }
        for (name, id) in [
            ("person_class_id", self.person_class_id),
            ("train_class_id", self.train_class_id),
        ] {
            if id >= self.num_classes {
                return Err(format!("{name} {id} >= num_classes {}", self.num_classes));
            }
        }
        Ok(())
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Decodes one stride level. Channel order per cell is
/// `(tx, ty, tw, th, obj_logit, class_logits...)`.
pub fn decode_head(
    tensor: &HeadTensor,
    stride: u32,
    conf_threshold: f64,
) -> Result<Vec<Detection>, DecodeError> {
    if tensor.channels <= BOX_CHANNELS {
        return Err(DecodeError::Geometry(format!(
            "stride {stride}: {} channels, need 5 + num_classes (num_classes >= 1)",
            tensor.channels
        )));
    }
    let expected = tensor.grid_h as usize * tensor.grid_w as usize * tensor.channels as usize;
    if tensor.data.len() != expected {
        return Err(DecodeError::Geometry(format!(
            "stride {stride}: {} elements, shape implies {expected}",
            tensor.data.len()
        )));
    }
    let s = stride as f64;
    let mut out = Vec::new();
    for y in 0..tensor.grid_h {
        for x in 0..tensor.grid_w {
            let cell = tensor.cell(y, x);
            if let Some(c) = cell.iter().position(|v| !v.is_finite()) {
                return Err(DecodeError::NonFinite {
                    stride,
                    x,
                    y,
                    channel: c as u32,
                    value: cell[c],
                });
            }
            let classes = &cell[BOX_CHANNELS as usize..];
            let (class_id, best) =
                classes
                    .iter()
                    .enumerate()
                    .fold((0usize, f32::NEG_INFINITY), |acc, (i, &v)| {
                        if v > acc.1 {
                            (i, v)
                        } else {
                            acc
                        }
                    });
            let score = sigmoid(cell[4] as f64) * sigmoid(best as f64);
            if score < conf_threshold {
                continue;
            }
            let cx = (x as f64 + cell[0] as f64) * s;
            let cy = (y as f64 + cell[1] as f64) * s;
            let w = (cell[2] as f64).exp() * s;
            let h = (cell[3] as f64).exp() * s;
            let bbox = BoundingBox::from_center(cx, cy, w, h);
            if !bbox.is_valid() {
                return Err(DecodeError::NonFiniteBox { stride, x, y });
            }
            out.push(Detection {
                bbox,
                score,
                class_id: class_id as u32,
            });
        }
    }
    Ok(out)
}

/// Decodes all three levels, clipping boxes to the image. Output order is
/// stride level, then row-major cell order.
pub fn decode_all(
    frame: &RawTensorSet,
    config: &DecodeConfig,
) -> Result<Vec<Detection>, DecodeError> {
    let (iw, ih) = (frame.image_width, frame.image_height);
    let mut all = Vec::new();
    for (out, &stride) in frame.outputs.iter().zip(&config.strides) {
        if stride == 0 || iw % stride != 0 || ih % stride != 0 {
            return Err(DecodeError::Geometry(format!(
                "image {iw}x{ih} not divisible by stride {stride}"
            )));
        }
        if out.grid_w != iw / stride || out.grid_h != ih / stride {
            return Err(DecodeError::Geometry(format!(
                "stride-{stride} grid is {}x{}, expected {}x{}",
                out.grid_w,
                out.grid_h,
                iw / stride,
                ih / stride
            )));
        }
        if out.channels != BOX_CHANNELS + config.num_classes {
            return Err(DecodeError::Geometry(format!(
                "stride-{stride} output has {} channels, config implies {}",
                out.channels,
                BOX_CHANNELS + config.num_classes
            )));
        }
        let mut dets = decode_head(out, stride, config.conf_threshold)?;
        for d in &mut dets {
            d.bbox = d.bbox.clip(iw as f64, ih as f64);
        }
        all.extend(dets);
    }
    Ok(all)
}

/// Intersection over union; 0 when the union has no area.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Ranking used by NMS: score descending, then lower class, then input order.
fn rank(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| {
        dets[j]
            .score
            .partial_cmp(&dets[i].score)
            .unwrap_or(Ordering::Equal)
            .then(dets[i].class_id.cmp(&dets[j].class_id))
            .then(i.cmp(&j))
    });
    order
}

/// Class-aware greedy NMS. A detection survives iff no already-kept
/// detection of the same class overlaps it with IoU above `iou_threshold`.
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for i in rank(detections) {
        let d = &detections[i];
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && iou(&k.bbox, &d.bbox) > iou_threshold);
        if !suppressed {
            kept.push(*d);
        }
    }
    kept
}

pub fn filter_class(detections: &[Detection], class_id: u32) -> Vec<Detection> {
    detections
        .iter()
        .filter(|d| d.class_id == class_id)
        .copied()
        .collect()
}

/// One JSON Lines record: `{"frame":n,"detections":[{"box":[..],"score":s,"class":c},..]}`
/// with floats printed to 6 decimals.
pub fn detections_jsonl(frame: u32, detections: &[Detection]) -> String {
    let mut s = format!("{{\"frame\":{frame},\"detections\":");
    write_detections_json(&mut s, detections);
    s.push('}');
    s
}

pub(crate) fn write_detections_json(s: &mut String, detections: &[Detection]) {
    s.push('[');
    for (i, d) in detections.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        let _ = write!(
            s,
            "{{\"box\":[{:.6},{:.6},{:.6},{:.6}],\"score\":{:.6},\"class\":{}}}",
            d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2, d.score, d.class_id
        );
    }
    s.push(']');
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_io::TensorStreamHeader;
    use proptest::prelude::*;

    fn det(x1: f64, y1: f64, x2: f64, y2: f64, score: f64, class_id: u32) -> Detection {
        Detection {
            bbox: BoundingBox::new(x1, y1, x2, y2),
            score,
            class_id,
        }
    }

    fn tensor_1class(grid: u32) -> HeadTensor {
        HeadTensor::filled(grid, grid, 6, -20.0)
    }

    #[test]
    fn decode_corner_cell() {
        let mut t = tensor_1class(4);
        t.cell_mut(0, 0)
            .copy_from_slice(&[0.0, 0.0, 0.0, 0.0, 20.0, 20.0]);
        let d = decode_head(&t, 8, 0.3).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].bbox, BoundingBox::new(-4.0, -4.0, 4.0, 4.0));
        assert!((d[0].score - 1.0).abs() < 1e-8);
        assert_eq!(d[0].class_id, 0);
    }

    #[test]
    fn decode_offset_cell_matches_scalar_recomputation() {
        let mut t = tensor_1class(8);
        let ln2 = std::f32::consts::LN_2;
        t.cell_mut(2, 3)
            .copy_from_slice(&[0.5, 0.5, ln2, ln2, 0.0, 0.0]);
        let d = decode_head(&t, 16, 0.2).unwrap();
        assert_eq!(d.len(), 1);
        // independent recomputation: center (3.5*16, 2.5*16), size 2*16
        let (cx, cy) = d[0].bbox.center();
        assert!((cx - 56.0).abs() < 1e-5 && (cy - 40.0).abs() < 1e-5);
        assert!((d[0].bbox.width() - 32.0).abs() < 1e-5);
        assert!((d[0].bbox.height() - 32.0).abs() < 1e-5);
        assert!((d[0].score - 0.25).abs() < 1e-12);
    }

    #[test]
    fn uniform_zero_logits_filtered() {
        let t = HeadTensor::filled(4, 4, 7, 0.0);
        assert!(decode_head(&t, 8, 0.3).unwrap().is_empty());
        assert_eq!(decode_head(&t, 8, 0.25).unwrap().len(), 16);
    }

    #[test]
    fn argmax_tie_takes_lowest_class() {
        let mut t = HeadTensor::filled(1, 1, 8, 5.0);
        t.cell_mut(0, 0)[..4].copy_from_slice(&[0.5, 0.5, 0.0, 0.0]);
        let d = decode_head(&t, 8, 0.0).unwrap();
        assert_eq!(d[0].class_id, 0);
    }

    #[test]
    fn non_finite_is_reported_with_cell_and_channel() {
        let mut t = tensor_1class(4);
        t.cell_mut(1, 2)[3] = f32::NAN;
        match decode_head(&t, 8, 0.3) {
            Err(DecodeError::NonFinite { x, y, channel, .. }) => {
                assert_eq!((x, y, channel), (2, 1, 3))
            }
            other => panic!("unexpected {other:?}"),
        }
        let t = HeadTensor::filled(2, 2, 5, 0.0);
        assert!(matches!(
            decode_head(&t, 8, 0.3),
            Err(DecodeError::Geometry(_))
        ));
    }

    #[test]
    fn decode_all_background_and_clipping() {
        let h = TensorStreamHeader::new(2, 64, 64, [8, 16, 32]);
        let cfg = DecodeConfig::station();
        let frame = RawTensorSet::filled(&h, 0, -20.0);
        assert!(decode_all(&frame, &cfg).unwrap().is_empty());

        let mut frame = RawTensorSet::filled(&h, 0, -20.0);
        // stride-32 cell (1,1) with center pushed to the image corner and a 64px box
        let c = frame.outputs[2].cell_mut(1, 1);
        c.copy_from_slice(&[
            0.99,
            0.99,
            1.0f32.ln() + 2.0f32.ln(),
            2.0f32.ln(),
            20.0,
            -20.0,
            20.0,
        ]);
        let d = decode_all(&frame, &cfg).unwrap();
        assert_eq!(d.len(), 1);
        let b = d[0].bbox;
        assert!(b.x2 <= 64.0 && b.y2 <= 64.0 && b.x1 <= b.x2 && b.y1 <= b.y2);
        assert_eq!(b.x2, 64.0);
        assert_eq!(d[0].class_id, 1);
    }

    #[test]
    fn decode_all_rejects_wrong_channels() {
        let h = TensorStreamHeader::new(3, 64, 64, [8, 16, 32]);
        let frame = RawTensorSet::filled(&h, 0, -20.0);
        assert!(matches!(
            decode_all(&frame, &DecodeConfig::station()),
            Err(DecodeError::Geometry(_))
        ));
    }

    #[test]
    fn iou_examples() {
        let a = BoundingBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(
            iou(
                &BoundingBox::new(0.0, 0.0, 1.0, 1.0),
                &BoundingBox::new(5.0, 5.0, 6.0, 6.0)
            ),
            0.0
        );
        let v = iou(
            &BoundingBox::new(0.0, 0.0, 2.0, 2.0),
            &BoundingBox::new(1.0, 1.0, 3.0, 3.0),
        );
        assert!((v - 1.0 / 7.0).abs() < 1e-12);
        let p = BoundingBox::new(5.0, 5.0, 5.0, 5.0);
        assert_eq!(iou(&p, &p), 0.0);
    }

    #[test]
    fn nms_examples() {
        let single = vec![det(0.0, 0.0, 10.0, 10.0, 0.5, 0)];
        assert_eq!(nms(&single, 0.45), single);

        // (0,0,10,10) vs (0,0,10,8): iou = 80/100 = 0.8
        let pair = vec![
            det(0.0, 0.0, 10.0, 8.0, 0.7, 0),
            det(0.0, 0.0, 10.0, 10.0, 0.9, 0),
        ];
        assert!((iou(&pair[0].bbox, &pair[1].bbox) - 0.8).abs() < 1e-12);
        assert_eq!(nms(&pair, 0.45), vec![pair[1]]);
        assert_eq!(nms(&pair, 0.45), reference_nms(&pair, 0.45));

        let mixed = vec![
            det(0.0, 0.0, 10.0, 8.0, 0.7, 1),
            det(0.0, 0.0, 10.0, 10.0, 0.9, 0),
        ];
        assert_eq!(nms(&mixed, 0.45).len(), 2);
    }

    #[test]
    fn filter_class_examples() {
        let p1 = det(0.0, 0.0, 1.0, 1.0, 0.9, 0);
        let t = det(0.0, 0.0, 2.0, 2.0, 0.8, 6);
        let p2 = det(0.0, 0.0, 3.0, 3.0, 0.7, 0);
        assert_eq!(filter_class(&[p1, t, p2], 0), vec![p1, p2]);
        assert!(filter_class(&[], 0).is_empty());

        let fixture: Vec<_> = (0..6)
            .map(|i| det(0.0, 0.0, 1.0 + i as f64, 1.0, 0.5, i % 3))
            .collect();
        for class in 0..4 {
            let mut expected = Vec::new();
            for d in &fixture {
                if d.class_id == class {
                    expected.push(*d);
                }
            }
            assert_eq!(filter_class(&fixture, class), expected);
        }
    }

    #[test]
    fn jsonl_record_format() {
        let line = detections_jsonl(3, &[det(1.0, 2.5, 3.0, 4.0, 0.8125, 0)]);
        assert_eq!(
            line,
            r#"{"frame":3,"detections":[{"box":[1.000000,2.500000,3.000000,4.000000],"score":0.812500,"class":0}]}"#
        );
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        let d: Detection = serde_json::from_value(v["detections"][0].clone()).unwrap();
        assert_eq!(d.bbox.y1, 2.5);
    }

    /// Per-class suppression-flag NMS: partition by class, run the textbook
    /// O(n^2) pass, then merge survivors back in global rank order.
    pub(crate) fn reference_nms(dets: &[Detection], thr: f64) -> Vec<Detection> {
        let order = rank(dets);
        let mut alive = vec![true; dets.len()];
        let classes: std::collections::BTreeSet<u32> = dets.iter().map(|d| d.class_id).collect();
        for c in classes {
            let members: Vec<usize> = order
                .iter()
                .copied()
                .filter(|&i| dets[i].class_id == c)
                .collect();
            for (a, &i) in members.iter().enumerate() {
                if !alive[i] {
                    continue;
                }
                for &j in &members[a + 1..] {
                    if iou(&dets[i].bbox, &dets[j].bbox) > thr {
                        alive[j] = false;
                    }
                }
            }
        }
        order
            .into_iter()
            .filter(|&i| alive[i])
            .map(|i| dets[i])
            .collect()
    }

    fn arb_det() -> impl Strategy<Value = Detection> {
        (
            0.0..50.0f64,
            0.0..50.0f64,
            1.0..30.0f64,
            1.0..30.0f64,
            0.0..1.0f64,
            0u32..3,
        )
            .prop_map(|(x, y, w, h, s, c)| det(x, y, x + w, y + h, (s * 20.0).round() / 20.0, c))
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (-20.0..20.0f64, -20.0..20.0f64, 0.0..15.0f64, 0.0..15.0f64)
            .prop_map(|(x, y, w, h)| BoundingBox::new(x, y, x + w, y + h))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn nms_matches_reference(
            dets in prop::collection::vec(arb_det(), 0..=20),
            thr in prop::sample::select(vec![0.3, 0.45, 0.6]),
        ) {
            let got = nms(&dets, thr);
            prop_assert_eq!(&got, &reference_nms(&dets, thr));
            prop_assert!(got.windows(2).all(|w| w[0].score >= w[1].score));
        }

        #[test]
        fn iou_bounds_and_symmetry(a in arb_box(), b in arb_box()) {
            let v = iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v, iou(&b, &a));
            if a.area() > 0.0 {
                prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn raising_threshold_never_adds(
            data in prop::collection::vec(-6.0f32..6.0, 4 * 4 * 7),
            lo in 0.0..1.0f64,
            delta in 0.0..0.5f64,
        ) {
            let t = HeadTensor { grid_h: 4, grid_w: 4, channels: 7, data };
            let low = decode_head(&t, 8, lo).unwrap();
            let high = decode_head(&t, 8, (lo + delta).min(1.0)).unwrap();
            prop_assert!(high.len() <= low.len());
            prop_assert!(high.iter().all(|d| low.contains(d)));
            prop_assert_eq!(decode_head(&t, 8, lo).unwrap(), low);
        }
    }
}
