//! Device segmentation, battery detection and detection metrics.
//!
//! Boxes use image coordinates: `x` is the column (across the belt), `y` the
//! row (along travel). The geometric stand-in detector thresholds the 8-bit
//! high-energy channel; the oracle projects scene rectangles directly.

use std::cmp::Ordering;
use std::collections::{BTreeMap, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{BatteryClass, Scene};
use crate::xray::{DualEnergyFrame, FrameWindow, Image, ScannerConfig};

#[derive(Debug, Error)]
pub enum DetectionError {
    #[error("mask is empty")]
    EmptyMask,
    #[error("detector needs frame pixels")]
    MissingPixels,
    #[error("malformed input: {0}")]
    MalformedInput(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Device,
    Cylindrical,
    Pouch,
    Button,
    Other,
}

impl Label {
    pub fn battery(class: BatteryClass) -> Self {
        match class {
            BatteryClass::Cylindrical => Label::Cylindrical,
            BatteryClass::Pouch => Label::Pouch,
            BatteryClass::Button => Label::Button,
            BatteryClass::Other => Label::Other,
        }
    }

    pub fn battery_class(self) -> Option<BatteryClass> {
        match self {
            Label::Device => None,
            Label::Cylindrical => Some(BatteryClass::Cylindrical),
            Label::Pouch => Some(BatteryClass::Pouch),
            Label::Button => Some(BatteryClass::Button),
            Label::Other => Some(BatteryClass::Other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    /// Column of the centre, px.
    pub x_center: f64,
    /// Row of the centre, px.
    pub y_center: f64,
    pub width: f64,
    pub height: f64,
    pub label: Label,
    pub score: f64,
}

impl BoundingBox {
    pub fn from_edges(left: f64, top: f64, right: f64, bottom: f64, label: Label) -> Self {
        Self {
            x_center: 0.5 * (left + right),
            y_center: 0.5 * (top + bottom),
            width: right - left,
            height: bottom - top,
            label,
            score: 1.0,
        }
    }

    pub fn left(&self) -> f64 {
        self.x_center - 0.5 * self.width
    }

    pub fn right(&self) -> f64 {
        self.x_center + 0.5 * self.width
    }

    pub fn top(&self) -> f64 {
        self.y_center - 0.5 * self.height
    }

    pub fn bottom(&self) -> f64 {
        self.y_center + 0.5 * self.height
    }

    /// `[left, top, right, bottom]`
    pub fn edges(&self) -> [f64; 4] {
        [self.left(), self.top(), self.right(), self.bottom()]
    }

    pub fn area(&self) -> f64 {
        self.width * self.height
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.left() && x <= self.right() && y >= self.top() && y <= self.bottom()
    }

    pub fn contains_center_of(&self, other: &BoundingBox) -> bool {
        self.contains_point(other.x_center, other.y_center)
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let w = (self.right().min(other.right()) - self.left().max(other.left())).max(0.0);
        let h = (self.bottom().min(other.bottom()) - self.top().max(other.top())).max(0.0);
        let inter = w * h;
        let union = self.area() + other.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }

    /// Grown by `margin` on every side.
    pub fn expanded(&self, margin: f64) -> Self {
        Self {
            width: self.width + 2.0 * margin,
            height: self.height + 2.0 * margin,
            ..*self
        }
    }

    /// Closed-interval overlap; touching boxes intersect.
    pub fn intersects(&self, other: &BoundingBox) -> bool {
        self.left() <= other.right()
            && other.left() <= self.right()
            && self.top() <= other.bottom()
            && other.top() <= self.bottom()
    }

    pub fn union(&self, other: &BoundingBox) -> Self {
        let mut b = Self::from_edges(
            self.left().min(other.left()),
            self.top().min(other.top()),
            self.right().max(other.right()),
            self.bottom().max(other.bottom()),
            self.label,
        );
        b.score = self.score.max(other.score);
        b
    }

    fn sort_key(&self) -> [f64; 4] {
        [self.x_center, self.y_center, self.width, self.height]
    }
}

fn lexicographic(a: &[f64; 4], b: &[f64; 4]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Descending score, ties broken by box coordinates.
fn score_order(a: &BoundingBox, b: &BoundingBox) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| lexicographic(&a.sort_key(), &b.sort_key()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectionParams {
    /// HE pixels below this belong to a device.
    pub background_threshold: u8,
    /// HE pixels below this inside a device belong to a battery.
    pub battery_threshold: u8,
    pub min_area_px: usize,
    pub neighbor_gap_px: f64,
    pub cylindrical_min_aspect: f64,
    pub button_max_aspect: f64,
    pub button_max_side_mm: f64,
    pub pouch_min_area_mm2: f64,
}

impl Default for DetectionParams {
    fn default() -> Self {
        Self {
            background_threshold: 250,
            battery_threshold: 180,
            min_area_px: 50,
            neighbor_gap_px: 10.0,
            cylindrical_min_aspect: 3.0,
            button_max_aspect: 1.5,
            button_max_side_mm: 20.0,
            pouch_min_area_mm2: 1500.0,
        }
    }
}

/// Pixel set of one connected component, as row-major indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u32>,
}

impl Mask {
    pub fn from_coords(width: usize, height: usize, coords: &[(usize, usize)]) -> Self {
        Self {
            width,
            height,
            pixels: coords.iter().map(|&(r, c)| (r * width + c) as u32).collect(),
        }
    }

    pub fn area(&self) -> usize {
        self.pixels.len()
    }

    /// `(min_row, max_row, min_col, max_col)`
    pub fn extents(&self) -> Option<(usize, usize, usize, usize)> {
        let mut it = self.pixels.iter().map(|&i| (i as usize / self.width, i as usize % self.width));
        let (r0, c0) = it.next()?;
        Some(it.fold((r0, r0, c0, c0), |(a, b, c, d), (r, col)| {
            (a.min(r), b.max(r), c.min(col), d.max(col))
        }))
    }
}

/// 4-connected components of pixels satisfying `fg`, dropping those smaller
/// than `min_area`. Components are ordered by their first pixel in raster order.
pub fn connected_components(
    width: usize,
    height: usize,
    fg: impl Fn(usize) -> bool,
    min_area: usize,
) -> Vec<Mask> {
    let n = width * height;
    let mut seen = vec![false; n];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..n {
        if seen[start] || !fg(start) {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut pixels = Vec::new();
        while let Some(i) = queue.pop_front() {
            pixels.push(i as u32);
            let (r, c) = (i / width, i % width);
            let mut visit = |j: usize| {
                if !seen[j] && fg(j) {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < width {
                visit(i + 1);
            }
            if r > 0 {
                visit(i - width);
            }
            if r + 1 < height {
                visit(i + width);
            }
        }
        if pixels.len() >= min_area {
            pixels.sort_unstable();
            out.push(Mask {
                width,
                height,
                pixels,
            });
        }
    }
    out
}

pub fn segment_devices(he: &Image<u8>, params: &DetectionParams) -> Vec<Mask> {
    connected_components(
        he.width,
        he.height,
        |i| he.data[i] < params.background_threshold,
        params.min_area_px,
    )
}

/// Bounding box of the mask's extents; even sizes put the centre on the
/// lower pixel index.
pub fn mask_to_bbox(mask: &Mask, label: Label) -> Result<BoundingBox, DetectionError> {
    let (r0, r1, c0, c1) = mask.extents().ok_or(DetectionError::EmptyMask)?;
    Ok(BoundingBox {
        x_center: ((c0 + c1) / 2) as f64,
        y_center: ((r0 + r1) / 2) as f64,
        width: (c1 - c0 + 1) as f64,
        height: (r1 - r0 + 1) as f64,
        label,
        score: 1.0,
    })
}

/// Shape rule for a battery footprint measured in millimetres.
pub fn classify_battery(long_mm: f64, short_mm: f64, params: &DetectionParams) -> BatteryClass {
    let (long, short) = if long_mm >= short_mm { (long_mm, short_mm) } else { (short_mm, long_mm) };
    let aspect = long / short;
    if aspect >= params.cylindrical_min_aspect {
        BatteryClass::Cylindrical
    } else if aspect <= params.button_max_aspect && long <= params.button_max_side_mm {
        BatteryClass::Button
    } else if long * short >= params.pouch_min_area_mm2 {
        BatteryClass::Pouch
    } else {
        BatteryClass::Other
    }
}

pub fn detect_batteries(
    he: &Image<u8>,
    devices: &[Mask],
    mm_per_px: f64,
    params: &DetectionParams,
) -> Vec<BoundingBox> {
    let mut inside = vec![false; he.width * he.height];
    for m in devices {
        for &i in &m.pixels {
            inside[i as usize] = true;
        }
    }
    connected_components(
        he.width,
        he.height,
        |i| inside[i] && he.data[i] < params.battery_threshold,
        params.min_area_px,
    )
    .iter()
    .filter_map(|m| {
        let b = mask_to_bbox(m, Label::Device).ok()?;
        let class = classify_battery(b.width * mm_per_px, b.height * mm_per_px, params);
        Some(BoundingBox {
            label: Label::battery(class),
            ..b
        })
    })
    .collect()
}

/// Device and battery boxes projected from scene rectangles into a frame.
/// Objects entirely outside the window are excluded; partial ones are clipped.
pub fn ground_truth_detections(
    scene: &Scene,
    window: &FrameWindow,
    mm_per_px: f64,
    width_px: usize,
) -> (Vec<BoundingBox>, Vec<BoundingBox>) {
    let rows = window.height_lines as f64 * window.line_pitch_mm / mm_per_px;
    let cols = width_px as f64;
    let project = |r: &crate::scene::Rect, label: Label| -> Option<BoundingBox> {
        let top = ((r.x_start - window.origin_mm) / mm_per_px).max(0.0);
        let bottom = ((r.x_end - window.origin_mm) / mm_per_px).min(rows);
        let left = (r.y_start / mm_per_px).max(0.0);
        let right = (r.y_end / mm_per_px).min(cols);
        (bottom > top && right > left).then(|| BoundingBox::from_edges(left, top, right, bottom, label))
    };
    let mut devices = Vec::new();
    let mut batteries = Vec::new();
    for d in &scene.devices {
        if let Some(b) = project(&d.rect, Label::Device) {
            devices.push(b);
        }
        for bat in &d.batteries {
            if let Some(b) = project(&bat.rect, Label::battery(bat.class)) {
                batteries.push(b);
            }
        }
    }
    (devices, batteries)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceReport {
    pub device: BoundingBox,
    pub batteries: Vec<BoundingBox>,
    pub has_battery: bool,
}

/// Assigns each battery to the smallest-area device box containing its
/// centre. Returns one report per device, in input order, and the batteries
/// no device contains.
pub fn match_batteries_to_devices(
    batteries: &[BoundingBox],
    devices: &[BoundingBox],
) -> (Vec<DeviceReport>, Vec<BoundingBox>) {
    let mut reports: Vec<DeviceReport> = devices
        .iter()
        .map(|d| DeviceReport {
            device: *d,
            batteries: Vec::new(),
            has_battery: false,
        })
        .collect();
    let mut unassigned = Vec::new();
    for b in batteries {
        let owner = devices
            .iter()
            .enumerate()
            .filter(|(_, d)| d.contains_center_of(b))
            .min_by(|(_, x), (_, y)| {
                x.area()
                    .total_cmp(&y.area())
                    .then_with(|| lexicographic(&x.sort_key(), &y.sort_key()))
            })
            .map(|(i, _)| i);
        match owner {
            Some(i) => {
                reports[i].batteries.push(*b);
                reports[i].has_battery = true;
            }
            None => unassigned.push(*b),
        }
    }
    (reports, unassigned)
}

/// Merges boxes whose separation is at most `gap` px (each grown by `gap/2`)
/// into their union, repeating until nothing changes.
pub fn merge_neighbor_gt(boxes: &[BoundingBox], gap: f64) -> Vec<BoundingBox> {
    let mut clusters: Vec<BoundingBox> = boxes.to_vec();
    clusters.sort_by(|a, b| lexicographic(&a.sort_key(), &b.sort_key()));
    loop {
        let mut merged = false;
        let mut i = 0;
        while i < clusters.len() {
            let mut j = i + 1;
            while j < clusters.len() {
                if clusters[i].expanded(0.5 * gap).intersects(&clusters[j].expanded(0.5 * gap)) {
                    let other = clusters.swap_remove(j);
                    clusters[i] = clusters[i].union(&other);
                    merged = true;
                    j = i + 1;
                } else {
                    j += 1;
                }
            }
            i += 1;
        }
        if !merged {
            break;
        }
    }
    clusters.sort_by(|a, b| lexicographic(&a.sort_key(), &b.sort_key()));
    clusters
}

/// Cluster-level recall: a merged ground-truth cluster counts as found when
/// any prediction centre falls inside it. `1.0` with no ground truth.
pub fn modified_recall(preds: &[BoundingBox], gt: &[BoundingBox], gap: f64) -> f64 {
    let (hit, total) = cluster_hits(preds, gt, gap);
    if total == 0 {
        1.0
    } else {
        hit as f64 / total as f64
    }
}

fn cluster_hits(preds: &[BoundingBox], gt: &[BoundingBox], gap: f64) -> (usize, usize) {
    let clusters = merge_neighbor_gt(gt, gap);
    let hit = clusters
        .iter()
        .filter(|c| preds.iter().any(|p| c.contains_center_of(p)))
        .count();
    (hit, clusters.len())
}

/// Detection counts and average precision at one IoU threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrSummary {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub ap: f64,
}

/// Greedy matching result for one image: per prediction `(score, is_tp)`.
fn greedy_match(preds: &[BoundingBox], gt: &[BoundingBox], iou_threshold: f64) -> Vec<(BoundingBox, bool)> {
    let mut order: Vec<BoundingBox> = preds.to_vec();
    order.sort_by(score_order);
    let mut gts: Vec<BoundingBox> = gt.to_vec();
    gts.sort_by(|a, b| lexicographic(&a.sort_key(), &b.sort_key()));
    let mut taken = vec![false; gts.len()];
    order
        .into_iter()
        .map(|p| {
            let best = gts
                .iter()
                .enumerate()
                .filter(|(i, _)| !taken[*i])
                .map(|(i, g)| (i, p.iou(g)))
                .filter(|(_, iou)| *iou >= iou_threshold)
                .fold(None::<(usize, f64)>, |acc, cur| match acc {
                    Some(a) if a.1 >= cur.1 => Some(a),
                    _ => Some(cur),
                });
            match best {
                Some((i, _)) => {
                    taken[i] = true;
                    (p, true)
                }
                None => (p, false),
            }
        })
        .collect()
}

fn summarize(mut matches: Vec<(BoundingBox, bool)>, n_gt: usize) -> PrSummary {
    matches.sort_by(|a, b| score_order(&a.0, &b.0));
    let tp = matches.iter().filter(|m| m.1).count();
    let fp = matches.len() - tp;
    let fn_ = n_gt - tp;
    let precision = if matches.is_empty() { 1.0 } else { tp as f64 / matches.len() as f64 };
    let recall = if n_gt == 0 { 1.0 } else { tp as f64 / n_gt as f64 };
    let ap = if n_gt == 0 {
        if matches.is_empty() { 1.0 } else { 0.0 }
    } else {
        all_point_ap(&matches, n_gt)
    };
    PrSummary {
        tp,
        fp,
        fn_,
        precision,
        recall,
        ap,
    }
}

fn all_point_ap(ranked: &[(BoundingBox, bool)], n_gt: usize) -> f64 {
    let mut curve = Vec::with_capacity(ranked.len());
    let mut tp = 0usize;
    for (k, (_, hit)) in ranked.iter().enumerate() {
        tp += *hit as usize;
        curve.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
    }
    // precision envelope from the right
    for k in (0..curve.len().saturating_sub(1)).rev() {
        curve[k].1 = curve[k].1.max(curve[k + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in curve {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    ap
}

/// Greedy matching in descending score order, one ground truth per
/// prediction, IoU at or above the threshold counts as a hit. With no
/// predictions precision is `1.0`; with no ground truth recall is `1.0`.
pub fn precision_recall_ap(preds: &[BoundingBox], gt: &[BoundingBox], iou_threshold: f64) -> PrSummary {
    summarize(greedy_match(preds, gt, iou_threshold), gt.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub recall: f64,
    pub precision: f64,
    pub modified_recall: f64,
    pub ap50: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: BTreeMap<BatteryClass, ClassMetrics>,
    /// Pooled counts over all classes; `ap50` is the mean of per-class AP
    /// over classes that occur in either set.
    pub aggregate: ClassMetrics,
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,recall,precision,modified_recall,ap50\n");
        let row = |name: &str, m: &ClassMetrics| {
            format!("{name},{},{},{},{}\n", m.recall, m.precision, m.modified_recall, m.ap50)
        };
        for (c, m) in &self.per_class {
            out += &row(c.name(), m);
        }
        out += &row("all", &self.aggregate);
        out
    }
}

/// Battery metrics over a set of frames; `frames` pairs predictions with
/// ground truth per frame.
pub fn evaluate(
    frames: &[(Vec<BoundingBox>, Vec<BoundingBox>)],
    gap: f64,
    iou_threshold: f64,
) -> MetricsReport {
    let mut per_class = BTreeMap::new();
    let mut pooled = Vec::new();
    let (mut pooled_gt, mut hit, mut clusters) = (0, 0, 0);
    let mut aps = Vec::new();
    for class in BatteryClass::ALL {
        let label = Label::battery(class);
        let mut matches = Vec::new();
        let (mut n_gt, mut c_hit, mut c_total, mut n_pred) = (0, 0, 0, 0);
        for (preds, gt) in frames {
            let p: Vec<_> = preds.iter().copied().filter(|b| b.label == label).collect();
            let g: Vec<_> = gt.iter().copied().filter(|b| b.label == label).collect();
            n_gt += g.len();
            n_pred += p.len();
            matches.extend(greedy_match(&p, &g, iou_threshold));
            let (h, t) = cluster_hits(&p, &g, gap);
            c_hit += h;
            c_total += t;
        }
        let s = summarize(matches.clone(), n_gt);
        if n_gt + n_pred > 0 {
            aps.push(s.ap);
        }
        per_class.insert(
            class,
            ClassMetrics {
                recall: s.recall,
                precision: s.precision,
                modified_recall: if c_total == 0 { 1.0 } else { c_hit as f64 / c_total as f64 },
                ap50: s.ap,
            },
        );
        pooled.extend(matches);
        pooled_gt += n_gt;
        hit += c_hit;
        clusters += c_total;
    }
    let all = summarize(pooled, pooled_gt);
    let aggregate = ClassMetrics {
        recall: all.recall,
        precision: all.precision,
        modified_recall: if clusters == 0 { 1.0 } else { hit as f64 / clusters as f64 },
        ap50: if aps.is_empty() { 1.0 } else { aps.iter().sum::<f64>() / aps.len() as f64 },
    };
    MetricsReport {
        per_class,
        aggregate,
    }
}

/// Detector output for one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub frame_index: u64,
    pub origin_mm: f64,
    pub mm_per_px: f64,
    pub frame_width_px: usize,
    pub frame_height_px: usize,
    pub devices: Vec<BoundingBox>,
    pub batteries: Vec<BoundingBox>,
    pub reports: Vec<DeviceReport>,
    pub unassigned: Vec<BoundingBox>,
}

impl DetectionRecord {
    pub fn new(
        window: &FrameWindow,
        mm_per_px: f64,
        size: (usize, usize),
        devices: Vec<BoundingBox>,
        batteries: Vec<BoundingBox>,
    ) -> Self {
        let (reports, unassigned) = match_batteries_to_devices(&batteries, &devices);
        Self {
            frame_index: window.frame_index,
            origin_mm: window.origin_mm,
            mm_per_px,
            frame_width_px: size.0,
            frame_height_px: size.1,
            devices,
            batteries,
            reports,
            unassigned,
        }
    }
}

/// Reads a JSON file holding one record or an array of records.
pub fn read_records(path: &Path) -> Result<Vec<DetectionRecord>, DetectionError> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        Many(Vec<DetectionRecord>),
        One(DetectionRecord),
    }
    let text = std::fs::read_to_string(path)?;
    match serde_json::from_str(&text) {
        Ok(OneOrMany::Many(v)) => Ok(v),
        Ok(OneOrMany::One(r)) => Ok(vec![r]),
        Err(e) => Err(DetectionError::MalformedInput(format!("{}: {e}", path.display()))),
    }
}

/// Source of per-frame detections. Implementations may ignore pixels.
pub trait DetectionProvider {
    fn needs_pixels(&self) -> bool;

    fn detect(
        &mut self,
        window: &FrameWindow,
        frame: Option<&DualEnergyFrame>,
    ) -> Result<DetectionRecord, DetectionError>;
}

/// Ground truth straight from the scene.
#[derive(Debug, Clone)]
pub struct OracleDetector {
    scene: Scene,
    mm_per_px: f64,
    size: (usize, usize),
}

impl OracleDetector {
    pub fn new(scene: Scene, cfg: &ScannerConfig) -> Self {
        Self {
            scene,
            mm_per_px: cfg.frame_mm_per_px(),
            size: (
                cfg.width_px / cfg.bin_factor,
                cfg.frame_height_lines / cfg.bin_factor,
            ),
        }
    }

    pub fn record(&self, window: &FrameWindow) -> DetectionRecord {
        let (devices, batteries) = ground_truth_detections(&self.scene, window, self.mm_per_px, self.size.0);
        DetectionRecord::new(window, self.mm_per_px, self.size, devices, batteries)
    }
}

impl DetectionProvider for OracleDetector {
    fn needs_pixels(&self) -> bool {
        false
    }

    fn detect(
        &mut self,
        window: &FrameWindow,
        _frame: Option<&DualEnergyFrame>,
    ) -> Result<DetectionRecord, DetectionError> {
        Ok(self.record(window))
    }
}

/// Threshold-and-components detector over the HE channel.
#[derive(Debug, Clone, Default)]
pub struct StandInDetector {
    pub params: DetectionParams,
}

impl StandInDetector {
    pub fn new(params: DetectionParams) -> Self {
        Self { params }
    }

    pub fn detect_frame(&self, frame: &DualEnergyFrame) -> DetectionRecord {
        let masks = segment_devices(&frame.he, &self.params);
        let devices = masks
            .iter()
            .filter_map(|m| mask_to_bbox(m, Label::Device).ok())
            .collect();
        let batteries = detect_batteries(&frame.he, &masks, frame.mm_per_px, &self.params);
        DetectionRecord::new(
            &frame.window,
            frame.mm_per_px,
            (frame.he.width, frame.he.height),
            devices,
            batteries,
        )
    }
}

impl DetectionProvider for StandInDetector {
    fn needs_pixels(&self) -> bool {
        true
    }

    fn detect(
        &mut self,
        _window: &FrameWindow,
        frame: Option<&DualEnergyFrame>,
    ) -> Result<DetectionRecord, DetectionError> {
        frame.map(|f| self.detect_frame(f)).ok_or(DetectionError::MissingPixels)
    }
}
