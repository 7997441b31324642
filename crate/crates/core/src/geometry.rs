//! Lane-mask post-processing and vehicle lane assignment.
//!
//! The chain is: median blur → 8-connected components (area filtered) →
//! one straight boundary per component → label the three largest as
//! left/medium/right → place each detection's box center between them.
//!
//! Lines are parameterized as `x = m·y + b` in pixel coordinates because lane
//! boundaries seen from a following vehicle are close to vertical.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pgm;

/// Area threshold for lane components.
pub const DEFAULT_MIN_AREA: usize = 500;
pub const DEFAULT_MEDIAN_KERNEL: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("image dimensions must be positive and match the pixel count ({width}x{height} vs {len} pixels)")]
    Dimensions { width: usize, height: usize, len: usize },
    #[error("median kernel must be odd and at least 3, got {0}")]
    EvenKernel(usize),
    #[error("median kernel {kernel} exceeds the smaller image side {limit}")]
    KernelTooLarge { kernel: usize, limit: usize },
    #[error("component spans a single row (y = {y}); no line can be fitted")]
    DegenerateComponent { y: u32 },
    #[error("invalid bounding box {0:?}")]
    InvalidBox(BoundingBox),
    #[error(transparent)]
    Pgm(#[from] pgm::PgmError),
}

/// 8-bit single-channel image, row-major. Nonzero pixels are lane pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(GeometryError::Dimensions {
                width,
                height,
                len: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        Self {
            width,
            height,
            pixels: vec![0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn count_nonzero(&self) -> usize {
        self.pixels.iter().filter(|&&p| p != 0).count()
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        pgm::encode_u8(self.width, self.height, &self.pixels)
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self, GeometryError> {
        let r = pgm::decode_u8(bytes)?;
        Self::new(r.width, r.height, r.data)
    }
}

/// Axis-aligned box in pixels covering columns `x_min..x_max` and rows
/// `y_min..y_max` (max exclusive).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

impl BoundingBox {
    pub fn new(x_min: u32, y_min: u32, x_max: u32, y_max: u32) -> Result<Self, GeometryError> {
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        if x_min >= x_max || y_min >= y_max {
            return Err(GeometryError::InvalidBox(b));
        }
        Ok(b)
    }

    pub fn width(&self) -> u32 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> u32 {
        self.y_max - self.y_min
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min as f64 + self.x_max as f64) / 2.0,
            (self.y_min as f64 + self.y_max as f64) / 2.0,
        )
    }

    pub fn is_valid(&self) -> bool {
        self.x_min < self.x_max && self.y_min < self.y_max
    }

    pub fn fits_within(&self, width: usize, height: usize) -> bool {
        self.is_valid() && self.x_max as usize <= width && self.y_max as usize <= height
    }
}

/// One 8-connected blob of lane pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    /// `(x, y)` pixel coordinates in row-major scan order.
    pub pixels: Vec<(u32, u32)>,
}

impl Component {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }
}

/// Lane boundary `x = m·y + b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaneLine {
    pub m: f64,
    pub b: f64,
    pub source_area: usize,
}

impl LaneLine {
    pub fn x_at(&self, y: f64) -> f64 {
        self.m * y + self.b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaneSet {
    pub left: LaneLine,
    pub medium: LaneLine,
    pub right: LaneLine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaneAssignment {
    Left,
    Right,
    Outside,
    Unknown,
}

impl LaneAssignment {
    pub fn as_str(&self) -> &'static str {
        match self {
            LaneAssignment::Left => "left",
            LaneAssignment::Right => "right",
            LaneAssignment::Outside => "outside",
            LaneAssignment::Unknown => "unknown",
        }
    }
}

impl std::fmt::Display for LaneAssignment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Median filter with a `kernel × kernel` window; borders replicate the edge
/// pixels.
pub fn median_blur(img: &GrayImage, kernel: usize) -> Result<GrayImage, GeometryError> {
    if kernel < 3 || kernel.is_multiple_of(2) {
        return Err(GeometryError::EvenKernel(kernel));
    }
    let limit = img.width.min(img.height);
    if kernel > limit {
        return Err(GeometryError::KernelTooLarge { kernel, limit });
    }
    match two_levels(img) {
        Some((lo, hi)) => Ok(median_two_level(img, kernel, lo, hi)),
        None => Ok(median_general(img, kernel)),
    }
}

/// Returns the two values of an image holding at most two distinct values.
fn two_levels(img: &GrayImage) -> Option<(u8, u8)> {
    let first = img.pixels[0];
    let mut second = None;
    for &p in &img.pixels {
        if p != first {
            match second {
                None => second = Some(p),
                Some(s) if s != p => return None,
                _ => {}
            }
        }
    }
    let second = second.unwrap_or(first);
    Some((first.min(second), first.max(second)))
}

/// For two-valued images the median is `hi` exactly when more than half the
/// window is `hi`, so a padded summed-area table gives each window in O(1).
fn median_two_level(img: &GrayImage, kernel: usize, lo: u8, hi: u8) -> GrayImage {
    let r = kernel / 2;
    let (w, h) = (img.width, img.height);
    let pw = w + 2 * r;
    let ph = h + 2 * r;
    // sat[(y)*(pw+1) + x] = count of hi pixels in padded[0..y, 0..x]
    let mut sat = vec![0u32; (pw + 1) * (ph + 1)];
    for py in 0..ph {
        let sy = py.saturating_sub(r).min(h - 1);
        let mut row_sum = 0u32;
        for px in 0..pw {
            let sx = px.saturating_sub(r).min(w - 1);
            row_sum += u32::from(img.pixels[sy * w + sx] == hi && hi != lo);
            sat[(py + 1) * (pw + 1) + px + 1] = sat[py * (pw + 1) + px + 1] + row_sum;
        }
    }
    let half = (kernel * kernel / 2) as u32;
    let mut out = vec![lo; w * h];
    for y in 0..h {
        for x in 0..w {
            // Window in padded coordinates is [x, x+kernel) × [y, y+kernel).
            let a = sat[y * (pw + 1) + x];
            let b = sat[y * (pw + 1) + x + kernel];
            let c = sat[(y + kernel) * (pw + 1) + x];
            let d = sat[(y + kernel) * (pw + 1) + x + kernel];
            if d + a - b - c > half {
                out[y * w + x] = hi;
            }
        }
    }
    GrayImage {
        width: w,
        height: h,
        pixels: out,
    }
}

fn median_general(img: &GrayImage, kernel: usize) -> GrayImage {
    let r = kernel as isize / 2;
    let (w, h) = (img.width as isize, img.height as isize);
    let mut window = Vec::with_capacity(kernel * kernel);
    let mid = kernel * kernel / 2;
    let mut out = Vec::with_capacity(img.pixels.len());
    for y in 0..h {
        for x in 0..w {
            window.clear();
            for dy in -r..=r {
                let sy = (y + dy).clamp(0, h - 1) as usize;
                for dx in -r..=r {
                    let sx = (x + dx).clamp(0, w - 1) as usize;
                    window.push(img.pixels[sy * img.width + sx]);
                }
            }
            let (_, m, _) = window.select_nth_unstable(mid);
            out.push(*m);
        }
    }
    GrayImage {
        width: img.width,
        height: img.height,
        pixels: out,
    }
}

/// 8-connected components of nonzero pixels with `area >= min_area`, largest
/// first; equal areas are ordered by their first pixel in scan order.
pub fn connected_components(img: &GrayImage, min_area: usize) -> Vec<Component> {
    let (w, h) = (img.width, img.height);
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    let mut frontier = VecDeque::new();
    for start in 0..w * h {
        if seen[start] || img.pixels[start] == 0 {
            continue;
        }
        seen[start] = true;
        frontier.push_back(start);
        let mut members = Vec::new();
        while let Some(i) = frontier.pop_front() {
            members.push(i);
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if !seen[j] && img.pixels[j] != 0 {
                        seen[j] = true;
                        frontier.push_back(j);
                    }
                }
            }
        }
        if members.len() >= min_area {
            members.sort_unstable();
            out.push(Component {
                pixels: members
                    .into_iter()
                    .map(|i| ((i % w) as u32, (i / w) as u32))
                    .collect(),
            });
        }
    }
    // Components were discovered in scan order of their first pixel, so a
    // stable sort by area keeps the tie order.
    out.sort_by_key(|c| std::cmp::Reverse(c.area()));
    out
}

/// Fits the line through the mean x of the component's topmost and
/// bottommost rows.
pub fn fit_lane_line(c: &Component) -> Result<LaneLine, GeometryError> {
    let first = c.pixels.first().ok_or(GeometryError::DegenerateComponent { y: 0 })?;
    let (mut y_min, mut y_max) = (first.1, first.1);
    for &(_, y) in &c.pixels {
        y_min = y_min.min(y);
        y_max = y_max.max(y);
    }
    if y_min == y_max {
        return Err(GeometryError::DegenerateComponent { y: y_min });
    }
    let mean_x_at = |row: u32| {
        let (sum, n) = c
            .pixels
            .iter()
            .filter(|p| p.1 == row)
            .fold((0.0, 0usize), |(s, n), p| (s + p.0 as f64, n + 1));
        sum / n as f64
    };
    let x_top = mean_x_at(y_min);
    let x_bot = mean_x_at(y_max);
    let m = (x_bot - x_top) / (y_max - y_min) as f64;
    let b = x_top - m * y_min as f64;
    Ok(LaneLine {
        m,
        b,
        source_area: c.area(),
    })
}

/// Keeps the three lines with the largest source area and orders them by
/// their x at the bottom image row. Fewer than three lines, or coincident
/// bottom positions, give `None` (lanes unknown).
pub fn label_lanes(lines: &[LaneLine], image_height: usize) -> Option<LaneSet> {
    if lines.len() < 3 {
        return None;
    }
    let mut by_area = lines.to_vec();
    by_area.sort_by_key(|l| std::cmp::Reverse(l.source_area));
    by_area.truncate(3);
    let y_bottom = image_height.saturating_sub(1) as f64;
    by_area.sort_by(|a, b| a.x_at(y_bottom).total_cmp(&b.x_at(y_bottom)));
    let [left, medium, right] = [by_area[0], by_area[1], by_area[2]];
    if !(left.x_at(y_bottom) < medium.x_at(y_bottom) && medium.x_at(y_bottom) < right.x_at(y_bottom)) {
        return None;
    }
    Some(LaneSet {
        left,
        medium,
        right,
    })
}

/// Places the box center between the lane boundaries evaluated at the
/// center's row. A center exactly on a boundary belongs to the lane on the
/// boundary's right.
pub fn assign_lane(bbox: &BoundingBox, lanes: &LaneSet) -> LaneAssignment {
    let (xc, yc) = bbox.center();
    let x_left = lanes.left.x_at(yc);
    let x_medium = lanes.medium.x_at(yc);
    let x_right = lanes.right.x_at(yc);
    if x_left <= xc && xc < x_medium {
        LaneAssignment::Left
    } else if x_medium <= xc && xc < x_right {
        LaneAssignment::Right
    } else {
        LaneAssignment::Outside
    }
}

/// Tunables of the lane chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LaneParams {
    pub median_kernel: usize,
    pub min_area: usize,
}

impl Default for LaneParams {
    fn default() -> Self {
        Self {
            median_kernel: DEFAULT_MEDIAN_KERNEL,
            min_area: DEFAULT_MIN_AREA,
        }
    }
}

/// Runs the whole chain on a lane mask. Single-row components are skipped.
pub fn detect_lanes(mask: &GrayImage, params: &LaneParams) -> Result<Option<LaneSet>, GeometryError> {
    let smooth = median_blur(mask, params.median_kernel)?;
    let lines: Vec<LaneLine> = connected_components(&smooth, params.min_area)
        .iter()
        .filter_map(|c| fit_lane_line(c).ok())
        .collect();
    Ok(label_lanes(&lines, mask.height))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn img(w: usize, h: usize, on: &[(usize, usize)]) -> GrayImage {
        let mut g = GrayImage::zeros(w, h);
        for &(x, y) in on {
            g.set(x, y, 255);
        }
        g
    }

    fn vertical(x: f64, area: usize) -> LaneLine {
        LaneLine {
            m: 0.0,
            b: x,
            source_area: area,
        }
    }

    #[test]
    fn median_of_constant_is_identity() {
        let g = GrayImage::new(6, 5, vec![7; 30]).unwrap();
        assert_eq!(median_blur(&g, 3).unwrap(), g);
    }

    #[test]
    fn median_removes_salt() {
        let g = img(5, 5, &[(2, 2)]);
        assert_eq!(median_blur(&g, 3).unwrap().count_nonzero(), 0);
    }

    #[test]
    fn median_erases_one_pixel_line() {
        // Each window holds at most 3 of 9 line pixels, so every median is 0.
        let g = img(5, 5, &[(2, 0), (2, 1), (2, 2), (2, 3), (2, 4)]);
        assert_eq!(median_blur(&g, 3).unwrap().count_nonzero(), 0);
    }

    #[test]
    fn median_keeps_two_pixel_line() {
        let on: Vec<_> = (0..6).flat_map(|y| [(2, y), (3, y)]).collect();
        let g = img(6, 6, &on);
        assert_eq!(median_blur(&g, 3).unwrap(), g);
    }

    #[test]
    fn median_kernel_errors() {
        let g = GrayImage::zeros(4, 4);
        assert_eq!(median_blur(&g, 4), Err(GeometryError::EvenKernel(4)));
        assert_eq!(median_blur(&g, 1), Err(GeometryError::EvenKernel(1)));
        assert_eq!(
            median_blur(&g, 5),
            Err(GeometryError::KernelTooLarge { kernel: 5, limit: 4 })
        );
    }

    #[test]
    fn empty_image_has_no_components() {
        assert!(connected_components(&GrayImage::zeros(8, 8), 1).is_empty());
    }

    #[test]
    fn area_threshold_filters_small_blobs() {
        // 30x20 = 600 and 20x20 = 400 pixel rectangles.
        let mut on = Vec::new();
        for y in 0..20 {
            for x in 0..30 {
                on.push((x, y));
            }
            for x in 50..70 {
                on.push((x, y));
            }
        }
        let comps = connected_components(&img(80, 30, &on), DEFAULT_MIN_AREA);
        assert_eq!(comps.len(), 1);
        assert_eq!(comps[0].area(), 600);
    }

    #[test]
    fn diagonal_chain_is_one_component() {
        let on: Vec<_> = (0..10).map(|i| (i, i)).collect();
        let comps = connected_components(&img(10, 10, &on), 1);
        assert_eq!(comps.len(), 1);
        assert_eq!(comps[0].area(), 10);
    }

    #[test]
    fn equal_areas_order_by_first_pixel() {
        let g = img(10, 10, &[(8, 1), (8, 2), (1, 5), (1, 6)]);
        let comps = connected_components(&g, 1);
        assert_eq!(comps[0].pixels[0], (8, 1));
        assert_eq!(comps[1].pixels[0], (1, 5));
    }

    #[test]
    fn two_point_fit() {
        let c = Component {
            pixels: vec![(10, 0), (20, 100)],
        };
        let l = fit_lane_line(&c).unwrap();
        assert!((l.m - 0.1).abs() < 1e-12 && (l.b - 10.0).abs() < 1e-12);
    }

    #[test]
    fn vertical_fit() {
        let c = Component {
            pixels: (0..100).map(|y| (50, y)).collect(),
        };
        let l = fit_lane_line(&c).unwrap();
        assert_eq!((l.m, l.b), (0.0, 50.0));
    }

    #[test]
    fn horizontal_blob_is_degenerate() {
        let c = Component {
            pixels: (0..10).map(|x| (x, 4)).collect(),
        };
        assert_eq!(fit_lane_line(&c), Err(GeometryError::DegenerateComponent { y: 4 }));
    }

    #[test]
    fn rasterized_line_is_recovered() {
        // Oracle: stamp a 2 px stroke along x = 0.25 y + 40 for y in [100, 400].
        let mut g = GrayImage::zeros(200, 450);
        for y in 100..=400usize {
            let x = (0.25 * y as f64 + 40.0).floor() as usize;
            g.set(x, y, 255);
            g.set(x + 1, y, 255);
        }
        let comps = connected_components(&median_blur(&g, 3).unwrap(), 1);
        assert_eq!(comps.len(), 1);
        let l = fit_lane_line(&comps[0]).unwrap();
        assert!((l.m - 0.25).abs() <= 0.02, "m = {}", l.m);
        assert!((l.b - 40.0).abs() <= 3.0, "b = {}", l.b);
    }

    #[test]
    fn three_lines_are_sorted() {
        let s = label_lanes(&[vertical(300.0, 900), vertical(100.0, 900), vertical(200.0, 900)], 480)
            .unwrap();
        assert_eq!((s.left.b, s.medium.b, s.right.b), (100.0, 200.0, 300.0));
    }

    #[test]
    fn smallest_of_four_is_dropped() {
        let lines = [
            vertical(100.0, 800),
            vertical(150.0, 510),
            vertical(200.0, 900),
            vertical(300.0, 700),
        ];
        let s = label_lanes(&lines, 480).unwrap();
        assert_eq!((s.left.b, s.medium.b, s.right.b), (100.0, 200.0, 300.0));
    }

    #[test]
    fn two_lines_are_unknown() {
        assert!(label_lanes(&[vertical(1.0, 600), vertical(2.0, 600)], 480).is_none());
    }

    fn lanes_100_200_300() -> LaneSet {
        label_lanes(&[vertical(100.0, 1), vertical(200.0, 1), vertical(300.0, 1)], 480).unwrap()
    }

    fn bbox_centered(xc: u32, yc: u32) -> BoundingBox {
        BoundingBox::new(xc - 10, yc - 10, xc + 10, yc + 10).unwrap()
    }

    #[test]
    fn assignment_examples() {
        let lanes = lanes_100_200_300();
        assert_eq!(assign_lane(&bbox_centered(150, 240), &lanes), LaneAssignment::Left);
        assert_eq!(assign_lane(&bbox_centered(250, 240), &lanes), LaneAssignment::Right);
        assert_eq!(assign_lane(&bbox_centered(350, 240), &lanes), LaneAssignment::Outside);
        assert_eq!(assign_lane(&bbox_centered(50, 240), &lanes), LaneAssignment::Outside);
    }

    #[test]
    fn boundary_ties_go_right() {
        let lanes = lanes_100_200_300();
        assert_eq!(assign_lane(&bbox_centered(100, 240), &lanes), LaneAssignment::Left);
        assert_eq!(assign_lane(&bbox_centered(200, 240), &lanes), LaneAssignment::Right);
        assert_eq!(assign_lane(&bbox_centered(300, 240), &lanes), LaneAssignment::Outside);
    }

    #[test]
    fn detect_lanes_on_constructed_mask() {
        let mut g = GrayImage::zeros(400, 300);
        for y in 0..300 {
            for x0 in [100usize, 200, 300] {
                g.set(x0, y, 255);
                g.set(x0 + 1, y, 255);
            }
        }
        let lanes = detect_lanes(&g, &LaneParams::default()).unwrap().unwrap();
        assert!((lanes.left.x_at(10.0) - 100.5).abs() < 1e-9);
        assert!((lanes.right.x_at(10.0) - 300.5).abs() < 1e-9);
    }

    fn small_image() -> impl Strategy<Value = GrayImage> {
        (3usize..12, 3usize..12).prop_flat_map(|(w, h)| {
            proptest::collection::vec(any::<u8>(), w * h)
                .prop_map(move |p| GrayImage::new(w, h, p).unwrap())
        })
    }

    fn binary_image() -> impl Strategy<Value = GrayImage> {
        (3usize..16, 3usize..16).prop_flat_map(|(w, h)| {
            proptest::collection::vec(prop_oneof![Just(0u8), Just(255u8)], w * h)
                .prop_map(move |p| GrayImage::new(w, h, p).unwrap())
        })
    }

    fn neighborhood(g: &GrayImage, x: usize, y: usize, r: isize) -> Vec<u8> {
        let mut v = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                let sx = (x as isize + dx).clamp(0, g.width as isize - 1) as usize;
                let sy = (y as isize + dy).clamp(0, g.height as isize - 1) as usize;
                v.push(g.get(sx, sy));
            }
        }
        v
    }

    proptest! {
        #[test]
        fn median_output_is_a_neighbor_value(g in small_image()) {
            let out = median_blur(&g, 3).unwrap();
            for y in 0..g.height {
                for x in 0..g.width {
                    let mut n = neighborhood(&g, x, y, 1);
                    prop_assert!(n.contains(&out.get(x, y)));
                    n.sort_unstable();
                    prop_assert_eq!(n[4], out.get(x, y));
                }
            }
        }

        #[test]
        fn two_level_fast_path_matches_sorting(g in binary_image(), k in prop_oneof![Just(3usize), Just(5usize)]) {
            prop_assume!(k <= g.width.min(g.height));
            prop_assert_eq!(median_blur(&g, k).unwrap(), median_general(&g, k));
        }

        #[test]
        fn components_partition_kept_pixels(g in binary_image(), min_area in 1usize..6) {
            let comps = connected_components(&g, min_area);
            let mut owner = vec![usize::MAX; g.width * g.height];
            for (ci, c) in comps.iter().enumerate() {
                prop_assert!(c.area() >= min_area);
                for &(x, y) in &c.pixels {
                    let i = y as usize * g.width + x as usize;
                    prop_assert_eq!(owner[i], usize::MAX, "pixel owned twice");
                    prop_assert!(g.pixels[i] != 0);
                    owner[i] = ci;
                }
            }
            // No kept pixel touches a kept pixel of another component.
            for i in 0..owner.len() {
                if owner[i] == usize::MAX { continue; }
                let (x, y) = ((i % g.width) as isize, (i / g.width) as isize);
                for dy in -1..=1isize {
                    for dx in -1..=1isize {
                        let (nx, ny) = (x + dx, y + dy);
                        if nx < 0 || ny < 0 || nx >= g.width as isize || ny >= g.height as isize { continue; }
                        let j = ny as usize * g.width + nx as usize;
                        prop_assert!(owner[j] == usize::MAX || owner[j] == owner[i]);
                    }
                }
            }
            let kept: usize = comps.iter().map(Component::area).sum();
            prop_assert_eq!(kept, owner.iter().filter(|&&o| o != usize::MAX).count());
            for pair in comps.windows(2) {
                prop_assert!(pair[0].area() >= pair[1].area());
            }
        }

        #[test]
        fn two_row_fit_is_exact(x_top in 0u32..500, x_bot in 0u32..500, y0 in 0u32..200, dy in 1u32..200) {
            let c = Component { pixels: vec![(x_top, y0), (x_bot, y0 + dy)] };
            let l = fit_lane_line(&c).unwrap();
            prop_assert!((l.x_at(y0 as f64) - x_top as f64).abs() < 1e-9);
            prop_assert!((l.x_at((y0 + dy) as f64) - x_bot as f64).abs() < 1e-9);
        }

        #[test]
        fn assignment_is_translation_invariant(
            xs in proptest::collection::btree_set(0i32..400, 3),
            m in -1.0f64..1.0,
            xc in 20u32..600, yc in 20u32..400, shift in 0u32..200,
        ) {
            let xs: Vec<i32> = xs.into_iter().collect();
            let line = |x: i32| LaneLine { m, b: x as f64, source_area: 1 };
            let lanes = LaneSet { left: line(xs[0]), medium: line(xs[1]), right: line(xs[2]) };
            let moved = LaneSet {
                left: line(xs[0] + shift as i32),
                medium: line(xs[1] + shift as i32),
                right: line(xs[2] + shift as i32),
            };
            let a = assign_lane(&bbox_centered(xc, yc), &lanes);
            let b = assign_lane(&bbox_centered(xc + shift, yc), &moved);
            prop_assert_eq!(a, b);
            prop_assert!(a != LaneAssignment::Unknown);
        }

        #[test]
        fn thick_two_level_masks_are_fixed_points(
            stripes in proptest::collection::btree_set(0usize..10, 1..4),
        ) {
            // Vertical stripes 4 px wide separated by at least 4 px.
            let mut g = GrayImage::zeros(90, 20);
            for s in &stripes {
                for y in 0..20 {
                    for x in s * 8..s * 8 + 4 {
                        g.set(x, y, 255);
                    }
                }
            }
            let once = median_blur(&g, 3).unwrap();
            prop_assert_eq!(&median_blur(&once, 3).unwrap(), &once);
        }
    }
}
