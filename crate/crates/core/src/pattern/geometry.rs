use super::{Curvature, Panel, PatternError};

/// Samples per edge used when a Bezier boundary is turned into a polygon.
pub const BOUNDARY_SAMPLES: usize = 32;

/// Control point of an edge from its chord-frame coordinates.
pub fn control_point(s: [f64; 2], e: [f64; 2], c: Curvature) -> [f64; 2] {
    let d = [e[0] - s[0], e[1] - s[1]];
    let normal = [-d[1], d[0]];
    [
        s[0] + c[0] * d[0] + c[1] * normal[0],
        s[1] + c[0] * d[1] + c[1] * normal[1],
    ]
}

/// Inverse of [`control_point`]; `None` for a zero-length chord.
pub fn curvature_of(s: [f64; 2], e: [f64; 2], ctrl: [f64; 2]) -> Option<Curvature> {
    let d = [e[0] - s[0], e[1] - s[1]];
    let len2 = d[0] * d[0] + d[1] * d[1];
    if len2 == 0.0 {
        return None;
    }
    let r = [ctrl[0] - s[0], ctrl[1] - s[1]];
    Some([
        (r[0] * d[0] + r[1] * d[1]) / len2,
        (-r[0] * d[1] + r[1] * d[0]) / len2,
    ])
}

/// `n` points of the quadratic Bezier from `s` to `e` at `t = i/(n-1)`.
pub fn sample_edge(s: [f64; 2], e: [f64; 2], curvature: Option<Curvature>, n: usize) -> Vec<[f64; 2]> {
    let n = n.max(2);
    let c = curvature.map(|c| control_point(s, e, c));
    (0..n)
        .map(|i| {
            if i == 0 {
                return s;
            }
            if i == n - 1 {
                return e;
            }
            let t = i as f64 / (n - 1) as f64;
            match c {
                None => [s[0] + t * (e[0] - s[0]), s[1] + t * (e[1] - s[1])],
                Some(c) => {
                    let (a, b, d) = ((1.0 - t) * (1.0 - t), 2.0 * t * (1.0 - t), t * t);
                    [a * s[0] + b * c[0] + d * e[0], a * s[1] + b * c[1] + d * e[1]]
                }
            }
        })
        .collect()
}

pub fn signed_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum::<f64>()
        / 2.0
}

/// Area centroid of a closed polygon; falls back to the vertex mean when the
/// area vanishes.
pub fn centroid(poly: &[[f64; 2]]) -> [f64; 2] {
    let n = poly.len();
    let area = signed_area(poly);
    if n == 0 {
        return [0.0, 0.0];
    }
    if area.abs() < 1e-12 {
        let sx: f64 = poly.iter().map(|p| p[0]).sum();
        let sy: f64 = poly.iter().map(|p| p[1]).sum();
        return [sx / n as f64, sy / n as f64];
    }
    let (mut cx, mut cy) = (0.0, 0.0);
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        let cross = a[0] * b[1] - b[0] * a[1];
        cx += (a[0] + b[0]) * cross;
        cy += (a[1] + b[1]) * cross;
    }
    [cx / (6.0 * area), cy / (6.0 * area)]
}

fn orient(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn on_segment(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> bool {
    p[0] >= a[0].min(b[0]) && p[0] <= a[0].max(b[0]) && p[1] >= a[1].min(b[1]) && p[1] <= a[1].max(b[1])
}

/// Whether closed segments `ab` and `cd` share a point.
pub fn segments_intersect(a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]) -> bool {
    let (d1, d2) = (orient(c, d, a), orient(c, d, b));
    let (d3, d4) = (orient(a, b, c), orient(a, b, d));
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    (d1 == 0.0 && on_segment(c, d, a))
        || (d2 == 0.0 && on_segment(c, d, b))
        || (d3 == 0.0 && on_segment(a, b, c))
        || (d4 == 0.0 && on_segment(a, b, d))
}

/// No repeated vertices and no two non-adjacent edges touching.
pub fn is_simple_polygon(poly: &[[f64; 2]]) -> bool {
    let n = poly.len();
    if n < 3 {
        return false;
    }
    for i in 0..n {
        if poly[i] == poly[(i + 1) % n] {
            return false;
        }
    }
    for i in 0..n {
        for j in i + 1..n {
            let adjacent = j == i + 1 || (i == 0 && j == n - 1);
            if adjacent {
                continue;
            }
            if segments_intersect(poly[i], poly[(i + 1) % n], poly[j], poly[(j + 1) % n]) {
                return false;
            }
        }
    }
    // Adjacent edges folding back onto each other.
    for i in 0..n {
        let (a, b, c) = (poly[i], poly[(i + 1) % n], poly[(i + 2) % n]);
        if orient(a, b, c) == 0.0 {
            let back = (c[0] - b[0]) * (a[0] - b[0]) + (c[1] - b[1]) * (a[1] - b[1]);
            if back > 0.0 {
                return false;
            }
        }
    }
    true
}

/// Even-odd point-in-polygon test.
pub fn point_in_polygon(poly: &[[f64; 2]], p: [f64; 2]) -> bool {
    let n = poly.len();
    let mut inside = false;
    let mut j = n.wrapping_sub(1);
    for i in 0..n {
        let (a, b) = (poly[i], poly[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
            if p[0] < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// Binary raster, row 0 at the top.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_probs(height: usize, width: usize, probs: &[f64], threshold: f64) -> Self {
        Self {
            height,
            width,
            data: probs.iter().map(|&p| p > threshold).collect(),
        }
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.width + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.width + c] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn to_values(&self) -> Vec<f64> {
        self.data.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect()
    }
}

/// Resolution and scale shared by every mask of a run. Masks are centred on
/// the panel centroid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskGrid {
    pub height: usize,
    pub width: usize,
    /// Centimetres per pixel.
    pub scale: f64,
}

impl MaskGrid {
    pub fn new(height: usize, width: usize, scale: f64) -> Self {
        Self { height, width, scale }
    }

    /// Half extents of the grid in centimetres.
    pub fn half_extent(&self) -> [f64; 2] {
        [self.width as f64 * self.scale / 2.0, self.height as f64 * self.scale / 2.0]
    }

    /// Centre of pixel `(r, c)` relative to the grid centre, in centimetres.
    pub fn pixel_center(&self, r: usize, c: usize) -> [f64; 2] {
        [
            (c as f64 + 0.5 - self.width as f64 / 2.0) * self.scale,
            (self.height as f64 / 2.0 - r as f64 - 0.5) * self.scale,
        ]
    }

    /// Fills pixels whose centres lie inside `poly` (coordinates relative to
    /// the grid centre) by even-odd scanlines.
    pub fn fill(&self, poly: &[[f64; 2]]) -> Mask {
        let mut mask = Mask::empty(self.height, self.width);
        let n = poly.len();
        let mut xs = Vec::new();
        for r in 0..self.height {
            let y = self.pixel_center(r, 0)[1];
            xs.clear();
            let mut j = n.wrapping_sub(1);
            for i in 0..n {
                let (a, b) = (poly[i], poly[j]);
                if (a[1] > y) != (b[1] > y) {
                    xs.push(a[0] + (y - a[1]) * (b[0] - a[0]) / (b[1] - a[1]));
                }
                j = i;
            }
            xs.sort_by(f64::total_cmp);
            for pair in xs.chunks_exact(2) {
                for c in 0..self.width {
                    let x = self.pixel_center(r, c)[0];
                    if x > pair[0] && x < pair[1] {
                        mask.set(r, c, true);
                    }
                }
            }
        }
        mask
    }
}

/// Dense boundary polygon and its area centroid.
pub fn boundary(panel: &Panel) -> (Vec<[f64; 2]>, [f64; 2]) {
    let outline = panel.outline(BOUNDARY_SAMPLES);
    let c = centroid(&outline);
    (outline, c)
}

/// Binary mask of `panel` centred on its centroid.
pub fn rasterize_panel(panel: &Panel, resolution: (usize, usize), scale: f64) -> Result<Mask, PatternError> {
    let grid = MaskGrid::new(resolution.0, resolution.1, scale);
    rasterize_on(panel, &grid)
}

pub fn rasterize_on(panel: &Panel, grid: &MaskGrid) -> Result<Mask, PatternError> {
    let (outline, c) = boundary(panel);
    let area_px = signed_area(&outline).abs() / (grid.scale * grid.scale);
    if !(area_px >= 4.0) {
        return Err(PatternError::DegeneratePanel { area_px });
    }
    let local: Vec<[f64; 2]> = outline.iter().map(|p| [p[0] - c[0], p[1] - c[1]]).collect();
    let [hx, hy] = grid.half_extent();
    let extent = local.iter().map(|p| (p[0].abs() / hx).max(p[1].abs() / hy)).fold(0.0, f64::max);
    if extent > 1.0 {
        let extent_cm = local.iter().map(|p| p[0].abs().max(p[1].abs())).fold(0.0, f64::max) * 2.0;
        return Err(PatternError::PanelOutOfBounds {
            height: grid.height,
            width: grid.width,
            scale: grid.scale,
            extent_cm,
        });
    }
    Ok(grid.fill(&local))
}

/// `Rx · Ry · Rz` for intrinsic X-Y-Z angles in degrees.
pub fn euler_matrix(deg: [f64; 3]) -> [[f64; 3]; 3] {
    let [x, y, z] = deg.map(f64::to_radians);
    let (sx, cx) = x.sin_cos();
    let (sy, cy) = y.sin_cos();
    let (sz, cz) = z.sin_cos();
    [
        [cy * cz, -cy * sz, sy],
        [sx * sy * cz + cx * sz, -sx * sy * sz + cx * cz, -sx * cy],
        [-cx * sy * cz + sx * sz, cx * sy * sz + sx * cz, cx * cy],
    ]
}

pub fn apply(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

/// Lifts a panel-local point to the body frame.
pub fn drape_point(panel: &Panel, p: [f64; 2]) -> [f64; 3] {
    let r = euler_matrix(panel.rotation);
    let q = apply(&r, [p[0], p[1], 0.0]);
    [
        q[0] + panel.translation[0],
        q[1] + panel.translation[1],
        q[2] + panel.translation[2],
    ]
}
