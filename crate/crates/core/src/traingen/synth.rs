//! Parametric garment templates draped on a fixed body proxy.
//!
//! Body frame: y up, z forward, waist at y = 0, wearer's left at +x.
//! Two-sheet garments put front panels in the plane z = +SHEET and back
//! panels in z = −SHEET, both unrotated (back panels are drafted as seen
//! from the front). The four-panel skirt is a square prism around the y axis.
//! Every stitched edge pair coincides in 3D up to flare.

use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::pattern::geometry::{self, apply, euler_matrix, point_in_polygon};
use crate::pattern::{drape_point, Curvature, GarmentSample, Panel, SewingPattern, Stitch};

/// Half the distance between front and back sheets.
pub const SHEET: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Skirt2p,
    Skirt4p,
    Tee,
    Tank,
    Pants,
    Dress,
    Jacket,
    WaistbandVariants,
}

impl Family {
    pub const ALL: [Family; 8] = [
        Family::Skirt2p,
        Family::Skirt4p,
        Family::Tee,
        Family::Tank,
        Family::Pants,
        Family::Dress,
        Family::Jacket,
        Family::WaistbandVariants,
    ];

    pub const SEEN: [Family; 6] = [
        Family::Skirt2p,
        Family::Skirt4p,
        Family::Tee,
        Family::Tank,
        Family::Pants,
        Family::Jacket,
    ];

    pub const UNSEEN: [Family; 2] = [Family::Dress, Family::WaistbandVariants];

    pub fn name(self) -> &'static str {
        match self {
            Family::Skirt2p => "skirt-2p",
            Family::Skirt4p => "skirt-4p",
            Family::Tee => "tee",
            Family::Tank => "tank",
            Family::Pants => "pants",
            Family::Dress => "dress",
            Family::Jacket => "jacket",
            Family::WaistbandVariants => "waistband-variants",
        }
    }

    pub fn from_name(name: &str) -> Option<Family> {
        Family::ALL.into_iter().find(|f| f.name() == name)
    }

    /// Panel classes in template order.
    pub fn classes(self) -> &'static [usize] {
        match self {
            Family::Skirt2p => &[0, 1],
            Family::Skirt4p => &[2, 3, 4, 5],
            Family::Tee => &[8, 9, 10, 11],
            Family::Tank => &[12, 13],
            Family::Pants => &[14, 15, 6, 7],
            Family::Dress => &[12, 13, 0, 1],
            Family::Jacket => &[16, 17, 18, 19, 20, 21, 22],
            Family::WaistbandVariants => &[0, 1, 6, 7],
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Family::from_name(s).ok_or_else(|| {
            let names: Vec<_> = Family::ALL.iter().map(|f| f.name()).collect();
            format!("unknown garment family `{s}` (expected one of {})", names.join(", "))
        })
    }
}

/// Parses a comma-separated family list; `seen`, `unseen` and `all` expand.
pub fn parse_families(list: &str) -> Result<Vec<Family>, String> {
    let mut out = Vec::new();
    for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match item {
            "all" => out.extend(Family::ALL),
            "seen" => out.extend(Family::SEEN),
            "unseen" => out.extend(Family::UNSEEN),
            name => out.push(name.parse()?),
        }
    }
    if out.is_empty() {
        return Err("empty family list".into());
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub family: Family,
    pub num_points: usize,
    /// Gaussian noise on every coordinate, centimetres.
    pub noise: f64,
    /// Relative half-width of every shape parameter's sampling range.
    pub variation: f64,
}

impl SyntheticSpec {
    pub fn new(family: Family, num_points: usize) -> Self {
        Self {
            family,
            num_points,
            noise: 0.3,
            variation: 0.08,
        }
    }
}

/// Panel as drafted: vertices CCW in the body frame of its placement.
struct Draft {
    class: usize,
    vertices: Vec<[f64; 2]>,
    curves: Vec<Option<Curvature>>,
    rotation: [f64; 3],
    translation: [f64; 3],
}

impl Draft {
    fn new(class: usize, vertices: Vec<[f64; 2]>) -> Self {
        let n = vertices.len();
        Self {
            class,
            vertices,
            curves: vec![None; n],
            rotation: [0.0; 3],
            translation: [0.0; 3],
        }
    }

    fn curve(mut self, edge: usize, c: Curvature) -> Self {
        self.curves[edge] = Some(c);
        self
    }

    fn at(mut self, rotation: [f64; 3], translation: [f64; 3]) -> Self {
        self.rotation = rotation;
        self.translation = translation;
        self
    }
}

/// Recentres a draft on its area centroid and starts the loop at the
/// bottom-left corner, the vertex with the smallest `x + y`. Returns the
/// panel and the drafted→final edge map.
fn finish(d: Draft) -> (Panel, Vec<usize>) {
    let mut panel = Panel {
        class_id: d.class,
        vertices: d.vertices,
        curvatures: d.curves,
        rotation: d.rotation,
        translation: d.translation,
    };
    let (_, c) = geometry::boundary(&panel);
    let shift = apply(&euler_matrix(panel.rotation), [c[0], c[1], 0.0]);
    for k in 0..3 {
        panel.translation[k] += shift[k];
    }
    for v in &mut panel.vertices {
        v[0] -= c[0];
        v[1] -= c[1];
    }
    let n = panel.vertices.len();
    let start = (0..n)
        .min_by(|&a, &b| {
            let (va, vb) = (panel.vertices[a], panel.vertices[b]);
            (va[0] + va[1]).total_cmp(&(vb[0] + vb[1]))
        })
        .unwrap_or(0);
    panel.vertices.rotate_left(start);
    panel.curvatures.rotate_left(start);
    let map = (0..n).map(|i| (i + n - start) % n).collect();
    (panel, map)
}

fn assemble(drafts: Vec<Draft>, seams: &[((usize, usize), (usize, usize))]) -> SewingPattern {
    let (panels, maps): (Vec<_>, Vec<_>) = drafts.into_iter().map(finish).unzip();
    let mut stitches: Vec<Stitch> = seams
        .iter()
        .map(|&((pa, ea), (pb, eb))| Stitch::new((pa, maps[pa][ea]), (pb, maps[pb][eb])))
        .collect();
    stitches.sort();
    SewingPattern { panels, stitches }
}

struct Sampler<'r, R: Rng> {
    rng: &'r mut R,
    variation: f64,
}

impl<R: Rng> Sampler<'_, R> {
    /// `base` scaled by a uniform factor in `1 ± variation`.
    fn around(&mut self, base: f64) -> f64 {
        if self.variation <= 0.0 {
            return base;
        }
        base * (1.0 + self.rng.random_range(-self.variation..=self.variation))
    }
}

fn trapezoid(class: usize, bottom: f64, top: f64, y0: f64, y1: f64) -> Draft {
    Draft::new(
        class,
        vec![[-bottom / 2.0, y0], [bottom / 2.0, y0], [top / 2.0, y1], [-top / 2.0, y1]],
    )
}

fn sheet(front: bool) -> [f64; 3] {
    [0.0, 0.0, if front { SHEET } else { -SHEET }]
}

fn skirt_2p<R: Rng>(s: &mut Sampler<R>, top_y: f64, waist: f64) -> (Vec<Draft>, Vec<((usize, usize), (usize, usize))>) {
    let length = s.around(52.0);
    let hem = s.around(54.0).max(waist + 4.0);
    let drop = s.around(0.08);
    let front = trapezoid(0, hem, waist, top_y - length, top_y)
        .curve(0, [0.5, -drop])
        .at([0.0; 3], sheet(true));
    let back = trapezoid(1, hem, waist, top_y - length, top_y)
        .curve(0, [0.5, -drop * 0.5])
        .at([0.0; 3], sheet(false));
    // Edges: 0 hem, 1 side +x, 2 waist, 3 side −x.
    (vec![front, back], vec![((0, 1), (1, 1)), ((0, 3), (1, 3))])
}

fn skirt_4p<R: Rng>(s: &mut Sampler<R>) -> SewingPattern {
    let top = s.around(19.0);
    let bottom = s.around(28.0);
    let length = s.around(58.0);
    let drop = s.around(0.06);
    let dist = top / 2.0;
    let ring = [(2, 45.0), (3, -45.0), (4, 135.0), (5, -135.0)];
    let drafts = ring
        .iter()
        .map(|&(class, phi): &(usize, f64)| {
            let r = phi.to_radians();
            trapezoid(class, bottom, top, -length, 0.0)
                .curve(0, [0.5, -drop])
                .at([0.0, phi, 0.0], [dist * r.sin(), 0.0, dist * r.cos()])
        })
        .collect();
    // Local +x points toward increasing azimuth, so going round the ring
    // each panel's side +x (edge 1) meets the next panel's side −x (edge 3).
    assemble(drafts, &[((1, 1), (0, 3)), ((0, 1), (2, 3)), ((2, 1), (3, 3)), ((3, 1), (1, 3))])
}

/// Torso outline with shoulders: hem at `y0`, armpit at `ya`, shoulder line
/// at `ys`. Edges: 0 hem, 1 side +x, 2 armhole +x, 3 neckline, 4 armhole −x,
/// 5 side −x.
fn torso(class: usize, width: f64, shoulder: f64, y0: f64, ya: f64, ys: f64) -> Draft {
    Draft::new(
        class,
        vec![
            [-width / 2.0, y0],
            [width / 2.0, y0],
            [width / 2.0, ya],
            [shoulder / 2.0, ys],
            [-shoulder / 2.0, ys],
            [-width / 2.0, ya],
        ],
    )
}

/// A sleeve whose inner edge spans the armhole chord `a → b` (armpit to
/// shoulder) in the front sheet. Returns the draft and its inner edge index.
fn sleeve(class: usize, a: [f64; 2], b: [f64; 2], length: f64, cuff: f64, left: bool) -> (Draft, usize) {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let h = (dx * dx + dy * dy).sqrt();
    let alpha = (-dx).atan2(dy).to_degrees();
    let mid = [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0, SHEET];
    let (verts, inner) = if left {
        (vec![[0.0, -h / 2.0], [length, -cuff / 2.0], [length, cuff / 2.0], [0.0, h / 2.0]], 3)
    } else {
        (vec![[0.0, -h / 2.0], [0.0, h / 2.0], [-length, cuff / 2.0], [-length, -cuff / 2.0]], 0)
    };
    (Draft::new(class, verts).at([0.0, 0.0, alpha], mid), inner)
}

fn tee<R: Rng>(s: &mut Sampler<R>) -> SewingPattern {
    let width = s.around(48.0);
    let shoulder = width * s.around(0.8);
    let (y0, ya) = (-20.0, s.around(24.0));
    let ys = ya + s.around(17.0);
    let neck = s.around(0.12);
    let front = torso(8, width, shoulder, y0, ya, ys)
        .curve(3, [0.5, neck])
        .at([0.0; 3], sheet(true));
    let back = torso(9, width, shoulder, y0, ya, ys)
        .curve(3, [0.5, neck * 0.3])
        .at([0.0; 3], sheet(false));
    let (length, cuff) = (s.around(20.0), s.around(14.0));
    let (left, li) = sleeve(10, [width / 2.0, ya], [shoulder / 2.0, ys], length, cuff, true);
    let (right, ri) = sleeve(11, [-width / 2.0, ya], [-shoulder / 2.0, ys], length, cuff, false);
    assemble(
        vec![front, back, left, right],
        &[((0, 1), (1, 1)), ((0, 5), (1, 5)), ((0, 3), (1, 3)), ((2, li), (0, 2)), ((3, ri), (0, 4))],
    )
}

fn tank_drafts<R: Rng>(s: &mut Sampler<R>, y0: f64, width: f64) -> (Vec<Draft>, Vec<((usize, usize), (usize, usize))>) {
    let ya = y0 + s.around(36.0);
    let ys = ya + s.around(18.0);
    let strap = width * s.around(0.55);
    let scoop = s.around(0.18);
    let arm = s.around(0.2);
    let front = torso(12, width, strap, y0, ya, ys)
        .curve(2, [0.5, arm])
        .curve(3, [0.5, scoop])
        .curve(4, [0.5, arm])
        .at([0.0; 3], sheet(true));
    let back = torso(13, width, strap, y0, ya, ys)
        .curve(2, [0.5, arm])
        .curve(3, [0.5, scoop * 0.4])
        .curve(4, [0.5, arm])
        .at([0.0; 3], sheet(false));
    (vec![front, back], vec![((0, 1), (1, 1)), ((0, 5), (1, 5)), ((0, 3), (1, 3))])
}

fn tank<R: Rng>(s: &mut Sampler<R>) -> SewingPattern {
    let width = s.around(44.0);
    let (drafts, seams) = tank_drafts(s, -18.0, width);
    assemble(drafts, &seams)
}

fn dress<R: Rng>(s: &mut Sampler<R>) -> SewingPattern {
    let waist = s.around(38.0);
    let (mut drafts, mut seams) = tank_drafts(s, 0.0, waist);
    let (skirt, skirt_seams) = skirt_2p(s, 0.0, waist);
    drafts.extend(skirt);
    seams.extend(skirt_seams.iter().map(|&((a, ea), (b, eb))| ((a + 2, ea), (b + 2, eb))));
    // Tank hem (edge 0) onto skirt waist (edge 2), per sheet.
    seams.extend([((0, 0), (2, 2)), ((1, 0), (3, 2))]);
    assemble(drafts, &seams)
}

fn waistband(class: usize, width: f64, height: f64, front: bool) -> Draft {
    trapezoid(class, width, width, 0.0, height).at([0.0; 3], sheet(front))
}

fn waistband_variant<R: Rng>(s: &mut Sampler<R>) -> SewingPattern {
    let waist = s.around(38.0);
    let band = s.around(10.0);
    let (mut drafts, mut seams) = skirt_2p(s, 0.0, waist);
    drafts.push(waistband(6, waist, band, true));
    drafts.push(waistband(7, waist, band, false));
    // Band edges: 0 bottom, 1 side +x, 2 top, 3 side −x.
    seams.extend([((2, 0), (0, 2)), ((3, 0), (1, 2)), ((2, 1), (3, 1)), ((2, 3), (3, 3))]);
    assemble(drafts, &seams)
}

/// Both legs in one panel. Edges: 0 hem −x, 1 inseam −x, 2 inseam +x,
/// 3 hem +x, 4 outseam +x, 5 waist, 6 outseam −x.
fn pant(class: usize, hip: f64, gap: f64, leg: f64, rise: f64, length: f64, front: bool) -> Draft {
    let outer = gap / 2.0 + leg;
    Draft::new(
        class,
        vec![
            [-outer, -length],
            [-gap / 2.0, -length],
            [0.0, -rise],
            [gap / 2.0, -length],
            [outer, -length],
            [hip / 2.0, 0.0],
            [-hip / 2.0, 0.0],
        ],
    )
    .at([0.0; 3], sheet(front))
}

fn pants<R: Rng>(s: &mut Sampler<R>) -> SewingPattern {
    let hip = s.around(42.0);
    let (gap, leg) = (s.around(6.0), s.around(19.0));
    let (rise, length) = (s.around(24.0), s.around(46.0));
    let band = s.around(10.0);
    let drafts = vec![
        pant(14, hip, gap, leg, rise, length, true),
        pant(15, hip, gap, leg, rise, length, false),
        waistband(6, hip, band, true),
        waistband(7, hip, band, false),
    ];
    let seams = [
        ((0, 1), (1, 1)),
        ((0, 2), (1, 2)),
        ((0, 4), (1, 4)),
        ((0, 6), (1, 6)),
        ((0, 5), (2, 0)),
        ((1, 5), (3, 0)),
        ((2, 1), (3, 1)),
        ((2, 3), (3, 3)),
    ];
    assemble(drafts, &seams)
}

fn jacket<R: Rng>(s: &mut Sampler<R>) -> SewingPattern {
    let half = s.around(26.0);
    let shoulder = half * s.around(0.8);
    let neck = s.around(9.0);
    let (y0, ya) = (-22.0, s.around(24.0));
    let ys = ya + s.around(17.0);
    let yn = ys - s.around(9.0);
    let collar_h = s.around(10.0);
    let dip = 0.15;
    // Front halves. Left: 0 hem, 1 side, 2 armhole, 3 shoulder, 4 neck,
    // 5 centre. Right mirrors: 0 hem, 1 centre, 2 neck, 3 shoulder,
    // 4 armhole, 5 side.
    let fl = Draft::new(
        16,
        vec![[0.0, y0], [half, y0], [half, ya], [shoulder, ys], [neck, ys], [0.0, yn]],
    )
    .curve(4, [0.5, 0.2])
    .at([0.0; 3], sheet(true));
    let fr = Draft::new(
        17,
        vec![[-half, y0], [0.0, y0], [0.0, yn], [-neck, ys], [-shoulder, ys], [-half, ya]],
    )
    .curve(2, [0.5, 0.2])
    .at([0.0; 3], sheet(true));
    // Back: 0 hem, 1 side +x, 2 armhole +x, 3 shoulder +x, 4 neck,
    // 5 shoulder −x, 6 armhole −x, 7 side −x.
    let back = Draft::new(
        18,
        vec![
            [-half, y0],
            [half, y0],
            [half, ya],
            [shoulder, ys],
            [neck, ys],
            [-neck, ys],
            [-shoulder, ys],
            [-half, ya],
        ],
    )
    .curve(4, [0.5, dip])
    .at([0.0; 3], sheet(false));
    let (length, cuff) = (s.around(40.0), s.around(13.0));
    let (sl, li) = sleeve(19, [half, ya], [shoulder, ys], length, cuff, true);
    let (sr, ri) = sleeve(20, [-half, ya], [-shoulder, ys], length, cuff, false);
    // Collar: 0 bottom (follows the back neck dip), 1 side, 2 top, 3 side.
    let collar = trapezoid(21, 2.0 * neck, 2.0 * neck, ys, ys + collar_h)
        .curve(0, [0.5, -dip])
        .at([0.0; 3], sheet(false));
    let hood_w = s.around(30.0);
    let hood_h = s.around(32.0);
    let hood = trapezoid(22, 2.0 * neck, hood_w, ys + collar_h, ys + collar_h + hood_h)
        .curve(2, [0.5, -0.3])
        .at([0.0; 3], sheet(false));
    let seams = [
        ((0, 1), (2, 1)),
        ((0, 3), (2, 3)),
        ((1, 5), (2, 7)),
        ((1, 3), (2, 5)),
        ((0, 5), (1, 1)),
        ((3, li), (0, 2)),
        ((4, ri), (1, 4)),
        ((5, 0), (2, 4)),
        ((6, 0), (5, 2)),
    ];
    assemble(vec![fl, fr, back, sl, sr, collar, hood], &seams)
}

/// Ground-truth pattern of one garment.
pub fn generate_pattern<R: Rng>(family: Family, variation: f64, rng: &mut R) -> SewingPattern {
    let mut s = Sampler { rng, variation };
    match family {
        Family::Skirt2p => {
            let waist = s.around(38.0);
            let (drafts, seams) = skirt_2p(&mut s, 0.0, waist);
            assemble(drafts, &seams)
        }
        Family::Skirt4p => skirt_4p(&mut s),
        Family::Tee => tee(&mut s),
        Family::Tank => tank(&mut s),
        Family::Pants => pants(&mut s),
        Family::Dress => dress(&mut s),
        Family::Jacket => jacket(&mut s),
        Family::WaistbandVariants => waistband_variant(&mut s),
    }
}

/// Area-uniform surface points of the draped panels with Gaussian noise.
pub fn sample_surface<R: Rng>(pattern: &SewingPattern, count: usize, noise: f64, rng: &mut R) -> Vec<[f64; 3]> {
    let outlines: Vec<Vec<[f64; 2]>> = pattern.panels.iter().map(|p| p.outline(32)).collect();
    let areas: Vec<f64> = outlines.iter().map(|o| geometry::signed_area(o).abs()).collect();
    let total: f64 = areas.iter().sum();
    let normal = Normal::new(0.0, noise.max(0.0)).expect("finite sigma");
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let mut pick = rng.random_range(0.0..total);
        let mut i = 0;
        while i + 1 < areas.len() && pick >= areas[i] {
            pick -= areas[i];
            i += 1;
        }
        let outline = &outlines[i];
        let (lo, hi) = outline.iter().fold(([f64::MAX; 2], [f64::MIN; 2]), |(lo, hi), p| {
            ([lo[0].min(p[0]), lo[1].min(p[1])], [hi[0].max(p[0]), hi[1].max(p[1])])
        });
        let p = loop {
            let q = [rng.random_range(lo[0]..hi[0]), rng.random_range(lo[1]..hi[1])];
            if point_in_polygon(outline, q) {
                break q;
            }
        };
        let d = drape_point(&pattern.panels[i], p);
        out.push(if noise > 0.0 { d.map(|x| x + normal.sample(rng)) } else { d });
    }
    out
}

pub fn generate_sample<R: Rng>(spec: &SyntheticSpec, rng: &mut R) -> GarmentSample {
    let pattern = generate_pattern(spec.family, spec.variation, rng);
    let points = sample_surface(&pattern, spec.num_points, spec.noise, rng);
    GarmentSample {
        points,
        panel_class_set: pattern.class_set(),
        pattern,
        garment_class: spec.family.name().to_string(),
    }
}

/// `count` samples cycling through `families`, one derived seed per sample.
pub fn generate_dataset(families: &[Family], count: usize, num_points: usize, seed: u64) -> Vec<GarmentSample> {
    use rand::SeedableRng;
    (0..count)
        .map(|i| {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let family = families[i % families.len()];
            generate_sample(&SyntheticSpec::new(family, num_points), &mut rng)
        })
        .collect()
}

/// Classes appearing anywhere in `samples`.
pub fn covered_classes(samples: &[GarmentSample]) -> BTreeSet<usize> {
    samples.iter().flat_map(|s| s.panel_class_set.iter().copied()).collect()
}
