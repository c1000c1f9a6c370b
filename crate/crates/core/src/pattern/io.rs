//! Pattern JSON, `.xyz` point clouds, SVG layout and PGM mask dumps.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{class_index, violation, Panel, PatternError, SewingPattern, Stitch, PANEL_CLASSES};

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ClassField {
    Name(String),
    Index(usize),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PanelRecord {
    class: ClassField,
    vertices: Vec<[f64; 2]>,
    curvatures: Vec<Option<[f64; 2]>>,
    rotation: [f64; 3],
    translation: [f64; 3],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PatternRecord {
    panels: Vec<PanelRecord>,
    #[serde(default)]
    stitches: Vec<[[usize; 2]; 2]>,
}

fn parse_error(e: serde_json::Error) -> PatternError {
    PatternError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    }
}

pub fn pattern_to_json(pattern: &SewingPattern) -> String {
    let record = PatternRecord {
        panels: pattern
            .panels
            .iter()
            .map(|p| PanelRecord {
                class: match PANEL_CLASSES.get(p.class_id) {
                    Some(name) => ClassField::Name(name.to_string()),
                    None => ClassField::Index(p.class_id),
                },
                vertices: p.vertices.clone(),
                curvatures: p.curvatures.clone(),
                rotation: p.rotation,
                translation: p.translation,
            })
            .collect(),
        stitches: pattern
            .stitches
            .iter()
            .map(|s| [[s.a.0, s.a.1], [s.b.0, s.b.1]])
            .collect(),
    };
    serde_json::to_string_pretty(&record).expect("pattern records always serialize")
}

/// Parses and validates a pattern document.
pub fn pattern_from_json(text: &str) -> Result<SewingPattern, PatternError> {
    let record: PatternRecord = serde_json::from_str(text).map_err(parse_error)?;
    let mut panels = Vec::with_capacity(record.panels.len());
    for (i, p) in record.panels.into_iter().enumerate() {
        let class_id = match p.class {
            ClassField::Index(k) => k,
            ClassField::Name(name) => class_index(&name)
                .ok_or_else(|| violation(format!("panels[{i}].class"), format!("unknown class `{name}`")))?,
        };
        panels.push(Panel {
            class_id,
            vertices: p.vertices,
            curvatures: p.curvatures,
            rotation: p.rotation,
            translation: p.translation,
        });
    }
    let stitches = record
        .stitches
        .iter()
        .map(|[a, b]| Stitch::new((a[0], a[1]), (b[0], b[1])))
        .collect();
    let pattern = SewingPattern { panels, stitches };
    pattern.validate()?;
    Ok(pattern)
}

pub fn serialize_pattern(pattern: &SewingPattern, path: &Path) -> Result<(), PatternError> {
    std::fs::write(path, pattern_to_json(pattern))?;
    Ok(())
}

pub fn parse_pattern(path: &Path) -> Result<SewingPattern, PatternError> {
    pattern_from_json(&std::fs::read_to_string(path)?)
}

/// Reads `x y z` lines; blank lines and `#` comments are skipped.
pub fn points_from_xyz(text: &str) -> Result<Vec<[f64; 3]>, PatternError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(PatternError::Parse {
                line: i + 1,
                column: 1,
                message: format!("expected 3 coordinates, found {}", fields.len()),
            });
        }
        let mut p = [0.0; 3];
        for (k, f) in fields.iter().enumerate() {
            p[k] = f.parse().map_err(|_| PatternError::Parse {
                line: i + 1,
                column: k + 1,
                message: format!("`{f}` is not a number"),
            })?;
        }
        out.push(p);
    }
    Ok(out)
}

pub fn points_to_xyz(points: &[[f64; 3]]) -> String {
    let mut s = String::with_capacity(points.len() * 32);
    for p in points {
        let _ = writeln!(s, "{} {} {}", p[0], p[1], p[2]);
    }
    s
}

pub fn read_xyz(path: &Path) -> Result<Vec<[f64; 3]>, PatternError> {
    points_from_xyz(&std::fs::read_to_string(path)?)
}

pub fn write_xyz(points: &[[f64; 3]], path: &Path) -> Result<(), PatternError> {
    std::fs::write(path, points_to_xyz(points))?;
    Ok(())
}

/// The `.xyz` file next to a pattern file.
pub fn sibling_xyz(pattern_path: &Path) -> std::path::PathBuf {
    pattern_path.with_extension("xyz")
}

const SVG_MARGIN: f64 = 5.0;

/// One `<path>` per panel, panels laid out row-major on a square grid of
/// equal cells. SVG y grows downwards, so panel y is flipped.
pub fn pattern_to_svg(pattern: &SewingPattern) -> String {
    let n = pattern.panels.len();
    let cols = (n as f64).sqrt().ceil().max(1.0) as usize;
    let rows = n.div_ceil(cols).max(1);
    let bounds: Vec<[f64; 4]> = pattern
        .panels
        .iter()
        .map(|p| {
            p.outline(16).iter().fold(
                [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY],
                |b, v| [b[0].min(v[0]), b[1].min(v[1]), b[2].max(v[0]), b[3].max(v[1])],
            )
        })
        .collect();
    let cell_w = bounds.iter().map(|b| b[2] - b[0]).fold(0.0, f64::max) + 2.0 * SVG_MARGIN;
    let cell_h = bounds.iter().map(|b| b[3] - b[1]).fold(0.0, f64::max) + 2.0 * SVG_MARGIN;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{:.2}cm" height="{:.2}cm" viewBox="0 0 {:.3} {:.3}">"#,
        cols as f64 * cell_w,
        rows as f64 * cell_h,
        cols as f64 * cell_w,
        rows as f64 * cell_h
    );
    for (i, (panel, b)) in pattern.panels.iter().zip(&bounds).enumerate() {
        let (ox, oy) = ((i % cols) as f64 * cell_w, (i / cols) as f64 * cell_h);
        let map = |v: [f64; 2]| (ox + SVG_MARGIN + v[0] - b[0], oy + SVG_MARGIN + b[3] - v[1]);
        let (x0, y0) = map(panel.vertices[0]);
        let mut d = format!("M {x0:.3} {y0:.3}");
        for e in 0..panel.num_edges() {
            let (start, end, c) = panel.edge(e);
            let (ex, ey) = map(end);
            match c {
                Some(c) => {
                    let (cx, cy) = map(super::control_point(start, end, c));
                    let _ = write!(d, " Q {cx:.3} {cy:.3} {ex:.3} {ey:.3}");
                }
                None => {
                    let _ = write!(d, " L {ex:.3} {ey:.3}");
                }
            }
        }
        d.push_str(" Z");
        let name = PANEL_CLASSES.get(panel.class_id).copied().unwrap_or("unknown");
        let _ = writeln!(
            s,
            r#"  <path id="panel-{i}" data-class="{name}" d="{d}" fill="none" stroke="black" stroke-width="0.3"/>"#
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Binary PGM (P5) of probabilities in `[0, 1]`, row-major.
pub fn probs_to_pgm(height: usize, width: usize, probs: &[f64]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(probs.iter().map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}
