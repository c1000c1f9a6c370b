use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tailor_core::pattern::io::{parse_pattern, pattern_from_json, pattern_to_json, pattern_to_svg};
use tailor_core::traingen::synth::{generate_pattern, Family};

fn golden_path() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/skirt_4p.json")
}

#[test]
fn golden_skirt_matches_the_generator() {
    let parsed = parse_pattern(&golden_path()).unwrap();
    let fresh = generate_pattern(Family::Skirt4p, 0.0, &mut ChaCha8Rng::seed_from_u64(0));
    assert_eq!(parsed.panels.len(), 4);
    assert_eq!(parsed.stitches, fresh.stitches);
    for (a, b) in parsed.panels.iter().zip(&fresh.panels) {
        assert_eq!(a.class_id, b.class_id);
        for (u, v) in a.vertices.iter().zip(&b.vertices) {
            assert!((u[0] - v[0]).abs() < 1e-9 && (u[1] - v[1]).abs() < 1e-9);
        }
    }
}

#[test]
fn golden_skirt_renders_and_round_trips() {
    let text = std::fs::read_to_string(golden_path()).unwrap();
    let pattern = pattern_from_json(&text).unwrap();
    assert_eq!(pattern_to_svg(&pattern).matches("<path").count(), 4);
    assert_eq!(pattern_from_json(&pattern_to_json(&pattern)).unwrap(), pattern);
}
