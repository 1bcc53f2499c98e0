//! Emission Control Area containment.
//!
//! Polygons are planar in (lon, lat) degrees; all arithmetic runs on the
//! micro-degree integers held by [`GeoPosition`], so containment is exact.
//! Points on an edge or vertex count as inside.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::GeoPosition;

#[derive(Debug, Error)]
pub enum AtlasError {
    #[error("region {name:?}: {problem}")]
    Region { name: String, problem: String },
    #[error("duplicate region name {0:?}")]
    DuplicateName(String),
    #[error("atlas file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("atlas file parse error: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EcaRegion {
    pub name: String,
    /// Vertices as `[lat, lon]` pairs, in order. The closing edge is implied.
    pub vertices: Vec<GeoPosition>,
}

impl EcaRegion {
    pub fn new(name: &str, vertices: Vec<GeoPosition>) -> Result<Self, AtlasError> {
        let region = EcaRegion {
            name: name.to_string(),
            vertices,
        };
        region.check()?;
        Ok(region)
    }

    /// Axis-aligned box from `(lat_lo, lon_lo)` to `(lat_hi, lon_hi)`.
    pub fn rectangle(name: &str, lat: (f64, f64), lon: (f64, f64)) -> Result<Self, AtlasError> {
        let corner = |la: f64, lo: f64| {
            GeoPosition::new(la, lo).map_err(|e| AtlasError::Region {
                name: name.to_string(),
                problem: e.to_string(),
            })
        };
        let vertices = vec![
            corner(lat.0, lon.0)?,
            corner(lat.0, lon.1)?,
            corner(lat.1, lon.1)?,
            corner(lat.1, lon.0)?,
        ];
        Self::new(name, vertices)
    }

    fn check(&self) -> Result<(), AtlasError> {
        let fail = |problem: &str| AtlasError::Region {
            name: self.name.clone(),
            problem: problem.to_string(),
        };
        if self.name.is_empty() {
            return Err(fail("empty name"));
        }
        let pts: Vec<Pt> = self.vertices.iter().map(Pt::from).collect();
        let n = pts.len();
        if n < 3 {
            return Err(fail("polygon needs at least 3 vertices"));
        }
        if twice_area(&pts) == 0 {
            return Err(fail("polygon has zero area"));
        }
        for i in 0..n {
            let (a, b) = (pts[i], pts[(i + 1) % n]);
            if a == b {
                return Err(fail("repeated consecutive vertex"));
            }
            for j in i + 1..n {
                let (c, d) = (pts[j], pts[(j + 1) % n]);
                let adjacent = j == i + 1 || (i == 0 && j == n - 1);
                if adjacent {
                    // Neighbours share one vertex; they must not fold back onto each other.
                    let shared = if j == i + 1 { b } else { a };
                    let (p, q) = if j == i + 1 { (a, d) } else { (b, c) };
                    if cross(shared, p, q) == 0 && dot(shared, p, q) > 0 {
                        return Err(fail("polygon folds back on itself"));
                    }
                } else if segments_intersect(a, b, c, d) {
                    return Err(fail("polygon is self-intersecting"));
                }
            }
        }
        Ok(())
    }

    pub fn contains(&self, p: &GeoPosition) -> bool {
        let p = Pt::from(p);
        let pts: Vec<Pt> = self.vertices.iter().map(Pt::from).collect();
        let n = pts.len();
        let mut inside = false;
        for i in 0..n {
            let (a, b) = (pts[i], pts[(i + 1) % n]);
            if on_segment(a, b, p) {
                return true;
            }
            if (a.y > p.y) != (b.y > p.y) {
                // Does the edge cross the horizontal ray going +x from p?
                let dy = b.y - a.y;
                let lhs = (b.x - a.x) * (p.y - a.y);
                let rhs = (p.x - a.x) * dy;
                let crosses = if dy > 0 { lhs > rhs } else { lhs < rhs };
                if crosses {
                    inside = !inside;
                }
            }
        }
        inside
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EcaAtlas {
    pub regions: Vec<EcaRegion>,
}

impl EcaAtlas {
    pub fn new(regions: Vec<EcaRegion>) -> Result<Self, AtlasError> {
        let atlas = EcaAtlas { regions };
        atlas.check()?;
        Ok(atlas)
    }

    pub fn check(&self) -> Result<(), AtlasError> {
        let mut seen = BTreeSet::new();
        for r in &self.regions {
            r.check()?;
            if !seen.insert(r.name.as_str()) {
                return Err(AtlasError::DuplicateName(r.name.clone()));
            }
        }
        Ok(())
    }

    /// Coarse stand-ins for the four MARPOL Annex VI sulfur ECAs. These are
    /// simulation rectangles, not regulatory boundaries.
    pub fn default_ecas() -> Self {
        let regions = vec![
            EcaRegion::rectangle("Baltic Sea", (53.5, 66.0), (9.5, 30.5)),
            EcaRegion::rectangle("North Sea", (50.5, 62.0), (-4.5, 9.5)),
            EcaRegion::rectangle("North American", (24.0, 49.0), (-82.0, -60.0)),
            EcaRegion::rectangle("United States Caribbean Sea", (16.5, 19.5), (-68.5, -63.5)),
        ];
        EcaAtlas {
            regions: regions
                .into_iter()
                .collect::<Result<_, _>>()
                .expect("built-in atlas is well formed"),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, AtlasError> {
        let atlas: EcaAtlas = toml::from_str(text).map_err(|e| AtlasError::Parse(e.to_string()))?;
        atlas.check()?;
        Ok(atlas)
    }

    pub fn load(path: &Path) -> Result<Self, AtlasError> {
        let text = std::fs::read_to_string(path).map_err(|source| AtlasError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    /// First region containing `p`, if any.
    pub fn locate(&self, p: &GeoPosition) -> Option<&EcaRegion> {
        self.regions.iter().find(|r| r.contains(p))
    }
}

/// Containment test against the atlas, with the matching region's name.
pub fn is_in_eca(p: &GeoPosition, atlas: &EcaAtlas) -> (bool, Option<String>) {
    match atlas.locate(p) {
        Some(r) => (true, Some(r.name.clone())),
        None => (false, None),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Pt {
    x: i128,
    y: i128,
}

impl From<&GeoPosition> for Pt {
    fn from(p: &GeoPosition) -> Self {
        Pt {
            x: p.lon_micros() as i128,
            y: p.lat_micros() as i128,
        }
    }
}

fn cross(o: Pt, a: Pt, b: Pt) -> i128 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

fn dot(o: Pt, a: Pt, b: Pt) -> i128 {
    (a.x - o.x) * (b.x - o.x) + (a.y - o.y) * (b.y - o.y)
}

fn on_segment(a: Pt, b: Pt, p: Pt) -> bool {
    cross(a, b, p) == 0
        && p.x >= a.x.min(b.x)
        && p.x <= a.x.max(b.x)
        && p.y >= a.y.min(b.y)
        && p.y <= a.y.max(b.y)
}

fn segments_intersect(a: Pt, b: Pt, c: Pt, d: Pt) -> bool {
    let d1 = cross(c, d, a).signum();
    let d2 = cross(c, d, b).signum();
    let d3 = cross(a, b, c).signum();
    let d4 = cross(a, b, d).signum();
    if d1 * d2 < 0 && d3 * d4 < 0 {
        return true;
    }
    on_segment(c, d, a) || on_segment(c, d, b) || on_segment(a, b, c) || on_segment(a, b, d)
}

fn twice_area(pts: &[Pt]) -> i128 {
    let n = pts.len();
    (0..n)
        .map(|i| {
            let (a, b) = (pts[i], pts[(i + 1) % n]);
            a.x * b.y - b.x * a.y
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pos(lat: f64, lon: f64) -> GeoPosition {
        GeoPosition::new(lat, lon).unwrap()
    }

    // Independent oracle for the built-in rectangles: plain bound comparisons.
    fn in_box(p: (f64, f64), lat: (f64, f64), lon: (f64, f64)) -> bool {
        p.0 >= lat.0 && p.0 <= lat.1 && p.1 >= lon.0 && p.1 <= lon.1
    }

    #[test]
    fn baltic_interior_point() {
        let atlas = EcaAtlas::default_ecas();
        assert!(in_box((56.0, 19.0), (53.5, 66.0), (9.5, 30.5)));
        assert_eq!(
            is_in_eca(&pos(56.0, 19.0), &atlas),
            (true, Some("Baltic Sea".to_string()))
        );
    }

    #[test]
    fn mid_pacific_is_outside() {
        let atlas = EcaAtlas::default_ecas();
        assert_eq!(is_in_eca(&pos(0.0, -150.0), &atlas), (false, None));
    }

    #[test]
    fn vertices_and_edges_are_inside() {
        let atlas = EcaAtlas::default_ecas();
        for r in &atlas.regions {
            for v in &r.vertices {
                assert!(r.contains(v), "{} vertex {v}", r.name);
            }
        }
        assert!(atlas.regions[0].contains(&pos(53.5, 20.0)));
        assert!(!atlas.regions[0].contains(&pos(53.499999, 20.0)));
    }

    #[test]
    fn default_atlas_agrees_with_box_oracle_on_grid() {
        let atlas = EcaAtlas::default_ecas();
        let boxes = [
            ((53.5, 66.0), (9.5, 30.5)),
            ((50.5, 62.0), (-4.5, 9.5)),
            ((24.0, 49.0), (-82.0, -60.0)),
            ((16.5, 19.5), (-68.5, -63.5)),
        ];
        for lat in (-180..=180).map(|i| i as f64 * 0.5) {
            for lon in (-360..=360).map(|i| i as f64 * 0.5) {
                let p = (lat, lon);
                if p.0.abs() > 90.0 {
                    continue;
                }
                let expected = boxes.iter().any(|(la, lo)| in_box(p, *la, *lo));
                assert_eq!(is_in_eca(&pos(lat, lon), &atlas).0, expected, "{p:?}");
            }
        }
    }

    #[test]
    fn concave_polygon() {
        // U shape opening north.
        let r = EcaRegion::new(
            "U",
            vec![
                pos(0.0, 0.0),
                pos(0.0, 3.0),
                pos(3.0, 3.0),
                pos(3.0, 2.0),
                pos(1.0, 2.0),
                pos(1.0, 1.0),
                pos(3.0, 1.0),
                pos(3.0, 0.0),
            ],
        )
        .unwrap();
        assert!(r.contains(&pos(0.5, 1.5)));
        assert!(!r.contains(&pos(2.0, 1.5)));
        assert!(r.contains(&pos(2.0, 0.5)));
        assert!(r.contains(&pos(1.0, 1.5)));
    }

    #[test]
    fn malformed_polygons_rejected() {
        assert!(EcaRegion::new("two", vec![pos(0.0, 0.0), pos(1.0, 1.0)]).is_err());
        assert!(EcaRegion::new("line", vec![pos(0.0, 0.0), pos(1.0, 1.0), pos(2.0, 2.0)]).is_err());
        let bowtie = vec![pos(0.0, 0.0), pos(1.0, 1.0), pos(1.0, 0.0), pos(0.0, 1.0)];
        assert!(EcaRegion::new("bowtie", bowtie).is_err());
        let dup = EcaAtlas::new(vec![
            EcaRegion::rectangle("A", (0.0, 1.0), (0.0, 1.0)).unwrap(),
            EcaRegion::rectangle("A", (2.0, 3.0), (2.0, 3.0)).unwrap(),
        ]);
        assert!(matches!(dup, Err(AtlasError::DuplicateName(_))));
    }

    #[test]
    fn atlas_toml_round_trip() {
        let text = r#"
[[regions]]
name = "Box"
vertices = [[10.0, 10.0], [10.0, 20.0], [20.0, 20.0], [20.0, 10.0]]
"#;
        let atlas = EcaAtlas::from_toml_str(text).unwrap();
        assert!(is_in_eca(&pos(15.0, 15.0), &atlas).0);
        let bad = "[[regions]]\nname = \"Bad\"\nvertices = [[0.0, 0.0], [1.0, 1.0]]\n";
        assert!(EcaAtlas::from_toml_str(bad).is_err());
    }

    fn arb_convex() -> impl Strategy<Value = Vec<GeoPosition>> {
        // Points on a circle at increasing angles form a convex polygon.
        (3usize..12, -40.0f64..40.0, -100.0f64..100.0, 0.5f64..20.0).prop_map(
            |(n, clat, clon, r)| {
                (0..n)
                    .map(|i| {
                        let t = i as f64 / n as f64 * std::f64::consts::TAU;
                        pos(clat + r * t.sin(), clon + r * t.cos())
                    })
                    .collect()
            },
        )
    }

    proptest! {
        #[test]
        fn rotation_invariance(verts in arb_convex(), k in 0usize..12, lat in -70.0f64..70.0, lon in -130.0f64..130.0) {
            let region = EcaRegion::new("r", verts.clone()).unwrap();
            let mut rotated = verts.clone();
            rotated.rotate_left(k % verts.len());
            let rotated = EcaRegion::new("r", rotated).unwrap();
            let p = pos(lat, lon);
            prop_assert_eq!(region.contains(&p), rotated.contains(&p));
        }

        #[test]
        fn convex_centroid_inside(verts in arb_convex()) {
            let n = verts.len() as f64;
            let lat = verts.iter().map(|v| v.lat()).sum::<f64>() / n;
            let lon = verts.iter().map(|v| v.lon()).sum::<f64>() / n;
            let region = EcaRegion::new("r", verts).unwrap();
            prop_assert!(region.contains(&pos(lat, lon)));
        }
    }
}
