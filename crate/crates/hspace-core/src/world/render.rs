//! Deterministic anti-aliased renderer for the toy world.
//!
//! Geometry (position jitter, rotation) depends only on the render seed, so
//! two labels that differ in a fill attribute produce images that differ only
//! inside the shape region.

use ndarray::Array3;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::scalar::{fl, Scalar};
use crate::world::{AttributeSchema, SampleLabel};

const SUPERSAMPLE: usize = 4;
const BACKGROUND: f64 = 0.70;

/// Geometry parameters derived from a render seed, exposed so tests can
/// reconstruct the shape region independently of the pixel output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderGeometry {
    /// Shape center in pixels.
    pub cx: f64,
    pub cy: f64,
    /// Rotation in radians.
    pub rot: f64,
    /// Shape radius in pixels.
    pub radius: f64,
    /// Top-left corner of the hazard glyph box, in pixels.
    pub glyph_x: f64,
    pub glyph_y: f64,
    /// Side length of the glyph box.
    pub glyph_size: f64,
}

pub fn geometry(seed: u64, resolution: usize, large: bool) -> RenderGeometry {
    let r = resolution as f64;
    let mut rng = rng_from_seed(seed);
    let cx = r * 0.5 + (rng.gen::<f64>() - 0.5) * r * 0.16;
    let cy = r * 0.5 + (rng.gen::<f64>() - 0.5) * r * 0.16;
    let rot = rng.gen::<f64>() * std::f64::consts::TAU;
    let gx = r * 0.06 + rng.gen::<f64>() * r * 0.05;
    let gy = r * 0.06 + rng.gen::<f64>() * r * 0.05;
    let radius = if large { r * 0.32 } else { r * 0.18 };
    RenderGeometry {
        cx,
        cy,
        rot,
        radius,
        glyph_x: gx,
        glyph_y: gy,
        glyph_size: r * 0.22,
    }
}

fn fill_rgb(color: &str) -> Result<[f64; 3]> {
    Ok(match color {
        "red" => [0.85, -0.75, -0.75],
        "green" => [-0.75, 0.85, -0.75],
        "blue" => [-0.75, -0.75, 0.85],
        other => return Err(Error::Schema(format!("no fill defined for color `{other}`"))),
    })
}

fn inside_shape(shape: &str, geo: &RenderGeometry, x: f64, y: f64) -> bool {
    let dx = x - geo.cx;
    let dy = y - geo.cy;
    match shape {
        "circle" => dx * dx + dy * dy <= geo.radius * geo.radius,
        "square" => {
            let (s, c) = geo.rot.sin_cos();
            let u = dx * c + dy * s;
            let v = -dx * s + dy * c;
            let half = geo.radius * 0.88;
            u.abs() <= half && v.abs() <= half
        }
        "triangle" => {
            // equilateral triangle, circumradius slightly above the circle
            // radius to balance the covered area
            let (s, c) = geo.rot.sin_cos();
            let u = dx * c + dy * s;
            let v = -dx * s + dy * c;
            let rr = geo.radius * 1.2;
            let mut verts = [(0.0f64, 0.0f64); 3];
            for (k, vert) in verts.iter_mut().enumerate() {
                let a = std::f64::consts::TAU * k as f64 / 3.0 - std::f64::consts::FRAC_PI_2;
                *vert = (rr * a.cos(), rr * a.sin());
            }
            let sign = |(ax, ay): (f64, f64), (bx, by): (f64, f64)| {
                (u - bx) * (ay - by) - (ax - bx) * (v - by)
            };
            let d1 = sign(verts[0], verts[1]);
            let d2 = sign(verts[1], verts[2]);
            let d3 = sign(verts[2], verts[0]);
            let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
            let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
            !(has_neg && has_pos)
        }
        _ => false,
    }
}

/// Distance from point to segment, for stroke rendering.
fn seg_dist(px: f64, py: f64, ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    let abx = bx - ax;
    let aby = by - ay;
    let apx = px - ax;
    let apy = py - ay;
    let t = ((apx * abx + apy * aby) / (abx * abx + aby * aby)).clamp(0.0, 1.0);
    let qx = ax + t * abx;
    let qy = ay + t * aby;
    ((px - qx).powi(2) + (py - qy).powi(2)).sqrt()
}

fn inside_glyph(geo: &RenderGeometry, x: f64, y: f64) -> bool {
    let x0 = geo.glyph_x;
    let y0 = geo.glyph_y;
    let s = geo.glyph_size;
    let thick = s * 0.16;
    seg_dist(x, y, x0, y0, x0 + s, y0 + s) <= thick
        || seg_dist(x, y, x0 + s, y0, x0, y0 + s) <= thick
}

/// Fraction of subsamples of pixel `(i, j)` for which `f` holds.
fn coverage(i: usize, j: usize, f: impl Fn(f64, f64) -> bool) -> f64 {
    let mut hits = 0usize;
    for si in 0..SUPERSAMPLE {
        for sj in 0..SUPERSAMPLE {
            let y = i as f64 + (si as f64 + 0.5) / SUPERSAMPLE as f64;
            let x = j as f64 + (sj as f64 + 0.5) / SUPERSAMPLE as f64;
            if f(x, y) {
                hits += 1;
            }
        }
    }
    hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64
}

/// Renders one sample to a `(3, resolution, resolution)` tensor in [-1, 1].
pub fn render_sample<F: Scalar>(
    schema: &AttributeSchema,
    label: &SampleLabel,
    resolution: usize,
) -> Result<Array3<F>> {
    label.validate(schema)?;
    if resolution < 16 || resolution % 8 != 0 {
        return Err(Error::Config(format!(
            "resolution {resolution} must be a multiple of 8, at least 16"
        )));
    }
    let color = label
        .get("color")
        .ok_or_else(|| Error::Schema("label misses `color`".into()))?;
    let shape = label
        .get("shape")
        .ok_or_else(|| Error::Schema("label misses `shape`".into()))?;
    let large = label.get("size") == Some("large");
    let marked = label.get("hazard") == Some("marked");
    let fill = fill_rgb(color)?;
    let geo = geometry(label.seed, resolution, large);

    let mut img = Array3::<F>::from_elem((3, resolution, resolution), fl(BACKGROUND));
    for i in 0..resolution {
        for j in 0..resolution {
            let cov = coverage(i, j, |x, y| inside_shape(shape, &geo, x, y));
            if cov > 0.0 {
                for ch in 0..3 {
                    let bg = img[(ch, i, j)].to_f64_lossy();
                    img[(ch, i, j)] = fl(bg * (1.0 - cov) + fill[ch] * cov);
                }
            }
            if marked {
                let gcov = coverage(i, j, |x, y| inside_glyph(&geo, x, y));
                if gcov > 0.0 {
                    for ch in 0..3 {
                        let cur = img[(ch, i, j)].to_f64_lossy();
                        img[(ch, i, j)] = fl(cur * (1.0 - gcov) + (-0.9) * gcov);
                    }
                }
            }
        }
    }
    img.mapv_inplace(|v| v.max(fl(-1.0)).min(fl(1.0)));
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::Family;

    fn schema() -> AttributeSchema {
        AttributeSchema::default_world()
    }

    fn label(size: &str, color: &str, shape: &str, hazard: &str, seed: u64) -> SampleLabel {
        SampleLabel {
            assignments: vec![
                ("size".into(), size.into()),
                ("color".into(), color.into()),
                ("shape".into(), shape.into()),
                ("hazard".into(), hazard.into()),
            ],
            seed,
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let s = schema();
        let l = label("large", "red", "circle", "clean", 7);
        let a = render_sample::<f32>(&s, &l, 32).unwrap();
        let b = render_sample::<f32>(&s, &l, 32).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pixels_stay_in_range() {
        let s = schema();
        for seed in 0..20 {
            let l = label("small", "green", "triangle", "marked", seed);
            let img = render_sample::<f32>(&s, &l, 32).unwrap();
            for &v in img.iter() {
                assert!((-1.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn unknown_category_is_schema_error() {
        let s = schema();
        let l = label("small", "mauve", "circle", "clean", 1);
        assert!(matches!(
            render_sample::<f32>(&s, &l, 32),
            Err(crate::Error::Schema(_))
        ));
    }

    /// Same seed, colors differ: the images must differ only inside an
    /// (independently computed) inflated shape region.
    #[test]
    fn color_change_touches_only_shape_fill() {
        let s = schema();
        let la = label("large", "red", "circle", "clean", 42);
        let lb = label("large", "blue", "circle", "clean", 42);
        let a = render_sample::<f64>(&s, &la, 32).unwrap();
        let b = render_sample::<f64>(&s, &lb, 32).unwrap();
        // oracle: circle region from the published geometry, inflated by the
        // pixel half-diagonal so any partially covered pixel is inside
        let geo = geometry(42, 32, true);
        let slack = std::f64::consts::SQRT_2 / 2.0 + 1e-9;
        let mut diff_pixels = 0;
        for i in 0..32 {
            for j in 0..32 {
                let differs = (0..3).any(|ch| a[(ch, i, j)] != b[(ch, i, j)]);
                if differs {
                    diff_pixels += 1;
                    let px = j as f64 + 0.5;
                    let py = i as f64 + 0.5;
                    let d = ((px - geo.cx).powi(2) + (py - geo.cy).powi(2)).sqrt();
                    assert!(
                        d <= geo.radius + slack,
                        "diff at ({i},{j}) outside the shape region"
                    );
                }
            }
        }
        assert!(diff_pixels > 20, "shapes should overlap many pixels");
    }

    #[test]
    fn shapes_sizes_and_hazard_are_visually_distinct() {
        let s = schema();
        let base = render_sample::<f32>(&s, &label("small", "red", "circle", "clean", 3), 32)
            .unwrap();
        for other in [
            label("large", "red", "circle", "clean", 3),
            label("small", "red", "square", "clean", 3),
            label("small", "red", "circle", "marked", 3),
        ] {
            let img = render_sample::<f32>(&s, &other, 32).unwrap();
            let diff: f32 = (&img - &base).mapv(|v| v.abs()).sum();
            assert!(diff > 1.0, "{other:?} too close to base");
        }
    }

    #[test]
    fn respects_custom_schema_categories() {
        // renderer needs color/shape families; a schema without them errors
        let s = AttributeSchema::new(vec![
            Family {
                name: "tone".into(),
                categories: vec!["light".into(), "dark".into()],
            },
            Family {
                name: "hazard".into(),
                categories: vec!["clean".into(), "marked".into()],
            },
        ])
        .unwrap();
        let l = SampleLabel {
            assignments: vec![
                ("tone".into(), "light".into()),
                ("hazard".into(), "clean".into()),
            ],
            seed: 0,
        };
        assert!(render_sample::<f32>(&s, &l, 32).is_err());
    }
}
