//! Flat-color rasterization without anti-aliasing: a pixel takes an object's
//! palette color exactly when its center lies inside the shape.

use ndarray::Array3;

use super::scene::{SceneObject, ShapeKind, ShapeWorldScene};

pub const BACKGROUND: [u8; 3] = [230, 230, 230];

/// Pixel-center containment test for one object.
pub fn contains(obj: &SceneObject, px: f64, py: f64) -> bool {
    let (cx, cy) = obj.center;
    let e = obj.extent;
    match obj.shape {
        ShapeKind::Circle => (px - cx).powi(2) + (py - cy).powi(2) <= e * e,
        ShapeKind::Square => (px - cx).abs() <= e && (py - cy).abs() <= e,
        ShapeKind::Triangle => {
            // Upward triangle: apex (cx, cy-e), base corners (cx±e, cy+e).
            let a = (cx, cy - e);
            let b = (cx + e, cy + e);
            let c = (cx - e, cy + e);
            let cross = |p: (f64, f64), q: (f64, f64), r: (f64, f64)| {
                (q.0 - p.0) * (r.1 - p.1) - (q.1 - p.1) * (r.0 - p.0)
            };
            let d1 = cross(a, b, (px, py));
            let d2 = cross(b, c, (px, py));
            let d3 = cross(c, a, (px, py));
            let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
            let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
            !(has_neg && has_pos)
        }
    }
}

/// 8-bit RGB raster, (H, W, 3). Objects are painted in list order.
pub fn render_scene_u8(scene: &ShapeWorldScene) -> Array3<u8> {
    let s = scene.image_size;
    let mut img = Array3::<u8>::zeros((s, s, 3));
    for y in 0..s {
        for x in 0..s {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut rgb = BACKGROUND;
            for obj in &scene.objects {
                if contains(obj, px, py) {
                    rgb = obj.color.rgb();
                }
            }
            for c in 0..3 {
                img[[y, x, c]] = rgb[c];
            }
        }
    }
    img
}

/// Real-valued image in [0, 1], (H, W, 3). Palette values are u8/255 exactly,
/// so the PNG round trip is lossless.
pub fn render_scene(scene: &ShapeWorldScene) -> Array3<f64> {
    render_scene_u8(scene).mapv(|v| v as f64 / 255.0)
}

/// Tight bounding box of the pixels an object colors when rendered alone:
/// [x_min, y_min, width, height] in pixel units, or None if no pixel center
/// falls inside. The oracle for the analytic `SceneObject::bbox`.
pub fn pixel_scan_bbox(obj: &SceneObject, image_size: usize) -> Option<[f64; 4]> {
    let mut min_x = usize::MAX;
    let mut min_y = usize::MAX;
    let mut max_x = 0usize;
    let mut max_y = 0usize;
    let mut any = false;
    for y in 0..image_size {
        for x in 0..image_size {
            if contains(obj, x as f64 + 0.5, y as f64 + 0.5) {
                any = true;
                min_x = min_x.min(x);
                min_y = min_y.min(y);
                max_x = max_x.max(x);
                max_y = max_y.max(y);
            }
        }
    }
    any.then(|| {
        [
            min_x as f64,
            min_y as f64,
            (max_x - min_x + 1) as f64,
            (max_y - min_y + 1) as f64,
        ]
    })
}
