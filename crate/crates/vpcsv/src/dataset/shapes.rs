//! Rasterization: silhouette tests per shape, procedural backgrounds, and
//! frame rendering with exact union masks.

use super::{
    DatasetError, Image, MaskImage, Placement, SceneSpec, Sprite, ShapeKind, SPRITE_HALF,
};

/// Silhouette membership for a pixel offset from the sprite center.
/// Offsets and `half` are in pixels; every shape fits in [-half, half]².
pub fn inside_shape(kind: ShapeKind, dx: f32, dy: f32, half: f32) -> bool {
    if dx.abs() > half || dy.abs() > half {
        return false;
    }
    match kind {
        ShapeKind::Circle => dx * dx + dy * dy <= half * half,
        ShapeKind::Square => dx.abs() <= 0.85 * half && dy.abs() <= 0.85 * half,
        // Upward-pointing: width grows linearly from apex to base.
        ShapeKind::Triangle => dx.abs() <= (dy + half) * 0.5,
        ShapeKind::Cross => {
            (dx.abs() <= 0.32 * half && dy.abs() <= half)
                || (dy.abs() <= 0.32 * half && dx.abs() <= half)
        }
        ShapeKind::Ring => {
            let r2 = dx * dx + dy * dy;
            r2 <= half * half && r2 >= (0.55 * half) * (0.55 * half)
        }
        // Four concave points along the axes.
        ShapeKind::Star => dx.abs() * dy.abs() <= (0.38 * half) * (0.38 * half),
        ShapeKind::Diamond => dx.abs() + dy.abs() <= half,
        ShapeKind::Bar => dy.abs() <= 0.35 * half,
    }
}

/// Inclusive pixel bounding box of a placement.
pub fn bbox(p: &Placement) -> (i32, i32, i32, i32) {
    let half = (SPRITE_HALF as f32 * p.scale).round() as i32;
    (p.cx - half, p.cy - half, p.cx + half, p.cy + half)
}

/// Intersection area of two placements' bboxes over the smaller bbox area.
pub fn overlap_fraction(a: &Placement, b: &Placement) -> f32 {
    let (ax0, ay0, ax1, ay1) = bbox(a);
    let (bx0, by0, bx1, by1) = bbox(b);
    let iw = (ax1.min(bx1) - ax0.max(bx0) + 1).max(0);
    let ih = (ay1.min(by1) - ay0.max(by0) + 1).max(0);
    let inter = (iw * ih) as f32;
    let area_a = ((ax1 - ax0 + 1) * (ay1 - ay0 + 1)) as f32;
    let area_b = ((bx1 - bx0 + 1) * (by1 - by0 + 1)) as f32;
    inter / area_a.min(area_b)
}

/// Background style table: muted palettes so sprites dominate the scene.
/// `jitter` shifts the palette per frame (seeded upstream) without moving
/// any background into a sprite color's neighborhood.
fn background_pixel(id: usize, x: usize, y: usize, w: usize, h: usize, jitter: [i16; 3]) -> [u8; 3] {
    let shade = |base: [i16; 3]| -> [u8; 3] {
        [
            (base[0] + jitter[0]).clamp(0, 255) as u8,
            (base[1] + jitter[1]).clamp(0, 255) as u8,
            (base[2] + jitter[2]).clamp(0, 255) as u8,
        ]
    };
    let lerp = |a: [i16; 3], b: [i16; 3], t: f32| -> [i16; 3] {
        [
            (a[0] as f32 + (b[0] - a[0]) as f32 * t) as i16,
            (a[1] as f32 + (b[1] - a[1]) as f32 * t) as i16,
            (a[2] as f32 + (b[2] - a[2]) as f32 * t) as i16,
        ]
    };
    let ty = y as f32 / (h - 1) as f32;
    let checker = ((x / 8) + (y / 8)).is_multiple_of(2);
    let _ = w;
    match id {
        0 => shade([44, 86, 48]),                                  // meadow
        1 => shade(lerp([18, 22, 60], [4, 4, 14], ty)),            // night
        2 => shade(lerp([20, 90, 110], [10, 34, 80], ty)),         // sea
        3 => shade([150, 120, 70]),                                // desert
        4 => shade(if checker { [30, 70, 40] } else { [22, 52, 30] }), // forest
        5 => shade([120, 130, 150]),                               // snow
        6 => shade(if checker { [55, 50, 58] } else { [38, 35, 42] }), // cave
        7 => shade(lerp([90, 90, 104], [48, 50, 60], ty)),         // city
        _ => unreachable!("background id {id}"),
    }
}

/// Rasterize a scene: background first, then sprites in placement order.
/// Returns the frame and the exact union-of-silhouettes mask.
pub fn render_frame(
    scene: &SceneSpec,
    roster: &[Sprite],
    h: usize,
    w: usize,
    palette_jitter: [i16; 3],
) -> Result<(Image, MaskImage), DatasetError> {
    let mut img = Image::filled(h, w);
    for y in 0..h {
        for x in 0..w {
            img.put(x, y, background_pixel(scene.background_id, x, y, w, h, palette_jitter));
        }
    }
    let mut mask = MaskImage::empty(h, w);
    for p in &scene.placed {
        let (x0, y0, x1, y1) = bbox(p);
        if x0 < 0 || y0 < 0 || x1 >= w as i32 || y1 >= h as i32 {
            return Err(DatasetError::OutOfBounds {
                character_id: p.character_id,
                cx: p.cx,
                cy: p.cy,
            });
        }
        let sprite = roster[p.character_id];
        let half = SPRITE_HALF as f32 * p.scale;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (dx, dy) = ((x - p.cx) as f32, (y - p.cy) as f32);
                if inside_shape(sprite.shape, dx, dy, half) {
                    img.put(x as usize, y as usize, sprite.color);
                    mask.bits[y as usize * w + x as usize] = true;
                }
            }
        }
    }
    Ok((img, mask))
}
