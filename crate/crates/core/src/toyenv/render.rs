use super::{Image, Position, SpriteKind, TaskSpec, WorldState};

/// Subsamples per pixel axis when estimating disc coverage.
const DISC_SUBSAMPLES: usize = 16;
/// Half-length of the target cross arms, in pixels.
const CROSS_ARM: isize = 2;

pub fn render(state: &WorldState, spec: &TaskSpec) -> Image {
    render_position(state.position, spec)
}

/// Renders the effector at `p` over a black background with the target
/// cross. Sprite pixels carry their area coverage, then everything is
/// quantized to 8-bit levels.
pub fn render_position(p: Position, spec: &TaskSpec) -> Image {
    let n = spec.image_size;
    let mut canvas = vec![0.0f64; n * n];
    draw_cross(&mut canvas, spec);
    let (cx, cy) = spec.to_pixel(p);
    match spec.sprite {
        SpriteKind::Teacher => draw_disc(&mut canvas, n, cx, cy, spec.sprite_radius),
        SpriteKind::Executor => {
            let half = 0.5 * spec.sprite_radius * std::f64::consts::PI.sqrt();
            draw_square(&mut canvas, n, cx, cy, half)
        }
    }
    let levels: Vec<u8> = canvas.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    Image::from_levels(n, n, &levels).expect("canvas matches image size")
}

fn draw_cross(canvas: &mut [f64], spec: &TaskSpec) {
    let n = spec.image_size as isize;
    let (tx, ty) = spec.to_pixel(spec.target);
    let (px, py) = (tx.floor() as isize, ty.floor() as isize);
    for d in -CROSS_ARM..=CROSS_ARM {
        for (x, y) in [(px + d, py), (px, py + d)] {
            if (0..n).contains(&x) && (0..n).contains(&y) {
                canvas[(y * n + x) as usize] = 1.0;
            }
        }
    }
}

fn pixel_range(center: f64, half: f64, n: usize) -> std::ops::Range<usize> {
    let lo = (center - half).floor().max(0.0) as usize;
    let hi = ((center + half).ceil().max(0.0) as usize).min(n);
    lo..hi
}

fn draw_disc(canvas: &mut [f64], n: usize, cx: f64, cy: f64, r: f64) {
    let r2 = r * r;
    let step = 1.0 / DISC_SUBSAMPLES as f64;
    for y in pixel_range(cy, r, n) {
        for x in pixel_range(cx, r, n) {
            let mut hits = 0usize;
            for sy in 0..DISC_SUBSAMPLES {
                let dy = y as f64 + (sy as f64 + 0.5) * step - cy;
                for sx in 0..DISC_SUBSAMPLES {
                    let dx = x as f64 + (sx as f64 + 0.5) * step - cx;
                    if dx * dx + dy * dy <= r2 {
                        hits += 1;
                    }
                }
            }
            let cov = hits as f64 / (DISC_SUBSAMPLES * DISC_SUBSAMPLES) as f64;
            let px = &mut canvas[y * n + x];
            *px = px.max(cov);
        }
    }
}

fn draw_square(canvas: &mut [f64], n: usize, cx: f64, cy: f64, half: f64) {
    let overlap = |pix: usize, c: f64| {
        let lo = (pix as f64).max(c - half);
        let hi = (pix as f64 + 1.0).min(c + half);
        (hi - lo).max(0.0)
    };
    for y in pixel_range(cy, half, n) {
        for x in pixel_range(cx, half, n) {
            let cov = overlap(x, cx) * overlap(y, cy);
            let px = &mut canvas[y * n + x];
            *px = px.max(cov);
        }
    }
}
