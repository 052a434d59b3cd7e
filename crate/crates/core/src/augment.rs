//! Paired geometric and intensity augmentation of image/mask planes.

use rand::Rng;

use crate::config::AugmentConfig;

/// `image`, `mask`: `size x size` planes in `[0, 1]`. The same geometric
/// transform is applied to both; masks use nearest-neighbor sampling.
pub fn augment(image: &[f32], mask: &[f32], size: usize, cfg: &AugmentConfig, rng: &mut impl Rng) -> (Vec<f32>, Vec<f32>) {
    let mut img = image.to_vec();
    let mut msk = mask.to_vec();
    if cfg.hflip_p > 0.0 && rng.random_bool(cfg.hflip_p.min(1.0)) {
        hflip(&mut img, size);
        hflip(&mut msk, size);
    }
    if cfg.vflip_p > 0.0 && rng.random_bool(cfg.vflip_p.min(1.0)) {
        vflip(&mut img, size);
        vflip(&mut msk, size);
    }
    if cfg.rotate_deg > 0.0 {
        let deg = rng.random_range(-cfg.rotate_deg..=cfg.rotate_deg);
        img = rotate(&img, size, deg, false);
        msk = rotate(&msk, size, deg, true);
    }
    if cfg.intensity_max > cfg.intensity_min || cfg.intensity_min != 1.0 {
        let s = if cfg.intensity_max > cfg.intensity_min {
            rng.random_range(cfg.intensity_min..=cfg.intensity_max)
        } else {
            cfg.intensity_min
        } as f32;
        img.iter_mut().for_each(|v| *v = (*v * s).clamp(0.0, 1.0));
    }
    (img, msk)
}

pub fn hflip(p: &mut [f32], size: usize) {
    for row in p.chunks_mut(size) {
        row.reverse();
    }
}

pub fn vflip(p: &mut [f32], size: usize) {
    for y in 0..size / 2 {
        for x in 0..size {
            p.swap(y * size + x, (size - 1 - y) * size + x);
        }
    }
}

/// Rotation about the center; outside samples read as 0.
pub fn rotate(p: &[f32], size: usize, deg: f64, nearest: bool) -> Vec<f32> {
    let (s, c) = deg.to_radians().sin_cos();
    let mid = (size as f64 - 1.0) / 2.0;
    let at = |y: isize, x: isize| -> f32 {
        if y < 0 || x < 0 || y >= size as isize || x >= size as isize {
            0.0
        } else {
            p[y as usize * size + x as usize]
        }
    };
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let (dy, dx) = (y as f64 - mid, x as f64 - mid);
            let sy = c * dy + s * dx + mid;
            let sx = -s * dy + c * dx + mid;
            out[y * size + x] = if nearest {
                at(sy.round() as isize, sx.round() as isize)
            } else {
                let (y0, x0) = (sy.floor(), sx.floor());
                let (fy, fx) = ((sy - y0) as f32, (sx - x0) as f32);
                let (y0, x0) = (y0 as isize, x0 as isize);
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
                let bot = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
                top * (1.0 - fy) + bot * fy
            };
        }
    }
    out
}
