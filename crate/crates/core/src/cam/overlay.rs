use super::{CamError, Heatmap, Result};
use crate::datakit::RgbImage;

const fn channel(i: usize, k: usize) -> u8 {
    // 255 * clamp(1.5 - |4i/255 - k|, 0, 1), rounded half up.
    let d = (8 * i) as isize - (510 * k) as isize;
    let d = if d < 0 { -d } else { d };
    let v = (766 - d) / 2;
    if v < 0 {
        0
    } else if v > 255 {
        255
    } else {
        v as u8
    }
}

const fn build_colormap() -> [[u8; 3]; 256] {
    let mut table = [[0u8; 3]; 256];
    let mut i = 0;
    while i < 256 {
        table[i] = [channel(i, 3), channel(i, 2), channel(i, 1)];
        i += 1;
    }
    table
}

/// Jet-like table: dark blue at 0, through cyan, yellow, to dark red at 255.
pub const COLORMAP: [[u8; 3]; 256] = build_colormap();

/// Colour for a heatmap value, clamped to `[0, 1]`.
pub fn colormap(v: f32) -> [u8; 3] {
    let i = (v.clamp(0.0, 1.0) * 255.0).round() as usize;
    COLORMAP[i]
}

/// `round((1 - alpha) * image + alpha * colormap(heatmap))` per channel.
pub fn overlay(image: &RgbImage, heatmap: &Heatmap, alpha: f32) -> Result<RgbImage> {
    if image.width() != heatmap.width() || image.height() != heatmap.height() {
        return Err(CamError::SizeMismatch(format!(
            "image {}x{} vs heatmap {}x{}",
            image.height(),
            image.width(),
            heatmap.height(),
            heatmap.width()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(CamError::SizeMismatch(format!("alpha {alpha} outside [0, 1]")));
    }
    let a = alpha as f64;
    let mut out = Vec::with_capacity(image.data().len());
    for (px, &h) in image.data().chunks_exact(3).zip(heatmap.values()) {
        let color = colormap(h);
        for c in 0..3 {
            let v = (1.0 - a) * px[c] as f64 + a * color[c] as f64;
            out.push(v.round() as u8);
        }
    }
    Ok(RgbImage::new(image.width(), image.height(), out).expect("same dimensions"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_endpoints() {
        assert_eq!(COLORMAP[0], [0, 0, 128]);
        assert_eq!(COLORMAP[255], [128, 0, 0]);
        assert_eq!(COLORMAP[128][1], 255);
        assert_eq!(colormap(2.0), COLORMAP[255]);
    }

    fn image() -> RgbImage {
        RgbImage::new(2, 1, vec![10, 20, 30, 200, 101, 0]).unwrap()
    }

    #[test]
    fn alpha_zero_is_identity() {
        let h = Heatmap::new(1, 2, vec![0.3, 1.0]).unwrap();
        assert_eq!(overlay(&image(), &h, 0.0).unwrap(), image());
    }

    #[test]
    fn alpha_one_zero_heatmap_is_solid() {
        let out = overlay(&image(), &Heatmap::zeros(1, 2), 1.0).unwrap();
        assert_eq!(out.data(), &[0, 0, 128, 0, 0, 128]);
    }

    #[test]
    fn half_blend_at_hot_pixel() {
        let h = Heatmap::new(1, 2, vec![0.0, 1.0]).unwrap();
        let out = overlay(&image(), &h, 0.5).unwrap();
        let want: Vec<u8> = [200u8, 101, 0]
            .iter()
            .zip(COLORMAP[255])
            .map(|(&p, c)| ((p as f64 + c as f64) / 2.0).round() as u8)
            .collect();
        assert_eq!(&out.data()[3..], want.as_slice());
    }

    #[test]
    fn size_mismatch() {
        assert!(overlay(&image(), &Heatmap::zeros(2, 2), 0.5).is_err());
    }
}
