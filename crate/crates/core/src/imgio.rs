//! PNG I/O and value-range conversions between image tensors and the model's
//! [-1, 1] latent space.

use std::path::Path;

use image::{GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Saves a [3,H,W] tensor in [0,1] as an 8-bit RGB PNG.
pub fn save_rgb(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<()> {
    if t.rank() != 3 || t.dim(0) != 3 {
        return Err(Error::InvalidArg {
            op: "save_rgb",
            msg: format!("expected [3,H,W], got {:?}", t.shape()),
        });
    }
    let (h, w) = (t.dim(1), t.dim(2));
    let n = h * w;
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            img.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([to_u8(t.data()[p]), to_u8(t.data()[n + p]), to_u8(t.data()[2 * n + p])]),
            );
        }
    }
    img.save(path.as_ref())?;
    Ok(())
}

pub fn load_rgb(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let img = image::open(path.as_ref())?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let n = h * w;
    let mut data = vec![0f32; 3 * n];
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x as u32, y as u32);
            for ch in 0..3 {
                data[ch * n + y * w + x] = px.0[ch] as f32 / 255.0;
            }
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

/// Saves a [H,W] tensor in [0,1] as an 8-bit grayscale PNG.
pub fn save_gray(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<()> {
    if t.rank() != 2 {
        return Err(Error::InvalidArg {
            op: "save_gray",
            msg: format!("expected [H,W], got {:?}", t.shape()),
        });
    }
    let (h, w) = (t.dim(0), t.dim(1));
    let mut img = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            img.put_pixel(x as u32, y as u32, image::Luma([to_u8(t.data()[y * w + x])]));
        }
    }
    img.save(path.as_ref())?;
    Ok(())
}

pub fn load_gray(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let img = image::open(path.as_ref())?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            data[y * w + x] = img.get_pixel(x as u32, y as u32).0[0] as f32 / 255.0;
        }
    }
    Tensor::from_vec(&[h, w], data)
}

/// [0,1] image -> [-1,1] model latent, batched as [1,3,H,W].
pub fn to_model_range(img: &Tensor<f32>) -> Result<Tensor<f32>> {
    if img.rank() != 3 || img.dim(0) != 3 {
        return Err(Error::InvalidArg {
            op: "to_model_range",
            msg: format!("expected [3,H,W], got {:?}", img.shape()),
        });
    }
    let scaled = img.scale(2.0).add_scalar(-1.0);
    scaled.reshape(&[1, 3, img.dim(1), img.dim(2)])
}

/// [-1,1] latent (rank 3 or batched rank 4 with B=1) -> clamped [0,1] image.
pub fn from_model_range(z: &Tensor<f32>) -> Result<Tensor<f32>> {
    let t = if z.rank() == 4 && z.dim(0) == 1 {
        z.reshape(&[z.dim(1), z.dim(2), z.dim(3)])?
    } else if z.rank() == 3 {
        z.clone()
    } else {
        return Err(Error::InvalidArg {
            op: "from_model_range",
            msg: format!("expected [3,H,W] or [1,3,H,W], got {:?}", z.shape()),
        });
    };
    Ok(t.add_scalar(1.0).scale(0.5).clamp(0.0, 1.0))
}

/// Horizontal strip of equally-sized [3,H,W] panels with a 2px divider.
pub fn hstack(panels: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    if panels.is_empty() {
        return Err(Error::InvalidArg { op: "hstack", msg: "no panels".into() });
    }
    let (h, w) = (panels[0].dim(1), panels[0].dim(2));
    for p in panels {
        if p.shape() != [3, h, w] {
            return Err(Error::ShapeMismatch {
                op: "hstack",
                lhs: panels[0].shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
    }
    let gap = 2;
    let total_w = panels.len() * w + (panels.len() - 1) * gap;
    let mut out = Tensor::full(&[3, h, total_w], 1.0);
    for (i, p) in panels.iter().enumerate() {
        let x0 = i * (w + gap);
        for ch in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    out.data_mut()[ch * h * total_w + y * total_w + x0 + x] =
                        p.data()[ch * h * w + y * w + x];
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb_roundtrip_lossless_for_u8_grid() {
        // Values on the u8 grid survive save/load exactly.
        let t = Tensor::from_fn(&[3, 4, 5], |i| ((i * 7) % 256) as f32 / 255.0);
        let dir = std::env::temp_dir().join("tdpe_imgio_test");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("x.png");
        save_rgb(&p, &t).unwrap();
        let back = load_rgb(&p).unwrap();
        for (a, b) in t.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn model_range_roundtrip() {
        let t = Tensor::from_fn(&[3, 2, 2], |i| i as f32 / 11.0);
        let z = to_model_range(&t).unwrap();
        assert_eq!(z.shape(), &[1, 3, 2, 2]);
        assert!(z.min_value() >= -1.0 && z.max_value() <= 1.0);
        let back = from_model_range(&z).unwrap();
        for (a, b) in t.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
