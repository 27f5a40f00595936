//! Labelled image collections and image-file loading.

use std::path::Path;

use crate::tensor::{Result, Tensor, TensorError};

/// Images of one size, stored `3 × H × W` with values in `[0, 1]`, plus
/// identity, camera and view labels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImageSet {
    pub height: usize,
    pub width: usize,
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub cameras: Vec<usize>,
    pub views: Vec<usize>,
}

impl ImageSet {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn push(&mut self, image: Vec<f64>, label: usize, camera: usize, view: usize) -> Result<()> {
        if image.len() != 3 * self.height * self.width {
            return Err(TensorError::DataLength {
                shape: vec![3, self.height, self.width],
                expected: 3 * self.height * self.width,
                actual: image.len(),
            });
        }
        self.images.push(image);
        self.labels.push(label);
        self.cameras.push(camera);
        self.views.push(view);
        Ok(())
    }

    /// Stacks the selected images into an `(N, 3, H, W)` tensor.
    pub fn batch(&self, ids: &[usize]) -> Result<Tensor> {
        let per = 3 * self.height * self.width;
        let mut data = Vec::with_capacity(ids.len() * per);
        for &i in ids {
            let img = self.images.get(i).ok_or_else(|| TensorError::InvalidArgument {
                op: "batch",
                detail: format!("image {i} out of range for {} images", self.len()),
            })?;
            data.extend_from_slice(img);
        }
        Tensor::new([ids.len(), 3, self.height, self.width], data)
    }

    pub fn all(&self) -> Result<Tensor> {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }

    pub fn subset(&self, ids: &[usize]) -> ImageSet {
        ImageSet {
            height: self.height,
            width: self.width,
            images: ids.iter().map(|&i| self.images[i].clone()).collect(),
            labels: ids.iter().map(|&i| self.labels[i]).collect(),
            cameras: ids.iter().map(|&i| self.cameras[i]).collect(),
            views: ids.iter().map(|&i| self.views[i]).collect(),
        }
    }
}

/// Decodes an image file, resizes it to `height × width` and returns planar
/// RGB in `[0, 1]`.
pub fn load_image(path: &Path, height: usize, width: usize) -> std::result::Result<Vec<f64>, image::ImageError> {
    let img = image::open(path)?
        .resize_exact(width as u32, height as u32, image::imageops::FilterType::Triangle)
        .to_rgb8();
    Ok(planar_from_rgb8(&img))
}

fn planar_from_rgb8(img: &image::RgbImage) -> Vec<f64> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[(c * h + y as usize) * w + x as usize] = px[c] as f64 / 255.0;
        }
    }
    out
}

/// Writes planar RGB in `[0, 1]` as an 8-bit PNG.
pub fn save_png(path: &Path, image: &[f64], height: usize, width: usize) -> std::result::Result<(), image::ImageError> {
    let img = image::RgbImage::from_fn(width as u32, height as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        image::Rgb(std::array::from_fn(|c| {
            (image[(c * height + y) * width + x].clamp(0.0, 1.0) * 255.0).round() as u8
        }))
    });
    img.save(path)
}
