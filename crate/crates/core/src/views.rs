//! Multi-view crops: at training time an image is resized to `g * R` square
//! and split into a `g x g` grid of `R x R` crops (row-major, view indices
//! `1..=g*g`), plus the whole image resized to `R` (index `g*g + 1`).
//! At test time only the whole view is produced.

use candle_core::{DType, Device, Tensor};
use image::{imageops, GrayImage, RgbImage};

use crate::config::{CLIP_MEAN, CLIP_STD};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewMode {
    Train,
    Test,
}

/// Pixel rectangle `[x0, x0 + size) x [y0, y0 + size)` in the resized frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ViewGeometry {
    pub index: usize,
    pub x0: u32,
    pub y0: u32,
    pub size: u32,
    /// Side of the square frame the rectangle lives in.
    pub frame: u32,
}

impl ViewGeometry {
    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x0 && x < self.x0 + self.size && y >= self.y0 && y < self.y0 + self.size
    }
}

/// Crop rectangles for `n_views` sub-crops of side `resolution`.
pub fn crop_geometry(n_views: usize, resolution: u32) -> Result<Vec<ViewGeometry>> {
    let g = (n_views as f64).sqrt().round() as u32;
    if g == 0 || (g * g) as usize != n_views {
        return Err(Error::config(format!(
            "n_views must be a positive perfect square, got {n_views}"
        )));
    }
    let frame = g * resolution;
    Ok((0..g)
        .flat_map(|row| (0..g).map(move |col| (row, col)))
        .enumerate()
        .map(|(i, (row, col))| ViewGeometry {
            index: i + 1,
            x0: col * resolution,
            y0: row * resolution,
            size: resolution,
            frame,
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct View {
    pub image: RgbImage,
    pub mask: Option<GrayImage>,
    /// 1-based view index; the whole image is `n_views + 1`.
    pub index: usize,
}

#[derive(Debug, Clone)]
pub struct ViewBatch {
    pub origin: String,
    pub views: Vec<View>,
}

impl ViewBatch {
    pub fn whole(&self) -> &View {
        self.views.last().expect("a view batch is never empty")
    }
}

/// Binarize: any nonzero pixel counts as defective.
fn binarize(mask: &GrayImage) -> GrayImage {
    GrayImage::from_fn(mask.width(), mask.height(), |x, y| {
        image::Luma([if mask.get_pixel(x, y)[0] > 0 { 255 } else { 0 }])
    })
}

fn resize_image(img: &RgbImage, side: u32) -> RgbImage {
    if img.dimensions() == (side, side) {
        img.clone()
    } else {
        imageops::resize(img, side, side, imageops::FilterType::Triangle)
    }
}

fn resize_mask(mask: &GrayImage, side: u32) -> GrayImage {
    if mask.dimensions() == (side, side) {
        mask.clone()
    } else {
        imageops::resize(mask, side, side, imageops::FilterType::Nearest)
    }
}

pub fn make_views(
    origin: impl Into<String>,
    image: &RgbImage,
    mask: Option<&GrayImage>,
    mode: ViewMode,
    n_views: usize,
    resolution: u32,
) -> Result<ViewBatch> {
    if let Some(m) = mask {
        if m.dimensions() != image.dimensions() {
            return Err(Error::shape(format!(
                "mask {:?} does not match image {:?}",
                m.dimensions(),
                image.dimensions()
            )));
        }
    }
    let mask = mask.map(binarize);
    let mut views = Vec::new();
    if mode == ViewMode::Train {
        let geoms = crop_geometry(n_views, resolution)?;
        let frame = geoms[0].frame;
        let big = resize_image(image, frame);
        let big_mask = mask.as_ref().map(|m| resize_mask(m, frame));
        for g in &geoms {
            views.push(View {
                image: imageops::crop_imm(&big, g.x0, g.y0, g.size, g.size).to_image(),
                mask: big_mask
                    .as_ref()
                    .map(|m| imageops::crop_imm(m, g.x0, g.y0, g.size, g.size).to_image()),
                index: g.index,
            });
        }
    }
    views.push(View {
        image: resize_image(image, resolution),
        mask: mask.as_ref().map(|m| resize_mask(m, resolution)),
        index: n_views + 1,
    });
    Ok(ViewBatch {
        origin: origin.into(),
        views,
    })
}

/// `[B, 3, R, R]` tensor normalized with the CLIP channel statistics.
pub fn images_to_tensor(images: &[&RgbImage], dtype: DType) -> Result<Tensor> {
    let Some(first) = images.first() else {
        return Err(Error::input("no images"));
    };
    let (w, h) = first.dimensions();
    let plane = (w * h) as usize;
    let mut data = vec![0f32; images.len() * 3 * plane];
    for (b, img) in images.iter().enumerate() {
        if img.dimensions() != (w, h) {
            return Err(Error::shape("images in a batch differ in size"));
        }
        for (i, p) in img.pixels().enumerate() {
            for c in 0..3 {
                data[(b * 3 + c) * plane + i] = (p[c] as f32 / 255.0 - CLIP_MEAN[c]) / CLIP_STD[c];
            }
        }
    }
    Ok(Tensor::from_vec(
        data,
        (images.len(), 3, h as usize, w as usize),
        &Device::Cpu,
    )?
    .to_dtype(dtype)?)
}

/// Binary `[h, w]` row-major mask at the given size (nearest neighbour).
pub fn mask_to_bools(mask: &GrayImage, height: u32, width: u32) -> Vec<bool> {
    let m = if mask.dimensions() == (width, height) {
        mask.clone()
    } else {
        imageops::resize(mask, width, height, imageops::FilterType::Nearest)
    };
    m.pixels().map(|p| p[0] > 0).collect()
}

/// `[B, h, w]` 0/1 tensor; `None` entries are all-normal.
pub fn masks_to_tensor(
    masks: &[Option<&GrayImage>],
    height: usize,
    width: usize,
    dtype: DType,
) -> Result<Tensor> {
    let mut data = Vec::with_capacity(masks.len() * height * width);
    for m in masks {
        match m {
            Some(m) => data.extend(
                mask_to_bools(m, height as u32, width as u32)
                    .into_iter()
                    .map(|b| if b { 1f32 } else { 0.0 }),
            ),
            None => data.extend(std::iter::repeat_n(0f32, height * width)),
        }
    }
    Ok(Tensor::from_vec(data, (masks.len(), height, width), &Device::Cpu)?.to_dtype(dtype)?)
}
