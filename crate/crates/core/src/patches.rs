//! Patch extraction for training and deterministic overlapping tiling plus
//! window-weighted stitching for whole-image translation.

use crate::error::{Error, Result};
use crate::SeedStream;
use ndarray::Array2;
use rand::Rng;

/// Deterministic tiling of an image into overlapping patches with blend
/// weights for stitching.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub stride: usize,
    /// Top-left anchors, unique, row-major.
    pub coords: Vec<(usize, usize)>,
    /// Strictly positive separable raised-cosine window.
    pub blend_window: Array2<f64>,
}

/// Separable Hann window, lifted by 1e-3 so borders stay positive.
fn lifted_hann(patch_size: usize) -> Array2<f64> {
    let axis: Vec<f64> = if patch_size == 1 {
        vec![1.0]
    } else {
        (0..patch_size)
            .map(|i| {
                0.5 * (1.0
                    - (2.0 * std::f64::consts::PI * i as f64 / (patch_size - 1) as f64).cos())
            })
            .collect()
    };
    Array2::from_shape_fn((patch_size, patch_size), |(i, j)| axis[i] * axis[j] + 1e-3)
}

fn axis_anchors(len: usize, patch_size: usize, stride: usize) -> Vec<usize> {
    let mut anchors: Vec<usize> = (0..)
        .map(|i| i * stride)
        .take_while(|&a| a + patch_size <= len)
        .collect();
    let last = len - patch_size;
    if anchors.last() != Some(&last) {
        anchors.push(last); // clamp the final window to the border
    }
    anchors
}

/// Anchors at multiples of `stride`, with the final row/column clamped so the
/// last patch ends exactly at the image border.
pub fn make_grid(
    image_height: usize,
    image_width: usize,
    patch_size: usize,
    stride: usize,
) -> Result<PatchGrid> {
    if stride == 0 || stride > patch_size {
        return Err(Error::config(format!(
            "stride must satisfy 1 <= stride <= patch_size ({stride} vs {patch_size})"
        )));
    }
    if image_height < patch_size || image_width < patch_size {
        return Err(Error::contract(format!(
            "image {image_height}x{image_width} smaller than patch {patch_size}"
        )));
    }
    let rows = axis_anchors(image_height, patch_size, stride);
    let cols = axis_anchors(image_width, patch_size, stride);
    let mut coords = Vec::with_capacity(rows.len() * cols.len());
    for &r in &rows {
        for &c in &cols {
            coords.push((r, c));
        }
    }
    Ok(PatchGrid {
        image_height,
        image_width,
        patch_size,
        stride,
        coords,
        blend_window: lifted_hann(patch_size),
    })
}

/// `n` patches with anchors uniform over all valid positions.
pub fn sample_random_patches(
    image: &Array2<f64>,
    n: usize,
    patch_size: usize,
    rng: &mut SeedStream,
) -> Result<Vec<(Array2<f64>, (usize, usize))>> {
    let (h, w) = image.dim();
    if h < patch_size || w < patch_size {
        return Err(Error::contract(format!(
            "image {h}x{w} smaller than patch {patch_size}"
        )));
    }
    if n == 0 {
        return Err(Error::contract("sample_random_patches: n must be >= 1"));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let r = rng.random_range(0..=h - patch_size);
        let c = rng.random_range(0..=w - patch_size);
        let patch = image
            .slice(ndarray::s![r..r + patch_size, c..c + patch_size])
            .to_owned();
        out.push((patch, (r, c)));
    }
    Ok(out)
}

/// Cut out every grid patch, in anchor order.
pub fn extract_patches(image: &Array2<f64>, grid: &PatchGrid) -> Result<Vec<Array2<f64>>> {
    if image.dim() != (grid.image_height, grid.image_width) {
        return Err(Error::contract(format!(
            "image {:?} does not match grid {}x{}",
            image.dim(),
            grid.image_height,
            grid.image_width
        )));
    }
    let ps = grid.patch_size;
    Ok(grid
        .coords
        .iter()
        .map(|&(r, c)| image.slice(ndarray::s![r..r + ps, c..c + ps]).to_owned())
        .collect())
}

/// Reassemble patches by window-weighted averaging over overlaps.
pub fn stitch(patches: &[Array2<f64>], grid: &PatchGrid) -> Result<Array2<f64>> {
    if patches.len() != grid.coords.len() {
        return Err(Error::contract(format!(
            "stitch: {} patches for {} anchors",
            patches.len(),
            grid.coords.len()
        )));
    }
    let ps = grid.patch_size;
    let mut num = Array2::<f64>::zeros((grid.image_height, grid.image_width));
    let mut den = Array2::<f64>::zeros((grid.image_height, grid.image_width));
    for (patch, &(r, c)) in patches.iter().zip(grid.coords.iter()) {
        if patch.dim() != (ps, ps) {
            return Err(Error::contract("stitch: patch shape mismatch"));
        }
        for i in 0..ps {
            for j in 0..ps {
                let w = grid.blend_window[[i, j]];
                num[[r + i, c + j]] += w * patch[[i, j]];
                den[[r + i, c + j]] += w;
            }
        }
    }
    // full coverage guarantees den > 0 everywhere
    Ok(num / &den)
}
