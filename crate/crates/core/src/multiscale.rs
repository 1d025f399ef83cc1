//! Multi-scale representation: interpolate the input to several scales, tile
//! large scales into default-size sub-images, extract per-tile features with
//! the shared backbone, merge, max-pool back to the base spatial size, and
//! concatenate along channels.
//!
//! The pure array ops live here; [`multiscale_extract`] drives the detector
//! backbone through the same pipeline on an autodiff graph.

use ndarray::{concatenate, s, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::detector::{DetectorArch, DetectorParams, FeaturePyramid};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Graph;

/// Which scales to run and the model's default (tile) input size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleSpec {
    /// Positive integer multipliers of `default_size`; must contain 1.
    pub scales: Vec<usize>,
    pub default_size: usize,
}

impl ScaleSpec {
    pub fn new(scales: Vec<usize>, default_size: usize) -> Result<Self> {
        if scales.is_empty() || !scales.contains(&1) {
            return Err(Error::config("scales must be non-empty and contain 1"));
        }
        if scales.iter().any(|&s| s == 0) {
            return Err(Error::config("scales must be positive integers"));
        }
        if scales.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("scales must be strictly increasing"));
        }
        if default_size == 0 {
            return Err(Error::config("default_size must be positive"));
        }
        Ok(Self { scales, default_size })
    }

    pub fn single(default_size: usize) -> Self {
        Self { scales: vec![1], default_size }
    }
}

/// A row-major exact partition of an image into equally-sized tiles.
#[derive(Debug, Clone)]
pub struct TileSet<T> {
    pub tiles: Vec<Array3<T>>,
    /// (y, x) origin of each tile in source-scale pixels.
    pub origins: Vec<(usize, usize)>,
    /// Tiles per side.
    pub grid: usize,
    pub tile_size: usize,
}

/// Bilinear interpolation (half-pixel sampling) to a square `target_size`.
pub fn interpolate_image<T: Scalar>(image: &Array3<T>, target_size: usize) -> Result<Array3<T>> {
    if target_size == 0 {
        return Err(Error::shape("interpolate_image: target size must be positive"));
    }
    let (c, h, w) = image.dim();
    let ymap = crate::tensor::bilinear_axis_map::<T>(h, target_size);
    let xmap = crate::tensor::bilinear_axis_map::<T>(w, target_size);
    let mut out = Array3::<T>::zeros((c, target_size, target_size));
    for ci in 0..c {
        for oy in 0..target_size {
            let (y0, y1, wy) = ymap[oy];
            for ox in 0..target_size {
                let (x0, x1, wx) = xmap[ox];
                let top = image[[ci, y0, x0]] * (T::one() - wx) + image[[ci, y0, x1]] * wx;
                let bot = image[[ci, y1, x0]] * (T::one() - wx) + image[[ci, y1, x1]] * wx;
                out[[ci, oy, ox]] = top * (T::one() - wy) + bot * wy;
            }
        }
    }
    Ok(out)
}

/// Splits an image into `(side/default_size)^2` tiles; the side must be an
/// exact multiple of `default_size`.
pub fn split_tiles<T: Scalar>(image: &Array3<T>, default_size: usize) -> Result<TileSet<T>> {
    let (_, h, w) = image.dim();
    if h != w {
        return Err(Error::shape(format!("split_tiles: image must be square, got {h}x{w}")));
    }
    if default_size == 0 || h % default_size != 0 {
        return Err(Error::shape(format!(
            "split_tiles: size {h} is not a multiple of tile size {default_size}"
        )));
    }
    let grid = h / default_size;
    let mut tiles = Vec::with_capacity(grid * grid);
    let mut origins = Vec::with_capacity(grid * grid);
    for ry in 0..grid {
        for rx in 0..grid {
            let (y0, x0) = (ry * default_size, rx * default_size);
            tiles.push(
                image
                    .slice(s![.., y0..y0 + default_size, x0..x0 + default_size])
                    .to_owned(),
            );
            origins.push((y0, x0));
        }
    }
    Ok(TileSet { tiles, origins, grid, tile_size: default_size })
}

/// Reassembles a [`TileSet`] into the full image (inverse of `split_tiles`).
pub fn reassemble_tiles<T: Scalar>(ts: &TileSet<T>) -> Array3<T> {
    let c = ts.tiles[0].dim().0;
    let side = ts.grid * ts.tile_size;
    let mut out = Array3::<T>::zeros((c, side, side));
    for (tile, &(y0, x0)) in ts.tiles.iter().zip(&ts.origins) {
        out.slice_mut(s![.., y0..y0 + ts.tile_size, x0..x0 + ts.tile_size])
            .assign(tile);
    }
    out
}

/// Spatially mosaics `s*s` per-tile feature grids (row-major tile order).
pub fn merge_tile_features<T: Scalar>(tile_features: &[Array3<T>], s: usize) -> Result<Array3<T>> {
    if s == 0 || tile_features.len() != s * s {
        return Err(Error::shape(format!(
            "merge_tile_features: expected {} tiles, got {}",
            s * s,
            tile_features.len()
        )));
    }
    let dim = tile_features[0].dim();
    if tile_features.iter().any(|t| t.dim() != dim) {
        return Err(Error::shape("merge_tile_features: tile dims differ"));
    }
    let (c, fh, fw) = dim;
    let mut out = Array3::<T>::zeros((c, s * fh, s * fw));
    for (i, t) in tile_features.iter().enumerate() {
        let (ry, rx) = (i / s, i % s);
        out.slice_mut(s![.., ry * fh..(ry + 1) * fh, rx * fw..(rx + 1) * fw])
            .assign(t);
    }
    Ok(out)
}

/// Max-pools with window == stride == `k` (exact partition).
pub fn max_pool<T: Scalar>(grid: &Array3<T>, k: usize) -> Result<Array3<T>> {
    let (c, h, w) = grid.dim();
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::shape(format!("max_pool: window {k} does not partition {h}x{w}")));
    }
    let (ho, wo) = (h / k, w / k);
    let mut out = Array3::<T>::from_elem((c, ho, wo), T::neg_infinity());
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = grid[[ci, y, x]];
                let o = &mut out[[ci, y / k, x / k]];
                if v > *o {
                    *o = v;
                }
            }
        }
    }
    Ok(out)
}

/// Max-pools each merged-scale grid back to the base spatial size and
/// concatenates along channels, base grid first.
pub fn pool_concat_features<T: Scalar>(
    base: &Array3<T>,
    merged_scales: &[Array3<T>],
) -> Result<Array3<T>> {
    let (_, fh, fw) = base.dim();
    let mut parts: Vec<Array3<T>> = vec![base.clone()];
    for m in merged_scales {
        let (_, mh, mw) = m.dim();
        if mh % fh != 0 || mw % fw != 0 || mh / fh != mw / fw {
            return Err(Error::shape(format!(
                "pool_concat_features: merged {mh}x{mw} is not an integer multiple of base {fh}x{fw}"
            )));
        }
        parts.push(max_pool(m, mh / fh)?);
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    concatenate(Axis(0), &views).map_err(|e| Error::shape(format!("pool_concat_features: {e}")))
}

/// Runs the full multi-scale pipeline over every backbone stage and returns
/// the per-stage concatenated features. Spatial dims match the single-scale
/// stages; channels are multiplied by the number of scales.
pub fn multiscale_extract<T: Scalar>(
    arch: &DetectorArch<T>,
    params: &DetectorParams<T>,
    image: &Array3<T>,
    spec: &ScaleSpec,
) -> Result<FeaturePyramid<T>> {
    let mut g = Graph::inference();
    let bound = arch.bind(&mut g, params)?;
    let image_node = g.leaf(image.clone().into_dyn());
    let stages = arch.multiscale_stage_nodes(&mut g, &bound, image_node, spec)?;
    Ok(FeaturePyramid {
        levels: stages
            .iter()
            .map(|&n| {
                g.value(n)
                    .to_owned()
                    .into_dimensionality::<ndarray::Ix3>()
                    .expect("stage features are [C,H,W]")
            })
            .collect(),
    })
}
