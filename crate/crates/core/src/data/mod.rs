//! Datasets: synthetic scene generation, COCO-format ingestion, split
//! construction, and detection metrics.

pub mod coco;
pub mod eval;
pub mod split;
pub mod synthetic;

use ndarray::Array3;

use crate::augment::Sample;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::scalar::Scalar;

pub use coco::{load_coco_annotations, save_coco};
pub use eval::{evaluate_map, EvalResult};
pub use split::{make_split, SplitManifest};
pub use synthetic::{gen_synthetic_dataset, render_scene, DatasetManifest, SyntheticSceneSpec};

/// An in-memory detection dataset; images are `[3, S, S]` in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Dataset<T> {
    pub ids: Vec<u64>,
    pub images: Vec<Array3<T>>,
    pub boxes: Vec<Vec<BBox<T>>>,
    pub num_classes: usize,
    pub image_size: usize,
    pub class_names: Vec<String>,
}

impl<T: Scalar> Dataset<T> {
    /// Builds an in-memory dataset from rendered samples.
    pub fn from_samples(samples: Vec<Sample<T>>, num_classes: usize, class_names: Vec<String>) -> Self {
        let image_size = samples.first().map_or(0, |s| s.image.dim().1);
        Self {
            ids: samples.iter().map(|s| s.image_id).collect(),
            boxes: samples.iter().map(|s| s.boxes.clone()).collect(),
            images: samples.into_iter().map(|s| s.image).collect(),
            num_classes,
            image_size,
            class_names,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn sample(&self, index: usize) -> Sample<T> {
        Sample {
            image_id: self.ids[index],
            image: self.images[index].clone(),
            boxes: self.boxes[index].clone(),
        }
    }

    pub fn index_of(&self, id: u64) -> Option<usize> {
        self.ids.iter().position(|&i| i == id)
    }

    /// Loads a dataset directory (`images/` plus `annotations.json`).
    pub fn load(dir: &std::path::Path) -> Result<Self> {
        let ann_path = dir.join("annotations.json");
        let index = load_coco_annotations::<T>(&ann_path)?;
        let mut images = Vec::with_capacity(index.ids.len());
        let mut size = None;
        for file in &index.file_names {
            let img = load_png::<T>(&dir.join("images").join(file))?;
            let s = img.dim().1;
            if *size.get_or_insert(s) != s {
                return Err(Error::shape("dataset images must share one size"));
            }
            images.push(img);
        }
        Ok(Self {
            ids: index.ids,
            images,
            boxes: index.boxes,
            num_classes: index.num_classes,
            image_size: size.unwrap_or(0),
            class_names: index.class_names,
        })
    }
}

/// Decodes an 8-bit RGB PNG into `[3, H, W]` scaled to `[0, 1]`.
pub fn load_png<T: Scalar>(path: &std::path::Path) -> Result<Array3<T>> {
    let img = image::open(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::<T>::zeros((3, h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = T::of(p.0[c] as f64 / 255.0);
        }
    }
    Ok(out)
}

/// Encodes `[3, H, W]` in `[0, 1]` as an 8-bit RGB PNG.
pub fn save_png<T: Scalar>(image: &Array3<T>, path: &std::path::Path) -> Result<()> {
    let (_, h, w) = image.dim();
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px: [u8; 3] = std::array::from_fn(|c| {
                (image[[c, y, x]].as_f64().clamp(0.0, 1.0) * 255.0).round() as u8
            });
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}
