//! COCO-format annotation I/O. `bbox` is `[x, y, width, height]` with the
//! origin at the top-left corner; loading converts to center format and
//! remaps category ids to contiguous `[0, C)`.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::augment::Sample;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::scalar::Scalar;

#[derive(Debug, Serialize, Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
    width: u32,
    height: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    bbox: Vec<f64>,
    area: f64,
    iscrowd: u8,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

/// Parsed annotation file: per-image center-format boxes with contiguous
/// class ids, in file order.
#[derive(Debug, Clone)]
pub struct CocoIndex<T> {
    pub ids: Vec<u64>,
    pub file_names: Vec<String>,
    pub boxes: Vec<Vec<BBox<T>>>,
    pub num_classes: usize,
    pub class_names: Vec<String>,
}

/// Writes samples as a COCO annotation file.
pub fn save_coco<T: Scalar>(
    samples: &[Sample<T>],
    file_names: &[String],
    canvas: usize,
    class_names: &[String],
    path: &Path,
) -> Result<()> {
    let images = samples
        .iter()
        .zip(file_names)
        .map(|(s, f)| CocoImage {
            id: s.image_id,
            file_name: f.clone(),
            width: canvas as u32,
            height: canvas as u32,
        })
        .collect();
    let mut annotations = Vec::new();
    for s in samples {
        for b in &s.boxes {
            let [x0, y0, _, _] = b.corners();
            annotations.push(CocoAnnotation {
                id: annotations.len() as u64 + 1,
                image_id: s.image_id,
                category_id: b.class_id as u64 + 1,
                bbox: vec![x0.as_f64(), y0.as_f64(), b.w.as_f64(), b.h.as_f64()],
                area: (b.w * b.h).as_f64(),
                iscrowd: 0,
            });
        }
    }
    let categories = class_names
        .iter()
        .enumerate()
        .map(|(i, n)| CocoCategory { id: i as u64 + 1, name: n.clone() })
        .collect();
    let file = CocoFile { images, annotations, categories };
    let mut json = serde_json::to_string_pretty(&file)?;
    json.push('\n');
    std::fs::write(path, json)?;
    Ok(())
}

/// Loads a COCO annotation file with record-indexed validation errors.
pub fn load_coco_annotations<T: Scalar>(path: &Path) -> Result<CocoIndex<T>> {
    let text = std::fs::read_to_string(path)?;
    let value: Value = serde_json::from_str(&text)?;
    for key in ["images", "annotations", "categories"] {
        if value.get(key).and_then(Value::as_array).is_none() {
            return Err(Error::Parse {
                index: 0,
                message: format!("missing or non-array top-level key \"{key}\""),
            });
        }
    }
    let file: CocoFile = serde_json::from_value(value).map_err(|e| Error::Parse {
        index: 0,
        message: format!("malformed COCO structure: {e}"),
    })?;

    // contiguous class remap in category order
    let mut cat_map = HashMap::new();
    let mut class_names = Vec::new();
    for (i, c) in file.categories.iter().enumerate() {
        cat_map.insert(c.id, i);
        class_names.push(c.name.clone());
    }

    let mut image_pos = HashMap::new();
    let mut ids = Vec::new();
    let mut file_names = Vec::new();
    let mut boxes: Vec<Vec<BBox<T>>> = Vec::new();
    for img in &file.images {
        image_pos.insert(img.id, ids.len());
        ids.push(img.id);
        file_names.push(img.file_name.clone());
        boxes.push(Vec::new());
    }

    for (idx, ann) in file.annotations.iter().enumerate() {
        let &pos = image_pos.get(&ann.image_id).ok_or_else(|| Error::Parse {
            index: idx,
            message: format!("annotation {} references unknown image_id {}", ann.id, ann.image_id),
        })?;
        if ann.bbox.len() != 4 {
            return Err(Error::Parse {
                index: idx,
                message: format!("bbox must have 4 entries, got {}", ann.bbox.len()),
            });
        }
        let [x, y, w, h] = [ann.bbox[0], ann.bbox[1], ann.bbox[2], ann.bbox[3]];
        if !(w > 0.0 && h > 0.0) || !x.is_finite() || !y.is_finite() {
            return Err(Error::Parse {
                index: idx,
                message: format!("malformed bbox [{x}, {y}, {w}, {h}]"),
            });
        }
        let &class = cat_map.get(&ann.category_id).ok_or_else(|| Error::Parse {
            index: idx,
            message: format!("unknown category_id {}", ann.category_id),
        })?;
        boxes[pos].push(
            BBox::new(
                T::of(x + w / 2.0),
                T::of(y + h / 2.0),
                T::of(w),
                T::of(h),
                class,
                T::one(),
            )
            .map_err(|e| Error::Parse { index: idx, message: e.to_string() })?,
        );
    }

    Ok(CocoIndex {
        ids,
        file_names,
        boxes,
        num_classes: class_names.len(),
        class_names,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        use std::io::Write;
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn minimal_valid_file_loads_one_box() {
        let f = write_tmp(
            r#"{"images":[{"id":1,"file_name":"a.png","width":64,"height":64}],
                "annotations":[{"id":1,"image_id":1,"category_id":7,"bbox":[10,20,30,40],"area":1200,"iscrowd":0}],
                "categories":[{"id":7,"name":"weed"}]}"#,
        );
        let idx = load_coco_annotations::<f64>(f.path()).unwrap();
        assert_eq!(idx.ids, vec![1]);
        assert_eq!(idx.num_classes, 1);
        let b = idx.boxes[0][0];
        // bbox [10,20,30,40] -> center (25, 40), dims (30, 40), class 0
        assert_eq!((b.cx, b.cy, b.w, b.h), (25.0, 40.0, 30.0, 40.0));
        assert_eq!(b.class_id, 0);
    }

    #[test]
    fn missing_top_level_key_is_parse_error() {
        let f = write_tmp(r#"{"images":[],"annotations":[]}"#);
        let err = load_coco_annotations::<f64>(f.path()).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
        assert!(err.to_string().contains("categories"));
    }

    #[test]
    fn dangling_image_id_names_record_index() {
        let f = write_tmp(
            r#"{"images":[{"id":1,"file_name":"a.png","width":64,"height":64}],
                "annotations":[
                  {"id":1,"image_id":1,"category_id":1,"bbox":[1,1,2,2],"area":4,"iscrowd":0},
                  {"id":2,"image_id":99,"category_id":1,"bbox":[1,1,2,2],"area":4,"iscrowd":0}],
                "categories":[{"id":1,"name":"weed"}]}"#,
        );
        match load_coco_annotations::<f64>(f.path()) {
            Err(Error::Parse { index, message }) => {
                assert_eq!(index, 1);
                assert!(message.contains("99"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_bbox_rejected() {
        let f = write_tmp(
            r#"{"images":[{"id":1,"file_name":"a.png","width":64,"height":64}],
                "annotations":[{"id":1,"image_id":1,"category_id":1,"bbox":[1,1,-3,2],"area":4,"iscrowd":0}],
                "categories":[{"id":1,"name":"weed"}]}"#,
        );
        assert!(matches!(
            load_coco_annotations::<f64>(f.path()),
            Err(Error::Parse { index: 0, .. })
        ));
    }

    #[test]
    fn export_import_round_trip_preserves_boxes() {
        use crate::augment::Sample;
        use ndarray::Array3;
        let samples: Vec<Sample<f64>> = (0..3)
            .map(|i| Sample {
                image_id: i,
                image: Array3::zeros((3, 16, 16)),
                boxes: vec![
                    BBox::new(5.25 + i as f64, 6.5, 3.75, 4.125, (i % 2) as usize, 1.0).unwrap(),
                ],
            })
            .collect();
        let files: Vec<String> = (0..3).map(|i| format!("{i}.png")).collect();
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("ann.json");
        save_coco(&samples, &files, 16, &["a".into(), "b".into()], &path).unwrap();
        let idx = load_coco_annotations::<f64>(&path).unwrap();
        for (orig, loaded) in samples.iter().zip(&idx.boxes) {
            for (a, b) in orig.boxes.iter().zip(loaded) {
                assert!((a.cx - b.cx).abs() < 1e-6);
                assert!((a.cy - b.cy).abs() < 1e-6);
                assert!((a.w - b.w).abs() < 1e-6);
                assert!((a.h - b.h).abs() < 1e-6);
                assert_eq!(a.class_id, b.class_id);
            }
        }
    }
}
