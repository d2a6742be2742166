//! On-disk annotation files. Each image `foo.png` has a sibling `foo.json`.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::detection::{BBox, Detection, InstanceAnnotation, SppClass, Vertex};
use crate::error::{Error, Result};

/// Outdoor box annotations; coordinates are normalized center-size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldAnnotationFile {
    pub image: PathBuf,
    pub width: u32,
    pub height: u32,
    pub boxes: Vec<FieldBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub spp: u8,
    /// Pod partly hidden; carried through files but ignored when counting.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub occluded: Option<bool>,
}

/// Indoor instance annotations; polygons are in pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceAnnotationFile {
    pub image: PathBuf,
    pub width: u32,
    pub height: u32,
    pub instances: Vec<InstanceEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceEntry {
    pub polygon: Vec<Vertex>,
    pub spp: u8,
}

fn check_size(width: u32, height: u32, errors: &mut Vec<String>) {
    if width == 0 || height == 0 {
        errors.push(format!("image size {width}x{height} must be positive"));
    }
}

impl FieldAnnotationFile {
    /// Validates every box; all failures are collected, each naming its box index.
    pub fn detections(&self) -> Result<Vec<Detection>> {
        let mut errors = Vec::new();
        check_size(self.width, self.height, &mut errors);
        let mut out = Vec::with_capacity(self.boxes.len());
        for (i, b) in self.boxes.iter().enumerate() {
            let parsed = SppClass::new(b.spp)
                .and_then(|spp| Ok(Detection::labeled(BBox::new(b.cx, b.cy, b.w, b.h)?, spp)));
            match parsed {
                Ok(d) => out.push(d),
                Err(e) => errors.push(format!("box {i}: {e}")),
            }
        }
        if errors.is_empty() {
            Ok(out)
        } else {
            Err(Error::Itemized(errors))
        }
    }

    pub fn from_detections(image: PathBuf, width: u32, height: u32, dets: &[Detection]) -> Self {
        FieldAnnotationFile {
            image,
            width,
            height,
            boxes: dets
                .iter()
                .map(|d| FieldBox {
                    cx: d.bbox.cx(),
                    cy: d.bbox.cy(),
                    w: d.bbox.w(),
                    h: d.bbox.h(),
                    spp: d.spp.value(),
                    occluded: None,
                })
                .collect(),
        }
    }
}

impl InstanceAnnotationFile {
    pub fn annotations(&self) -> Result<Vec<InstanceAnnotation>> {
        let mut errors = Vec::new();
        check_size(self.width, self.height, &mut errors);
        let mut out = Vec::with_capacity(self.instances.len());
        for (i, inst) in self.instances.iter().enumerate() {
            let parsed = SppClass::new(inst.spp).and_then(|spp| {
                InstanceAnnotation::new(inst.polygon.clone(), spp, self.width, self.height)
            });
            match parsed {
                Ok(a) => out.push(a),
                Err(e) => errors.push(format!("instance {i}: {e}")),
            }
        }
        if errors.is_empty() {
            Ok(out)
        } else {
            Err(Error::Itemized(errors))
        }
    }

    pub fn from_annotations(
        image: PathBuf,
        width: u32,
        height: u32,
        anns: &[InstanceAnnotation],
    ) -> Self {
        InstanceAnnotationFile {
            image,
            width,
            height,
            instances: anns
                .iter()
                .map(|a| InstanceEntry {
                    polygon: a.polygon.clone(),
                    spp: a.spp.value(),
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bad_spp_names_the_box() {
        let json = r#"{"image":"a.png","width":8,"height":8,"boxes":[
            {"cx":0.5,"cy":0.5,"w":0.2,"h":0.2,"spp":2},
            {"cx":0.5,"cy":0.5,"w":0.2,"h":0.2,"spp":5,"occluded":true}]}"#;
        let f: FieldAnnotationFile = serde_json::from_str(json).unwrap();
        let err = f.detections().unwrap_err().to_string();
        assert!(err.contains("box 1"), "{err}");
        assert!(!err.contains("box 0"), "{err}");
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let json = r#"{"image":"a.png","width":8,"height":8,"boxes":[],"extra":1}"#;
        assert!(serde_json::from_str::<FieldAnnotationFile>(json).is_err());
    }

    #[test]
    fn occluded_flag_survives_round_trip() {
        let json = r#"{"image":"a.png","width":8,"height":8,"boxes":[
            {"cx":0.5,"cy":0.5,"w":0.2,"h":0.2,"spp":3,"occluded":true},
            {"cx":0.25,"cy":0.5,"w":0.2,"h":0.2,"spp":1}]}"#;
        let f: FieldAnnotationFile = serde_json::from_str(json).unwrap();
        let back: FieldAnnotationFile =
            serde_json::from_str(&serde_json::to_string(&f).unwrap()).unwrap();
        assert_eq!(f, back);
        assert_eq!(back.boxes[0].occluded, Some(true));
        assert_eq!(back.boxes[1].occluded, None);
    }

    #[test]
    fn instance_polygons_are_validated() {
        let json = r#"{"image":"a.png","width":8,"height":8,"instances":[
            {"polygon":[[1,1],[5,1],[5,5],[1,5]],"spp":1},
            {"polygon":[[1,1],[9,1],[5,5]],"spp":2}]}"#;
        let f: InstanceAnnotationFile = serde_json::from_str(json).unwrap();
        let err = f.annotations().unwrap_err().to_string();
        assert!(err.contains("instance 1"), "{err}");
    }
}
