//! Dataset ingestion and file helpers.

mod schema;

pub use schema::{FieldAnnotationFile, FieldBox, InstanceAnnotationFile, InstanceEntry};

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::RgbImage;
use log::debug;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::detection::{Annotations, Domain, ImageRecord};
use crate::error::{Error, Result};

/// Optional file at the dataset root assigning records to domains.
pub const DOMAINS_FILE: &str = "domains.json";
pub const MANIFEST_FILE: &str = "manifest.json";
/// Resolved configuration echoed next to every command's outputs.
pub const RUN_CONFIG_FILE: &str = "run_config.json";
pub const PREDICTIONS_FILE: &str = "predictions.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    /// Box annotations (outdoor images).
    Field,
    /// Polygon annotations (indoor images).
    Instance,
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "field" => Ok(DatasetKind::Field),
            "instance" => Ok(DatasetKind::Instance),
            other => Err(Error::invalid(format!(
                "unknown dataset kind `{other}` (expected field or instance)"
            ))),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Field => "field",
            DatasetKind::Instance => "instance",
        })
    }
}

/// Contents of `domains.json`. Target ids must also be source ids when a
/// source list is given; records not listed as target are source.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainsFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<Vec<String>>,
    #[serde(default)]
    pub target: Vec<String>,
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Pretty JSON with a trailing newline; parent directories are created.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.to_rgb8())
}

pub fn save_png(path: &Path, img: &RgbImage) -> Result<()> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
    write_bytes(path, buf.get_ref())
}

fn is_reserved(name: &str) -> bool {
    [DOMAINS_FILE, MANIFEST_FILE, RUN_CONFIG_FILE, PREDICTIONS_FILE].contains(&name)
        || name.starts_with("report")
}

fn annotation_files(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "json")
                && !path
                    .file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(is_reserved)
            {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Record id: annotation path relative to the root, without extension, `/`-separated.
fn image_id(root: &Path, file: &Path) -> String {
    let rel = file.strip_prefix(root).unwrap_or(file).with_extension("");
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

fn ingest_file(root: &Path, file: &Path, kind: DatasetKind) -> Result<ImageRecord, Vec<String>> {
    let ctx = |msg: String| format!("{}: {msg}", file.display());
    let text = std::fs::read_to_string(file).map_err(|e| vec![ctx(e.to_string())])?;
    let dir = file.parent().unwrap_or(Path::new("."));
    let (image, width, height, annotations) = match kind {
        DatasetKind::Field => {
            let f: FieldAnnotationFile = serde_json::from_str(&text)
                .map_err(|e| vec![ctx(format!("line {}: {e}", e.line()))])?;
            let anns = f.detections().map(Annotations::Boxes);
            (f.image, f.width, f.height, anns)
        }
        DatasetKind::Instance => {
            let f: InstanceAnnotationFile = serde_json::from_str(&text)
                .map_err(|e| vec![ctx(format!("line {}: {e}", e.line()))])?;
            let anns = f.annotations().map(Annotations::Instances);
            (f.image, f.width, f.height, anns)
        }
    };
    let mut errors = Vec::new();
    let annotations = match annotations {
        Ok(a) => Some(a),
        Err(Error::Itemized(items)) => {
            errors.extend(items.into_iter().map(ctx));
            None
        }
        Err(e) => {
            errors.push(ctx(e.to_string()));
            None
        }
    };
    let path = dir.join(&image);
    match image::image_dimensions(&path) {
        Ok((w, h)) if (w, h) != (width, height) => errors.push(ctx(format!(
            "image {} is {w}x{h} but the annotation says {width}x{height}",
            image.display()
        ))),
        Ok(_) => {}
        Err(e) => errors.push(ctx(format!("image {}: {e}", image.display()))),
    }
    match annotations {
        Some(annotations) if errors.is_empty() => Ok(ImageRecord {
            image_id: image_id(root, file),
            path,
            width,
            height,
            domain: Domain::Source,
            annotations,
        }),
        _ => Err(errors),
    }
}

fn assign_domains(root: &Path, records: &mut [ImageRecord]) -> Result<()> {
    let path = root.join(DOMAINS_FILE);
    if !path.exists() {
        return Ok(());
    }
    let domains: DomainsFile = read_json(&path)?;
    let known: BTreeSet<&str> = records.iter().map(|r| r.image_id.as_str()).collect();
    let mut errors = Vec::new();
    let listed = domains.source.iter().flatten().chain(&domains.target);
    for id in listed.filter(|id| !known.contains(id.as_str())) {
        errors.push(format!("{}: unknown image id `{id}`", path.display()));
    }
    if let Some(source) = &domains.source {
        let source: BTreeSet<&str> = source.iter().map(String::as_str).collect();
        for id in domains.target.iter().filter(|id| !source.contains(id.as_str())) {
            errors.push(format!(
                "{}: target image `{id}` is not in the source list",
                path.display()
            ));
        }
    }
    if !errors.is_empty() {
        return Err(Error::Itemized(errors));
    }
    let target: BTreeSet<&str> = domains.target.iter().map(String::as_str).collect();
    for r in records.iter_mut() {
        if target.contains(r.image_id.as_str()) {
            r.domain = Domain::Target;
        }
    }
    Ok(())
}

/// Reads every annotation file under `root` (recursively, sorted by path)
/// and validates it together with its image. All problems are reported at
/// once as an itemized error.
pub fn ingest_dataset(root: &Path, kind: DatasetKind) -> Result<Vec<ImageRecord>> {
    if !root.is_dir() {
        return Err(Error::invalid(format!(
            "dataset root {} is not a directory",
            root.display()
        )));
    }
    let files = annotation_files(root)?;
    if files.is_empty() {
        return Err(Error::invalid(format!(
            "no annotation files under {}",
            root.display()
        )));
    }
    let results: Vec<_> = files
        .par_iter()
        .map(|f| ingest_file(root, f, kind))
        .collect();
    let mut records = Vec::with_capacity(results.len());
    let mut errors = Vec::new();
    for r in results {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => errors.extend(e),
        }
    }
    if !errors.is_empty() {
        return Err(Error::Itemized(errors));
    }
    assign_domains(root, &mut records)?;
    debug!("ingested {} {kind} records from {}", records.len(), root.display());
    Ok(records)
}

/// Writes the annotation file for `record` next to its image, in the schema
/// matching its annotation type.
pub fn write_annotation_file(path: &Path, image: &Path, record: &ImageRecord) -> Result<()> {
    match &record.annotations {
        Annotations::Boxes(dets) => write_json(
            path,
            &FieldAnnotationFile::from_detections(
                image.to_path_buf(),
                record.width,
                record.height,
                dets,
            ),
        ),
        Annotations::Instances(anns) => write_json(
            path,
            &InstanceAnnotationFile::from_annotations(
                image.to_path_buf(),
                record.width,
                record.height,
                anns,
            ),
        ),
    }
}
