//! On-disk dataset layout:
//!
//! ```text
//! DIR/annotations.txt      line-oriented manifest
//! DIR/images/000000.raw    3×64×64 bytes, channel-major
//! ```
//!
//! The manifest starts with `#` comment lines; one of them is the header
//! `# images=N classes=C seed=S size=64 channels=3`. Every other line is
//! `image_id class_id x1 y1 x2 y2` with an integer ids and pixel coordinates.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{Annotation, Dataset, Scene, CANVAS, CHANNELS, IMAGE_BYTES};
use crate::error::{Error, Result};

const MANIFEST: &str = "annotations.txt";
const IMAGES: &str = "images";

fn image_path(dir: &Path, id: usize) -> std::path::PathBuf {
    dir.join(IMAGES).join(format!("{id:06}.raw"))
}

pub fn export_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join(IMAGES)).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    manifest.push_str("# latentcl synthetic detection dataset\n");
    manifest.push_str("# image_id class_id x1 y1 x2 y2\n");
    let _ = writeln!(
        manifest,
        "# images={} classes={} seed={} size={CANVAS} channels={CHANNELS}",
        dataset.len(),
        dataset.num_classes,
        dataset.seed
    );
    for (id, scene) in dataset.scenes.iter().enumerate() {
        let path = image_path(dir, id);
        fs::write(&path, &scene.pixels).map_err(|e| Error::io(&path, e))?;
        for o in &scene.objects {
            let [x1, y1, x2, y2] = o.bbox;
            let _ = writeln!(manifest, "{id} {} {x1} {y1} {x2} {y2}", o.class_id);
        }
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

pub fn import_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let fail = |line: usize, message: String| Error::Format { path: path.clone(), message: format!("line {line}: {message}") };

    let mut header: Option<(usize, usize, u64)> = None;
    let mut objects: Vec<Vec<Annotation>> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if comment.contains("images=") {
                let field = |key: &str| -> Result<u64> {
                    comment
                        .split_whitespace()
                        .find_map(|kv| kv.strip_prefix(key))
                        .and_then(|v| v.parse().ok())
                        .ok_or_else(|| fail(line_no, format!("header lacks '{key}'")))
                };
                let (images, classes, seed) = (field("images=")?, field("classes=")?, field("seed=")?);
                if field("size=")? != CANVAS as u64 || field("channels=")? != CHANNELS as u64 {
                    return Err(fail(line_no, "unsupported image geometry".into()));
                }
                header = Some((images as usize, classes as usize, seed));
                objects = vec![Vec::new(); images as usize];
            }
            continue;
        }
        let Some((images, classes, _)) = header else {
            return Err(fail(line_no, "annotation before header".into()));
        };
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 6 {
            return Err(fail(line_no, format!("expected 6 fields, found {}", parts.len())));
        }
        let id: usize = parts[0].parse().map_err(|_| fail(line_no, "bad image id".into()))?;
        let class_id: usize = parts[1].parse().map_err(|_| fail(line_no, "bad class id".into()))?;
        let mut bbox = [0.0; 4];
        for (slot, p) in bbox.iter_mut().zip(&parts[2..]) {
            *slot = p.parse().map_err(|_| fail(line_no, format!("bad coordinate '{p}'")))?;
        }
        if id >= images || class_id == 0 || class_id > classes {
            return Err(fail(line_no, format!("image {id} / class {class_id} out of range")));
        }
        if bbox[0] >= bbox[2] || bbox[1] >= bbox[3] {
            return Err(fail(line_no, "degenerate box".into()));
        }
        objects[id].push(Annotation { class_id, bbox });
    }
    let (_, num_classes, seed) = header.ok_or_else(|| fail(0, "missing header line".into()))?;
    let mut scenes = Vec::with_capacity(objects.len());
    for (id, objs) in objects.into_iter().enumerate() {
        let p = image_path(dir, id);
        let pixels = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        if pixels.len() != IMAGE_BYTES {
            return Err(Error::Format { path: p, message: format!("expected {IMAGE_BYTES} bytes, found {}", pixels.len()) });
        }
        scenes.push(Scene { objects: objs, pixels });
    }
    Ok(Dataset { num_classes, seed, scenes })
}
