//! `root/<domain>/<class>/<image>` corpora.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::imageops::FilterType;
use image::{ImageBuffer, Rgb};

use super::{DomainDataset, LabeledExample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

fn sorted_subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::file(dir, e))? {
        let path = entry?.path();
        if path.is_dir() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn sorted_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::file(dir, e))? {
        let path = entry?.path();
        let ok = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if path.is_file() && ok {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn dir_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Loads every image under `root/<domain>/<class>/`, resized to
/// `image_size x image_size` and scaled to `[0, 1]`.
///
/// Domains are ordered by directory name; class indices follow the sorted
/// union of class directory names across domains.
pub fn load_image_folder(root: impl AsRef<Path>, image_size: usize) -> Result<DomainDataset> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::file(root, "dataset root is not a directory"));
    }
    if image_size == 0 {
        return Err(Error::invalid("image_size", "must be positive"));
    }
    let domain_dirs = sorted_subdirs(root)?;
    if domain_dirs.is_empty() {
        return Err(Error::file(root, "no domains found"));
    }
    let mut layout = Vec::new();
    let mut class_names = BTreeSet::new();
    let mut empty = Vec::new();
    for d in &domain_dirs {
        let classes = sorted_subdirs(d)?;
        if classes.is_empty() {
            empty.push(d.display().to_string());
        }
        for c in &classes {
            let files = sorted_images(c)?;
            if files.is_empty() {
                empty.push(c.display().to_string());
            }
            class_names.insert(dir_name(c));
            layout.push((dir_name(d), dir_name(c), files));
        }
    }
    if !empty.is_empty() {
        return Err(Error::Data(format!(
            "empty domain/class directories: {}",
            empty.join(", ")
        )));
    }
    let class_names: Vec<String> = class_names.into_iter().collect();
    let mut examples = Vec::new();
    for (domain, class, files) in layout {
        let label = class_names
            .iter()
            .position(|c| *c == class)
            .expect("class collected above");
        for f in files {
            let img = image::open(&f).map_err(|e| Error::file(&f, e))?;
            let rgb = img
                .resize_exact(image_size as u32, image_size as u32, FilterType::Triangle)
                .to_rgb8();
            examples.push(LabeledExample {
                id: examples.len(),
                image: Arc::new(rgb_to_tensor(&rgb)),
                label,
                domain: domain.clone(),
                color_index: None,
            });
        }
    }
    Ok(DomainDataset {
        name: dir_name(root),
        domains: domain_dirs.iter().map(|d| dir_name(d)).collect(),
        examples,
        class_names,
    })
}

fn rgb_to_tensor(img: &ImageBuffer<Rgb<u8>, Vec<u8>>) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = p[c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data).expect("image tensor shape")
}

/// `[3, h, w]` raw tensor to an 8-bit RGB image.
pub fn tensor_to_rgb(image: &Tensor) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| {
            let v = image.data()[(c * h + y as usize) * w + x as usize];
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        };
        Rgb([px(0), px(1), px(2)])
    })
}

/// Saves raw `[n, 3, h, w]` batches as one PNG, one batch per row, with a
/// one-pixel white gutter.
pub fn write_image_grid(rows: &[Tensor], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let first = rows
        .first()
        .ok_or_else(|| Error::Data("image grid needs at least one row".into()))?;
    let (h, w) = (first.shape()[2], first.shape()[3]);
    let cols = rows.iter().map(|r| r.shape()[0]).max().unwrap_or(0);
    let (gw, gh) = ((cols * (w + 1) + 1) as u32, (rows.len() * (h + 1) + 1) as u32);
    let mut grid = ImageBuffer::from_pixel(gw, gh, Rgb([255u8, 255, 255]));
    for (r, batch) in rows.iter().enumerate() {
        if batch.shape()[2] != h || batch.shape()[3] != w {
            return Err(Error::shape("write_image_grid", "rows differ in image size"));
        }
        let shape = batch.shape()[1..].to_vec();
        for i in 0..batch.shape()[0] {
            let img = tensor_to_rgb(&Tensor::new(shape.clone(), batch.item_slice(i).to_vec())?);
            let (x0, y0) = ((i * (w + 1) + 1) as u32, (r * (h + 1) + 1) as u32);
            for (x, y, px) in img.enumerate_pixels() {
                grid.put_pixel(x0 + x, y0 + y, *px);
            }
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|err| Error::file(dir, err))?;
    }
    grid.save(path).map_err(|err| Error::file(path, err))
}

/// Writes `ds` as PNG files in the layout [`load_image_folder`] reads.
pub fn write_image_folder(ds: &DomainDataset, root: impl AsRef<Path>) -> Result<usize> {
    let root = root.as_ref();
    for e in &ds.examples {
        let dir = root.join(&e.domain).join(&ds.class_names[e.label]);
        fs::create_dir_all(&dir).map_err(|err| Error::file(&dir, err))?;
        let path = dir.join(format!("{:06}.png", e.id));
        tensor_to_rgb(&e.image)
            .save(&path)
            .map_err(|err| Error::file(&path, err))?;
    }
    Ok(ds.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_png(path: &Path, value: u8) {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        ImageBuffer::from_pixel(8, 8, Rgb([value, value, value]))
            .save(path)
            .unwrap();
    }

    #[test]
    fn loads_sorted_layout() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("art/dog/1.png"), 10);
        write_png(&dir.path().join("art/cat/2.png"), 200);
        let ds = load_image_folder(dir.path(), 4).unwrap();
        assert_eq!(ds.domains, vec!["art"]);
        assert_eq!(ds.class_names, vec!["cat", "dog"]);
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.examples[0].label, 0);
        assert_eq!(ds.image_shape(), Some(&[3usize, 4, 4][..]));
        assert!((ds.examples[0].image.data()[0] - 200.0 / 255.0).abs() < 1e-9);
    }

    #[test]
    fn pacs_shaped_layout() {
        let dir = tempfile::tempdir().unwrap();
        let domains = ["art_painting", "cartoon", "photo", "sketch"];
        let classes = ["dog", "elephant", "giraffe", "guitar", "horse", "house", "person"];
        for d in domains {
            for c in classes {
                write_png(&dir.path().join(d).join(c).join("0.png"), 100);
            }
        }
        let ds = load_image_folder(dir.path(), 4).unwrap();
        assert_eq!(ds.domains.len(), 4);
        assert_eq!(ds.num_classes(), 7);
        assert_eq!(ds.len(), 28);
    }

    #[test]
    fn empty_root_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_image_folder(dir.path(), 4).unwrap_err();
        assert!(err.to_string().contains("no domains found"));
    }

    #[test]
    fn empty_class_dirs_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("a/x/1.png"), 1);
        fs::create_dir_all(dir.path().join("a/y")).unwrap();
        fs::create_dir_all(dir.path().join("b")).unwrap();
        let msg = load_image_folder(dir.path(), 4).unwrap_err().to_string();
        assert!(msg.contains("a/y") && msg.contains("/b"), "{msg}");
    }

    #[test]
    fn undecodable_file_reports_path() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("a/x/broken.png");
        fs::create_dir_all(bad.parent().unwrap()).unwrap();
        fs::write(&bad, b"not a png").unwrap();
        let msg = load_image_folder(dir.path(), 4).unwrap_err().to_string();
        assert!(msg.contains("broken.png"), "{msg}");
    }

    #[test]
    fn write_then_load_round_trip() {
        let spec = super::super::SyntheticShiftSpec::color_shift(2, 0.9, 0.1, 16, 6, 1);
        let ds = super::super::generate_synthetic(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(write_image_folder(&ds, dir.path()).unwrap(), 12);
        let back = load_image_folder(dir.path(), 16).unwrap();
        assert_eq!(back.len(), 12);
        assert_eq!(back.class_names, vec!["disk", "square"]);
        assert_eq!(back.domains, vec!["source", "target"]);
    }
}
