//! Before/after grids for every registered transform.

use std::path::{Path, PathBuf};

use super::{make_transform_set_with, TransformParams, REGISTRY};
use crate::batch::Normalizer;
use crate::dataset::{eval_batches, write_image_grid, DomainDataset};
use crate::error::{Error, Result};

/// Writes `<out_dir>/<transform>.png` for each registered transform: the
/// first `count` examples on top, transformed copies below.
pub fn write_previews(
    ds: &DomainDataset,
    count: usize,
    seed: u64,
    params: &TransformParams,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if count < 2 {
        return Err(Error::invalid("count", "need at least 2 examples"));
    }
    let sample = ds.with_examples(ds.examples.iter().take(count).cloned().collect());
    if sample.len() < 2 {
        return Err(Error::Data("dataset has fewer than 2 examples".into()));
    }
    let batch = eval_batches(&sample, sample.len(), Normalizer::default())?.remove(0);
    let mut out = Vec::new();
    for name in REGISTRY {
        let mut set = make_transform_set_with(&[name.to_string()], seed, params)?;
        let after = set.apply(&batch)?.remove(0);
        let path = out_dir.join(format!("{name}.png"));
        write_image_grid(&[batch.raw_images(), after.raw_images()], &path)?;
        out.push(path);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SyntheticShiftSpec};

    #[test]
    fn one_grid_per_transform() {
        let ds = generate_synthetic(&SyntheticShiftSpec::color_shift(2, 0.9, 0.1, 16, 8, 0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = write_previews(&ds, 4, 0, &TransformParams::default(), dir.path()).unwrap();
        assert_eq!(files.len(), REGISTRY.len());
        let img = image::open(&files[3]).unwrap();
        // 4 columns and 2 rows of 16px tiles plus gutters
        assert_eq!((img.width(), img.height()), (4 * 17 + 1, 2 * 17 + 1));
    }
}
