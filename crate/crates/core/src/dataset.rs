//! Labeled image directories: a `labels.csv` with columns `file,label`
//! next to the image files it names (PNG or raw tensors).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{self, FormatError};
use crate::target::LabeledImage;

pub const LABELS_FILE: &str = "labels.csv";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Format { path: PathBuf, source: FormatError },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Labels { path: PathBuf, message: String },
    #[error("dataset {0} has no images")]
    Empty(PathBuf),
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    file: String,
    label: usize,
}

/// Reads every row of `dir/labels.csv`, in file order.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Vec<LabeledImage>, DatasetError> {
    let dir = dir.as_ref();
    let labels = dir.join(LABELS_FILE);
    let text = fs::read(&labels).map_err(|source| DatasetError::Io {
        path: labels.clone(),
        source,
    })?;
    let bad = |message: String| DatasetError::Labels {
        path: labels.clone(),
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_slice());
    let mut out = Vec::new();
    for row in reader.deserialize::<LabelRow>() {
        let row = row.map_err(|e| bad(e.to_string()))?;
        let path = dir.join(&row.file);
        let image =
            io::read_image(&path).map_err(|source| DatasetError::Format { path, source })?;
        out.push(LabeledImage {
            image,
            label: row.label,
        });
    }
    if out.is_empty() {
        return Err(DatasetError::Empty(dir.to_path_buf()));
    }
    Ok(out)
}

/// Writes images as raw tensors `img_00000.rlt`, ... plus `labels.csv`.
pub fn write_dataset(dir: impl AsRef<Path>, items: &[LabeledImage]) -> Result<(), DatasetError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| DatasetError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let labels = dir.join(LABELS_FILE);
    let mut writer = csv::Writer::from_writer(Vec::new());
    for (i, item) in items.iter().enumerate() {
        let file = format!("img_{i:05}.rlt");
        let path = dir.join(&file);
        io::write_raw(&path, &item.image)
            .map_err(|source| DatasetError::Format { path, source })?;
        writer
            .serialize(LabelRow {
                file,
                label: item.label,
            })
            .map_err(|e| DatasetError::Labels {
                path: labels.clone(),
                message: e.to_string(),
            })?;
    }
    let bytes = writer.into_inner().map_err(|e| DatasetError::Labels {
        path: labels.clone(),
        message: e.to_string(),
    })?;
    fs::write(&labels, bytes).map_err(|source| DatasetError::Io {
        path: labels,
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixture::desk_images;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let items = desk_images(6, 3);
        write_dataset(dir.path(), &items).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), items);
        let header = fs::read_to_string(dir.path().join(LABELS_FILE)).unwrap();
        assert!(header.starts_with("file,label\nimg_00000.rlt,0\n"));
    }

    #[test]
    fn png_rows_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let img = desk_images(1, 0).remove(0).image;
        io::write_png(dir.path().join("a.png"), &img).unwrap();
        fs::write(dir.path().join(LABELS_FILE), "file,label\na.png,1\n").unwrap();
        let got = read_dataset(dir.path()).unwrap();
        assert_eq!(got[0].label, 1);
        assert_eq!(got[0].image.shape(), img.shape());

        fs::write(dir.path().join(LABELS_FILE), "file,label\nmissing.png,1\n").unwrap();
        assert!(matches!(
            read_dataset(dir.path()),
            Err(DatasetError::Format { .. })
        ));
        fs::write(dir.path().join(LABELS_FILE), "file,label\na.png,cat\n").unwrap();
        assert!(matches!(
            read_dataset(dir.path()),
            Err(DatasetError::Labels { .. })
        ));
        fs::write(dir.path().join(LABELS_FILE), "file,label\n").unwrap();
        assert!(matches!(
            read_dataset(dir.path()),
            Err(DatasetError::Empty(_))
        ));
        assert!(matches!(
            read_dataset(dir.path().join("nope")),
            Err(DatasetError::Io { .. })
        ));
    }
}
