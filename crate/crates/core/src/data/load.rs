//! Dataset ingestion from the two supported on-disk layouts.

use super::{DataError, DatasetMeta, Image, ImageShape, MixedDataset, SampleRecord};
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

/// Supported input layouts for [`load_dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    /// CIFAR-10 binary batches: records of 1 label byte + 3072 pixel bytes
    /// (1024 R, 1024 G, 1024 B), 10 classes, 32x32 RGB.
    CifarBinary,
    /// One subdirectory per class, PNG files inside. Classes are the
    /// subdirectory names in lexicographic order.
    ImageDirectory,
}

impl std::str::FromStr for DatasetFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cifar-binary" => Ok(DatasetFormat::CifarBinary),
            "image-directory" => Ok(DatasetFormat::ImageDirectory),
            other => Err(format!("unknown dataset format '{other}'")),
        }
    }
}

const CIFAR_CLASSES: u16 = 10;
const CIFAR_PIXELS: usize = 3 * 32 * 32;
const CIFAR_RECORD: usize = 1 + CIFAR_PIXELS;

/// Load a dataset from disk. Images come back scaled to `[0, 1]` with
/// `current_label == original_label` and no ground-truth flags.
pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<MixedDataset, DataError> {
    match format {
        DatasetFormat::CifarBinary => load_cifar_binary(path),
        DatasetFormat::ImageDirectory => load_image_directory(path),
    }
}

fn load_cifar_binary(path: &Path) -> Result<MixedDataset, DataError> {
    let files: Vec<PathBuf> = if path.is_dir() {
        let mut bins: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|source| DataError::Io {
                path: path.to_path_buf(),
                source,
            })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext == "bin"))
            .collect();
        bins.sort();
        bins
    } else {
        vec![path.to_path_buf()]
    };
    if files.is_empty() {
        return Err(DataError::Ingestion {
            path: path.to_path_buf(),
            msg: "no .bin files found".into(),
        });
    }

    let shape = ImageShape {
        channels: 3,
        height: 32,
        width: 32,
    };
    let mut samples = Vec::new();
    let mut next_id = 0u64;
    for file in &files {
        let mut bytes = Vec::new();
        fs::File::open(file)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|source| DataError::Io {
                path: file.clone(),
                source,
            })?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(DataError::Format {
                path: file.clone(),
                msg: format!(
                    "file size {} is not a positive multiple of the {CIFAR_RECORD}-byte record",
                    bytes.len()
                ),
            });
        }
        for record in bytes.chunks_exact(CIFAR_RECORD) {
            let label = record[0] as u16;
            if label >= CIFAR_CLASSES {
                return Err(DataError::Format {
                    path: file.clone(),
                    msg: format!("label byte {label} >= {CIFAR_CLASSES}"),
                });
            }
            let pixels: Vec<f32> = record[1..].iter().map(|&b| b as f32 / 255.0).collect();
            samples.push(SampleRecord {
                id: next_id,
                image: Image::new(shape, pixels)?,
                original_label: label,
                current_label: label,
                ground_truth_poisoned: None,
            });
            next_id += 1;
        }
    }
    MixedDataset::new(samples, CIFAR_CLASSES, DatasetMeta::default())
}

fn load_image_directory(path: &Path) -> Result<MixedDataset, DataError> {
    let mut class_dirs: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(DataError::Ingestion {
            path: path.to_path_buf(),
            msg: "no class subdirectories found".into(),
        });
    }

    let mut samples = Vec::new();
    let mut shape: Option<ImageShape> = None;
    let mut next_id = 0u64;
    for (label, dir) in class_dirs.iter().enumerate() {
        let mut images: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|source| DataError::Io {
                path: dir.clone(),
                source,
            })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext == "png"))
            .collect();
        images.sort();
        for img_path in &images {
            let decoded = image::open(img_path).map_err(|e| DataError::Ingestion {
                path: img_path.clone(),
                msg: format!("cannot decode image: {e}"),
            })?;
            let rgb = decoded.to_rgb8();
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            let this_shape = ImageShape {
                channels: 3,
                height: h,
                width: w,
            };
            match shape {
                None => shape = Some(this_shape),
                Some(s) if s != this_shape => {
                    return Err(DataError::Format {
                        path: img_path.clone(),
                        msg: format!(
                            "image is {}x{}, dataset is {}x{}",
                            w, h, s.width, s.height
                        ),
                    })
                }
                _ => {}
            }
            // HWC u8 -> CHW f32 in [0, 1].
            let mut pixels = vec![0.0f32; 3 * h * w];
            for y in 0..h {
                for x in 0..w {
                    let p = rgb.get_pixel(x as u32, y as u32);
                    for c in 0..3 {
                        pixels[(c * h + y) * w + x] = p.0[c] as f32 / 255.0;
                    }
                }
            }
            samples.push(SampleRecord {
                id: next_id,
                image: Image::new(shape.unwrap(), pixels)?,
                original_label: label as u16,
                current_label: label as u16,
                ground_truth_poisoned: None,
            });
            next_id += 1;
        }
    }
    if samples.is_empty() {
        return Err(DataError::Ingestion {
            path: path.to_path_buf(),
            msg: "class subdirectories contain no .png images".into(),
        });
    }
    MixedDataset::new(samples, class_dirs.len() as u16, DatasetMeta::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_cifar_file(path: &Path, records: &[(u8, u8)]) {
        // (label, fill byte) per record
        let mut bytes = Vec::new();
        for &(label, fill) in records {
            bytes.push(label);
            bytes.extend(std::iter::repeat(fill).take(CIFAR_PIXELS));
        }
        fs::File::create(path).unwrap().write_all(&bytes).unwrap();
    }

    #[test]
    fn cifar_binary_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("batch.bin");
        write_cifar_file(&file, &[(3, 0), (7, 255), (0, 128)]);
        let ds = load_dataset(&file, DatasetFormat::CifarBinary).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.num_classes(), 10);
        assert_eq!(ds.image_shape().len(), CIFAR_PIXELS);
        assert_eq!(ds.samples()[0].original_label, 3);
        assert_eq!(ds.samples()[1].image.pixels()[0], 1.0);
        assert!((ds.samples()[2].image.pixels()[0] - 128.0 / 255.0).abs() < 1e-7);
        assert!(ds.samples().iter().all(|s| s.ground_truth_poisoned.is_none()));
    }

    #[test]
    fn cifar_binary_rejects_bad_label() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("bad.bin");
        write_cifar_file(&file, &[(10, 0)]);
        let err = load_dataset(&file, DatasetFormat::CifarBinary).unwrap_err();
        assert!(matches!(err, DataError::Format { .. }), "{err}");
    }

    #[test]
    fn cifar_binary_rejects_truncated_file() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("trunc.bin");
        fs::File::create(&file).unwrap().write_all(&[1, 2, 3]).unwrap();
        let err = load_dataset(&file, DatasetFormat::CifarBinary).unwrap_err();
        assert!(matches!(err, DataError::Format { .. }), "{err}");
    }

    #[test]
    fn image_directory_counts_classes() {
        let dir = tempfile::tempdir().unwrap();
        for class in ["a_first", "b_second"] {
            let class_dir = dir.path().join(class);
            fs::create_dir(&class_dir).unwrap();
            for i in 0..5 {
                let img = image::RgbImage::from_pixel(8, 8, image::Rgb([i * 40, 10, 200]));
                img.save(class_dir.join(format!("img{i}.png"))).unwrap();
            }
        }
        let ds = load_dataset(dir.path(), DatasetFormat::ImageDirectory).unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!(ds.num_classes(), 2);
        assert_eq!(ds.samples()[0].original_label, 0);
        assert_eq!(ds.samples()[9].original_label, 1);
    }

    #[test]
    fn empty_image_directory_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_dataset(dir.path(), DatasetFormat::ImageDirectory).unwrap_err();
        assert!(matches!(err, DataError::Ingestion { .. }), "{err}");
    }
}
