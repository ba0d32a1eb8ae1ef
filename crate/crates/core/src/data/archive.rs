//! Native dataset archive: a directory holding a key=value metadata file and
//! a flat binary tensor file. The round-trip is bit-exact, which the
//! regression and CLI-idempotency tests rely on.

use super::{DataError, DatasetMeta, Image, ImageShape, MixedDataset, SampleRecord};
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const META_FILE: &str = "meta.txt";
const TENSOR_FILE: &str = "samples.bin";
const FORMAT: &str = "uefilter-dataset-v1";

const FLAG_FALSE: u8 = 0;
const FLAG_TRUE: u8 = 1;
const FLAG_NONE: u8 = 2;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Write `dataset` under `dir` (created if missing).
pub fn save_archive(dataset: &MixedDataset, dir: &Path) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let shape = dataset.image_shape();

    let meta_path = dir.join(META_FILE);
    let mut meta = String::new();
    meta.push_str(&format!("format={FORMAT}\n"));
    meta.push_str(&format!("num_samples={}\n", dataset.len()));
    meta.push_str(&format!("num_classes={}\n", dataset.num_classes()));
    meta.push_str(&format!("channels={}\n", shape.channels));
    meta.push_str(&format!("height={}\n", shape.height));
    meta.push_str(&format!("width={}\n", shape.width));
    if let Some(g) = &dataset.metadata.generator {
        meta.push_str(&format!("generator={g}\n"));
    }
    if let Some(r) = dataset.metadata.poison_ratio {
        meta.push_str(&format!("poison_ratio={r}\n"));
    }
    if let Some(s) = dataset.metadata.seed {
        meta.push_str(&format!("seed={s}\n"));
    }
    fs::write(&meta_path, meta).map_err(io_err(&meta_path))?;

    let tensor_path = dir.join(TENSOR_FILE);
    let file = fs::File::create(&tensor_path).map_err(io_err(&tensor_path))?;
    let mut w = BufWriter::new(file);
    let mut write = |buf: &[u8]| w.write_all(buf).map_err(io_err(&tensor_path));
    for s in dataset.samples() {
        write(&s.id.to_le_bytes())?;
        write(&s.original_label.to_le_bytes())?;
        write(&s.current_label.to_le_bytes())?;
        write(&[match s.ground_truth_poisoned {
            Some(false) => FLAG_FALSE,
            Some(true) => FLAG_TRUE,
            None => FLAG_NONE,
        }])?;
        for v in s.image.pixels() {
            write(&v.to_le_bytes())?;
        }
    }
    w.flush().map_err(io_err(&tensor_path))
}

fn parse_meta(path: &Path) -> Result<Vec<(String, String)>, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut pairs = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| DataError::Format {
            path: path.to_path_buf(),
            msg: format!("metadata line without '=': {line}"),
        })?;
        pairs.push((k.to_string(), v.to_string()));
    }
    Ok(pairs)
}

fn meta_get<'a>(pairs: &'a [(String, String)], key: &str) -> Option<&'a str> {
    pairs
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
}

fn meta_parse<T: std::str::FromStr>(
    pairs: &[(String, String)],
    key: &str,
    path: &Path,
) -> Result<T, DataError> {
    meta_get(pairs, key)
        .ok_or_else(|| DataError::Format {
            path: path.to_path_buf(),
            msg: format!("missing metadata key '{key}'"),
        })?
        .parse()
        .map_err(|_| DataError::Format {
            path: path.to_path_buf(),
            msg: format!("metadata key '{key}' is not parseable"),
        })
}

/// Load a dataset previously written by [`save_archive`].
pub fn load_archive(dir: &Path) -> Result<MixedDataset, DataError> {
    let meta_path = dir.join(META_FILE);
    let pairs = parse_meta(&meta_path)?;
    match meta_get(&pairs, "format") {
        Some(f) if f == FORMAT => {}
        other => {
            return Err(DataError::Format {
                path: meta_path.clone(),
                msg: format!("unsupported archive format {other:?}"),
            })
        }
    }
    let num_samples: usize = meta_parse(&pairs, "num_samples", &meta_path)?;
    let num_classes: u16 = meta_parse(&pairs, "num_classes", &meta_path)?;
    let shape = ImageShape {
        channels: meta_parse(&pairs, "channels", &meta_path)?,
        height: meta_parse(&pairs, "height", &meta_path)?,
        width: meta_parse(&pairs, "width", &meta_path)?,
    };
    let metadata = DatasetMeta {
        generator: meta_get(&pairs, "generator").map(str::to_string),
        poison_ratio: match meta_get(&pairs, "poison_ratio") {
            Some(_) => Some(meta_parse(&pairs, "poison_ratio", &meta_path)?),
            None => None,
        },
        seed: match meta_get(&pairs, "seed") {
            Some(_) => Some(meta_parse(&pairs, "seed", &meta_path)?),
            None => None,
        },
    };

    let tensor_path = dir.join(TENSOR_FILE);
    let file = fs::File::open(&tensor_path).map_err(io_err(&tensor_path))?;
    let mut r = BufReader::new(file);
    let pixel_count = shape.len();
    let mut samples = Vec::with_capacity(num_samples);
    for _ in 0..num_samples {
        let mut head = [0u8; 13];
        r.read_exact(&mut head).map_err(io_err(&tensor_path))?;
        let id = u64::from_le_bytes(head[0..8].try_into().unwrap());
        let original = u16::from_le_bytes(head[8..10].try_into().unwrap());
        let current = u16::from_le_bytes(head[10..12].try_into().unwrap());
        let flag = match head[12] {
            FLAG_FALSE => Some(false),
            FLAG_TRUE => Some(true),
            FLAG_NONE => None,
            other => {
                return Err(DataError::Format {
                    path: tensor_path.clone(),
                    msg: format!("bad flag byte {other} for sample {id}"),
                })
            }
        };
        let mut pixel_bytes = vec![0u8; pixel_count * 4];
        r.read_exact(&mut pixel_bytes).map_err(io_err(&tensor_path))?;
        let pixels: Vec<f32> = pixel_bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        samples.push(SampleRecord {
            id,
            image: Image::new(shape, pixels)?,
            original_label: original,
            current_label: current,
            ground_truth_poisoned: flag,
        });
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(io_err(&tensor_path))? != 0 {
        return Err(DataError::Format {
            path: tensor_path.clone(),
            msg: "trailing bytes after the declared sample count".into(),
        });
    }
    MixedDataset::new(samples, num_classes, metadata)
}
