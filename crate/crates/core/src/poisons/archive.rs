//! Perturbation-set archive: key=value metadata plus a binary tensor file
//! keyed by sample id.

use super::{NormKind, PerturbationBudget, PerturbationSet, PoisonError};
use crate::data::ImageShape;
use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

const META_FILE: &str = "meta.txt";
const TENSOR_FILE: &str = "perturbations.bin";
const FORMAT: &str = "uefilter-perturbations-v1";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PoisonError + '_ {
    move |source| PoisonError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn save_perturbations(set: &PerturbationSet, dir: &Path) -> Result<(), PoisonError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let shape = set.shape();
    let meta_path = dir.join(META_FILE);
    let mut meta = String::new();
    meta.push_str(&format!("format={FORMAT}\n"));
    meta.push_str(&format!("generator={}\n", set.generator));
    meta.push_str(&format!("norm={}\n", set.budget.norm));
    meta.push_str(&format!("bound={}\n", set.budget.bound));
    meta.push_str(&format!("class_conditional={}\n", set.class_conditional));
    if let Some(seed) = set.seed {
        meta.push_str(&format!("seed={seed}\n"));
    }
    meta.push_str(&format!("count={}\n", set.len()));
    meta.push_str(&format!("channels={}\n", shape.channels));
    meta.push_str(&format!("height={}\n", shape.height));
    meta.push_str(&format!("width={}\n", shape.width));
    fs::write(&meta_path, meta).map_err(io_err(&meta_path))?;

    let tensor_path = dir.join(TENSOR_FILE);
    let file = fs::File::create(&tensor_path).map_err(io_err(&tensor_path))?;
    let mut w = BufWriter::new(file);
    for (id, delta) in set.iter() {
        w.write_all(&id.to_le_bytes()).map_err(io_err(&tensor_path))?;
        for v in delta {
            w.write_all(&v.to_le_bytes()).map_err(io_err(&tensor_path))?;
        }
    }
    w.flush().map_err(io_err(&tensor_path))
}

pub fn load_perturbations(dir: &Path) -> Result<PerturbationSet, PoisonError> {
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    let mut pairs = BTreeMap::new();
    for line in text.lines() {
        if let Some((k, v)) = line.trim().split_once('=') {
            pairs.insert(k.to_string(), v.to_string());
        }
    }
    let get = |key: &str| -> Result<&String, PoisonError> {
        pairs.get(key).ok_or_else(|| PoisonError::Format {
            path: meta_path.clone(),
            msg: format!("missing metadata key '{key}'"),
        })
    };
    if get("format")? != FORMAT {
        return Err(PoisonError::Format {
            path: meta_path.clone(),
            msg: "unsupported archive format".into(),
        });
    }
    let parse_usize = |key: &str| -> Result<usize, PoisonError> {
        get(key)?.parse().map_err(|_| PoisonError::Format {
            path: meta_path.clone(),
            msg: format!("bad value for '{key}'"),
        })
    };
    let generator = get("generator")?.clone();
    let norm = match get("norm")?.as_str() {
        "linf" => NormKind::Linf,
        "l2" => NormKind::L2,
        "l0" => NormKind::L0,
        other => {
            return Err(PoisonError::Format {
                path: meta_path.clone(),
                msg: format!("unknown norm '{other}'"),
            })
        }
    };
    let bound: f64 = get("bound")?.parse().map_err(|_| PoisonError::Format {
        path: meta_path.clone(),
        msg: "bad value for 'bound'".into(),
    })?;
    let class_conditional = get("class_conditional")? == "true";
    let seed = pairs.get("seed").and_then(|s| s.parse().ok());
    let count = parse_usize("count")?;
    let shape = ImageShape {
        channels: parse_usize("channels")?,
        height: parse_usize("height")?,
        width: parse_usize("width")?,
    };

    let tensor_path = dir.join(TENSOR_FILE);
    let file = fs::File::open(&tensor_path).map_err(io_err(&tensor_path))?;
    let mut r = BufReader::new(file);
    let mut entries = BTreeMap::new();
    for _ in 0..count {
        let mut id_bytes = [0u8; 8];
        r.read_exact(&mut id_bytes).map_err(io_err(&tensor_path))?;
        let id = u64::from_le_bytes(id_bytes);
        let mut bytes = vec![0u8; shape.len() * 4];
        r.read_exact(&mut bytes).map_err(io_err(&tensor_path))?;
        let delta: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        entries.insert(id, Arc::from(delta));
    }
    PerturbationSet::new(
        generator,
        PerturbationBudget { norm, bound },
        class_conditional,
        seed,
        shape,
        entries,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthSpec};
    use crate::poisons::generate_lsp;

    #[test]
    fn perturbation_archive_roundtrip() {
        let ds = generate_synthetic(&SynthSpec {
            num_samples: 10,
            num_classes: 2,
            seed: 2,
            ..SynthSpec::default()
        })
        .unwrap();
        let set = generate_lsp(&ds, &PerturbationBudget::lsp_default(), 8, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_perturbations(&set, dir.path()).unwrap();
        let back = load_perturbations(dir.path()).unwrap();
        assert_eq!(back.generator, set.generator);
        assert_eq!(back.budget, set.budget);
        assert_eq!(back.seed, set.seed);
        assert_eq!(back.len(), set.len());
        for ((ia, da), (ib, db)) in set.iter().zip(back.iter()) {
            assert_eq!(ia, ib);
            assert_eq!(da, db);
        }
    }
}
