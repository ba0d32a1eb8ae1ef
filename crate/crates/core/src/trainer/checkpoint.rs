//! Model checkpoint file: a versioned header echoing the config, followed by
//! the raw parameter buffer.

use super::{ClassifierConfig, TrainError, TrainedModel};
use crate::data::ImageShape;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"UEFM";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ClassifierConfig,
    channels: usize,
    height: usize,
    width: usize,
    epochs_run: u32,
    epoch_mean_losses: Vec<f32>,
    param_len: usize,
    stats_len: usize,
}

fn ckpt_err(path: &Path, msg: impl Into<String>) -> TrainError {
    TrainError::Checkpoint {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

pub fn save_model(model: &TrainedModel, path: &Path) -> Result<(), TrainError> {
    let header = Header {
        config: model.config.clone(),
        channels: model.input_shape.channels,
        height: model.input_shape.height,
        width: model.input_shape.width,
        epochs_run: model.epochs_run,
        epoch_mean_losses: model.epoch_mean_losses.clone(),
        param_len: model.params().len(),
        stats_len: model.stats().len(),
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| ckpt_err(path, format!("header encode: {e}")))?;
    let file = fs::File::create(path).map_err(|e| ckpt_err(path, e.to_string()))?;
    let mut w = BufWriter::new(file);
    let mut write = |buf: &[u8]| {
        w.write_all(buf)
            .map_err(|e| ckpt_err(path, e.to_string()))
    };
    write(MAGIC)?;
    write(&VERSION.to_le_bytes())?;
    write(&(header_json.len() as u64).to_le_bytes())?;
    write(&header_json)?;
    for v in model.params().iter().chain(model.stats()) {
        write(&v.to_le_bytes())?;
    }
    w.flush().map_err(|e| ckpt_err(path, e.to_string()))
}

pub fn load_model(path: &Path) -> Result<TrainedModel, TrainError> {
    let file = fs::File::open(path).map_err(|e| ckpt_err(path, e.to_string()))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| ckpt_err(path, e.to_string()))?;
    if &magic != MAGIC {
        return Err(ckpt_err(path, "not a model checkpoint (bad magic)"));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)
        .map_err(|e| ckpt_err(path, e.to_string()))?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(ckpt_err(path, format!("unsupported version {version}")));
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)
        .map_err(|e| ckpt_err(path, e.to_string()))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    r.read_exact(&mut header_json)
        .map_err(|e| ckpt_err(path, e.to_string()))?;
    let header: Header = serde_json::from_slice(&header_json)
        .map_err(|e| ckpt_err(path, format!("header decode: {e}")))?;

    let mut buf = vec![0u8; (header.param_len + header.stats_len) * 4];
    r.read_exact(&mut buf)
        .map_err(|e| ckpt_err(path, e.to_string()))?;
    let values: Vec<f32> = buf
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let (params, stats) = values.split_at(header.param_len);

    TrainedModel::from_parts(
        header.config,
        ImageShape {
            channels: header.channels,
            height: header.height,
            width: header.width,
        },
        params.to_vec(),
        stats.to_vec(),
        header.epochs_run,
        header.epoch_mean_losses,
    )
}
