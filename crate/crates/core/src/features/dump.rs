//! Binary feature dumps: `<base>.bin` holds row-major little-endian `f64`
//! values and `<base>.json` describes them.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::mel::MelSpectrogram;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DumpKind {
    Mel {
        hop_size: usize,
        win_size: usize,
        n_mels: usize,
        sample_rate: u32,
    },
    Latent {
        extractor_id: String,
        frame_period_ms: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpSidecar {
    pub shape: [usize; 2],
    pub dtype: String,
    #[serde(flatten)]
    pub kind: DumpKind,
}

pub fn dump_paths(base: &Path) -> (PathBuf, PathBuf) {
    let s = base.as_os_str().to_string_lossy();
    (
        PathBuf::from(format!("{s}.bin")),
        PathBuf::from(format!("{s}.json")),
    )
}

pub fn write_dump(base: &Path, m: &Matrix, kind: DumpKind) -> Result<()> {
    let (bin, json) = dump_paths(base);
    let mut bytes = Vec::with_capacity(m.data().len() * 8);
    for v in m.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
    let sidecar = DumpSidecar {
        shape: [m.rows(), m.cols()],
        dtype: "float64-le".into(),
        kind,
    };
    std::fs::write(&json, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::io(&json, e))
}

pub fn read_dump(base: &Path) -> Result<(Matrix, DumpKind)> {
    let (bin, json) = dump_paths(base);
    let text = std::fs::read(&json).map_err(|e| Error::io(&json, e))?;
    let sidecar: DumpSidecar = serde_json::from_slice(&text)?;
    if sidecar.dtype != "float64-le" {
        return Err(Error::invalid(format!(
            "unsupported dump dtype {}",
            sidecar.dtype
        )));
    }
    let raw = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let [rows, cols] = sidecar.shape;
    if raw.len() != rows * cols * 8 {
        return Err(Error::invalid(format!(
            "{} holds {} bytes, sidecar declares {rows}x{cols}",
            bin.display(),
            raw.len()
        )));
    }
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((Matrix::from_vec(rows, cols, data)?, sidecar.kind))
}

pub fn write_mel(base: &Path, m: &MelSpectrogram) -> Result<()> {
    write_dump(
        base,
        &m.values,
        DumpKind::Mel {
            hop_size: m.hop_size,
            win_size: m.win_size,
            n_mels: m.n_mels,
            sample_rate: m.sample_rate,
        },
    )
}

pub fn read_mel(base: &Path) -> Result<MelSpectrogram> {
    match read_dump(base)? {
        (
            values,
            DumpKind::Mel {
                hop_size,
                win_size,
                n_mels,
                sample_rate,
            },
        ) => Ok(MelSpectrogram {
            values,
            hop_size,
            win_size,
            n_mels,
            sample_rate,
        }),
        (_, other) => Err(Error::invalid(format!(
            "expected a mel dump, found {other:?}"
        ))),
    }
}
