//! On-disk layout: one `.npy` feature matrix and one `.rttm` per
//! conversation, listed in a tab-separated manifest.

use std::fs;
use std::path::{Path, PathBuf};

use super::rttm::{labels_from_segments, read_rttm, write_rttm};
use super::{Conversation, FRAME_SECONDS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_NAME: &str = "manifest.tsv";
const MANIFEST_HEADER: &str = "id\tn_speakers\tn_frames\tfeatures\trttm";
const NPY_MAGIC: &[u8] = b"\x93NUMPY";

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub n_speakers: usize,
    pub n_frames: usize,
    pub features: PathBuf,
    pub rttm: PathBuf,
}

/// Little-endian f64 `.npy`, format version 1.0, C order.
pub fn write_npy(path: &Path, t: &Tensor) -> Result<()> {
    let shape = match t.shape() {
        [n] => format!("({n},)"),
        dims => format!(
            "({})",
            dims.iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        ),
    };
    let mut header = format!("{{'descr': '<f8', 'fortran_order': False, 'shape': {shape}, }}");
    let unpadded = NPY_MAGIC.len() + 2 + 2 + header.len() + 1;
    header.push_str(&" ".repeat((64 - unpadded % 64) % 64));
    header.push('\n');
    let mut bytes = Vec::with_capacity(10 + header.len() + t.len() * 8);
    bytes.extend_from_slice(NPY_MAGIC);
    bytes.extend_from_slice(&[1, 0]);
    bytes.extend_from_slice(&(header.len() as u16).to_le_bytes());
    bytes.extend_from_slice(header.as_bytes());
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_npy(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Parse {
        line: 0,
        msg: format!("{}: {msg}", path.display()),
    };
    if bytes.len() < 10 || &bytes[..6] != NPY_MAGIC {
        return Err(bad("not an npy file"));
    }
    let (hlen, hstart) = match bytes[6] {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 if bytes.len() >= 12 => (
            u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize,
            12,
        ),
        _ => return Err(bad("unsupported npy version")),
    };
    let header = std::str::from_utf8(
        bytes
            .get(hstart..hstart + hlen)
            .ok_or_else(|| bad("truncated header"))?,
    )
    .map_err(|_| bad("header is not utf-8"))?;
    if !header.contains("'<f8'") || header.contains("'fortran_order': True") {
        return Err(bad("only little-endian f64 C-order arrays are supported"));
    }
    let open = header
        .find("'shape': (")
        .ok_or_else(|| bad("missing shape"))?
        + "'shape': (".len();
    let close = open
        + header[open..]
            .find(')')
            .ok_or_else(|| bad("missing shape"))?;
    let shape = header[open..close]
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|_| bad("bad shape")))
        .collect::<Result<Vec<_>>>()?;
    let body = &bytes[hstart + hlen..];
    let n: usize = shape.iter().product();
    if body.len() != n * 8 {
        return Err(bad("payload size does not match shape"));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data)
}

/// Write features, RTTM and manifest under `dir`, creating it if needed.
pub fn write_dataset(dir: &Path, convs: &[Conversation]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    for c in convs {
        let feat = format!("{}.npy", c.id);
        let rttm = format!("{}.rttm", c.id);
        write_npy(&dir.join(&feat), &c.x)?;
        let p = dir.join(&rttm);
        fs::write(&p, write_rttm(&c.id, &c.y, &c.speaker_ids, FRAME_SECONDS))
            .map_err(|e| Error::io(&p, e))?;
        manifest.push_str(&format!(
            "{}\t{}\t{}\t{feat}\t{rttm}\n",
            c.id,
            c.n_speakers(),
            c.n_frames()
        ));
    }
    let p = dir.join(MANIFEST_NAME);
    fs::write(&p, manifest).map_err(|e| Error::io(&p, e))
}

fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let p = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let parse_err = |msg: String| Error::Parse { line: i + 1, msg };
        if f.len() != 5 {
            return Err(parse_err(format!("expected 5 columns, got {}", f.len())));
        }
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| parse_err(format!("bad count {s:?}")))
        };
        out.push(ManifestEntry {
            id: f[0].to_string(),
            n_speakers: num(f[1])?,
            n_frames: num(f[2])?,
            features: dir.join(f[3]),
            rttm: dir.join(f[4]),
        });
    }
    Ok(out)
}

pub fn read_dataset(dir: &Path) -> Result<Vec<Conversation>> {
    let entries = read_manifest(dir)?;
    if entries.is_empty() {
        return Err(Error::EmptyInput("dataset manifest"));
    }
    entries
        .into_iter()
        .map(|e| {
            let x = read_npy(&e.features)?;
            if x.ndim() != 2 || x.rows() != e.n_frames {
                return Err(Error::ShapeMismatch {
                    op: "read_dataset",
                    detail: format!(
                        "{}: features {:?}, manifest says {} frames",
                        e.id,
                        x.shape(),
                        e.n_frames
                    ),
                });
            }
            let text = fs::read_to_string(&e.rttm).map_err(|err| Error::io(&e.rttm, err))?;
            let segs = read_rttm(&text)?;
            let speakers: Vec<String> = super::speaker_labels(&segs);
            if speakers.len() != e.n_speakers {
                return Err(Error::Precondition(format!(
                    "{}: rttm has {} speakers, manifest says {}",
                    e.id,
                    speakers.len(),
                    e.n_speakers
                )));
            }
            let y = labels_from_segments(&segs, &speakers, e.n_frames, FRAME_SECONDS)?;
            Conversation::new(e.id, x, y, speakers)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_sim::{make_dataset, DatasetKind, SimConfig};

    #[test]
    fn npy_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.npy");
        let t = Tensor::new(
            vec![3, 2],
            vec![1.0, -2.5, 3.25, f64::MIN_POSITIVE, 0.0, 1e300],
        )
        .unwrap();
        write_npy(&p, &t).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!((bytes.len() - 48) % 8, 0);
        assert_eq!(read_npy(&p).unwrap(), t);
        let v = Tensor::vector(vec![1.0, 2.0]);
        write_npy(&p, &v).unwrap();
        assert_eq!(read_npy(&p).unwrap(), v);
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let convs = make_dataset(DatasetKind::Sc2To4, 6, &SimConfig::default(), 3).unwrap();
        write_dataset(dir.path(), &convs).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back, convs);
    }

    #[test]
    fn missing_manifest_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Io { .. })));
    }
}
