//! Model container: a short text manifest terminated by an `end` line, then
//! the matrices as little-endian `f64`, row-major, in the order
//! `mu, F, Sw, Sb[, lda mean, lda projection]`. The CRC-32 of that payload is
//! stored in the manifest.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::PldaModel;
use crate::corpus::format_f64;
use crate::error::{Error, Result};
use crate::preprocess::LdaTransform;

pub const MODEL_FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "mosgplda-model";

fn push_matrix(buf: &mut Vec<u8>, m: &DMatrix<f64>) {
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            buf.extend_from_slice(&m[(r, c)].to_le_bytes());
        }
    }
}

fn push_vector(buf: &mut Vec<u8>, v: &DVector<f64>) {
    for x in v.iter() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn write_model<W: Write>(model: &PldaModel, lda: Option<&LdaTransform>, w: &mut W) -> Result<()> {
    model.validate()?;
    let (d, r) = (model.dim(), model.rank());
    let mut payload = Vec::new();
    push_vector(&mut payload, &model.mu);
    push_matrix(&mut payload, &model.f);
    push_matrix(&mut payload, &model.sigma_w);
    push_matrix(&mut payload, &model.sigma_b);
    if let Some(t) = lda {
        if t.out_dim() != d {
            return Err(Error::InvalidData(format!(
                "LDA output dimension {} does not match model dimension {d}",
                t.out_dim()
            )));
        }
        push_vector(&mut payload, &t.mean);
        push_matrix(&mut payload, &t.projection);
    }
    let mut manifest = String::new();
    manifest.push_str(&format!("{MAGIC}\nformat_version={MODEL_FORMAT_VERSION}\nd={d}\nr={r}\n"));
    manifest.push_str(&format!(
        "alpha={}\n",
        model.alpha.map(format_f64).unwrap_or_else(|| "none".into())
    ));
    match lda {
        Some(t) => manifest.push_str(&format!("has_lda=1\nlda_in_dim={}\n", t.in_dim())),
        None => manifest.push_str("has_lda=0\n"),
    }
    manifest.push_str(&format!(
        "payload_bytes={}\nchecksum={:08x}\nend\n",
        payload.len(),
        crc32fast::hash(&payload)
    ));
    let io = |e| Error::ModelFormat(format!("write failed: {e}"));
    w.write_all(manifest.as_bytes()).map_err(io)?;
    w.write_all(&payload).map_err(io)?;
    Ok(())
}

pub fn save_model(model: &PldaModel, lda: Option<&LdaTransform>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_model(model, lda, &mut buf)?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(PldaModel, Option<LdaTransform>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_model(&bytes)
}

struct Manifest {
    d: usize,
    r: usize,
    alpha: Option<f64>,
    lda_in: Option<usize>,
    payload_bytes: usize,
    checksum: u32,
}

fn parse_manifest(bytes: &[u8]) -> Result<(Manifest, usize)> {
    let mut pos = 0;
    let mut fields = std::collections::HashMap::new();
    let mut first = true;
    loop {
        let rest = &bytes[pos..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::ModelFormat("truncated manifest".into()))?;
        let line = std::str::from_utf8(&rest[..nl]).map_err(|_| Error::ModelFormat("manifest is not UTF-8".into()))?;
        pos += nl + 1;
        if first {
            if line != MAGIC {
                return Err(Error::ModelFormat("not a model file".into()));
            }
            first = false;
            continue;
        }
        if line == "end" {
            break;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::ModelFormat(format!("bad manifest line {line:?}")))?;
        fields.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| fields.get(k).ok_or_else(|| Error::ModelFormat(format!("manifest lacks {k}")));
    let num = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::ModelFormat(format!("manifest field {k} is not an integer")))
    };
    let version: u32 = get("format_version")?
        .parse()
        .map_err(|_| Error::ModelFormat("format_version is not an integer".into()))?;
    if version != MODEL_FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let alpha = match get("alpha")?.as_str() {
        "none" => None,
        s => Some(s.parse().map_err(|_| Error::ModelFormat("alpha is not a number".into()))?),
    };
    let lda_in = match get("has_lda")?.as_str() {
        "0" => None,
        "1" => Some(num("lda_in_dim")?),
        other => return Err(Error::ModelFormat(format!("has_lda must be 0 or 1, got {other:?}"))),
    };
    let checksum = u32::from_str_radix(get("checksum")?, 16).map_err(|_| Error::ModelFormat("checksum is not hex".into()))?;
    Ok((
        Manifest {
            d: num("d")?,
            r: num("r")?,
            alpha,
            lda_in,
            payload_bytes: num("payload_bytes")?,
            checksum,
        },
        pos,
    ))
}

struct Cursor<'a> {
    data: &'a [u8],
}

impl Cursor<'_> {
    fn next(&mut self) -> f64 {
        let (head, tail) = self.data.split_at(8);
        self.data = tail;
        f64::from_le_bytes(head.try_into().expect("8 bytes"))
    }

    fn vector(&mut self, n: usize) -> DVector<f64> {
        DVector::from_iterator(n, (0..n).map(|_| self.next()))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> DMatrix<f64> {
        let flat: Vec<f64> = (0..rows * cols).map(|_| self.next()).collect();
        DMatrix::from_row_slice(rows, cols, &flat)
    }
}

pub fn read_model(bytes: &[u8]) -> Result<(PldaModel, Option<LdaTransform>)> {
    let (m, start) = parse_manifest(bytes)?;
    let payload = &bytes[start..];
    let actual = crc32fast::hash(payload);
    if actual != m.checksum || payload.len() != m.payload_bytes {
        return Err(Error::Checksum {
            expected: m.checksum,
            actual,
        });
    }
    let (d, r) = (m.d, m.r);
    let mut expected = d + d * r + 2 * d * d;
    if let Some(n_in) = m.lda_in {
        expected += n_in + d * n_in;
    }
    if payload.len() != expected * 8 {
        return Err(Error::ModelFormat(format!(
            "payload holds {} bytes, dimensions require {}",
            payload.len(),
            expected * 8
        )));
    }
    let mut cur = Cursor { data: payload };
    let model = PldaModel {
        mu: cur.vector(d),
        f: cur.matrix(d, r),
        sigma_w: cur.matrix(d, d),
        sigma_b: cur.matrix(d, d),
        alpha: m.alpha,
    };
    let lda = m.lda_in.map(|n_in| LdaTransform {
        mean: cur.vector(n_in),
        projection: cur.matrix(d, n_in),
    });
    model.validate()?;
    Ok((model, lda))
}
