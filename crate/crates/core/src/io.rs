//! On-disk formats: little-endian binary containers for datasets, encoder
//! checkpoints, and descriptor dumps, plus CSV for epoch logs and spectra
//! and a flat key=value run manifest.
//!
//! Every format round-trips bit-exactly. Floats in CSV are written with
//! Rust's shortest-round-trip formatting, so parsing them back yields the
//! original bit pattern.

use crate::error::{Error, Result};
use crate::harness::{EpochRecord, RetrievalDataset};
use crate::linalg::Matrix;
use crate::model::MlpEncoder;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

const DATASET_MAGIC: &[u8; 4] = b"GRMD";
const MODEL_MAGIC: &[u8; 4] = b"GRMM";
const QUEUE_MAGIC: &[u8; 4] = b"GRMQ";
const FORMAT_VERSION: u8 = 1;

/// Column order of the epoch-log CSV.
pub const EPOCH_LOG_HEADER: &str = "epoch,loss,desc_cond,grad_cond,recall1,recall5,recall10";

// ───────────────────────── low-level helpers ───────────────────────────

fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_header<R: Read>(r: &mut R, magic: &[u8; 4], what: &str) -> Result<()> {
    let mut got = [0u8; 4];
    r.read_exact(&mut got)?;
    if &got != magic {
        return Err(Error::Format(format!(
            "bad magic {:?} for {what} file",
            String::from_utf8_lossy(&got)
        )));
    }
    let mut version = [0u8; 1];
    r.read_exact(&mut version)?;
    if version[0] != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported {what} format version {}",
            version[0]
        )));
    }
    Ok(())
}

fn expect_eof<R: Read>(r: &mut R, what: &str) -> Result<()> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(()),
        _ => Err(Error::Format(format!("trailing bytes in {what} file"))),
    }
}

/// Shortest exact decimal form of an f64 (round-trips bit-exactly).
fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| Error::Format(format!("bad float {s:?} in {what}")))
}

// ───────────────────────────── datasets ────────────────────────────────

/// Writes a dataset: magic `GRMD`, version, `places`/`samples_per_place`/
/// `dim` as u32, inputs as f32 rows (place-major), then one u32 place id
/// per sample.
pub fn save_dataset(path: &Path, data: &RetrievalDataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&[FORMAT_VERSION])?;
    write_u32(&mut w, data.num_places() as u32)?;
    write_u32(&mut w, data.samples_per_place() as u32)?;
    write_u32(&mut w, data.dim() as u32)?;
    for &v in data.inputs().data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    for &p in data.place_ids() {
        write_u32(&mut w, p)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset written by [`save_dataset`].
pub fn load_dataset(path: &Path) -> Result<RetrievalDataset> {
    let mut r = BufReader::new(File::open(path)?);
    read_header(&mut r, DATASET_MAGIC, "dataset")?;
    let places = read_u32(&mut r)? as usize;
    let spp = read_u32(&mut r)? as usize;
    let dim = read_u32(&mut r)? as usize;
    let n = places
        .checked_mul(spp)
        .ok_or_else(|| Error::Format("dataset size overflows".into()))?;
    let total = n
        .checked_mul(dim)
        .ok_or_else(|| Error::Format("dataset size overflows".into()))?;
    let mut data = Vec::with_capacity(total);
    let mut buf = [0u8; 4];
    for _ in 0..total {
        r.read_exact(&mut buf)?;
        data.push(f32::from_le_bytes(buf) as f64);
    }
    let mut place_ids = Vec::with_capacity(n);
    for _ in 0..n {
        place_ids.push(read_u32(&mut r)?);
    }
    expect_eof(&mut r, "dataset")?;
    let inputs = Matrix::from_flat(n, dim, data)?;
    let data = RetrievalDataset::from_parts(inputs, place_ids)?;
    if data.num_places() != places || data.samples_per_place() != spp {
        return Err(Error::Format(format!(
            "dataset header says {places} x {spp} but ids describe {} x {}",
            data.num_places(),
            data.samples_per_place()
        )));
    }
    Ok(data)
}

// ──────────────────────────── checkpoints ──────────────────────────────

/// Writes an encoder checkpoint: magic `GRMM`, version, layer-size list
/// (count then sizes, u32), then per layer the row-major f64 weight matrix
/// followed by the bias vector.
pub fn save_encoder(path: &Path, encoder: &MlpEncoder) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&[FORMAT_VERSION])?;
    let sizes = encoder.layer_sizes();
    write_u32(&mut w, sizes.len() as u32)?;
    for &s in &sizes {
        write_u32(&mut w, s as u32)?;
    }
    for l in 0..encoder.num_layers() {
        let (weight, bias) = encoder.layer_params(l);
        for &v in weight.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        for &v in bias {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint written by [`save_encoder`].
pub fn load_encoder(path: &Path) -> Result<MlpEncoder> {
    let mut r = BufReader::new(File::open(path)?);
    read_header(&mut r, MODEL_MAGIC, "checkpoint")?;
    let count = read_u32(&mut r)? as usize;
    if count < 2 {
        return Err(Error::Format(format!(
            "checkpoint needs at least 2 layer sizes, found {count}"
        )));
    }
    let mut sizes = Vec::with_capacity(count);
    for _ in 0..count {
        let s = read_u32(&mut r)? as usize;
        if s == 0 {
            return Err(Error::Format("zero layer size in checkpoint".into()));
        }
        sizes.push(s);
    }
    let mut buf = [0u8; 8];
    let mut read_f64 = |r: &mut BufReader<File>| -> Result<f64> {
        r.read_exact(&mut buf)?;
        Ok(f64::from_le_bytes(buf))
    };
    let mut layers = Vec::with_capacity(count - 1);
    for l in 0..count - 1 {
        let (rows, cols) = (sizes[l + 1], sizes[l]);
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(read_f64(&mut r)?);
        }
        let mut bias = Vec::with_capacity(rows);
        for _ in 0..rows {
            bias.push(read_f64(&mut r)?);
        }
        layers.push((Matrix::from_flat(rows, cols, data)?, bias));
    }
    expect_eof(&mut r, "checkpoint")?;
    MlpEncoder::from_layers(layers)
}

// ────────────────────────── descriptor dumps ───────────────────────────

/// Writes a descriptor batch (e.g. a memory-queue snapshot): magic `GRMQ`,
/// version, row count and dim as u32, then f64 rows.
pub fn save_descriptors(path: &Path, descriptors: &Matrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(QUEUE_MAGIC)?;
    w.write_all(&[FORMAT_VERSION])?;
    write_u32(&mut w, descriptors.rows() as u32)?;
    write_u32(&mut w, descriptors.cols() as u32)?;
    for &v in descriptors.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a descriptor batch written by [`save_descriptors`].
pub fn load_descriptors(path: &Path) -> Result<Matrix> {
    let mut r = BufReader::new(File::open(path)?);
    read_header(&mut r, QUEUE_MAGIC, "descriptor")?;
    let rows = read_u32(&mut r)? as usize;
    let cols = read_u32(&mut r)? as usize;
    let total = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Format("descriptor dump size overflows".into()))?;
    let mut data = Vec::with_capacity(total);
    let mut buf = [0u8; 8];
    for _ in 0..total {
        r.read_exact(&mut buf)?;
        data.push(f64::from_le_bytes(buf));
    }
    expect_eof(&mut r, "descriptor")?;
    Matrix::from_flat(rows, cols, data)
}

// ───────────────────────────── epoch logs ──────────────────────────────

/// Writes the per-epoch training log as CSV with header
/// [`EPOCH_LOG_HEADER`]. The alignment diagnostic lives in the manifest
/// and spectra files, not here.
pub fn save_epoch_log(path: &Path, log: &[EpochRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{EPOCH_LOG_HEADER}")?;
    for rec in log {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            rec.epoch,
            fmt_f64(rec.loss),
            fmt_f64(rec.desc_cond),
            fmt_f64(rec.grad_cond),
            fmt_f64(rec.recall1),
            fmt_f64(rec.recall5),
            fmt_f64(rec.recall10)
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a log written by [`save_epoch_log`]. The alignment column is
/// reconstructed as 0 (it is not serialized).
pub fn load_epoch_log(path: &Path) -> Result<Vec<EpochRecord>> {
    let r = BufReader::new(File::open(path)?);
    let mut lines = r.lines();
    let header = lines
        .next()
        .transpose()?
        .ok_or_else(|| Error::Format("empty epoch log".into()))?;
    if header.trim() != EPOCH_LOG_HEADER {
        return Err(Error::Format("missing epoch-log header".into()));
    }
    let mut out = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::Format(format!(
                "expected 7 epoch-log fields, found {}",
                fields.len()
            )));
        }
        out.push(EpochRecord {
            epoch: fields[0]
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("bad epoch {:?}", fields[0])))?,
            loss: parse_f64(fields[1], "epoch log")?,
            desc_cond: parse_f64(fields[2], "epoch log")?,
            grad_cond: parse_f64(fields[3], "epoch log")?,
            recall1: parse_f64(fields[4], "epoch log")?,
            recall5: parse_f64(fields[5], "epoch log")?,
            recall10: parse_f64(fields[6], "epoch log")?,
            desc_grad_diag_mass: 0.0,
        });
    }
    Ok(out)
}

// ─────────────────────────── spectra / matrices ────────────────────────

/// Writes a vector (one value per line) under a `# dim=N` comment line.
pub fn save_vector_csv(path: &Path, values: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "# dim={}", values.len())?;
    for &v in values {
        writeln!(w, "{}", fmt_f64(v))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a vector written by [`save_vector_csv`].
pub fn load_vector_csv(path: &Path) -> Result<Vec<f64>> {
    let r = BufReader::new(File::open(path)?);
    let mut lines = r.lines();
    let dim = parse_dim_comment(lines.next().transpose()?.as_deref())?;
    let mut out = Vec::with_capacity(dim);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_f64(&line, "vector")?);
    }
    if out.len() != dim {
        return Err(Error::Format(format!(
            "vector declares dim {dim} but holds {} values",
            out.len()
        )));
    }
    Ok(out)
}

/// Writes a square matrix as comma-separated rows under a `# dim=N`
/// comment line.
pub fn save_matrix_csv(path: &Path, matrix: &Matrix) -> Result<()> {
    if matrix.rows() != matrix.cols() {
        return Err(Error::DimensionMismatch {
            context: "save_matrix_csv",
            expected: matrix.rows(),
            actual: matrix.cols(),
        });
    }
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "# dim={}", matrix.rows())?;
    for i in 0..matrix.rows() {
        let row: Vec<String> = matrix.row(i).iter().map(|&v| fmt_f64(v)).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a matrix written by [`save_matrix_csv`].
pub fn load_matrix_csv(path: &Path) -> Result<Matrix> {
    let r = BufReader::new(File::open(path)?);
    let mut lines = r.lines();
    let dim = parse_dim_comment(lines.next().transpose()?.as_deref())?;
    let mut data = Vec::with_capacity(dim * dim);
    let mut rows = 0usize;
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim {
            return Err(Error::Format(format!(
                "matrix row {rows} has {} entries, expected {dim}",
                fields.len()
            )));
        }
        for f in fields {
            data.push(parse_f64(f, "matrix")?);
        }
        rows += 1;
    }
    if rows != dim {
        return Err(Error::Format(format!(
            "matrix declares dim {dim} but holds {rows} rows"
        )));
    }
    Matrix::from_flat(dim, dim, data)
}

fn parse_dim_comment(line: Option<&str>) -> Result<usize> {
    let line = line.ok_or_else(|| Error::Format("empty spectra file".into()))?;
    let rest = line
        .trim()
        .strip_prefix("# dim=")
        .ok_or_else(|| Error::Format(format!("expected '# dim=N' first line, found {line:?}")))?;
    rest.parse()
        .map_err(|_| Error::Format(format!("bad dim in comment line {line:?}")))
}

// ───────────────────────────── manifests ───────────────────────────────

/// Writes a run manifest as sorted `key=value` lines. Keys must be
/// nonempty and free of `=` or newlines; values must be single-line.
pub fn save_manifest(path: &Path, entries: &[(String, String)]) -> Result<()> {
    let mut sorted: Vec<&(String, String)> = entries.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut w = BufWriter::new(File::create(path)?);
    for (key, value) in sorted {
        if key.is_empty() || key.contains('=') || key.contains('\n') {
            return Err(Error::Format(format!("bad manifest key {key:?}")));
        }
        if value.contains('\n') {
            return Err(Error::Format(format!(
                "manifest value for {key:?} spans lines"
            )));
        }
        writeln!(w, "{key}={value}")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a manifest written by [`save_manifest`], preserving file order.
pub fn load_manifest(path: &Path) -> Result<Vec<(String, String)>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match line.split_once('=') {
            Some((key, value)) => out.push((key.to_string(), value.to_string())),
            None => {
                return Err(Error::Format(format!(
                    "manifest line {line:?} is not key=value"
                )))
            }
        }
    }
    Ok(out)
}
