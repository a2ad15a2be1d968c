//! Cloud file formats: a text format for inspection, a binary one for speed.
//!
//! Both share the layout: a header declaring N, d, L, then one record per
//! point holding x, y, z, the d band values, and the label (−1 = unlabeled).
//! Values are 32-bit; text output uses the shortest round-tripping decimal
//! form, so both formats round-trip bit-exactly.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::{MultispectralPointCloud, UNLABELED};

/// On-disk encoding, chosen by the `--format` CLI flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    Csv,
    Bin,
}

impl std::str::FromStr for CloudFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "bin" => Ok(Self::Bin),
            other => Err(Error::validation(
                "format",
                format!("unknown format {other:?}, expected csv or bin"),
            )),
        }
    }
}

pub fn save_cloud(cloud: &MultispectralPointCloud, path: &Path, format: CloudFormat) -> Result<()> {
    match format {
        CloudFormat::Csv => save_csv(cloud, path),
        CloudFormat::Bin => save_bin(cloud, path),
    }
}

pub fn load_cloud(path: &Path, format: CloudFormat) -> Result<MultispectralPointCloud> {
    match format {
        CloudFormat::Csv => load_csv(path),
        CloudFormat::Bin => load_bin(path),
    }
}

fn save_csv(cloud: &MultispectralPointCloud, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{} {} {}", cloud.len(), cloud.bands(), cloud.classes())?;
    for i in 0..cloud.len() {
        let [x, y, z] = cloud.position(i);
        write!(out, "{x},{y},{z}")?;
        for &b in cloud.spectra_row(i) {
            write!(out, ",{b}")?;
        }
        writeln!(out, ",{}", cloud.label(i))?;
    }
    out.flush()?;
    Ok(())
}

fn load_csv(path: &Path) -> Result<MultispectralPointCloud> {
    let display = path.display().to_string();
    let mut lines = BufReader::new(File::open(path)?).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::format("header", &display, "empty file"))??;
    let (n, bands, classes) = parse_header(&header, &display)?;

    let mut positions = Vec::with_capacity(n);
    let mut spectra = Vec::with_capacity(n * bands);
    let mut labels = Vec::with_capacity(n);
    for (row, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 + bands + 1 {
            return Err(Error::format(
                "row",
                &display,
                format!(
                    "row {row}: expected {} columns, got {}",
                    3 + bands + 1,
                    fields.len()
                ),
            ));
        }
        let parse_f = |idx: usize| -> Result<f32> {
            fields[idx].trim().parse::<f32>().map_err(|e| {
                Error::format("row", &display, format!("row {row} column {idx}: {e}"))
            })
        };
        positions.push([parse_f(0)?, parse_f(1)?, parse_f(2)?]);
        for b in 0..bands {
            spectra.push(parse_f(3 + b)?);
        }
        let label: i32 = fields[3 + bands].trim().parse().map_err(|e| {
            Error::format("row", &display, format!("row {row} label column: {e}"))
        })?;
        labels.push(label);
    }
    if positions.len() != n {
        return Err(Error::format(
            "row",
            &display,
            format!("header declared {n} points, file has {}", positions.len()),
        ));
    }
    finish_load(positions, spectra, labels, classes)
}

/// Binary layout: three little-endian u32 (N, d, L), then per point three
/// f32 coordinates, d f32 bands, and one i32 label, all little-endian.
fn save_bin(cloud: &MultispectralPointCloud, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for v in [
        cloud.len() as u32,
        cloud.bands() as u32,
        cloud.classes() as u32,
    ] {
        out.write_all(&v.to_le_bytes())?;
    }
    for i in 0..cloud.len() {
        for c in cloud.position(i) {
            out.write_all(&c.to_le_bytes())?;
        }
        for &b in cloud.spectra_row(i) {
            out.write_all(&b.to_le_bytes())?;
        }
        out.write_all(&cloud.label(i).to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

fn load_bin(path: &Path) -> Result<MultispectralPointCloud> {
    let display = path.display().to_string();
    let mut reader = BufReader::new(File::open(path)?);
    let read_u32 = |reader: &mut BufReader<File>| -> Result<u32> {
        let mut buf = [0u8; 4];
        reader
            .read_exact(&mut buf)
            .map_err(|_| Error::format("header", &display, "truncated header"))?;
        Ok(u32::from_le_bytes(buf))
    };
    let n = read_u32(&mut reader)? as usize;
    let bands = read_u32(&mut reader)? as usize;
    let classes = read_u32(&mut reader)? as usize;
    if n == 0 || bands == 0 {
        return Err(Error::format(
            "header",
            &display,
            format!("implausible header: N={n}, d={bands}"),
        ));
    }

    let record = (3 + bands) * 4 + 4;
    let mut body = Vec::new();
    reader.read_to_end(&mut body)?;
    if body.len() != n * record {
        return Err(Error::format(
            "row",
            &display,
            format!("expected {} body bytes, got {}", n * record, body.len()),
        ));
    }

    let mut positions = Vec::with_capacity(n);
    let mut spectra = Vec::with_capacity(n * bands);
    let mut labels = Vec::with_capacity(n);
    for chunk in body.chunks_exact(record) {
        let f = |off: usize| f32::from_le_bytes(chunk[off..off + 4].try_into().unwrap());
        positions.push([f(0), f(4), f(8)]);
        for b in 0..bands {
            spectra.push(f(12 + 4 * b));
        }
        let off = (3 + bands) * 4;
        labels.push(i32::from_le_bytes(chunk[off..off + 4].try_into().unwrap()));
    }
    finish_load(positions, spectra, labels, classes)
}

fn parse_header(header: &str, path: &str) -> Result<(usize, usize, usize)> {
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(Error::format(
            "header",
            path,
            format!("expected \"N d L\", got {header:?}"),
        ));
    }
    let parse = |s: &str, what: &str| -> Result<usize> {
        s.parse()
            .map_err(|e| Error::format("header", path, format!("bad {what}: {e}")))
    };
    let n = parse(parts[0], "N")?;
    let d = parse(parts[1], "d")?;
    let l = parse(parts[2], "L")?;
    if n == 0 || d == 0 {
        return Err(Error::format(
            "header",
            path,
            format!("implausible header: N={n}, d={d}"),
        ));
    }
    Ok((n, d, l))
}

/// Files carry no class names; synthesize placeholders, then run the same
/// invariant checks as any constructed cloud (this is where label >= L is
/// rejected).
fn finish_load(
    positions: Vec<[f32; 3]>,
    spectra: Vec<f32>,
    labels: Vec<i32>,
    classes: usize,
) -> Result<MultispectralPointCloud> {
    for &label in &labels {
        if label != UNLABELED && (label < 0 || label as usize >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
    }
    let class_names = (0..classes).map(|c| format!("class{c}")).collect();
    let bands = spectra.len() / positions.len().max(1);
    MultispectralPointCloud::new(positions, spectra, labels, class_names, bands)
}
