//! ASCII table and packed binary point cloud formats.
//!
//! ASCII: a header line naming columns from
//! `x y z intensity return_count label segment`, then one whitespace
//! separated row per point. Lines starting with `#` are ignored. Unassigned
//! segments are written as `-1`.
//!
//! Binary (little endian): the magic `LGEPCv01`, `u64` point count, `u32`
//! column count, one descriptor per column (`u8` name length, name bytes,
//! `u8` type code: 0 = f64, 1 = u8, 2 = u32), then each column's values
//! packed in descriptor order.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{PointCloud, UNASSIGNED, UNLABELED};
use crate::error::{Error, Result};

pub const BINARY_MAGIC: &[u8; 8] = b"LGEPCv01";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CloudFormat {
    Ascii,
    Binary,
}

impl CloudFormat {
    /// `.bin` and `.lgepc` are binary, anything else ASCII.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("bin") | Some("lgepc") => CloudFormat::Binary,
            _ => CloudFormat::Ascii,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Column {
    X,
    Y,
    Z,
    Intensity,
    ReturnCount,
    Label,
    Segment,
}

impl Column {
    const ALL: [Column; 7] = [
        Column::X,
        Column::Y,
        Column::Z,
        Column::Intensity,
        Column::ReturnCount,
        Column::Label,
        Column::Segment,
    ];

    fn name(self) -> &'static str {
        match self {
            Column::X => "x",
            Column::Y => "y",
            Column::Z => "z",
            Column::Intensity => "intensity",
            Column::ReturnCount => "return_count",
            Column::Label => "label",
            Column::Segment => "segment",
        }
    }

    fn parse(name: &str) -> Result<Self> {
        Column::ALL
            .into_iter()
            .find(|c| c.name() == name)
            .ok_or_else(|| Error::UnknownColumn(name.to_string()))
    }

    fn type_code(self) -> u8 {
        match self {
            Column::X | Column::Y | Column::Z | Column::Intensity => 0,
            Column::ReturnCount | Column::Label => 1,
            Column::Segment => 2,
        }
    }
}

fn check_columns(cols: &[Column]) -> Result<()> {
    for required in [Column::X, Column::Y, Column::Z] {
        if !cols.contains(&required) {
            return Err(Error::Format(format!(
                "missing required column `{}`",
                required.name()
            )));
        }
    }
    for (i, c) in cols.iter().enumerate() {
        if cols[..i].contains(c) {
            return Err(Error::Format(format!("duplicate column `{}`", c.name())));
        }
    }
    Ok(())
}

/// Reads a cloud, detecting the binary format by its magic bytes.
pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    let mut file =
        fs::File::open(path).map_err(|e| Error::io(format!("open {}", path.display()), e))?;
    let mut magic = [0u8; 8];
    let n = file
        .read(&mut magic)
        .map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    drop(file);
    if n == 8 && &magic == BINARY_MAGIC {
        let bytes = fs::read(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        decode_binary(&bytes)
    } else {
        let file =
            fs::File::open(path).map_err(|e| Error::io(format!("open {}", path.display()), e))?;
        read_ascii(BufReader::new(file), path)
    }
}

pub fn write_cloud(cloud: &PointCloud, path: &Path, format: CloudFormat) -> Result<()> {
    cloud.validate()?;
    let file =
        fs::File::create(path).map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    let res = match format {
        CloudFormat::Ascii => write_ascii(cloud, &mut w),
        CloudFormat::Binary => w.write_all(&encode_binary(cloud)),
    };
    res.and_then(|_| w.flush())
        .map_err(|e| Error::io(format!("write {}", path.display()), e))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn read_ascii<R: BufRead>(reader: R, path: &Path) -> Result<PointCloud> {
    let mut columns: Option<Vec<Column>> = None;
    let mut cloud = PointCloud::default();
    let mut has = [false; 7];
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let Some(cols) = &columns else {
            let cols = trimmed
                .split_whitespace()
                .map(Column::parse)
                .collect::<Result<Vec<_>>>()?;
            check_columns(&cols)?;
            for c in &cols {
                has[Column::ALL.iter().position(|a| a == c).unwrap()] = true;
            }
            columns = Some(cols);
            continue;
        };
        let tokens: Vec<&str> = trimmed.split_whitespace().collect();
        if tokens.len() != cols.len() {
            return Err(parse_err(
                path,
                lineno,
                format!("expected {} values, found {}", cols.len(), tokens.len()),
            ));
        }
        let mut p = [0.0f64; 3];
        let (mut inten, mut rc, mut label, mut seg) = (0.0, 1u8, UNLABELED, UNASSIGNED);
        for (&col, tok) in cols.iter().zip(&tokens) {
            let bad = |what: &str| parse_err(path, lineno, format!("bad {what} `{tok}`"));
            match col {
                Column::X | Column::Y | Column::Z | Column::Intensity => {
                    let v: f64 = tok.parse().map_err(|_| bad(col.name()))?;
                    if !v.is_finite() {
                        return Err(bad(col.name()));
                    }
                    match col {
                        Column::X => p[0] = v,
                        Column::Y => p[1] = v,
                        Column::Z => p[2] = v,
                        _ => inten = v,
                    }
                }
                Column::ReturnCount => rc = tok.parse().map_err(|_| bad("return_count"))?,
                Column::Label => label = tok.parse().map_err(|_| bad("label"))?,
                Column::Segment => {
                    let v: i64 = tok.parse().map_err(|_| bad("segment"))?;
                    seg = if v < 0 {
                        UNASSIGNED
                    } else {
                        u32::try_from(v).map_err(|_| bad("segment"))?
                    };
                }
            }
        }
        cloud.positions.push(p);
        cloud.intensity.push(inten);
        cloud.return_count.push(rc);
        cloud.label.push(label);
        cloud.segment.push(seg);
    }
    if columns.is_none() {
        return Err(parse_err(path, 1, "missing header line"));
    }
    Ok(cloud)
}

fn write_ascii<W: Write>(cloud: &PointCloud, w: &mut W) -> std::io::Result<()> {
    writeln!(w, "x y z intensity return_count label segment")?;
    for i in 0..cloud.len() {
        let [x, y, z] = cloud.positions[i];
        let seg = cloud.segment[i];
        let seg = if seg == UNASSIGNED { -1 } else { seg as i64 };
        writeln!(
            w,
            "{x} {y} {z} {} {} {} {seg}",
            cloud.intensity[i], cloud.return_count[i], cloud.label[i]
        )?;
    }
    Ok(())
}

fn encode_binary(cloud: &PointCloud) -> Vec<u8> {
    let n = cloud.len();
    let mut out = Vec::with_capacity(64 + n * 38);
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(Column::ALL.len() as u32).to_le_bytes());
    for c in Column::ALL {
        out.push(c.name().len() as u8);
        out.extend_from_slice(c.name().as_bytes());
        out.push(c.type_code());
    }
    for axis in 0..3 {
        for p in &cloud.positions {
            out.extend_from_slice(&p[axis].to_le_bytes());
        }
    }
    for v in &cloud.intensity {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&cloud.return_count);
    out.extend_from_slice(&cloud.label);
    for v in &cloud.segment {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated binary cloud at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn decode_binary(bytes: &[u8]) -> Result<PointCloud> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8)? != BINARY_MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let n = usize::try_from(cur.u64()?).map_err(|_| Error::Format("point count".into()))?;
    let ncols = cur.u32()? as usize;
    let mut cols = Vec::with_capacity(ncols);
    for _ in 0..ncols {
        let len = cur.u8()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| Error::Format("column name is not UTF-8".into()))?;
        let col = Column::parse(name)?;
        let code = cur.u8()?;
        if code != col.type_code() {
            return Err(Error::Format(format!(
                "column `{name}` has type code {code}, expected {}",
                col.type_code()
            )));
        }
        cols.push(col);
    }
    check_columns(&cols)?;
    let mut cloud = PointCloud {
        positions: vec![[0.0; 3]; n],
        intensity: vec![0.0; n],
        return_count: vec![1; n],
        label: vec![UNLABELED; n],
        segment: vec![UNASSIGNED; n],
    };
    for col in cols {
        match col {
            Column::X | Column::Y | Column::Z | Column::Intensity => {
                let raw = cur.take(n * 8)?;
                let vals = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
                match col {
                    Column::X => cloud.positions.iter_mut().zip(vals).for_each(|(p, v)| p[0] = v),
                    Column::Y => cloud.positions.iter_mut().zip(vals).for_each(|(p, v)| p[1] = v),
                    Column::Z => cloud.positions.iter_mut().zip(vals).for_each(|(p, v)| p[2] = v),
                    _ => cloud.intensity.iter_mut().zip(vals).for_each(|(p, v)| *p = v),
                }
            }
            Column::ReturnCount => cloud.return_count.copy_from_slice(cur.take(n)?),
            Column::Label => cloud.label.copy_from_slice(cur.take(n)?),
            Column::Segment => {
                let raw = cur.take(n * 4)?;
                for (s, c) in cloud.segment.iter_mut().zip(raw.chunks_exact(4)) {
                    *s = u32::from_le_bytes(c.try_into().unwrap());
                }
            }
        }
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after column data".into()));
    }
    Ok(cloud)
}
