//! Little-endian record files.
//!
//! ```text
//! header : "MGPR" | version u32 | hidden_dim u32 | flags u32
//! record : id_len u16, id | label u8 | domain_len u16, domain
//!          | generator_len u16, generator | t_num u32 | s_num u32
//!          | [s_num x u32 offsets if flags.bit1]
//!          | payload f32 x (t_num*hidden_dim if flags.bit0 else hidden_dim)
//! ```
//! The stream ends at EOF; a partial record is a truncation error.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use super::{EmbeddingRecord, Payload, TokenMatrix};
use crate::error::{Error, Result};

pub const RECORD_MAGIC: [u8; 4] = *b"MGPR";
pub const RECORD_VERSION: u32 = 1;

const FLAG_TOKENS: u32 = 1;
const FLAG_OFFSETS: u32 = 1 << 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RecordFlags {
    pub token_matrices: bool,
    pub sentence_offsets: bool,
}

impl RecordFlags {
    fn bits(self) -> u32 {
        (if self.token_matrices { FLAG_TOKENS } else { 0 })
            | (if self.sentence_offsets { FLAG_OFFSETS } else { 0 })
    }

    fn from_bits(bits: u32) -> Result<Self> {
        if bits & !(FLAG_TOKENS | FLAG_OFFSETS) != 0 {
            return Err(Error::InvalidRecord(format!("unknown header flags {bits:#x}")));
        }
        Ok(Self {
            token_matrices: bits & FLAG_TOKENS != 0,
            sentence_offsets: bits & FLAG_OFFSETS != 0,
        })
    }

    /// Flags describing a record set: offsets are only flagged when every
    /// record carries them.
    pub fn for_records(records: &[EmbeddingRecord]) -> Self {
        Self {
            token_matrices: records.first().is_some_and(|r| r.tokens().is_some()),
            sentence_offsets: !records.is_empty()
                && records.iter().all(|r| r.sentence_offsets.is_some()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecordHeader {
    pub hidden_dim: u32,
    pub flags: RecordFlags,
}

fn write_str<W: Write>(w: &mut W, s: &str, what: &str) -> Result<()> {
    let len = u16::try_from(s.len())
        .map_err(|_| Error::InvalidRecord(format!("{what} longer than 65535 bytes")))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn write_f32s<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for &v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Writes a header and records to any sink.
pub fn write_records_to<W: Write>(
    mut w: W,
    header: RecordHeader,
    records: &[EmbeddingRecord],
) -> Result<()> {
    let dim = header.hidden_dim as usize;
    w.write_all(&RECORD_MAGIC)?;
    w.write_all(&RECORD_VERSION.to_le_bytes())?;
    w.write_all(&header.hidden_dim.to_le_bytes())?;
    w.write_all(&header.flags.bits().to_le_bytes())?;
    for r in records {
        r.validate()?;
        if r.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: r.dim(),
            });
        }
        write_str(&mut w, &r.id, "id")?;
        w.write_all(&[r.label])?;
        write_str(&mut w, &r.domain, "domain")?;
        write_str(&mut w, &r.generator, "generator")?;
        w.write_all(&r.t_num.to_le_bytes())?;
        w.write_all(&r.s_num.to_le_bytes())?;
        if header.flags.sentence_offsets {
            let off = r.sentence_offsets.as_ref().ok_or_else(|| {
                Error::InvalidRecord(format!("{}: header flags offsets but record has none", r.id))
            })?;
            for o in off {
                w.write_all(&o.to_le_bytes())?;
            }
        }
        match (&r.payload, header.flags.token_matrices) {
            (Payload::Tokens(m), true) => write_f32s(&mut w, m.as_slice())?,
            (Payload::Pooled(v), false) => write_f32s(&mut w, v)?,
            (Payload::Tokens(_), false) => {
                return Err(Error::InvalidRecord(format!(
                    "{}: token matrix in a pooled-vector file",
                    r.id
                )))
            }
            (Payload::Pooled(_), true) => {
                return Err(Error::InvalidRecord(format!(
                    "{}: pooled vector in a token-matrix file",
                    r.id
                )))
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_records(path: &Path, header: RecordHeader, records: &[EmbeddingRecord]) -> Result<()> {
    let f = BufWriter::new(File::create(path)?);
    write_records_to(f, header, records)
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], what: &'static str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => Error::Truncated(what),
        _ => Error::Io(e),
    })
}

fn read_u16<R: Read>(r: &mut R, what: &'static str) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact_or(r, &mut b, what)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R, what: &'static str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R, what: &'static str) -> Result<String> {
    let len = read_u16(r, what)? as usize;
    let mut buf = vec![0u8; len];
    read_exact_or(r, &mut buf, what)?;
    String::from_utf8(buf).map_err(|_| Error::InvalidRecord(format!("{what} is not valid UTF-8")))
}

fn read_f32s<R: Read>(r: &mut R, n: usize, what: &'static str) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 4];
    read_exact_or(r, &mut buf, what)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// Reads the first length-prefix byte pair of a record, distinguishing a
/// clean end of stream from a truncated one.
fn read_record_start<R: Read>(r: &mut R) -> Result<Option<u16>> {
    let mut b = [0u8; 2];
    let mut filled = 0;
    while filled < 2 {
        match r.read(&mut b[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(Error::Truncated("record id length")),
            Ok(n) => filled += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(Error::Io(e)),
        }
    }
    Ok(Some(u16::from_le_bytes(b)))
}

/// Reads a header and all records from any source.
pub fn read_records_from<R: Read>(mut r: R) -> Result<(RecordHeader, Vec<EmbeddingRecord>)> {
    let mut magic = [0u8; 4];
    read_exact_or(&mut r, &mut magic, "magic")?;
    if magic != RECORD_MAGIC {
        return Err(Error::BadMagic {
            expected: RECORD_MAGIC,
            found: magic,
        });
    }
    let version = read_u32(&mut r, "version")?;
    if version != RECORD_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let hidden_dim = read_u32(&mut r, "hidden_dim")?;
    let flags = RecordFlags::from_bits(read_u32(&mut r, "flags")?)?;
    if hidden_dim == 0 {
        return Err(Error::InvalidRecord("hidden_dim must be >= 1".into()));
    }
    let header = RecordHeader { hidden_dim, flags };
    let dim = hidden_dim as usize;

    let mut records = Vec::new();
    while let Some(id_len) = read_record_start(&mut r)? {
        let mut id = vec![0u8; id_len as usize];
        read_exact_or(&mut r, &mut id, "id")?;
        let id = String::from_utf8(id).map_err(|_| Error::InvalidRecord("id is not valid UTF-8".into()))?;
        let mut label = [0u8; 1];
        read_exact_or(&mut r, &mut label, "label")?;
        let domain = read_string(&mut r, "domain")?;
        let generator = read_string(&mut r, "generator")?;
        let t_num = read_u32(&mut r, "t_num")?;
        let s_num = read_u32(&mut r, "s_num")?;
        let sentence_offsets = if flags.sentence_offsets {
            let mut off = Vec::with_capacity(s_num as usize);
            for _ in 0..s_num {
                off.push(read_u32(&mut r, "sentence offsets")?);
            }
            Some(off)
        } else {
            None
        };
        let payload = if flags.token_matrices {
            let values = read_f32s(&mut r, t_num as usize * dim, "token matrix")?;
            Payload::Tokens(TokenMatrix::new(dim, values)?)
        } else {
            Payload::Pooled(read_f32s(&mut r, dim, "pooled vector")?)
        };
        let rec = EmbeddingRecord {
            id,
            label: label[0],
            domain,
            generator,
            t_num,
            s_num,
            sentence_offsets,
            payload,
        };
        rec.validate()?;
        records.push(rec);
    }
    Ok((header, records))
}

pub fn read_records(path: &Path) -> Result<(RecordHeader, Vec<EmbeddingRecord>)> {
    let f = File::open(path).map_err(|e| {
        Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })?;
    read_records_from(BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn f32_exact(v: f64) -> f64 {
        v as f32 as f64
    }

    fn sample(offsets: bool) -> Vec<EmbeddingRecord> {
        let rows = vec![vec![0.5, -1.25, 3.0], vec![0.0, 0.75, -2.5]];
        vec![
            EmbeddingRecord {
                id: "doc-1".into(),
                label: 1,
                domain: "news".into(),
                generator: "gpt".into(),
                t_num: 2,
                s_num: 2,
                sentence_offsets: offsets.then(|| vec![0, 1]),
                payload: Payload::Tokens(TokenMatrix::from_rows(3, &rows).unwrap()),
            },
            EmbeddingRecord {
                id: "докум".into(),
                label: 0,
                domain: "wiki".into(),
                generator: "human".into(),
                t_num: 1,
                s_num: 1,
                sentence_offsets: offsets.then(|| vec![0]),
                payload: Payload::Tokens(TokenMatrix::from_rows(3, &[vec![1.0, 2.0, 4.0]]).unwrap()),
            },
        ]
    }

    fn roundtrip(records: &[EmbeddingRecord]) -> (RecordHeader, Vec<EmbeddingRecord>) {
        let header = RecordHeader {
            hidden_dim: records[0].dim() as u32,
            flags: RecordFlags::for_records(records),
        };
        let mut buf = Vec::new();
        write_records_to(&mut buf, header, records).unwrap();
        read_records_from(buf.as_slice()).unwrap()
    }

    #[test]
    fn roundtrip_token_records() {
        for offsets in [false, true] {
            let recs = sample(offsets);
            let (h, back) = roundtrip(&recs);
            assert_eq!(h.flags.sentence_offsets, offsets);
            assert_eq!(back, recs);
        }
    }

    #[test]
    fn empty_stream_is_header_only() {
        let header = RecordHeader {
            hidden_dim: 8,
            flags: RecordFlags::default(),
        };
        let mut buf = Vec::new();
        write_records_to(&mut buf, header, &[]).unwrap();
        assert_eq!(buf.len(), 16);
        let (h, recs) = read_records_from(buf.as_slice()).unwrap();
        assert_eq!(h, header);
        assert!(recs.is_empty());
    }

    #[test]
    fn distinct_errors() {
        let recs = sample(true);
        let header = RecordHeader {
            hidden_dim: 3,
            flags: RecordFlags::for_records(&recs),
        };
        let mut buf = Vec::new();
        write_records_to(&mut buf, header, &recs).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_records_from(bad.as_slice()), Err(Error::BadMagic { .. })));

        let mut bad = buf.clone();
        bad[4] = 7;
        assert!(matches!(read_records_from(bad.as_slice()), Err(Error::UnsupportedVersion(7))));

        for cut in [3, 10, 17, buf.len() - 1] {
            assert!(
                matches!(read_records_from(&buf[..cut]), Err(Error::Truncated(_))),
                "cut at {cut}"
            );
        }

        let wrong_dim = RecordHeader {
            hidden_dim: 4,
            flags: header.flags,
        };
        assert!(matches!(
            write_records_to(Vec::new(), wrong_dim, &recs),
            Err(Error::DimensionMismatch { expected: 4, found: 3 })
        ));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.mgpr");
        let recs = sample(false);
        let header = RecordHeader {
            hidden_dim: 3,
            flags: RecordFlags::for_records(&recs),
        };
        write_records(&path, header, &recs).unwrap();
        assert_eq!(read_records(&path).unwrap().1, recs);
    }

    proptest! {
        #[test]
        fn pooled_roundtrip_is_lossless(
            vals in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 5), 1..6),
            label in 0u8..2,
            t in 1u32..50,
        ) {
            let recs: Vec<EmbeddingRecord> = vals.iter().enumerate().map(|(i, v)| EmbeddingRecord {
                id: format!("r{i}"),
                label,
                domain: "dom".into(),
                generator: "gen".into(),
                t_num: t,
                s_num: 1,
                sentence_offsets: Some(vec![0]),
                payload: Payload::Pooled(v.iter().copied().map(f32_exact).collect()),
            }).collect();
            let (_, back) = roundtrip(&recs);
            prop_assert_eq!(back, recs);
        }
    }
}
