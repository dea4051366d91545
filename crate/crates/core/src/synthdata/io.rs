//! Binary container for clips and spectrogram grids.
//!
//! Layout: 8-byte magic, `u32` LE header length, UTF-8 JSON header, then
//! `count` fixed-size little-endian records. Dataset records hold
//! `spec | grid | tokens`; grid files hold only the `grid` field.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Accomp, ClipSpec, ConditionTokens, Spectrogram, Task, Texture, Timbre, FRAMES, FREQ_BINS, MELODY_LEN};
use crate::error::{ApaError, Result};

const MAGIC: &[u8; 8] = b"APAGRID\0";
pub const FORMAT_VERSION: u32 = 1;

const SPEC_BYTES: usize = MELODY_LEN + 3 + 8;
const GRID_BYTES: usize = FREQ_BINS * FRAMES * 4;
const TOKEN_BYTES: usize = 1 + 2 + 2 + 1;

/// One dataset entry.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub spec: ClipSpec,
    pub spectrogram: Spectrogram,
    pub tokens: ConditionTokens,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    kind: String,
    count: usize,
    freq_bins: usize,
    frames: usize,
    dtype: String,
    fields: Vec<String>,
    record_bytes: usize,
}

impl Header {
    fn new(kind: &str, count: usize) -> Self {
        let (fields, record_bytes) = match kind {
            "dataset" => (vec!["spec", "grid", "tokens"], SPEC_BYTES + GRID_BYTES + TOKEN_BYTES),
            _ => (vec!["grid"], GRID_BYTES),
        };
        Self {
            format: "apa-grid".into(),
            version: FORMAT_VERSION,
            kind: kind.into(),
            count,
            freq_bins: FREQ_BINS,
            frames: FRAMES,
            dtype: "f32le".into(),
            fields: fields.into_iter().map(String::from).collect(),
            record_bytes,
        }
    }
}

fn write_header(w: &mut impl Write, header: &Header) -> Result<()> {
    let json = serde_json::to_vec(header)?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    Ok(())
}

fn read_header(r: &mut impl Read, kind: &str) -> Result<Header> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ApaError::Format("not a spectrogram container (bad magic bytes)".into()));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;
    if header.version != FORMAT_VERSION {
        return Err(ApaError::Format(format!(
            "container version {} is not supported (expected {FORMAT_VERSION})",
            header.version
        )));
    }
    let expected = Header::new(kind, header.count);
    if header.kind != kind
        || header.fields != expected.fields
        || header.record_bytes != expected.record_bytes
        || header.freq_bins != FREQ_BINS
        || header.frames != FRAMES
        || header.dtype != expected.dtype
    {
        return Err(ApaError::Format(format!(
            "expected a '{kind}' container of {FREQ_BINS}x{FRAMES} f32le grids, found kind '{}'",
            header.kind
        )));
    }
    Ok(header)
}

fn ensure_eof(r: &mut impl Read) -> Result<()> {
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(ApaError::Format("trailing bytes after the last record".into()));
    }
    Ok(())
}

fn write_grid(w: &mut impl Write, g: &Spectrogram) -> Result<()> {
    let mut buf = Vec::with_capacity(GRID_BYTES);
    for v in g.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_grid(r: &mut impl Read) -> Result<Spectrogram> {
    let mut buf = vec![0u8; GRID_BYTES];
    r.read_exact(&mut buf)?;
    let values = buf.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    Spectrogram::from_values(values).map_err(|e| ApaError::Corrupt(e.to_string()))
}

fn corrupt(what: &str, e: ApaError) -> ApaError {
    ApaError::Corrupt(format!("{what}: {e}"))
}

pub fn write_dataset(path: impl AsRef<Path>, records: &[Record]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, &Header::new("dataset", records.len()))?;
    for rec in records {
        let s = &rec.spec;
        let mut buf = Vec::with_capacity(SPEC_BYTES);
        buf.extend_from_slice(&s.melody);
        buf.push(s.timbre.index() as u8);
        buf.push(s.texture.index() as u8);
        buf.push(s.accomp.index() as u8);
        buf.extend_from_slice(&s.seed.to_le_bytes());
        w.write_all(&buf)?;
        write_grid(&mut w, &rec.spectrogram)?;
        let t = &rec.tokens;
        let mut buf = Vec::with_capacity(TOKEN_BYTES);
        buf.push(t.task.index() as u8);
        buf.extend_from_slice(&(t.primary as u16).to_le_bytes());
        buf.extend_from_slice(&(t.secondary as u16).to_le_bytes());
        buf.push(t.null_flag as u8);
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<Record>> {
    let mut r = BufReader::new(File::open(path)?);
    let header = read_header(&mut r, "dataset")?;
    let mut records = Vec::with_capacity(header.count);
    for _ in 0..header.count {
        let mut buf = [0u8; SPEC_BYTES];
        r.read_exact(&mut buf)?;
        let mut melody = [0u8; MELODY_LEN];
        melody.copy_from_slice(&buf[..MELODY_LEN]);
        let mut seed = [0u8; 8];
        seed.copy_from_slice(&buf[MELODY_LEN + 3..]);
        let spec = ClipSpec {
            melody,
            timbre: Timbre::from_index(buf[MELODY_LEN] as usize).map_err(|e| corrupt("timbre", e))?,
            texture: Texture::from_index(buf[MELODY_LEN + 1] as usize).map_err(|e| corrupt("texture", e))?,
            accomp: Accomp::from_index(buf[MELODY_LEN + 2] as usize).map_err(|e| corrupt("accomp", e))?,
            seed: u64::from_le_bytes(seed),
        };
        spec.validate().map_err(|e| corrupt("clip spec", e))?;
        let spectrogram = read_grid(&mut r)?;
        let mut buf = [0u8; TOKEN_BYTES];
        r.read_exact(&mut buf)?;
        let tokens = ConditionTokens {
            task: Task::from_index(buf[0] as usize).map_err(|e| corrupt("task", e))?,
            primary: u16::from_le_bytes([buf[1], buf[2]]) as usize,
            secondary: u16::from_le_bytes([buf[3], buf[4]]) as usize,
            null_flag: buf[5] != 0,
        };
        tokens.validate().map_err(|e| corrupt("tokens", e))?;
        records.push(Record { spec, spectrogram, tokens });
    }
    ensure_eof(&mut r)?;
    Ok(records)
}

pub fn write_grids(path: impl AsRef<Path>, grids: &[Spectrogram]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, &Header::new("grids", grids.len()))?;
    for g in grids {
        write_grid(&mut w, g)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_grids(path: impl AsRef<Path>) -> Result<Vec<Spectrogram>> {
    let mut r = BufReader::new(File::open(path)?);
    let header = read_header(&mut r, "grids")?;
    let grids = (0..header.count).map(|_| read_grid(&mut r)).collect::<Result<Vec<_>>>()?;
    ensure_eof(&mut r)?;
    Ok(grids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{caption_tokens, render_spectrogram, sample_clip_spec, SpecPins};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn records(n: usize) -> Vec<Record> {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        (0..n)
            .map(|i| {
                let spec = sample_clip_spec(&mut rng, &SpecPins::default()).unwrap();
                let tokens = if i % 3 == 0 { ConditionTokens::null() } else { caption_tokens(&spec, Task::ALL[i % 4]) };
                Record { spectrogram: render_spectrogram(&spec), spec, tokens }
            })
            .collect()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        let recs = records(8);
        write_dataset(&path, &recs).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), recs);
    }

    #[test]
    fn empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.bin");
        write_dataset(&path, &[]).unwrap();
        assert!(read_dataset(&path).unwrap().is_empty());
    }

    #[test]
    fn bad_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        std::fs::write(&path, b"NOTAGRID\0\0\0\0{}").unwrap();
        assert!(matches!(read_dataset(&path), Err(ApaError::Format(_))));
    }

    #[test]
    fn truncated_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        write_dataset(&path, &records(2)).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(read_dataset(&path), Err(ApaError::Io(_))));
    }

    #[test]
    fn version_mismatch_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.bin");
        write_dataset(&path, &records(1)).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let mut patched = bytes.clone();
        let pos = bytes.windows(11).position(|w| w == b"\"version\":1").unwrap();
        patched[pos + 10] = b'7';
        std::fs::write(&path, &patched).unwrap();
        assert!(matches!(read_dataset(&path), Err(ApaError::Format(_))));
    }

    #[test]
    fn grid_files_are_not_datasets() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.bin");
        let grids: Vec<_> = records(3).into_iter().map(|r| r.spectrogram).collect();
        write_grids(&path, &grids).unwrap();
        assert_eq!(read_grids(&path).unwrap(), grids);
        assert!(matches!(read_dataset(&path), Err(ApaError::Format(_))));
    }
}
