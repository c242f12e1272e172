use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{MotionSequence, NeutralGeometry, RegionMask};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

pub const FMSQ_MAGIC: &[u8; 4] = b"FMSQ";
pub const FMSQ_VERSION: u32 = 1;
pub const FNEU_MAGIC: &[u8; 4] = b"FNEU";
pub const FNEU_VERSION: u32 = 1;

const FMSQ_HEADER: usize = 24;
const FNEU_HEADER: usize = 12;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn u32(&mut self) -> u32 {
        let v = u32::from_le_bytes(self.bytes[self.pos..self.pos + 4].try_into().unwrap());
        self.pos += 4;
        v
    }

    fn f32(&mut self) -> f32 {
        f32::from_bits(self.u32())
    }

    fn f64s(&mut self, n: usize) -> Vec<f64> {
        let out = self.bytes[self.pos..self.pos + 8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        self.pos += 8 * n;
        out
    }
}

fn check_magic_version(path: &Path, bytes: &[u8], magic: &'static [u8; 4], version: u32, header: usize) -> Result<()> {
    let name = std::str::from_utf8(magic).unwrap();
    if bytes.len() < 4 || &bytes[..4] != magic {
        return Err(Error::BadMagic { path: path.to_path_buf(), expected: name });
    }
    if bytes.len() < header {
        return Err(Error::Truncated { path: path.to_path_buf(), expected: header, found: bytes.len() });
    }
    let found = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if found != version {
        return Err(Error::VersionMismatch { path: path.to_path_buf(), found, expected: version });
    }
    Ok(())
}

fn check_payload(path: &Path, bytes: &[u8], expected: usize) -> Result<()> {
    if bytes.len() < expected {
        return Err(Error::Truncated { path: path.to_path_buf(), expected, found: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(Error::InvalidArgument(format!(
            "{}: {} trailing bytes after payload",
            path.display(),
            bytes.len() - expected
        )));
    }
    Ok(())
}

pub fn encode_sequence_bytes<S: Scalar>(seq: &MotionSequence<S>) -> Vec<u8> {
    let mut out = Vec::with_capacity(FMSQ_HEADER + seq.vertices().len() * 8);
    out.extend_from_slice(FMSQ_MAGIC);
    out.extend_from_slice(&FMSQ_VERSION.to_le_bytes());
    out.extend_from_slice(&(seq.frames() as u32).to_le_bytes());
    out.extend_from_slice(&(seq.num_vertices() as u32).to_le_bytes());
    out.extend_from_slice(&seq.fps.to_le_bytes());
    out.extend_from_slice(&seq.subject_id.to_le_bytes());
    for &x in seq.vertices().data() {
        out.extend_from_slice(&x.to_f64_exact().to_le_bytes());
    }
    out
}

pub fn decode_sequence_bytes<S: Scalar>(path: &Path, bytes: &[u8]) -> Result<MotionSequence<S>> {
    check_magic_version(path, bytes, FMSQ_MAGIC, FMSQ_VERSION, FMSQ_HEADER)?;
    let mut r = Reader { bytes, pos: 8 };
    let t = r.u32() as usize;
    let v = r.u32() as usize;
    let fps = r.f32();
    let subject_id = r.u32();
    let n = t
        .checked_mul(v)
        .and_then(|x| x.checked_mul(3))
        .ok_or_else(|| Error::InvalidArgument(format!("{}: header dimensions overflow", path.display())))?;
    check_payload(path, bytes, FMSQ_HEADER + 8 * n)?;
    let data = r.f64s(n).into_iter().map(S::lit).collect();
    MotionSequence::new(Tensor::from_vec(vec![t, v, 3], data)?, fps, subject_id)
}

pub fn write_sequence<S: Scalar>(seq: &MotionSequence<S>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_sequence_bytes(seq))?;
    Ok(())
}

pub fn read_sequence<S: Scalar>(path: impl AsRef<Path>) -> Result<MotionSequence<S>> {
    let path = path.as_ref();
    decode_sequence_bytes(path, &fs::read(path)?)
}

pub fn write_neutral<S: Scalar>(neutral: &NeutralGeometry<S>, path: impl AsRef<Path>) -> Result<()> {
    let mut out = Vec::with_capacity(FNEU_HEADER + neutral.vertices().len() * 8);
    out.extend_from_slice(FNEU_MAGIC);
    out.extend_from_slice(&FNEU_VERSION.to_le_bytes());
    out.extend_from_slice(&(neutral.num_vertices() as u32).to_le_bytes());
    for &x in neutral.vertices().data() {
        out.extend_from_slice(&x.to_f64_exact().to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_neutral<S: Scalar>(path: impl AsRef<Path>) -> Result<NeutralGeometry<S>> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    check_magic_version(path, &bytes, FNEU_MAGIC, FNEU_VERSION, FNEU_HEADER)?;
    let mut r = Reader { bytes: &bytes, pos: 8 };
    let v = r.u32() as usize;
    check_payload(path, &bytes, FNEU_HEADER + 24 * v)?;
    let data = r.f64s(3 * v).into_iter().map(S::lit).collect();
    NeutralGeometry::new(Tensor::from_vec(vec![v, 3], data)?)
}

pub fn write_regions(regions: &RegionMask, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    for i in &regions.lip_indices {
        writeln!(out, "lip {i}").unwrap();
    }
    for i in &regions.upper_face_indices {
        writeln!(out, "upper {i}").unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

/// Parses `lip <idx>` / `upper <idx>` lines; blank lines and `#` comments are skipped.
pub fn read_regions(path: impl AsRef<Path>) -> Result<RegionMask> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut regions = RegionMask::default();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |detail: String| Error::Parse { path: path.to_path_buf(), line: no + 1, detail };
        let mut parts = line.split_whitespace();
        let (Some(kind), Some(idx), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(parse_err(format!("expected `<lip|upper> <index>`, got `{line}`")));
        };
        let idx: usize = idx.parse().map_err(|_| parse_err(format!("bad vertex index `{idx}`")))?;
        match kind {
            "lip" => regions.lip_indices.insert(idx),
            "upper" => regions.upper_face_indices.insert(idx),
            other => return Err(parse_err(format!("unknown region `{other}`"))),
        };
    }
    Ok(regions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn sample() -> MotionSequence<f64> {
        let data = (0..2 * 3 * 3).map(|i| (i as f64).sin() * 1e3 + 1e-17).collect();
        MotionSequence::new(Tensor::from_vec(vec![2, 3, 3], data).unwrap(), 29.97, 7).unwrap()
    }

    #[test]
    fn sequence_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.fmsq");
        let s = sample();
        write_sequence(&s, &p).unwrap();
        let back: MotionSequence<f64> = read_sequence(&p).unwrap();
        assert_eq!(back.fps.to_bits(), s.fps.to_bits());
        assert_eq!(back.subject_id, 7);
        let bits = |m: &MotionSequence<f64>| m.vertices().data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&s));
        assert_eq!(fs::read(&p).unwrap(), encode_sequence_bytes(&back));
    }

    #[test]
    fn bad_magic_detected() {
        let mut bytes = encode_sequence_bytes(&sample());
        bytes[0] = b'X';
        let e = decode_sequence_bytes::<f64>(&PathBuf::from("x"), &bytes).unwrap_err();
        assert!(matches!(e, Error::BadMagic { .. }), "{e}");
    }

    #[test]
    fn truncated_payload_detected() {
        let bytes = encode_sequence_bytes(&sample());
        let e = decode_sequence_bytes::<f64>(&PathBuf::from("x"), &bytes[..bytes.len() - 8]).unwrap_err();
        assert!(matches!(e, Error::Truncated { .. }), "{e}");
        let e = decode_sequence_bytes::<f64>(&PathBuf::from("x"), &bytes[..10]).unwrap_err();
        assert!(matches!(e, Error::Truncated { .. }), "{e}");
    }

    #[test]
    fn version_mismatch_detected() {
        let mut bytes = encode_sequence_bytes(&sample());
        bytes[4] = 2;
        let e = decode_sequence_bytes::<f64>(&PathBuf::from("x"), &bytes).unwrap_err();
        assert!(matches!(e, Error::VersionMismatch { found: 2, .. }), "{e}");
    }

    #[test]
    fn header_layout() {
        let bytes = encode_sequence_bytes(&sample());
        assert_eq!(&bytes[..4], b"FMSQ");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
        assert_eq!(f32::from_le_bytes(bytes[16..20].try_into().unwrap()), 29.97);
        assert_eq!(bytes.len(), 24 + 18 * 8);
    }

    #[test]
    fn neutral_and_regions_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let n =
            NeutralGeometry::new(Tensor::from_vec(vec![2, 3], vec![1.0, 2.0, 3.0, -4.0, 5.5, 0.1]).unwrap()).unwrap();
        write_neutral(&n, dir.path().join("n.fneu")).unwrap();
        assert_eq!(read_neutral::<f64>(dir.path().join("n.fneu")).unwrap(), n);
        let r = RegionMask::new([3, 1], [0]);
        write_regions(&r, dir.path().join("r.txt")).unwrap();
        assert_eq!(read_regions(dir.path().join("r.txt")).unwrap(), r);
        fs::write(dir.path().join("bad.txt"), "lip 1\nnose 2\n").unwrap();
        assert!(matches!(read_regions(dir.path().join("bad.txt")), Err(Error::Parse { line: 2, .. })));
    }
}
