//! Single-file binary container for datasets.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! magic "MCMR0001"                      8 bytes
//! header_len: u32
//! header: UTF-8 JSON                    header_len bytes
//!   {"N":..,"Q":..,"H":..,"W":..,"center_lines":..,
//!    "sections":[{"name":..,"offset":..,"byte_len":..}, ...]}
//! raw sections, in header order, at the absolute offsets given above:
//!   "kspace"    N*Q*H*W complex pairs (f64 re, f64 im)
//!   "coils"     Q*H*W complex pairs
//!   "support"   H*W bytes, 0 or 1
//!   "masks"     per frame: u32 line count, then u32 row indices
//!   "reference" N*H*W complex pairs (optional)
//!   "gt_motion" N*N*2*H*W f64, order [t1][t2][dy plane, dx plane] (optional)
//! ```
//!
//! Values round-trip bit-exactly; loading re-validates every type invariant.

use crate::types::{
    validate, CoilMaps, ComplexImage, Dataset, ImageSequence, KSpaceSet, MotionField,
    MotionFieldSet, SamplingMaskSet, Violation,
};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"MCMR0001";

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic byte at offset {offset}: found 0x{found:02x}, expected 0x{expected:02x}")]
    BadMagic { offset: usize, found: u8, expected: u8 },
    #[error("unsupported container version {found:?} (expected {expected:?})")]
    VersionMismatch { found: String, expected: String },
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("file truncated in section {section:?}: need {needed} bytes, only {got} available")]
    Truncated { section: String, needed: u64, got: u64 },
    #[error("invariant violated on load: {0}")]
    Invariant(Violation),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SectionEntry {
    pub name: String,
    pub offset: u64,
    pub byte_len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContainerHeader {
    #[serde(rename = "N")]
    pub n_frames: usize,
    #[serde(rename = "Q")]
    pub n_coils: usize,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    pub center_lines: usize,
    pub sections: Vec<SectionEntry>,
}

fn push_complex(buf: &mut Vec<u8>, values: &[Complex64]) {
    for v in values {
        buf.extend_from_slice(&v.re.to_le_bytes());
        buf.extend_from_slice(&v.im.to_le_bytes());
    }
}

fn push_f64(buf: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Writes one dataset container. Dimensions of the parts must agree.
pub fn write_dataset(
    path: &Path,
    kspace: &KSpaceSet,
    coils: &CoilMaps,
    masks: &SamplingMaskSet,
    reference: Option<&ImageSequence>,
    gt_motion: Option<&MotionFieldSet>,
) -> Result<(), FormatError> {
    let (n, q, h, w) = (kspace.n_frames(), kspace.n_coils(), kspace.height(), kspace.width());
    if coils.n_coils() != q || coils.height() != h || coils.width() != w {
        return Err(FormatError::DimensionMismatch(format!(
            "coils {}x{}x{} vs k-space {}x{}x{}",
            coils.n_coils(), coils.height(), coils.width(), q, h, w
        )));
    }
    if masks.n_frames() != n || masks.height() != h || masks.width() != w {
        return Err(FormatError::DimensionMismatch("masks disagree with k-space dims".into()));
    }
    if let Some(r) = reference {
        if r.n_frames() != n || r.height() != h || r.width() != w {
            return Err(FormatError::DimensionMismatch("reference disagrees with k-space dims".into()));
        }
    }
    if let Some(m) = gt_motion {
        if m.n_frames() != n || m.height() != h || m.width() != w {
            return Err(FormatError::DimensionMismatch("gt_motion disagrees with k-space dims".into()));
        }
    }

    // Serialize every section body first so offsets are known exactly.
    let mut bodies: Vec<(&str, Vec<u8>)> = Vec::new();

    let mut ks = Vec::with_capacity(kspace.data().len() * 16);
    push_complex(&mut ks, kspace.data());
    bodies.push(("kspace", ks));

    let mut cs = Vec::with_capacity(coils.data().len() * 16);
    push_complex(&mut cs, coils.data());
    bodies.push(("coils", cs));

    bodies.push(("support", coils.support().to_vec()));

    let mut ms = Vec::new();
    for t in 0..n {
        let lines = masks.lines(t);
        ms.extend_from_slice(&(lines.len() as u32).to_le_bytes());
        for &r in lines {
            ms.extend_from_slice(&(r as u32).to_le_bytes());
        }
    }
    bodies.push(("masks", ms));

    if let Some(r) = reference {
        let mut rs = Vec::with_capacity(n * h * w * 16);
        for f in r.frames() {
            push_complex(&mut rs, f.data());
        }
        bodies.push(("reference", rs));
    }
    if let Some(m) = gt_motion {
        let mut gs = Vec::with_capacity(n * n * 2 * h * w * 8);
        for t1 in 0..n {
            for t2 in 0..n {
                let f = m.field(t1, t2);
                push_f64(&mut gs, f.dy());
                push_f64(&mut gs, f.dx());
            }
        }
        bodies.push(("gt_motion", gs));
    }

    // Header length depends on the offsets which depend on the header length,
    // so fix the JSON size by serializing twice: once with placeholder
    // offsets to learn the length, once with real offsets padded to the same
    // number of digits via u64 values (the digit count can differ, so just
    // recompute until stable; two passes always suffice here because offsets
    // only grow with header size).
    let mut header = ContainerHeader {
        n_frames: n,
        n_coils: q,
        height: h,
        width: w,
        center_lines: masks.center_lines(),
        sections: bodies
            .iter()
            .map(|(name, b)| SectionEntry { name: (*name).into(), offset: 0, byte_len: b.len() as u64 })
            .collect(),
    };
    let mut header_len = serde_json::to_vec(&header).map_err(|e| FormatError::BadHeader(e.to_string()))?.len();
    loop {
        let mut offset = (MAGIC.len() + 4 + header_len) as u64;
        for (entry, (_, body)) in header.sections.iter_mut().zip(&bodies) {
            entry.offset = offset;
            offset += body.len() as u64;
        }
        let encoded = serde_json::to_vec(&header).map_err(|e| FormatError::BadHeader(e.to_string()))?;
        if encoded.len() == header_len {
            let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
            file.write_all(MAGIC)?;
            file.write_all(&(header_len as u32).to_le_bytes())?;
            file.write_all(&encoded)?;
            for (_, body) in &bodies {
                file.write_all(body)?;
            }
            file.flush()?;
            return Ok(());
        }
        header_len = encoded.len();
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn section(&self, entry: &SectionEntry) -> Result<&'a [u8], FormatError> {
        let start = entry.offset as usize;
        let end = start.checked_add(entry.byte_len as usize).ok_or_else(|| FormatError::BadHeader(
            format!("section {:?} overflows the address space", entry.name),
        ))?;
        if end > self.bytes.len() {
            return Err(FormatError::Truncated {
                section: entry.name.clone(),
                needed: entry.byte_len,
                got: self.bytes.len().saturating_sub(start) as u64,
            });
        }
        Ok(&self.bytes[start..end])
    }
}

fn parse_complex(section: &str, bytes: &[u8], count: usize) -> Result<Vec<Complex64>, FormatError> {
    if bytes.len() != count * 16 {
        return Err(FormatError::Truncated {
            section: section.into(),
            needed: (count * 16) as u64,
            got: bytes.len() as u64,
        });
    }
    Ok(bytes
        .chunks_exact(16)
        .map(|c| {
            Complex64::new(
                f64::from_le_bytes(c[0..8].try_into().unwrap()),
                f64::from_le_bytes(c[8..16].try_into().unwrap()),
            )
        })
        .collect())
}

fn parse_f64(section: &str, bytes: &[u8], count: usize) -> Result<Vec<f64>, FormatError> {
    if bytes.len() != count * 8 {
        return Err(FormatError::Truncated {
            section: section.into(),
            needed: (count * 8) as u64,
            got: bytes.len() as u64,
        });
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Parses just the magic and JSON header of a container file.
pub fn read_header(path: &Path) -> Result<ContainerHeader, FormatError> {
    let bytes = std::fs::read(path)?;
    header_from_bytes(&bytes).map(|(h, _)| h)
}

fn header_from_bytes(bytes: &[u8]) -> Result<(ContainerHeader, usize), FormatError> {
    for (i, (&found, &expected)) in bytes.iter().zip(MAGIC.iter()).enumerate() {
        if found != expected {
            // A correct "MCMR" prefix with different trailing digits is a
            // version difference rather than a foreign file.
            if i >= 4 && bytes[..4] == MAGIC[..4] {
                let found_version = String::from_utf8_lossy(&bytes[..8.min(bytes.len())]).into_owned();
                return Err(FormatError::VersionMismatch {
                    found: found_version,
                    expected: String::from_utf8_lossy(MAGIC).into_owned(),
                });
            }
            return Err(FormatError::BadMagic { offset: i, found, expected });
        }
    }
    if bytes.len() < MAGIC.len() + 4 {
        return Err(FormatError::Truncated {
            section: "header".into(),
            needed: (MAGIC.len() + 4) as u64,
            got: bytes.len() as u64,
        });
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header_end = 12 + header_len;
    if bytes.len() < header_end {
        return Err(FormatError::Truncated {
            section: "header".into(),
            needed: header_end as u64,
            got: bytes.len() as u64,
        });
    }
    let header: ContainerHeader = serde_json::from_slice(&bytes[12..header_end])
        .map_err(|e| FormatError::BadHeader(e.to_string()))?;
    Ok((header, header_end))
}

/// Reads a dataset container and re-validates every type invariant.
pub fn read_dataset(path: &Path) -> Result<Dataset, FormatError> {
    let bytes = std::fs::read(path)?;
    let (header, _) = header_from_bytes(&bytes)?;
    let (n, q, h, w) = (header.n_frames, header.n_coils, header.height, header.width);
    if n == 0 || q == 0 || h == 0 || w == 0 {
        return Err(FormatError::BadHeader(format!("degenerate dims N={n} Q={q} H={h} W={w}")));
    }
    let reader = Reader { bytes: &bytes };

    let find = |name: &str| header.sections.iter().find(|s| s.name == name);
    let required = |name: &str| {
        find(name).ok_or_else(|| FormatError::BadHeader(format!("missing required section {name:?}")))
    };

    let kspace_bytes = reader.section(required("kspace")?)?;
    let kspace = KSpaceSet::new(n, q, h, w, parse_complex("kspace", kspace_bytes, n * q * h * w)?);

    let coil_bytes = reader.section(required("coils")?)?;
    let coil_data = parse_complex("coils", coil_bytes, q * h * w)?;
    let support_bytes = reader.section(required("support")?)?;
    if support_bytes.len() != h * w {
        return Err(FormatError::Truncated {
            section: "support".into(),
            needed: (h * w) as u64,
            got: support_bytes.len() as u64,
        });
    }
    let coils = CoilMaps::new(q, h, w, coil_data, support_bytes.to_vec());

    let mask_bytes = reader.section(required("masks")?)?;
    let mut lines = Vec::with_capacity(n);
    let mut cursor = 0usize;
    for t in 0..n {
        if cursor + 4 > mask_bytes.len() {
            return Err(FormatError::Truncated {
                section: "masks".into(),
                needed: (cursor + 4) as u64,
                got: mask_bytes.len() as u64,
            });
        }
        let count = u32::from_le_bytes(mask_bytes[cursor..cursor + 4].try_into().unwrap()) as usize;
        cursor += 4;
        if cursor + 4 * count > mask_bytes.len() {
            return Err(FormatError::Truncated {
                section: "masks".into(),
                needed: (cursor + 4 * count) as u64,
                got: mask_bytes.len() as u64,
            });
        }
        let mut frame_lines = Vec::with_capacity(count);
        for _ in 0..count {
            frame_lines.push(u32::from_le_bytes(mask_bytes[cursor..cursor + 4].try_into().unwrap()) as usize);
            cursor += 4;
        }
        let _ = t;
        lines.push(frame_lines);
    }
    let masks = SamplingMaskSet::new(n, h, w, lines, header.center_lines);

    let reference = match find("reference") {
        Some(entry) => {
            let body = reader.section(entry)?;
            let values = parse_complex("reference", body, n * h * w)?;
            let frames = values
                .chunks_exact(h * w)
                .map(|c| ComplexImage::new(h, w, c.to_vec()))
                .collect();
            Some(ImageSequence::new(frames))
        }
        None => None,
    };

    let gt_motion = match find("gt_motion") {
        Some(entry) => {
            let body = reader.section(entry)?;
            let values = parse_f64("gt_motion", body, n * n * 2 * h * w)?;
            let fields = values
                .chunks_exact(2 * h * w)
                .map(|c| MotionField::new(h, w, c[..h * w].to_vec(), c[h * w..].to_vec()))
                .collect();
            Some(MotionFieldSet::new(n, fields))
        }
        None => None,
    };

    let ds = Dataset { kspace, coils, masks, reference, gt_motion };
    if let Some(v) = validate(&ds).into_iter().next() {
        return Err(FormatError::Invariant(v));
    }
    Ok(ds)
}
