//! Little-endian binary containers.
//!
//! * CSIBIN (`CSI1`): sample datasets, `f32` payload.
//! * GMTD: transform dictionaries with a trailing FNV-1a hash.
//! * GMTB: coded bitstreams, one length-prefixed payload per label group.
//! * Label sidecar (`LBL1`): `u64` count then one `u32` per sample.

use std::hash::Hasher;
use std::io::Write;
use std::path::Path;

use fnv::FnvHasher;

use crate::entropy::Bitstream;
use crate::fit::{DictionaryComponent, TransformDictionary};
use crate::tensor::{ComplexVectorBatch, EigenSystem, FieldMode};
use crate::{Complex64, GmtcError, Result};

pub const CSIBIN_VERSION: u16 = 1;
pub const GMTD_VERSION: u16 = 1;
pub const GMTB_VERSION: u16 = 1;

/// Byte cursor with format errors on truncation.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self { bytes, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            GmtcError::Format(format!("{}: truncated at byte {}", self.what, self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.take(4)? != magic {
            return Err(GmtcError::Format(format!("{}: bad magic", self.what)));
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn version(&mut self, expected: u16) -> Result<()> {
        let v = self.u16()?;
        if v != expected {
            return Err(GmtcError::Format(format!("{}: unsupported version {v}", self.what)));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(GmtcError::Format(format!(
                "{}: {} trailing bytes",
                self.what,
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

fn checked_len(parts: &[usize]) -> Result<usize> {
    parts
        .iter()
        .try_fold(1usize, |a, &b| a.checked_mul(b))
        .ok_or_else(|| GmtcError::Format("declared size overflows".into()))
}

/// Layout of the samples in a CSIBIN file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stacking {
    /// `vec(H)` with antenna-major Kronecker order `a(theta) ⊗ b(tau)`.
    Kronecker,
    /// Real parts of `vec(H)` followed by imaginary parts.
    RealStacked,
    /// No structure asserted.
    Generic,
}

impl Stacking {
    pub fn code(self) -> u8 {
        match self {
            Stacking::Kronecker => 0,
            Stacking::RealStacked => 1,
            Stacking::Generic => 2,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Stacking::Kronecker),
            1 => Ok(Stacking::RealStacked),
            2 => Ok(Stacking::Generic),
            o => Err(GmtcError::Format(format!("unknown stacking convention {o}"))),
        }
    }
}

/// A CSIBIN dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct CsibinFile {
    pub stacking: Stacking,
    pub data: ComplexVectorBatch,
}

impl CsibinFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let d = &self.data;
        let reals = d.mode().real_components();
        let mut out = Vec::with_capacity(20 + d.as_flat().len() * reals * 4);
        out.extend_from_slice(b"CSI1");
        out.extend_from_slice(&CSIBIN_VERSION.to_le_bytes());
        out.push(d.mode().code());
        out.extend_from_slice(&(d.dim() as u32).to_le_bytes());
        out.extend_from_slice(&(d.len() as u64).to_le_bytes());
        out.push(self.stacking.code());
        for z in d.as_flat() {
            out.extend_from_slice(&(z.re as f32).to_le_bytes());
            if reals == 2 {
                out.extend_from_slice(&(z.im as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "CSIBIN");
        r.magic(b"CSI1")?;
        r.version(CSIBIN_VERSION)?;
        let mode = FieldMode::from_code(r.u8()?)?;
        let dim = r.u32()? as usize;
        let count = usize::try_from(r.u64()?).map_err(|_| GmtcError::Format("count overflows".into()))?;
        let stacking = Stacking::from_code(r.u8()?)?;
        if dim == 0 {
            return Err(GmtcError::Format("CSIBIN: zero dimension".into()));
        }
        let reals = mode.real_components();
        let payload = r.take(checked_len(&[count, dim, reals, 4])?)?;
        r.finish()?;
        let floats: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if floats.iter().any(|x| !x.is_finite()) {
            return Err(GmtcError::Format("CSIBIN: non-finite sample".into()));
        }
        let data: Vec<Complex64> = match mode {
            FieldMode::Complex => floats.chunks_exact(2).map(|c| Complex64::new(c[0], c[1])).collect(),
            FieldMode::Real => floats.iter().map(|&x| Complex64::new(x, 0.0)).collect(),
        };
        Ok(Self {
            stacking,
            data: ComplexVectorBatch::from_flat(mode, dim, data)?,
        })
    }
}

/// Bytes of the GMTD header preceding the components.
const GMTD_HEADER: usize = 4 + 2 + 1 + 4 + 4 + 8;

/// Serialises a dictionary; the last 8 bytes are the FNV-1a hash of the rest.
pub fn dictionary_to_bytes(dict: &TransformDictionary) -> Vec<u8> {
    let n = dict.dim();
    let mut out = Vec::with_capacity(GMTD_HEADER + dict.k() * 8 * (1 + 2 * n + 2 * n * n) + 8);
    out.extend_from_slice(b"GMTD");
    out.extend_from_slice(&GMTD_VERSION.to_le_bytes());
    out.push(dict.mode().code());
    out.extend_from_slice(&(dict.k() as u32).to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&dict.floor().to_le_bytes());
    for c in dict.components() {
        out.extend_from_slice(&c.weight.to_le_bytes());
        for l in c.eig.eigenvalues() {
            out.extend_from_slice(&l.to_le_bytes());
        }
        for s in quantizer_std(dict.mode(), c.eig.eigenvalues()) {
            out.extend_from_slice(&s.to_le_bytes());
        }
        for z in c.eig.vectors_column_major() {
            out.extend_from_slice(&z.re.to_le_bytes());
            out.extend_from_slice(&z.im.to_le_bytes());
        }
    }
    let h = fnv1a(&out);
    out.extend_from_slice(&h.to_le_bytes());
    out
}

/// Per-mode coefficient standard deviation per real component, stored as
/// quantiser metadata.
pub fn quantizer_std(mode: FieldMode, eigenvalues: &[f64]) -> Vec<f64> {
    eigenvalues
        .iter()
        .map(|&l| match mode {
            FieldMode::Complex => (l / 2.0).sqrt(),
            FieldMode::Real => l.sqrt(),
        })
        .collect()
}

pub fn dictionary_from_bytes(bytes: &[u8]) -> Result<TransformDictionary> {
    if bytes.len() < GMTD_HEADER + 8 {
        return Err(GmtcError::Format("GMTD: truncated".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    let mut r = Reader::new(body, "GMTD");
    r.magic(b"GMTD")?;
    r.version(GMTD_VERSION)?;
    let mode = FieldMode::from_code(r.u8()?)?;
    let k = r.u32()? as usize;
    let n = r.u32()? as usize;
    let floor = r.f64()?;
    if k == 0 || n == 0 {
        return Err(GmtcError::Format("GMTD: empty dictionary".into()));
    }
    let per = checked_len(&[8, 1 + 2 * n + 2 * n.checked_mul(n).unwrap_or(usize::MAX / 4)])?;
    if checked_len(&[k, per])? != body.len() - GMTD_HEADER {
        return Err(GmtcError::Format(format!(
            "GMTD: {} payload bytes do not match K = {k}, N = {n}",
            body.len() - GMTD_HEADER
        )));
    }
    let computed = fnv1a(body);
    if computed != stored {
        return Err(GmtcError::Format(format!(
            "GMTD: hash {stored:#018x} does not match contents {computed:#018x}"
        )));
    }
    let mut comps = Vec::with_capacity(k);
    for _ in 0..k {
        let weight = r.f64()?;
        let eigenvalues = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let std = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        if std != quantizer_std(mode, &eigenvalues) {
            return Err(GmtcError::Format("GMTD: quantiser metadata inconsistent with spectrum".into()));
        }
        let vectors = (0..n * n)
            .map(|_| Ok(Complex64::new(r.f64()?, r.f64()?)))
            .collect::<Result<Vec<_>>>()?;
        if mode == FieldMode::Real && vectors.iter().any(|z| z.im != 0.0) {
            return Err(GmtcError::Format("GMTD: complex basis in a real dictionary".into()));
        }
        let eig = EigenSystem::from_parts(eigenvalues, vectors)
            .map_err(|e| GmtcError::Format(format!("GMTD: {e}")))?;
        comps.push(DictionaryComponent { weight, eig });
    }
    r.finish()?;
    TransformDictionary::from_parts(mode, comps, floor)
}

/// The integrity hash embedded in bitstream headers.
pub fn dictionary_hash(dict: &TransformDictionary) -> u64 {
    let bytes = dictionary_to_bytes(dict);
    u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap())
}

/// Real-scalar accounting of a serialised dictionary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub struct ParameterAudit {
    pub k: usize,
    pub n: usize,
    pub eigenvector_scalars: usize,
    pub eigenvalue_scalars: usize,
    pub quantizer_scalars: usize,
    /// `2 K N^2 + 2 K N`.
    pub model_scalars: usize,
    /// Shared quantiser lookup entries (`C*`).
    pub lookup_scalars: usize,
    pub total_scalars: usize,
    /// Mixture weights and the scoring floor, kept outside the formula.
    pub header_scalars: usize,
    pub formula: usize,
}

/// Counts the `f64` fields of a serialised GMTD by section.
pub fn audit_dictionary_bytes(bytes: &[u8]) -> Result<ParameterAudit> {
    let dict = dictionary_from_bytes(bytes)?;
    let (k, n) = (dict.k(), dict.dim());
    let scalars = (bytes.len() - GMTD_HEADER - 8) / 8;
    let header_scalars = k + 1;
    let eigenvalue_scalars = k * n;
    let quantizer_scalars = k * n;
    let eigenvector_scalars = scalars - k - eigenvalue_scalars - quantizer_scalars;
    let model_scalars = eigenvector_scalars + eigenvalue_scalars + quantizer_scalars;
    let lookup_scalars = crate::codec::QuantizerLookup::shared().len();
    Ok(ParameterAudit {
        k,
        n,
        eigenvector_scalars,
        eigenvalue_scalars,
        quantizer_scalars,
        model_scalars,
        lookup_scalars,
        total_scalars: model_scalars + lookup_scalars,
        header_scalars,
        formula: 2 * k * n * n + 2 * k * n + crate::codec::LOOKUP_SIZE,
    })
}

/// A coded batch.
#[derive(Clone, Debug, PartialEq)]
pub struct GmtbFile {
    pub mode: FieldMode,
    pub dict_hash: u64,
    pub water_level: f64,
    pub tau: u16,
    pub dim: u32,
    pub blocks: u64,
    pub groups: Vec<Bitstream>,
}

impl GmtbFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"GMTB");
        out.extend_from_slice(&GMTB_VERSION.to_le_bytes());
        out.push(self.mode.code());
        out.extend_from_slice(&self.dict_hash.to_le_bytes());
        out.extend_from_slice(&self.water_level.to_le_bytes());
        out.extend_from_slice(&self.tau.to_le_bytes());
        out.extend_from_slice(&self.dim.to_le_bytes());
        out.extend_from_slice(&self.blocks.to_le_bytes());
        for g in &self.groups {
            out.extend_from_slice(&(g.bytes.len() as u32).to_le_bytes());
            out.extend_from_slice(&g.bytes);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "GMTB");
        r.magic(b"GMTB")?;
        r.version(GMTB_VERSION)?;
        let mode = FieldMode::from_code(r.u8()?)?;
        let dict_hash = r.u64()?;
        let water_level = r.f64()?;
        let tau = r.u16()?;
        let dim = r.u32()?;
        let blocks = r.u64()?;
        if tau == 0 || !(water_level > 0.0) || !water_level.is_finite() {
            return Err(GmtcError::Format("GMTB: invalid tau or water level".into()));
        }
        let expected = blocks.div_ceil(tau as u64);
        let mut groups = Vec::new();
        while r.pos < bytes.len() {
            let len = r.u32()? as usize;
            groups.push(Bitstream {
                bytes: r.take(len)?.to_vec(),
            });
        }
        if groups.len() as u64 != expected {
            return Err(GmtcError::Format(format!(
                "GMTB: {} groups for {blocks} blocks at tau {tau}",
                groups.len()
            )));
        }
        Ok(Self {
            mode,
            dict_hash,
            water_level,
            tau,
            dim,
            blocks,
            groups,
        })
    }

    /// Header and length prefixes, in bits.
    pub fn container_overhead_bits(&self) -> u64 {
        8 * (4 + 2 + 1 + 8 + 8 + 2 + 4 + 8 + 4 * self.groups.len() as u64)
    }
}

pub fn labels_to_bytes(labels: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * labels.len());
    out.extend_from_slice(b"LBL1");
    out.extend_from_slice(&(labels.len() as u64).to_le_bytes());
    for &l in labels {
        out.extend_from_slice(&(l as u32).to_le_bytes());
    }
    out
}

pub fn labels_from_bytes(bytes: &[u8]) -> Result<Vec<usize>> {
    let mut r = Reader::new(bytes, "labels");
    r.magic(b"LBL1")?;
    let n = usize::try_from(r.u64()?).map_err(|_| GmtcError::Format("label count overflows".into()))?;
    let payload = r.take(checked_len(&[n, 4])?)?;
    r.finish()?;
    Ok(payload
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect())
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| GmtcError::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    Ok(result?)
}
