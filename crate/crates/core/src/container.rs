//! Manifest + blob containers.
//!
//! A container is a pretty-printed JSON manifest `<stem>.manifest.json` next
//! to a binary `<stem>.blob` of little-endian `f32` values. Each tensor
//! segment carries its own 64-bit FNV-1a checksum in the manifest, and the
//! whole blob file carries one more.

use std::collections::BTreeMap;
use std::fs;
use std::hash::Hasher;
use std::path::{Path, PathBuf};

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::library::{AdapterLibrary, ExpertAdapter, ModelSignature, Provenance, SiteId, SiteKind};
use crate::linalg::DenseMatrix;
use crate::lowrank::LowRankDelta;
use crate::real::Real;
use crate::router::{PrototypeBank, SiteBank};

pub const LIBRARY_FORMAT: &str = "adapterlib/1";
pub const BANK_FORMAT: &str = "protobank/1";
pub const CHECKSUM_ALGORITHM: &str = "fnv1a64";
const MANIFEST_SUFFIX: &str = ".manifest.json";
const BLOB_SUFFIX: &str = ".blob";

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

fn hex(x: u64) -> String {
    format!("{x:016x}")
}

/// Manifest and blob paths for a container named by `path`, which may be
/// the bare stem or the manifest file itself.
pub fn container_paths(path: &Path) -> (PathBuf, PathBuf) {
    let s = path.to_string_lossy();
    let stem = s.strip_suffix(MANIFEST_SUFFIX).unwrap_or(&s).to_string();
    (
        PathBuf::from(format!("{stem}{MANIFEST_SUFFIX}")),
        PathBuf::from(format!("{stem}{BLOB_SUFFIX}")),
    )
}

/// Location of one tensor run inside the blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    /// Byte offset.
    pub offset: u64,
    /// Number of `f32` values.
    pub len: u64,
    pub fnv1a64: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobInfo {
    pub file: String,
    pub bytes: u64,
    pub fnv1a64: String,
}

#[derive(Debug, Default)]
pub struct BlobWriter {
    buf: Vec<u8>,
}

impl BlobWriter {
    /// Appends one segment made of the given runs, in order.
    pub fn push<T: Real>(&mut self, runs: &[&[T]]) -> Segment {
        let start = self.buf.len();
        let mut len = 0;
        for run in runs {
            for &v in *run {
                self.buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
            len += run.len();
        }
        Segment {
            offset: start as u64,
            len: len as u64,
            fnv1a64: hex(fnv1a64(&self.buf[start..])),
        }
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }
}

pub struct BlobReader<'a> {
    bytes: &'a [u8],
}

impl<'a> BlobReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes }
    }

    /// Reads and verifies a segment; `name` identifies it in errors.
    pub fn read<T: Real>(&self, seg: &Segment, name: &str) -> Result<Vec<T>> {
        let start = seg.offset as usize;
        let end = start + 4 * seg.len as usize;
        if end > self.bytes.len() {
            return Err(Error::Checksum {
                blob: name.to_string(),
                detail: format!(
                    "truncated: needs bytes {start}..{end}, file has {}",
                    self.bytes.len()
                ),
            });
        }
        let raw = &self.bytes[start..end];
        let got = hex(fnv1a64(raw));
        if got != seg.fnv1a64 {
            return Err(Error::Checksum {
                blob: name.to_string(),
                detail: format!("expected {}, computed {got}", seg.fnv1a64),
            });
        }
        Ok(raw
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect())
    }
}

/// Writes a manifest (with its `blob` record filled in) and the blob file.
pub fn write_container<M: Serialize>(
    path: &Path,
    build: impl FnOnce(BlobInfo) -> M,
    blob: Vec<u8>,
) -> Result<()> {
    let (manifest_path, blob_path) = container_paths(path);
    let info = BlobInfo {
        file: blob_path
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default(),
        bytes: blob.len() as u64,
        fnv1a64: hex(fnv1a64(&blob)),
    };
    let manifest = build(info);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    if let Some(dir) = manifest_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(())
}

/// Reads a manifest of the expected format plus its blob bytes. The
/// whole-file checksum is not checked here so that per-segment checks can
/// name the damaged tensor; call [`verify_blob`] afterwards.
pub fn read_container<M: for<'de> Deserialize<'de>>(path: &Path, format: &str) -> Result<(M, BlobInfo, Vec<u8>)> {
    let (manifest_path, _) = container_paths(path);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let found = value
        .get("format")
        .and_then(|v| v.as_str())
        .ok_or_else(|| Error::Format("manifest has no `format` field".into()))?;
    if found != format {
        return Err(Error::FormatVersion {
            found: found.to_string(),
            expected: format.to_string(),
        });
    }
    let checksum = value.get("checksum").and_then(|v| v.as_str()).unwrap_or("");
    if checksum != CHECKSUM_ALGORITHM {
        return Err(Error::Format(format!("unsupported checksum algorithm `{checksum}`")));
    }
    let blob_info: BlobInfo = serde_json::from_value(
        value
            .get("blob")
            .cloned()
            .ok_or_else(|| Error::Format("manifest has no `blob` record".into()))?,
    )?;
    let manifest: M = serde_json::from_value(value)?;
    let dir = manifest_path.parent().unwrap_or(Path::new(""));
    let blob_path = dir.join(&blob_info.file);
    let bytes = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    Ok((manifest, blob_info, bytes))
}

pub fn verify_blob(info: &BlobInfo, bytes: &[u8]) -> Result<()> {
    if bytes.len() as u64 != info.bytes || hex(fnv1a64(bytes)) != info.fnv1a64 {
        return Err(Error::Checksum {
            blob: info.file.clone(),
            detail: format!(
                "file has {} bytes / {}, manifest records {} bytes / {}",
                bytes.len(),
                hex(fnv1a64(bytes)),
                info.bytes,
                info.fnv1a64
            ),
        });
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct LibraryManifest {
    format: String,
    checksum: String,
    precision: String,
    signature: ModelSignature,
    provenance: Provenance,
    blob: BlobInfo,
    experts: Vec<AdapterEntry>,
    generals: Vec<AdapterEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AdapterEntry {
    name: String,
    metadata: BTreeMap<String, String>,
    sites: Vec<SiteEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SiteEntry {
    layer: usize,
    site: SiteKind,
    d_out: usize,
    k_in: usize,
    rank: usize,
    alpha: f64,
    base_rank: usize,
    /// `A` (rank × k_in) followed by `B` (d_out × rank), row-major.
    data: Segment,
}

fn blob_name(role: &str, adapter: &str, site: SiteId) -> String {
    format!("{role} `{adapter}` {site}")
}

fn write_adapter<T: Real>(blob: &mut BlobWriter, a: &ExpertAdapter<T>) -> AdapterEntry {
    let sites = a
        .deltas
        .iter()
        .map(|(site, d)| SiteEntry {
            layer: site.layer,
            site: site.kind,
            d_out: d.d_out(),
            k_in: d.k_in(),
            rank: d.rank(),
            alpha: d.alpha(),
            base_rank: d.base_rank(),
            data: blob.push(&[d.a().as_slice(), d.b().as_slice()]),
        })
        .collect();
    AdapterEntry {
        name: a.name.clone(),
        metadata: a.metadata.clone(),
        sites,
    }
}

fn read_adapter<T: Real>(reader: &BlobReader<'_>, role: &str, entry: AdapterEntry) -> Result<ExpertAdapter<T>> {
    let mut out = ExpertAdapter::new(entry.name.clone());
    out.metadata = entry.metadata;
    for s in entry.sites {
        let site = SiteId::new(s.layer, s.site);
        let name = blob_name(role, &entry.name, site);
        let n_a = s.rank * s.k_in;
        let n_b = s.d_out * s.rank;
        if s.data.len as usize != n_a + n_b {
            return Err(Error::Format(format!(
                "{name}: segment holds {} values, dims need {}",
                s.data.len,
                n_a + n_b
            )));
        }
        let mut values = reader.read::<T>(&s.data, &name)?;
        let b = values.split_off(n_a);
        let delta = LowRankDelta::new(
            DenseMatrix::new(s.rank, s.k_in, values)?,
            DenseMatrix::new(s.d_out, s.rank, b)?,
            s.alpha,
            s.base_rank,
        )?;
        out.deltas.insert(site, delta);
    }
    Ok(out)
}

/// Writes a validated library. Values are stored as `f32`.
pub fn save_library<T: Real>(lib: &AdapterLibrary<T>, path: &Path) -> Result<()> {
    lib.validate().into_result()?;
    let mut blob = BlobWriter::default();
    let experts: Vec<AdapterEntry> = lib.experts.iter().map(|e| write_adapter(&mut blob, e)).collect();
    let generals: Vec<AdapterEntry> = lib.generals.values().map(|g| write_adapter(&mut blob, g)).collect();
    write_container(
        path,
        |info| LibraryManifest {
            format: LIBRARY_FORMAT.into(),
            checksum: CHECKSUM_ALGORITHM.into(),
            precision: "f32".into(),
            signature: lib.signature.clone(),
            provenance: lib.provenance.clone(),
            blob: info,
            experts,
            generals,
        },
        blob.into_bytes(),
    )
}

/// Reads, checksums and validates a library.
pub fn load_library<T: Real>(path: &Path) -> Result<AdapterLibrary<T>> {
    let (manifest, info, bytes): (LibraryManifest, _, _) = read_container(path, LIBRARY_FORMAT)?;
    let reader = BlobReader::new(&bytes);
    let mut lib = AdapterLibrary::new(manifest.signature);
    lib.provenance = manifest.provenance;
    for e in manifest.experts {
        lib.experts.push(read_adapter(&reader, "expert", e)?);
    }
    for g in manifest.generals {
        let g = read_adapter::<T>(&reader, "general", g)?;
        lib.generals.insert(g.name.clone(), g);
    }
    verify_blob(&info, &bytes)?;
    lib.validate().into_result()?;
    Ok(lib)
}

#[derive(Debug, Serialize, Deserialize)]
struct BankManifest {
    format: String,
    checksum: String,
    signature: ModelSignature,
    built_from: Provenance,
    expert_names: Vec<String>,
    blob: BlobInfo,
    sites: Vec<BankSiteEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BankSiteEntry {
    layer: usize,
    site: SiteKind,
    k_in: usize,
    degenerate: Vec<bool>,
    /// `n × k_in` prototypes, row-major.
    data: Segment,
}

pub fn save_bank<T: Real>(bank: &PrototypeBank<T>, path: &Path) -> Result<()> {
    let mut blob = BlobWriter::default();
    let sites = bank
        .sites
        .iter()
        .map(|(site, sb)| BankSiteEntry {
            layer: site.layer,
            site: site.kind,
            k_in: sb.prototypes.cols(),
            degenerate: sb.degenerate.clone(),
            data: blob.push(&[sb.prototypes.as_slice()]),
        })
        .collect();
    write_container(
        path,
        |info| BankManifest {
            format: BANK_FORMAT.into(),
            checksum: CHECKSUM_ALGORITHM.into(),
            signature: bank.signature.clone(),
            built_from: bank.built_from.clone(),
            expert_names: bank.expert_names.clone(),
            blob: info,
            sites,
        },
        blob.into_bytes(),
    )
}

pub fn load_bank<T: Real>(path: &Path) -> Result<PrototypeBank<T>> {
    let (manifest, info, bytes): (BankManifest, _, _) = read_container(path, BANK_FORMAT)?;
    let reader = BlobReader::new(&bytes);
    let n = manifest.expert_names.len();
    let mut sites = BTreeMap::new();
    for s in manifest.sites {
        let site = SiteId::new(s.layer, s.site);
        let (_, k) = manifest.signature.site_dims(s.site);
        if s.k_in != k || s.degenerate.len() != n || s.data.len as usize != n * k {
            return Err(Error::Format(format!("prototype bank site {site}: dims disagree with the signature")));
        }
        let values = reader.read::<T>(&s.data, &format!("prototypes {site}"))?;
        sites.insert(
            site,
            SiteBank {
                prototypes: DenseMatrix::new(n, k, values)?,
                degenerate: s.degenerate,
            },
        );
    }
    verify_blob(&info, &bytes)?;
    if sites.len() != manifest.signature.site_ids().len() {
        return Err(Error::Format("prototype bank does not cover every site".into()));
    }
    Ok(PrototypeBank {
        signature: manifest.signature,
        built_from: manifest.built_from,
        expert_names: manifest.expert_names,
        sites,
    })
}
