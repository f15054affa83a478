//! Output emission: atomic file writes, stable JSON, and binary snapshots of
//! steady states (a JSON header followed by raw little-endian `f64` arrays).

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::domain::ModelParams;
use crate::error::{Error, Result};
use crate::mesh::{FieldGrid, Grid, Mesh3};
use crate::steady::{
    BoundaryProfile, IterationReport, MemoCache, ProfileSpec, SteadyConfig, SteadyState,
};

/// Leading bytes of a snapshot file.
pub const SNAPSHOT_MAGIC: &[u8; 8] = b"HSVMSNP1";

fn io_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::IoFailure(format!("{}: {e}", path.display()))
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| io_err(path, "not a file path"))?;
    let tmp = path.with_file_name(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    let mut f = std::fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
    f.write_all(bytes)
        .and_then(|_| f.sync_all())
        .map_err(|e| io_err(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

/// Pretty JSON with a trailing newline. Struct fields keep declaration order and
/// maps are ordered, so output is byte-stable.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::IoFailure(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, to_json(value)?.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| io_err(path, e))
}

/// Shape record of one array in a snapshot body.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayHeader {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in `f64` elements from the start of the body.
    pub offset: usize,
}

/// Metadata of a steady snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotHeader {
    pub kind: String,
    pub params: ModelParams,
    pub profile: ProfileSpec,
    pub config: SteadyConfig,
    pub report: IterationReport,
    pub moments_mesh: Mesh3,
    pub fields_mesh: Mesh3,
    pub arrays: Vec<ArrayHeader>,
}

fn flatten<const N: usize>(g: &Grid<N>) -> impl Iterator<Item = f64> + '_ {
    g.values.iter().flat_map(|a| a.iter().copied())
}

/// Encodes a steady state: magic, header length (u64 LE), JSON header, body.
pub fn encode_steady(state: &SteadyState) -> Result<Vec<u8>> {
    let nm = state.moments.values.len();
    let nf = state.fields.grid.values.len();
    let header = SnapshotHeader {
        kind: "steady".into(),
        params: state.params.clone(),
        profile: state.profile.spec.clone(),
        config: state.config.clone(),
        report: state.report.clone(),
        moments_mesh: state.moments.mesh.clone(),
        fields_mesh: state.fields.grid.mesh.clone(),
        arrays: vec![
            ArrayHeader {
                name: "moments".into(),
                shape: vec![nm, 4],
                offset: 0,
            },
            ArrayHeader {
                name: "fields".into(),
                shape: vec![nf, 6],
                offset: 4 * nm,
            },
        ],
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::IoFailure(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + 8 * (4 * nm + 6 * nf));
    out.extend_from_slice(SNAPSHOT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in flatten(&state.moments).chain(flatten(&state.fields.grid)) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn take_grid<const N: usize>(body: &[f64], a: &ArrayHeader, mesh: Mesh3) -> Result<Grid<N>> {
    let n = mesh.n_nodes();
    if a.shape != [n, N] || a.offset + n * N > body.len() {
        return Err(Error::IoFailure(format!(
            "snapshot array {} has shape {:?} at {}, expected [{n}, {N}]",
            a.name, a.shape, a.offset
        )));
    }
    let values = body[a.offset..a.offset + n * N]
        .chunks_exact(N)
        .map(|c| c.try_into().expect("chunk of N"))
        .collect();
    Ok(Grid { mesh, values })
}

/// Decodes a steady snapshot; the memo cache starts empty.
pub fn decode_steady(bytes: &[u8]) -> Result<SteadyState> {
    let bad = |m: &str| Error::IoFailure(format!("malformed snapshot: {m}"));
    if bytes.len() < 16 || &bytes[..8] != SNAPSHOT_MAGIC {
        return Err(bad("missing magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let hend = 16usize
        .checked_add(hlen)
        .filter(|e| *e <= bytes.len())
        .ok_or_else(|| bad("header length"))?;
    let header: SnapshotHeader =
        serde_json::from_slice(&bytes[16..hend]).map_err(|e| bad(&e.to_string()))?;
    if header.kind != "steady" {
        return Err(bad(&format!("kind {}", header.kind)));
    }
    let raw = &bytes[hend..];
    if raw.len() % 8 != 0 {
        return Err(bad("body length"));
    }
    let body: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let find = |name: &str| {
        header
            .arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| bad(&format!("no array {name}")))
    };
    let moments = take_grid::<4>(&body, find("moments")?, header.moments_mesh.clone())?;
    let fields = take_grid::<6>(&body, find("fields")?, header.fields_mesh.clone())?;
    let profile = BoundaryProfile::new(header.profile, &header.params)?;
    Ok(SteadyState {
        cache: MemoCache::new(header.config.cache_capacity, header.config.cache_quantum),
        params: header.params,
        profile,
        config: header.config,
        moments,
        fields: Arc::new(FieldGrid { grid: fields }),
        report: header.report,
    })
}

pub fn write_steady(path: &Path, state: &SteadyState) -> Result<()> {
    write_atomic(path, &encode_steady(state)?)
}

pub fn read_steady(path: &Path) -> Result<SteadyState> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    decode_steady(&bytes).map_err(|e| match e {
        Error::IoFailure(m) => io_err(path, m),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_content() {
        let dir = std::env::temp_dir().join(format!("hsvm-io-{}", std::process::id()));
        let p = dir.join("a/b.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        let leftovers = std::fs::read_dir(p.parent().unwrap()).unwrap().count();
        assert_eq!(leftovers, 1);
        std::fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn json_is_stable() {
        let mut m = std::collections::BTreeMap::new();
        m.insert("b", 1.0);
        m.insert("a", 2.0);
        assert_eq!(to_json(&m).unwrap(), "{\n  \"a\": 2.0,\n  \"b\": 1.0\n}\n");
    }

    #[test]
    fn truncated_snapshot_is_rejected() {
        assert!(matches!(
            decode_steady(b"HSVMSNP1"),
            Err(Error::IoFailure(_))
        ));
        assert!(matches!(
            decode_steady(b"nonsense-bytes-here"),
            Err(Error::IoFailure(_))
        ));
    }
}
