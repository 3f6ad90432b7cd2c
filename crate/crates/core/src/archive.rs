//! Snapshot/trajectory/model archives: a plain-text header, a blank line,
//! then the matrix payload as little-endian f64, column-major.
//!
//! Headers carry the payload dimensions, an optional grid signature, the
//! parameter values or time grid, and a SHA-256 checksum of the payload.
//! Dimensions and checksum are verified on load; writes go through a
//! temp-file-then-rename so a crash never leaves a torn archive.

use crate::error::{Error, Result};
use ndarray::prelude::*;
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::Path;

/// Write bytes atomically: temp file in the same directory, then rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp-partial");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn sha_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    crate::rom::hex_string(&hasher.finalize())
}

/// Grid signature of a discretization (mesh bytes plus the velocity order).
pub fn grid_checksum(disc: &crate::field::Discretization) -> String {
    let mut bytes = disc.mesh.signature_bytes();
    bytes.extend_from_slice(&(disc.order as u64).to_le_bytes());
    sha_hex(&bytes)[..16].to_string()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveHeader {
    pub kind: String,
    pub rows: usize,
    pub cols: usize,
    /// Grid signature checksum, when the payload is tied to a discretization.
    pub grid: Option<String>,
    /// Parameter value per column (snapshot archives).
    pub params: Option<Vec<f64>>,
    /// Uniform time grid (trajectory archives): (t0, dt).
    pub time: Option<(f64, f64)>,
    /// Free-form extra keys, serialized in the given order.
    pub extra: Vec<(String, String)>,
}

impl ArchiveHeader {
    pub fn new(kind: &str, rows: usize, cols: usize) -> Self {
        Self {
            kind: kind.to_string(),
            rows,
            cols,
            grid: None,
            params: None,
            time: None,
            extra: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Archive {
    pub header: ArchiveHeader,
    /// rows x cols matrix; columns are snapshots/states.
    pub data: Array2<f64>,
}

fn payload_of(data: &Array2<f64>) -> Vec<u8> {
    let (rows, cols) = data.dim();
    let mut payload = Vec::with_capacity(rows * cols * 8);
    for j in 0..cols {
        for i in 0..rows {
            payload.extend_from_slice(&data[(i, j)].to_le_bytes());
        }
    }
    payload
}

pub fn write_archive(path: &Path, archive: &Archive) -> Result<()> {
    let (rows, cols) = archive.data.dim();
    let h = &archive.header;
    if h.rows != rows || h.cols != cols {
        return Err(Error::Archive(format!(
            "header says {}x{} but data is {rows}x{cols}",
            h.rows, h.cols
        )));
    }
    let payload = payload_of(&archive.data);
    let mut text = String::new();
    writeln!(text, "semrom-archive v1").unwrap();
    writeln!(text, "kind: {}", h.kind).unwrap();
    writeln!(text, "rows: {rows}").unwrap();
    writeln!(text, "cols: {cols}").unwrap();
    if let Some(grid) = &h.grid {
        writeln!(text, "grid: {grid}").unwrap();
    }
    if let Some(params) = &h.params {
        let joined: Vec<String> = params.iter().map(|p| format!("{p:.17e}")).collect();
        writeln!(text, "params: {}", joined.join(" ")).unwrap();
    }
    if let Some((t0, dt)) = h.time {
        writeln!(text, "t0: {t0:.17e}").unwrap();
        writeln!(text, "dt: {dt:.17e}").unwrap();
    }
    for (k, v) in &h.extra {
        writeln!(text, "{k}: {v}").unwrap();
    }
    writeln!(text, "payload-sha256: {}", sha_hex(&payload)).unwrap();
    writeln!(text).unwrap();
    let mut bytes = text.into_bytes();
    bytes.extend_from_slice(&payload);
    atomic_write(path, &bytes)
}

pub fn read_archive(path: &Path) -> Result<Archive> {
    let bytes = std::fs::read(path)?;
    let bad = |msg: &str| Error::Archive(format!("{}: {msg}", path.display()));
    // Header ends at the first blank line.
    let mut header_end = None;
    for i in 0..bytes.len().saturating_sub(1) {
        if bytes[i] == b'\n' && bytes[i + 1] == b'\n' {
            header_end = Some(i + 2);
            break;
        }
    }
    let header_end = header_end.ok_or_else(|| bad("missing blank line after header"))?;
    let text =
        std::str::from_utf8(&bytes[..header_end]).map_err(|_| bad("header is not valid UTF-8"))?;
    let mut lines = text.lines();
    if lines.next() != Some("semrom-archive v1") {
        return Err(bad("expected `semrom-archive v1` header"));
    }
    let mut header = ArchiveHeader::new("", 0, 0);
    let mut sha: Option<String> = None;
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once(": ")
            .ok_or_else(|| bad(&format!("malformed header line `{line}`")))?;
        match key {
            "kind" => header.kind = value.to_string(),
            "rows" => header.rows = value.parse().map_err(|_| bad("invalid rows"))?,
            "cols" => header.cols = value.parse().map_err(|_| bad("invalid cols"))?,
            "grid" => header.grid = Some(value.to_string()),
            "params" => {
                header.params = Some(
                    value
                        .split_whitespace()
                        .map(|t| t.parse())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad("invalid params"))?,
                )
            }
            "t0" => {
                let t0: f64 = value.parse().map_err(|_| bad("invalid t0"))?;
                header.time = Some((t0, header.time.map(|t| t.1).unwrap_or(0.0)));
            }
            "dt" => {
                let dt: f64 = value.parse().map_err(|_| bad("invalid dt"))?;
                header.time = Some((header.time.map(|t| t.0).unwrap_or(0.0), dt));
            }
            "payload-sha256" => sha = Some(value.to_string()),
            other => header.extra.push((other.to_string(), value.to_string())),
        }
    }
    let payload = &bytes[header_end..];
    let expect_len = header.rows * header.cols * 8;
    if payload.len() != expect_len {
        return Err(bad(&format!(
            "payload is {} bytes, header dimensions require {expect_len}",
            payload.len()
        )));
    }
    match sha {
        Some(expected) if sha_hex(payload) == expected => {}
        Some(_) => return Err(bad("payload checksum mismatch")),
        None => return Err(bad("missing payload checksum")),
    }
    if let Some(params) = &header.params {
        if params.len() != header.cols {
            return Err(bad("one parameter per column required"));
        }
    }
    let mut data = Array2::zeros((header.rows, header.cols));
    for j in 0..header.cols {
        for i in 0..header.rows {
            let off = (j * header.rows + i) * 8;
            data[(i, j)] = f64::from_le_bytes(payload[off..off + 8].try_into().unwrap());
        }
    }
    Ok(Archive { header, data })
}

/// Persist a reduced model as a single archive: the dense projections are
/// concatenated column-wise into one payload and the header records the
/// slicing dimensions.
pub fn write_model(path: &Path, model: &crate::rom::ReducedModel) -> Result<()> {
    let n = model.n_modes();
    let q = model.reduced_affine.len();
    let n_full = model.lifting.len();
    let n_phys = model.basis.modes_physical.nrows();
    let m = model.snapshot_params.len();
    let mut columns: Vec<Array1<f64>> = Vec::new();
    fn push_matrix(mat: &Array2<f64>, cols: &mut Vec<Array1<f64>>) {
        for col in mat.columns() {
            cols.push(col.to_owned());
        }
    }
    for (_, mat) in &model.reduced_affine {
        push_matrix(mat, &mut columns);
    }
    for v in &model.reduced_affine_rhs {
        columns.push(v.clone());
    }
    columns.push(model.reduced_rhs_base.clone());
    for mat in &model.advection_modes {
        push_matrix(mat, &mut columns);
    }
    push_matrix(&model.advection_lifting, &mut columns);
    for v in &model.advection_rhs_modes {
        columns.push(v.clone());
    }
    columns.push(model.advection_rhs_lifting.clone());
    columns.push(model.lifting.clone());
    push_matrix(&model.basis.modes_local, &mut columns);
    push_matrix(&model.basis.modes_physical, &mut columns);
    columns.push(model.basis.singular_values.clone());
    columns.push(Array1::from_vec(model.snapshot_params.clone()));
    push_matrix(&model.snapshot_coords, &mut columns);

    let rows = columns.iter().map(|c| c.len()).max().unwrap_or(0);
    let mut data = Array2::zeros((rows, columns.len()));
    for (j, col) in columns.iter().enumerate() {
        data.slice_mut(s![..col.len(), j]).assign(col);
    }
    let mut header = ArchiveHeader::new("reduced-model", rows, columns.len());
    header.extra = vec![
        ("n-modes".into(), n.to_string()),
        ("q".into(), q.to_string()),
        ("n-full".into(), n_full.to_string()),
        ("n-phys".into(), n_phys.to_string()),
        ("n-snapshots".into(), m.to_string()),
        (
            "n-singular".into(),
            model.basis.singular_values.len().to_string(),
        ),
        (
            "domain".into(),
            format!("{:.17e} {:.17e}", model.param_domain.0, model.param_domain.1),
        ),
        (
            "threshold".into(),
            format!("{:.17e}", model.basis.energy_threshold),
        ),
        ("basis-checksum".into(), model.basis_checksum.clone()),
    ];
    for (expr, _) in &model.reduced_affine {
        header.extra.push(("theta".into(), expr.to_string()));
    }
    write_archive(path, &Archive { header, data })
}

/// Load a reduced model written by `write_model`.
pub fn read_model(path: &Path) -> Result<crate::rom::ReducedModel> {
    let archive = read_archive(path)?;
    let bad = |msg: &str| Error::Archive(format!("{}: {msg}", path.display()));
    if archive.header.kind != "reduced-model" {
        return Err(bad("not a reduced-model archive"));
    }
    let get = |key: &str| -> Result<&str> {
        archive
            .header
            .extra
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Archive(format!("{}: missing `{key}`", path.display())))
    };
    let n: usize = get("n-modes")?.parse().map_err(|_| bad("bad n-modes"))?;
    let q: usize = get("q")?.parse().map_err(|_| bad("bad q"))?;
    let n_full: usize = get("n-full")?.parse().map_err(|_| bad("bad n-full"))?;
    let n_phys: usize = get("n-phys")?.parse().map_err(|_| bad("bad n-phys"))?;
    let m: usize = get("n-snapshots")?
        .parse()
        .map_err(|_| bad("bad n-snapshots"))?;
    let n_singular: usize = get("n-singular")?
        .parse()
        .map_err(|_| bad("bad n-singular"))?;
    let domain: Vec<f64> = get("domain")?
        .split_whitespace()
        .map(|t| t.parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| bad("bad domain"))?;
    let threshold: f64 = get("threshold")?.parse().map_err(|_| bad("bad threshold"))?;
    let basis_checksum = get("basis-checksum")?.to_string();
    let thetas: Vec<crate::expr::Expr> = archive
        .header
        .extra
        .iter()
        .filter(|(k, _)| k == "theta")
        .map(|(_, v)| crate::expr::Expr::parse(v))
        .collect::<Result<_>>()?;
    if thetas.len() != q || domain.len() != 2 {
        return Err(bad("inconsistent model header"));
    }

    let mut cursor = 0usize;
    let take_matrix = |cursor: &mut usize, rows: usize, cols: usize| -> Array2<f64> {
        let mut out = Array2::zeros((rows, cols));
        for j in 0..cols {
            out.column_mut(j)
                .assign(&archive.data.slice(s![..rows, *cursor + j]));
        }
        *cursor += cols;
        out
    };
    let take_vector = |cursor: &mut usize, len: usize| -> Array1<f64> {
        let v = archive.data.slice(s![..len, *cursor]).to_owned();
        *cursor += 1;
        v
    };
    let mut reduced_affine = Vec::with_capacity(q);
    for expr in thetas {
        let mat = take_matrix(&mut cursor, n, n);
        reduced_affine.push((expr, mat));
    }
    let reduced_affine_rhs: Vec<Array1<f64>> =
        (0..q).map(|_| take_vector(&mut cursor, n)).collect();
    let reduced_rhs_base = take_vector(&mut cursor, n);
    let advection_modes: Vec<Array2<f64>> =
        (0..n).map(|_| take_matrix(&mut cursor, n, n)).collect();
    let advection_lifting = take_matrix(&mut cursor, n, n);
    let advection_rhs_modes: Vec<Array1<f64>> =
        (0..n).map(|_| take_vector(&mut cursor, n)).collect();
    let advection_rhs_lifting = take_vector(&mut cursor, n);
    let lifting = take_vector(&mut cursor, n_full);
    let modes_local = take_matrix(&mut cursor, n_full, n);
    let modes_physical = take_matrix(&mut cursor, n_phys, n);
    let singular_values = take_vector(&mut cursor, n_singular);
    let snapshot_params = take_vector(&mut cursor, m).to_vec();
    let snapshot_coords = take_matrix(&mut cursor, n, m);
    if cursor != archive.data.ncols() {
        return Err(bad("model payload has unexpected trailing columns"));
    }
    Ok(crate::rom::ReducedModel {
        reduced_affine,
        reduced_affine_rhs,
        reduced_rhs_base,
        advection_modes,
        advection_lifting,
        advection_rhs_modes,
        advection_rhs_lifting,
        lifting,
        basis: crate::pod::PodBasis {
            modes_local,
            modes_physical,
            singular_values,
            energy_threshold: threshold,
        },
        snapshot_params,
        snapshot_coords,
        param_domain: (domain[0], domain[1]),
        basis_checksum,
    })
}
