//! Embedding sets: on-disk formats, L2 normalization and a synthetic
//! multi-group generator that stands in for a trained face encoder.
//!
//! Binary layout (all integers little-endian):
//!
//! ```text
//! "FCE1" | u64 trailer_offset | u64 N | u64 d | N*d f32 (row-major) | JSON trailer
//! ```
//!
//! `trailer_offset` is 0 when no metadata is present. The trailer holds
//! `{"labels":[...],"groups":[...]}`; CSV files use a `<name>.meta.json`
//! sidecar with the same shape.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Location, Result};

pub const MAGIC: &[u8; 4] = b"FCE1";
const HEADER_LEN: u64 = 4 + 8 * 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Binary,
    Csv,
}

impl Format {
    /// Guess the format from a file extension; anything but `.csv` is binary.
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => Format::Csv,
            _ => Format::Binary,
        }
    }
}

/// `N` embedding rows of dimension `d`, with optional identity labels and
/// sensitive-group IDs.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub vectors: Array2<f64>,
    pub labels: Option<Vec<u32>>,
    pub groups: Option<Vec<u32>>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Metadata {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    groups: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
}

impl EmbeddingSet {
    pub fn new(
        vectors: Array2<f64>,
        labels: Option<Vec<u32>>,
        groups: Option<Vec<u32>>,
    ) -> Result<Self> {
        let n = vectors.nrows();
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::LengthMismatch {
                    what: "labels",
                    expected: n,
                    got: l.len(),
                });
            }
        }
        if let Some(g) = &groups {
            if g.len() != n {
                return Err(Error::LengthMismatch {
                    what: "groups",
                    expected: n,
                    got: g.len(),
                });
            }
        }
        if let Some((idx, _)) = vectors.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Invalid(format!(
                "non-finite value in row {}",
                idx / vectors.ncols().max(1)
            )));
        }
        Ok(Self {
            vectors,
            labels,
            groups,
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    /// Restrict to the given rows, carrying labels and groups along.
    pub fn select(&self, rows: &[usize]) -> EmbeddingSet {
        EmbeddingSet {
            vectors: self.vectors.select(Axis(0), rows),
            labels: self
                .labels
                .as_ref()
                .map(|l| rows.iter().map(|&r| l[r]).collect()),
            groups: self
                .groups
                .as_ref()
                .map(|g| rows.iter().map(|&r| g[r]).collect()),
        }
    }
}

/// Scale every row to unit L2 norm.
pub fn l2_normalize(set: &EmbeddingSet) -> Result<EmbeddingSet> {
    let mut vectors = set.vectors.clone();
    for (row, mut r) in vectors.axis_iter_mut(Axis(0)).enumerate() {
        let norm = r.dot(&r).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::ZeroRow { row });
        }
        r.mapv_inplace(|v| v / norm);
    }
    Ok(EmbeddingSet {
        vectors,
        labels: set.labels.clone(),
        groups: set.groups.clone(),
    })
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

pub fn save_embeddings(set: &EmbeddingSet, path: &Path, format: Format) -> Result<()> {
    save_embeddings_with_hash(set, path, format, None)
}

/// Like [`save_embeddings`], recording a provenance hash in the metadata.
pub fn save_embeddings_with_hash(
    set: &EmbeddingSet,
    path: &Path,
    format: Format,
    config_hash: Option<&str>,
) -> Result<()> {
    if set.is_empty() {
        return Err(Error::EmptySet);
    }
    let meta = Metadata {
        labels: set.labels.clone(),
        groups: set.groups.clone(),
        config_hash: config_hash.map(str::to_owned),
    };
    let has_meta = meta.labels.is_some() || meta.groups.is_some() || meta.config_hash.is_some();
    match format {
        Format::Binary => {
            let (n, d) = set.vectors.dim();
            let payload_len = (n * d * 4) as u64;
            let trailer_offset = if has_meta {
                HEADER_LEN + payload_len
            } else {
                0
            };
            let mut buf = Vec::with_capacity((HEADER_LEN + payload_len) as usize);
            buf.extend_from_slice(MAGIC);
            buf.extend_from_slice(&trailer_offset.to_le_bytes());
            buf.extend_from_slice(&(n as u64).to_le_bytes());
            buf.extend_from_slice(&(d as u64).to_le_bytes());
            for v in set.vectors.iter() {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            if has_meta {
                buf.extend(serde_json::to_vec(&meta).expect("metadata serializes"));
            }
            fs::write(path, buf).map_err(|e| Error::io(path, e))
        }
        Format::Csv => {
            let mut out = String::new();
            for row in set.vectors.axis_iter(Axis(0)) {
                let line: Vec<String> = row.iter().map(|v| format!("{}", *v as f32)).collect();
                out.push_str(&line.join(","));
                out.push('\n');
            }
            let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
            f.write_all(out.as_bytes())
                .map_err(|e| Error::io(path, e))?;
            let side = sidecar_path(path);
            if has_meta {
                let json = serde_json::to_vec(&meta).expect("metadata serializes");
                fs::write(&side, json).map_err(|e| Error::io(&side, e))?;
            } else if side.exists() {
                fs::remove_file(&side).map_err(|e| Error::io(&side, e))?;
            }
            Ok(())
        }
    }
}

pub fn load_embeddings(path: &Path, format: Format) -> Result<EmbeddingSet> {
    match format {
        Format::Binary => load_binary(path),
        Format::Csv => load_csv(path),
    }
}

fn parse_err(path: &Path, location: Location, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        location,
        message: message.into(),
    }
}

fn read_u64(bytes: &[u8], at: usize, path: &Path) -> Result<u64> {
    bytes
        .get(at..at + 8)
        .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| parse_err(path, Location::Byte(at as u64), "truncated header"))
}

fn load_binary(path: &Path) -> Result<EmbeddingSet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(parse_err(
            path,
            Location::Byte(0),
            "bad magic, expected FCE1",
        ));
    }
    let trailer_offset = read_u64(&bytes, 4, path)?;
    let n = read_u64(&bytes, 12, path)?;
    let d = read_u64(&bytes, 20, path)?;
    if n == 0 || d == 0 {
        return Err(parse_err(
            path,
            Location::Byte(12),
            "header declares an empty matrix",
        ));
    }
    let payload_len = n
        .checked_mul(d)
        .and_then(|x| x.checked_mul(4))
        .ok_or_else(|| parse_err(path, Location::Byte(12), "header dimensions overflow"))?;
    let payload_end = HEADER_LEN + payload_len;
    if (bytes.len() as u64) < payload_end {
        let rows_present = (bytes.len() as u64).saturating_sub(HEADER_LEN) / (4 * d);
        return Err(parse_err(
            path,
            Location::Byte(bytes.len() as u64),
            format!("truncated payload: header declares {n} rows, found {rows_present}"),
        ));
    }
    let (n, d) = (n as usize, d as usize);
    let mut data = Vec::with_capacity(n * d);
    for (i, chunk) in bytes[HEADER_LEN as usize..payload_end as usize]
        .chunks_exact(4)
        .enumerate()
    {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(parse_err(
                path,
                Location::Byte(HEADER_LEN + 4 * i as u64),
                "non-finite value",
            ));
        }
        data.push(v as f64);
    }
    let meta = if trailer_offset == 0 {
        Metadata::default()
    } else {
        if trailer_offset != payload_end {
            return Err(parse_err(
                path,
                Location::Byte(4),
                format!(
                    "trailer offset {trailer_offset} does not follow payload end {payload_end}"
                ),
            ));
        }
        serde_json::from_slice(&bytes[payload_end as usize..]).map_err(|e| {
            parse_err(
                path,
                Location::Byte(payload_end),
                format!("bad metadata trailer: {e}"),
            )
        })?
    };
    let vectors = Array2::from_shape_vec((n, d), data).expect("shape checked");
    EmbeddingSet::new(vectors, meta.labels, meta.groups)
}

fn load_csv(path: &Path) -> Result<EmbeddingSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut data = Vec::new();
    let mut dim = None;
    let mut rows = 0;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut count = 0;
        for field in line.split(',') {
            let v: f64 = field.trim().parse().map_err(|_| {
                parse_err(
                    path,
                    Location::Line(lineno + 1),
                    format!("bad number `{field}`"),
                )
            })?;
            if !v.is_finite() {
                return Err(parse_err(
                    path,
                    Location::Line(lineno + 1),
                    "non-finite value",
                ));
            }
            data.push(v);
            count += 1;
        }
        match dim {
            None => dim = Some(count),
            Some(d) if d != count => {
                return Err(parse_err(
                    path,
                    Location::Line(lineno + 1),
                    format!("row has {count} columns, expected {d}"),
                ))
            }
            _ => {}
        }
        rows += 1;
    }
    let d = dim.ok_or(Error::EmptySet)?;
    let side = sidecar_path(path);
    let meta: Metadata = if side.exists() {
        let raw = fs::read(&side).map_err(|e| Error::io(&side, e))?;
        serde_json::from_slice(&raw)
            .map_err(|e| parse_err(&side, Location::Line(e.line()), e.to_string()))?
    } else {
        Metadata::default()
    };
    let vectors = Array2::from_shape_vec((rows, d), data).expect("shape checked");
    EmbeddingSet::new(vectors, meta.labels, meta.groups)
}

/// One demographic group of synthetic identities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSpec {
    pub group_id: u32,
    pub identity_count: usize,
    /// Inclusive range of images drawn per identity.
    pub images_per_identity: (usize, usize),
    /// Expected L2 norm of the noise added to each image before renormalization.
    pub noise_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub groups: Vec<GroupSpec>,
    pub dim: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Config(format!("dim must be >= 2, got {}", self.dim)));
        }
        if self.groups.is_empty() {
            return Err(Error::Config("synthetic spec has no groups".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for g in &self.groups {
            if !seen.insert(g.group_id) {
                return Err(Error::Config(format!("duplicate group id {}", g.group_id)));
            }
            if g.identity_count == 0 {
                return Err(Error::Config(format!(
                    "group {} has no identities",
                    g.group_id
                )));
            }
            let (lo, hi) = g.images_per_identity;
            if lo == 0 || lo > hi {
                return Err(Error::Config(format!(
                    "group {}: bad images_per_identity range ({lo}, {hi})",
                    g.group_id
                )));
            }
            if !(g.noise_scale > 0.0 && g.noise_scale.is_finite()) {
                return Err(Error::Config(format!(
                    "group {}: noise_scale must be positive",
                    g.group_id
                )));
            }
        }
        Ok(())
    }
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Array1<f64> {
    loop {
        let v: Array1<f64> = (0..dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let norm = v.dot(&v).sqrt();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

/// Draw identities on the unit sphere and noisy, renormalized images around
/// them. Values are rounded to f32 so the result survives a binary
/// save/load round trip unchanged.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<EmbeddingSet> {
    spec.validate()?;
    let dim = spec.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let per_coord = |scale: f64| scale / (dim as f64).sqrt();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut groups = Vec::new();
    let mut identity = 0u32;
    for g in &spec.groups {
        let sigma = per_coord(g.noise_scale);
        for _ in 0..g.identity_count {
            let center = random_unit(&mut rng, dim);
            let (lo, hi) = g.images_per_identity;
            let count = rng.random_range(lo..=hi);
            for _ in 0..count {
                let mut img = center.clone();
                for v in img.iter_mut() {
                    *v += sigma * rng.sample::<f64, _>(StandardNormal);
                }
                let norm = img.dot(&img).sqrt();
                data.extend(img.iter().map(|v| (v / norm) as f32 as f64));
                labels.push(identity);
                groups.push(g.group_id);
            }
            identity += 1;
        }
    }
    let n = labels.len();
    let vectors = Array2::from_shape_vec((n, dim), data).expect("shape");
    EmbeddingSet::new(vectors, Some(labels), Some(groups))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn group(id: u32, ids: usize, noise: f64) -> GroupSpec {
        GroupSpec {
            group_id: id,
            identity_count: ids,
            images_per_identity: (4, 8),
            noise_scale: noise,
        }
    }

    #[test]
    fn csv_without_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        fs::write(&p, "1,0\n0,1\n1,1\n").unwrap();
        let set = load_embeddings(&p, Format::Csv).unwrap();
        assert_eq!(set.len(), 3);
        assert_eq!(set.dim(), 2);
        assert!(set.labels.is_none());
        assert_eq!(set.vectors[[2, 1]], 1.0);
    }

    #[test]
    fn csv_ragged_row_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        fs::write(&p, "1,0\n0,1,3\n").unwrap();
        match load_embeddings(&p, Format::Csv) {
            Err(Error::Parse { location, .. }) => assert_eq!(location, Location::Line(2)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn binary_truncation_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&0u64.to_le_bytes());
        buf.extend_from_slice(&5u64.to_le_bytes());
        buf.extend_from_slice(&4u64.to_le_bytes());
        for _ in 0..12 {
            buf.extend_from_slice(&1.0f32.to_le_bytes());
        }
        fs::write(&p, buf).unwrap();
        let err = load_embeddings(&p, Format::Binary).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("truncated"), "{msg}");
        assert!(msg.contains("byte 76"), "{msg}");
    }

    #[test]
    fn binary_roundtrip_with_metadata() {
        let spec = SyntheticSpec {
            groups: vec![group(0, 3, 0.2), group(7, 2, 0.5)],
            dim: 6,
            seed: 11,
        };
        let set = generate_synthetic(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        save_embeddings(&set, &p, Format::Binary).unwrap();
        assert_eq!(load_embeddings(&p, Format::Binary).unwrap(), set);
    }

    #[test]
    fn csv_sidecar_omits_absent_labels() {
        let set =
            EmbeddingSet::new(array![[1.0, 0.0], [0.0, 1.0]], None, Some(vec![0, 1])).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        save_embeddings(&set, &p, Format::Csv).unwrap();
        let meta = fs::read_to_string(dir.path().join("x.meta.json")).unwrap();
        assert!(!meta.contains("labels"));
        assert!(meta.contains("groups"));
        assert_eq!(load_embeddings(&p, Format::Csv).unwrap(), set);
    }

    #[test]
    fn empty_set_cannot_be_saved() {
        let set = EmbeddingSet::new(Array2::zeros((0, 3)), None, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let err = save_embeddings(&set, &dir.path().join("x.bin"), Format::Binary).unwrap_err();
        assert_eq!(err.to_string(), "empty embedding set");
    }

    #[test]
    fn normalize_rows() {
        let set = EmbeddingSet::new(array![[3.0, 4.0], [1.0, 0.0]], None, None).unwrap();
        let out = l2_normalize(&set).unwrap();
        assert!((out.vectors[[0, 0]] - 0.6).abs() < 1e-15);
        assert!((out.vectors[[0, 1]] - 0.8).abs() < 1e-15);
        let again = l2_normalize(&out).unwrap();
        for (a, b) in again.vectors.iter().zip(out.vectors.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let zero = EmbeddingSet::new(array![[1.0, 0.0], [0.0, 0.0]], None, None).unwrap();
        assert!(matches!(
            l2_normalize(&zero),
            Err(Error::ZeroRow { row: 1 })
        ));
    }

    #[test]
    fn zero_noise_limit_collapses_to_center() {
        let spec = SyntheticSpec {
            groups: vec![GroupSpec {
                group_id: 0,
                identity_count: 1,
                images_per_identity: (5, 5),
                noise_scale: 1e-12,
            }],
            dim: 8,
            seed: 3,
        };
        let set = generate_synthetic(&spec).unwrap();
        let first = set.vectors.row(0);
        for row in set.vectors.rows() {
            assert!((row.dot(&first) - 1.0).abs() < 1e-6);
        }
    }

    fn mean_intra_similarity(set: &EmbeddingSet, group: u32) -> f64 {
        let labels = set.labels.as_ref().unwrap();
        let groups = set.groups.as_ref().unwrap();
        let (mut sum, mut count) = (0.0, 0usize);
        for i in 0..set.len() {
            for j in (i + 1)..set.len() {
                if groups[i] == group && labels[i] == labels[j] {
                    sum += set.vectors.row(i).dot(&set.vectors.row(j));
                    count += 1;
                }
            }
        }
        sum / count as f64
    }

    #[test]
    fn low_noise_group_is_tighter() {
        let spec = SyntheticSpec {
            groups: vec![group(0, 20, 0.1), group(1, 20, 0.6)],
            dim: 32,
            seed: 5,
        };
        let set = generate_synthetic(&spec).unwrap();
        let major = mean_intra_similarity(&set, 0);
        let minor = mean_intra_similarity(&set, 1);
        assert!(major > minor, "{major} vs {minor}");
    }

    #[test]
    fn generator_is_deterministic_and_validated() {
        let spec = SyntheticSpec {
            groups: vec![group(0, 4, 0.3)],
            dim: 16,
            seed: 99,
        };
        assert_eq!(
            generate_synthetic(&spec).unwrap(),
            generate_synthetic(&spec).unwrap()
        );
        let bad = SyntheticSpec { dim: 1, ..spec };
        assert!(matches!(generate_synthetic(&bad), Err(Error::Config(_))));
    }
}
