//! Gradient snapshot bundles: per-(task, layer) matrices of flattened
//! per-sample gradients, plus their on-disk directory format.
//!
//! A bundle directory holds `manifest.json` and one `<task>__<layer>.gdm`
//! file per entry. Payloads are stored as `f32`; every analysis converts to
//! `f64` on access.

pub mod gdm;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: &str = "1";
pub const ELEMENT_TYPE: &str = "f32le";

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("bundle io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("gdm decode: {0}")]
    Decode(String),
    #[error("gdm shape: {0}")]
    ShapeMismatch(String),
    #[error("gdm decode: non-finite value at {location}")]
    NonFinite { location: String },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("bundle validation: {0}")]
    Invalid(String),
    #[error("bundle validation: missing entry for task `{task}`, layer `{layer}`")]
    MissingEntry { task: String, layer: String },
    #[error("bundle lookup: unknown task `{0}`")]
    UnknownTask(String),
    #[error("bundle lookup: unknown layer `{0}`")]
    UnknownLayer(String),
    #[error("{file}: {inner}")]
    InFile {
        file: String,
        #[source]
        inner: Box<BundleError>,
    },
}

impl BundleError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        BundleError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn in_file(self, path: &Path) -> Self {
        BundleError::InFile {
            file: path.display().to_string(),
            inner: Box::new(self),
        }
    }

    /// Unwraps file context to the underlying failure.
    pub fn root(&self) -> &BundleError {
        match self {
            BundleError::InFile { inner, .. } => inner.root(),
            other => other,
        }
    }
}

/// Identifiers double as file-name components, so they are restricted to a
/// portable character set.
pub fn validate_identifier(kind: &str, id: &str) -> Result<(), BundleError> {
    let ok = !id.is_empty()
        && !id.starts_with('.')
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(BundleError::Invalid(format!("invalid {kind} identifier `{id}`")))
    }
}

/// One task's per-sample gradients at one layer: `rows` samples of
/// `cols` flattened parameters, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientMatrix {
    task: String,
    layer: String,
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl GradientMatrix {
    pub fn new(
        task: impl Into<String>,
        layer: impl Into<String>,
        rows: usize,
        cols: usize,
        data: Vec<f32>,
    ) -> Result<Self, BundleError> {
        let task = task.into();
        let layer = layer.into();
        let at = || format!("task `{task}`, layer `{layer}`");
        if rows == 0 || cols == 0 {
            return Err(BundleError::Invalid(format!("{}: empty shape {rows}x{cols}", at())));
        }
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(BundleError::Invalid(format!(
                "{}: shape {rows}x{cols} does not match payload of {} values",
                at(),
                data.len()
            )));
        }
        if let Some(idx) = data.iter().position(|v| !v.is_finite()) {
            return Err(BundleError::NonFinite {
                location: format!("{}, row {}, col {}", at(), idx / cols, idx % cols),
            });
        }
        Ok(Self {
            task,
            layer,
            rows,
            cols,
            data,
        })
    }

    /// Builds from an `f64` matrix, rounding to storage precision.
    pub fn from_dmatrix(
        task: impl Into<String>,
        layer: impl Into<String>,
        m: &DMatrix<f64>,
    ) -> Result<Self, BundleError> {
        let data = (0..m.nrows())
            .flat_map(|i| (0..m.ncols()).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] as f32)
            .collect();
        Self::new(task, layer, m.nrows(), m.ncols(), data)
    }

    pub fn task(&self) -> &str {
        &self.task
    }

    pub fn layer(&self) -> &str {
        &self.layer
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Raw row-major storage.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| v as f64).collect()
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_iterator(self.rows, self.cols, self.data.iter().map(|&v| v as f64))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDecl {
    pub name: String,
    pub cols: usize,
}

/// The full input of the analysis pipeline. Immutable once constructed.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    tasks: Vec<String>,
    layers: Vec<LayerDecl>,
    entries: BTreeMap<(String, String), GradientMatrix>,
}

impl GradientBundle {
    /// Validates and assembles a bundle. Every (task, layer) pair must be
    /// present exactly once and match its layer's declared width.
    pub fn new(
        tasks: Vec<String>,
        layers: Vec<LayerDecl>,
        matrices: Vec<GradientMatrix>,
    ) -> Result<Self, BundleError> {
        if tasks.is_empty() {
            return Err(BundleError::Invalid("bundle has no tasks".into()));
        }
        if layers.is_empty() {
            return Err(BundleError::Invalid("bundle has no layers".into()));
        }
        for t in &tasks {
            validate_identifier("task", t)?;
        }
        for l in &layers {
            validate_identifier("layer", &l.name)?;
            if l.cols == 0 {
                return Err(BundleError::Invalid(format!("layer `{}` declares zero columns", l.name)));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for t in &tasks {
            if !seen.insert(t.as_str()) {
                return Err(BundleError::Invalid(format!("duplicate task `{t}`")));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for l in &layers {
            if !seen.insert(l.name.as_str()) {
                return Err(BundleError::Invalid(format!("duplicate layer `{}`", l.name)));
            }
        }

        let mut entries = BTreeMap::new();
        for m in matrices {
            if !tasks.iter().any(|t| t == m.task()) {
                return Err(BundleError::Invalid(format!(
                    "entry for undeclared task `{}` (layer `{}`)",
                    m.task(),
                    m.layer()
                )));
            }
            let decl = layers.iter().find(|l| l.name == m.layer()).ok_or_else(|| {
                BundleError::Invalid(format!(
                    "entry for undeclared layer `{}` (task `{}`)",
                    m.layer(),
                    m.task()
                ))
            })?;
            if decl.cols != m.cols() {
                return Err(BundleError::Invalid(format!(
                    "task `{}`, layer `{}`: {} columns, layer declares {}",
                    m.task(),
                    m.layer(),
                    m.cols(),
                    decl.cols
                )));
            }
            let key = (m.task().to_string(), m.layer().to_string());
            if entries.contains_key(&key) {
                return Err(BundleError::Invalid(format!(
                    "duplicate entry for task `{}`, layer `{}`",
                    key.0, key.1
                )));
            }
            entries.insert(key, m);
        }
        for t in &tasks {
            for l in &layers {
                if !entries.contains_key(&(t.clone(), l.name.clone())) {
                    return Err(BundleError::MissingEntry {
                        task: t.clone(),
                        layer: l.name.clone(),
                    });
                }
            }
        }
        Ok(Self {
            tasks,
            layers,
            entries,
        })
    }

    pub fn tasks(&self) -> &[String] {
        &self.tasks
    }

    pub fn layers(&self) -> &[LayerDecl] {
        &self.layers
    }

    pub fn layer_names(&self) -> Vec<String> {
        self.layers.iter().map(|l| l.name.clone()).collect()
    }

    pub fn has_layer(&self, layer: &str) -> bool {
        self.layers.iter().any(|l| l.name == layer)
    }

    pub fn layer_cols(&self, layer: &str) -> Result<usize, BundleError> {
        self.layers
            .iter()
            .find(|l| l.name == layer)
            .map(|l| l.cols)
            .ok_or_else(|| BundleError::UnknownLayer(layer.to_string()))
    }

    /// Read-only access to the stored per-sample gradient rows.
    pub fn sample_gradients(&self, task: &str, layer: &str) -> Result<&GradientMatrix, BundleError> {
        if !self.tasks.iter().any(|t| t == task) {
            return Err(BundleError::UnknownTask(task.to_string()));
        }
        if !self.has_layer(layer) {
            return Err(BundleError::UnknownLayer(layer.to_string()));
        }
        Ok(&self.entries[&(task.to_string(), layer.to_string())])
    }

    /// Arithmetic mean over the sample rows, in `f64`.
    pub fn mean_gradient(&self, task: &str, layer: &str) -> Result<Vec<f64>, BundleError> {
        let m = self.sample_gradients(task, layer)?;
        let mut acc = vec![0.0f64; m.cols()];
        for i in 0..m.rows() {
            for (a, &v) in acc.iter_mut().zip(m.row(i)) {
                *a += v as f64;
            }
        }
        let n = m.rows() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Ok(acc)
    }

    pub fn manifest(&self) -> BundleManifest {
        let matrices = self
            .tasks
            .iter()
            .flat_map(|t| self.layers.iter().map(move |l| (t, l)))
            .map(|(t, l)| {
                let m = &self.entries[&(t.clone(), l.name.clone())];
                MatrixRecord {
                    task: t.clone(),
                    layer: l.name.clone(),
                    rows: m.rows(),
                    cols: m.cols(),
                    path: format!("{t}__{}.gdm", l.name),
                }
            })
            .collect();
        BundleManifest {
            version: FORMAT_VERSION.to_string(),
            element_type: ELEMENT_TYPE.to_string(),
            tasks: self.tasks.clone(),
            layers: self.layers.clone(),
            matrices,
        }
    }

    /// SHA-256 over task/layer declarations and every payload in manifest
    /// order, hex-encoded.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tasks {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        for l in &self.layers {
            h.update(l.name.as_bytes());
            h.update((l.cols as u64).to_le_bytes());
        }
        for t in &self.tasks {
            for l in &self.layers {
                let m = &self.entries[&(t.clone(), l.name.clone())];
                h.update((m.rows() as u64).to_le_bytes());
                for v in m.data() {
                    h.update(v.to_le_bytes());
                }
            }
        }
        to_hex(&h.finalize())
    }

    /// Returns a bundle restricted to a subset of tasks, in the given order.
    pub fn select_tasks(&self, tasks: &[String]) -> Result<Self, BundleError> {
        let mut matrices = Vec::new();
        for t in tasks {
            for l in &self.layers {
                matrices.push(self.sample_gradients(t, &l.name)?.clone());
            }
        }
        Self::new(tasks.to_vec(), self.layers.clone(), matrices)
    }
}

pub(crate) fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatrixRecord {
    pub task: String,
    pub layer: String,
    pub rows: usize,
    pub cols: usize,
    pub path: String,
}

/// Contents of `manifest.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleManifest {
    pub version: String,
    pub element_type: String,
    pub tasks: Vec<String>,
    pub layers: Vec<LayerDecl>,
    pub matrices: Vec<MatrixRecord>,
}

impl BundleManifest {
    /// Parses and structurally checks a manifest document. File existence
    /// is checked by [`read_bundle`].
    pub fn from_json(bytes: &[u8]) -> Result<Self, BundleError> {
        let m: BundleManifest =
            serde_json::from_slice(bytes).map_err(|e| BundleError::Manifest(e.to_string()))?;
        if m.version != FORMAT_VERSION {
            return Err(BundleError::Manifest(format!(
                "unrecognized version `{}` (expected `{FORMAT_VERSION}`)",
                m.version
            )));
        }
        if m.element_type != ELEMENT_TYPE {
            return Err(BundleError::Manifest(format!(
                "unsupported element type `{}`",
                m.element_type
            )));
        }
        for rec in &m.matrices {
            let p = Path::new(&rec.path);
            let plain = p.components().count() == 1
                && matches!(p.components().next(), Some(std::path::Component::Normal(_)));
            if !plain {
                return Err(BundleError::Manifest(format!(
                    "matrix path `{}` must be a plain file name",
                    rec.path
                )));
            }
        }
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

/// Writes `manifest.json` and one `.gdm` file per entry into `dir`
/// (created if absent).
pub fn write_bundle(bundle: &GradientBundle, dir: &Path) -> Result<(), BundleError> {
    fs::create_dir_all(dir).map_err(|e| BundleError::io(dir, e))?;
    let manifest = bundle.manifest();
    for rec in &manifest.matrices {
        let m = &bundle.entries[&(rec.task.clone(), rec.layer.clone())];
        gdm::write_file(&dir.join(&rec.path), m.rows(), m.cols(), m.data())?;
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_json()).map_err(|e| BundleError::io(&path, e))
}

/// Reads and fully validates a bundle directory.
pub fn read_bundle(dir: &Path) -> Result<GradientBundle, BundleError> {
    let mpath = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&mpath).map_err(|e| BundleError::io(&mpath, e))?;
    let manifest = BundleManifest::from_json(&bytes)?;
    let mut matrices = Vec::with_capacity(manifest.matrices.len());
    for rec in &manifest.matrices {
        let path = dir.join(&rec.path);
        let decoded = gdm::read_file(&path)?;
        if decoded.rows != rec.rows || decoded.cols != rec.cols {
            return Err(BundleError::ShapeMismatch(format!(
                "{}: header {}x{} but manifest records {}x{}",
                path.display(),
                decoded.rows,
                decoded.cols,
                rec.rows,
                rec.cols
            )));
        }
        matrices.push(GradientMatrix::new(
            rec.task.clone(),
            rec.layer.clone(),
            decoded.rows,
            decoded.cols,
            decoded.data,
        )?);
    }
    GradientBundle::new(manifest.tasks, manifest.layers, matrices)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> GradientBundle {
        let a = GradientMatrix::new("a", "l0", 3, 4, (0..12).map(|v| v as f32).collect()).unwrap();
        let b = GradientMatrix::new("b", "l0", 3, 4, (0..12).map(|v| -(v as f32) * 0.5).collect())
            .unwrap();
        GradientBundle::new(
            vec!["a".into(), "b".into()],
            vec![LayerDecl {
                name: "l0".into(),
                cols: 4,
            }],
            vec![a, b],
        )
        .unwrap()
    }

    #[test]
    fn writes_manifest_plus_one_file_per_entry() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&fixture(), dir.path()).unwrap();
        let mut names: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        assert_eq!(names, ["a__l0.gdm", "b__l0.gdm", "manifest.json"]);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let b = fixture();
        write_bundle(&b, dir.path()).unwrap();
        let back = read_bundle(dir.path()).unwrap();
        assert_eq!(b, back);
        assert_eq!(b.fingerprint(), back.fingerprint());
    }

    #[test]
    fn missing_entry_names_the_pair() {
        let a = GradientMatrix::new("a", "l0", 1, 2, vec![1.0, 2.0]).unwrap();
        let err = GradientBundle::new(
            vec!["a".into(), "b".into()],
            vec![LayerDecl {
                name: "l0".into(),
                cols: 2,
            }],
            vec![a],
        )
        .unwrap_err();
        match err {
            BundleError::MissingEntry { task, layer } => {
                assert_eq!((task.as_str(), layer.as_str()), ("b", "l0"))
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn truncated_file_is_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&fixture(), dir.path()).unwrap();
        let p = dir.path().join("a__l0.gdm");
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        let err = read_bundle(dir.path()).unwrap_err();
        assert!(matches!(err.root(), BundleError::ShapeMismatch(_)), "{err}");
    }

    #[test]
    fn missing_manifest_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_bundle(dir.path()), Err(BundleError::Io { .. })));
    }

    #[test]
    fn manifest_rejects_path_escape() {
        let mut m = fixture().manifest();
        m.matrices[0].path = "../x.gdm".into();
        assert!(BundleManifest::from_json(m.to_json().as_bytes()).is_err());
    }

    #[test]
    fn mean_gradient_examples() {
        let m = GradientMatrix::new("a", "l", 2, 2, vec![1.0, 3.0, 3.0, 1.0]).unwrap();
        let s = GradientMatrix::new("b", "l", 1, 3, vec![5.0, 0.0, -1.0]).unwrap();
        let b = GradientBundle::new(
            vec!["a".into()],
            vec![LayerDecl { name: "l".into(), cols: 2 }],
            vec![m],
        )
        .unwrap();
        assert_eq!(b.mean_gradient("a", "l").unwrap(), vec![2.0, 2.0]);
        let b = GradientBundle::new(
            vec!["b".into()],
            vec![LayerDecl { name: "l".into(), cols: 3 }],
            vec![s],
        )
        .unwrap();
        assert_eq!(b.mean_gradient("b", "l").unwrap(), vec![5.0, 0.0, -1.0]);
        assert!(matches!(b.mean_gradient("zz", "l"), Err(BundleError::UnknownTask(_))));
        assert!(matches!(b.mean_gradient("b", "zz"), Err(BundleError::UnknownLayer(_))));
    }

    #[test]
    fn sample_gradients_is_the_stored_matrix() {
        let b = fixture();
        let m = b.sample_gradients("a", "l0").unwrap();
        assert_eq!((m.rows(), m.cols()), (3, 4));
        assert_eq!(m.data(), (0..12).map(|v| v as f32).collect::<Vec<_>>().as_slice());
        assert_eq!(m.rows(), b.manifest().matrices[0].rows);
    }

    #[test]
    fn rejects_non_finite_and_empty() {
        assert!(GradientMatrix::new("a", "l", 1, 2, vec![f32::INFINITY, 0.0]).is_err());
        assert!(GradientMatrix::new("a", "l", 0, 2, vec![]).is_err());
        assert!(validate_identifier("task", "a/b").is_err());
    }
}
