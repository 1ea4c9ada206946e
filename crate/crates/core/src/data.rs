//! MNIST-family datasets: IDX files, normalization, split protocol and fetching.

use std::fs::{self, File};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Environment variable overriding the dataset cache directory.
pub const DATA_DIR_ENV: &str = "OPTBP_DATA_DIR";

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];

/// Raw unsigned-byte IDX array.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Idx {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl Idx {
    pub fn magic(&self) -> u32 {
        0x0800 | self.dims.len() as u32
    }
}

/// Parses an IDX byte buffer (already decompressed).
pub fn parse_idx(bytes: &[u8]) -> Result<Idx> {
    let parse = |offset: usize, reason: String| Error::Parse {
        offset: offset as u64,
        reason,
    };
    if bytes.len() < 4 {
        return Err(parse(bytes.len(), "truncated header".into()));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(parse(0, format!("bad magic {:02x}{:02x}", bytes[0], bytes[1])));
    }
    if bytes[2] != 0x08 {
        return Err(parse(2, format!("unsupported element type 0x{:02x}", bytes[2])));
    }
    let ndim = bytes[3] as usize;
    if ndim == 0 {
        return Err(parse(3, "zero dimensions".into()));
    }
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(parse(bytes.len(), "truncated dimension list".into()));
    }
    let mut dims = Vec::with_capacity(ndim);
    let mut total: usize = 1;
    for i in 0..ndim {
        let at = 4 + 4 * i;
        let d = u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        total = total
            .checked_mul(d)
            .ok_or_else(|| parse(at, "dimension product overflows".into()))?;
        dims.push(d);
    }
    let payload = &bytes[header..];
    if payload.len() < total {
        return Err(parse(
            bytes.len(),
            format!("truncated payload: expected {total} bytes, found {}", payload.len()),
        ));
    }
    if payload.len() > total {
        return Err(parse(header + total, "trailing bytes after payload".into()));
    }
    Ok(Idx {
        dims,
        data: payload.to_vec(),
    })
}

/// Reads a file, inflating it first when it starts with the gzip magic.
fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&GZIP_MAGIC) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

pub fn load_idx(path: &Path) -> Result<Idx> {
    parse_idx(&read_maybe_gzip(path)?)
}

pub fn encode_idx(idx: &Idx) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * idx.dims.len() + idx.data.len());
    out.extend_from_slice(&idx.magic().to_be_bytes());
    for &d in &idx.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&idx.data);
    out
}

/// Writes an uncompressed IDX file.
pub fn write_idx(path: &Path, idx: &Idx) -> Result<()> {
    let mut f = File::create(path)?;
    f.write_all(&encode_idx(idx))?;
    Ok(())
}

/// `byte / 255 · scale`.
pub fn normalize<T: Scalar>(bytes: &[u8], scale: f64) -> Vec<T> {
    bytes
        .iter()
        .map(|&b| T::from_f64(b as f64 / 255.0 * scale))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DatasetName {
    #[serde(rename = "mnist")]
    Mnist,
    #[serde(rename = "kmnist")]
    Kmnist,
    #[serde(rename = "emnist-balanced")]
    EmnistBalanced,
}

impl DatasetName {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetName::Mnist => "mnist",
            DatasetName::Kmnist => "kmnist",
            DatasetName::EmnistBalanced => "emnist-balanced",
        }
    }

    pub fn n_classes(self) -> usize {
        match self {
            DatasetName::EmnistBalanced => 47,
            _ => 10,
        }
    }

    /// (train, test) image counts.
    pub fn sizes(self) -> (usize, usize) {
        match self {
            DatasetName::EmnistBalanced => (112_800, 18_800),
            _ => (60_000, 10_000),
        }
    }
}

impl FromStr for DatasetName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mnist" => Ok(DatasetName::Mnist),
            "kmnist" => Ok(DatasetName::Kmnist),
            "emnist-balanced" | "emnist" => Ok(DatasetName::EmnistBalanced),
            other => Err(Error::validation("dataset", format!("unknown dataset `{other}`"))),
        }
    }
}

impl std::fmt::Display for DatasetName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FileKind {
    TrainImages,
    TrainLabels,
    TestImages,
    TestLabels,
}

impl FileKind {
    pub const ALL: [FileKind; 4] = [
        FileKind::TrainImages,
        FileKind::TrainLabels,
        FileKind::TestImages,
        FileKind::TestLabels,
    ];

    /// Name of the decompressed file inside the dataset's cache directory.
    pub fn file_name(self) -> &'static str {
        match self {
            FileKind::TrainImages => "train-images-idx3-ubyte",
            FileKind::TrainLabels => "train-labels-idx1-ubyte",
            FileKind::TestImages => "t10k-images-idx3-ubyte",
            FileKind::TestLabels => "t10k-labels-idx1-ubyte",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub url: String,
    /// SHA-256 of the decompressed IDX content.
    pub sha256: String,
    pub kind: FileKind,
    #[serde(default)]
    pub transpose: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: DatasetName,
    pub files: Vec<ManifestFile>,
}

const MNIST_MANIFEST: &str = r#"{
  "name": "mnist",
  "files": [
    {"kind": "train-images", "url": "https://ossci-datasets.s3.amazonaws.com/mnist/train-images-idx3-ubyte.gz",
     "sha256": "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db"},
    {"kind": "train-labels", "url": "https://ossci-datasets.s3.amazonaws.com/mnist/train-labels-idx1-ubyte.gz",
     "sha256": "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5"},
    {"kind": "test-images", "url": "https://ossci-datasets.s3.amazonaws.com/mnist/t10k-images-idx3-ubyte.gz",
     "sha256": "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7"},
    {"kind": "test-labels", "url": "https://ossci-datasets.s3.amazonaws.com/mnist/t10k-labels-idx1-ubyte.gz",
     "sha256": "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2"}
  ]
}"#;

const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn from_json(s: &str) -> Result<Self> {
        let m: Manifest = serde_json::from_str(s)?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// The pinned manifest shipped with the crate, if there is one.
    pub fn builtin(name: DatasetName) -> Option<Self> {
        match name {
            DatasetName::Mnist => Some(Self::from_json(MNIST_MANIFEST).expect("valid builtin manifest")),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for kind in FileKind::ALL {
            let n = self.files.iter().filter(|f| f.kind == kind).count();
            if n != 1 {
                return Err(Error::validation(
                    "manifest",
                    format!("expected exactly one `{}` entry, found {n}", kind.file_name()),
                ));
            }
        }
        for f in &self.files {
            let hex_ok = f.sha256.len() == 64 && f.sha256.bytes().all(|b| b.is_ascii_hexdigit());
            if !hex_ok {
                return Err(Error::validation("sha256", format!("not a SHA-256 digest: `{}`", f.sha256)));
            }
        }
        Ok(())
    }

    pub fn file(&self, kind: FileKind) -> &ManifestFile {
        self.files.iter().find(|f| f.kind == kind).expect("validated manifest")
    }
}

/// `$OPTBP_DATA_DIR`, else `~/.cache/optbp`.
pub fn default_data_dir() -> PathBuf {
    if let Some(dir) = std::env::var_os(DATA_DIR_ENV) {
        return PathBuf::from(dir);
    }
    let home = std::env::var_os("HOME").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."));
    home.join(".cache").join("optbp")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FetchStatus {
    Cached,
    Downloaded,
}

fn read_source(url: &str) -> Result<Vec<u8>> {
    if url.starts_with("http://") || url.starts_with("https://") {
        let resp = ureq::get(url).call().map_err(|e| Error::Download(format!("{url}: {e}")))?;
        let mut out = Vec::new();
        resp.into_body()
            .into_reader()
            .read_to_end(&mut out)
            .map_err(|e| Error::Download(format!("{url}: {e}")))?;
        Ok(out)
    } else {
        let path = url.strip_prefix("file://").unwrap_or(url);
        Ok(fs::read(path)?)
    }
}

fn inflate(bytes: Vec<u8>) -> Result<Vec<u8>> {
    if bytes.starts_with(&GZIP_MAGIC) {
        let mut out = Vec::new();
        GzDecoder::new(&bytes[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

fn cached_ok(path: &Path, sha256: &str) -> Result<bool> {
    match fs::read(path) {
        Ok(bytes) => Ok(sha256_hex(&bytes) == sha256),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(false),
        Err(e) => Err(e.into()),
    }
}

/// Downloads (or copies) every manifest file into `dir/<name>/`, verifying hashes.
///
/// `mirror` replaces everything before the last `/` of each URL. With `offline`
/// set nothing is downloaded and a cold cache is an error.
pub fn fetch(
    manifest: &Manifest,
    dir: &Path,
    mirror: Option<&str>,
    offline: bool,
) -> Result<Vec<(FileKind, FetchStatus)>> {
    manifest.validate()?;
    let target_dir = dir.join(manifest.name.as_str());
    fs::create_dir_all(&target_dir)?;
    let mut report = Vec::new();
    for entry in &manifest.files {
        let target = target_dir.join(entry.kind.file_name());
        if cached_ok(&target, &entry.sha256)? {
            report.push((entry.kind, FetchStatus::Cached));
            continue;
        }
        if offline {
            return Err(Error::MissingDataset {
                name: manifest.name.to_string(),
                dir: target_dir,
            });
        }
        let url = match mirror {
            Some(base) => {
                let file = entry.url.rsplit('/').next().unwrap_or(&entry.url);
                format!("{}/{}", base.trim_end_matches('/'), file)
            }
            None => entry.url.clone(),
        };
        log::info!("fetching {url}");
        let bytes = inflate(read_source(&url)?)?;
        let partial = target.with_extension("part");
        fs::write(&partial, &bytes)?;
        let actual = sha256_hex(&bytes);
        if actual != entry.sha256 {
            fs::remove_file(&partial)?;
            return Err(Error::HashMismatch {
                file: url,
                expected: entry.sha256.clone(),
                actual,
            });
        }
        fs::rename(&partial, &target)?;
        report.push((entry.kind, FetchStatus::Downloaded));
    }
    fs::write(target_dir.join(MANIFEST_FILE), serde_json::to_string_pretty(manifest)?)?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Train,
    Test,
}

/// Immutable in-memory dataset. Pixels are kept as raw bytes and scaled on
/// access, so one copy serves runs with different input scales.
#[derive(Clone, Debug)]
pub struct Dataset {
    name: DatasetName,
    n_classes: usize,
    height: usize,
    width: usize,
    train_images: Vec<u8>,
    train_labels: Vec<u8>,
    test_images: Vec<u8>,
    test_labels: Vec<u8>,
}

/// Indices of the training set and the two halves of the original test set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub seed: u64,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    /// Builds a dataset from in-memory arrays; image arrays are `N×H×W`.
    pub fn from_idx(
        name: DatasetName,
        n_classes: usize,
        train_images: Idx,
        train_labels: Idx,
        test_images: Idx,
        test_labels: Idx,
    ) -> Result<Self> {
        let check_pair = |images: &Idx, labels: &Idx, part: &str| -> Result<()> {
            if images.dims.len() != 3 || labels.dims.len() != 1 {
                return Err(Error::dim(format!(
                    "{part}: expected N×H×W images and N labels, got {:?} and {:?}",
                    images.dims, labels.dims
                )));
            }
            if images.dims[0] != labels.dims[0] {
                return Err(Error::dim(format!(
                    "{part}: {} images but {} labels",
                    images.dims[0], labels.dims[0]
                )));
            }
            if let Some(&bad) = labels.data.iter().find(|&&l| l as usize >= n_classes) {
                return Err(Error::validation("labels", format!("{part}: label {bad} ≥ {n_classes}")));
            }
            Ok(())
        };
        check_pair(&train_images, &train_labels, "train")?;
        check_pair(&test_images, &test_labels, "test")?;
        if train_images.dims[1..] != test_images.dims[1..] {
            return Err(Error::dim("train and test image sizes differ"));
        }
        Ok(Self {
            name,
            n_classes,
            height: train_images.dims[1],
            width: train_images.dims[2],
            train_images: train_images.data,
            train_labels: train_labels.data,
            test_images: test_images.data,
            test_labels: test_labels.data,
        })
    }

    /// Loads `dir/<name>/`, using the manifest saved there by `fetch` if present.
    pub fn load(name: DatasetName, dir: &Path) -> Result<Self> {
        let ds_dir = dir.join(name.as_str());
        let missing = || Error::MissingDataset {
            name: name.to_string(),
            dir: ds_dir.clone(),
        };
        if !ds_dir.is_dir() {
            return Err(missing());
        }
        let manifest_path = ds_dir.join(MANIFEST_FILE);
        let manifest = if manifest_path.exists() {
            Some(Manifest::load(&manifest_path)?)
        } else {
            Manifest::builtin(name)
        };
        let read = |kind: FileKind| -> Result<Idx> {
            let path = ds_dir.join(kind.file_name());
            let gz = path.with_file_name(format!("{}.gz", kind.file_name()));
            let found = if path.exists() {
                path
            } else if gz.exists() {
                gz
            } else {
                return Err(missing());
            };
            let mut idx = load_idx(&found)?;
            let expected = if matches!(kind, FileKind::TrainImages | FileKind::TestImages) {
                IMAGE_MAGIC
            } else {
                LABEL_MAGIC
            };
            if idx.magic() != expected {
                return Err(Error::Parse {
                    offset: 0,
                    reason: format!("{}: magic 0x{:08x}, expected 0x{expected:08x}", found.display(), idx.magic()),
                });
            }
            if manifest.as_ref().is_some_and(|m| m.file(kind).transpose) {
                transpose_images(&mut idx);
            }
            Ok(idx)
        };
        let ds = Self::from_idx(
            name,
            name.n_classes(),
            read(FileKind::TrainImages)?,
            read(FileKind::TrainLabels)?,
            read(FileKind::TestImages)?,
            read(FileKind::TestLabels)?,
        )?;
        let (n_train, n_test) = name.sizes();
        if ds.len(Part::Train) != n_train || ds.len(Part::Test) != n_test {
            log::warn!(
                "{name}: {} train / {} test images, expected {n_train} / {n_test}",
                ds.len(Part::Train),
                ds.len(Part::Test)
            );
        }
        Ok(ds)
    }

    pub fn name(&self) -> DatasetName {
        self.name
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [1, self.height, self.width]
    }

    pub fn len(&self, part: Part) -> usize {
        self.labels(part).len()
    }

    pub fn labels(&self, part: Part) -> &[u8] {
        match part {
            Part::Train => &self.train_labels,
            Part::Test => &self.test_labels,
        }
    }

    pub fn raw_image(&self, part: Part, index: usize) -> &[u8] {
        let px = self.height * self.width;
        let all = match part {
            Part::Train => &self.train_images,
            Part::Test => &self.test_images,
        };
        &all[index * px..(index + 1) * px]
    }

    /// Normalized images `B×1×H×W` for `indices`.
    pub fn images<T: Scalar>(&self, part: Part, indices: &[usize], scale: f64) -> Tensor<T> {
        let px = self.height * self.width;
        let mut data = Vec::with_capacity(indices.len() * px);
        for &i in indices {
            data.extend(normalize::<T>(self.raw_image(part, i), scale));
        }
        Tensor::new(vec![indices.len(), 1, self.height, self.width], data).expect("non-empty batch")
    }

    pub fn batch_labels(&self, part: Part, indices: &[usize]) -> Vec<usize> {
        let labels = self.labels(part);
        indices.iter().map(|&i| labels[i] as usize).collect()
    }

    /// Seeded halving of the test set into validation and test.
    pub fn split(&self, seed: u64) -> Result<Split> {
        let n = self.len(Part::Test);
        if !n.is_multiple_of(2) || n == 0 {
            return Err(Error::validation("test set", format!("size {n} cannot be halved")));
        }
        let perm = Rng::new(seed).permutation(n);
        let (val, test) = perm.split_at(n / 2);
        Ok(Split {
            seed,
            train: (0..self.len(Part::Train)).collect(),
            validation: val.to_vec(),
            test: test.to_vec(),
        })
    }
}

/// Transposes each H×W image in place (EMNIST ships column-major images).
fn transpose_images(idx: &mut Idx) {
    let (h, w) = (idx.dims[1], idx.dims[2]);
    let mut out = vec![0u8; idx.data.len()];
    for (src, dst) in idx.data.chunks(h * w).zip(out.chunks_mut(h * w)) {
        for r in 0..h {
            for c in 0..w {
                dst[c * h + r] = src[r * w + c];
            }
        }
    }
    idx.data = out;
    idx.dims.swap(1, 2);
}
