//! Downloads datasets into `<data_dir>/<dataset>/` and verifies every file
//! against a pinned digest. Files that already verify are never re-fetched.

use std::fs::{self, File};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{info, warn};
use md5::Md5;
use sha2::{Digest, Sha256};

use collab_ff::data::DatasetName;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Checksum {
    Md5(String),
    Sha256(String),
}

impl Checksum {
    fn algorithm(&self) -> &'static str {
        match self {
            Checksum::Md5(_) => "md5",
            Checksum::Sha256(_) => "sha256",
        }
    }

    fn expected(&self) -> &str {
        match self {
            Checksum::Md5(h) | Checksum::Sha256(h) => h,
        }
    }

    /// Hex digest of the file, computed with this checksum's algorithm.
    pub fn digest_file(&self, path: &Path) -> Result<String> {
        let mut file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
        match self {
            Checksum::Md5(_) => digest_reader::<Md5>(&mut file),
            Checksum::Sha256(_) => digest_reader::<Sha256>(&mut file),
        }
        .with_context(|| format!("reading {}", path.display()))
    }

    pub fn matches(&self, path: &Path) -> Result<bool> {
        Ok(self.digest_file(path)?.eq_ignore_ascii_case(self.expected()))
    }
}

fn digest_reader<D: Digest>(reader: &mut impl Read) -> io::Result<String> {
    let mut hasher = D::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = reader.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// One file of a distribution, with mirrors tried in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemoteFile {
    pub name: String,
    pub urls: Vec<String>,
    pub checksum: Checksum,
}

impl RemoteFile {
    fn new(name: &str, bases: &[&str], md5: &str) -> Self {
        RemoteFile {
            name: name.to_string(),
            urls: bases.iter().map(|b| format!("{b}{name}")).collect(),
            checksum: Checksum::Md5(md5.to_string()),
        }
    }
}

const MNIST_MIRRORS: &[&str] = &[
    "https://ossci-datasets.s3.amazonaws.com/mnist/",
    "http://yann.lecun.com/exdb/mnist/",
];
const FASHION_MIRRORS: &[&str] = &["http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/"];
const CIFAR_MIRRORS: &[&str] = &["https://www.cs.toronto.edu/~kriz/"];
const CIFAR_ARCHIVE: &str = "cifar-10-binary.tar.gz";

/// Pinned files of the upstream distributions.
pub fn sources(dataset: DatasetName) -> Vec<RemoteFile> {
    match dataset {
        DatasetName::Mnist => vec![
            RemoteFile::new("train-images-idx3-ubyte.gz", MNIST_MIRRORS, "f68b3c2dcbeaaa9fbdd348bbdeb94873"),
            RemoteFile::new("train-labels-idx1-ubyte.gz", MNIST_MIRRORS, "d53e105ee54ea40749a09fcbcd1e9432"),
            RemoteFile::new("t10k-images-idx3-ubyte.gz", MNIST_MIRRORS, "9fb629c4189551a2d022fa330f9573f3"),
            RemoteFile::new("t10k-labels-idx1-ubyte.gz", MNIST_MIRRORS, "ec29112dd5afa0611ce80d1b7f02629c"),
        ],
        DatasetName::FashionMnist => vec![
            RemoteFile::new("train-images-idx3-ubyte.gz", FASHION_MIRRORS, "8d4fb7e6c68d591d4c3dfef9ec88bf0d"),
            RemoteFile::new("train-labels-idx1-ubyte.gz", FASHION_MIRRORS, "25c81989df183df01b3e8a0aad5dffbe"),
            RemoteFile::new("t10k-images-idx3-ubyte.gz", FASHION_MIRRORS, "bef4ecab320f06d8554ea6380940ec79"),
            RemoteFile::new("t10k-labels-idx1-ubyte.gz", FASHION_MIRRORS, "bb300cfdad3c16e7a12a480ee83cd310"),
        ],
        DatasetName::Cifar10 => vec![RemoteFile::new(CIFAR_ARCHIVE, CIFAR_MIRRORS, "c32a1d4ab5d03f1284b67883e8d87530")],
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FetchReport {
    pub downloaded: Vec<String>,
    pub cached: Vec<String>,
}

/// Makes sure every file is present in `dir` and matches its digest.
///
/// A cached file with the wrong digest is downloaded again; a download with
/// the wrong digest is an error and leaves nothing behind.
pub fn fetch_files(dir: &Path, files: &[RemoteFile]) -> Result<FetchReport> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut report = FetchReport::default();
    for file in files {
        let path = dir.join(&file.name);
        if path.exists() {
            if file.checksum.matches(&path)? {
                info!("{} verified", path.display());
                report.cached.push(file.name.clone());
                continue;
            }
            warn!("{} fails its {} check, downloading again", path.display(), file.checksum.algorithm());
        }
        download_verified(file, &path)?;
        report.downloaded.push(file.name.clone());
    }
    Ok(report)
}

fn download_verified(file: &RemoteFile, dest: &Path) -> Result<()> {
    let dir = dest.parent().unwrap_or(Path::new("."));
    let mut errors = Vec::new();
    for url in &file.urls {
        info!("downloading {url}");
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        if let Err(e) = download(url, tmp.as_file_mut()) {
            errors.push(format!("{url}: {e:#}"));
            continue;
        }
        let actual = file.checksum.digest_file(tmp.path())?;
        if !actual.eq_ignore_ascii_case(file.checksum.expected()) {
            bail!(
                "checksum mismatch for {} from {url}: {} {actual}, expected {}",
                file.name,
                file.checksum.algorithm(),
                file.checksum.expected()
            );
        }
        tmp.persist(dest).with_context(|| format!("writing {}", dest.display()))?;
        return Ok(());
    }
    bail!("could not download {}: {}", file.name, errors.join("; "))
}

fn download(url: &str, out: &mut File) -> Result<()> {
    let response = ureq::get(url).call()?;
    let mut reader = response.into_body().into_reader();
    io::copy(&mut reader, out)?;
    out.flush()?;
    Ok(())
}

/// Fetches a dataset into `<data_dir>/<dataset>/`, unpacking the CIFAR-10
/// archive when its batches are missing.
pub fn fetch_dataset(data_dir: &Path, dataset: DatasetName) -> Result<(PathBuf, FetchReport)> {
    let dir = data_dir.join(dataset.as_str());
    let report = fetch_files(&dir, &sources(dataset))?;
    if dataset == DatasetName::Cifar10 {
        let batches = dir.join("cifar-10-batches-bin");
        if !report.downloaded.is_empty() || !batches.join("test_batch.bin").exists() {
            let archive = File::open(dir.join(CIFAR_ARCHIVE))?;
            tar::Archive::new(flate2::read::GzDecoder::new(archive))
                .unpack(&dir)
                .context("unpacking the CIFAR-10 archive")?;
        }
    }
    Ok((dir, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digests() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("abc");
        fs::write(&path, b"abc").unwrap();
        let md5 = Checksum::Md5("900150983cd24fb0d6963f7d28e17f72".into());
        let sha = Checksum::Sha256("ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad".into());
        assert!(md5.matches(&path).unwrap());
        assert!(sha.matches(&path).unwrap());
        assert!(!Checksum::Md5("00".into()).matches(&path).unwrap());
    }

    #[test]
    fn every_dataset_is_pinned() {
        assert_eq!(sources(DatasetName::Mnist).len(), 4);
        assert_eq!(sources(DatasetName::FashionMnist).len(), 4);
        for d in DatasetName::ALL {
            for f in sources(*d) {
                assert_eq!(f.checksum.expected().len(), 32);
                assert!(!f.urls.is_empty());
            }
        }
    }
}
