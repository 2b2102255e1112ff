//! `data fetch`: download the MNIST IDX files and check them.
//!
//! The files come from a pinned npm package that ships the four official
//! uncompressed IDX files; each extracted file is checked against its
//! SHA-256.

use std::io::Read;
use std::path::Path;

use ergoghost::data::mnist::{TEST_IMAGES, TEST_LABELS, TRAIN_IMAGES, TRAIN_LABELS};
use ergoghost::sha256_hex;

use crate::Failure;

pub const SOURCE_URL: &str = "https://registry.npmjs.org/mnist-data/-/mnist-data-1.2.6.tgz";

pub const CHECKSUMS: [(&str, &str); 4] = [
    (
        TRAIN_IMAGES,
        "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db",
    ),
    (
        TRAIN_LABELS,
        "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5",
    ),
    (
        TEST_IMAGES,
        "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7",
    ),
    (
        TEST_LABELS,
        "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2",
    ),
];

fn io(msg: impl std::fmt::Display) -> Failure {
    Failure {
        code: 2,
        message: msg.to_string(),
    }
}

/// Names of files in `dir` whose checksum does not match (missing files
/// count as mismatches).
pub fn mismatched(dir: &Path) -> Vec<&'static str> {
    CHECKSUMS
        .iter()
        .filter(|(name, sum)| {
            std::fs::read(dir.join(name))
                .map(|b| sha256_hex(&b) != *sum)
                .unwrap_or(true)
        })
        .map(|(name, _)| *name)
        .collect()
}

/// Writes the IDX files found under `package/data/` of a gzipped tarball
/// into `dest`; returns how many were written.
fn extract(tgz: &[u8], dest: &Path) -> Result<usize, Failure> {
    let mut archive = tar::Archive::new(flate2::read::GzDecoder::new(tgz));
    let mut written = 0;
    for entry in archive.entries().map_err(io)? {
        let mut entry = entry.map_err(io)?;
        let path = entry.path().map_err(io)?.into_owned();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if !path.starts_with("package/data") || !CHECKSUMS.iter().any(|(n, _)| *n == name) {
            continue;
        }
        let mut bytes = Vec::new();
        entry.read_to_end(&mut bytes).map_err(io)?;
        std::fs::write(dest.join(name), &bytes).map_err(|e| io(format!("{name}: {e}")))?;
        written += 1;
    }
    Ok(written)
}

pub fn fetch(dest: &Path, checksum: bool) -> Result<(), Failure> {
    if mismatched(dest).is_empty() {
        println!("all four files already present and verified in {}", dest.display());
        return Ok(());
    }
    std::fs::create_dir_all(dest).map_err(|e| io(format!("{}: {e}", dest.display())))?;
    println!("downloading {SOURCE_URL}");
    let mut body = Vec::new();
    ureq::get(SOURCE_URL)
        .call()
        .map_err(|e| io(format!("download failed: {e}")))?
        .body_mut()
        .with_config()
        .limit(200 << 20)
        .reader()
        .read_to_end(&mut body)
        .map_err(|e| io(format!("download failed: {e}")))?;
    let written = extract(&body, dest)?;
    if written != CHECKSUMS.len() {
        return Err(io(format!("archive held {written} of the 4 expected files")));
    }
    if checksum {
        let bad = mismatched(dest);
        if !bad.is_empty() {
            return Err(Failure {
                code: 1,
                message: format!("checksum mismatch: {}", bad.join(", ")),
            });
        }
        println!("checksums verified");
    }
    println!("MNIST written to {}", dest.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tgz(files: &[(&str, &[u8])]) -> Vec<u8> {
        let gz = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::fast());
        let mut builder = tar::Builder::new(gz);
        for (path, bytes) in files {
            let mut header = tar::Header::new_gnu();
            header.set_size(bytes.len() as u64);
            header.set_mode(0o644);
            header.set_cksum();
            builder.append_data(&mut header, path, *bytes).unwrap();
        }
        builder.into_inner().unwrap().finish().unwrap()
    }

    #[test]
    fn extracts_only_the_idx_files() {
        let dir = tempfile::tempdir().unwrap();
        let archive = tgz(&[
            ("package/data/t10k-labels-idx1-ubyte", b"labels"),
            ("package/data/README", b"ignored"),
            ("package/other/train-labels-idx1-ubyte", b"wrong place"),
            ("package/data/train-images-idx3-ubyte", b"images"),
        ]);
        assert_eq!(extract(&archive, dir.path()).ok(), Some(2));
        assert_eq!(std::fs::read(dir.path().join(TEST_LABELS)).unwrap(), b"labels");
        assert!(!dir.path().join("README").exists());
        assert!(!dir.path().join(TRAIN_LABELS).exists());
    }

    #[test]
    fn checksum_mismatches_are_named() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(mismatched(dir.path()).len(), 4);
        std::fs::write(dir.path().join(TEST_LABELS), b"not mnist").unwrap();
        assert!(mismatched(dir.path()).contains(&TEST_LABELS));
    }

    #[test]
    fn corrupt_archive_is_an_io_failure() {
        let dir = tempfile::tempdir().unwrap();
        let err = extract(b"definitely not gzip", dir.path()).err().unwrap();
        assert_eq!(err.code, 2);
    }
}
