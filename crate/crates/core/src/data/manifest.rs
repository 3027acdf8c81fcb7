//! Tab-separated dataset manifests: `id<TAB>label<TAB>path`, with paths
//! relative to the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use super::chimol::{read_chimol, write_chimol_file};
use super::LabeledMolecule;
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.tsv";
pub const SPLITS: [&str; 3] = ["train.tsv", "val.tsv", "test.tsv"];

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub label: usize,
    /// Path relative to the manifest directory.
    pub path: PathBuf,
}

/// Train/val/test sizes: a tenth each for val and test, the rest for train.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let val = n / 10;
    let test = n / 10;
    (n - val - test, val, test)
}

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    entries
        .iter()
        .map(|e| format!("{}\t{}\t{}\n", e.id, e.label, e.path.display()))
        .collect()
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |msg: String| Error::Parse { line: i + 1, msg };
        let fields: Vec<&str> = line.split('\t').collect();
        let [id, label, path] = fields.as_slice() else {
            return Err(parse_err(format!("expected 3 tab-separated fields, found {}", fields.len())));
        };
        let label = label
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("bad label {label:?}")))?;
        out.push(ManifestEntry { id: id.to_string(), label, path: PathBuf::from(path) });
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text)
}

/// Reads every molecule listed in a manifest.
pub fn load_manifest(path: &Path) -> Result<Vec<LabeledMolecule>> {
    let dir = path.parent().unwrap_or(Path::new("."));
    read_manifest(path)?
        .into_iter()
        .map(|e| {
            let mol = read_chimol(&dir.join(&e.path))?.with_id(e.id);
            Ok(LabeledMolecule { mol, label: e.label })
        })
        .collect()
}

/// Writes `molecules/<id>.chimol` for every sample, `manifest.tsv` listing
/// all of them and `train.tsv`/`val.tsv`/`test.tsv` for a contiguous
/// 80/10/10 split.
pub fn write_dataset(dir: &Path, samples: &[LabeledMolecule]) -> Result<()> {
    let mol_dir = dir.join("molecules");
    fs::create_dir_all(&mol_dir).map_err(|e| Error::io(&mol_dir, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let rel = PathBuf::from("molecules").join(format!("{}.chimol", s.mol.id()));
        write_chimol_file(&dir.join(&rel), &s.mol)?;
        entries.push(ManifestEntry { id: s.mol.id().to_string(), label: s.label, path: rel });
    }
    let write = |name: &str, part: &[ManifestEntry]| {
        let p = dir.join(name);
        fs::write(&p, format_manifest(part)).map_err(|e| Error::io(&p, e))
    };
    write(MANIFEST, &entries)?;
    let (train, val, _) = split_sizes(entries.len());
    write(SPLITS[0], &entries[..train])?;
    write(SPLITS[1], &entries[train..train + val])?;
    write(SPLITS[2], &entries[train + val..])?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_rs, SyntheticSpec};

    #[test]
    fn split_sizes_match_80_10_10() {
        assert_eq!(split_sizes(2000), (1600, 200, 200));
        assert_eq!(split_sizes(10), (8, 1, 1));
        assert_eq!(split_sizes(5), (5, 0, 0));
    }

    #[test]
    fn parse_errors_carry_line() {
        let err = parse_manifest("a\t0\tx.chimol\n\nb\tzero\ty.chimol\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }));
        let err = parse_manifest("a 0 x.chimol\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let samples = gen_rs(&SyntheticSpec { count: 20, seed: 3, ..SyntheticSpec::default() }).unwrap();
        write_dataset(dir.path(), &samples).unwrap();
        assert_eq!(load_manifest(&dir.path().join(MANIFEST)).unwrap(), samples);
        let lens: Vec<usize> = SPLITS
            .iter()
            .map(|s| read_manifest(&dir.path().join(s)).unwrap().len())
            .collect();
        assert_eq!(lens, vec![16, 2, 2]);
        let test = load_manifest(&dir.path().join(SPLITS[2])).unwrap();
        assert_eq!(test, samples[18..]);
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            read_manifest(Path::new("/nonexistent/manifest.tsv")),
            Err(Error::Io { .. })
        ));
    }
}
