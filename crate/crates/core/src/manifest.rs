//! Dataset manifests: `video_id,feature_path,mos[,split]` CSV files.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
    Unassigned,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "" | "unassigned" => Ok(Split::Unassigned),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub video_id: String,
    pub feature_path: String,
    pub mos: f64,
    pub split: Split,
}

impl ManifestEntry {
    /// Feature path resolved against the manifest's directory when relative.
    pub fn resolve(&self, manifest_dir: &Path) -> PathBuf {
        let p = Path::new(&self.feature_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            manifest_dir.join(p)
        }
    }
}

fn manifest_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Manifest {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path)
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<Vec<ManifestEntry>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| manifest_err(path, e.to_string()))?
        .clone();
    let column = |name: &str| headers.iter().position(|h| h == name);
    let id_col = column("video_id").ok_or_else(|| manifest_err(path, "missing column video_id"))?;
    let path_col = column("feature_path").ok_or_else(|| manifest_err(path, "missing column feature_path"))?;
    let mos_col = column("mos").ok_or_else(|| manifest_err(path, "missing column mos"))?;
    let split_col = column("split");

    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| manifest_err(path, format!("line {line}: {e}")))?;
        let field = |c: usize| record.get(c).unwrap_or("");
        let video_id = field(id_col).to_string();
        if video_id.is_empty() {
            return Err(manifest_err(path, format!("line {line}: empty video_id")));
        }
        let mos: f64 = field(mos_col)
            .parse()
            .map_err(|_| manifest_err(path, format!("line {line}: unparsable mos {:?}", field(mos_col))))?;
        if !mos.is_finite() {
            return Err(manifest_err(path, format!("line {line}: non-finite mos")));
        }
        let split = match split_col {
            Some(c) => field(c)
                .parse()
                .map_err(|e: String| manifest_err(path, format!("line {line}: {e}")))?,
            None => Split::Unassigned,
        };
        if !seen.insert(video_id.clone()) {
            return Err(manifest_err(path, format!("line {line}: duplicate video_id {video_id:?}")));
        }
        entries.push(ManifestEntry {
            video_id,
            feature_path: field(path_col).to_string(),
            mos,
            split,
        });
    }
    Ok(entries)
}

pub fn manifest_to_string(entries: &[ManifestEntry]) -> String {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer
        .write_record(["video_id", "feature_path", "mos", "split"])
        .expect("writing to memory");
    for e in entries {
        writer
            .write_record([
                e.video_id.as_str(),
                e.feature_path.as_str(),
                &e.mos.to_string(),
                &e.split.to_string(),
            ])
            .expect("writing to memory");
    }
    String::from_utf8(writer.into_inner().expect("flush to memory")).expect("csv output is utf-8")
}

pub fn write_manifest(entries: &[ManifestEntry], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, manifest_to_string(entries)).map_err(|e| Error::io(path, e))
}

/// Assigns train/val/test with sizes `⌊r₀n⌋`, `⌊r₁n⌋` and the remainder after
/// a seeded shuffle. Entry order is preserved; only `split` changes.
pub fn split_dataset(entries: &[ManifestEntry], ratios: (f64, f64, f64), seed: u64) -> Result<Vec<ManifestEntry>> {
    let n = entries.len();
    if n < 3 {
        return Err(Error::InvalidParameter(format!("need at least 3 entries to split, got {n}")));
    }
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !(0.0..=1.0).contains(r)) || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParameter(format!("split ratios {ratios:?} must be in [0,1] and sum to 1")));
    }
    // The small slack keeps products like 0.6·10 from flooring to 5.
    let n_train = (a * n as f64 + 1e-9).floor() as usize;
    let n_val = (b * n as f64 + 1e-9).floor() as usize;
    split_by_counts(entries, n_train, n_val, seed)
}

/// Like [`split_dataset`] with explicit train and validation counts.
pub fn split_by_counts(entries: &[ManifestEntry], n_train: usize, n_val: usize, seed: u64) -> Result<Vec<ManifestEntry>> {
    let n = entries.len();
    if n_train + n_val > n {
        return Err(Error::InvalidParameter(format!(
            "{n_train} train + {n_val} val exceeds {n} entries"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    SplitMix64::new(seed).split(0x5B17).shuffle(&mut order);
    let mut out = entries.to_vec();
    for (rank, &i) in order.iter().enumerate() {
        out[i].split = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(out)
}

pub fn entries_in(entries: &[ManifestEntry], split: Split) -> Vec<ManifestEntry> {
    entries.iter().filter(|e| e.split == split).cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entries(n: usize) -> Vec<ManifestEntry> {
        (0..n)
            .map(|i| ManifestEntry {
                video_id: format!("v{i}"),
                feature_path: format!("v{i}.dcvf"),
                mos: 1.0 + (i % 5) as f64,
                split: Split::Unassigned,
            })
            .collect()
    }

    fn count(e: &[ManifestEntry], s: Split) -> usize {
        e.iter().filter(|x| x.split == s).count()
    }

    #[test]
    fn six_two_two() {
        let s = split_dataset(&entries(10), (0.6, 0.2, 0.2), 1).unwrap();
        assert_eq!((count(&s, Split::Train), count(&s, Split::Val), count(&s, Split::Test)), (6, 2, 2));

        let s = split_dataset(&entries(1000), (0.6, 0.2, 0.2), 1).unwrap();
        assert_eq!((count(&s, Split::Train), count(&s, Split::Val), count(&s, Split::Test)), (600, 200, 200));
        let ids: HashSet<_> = s.iter().map(|e| e.video_id.clone()).collect();
        assert_eq!(ids.len(), 1000);
        assert_eq!(count(&s, Split::Unassigned), 0);
    }

    #[test]
    fn split_is_seed_deterministic() {
        let a = split_dataset(&entries(50), (0.6, 0.2, 0.2), 7).unwrap();
        let b = split_dataset(&entries(50), (0.6, 0.2, 0.2), 7).unwrap();
        let c = split_dataset(&entries(50), (0.6, 0.2, 0.2), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn too_few_entries() {
        assert!(split_dataset(&entries(2), (0.6, 0.2, 0.2), 1).is_err());
    }

    #[test]
    fn parse_examples() {
        let p = Path::new("m.csv");
        assert!(parse_manifest("video_id,feature_path,mos\n", p).unwrap().is_empty());

        let dup = "video_id,feature_path,mos\na,a.dcvf,1\na,b.dcvf,2\n";
        assert!(parse_manifest(dup, p).unwrap_err().to_string().contains("duplicate"));

        let missing = "video_id,mos\na,1\n";
        assert!(parse_manifest(missing, p).unwrap_err().to_string().contains("feature_path"));

        let bad = "video_id,feature_path,mos\na,a.dcvf,abc\n";
        assert!(parse_manifest(bad, p).unwrap_err().to_string().contains("unparsable"));

        let fixture = "video_id,feature_path,mos,split\n\
                       clip_a,feats/a.dcvf,3.25,train\n\
                       clip_b,/abs/b.dcvf,1.5,val\n\
                       clip_c,c.dcvf,4.75,test\n";
        let got = parse_manifest(fixture, p).unwrap();
        let expected = vec![
            ManifestEntry {
                video_id: "clip_a".into(),
                feature_path: "feats/a.dcvf".into(),
                mos: 3.25,
                split: Split::Train,
            },
            ManifestEntry {
                video_id: "clip_b".into(),
                feature_path: "/abs/b.dcvf".into(),
                mos: 1.5,
                split: Split::Val,
            },
            ManifestEntry {
                video_id: "clip_c".into(),
                feature_path: "c.dcvf".into(),
                mos: 4.75,
                split: Split::Test,
            },
        ];
        assert_eq!(got, expected);
        assert_eq!(got[0].resolve(Path::new("/data")), PathBuf::from("/data/feats/a.dcvf"));
        assert_eq!(got[1].resolve(Path::new("/data")), PathBuf::from("/abs/b.dcvf"));
    }

    #[test]
    fn written_manifest_parses_back() {
        let s = split_dataset(&entries(7), (0.6, 0.2, 0.2), 3).unwrap();
        let text = manifest_to_string(&s);
        assert_eq!(parse_manifest(&text, Path::new("m")).unwrap(), s);
    }
}
