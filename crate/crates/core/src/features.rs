//! Per-frame backbone features and the `DCVF` feature-file format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DCVF" | u32 version (=1) | u32 n_frames | u32 n_levels
//! per level:
//!   u8 kind (0 = pooled, 1 = spatial)
//!   pooled:  u32 channels
//!   spatial: u32 height | u32 width | u32 channels
//! per level, in order: n_frames × [height × width ×] channels f32 values, row-major
//! ```
//!
//! The file does not carry the clip's id; a clip read from disk takes the file
//! stem as its `source_id`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: [u8; 4] = *b"DCVF";
pub const FEATURE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum LevelBlock {
    /// `n_frames × channels`
    Pooled { channels: usize, data: Vec<f32> },
    /// `n_frames × height × width × channels`
    Spatial {
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f32>,
    },
}

impl LevelBlock {
    pub fn channels(&self) -> usize {
        match self {
            LevelBlock::Pooled { channels, .. } | LevelBlock::Spatial { channels, .. } => *channels,
        }
    }

    pub fn data(&self) -> &[f32] {
        match self {
            LevelBlock::Pooled { data, .. } | LevelBlock::Spatial { data, .. } => data,
        }
    }

    fn values_per_frame(&self) -> usize {
        match self {
            LevelBlock::Pooled { channels, .. } => *channels,
            LevelBlock::Spatial {
                height,
                width,
                channels,
                ..
            } => height * width * channels,
        }
    }

    fn kind(&self) -> u8 {
        match self {
            LevelBlock::Pooled { .. } => 0,
            LevelBlock::Spatial { .. } => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureClip {
    n_frames: usize,
    levels: Vec<LevelBlock>,
    source_id: String,
}

impl FeatureClip {
    pub fn new(n_frames: usize, levels: Vec<LevelBlock>, source_id: impl Into<String>) -> Result<Self> {
        if n_frames == 0 {
            return Err(Error::InvalidParameter("a clip needs at least one frame".into()));
        }
        if levels.is_empty() {
            return Err(Error::InvalidParameter("a clip needs at least one level".into()));
        }
        for (l, level) in levels.iter().enumerate() {
            if level.channels() == 0 {
                return Err(Error::InvalidParameter(format!("level {l} has zero channels")));
            }
            if let LevelBlock::Spatial { height, width, .. } = level {
                if *height == 0 || *width == 0 {
                    return Err(Error::InvalidParameter(format!("level {l} has an empty spatial map")));
                }
            }
            let expected = n_frames * level.values_per_frame();
            if level.data().len() != expected {
                return Err(Error::InvalidParameter(format!(
                    "level {l} holds {} values, expected {expected}",
                    level.data().len()
                )));
            }
            if let Some(pos) = level.data().iter().position(|x| !x.is_finite()) {
                return Err(Error::InvalidParameter(format!("level {l} value {pos} is not finite")));
            }
        }
        Ok(Self {
            n_frames,
            levels,
            source_id: source_id.into(),
        })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn levels(&self) -> &[LevelBlock] {
        &self.levels
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn channels(&self) -> Vec<usize> {
        self.levels.iter().map(LevelBlock::channels).collect()
    }
}

/// Spatial mean per frame and channel; pooled levels pass through.
pub fn global_average_pool(level: &LevelBlock, n_frames: usize) -> Tensor {
    match level {
        LevelBlock::Pooled { channels, data } => {
            Tensor::matrix(n_frames, *channels, data.iter().map(|&x| f64::from(x)).collect())
                .expect("clip invariants fix the pooled size")
        }
        LevelBlock::Spatial {
            height,
            width,
            channels,
            data,
        } => {
            let positions = height * width;
            let mut out = vec![0.0; n_frames * channels];
            for f in 0..n_frames {
                let frame = &data[f * positions * channels..(f + 1) * positions * channels];
                let row = &mut out[f * channels..(f + 1) * channels];
                for pos in frame.chunks(*channels) {
                    for (o, &x) in row.iter_mut().zip(pos) {
                        *o += f64::from(x);
                    }
                }
                for o in row.iter_mut() {
                    *o /= positions as f64;
                }
            }
            Tensor::matrix(n_frames, *channels, out).expect("sizes computed above")
        }
    }
}

pub fn encode_feature_clip(clip: &FeatureClip) -> Vec<u8> {
    let payload: usize = clip.levels.iter().map(|l| l.data().len() * 4 + 13).sum();
    let mut buf = Vec::with_capacity(16 + payload);
    buf.extend_from_slice(&FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(clip.n_frames as u32).to_le_bytes());
    buf.extend_from_slice(&(clip.levels.len() as u32).to_le_bytes());
    for level in &clip.levels {
        buf.push(level.kind());
        match level {
            LevelBlock::Pooled { channels, .. } => buf.extend_from_slice(&(*channels as u32).to_le_bytes()),
            LevelBlock::Spatial {
                height,
                width,
                channels,
                ..
            } => {
                for d in [height, width, channels] {
                    buf.extend_from_slice(&(*d as u32).to_le_bytes());
                }
            }
        }
    }
    for level in &clip.levels {
        for x in level.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    buf
}

pub fn write_feature_file(clip: &FeatureClip, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_feature_clip(clip)).map_err(|e| Error::io(path, e))
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FeatureClip> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_feature_clip(&bytes, path, stem)
}

/// Little-endian cursor shared by the binary codecs.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Self { bytes, pos: 0, path }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                detail: format!(
                    "needed {n} bytes for {what} at offset {}, {} left",
                    self.pos,
                    self.bytes.len() - self.pos
                ),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn dim(&mut self, what: &str) -> Result<usize> {
        let d = self.u32(what)? as usize;
        if d == 0 {
            return Err(Error::Malformed {
                path: self.path.to_path_buf(),
                detail: format!("{what} is zero"),
            });
        }
        Ok(d)
    }
}

pub fn decode_feature_clip(bytes: &[u8], path: &Path, source_id: String) -> Result<FeatureClip> {
    let mut r = Reader { bytes, pos: 0, path };
    let magic = r.take(4, "magic")?;
    if magic != FEATURE_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: FEATURE_MAGIC,
            found: [magic[0], magic[1], magic[2], magic[3]],
        });
    }
    let version = r.u32("version")?;
    if version != FEATURE_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            expected: FEATURE_VERSION,
            found: version,
        });
    }
    let n_frames = r.dim("frame count")?;
    let n_levels = r.dim("level count")?;

    let mut headers = Vec::with_capacity(n_levels);
    for l in 0..n_levels {
        let kind = r.take(1, "level kind")?[0];
        let dims = match kind {
            0 => (None, r.dim("channels")?),
            1 => {
                let h = r.dim("height")?;
                let w = r.dim("width")?;
                (Some((h, w)), r.dim("channels")?)
            }
            other => {
                return Err(Error::Malformed {
                    path: path.to_path_buf(),
                    detail: format!("level {l} has unknown kind {other}"),
                })
            }
        };
        headers.push(dims);
    }

    let mut levels = Vec::with_capacity(n_levels);
    for (l, (spatial, channels)) in headers.into_iter().enumerate() {
        let per_frame = spatial.map_or(1, |(h, w)| h * w) * channels;
        let count = n_frames
            .checked_mul(per_frame)
            .filter(|c| c.checked_mul(4).is_some())
            .ok_or_else(|| Error::Malformed {
                path: path.to_path_buf(),
                detail: format!("level {l} size overflows"),
            })?;
        let raw = r.take(count * 4, &format!("level {l} payload"))?;
        let mut data = Vec::with_capacity(count);
        for (i, chunk) in raw.chunks_exact(4).enumerate() {
            let x = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            if !x.is_finite() {
                return Err(Error::NonFinite {
                    path: path.to_path_buf(),
                    location: format!("level {l} value {i}"),
                });
            }
            data.push(x);
        }
        levels.push(match spatial {
            None => LevelBlock::Pooled { channels, data },
            Some((height, width)) => LevelBlock::Spatial {
                height,
                width,
                channels,
                data,
            },
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            detail: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    FeatureClip::new(n_frames, levels, source_id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    fn random_clip(seed: u64, n: usize) -> FeatureClip {
        let mut rng = SplitMix64::new(seed);
        let pooled = LevelBlock::Pooled {
            channels: 3,
            data: (0..n * 3).map(|_| rng.normal() as f32).collect(),
        };
        let spatial = LevelBlock::Spatial {
            height: 2,
            width: 3,
            channels: 2,
            data: (0..n * 12).map(|_| rng.normal() as f32).collect(),
        };
        FeatureClip::new(n, vec![pooled, spatial], "clip").unwrap()
    }

    #[test]
    fn round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let clip = random_clip(9, 5);
        let path = dir.path().join("clip.dcvf");
        write_feature_file(&clip, &path).unwrap();
        assert_eq!(read_feature_file(&path).unwrap(), clip);
    }

    #[test]
    fn minimal_clip_round_trips() {
        let clip = FeatureClip::new(
            1,
            vec![LevelBlock::Pooled {
                channels: 1,
                data: vec![0.5],
            }],
            "m",
        )
        .unwrap();
        let bytes = encode_feature_clip(&clip);
        assert_eq!(bytes.len(), 16 + 5 + 4);
        let back = decode_feature_clip(&bytes, Path::new("m.dcvf"), "m".into()).unwrap();
        assert_eq!(back, clip);
    }

    #[test]
    fn distinct_errors_for_each_corruption() {
        let clip = random_clip(1, 3);
        let good = encode_feature_clip(&clip);
        let p = Path::new("x");

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            decode_feature_clip(&bad_magic, p, "x".into()),
            Err(Error::BadMagic { .. })
        ));

        let mut bad_version = good.clone();
        bad_version[4] = 2;
        assert!(matches!(
            decode_feature_clip(&bad_version, p, "x".into()),
            Err(Error::VersionMismatch { found: 2, .. })
        ));

        let truncated = &good[..good.len() - 3];
        assert!(matches!(
            decode_feature_clip(truncated, p, "x".into()),
            Err(Error::Truncated { .. })
        ));

        let mut nan = good.clone();
        let at = good.len() - 4;
        nan[at..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            decode_feature_clip(&nan, p, "x".into()),
            Err(Error::NonFinite { .. })
        ));

        let mut trailing = good;
        trailing.push(0);
        assert!(matches!(
            decode_feature_clip(&trailing, p, "x".into()),
            Err(Error::Malformed { .. })
        ));
    }

    #[test]
    fn invariants_are_enforced() {
        assert!(FeatureClip::new(0, vec![], "x").is_err());
        let short = LevelBlock::Pooled {
            channels: 2,
            data: vec![0.0; 3],
        };
        assert!(FeatureClip::new(2, vec![short], "x").is_err());
    }

    #[test]
    fn gap_examples() {
        let constant = LevelBlock::Spatial {
            height: 2,
            width: 2,
            channels: 3,
            data: vec![7.0; 2 * 4 * 3],
        };
        let pooled = global_average_pool(&constant, 2);
        assert!(pooled.data().iter().all(|&x| x == 7.0));

        let one = LevelBlock::Spatial {
            height: 1,
            width: 1,
            channels: 2,
            data: vec![1.0, 2.0, 3.0, 4.0],
        };
        assert_eq!(global_average_pool(&one, 2).data(), &[1.0, 2.0, 3.0, 4.0]);

        let clip = random_clip(4, 2);
        let level = &clip.levels()[1];
        let got = global_average_pool(level, 2);
        let data = level.data();
        for f in 0..2 {
            for c in 0..2 {
                let mut s = 0.0;
                for h in 0..2 {
                    for w in 0..3 {
                        s += f64::from(data[((f * 2 + h) * 3 + w) * 2 + c]);
                    }
                }
                assert!((got.get(f, c) - s / 6.0).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn serialization_round_trip_is_identity(
            seed in any::<u64>(),
            n in 1usize..6,
            chans in proptest::collection::vec(1usize..5, 1..4),
            spatial in any::<bool>(),
        ) {
            let mut rng = SplitMix64::new(seed);
            let levels = chans.iter().enumerate().map(|(i, &c)| {
                if spatial && i % 2 == 0 {
                    LevelBlock::Spatial { height: 2, width: 1, channels: c,
                        data: (0..n * 2 * c).map(|_| (rng.normal() * 100.0) as f32).collect() }
                } else {
                    LevelBlock::Pooled { channels: c,
                        data: (0..n * c).map(|_| (rng.normal() * 1e-3) as f32).collect() }
                }
            }).collect();
            let clip = FeatureClip::new(n, levels, "p").unwrap();
            let back = decode_feature_clip(&encode_feature_clip(&clip), Path::new("p"), "p".into()).unwrap();
            prop_assert_eq!(back, clip);
        }
    }
}
