//! On-disk corpus layout: `{train,val,test}.jsonl`, one `EBKF1` feature file
//! per sample under `features/`, and an optional `manifest.json`.

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use tensorlab::Tensor;

use crate::corpus::synth::Manifest;
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 5] = b"EBKF1";
const MAX_FEATURE_VALUES: u64 = 1 << 28;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Val, SplitName::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

/// One image with its captions. `features` holds the N local patch vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub sample_id: String,
    pub captions: Vec<String>,
    pub class: Option<String>,
    pub features: Tensor,
}

#[derive(Serialize, Deserialize)]
struct Record {
    sample_id: String,
    captions: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class: Option<String>,
    features: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    pub manifest: Option<Manifest>,
}

/// A (sample, caption) pair; training pair indices enumerate these in order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairRef {
    pub sample: usize,
    pub caption: usize,
}

/// Flattens samples into their caption pairs, sample-major.
pub fn pairs(samples: &[Sample]) -> Vec<PairRef> {
    samples
        .iter()
        .enumerate()
        .flat_map(|(s, x)| (0..x.captions.len()).map(move |c| PairRef { sample: s, caption: c }))
        .collect()
}

impl Corpus {
    pub fn split(&self, name: SplitName) -> &[Sample] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }

    pub fn split_mut(&mut self, name: SplitName) -> &mut Vec<Sample> {
        match name {
            SplitName::Train => &mut self.train,
            SplitName::Val => &mut self.val,
            SplitName::Test => &mut self.test,
        }
    }

    pub fn all_samples(&self) -> impl Iterator<Item = &Sample> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }

    /// Unique ids, non-empty captions and consistent feature shapes.
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        let mut shape: Option<Vec<usize>> = None;
        for s in self.all_samples() {
            if !ids.insert(s.sample_id.as_str()) {
                return Err(Error::Format(format!("duplicate sample id {:?}", s.sample_id)));
            }
            if s.captions.is_empty() || s.captions.iter().any(|c| c.trim().is_empty()) {
                return Err(Error::Format(format!("sample {:?} has an empty caption", s.sample_id)));
            }
            if s.features.rank() != 2 || s.features.rows() == 0 {
                return Err(Error::Format(format!("sample {:?} has no patch vectors", s.sample_id)));
            }
            match &shape {
                None => shape = Some(s.features.shape().to_vec()),
                Some(sh) if sh.as_slice() != s.features.shape() => {
                    return Err(Error::Format(format!(
                        "sample {:?} features {:?} differ from {:?}",
                        s.sample_id,
                        s.features.shape(),
                        sh
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        fs::create_dir_all(dir.join("features"))?;
        for split in SplitName::ALL {
            let mut out = BufWriter::new(File::create(dir.join(format!("{}.jsonl", split.as_str())))?);
            for s in self.split(split) {
                let rel = format!("features/{}.ebkf", s.sample_id);
                write_features(&dir.join(&rel), &s.features)?;
                let rec = Record {
                    sample_id: s.sample_id.clone(),
                    captions: s.captions.clone(),
                    class: s.class.clone(),
                    features: rel,
                };
                serde_json::to_writer(&mut out, &rec)?;
                out.write_all(b"\n")?;
            }
            out.flush()?;
        }
        if let Some(m) = &self.manifest {
            fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(m)? + "\n")?;
        }
        Ok(())
    }

    /// Missing split files are treated as empty splits.
    pub fn load(dir: &Path) -> Result<Self> {
        let mut corpus = Corpus::default();
        for split in SplitName::ALL {
            let path = dir.join(format!("{}.jsonl", split.as_str()));
            if !path.exists() {
                continue;
            }
            let reader = BufReader::new(File::open(&path)?);
            for (lineno, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: Record = serde_json::from_str(&line).map_err(|e| {
                    Error::Format(format!("{}:{}: {e}", path.display(), lineno + 1))
                })?;
                let rel = Path::new(&rec.features);
                if rel.is_absolute() || rel.components().any(|c| c.as_os_str() == "..") {
                    return Err(Error::Format(format!(
                        "feature path {:?} escapes the corpus directory",
                        rec.features
                    )));
                }
                corpus.split_mut(split).push(Sample {
                    sample_id: rec.sample_id,
                    captions: rec.captions,
                    class: rec.class,
                    features: read_features(&dir.join(rel))?,
                });
            }
        }
        let manifest = dir.join("manifest.json");
        if manifest.exists() {
            corpus.manifest = Some(serde_json::from_str(&fs::read_to_string(manifest)?)?);
        }
        corpus.validate()?;
        Ok(corpus)
    }
}

pub fn encode_features(t: &Tensor) -> Result<Vec<u8>> {
    if t.rank() != 2 {
        return Err(Error::Shape(format!("feature tensor must be N×d, got {:?}", t.shape())));
    }
    let (n, d) = t.dims2();
    let mut buf = Vec::with_capacity(21 + 8 * n * d);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&(n as u64).to_le_bytes());
    buf.extend_from_slice(&(d as u64).to_le_bytes());
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

pub fn decode_features(mut r: impl Read) -> Result<Tensor> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != FEATURE_MAGIC {
        return Err(Error::Format("feature file: bad magic".into()));
    }
    let mut word = [0u8; 8];
    r.read_exact(&mut word)?;
    let n = u64::from_le_bytes(word);
    r.read_exact(&mut word)?;
    let d = u64::from_le_bytes(word);
    let count = n
        .checked_mul(d)
        .filter(|&c| c <= MAX_FEATURE_VALUES)
        .ok_or_else(|| Error::Format(format!("feature file: implausible shape {n}x{d}")))?;
    let mut data = Vec::with_capacity(count as usize);
    for _ in 0..count {
        r.read_exact(&mut word)?;
        data.push(f64::from_le_bytes(word));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("feature file: trailing bytes".into()));
    }
    Ok(Tensor::new(&[n as usize, d as usize], data)?)
}

pub fn write_features(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode_features(t)?)?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    decode_features(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_header_layout() {
        let t = Tensor::new(&[2, 1], vec![1.5, -2.0]).unwrap();
        let bytes = encode_features(&t).unwrap();
        assert_eq!(&bytes[..5], b"EBKF1");
        assert_eq!(&bytes[5..13], &2u64.to_le_bytes());
        assert_eq!(&bytes[13..21], &1u64.to_le_bytes());
        assert_eq!(&bytes[21..29], &1.5f64.to_le_bytes());
        assert!(decode_features(bytes.as_slice()).unwrap().bit_eq(&t));
        assert!(decode_features(&bytes[..bytes.len() - 1]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode_features(long.as_slice()).is_err());
    }

    #[test]
    fn pairs_are_sample_major() {
        let s = |n: usize| Sample {
            sample_id: format!("s{n}"),
            captions: vec!["x".into(); n],
            class: None,
            features: Tensor::zeros(&[1, 1]),
        };
        let p = pairs(&[s(2), s(1)]);
        assert_eq!(
            p,
            vec![
                PairRef { sample: 0, caption: 0 },
                PairRef { sample: 0, caption: 1 },
                PairRef { sample: 1, caption: 0 },
            ]
        );
    }
}
