//! Newline-delimited benchmark files: a header line, then one sample per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{AugmentedSample, CandidatePayload};

pub const FORMAT_NAME: &str = "fbcir-bench";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchMode {
    /// Feature vectors on every token and candidate.
    Inline,
    /// Asset references resolved by an out-of-process adapter.
    Asset,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkHeader {
    pub format: String,
    pub version: u32,
    pub mode: BenchMode,
}

impl BenchmarkHeader {
    pub fn new(mode: BenchMode) -> Self {
        BenchmarkHeader {
            format: FORMAT_NAME.into(),
            version: FORMAT_VERSION,
            mode,
        }
    }
}

/// The payload mode of a sample, or `None` when it mixes modes.
pub fn sample_mode(sample: &AugmentedSample) -> Option<BenchMode> {
    let q = &sample.query;
    let cands_inline = sample
        .candidates
        .iter()
        .all(|c| matches!(c.payload, CandidatePayload::Inline { .. }));
    let cands_asset = sample
        .candidates
        .iter()
        .all(|c| matches!(c.payload, CandidatePayload::Asset { .. }));
    if q.is_inline() && cands_inline {
        Some(BenchMode::Inline)
    } else if q.is_asset() && cands_asset {
        Some(BenchMode::Asset)
    } else {
        None
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkFile {
    pub mode: BenchMode,
    pub samples: Vec<AugmentedSample>,
}

impl BenchmarkFile {
    pub fn new(mode: BenchMode, samples: Vec<AugmentedSample>) -> Result<Self> {
        for s in &samples {
            check_sample(s, mode)?;
        }
        Ok(BenchmarkFile { mode, samples })
    }

    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines().enumerate();
        let header = loop {
            match lines.next() {
                None => return Err(Error::Format("missing header line".into())),
                Some((_, line)) => {
                    let line = line?;
                    if !line.trim().is_empty() {
                        break line;
                    }
                }
            }
        };
        let header: BenchmarkHeader = serde_json::from_str(&header)
            .map_err(|e| Error::Format(format!("line 1: bad header: {e}")))?;
        if header.format != FORMAT_NAME {
            return Err(Error::Format(format!("unknown format {:?}", header.format)));
        }
        if header.version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported version {}",
                header.version
            )));
        }
        let mut samples = Vec::new();
        for (i, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let sample: AugmentedSample = serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
            check_sample(&sample, header.mode)
                .map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
            samples.push(sample);
        }
        Ok(BenchmarkFile {
            mode: header.mode,
            samples,
        })
    }

    pub fn read_path(path: &Path) -> Result<Self> {
        let file = File::open(path)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        Self::read(BufReader::new(file))
    }

    pub fn write<W: Write>(&self, mut writer: W) -> Result<()> {
        serde_json::to_writer(&mut writer, &BenchmarkHeader::new(self.mode))?;
        writer.write_all(b"\n")?;
        for s in &self.samples {
            serde_json::to_writer(&mut writer, s)?;
            writer.write_all(b"\n")?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn write_path(&self, path: &Path) -> Result<()> {
        self.write(BufWriter::new(File::create(path)?))
    }
}

fn check_sample(sample: &AugmentedSample, mode: BenchMode) -> Result<()> {
    match sample_mode(sample) {
        Some(m) if m == mode => {}
        Some(m) => {
            return Err(Error::Format(format!(
                "sample {} is {m:?} in a {mode:?} file",
                sample.sample_id
            )))
        }
        None => {
            return Err(Error::Format(format!(
                "sample {} mixes inline and asset payloads",
                sample.sample_id
            )))
        }
    }
    sample.positive()?;
    let mut ids = sample.candidate_ids();
    ids.sort_unstable();
    if ids.iter().enumerate().any(|(i, &id)| i != id) {
        return Err(Error::Format(format!(
            "sample {} candidate ids are not 0..{}",
            sample.sample_id,
            ids.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::{generate_world, WorldConfig};
    use crate::types::{
        normalize_query, Candidate, CandidateKind, ImagePayload, RawSegment, RawToken,
    };

    #[test]
    fn round_trip_is_lossless() {
        let samples = generate_world(&WorldConfig::default(), 12).unwrap();
        let file = BenchmarkFile::new(BenchMode::Inline, samples).unwrap();
        let mut buf = Vec::new();
        file.write(&mut buf).unwrap();
        let back = BenchmarkFile::read(&buf[..]).unwrap();
        assert_eq!(back, file);
        let mut again = Vec::new();
        back.write(&mut again).unwrap();
        assert_eq!(buf, again);
    }

    fn asset_sample(mixed: bool) -> AugmentedSample {
        let query = normalize_query(
            vec![RawSegment {
                area: 1.0,
                payload: ImagePayload::Asset {
                    asset: "q.png".into(),
                    mask: "full".into(),
                },
            }],
            vec![RawToken::word("red")],
        )
        .unwrap();
        let payload = |i: usize| {
            if mixed && i == 1 {
                CandidatePayload::Inline {
                    features: vec![1.0, 0.0],
                }
            } else {
                CandidatePayload::Asset {
                    asset: format!("c{i}"),
                }
            }
        };
        AugmentedSample {
            sample_id: "a".into(),
            query_text: "red".into(),
            query_image: Some("q.png".into()),
            query,
            candidates: (0..2)
                .map(|i| Candidate {
                    id: i,
                    kind: if i == 0 {
                        CandidateKind::Positive
                    } else {
                        CandidateKind::Distractor
                    },
                    payload: payload(i),
                })
                .collect(),
            provenance: "test".into(),
        }
    }

    #[test]
    fn mixed_and_mismatched_modes_are_rejected() {
        assert!(BenchmarkFile::new(BenchMode::Asset, vec![asset_sample(false)]).is_ok());
        assert!(BenchmarkFile::new(BenchMode::Inline, vec![asset_sample(false)]).is_err());
        assert!(BenchmarkFile::new(BenchMode::Asset, vec![asset_sample(true)]).is_err());
    }

    #[test]
    fn header_is_checked() {
        let bad = "{\"format\":\"other\",\"version\":1,\"mode\":\"inline\"}\n";
        assert!(matches!(BenchmarkFile::read(bad.as_bytes()), Err(Error::Format(_))));
        let bad = "{\"format\":\"fbcir-bench\",\"version\":2,\"mode\":\"inline\"}\n";
        assert!(matches!(BenchmarkFile::read(bad.as_bytes()), Err(Error::Format(_))));
        assert!(BenchmarkFile::read("".as_bytes()).is_err());
        let ok = "{\"format\":\"fbcir-bench\",\"version\":1,\"mode\":\"asset\"}\n";
        assert_eq!(BenchmarkFile::read(ok.as_bytes()).unwrap().samples.len(), 0);
    }
}
