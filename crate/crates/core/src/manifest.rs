//! JSON-lines manifest of (audio, transcript) examples.
//!
//! The first line is a header object; every further line is one record:
//!
//! ```text
//! {"format":"crossdistill-manifest","version":1,"vocab":64}
//! {"id":"train00000","transcript":"17 5 40","audio":"audio/train00000.wav","split":"train"}
//! {"id":"class00003","transcript":"6 22","audio":"synthetic","split":"test","class":2}
//! ```

use std::collections::HashSet;
use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audiofront::{read_wav, synth_utterance, MelGeometry, SynthSpec};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::trainer::AudioExample;

pub const MANIFEST_FORMAT: &str = "crossdistill-manifest";
pub const MANIFEST_VERSION: u32 = 1;
/// Audio marker for records whose waveform is re-rendered on load.
pub const SYNTHETIC_AUDIO: &str = "synthetic";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    vocab: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    id: String,
    transcript: String,
    audio: String,
    split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub id: String,
    pub transcript: Vec<usize>,
    /// WAV path relative to the manifest's directory, or `None` for
    /// synthetic audio.
    pub audio: Option<String>,
    pub split: Split,
    pub class: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub vocab: usize,
    pub records: Vec<ManifestRecord>,
}

fn line_err(line: usize, msg: impl fmt::Display) -> Error {
    Error::Data(format!("manifest line {line}: {msg}"))
}

impl Manifest {
    pub fn new(vocab: usize) -> Self {
        Manifest {
            vocab,
            records: Vec::new(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, first) = lines.next().ok_or_else(|| Error::Data("manifest is empty (no header)".into()))?;
        let header: Header = serde_json::from_str(first).map_err(|e| line_err(1, e))?;
        if header.format != MANIFEST_FORMAT || header.version != MANIFEST_VERSION {
            return Err(line_err(
                1,
                format!("expected format {MANIFEST_FORMAT:?} version {MANIFEST_VERSION}"),
            ));
        }
        let mut manifest = Manifest::new(header.vocab);
        let mut ids = HashSet::new();
        for (n, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let raw: RawRecord = serde_json::from_str(line).map_err(|e| line_err(n, e))?;
            if !ids.insert(raw.id.clone()) {
                return Err(line_err(n, format!("duplicate id {:?}", raw.id)));
            }
            let transcript = raw
                .transcript
                .split_whitespace()
                .map(|t| t.parse::<usize>().map_err(|_| line_err(n, format!("bad token id {t:?}"))))
                .collect::<Result<Vec<usize>>>()?;
            if transcript.is_empty() {
                return Err(line_err(n, "empty transcript"));
            }
            if let Some(t) = transcript.iter().find(|&&t| t >= header.vocab) {
                return Err(line_err(n, format!("token {t} outside vocabulary {}", header.vocab)));
            }
            let audio = match raw.audio.as_str() {
                SYNTHETIC_AUDIO => None,
                "" => return Err(line_err(n, "empty audio path")),
                p => Some(p.to_string()),
            };
            manifest.records.push(ManifestRecord {
                id: raw.id,
                transcript,
                audio,
                split: raw.split,
                class: raw.class,
            });
        }
        manifest.check_disjoint()?;
        Ok(manifest)
    }

    /// No audio file may serve two splits.
    fn check_disjoint(&self) -> Result<()> {
        let mut owner = std::collections::HashMap::new();
        for r in &self.records {
            if let Some(a) = &r.audio {
                if let Some(prev) = owner.insert(a.as_str(), r.split) {
                    if prev != r.split {
                        return Err(Error::Data(format!("audio {a} appears in both {prev} and {}", r.split)));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Manifest::parse(&text).map_err(|e| match e {
            Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn write<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let header = Header {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            vocab: self.vocab,
        };
        writeln!(out, "{}", serde_json::to_string(&header)?)?;
        for r in &self.records {
            let raw = RawRecord {
                id: r.id.clone(),
                transcript: r.transcript.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" "),
                audio: r.audio.clone().unwrap_or_else(|| SYNTHETIC_AUDIO.into()),
                split: r.split,
                class: r.class,
            };
            writeln!(out, "{}", serde_json::to_string(&raw)?)?;
        }
        Ok(())
    }

    pub fn count(&self, split: Split) -> usize {
        self.records.iter().filter(|r| r.split == split).count()
    }

    /// Examples of one split, optionally restricted to labeled or unlabeled
    /// records. WAV paths resolve against `base`; synthetic records are
    /// rendered from the config's per-line stream.
    pub fn examples(
        &self,
        split: Split,
        labeled: Option<bool>,
        base: &Path,
        cfg: &RunConfig,
        synth: &SynthSpec,
        geometry: &MelGeometry,
    ) -> Result<Vec<AudioExample>> {
        if self.vocab != cfg.model.vocab {
            return Err(Error::Data(format!(
                "manifest vocabulary {} differs from the configured {}",
                self.vocab, cfg.model.vocab
            )));
        }
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split && labeled.map_or(true, |l| l == r.class.is_some()))
            .map(|(i, r)| {
                let wave = match &r.audio {
                    Some(p) => read_wav(&base.join(p))?,
                    None => synth_utterance(&r.transcript, synth, &mut cfg.render_rng(i as u64))?,
                };
                let mut ex = AudioExample::new(r.id.clone(), wave, r.transcript.clone(), geometry)?;
                ex.class = r.class;
                Ok(ex)
            })
            .collect()
    }
}
