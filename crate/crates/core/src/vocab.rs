//! Joint id space: byte-level text, modality specials, then layer-1 acoustic indices.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Special {
    Bos,
    Eos,
    Pad,
    AudioOpen,
    AudioClose,
    VideoOpen,
    VideoClose,
}

impl Special {
    pub const ALL: [Special; 7] = [
        Special::Bos,
        Special::Eos,
        Special::Pad,
        Special::AudioOpen,
        Special::AudioClose,
        Special::VideoOpen,
        Special::VideoClose,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Special::Bos => "<bos>",
            Special::Eos => "<eos>",
            Special::Pad => "<pad>",
            Special::AudioOpen => "<Audio>",
            Special::AudioClose => "</Audio>",
            Special::VideoOpen => "<Video>",
            Special::VideoClose => "</Video>",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Audio,
    Video,
}

impl Modality {
    pub fn tags(self) -> (Special, Special) {
        match self {
            Modality::Audio => (Special::AudioOpen, Special::AudioClose),
            Modality::Video => (Special::VideoOpen, Special::VideoClose),
        }
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "audio" => Ok(Modality::Audio),
            "video" => Ok(Modality::Video),
            other => Err(Error::invalid(format!("unknown modality {other:?}"))),
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Audio => "audio",
            Modality::Video => "video",
        })
    }
}

/// What a token id stands for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenClass {
    Text(u8),
    Special(Special),
    Acoustic(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnifiedVocab {
    pub n_text: usize,
    pub specials: Vec<String>,
    pub k_acoustic: usize,
}

impl Default for UnifiedVocab {
    fn default() -> Self {
        Self::new(256)
    }
}

impl UnifiedVocab {
    /// Byte-level text ids, the seven specials, then `k` acoustic ids.
    pub fn new(k: usize) -> Self {
        Self {
            n_text: 256,
            specials: Special::ALL.iter().map(|s| s.name().to_string()).collect(),
            k_acoustic: k,
        }
    }

    pub fn size(&self) -> usize {
        self.n_text + self.specials.len() + self.k_acoustic
    }

    pub fn acoustic_base(&self) -> usize {
        self.n_text + self.specials.len()
    }

    pub fn special(&self, s: Special) -> usize {
        self.n_text + Special::ALL.iter().position(|x| *x == s).expect("listed")
    }

    pub fn bos(&self) -> usize {
        self.special(Special::Bos)
    }

    pub fn eos(&self) -> usize {
        self.special(Special::Eos)
    }

    pub fn pad(&self) -> usize {
        self.special(Special::Pad)
    }

    pub fn classify(&self, id: usize) -> Result<TokenClass> {
        if id < self.n_text {
            Ok(TokenClass::Text(id as u8))
        } else if id < self.acoustic_base() {
            Ok(TokenClass::Special(Special::ALL[id - self.n_text]))
        } else if id < self.size() {
            Ok(TokenClass::Acoustic(id - self.acoustic_base()))
        } else {
            Err(Error::OutOfRange {
                what: "token id",
                index: id,
                limit: self.size(),
            })
        }
    }

    pub fn is_text(&self, id: usize) -> bool {
        id < self.n_text
    }

    pub fn is_acoustic(&self, id: usize) -> bool {
        (self.acoustic_base()..self.size()).contains(&id)
    }

    /// UTF-8 bytes as ids.
    pub fn encode_text(&self, s: &str) -> Vec<usize> {
        s.bytes().map(usize::from).collect()
    }

    /// Inverse of [`encode_text`]; invalid UTF-8 is replaced lossily.
    pub fn decode_text(&self, ids: &[usize]) -> Result<String> {
        let bytes: Vec<u8> = ids
            .iter()
            .map(|&i| match self.classify(i)? {
                TokenClass::Text(b) => Ok(b),
                _ => Err(Error::OutOfRange {
                    what: "text id",
                    index: i,
                    limit: self.n_text,
                }),
            })
            .collect::<Result<_>>()?;
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    pub fn acoustic_to_ids(&self, indices: &[usize]) -> Result<Vec<usize>> {
        indices
            .iter()
            .map(|&i| {
                if i < self.k_acoustic {
                    Ok(self.acoustic_base() + i)
                } else {
                    Err(Error::OutOfRange {
                        what: "acoustic index",
                        index: i,
                        limit: self.k_acoustic,
                    })
                }
            })
            .collect()
    }

    pub fn ids_to_acoustic(&self, ids: &[usize]) -> Result<Vec<usize>> {
        ids.iter()
            .map(|&id| match self.classify(id) {
                Ok(TokenClass::Acoustic(i)) => Ok(i),
                _ => Err(Error::OutOfRange {
                    what: "acoustic id",
                    index: id,
                    limit: self.size(),
                }),
            })
            .collect()
    }

    /// `open ++ payload ++ close`. Audio payloads must be acoustic ids; video
    /// payloads are embeddings and never travel as ids.
    pub fn wrap_sequence(&self, modality: Modality, payload: &[usize]) -> Result<Vec<usize>> {
        match modality {
            Modality::Audio => {
                if let Some(&bad) = payload.iter().find(|&&i| !self.is_acoustic(i)) {
                    return Err(Error::invalid(format!("id {bad} is not an acoustic token")));
                }
            }
            Modality::Video => {
                return Err(Error::invalid("video payloads are embeddings; wrap them as prefix positions"));
            }
        }
        let (open, close) = modality.tags();
        let mut out = Vec::with_capacity(payload.len() + 2);
        out.push(self.special(open));
        out.extend_from_slice(payload);
        out.push(self.special(close));
        Ok(out)
    }

    /// Strips the modality tags added by [`wrap_sequence`].
    pub fn unwrap_sequence(&self, modality: Modality, ids: &[usize]) -> Result<Vec<usize>> {
        let (open, close) = modality.tags();
        match ids {
            [first, body @ .., last] if *first == self.special(open) && *last == self.special(close) => Ok(body.to_vec()),
            _ => Err(Error::invalid(format!("sequence is not wrapped in {modality} tags"))),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let v: Self = serde_json::from_str(s)?;
        let expected: Vec<&str> = Special::ALL.iter().map(|s| s.name()).collect();
        if v.specials != expected || v.n_text != 256 {
            return Err(Error::Format("vocabulary manifest does not match the byte/special layout".into()));
        }
        Ok(v)
    }
}
