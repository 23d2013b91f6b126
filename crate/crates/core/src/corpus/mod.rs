//! Ingestion and fixtures.
//!
//! [`ingest`] turns a file into what the tokenizer models plus a verbatim
//! prelude, and [`reassemble`] inverts it byte for byte. Files that do not
//! parse as their modality's format fall back to plain bytes, so every
//! input is accepted.

pub mod formats;
pub mod synth;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tokenizer::{Modality, PixelGrid, RawData};
use crate::{Error, Result};
use formats::{parse_pnm, parse_tfg, parse_wav, Split};

/// A file tagged with its modality.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub modality: Modality,
    pub path: PathBuf,
    pub bytes: Vec<u8>,
}

impl Sample {
    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Body {
    Bytes(Vec<u8>),
    Image(PixelGrid),
}

impl Body {
    pub fn as_raw(&self) -> RawData<'_> {
        match self {
            Body::Bytes(b) => RawData::Bytes(b),
            Body::Image(g) => RawData::Image(g),
        }
    }
}

/// The modelled part of a file and everything needed to rebuild it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ingested {
    pub body: Body,
    /// `header_len u32 | header | trailing` for structured files, empty
    /// otherwise.
    pub prelude: Vec<u8>,
    /// The file did not parse and is modelled as plain bytes.
    pub raw: bool,
}

fn structured(bytes: &[u8], split: &Split, body: Body) -> Ingested {
    let mut prelude = Vec::with_capacity(4 + split.header + bytes.len() - split.end);
    prelude.extend_from_slice(&(split.header as u32).to_le_bytes());
    prelude.extend_from_slice(&bytes[..split.header]);
    prelude.extend_from_slice(&bytes[split.end..]);
    Ingested { body, prelude, raw: false }
}

pub fn ingest(bytes: &[u8], modality: Modality) -> Ingested {
    let parsed = match modality {
        Modality::Image => parse_pnm(bytes).ok().map(|(g, s)| structured(bytes, &s, Body::Image(g))),
        Modality::Medical => {
            parse_pnm(bytes).ok().filter(|(g, _)| g.channels == 1).map(|(g, s)| structured(bytes, &s, Body::Image(g)))
        }
        Modality::Tactile => parse_tfg(bytes).ok().map(|(f, s)| structured(bytes, &s, Body::Image(f.grid))),
        Modality::Speech => {
            parse_wav(bytes).ok().map(|s| structured(bytes, &s, Body::Bytes(bytes[s.header..s.end].to_vec())))
        }
        _ => return Ingested { body: Body::Bytes(bytes.to_vec()), prelude: Vec::new(), raw: false },
    };
    parsed.unwrap_or_else(|| Ingested { body: Body::Bytes(bytes.to_vec()), prelude: Vec::new(), raw: true })
}

/// Header and trailing bytes of a structured prelude.
pub fn split_prelude(prelude: &[u8]) -> Result<(&[u8], &[u8])> {
    let len = prelude.get(..4).ok_or_else(|| Error::Corruption("prelude too short".into()))?;
    let len = u32::from_le_bytes(len.try_into().unwrap()) as usize;
    let rest = &prelude[4..];
    if len > rest.len() {
        return Err(Error::Corruption("prelude header length out of range".into()));
    }
    Ok(rest.split_at(len))
}

/// Inverse of [`ingest`].
pub fn reassemble(modality: Modality, ingested: &Ingested) -> Result<Vec<u8>> {
    let payload: &[u8] = match &ingested.body {
        Body::Bytes(b) => b,
        Body::Image(g) => &g.data,
    };
    if ingested.raw || !(modality.is_image_like() || modality == Modality::Speech) {
        return Ok(payload.to_vec());
    }
    let (header, trailing) = split_prelude(&ingested.prelude)?;
    Ok([header, payload, trailing].concat())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Train,
    Test,
    /// Degenerate inputs: empty and single-byte files.
    Edge,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Train => "train",
            Role::Test => "test",
            Role::Edge => "edge",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Role::Train),
            "test" => Ok(Role::Test),
            "edge" => Ok(Role::Edge),
            _ => Err(Error::Input(format!("unknown fixture role `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Relative to the fixture root.
    pub path: PathBuf,
    pub modality: Modality,
    pub bytes: u64,
    pub crc32: u32,
    pub role: Role,
}

pub const MANIFEST: &str = "manifest.tsv";

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("path\tmodality\tbytes\tcrc32\trole\n");
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{:08x}\t{}",
                e.path.display(),
                e.modality,
                e.bytes,
                e.crc32,
                e.role.name()
            );
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            let bad = || Error::Input(format!("manifest line {}: `{line}`", i + 1));
            if f.len() != 5 {
                return Err(bad());
            }
            entries.push(ManifestEntry {
                path: PathBuf::from(f[0]),
                modality: Modality::from_name(f[1])?,
                bytes: f[2].parse().map_err(|_| bad())?,
                crc32: u32::from_str_radix(f[3], 16).map_err(|_| bad())?,
                role: Role::from_name(f[4])?,
            });
        }
        Ok(Self { entries })
    }

    pub fn load(root: &Path) -> Result<Self> {
        Self::from_tsv(&std::fs::read_to_string(root.join(MANIFEST))?)
    }

    /// Reads the listed files, checking length and CRC.
    pub fn samples(&self, root: &Path, role: Option<Role>) -> Result<Vec<Sample>> {
        let mut out = Vec::new();
        for e in self.entries.iter().filter(|e| role.is_none_or(|r| r == e.role)) {
            let path = root.join(&e.path);
            let bytes = std::fs::read(&path)?;
            if bytes.len() as u64 != e.bytes || crc32fast::hash(&bytes) != e.crc32 {
                return Err(Error::Verification(format!("{} does not match the manifest", path.display())));
            }
            out.push(Sample { modality: e.modality, path, bytes });
        }
        Ok(out)
    }
}

/// How much data [`make_fixtures`] writes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FixtureProfile {
    /// About 2 MiB of training data and a held-out file or two per
    /// modality.
    Desk,
    /// A few KiB per modality, enough to exercise every code path.
    Smoke,
}

struct Plan {
    train_bytes: usize,
    test_bytes: usize,
    image: (usize, usize),
    test_image: (usize, usize),
    scan: (usize, usize),
    grid: (usize, usize),
    speech_samples: usize,
}

impl FixtureProfile {
    fn plan(self) -> Plan {
        match self {
            FixtureProfile::Desk => Plan {
                train_bytes: 2 << 20,
                test_bytes: 96 << 10,
                image: (256, 256),
                test_image: (210, 158),
                scan: (256, 256),
                grid: (128, 128),
                speech_samples: 80_000,
            },
            FixtureProfile::Smoke => Plan {
                train_bytes: 12 << 10,
                test_bytes: 3 << 10,
                image: (40, 36),
                test_image: (23, 17),
                scan: (48, 40),
                grid: (24, 20),
                speech_samples: 3_000,
            },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FixtureProfile::Desk => "desk",
            FixtureProfile::Smoke => "smoke",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(FixtureProfile::Desk),
            "smoke" => Ok(FixtureProfile::Smoke),
            _ => Err(Error::Input(format!("unknown fixture profile `{s}`"))),
        }
    }
}

fn extension(m: Modality) -> &'static str {
    match m {
        Modality::Image => "ppm",
        Modality::Medical => "pgm",
        Modality::Tactile => "tfg",
        Modality::Text => "txt",
        Modality::Gene => "fa",
        Modality::Database => "sql",
        Modality::Speech => "wav",
    }
}

/// Generates one file of `m` with about `budget` bytes.
fn synth_file(m: Modality, styles: &synth::Styles, plan: &Plan, test: bool, rng: &mut ChaCha8Rng, budget: usize) -> Vec<u8> {
    match m {
        Modality::Image => {
            let (w, h) = if test { plan.test_image } else { plan.image };
            synth::ppm_file(rng, w, h)
        }
        Modality::Medical => synth::pgm_file(rng, plan.scan.0, plan.scan.1),
        Modality::Tactile => synth::tfg_file(rng, plan.grid.0, plan.grid.1),
        Modality::Speech => synth::wav_file(rng, plan.speech_samples.min(budget / 2)),
        Modality::Text => styles.text(rng, budget),
        Modality::Gene => styles.fasta(rng, budget),
        Modality::Database => styles.sql_log(rng, budget),
    }
}

/// Writes a deterministic fixture tree under `root`:
/// `<modality>/{train,test,edge}-NN.<ext>` plus `manifest.tsv`.
///
/// `text`, when given, replaces the synthetic prose: its head feeds the
/// training files and the following bytes the held-out file.
pub fn make_fixtures(root: &Path, profile: FixtureProfile, seed: u64, text: Option<&[u8]>) -> Result<Manifest> {
    let plan = profile.plan();
    let styles = synth::Styles::new(seed);
    let mut manifest = Manifest::default();
    for m in Modality::ALL {
        let dir = root.join(m.name());
        std::fs::create_dir_all(&dir)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(m.tag() as u64 + 1));
        let mut files: Vec<(Role, Vec<u8>)> = vec![(Role::Edge, Vec::new()), (Role::Edge, vec![m.prefix() as u8 ^ 0x5a])];
        let chunk = 512 << 10;
        match (m, text) {
            (Modality::Text, Some(t)) => {
                let train = &t[..plan.train_bytes.min(t.len())];
                for piece in train.chunks(chunk) {
                    files.push((Role::Train, piece.to_vec()));
                }
                let rest = &t[train.len()..];
                files.push((Role::Test, rest[..plan.test_bytes.min(rest.len())].to_vec()));
            }
            _ => {
                let mut written = 0;
                while written < plan.train_bytes {
                    let f = synth_file(m, &styles, &plan, false, &mut rng, chunk.min(plan.train_bytes - written));
                    written += f.len();
                    files.push((Role::Train, f));
                }
                let mut written = 0;
                while written < plan.test_bytes {
                    let f = synth_file(m, &styles, &plan, true, &mut rng, plan.test_bytes - written);
                    written += f.len();
                    files.push((Role::Test, f));
                }
            }
        }
        let mut counters = std::collections::HashMap::new();
        for (role, bytes) in files {
            let n = counters.entry(role).or_insert(0);
            let rel = PathBuf::from(m.name()).join(format!("{}-{:02}.{}", role.name(), n, extension(m)));
            *n += 1;
            std::fs::write(root.join(&rel), &bytes)?;
            manifest.entries.push(ManifestEntry {
                path: rel,
                modality: m,
                bytes: bytes.len() as u64,
                crc32: crc32fast::hash(&bytes),
                role,
            });
        }
    }
    std::fs::write(root.join(MANIFEST), manifest.to_tsv())?;
    Ok(manifest)
}
