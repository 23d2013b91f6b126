//! Byte-level BPE with byte fallback and reserved whole-word symbols.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};

use crate::numerics::checkpoint::Reader;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"OZBP";
pub const VERSION: u16 = 1;

/// Longest pre-token; longer runs are split.
const MAX_WORD: usize = 32;

/// Domain symbols reserved by default: nucleotide bases and SQL keywords
/// in lower, capitalised and upper case.
pub fn default_reserved() -> Vec<Vec<u8>> {
    let mut out: Vec<Vec<u8>> = ["A", "T", "G", "C"].iter().map(|s| s.as_bytes().to_vec()).collect();
    for kw in ["select", "from", "where", "and", "or"] {
        let cap = format!("{}{}", kw[..1].to_uppercase(), &kw[1..]);
        for v in [kw.to_string(), cap, kw.to_uppercase()] {
            if !out.contains(&v.as_bytes().to_vec()) {
                out.push(v.into_bytes());
            }
        }
    }
    out
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Class {
    Letter,
    Digit,
    Space,
    Whitespace,
    Punct,
}

fn class(b: u8) -> Class {
    match b {
        b'a'..=b'z' | b'A'..=b'Z' | 0x80..=0xff => Class::Letter,
        b'0'..=b'9' => Class::Digit,
        b' ' => Class::Space,
        b'\t' | b'\n' | b'\r' | 0x0b | 0x0c => Class::Whitespace,
        _ => Class::Punct,
    }
}

fn is_ws(c: Class) -> bool {
    matches!(c, Class::Space | Class::Whitespace)
}

/// Splits bytes into pre-tokens. The concatenation of the output is always
/// the input. A single space attaches to the following letter, digit or
/// punctuation run; reserved words are kept whole and never take a space.
fn pretokenize<'a>(bytes: &'a [u8], atoms: &HashSet<Vec<u8>>) -> Vec<&'a [u8]> {
    let n = bytes.len();
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        let c = class(bytes[i]);
        if is_ws(c) {
            let mut k = i;
            while k < n && is_ws(class(bytes[k])) {
                k += 1;
            }
            // leave a trailing single space for the next word
            if k < n && bytes[k - 1] == b' ' && k - 1 > i {
                k -= 1;
            } else if k < n && k - 1 == i && c == Class::Space {
                k = i; // lone space: handled below together with its word
            }
            if k > i {
                push_capped(&mut out, &bytes[i..k]);
                i = k;
                continue;
            }
        }
        let lead = usize::from(bytes[i] == b' ');
        let j = i + lead;
        let cls = class(bytes[j]);
        let mut k = j;
        while k < n && class(bytes[k]) == cls {
            k += 1;
        }
        if cls == Class::Letter && atoms.contains(&bytes[j..k]) {
            if lead == 1 {
                out.push(&bytes[i..j]);
            }
            out.push(&bytes[j..k]);
        } else {
            push_capped(&mut out, &bytes[i..k]);
        }
        i = k;
    }
    out
}

fn push_capped<'a>(out: &mut Vec<&'a [u8]>, run: &'a [u8]) {
    for chunk in run.chunks(MAX_WORD) {
        out.push(chunk);
    }
}

/// Trained byte-pair model.
#[derive(Clone, Debug)]
pub struct BpeModel {
    pieces: Vec<Vec<u8>>,
    index: HashMap<Vec<u8>, u32>,
    merges: Vec<(u32, u32, u32)>,
    ranks: HashMap<(u32, u32), (usize, u32)>,
    reserved: Vec<Vec<u8>>,
    atoms: HashSet<Vec<u8>>,
}

impl PartialEq for BpeModel {
    fn eq(&self, other: &Self) -> bool {
        self.pieces == other.pieces && self.merges == other.merges && self.reserved == other.reserved
    }
}

impl BpeModel {
    fn build(pieces: Vec<Vec<u8>>, merges: Vec<(u32, u32, u32)>, reserved: Vec<Vec<u8>>) -> Self {
        let index = pieces.iter().enumerate().map(|(i, p)| (p.clone(), i as u32)).collect();
        let ranks = merges.iter().enumerate().map(|(r, &(a, b, id))| ((a, b), (r, id))).collect();
        let atoms = reserved.iter().filter(|r| r.len() > 1).cloned().collect();
        Self { pieces, index, merges, ranks, reserved, atoms }
    }

    /// Total piece count.
    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn piece(&self, id: u32) -> Option<&[u8]> {
        self.pieces.get(id as usize).map(|p| p.as_slice())
    }

    pub fn id_of(&self, piece: &[u8]) -> Option<u32> {
        self.index.get(piece).copied()
    }

    pub fn merges(&self) -> impl Iterator<Item = (u32, u32, u32)> + '_ {
        self.merges.iter().copied()
    }

    pub fn reserved(&self) -> &[Vec<u8>] {
        &self.reserved
    }

    fn encode_word(&self, word: &[u8]) -> Vec<u32> {
        if self.atoms.contains(word) {
            return vec![self.index[word]];
        }
        let mut syms: Vec<u32> = word.iter().map(|&b| b as u32).collect();
        loop {
            let best = syms
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&(r, id)| (r, w[0], w[1], id)))
                .min_by_key(|&(r, ..)| r);
            let Some((_, a, b, id)) = best else { break };
            let mut merged = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == a && syms[i + 1] == b {
                    merged.push(id);
                    i += 2;
                } else {
                    merged.push(syms[i]);
                    i += 1;
                }
            }
            syms = merged;
        }
        syms
    }

    /// Encodes any byte string; never fails thanks to byte fallback.
    pub fn encode(&self, bytes: &[u8]) -> Vec<u32> {
        let mut cache: HashMap<&[u8], Vec<u32>> = HashMap::new();
        let mut out = Vec::with_capacity(bytes.len() / 2);
        for word in pretokenize(bytes, &self.atoms) {
            let ids = cache.entry(word).or_insert_with(|| self.encode_word(word));
            out.extend_from_slice(ids);
        }
        out
    }

    pub fn decode(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(ids.len() * 3);
        for &id in ids {
            let p = self.piece(id).ok_or_else(|| Error::Corruption(format!("unknown BPE piece {id}")))?;
            out.extend_from_slice(p);
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.pieces.len() as u32).to_le_bytes());
        for (id, p) in self.pieces.iter().enumerate() {
            out.extend_from_slice(&(p.len() as u32).to_le_bytes());
            out.extend_from_slice(p);
            out.extend_from_slice(&(id as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.merges.len() as u32).to_le_bytes());
        for &(a, b, id) in &self.merges {
            for v in [a, b, id] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.reserved.len() as u32).to_le_bytes());
        for r in &self.reserved {
            out.extend_from_slice(&(r.len() as u32).to_le_bytes());
            out.extend_from_slice(r);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::Header("not a BPE model".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Unsupported(format!("BPE model version {version}")));
        }
        let count = r.u32()? as usize;
        let mut pieces = vec![Vec::new(); count.min(1 << 20)];
        if pieces.len() != count {
            return Err(Error::Header("implausible piece count".into()));
        }
        for _ in 0..count {
            let len = r.u32()? as usize;
            let p = r.take(len)?.to_vec();
            let id = r.u32()? as usize;
            if id >= count || p.is_empty() {
                return Err(Error::Header(format!("bad piece record for id {id}")));
            }
            pieces[id] = p;
        }
        if pieces.len() < 256 || (0..256).any(|b| pieces[b] != [b as u8]) {
            return Err(Error::Header("byte fallback pieces missing".into()));
        }
        let mcount = r.u32()? as usize;
        let mut merges = Vec::with_capacity(mcount.min(1 << 20));
        for _ in 0..mcount {
            let (a, b, id) = (r.u32()?, r.u32()?, r.u32()?);
            if [a, b, id].iter().any(|&v| v as usize >= count) {
                return Err(Error::Header("merge references unknown piece".into()));
            }
            merges.push((a, b, id));
        }
        let rcount = r.u32()? as usize;
        let mut reserved = Vec::with_capacity(rcount.min(1024));
        for _ in 0..rcount {
            let len = r.u32()? as usize;
            reserved.push(r.take(len)?.to_vec());
        }
        if r.remaining() != 0 {
            return Err(Error::Header("trailing bytes after BPE model".into()));
        }
        Ok(Self::build(pieces, merges, reserved))
    }
}

fn cmp_pair(pieces: &[Vec<u8>], x: (u32, u32), y: (u32, u32)) -> Ordering {
    (&pieces[x.0 as usize], &pieces[x.1 as usize]).cmp(&(&pieces[y.0 as usize], &pieces[y.1 as usize]))
}

/// Greedy pair-frequency training.
///
/// The model always holds exactly `target_size` pieces: the 256 byte
/// pieces, every reserved symbol, then merges in order of pair frequency
/// (ties go to the lexicographically smaller pair). If the corpus runs out
/// of pairs the remaining slots are filled with unused byte-pair merges.
pub fn train_bpe(corpus: &[&[u8]], target_size: usize, reserved: &[Vec<u8>]) -> Result<BpeModel> {
    if target_size < 256 + reserved.len() {
        return Err(Error::Config(format!(
            "BPE size {target_size} cannot hold 256 byte pieces and {} reserved symbols",
            reserved.len()
        )));
    }
    let mut pieces: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
    let mut index: HashMap<Vec<u8>, u32> = pieces.iter().enumerate().map(|(i, p)| (p.clone(), i as u32)).collect();
    let mut reserved_kept = Vec::new();
    for r in reserved {
        if r.is_empty() || reserved_kept.contains(r) {
            continue;
        }
        reserved_kept.push(r.clone());
        if !index.contains_key(r) {
            index.insert(r.clone(), pieces.len() as u32);
            pieces.push(r.clone());
        }
    }
    let atoms: HashSet<Vec<u8>> = reserved_kept.iter().filter(|r| r.len() > 1).cloned().collect();

    let mut word_counts: HashMap<&[u8], u64> = HashMap::new();
    for doc in corpus {
        for w in pretokenize(doc, &atoms) {
            if !atoms.contains(w) {
                *word_counts.entry(w).or_insert(0) += 1;
            }
        }
    }
    let mut sorted: Vec<(&[u8], u64)> = word_counts.into_iter().collect();
    sorted.sort();
    let mut words: Vec<(Vec<u32>, u64)> =
        sorted.into_iter().map(|(w, c)| (w.iter().map(|&b| b as u32).collect(), c)).collect();

    let mut pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
    let mut pair_where: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
    for (wi, (syms, c)) in words.iter().enumerate() {
        for p in syms.windows(2) {
            *pair_counts.entry((p[0], p[1])).or_insert(0) += c;
            pair_where.entry((p[0], p[1])).or_default().insert(wi);
        }
    }

    let mut merges: Vec<(u32, u32, u32)> = Vec::new();
    let mut merged_pairs: HashSet<(u32, u32)> = HashSet::new();
    while pieces.len() < target_size {
        let mut best: Option<((u32, u32), u64)> = None;
        for (&pair, &count) in &pair_counts {
            if count == 0 {
                continue;
            }
            best = match best {
                None => Some((pair, count)),
                Some((bp, bc)) => {
                    if count > bc || (count == bc && cmp_pair(&pieces, pair, bp) == Ordering::Less) {
                        Some((pair, count))
                    } else {
                        Some((bp, bc))
                    }
                }
            };
        }
        let Some(((a, b), _)) = best else {
            fill_unused(&mut pieces, &mut index, &mut merges, &merged_pairs, target_size);
            break;
        };
        let mut joined = pieces[a as usize].clone();
        joined.extend_from_slice(&pieces[b as usize]);
        let id = match index.get(&joined) {
            Some(&id) => id,
            None => {
                let id = pieces.len() as u32;
                index.insert(joined.clone(), id);
                pieces.push(joined);
                id
            }
        };
        merges.push((a, b, id));
        merged_pairs.insert((a, b));

        let affected: Vec<usize> = {
            let mut v: Vec<usize> = pair_where.remove(&(a, b)).unwrap_or_default().into_iter().collect();
            v.sort_unstable();
            v
        };
        pair_counts.remove(&(a, b));
        for wi in affected {
            let (syms, c) = &mut words[wi];
            let c = *c;
            for p in syms.windows(2) {
                if let Some(v) = pair_counts.get_mut(&(p[0], p[1])) {
                    *v -= c;
                }
            }
            let mut out = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == a && syms[i + 1] == b {
                    out.push(id);
                    i += 2;
                } else {
                    out.push(syms[i]);
                    i += 1;
                }
            }
            *syms = out;
            for p in syms.windows(2) {
                *pair_counts.entry((p[0], p[1])).or_insert(0) += c;
                pair_where.entry((p[0], p[1])).or_default().insert(wi);
            }
        }
        pair_counts.retain(|_, v| *v > 0);
    }
    Ok(BpeModel::build(pieces, merges, reserved_kept))
}

fn fill_unused(
    pieces: &mut Vec<Vec<u8>>,
    index: &mut HashMap<Vec<u8>, u32>,
    merges: &mut Vec<(u32, u32, u32)>,
    merged: &HashSet<(u32, u32)>,
    target: usize,
) {
    'outer: for a in 0..256u32 {
        for b in 0..256u32 {
            if pieces.len() >= target {
                break 'outer;
            }
            let joined = vec![a as u8, b as u8];
            if index.contains_key(&joined) || merged.contains(&(a, b)) {
                continue;
            }
            let id = pieces.len() as u32;
            index.insert(joined.clone(), id);
            pieces.push(joined);
            merges.push((a, b, id));
        }
    }
}
