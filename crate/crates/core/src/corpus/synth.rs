//! Deterministic synthetic data for every modality.
//!
//! A [`Styles`] value fixes everything that should be shared between the
//! training and the held-out files of a fixture set (word list, motif
//! library, SQL schema); individual files then draw from their own RNG.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::formats::{write_fasta, write_pnm, write_wav, FastaRecord, ForceGrid};
use crate::tokenizer::PixelGrid;

const CONSONANTS: &[&str] = &["b", "c", "d", "f", "g", "h", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "th", "st"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ea", "ou", "y"];

/// Shared vocabularies of one fixture set.
pub struct Styles {
    words: Vec<String>,
    successors: Vec<[usize; 6]>,
    zipf: Vec<f64>,
    motifs: Vec<Vec<u8>>,
}

impl Styles {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_57e1);
        let mut words = Vec::new();
        let mut seen = std::collections::HashSet::new();
        while words.len() < 1500 {
            let syl = [1, 1, 2, 2, 2, 3][rng.gen_range(0..6)];
            let mut w = String::new();
            for _ in 0..syl {
                w.push_str(CONSONANTS.choose(&mut rng).unwrap());
                w.push_str(VOWELS.choose(&mut rng).unwrap());
            }
            if rng.gen_bool(0.4) {
                w.push_str(["n", "s", "r", "t", "ng", "ck"].choose(&mut rng).unwrap());
            }
            if seen.insert(w.clone()) {
                words.push(w);
            }
        }
        for (i, w) in ["the", "of", "and", "to", "in", "is", "was", "for", "that", "with"].iter().enumerate() {
            words[i] = w.to_string();
        }
        let n = words.len();
        let successors = (0..n).map(|_| std::array::from_fn(|_| rng.gen_range(0..n))).collect();
        let mut acc = 0.0;
        let zipf = (0..n)
            .map(|r| {
                acc += 1.0 / (r as f64 + 2.7);
                acc
            })
            .collect();
        let motifs = (0..24)
            .map(|_| (0..rng.gen_range(6..25)).map(|_| *b"ACGT".choose(&mut rng).unwrap()).collect())
            .collect();
        Self { words, successors, zipf, motifs }
    }

    fn zipf_word(&self, rng: &mut ChaCha8Rng) -> usize {
        let u = rng.gen::<f64>() * self.zipf.last().unwrap();
        self.zipf.partition_point(|&c| c < u).min(self.words.len() - 1)
    }

    /// Prose from a sparse word-bigram chain.
    pub fn text(&self, rng: &mut ChaCha8Rng, len: usize) -> Vec<u8> {
        let mut out = Vec::with_capacity(len + 64);
        let mut w = self.zipf_word(rng);
        while out.len() < len {
            let sentences = rng.gen_range(2..7);
            for _ in 0..sentences {
                let n = rng.gen_range(5..18);
                for i in 0..n {
                    w = if rng.gen_bool(0.55) { self.successors[w][rng.gen_range(0..6)] } else { self.zipf_word(rng) };
                    let word = &self.words[w];
                    if i == 0 {
                        let mut c = word.chars();
                        let first = c.next().unwrap().to_ascii_uppercase();
                        out.push(first as u8);
                        out.extend_from_slice(c.as_str().as_bytes());
                    } else if rng.gen_bool(0.02) {
                        out.extend_from_slice(rng.gen_range(1800..2024).to_string().as_bytes());
                    } else {
                        out.extend_from_slice(word.as_bytes());
                    }
                    if i + 1 < n {
                        out.extend_from_slice(if rng.gen_bool(0.07) { b", " } else { b" " });
                    }
                }
                out.extend_from_slice(if rng.gen_bool(0.06) { b"? " } else { b". " });
            }
            out.pop();
            out.push(b'\n');
        }
        out.truncate(len);
        out
    }

    /// FASTA records built from a shared motif library, tandem repeats and
    /// GC-biased background.
    pub fn fasta(&self, rng: &mut ChaCha8Rng, len: usize) -> Vec<u8> {
        let mut records = Vec::new();
        let mut total = 0;
        let mut start = rng.gen_range(1..1_000_000u64);
        while total < len {
            let n = rng.gen_range(2_000..20_000).min(len - total + 64);
            let mut bases = Vec::with_capacity(n + 32);
            while bases.len() < n {
                let r: f64 = rng.gen();
                if r < 0.25 {
                    let m = self.motifs.choose(rng).unwrap();
                    let at = bases.len();
                    bases.extend_from_slice(m);
                    if rng.gen_bool(0.3) {
                        let i = at + rng.gen_range(0..m.len());
                        bases[i] = *b"ACGT".choose(rng).unwrap();
                    }
                } else if r < 0.3 {
                    let unit: Vec<u8> = (0..rng.gen_range(2..7)).map(|_| *b"ACGT".choose(rng).unwrap()).collect();
                    for _ in 0..rng.gen_range(3..11) {
                        bases.extend_from_slice(&unit);
                    }
                } else {
                    let gc = rng.gen_bool(0.42);
                    let b = match (gc, rng.gen_bool(0.5)) {
                        (true, true) => b'G',
                        (true, false) => b'C',
                        (false, true) => b'A',
                        (false, false) => b'T',
                    };
                    bases.push(b);
                }
            }
            bases.truncate(n);
            let end = start + n as u64;
            records.push(FastaRecord { description: format!("chr{}:{start}-{end} synthetic", rng.gen_range(1..23)), bases });
            start = end + rng.gen_range(100..10_000);
            total += n + n / 60 + 40;
        }
        let mut out = write_fasta(&records, 60);
        out.truncate(len.max(1));
        if out.last() != Some(&b'\n') {
            out.push(b'\n');
        }
        out
    }

    /// A query log with timestamps.
    pub fn sql_log(&self, rng: &mut ChaCha8Rng, len: usize) -> Vec<u8> {
        const TABLES: &[(&str, &[&str])] = &[
            ("users", &["id", "name", "email", "age", "city", "created_at"]),
            ("orders", &["id", "user_id", "product_id", "quantity", "total", "status"]),
            ("products", &["id", "title", "price", "category", "stock"]),
            ("events", &["id", "user_id", "kind", "payload", "ts"]),
            ("sessions", &["id", "user_id", "ip", "started", "ended"]),
        ];
        const CITIES: &[&str] = &["Paris", "Berlin", "Lagos", "Lima", "Osaka", "Austin", "Oslo", "Pune"];
        const STATUS: &[&str] = &["new", "paid", "shipped", "cancelled"];
        let mut out = Vec::with_capacity(len + 256);
        let mut t = rng.gen_range(0..86_400u64);
        let day = rng.gen_range(1..28);
        while out.len() < len {
            t += rng.gen_range(0..4);
            let (table, cols) = TABLES.choose(rng).unwrap();
            let c = |rng: &mut ChaCha8Rng| *cols.choose(rng).unwrap();
            let value = |rng: &mut ChaCha8Rng| match rng.gen_range(0..4) {
                0 => format!("'{}'", CITIES.choose(rng).unwrap()),
                1 => format!("'{}'", STATUS.choose(rng).unwrap()),
                _ => rng.gen_range(0..5000).to_string(),
            };
            let q = match rng.gen_range(0..10) {
                0..=3 => {
                    let (a, b) = (c(rng), c(rng));
                    let mut q = format!("SELECT {a}, {b} FROM {table} WHERE {} = {}", c(rng), value(rng));
                    if rng.gen_bool(0.4) {
                        q += &format!(" AND {} > {}", c(rng), rng.gen_range(0..100));
                    }
                    if rng.gen_bool(0.2) {
                        q += &format!(" OR {} = {}", c(rng), value(rng));
                    }
                    if rng.gen_bool(0.3) {
                        q += &format!(" ORDER BY {a} LIMIT {}", [10, 20, 50, 100].choose(rng).unwrap());
                    }
                    q
                }
                4 => format!("select count(*) from {table} where {} = {}", c(rng), value(rng)),
                5 | 6 => {
                    let (a, b) = (c(rng), c(rng));
                    format!("INSERT INTO {table} ({a}, {b}) VALUES ({}, {})", value(rng), value(rng))
                }
                7 => format!("UPDATE {table} SET {} = {} WHERE id = {}", c(rng), value(rng), rng.gen_range(1..100_000)),
                8 => format!("DELETE FROM {table} WHERE id = {}", rng.gen_range(1..100_000)),
                _ => format!("Select * From {table} Where {} = {}", c(rng), value(rng)),
            };
            out.extend_from_slice(
                format!(
                    "2023-06-{day:02} {:02}:{:02}:{:02}.{:03} [conn {}] {q};\n",
                    (t / 3600) % 24,
                    (t / 60) % 60,
                    t % 60,
                    rng.gen_range(0..1000),
                    rng.gen_range(1..40)
                )
                .as_bytes(),
            );
        }
        out.truncate(len);
        out
    }
}

/// Small centred noise from the sum of two uniforms (triangular).
fn noise(rng: &mut ChaCha8Rng, amp: f64) -> f64 {
    (rng.gen::<f64>() + rng.gen::<f64>() - 1.0) * amp
}

/// Gradient background, flat and shaded shapes, and mild sensor noise.
pub fn rgb_image(rng: &mut ChaCha8Rng, width: usize, height: usize) -> PixelGrid {
    let mut base = [[0.0; 3]; 3];
    for c in &mut base {
        *c = [rng.gen_range(70.0..170.0), rng.gen_range(-35.0..35.0), rng.gen_range(-35.0..35.0)];
    }
    let mut img: Vec<[f64; 3]> = (0..width * height)
        .map(|i| {
            let (x, y) = ((i % width) as f64 / width as f64, (i / width) as f64 / height as f64);
            std::array::from_fn(|c| base[c][0] + base[c][1] * x + base[c][2] * y)
        })
        .collect();
    for _ in 0..rng.gen_range(4..11) {
        let color: [f64; 3] = std::array::from_fn(|_| rng.gen_range(10.0..245.0));
        let shade = rng.gen_range(-0.4..0.4);
        let (cx, cy) = (rng.gen_range(0..width) as f64, rng.gen_range(0..height) as f64);
        let (rx, ry) = (rng.gen_range(4..width / 3 + 6) as f64, rng.gen_range(4..height / 3 + 6) as f64);
        let round = rng.gen_bool(0.5);
        for y in 0..height {
            for x in 0..width {
                let (dx, dy) = ((x as f64 - cx) / rx, (y as f64 - cy) / ry);
                let inside = if round { dx * dx + dy * dy <= 1.0 } else { dx.abs() <= 1.0 && dy.abs() <= 1.0 };
                if inside {
                    let px = &mut img[y * width + x];
                    for c in 0..3 {
                        px[c] = color[c] + shade * (x as f64 - cx);
                    }
                }
            }
        }
    }
    let data = img
        .iter()
        .flat_map(|px| {
            let shared = noise(rng, 3.0);
            let v: Vec<u8> = px.iter().map(|&v| (v + shared + noise(rng, 1.5)).round().clamp(0.0, 255.0) as u8).collect();
            v
        })
        .collect();
    PixelGrid::new(width, height, 3, data).unwrap()
}

/// A cross-sectional "scan": dark field, a body ellipse with low-frequency
/// texture and brighter inner structures.
pub fn gray_scan(rng: &mut ChaCha8Rng, width: usize, height: usize) -> PixelGrid {
    let (w, h) = (width as f64, height as f64);
    let (cx, cy) = (w * rng.gen_range(0.45..0.55), h * rng.gen_range(0.45..0.55));
    let (rx, ry) = (w * rng.gen_range(0.32..0.45), h * rng.gen_range(0.32..0.45));
    let organs: Vec<(f64, f64, f64, f64, f64)> = (0..rng.gen_range(2..6))
        .map(|_| {
            (
                cx + rng.gen_range(-0.5..0.5) * rx,
                cy + rng.gen_range(-0.5..0.5) * ry,
                rx * rng.gen_range(0.1..0.35),
                ry * rng.gen_range(0.1..0.35),
                rng.gen_range(130.0..220.0),
            )
        })
        .collect();
    let (fx, fy) = (rng.gen_range(0.02..0.08), rng.gen_range(0.02..0.08));
    let mut data = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let (xf, yf) = (x as f64, y as f64);
            let d = ((xf - cx) / rx).powi(2) + ((yf - cy) / ry).powi(2);
            let mut v = if d <= 1.0 { 90.0 + 18.0 * (fx * xf).sin() * (fy * yf).cos() } else { 8.0 };
            if (0.92..=1.0).contains(&d) {
                v = 235.0;
            }
            for &(ox, oy, orx, ory, val) in &organs {
                if ((xf - ox) / orx).powi(2) + ((yf - oy) / ory).powi(2) <= 1.0 {
                    v = val;
                }
            }
            data.push((v + noise(rng, 5.0)).round().clamp(0.0, 255.0) as u8);
        }
    }
    PixelGrid::new(width, height, 1, data).unwrap()
}

/// Contact patches: normal force bumps with tangential shear around them.
pub fn force_grid(rng: &mut ChaCha8Rng, width: usize, height: usize) -> ForceGrid {
    let contacts: Vec<(f64, f64, f64, f64, f64, f64)> = (0..rng.gen_range(1..5))
        .map(|_| {
            (
                rng.gen_range(0.0..width as f64),
                rng.gen_range(0.0..height as f64),
                rng.gen_range(4.0..20.0),
                rng.gen_range(0.5..3.0),
                rng.gen_range(-0.4..0.4),
                rng.gen_range(-0.4..0.4),
            )
        })
        .collect();
    let mut forces = Vec::with_capacity(width * height * 3);
    for y in 0..height {
        for x in 0..width {
            let mut f = [0.0f64; 3];
            for &(cx, cy, s, a, sx, sy) in &contacts {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let g = a * (-(dx * dx + dy * dy) / (2.0 * s * s)).exp();
                f[0] += sx * g + 0.02 * g * dx / s;
                f[1] += sy * g + 0.02 * g * dy / s;
                f[2] += g;
            }
            for v in f {
                forces.push((v + noise(rng, 0.01)) as f32);
            }
        }
    }
    ForceGrid::quantize(width, height, &forces).unwrap()
}

/// 16 kHz mono 16-bit speech-like signal: voiced segments with drifting
/// pitch and decaying harmonics, noisy fricatives and pauses.
pub fn speech(rng: &mut ChaCha8Rng, samples: usize) -> Vec<i16> {
    const RATE: f64 = 16_000.0;
    let mut out = Vec::with_capacity(samples);
    let mut phase = 0.0f64;
    let mut lp = 0.0f64;
    while out.len() < samples {
        let seg = (RATE * rng.gen_range(0.08..0.3)) as usize;
        let kind = rng.gen_range(0..10);
        let f0 = rng.gen_range(90.0..220.0);
        let drift = rng.gen_range(-40.0..40.0);
        let amp = rng.gen_range(2000.0..9000.0);
        let bright = rng.gen_range(0.8..1.6);
        let fric = rng.gen_range(300.0..1500.0);
        for i in 0..seg {
            if out.len() == samples {
                break;
            }
            let u = i as f64 / seg as f64;
            let env = (PI * u).sin().powf(0.6);
            let v = match kind {
                0..=5 => {
                    let f = f0 + drift * u;
                    phase = (phase + 2.0 * PI * f / RATE) % (2.0 * PI);
                    let s: f64 = (1..=10).map(|h| (h as f64 * phase).sin() / (h as f64).powf(bright)).sum();
                    amp * env * s * 0.6
                }
                6 | 7 => {
                    lp = 0.6 * lp + 0.4 * noise(rng, 1.0);
                    fric * env * lp * 2.0
                }
                _ => 0.0,
            };
            out.push((v + noise(rng, 12.0)).round().clamp(-32768.0, 32767.0) as i16);
        }
    }
    out
}

pub fn ppm_file(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Vec<u8> {
    write_pnm(&rgb_image(rng, w, h))
}

pub fn pgm_file(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Vec<u8> {
    write_pnm(&gray_scan(rng, w, h))
}

pub fn tfg_file(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Vec<u8> {
    force_grid(rng, w, h).to_bytes()
}

pub fn wav_file(rng: &mut ChaCha8Rng, samples: usize) -> Vec<u8> {
    write_wav(16_000, 1, &speech(rng, samples))
}

/// Static order-0 entropy in bits per byte.
pub fn order0_entropy(bytes: &[u8]) -> f64 {
    if bytes.is_empty() {
        return 0.0;
    }
    let mut counts = [0u64; 256];
    for &b in bytes {
        counts[b as usize] += 1;
    }
    let n = bytes.len() as f64;
    counts.iter().filter(|&&c| c > 0).map(|&c| -(c as f64 / n) * (c as f64 / n).log2()).sum()
}
