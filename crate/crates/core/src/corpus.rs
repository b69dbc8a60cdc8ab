//! Deterministic synthetic corpus: phoneme sequences with word-boundary
//! silences, integer durations and template-built spectrograms in [0, 1].
//!
//! Binary container (`NARTCORP`, version 1), little-endian:
//!
//! ```text
//! magic [8] | version u8 | bins u32 | frame_rate f64 | count u32
//! per utterance:
//!   speaker u32 | tokens u32 | tokens x (phoneme u32, frames u32)
//!   frames u32 | frames*bins x f32
//! ```

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::Cursor;
use crate::model::{Batch, ModelInput, Targets};

pub const CORPUS_MAGIC: &[u8; 8] = b"NARTCORP";
pub const CORPUS_VERSION: u8 = 1;

const PHONEMES: [&str; 24] = [
    "aa", "ae", "ah", "b", "d", "eh", "f", "g", "ih", "iy", "k", "l", "m", "n", "ow", "p", "r", "s", "sh", "t", "uw",
    "v", "w", "z",
];
pub const SILENCE: &str = "sil";
const PUNCTUATION: [&str; 3] = [",", ".", "?"];

/// Ordered symbol list; a symbol's id is its position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Inventory {
    pub symbols: Vec<String>,
}

impl Default for Inventory {
    /// 24 phonemes, silence, then three punctuation marks.
    fn default() -> Self {
        let mut symbols: Vec<String> = PHONEMES.iter().map(|s| s.to_string()).collect();
        symbols.push(SILENCE.to_string());
        symbols.extend(PUNCTUATION.iter().map(|s| s.to_string()));
        Inventory { symbols }
    }
}

impl Inventory {
    /// One symbol per line; blank lines are skipped.
    pub fn from_text(text: &str) -> Result<Self> {
        let symbols: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
        for (i, s) in symbols.iter().enumerate() {
            if symbols[..i].contains(s) {
                return Err(Error::invalid(format!("duplicate symbol '{s}' in inventory")));
            }
        }
        if symbols.is_empty() {
            return Err(Error::invalid("empty phoneme inventory"));
        }
        Ok(Inventory { symbols })
    }

    pub fn to_text(&self) -> String {
        let mut s = self.symbols.join("\n");
        s.push('\n');
        s
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn id(&self, symbol: &str) -> Result<usize> {
        self.symbols
            .iter()
            .position(|s| s == symbol)
            .ok_or_else(|| Error::UnknownSymbol(symbol.to_string()))
    }

    /// Whitespace-separated symbols to ids.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|s| self.id(s)).collect()
    }

    pub fn symbol(&self, id: usize) -> &str {
        &self.symbols[id]
    }

    /// Silence and punctuation: the tokens that may last zero frames.
    pub fn is_pause(&self, id: usize) -> bool {
        let s = self.symbol(id);
        s == SILENCE || PUNCTUATION.contains(&s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub num_speakers: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub min_word_len: usize,
    pub max_word_len: usize,
    pub min_phone_frames: usize,
    pub max_phone_frames: usize,
    pub pause_frames: usize,
    /// Probability that a silence or punctuation token lasts zero frames.
    pub zero_prob: f64,
    /// Uniform +/- frames added to each phoneme duration.
    pub duration_jitter: usize,
    pub frame_rate: f64,
    pub mel_bins: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            num_speakers: 4,
            min_words: 2,
            max_words: 3,
            min_word_len: 1,
            max_word_len: 3,
            min_phone_frames: 2,
            max_phone_frames: 5,
            pause_frames: 2,
            zero_prob: 0.3,
            duration_jitter: 1,
            frame_rate: 80.0,
            mel_bins: 128,
            seed: 7,
        }
    }
}

impl CorpusSpec {
    /// `key = value` lines over the defaults; `#` starts a comment. All
    /// problems are reported together.
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = CorpusSpec::default();
        let mut errs = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                errs.push(format!("line {}: expected 'key = value', got '{line}'", no + 1));
                continue;
            };
            if let Err(e) = spec.set(k.trim(), v.trim()) {
                errs.push(format!("line {}: {e}", no + 1));
            }
        }
        if let Err(Error::Config(more)) = spec.validate() {
            errs.extend(more);
        }
        if errs.is_empty() {
            Ok(spec)
        } else {
            Err(Error::Config(errs))
        }
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn p<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("{key}: cannot parse '{v}'"))
        }
        match key {
            "num_speakers" => self.num_speakers = p(key, value)?,
            "min_words" => self.min_words = p(key, value)?,
            "max_words" => self.max_words = p(key, value)?,
            "min_word_len" => self.min_word_len = p(key, value)?,
            "max_word_len" => self.max_word_len = p(key, value)?,
            "min_phone_frames" => self.min_phone_frames = p(key, value)?,
            "max_phone_frames" => self.max_phone_frames = p(key, value)?,
            "pause_frames" => self.pause_frames = p(key, value)?,
            "zero_prob" => self.zero_prob = p(key, value)?,
            "duration_jitter" => self.duration_jitter = p(key, value)?,
            "frame_rate" => self.frame_rate = p(key, value)?,
            "mel_bins" => self.mel_bins = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        format!(
            "num_speakers = {}\nmin_words = {}\nmax_words = {}\nmin_word_len = {}\nmax_word_len = {}\n\
             min_phone_frames = {}\nmax_phone_frames = {}\npause_frames = {}\nzero_prob = {:?}\n\
             duration_jitter = {}\nframe_rate = {:?}\nmel_bins = {}\nseed = {}\n",
            self.num_speakers,
            self.min_words,
            self.max_words,
            self.min_word_len,
            self.max_word_len,
            self.min_phone_frames,
            self.max_phone_frames,
            self.pause_frames,
            self.zero_prob,
            self.duration_jitter,
            self.frame_rate,
            self.mel_bins,
            self.seed
        )
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.num_speakers == 0 {
            errs.push("num_speakers must be positive".to_string());
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            errs.push(format!("word count range {}..={} is invalid", self.min_words, self.max_words));
        }
        if self.min_word_len == 0 || self.min_word_len > self.max_word_len {
            errs.push(format!("word length range {}..={} is invalid", self.min_word_len, self.max_word_len));
        }
        if self.min_phone_frames == 0 || self.min_phone_frames > self.max_phone_frames {
            errs.push(format!(
                "phone frame range {}..={} is invalid",
                self.min_phone_frames, self.max_phone_frames
            ));
        }
        if !(0.0..=1.0).contains(&self.zero_prob) {
            errs.push(format!("zero_prob must lie in [0, 1], got {}", self.zero_prob));
        }
        if self.mel_bins == 0 || !(self.frame_rate > 0.0) {
            errs.push("mel_bins and frame_rate must be positive".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub tokens: Vec<usize>,
    pub speaker: usize,
    pub durations: Vec<usize>,
    /// frames x bins, row-major.
    pub mel: Vec<f32>,
    pub bins: usize,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.durations.iter().sum()
    }
}

/// Least mean per-bin L1 distance between two symbols' templates for the
/// same speaker; draws are repeated (up to a bound) until it holds.
pub const MIN_TEMPLATE_DISTANCE: f64 = 0.02;
const MAX_TEMPLATE_DRAWS: usize = 200;

/// Mean absolute difference per bin.
pub fn template_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len().max(1) as f64
}

/// The fixed rules that map (tokens, durations, speaker) to frames.
#[derive(Clone, Debug)]
pub struct SyntheticRules {
    /// [symbol][speaker] -> bins values.
    pub templates: Vec<Vec<Vec<f64>>>,
    /// Base frames per phoneme id (pauses use the spec's pause length).
    pub base_frames: Vec<usize>,
    /// Per-speaker duration scale.
    pub speaker_rate: Vec<f64>,
    /// Per-speaker envelope depth.
    pub speaker_envelope: Vec<f64>,
}

impl SyntheticRules {
    pub fn new(spec: &CorpusSpec, inventory: &Inventory) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_7e3a_1a7e_5u64);
        let bins = spec.mel_bins as f64;
        let speakers = spec.num_speakers;
        let shift: Vec<f64> = (0..speakers).map(|_| rng.random_range(-0.06..0.06) * bins).collect();
        let gain: Vec<f64> = (0..speakers).map(|_| rng.random_range(0.75..1.0)).collect();
        let mut templates: Vec<Vec<Vec<f64>>> = Vec::with_capacity(inventory.len());
        for id in 0..inventory.len() {
            let pause = inventory.is_pause(id);
            let mut attempt = 0;
            let per_speaker = loop {
                let bumps: Vec<(f64, f64, f64)> = if pause {
                    vec![(rng.random_range(0.0..1.0) * bins, 0.25 * bins, rng.random_range(0.08..0.2))]
                } else {
                    (0..3)
                        .map(|_| {
                            (
                                rng.random_range(0.05..0.95) * bins,
                                rng.random_range(0.02..0.08) * bins,
                                rng.random_range(0.4..0.9),
                            )
                        })
                        .collect()
                };
                let candidate: Vec<Vec<f64>> = (0..speakers)
                    .map(|s| {
                        (0..spec.mel_bins)
                            .map(|k| {
                                let v: f64 = bumps
                                    .iter()
                                    .map(|&(c, w, a)| {
                                        let z = (k as f64 - c - shift[s]) / w;
                                        a * (-0.5 * z * z).exp()
                                    })
                                    .sum();
                                (0.03 + gain[s] * v).clamp(0.0, 1.0)
                            })
                            .collect()
                    })
                    .collect();
                attempt += 1;
                let distinct = templates.iter().all(|other| {
                    other
                        .iter()
                        .zip(&candidate)
                        .all(|(a, b)| template_distance(a, b) >= MIN_TEMPLATE_DISTANCE)
                });
                if distinct || attempt >= MAX_TEMPLATE_DRAWS {
                    break candidate;
                }
            };
            templates.push(per_speaker);
        }
        let base_frames = (0..inventory.len())
            .map(|_| rng.random_range(spec.min_phone_frames..=spec.max_phone_frames))
            .collect();
        let speaker_rate = (0..speakers).map(|_| rng.random_range(0.8..1.25)).collect();
        let speaker_envelope = (0..speakers).map(|_| rng.random_range(0.1..0.4)).collect();
        SyntheticRules {
            templates,
            base_frames,
            speaker_rate,
            speaker_envelope,
        }
    }

    /// Target frames for a token sequence with given durations. Each token
    /// repeats its template under a speaker envelope; the first two frames
    /// of a token fade in linearly from the previous token's template.
    pub fn render(&self, tokens: &[usize], durations: &[usize], speaker: usize, bins: usize) -> Vec<f32> {
        let depth = self.speaker_envelope[speaker];
        let mut out = Vec::with_capacity(durations.iter().sum::<usize>() * bins);
        let mut prev: Option<&[f64]> = None;
        for (&tok, &f) in tokens.iter().zip(durations) {
            if f == 0 {
                continue;
            }
            let cur = &self.templates[tok][speaker];
            for j in 0..f {
                let env = 1.0 - depth + depth * (std::f64::consts::PI * (j as f64 + 0.5) / f as f64).sin();
                let fade = if j < 2 { (j + 1) as f64 / 3.0 } else { 1.0 };
                for k in 0..bins {
                    let base = match prev {
                        Some(p) if j < 2 => fade * cur[k] + (1.0 - fade) * p[k],
                        _ => cur[k],
                    };
                    out.push((base * env).clamp(0.0, 1.0) as f32);
                }
            }
            prev = Some(cur);
        }
        out
    }
}

/// `count` utterances; identical for identical specs.
pub fn generate(spec: &CorpusSpec, inventory: &Inventory, count: usize) -> Result<Vec<Utterance>> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::invalid("utterance count must be at least 1"));
    }
    let phonemes: Vec<usize> = (0..inventory.len()).filter(|&i| !inventory.is_pause(i)).collect();
    let sil = inventory.id(SILENCE)?;
    let puncts: Vec<usize> = (0..inventory.len()).filter(|&i| inventory.is_pause(i) && i != sil).collect();
    if phonemes.is_empty() {
        return Err(Error::invalid("inventory has no phonemes"));
    }
    let rules = SyntheticRules::new(spec, inventory);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let speaker = rng.random_range(0..spec.num_speakers);
        let words = rng.random_range(spec.min_words..=spec.max_words);
        let mut tokens = vec![sil];
        for w in 0..words {
            if w > 0 {
                tokens.push(sil);
            }
            let len = rng.random_range(spec.min_word_len..=spec.max_word_len);
            for _ in 0..len {
                tokens.push(phonemes[rng.random_range(0..phonemes.len())]);
            }
        }
        if !puncts.is_empty() {
            tokens.push(puncts[rng.random_range(0..puncts.len())]);
        }
        let rate = rules.speaker_rate[speaker];
        let durations: Vec<usize> = tokens
            .iter()
            .map(|&t| {
                if inventory.is_pause(t) {
                    if rng.random::<f64>() < spec.zero_prob {
                        0
                    } else {
                        ((spec.pause_frames as f64 * rate).round() as usize).max(1)
                    }
                } else {
                    let j = spec.duration_jitter as i64;
                    let jitter = if j > 0 { rng.random_range(-j..=j) } else { 0 };
                    let base = (rules.base_frames[t] as f64 * rate).round() as i64;
                    (base + jitter).max(1) as usize
                }
            })
            .collect();
        let mel = rules.render(&tokens, &durations, speaker, spec.mel_bins);
        out.push(Utterance {
            tokens,
            speaker,
            durations,
            mel,
            bins: spec.mel_bins,
        });
    }
    Ok(out)
}

/// Fraction of pause tokens that last zero frames.
pub fn zero_fraction(utts: &[Utterance], inventory: &Inventory) -> (usize, f64) {
    let mut pauses = 0;
    let mut zeros = 0;
    for u in utts {
        for (&t, &f) in u.tokens.iter().zip(&u.durations) {
            if inventory.is_pause(t) {
                pauses += 1;
                if f == 0 {
                    zeros += 1;
                }
            }
        }
    }
    (pauses, if pauses == 0 { 0.0 } else { zeros as f64 / pauses as f64 })
}

pub fn write_corpus<W: Write>(mut w: W, frame_rate: f64, bins: usize, utts: &[Utterance]) -> Result<()> {
    w.write_all(CORPUS_MAGIC)?;
    w.write_all(&[CORPUS_VERSION])?;
    w.write_all(&(bins as u32).to_le_bytes())?;
    w.write_all(&frame_rate.to_le_bytes())?;
    w.write_all(&(utts.len() as u32).to_le_bytes())?;
    for u in utts {
        if u.bins != bins || u.mel.len() != u.frames() * bins || u.tokens.len() != u.durations.len() {
            return Err(Error::invalid("utterance is inconsistent with the corpus layout"));
        }
        w.write_all(&(u.speaker as u32).to_le_bytes())?;
        w.write_all(&(u.tokens.len() as u32).to_le_bytes())?;
        for (&t, &f) in u.tokens.iter().zip(&u.durations) {
            w.write_all(&(t as u32).to_le_bytes())?;
            w.write_all(&(f as u32).to_le_bytes())?;
        }
        w.write_all(&(u.frames() as u32).to_le_bytes())?;
        for v in &u.mel {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Corpus as read back: frame rate, bins and utterances.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub frame_rate: f64,
    pub bins: usize,
    pub utterances: Vec<Utterance>,
}

pub fn read_corpus<R: Read>(mut r: R) -> Result<Corpus> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut cur = Cursor::new(&buf);
    cur.expect_header(CORPUS_MAGIC, CORPUS_VERSION)?;
    let bins = cur.u32("bin count")? as usize;
    let frame_rate = cur.f64("frame rate")?;
    let count = cur.u32("utterance count")? as usize;
    let mut utterances = Vec::new();
    for i in 0..count {
        let speaker = cur.u32("speaker")? as usize;
        let n = cur.u32("token count")? as usize;
        let mut tokens = Vec::new();
        let mut durations = Vec::new();
        for _ in 0..n {
            tokens.push(cur.u32("phoneme id")? as usize);
            durations.push(cur.u32("duration")? as usize);
        }
        let frames = cur.u32("frame count")? as usize;
        if frames != durations.iter().sum::<usize>() {
            return Err(Error::invalid(format!(
                "utterance {i}: {frames} frames but durations sum to {}",
                durations.iter().sum::<usize>()
            )));
        }
        let raw = cur.bytes(frames * bins * 4, "mel values")?;
        let mel = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        utterances.push(Utterance {
            tokens,
            speaker,
            durations,
            mel,
            bins,
        });
    }
    if !cur.is_empty() {
        return Err(Error::invalid("trailing bytes after the last utterance"));
    }
    Ok(Corpus {
        frame_rate,
        bins,
        utterances,
    })
}

/// One line per utterance: index, speaker, frames, then `symbol:frames`.
pub fn write_corpus_text<W: Write>(mut w: W, inventory: &Inventory, utts: &[Utterance]) -> Result<()> {
    for (i, u) in utts.iter().enumerate() {
        write!(w, "{i}\tspeaker={}\tframes={}\t", u.speaker, u.frames())?;
        let parts: Vec<String> = u
            .tokens
            .iter()
            .zip(&u.durations)
            .map(|(&t, f)| format!("{}:{f}", inventory.symbol(t)))
            .collect();
        writeln!(w, "{}", parts.join(" "))?;
    }
    Ok(())
}

/// Pads utterances into one batch.
pub fn make_batch(utts: &[&Utterance]) -> Result<Batch> {
    let bins = utts.first().map(|u| u.bins).ok_or_else(|| Error::invalid("empty batch"))?;
    let tokens: Vec<Vec<usize>> = utts.iter().map(|u| u.tokens.clone()).collect();
    let speakers: Vec<usize> = utts.iter().map(|u| u.speaker).collect();
    let frames: Vec<Vec<usize>> = utts.iter().map(|u| u.durations.clone()).collect();
    let mels: Vec<&[f32]> = utts.iter().map(|u| u.mel.as_slice()).collect();
    Ok(Batch {
        input: ModelInput::new(&tokens, &speakers)?,
        targets: Targets::new(&frames, &mels, bins)?,
    })
}
