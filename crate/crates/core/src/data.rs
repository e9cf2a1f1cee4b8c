//! Byte-level corpora and deterministic synthetic text.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

pub const BOS: usize = 256;
pub const EOS: usize = 257;
pub const PAD: usize = 258;
/// 256 byte values plus BOS, EOS and PAD.
pub const BYTE_VOCAB: usize = 259;

pub fn encode_bytes(bytes: &[u8]) -> Vec<usize> {
    bytes.iter().map(|&b| usize::from(b)).collect()
}

/// Specials are dropped.
pub fn decode_bytes(tokens: &[usize]) -> Vec<u8> {
    tokens.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect()
}

/// A token stream with one contiguous validation block; everything else is
/// training data.
#[derive(Debug, Clone)]
pub struct Corpus {
    tokens: Vec<u16>,
    vocab_size: usize,
    val_start: usize,
    val_end: usize,
}

impl Corpus {
    /// The validation block covers `val_fraction` of the stream and starts at
    /// an offset drawn from `seed`.
    pub fn new(tokens: Vec<usize>, vocab_size: usize, val_fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::Config(format!("validation fraction {val_fraction} not in [0, 1)")));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab_size) {
            return Err(Error::Index(format!("token {bad} outside vocabulary of {vocab_size}")));
        }
        if vocab_size > usize::from(u16::MAX) + 1 {
            return Err(Error::Config("vocabulary too large for the corpus store".into()));
        }
        let n = tokens.len();
        let val_len = (n as f64 * val_fraction).round() as usize;
        let val_start = if val_len == 0 || val_len >= n {
            0
        } else {
            rng::substream(seed, "split").gen_range(0..=n - val_len)
        };
        Ok(Self {
            tokens: tokens.into_iter().map(|t| t as u16).collect(),
            vocab_size,
            val_start,
            val_end: val_start + val_len,
        })
    }

    pub fn from_bytes(bytes: &[u8], val_fraction: f64, seed: u64) -> Result<Self> {
        Self::new(encode_bytes(bytes), BYTE_VOCAB, val_fraction, seed)
    }

    pub fn from_file(path: &Path, val_fraction: f64, seed: u64) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes, val_fraction, seed)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn validation_range(&self) -> std::ops::Range<usize> {
        self.val_start..self.val_end
    }

    pub fn validation(&self) -> Vec<usize> {
        self.slice(self.val_start, self.val_end)
    }

    fn slice(&self, lo: usize, hi: usize) -> Vec<usize> {
        self.tokens[lo..hi].iter().map(|&t| usize::from(t)).collect()
    }

    /// Training segments (before and after the validation block).
    pub fn train_segments(&self) -> Vec<std::ops::Range<usize>> {
        [0..self.val_start, self.val_end..self.tokens.len()]
            .into_iter()
            .filter(|r| !r.is_empty())
            .collect()
    }

    /// `batch` random windows of `seq + 1` training tokens, split into
    /// inputs and next-token targets (each `batch * seq` long).
    pub fn sample_batch<R: Rng + ?Sized>(&self, rng: &mut R, batch: usize, seq: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        let usable: Vec<_> = self.train_segments().into_iter().filter(|r| r.len() > seq).collect();
        let total: usize = usable.iter().map(|r| r.len() - seq).sum();
        if total == 0 {
            return Err(Error::Length(format!("no training segment holds {} tokens", seq + 1)));
        }
        let mut inputs = Vec::with_capacity(batch * seq);
        let mut targets = Vec::with_capacity(batch * seq);
        for _ in 0..batch {
            let mut k = rng.gen_range(0..total);
            let seg = usable
                .iter()
                .find(|r| {
                    let starts = r.len() - seq;
                    if k < starts {
                        true
                    } else {
                        k -= starts;
                        false
                    }
                })
                .expect("k < total");
            let s = seg.start + k;
            inputs.extend(self.tokens[s..s + seq].iter().map(|&t| usize::from(t)));
            targets.extend(self.tokens[s + 1..s + seq + 1].iter().map(|&t| usize::from(t)));
        }
        Ok((inputs, targets))
    }
}

/// Splits `tokens` into consecutive `(inputs, targets)` windows of at most
/// `seq` predictions so every token after the first is predicted once.
pub fn eval_windows(tokens: &[usize], seq: usize) -> Vec<(&[usize], &[usize])> {
    let mut out = Vec::new();
    let mut s = 0;
    while s + 1 < tokens.len() {
        let e = (s + seq).min(tokens.len() - 1);
        out.push((&tokens[s..e], &tokens[s + 1..e + 1]));
        s = e;
    }
    out
}

const NAMES: &[&str] = &[
    "Ada", "Basil", "Clara", "Dmitri", "Elena", "Farid", "Greta", "Hugo", "Ines", "Jonas", "Kira", "Lorenzo", "Mira",
    "Nils", "Olga", "Pavel", "Rosa", "Soren", "Talia", "Victor",
];
const NOUNS: &[(&str, &str)] = &[
    ("river", "rivers"), ("garden", "gardens"), ("lantern", "lanterns"), ("merchant", "merchants"), ("village", "villages"),
    ("mountain", "mountains"), ("letter", "letters"), ("window", "windows"), ("soldier", "soldiers"), ("teacher", "teachers"),
    ("market", "markets"), ("bridge", "bridges"), ("forest", "forests"), ("harbor", "harbors"), ("machine", "machines"),
    ("engine", "engines"), ("kitchen", "kitchens"), ("library", "libraries"), ("stranger", "strangers"), ("child", "children"),
    ("horse", "horses"), ("candle", "candles"), ("storm", "storms"), ("road", "roads"), ("tower", "towers"),
    ("island", "islands"), ("painter", "painters"), ("doctor", "doctors"), ("farmer", "farmers"), ("baker", "bakers"),
    ("wheel", "wheels"), ("door", "doors"), ("voice", "voices"), ("song", "songs"), ("story", "stories"),
    ("city", "cities"), ("valley", "valleys"), ("clock", "clocks"), ("ship", "ships"), ("captain", "captains"),
    ("friend", "friends"), ("neighbor", "neighbors"), ("letterbox", "letterboxes"), ("orchard", "orchards"),
    ("station", "stations"), ("train", "trains"), ("winter", "winters"), ("summer", "summers"), ("field", "fields"),
    ("stone", "stones"), ("bird", "birds"), ("wolf", "wolves"), ("knife", "knives"), ("map", "maps"), ("key", "keys"),
    ("coin", "coins"), ("mirror", "mirrors"), ("student", "students"), ("question", "questions"), ("answer", "answers"),
];
const VERBS: &[(&str, &str, &str)] = &[
    ("carries", "carry", "carried"), ("watches", "watch", "watched"), ("finds", "find", "found"), ("opens", "open", "opened"),
    ("follows", "follow", "followed"), ("builds", "build", "built"), ("remembers", "remember", "remembered"),
    ("paints", "paint", "painted"), ("crosses", "cross", "crossed"), ("repairs", "repair", "repaired"),
    ("visits", "visit", "visited"), ("describes", "describe", "described"), ("forgets", "forget", "forgot"),
    ("sells", "sell", "sold"), ("buys", "buy", "bought"), ("hides", "hide", "hid"), ("answers", "answer", "answered"),
    ("counts", "count", "counted"), ("guards", "guard", "guarded"), ("teaches", "teach", "taught"),
    ("writes", "write", "wrote"), ("reads", "read", "read"), ("hears", "hear", "heard"), ("sees", "see", "saw"),
    ("leaves", "leave", "left"), ("keeps", "keep", "kept"), ("brings", "bring", "brought"), ("loses", "lose", "lost"),
    ("cleans", "clean", "cleaned"), ("measures", "measure", "measured"),
];
const INTRANSITIVE: &[(&str, &str, &str)] = &[
    ("sleeps", "sleep", "slept"), ("waits", "wait", "waited"), ("laughs", "laugh", "laughed"), ("wanders", "wander", "wandered"),
    ("sings", "sing", "sang"), ("rests", "rest", "rested"), ("returns", "return", "returned"), ("listens", "listen", "listened"),
    ("shines", "shine", "shone"), ("arrives", "arrive", "arrived"),
];
const ADJECTIVES: &[&str] = &[
    "old", "quiet", "bright", "narrow", "heavy", "golden", "silent", "broken", "distant", "gentle", "ancient", "small",
    "careful", "hidden", "crooked", "warm", "cold", "green", "wooden", "tired", "curious", "patient", "empty", "busy",
    "northern", "little", "famous", "simple", "strange", "clever",
];
const ADVERBS: &[&str] = &[
    "slowly", "quietly", "often", "never", "again", "carefully", "suddenly", "always", "gladly", "rarely", "early", "late",
];
const PREPOSITIONS: &[&str] = &[
    "near", "behind", "across", "under", "beside", "above", "through", "inside", "toward", "beyond", "along", "past",
];
const CONNECTIVES: &[&str] = &["and", "but", "so", "because", "while", "although"];
const OPENERS: &[&str] = &["Yesterday", "In the morning", "At night", "Every day", "Later", "Once", "Meanwhile", "After the storm"];

/// Zipf-like pick: low indices are much more frequent.
fn zipf<'a, T, R: Rng + ?Sized>(rng: &mut R, items: &'a [T]) -> &'a T {
    let n = items.len() as f64;
    let u: f64 = rng.gen();
    let idx = ((n + 1.0).powf(u) - 1.0).floor() as usize;
    &items[idx.min(items.len() - 1)]
}

fn noun_phrase<R: Rng + ?Sized>(rng: &mut R, out: &mut String) -> bool {
    if rng.gen_bool(0.15) {
        out.push_str(zipf(rng, NAMES));
        return false;
    }
    let plural = rng.gen_bool(0.3);
    let det = if plural {
        *["the", "some", "many", "two", "three", "the"].choose(rng).unwrap()
    } else {
        *["the", "a", "the", "this", "that", "every"].choose(rng).unwrap()
    };
    let mut words = Vec::new();
    if rng.gen_bool(0.45) {
        words.push(*zipf(rng, ADJECTIVES));
    }
    let (sg, pl) = zipf(rng, NOUNS);
    words.push(if plural { pl } else { sg });
    let det = if det == "a" && words[0].starts_with(['a', 'e', 'i', 'o', 'u']) { "an" } else { det };
    out.push_str(det);
    for w in words {
        out.push(' ');
        out.push_str(w);
    }
    plural
}

fn clause<R: Rng + ?Sized>(rng: &mut R, out: &mut String, past: bool) {
    let plural = noun_phrase(rng, out);
    if rng.gen_bool(0.2) {
        out.push(' ');
        out.push_str(zipf(rng, ADVERBS));
    }
    out.push(' ');
    let transitive = rng.gen_bool(0.7);
    let (s3, base, pst) = if transitive { *zipf(rng, VERBS) } else { *zipf(rng, INTRANSITIVE) };
    out.push_str(if past {
        pst
    } else if plural {
        base
    } else {
        s3
    });
    if transitive {
        out.push(' ');
        noun_phrase(rng, out);
    }
    if rng.gen_bool(0.4) {
        out.push(' ');
        out.push_str(zipf(rng, PREPOSITIONS));
        out.push(' ');
        noun_phrase(rng, out);
    }
}

fn capitalise(s: &mut String, from: usize) {
    if let Some(c) = s[from..].chars().next() {
        let upper: String = c.to_uppercase().collect();
        s.replace_range(from..from + c.len_utf8(), &upper);
    }
}

/// English-like text from a small stochastic grammar with Zipfian word
/// choice; at least `n_bytes` long and fully determined by `seed`.
pub fn synthetic_text(seed: u64, n_bytes: usize) -> String {
    let mut rng = rng::substream(seed, "corpus");
    let mut out = String::with_capacity(n_bytes + 256);
    while out.len() < n_bytes {
        let sentences = rng.gen_range(2..6);
        for s in 0..sentences {
            let start = out.len();
            let past = rng.gen_bool(0.5);
            if rng.gen_bool(0.2) {
                out.push_str(zipf(&mut rng, OPENERS));
                out.push_str(", ");
            }
            clause(&mut rng, &mut out, past);
            if rng.gen_bool(0.35) {
                out.push_str(", ");
                out.push_str(zipf(&mut rng, CONNECTIVES));
                out.push(' ');
                clause(&mut rng, &mut out, past);
            }
            capitalise(&mut out, start);
            out.push(if rng.gen_bool(0.9) { '.' } else { '?' });
            if s + 1 < sentences {
                out.push(' ');
            }
        }
        out.push('\n');
    }
    out
}
