// SPDX-License-Identifier: MIT OR Apache-2.0

//! Indirect-object-identification sentences, a word-level vocabulary and
//! the logit-difference metric.

use std::collections::HashMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NAMES: [&str; 20] = [
    "Amy",
    "Laura",
    "Nicholas",
    "Christina",
    "Danielle",
    "Andrew",
    "Anthony",
    "Jose",
    "Nathan",
    "Sean",
    "Vanessa",
    "Kimberly",
    "Jeremy",
    "Sarah",
    "Michael",
    "Emily",
    "David",
    "Jessica",
    "Brian",
    "Rachel",
];
pub const PLACES: [&str; 8] = [
    "house",
    "restaurant",
    "office",
    "store",
    "school",
    "garden",
    "station",
    "hospital",
];
pub const OBJECTS: [&str; 8] = [
    "snack", "drink", "computer", "ring", "book", "bone", "basket", "necklace",
];

/// `{X}`/`{Y}` are the two introduced names, `{S}` the repeated one.
pub const TEMPLATES: [&str; 4] = [
    "When {X} and {Y} got a {O} at the {P} , {S} decided to give it to",
    "Then , {X} and {Y} had a lot of fun at the {P} . {S} gave a {O} to",
    "Then , {X} and {Y} went to the {P} . {S} gave a {O} to",
    "Then , {X} and {Y} had a long argument , and afterwards {S} said to",
];

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
const PUNCTUATION: [&str; 2] = [",", "."];

/// Word-level vocabulary: specials, template words, names, places, objects.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::ioi()
    }
}

impl Vocabulary {
    pub fn ioi() -> Self {
        let mut words: Vec<String> = vec![PAD.into(), UNK.into()];
        let push = |w: &str, words: &mut Vec<String>| {
            if !words.iter().any(|x| x == w) {
                words.push(w.to_string());
            }
        };
        for t in TEMPLATES {
            for w in t.split_whitespace().filter(|w| !w.starts_with('{')) {
                push(w, &mut words);
            }
        }
        for w in NAMES.iter().chain(&PLACES).chain(&OBJECTS) {
            push(w, &mut words);
        }
        let ids = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Vocabulary { words, ids }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.ids
            .get(word)
            .copied()
            .ok_or_else(|| Error::Input(format!("word `{word}` is not in the vocabulary")))
    }

    /// Like [`Vocabulary::id`] but maps unknown words to `<unk>`.
    pub fn id_or_unk(&self, word: &str) -> usize {
        self.ids.get(word).copied().unwrap_or(1)
    }

    pub fn word(&self, id: usize) -> Result<&str> {
        self.words
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::Input(format!("token id {id} out of range")))
    }

    pub fn is_name(&self, id: usize) -> bool {
        self.words
            .get(id)
            .is_some_and(|w| NAMES.contains(&w.as_str()))
    }

    pub fn is_punctuation(&self, id: usize) -> bool {
        self.words
            .get(id)
            .is_some_and(|w| PUNCTUATION.contains(&w.as_str()))
    }

    /// Splits on whitespace and detaches trailing `,` and `.` from words.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for raw in text.split_whitespace() {
            let (word, punct) = match raw.char_indices().last() {
                Some((i, c)) if raw.len() > 1 && (c == ',' || c == '.') => {
                    (&raw[..i], Some(&raw[i..]))
                }
                _ => (raw, None),
            };
            out.push(self.id(word)?);
            if let Some(p) = punct {
                out.push(self.id(p)?);
            }
        }
        Ok(out)
    }

    /// Joins words with single spaces, attaching punctuation to the left.
    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let w = self.word(id)?;
            if !out.is_empty() && !PUNCTUATION.contains(&w) {
                out.push(' ');
            }
            out.push_str(w);
        }
        Ok(out)
    }

    pub fn words(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter()
            .map(|&i| self.word(i).map(str::to_string))
            .collect()
    }
}

/// Which of an example's three aligned sequences to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Clean,
    Corrupted,
    CorruptedHard,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IoiExample {
    pub clean_tokens: Vec<usize>,
    pub corrupted_tokens: Vec<usize>,
    pub corrupted_hard_tokens: Vec<usize>,
    /// Token of name A, the indirect object.
    pub target_id: usize,
    /// Token of name B, the repeated subject.
    pub distractor_id: usize,
    pub template_id: usize,
    /// (A, B, C): indirect object, subject, replacement name.
    pub names: (String, String, String),
    /// Position of the second occurrence of B.
    pub substitution_pos: usize,
}

impl IoiExample {
    pub fn tokens(&self, variant: Variant) -> &[usize] {
        match variant {
            Variant::Clean => &self.clean_tokens,
            Variant::Corrupted => &self.corrupted_tokens,
            Variant::CorruptedHard => &self.corrupted_hard_tokens,
        }
    }

    pub fn len(&self) -> usize {
        self.clean_tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean_tokens.is_empty()
    }

    /// Checks alignment, the single substitution and the target/distractor roles.
    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        let bad = |m: String| Error::Input(format!("invalid IOI example: {m}"));
        let n = self.clean_tokens.len();
        if self.corrupted_tokens.len() != n || self.corrupted_hard_tokens.len() != n {
            return Err(bad("sequences differ in length".into()));
        }
        if self.target_id == self.distractor_id {
            return Err(bad("target equals distractor".into()));
        }
        let (a, b, c) = (
            vocab.id(&self.names.0)?,
            vocab.id(&self.names.1)?,
            vocab.id(&self.names.2)?,
        );
        if a == b || b == c || a == c {
            return Err(bad("names are not distinct".into()));
        }
        if self.target_id != a || self.distractor_id != b {
            return Err(bad("target/distractor do not match names A/B".into()));
        }
        let p = self.substitution_pos;
        for (label, seq, replacement) in [
            ("corrupted", &self.corrupted_tokens, c),
            ("corrupted-hard", &self.corrupted_hard_tokens, a),
        ] {
            let diffs: Vec<usize> = (0..n).filter(|&i| seq[i] != self.clean_tokens[i]).collect();
            if diffs != [p] || self.clean_tokens[p] != b || seq[p] != replacement {
                return Err(bad(format!(
                    "{label} sequence is not a single B substitution"
                )));
            }
        }
        let b_positions: Vec<usize> = (0..n).filter(|&i| self.clean_tokens[i] == b).collect();
        if b_positions.len() != 2 || b_positions[1] != p {
            return Err(bad(
                "substitution is not at the second occurrence of B".into()
            ));
        }
        Ok(())
    }
}

fn fill(template: &str, x: &str, y: &str, s: &str, place: &str, object: &str) -> String {
    template
        .replace("{X}", x)
        .replace("{Y}", y)
        .replace("{S}", s)
        .replace("{P}", place)
        .replace("{O}", object)
}

/// Builds one example. `a_first` puts the indirect object before the subject.
#[allow(clippy::too_many_arguments)]
pub fn instantiate(
    vocab: &Vocabulary,
    template_id: usize,
    a: &str,
    b: &str,
    c: &str,
    place: &str,
    object: &str,
    a_first: bool,
) -> Result<IoiExample> {
    let template = TEMPLATES
        .get(template_id)
        .ok_or_else(|| Error::Input(format!("no template {template_id}")))?;
    let (x, y) = if a_first { (a, b) } else { (b, a) };
    let words = |s: &str| -> Result<Vec<usize>> {
        fill(template, x, y, s, place, object)
            .split_whitespace()
            .map(|w| vocab.id(w))
            .collect()
    };
    let clean_tokens = words(b)?;
    let corrupted_tokens = words(c)?;
    let corrupted_hard_tokens = words(a)?;
    let substitution_pos = (0..clean_tokens.len())
        .find(|&i| clean_tokens[i] != corrupted_tokens[i])
        .ok_or_else(|| Error::Input("template has no subject slot".into()))?;
    let ex = IoiExample {
        clean_tokens,
        corrupted_tokens,
        corrupted_hard_tokens,
        target_id: vocab.id(a)?,
        distractor_id: vocab.id(b)?,
        template_id,
        names: (a.into(), b.into(), c.into()),
        substitution_pos,
    };
    ex.validate(vocab)?;
    Ok(ex)
}

/// `n` examples with templates balanced to within one example of uniform,
/// names A, B, C distinct, and both name orders equally likely.
pub fn generate(n: usize, seed: u64) -> Result<Vec<IoiExample>> {
    if n == 0 {
        return Err(Error::Input("generate requires n > 0".into()));
    }
    let vocab = Vocabulary::ioi();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut templates: Vec<usize> = (0..n).map(|i| i % TEMPLATES.len()).collect();
    templates.shuffle(&mut rng);
    templates
        .into_iter()
        .map(|t| {
            let picked: Vec<&&str> = NAMES.choose_multiple(&mut rng, 3).collect();
            let place = PLACES.choose(&mut rng).expect("nonempty pool");
            let object = OBJECTS.choose(&mut rng).expect("nonempty pool");
            let a_first = rng.random_bool(0.5);
            instantiate(
                &vocab, t, picked[0], picked[1], picked[2], place, object, a_first,
            )
        })
        .collect()
}

/// `logits[last][target] - logits[last][distractor]`.
pub fn logit_diff(logits: &Tensor, example: &IoiExample) -> Result<f64> {
    let (rows, cols) = logits.rows_cols();
    if rows == 0 {
        return Err(Error::Input("logits have no positions".into()));
    }
    for id in [example.target_id, example.distractor_id] {
        if id >= cols {
            return Err(Error::Input(format!(
                "token id {id} out of range for {cols} logits"
            )));
        }
    }
    Ok(logits.get2(rows - 1, example.target_id) - logits.get2(rows - 1, example.distractor_id))
}

#[derive(Serialize, Deserialize)]
struct Record {
    clean: Vec<String>,
    corrupted: Vec<String>,
    corrupted_hard: Vec<String>,
    target: String,
    distractor: String,
    template_id: usize,
}

pub fn to_jsonl(examples: &[IoiExample], vocab: &Vocabulary) -> Result<String> {
    let mut out = String::new();
    for ex in examples {
        let rec = Record {
            clean: vocab.words(&ex.clean_tokens)?,
            corrupted: vocab.words(&ex.corrupted_tokens)?,
            corrupted_hard: vocab.words(&ex.corrupted_hard_tokens)?,
            target: ex.names.0.clone(),
            distractor: ex.names.1.clone(),
            template_id: ex.template_id,
        };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn from_jsonl(text: &str, vocab: &Vocabulary) -> Result<Vec<IoiExample>> {
    let mut out = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ctx = |e: Error| Error::Input(format!("dataset line {}: {e}", line_no + 1));
        let rec: Record = serde_json::from_str(line).map_err(|e| ctx(e.into()))?;
        let ids =
            |ws: &[String]| -> Result<Vec<usize>> { ws.iter().map(|w| vocab.id(w)).collect() };
        let clean_tokens = ids(&rec.clean).map_err(ctx)?;
        let corrupted_tokens = ids(&rec.corrupted).map_err(ctx)?;
        let corrupted_hard_tokens = ids(&rec.corrupted_hard).map_err(ctx)?;
        let substitution_pos = (0..clean_tokens.len().min(corrupted_tokens.len()))
            .find(|&i| clean_tokens[i] != corrupted_tokens[i])
            .ok_or_else(|| ctx(Error::Input("corrupted equals clean".into())))?;
        let ex = IoiExample {
            target_id: vocab.id(&rec.target).map_err(ctx)?,
            distractor_id: vocab.id(&rec.distractor).map_err(ctx)?,
            template_id: rec.template_id,
            names: (
                rec.target,
                rec.distractor,
                rec.corrupted[substitution_pos].clone(),
            ),
            substitution_pos,
            clean_tokens,
            corrupted_tokens,
            corrupted_hard_tokens,
        };
        ex.validate(vocab).map_err(ctx)?;
        out.push(ex);
    }
    Ok(out)
}

pub fn save_jsonl(
    path: impl AsRef<Path>,
    examples: &[IoiExample],
    vocab: &Vocabulary,
) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(to_jsonl(examples, vocab)?.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_jsonl(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<Vec<IoiExample>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    for line in std::io::BufReader::new(file).lines() {
        text.push_str(&line.map_err(|e| Error::io(path, e))?);
        text.push('\n');
    }
    from_jsonl(&text, vocab)
}
