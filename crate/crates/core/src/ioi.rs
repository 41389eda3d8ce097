// SPDX-License-Identifier: MIT OR Apache-2.0

//! Indirect-object-identification prompts: word pools, templates, seeded
//! batches, minimal pairs and role-position bookkeeping.
//!
//! Every prompt starts with the end-of-text token as a beginning-of-sequence
//! marker, so the canonical template occupies 15 positions.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SeededRng;
use crate::tokenizer::BpeVocab;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("word pools: {0}")]
    PoolsJson(#[from] serde_json::Error),
    #[error("{word:?} is not a single token with a leading space")]
    MultiToken { word: String },
    #[error("third name {n3:?} must be one of {n1:?}, {n2:?}")]
    InvalidN3 { n1: String, n2: String, n3: String },
    #[error("the two names must differ (got {0:?} twice)")]
    SameNames(String),
    #[error("empty pool: {0}")]
    EmptyPool(&'static str),
    #[error("cannot draw a disjoint name pair from a pool of {0}")]
    NoDisjointPair(usize),
    #[error("vocabulary has no end-of-text token")]
    NoBos,
    #[error("template tokenization drifted at {0}")]
    Alignment(String),
}

// ---------------------------------------------------------------------------
// Word pools
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WordPools {
    pub names: Vec<String>,
    pub places: Vec<String>,
    pub objects: Vec<String>,
    pub ood_places: Vec<String>,
    pub ood_objects: Vec<String>,
    pub heldout_names: Vec<String>,
    pub multi_token_probe_names: Vec<String>,
}

fn owned(words: &[&str]) -> Vec<String> {
    words.iter().map(|w| w.to_string()).collect()
}

impl Default for WordPools {
    /// The shipped pools (also in `assets/pools.json`).
    fn default() -> Self {
        Self {
            names: owned(&[
                "Carol", "Eve", "Adam", "David", "Mary", "James", "Jane", "Sid", "Dan", "Tom", "John", "Alice",
                "Michael", "Sarah", "Martin", "Amy",
            ]),
            places: owned(&["store", "park", "school", "office", "garden", "house", "market"]),
            objects: owned(&["drink", "book", "ball", "ring", "bone", "basket", "kiss"]),
            ood_places: owned(&["restaurant", "airport", "beach", "museum", "stadium", "harbor", "cafe"]),
            ood_objects: owned(&["pen", "card", "note", "letter", "key", "coin", "watch"]),
            heldout_names: owned(&["Anna", "Mark", "Lucy", "Peter", "Emma", "Tim", "Kate", "Paul"]),
            multi_token_probe_names: owned(&["Beatrice", "Mortimer", "Ophelia", "Genevieve", "Bartholomew"]),
        }
    }
}

impl WordPools {
    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Check that every word used in a template is a single token. Probe
    /// names are exempt: they exist to be excluded.
    pub fn validate(&self, vocab: &BpeVocab) -> Result<(), DatasetError> {
        let lists: [(&'static str, &Vec<String>); 6] = [
            ("names", &self.names),
            ("places", &self.places),
            ("objects", &self.objects),
            ("ood_places", &self.ood_places),
            ("ood_objects", &self.ood_objects),
            ("heldout_names", &self.heldout_names),
        ];
        for (what, list) in lists {
            if list.is_empty() {
                return Err(DatasetError::EmptyPool(what));
            }
            if let Some(w) = list.iter().find(|w| !vocab.is_single_token(w)) {
                return Err(DatasetError::MultiToken { word: w.clone() });
            }
        }
        Ok(())
    }

    /// (names, places, objects) for a pool variant.
    pub fn select(&self, variant: PoolVariant) -> (&[String], &[String], &[String]) {
        match variant {
            PoolVariant::InDistribution => (&self.names, &self.places, &self.objects),
            PoolVariant::OodContent => (&self.names, &self.ood_places, &self.ood_objects),
            PoolVariant::HeldoutNames => (&self.heldout_names, &self.places, &self.objects),
        }
    }
}

/// Split candidate names into single-token (kept) and multi-token (excluded).
pub fn partition_single_token(vocab: &BpeVocab, names: &[String]) -> (Vec<String>, Vec<String>) {
    names.iter().cloned().partition(|n| vocab.is_single_token(n))
}

// ---------------------------------------------------------------------------
// Prompts
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolVariant {
    InDistribution,
    OodContent,
    HeldoutNames,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frame {
    /// "When A and B went to the P, S gave a O to"
    Canonical,
    /// "After A and B arrived at the P, it was S who handed a O to"
    Cleft,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Structure {
    /// Indirect object named first: A B B → A.
    Abba,
    /// Subject named first: B A B → A.
    Baba,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructureMix {
    Uniform,
    Only(Structure),
}

/// Token index of every role in a prompt (BOS at index 0).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionLabels {
    pub n1: usize,
    pub n2: usize,
    pub n3: usize,
    pub place: usize,
    pub object: usize,
    pub end: usize,
    /// First mention of the subject.
    pub s: usize,
    /// The single mention of the indirect object.
    pub io: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IoiPrompt {
    pub text: String,
    pub token_ids: Vec<u32>,
    pub structure: Structure,
    pub frame: Frame,
    pub io_name: String,
    pub s_name: String,
    pub place: String,
    pub object: String,
    pub io_token_id: u32,
    pub s_token_id: u32,
    pub labels: PositionLabels,
}

impl IoiPrompt {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn end(&self) -> usize {
        self.labels.end
    }
}

/// A clean prompt and its corrupt twin with a disjoint name pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinimalPair {
    pub clean: IoiPrompt,
    pub corrupt: IoiPrompt,
}

/// Template text split around its slots: (text before slot, slot value).
fn template<'a>(frame: Frame, n1: &'a str, n2: &'a str, n3: &'a str, place: &'a str, object: &'a str) -> (Vec<(&'static str, &'a str)>, &'static str) {
    match frame {
        Frame::Canonical => (
            vec![
                ("When", n1),
                (" and", n2),
                (" went to the", place),
                (",", n3),
                (" gave a", object),
            ],
            " to",
        ),
        Frame::Cleft => (
            vec![
                ("After", n1),
                (" and", n2),
                (" arrived at the", place),
                (", it was", n3),
                (" who handed a", object),
            ],
            " to",
        ),
    }
}

/// Render one prompt and label its role positions.
pub fn render_prompt(
    vocab: &BpeVocab,
    n1: &str,
    n2: &str,
    n3: &str,
    place: &str,
    object: &str,
    frame: Frame,
) -> Result<IoiPrompt, DatasetError> {
    if n1 == n2 {
        return Err(DatasetError::SameNames(n1.to_string()));
    }
    let structure = if n3 == n2 {
        Structure::Abba
    } else if n3 == n1 {
        Structure::Baba
    } else {
        return Err(DatasetError::InvalidN3 {
            n1: n1.into(),
            n2: n2.into(),
            n3: n3.into(),
        });
    };
    for w in [n1, n2, place, object] {
        if !vocab.is_single_token(w) {
            return Err(DatasetError::MultiToken { word: w.to_string() });
        }
    }
    let bos = vocab.end_of_text_id().ok_or(DatasetError::NoBos)?;

    let (slots, tail) = template(frame, n1, n2, n3, place, object);
    let mut text = String::new();
    let mut slot_positions = Vec::with_capacity(slots.len());
    for (before, value) in &slots {
        text.push_str(before);
        // +1 for BOS; the text so far ends at a word boundary.
        slot_positions.push(1 + vocab.encode(&text).len());
        text.push(' ');
        text.push_str(value);
    }
    text.push_str(tail);
    let mut token_ids = vec![bos];
    token_ids.extend(vocab.encode(&text));

    for ((_, value), &pos) in slots.iter().zip(&slot_positions) {
        let want = vocab.encode(&format!(" {value}"));
        if token_ids.get(pos) != want.first() {
            return Err(DatasetError::Alignment(format!("{value:?} in {text:?}")));
        }
    }
    let [p_n1, p_n2, p_place, p_n3, p_obj] = slot_positions[..] else {
        unreachable!("five template slots")
    };
    let (io_name, s_name, io, s) = match structure {
        Structure::Abba => (n1, n2, p_n1, p_n2),
        Structure::Baba => (n2, n1, p_n2, p_n1),
    };
    let single = |w: &str| vocab.encode(&format!(" {w}"))[0];
    Ok(IoiPrompt {
        structure,
        frame,
        io_name: io_name.to_string(),
        s_name: s_name.to_string(),
        place: place.to_string(),
        object: object.to_string(),
        io_token_id: single(io_name),
        s_token_id: single(s_name),
        labels: PositionLabels {
            n1: p_n1,
            n2: p_n2,
            n3: p_n3,
            place: p_place,
            object: p_obj,
            end: token_ids.len() - 1,
            s,
            io,
        },
        text,
        token_ids,
    })
}

/// Render with roles given as (IO, S) and a structure.
pub fn render_roles(
    vocab: &BpeVocab,
    io: &str,
    s: &str,
    place: &str,
    object: &str,
    structure: Structure,
    frame: Frame,
) -> Result<IoiPrompt, DatasetError> {
    match structure {
        Structure::Abba => render_prompt(vocab, io, s, s, place, object, frame),
        Structure::Baba => render_prompt(vocab, s, io, s, place, object, frame),
    }
}

fn draw_structure(rng: &mut SeededRng, mix: StructureMix) -> Structure {
    match mix {
        StructureMix::Only(s) => s,
        StructureMix::Uniform => {
            if rng.below(2) == 0 {
                Structure::Abba
            } else {
                Structure::Baba
            }
        }
    }
}

/// Seeded batch, uniform over (ordered name pair, place, object, structure).
pub fn sample_batch(
    vocab: &BpeVocab,
    pools: &WordPools,
    seed: u64,
    n: usize,
    variant: PoolVariant,
    frame: Frame,
    mix: StructureMix,
) -> Result<Vec<IoiPrompt>, DatasetError> {
    let (names, places, objects) = pools.select(variant);
    sample_from(vocab, names, places, objects, seed, n, frame, mix)
}

/// [`sample_batch`] over explicit lists.
#[allow(clippy::too_many_arguments)]
pub fn sample_from(
    vocab: &BpeVocab,
    names: &[String],
    places: &[String],
    objects: &[String],
    seed: u64,
    n: usize,
    frame: Frame,
    mix: StructureMix,
) -> Result<Vec<IoiPrompt>, DatasetError> {
    if names.len() < 2 {
        return Err(DatasetError::EmptyPool("names (need at least two)"));
    }
    if places.is_empty() {
        return Err(DatasetError::EmptyPool("places"));
    }
    if objects.is_empty() {
        return Err(DatasetError::EmptyPool("objects"));
    }
    let mut rng = SeededRng::new(seed);
    (0..n)
        .map(|_| {
            let io = rng.below(names.len());
            let s = (io + 1 + rng.below(names.len() - 1)) % names.len();
            let place = &places[rng.below(places.len())];
            let object = &objects[rng.below(objects.len())];
            let structure = draw_structure(&mut rng, mix);
            render_roles(vocab, &names[io], &names[s], place, object, structure, frame)
        })
        .collect()
}

/// `per_name` prompts with each name as IO, and — by rotating the subject
/// through the other names — the same number with each name as S.
pub fn balanced_role_prompts(
    vocab: &BpeVocab,
    names: &[String],
    places: &[String],
    objects: &[String],
    seed: u64,
    per_name: usize,
    frame: Frame,
) -> Result<Vec<IoiPrompt>, DatasetError> {
    let n = names.len();
    if n < 2 || places.is_empty() || objects.is_empty() {
        return Err(DatasetError::EmptyPool("names/places/objects"));
    }
    let mut rng = SeededRng::new(seed);
    let mut out = Vec::with_capacity(n * per_name);
    for (i, io) in names.iter().enumerate() {
        for k in 0..per_name {
            let s = &names[(i + 1 + k % (n - 1)) % n];
            let place = &places[rng.below(places.len())];
            let object = &objects[rng.below(objects.len())];
            let structure = draw_structure(&mut rng, StructureMix::Uniform);
            out.push(render_roles(vocab, io, s, place, object, structure, frame)?);
        }
    }
    Ok(out)
}

/// Paraphrase set for one IO name: seeded subsample of the full cross of
/// structures × places × objects × `n_distractors` seeded subject names.
#[allow(clippy::too_many_arguments)]
pub fn paraphrase_prompts(
    vocab: &BpeVocab,
    io: &str,
    names: &[String],
    places: &[String],
    objects: &[String],
    n_distractors: usize,
    count: usize,
    seed: u64,
    frame: Frame,
) -> Result<Vec<IoiPrompt>, DatasetError> {
    let mut rng = SeededRng::new(seed);
    let mut others: Vec<&String> = names.iter().filter(|n| n.as_str() != io).collect();
    if others.is_empty() || places.is_empty() || objects.is_empty() {
        return Err(DatasetError::EmptyPool("paraphrase pools"));
    }
    rng.shuffle(&mut others);
    others.truncate(n_distractors.max(1));
    let mut cross = Vec::new();
    for structure in [Structure::Abba, Structure::Baba] {
        for place in places {
            for object in objects {
                for s in &others {
                    cross.push((structure, place, object, *s));
                }
            }
        }
    }
    rng.shuffle(&mut cross);
    cross.truncate(count);
    cross
        .into_iter()
        .map(|(structure, place, object, s)| render_roles(vocab, io, s, place, object, structure, frame))
        .collect()
}

/// Clean prompts with corrupt twins whose names are a disjoint pair in the
/// same slots; all other tokens are identical.
pub fn make_minimal_pairs(
    vocab: &BpeVocab,
    pools: &WordPools,
    seed: u64,
    n: usize,
    variant: PoolVariant,
    frame: Frame,
) -> Result<Vec<MinimalPair>, DatasetError> {
    let (names, places, objects) = pools.select(variant);
    if names.len() < 4 {
        return Err(DatasetError::NoDisjointPair(names.len()));
    }
    let clean = sample_from(vocab, names, places, objects, seed, n, frame, StructureMix::Uniform)?;
    let mut rng = SeededRng::new(crate::rng::derive_seed(seed, "corrupt-names"));
    clean
        .into_iter()
        .map(|clean| {
            let rest: Vec<&String> = names
                .iter()
                .filter(|n| **n != clean.io_name && **n != clean.s_name)
                .collect();
            let c = rng.below(rest.len());
            let d = (c + 1 + rng.below(rest.len() - 1)) % rest.len();
            let corrupt = render_roles(
                vocab,
                rest[c],
                rest[d],
                &clean.place,
                &clean.object,
                clean.structure,
                clean.frame,
            )?;
            Ok(MinimalPair { clean, corrupt })
        })
        .collect()
}
