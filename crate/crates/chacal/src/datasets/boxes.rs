//! Boxes entity-tracking task: put/remove/move operations over labeled
//! boxes, rendered as English sentences, with the final contents of every
//! box as the answer.
//!
//! The `default` variant mixes explicit moves ("Move the shirt from Box H
//! to Box F.") with implicit ones; the `advanced` variant uses only the
//! implicit form ("Move the contents of Box H to Box F."), keeps exactly
//! half the boxes filled, and draws its operation count log-uniformly, all
//! of which deepens the dependency chains a model must resolve.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{DatasetError, GenerationCase, Sample, SampleSource};
use crate::graphs::ComputationGraph;
use crate::rng::Rng;

/// Noun inventory; table-attested nouns first, then filler to reach the
/// fixed vocabulary sizes (87 nouns in the default variant, 90 advanced).
pub const NOUNS: &[&str] = &[
    "radio", "bone", "clock", "television", "bill", "computer", "tea", "ice", "plant", "game",
    "milk", "cake", "drug", "map", "disk", "bell", "stone", "magazine", "shirt", "camera", "gift",
    "cigarette", "machine", "cream", "sheet", "coat", "apple", "book", "ball", "balloon", "banana",
    "basket", "battery", "blanket", "bottle", "bowl", "brush", "bucket", "button", "candle",
    "card", "carpet", "chair", "coin", "comb", "cup", "diary", "doll", "dress", "drum",
    "envelope", "eraser", "feather", "flag", "flower", "fork", "glass", "glove", "guitar",
    "hammer", "hat", "helmet", "jacket", "jar", "kettle", "key", "kite", "knife", "ladder",
    "lamp", "lemon", "letter", "lock", "marble", "medal", "mirror", "mug", "needle", "notebook",
    "orange", "pan", "pencil", "pillow", "pipe", "plate", "purse", "ring", "rope", "spoon",
    "towel",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoxesVariant {
    Default,
    Advanced,
}

/// How many operations a sample receives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpsCount {
    Fixed(usize),
    /// log(count) uniform on [log 1, log max].
    LogUniform { max: usize },
}

impl OpsCount {
    fn draw(&self, rng: &mut Rng) -> usize {
        match *self {
            OpsCount::Fixed(n) => n,
            OpsCount::LogUniform { max } => {
                let u = rng.uniform(0.0, (max as f64).ln());
                (u.exp().round() as usize).clamp(1, max)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxesConfig {
    pub variant: BoxesVariant,
    pub n_boxes: usize,
    pub ops: OpsCount,
    /// Chance that a box starts non-empty (default variant; the advanced
    /// variant always fills exactly half).
    pub fill_fraction: f64,
    pub item_vocab: Vec<String>,
    pub seed: u64,
}

impl BoxesConfig {
    pub fn default_variant(seed: u64) -> Self {
        BoxesConfig {
            variant: BoxesVariant::Default,
            n_boxes: 7,
            ops: OpsCount::Fixed(32),
            fill_fraction: 0.7,
            item_vocab: NOUNS[..87].iter().map(|s| s.to_string()).collect(),
            seed,
        }
    }

    pub fn advanced(seed: u64) -> Self {
        BoxesConfig {
            variant: BoxesVariant::Advanced,
            n_boxes: 8,
            ops: OpsCount::LogUniform { max: 31 },
            fill_fraction: 0.5,
            item_vocab: NOUNS.iter().map(|s| s.to_string()).collect(),
            seed,
        }
    }

    /// Small advanced instance for single-machine runs.
    pub fn advanced_desk(seed: u64) -> Self {
        let mut cfg = Self::advanced(seed);
        cfg.n_boxes = 6;
        cfg.ops = OpsCount::LogUniform { max: 15 };
        cfg
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.n_boxes == 0 || self.n_boxes > 26 {
            return Err(format!("n_boxes {} outside 1..=26", self.n_boxes));
        }
        if self.item_vocab.is_empty() {
            return Err("empty item vocabulary".into());
        }
        match self.ops {
            OpsCount::Fixed(_) => Ok(()),
            OpsCount::LogUniform { max } if max >= 1 => Ok(()),
            _ => Err("ops range needs max >= 1".into()),
        }
    }

    pub fn labels(&self) -> Vec<char> {
        (0..self.n_boxes).map(|i| (b'A' + i as u8) as char).collect()
    }
}

// ── world state and operations ────────────────────────────────────────────

/// Box label -> set of item names. BTree containers keep iteration in label
/// and alphabetical order, which the renderer relies on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorldState {
    boxes: BTreeMap<char, BTreeSet<String>>,
}

impl WorldState {
    pub fn empty(labels: &[char]) -> Self {
        WorldState {
            boxes: labels.iter().map(|&l| (l, BTreeSet::new())).collect(),
        }
    }

    pub fn labels(&self) -> Vec<char> {
        self.boxes.keys().copied().collect()
    }

    pub fn contents(&self, label: char) -> Option<&BTreeSet<String>> {
        self.boxes.get(&label)
    }

    pub fn insert(&mut self, label: char, item: &str) {
        self.boxes.entry(label).or_default().insert(item.to_string());
    }

    pub fn non_empty_labels(&self) -> Vec<char> {
        self.boxes
            .iter()
            .filter(|(_, items)| !items.is_empty())
            .map(|(&l, _)| l)
            .collect()
    }

    pub fn placed_items(&self) -> BTreeSet<String> {
        self.boxes.values().flatten().cloned().collect()
    }

    /// Every item sits in at most one box.
    pub fn items_unique(&self) -> bool {
        let total: usize = self.boxes.values().map(|s| s.len()).sum();
        self.placed_items().len() == total
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoxOp {
    Put { items: Vec<String>, target: char },
    Remove { items: Vec<String>, source: char },
    MoveItems { items: Vec<String>, source: char, target: char },
    MoveContents { source: char, target: char },
}

/// Replay failure: which operation broke and why.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceError {
    pub op_index: usize,
    pub message: String,
}

impl std::fmt::Display for TraceError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "operation {}: {}", self.op_index, self.message)
    }
}

impl std::error::Error for TraceError {}

fn apply_op(state: &mut WorldState, op: &BoxOp, op_index: usize) -> Result<(), TraceError> {
    let missing = |items: &[String], label: char, state: &WorldState| {
        items
            .iter()
            .find(|it| !state.boxes.get(&label).map(|s| s.contains(*it)).unwrap_or(false))
            .cloned()
    };
    match op {
        BoxOp::Put { items, target } => {
            for it in items {
                state.boxes.entry(*target).or_default().insert(it.clone());
            }
        }
        BoxOp::Remove { items, source } => {
            if let Some(it) = missing(items, *source, state) {
                return Err(TraceError {
                    op_index,
                    message: format!("cannot remove absent item '{it}' from Box {source}"),
                });
            }
            let set = state.boxes.get_mut(source).unwrap();
            for it in items {
                set.remove(it);
            }
        }
        BoxOp::MoveItems { items, source, target } => {
            if let Some(it) = missing(items, *source, state) {
                return Err(TraceError {
                    op_index,
                    message: format!("cannot move absent item '{it}' from Box {source}"),
                });
            }
            let src = state.boxes.get_mut(source).unwrap();
            for it in items {
                src.remove(it);
            }
            for it in items {
                state.boxes.entry(*target).or_default().insert(it.clone());
            }
        }
        BoxOp::MoveContents { source, target } => {
            // moving an empty box is a contents no-op
            let moved: Vec<String> =
                state.boxes.get_mut(source).map(std::mem::take).unwrap_or_default()
                    .into_iter()
                    .collect();
            let dst = state.boxes.entry(*target).or_default();
            for it in moved {
                dst.insert(it);
            }
        }
    }
    Ok(())
}

/// Ground-truth simulator: fold the trace over the initial state.
pub fn boxes_oracle(initial: &WorldState, ops: &[BoxOp]) -> Result<WorldState, TraceError> {
    let mut state = initial.clone();
    for (i, op) in ops.iter().enumerate() {
        apply_op(&mut state, op, i)?;
    }
    Ok(state)
}

// ── rendering ─────────────────────────────────────────────────────────────

fn item_list(items: &[String]) -> String {
    let with_article: Vec<String> = items.iter().map(|i| format!("the {i}")).collect();
    with_article.join(" and ")
}

fn sorted(items: &BTreeSet<String>) -> Vec<String> {
    items.iter().cloned().collect()
}

/// Initial-contents sentence; boxes described in the given order, first
/// clause capitalized.
pub fn render_initial(state: &WorldState, order: &[char]) -> String {
    let clauses: Vec<String> = order
        .iter()
        .map(|&label| {
            let items = state.contents(label).expect("label exists");
            if items.is_empty() {
                format!("there is nothing in Box {label}")
            } else {
                let verb = if items.len() == 1 { "is" } else { "are" };
                format!("{} {} in Box {}", item_list(&sorted(items)), verb, label)
            }
        })
        .collect();
    let mut text = clauses.join(", ");
    text.push('.');
    // capitalize the sentence: "the" -> "The" / "there" -> "There"
    let mut chars = text.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().collect::<String>() + chars.as_str(),
        None => text,
    }
}

pub fn render_op(op: &BoxOp) -> String {
    match op {
        BoxOp::Put { items, target } => {
            format!("Put {} into Box {}.", item_list(items), target)
        }
        BoxOp::Remove { items, source } => {
            format!("Remove {} from Box {}.", item_list(items), source)
        }
        BoxOp::MoveItems { items, source, target } => {
            format!("Move {} from Box {} to Box {}.", item_list(items), source, target)
        }
        BoxOp::MoveContents { source, target } => {
            format!("Move the contents of Box {source} to Box {target}.")
        }
    }
}

/// Final-contents answer: every box in label order, items alphabetical,
/// "Box X is empty" for empty boxes.
pub fn render_answer(state: &WorldState) -> String {
    let clauses: Vec<String> = state
        .boxes
        .iter()
        .map(|(label, items)| {
            if items.is_empty() {
                format!("Box {label} is empty")
            } else {
                format!("Box {} contains {}", label, item_list(&sorted(items)))
            }
        })
        .collect();
    let mut text = clauses.join(", ");
    text.push('.');
    text
}

// ── parsing (inverse of rendering) ────────────────────────────────────────

fn parse_item_list(text: &str) -> Result<Vec<String>, String> {
    let text = text.strip_prefix("the ").or_else(|| text.strip_prefix("The "));
    let text = text.ok_or_else(|| "item list must start with 'the'".to_string())?;
    Ok(text.split(" and the ").map(|s| s.trim().to_string()).collect())
}

fn parse_label(text: &str) -> Result<char, String> {
    let word = text.trim();
    let mut chars = word.chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) if c.is_ascii_uppercase() => Ok(c),
        _ => Err(format!("bad box label '{word}'")),
    }
}

fn parse_initial_clause(clause: &str, state: &mut WorldState) -> Result<(), String> {
    let lower = clause.trim();
    if let Some(rest) = lower
        .strip_prefix("there is nothing in Box ")
        .or_else(|| lower.strip_prefix("There is nothing in Box "))
    {
        let label = parse_label(rest)?;
        state.boxes.entry(label).or_default();
        return Ok(());
    }
    let (items_part, label_part) = lower
        .split_once(" are in Box ")
        .or_else(|| lower.split_once(" is in Box "))
        .ok_or_else(|| format!("unrecognized initial clause '{clause}'"))?;
    let label = parse_label(label_part)?;
    for item in parse_item_list(items_part)? {
        state.insert(label, &item);
    }
    Ok(())
}

fn parse_op_sentence(sentence: &str) -> Result<BoxOp, String> {
    let s = sentence.trim();
    if let Some(rest) = s.strip_prefix("Put ") {
        let (items, target) = rest
            .split_once(" into Box ")
            .ok_or_else(|| format!("bad put '{s}'"))?;
        return Ok(BoxOp::Put {
            items: parse_item_list(items)?,
            target: parse_label(target)?,
        });
    }
    if let Some(rest) = s.strip_prefix("Remove ") {
        let (items, source) = rest
            .split_once(" from Box ")
            .ok_or_else(|| format!("bad remove '{s}'"))?;
        return Ok(BoxOp::Remove {
            items: parse_item_list(items)?,
            source: parse_label(source)?,
        });
    }
    if let Some(rest) = s.strip_prefix("Move the contents of Box ") {
        let (source, target) = rest
            .split_once(" to Box ")
            .ok_or_else(|| format!("bad move '{s}'"))?;
        return Ok(BoxOp::MoveContents {
            source: parse_label(source)?,
            target: parse_label(target)?,
        });
    }
    if let Some(rest) = s.strip_prefix("Move ") {
        let (items, boxes) = rest
            .split_once(" from Box ")
            .ok_or_else(|| format!("bad move '{s}'"))?;
        let (source, target) = boxes
            .split_once(" to Box ")
            .ok_or_else(|| format!("bad move '{s}'"))?;
        return Ok(BoxOp::MoveItems {
            items: parse_item_list(items)?,
            source: parse_label(source)?,
            target: parse_label(target)?,
        });
    }
    Err(format!("unrecognized operation '{s}'"))
}

/// Parse a full prompt back into the initial state and operation trace.
pub fn parse_prompt(text: &str) -> Result<(WorldState, Vec<BoxOp>), String> {
    let sentences: Vec<&str> = text
        .split('.')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    if sentences.is_empty() {
        return Err("empty prompt".into());
    }
    let mut state = WorldState { boxes: BTreeMap::new() };
    for clause in sentences[0].split(", ") {
        parse_initial_clause(clause, &mut state)?;
    }
    let ops = sentences[1..]
        .iter()
        .map(|s| parse_op_sentence(s))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((state, ops))
}

/// Parse an answer sentence back into a world state.
pub fn parse_answer(text: &str) -> Result<WorldState, String> {
    let body = text.trim().strip_suffix('.').unwrap_or(text.trim());
    let mut state = WorldState { boxes: BTreeMap::new() };
    for clause in body.split(", ") {
        let clause = clause.trim();
        let rest = clause
            .strip_prefix("Box ")
            .ok_or_else(|| format!("bad answer clause '{clause}'"))?;
        if let Some(label) = rest.strip_suffix(" is empty") {
            state.boxes.entry(parse_label(label)?).or_default();
            continue;
        }
        let (label, items) = rest
            .split_once(" contains ")
            .ok_or_else(|| format!("bad answer clause '{clause}'"))?;
        let label = parse_label(label)?;
        for item in parse_item_list(items)? {
            state.insert(label, &item);
        }
    }
    Ok(state)
}

// ── generation ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct BoxesSample {
    pub prompt_text: String,
    pub answer_text: String,
    pub initial: WorldState,
    pub ops: Vec<BoxOp>,
    pub final_state: WorldState,
}

pub fn gen_boxes_sample(cfg: &BoxesConfig, rng: &mut Rng) -> Result<BoxesSample, DatasetError> {
    let labels = cfg.labels();
    let mut state = WorldState::empty(&labels);

    // initial contents
    let mut pool: Vec<&String> = cfg.item_vocab.iter().collect();
    rng.shuffle(&mut pool);
    let mut pool_iter = pool.into_iter();
    match cfg.variant {
        BoxesVariant::Advanced => {
            // exactly half the boxes hold one item each
            let mut order = labels.clone();
            rng.shuffle(&mut order);
            for &label in order.iter().take(cfg.n_boxes / 2) {
                let item = pool_iter.next().ok_or_else(|| {
                    DatasetError::Generation("item vocabulary exhausted".into())
                })?;
                state.insert(label, item);
            }
        }
        BoxesVariant::Default => {
            for &label in &labels {
                if rng.next_f64() < cfg.fill_fraction {
                    let count = 1 + rng.below(3);
                    for _ in 0..count {
                        if let Some(item) = pool_iter.next() {
                            state.insert(label, item);
                        }
                    }
                }
            }
        }
    }

    let initial = state.clone();
    let order = {
        let mut order = labels.clone();
        rng.shuffle(&mut order);
        order
    };

    // operations, sampled uniformly over the legal op kinds at each step
    let n_ops = cfg.ops.draw(rng);
    let mut ops = Vec::with_capacity(n_ops);
    for i in 0..n_ops {
        let reserve: Vec<String> = cfg
            .item_vocab
            .iter()
            .filter(|it| !state.placed_items().contains(*it))
            .cloned()
            .collect();
        let non_empty = state.non_empty_labels();
        let multi_box = cfg.n_boxes >= 2;

        let mut kinds: Vec<u8> = Vec::new();
        if !reserve.is_empty() {
            kinds.push(0); // put
        }
        if !non_empty.is_empty() {
            kinds.push(1); // remove
        }
        match cfg.variant {
            BoxesVariant::Default => {
                if !non_empty.is_empty() && multi_box {
                    kinds.push(2); // explicit move
                    kinds.push(3); // implicit move (non-empty source)
                }
            }
            BoxesVariant::Advanced => {
                if multi_box {
                    kinds.push(3); // implicit move; empty source allowed
                }
            }
        }
        if kinds.is_empty() {
            return Err(DatasetError::Generation(format!(
                "no legal operation at step {i}"
            )));
        }

        let max_batch = match cfg.variant {
            BoxesVariant::Default => 2,
            BoxesVariant::Advanced => 1,
        };
        let pick_items = |set: &BTreeSet<String>, rng: &mut Rng| -> Vec<String> {
            let mut items = sorted(set);
            rng.shuffle(&mut items);
            let k = 1 + rng.below(max_batch.min(items.len()));
            let mut chosen: Vec<String> = items.into_iter().take(k).collect();
            chosen.sort();
            chosen
        };

        let op = match *rng.choose(&kinds) {
            0 => {
                let k = 1 + rng.below(max_batch.min(reserve.len()));
                let mut idx: Vec<usize> = (0..reserve.len()).collect();
                rng.shuffle(&mut idx);
                let mut items: Vec<String> =
                    idx.into_iter().take(k).map(|j| reserve[j].clone()).collect();
                items.sort();
                BoxOp::Put { items, target: *rng.choose(&labels) }
            }
            1 => {
                let source = *rng.choose(&non_empty);
                let items = pick_items(state.contents(source).unwrap(), rng);
                BoxOp::Remove { items, source }
            }
            2 => {
                let source = *rng.choose(&non_empty);
                let items = pick_items(state.contents(source).unwrap(), rng);
                let others: Vec<char> =
                    labels.iter().copied().filter(|&l| l != source).collect();
                BoxOp::MoveItems { items, source, target: *rng.choose(&others) }
            }
            _ => {
                let source = match cfg.variant {
                    BoxesVariant::Default => *rng.choose(&non_empty),
                    BoxesVariant::Advanced => *rng.choose(&labels),
                };
                let others: Vec<char> =
                    labels.iter().copied().filter(|&l| l != source).collect();
                BoxOp::MoveContents { source, target: *rng.choose(&others) }
            }
        };
        apply_op(&mut state, &op, i)
            .map_err(|e| DatasetError::Generation(e.to_string()))?;
        ops.push(op);
    }

    debug_assert!(state.items_unique());

    let mut prompt_text = render_initial(&initial, &order);
    for op in &ops {
        prompt_text.push(' ');
        prompt_text.push_str(&render_op(op));
    }
    let answer_text = render_answer(&state);
    Ok(BoxesSample {
        prompt_text,
        answer_text,
        initial,
        ops,
        final_state: state,
    })
}

/// Item-dependency graph of a trace. Nodes are item-location versions in
/// creation order. Put / Remove / explicit Move sentences name their items,
/// so the resulting location is stated outright and starts a fresh node.
/// An implicit contents-move never names items: whether item X landed in
/// the target can only be computed from X's previous location, so every
/// item currently in play gains a new version depending on its old one.
/// Chain depth therefore counts the implicit moves an item's location must
/// be threaded through — the quantity that separates the advanced variant
/// from the default one.
pub fn boxes_item_dependency_graph(initial: &WorldState, ops: &[BoxOp]) -> ComputationGraph {
    let mut current: BTreeMap<String, usize> = BTreeMap::new();
    let mut next = 0usize;
    let mut edges: Vec<(usize, usize)> = Vec::new();
    for label in initial.labels() {
        for item in initial.contents(label).unwrap() {
            current.insert(item.clone(), next);
            next += 1;
        }
    }
    for op in ops {
        match op {
            BoxOp::Put { items, .. } | BoxOp::MoveItems { items, .. } => {
                for it in items {
                    current.insert(it.clone(), next);
                    next += 1;
                }
            }
            BoxOp::Remove { items, .. } => {
                for it in items {
                    current.remove(it);
                }
            }
            BoxOp::MoveContents { .. } => {
                let live: Vec<String> = current.keys().cloned().collect();
                for it in live {
                    let prev = current[&it];
                    edges.push((prev, next));
                    current.insert(it, next);
                    next += 1;
                }
            }
        }
    }
    ComputationGraph::new(next, edges).expect("dependency edges always point forward")
}

// ── tokenization ──────────────────────────────────────────────────────────

/// Fixed word-level vocabulary: specials, punctuation, template words,
/// digits, box labels, then nouns. Sized to 128 for the default variant and
/// 132 for the advanced one (at their canonical box counts).
#[derive(Debug, Clone)]
pub struct BoxesVocab {
    tokens: Vec<String>,
    index: std::collections::HashMap<String, usize>,
}

pub const ANSWER_START: &str = "<ans>";
pub const STOP: &str = "<eos>";

const TEMPLATE_WORDS: &[&str] = &[
    "the", "The", "there", "There", "is", "are", "in", "into", "from", "to", "of", "and",
    "nothing", "contents", "contains", "empty", "Box", "Put", "Remove", "Move",
];

impl BoxesVocab {
    pub fn build(cfg: &BoxesConfig) -> Self {
        let mut tokens: Vec<String> = vec![ANSWER_START.to_string(), STOP.to_string()];
        tokens.push(",".into());
        tokens.push(".".into());
        tokens.extend(TEMPLATE_WORDS.iter().map(|s| s.to_string()));
        tokens.extend((0..10u32).map(|d| d.to_string()));
        let canonical_labels = match cfg.variant {
            BoxesVariant::Default => 7,
            BoxesVariant::Advanced => 8,
        };
        let n_labels = cfg.n_boxes.max(canonical_labels);
        tokens.extend((0..n_labels).map(|i| ((b'A' + i as u8) as char).to_string()));
        tokens.extend(cfg.item_vocab.iter().cloned());
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        BoxesVocab { tokens, index }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn answer_start_id(&self) -> usize {
        self.index[ANSWER_START]
    }

    pub fn stop_id(&self) -> usize {
        self.index[STOP]
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Word-level split: alphanumeric runs are words, ',' and '.' stand
    /// alone. Unknown words are an error naming the word.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>, DatasetError> {
        let mut ids = Vec::new();
        let mut word = String::new();
        let flush = |word: &mut String, ids: &mut Vec<usize>| -> Result<(), DatasetError> {
            if !word.is_empty() {
                let id = self.index.get(word.as_str()).copied().ok_or_else(|| {
                    DatasetError::Generation(format!("word '{word}' not in vocabulary"))
                })?;
                ids.push(id);
                word.clear();
            }
            Ok(())
        };
        for c in text.chars() {
            match c {
                ' ' => flush(&mut word, &mut ids)?,
                ',' | '.' => {
                    flush(&mut word, &mut ids)?;
                    ids.push(self.index[&c.to_string()]);
                }
                _ => word.push(c),
            }
        }
        flush(&mut word, &mut ids)?;
        Ok(ids)
    }

    /// Inverse of `tokenize` over the template language: spaces between
    /// words, none before punctuation.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            let tok = &self.tokens[id];
            if tok == "," || tok == "." {
                out.push_str(tok);
            } else {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(tok);
            }
        }
        out
    }

    /// Full training sequence: prompt ⧺ <ans> ⧺ answer ⧺ <eos>, plus the
    /// index of the first answer token.
    pub fn encode_sample(&self, sample: &BoxesSample) -> Result<(Vec<usize>, usize), DatasetError> {
        let mut ids = self.tokenize(&sample.prompt_text)?;
        ids.push(self.answer_start_id());
        let answer_offset = ids.len();
        ids.extend(self.tokenize(&sample.answer_text)?);
        ids.push(self.stop_id());
        Ok((ids, answer_offset))
    }
}

// ── training stream ───────────────────────────────────────────────────────

/// Deterministic stream of encoded boxes samples for next-token training.
#[derive(Debug, Clone)]
pub struct BoxesStream {
    cfg: BoxesConfig,
    vocab: BoxesVocab,
}

impl BoxesStream {
    pub fn new(cfg: BoxesConfig) -> Self {
        let vocab = BoxesVocab::build(&cfg);
        BoxesStream { cfg, vocab }
    }

    pub fn vocab(&self) -> &BoxesVocab {
        &self.vocab
    }

    pub fn cfg(&self) -> &BoxesConfig {
        &self.cfg
    }

    pub fn raw_sample(&self, index: u64) -> BoxesSample {
        let mut rng = Rng::for_sample(self.cfg.seed, index);
        gen_boxes_sample(&self.cfg, &mut rng).expect("generation cannot stall with items in reserve")
    }

    /// Prompt/answer pair for exact-match evaluation.
    pub fn generation_case(&self, index: u64) -> GenerationCase {
        let sample = self.raw_sample(index);
        let (ids, answer_offset) = self.vocab.encode_sample(&sample).expect("in-vocab by construction");
        GenerationCase {
            prompt: ids[..answer_offset].to_vec(),
            answer: ids[answer_offset..ids.len() - 1].to_vec(),
            stop_token: self.vocab.stop_id(),
        }
    }

    /// Longest full sequence across the first `probe` samples (cheap upper
    /// bound used to size positional tables).
    pub fn max_len_estimate(&self, probe: u64) -> usize {
        (0..probe)
            .map(|i| {
                let s = self.raw_sample(i);
                self.vocab.encode_sample(&s).map(|(ids, _)| ids.len()).unwrap_or(0)
            })
            .max()
            .unwrap_or(0)
    }
}

impl SampleSource for BoxesStream {
    fn sample(&self, index: u64) -> Sample {
        let raw = self.raw_sample(index);
        let (ids, answer_offset) = self.vocab.encode_sample(&raw).expect("in-vocab by construction");
        // next-token pairs; loss only where the prediction target is part
        // of the answer (or the stop token)
        let len = ids.len();
        let tokens = ids[..len - 1].to_vec();
        let targets = ids[1..].to_vec();
        let loss_mask = (0..len - 1).map(|i| i + 1 >= answer_offset).collect();
        Sample { tokens, targets, loss_mask }
    }

    fn vocab_size(&self) -> usize {
        self.vocab.size()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TABLE_DEFAULT_PROMPT: &str = "The radio is in Box D, the bone and the clock and the television are in Box C, the bill and the computer and the tea are in Box B, there is nothing in Box E, the ice and the plant are in Box A, the game is in Box G, there is nothing in Box F. Move the computer and the tea from Box B to Box E. Put the milk into Box A. Put the cake into Box B. Remove the computer from Box E. Move the bone and the television from Box C to Box E. Remove the radio from Box D. Remove the bill from Box B. Remove the cake from Box B. Move the contents of Box E to Box F. Put the drug and the map into Box D. Move the contents of Box G to Box D. Move the tea from Box F to Box C. Move the tea from Box C to Box B. Move the ice from Box A to Box G. Remove the tea from Box B. Move the map from Box D to Box A. Move the drug from Box D to Box E. Move the contents of Box G to Box D. Move the contents of Box E to Box D. Remove the game and the ice from Box D. Put the cake into Box G. Put the disk into Box F. Remove the clock from Box C. Remove the drug from Box D. Remove the bone from Box F. Put the bell into Box E. Put the stone into Box F. Move the contents of Box G to Box C. Move the stone and the television from Box F to Box B. Put the magazine into Box G. Remove the disk from Box F. Remove the television from Box B.";

    const TABLE_DEFAULT_ANSWER: &str = "Box A contains the map and the milk and the plant, Box B contains the stone, Box C contains the cake, Box D is empty, Box E contains the bell, Box F is empty, Box G contains the magazine.";

    const TABLE_ADVANCED_PROMPT: &str = "The television is in Box A, the cigarette is in Box B, the machine is in Box C, the cream is in Box H. Move the contents of Box B to Box F. Move the contents of Box F to Box E. Put the sheet into Box C. Remove the sheet from Box C. Put the coat into Box A. Remove the coat from Box A. Move the contents of Box H to Box F. Move the contents of Box E to Box G. Move the contents of Box G to Box E. Move the contents of Box A to Box D. Move the contents of Box D to Box G. Move the contents of Box C to Box D. Move the contents of Box G to Box C.";

    const TABLE_ADVANCED_ANSWER_STATE: &[(&str, &[&str])] = &[
        ("C", &["television"]),
        ("D", &["machine"]),
        ("E", &["cigarette"]),
        ("F", &["cream"]),
    ];

    #[test]
    fn default_prompt_replay_reproduces_printed_answer() {
        let (initial, ops) = parse_prompt(TABLE_DEFAULT_PROMPT).unwrap();
        let final_state = boxes_oracle(&initial, &ops).unwrap();
        assert_eq!(render_answer(&final_state), TABLE_DEFAULT_ANSWER);
    }

    #[test]
    fn advanced_prompt_replay_reproduces_printed_answer() {
        let (initial, ops) = parse_prompt(TABLE_ADVANCED_PROMPT).unwrap();
        let final_state = boxes_oracle(&initial, &ops).unwrap();
        for (label, want) in TABLE_ADVANCED_ANSWER_STATE {
            let label = label.chars().next().unwrap();
            let got = final_state.contents(label).unwrap();
            let want: BTreeSet<String> = want.iter().map(|s| s.to_string()).collect();
            assert_eq!(got, &want, "Box {label}");
        }
        // the remaining described boxes end empty
        for label in ['A', 'B', 'G', 'H'] {
            assert!(final_state.contents(label).unwrap().is_empty(), "Box {label}");
        }
    }

    #[test]
    fn oracle_move_of_empty_box_is_noop_on_contents() {
        let mut state = WorldState::empty(&['A', 'B']);
        state.insert('B', "coin");
        let out = boxes_oracle(
            &state,
            &[BoxOp::MoveContents { source: 'A', target: 'B' }],
        )
        .unwrap();
        assert_eq!(out, state);
    }

    #[test]
    fn oracle_put_then_remove_is_identity() {
        let mut state = WorldState::empty(&['A', 'B']);
        state.insert('A', "coin");
        let ops = [
            BoxOp::Put { items: vec!["hat".into()], target: 'B' },
            BoxOp::Remove { items: vec!["hat".into()], source: 'B' },
        ];
        assert_eq!(boxes_oracle(&state, &ops).unwrap(), state);
    }

    #[test]
    fn oracle_reports_offending_op_index() {
        let state = WorldState::empty(&['A', 'B']);
        let ops = [
            BoxOp::Put { items: vec!["hat".into()], target: 'A' },
            BoxOp::Remove { items: vec!["coin".into()], source: 'A' },
        ];
        match boxes_oracle(&state, &ops) {
            Err(TraceError { op_index, .. }) => assert_eq!(op_index, 1),
            other => panic!("expected trace error, got {other:?}"),
        }
    }

    /// Independently-written fold-based simulator; the dual-implementation
    /// oracle for random traces. Tracks item -> location instead of
    /// box -> items.
    fn fold_simulator(initial: &WorldState, ops: &[BoxOp]) -> Result<WorldState, String> {
        use std::collections::HashMap;
        let labels = initial.labels();
        let mut loc: HashMap<String, char> = HashMap::new();
        for &l in &labels {
            for item in initial.contents(l).unwrap() {
                loc.insert(item.clone(), l);
            }
        }
        for op in ops {
            match op {
                BoxOp::Put { items, target } => {
                    for it in items {
                        loc.insert(it.clone(), *target);
                    }
                }
                BoxOp::Remove { items, source } => {
                    for it in items {
                        if loc.get(it) != Some(source) {
                            return Err(format!("{it} not in {source}"));
                        }
                        loc.remove(it);
                    }
                }
                BoxOp::MoveItems { items, source, target } => {
                    for it in items {
                        if loc.get(it) != Some(source) {
                            return Err(format!("{it} not in {source}"));
                        }
                        loc.insert(it.clone(), *target);
                    }
                }
                BoxOp::MoveContents { source, target } => {
                    let moving: Vec<String> = loc
                        .iter()
                        .filter(|(_, &l)| l == *source)
                        .map(|(k, _)| k.clone())
                        .collect();
                    for it in moving {
                        loc.insert(it, *target);
                    }
                }
            }
        }
        let mut state = WorldState::empty(&labels);
        for (item, l) in loc {
            state.insert(l, &item);
        }
        Ok(state)
    }

    #[test]
    fn oracle_agrees_with_independent_fold_simulator() {
        for variant in [BoxesVariant::Default, BoxesVariant::Advanced] {
            let mut cfg = match variant {
                BoxesVariant::Default => BoxesConfig::default_variant(1234),
                BoxesVariant::Advanced => BoxesConfig::advanced(1234),
            };
            cfg.ops = OpsCount::Fixed(20);
            for i in 0..500u64 {
                let mut rng = Rng::for_sample(cfg.seed, i);
                let s = gen_boxes_sample(&cfg, &mut rng).unwrap();
                let oracle = boxes_oracle(&s.initial, &s.ops).unwrap();
                let folded = fold_simulator(&s.initial, &s.ops).unwrap();
                assert_eq!(oracle, folded, "{variant:?} sample {i}");
                assert_eq!(oracle, s.final_state);
            }
        }
    }

    #[test]
    fn zero_ops_answer_is_rendered_initial_state() {
        let mut cfg = BoxesConfig::default_variant(9);
        cfg.ops = OpsCount::Fixed(0);
        let mut rng = Rng::new(9);
        let s = gen_boxes_sample(&cfg, &mut rng).unwrap();
        assert_eq!(s.answer_text, render_answer(&s.initial));
    }

    #[test]
    fn generated_prompts_parse_back_exactly() {
        let cfg = BoxesConfig::advanced_desk(31);
        for i in 0..50u64 {
            let mut rng = Rng::for_sample(cfg.seed, i);
            let s = gen_boxes_sample(&cfg, &mut rng).unwrap();
            let (initial, ops) = parse_prompt(&s.prompt_text).unwrap();
            assert_eq!(initial, s.initial, "sample {i}");
            assert_eq!(ops, s.ops, "sample {i}");
            let answer_state = parse_answer(&s.answer_text).unwrap();
            assert_eq!(answer_state, s.final_state, "sample {i}");
        }
    }

    #[test]
    fn advanced_fills_exactly_half() {
        let cfg = BoxesConfig::advanced(3);
        for i in 0..20u64 {
            let mut rng = Rng::for_sample(3, i);
            let s = gen_boxes_sample(&cfg, &mut rng).unwrap();
            assert_eq!(s.initial.non_empty_labels().len(), 4);
            for l in s.initial.non_empty_labels() {
                assert_eq!(s.initial.contents(l).unwrap().len(), 1);
            }
        }
    }

    #[test]
    fn vocab_sizes_match_canonical_counts() {
        let default = BoxesVocab::build(&BoxesConfig::default_variant(0));
        assert_eq!(default.size(), 128);
        let advanced = BoxesVocab::build(&BoxesConfig::advanced(0));
        assert_eq!(advanced.size(), 132);
        // desk-sized advanced keeps the full advanced vocabulary
        let desk = BoxesVocab::build(&BoxesConfig::advanced_desk(0));
        assert!(desk.size() <= 132);
    }

    #[test]
    fn tokenize_round_trips_generated_samples() {
        let cfg = BoxesConfig::advanced_desk(77);
        let vocab = BoxesVocab::build(&cfg);
        for i in 0..30u64 {
            let mut rng = Rng::for_sample(cfg.seed, i);
            let s = gen_boxes_sample(&cfg, &mut rng).unwrap();
            for text in [&s.prompt_text, &s.answer_text] {
                let ids = vocab.tokenize(text).unwrap();
                assert_eq!(&vocab.detokenize(&ids), text);
            }
        }
    }

    #[test]
    fn tokenize_rejects_unknown_word() {
        let vocab = BoxesVocab::build(&BoxesConfig::default_variant(0));
        match vocab.tokenize("Put the zeppelin into Box A.") {
            Err(DatasetError::Generation(msg)) => assert!(msg.contains("zeppelin")),
            other => panic!("expected OOV error, got {other:?}"),
        }
    }

    #[test]
    fn stop_token_appears_exactly_once_per_encoding() {
        let stream = BoxesStream::new(BoxesConfig::advanced_desk(5));
        for i in 0..20u64 {
            let s = stream.raw_sample(i);
            let (ids, offset) = stream.vocab().encode_sample(&s).unwrap();
            let stops = ids.iter().filter(|&&t| t == stream.vocab().stop_id()).count();
            assert_eq!(stops, 1);
            assert_eq!(ids[ids.len() - 1], stream.vocab().stop_id());
            assert_eq!(ids[offset - 1], stream.vocab().answer_start_id());
        }
    }

    #[test]
    fn lm_sample_masks_prompt_and_keeps_answer() {
        let stream = BoxesStream::new(BoxesConfig::advanced_desk(5));
        let case = stream.generation_case(0);
        let sample = stream.sample(0);
        let masked: usize = sample.loss_mask.iter().filter(|&&m| m).count();
        // answer tokens plus the stop token are predicted
        assert_eq!(masked, case.answer.len() + 1);
        // the position holding <ans> predicts the first answer token
        let ans_pos = case.prompt.len() - 1;
        assert!(sample.loss_mask[ans_pos]);
        assert!(!sample.loss_mask[ans_pos - 1]);
        assert_eq!(sample.targets[ans_pos], case.answer[0]);
    }

    #[test]
    fn dependency_graph_depth_advanced_exceeds_default_at_matched_ops() {
        let ops_count = 12;
        let mut total_default = 0usize;
        let mut total_advanced = 0usize;
        let n = 1000u64;
        let mut d_cfg = BoxesConfig::default_variant(101);
        d_cfg.ops = OpsCount::Fixed(ops_count);
        let mut a_cfg = BoxesConfig::advanced(101);
        a_cfg.ops = OpsCount::Fixed(ops_count);
        for i in 0..n {
            let mut rng = Rng::for_sample(101, i);
            let ds = gen_boxes_sample(&d_cfg, &mut rng).unwrap();
            total_default += boxes_item_dependency_graph(&ds.initial, &ds.ops).depth();
            let mut rng = Rng::for_sample(202, i);
            let as_ = gen_boxes_sample(&a_cfg, &mut rng).unwrap();
            total_advanced += boxes_item_dependency_graph(&as_.initial, &as_.ops).depth();
        }
        assert!(
            total_advanced > total_default,
            "advanced mean depth {} <= default mean depth {}",
            total_advanced as f64 / n as f64,
            total_default as f64 / n as f64
        );
    }

    #[test]
    fn table_prompts_tokenize_within_fixed_vocab() {
        let d_vocab = BoxesVocab::build(&BoxesConfig::default_variant(0));
        assert!(d_vocab.tokenize(TABLE_DEFAULT_PROMPT).is_ok());
        assert!(d_vocab.tokenize(TABLE_DEFAULT_ANSWER).is_ok());
        let a_vocab = BoxesVocab::build(&BoxesConfig::advanced(0));
        assert!(a_vocab.tokenize(TABLE_ADVANCED_PROMPT).is_ok());
    }
}
