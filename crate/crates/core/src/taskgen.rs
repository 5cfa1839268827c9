//! Synthetic image/question/answer demonstrations.
//!
//! "Images" are blocks of tokens from a dedicated region of the vocabulary.
//! Each task instance (an episode) draws fresh class patterns and a fresh
//! class-to-label assignment, so the only way to answer a query is to read
//! the demonstrations in context.

use std::io::{BufRead, Write};
use std::ops::Range;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::distr::Distribution;
use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kvmem::TokenRole;
use crate::model::train::TrainExample;

pub const PAD: u32 = 0;
pub const SYSTEM_TOKENS: [u32; 2] = [1, 2];
pub const ANSWER_END: u32 = 3;
const QUESTION_BASE: u32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    SyntheticClassification,
    AssociativeRecall,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Classes per episode (keys for associative recall).
    pub num_classes: usize,
    pub image_vocab: usize,
    pub label_vocab: usize,
    pub image_len: usize,
    pub question_len: usize,
    /// 1 (label) or 2 (label followed by an end marker).
    pub answer_len: usize,
    /// Probability of replacing each image token by a uniform image token.
    pub noise: f64,
    /// Class c is drawn with weight (c + 1)^-class_skew; 0 is uniform.
    pub class_skew: f64,
    /// Demonstrations per training sequence, inclusive range.
    pub train_demos_min: usize,
    pub train_demos_max: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::SyntheticClassification,
            num_classes: 8,
            image_vocab: 32,
            label_vocab: 16,
            image_len: 16,
            question_len: 4,
            answer_len: 1,
            noise: 0.2,
            class_skew: 1.0,
            train_demos_min: 2,
            train_demos_max: 24,
            seed: 0,
        }
    }
}

/// Token-id regions derived from a [`TaskSpec`]. Regions are disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabLayout {
    pub question: u32,
    pub image: u32,
    pub label: u32,
    pub size: usize,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Task(m));
        if self.num_classes == 0 || self.image_len == 0 || self.question_len == 0 {
            return bad("num_classes, image_len and question_len must be positive".into());
        }
        if !(1..=2).contains(&self.answer_len) {
            return bad(format!("answer_len must be 1 or 2, got {}", self.answer_len));
        }
        if self.num_classes > self.label_vocab {
            return bad(format!(
                "{} classes exceed the label region of {} tokens",
                self.num_classes, self.label_vocab
            ));
        }
        if self.image_vocab == 0 {
            return bad("image_vocab must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return bad(format!("noise must lie in [0, 1], got {}", self.noise));
        }
        if !(self.class_skew >= 0.0 && self.class_skew.is_finite()) {
            return bad(format!("class_skew must be finite and >= 0, got {}", self.class_skew));
        }
        if self.train_demos_min < 2 || self.train_demos_min > self.train_demos_max {
            return bad("train demo range must satisfy 2 <= min <= max".into());
        }
        Ok(())
    }

    pub fn layout(&self) -> VocabLayout {
        let question = QUESTION_BASE;
        let image = question + self.question_len as u32;
        let label = image + self.image_vocab as u32;
        VocabLayout {
            question,
            image,
            label,
            size: (label as usize) + self.label_vocab,
        }
    }

    /// Tokens per demonstration.
    pub fn demo_len(&self) -> usize {
        self.image_len + self.question_len + self.answer_len
    }

    pub fn class_weights(&self) -> Vec<f64> {
        (0..self.num_classes).map(|c| ((c + 1) as f64).powf(-self.class_skew)).collect()
    }

    pub fn question_tokens(&self) -> Vec<u32> {
        let q = self.layout().question;
        (0..self.question_len as u32).map(|i| q + i).collect()
    }
}

/// One ⟨image, question, answer⟩ example, laid out as question, image, answer
/// so that the class evidence directly precedes the answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demonstration {
    pub image: Vec<u32>,
    pub question: Vec<u32>,
    pub answer: Vec<u32>,
    /// Gold class (or key) id within the episode.
    pub class: usize,
}

impl Demonstration {
    pub fn len(&self) -> usize {
        self.image.len() + self.question.len() + self.answer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tokens(&self) -> Vec<u32> {
        [&self.question[..], &self.image, &self.answer].concat()
    }

    /// Question and image only: the query form used at inference.
    pub fn query_tokens(&self) -> Vec<u32> {
        [&self.question[..], &self.image].concat()
    }

    pub fn roles(&self) -> Vec<TokenRole> {
        let mut roles = vec![TokenRole::Question; self.question.len()];
        roles.extend(std::iter::repeat_n(TokenRole::Image, self.image.len()));
        roles.extend(std::iter::repeat_n(TokenRole::Answer, self.answer.len()));
        roles
    }

    pub fn spans_at(&self, offset: usize) -> DemoSpans {
        let q = offset + self.question.len();
        let i = q + self.image.len();
        DemoSpans {
            question: offset..q,
            image: q..i,
            answer: i..i + self.answer.len(),
        }
    }

    /// Positions (within the demo) whose logits predict each answer token.
    pub fn answer_predictors(&self) -> Range<usize> {
        let start = self.image.len() + self.question.len();
        start - 1..start - 1 + self.answer.len()
    }
}

/// Class patterns and labels of one task instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub patterns: Vec<Vec<u32>>,
    pub labels: Vec<u32>,
}

impl Episode {
    pub fn sample(spec: &TaskSpec, rng: &mut impl Rng) -> Self {
        let layout = spec.layout();
        let image_ids: Vec<u32> = (0..spec.image_vocab as u32).map(|i| layout.image + i).collect();
        // Tokens are dealt without replacement, so patterns only share tokens
        // when the image region is too small to hold all of them.
        let mut pool = image_ids;
        pool.shuffle(rng);
        let patterns = (0..spec.num_classes)
            .map(|c| (0..spec.image_len).map(|j| pool[(c * spec.image_len + j) % pool.len()]).collect())
            .collect();
        let label_ids: Vec<u32> = (0..spec.label_vocab as u32).map(|i| layout.label + i).collect();
        let labels = match spec.kind {
            TaskKind::SyntheticClassification => label_ids.choose_multiple(rng, spec.num_classes).copied().collect(),
            TaskKind::AssociativeRecall => (0..spec.num_classes)
                .map(|_| *label_ids.choose(rng).expect("non-empty"))
                .collect(),
        };
        Self { patterns, labels }
    }

    /// Draws a class id under the skewed class prior.
    pub fn draw_class(spec: &TaskSpec, rng: &mut impl Rng) -> usize {
        WeightedIndex::new(spec.class_weights()).expect("positive weights").sample(rng)
    }

    pub fn demo(&self, spec: &TaskSpec, class: usize, rng: &mut impl Rng) -> Demonstration {
        let layout = spec.layout();
        let noise = match spec.kind {
            TaskKind::SyntheticClassification => spec.noise,
            TaskKind::AssociativeRecall => 0.0,
        };
        let image = self.patterns[class]
            .iter()
            .map(|&t| {
                if noise > 0.0 && rng.random_bool(noise) {
                    layout.image + rng.random_range(0..spec.image_vocab as u32)
                } else {
                    t
                }
            })
            .collect();
        let mut answer = vec![self.labels[class]];
        if spec.answer_len == 2 {
            answer.push(ANSWER_END);
        }
        Demonstration {
            image,
            question: spec.question_tokens(),
            answer,
            class,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemoSpans {
    pub image: Range<usize>,
    pub question: Range<usize>,
    pub answer: Range<usize>,
}

impl DemoSpans {
    pub fn len(&self) -> usize {
        self.answer.end - self.question.start
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PromptLayout {
    /// Tokens placed once at the start of the context.
    pub system: Vec<u32>,
}

impl PromptLayout {
    pub fn standard() -> Self {
        Self {
            system: SYSTEM_TOKENS.to_vec(),
        }
    }

    pub fn bare() -> Self {
        Self::default()
    }
}

/// A concatenated context with role tags and per-demo spans.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Context {
    pub tokens: Vec<u32>,
    pub roles: Vec<TokenRole>,
    pub system: Range<usize>,
    pub spans: Vec<DemoSpans>,
}

pub fn assemble_context(demos: &[Demonstration], layout: &PromptLayout) -> Context {
    let mut tokens = layout.system.clone();
    let mut roles = vec![TokenRole::System; tokens.len()];
    let system = 0..tokens.len();
    let mut spans = Vec::with_capacity(demos.len());
    for demo in demos {
        spans.push(demo.spans_at(tokens.len()));
        tokens.extend(demo.tokens());
        roles.extend(demo.roles());
    }
    Context {
        tokens,
        roles,
        system,
        spans,
    }
}

/// Training sequences, compression demonstrations and evaluation queries.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub train: Vec<TrainExample>,
    pub demos: Vec<Demonstration>,
    pub eval: Vec<Demonstration>,
    pub episode: Episode,
}

fn train_example(spec: &TaskSpec, rng: &mut impl Rng) -> TrainExample {
    let episode = Episode::sample(spec, rng);
    let n = rng.random_range(spec.train_demos_min..=spec.train_demos_max);
    let mut demos: Vec<Demonstration> = (0..n)
        .map(|_| episode.demo(spec, Episode::draw_class(spec, rng), rng))
        .collect();
    let mut classes: Vec<usize> = demos.iter().map(|d| d.class).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() == demos.len() {
        let last = demos.len() - 1;
        demos[last] = episode.demo(spec, demos[0].class, rng);
    }
    let ctx = assemble_context(&demos, &PromptLayout::standard());
    // Only repeats of an already shown class are predictable; for those the
    // image continuation is trained alongside the answer.
    let mut seen = vec![false; spec.num_classes];
    let loss_positions = ctx
        .spans
        .iter()
        .zip(&demos)
        .flat_map(|(s, d)| {
            let repeat = std::mem::replace(&mut seen[d.class], true);
            if repeat { s.image.start..s.answer.end - 1 } else { 0..0 }
        })
        .collect();
    TrainExample {
        tokens: ctx.tokens,
        loss_positions,
    }
}

/// Generates `n_train` training sequences (each from its own episode) and a
/// demo/eval partition of `n_demo + n_eval` instances of one episode.
pub fn generate(spec: &TaskSpec, n_train: usize, n_demo: usize, n_eval: usize) -> Result<TaskData> {
    spec.validate()?;
    if n_train == 0 && n_demo == 0 && n_eval == 0 {
        return Err(Error::Task("at least one split must be non-empty".into()));
    }
    let mut train_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    train_rng.set_stream(1);
    let train = (0..n_train).map(|_| train_example(spec, &mut train_rng)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(2);
    let episode = Episode::sample(spec, &mut rng);
    let demos: Vec<Demonstration> = (0..n_demo)
        .map(|_| episode.demo(spec, Episode::draw_class(spec, &mut rng), &mut rng))
        .collect();
    let eval = match spec.kind {
        TaskKind::SyntheticClassification => (0..n_eval)
            .map(|_| episode.demo(spec, Episode::draw_class(spec, &mut rng), &mut rng))
            .collect(),
        TaskKind::AssociativeRecall => {
            let mut present: Vec<usize> = demos.iter().map(|d| d.class).collect();
            present.sort_unstable();
            present.dedup();
            if present.is_empty() {
                present = (0..spec.num_classes).collect();
            }
            (0..n_eval)
                .map(|_| {
                    let class = *present.choose(&mut rng).expect("non-empty");
                    episode.demo(spec, class, &mut rng)
                })
                .collect()
        }
    };
    Ok(TaskData {
        spec: spec.clone(),
        train,
        demos,
        eval,
        episode,
    })
}

pub const DATASET_FORMAT: &str = "ctxcompress-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    format: String,
    version: u32,
    spec: TaskSpec,
    episode: Episode,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "split", rename_all = "snake_case")]
enum Record {
    Train {
        tokens: Vec<u32>,
        loss_positions: Vec<usize>,
    },
    Demo(DemoRecord),
    Eval(DemoRecord),
}

#[derive(Serialize, Deserialize)]
struct DemoRecord {
    tokens: Vec<u32>,
    image: Range<usize>,
    question: Range<usize>,
    answer: Range<usize>,
    class: usize,
}

impl DemoRecord {
    fn from_demo(d: &Demonstration) -> Self {
        let spans = d.spans_at(0);
        Self {
            tokens: d.tokens(),
            image: spans.image,
            question: spans.question,
            answer: spans.answer,
            class: d.class,
        }
    }

    fn into_demo(self) -> Result<Demonstration> {
        let n = self.tokens.len();
        if self.question.start != 0
            || self.question.end != self.image.start
            || self.image.end != self.answer.start
            || self.answer.end != n
            || self.answer.is_empty()
        {
            return Err(Error::Format("demo spans do not tile the token array".into()));
        }
        Ok(Demonstration {
            image: self.tokens[self.image].to_vec(),
            question: self.tokens[self.question].to_vec(),
            answer: self.tokens[self.answer].to_vec(),
            class: self.class,
        })
    }
}

/// Writes the dataset as JSON lines: one header line, then one record per line.
pub fn write_dataset(data: &TaskData, mut out: impl Write) -> Result<()> {
    let header = DatasetHeader {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        spec: data.spec.clone(),
        episode: data.episode.clone(),
    };
    writeln!(out, "{}", serde_json::to_string(&header)?)?;
    for ex in &data.train {
        let rec = Record::Train {
            tokens: ex.tokens.clone(),
            loss_positions: ex.loss_positions.clone(),
        };
        writeln!(out, "{}", serde_json::to_string(&rec)?)?;
    }
    for d in &data.demos {
        writeln!(out, "{}", serde_json::to_string(&Record::Demo(DemoRecord::from_demo(d)))?)?;
    }
    for d in &data.eval {
        writeln!(out, "{}", serde_json::to_string(&Record::Eval(DemoRecord::from_demo(d)))?)?;
    }
    Ok(())
}

pub fn read_dataset(input: impl BufRead) -> Result<TaskData> {
    let mut lines = input.lines();
    let header: DatasetHeader = match lines.next() {
        Some(line) => serde_json::from_str(&line?)?,
        None => return Err(Error::Format("empty dataset file".into())),
    };
    if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset {} v{}",
            header.format, header.version
        )));
    }
    let mut data = TaskData {
        spec: header.spec,
        train: Vec::new(),
        demos: Vec::new(),
        eval: Vec::new(),
        episode: header.episode,
    };
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line)? {
            Record::Train { tokens, loss_positions } => data.train.push(TrainExample { tokens, loss_positions }),
            Record::Demo(r) => data.demos.push(r.into_demo()?),
            Record::Eval(r) => data.eval.push(r.into_demo()?),
        }
    }
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_regions_are_disjoint() {
        let spec = TaskSpec::default();
        let l = spec.layout();
        assert!(ANSWER_END < l.question);
        assert_eq!(l.image, l.question + spec.question_len as u32);
        assert_eq!(l.label, l.image + spec.image_vocab as u32);
        assert_eq!(l.size, 4 + 4 + 32 + 16);
    }

    #[test]
    fn rejects_too_many_classes() {
        let spec = TaskSpec {
            num_classes: 20,
            ..TaskSpec::default()
        };
        assert!(matches!(generate(&spec, 1, 1, 1), Err(Error::Task(_))));
    }

    #[test]
    fn same_seed_same_data() {
        let spec = TaskSpec::default();
        assert_eq!(generate(&spec, 3, 5, 5).unwrap(), generate(&spec, 3, 5, 5).unwrap());
        let other = TaskSpec { seed: 1, ..spec.clone() };
        assert_ne!(generate(&spec, 3, 5, 5).unwrap().demos, generate(&other, 3, 5, 5).unwrap().demos);
    }

    #[test]
    fn noiseless_classes_are_separable_by_nearest_pattern() {
        let spec = TaskSpec {
            num_classes: 2,
            noise: 0.0,
            ..TaskSpec::default()
        };
        let data = generate(&spec, 0, 0, 50).unwrap();
        for d in &data.eval {
            let nearest = (0..2)
                .min_by_key(|&c| {
                    data.episode.patterns[c].iter().zip(&d.image).filter(|(a, b)| a != b).count()
                })
                .unwrap();
            assert_eq!(nearest, d.class);
            assert_eq!(d.answer, vec![data.episode.labels[d.class]]);
        }
    }

    #[test]
    fn answers_come_from_label_region() {
        let spec = TaskSpec {
            answer_len: 2,
            ..TaskSpec::default()
        };
        let layout = spec.layout();
        let data = generate(&spec, 2, 10, 10).unwrap();
        for d in data.demos.iter().chain(&data.eval) {
            assert!((layout.label..layout.label + 16).contains(&d.answer[0]));
            assert_eq!(d.answer[1], ANSWER_END);
            assert_eq!(d.len(), spec.demo_len());
            assert!(d.image.iter().all(|t| (layout.image..layout.label).contains(t)));
        }
    }

    #[test]
    fn recall_queries_use_present_keys() {
        let spec = TaskSpec {
            kind: TaskKind::AssociativeRecall,
            num_classes: 12,
            image_len: 2,
            ..TaskSpec::default()
        };
        let data = generate(&spec, 0, 6, 30).unwrap();
        for q in &data.eval {
            let stored = data.demos.iter().find(|d| d.image == q.image).expect("key present");
            assert_eq!(stored.answer, q.answer);
        }
    }

    #[test]
    fn zero_demos_is_system_only() {
        let ctx = assemble_context(&[], &PromptLayout::standard());
        assert_eq!(ctx.tokens, SYSTEM_TOKENS.to_vec());
        assert!(ctx.spans.is_empty());
    }

    #[test]
    fn spans_tile_context_and_slice_back() {
        let spec = TaskSpec::default();
        let data = generate(&spec, 0, 7, 0).unwrap();
        let ctx = assemble_context(&data.demos, &PromptLayout::standard());
        let covered: usize = ctx.system.len() + ctx.spans.iter().map(DemoSpans::len).sum::<usize>();
        assert_eq!(covered, ctx.tokens.len());
        for (span, demo) in ctx.spans.iter().zip(&data.demos) {
            assert_eq!(ctx.tokens[span.image.clone()], demo.image[..]);
            assert_eq!(ctx.tokens[span.question.clone()], demo.question[..]);
            assert_eq!(ctx.tokens[span.answer.clone()], demo.answer[..]);
            assert!(ctx.roles[span.image.clone()].iter().all(|&r| r == TokenRole::Image));
            assert!(ctx.roles[span.answer.clone()].iter().all(|&r| r == TokenRole::Answer));
        }
    }

    #[test]
    fn train_loss_positions_predict_image_or_answer() {
        let spec = TaskSpec::default();
        let data = generate(&spec, 5, 0, 0).unwrap();
        let layout = spec.layout();
        for ex in &data.train {
            assert!(!ex.loss_positions.is_empty());
            let labels = ex.loss_positions.iter().filter(|&&p| ex.tokens[p + 1] >= layout.label).count();
            assert!(labels >= 1);
            for &p in &ex.loss_positions {
                assert!(ex.tokens[p + 1] >= layout.image);
            }
        }
    }

    #[test]
    fn dataset_round_trips_through_jsonl() {
        let data = generate(&TaskSpec::default(), 2, 3, 4).unwrap();
        let mut buf = Vec::new();
        write_dataset(&data, &mut buf).unwrap();
        let back = read_dataset(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(back, data);
    }
}
