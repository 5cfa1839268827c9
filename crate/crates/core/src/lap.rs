//! Layer-wise adaptive pruning of one chunk's KV cache.
//!
//! The chunk's entries are scored by the attention they receive from the
//! observation window (answer tokens by default). Layers are then pruned
//! top-down: each layer tries the retention ratios in ascending order and
//! keeps the first one whose answer distributions stay within `delta` (JS
//! divergence) of the unpruned output. Accepted prunes stay in place while
//! lower layers are searched.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::divergence::{aggregate_js, AnswerDistributions, Reduction};
use crate::error::{Error, Result};
use crate::kvmem::{concat, extract_kv, KvMemory, LayerSelection, TokenRole};
use crate::model::{Capture, ForwardTrace, HeadReduce, TokenBatch, ToyTransformer};
use crate::taskgen::Demonstration;

/// Query positions used to score context tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationWindow {
    #[default]
    Answer,
    QuestionAnswer,
    ImageQuestionAnswer,
}

impl ObservationWindow {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Answer => "answer",
            Self::QuestionAnswer => "question_answer",
            Self::ImageQuestionAnswer => "image_question_answer",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetentionPolicy {
    /// Candidate retention ratios, strictly ascending, ending at 1.0.
    pub ratios: Vec<f64>,
    /// JS divergence threshold per pruning check.
    pub delta: f64,
    /// Consecutive layers sharing one ratio (1 = per layer).
    pub group_size: usize,
    pub window: ObservationWindow,
    /// Keep every answer token of the chunk, on top of the ratio budget.
    pub retain_all_answers: bool,
    pub reduction: Reduction,
    pub heads: HeadReduce,
}

impl Default for RetentionPolicy {
    fn default() -> Self {
        Self {
            ratios: vec![0.1, 0.2, 0.5, 1.0],
            delta: 0.005,
            group_size: 1,
            window: ObservationWindow::Answer,
            retain_all_answers: true,
            reduction: Reduction::Mean,
            heads: HeadReduce::Mean,
        }
    }
}

impl RetentionPolicy {
    /// Retains everything; compression becomes the identity.
    pub fn keep_all() -> Self {
        Self {
            ratios: vec![1.0],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Policy(m));
        if self.ratios.is_empty() {
            return bad("ratio set is empty".into());
        }
        if self.ratios.iter().any(|&r| !(r > 0.0 && r <= 1.0)) {
            return bad(format!("ratios must lie in (0, 1]: {:?}", self.ratios));
        }
        if self.ratios.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("ratios must be strictly ascending: {:?}", self.ratios));
        }
        if *self.ratios.last().expect("non-empty") != 1.0 {
            return bad("the last ratio must be 1.0".into());
        }
        if !(self.delta > 0.0) {
            return bad(format!("delta must be positive, got {}", self.delta));
        }
        if self.group_size == 0 {
            return bad("group_size must be >= 1".into());
        }
        Ok(())
    }
}

/// Per-layer importance of each chunk entry.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceScores {
    pub per_layer: Vec<Vec<f64>>,
}

/// Demonstrations fed as independent batch rows.
pub(crate) fn demo_rows(demos: &[Demonstration]) -> Result<Vec<Vec<u32>>> {
    if demos.is_empty() {
        return Err(Error::Empty("demonstration batch is empty"));
    }
    let len = demos[0].len();
    if demos.iter().any(|d| d.len() != len || d.answer.is_empty()) {
        return Err(Error::Shape("demonstrations must share one length and have answers".into()));
    }
    Ok(demos.iter().map(Demonstration::tokens).collect())
}

/// `(row, position)` of every logit that predicts an answer token.
pub fn answer_index(demos: &[Demonstration]) -> Vec<(usize, usize)> {
    demos
        .iter()
        .enumerate()
        .flat_map(|(r, d)| d.answer_predictors().map(move |p| (r, p)))
        .collect()
}

pub fn answer_distributions(trace: &ForwardTrace, index: &[(usize, usize)]) -> Result<AnswerDistributions> {
    let probs = index.iter().map(|&(r, p)| trace.probs(r, p)).collect();
    AnswerDistributions::new(index.to_vec(), probs)
}

/// Fresh forward of `demos` over `memory`; distributions at answer-predicting positions.
pub fn demo_answer_distributions(
    model: &ToyTransformer,
    memory: &KvMemory,
    demos: &[Demonstration],
) -> Result<AnswerDistributions> {
    let batch = TokenBatch::after(memory, demo_rows(demos)?)?;
    let trace = model.forward(memory, &batch, Capture::none())?;
    answer_distributions(&trace, &answer_index(demos))
}

/// Query positions of the observation window, as `(row, position)`.
pub fn window_indices(demos: &[Demonstration], mode: ObservationWindow) -> Vec<(usize, usize)> {
    demos
        .iter()
        .enumerate()
        .flat_map(|(r, d)| {
            let spans = d.spans_at(0);
            let mut positions: Vec<usize> = spans.answer.collect();
            if mode != ObservationWindow::Answer {
                positions.extend(spans.question);
            }
            if mode == ObservationWindow::ImageQuestionAnswer {
                positions.extend(spans.image);
            }
            positions.sort_unstable();
            positions.into_iter().map(move |p| (r, p))
        })
        .collect()
}

/// Sums, per layer, the attention each chunk column receives from the window.
///
/// `kv_ranges[l]` locates the chunk's columns inside layer `l`'s attention map.
pub fn score_importance(
    trace: &ForwardTrace,
    window: &[(usize, usize)],
    kv_ranges: &[Range<usize>],
) -> Result<ImportanceScores> {
    if window.is_empty() {
        return Err(Error::Empty("observation window is empty"));
    }
    let per_layer = trace
        .attention
        .iter()
        .zip(kv_ranges)
        .map(|(rows, range)| {
            let mut beta = vec![0.0; range.len()];
            if rows.is_empty() {
                return beta;
            }
            for &(r, i) in window {
                let attn = rows[r].row(i);
                for (b, j) in beta.iter_mut().zip(range.clone()) {
                    *b += attn[j];
                }
            }
            beta
        })
        .collect();
    Ok(ImportanceScores { per_layer })
}

/// `floor(ratio * n)` tolerant of representation error (0.29 * 100 -> 29).
pub fn ratio_budget(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64) + 1e-9).floor() as usize
}

/// Forced indices plus the top `max(1, floor(ratio * S))` of the remaining
/// indices by score. Ties go to the earlier index. Output is ascending.
pub fn select_topk(scores: &[f64], layer: usize, ratio: f64, forced: &[usize]) -> LayerSelection {
    let n = scores.len();
    let budget = ratio_budget(ratio, n).max(1);
    let mut is_forced = vec![false; n];
    for &f in forced {
        if f < n {
            is_forced[f] = true;
        }
    }
    let mut candidates: Vec<usize> = (0..n).filter(|&i| !is_forced[i]).collect();
    candidates.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    candidates.truncate(budget);
    candidates.extend((0..n).filter(|&i| is_forced[i]));
    candidates.sort_unstable();
    LayerSelection {
        layer,
        kept_indices: candidates,
    }
}

/// One pruning-checking step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    pub ratio: f64,
    pub retained: usize,
    pub js: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPrune {
    pub layer: usize,
    pub chosen_ratio: f64,
    pub retained: usize,
    pub attempts: Vec<Attempt>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub chunk: u32,
    /// Chunk length S before pruning.
    pub chunk_len: usize,
    pub forced: usize,
    /// Indexed by layer.
    pub layers: Vec<LayerPrune>,
    /// JS of a fresh forward with the returned memory against the unpruned output.
    pub final_js: f64,
}

impl PruneReport {
    pub fn retained_total(&self) -> usize {
        self.layers.iter().map(|l| l.retained).sum()
    }

    pub fn retained_per_layer(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.retained).collect()
    }
}

/// One chunk's tokens with role tags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkInput {
    pub id: u32,
    pub tokens: Vec<u32>,
    pub roles: Vec<TokenRole>,
}

/// Everything computed once per chunk before any pruning decision.
pub(crate) struct ChunkAnalysis {
    pub prev_lens: Vec<usize>,
    pub full: KvMemory,
    pub batch_start: usize,
    pub trace: ForwardTrace,
    pub index: Vec<(usize, usize)>,
    pub p_ori: AnswerDistributions,
    pub scores: ImportanceScores,
    pub answers: Vec<usize>,
}

impl ChunkAnalysis {
    pub fn chunk_len(&self) -> usize {
        self.scores.per_layer.first().map_or(0, Vec::len)
    }

    /// Replaces layer `l`'s chunk entries by the selected subset.
    pub fn apply(&self, memory: &mut KvMemory, selection: &LayerSelection) {
        let l = selection.layer;
        let prev = self.prev_lens[l];
        let mut keep: Vec<usize> = (0..prev).collect();
        keep.extend(selection.kept_indices.iter().map(|&i| prev + i));
        let layer = self.full.layer(l).select(&keep);
        memory.replace_layer(l, layer);
    }

    /// JS between the unpruned output and a resumed forward from `layer`.
    pub fn check(&self, model: &ToyTransformer, memory: &KvMemory, layer: usize, reduction: Reduction) -> Result<f64> {
        let trace = model.forward_from_layer(memory, &self.trace.hidden[layer], layer, self.batch_start, Capture::none())?;
        let p_iter = answer_distributions(&trace, &self.index)?;
        aggregate_js(&self.p_ori, &p_iter, reduction)
    }
}

pub(crate) fn analyze_chunk(
    model: &ToyTransformer,
    memory_prev: &KvMemory,
    chunk: &ChunkInput,
    demos: &[Demonstration],
    window: ObservationWindow,
    heads: HeadReduce,
) -> Result<ChunkAnalysis> {
    if chunk.tokens.is_empty() {
        return Err(Error::Empty("chunk has no tokens"));
    }
    let chunk_kv = extract_kv(model, memory_prev, &chunk.tokens, &chunk.roles, chunk.id)?;
    let full = concat(memory_prev, &chunk_kv)?;
    let batch = TokenBatch::after(&full, demo_rows(demos)?)?;
    let capture = Capture {
        heads,
        ..Capture::attention_and_hidden()
    };
    let trace = model.forward(&full, &batch, capture)?;
    let index = answer_index(demos);
    let p_ori = answer_distributions(&trace, &index)?;
    let prev_lens = memory_prev.layer_lens();
    let s = chunk.tokens.len();
    let kv_ranges: Vec<Range<usize>> = prev_lens.iter().map(|&p| p..p + s).collect();
    let scores = score_importance(&trace, &window_indices(demos, window), &kv_ranges)?;
    let answers = (0..s).filter(|&i| chunk.roles[i] == TokenRole::Answer).collect();
    Ok(ChunkAnalysis {
        prev_lens,
        full,
        batch_start: batch.start(),
        trace,
        index,
        p_ori,
        scores,
        answers,
    })
}

/// Layer groups from the top layer down, e.g. `[[3, 2], [1, 0]]` for size 2.
pub fn layer_groups(num_layers: usize, group_size: usize) -> Vec<Vec<usize>> {
    let top_down: Vec<usize> = (0..num_layers).rev().collect();
    top_down.chunks(group_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Compresses one chunk against the previously compressed memory.
///
/// Returns `memory_prev ⊕ pruned chunk` and a report of every check.
/// `memory_prev` itself is never pruned again.
pub fn lap_compress(
    model: &ToyTransformer,
    memory_prev: &KvMemory,
    chunk: &ChunkInput,
    demos: &[Demonstration],
    policy: &RetentionPolicy,
) -> Result<(KvMemory, PruneReport)> {
    policy.validate()?;
    let analysis = analyze_chunk(model, memory_prev, chunk, demos, policy.window, policy.heads)?;
    let s = analysis.chunk_len();
    let forced: &[usize] = if policy.retain_all_answers { &analysis.answers } else { &[] };
    let num_layers = model.config().num_layers;
    let mut current = analysis.full.clone();
    let mut layers: Vec<Option<LayerPrune>> = vec![None; num_layers];

    for group in layer_groups(num_layers, policy.group_size) {
        let lowest = *group.last().expect("non-empty group");
        let mut attempts = Vec::new();
        let mut accepted = None;
        for &ratio in &policy.ratios {
            let mut candidate = current.clone();
            let mut retained = 0;
            for &l in &group {
                let sel = select_topk(&analysis.scores.per_layer[l], l, ratio, forced);
                retained = sel.kept_indices.len();
                analysis.apply(&mut candidate, &sel);
            }
            let js = analysis.check(model, &candidate, lowest, policy.reduction)?;
            attempts.push(Attempt { ratio, retained, js });
            if js <= policy.delta {
                accepted = Some((ratio, candidate));
                break;
            }
        }
        // Full retention reproduces the previous accepted state; only float
        // noise could reject it, in which case the layer stays unpruned.
        let (ratio, memory) = accepted.unwrap_or((1.0, current.clone()));
        current = memory;
        for &l in &group {
            let retained = current.layer(l).len() - analysis.prev_lens[l];
            layers[l] = Some(LayerPrune {
                layer: l,
                chosen_ratio: ratio,
                retained,
                attempts: attempts.clone(),
            });
        }
    }

    let p_final = demo_answer_distributions(model, &current, demos)?;
    let final_js = aggregate_js(&analysis.p_ori, &p_final, policy.reduction)?;
    let report = PruneReport {
        chunk: chunk.id,
        chunk_len: s,
        forced: forced.len(),
        layers: layers.into_iter().map(|l| l.expect("every layer visited")).collect(),
        final_js,
    };
    Ok((current, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kvmem::KvMemory;
    use crate::model::ModelConfig;
    use crate::taskgen::{assemble_context, generate, PromptLayout, TaskSpec};

    #[test]
    fn policy_validation() {
        assert!(RetentionPolicy::default().validate().is_ok());
        let bad = |ratios: Vec<f64>| RetentionPolicy { ratios, ..RetentionPolicy::default() }.validate().is_err();
        assert!(bad(vec![]));
        assert!(bad(vec![0.5, 0.2, 1.0]));
        assert!(bad(vec![0.2, 0.5]));
        assert!(bad(vec![0.0, 1.0]));
        assert!(RetentionPolicy { delta: 0.0, ..RetentionPolicy::default() }.validate().is_err());
        assert!(RetentionPolicy { group_size: 0, ..RetentionPolicy::default() }.validate().is_err());
    }

    #[test]
    fn topk_full_ratio_keeps_everything() {
        let sel = select_topk(&[0.3, 0.1, 0.2, 0.9], 0, 1.0, &[]);
        assert_eq!(sel.kept_indices, vec![0, 1, 2, 3]);
    }

    #[test]
    fn topk_argmax() {
        let sel = select_topk(&[0.1, 0.9, 0.5], 2, 1.0 / 3.0, &[]);
        assert_eq!(sel, LayerSelection { layer: 2, kept_indices: vec![1] });
    }

    #[test]
    fn topk_ties_prefer_earlier_tokens() {
        let sel = select_topk(&[0.25; 4], 0, 0.5, &[]);
        assert_eq!(sel.kept_indices, vec![0, 1]);
    }

    #[test]
    fn topk_keeps_at_least_one_and_adds_forced() {
        let sel = select_topk(&[0.5, 0.1, 0.2], 0, 0.1, &[]);
        assert_eq!(sel.kept_indices, vec![0]);
        let sel = select_topk(&[0.5, 0.1, 0.2, 0.0], 0, 0.5, &[0]);
        // Forced entries do not consume the budget of two.
        assert_eq!(sel.kept_indices, vec![0, 1, 2]);
    }

    #[test]
    fn budget_floor_tolerates_float_error() {
        assert_eq!(ratio_budget(0.29, 100), 29);
        assert_eq!(ratio_budget(0.1, 48), 4);
        assert_eq!(ratio_budget(1.0, 7), 7);
    }

    #[test]
    fn groups_run_top_down() {
        assert_eq!(layer_groups(4, 1), vec![vec![3], vec![2], vec![1], vec![0]]);
        assert_eq!(layer_groups(4, 2), vec![vec![3, 2], vec![1, 0]]);
        assert_eq!(layer_groups(3, 2), vec![vec![2, 1], vec![0]]);
    }

    fn demos(n: usize) -> Vec<Demonstration> {
        generate(&TaskSpec::default(), 0, n, 0).unwrap().demos
    }

    #[test]
    fn window_modes_are_nested() {
        let d = demos(3);
        let a = window_indices(&d, ObservationWindow::Answer);
        let qa = window_indices(&d, ObservationWindow::QuestionAnswer);
        let iqa = window_indices(&d, ObservationWindow::ImageQuestionAnswer);
        assert!(a.iter().all(|x| qa.contains(x)));
        assert!(qa.iter().all(|x| iqa.contains(x)));
        assert_eq!(iqa.len(), 3 * d[0].len());
        assert_eq!(a, vec![(0, 20), (1, 20), (2, 20)]);
    }

    fn fake_trace(attn: Vec<Vec<ndarray::Array2<f64>>>) -> ForwardTrace {
        ForwardTrace {
            logits: vec![],
            attention: attn,
            hidden: vec![],
            new_kv: vec![],
            memory_len: vec![],
            start_layer: 0,
        }
    }

    #[test]
    fn one_hot_attention_scores() {
        let mut a = ndarray::Array2::zeros((2, 6));
        a[[1, 4]] = 1.0;
        let trace = fake_trace(vec![vec![a]]);
        let s = score_importance(&trace, &[(0, 1)], &[2..5]).unwrap();
        assert_eq!(s.per_layer[0], vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn uniform_attention_scores() {
        let a = ndarray::Array2::from_elem((3, 4), 0.25);
        let trace = fake_trace(vec![vec![a.clone(), a]]);
        let window = [(0, 0), (0, 2), (1, 1)];
        let s = score_importance(&trace, &window, &[0..4]).unwrap();
        assert!(s.per_layer[0].iter().all(|&b| (b - 3.0 / 4.0).abs() < 1e-15));
        assert!(score_importance(&trace, &[], &[0..4]).is_err());
    }

    #[test]
    fn scores_match_double_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let attn: Vec<Vec<ndarray::Array2<f64>>> = (0..2)
            .map(|_| (0..3).map(|_| ndarray::Array2::from_shape_fn((5, 9), |_| rng.random())).collect())
            .collect();
        let window: Vec<(usize, usize)> = (0..6).map(|_| (rng.random_range(0..3), rng.random_range(0..5))).collect();
        let ranges = [3..9, 1..7];
        let s = score_importance(&fake_trace(attn.clone()), &window, &ranges).unwrap();
        for l in 0..2 {
            for j in 0..6 {
                let mut b = 0.0;
                for &(r, i) in &window {
                    b += attn[l][r][[i, ranges[l].start + j]];
                }
                assert!((s.per_layer[l][j] - b).abs() < 1e-12);
            }
        }
    }

    fn setup(seed: u64, n_demos: usize) -> (ToyTransformer, ChunkInput, Vec<Demonstration>) {
        let spec = TaskSpec { seed, ..TaskSpec::default() };
        let cfg = ModelConfig { vocab_size: spec.layout().size, ..ModelConfig::default() };
        let model = ToyTransformer::init(cfg, seed).unwrap();
        let d = generate(&spec, 0, n_demos, 0).unwrap().demos;
        let ctx = assemble_context(&d, &PromptLayout::bare());
        let chunk = ChunkInput { id: 0, tokens: ctx.tokens, roles: ctx.roles };
        (model, chunk, d)
    }

    #[test]
    fn keep_all_policy_is_identity() {
        let (model, chunk, d) = setup(1, 3);
        let empty = KvMemory::for_model(&model);
        let (mem, report) = lap_compress(&model, &empty, &chunk, &d, &RetentionPolicy::keep_all()).unwrap();
        let reference = extract_kv(&model, &empty, &chunk.tokens, &chunk.roles, 0).unwrap();
        assert_eq!(mem, reference);
        for layer in &report.layers {
            assert_eq!(layer.chosen_ratio, 1.0);
            assert!(layer.attempts.iter().all(|a| a.js.abs() < 1e-9));
        }
    }

    #[test]
    fn maximal_delta_takes_smallest_ratio() {
        let (model, chunk, d) = setup(2, 3);
        let policy = RetentionPolicy {
            ratios: vec![0.1, 1.0],
            delta: 1.0,
            ..RetentionPolicy::default()
        };
        let empty = KvMemory::for_model(&model);
        let (mem, report) = lap_compress(&model, &empty, &chunk, &d, &policy).unwrap();
        let s = chunk.tokens.len();
        for layer in &report.layers {
            assert_eq!(layer.chosen_ratio, 0.1);
            assert_eq!(layer.retained, (s / 10).max(1) + 3);
            assert_eq!(layer.attempts.len(), 1);
        }
        for l in 0..mem.num_layers() {
            let answers = mem.layer(l).roles.iter().filter(|&&r| r == TokenRole::Answer).count();
            assert_eq!(answers, 3);
        }
    }

    #[test]
    fn chosen_ratio_is_first_passing_attempt() {
        let (model, chunk, d) = setup(3, 3);
        let empty = KvMemory::for_model(&model);
        let policy = RetentionPolicy { delta: 0.002, ..RetentionPolicy::default() };
        let (_, report) = lap_compress(&model, &empty, &chunk, &d, &policy).unwrap();
        for layer in &report.layers {
            let last = layer.attempts.last().unwrap();
            assert_eq!(last.ratio, layer.chosen_ratio);
            assert!(last.js <= policy.delta || layer.chosen_ratio == 1.0);
            assert!(layer.attempts[..layer.attempts.len() - 1].iter().all(|a| a.js > policy.delta));
        }
        assert!(report.final_js <= policy.delta + 1e-6);
    }

    #[test]
    fn grouped_layers_share_a_ratio() {
        let (model, chunk, d) = setup(4, 3);
        let empty = KvMemory::for_model(&model);
        let policy = RetentionPolicy { group_size: 2, ..RetentionPolicy::default() };
        let (_, report) = lap_compress(&model, &empty, &chunk, &d, &policy).unwrap();
        assert_eq!(report.layers[3].chosen_ratio, report.layers[2].chosen_ratio);
        assert_eq!(report.layers[1].chosen_ratio, report.layers[0].chosen_ratio);
    }

    #[test]
    fn rejects_mismatched_demo_lengths() {
        let (model, chunk, mut d) = setup(5, 2);
        d[1].image.pop();
        let empty = KvMemory::for_model(&model);
        assert!(lap_compress(&model, &empty, &chunk, &d, &RetentionPolicy::default()).is_err());
    }
}
