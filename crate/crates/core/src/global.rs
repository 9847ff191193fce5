//! Global disambiguation: mentions are resolved one per turn, easiest first,
//! each turn seeing the names linked so far in its query and a history
//! vector carried through a gated fusion network.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{GateMode, HistoryMode, M3Config};
use crate::corpus::{assemble_option_sequence, build_query, update_query, AnnotatedText, TokenSequence, Vocabulary};
use crate::encoder::{
    adam_step, read_checkpoint, write_checkpoint, AdamState, Checkpoint, EncoderOutput, EncoderParams,
    SequenceEncoder, TransformerEncoder, WarmupSchedule,
};
use crate::error::{Error, Result};
use crate::kb::{AliasIndex, CandidateOption, CandidateSet, KnowledgeBase};
use crate::local::{
    answer_loss, argmax, option_sequences, ratio, sigmoid, softmax, CheckpointHeader, LocalModel,
    MentionAnalysis, ScoringHead,
};
use crate::params::{visit_matrix, visit_matrix_mut, visit_nested, visit_nested_mut, Parameters, Visitor, VisitorMut};

/// Gate weights; `wi` is the input-side control gate matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    pub wu: Array2<f64>,
    pub wf: Array2<f64>,
    pub wi: Array2<f64>,
    pub wh: Array2<f64>,
}

impl GateParams {
    pub fn zeros(d: usize) -> Self {
        Self {
            wu: Array2::zeros((d, 2 * d)),
            wf: Array2::zeros((d, 2 * d)),
            wi: Array2::zeros((d, d)),
            wh: Array2::zeros((d, d)),
        }
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn init(d: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut p = Self::zeros(d);
        for m in [&mut p.wu, &mut p.wf, &mut p.wi, &mut p.wh] {
            let bound = 1.0 / (m.ncols() as f64).sqrt();
            m.iter_mut().for_each(|x| *x = rng.random_range(-bound..=bound));
        }
        p
    }

    pub fn width(&self) -> usize {
        self.wi.nrows()
    }
}

impl Parameters for GateParams {
    fn visit(&self, f: &mut Visitor) {
        visit_matrix("wu", &self.wu, f);
        visit_matrix("wf", &self.wf, f);
        visit_matrix("wi", &self.wi, f);
        visit_matrix("wh", &self.wh, f);
    }

    fn visit_mut(&mut self, f: &mut VisitorMut) {
        visit_matrix_mut("wu", &mut self.wu, f);
        visit_matrix_mut("wf", &mut self.wf, f);
        visit_matrix_mut("wi", &mut self.wi, f);
        visit_matrix_mut("wh", &mut self.wh, f);
    }
}

/// Intermediate values of one fusion. `u` and `g` are empty in concat mode.
#[derive(Debug, Clone, PartialEq)]
pub struct GateTrace {
    pub v: Vec<f64>,
    pub h: Vec<f64>,
    pub u: Vec<f64>,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub fused: Vec<f64>,
}

fn concat(a: &[f64], b: &[f64]) -> Array1<f64> {
    a.iter().chain(b).copied().collect()
}

/// Fuse the option vector `v` with the history `h`.
///
/// Gated: `u = σ(Wu[v;h])`, `f = tanh(Wf[u⊙h; v])`, `g = σ(Wi v + Wh h)`,
/// `v̂ = g⊙f + (1−g)⊙h`. Concat: `v̂ = tanh(Wf[v;h])`.
pub fn gate_fuse(params: &GateParams, mode: GateMode, v: &[f64], h: &[f64]) -> Result<GateTrace> {
    let d = params.width();
    for (what, got) in [("option vector", v.len()), ("history vector", h.len())] {
        if got != d {
            return Err(Error::DimensionMismatch {
                what,
                expected: d,
                got,
            });
        }
    }
    match mode {
        GateMode::Gated => {
            let u = params.wu.dot(&concat(v, h)).mapv(sigmoid).to_vec();
            let uh: Vec<f64> = u.iter().zip(h).map(|(a, b)| a * b).collect();
            let f = params.wf.dot(&concat(&uh, v)).mapv(f64::tanh).to_vec();
            let va = Array1::from(v.to_vec());
            let ha = Array1::from(h.to_vec());
            let g = (params.wi.dot(&va) + params.wh.dot(&ha)).mapv(sigmoid).to_vec();
            let fused = (0..d).map(|k| g[k] * f[k] + (1.0 - g[k]) * h[k]).collect();
            Ok(GateTrace {
                v: v.to_vec(),
                h: h.to_vec(),
                u,
                f,
                g,
                fused,
            })
        }
        GateMode::Concat => {
            let f = params.wf.dot(&concat(v, h)).mapv(f64::tanh).to_vec();
            Ok(GateTrace {
                v: v.to_vec(),
                h: h.to_vec(),
                u: Vec::new(),
                fused: f.clone(),
                f,
                g: Vec::new(),
            })
        }
        GateMode::GruLike => Err(Error::Unsupported("gate_mode gru_like".into())),
    }
}

fn outer_add(m: &mut Array2<f64>, left: &[f64], right: &[f64]) {
    for (i, &l) in left.iter().enumerate() {
        if l == 0.0 {
            continue;
        }
        for (j, &r) in right.iter().enumerate() {
            m[[i, j]] += l * r;
        }
    }
}

fn transpose_dot(m: &Array2<f64>, x: &[f64]) -> Vec<f64> {
    m.t().dot(&Array1::from(x.to_vec())).to_vec()
}

/// Accumulates gate gradients for `dfused` and returns `(dv, dh)`.
pub fn gate_backward(
    params: &GateParams,
    mode: GateMode,
    trace: &GateTrace,
    dfused: &[f64],
    grads: &mut GateParams,
) -> (Vec<f64>, Vec<f64>) {
    let d = params.width();
    let GateTrace { v, h, u, f, g, .. } = trace;
    match mode {
        GateMode::Concat => {
            let dz: Vec<f64> = (0..d).map(|k| dfused[k] * (1.0 - f[k] * f[k])).collect();
            outer_add(&mut grads.wf, &dz, &concat(v, h).to_vec());
            let dc = transpose_dot(&params.wf, &dz);
            (dc[..d].to_vec(), dc[d..].to_vec())
        }
        _ => {
            let mut dv = vec![0.0; d];
            let mut dh: Vec<f64> = (0..d).map(|k| dfused[k] * (1.0 - g[k])).collect();
            // control gate
            let dzg: Vec<f64> = (0..d).map(|k| dfused[k] * (f[k] - h[k]) * g[k] * (1.0 - g[k])).collect();
            outer_add(&mut grads.wi, &dzg, v);
            outer_add(&mut grads.wh, &dzg, h);
            for (a, b) in dv.iter_mut().zip(transpose_dot(&params.wi, &dzg)) {
                *a += b;
            }
            for (a, b) in dh.iter_mut().zip(transpose_dot(&params.wh, &dzg)) {
                *a += b;
            }
            // fusion gate
            let dzf: Vec<f64> = (0..d).map(|k| dfused[k] * g[k] * (1.0 - f[k] * f[k])).collect();
            let uh: Vec<f64> = (0..d).map(|k| u[k] * h[k]).collect();
            outer_add(&mut grads.wf, &dzf, &concat(&uh, v).to_vec());
            let dc2 = transpose_dot(&params.wf, &dzf);
            let mut dzu = vec![0.0; d];
            for k in 0..d {
                dv[k] += dc2[d + k];
                dh[k] += dc2[k] * u[k];
                dzu[k] = dc2[k] * h[k] * u[k] * (1.0 - u[k]);
            }
            // update gate
            outer_add(&mut grads.wu, &dzu, &concat(v, h).to_vec());
            let dc1 = transpose_dot(&params.wu, &dzu);
            for k in 0..d {
                dv[k] += dc1[k];
                dh[k] += dc1[d + k];
            }
            (dv, dh)
        }
    }
}

/// Global option probabilities with the raw and fused option vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalScores {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub raw: Vec<Vec<f64>>,
    pub fused: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct GlobalForward<T> {
    pub scores: GlobalScores,
    pub outputs: Vec<EncoderOutput<T>>,
    pub traces: Vec<GateTrace>,
}

/// Encode every option against the updated query, fuse each with `h` and
/// softmax the head logits over the options.
pub fn global_score_mention<E: SequenceEncoder>(
    encoder: &E,
    gate: &GateParams,
    mode: GateMode,
    head: &ScoringHead,
    sequences: &[TokenSequence],
    h: &[f64],
) -> Result<GlobalForward<E::Tape>> {
    if sequences.is_empty() {
        return Err(Error::InvalidConfig("cannot score an empty candidate set".into()));
    }
    let outputs = sequences
        .iter()
        .map(|s| encoder.encode(s))
        .collect::<Result<Vec<_>>>()?;
    let traces = outputs
        .iter()
        .map(|o| gate_fuse(gate, mode, &o.pooled, h))
        .collect::<Result<Vec<_>>>()?;
    let logits: Vec<f64> = traces.iter().map(|t| head.logit(&t.fused)).collect();
    let scores = GlobalScores {
        probs: softmax(&logits),
        logits,
        raw: outputs.iter().map(|o| o.pooled.clone()).collect(),
        fused: traces.iter().map(|t| t.fused.clone()).collect(),
    };
    Ok(GlobalForward {
        scores,
        outputs,
        traces,
    })
}

/// Cross entropy of the global distribution; gradient w.r.t. the logits.
pub fn global_loss(scores: &GlobalScores, gold: usize) -> (f64, Vec<f64>) {
    answer_loss(&scores.probs, gold)
}

/// Where the history produced by a turn came from, for backpropagation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HistorySource {
    Fused(usize),
    Raw(usize),
}

/// Backpropagate one scored turn. `dh_out` is the gradient flowing into the
/// history this turn produced (`source`); returns the gradient w.r.t. the
/// history it consumed.
#[allow(clippy::too_many_arguments)]
pub fn backward_turn<E: SequenceEncoder>(
    encoder: &E,
    gate: &GateParams,
    mode: GateMode,
    head: &ScoringHead,
    forward: &GlobalForward<E::Tape>,
    dlogits: &[f64],
    source: Option<HistorySource>,
    dh_out: &[f64],
    grads: &mut GlobalGradsOf<E::Grads>,
) -> Result<Vec<f64>> {
    let d = encoder.width();
    let mut dh_in = if source.is_none() { dh_out.to_vec() } else { vec![0.0; d] };
    for (j, (out, trace)) in forward.outputs.iter().zip(&forward.traces).enumerate() {
        let mut dfused = head.backward(&trace.fused, dlogits[j], &mut grads.head);
        if source == Some(HistorySource::Fused(j)) {
            dfused.iter_mut().zip(dh_out).for_each(|(a, b)| *a += b);
        }
        let (mut dv, dh) = gate_backward(gate, mode, trace, &dfused, &mut grads.gate);
        if source == Some(HistorySource::Raw(j)) {
            dv.iter_mut().zip(dh_out).for_each(|(a, b)| *a += b);
        }
        dh_in.iter_mut().zip(&dh).for_each(|(a, b)| *a += b);
        encoder.backprop_into(out, &dv, &mut grads.encoder)?;
    }
    Ok(dh_in)
}

/// Processing order of a text's mentions.
#[derive(Debug, Clone, PartialEq)]
pub struct AmbiguityRank {
    /// Mention indices, easiest first.
    pub order: Vec<usize>,
    /// Gap of every mention, indexed by mention.
    pub gaps: Vec<f64>,
}

/// Spread `max − min` of a probability vector; 0 when empty.
pub fn ambiguity_gap(probs: &[f64]) -> f64 {
    if probs.is_empty() {
        return 0.0;
    }
    let max = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = probs.iter().copied().fold(f64::INFINITY, f64::min);
    max - min
}

/// Mentions sorted by descending gap, ties in text order.
pub fn rank_mentions<P: AsRef<[f64]>>(probs: &[P]) -> AmbiguityRank {
    let gaps: Vec<f64> = probs.iter().map(|p| ambiguity_gap(p.as_ref())).collect();
    let mut order: Vec<usize> = (0..gaps.len()).collect();
    order.sort_by(|&a, &b| gaps[b].total_cmp(&gaps[a]).then(a.cmp(&b)));
    AmbiguityRank { order, gaps }
}

/// Ranking used by the pipeline: text order when re-ranking is disabled.
pub fn processing_order(analyses: &[MentionAnalysis], cfg: &M3Config) -> AmbiguityRank {
    let mut rank = rank_mentions(&analyses.iter().map(|a| a.scores.probs.as_slice()).collect::<Vec<_>>());
    if cfg.no_rerank {
        rank.order = (0..analyses.len()).collect();
    }
    rank
}

#[derive(Debug, Clone)]
pub struct GlobalModel {
    pub vocab: Vocabulary,
    pub encoder: TransformerEncoder,
    pub gate: GateParams,
    pub head: ScoringHead,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalGradsOf<G> {
    pub encoder: G,
    pub gate: GateParams,
    pub head: ScoringHead,
}

pub type GlobalGrads = GlobalGradsOf<EncoderParams>;

impl<G: Parameters> Parameters for GlobalGradsOf<G> {
    fn visit(&self, f: &mut Visitor) {
        visit_nested("encoder", &self.encoder, f);
        visit_nested("gate", &self.gate, f);
        visit_nested("head", &self.head, f);
    }

    fn visit_mut(&mut self, f: &mut VisitorMut) {
        visit_nested_mut("encoder", &mut self.encoder, f);
        visit_nested_mut("gate", &mut self.gate, f);
        visit_nested_mut("head", &mut self.head, f);
    }
}

impl Parameters for GlobalModel {
    fn visit(&self, f: &mut Visitor) {
        visit_nested("encoder", self.encoder.params(), f);
        visit_nested("gate", &self.gate, f);
        visit_nested("head", &self.head, f);
    }

    fn visit_mut(&mut self, f: &mut VisitorMut) {
        visit_nested_mut("encoder", self.encoder.params_mut(), f);
        visit_nested_mut("gate", &mut self.gate, f);
        visit_nested_mut("head", &mut self.head, f);
    }
}

/// Per-mention outcome of the turn loop.
#[derive(Debug, Clone)]
pub struct TurnOutcome {
    /// Position in the processing order, starting at 0.
    pub rank: usize,
    pub query: String,
    /// `None` for mentions decided locally (before the history exists, or
    /// without candidates).
    pub global: Option<GlobalScores>,
    /// Answer fed to later turns' queries and history.
    pub selection: CandidateOption,
    /// Whether stage one of the verifier forced NIL.
    pub nil_override: bool,
}

#[derive(Debug, Clone)]
pub struct MultiTurn {
    pub rank: AmbiguityRank,
    /// Indexed by mention.
    pub turns: Vec<TurnOutcome>,
}

/// One turn of teacher-forced training.
#[derive(Debug, Clone)]
enum TrainTurn {
    /// First gold entity: its option encoding starts the history.
    Init(TokenSequence),
    Scored {
        option_sequences: Vec<TokenSequence>,
        gold_index: Option<usize>,
        updates_history: bool,
    },
}

#[derive(Debug, Clone)]
pub struct GlobalUnit {
    pub text: usize,
    turns: Vec<TrainTurn>,
}

impl GlobalUnit {
    pub fn scored_turns(&self) -> usize {
        self.turns
            .iter()
            .filter(|t| matches!(t, TrainTurn::Scored { gold_index: Some(_), .. }))
            .count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalEpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub accuracy: f64,
}

fn is_overridden(analysis: &MentionAnalysis, cfg: &M3Config) -> bool {
    analysis.judgement.is_some_and(|j| j.prob < cfg.nil_threshold)
}

fn turn_query(
    text: &AnnotatedText,
    target: usize,
    linked: &BTreeMap<usize, Option<String>>,
    cfg: &M3Config,
) -> Result<String> {
    if cfg.no_query_update {
        Ok(build_query(text, target))
    } else {
        update_query(text, target, linked)
    }
}

fn linked_name(kb: &KnowledgeBase, option: &CandidateOption) -> Result<Option<String>> {
    match option {
        CandidateOption::Entity(id) => Ok(Some(
            kb.get(id)
                .ok_or_else(|| Error::UnknownEntity(id.0.clone()))?
                .canonical_name
                .clone(),
        )),
        CandidateOption::Nil => Ok(None),
    }
}

impl GlobalModel {
    /// Copy of the local encoder with positions grown to the global length,
    /// plus freshly initialized gate and head.
    pub fn from_local(local: &LocalModel, cfg: &M3Config) -> Result<Self> {
        cfg.validate()?;
        let mut encoder = local.encoder.clone();
        encoder.extend_positions(cfg.max_len_global, cfg.seed ^ 0x706f_7369_7469_6f6e);
        let d = encoder.width();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x676c_6f62_616c);
        let gate = GateParams::init(d, &mut rng);
        let head = ScoringHead::init(d, &mut rng);
        Ok(Self {
            vocab: local.vocab.clone(),
            encoder,
            gate,
            head,
        })
    }

    pub fn zero_grads(&self) -> GlobalGrads {
        let d = self.encoder.width();
        GlobalGrads {
            encoder: self.encoder.zero_grads(),
            gate: GateParams::zeros(d),
            head: ScoringHead::zeros(d),
        }
    }

    pub fn max_len(&self) -> usize {
        self.encoder.max_len()
    }

    fn option_sequence(
        &self,
        kb: &KnowledgeBase,
        candidates: &CandidateSet,
        j: usize,
        query: &str,
    ) -> Result<TokenSequence> {
        let (desc, name) = candidates.option_text(kb, j)?;
        assemble_option_sequence(desc, query, name, &self.vocab, self.max_len())
    }

    pub fn score(&self, sequences: &[TokenSequence], h: &[f64], cfg: &M3Config) -> Result<GlobalForward<<TransformerEncoder as SequenceEncoder>::Tape>> {
        global_score_mention(&self.encoder, &self.gate, cfg.gate_mode, &self.head, sequences, h)
    }

    /// Inference turn loop over locally analysed mentions.
    ///
    /// Mentions are visited in ranking order. Until a mention is linked to
    /// an entity, decisions are local; the first linked entity's encoding
    /// starts the history. Every later mention is scored globally, its top
    /// global option (or NIL under a stage-one override) is fed forward, and
    /// the history becomes that option's fused vector (raw vector in the
    /// last-history variant). NIL selections leave history and query alone.
    pub fn run_multi_turn(
        &self,
        kb: &KnowledgeBase,
        text: &AnnotatedText,
        analyses: &[MentionAnalysis],
        cfg: &M3Config,
    ) -> Result<MultiTurn> {
        if analyses.len() != text.mentions.len() {
            return Err(Error::DimensionMismatch {
                what: "mention analyses",
                expected: text.mentions.len(),
                got: analyses.len(),
            });
        }
        let rank = processing_order(analyses, cfg);
        let mut slots: Vec<Option<TurnOutcome>> = vec![None; analyses.len()];
        let mut linked = BTreeMap::new();
        let mut history: Option<Vec<f64>> = None;
        for (pos, &mi) in rank.order.iter().enumerate() {
            let analysis = &analyses[mi];
            let query = turn_query(text, mi, &linked, cfg)?;
            let nil_override = is_overridden(analysis, cfg);
            let mut global = None;
            let selection = if analysis.candidates.is_empty() {
                CandidateOption::Nil
            } else if let Some(h) = &history {
                let seqs = option_sequences(kb, &analysis.candidates, &query, &self.vocab, self.max_len())?;
                let fwd = self.score(&seqs, h, cfg)?;
                let top = argmax(&fwd.scores.probs).expect("non-empty options");
                let selection = if nil_override {
                    CandidateOption::Nil
                } else {
                    analysis.candidates.option(top)
                };
                if !selection.is_nil() {
                    history = Some(match cfg.history_mode {
                        HistoryMode::Flow => fwd.scores.fused[top].clone(),
                        HistoryMode::Last => fwd.scores.raw[top].clone(),
                    });
                }
                global = Some(fwd.scores);
                selection
            } else {
                let selection = analysis.prediction.clone();
                if let Some(j) = analysis.candidates.index_of(&selection).filter(|_| !selection.is_nil()) {
                    let seq = self.option_sequence(kb, &analysis.candidates, j, &query)?;
                    history = Some(self.encoder.encode(&seq)?.pooled);
                }
                selection
            };
            linked.insert(mi, linked_name(kb, &selection)?);
            slots[mi] = Some(TurnOutcome {
                rank: pos,
                query,
                global,
                selection,
                nil_override,
            });
        }
        Ok(MultiTurn {
            rank,
            turns: slots.into_iter().map(|t| t.expect("every mention visited")).collect(),
        })
    }

    /// Mean turn loss of one text; accumulates `scale`-weighted gradients
    /// (full backpropagation through the history chain) when `grads` is
    /// given. Also returns (correct, scored) turn counts.
    pub fn unit_loss(
        &self,
        unit: &GlobalUnit,
        cfg: &M3Config,
        grads: Option<(&mut GlobalGrads, f64)>,
    ) -> Result<(f64, usize, usize)> {
        let d = self.encoder.width();
        let mut init = None;
        let mut h: Option<Vec<f64>> = None;
        // (forward, gold, history source)
        let mut records = Vec::new();
        for turn in &unit.turns {
            match turn {
                TrainTurn::Init(seq) => {
                    let out = self.encoder.encode(seq)?;
                    h = Some(out.pooled.clone());
                    init = Some(out);
                }
                TrainTurn::Scored {
                    option_sequences,
                    gold_index,
                    updates_history,
                } => {
                    let hin = h.as_ref().expect("history initialized before scored turns");
                    let fwd = self.score(option_sequences, hin, cfg)?;
                    let source = match (updates_history, gold_index) {
                        (true, Some(g)) => Some(match cfg.history_mode {
                            HistoryMode::Flow => HistorySource::Fused(*g),
                            HistoryMode::Last => HistorySource::Raw(*g),
                        }),
                        _ => None,
                    };
                    match source {
                        Some(HistorySource::Fused(g)) => h = Some(fwd.scores.fused[g].clone()),
                        Some(HistorySource::Raw(g)) => h = Some(fwd.scores.raw[g].clone()),
                        None => {}
                    }
                    records.push((fwd, *gold_index, source));
                }
            }
        }
        let scored = records.iter().filter(|r| r.1.is_some()).count();
        if scored == 0 {
            return Ok((0.0, 0, 0));
        }
        let mut total = 0.0;
        let mut correct = 0;
        let mut dlogits = Vec::with_capacity(records.len());
        for (fwd, gold, _) in &records {
            match gold {
                Some(g) => {
                    let (loss, dl) = global_loss(&fwd.scores, *g);
                    total += loss;
                    correct += usize::from(argmax(&fwd.scores.probs) == Some(*g));
                    dlogits.push(dl);
                }
                None => dlogits.push(vec![0.0; fwd.scores.probs.len()]),
            }
        }
        let per_turn = 1.0 / scored as f64;
        if let Some((g, scale)) = grads {
            let mut dh = vec![0.0; d];
            for ((fwd, _, source), dl) in records.iter().zip(&dlogits).rev() {
                let dl: Vec<f64> = dl.iter().map(|x| x * per_turn * scale).collect();
                dh = backward_turn(&self.encoder, &self.gate, cfg.gate_mode, &self.head, fwd, &dl, *source, &dh, g)?;
            }
            let init = init.expect("scored turns follow an initial turn");
            self.encoder.backprop_into(&init, &dh, &mut g.encoder)?;
        }
        Ok((total * per_turn, correct, scored))
    }

    pub fn to_checkpoint(&self, cfg: &M3Config) -> Checkpoint {
        let mut ckpt = Checkpoint::new(serde_json::json!({
            "kind": "global",
            "config": cfg,
            "encoder": self.encoder.config(),
            "vocab": self.vocab.user_tokens(),
        }));
        ckpt.push_section("encoder", self.encoder.params());
        ckpt.push_section("gate", &self.gate);
        ckpt.push_section("head", &self.head);
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, M3Config)> {
        let header = CheckpointHeader::parse(ckpt, "global")?;
        let d = header.encoder.d;
        let mut params = EncoderParams::zeros(&header.encoder);
        ckpt.load_section("encoder", &mut params)?;
        let mut gate = GateParams::zeros(d);
        ckpt.load_section("gate", &mut gate)?;
        let mut head = ScoringHead::zeros(d);
        ckpt.load_section("head", &mut head)?;
        let model = Self {
            encoder: TransformerEncoder::from_params(header.encoder, params)?,
            vocab: header.vocab,
            gate,
            head,
        };
        Ok((model, header.config))
    }

    pub fn save(&self, path: &Path, cfg: &M3Config) -> Result<()> {
        write_checkpoint(BufWriter::new(File::create(path)?), &self.to_checkpoint(cfg))
    }

    pub fn load(path: &Path) -> Result<(Self, M3Config)> {
        Self::from_checkpoint(&read_checkpoint(BufReader::new(File::open(path)?))?)
    }
}

/// Teacher-forced training units: mentions in the local model's ranking
/// order, gold answers in queries and history. Texts yielding no scored
/// turn are dropped.
pub fn global_units(
    corpus: &[AnnotatedText],
    kb: &KnowledgeBase,
    index: &AliasIndex,
    local: &LocalModel,
    model: &GlobalModel,
    cfg: &M3Config,
) -> Result<Vec<GlobalUnit>> {
    let mut units = Vec::new();
    for (ti, text) in corpus.iter().enumerate() {
        if text.mentions.len() < 2 || text.mentions.iter().any(|m| m.gold.is_none()) {
            continue;
        }
        let analyses = (0..text.mentions.len())
            .map(|mi| local.analyze(kb, index, text, mi, cfg))
            .collect::<Result<Vec<_>>>()?;
        let rank = processing_order(&analyses, cfg);
        let mut linked = BTreeMap::new();
        let mut turns = Vec::new();
        let mut started = false;
        for &mi in &rank.order {
            let gold = text.mentions[mi].gold.clone().expect("checked above");
            if let Some(id) = gold.entity() {
                if !kb.contains(id) {
                    return Err(Error::UnknownEntity(id.0.clone()));
                }
            }
            let mut candidates = analyses[mi].candidates.clone();
            if let CandidateOption::Entity(id) = &gold {
                candidates.inject_gold(id, cfg.k);
            }
            let query = turn_query(text, mi, &linked, cfg)?;
            linked.insert(mi, linked_name(kb, &gold)?);
            let gold_index = candidates.index_of(&gold);
            if !started {
                if let (Some(j), false) = (gold_index, gold.is_nil()) {
                    turns.push(TrainTurn::Init(model.option_sequence(kb, &candidates, j, &query)?));
                    started = true;
                }
                continue;
            }
            if candidates.is_empty() {
                continue;
            }
            turns.push(TrainTurn::Scored {
                option_sequences: option_sequences(kb, &candidates, &query, &model.vocab, model.max_len())?,
                gold_index,
                updates_history: !gold.is_nil(),
            });
        }
        let unit = GlobalUnit { text: ti, turns };
        if unit.scored_turns() > 0 {
            units.push(unit);
        }
    }
    Ok(units)
}

/// Train the global model from a trained local model (frozen here; it only
/// ranks the mentions).
pub fn train_global(
    corpus: &[AnnotatedText],
    kb: &KnowledgeBase,
    index: &AliasIndex,
    local: &LocalModel,
    cfg: &M3Config,
    mut on_epoch: impl FnMut(&GlobalEpochLog),
) -> Result<(GlobalModel, Vec<GlobalEpochLog>)> {
    let mut model = GlobalModel::from_local(local, cfg)?;
    let units = global_units(corpus, kb, index, local, &model, cfg)?;
    let batch = cfg.global.batch_size;
    let schedule = WarmupSchedule {
        peak: cfg.lr_global,
        warmup_fraction: cfg.global.warmup,
        total_steps: units.len().div_ceil(batch) * cfg.global.epochs,
    };
    let mut state = AdamState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let mut order: Vec<usize> = (0..units.len()).collect();
    let mut logs = Vec::with_capacity(cfg.global.epochs);
    for epoch in 0..cfg.global.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut correct, mut scored) = (0.0, 0, 0);
        for chunk in order.chunks(batch) {
            let mut grads = model.zero_grads();
            let scale = 1.0 / chunk.len() as f64;
            for &u in chunk {
                let (loss, c, n) = model.unit_loss(&units[u], cfg, Some((&mut grads, scale)))?;
                total += loss;
                correct += c;
                scored += n;
            }
            adam_step(&mut model, &grads, &mut state, &schedule)?;
        }
        let log = GlobalEpochLog {
            epoch: epoch + 1,
            mean_loss: total / units.len().max(1) as f64,
            accuracy: ratio(correct, scored),
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok((model, logs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Mention;
    use crate::encoder::EncoderConfig;
    use crate::kb::Entity;
    use crate::local::build_vocabulary;
    use crate::params::{finite_difference, max_relative_error};

    fn random_gate(d: usize, seed: u64) -> (GateParams, Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = GateParams::zeros(d);
        p.visit_mut(&mut |_, _, x| x.iter_mut().for_each(|v| *v = rng.random_range(-1.5..1.5)));
        let v = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let h = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        (p, v, h)
    }

    #[test]
    fn zero_gate_closed_form() {
        let p = GateParams::zeros(3);
        let h = [0.4, -1.0, 2.5];
        let t = gate_fuse(&p, GateMode::Gated, &[1.0, 2.0, 3.0], &h).unwrap();
        assert_eq!(t.u, vec![0.5; 3]);
        assert_eq!(t.f, vec![0.0; 3]);
        assert_eq!(t.g, vec![0.5; 3]);
        assert_eq!(t.fused, vec![0.2, -0.5, 1.25]);
        let t = gate_fuse(&p, GateMode::Gated, &[1.0, 2.0, 3.0], &[0.0; 3]).unwrap();
        assert_eq!(t.fused, vec![0.0; 3]);
    }

    #[test]
    fn gate_matches_straight_line_recomputation() {
        let (p, v, h) = random_gate(2, 11);
        let s = |x: f64| 1.0 / (1.0 + (-x).exp());
        let mut want = [0.0; 2];
        for k in 0..2 {
            let uk = |k: usize| s(p.wu[[k, 0]] * v[0] + p.wu[[k, 1]] * v[1] + p.wu[[k, 2]] * h[0] + p.wu[[k, 3]] * h[1]);
            let (u0, u1) = (uk(0), uk(1));
            let fk = (p.wf[[k, 0]] * u0 * h[0] + p.wf[[k, 1]] * u1 * h[1] + p.wf[[k, 2]] * v[0] + p.wf[[k, 3]] * v[1]).tanh();
            let gk = s(p.wi[[k, 0]] * v[0] + p.wi[[k, 1]] * v[1] + p.wh[[k, 0]] * h[0] + p.wh[[k, 1]] * h[1]);
            want[k] = gk * fk + (1.0 - gk) * h[k];
        }
        let got = gate_fuse(&p, GateMode::Gated, &v, &h).unwrap().fused;
        for k in 0..2 {
            assert!((got[k] - want[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn gate_dimension_errors() {
        let p = GateParams::zeros(3);
        assert!(matches!(
            gate_fuse(&p, GateMode::Gated, &[1.0, 2.0], &[0.0; 3]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(gate_fuse(&p, GateMode::GruLike, &[0.0; 3], &[0.0; 3]), Err(Error::Unsupported(_))));
    }

    #[test]
    fn gate_gradients_match_finite_differences() {
        for mode in [GateMode::Gated, GateMode::Concat] {
            for seed in 0..5 {
                let (p, v, h) = random_gate(4, seed);
                let w: Vec<f64> = (0..4).map(|k| (k as f64 + 1.0) * 0.3 - 0.7).collect();
                let loss = |p: &GateParams, v: &[f64], h: &[f64]| -> f64 {
                    let t = gate_fuse(p, mode, v, h).unwrap();
                    t.fused.iter().zip(&w).map(|(a, b)| a * b).sum()
                };
                let t = gate_fuse(&p, mode, &v, &h).unwrap();
                let mut g = GateParams::zeros(4);
                let (dv, dh) = gate_backward(&p, mode, &t, &w, &mut g);
                let numeric = finite_difference(&p, 1e-6, |q| loss(q, &v, &h));
                assert!(max_relative_error(&g.flatten(), &numeric, 1e-9) < 1e-6);
                for k in 0..4 {
                    let mut vp = v.clone();
                    vp[k] += 1e-6;
                    let mut vm = v.clone();
                    vm[k] -= 1e-6;
                    let fd = (loss(&p, &vp, &h) - loss(&p, &vm, &h)) / 2e-6;
                    assert!((fd - dv[k]).abs() < 1e-7);
                    let mut hp = h.clone();
                    hp[k] += 1e-6;
                    let mut hm = h.clone();
                    hm[k] -= 1e-6;
                    let fd = (loss(&p, &v, &hp) - loss(&p, &v, &hm)) / 2e-6;
                    assert!((fd - dh[k]).abs() < 1e-7);
                }
            }
        }
    }

    #[test]
    fn rank_examples() {
        let r = rank_mentions(&[vec![0.9, 0.1], vec![0.6, 0.4], vec![0.75, 0.25]]);
        assert_eq!(r.order, vec![0, 2, 1]);
        let r = rank_mentions(&[vec![0.5, 0.5], vec![0.5, 0.5], vec![1.0]]);
        assert_eq!(r.order, vec![0, 1, 2]);
        assert_eq!(rank_mentions(&[vec![0.3, 0.7]]).order, vec![0]);
        assert_eq!(ambiguity_gap(&[0.2, 0.5, 0.3]), 0.3);
    }

    fn world() -> (KnowledgeBase, AliasIndex, Vec<AnnotatedText>) {
        let ent = |id: &str, name: &str, desc: &str, alias: &str| Entity {
            id: id.into(),
            canonical_name: name.into(),
            description: desc.into(),
            aliases: vec![alias.into()],
            popularity: 1,
        };
        let kb = KnowledgeBase::new(vec![
            ent("A1", "apple fruit", "fruit tree", "apple"),
            ent("A2", "apple company", "phone maker", "apple"),
            ent("B1", "pear fruit", "fruit tree", "pear"),
            ent("C1", "jobs founder", "phone maker founder", "jobs"),
        ])
        .unwrap();
        let index = AliasIndex::build(&kb);
        let mention = |t: &str, s: &str, gold: &str| {
            let start = t.find(s).unwrap();
            Mention {
                start,
                end: start + s.len(),
                surface: s.into(),
                gold: Some(if gold == "NIL" { CandidateOption::Nil } else { CandidateOption::Entity(gold.into()) }),
                tag: None,
            }
        };
        let text = |t: &str, ms: Vec<Mention>| AnnotatedText::new(None, t.into(), ms).unwrap();
        let t1 = "apple and pear and jobs";
        let t2 = "jobs likes apple";
        let corpus = vec![
            text(t1, vec![mention(t1, "apple", "A1"), mention(t1, "pear", "B1"), mention(t1, "jobs", "NIL")]),
            text(t2, vec![mention(t2, "jobs", "C1"), mention(t2, "apple", "A2")]),
        ];
        (kb, index, corpus)
    }

    fn config(gate_mode: GateMode, history_mode: HistoryMode, verifier: bool) -> M3Config {
        M3Config {
            verifier,
            gate_mode,
            history_mode,
            encoder: EncoderConfig {
                d: 4,
                n_layers: 1,
                n_heads: 2,
                ..EncoderConfig::default()
            },
            max_len_local: 24,
            max_len_global: 28,
            ..M3Config::default()
        }
    }

    #[test]
    fn text_loss_gradient_matches_finite_differences() {
        let (kb, index, corpus) = world();
        for (gate, hist, verifier) in [
            (GateMode::Gated, HistoryMode::Flow, true),
            (GateMode::Gated, HistoryMode::Last, false),
            (GateMode::Concat, HistoryMode::Flow, true),
        ] {
            let cfg = config(gate, hist, verifier);
            let local = LocalModel::new(build_vocabulary(&kb, &corpus), &cfg).unwrap();
            let model = GlobalModel::from_local(&local, &cfg).unwrap();
            let units = global_units(&corpus, &kb, &index, &local, &model, &cfg).unwrap();
            assert_eq!(units.len(), 2);
            for unit in &units {
                let mut g = model.zero_grads();
                model.unit_loss(unit, &cfg, Some((&mut g, 1.0))).unwrap();
                let numeric = finite_difference(&model, 1e-5, |m| m.unit_loss(unit, &cfg, None).unwrap().0);
                let err = max_relative_error(&g.flatten(), &numeric, 1e-8);
                assert!(err < 1e-4, "{gate:?}/{hist:?}: relative error {err}");
            }
        }
    }

    #[test]
    fn turn_loop_visits_every_mention_once() {
        let (kb, index, corpus) = world();
        let cfg = config(GateMode::Gated, HistoryMode::Flow, true);
        let local = LocalModel::new(build_vocabulary(&kb, &corpus), &cfg).unwrap();
        let model = GlobalModel::from_local(&local, &cfg).unwrap();
        for text in &corpus {
            let analyses: Vec<_> = (0..text.mentions.len())
                .map(|m| local.analyze(&kb, &index, text, m, &cfg).unwrap())
                .collect();
            let run = model.run_multi_turn(&kb, text, &analyses, &cfg).unwrap();
            let mut ranks: Vec<usize> = run.turns.iter().map(|t| t.rank).collect();
            ranks.sort();
            assert_eq!(ranks, (0..text.mentions.len()).collect::<Vec<_>>());
            for (pos, &mi) in run.rank.order.iter().enumerate() {
                assert_eq!(run.turns[mi].rank, pos);
            }
            let first = run.rank.order[0];
            assert!(run.turns[first].global.is_none());
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let (kb, _, corpus) = world();
        let cfg = config(GateMode::Gated, HistoryMode::Flow, true);
        let local = LocalModel::new(build_vocabulary(&kb, &corpus), &cfg).unwrap();
        let model = GlobalModel::from_local(&local, &cfg).unwrap();
        assert_eq!(model.max_len(), 28);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &model.to_checkpoint(&cfg)).unwrap();
        let (back, _) = GlobalModel::from_checkpoint(&read_checkpoint(&buf[..]).unwrap()).unwrap();
        assert_eq!(back.flatten(), model.flatten());
        assert!(matches!(
            LocalModel::from_checkpoint(&model.to_checkpoint(&cfg)),
            Err(Error::ModelMismatch(_))
        ));
    }
}
