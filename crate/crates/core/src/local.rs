//! Local disambiguation: multiple-choice option scoring and the NIL verifier.
//!
//! Every option of a mention is encoded on its own as
//! `[CLS] description [SEP] query [SEP] option [SEP]`; a shared linear head
//! turns each pooled vector into a logit and a softmax over the option axis
//! couples them. The verifier adds a NIL option to the choice set and a
//! query-only linkability classifier trained with binary cross entropy.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use ndarray::{Array1, Array2};

use crate::config::M3Config;
use crate::corpus::{
    assemble_option_sequence, assemble_query_sequence, build_query, AnnotatedText, TokenSequence,
    Vocabulary,
};
use crate::encoder::{
    adam_step, read_checkpoint, write_checkpoint, AdamState, Checkpoint, EncoderConfig, EncoderOutput, EncoderParams, SequenceEncoder,
    TransformerEncoder, WarmupSchedule,
};
use crate::error::{Error, Result};
use crate::kb::{AliasIndex, CandidateOption, CandidateSet, KnowledgeBase, NIL_DESCRIPTION, NIL_NAME};
use crate::params::{
    visit_matrix, visit_matrix_mut, visit_nested, visit_nested_mut, visit_vector, visit_vector_mut,
    Parameters, Visitor, VisitorMut,
};

/// Floor applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-30;

/// Linear scorer `w·x + b` shared across options.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoringHead {
    pub w: Array1<f64>,
    pub b: Array1<f64>,
}

impl ScoringHead {
    pub fn zeros(d: usize) -> Self {
        Self {
            w: Array1::zeros(d),
            b: Array1::zeros(1),
        }
    }

    pub fn init(d: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        Self {
            w: (0..d).map(|_| rng.random_range(-bound..=bound)).collect(),
            b: Array1::zeros(1),
        }
    }

    pub fn logit(&self, x: &[f64]) -> f64 {
        self.w.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + self.b[0]
    }

    /// Accumulates parameter gradients for `dlogit` and returns `d/dx`.
    pub fn backward(&self, x: &[f64], dlogit: f64, grads: &mut ScoringHead) -> Vec<f64> {
        for (g, xi) in grads.w.iter_mut().zip(x) {
            *g += dlogit * xi;
        }
        grads.b[0] += dlogit;
        self.w.iter().map(|w| w * dlogit).collect()
    }
}

impl Parameters for ScoringHead {
    fn visit(&self, f: &mut Visitor) {
        visit_vector("w", &self.w, f);
        visit_vector("b", &self.b, f);
    }

    fn visit_mut(&mut self, f: &mut VisitorMut) {
        visit_vector_mut("w", &mut self.w, f);
        visit_vector_mut("b", &mut self.b, f);
    }
}

/// One-hidden-layer MLP (tanh, width `d`) producing the linkability logit.
#[derive(Debug, Clone, PartialEq)]
pub struct VerifierMlp {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array1<f64>,
    pub b2: Array1<f64>,
}

impl VerifierMlp {
    pub fn zeros(d: usize) -> Self {
        Self {
            w1: Array2::zeros((d, d)),
            b1: Array1::zeros(d),
            w2: Array1::zeros(d),
            b2: Array1::zeros(1),
        }
    }

    pub fn init(d: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        let mut mlp = Self::zeros(d);
        mlp.w1.iter_mut().for_each(|x| *x = rng.random_range(-bound..=bound));
        mlp.w2.iter_mut().for_each(|x| *x = rng.random_range(-bound..=bound));
        mlp
    }

    /// Hidden activations and the output logit.
    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let x = Array1::from(x.to_vec());
        let hidden = (self.w1.dot(&x) + &self.b1).mapv(f64::tanh);
        let logit = self.w2.dot(&hidden) + self.b2[0];
        (hidden.to_vec(), logit)
    }

    pub fn backward(&self, x: &[f64], hidden: &[f64], dlogit: f64, grads: &mut VerifierMlp) -> Vec<f64> {
        grads.b2[0] += dlogit;
        let d = hidden.len();
        let mut dz = vec![0.0; d];
        for i in 0..d {
            grads.w2[i] += dlogit * hidden[i];
            dz[i] = dlogit * self.w2[i] * (1.0 - hidden[i] * hidden[i]);
        }
        let mut dx = vec![0.0; x.len()];
        for i in 0..d {
            grads.b1[i] += dz[i];
            for j in 0..x.len() {
                grads.w1[[i, j]] += dz[i] * x[j];
                dx[j] += self.w1[[i, j]] * dz[i];
            }
        }
        dx
    }
}

impl Parameters for VerifierMlp {
    fn visit(&self, f: &mut Visitor) {
        visit_matrix("w1", &self.w1, f);
        visit_vector("b1", &self.b1, f);
        visit_vector("w2", &self.w2, f);
        visit_vector("b2", &self.b2, f);
    }

    fn visit_mut(&mut self, f: &mut VisitorMut) {
        visit_matrix_mut("w1", &mut self.w1, f);
        visit_vector_mut("b1", &mut self.b1, f);
        visit_vector_mut("w2", &mut self.w2, f);
        visit_vector_mut("b2", &mut self.b2, f);
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Option probabilities for one mention, with the pooled vector of every option.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalScores {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub pooled: Vec<Vec<f64>>,
}

impl LocalScores {
    pub fn from_logits(logits: Vec<f64>, pooled: Vec<Vec<f64>>) -> Self {
        let probs = softmax(&logits);
        Self {
            logits,
            probs,
            pooled,
        }
    }

    /// First index of the largest probability.
    pub fn argmax(&self) -> Option<usize> {
        argmax(&self.probs)
    }
}

pub fn argmax(xs: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &x) in xs.iter().enumerate() {
        if best.is_none_or(|b| x > xs[b]) {
            best = Some(i);
        }
    }
    best
}

/// Probability that the mention is linkable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NilJudgement {
    pub logit: f64,
    pub prob: f64,
}

impl NilJudgement {
    pub fn from_logit(logit: f64) -> Self {
        Self {
            logit,
            prob: sigmoid(logit),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalLossWeights {
    pub alpha1: f64,
    pub alpha2: f64,
}

impl Default for LocalLossWeights {
    fn default() -> Self {
        Self {
            alpha1: 0.75,
            alpha2: 0.25,
        }
    }
}

/// Forward state of the option scorer, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct OptionForward<T> {
    pub scores: LocalScores,
    pub outputs: Vec<EncoderOutput<T>>,
}

/// `[CLS] D [SEP] Q [SEP] O [SEP]` sequences for every option of `candidates`.
pub fn option_sequences(
    kb: &KnowledgeBase,
    candidates: &CandidateSet,
    query: &str,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Vec<TokenSequence>> {
    (0..candidates.len())
        .map(|j| {
            let (desc, name) = candidates.option_text(kb, j)?;
            assemble_option_sequence(desc, query, name, vocab, max_len)
        })
        .collect()
}

pub fn score_options<E: SequenceEncoder>(
    encoder: &E,
    head: &ScoringHead,
    sequences: &[TokenSequence],
) -> Result<OptionForward<E::Tape>> {
    if sequences.is_empty() {
        return Err(Error::InvalidConfig("cannot score an empty candidate set".into()));
    }
    let outputs = sequences
        .iter()
        .map(|s| encoder.encode(s))
        .collect::<Result<Vec<_>>>()?;
    let logits = outputs.iter().map(|o| head.logit(&o.pooled)).collect();
    let pooled = outputs.iter().map(|o| o.pooled.clone()).collect();
    Ok(OptionForward {
        scores: LocalScores::from_logits(logits, pooled),
        outputs,
    })
}

/// Cross entropy `-ln p[gold]` and its gradient with respect to the logits.
pub fn answer_loss(probs: &[f64], gold: usize) -> (f64, Vec<f64>) {
    let loss = -probs[gold].max(PROB_FLOOR).ln();
    let mut grad = probs.to_vec();
    grad[gold] -= 1.0;
    (loss, grad)
}

#[derive(Debug, Clone)]
pub struct NilForward<T> {
    pub judgement: NilJudgement,
    pub hidden: Vec<f64>,
    pub output: EncoderOutput<T>,
}

/// Query-only linkability judgement from `[CLS] Q [SEP]`.
pub fn nil_stage1<E: SequenceEncoder>(
    encoder: &E,
    mlp: &VerifierMlp,
    query_sequence: &TokenSequence,
) -> Result<NilForward<E::Tape>> {
    let output = encoder.encode(query_sequence)?;
    let (hidden, logit) = mlp.forward(&output.pooled);
    Ok(NilForward {
        judgement: NilJudgement::from_logit(logit),
        hidden,
        output,
    })
}

/// Binary cross entropy (label 1 = linkable) and its gradient w.r.t. the logit.
pub fn nil_loss(judgement: &NilJudgement, linkable: bool) -> (f64, f64) {
    let p = judgement.prob;
    let y = if linkable { 1.0 } else { 0.0 };
    let loss = -(y * p.max(PROB_FLOOR).ln() + (1.0 - y) * (1.0 - p).max(PROB_FLOOR).ln());
    (loss, p - y)
}

pub fn joint_local_loss(answer: f64, nil: f64, weights: &LocalLossWeights) -> f64 {
    weights.alpha1 * answer + weights.alpha2 * nil
}

/// Argmax over the options (ties to the earlier option); with a judgement
/// below `threshold` the answer is overridden to NIL.
pub fn local_predict(
    scores: &LocalScores,
    judgement: Option<&NilJudgement>,
    candidates: &CandidateSet,
    threshold: f64,
) -> CandidateOption {
    if judgement.is_some_and(|j| j.prob < threshold) {
        return CandidateOption::Nil;
    }
    match scores.argmax() {
        Some(j) => candidates.option(j),
        None => CandidateOption::Nil,
    }
}

/// Backpropagate option-logit gradients through the head and the encoder.
pub fn backward_options<E: SequenceEncoder>(
    encoder: &E,
    head: &ScoringHead,
    forward: &OptionForward<E::Tape>,
    dlogits: &[f64],
    encoder_grads: &mut E::Grads,
    head_grads: &mut ScoringHead,
) -> Result<()> {
    for (out, &dz) in forward.outputs.iter().zip(dlogits) {
        let dx = head.backward(&out.pooled, dz, head_grads);
        encoder.backprop_into(out, &dx, encoder_grads)?;
    }
    Ok(())
}

pub fn backward_nil<E: SequenceEncoder>(
    encoder: &E,
    mlp: &VerifierMlp,
    forward: &NilForward<E::Tape>,
    dlogit: f64,
    encoder_grads: &mut E::Grads,
    mlp_grads: &mut VerifierMlp,
) -> Result<()> {
    let dx = mlp.backward(&forward.output.pooled, &forward.hidden, dlogit, mlp_grads);
    encoder.backprop_into(&forward.output, &dx, encoder_grads)
}

/// Vocabulary over KB names, aliases, descriptions and corpus texts.
pub fn build_vocabulary(kb: &KnowledgeBase, corpus: &[AnnotatedText]) -> Vocabulary {
    let kb_texts = kb.entities().iter().flat_map(|e| {
        std::iter::once(e.canonical_name.as_str())
            .chain(e.aliases.iter().map(String::as_str))
            .chain(std::iter::once(e.description.as_str()))
    });
    Vocabulary::build(
        [NIL_DESCRIPTION, NIL_NAME]
            .into_iter()
            .chain(kb_texts)
            .chain(corpus.iter().map(|t| t.text.as_str())),
    )
}

/// Trained local model: encoder, option head and verifier MLP.
#[derive(Debug, Clone)]
pub struct LocalModel {
    pub vocab: Vocabulary,
    pub encoder: TransformerEncoder,
    pub head: ScoringHead,
    pub verifier: VerifierMlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalGrads {
    pub encoder: EncoderParams,
    pub head: ScoringHead,
    pub verifier: VerifierMlp,
}

impl Parameters for LocalGrads {
    fn visit(&self, f: &mut Visitor) {
        visit_nested("encoder", &self.encoder, f);
        visit_nested("head", &self.head, f);
        visit_nested("verifier", &self.verifier, f);
    }

    fn visit_mut(&mut self, f: &mut VisitorMut) {
        visit_nested_mut("encoder", &mut self.encoder, f);
        visit_nested_mut("head", &mut self.head, f);
        visit_nested_mut("verifier", &mut self.verifier, f);
    }
}

impl Parameters for LocalModel {
    fn visit(&self, f: &mut Visitor) {
        visit_nested("encoder", self.encoder.params(), f);
        visit_nested("head", &self.head, f);
        visit_nested("verifier", &self.verifier, f);
    }

    fn visit_mut(&mut self, f: &mut VisitorMut) {
        visit_nested_mut("encoder", self.encoder.params_mut(), f);
        visit_nested_mut("head", &mut self.head, f);
        visit_nested_mut("verifier", &mut self.verifier, f);
    }
}

/// Local view of one mention.
#[derive(Debug, Clone)]
pub struct MentionAnalysis {
    pub candidates: CandidateSet,
    pub query: String,
    /// Empty when the candidate set is empty.
    pub scores: LocalScores,
    /// `None` when the verifier is disabled.
    pub judgement: Option<NilJudgement>,
    pub prediction: CandidateOption,
}

/// Gold label of a training mention resolved against its candidate set.
#[derive(Debug, Clone)]
pub struct TrainingUnit {
    pub text: usize,
    pub mention: usize,
    pub candidates: CandidateSet,
    pub option_sequences: Vec<TokenSequence>,
    pub query_sequence: TokenSequence,
    pub gold: CandidateOption,
    /// `None` when the gold answer is not among the options (NIL without a NIL option).
    pub gold_index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub accuracy: f64,
    pub nil_precision: f64,
    pub nil_recall: f64,
}

pub(crate) fn encoder_config_for(cfg: &M3Config, vocab: &Vocabulary, max_len: usize) -> EncoderConfig {
    EncoderConfig {
        vocab_size: vocab.len(),
        max_len,
        seed: cfg.seed,
        ..cfg.encoder.clone()
    }
}

impl LocalModel {
    pub fn new(vocab: Vocabulary, cfg: &M3Config) -> Result<Self> {
        let enc_cfg = encoder_config_for(cfg, &vocab, cfg.max_len_local);
        let d = enc_cfg.d;
        let encoder = TransformerEncoder::new(enc_cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6c6f_6361_6c00);
        let head = ScoringHead::init(d, &mut rng);
        let verifier = VerifierMlp::init(d, &mut rng);
        Ok(Self {
            vocab,
            encoder,
            head,
            verifier,
        })
    }

    pub fn zero_grads(&self) -> LocalGrads {
        let d = self.encoder.width();
        LocalGrads {
            encoder: self.encoder.zero_grads(),
            head: ScoringHead::zeros(d),
            verifier: VerifierMlp::zeros(d),
        }
    }

    pub fn max_len(&self) -> usize {
        self.encoder.max_len()
    }

    /// Candidates, option scores, judgement and prediction for one mention.
    pub fn analyze(
        &self,
        kb: &KnowledgeBase,
        index: &AliasIndex,
        text: &AnnotatedText,
        mention: usize,
        cfg: &M3Config,
    ) -> Result<MentionAnalysis> {
        let candidates = index.generate_candidates(&text.mentions[mention].surface, cfg.k, cfg.verifier);
        let query = build_query(text, mention);
        if candidates.is_empty() {
            return Ok(MentionAnalysis {
                candidates,
                query,
                scores: LocalScores::from_logits(Vec::new(), Vec::new()),
                judgement: None,
                prediction: CandidateOption::Nil,
            });
        }
        let seqs = option_sequences(kb, &candidates, &query, &self.vocab, self.max_len())?;
        let scores = score_options(&self.encoder, &self.head, &seqs)?.scores;
        let judgement = if cfg.verifier {
            let qs = assemble_query_sequence(&query, &self.vocab, self.max_len())?;
            Some(nil_stage1(&self.encoder, &self.verifier, &qs)?.judgement)
        } else {
            None
        };
        let prediction = local_predict(&scores, judgement.as_ref(), &candidates, cfg.nil_threshold);
        Ok(MentionAnalysis {
            candidates,
            query,
            scores,
            judgement,
            prediction,
        })
    }

    /// Joint loss of one unit; accumulates `scale`-weighted gradients when
    /// `grads` is given. Returns the loss and the prediction made on the way.
    pub fn unit_loss(
        &self,
        unit: &TrainingUnit,
        cfg: &M3Config,
        grads: Option<(&mut LocalGrads, f64)>,
    ) -> Result<(f64, CandidateOption)> {
        let weights = LocalLossWeights {
            alpha1: cfg.alpha1,
            alpha2: cfg.alpha2,
        };
        let opts = score_options(&self.encoder, &self.head, &unit.option_sequences)?;
        let nil = if cfg.verifier {
            Some(nil_stage1(&self.encoder, &self.verifier, &unit.query_sequence)?)
        } else {
            None
        };
        let prediction = local_predict(
            &opts.scores,
            nil.as_ref().map(|n| &n.judgement),
            &unit.candidates,
            cfg.nil_threshold,
        );
        let (ans, dlogits) = match unit.gold_index {
            Some(g) => answer_loss(&opts.scores.probs, g),
            None => (0.0, vec![0.0; opts.scores.probs.len()]),
        };
        let (loss, ans_weight, nil_part) = match &nil {
            Some(n) => {
                let (l_nil, dnil) = nil_loss(&n.judgement, !unit.gold.is_nil());
                (joint_local_loss(ans, l_nil, &weights), weights.alpha1, Some((n, dnil)))
            }
            None => (ans, 1.0, None),
        };
        if let Some((g, scale)) = grads {
            if unit.gold_index.is_some() {
                let dl: Vec<f64> = dlogits.iter().map(|x| x * ans_weight * scale).collect();
                backward_options(&self.encoder, &self.head, &opts, &dl, &mut g.encoder, &mut g.head)?;
            }
            if let Some((n, dnil)) = nil_part {
                let dl = dnil * weights.alpha2 * scale;
                backward_nil(&self.encoder, &self.verifier, n, dl, &mut g.encoder, &mut g.verifier)?;
            }
        }
        Ok((loss, prediction))
    }
}

impl LocalModel {
    pub fn to_checkpoint(&self, cfg: &M3Config) -> Checkpoint {
        let mut ckpt = Checkpoint::new(serde_json::json!({
            "kind": "local",
            "config": cfg,
            "encoder": self.encoder.config(),
            "vocab": self.vocab.user_tokens(),
        }));
        ckpt.push_section("encoder", self.encoder.params());
        ckpt.push_section("head", &self.head);
        ckpt.push_section("verifier", &self.verifier);
        ckpt
    }

    /// Rebuild a model and the configuration it was trained with.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, M3Config)> {
        let header = CheckpointHeader::parse(ckpt, "local")?;
        let d = header.encoder.d;
        let mut params = EncoderParams::zeros(&header.encoder);
        ckpt.load_section("encoder", &mut params)?;
        let mut head = ScoringHead::zeros(d);
        ckpt.load_section("head", &mut head)?;
        let mut verifier = VerifierMlp::zeros(d);
        ckpt.load_section("verifier", &mut verifier)?;
        let model = Self {
            encoder: TransformerEncoder::from_params(header.encoder, params)?,
            vocab: header.vocab,
            head,
            verifier,
        };
        Ok((model, header.config))
    }

    pub fn save(&self, path: &Path, cfg: &M3Config) -> Result<()> {
        let file = BufWriter::new(File::create(path)?);
        write_checkpoint(file, &self.to_checkpoint(cfg))
    }

    pub fn load(path: &Path) -> Result<(Self, M3Config)> {
        Self::from_checkpoint(&read_checkpoint(BufReader::new(File::open(path)?))?)
    }
}

/// Header fields shared by the local and global checkpoints.
pub(crate) struct CheckpointHeader {
    pub config: M3Config,
    pub encoder: EncoderConfig,
    pub vocab: Vocabulary,
}

impl CheckpointHeader {
    pub fn parse(ckpt: &Checkpoint, kind: &str) -> Result<Self> {
        let h = &ckpt.header;
        let found = h.get("kind").and_then(|k| k.as_str()).unwrap_or("");
        if found != kind {
            return Err(Error::ModelMismatch(format!("expected a {kind} checkpoint, found {found:?}")));
        }
        let field = |name: &str| {
            h.get(name)
                .cloned()
                .ok_or_else(|| Error::Format(format!("checkpoint header lacks {name}")))
        };
        let config: M3Config = serde_json::from_value(field("config")?)?;
        let encoder: EncoderConfig = serde_json::from_value(field("encoder")?)?;
        let tokens: Vec<String> = serde_json::from_value(field("vocab")?)?;
        let vocab = Vocabulary::from_tokens(tokens)?;
        if vocab.len() != encoder.vocab_size {
            return Err(Error::ModelMismatch(format!(
                "vocabulary has {} tokens but the encoder expects {}",
                vocab.len(),
                encoder.vocab_size
            )));
        }
        Ok(Self { config, encoder, vocab })
    }
}

/// Training units for every gold-labelled mention.
///
/// When candidate generation misses the gold entity it replaces the least
/// popular candidate. Mentions left without any option are skipped.
pub fn training_units(
    corpus: &[AnnotatedText],
    kb: &KnowledgeBase,
    index: &AliasIndex,
    vocab: &Vocabulary,
    cfg: &M3Config,
    max_len: usize,
) -> Result<Vec<TrainingUnit>> {
    let mut units = Vec::new();
    for (ti, text) in corpus.iter().enumerate() {
        for (mi, m) in text.mentions.iter().enumerate() {
            let Some(gold) = &m.gold else { continue };
            let mut candidates = index.generate_candidates(&m.surface, cfg.k, cfg.verifier);
            if let CandidateOption::Entity(id) = gold {
                if !kb.contains(id) {
                    return Err(Error::UnknownEntity(id.0.clone()));
                }
                candidates.inject_gold(id, cfg.k);
            }
            if candidates.is_empty() {
                continue;
            }
            let query = build_query(text, mi);
            units.push(TrainingUnit {
                text: ti,
                mention: mi,
                option_sequences: option_sequences(kb, &candidates, &query, vocab, max_len)?,
                query_sequence: assemble_query_sequence(&query, vocab, max_len)?,
                gold_index: candidates.index_of(gold),
                gold: gold.clone(),
                candidates,
            });
        }
    }
    Ok(units)
}

pub(crate) struct NilTally {
    pub predicted: usize,
    pub gold: usize,
    pub both: usize,
}

impl NilTally {
    pub fn new() -> Self {
        Self {
            predicted: 0,
            gold: 0,
            both: 0,
        }
    }

    pub fn add(&mut self, predicted: &CandidateOption, gold: &CandidateOption) {
        self.predicted += usize::from(predicted.is_nil());
        self.gold += usize::from(gold.is_nil());
        self.both += usize::from(predicted.is_nil() && gold.is_nil());
    }

    pub fn precision(&self) -> f64 {
        ratio(self.both, self.predicted)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.both, self.gold)
    }
}

pub(crate) fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Train the local model with the joint loss.
///
/// Units are shuffled every epoch by the run seed; each optimizer step
/// averages the gradients of `local.batch_size` units summed in a fixed
/// order, so a run is bitwise reproducible.
pub fn train_local(
    corpus: &[AnnotatedText],
    kb: &KnowledgeBase,
    index: &AliasIndex,
    cfg: &M3Config,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(LocalModel, Vec<EpochLog>)> {
    cfg.validate()?;
    let vocab = build_vocabulary(kb, corpus);
    let mut model = LocalModel::new(vocab, cfg)?;
    let units = training_units(corpus, kb, index, &model.vocab, cfg, model.max_len())?;
    let batch = cfg.local.batch_size;
    let steps_per_epoch = units.len().div_ceil(batch);
    let schedule = WarmupSchedule {
        peak: cfg.lr_local,
        warmup_fraction: cfg.local.warmup,
        total_steps: steps_per_epoch * cfg.local.epochs,
    };
    let mut state = AdamState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..units.len()).collect();
    let mut logs = Vec::with_capacity(cfg.local.epochs);
    for epoch in 0..cfg.local.epochs {
        order.shuffle(&mut rng);
        let mut total_loss = 0.0;
        let mut correct = 0;
        let mut nil = NilTally::new();
        for chunk in order.chunks(batch) {
            let mut grads = model.zero_grads();
            let scale = 1.0 / chunk.len() as f64;
            for &u in chunk {
                let unit = &units[u];
                let (loss, pred) = model.unit_loss(unit, cfg, Some((&mut grads, scale)))?;
                total_loss += loss;
                correct += usize::from(pred == unit.gold);
                nil.add(&pred, &unit.gold);
            }
            adam_step(&mut model, &grads, &mut state, &schedule)?;
        }
        let log = EpochLog {
            epoch: epoch + 1,
            mean_loss: total_loss / units.len().max(1) as f64,
            accuracy: ratio(correct, units.len()),
            nil_precision: nil.precision(),
            nil_recall: nil.recall(),
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok((model, logs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{finite_difference, max_relative_error};

    fn set(n_entities: usize, nil: bool) -> CandidateSet {
        CandidateSet {
            surface: "s".into(),
            entities: (0..n_entities).map(|i| format!("e{}", i + 1).as_str().into()).collect(),
            includes_nil: nil,
        }
    }

    fn scores(probs: &[f64]) -> LocalScores {
        LocalScores {
            logits: probs.iter().map(|p| p.ln()).collect(),
            probs: probs.to_vec(),
            pooled: vec![],
        }
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.3, 0.3, 0.3]);
        assert!(p.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-15));
        let a = softmax(&[0.1, -2.0, 1.7]);
        let b = softmax(&[100.1, 98.0, 101.7]);
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
        // exp(2) / (exp(2) + 1) evaluated independently: 0.8807970779778823
        let p = softmax(&[2.0, 0.0]);
        assert!((p[0] - 0.880_797_077_977_882_3).abs() < 1e-12);
        assert!((p[1] - 0.119_202_922_022_117_7).abs() < 1e-12);
    }

    #[test]
    fn answer_loss_examples() {
        assert_eq!(answer_loss(&[0.0, 1.0], 1).0, 0.0);
        let (l, _) = answer_loss(&[0.25; 4], 2);
        assert!((l - 4f64.ln()).abs() < 1e-15);
        let (l, _) = answer_loss(&[1.0, 0.0], 1);
        assert!((l - 1e30f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn answer_gradient_matches_finite_differences() {
        let logits = [0.3, -1.2, 2.2, 0.05];
        let (_, grad) = answer_loss(&softmax(&logits), 2);
        for i in 0..4 {
            let h = 1e-5;
            let mut up = logits;
            up[i] += h;
            let mut dn = logits;
            dn[i] -= h;
            let fd = (answer_loss(&softmax(&up), 2).0 - answer_loss(&softmax(&dn), 2).0) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn nil_loss_examples() {
        let half = NilJudgement::from_logit(0.0);
        assert_eq!(half.prob, 0.5);
        assert!((nil_loss(&half, true).0 - 2f64.ln()).abs() < 1e-15);
        assert!((nil_loss(&half, false).0 - 2f64.ln()).abs() < 1e-15);
        assert!(NilJudgement::from_logit(20.0).prob > 0.9999);
        assert!(nil_loss(&NilJudgement::from_logit(40.0), true).0 < 1e-15);
        // spreadsheet-style recomputation
        for (z, y) in [(0.7, true), (-1.3, false), (2.5, false), (-0.2, true)] {
            let p = 1.0 / (1.0 + f64::exp(-z));
            let want = if y { -p.ln() } else { -(1.0 - p).ln() };
            let (got, dz) = nil_loss(&NilJudgement::from_logit(z), y);
            assert!((got - want).abs() < 1e-12);
            assert!((dz - (p - if y { 1.0 } else { 0.0 })).abs() < 1e-12);
        }
    }

    #[test]
    fn joint_loss_examples() {
        let w = LocalLossWeights::default();
        assert_eq!((w.alpha1, w.alpha2), (0.75, 0.25));
        let ln2 = 2f64.ln();
        assert!((joint_local_loss(ln2, ln2, &w) - ln2).abs() < 1e-15);
        let only = LocalLossWeights {
            alpha1: 0.75,
            alpha2: 0.0,
        };
        assert_eq!(joint_local_loss(1.3, 9.0, &only), 0.75 * 1.3);
    }

    #[test]
    fn prediction_rules() {
        let c = set(2, true);
        let high = NilJudgement::from_logit(2.2);
        let low = NilJudgement::from_logit(-1.4);
        assert!(high.prob > 0.89 && low.prob < 0.2);
        assert_eq!(local_predict(&scores(&[0.1, 0.2, 0.7]), Some(&high), &c, 0.5), CandidateOption::Nil);
        assert_eq!(local_predict(&scores(&[0.8, 0.1, 0.1]), Some(&low), &c, 0.5), CandidateOption::Nil);
        assert_eq!(
            local_predict(&scores(&[0.8, 0.1, 0.1]), Some(&high), &c, 0.5),
            CandidateOption::Entity("e1".into())
        );
        assert_eq!(
            local_predict(&scores(&[0.4, 0.4, 0.2]), None, &c, 0.5),
            CandidateOption::Entity("e1".into())
        );
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mlp = VerifierMlp::init(6, &mut rng);
        let x: Vec<f64> = (0..6).map(|i| (i as f64 * 0.9).sin()).collect();
        for linkable in [true, false] {
            let (hidden, logit) = mlp.forward(&x);
            let (_, dz) = nil_loss(&NilJudgement::from_logit(logit), linkable);
            let mut g = VerifierMlp::zeros(6);
            mlp.backward(&x, &hidden, dz, &mut g);
            let numeric = finite_difference(&mlp, 1e-5, |m| {
                nil_loss(&NilJudgement::from_logit(m.forward(&x).1), linkable).0
            });
            assert!(max_relative_error(&g.flatten(), &numeric, 1e-9) < 1e-5);
        }
    }

    fn tiny_world() -> (KnowledgeBase, AliasIndex, Vec<AnnotatedText>) {
        use crate::corpus::Mention;
        use crate::kb::Entity;
        let ent = |id: &str, name: &str, desc: &str, pop| Entity {
            id: id.into(),
            canonical_name: name.into(),
            description: desc.into(),
            aliases: vec!["li na".into()],
            popularity: pop,
        };
        let kb = KnowledgeBase::new(vec![
            ent("Q1", "li na tennis", "tennis player", 9),
            ent("Q2", "li na singer", "pop singer", 4),
        ])
        .unwrap();
        let index = AliasIndex::build(&kb);
        let text = |t: &str, gold: CandidateOption| {
            AnnotatedText::new(
                None,
                t.into(),
                vec![Mention {
                    start: 0,
                    end: 5,
                    surface: "li na".into(),
                    gold: Some(gold),
                    tag: None,
                }],
            )
            .unwrap()
        };
        let corpus = vec![
            text("li na won the tennis final", CandidateOption::Entity("Q1".into())),
            text("li na sang a pop song", CandidateOption::Entity("Q2".into())),
            text("li na ate some rice", CandidateOption::Nil),
        ];
        (kb, index, corpus)
    }

    fn tiny_config(verifier: bool) -> M3Config {
        M3Config {
            verifier,
            encoder: EncoderConfig {
                d: 4,
                n_layers: 1,
                n_heads: 2,
                ..EncoderConfig::default()
            },
            max_len_local: 24,
            ..M3Config::default()
        }
    }

    #[test]
    fn joint_loss_gradient_matches_finite_differences() {
        let (kb, index, corpus) = tiny_world();
        for verifier in [true, false] {
            let cfg = tiny_config(verifier);
            let vocab = build_vocabulary(&kb, &corpus);
            let model = LocalModel::new(vocab, &cfg).unwrap();
            let units = training_units(&corpus, &kb, &index, &model.vocab, &cfg, 24).unwrap();
            assert_eq!(units.len(), 3);
            for unit in &units {
                let mut g = model.zero_grads();
                model.unit_loss(unit, &cfg, Some((&mut g, 1.0))).unwrap();
                let numeric = finite_difference(&model, 1e-5, |m| m.unit_loss(unit, &cfg, None).unwrap().0);
                let err = max_relative_error(&g.flatten(), &numeric, 1e-8);
                assert!(err < 1e-4, "verifier={verifier} relative error {err}");
            }
        }
    }

    #[test]
    fn training_reduces_loss_and_is_reproducible() {
        let (kb, index, corpus) = tiny_world();
        let mut cfg = tiny_config(true);
        cfg.lr_local = 1e-2;
        cfg.local.epochs = 30;
        cfg.local.batch_size = 2;
        let (a, logs) = train_local(&corpus, &kb, &index, &cfg, |_| {}).unwrap();
        assert!(logs.last().unwrap().mean_loss < logs[0].mean_loss);
        let (b, _) = train_local(&corpus, &kb, &index, &cfg, |_| {}).unwrap();
        assert_eq!(a.flatten(), b.flatten());
    }

    #[test]
    fn checkpoint_round_trip() {
        let (kb, _, corpus) = tiny_world();
        let cfg = tiny_config(true);
        let model = LocalModel::new(build_vocabulary(&kb, &corpus), &cfg).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &model.to_checkpoint(&cfg)).unwrap();
        let (back, cfg2) = LocalModel::from_checkpoint(&read_checkpoint(&buf[..]).unwrap()).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(back.flatten(), model.flatten());
        assert_eq!(back.vocab, model.vocab);
        let mut other = model.to_checkpoint(&cfg);
        other.header["kind"] = "global".into();
        assert!(matches!(LocalModel::from_checkpoint(&other), Err(Error::ModelMismatch(_))));
    }
}
