//! End-to-end linking, rear fusion, evaluation and the synthetic world.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::M3Config;
use crate::corpus::{AnnotatedText, Mention};
use crate::error::{Error, Result};
use crate::global::GlobalModel;
use crate::kb::{AliasIndex, CandidateOption, Entity, EntityId, KnowledgeBase};
use crate::local::{argmax, ratio, LocalModel};

/// `β·local + (1−β)·global`, elementwise.
pub fn rear_fusion(local: &[f64], global: &[f64], beta: f64) -> Result<Vec<f64>> {
    if local.len() != global.len() {
        return Err(Error::DimensionMismatch {
            what: "fused score vectors",
            expected: local.len(),
            got: global.len(),
        });
    }
    Ok(local
        .iter()
        .zip(global)
        .map(|(l, g)| beta * l + (1.0 - beta) * g)
        .collect())
}

/// One line of the decisions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkDecision {
    pub text_id: Option<String>,
    pub mention: usize,
    pub start: usize,
    pub end: usize,
    /// Position in the processing order, starting at 0.
    pub rank: usize,
    /// Option labels in candidate order (`"NIL"` for the NIL option).
    pub options: Vec<String>,
    pub local: Vec<f64>,
    pub global: Option<Vec<f64>>,
    pub fused: Option<Vec<f64>>,
    /// Stage one of the verifier judged the mention unlinkable; the local
    /// vector entering the fusion was then the NIL indicator.
    #[serde(default)]
    pub nil_override: bool,
    pub selected: String,
}

impl LinkDecision {
    pub fn selection(&self) -> CandidateOption {
        CandidateOption::from_label(&self.selected)
    }
}

/// Link every mention of `text`. Without a global model the pipeline is
/// local only. Decisions come back in text order.
pub fn link_text(
    text: &AnnotatedText,
    kb: &KnowledgeBase,
    index: &AliasIndex,
    local: &LocalModel,
    global: Option<&GlobalModel>,
    cfg: &M3Config,
) -> Result<Vec<LinkDecision>> {
    let analyses = (0..text.mentions.len())
        .map(|mi| local.analyze(kb, index, text, mi, cfg))
        .collect::<Result<Vec<_>>>()?;
    let turns = match global {
        Some(g) => Some(g.run_multi_turn(kb, text, &analyses, cfg)?),
        None => None,
    };
    let local_rank = crate::global::processing_order(&analyses, cfg);
    let mut decisions = Vec::with_capacity(analyses.len());
    for (mi, a) in analyses.iter().enumerate() {
        let m = &text.mentions[mi];
        let nil_override = a.judgement.is_some_and(|j| j.prob < cfg.nil_threshold);
        let (rank, global_probs) = match &turns {
            Some(t) => (t.turns[mi].rank, t.turns[mi].global.as_ref().map(|s| s.probs.clone())),
            None => (local_rank.order.iter().position(|&x| x == mi).expect("ranked"), None),
        };
        let (fused, selected) = match &global_probs {
            Some(gp) => {
                let local_in = match (nil_override, a.candidates.nil_index()) {
                    (true, Some(n)) => (0..gp.len()).map(|j| if j == n { 1.0 } else { 0.0 }).collect(),
                    _ => a.scores.probs.clone(),
                };
                let fused = rear_fusion(&local_in, gp, cfg.beta)?;
                let best = argmax(&fused).expect("non-empty options");
                let selected = a.candidates.option(best);
                (Some(fused), selected)
            }
            None => (None, a.prediction.clone()),
        };
        decisions.push(LinkDecision {
            text_id: text.id.clone(),
            mention: mi,
            start: m.start,
            end: m.end,
            rank,
            options: a.candidates.options().map(|o| o.label().to_string()).collect(),
            local: a.scores.probs.clone(),
            global: global_probs,
            fused,
            nil_override,
            selected: selected.label().to_string(),
        });
    }
    Ok(decisions)
}

pub fn link_corpus(
    corpus: &[AnnotatedText],
    kb: &KnowledgeBase,
    index: &AliasIndex,
    local: &LocalModel,
    global: Option<&GlobalModel>,
    cfg: &M3Config,
) -> Result<Vec<LinkDecision>> {
    let mut out = Vec::new();
    for text in corpus {
        out.extend(link_text(text, kb, index, local, global, cfg)?);
    }
    Ok(out)
}

pub fn write_decisions<W: Write>(mut w: W, decisions: &[LinkDecision]) -> Result<()> {
    for d in decisions {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_decisions<R: BufRead>(reader: R) -> Result<Vec<LinkDecision>> {
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("decisions line {}: {e}", lineno + 1)))?,
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub mentions: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mentions: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub nil_precision: f64,
    /// False when nothing was predicted NIL (precision reported as 0).
    pub nil_precision_defined: bool,
    pub nil_recall: f64,
    /// False when no gold mention is NIL (recall reported as 0).
    pub nil_recall_defined: bool,
    /// Accuracy keyed by the number of mentions in the text.
    pub by_mention_count: BTreeMap<usize, Bucket>,
}

/// Score decisions against the gold corpus.
pub fn evaluate(corpus: &[AnnotatedText], decisions: &[LinkDecision]) -> Result<EvalReport> {
    evaluate_where(corpus, decisions, |_| true)
}

/// As [`evaluate`], counting only mentions accepted by `keep`.
pub fn evaluate_where(
    corpus: &[AnnotatedText],
    decisions: &[LinkDecision],
    mut keep: impl FnMut(&Mention) -> bool,
) -> Result<EvalReport> {
    let expected: usize = corpus.iter().map(|t| t.mentions.len()).sum();
    if expected != decisions.len() {
        return Err(Error::Format(format!(
            "{} decisions for {expected} corpus mentions",
            decisions.len()
        )));
    }
    let mut at = 0;
    let (mut total, mut correct) = (0, 0);
    let (mut pred_nil, mut gold_nil, mut both_nil) = (0, 0, 0);
    let mut buckets: BTreeMap<usize, Bucket> = BTreeMap::new();
    for text in corpus {
        for (mi, m) in text.mentions.iter().enumerate() {
            let d = &decisions[at];
            at += 1;
            if d.text_id != text.id || d.mention != mi || d.start != m.start || d.end != m.end {
                return Err(Error::Format(format!(
                    "decision {} does not match mention {mi} of text {:?}",
                    at - 1,
                    text.id
                )));
            }
            if !keep(m) {
                continue;
            }
            let gold = m
                .gold
                .as_ref()
                .ok_or_else(|| Error::Format(format!("mention {mi} of text {:?} has no gold label", text.id)))?;
            let pred = d.selection();
            let ok = pred == *gold;
            total += 1;
            correct += usize::from(ok);
            pred_nil += usize::from(pred.is_nil());
            gold_nil += usize::from(gold.is_nil());
            both_nil += usize::from(pred.is_nil() && gold.is_nil());
            let b = buckets.entry(text.mentions.len()).or_default();
            b.mentions += 1;
            b.correct += usize::from(ok);
        }
    }
    for b in buckets.values_mut() {
        b.accuracy = ratio(b.correct, b.mentions);
    }
    Ok(EvalReport {
        mentions: total,
        correct,
        accuracy: ratio(correct, total),
        nil_precision: ratio(both_nil, pred_nil),
        nil_precision_defined: pred_nil > 0,
        nil_recall: ratio(both_nil, gold_nil),
        nil_recall_defined: gold_nil > 0,
        by_mention_count: buckets,
    })
}

/// Sizes and rates of a generated world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub seed: u64,
    pub entities: usize,
    pub clusters: usize,
    /// Share of entities that share their surface with entities of other clusters.
    pub ambiguous_share: f64,
    pub train_texts: usize,
    /// Share of training texts that are planted-coherence texts.
    pub train_planted_share: f64,
    pub test_planted: usize,
    pub test_other: usize,
    /// Target share of NIL gold mentions.
    pub nil_rate: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            entities: 200,
            clusters: 10,
            ambiguous_share: 0.6,
            train_texts: 300,
            train_planted_share: 0.3,
            test_planted: 200,
            test_other: 200,
            nil_rate: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub kb: KnowledgeBase,
    pub train: Vec<AnnotatedText>,
    pub test: Vec<AnnotatedText>,
}

pub const TAG_CUE: &str = "cue";
pub const TAG_NIL: &str = "nil";
pub const TAG_ANCHOR: &str = "anchor";
pub const TAG_PLANTED: &str = "planted";

const TOPIC_WORDS: usize = 4;
const FILLER_WORDS: usize = 12;
const MUNDANE_WORDS: usize = 8;

struct WordMint {
    used: HashSet<String>,
}

impl WordMint {
    fn next(&mut self, rng: &mut ChaCha8Rng) -> String {
        const ONSETS: [&str; 16] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "tr"];
        const VOWELS: [&str; 6] = ["a", "e", "i", "o", "u", "ai"];
        loop {
            let syllables = rng.random_range(2..=3);
            let w: String = (0..syllables)
                .map(|_| format!("{}{}", ONSETS.choose(rng).unwrap(), VOWELS.choose(rng).unwrap()))
                .collect();
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }

    fn many(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
        (0..n).map(|_| self.next(rng)).collect()
    }
}

struct Cluster {
    label: String,
    topics: Vec<String>,
    /// Unambiguous entities used as anchors in training texts.
    anchors: Vec<usize>,
    /// Anchors reserved for held-out planted texts.
    held_out: Vec<usize>,
    /// Entities with a shared surface.
    ambiguous: Vec<usize>,
}

enum Piece {
    Word(String),
    Mention { entity: Option<usize>, surface: String, tag: &'static str },
}

struct Generator {
    rng: ChaCha8Rng,
    entities: Vec<Entity>,
    /// Entity → cluster.
    cluster_of: Vec<usize>,
    /// Surface → entities sharing it.
    groups: Vec<Vec<usize>>,
    clusters: Vec<Cluster>,
    fillers: Vec<String>,
    mundane: Vec<String>,
    nil_mentions: usize,
    mentions: usize,
}

impl Generator {
    fn surface(&self, e: usize) -> String {
        self.entities[e].aliases[1].clone()
    }

    fn fillers(&mut self, lo: usize, hi: usize) -> Vec<Piece> {
        let n = self.rng.random_range(lo..=hi);
        (0..n)
            .map(|_| Piece::Word(self.fillers.choose(&mut self.rng).unwrap().clone()))
            .collect()
    }

    fn entity_mention(&self, e: usize, tag: &'static str) -> Piece {
        Piece::Mention {
            entity: Some(e),
            surface: self.surface(e),
            tag,
        }
    }

    /// 1–3 mentions of one cluster with cue words from that cluster.
    fn cue_text(&mut self) -> Vec<Piece> {
        let c = self.rng.random_range(0..self.clusters.len());
        let n = self.rng.random_range(1..=3);
        let pool: Vec<usize> = self.clusters[c]
            .ambiguous
            .iter()
            .chain(&self.clusters[c].anchors)
            .copied()
            .collect();
        let chosen: Vec<usize> = pool.choose_multiple(&mut self.rng, n).copied().collect();
        let mut pieces: Vec<Piece> = chosen.iter().map(|&e| self.entity_mention(e, TAG_CUE)).collect();
        let cue_pool: Vec<String> = std::iter::once(self.clusters[c].label.clone())
            .chain(self.clusters[c].topics.iter().cloned())
            .collect();
        let cues = self.rng.random_range(2..=3);
        for w in cue_pool.choose_multiple(&mut self.rng, cues) {
            pieces.push(Piece::Word(w.clone()));
        }
        pieces.extend(self.fillers(0, 2));
        pieces.shuffle(&mut self.rng);
        self.mentions += chosen.len();
        pieces
    }

    /// A shared surface in an unrelated, mundane context: gold is NIL.
    fn nil_text(&mut self) -> Vec<Piece> {
        let group = self.groups.choose(&mut self.rng).unwrap().clone();
        let surface = self.surface(group[0]);
        let mut pieces = vec![Piece::Mention {
            entity: None,
            surface,
            tag: TAG_NIL,
        }];
        let n = self.rng.random_range(2..=3);
        for w in self.mundane.choose_multiple(&mut self.rng, n) {
            pieces.push(Piece::Word(w.clone()));
        }
        pieces.extend(self.fillers(0, 2));
        pieces.shuffle(&mut self.rng);
        self.mentions += 1;
        self.nil_mentions += 1;
        pieces
    }

    /// A shared surface whose only cue is an unambiguous anchor of the gold
    /// entity's cluster.
    fn planted_text(&mut self, held_out: bool) -> Vec<Piece> {
        let group = self.groups.choose(&mut self.rng).unwrap().clone();
        let gold = *group.choose(&mut self.rng).unwrap();
        let c = &self.clusters[self.cluster_of[gold]];
        let anchors = if held_out { &c.held_out } else { &c.anchors };
        let anchor = *anchors.choose(&mut self.rng).unwrap();
        let mut pieces = vec![
            self.entity_mention(anchor, TAG_ANCHOR),
            self.entity_mention(gold, TAG_PLANTED),
        ];
        pieces.extend(self.fillers(1, 3));
        pieces.shuffle(&mut self.rng);
        self.mentions += 2;
        pieces
    }

    fn other_text(&mut self, nil_rate: f64) -> Vec<Piece> {
        if (self.nil_mentions as f64) < nil_rate * (self.mentions + 1) as f64 {
            self.nil_text()
        } else {
            self.cue_text()
        }
    }

    fn render(&self, id: String, pieces: Vec<Piece>) -> AnnotatedText {
        let mut text = String::new();
        let mut mentions = Vec::new();
        for p in pieces {
            if !text.is_empty() {
                text.push(' ');
            }
            match p {
                Piece::Word(w) => text.push_str(&w),
                Piece::Mention { entity, surface, tag } => {
                    let start = text.chars().count();
                    text.push_str(&surface);
                    mentions.push(Mention {
                        start,
                        end: start + surface.chars().count(),
                        surface,
                        gold: Some(match entity {
                            Some(e) => CandidateOption::Entity(self.entities[e].id.clone()),
                            None => CandidateOption::Nil,
                        }),
                        tag: Some(tag.to_string()),
                    });
                }
            }
        }
        AnnotatedText::new(Some(id), text, mentions).expect("generated spans are valid")
    }
}

/// Generate a KB plus training and test corpora.
///
/// Entities fall into topical clusters, each with a label word (in every
/// canonical name and description) and topic words (in descriptions and as
/// context cues). Some surfaces are shared by 2–3 entities of different
/// clusters; the rest belong to a single anchor entity. Text kinds:
/// cue texts (cluster words in context), NIL texts (a shared surface among
/// mundane words, never a KB entity) and planted texts (a shared surface
/// next to an anchor of the gold entity's cluster and nothing else). Test
/// planted texts use anchors never seen in training, so their only route to
/// the cluster is the anchor's linked canonical name.
pub fn generate_synthetic_world(spec: &SynthSpec) -> Result<SyntheticWorld> {
    if spec.entities == 0 || spec.clusters < 3 || spec.entities < 6 * spec.clusters {
        return Err(Error::InvalidConfig(
            "synthetic world needs at least 3 clusters and 6 entities per cluster".into(),
        ));
    }
    if !(0.0..1.0).contains(&spec.nil_rate) || !(0.0..=1.0).contains(&spec.ambiguous_share) {
        return Err(Error::InvalidConfig("rates must lie in [0, 1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut mint = WordMint { used: HashSet::new() };
    let mut clusters: Vec<Cluster> = (0..spec.clusters)
        .map(|_| Cluster {
            label: mint.next(&mut rng),
            topics: mint.many(TOPIC_WORDS, &mut rng),
            anchors: Vec::new(),
            held_out: Vec::new(),
            ambiguous: Vec::new(),
        })
        .collect();
    let fillers = mint.many(FILLER_WORDS, &mut rng);
    let mundane = mint.many(MUNDANE_WORDS, &mut rng);

    // Round-robin cluster assignment; the first entities of each cluster
    // become anchors, half of them held out.
    let per_cluster = spec.entities / spec.clusters;
    let anchors_per_cluster = ((per_cluster as f64 * (1.0 - spec.ambiguous_share)).round() as usize).clamp(2, per_cluster - 2);
    let cluster_of: Vec<usize> = (0..spec.entities).map(|e| e % spec.clusters).collect();
    let mut slot = vec![0usize; spec.clusters];
    let mut ambiguous_by_cluster: Vec<Vec<usize>> = vec![Vec::new(); spec.clusters];
    for e in 0..spec.entities {
        let c = cluster_of[e];
        let s = slot[c];
        slot[c] += 1;
        if s < anchors_per_cluster {
            if s.is_multiple_of(2) {
                clusters[c].anchors.push(e);
            } else {
                clusters[c].held_out.push(e);
            }
        } else {
            ambiguous_by_cluster[c].push(e);
        }
    }
    // Groups of 2–3 entities from distinct clusters share a surface.
    let mut surfaces: Vec<String> = vec![String::new(); spec.entities];
    let mut groups = Vec::new();
    for c in clusters.iter().flat_map(|c| c.anchors.iter().chain(&c.held_out)) {
        surfaces[*c] = mint.next(&mut rng);
    }
    loop {
        let mut open: Vec<usize> = (0..spec.clusters).filter(|&c| !ambiguous_by_cluster[c].is_empty()).collect();
        if open.is_empty() {
            break;
        }
        open.shuffle(&mut rng);
        let size = rng.random_range(2..=3).min(open.len());
        let surface = mint.next(&mut rng);
        let group: Vec<usize> = open[..size]
            .iter()
            .map(|&c| ambiguous_by_cluster[c].pop().unwrap())
            .collect();
        for &e in &group {
            surfaces[e] = surface.clone();
            clusters[cluster_of[e]].ambiguous.push(e);
        }
        groups.push(group);
    }
    let mut singletons = Vec::new();
    groups.retain(|g| {
        if g.len() < 2 {
            singletons.push(g[0]);
        }
        g.len() >= 2
    });
    // A leftover singleton keeps a private surface and acts as a training anchor.
    for e in singletons {
        let c = cluster_of[e];
        clusters[c].ambiguous.retain(|&x| x != e);
        clusters[c].anchors.push(e);
    }

    let entities: Vec<Entity> = (0..spec.entities)
        .map(|e| {
            let c = &clusters[cluster_of[e]];
            let name = format!("{} {}", surfaces[e], c.label);
            Entity {
                id: EntityId::new(format!("E{:04}", e + 1)),
                canonical_name: name.clone(),
                description: format!("{} {}", c.label, c.topics.join(" ")),
                aliases: vec![name, surfaces[e].clone()],
                popularity: rng.random_range(1..=100),
            }
        })
        .collect();

    let mut gen = Generator {
        rng,
        entities,
        cluster_of,
        groups,
        clusters,
        fillers,
        mundane,
        nil_mentions: 0,
        mentions: 0,
    };
    let mut train = Vec::with_capacity(spec.train_texts);
    for i in 0..spec.train_texts {
        let planted = gen.rng.random_bool(spec.train_planted_share.clamp(0.0, 1.0));
        let pieces = if planted {
            gen.planted_text(false)
        } else {
            gen.other_text(spec.nil_rate)
        };
        train.push(gen.render(format!("train-{i:04}"), pieces));
    }
    let mut kinds: Vec<bool> = std::iter::repeat_n(true, spec.test_planted)
        .chain(std::iter::repeat_n(false, spec.test_other))
        .collect();
    kinds.shuffle(&mut gen.rng);
    gen.nil_mentions = 0;
    gen.mentions = 0;
    let mut test = Vec::with_capacity(kinds.len());
    for (i, planted) in kinds.into_iter().enumerate() {
        let pieces = if planted {
            gen.planted_text(true)
        } else {
            gen.other_text(spec.nil_rate)
        };
        test.push(gen.render(format!("test-{i:04}"), pieces));
    }
    Ok(SyntheticWorld {
        kb: KnowledgeBase::new(gen.entities)?,
        train,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fusion_examples() {
        let f = rear_fusion(&[0.28, 0.63], &[0.59, 0.08], 0.5).unwrap();
        assert!((f[0] - 0.435).abs() < 1e-12 && (f[1] - 0.355).abs() < 1e-12);
        let f = rear_fusion(&[0.54, 0.07], &[0.97, 0.01], 0.5).unwrap();
        assert!((f[0] - 0.755).abs() < 1e-12 && (f[1] - 0.04).abs() < 1e-12);
        let l = [0.2, 0.3, 0.5];
        assert_eq!(rear_fusion(&l, &[0.9, 0.05, 0.05], 1.0).unwrap(), l.to_vec());
        assert!(matches!(rear_fusion(&l, &[0.5, 0.5], 0.5), Err(Error::DimensionMismatch { .. })));
    }

    fn decision(text: &AnnotatedText, mi: usize, selected: &str) -> LinkDecision {
        LinkDecision {
            text_id: text.id.clone(),
            mention: mi,
            start: text.mentions[mi].start,
            end: text.mentions[mi].end,
            rank: mi,
            options: vec![],
            local: vec![],
            global: None,
            fused: None,
            nil_override: false,
            selected: selected.into(),
        }
    }

    #[test]
    fn evaluation_examples() {
        let world = generate_synthetic_world(&SynthSpec {
            train_texts: 20,
            test_planted: 4,
            test_other: 4,
            ..SynthSpec::default()
        })
        .unwrap();
        let corpus = &world.train;
        let perfect: Vec<LinkDecision> = corpus
            .iter()
            .flat_map(|t| (0..t.mentions.len()).map(move |mi| decision(t, mi, t.mentions[mi].gold.as_ref().unwrap().label())))
            .collect();
        let r = evaluate(corpus, &perfect).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.mentions, perfect.len());

        // four mentions, one wrong
        let t = &world.train[..];
        let four: Vec<AnnotatedText> = {
            let mut acc = Vec::new();
            let mut n = 0;
            for x in t {
                if n + x.mentions.len() <= 4 {
                    n += x.mentions.len();
                    acc.push(x.clone());
                }
            }
            assert_eq!(n, 4);
            acc
        };
        let mut ds: Vec<LinkDecision> = four
            .iter()
            .flat_map(|t| (0..t.mentions.len()).map(move |mi| decision(t, mi, t.mentions[mi].gold.as_ref().unwrap().label())))
            .collect();
        ds[0].selected = if ds[0].selected == "NIL" { "E0001".into() } else { "NIL".into() };
        assert_eq!(evaluate(&four, &ds).unwrap().accuracy, 0.75);
        assert!(evaluate(&four, &ds[1..]).is_err());
    }

    #[test]
    fn undefined_nil_precision_is_flagged() {
        let text = AnnotatedText::new(
            Some("t".into()),
            "ab cd".into(),
            vec![
                Mention { start: 0, end: 2, surface: "ab".into(), gold: Some(CandidateOption::Nil), tag: None },
                Mention { start: 3, end: 5, surface: "cd".into(), gold: Some(CandidateOption::Entity("Q".into())), tag: None },
            ],
        )
        .unwrap();
        let corpus = vec![text];
        let ds = vec![decision(&corpus[0], 0, "Q"), decision(&corpus[0], 1, "Q")];
        let r = evaluate(&corpus, &ds).unwrap();
        assert_eq!((r.nil_recall, r.nil_recall_defined), (0.0, true));
        assert_eq!((r.nil_precision, r.nil_precision_defined), (0.0, false));
        assert_eq!(r.by_mention_count[&2].mentions, 2);
    }

    #[test]
    fn synthetic_world_shape() {
        let spec = SynthSpec::default();
        let a = generate_synthetic_world(&spec).unwrap();
        let b = generate_synthetic_world(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.kb.len(), 200);
        assert_eq!(a.train.len(), 300);
        let planted: usize = a
            .test
            .iter()
            .flat_map(|t| &t.mentions)
            .filter(|m| m.tag.as_deref() == Some(TAG_PLANTED))
            .count();
        assert_eq!(planted, spec.test_planted);
        let all: Vec<&Mention> = a.train.iter().flat_map(|t| &t.mentions).collect();
        let nil = all.iter().filter(|m| m.gold == Some(CandidateOption::Nil)).count();
        let share = nil as f64 / all.len() as f64;
        assert!((share - 0.15).abs() < 0.02, "NIL share {share}");
        // every planted surface is shared; anchors are not
        let index = AliasIndex::build(&a.kb);
        for m in a.test.iter().flat_map(|t| &t.mentions) {
            let n = index.generate_candidates(&m.surface, 5, false).entities.len();
            match m.tag.as_deref() {
                Some(TAG_PLANTED) | Some(TAG_NIL) => assert!((2..=3).contains(&n)),
                Some(TAG_ANCHOR) => assert_eq!(n, 1),
                _ => {}
            }
        }
    }
}
