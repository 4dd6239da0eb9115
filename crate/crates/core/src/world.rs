//! The synthetic two-modality world.
//!
//! A world owns a token vocabulary split into disjoint ranges, a catalog of
//! entities, and a fixed "image" rendering per entity. Captions are sampled
//! per episode: a handful of filler tokens with the entity's answer token
//! placed somewhere in the interior. Image renderings never contain answer
//! tokens, so answering an image query means decoding the rendering while
//! answering a caption query means copying a token from the context.
//!
//! Prompts are assembled under four marker conditions:
//!
//! | condition     | image span                   | caption span                   |
//! |---------------|------------------------------|--------------------------------|
//! | `unperturbed` | `IMG_START img.. IMG_END`    | `CAP_PREFIX cap.. PERIOD`      |
//! | `arbitrary`   | `L_i img..`                  | `L_c cap.. PERIOD`             |
//! | `remove`      | `img..`                      | `cap.. PERIOD`                 |
//! | `swap`        | `CAP_PREFIX img..`           | `IMG_START cap.. IMG_END PERIOD`|
//!
//! The two blocks follow `BOS` in the episode's order and are followed by
//! `QUERY_PREFIX <word> QUERY_SUFFIX ANS`. `PERIOD` terminates the caption
//! content and is not a marker, so it survives marker removal.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::seed::stream_rng;

pub type TokenId = u32;
pub type EntityId = u32;

const CAPTION_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub n_entities: usize,
    pub img_span_len: usize,
    pub cap_filler_len: usize,
    pub v_vocab_size: usize,
    pub t_vocab_size: usize,
    /// Probability that a caption filler is drawn from the image vocabulary.
    pub overlap_rho: f64,
    pub n_arbitrary_labels: usize,
    pub world_seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_entities: 64,
            img_span_len: 8,
            cap_filler_len: 4,
            v_vocab_size: 256,
            t_vocab_size: 256,
            overlap_rho: 0.0,
            n_arbitrary_labels: 8,
            world_seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(LabError::Config(m.to_string()));
        if self.n_entities == 0 {
            return err("n_entities must be positive");
        }
        if self.n_entities > self.t_vocab_size {
            return err("n_entities must not exceed t_vocab_size");
        }
        if !(0.0..=1.0).contains(&self.overlap_rho) {
            return err("overlap_rho must lie in [0, 1]");
        }
        if self.img_span_len == 0 {
            return err("img_span_len must be positive");
        }
        if self.v_vocab_size == 0 {
            return err("v_vocab_size must be positive");
        }
        // Renderings must be injective over entities.
        let capacity = (self.v_vocab_size as f64).powi(self.img_span_len.min(64) as i32);
        if capacity < self.n_entities as f64 {
            return err("v_vocab_size^img_span_len must be at least n_entities");
        }
        Ok(())
    }
}

/// Fixed special tokens at the start of the vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Special {
    Pad,
    Bos,
    Ans,
    QueryPrefix,
    QuerySuffix,
    Period,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModalityWord {
    Image,
    Caption,
    Text,
    Document,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Marker {
    ImgStart,
    ImgEnd,
    CapPrefix,
    TxtPrefix,
    DocPrefix,
}

/// Which range a token id falls in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenClass {
    Special,
    ModalityWord,
    Marker,
    Label,
    ImageContent,
    TextFiller,
    Answer,
}

/// Contiguous, disjoint id ranges laid out in a fixed order: specials,
/// modality words, markers, arbitrary labels, image vocabulary, text
/// vocabulary, answer tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    pub special: Range<TokenId>,
    pub modality_words: Range<TokenId>,
    pub markers: Range<TokenId>,
    pub labels: Range<TokenId>,
    pub image_content: Range<TokenId>,
    pub text: Range<TokenId>,
    pub answers: Range<TokenId>,
}

pub const N_SPECIAL: usize = 6;
pub const N_MODALITY_WORDS: usize = 4;
pub const N_MARKERS: usize = 5;

/// Lays out the vocabulary for `cfg`.
pub fn build_vocabulary(cfg: &WorldConfig) -> Result<Vocabulary> {
    cfg.validate()?;
    let mut next: TokenId = 0;
    let mut take = |n: usize| {
        let r = next..next + n as TokenId;
        next = r.end;
        r
    };
    Ok(Vocabulary {
        special: take(N_SPECIAL),
        modality_words: take(N_MODALITY_WORDS),
        markers: take(N_MARKERS),
        labels: take(cfg.n_arbitrary_labels),
        image_content: take(cfg.v_vocab_size),
        text: take(cfg.t_vocab_size),
        answers: take(cfg.n_entities),
    })
}

impl Vocabulary {
    pub fn size(&self) -> usize {
        self.answers.end as usize
    }

    fn ranges(&self) -> [(&Range<TokenId>, TokenClass); 7] {
        [
            (&self.special, TokenClass::Special),
            (&self.modality_words, TokenClass::ModalityWord),
            (&self.markers, TokenClass::Marker),
            (&self.labels, TokenClass::Label),
            (&self.image_content, TokenClass::ImageContent),
            (&self.text, TokenClass::TextFiller),
            (&self.answers, TokenClass::Answer),
        ]
    }

    pub fn class_of(&self, id: TokenId) -> Option<TokenClass> {
        self.ranges()
            .into_iter()
            .find(|(r, _)| r.contains(&id))
            .map(|(_, c)| c)
    }

    pub fn special(&self, s: Special) -> TokenId {
        self.special.start + s as TokenId
    }

    pub fn word(&self, w: ModalityWord) -> TokenId {
        self.modality_words.start + w as TokenId
    }

    pub fn marker(&self, m: Marker) -> TokenId {
        self.markers.start + m as TokenId
    }

    pub fn label(&self, i: usize) -> TokenId {
        debug_assert!(i < self.labels.len());
        self.labels.start + i as TokenId
    }

    pub fn answer(&self, e: EntityId) -> TokenId {
        self.answers.start + e
    }

    /// Inverse of [`Vocabulary::answer`].
    pub fn entity_of_answer(&self, id: TokenId) -> Option<EntityId> {
        self.answers.contains(&id).then(|| id - self.answers.start)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Caption,
}

impl Modality {
    pub fn other(self) -> Self {
        match self {
            Modality::Image => Modality::Caption,
            Modality::Caption => Modality::Image,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Caption => "caption",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Order {
    ImageFirst,
    CaptionFirst,
}

impl Order {
    pub fn as_str(self) -> &'static str {
        match self {
            Order::ImageFirst => "image_first",
            Order::CaptionFirst => "caption_first",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Unperturbed,
    Arbitrary,
    Remove,
    Swap,
}

impl Condition {
    pub const ALL: [Condition; 4] = [
        Condition::Unperturbed,
        Condition::Arbitrary,
        Condition::Remove,
        Condition::Swap,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Unperturbed => "unperturbed",
            Condition::Arbitrary => "arbitrary",
            Condition::Remove => "remove",
            Condition::Swap => "swap",
        }
    }
}

/// The word used for the text span, both in its marker and in the query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextLabel {
    Caption,
    Text,
    Document,
}

impl TextLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            TextLabel::Caption => "caption",
            TextLabel::Text => "text",
            TextLabel::Document => "document",
        }
    }

    fn word(self) -> ModalityWord {
        match self {
            TextLabel::Caption => ModalityWord::Caption,
            TextLabel::Text => ModalityWord::Text,
            TextLabel::Document => ModalityWord::Document,
        }
    }

    fn marker(self) -> Marker {
        match self {
            TextLabel::Caption => Marker::CapPrefix,
            TextLabel::Text => Marker::TxtPrefix,
            TextLabel::Document => Marker::DocPrefix,
        }
    }
}

/// Arbitrary label indices (into the label range) bound to the two spans.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelAssignment {
    pub image: usize,
    pub caption: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub img_entity: EntityId,
    pub cap_entity: EntityId,
    pub target: Modality,
    pub order: Order,
    pub condition: Condition,
    pub text_label: TextLabel,
    pub symbolic: bool,
    pub label_assignment: Option<LabelAssignment>,
    pub episode_seed: u64,
}

impl Episode {
    pub fn target_entity(&self) -> EntityId {
        match self.target {
            Modality::Image => self.img_entity,
            Modality::Caption => self.cap_entity,
        }
    }

    /// The same episode under another marker condition. Content spans are
    /// preserved verbatim because the caption depends only on the seed.
    pub fn with_condition(&self, condition: Condition) -> Self {
        Episode {
            condition,
            ..self.clone()
        }
    }

    /// The same episode querying the other modality.
    pub fn with_target(&self, target: Modality) -> Self {
        Episode {
            target,
            ..self.clone()
        }
    }
}

/// Episode sampling policy. `None` for target/order means uniform.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleOptions {
    pub condition: Condition,
    pub text_label: TextLabel,
    pub symbolic: bool,
    pub target: Option<Modality>,
    pub order: Option<Order>,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            condition: Condition::Unperturbed,
            text_label: TextLabel::Caption,
            symbolic: false,
            target: None,
            order: None,
        }
    }
}

impl SampleOptions {
    pub fn symbolic() -> Self {
        Self {
            condition: Condition::Arbitrary,
            symbolic: true,
            ..Self::default()
        }
    }
}

/// Half-open token range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn positions(&self) -> Range<usize> {
        self.start..self.end
    }

    fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }
}

/// Annotated roles inside a prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanRole {
    ImgMarkerStart,
    ImgMarkerEnd,
    ImgContent,
    CapMarker,
    CapContent,
    Query,
    AnswerSlot,
}

impl SpanRole {
    pub const ALL: [SpanRole; 7] = [
        SpanRole::ImgMarkerStart,
        SpanRole::ImgMarkerEnd,
        SpanRole::ImgContent,
        SpanRole::CapMarker,
        SpanRole::CapContent,
        SpanRole::Query,
        SpanRole::AnswerSlot,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SpanRole::ImgMarkerStart => "img_marker_start",
            SpanRole::ImgMarkerEnd => "img_marker_end",
            SpanRole::ImgContent => "img_content",
            SpanRole::CapMarker => "cap_marker",
            SpanRole::CapContent => "cap_content",
            SpanRole::Query => "query",
            SpanRole::AnswerSlot => "answer_slot",
        }
    }
}

/// Role → span map. Marker roles are absent when the condition drops them.
/// Marker roles follow the marker token, not the content it wraps: under
/// `swap`, `img_marker_start` sits in front of the caption content.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Spans(BTreeMap<SpanRole, Span>);

impl Spans {
    pub fn get(&self, role: SpanRole) -> Option<Span> {
        self.0.get(&role).copied()
    }

    fn insert(&mut self, role: SpanRole, span: Span) {
        self.0.insert(role, span);
    }

    pub fn iter(&self) -> impl Iterator<Item = (SpanRole, Span)> + '_ {
        self.0.iter().map(|(r, s)| (*r, *s))
    }

    /// Content span of a modality (always present).
    pub fn content(&self, m: Modality) -> Span {
        let role = match m {
            Modality::Image => SpanRole::ImgContent,
            Modality::Caption => SpanRole::CapContent,
        };
        self.0[&role]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSequence {
    pub tokens: Vec<TokenId>,
    pub spans: Spans,
    pub answer_token: TokenId,
    pub nontarget_answer_token: TokenId,
}

impl PromptSequence {
    pub fn answer_slot(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// An immutable synthetic world.
#[derive(Debug, Clone)]
pub struct World {
    cfg: WorldConfig,
    vocab: Vocabulary,
    renderings: Vec<Vec<TokenId>>,
}

impl World {
    pub fn new(cfg: WorldConfig) -> Result<Self> {
        let vocab = build_vocabulary(&cfg)?;
        let renderings = render_catalog(&cfg, &vocab);
        Ok(Self {
            cfg,
            vocab,
            renderings,
        })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn n_entities(&self) -> usize {
        self.cfg.n_entities
    }

    /// Length of the longest prompt any condition produces (unperturbed and
    /// swap; the others are shorter).
    pub fn max_prompt_len(&self) -> usize {
        self.cfg.img_span_len + self.cfg.cap_filler_len + 10
    }

    fn check_entity(&self, e: EntityId) -> Result<()> {
        if (e as usize) < self.cfg.n_entities {
            Ok(())
        } else {
            Err(LabError::Domain(format!(
                "entity {e} out of range (n_entities = {})",
                self.cfg.n_entities
            )))
        }
    }

    /// The fixed image-content rendering of entity `e`.
    pub fn render_image(&self, e: EntityId) -> Result<&[TokenId]> {
        self.check_entity(e)?;
        Ok(&self.renderings[e as usize])
    }

    /// Samples a caption for entity `e`.
    pub fn render_caption<R: Rng + ?Sized>(&self, e: EntityId, rng: &mut R) -> Result<Vec<TokenId>> {
        self.check_entity(e)?;
        let v = &self.vocab;
        let n = self.cfg.cap_filler_len;
        let mut out = Vec::with_capacity(n + 1);
        for _ in 0..n {
            let from_image = self.cfg.overlap_rho > 0.0 && rng.random::<f64>() < self.cfg.overlap_rho;
            let tok = if from_image {
                v.image_content.start + rng.random_range(0..v.image_content.len() as TokenId)
            } else {
                v.text.start + rng.random_range(0..v.text.len() as TokenId)
            };
            out.push(tok);
        }
        // Interior slot: at least one filler on each side when possible.
        let at = if n >= 2 { rng.random_range(1..n) } else { rng.random_range(0..=n) };
        out.insert(at, v.answer(e));
        Ok(out)
    }

    /// Samples an episode under `opts`.
    pub fn sample_episode<R: Rng + ?Sized>(&self, rng: &mut R, opts: &SampleOptions) -> Result<Episode> {
        let n = self.cfg.n_entities as u32;
        if n < 2 {
            return Err(LabError::Config(
                "n_entities must be at least 2 to sample inconsistent pairs".into(),
            ));
        }
        let img_entity = rng.random_range(0..n);
        let mut cap_entity = rng.random_range(0..n - 1);
        if cap_entity >= img_entity {
            cap_entity += 1;
        }
        let target = opts.target.unwrap_or_else(|| {
            if rng.random::<bool>() {
                Modality::Image
            } else {
                Modality::Caption
            }
        });
        let order = opts.order.unwrap_or_else(|| {
            if rng.random::<bool>() {
                Order::ImageFirst
            } else {
                Order::CaptionFirst
            }
        });
        let label_assignment = if opts.symbolic || opts.condition == Condition::Arbitrary {
            let k = self.cfg.n_arbitrary_labels;
            if k < 2 {
                return Err(LabError::Config(
                    "n_arbitrary_labels must be at least 2 for label-marked episodes".into(),
                ));
            }
            let image = rng.random_range(0..k);
            let mut caption = rng.random_range(0..k - 1);
            if caption >= image {
                caption += 1;
            }
            Some(LabelAssignment { image, caption })
        } else {
            None
        };
        Ok(Episode {
            img_entity,
            cap_entity,
            target,
            order,
            condition: opts.condition,
            text_label: opts.text_label,
            symbolic: opts.symbolic,
            label_assignment,
            episode_seed: rng.random(),
        })
    }

    /// Samples `n` episodes from a dedicated stream of `seed`.
    pub fn sample_episodes(&self, seed: u64, n: usize, opts: &SampleOptions) -> Result<Vec<Episode>> {
        let mut rng = crate::seed::rng_from_seed(seed);
        (0..n).map(|_| self.sample_episode(&mut rng, opts)).collect()
    }

    /// Builds the annotated token sequence for `ep`.
    pub fn assemble_prompt(&self, ep: &Episode) -> Result<PromptSequence> {
        self.check_entity(ep.img_entity)?;
        self.check_entity(ep.cap_entity)?;
        if ep.img_entity == ep.cap_entity {
            return Err(LabError::Contract(
                "episode entities must differ (inputs are inconsistent by construction)".into(),
            ));
        }
        if ep.symbolic && ep.condition != Condition::Arbitrary {
            return Err(LabError::Contract(format!(
                "symbolic episodes require the arbitrary condition, got {}",
                ep.condition.as_str()
            )));
        }
        let labels = match (ep.condition, ep.label_assignment) {
            (Condition::Arbitrary, None) => {
                return Err(LabError::Contract(
                    "arbitrary condition requires a label assignment".into(),
                ))
            }
            (_, Some(a)) => {
                let k = self.cfg.n_arbitrary_labels;
                if a.image == a.caption || a.image >= k || a.caption >= k {
                    return Err(LabError::Contract("label assignment must name two distinct labels".into()));
                }
                Some(a)
            }
            _ => None,
        };

        let v = &self.vocab;
        let image = self.render_image(ep.img_entity)?.to_vec();
        let mut crng = stream_rng(ep.episode_seed, CAPTION_STREAM);
        let caption = self.render_caption(ep.cap_entity, &mut crng)?;

        let layout = MarkerLayout::for_condition(ep.condition, ep.text_label, labels, v);

        let mut tokens = vec![v.special(Special::Bos)];
        let mut spans = Spans::default();
        let blocks = match ep.order {
            Order::ImageFirst => [Modality::Image, Modality::Caption],
            Order::CaptionFirst => [Modality::Caption, Modality::Image],
        };
        for m in blocks {
            let (wrapper, content, role) = match m {
                Modality::Image => (&layout.image, &image, SpanRole::ImgContent),
                Modality::Caption => (&layout.caption, &caption, SpanRole::CapContent),
            };
            if let Some(mt) = wrapper.before {
                spans.insert(mt.role, Span::new(tokens.len(), tokens.len() + 1));
                tokens.push(mt.token);
            }
            let start = tokens.len();
            tokens.extend_from_slice(content);
            spans.insert(role, Span::new(start, tokens.len()));
            if let Some(mt) = wrapper.after {
                spans.insert(mt.role, Span::new(tokens.len(), tokens.len() + 1));
                tokens.push(mt.token);
            }
            if m == Modality::Caption {
                tokens.push(v.special(Special::Period));
            }
        }

        let query_word = if ep.symbolic {
            let a = labels.expect("validated above");
            match ep.target {
                Modality::Image => v.label(a.image),
                Modality::Caption => v.label(a.caption),
            }
        } else {
            match ep.target {
                Modality::Image => v.word(ModalityWord::Image),
                Modality::Caption => v.word(ep.text_label.word()),
            }
        };
        let qstart = tokens.len();
        tokens.extend([
            v.special(Special::QueryPrefix),
            query_word,
            v.special(Special::QuerySuffix),
        ]);
        spans.insert(SpanRole::Query, Span::new(qstart, tokens.len()));
        spans.insert(SpanRole::AnswerSlot, Span::new(tokens.len(), tokens.len() + 1));
        tokens.push(v.special(Special::Ans));

        let nontarget = match ep.target {
            Modality::Image => ep.cap_entity,
            Modality::Caption => ep.img_entity,
        };
        Ok(PromptSequence {
            tokens,
            spans,
            answer_token: v.answer(ep.target_entity()),
            nontarget_answer_token: v.answer(nontarget),
        })
    }
}

/// Draws the image catalog. Each entity reads its own stream of the world
/// seed; a rendering that collides with an earlier one is redrawn from the
/// same stream, which keeps the catalog injective.
fn render_catalog(cfg: &WorldConfig, v: &Vocabulary) -> Vec<Vec<TokenId>> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(cfg.n_entities);
    for e in 0..cfg.n_entities {
        let mut rng = stream_rng(cfg.world_seed, e as u64);
        loop {
            let r: Vec<TokenId> = (0..cfg.img_span_len)
                .map(|_| v.image_content.start + rng.random_range(0..v.image_content.len() as TokenId))
                .collect();
            if seen.insert(r.clone()) {
                out.push(r);
                break;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct MarkerToken {
    token: TokenId,
    role: SpanRole,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Wrapper {
    before: Option<MarkerToken>,
    after: Option<MarkerToken>,
}

/// Which marker tokens surround each content span.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct MarkerLayout {
    image: Wrapper,
    caption: Wrapper,
}

impl MarkerLayout {
    fn unperturbed(text_label: TextLabel, v: &Vocabulary) -> Self {
        MarkerLayout {
            image: Wrapper {
                before: Some(MarkerToken {
                    token: v.marker(Marker::ImgStart),
                    role: SpanRole::ImgMarkerStart,
                }),
                after: Some(MarkerToken {
                    token: v.marker(Marker::ImgEnd),
                    role: SpanRole::ImgMarkerEnd,
                }),
            },
            caption: Wrapper {
                before: Some(MarkerToken {
                    token: v.marker(text_label.marker()),
                    role: SpanRole::CapMarker,
                }),
                after: None,
            },
        }
    }

    fn swapped(self) -> Self {
        MarkerLayout {
            image: self.caption,
            caption: self.image,
        }
    }

    fn for_condition(
        condition: Condition,
        text_label: TextLabel,
        labels: Option<LabelAssignment>,
        v: &Vocabulary,
    ) -> Self {
        match condition {
            Condition::Unperturbed => Self::unperturbed(text_label, v),
            Condition::Swap => Self::unperturbed(text_label, v).swapped(),
            Condition::Remove => MarkerLayout {
                image: Wrapper::default(),
                caption: Wrapper::default(),
            },
            Condition::Arbitrary => {
                let a = labels.expect("arbitrary condition carries labels");
                MarkerLayout {
                    image: Wrapper {
                        before: Some(MarkerToken {
                            token: v.label(a.image),
                            role: SpanRole::ImgMarkerStart,
                        }),
                        after: None,
                    },
                    caption: Wrapper {
                        before: Some(MarkerToken {
                            token: v.label(a.caption),
                            role: SpanRole::CapMarker,
                        }),
                        after: None,
                    },
                }
            }
        }
    }
}

/// One line of the task export consumed by external runners.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskRecord {
    pub id: String,
    pub target: Modality,
    pub order: Order,
    pub condition: Condition,
    pub text_label: TextLabel,
    pub symbolic: bool,
    pub img_entity: EntityId,
    pub cap_entity: EntityId,
    pub tokens: Vec<TokenId>,
    pub spans: BTreeMap<String, [usize; 2]>,
}

impl TaskRecord {
    pub fn new(id: impl Into<String>, ep: &Episode, prompt: &PromptSequence) -> Self {
        TaskRecord {
            id: id.into(),
            target: ep.target,
            order: ep.order,
            condition: ep.condition,
            text_label: ep.text_label,
            symbolic: ep.symbolic,
            img_entity: ep.img_entity,
            cap_entity: ep.cap_entity,
            tokens: prompt.tokens.clone(),
            spans: prompt
                .spans
                .iter()
                .map(|(r, s)| (r.as_str().to_string(), [s.start, s.end]))
                .collect(),
        }
    }
}

/// Checks the structural invariants of an assembled prompt.
pub fn check_prompt(world: &World, ep: &Episode, p: &PromptSequence) -> Result<()> {
    let fail = |m: String| Err(LabError::Internal(m));
    let all: Vec<(SpanRole, Span)> = p.spans.iter().collect();
    for (i, (ra, a)) in all.iter().enumerate() {
        if a.end > p.tokens.len() || a.is_empty() {
            return fail(format!("span {} out of bounds", ra.as_str()));
        }
        for (rb, b) in &all[i + 1..] {
            if a.overlaps(b) {
                return fail(format!("spans {} and {} overlap", ra.as_str(), rb.as_str()));
            }
        }
    }
    match p.spans.get(SpanRole::AnswerSlot) {
        Some(s) if s.start == p.tokens.len() - 1 && s.len() == 1 => {}
        _ => return fail("answer slot must be the final position".into()),
    }
    if ep.condition == Condition::Remove
        && [SpanRole::ImgMarkerStart, SpanRole::ImgMarkerEnd, SpanRole::CapMarker]
            .iter()
            .any(|r| p.spans.get(*r).is_some())
    {
        return fail("remove condition must not contain markers".into());
    }
    if p.answer_token == p.nontarget_answer_token {
        return fail("answer and non-target answer coincide".into());
    }
    let v = world.vocab();
    for pos in p.spans.content(Modality::Image).positions() {
        if v.class_of(p.tokens[pos]) != Some(TokenClass::ImageContent) {
            return fail(format!("image content at {pos} is not an image token"));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from_seed;

    fn world() -> World {
        World::new(WorldConfig {
            world_seed: 11,
            ..WorldConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn default_vocabulary_size() {
        let v = build_vocabulary(&WorldConfig::default()).unwrap();
        assert_eq!(v.size(), 6 + 4 + 5 + 8 + 256 + 256 + 64);
        assert_eq!(v.size(), 599);
    }

    #[test]
    fn single_entity_has_one_answer_token() {
        let v = build_vocabulary(&WorldConfig {
            n_entities: 1,
            ..WorldConfig::default()
        })
        .unwrap();
        assert_eq!(v.answers.len(), 1);
    }

    #[test]
    fn vocabulary_is_deterministic_and_partitioned() {
        let cfg = WorldConfig::default();
        let a = build_vocabulary(&cfg).unwrap();
        assert_eq!(a, build_vocabulary(&cfg).unwrap());
        for id in 0..a.size() as TokenId {
            let hits = a.ranges().iter().filter(|(r, _)| r.contains(&id)).count();
            assert_eq!(hits, 1, "token {id}");
        }
        let total: usize = a.ranges().iter().map(|(r, _)| r.len()).sum();
        assert_eq!(total, a.size());
    }

    #[test]
    fn invalid_configs_name_the_invariant() {
        let too_many = WorldConfig {
            n_entities: 300,
            ..WorldConfig::default()
        };
        let msg = build_vocabulary(&too_many).unwrap_err().to_string();
        assert!(msg.contains("t_vocab_size"), "{msg}");
        let bad_rho = WorldConfig {
            overlap_rho: 1.5,
            ..WorldConfig::default()
        };
        let msg = build_vocabulary(&bad_rho).unwrap_err().to_string();
        assert!(msg.contains("overlap_rho"), "{msg}");
    }

    #[test]
    fn renderings_are_deterministic_injective_and_in_range() {
        let w = world();
        assert_eq!(w.render_image(3).unwrap(), w.render_image(3).unwrap());
        let all: Vec<&[TokenId]> = (0..64).map(|e| w.render_image(e).unwrap()).collect();
        for i in 0..all.len() {
            assert_eq!(all[i].len(), 8);
            for j in i + 1..all.len() {
                assert_ne!(all[i], all[j], "entities {i} and {j}");
            }
            for t in all[i] {
                assert!(w.vocab().image_content.contains(t));
            }
        }
        assert!(matches!(w.render_image(64), Err(LabError::Domain(_))));
    }

    #[test]
    fn caption_filler_sources_follow_rho() {
        for (rho, range) in [(0.0, "text"), (1.0, "image")] {
            let w = World::new(WorldConfig {
                overlap_rho: rho,
                ..WorldConfig::default()
            })
            .unwrap();
            let mut rng = rng_from_seed(5);
            for _ in 0..200 {
                let c = w.render_caption(7, &mut rng).unwrap();
                for t in c.iter().filter(|t| **t != w.vocab().answer(7)) {
                    let r = if range == "text" { &w.vocab().text } else { &w.vocab().image_content };
                    assert!(r.contains(t));
                }
            }
        }
    }

    #[test]
    fn answer_token_appears_once_in_interior() {
        let w = World::new(WorldConfig {
            overlap_rho: 0.5,
            ..WorldConfig::default()
        })
        .unwrap();
        let mut rng = rng_from_seed(9);
        for i in 0..10_000u32 {
            let e = i % 64;
            let c = w.render_caption(e, &mut rng).unwrap();
            let hits: Vec<usize> = c
                .iter()
                .enumerate()
                .filter(|(_, t)| **t == w.vocab().answer(e))
                .map(|(i, _)| i)
                .collect();
            assert_eq!(hits.len(), 1);
            assert!(hits[0] >= 1 && hits[0] < c.len() - 1);
        }
    }

    #[test]
    fn order_is_uniform_and_entities_differ() {
        let w = world();
        let mut rng = rng_from_seed(1);
        let mut image_first = 0;
        for _ in 0..10_000 {
            let ep = w.sample_episode(&mut rng, &SampleOptions::default()).unwrap();
            assert_ne!(ep.img_entity, ep.cap_entity);
            if ep.order == Order::ImageFirst {
                image_first += 1;
            }
        }
        let p = image_first as f64 / 10_000.0;
        assert!((0.47..=0.53).contains(&p), "{p}");
    }

    #[test]
    fn sampling_needs_two_entities() {
        let w = World::new(WorldConfig {
            n_entities: 1,
            ..WorldConfig::default()
        })
        .unwrap();
        let err = w.sample_episode(&mut rng_from_seed(0), &SampleOptions::default());
        assert!(matches!(err, Err(LabError::Config(_))));
    }

    #[test]
    fn symbolic_episode_carries_two_labels() {
        let w = world();
        let ep = w.sample_episode(&mut rng_from_seed(2), &SampleOptions::symbolic()).unwrap();
        let a = ep.label_assignment.unwrap();
        assert_ne!(a.image, a.caption);
        let p = w.assemble_prompt(&ep).unwrap();
        let qword = p.tokens[p.spans.get(SpanRole::Query).unwrap().start + 1];
        let expected = match ep.target {
            Modality::Image => w.vocab().label(a.image),
            Modality::Caption => w.vocab().label(a.caption),
        };
        assert_eq!(qword, expected);
    }

    fn fixed_episode(condition: Condition, target: Modality, order: Order) -> Episode {
        Episode {
            img_entity: 3,
            cap_entity: 17,
            target,
            order,
            condition,
            text_label: TextLabel::Caption,
            symbolic: false,
            label_assignment: None,
            episode_seed: 99,
        }
    }

    #[test]
    fn unperturbed_layout_matches_table() {
        let w = world();
        let v = w.vocab();
        let p = w
            .assemble_prompt(&fixed_episode(Condition::Unperturbed, Modality::Image, Order::ImageFirst))
            .unwrap();
        assert_eq!(p.len(), 1 + 10 + 7 + 4);
        assert_eq!(p.tokens[0], v.special(Special::Bos));
        assert_eq!(p.tokens[1], v.marker(Marker::ImgStart));
        assert_eq!(&p.tokens[2..10], w.render_image(3).unwrap());
        assert_eq!(p.tokens[10], v.marker(Marker::ImgEnd));
        assert_eq!(p.tokens[11], v.marker(Marker::CapPrefix));
        assert_eq!(p.spans.get(SpanRole::CapContent), Some(Span::new(12, 17)));
        assert_eq!(p.tokens[17], v.special(Special::Period));
        assert_eq!(
            &p.tokens[18..],
            &[
                v.special(Special::QueryPrefix),
                v.word(ModalityWord::Image),
                v.special(Special::QuerySuffix),
                v.special(Special::Ans)
            ]
        );
        assert_eq!(p.answer_token, v.answer(3));
        assert_eq!(p.nontarget_answer_token, v.answer(17));
    }

    #[test]
    fn max_prompt_len_bounds_every_condition() {
        let w = world();
        let mut rng = rng_from_seed(5);
        let mut longest = 0;
        for c in Condition::ALL {
            for _ in 0..20 {
                let opts = SampleOptions {
                    condition: c,
                    ..SampleOptions::default()
                };
                let ep = w.sample_episode(&mut rng, &opts).unwrap();
                longest = longest.max(w.assemble_prompt(&ep).unwrap().len());
            }
        }
        assert_eq!(longest, w.max_prompt_len());
    }

    #[test]
    fn remove_drops_exactly_three_markers() {
        let w = world();
        for order in [Order::ImageFirst, Order::CaptionFirst] {
            let ep = fixed_episode(Condition::Unperturbed, Modality::Caption, order);
            let clean = w.assemble_prompt(&ep).unwrap();
            let removed = w.assemble_prompt(&ep.with_condition(Condition::Remove)).unwrap();
            assert_eq!(removed.len(), clean.len() - 3);
            check_prompt(&w, &ep.with_condition(Condition::Remove), &removed).unwrap();
            for m in [Modality::Image, Modality::Caption] {
                let a = clean.spans.content(m);
                let b = removed.spans.content(m);
                assert_eq!(clean.tokens[a.positions()], removed.tokens[b.positions()]);
            }
        }
    }

    #[test]
    fn swap_exchanges_markers_not_query_words() {
        let w = world();
        let v = w.vocab();
        let ep = fixed_episode(Condition::Swap, Modality::Image, Order::ImageFirst);
        let p = w.assemble_prompt(&ep).unwrap();
        let img = p.spans.content(Modality::Image);
        let cap = p.spans.content(Modality::Caption);
        assert_eq!(p.tokens[img.start - 1], v.marker(Marker::CapPrefix));
        assert_eq!(p.tokens[cap.start - 1], v.marker(Marker::ImgStart));
        assert_eq!(p.tokens[cap.end], v.marker(Marker::ImgEnd));
        let q = p.spans.get(SpanRole::Query).unwrap();
        assert_eq!(p.tokens[q.start + 1], v.word(ModalityWord::Image));
        assert_eq!(p.answer_token, v.answer(3));
    }

    #[test]
    fn swapping_twice_restores_layout() {
        let w = world();
        for tl in [TextLabel::Caption, TextLabel::Text, TextLabel::Document] {
            let l = MarkerLayout::unperturbed(tl, w.vocab());
            assert_eq!(l.swapped().swapped(), l);
            assert_ne!(l.swapped(), l);
        }
    }

    #[test]
    fn symbolic_requires_arbitrary_condition() {
        let w = world();
        let mut ep = w.sample_episode(&mut rng_from_seed(3), &SampleOptions::symbolic()).unwrap();
        ep.condition = Condition::Unperturbed;
        assert!(matches!(w.assemble_prompt(&ep), Err(LabError::Contract(_))));
    }

    #[test]
    fn text_label_changes_marker_and_query_word() {
        let w = world();
        let v = w.vocab();
        let mut ep = fixed_episode(Condition::Unperturbed, Modality::Caption, Order::CaptionFirst);
        ep.text_label = TextLabel::Document;
        let p = w.assemble_prompt(&ep).unwrap();
        assert_eq!(p.tokens[1], v.marker(Marker::DocPrefix));
        let q = p.spans.get(SpanRole::Query).unwrap();
        assert_eq!(p.tokens[q.start + 1], v.word(ModalityWord::Document));
    }

    #[test]
    fn prompts_are_deterministic_and_well_formed() {
        let w = World::new(WorldConfig {
            overlap_rho: 0.3,
            ..WorldConfig::default()
        })
        .unwrap();
        let mut rng = rng_from_seed(4);
        for cond in Condition::ALL {
            for symbolic in [false, true] {
                if symbolic && cond != Condition::Arbitrary {
                    continue;
                }
                let opts = SampleOptions {
                    condition: cond,
                    symbolic,
                    ..SampleOptions::default()
                };
                for _ in 0..200 {
                    let ep = w.sample_episode(&mut rng, &opts).unwrap();
                    let p = w.assemble_prompt(&ep).unwrap();
                    assert_eq!(p, w.assemble_prompt(&ep).unwrap());
                    check_prompt(&w, &ep, &p).unwrap();
                }
            }
        }
    }

    #[test]
    fn task_record_uses_normative_spellings() {
        let w = world();
        let ep = fixed_episode(Condition::Remove, Modality::Caption, Order::CaptionFirst);
        let p = w.assemble_prompt(&ep).unwrap();
        let json = serde_json::to_string(&TaskRecord::new("t0", &ep, &p)).unwrap();
        for needle in [
            "\"target\":\"caption\"",
            "\"order\":\"caption_first\"",
            "\"condition\":\"remove\"",
            "\"text_label\":\"caption\"",
            "\"img_content\":[",
        ] {
            assert!(json.contains(needle), "{json}");
        }
        assert!(!json.contains("img_marker_start"));
    }
}
