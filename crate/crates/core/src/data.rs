//! Triplet files, vocabularies, the synthetic scene generator, and the
//! question-reshuffling probe.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageFeatureStore;

/// One `(image, question, answer)` sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub image_id: String,
    pub question: Vec<String>,
    /// May contain spaces; a multi-word answer is a single class.
    pub answer: String,
}

impl Triplet {
    pub fn new(image_id: impl Into<String>, question: &str, answer: impl Into<String>) -> Self {
        Triplet {
            image_id: image_id.into(),
            question: tokenize(question),
            answer: answer.into(),
        }
    }
}

/// Lowercases, splits on whitespace, and strips trailing `?`, `.`, `!` from
/// each token; tokens that become empty are dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| t.to_lowercase().trim_end_matches(['?', '.', '!']).to_string())
        .filter(|t| !t.is_empty())
        .collect()
}

/// Parses `image_id<TAB>question<TAB>answer` lines. Blank lines are skipped.
pub fn parse_triplets<R: BufRead>(reader: R) -> Result<Vec<Triplet>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line_no = n + 1;
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let image_id = fields[0].trim();
        let question = tokenize(fields[1]);
        let answer = fields[2].trim();
        for (name, empty) in [("image id", image_id.is_empty()), ("question", question.is_empty()), ("answer", answer.is_empty())] {
            if empty {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("empty {name}"),
                });
            }
        }
        out.push(Triplet {
            image_id: image_id.to_string(),
            question,
            answer: answer.to_string(),
        });
    }
    Ok(out)
}

pub fn load_triplets(path: impl AsRef<Path>) -> Result<Vec<Triplet>> {
    parse_triplets(BufReader::new(File::open(path)?))
}

pub fn write_triplets<W: Write>(w: &mut W, triplets: &[Triplet]) -> Result<()> {
    for t in triplets {
        writeln!(w, "{}\t{}\t{}", t.image_id, t.question.join(" "), t.answer)?;
    }
    Ok(())
}

pub fn save_triplets(path: impl AsRef<Path>, triplets: &[Triplet]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_triplets(&mut w, triplets)?;
    w.flush()?;
    Ok(())
}

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const UNK_INDEX: usize = 1;

/// Question-side vocabulary. Index 0 is padding, index 1 the unknown token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab::from_tokens(vec![PAD_TOKEN.into(), UNK_TOKEN.into()]).unwrap()
    }
}

impl Vocab {
    /// Rebuilds a vocabulary from its index-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[0] != PAD_TOKEN || tokens[1] != UNK_TOKEN {
            return Err(Error::arg("vocabulary must start with the padding and unknown tokens"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Duplicate(t.clone()));
            }
        }
        Ok(Vocab { tokens, index })
    }

    fn add(&mut self, token: &str) {
        if !self.index.contains_key(token) {
            self.index.insert(token.to_string(), self.tokens.len());
            self.tokens.push(token.to_string());
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Maps tokens to indices; unseen tokens map to the unknown index.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.get(t.as_ref()).unwrap_or(UNK_INDEX)).collect()
    }
}

/// The closed answer set: answer string to class index.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AnswerVocab {
    answers: Vec<String>,
    index: HashMap<String, usize>,
}

impl AnswerVocab {
    pub fn from_answers(answers: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(answers.len());
        for (i, a) in answers.iter().enumerate() {
            if index.insert(a.clone(), i).is_some() {
                return Err(Error::Duplicate(a.clone()));
            }
        }
        Ok(AnswerVocab { answers, index })
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    pub fn get(&self, answer: &str) -> Option<usize> {
        self.index.get(answer).copied()
    }

    pub fn answer(&self, class: usize) -> Option<&str> {
        self.answers.get(class).map(String::as_str)
    }

    pub fn answers(&self) -> &[String] {
        &self.answers
    }
}

/// Builds both vocabularies from the training split, in first-occurrence order.
pub fn build_vocabs(train: &[Triplet]) -> (Vocab, AnswerVocab) {
    build_vocabs_truncated(train, None)
}

/// As [`build_vocabs`], optionally keeping only the `max_answers` most
/// frequent answers (ties broken by first occurrence).
pub fn build_vocabs_truncated(train: &[Triplet], max_answers: Option<usize>) -> (Vocab, AnswerVocab) {
    let mut vocab = Vocab::default();
    let mut order: Vec<String> = Vec::new();
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in train {
        for tok in &t.question {
            vocab.add(tok);
        }
        let c = counts.entry(&t.answer).or_insert(0);
        if *c == 0 {
            order.push(t.answer.clone());
        }
        *c += 1;
    }
    if let Some(max) = max_answers {
        if order.len() > max {
            let mut ranked: Vec<(usize, usize)> = order.iter().enumerate().map(|(i, a)| (counts[a.as_str()], i)).collect();
            ranked.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut keep: Vec<usize> = ranked.into_iter().take(max).map(|(_, i)| i).collect();
            keep.sort_unstable();
            order = keep.into_iter().map(|i| order[i].clone()).collect();
        }
    }
    let answers = AnswerVocab::from_answers(order).expect("answers are unique");
    (vocab, answers)
}

/// A triplet mapped to indices. `target` is `None` when the answer is outside
/// the answer set (possible on test splits).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSample {
    pub tokens: Vec<usize>,
    pub image_id: String,
    pub target: Option<usize>,
}

pub fn encode_triplets(triplets: &[Triplet], vocab: &Vocab, answers: &AnswerVocab) -> Vec<EncodedSample> {
    triplets
        .iter()
        .map(|t| EncodedSample {
            tokens: vocab.encode(&t.question),
            image_id: t.image_id.clone(),
            target: answers.get(&t.answer),
        })
        .collect()
}

/// Permutes the words of every question independently; images and answers
/// are untouched.
pub fn shuffle_question_words(triplets: &[Triplet], seed: u64) -> Vec<Triplet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    triplets
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.question.shuffle(&mut rng);
            t
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Synthetic scenes

pub const OBJECT_NAMES: [&str; 10] = ["box", "ball", "cup", "book", "lamp", "vase", "shoe", "chair", "table", "bottle"];
pub const COLOR_NAMES: [&str; 8] = ["red", "blue", "green", "yellow", "white", "black", "purple", "orange"];
pub const SLOT_NAMES: [&str; 3] = ["left", "middle", "right"];
pub const MAX_OBJECTS_PER_SCENE: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Number of distinct object types (2..=10).
    pub objects: usize,
    /// Number of distinct colors (2..=8).
    pub colors: usize,
    pub samples: usize,
    pub feature_dim: usize,
    /// Uniform noise amplitude added to every feature coordinate.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            objects: 4,
            colors: 3,
            samples: 1000,
            feature_dim: 64,
            noise: 0.05,
            seed: 7,
        }
    }
}

impl SynthConfig {
    /// Width of one object block: presence flag, color one-hot, slot one-hot.
    pub fn block_width(&self) -> usize {
        1 + self.colors + SLOT_NAMES.len()
    }

    /// Width of the block one-hot layout: one block per object type.
    pub fn required_feature_dim(&self) -> usize {
        self.objects * self.block_width()
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=OBJECT_NAMES.len()).contains(&self.objects) {
            return Err(Error::arg(format!("objects must be in 2..={}, got {}", OBJECT_NAMES.len(), self.objects)));
        }
        if !(2..=COLOR_NAMES.len()).contains(&self.colors) {
            return Err(Error::arg(format!("colors must be in 2..={}, got {}", COLOR_NAMES.len(), self.colors)));
        }
        if self.samples == 0 {
            return Err(Error::arg("sample count must be positive"));
        }
        if self.feature_dim < self.required_feature_dim() {
            return Err(Error::arg(format!(
                "feature_dim {} is smaller than the scene layout width {}",
                self.feature_dim,
                self.required_feature_dim()
            )));
        }
        if !(0.0..=0.05).contains(&self.noise) {
            return Err(Error::arg(format!("noise must be in [0, 0.05], got {}", self.noise)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub name: String,
    pub color: String,
    /// 0 = left, 1 = middle, 2 = right.
    pub slot: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub image_id: String,
    /// Sorted by slot; object names are distinct.
    pub objects: Vec<SceneObject>,
}

/// The question templates, grouped like COCO-QA's object / number / color /
/// location categories. The two relational ones are order-sensitive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuestionKind {
    /// what is on the {slot}
    Object,
    /// how many objects are there
    Number,
    /// what color is the {a}
    Color,
    /// what color is the {a} {left|right} of the {b}
    ColorRelation,
    /// where is the {a}
    Location,
    /// where is the {a} beside the {b}
    LocationRelation,
}

impl QuestionKind {
    pub const ALL: [QuestionKind; 6] = [
        QuestionKind::Object,
        QuestionKind::Number,
        QuestionKind::Color,
        QuestionKind::ColorRelation,
        QuestionKind::Location,
        QuestionKind::LocationRelation,
    ];

    fn needs_pair(self) -> bool {
        matches!(self, QuestionKind::ColorRelation | QuestionKind::LocationRelation)
    }
}

impl Scene {
    fn find(&self, name: &str) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.name == name)
    }

    /// Ground truth for any question; `None` if the question does not match a
    /// template or refers to something absent from the scene.
    pub fn answer<S: AsRef<str>>(&self, question: &[S]) -> Option<String> {
        let q: Vec<&str> = question.iter().map(|s| s.as_ref()).collect();
        match q.as_slice() {
            ["how", "many", "objects", "are", "there"] => Some(self.objects.len().to_string()),
            ["what", "color", "is", "the", a] => self.find(a).map(|o| o.color.clone()),
            ["what", "color", "is", "the", a, rel, "of", "the", b] if is_relation(rel) => {
                self.find(b)?;
                self.find(a).map(|o| o.color.clone())
            }
            ["where", "is", "the", a] => self.find(a).map(|o| SLOT_NAMES[o.slot].to_string()),
            ["where", "is", "the", a, "beside", "the", b] if a != b => {
                self.find(b)?;
                self.find(a).map(|o| SLOT_NAMES[o.slot].to_string())
            }
            ["what", "is", "on", "the", slot] => {
                let s = SLOT_NAMES.iter().position(|n| n == slot)?;
                self.objects.iter().find(|o| o.slot == s).map(|o| o.name.clone())
            }
            _ => None,
        }
    }

    /// Block one-hot encoding: one block per object type holding a presence
    /// flag, the color one-hot and the slot one-hot; the unused tail is zero.
    pub fn features(&self, synth: &SynthConfig) -> Vec<f64> {
        let mut v = vec![0.0; synth.feature_dim];
        let width = synth.block_width();
        for o in &self.objects {
            let name = OBJECT_NAMES.iter().position(|n| *n == o.name).unwrap();
            let color = COLOR_NAMES.iter().position(|n| *n == o.color).unwrap();
            let base = name * width;
            v[base] = 1.0;
            v[base + 1 + color] = 1.0;
            v[base + 1 + synth.colors + o.slot] = 1.0;
        }
        v
    }
}

fn is_relation(word: &str) -> bool {
    word == "left" || word == "right"
}

/// Generated dataset: triplets, matching features, and the scenes that serve
/// as the ground-truth oracle.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub synth: SynthConfig,
    pub triplets: Vec<Triplet>,
    pub features: ImageFeatureStore,
    pub scenes: Vec<Scene>,
}

impl SyntheticData {
    pub fn scene(&self, image_id: &str) -> Option<&Scene> {
        // ids are "img{index}"
        let idx: usize = image_id.strip_prefix("img")?.parse().ok()?;
        self.scenes.get(idx).filter(|s| s.image_id == image_id)
    }

    /// Oracle answer for any `(image, question)` pair.
    pub fn oracle<S: AsRef<str>>(&self, image_id: &str, question: &[S]) -> Option<String> {
        self.scene(image_id)?.answer(question)
    }

    /// Splits off the first `n` samples as training data.
    pub fn split(&self, n: usize) -> (Vec<Triplet>, Vec<Triplet>) {
        let n = n.min(self.triplets.len());
        (self.triplets[..n].to_vec(), self.triplets[n..].to_vec())
    }

    pub fn write_scenes_json<W: Write>(&self, w: &mut W) -> Result<()> {
        #[derive(Serialize)]
        struct Sidecar<'a> {
            synth: &'a SynthConfig,
            scenes: &'a [Scene],
        }
        serde_json::to_writer_pretty(&mut *w, &Sidecar { synth: &self.synth, scenes: &self.scenes })?;
        w.write_all(b"\n")?;
        Ok(())
    }
}

/// Draws `synth.samples` scenes, one templated question per scene. Question
/// kinds are uniform; relational kinds force at least two objects.
pub fn generate_synthetic(synth: &SynthConfig) -> Result<SyntheticData> {
    synth.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(synth.seed);
    let mut triplets = Vec::with_capacity(synth.samples);
    let mut features = ImageFeatureStore::new();
    let mut scenes = Vec::with_capacity(synth.samples);
    for i in 0..synth.samples {
        let kind = *QuestionKind::ALL.choose(&mut rng).unwrap();
        let min_objects = if kind.needs_pair() { 2 } else { 1 };
        let scene = random_scene(&mut rng, synth, format!("img{i}"), min_objects);
        let question = random_question(&mut rng, &scene, kind);
        let answer = scene.answer(&question).expect("generated questions are answerable");

        let mut feat = scene.features(synth);
        if synth.noise > 0.0 {
            for v in feat.iter_mut() {
                *v += rng.gen_range(-synth.noise..=synth.noise);
            }
        }
        features.insert(scene.image_id.clone(), feat)?;
        triplets.push(Triplet {
            image_id: scene.image_id.clone(),
            question,
            answer,
        });
        scenes.push(scene);
    }
    Ok(SyntheticData {
        synth: synth.clone(),
        triplets,
        features,
        scenes,
    })
}

fn random_scene(rng: &mut ChaCha8Rng, synth: &SynthConfig, image_id: String, min_objects: usize) -> Scene {
    let n = rng.gen_range(min_objects..=MAX_OBJECTS_PER_SCENE);
    let names: Vec<&str> = OBJECT_NAMES[..synth.objects].choose_multiple(rng, n).copied().collect();
    let mut slots: Vec<usize> = (0..SLOT_NAMES.len()).collect();
    slots.shuffle(rng);
    let mut objects: Vec<SceneObject> = names
        .into_iter()
        .zip(slots)
        .map(|(name, slot)| SceneObject {
            name: name.to_string(),
            color: COLOR_NAMES[rng.gen_range(0..synth.colors)].to_string(),
            slot,
        })
        .collect();
    objects.sort_by_key(|o| o.slot);
    Scene { image_id, objects }
}

fn random_question(rng: &mut ChaCha8Rng, scene: &Scene, kind: QuestionKind) -> Vec<String> {
    let pick = |rng: &mut ChaCha8Rng| scene.objects.choose(rng).unwrap().name.clone();
    let words: Vec<String> = match kind {
        QuestionKind::Number => "how many objects are there".split(' ').map(String::from).collect(),
        QuestionKind::Object => {
            let slot = scene.objects.choose(rng).unwrap().slot;
            vec!["what".into(), "is".into(), "on".into(), "the".into(), SLOT_NAMES[slot].into()]
        }
        QuestionKind::Color => vec!["what".into(), "color".into(), "is".into(), "the".into(), pick(rng)],
        QuestionKind::Location => vec!["where".into(), "is".into(), "the".into(), pick(rng)],
        QuestionKind::ColorRelation | QuestionKind::LocationRelation => {
            let pair: Vec<&SceneObject> = scene.objects.choose_multiple(rng, 2).collect();
            let (a, b) = (pair[0], pair[1]);
            if kind == QuestionKind::ColorRelation {
                // the relation word states the true arrangement
                let rel = if a.slot < b.slot { "left" } else { "right" };
                ["what", "color", "is", "the", &a.name, rel, "of", "the", &b.name].map(String::from).to_vec()
            } else {
                ["where", "is", "the", &a.name, "beside", "the", &b.name].map(String::from).to_vec()
            }
        }
    };
    words
}

/// Whether swapping the two object words of a question changes its oracle
/// answer on the given scene.
pub fn is_order_sensitive(scene: &Scene, question: &[String]) -> bool {
    let Some(original) = scene.answer(question) else {
        return false;
    };
    let positions: Vec<usize> = question
        .iter()
        .enumerate()
        .filter(|(_, w)| OBJECT_NAMES.contains(&w.as_str()))
        .map(|(i, _)| i)
        .collect();
    if positions.len() < 2 {
        return false;
    }
    let mut swapped = question.to_vec();
    swapped.swap(positions[0], positions[1]);
    scene.answer(&swapped).is_some_and(|a| a != original)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert_eq, proptest};

    #[test]
    fn parses_the_format_example() {
        let ts = parse_triplets("img7\twhat is on the table ?\tknife\n".as_bytes()).unwrap();
        assert_eq!(
            ts,
            vec![Triplet {
                image_id: "img7".into(),
                question: ["what", "is", "on", "the", "table"].map(String::from).to_vec(),
                answer: "knife".into(),
            }]
        );
    }

    #[test]
    fn tokenization_rules() {
        assert_eq!(tokenize("What IS this?!"), vec!["what", "is", "this"]);
        assert_eq!(tokenize("  a   b. ! "), vec!["a", "b"]);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        assert!(matches!(
            parse_triplets("a\tq one\tx\nb\t\ty\n".as_bytes()),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(parse_triplets("a\tq\n".as_bytes()), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_triplets("a\t ? \tx\n".as_bytes()), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_triplets("a\tq\t \n".as_bytes()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn multi_word_answers_stay_whole() {
        let ts = parse_triplets("i\twhat is that\tred chair\ni\twhat color\tred\n".as_bytes()).unwrap();
        assert_eq!(ts[0].answer, "red chair");
        let (_, answers) = build_vocabs(&ts);
        assert_eq!(answers.len(), 2);
        assert_ne!(answers.get("red"), answers.get("red chair"));
    }

    #[test]
    fn vocab_rules() {
        let train = vec![
            Triplet::new("i", "what is a", "a"),
            Triplet::new("i", "what is b", "b"),
            Triplet::new("i", "is a", "a"),
        ];
        let (vocab, answers) = build_vocabs(&train);
        assert_eq!(answers.len(), 2);
        assert_eq!(answers.answers(), &["a".to_string(), "b".to_string()]);
        assert_eq!(vocab.tokens(), &["<pad>", "<unk>", "what", "is", "a", "b"]);
        assert_eq!(vocab.encode(&["what", "zebra"]), vec![2, UNK_INDEX]);
        assert_eq!(Vocab::from_tokens(vocab.tokens().to_vec()).unwrap(), vocab);
        assert!(Vocab::from_tokens(vec!["x".into()]).is_err());
    }

    #[test]
    fn truncated_answer_vocab_keeps_most_frequent() {
        let train: Vec<Triplet> = ["c", "a", "b", "a", "b", "d"].iter().map(|a| Triplet::new("i", "q", *a)).collect();
        let (_, answers) = build_vocabs_truncated(&train, Some(2));
        assert_eq!(answers.answers(), &["a".to_string(), "b".to_string()]);
        let (_, all) = build_vocabs_truncated(&train, None);
        assert_eq!(all.len(), 4);
    }

    #[test]
    fn shuffle_examples() {
        let ts = vec![Triplet::new("i", "single", "x"), Triplet::new("j", "a b c d e f g", "y")];
        let s1 = shuffle_question_words(&ts, 3);
        let s2 = shuffle_question_words(&ts, 3);
        assert_eq!(s1, s2);
        assert_eq!(s1[0], ts[0]);
        for (a, b) in s1.iter().zip(&ts) {
            let (mut x, mut y) = (a.question.clone(), b.question.clone());
            x.sort();
            y.sort();
            assert_eq!(x, y);
            assert_eq!(a.answer, b.answer);
            assert_eq!(a.image_id, b.image_id);
        }
    }

    #[test]
    fn synthetic_is_deterministic_and_sized() {
        let synth = SynthConfig {
            colors: 3,
            samples: 1000,
            seed: 7,
            ..SynthConfig::default()
        };
        let a = generate_synthetic(&synth).unwrap();
        let b = generate_synthetic(&synth).unwrap();
        assert_eq!(a.triplets.len(), 1000);
        assert_eq!(a.triplets, b.triplets);
        assert_eq!(a.features, b.features);
    }

    #[test]
    fn counting_oracle() {
        let scene = Scene {
            image_id: "x".into(),
            objects: vec![
                SceneObject { name: "box".into(), color: "red".into(), slot: 0 },
                SceneObject { name: "ball".into(), color: "blue".into(), slot: 2 },
            ],
        };
        assert_eq!(scene.answer(&tokenize("how many objects are there")).as_deref(), Some("2"));
        assert_eq!(scene.answer(&tokenize("where is the box beside the ball")).as_deref(), Some("left"));
        assert_eq!(scene.answer(&tokenize("where is the ball beside the box")).as_deref(), Some("right"));
        assert_eq!(scene.answer(&tokenize("where is the ball beside the ball")), None);
        assert_eq!(scene.answer(&tokenize("what color is the ball right of the box")).as_deref(), Some("blue"));
        assert_eq!(scene.answer(&tokenize("what is on the middle")), None);
        assert_eq!(scene.answer(&tokenize("where is the ball")).as_deref(), Some("right"));
        assert_eq!(scene.answer(&tokenize("there are objects many how")), None);
    }

    #[test]
    fn zero_noise_gives_exact_block_one_hots() {
        let synth = SynthConfig { noise: 0.0, samples: 50, ..SynthConfig::default() };
        let data = generate_synthetic(&synth).unwrap();
        for scene in &data.scenes {
            let f = data.features.get(&scene.image_id).unwrap();
            assert_eq!(f, scene.features(&synth).as_slice());
            assert!(f.iter().all(|v| *v == 0.0 || *v == 1.0));
            assert_eq!(f.iter().filter(|v| **v == 1.0).count(), 3 * scene.objects.len());
        }
    }

    #[test]
    fn noisy_features_stay_within_amplitude() {
        let synth = SynthConfig { samples: 50, ..SynthConfig::default() };
        let data = generate_synthetic(&synth).unwrap();
        for scene in &data.scenes {
            let clean = scene.features(&synth);
            let noisy = data.features.get(&scene.image_id).unwrap();
            assert!(clean.iter().zip(noisy).all(|(c, n)| (c - n).abs() <= 0.05));
        }
    }

    #[test]
    fn labels_agree_with_oracle_and_order_sensitivity_is_common() {
        let data = generate_synthetic(&SynthConfig { samples: 2000, ..SynthConfig::default() }).unwrap();
        let mut sensitive = 0;
        for t in &data.triplets {
            assert_eq!(data.oracle(&t.image_id, &t.question).as_deref(), Some(t.answer.as_str()));
            if is_order_sensitive(data.scene(&t.image_id).unwrap(), &t.question) {
                sensitive += 1;
            }
        }
        assert!(sensitive as f64 / data.triplets.len() as f64 >= 0.20, "{sensitive}");
        let (_, answers) = build_vocabs(&data.triplets);
        assert!(answers.len() <= 30);
    }

    #[test]
    fn invalid_synth_configs() {
        for bad in [
            SynthConfig { objects: 1, ..SynthConfig::default() },
            SynthConfig { colors: 1, ..SynthConfig::default() },
            SynthConfig { colors: 9, ..SynthConfig::default() },
            SynthConfig { feature_dim: 10, ..SynthConfig::default() },
            SynthConfig { samples: 0, ..SynthConfig::default() },
            SynthConfig { noise: 0.5, ..SynthConfig::default() },
        ] {
            assert!(generate_synthetic(&bad).is_err(), "{bad:?}");
        }
    }

    proptest! {
        #[test]
        fn triplet_file_roundtrip(seed in 0u64..500, n in 1usize..40) {
            let data = generate_synthetic(&SynthConfig { samples: n, seed, ..SynthConfig::default() }).unwrap();
            let mut buf = Vec::new();
            write_triplets(&mut buf, &data.triplets).unwrap();
            let once = parse_triplets(buf.as_slice()).unwrap();
            let mut again = Vec::new();
            write_triplets(&mut again, &once).unwrap();
            prop_assert_eq!(&once, &data.triplets);
            prop_assert_eq!(buf, again);
        }
    }
}
