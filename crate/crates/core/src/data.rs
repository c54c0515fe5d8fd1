//! Synthetic scene/question generation for desk-scale training.
//!
//! A scene is a set of objects, each a (color, shape, size) triple rendered
//! into a feature row by concatenating fixed per-attribute embedding
//! segments and adding seeded Gaussian noise. Questions come from three
//! templates over a closed vocabulary:
//!
//!   count <color>                 -> "0".."4"
//!   exists <shape>                -> yes | no
//!   color of the <size> <shape>   -> a color word
//!
//! Counting scenes pair every counted object with a distractor of the same
//! shape but a different color, so no single object determines the answer
//! and the model must aggregate across rows to count.

use crate::error::{Error, Result};
use crate::feature::FeatureSet;
use crate::model::TokenSeq;
use crate::rng::{streams, Rng};
use crate::tensor::Tensor;
use sha2::{Digest, Sha256};

pub const COLORS: [&str; 6] = ["red", "green", "blue", "yellow", "purple", "orange"];
pub const SHAPES: [&str; 4] = ["circle", "square", "triangle", "star"];
pub const SIZES: [&str; 3] = ["small", "medium", "large"];

/// Largest count a question can ask about; answers run 0..=MAX_COUNT.
pub const MAX_COUNT: usize = 4;
/// Width of one attribute segment in a feature row.
pub const SEGMENT: usize = 16;
/// Raw object feature width: one segment per attribute.
pub const FEATURE_DIM: usize = 3 * SEGMENT;
/// Scene size bounds.
pub const MIN_OBJECTS: usize = 3;
pub const MAX_OBJECTS: usize = 20;
/// Longest question template, in tokens.
pub const MAX_TOKENS: usize = 5;

const PAD: usize = 0;
const KW_COUNT: usize = 1;
const KW_EXISTS: usize = 2;
const KW_COLOR: usize = 3;
const KW_OF: usize = 4;
const KW_THE: usize = 5;
const COLOR_BASE: usize = 6;
const SHAPE_BASE: usize = COLOR_BASE + COLORS.len();
const SIZE_BASE: usize = SHAPE_BASE + SHAPES.len();

/// Closed question vocabulary, index = token id.
pub fn vocabulary() -> Vec<&'static str> {
    let mut v = vec!["<pad>", "count", "exists", "color", "of", "the"];
    v.extend(COLORS);
    v.extend(SHAPES);
    v.extend(SIZES);
    v
}

pub fn vocab_size() -> usize {
    SIZE_BASE + SIZES.len()
}

/// Closed answer vocabulary: counts, yes/no, then color words.
pub fn answer_names() -> Vec<String> {
    let mut v: Vec<String> = (0..=MAX_COUNT).map(|c| c.to_string()).collect();
    v.push("yes".into());
    v.push("no".into());
    v.extend(COLORS.iter().map(|c| c.to_string()));
    v
}

pub fn answer_count() -> usize {
    MAX_COUNT + 1 + 2 + COLORS.len()
}

const ANSWER_YES: usize = MAX_COUNT + 1;
const ANSWER_NO: usize = MAX_COUNT + 2;
const ANSWER_COLOR_BASE: usize = MAX_COUNT + 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SceneObject {
    pub color: usize,
    pub shape: usize,
    pub size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum QuestionKind {
    Count,
    Exists,
    Attribute,
}

impl QuestionKind {
    pub const ALL: [QuestionKind; 3] =
        [QuestionKind::Count, QuestionKind::Exists, QuestionKind::Attribute];

    pub fn as_str(self) -> &'static str {
        match self {
            QuestionKind::Count => "count",
            QuestionKind::Exists => "exists",
            QuestionKind::Attribute => "attribute",
        }
    }
}

/// One training/eval example.
#[derive(Debug, Clone)]
pub struct Sample {
    pub objects: Vec<SceneObject>,
    pub features: FeatureSet,
    pub tokens: TokenSeq,
    pub answer: usize,
    pub kind: QuestionKind,
}

impl Sample {
    /// Row labels for the image side of a trace.
    pub fn object_labels(&self) -> Vec<String> {
        self.objects
            .iter()
            .enumerate()
            .map(|(i, o)| {
                format!(
                    "obj{i}:{}-{}-{}",
                    SIZES[o.size], COLORS[o.color], SHAPES[o.shape]
                )
            })
            .collect()
    }

    /// Row labels for the question side of a trace.
    pub fn token_labels(&self) -> Vec<String> {
        let vocab = vocabulary();
        self.tokens
            .ids
            .iter()
            .map(|&id| vocab[id].to_string())
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn answer_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0usize; answer_count()];
        for s in &self.samples {
            hist[s.answer] += 1;
        }
        hist
    }

    pub fn kind_counts(&self) -> [(QuestionKind, usize); 3] {
        let mut out = QuestionKind::ALL.map(|k| (k, 0usize));
        for s in &self.samples {
            for slot in &mut out {
                if slot.0 == s.kind {
                    slot.1 += 1;
                }
            }
        }
        out
    }
}

/// Task shape: split sizes, template mix weights, and feature noise.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub train: usize,
    pub val: usize,
    pub noise: f64,
    pub count_weight: u32,
    pub exists_weight: u32,
    pub attribute_weight: u32,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.train == 0 {
            return Err(Error::Config("task needs at least one training sample".into()));
        }
        if self.count_weight == 0 && self.exists_weight == 0 && self.attribute_weight == 0 {
            return Err(Error::Config("all question-template weights are zero".into()));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Config(format!(
                "noise must be nonnegative, got {}",
                self.noise
            )));
        }
        Ok(())
    }

    /// Canonical one-line rendering, hashed into manifests.
    pub fn canonical_string(&self) -> String {
        format!(
            "train={} val={} noise={} weights={}/{}/{} colors={} shapes={} sizes={} max_count={}",
            self.train,
            self.val,
            self.noise,
            self.count_weight,
            self.exists_weight,
            self.attribute_weight,
            COLORS.len(),
            SHAPES.len(),
            SIZES.len(),
            MAX_COUNT
        )
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Fixed per-attribute embedding segments, drawn once per run seed and
/// shared by the train and validation splits.
#[derive(Debug, Clone)]
pub struct AttributeTables {
    colors: Tensor,
    shapes: Tensor,
    sizes: Tensor,
}

impl AttributeTables {
    pub fn from_rng(rng: &mut Rng) -> AttributeTables {
        let mut table = |rows: usize| -> Tensor {
            let data: Vec<f64> = (0..rows * SEGMENT)
                .map(|_| rng.uniform(-1.0, 1.0))
                .collect();
            Tensor::from_vec(&[rows, SEGMENT], data).expect("table shape")
        };
        AttributeTables {
            colors: table(COLORS.len()),
            shapes: table(SHAPES.len()),
            sizes: table(SIZES.len()),
        }
    }

    /// Concatenate the three attribute segments and add Gaussian noise.
    pub fn render(&self, objects: &[SceneObject], noise: f64, rng: &mut Rng) -> FeatureSet {
        let mut data = Vec::with_capacity(objects.len() * FEATURE_DIM);
        for obj in objects {
            data.extend_from_slice(self.colors.row(obj.color));
            data.extend_from_slice(self.shapes.row(obj.shape));
            data.extend_from_slice(self.sizes.row(obj.size));
        }
        if noise > 0.0 {
            for v in &mut data {
                *v += rng.normal(0.0, noise);
            }
        }
        let features =
            Tensor::from_vec(&[objects.len(), FEATURE_DIM], data).expect("render shape");
        FeatureSet::dense(features).expect("dense scene")
    }
}

fn random_object(rng: &mut Rng) -> SceneObject {
    SceneObject {
        color: rng.below(COLORS.len()),
        shape: rng.below(SHAPES.len()),
        size: rng.below(SIZES.len()),
    }
}

/// A color other than `not`.
fn other_color(rng: &mut Rng, not: usize) -> usize {
    let mut c = rng.below(COLORS.len() - 1);
    if c >= not {
        c += 1;
    }
    c
}

fn count_scene(rng: &mut Rng) -> (Vec<SceneObject>, Vec<usize>, usize) {
    let target_color = rng.below(COLORS.len());
    let count = rng.below(MAX_COUNT + 1);
    let mut objects = Vec::new();
    for _ in 0..count {
        let shape = rng.below(SHAPES.len());
        objects.push(SceneObject {
            color: target_color,
            shape,
            size: rng.below(SIZES.len()),
        });
        // Same shape, different color: the aggregation-forcing distractor.
        objects.push(SceneObject {
            color: other_color(rng, target_color),
            shape,
            size: rng.below(SIZES.len()),
        });
    }
    let fillers = MIN_OBJECTS.saturating_sub(objects.len()) + rng.below(4);
    for _ in 0..fillers {
        objects.push(SceneObject {
            color: other_color(rng, target_color),
            shape: rng.below(SHAPES.len()),
            size: rng.below(SIZES.len()),
        });
    }
    rng.shuffle(&mut objects);
    let tokens = vec![KW_COUNT, COLOR_BASE + target_color];
    (objects, tokens, count)
}

fn exists_scene(rng: &mut Rng) -> (Vec<SceneObject>, Vec<usize>, usize) {
    let target_shape = rng.below(SHAPES.len());
    let present = rng.bernoulli(0.5);
    let m = MIN_OBJECTS + rng.below(6);
    let mut objects = Vec::new();
    if present {
        for _ in 0..1 + rng.below(2) {
            objects.push(SceneObject {
                color: rng.below(COLORS.len()),
                shape: target_shape,
                size: rng.below(SIZES.len()),
            });
        }
    }
    while objects.len() < m {
        let mut shape = rng.below(SHAPES.len() - 1);
        if shape >= target_shape {
            shape += 1;
        }
        objects.push(SceneObject {
            color: rng.below(COLORS.len()),
            shape,
            size: rng.below(SIZES.len()),
        });
    }
    rng.shuffle(&mut objects);
    let tokens = vec![KW_EXISTS, SHAPE_BASE + target_shape];
    let answer = if present { ANSWER_YES } else { ANSWER_NO };
    (objects, tokens, answer)
}

fn attribute_scene(rng: &mut Rng) -> (Vec<SceneObject>, Vec<usize>, usize) {
    let size = rng.below(SIZES.len());
    let shape = rng.below(SHAPES.len());
    let answer_color = rng.below(COLORS.len());
    let mut objects = vec![SceneObject {
        color: answer_color,
        shape,
        size,
    }];
    let extras = 2 + rng.below(5);
    while objects.len() < 1 + extras {
        let candidate = random_object(rng);
        // The (size, shape) pair picks out exactly one object.
        if candidate.shape == shape && candidate.size == size {
            continue;
        }
        objects.push(candidate);
    }
    rng.shuffle(&mut objects);
    let tokens = vec![
        KW_COLOR,
        KW_OF,
        KW_THE,
        SIZE_BASE + size,
        SHAPE_BASE + shape,
    ];
    (objects, tokens, ANSWER_COLOR_BASE + answer_color)
}

fn pick_kind(rng: &mut Rng, spec: &TaskSpec) -> QuestionKind {
    let total = spec.count_weight + spec.exists_weight + spec.attribute_weight;
    let r = rng.below(total as usize) as u32;
    if r < spec.count_weight {
        QuestionKind::Count
    } else if r < spec.count_weight + spec.exists_weight {
        QuestionKind::Exists
    } else {
        QuestionKind::Attribute
    }
}

fn generate_sample(
    tables: &AttributeTables,
    spec: &TaskSpec,
    rng: &mut Rng,
) -> Sample {
    let kind = pick_kind(rng, spec);
    let (objects, token_ids, answer) = match kind {
        QuestionKind::Count => count_scene(rng),
        QuestionKind::Exists => exists_scene(rng),
        QuestionKind::Attribute => attribute_scene(rng),
    };
    debug_assert!(objects.len() >= MIN_OBJECTS && objects.len() <= MAX_OBJECTS);
    let features = tables.render(&objects, spec.noise, rng);
    Sample {
        objects,
        features,
        tokens: TokenSeq::dense(token_ids),
        answer,
        kind,
    }
}

/// Train and validation splits plus the attribute tables they share.
#[derive(Debug, Clone)]
pub struct GeneratedTask {
    pub tables: AttributeTables,
    pub train: Dataset,
    pub val: Dataset,
}

/// Deterministic in (spec, seed): per-sample randomness is derived from the
/// sample's index, never from generation order.
pub fn generate_task(spec: &TaskSpec, base: &Rng) -> Result<GeneratedTask> {
    spec.validate()?;
    let mut table_rng = base.derive(&[streams::DATA_TABLES]);
    let tables = AttributeTables::from_rng(&mut table_rng);
    let split = |stream: u64, n: usize| -> Dataset {
        let samples = (0..n)
            .map(|i| {
                let mut rng = base.derive(&[stream, i as u64]);
                generate_sample(&tables, spec, &mut rng)
            })
            .collect();
        Dataset { samples }
    };
    Ok(GeneratedTask {
        train: split(streams::DATA_TRAIN, spec.train),
        val: split(streams::DATA_VAL, spec.val),
        tables,
    })
}

/// Recompute a sample's answer symbolically from its object triples and
/// token ids. Used to cross-check generation.
pub fn symbolic_answer(objects: &[SceneObject], tokens: &[usize]) -> Result<usize> {
    match tokens.first() {
        Some(&KW_COUNT) => {
            let color = tokens
                .get(1)
                .and_then(|&t| t.checked_sub(COLOR_BASE))
                .filter(|&c| c < COLORS.len())
                .ok_or_else(|| Error::Config("malformed count question".into()))?;
            let n = objects.iter().filter(|o| o.color == color).count();
            Ok(n.min(MAX_COUNT))
        }
        Some(&KW_EXISTS) => {
            let shape = tokens
                .get(1)
                .and_then(|&t| t.checked_sub(SHAPE_BASE))
                .filter(|&s| s < SHAPES.len())
                .ok_or_else(|| Error::Config("malformed exists question".into()))?;
            let present = objects.iter().any(|o| o.shape == shape);
            Ok(if present { ANSWER_YES } else { ANSWER_NO })
        }
        Some(&KW_COLOR) => {
            let size = tokens
                .get(3)
                .and_then(|&t| t.checked_sub(SIZE_BASE))
                .filter(|&z| z < SIZES.len())
                .ok_or_else(|| Error::Config("malformed attribute question".into()))?;
            let shape = tokens
                .get(4)
                .and_then(|&t| t.checked_sub(SHAPE_BASE))
                .filter(|&s| s < SHAPES.len())
                .ok_or_else(|| Error::Config("malformed attribute question".into()))?;
            let hits: Vec<&SceneObject> = objects
                .iter()
                .filter(|o| o.shape == shape && o.size == size)
                .collect();
            match hits.as_slice() {
                [only] => Ok(ANSWER_COLOR_BASE + only.color),
                _ => Err(Error::Config(format!(
                    "attribute question matches {} objects",
                    hits.len()
                ))),
            }
        }
        _ => Err(Error::Config("unknown question template".into())),
    }
}

/// A batch padded to its per-batch maxima. Scene features are stored as one
/// rank-3 block; `scene(i)` slices a sample back out with its mask.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Tensor,
    pub x_masks: Vec<Vec<bool>>,
    pub tokens: Vec<TokenSeq>,
    pub targets: Tensor,
    pub answers: Vec<usize>,
    pub kinds: Vec<QuestionKind>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.x_masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x_masks.is_empty()
    }

    pub fn scene(&self, i: usize) -> Result<FeatureSet> {
        let rows = self.x.shape()[1];
        let cols = self.x.shape()[2];
        let start = i * rows * cols;
        let data = self.x.data()[start..start + rows * cols].to_vec();
        FeatureSet::new(Tensor::from_vec(&[rows, cols], data)?, self.x_masks[i].clone())
    }

    pub fn target(&self, i: usize) -> Result<Tensor> {
        let n = self.targets.cols();
        let row = self.targets.row(i).to_vec();
        Tensor::from_vec(&[1, n], row)
    }
}

/// Pad a nonempty sample list to shared scene/question lengths. Masks mark
/// exactly the appended tail; padded token slots hold the pad id.
pub fn pad_batch(samples: &[&Sample]) -> Result<Batch> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let m_max = samples.iter().map(|s| s.features.rows()).max().unwrap();
    let n_max = samples.iter().map(|s| s.tokens.ids.len()).max().unwrap();
    let b = samples.len();
    let d_x = FEATURE_DIM;

    let mut x = vec![0.0; b * m_max * d_x];
    let mut x_masks = Vec::with_capacity(b);
    let mut tokens = Vec::with_capacity(b);
    let mut targets = vec![0.0; b * answer_count()];
    let mut answers = Vec::with_capacity(b);
    let mut kinds = Vec::with_capacity(b);

    for (i, s) in samples.iter().enumerate() {
        let padded = s.features.pad_to(m_max)?;
        x[i * m_max * d_x..(i + 1) * m_max * d_x].copy_from_slice(padded.features().data());
        x_masks.push(padded.mask().to_vec());

        let mut ids = s.tokens.ids.clone();
        let mut mask = s.tokens.mask.clone();
        ids.resize(n_max, PAD);
        mask.resize(n_max, false);
        tokens.push(TokenSeq { ids, mask });

        targets[i * answer_count() + s.answer] = 1.0;
        answers.push(s.answer);
        kinds.push(s.kind);
    }

    Ok(Batch {
        x: Tensor::from_vec(&[b, m_max, d_x], x)?,
        x_masks,
        tokens,
        targets: Tensor::from_vec(&[b, answer_count()], targets)?,
        answers,
        kinds,
    })
}

/// Structured-text manifest for a generated split.
pub fn manifest_string(spec: &TaskSpec, seed: u64, split: &str, data: &Dataset) -> String {
    let mut out = String::new();
    out.push_str("manifest 1\n");
    out.push_str(&format!("split {split}\n"));
    out.push_str(&format!("seed {seed}\n"));
    out.push_str(&format!("spec {}\n", spec.canonical_string()));
    out.push_str(&format!("spec_hash {}\n", spec.hash()));
    out.push_str(&format!("samples {}\n", data.len()));
    for (kind, n) in data.kind_counts() {
        out.push_str(&format!("kind.{} {}\n", kind.as_str(), n));
    }
    let names = answer_names();
    for (answer, n) in data.answer_histogram().iter().enumerate() {
        if *n > 0 {
            out.push_str(&format!("answer.{} {}\n", names[answer], n));
        }
    }
    for (i, s) in data.samples.iter().enumerate() {
        out.push_str(&format!(
            "sample {i} kind={} objects={} tokens={} answer={}\n",
            s.kind.as_str(),
            s.objects.len(),
            s.tokens.ids.len(),
            names[s.answer]
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(train: usize, val: usize) -> TaskSpec {
        TaskSpec {
            train,
            val,
            noise: 0.05,
            count_weight: 1,
            exists_weight: 1,
            attribute_weight: 1,
        }
    }

    #[test]
    fn vocab_and_answers_are_closed_and_consistent() {
        let vocab = vocabulary();
        assert_eq!(vocab.len(), vocab_size());
        assert_eq!(vocab[PAD], "<pad>");
        assert_eq!(vocab[COLOR_BASE], "red");
        assert_eq!(vocab[SHAPE_BASE], "circle");
        assert_eq!(vocab[SIZE_BASE], "small");
        let answers = answer_names();
        assert_eq!(answers.len(), answer_count());
        assert_eq!(answers[0], "0");
        assert_eq!(answers[ANSWER_YES], "yes");
        assert_eq!(answers[ANSWER_COLOR_BASE], "red");
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let s = spec(50, 10);
        let a = generate_task(&s, &Rng::from_seed(7)).unwrap();
        let b = generate_task(&s, &Rng::from_seed(7)).unwrap();
        for (sa, sb) in a.train.samples.iter().zip(&b.train.samples) {
            assert_eq!(sa.objects, sb.objects);
            assert_eq!(sa.tokens.ids, sb.tokens.ids);
            assert_eq!(sa.answer, sb.answer);
            assert!(sa.features.features().bit_eq(sb.features.features()));
        }
        let c = generate_task(&s, &Rng::from_seed(8)).unwrap();
        let differs = a
            .train
            .samples
            .iter()
            .zip(&c.train.samples)
            .any(|(sa, sc)| sa.objects != sc.objects || sa.answer != sc.answer);
        assert!(differs);
    }

    #[test]
    fn answers_match_symbolic_checker() {
        let s = spec(300, 50);
        let task = generate_task(&s, &Rng::from_seed(11)).unwrap();
        for sample in task.train.samples.iter().chain(&task.val.samples) {
            let symbolic = symbolic_answer(&sample.objects, &sample.tokens.ids).unwrap();
            assert_eq!(sample.answer, symbolic, "inconsistent {:?}", sample.kind);
        }
    }

    #[test]
    fn scene_sizes_and_token_lengths_stay_in_bounds() {
        let s = spec(400, 0);
        let task = generate_task(&s, &Rng::from_seed(13)).unwrap();
        for sample in &task.train.samples {
            assert!(sample.objects.len() >= MIN_OBJECTS);
            assert!(sample.objects.len() <= MAX_OBJECTS);
            assert!(!sample.tokens.ids.is_empty());
            assert!(sample.tokens.ids.len() <= MAX_TOKENS);
            assert_eq!(sample.features.dim(), FEATURE_DIM);
        }
    }

    #[test]
    fn exists_only_spec_uses_binary_answers() {
        let s = TaskSpec {
            count_weight: 0,
            attribute_weight: 0,
            ..spec(100, 0)
        };
        let task = generate_task(&s, &Rng::from_seed(3)).unwrap();
        for sample in &task.train.samples {
            assert_eq!(sample.kind, QuestionKind::Exists);
            assert!(sample.answer == ANSWER_YES || sample.answer == ANSWER_NO);
        }
    }

    #[test]
    fn zero_weights_everywhere_is_infeasible() {
        let s = TaskSpec {
            count_weight: 0,
            exists_weight: 0,
            attribute_weight: 0,
            ..spec(10, 0)
        };
        assert!(generate_task(&s, &Rng::from_seed(1)).is_err());
    }

    #[test]
    fn counting_answers_are_uniform_chi_squared() {
        let s = TaskSpec {
            exists_weight: 0,
            attribute_weight: 0,
            ..spec(10_000, 0)
        };
        let task = generate_task(&s, &Rng::from_seed(100)).unwrap();
        let hist = task.train.answer_histogram();
        let expected = 10_000.0 / (MAX_COUNT + 1) as f64;
        let chi2: f64 = (0..=MAX_COUNT)
            .map(|c| {
                let d = hist[c] as f64 - expected;
                d * d / expected
            })
            .sum();
        // 4 degrees of freedom; 18.47 is the 99.9th percentile.
        assert!(chi2 < 18.47, "chi^2 = {chi2}, hist = {:?}", &hist[..=MAX_COUNT]);
    }

    #[test]
    fn counting_scenes_pair_targets_with_same_shape_distractors() {
        let s = TaskSpec {
            exists_weight: 0,
            attribute_weight: 0,
            ..spec(500, 0)
        };
        let task = generate_task(&s, &Rng::from_seed(5)).unwrap();
        for sample in &task.train.samples {
            let color = sample.tokens.ids[1] - COLOR_BASE;
            for target in sample.objects.iter().filter(|o| o.color == color) {
                let has_distractor = sample
                    .objects
                    .iter()
                    .any(|o| o.shape == target.shape && o.color != color);
                assert!(
                    has_distractor,
                    "target {target:?} lacks a same-shape distractor"
                );
            }
        }
    }

    #[test]
    fn rendered_features_depend_on_attributes_not_position() {
        let mut rng = Rng::from_seed(17);
        let tables = AttributeTables::from_rng(&mut rng);
        let objects = [
            SceneObject { color: 1, shape: 2, size: 0 },
            SceneObject { color: 1, shape: 2, size: 0 },
            SceneObject { color: 3, shape: 2, size: 0 },
        ];
        let mut no_noise = Rng::from_seed(0);
        let f = tables.render(&objects, 0.0, &mut no_noise);
        // Identical attribute triples render identically without noise.
        assert_eq!(f.features().row(0), f.features().row(1));
        // Same shape and size but different color: only the first segment
        // differs.
        let a = f.features().row(0);
        let b = f.features().row(2);
        assert_ne!(&a[..SEGMENT], &b[..SEGMENT]);
        assert_eq!(&a[SEGMENT..], &b[SEGMENT..]);
    }

    #[test]
    fn noise_perturbs_at_the_configured_scale() {
        let mut rng = Rng::from_seed(19);
        let tables = AttributeTables::from_rng(&mut rng);
        let objects = [SceneObject { color: 0, shape: 0, size: 0 }; 200];
        let mut clean_rng = Rng::from_seed(1);
        let clean = tables.render(&objects, 0.0, &mut clean_rng);
        let mut noisy_rng = Rng::from_seed(1);
        let noisy = tables.render(&objects, 0.05, &mut noisy_rng);
        let n = (objects.len() * FEATURE_DIM) as f64;
        let mean_sq: f64 = clean
            .features()
            .data()
            .iter()
            .zip(noisy.features().data())
            .map(|(c, x)| (c - x) * (c - x))
            .sum::<f64>()
            / n;
        // Sample variance of N(0, 0.05) should be near 0.0025.
        assert!((mean_sq - 0.0025).abs() < 0.0005, "mean square {mean_sq}");
    }

    #[test]
    fn pad_batch_masks_exactly_the_padding() {
        let s = spec(6, 0);
        let task = generate_task(&s, &Rng::from_seed(23)).unwrap();
        let refs: Vec<&Sample> = task.train.samples.iter().collect();
        let batch = pad_batch(&refs).unwrap();
        assert_eq!(batch.len(), 6);
        let m_max = batch.x.shape()[1];
        for (i, sample) in task.train.samples.iter().enumerate() {
            let scene = batch.scene(i).unwrap();
            assert_eq!(scene.rows(), m_max);
            assert_eq!(scene.valid_rows(), sample.objects.len());
            for r in 0..sample.objects.len() {
                assert_eq!(scene.features().row(r), sample.features.features().row(r));
            }
            for r in sample.objects.len()..m_max {
                assert!(!scene.mask()[r]);
                assert!(scene.features().row(r).iter().all(|&v| v == 0.0));
            }
            let tokens = &batch.tokens[i];
            assert_eq!(&tokens.ids[..sample.tokens.ids.len()], &sample.tokens.ids[..]);
            assert!(tokens.ids[sample.tokens.ids.len()..].iter().all(|&t| t == PAD));
            let target = batch.target(i).unwrap();
            assert_eq!(target.data()[sample.answer], 1.0);
            assert_eq!(target.data().iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn single_sample_batch_adds_no_padding() {
        let s = spec(1, 0);
        let task = generate_task(&s, &Rng::from_seed(29)).unwrap();
        let refs: Vec<&Sample> = task.train.samples.iter().collect();
        let batch = pad_batch(&refs).unwrap();
        assert_eq!(batch.x.shape()[1], task.train.samples[0].objects.len());
        assert!(batch.x_masks[0].iter().all(|&v| v));
        assert!(pad_batch(&[]).is_err());
    }

    #[test]
    fn manifest_lists_spec_hash_and_samples() {
        let s = spec(3, 0);
        let task = generate_task(&s, &Rng::from_seed(31)).unwrap();
        let manifest = manifest_string(&s, 31, "train", &task.train);
        assert!(manifest.starts_with("manifest 1\n"));
        assert!(manifest.contains(&format!("spec_hash {}", s.hash())));
        assert!(manifest.contains("samples 3"));
        assert_eq!(manifest.matches("\nsample ").count(), 3);
        // Hash is stable for equal specs and sensitive to changes.
        assert_eq!(s.hash(), spec(3, 0).hash());
        assert_ne!(s.hash(), spec(4, 0).hash());
    }
}
