//! The procedural image world: a closed set of attribute families
//! (color/shape/size/hazard), a deterministic anti-aliased renderer, biased
//! label sampling, caption templates, and dataset building.

pub mod dataset;
pub mod render;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::Rng;
use rand::Rng as _;

pub use dataset::{build_dataset, BuildConfig, DatasetManifest, ManifestRecord};
pub use render::render_sample;

/// Family of mutually exclusive categories, e.g. color in {red, green, blue}.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Family {
    pub name: String,
    pub categories: Vec<String>,
}

/// Ordered attribute families. The order fixes caption word order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSchema {
    pub families: Vec<Family>,
}

impl AttributeSchema {
    pub fn new(families: Vec<Family>) -> Result<Self> {
        let schema = Self { families };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        if self.families.is_empty() {
            return Err(Error::Schema("schema has no families".into()));
        }
        let mut seen = BTreeSet::new();
        for f in &self.families {
            if f.categories.len() < 2 {
                return Err(Error::Schema(format!(
                    "family `{}` needs at least 2 categories",
                    f.name
                )));
            }
            if !seen.insert(f.name.clone()) {
                return Err(Error::Schema(format!("duplicate family `{}`", f.name)));
            }
            for c in &f.categories {
                if !seen.insert(c.clone()) {
                    return Err(Error::Schema(format!(
                        "category `{c}` is not unique across the schema"
                    )));
                }
            }
        }
        if self.family("hazard").is_none() {
            return Err(Error::Schema("schema must define a `hazard` family".into()));
        }
        Ok(())
    }

    /// The default world: size, color, shape, hazard.
    pub fn default_world() -> Self {
        Self {
            families: vec![
                Family {
                    name: "size".into(),
                    categories: vec!["small".into(), "large".into()],
                },
                Family {
                    name: "color".into(),
                    categories: vec!["red".into(), "green".into(), "blue".into()],
                },
                Family {
                    name: "shape".into(),
                    categories: vec!["circle".into(), "square".into(), "triangle".into()],
                },
                Family {
                    name: "hazard".into(),
                    categories: vec!["clean".into(), "marked".into()],
                },
            ],
        }
    }

    pub fn family(&self, name: &str) -> Option<&Family> {
        self.families.iter().find(|f| f.name == name)
    }

    pub fn family_index(&self, name: &str) -> Option<usize> {
        self.families.iter().position(|f| f.name == name)
    }

    pub fn category_index(&self, family: &str, category: &str) -> Option<usize> {
        self.family(family)?
            .categories
            .iter()
            .position(|c| c == category)
    }

    /// Canonical hash covering family order, names, and categories.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for f in &self.families {
            h.update(f.name.as_bytes());
            h.update(b":");
            for c in &f.categories {
                h.update(c.as_bytes());
                h.update(b",");
            }
            h.update(b";");
        }
        hex(&h.finalize()[..16])
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// One concrete sample: a category per family plus the render seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleLabel {
    /// `(family, category)` in schema order.
    pub assignments: Vec<(String, String)>,
    pub seed: u64,
}

impl SampleLabel {
    pub fn get(&self, family: &str) -> Option<&str> {
        self.assignments
            .iter()
            .find(|(f, _)| f == family)
            .map(|(_, c)| c.as_str())
    }

    pub fn validate(&self, schema: &AttributeSchema) -> Result<()> {
        for (f, c) in &self.assignments {
            if schema.category_index(f, c).is_none() {
                return Err(Error::Schema(format!("unknown category `{c}` in `{f}`")));
            }
        }
        for fam in &schema.families {
            if self.get(&fam.name).is_none() {
                return Err(Error::Schema(format!("label misses family `{}`", fam.name)));
            }
        }
        Ok(())
    }
}

/// Per-family categorical weights, optionally conditioned on an earlier
/// family's drawn value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyBias {
    pub family: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    /// `(conditioning family, per-category weight rows)`
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conditional: Option<ConditionalBias>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalBias {
    pub on: String,
    /// One row per category of `on`, in that family's category order.
    pub rows: Vec<Vec<f64>>,
}

/// Sampling weights for the whole schema. Families without an entry draw
/// uniformly.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BiasSpec {
    pub families: Vec<FamilyBias>,
}

fn check_weights(w: &[f64], n: usize, ctx: &str) -> Result<()> {
    if w.len() != n {
        return Err(Error::Config(format!(
            "{ctx}: expected {n} weights, got {}",
            w.len()
        )));
    }
    if w.iter().any(|&x| x < 0.0 || !x.is_finite()) {
        return Err(Error::Config(format!("{ctx}: weights must be non-negative")));
    }
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(Error::Config(format!("{ctx}: weights sum to {s}, not 1")));
    }
    Ok(())
}

impl BiasSpec {
    pub fn uniform() -> Self {
        Self::default()
    }

    pub fn validate(&self, schema: &AttributeSchema) -> Result<()> {
        for fb in &self.families {
            let fi = schema
                .family_index(&fb.family)
                .ok_or_else(|| Error::Config(format!("bias for unknown family `{}`", fb.family)))?;
            let ncat = schema.families[fi].categories.len();
            match (&fb.weights, &fb.conditional) {
                (Some(w), None) => check_weights(w, ncat, &format!("bias[{}]", fb.family))?,
                (None, Some(c)) => {
                    let on_idx = schema.family_index(&c.on).ok_or_else(|| {
                        Error::Config(format!("bias conditions on unknown family `{}`", c.on))
                    })?;
                    if on_idx >= fi {
                        return Err(Error::Config(format!(
                            "bias for `{}` must condition on an earlier family",
                            fb.family
                        )));
                    }
                    let non = schema.families[on_idx].categories.len();
                    if c.rows.len() != non {
                        return Err(Error::Config(format!(
                            "bias[{}]: need one weight row per `{}` category",
                            fb.family, c.on
                        )));
                    }
                    for (i, row) in c.rows.iter().enumerate() {
                        check_weights(row, ncat, &format!("bias[{}][{}]", fb.family, i))?;
                    }
                }
                _ => {
                    return Err(Error::Config(format!(
                        "bias for `{}` must set exactly one of weights/conditional",
                        fb.family
                    )))
                }
            }
        }
        Ok(())
    }

    fn entry(&self, family: &str) -> Option<&FamilyBias> {
        self.families.iter().find(|f| f.family == family)
    }
}

fn draw_categorical(weights: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Draws one label under the bias. Marginal frequencies converge to the
/// configured weights; conditioned families follow the row of the drawn
/// conditioning value.
pub fn sample_label(schema: &AttributeSchema, bias: &BiasSpec, rng: &mut Rng) -> SampleLabel {
    let mut assignments: Vec<(String, String)> = Vec::with_capacity(schema.families.len());
    for fam in &schema.families {
        let ncat = fam.categories.len();
        let uniform = vec![1.0 / ncat as f64; ncat];
        let idx = match bias.entry(&fam.name) {
            None => draw_categorical(&uniform, rng),
            Some(FamilyBias {
                weights: Some(w), ..
            }) => draw_categorical(w, rng),
            Some(FamilyBias {
                conditional: Some(c),
                ..
            }) => {
                let on_val = assignments
                    .iter()
                    .find(|(f, _)| *f == c.on)
                    .map(|(_, v)| v.clone())
                    .expect("validated: conditioning family drawn first");
                let on_idx = schema.category_index(&c.on, &on_val).unwrap();
                draw_categorical(&c.rows[on_idx], rng)
            }
            _ => draw_categorical(&uniform, rng),
        };
        assignments.push((fam.name.clone(), fam.categories[idx].clone()));
    }
    let seed = rng.gen::<u64>();
    SampleLabel { assignments, seed }
}

/// Tokenized prompt pair over the closed vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptSpec {
    pub positive: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub negative: Vec<String>,
}

impl PromptSpec {
    pub fn new(positive: Vec<String>, negative: Vec<String>) -> Result<Self> {
        if positive.is_empty() {
            return Err(Error::Config("positive tokens must be non-empty".into()));
        }
        Ok(Self { positive, negative })
    }

    pub fn positive_only(tokens: &[&str]) -> Self {
        Self {
            positive: tokens.iter().map(|s| s.to_string()).collect(),
            negative: Vec::new(),
        }
    }

    pub fn with_negative(tokens: &[&str], negative: &[&str]) -> Self {
        Self {
            positive: tokens.iter().map(|s| s.to_string()).collect(),
            negative: negative.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Space-joined display of the positive tokens.
    pub fn text(&self) -> String {
        self.positive.join(" ")
    }
}

impl std::fmt::Display for PromptSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.positive.join(" "))?;
        if !self.negative.is_empty() {
            write!(f, " [neg: {}]", self.negative.join(" "))?;
        }
        Ok(())
    }
}

/// Templated caption: `a` + the category word of every non-omitted family in
/// schema order; fully generic prompt `a object` when everything is omitted.
pub fn caption(
    schema: &AttributeSchema,
    label: &SampleLabel,
    omit: &BTreeSet<String>,
) -> Result<PromptSpec> {
    for o in omit {
        if schema.family(o).is_none() {
            return Err(Error::Schema(format!("cannot omit unknown family `{o}`")));
        }
    }
    label.validate(schema)?;
    let mut tokens = vec!["a".to_string()];
    for fam in &schema.families {
        if omit.contains(&fam.name) {
            continue;
        }
        tokens.push(label.get(&fam.name).unwrap().to_string());
    }
    if tokens.len() == 1 {
        tokens.push("object".to_string());
    }
    PromptSpec::new(tokens, Vec::new())
}

/// Function words always present in the vocabulary.
pub const FUNCTION_WORDS: &[&str] = &["a", "object", "no", "without", "non", "anti", "fair"];

/// Closed token list derived from the schema: function words, family names,
/// then every category, all in a fixed order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        Self { tokens }
    }

    pub fn from_schema(schema: &AttributeSchema) -> Self {
        let mut tokens: Vec<String> = FUNCTION_WORDS.iter().map(|s| s.to_string()).collect();
        for f in &schema.families {
            tokens.push(f.name.clone());
        }
        for f in &schema.families {
            for c in &f.categories {
                tokens.push(c.clone());
            }
        }
        Self { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.tokens
            .iter()
            .position(|t| t == token)
            .ok_or_else(|| Error::Vocabulary(token.to_string()))
    }

    pub fn ids(&self, tokens: &[String]) -> Result<Vec<usize>> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn two_family_schema() -> AttributeSchema {
        AttributeSchema::new(vec![
            Family {
                name: "color".into(),
                categories: vec!["red".into(), "green".into(), "blue".into()],
            },
            Family {
                name: "shape".into(),
                categories: vec!["circle".into(), "square".into(), "triangle".into()],
            },
            Family {
                name: "hazard".into(),
                categories: vec!["clean".into(), "marked".into()],
            },
        ])
        .unwrap()
    }

    fn label(schema: &AttributeSchema, cats: &[&str], seed: u64) -> SampleLabel {
        SampleLabel {
            assignments: schema
                .families
                .iter()
                .zip(cats)
                .map(|(f, c)| (f.name.clone(), c.to_string()))
                .collect(),
            seed,
        }
    }

    #[test]
    fn schema_requires_hazard_and_unique_categories() {
        let missing = AttributeSchema::new(vec![Family {
            name: "color".into(),
            categories: vec!["red".into(), "blue".into()],
        }]);
        assert!(missing.is_err());
        let dup = AttributeSchema::new(vec![
            Family {
                name: "color".into(),
                categories: vec!["red".into(), "red".into()],
            },
            Family {
                name: "hazard".into(),
                categories: vec!["clean".into(), "marked".into()],
            },
        ]);
        assert!(dup.is_err());
    }

    #[test]
    fn caption_matches_template() {
        let schema = two_family_schema();
        let l = label(&schema, &["red", "circle", "clean"], 1);
        // omit hazard to reproduce the two-family example
        let mut omit = BTreeSet::new();
        omit.insert("hazard".to_string());
        let p = caption(&schema, &l, &omit).unwrap();
        assert_eq!(p.positive, vec!["a", "red", "circle"]);

        omit.insert("color".to_string());
        let p = caption(&schema, &l, &omit).unwrap();
        assert_eq!(p.positive, vec!["a", "circle"]);

        omit.insert("shape".to_string());
        let p = caption(&schema, &l, &omit).unwrap();
        assert_eq!(p.positive, vec!["a", "object"]);
    }

    #[test]
    fn caption_rejects_unknown_family_in_omit() {
        let schema = two_family_schema();
        let l = label(&schema, &["red", "circle", "clean"], 1);
        let mut omit = BTreeSet::new();
        omit.insert("texture".to_string());
        assert!(caption(&schema, &l, &omit).is_err());
    }

    /// Caption with omit = none uniquely determines the captioned families.
    #[test]
    fn caption_label_bijection() {
        let schema = two_family_schema();
        let mut seen = std::collections::BTreeMap::new();
        for color in ["red", "green", "blue"] {
            for shape in ["circle", "square", "triangle"] {
                for hazard in ["clean", "marked"] {
                    let l = label(&schema, &[color, shape, hazard], 0);
                    let p = caption(&schema, &l, &BTreeSet::new()).unwrap();
                    let prev = seen.insert(p.positive.clone(), l.assignments.clone());
                    assert!(prev.is_none(), "caption collision for {:?}", p.positive);
                }
            }
        }
        assert_eq!(seen.len(), 18);
    }

    #[test]
    fn degenerate_weights_always_draw_same_category() {
        let schema = two_family_schema();
        let bias = BiasSpec {
            families: vec![FamilyBias {
                family: "color".into(),
                weights: Some(vec![1.0, 0.0, 0.0]),
                conditional: None,
            }],
        };
        bias.validate(&schema).unwrap();
        let mut rng = rng_from_seed(11);
        for _ in 0..100 {
            let l = sample_label(&schema, &bias, &mut rng);
            assert_eq!(l.get("color"), Some("red"));
        }
    }

    #[test]
    fn marginal_frequencies_converge() {
        let schema = two_family_schema();
        let bias = BiasSpec {
            families: vec![FamilyBias {
                family: "color".into(),
                weights: Some(vec![0.9, 0.05, 0.05]),
                conditional: None,
            }],
        };
        let mut rng = rng_from_seed(12);
        let n = 10_000;
        let red = (0..n)
            .filter(|_| sample_label(&schema, &bias, &mut rng).get("color") == Some("red"))
            .count();
        let freq = red as f64 / n as f64;
        assert!((freq - 0.9).abs() < 0.01, "red frequency {freq}");
    }

    #[test]
    fn conditional_bias_follows_conditioning_value() {
        // schema order is color, shape; condition shape... conditioning must
        // come first, so bias shape's color? Use a schema ordered shape-first.
        let schema = AttributeSchema::new(vec![
            Family {
                name: "shape".into(),
                categories: vec!["circle".into(), "square".into()],
            },
            Family {
                name: "color".into(),
                categories: vec!["red".into(), "green".into(), "blue".into()],
            },
            Family {
                name: "hazard".into(),
                categories: vec!["clean".into(), "marked".into()],
            },
        ])
        .unwrap();
        let bias = BiasSpec {
            families: vec![FamilyBias {
                family: "color".into(),
                weights: None,
                conditional: Some(ConditionalBias {
                    on: "shape".into(),
                    rows: vec![vec![0.9, 0.05, 0.05], vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]],
                }),
            }],
        };
        bias.validate(&schema).unwrap();
        let mut rng = rng_from_seed(13);
        let mut circle_n = 0usize;
        let mut circle_red = 0usize;
        for _ in 0..10_000 {
            let l = sample_label(&schema, &bias, &mut rng);
            if l.get("shape") == Some("circle") {
                circle_n += 1;
                if l.get("color") == Some("red") {
                    circle_red += 1;
                }
            }
        }
        let p = circle_red as f64 / circle_n as f64;
        assert!((p - 0.9).abs() < 0.02, "P(red|circle) = {p}");
    }

    #[test]
    fn bias_validation_rejects_bad_weights() {
        let schema = two_family_schema();
        let bad_sum = BiasSpec {
            families: vec![FamilyBias {
                family: "color".into(),
                weights: Some(vec![0.5, 0.2, 0.2]),
                conditional: None,
            }],
        };
        assert!(bad_sum.validate(&schema).is_err());
        let negative = BiasSpec {
            families: vec![FamilyBias {
                family: "color".into(),
                weights: Some(vec![1.2, -0.1, -0.1]),
                conditional: None,
            }],
        };
        assert!(negative.validate(&schema).is_err());
        // conditioning on a later family is rejected
        let forward_ref = BiasSpec {
            families: vec![FamilyBias {
                family: "color".into(),
                weights: None,
                conditional: Some(ConditionalBias {
                    on: "shape".into(),
                    rows: vec![vec![1.0, 0.0, 0.0]; 3],
                }),
            }],
        };
        assert!(forward_ref.validate(&schema).is_err());
    }

    #[test]
    fn vocabulary_lookup() {
        let schema = AttributeSchema::default_world();
        let vocab = Vocabulary::from_schema(&schema);
        assert!(vocab.id("a").is_ok());
        assert!(vocab.id("marked").is_ok());
        assert!(vocab.id("fair").is_ok());
        assert!(matches!(
            vocab.id("zebra"),
            Err(crate::Error::Vocabulary(_))
        ));
        // identity order is stable
        let v2 = Vocabulary::from_schema(&schema);
        assert_eq!(vocab.tokens(), v2.tokens());
    }

    #[test]
    fn schema_hash_changes_with_content() {
        let a = AttributeSchema::default_world();
        let mut b = AttributeSchema::default_world();
        b.families[1].categories.push("yellow".into());
        assert_ne!(a.hash(), b.hash());
    }
}
