//! Rule-based relational question answering over generated scenes.
//!
//! Every answer is a deterministic function of the rendered mask: components
//! are 4-connected, distances are minimum pixel-centre distances, and all
//! relation thresholds come from [`AnnotatorConfig`].

mod components;
mod templates;
mod vocab;

pub use components::{extract_components, label_components, min_distance, Component, ComponentGraph, School};
pub use templates::{answer_question, templates_for, Rule, Target, Template, TEMPLATES};
pub use vocab::{tokenize, AnswerVocab, QuestionVocab, VocabEntry};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{rasterize, Scene};

#[derive(Debug, Error)]
pub enum QaError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("unknown answer {0:?}")]
    UnknownAnswer(String),
}

/// The six question families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    BasicJudging,
    BasicCounting,
    RelJudging,
    RelCounting,
    ObjectAnalysis,
    Comprehensive,
}

impl Category {
    /// Column order of the metrics table.
    pub const ALL: [Category; 6] = [
        Category::BasicJudging,
        Category::RelJudging,
        Category::BasicCounting,
        Category::RelCounting,
        Category::ObjectAnalysis,
        Category::Comprehensive,
    ];

    pub fn is_counting(self) -> bool {
        matches!(self, Category::BasicCounting | Category::RelCounting)
    }

    pub fn is_judging(self) -> bool {
        matches!(self, Category::BasicJudging | Category::RelJudging)
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::BasicJudging => "basic_judging",
            Category::BasicCounting => "basic_counting",
            Category::RelJudging => "rel_judging",
            Category::RelCounting => "rel_counting",
            Category::ObjectAnalysis => "object_analysis",
            Category::Comprehensive => "comprehensive",
        }
    }
}

/// Fixed thresholds of the annotation rules.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorConfig {
    pub cell_size_m: f64,
    /// "near" relation, metres.
    pub near_m: f64,
    /// Building-to-playground distance that forms a school, metres.
    pub school_m: f64,
    pub count_cap: u32,
}

impl Default for AnnotatorConfig {
    fn default() -> Self {
        Self {
            cell_size_m: 4.0,
            near_m: 100.0,
            school_m: 40.0,
            count_cap: 9,
        }
    }
}

impl AnnotatorConfig {
    pub fn for_scene(scene: &Scene) -> Self {
        Self {
            cell_size_m: scene.cell_size_m,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAPair {
    pub question: String,
    pub category: Category,
    pub answer: String,
    pub numeric_value: Option<u32>,
    pub template_id: String,
}

/// Annotates a scene with every template of its kind.
pub fn generate_qa_set(scene: &Scene) -> Vec<QAPair> {
    generate_qa_set_with(scene, &AnnotatorConfig::for_scene(scene))
}

pub fn generate_qa_set_with(scene: &Scene, cfg: &AnnotatorConfig) -> Vec<QAPair> {
    let mask = rasterize(scene);
    let graph = extract_components(&mask, cfg);
    templates_for(scene.kind)
        .map(|t| answer_question(scene, &graph, t, cfg).expect("template matches scene kind"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{generate_scene, SceneKind};

    #[test]
    fn template_counts_per_kind() {
        let u = generate_scene(1, SceneKind::Urban).unwrap();
        let r = generate_scene(1, SceneKind::Rural).unwrap();
        assert_eq!(generate_qa_set(&u).len(), 14);
        assert_eq!(generate_qa_set(&r).len(), 10);
    }

    #[test]
    fn same_question_list_for_every_scene_of_a_kind() {
        let qs = |seed| {
            generate_qa_set(&generate_scene(seed, SceneKind::Urban).unwrap())
                .into_iter()
                .map(|q| q.question)
                .collect::<Vec<_>>()
        };
        assert_eq!(qs(1), qs(2));
    }

    #[test]
    fn every_category_is_covered() {
        for kind in [SceneKind::Urban, SceneKind::Rural] {
            for c in Category::ALL {
                assert!(templates_for(kind).any(|t| t.category == c), "{kind:?} lacks {c:?}");
            }
        }
    }

    #[test]
    fn answers_respect_vocab_and_category_contracts() {
        let vocab = AnswerVocab::build(9);
        for seed in 0..30 {
            for kind in [SceneKind::Urban, SceneKind::Rural] {
                let s = generate_scene(seed, kind).unwrap();
                for qa in generate_qa_set(&s) {
                    assert!(vocab.index_of(&qa.answer).is_some(), "{}", qa.answer);
                    assert_eq!(qa.numeric_value.is_some(), qa.category.is_counting());
                    if let Some(v) = qa.numeric_value {
                        assert_eq!(qa.answer.trim_end_matches('+').parse::<u32>().unwrap(), v);
                    }
                    if qa.category.is_judging() {
                        assert!(qa.answer == "Yes" || qa.answer == "No");
                    }
                }
            }
        }
    }
}
