//! Question templates and the rule that answers each one.

use std::collections::BTreeSet;

use crate::geo::{LandClass, Scene, SceneKind};

use super::components::{min_distance, Component, ComponentGraph};
use super::{AnnotatorConfig, Category, QAPair, QaError};

/// Object set a relational rule ranges over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Class(LandClass),
    Intersections,
    Schools,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rule {
    Exists(LandClass),
    Count(Target),
    /// Yes iff some region of the first target lies within `near_m` of one of the second.
    NearExists(Target, Target),
    /// Number of components of the class within `near_m` of the target.
    CountNear(LandClass, Target),
    WaterTypes,
    AreaRatio(LandClass),
    TrafficFacilities,
    LandUse,
    /// Water types of the water bodies near the class.
    WaterSourcesNear(LandClass),
}

#[derive(Clone, Copy, Debug)]
pub struct Template {
    pub id: &'static str,
    pub kinds: &'static [SceneKind],
    pub category: Category,
    pub question: &'static str,
    pub rule: Rule,
}

const BOTH: &[SceneKind] = &[SceneKind::Urban, SceneKind::Rural];
const URBAN: &[SceneKind] = &[SceneKind::Urban];
const RURAL: &[SceneKind] = &[SceneKind::Rural];

use Category::*;
use LandClass as L;

pub const TEMPLATES: &[Template] = &[
    Template { id: "bj_water", kinds: BOTH, category: BasicJudging, question: "Is there any water in this scene?", rule: Rule::Exists(L::Water) },
    Template { id: "bj_playground", kinds: URBAN, category: BasicJudging, question: "Is there a playground in this scene?", rule: Rule::Exists(L::Playground) },
    Template { id: "bj_forest", kinds: URBAN, category: BasicJudging, question: "Are there any forests in this scene?", rule: Rule::Exists(L::Forest) },
    Template { id: "bj_buildings", kinds: RURAL, category: BasicJudging, question: "Are there any buildings in this scene?", rule: Rule::Exists(L::Building) },
    Template { id: "bc_buildings", kinds: BOTH, category: BasicCounting, question: "How many buildings are in this scene?", rule: Rule::Count(Target::Class(L::Building)) },
    Template { id: "bc_intersections", kinds: URBAN, category: BasicCounting, question: "How many intersections are in this scene?", rule: Rule::Count(Target::Intersections) },
    Template { id: "bc_water", kinds: URBAN, category: BasicCounting, question: "How many water areas are in this scene?", rule: Rule::Count(Target::Class(L::Water)) },
    Template { id: "bc_agriculture", kinds: RURAL, category: BasicCounting, question: "How many agriculture areas are in this scene?", rule: Rule::Count(Target::Class(L::Agriculture)) },
    Template { id: "rj_school_intersections", kinds: URBAN, category: RelJudging, question: "Are there any intersections near the school?", rule: Rule::NearExists(Target::Schools, Target::Intersections) },
    Template { id: "rj_water_buildings", kinds: URBAN, category: RelJudging, question: "Is there any water near the buildings?", rule: Rule::NearExists(Target::Class(L::Water), Target::Class(L::Building)) },
    Template { id: "rj_water_agriculture", kinds: RURAL, category: RelJudging, question: "Is there any water near the agriculture?", rule: Rule::NearExists(Target::Class(L::Water), Target::Class(L::Agriculture)) },
    Template { id: "rc_schools", kinds: URBAN, category: RelCounting, question: "How many schools are in this scene?", rule: Rule::Count(Target::Schools) },
    Template { id: "rc_buildings_water", kinds: URBAN, category: RelCounting, question: "How many buildings are near the water?", rule: Rule::CountNear(L::Building, Target::Class(L::Water)) },
    Template { id: "rc_buildings_agriculture", kinds: RURAL, category: RelCounting, question: "How many buildings are near the agriculture?", rule: Rule::CountNear(L::Building, Target::Class(L::Agriculture)) },
    Template { id: "oa_water_types", kinds: BOTH, category: ObjectAnalysis, question: "What are the water types in this scene?", rule: Rule::WaterTypes },
    Template { id: "oa_building_area", kinds: URBAN, category: ObjectAnalysis, question: "What is the area ratio of the buildings?", rule: Rule::AreaRatio(L::Building) },
    Template { id: "oa_agriculture_area", kinds: RURAL, category: ObjectAnalysis, question: "What is the area ratio of the agriculture?", rule: Rule::AreaRatio(L::Agriculture) },
    Template { id: "ca_traffic", kinds: URBAN, category: Comprehensive, question: "What are the traffic facilities in this scene?", rule: Rule::TrafficFacilities },
    Template { id: "ca_land_use", kinds: BOTH, category: Comprehensive, question: "What are the land-use types in this scene?", rule: Rule::LandUse },
    Template { id: "ca_water_sources", kinds: RURAL, category: Comprehensive, question: "What are the water sources around the agriculture?", rule: Rule::WaterSourcesNear(L::Agriculture) },
];

pub fn templates_for(kind: SceneKind) -> impl Iterator<Item = &'static Template> {
    TEMPLATES.iter().filter(move |t| t.kinds.contains(&kind))
}

const NO_WATER: &str = "no water";
const AREA_BINS: [&str; 6] = ["0%", "0-10%", "10-20%", "20-30%", "30-40%", "above 40%"];
const TRAFFIC: [&str; 3] = ["no traffic facilities", "roads", "intersections, roads"];
const LAND_USE_CLASSES: [LandClass; 5] = [L::Agriculture, L::Barren, L::Forest, L::Playground, L::Water];

pub(super) fn water_type_answers() -> Vec<String> {
    vec![NO_WATER.into(), "pond".into(), "river".into(), "pond, river".into()]
}

pub(super) fn area_bins() -> &'static [&'static str] {
    &AREA_BINS
}

pub(super) fn traffic_answers() -> &'static [&'static str] {
    &TRAFFIC
}

/// All subsets of the land-use classes, in bitmask order.
pub(super) fn land_use_answers() -> Vec<String> {
    (0..1u32 << LAND_USE_CLASSES.len())
        .map(|bits| {
            let names: Vec<&str> = LAND_USE_CLASSES
                .iter()
                .enumerate()
                .filter(|(i, _)| bits & (1 << i) != 0)
                .map(|(_, c)| c.name())
                .collect();
            join_or(&names, "none")
        })
        .collect()
}

fn join_or(names: &[&str], empty: &str) -> String {
    if names.is_empty() {
        empty.to_string()
    } else {
        names.join(", ")
    }
}

/// Elongated or border-to-border water bodies are rivers.
pub fn water_type(c: &Component, height: usize, width: usize) -> &'static str {
    let b = &c.bbox;
    let spans = b.height == height || b.width == width;
    let (long, short) = (b.height.max(b.width), b.height.min(b.width).max(1));
    if spans || long >= 3 * short {
        "river"
    } else {
        "pond"
    }
}

fn area_bin(pixels: usize, total: usize) -> &'static str {
    if pixels == 0 {
        return AREA_BINS[0];
    }
    let r = pixels as f64 / total as f64;
    match r {
        r if r <= 0.1 => AREA_BINS[1],
        r if r <= 0.2 => AREA_BINS[2],
        r if r <= 0.3 => AREA_BINS[3],
        r if r <= 0.4 => AREA_BINS[4],
        _ => AREA_BINS[5],
    }
}

fn regions(g: &ComponentGraph, t: Target) -> Vec<Vec<&Component>> {
    match t {
        Target::Class(c) => g.of_class(c).map(|(_, comp)| vec![comp]).collect(),
        Target::Intersections => g.intersections.iter().map(|c| vec![c]).collect(),
        Target::Schools => g
            .schools
            .iter()
            .map(|s| g.school_members(s).into_iter().map(|i| &g.components[i]).collect())
            .collect(),
    }
}

fn region_distance(a: &[&Component], b: &[&Component], cell: f64) -> f64 {
    let mut best = f64::INFINITY;
    for x in a {
        for y in b {
            best = best.min(min_distance(x, y, cell).expect("non-empty components"));
        }
    }
    best
}

fn count_pair(n: usize, cap: u32) -> (String, Option<u32>) {
    if n as u64 > cap as u64 {
        (format!("{cap}+"), Some(cap))
    } else {
        (n.to_string(), Some(n as u32))
    }
}

fn yes_no(b: bool) -> (String, Option<u32>) {
    ((if b { "Yes" } else { "No" }).to_string(), None)
}

fn water_types<'a>(comps: impl Iterator<Item = &'a Component>, g: &ComponentGraph) -> String {
    let kinds: BTreeSet<&str> = comps.map(|c| water_type(c, g.height, g.width)).collect();
    let v: Vec<&str> = kinds.into_iter().collect();
    join_or(&v, NO_WATER)
}

/// Applies the template's rule to a scene's component graph.
pub fn answer_question(scene: &Scene, g: &ComponentGraph, t: &Template, cfg: &AnnotatorConfig) -> Result<QAPair, QaError> {
    if !t.kinds.contains(&scene.kind) {
        return Err(QaError::Usage(format!("template {} does not apply to {} scenes", t.id, scene.kind.name())));
    }
    let cell = g.cell_size_m;
    let near = cfg.near_m;
    let (answer, numeric) = match t.rule {
        Rule::Exists(c) => yes_no(g.class_pixels[c as usize] > 0),
        Rule::Count(target) => count_pair(regions(g, target).len(), cfg.count_cap),
        Rule::NearExists(a, b) => {
            let (ra, rb) = (regions(g, a), regions(g, b));
            yes_no(ra.iter().any(|x| rb.iter().any(|y| region_distance(x, y, cell) <= near)))
        }
        Rule::CountNear(class, target) => {
            let rt = regions(g, target);
            let n = g
                .of_class(class)
                .filter(|(_, c)| rt.iter().any(|y| region_distance(&[c], y, cell) <= near))
                .count();
            count_pair(n, cfg.count_cap)
        }
        Rule::WaterTypes => (water_types(g.of_class(L::Water).map(|(_, c)| c), g), None),
        Rule::AreaRatio(c) => (area_bin(g.class_pixels[c as usize], g.height * g.width).to_string(), None),
        Rule::TrafficFacilities => {
            let s = match (g.class_pixels[L::Road as usize] > 0, !g.intersections.is_empty()) {
                (false, _) => TRAFFIC[0],
                (true, false) => TRAFFIC[1],
                (true, true) => TRAFFIC[2],
            };
            (s.to_string(), None)
        }
        Rule::LandUse => {
            let names: Vec<&str> = LAND_USE_CLASSES
                .iter()
                .filter(|c| g.class_pixels[**c as usize] > 0)
                .map(|c| c.name())
                .collect();
            (join_or(&names, "none"), None)
        }
        Rule::WaterSourcesNear(class) => {
            let anchors = regions(g, Target::Class(class));
            let near_water = g
                .of_class(L::Water)
                .map(|(_, c)| c)
                .filter(|c| anchors.iter().any(|y| region_distance(&[c], y, cell) <= near));
            (water_types(near_water, g), None)
        }
    };
    Ok(QAPair {
        question: t.question.to_string(),
        category: t.category,
        answer,
        numeric_value: numeric,
        template_id: t.id.to_string(),
    })
}
