//! Procedural grid-world scenes with typed geospatial objects.
//!
//! A scene is a list of axis-aligned rectangles painted in list order onto a
//! class raster; the RGB image is a class-colour rendering with Gaussian noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 8;

/// Land-cover class ids used in masks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LandClass {
    Background = 0,
    Building = 1,
    Road = 2,
    Water = 3,
    Barren = 4,
    Forest = 5,
    Agriculture = 6,
    Playground = 7,
}

impl LandClass {
    pub const ALL: [LandClass; NUM_CLASSES] = [
        LandClass::Background,
        LandClass::Building,
        LandClass::Road,
        LandClass::Water,
        LandClass::Barren,
        LandClass::Forest,
        LandClass::Agriculture,
        LandClass::Playground,
    ];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            LandClass::Background => "background",
            LandClass::Building => "building",
            LandClass::Road => "road",
            LandClass::Water => "water",
            LandClass::Barren => "barren",
            LandClass::Forest => "forest",
            LandClass::Agriculture => "agriculture",
            LandClass::Playground => "playground",
        }
    }

    /// Base RGB colour of the rendered class.
    pub fn color(self) -> [f64; 3] {
        match self {
            LandClass::Background => [0.55, 0.50, 0.45],
            LandClass::Building => [0.85, 0.20, 0.20],
            LandClass::Road => [0.15, 0.15, 0.15],
            LandClass::Water => [0.10, 0.30, 0.85],
            LandClass::Barren => [0.85, 0.80, 0.55],
            LandClass::Forest => [0.05, 0.45, 0.10],
            LandClass::Agriculture => [0.55, 0.85, 0.25],
            LandClass::Playground => [0.90, 0.45, 0.80],
        }
    }

    /// Paint layer: objects with a higher layer are drawn later.
    fn layer(self) -> u8 {
        match self {
            LandClass::Background => 0,
            LandClass::Agriculture | LandClass::Forest | LandClass::Barren => 1,
            LandClass::Water => 2,
            LandClass::Building | LandClass::Playground => 3,
            LandClass::Road => 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    Urban,
    Rural,
}

impl SceneKind {
    pub fn name(self) -> &'static str {
        match self {
            SceneKind::Urban => "urban",
            SceneKind::Rural => "rural",
        }
    }
}

impl std::str::FromStr for SceneKind {
    type Err = GeoError;

    fn from_str(s: &str) -> Result<Self, GeoError> {
        match s {
            "urban" => Ok(SceneKind::Urban),
            "rural" => Ok(SceneKind::Rural),
            other => Err(GeoError::Invalid(format!("unknown scene kind {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoadAxis {
    Horizontal,
    Vertical,
}

/// Half-open cell rectangle `[row, row+height) × [col, col+width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn new(row: usize, col: usize, height: usize, width: usize) -> Self {
        Self {
            row,
            col,
            height,
            width,
        }
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn row_end(&self) -> usize {
        self.row + self.height
    }

    pub fn col_end(&self) -> usize {
        self.col + self.width
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        r >= self.row && r < self.row_end() && c >= self.col && c < self.col_end()
    }

    /// True when the rectangles share a cell or lie within `margin` cells (Chebyshev).
    pub fn near(&self, other: &Rect, margin: usize) -> bool {
        self.row < other.row_end() + margin
            && other.row < self.row_end() + margin
            && self.col < other.col_end() + margin
            && other.col < self.col_end() + margin
    }

    pub fn intersection(&self, other: &Rect) -> Option<Rect> {
        let r0 = self.row.max(other.row);
        let r1 = self.row_end().min(other.row_end());
        let c0 = self.col.max(other.col);
        let c1 = self.col_end().min(other.col_end());
        (r0 < r1 && c0 < c1).then(|| Rect::new(r0, c0, r1 - r0, c1 - c0))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoObject {
    pub object_id: u32,
    pub class: LandClass,
    pub footprint: Rect,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub road_axis: Option<RoadAxis>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: u64,
    pub kind: SceneKind,
    pub height: usize,
    pub width: usize,
    pub cell_size_m: f64,
    pub objects: Vec<GeoObject>,
    pub rng_seed: u64,
}

#[derive(Debug, Error)]
pub enum GeoError {
    #[error("could not place {class} after {tries} tries")]
    Placement { class: &'static str, tries: usize },
    #[error("invalid scene: {0}")]
    Invalid(String),
}

/// Generation parameters; defaults give 64×64 cells of 4 m.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub height: usize,
    pub width: usize,
    pub cell_size_m: f64,
    pub noise_sigma: f64,
    pub max_tries: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            cell_size_m: 4.0,
            noise_sigma: 0.05,
            max_tries: 1000,
        }
    }
}

/// Inclusive object-count range per class for a scene kind.
pub fn count_ranges(kind: SceneKind) -> &'static [(LandClass, usize, usize)] {
    match kind {
        SceneKind::Urban => &[
            (LandClass::Building, 2, 6),
            (LandClass::Road, 1, 3),
            (LandClass::Playground, 0, 1),
            (LandClass::Water, 0, 2),
            (LandClass::Forest, 0, 1),
            (LandClass::Barren, 0, 1),
        ],
        SceneKind::Rural => &[
            (LandClass::Agriculture, 1, 3),
            (LandClass::Building, 0, 2),
            (LandClass::Water, 0, 2),
            (LandClass::Road, 0, 1),
            (LandClass::Forest, 0, 2),
            (LandClass::Barren, 0, 1),
        ],
    }
}

/// Class-specific footprint extents (inclusive) for non-strip objects.
fn extent_range(class: LandClass) -> (usize, usize) {
    match class {
        LandClass::Building => (3, 8),
        LandClass::Playground => (6, 10),
        LandClass::Water => (5, 14),
        LandClass::Agriculture => (12, 28),
        LandClass::Forest => (8, 16),
        LandClass::Barren => (6, 12),
        LandClass::Background | LandClass::Road => (1, 1),
    }
}

const RIVER_PROBABILITY: f64 = 0.35;

pub fn generate_scene(seed: u64, kind: SceneKind) -> Result<Scene, GeoError> {
    generate_scene_with(seed, kind, &SceneParams::default())
}

/// Draws object counts and rejection-samples placements from a seeded stream.
pub fn generate_scene_with(seed: u64, kind: SceneKind, params: &SceneParams) -> Result<Scene, GeoError> {
    let (h, w) = (params.height, params.width);
    if h < 32 || w < 32 {
        return Err(GeoError::Invalid(format!("scene must be at least 32×32, got {h}×{w}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let counts: Vec<(LandClass, usize)> = count_ranges(kind)
        .iter()
        .map(|&(c, lo, hi)| (c, rng.gen_range(lo..=hi)))
        .collect();
    let count_of = |class: LandClass| counts.iter().find(|(c, _)| *c == class).map_or(0, |&(_, n)| n);

    let mut placed: Vec<(LandClass, Rect, Option<RoadAxis>)> = Vec::new();
    let sample = |rng: &mut ChaCha8Rng,
                  placed: &[(LandClass, Rect, Option<RoadAxis>)],
                  class: LandClass,
                  propose: &dyn Fn(&mut ChaCha8Rng) -> (Rect, Option<RoadAxis>),
                  avoid: &[LandClass]|
     -> Result<(Rect, Option<RoadAxis>), GeoError> {
        for _ in 0..params.max_tries {
            let (rect, axis) = propose(rng);
            let clash = placed.iter().any(|(c, r, a)| {
                let same_kind = *c == class && (class != LandClass::Road || *a == axis);
                (same_kind || avoid.contains(c)) && rect.near(r, 1)
            });
            if !clash {
                return Ok((rect, axis));
            }
        }
        Err(GeoError::Placement {
            class: class.name(),
            tries: params.max_tries,
        })
    };

    for _ in 0..count_of(LandClass::Road) {
        let propose = |rng: &mut ChaCha8Rng| {
            let width = rng.gen_range(2..=3);
            if rng.gen_bool(0.5) {
                let row = rng.gen_range(2..h - width - 2);
                (Rect::new(row, 0, width, w), Some(RoadAxis::Horizontal))
            } else {
                let col = rng.gen_range(2..w - width - 2);
                (Rect::new(0, col, h, width), Some(RoadAxis::Vertical))
            }
        };
        let p = sample(&mut rng, &placed, LandClass::Road, &propose, &[])?;
        placed.push((LandClass::Road, p.0, p.1));
    }

    let block = |class: LandClass| {
        let (lo, hi) = extent_range(class);
        move |rng: &mut ChaCha8Rng| {
            let bh = rng.gen_range(lo..=hi).min(h);
            let bw = rng.gen_range(lo..=hi).min(w);
            let row = rng.gen_range(0..=h - bh);
            let col = rng.gen_range(0..=w - bw);
            (Rect::new(row, col, bh, bw), None)
        }
    };

    for class in [LandClass::Agriculture, LandClass::Forest, LandClass::Barren] {
        for _ in 0..count_of(class) {
            let p = sample(&mut rng, &placed, class, &block(class), &[])?;
            placed.push((class, p.0, p.1));
        }
    }

    for _ in 0..count_of(LandClass::Water) {
        let river = |rng: &mut ChaCha8Rng| {
            if rng.gen_bool(RIVER_PROBABILITY) {
                let width = rng.gen_range(3..=5);
                if rng.gen_bool(0.5) {
                    (Rect::new(rng.gen_range(0..=h - width), 0, width, w), None)
                } else {
                    (Rect::new(0, rng.gen_range(0..=w - width), h, width), None)
                }
            } else {
                block(LandClass::Water)(rng)
            }
        };
        let p = sample(&mut rng, &placed, LandClass::Water, &river, &[])?;
        placed.push((LandClass::Water, p.0, p.1));
    }

    let built = [LandClass::Road, LandClass::Building, LandClass::Playground];
    for class in [LandClass::Building, LandClass::Playground] {
        for _ in 0..count_of(class) {
            let p = sample(&mut rng, &placed, class, &block(class), &built)?;
            placed.push((class, p.0, p.1));
        }
    }

    // Stable sort keeps generation order within a paint layer.
    placed.sort_by_key(|(c, _, _)| c.layer());
    let objects = placed
        .into_iter()
        .enumerate()
        .map(|(i, (class, footprint, road_axis))| GeoObject {
            object_id: i as u32 + 1,
            class,
            footprint,
            road_axis,
        })
        .collect();
    let scene = Scene {
        scene_id: 0,
        kind,
        height: h,
        width: w,
        cell_size_m: params.cell_size_m,
        objects,
        rng_seed: seed,
    };
    scene.validate()?;
    Ok(scene)
}

impl Scene {
    /// Checks bounds, unique ids and the per-kind content guarantees.
    pub fn validate(&self) -> Result<(), GeoError> {
        let mut ids = std::collections::HashSet::new();
        for o in &self.objects {
            if o.object_id == 0 || !ids.insert(o.object_id) {
                return Err(GeoError::Invalid(format!("duplicate or zero object id {}", o.object_id)));
            }
            let f = &o.footprint;
            if f.area() == 0 || f.row_end() > self.height || f.col_end() > self.width {
                return Err(GeoError::Invalid(format!("object {} out of bounds", o.object_id)));
            }
            if (o.class == LandClass::Road) != o.road_axis.is_some() {
                return Err(GeoError::Invalid(format!("object {} road axis tag mismatch", o.object_id)));
            }
        }
        let has = |c: LandClass| self.objects.iter().any(|o| o.class == c);
        match self.kind {
            SceneKind::Urban if !(has(LandClass::Building) && has(LandClass::Road)) => {
                Err(GeoError::Invalid("urban scene needs a building and a road".into()))
            }
            SceneKind::Rural if !has(LandClass::Agriculture) => {
                Err(GeoError::Invalid("rural scene needs agriculture".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn empty(kind: SceneKind, height: usize, width: usize, cell_size_m: f64) -> Self {
        Self {
            scene_id: 0,
            kind,
            height,
            width,
            cell_size_m,
            objects: Vec::new(),
            rng_seed: 0,
        }
    }

    pub fn count(&self, class: LandClass) -> usize {
        self.objects.iter().filter(|o| o.class == class).count()
    }
}

/// Per-pixel class raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SemanticMask {
    pub height: usize,
    pub width: usize,
    pub classes: Vec<u8>,
}

impl SemanticMask {
    pub fn new(height: usize, width: usize, classes: Vec<u8>) -> Result<Self, GeoError> {
        if classes.len() != height * width {
            return Err(GeoError::Invalid("mask length differs from height × width".into()));
        }
        if let Some(&bad) = classes.iter().find(|&&c| c as usize >= NUM_CLASSES) {
            return Err(GeoError::Invalid(format!("class id {bad} out of range")));
        }
        Ok(Self {
            height,
            width,
            classes,
        })
    }

    pub fn background(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            classes: vec![0; height * width],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.classes[r * self.width + c]
    }

    pub fn fill(&mut self, rect: &Rect, class: LandClass) {
        for r in rect.row..rect.row_end().min(self.height) {
            for c in rect.col..rect.col_end().min(self.width) {
                self.classes[r * self.width + c] = class.id();
            }
        }
    }

    pub fn histogram(&self) -> [usize; NUM_CLASSES] {
        let mut h = [0; NUM_CLASSES];
        for &c in &self.classes {
            h[c as usize] += 1;
        }
        h
    }

    /// Binary PGM (P5) with maxval 7.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n7\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.classes);
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self, GeoError> {
        let bad = |m: &str| GeoError::Invalid(format!("pgm: {m}"));
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header not ascii"))?.to_string());
        }
        if fields[0] != "P5" {
            return Err(bad("not a binary P5 file"));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
        let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if maxval != 7 {
            return Err(bad("maxval must be 7"));
        }
        let data = &bytes[pos + 1..];
        if data.len() != w * h {
            return Err(bad("payload size mismatch"));
        }
        Self::new(h, w, data.to_vec())
    }

    pub fn to_tensor(&self) -> Tensor<f64> {
        Tensor::new(
            vec![self.height, self.width],
            self.classes.iter().map(|&c| c as f64).collect(),
        )
        .expect("mask dimensions")
    }
}

/// Rendered scene: `3×H×W` image in [0, 1] and its mask.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterScene {
    pub image: Tensor<f64>,
    pub mask: SemanticMask,
}

/// Paints objects in list order (later objects overwrite).
pub fn rasterize(scene: &Scene) -> SemanticMask {
    let mut mask = SemanticMask::background(scene.height, scene.width);
    for o in &scene.objects {
        mask.fill(&o.footprint, o.class);
    }
    mask
}

/// Renders image and mask; noise comes from a stream of the scene seed.
pub fn render(scene: &Scene) -> RasterScene {
    render_with_sigma(scene, SceneParams::default().noise_sigma)
}

pub fn render_with_sigma(scene: &Scene, sigma: f64) -> RasterScene {
    let mask = rasterize(scene);
    let mut rng = ChaCha8Rng::seed_from_u64(scene.rng_seed);
    rng.set_stream(1);
    let noise = Normal::new(0.0, sigma.max(0.0)).expect("valid sigma");
    let hw = scene.height * scene.width;
    let mut data = vec![0.0; 3 * hw];
    for p in 0..hw {
        let base = LandClass::from_id(mask.classes[p]).expect("valid class").color();
        for (ch, &b) in base.iter().enumerate() {
            let v: f64 = b + noise.sample(&mut rng);
            data[ch * hw + p] = v.clamp(0.0, 1.0);
        }
    }
    let image = Tensor::new(vec![3, scene.height, scene.width], data).expect("image dimensions");
    RasterScene { image, mask }
}

/// Seed of scene `scene_id` in a corpus, independent of generation order.
pub fn scene_seed(corpus_seed: u64, scene_id: u64, attempt: u64) -> u64 {
    let mut z = corpus_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(scene_id.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(attempt.wrapping_mul(0x94D0_49BB_1331_11EB));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
