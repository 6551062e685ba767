//! Connected components, raster distances and composite objects of a mask.

use std::collections::BTreeMap;

use crate::geo::{LandClass, Rect, SemanticMask, NUM_CLASSES};

use super::{AnnotatorConfig, QaError};

/// A 4-connected set of pixels, stored as `(row, col)` pairs in scan order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Component {
    pub class: LandClass,
    pub pixels: Vec<(usize, usize)>,
    /// Pixels with at least one in-image 4-neighbour outside the component.
    pub boundary: Vec<(usize, usize)>,
    pub bbox: Rect,
}

impl Component {
    pub fn from_pixels(class: LandClass, mut pixels: Vec<(usize, usize)>) -> Self {
        pixels.sort_unstable();
        pixels.dedup();
        let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0, 0);
        for &(r, c) in &pixels {
            r0 = r0.min(r);
            c0 = c0.min(c);
            r1 = r1.max(r + 1);
            c1 = c1.max(c + 1);
        }
        let bbox = if pixels.is_empty() {
            Rect::new(0, 0, 0, 0)
        } else {
            Rect::new(r0, c0, r1 - r0, c1 - c0)
        };
        let inside = |r: usize, c: usize| pixels.binary_search(&(r, c)).is_ok();
        let boundary = pixels
            .iter()
            .copied()
            .filter(|&(r, c)| {
                let up = r > 0 && !inside(r - 1, c);
                let left = c > 0 && !inside(r, c - 1);
                let down = !inside(r + 1, c);
                let right = !inside(r, c + 1);
                up || left || down || right
            })
            .collect();
        Self {
            class,
            pixels,
            boundary,
            bbox,
        }
    }

    pub fn from_rect(class: LandClass, rect: &Rect) -> Self {
        let mut px = Vec::with_capacity(rect.area());
        for r in rect.row..rect.row_end() {
            for c in rect.col..rect.col_end() {
                px.push((r, c));
            }
        }
        Self::from_pixels(class, px)
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    fn contains(&self, p: (usize, usize)) -> bool {
        self.pixels.binary_search(&p).is_ok()
    }
}

/// A playground plus every building within the school distance of it.
#[derive(Clone, Debug, PartialEq)]
pub struct School {
    pub playground: usize,
    pub buildings: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct ComponentGraph {
    pub height: usize,
    pub width: usize,
    pub cell_size_m: f64,
    /// Non-background components, ordered by class then scan order.
    pub components: Vec<Component>,
    /// Symmetric matrix of minimum distances in metres.
    distances: Vec<f64>,
    pub intersections: Vec<Component>,
    pub schools: Vec<School>,
    pub class_pixels: [usize; NUM_CLASSES],
}

/// Labels 4-connected components with an explicit-stack flood fill.
pub fn label_components(mask: &SemanticMask) -> Vec<Component> {
    let (h, w) = (mask.height, mask.width);
    let mut seen = vec![false; h * w];
    let mut by_class: BTreeMap<u8, Vec<Component>> = BTreeMap::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        let class = mask.classes[start];
        if seen[start] || class == LandClass::Background.id() {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut px = Vec::new();
        while let Some(p) = stack.pop() {
            let (r, c) = (p / w, p % w);
            px.push((r, c));
            let mut visit = |q: usize| {
                if !seen[q] && mask.classes[q] == class {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if r > 0 {
                visit(p - w);
            }
            if r + 1 < h {
                visit(p + w);
            }
            if c > 0 {
                visit(p - 1);
            }
            if c + 1 < w {
                visit(p + 1);
            }
        }
        let lc = LandClass::from_id(class).expect("mask class in range");
        by_class.entry(class).or_default().push(Component::from_pixels(lc, px));
    }
    by_class.into_values().flatten().collect()
}

/// Minimum pixel-centre Euclidean distance between two components, in metres.
pub fn min_distance(a: &Component, b: &Component, cell_size_m: f64) -> Result<f64, QaError> {
    if a.is_empty() || b.is_empty() {
        return Err(QaError::Usage("distance between empty components".into()));
    }
    if a.bbox.intersection(&b.bbox).is_some() {
        let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
        if small.pixels.iter().any(|&p| large.contains(p)) {
            return Ok(0.0);
        }
    }
    // For disjoint sets the closest pair lies on both boundaries.
    let mut best = u64::MAX;
    for &(ra, ca) in &a.boundary {
        let lb = axis_gap(ra, b.bbox.row, b.bbox.row_end()).pow(2) + axis_gap(ca, b.bbox.col, b.bbox.col_end()).pow(2);
        if lb >= best {
            continue;
        }
        for &(rb, cb) in &b.boundary {
            let dr = ra.abs_diff(rb) as u64;
            let dc = ca.abs_diff(cb) as u64;
            best = best.min(dr * dr + dc * dc);
        }
    }
    Ok((best as f64).sqrt() * cell_size_m)
}

fn axis_gap(x: usize, lo: usize, hi: usize) -> u64 {
    if x < lo {
        (lo - x) as u64
    } else if x >= hi {
        (x + 1 - hi) as u64
    } else {
        0
    }
}

/// Maximal runs of rows (or columns) made entirely of road pixels.
fn road_strips(mask: &SemanticMask) -> (Vec<Rect>, Vec<Rect>) {
    let (h, w) = (mask.height, mask.width);
    let road = LandClass::Road.id();
    let full_row: Vec<bool> = (0..h).map(|r| (0..w).all(|c| mask.get(r, c) == road)).collect();
    let full_col: Vec<bool> = (0..w).map(|c| (0..h).all(|r| mask.get(r, c) == road)).collect();
    let runs = |flags: &[bool]| {
        let mut out = Vec::new();
        let mut i = 0;
        while i < flags.len() {
            if flags[i] {
                let s = i;
                while i < flags.len() && flags[i] {
                    i += 1;
                }
                out.push((s, i - s));
            } else {
                i += 1;
            }
        }
        out
    };
    let horizontal = runs(&full_row).into_iter().map(|(s, n)| Rect::new(s, 0, n, w)).collect();
    let vertical = runs(&full_col).into_iter().map(|(s, n)| Rect::new(0, s, h, n)).collect();
    (horizontal, vertical)
}

/// Builds components, pairwise distances, road intersections and schools.
pub fn extract_components(mask: &SemanticMask, cfg: &AnnotatorConfig) -> ComponentGraph {
    let components = label_components(mask);
    let n = components.len();
    let mut distances = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = min_distance(&components[i], &components[j], cfg.cell_size_m).expect("non-empty components");
            distances[i * n + j] = d;
            distances[j * n + i] = d;
        }
    }
    let (horizontal, vertical) = road_strips(mask);
    let mut intersections = Vec::new();
    for hs in &horizontal {
        for vs in &vertical {
            if let Some(x) = hs.intersection(vs) {
                intersections.push(Component::from_rect(LandClass::Road, &x));
            }
        }
    }
    let mut schools = Vec::new();
    for (p, comp) in components.iter().enumerate() {
        if comp.class != LandClass::Playground {
            continue;
        }
        let buildings: Vec<usize> = components
            .iter()
            .enumerate()
            .filter(|(b, c)| c.class == LandClass::Building && distances[p * n + b] <= cfg.school_m)
            .map(|(b, _)| b)
            .collect();
        if !buildings.is_empty() {
            schools.push(School {
                playground: p,
                buildings,
            });
        }
    }
    ComponentGraph {
        height: mask.height,
        width: mask.width,
        cell_size_m: cfg.cell_size_m,
        components,
        distances,
        intersections,
        schools,
        class_pixels: mask.histogram(),
    }
}

impl ComponentGraph {
    pub fn of_class(&self, class: LandClass) -> impl Iterator<Item = (usize, &Component)> {
        self.components.iter().enumerate().filter(move |(_, c)| c.class == class)
    }

    pub fn count(&self, class: LandClass) -> usize {
        self.of_class(class).count()
    }

    /// Distance in metres between components `i` and `j`.
    pub fn distance(&self, i: usize, j: usize) -> f64 {
        self.distances[i * self.components.len() + j]
    }

    /// Members of a school region as component indices.
    pub fn school_members(&self, s: &School) -> Vec<usize> {
        let mut m = vec![s.playground];
        m.extend(&s.buildings);
        m
    }
}
