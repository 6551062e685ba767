//! Brute-force annotator working from the raster alone.
//!
//! Components come from a breadth-first labelling, distances from every pixel
//! pair, and intersections from the pixels lying in both a road-filled row and
//! a road-filled column.

use std::collections::{BTreeSet, VecDeque};

use soba_core::geo::{LandClass, SemanticMask};

pub struct Region {
    pub class: u8,
    pub pixels: Vec<(usize, usize)>,
}

fn bfs_regions(h: usize, w: usize, member: impl Fn(usize, usize) -> Option<u8>) -> Vec<Region> {
    let mut label = vec![usize::MAX; h * w];
    let mut out: Vec<Region> = Vec::new();
    for r0 in 0..h {
        for c0 in 0..w {
            let Some(class) = member(r0, c0) else { continue };
            if label[r0 * w + c0] != usize::MAX {
                continue;
            }
            let id = out.len();
            let mut pixels = Vec::new();
            let mut queue = VecDeque::from([(r0, c0)]);
            label[r0 * w + c0] = id;
            while let Some((r, c)) = queue.pop_front() {
                pixels.push((r, c));
                let mut nbrs = Vec::new();
                if r > 0 {
                    nbrs.push((r - 1, c));
                }
                if r + 1 < h {
                    nbrs.push((r + 1, c));
                }
                if c > 0 {
                    nbrs.push((r, c - 1));
                }
                if c + 1 < w {
                    nbrs.push((r, c + 1));
                }
                for (nr, nc) in nbrs {
                    if label[nr * w + nc] == usize::MAX && member(nr, nc) == Some(class) {
                        label[nr * w + nc] = id;
                        queue.push_back((nr, nc));
                    }
                }
            }
            out.push(Region { class, pixels });
        }
    }
    out
}

/// Smallest squared pixel distance over all pairs.
fn min_d2(a: &[(usize, usize)], b: &[(usize, usize)]) -> u64 {
    let mut best = u64::MAX;
    for &(ra, ca) in a {
        for &(rb, cb) in b {
            let dr = ra.abs_diff(rb) as u64;
            let dc = ca.abs_diff(cb) as u64;
            best = best.min(dr * dr + dc * dc);
        }
    }
    best
}

pub struct Oracle<'m> {
    mask: &'m SemanticMask,
    cell: f64,
    near: f64,
    school: f64,
    cap: u32,
    regions: Vec<Region>,
}

impl<'m> Oracle<'m> {
    pub fn new(mask: &'m SemanticMask, cell: f64) -> Self {
        let regions = bfs_regions(mask.height, mask.width, |r, c| {
            let v = mask.get(r, c);
            (v != 0).then_some(v)
        });
        Self {
            mask,
            cell,
            near: 100.0,
            school: 40.0,
            cap: 9,
            regions,
        }
    }

    fn metres(&self, a: &[(usize, usize)], b: &[(usize, usize)]) -> f64 {
        (min_d2(a, b) as f64).sqrt() * self.cell
    }

    fn of(&self, class: LandClass) -> Vec<&[(usize, usize)]> {
        self.regions.iter().filter(|r| r.class == class.id()).map(|r| r.pixels.as_slice()).collect()
    }

    fn pixels(&self, class: LandClass) -> usize {
        self.mask.classes.iter().filter(|&&v| v == class.id()).count()
    }

    pub fn intersections(&self) -> Vec<Vec<(usize, usize)>> {
        let (h, w) = (self.mask.height, self.mask.width);
        let road = LandClass::Road.id();
        let row_full: Vec<bool> = (0..h).map(|r| (0..w).all(|c| self.mask.get(r, c) == road)).collect();
        let col_full: Vec<bool> = (0..w).map(|c| (0..h).all(|r| self.mask.get(r, c) == road)).collect();
        bfs_regions(h, w, |r, c| (row_full[r] && col_full[c]).then_some(1))
            .into_iter()
            .map(|r| r.pixels)
            .collect()
    }

    /// Each playground with at least one building in range, merged with those buildings.
    pub fn schools(&self) -> Vec<Vec<(usize, usize)>> {
        let buildings = self.of(LandClass::Building);
        self.of(LandClass::Playground)
            .into_iter()
            .filter_map(|p| {
                let near: Vec<_> = buildings.iter().filter(|b| self.metres(p, b) <= self.school).collect();
                if near.is_empty() {
                    return None;
                }
                let mut all = p.to_vec();
                for b in near {
                    all.extend_from_slice(b);
                }
                Some(all)
            })
            .collect()
    }

    fn count(&self, n: usize) -> (String, Option<u32>) {
        if n > self.cap as usize {
            (format!("{}+", self.cap), Some(self.cap))
        } else {
            (n.to_string(), Some(n as u32))
        }
    }

    fn any_near(&self, a: &[Vec<(usize, usize)>], b: &[Vec<(usize, usize)>]) -> bool {
        a.iter().any(|x| b.iter().any(|y| self.metres(x, y) <= self.near))
    }

    fn water_kind(&self, px: &[(usize, usize)]) -> &'static str {
        let rows: BTreeSet<usize> = px.iter().map(|p| p.0).collect();
        let cols: BTreeSet<usize> = px.iter().map(|p| p.1).collect();
        let hgt = rows.last().unwrap() - rows.first().unwrap() + 1;
        let wid = cols.last().unwrap() - cols.first().unwrap() + 1;
        if hgt == self.mask.height || wid == self.mask.width || hgt.max(wid) >= 3 * hgt.min(wid) {
            "river"
        } else {
            "pond"
        }
    }

    fn water_list(&self, bodies: &[&[(usize, usize)]]) -> String {
        let kinds: BTreeSet<&str> = bodies.iter().map(|b| self.water_kind(b)).collect();
        if kinds.is_empty() {
            "no water".into()
        } else {
            kinds.into_iter().collect::<Vec<_>>().join(", ")
        }
    }

    fn owned(v: Vec<&[(usize, usize)]>) -> Vec<Vec<(usize, usize)>> {
        v.into_iter().map(|s| s.to_vec()).collect()
    }

    fn yes_no(b: bool) -> (String, Option<u32>) {
        (if b { "Yes" } else { "No" }.into(), None)
    }

    /// Answer and count for a template id.
    pub fn answer(&self, template: &str) -> (String, Option<u32>) {
        use LandClass::*;
        let total = self.mask.height * self.mask.width;
        match template {
            "bj_water" => Self::yes_no(self.pixels(Water) > 0),
            "bj_playground" => Self::yes_no(self.pixels(Playground) > 0),
            "bj_forest" => Self::yes_no(self.pixels(Forest) > 0),
            "bj_buildings" => Self::yes_no(self.pixels(Building) > 0),
            "bc_buildings" => self.count(self.of(Building).len()),
            "bc_intersections" => self.count(self.intersections().len()),
            "bc_water" => self.count(self.of(Water).len()),
            "bc_agriculture" => self.count(self.of(Agriculture).len()),
            "rc_schools" => self.count(self.schools().len()),
            "rj_school_intersections" => Self::yes_no(self.any_near(&self.schools(), &self.intersections())),
            "rj_water_buildings" => Self::yes_no(self.any_near(&Self::owned(self.of(Water)), &Self::owned(self.of(Building)))),
            "rj_water_agriculture" => {
                Self::yes_no(self.any_near(&Self::owned(self.of(Water)), &Self::owned(self.of(Agriculture))))
            }
            "rc_buildings_water" | "rc_buildings_agriculture" => {
                let anchor = if template.ends_with("water") { Water } else { Agriculture };
                let anchors = Self::owned(self.of(anchor));
                let n = self
                    .of(Building)
                    .into_iter()
                    .filter(|b| anchors.iter().any(|a| self.metres(b, a) <= self.near))
                    .count();
                self.count(n)
            }
            "oa_water_types" => (self.water_list(&self.of(Water)), None),
            "oa_building_area" | "oa_agriculture_area" => {
                let class = if template == "oa_building_area" { Building } else { Agriculture };
                let pct = 100.0 * self.pixels(class) as f64 / total as f64;
                let bin = if self.pixels(class) == 0 {
                    "0%"
                } else if pct <= 10.0 {
                    "0-10%"
                } else if pct <= 20.0 {
                    "10-20%"
                } else if pct <= 30.0 {
                    "20-30%"
                } else if pct <= 40.0 {
                    "30-40%"
                } else {
                    "above 40%"
                };
                (bin.into(), None)
            }
            "ca_traffic" => {
                let s = if self.pixels(Road) == 0 {
                    "no traffic facilities"
                } else if self.intersections().is_empty() {
                    "roads"
                } else {
                    "intersections, roads"
                };
                (s.into(), None)
            }
            "ca_land_use" => {
                let names: Vec<&str> = [Agriculture, Barren, Forest, Playground, Water]
                    .into_iter()
                    .filter(|c| self.pixels(*c) > 0)
                    .map(|c| c.name())
                    .collect();
                (if names.is_empty() { "none".into() } else { names.join(", ") }, None)
            }
            "ca_water_sources" => {
                let fields = Self::owned(self.of(Agriculture));
                let bodies: Vec<&[(usize, usize)]> = self
                    .of(Water)
                    .into_iter()
                    .filter(|w| fields.iter().any(|f| self.metres(w, f) <= self.near))
                    .collect();
                (self.water_list(&bodies), None)
            }
            other => panic!("oracle has no rule for template {other}"),
        }
    }
}
