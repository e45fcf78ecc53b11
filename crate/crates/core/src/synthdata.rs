//! Synthetic, taxonomy-consistent multi-scale tissue scenes.
//!
//! A scene is a `S × S` RGB canvas at the 40× analog (0.25 µm/px) with one
//! ground-truth mask per class. Each class is drawn by a [`ShapeRole`], and
//! roles reference other classes by name, so the nesting follows the tree:
//! a wavy boundary splits two regions, depth bands subdivide one of them,
//! circular units sit inside it with concentric inner units, cell dots fill
//! disjoint zones of the inner units, ribbons fill the remaining space, and
//! round vessels with walls float on top.
//!
//! Patches are cut at each class's magnification by box-filter downsampling
//! (factor `40 / mag`) and carry a mask for that class only.
//!
//! # On-disk layout
//!
//! ```text
//! generator.json            generator config and class names
//! scenes/<id>/image.png     RGB8, S × S
//! scenes/<id>/<class>.png   L8, 0 or 255
//! patches/<patch_id>.png    RGB8, P × P
//! patches/<patch_id>_mask.png
//! patches.csv
//! ```
//!
//! All rasters are PNG, so the `u8` pixels round-trip exactly.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::warn;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scale::Magnification;
use crate::seeds::derive_seed;
use crate::taxonomy::{derive_matrix, ClassId, Relation, TaxonomyError, TaxonomyMatrix, TaxonomyTree};

#[derive(Debug, Error)]
pub enum GenError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("class {0} has no shape in the generator config")]
    MissingShape(String),
    #[error("shape for {class} needs {class} {needs} {other}, which the tree does not state")]
    Nesting {
        class: String,
        needs: &'static str,
        other: String,
    },
    #[error("could not place shapes for {0} after repeated restarts")]
    Placement(String),
    #[error("fewer scenes ({scenes}) than non-empty splits ({splits})")]
    TooFewScenes { scenes: usize, splits: usize },
    #[error("split ratios must be non-negative and sum to 1, got {0:?}")]
    Ratios([f64; 3]),
    #[error("dataset: {0}")]
    Format(String),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How a class is drawn. Lengths are in scene (40×) pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "snake_case")]
pub enum ShapeRole {
    /// Bottom part of the canvas below a sinusoidal boundary covering
    /// `fraction` of the area. `periods` is an integer so the wave averages out.
    LowerRegion {
        fraction: f64,
        amplitude: f64,
        periods: u32,
    },
    /// Everything outside `of`.
    Complement { of: String },
    /// Pixels of `within` whose depth `y / top_edge(below)` lies in `[from, to)`.
    DepthBand {
        within: String,
        below: String,
        from: f64,
        to: f64,
    },
    /// `count` discs fully inside `within`, with box spacing (Chebyshev
    /// distance between centers) at least `spacing`.
    Unit {
        within: String,
        count: usize,
        radius: f64,
        spacing: f64,
        margin: f64,
    },
    /// A concentric disc in every instance of `of`.
    InnerUnit { of: String, radius: f64 },
    /// `count` non-overlapping dots per instance of `within`, each dot inside
    /// the annulus `zone` (fractions of the parent radius).
    Cells {
        within: String,
        count: usize,
        radius: f64,
        zone: [f64; 2],
    },
    /// Stadium-shaped ribbons added until they cover `coverage` of `within`,
    /// clipped to `within` and kept off every class in `avoid`.
    Tubules {
        within: String,
        avoid: Vec<String>,
        coverage: f64,
        width: f64,
        length: f64,
    },
    /// `count` discs with centers in `[lo, hi]²`.
    Vessel {
        count: usize,
        radius: f64,
        lo: f64,
        hi: f64,
        spacing: f64,
    },
    /// Annulus `inner·r ≤ ρ ≤ r` of every instance of `of`.
    Wall { of: String, inner: f64 },
    /// Union of `members` plus `venules` extra discs.
    VesselUnion {
        members: Vec<String>,
        venules: usize,
        radius: f64,
        lo: f64,
        hi: f64,
    },
}

impl ShapeRole {
    fn references(&self) -> Vec<&str> {
        match self {
            ShapeRole::LowerRegion { .. } | ShapeRole::Vessel { .. } => vec![],
            ShapeRole::Complement { of } => vec![of],
            ShapeRole::DepthBand { within, below, .. } => vec![within, below],
            ShapeRole::Unit { within, .. }
            | ShapeRole::Cells { within, .. } => vec![within],
            ShapeRole::InnerUnit { of, .. } | ShapeRole::Wall { of, .. } => vec![of],
            ShapeRole::Tubules { within, avoid, .. } => {
                let mut v = vec![within.as_str()];
                v.extend(avoid.iter().map(String::as_str));
                v
            }
            ShapeRole::VesselUnion { members, .. } => members.iter().map(String::as_str).collect(),
        }
    }

    /// Regions, units and ribbons are cut on a tile grid; vessels and cells
    /// are cut around an anchor instance.
    pub fn window_policy(&self) -> WindowPolicy {
        match self {
            ShapeRole::LowerRegion { .. }
            | ShapeRole::Complement { .. }
            | ShapeRole::DepthBand { .. }
            | ShapeRole::Unit { .. }
            | ShapeRole::InnerUnit { .. }
            | ShapeRole::Tubules { .. } => WindowPolicy::Tile,
            _ => WindowPolicy::CenterOnAnchor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowPolicy {
    /// Uniform among the non-overlapping tiles that contain the class.
    Tile,
    /// Window centered on a recorded anchor (own instance or parent instance).
    CenterOnAnchor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub class: String,
    pub magnification: Magnification,
    pub color: [f64; 3],
    #[serde(flatten)]
    pub role: ShapeRole,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub scene_side: usize,
    pub patch_side: usize,
    pub patches_per_class: usize,
    /// Minimum box spacing between any two vessel centers.
    pub vessel_spacing: f64,
    /// Per-pixel Gaussian noise σ on the `[0, 1]` color scale.
    pub noise: f64,
    /// Per-scene channel gain jitter, the stain-variation analog.
    pub color_jitter: f64,
    /// Drawing and painting order.
    pub shapes: Vec<ShapeSpec>,
}

fn spec(class: &str, mag: Magnification, color: [f64; 3], role: ShapeRole) -> ShapeSpec {
    ShapeSpec {
        class: class.into(),
        magnification: mag,
        color,
        role,
    }
}

impl Default for GeneratorConfig {
    /// Shapes for the fifteen-class kidney tree.
    fn default() -> Self {
        use Magnification::*;
        let band = |class: &str, from: f64, to: f64, color| {
            spec(
                class,
                X5,
                color,
                ShapeRole::DepthBand {
                    within: "Cortex".into(),
                    below: "Medulla".into(),
                    from,
                    to,
                },
            )
        };
        let shapes = vec![
            spec(
                "Medulla",
                X5,
                [0.85, 0.70, 0.80],
                ShapeRole::LowerRegion {
                    fraction: 0.35,
                    amplitude: 16.0,
                    periods: 2,
                },
            ),
            spec(
                "Cortex",
                X5,
                [0.88, 0.60, 0.74],
                ShapeRole::Complement { of: "Medulla".into() },
            ),
            band("OuterCortex", 0.0, 1.0 / 3.0, [0.92, 0.64, 0.76]),
            band("MiddleCortex", 1.0 / 3.0, 2.0 / 3.0, [0.86, 0.58, 0.74]),
            band("InnerCortex", 2.0 / 3.0, 1.0, [0.80, 0.54, 0.70]),
            spec(
                "Capsule",
                X5,
                [0.97, 0.90, 0.93],
                ShapeRole::Unit {
                    within: "Cortex".into(),
                    count: 3,
                    radius: 56.0,
                    spacing: 120.0,
                    margin: 64.0,
                },
            ),
            spec(
                "Tuft",
                X5,
                [0.60, 0.35, 0.60],
                ShapeRole::InnerUnit {
                    of: "Capsule".into(),
                    radius: 40.0,
                },
            ),
            spec(
                "Podocyte",
                X20,
                [0.30, 0.15, 0.50],
                ShapeRole::Cells {
                    within: "Tuft".into(),
                    count: 4,
                    radius: 8.0,
                    zone: [0.5, 1.0],
                },
            ),
            spec(
                "Mesangial",
                X20,
                [0.45, 0.22, 0.40],
                ShapeRole::Cells {
                    within: "Tuft".into(),
                    count: 2,
                    radius: 8.0,
                    zone: [0.0, 0.45],
                },
            ),
            spec(
                "DT",
                X10,
                [0.72, 0.42, 0.66],
                ShapeRole::Tubules {
                    within: "Cortex".into(),
                    avoid: vec!["Capsule".into()],
                    coverage: 0.08,
                    width: 12.0,
                    length: 60.0,
                },
            ),
            spec(
                "PT",
                X10,
                [0.95, 0.52, 0.58],
                ShapeRole::Tubules {
                    within: "Cortex".into(),
                    avoid: vec!["Capsule".into(), "DT".into()],
                    coverage: 0.20,
                    width: 12.0,
                    length: 60.0,
                },
            ),
            spec(
                "Artery",
                X10,
                [0.82, 0.30, 0.40],
                ShapeRole::Vessel {
                    count: 2,
                    radius: 40.0,
                    lo: 128.0,
                    hi: 384.0,
                    spacing: 168.0,
                },
            ),
            spec(
                "PTC",
                X40,
                [0.90, 0.42, 0.45],
                ShapeRole::Vessel {
                    count: 3,
                    radius: 12.0,
                    lo: 64.0,
                    hi: 448.0,
                    spacing: 0.0,
                },
            ),
            spec(
                "MV",
                X20,
                [0.98, 0.84, 0.84],
                ShapeRole::VesselUnion {
                    members: vec!["Artery".into(), "PTC".into()],
                    venules: 1,
                    radius: 24.0,
                    lo: 64.0,
                    hi: 448.0,
                },
            ),
            spec(
                "SmoothMuscle",
                X20,
                [0.68, 0.22, 0.34],
                ShapeRole::Wall {
                    of: "Artery".into(),
                    inner: 0.6,
                },
            ),
        ];
        GeneratorConfig {
            scene_side: 512,
            patch_side: 64,
            patches_per_class: 2,
            vessel_spacing: 110.0,
            noise: 0.03,
            color_jitter: 0.05,
            shapes,
        }
    }
}

impl GeneratorConfig {
    pub fn shape(&self, class: &str) -> Option<&ShapeSpec> {
        self.shapes.iter().find(|s| s.class == class)
    }

    /// Fraction of the whole scene covered by a tile-policy class.
    fn scene_fraction(&self, class: &str) -> Option<f64> {
        let s = self.shape(class)?;
        let area = (self.scene_side * self.scene_side) as f64;
        Some(match &s.role {
            ShapeRole::LowerRegion { fraction, .. } => *fraction,
            ShapeRole::Complement { of } => 1.0 - self.scene_fraction(of)?,
            ShapeRole::DepthBand { within, from, to, .. } => (to - from) * self.scene_fraction(within)?,
            ShapeRole::Unit { count, radius, .. } => *count as f64 * PI * radius * radius / area,
            ShapeRole::InnerUnit { of, radius } => match &self.shape(of)?.role {
                ShapeRole::Unit { count, .. } => *count as f64 * PI * radius * radius / area,
                _ => return None,
            },
            ShapeRole::Tubules { within, coverage, .. } => coverage * self.scene_fraction(within)?,
            _ => return None,
        })
    }

    fn vessel_instances(&self, class: &str) -> Option<(usize, f64)> {
        match &self.shape(class)?.role {
            ShapeRole::Vessel { count, radius, .. } => Some((*count, *radius)),
            _ => None,
        }
    }

    /// Closed-form expected foreground fraction of a patch of `class`.
    ///
    /// Tile-policy classes: the scene fraction, assuming every tile at the
    /// class's magnification contains the class. Anchored classes: the area
    /// of the anchored instance(s) over the window area, which holds when
    /// spacings keep other instances out of the window.
    pub fn expected_fraction(&self, class: &str) -> Option<f64> {
        let s = self.shape(class)?;
        if s.role.window_policy() == WindowPolicy::Tile {
            return self.scene_fraction(class);
        }
        let f = s.magnification.downsample_factor() as f64;
        let window = (self.patch_side as f64 * f).powi(2);
        Some(match &s.role {
            ShapeRole::Vessel { radius, .. } => PI * radius * radius / window,
            ShapeRole::Wall { of, inner } => {
                let (_, r) = self.vessel_instances(of)?;
                PI * r * r * (1.0 - inner * inner) / window
            }
            ShapeRole::Cells { count, radius, .. } => *count as f64 * PI * radius * radius / window,
            ShapeRole::VesselUnion {
                members,
                venules,
                radius,
                ..
            } => {
                let mut n = *venules as f64;
                let mut area = *venules as f64 * PI * radius * radius;
                for m in members {
                    let (c, r) = self.vessel_instances(m)?;
                    n += c as f64;
                    area += c as f64 * PI * r * r;
                }
                area / n / window
            }
            _ => return None,
        })
    }

    /// Checks the config against a tree and returns shape indices per class.
    pub fn validate(&self, tree: &TaxonomyTree) -> Result<Vec<usize>, GenError> {
        let cfg = |m: String| Err(GenError::Config(m));
        if self.patch_side == 0 || self.scene_side == 0 {
            return cfg("sizes must be positive".into());
        }
        if self.patches_per_class == 0 {
            return cfg("patches_per_class must be ≥ 1".into());
        }
        let matrix = derive_matrix(tree)?;
        let id = |name: &str| {
            tree.class_id(name)
                .ok_or_else(|| GenError::Config(format!("unknown class {name}")))
        };
        let mut seen: HashMap<&str, usize> = HashMap::new();
        for (k, s) in self.shapes.iter().enumerate() {
            let me = id(&s.class)?;
            if seen.insert(&s.class, k).is_some() {
                return cfg(format!("two shapes for {}", s.class));
            }
            let f = s.magnification.downsample_factor();
            if self.scene_side % f != 0 || (self.scene_side / f) % self.patch_side != 0 {
                return cfg(format!(
                    "scene side {} at factor {f} does not tile into {}-pixel patches",
                    self.scene_side, self.patch_side
                ));
            }
            for r in s.role.references() {
                if !seen.contains_key(r) || r == s.class {
                    return cfg(format!("{} refers to {r}, which must be drawn earlier", s.class));
                }
            }
            let need = |other: &str, rel: Relation, needs: &'static str| -> Result<(), GenError> {
                let o = id(other)?;
                if matrix.get(me.0, o.0) != rel {
                    return Err(GenError::Nesting {
                        class: s.class.clone(),
                        needs,
                        other: other.into(),
                    });
                }
                Ok(())
            };
            match &s.role {
                ShapeRole::Complement { of } => need(of, Relation::Exclusive, "exclusive of")?,
                ShapeRole::DepthBand { within, below, from, to } => {
                    need(within, Relation::Subset, "inside")?;
                    need(below, Relation::Exclusive, "exclusive of")?;
                    if !(0.0..=1.0).contains(from) || !(0.0..=1.0).contains(to) || from >= to {
                        return cfg(format!("bad depth band for {}", s.class));
                    }
                }
                ShapeRole::Unit { within, .. } | ShapeRole::Cells { within, .. } => {
                    need(within, Relation::Subset, "inside")?
                }
                ShapeRole::InnerUnit { of, .. } | ShapeRole::Wall { of, .. } => {
                    need(of, Relation::Subset, "inside")?;
                    if !matches!(
                        self.shape(of).map(|p| &p.role),
                        Some(ShapeRole::Unit { .. } | ShapeRole::Vessel { .. })
                    ) {
                        return cfg(format!("{} needs a disc-shaped parent", s.class));
                    }
                }
                ShapeRole::Tubules { within, coverage, .. } => {
                    need(within, Relation::Subset, "inside")?;
                    if !(0.0..1.0).contains(coverage) {
                        return cfg(format!("coverage of {} must be in [0, 1)", s.class));
                    }
                }
                ShapeRole::VesselUnion { members, .. } => {
                    for m in members {
                        need(m, Relation::Superset, "containing")?;
                        if self.vessel_instances(m).is_none() {
                            return cfg(format!("{m} must be a vessel to join {}", s.class));
                        }
                    }
                }
                ShapeRole::LowerRegion { fraction, .. } => {
                    if !(0.0..1.0).contains(fraction) {
                        return cfg("region fraction must be in [0, 1)".into());
                    }
                }
                ShapeRole::Vessel { .. } => {}
            }
        }
        tree.names()
            .iter()
            .map(|n| seen.get(n.as_str()).copied().ok_or_else(|| GenError::MissingShape(n.clone())))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Circle {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
}

impl Circle {
    fn contains(&self, x: usize, y: usize) -> bool {
        let dx = x as f64 + 0.5 - self.cx;
        let dy = y as f64 + 0.5 - self.cy;
        dx * dx + dy * dy <= self.r * self.r
    }

    fn box_distance(&self, other: &Circle) -> f64 {
        (self.cx - other.cx).abs().max((self.cy - other.cy).abs())
    }

    /// Pixel bounding box `(x0, y0, x1, y1)`, exclusive upper bounds.
    fn bounds(&self, side: usize) -> (usize, usize, usize, usize) {
        let lo = |c: f64| (c - self.r).floor().max(0.0) as usize;
        let hi = |c: f64| ((c + self.r).ceil() as usize + 1).min(side);
        (lo(self.cx), lo(self.cy), hi(self.cx), hi(self.cy))
    }
}

/// One generated scene: image, full masks, window anchors.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: usize,
    pub seed: u64,
    /// `3 × S × S`
    pub image: Array3<u8>,
    /// One `S × S` mask per class, in tree order.
    pub masks: Vec<Array2<bool>>,
    /// Window anchors per class (scene pixels), empty for tile-policy classes.
    pub anchors: Vec<Vec<(f64, f64)>>,
}

impl Scene {
    pub fn side(&self) -> usize {
        self.image.dim().1
    }
}

/// A validated generator bound to a tree.
#[derive(Debug, Clone)]
pub struct Generator {
    tree: TaxonomyTree,
    matrix: TaxonomyMatrix,
    config: GeneratorConfig,
    index: HashMap<String, usize>,
}

const MAX_RESTARTS: u64 = 64;
const MAX_TRIES: usize = 4000;

struct Placement(String);

impl Generator {
    pub fn new(tree: TaxonomyTree, config: GeneratorConfig) -> Result<Self, GenError> {
        config.validate(&tree)?;
        let matrix = derive_matrix(&tree)?;
        let index = tree
            .names()
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Ok(Generator {
            tree,
            matrix,
            config,
            index,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn tree(&self) -> &TaxonomyTree {
        &self.tree
    }

    pub fn matrix(&self) -> &TaxonomyMatrix {
        &self.matrix
    }

    pub fn class_names(&self) -> &[String] {
        self.tree.names()
    }

    fn idx(&self, name: &str) -> usize {
        self.index[name]
    }

    /// Deterministic in `(config, seed)`. Placement dead-ends restart with a
    /// seed derived from the attempt number.
    pub fn generate_scene(&self, id: usize, seed: u64) -> Result<Scene, GenError> {
        for attempt in 0..MAX_RESTARTS {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[attempt]));
            match self.try_scene(&mut rng) {
                Ok((masks, anchors)) => {
                    let image = self.render(&masks, &mut rng);
                    return Ok(Scene {
                        id,
                        seed,
                        image,
                        masks,
                        anchors,
                    });
                }
                Err(Placement(class)) if attempt + 1 == MAX_RESTARTS => {
                    return Err(GenError::Placement(class))
                }
                Err(_) => continue,
            }
        }
        unreachable!()
    }

    #[allow(clippy::type_complexity)]
    fn try_scene(
        &self,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<Array2<bool>>, Vec<Vec<(f64, f64)>>), Placement> {
        let side = self.config.scene_side;
        let n = self.tree.len();
        let mut masks = vec![Array2::from_elem((side, side), false); n];
        let mut anchors = vec![Vec::new(); n];
        let mut circles: Vec<Vec<Circle>> = vec![Vec::new(); n];
        let mut vessels: Vec<Circle> = Vec::new();

        for s in &self.config.shapes {
            let me = self.idx(&s.class);
            let fail = || Placement(s.class.clone());
            match &s.role {
                ShapeRole::LowerRegion {
                    fraction,
                    amplitude,
                    periods,
                } => {
                    let phase = rng.random_range(0.0..2.0 * PI);
                    let base = side as f64 * (1.0 - fraction);
                    for x in 0..side {
                        let t = 2.0 * PI * *periods as f64 * (x as f64 + 0.5) / side as f64;
                        let edge = base + amplitude * (t + phase).sin();
                        for y in 0..side {
                            masks[me][[y, x]] = y as f64 + 0.5 >= edge;
                        }
                    }
                }
                ShapeRole::Complement { of } => {
                    masks[me] = masks[self.idx(of)].mapv(|v| !v);
                }
                ShapeRole::DepthBand {
                    within,
                    below,
                    from,
                    to,
                } => {
                    let (w, b) = (self.idx(within), self.idx(below));
                    for x in 0..side {
                        let edge = (0..side).find(|&y| masks[b][[y, x]]).unwrap_or(side) as f64;
                        for y in 0..side {
                            let t = (y as f64 + 0.5) / edge;
                            let last = *to >= 1.0 && t >= *from;
                            masks[me][[y, x]] = masks[w][[y, x]] && (last || (t >= *from && t < *to));
                        }
                    }
                }
                ShapeRole::Unit {
                    within,
                    count,
                    radius,
                    spacing,
                    margin,
                } => {
                    let w = self.idx(within);
                    let lo = margin.max(*radius);
                    let hi = side as f64 - lo;
                    if lo >= hi {
                        return Err(fail());
                    }
                    for _ in 0..*count {
                        let c = (0..MAX_TRIES)
                            .map(|_| Circle {
                                cx: rng.random_range(lo..hi),
                                cy: rng.random_range(lo..hi),
                                r: *radius,
                            })
                            .find(|c| {
                                circles[me].iter().all(|o| c.box_distance(o) >= *spacing)
                                    && disc_inside(c, &masks[w])
                            })
                            .ok_or_else(fail)?;
                        circles[me].push(c);
                        paint_disc(&mut masks[me], &c);
                    }
                }
                ShapeRole::InnerUnit { of, radius } => {
                    let parents = circles[self.idx(of)].clone();
                    for p in parents {
                        let c = Circle { r: *radius, ..p };
                        circles[me].push(c);
                        paint_disc(&mut masks[me], &c);
                    }
                }
                ShapeRole::Cells {
                    within,
                    count,
                    radius,
                    zone,
                } => {
                    let w = self.idx(within);
                    let parents = circles[w].clone();
                    for p in parents {
                        let rmin = zone[0] * p.r + radius;
                        let rmax = zone[1] * p.r - radius;
                        if rmax < rmin {
                            return Err(fail());
                        }
                        let mut dots: Vec<Circle> = Vec::new();
                        for _ in 0..*count {
                            let c = (0..MAX_TRIES)
                                .map(|_| {
                                    let u: f64 = rng.random();
                                    let rho = (rmin * rmin + u * (rmax * rmax - rmin * rmin)).sqrt();
                                    let th = rng.random_range(0.0..2.0 * PI);
                                    Circle {
                                        cx: p.cx + rho * th.cos(),
                                        cy: p.cy + rho * th.sin(),
                                        r: *radius,
                                    }
                                })
                                .find(|c| {
                                    dots.iter().all(|o| {
                                        (c.cx - o.cx).hypot(c.cy - o.cy) >= 2.0 * radius + 1.0
                                    })
                                })
                                .ok_or_else(fail)?;
                            dots.push(c);
                            paint_disc(&mut masks[me], &c);
                        }
                        // the window follows the parent so all its cells are in view
                        anchors[me].push((p.cx, p.cy));
                        circles[me].extend(dots);
                    }
                    // cells are clipped by nothing; zones keep them inside the parent
                    let parent = masks[w].clone();
                    debug_assert!(masks[me].iter().zip(parent.iter()).all(|(&c, &p)| !c || p));
                }
                ShapeRole::Tubules {
                    within,
                    avoid,
                    coverage,
                    width,
                    length,
                } => {
                    let w = self.idx(within);
                    let blocked: Vec<usize> = avoid.iter().map(|a| self.idx(a)).collect();
                    let target = coverage * masks[w].iter().filter(|&&v| v).count() as f64;
                    let mut area = 0usize;
                    let mut tries = 0;
                    while (area as f64) < target && tries < MAX_TRIES {
                        tries += 1;
                        let (cx, cy) = (rng.random_range(0.0..side as f64), rng.random_range(0.0..side as f64));
                        let th = rng.random_range(0.0..PI);
                        if !masks[w][[cy as usize, cx as usize]] {
                            continue;
                        }
                        let half = length / 2.0;
                        let (ax, ay) = (cx - half * th.cos(), cy - half * th.sin());
                        let (bx, by) = (cx + half * th.cos(), cy + half * th.sin());
                        let rad = width / 2.0;
                        let x0 = (ax.min(bx) - rad).floor().max(0.0) as usize;
                        let y0 = (ay.min(by) - rad).floor().max(0.0) as usize;
                        let x1 = ((ax.max(bx) + rad).ceil() as usize + 1).min(side);
                        let y1 = ((ay.max(by) + rad).ceil() as usize + 1).min(side);
                        for y in y0..y1 {
                            for x in x0..x1 {
                                if masks[me][[y, x]]
                                    || !masks[w][[y, x]]
                                    || blocked.iter().any(|&b| masks[b][[y, x]])
                                {
                                    continue;
                                }
                                let d = segment_distance(x as f64 + 0.5, y as f64 + 0.5, ax, ay, bx, by);
                                if d <= rad {
                                    masks[me][[y, x]] = true;
                                    area += 1;
                                }
                            }
                        }
                    }
                    if (area as f64) < target {
                        return Err(fail());
                    }
                }
                ShapeRole::Vessel {
                    count,
                    radius,
                    lo,
                    hi,
                    spacing,
                } => {
                    for _ in 0..*count {
                        let c = place_vessel(rng, *radius, *lo, *hi, &vessels, self.config.vessel_spacing, &circles[me], *spacing)
                            .ok_or_else(fail)?;
                        vessels.push(c);
                        circles[me].push(c);
                        anchors[me].push((c.cx, c.cy));
                        paint_disc(&mut masks[me], &c);
                    }
                }
                ShapeRole::Wall { of, inner } => {
                    let parents = circles[self.idx(of)].clone();
                    for p in parents {
                        let (x0, y0, x1, y1) = p.bounds(side);
                        let hole = Circle { r: p.r * inner, ..p };
                        for y in y0..y1 {
                            for x in x0..x1 {
                                if p.contains(x, y) && !hole.contains(x, y) {
                                    masks[me][[y, x]] = true;
                                }
                            }
                        }
                        anchors[me].push((p.cx, p.cy));
                    }
                }
                ShapeRole::VesselUnion {
                    members,
                    venules,
                    radius,
                    lo,
                    hi,
                } => {
                    for m in members {
                        let k = self.idx(m);
                        let member = masks[k].clone();
                        masks[me].zip_mut_with(&member, |a, &b| *a |= b);
                        anchors[me].extend(circles[k].iter().map(|c| (c.cx, c.cy)));
                    }
                    for _ in 0..*venules {
                        let c = place_vessel(rng, *radius, *lo, *hi, &vessels, self.config.vessel_spacing, &[], 0.0)
                            .ok_or_else(fail)?;
                        vessels.push(c);
                        anchors[me].push((c.cx, c.cy));
                        paint_disc(&mut masks[me], &c);
                    }
                }
            }
        }
        Ok((masks, anchors))
    }

    fn render(&self, masks: &[Array2<bool>], rng: &mut ChaCha8Rng) -> Array3<u8> {
        let side = self.config.scene_side;
        let j = self.config.color_jitter;
        let gain: [f64; 3] = std::array::from_fn(|_| if j > 0.0 { rng.random_range(1.0 - j..1.0 + j) } else { 1.0 });
        let mut color = Array3::<f64>::from_elem((3, side, side), 1.0);
        for s in &self.config.shapes {
            let m = &masks[self.idx(&s.class)];
            for ((y, x), &on) in m.indexed_iter() {
                if on {
                    for c in 0..3 {
                        color[[c, y, x]] = s.color[c];
                    }
                }
            }
        }
        let noise = Normal::new(0.0, self.config.noise.max(0.0)).expect("finite σ");
        color.indexed_iter_mut().for_each(|((c, _, _), v)| {
            let n = if self.config.noise > 0.0 { noise.sample(rng) } else { 0.0 };
            *v = (gain[c] * *v + n).clamp(0.0, 1.0);
        });
        color.mapv(|v| (v * 255.0).round() as u8)
    }

    /// Cuts labeled patches from a scene, at most `patches_per_class` per class.
    /// Splits are left as [`Split::Train`]; see [`split_dataset`].
    pub fn extract_patches(&self, scene: &Scene, seed: u64) -> Vec<PatchRecord> {
        let p = self.config.patch_side;
        let n = self.tree.len();
        let mut pyramid = Pyramid::new(scene);
        let mut out = Vec::new();
        for class in 0..n {
            let name = &self.tree.names()[class];
            let s = self.config.shape(name).expect("validated");
            let mag = s.magnification;
            let mask = pyramid.mask(class, mag).clone();
            let side = mask.nrows();
            let mut candidates: Vec<(usize, usize)> = match s.role.window_policy() {
                WindowPolicy::Tile => {
                    let t = side / p;
                    (0..t * t)
                        .map(|k| ((k % t) * p, (k / t) * p))
                        .filter(|&(x, y)| any_in(&mask, x, y, p))
                        .collect()
                }
                WindowPolicy::CenterOnAnchor => {
                    let f = mag.downsample_factor() as f64;
                    let clamp = |c: f64| ((c / f).round() as isize - (p / 2) as isize).clamp(0, (side - p) as isize) as usize;
                    let mut v: Vec<_> = scene.anchors[class].iter().map(|&(x, y)| (clamp(x), clamp(y))).collect();
                    v.dedup();
                    v
                }
            };
            if candidates.is_empty() {
                warn!("scene {}: class {name} absent, no patch emitted", scene.id);
                continue;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[scene.id as u64, class as u64]));
            let take = self.config.patches_per_class.min(candidates.len());
            for k in 0..take {
                let pick = rng.random_range(k..candidates.len());
                candidates.swap(k, pick);
            }
            for (k, &(x, y)) in candidates[..take].iter().enumerate() {
                let window = |m: &Array2<bool>| m.slice(ndarray::s![y..y + p, x..x + p]).to_owned();
                let peers_present = (0..n)
                    .map(|j| j != class && any_in(pyramid.mask(j, mag), x, y, p))
                    .collect();
                let img = pyramid.image(mag);
                out.push(PatchRecord {
                    patch_id: format!("s{:04}_c{:02}_{k}", scene.id, class),
                    scene_id: scene.id,
                    class: ClassId(class),
                    magnification: mag,
                    micron_per_pixel: mag.micron_per_pixel(),
                    split: Split::Train,
                    origin: (x, y),
                    image: img.slice(ndarray::s![.., y..y + p, x..x + p]).to_owned(),
                    mask: window(&mask),
                    peers_present,
                });
            }
        }
        out
    }
}

fn any_in(m: &Array2<bool>, x: usize, y: usize, p: usize) -> bool {
    m.slice(ndarray::s![y..y + p, x..x + p]).iter().any(|&v| v)
}

#[allow(clippy::too_many_arguments)]
fn place_vessel(
    rng: &mut ChaCha8Rng,
    radius: f64,
    lo: f64,
    hi: f64,
    all: &[Circle],
    global: f64,
    same: &[Circle],
    spacing: f64,
) -> Option<Circle> {
    (0..MAX_TRIES)
        .map(|_| Circle {
            cx: rng.random_range(lo..=hi),
            cy: rng.random_range(lo..=hi),
            r: radius,
        })
        .find(|c| {
            all.iter().all(|o| c.box_distance(o) >= global)
                && same.iter().all(|o| c.box_distance(o) >= spacing)
        })
}

fn paint_disc(mask: &mut Array2<bool>, c: &Circle) {
    let (x0, y0, x1, y1) = c.bounds(mask.nrows());
    for y in y0..y1 {
        for x in x0..x1 {
            if c.contains(x, y) {
                mask[[y, x]] = true;
            }
        }
    }
}

fn disc_inside(c: &Circle, within: &Array2<bool>) -> bool {
    let (x0, y0, x1, y1) = c.bounds(within.nrows());
    (y0..y1).all(|y| (x0..x1).all(|x| !c.contains(x, y) || within[[y, x]]))
}

fn segment_distance(px: f64, py: f64, ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    };
    (px - ax - t * dx).hypot(py - ay - t * dy)
}

/// Box-filter downsampling of a mask; a pixel is set when more than half of
/// its block is. Preserves containment and disjointness.
pub fn downsample_mask(m: &Array2<bool>, f: usize) -> Array2<bool> {
    if f == 1 {
        return m.clone();
    }
    let (h, w) = m.dim();
    let half = f * f / 2;
    Array2::from_shape_fn((h / f, w / f), |(y, x)| {
        m.slice(ndarray::s![y * f..(y + 1) * f, x * f..(x + 1) * f])
            .iter()
            .filter(|&&v| v)
            .count()
            > half
    })
}

/// Box-filter downsampling of an RGB image with rounding.
pub fn downsample_image(img: &Array3<u8>, f: usize) -> Array3<u8> {
    if f == 1 {
        return img.clone();
    }
    let (c, h, w) = img.dim();
    let n = (f * f) as u32;
    Array3::from_shape_fn((c, h / f, w / f), |(ch, y, x)| {
        let sum: u32 = img
            .slice(ndarray::s![ch, y * f..(y + 1) * f, x * f..(x + 1) * f])
            .iter()
            .map(|&v| v as u32)
            .sum();
        ((sum + n / 2) / n) as u8
    })
}

/// Lazily downsampled views of a scene.
struct Pyramid<'a> {
    scene: &'a Scene,
    masks: HashMap<(usize, Magnification), Array2<bool>>,
    images: HashMap<Magnification, Array3<u8>>,
}

impl<'a> Pyramid<'a> {
    fn new(scene: &'a Scene) -> Self {
        Pyramid {
            scene,
            masks: HashMap::new(),
            images: HashMap::new(),
        }
    }

    fn mask(&mut self, class: usize, mag: Magnification) -> &Array2<bool> {
        let scene = self.scene;
        self.masks
            .entry((class, mag))
            .or_insert_with(|| downsample_mask(&scene.masks[class], mag.downsample_factor()))
    }

    fn image(&mut self, mag: Magnification) -> &Array3<u8> {
        let scene = self.scene;
        self.images
            .entry(mag)
            .or_insert_with(|| downsample_image(&scene.image, mag.downsample_factor()))
    }
}

/// Pixel counts of taxonomy violations in a set of full masks: one message
/// per violated pair, empty when consistent.
pub fn audit_masks(masks: &[Array2<bool>], matrix: &TaxonomyMatrix) -> Vec<String> {
    let mut out = Vec::new();
    let n = matrix.len();
    for i in 0..n {
        for j in 0..n {
            let count = |f: fn(bool, bool) -> bool| {
                masks[i].iter().zip(masks[j].iter()).filter(|(&a, &b)| f(a, b)).count()
            };
            match matrix.get(i, j) {
                Relation::Subset => {
                    let c = count(|a, b| a && !b);
                    if c > 0 {
                        out.push(format!("{} escapes {} by {c} px", matrix.names()[i], matrix.names()[j]));
                    }
                }
                Relation::Exclusive if i < j => {
                    let c = count(|a, b| a && b);
                    if c > 0 {
                        out.push(format!("{} overlaps {} by {c} px", matrix.names()[i], matrix.names()[j]));
                    }
                }
                _ => {}
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = GenError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(GenError::Format(format!("unknown split {s:?}"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One partially labeled patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchRecord {
    pub patch_id: String,
    pub scene_id: usize,
    pub class: ClassId,
    pub magnification: Magnification,
    pub micron_per_pixel: f64,
    pub split: Split,
    /// Window top-left `(x, y)` at the patch's magnification.
    pub origin: (usize, usize),
    /// `3 × P × P`
    pub image: Array3<u8>,
    /// Ground truth for `class` only.
    pub mask: Array2<bool>,
    /// Whether each other class has any pixel in the window.
    pub peers_present: Vec<bool>,
}

impl PatchRecord {
    pub fn side(&self) -> usize {
        self.mask.nrows()
    }

    pub fn foreground_pixels(&self) -> usize {
        self.mask.iter().filter(|&&v| v).count()
    }

    /// Image scaled to `[0, 1]`.
    pub fn image_f64(&self) -> Array3<f64> {
        self.image.mapv(|v| v as f64 / 255.0)
    }

    pub fn mask_f64(&self) -> Array2<f64> {
        self.mask.mapv(|v| if v { 1.0 } else { 0.0 })
    }
}

/// Assigns whole scenes to train/val/test. Scenes are shuffled by `seed`;
/// counts are `round(n·r_train)`, `round(n·r_val)` and the remainder.
pub fn split_dataset(patches: &mut [PatchRecord], ratios: [f64; 3], seed: u64) -> Result<[usize; 3], GenError> {
    if ratios.iter().any(|&r| !(0.0..=1.0).contains(&r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(GenError::Ratios(ratios));
    }
    let mut scenes: Vec<usize> = patches.iter().map(|p| p.scene_id).collect();
    scenes.sort_unstable();
    scenes.dedup();
    let n = scenes.len();
    let splits = ratios.iter().filter(|&&r| r > 0.0).count();
    if n < splits {
        return Err(GenError::TooFewScenes { scenes: n, splits });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x5917]));
    for k in (1..n).rev() {
        let j = rng.random_range(0..=k);
        scenes.swap(k, j);
    }
    let mut counts = [0usize; 3];
    counts[0] = (n as f64 * ratios[0]).round() as usize;
    counts[1] = (n as f64 * ratios[1]).round() as usize;
    // every non-empty split keeps at least one scene
    for k in 0..2 {
        if ratios[k] > 0.0 && counts[k] == 0 {
            counts[k] = 1;
        }
    }
    counts[0] = counts[0].min(n - if ratios[2] > 0.0 { 1 } else { 0 } - counts[1].min(n));
    counts[2] = n - counts[0] - counts[1];
    let mut tag = HashMap::new();
    for (k, &s) in scenes.iter().enumerate() {
        let split = if k < counts[0] {
            Split::Train
        } else if k < counts[0] + counts[1] {
            Split::Val
        } else {
            Split::Test
        };
        tag.insert(s, split);
    }
    for p in patches.iter_mut() {
        p.split = tag[&p.scene_id];
    }
    Ok(counts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub scenes: usize,
    pub seed: u64,
    pub ratios: [f64; 3],
    pub generator: GeneratorConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            scenes: 60,
            seed: 0,
            ratios: [0.6, 0.1, 0.3],
            generator: GeneratorConfig::default(),
        }
    }
}

/// Labeled patches plus the class names they index.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub patches: Vec<PatchRecord>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &PatchRecord> {
        self.patches.iter().filter(move |p| p.split == split)
    }
}

/// Generates every scene (in parallel), cuts patches and splits by scene.
/// When `out` is given, scenes and patches are also written there.
pub fn generate_dataset(tree: &TaxonomyTree, cfg: &DatasetConfig, out: Option<&Path>) -> Result<Dataset, GenError> {
    let gen = Generator::new(tree.clone(), cfg.generator.clone())?;
    if let Some(dir) = out {
        fs::create_dir_all(dir.join("scenes"))?;
        fs::create_dir_all(dir.join("patches"))?;
        let meta = serde_json::json!({
            "classes": tree.names(),
            "dataset": cfg,
        });
        fs::write(dir.join("generator.json"), serde_json::to_string_pretty(&meta).expect("serializable"))?;
    }
    let per_scene: Vec<Vec<PatchRecord>> = (0..cfg.scenes)
        .into_par_iter()
        .map(|id| -> Result<Vec<PatchRecord>, GenError> {
            let scene = gen.generate_scene(id, derive_seed(cfg.seed, &[id as u64]))?;
            if let Some(dir) = out {
                write_scene(&dir.join("scenes"), &scene, tree.names())?;
            }
            Ok(gen.extract_patches(&scene, cfg.seed))
        })
        .collect::<Result<_, _>>()?;
    let mut patches: Vec<PatchRecord> = per_scene.into_iter().flatten().collect();
    split_dataset(&mut patches, cfg.ratios, cfg.seed)?;
    let ds = Dataset {
        class_names: tree.names().to_vec(),
        patches,
    };
    if let Some(dir) = out {
        write_patches(dir, &ds)?;
    }
    Ok(ds)
}

fn save_rgb(path: &Path, img: &Array3<u8>) -> Result<(), GenError> {
    let (_, h, w) = img.dim();
    let mut buf = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            buf.extend((0..3).map(|c| img[[c, y, x]]));
        }
    }
    image::RgbImage::from_raw(w as u32, h as u32, buf)
        .expect("buffer size")
        .save(path)?;
    Ok(())
}

fn save_mask(path: &Path, m: &Array2<bool>) -> Result<(), GenError> {
    let (h, w) = m.dim();
    let buf = m.iter().map(|&v| if v { 255 } else { 0 }).collect();
    image::GrayImage::from_raw(w as u32, h as u32, buf)
        .expect("buffer size")
        .save(path)?;
    Ok(())
}

fn load_rgb(path: &Path) -> Result<Array3<u8>, GenError> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Array3::from_shape_fn((3, h, w), |(c, y, x)| img.get_pixel(x as u32, y as u32)[c]))
}

fn load_mask(path: &Path) -> Result<Array2<bool>, GenError> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Array2::from_shape_fn((h, w), |(y, x)| img.get_pixel(x as u32, y as u32)[0] > 127))
}

pub fn write_scene(dir: &Path, scene: &Scene, names: &[String]) -> Result<(), GenError> {
    let d = dir.join(format!("{:04}", scene.id));
    fs::create_dir_all(&d)?;
    save_rgb(&d.join("image.png"), &scene.image)?;
    for (m, name) in scene.masks.iter().zip(names) {
        save_mask(&d.join(format!("{name}.png")), m)?;
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct PatchRow {
    patch_id: String,
    scene_id: usize,
    class: String,
    magnification: u32,
    micron_per_pixel: f64,
    split: Split,
    path: String,
    mask_path: String,
    origin_x: usize,
    origin_y: usize,
    /// Indices of classes present in the window, `;`-separated.
    peers_present: String,
}

/// Writes patch rasters and `patches.csv` (paths relative to `dir`).
pub fn write_patches(dir: &Path, ds: &Dataset) -> Result<(), GenError> {
    let pdir = dir.join("patches");
    fs::create_dir_all(&pdir)?;
    ds.patches.par_iter().try_for_each(|p| -> Result<(), GenError> {
        save_rgb(&pdir.join(format!("{}.png", p.patch_id)), &p.image)?;
        save_mask(&pdir.join(format!("{}_mask.png", p.patch_id)), &p.mask)
    })?;
    let mut w = csv::Writer::from_path(dir.join("patches.csv"))?;
    for p in &ds.patches {
        let present: Vec<String> = p
            .peers_present
            .iter()
            .enumerate()
            .filter(|(_, &v)| v)
            .map(|(j, _)| j.to_string())
            .collect();
        w.serialize(PatchRow {
            patch_id: p.patch_id.clone(),
            scene_id: p.scene_id,
            class: ds.class_names[p.class.0].clone(),
            magnification: p.magnification.power(),
            micron_per_pixel: p.micron_per_pixel,
            split: p.split,
            path: format!("patches/{}.png", p.patch_id),
            mask_path: format!("patches/{}_mask.png", p.patch_id),
            origin_x: p.origin.0,
            origin_y: p.origin.1,
            peers_present: present.join(";"),
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset directory written by [`generate_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset, GenError> {
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("generator.json"))?)
        .map_err(|e| GenError::Format(e.to_string()))?;
    let class_names: Vec<String> = serde_json::from_value(meta["classes"].clone())
        .map_err(|e| GenError::Format(e.to_string()))?;
    let mut rdr = csv::Reader::from_path(dir.join("patches.csv"))?;
    let rows: Vec<PatchRow> = rdr.deserialize().collect::<Result<_, _>>()?;
    let patches = rows
        .into_par_iter()
        .map(|r| -> Result<PatchRecord, GenError> {
            let class = class_names
                .iter()
                .position(|n| *n == r.class)
                .ok_or_else(|| GenError::Format(format!("unknown class {}", r.class)))?;
            let magnification = Magnification::from_power(r.magnification)
                .map_err(|e| GenError::Format(e.to_string()))?;
            let mut peers_present = vec![false; class_names.len()];
            for t in r.peers_present.split(';').filter(|t| !t.is_empty()) {
                let j: usize = t.parse().map_err(|_| GenError::Format(format!("bad peer list {t:?}")))?;
                *peers_present
                    .get_mut(j)
                    .ok_or_else(|| GenError::Format(format!("peer index {j} out of range")))? = true;
            }
            Ok(PatchRecord {
                patch_id: r.patch_id,
                scene_id: r.scene_id,
                class: ClassId(class),
                magnification,
                micron_per_pixel: r.micron_per_pixel,
                split: r.split,
                origin: (r.origin_x, r.origin_y),
                image: load_rgb(&resolve(dir, &r.path))?,
                mask: load_mask(&resolve(dir, &r.mask_path))?,
                peers_present,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset { class_names, patches })
}

fn resolve(dir: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        dir.join(p)
    }
}

/// Full per-class masks of a set of scenes at every magnification, for
/// evaluating predictions of unlabeled classes.
#[derive(Debug, Clone, Default)]
pub struct GroundTruth {
    scenes: HashMap<(usize, Magnification), Vec<Array2<bool>>>,
}

impl GroundTruth {
    pub fn from_scenes<'a>(scenes: impl IntoIterator<Item = &'a Scene>) -> Self {
        let mut map = HashMap::new();
        for scene in scenes {
            for mag in Magnification::ALL {
                let f = mag.downsample_factor();
                map.insert((scene.id, mag), scene.masks.iter().map(|m| downsample_mask(m, f)).collect());
            }
        }
        GroundTruth { scenes: map }
    }

    /// Redraws the scenes `ids` of a generated dataset.
    pub fn regenerate(tree: &TaxonomyTree, cfg: &DatasetConfig, ids: &[usize]) -> Result<Self, GenError> {
        let gen = Generator::new(tree.clone(), cfg.generator.clone())?;
        let scenes = ids
            .par_iter()
            .map(|&id| gen.generate_scene(id, derive_seed(cfg.seed, &[id as u64])))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self::from_scenes(&scenes))
    }

    /// Every class mask under the patch's window, or `None` for an unknown scene.
    pub fn window(&self, patch: &PatchRecord) -> Option<Vec<Array2<bool>>> {
        let masks = self.scenes.get(&(patch.scene_id, patch.magnification))?;
        let (x, y, p) = (patch.origin.0, patch.origin.1, patch.side());
        Some(
            masks
                .iter()
                .map(|m| m.slice(ndarray::s![y..y + p, x..x + p]).to_owned())
                .collect(),
        )
    }
}

/// Convenience wrapper: validate, then draw one scene.
pub fn generate_scene(tree: &TaxonomyTree, cfg: &GeneratorConfig, seed: u64) -> Result<Scene, GenError> {
    Generator::new(tree.clone(), cfg.clone())?.generate_scene(0, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scale::{load_manifest, TABLE1_MANIFEST};
    use crate::taxonomy::{parse_tree, KIDNEY_TREE};

    fn kidney() -> TaxonomyTree {
        parse_tree(KIDNEY_TREE).unwrap()
    }

    #[test]
    fn default_config_matches_the_kidney_tree() {
        let tree = kidney();
        GeneratorConfig::default().validate(&tree).unwrap();
        let manifest = load_manifest(TABLE1_MANIFEST, tree.names()).unwrap();
        let cfg = GeneratorConfig::default();
        for c in &manifest.classes {
            assert_eq!(cfg.shape(&c.name).unwrap().magnification, c.magnification, "{}", c.name);
        }
    }

    #[test]
    fn scenes_pass_the_audit_and_are_deterministic() {
        let gen = Generator::new(kidney(), GeneratorConfig::default()).unwrap();
        for seed in 0..3 {
            let a = gen.generate_scene(seed as usize, seed).unwrap();
            assert!(audit_masks(&a.masks, gen.matrix()).is_empty());
            let b = gen.generate_scene(seed as usize, seed).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn inner_units_sit_strictly_inside() {
        let gen = Generator::new(kidney(), GeneratorConfig::default()).unwrap();
        let s = gen.generate_scene(0, 42).unwrap();
        let (cap, tuft) = (gen.idx("Capsule"), gen.idx("Tuft"));
        let inside = s.masks[tuft].iter().zip(s.masks[cap].iter()).all(|(&t, &c)| !t || c);
        let strict = s.masks[cap].iter().filter(|&&v| v).count() > s.masks[tuft].iter().filter(|&&v| v).count();
        assert!(inside && strict);
    }

    #[test]
    fn downsampling_keeps_relations() {
        let gen = Generator::new(kidney(), GeneratorConfig::default()).unwrap();
        let s = gen.generate_scene(0, 7).unwrap();
        for f in [2, 4, 8] {
            let small: Vec<_> = s.masks.iter().map(|m| downsample_mask(m, f)).collect();
            assert!(audit_masks(&small, gen.matrix()).is_empty());
        }
    }

    #[test]
    fn patches_match_ground_truth_windows() {
        let gen = Generator::new(kidney(), GeneratorConfig::default()).unwrap();
        let s = gen.generate_scene(3, 3).unwrap();
        let patches = gen.extract_patches(&s, 3);
        assert!(!patches.is_empty());
        for p in &patches {
            let f = p.magnification.downsample_factor();
            let full = downsample_mask(&s.masks[p.class.0], f);
            let (x, y) = p.origin;
            assert_eq!(p.mask, full.slice(ndarray::s![y..y + 64, x..x + 64]).to_owned());
            assert_eq!(p.image.dim(), (3, 64, 64));
            assert!(!p.peers_present[p.class.0]);
        }
        // a 5× region patch is the whole scene downsampled 8×
        let med = patches.iter().find(|p| p.class.0 == 0).unwrap();
        assert_eq!(med.origin, (0, 0));
        assert_eq!(med.image, downsample_image(&s.image, 8));
        // a 40× patch is cut at native resolution
        let ptc = patches.iter().find(|p| p.magnification == Magnification::X40).unwrap();
        let (x, y) = ptc.origin;
        assert_eq!(ptc.image, s.image.slice(ndarray::s![.., y..y + 64, x..x + 64]).to_owned());
    }

    #[test]
    fn split_is_by_scene() {
        let gen = Generator::new(kidney(), GeneratorConfig::default()).unwrap();
        let mut patches: Vec<PatchRecord> = (0..10)
            .flat_map(|i| {
                let s = gen.generate_scene(i, i as u64).unwrap();
                gen.extract_patches(&s, 0).into_iter().take(3)
            })
            .collect();
        let counts = split_dataset(&mut patches, [0.6, 0.1, 0.3], 1).unwrap();
        assert_eq!(counts, [6, 1, 3]);
        let mut by_scene: HashMap<usize, Split> = HashMap::new();
        for p in &patches {
            assert_eq!(*by_scene.entry(p.scene_id).or_insert(p.split), p.split);
        }
        let mut one: Vec<_> = patches.iter().filter(|p| p.scene_id == 0).cloned().collect();
        assert!(matches!(
            split_dataset(&mut one, [0.6, 0.1, 0.3], 1),
            Err(GenError::TooFewScenes { .. })
        ));
        assert!(split_dataset(&mut patches, [0.5, 0.1, 0.3], 1).is_err());
    }

    #[test]
    fn config_cannot_demand_missing_nesting() {
        let tree = parse_tree("class A\nclass B\n").unwrap();
        let cfg = GeneratorConfig {
            shapes: vec![
                spec(
                    "A",
                    Magnification::X5,
                    [0.5; 3],
                    ShapeRole::Vessel {
                        count: 1,
                        radius: 10.0,
                        lo: 64.0,
                        hi: 448.0,
                        spacing: 0.0,
                    },
                ),
                spec("B", Magnification::X5, [0.5; 3], ShapeRole::InnerUnit { of: "A".into(), radius: 4.0 }),
            ],
            ..GeneratorConfig::default()
        };
        assert!(matches!(cfg.validate(&tree), Err(GenError::Nesting { .. })));
        let missing = GeneratorConfig {
            shapes: cfg.shapes[..1].to_vec(),
            ..cfg.clone()
        };
        assert!(matches!(missing.validate(&tree), Err(GenError::MissingShape(_))));
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let tree = kidney();
        let cfg = DatasetConfig {
            scenes: 3,
            ..DatasetConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(&tree, &cfg, Some(dir.path())).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
        assert!(dir.path().join("scenes/0000/image.png").exists());
        assert!(dir.path().join("scenes/0002/Tuft.png").exists());
    }
}
