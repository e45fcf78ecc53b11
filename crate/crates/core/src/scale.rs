//! Per-class area rates and the pairwise scale matrix that weights the
//! taxonomy loss.
//!
//! The area rate of a class is its mean labeled pixel count converted to
//! physical units and normalized by the patch area:
//!
//! ```text
//! a = pixel_mean · micron_per_pixel² / patch_side²
//! ```
//!
//! Two classes of similar physical size constrain each other strongly; a
//! region and a cell barely at all. The default weight is the rate ratio
//! `s(i, j) = min(aᵢ, aⱼ) / max(aᵢ, aⱼ)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::synthdata::PatchRecord;
use crate::taxonomy::ClassId;

/// Measured statistics of the reference kidney dataset, one row per class.
pub const TABLE1_MANIFEST: &str = include_str!("../data/table1.csv");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScaleError {
    #[error("patch side is zero for class `{0}`")]
    ZeroPatchSide(String),
    #[error("area rate of class `{0}` is zero; the scale ratio is undefined")]
    ZeroAreaRate(String),
    #[error("missing class `{0}`")]
    MissingClass(String),
    #[error("class `{0}` appears more than once")]
    DuplicateClass(String),
    #[error("class `{0}` is not in the taxonomy")]
    UnknownClass(String),
    #[error("row {row}: {msg}")]
    Malformed { row: usize, msg: String },
    #[error("row {row}: {field} out of range ({value})")]
    OutOfRange {
        row: usize,
        field: &'static str,
        value: String,
    },
    #[error("class `{0}` has no patches")]
    NoPatches(String),
    #[error("unsupported magnification {0}×; expected 5, 10, 20 or 40")]
    BadMagnification(u32),
    #[error("unknown scale formula `{0}`")]
    BadFormula(String),
}

/// One of the four optical scales.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum Magnification {
    X5,
    X10,
    X20,
    X40,
}

impl Magnification {
    pub const ALL: [Magnification; 4] = [
        Magnification::X5,
        Magnification::X10,
        Magnification::X20,
        Magnification::X40,
    ];

    pub fn from_power(power: u32) -> Result<Self, ScaleError> {
        Ok(match power {
            5 => Magnification::X5,
            10 => Magnification::X10,
            20 => Magnification::X20,
            40 => Magnification::X40,
            other => return Err(ScaleError::BadMagnification(other)),
        })
    }

    pub fn power(self) -> u32 {
        match self {
            Magnification::X5 => 5,
            Magnification::X10 => 10,
            Magnification::X20 => 20,
            Magnification::X40 => 40,
        }
    }

    /// Row of this scale in the scale-token table.
    pub fn token_index(self) -> usize {
        self as usize
    }

    /// Physical pixel size, anchored at 0.25 µm/pixel for 40×.
    pub fn micron_per_pixel(self) -> f64 {
        10.0 / self.power() as f64
    }

    /// Integer downsampling factor from the 40× native grid.
    pub fn downsample_factor(self) -> usize {
        (40 / self.power()) as usize
    }
}

impl TryFrom<u32> for Magnification {
    type Error = ScaleError;

    fn try_from(v: u32) -> Result<Self, Self::Error> {
        Magnification::from_power(v)
    }
}

impl From<Magnification> for u32 {
    fn from(m: Magnification) -> u32 {
        m.power()
    }
}

impl fmt::Display for Magnification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x", self.power())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub class: ClassId,
    pub name: String,
    pub stain: String,
    pub patch_count: usize,
    pub patch_side: usize,
    pub magnification: Magnification,
    pub micron_per_pixel: f64,
    /// Mean labeled pixels per patch.
    pub pixel_mean: f64,
}

/// Dataset statistics, one entry per class in class-index order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub classes: Vec<ClassStats>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    class: String,
    stain: String,
    patch_count: usize,
    patch_side: usize,
    magnification: u32,
    micron_per_pixel: f64,
    pixel_mean: f64,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn area_rates(&self) -> Result<Vec<f64>, ScaleError> {
        self.classes.iter().map(compute_area_rate).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for c in &self.classes {
            w.serialize(ManifestRow {
                class: c.name.clone(),
                stain: c.stain.clone(),
                patch_count: c.patch_count,
                patch_side: c.patch_side,
                magnification: c.magnification.power(),
                micron_per_pixel: c.micron_per_pixel,
                pixel_mean: c.pixel_mean,
            })
            .expect("in-memory csv write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }
}

/// `pixel_mean · micron² / patch_side²`, in (µm/pixel)².
pub fn compute_area_rate(c: &ClassStats) -> Result<f64, ScaleError> {
    if c.patch_side == 0 {
        return Err(ScaleError::ZeroPatchSide(c.name.clone()));
    }
    let side = c.patch_side as f64;
    Ok(c.pixel_mean * c.micron_per_pixel * c.micron_per_pixel / (side * side))
}

/// How a pair of area rates becomes a loss weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleFormula {
    /// `min / max`
    #[default]
    Ratio,
    /// `sqrt(min / max)`, a softer falloff.
    SqrtRatio,
    /// All ones: relations are binary, scale is ignored.
    Ones,
}

impl FromStr for ScaleFormula {
    type Err = ScaleError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ratio" => Ok(ScaleFormula::Ratio),
            "sqrt_ratio" => Ok(ScaleFormula::SqrtRatio),
            "ones" => Ok(ScaleFormula::Ones),
            other => Err(ScaleError::BadFormula(other.to_string())),
        }
    }
}

impl fmt::Display for ScaleFormula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScaleFormula::Ratio => "ratio",
            ScaleFormula::SqrtRatio => "sqrt_ratio",
            ScaleFormula::Ones => "ones",
        })
    }
}

/// Symmetric `n × n` matrix of relation weights with unit diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleMatrix {
    names: Vec<String>,
    s: Vec<f64>,
}

impl ScaleMatrix {
    /// A matrix of ones, equivalent to ignoring scale.
    pub fn ones(names: Vec<String>) -> Self {
        let n = names.len();
        ScaleMatrix {
            names,
            s: vec![1.0; n * n],
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.s[i * self.names.len() + j]
    }

    pub fn to_csv(&self) -> String {
        let n = self.len();
        let mut out = String::from("class");
        for name in &self.names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for i in 0..n {
            out.push_str(&self.names[i]);
            for j in 0..n {
                out.push_str(&format!(",{:.6}", self.get(i, j)));
            }
            out.push('\n');
        }
        out
    }
}

/// Scale matrix with the default `min / max` formula.
pub fn build_scale_matrix(manifest: &DatasetManifest) -> Result<ScaleMatrix, ScaleError> {
    build_scale_matrix_with(manifest, ScaleFormula::Ratio)
}

pub fn build_scale_matrix_with(
    manifest: &DatasetManifest,
    formula: ScaleFormula,
) -> Result<ScaleMatrix, ScaleError> {
    let names: Vec<String> = manifest.classes.iter().map(|c| c.name.clone()).collect();
    if formula == ScaleFormula::Ones {
        return Ok(ScaleMatrix::ones(names));
    }
    let rates = manifest.area_rates()?;
    if let Some(k) = rates.iter().position(|&a| a <= 0.0) {
        return Err(ScaleError::ZeroAreaRate(names[k].clone()));
    }
    let n = rates.len();
    let mut s = vec![1.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let r = rates[i].min(rates[j]) / rates[i].max(rates[j]);
            s[i * n + j] = match formula {
                ScaleFormula::SqrtRatio => r.sqrt(),
                _ => r,
            };
        }
    }
    Ok(ScaleMatrix { names, s })
}

/// Parses a manifest CSV and orders its rows by the taxonomy's class order.
pub fn load_manifest(text: &str, class_names: &[String]) -> Result<DatasetManifest, ScaleError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut slots: Vec<Option<ClassStats>> = vec![None; class_names.len()];
    for (k, record) in reader.deserialize::<ManifestRow>().enumerate() {
        let row = k + 2;
        let r = record.map_err(|e| ScaleError::Malformed {
            row,
            msg: e.to_string(),
        })?;
        let idx = class_names
            .iter()
            .position(|n| *n == r.class)
            .ok_or_else(|| ScaleError::UnknownClass(r.class.clone()))?;
        if slots[idx].is_some() {
            return Err(ScaleError::DuplicateClass(r.class));
        }
        let magnification =
            Magnification::from_power(r.magnification).map_err(|_| ScaleError::OutOfRange {
                row,
                field: "magnification",
                value: r.magnification.to_string(),
            })?;
        if r.patch_side == 0 {
            return Err(ScaleError::OutOfRange {
                row,
                field: "patch_side",
                value: "0".into(),
            });
        }
        if !(r.micron_per_pixel > 0.0) || !r.micron_per_pixel.is_finite() {
            return Err(ScaleError::OutOfRange {
                row,
                field: "micron_per_pixel",
                value: r.micron_per_pixel.to_string(),
            });
        }
        let side = r.patch_side as f64;
        if !(r.pixel_mean >= 0.0) || r.pixel_mean > side * side {
            return Err(ScaleError::OutOfRange {
                row,
                field: "pixel_mean",
                value: r.pixel_mean.to_string(),
            });
        }
        slots[idx] = Some(ClassStats {
            class: ClassId(idx),
            name: r.class,
            stain: r.stain,
            patch_count: r.patch_count,
            patch_side: r.patch_side,
            magnification,
            micron_per_pixel: r.micron_per_pixel,
            pixel_mean: r.pixel_mean,
        });
    }
    let classes = slots
        .into_iter()
        .enumerate()
        .map(|(i, s)| s.ok_or_else(|| ScaleError::MissingClass(class_names[i].clone())))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(DatasetManifest { classes })
}

/// Measures a manifest from labeled patches: `pixel_mean` is the mean
/// foreground count over each class's patches; the remaining columns come
/// from the patch metadata.
pub fn measure_manifest<'a, I>(patches: I, class_names: &[String]) -> Result<DatasetManifest, ScaleError>
where
    I: IntoIterator<Item = &'a PatchRecord>,
{
    struct Acc {
        count: usize,
        pixels: f64,
        side: usize,
        mag: Magnification,
        mpp: f64,
    }
    let mut acc: Vec<Option<Acc>> = (0..class_names.len()).map(|_| None).collect();
    for p in patches {
        let fg = p.foreground_pixels() as f64;
        let slot = &mut acc[p.class.0];
        match slot {
            Some(a) => {
                a.count += 1;
                a.pixels += fg;
            }
            None => {
                *slot = Some(Acc {
                    count: 1,
                    pixels: fg,
                    side: p.side(),
                    mag: p.magnification,
                    mpp: p.micron_per_pixel,
                })
            }
        }
    }
    let classes = acc
        .into_iter()
        .enumerate()
        .map(|(i, a)| {
            let a = a.ok_or_else(|| ScaleError::NoPatches(class_names[i].clone()))?;
            Ok(ClassStats {
                class: ClassId(i),
                name: class_names[i].clone(),
                stain: "synthetic".into(),
                patch_count: a.count,
                patch_side: a.side,
                magnification: a.mag,
                micron_per_pixel: a.mpp,
                pixel_mean: a.pixels / a.count as f64,
            })
        })
        .collect::<Result<Vec<_>, ScaleError>>()?;
    Ok(DatasetManifest { classes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::{parse_tree, KIDNEY_TREE};
    use approx::assert_abs_diff_eq;

    fn names() -> Vec<String> {
        parse_tree(KIDNEY_TREE).unwrap().names().to_vec()
    }

    fn stats(pixel_mean: f64, micron: f64, side: usize) -> ClassStats {
        ClassStats {
            class: ClassId(0),
            name: "x".into(),
            stain: "P".into(),
            patch_count: 1,
            patch_side: side,
            magnification: Magnification::X5,
            micron_per_pixel: micron,
            pixel_mean,
        }
    }

    #[test]
    fn area_rate_rows() {
        assert_abs_diff_eq!(compute_area_rate(&stats(637_975.0, 2.0, 1024)).unwrap(), 2.434, epsilon = 1e-3);
        assert_abs_diff_eq!(compute_area_rate(&stats(6_381.0, 1.0, 256)).unwrap(), 0.097, epsilon = 1e-3);
        assert_abs_diff_eq!(compute_area_rate(&stats(1_170.0, 0.5, 512)).unwrap(), 0.001, epsilon = 5e-4);
        assert_eq!(
            compute_area_rate(&stats(1.0, 1.0, 0)),
            Err(ScaleError::ZeroPatchSide("x".into()))
        );
    }

    fn manifest_of(rates: &[f64]) -> DatasetManifest {
        // side 1, micron 1: the area rate equals pixel_mean
        DatasetManifest {
            classes: rates
                .iter()
                .enumerate()
                .map(|(i, &a)| ClassStats {
                    class: ClassId(i),
                    name: format!("c{i}"),
                    ..stats(a, 1.0, 1)
                })
                .collect(),
        }
    }

    #[test]
    fn ratio_weights() {
        let s = build_scale_matrix(&manifest_of(&[2.434, 2.434])).unwrap();
        assert_eq!(s.get(0, 1), 1.0);
        let s = build_scale_matrix(&manifest_of(&[2.434, 2.600])).unwrap();
        assert_abs_diff_eq!(s.get(0, 1), 0.936, epsilon = 2e-3);
        let s = build_scale_matrix(&manifest_of(&[2.600, 0.001])).unwrap();
        assert_abs_diff_eq!(s.get(1, 0), 0.0004, epsilon = 5e-5);
        assert_eq!(s.get(0, 0), 1.0);
    }

    #[test]
    fn zero_rate_rejected() {
        assert!(matches!(
            build_scale_matrix(&manifest_of(&[1.0, 0.0])),
            Err(ScaleError::ZeroAreaRate(_))
        ));
        // `ones` never looks at the rates
        let s = build_scale_matrix_with(&manifest_of(&[1.0, 0.0]), ScaleFormula::Ones).unwrap();
        assert_eq!(s.get(0, 1), 1.0);
    }

    #[test]
    fn formulas() {
        let m = manifest_of(&[4.0, 1.0]);
        let r = build_scale_matrix_with(&m, ScaleFormula::Ratio).unwrap();
        let q = build_scale_matrix_with(&m, ScaleFormula::SqrtRatio).unwrap();
        assert_eq!(r.get(0, 1), 0.25);
        assert_eq!(q.get(0, 1), 0.5);
        assert_eq!("sqrt_ratio".parse::<ScaleFormula>().unwrap(), ScaleFormula::SqrtRatio);
        assert!("cubic".parse::<ScaleFormula>().is_err());
    }

    #[test]
    fn load_reference_manifest() {
        let m = load_manifest(TABLE1_MANIFEST, &names()).unwrap();
        assert_eq!(m.len(), 15);
        assert_eq!(m.classes[5].name, "DT");
        assert_eq!(m.classes[5].stain, "H,P,S,T");
        assert_eq!(m.classes[10].magnification, Magnification::X40);
        let again = load_manifest(&m.to_csv(), &names()).unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn load_errors() {
        let header = "class,stain,patch_count,patch_side,magnification,micron_per_pixel,pixel_mean\n";
        assert_eq!(
            load_manifest(header, &names()),
            Err(ScaleError::MissingClass("Medulla".into()))
        );
        let bad_mag = format!("{header}Medulla,P,1,1024,15,2,10\n");
        assert!(matches!(
            load_manifest(&bad_mag, &names()),
            Err(ScaleError::OutOfRange { field: "magnification", .. })
        ));
        let malformed = format!("{header}Medulla,P,many,1024,5,2,10\n");
        assert!(matches!(load_manifest(&malformed, &names()), Err(ScaleError::Malformed { .. })));
        let too_big = format!("{header}Medulla,P,1,4,5,2,17\n");
        assert!(matches!(
            load_manifest(&too_big, &names()),
            Err(ScaleError::OutOfRange { field: "pixel_mean", .. })
        ));
    }

    #[test]
    fn magnification_mapping() {
        let idx: Vec<usize> = Magnification::ALL.iter().map(|m| m.token_index()).collect();
        assert_eq!(idx, vec![0, 1, 2, 3]);
        assert_eq!(Magnification::X5.downsample_factor(), 8);
        assert_eq!(Magnification::X20.micron_per_pixel(), 0.5);
        assert!(Magnification::from_power(15).is_err());
    }
}
