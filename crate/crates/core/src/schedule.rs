//! Time-step schedules on `[0, 1]`.
//!
//! A [`Schedule`] is the list of times `t_0 = 0 < t_1 < ... < t_N = 1` a
//! fixed-step solver visits; `N` is the number of function evaluations
//! (NFE). Besides the uniform grid this module provides the sway warp and
//! the pruned-step presets, which are stored as numerators over 32 and
//! warped afterwards.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Strictly increasing time points with `points[0] == 0` and `points[N] == 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Schedule {
    points: Vec<f64>,
}

impl Schedule {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::MalformedSchedule(format!(
                "need at least 2 points, got {}",
                points.len()
            )));
        }
        if let Some(bad) = points.iter().find(|t| !t.is_finite()) {
            return Err(Error::MalformedSchedule(format!("non-finite point {bad}")));
        }
        if points[0] != 0.0 {
            return Err(Error::MalformedSchedule(format!(
                "first point must be exactly 0, got {}",
                points[0]
            )));
        }
        let last = points[points.len() - 1];
        if last != 1.0 {
            return Err(Error::MalformedSchedule(format!(
                "last point must be exactly 1, got {last}"
            )));
        }
        if let Some(k) = points.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::MalformedSchedule(format!(
                "not strictly increasing at index {}: {} -> {}",
                k + 1,
                points[k],
                points[k + 1]
            )));
        }
        Ok(Self { points })
    }

    /// `t_k = k / nfe`.
    pub fn uniform(nfe: usize) -> Result<Self> {
        if nfe == 0 {
            return Err(Error::invalid("uniform schedule needs nfe >= 1"));
        }
        let n = nfe as f64;
        Self::new((0..=nfe).map(|k| k as f64 / n).collect())
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn nfe(&self) -> usize {
        self.points.len() - 1
    }

    /// Consecutive `(t_k, t_{k+1})` pairs.
    pub fn steps(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.points.windows(2).map(|w| (w[0], w[1]))
    }

    pub fn sway(&self, s: SwayCoefficient) -> Result<Self> {
        sway_transform(self, s)
    }

    /// Schedule keeping only the points at `indices` (which must include
    /// both endpoints).
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut pts = Vec::with_capacity(indices.len());
        for &i in indices {
            let t = self
                .points
                .get(i)
                .ok_or_else(|| Error::invalid(format!("index {i} out of range for {} points", self.len())))?;
            pts.push(*t);
        }
        Self::new(pts)
    }

    /// True when every point of `self` is also a point of `other` (bitwise).
    pub fn is_subset_of(&self, other: &Schedule) -> bool {
        self.points
            .iter()
            .all(|t| other.points.iter().any(|u| u.to_bits() == t.to_bits()))
    }

    /// Comma-separated text accepted by [`parse_schedule`]; round-trips exactly.
    pub fn to_text(&self) -> String {
        self.points
            .iter()
            .map(|t| format!("{t:?}"))
            .collect::<Vec<_>>()
            .join(", ")
    }
}

impl TryFrom<Vec<f64>> for Schedule {
    type Error = Error;
    fn try_from(points: Vec<f64>) -> Result<Self> {
        Schedule::new(points)
    }
}

impl From<Schedule> for Vec<f64> {
    fn from(s: Schedule) -> Self {
        s.points
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

impl FromStr for Schedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        parse_schedule(s)
    }
}

/// Parses `"0, 1/16, 0.25, 1"`-style text. Fractions are evaluated in `f64`.
/// Line breaks also separate points, so one-point-per-line files work.
pub fn parse_schedule(text: &str) -> Result<Schedule> {
    let joined = text
        .lines()
        .map(|l| l.trim().trim_end_matches(','))
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join(",");
    let trimmed = joined.trim().trim_start_matches('[').trim_end_matches(']');
    if trimmed.trim().is_empty() {
        return Err(Error::Syntax("empty schedule".into()));
    }
    let points = trimmed.split(',').map(parse_number).collect::<Result<Vec<_>>>()?;
    Schedule::new(points)
}

fn parse_number(token: &str) -> Result<f64> {
    let token = token.trim();
    let parse = |s: &str| -> Result<f64> {
        s.trim()
            .parse::<f64>()
            .map_err(|_| Error::Syntax(format!("cannot parse `{token}` as a number")))
    };
    match token.split_once('/') {
        Some((num, den)) => {
            let den = parse(den)?;
            if den == 0.0 {
                return Err(Error::Syntax(format!("zero denominator in `{token}`")));
            }
            Ok(parse(num)? / den)
        }
        None => parse(token),
    }
}

/// Coefficient `s` of the sway warp.
///
/// Valid values are `[-1, 0)` (sway left, denser early steps),
/// `(0, 2/(pi-2)]` (sway right) and `0`, the identity warp.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct SwayCoefficient(f64);

impl SwayCoefficient {
    pub const MIN: f64 = -1.0;
    /// `2 / (pi - 2)`, where the warp's derivative first touches zero at `t = 1`.
    pub const MAX: f64 = 2.0 / (std::f64::consts::PI - 2.0);

    pub const IDENTITY: SwayCoefficient = SwayCoefficient(0.0);

    pub fn new(s: f64) -> Result<Self> {
        if s.is_finite() && (Self::MIN..=Self::MAX).contains(&s) {
            Ok(Self(s))
        } else {
            Err(Error::invalid(format!(
                "sway coefficient {s} outside [{}, {:.6}]",
                Self::MIN,
                Self::MAX
            )))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for SwayCoefficient {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl TryFrom<f64> for SwayCoefficient {
    type Error = Error;
    fn try_from(s: f64) -> Result<Self> {
        Self::new(s)
    }
}

impl From<SwayCoefficient> for f64 {
    fn from(s: SwayCoefficient) -> Self {
        s.0
    }
}

/// `SS(t; s) = t + s * (cos(pi t / 2) + t - 1)`, with the endpoints pinned
/// to exactly 0 and 1.
pub fn sway_value(t: f64, s: SwayCoefficient) -> Result<f64> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("time {t} outside [0, 1]")));
    }
    if t == 0.0 {
        return Ok(0.0);
    }
    if t == 1.0 {
        return Ok(1.0);
    }
    let s = s.value();
    Ok(t + s * ((FRAC_PI_2 * t).cos() + t - 1.0))
}

/// Pointwise sway warp. The result is re-validated, so a warp that broke
/// monotonicity would surface as [`Error::MalformedSchedule`].
pub fn sway_transform(base: &Schedule, s: SwayCoefficient) -> Result<Schedule> {
    if s.value() == 0.0 {
        return Ok(base.clone());
    }
    let points = base
        .points
        .iter()
        .map(|&t| sway_value(t, s))
        .collect::<Result<Vec<_>>>()?;
    Schedule::new(points)
}

/// Pruned-step presets, as numerators over 32 before warping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EpssPreset {
    #[serde(rename = "nfe32")]
    Nfe32,
    #[serde(rename = "nfe16")]
    Nfe16,
    #[serde(rename = "nfe12")]
    Nfe12,
    #[serde(rename = "nfe10")]
    Nfe10,
    #[serde(rename = "nfe7")]
    Nfe7,
    #[serde(rename = "nfe6a")]
    Nfe6a,
    #[serde(rename = "nfe6b")]
    Nfe6b,
    #[serde(rename = "nfe5")]
    Nfe5,
}

pub const PRESET_DENOMINATOR: u32 = 32;

const NFE32: [u32; 33] = [
    0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17, 18, 19, 20, 21, 22, 23, 24, 25, 26, 27, 28, 29, 30,
    31, 32,
];
const NFE16: [u32; 17] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 10, 12, 14, 16, 20, 24, 28, 32];
const NFE12: [u32; 13] = [0, 2, 4, 6, 8, 10, 12, 14, 16, 20, 24, 28, 32];
const NFE10: [u32; 11] = [0, 2, 4, 6, 8, 12, 16, 20, 24, 28, 32];
const NFE7: [u32; 8] = [0, 2, 4, 6, 8, 16, 24, 32];
const NFE6A: [u32; 7] = [0, 2, 4, 6, 8, 16, 32];
const NFE6B: [u32; 7] = [0, 2, 4, 8, 16, 24, 32];
const NFE5: [u32; 6] = [0, 2, 4, 6, 8, 32];

impl EpssPreset {
    /// Ordered from most to fewest evaluations.
    pub const ALL: [EpssPreset; 8] = [
        EpssPreset::Nfe32,
        EpssPreset::Nfe16,
        EpssPreset::Nfe12,
        EpssPreset::Nfe10,
        EpssPreset::Nfe7,
        EpssPreset::Nfe6a,
        EpssPreset::Nfe6b,
        EpssPreset::Nfe5,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EpssPreset::Nfe32 => "nfe32",
            EpssPreset::Nfe16 => "nfe16",
            EpssPreset::Nfe12 => "nfe12",
            EpssPreset::Nfe10 => "nfe10",
            EpssPreset::Nfe7 => "nfe7",
            EpssPreset::Nfe6a => "nfe6a",
            EpssPreset::Nfe6b => "nfe6b",
            EpssPreset::Nfe5 => "nfe5",
        }
    }

    pub fn raw_indices(self) -> &'static [u32] {
        match self {
            EpssPreset::Nfe32 => &NFE32,
            EpssPreset::Nfe16 => &NFE16,
            EpssPreset::Nfe12 => &NFE12,
            EpssPreset::Nfe10 => &NFE10,
            EpssPreset::Nfe7 => &NFE7,
            EpssPreset::Nfe6a => &NFE6A,
            EpssPreset::Nfe6b => &NFE6B,
            EpssPreset::Nfe5 => &NFE5,
        }
    }

    pub fn nfe(self) -> usize {
        self.raw_indices().len() - 1
    }

    /// Points before the sway warp: `raw_indices / 32`.
    pub fn pre_warp(self) -> Schedule {
        let den = PRESET_DENOMINATOR as f64;
        Schedule::new(self.raw_indices().iter().map(|&i| i as f64 / den).collect())
            .expect("preset tables are valid schedules")
    }

    pub fn schedule(self, s: SwayCoefficient) -> Result<Schedule> {
        sway_transform(&self.pre_warp(), s)
    }

    pub fn valid_names() -> String {
        Self::ALL.map(|p| p.name()).join(", ")
    }
}

impl fmt::Display for EpssPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EpssPreset {
    type Err = Error;
    fn from_str(name: &str) -> Result<Self> {
        let key = name.trim().to_ascii_lowercase();
        Self::ALL
            .into_iter()
            .find(|p| p.name() == key)
            .ok_or_else(|| Error::NotFound {
                kind: "preset",
                name: name.to_string(),
                valid: Self::valid_names(),
            })
    }
}

/// Preset lookup by name followed by the sway warp.
pub fn epss_schedule(preset: &str, s: SwayCoefficient) -> Result<Schedule> {
    preset.parse::<EpssPreset>()?.schedule(s)
}
