//! Shared vocabulary: modalities, labels, grids and availability masks.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Number of segmentation classes (BG, NCR/NET, ED, ET).
pub const NUM_CLASSES: usize = 4;
/// Number of input modalities.
pub const NUM_MODALITIES: usize = 4;

/// MR sequence. Index order follows the subset-grid column order
/// FLAIR, T1ce, T1, T2.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Flair,
    T1ce,
    T1,
    T2,
}

impl Modality {
    pub const ALL: [Modality; NUM_MODALITIES] = [Modality::Flair, Modality::T1ce, Modality::T1, Modality::T2];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Flair => "flair",
            Modality::T1ce => "t1ce",
            Modality::T1 => "t1",
            Modality::T2 => "t2",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Modality::Flair => "FLAIR",
            Modality::T1ce => "T1ce",
            Modality::T1 => "T1",
            Modality::T2 => "T2",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.display_name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "flair" => Ok(Modality::Flair),
            "t1ce" | "t1gd" => Ok(Modality::T1ce),
            "t1" => Ok(Modality::T1),
            "t2" => Ok(Modality::T2),
            _ => Err(Error::UnknownModality(s.to_string())),
        }
    }
}

/// Voxel label. Stored as `u8` with these discriminants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Label {
    Background = 0,
    /// Necrotic and non-enhancing tumour core (NCR/NET).
    Necrotic = 1,
    /// Peritumoral edema (ED).
    Edema = 2,
    /// Enhancing tumour (ET).
    Enhancing = 3,
}

impl Label {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Label::Background),
            1 => Some(Label::Necrotic),
            2 => Some(Label::Edema),
            3 => Some(Label::Enhancing),
            _ => None,
        }
    }
}

/// Voxel grid extent `(D, H, W)`. `D == 1` is the planar (2D) mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "[usize; 3]", from = "[usize; 3]")]
pub struct GridShape {
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl GridShape {
    pub const fn new(d: usize, h: usize, w: usize) -> Self {
        Self { d, h, w }
    }

    pub const fn cube(n: usize) -> Self {
        Self::new(n, n, n)
    }

    pub fn voxels(&self) -> usize {
        self.d * self.h * self.w
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.d, self.h, self.w]
    }

    pub fn is_planar(&self) -> bool {
        self.d == 1
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.h + y) * self.w + x
    }
}

impl From<GridShape> for [usize; 3] {
    fn from(g: GridShape) -> Self {
        g.dims()
    }
}

impl From<[usize; 3]> for GridShape {
    fn from(d: [usize; 3]) -> Self {
        GridShape::new(d[0], d[1], d[2])
    }
}

impl fmt::Display for GridShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.d, self.h, self.w)
    }
}

impl FromStr for GridShape {
    type Err = Error;

    /// Accepts `32`, `32x32x32` or `96x96` (planar).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Result<Vec<usize>, _> = s.split(['x', 'X', ',']).map(|p| p.trim().parse::<usize>()).collect();
        let parts = parts
            .map_err(|_| Error::InvalidConfig { field: "grid_shape".into(), reason: format!("cannot parse {s:?}") })?;
        match parts[..] {
            [n] => Ok(GridShape::cube(n)),
            [h, w] => Ok(GridShape::new(1, h, w)),
            [d, h, w] => Ok(GridShape::new(d, h, w)),
            _ => Err(Error::InvalidConfig {
                field: "grid_shape".into(),
                reason: format!("expected 1-3 extents, got {s:?}"),
            }),
        }
    }
}

/// Which modalities are present, one bit per [`Modality::index`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Availability(u8);

impl Availability {
    pub const ALL: Availability = Availability(0b1111);

    pub fn from_bits(bits: u8) -> Self {
        Self(bits & 0b1111)
    }

    pub fn from_modalities(mods: &[Modality]) -> Self {
        Self(mods.iter().fold(0, |acc, m| acc | (1 << m.index())))
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn contains(self, m: Modality) -> bool {
        self.0 & (1 << m.index()) != 0
    }

    pub fn count(self) -> usize {
        self.0.count_ones() as usize
    }

    /// Present modalities in canonical index order.
    pub fn modalities(self) -> Vec<Modality> {
        Modality::ALL.into_iter().filter(|&m| self.contains(m)).collect()
    }

    /// The 0/1 indicator vector `delta_1..delta_4`.
    pub fn code(self) -> [f32; NUM_MODALITIES] {
        let mut c = [0.0; NUM_MODALITIES];
        for m in Modality::ALL {
            if self.contains(m) {
                c[m.index()] = 1.0;
            }
        }
        c
    }

    /// The fifteen non-empty subsets, ordered by size and then by the
    /// canonical column order of the missing-modality tables.
    pub fn all_subsets() -> Vec<Availability> {
        let mut subsets: Vec<Availability> = (1u8..16).map(Availability).collect();
        subsets.sort_by_key(|s| {
            let mods = s.modalities();
            let mut key = vec![mods.len()];
            key.extend(mods.iter().map(|m| m.index()));
            key
        });
        subsets
    }

    /// `FLAIR+T1ce`-style label.
    pub fn label(self) -> String {
        if self.is_empty() {
            return "none".into();
        }
        self.modalities().iter().map(|m| m.display_name()).collect::<Vec<_>>().join("+")
    }
}

impl fmt::Display for Availability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}
