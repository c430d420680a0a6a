//! Attribute schema, body-region categories and the patch grid.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Body-region category an attribute is tied to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Head,
    Upper,
    Lower,
    Foot,
    Global,
}

impl Region {
    pub const LOCAL: [Region; 4] = [Region::Head, Region::Upper, Region::Lower, Region::Foot];

    pub fn is_local(self) -> bool {
        self != Region::Global
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Region::Head => "head",
            Region::Upper => "upper",
            Region::Lower => "lower",
            Region::Foot => "foot",
            Region::Global => "global",
        }
    }

    fn local_index(self) -> Option<usize> {
        Self::LOCAL.iter().position(|&r| r == self)
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Region {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "head" => Ok(Region::Head),
            "upper" => Ok(Region::Upper),
            "lower" => Ok(Region::Lower),
            "foot" => Ok(Region::Foot),
            "global" => Ok(Region::Global),
            other => Err(Error::config(
                "region",
                format!("unknown region category `{other}`"),
            )),
        }
    }
}

/// Patch layout of the visual tokens: `rows * cols` patches in row-major order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
}

impl Grid {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::config("grid", "grid dimensions must be positive"));
        }
        Ok(Self { rows, cols })
    }

    pub fn patches(&self) -> usize {
        self.rows * self.cols
    }

    /// `(row, col)` of patch `p`.
    pub fn position(&self, p: usize) -> (usize, usize) {
        (p / self.cols, p % self.cols)
    }
}

/// Vertical extent of each local region as a fraction of image height.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionBands {
    pub head: (f64, f64),
    pub upper: (f64, f64),
    pub lower: (f64, f64),
    pub foot: (f64, f64),
}

impl Default for RegionBands {
    fn default() -> Self {
        Self {
            head: (0.0, 0.20),
            upper: (0.20, 0.55),
            lower: (0.55, 0.85),
            foot: (0.85, 1.0),
        }
    }
}

impl RegionBands {
    fn as_array(&self) -> [(f64, f64); 4] {
        [self.head, self.upper, self.lower, self.foot]
    }

    /// The four bands must tile `[0, 1]` in order without gaps or overlap.
    pub fn validate(&self) -> Result<()> {
        let mut edge = 0.0;
        for (region, (lo, hi)) in Region::LOCAL.iter().zip(self.as_array()) {
            if lo != edge || hi <= lo {
                return Err(Error::config(
                    format!("bands.{region}"),
                    format!("band [{lo}, {hi}) does not continue from {edge}"),
                ));
            }
            edge = hi;
        }
        if edge != 1.0 {
            return Err(Error::config("bands.foot", "bands must end at 1.0"));
        }
        Ok(())
    }

    /// Whether grid row `row` (of `rows`) belongs to `region`, judged by the row centre.
    /// Global attributes cover every row.
    pub fn contains_row(&self, region: Region, row: usize, rows: usize) -> bool {
        let Some(i) = region.local_index() else {
            return true;
        };
        let (lo, hi) = self.as_array()[i];
        let centre = (row as f64 + 0.5) / rows as f64;
        centre >= lo && (centre < hi || (hi >= 1.0 && centre <= 1.0))
    }

    /// Indices of the patches covered by `region`.
    pub fn patches(&self, region: Region, grid: Grid) -> Vec<usize> {
        (0..grid.patches())
            .filter(|&p| self.contains_row(region, grid.position(p).0, grid.rows))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub name: String,
    pub region: Region,
    /// Target positive rate.
    pub rate: f64,
}

impl AttributeSpec {
    pub fn new(name: &str, region: Region, rate: f64) -> Self {
        Self {
            name: name.to_string(),
            region,
            rate,
        }
    }
}

/// Twelve pedestrian-style attributes with a long-tailed rate profile.
pub fn default_attributes() -> Vec<AttributeSpec> {
    use Region::*;
    vec![
        AttributeSpec::new("hat", Head, 0.15),
        AttributeSpec::new("glasses", Head, 0.25),
        AttributeSpec::new("long_hair", Head, 0.35),
        AttributeSpec::new("short_sleeve", Upper, 0.5),
        AttributeSpec::new("upper_logo", Upper, 0.3),
        AttributeSpec::new("backpack", Upper, 0.4),
        AttributeSpec::new("trousers", Lower, 0.5),
        AttributeSpec::new("skirt", Lower, 0.12),
        AttributeSpec::new("shorts", Lower, 0.2),
        AttributeSpec::new("boots", Foot, 0.1),
        AttributeSpec::new("female", Global, 0.45),
        AttributeSpec::new("age_over_60", Global, 0.05),
    ]
}

/// Which attribute looks where, on which grid.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMap {
    pub regions: Vec<Region>,
    pub grid: Grid,
    pub bands: RegionBands,
}

impl RegionMap {
    pub fn new(regions: Vec<Region>, grid: Grid, bands: RegionBands) -> Result<Self> {
        bands.validate()?;
        Ok(Self {
            regions,
            grid,
            bands,
        })
    }

    pub fn from_attributes(attrs: &[AttributeSpec], grid: Grid, bands: RegionBands) -> Result<Self> {
        Self::new(attrs.iter().map(|a| a.region).collect(), grid, bands)
    }

    pub fn attributes(&self) -> usize {
        self.regions.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_bands_on_eight_rows() {
        let b = RegionBands::default();
        b.validate().unwrap();
        let rows_of = |r| (0..8).filter(|&row| b.contains_row(r, row, 8)).collect::<Vec<_>>();
        assert_eq!(rows_of(Region::Head), vec![0, 1]);
        assert_eq!(rows_of(Region::Upper), vec![2, 3]);
        assert_eq!(rows_of(Region::Lower), vec![4, 5, 6]);
        assert_eq!(rows_of(Region::Foot), vec![7]);
        assert_eq!(rows_of(Region::Global).len(), 8);
    }

    #[test]
    fn every_row_in_exactly_one_local_band() {
        let b = RegionBands::default();
        for rows in 1..40 {
            for row in 0..rows {
                let hits = Region::LOCAL
                    .iter()
                    .filter(|&&r| b.contains_row(r, row, rows))
                    .count();
                assert_eq!(hits, 1, "row {row} of {rows}");
            }
        }
    }

    #[test]
    fn overlapping_bands_rejected() {
        let b = RegionBands {
            upper: (0.15, 0.55),
            ..RegionBands::default()
        };
        assert!(b.validate().is_err());
    }

    #[test]
    fn unknown_region_rejected() {
        let err = "torso".parse::<Region>().unwrap_err();
        assert!(err.to_string().contains("torso"));
    }
}
