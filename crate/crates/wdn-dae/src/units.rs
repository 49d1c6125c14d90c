//! Flow-unit systems accepted in `[OPTIONS] UNITS` and their SI factors.

use serde::{Deserialize, Serialize};

pub const FOOT: f64 = 0.3048;
pub const INCH: f64 = 0.0254;
const US_GALLON: f64 = 3.785_411_784e-3;
const IMPERIAL_GALLON: f64 = 4.546_09e-3;
const ACRE_FOOT: f64 = 1_233.481_837_547_52;
const DAY: f64 = 86_400.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum FlowUnits {
    Cfs,
    Gpm,
    Mgd,
    Imgd,
    Afd,
    Lps,
    Lpm,
    Mld,
    Cmh,
    Cmd,
    Cms,
}

impl FlowUnits {
    pub const ALL: [FlowUnits; 11] = [
        FlowUnits::Cfs,
        FlowUnits::Gpm,
        FlowUnits::Mgd,
        FlowUnits::Imgd,
        FlowUnits::Afd,
        FlowUnits::Lps,
        FlowUnits::Lpm,
        FlowUnits::Mld,
        FlowUnits::Cmh,
        FlowUnits::Cmd,
        FlowUnits::Cms,
    ];

    pub fn parse(token: &str) -> Option<FlowUnits> {
        FlowUnits::ALL
            .into_iter()
            .find(|u| u.token().eq_ignore_ascii_case(token))
    }

    pub fn token(self) -> &'static str {
        match self {
            FlowUnits::Cfs => "CFS",
            FlowUnits::Gpm => "GPM",
            FlowUnits::Mgd => "MGD",
            FlowUnits::Imgd => "IMGD",
            FlowUnits::Afd => "AFD",
            FlowUnits::Lps => "LPS",
            FlowUnits::Lpm => "LPM",
            FlowUnits::Mld => "MLD",
            FlowUnits::Cmh => "CMH",
            FlowUnits::Cmd => "CMD",
            FlowUnits::Cms => "CMS",
        }
    }

    /// Cubic metres per second in one unit of this flow system.
    pub fn to_si(self) -> f64 {
        match self {
            FlowUnits::Cfs => FOOT * FOOT * FOOT,
            FlowUnits::Gpm => US_GALLON / 60.0,
            FlowUnits::Mgd => 1e6 * US_GALLON / DAY,
            FlowUnits::Imgd => 1e6 * IMPERIAL_GALLON / DAY,
            FlowUnits::Afd => ACRE_FOOT / DAY,
            FlowUnits::Lps => 1e-3,
            FlowUnits::Lpm => 1e-3 / 60.0,
            FlowUnits::Mld => 1e3 / DAY,
            FlowUnits::Cmh => 1.0 / 3600.0,
            FlowUnits::Cmd => 1.0 / DAY,
            FlowUnits::Cms => 1.0,
        }
    }

    pub fn is_us(self) -> bool {
        matches!(
            self,
            FlowUnits::Cfs | FlowUnits::Gpm | FlowUnits::Mgd | FlowUnits::Imgd | FlowUnits::Afd
        )
    }

    /// Metres per unit of length, elevation and head.
    pub fn length(self) -> f64 {
        if self.is_us() {
            FOOT
        } else {
            1.0
        }
    }

    /// Metres per unit of pipe and valve diameter (inches or millimetres).
    pub fn diameter(self) -> f64 {
        if self.is_us() {
            INCH
        } else {
            1e-3
        }
    }

    /// Metres per unit of Darcy-Weisbach roughness (millifeet or millimetres).
    pub fn dw_roughness(self) -> f64 {
        if self.is_us() {
            FOOT * 1e-3
        } else {
            1e-3
        }
    }
}

impl std::fmt::Display for FlowUnits {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.token())
    }
}
