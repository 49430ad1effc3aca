//! Threshold tables that turn measurements into ordinal severities.
//!
//! Defaults follow common adult echocardiography convention. They are
//! configuration, not clinical truth.

use serde::{Deserialize, Serialize};

use crate::domain::{FindingCategory, Severity};

/// EF breakpoints in percent. Grade is non-increasing in EF.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EfThresholds {
    /// EF at or above this is normal.
    pub normal_min: f64,
    /// EF at or above this (and below `normal_min`) is mildly reduced.
    pub mild_min: f64,
    /// EF at or above this (and below `mild_min`) is moderately reduced.
    pub moderate_min: f64,
}

/// Wall-thickness breakpoints in millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LvhThresholds {
    /// Thickness at or below this is normal.
    pub normal_max: f64,
    /// Thickness at or above this is moderate.
    pub moderate_min: f64,
    /// Thickness at or above this is severe.
    pub severe_min: f64,
}

/// Effusion-depth breakpoints in centimetres. Zero depth is "none".
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EffusionThresholds {
    /// Depth at or above this is moderate.
    pub moderate_min: f64,
    /// Depth strictly above this is large.
    pub large_above: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClinicalThresholds {
    pub ef: EfThresholds,
    pub lvh_mm: LvhThresholds,
    pub effusion_cm: EffusionThresholds,
}

impl Default for ClinicalThresholds {
    fn default() -> Self {
        ClinicalThresholds {
            ef: EfThresholds { normal_min: 50.0, mild_min: 40.0, moderate_min: 30.0 },
            lvh_mm: LvhThresholds { normal_max: 11.0, moderate_min: 14.0, severe_min: 17.0 },
            effusion_cm: EffusionThresholds { moderate_min: 1.0, large_above: 2.0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("thresholds not strictly ordered: {0}")]
pub struct ThresholdOrderError(pub &'static str);

impl ClinicalThresholds {
    pub fn validate(&self) -> Result<(), ThresholdOrderError> {
        let ef = &self.ef;
        if !(0.0 < ef.moderate_min
            && ef.moderate_min < ef.mild_min
            && ef.mild_min < ef.normal_min
            && ef.normal_min < 100.0)
        {
            return Err(ThresholdOrderError("ef: 0 < moderate_min < mild_min < normal_min < 100"));
        }
        let l = &self.lvh_mm;
        if !(0.0 < l.normal_max && l.normal_max < l.moderate_min && l.moderate_min < l.severe_min) {
            return Err(ThresholdOrderError("lvh_mm: 0 < normal_max < moderate_min < severe_min"));
        }
        let e = &self.effusion_cm;
        if !(0.0 < e.moderate_min && e.moderate_min <= e.large_above) {
            return Err(ThresholdOrderError("effusion_cm: 0 < moderate_min <= large_above"));
        }
        Ok(())
    }

    pub fn grade_ef(&self, ef_pct: f64) -> Severity {
        let t = &self.ef;
        if ef_pct >= t.normal_min {
            Severity::Normal
        } else if ef_pct >= t.mild_min {
            Severity::Mild
        } else if ef_pct >= t.moderate_min {
            Severity::Moderate
        } else {
            Severity::Severe
        }
    }

    pub fn grade_lvh(&self, wall_thickness_mm: f64) -> Severity {
        let t = &self.lvh_mm;
        if wall_thickness_mm <= t.normal_max {
            Severity::Normal
        } else if wall_thickness_mm < t.moderate_min {
            Severity::Mild
        } else if wall_thickness_mm < t.severe_min {
            Severity::Moderate
        } else {
            Severity::Severe
        }
    }

    /// `Normal` reads as "no effusion"; `Mild` is small; `Severe` is large.
    pub fn grade_effusion(&self, effusion_cm: f64) -> Severity {
        let t = &self.effusion_cm;
        if effusion_cm <= 0.0 {
            Severity::Normal
        } else if effusion_cm < t.moderate_min {
            Severity::Mild
        } else if effusion_cm <= t.large_above {
            Severity::Moderate
        } else {
            Severity::Severe
        }
    }
}

/// Report wording for a graded finding.
pub fn severity_phrase(category: FindingCategory, severity: Severity) -> &'static str {
    use FindingCategory::*;
    use Severity::*;
    match (category, severity) {
        (LvSystolicFunction, Normal) => "normal",
        (LvSystolicFunction, Mild) => "mildly reduced",
        (LvSystolicFunction, Moderate) => "moderately reduced",
        (LvSystolicFunction, Severe) => "severely reduced",
        (PericardialEffusion, Normal) => "none",
        (PericardialEffusion, Mild) => "small",
        (PericardialEffusion, Moderate) => "moderate",
        (PericardialEffusion, Severe) => "large",
        (_, Normal) => "none",
        (_, Mild) => "mild",
        (_, Moderate) => "moderate",
        (_, Severe) => "severe",
    }
}

/// Words that identify a severity inside free-text answer options.
pub fn severity_keywords(category: FindingCategory, severity: Severity) -> &'static [&'static str] {
    use FindingCategory::*;
    use Severity::*;
    match (category, severity) {
        (PericardialEffusion, Normal) => &["no", "none", "absent"],
        (PericardialEffusion, Mild) => &["small", "trivial", "trace"],
        (PericardialEffusion, Severe) => &["large"],
        (LvSystolicFunction, Normal) => &["normal", "preserved"],
        (LvHypertrophy, Normal) => &["no", "none", "normal", "absent"],
        (_, Mild) => &["mild", "mildly"],
        (_, Moderate) => &["moderate", "moderately"],
        (_, Severe) => &["severe", "severely"],
        (_, Normal) => &["normal", "no", "none"],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ef_table() {
        let t = ClinicalThresholds::default();
        assert_eq!(t.grade_ef(55.0), Severity::Normal);
        assert_eq!(t.grade_ef(50.0), Severity::Normal);
        assert_eq!(t.grade_ef(49.9), Severity::Mild);
        assert_eq!(t.grade_ef(40.0), Severity::Mild);
        assert_eq!(t.grade_ef(35.0), Severity::Moderate);
        assert_eq!(t.grade_ef(30.0), Severity::Moderate);
        assert_eq!(t.grade_ef(29.9), Severity::Severe);
    }

    #[test]
    fn lvh_table() {
        let t = ClinicalThresholds::default();
        assert_eq!(t.grade_lvh(11.0), Severity::Normal);
        assert_eq!(t.grade_lvh(12.0), Severity::Mild);
        assert_eq!(t.grade_lvh(13.9), Severity::Mild);
        assert_eq!(t.grade_lvh(14.0), Severity::Moderate);
        assert_eq!(t.grade_lvh(16.9), Severity::Moderate);
        assert_eq!(t.grade_lvh(17.0), Severity::Severe);
    }

    #[test]
    fn effusion_table() {
        let t = ClinicalThresholds::default();
        assert_eq!(t.grade_effusion(0.0), Severity::Normal);
        assert_eq!(t.grade_effusion(0.5), Severity::Mild);
        assert_eq!(t.grade_effusion(1.0), Severity::Moderate);
        assert_eq!(t.grade_effusion(2.0), Severity::Moderate);
        assert_eq!(t.grade_effusion(2.01), Severity::Severe);
    }

    #[test]
    fn validation_catches_misordering() {
        assert!(ClinicalThresholds::default().validate().is_ok());
        let mut t = ClinicalThresholds::default();
        t.ef.mild_min = 55.0;
        assert!(t.validate().is_err());
        let mut t = ClinicalThresholds::default();
        t.lvh_mm.severe_min = 13.0;
        assert!(t.validate().is_err());
    }

    proptest! {
        #[test]
        fn grades_are_monotone(a in 0.0f64..100.0, b in 0.0f64..100.0) {
            let t = ClinicalThresholds::default();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(t.grade_ef(lo) >= t.grade_ef(hi));
            prop_assert!(t.grade_lvh(lo / 3.0) <= t.grade_lvh(hi / 3.0));
            prop_assert!(t.grade_effusion(lo / 25.0) <= t.grade_effusion(hi / 25.0));
        }
    }
}
