use serde::{Deserialize, Serialize};

use super::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TouPeriod {
    pub start_hour: f64,
    pub end_hour: f64,
    /// $/kWh.
    pub price: f64,
}

/// A daily time-of-use tariff: periods covering `[0, 24)` hours without
/// gaps or overlaps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TouSchedule {
    #[serde(default)]
    pub label: String,
    pub periods: Vec<TouPeriod>,
}

impl TouSchedule {
    /// Sorts the periods and checks coverage.
    pub fn new(label: impl Into<String>, mut periods: Vec<TouPeriod>) -> Result<Self, HarnessError> {
        periods.sort_by(|a, b| a.start_hour.total_cmp(&b.start_hour));
        let out = Self { label: label.into(), periods };
        out.validate()?;
        Ok(out)
    }

    pub fn flat(price: f64) -> Self {
        Self { label: "flat".into(), periods: vec![TouPeriod { start_hour: 0.0, end_hour: 24.0, price }] }
    }

    /// Off-peak 0.15, partial-peak 0.35 and peak 0.45 $/kWh, peak from
    /// 16:00 to 21:00. Illustrative rates, not a real tariff.
    pub fn default_bev() -> Self {
        let p = |start_hour, end_hour, price| TouPeriod { start_hour, end_hour, price };
        Self {
            label: "illustrative BEV-style schedule".into(),
            periods: vec![
                p(0.0, 14.0, 0.15),
                p(14.0, 16.0, 0.35),
                p(16.0, 21.0, 0.45),
                p(21.0, 23.0, 0.35),
                p(23.0, 24.0, 0.15),
            ],
        }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let raw: TouSchedule = toml::from_str(text).map_err(|e| HarnessError::Parse(e.to_string()))?;
        Self::new(raw.label, raw.periods)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Invalid(format!("tariff: {m}")));
        let mut sorted = self.periods.clone();
        sorted.sort_by(|a, b| a.start_hour.total_cmp(&b.start_hour));
        let mut at = 0.0;
        for p in &sorted {
            if p.start_hour != at {
                return bad(format!("gap or overlap at hour {at}"));
            }
            if !(p.end_hour > p.start_hour) {
                return bad(format!("empty period starting at {}", p.start_hour));
            }
            if !(p.price >= 0.0) || !p.price.is_finite() {
                return bad(format!("price {} is not a non-negative number", p.price));
            }
            at = p.end_hour;
        }
        if at != 24.0 {
            return bad(format!("periods end at hour {at}, not 24"));
        }
        Ok(())
    }

    /// Price in force at `hour` (taken modulo 24).
    pub fn price_at(&self, hour: f64) -> f64 {
        let h = hour.rem_euclid(24.0);
        self.periods
            .iter()
            .find(|p| p.start_hour <= h && h < p.end_hour)
            .map(|p| p.price)
            .expect("validated schedule covers the day")
    }

    /// One price per step, each taken at the step's start.
    pub fn expand(&self, horizon: usize, dt_hours: f64) -> Vec<f64> {
        (0..horizon).map(|t| self.price_at(t as f64 * dt_hours)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn period(start_hour: f64, end_hour: f64, price: f64) -> TouPeriod {
        TouPeriod { start_hour, end_hour, price }
    }

    #[test]
    fn expands_at_step_starts() {
        let s = TouSchedule::new("t", vec![period(16.0, 21.0, 0.45), period(0.0, 16.0, 0.15), period(21.0, 24.0, 0.3)])
            .unwrap();
        let p = s.expand(96, 0.25);
        assert_eq!(p[63], 0.15);
        assert_eq!(p[64], 0.45);
        assert_eq!(p[83], 0.45);
        assert_eq!(p[84], 0.3);
    }

    #[test]
    fn rejects_gaps_and_overlaps() {
        assert!(TouSchedule::new("g", vec![period(0.0, 10.0, 0.1), period(11.0, 24.0, 0.2)]).is_err());
        assert!(TouSchedule::new("o", vec![period(0.0, 12.0, 0.1), period(11.0, 24.0, 0.2)]).is_err());
        assert!(TouSchedule::new("s", vec![period(0.0, 23.0, 0.1)]).is_err());
        assert!(TouSchedule::new("n", vec![period(0.0, 24.0, -0.1)]).is_err());
    }

    #[test]
    fn default_schedule_is_valid() {
        let s = TouSchedule::default_bev();
        s.validate().unwrap();
        assert_eq!(s.price_at(16.0), 0.45);
        assert_eq!(s.price_at(20.99), 0.45);
        assert_eq!(s.price_at(23.5), 0.15);
    }

    #[test]
    fn parses_toml() {
        let s = TouSchedule::from_toml_str(
            "label = \"x\"\n[[periods]]\nstart_hour = 0\nend_hour = 24\nprice = 0.2\n",
        )
        .unwrap();
        assert_eq!(s, TouSchedule::flat(0.2).with_label("x"));
    }
}
