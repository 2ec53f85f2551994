//! Structured pass/fail records for every numerical check in the crate.

use serde::{Deserialize, Serialize};

/// One labelled residual compared against its tolerance.
///
/// A tolerance of `None` marks an informational value (serialized as `null`)
/// that only has to be finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    pub label: String,
    pub value: f64,
    pub tol: Option<f64>,
    pub level: Option<usize>,
    pub node: Option<usize>,
}

impl Residual {
    pub fn new(label: impl Into<String>, value: f64, tol: f64) -> Self {
        Self { label: label.into(), value, tol: Some(tol), level: None, node: None }
    }

    pub fn info(label: impl Into<String>, value: f64) -> Self {
        Self { label: label.into(), value, tol: None, level: None, node: None }
    }

    pub fn at(mut self, level: usize, node: usize) -> Self {
        self.level = Some(level);
        self.node = Some(node);
        self
    }

    pub fn at_level(mut self, level: usize) -> Self {
        self.level = Some(level);
        self
    }

    pub fn passes(&self) -> bool {
        match self.tol {
            Some(tol) => self.value <= tol,
            None => self.value.is_finite(),
        }
    }

    /// How badly the residual misses its tolerance; `<= 1` means it passes.
    fn severity(&self) -> f64 {
        match self.tol {
            _ if self.value.is_nan() => f64::INFINITY,
            Some(tol) if tol > 0.0 => self.value / tol,
            Some(_) if self.value <= 0.0 => 0.0,
            Some(_) => f64::INFINITY,
            None if self.value.is_finite() => 0.0,
            None => f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub name: String,
    pub pass: bool,
    pub residuals: Vec<Residual>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl CheckReport {
    pub fn new(name: impl Into<String>) -> Self {
        Self { name: name.into(), pass: true, residuals: Vec::new(), notes: Vec::new() }
    }

    pub fn push(&mut self, residual: Residual) {
        self.pass &= residual.passes();
        self.residuals.push(residual);
    }

    pub fn note(&mut self, text: impl Into<String>) {
        self.notes.push(text.into());
    }

    /// Folds a sub-report in, prefixing its labels.
    pub fn absorb(&mut self, other: CheckReport) {
        for mut r in other.residuals {
            r.label = format!("{}/{}", other.name, r.label);
            self.push(r);
        }
        self.notes.extend(other.notes);
    }

    /// The residual that misses its tolerance by the widest margin.
    pub fn worst(&self) -> Option<&Residual> {
        self.residuals.iter().max_by(|a, b| a.severity().total_cmp(&b.severity()))
    }

    pub fn max_value(&self, label_prefix: &str) -> f64 {
        self.residuals.iter().filter(|r| r.label.starts_with(label_prefix)).map(|r| r.value).fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pass_tracks_all_residuals() {
        let mut r = CheckReport::new("x");
        r.push(Residual::new("a", 1e-15, 1e-14));
        assert!(r.pass);
        r.push(Residual::info("moment", 3.0));
        assert!(r.pass);
        r.push(Residual::new("b", 2.0, 1.0).at(1, 3));
        assert!(!r.pass);
        let worst = r.worst().unwrap();
        assert_eq!(worst.label, "b");
        assert_eq!(worst.node, Some(3));
    }

    #[test]
    fn nan_never_passes() {
        let mut r = CheckReport::new("x");
        r.push(Residual::new("nan", f64::NAN, 1.0));
        assert!(!r.pass);
    }

    #[test]
    fn json_shape() {
        let mut r = CheckReport::new("demo");
        r.push(Residual::new("a", 0.5, 1.0).at(0, 0));
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(v["name"], "demo");
        assert_eq!(v["pass"], true);
        assert_eq!(v["residuals"][0]["label"], "a");
        assert_eq!(v["residuals"][0]["level"], 0);
        assert!(v.get("notes").is_none());
    }
}
