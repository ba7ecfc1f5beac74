//! JSON record of the per-part channel selection computed from the
//! in-context example.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::Span;
use crate::selection::Metric;

use super::Source;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceSelection {
    pub source: Source,
    pub k: usize,
    pub channels: Vec<usize>,
    pub sweep_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartSelection {
    pub name: String,
    pub per_source: Vec<SourceSelection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub metric: Metric,
    pub parts: Vec<PartSelection>,
}

impl SelectionRecord {
    /// Structural checks that need no knowledge of the feature layout.
    pub fn validate(&self) -> Result<()> {
        for part in &self.parts {
            for sel in &part.per_source {
                if sel.channels.len() != sel.k {
                    return Err(Error::Validation(format!(
                        "part '{}' source {}: k={} but {} channels listed",
                        part.name,
                        sel.source,
                        sel.k,
                        sel.channels.len()
                    )));
                }
                if sel.channels.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::Validation(format!(
                        "part '{}' source {}: channel indices must be strictly increasing",
                        part.name, sel.source
                    )));
                }
            }
        }
        Ok(())
    }

    /// Checks every index lies inside its source span and every part lists
    /// each span of the layout exactly once.
    pub fn validate_against(&self, names: &[String], layout: &[Span]) -> Result<()> {
        self.validate()?;
        if self.parts.len() != names.len() {
            return Err(Error::Validation(format!(
                "selection covers {} parts, masks have {}",
                self.parts.len(),
                names.len()
            )));
        }
        for (part, name) in self.parts.iter().zip(names) {
            if &part.name != name {
                return Err(Error::Validation(format!(
                    "selection part '{}' does not match mask part '{name}'",
                    part.name
                )));
            }
            if part.per_source.len() != layout.len() {
                return Err(Error::Validation(format!(
                    "part '{name}' lists {} sources, layout has {}",
                    part.per_source.len(),
                    layout.len()
                )));
            }
            for span in layout {
                let sel = part
                    .per_source
                    .iter()
                    .find(|s| s.source == span.source)
                    .ok_or_else(|| {
                        Error::Validation(format!("part '{name}' has no entry for {}", span.source))
                    })?;
                if let Some(&bad) = sel.channels.iter().find(|&&c| c >= span.len) {
                    return Err(Error::Validation(format!(
                        "part '{name}' source {}: channel {bad} out of range [0, {})",
                        span.source, span.len
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("selection record serializes");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> SelectionRecord {
        SelectionRecord {
            metric: Metric::Variance,
            parts: vec![PartSelection {
                name: "head".into(),
                per_source: vec![
                    SourceSelection {
                        source: Source::Sd,
                        k: 2,
                        channels: vec![1, 5],
                        sweep_accuracy: 0.875,
                    },
                    SourceSelection {
                        source: Source::Dino,
                        k: 1,
                        channels: vec![0],
                        sweep_accuracy: 1.0 / 3.0,
                    },
                ],
            }],
        }
    }

    #[test]
    fn schema_field_names() {
        let v: serde_json::Value = serde_json::from_str(&sample().to_json()).unwrap();
        assert_eq!(v["metric"], "variance");
        assert_eq!(v["parts"][0]["name"], "head");
        assert_eq!(v["parts"][0]["per_source"][0]["source"], "sd");
        assert_eq!(v["parts"][0]["per_source"][1]["channels"][0], 0);
        assert_eq!(v["parts"][0]["per_source"][0]["k"], 2);
    }

    #[test]
    fn json_round_trip_is_byte_stable() {
        let text = sample().to_json();
        let back: SelectionRecord = serde_json::from_str(&text).unwrap();
        assert_eq!(back, sample());
        assert_eq!(back.to_json(), text);
    }

    #[test]
    fn rejects_unsorted_channels() {
        let mut r = sample();
        r.parts[0].per_source[0].channels = vec![5, 1];
        assert!(matches!(r.validate(), Err(Error::Validation(_))));
    }

    #[test]
    fn rejects_out_of_range_channel() {
        let layout = [
            Span {
                source: Source::Sd,
                offset: 0,
                len: 4,
            },
            Span {
                source: Source::Dino,
                offset: 4,
                len: 4,
            },
        ];
        let err = sample()
            .validate_against(&["head".to_string()], &layout)
            .unwrap_err();
        assert!(err.to_string().contains("channel 5"));
    }
}
