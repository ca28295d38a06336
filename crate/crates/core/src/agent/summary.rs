//! Daily and weekly per-source summaries shown to the user.

use std::collections::BTreeMap;

use chrono::{Days, FixedOffset, NaiveDate};
use serde::Serialize;

use crate::context_model::{descriptor, ContextEvent, ModelError, ValueKind};
use crate::time::local_date;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Day,
    /// Seven consecutive local dates ending at the given date.
    Week,
}

impl Granularity {
    pub fn range_ending(self, date: NaiveDate) -> (NaiveDate, NaiveDate) {
        match self {
            Granularity::Day => (date, date),
            Granularity::Week => (date - Days::new(6), date),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub source_id: String,
    pub start: NaiveDate,
    pub end: NaiveDate,
    /// `count` is the number of events; every numeric or boolean field `f`
    /// contributes `f.count`, `f.sum`, `f.min` and `f.max`.
    pub metrics: BTreeMap<String, f64>,
}

impl Summary {
    pub fn count(&self) -> u64 {
        self.metrics.get("count").copied().unwrap_or(0.0) as u64
    }

    pub fn sum(&self, field: &str) -> f64 {
        self.metrics
            .get(&format!("{field}.sum"))
            .copied()
            .unwrap_or(0.0)
    }

    pub fn min(&self, field: &str) -> Option<f64> {
        self.metrics.get(&format!("{field}.min")).copied()
    }

    pub fn max(&self, field: &str) -> Option<f64> {
        self.metrics.get(&format!("{field}.max")).copied()
    }
}

/// Folds the events of `source_id` whose local date lies in `[start, end]`.
pub fn summarize_events<'a>(
    events: impl IntoIterator<Item = &'a ContextEvent>,
    source_id: &str,
    start: NaiveDate,
    end: NaiveDate,
    zone: FixedOffset,
) -> Result<Summary, ModelError> {
    let desc = descriptor(source_id)?;
    let numeric: Vec<&str> = desc
        .payload_schema
        .iter()
        .filter(|f| matches!(f.kind, ValueKind::Integer | ValueKind::Real | ValueKind::Boolean))
        .map(|f| f.name)
        .collect();

    let mut metrics = BTreeMap::new();
    metrics.insert("count".to_string(), 0.0);
    for f in &numeric {
        metrics.insert(format!("{f}.count"), 0.0);
        metrics.insert(format!("{f}.sum"), 0.0);
    }
    for ev in events {
        if ev.source_id != source_id {
            continue;
        }
        let day = local_date(ev.timestamp, zone);
        if day < start || day > end {
            continue;
        }
        *metrics.get_mut("count").unwrap() += 1.0;
        for f in &numeric {
            let Some(v) = ev.payload.get(*f).and_then(|v| v.as_number()) else {
                continue;
            };
            *metrics.get_mut(&format!("{f}.count")).unwrap() += 1.0;
            *metrics.get_mut(&format!("{f}.sum")).unwrap() += v;
            let min = metrics.entry(format!("{f}.min")).or_insert(v);
            *min = min.min(v);
            let max = metrics.entry(format!("{f}.max")).or_insert(v);
            *max = max.max(v);
        }
    }
    Ok(Summary {
        source_id: source_id.to_string(),
        start,
        end,
        metrics,
    })
}

/// The single number shown for a source in the status line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Headline {
    Count,
    Sum(&'static str),
    Max(&'static str),
    Min(&'static str),
}

pub fn headline_of(source_id: &str) -> Result<Headline, ModelError> {
    descriptor(source_id)?;
    Ok(match source_id {
        "steps" => Headline::Sum("count"),
        "app_usage" => Headline::Sum("foreground_ms"),
        "app_traffic" => Headline::Sum("rx_bytes"),
        "calls_metadata" => Headline::Sum("duration_s"),
        "ambient_noise" => Headline::Max("level_db"),
        "ambient_light" => Headline::Max("lux"),
        "weather" => Headline::Max("temperature_c"),
        "battery" => Headline::Min("level_pct"),
        _ => Headline::Count,
    })
}

impl Headline {
    pub fn value(self, summary: &Summary) -> Option<f64> {
        match self {
            Headline::Count => Some(summary.count() as f64),
            Headline::Sum(f) => Some(summary.sum(f)),
            Headline::Max(f) => summary.max(f),
            Headline::Min(f) => summary.min(f),
        }
    }
}

pub fn format_number(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v:.1}")
    }
}

/// Text tile in the style of the main screen: source, range and metrics.
pub fn render_tile(summary: &Summary) -> String {
    let mut out = String::new();
    let range = if summary.start == summary.end {
        summary.start.to_string()
    } else {
        format!("{} .. {}", summary.start, summary.end)
    };
    out.push_str(&format!("+-- {} [{}]\n", summary.source_id, range));
    out.push_str(&format!("|   events: {}\n", summary.count()));
    let mut fields: Vec<&str> = summary
        .metrics
        .keys()
        .filter_map(|k| k.strip_suffix(".sum"))
        .collect();
    fields.dedup();
    for f in fields {
        let mut line = format!("|   {f}: sum {}", format_number(summary.sum(f)));
        if let (Some(min), Some(max)) = (summary.min(f), summary.max(f)) {
            line.push_str(&format!(
                ", min {}, max {}",
                format_number(min),
                format_number(max)
            ));
        }
        out.push_str(&line);
        out.push('\n');
    }
    out.push_str("+--\n");
    out
}
