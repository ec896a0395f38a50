//! Declarative chart specifications (Vega-Lite JSON) that point at the CSV
//! artifacts written next to them.

use serde_json::{json, Value};

#[derive(Clone, Debug)]
pub struct Channel {
    pub field: &'static str,
    pub kind: &'static str,
}

impl Channel {
    pub fn quantitative(field: &'static str) -> Self {
        Self {
            field,
            kind: "quantitative",
        }
    }

    pub fn nominal(field: &'static str) -> Self {
        Self {
            field,
            kind: "nominal",
        }
    }

    pub fn ordinal(field: &'static str) -> Self {
        Self {
            field,
            kind: "ordinal",
        }
    }

    fn to_json(&self) -> Value {
        json!({ "field": self.field, "type": self.kind })
    }
}

#[derive(Clone, Debug)]
pub struct ChartSpec {
    pub title: String,
    pub data: String,
    pub mark: &'static str,
    pub x: Channel,
    pub y: Channel,
    pub color: Option<Channel>,
    pub column: Option<Channel>,
    /// Aggregate applied to `y` (e.g. `median` across seeds).
    pub aggregate: Option<&'static str>,
}

impl ChartSpec {
    pub fn new(title: impl Into<String>, data: impl Into<String>, mark: &'static str, x: Channel, y: Channel) -> Self {
        Self {
            title: title.into(),
            data: data.into(),
            mark,
            x,
            y,
            color: None,
            column: None,
            aggregate: None,
        }
    }

    pub fn color(mut self, c: Channel) -> Self {
        self.color = Some(c);
        self
    }

    pub fn column(mut self, c: Channel) -> Self {
        self.column = Some(c);
        self
    }

    pub fn aggregate(mut self, op: &'static str) -> Self {
        self.aggregate = Some(op);
        self
    }

    pub fn to_json(&self) -> Value {
        let mut y = self.y.to_json();
        if let Some(op) = self.aggregate {
            y["aggregate"] = json!(op);
        }
        let mut enc = json!({ "x": self.x.to_json(), "y": y });
        if let Some(c) = &self.color {
            enc["color"] = c.to_json();
        }
        if let Some(c) = &self.column {
            enc["column"] = c.to_json();
        }
        json!({
            "$schema": "https://vega.github.io/schema/vega-lite/v5.json",
            "title": self.title,
            "data": { "url": self.data, "format": { "type": "csv" } },
            "mark": { "type": self.mark, "point": self.mark == "line" },
            "encoding": enc,
        })
    }

    pub fn render(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_json()).expect("chart serializes");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_references_data_and_fields() {
        let c = ChartSpec::new("t", "sweep.csv", "line", Channel::quantitative("strength"), Channel::quantitative("compression"))
            .color(Channel::nominal("task"))
            .aggregate("median");
        let v = c.to_json();
        assert_eq!(v["data"]["url"], "sweep.csv");
        assert_eq!(v["encoding"]["y"]["aggregate"], "median");
        assert_eq!(v["encoding"]["color"]["field"], "task");
    }
}
