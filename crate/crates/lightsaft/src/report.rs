//! Plain-text tables and verdicts for reports; JSON comes from serde.

use std::fmt::Write;

use lightsaft_core::eval::SdrReport;
use lightsaft_core::model::{Condition, ParamBreakdown, Variant};
use serde::{Deserialize, Serialize};

use crate::infer::BudgetReport;

/// Band the LightSAFT count must fall into at the reference config.
pub const LIGHTSAFT_RANGE: (usize, usize) = (3_400_000, 4_200_000);
/// Largest allowed LightSAFT+ / LightSAFT count ratio.
pub const PLUS_RATIO_MAX: f64 = 0.65;

fn render(header: &[String], rows: &[Vec<String>]) -> String {
    let widths: Vec<usize> = (0..header.len())
        .map(|i| rows.iter().map(|r| r[i].len()).chain([header[i].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: &[String]| {
        let mut s = String::new();
        for (i, c) in cells.iter().enumerate() {
            if i == 0 {
                let _ = write!(s, "{c:<w$}", w = widths[i]);
            } else {
                let _ = write!(s, "  {c:>w$}", w = widths[i]);
            }
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(header);
    out += &(widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  ") + "\n");
    for r in rows {
        out += &line(r);
    }
    out
}

/// One row per model: name, parameter count, per-source SDR and average.
pub fn sdr_table(rows: &[(String, Option<usize>, &SdrReport)]) -> String {
    let mut header = vec!["model".to_string(), "# params".to_string()];
    header.extend(Condition::ALL.iter().map(|c| c.name().to_string()));
    header.push("avg".into());
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|(name, params, r)| {
            let mut row = vec![name.clone(), params.map_or("-".into(), |p| p.to_string())];
            row.extend(r.per_source.iter().map(|s| s.map_or("-".into(), |v| format!("{v:.3}"))));
            row.push(format!("{:.3}", r.average));
            row
        })
        .collect();
    render(&header, &body)
}

pub fn breakdown_table(b: &ParamBreakdown) -> String {
    let mut rows: Vec<Vec<String>> = b.modules.iter().map(|(m, n)| vec![m.clone(), n.to_string()]).collect();
    rows.push(vec!["total".into(), b.total.to_string()]);
    render(&["module".into(), "params".into()], &rows)
}

pub fn budget_table(reports: &[BudgetReport]) -> String {
    let header = ["variant", "audio s", "wall s", "rtf", "budget", "threads", "result"].map(String::from);
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.variant.clone(),
                format!("{:.2}", r.track_seconds),
                format!("{:.3}", r.wall_seconds),
                format!("{:.4}", r.rtf),
                format!("{}", r.budget_rtf),
                r.threads.to_string(),
                if r.passed { "PASS" } else { "FAIL" }.into(),
            ]
        })
        .collect();
    render(&header, &rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingVerdict {
    pub lasaft: usize,
    pub lightsaft: usize,
    pub lightsaft_plus: usize,
    /// lasaft > lightsaft > lightsaft_plus.
    pub ordered: bool,
    pub lightsaft_in_range: bool,
    pub plus_ratio: f64,
    pub ratio_ok: bool,
}

impl OrderingVerdict {
    /// `counts` in [`Variant::ALL`] order.
    pub fn new(counts: [usize; 3]) -> Self {
        let [lasaft, lightsaft, lightsaft_plus] = counts;
        let plus_ratio = lightsaft_plus as f64 / lightsaft as f64;
        Self {
            lasaft,
            lightsaft,
            lightsaft_plus,
            ordered: lasaft > lightsaft && lightsaft > lightsaft_plus,
            lightsaft_in_range: (LIGHTSAFT_RANGE.0..=LIGHTSAFT_RANGE.1).contains(&lightsaft),
            plus_ratio,
            ratio_ok: plus_ratio <= PLUS_RATIO_MAX,
        }
    }

    pub fn passed(&self) -> bool {
        self.ordered
    }

    pub fn summary(&self) -> String {
        let pf = |b: bool| if b { "PASS" } else { "FAIL" };
        format!(
            "ordering {} > {} > {} ({} > {} > {}): {}\n",
            Variant::Lasaft,
            Variant::Lightsaft,
            Variant::LightsaftPlus,
            self.lasaft,
            self.lightsaft,
            self.lightsaft_plus,
            pf(self.ordered)
        ) + &format!(
            "lightsaft in [{}, {}]: {}\nlightsaft_plus / lightsaft = {:.3} <= {}: {}\n",
            LIGHTSAFT_RANGE.0,
            LIGHTSAFT_RANGE.1,
            pf(self.lightsaft_in_range),
            self.plus_ratio,
            PLUS_RATIO_MAX,
            pf(self.ratio_ok)
        )
    }
}
