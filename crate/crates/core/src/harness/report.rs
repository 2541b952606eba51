use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::engine::{Mode, TopK};
use crate::error::Result;

/// One decoding configuration evaluated over a corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    /// `None` for methods without drafting.
    pub k: Option<TopK>,
    pub mode: Mode,
    pub sequences: usize,
    pub sequence_accuracy: f64,
    pub bleu: f64,
    pub tokens: u64,
    pub layer_units: u64,
    /// Units of the pass that produced each sequence's first token.
    pub first_pass_units: u64,
    pub units_per_token: f64,
    /// Units per token excluding the first-token pass.
    pub steady_units_per_token: f64,
    pub drafts: u64,
    pub accepted: u64,
    pub acceptance_rate: Option<f64>,
    /// Mean wall-clock nanoseconds per generated token.
    pub altp_ns: f64,
    /// Base greedy units per token over this row's.
    pub relative_speed: f64,
    pub relative_wall_speed: f64,
}

impl ReportRow {
    pub fn label(&self) -> String {
        match self.k {
            Some(k) => format!("{}/{}/top-{k}", self.method, self.mode),
            None => format!("{}/{}", self.method, self.mode),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub rows: Vec<ReportRow>,
}

pub const BLEU_NOTE: &str =
    "BLEU: corpus BLEU-4 over content token ids, add-one smoothing for orders with no matches";

impl RunReport {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let rows = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self { rows })
    }

    /// Aligned text table, one line per row, followed by a methods × k
    /// summary of relative speed.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# {BLEU_NOTE}");
        let _ = writeln!(
            s,
            "{:<8} {:<6} {:>4} {:>7} {:>7} {:>9} {:>9} {:>7} {:>12} {:>8} {:>8}",
            "method",
            "mode",
            "k",
            "acc%",
            "BLEU",
            "units/tok",
            "steady",
            "alpha",
            "ALTP(ns)",
            "R.Speed",
            "R.Wall"
        );
        for r in &self.rows {
            let k = r.k.map_or("-".to_string(), |k| k.to_string());
            let alpha = r.acceptance_rate.map_or("-".to_string(), |a| format!("{a:.3}"));
            let _ = writeln!(
                s,
                "{:<8} {:<6} {:>4} {:>7.2} {:>7.2} {:>9.3} {:>9.3} {:>7} {:>12.0} {:>7.1}% {:>7.1}%",
                r.method,
                r.mode.to_string(),
                k,
                100.0 * r.sequence_accuracy,
                r.bleu,
                r.units_per_token,
                r.steady_units_per_token,
                alpha,
                r.altp_ns,
                100.0 * r.relative_speed,
                100.0 * r.relative_wall_speed
            );
        }
        let ks = [TopK::Finite(1), TopK::Finite(2), TopK::Finite(3), TopK::Infinite];
        let mut groups: Vec<(String, Mode)> = Vec::new();
        for r in &self.rows {
            if r.k.is_some() && !groups.contains(&(r.method.clone(), r.mode)) {
                groups.push((r.method.clone(), r.mode));
            }
        }
        if !groups.is_empty() {
            let _ = writeln!(s);
            let _ = write!(s, "{:<16}", "R.Speed");
            for k in ks {
                let _ = write!(s, " {:>14}", format!("top-{k}"));
            }
            let _ = writeln!(s);
            for (m, mode) in groups {
                let _ = write!(s, "{:<16}", format!("{m}/{mode}"));
                for k in ks {
                    let cell = self
                        .rows
                        .iter()
                        .find(|r| r.method == m && r.mode == mode && r.k == Some(k))
                        .map_or("-".to_string(), |r| {
                            format!(
                                "{:.1}% ({:.1})",
                                100.0 * r.relative_speed,
                                100.0 * r.sequence_accuracy
                            )
                        });
                    let _ = write!(s, " {cell:>14}");
                }
                let _ = writeln!(s);
            }
        }
        s
    }

    /// Checks that derived columns agree with the raw counts. Returns the
    /// first inconsistency found.
    pub fn check_consistency(&self) -> std::result::Result<(), String> {
        let base = self
            .rows
            .iter()
            .find(|r| r.method == "base" && r.mode == Mode::Greedy)
            .ok_or("no base greedy row")?;
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0);
        for r in &self.rows {
            let upt = r.layer_units as f64 / r.tokens as f64;
            if !close(upt, r.units_per_token) {
                return Err(format!(
                    "{}: units/token {} != {}",
                    r.label(),
                    r.units_per_token,
                    upt
                ));
            }
            let speed = base.units_per_token / r.units_per_token;
            if !close(speed, r.relative_speed) {
                return Err(format!(
                    "{}: relative speed {} != {}",
                    r.label(),
                    r.relative_speed,
                    speed
                ));
            }
            match (r.acceptance_rate, r.drafts) {
                (None, 0) => {}
                (Some(a), d) if d > 0 && close(a, r.accepted as f64 / d as f64) => {}
                _ => return Err(format!("{}: acceptance rate disagrees with counts", r.label())),
            }
        }
        if !close(base.relative_speed, 1.0) {
            return Err("base greedy relative speed is not 100%".into());
        }
        Ok(())
    }
}
