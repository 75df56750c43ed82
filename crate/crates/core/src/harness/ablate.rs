//! The four-row component ablation.
//!
//! Every row trains on the same bank and data splits with the same list of
//! seeds. Outputs under `out`:
//!
//! - `<label>/seed-<s>/...`: one training run directory per row and seed
//! - `ablation.csv`: schema line, header, one line per row in [`Ablation::ROWS`] order
//! - `ablation.md`: the same table in Markdown
//!
//! `ablation.csv` columns: `reasoner,relation,parameters,ap_median,ap_per_seed,foggy_ap_median,foggy_ap_per_seed`
//! (AP in percent, per-seed values joined by `;`, `n/a` when undefined).

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::train::{prepare_bank, run_training_on, Dataset};
use super::{fmt_opt, write_file, write_json, Result, RunConfig};
use crate::detector::Ablation;

pub const ABLATION_SCHEMA: &str = "langdet-ablation/1";
pub const ABLATION_HEADER: &str =
    "reasoner,relation,parameters,ap_median,ap_per_seed,foggy_ap_median,foggy_ap_per_seed";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub ablation: Ablation,
    pub parameters: usize,
    pub seeds: Vec<u64>,
    /// Final mAP (percent) per seed.
    pub ap: Vec<Option<f64>>,
    /// Final mAP (percent) on the foggy eval subset per seed.
    pub foggy_ap: Vec<Option<f64>>,
}

/// Median of the defined values; `None` if any value is undefined.
pub fn median(values: &[Option<f64>]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().collect::<Option<_>>()?;
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

impl AblationRow {
    pub fn median_ap(&self) -> Option<f64> {
        median(&self.ap)
    }

    pub fn median_foggy_ap(&self) -> Option<f64> {
        median(&self.foggy_ap)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub iou_threshold: f64,
    pub rows: Vec<AblationRow>,
}

fn join(values: &[Option<f64>]) -> String {
    values.iter().map(|v| fmt_opt(*v, 4)).collect::<Vec<_>>().join(";")
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

impl AblationTable {
    pub fn row(&self, a: Ablation) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.ablation == a)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("# schema={ABLATION_SCHEMA}\n{ABLATION_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                on_off(r.ablation.reasoner),
                on_off(r.ablation.relation),
                r.parameters,
                fmt_opt(r.median_ap(), 4),
                join(&r.ap),
                fmt_opt(r.median_foggy_ap(), 4),
                join(&r.foggy_ap)
            );
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!(
            "| Reasoner | Relation loss | AP@{:.1} (median) | Foggy AP (median) | Parameters |\n|---|---|---|---|---|\n",
            self.iou_threshold
        );
        for r in &self.rows {
            let mark = |b: bool| if b { "✓" } else { "" };
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} |",
                mark(r.ablation.reasoner),
                mark(r.ablation.relation),
                fmt_opt(r.median_ap(), 2),
                fmt_opt(r.median_foggy_ap(), 2),
                r.parameters
            );
        }
        s
    }

    /// The directional ordering checks, as `(description, holds)`.
    pub fn directional_checks(&self) -> Vec<(String, bool)> {
        let ap = |a: Ablation| self.row(a).and_then(AblationRow::median_ap);
        let reasoner = Ablation { reasoner: true, relation: false };
        let relation = Ablation { reasoner: false, relation: true };
        let (base, r, l, both) = (ap(Ablation::BASELINE), ap(reasoner), ap(relation), ap(Ablation::FULL));
        let cmp = |a: Option<f64>, b: Option<f64>, margin: f64| matches!((a, b), (Some(a), Some(b)) if a >= b + margin);
        vec![
            (format!("AP(both) {} >= AP(reasoner only) {}", fmt_opt(both, 2), fmt_opt(r, 2)), cmp(both, r, 0.0)),
            (format!("AP(both) {} >= AP(relation only) {}", fmt_opt(both, 2), fmt_opt(l, 2)), cmp(both, l, 0.0)),
            (format!("AP(reasoner only) {} >= AP(baseline) {} - 0.5", fmt_opt(r, 2), fmt_opt(base, 2)), cmp(r, base, -0.5)),
            (format!("AP(relation only) {} >= AP(baseline) {} - 0.5", fmt_opt(l, 2), fmt_opt(base, 2)), cmp(l, base, -0.5)),
            (format!("AP(both) {} >= AP(baseline) {} + 1.0", fmt_opt(both, 2), fmt_opt(base, 2)), cmp(both, base, 1.0)),
        ]
    }
}

/// Trains every row of [`Ablation::ROWS`] for each seed and writes the table.
pub fn run_ablation(config: &RunConfig, seeds: &[u64], out: &Path) -> Result<AblationTable> {
    config.validate()?;
    let bank = prepare_bank(config, out)?;
    let train = Dataset::generate(config.data.train_size, config.data.train_seed, config)?;
    let eval = Dataset::generate(config.data.eval_size, config.data.eval_seed, config)?;
    let foggy = eval.manifest.subsets().remove("weather=foggy").unwrap_or_default();
    let mut rows = Vec::new();
    for ablation in Ablation::ROWS {
        let mut row = AblationRow { ablation, parameters: 0, seeds: seeds.to_vec(), ap: Vec::new(), foggy_ap: Vec::new() };
        for &seed in seeds {
            let mut cfg = config.clone();
            cfg.ablation = ablation;
            cfg.seed = seed;
            let dir = out.join(ablation.label().replace(',', "_")).join(format!("seed-{seed}"));
            let outcome = run_training_on(&cfg, &dir, &bank, &train, &eval)?;
            row.parameters = outcome.summary.parameter_count;
            row.ap.push(outcome.summary.final_ap);
            row.foggy_ap.push(outcome.subset_ap(&foggy, cfg.model.num_classes));
        }
        rows.push(row);
    }
    let table = AblationTable { iou_threshold: config.iou_threshold(), rows };
    write_file(&out.join("ablation.csv"), table.to_csv())?;
    write_file(&out.join("ablation.md"), table.to_markdown())?;
    write_json(&out.join("ablation.json"), &table)?;
    Ok(table)
}
