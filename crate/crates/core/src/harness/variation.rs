//! AP per scene-attribute subset of an evaluation split.
//!
//! `variation.csv` columns: `subset,images,ap` (AP in percent, `n/a` for
//! subsets without images or without ground truth). The first data row is
//! the whole split, labelled `all`.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::train::{Dataset, Session};
use super::{fmt_opt, write_file, HarnessError, Result, RunConfig};
use crate::bank::load_frozen;
use crate::detector::{checkpoint, ApReport, ImageRecord};
use crate::synth::{load_manifest, Manifest};

pub const VARIATION_SCHEMA: &str = "langdet-variation/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetAp {
    pub subset: String,
    pub images: usize,
    /// mAP in percent; `None` when undefined.
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationReport {
    pub overall: SubsetAp,
    pub subsets: Vec<SubsetAp>,
}

impl VariationReport {
    /// Report from per-image match records aligned with the manifest samples.
    pub fn from_records(records: &[ImageRecord], manifest: &Manifest, num_classes: usize) -> Self {
        let ap = |idx: &[usize]| ApReport::subset(records, idx, num_classes).mean.map(|v| 100.0 * v);
        let all: Vec<usize> = (0..records.len()).collect();
        let overall = SubsetAp { subset: "all".into(), images: all.len(), ap: ap(&all) };
        let subsets = manifest
            .subsets()
            .into_iter()
            .map(|(subset, idx)| SubsetAp { images: idx.len(), ap: if idx.is_empty() { None } else { ap(&idx) }, subset })
            .collect();
        Self { overall, subsets }
    }

    pub fn get(&self, subset: &str) -> Option<&SubsetAp> {
        self.subsets.iter().find(|s| s.subset == subset)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("# schema={VARIATION_SCHEMA}\nsubset,images,ap\n");
        for r in std::iter::once(&self.overall).chain(&self.subsets) {
            let _ = writeln!(s, "{},{},{}", r.subset, r.images, fmt_opt(r.ap, 4));
        }
        s
    }
}

/// Evaluates a trained run directory (`config.toml`, `bank.json`,
/// `checkpoint.json`) on a manifest, or on the run's own eval split when no
/// manifest is given. Writes `variation.csv` under `out`.
pub fn eval_by_variation(run: &Path, manifest: Option<&Path>, out: &Path) -> Result<VariationReport> {
    let config = RunConfig::load(&run.join("config.toml"))?;
    let bank = load_frozen(run.join("bank.json"))?;
    let session = Session::new(config.clone(), Some(&bank))?;
    let store = checkpoint::load(&run.join("checkpoint.json"))?;
    let expected: Vec<String> = session.init_params().names().map(str::to_string).collect();
    let found: Vec<String> = store.names().map(str::to_string).collect();
    if expected != found {
        return Err(HarnessError::Incompatible("checkpoint parameters do not match the run configuration".into()));
    }
    let data = match manifest {
        Some(path) => {
            let m = load_manifest(path)?;
            if m.style != config.style {
                return Err(HarnessError::Incompatible(format!(
                    "manifest style {} differs from run style {}",
                    m.style, config.style
                )));
            }
            Dataset::from_manifest(m)?
        }
        None => Dataset::generate(config.data.eval_size, config.data.eval_seed, &config)?,
    };
    let (records, _) = session.evaluate(&store, &data)?;
    let report = VariationReport::from_records(&records, &data.manifest, config.model.num_classes);
    write_file(&out.join("variation.csv"), report.to_csv())?;
    Ok(report)
}
