use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::report::EvalReport;
use crate::degrade::{DegradationFamily, PairedSample};
use crate::error::{Error, IoContext, Result};
use crate::pipeline::{finetune_run, pretrain_run, ExperimentConfig, FinetuneInit};

pub const ABLATION_TABLE: &str = "ablation.tsv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AblationAxis {
    MaskRatio,
    PatchSize,
    MaskMethod,
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::MaskRatio => "MASK_RATIO",
            AblationAxis::PatchSize => "PATCH_SIZE",
            AblationAxis::MaskMethod => "MASK_METHOD",
        }
    }

    /// Arms in table order.
    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            AblationAxis::MaskRatio => &["0", "0.25", "0.5", "0.75"],
            AblationAxis::PatchSize => &["1", "4", "16", "32"],
            AblationAxis::MaskMethod => &["SQUARE", "BLOCK_WISE", "RANDOM"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    /// Copy of `base` with this axis set to `value` in the pre-training config.
    pub fn apply(self, base: &ExperimentConfig, value: &str) -> Result<ExperimentConfig> {
        let mut cfg = base.clone();
        let bad = || Error::InvalidParameter(format!("{value:?} is not a valid {} value", self.name()));
        match self {
            AblationAxis::MaskRatio => {
                let r: f64 = value.parse().map_err(|_| bad())?;
                if !(0.0..=1.0).contains(&r) {
                    return Err(bad());
                }
                cfg.pretrain.mask_ratio = r;
            }
            AblationAxis::PatchSize => cfg.pretrain.mask_patch = value.parse().map_err(|_| bad())?,
            AblationAxis::MaskMethod => cfg.pretrain.mask_method = value.parse().map_err(|_| bad())?,
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "MASK_RATIO" | "RATIO" => Ok(AblationAxis::MaskRatio),
            "PATCH_SIZE" | "PATCH" => Ok(AblationAxis::PatchSize),
            "MASK_METHOD" | "METHOD" => Ok(AblationAxis::MaskMethod),
            _ => Err(Error::InvalidParameter(format!("unknown ablation axis {s:?}"))),
        }
    }
}

impl std::fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub value: String,
    pub report: EvalReport,
}

/// Tab-separated comparison: one row per arm, PSNR per family then averages.
pub fn ablation_table(axis: AblationAxis, rows: &[AblationRow]) -> String {
    let families: Vec<DegradationFamily> = {
        let mut f: Vec<_> = rows.iter().flat_map(|r| r.report.families.keys().copied()).collect();
        f.sort();
        f.dedup();
        f
    };
    let mut s = String::from(axis.name());
    for f in &families {
        let _ = write!(s, "\t{}", f.abbrev());
    }
    s.push_str("\tavg_psnr\tavg_ssim\n");
    for r in rows {
        s.push_str(&r.value);
        for f in &families {
            match r.report.families.get(f) {
                Some(m) => {
                    let _ = write!(s, "\t{:.4}", m.psnr);
                }
                None => s.push_str("\t-"),
            }
        }
        let p = r.report.average_psnr().unwrap_or(f64::NAN);
        let q = r.report.average_ssim().unwrap_or(f64::NAN);
        let _ = writeln!(s, "\t{p:.4}\t{q:.4}");
    }
    s
}

/// Pre-train then fine-tune once per value, writing each arm under `out_dir/<axis>_<value>` and
/// rewriting the comparison table after every finished arm.
pub fn run_ablation(
    axis: AblationAxis,
    values: &[String],
    base: &ExperimentConfig,
    samples: &[PairedSample],
    out_dir: &Path,
) -> Result<Vec<AblationRow>> {
    if values.is_empty() {
        return Err(Error::InvalidParameter("ablation needs at least one value".into()));
    }
    let configs = values.iter().map(|v| axis.apply(base, v)).collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(out_dir).at(out_dir)?;
    let table_path = out_dir.join(ABLATION_TABLE);
    let mut rows = Vec::new();
    for (value, cfg) in values.iter().zip(&configs) {
        log::info!("ablation {axis} = {value}");
        let arm = out_dir.join(format!("{}_{}", axis.name().to_ascii_lowercase(), value.to_ascii_lowercase()));
        let pre = pretrain_run(&cfg.pretrain, samples, &arm.join("pretrain"))?;
        let fine = finetune_run(&cfg.finetune, samples, &FinetuneInit::Checkpoint(pre.checkpoint), &arm.join("finetune"))?;
        rows.push(AblationRow {
            value: value.clone(),
            report: fine.report,
        });
        std::fs::write(&table_path, ablation_table(axis, &rows)).at(&table_path)?;
    }
    Ok(rows)
}

/// Switch an experiment to the full-size training budgets: 100k pre-training iterations at
/// batch 16 on 256×256 crops with 16×16 patches.
pub fn full_scale(cfg: &mut ExperimentConfig) {
    cfg.pretrain.iterations = 100_000;
    cfg.pretrain.batch_size = 16;
    cfg.pretrain.crop_size = 256;
    cfg.pretrain.mask_patch = 16;
    cfg.finetune.iterations = 100_000;
    cfg.finetune.batch_size = 16;
    cfg.finetune.crop_size = 256;
}
