use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::metrics::{psnr, ssim};
use crate::degrade::{DegradationFamily, PairedSample};
use crate::error::{Error, IoContext, Result};
use crate::model::RestorationModel;

/// Serializes non-finite values as the strings `"inf"`, `"-inf"` and `"nan"`.
mod sentinel {
    use super::*;

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Tag(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Tag(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("unknown numeric tag {other:?}"))),
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyMetrics {
    /// Mean of per-image PSNR (dB).
    #[serde(with = "sentinel")]
    pub psnr: f64,
    pub ssim: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub families: BTreeMap<DegradationFamily, FamilyMetrics>,
    pub config_digest: String,
    pub checkpoint_digest: String,
    pub timestamp_unix: u64,
}

pub fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl EvalReport {
    pub fn new(families: BTreeMap<DegradationFamily, FamilyMetrics>, config_digest: String, checkpoint_digest: String) -> Self {
        Self {
            families,
            config_digest,
            checkpoint_digest,
            timestamp_unix: unix_now(),
        }
    }

    /// Unweighted mean over families; `None` without families.
    pub fn average_psnr(&self) -> Option<f64> {
        (!self.families.is_empty())
            .then(|| self.families.values().map(|m| m.psnr).sum::<f64>() / self.families.len() as f64)
    }

    pub fn average_ssim(&self) -> Option<f64> {
        (!self.families.is_empty())
            .then(|| self.families.values().map(|m| m.ssim).sum::<f64>() / self.families.len() as f64)
    }

    pub fn total_count(&self) -> usize {
        self.families.values().map(|m| m.count).sum()
    }

    /// Aligned plain-text table. Carries no timestamp, so equal runs give equal text.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "config     {}", self.config_digest);
        let _ = writeln!(s, "checkpoint {}", self.checkpoint_digest);
        let _ = writeln!(s, "{:<16}{:>7}{:>12}{:>10}", "family", "count", "psnr_db", "ssim");
        for (f, m) in &self.families {
            let _ = writeln!(s, "{:<16}{:>7}{:>12.4}{:>10.4}", f.name(), m.count, m.psnr, m.ssim);
        }
        if let (Some(p), Some(q)) = (self.average_psnr(), self.average_ssim()) {
            let _ = writeln!(s, "{:<16}{:>7}{:>12.4}{:>10.4}", "AVERAGE", self.total_count(), p, q);
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Per-family mean PSNR/SSIM of the model's restorations against ground truth.
pub fn evaluate(model: &RestorationModel, samples: &[&PairedSample]) -> Result<BTreeMap<DegradationFamily, FamilyMetrics>> {
    let scores = samples
        .par_iter()
        .map(|s| {
            let out = model.restore(&s.lq)?;
            Ok((s.family(), psnr(&out, &s.gt, 1.0)?, ssim(&out, &s.gt)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate(&scores))
}

/// Fold `(family, psnr, ssim)` triples into per-family means, in input order.
pub fn aggregate(scores: &[(DegradationFamily, f64, f64)]) -> BTreeMap<DegradationFamily, FamilyMetrics> {
    let mut sums: BTreeMap<DegradationFamily, (f64, f64, usize)> = BTreeMap::new();
    for (f, p, q) in scores {
        let e = sums.entry(*f).or_insert((0.0, 0.0, 0));
        e.0 += p;
        e.1 += q;
        e.2 += 1;
    }
    sums.into_iter()
        .map(|(f, (p, q, n))| {
            (
                f,
                FamilyMetrics {
                    psnr: p / n as f64,
                    ssim: q / n as f64,
                    count: n,
                },
            )
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Text,
}

/// Write `<stem>.json` and/or `<stem>.txt` into `dir`.
pub fn emit_report(report: &EvalReport, dir: &Path, stem: &str, formats: &[ReportFormat]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).at(dir)?;
    let mut out = Vec::new();
    for f in formats {
        let (path, body) = match f {
            ReportFormat::Json => (dir.join(format!("{stem}.json")), report.to_json()),
            ReportFormat::Text => (dir.join(format!("{stem}.txt")), report.table()),
        };
        std::fs::write(&path, body).at(&path)?;
        out.push(path);
    }
    Ok(out)
}

pub fn parse_report(path: &Path) -> Result<EvalReport> {
    EvalReport::from_json(&std::fs::read_to_string(path).at(path)?)
}

/// SVG line chart with one line per named series.
pub fn line_chart(path: &Path, title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> Result<()> {
    let pts = || series.iter().flat_map(|(_, s)| s.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    if pts().next().is_none() {
        return Err(Error::InvalidInput("chart needs at least one finite point".into()));
    }
    let span = |lo: f64, hi: f64| if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
    let (x0, x1) = span(pts().map(|p| p.0).fold(f64::MAX, f64::min), pts().map(|p| p.0).fold(f64::MIN, f64::max));
    let (y0, y1) = span(pts().map(|p| p.1).fold(f64::MAX, f64::min), pts().map(|p| p.1).fold(f64::MIN, f64::max));
    let draw = || -> std::result::Result<(), Box<dyn std::error::Error>> {
        let root = SVGBackend::new(path, (720, 440)).into_drawing_area();
        root.fill(&WHITE)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(56)
            .build_cartesian_2d(x0..x1, y0..y1)?;
        chart.configure_mesh().x_desc(x_label).y_desc(y_label).draw()?;
        for (i, (name, s)) in series.iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            chart
                .draw_series(LineSeries::new(s.iter().copied(), color.stroke_width(2)))?
                .label(name.as_str())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        }
        if series.len() > 1 {
            chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw()?;
        }
        root.present()?;
        Ok(())
    };
    draw().map_err(|e| Error::InvalidInput(format!("chart {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> EvalReport {
        let mut fam = BTreeMap::new();
        fam.insert(DegradationFamily::Haze, FamilyMetrics { psnr: f64::INFINITY, ssim: 1.0, count: 2 });
        fam.insert(DegradationFamily::LowLight, FamilyMetrics { psnr: 21.5, ssim: 0.7, count: 3 });
        EvalReport::new(fam, "c".into(), "k".into())
    }

    #[test]
    fn json_roundtrip_keeps_infinity() {
        let r = report();
        let json = r.to_json();
        assert!(json.contains("\"inf\""));
        assert_eq!(EvalReport::from_json(&json).unwrap(), r);
        let empty = EvalReport::new(BTreeMap::new(), "c".into(), "k".into());
        assert_eq!(EvalReport::from_json(&empty.to_json()).unwrap(), empty);
        assert_eq!(empty.table().lines().count(), 3);
    }

    #[test]
    fn emit_and_chart() {
        let dir = tempfile::tempdir().unwrap();
        let files = emit_report(&report(), dir.path(), "eval", &[ReportFormat::Json, ReportFormat::Text]).unwrap();
        assert_eq!(parse_report(&files[0]).unwrap(), report());
        assert!(std::fs::read_to_string(&files[1]).unwrap().contains("LOW_LIGHT"));
        let chart = dir.path().join("loss.svg");
        let pts: Vec<(f64, f64)> = (0..5).map(|i| (i as f64, 1.0 / (i as f64 + 1.0))).collect();
        line_chart(&chart, "loss", "iter", "total", &[("total".into(), pts)]).unwrap();
        assert!(std::fs::metadata(&chart).unwrap().len() > 0);
    }

    #[test]
    fn aggregate_means() {
        let m = aggregate(&[
            (DegradationFamily::Haze, 20.0, 0.5),
            (DegradationFamily::Haze, 30.0, 0.7),
            (DegradationFamily::RainStreak, 10.0, 0.1),
        ]);
        assert_eq!(m[&DegradationFamily::Haze], FamilyMetrics { psnr: 25.0, ssim: 0.6, count: 2 });
        assert_eq!(m[&DegradationFamily::RainStreak].count, 1);
    }
}
