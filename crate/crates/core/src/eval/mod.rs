//! Metrics, reports and ablation drivers.

pub mod ablation;
pub mod metrics;
pub mod report;

pub use ablation::{run_ablation, AblationAxis, AblationRow};
pub use metrics::{gaussian_window, mse, psnr, ssim};
pub use report::{aggregate, emit_report, evaluate, line_chart, parse_report, EvalReport, FamilyMetrics, ReportFormat};
