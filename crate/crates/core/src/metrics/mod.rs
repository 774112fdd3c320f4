//! Evaluation metrics.
//!
//! Rouge-L is plain LCS F1 over tokens with EOS removed. ECE bins
//! confidences into equal-width bins. Exposure bias is measured with
//! ExAccErr, the relative excess of free-run regret over oracle-prefix
//! error.

mod calibration;
mod exposure;
mod loss;
mod report;
mod text;

pub use calibration::{ece, LabelProbe};
pub use exposure::{exposure_bias_curve, exposure_bias_curve_exact, ExposureBiasCurve};
pub use loss::{test_lm_loss, test_lm_loss_per_token};
pub use report::MetricReport;
pub use text::{distinct_n, rouge_l, rouge_l_tokens};
