//! Threshold metrics, ROC and PR curves and bootstrap intervals for a fixed
//! set of scores.

use fnirsfm::error::Result;
use fnirsfm::metrics::{confusion, evaluate, roc_auc, threshold_metrics};

fn main() -> Result<()> {
    let scores = [0.92, 0.81, 0.77, 0.64, 0.58, 0.55, 0.41, 0.33, 0.29, 0.12, 0.61, 0.47];
    let labels = [true, true, false, true, true, false, true, false, false, false, false, true];
    let c = confusion(&scores, &labels, 0.5)?;
    let m = threshold_metrics(&c);
    println!("tp {} fp {} tn {} fn {}", c.tp, c.fp, c.tn, c.fn_);
    println!(
        "sensitivity {:.3} specificity {:.3} accuracy {:.3} balanced {:.3} F1 {:.3} MCC {:.3}",
        m.sensitivity, m.specificity, m.accuracy, m.balanced_accuracy, m.f1, m.mcc
    );
    let roc = roc_auc(&scores, &labels)?;
    println!("ROC points {:?}", roc.points);
    let report = evaluate(&scores, &labels, None, &[], 2000, 7)?;
    println!(
        "ROC AUC {:.3} [{:.3}, {:.3}]  PR AUC {:.3} [{:.3}, {:.3}] ({})",
        report.roc.auc,
        report.roc_auc_ci.0,
        report.roc_auc_ci.1,
        report.pr.auc,
        report.pr_auc_ci.0,
        report.pr_auc_ci.1,
        report.ci_method
    );
    Ok(())
}
