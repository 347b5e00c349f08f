// SPDX-License-Identifier: Apache-2.0

//! Confusion matrix, per-class precision/recall/F1 and ROC AUC.

use apb_triage::eval::{self, ConfusionMatrix};

fn main() -> Result<(), eval::EvalError> {
    let truth = ["ok", "ok", "bad", "bad", "bad", "ok", "bad", "ok"];
    let pred = ["ok", "bad", "bad", "bad", "ok", "ok", "bad", "ok"];
    let cm = eval::confusion_matrix(&truth, &pred, &["bad", "ok"])?;
    print!("{cm}{}", eval::prf_metrics(&cm));

    // binary counts for the data_error_0 stage: TP, FN / FP, TN
    let cm = ConfusionMatrix::from_counts(
        vec!["data_error_0".into(), "non_data_error_0".into()],
        vec![vec![16_637, 3_363], vec![422, 19_578]],
    );
    print!("\n{cm}{}", eval::prf_metrics(&cm));

    let scores = [0.9, 0.8, 0.8, 0.35, 0.3, 0.1];
    let labels = [true, true, false, true, false, false];
    println!("\nAUC {:.4}", eval::roc_auc(&scores, &labels)?);
    Ok(())
}
