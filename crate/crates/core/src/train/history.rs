use std::path::Path;

use super::EpochRecord;
use crate::error::Result;
use crate::fsio;

/// History as CSV (`epoch,train_loss,val_psnr,val_ssim,val_nrmse,lr`).
/// Floats use the shortest round-trip form, so equal runs give equal bytes.
pub fn history_csv(history: &[EpochRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "epoch",
        "train_loss",
        "val_psnr",
        "val_ssim",
        "val_nrmse",
        "lr",
    ])?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            r.train_loss.to_string(),
            r.val_psnr.to_string(),
            r.val_ssim.to_string(),
            r.val_nrmse.to_string(),
            r.lr.to_string(),
        ])?;
    }
    w.into_inner()
        .map_err(|e| crate::Error::Contract(format!("csv buffer: {e}")))
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    fsio::atomic_write(path, &history_csv(history)?)
}
