//! Per-frame and batch orchestration of rectification and detection.

use std::sync::Mutex;

use thiserror::Error;

use crate::dataset::{Dataset, DatasetError, FrameDetections, FrameRecord};
use crate::detection::{
    detect_baseline, detect_tiles, extended_nms, merge_tile_detections, DetectError, Detection, DetectorBackend,
};
use crate::rectification::{rectify_frame, RectifyConfig, RectifyError};

#[derive(Debug, Clone, PartialEq)]
pub struct DetectConfig {
    pub rectify: RectifyConfig,
    pub nms_iou: f64,
    /// Detect on the raw image only.
    pub baseline: bool,
    /// Also pool raw-image detections into the final NMS of rectified mode.
    pub merge_baseline: bool,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            rectify: RectifyConfig::default(),
            nms_iou: crate::detection::DEFAULT_NMS_IOU,
            baseline: false,
            merge_baseline: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum FrameError {
    #[error(transparent)]
    Load(#[from] DatasetError),
    #[error(transparent)]
    Rectify(#[from] RectifyError),
    #[error(transparent)]
    Detect(#[from] DetectError),
}

impl FrameError {
    /// Errors after which no further frame can succeed.
    pub fn is_fatal(&self) -> bool {
        matches!(self, FrameError::Detect(DetectError::BackendUnavailable(_)))
    }
}

/// Final detections of one frame in original-image coordinates.
pub fn detect_frame(
    frame: &FrameRecord,
    cfg: &DetectConfig,
    backend: &Mutex<Box<dyn DetectorBackend>>,
) -> Result<Vec<Detection>, FrameError> {
    let lock = || backend.lock().unwrap_or_else(|p| p.into_inner());
    if cfg.baseline {
        let raw = detect_baseline(&frame.rgb, lock().as_mut())?;
        return Ok(extended_nms(&raw, cfg.nms_iou));
    }
    let tiles = rectify_frame(frame, &cfg.rectify)?;
    let tile_dets = detect_tiles(&tiles, lock().as_mut())?;
    let mut merged = merge_tile_detections(&tiles, &tile_dets, frame.width(), frame.height(), cfg.nms_iou)?;
    if cfg.merge_baseline {
        merged.extend(detect_baseline(&frame.rgb, lock().as_mut())?);
        merged = extended_nms(&merged, cfg.nms_iou);
    }
    Ok(merged)
}

/// Outcome of a batch run. Every frame appears in `frames`, in dataset order;
/// failed frames carry no detections and are listed in `failures`.
#[derive(Debug, Default)]
pub struct BatchResult {
    pub frames: Vec<FrameDetections>,
    pub failures: Vec<(String, String)>,
}

/// Runs the pipeline over a dataset. Frames are prepared on the current rayon
/// pool; the backend is shared under a lock.
pub fn detect_dataset(
    dataset: &Dataset,
    cfg: &DetectConfig,
    backend: &Mutex<Box<dyn DetectorBackend>>,
) -> Result<BatchResult, FrameError> {
    use rayon::prelude::*;
    let outcomes: Vec<(String, Result<Vec<Detection>, FrameError>)> = dataset
        .frame_ids
        .par_iter()
        .map(|id| {
            let r = dataset.load_frame(id).map_err(FrameError::from).and_then(|f| detect_frame(&f, cfg, backend));
            (id.clone(), r)
        })
        .collect();
    let mut out = BatchResult::default();
    for (id, r) in outcomes {
        match r {
            Ok(detections) => out.frames.push(FrameDetections { frame_id: id, detections }),
            Err(e) if e.is_fatal() => return Err(e),
            Err(e) => {
                log::warn!("frame {id}: {e}");
                out.failures.push((id.clone(), e.to_string()));
                out.frames.push(FrameDetections { frame_id: id, detections: Vec::new() });
            }
        }
    }
    Ok(out)
}
