//! Class-activation-map export. Under the 1x1 head the class map itself is
//! the CAM, so export is just min-max normalization to PGM plus a small
//! metadata sidecar.

use std::path::PathBuf;

use crate::divblock::spatial_entropy;
use crate::error::{Error, Result};
use crate::harness::ensure_dir;
use crate::model::{eval_maps, load_model, ModelConfig, ModelParams};
use crate::pgm::{normalize_to_gray, write_pgm};
use crate::synthdata::{load_dataset, LabeledDataset};
use crate::tensor::Tensor;

pub struct CamRequest {
    pub checkpoint: PathBuf,
    pub dataset_dir: PathBuf,
    /// Indices into the test split.
    pub indices: Vec<usize>,
    pub out_dir: PathBuf,
}

/// Write one heatmap (PGM) plus metadata per requested test image, for the
/// image's ground-truth class.
pub fn export_cams(req: &CamRequest) -> Result<Vec<PathBuf>> {
    let (model_cfg, params) = load_model(&req.checkpoint)?;
    let ds = load_dataset(&req.dataset_dir.join("test.dbds"), None)?;
    ensure_dir(&req.out_dir)?;
    let mut written = Vec::new();
    for &idx in &req.indices {
        if idx >= ds.len() {
            return Err(Error::InvalidArgument(format!(
                "image index {idx} out of range (test split has {} samples)",
                ds.len()
            )));
        }
        let image = ds.image(idx);
        let class = ds.labels[idx];
        let maps = eval_maps(&params, &model_cfg, &image)?;
        let m = model_cfg.map_size();
        let plane = &maps.data()[class * m * m..(class + 1) * m * m];
        let score = plane.iter().sum::<f64>() / (m * m) as f64;

        let stem = format!("cam_{idx:05}_class{class:03}");
        let pgm_path = req.out_dir.join(format!("{stem}.pgm"));
        write_pgm(&pgm_path, m, m, &normalize_to_gray(plane))?;
        let meta_path = req.out_dir.join(format!("{stem}.txt"));
        let meta = format!("image = {idx}\nclass = {class}\nscore = {score}\n");
        std::fs::write(&meta_path, meta).map_err(|e| Error::io(&meta_path, e))?;
        written.push(pgm_path);
    }
    Ok(written)
}

/// Mean spatial entropy of the ground-truth-class activation maps over a
/// dataset; higher means attention is spread across more locations.
pub fn mean_gt_cam_entropy(
    params: &ModelParams,
    model_cfg: &ModelConfig,
    ds: &LabeledDataset,
    batch_size: usize,
) -> Result<f64> {
    let s = ds.image_size();
    let img_numel = s * s;
    let m = model_cfg.map_size();
    let map_numel = m * m;
    let mut total = 0.0;
    let mut start = 0;
    while start < ds.len() {
        let end = (start + batch_size).min(ds.len());
        let n = end - start;
        let images = Tensor::from_parts(
            vec![n, 1, s, s],
            ds.images.data()[start * img_numel..end * img_numel].to_vec(),
        );
        let maps = eval_maps(params, model_cfg, &images)?;
        let classes = model_cfg.num_classes;
        for row in 0..n {
            let class = ds.labels[start + row];
            let base = (row * classes + class) * map_numel;
            total += spatial_entropy(&maps.data()[base..base + map_numel]);
        }
        start = end;
    }
    Ok(total / ds.len() as f64)
}

/// Heatmap argmax in (row, col) coordinates; shared definition with the
/// peak map, used by tests.
pub fn heatmap_argmax(plane: &[f64], width: usize) -> (usize, usize) {
    let mut best = 0;
    for (i, &v) in plane.iter().enumerate() {
        if v > plane[best] {
            best = i;
        }
    }
    (best / width, best % width)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_matches_peak_map_definition() {
        let plane = vec![0.1, 0.9, 0.3, 0.2, 0.8, 0.05];
        let (r, c) = heatmap_argmax(&plane, 3);
        assert_eq!((r, c), (0, 1));
        let peak = crate::divblock::peak_map(
            &Tensor::new(vec![2, 3], plane.clone()).unwrap(),
        )
        .unwrap();
        assert_eq!(peak.data()[r * 3 + c], 1.0);
    }
}
