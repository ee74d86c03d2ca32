//! Datasets as annotations plus an image source. File-backed images are
//! decoded on demand so large sets never sit in memory.

use std::path::{Path, PathBuf};

use facedet_core::annotation::Annotation;
use facedet_core::image::Image;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::imageio::load_image;
use crate::labels::read_label_file;
use crate::points::{load_landmark_set, parse_landmark_dataset, LandmarkDataset};
use crate::synth::synth_dataset;
use crate::wider::{assign_sets_by_height, load_official};

#[derive(Debug, Clone)]
enum Source {
    Memory(Vec<Image>),
    Files(PathBuf),
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub annotations: Vec<Annotation>,
    source: Source,
}

impl Dataset {
    pub fn in_memory(items: Vec<(Image, Annotation)>) -> Self {
        let (images, annotations) = items.into_iter().unzip();
        Self {
            annotations,
            source: Source::Memory(images),
        }
    }

    /// Images resolved as `root/<annotation.image>`.
    pub fn on_disk(annotations: Vec<Annotation>, root: impl Into<PathBuf>) -> Self {
        Self {
            annotations,
            source: Source::Files(root.into()),
        }
    }

    pub fn len(&self) -> usize {
        self.annotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.annotations.is_empty()
    }

    pub fn image(&self, i: usize) -> Result<Image> {
        match &self.source {
            Source::Memory(images) => Ok(images[i].clone()),
            Source::Files(root) => load_image(&root.join(&self.annotations[i].image)),
        }
    }

    pub fn names(&self) -> Vec<String> {
        self.annotations.iter().map(|a| a.image.clone()).collect()
    }
}

fn label_root(labels: &Path, root: &Option<PathBuf>) -> PathBuf {
    root.clone()
        .unwrap_or_else(|| labels.parent().map(Path::to_path_buf).unwrap_or_default())
}

/// The training set named by `[data]`.
pub fn training_set(cfg: &RunConfig) -> Result<Dataset> {
    let d = &cfg.data;
    match (&d.synthetic, &d.labels) {
        (Some(s), None) => Ok(Dataset::in_memory(synth_dataset(s, d.synthetic_seed)?)),
        (None, Some(labels)) => Ok(Dataset::on_disk(read_label_file(labels)?, label_root(labels, &d.root))),
        (Some(_), Some(_)) => Err(Error::Config(
            "`data.labels` and `data.synthetic` are mutually exclusive".into(),
        )),
        (None, None) => Err(Error::Config(
            "`data.labels` or `data.synthetic`: no training data configured".into(),
        )),
    }
}

/// The detection evaluation set: official WIDER FACE ground truth, a label
/// file (sets by face height), or else the training set itself.
pub fn evaluation_set(cfg: &RunConfig) -> Result<Dataset> {
    let e = &cfg.eval;
    if let Some(gt) = &e.wider_gt {
        let root = e
            .root
            .clone()
            .ok_or_else(|| Error::Config("`eval.root`: required with `eval.wider_gt`".into()))?;
        let sets = e.wider_sets.as_ref().map(|s| [s[0].as_path(), s[1].as_path(), s[2].as_path()]);
        let mut anns = load_official(gt, sets)?;
        if sets.is_none() {
            assign_sets_by_height(&mut anns, e.easy_min_height, e.medium_min_height);
        }
        return Ok(Dataset::on_disk(anns, root));
    }
    let mut data = match &e.labels {
        Some(labels) => Dataset::on_disk(read_label_file(labels)?, label_root(labels, &e.root)),
        None => training_set(cfg)?,
    };
    assign_sets_by_height(&mut data.annotations, e.easy_min_height, e.medium_min_height);
    Ok(data)
}

/// The landmark benchmark named by `[eval]`, if any.
pub fn landmark_set(cfg: &RunConfig) -> Result<Option<(LandmarkDataset, Dataset)>> {
    let e = &cfg.eval;
    let Some(dir) = &e.landmark_dir else {
        return Ok(None);
    };
    let name = e
        .landmark_dataset
        .as_deref()
        .ok_or_else(|| Error::Config("`eval.landmark_dataset`: required with `eval.landmark_dir`".into()))?;
    let kind = parse_landmark_dataset(name)
        .ok_or_else(|| Error::Config(format!("`eval.landmark_dataset`: unknown dataset {name:?}")))?;
    Ok(Some((kind, Dataset::on_disk(load_landmark_set(dir, kind)?, dir.clone()))))
}
