use std::fs;
use std::path::Path;

use super::volume::{read_annotations, write_annotations, Annotation, Volume};
use crate::error::{Error, Result};
use crate::objectives::Box3D;

pub const ANNOTATIONS: &str = "annotations.json";

/// Volumes with their lesion boxes, in file-name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub names: Vec<String>,
    pub volumes: Vec<Volume>,
    pub boxes: Vec<Vec<Box3D>>,
}

impl Dataset {
    pub fn push(&mut self, name: String, v: Volume, boxes: Vec<Box3D>) {
        self.names.push(name);
        self.volumes.push(v);
        self.boxes.push(boxes);
    }

    pub fn len(&self) -> usize {
        self.volumes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.volumes.is_empty()
    }

    pub fn lesion_count(&self) -> usize {
        self.boxes.iter().map(Vec::len).sum()
    }

    pub fn annotations(&self) -> Vec<Annotation> {
        self.names
            .iter()
            .zip(&self.boxes)
            .flat_map(|(n, bs)| {
                bs.iter().map(move |b| Annotation {
                    volume: n.clone(),
                    center: b.center,
                    extent: b.extent,
                })
            })
            .collect()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        for (n, v) in self.names.iter().zip(&self.volumes) {
            v.save(dir.join(n))?;
        }
        write_annotations(dir.join(ANNOTATIONS), &self.annotations())
    }

    /// Reads every `*.avol` in `dir` (sorted by name) and the annotation index.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut names: Vec<String> = fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.ends_with(".avol"))
            .collect();
        names.sort();
        if names.is_empty() {
            return Err(Error::Data(format!("no .avol volumes in {}", dir.display())));
        }
        let ann = read_annotations(dir.join(ANNOTATIONS))?;
        let mut ds = Dataset::default();
        for n in names {
            let v = Volume::load(dir.join(&n))?;
            let boxes = ann
                .iter()
                .filter(|a| a.volume == n)
                .map(Annotation::to_box)
                .collect::<Result<Vec<_>>>()?;
            for b in &boxes {
                if !b.center_in(v.dims()) {
                    return Err(Error::Data(format!("annotation centre {:?} outside `{n}`", b.center)));
                }
            }
            ds.push(n, v, boxes);
        }
        if let Some(a) = ann.iter().find(|a| !ds.names.contains(&a.volume)) {
            return Err(Error::Data(format!("annotation names unknown volume `{}`", a.volume)));
        }
        Ok(ds)
    }

    /// Every volume clamped (optionally) and standardized.
    pub fn normalized(&self, range: Option<[f32; 2]>) -> Dataset {
        Dataset {
            names: self.names.clone(),
            volumes: self.volumes.iter().map(|v| v.normalized(range)).collect(),
            boxes: self.boxes.clone(),
        }
    }
}
