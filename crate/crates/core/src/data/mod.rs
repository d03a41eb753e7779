//! Volumes, cases, the synthetic phantom, dataset splits and slicing.

mod phantom;
mod slices;
mod split;
mod volume;

use std::fs;
use std::path::{Path, PathBuf};

pub use phantom::{case_id, gen_dataset, gen_phantom, gen_phantom_with, PhantomParams, MIN_EXTENT};
pub use slices::{extract_slices, restack, SliceFilter, SliceSample};
pub use split::{split, SplitRatio, SplitSpec};
pub use volume::{
    read_mvol, write_mvol, Volume, Voxels, DEFAULT_SPACING, MVOL_HEADER_LEN, MVOL_MAGIC,
    MVOL_VERSION,
};

pub(crate) use volume::Reader;

use crate::error::{Error, Result};

pub const T1W_FILE: &str = "t1w.mvol";
pub const FA_FILE: &str = "fa.mvol";
pub const LABEL_FILE: &str = "label.mvol";
pub const SPLIT_FILE: &str = "split.json";

/// Co-registered T1w, FA and binary label volumes of one subject.
#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub id: String,
    pub t1w: Volume,
    pub fa: Volume,
    pub label: Volume,
}

impl Case {
    pub fn new(id: impl Into<String>, t1w: Volume, fa: Volume, label: Volume) -> Result<Self> {
        let case = Case {
            id: id.into(),
            t1w,
            fa,
            label,
        };
        case.validate()?;
        Ok(case)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("fa", &self.fa), ("label", &self.label)] {
            if v.extents() != self.t1w.extents() || v.spacing() != self.t1w.spacing() {
                return Err(Error::Data(format!(
                    "case {}: {name} grid {:?}/{:?} differs from t1w {:?}/{:?}",
                    self.id,
                    v.extents(),
                    v.spacing(),
                    self.t1w.extents(),
                    self.t1w.spacing()
                )));
            }
        }
        if !self.label.is_binary() {
            return Err(Error::Data(format!("case {}: label must be binary", self.id)));
        }
        Ok(())
    }

    pub fn extents(&self) -> [usize; 3] {
        self.t1w.extents()
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.t1w.spacing()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_mvol(&self.t1w, dir.join(T1W_FILE))?;
        write_mvol(&self.fa, dir.join(FA_FILE))?;
        write_mvol(&self.label, dir.join(LABEL_FILE))
    }

    /// Loads `<dir>/{t1w,fa,label}.mvol`; the id is the directory name.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let id = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Case::new(
            id,
            read_mvol(dir.join(T1W_FILE))?,
            read_mvol(dir.join(FA_FILE))?,
            read_mvol(dir.join(LABEL_FILE))?,
        )
    }
}

pub fn case_dir(data: impl AsRef<Path>, id: &str) -> PathBuf {
    data.as_ref().join(id)
}

/// Case ids of a dataset directory: subdirectories holding a label volume, sorted.
pub fn list_cases(data: impl AsRef<Path>) -> Result<Vec<String>> {
    let data = data.as_ref();
    let entries = fs::read_dir(data).map_err(|e| Error::io(data, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(data, e))?;
        if entry.path().join(LABEL_FILE).is_file() {
            ids.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    ids.sort();
    Ok(ids)
}
