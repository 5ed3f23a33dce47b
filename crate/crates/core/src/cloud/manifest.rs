//! Dataset manifests (TOML).
//!
//! ```toml
//! name = "vaihingen"
//! classes = ["powerline", "low_vegetation", ...]
//! units = "m"
//! crs = "local"
//! intensity_max = 255.0
//!
//! [[files]]
//! path = "train.txt"
//! split = "train"
//! ```
//!
//! Relative file paths resolve against the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_cloud, PointCloud};
use crate::error::{Error, Result};

/// The nine ISPRS Vaihingen 3D labelling classes, in benchmark order.
pub const ISPRS_CLASSES: [&str; 9] = [
    "powerline",
    "low_vegetation",
    "impervious_surfaces",
    "car",
    "fence_hedge",
    "roof",
    "facade",
    "shrub",
    "tree",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub path: PathBuf,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(default)]
    pub name: String,
    pub classes: Vec<String>,
    #[serde(default = "default_units")]
    pub units: String,
    #[serde(default)]
    pub crs: String,
    /// Raw intensity that maps to 1.0 after normalization.
    #[serde(default = "default_intensity_max")]
    pub intensity_max: f64,
    #[serde(default)]
    pub files: Vec<ManifestFile>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_units() -> String {
    "m".into()
}

fn default_intensity_max() -> f64 {
    255.0
}

impl DatasetManifest {
    pub fn new(classes: Vec<String>, intensity_max: f64) -> Self {
        DatasetManifest {
            name: String::new(),
            classes,
            units: default_units(),
            crs: String::new(),
            intensity_max,
            files: Vec::new(),
            base_dir: PathBuf::new(),
        }
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut m: DatasetManifest =
            toml::from_str(text).map_err(|e| Error::Config(format!("manifest: {e}")))?;
        m.base_dir = base_dir.to_path_buf();
        m.check()?;
        Ok(m)
    }

    /// Loads a manifest and checks that every listed file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("read manifest {}", path.display()), e))?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let m = Self::parse(&text, &base)?;
        for f in &m.files {
            let p = m.resolve(&f.path);
            if !p.exists() {
                return Err(Error::Config(format!(
                    "manifest file {} does not exist",
                    p.display()
                )));
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("manifest: {e}")))?;
        fs::write(path, text).map_err(|e| Error::io(format!("write {}", path.display()), e))
    }

    fn check(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::Config(format!(
                "manifest needs at least 2 classes, found {}",
                self.classes.len()
            )));
        }
        if self.classes.len() > 255 {
            return Err(Error::Config("at most 255 classes are supported".into()));
        }
        if !(self.intensity_max > 0.0) {
            return Err(Error::Config("intensity_max must be positive".into()));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn files_in(&self, split: Split) -> impl Iterator<Item = PathBuf> + '_ {
        self.files
            .iter()
            .filter(move |f| f.split == split)
            .map(|f| self.resolve(&f.path))
    }

    /// Reads a cloud and checks its labels against the class list.
    pub fn load_cloud(&self, path: &Path) -> Result<PointCloud> {
        let cloud = read_cloud(path)?;
        cloud.check_labels(self.num_classes())?;
        Ok(cloud)
    }

    /// Parses every listed file.
    pub fn validate_files(&self) -> Result<()> {
        for f in &self.files {
            self.load_cloud(&self.resolve(&f.path))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn isprs_manifest_has_nine_classes() {
        let text = format!(
            "name = \"vaihingen\"\nclasses = {:?}\nintensity_max = 255.0\n",
            ISPRS_CLASSES
        );
        let m = DatasetManifest::parse(&text, Path::new(".")).unwrap();
        assert_eq!(m.num_classes(), 9);
        assert_eq!(m.classes[0], "powerline");
        assert_eq!(m.classes[8], "tree");
    }

    #[test]
    fn single_class_is_rejected() {
        assert!(DatasetManifest::parse("classes = [\"a\"]", Path::new(".")).is_err());
    }

    #[test]
    fn missing_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.toml");
        fs::write(
            &p,
            "classes = [\"a\", \"b\"]\n[[files]]\npath = \"nope.txt\"\nsplit = \"train\"\n",
        )
        .unwrap();
        assert!(DatasetManifest::load(&p).is_err());
    }

    #[test]
    fn labels_outside_class_range_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cloud_path = dir.path().join("c.txt");
        fs::write(&cloud_path, "x y z label\n0 0 0 1\n0 0 1 2\n").unwrap();
        let m = DatasetManifest::new(vec!["a".into(), "b".into()], 1.0);
        assert!(m.load_cloud(&cloud_path).is_err());
    }

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("c.txt"), "x y z\n0 0 0\n").unwrap();
        let mut m = DatasetManifest::new(vec!["a".into(), "b".into()], 100.0);
        m.files.push(ManifestFile {
            path: "c.txt".into(),
            split: Split::Test,
        });
        let p = dir.path().join("m.toml");
        m.save(&p).unwrap();
        let back = DatasetManifest::load(&p).unwrap();
        assert_eq!(back.classes, m.classes);
        assert_eq!(back.files_in(Split::Test).count(), 1);
        back.validate_files().unwrap();
    }
}
