use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_records, EmbeddingRecord};
use crate::error::{Error, Result};

/// One record file and the corpus tags it carries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub dataset: String,
    pub domain: String,
    pub generator: String,
    pub scale: String,
}

/// JSON array of [`ManifestEntry`].
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(Self {
            entries: serde_json::from_str(text)?,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.entries)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }
}

/// Selection attributes of a pooled record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tags {
    pub dataset: String,
    pub domain: String,
    pub generator: String,
    pub scale: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolRecord {
    pub record: EmbeddingRecord,
    pub tags: Tags,
}

fn resolve(base: &Path, file: &str) -> PathBuf {
    let p = Path::new(file);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Reads every file listed in a manifest. Relative paths resolve against the
/// manifest's directory. Domain and generator come from each record; dataset
/// and scale come from the manifest entry.
pub fn load_pool(manifest_path: &Path) -> Result<Vec<PoolRecord>> {
    let manifest = Manifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut pool = Vec::new();
    let mut dim: Option<usize> = None;
    for entry in &manifest.entries {
        let (header, records) = read_records(&resolve(base, &entry.file))?;
        let d = header.hidden_dim as usize;
        if *dim.get_or_insert(d) != d {
            return Err(Error::DimensionMismatch {
                expected: dim.unwrap_or(0),
                found: d,
            });
        }
        for record in records {
            let tags = Tags {
                dataset: entry.dataset.clone(),
                domain: record.domain.clone(),
                generator: record.generator.clone(),
                scale: entry.scale.clone(),
            };
            pool.push(PoolRecord { record, tags });
        }
    }
    Ok(pool)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_shape() {
        let text = r#"[{"file":"a.mgpr","dataset":"toy","domain":"news","generator":"gpt","scale":"7b"}]"#;
        let m = Manifest::from_json(text).unwrap();
        assert_eq!(m.entries[0].scale, "7b");
        let back = Manifest::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        assert!(Manifest::from_json(r#"[{"file":"a"}]"#).is_err());
    }
}
