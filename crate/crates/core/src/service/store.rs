use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::imaging::write_atomic;

use super::ServiceError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlideState {
    Ingested,
    Stitched,
    Segmented,
    Classified,
    Reported,
}

impl std::fmt::Display for SlideState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SlideState::Ingested => "ingested",
            SlideState::Stitched => "stitched",
            SlideState::Segmented => "segmented",
            SlideState::Classified => "classified",
            SlideState::Reported => "reported",
        };
        f.write_str(s)
    }
}

/// Artifact paths relative to the slide directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub panorama: Option<String>,
    pub graph: Option<String>,
    /// Anchor-frame coordinate of panorama pixel (0, 0).
    pub panorama_origin: Option<(i64, i64)>,
    /// Label map of the current `label_version`.
    pub labels: Option<String>,
    pub flows: Option<String>,
    pub cells: Option<String>,
    pub report: Option<String>,
    pub report_text: Option<String>,
    /// Optional segmentation inputs supplied at ingest: an oracle label map
    /// in anchor-frame coordinates, or predicted flows at panorama size.
    pub oracle: Option<String>,
    pub predicted_flows: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideRecord {
    pub slide_id: String,
    pub state: SlideState,
    pub label_version: u64,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
    pub frames: Vec<String>,
    pub artifacts: Artifacts,
    /// Warnings of the most recent stage run.
    pub warnings: Vec<String>,
}

/// Filesystem persistence: `<root>/slides/<id>/manifest.json` plus the
/// slide's artifacts. Every write goes through a temp file and a rename.
#[derive(Clone, Debug)]
pub struct SlideStore {
    root: PathBuf,
}

pub const MANIFEST: &str = "manifest.json";

impl SlideStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, ServiceError> {
        let root = root.into();
        std::fs::create_dir_all(root.join("slides"))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Slide directory; IDs must be UUIDs, which rules out path tricks.
    pub fn slide_dir(&self, id: &str) -> Result<PathBuf, ServiceError> {
        uuid::Uuid::parse_str(id).map_err(|_| ServiceError::NotFound(format!("slide {id}")))?;
        Ok(self.root.join("slides").join(id))
    }

    pub fn new_id() -> String {
        uuid::Uuid::new_v4().to_string()
    }

    pub fn load(&self, id: &str) -> Result<SlideRecord, ServiceError> {
        let path = self.slide_dir(id)?.join(MANIFEST);
        let bytes =
            std::fs::read(&path).map_err(|_| ServiceError::NotFound(format!("slide {id}")))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn save(&self, record: &SlideRecord) -> Result<(), ServiceError> {
        let path = self.slide_dir(&record.slide_id)?.join(MANIFEST);
        write_atomic(&path, &serde_json::to_vec_pretty(record)?)?;
        Ok(())
    }

    pub fn list(&self) -> Result<Vec<SlideRecord>, ServiceError> {
        let mut out = Vec::new();
        for entry in std::fs::read_dir(self.root.join("slides"))? {
            let name = entry?.file_name().to_string_lossy().into_owned();
            if let Ok(r) = self.load(&name) {
                out.push(r);
            }
        }
        out.sort_by(|a, b| {
            a.created_at
                .cmp(&b.created_at)
                .then(a.slide_id.cmp(&b.slide_id))
        });
        Ok(out)
    }

    /// Absolute path of a slide-relative artifact.
    pub fn artifact(&self, id: &str, rel: &str) -> Result<PathBuf, ServiceError> {
        Ok(self.slide_dir(id)?.join(rel))
    }

    pub fn write(&self, id: &str, rel: &str, bytes: &[u8]) -> Result<(), ServiceError> {
        write_atomic(&self.artifact(id, rel)?, bytes)?;
        Ok(())
    }

    pub fn remove(&self, id: &str, rel: &str) -> Result<(), ServiceError> {
        match std::fs::remove_file(self.artifact(id, rel)?) {
            Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(e.into()),
            _ => Ok(()),
        }
    }

    /// Every training-pair file, as `(slide_id, absolute path)`.
    pub fn training_files(&self) -> Result<Vec<(String, PathBuf)>, ServiceError> {
        let mut out = Vec::new();
        for r in self.list()? {
            let dir = self.slide_dir(&r.slide_id)?.join("training");
            let Ok(entries) = std::fs::read_dir(&dir) else {
                continue;
            };
            let mut files: Vec<PathBuf> = entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.is_file()
                        && !p
                            .file_name()
                            .is_some_and(|n| n.to_string_lossy().starts_with('.'))
                })
                .collect();
            files.sort();
            out.extend(files.into_iter().map(|p| (r.slide_id.clone(), p)));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn states_are_ordered() {
        assert!(SlideState::Ingested < SlideState::Stitched);
        assert!(SlideState::Classified < SlideState::Reported);
        assert_eq!(
            serde_json::to_string(&SlideState::Segmented).unwrap(),
            "\"segmented\""
        );
    }

    #[test]
    fn ids_must_be_uuids() {
        let dir = tempfile::tempdir().unwrap();
        let s = SlideStore::open(dir.path()).unwrap();
        assert!(matches!(
            s.slide_dir("../etc"),
            Err(ServiceError::NotFound(_))
        ));
        assert!(s.slide_dir(&SlideStore::new_id()).is_ok());
        assert!(matches!(
            s.load(&SlideStore::new_id()),
            Err(ServiceError::NotFound(_))
        ));
    }
}
