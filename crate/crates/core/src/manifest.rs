//! Dataset manifest: class records (role and word embedding) plus image records.
//!
//! Two JSON Lines files make up a manifest. The image file holds
//! `{"image_id", "class", "split"}` records; the companion class file, found
//! next to it as `<stem>.classes.jsonl`, holds `{"class", "role", "w2v"}`.
//! Class ids are positions in the class file.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Seen,
    Unseen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    TestSeen,
    TestUnseen,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassRecord {
    pub class_id: usize,
    pub name: String,
    pub role: Role,
    pub word_embedding: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageRecord {
    pub image_id: u64,
    pub class_id: usize,
    pub split: Split,
}

#[derive(Debug, Serialize, Deserialize)]
struct ClassLine {
    class: String,
    role: Role,
    w2v: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ImageLine {
    image_id: u64,
    class: String,
    split: Split,
}

#[derive(Debug, Deserialize)]
struct VectorLine {
    class: String,
    w2v: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    classes: Vec<ClassRecord>,
    images: Vec<ImageRecord>,
    image_pos: HashMap<u64, usize>,
    seen_pos: Vec<Option<usize>>,
}

/// Path of the class file that accompanies an image manifest.
pub fn companion_classes_path(images: &Path) -> PathBuf {
    let stem = images
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    images.with_file_name(format!("{stem}.classes.jsonl"))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Load an image manifest and its companion class file.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    load_manifest_from(path, &companion_classes_path(path))
}

pub fn load_manifest_from(images_path: &Path, classes_path: &Path) -> Result<DatasetManifest> {
    let class_lines: Vec<ClassLine> = read_jsonl(classes_path)?;
    let image_lines: Vec<ImageLine> = read_jsonl(images_path)?;

    let classes = class_lines
        .into_iter()
        .enumerate()
        .map(|(class_id, c)| ClassRecord {
            class_id,
            name: c.class,
            role: c.role,
            word_embedding: c.w2v,
        })
        .collect::<Vec<_>>();
    let by_name: HashMap<&str, usize> = classes
        .iter()
        .map(|c| (c.name.as_str(), c.class_id))
        .collect();
    let mut images = Vec::with_capacity(image_lines.len());
    for (index, line) in image_lines.iter().enumerate() {
        let class_id = *by_name.get(line.class.as_str()).ok_or_else(|| Error::Invariant {
            index,
            message: format!("image {} references unknown class {:?}", line.image_id, line.class),
        })?;
        images.push(ImageRecord {
            image_id: line.image_id,
            class_id,
            split: line.split,
        });
    }
    DatasetManifest::new(classes, images)
}

impl DatasetManifest {
    /// Build a manifest, checking every invariant. Class ids must equal
    /// positions in `classes`.
    pub fn new(classes: Vec<ClassRecord>, images: Vec<ImageRecord>) -> Result<Self> {
        let mut names = HashMap::new();
        let mut dim = None;
        for (index, c) in classes.iter().enumerate() {
            if c.class_id != index {
                return Err(Error::Invariant {
                    index,
                    message: format!("class id {} does not match its position", c.class_id),
                });
            }
            if names.insert(c.name.as_str(), index).is_some() {
                return Err(Error::Invariant {
                    index,
                    message: format!("duplicate class name {:?}", c.name),
                });
            }
            check_word_embedding(index, &c.word_embedding, &mut dim)?;
        }

        let mut image_pos = HashMap::with_capacity(images.len());
        for (index, img) in images.iter().enumerate() {
            let class = classes.get(img.class_id).ok_or_else(|| Error::Invariant {
                index,
                message: format!("image {} references missing class id {}", img.image_id, img.class_id),
            })?;
            let ok = match img.split {
                Split::Train | Split::TestSeen => class.role == Role::Seen,
                Split::TestUnseen => class.role == Role::Unseen,
            };
            if !ok {
                return Err(Error::Invariant {
                    index,
                    message: format!(
                        "image {} has split {:?} but class {:?} is {:?}",
                        img.image_id, img.split, class.name, class.role
                    ),
                });
            }
            if image_pos.insert(img.image_id, index).is_some() {
                return Err(Error::Invariant {
                    index,
                    message: format!("duplicate image id {}", img.image_id),
                });
            }
        }

        let mut seen_pos = vec![None; classes.len()];
        let mut next = 0;
        for c in &classes {
            if c.role == Role::Seen {
                seen_pos[c.class_id] = Some(next);
                next += 1;
            }
        }
        Ok(DatasetManifest {
            classes,
            images,
            image_pos,
            seen_pos,
        })
    }

    pub fn classes(&self) -> &[ClassRecord] {
        &self.classes
    }

    pub fn images(&self) -> &[ImageRecord] {
        &self.images
    }

    pub fn class(&self, class_id: usize) -> Option<&ClassRecord> {
        self.classes.get(class_id)
    }

    pub fn image(&self, image_id: u64) -> Option<&ImageRecord> {
        self.image_pos.get(&image_id).map(|&i| &self.images[i])
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn word_dim(&self) -> usize {
        self.classes.first().map_or(0, |c| c.word_embedding.len())
    }

    /// Seen class ids in manifest order.
    pub fn seen_classes(&self) -> Vec<usize> {
        self.class_ids_with(Role::Seen)
    }

    /// Unseen class ids in manifest order.
    pub fn unseen_classes(&self) -> Vec<usize> {
        self.class_ids_with(Role::Unseen)
    }

    fn class_ids_with(&self, role: Role) -> Vec<usize> {
        self.classes
            .iter()
            .filter(|c| c.role == role)
            .map(|c| c.class_id)
            .collect()
    }

    /// Position of a seen class among seen classes; `None` for unseen classes.
    pub fn seen_index(&self, class_id: usize) -> Option<usize> {
        self.seen_pos.get(class_id).copied().flatten()
    }

    pub fn n_seen(&self) -> usize {
        self.seen_pos.iter().filter(|p| p.is_some()).count()
    }

    pub fn images_in(&self, split: Split) -> impl Iterator<Item = &ImageRecord> {
        self.images.iter().filter(move |i| i.split == split)
    }

    /// Word embeddings of the given classes as rows.
    pub fn word_matrix(&self, class_ids: &[usize]) -> Array2<f64> {
        let dim = self.word_dim();
        let mut m = Array2::zeros((class_ids.len(), dim));
        for (r, &c) in class_ids.iter().enumerate() {
            for (j, v) in self.classes[c].word_embedding.iter().enumerate() {
                m[[r, j]] = *v;
            }
        }
        m
    }

    /// Replace every class's word embedding with vectors from a JSON Lines
    /// file of `{"class", "w2v"}` records. Used to swap the external
    /// knowledge source (e.g. attributes instead of word vectors).
    pub fn with_class_vectors(&self, path: &Path) -> Result<DatasetManifest> {
        let lines: Vec<VectorLine> = read_jsonl(path)?;
        let mut vectors: HashMap<String, Vec<f64>> = HashMap::new();
        for l in lines {
            vectors.insert(l.class, l.w2v);
        }
        let mut classes = self.classes.clone();
        for (index, c) in classes.iter_mut().enumerate() {
            c.word_embedding = vectors.remove(&c.name).ok_or_else(|| Error::Invariant {
                index,
                message: format!("{} has no vector for class {:?}", path.display(), c.name),
            })?;
        }
        DatasetManifest::new(classes, self.images.clone())
    }

    /// Write the image file and its companion class file.
    pub fn save(&self, images_path: &Path) -> Result<()> {
        let mut classes = String::new();
        for c in &self.classes {
            let line = ClassLine {
                class: c.name.clone(),
                role: c.role,
                w2v: c.word_embedding.clone(),
            };
            classes.push_str(&serde_json::to_string(&line).map_err(|e| Error::Internal(e.to_string()))?);
            classes.push('\n');
        }
        let mut images = String::new();
        for i in &self.images {
            let line = ImageLine {
                image_id: i.image_id,
                class: self.classes[i.class_id].name.clone(),
                split: i.split,
            };
            images.push_str(&serde_json::to_string(&line).map_err(|e| Error::Internal(e.to_string()))?);
            images.push('\n');
        }
        crate::container::write_bytes(&companion_classes_path(images_path), classes.as_bytes())?;
        crate::container::write_bytes(images_path, images.as_bytes())
    }
}

fn check_word_embedding(index: usize, w: &[f64], dim: &mut Option<usize>) -> Result<()> {
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invariant {
            index,
            message: "word embedding has non-finite entries".into(),
        });
    }
    if w.iter().all(|v| *v == 0.0) {
        return Err(Error::Invariant {
            index,
            message: "word embedding is zero".into(),
        });
    }
    match dim {
        Some(d) if *d != w.len() => Err(Error::Invariant {
            index,
            message: format!("word embedding has dim {} but earlier classes have {}", w.len(), d),
        }),
        _ => {
            *dim = Some(w.len());
            Ok(())
        }
    }
}
