//! File-backed record store.
//!
//! Layout under the store root:
//!
//! ```text
//! manifest.json            image entries + content hashes of stored files
//! nomenclature.json        closed class vocabulary
//! images/<id>.png
//! masks/<image-id>/<class>.png
//! records/annotations.ndjson
//! records/proposals.ndjson
//! records/decisions.ndjson
//! models/<name>.bin
//! datasets/<name>.json
//! reports/<name>.json
//! ```
//!
//! Every file is replaced with write-to-temp-then-rename, so readers never
//! observe a partial write. The decision log only ever grows.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::{load_model, model_version, SoftmaxModel, BACKGROUND};
use crate::error::{Error, Result};
use crate::evaluation::ClassMask;
use crate::geometry::Polygon;
use crate::imaging::{decode_mask_png, encode_mask_png, encode_png, Raster, Rect};
use crate::segmenter::{ProposalStatus, ProposedSegment};

/// Forensic classes and their annotated-instance counts in the reference
/// collection. Drives the default nomenclature and synthetic class mix.
pub const REFERENCE_CLASS_COUNTS: [(&str, u32); 8] = [
    ("maggots", 1375),
    ("scale", 716),
    ("purge", 709),
    ("mummification", 557),
    ("eggs", 533),
    ("mold", 339),
    ("marbling", 241),
    ("plastic", 107),
];

const MANIFEST: &str = "manifest.json";
const NOMENCLATURE: &str = "nomenclature.json";
const ANNOTATIONS: &str = "records/annotations.ndjson";
const PROPOSALS: &str = "records/proposals.ndjson";
const DECISIONS: &str = "records/decisions.ndjson";
const CURRENT_MODEL: &str = "models/current.json";

#[derive(Serialize, Deserialize)]
struct CurrentModel {
    version: String,
}

/// Writes `bytes` to `path` via a sibling temp file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension(format!(
        "tmp-{}-{}",
        std::process::id(),
        COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Closed vocabulary annotators choose from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Nomenclature {
    pub version: u32,
    pub classes: Vec<String>,
}

impl Nomenclature {
    pub fn new(version: u32, classes: Vec<String>) -> Result<Self> {
        let n = Nomenclature { version, classes };
        n.validate()?;
        Ok(n)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = self.classes.iter().find(|c| !seen.insert(c.as_str())) {
            return Err(Error::Validation(format!("duplicate class `{dup}` in nomenclature")));
        }
        if !self.contains(BACKGROUND) {
            return Err(Error::Validation("nomenclature must contain `background`".into()));
        }
        if self.classes.len() < 2 {
            return Err(Error::Validation("nomenclature needs at least one forensic class".into()));
        }
        Ok(())
    }

    pub fn contains(&self, class: &str) -> bool {
        self.classes.iter().any(|c| c == class)
    }

    /// Classes other than background.
    pub fn forensic(&self) -> impl Iterator<Item = &String> {
        self.classes.iter().filter(|c| c.as_str() != BACKGROUND)
    }
}

impl Default for Nomenclature {
    fn default() -> Self {
        let mut classes = vec![BACKGROUND.to_string()];
        classes.extend(REFERENCE_CLASS_COUNTS.iter().map(|(c, _)| c.to_string()));
        Nomenclature { version: 1, classes }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: String,
    pub file: String,
    pub width: u32,
    pub height: u32,
    pub sha256: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub images: Vec<ImageEntry>,
    /// Relative path -> SHA-256 for masks, models, datasets and reports.
    pub files: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Geometry {
    Rect { rect: Rect },
    Polygon { vertices: Polygon },
}

impl Geometry {
    pub fn fits_within(&self, width: u32, height: u32) -> bool {
        match self {
            Geometry::Rect { rect } => rect.fits_within(width, height),
            Geometry::Polygon { vertices } => {
                let (x0, y0, x1, y1) = vertices.bbox();
                x0 >= 0 && y0 >= 0 && x1 <= i64::from(width) && y1 <= i64::from(height)
            }
        }
    }

    /// Pixel rectangle enclosing the geometry.
    pub fn bounding_rect(&self, width: u32, height: u32) -> Option<Rect> {
        match self {
            Geometry::Rect { rect } => Some(*rect),
            Geometry::Polygon { vertices } => vertices.pixel_bounds(width, height),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Origin {
    Manual,
    AcceptedProposal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: String,
    pub image_id: String,
    pub geometry: Geometry,
    pub class_name: String,
    pub annotator: String,
    pub created_at: DateTime<Utc>,
    pub origin: Origin,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_proposal: Option<String>,
}

impl AnnotationRecord {
    /// A rectangle drawn by a person, with a fresh id and timestamp.
    pub fn manual(image_id: &str, rect: Rect, class_name: &str, annotator: &str) -> Self {
        AnnotationRecord {
            id: format!("ann-{}", uuid::Uuid::new_v4().simple()),
            image_id: image_id.to_owned(),
            geometry: Geometry::Rect { rect },
            class_name: class_name.to_owned(),
            annotator: annotator.to_owned(),
            created_at: Utc::now(),
            origin: Origin::Manual,
            source_proposal: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Decision {
    Accept,
    Decline,
    AcceptWithEdit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub proposal_id: String,
    pub decision: Decision,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edited_geometry: Option<Polygon>,
    pub annotator: String,
    pub timestamp: DateTime<Utc>,
}

#[derive(Clone, Debug, Default)]
pub struct AnnotationFilter<'a> {
    pub image_id: Option<&'a str>,
    pub class: Option<&'a str>,
    pub origin: Option<Origin>,
}

#[derive(Clone, Debug, Default)]
pub struct ProposalFilter<'a> {
    pub image_id: Option<&'a str>,
    pub class: Option<&'a str>,
    pub status: Option<ProposalStatus>,
}

/// Single-writer handle on a store directory.
#[derive(Debug)]
pub struct Store {
    root: PathBuf,
    nomenclature: Nomenclature,
    manifest: Manifest,
    annotations: Vec<AnnotationRecord>,
    proposals: Vec<ProposedSegment>,
    decisions: Vec<DecisionRecord>,
}

impl Store {
    /// Opens an existing store, or initialises an empty one with the default
    /// nomenclature.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        let nomenclature = match read_json::<Nomenclature>(&root.join(NOMENCLATURE))? {
            Some(n) => {
                n.validate()?;
                n
            }
            None => {
                let n = Nomenclature::default();
                write_atomic(&root.join(NOMENCLATURE), &to_json_bytes(&n)?)?;
                n
            }
        };
        let manifest = read_json::<Manifest>(&root.join(MANIFEST))?.unwrap_or(Manifest {
            version: 1,
            ..Manifest::default()
        });
        Ok(Store {
            annotations: read_ndjson(&root.join(ANNOTATIONS))?,
            proposals: read_ndjson(&root.join(PROPOSALS))?,
            decisions: read_ndjson(&root.join(DECISIONS))?,
            root,
            nomenclature,
            manifest,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn nomenclature(&self) -> &Nomenclature {
        &self.nomenclature
    }

    /// Replaces the vocabulary; every existing annotation must still use a
    /// listed class.
    pub fn set_nomenclature(&mut self, nomenclature: Nomenclature) -> Result<()> {
        nomenclature.validate()?;
        if let Some(a) = self.annotations.iter().find(|a| !nomenclature.contains(&a.class_name)) {
            return Err(Error::Integrity(format!(
                "annotation {} uses class `{}` missing from the new nomenclature",
                a.id, a.class_name
            )));
        }
        write_atomic(&self.root.join(NOMENCLATURE), &to_json_bytes(&nomenclature)?)?;
        self.nomenclature = nomenclature;
        Ok(())
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    fn save_manifest(&self) -> Result<()> {
        write_atomic(&self.root.join(MANIFEST), &to_json_bytes(&self.manifest)?)
    }

    // --- images -------------------------------------------------------

    /// Stores a PNG-encoded copy of `raster` under a content-derived id.
    /// Re-adding identical content is a no-op.
    pub fn put_image(&mut self, raster: &Raster) -> Result<ImageEntry> {
        let bytes = encode_png(raster);
        let sha256 = sha256_hex(&bytes);
        let id = format!("img-{}", &sha256[..16]);
        if let Some(e) = self.image(&id) {
            return Ok(e.clone());
        }
        let file = format!("images/{id}.png");
        write_atomic(&self.root.join(&file), &bytes)?;
        let entry = ImageEntry {
            id,
            file,
            width: raster.width(),
            height: raster.height(),
            sha256,
        };
        self.manifest.images.push(entry.clone());
        self.save_manifest()?;
        Ok(entry)
    }

    pub fn image(&self, id: &str) -> Option<&ImageEntry> {
        self.manifest.images.iter().find(|e| e.id == id)
    }

    pub fn list_images(&self) -> &[ImageEntry] {
        &self.manifest.images
    }

    pub fn image_bytes(&self, id: &str) -> Result<Vec<u8>> {
        let entry = self.image(id).ok_or_else(|| Error::NotFound(format!("image {id}")))?;
        let path = self.root.join(&entry.file);
        fs::read(&path).map_err(|e| Error::io(path, e))
    }

    pub fn load_image(&self, id: &str) -> Result<Raster> {
        let bytes = self.image_bytes(id)?;
        crate::imaging::decode_png(id, &bytes).map_err(|source| Error::Codec {
            path: self.root.join(format!("images/{id}.png")),
            source,
        })
    }

    // --- masks --------------------------------------------------------

    pub fn put_mask(&mut self, image_id: &str, mask: &ClassMask) -> Result<()> {
        self.put_masks(image_id, std::slice::from_ref(mask))
    }

    /// Stores several masks of one image with a single manifest rewrite.
    pub fn put_masks(&mut self, image_id: &str, masks: &[ClassMask]) -> Result<()> {
        let entry = self
            .image(image_id)
            .ok_or_else(|| Error::Integrity(format!("mask for unknown image {image_id}")))?;
        let (width, height) = (entry.width, entry.height);
        for mask in masks {
            if (width, height) != (mask.width(), mask.height()) {
                return Err(Error::Integrity(format!(
                    "mask {}x{} for image {width}x{height}",
                    mask.width(),
                    mask.height(),
                )));
            }
            if !self.nomenclature.contains(&mask.class_id) {
                return Err(Error::UnknownClass(mask.class_id.clone()));
            }
        }
        for mask in masks {
            let bytes = encode_mask_png(&mask.to_bools(), mask.width(), mask.height());
            let rel = format!("masks/{image_id}/{}.png", mask.class_id);
            write_atomic(&self.root.join(&rel), &bytes)?;
            self.manifest.files.insert(rel, sha256_hex(&bytes));
        }
        self.save_manifest()
    }

    /// Ground-truth masks of an image keyed by class; empty when none were stored.
    pub fn load_masks(&self, image_id: &str) -> Result<HashMap<String, ClassMask>> {
        let prefix = format!("masks/{image_id}/");
        let mut out = HashMap::new();
        for rel in self.manifest.files.keys().filter(|k| k.starts_with(&prefix)) {
            let class = rel[prefix.len()..].trim_end_matches(".png").to_owned();
            let path = self.root.join(rel);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let (w, h, bits) = decode_mask_png(&bytes).map_err(|source| Error::Codec { path, source })?;
            out.insert(class.clone(), ClassMask::from_bools(class, w, h, &bits)?);
        }
        Ok(out)
    }

    pub fn has_masks(&self, image_id: &str) -> bool {
        let prefix = format!("masks/{image_id}/");
        self.manifest.files.keys().any(|k| k.starts_with(&prefix))
    }

    // --- annotations --------------------------------------------------

    fn check_annotation(&self, rec: &AnnotationRecord) -> Result<()> {
        let entry = self
            .image(&rec.image_id)
            .ok_or_else(|| Error::Integrity(format!("annotation {} references missing image {}", rec.id, rec.image_id)))?;
        if !self.nomenclature.contains(&rec.class_name) {
            return Err(Error::UnknownClass(rec.class_name.clone()));
        }
        if !rec.geometry.fits_within(entry.width, entry.height) {
            return Err(Error::Validation(format!(
                "annotation geometry exceeds the {}x{} image",
                entry.width, entry.height
            )));
        }
        if self.annotations.iter().any(|a| a.id == rec.id) {
            return Err(Error::Conflict(format!("annotation {} already exists", rec.id)));
        }
        if let Some(p) = &rec.source_proposal {
            if self.proposal(p).is_none() {
                return Err(Error::Integrity(format!("annotation references missing proposal {p}")));
            }
        }
        Ok(())
    }

    pub fn put_annotation(&mut self, rec: AnnotationRecord) -> Result<()> {
        self.check_annotation(&rec)?;
        self.annotations.push(rec);
        self.save_annotations()
    }

    /// Adds many annotations with one file rewrite; all-or-nothing.
    pub fn put_annotations(&mut self, recs: Vec<AnnotationRecord>) -> Result<()> {
        let before = self.annotations.len();
        for rec in recs {
            if let Err(e) = self.check_annotation(&rec) {
                self.annotations.truncate(before);
                return Err(e);
            }
            self.annotations.push(rec);
        }
        self.save_annotations()
    }

    fn save_annotations(&self) -> Result<()> {
        write_atomic(&self.root.join(ANNOTATIONS), &to_ndjson(&self.annotations)?)
    }

    pub fn annotation(&self, id: &str) -> Option<&AnnotationRecord> {
        self.annotations.iter().find(|a| a.id == id)
    }

    pub fn list_annotations(&self, filter: &AnnotationFilter<'_>) -> Vec<&AnnotationRecord> {
        self.annotations
            .iter()
            .filter(|a| filter.image_id.is_none_or(|i| a.image_id == i))
            .filter(|a| filter.class.is_none_or(|c| a.class_name == c))
            .filter(|a| filter.origin.is_none_or(|o| a.origin == o))
            .collect()
    }

    // --- proposals ----------------------------------------------------

    /// Replaces the undecided proposals of `image_id` with `segments`.
    /// Decided proposals are kept as history.
    pub fn replace_proposals(&mut self, image_id: &str, segments: Vec<ProposedSegment>) -> Result<()> {
        if self.image(image_id).is_none() {
            return Err(Error::Integrity(format!("proposals for missing image {image_id}")));
        }
        for s in &segments {
            if s.image_id != image_id {
                return Err(Error::Integrity(format!("proposal {} belongs to image {}", s.id, s.image_id)));
            }
            if !self.nomenclature.contains(&s.class_id) || s.class_id == BACKGROUND {
                return Err(Error::UnknownClass(s.class_id.clone()));
            }
        }
        self.proposals
            .retain(|p| p.image_id != image_id || p.status != ProposalStatus::Proposed);
        for s in segments {
            if self.proposals.iter().any(|p| p.id == s.id) {
                // Already decided in an earlier run.
                continue;
            }
            self.proposals.push(s);
        }
        self.save_proposals()
    }

    fn save_proposals(&self) -> Result<()> {
        write_atomic(&self.root.join(PROPOSALS), &to_ndjson(&self.proposals)?)
    }

    pub fn proposal(&self, id: &str) -> Option<&ProposedSegment> {
        self.proposals.iter().find(|p| p.id == id)
    }

    pub fn list_proposals(&self, filter: &ProposalFilter<'_>) -> Vec<&ProposedSegment> {
        self.proposals
            .iter()
            .filter(|p| filter.image_id.is_none_or(|i| p.image_id == i))
            .filter(|p| filter.class.is_none_or(|c| p.class_id == c))
            .filter(|p| filter.status.is_none_or(|s| p.status == s))
            .collect()
    }

    // --- decisions ----------------------------------------------------

    /// Accepts a pending proposal, creating a polygon annotation from its hull
    /// or from `edited`.
    pub fn accept_proposal(
        &mut self,
        proposal_id: &str,
        annotator: &str,
        edited: Option<Polygon>,
    ) -> Result<AnnotationRecord> {
        let idx = self.pending_index(proposal_id)?;
        let p = &self.proposals[idx];
        let entry = self.image(&p.image_id).expect("proposal image checked on insert");
        let geometry = Geometry::Polygon {
            vertices: edited.clone().unwrap_or_else(|| p.hull.clone()),
        };
        if !geometry.fits_within(entry.width, entry.height) {
            return Err(Error::Validation("edited geometry exceeds the image".into()));
        }
        let now = Utc::now();
        let rec = AnnotationRecord {
            id: format!("ann-{}", uuid::Uuid::new_v4().simple()),
            image_id: p.image_id.clone(),
            geometry,
            class_name: p.class_id.clone(),
            annotator: annotator.to_owned(),
            created_at: now,
            origin: Origin::AcceptedProposal,
            source_proposal: Some(p.id.clone()),
        };
        let decision = DecisionRecord {
            proposal_id: proposal_id.to_owned(),
            decision: if edited.is_some() {
                Decision::AcceptWithEdit
            } else {
                Decision::Accept
            },
            edited_geometry: edited,
            annotator: annotator.to_owned(),
            timestamp: now,
        };
        self.proposals[idx].status = ProposalStatus::Accepted;
        self.annotations.push(rec.clone());
        self.decisions.push(decision);
        self.save_decisions()?;
        self.save_annotations()?;
        self.save_proposals()?;
        Ok(rec)
    }

    pub fn decline_proposal(&mut self, proposal_id: &str, annotator: &str) -> Result<DecisionRecord> {
        let idx = self.pending_index(proposal_id)?;
        let decision = DecisionRecord {
            proposal_id: proposal_id.to_owned(),
            decision: Decision::Decline,
            edited_geometry: None,
            annotator: annotator.to_owned(),
            timestamp: Utc::now(),
        };
        self.proposals[idx].status = ProposalStatus::Declined;
        self.decisions.push(decision.clone());
        self.save_decisions()?;
        self.save_proposals()?;
        Ok(decision)
    }

    fn pending_index(&self, proposal_id: &str) -> Result<usize> {
        let idx = self
            .proposals
            .iter()
            .position(|p| p.id == proposal_id)
            .ok_or_else(|| Error::NotFound(format!("proposal {proposal_id}")))?;
        if self.proposals[idx].status != ProposalStatus::Proposed {
            return Err(Error::Conflict(format!(
                "proposal {proposal_id} was already {:?}",
                self.proposals[idx].status
            )));
        }
        Ok(idx)
    }

    fn save_decisions(&self) -> Result<()> {
        write_atomic(&self.root.join(DECISIONS), &to_ndjson(&self.decisions)?)
    }

    pub fn list_decisions(&self, proposal_id: Option<&str>) -> Vec<&DecisionRecord> {
        self.decisions
            .iter()
            .filter(|d| proposal_id.is_none_or(|p| d.proposal_id == p))
            .collect()
    }

    /// Most recent decision for a proposal.
    pub fn live_decision(&self, proposal_id: &str) -> Option<&DecisionRecord> {
        self.decisions.iter().rev().find(|d| d.proposal_id == proposal_id)
    }

    // --- blobs --------------------------------------------------------

    pub fn model_path(&self, name: &str) -> PathBuf {
        self.root.join(format!("models/{name}.bin"))
    }

    pub fn put_model_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        self.put_file(&format!("models/{name}.bin"), bytes)
    }

    /// Saves `model` under its content version and makes it the current model.
    pub fn publish_model(&mut self, model: &SoftmaxModel<f64>) -> Result<String> {
        let version = model_version(model);
        self.put_model_bytes(&version, &model.to_bytes())?;
        let pointer = CurrentModel { version: version.clone() };
        self.put_file(CURRENT_MODEL, &to_json_bytes(&pointer)?)?;
        Ok(version)
    }

    /// Version of the current model, if one was published.
    pub fn current_model_version(&self) -> Result<Option<String>> {
        Ok(read_json::<CurrentModel>(&self.root.join(CURRENT_MODEL))?.map(|c| c.version))
    }

    pub fn load_model(&self, version: &str) -> Result<SoftmaxModel<f64>> {
        let path = self.model_path(version);
        if !path.exists() {
            return Err(Error::NotFound(format!("model {version}")));
        }
        load_model(&path)
    }

    /// The current model with its version.
    pub fn current_model(&self) -> Result<Option<(String, SoftmaxModel<f64>)>> {
        match self.current_model_version()? {
            Some(v) => Ok(Some((v.clone(), self.load_model(&v)?))),
            None => Ok(None),
        }
    }

    /// Writes a JSON document under `datasets/` or `reports/` and records its hash.
    pub fn put_json<T: Serialize>(&mut self, kind: JsonKind, name: &str, value: &T) -> Result<PathBuf> {
        let bytes = to_json_bytes(value)?;
        self.put_file(&format!("{}/{name}.json", kind.dir()), &bytes)
    }

    pub fn get_json<T: DeserializeOwned>(&self, kind: JsonKind, name: &str) -> Result<Option<T>> {
        read_json(&self.root.join(format!("{}/{name}.json", kind.dir())))
    }

    fn put_file(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.root.join(rel);
        write_atomic(&path, bytes)?;
        self.manifest.files.insert(rel.to_owned(), sha256_hex(bytes));
        self.save_manifest()?;
        Ok(path)
    }

    /// Checks every cross-record reference and file hash.
    pub fn audit(&self) -> Result<()> {
        for e in &self.manifest.images {
            let bytes = self.image_bytes(&e.id)?;
            if sha256_hex(&bytes) != e.sha256 {
                return Err(Error::Integrity(format!("image {} does not match its hash", e.id)));
            }
        }
        for a in &self.annotations {
            let entry = self
                .image(&a.image_id)
                .ok_or_else(|| Error::Integrity(format!("annotation {} has no image", a.id)))?;
            if !self.nomenclature.contains(&a.class_name) {
                return Err(Error::Integrity(format!("annotation {} has unknown class", a.id)));
            }
            if !a.geometry.fits_within(entry.width, entry.height) {
                return Err(Error::Integrity(format!("annotation {} exceeds its image", a.id)));
            }
            match (&a.origin, &a.source_proposal) {
                (Origin::AcceptedProposal, Some(p)) => {
                    if self.proposal(p).map(|p| p.status) != Some(ProposalStatus::Accepted) {
                        return Err(Error::Integrity(format!("annotation {} cites unaccepted proposal {p}", a.id)));
                    }
                }
                (Origin::AcceptedProposal, None) => {
                    return Err(Error::Integrity(format!("annotation {} lacks its source proposal", a.id)))
                }
                (Origin::Manual, _) => {}
            }
        }
        for p in &self.proposals {
            if self.image(&p.image_id).is_none() {
                return Err(Error::Integrity(format!("proposal {} has no image", p.id)));
            }
            let decided = self.live_decision(&p.id);
            match (p.status, decided.map(|d| d.decision)) {
                (ProposalStatus::Proposed, None)
                | (ProposalStatus::Declined, Some(Decision::Decline))
                | (ProposalStatus::Accepted, Some(Decision::Accept | Decision::AcceptWithEdit)) => {}
                (status, d) => {
                    return Err(Error::Integrity(format!(
                        "proposal {} has status {status:?} but live decision {d:?}",
                        p.id
                    )))
                }
            }
        }
        for d in &self.decisions {
            if self.proposal(&d.proposal_id).is_none() {
                return Err(Error::Integrity(format!("decision cites missing proposal {}", d.proposal_id)));
            }
        }
        for (rel, hash) in &self.manifest.files {
            let path = self.root.join(rel);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if &sha256_hex(&bytes) != hash {
                return Err(Error::Integrity(format!("{rel} does not match its hash")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JsonKind {
    Dataset,
    Report,
}

impl JsonKind {
    fn dir(self) -> &'static str {
        match self {
            JsonKind::Dataset => "datasets",
            JsonKind::Report => "reports",
        }
    }
}

fn to_json_bytes<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(v)?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<Option<T>> {
    match fs::read(path) {
        Ok(bytes) => serde_json::from_slice(&bytes)
            .map(Some)
            .map_err(|source| Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                source,
            }),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(Error::io(path, e)),
    }
}

/// One JSON document per line.
pub fn to_ndjson<T: Serialize>(records: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn parse_ndjson<T: DeserializeOwned>(path: &Path, text: &str) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|source| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                source,
            })
        })
        .collect()
}

fn read_ndjson<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    match fs::read_to_string(path) {
        Ok(text) => parse_ndjson(path, &text),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(Error::io(path, e)),
    }
}
