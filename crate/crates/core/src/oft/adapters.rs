//! Subject localisation for mask construction.
//!
//! Detector protocol: `POST {"image": <base64 PNG>, "subject": <phrase>}` →
//! `{"boxes": [[x1, y1, x2, y2], ...], "scores": [...]}` in pixel units.
//! Subject-extraction protocol: `POST {"prompt": <text>}` → `{"subject": <phrase>}`.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{OftError, SubjectBox};
use crate::http::{image_base64, post_json, DEFAULT_TIMEOUT};
use crate::synthworld::{detect_subject_box, RasterImage};

pub const DETECTOR_URL_ENV: &str = "SCIALIGN_DETECTOR_URL";
pub const SUBJECT_URL_ENV: &str = "SCIALIGN_SUBJECT_URL";

/// Finds the subject of `prompt` in `image`; `None` when nothing is found.
pub trait SubjectLocator {
    fn locate(&self, image: &RasterImage, prompt: &str) -> Result<Option<SubjectBox>, OftError>;
}

/// Bounding box of saturated pixels; backgrounds in the synthetic world are grey.
#[derive(Clone, Copy, Debug, Default)]
pub struct SaturationLocator;

impl SubjectLocator for SaturationLocator {
    fn locate(&self, image: &RasterImage, _prompt: &str) -> Result<Option<SubjectBox>, OftError> {
        Ok(detect_subject_box(image).map(SubjectBox::from))
    }
}

#[derive(Serialize)]
struct SubjectRequest<'a> {
    prompt: &'a str,
}

#[derive(Deserialize)]
struct SubjectResponse {
    subject: String,
}

/// Language-model adapter that reduces a prompt to its subject phrase.
#[derive(Clone, Debug)]
pub struct HttpSubjectExtractor {
    pub endpoint: String,
    pub timeout: Duration,
}

impl HttpSubjectExtractor {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            timeout: DEFAULT_TIMEOUT,
        }
    }

    pub fn from_env() -> Option<Self> {
        std::env::var(SUBJECT_URL_ENV).ok().map(Self::new)
    }

    pub fn extract(&self, prompt: &str) -> Result<String, OftError> {
        let r: SubjectResponse =
            post_json(&self.endpoint, &SubjectRequest { prompt }, self.timeout).map_err(OftError::Adapter)?;
        let s = r.subject.trim();
        if s.is_empty() {
            return Err(OftError::Adapter(format!("empty subject for {prompt:?}")));
        }
        Ok(s.to_string())
    }
}

#[derive(Serialize)]
struct DetectRequest<'a> {
    image: String,
    subject: &'a str,
}

#[derive(Deserialize)]
struct DetectResponse {
    boxes: Vec<[f64; 4]>,
    scores: Vec<f64>,
}

/// Open-vocabulary detector adapter; keeps the best box scoring at least `min_score`.
#[derive(Clone, Debug)]
pub struct HttpDetector {
    pub endpoint: String,
    pub min_score: f64,
    pub extractor: Option<HttpSubjectExtractor>,
    pub timeout: Duration,
}

impl HttpDetector {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            min_score: 0.3,
            extractor: None,
            timeout: DEFAULT_TIMEOUT,
        }
    }

    pub fn from_env() -> Option<Self> {
        let mut d = Self::new(std::env::var(DETECTOR_URL_ENV).ok()?);
        d.extractor = HttpSubjectExtractor::from_env();
        Some(d)
    }
}

impl SubjectLocator for HttpDetector {
    fn locate(&self, image: &RasterImage, prompt: &str) -> Result<Option<SubjectBox>, OftError> {
        let subject = match &self.extractor {
            Some(x) => x.extract(prompt)?,
            None => prompt.to_string(),
        };
        let req = DetectRequest {
            image: image_base64(image).map_err(OftError::Adapter)?,
            subject: &subject,
        };
        let r: DetectResponse = post_json(&self.endpoint, &req, self.timeout).map_err(OftError::Adapter)?;
        if r.boxes.len() != r.scores.len() {
            return Err(OftError::Adapter(format!(
                "{} boxes but {} scores",
                r.boxes.len(),
                r.scores.len()
            )));
        }
        let (w, h) = (image.width as f64, image.height as f64);
        let best = r
            .boxes
            .iter()
            .zip(&r.scores)
            .filter(|(_, &s)| s >= self.min_score)
            .max_by(|a, b| a.1.total_cmp(b.1));
        Ok(best.map(|(b, _)| {
            let cx = |v: f64| v.clamp(0.0, w);
            let cy = |v: f64| v.clamp(0.0, h);
            SubjectBox::new(cx(b[0].min(b[2])), cy(b[1].min(b[3])), cx(b[0].max(b[2])), cy(b[1].max(b[3])))
        }))
    }
}
