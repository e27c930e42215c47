//! Minimal JSON-over-HTTP client shared by the external adapters.

use std::time::Duration;

use base64::Engine;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::synthworld::RasterImage;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

/// POSTs `body` as JSON and decodes the JSON reply. Errors are rendered as text.
pub fn post_json<Req: Serialize, Resp: DeserializeOwned>(url: &str, body: &Req, timeout: Duration) -> Result<Resp, String> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .build()
        .into();
    let mut resp = agent.post(url).send_json(body).map_err(|e| format!("POST {url}: {e}"))?;
    resp.body_mut()
        .read_json::<Resp>()
        .map_err(|e| format!("decoding reply from {url}: {e}"))
}

/// PNG bytes of `img`, base64-encoded for JSON transport.
pub fn image_base64(img: &RasterImage) -> Result<String, String> {
    let bytes = img.to_png_bytes().map_err(|e| e.to_string())?;
    Ok(base64::engine::general_purpose::STANDARD.encode(bytes))
}
