//! Newline-delimited JSON messages exchanged with a heuristic service.

use super::{ActionDistribution, HeatMap, HeuristicOutput, HEATMAP_CELLS};
use crate::observation::{Raster, RASTER_BYTES};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    pub v: u32,
    pub episode: u64,
    pub step: u64,
    pub raster_b64: String,
    pub reset: bool,
}

impl Request {
    pub fn new(episode: u64, step: u64, raster: &Raster, reset: bool) -> Self {
        Self {
            v: PROTOCOL_VERSION,
            episode,
            step,
            raster_b64: raster.to_base64(),
            reset,
        }
    }

    /// One line, without the trailing newline.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("request serializes")
    }

    pub fn parse(line: &str) -> Result<Self, String> {
        let r: Request = serde_json::from_str(line).map_err(|e| format!("parse: {e}"))?;
        if r.v != PROTOCOL_VERSION {
            return Err(format!("unsupported version {}", r.v));
        }
        let raw = STANDARD.decode(&r.raster_b64).map_err(|e| format!("raster: {e}"))?;
        if raw.len() != RASTER_BYTES {
            return Err(format!("raster has {} bytes, expected {RASTER_BYTES}", raw.len()));
        }
        Ok(r)
    }

    pub fn raster(&self) -> Option<Raster> {
        let data = STANDARD.decode(&self.raster_b64).ok()?;
        (data.len() == RASTER_BYTES).then_some(Raster { data })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ResponseWire {
    v: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mean: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    std: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    heatmap_b64: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Response {
    Output(HeuristicOutput),
    Error(String),
}

impl Response {
    pub fn to_line(&self) -> String {
        let wire = match self {
            Response::Output(o) => ResponseWire {
                v: PROTOCOL_VERSION,
                mean: Some(o.policy.mean.to_vec()),
                std: Some(o.policy.std.to_vec()),
                value: Some(o.value),
                heatmap_b64: Some(encode_heatmap(&o.heatmap)),
                error: None,
            },
            Response::Error(e) => ResponseWire {
                v: PROTOCOL_VERSION,
                mean: None,
                std: None,
                value: None,
                heatmap_b64: None,
                error: Some(e.clone()),
            },
        };
        serde_json::to_string(&wire).expect("response serializes")
    }

    /// Malformed responses are reported as `Err` with a description.
    pub fn parse(line: &str) -> Result<Self, String> {
        let w: ResponseWire = serde_json::from_str(line).map_err(|e| format!("malformed response: {e}"))?;
        if w.v != PROTOCOL_VERSION {
            return Err(format!("unsupported protocol version {}", w.v));
        }
        if let Some(e) = w.error {
            return Ok(Response::Error(e));
        }
        let four = |v: Option<Vec<f64>>, name: &str| -> Result<[f64; 4], String> {
            let v = v.ok_or_else(|| format!("missing `{name}`"))?;
            <[f64; 4]>::try_from(v.as_slice()).map_err(|_| format!("`{name}` must have 4 entries"))
        };
        let mean = four(w.mean, "mean")?;
        let std = four(w.std, "std")?;
        let value = w.value.ok_or("missing `value`")?;
        let heatmap = decode_heatmap(w.heatmap_b64.as_deref().ok_or("missing `heatmap_b64`")?)?;
        let policy = ActionDistribution { mean, std };
        if !policy.is_valid() || !value.is_finite() {
            return Err("non-finite or non-positive policy parameters".into());
        }
        Ok(Response::Output(HeuristicOutput { policy, value, heatmap }))
    }
}

pub fn encode_heatmap(h: &HeatMap) -> String {
    let bytes: Vec<u8> = h.values().iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

pub fn decode_heatmap(b64: &str) -> Result<HeatMap, String> {
    let bytes = STANDARD.decode(b64).map_err(|e| format!("heatmap: {e}"))?;
    if bytes.len() != HEATMAP_CELLS * 4 {
        return Err(format!("heatmap has {} bytes, expected {}", bytes.len(), HEATMAP_CELLS * 4));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    HeatMap::from_values(values).ok_or_else(|| "heatmap size".into())
}
