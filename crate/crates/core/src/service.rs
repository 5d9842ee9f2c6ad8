//! Inference on a frozen checkpoint: PNG rendering shared by the CLI and
//! the HTTP service.

use std::io::Cursor;
use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::Serialize;
use serde_json::{json, Value};

use crate::layout::{CategorySet, LayoutFile, StyleCodes, StyleSeeds, StyleSpec, Violation, DEFAULT_MAX_BOXES};
use crate::networks::{GenOptions, Generator};
use crate::objectives::{Checkpoint, ObjectiveError, Trainer};
use crate::tensor::Tensor;

/// Fixed category colours for label maps; background is black.
pub const PALETTE: [[u8; 3]; 8] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [255, 225, 25],
    [145, 30, 180],
    [70, 240, 240],
    [245, 130, 48],
];

fn encode(pixels: &[u8], r: usize, color: image::ExtendedColorType) -> Vec<u8> {
    let mut out = Cursor::new(Vec::new());
    image::write_buffer_with_format(&mut out, pixels, r as u32, r as u32, color, image::ImageFormat::Png)
        .expect("in-memory png encoding");
    out.into_inner()
}

fn to_byte(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// `3×R×R` in `[−1, 1]` to an RGB PNG.
pub fn image_png(image: &Tensor<f32>) -> Vec<u8> {
    let r = image.shape()[1];
    let d = image.data();
    let px: Vec<u8> = (0..r * r * 3).map(|k| to_byte((d[(k % 3) * r * r + k / 3] as f64 + 1.0) * 127.5)).collect();
    encode(&px, r, image::ExtendedColorType::Rgb8)
}

pub fn label_png(labels: &[usize], r: usize) -> Vec<u8> {
    let px: Vec<u8> = labels.iter().flat_map(|&l| PALETTE[l % PALETTE.len()]).collect();
    encode(&px, r, image::ExtendedColorType::Rgb8)
}

/// Soft mask in `[0, 1]` to a grayscale PNG.
pub fn mask_png(mask: &[f32], r: usize) -> Vec<u8> {
    let px: Vec<u8> = mask.iter().map(|&v| to_byte(v as f64 * 255.0)).collect();
    encode(&px, r, image::ExtendedColorType::L8)
}

#[derive(Clone, Debug, Serialize)]
pub struct InstanceMask {
    pub index: usize,
    pub label: String,
    /// Base64 grayscale PNG.
    pub png: String,
}

/// Everything produced for one layout.
#[derive(Clone, Debug)]
pub struct Rendered {
    pub image_png: Vec<u8>,
    pub label_png: Vec<u8>,
    /// Foreground instances in layout order.
    pub mask_pngs: Vec<Vec<u8>>,
    pub style: StyleSpec,
}

#[derive(Debug, thiserror::Error)]
pub enum RenderError {
    #[error("layout violations")]
    Invalid(Vec<Violation>),
    #[error("{0}")]
    Mismatch(String),
    #[error("internal: {0}")]
    Internal(String),
}

impl RenderError {
    fn status(&self) -> StatusCode {
        match self {
            RenderError::Invalid(_) => StatusCode::BAD_REQUEST,
            RenderError::Mismatch(_) => StatusCode::UNPROCESSABLE_ENTITY,
            RenderError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

/// A read-only generator snapshot.
pub struct Model {
    pub generator: Generator<f32>,
    pub categories: CategorySet,
    /// Forces every mask blend weight to zero.
    pub alpha_zero: bool,
}

impl Model {
    pub fn from_checkpoint(ckpt: &Checkpoint, alpha_zero: bool) -> Result<Self, ObjectiveError> {
        let t = Trainer::from_checkpoint(ckpt)?;
        Ok(Model { generator: t.generator, categories: t.categories, alpha_zero })
    }

    pub fn resolution(&self) -> usize {
        self.generator.config.resolution
    }

    pub fn render(&self, file: &LayoutFile) -> Result<Rendered, RenderError> {
        if file.categories != self.categories {
            return Err(RenderError::Invalid(vec![Violation {
                index: None,
                message: format!("category set `{}` is not served by this model", file.categories.name),
            }]));
        }
        file.layout.validate(&self.categories, DEFAULT_MAX_BOXES).map_err(RenderError::Invalid)?;
        let r = self.resolution();
        if file.layout.lattice != (r, r) {
            return Err(RenderError::Mismatch(format!(
                "lattice {:?} does not match model resolution {r}x{r}",
                file.layout.lattice
            )));
        }
        let layout = file.layout.with_background().map_err(|e| RenderError::Internal(e.to_string()))?;
        let spec = file.style.clone().unwrap_or(StyleSpec { seed: 0, per_object_seeds: None });
        let seeds = StyleSeeds::from_spec(&spec, layout.boxes.len()).map_err(|e| {
            RenderError::Invalid(vec![Violation { index: None, message: e.to_string() }])
        })?;
        let cfg = &self.generator.config;
        let styles = StyleCodes::sample(&seeds, cfg.d_img, cfg.d_obj);
        let opts = GenOptions { alpha_override: self.alpha_zero.then_some(0.0) };
        let syn = self.generator.synthesize(&layout, &styles, &opts).map_err(|e| RenderError::Internal(e.to_string()))?;
        if !syn.image.is_finite() {
            return Err(RenderError::Internal("non-finite output".into()));
        }
        let mask_pngs = (1..layout.boxes.len()).map(|i| mask_png(syn.masks.select(i).data(), r)).collect();
        Ok(Rendered {
            image_png: image_png(&syn.image),
            label_png: label_png(&syn.label_map, r),
            mask_pngs,
            style: seeds.to_spec(),
        })
    }

    /// The `/synthesize` response body for a layout document.
    pub fn synthesize_json(&self, body: Value) -> Result<Value, RenderError> {
        let file = LayoutFile::from_json(body).map_err(|e| RenderError::Invalid(vec![Violation { index: None, message: e.to_string() }]))?;
        let out = self.render(&file)?;
        let skip = usize::from(file.layout.has_background());
        let masks: Vec<InstanceMask> = out
            .mask_pngs
            .iter()
            .zip(&file.layout.boxes[skip..])
            .enumerate()
            .map(|(index, (png, b))| InstanceMask { index, label: self.categories.names[b.label].clone(), png: BASE64.encode(png) })
            .collect();
        Ok(json!({
            "image": BASE64.encode(&out.image_png),
            "label_map": BASE64.encode(&out.label_png),
            "masks": masks,
            "style": out.style,
            "resolution": self.resolution(),
        }))
    }
}

impl IntoResponse for RenderError {
    fn into_response(self) -> Response {
        let status = self.status();
        let body = match &self {
            RenderError::Invalid(v) => json!({"error": "invalid layout", "violations": v}),
            other => json!({"error": other.to_string()}),
        };
        (status, Json(body)).into_response()
    }
}

async fn synthesize(State(model): State<Arc<Model>>, Json(body): Json<Value>) -> Result<Json<Value>, RenderError> {
    let m = model.clone();
    tokio::task::spawn_blocking(move || m.synthesize_json(body))
        .await
        .map_err(|e| RenderError::Internal(e.to_string()))?
        .map(Json)
}

async fn categories(State(model): State<Arc<Model>>) -> Json<Value> {
    Json(json!({"name": model.categories.name, "names": model.categories.names}))
}

async fn health(State(model): State<Arc<Model>>) -> Json<Value> {
    Json(json!({"status": "ok", "resolution": model.resolution()}))
}

pub fn router(model: Arc<Model>) -> Router {
    Router::new()
        .route("/synthesize", post(synthesize))
        .route("/categories", get(categories))
        .route("/health", get(health))
        .with_state(model)
}

pub async fn serve(model: Arc<Model>, port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(("127.0.0.1", port)).await?;
    axum::serve(listener, router(model)).await
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::GeneratorConfig;

    pub(crate) fn tiny_model(alpha_zero: bool) -> Model {
        let cfg = GeneratorConfig {
            resolution: 16,
            channels: vec![8, 8, 4],
            d_img: 8,
            d_embed: 8,
            d_obj: 8,
            mask_size: 8,
            mask_channels: 4,
        };
        let categories = CategorySet::shapes();
        Model { generator: Generator::new(cfg, categories.len(), 1).unwrap(), categories, alpha_zero }
    }

    fn body() -> Value {
        json!({
            "lattice": [16, 16],
            "categories": "shapes",
            "boxes": [
                {"label": "circle", "box": [0.1, 0.1, 0.5, 0.5]},
                {"label": "star", "box": [0.4, 0.3, 0.9, 0.9]}
            ],
            "style": {"seed": 5}
        })
    }

    #[test]
    fn pngs_decode_to_expected_shapes() {
        let t = Tensor::from_fn(&[3, 4, 4], |i| if i < 16 { 1.0 } else { -1.0 });
        let img = image::load_from_memory(&image_png(&t)).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (4, 4));
        assert_eq!(img.get_pixel(0, 0).0, [255, 0, 0]);
        let l = image::load_from_memory(&label_png(&[0, 1, 2, 3], 2)).unwrap().to_rgb8();
        assert_eq!(l.get_pixel(1, 0).0, PALETTE[1]);
    }

    #[test]
    fn synthesize_is_deterministic_and_echoes_seeds() {
        let m = tiny_model(false);
        let a = m.synthesize_json(body()).unwrap();
        assert_eq!(a, m.synthesize_json(body()).unwrap());
        assert_eq!(a["masks"].as_array().unwrap().len(), 2);
        assert_eq!(a["style"]["per_object_seeds"].as_array().unwrap().len(), 3);
    }

    #[test]
    fn errors_map_to_statuses() {
        let m = tiny_model(false);
        let mut b = body();
        b["boxes"][0]["box"] = json!([0.5, 0.1, 0.5, 0.4]);
        let e = m.synthesize_json(b).unwrap_err();
        assert_eq!(e.status(), StatusCode::BAD_REQUEST);
        assert!(matches!(&e, RenderError::Invalid(v) if v[0].message == "empty box"));
        let mut b = body();
        b["lattice"] = json!([32, 32]);
        assert_eq!(m.synthesize_json(b).unwrap_err().status(), StatusCode::UNPROCESSABLE_ENTITY);
    }

    #[test]
    fn reseeding_one_instance_keeps_other_masks_at_zero_blend() {
        let m = tiny_model(true);
        let a = m.synthesize_json(body()).unwrap();
        let mut seeds: Vec<u64> = a["style"]["per_object_seeds"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
        seeds[2] ^= 0xdead;
        let mut b = body();
        b["style"] = json!({"seed": 5, "per_object_seeds": seeds});
        let b = m.synthesize_json(b).unwrap();
        assert_eq!(a["masks"][0], b["masks"][0]);
        assert_ne!(a["masks"][1], b["masks"][1]);
    }
}
