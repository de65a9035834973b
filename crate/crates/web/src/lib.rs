//! Browser demo over a small model trained on page load.
//!
//! [`Demo`] holds all state and is plain Rust so it can be tested natively;
//! [`Studio`] is the wasm-bindgen face of it. The page in `www/` draws the
//! mesh on a 2D canvas.

use deform_core::datagen::{make_dataset, SynthSpec, TemplateKind};
use deform_core::fitting::{edit_point_handles, EditConfig, HandleConstraint};
use deform_core::model::HyperDecoder;
use deform_core::semantics::{apply_semantic, train_direction, SemanticDirection, SvmConfig};
use deform_core::training::{train, TrainConfig};
use deform_core::{LatentCode, ModelConfig, TriMesh};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

pub const MAX_SUBDIV: usize = 2;

/// Training setup for the in-page model. Small enough to train in a couple
/// of seconds in a browser.
pub fn demo_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        arch: ModelConfig {
            latent_dim: 4,
            siren_hidden: 16,
            siren_hidden_layers: 2,
            hyper_hidden: 16,
            omega0: 10.0,
            hyper_out_scale: 1e-2,
        },
        n_samples: 60,
        lr: 1e-3,
        lambda_reg: 100.0,
        max_epochs: 300,
        seed,
        ..Default::default()
    }
}

#[derive(Clone)]
pub struct Demo {
    model: HyperDecoder,
    direction: SemanticDirection,
    edit: EditConfig,
    /// Latent the current edit started from.
    z0: LatentCode,
    current: LatentCode,
    subdiv: usize,
    mesh: TriMesh,
}

impl Demo {
    /// Generate a dataset, train on it and learn one semantic direction: the
    /// sign of the first generator coefficient ("bulge").
    pub fn new(seed: u64) -> Result<Self, String> {
        let data = make_dataset(&SynthSpec {
            template: TemplateKind::Icosphere { subdiv: 1 },
            k: 2,
            amplitude: 0.2,
            examples: 8,
            seed,
            ..Default::default()
        })
        .map_err(|e| e.to_string())?;
        let outcome = train(&data.template, &data.examples, &[], &demo_train_config(seed), &mut |_| {})
            .map_err(|e| e.to_string())?;
        let model = outcome.model;
        let latents: Vec<LatentCode> =
            (0..model.latent_count()).map(|i| model.latent(i)).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
        let labels: Vec<i8> = data.coeffs.iter().map(|c| if c[0] >= 0.0 { 1 } else { -1 }).collect();
        let direction = train_direction("bulge", &latents, &labels, &SvmConfig { steps: 2000, lr: 1e-2, ..Default::default() })
            .map_err(|e| e.to_string())?;
        let z = model.mean_latent().map_err(|e| e.to_string())?;
        let mesh = model.decode_mesh(&z, 0).map_err(|e| e.to_string())?;
        Ok(Self {
            model,
            direction,
            edit: EditConfig { lambda_pre: 10.0, steps: 150, ..Default::default() },
            z0: z.clone(),
            current: z,
            subdiv: 0,
            mesh,
        })
    }

    pub fn model(&self) -> &HyperDecoder {
        &self.model
    }

    pub fn mesh(&self) -> &TriMesh {
        &self.mesh
    }

    pub fn latent(&self) -> &LatentCode {
        &self.current
    }

    pub fn direction(&self) -> &SemanticDirection {
        &self.direction
    }

    fn redecode(&mut self) -> Result<(), String> {
        self.mesh = self.model.decode_mesh(&self.current, self.subdiv).map_err(|e| e.to_string())?;
        Ok(())
    }

    fn set_current(&mut self, z: LatentCode) -> Result<(), String> {
        self.current = z;
        self.redecode()
    }

    /// Draw a fresh latent and start editing from it.
    pub fn sample(&mut self, seed: u64) -> Result<(), String> {
        let z = self.model.sample_latent(&mut ChaCha8Rng::seed_from_u64(seed)).map_err(|e| e.to_string())?;
        self.z0 = z.clone();
        self.set_current(z)
    }

    pub fn set_subdiv(&mut self, level: usize) -> Result<(), String> {
        if level > MAX_SUBDIV {
            return Err(format!("subdivision level {level} exceeds {MAX_SUBDIV}"));
        }
        self.subdiv = level;
        self.redecode()
    }

    pub fn subdiv(&self) -> usize {
        self.subdiv
    }

    /// Move one template vertex by `delta` relative to its position under
    /// the edit's starting latent. Returns the remaining handle error.
    pub fn drag(&mut self, vertex: usize, delta: [f64; 3]) -> Result<f64, String> {
        let h = HandleConstraint { vertex, dx: delta[0], dy: delta[1], dz: delta[2] };
        let r = edit_point_handles(&self.model, &self.z0, &[h], &self.edit).map_err(|e| e.to_string())?;
        self.set_current(r.z)?;
        let base = self.model.decode_vertices(&self.z0).map_err(|e| e.to_string())?;
        let now = self.model.decode_vertices(&self.current).map_err(|e| e.to_string())?;
        Ok((0..3).map(|k| (now[[vertex, k]] - base[[vertex, k]] - delta[k]).powi(2)).sum::<f64>().sqrt())
    }

    /// Slide along the semantic direction; `alpha` is measured from the
    /// edit's starting latent so the slider is absolute.
    pub fn semantic(&mut self, alpha: f64) -> Result<(), String> {
        let z = apply_semantic(&self.z0, &self.direction, alpha).map_err(|e| e.to_string())?;
        self.set_current(z)
    }

    /// Make the current latent the new starting point.
    pub fn commit(&mut self) {
        self.z0 = self.current.clone();
    }

    pub fn positions(&self) -> Vec<f32> {
        self.mesh.vertices().iter().flat_map(|v| v.map(|c| c as f32)).collect()
    }

    pub fn indices(&self) -> Vec<u32> {
        self.mesh.faces().iter().flat_map(|f| f.map(|i| i as u32)).collect()
    }
}

fn js_err(e: String) -> JsValue {
    JsValue::from_str(&e)
}

#[wasm_bindgen]
pub struct Studio(Demo);

#[wasm_bindgen]
impl Studio {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<Studio, JsValue> {
        Demo::new(seed as u64).map(Studio).map_err(js_err)
    }

    pub fn sample(&mut self, seed: u32) -> Result<(), JsValue> {
        self.0.sample(seed as u64).map_err(js_err)
    }

    #[wasm_bindgen(js_name = setSubdiv)]
    pub fn set_subdiv(&mut self, level: u32) -> Result<(), JsValue> {
        self.0.set_subdiv(level as usize).map_err(js_err)
    }

    pub fn drag(&mut self, vertex: u32, dx: f64, dy: f64, dz: f64) -> Result<f64, JsValue> {
        self.0.drag(vertex as usize, [dx, dy, dz]).map_err(js_err)
    }

    pub fn semantic(&mut self, alpha: f64) -> Result<(), JsValue> {
        self.0.semantic(alpha).map_err(js_err)
    }

    pub fn commit(&mut self) {
        self.0.commit();
    }

    /// Vertices of the unsubdivided template; only these can be dragged.
    #[wasm_bindgen(js_name = baseVertexCount)]
    pub fn base_vertex_count(&self) -> u32 {
        self.0.model().template.vertex_count() as u32
    }

    pub fn positions(&self) -> Vec<f32> {
        self.0.positions()
    }

    pub fn indices(&self) -> Vec<u32> {
        self.0.indices()
    }

    pub fn latent(&self) -> Vec<f64> {
        self.0.latent().0.clone()
    }

    /// The current mesh as the service's binary payload.
    pub fn payload(&self) -> Vec<u8> {
        self.0.mesh().to_payload()
    }
}
