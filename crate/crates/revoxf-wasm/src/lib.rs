//! Browser demo: a self-contained few-shot reconstruction of the built-in
//! analytic scene, driven interactively from a static page.
//!
//! Three operations are exposed: render the ground-truth scene from an
//! orbit camera, render the current state of the voxel field from the same
//! camera, and preview the depth-guided warp (voids black) that feeds
//! training. `train_steps` advances the real optimizer.

use wasm_bindgen::prelude::*;

use revoxf::data::oracle::{generate_oracle_dataset, render_oracle, SceneSpec};
use revoxf::img::ImageRgb;
use revoxf::render::render_image;
use revoxf::train::{StageConfig, StageWeights, Trainer, TrainConfig};
use revoxf::warp::forward_warp;

fn rgba_bytes(img: &ImageRgb) -> Vec<u8> {
    let mut out = Vec::with_capacity(img.len() * 4);
    for y in 0..img.height() {
        for x in 0..img.width() {
            let c = img.get(x, y);
            out.push((c[0].clamp(0.0, 1.0) * 255.0).round() as u8);
            out.push((c[1].clamp(0.0, 1.0) * 255.0).round() as u8);
            out.push((c[2].clamp(0.0, 1.0) * 255.0).round() as u8);
            out.push(255);
        }
    }
    out
}

/// Interactive demo state: the analytic scene, four posed input views,
/// and a trainer over a small voxel grid.
#[wasm_bindgen]
pub struct Demo {
    spec: SceneSpec,
    trainer: Trainer,
    size: u32,
}

#[wasm_bindgen]
impl Demo {
    /// Build the demo scene and trainer. `size` is the square image side
    /// used everywhere (keep it small; 96 to 128 is comfortable).
    #[wasm_bindgen(constructor)]
    pub fn new(size: u32, seed: u64) -> Result<Demo, JsError> {
        let size = size.clamp(32, 256);
        let mut spec = SceneSpec::sample_spec();
        spec.cameras.width = size;
        spec.cameras.height = size;
        let dataset = generate_oracle_dataset(&spec, 4, 0, seed, false);
        let weights = StageWeights {
            lambda_rel: 0.1,
            lambda_unr: 0.01,
            lambda_f: 0.03,
            lambda_d: 0.3,
            lambda_ds: 0.01,
            ..StageWeights::default()
        };
        let mut cfg = TrainConfig::desk_preset();
        cfg.seed = seed;
        cfg.batch_rays = 512;
        cfg.warp_refresh_period = 250;
        cfg.ds_patches_per_step = 1;
        cfg.stages = vec![StageConfig {
            dims: [48, 48, 48],
            steps: 100_000,
            lr_density: 0.1,
            lr_color: 0.01,
            weights,
        }];
        // A single long stage: the browser decides when to stop training.
        cfg.lr_decay = 1.0;
        let trainer = Trainer::new(dataset, cfg).map_err(|e| JsError::new(&e.to_string()))?;
        Ok(Demo {
            spec,
            trainer,
            size,
        })
    }

    fn orbit_camera(
        &self,
        polar_deg: f64,
        azimuth_deg: f64,
    ) -> Result<revoxf::geometry::Camera, JsError> {
        self.spec
            .cameras
            .camera_at(self.spec.scene.center(), polar_deg.clamp(5.0, 175.0), azimuth_deg)
            .map_err(|e| JsError::new(&e.to_string()))
    }

    /// Ground-truth render of the analytic scene (RGBA bytes for a canvas).
    pub fn oracle_view(&self, polar_deg: f64, azimuth_deg: f64) -> Result<Vec<u8>, JsError> {
        let cam = self.orbit_camera(polar_deg, azimuth_deg)?;
        let (rgb, _) = render_oracle(&self.spec.scene, &cam, self.spec.cameras.far);
        Ok(rgba_bytes(&rgb))
    }

    /// Render the current voxel field from an orbit camera.
    pub fn field_view(&self, polar_deg: f64, azimuth_deg: f64) -> Result<Vec<u8>, JsError> {
        let cam = self.orbit_camera(polar_deg, azimuth_deg)?;
        let (near, far) = self.trainer.near_far();
        let (rgb, _) = render_image(
            self.trainer.grid(),
            &cam,
            self.trainer.render_cfg(),
            near,
            far,
        )
        .map_err(|e| JsError::new(&e.to_string()))?;
        Ok(rgba_bytes(&rgb))
    }

    /// Warp the nearest input view to the orbit pose using the current
    /// field's depth; unfilled pixels stay black (the voids that drive the
    /// unreliability masks).
    pub fn warp_view(&self, polar_deg: f64, azimuth_deg: f64) -> Result<Vec<u8>, JsError> {
        let dst = self.orbit_camera(polar_deg, azimuth_deg)?;
        let dataset = self.trainer.dataset();
        // Nearest input view by camera position.
        let src = dataset
            .train
            .iter()
            .min_by(|a, b| {
                let da = (a.camera.position() - dst.position()).norm();
                let db = (b.camera.position() - dst.position()).norm();
                da.total_cmp(&db)
            })
            .ok_or_else(|| JsError::new("no input views"))?;
        let (near, far) = self.trainer.near_far();
        let (_, src_depth) = render_image(
            self.trainer.grid(),
            &src.camera,
            self.trainer.render_cfg(),
            near,
            far,
        )
        .map_err(|e| JsError::new(&e.to_string()))?;
        let warp = forward_warp(&src.rgb, &src_depth, &src.camera, &dst)
            .map_err(|e| JsError::new(&e.to_string()))?;
        let mut img = warp.rgb;
        for y in 0..img.height() {
            for x in 0..img.width() {
                if warp.m_warp.get(x, y) {
                    img.set(x, y, [0.0, 0.0, 0.0]);
                }
            }
        }
        Ok(rgba_bytes(&img))
    }

    /// One of the four training input views (RGBA bytes).
    pub fn input_view(&self, index: usize) -> Result<Vec<u8>, JsError> {
        let dataset = self.trainer.dataset();
        let view = dataset
            .train
            .get(index)
            .ok_or_else(|| JsError::new("view index out of range"))?;
        Ok(rgba_bytes(&view.rgb))
    }

    pub fn input_view_count(&self) -> usize {
        self.trainer.dataset().train.len()
    }

    /// Advance the optimizer by `n` steps; returns a JSON summary of the
    /// last step's losses.
    pub fn train_steps(&mut self, n: u32) -> Result<String, JsError> {
        let mut last = None;
        for _ in 0..n {
            if self.trainer.is_done() {
                break;
            }
            last = Some(
                self.trainer
                    .step()
                    .map_err(|e| JsError::new(&e.to_string()))?,
            );
        }
        match last {
            Some(record) => {
                serde_json::to_string(&record).map_err(|e| JsError::new(&e.to_string()))
            }
            None => Ok("{}".into()),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.trainer.global_step()
    }

    pub fn image_size(&self) -> u32 {
        self.size
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn demo_trains_and_renders_on_host() {
        let mut demo = Demo::new(48, 7).unwrap();
        assert_eq!(demo.input_view_count(), 4);
        let oracle = demo.oracle_view(60.0, 30.0).unwrap();
        assert_eq!(oracle.len(), 48 * 48 * 4);
        let before = demo.field_view(60.0, 30.0).unwrap();
        let json = demo.train_steps(3).unwrap();
        assert!(json.contains("l_total"));
        assert_eq!(demo.steps_taken(), 3);
        let after = demo.field_view(60.0, 30.0).unwrap();
        assert_eq!(after.len(), before.len());
        let warped = demo.warp_view(62.0, 35.0).unwrap();
        assert_eq!(warped.len(), 48 * 48 * 4);
        let input = demo.input_view(0).unwrap();
        assert_eq!(input.len(), 48 * 48 * 4);
    }
}
