//! WebAssembly bindings for the browser demo: scene previews, anchor
//! windows and blended plane refinement.

use gaussianssc::anchoring::{anchor_weights, AnchorParams};
use gaussianssc::geometry::{VoxelGridSpec, EMPTY, UNKNOWN};
use gaussianssc::refinement::{Blend, GlobalAggregate, LocalGather};
use gaussianssc::synth::{generate_sample, CameraSpec, SuiteParams};
use gaussianssc::tensor::{Kernel, NdBuffer};
use gaussianssc::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

fn js(e: gaussianssc::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Top-down and camera views of one synthetic sample.
#[wasm_bindgen]
pub struct ScenePreview {
    grid_x: usize,
    grid_y: usize,
    top: Vec<u8>,
    seeds: Vec<u8>,
    image_w: usize,
    image_h: usize,
    image: Vec<u8>,
    queries: usize,
}

#[wasm_bindgen]
impl ScenePreview {
    #[wasm_bindgen(getter)]
    pub fn grid_x(&self) -> usize {
        self.grid_x
    }

    #[wasm_bindgen(getter)]
    pub fn grid_y(&self) -> usize {
        self.grid_y
    }

    /// Label of the highest occupied voxel per column, `x`-major; 255 where
    /// the column is occupied but unobserved.
    #[wasm_bindgen(getter)]
    pub fn top(&self) -> Vec<u8> {
        self.top.clone()
    }

    /// 1 where a column holds at least one seed query.
    #[wasm_bindgen(getter)]
    pub fn seeds(&self) -> Vec<u8> {
        self.seeds.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn image_w(&self) -> usize {
        self.image_w
    }

    #[wasm_bindgen(getter)]
    pub fn image_h(&self) -> usize {
        self.image_h
    }

    /// Class decoded from the finest feature level, row-major.
    #[wasm_bindgen(getter)]
    pub fn image(&self) -> Vec<u8> {
        self.image.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn queries(&self) -> usize {
        self.queries
    }
}

pub fn build_preview(seed: u64, noise_sigma: f64, jitter: f64, dropout: f64) -> Result<ScenePreview> {
    let grid = VoxelGridSpec::desk_default();
    let params = SuiteParams {
        noise_sigma,
        jitter,
        dropout,
        ..SuiteParams::default()
    };
    params.validate()?;
    let sample = generate_sample(grid, &CameraSpec::default(), &params, seed)?;
    let vol = &sample.volume;
    let [gx, gy, gz] = grid.dims;
    let mut top = vec![EMPTY; gx * gy];
    for x in 0..gx {
        for y in 0..gy {
            if let Some(z) = (0..gz).rev().find(|&z| vol.occupancy[grid.linear([x, y, z])]) {
                top[x * gy + y] = vol.labels[grid.linear([x, y, z])];
            }
        }
    }
    let mut seeds = vec![0; gx * gy];
    for q in &sample.queries {
        seeds[q.idx[0] * gy + q.idx[1]] = 1;
    }
    let fine = &sample.levels[0].0;
    let (h, w, c) = (fine.shape()[0], fine.shape()[1], fine.shape()[2]);
    let image = (0..h * w)
        .map(|t| {
            let f = &fine.data()[t * c..t * c + params.num_classes];
            (0..f.len()).max_by(|&a, &b| f[a].total_cmp(&f[b])).unwrap_or(0) as u8
        })
        .collect();
    Ok(ScenePreview {
        grid_x: gx,
        grid_y: gy,
        top,
        seeds,
        image_w: w,
        image_h: h,
        image,
        queries: sample.queries.len(),
    })
}

/// Seeded synthetic scene with its seed queries and rendered features.
#[wasm_bindgen]
pub fn scene_preview(seed: u32, noise_sigma: f64, jitter: f64, dropout: f64) -> std::result::Result<ScenePreview, JsError> {
    build_preview(seed as u64, noise_sigma, jitter, dropout).map_err(js)
}

/// Normalized anchor window centered on a texel, `(2r+1)^2` row-major.
#[wasm_bindgen]
pub fn anchor_window_weights(
    sigma_u: f64,
    sigma_v: f64,
    delta_u: f64,
    delta_v: f64,
    radius: usize,
) -> std::result::Result<Vec<f64>, JsError> {
    let params = AnchorParams {
        delta: [delta_u, delta_v],
        sigma: [sigma_u, sigma_v],
        alpha: 1.0,
    };
    anchor_weights(&params, params.delta, radius).map(|w| w.into_data()).map_err(js)
}

/// Single-channel test plane: axis-aligned blocks plus seeded noise.
pub fn test_plane(size: usize, seed: u64) -> NdBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..size * size)
        .map(|i| {
            let (r, c) = (i / size, i % size);
            let block = ((r * 4 / size) + (c * 3 / size)) % 2;
            block as f64 + rng.random_range(-0.3..0.3)
        })
        .collect();
    NdBuffer::new(&[size, size, 1], data).expect("plane shape")
}

/// Local gathering, global aggregation and their blend on a test plane.
pub fn refine(size: usize, seed: u64, theta: f64, beta: f64) -> Result<[Vec<f64>; 4]> {
    let plane = test_plane(size, seed);
    let n = size * size;
    let theta = NdBuffer::filled(&[n, 2], theta);
    let alpha = NdBuffer::new(&[n, 1], plane.data().iter().map(|v| 0.2 + 0.8 * v.clamp(0.0, 1.0)).collect())?;
    let local = LocalGather.forward(&[&plane, &theta])?;
    let global = GlobalAggregate.forward(&[&plane, &theta, &alpha])?;
    let blended = Blend::new(beta)?.forward(&[&local, &global])?;
    Ok([plane.into_data(), local.into_data(), global.into_data(), blended.into_data()])
}

/// Input, local, global and blended planes concatenated, each
/// `size * size` row-major.
#[wasm_bindgen]
pub fn refine_plane(size: usize, seed: u32, theta: f64, beta: f64) -> std::result::Result<Vec<f64>, JsError> {
    refine(size, seed as u64, theta, beta).map(|p| p.concat()).map_err(js)
}

/// Marker for unobserved voxels in [`ScenePreview::top`].
#[wasm_bindgen]
pub fn unknown_label() -> u8 {
    UNKNOWN
}
