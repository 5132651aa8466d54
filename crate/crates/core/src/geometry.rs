//! Pinhole camera, region-of-interest voxel grid and the voxel-to-image
//! association.

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

/// Depth below which a camera-frame point counts as behind the camera.
pub const DEPTH_EPS: f64 = 1e-6;

/// Label of voxels excluded from losses and metrics.
pub const UNKNOWN: u8 = 255;

/// Label of empty space.
pub const EMPTY: u8 = 0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::config(format!("focal lengths must be positive, got {fx}, {fy}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::config("image extents must be at least 1 pixel"));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }
}

/// World-to-camera rigid transform `q = R p + t`; camera frame is x right,
/// y down, z forward.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraPose {
    rotation: Mat3,
    translation: Vec3,
}

fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [0, 1, 2].map(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
}

fn transpose(m: &Mat3) -> Mat3 {
    [0, 1, 2].map(|i| [0, 1, 2].map(|j| m[j][i]))
}

fn det(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

impl CameraPose {
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let rt = transpose(&rotation);
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| rt[i][k] * rotation[k][j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (dot - expect).abs() > 1e-9 {
                    return Err(Error::config("camera rotation is not orthonormal"));
                }
            }
        }
        if (det(&rotation) - 1.0).abs() > 1e-9 {
            return Err(Error::config("camera rotation has determinant != +1"));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    /// Camera at world `position` in a z-up world, looking along the
    /// horizontal heading `yaw` (radians from +x toward +y) tilted down by
    /// `pitch` radians.
    pub fn looking(position: Vec3, yaw: f64, pitch: f64) -> Self {
        let forward = [yaw.cos() * pitch.cos(), yaw.sin() * pitch.cos(), -pitch.sin()];
        let right = [yaw.sin(), -yaw.cos(), 0.0];
        let down = cross(forward, right);
        let rotation = [right, down, forward];
        let rp = mat_vec(&rotation, position);
        Self {
            rotation,
            translation: [-rp[0], -rp[1], -rp[2]],
        }
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation(&self) -> Vec3 {
        self.translation
    }

    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        let q = mat_vec(&self.rotation, p);
        [q[0] + self.translation[0], q[1] + self.translation[1], q[2] + self.translation[2]]
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        let c = mat_vec(&transpose(&self.rotation), self.translation);
        [-c[0], -c[1], -c[2]]
    }

    /// Rotates a camera-frame direction into the world frame.
    pub fn direction_to_world(&self, d: Vec3) -> Vec3 {
        mat_vec(&transpose(&self.rotation), d)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Projection {
    Visible { u: f64, v: f64, depth: f64 },
    BehindCamera,
}

impl Projection {
    pub fn uv(&self) -> Option<[f64; 2]> {
        match *self {
            Projection::Visible { u, v, .. } => Some([u, v]),
            Projection::BehindCamera => None,
        }
    }
}

pub fn project(p: Vec3, intr: &CameraIntrinsics, pose: &CameraPose) -> Projection {
    let q = pose.to_camera(p);
    if q[2] <= DEPTH_EPS {
        return Projection::BehindCamera;
    }
    Projection::Visible {
        u: intr.fx * q[0] / q[2] + intr.cx,
        v: intr.fy * q[1] / q[2] + intr.cy,
        depth: q[2],
    }
}

pub fn in_image(uv: [f64; 2], intr: &CameraIntrinsics) -> bool {
    uv[0] >= 0.0 && uv[0] < intr.width as f64 && uv[1] >= 0.0 && uv[1] < intr.height as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VoxelGridSpec {
    pub origin: Vec3,
    pub dims: [usize; 3],
    pub resolution: f64,
}

impl VoxelGridSpec {
    pub fn new(origin: Vec3, dims: [usize; 3], resolution: f64) -> Result<Self> {
        if !(resolution > 0.0) {
            return Err(Error::config(format!("voxel resolution must be positive, got {resolution}")));
        }
        if dims.contains(&0) {
            return Err(Error::config(format!("grid dims must be >= 1, got {dims:?}")));
        }
        Ok(Self {
            origin,
            dims,
            resolution,
        })
    }

    /// 256 x 256 x 32 voxels at 0.2 m.
    pub fn paper_default() -> Self {
        Self {
            origin: [0.0, -25.6, -2.0],
            dims: [256, 256, 32],
            resolution: 0.2,
        }
    }

    /// 64 x 64 x 8 voxels at 0.2 m.
    pub fn desk_default() -> Self {
        Self {
            origin: [0.0, -6.4, 0.0],
            dims: [64, 64, 8],
            resolution: 0.2,
        }
    }

    pub fn num_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    /// Metric size of the region of interest.
    pub fn extent(&self) -> Vec3 {
        self.dims.map(|d| d as f64 * self.resolution)
    }

    /// Row-major linear index (z fastest).
    pub fn linear(&self, idx: [usize; 3]) -> usize {
        (idx[0] * self.dims[1] + idx[1]) * self.dims[2] + idx[2]
    }

    pub fn unravel(&self, lin: usize) -> [usize; 3] {
        let z = lin % self.dims[2];
        let y = (lin / self.dims[2]) % self.dims[1];
        let x = lin / (self.dims[1] * self.dims[2]);
        [x, y, z]
    }

    pub fn contains(&self, idx: [usize; 3]) -> bool {
        idx.iter().zip(&self.dims).all(|(i, d)| i < d)
    }
}

pub fn voxel_center(spec: &VoxelGridSpec, idx: [usize; 3]) -> Result<Vec3> {
    if !spec.contains(idx) {
        return Err(Error::index(format!("voxel {idx:?} outside grid {:?}", spec.dims)));
    }
    Ok([0, 1, 2].map(|a| spec.origin[a] + (idx[a] as f64 + 0.5) * spec.resolution))
}

/// Half-open cell containing `p`, or `None` outside the region of interest.
pub fn voxelize(spec: &VoxelGridSpec, p: Vec3) -> Option<[usize; 3]> {
    let mut idx = [0usize; 3];
    for a in 0..3 {
        let rel = p[a] - spec.origin[a];
        if rel < 0.0 || p[a] >= spec.origin[a] + spec.dims[a] as f64 * spec.resolution {
            return None;
        }
        let i = (rel / spec.resolution).floor() as usize;
        if i >= spec.dims[a] {
            return None;
        }
        idx[a] = i;
    }
    Some(idx)
}

/// Ground-truth occupancy and semantics over a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticVolume {
    pub grid: VoxelGridSpec,
    /// Physical occupancy, independent of observability.
    pub occupancy: Vec<bool>,
    /// Class per voxel, or [`UNKNOWN`] where excluded from supervision.
    pub labels: Vec<u8>,
    pub num_classes: usize,
}

impl SemanticVolume {
    pub fn empty(grid: VoxelGridSpec, num_classes: usize) -> Result<Self> {
        if num_classes < 2 || num_classes >= UNKNOWN as usize {
            return Err(Error::config(format!("num_classes must be in 2..255, got {num_classes}")));
        }
        let n = grid.num_voxels();
        Ok(Self {
            grid,
            occupancy: vec![false; n],
            labels: vec![EMPTY; n],
            num_classes,
        })
    }

    /// Checks that known labels agree with occupancy and are in range.
    pub fn validate(&self) -> Result<()> {
        for (i, (&l, &o)) in self.labels.iter().zip(&self.occupancy).enumerate() {
            if l == UNKNOWN {
                continue;
            }
            if l as usize >= self.num_classes {
                return Err(Error::config(format!("voxel {i} has label {l} >= {}", self.num_classes)));
            }
            if (l != EMPTY) != o {
                return Err(Error::config(format!("voxel {i}: label {l} disagrees with occupancy {o}")));
            }
        }
        Ok(())
    }

    pub fn valid_mask(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l != UNKNOWN).collect()
    }

    /// Occupancy as supervised labels: `Some(occupied)` on known voxels.
    pub fn occupancy_labels(&self) -> Vec<Option<bool>> {
        self.labels
            .iter()
            .map(|&l| (l != UNKNOWN).then_some(l != EMPTY))
            .collect()
    }
}
