//! Hand-model asset: template mesh, blendshape bases, pose-PCA basis, joint
//! regressor and skinning weights, with a versioned binary container format
//! and a procedural synthetic default.
//!
//! Container layout: magic `HMA1`, u32 version, u32 header length, a JSON
//! header describing named arrays (dtype, shape, byte offset), then the raw
//! little-endian payloads in header order.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ARTICULATED_JOINTS, LOCAL_ROTATION_DIMS, PCA_COEFFS, SHAPE_DIM};

pub const SYNTH_VERTICES: usize = 778;
pub const SYNTH_FACES: usize = 1538;

const MAGIC: &[u8; 4] = b"HMA1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum AssetError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad asset file: {0}")]
    Format(String),
    #[error("asset validation failed: {0}")]
    Validation(String),
}

/// Statistical hand model parameters. Sizes: `V` vertices, `F` faces, 16
/// articulated joints (wrist + 3 per finger), 10 shape and 22 pose-PCA
/// coefficients driving 45 local-rotation values.
#[derive(Debug, Clone)]
pub struct HandModelAsset {
    pub template: Array2<f64>,        // (V, 3)
    pub faces: Array2<i32>,           // (F, 3)
    pub shape_basis: Array3<f64>,     // (V, 3, 10)
    pub pose_basis: Array3<f64>,      // (V, 3, 45)
    pub pose_pca: Array2<f64>,        // (45, 22)
    pub joint_regressor: Array2<f64>, // (16, V)
    pub skinning: Array2<f64>,        // (V, 16)
    pub fingertips: [usize; 5],

    // flattened views cached for the decode path; rebuilt on load
    pub(crate) template_row: Array1<f64>,  // (3V,)
    pub(crate) shape_flat: Array2<f64>,    // (10, 3V)
    pub(crate) pose_flat: Array2<f64>,     // (45, 3V)
    pub(crate) rest_joints_row: Array1<f64>, // (48,) regressor applied to template
    pub(crate) shape_joints: Array2<f64>,  // (10, 48) regressor applied to shape basis
    pub(crate) tip_rest_row: Array1<f64>,  // (15,)
    pub(crate) tip_shape: Array2<f64>,     // (10, 15)
    pub(crate) tip_pose: Array2<f64>,      // (45, 15)
    pub(crate) tip_weights: Array2<f64>,   // (5, 16)
}

impl HandModelAsset {
    pub fn vertex_count(&self) -> usize {
        self.template.nrows()
    }

    pub fn face_count(&self) -> usize {
        self.faces.nrows()
    }

    /// Validate all invariants and build the flattened caches.
    pub fn new(
        template: Array2<f64>,
        faces: Array2<i32>,
        shape_basis: Array3<f64>,
        pose_basis: Array3<f64>,
        pose_pca: Array2<f64>,
        joint_regressor: Array2<f64>,
        skinning: Array2<f64>,
        fingertips: [usize; 5],
    ) -> Result<Self, AssetError> {
        let v = template.nrows();
        let check = |ok: bool, msg: String| if ok { Ok(()) } else { Err(AssetError::Validation(msg)) };
        check(template.ncols() == 3, format!("template must be (V,3), got {:?}", template.shape()))?;
        check(faces.ncols() == 3, format!("faces must be (F,3), got {:?}", faces.shape()))?;
        check(
            shape_basis.shape() == [v, 3, SHAPE_DIM],
            format!("shape_basis must be (V,3,{SHAPE_DIM}), got {:?}", shape_basis.shape()),
        )?;
        check(
            pose_basis.shape() == [v, 3, LOCAL_ROTATION_DIMS],
            format!("pose_basis must be (V,3,{LOCAL_ROTATION_DIMS}), got {:?}", pose_basis.shape()),
        )?;
        check(
            pose_pca.shape() == [LOCAL_ROTATION_DIMS, PCA_COEFFS],
            format!("pose_pca must be ({LOCAL_ROTATION_DIMS},{PCA_COEFFS}), got {:?}", pose_pca.shape()),
        )?;
        check(
            joint_regressor.shape() == [ARTICULATED_JOINTS, v],
            format!("joint_regressor must be ({ARTICULATED_JOINTS},V), got {:?}", joint_regressor.shape()),
        )?;
        check(
            skinning.shape() == [v, ARTICULATED_JOINTS],
            format!("skinning must be (V,{ARTICULATED_JOINTS}), got {:?}", skinning.shape()),
        )?;
        for (i, row) in skinning.rows().into_iter().enumerate() {
            if row.iter().any(|&w| w < 0.0) {
                return Err(AssetError::Validation(format!("skinning row {i} has negative weight")));
            }
            let sum: f64 = row.sum();
            if (sum - 1.0).abs() > 1e-4 {
                return Err(AssetError::Validation(format!("skinning row {i} sums to {sum}, expected 1")));
            }
        }
        for (k, row) in joint_regressor.rows().into_iter().enumerate() {
            let sum: f64 = row.sum();
            if (sum - 1.0).abs() > 1e-4 {
                return Err(AssetError::Validation(format!("joint_regressor row {k} sums to {sum}, expected 1")));
            }
        }
        for (i, f) in faces.rows().into_iter().enumerate() {
            for &ix in f {
                if ix < 0 || ix as usize >= v {
                    return Err(AssetError::Validation(format!("face {i} indexes vertex {ix} out of {v}")));
                }
            }
        }
        for &t in &fingertips {
            check(t < v, format!("fingertip index {t} out of {v} vertices"))?;
        }
        if !template.iter().chain(shape_basis.iter()).chain(pose_basis.iter()).all(|x| x.is_finite()) {
            return Err(AssetError::Validation("non-finite values in asset arrays".into()));
        }

        // caches
        let template_row = flatten_points(&template);
        let shape_flat = flatten_basis(&shape_basis);
        let pose_flat = flatten_basis(&pose_basis);
        let rest_joints = joint_regressor.dot(&template); // (16,3)
        let rest_joints_row = flatten_points(&rest_joints);
        let mut shape_joints = Array2::<f64>::zeros((SHAPE_DIM, 3 * ARTICULATED_JOINTS));
        for s in 0..SHAPE_DIM {
            let comp = shape_basis.slice(ndarray::s![.., .., s]); // (V,3)
            let jc = joint_regressor.dot(&comp); // (16,3)
            for k in 0..ARTICULATED_JOINTS {
                for c in 0..3 {
                    shape_joints[[s, 3 * k + c]] = jc[[k, c]];
                }
            }
        }
        let mut tip_rest_row = Array1::<f64>::zeros(15);
        let mut tip_shape = Array2::<f64>::zeros((SHAPE_DIM, 15));
        let mut tip_pose = Array2::<f64>::zeros((LOCAL_ROTATION_DIMS, 15));
        let mut tip_weights = Array2::<f64>::zeros((5, ARTICULATED_JOINTS));
        for (f, &vt) in fingertips.iter().enumerate() {
            for c in 0..3 {
                tip_rest_row[3 * f + c] = template[[vt, c]];
                for s in 0..SHAPE_DIM {
                    tip_shape[[s, 3 * f + c]] = shape_basis[[vt, c, s]];
                }
                for s in 0..LOCAL_ROTATION_DIMS {
                    tip_pose[[s, 3 * f + c]] = pose_basis[[vt, c, s]];
                }
            }
            tip_weights.row_mut(f).assign(&skinning.row(vt));
        }

        Ok(HandModelAsset {
            template,
            faces,
            shape_basis,
            pose_basis,
            pose_pca,
            joint_regressor,
            skinning,
            fingertips,
            template_row,
            shape_flat,
            pose_flat,
            rest_joints_row,
            shape_joints,
            tip_rest_row,
            tip_shape,
            tip_pose,
            tip_weights,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), AssetError> {
        let mut payload: Vec<u8> = Vec::new();
        let mut entries: Vec<ArrayEntry> = Vec::new();
        let put_f32 = |name: &str, shape: Vec<usize>, data: Vec<f32>, payload: &mut Vec<u8>, entries: &mut Vec<ArrayEntry>| {
            entries.push(ArrayEntry {
                name: name.to_string(),
                dtype: "f32".to_string(),
                shape,
                offset: payload.len(),
            });
            for x in data {
                payload.extend_from_slice(&x.to_le_bytes());
            }
        };
        put_f32("template", self.template.shape().to_vec(), to_f32(self.template.iter()), &mut payload, &mut entries);
        entries.push(ArrayEntry {
            name: "faces".into(),
            dtype: "i32".into(),
            shape: self.faces.shape().to_vec(),
            offset: payload.len(),
        });
        for &x in self.faces.iter() {
            payload.extend_from_slice(&x.to_le_bytes());
        }
        put_f32("shape_basis", self.shape_basis.shape().to_vec(), to_f32(self.shape_basis.iter()), &mut payload, &mut entries);
        put_f32("pose_basis", self.pose_basis.shape().to_vec(), to_f32(self.pose_basis.iter()), &mut payload, &mut entries);
        put_f32("pose_pca", self.pose_pca.shape().to_vec(), to_f32(self.pose_pca.iter()), &mut payload, &mut entries);
        put_f32("joint_regressor", self.joint_regressor.shape().to_vec(), to_f32(self.joint_regressor.iter()), &mut payload, &mut entries);
        put_f32("skinning", self.skinning.shape().to_vec(), to_f32(self.skinning.iter()), &mut payload, &mut entries);
        entries.push(ArrayEntry {
            name: "fingertips".into(),
            dtype: "i32".into(),
            shape: vec![5],
            offset: payload.len(),
        });
        for &t in &self.fingertips {
            payload.extend_from_slice(&(t as i32).to_le_bytes());
        }

        let header = serde_json::to_vec(&Header {
            version: FORMAT_VERSION,
            arrays: entries,
        })
        .expect("header serialization");
        let mut file = std::fs::File::create(path)?;
        file.write_all(MAGIC)?;
        file.write_all(&FORMAT_VERSION.to_le_bytes())?;
        file.write_all(&(header.len() as u32).to_le_bytes())?;
        file.write_all(&header)?;
        file.write_all(&payload)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, AssetError> {
        let mut file = std::fs::File::open(path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        if bytes.len() < 12 || &bytes[0..4] != MAGIC {
            return Err(AssetError::Format("missing HMA1 magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(AssetError::Format(format!("unsupported version {version}")));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if bytes.len() < 12 + header_len {
            return Err(AssetError::Format("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&bytes[12..12 + header_len])
            .map_err(|e| AssetError::Format(format!("bad header json: {e}")))?;
        let data = &bytes[12 + header_len..];

        let f64_array = |name: &str| -> Result<(Vec<usize>, Vec<f64>), AssetError> {
            let e = header
                .arrays
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| AssetError::Format(format!("missing array `{name}`")))?;
            if e.dtype != "f32" {
                return Err(AssetError::Format(format!("array `{name}` must be f32")));
            }
            let n: usize = e.shape.iter().product();
            let end = e.offset + 4 * n;
            if end > data.len() {
                return Err(AssetError::Format(format!("array `{name}` out of bounds")));
            }
            let vals = data[e.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            Ok((e.shape.clone(), vals))
        };
        let i32_array = |name: &str| -> Result<(Vec<usize>, Vec<i32>), AssetError> {
            let e = header
                .arrays
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| AssetError::Format(format!("missing array `{name}`")))?;
            if e.dtype != "i32" {
                return Err(AssetError::Format(format!("array `{name}` must be i32")));
            }
            let n: usize = e.shape.iter().product();
            let end = e.offset + 4 * n;
            if end > data.len() {
                return Err(AssetError::Format(format!("array `{name}` out of bounds")));
            }
            let vals = data[e.offset..end]
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok((e.shape.clone(), vals))
        };

        let arr2 = |shape: &[usize], vals: Vec<f64>, name: &str| -> Result<Array2<f64>, AssetError> {
            if shape.len() != 2 {
                return Err(AssetError::Format(format!("array `{name}` must be rank 2")));
            }
            Array2::from_shape_vec((shape[0], shape[1]), vals)
                .map_err(|e| AssetError::Format(e.to_string()))
        };
        let arr3 = |shape: &[usize], vals: Vec<f64>, name: &str| -> Result<Array3<f64>, AssetError> {
            if shape.len() != 3 {
                return Err(AssetError::Format(format!("array `{name}` must be rank 3")));
            }
            Array3::from_shape_vec((shape[0], shape[1], shape[2]), vals)
                .map_err(|e| AssetError::Format(e.to_string()))
        };

        let (s, v) = f64_array("template")?;
        let template = arr2(&s, v, "template")?;
        let (s, v) = i32_array("faces")?;
        if s.len() != 2 {
            return Err(AssetError::Format("faces must be rank 2".into()));
        }
        let faces = Array2::from_shape_vec((s[0], s[1]), v).map_err(|e| AssetError::Format(e.to_string()))?;
        let (s, v) = f64_array("shape_basis")?;
        let shape_basis = arr3(&s, v, "shape_basis")?;
        let (s, v) = f64_array("pose_basis")?;
        let pose_basis = arr3(&s, v, "pose_basis")?;
        let (s, v) = f64_array("pose_pca")?;
        let pose_pca = arr2(&s, v, "pose_pca")?;
        let (s, v) = f64_array("joint_regressor")?;
        let joint_regressor = arr2(&s, v, "joint_regressor")?;
        let (s, v) = f64_array("skinning")?;
        let skinning = arr2(&s, v, "skinning")?;
        let (_, tips) = i32_array("fingertips")?;
        if tips.len() != 5 {
            return Err(AssetError::Format("fingertips must have 5 entries".into()));
        }
        let mut fingertips = [0usize; 5];
        for (i, &t) in tips.iter().enumerate() {
            if t < 0 {
                return Err(AssetError::Format("negative fingertip index".into()));
            }
            fingertips[i] = t as usize;
        }

        HandModelAsset::new(
            template,
            faces,
            shape_basis,
            pose_basis,
            pose_pca,
            joint_regressor,
            skinning,
            fingertips,
        )
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    arrays: Vec<ArrayEntry>,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
}

fn to_f32<'a>(it: impl Iterator<Item = &'a f64>) -> Vec<f32> {
    it.map(|&x| x as f32).collect()
}

fn flatten_points(p: &Array2<f64>) -> Array1<f64> {
    Array1::from_iter(p.iter().cloned())
}

fn flatten_basis(b: &Array3<f64>) -> Array2<f64> {
    // (V,3,S) -> (S, 3V) with column v*3+c
    let (v, _, s) = (b.shape()[0], b.shape()[1], b.shape()[2]);
    let mut out = Array2::<f64>::zeros((s, 3 * v));
    for vi in 0..v {
        for c in 0..3 {
            for si in 0..s {
                out[[si, 3 * vi + c]] = b[[vi, c, si]];
            }
        }
    }
    out
}

// ---- synthetic asset ----

struct Skeleton {
    /// 16 articulated joints: wrist, then (mcp, pip, dip) per finger,
    /// fingers ordered thumb..pinky.
    joints: Vec<[f64; 3]>,
    /// geometric fingertip points, one per finger
    tips: Vec<[f64; 3]>,
}

fn build_skeleton(rng: &mut ChaCha20Rng) -> Skeleton {
    let mcp_x: [f64; 5] = [-0.42, -0.22, 0.0, 0.20, 0.38];
    let mcp_y = [0.35, 0.85, 0.92, 0.86, 0.72];
    let lengths = [
        [0.26, 0.20, 0.16],
        [0.30, 0.20, 0.15],
        [0.33, 0.22, 0.16],
        [0.30, 0.20, 0.15],
        [0.22, 0.15, 0.12],
    ];
    let palm_center = [0.0, 0.15, 0.0];
    let mut joints = vec![[0.0, 0.0, 0.0]];
    let mut tips = Vec::new();
    for f in 0..5 {
        let jx = 1.0 + rng.gen_range(-0.03..0.03);
        let mcp = [mcp_x[f] * jx, mcp_y[f] * (1.0 + rng.gen_range(-0.03..0.03)), 0.0];
        let mut dir = [
            mcp[0] - palm_center[0],
            mcp[1] - palm_center[1],
            rng.gen_range(-0.02..0.02),
        ];
        let n = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
        dir = [dir[0] / n, dir[1] / n, dir[2] / n];
        let mut p = mcp;
        joints.push(p);
        for (si, &len) in lengths[f].iter().enumerate() {
            let len = len * (1.0 + rng.gen_range(-0.03..0.03));
            p = [p[0] + dir[0] * len, p[1] + dir[1] * len, p[2] + dir[2] * len];
            if si < 2 {
                joints.push(p);
            } else {
                tips.push(p);
            }
        }
    }
    Skeleton { joints, tips }
}

/// Procedurally build a hand asset with the canonical vertex/face counts.
///
/// Tube segments per bone, fingertip cap vertices, and an ellipsoidal palm;
/// skinning weights are softmax-of-distance to the bone segments, so rows are
/// strictly positive and sum to 1.
pub fn synth_asset(seed: u64) -> HandModelAsset {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x48_4d_41_31);
    let skel = build_skeleton(&mut rng);

    let mut verts: Vec<[f64; 3]> = Vec::with_capacity(SYNTH_VERTICES);
    let mut faces: Vec<[i32; 3]> = Vec::with_capacity(SYNTH_FACES);
    let mut finger_quads: Vec<[i32; 4]> = Vec::new();

    let ring = |center: [f64; 3], axis: [f64; 3], radius: f64, segs: usize, verts: &mut Vec<[f64; 3]>| -> usize {
        let start = verts.len();
        // orthonormal frame around the axis
        let pick = if axis[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
        let u = cross(axis, pick);
        let un = norm(u);
        let u = [u[0] / un, u[1] / un, u[2] / un];
        let w = cross(axis, u);
        for i in 0..segs {
            let phi = 2.0 * std::f64::consts::PI * (i as f64) / (segs as f64);
            let (c, s) = (phi.cos(), phi.sin());
            verts.push([
                center[0] + radius * (c * u[0] + s * w[0]),
                center[1] + radius * (c * u[1] + s * w[1]),
                center[2] + radius * (c * u[2] + s * w[2]),
            ]);
        }
        start
    };

    let tube = |a: [f64; 3],
                    b: [f64; 3],
                    r0: f64,
                    r1: f64,
                    rings: usize,
                    segs: usize,
                    collect_quads: bool,
                    verts: &mut Vec<[f64; 3]>,
                    faces: &mut Vec<[i32; 3]>,
                    finger_quads: &mut Vec<[i32; 4]>|
     -> usize {
        let axis = normed([b[0] - a[0], b[1] - a[1], b[2] - a[2]]);
        let mut ring_starts = Vec::new();
        for i in 0..rings {
            let t = i as f64 / (rings - 1) as f64;
            let c = [
                a[0] + (b[0] - a[0]) * t,
                a[1] + (b[1] - a[1]) * t,
                a[2] + (b[2] - a[2]) * t,
            ];
            let r = r0 + (r1 - r0) * t;
            ring_starts.push(ring(c, axis, r, segs, verts));
        }
        for i in 0..rings - 1 {
            for j in 0..segs {
                let j1 = (j + 1) % segs;
                let (a0, a1) = (ring_starts[i] + j, ring_starts[i] + j1);
                let (b0, b1) = (ring_starts[i + 1] + j, ring_starts[i + 1] + j1);
                faces.push([a0 as i32, b0 as i32, a1 as i32]);
                faces.push([a1 as i32, b0 as i32, b1 as i32]);
                if collect_quads {
                    finger_quads.push([a0 as i32, a1 as i32, b0 as i32, b1 as i32]);
                }
            }
        }
        *ring_starts.last().unwrap()
    };

    // finger segment tubes: 15 tubes x 5 rings x 6 segs = 450 vertices
    let radii = [[0.062, 0.052, 0.045, 0.038]; 5];
    let mut last_rings = Vec::new(); // start of last ring of each finger's distal tube
    for f in 0..5 {
        let chain = [
            skel.joints[1 + 3 * f],
            skel.joints[2 + 3 * f],
            skel.joints[3 + 3 * f],
            skel.tips[f],
        ];
        let mut last = 0;
        for s in 0..3 {
            last = tube(
                chain[s],
                chain[s + 1],
                radii[f][s],
                radii[f][s + 1],
                5,
                6,
                true,
                &mut verts,
                &mut faces,
                &mut finger_quads,
            );
        }
        last_rings.push(last);
    }
    // palm bone tubes: 5 tubes x 4 rings x 6 segs = 120 vertices
    for f in 0..5 {
        tube(
            skel.joints[0],
            skel.joints[1 + 3 * f],
            0.10,
            0.065,
            4,
            6,
            false,
            &mut verts,
            &mut faces,
            &mut finger_quads,
        );
    }
    // fingertip cap vertices (the declared fingertip indices)
    let mut fingertips = [0usize; 5];
    for f in 0..5 {
        fingertips[f] = verts.len();
        let t = skel.tips[f];
        verts.push(t);
        for j in 0..6usize {
            let j1 = (j + 1) % 6;
            faces.push([
                (last_rings[f] + j) as i32,
                fingertips[f] as i32,
                (last_rings[f] + j1) as i32,
            ]);
        }
    }
    // palm ellipsoid: 10 rings x 20 segments + 2 poles + 1 interior = 203
    {
        let center = [0.0, 0.35, -0.02];
        let semi = [0.46, 0.52, 0.13];
        let (rings_n, segs) = (10usize, 20usize);
        let top = verts.len();
        verts.push([center[0], center[1] + semi[1], center[2]]);
        let mut ring_starts = Vec::new();
        for i in 0..rings_n {
            let theta = std::f64::consts::PI * (i + 1) as f64 / (rings_n + 1) as f64;
            let start = verts.len();
            ring_starts.push(start);
            for j in 0..segs {
                let phi = 2.0 * std::f64::consts::PI * j as f64 / segs as f64;
                verts.push([
                    center[0] + semi[0] * theta.sin() * phi.cos(),
                    center[1] + semi[1] * theta.cos(),
                    center[2] + semi[2] * theta.sin() * phi.sin(),
                ]);
            }
        }
        let bottom = verts.len();
        verts.push([center[0], center[1] - semi[1], center[2]]);
        verts.push(center); // interior marker vertex
        for j in 0..segs {
            let j1 = (j + 1) % segs;
            faces.push([top as i32, (ring_starts[0] + j) as i32, (ring_starts[0] + j1) as i32]);
        }
        for i in 0..rings_n - 1 {
            for j in 0..segs {
                let j1 = (j + 1) % segs;
                let (a0, a1) = (ring_starts[i] + j, ring_starts[i] + j1);
                let (b0, b1) = (ring_starts[i + 1] + j, ring_starts[i + 1] + j1);
                faces.push([a0 as i32, b0 as i32, a1 as i32]);
                faces.push([a1 as i32, b0 as i32, b1 as i32]);
            }
        }
        for j in 0..segs {
            let j1 = (j + 1) % segs;
            faces.push([bottom as i32, (ring_starts[rings_n - 1] + j1) as i32, (ring_starts[rings_n - 1] + j) as i32]);
        }
    }
    // reinforcement faces: re-triangulate finger quads on the other diagonal
    // until the face budget is met
    let mut qi = 0;
    while faces.len() < SYNTH_FACES {
        let q = finger_quads[qi % finger_quads.len()];
        faces.push([q[0], q[3], q[1]]);
        if faces.len() < SYNTH_FACES {
            faces.push([q[0], q[2], q[3]]);
        }
        qi += 1;
    }
    faces.truncate(SYNTH_FACES);
    assert_eq!(verts.len(), SYNTH_VERTICES, "vertex budget");
    assert_eq!(faces.len(), SYNTH_FACES, "face budget");

    let template = Array2::from_shape_fn((SYNTH_VERTICES, 3), |(i, c)| verts[i][c]);
    let faces_arr = Array2::from_shape_fn((SYNTH_FACES, 3), |(i, c)| faces[i][c]);

    // bone segments for skinning distance: joint k owns the segment from it
    // to its child (wrist: to the palm centroid)
    let parents = super::joint_parents();
    let mut seg_ends = vec![[0.0f64; 3]; ARTICULATED_JOINTS];
    let mcp_centroid = {
        let mut c = [0.0; 3];
        for f in 0..5 {
            for d in 0..3 {
                c[d] += skel.joints[1 + 3 * f][d] / 5.0;
            }
        }
        c
    };
    seg_ends[0] = mcp_centroid;
    for k in 1..ARTICULATED_JOINTS {
        seg_ends[k] = if (k - 1) % 3 < 2 {
            skel.joints[k + 1]
        } else {
            skel.tips[(k - 1) / 3]
        };
    }
    let tau = 0.085;
    let mut skinning = Array2::<f64>::zeros((SYNTH_VERTICES, ARTICULATED_JOINTS));
    for (vi, v) in verts.iter().enumerate() {
        let mut row = [0.0f64; ARTICULATED_JOINTS];
        let mut sum = 0.0;
        for k in 0..ARTICULATED_JOINTS {
            let d = point_segment_distance(*v, skel.joints[k], seg_ends[k]);
            let w = (-d * d / (tau * tau)).exp() + 1e-9;
            row[k] = w;
            sum += w;
        }
        for k in 0..ARTICULATED_JOINTS {
            skinning[[vi, k]] = row[k] / sum;
        }
    }
    let _ = parents;

    // joint regressor: gaussian weights around each joint position
    let sigma_r: f64 = 0.07;
    let mut joint_regressor = Array2::<f64>::zeros((ARTICULATED_JOINTS, SYNTH_VERTICES));
    for k in 0..ARTICULATED_JOINTS {
        let mut sum = 0.0;
        for (vi, v) in verts.iter().enumerate() {
            let d2 = dist2(*v, skel.joints[k]);
            let w = (-d2 / (sigma_r * sigma_r)).exp() + 1e-12;
            joint_regressor[[k, vi]] = w;
            sum += w;
        }
        for vi in 0..SYNTH_VERTICES {
            joint_regressor[[k, vi]] /= sum;
        }
    }

    // shape basis: component 0 is uniform scaling, the rest are smooth random
    // displacement fields
    let mut shape_basis = Array3::<f64>::zeros((SYNTH_VERTICES, 3, SHAPE_DIM));
    for (vi, v) in verts.iter().enumerate() {
        for c in 0..3 {
            shape_basis[[vi, c, 0]] = 0.05 * v[c];
        }
    }
    for s in 1..SHAPE_DIM {
        let dir = rand_unit(&mut rng);
        let k = [rng.gen_range(1.0..3.0), rng.gen_range(1.0..3.0), rng.gen_range(1.0..3.0)];
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        for (vi, v) in verts.iter().enumerate() {
            let m = 0.02 * (k[0] * v[0] + k[1] * v[1] + k[2] * v[2] + phase).sin();
            for c in 0..3 {
                shape_basis[[vi, c, s]] = m * dir[c];
            }
        }
    }
    // pose corrective basis: small smooth random fields
    let mut pose_basis = Array3::<f64>::zeros((SYNTH_VERTICES, 3, LOCAL_ROTATION_DIMS));
    for s in 0..LOCAL_ROTATION_DIMS {
        let dir = rand_unit(&mut rng);
        let k = [rng.gen_range(1.0..4.0), rng.gen_range(1.0..4.0), rng.gen_range(1.0..4.0)];
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        for (vi, v) in verts.iter().enumerate() {
            let m = 0.004 * (k[0] * v[0] + k[1] * v[1] + k[2] * v[2] + phase).sin();
            for c in 0..3 {
                pose_basis[[vi, c, s]] = m * dir[c];
            }
        }
    }

    // pose PCA: random-orthonormal columns, scaled to keep local rotations small
    let pose_pca = {
        let raw = Array2::from_shape_fn((LOCAL_ROTATION_DIMS, PCA_COEFFS), |_| {
            rng.gen_range(-1.0..1.0)
        });
        let mut q = raw;
        for j in 0..PCA_COEFFS {
            for i in 0..j {
                let proj: f64 = (0..LOCAL_ROTATION_DIMS).map(|r| q[[r, j]] * q[[r, i]]).sum();
                for r in 0..LOCAL_ROTATION_DIMS {
                    q[[r, j]] -= proj * q[[r, i]];
                }
            }
            let n: f64 = (0..LOCAL_ROTATION_DIMS).map(|r| q[[r, j]] * q[[r, j]]).sum::<f64>().sqrt();
            for r in 0..LOCAL_ROTATION_DIMS {
                q[[r, j]] /= n;
            }
        }
        q * 0.45
    };

    HandModelAsset::new(
        template,
        faces_arr,
        shape_basis,
        pose_basis,
        pose_pca,
        joint_regressor,
        skinning,
        fingertips,
    )
    .expect("synthetic asset must satisfy its own invariants")
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

fn normed(a: [f64; 3]) -> [f64; 3] {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

fn point_segment_distance(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let denom = ab[0] * ab[0] + ab[1] * ab[1] + ab[2] * ab[2];
    let t = if denom > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / denom).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let c = [a[0] + t * ab[0], a[1] + t * ab[1], a[2] + t * ab[2]];
    dist2(p, c).sqrt()
}

fn rand_unit(rng: &mut ChaCha20Rng) -> [f64; 3] {
    loop {
        let v = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let n = norm(v);
        if n > 1e-3 && n <= 1.0 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}
