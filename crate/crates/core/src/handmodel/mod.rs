//! Hand-model-aware decoding: pose/shape coefficients to a skinned mesh, 21
//! 3D joints, and weak-perspective 2D projection. All paths are built on the
//! autodiff graph so gradients flow end to end; the plain (non-graph) entry
//! points wrap a throwaway graph.

mod asset;


pub use asset::{synth_asset, AssetError, HandModelAsset, SYNTH_FACES, SYNTH_VERTICES};

use ndarray::{Array1, Array2};

use crate::numerics::{Graph, Result, Scalar, Var};

/// Articulated joints: wrist + 3 per finger (thumb, index, middle, ring, pinky).
pub const ARTICULATED_JOINTS: usize = 16;
/// Output joints in detector order: wrist, then 4 per finger base-to-tip.
pub const OUTPUT_JOINTS: usize = 21;
/// Pose vector: 3 global-rotation axis-angle values + 22 pose-PCA coefficients.
pub const POSE_DIM: usize = 25;
pub const SHAPE_DIM: usize = 10;
pub const PCA_COEFFS: usize = 22;
/// Local-rotation values driven by the PCA basis: 15 joints x 3 axis-angle.
pub const LOCAL_ROTATION_DIMS: usize = 45;

/// Parent of each articulated joint; wrist is the root.
pub fn joint_parents() -> [Option<usize>; ARTICULATED_JOINTS] {
    let mut parents = [None; ARTICULATED_JOINTS];
    for f in 0..5 {
        parents[1 + 3 * f] = Some(0);
        parents[2 + 3 * f] = Some(1 + 3 * f);
        parents[3 + 3 * f] = Some(2 + 3 * f);
    }
    parents
}

/// Weak-perspective camera: rotate, drop depth, scale, offset.
#[derive(Debug, Clone, PartialEq)]
pub struct WeakPerspectiveCamera {
    /// axis-angle, materialized through Rodrigues
    pub rotation: [f64; 3],
    pub offset: [f64; 2],
    pub scale: f64,
}

impl WeakPerspectiveCamera {
    pub fn identity() -> Self {
        WeakPerspectiveCamera {
            rotation: [0.0; 3],
            offset: [0.0; 2],
            scale: 1.0,
        }
    }

    pub fn rotation_matrix(&self) -> Array2<f64> {
        rodrigues(self.rotation)
    }
}

/// Per-token decoder output.
#[derive(Debug, Clone)]
pub struct LatentFrame {
    pub theta: Array1<f64>,
    pub beta: Array1<f64>,
    pub camera: WeakPerspectiveCamera,
}

/// Posed mesh in model space.
#[derive(Debug, Clone)]
pub struct HandMesh {
    pub vertices: Array2<f64>,
}

// ---- graph builders ----

/// Batched Rodrigues: rows of `axis_angle` are axis-angle 3-vectors, rows of
/// the output are row-major 3x3 rotation matrices.
///
/// Small angles take the first-order-exact branch `I + K + K^2/2`, so a zero
/// vector maps to the identity bit for bit.
pub fn rodrigues_batch<T: Scalar>(g: &mut Graph<T>, axis_angle: Var) -> Result<Var> {
    let m = g.shape(axis_angle)[0];
    let sq = g.square(axis_angle)?;
    let ones3 = g.input2(Array2::<T>::ones((3, 1)))?;
    let theta2 = g.matmul(sq, ones3)?; // (m,1)

    // branch mask decided from the current values; the graph is rebuilt
    // every pass so this is safe
    let mut mask = Array2::<T>::zeros((m, 1));
    {
        let t2 = g.value(theta2);
        for (i, v) in t2.iter().enumerate() {
            if v.as_f64() < 1e-16 {
                mask[[i, 0]] = T::one();
            }
        }
    }
    let inv_mask_arr = mask.mapv(|x| T::one() - x);
    let mask_half = mask.mapv(|x| x * T::from_f64(0.5));
    let mask_v = g.input2(mask.clone())?;
    let inv_mask = g.input2(inv_mask_arr)?;
    let mask_half_v = g.input2(mask_half)?;

    // theta made safe on masked rows to avoid 0/0; those rows are zeroed out
    let theta2_safe = g.add(theta2, mask_v)?;
    let theta = g.sqrt(theta2_safe)?;
    let sin_t = g.sin(theta)?;
    let cos_t = g.cos(theta)?;
    let a_raw = g.div(sin_t, theta)?;
    let ones_col = g.input2(Array2::<T>::ones((m, 1)))?;
    let one_minus_cos = g.sub(ones_col, cos_t)?;
    let b_raw = g.div(one_minus_cos, theta2_safe)?;
    // a = sin(t)/t (or 1 near zero), b = (1-cos t)/t^2 (or 1/2 near zero)
    let a_main = g.mul(a_raw, inv_mask)?;
    let a = g.add(a_main, mask_v)?;
    let b_main = g.mul(b_raw, inv_mask)?;
    let b = g.add(b_main, mask_half_v)?;

    // K = x*Gx + y*Gy + z*Gz with constant generators
    let gx = g.input2(Array2::from_shape_vec((1, 9), skew_gen(0).to_vec()).unwrap())?;
    let gy = g.input2(Array2::from_shape_vec((1, 9), skew_gen(1).to_vec()).unwrap())?;
    let gz = g.input2(Array2::from_shape_vec((1, 9), skew_gen(2).to_vec()).unwrap())?;
    let x = g.slice_cols(axis_angle, 0..1)?;
    let y = g.slice_cols(axis_angle, 1..2)?;
    let z = g.slice_cols(axis_angle, 2..3)?;
    let kx = g.matmul(x, gx)?;
    let ky = g.matmul(y, gy)?;
    let kz = g.matmul(z, gz)?;
    let kxy = g.add(kx, ky)?;
    let k = g.add(kxy, kz)?;
    let k2 = g.bmm33(k, k)?;
    let ak = g.mul(k, a)?;
    let bk2 = g.mul(k2, b)?;
    let eye = g.input2(Array2::from_shape_vec(
        (1, 9),
        vec![
            T::one(),
            T::zero(),
            T::zero(),
            T::zero(),
            T::one(),
            T::zero(),
            T::zero(),
            T::zero(),
            T::one(),
        ],
    )
    .unwrap())?;
    let sum = g.add(ak, bk2)?;
    g.add(sum, eye)
}

fn skew_gen<T: Scalar>(axis: usize) -> [T; 9] {
    let o = T::zero();
    let p = T::one();
    let n = -T::one();
    match axis {
        0 => [o, o, o, o, o, n, o, p, o],
        1 => [o, o, p, o, o, o, n, o, o],
        _ => [o, n, o, p, o, o, o, o, o],
    }
}

/// Forward kinematics over an arbitrary joint tree, batched over tokens.
///
/// `local_rotations[k]` is `(n, 9)`, `rest_joints[k]` is `(n, 3)`. Returns
/// per-joint global rotations, posed joint positions, and the skinning
/// offsets `s_k = t_k - R_k j_k`. The recursion keeps the rest pose exact:
/// identity local rotations give `t_k == j_k` and `s_k == 0` bit for bit.
pub fn forward_kinematics<T: Scalar>(
    g: &mut Graph<T>,
    parents: &[Option<usize>],
    local_rotations: &[Var],
    rest_joints: &[Var],
) -> Result<FkChain> {
    let k_count = parents.len();
    let mut rg: Vec<Var> = Vec::with_capacity(k_count);
    let mut tg: Vec<Var> = Vec::with_capacity(k_count);
    let mut s: Vec<Var> = Vec::with_capacity(k_count);
    for k in 0..k_count {
        match parents[k] {
            None => {
                // root rotates about the origin, so a pure global rotation is
                // a rigid motion of the whole template
                rg.push(local_rotations[k]);
                let moved = g.bmv3(local_rotations[k], rest_joints[k])?;
                tg.push(moved);
            }
            Some(p) => {
                debug_assert!(p < k, "parents must precede children");
                let r = g.bmm33(rg[p], local_rotations[k])?;
                let moved = g.bmv3(rg[p], rest_joints[k])?;
                let t = g.add(moved, s[p])?;
                rg.push(r);
                tg.push(t);
            }
        }
        let rj = g.bmv3(rg[k], rest_joints[k])?;
        s.push(g.sub(tg[k], rj)?);
    }
    Ok(FkChain {
        global_rotations: rg,
        posed_joints: tg,
        skin_offsets: s,
    })
}

pub struct FkChain {
    pub global_rotations: Vec<Var>,
    pub posed_joints: Vec<Var>,
    pub skin_offsets: Vec<Var>,
}

/// Asset constants converted to the compute precision once per run.
pub struct DecodeConsts<T> {
    pub vertex_count: usize,
    pca_t: Array2<T>,          // (22, 45)
    rest_joints_row: Array2<T>, // (1, 48)
    shape_joints: Array2<T>,    // (10, 48)
    template_row: Array2<T>,    // (1, 3V)
    shape_flat: Array2<T>,      // (10, 3V)
    pose_flat: Array2<T>,       // (45, 3V)
    tip_rest_row: Array2<T>,    // (1, 15)
    tip_shape: Array2<T>,       // (10, 15)
    tip_pose: Array2<T>,        // (45, 15)
    tip_weights: Array2<T>,     // (5, 16)
    skinning: Array2<T>,        // (V, 16)
    fingertips: [usize; 5],
}

impl<T: Scalar> DecodeConsts<T> {
    pub fn from_asset(asset: &HandModelAsset) -> Self {
        let conv2 = |a: &Array2<f64>| a.mapv(|x| T::from_f64(x));
        let conv_row = |a: &Array1<f64>| {
            Array2::from_shape_fn((1, a.len()), |(_, j)| T::from_f64(a[j]))
        };
        DecodeConsts {
            vertex_count: asset.vertex_count(),
            pca_t: conv2(&asset.pose_pca.t().to_owned()),
            rest_joints_row: conv_row(&asset.rest_joints_row),
            shape_joints: conv2(&asset.shape_joints),
            template_row: conv_row(&asset.template_row),
            shape_flat: conv2(&asset.shape_flat),
            pose_flat: conv2(&asset.pose_flat),
            tip_rest_row: conv_row(&asset.tip_rest_row),
            tip_shape: conv2(&asset.tip_shape),
            tip_pose: conv2(&asset.tip_pose),
            tip_weights: conv2(&asset.tip_weights),
            skinning: conv2(&asset.skinning),
            fingertips: asset.fingertips,
        }
    }
}

/// Shared decode plumbing: local rotations, rest joints, FK.
struct PosedSkeleton {
    fk: FkChain,
    pose_features: Var, // (n, 45)
}

fn pose_skeleton<T: Scalar>(
    g: &mut Graph<T>,
    c: &DecodeConsts<T>,
    theta: Var,
    beta: Var,
) -> Result<PosedSkeleton> {
    let n = g.shape(theta)[0];
    let theta_global = g.slice_cols(theta, 0..3)?;
    let theta_pca = g.slice_cols(theta, 3..POSE_DIM)?;
    let pca_t = g.input2(c.pca_t.clone())?;
    let features = g.matmul(theta_pca, pca_t)?; // (n,45)
    let all_aa = g.concat_cols(&[theta_global, features])?; // (n,48)
    let aa_rows = g.reshape(all_aa, &[n * ARTICULATED_JOINTS, 3])?;
    let rotations_flat = rodrigues_batch(g, aa_rows)?; // (n*16,9)

    let shape_joints = g.input2(c.shape_joints.clone())?;
    let joints_offset = g.matmul(beta, shape_joints)?; // (n,48)
    let rest_row = g.input2(c.rest_joints_row.clone())?;
    let rest_joints_all = g.add(joints_offset, rest_row)?; // (n,48)

    let mut local_rots = Vec::with_capacity(ARTICULATED_JOINTS);
    let mut rest_joints = Vec::with_capacity(ARTICULATED_JOINTS);
    for k in 0..ARTICULATED_JOINTS {
        let idx: Vec<usize> = (0..n).map(|t| t * ARTICULATED_JOINTS + k).collect();
        local_rots.push(g.select_rows(rotations_flat, &idx)?);
        rest_joints.push(g.slice_cols(rest_joints_all, 3 * k..3 * k + 3)?);
    }
    let parents = joint_parents();
    let fk = forward_kinematics(g, &parents, &local_rots, &rest_joints)?;
    Ok(PosedSkeleton {
        fk,
        pose_features: features,
    })
}

/// 21 3D joints per token: 16 articulated joints from FK plus the 5 posed
/// fingertip vertices, in detector joint order. Output is `(n*21, 3)`.
pub fn decode_joints3d<T: Scalar>(
    g: &mut Graph<T>,
    c: &DecodeConsts<T>,
    theta: Var,
    beta: Var,
) -> Result<Var> {
    let n = g.shape(theta)[0];
    let skel = pose_skeleton(g, c, theta, beta)?;

    // rest positions of the fingertip vertices, shaped and pose-corrected
    let tip_shape = g.input2(c.tip_shape.clone())?;
    let tip_pose = g.input2(c.tip_pose.clone())?;
    let tip_rest = g.input2(c.tip_rest_row.clone())?;
    let tips_s = g.matmul(beta, tip_shape)?;
    let tips_p = g.matmul(skel.pose_features, tip_pose)?;
    let tips_sp = g.add(tips_s, tips_p)?;
    let tips_flat = g.add(tips_sp, tip_rest)?; // (n,15)
    let tips_rows = g.reshape(tips_flat, &[n * 5, 3])?;

    let rg_all = g.concat_rows(&skel.fk.global_rotations)?; // (16n,9) joint-major
    let s_all = g.concat_rows(&skel.fk.skin_offsets)?; // (16n,3)
    let tips_posed = g.skin_points(rg_all, s_all, tips_rows, c.tip_weights.clone())?;

    let tg_all = g.concat_rows(&skel.fk.posed_joints)?; // (16n,3) joint-major
    let stacked = g.concat_rows(&[tg_all, tips_posed])?;
    // reorder into detector order, token-major
    let mut order = Vec::with_capacity(n * OUTPUT_JOINTS);
    for t in 0..n {
        order.push(t); // wrist = joint 0
        for f in 0..5 {
            for l in 0..3 {
                order.push((1 + 3 * f + l) * n + t);
            }
            order.push(ARTICULATED_JOINTS * n + t * 5 + f);
        }
    }
    g.select_rows(stacked, &order)
}

/// Full linear-blend-skinned mesh, `(n*V, 3)` token-major.
pub fn decode_mesh<T: Scalar>(
    g: &mut Graph<T>,
    c: &DecodeConsts<T>,
    theta: Var,
    beta: Var,
) -> Result<Var> {
    let n = g.shape(theta)[0];
    let skel = pose_skeleton(g, c, theta, beta)?;
    let shape_flat = g.input2(c.shape_flat.clone())?;
    let pose_flat = g.input2(c.pose_flat.clone())?;
    let template_row = g.input2(c.template_row.clone())?;
    let disp_s = g.matmul(beta, shape_flat)?;
    let disp_p = g.matmul(skel.pose_features, pose_flat)?;
    let disp = g.add(disp_s, disp_p)?;
    let rest_flat = g.add(disp, template_row)?; // (n, 3V)
    let rest_rows = g.reshape(rest_flat, &[n * c.vertex_count, 3])?;
    let rg_all = g.concat_rows(&skel.fk.global_rotations)?;
    let s_all = g.concat_rows(&skel.fk.skin_offsets)?;
    g.skin_points(rg_all, s_all, rest_rows, c.skinning.clone())
}

/// Weak-perspective projection of `points` (`(n*p, 3)` token-major):
/// rotate by the per-token camera rotation, drop depth, scale, offset.
pub fn project_points<T: Scalar>(
    g: &mut Graph<T>,
    points: Var,
    cam_rot_aa: Var,  // (n,3)
    cam_offset: Var,  // (n,2)
    cam_scale: Var,   // (n,1)
    points_per_token: usize,
) -> Result<Var> {
    let n = g.shape(cam_rot_aa)[0];
    let rot = rodrigues_batch(g, cam_rot_aa)?; // (n,9)
    let rep: Vec<usize> = (0..n)
        .flat_map(|t| std::iter::repeat(t).take(points_per_token))
        .collect();
    let rot_rep = g.select_rows(rot, &rep)?;
    let rotated = g.bmv3(rot_rep, points)?;
    let xy = g.slice_cols(rotated, 0..2)?;
    let scale_rep = g.select_rows(cam_scale, &rep)?;
    let scaled = g.mul(xy, scale_rep)?;
    let off_rep = g.select_rows(cam_offset, &rep)?;
    g.add(scaled, off_rep)
}

/// Latent head output channels: 25 pose + 10 shape + 3 camera-rotation
/// axis-angle + 2 offset + 1 scale.
pub const LATENT_DIMS: usize = POSE_DIM + SHAPE_DIM + 6;

/// Per-token latent parameters split out of the head's output.
pub struct LatentSplit {
    pub theta: Var,     // (n, 25)
    pub beta: Var,      // (n, 10)
    pub cam_rot: Var,   // (n, 3)
    pub cam_off: Var,   // (n, 2)
    pub cam_scale: Var, // (n, 1), softplus-positive
}

/// Single linear map from encoder features to the latent parameters; the
/// scale channel passes through softplus to stay positive.
pub fn latent_head<T: Scalar>(
    g: &mut Graph<T>,
    weights: Var, // (d, 41)
    bias: Var,    // (41,)
    features: Var, // (n, d)
) -> Result<LatentSplit> {
    g.push_scope("latent_head");
    let z = g.matmul(features, weights)?;
    let z = g.add(z, bias)?;
    let theta = g.slice_cols(z, 0..POSE_DIM)?;
    let beta = g.slice_cols(z, POSE_DIM..POSE_DIM + SHAPE_DIM)?;
    let cam_rot = g.slice_cols(z, POSE_DIM + SHAPE_DIM..POSE_DIM + SHAPE_DIM + 3)?;
    let cam_off = g.slice_cols(z, POSE_DIM + SHAPE_DIM + 3..POSE_DIM + SHAPE_DIM + 5)?;
    let raw_scale = g.slice_cols(z, POSE_DIM + SHAPE_DIM + 5..LATENT_DIMS)?;
    let cam_scale = g.softplus(raw_scale)?;
    g.pop_scope();
    Ok(LatentSplit {
        theta,
        beta,
        cam_rot,
        cam_off,
        cam_scale,
    })
}

/// Decode latent parameters to projected 2D joints, `(n*21, 2)`.
pub fn decode_to_2d<T: Scalar>(
    g: &mut Graph<T>,
    consts: &DecodeConsts<T>,
    latent: &LatentSplit,
) -> Result<Var> {
    g.push_scope("decode");
    let joints = decode_joints3d(g, consts, latent.theta, latent.beta)?;
    let out = project_points(
        g,
        joints,
        latent.cam_rot,
        latent.cam_off,
        latent.cam_scale,
        OUTPUT_JOINTS,
    )?;
    g.pop_scope();
    Ok(out)
}

// ---- plain (non-graph) entry points ----

/// Rodrigues of a single axis-angle vector.
pub fn rodrigues(axis_angle: [f64; 3]) -> Array2<f64> {
    let mut g = Graph::<f64>::new();
    let v = g
        .input2(Array2::from_shape_vec((1, 3), axis_angle.to_vec()).unwrap())
        .unwrap();
    let r = rodrigues_batch(&mut g, v).unwrap();
    let flat = g.value(r);
    Array2::from_shape_fn((3, 3), |(i, j)| flat[[0, 3 * i + j]])
}

/// Materialize the 16 joint rotations from a 25-dim pose vector: global
/// rotation from the first 3 entries, 15 locals from the PCA coefficients.
pub fn pose_to_rotations(theta: &Array1<f64>, asset: &HandModelAsset) -> Vec<Array2<f64>> {
    assert_eq!(theta.len(), POSE_DIM, "theta must have {POSE_DIM} entries");
    let mut g = Graph::<f64>::new();
    let c = DecodeConsts::<f64>::from_asset(asset);
    let theta_v = g
        .input2(Array2::from_shape_fn((1, POSE_DIM), |(_, j)| theta[j]))
        .unwrap();
    let tg = g.slice_cols(theta_v, 0..3).unwrap();
    let tp = g.slice_cols(theta_v, 3..POSE_DIM).unwrap();
    let pca_t = g.input2(c.pca_t.clone()).unwrap();
    let f = g.matmul(tp, pca_t).unwrap();
    let all = g.concat_cols(&[tg, f]).unwrap();
    let rows = g.reshape(all, &[ARTICULATED_JOINTS, 3]).unwrap();
    let r = rodrigues_batch(&mut g, rows).unwrap();
    let flat = g.value(r);
    (0..ARTICULATED_JOINTS)
        .map(|k| Array2::from_shape_fn((3, 3), |(i, j)| flat[[k, 3 * i + j]]))
        .collect()
}

/// Pose and skin the full mesh.
pub fn lbs_mesh(theta: &Array1<f64>, beta: &Array1<f64>, asset: &HandModelAsset) -> HandMesh {
    let mut g = Graph::<f64>::new();
    let c = DecodeConsts::<f64>::from_asset(asset);
    let (theta_v, beta_v) = latent_inputs(&mut g, theta, beta);
    let mesh = decode_mesh(&mut g, &c, theta_v, beta_v).unwrap();
    let flat = g.value(mesh);
    HandMesh {
        vertices: Array2::from_shape_fn((asset.vertex_count(), 3), |(i, j)| flat[[i, j]]),
    }
}

/// 21 3D joints: 16 articulated joints under their global transforms plus the
/// 5 fingertip vertices read from the posed mesh, in detector order.
pub fn joints_3d(
    mesh: &HandMesh,
    theta: &Array1<f64>,
    beta: &Array1<f64>,
    asset: &HandModelAsset,
) -> Array2<f64> {
    let mut g = Graph::<f64>::new();
    let c = DecodeConsts::<f64>::from_asset(asset);
    let (theta_v, beta_v) = latent_inputs(&mut g, theta, beta);
    let skel = pose_skeleton(&mut g, &c, theta_v, beta_v).unwrap();
    let mut out = Array2::<f64>::zeros((OUTPUT_JOINTS, 3));
    for f in 0..5 {
        for l in 0..3 {
            let k = 1 + 3 * f + l;
            let tg = g.value(skel.fk.posed_joints[k]);
            for ci in 0..3 {
                out[[1 + 4 * f + l, ci]] = tg[[0, ci]];
            }
        }
        for ci in 0..3 {
            out[[1 + 4 * f + 3, ci]] = mesh.vertices[[c.fingertips[f], ci]];
        }
    }
    let wrist = g.value(skel.fk.posed_joints[0]);
    for ci in 0..3 {
        out[[0, ci]] = wrist[[0, ci]];
    }
    out
}

/// Eq-style weak-perspective projection of a joint set.
pub fn project_weak_perspective(
    joints3d: &Array2<f64>,
    camera: &WeakPerspectiveCamera,
) -> Array2<f64> {
    let r = camera.rotation_matrix();
    let mut out = Array2::<f64>::zeros((joints3d.nrows(), 2));
    for i in 0..joints3d.nrows() {
        for c in 0..2 {
            let rotated = r[[c, 0]] * joints3d[[i, 0]]
                + r[[c, 1]] * joints3d[[i, 1]]
                + r[[c, 2]] * joints3d[[i, 2]];
            out[[i, c]] = camera.scale * rotated + camera.offset[c];
        }
    }
    out
}

fn latent_inputs(
    g: &mut Graph<f64>,
    theta: &Array1<f64>,
    beta: &Array1<f64>,
) -> (Var, Var) {
    assert_eq!(theta.len(), POSE_DIM);
    assert_eq!(beta.len(), SHAPE_DIM);
    let theta_v = g
        .input2(Array2::from_shape_fn((1, POSE_DIM), |(_, j)| theta[j]))
        .unwrap();
    let beta_v = g
        .input2(Array2::from_shape_fn((1, SHAPE_DIM), |(_, j)| beta[j]))
        .unwrap();
    (theta_v, beta_v)
}
