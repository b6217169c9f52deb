//! Deterministic synthetic signer generator: per class, a smooth sinusoidal
//! trajectory motif in hand-model pose-coefficient space, rendered through
//! the hand model to 2D joints in a nominal source image, then corrupted
//! with Gaussian jitter and joint dropout the way a detector would fail.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::handmodel::{
    decode_joints3d, project_points, synth_asset, DecodeConsts, HandModelAsset, OUTPUT_JOINTS,
    PCA_COEFFS, POSE_DIM, SHAPE_DIM,
};
use crate::numerics::Graph;
use crate::posedata::{Chirality, HandPoseFrame, HandSequence, JOINT_COUNT};

/// Nominal source-image side in pixels; hands are placed inside it.
pub const SOURCE_IMAGE_SIZE: f64 = 512.0;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub class_count: usize,
    pub sequences_per_class: usize,
    pub sequence_length: usize,
    /// jitter sigma as a fraction of the 256-pixel crop size
    pub noise_sigma: f64,
    /// probability that a joint's detection fails (zeroed, confidence 0)
    pub dropout_rate: f64,
    /// probability that a hand is missing for a whole frame
    pub frame_drop_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            class_count: 10,
            sequences_per_class: 50,
            sequence_length: 60,
            noise_sigma: 0.01,
            dropout_rate: 0.02,
            frame_drop_rate: 0.02,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.class_count == 0 || self.sequences_per_class == 0 {
            return Err("class_count and sequences_per_class must be positive".into());
        }
        if self.sequence_length == 0 {
            return Err("sequence_length must be at least 1".into());
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("dropout_rate", self.dropout_rate),
            ("frame_drop_rate", self.frame_drop_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name} must lie in [0,1], got {v}"));
            }
        }
        Ok(())
    }
}

struct ClassMotif {
    /// (amplitude vector over PCA coeffs, angular frequency, phase)
    sinusoids: Vec<(Vec<f64>, f64, f64)>,
    global_rotation_base: [f64; 3],
    global_rotation_wobble: [f64; 3],
    wobble_freq: f64,
}

fn class_motif(rng: &mut ChaCha20Rng) -> ClassMotif {
    let n = rng.gen_range(2..=4usize);
    let mut sinusoids = Vec::with_capacity(n);
    for _ in 0..n {
        let amp: Vec<f64> = (0..PCA_COEFFS)
            .map(|_| {
                if rng.gen_bool(0.35) {
                    rng.gen_range(-1.4..1.4)
                } else {
                    0.0
                }
            })
            .collect();
        let freq = rng.gen_range(0.05..0.35);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        sinusoids.push((amp, freq, phase));
    }
    ClassMotif {
        sinusoids,
        global_rotation_base: [
            rng.gen_range(-0.4..0.4),
            rng.gen_range(-0.4..0.4),
            rng.gen_range(-0.4..0.4),
        ],
        global_rotation_wobble: [
            rng.gen_range(-0.15..0.15),
            rng.gen_range(-0.15..0.15),
            rng.gen_range(-0.15..0.15),
        ],
        wobble_freq: rng.gen_range(0.05..0.2),
    }
}

/// Render the clean (uncorrupted) 2D joints for one hand over a whole
/// sequence: `(len, 21, 2)` flattened row-major as `(len*21, 2)`.
fn render_hand(
    consts: &DecodeConsts<f64>,
    motif: &ClassMotif,
    len: usize,
    beta: &[f64],
    cam_rotation: [f64; 3],
    cam_scale: f64,
    cam_center: [f64; 2],
    drift_amp: [f64; 2],
    drift_freq: f64,
    phase_shift: f64,
    mirror_x: bool,
) -> Array2<f64> {
    let mut theta = Array2::<f64>::zeros((len, POSE_DIM));
    let mut beta_m = Array2::<f64>::zeros((len, SHAPE_DIM));
    let mut rot = Array2::<f64>::zeros((len, 3));
    let mut off = Array2::<f64>::zeros((len, 2));
    let mut scale = Array2::<f64>::zeros((len, 1));
    for t in 0..len {
        let tf = t as f64;
        for c in 0..3 {
            theta[[t, c]] = motif.global_rotation_base[c]
                + motif.global_rotation_wobble[c] * (motif.wobble_freq * tf + phase_shift).sin();
        }
        for (amp, freq, phase) in &motif.sinusoids {
            for d in 0..PCA_COEFFS {
                theta[[t, 3 + d]] += amp[d] * (freq * tf + phase + phase_shift).sin();
            }
        }
        for d in 0..SHAPE_DIM {
            beta_m[[t, d]] = beta[d];
        }
        for c in 0..3 {
            rot[[t, c]] = cam_rotation[c];
        }
        off[[t, 0]] = cam_center[0] + drift_amp[0] * (drift_freq * tf + phase_shift).sin();
        off[[t, 1]] = cam_center[1] + drift_amp[1] * (drift_freq * tf + 1.3 + phase_shift).sin();
        scale[[t, 0]] = cam_scale;
    }

    let mut g = Graph::<f64>::new();
    let theta_v = g.input2(theta).unwrap();
    let beta_v = g.input2(beta_m).unwrap();
    let joints = decode_joints3d(&mut g, consts, theta_v, beta_v).unwrap();
    let rot_v = g.input2(rot).unwrap();
    let off_v = g.input2(off).unwrap();
    let scale_v = g.input2(scale).unwrap();
    let projected = project_points(&mut g, joints, rot_v, off_v, scale_v, OUTPUT_JOINTS).unwrap();
    let flat = g.value(projected);
    let mut out = Array2::<f64>::zeros((len * OUTPUT_JOINTS, 2));
    for i in 0..len * OUTPUT_JOINTS {
        let x = flat[[i, 0]];
        out[[i, 0]] = if mirror_x { SOURCE_IMAGE_SIZE - x } else { x };
        out[[i, 1]] = flat[[i, 1]];
    }
    out
}

/// One generated sequence: the corrupted observation plus the clean render.
pub struct SynthSequence {
    pub observed: HandSequence,
    /// clean joints per (time, hand): `truth[hand_index]` is `(len*21, 2)`
    pub truth: [Array2<f64>; 2],
}

/// Generate the labeled dataset. Deterministic given the config seed.
pub fn synth_generate(config: &SynthConfig) -> Result<Vec<HandSequence>, String> {
    Ok(synth_generate_with_truth(config)?
        .into_iter()
        .map(|s| s.observed)
        .collect())
}

/// As [`synth_generate`] but keeps the clean pre-corruption joints, which
/// tests use as the no-corruption oracle.
pub fn synth_generate_with_truth(config: &SynthConfig) -> Result<Vec<SynthSequence>, String> {
    config.validate()?;
    let asset = synth_asset(config.seed);
    synth_generate_with_asset(config, &asset)
}

pub fn synth_generate_with_asset(
    config: &SynthConfig,
    asset: &HandModelAsset,
) -> Result<Vec<SynthSequence>, String> {
    config.validate()?;
    let consts = DecodeConsts::<f64>::from_asset(asset);
    let mut class_rng = ChaCha20Rng::seed_from_u64(config.seed);
    class_rng.set_stream(1);
    let motifs: Vec<ClassMotif> = (0..config.class_count)
        .map(|_| class_motif(&mut class_rng))
        .collect();

    let len = config.sequence_length;
    let sigma_px = config.noise_sigma * crate::posedata::CROP_SIZE;
    let mut out = Vec::with_capacity(config.class_count * config.sequences_per_class);
    for class in 0..config.class_count {
        for idx in 0..config.sequences_per_class {
            let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
            rng.set_stream(1_000 + (class * config.sequences_per_class + idx) as u64);
            let beta: Vec<f64> = (0..SHAPE_DIM).map(|_| rng.gen_range(-0.8..0.8)).collect();
            let phase_shift = rng.gen_range(0.0..std::f64::consts::TAU);
            let cam_scale = 110.0 * rng.gen_range(0.85..1.15);
            let cam_rotation = [
                rng.gen_range(-0.25..0.25),
                rng.gen_range(-0.25..0.25),
                rng.gen_range(-0.25..0.25),
            ];
            let drift_freq = rng.gen_range(0.03..0.12);
            let drift_amp = [rng.gen_range(5.0..25.0), rng.gen_range(5.0..25.0)];
            let right_center = [
                SOURCE_IMAGE_SIZE * 0.66 + rng.gen_range(-20.0..20.0),
                SOURCE_IMAGE_SIZE * 0.5 + rng.gen_range(-30.0..30.0),
            ];
            let left_center = [
                SOURCE_IMAGE_SIZE * 0.34 + rng.gen_range(-20.0..20.0),
                SOURCE_IMAGE_SIZE * 0.5 + rng.gen_range(-30.0..30.0),
            ];

            let motif = &motifs[class];
            let right = render_hand(
                &consts, motif, len, &beta, cam_rotation, cam_scale, right_center,
                drift_amp, drift_freq, phase_shift, false,
            );
            let left = render_hand(
                &consts, motif, len, &beta, cam_rotation, cam_scale,
                // mirroring flips around the image center, so place the
                // pre-mirror hand at the mirrored x
                [SOURCE_IMAGE_SIZE - left_center[0], left_center[1]],
                drift_amp, drift_freq, phase_shift + 0.7, true,
            );

            let mut frames = Vec::with_capacity(len * 2);
            for t in 0..len {
                for (hand, truth) in [(Chirality::Left, &left), (Chirality::Right, &right)] {
                    let dropped = config.frame_drop_rate > 0.0
                        && rng.gen_bool(config.frame_drop_rate);
                    if dropped {
                        frames.push(HandPoseFrame::missing(hand, t));
                        continue;
                    }
                    let mut f = HandPoseFrame::missing(hand, t);
                    for j in 0..JOINT_COUNT {
                        let clean = [truth[[t * JOINT_COUNT + j, 0]], truth[[t * JOINT_COUNT + j, 1]]];
                        let joint_dropped = config.dropout_rate > 0.0
                            && rng.gen_bool(config.dropout_rate);
                        if joint_dropped {
                            continue; // stays zero with confidence 0
                        }
                        if sigma_px > 0.0 {
                            let normal = Normal::new(0.0, sigma_px).unwrap();
                            let dx = normal.sample(&mut rng);
                            let dy = normal.sample(&mut rng);
                            f.joints[j] = [clean[0] + dx, clean[1] + dy];
                            let c = (-(dx * dx + dy * dy) / (2.0 * sigma_px * sigma_px)).exp();
                            f.confidence[j] = c.clamp(0.0, 1.0);
                        } else {
                            f.joints[j] = clean;
                            f.confidence[j] = 1.0;
                        }
                    }
                    frames.push(f);
                }
            }
            out.push(SynthSequence {
                observed: HandSequence {
                    frames,
                    label: Some(class),
                    source_id: format!("class{class:02}_seq{idx:03}"),
                    fps: 25.0,
                },
                truth: [left, right],
            });
        }
    }
    Ok(out)
}
