//! Parametric synthetic gait generator.
//!
//! Real gait datasets need a radar; this module stands in with a kinematic
//! skeleton — a torso on a smooth random walk inside a room, limbs swinging
//! sinusoidally at the subject's gait frequency — sampled into sparse noisy
//! point clouds with exact radial velocities. Subject profiles are spread on
//! a Latin hypercube so inter-subject separability is controllable: at
//! separability 1 every pair of subjects differs by at least one full cell
//! in every parameter dimension.

use crate::data::{Modality, PointFrame, RecordingSegment};
use rand::Rng;
use rand_distr::{Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

/// Room footprint (meters): x ∈ [0, 7.8], y ∈ [0, 7.3], z ∈ [0, 2.2].
pub const ROOM: [[f64; 2]; 3] = [[0.0, 7.8], [0.0, 7.3], [0.0, 2.2]];
/// Sensor origin: a room corner at 1 m height.
pub const SENSOR_ORIGIN: [f64; 3] = [0.0, 0.0, 1.0];
/// Torso keeps this distance from the walls so limbs plus position noise
/// stay inside the room.
const WALL_MARGIN: f64 = 0.9;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubjectProfile {
    pub subject_id: u32,
    pub height: f64,
    pub torso_speed_mean: f64,
    pub gait_frequency: f64,
    pub arm_swing_amplitude: f64,
    pub leg_swing_amplitude: f64,
    pub point_rate_mean: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// Physical ranges for the seven Latin-hypercube dimensions.
const RANGES: [(f64, f64); 7] = [
    (1.50, 2.00),   // height (m)
    (0.80, 1.60),   // torso speed mean (m/s)
    (0.70, 1.40),   // gait frequency (Hz)
    (0.15, 0.45),   // arm swing amplitude (m)
    (0.25, 0.60),   // leg swing amplitude (m)
    (140.0, 260.0), // expected points per frame
    (0.010, 0.030), // position noise sigma (m)
];

/// Draw `m` subject profiles from Latin-hypercube-spread parameter cells.
///
/// Each dimension gets its own random permutation of the `m` cells; profiles
/// sit at cell centers jittered by up to `(1 - separability)/2` of a cell, so
/// separability 1 pins them to centers (pairwise distance at least one cell
/// width in every dimension) and lower values blur the spread.
pub fn generate_profiles(m: usize, seed: u64, separability: f64) -> Vec<SubjectProfile> {
    assert!(m >= 2, "generate_profiles: need at least 2 subjects, got {}", m);
    assert!(
        separability > 0.0 && separability <= 1.0,
        "generate_profiles: separability must be in (0, 1], got {}",
        separability
    );
    let mut rng = crate::seeds::rng_for(seed, "profiles");
    let cell = 1.0 / m as f64;
    // Per-dimension cell permutations.
    let mut cells = vec![vec![0usize; m]; RANGES.len()];
    for dim_cells in cells.iter_mut() {
        let mut perm: Vec<usize> = (0..m).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut rng);
        *dim_cells = perm;
    }
    (0..m)
        .map(|i| {
            let mut vals = [0.0f64; 7];
            for (d, &(lo, hi)) in RANGES.iter().enumerate() {
                let jitter: f64 = rng.gen_range(-0.5..0.5) * (1.0 - separability) * cell;
                let unit = (cells[d][i] as f64 + 0.5) * cell + jitter;
                vals[d] = lo + unit * (hi - lo);
            }
            SubjectProfile {
                subject_id: (i + 1) as u32,
                height: vals[0],
                torso_speed_mean: vals[1],
                gait_frequency: vals[2],
                arm_swing_amplitude: vals[3],
                leg_swing_amplitude: vals[4],
                point_rate_mean: vals[5],
                noise_sigma: vals[6],
                seed: crate::seeds::subseed_indexed(seed, "profile", (i + 1) as u64),
            }
        })
        .collect()
}

/// A body segment with linearly interpolated position and velocity.
struct Segment {
    a: [f64; 3],
    b: [f64; 3],
    va: [f64; 3],
    vb: [f64; 3],
    weight: f64,
}

fn seg(a: [f64; 3], b: [f64; 3], va: [f64; 3], vb: [f64; 3]) -> Segment {
    let len = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
    Segment { a, b, va, vb, weight: len.max(1e-6) }
}

/// Per-arm swing scaling under each recording modality: holding a smartphone
/// stills one arm, hands in pockets still both.
fn arm_scale(modality: Modality) -> (f64, f64) {
    match modality {
        Modality::FreeWalk => (1.0, 1.0),
        Modality::Smartphone => (1.0, 0.15),
        Modality::HandsInPockets => (0.1, 0.1),
    }
}

/// Simulate one recording of a subject under a modality.
///
/// Deterministic: (profile, modality, duration, frame rate) fully determine
/// the output. Velocities carry no noise of their own — each point's v is
/// the exact projection of its body-segment velocity on the line of sight —
/// so a stationary body yields exactly zero velocities.
pub fn simulate_recording(
    profile: &SubjectProfile,
    modality: Modality,
    duration_s: f64,
    frame_rate_hz: f64,
) -> RecordingSegment {
    assert!(duration_s > 0.0, "simulate_recording: duration must be positive");
    assert!(frame_rate_hz > 0.0, "simulate_recording: frame rate must be positive");
    let mut rng =
        crate::seeds::rng_for_indexed(profile.seed, "simulate", modality.as_u8() as u64);
    let n_frames = (duration_s * frame_rate_hz).round() as usize;
    let dt = 1.0 / frame_rate_hz;
    let h = profile.height;
    let (scale_l, scale_r) = arm_scale(modality);

    // Torso state: position, heading, gait phase.
    let mut pos = [
        rng.gen_range(ROOM[0][0] + WALL_MARGIN..ROOM[0][1] - WALL_MARGIN),
        rng.gen_range(ROOM[1][0] + WALL_MARGIN..ROOM[1][1] - WALL_MARGIN),
    ];
    let mut heading: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);

    let poisson = Poisson::new(profile.point_rate_mean.max(1e-9)).unwrap();
    let mut frames = Vec::with_capacity(n_frames);
    for fi in 0..n_frames {
        // Heading wanders; near a wall it blends toward the room center.
        heading += 0.3 * dt.sqrt() * rng.sample::<f64, _>(StandardNormal);
        let cx = 0.5 * (ROOM[0][0] + ROOM[0][1]);
        let cy = 0.5 * (ROOM[1][0] + ROOM[1][1]);
        let near_wall = pos[0] < ROOM[0][0] + WALL_MARGIN
            || pos[0] > ROOM[0][1] - WALL_MARGIN
            || pos[1] < ROOM[1][0] + WALL_MARGIN
            || pos[1] > ROOM[1][1] - WALL_MARGIN;
        if near_wall {
            let to_center = (cy - pos[1]).atan2(cx - pos[0]);
            let mut diff = to_center - heading;
            while diff > std::f64::consts::PI {
                diff -= std::f64::consts::TAU;
            }
            while diff < -std::f64::consts::PI {
                diff += std::f64::consts::TAU;
            }
            heading += 0.5 * diff;
        }
        // Forward speed pulses slightly at the gait frequency.
        let speed = profile.torso_speed_mean * (1.0 + 0.08 * (2.0 * phase).sin());
        let dir = [heading.cos(), heading.sin()];
        pos[0] = (pos[0] + speed * dir[0] * dt)
            .clamp(ROOM[0][0] + 0.75 * WALL_MARGIN, ROOM[0][1] - 0.75 * WALL_MARGIN);
        pos[1] = (pos[1] + speed * dir[1] * dt)
            .clamp(ROOM[1][0] + 0.75 * WALL_MARGIN, ROOM[1][1] - 0.75 * WALL_MARGIN);
        phase += std::f64::consts::TAU * profile.gait_frequency * dt;

        let torso_v = [speed * dir[0], speed * dir[1], 0.0];
        let perp = [-dir[1], dir[0]];
        let omega = std::f64::consts::TAU * profile.gait_frequency;

        // Skeleton joints. Lateral offsets put the two legs and arms on
        // opposite sides of the heading; phase offsets make them counter-swing.
        let hip = [pos[0], pos[1], 0.52 * h];
        let shoulder = [pos[0], pos[1], 0.82 * h];
        let head = [pos[0], pos[1], h];
        let mut segments = vec![
            seg(hip, shoulder, torso_v, torso_v),
            seg(shoulder, head, torso_v, torso_v),
        ];
        for (side, sgn, amp_scale) in [(0usize, 1.0f64, scale_l), (1, -1.0, scale_r)] {
            let leg_phase = phase + if side == 0 { 0.0 } else { std::f64::consts::PI };
            let arm_phase = leg_phase + std::f64::consts::PI;
            let hip_side = [
                pos[0] + sgn * 0.10 * h * perp[0],
                pos[1] + sgn * 0.10 * h * perp[1],
                0.50 * h,
            ];
            let swing = profile.leg_swing_amplitude * leg_phase.sin();
            // Foot lift scales with the swing so a zero-amplitude (standing)
            // body is fully static.
            let lift = 0.1 * profile.leg_swing_amplitude;
            let foot = [
                hip_side[0] + swing * dir[0],
                hip_side[1] + swing * dir[1],
                lift * leg_phase.sin().max(0.0),
            ];
            let swing_v = profile.leg_swing_amplitude * omega * leg_phase.cos();
            let foot_v = [
                torso_v[0] + swing_v * dir[0],
                torso_v[1] + swing_v * dir[1],
                lift * omega * leg_phase.cos() * if leg_phase.sin() > 0.0 { 1.0 } else { 0.0 },
            ];
            segments.push(seg(hip_side, foot, torso_v, foot_v));

            let shoulder_side = [
                pos[0] + sgn * 0.13 * h * perp[0],
                pos[1] + sgn * 0.13 * h * perp[1],
                0.80 * h,
            ];
            let arm_amp = profile.arm_swing_amplitude * amp_scale;
            let arm_swing = arm_amp * arm_phase.sin();
            let hand = [
                shoulder_side[0] + arm_swing * dir[0],
                shoulder_side[1] + arm_swing * dir[1],
                0.48 * h,
            ];
            let arm_swing_v = arm_amp * omega * arm_phase.cos();
            let hand_v = [
                torso_v[0] + arm_swing_v * dir[0],
                torso_v[1] + arm_swing_v * dir[1],
                0.0,
            ];
            segments.push(seg(shoulder_side, hand, torso_v, hand_v));
        }

        let total_weight: f64 = segments.iter().map(|s| s.weight).sum();
        let n_points = rng.sample(poisson) as usize;
        let mut points = Vec::with_capacity(n_points);
        for _ in 0..n_points {
            let mut pick = rng.gen_range(0.0..total_weight);
            let mut chosen = &segments[0];
            for s in &segments {
                if pick < s.weight {
                    chosen = s;
                    break;
                }
                pick -= s.weight;
            }
            let u: f64 = rng.gen_range(0.0..1.0);
            let mut p = [0.0f64; 3];
            let mut v = [0.0f64; 3];
            for c in 0..3 {
                p[c] = chosen.a[c] + u * (chosen.b[c] - chosen.a[c]);
                v[c] = chosen.va[c] + u * (chosen.vb[c] - chosen.va[c]);
            }
            // Position noise truncated at 3σ so every point stays inside the
            // room inflated by 3σ; velocities stay noise-free by design.
            for pc in p.iter_mut() {
                let n: f64 = rng.sample::<f64, _>(StandardNormal) * profile.noise_sigma;
                *pc += n.clamp(-3.0 * profile.noise_sigma, 3.0 * profile.noise_sigma);
            }
            let los = [
                p[0] - SENSOR_ORIGIN[0],
                p[1] - SENSOR_ORIGIN[1],
                p[2] - SENSOR_ORIGIN[2],
            ];
            let dist = (los[0] * los[0] + los[1] * los[1] + los[2] * los[2]).sqrt().max(1e-9);
            let radial = (v[0] * los[0] + v[1] * los[1] + v[2] * los[2]) / dist;
            points.push([p[0], p[1], p[2], radial]);
        }
        frames.push(PointFrame { points, timestamp_index: fi as u32 });
    }
    RecordingSegment {
        subject_id: profile.subject_id,
        modality,
        frame_rate_hz: frame_rate_hz as f32,
        frames,
    }
}
