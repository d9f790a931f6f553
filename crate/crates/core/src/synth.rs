//! Deterministic synthetic block-play sessions.
//!
//! Each session is a seated child at a table performing reach-place cycles with
//! alternating hands. Class behaviour is set by a [`BehaviorSignature`]; the
//! ASD and TD prototypes are pulled toward their midpoint as `separation`
//! decreases and coincide at zero. The data are not clinical.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::{write_session, Joint, Label, SkeletonFrame, SkeletonSequence, NUM_JOINTS};

pub const DEFAULT_FPS: f64 = 17.0;
pub const CLIP_SECONDS: f64 = 20.0;
/// Guided build, free play, pack-up.
pub const STAGE_SECONDS: [f64; 3] = [180.0, 180.0, 120.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Clip,
    Session,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clip" => Ok(Mode::Clip),
            "session" => Ok(Mode::Session),
            _ => Err(Error::Usage(format!("unknown mode `{s}` (expected clip or session)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub n_asd: usize,
    pub n_td: usize,
    pub mode: Mode,
    pub fps: f64,
    /// 0 makes the classes identical, 1 uses the full prototypes.
    pub separation: f64,
    pub seed: u64,
    /// Gaussian pixel noise standard deviation.
    pub noise: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            n_asd: 0,
            n_td: 0,
            mode: Mode::Clip,
            fps: DEFAULT_FPS,
            separation: 1.0,
            seed: 0,
            noise: 1.5,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(Error::Usage(format!("fps must be positive, got {}", self.fps)));
        }
        if !(0.0..=1.0).contains(&self.separation) {
            return Err(Error::Usage(format!("separation must lie in [0, 1], got {}", self.separation)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Usage(format!("noise must be non-negative, got {}", self.noise)));
        }
        Ok(())
    }

    pub fn frame_count(&self) -> usize {
        let secs = match self.mode {
            Mode::Clip => CLIP_SECONDS,
            Mode::Session => STAGE_SECONDS.iter().sum(),
        };
        (secs * self.fps).round() as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BehaviorSignature {
    /// Amplitude of high-frequency wrist tremor during reaches (pixels).
    pub jerk_scale: f64,
    /// Arm-waving events per minute.
    pub wave_rate: f64,
    /// Lateral wrist excursion during a wave (pixels).
    pub wave_amplitude: f64,
    /// 0 stacks blocks in a central tower, 1 lays them out in a row.
    pub row_bias: f64,
    /// Parent-assist proximity events per minute.
    pub assist_rate: f64,
    /// Standard deviation of head yaw as a fraction of head width.
    pub head_yaw: f64,
}

impl BehaviorSignature {
    pub const ASD: Self = Self {
        jerk_scale: 5.0,
        wave_rate: 14.0,
        wave_amplitude: 45.0,
        row_bias: 1.0,
        assist_rate: 6.0,
        head_yaw: 0.35,
    };

    pub const TD: Self = Self {
        jerk_scale: 1.0,
        wave_rate: 1.0,
        wave_amplitude: 20.0,
        row_bias: 0.0,
        assist_rate: 2.0,
        head_yaw: 0.15,
    };

    fn lerp(a: &Self, b: &Self, t: f64) -> Self {
        let f = |x: f64, y: f64| x + (y - x) * t;
        Self {
            jerk_scale: f(a.jerk_scale, b.jerk_scale),
            wave_rate: f(a.wave_rate, b.wave_rate),
            wave_amplitude: f(a.wave_amplitude, b.wave_amplitude),
            row_bias: f(a.row_bias, b.row_bias),
            assist_rate: f(a.assist_rate, b.assist_rate),
            head_yaw: f(a.head_yaw, b.head_yaw),
        }
    }

    /// Class prototype at the given separation.
    pub fn for_label(label: Label, separation: f64) -> Self {
        let mid = Self::lerp(&Self::ASD, &Self::TD, 0.5);
        let target = match label {
            Label::Td => Self::TD,
            _ => Self::ASD,
        };
        Self::lerp(&mid, &target, separation)
    }
}

/// One output of the SplitMix64 generator.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of session `index`: the `index`-th SplitMix64 output of the stream
/// started at `master`, i.e. `splitmix64(master + index · φ64)`.
pub fn session_seed(master: u64, index: u64) -> u64 {
    splitmix64(master.wrapping_add(index.wrapping_mul(0x9e37_79b9_7f4a_7c15)))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventCounts {
    pub reach_cycles: usize,
    pub waves: usize,
    pub assists: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedSession {
    pub sequence: SkeletonSequence,
    pub events: EventCounts,
    pub seed: u64,
}

#[derive(Clone, Copy)]
struct Interval {
    start: f64,
    end: f64,
}

impl Interval {
    fn contains(&self, t: f64) -> bool {
        t >= self.start && t < self.end
    }
    fn phase(&self, t: f64) -> f64 {
        (t - self.start) / (self.end - self.start)
    }
}

/// Poisson arrivals with durations drawn from `dur`, non-overlapping.
fn poisson_events(rng: &mut ChaCha8Rng, rate_per_min: f64, total: f64, dur: (f64, f64)) -> Vec<Interval> {
    let mut out = Vec::new();
    if rate_per_min <= 0.0 {
        return out;
    }
    let mean_gap = 60.0 / rate_per_min;
    let mut t = -mean_gap * rng.random::<f64>().max(1e-12).ln() * 0.5;
    while t < total {
        let d = rng.random_range(dur.0..dur.1);
        out.push(Interval {
            start: t,
            end: (t + d).min(total),
        });
        t += d - mean_gap * (1.0 - rng.random::<f64>()).ln();
    }
    out
}

fn min_jerk(s: f64) -> f64 {
    let s = s.clamp(0.0, 1.0);
    s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)
}

/// One reach-place cycle: rest -> pick -> place -> rest.
#[derive(Clone, Copy)]
struct Reach {
    span: Interval,
    right_hand: bool,
    pick: (f64, f64),
    place: (f64, f64),
}

struct Body {
    neck: (f64, f64),
    shoulder: f64,
    upper_arm: f64,
    forearm: f64,
    torso: f64,
    head: f64,
}

fn lerp2(a: (f64, f64), b: (f64, f64), s: f64) -> (f64, f64) {
    (a.0 + (b.0 - a.0) * s, a.1 + (b.1 - a.1) * s)
}

/// Elbow position for a two-link arm reaching `target` from `shoulder`, bent
/// outward (`side` = ±1) and downward.
fn elbow_ik(shoulder: (f64, f64), target: (f64, f64), l1: f64, l2: f64, side: f64) -> ((f64, f64), (f64, f64)) {
    let (dx, dy) = (target.0 - shoulder.0, target.1 - shoulder.1);
    let dist = (dx * dx + dy * dy).sqrt().max(1e-6);
    let reach = dist.clamp((l1 - l2).abs() + 1e-6, l1 + l2 - 1e-6);
    let wrist = (shoulder.0 + dx / dist * reach, shoulder.1 + dy / dist * reach);
    let a = (l1 * l1 - l2 * l2 + reach * reach) / (2.0 * reach);
    let h = (l1 * l1 - a * a).max(0.0).sqrt();
    let (ux, uy) = (dx / dist, dy / dist);
    let base = (shoulder.0 + ux * a, shoulder.1 + uy * a);
    // perpendicular pointing outward
    let mut perp = (-uy, ux);
    if perp.0 * side < 0.0 {
        perp = (uy, -ux);
    }
    ((base.0 + perp.0 * h, base.1 + perp.1 * h), wrist)
}

/// Synthesises one session.
pub fn generate_session(label: Label, spec: &GeneratorSpec, session_id: &str, seed: u64) -> Result<GeneratedSession> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.frame_count();
    let total = n as f64 / spec.fps;

    // per-subject variation of the class prototype
    let proto = BehaviorSignature::for_label(label, spec.separation);
    let mut jitter = |x: f64| x * rng.random_range(0.8..1.2);
    let sig = BehaviorSignature {
        jerk_scale: jitter(proto.jerk_scale),
        wave_rate: jitter(proto.wave_rate),
        wave_amplitude: jitter(proto.wave_amplitude),
        row_bias: proto.row_bias,
        assist_rate: jitter(proto.assist_rate),
        head_yaw: jitter(proto.head_yaw),
    };
    let row_bias = (sig.row_bias + rng.random_range(-0.15..0.15)).clamp(0.0, 1.0);

    let scale = rng.random_range(0.85..1.15);
    let body = Body {
        neck: (320.0 + rng.random_range(-25.0..25.0), 230.0 + rng.random_range(-20.0..20.0)),
        shoulder: 48.0 * scale,
        upper_arm: 62.0 * scale,
        forearm: 58.0 * scale,
        torso: 120.0 * scale,
        head: 70.0 * scale,
    };
    let table_y = body.neck.1 + 0.85 * body.torso;

    // reach-place cycles
    let mut reaches = Vec::new();
    let mut t = rng.random_range(0.0..1.0);
    let mut placed = 0usize;
    while t < total {
        let d = rng.random_range(2.2..3.8);
        let right_hand = reaches.len() % 2 == 0;
        let side = if right_hand { -1.0 } else { 1.0 };
        let pick = (
            body.neck.0 + side * rng.random_range(40.0..110.0) * scale,
            table_y + rng.random_range(-10.0..25.0) * scale,
        );
        let k = (placed % 6) as f64;
        // tower: rises above the table centre; row: slides sideways along it
        let tower = (body.neck.0, table_y - 12.0 * k * scale);
        let row = (body.neck.0 + (k - 2.5) * 26.0 * scale, table_y - 6.0 * scale);
        let place = lerp2(tower, row, row_bias);
        placed += 1;
        reaches.push(Reach {
            span: Interval { start: t, end: t + d },
            right_hand,
            pick,
            place,
        });
        t += d + rng.random_range(0.2..1.2);
    }

    let waves = poisson_events(&mut rng, sig.wave_rate, total, (1.5, 3.0));
    let assists = poisson_events(&mut rng, sig.assist_rate, total, (2.0, 4.0));
    let wave_freq: Vec<f64> = waves.iter().map(|_| rng.random_range(1.5..3.0)).collect();
    let assist_side: Vec<f64> = assists.iter().map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();

    let noise = Normal::new(0.0, spec.noise.max(1e-12)).expect("valid noise");
    let mut yaw = 0.0;
    let yaw_keep: f64 = 0.97;
    let yaw_drive = sig.head_yaw * (1.0 - yaw_keep * yaw_keep).sqrt();

    let mut frames = Vec::with_capacity(n);
    for f in 0..n {
        let t = f as f64 / spec.fps;

        // torso lean toward the parent during assists
        let mut lean = 0.0;
        for (ev, &s) in assists.iter().zip(&assist_side) {
            if ev.contains(t) {
                lean += s * 18.0 * scale * (PI * ev.phase(t)).sin();
            }
        }
        let neck = (body.neck.0 + lean, body.neck.1 + lean.abs() * 0.3);
        let sh = [(neck.0 + body.shoulder, neck.1 + 4.0), (neck.0 - body.shoulder, neck.1 + 4.0)];
        let rest = [
            (neck.0 + 45.0 * scale, table_y - 5.0 * scale),
            (neck.0 - 45.0 * scale, table_y - 5.0 * scale),
        ];
        // index 0 is the subject's left (image right)
        let mut wrist = rest;
        for r in &reaches {
            if r.span.contains(t) {
                let s = r.span.phase(t) * 3.0;
                let hand = if r.right_hand { 1 } else { 0 };
                let home = rest[hand];
                let p = if s < 1.0 {
                    lerp2(home, r.pick, min_jerk(s))
                } else if s < 2.0 {
                    let mut p = lerp2(r.pick, r.place, min_jerk(s - 1.0));
                    p.1 -= 20.0 * scale * (PI * (s - 1.0)).sin();
                    p
                } else {
                    lerp2(r.place, home, min_jerk(s - 2.0))
                };
                let tremor = sig.jerk_scale * (PI * (s / 3.0)).sin();
                wrist[hand] = (
                    p.0 + tremor * (2.0 * PI * 6.0 * t).sin(),
                    p.1 + tremor * (2.0 * PI * 7.3 * t + 1.0).cos(),
                );
            }
        }
        for ((ev, &fq), _) in waves.iter().zip(&wave_freq).zip(0..) {
            if ev.contains(t) {
                let ph = ev.phase(t);
                let lift = min_jerk((ph * 4.0).min(1.0)) * min_jerk(((1.0 - ph) * 4.0).min(1.0));
                let osc = sig.wave_amplitude * (2.0 * PI * fq * t).sin();
                for (hand, side) in [(0usize, 1.0), (1usize, -1.0)] {
                    let raised = (sh[hand].0 + side * 40.0 * scale + osc, neck.1 - 0.9 * body.head);
                    wrist[hand] = lerp2(wrist[hand], raised, lift);
                }
            }
        }

        yaw = yaw_keep * yaw + yaw_drive * rng.random_range(-1.7..1.7);
        let head_w = 0.5 * body.head;
        let nose = (neck.0 + yaw * head_w, neck.1 - 0.75 * body.head);
        let ear_y = nose.1 - 0.12 * body.head;
        let eye_y = nose.1 - 0.2 * body.head;

        let mut pts = [(0.0, 0.0); NUM_JOINTS];
        pts[0] = nose;
        pts[1] = (nose.0 + 0.22 * head_w, eye_y);
        pts[2] = (nose.0 - 0.22 * head_w, eye_y);
        pts[3] = (neck.0 + head_w * (1.0 - 0.4 * yaw), ear_y);
        pts[4] = (neck.0 - head_w * (1.0 + 0.4 * yaw), ear_y);
        pts[5] = sh[0];
        pts[6] = sh[1];
        for hand in 0..2 {
            let side = if hand == 0 { 1.0 } else { -1.0 };
            let (elbow, w) = elbow_ik(sh[hand], wrist[hand], body.upper_arm, body.forearm, side);
            pts[7 + hand] = elbow;
            pts[9 + hand] = w;
        }
        let hip_y = body.neck.1 + body.torso;
        pts[11] = (body.neck.0 + 0.75 * body.shoulder + 0.3 * lean, hip_y);
        pts[12] = (body.neck.0 - 0.75 * body.shoulder + 0.3 * lean, hip_y);
        pts[13] = (pts[11].0 + 10.0 * scale, hip_y + 45.0 * scale);
        pts[14] = (pts[12].0 - 10.0 * scale, hip_y + 45.0 * scale);
        pts[15] = (pts[13].0, hip_y + 95.0 * scale);
        pts[16] = (pts[14].0, hip_y + 95.0 * scale);

        let mut joints = [Joint {
            x: 0.0,
            y: 0.0,
            confidence: 0.0,
        }; NUM_JOINTS];
        for (j, &(x, y)) in joints.iter_mut().zip(&pts) {
            let (nx, ny) = if spec.noise > 0.0 {
                (noise.sample(&mut rng), noise.sample(&mut rng))
            } else {
                (0.0, 0.0)
            };
            let confidence = if rng.random::<f64>() < 0.01 {
                rng.random_range(0.0..0.3)
            } else {
                rng.random_range(0.7..=1.0)
            };
            *j = Joint {
                x: round2(x + nx),
                y: round2(y + ny),
                confidence: round2(confidence),
            };
        }
        frames.push(SkeletonFrame { joints });
    }

    Ok(GeneratedSession {
        sequence: SkeletonSequence {
            session_id: session_id.to_string(),
            fps: spec.fps,
            frames,
            label,
        },
        events: EventCounts {
            reach_cycles: reaches.len(),
            waves: waves.len(),
            assists: assists.len(),
        },
        seed,
    })
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

/// Labels and ids of a dataset in generation order: ASD sessions first.
pub fn dataset_plan(spec: &GeneratorSpec) -> Vec<(String, Label, u64)> {
    (0..spec.n_asd + spec.n_td)
        .map(|i| {
            let label = if i < spec.n_asd { Label::Asd } else { Label::Td };
            let tag = if label == Label::Asd { "asd" } else { "td" };
            (format!("s{i:04}-{tag}"), label, session_seed(spec.seed, i as u64))
        })
        .collect()
}

/// Generates every session of the spec in memory.
pub fn generate_all(spec: &GeneratorSpec) -> Result<Vec<GeneratedSession>> {
    spec.validate()?;
    dataset_plan(spec)
        .into_par_iter()
        .map(|(id, label, seed)| generate_session(label, spec, &id, seed))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub label: String,
    pub seed: u64,
    pub mode: Mode,
    pub frames: usize,
    pub events: EventCounts,
    pub synthetic: bool,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const SESSION_SUFFIX: &str = ".skel.jsonl";

/// Writes `{id}.skel.jsonl` per session plus `manifest.jsonl`.
pub fn generate_dataset(spec: &GeneratorSpec, out: &Path) -> Result<Vec<ManifestRecord>> {
    spec.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let records: Vec<ManifestRecord> = dataset_plan(spec)
        .into_par_iter()
        .map(|(id, label, seed)| {
            let s = generate_session(label, spec, &id, seed)?;
            let path = out.join(format!("{id}{SESSION_SUFFIX}"));
            std::fs::write(&path, write_session(&s.sequence)).map_err(|e| Error::io(&path, e))?;
            Ok(ManifestRecord {
                id,
                label: label.to_string(),
                seed,
                mode: spec.mode,
                frames: s.sequence.len(),
                events: s.events,
                synthetic: true,
            })
        })
        .collect::<Result<_>>()?;
    let mut text = String::new();
    for r in &records {
        text.push_str(&serde_json::to_string(r).expect("manifest record serialises"));
        text.push('\n');
    }
    let path = out.join(MANIFEST_FILE);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(records)
}

/// Session files of a directory, sorted by file name.
pub fn session_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let p = entry.path();
        if p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(SESSION_SUFFIX)) {
            files.push(p);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::Data(format!("no {SESSION_SUFFIX} files in {}", dir.display())));
    }
    Ok(files)
}

/// Reads every session file of a directory in name order.
pub fn load_dataset(dir: &Path) -> Result<Vec<SkeletonSequence>> {
    session_files(dir)?
        .par_iter()
        .map(|p| crate::skeleton::read_session(p))
        .collect()
}
