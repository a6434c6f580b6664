//! Procedural moving-shapes videos with exact instance masks and optical flow.
//!
//! Objects are rasterised at pixel centres in painter's order (later objects
//! on top). Motion is affine per object: constant translation plus optional
//! rotation about the object centre. Flow of frame `t` is the displacement
//! from frame `t - 1` to `t` of the surface visible at each pixel of frame `t`;
//! frame 1 reuses frame 2's flow.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::encode_flow;
use crate::video::{FlowField, Image, LabelMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
    Triangle,
}

/// Two-tone stripe pattern painted in object-local coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stripes {
    pub color: [f64; 3],
    /// Width of one stripe in pixels.
    pub period: f64,
    pub angle: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: ShapeKind,
    /// Full extent `[width, height]` in pixels before rotation.
    pub size: [f64; 2],
    pub color: [f64; 3],
    pub stripes: Option<Stripes>,
    /// Amplitude of per-pixel colour grain fixed to the object surface.
    pub grain: f64,
    /// Centre `[x, y]` in frame 1.
    pub position: [f64; 2],
    /// Pixels per frame.
    pub velocity: [f64; 2],
    pub angle: f64,
    /// Radians per frame.
    pub rotation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub objects: Vec<ObjectSpec>,
    pub max_objects: usize,
    pub background_seed: u64,
    /// Camera pan in pixels per frame; the background translates by this.
    pub background_motion: [f64; 2],
    pub occlusion_allowed: bool,
    pub seed: u64,
    pub v_max: f64,
}

/// One rendered sequence. Frame `t` (1-based in files) is index `t - 1` here.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub height: usize,
    pub width: usize,
    pub frames: Vec<Image>,
    pub flows: Vec<FlowField>,
    pub flow_images: Vec<Image>,
    pub masks: Vec<LabelMap>,
    pub object_ids: Vec<u8>,
    pub seed: u64,
    pub v_max: f64,
}

impl VideoSample {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn num_objects(&self) -> usize {
        self.object_ids.len()
    }

    /// Frames `start..start + len` as a new sample; flow of the new first frame
    /// again copies the second.
    pub fn window(&self, start: usize, len: usize) -> VideoSample {
        let end = (start + len).min(self.num_frames());
        let mut flows: Vec<FlowField> = self.flows[start..end].to_vec();
        if flows.len() >= 2 {
            flows[0] = flows[1].clone();
        }
        let flow_images = flows.iter().map(|f| encode_flow(f, self.v_max)).collect();
        VideoSample {
            height: self.height,
            width: self.width,
            frames: self.frames[start..end].to_vec(),
            flows,
            flow_images,
            masks: self.masks[start..end].to_vec(),
            object_ids: self.object_ids.clone(),
            seed: self.seed,
            v_max: self.v_max,
        }
    }
}

/// Quantises a colour channel to the 8-bit grid used by PPM files.
pub fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Uniform value in `[0, 1)` keyed by a seed and integer lattice coordinates.
fn lattice(seed: u64, a: i64, b: i64, c: u64) -> f64 {
    let h = splitmix(seed ^ splitmix((a as u64).wrapping_mul(0x1000_0000_01b3) ^ splitmix(b as u64 ^ (c << 48))));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

const BACKGROUND_CELL: f64 = 8.0;

/// Seeded value noise: bilinear interpolation of lattice colours plus grain.
fn background_color(seed: u64, x: f64, y: f64) -> [f64; 3] {
    let gx = x / BACKGROUND_CELL;
    let gy = y / BACKGROUND_CELL;
    let (x0, y0) = (gx.floor(), gy.floor());
    let (fx, fy) = (gx - x0, gy - y0);
    let (x0, y0) = (x0 as i64, y0 as i64);
    let mut rgb = [0.0; 3];
    for (c, out) in rgb.iter_mut().enumerate() {
        let v00 = lattice(seed, x0, y0, c as u64);
        let v10 = lattice(seed, x0 + 1, y0, c as u64);
        let v01 = lattice(seed, x0, y0 + 1, c as u64);
        let v11 = lattice(seed, x0 + 1, y0 + 1, c as u64);
        let top = v00 + (v10 - v00) * fx;
        let bot = v01 + (v11 - v01) * fx;
        let smooth = top + (bot - top) * fy;
        let grain = lattice(seed ^ 0xabcd, x.floor() as i64, y.floor() as i64, c as u64) - 0.5;
        *out = 0.15 + 0.7 * smooth + 0.08 * grain;
    }
    rgb
}

struct Placed<'a> {
    spec: &'a ObjectSpec,
    index: usize,
    centre: [f64; 2],
    angle: f64,
}

impl Placed<'_> {
    fn new(spec: &ObjectSpec, index: usize, t: usize) -> Placed<'_> {
        let t = t as f64;
        Placed {
            spec,
            index,
            centre: [spec.position[0] + t * spec.velocity[0], spec.position[1] + t * spec.velocity[1]],
            angle: spec.angle + t * spec.rotation,
        }
    }

    /// Object-local coordinates of image point `(px, py)`.
    fn local(&self, px: f64, py: f64) -> (f64, f64) {
        let (dx, dy) = (px - self.centre[0], py - self.centre[1]);
        if self.angle == 0.0 {
            return (dx, dy);
        }
        let (s, c) = self.angle.sin_cos();
        (c * dx + s * dy, -s * dx + c * dy)
    }

    fn covers(&self, px: f64, py: f64) -> bool {
        let (u, v) = self.local(px, py);
        let (hw, hh) = (self.spec.size[0] / 2.0, self.spec.size[1] / 2.0);
        match self.spec.shape {
            ShapeKind::Rectangle => u.abs() <= hw && v.abs() <= hh,
            ShapeKind::Ellipse => (u / hw).powi(2) + (v / hh).powi(2) <= 1.0,
            ShapeKind::Triangle => v >= -hh && v <= hh && u.abs() <= hw * (v + hh) / (2.0 * hh),
        }
    }

    fn color(&self, seed: u64, px: f64, py: f64) -> [f64; 3] {
        let (u, v) = self.local(px, py);
        let mut rgb = self.spec.color;
        if let Some(st) = &self.spec.stripes {
            let (s, c) = st.angle.sin_cos();
            let band = ((c * u + s * v) / st.period).floor() as i64;
            if band.rem_euclid(2) == 1 {
                rgb = st.color;
            }
        }
        if self.spec.grain > 0.0 {
            let key = seed ^ (self.index as u64 + 1).wrapping_mul(0x51_7cc1_b727_220a);
            for (c, ch) in rgb.iter_mut().enumerate() {
                let n = lattice(key, u.floor() as i64, v.floor() as i64, c as u64) - 0.5;
                *ch += 2.0 * self.spec.grain * n;
            }
        }
        rgb
    }

    /// Displacement from the previous frame of the surface point under `(px, py)`.
    fn flow(&self, px: f64, py: f64) -> (f64, f64) {
        if self.spec.rotation == 0.0 {
            return (self.spec.velocity[0], self.spec.velocity[1]);
        }
        let (u, v) = self.local(px, py);
        let prev_angle = self.angle - self.spec.rotation;
        let (s, c) = prev_angle.sin_cos();
        let prev = [
            self.centre[0] - self.spec.velocity[0] + c * u - s * v,
            self.centre[1] - self.spec.velocity[1] + s * u + c * v,
        ];
        (px - prev[0], py - prev[1])
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Spec(m));
        if self.height == 0 || self.width == 0 || self.frames == 0 {
            return err(format!("empty canvas {}x{}x{}", self.height, self.width, self.frames));
        }
        if self.objects.is_empty() || self.objects.len() > self.max_objects {
            return err(format!(
                "object count {} outside 1..={}",
                self.objects.len(),
                self.max_objects
            ));
        }
        if self.objects.len() > 255 {
            return err("at most 255 objects fit an 8-bit label map".into());
        }
        if !(self.v_max > 0.0) {
            return err(format!("v_max must be positive, got {}", self.v_max));
        }
        let within = |v: [f64; 2]| v[0].abs() <= self.v_max && v[1].abs() <= self.v_max;
        if !within(self.background_motion) {
            return err("background motion exceeds v_max".into());
        }
        for (i, o) in self.objects.iter().enumerate() {
            if !within(o.velocity) {
                return err(format!("object {} velocity {:?} exceeds v_max {}", i + 1, o.velocity, self.v_max));
            }
            if !(o.size[0] > 0.0 && o.size[1] > 0.0) {
                return err(format!("object {} has non-positive size", i + 1));
            }
        }
        Ok(())
    }
}

/// Label of the topmost object per pixel for frame index `t`.
fn rasterize(spec: &SceneSpec, t: usize) -> (LabelMap, Vec<Option<usize>>) {
    let placed: Vec<Placed> = spec.objects.iter().enumerate().map(|(i, o)| Placed::new(o, i, t)).collect();
    let mut labels = LabelMap::new(spec.height, spec.width);
    let mut owner = vec![None; spec.height * spec.width];
    for y in 0..spec.height {
        for x in 0..spec.width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if let Some(p) = placed.iter().rev().find(|p| p.covers(px, py)) {
                labels.set(x, y, (p.index + 1) as u8);
                owner[y * spec.width + x] = Some(p.index);
            }
        }
    }
    (labels, owner)
}

/// Renders a full sequence. Deterministic in `spec`.
pub fn gen_sequence(spec: &SceneSpec) -> Result<VideoSample> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut frames = Vec::with_capacity(spec.frames);
    let mut masks = Vec::with_capacity(spec.frames);
    let mut flows = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let placed: Vec<Placed> = spec.objects.iter().enumerate().map(|(i, o)| Placed::new(o, i, t)).collect();
        let (labels, owner) = rasterize(spec, t);
        if t == 0 {
            for i in 0..spec.objects.len() {
                if !labels.data.contains(&((i + 1) as u8)) {
                    return Err(Error::Spec(format!("object {} is not visible in frame 1", i + 1)));
                }
            }
        }
        if !spec.occlusion_allowed {
            for y in 0..h {
                for x in 0..w {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    if placed.iter().filter(|p| p.covers(px, py)).count() > 1 {
                        return Err(Error::Spec(format!("objects overlap in frame {} but occlusion is off", t + 1)));
                    }
                }
            }
        }
        let mut img = Image::new(h, w);
        let mut flow = FlowField::zeros(h, w);
        let pan = spec.background_motion;
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let (rgb, d) = match owner[y * w + x] {
                    Some(i) => (placed[i].color(spec.seed, px, py), placed[i].flow(px, py)),
                    None => (
                        background_color(spec.background_seed, px - t as f64 * pan[0], py - t as f64 * pan[1]),
                        (pan[0], pan[1]),
                    ),
                };
                img.set_pixel(x, y, rgb.map(quantize));
                flow.set(x, y, (d.0 as f32, d.1 as f32));
            }
        }
        frames.push(img);
        masks.push(labels);
        flows.push(flow);
    }
    if flows.len() >= 2 {
        flows[0] = flows[1].clone();
    } else {
        flows[0] = FlowField::zeros(h, w);
    }
    let flow_images = flows.iter().map(|f| encode_flow(f, spec.v_max)).collect();
    Ok(VideoSample {
        height: h,
        width: w,
        frames,
        flows,
        flow_images,
        masks,
        object_ids: (1..=spec.objects.len() as u8).collect(),
        seed: spec.seed,
        v_max: spec.v_max,
    })
}

/// Distribution over random scenes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneSampler {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub objects: usize,
    pub max_objects: usize,
    pub v_max: f64,
    /// Integer speeds are drawn from `-max_speed..=max_speed` per axis.
    pub max_speed: i32,
    /// Object extent range in pixels.
    pub size_range: [f64; 2],
    /// Force the last object to pass over the first mid-sequence.
    pub occlusion: bool,
    pub stripe_prob: f64,
    /// Probability that an object reuses the previous object's colours.
    pub same_color_prob: f64,
    pub grain: f64,
}

impl Default for SceneSampler {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            frames: 8,
            objects: 2,
            max_objects: 3,
            v_max: 4.0,
            max_speed: 2,
            size_range: [14.0, 24.0],
            occlusion: false,
            stripe_prob: 0.5,
            same_color_prob: 0.25,
            grain: 0.04,
        }
    }
}

fn random_color(rng: &mut impl Rng) -> [f64; 3] {
    // Saturated colours: one channel high, one low, one free.
    let mut c = [rng.random_range(0.75..1.0), rng.random_range(0.0..0.2), rng.random_range(0.0..1.0)];
    for i in (1..3).rev() {
        c.swap(i, rng.random_range(0..=i));
    }
    c
}

impl SceneSampler {
    fn object(&self, rng: &mut ChaCha8Rng, prev: Option<&ObjectSpec>) -> ObjectSpec {
        let shape = match rng.random_range(0..3) {
            0 => ShapeKind::Rectangle,
            1 => ShapeKind::Ellipse,
            _ => ShapeKind::Triangle,
        };
        let [lo, hi] = self.size_range;
        let size = [rng.random_range(lo..=hi), rng.random_range(lo..=hi)].map(|s| (s * 2.0).round() / 2.0);
        let reuse = prev.filter(|_| rng.random_bool(self.same_color_prob));
        let (color, stripes) = match reuse {
            Some(p) => (p.color, p.stripes.clone()),
            None => {
                let color = random_color(rng);
                let stripes = rng.random_bool(self.stripe_prob).then(|| Stripes {
                    color: random_color(rng),
                    period: rng.random_range(3.0..6.0f64).round(),
                    angle: rng.random_range(0.0..std::f64::consts::PI),
                });
                (color, stripes)
            }
        };
        let speed = |rng: &mut ChaCha8Rng| rng.random_range(-self.max_speed..=self.max_speed) as f64;
        let velocity = [speed(rng), speed(rng)];
        // Keep the centre inside the canvas for the whole sequence.
        let span = (self.frames.saturating_sub(1)) as f64;
        let axis = |rng: &mut ChaCha8Rng, extent: usize, v: f64, half: f64| {
            let margin = (half * 0.5).max(2.0);
            let end_shift = v * span;
            let lo = margin - end_shift.min(0.0);
            let hi = extent as f64 - margin - end_shift.max(0.0);
            let p = if hi > lo { rng.random_range(lo..hi) } else { extent as f64 / 2.0 };
            (p * 4.0).round() / 4.0
        };
        let position = [
            axis(rng, self.width, velocity[0], size[0] / 2.0),
            axis(rng, self.height, velocity[1], size[1] / 2.0),
        ];
        ObjectSpec {
            shape,
            size,
            color,
            stripes,
            grain: self.grain,
            position,
            velocity,
            angle: 0.0,
            rotation: 0.0,
        }
    }

    /// Draws a valid scene; retries internally until rendering succeeds.
    pub fn sample(&self, seed: u64) -> Result<(SceneSpec, VideoSample)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..500 {
            let mut objects: Vec<ObjectSpec> = Vec::with_capacity(self.objects);
            for _ in 0..self.objects {
                let o = self.object(&mut rng, objects.last());
                objects.push(o);
            }
            if self.occlusion && objects.len() >= 2 {
                self.make_crossing(&mut rng, &mut objects);
            }
            let spec = SceneSpec {
                height: self.height,
                width: self.width,
                frames: self.frames,
                objects,
                max_objects: self.max_objects,
                background_seed: rng.random(),
                background_motion: [0.0, 0.0],
                occlusion_allowed: self.occlusion,
                seed: rng.random(),
                v_max: self.v_max,
            };
            let Ok(sample) = gen_sequence(&spec) else { continue };
            if self.acceptable(&sample) {
                return Ok((spec, sample));
            }
        }
        Err(Error::Spec(format!("no valid scene found for seed {seed}")))
    }

    /// Re-aims the top object so it crosses the first one mid-sequence.
    fn make_crossing(&self, rng: &mut ChaCha8Rng, objects: &mut [ObjectSpec]) {
        let mid = (self.frames / 2) as f64;
        let target = objects[0].clone();
        let top = objects.last_mut().expect("two objects");
        let meet = [
            target.position[0] + mid * target.velocity[0],
            target.position[1] + mid * target.velocity[1],
        ];
        let s = self.max_speed.max(1);
        let mut v = [0.0; 2];
        while v[0] == target.velocity[0] && v[1] == target.velocity[1] || v == [0.0, 0.0] {
            v = [rng.random_range(-s..=s) as f64, rng.random_range(-s..=s) as f64];
        }
        top.velocity = v;
        top.position = [
            ((meet[0] - mid * v[0]) * 4.0).round() / 4.0,
            ((meet[1] - mid * v[1]) * 4.0).round() / 4.0,
        ];
    }

    fn acceptable(&self, sample: &VideoSample) -> bool {
        let min_pixels = 12;
        let first = &sample.masks[0];
        let visible_first = sample
            .object_ids
            .iter()
            .all(|&id| first.data.iter().filter(|&&l| l == id).count() >= min_pixels);
        if !visible_first {
            return false;
        }
        if self.occlusion {
            // Require an actual occlusion event somewhere in the sequence.
            let full: usize = sample.masks[0].data.iter().filter(|&&l| l == 1).count();
            sample
                .masks
                .iter()
                .any(|m| (m.data.iter().filter(|&&l| l == 1).count() as f64) < 0.7 * full as f64)
        } else {
            true
        }
    }
}
