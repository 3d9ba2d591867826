//! Procedural paired-view dataset.
//!
//! A location is a top-down scene of axis-aligned buildings, straight roads
//! and a smooth background texture. Its reference view is the canonical
//! render; query views are affine resamplings of it with photometric shifts,
//! noise and optional corruptions.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{BggError, Result};
use crate::fanout;
use crate::tensor::Tensor;

pub const MIN_OVERLAP: f64 = 0.6;
pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Clone, Debug, PartialEq)]
pub struct Building {
    /// Corners in unit scene coordinates, `x0 < x1`, `y0 < y1`.
    pub rect: [f64; 4],
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Road {
    /// Endpoints in unit scene coordinates.
    pub from: [f64; 2],
    pub to: [f64; 2],
    pub width: f64,
    pub intensity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocationSpec {
    pub location_id: u32,
    pub seed: u64,
    pub buildings: Vec<Building>,
    pub roads: Vec<Road>,
    pub texture_seed: u64,
}

impl LocationSpec {
    /// Draws 2–5 buildings and 1–2 roads from the `(seed, id)` stream.
    pub fn sample(location_id: u32, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(location_id as u64 + 1);
        let n_buildings = rng.gen_range(2..=5);
        let buildings = (0..n_buildings)
            .map(|_| {
                let w = rng.gen_range(0.12..0.32);
                let h = rng.gen_range(0.12..0.32);
                let x0 = rng.gen_range(0.15..0.85 - w);
                let y0 = rng.gen_range(0.15..0.85 - h);
                Building {
                    rect: [x0, y0, x0 + w, y0 + h],
                    color: [rng.gen(), rng.gen(), rng.gen()],
                }
            })
            .collect();
        let n_roads = rng.gen_range(1..=2);
        let roads = (0..n_roads)
            .map(|_| {
                let a = rng.gen_range(0.0..PI);
                let c = [rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7)];
                let (dx, dy) = (a.cos(), a.sin());
                Road {
                    from: [c[0] - dx, c[1] - dy],
                    to: [c[0] + dx, c[1] + dy],
                    width: rng.gen_range(0.02..0.05),
                    intensity: rng.gen_range(0.15..0.35),
                }
            })
            .collect();
        Self {
            location_id,
            seed,
            buildings,
            roads,
            texture_seed: rng.gen(),
        }
    }
}

/// Smooth background: a base tint plus a few low-frequency waves.
fn background(texture_seed: u64) -> impl Fn(f64, f64, usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(texture_seed);
    let base = [
        rng.gen_range(0.25..0.45),
        rng.gen_range(0.35..0.55),
        rng.gen_range(0.2..0.4),
    ];
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            let a = rng.gen_range(0.0..2.0 * PI);
            let f = rng.gen_range(2.0..7.0);
            (
                f * a.cos(),
                f * a.sin(),
                rng.gen_range(0.0..2.0 * PI),
                rng.gen_range(0.03..0.08),
            )
        })
        .collect();
    move |x, y, c| {
        let mut v = base[c];
        for (i, &(kx, ky, ph, amp)) in waves.iter().enumerate() {
            let w = if i % 3 == c { 1.0 } else { 0.5 };
            v += w * amp * (2.0 * PI * (kx * x + ky * y) + ph).sin();
        }
        v
    }
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (vx, vy) = (b[0] - a[0], b[1] - a[1]);
    let (wx, wy) = (p[0] - a[0], p[1] - a[1]);
    let t = ((wx * vx + wy * vy) / (vx * vx + vy * vy)).clamp(0.0, 1.0);
    let (dx, dy) = (wx - t * vx, wy - t * vy);
    (dx * dx + dy * dy).sqrt()
}

/// Canonical `[3, size, size]` render with values in `[0, 1]`.
pub fn generate_location(spec: &LocationSpec, size: usize) -> Tensor {
    let bg = background(spec.texture_seed);
    let mut data = vec![0.0; 3 * size * size];
    for py in 0..size {
        for px in 0..size {
            let (x, y) = ((px as f64 + 0.5) / size as f64, (py as f64 + 0.5) / size as f64);
            let mut rgb = [bg(x, y, 0), bg(x, y, 1), bg(x, y, 2)];
            for r in &spec.roads {
                if segment_distance([x, y], r.from, r.to) <= r.width / 2.0 {
                    rgb = [r.intensity; 3];
                }
            }
            for b in &spec.buildings {
                let [x0, y0, x1, y1] = b.rect;
                if x >= x0 && x < x1 && y >= y0 && y < y1 {
                    rgb = b.color;
                }
            }
            for c in 0..3 {
                data[c * size * size + py * size + px] = rgb[c].clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new([3, size, size], data).expect("render is finite")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Corruption {
    #[default]
    None,
    Blur,
    Brightness,
    Occlusion,
}

impl Corruption {
    pub const ALL: [Corruption; 4] = [Self::None, Self::Blur, Self::Brightness, Self::Occlusion];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Blur => "blur",
            Self::Brightness => "brightness",
            Self::Occlusion => "occlusion",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| BggError::Config(format!("unknown corruption '{s}'")))
    }
}

/// Geometric and photometric change from the reference to a query view.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewTransform {
    pub rotation_deg: f64,
    /// Values above 1 zoom in.
    pub scale: f64,
    /// Pixel offset of the view centre.
    pub translation: [f64; 2],
    /// Per-channel multiplicative colour shift.
    pub gain: [f64; 3],
    pub noise_sigma: f64,
    pub noise_seed: u64,
    pub corruption: Corruption,
}

impl Default for ViewTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl ViewTransform {
    pub fn identity() -> Self {
        Self {
            rotation_deg: 0.0,
            scale: 1.0,
            translation: [0.0, 0.0],
            gain: [1.0; 3],
            noise_sigma: 0.0,
            noise_seed: 0,
            corruption: Corruption::None,
        }
    }

    /// Source coordinates (pixel units) sampled by output pixel `(px, py)`.
    fn source(&self, px: f64, py: f64, size: usize) -> (f64, f64) {
        let c = size as f64 / 2.0;
        let (dx, dy) = (px + 0.5 - c - self.translation[0], py + 0.5 - c - self.translation[1]);
        let th = self.rotation_deg.to_radians();
        let (s, co) = th.sin_cos();
        let (rx, ry) = (co * dx + s * dy, -s * dx + co * dy);
        (rx / self.scale + c - 0.5, ry / self.scale + c - 0.5)
    }

    /// Fraction of output pixels whose source lies inside the scene.
    pub fn overlap(&self, size: usize) -> f64 {
        let mut inside = 0usize;
        let hi = size as f64 - 1.0;
        for py in 0..size {
            for px in 0..size {
                let (sx, sy) = self.source(px as f64, py as f64, size);
                if (0.0..=hi).contains(&sx) && (0.0..=hi).contains(&sy) {
                    inside += 1;
                }
            }
        }
        inside as f64 / (size * size) as f64
    }

    pub fn validate(&self, size: usize) -> Result<()> {
        let bad = |m: String| Err(BggError::Config(m));
        if !(0.5..=1.5).contains(&self.scale) {
            return bad(format!("scale {} outside [0.5, 1.5]", self.scale));
        }
        if !(-180.0..=180.0).contains(&self.rotation_deg) {
            return bad(format!("rotation {} outside [-180, 180] degrees", self.rotation_deg));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise sigma {} must be non-negative", self.noise_sigma));
        }
        if self.gain.iter().any(|g| !(g.is_finite() && *g > 0.0)) {
            return bad(format!("colour gain {:?} must be positive", self.gain));
        }
        if self.translation.iter().any(|t| !t.is_finite()) {
            return bad(format!("translation {:?} is not finite", self.translation));
        }
        let ov = self.overlap(size);
        if ov < MIN_OVERLAP {
            return bad(format!("view keeps {ov:.3} of the scene, need at least {MIN_OVERLAP}"));
        }
        Ok(())
    }

    /// `key=value;...` encoding used in the manifest.
    pub fn encode(&self) -> String {
        format!(
            "rot={};scale={};tx={};ty={};gain={},{},{};sigma={};noise_seed={};corruption={}",
            self.rotation_deg,
            self.scale,
            self.translation[0],
            self.translation[1],
            self.gain[0],
            self.gain[1],
            self.gain[2],
            self.noise_sigma,
            self.noise_seed,
            self.corruption.as_str()
        )
    }

    pub fn decode(s: &str) -> Result<Self> {
        let bad = |d: String| BggError::format("view transform", d);
        let mut map = BTreeMap::new();
        for kv in s.split(';') {
            let (k, v) = kv.split_once('=').ok_or_else(|| bad(format!("field '{kv}'")))?;
            map.insert(k, v);
        }
        let num = |k: &str| -> Result<f64> {
            map.get(k)
                .ok_or_else(|| bad(format!("missing {k}")))?
                .parse::<f64>()
                .map_err(|e| bad(format!("{k}: {e}")))
        };
        let gain: Vec<f64> = map
            .get("gain")
            .ok_or_else(|| bad("missing gain".into()))?
            .split(',')
            .map(|g| g.parse::<f64>().map_err(|e| bad(format!("gain: {e}"))))
            .collect::<Result<_>>()?;
        if gain.len() != 3 {
            return Err(bad(format!("gain has {} components", gain.len())));
        }
        Ok(Self {
            rotation_deg: num("rot")?,
            scale: num("scale")?,
            translation: [num("tx")?, num("ty")?],
            gain: [gain[0], gain[1], gain[2]],
            noise_sigma: num("sigma")?,
            noise_seed: map
                .get("noise_seed")
                .ok_or_else(|| bad("missing noise_seed".into()))?
                .parse()
                .map_err(|e| bad(format!("noise_seed: {e}")))?,
            corruption: Corruption::parse(map.get("corruption").ok_or_else(|| bad("missing corruption".into()))?)?,
        })
    }
}

/// Bilinear sample of channel plane `plane` at `(x, y)`, edge-clamped.
fn bilinear(plane: &[f64], size: usize, x: f64, y: f64) -> f64 {
    let hi = (size - 1) as f64;
    let (x, y) = (x.clamp(0.0, hi), y.clamp(0.0, hi));
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(size - 1), (y0 + 1).min(size - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let at = |xx: usize, yy: usize| plane[yy * size + xx];
    (1.0 - fy) * ((1.0 - fx) * at(x0, y0) + fx * at(x1, y0)) + fy * ((1.0 - fx) * at(x0, y1) + fx * at(x1, y1))
}

/// Affine resample of `scene` under `t`, then gain, corruption and noise.
/// Pixels whose source falls outside the scene take the scene's mean colour.
pub fn render_query_view(scene: &Tensor, t: &ViewTransform) -> Result<Tensor> {
    let s = scene.shape();
    if s.len() != 3 || s[0] != 3 || s[1] != s[2] {
        return Err(BggError::dim(
            "render_query_view",
            format!("expected [3, n, n], got {s:?}"),
        ));
    }
    let size = s[1];
    t.validate(size)?;
    let plane = size * size;
    let src = scene.data();
    let fill: Vec<f64> = (0..3)
        .map(|c| src[c * plane..(c + 1) * plane].iter().sum::<f64>() / plane as f64)
        .collect();
    let hi = size as f64 - 1.0;
    let mut out = vec![0.0; 3 * plane];
    for py in 0..size {
        for px in 0..size {
            let (sx, sy) = t.source(px as f64, py as f64, size);
            let inside = (-0.5..=hi + 0.5).contains(&sx) && (-0.5..=hi + 0.5).contains(&sy);
            for c in 0..3 {
                out[c * plane + py * size + px] = if inside {
                    bilinear(&src[c * plane..(c + 1) * plane], size, sx, sy)
                } else {
                    fill[c]
                };
            }
        }
    }
    for c in 0..3 {
        for v in &mut out[c * plane..(c + 1) * plane] {
            *v *= t.gain[c];
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(t.noise_seed);
    match t.corruption {
        Corruption::None => {}
        Corruption::Blur => out = box_blur(&out, size),
        Corruption::Brightness => {
            let shift = if rng.gen::<bool>() { 0.25 } else { -0.25 };
            out.iter_mut().for_each(|v| *v += shift);
        }
        Corruption::Occlusion => {
            let side = size / 4;
            let ox = rng.gen_range(0..=size - side);
            let oy = rng.gen_range(0..=size - side);
            for c in 0..3 {
                for y in oy..oy + side {
                    for x in ox..ox + side {
                        out[c * plane + y * size + x] = 0.9;
                    }
                }
            }
        }
    }
    if t.noise_sigma > 0.0 {
        for v in &mut out {
            let n: f64 = StandardNormal.sample(&mut rng);
            *v += t.noise_sigma * n;
        }
    }
    out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Tensor::new([3, size, size], out)
}

fn box_blur(img: &[f64], size: usize) -> Vec<f64> {
    let plane = size * size;
    let mut out = vec![0.0; img.len()];
    for c in 0..3 {
        for y in 0..size {
            for x in 0..size {
                let (mut acc, mut n) = (0.0, 0.0);
                for yy in y.saturating_sub(1)..=(y + 1).min(size - 1) {
                    for xx in x.saturating_sub(1)..=(x + 1).min(size - 1) {
                        acc += img[c * plane + yy * size + xx];
                        n += 1.0;
                    }
                }
                out[c * plane + y * size + x] = acc / n;
            }
        }
    }
    out
}

/// Writes `[3, H, W]` values in `[0, 1]` as binary 8-bit PPM.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(BggError::dim("write_ppm", format!("expected [3, H, W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut buf = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for i in 0..h * w {
        for c in 0..3 {
            buf.push((d[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    fs::write(path, buf).map_err(|e| BggError::io(path, e))
}

/// Reads a binary 8-bit PPM into `[3, H, W]` scaled to `[0, 1]`.
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let buf = fs::read(path).map_err(|e| BggError::io(path, e))?;
    let bad = |d: &str| BggError::format("PPM image", format!("{}: {d}", path.display()));
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < buf.len() && buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < buf.len() && buf[pos] == b'#' {
            while pos < buf.len() && buf[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&buf[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    if fields[0] != "P6" {
        return Err(bad("not a binary P6 file"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if max != 255 || w == 0 || h == 0 {
        return Err(bad("only non-empty 8-bit images are supported"));
    }
    pos += 1;
    let pixels = buf
        .get(pos..pos + 3 * w * h)
        .ok_or_else(|| bad("truncated pixel data"))?;
    let mut data = vec![0.0; 3 * w * h];
    for i in 0..w * h {
        for c in 0..3 {
            data[c * h * w + i] = pixels[3 * i + c] as f64 / 255.0;
        }
    }
    Tensor::new([3, h, w], data)
}

/// Generation parameters; every field is echoed into the manifest header.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub locations: usize,
    pub queries: usize,
    /// Fraction of locations assigned to the training split.
    pub split_ratio: f64,
    pub seed: u64,
    pub image_size: usize,
    pub max_rotation: f64,
    pub min_scale: f64,
    pub max_scale: f64,
    /// Maximum centre offset as a fraction of the image side.
    pub max_shift: f64,
    /// Maximum deviation of each colour gain from 1.
    pub max_gain: f64,
    pub noise_sigma: f64,
    /// Probability that a query carries a corruption.
    pub corruption_rate: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            locations: 64,
            queries: 8,
            split_ratio: 0.75,
            seed: 7,
            image_size: 64,
            max_rotation: 180.0,
            min_scale: 0.8,
            max_scale: 1.25,
            max_shift: 0.08,
            max_gain: 0.3,
            noise_sigma: 0.03,
            corruption_rate: 0.25,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(BggError::Config(m));
        if self.locations < 2 {
            return bad(format!("need at least 2 locations, got {}", self.locations));
        }
        if self.queries == 0 || self.image_size < 8 {
            return bad("need at least one query and an image side of at least 8".into());
        }
        let train = self.train_locations();
        if train == 0 || train == self.locations {
            return bad(format!(
                "split ratio {} leaves one split empty for {} locations",
                self.split_ratio, self.locations
            ));
        }
        if !(0.0..=180.0).contains(&self.max_rotation) {
            return bad(format!("max rotation {} outside [0, 180]", self.max_rotation));
        }
        if !(0.5 <= self.min_scale && self.min_scale <= self.max_scale && self.max_scale <= 1.5) {
            return bad(format!(
                "scale range [{}, {}] outside [0.5, 1.5]",
                self.min_scale, self.max_scale
            ));
        }
        if !(0.0..1.0).contains(&self.max_gain) || !(0.0..=0.5).contains(&self.max_shift) {
            return bad("gain deviation must be in [0, 1) and shift in [0, 0.5]".into());
        }
        if !(0.0..=1.0).contains(&self.corruption_rate) || self.noise_sigma.is_nan() || self.noise_sigma < 0.0 {
            return bad("corruption rate must be in [0, 1] and noise non-negative".into());
        }
        Ok(())
    }

    pub fn train_locations(&self) -> usize {
        ((self.locations as f64) * self.split_ratio).round() as usize
    }

    /// `(key, value)` pairs in a fixed order.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("locations", self.locations.to_string()),
            ("queries", self.queries.to_string()),
            ("split_ratio", self.split_ratio.to_string()),
            ("seed", self.seed.to_string()),
            ("image_size", self.image_size.to_string()),
            ("max_rotation", self.max_rotation.to_string()),
            ("min_scale", self.min_scale.to_string()),
            ("max_scale", self.max_scale.to_string()),
            ("max_shift", self.max_shift.to_string()),
            ("max_gain", self.max_gain.to_string()),
            ("noise_sigma", self.noise_sigma.to_string()),
            ("corruption_rate", self.corruption_rate.to_string()),
        ]
    }

    /// Applies one `key = value` setting; unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || BggError::Config(format!("bad value '{value}' for data key '{key}'"));
        macro_rules! p {
            ($f:expr) => {
                $f = value.parse().map_err(|_| bad())?
            };
        }
        match key {
            "locations" => p!(self.locations),
            "queries" => p!(self.queries),
            "split_ratio" => p!(self.split_ratio),
            "seed" => p!(self.seed),
            "image_size" => p!(self.image_size),
            "max_rotation" => p!(self.max_rotation),
            "min_scale" => p!(self.min_scale),
            "max_scale" => p!(self.max_scale),
            "max_shift" => p!(self.max_shift),
            "max_gain" => p!(self.max_gain),
            "noise_sigma" => p!(self.noise_sigma),
            "corruption_rate" => p!(self.corruption_rate),
            _ => return Err(BggError::Config(format!("unknown data key '{key}'"))),
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.pairs() {
            h.update(format!("{k}={v}\n"));
        }
        hex::encode(h.finalize())
    }

    /// Draws a valid view transform; retries until the overlap bound holds.
    pub fn sample_transform<R: Rng + ?Sized>(&self, rng: &mut R) -> ViewTransform {
        let size = self.image_size;
        loop {
            let rot = if self.max_rotation > 0.0 {
                rng.gen_range(-self.max_rotation..=self.max_rotation)
            } else {
                0.0
            };
            let scale = rng.gen_range(self.min_scale..=self.max_scale);
            let shift = self.max_shift * size as f64;
            let mut off = || {
                if shift > 0.0 {
                    rng.gen_range(-shift..=shift)
                } else {
                    0.0
                }
            };
            let translation = [off(), off()];
            let g = self.max_gain;
            let mut gain = || if g > 0.0 { rng.gen_range(1.0 - g..=1.0 + g) } else { 1.0 };
            let gain = [gain(), gain(), gain()];
            let corruption = if rng.gen::<f64>() < self.corruption_rate {
                Corruption::ALL[rng.gen_range(1..4)]
            } else {
                Corruption::None
            };
            let t = ViewTransform {
                rotation_deg: rot,
                scale,
                translation,
                gain,
                noise_sigma: self.noise_sigma,
                noise_seed: rng.gen(),
                corruption,
            };
            if t.validate(size).is_ok() {
                return t;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(BggError::format("manifest", format!("unknown split '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub split: Split,
    pub location_id: u32,
    /// `None` for the reference view.
    pub query_index: Option<usize>,
    /// Relative to the dataset root.
    pub path: PathBuf,
    pub transform: Option<ViewTransform>,
}

/// One location's files, resolved against the dataset root.
#[derive(Clone, Debug, PartialEq)]
pub struct LocationRecord {
    pub location_id: u32,
    pub reference: PathBuf,
    pub queries: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub config: DataConfig,
    pub config_hash: String,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn image_size(&self) -> usize {
        self.config.image_size
    }

    /// Locations of `split` in ascending id order.
    pub fn locations(&self, split: Split) -> Vec<LocationRecord> {
        let mut by_id: BTreeMap<u32, LocationRecord> = BTreeMap::new();
        for e in self.entries.iter().filter(|e| e.split == split) {
            let rec = by_id.entry(e.location_id).or_insert_with(|| LocationRecord {
                location_id: e.location_id,
                reference: PathBuf::new(),
                queries: Vec::new(),
            });
            let p = self.root.join(&e.path);
            match e.query_index {
                None => rec.reference = p,
                Some(_) => rec.queries.push(p),
            }
        }
        by_id.into_values().collect()
    }

    /// Manifest text exactly as written to disk.
    pub fn render(&self) -> String {
        let mut s = String::from("# bgg dataset manifest v1\n");
        for (k, v) in self.config.pairs() {
            let _ = writeln!(s, "# {k}={v}");
        }
        let _ = writeln!(s, "# config_hash={}", self.config_hash);
        s.push_str("split\tloc_id\trole\tpath\ttransform\n");
        for e in &self.entries {
            let role = match e.query_index {
                None => "ref".to_string(),
                Some(i) => format!("q{i}"),
            };
            let t = e
                .transform
                .as_ref()
                .map_or_else(|| "-".to_string(), ViewTransform::encode);
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}",
                e.split.as_str(),
                e.location_id,
                role,
                e.path.display(),
                t
            );
        }
        s
    }

    /// SHA-256 of [`DatasetManifest::render`].
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.render().as_bytes()))
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| BggError::io(&path, e))?;
        Self::parse(root, &text)
    }

    pub fn parse(root: &Path, text: &str) -> Result<Self> {
        let bad = |d: String| BggError::format("manifest", d);
        let mut config = DataConfig::default();
        let mut config_hash = String::new();
        let mut entries = Vec::new();
        let mut seen_header = false;
        for (n, line) in text.lines().enumerate() {
            if let Some(rest) = line.strip_prefix('#') {
                if let Some((k, v)) = rest.trim().split_once('=') {
                    if k == "config_hash" {
                        config_hash = v.to_string();
                    } else {
                        config.set(k, v)?;
                    }
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            if !seen_header {
                seen_header = true;
                if line.starts_with("split\t") {
                    continue;
                }
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 5 {
                return Err(bad(format!("line {}: expected 5 columns, got {}", n + 1, cols.len())));
            }
            let query_index = match cols[2] {
                "ref" => None,
                q => Some(
                    q.strip_prefix('q')
                        .and_then(|i| i.parse().ok())
                        .ok_or_else(|| bad(format!("line {}: role '{q}'", n + 1)))?,
                ),
            };
            entries.push(ManifestEntry {
                split: Split::parse(cols[0])?,
                location_id: cols[1]
                    .parse()
                    .map_err(|_| bad(format!("line {}: location id '{}'", n + 1, cols[1])))?,
                query_index,
                path: PathBuf::from(cols[3]),
                transform: if cols[4] == "-" {
                    None
                } else {
                    Some(ViewTransform::decode(cols[4])?)
                },
            });
        }
        if config.hash() != config_hash {
            return Err(bad("config hash does not match header values".into()));
        }
        Ok(Self {
            root: root.to_path_buf(),
            config,
            config_hash,
            entries,
        })
    }

    /// Loads every image of `split`: `(location_id, reference, queries)`.
    pub fn load_split(&self, split: Split) -> Result<Vec<LoadedLocation>> {
        let recs = self.locations(split);
        fanout::pool().install(|| {
            recs.par_iter()
                .map(|r| {
                    Ok(LoadedLocation {
                        location_id: r.location_id,
                        reference: read_ppm(&r.reference)?,
                        queries: r.queries.iter().map(|q| read_ppm(q)).collect::<Result<_>>()?,
                    })
                })
                .collect()
        })
    }
}

#[derive(Clone, Debug)]
pub struct LoadedLocation {
    pub location_id: u32,
    pub reference: Tensor,
    pub queries: Vec<Tensor>,
}

/// Renders one location and its query views in memory.
pub fn render_location(config: &DataConfig, location_id: u32) -> (Tensor, Vec<(ViewTransform, Tensor)>) {
    let spec = LocationSpec::sample(location_id, config.seed);
    let scene = generate_location(&spec, config.image_size);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x005e_ed0f_u64.rotate_left(17));
    rng.set_stream(location_id as u64 + 1);
    let queries = (0..config.queries)
        .map(|_| {
            let t = config.sample_transform(&mut rng);
            let q = render_query_view(&scene, &t).expect("sampled transforms are valid");
            (t, q)
        })
        .collect();
    (scene, queries)
}

/// Renders all locations and writes images plus `manifest.tsv` under `root`.
pub fn build_dataset(root: &Path, config: &DataConfig) -> Result<DatasetManifest> {
    config.validate()?;
    let n_train = config.train_locations();
    let ids: Vec<u32> = (0..config.locations as u32).collect();
    let rendered: Vec<Vec<ManifestEntry>> = fanout::pool().install(|| {
        ids.par_iter()
            .map(|&id| -> Result<Vec<ManifestEntry>> {
                let split = if (id as usize) < n_train {
                    Split::Train
                } else {
                    Split::Test
                };
                let rel_dir = PathBuf::from(split.as_str()).join(format!("loc_{id:04}"));
                let dir = root.join(&rel_dir);
                fs::create_dir_all(&dir).map_err(|e| BggError::io(&dir, e))?;
                let (scene, queries) = render_location(config, id);
                let mut out = Vec::with_capacity(queries.len() + 1);
                let rel = rel_dir.join("ref.ppm");
                write_ppm(&root.join(&rel), &scene)?;
                out.push(ManifestEntry {
                    split,
                    location_id: id,
                    query_index: None,
                    path: rel,
                    transform: None,
                });
                for (i, (t, q)) in queries.into_iter().enumerate() {
                    let rel = rel_dir.join(format!("q_{i:02}.ppm"));
                    write_ppm(&root.join(&rel), &q)?;
                    out.push(ManifestEntry {
                        split,
                        location_id: id,
                        query_index: Some(i),
                        path: rel,
                        transform: Some(t),
                    });
                }
                Ok(out)
            })
            .collect::<Result<_>>()
    })?;
    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        config: config.clone(),
        config_hash: config.hash(),
        entries: rendered.into_iter().flatten().collect(),
    };
    let path = root.join(MANIFEST_FILE);
    fs::write(&path, manifest.render()).map_err(|e| BggError::io(&path, e))?;
    Ok(manifest)
}
