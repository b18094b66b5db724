//! Multi-scale oriented-grating textures.
//!
//! Every image is a mid-grey field plus one texture per spatial scale
//! (fine, medium, coarse) and smoothed Gaussian noise. A class pins the
//! texture at its own scale; the gratings at the other scales get a random
//! orientation per image. Two classes that share a scale can therefore only
//! be told apart by looking at that scale.
//!
//! The class texture is a single oriented grating, a plaid (the grating plus
//! its 90° rotation, each at `1/√2` amplitude) or a patchwork of square cells
//! each holding one of those two gratings at full amplitude. Plaid and
//! patchwork have the same expected power spectrum; they differ in how the
//! two orientations are distributed over space, which only shows up in
//! descriptors no larger than one cell.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::{Dataset, LabeledImage};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scale {
    Fine,
    Medium,
    Coarse,
}

impl Scale {
    pub const ALL: [Scale; 3] = [Scale::Fine, Scale::Medium, Scale::Coarse];

    /// Grating period in pixels.
    pub fn period(self) -> f64 {
        match self {
            Scale::Fine => 4.0,
            Scale::Medium => 8.0,
            Scale::Coarse => 16.0,
        }
    }

    /// Cycles per image for a square image of side `size`.
    pub fn frequency(self, size: usize) -> f64 {
        size as f64 / self.period()
    }

    pub fn parse(text: &str) -> Option<Scale> {
        match text.trim().to_ascii_lowercase().as_str() {
            "fine" => Some(Scale::Fine),
            "medium" => Some(Scale::Medium),
            "coarse" => Some(Scale::Coarse),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scale::Fine => "fine",
            Scale::Medium => "medium",
            Scale::Coarse => "coarse",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    Single,
    Plaid,
    /// Square cells of this side in pixels, each picking one orientation.
    Patchwork { cell: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassSpec {
    /// Scale at which this class is discriminative.
    pub scale: Scale,
    /// Dominant frequency in cycles per image.
    pub frequency: f64,
    pub orientation_deg: f64,
    pub amplitude: f64,
    pub layout: Layout,
}

impl ClassSpec {
    pub fn at_scale(scale: Scale, orientation_deg: f64, image_size: usize) -> Self {
        ClassSpec {
            scale,
            frequency: scale.frequency(image_size),
            orientation_deg,
            amplitude: 0.2,
            layout: Layout::Single,
        }
    }

    pub fn with_layout(mut self, layout: Layout) -> Self {
        self.layout = layout;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub classes: Vec<ClassSpec>,
    pub image_size: usize,
    /// Standard deviation of the smoothed noise field.
    pub noise: f64,
    /// Amplitude of the randomly oriented gratings at non-discriminative scales.
    pub nuisance_amplitude: f64,
    /// Per-image orientation jitter of the class grating, uniform in ±this.
    pub orientation_jitter_deg: f64,
    /// Patches sharing one image-of-origin id.
    pub patches_per_group: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Four classes: a fine patchwork and a fine plaid, told apart only by
    /// how the fine orientations are laid out, and two coarse gratings at 0°
    /// and 90°.
    pub fn default_with_seed(seed: u64) -> Self {
        let size = 32;
        SyntheticSpec {
            classes: vec![
                ClassSpec::at_scale(Scale::Fine, 0.0, size)
                    .with_layout(Layout::Patchwork { cell: 8 }),
                ClassSpec::at_scale(Scale::Fine, 0.0, size).with_layout(Layout::Plaid),
                ClassSpec::at_scale(Scale::Coarse, 0.0, size),
                ClassSpec::at_scale(Scale::Coarse, 90.0, size),
            ],
            image_size: size,
            noise: 0.1,
            nuisance_amplitude: 0.15,
            orientation_jitter_deg: 10.0,
            patches_per_group: 4,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::invalid("synthetic spec needs at least 2 classes"));
        }
        if self.image_size < 4 {
            return Err(Error::invalid("image size must be at least 4"));
        }
        if self.patches_per_group == 0 {
            return Err(Error::invalid("patches per group must be >= 1"));
        }
        if self.noise < 0.0 || self.nuisance_amplitude < 0.0 {
            return Err(Error::invalid("noise and nuisance amplitude must be >= 0"));
        }
        for (i, c) in self.classes.iter().enumerate() {
            let nyquist = self.image_size as f64 / 2.0;
            if !(c.frequency > 0.0 && c.frequency <= nyquist) {
                return Err(Error::invalid(format!(
                    "class {i} frequency {} outside (0, {nyquist}]",
                    c.frequency
                )));
            }
            if c.layout == (Layout::Patchwork { cell: 0 }) {
                return Err(Error::invalid(format!("class {i} patchwork cell must be >= 1")));
            }
        }
        if self.classes.len() >= 3 {
            let has = |s| self.classes.iter().any(|c| c.scale == s);
            if !has(Scale::Fine) || !has(Scale::Coarse) {
                return Err(Error::invalid(
                    "with 3 or more classes both the fine and the coarse scale need a class",
                ));
            }
        }
        Ok(())
    }
}

impl Layout {
    /// `single`, `plaid` or `patchwork:<cell>`.
    pub fn parse(text: &str) -> Option<Layout> {
        let t = text.trim().to_ascii_lowercase();
        match t.as_str() {
            "single" => Some(Layout::Single),
            "plaid" => Some(Layout::Plaid),
            _ => {
                let cell = t.strip_prefix("patchwork:")?.parse().ok()?;
                Some(Layout::Patchwork { cell })
            }
        }
    }

    pub fn name(self) -> String {
        match self {
            Layout::Single => "single".into(),
            Layout::Plaid => "plaid".into(),
            Layout::Patchwork { cell } => format!("patchwork:{cell}"),
        }
    }
}

impl SyntheticSpec {
    /// Flat `key=value` lines. Classes are written as
    /// `class=<scale>,<orientation°>,<layout>,<amplitude>` in label order.
    pub fn to_kv(&self) -> String {
        let mut s = format!(
            "image_size={}\nnoise={}\nnuisance_amplitude={}\norientation_jitter_deg={}\npatches_per_group={}\nseed={}\n",
            self.image_size,
            self.noise,
            self.nuisance_amplitude,
            self.orientation_jitter_deg,
            self.patches_per_group,
            self.seed
        );
        for c in &self.classes {
            s.push_str(&format!(
                "class={},{},{},{}\n",
                c.scale.name(),
                c.orientation_deg,
                c.layout.name(),
                c.amplitude
            ));
        }
        s
    }

    /// Reads `key=value` lines over the default spec. Any `class` line
    /// replaces the default class list; the lines are taken in label order.
    /// Class frequencies follow from their scale and the final image size.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut spec = SyntheticSpec::default();
        let mut classes: Vec<(Scale, f64, Layout, f64)> = Vec::new();
        for (key, value, line) in crate::optim::parse_kv(text)? {
            let bad = |reason: String| crate::error::FormatError::Config { line, reason };
            fn num<T: std::str::FromStr>(v: &str) -> Option<T> {
                v.trim().parse().ok()
            }
            let need = |v: Option<f64>| v.ok_or_else(|| bad(format!("bad value {value:?} for {key}")));
            match key.as_str() {
                "image_size" => spec.image_size = num(&value).ok_or_else(|| bad(format!("bad image_size {value:?}")))?,
                "noise" => spec.noise = need(num(&value))?,
                "nuisance_amplitude" => spec.nuisance_amplitude = need(num(&value))?,
                "orientation_jitter_deg" => spec.orientation_jitter_deg = need(num(&value))?,
                "patches_per_group" => {
                    spec.patches_per_group = num(&value).ok_or_else(|| bad(format!("bad patches_per_group {value:?}")))?
                }
                "seed" => spec.seed = num(&value).ok_or_else(|| bad(format!("bad seed {value:?}")))?,
                "class" => {
                    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                    if !(2..=4).contains(&parts.len()) {
                        return Err(bad("class needs scale,orientation[,layout[,amplitude]]".into()).into());
                    }
                    let scale = Scale::parse(parts[0]).ok_or_else(|| bad(format!("unknown scale {:?}", parts[0])))?;
                    let orient = num(parts[1]).ok_or_else(|| bad(format!("bad orientation {:?}", parts[1])))?;
                    let layout = match parts.get(2) {
                        Some(t) => Layout::parse(t).ok_or_else(|| bad(format!("unknown layout {t:?}")))?,
                        None => Layout::Single,
                    };
                    let amp = match parts.get(3) {
                        Some(t) => num(t).ok_or_else(|| bad(format!("bad amplitude {t:?}")))?,
                        None => 0.2,
                    };
                    classes.push((scale, orient, layout, amp));
                }
                other => return Err(bad(format!("unknown key {other:?}")).into()),
            }
        }
        if !classes.is_empty() {
            spec.classes = classes
                .into_iter()
                .map(|(scale, orient, layout, amp)| ClassSpec {
                    amplitude: amp,
                    ..ClassSpec::at_scale(scale, orient, spec.image_size).with_layout(layout)
                })
                .collect();
        } else {
            for c in &mut spec.classes {
                c.frequency = c.scale.frequency(spec.image_size);
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self::default_with_seed(0)
    }
}

fn add_grating(img: &mut [f64], size: usize, freq: f64, theta: f64, phase: f64, amp: f64) {
    let (c, s) = (theta.cos(), theta.sin());
    let k = 2.0 * PI * freq / size as f64;
    for y in 0..size {
        for x in 0..size {
            img[y * size + x] += amp * (k * (x as f64 * c + y as f64 * s) + phase).cos();
        }
    }
}

/// White Gaussian noise through a separable [1 2 1]/4 blur (wrap-around),
/// rescaled to standard deviation `sigma`.
fn add_noise<R: Rng>(img: &mut [f64], size: usize, sigma: f64, rng: &mut R) {
    if sigma == 0.0 {
        return;
    }
    let white: Vec<f64> = (0..size * size).map(|_| rng.sample(StandardNormal)).collect();
    let mut tmp = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let l = white[y * size + (x + size - 1) % size];
            let r = white[y * size + (x + 1) % size];
            tmp[y * size + x] = 0.25 * l + 0.5 * white[y * size + x] + 0.25 * r;
        }
    }
    // Unit white noise through the 3x3 binomial kernel has std 6/16.
    let gain = sigma / 0.375;
    for y in 0..size {
        for x in 0..size {
            let u = tmp[((y + size - 1) % size) * size + x];
            let d = tmp[((y + 1) % size) * size + x];
            img[y * size + x] += gain * (0.25 * u + 0.5 * tmp[y * size + x] + 0.25 * d);
        }
    }
}

fn render(spec: &ClassSpec, all: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let size = all.image_size;
    let mut img = vec![0.5; size * size];
    let jitter = if all.orientation_jitter_deg > 0.0 {
        rng.random_range(-all.orientation_jitter_deg..=all.orientation_jitter_deg)
    } else {
        0.0
    };
    let theta = (spec.orientation_deg + jitter).to_radians();
    let phase = rng.random_range(0.0..2.0 * PI);
    match spec.layout {
        Layout::Single => add_grating(&mut img, size, spec.frequency, theta, phase, spec.amplitude),
        Layout::Plaid => {
            let amp = spec.amplitude * std::f64::consts::FRAC_1_SQRT_2;
            let phase2 = rng.random_range(0.0..2.0 * PI);
            add_grating(&mut img, size, spec.frequency, theta, phase, amp);
            add_grating(&mut img, size, spec.frequency, theta + PI / 2.0, phase2, amp);
        }
        Layout::Patchwork { cell } => {
            let phase2 = rng.random_range(0.0..2.0 * PI);
            let mut a = vec![0.0; size * size];
            let mut b = vec![0.0; size * size];
            add_grating(&mut a, size, spec.frequency, theta, phase, spec.amplitude);
            add_grating(&mut b, size, spec.frequency, theta + PI / 2.0, phase2, spec.amplitude);
            // The cell grid is shifted by a random offset per image.
            let (ox, oy) = (rng.random_range(0..cell), rng.random_range(0..cell));
            let cells = (size + cell).div_ceil(cell);
            let pick: Vec<bool> = (0..cells * cells).map(|_| rng.random()).collect();
            for y in 0..size {
                for x in 0..size {
                    let idx = ((y + oy) / cell) * cells + (x + ox) / cell;
                    let src = if pick[idx] { &a } else { &b };
                    img[y * size + x] += src[y * size + x];
                }
            }
        }
    }
    for scale in Scale::ALL {
        if scale == spec.scale {
            continue;
        }
        let theta = rng.random_range(0.0..PI);
        let phase = rng.random_range(0.0..2.0 * PI);
        add_grating(&mut img, size, scale.frequency(size), theta, phase, all.nuisance_amplitude);
    }
    add_noise(&mut img, size, all.noise, rng);
    for v in &mut img {
        *v = v.clamp(0.0, 1.0);
    }
    img
}

/// `n_per_class` patches per class, class-major order. Image `j` of class
/// `c` belongs to group `c·⌈n/p⌉ + j/p` with `p` patches per group. Each
/// image draws from its own RNG stream, so the result does not depend on
/// how generation is scheduled.
pub fn generate(spec: &SyntheticSpec, n_per_class: usize) -> Result<Dataset> {
    spec.validate()?;
    let groups_per_class = n_per_class.div_ceil(spec.patches_per_group) as u64;
    let total = spec.classes.len() * n_per_class;
    let images = (0..total)
        .into_par_iter()
        .map(|idx| {
            let class = idx / n_per_class;
            let j = idx % n_per_class;
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(idx as u64 + 1);
            let pixels = render(&spec.classes[class], spec, &mut rng);
            let group = class as u64 * groups_per_class + (j / spec.patches_per_group) as u64;
            LabeledImage::new(spec.image_size, pixels, class, group)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(spec.classes.len(), spec.image_size, images)
}
