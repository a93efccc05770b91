//! Synthetic degradations, procedural images, cropping and PNG I/O.
//!
//! Images are `[1, 3, H, W]` tensors in `[0, 1]`.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Degradation family. Diagnostic only; never an input to the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Noise,
    Rain,
    Haze,
    Blur,
    Lowlight,
}

impl Task {
    pub const ALL: [Task; 5] = [Task::Noise, Task::Rain, Task::Haze, Task::Blur, Task::Lowlight];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Noise => "noise",
            Task::Rain => "rain",
            Task::Haze => "haze",
            Task::Blur => "blur",
            Task::Lowlight => "lowlight",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair<T> {
    pub clean: Tensor<T>,
    pub degraded: Tensor<T>,
    pub task: Task,
}

fn check_image<T: Scalar>(img: &Tensor<T>) -> Result<(usize, usize)> {
    let (b, c, h, w) = img.dims4()?;
    if b != 1 || c != 3 {
        return Err(invalid!("expected a [1, 3, H, W] image, got {:?}", img.shape()));
    }
    Ok((h, w))
}

fn clamp01<T: Scalar>(v: f64) -> T {
    T::of(v.clamp(0.0, 1.0))
}

/// Standard normal draw keyed by `(seed, channel, y, x)`, so any window of
/// a larger image sees the same noise as the full image at those
/// coordinates.
pub fn noise_at(seed: u64, c: usize, y: usize, x: usize) -> f64 {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(c as u64).to_le_bytes());
    key[16..24].copy_from_slice(&(y as u64).to_le_bytes());
    key[24..].copy_from_slice(&(x as u64).to_le_bytes());
    StandardNormal.sample(&mut ChaCha8Rng::from_seed(key))
}

/// Pre-clamp noise field `n ~ N(0, (σ/255)²)` for an image whose top-left
/// pixel sits at `origin` in absolute coordinates.
pub fn gaussian_noise_field<T: Scalar>(shape: &[usize], sigma: f64, seed: u64, origin: (usize, usize)) -> Result<Tensor<T>> {
    if !(sigma >= 0.0) {
        return Err(invalid!("noise sigma must be ≥ 0, got {sigma}"));
    }
    let [_, c, h, w] = shape else {
        return Err(invalid!("noise field needs a rank-4 shape, got {shape:?}"));
    };
    let (c, h, w) = (*c, *h, *w);
    let s = sigma / 255.0;
    Ok(Tensor::from_fn(shape, |i| {
        let (ci, y, x) = ((i / (h * w)) % c, (i / w) % h, i % w);
        T::of(s * noise_at(seed, ci, origin.0 + y, origin.1 + x))
    }))
}

/// `clamp(clean + n)` with `σ` on the 0–255 scale.
pub fn add_gaussian_noise<T: Scalar>(clean: &Tensor<T>, sigma: f64, seed: u64) -> Result<Tensor<T>> {
    add_gaussian_noise_at(clean, sigma, seed, (0, 0))
}

/// Noise for a window of a larger image whose top-left corner is `origin`.
pub fn add_gaussian_noise_at<T: Scalar>(clean: &Tensor<T>, sigma: f64, seed: u64, origin: (usize, usize)) -> Result<Tensor<T>> {
    check_image(clean)?;
    if sigma == 0.0 {
        return Ok(clean.clone());
    }
    let n = gaussian_noise_field::<T>(clean.shape(), sigma, seed, origin)?;
    clean.zip_map(&n, |a, b| clamp01(a.as_f64() + b.as_f64()))
}

/// Atmospheric scattering `clean·t + A·(1 − t)`.
pub fn synth_haze<T: Scalar>(clean: &Tensor<T>, t: f64, airlight: f64) -> Result<Tensor<T>> {
    check_image(clean)?;
    if !(t > 0.0 && t <= 1.0) {
        return Err(invalid!("transmission must be in (0, 1], got {t}"));
    }
    if !(0.0..=1.0).contains(&airlight) {
        return Err(invalid!("airlight must be in [0, 1], got {airlight}"));
    }
    Ok(clean.map(|v| clamp01(v.as_f64() * t + airlight * (1.0 - t))))
}

/// Adds `streaks` bright line segments at `angle_deg` from vertical.
pub fn synth_rain<T: Scalar>(clean: &Tensor<T>, streaks: usize, angle_deg: f64, intensity: f64, seed: u64) -> Result<Tensor<T>> {
    let (h, w) = check_image(clean)?;
    if !(0.0..=1.0).contains(&intensity) {
        return Err(invalid!("rain intensity must be in [0, 1], got {intensity}"));
    }
    if streaks == 0 || intensity == 0.0 {
        return Ok(clean.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (dy, dx) = (angle_deg.to_radians().cos(), angle_deg.to_radians().sin());
    let mut mask = vec![false; h * w];
    let max_len = (h.max(w) as f64 / 2.0).max(2.0);
    for _ in 0..streaks {
        let y0 = rng.gen_range(0.0..h as f64);
        let x0 = rng.gen_range(0.0..w as f64);
        let len = rng.gen_range(1.0..max_len);
        let steps = (2.0 * len).ceil() as usize;
        for s in 0..=steps {
            let d = s as f64 * 0.5;
            let (y, x) = ((y0 + d * dy).floor(), (x0 + d * dx).floor());
            if y >= 0.0 && x >= 0.0 && (y as usize) < h && (x as usize) < w {
                mask[y as usize * w + x as usize] = true;
            }
        }
    }
    Ok(Tensor::from_fn(clean.shape(), |i| {
        let v = clean.data()[i].as_f64();
        clamp01(if mask[i % (h * w)] { v + intensity } else { v })
    }))
}

/// Normalized 1-D Gaussian taps with radius `ceil(3σ)`; `[1]` for `σ = 0`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(invalid!("blur sigma must be finite and ≥ 0, got {sigma}"));
    }
    if sigma == 0.0 {
        return Ok(vec![1.0]);
    }
    let r = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let z: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / z).collect())
}

/// Separable Gaussian blur with clamp-to-edge borders. The blur is
/// deterministic, so `seed` has no effect.
pub fn synth_blur<T: Scalar>(clean: &Tensor<T>, kernel_sigma: f64, _seed: u64) -> Result<Tensor<T>> {
    let (h, w) = check_image(clean)?;
    let taps = gaussian_kernel(kernel_sigma)?;
    let r = (taps.len() / 2) as isize;
    let at = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut out = Tensor::zeros(clean.shape());
    let src: Vec<f64> = clean.data().iter().map(|v| v.as_f64()).collect();
    for c in 0..3 {
        let plane = &src[c * h * w..(c + 1) * h * w];
        let mut rows = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                rows[y * w + x] = taps
                    .iter()
                    .enumerate()
                    .map(|(i, t)| t * plane[y * w + at(x as isize + i as isize - r, w)])
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                let v: f64 = taps
                    .iter()
                    .enumerate()
                    .map(|(i, t)| t * rows[at(y as isize + i as isize - r, h) * w + x])
                    .sum();
                out.data_mut()[(c * h + y) * w + x] = clamp01(v);
            }
        }
    }
    Ok(out)
}

/// `scale · clean^gamma`.
pub fn synth_lowlight<T: Scalar>(clean: &Tensor<T>, gamma: f64, scale: f64) -> Result<Tensor<T>> {
    check_image(clean)?;
    if !(gamma >= 1.0) {
        return Err(invalid!("low-light gamma must be ≥ 1, got {gamma}"));
    }
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(invalid!("low-light scale must be in (0, 1], got {scale}"));
    }
    Ok(clean.map(|v| clamp01(scale * v.as_f64().powf(gamma))))
}

/// Crop window and flips applied to both members of a pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropFlip {
    pub y: usize,
    pub x: usize,
    pub size: usize,
    pub hflip: bool,
    pub vflip: bool,
}

impl CropFlip {
    pub fn sample(h: usize, w: usize, size: usize, flip: bool, rng: &mut impl Rng) -> Result<Self> {
        if size == 0 || size > h || size > w {
            return Err(invalid!("crop {size} does not fit a {h}×{w} image"));
        }
        Ok(Self {
            y: rng.gen_range(0..=h - size),
            x: rng.gen_range(0..=w - size),
            size,
            hflip: flip && rng.gen_bool(0.5),
            vflip: flip && rng.gen_bool(0.5),
        })
    }

    pub fn apply<T: Scalar>(&self, img: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, c, h, w) = img.dims4()?;
        let s = self.size;
        if self.y + s > h || self.x + s > w {
            return Err(invalid!("crop window exceeds {h}×{w}"));
        }
        Ok(Tensor::from_fn(&[b, c, s, s], |i| {
            let (bc, y, x) = (i / (s * s), (i / s) % s, i % s);
            let sy = if self.vflip { s - 1 - y } else { y };
            let sx = if self.hflip { s - 1 - x } else { x };
            img.data()[(bc * h + self.y + sy) * w + self.x + sx]
        }))
    }
}

/// Same crop and flips on clean and degraded, drawn from `seed`.
pub fn random_crop_flip<T: Scalar>(pair: &ImagePair<T>, crop: usize, flip: bool, seed: u64) -> Result<ImagePair<T>> {
    let (h, w) = check_image(&pair.clean)?;
    if pair.degraded.shape() != pair.clean.shape() {
        return Err(invalid!("pair members differ in shape"));
    }
    let cf = CropFlip::sample(h, w, crop, flip, &mut ChaCha8Rng::seed_from_u64(seed))?;
    Ok(ImagePair {
        clean: cf.apply(&pair.clean)?,
        degraded: cf.apply(&pair.degraded)?,
        task: pair.task,
    })
}

/// Reads an 8-bit PNG as `[1, 3, H, W]`; grayscale is replicated and alpha
/// dropped.
pub fn load_image<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let img = image::open(path.as_ref())?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    Ok(Tensor::from_fn(&[1, 3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        T::of(raw[p * 3 + c] as f64 / 255.0)
    }))
}

/// Writes `[1, 3, H, W]` (clamped to `[0, 1]`) as an 8-bit RGB PNG.
pub fn save_image<T: Scalar>(img: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let (h, w) = check_image(img)?;
    let mut raw = vec![0u8; h * w * 3];
    for c in 0..3 {
        for p in 0..h * w {
            let v = img.data()[c * h * w + p].as_f64().clamp(0.0, 1.0);
            raw[p * 3 + c] = (v * 255.0).round() as u8;
        }
    }
    image::save_buffer(path.as_ref(), &raw, w as u32, h as u32, image::ColorType::Rgb8)?;
    Ok(())
}

/// Procedural base images.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    Checker,
    Gradient,
    FilteredNoise,
    Shapes,
}

impl Pattern {
    pub const ALL: [Pattern; 4] = [Pattern::Checker, Pattern::Gradient, Pattern::FilteredNoise, Pattern::Shapes];
}

fn color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)]
}

/// Deterministic `size×size` image of the given pattern.
pub fn procedural_image<T: Scalar>(pattern: Pattern, size: usize, seed: u64) -> Result<Tensor<T>> {
    if size == 0 {
        return Err(invalid!("procedural image size must be ≥ 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = size * size;
    let mut px = vec![[0.0f64; 3]; n];
    match pattern {
        Pattern::Checker => {
            let cell = rng.gen_range(2..=(size / 2).max(2));
            let (a, b) = (color(&mut rng), color(&mut rng));
            for (i, p) in px.iter_mut().enumerate() {
                let (y, x) = (i / size, i % size);
                *p = if (y / cell + x / cell) % 2 == 0 { a } else { b };
            }
        }
        Pattern::Gradient => {
            let (a, b) = (color(&mut rng), color(&mut rng));
            let th: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let (cy, cx) = (th.sin(), th.cos());
            let span = (cy.abs() + cx.abs()) * size as f64;
            for (i, p) in px.iter_mut().enumerate() {
                let (y, x) = ((i / size) as f64, (i % size) as f64);
                let proj = y * cy + x * cx;
                let lo = cy.min(0.0) * size as f64 + cx.min(0.0) * size as f64;
                let t = ((proj - lo) / span).clamp(0.0, 1.0);
                *p = [0, 1, 2].map(|c| a[c] * (1.0 - t) + b[c] * t);
            }
        }
        Pattern::FilteredNoise => {
            let raw = Tensor::<f64>::from_fn(&[1, 3, size, size], |_| rng.gen_range(0.0..1.0));
            let smooth = synth_blur(&raw, 1.5, 0)?;
            for c in 0..3 {
                let plane = &smooth.data()[c * n..(c + 1) * n];
                let (lo, hi) = plane.iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
                for (i, p) in px.iter_mut().enumerate() {
                    p[c] = 0.1 + 0.8 * (plane[i] - lo) / (hi - lo).max(1e-12);
                }
            }
        }
        Pattern::Shapes => {
            let bg = color(&mut rng);
            px.iter_mut().for_each(|p| *p = bg);
            for _ in 0..rng.gen_range(2..=5) {
                let fg = color(&mut rng);
                let (cy, cx) = (rng.gen_range(0.0..size as f64), rng.gen_range(0.0..size as f64));
                let r = rng.gen_range(size as f64 / 8.0..=size as f64 / 3.0);
                let disc = rng.gen_bool(0.5);
                for (i, p) in px.iter_mut().enumerate() {
                    let (dy, dx) = ((i / size) as f64 - cy, (i % size) as f64 - cx);
                    let inside = if disc { dy * dy + dx * dx <= r * r } else { dy.abs() <= r && dx.abs() <= r };
                    if inside {
                        *p = fg;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_fn(&[1, 3, size, size], |i| T::of(px[i % n][i / n])))
}

/// Closed interval for sampled degradation parameters.
pub type Range = [f64; 2];

fn draw(rng: &mut ChaCha8Rng, r: Range) -> f64 {
    if r[0] >= r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..=r[1])
    }
}

/// Sample stream description: base images, tasks, degradation parameters,
/// crop and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    /// Optional directory of PNGs added to the base pool.
    pub dir: Option<PathBuf>,
    /// Number of procedural base images.
    pub procedural: usize,
    /// Generators cycled through for the procedural images.
    pub patterns: Vec<Pattern>,
    /// Side of the procedural base images.
    pub image_size: usize,
    pub crop: usize,
    pub flip: bool,
    pub tasks: Vec<Task>,
    /// Noise σ values on the 0–255 scale.
    pub noise_sigmas: Vec<f64>,
    /// Noise σ values of the held-out evaluation set.
    pub eval_noise_sigmas: Vec<f64>,
    pub rain_streaks: [usize; 2],
    pub rain_angle_deg: Range,
    pub rain_intensity: Range,
    pub haze_transmission: Range,
    pub haze_airlight: Range,
    pub blur_sigma: Range,
    pub lowlight_gamma: Range,
    pub lowlight_scale: Range,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            dir: None,
            procedural: 64,
            patterns: Pattern::ALL.to_vec(),
            image_size: 48,
            crop: 32,
            flip: true,
            tasks: Task::ALL.to_vec(),
            noise_sigmas: vec![5.0, 25.0, 50.0],
            eval_noise_sigmas: vec![15.0, 25.0, 50.0],
            rain_streaks: [4, 12],
            rain_angle_deg: [-20.0, 20.0],
            rain_intensity: [0.3, 0.7],
            haze_transmission: [0.4, 0.8],
            haze_airlight: [0.7, 1.0],
            blur_sigma: [0.8, 2.0],
            lowlight_gamma: [1.5, 2.5],
            lowlight_scale: [0.3, 0.6],
            seed: 0,
        }
    }
}

impl DatasetSpec {
    /// Held-out variant: other base images (seed + 1) and the evaluation
    /// noise levels.
    pub fn held_out(&self) -> Self {
        Self {
            noise_sigmas: self.eval_noise_sigmas.clone(),
            seed: self.seed.wrapping_add(1),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.tasks.is_empty() {
            return fail("dataset needs at least one task".into());
        }
        if self.procedural > 0 && self.patterns.is_empty() {
            return fail("procedural images need at least one pattern".into());
        }
        if self.crop == 0 {
            return fail("crop must be ≥ 1".into());
        }
        if self.procedural > 0 && self.crop > self.image_size {
            return fail(format!("crop {} exceeds image_size {}", self.crop, self.image_size));
        }
        if self.tasks.contains(&Task::Noise) && (self.noise_sigmas.is_empty() || self.noise_sigmas.iter().any(|&s| !(s >= 0.0))) {
            return fail("noise task needs non-negative noise_sigmas".into());
        }
        if self.rain_streaks[0] > self.rain_streaks[1] {
            return fail("rain_streaks must be [min, max]".into());
        }
        Ok(())
    }
}

/// Base images plus the spec that turns them into a reproducible stream.
#[derive(Clone, Debug)]
pub struct Dataset<T> {
    pub spec: DatasetSpec,
    pub images: Vec<Tensor<T>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(spec: DatasetSpec) -> Result<Self> {
        spec.validate()?;
        let mut images = Vec::new();
        for i in 0..spec.procedural {
            let pattern = spec.patterns[i % spec.patterns.len()];
            let seed = spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64);
            images.push(procedural_image(pattern, spec.image_size, seed)?);
        }
        if let Some(dir) = &spec.dir {
            let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
                .collect();
            paths.sort();
            for p in paths {
                let img = load_image::<T>(&p)?;
                let (_, _, h, w) = img.dims4()?;
                if h < spec.crop || w < spec.crop {
                    return Err(Error::Data(format!("{} is smaller than the crop {}", p.display(), spec.crop)));
                }
                images.push(img);
            }
        }
        if images.is_empty() {
            return Err(Error::Data("dataset has no images".into()));
        }
        Ok(Self { spec, images })
    }

    /// Sample `index` of the stream; a pure function of `(spec, index)`.
    pub fn sample(&self, index: u64) -> Result<ImagePair<T>> {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.spec.seed.to_le_bytes());
        key[8..16].copy_from_slice(&index.to_le_bytes());
        key[16..].copy_from_slice(b"meas-dataset-str");
        let mut rng = ChaCha8Rng::from_seed(key);
        let base = &self.images[rng.gen_range(0..self.images.len())];
        let task = self.spec.tasks[rng.gen_range(0..self.spec.tasks.len())];
        let (_, _, h, w) = base.dims4()?;
        let cf = CropFlip::sample(h, w, self.spec.crop, self.spec.flip, &mut rng)?;
        let clean = cf.apply(base)?;
        let degraded = self.degrade(&clean, task, &mut rng)?;
        Ok(ImagePair { clean, degraded, task })
    }

    /// Degrades with parameters drawn from the spec's ranges.
    pub fn degrade(&self, clean: &Tensor<T>, task: Task, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
        let s = &self.spec;
        match task {
            Task::Noise => {
                let sigma = s.noise_sigmas[rng.gen_range(0..s.noise_sigmas.len())];
                add_gaussian_noise(clean, sigma, rng.gen())
            }
            Task::Rain => {
                let n = rng.gen_range(s.rain_streaks[0]..=s.rain_streaks[1]);
                let angle = draw(rng, s.rain_angle_deg);
                let intensity = draw(rng, s.rain_intensity);
                synth_rain(clean, n, angle, intensity, rng.gen())
            }
            Task::Haze => {
                let t = draw(rng, s.haze_transmission);
                let a = draw(rng, s.haze_airlight);
                synth_haze(clean, t, a)
            }
            Task::Blur => synth_blur(clean, draw(rng, s.blur_sigma), 0),
            Task::Lowlight => {
                let g = draw(rng, s.lowlight_gamma);
                let sc = draw(rng, s.lowlight_scale);
                synth_lowlight(clean, g, sc)
            }
        }
    }

    /// `count` consecutive samples starting at `start`, stacked per member.
    pub fn samples(&self, start: u64, count: usize) -> Result<Vec<ImagePair<T>>> {
        (0..count as u64).map(|i| self.sample(start + i)).collect()
    }

    /// Fixed evaluation pairs: for each task, `per_task` samples (and for
    /// noise, each σ of the spec in turn).
    pub fn eval_pairs(&self, per_task: usize) -> Result<Vec<ImagePair<T>>> {
        let mut out = Vec::new();
        for (ti, &task) in self.spec.tasks.iter().enumerate() {
            for i in 0..per_task {
                let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed ^ ((ti as u64) << 32 | i as u64));
                let base = &self.images[i % self.images.len()];
                let (_, _, h, w) = base.dims4()?;
                let cf = CropFlip::sample(h, w, self.spec.crop, false, &mut rng)?;
                let clean = cf.apply(base)?;
                let degraded = if task == Task::Noise {
                    let sigma = self.spec.noise_sigmas[i % self.spec.noise_sigmas.len()];
                    add_gaussian_noise(&clean, sigma, rng.gen())?
                } else {
                    self.degrade(&clean, task, &mut rng)?
                };
                out.push(ImagePair { clean, degraded, task });
            }
        }
        Ok(out)
    }
}
