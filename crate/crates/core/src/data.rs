//! Datasets, images, padding, and checkpoint serialization.
//!
//! A dataset is a TOML manifest listing groups of co-captured views:
//!
//! ```toml
//! root = "images"        # optional path prefix, relative to the manifest
//! variable_k = false     # optional; allow groups of differing view count
//!
//! [[groups]]
//! id = "scene-0001"
//! views = ["scene-0001_v0.png", "scene-0001_v1.png"]
//! ```
//!
//! Images are 8-bit PNG or PPM, loaded as RGB in `[0, 1]` (grayscale is
//! replicated across channels). Checkpoints serialize every parameter
//! tensor by name in registration order, so saving a loaded checkpoint
//! reproduces the file byte for byte.
//!
//! The synthetic generator renders correlated multi-view groups — a
//! shared smooth background and shapes, per-view geometric shift and
//! noise — used by the self-contained training and codec tests.

use crate::error::{io_err, Error, Result};
use crate::model::{Model, ModelConfig, Variant};
use crate::nn::kernels::reflect;
use crate::scalar::Scalar;
use ndarray::{Array3, ArrayD, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use std::io::Write as _;
use std::path::{Path, PathBuf};

// ---- padding ----------------------------------------------------------

/// Pad an image (C, H, W) on the bottom/right to the next multiples of
/// `mult`, mirroring without repeating the border sample; tiny inputs fall
/// back to modular reflection, so any size pads to any multiple.
pub fn pad_reflect_to_multiple<S: Scalar>(x: ArrayView3<S>, mult: usize) -> Array3<S> {
    let (c, h, w) = x.dim();
    let th = h.div_ceil(mult) * mult;
    let tw = w.div_ceil(mult) * mult;
    if th == h && tw == w {
        return x.to_owned();
    }
    Array3::from_shape_fn((c, th, tw), |(ci, i, j)| {
        x[(ci, reflect(i as isize, h), reflect(j as isize, w))]
    })
}

/// Crop an image (C, H, W) to its top-left `h x w` corner.
pub fn crop_hw<S: Scalar>(x: ArrayView3<S>, h: usize, w: usize) -> Array3<S> {
    x.slice(ndarray::s![.., ..h, ..w]).to_owned()
}

// ---- manifest ---------------------------------------------------------

#[derive(Debug, Deserialize)]
struct ManifestFile {
    root: Option<String>,
    #[serde(default)]
    variable_k: bool,
    #[serde(default)]
    groups: Vec<ManifestGroup>,
}

#[derive(Debug, Deserialize)]
struct ManifestGroup {
    id: String,
    views: Vec<String>,
}

/// One group of views, resolved to absolute paths.
#[derive(Debug, Clone)]
pub struct GroupRecord {
    pub id: String,
    pub paths: Vec<PathBuf>,
}

/// A validated dataset index.
#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub groups: Vec<GroupRecord>,
    pub variable_k: bool,
}

impl DatasetIndex {
    /// Parse and validate a manifest. Every group needs at least two
    /// views; view counts must agree across groups unless `variable_k`;
    /// ids must be unique; every referenced file must exist.
    pub fn load(manifest: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(manifest).map_err(io_err(manifest))?;
        let parsed: ManifestFile = toml::from_str(&text)
            .map_err(|e| Error::Parse(format!("{}: {e}", manifest.display())))?;
        let base = manifest.parent().unwrap_or_else(|| Path::new("."));
        let root = match &parsed.root {
            Some(r) => base.join(r),
            None => base.to_path_buf(),
        };
        if parsed.groups.is_empty() {
            return Err(Error::Schema(format!(
                "{}: manifest lists no groups",
                manifest.display()
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        let mut groups = Vec::with_capacity(parsed.groups.len());
        let mut k0 = None;
        for g in &parsed.groups {
            if !seen.insert(g.id.as_str()) {
                return Err(Error::Schema(format!("duplicate group id '{}'", g.id)));
            }
            if g.views.len() < 2 {
                return Err(Error::Schema(format!(
                    "group '{}' has {} view(s); a group needs at least 2",
                    g.id,
                    g.views.len()
                )));
            }
            match k0 {
                None => k0 = Some(g.views.len()),
                Some(k) if k != g.views.len() && !parsed.variable_k => {
                    return Err(Error::Schema(format!(
                        "group '{}' has {} views but the first group has {k}; \
                         set variable_k = true to allow mixed sizes",
                        g.id,
                        g.views.len()
                    )));
                }
                _ => {}
            }
            let paths: Vec<PathBuf> = g.views.iter().map(|v| root.join(v)).collect();
            for p in &paths {
                if !p.is_file() {
                    return Err(Error::Schema(format!(
                        "group '{}' references missing file {}",
                        g.id,
                        p.display()
                    )));
                }
            }
            groups.push(GroupRecord {
                id: g.id.clone(),
                paths,
            });
        }
        Ok(Self {
            groups,
            variable_k: parsed.variable_k,
        })
    }

    /// Load every view of one group.
    pub fn load_group<S: Scalar>(&self, index: usize) -> Result<Vec<Array3<S>>> {
        self.groups[index]
            .paths
            .iter()
            .map(|p| load_image(p))
            .collect()
    }
}

// ---- images -----------------------------------------------------------

/// Map an 8-bit sample to the unit interval. All image I/O and the
/// synthetic generator share this one conversion so roundtrips are exact.
pub fn u8_to_unit<S: Scalar>(b: u8) -> S {
    S::from_f64(b as f64 / 255.0)
}

/// Map a unit-interval value to the nearest 8-bit sample.
pub fn unit_to_u8<S: Scalar>(v: S) -> u8 {
    (v.to_f64().clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Load an 8-bit image as RGB in `[0, 1]`, shape (3, H, W).
pub fn load_image<S: Scalar>(path: &Path) -> Result<Array3<S>> {
    let img = image::open(path)
        .map_err(|e| Error::Decode(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn(
        (3, h as usize, w as usize),
        |(c, i, j)| u8_to_unit(img.get_pixel(j as u32, i as u32)[c]),
    ))
}

/// Save an RGB image in `[0, 1]` (values are clamped and rounded) as PNG.
pub fn save_image_png<S: Scalar>(path: &Path, x: ArrayView3<S>) -> Result<()> {
    let (c, h, w) = x.dim();
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let px = image::Rgb(std::array::from_fn(|ci| unit_to_u8(x[(ci, i, j)])));
            img.put_pixel(j as u32, i as u32, px);
        }
    }
    img.save(path)
        .map_err(|e| Error::Decode(format!("{}: {e}", path.display())))
}

// ---- aligned augmentation ---------------------------------------------

/// Crop all views of a group at one shared random offset and apply shared
/// random horizontal/vertical flips. Identical across views, so the
/// cross-view geometry is preserved.
pub fn augment_group<S: Scalar>(
    views: &[Array3<S>],
    crop: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Array3<S>>> {
    let Some(first) = views.first() else {
        return Err(Error::Shape("empty group".into()));
    };
    let (_, h, w) = first.dim();
    if h < crop || w < crop {
        return Err(Error::Schema(format!(
            "crop {crop} exceeds image size {h}x{w}"
        )));
    }
    let oi = rng.gen_range(0..=h - crop);
    let oj = rng.gen_range(0..=w - crop);
    let hflip = rng.gen_bool(0.5);
    let vflip = rng.gen_bool(0.5);
    views
        .iter()
        .map(|x| {
            if x.dim() != first.dim() {
                return Err(Error::Shape(
                    "augment requires equally sized views".into(),
                ));
            }
            let mut v = x
                .slice(ndarray::s![.., oi..oi + crop, oj..oj + crop])
                .to_owned();
            if hflip {
                v.invert_axis(ndarray::Axis(2));
            }
            if vflip {
                v.invert_axis(ndarray::Axis(1));
            }
            Ok(v.as_standard_layout().to_owned())
        })
        .collect()
}

// ---- checkpoints ------------------------------------------------------

const CKPT_MAGIC: [u8; 4] = *b"LDMC";
const CKPT_VERSION: u8 = 1;

/// Serialize a model (architecture, training weight `lambda`, and every
/// parameter tensor in registration order) to bytes.
pub fn checkpoint_to_bytes<S: Scalar>(model: &Model<S>, lambda: f32) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CKPT_MAGIC);
    out.push(CKPT_VERSION);
    out.push(model.cfg.variant.wire_byte());
    out.extend_from_slice(&lambda.to_be_bytes());
    out.extend_from_slice(&(model.cfg.latent_channels as u16).to_be_bytes());
    out.extend_from_slice(&(model.cfg.hyper_channels as u16).to_be_bytes());
    out.extend_from_slice(&(model.cfg.heads as u16).to_be_bytes());
    out.extend_from_slice(&(model.store.len() as u32).to_be_bytes());
    for (_, t) in model.store.iter() {
        let name = t.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_be_bytes());
        out.extend_from_slice(name);
        out.push(t.value.ndim() as u8);
        for &d in t.value.shape() {
            out.extend_from_slice(&(d as u32).to_be_bytes());
        }
        for &v in t.value.iter() {
            out.extend_from_slice(&(Scalar::to_f64(v) as f32).to_bits().to_be_bytes());
        }
    }
    out
}

/// Reconstruct a model from checkpoint bytes.
pub fn checkpoint_from_bytes<S: Scalar>(bytes: &[u8]) -> Result<(Model<S>, f32)> {
    struct R<'a> {
        d: &'a [u8],
        p: usize,
    }
    impl<'a> R<'a> {
        fn take(&mut self, n: usize) -> Result<&'a [u8]> {
            if self.p + n > self.d.len() {
                return Err(Error::Parse(format!(
                    "truncated checkpoint at offset {}",
                    self.p
                )));
            }
            let s = &self.d[self.p..self.p + n];
            self.p += n;
            Ok(s)
        }
    }
    let mut r = R { d: bytes, p: 0 };
    if r.take(4)? != CKPT_MAGIC {
        return Err(Error::Parse("bad checkpoint magic".into()));
    }
    let version = r.take(1)?[0];
    if version != CKPT_VERSION {
        return Err(Error::Incompatible(format!(
            "checkpoint version {version} (expected {CKPT_VERSION})"
        )));
    }
    let variant = Variant::from_wire_byte(r.take(1)?[0])?;
    let lambda = f32::from_be_bytes(r.take(4)?.try_into().unwrap());
    let m = u16::from_be_bytes(r.take(2)?.try_into().unwrap()) as usize;
    let n = u16::from_be_bytes(r.take(2)?.try_into().unwrap()) as usize;
    let heads = u16::from_be_bytes(r.take(2)?.try_into().unwrap()) as usize;
    let count = u32::from_be_bytes(r.take(4)?.try_into().unwrap()) as usize;
    let cfg = ModelConfig {
        variant,
        latent_channels: m,
        hyper_channels: n,
        heads,
    };
    let mut model = Model::<S>::new(cfg, 0)?;
    if count != model.store.len() {
        return Err(Error::Incompatible(format!(
            "checkpoint has {count} tensors, model expects {}",
            model.store.len()
        )));
    }
    for idx in 0..count {
        let name_len = u16::from_be_bytes(r.take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Parse("non-UTF-8 tensor name".into()))?
            .to_string();
        let ndim = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_be_bytes(r.take(4)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let bits = u32::from_be_bytes(r.take(4)?.try_into().unwrap());
            data.push(S::from_f64(f32::from_bits(bits) as f64));
        }
        let id = crate::nn::ParamId(idx);
        let expect_name = model.store.name(id);
        if expect_name != name {
            return Err(Error::Incompatible(format!(
                "tensor {idx} is '{name}', model expects '{expect_name}'"
            )));
        }
        let value = ArrayD::from_shape_vec(ndarray::IxDyn(&shape), data)
            .map_err(|e| Error::Parse(format!("tensor '{name}': {e}")))?;
        if value.shape() != model.store.get(id).shape() {
            return Err(Error::Incompatible(format!(
                "tensor '{name}' has shape {:?}, model expects {:?}",
                value.shape(),
                model.store.get(id).shape()
            )));
        }
        *model.store.get_mut(id) = value;
    }
    if r.p != bytes.len() {
        return Err(Error::Parse("trailing bytes after checkpoint".into()));
    }
    Ok((model, lambda))
}

pub fn save_checkpoint<S: Scalar>(path: &Path, model: &Model<S>, lambda: f32) -> Result<()> {
    let bytes = checkpoint_to_bytes(model, lambda);
    let mut f = std::fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&bytes).map_err(io_err(path))?;
    Ok(())
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<(Model<S>, f32)> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    checkpoint_from_bytes(&bytes)
}

// ---- synthetic data ---------------------------------------------------

/// Parameters of the synthetic correlated multi-view generator.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticSpec {
    pub groups: usize,
    pub views: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

fn smooth_field(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array3<f32> {
    // coarse random grid, bilinearly upsampled: large-scale structure
    let (ch, cw) = (h.div_ceil(8).max(2), w.div_ceil(8).max(2));
    let coarse = Array3::from_shape_fn((3, ch, cw), |_| rng.gen::<f32>());
    Array3::from_shape_fn((3, h, w), |(c, i, j)| {
        let fi = i as f32 / h as f32 * (ch - 1) as f32;
        let fj = j as f32 / w as f32 * (cw - 1) as f32;
        let (i0, j0) = (fi as usize, fj as usize);
        let (i1, j1) = ((i0 + 1).min(ch - 1), (j0 + 1).min(cw - 1));
        let (di, dj) = (fi - i0 as f32, fj - j0 as f32);
        coarse[(c, i0, j0)] * (1.0 - di) * (1.0 - dj)
            + coarse[(c, i1, j0)] * di * (1.0 - dj)
            + coarse[(c, i0, j1)] * (1.0 - di) * dj
            + coarse[(c, i1, j1)] * di * dj
    })
}

fn shift_reflect(x: &Array3<f32>, dy: isize, dx: isize) -> Array3<f32> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, h, w), |(ci, i, j)| {
        x[(
            ci,
            reflect(i as isize + dy, h),
            reflect(j as isize + dx, w),
        )]
    })
}

/// Render one group: a shared scene observed from `k` slightly shifted
/// viewpoints with small independent noise, quantized to 8 bits so a PNG
/// roundtrip is lossless.
pub fn synthesize_group(rng: &mut ChaCha8Rng, k: usize, h: usize, w: usize) -> Vec<Array3<f32>> {
    let mut scene = smooth_field(rng, h, w);
    // a few solid rectangles shared by all views
    let shapes = rng.gen_range(2..5);
    for _ in 0..shapes {
        let sh = rng.gen_range(h / 8..=h / 2).max(1);
        let sw = rng.gen_range(w / 8..=w / 2).max(1);
        let oi = rng.gen_range(0..h - sh + 1);
        let oj = rng.gen_range(0..w - sw + 1);
        let color: [f32; 3] = [rng.gen(), rng.gen(), rng.gen()];
        let alpha = rng.gen_range(0.5..1.0f32);
        for c in 0..3 {
            for i in oi..oi + sh {
                for j in oj..oj + sw {
                    scene[(c, i, j)] = scene[(c, i, j)] * (1.0 - alpha) + color[c] * alpha;
                }
            }
        }
    }
    (0..k)
        .map(|_| {
            let dy = rng.gen_range(-3..=3);
            let dx = rng.gen_range(-3..=3);
            let brightness = (rng.gen::<f32>() - 0.5) * 0.04;
            let mut v = shift_reflect(&scene, dy, dx);
            v.mapv_inplace(|p| p + brightness + (rng.gen::<f32>() - 0.5) * 0.03);
            // quantize to the 8-bit grid so a PNG roundtrip is lossless
            v.mapv_inplace(|p| u8_to_unit(unit_to_u8(p)));
            v
        })
        .collect()
}

/// Write a synthetic dataset (PNGs + manifest) into `dir`; returns the
/// manifest path.
pub fn write_synthetic_dataset(dir: &Path, spec: &SyntheticSpec) -> Result<PathBuf> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(io_err(&images))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut manifest = String::from("root = \"images\"\n");
    for g in 0..spec.groups {
        let views = synthesize_group(&mut rng, spec.views, spec.height, spec.width);
        let id = format!("group-{g:04}");
        manifest.push_str("\n[[groups]]\n");
        manifest.push_str(&format!("id = \"{id}\"\n"));
        let names: Vec<String> = (0..views.len())
            .map(|v| format!("{id}_v{v}.png"))
            .collect();
        manifest.push_str(&format!(
            "views = [{}]\n",
            names
                .iter()
                .map(|n| format!("\"{n}\""))
                .collect::<Vec<_>>()
                .join(", ")
        ));
        for (name, view) in names.iter().zip(&views) {
            save_image_png(&images.join(name), view.view())?;
        }
    }
    let path = dir.join("manifest.toml");
    std::fs::write(&path, manifest).map_err(io_err(&path))?;
    Ok(path)
}
