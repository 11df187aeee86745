//! Synthetic union-of-subspaces images and their file formats.
//!
//! A dataset fixes `C` mutually orthogonal `d`-dimensional class subspaces of `ℝ^D`. Each image
//! is a `g x g` grid of patches split into contiguous bands, one band per class present. A patch
//! of class `c` is `B_c R y + σ ξ`, where `y` has i.i.d. normal entries with mean `μ e₁` and
//! standard deviation `s`, and `R` is a per-image, per-class rotation inside the subspace by an
//! angle drawn uniformly from `[−θ_max, θ_max]`. Columns are centered per image.
//!
//! Patches are stored in row-major grid order: column `j` is grid cell `(j / g, j % g)`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcore::{qr_orthonormalize, Matrix, Rng, Seed};
use crate::subspace::center_columns;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"DEPR";
pub const EMBEDDING_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub ambient_dim: usize,
    pub classes: usize,
    pub subspace_dim: usize,
    pub grid: usize,
    pub noise: f64,
    pub min_classes_per_image: usize,
    pub max_classes_per_image: usize,
    pub rotate: bool,
    /// Largest per-image rotation angle, radians.
    pub max_rotation: f64,
    pub coeff_mean: f64,
    pub coeff_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            ambient_dim: 16,
            classes: 4,
            subspace_dim: 2,
            grid: 8,
            noise: 0.1,
            min_classes_per_image: 2,
            max_classes_per_image: 4,
            rotate: true,
            max_rotation: 80f64.to_radians(),
            coeff_mean: 1.0,
            coeff_std: 0.3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn patches(&self) -> usize {
        self.grid * self.grid
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.classes == 0 || self.subspace_dim == 0 {
            return bad("classes and subspace_dim must be positive".into());
        }
        if self.classes * self.subspace_dim > self.ambient_dim {
            return bad(format!(
                "{} classes of dimension {} do not fit in dimension {}",
                self.classes, self.subspace_dim, self.ambient_dim
            ));
        }
        if self.grid < 2 {
            return bad(format!("grid side must be at least 2, got {}", self.grid));
        }
        if !(self.noise >= 0.0) || !(self.coeff_std >= 0.0) || !self.coeff_mean.is_finite() {
            return bad("noise and coefficient spread must be non-negative".into());
        }
        if !self.max_rotation.is_finite() || self.max_rotation < 0.0 {
            return bad("max_rotation must be a non-negative angle".into());
        }
        let (lo, hi) = (self.min_classes_per_image, self.max_classes_per_image);
        if lo == 0 || lo > hi || hi > self.classes || hi > self.grid {
            return bad(format!(
                "classes per image range {lo}..={hi} is invalid for {} classes on a {} grid",
                self.classes, self.grid
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    /// `D x N` embeddings.
    pub embeddings: Matrix,
    pub labels: Vec<usize>,
    pub grid: usize,
}

impl LabeledImage {
    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.embeddings.cols() != self.grid * self.grid || self.labels.len() != self.embeddings.cols() {
            return Err(Error::InvalidArgument(format!(
                "image has {} columns and {} labels for a {}x{} grid",
                self.embeddings.cols(),
                self.labels.len(),
                self.grid,
                self.grid
            )));
        }
        if let Some(&label) = self.labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(())
    }
}

/// Mutually orthonormal class bases, `D x d` each.
pub fn class_bases(cfg: &SynthConfig) -> Result<Vec<Matrix>> {
    cfg.validate()?;
    let mut rng = Rng::new(Seed(cfg.seed).derive("class-bases"));
    let k = cfg.classes * cfg.subspace_dim;
    let q = qr_orthonormalize(&rng.gaussian_matrix(cfg.ambient_dim, k))?;
    Ok((0..cfg.classes)
        .map(|c| q.cols_range(c * cfg.subspace_dim, cfg.subspace_dim))
        .collect())
}

/// Rotation by `theta` in the plane spanned by `e₁` and a random unit `v ⊥ e₁`.
fn in_subspace_rotation(d: usize, theta: f64, rng: &mut Rng) -> Matrix {
    if d < 2 {
        return Matrix::identity(d);
    }
    let mut v: Vec<f64> = (0..d).map(|i| if i == 0 { 0.0 } else { rng.normal() }).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        v[1] = 1.0;
    } else {
        for x in &mut v {
            *x /= norm;
        }
    }
    let (s, c) = theta.sin_cos();
    Matrix::from_fn(d, d, |i, j| {
        let e = |k: usize| if k == 0 { 1.0 } else { 0.0 };
        let id = if i == j { 1.0 } else { 0.0 };
        id + (c - 1.0) * (e(i) * e(j) + v[i] * v[j]) + s * (v[i] * e(j) - e(i) * v[j])
    })
}

/// Band layout: class slot per grid cell.
fn band_layout(g: usize, k: usize, rng: &mut Rng) -> Vec<usize> {
    let mut cuts = rng.choose_distinct(g - 1, k - 1);
    for c in &mut cuts {
        *c += 1;
    }
    cuts.sort_unstable();
    let vertical = rng.below(2) == 0;
    (0..g * g)
        .map(|j| {
            let (r, c) = (j / g, j % g);
            let pos = if vertical { c } else { r };
            cuts.iter().filter(|&&cut| pos >= cut).count()
        })
        .collect()
}

/// Generates image `index` of the dataset, optionally skipping the final centering.
pub fn generate_image(cfg: &SynthConfig, bases: &[Matrix], index: u64, center: bool) -> Result<LabeledImage> {
    cfg.validate()?;
    let mut rng = Rng::new(Seed(cfg.seed).derive("image").derive_index(index));
    let span = cfg.max_classes_per_image - cfg.min_classes_per_image + 1;
    let k = cfg.min_classes_per_image + rng.below(span);
    let present = rng.choose_distinct(cfg.classes, k);
    let slots = band_layout(cfg.grid, k, &mut rng);
    let d = cfg.subspace_dim;
    let rotated: Vec<Matrix> = present
        .iter()
        .map(|&c| {
            let theta = if cfg.rotate {
                rng.uniform_range(-cfg.max_rotation, cfg.max_rotation)
            } else {
                0.0
            };
            bases[c].matmul(&in_subspace_rotation(d, theta, &mut rng))
        })
        .collect();
    let n = cfg.patches();
    let mut z = Matrix::zeros(cfg.ambient_dim, n);
    let mut labels = Vec::with_capacity(n);
    for (j, &slot) in slots.iter().enumerate() {
        let y: Vec<f64> = (0..d)
            .map(|i| cfg.coeff_std * rng.normal() + if i == 0 { cfg.coeff_mean } else { 0.0 })
            .collect();
        let col = rotated[slot].matmul(&Matrix::column(&y));
        for (i, dst) in z.col_mut(j).iter_mut().enumerate() {
            *dst = col.get(i, 0) + cfg.noise * rng.normal();
        }
        labels.push(present[slot]);
    }
    if center {
        z = center_columns(&z).0;
    }
    Ok(LabeledImage {
        embeddings: z,
        labels,
        grid: cfg.grid,
    })
}

/// Images `start..start + count` of the dataset described by `cfg`, generated in parallel.
pub fn gen_range(cfg: &SynthConfig, start: u64, count: usize) -> Result<Vec<LabeledImage>> {
    use rayon::prelude::*;
    let bases = class_bases(cfg)?;
    (0..count as u64)
        .into_par_iter()
        .map(|i| generate_image(cfg, &bases, start + i, true))
        .collect()
}

pub fn gen_dataset(cfg: &SynthConfig, count: usize) -> Result<Vec<LabeledImage>> {
    gen_range(cfg, 0, count)
}

pub fn encode_embeddings(image: &LabeledImage) -> Result<Vec<u8>> {
    let (d, n) = image.embeddings.shape();
    if image.labels.len() != n || image.grid * image.grid != n {
        return Err(Error::InvalidArgument("labels or grid do not match the embeddings".into()));
    }
    let mut buf = Vec::with_capacity(20 + 8 * d * n + 2 * n);
    buf.extend_from_slice(EMBEDDING_MAGIC);
    for v in [EMBEDDING_VERSION, d as u32, n as u32, image.grid as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for x in image.embeddings.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    for &l in &image.labels {
        let l = u16::try_from(l).map_err(|_| Error::TooManyClasses(l))?;
        buf.extend_from_slice(&l.to_le_bytes());
    }
    Ok(buf)
}

pub fn decode_embeddings(bytes: &[u8], path: &Path) -> Result<LabeledImage> {
    let corrupt = |detail: String| Error::ShapeCorrupt {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < 4 || &bytes[..4] != EMBEDDING_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
        });
    }
    if bytes.len() < 20 {
        return Err(corrupt(format!("header needs 20 bytes, file has {}", bytes.len())));
    }
    let u32_at = |k: usize| u32::from_le_bytes(bytes[k..k + 4].try_into().expect("4 bytes"));
    let version = u32_at(4);
    if version != EMBEDDING_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
        });
    }
    let (d, n, g) = (u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize);
    if g * g != n {
        return Err(corrupt(format!("grid {g} does not match {n} patches")));
    }
    let expected = 20 + 8 * d * n + 2 * n;
    if bytes.len() != expected {
        return Err(corrupt(format!("payload is {} bytes, expected {expected}", bytes.len())));
    }
    let data: Vec<f64> = bytes[20..20 + 8 * d * n]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let labels = bytes[20 + 8 * d * n..]
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]) as usize)
        .collect();
    Ok(LabeledImage {
        embeddings: Matrix::from_col_major(d, n, data)?,
        labels,
        grid: g,
    })
}

pub fn write_embeddings(path: &Path, image: &LabeledImage) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_embeddings(image)?)?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<LabeledImage> {
    decode_embeddings(&fs::read(path)?, path)
}

/// Plain-text PGM of the label grid; gray level equals class id.
pub fn label_map_pgm(labels: &[usize], g: usize) -> Result<String> {
    if labels.len() != g * g {
        return Err(Error::InvalidArgument(format!(
            "{} labels do not fill a {g}x{g} grid",
            labels.len()
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l > 255) {
        return Err(Error::TooManyClasses(l + 1));
    }
    let maxval = labels.iter().copied().max().unwrap_or(0).max(1);
    let mut s = format!("P2\n{g} {g}\n{maxval}\n");
    for r in 0..g {
        let row: Vec<String> = labels[r * g..(r + 1) * g].iter().map(|l| l.to_string()).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    Ok(s)
}

pub fn write_label_map(path: &Path, labels: &[usize], g: usize) -> Result<()> {
    fs::write(path, label_map_pgm(labels, g)?)?;
    Ok(())
}
