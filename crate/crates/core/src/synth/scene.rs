use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeling::InstanceLabeling;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub rows: usize,
    pub cols: usize,
    pub dot_radius: usize,
    pub spacing: usize,
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SceneConfig {
    /// 4 x 4 dots of radius 3 on a 128 x 128 image.
    fn default() -> Self {
        SceneConfig {
            rows: 4,
            cols: 4,
            dot_radius: 3,
            spacing: 32,
            noise_std: 0.0,
            seed: 0,
        }
    }
}

/// Grayscale image of identical dots and its instance labeling.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub config: SceneConfig,
    /// `[1, H, W]`, values representable as `f32`.
    pub image: Tensor,
    pub gt: InstanceLabeling,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.gt.height()
    }

    pub fn width(&self) -> usize {
        self.gt.width()
    }
}

/// Offsets `(dx, dy)` of a filled disc, `dx² + dy² <= r²`, in raster order.
pub fn disc_offsets(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                out.push((dx, dy));
            }
        }
    }
    out
}

/// Dots of intensity 1 on a zero background, one per cell of a
/// `rows x cols` grid of `spacing`-pixel cells; dot `(i, j)` is centred at
/// `(spacing/2 + j·spacing, spacing/2 + i·spacing)` and gets id
/// `i·cols + j + 1`. Optional Gaussian noise is added to every pixel.
pub fn generate_scene(cfg: &SceneConfig) -> Result<Scene> {
    if cfg.rows == 0 || cfg.cols == 0 {
        return Err(Error::invalid("scene needs at least one row and column"));
    }
    if cfg.spacing <= 2 * cfg.dot_radius {
        return Err(Error::invalid(format!(
            "dots of radius {} overlap at spacing {}",
            cfg.dot_radius, cfg.spacing
        )));
    }
    if !(cfg.noise_std >= 0.0 && cfg.noise_std.is_finite()) {
        return Err(Error::invalid(format!("bad noise std {}", cfg.noise_std)));
    }
    if cfg.rows * cfg.cols > u16::MAX as usize {
        return Err(Error::invalid("too many dots for u16 labels"));
    }
    let h = cfg.rows * cfg.spacing;
    let w = cfg.cols * cfg.spacing;
    let mut image = vec![0.0; h * w];
    let mut labels = vec![0u16; h * w];
    let disc = disc_offsets(cfg.dot_radius);
    let half = (cfg.spacing / 2) as isize;
    for i in 0..cfg.rows {
        for j in 0..cfg.cols {
            let cx = half + (j * cfg.spacing) as isize;
            let cy = half + (i * cfg.spacing) as isize;
            let id = (i * cfg.cols + j + 1) as u16;
            for &(dx, dy) in &disc {
                let p = (cy + dy) as usize * w + (cx + dx) as usize;
                image[p] = 1.0;
                labels[p] = id;
            }
        }
    }
    if cfg.noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let normal = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::invalid(e.to_string()))?;
        for v in &mut image {
            *v += normal.sample(&mut rng);
        }
    }
    for v in &mut image {
        *v = f64::from(*v as f32);
    }
    Ok(Scene {
        config: cfg.clone(),
        image: Tensor::new([1, h, w], image)?,
        gt: InstanceLabeling::new(h, w, labels)?,
    })
}

#[derive(Serialize, Deserialize)]
struct SceneFile {
    h: usize,
    w: usize,
    rows: usize,
    cols: usize,
    dot_radius: usize,
    spacing: usize,
    noise_std: f64,
    seed: u64,
    image: String,
    labels: String,
}

impl Scene {
    /// JSON value with the image as base64 little-endian `f32` and labels as
    /// base64 little-endian `u16`.
    pub fn to_json(&self) -> serde_json::Value {
        let image: Vec<u8> = self
            .image
            .data()
            .iter()
            .flat_map(|&v| (v as f32).to_le_bytes())
            .collect();
        let labels: Vec<u8> = self.gt.labels().iter().flat_map(|l| l.to_le_bytes()).collect();
        let c = &self.config;
        serde_json::to_value(SceneFile {
            h: self.height(),
            w: self.width(),
            rows: c.rows,
            cols: c.cols,
            dot_radius: c.dot_radius,
            spacing: c.spacing,
            noise_std: c.noise_std,
            seed: c.seed,
            image: BASE64.encode(image),
            labels: BASE64.encode(labels),
        })
        .expect("scene serializes")
    }

    pub fn from_json(value: serde_json::Value) -> Result<Self> {
        let f: SceneFile = serde_json::from_value(value)?;
        let decode = |s: &str, what: &str| {
            BASE64
                .decode(s)
                .map_err(|e| Error::invalid(format!("scene {what}: {e}")))
        };
        let n = f.h * f.w;
        let image_bytes = decode(&f.image, "image")?;
        let label_bytes = decode(&f.labels, "labels")?;
        if image_bytes.len() != 4 * n || label_bytes.len() != 2 * n {
            return Err(Error::invalid(format!(
                "scene payload sizes do not match {}x{}",
                f.h, f.w
            )));
        }
        let image = image_bytes
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect();
        let labels = label_bytes
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]))
            .collect();
        Ok(Scene {
            config: SceneConfig {
                rows: f.rows,
                cols: f.cols,
                dot_radius: f.dot_radius,
                spacing: f.spacing,
                noise_std: f.noise_std,
                seed: f.seed,
            },
            image: Tensor::new([1, f.h, f.w], image)?,
            gt: InstanceLabeling::new(f.h, f.w, labels)?,
        })
    }
}
