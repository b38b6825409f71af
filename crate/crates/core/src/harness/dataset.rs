//! Procedural shape scenes with landmark annotations.
//!
//! Every category is an irregular polygon or star with a fixed template, a
//! fixed keypoint count and a ring skeleton. Instances apply a random affine
//! transform and fill intensity, over a cluttered background that also holds a
//! small decoy shape drawn from another category.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::PromptSet;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::pipeline::Skeleton;
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 64;
/// Seed mixed into category template generation; templates do not depend on the dataset seed.
const TEMPLATE_SEED: u64 = 0x5CA7_7E4E;
/// Inner-vertex radius of star templates relative to the tips.
const STAR_INNER: f64 = 0.45;

/// Axis-aligned box in normalized image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    /// Closed-box test with a few ulps of slack for `x + w` rounding.
    pub fn contains(&self, px: f64, py: f64) -> bool {
        const SLACK: f64 = 1e-12;
        px >= self.x - SLACK && px <= self.x + self.w + SLACK && py >= self.y - SLACK && py <= self.y + self.h + SLACK
    }

    pub fn longest_side(&self) -> f64 {
        self.w.max(self.h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Polygon,
    Star,
}

/// Fixed geometry and text of one category.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub id: usize,
    pub kind: ShapeKind,
    /// Canonical outline vertices (which are also the keypoints), unit scale, centred.
    pub template: Vec<[f64; 2]>,
    pub prompts: PromptSet,
    pub skeleton: Skeleton,
}

impl Category {
    pub fn keypoint_count(&self) -> usize {
        self.template.len()
    }
}

const POLYGON_NAMES: [&str; 5] = ["triangle", "quadrilateral", "pentagon", "hexagon", "heptagon"];
const STAR_NAMES: [&str; 4] = ["three-pointed star", "four-pointed star", "five-pointed star", "six-pointed star"];
const VARIANTS: [&str; 4] = ["lopsided", "slanted", "stretched", "notched"];

/// Deterministic template for category `id`; even ids are polygons, odd ids stars.
pub fn category(id: usize) -> Result<Category> {
    let mut rng = ChaCha8Rng::seed_from_u64(TEMPLATE_SEED ^ (id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let variant = VARIANTS[(id / 2) / 5 % VARIANTS.len()];
    let (kind, template, name, keypoints) = if id % 2 == 0 {
        let sides = 3 + (id / 2) % 5;
        let template: Vec<[f64; 2]> = (0..sides)
            .map(|j| {
                let angle = 2.0 * PI * j as f64 / sides as f64 + rng.random_range(-0.25..0.25) - PI / 2.0;
                let r = rng.random_range(0.7..1.0);
                [r * angle.cos(), r * angle.sin()]
            })
            .collect();
        let names = (1..=sides).map(|j| format!("corner {j}")).collect();
        (ShapeKind::Polygon, template, POLYGON_NAMES[sides - 3], names)
    } else {
        let points = 3 + (id / 2) % 4;
        let mut template = Vec::with_capacity(2 * points);
        let mut names = Vec::with_capacity(2 * points);
        for j in 0..points {
            let base = 2.0 * PI * j as f64 / points as f64 - PI / 2.0;
            let tip = base + rng.random_range(-0.15..0.15);
            let r = rng.random_range(0.8..1.0);
            template.push([r * tip.cos(), r * tip.sin()]);
            names.push(format!("tip {}", j + 1));
            let notch = base + PI / points as f64 + rng.random_range(-0.1..0.1);
            let r = STAR_INNER * rng.random_range(0.8..1.2);
            template.push([r * notch.cos(), r * notch.sin()]);
            names.push(format!("notch {}", j + 1));
        }
        (ShapeKind::Star, template, STAR_NAMES[points - 3], names)
    };
    let n = template.len();
    let description = format!("a {variant} {name}, style {id}");
    Ok(Category {
        id,
        kind,
        template,
        prompts: PromptSet::new(description, keypoints)?,
        skeleton: Skeleton::ring(n)?,
    })
}

/// One annotated scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSample {
    pub id: usize,
    pub category_id: usize,
    /// Index of this instance within its category.
    pub instance: usize,
    pub image: Image,
    /// Normalized `(x, y)` per joint.
    pub keypoints: Vec<[f64; 2]>,
    pub bbox: BBox,
    pub skeleton: Skeleton,
    pub prompts: PromptSet,
}

impl SceneSample {
    pub fn keypoint_tensor(&self) -> Tensor {
        let data = self.keypoints.iter().flat_map(|p| p.iter().copied()).collect();
        Tensor::new(vec![self.keypoints.len(), 2], data).expect("N×2")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub seed: u64,
    pub categories: Vec<Category>,
    pub samples: Vec<SceneSample>,
}

impl Dataset {
    pub fn category(&self, id: usize) -> Option<&Category> {
        self.categories.iter().find(|c| c.id == id)
    }

    pub fn descriptions(&self) -> Vec<String> {
        self.categories.iter().map(|c| c.prompts.category.clone()).collect()
    }

    /// Samples of the given categories with `instance` in `instances`.
    pub fn select(&self, categories: &[usize], instances: std::ops::Range<usize>) -> Vec<SceneSample> {
        self.samples
            .iter()
            .filter(|s| categories.contains(&s.category_id) && instances.contains(&s.instance))
            .cloned()
            .collect()
    }
}

fn transform(template: &[[f64; 2]], rng: &mut impl Rng, scale_range: (f64, f64), rotation: f64) -> Vec<[f64; 2]> {
    let theta = rng.random_range(-rotation..=rotation);
    let s = rng.random_range(scale_range.0..scale_range.1);
    let (sx, sy) = (s * rng.random_range(0.85..1.15), s * rng.random_range(0.85..1.15));
    let (c, si) = (theta.cos(), theta.sin());
    let pts: Vec<[f64; 2]> = template
        .iter()
        .map(|&[x, y]| {
            let (x, y) = (x * sx, y * sy);
            [c * x - si * y, si * x + c * y]
        })
        .collect();
    let (min_x, max_x) = min_max(pts.iter().map(|p| p[0]));
    let (min_y, max_y) = min_max(pts.iter().map(|p| p[1]));
    let margin = 0.03;
    let tx = rng.random_range((margin - min_x)..=(1.0 - margin - max_x).max(margin - min_x));
    let ty = rng.random_range((margin - min_y)..=(1.0 - margin - max_y).max(margin - min_y));
    pts.into_iter().map(|[x, y]| [x + tx, y + ty]).collect()
}

fn min_max(it: impl Iterator<Item = f64>) -> (f64, f64) {
    it.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

fn bbox_of(points: &[[f64; 2]]) -> BBox {
    let (x0, x1) = min_max(points.iter().map(|p| p[0]));
    let (y0, y1) = min_max(points.iter().map(|p| p[1]));
    BBox { x: x0, y: y0, w: x1 - x0, h: y1 - y0 }
}

/// Even-odd point-in-polygon test.
fn inside(poly: &[[f64; 2]], x: f64, y: f64) -> bool {
    let mut hit = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let ([xi, yi], [xj, yj]) = (poly[i], poly[j]);
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            hit = !hit;
        }
        j = i;
    }
    hit
}

fn fill(img: &mut Image, poly: &[[f64; 2]], intensity: f64) {
    let (w, h) = (img.width as f64, img.height as f64);
    for py in 0..img.height {
        for px in 0..img.width {
            if inside(poly, (px as f64 + 0.5) / w, (py as f64 + 0.5) / h) {
                img.set(py, px, intensity);
            }
        }
    }
}

fn render_instance(
    cat: &Category,
    decoy: &Category,
    rng: &mut ChaCha8Rng,
) -> (Image, Vec<[f64; 2]>, BBox) {
    let keypoints = loop {
        let pts = transform(&cat.template, rng, (0.22, 0.32), 0.35);
        let b = bbox_of(&pts);
        let fits = b.x >= 0.0 && b.y >= 0.0 && b.x + b.w <= 1.0 && b.y + b.h <= 1.0;
        if fits && b.w > 0.1 && b.h > 0.1 {
            break pts;
        }
    };
    let mut img = Image::blank(IMAGE_SIZE, IMAGE_SIZE);
    let background = rng.random_range(0.0..0.25);
    for p in img.pixels.iter_mut() {
        *p = background + rng.random_range(-0.04..0.04);
    }
    let decoy_pts = transform(&decoy.template, rng, (0.07, 0.11), PI);
    let decoy_level = rng.random_range(0.3..0.55);
    fill(&mut img, &decoy_pts, decoy_level);
    let level = rng.random_range(0.65..1.0);
    fill(&mut img, &keypoints, level);
    for p in img.pixels.iter_mut() {
        *p = p.clamp(0.0, 1.0);
    }
    let bbox = bbox_of(&keypoints);
    (img, keypoints, bbox)
}

/// `instances` scenes for each of `n_categories` categories, deterministic per seed.
pub fn synth_dataset(seed: u64, n_categories: usize, instances: usize) -> Result<Dataset> {
    if n_categories < 2 {
        return Err(Error::Input("need at least two categories".into()));
    }
    let categories = (0..n_categories).map(category).collect::<Result<Vec<_>>>()?;
    let mut samples = Vec::with_capacity(n_categories * instances);
    for cat in &categories {
        for instance in 0..instances {
            let stream = ((cat.id as u64) << 32) | instance as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream);
            let decoy_id = (cat.id + 1 + rng.random_range(0..n_categories - 1)) % n_categories;
            let (image, keypoints, bbox) = render_instance(cat, &categories[decoy_id], &mut rng);
            samples.push(SceneSample {
                id: samples.len(),
                category_id: cat.id,
                instance,
                image,
                keypoints,
                bbox,
                skeleton: cat.skeleton.clone(),
                prompts: cat.prompts.clone(),
            });
        }
    }
    Ok(Dataset {
        seed,
        categories,
        samples,
    })
}

/// On-disk sample record; prompts and skeleton live in per-category sidecars.
#[derive(Serialize, Deserialize)]
struct SampleRecord {
    id: usize,
    category_id: usize,
    instance: usize,
    image: Image,
    keypoints: Vec<[f64; 2]>,
    bbox: BBox,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    seed: u64,
    categories: Vec<usize>,
    samples: Vec<SampleRecord>,
}

pub const MANIFEST: &str = "samples.json";

fn sidecar_paths(dir: &Path, id: usize) -> (std::path::PathBuf, std::path::PathBuf) {
    let cat_dir = dir.join("categories");
    (
        cat_dir.join(format!("{id:03}.prompts.txt")),
        cat_dir.join(format!("{id:03}.skeleton.txt")),
    )
}

/// Writes `samples.json` plus `categories/NNN.prompts.txt` and `categories/NNN.skeleton.txt`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("categories"))?;
    for cat in &ds.categories {
        let (prompts, skeleton) = sidecar_paths(dir, cat.id);
        fs::write(prompts, cat.prompts.to_sidecar())?;
        fs::write(skeleton, cat.skeleton.to_edge_list())?;
    }
    let manifest = Manifest {
        seed: ds.seed,
        categories: ds.categories.iter().map(|c| c.id).collect(),
        samples: ds
            .samples
            .iter()
            .map(|s| SampleRecord {
                id: s.id,
                category_id: s.category_id,
                instance: s.instance,
                image: s.image.clone(),
                keypoints: s.keypoints.clone(),
                bbox: s.bbox,
            })
            .collect(),
    };
    fs::write(dir.join(MANIFEST), serde_json::to_vec(&manifest)?)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?;
    let mut categories = Vec::with_capacity(manifest.categories.len());
    for &id in &manifest.categories {
        let mut cat = category(id)?;
        let (prompt_path, skeleton_path) = sidecar_paths(dir, id);
        let bad = |path: &Path, e: Error| Error::Format {
            what: "category sidecar",
            path: path.to_path_buf(),
            detail: e.to_string(),
        };
        cat.prompts = PromptSet::parse_sidecar(&fs::read_to_string(&prompt_path)?).map_err(|e| bad(&prompt_path, e))?;
        cat.skeleton = Skeleton::parse_edge_list(cat.prompts.len(), &fs::read_to_string(&skeleton_path)?)
            .map_err(|e| bad(&skeleton_path, e))?;
        categories.push(cat);
    }
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for r in manifest.samples {
        let cat = categories
            .iter()
            .find(|c| c.id == r.category_id)
            .ok_or_else(|| Error::Input(format!("sample {} has unknown category {}", r.id, r.category_id)))?;
        if r.keypoints.len() != cat.prompts.len() {
            return Err(Error::Input(format!(
                "sample {} has {} keypoints, category expects {}",
                r.id,
                r.keypoints.len(),
                cat.prompts.len()
            )));
        }
        samples.push(SceneSample {
            id: r.id,
            category_id: r.category_id,
            instance: r.instance,
            image: r.image,
            keypoints: r.keypoints,
            bbox: r.bbox,
            skeleton: cat.skeleton.clone(),
            prompts: cat.prompts.clone(),
        });
    }
    Ok(Dataset {
        seed: manifest.seed,
        categories,
        samples,
    })
}
