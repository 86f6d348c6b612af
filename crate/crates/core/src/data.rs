//! Synthetic paired sketch/image dataset with seen/unseen class splits.
//!
//! Every class owns a prototype mask made of a few filled polygons. An image
//! is the prototype plus pixel noise and clutter rectangles; a sketch is the
//! edge map of a slightly rotated and shifted prototype.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{SeedTree, StreamRng};
use crate::tensor::{io, Precision, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub num_classes: usize,
    pub seen_classes: usize,
    /// Training pairs per seen class.
    pub samples_per_class_train: usize,
    pub gallery_per_class_test: usize,
    pub queries_per_class_test: usize,
    pub grid: usize,
    /// Fraction of training pairs whose image comes from a wrong class.
    pub corruption_rate: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            num_classes: 16,
            seen_classes: 12,
            samples_per_class_train: 40,
            gallery_per_class_test: 25,
            queries_per_class_test: 10,
            grid: 32,
            corruption_rate: 0.0,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seen_classes == 0 || self.seen_classes >= self.num_classes {
            return Err(Error::Config(format!(
                "need 0 < seen_classes < num_classes, got {} of {}",
                self.seen_classes, self.num_classes
            )));
        }
        if !(0.0..1.0).contains(&self.corruption_rate) {
            return Err(Error::Config(format!("corruption_rate {} not in [0, 1)", self.corruption_rate)));
        }
        if self.corruption_rate > 0.0 && self.seen_classes < 2 {
            return Err(Error::Config("corruption needs at least two seen classes".into()));
        }
        if self.grid < 8 {
            return Err(Error::Config(format!("grid {} is too small (minimum 8)", self.grid)));
        }
        if self.samples_per_class_train == 0 || self.gallery_per_class_test == 0 || self.queries_per_class_test == 0 {
            return Err(Error::Config("per-class sample counts must be positive".into()));
        }
        Ok(())
    }

    pub fn seen(&self) -> Vec<usize> {
        (0..self.seen_classes).collect()
    }

    pub fn unseen(&self) -> Vec<usize> {
        (self.seen_classes..self.num_classes).collect()
    }

    pub fn num_train(&self) -> usize {
        self.seen_classes * self.samples_per_class_train
    }

    pub fn num_corrupted(&self) -> usize {
        (self.corruption_rate * self.num_train() as f64).round() as usize
    }

    fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("num_classes", self.num_classes.to_string()),
            ("seen_classes", self.seen_classes.to_string()),
            ("samples_per_class_train", self.samples_per_class_train.to_string()),
            ("gallery_per_class_test", self.gallery_per_class_test.to_string()),
            ("queries_per_class_test", self.queries_per_class_test.to_string()),
            ("grid", self.grid.to_string()),
            ("corruption_rate", self.corruption_rate.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    /// `[grid × grid × 1]`, values in {0, 1}.
    pub sketch: Tensor,
    /// `[grid × grid × 1]`
    pub image: Tensor,
    pub class: usize,
    /// Class the image was drawn from; differs from `class` iff corrupted.
    pub image_class: usize,
    pub corrupted: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub data: Tensor,
    pub class: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub train: Vec<SamplePair>,
    /// Sketch queries of unseen classes.
    pub queries: Vec<LabeledSample>,
    /// Images of unseen classes.
    pub gallery: Vec<LabeledSample>,
}

impl Dataset {
    pub fn query_labels(&self) -> Vec<usize> {
        self.queries.iter().map(|s| s.class).collect()
    }

    pub fn gallery_labels(&self) -> Vec<usize> {
        self.gallery.iter().map(|s| s.class).collect()
    }
}

type Mask = Vec<f64>;

fn point_in_polygon(x: f64, y: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// 2–4 star-shaped filled polygons.
fn prototype(grid: usize, rng: &mut StreamRng) -> Mask {
    let g = grid as f64;
    let mut mask = vec![0.0; grid * grid];
    let count = rng.random_range(2..=4);
    for _ in 0..count {
        let r_max = rng.random_range(g / 8.0..g / 5.0);
        let cx = rng.random_range(r_max..g - r_max);
        let cy = rng.random_range(r_max..g - r_max);
        let sides = rng.random_range(3..=6);
        let mut angles: Vec<f64> = (0..sides).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
        angles.sort_by(f64::total_cmp);
        let poly: Vec<(f64, f64)> = angles
            .iter()
            .map(|a| {
                let r = r_max * rng.random_range(0.6..1.0);
                (cx + r * a.cos(), cy + r * a.sin())
            })
            .collect();
        for y in 0..grid {
            for x in 0..grid {
                if point_in_polygon(x as f64 + 0.5, y as f64 + 0.5, &poly) {
                    mask[y * grid + x] = 1.0;
                }
            }
        }
    }
    mask
}

/// Nearest-neighbour resampling of the mask under a rotation about the grid
/// centre followed by a shift.
fn jitter(mask: &Mask, grid: usize, rng: &mut StreamRng) -> Mask {
    let theta = rng.random_range(-10.0f64..=10.0).to_radians();
    let (tx, ty) = (rng.random_range(-2.0..=2.0), rng.random_range(-2.0..=2.0));
    let c = grid as f64 / 2.0;
    let (sin, cos) = theta.sin_cos();
    let mut out = vec![0.0; grid * grid];
    for y in 0..grid {
        for x in 0..grid {
            // Inverse map: undo the shift, then the rotation.
            let (dx, dy) = (x as f64 + 0.5 - c - tx, y as f64 + 0.5 - c - ty);
            let sx = cos * dx + sin * dy + c;
            let sy = -sin * dx + cos * dy + c;
            if sx >= 0.0 && sy >= 0.0 && (sx as usize) < grid && (sy as usize) < grid {
                out[y * grid + x] = mask[sy as usize * grid + sx as usize];
            }
        }
    }
    out
}

/// Binarized morphological gradient: pixels of the shape with at least one
/// 4-neighbour outside it.
fn edge_map(mask: &Mask, grid: usize) -> Mask {
    let at = |x: isize, y: isize| {
        if x < 0 || y < 0 || x >= grid as isize || y >= grid as isize {
            0.0
        } else {
            mask[y as usize * grid + x as usize]
        }
    };
    let mut out = vec![0.0; grid * grid];
    for y in 0..grid as isize {
        for x in 0..grid as isize {
            let v = at(x, y);
            let grad = [(1, 0), (-1, 0), (0, 1), (0, -1)]
                .iter()
                .map(|(ox, oy)| (v - at(x + ox, y + oy)).abs())
                .fold(0.0, f64::max);
            if v > 0.0 && grad > 0.0 {
                out[y as usize * grid + x as usize] = 1.0;
            }
        }
    }
    out
}

fn to_tensor(mut values: Vec<f64>, grid: usize) -> Tensor {
    Precision::F32.round_slice(&mut values);
    Tensor::new(vec![grid, grid, 1], values).expect("grid shape")
}

fn render_image(proto: &Mask, grid: usize, rng: &mut StreamRng) -> Tensor {
    let noise = Normal::new(0.0, 0.1).expect("valid std");
    let mut px: Vec<f64> = proto.iter().map(|&v| v + noise.sample(rng)).collect();
    for _ in 0..rng.random_range(0..=3) {
        let w = rng.random_range(2..=grid / 4);
        let h = rng.random_range(2..=grid / 4);
        let x0 = rng.random_range(0..=grid - w);
        let y0 = rng.random_range(0..=grid - h);
        let value = rng.random_range(0.3..1.0);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                px[y * grid + x] = value;
            }
        }
    }
    to_tensor(px, grid)
}

fn render_sketch(proto: &Mask, grid: usize, rng: &mut StreamRng) -> Tensor {
    to_tensor(edge_map(&jitter(proto, grid, rng), grid), grid)
}

/// Deterministic dataset for `config`.
pub fn generate(config: &DatasetConfig) -> Result<Dataset> {
    config.validate()?;
    let seeds = SeedTree::new(config.seed);
    let grid = config.grid;
    let protos: Vec<Mask> = (0..config.num_classes)
        .map(|c| prototype(grid, &mut seeds.indexed_stream("prototype", c as u64)))
        .collect();

    let mut corrupt_pick = seeds.stream("corruption");
    let n_train = config.num_train();
    let mut corrupted = vec![false; n_train];
    for i in rand::seq::index::sample(&mut corrupt_pick, n_train, config.num_corrupted()) {
        corrupted[i] = true;
    }

    let mut train = Vec::with_capacity(n_train);
    for (i, &is_corrupt) in corrupted.iter().enumerate() {
        let class = i / config.samples_per_class_train;
        let mut rng = seeds.indexed_stream("train", i as u64);
        let sketch = render_sketch(&protos[class], grid, &mut rng);
        let image_class = if is_corrupt {
            let other = rng.random_range(0..config.seen_classes - 1);
            if other >= class {
                other + 1
            } else {
                other
            }
        } else {
            class
        };
        let image = render_image(&protos[image_class], grid, &mut rng);
        train.push(SamplePair {
            sketch,
            image,
            class,
            image_class,
            corrupted: is_corrupt,
        });
    }

    let mut queries = Vec::new();
    let mut gallery = Vec::new();
    for (k, class) in config.unseen().into_iter().enumerate() {
        for j in 0..config.queries_per_class_test {
            let mut rng = seeds.indexed_stream("query", (k * config.queries_per_class_test + j) as u64);
            queries.push(LabeledSample {
                data: render_sketch(&protos[class], grid, &mut rng),
                class,
            });
        }
        for j in 0..config.gallery_per_class_test {
            let mut rng = seeds.indexed_stream("gallery", (k * config.gallery_per_class_test + j) as u64);
            gallery.push(LabeledSample {
                data: render_image(&protos[class], grid, &mut rng),
                class,
            });
        }
    }
    Ok(Dataset {
        config: config.clone(),
        train,
        queries,
        gallery,
    })
}

const FILES: [&str; 4] = ["train_sketch.bin", "train_image.bin", "test_query.bin", "test_gallery.bin"];

fn stack(samples: &[&Tensor], grid: usize) -> Result<Tensor> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("dataset split"));
    }
    let mut data = Vec::with_capacity(samples.len() * grid * grid);
    for s in samples {
        data.extend_from_slice(s.data());
    }
    Tensor::new(vec![samples.len(), grid, grid, 1], data)
}

fn unstack(t: &Tensor, grid: usize, expected: usize, file: &str) -> Result<Vec<Tensor>> {
    if t.shape() != [expected, grid, grid, 1] {
        return Err(Error::Format {
            offset: 12,
            msg: format!("{file} has shape {:?}, manifest implies [{expected}, {grid}, {grid}, 1]", t.shape()),
        });
    }
    Ok(t.data()
        .chunks_exact(grid * grid)
        .map(|c| Tensor::new(vec![grid, grid, 1], c.to_vec()).expect("grid shape"))
        .collect())
}

/// Writes `manifest` plus one tensor file per split and role.
pub fn save(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let cfg = &dataset.config;
    let mut manifest = String::from("format = 1\n");
    for (k, v) in cfg.pairs() {
        let _ = writeln!(manifest, "{k} = {v}");
    }
    for (i, p) in dataset.train.iter().enumerate() {
        let _ = writeln!(manifest, "record {i} train {} {} {}", p.class, p.image_class, p.corrupted as u8);
    }
    for (i, s) in dataset.queries.iter().enumerate() {
        let _ = writeln!(manifest, "record {i} query {} {} 0", s.class, s.class);
    }
    for (i, s) in dataset.gallery.iter().enumerate() {
        let _ = writeln!(manifest, "record {i} gallery {} {} 0", s.class, s.class);
    }
    let g = cfg.grid;
    let parts = [
        stack(&dataset.train.iter().map(|p| &p.sketch).collect::<Vec<_>>(), g)?,
        stack(&dataset.train.iter().map(|p| &p.image).collect::<Vec<_>>(), g)?,
        stack(&dataset.queries.iter().map(|s| &s.data).collect::<Vec<_>>(), g)?,
        stack(&dataset.gallery.iter().map(|s| &s.data).collect::<Vec<_>>(), g)?,
    ];
    for (t, file) in parts.iter().zip(FILES) {
        io::save(t, &dir.join(file))?;
    }
    fs::write(dir.join("manifest"), manifest)?;
    Ok(())
}

struct Record {
    role: String,
    class: usize,
    image_class: usize,
    corrupted: bool,
}

fn manifest_error(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format { offset, msg: format!("manifest: {}", msg.into()) }
}

fn parse_manifest(text: &str) -> Result<(DatasetConfig, Vec<Record>)> {
    let mut cfg = DatasetConfig::default();
    let mut records = Vec::new();
    let mut offset = 0;
    let mut saw_format = false;
    for line in text.lines() {
        let bad = |what: &str| manifest_error(offset, format!("{what} in line {line:?}"));
        if let Some(rest) = line.strip_prefix("record ") {
            let f: Vec<&str> = rest.split_whitespace().collect();
            if f.len() != 5 {
                return Err(bad("expected 5 record fields"));
            }
            let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad number"));
            records.push(Record {
                role: f[1].to_string(),
                class: num(f[2])?,
                image_class: num(f[3])?,
                corrupted: num(f[4])? == 1,
            });
        } else if let Some((k, v)) = line.split_once(" = ") {
            let num = || v.parse::<usize>().map_err(|_| bad("bad number"));
            match k {
                "format" => {
                    let version: u32 = v.parse().map_err(|_| bad("bad version"))?;
                    if version != 1 {
                        return Err(Error::UnsupportedVersion(version));
                    }
                    saw_format = true;
                }
                "num_classes" => cfg.num_classes = num()?,
                "seen_classes" => cfg.seen_classes = num()?,
                "samples_per_class_train" => cfg.samples_per_class_train = num()?,
                "gallery_per_class_test" => cfg.gallery_per_class_test = num()?,
                "queries_per_class_test" => cfg.queries_per_class_test = num()?,
                "grid" => cfg.grid = num()?,
                "corruption_rate" => cfg.corruption_rate = v.parse().map_err(|_| bad("bad rate"))?,
                "seed" => cfg.seed = v.parse().map_err(|_| bad("bad seed"))?,
                _ => return Err(bad("unknown key")),
            }
        } else if !line.trim().is_empty() {
            return Err(bad("unrecognized line"));
        }
        offset += line.len() + 1;
    }
    if !saw_format {
        return Err(manifest_error(0, "missing format line"));
    }
    cfg.validate()?;
    Ok((cfg, records))
}

/// Reads a dataset directory written by [`save`]. Any inconsistency is an
/// error; no partial dataset is returned.
pub fn load(dir: &Path) -> Result<Dataset> {
    let (config, records) = parse_manifest(&fs::read_to_string(dir.join("manifest"))?)?;
    let by_role = |role: &str| records.iter().filter(|r| r.role == role).collect::<Vec<_>>();
    let (train_r, query_r, gallery_r) = (by_role("train"), by_role("query"), by_role("gallery"));
    let g = config.grid;
    let mut tensors = Vec::with_capacity(4);
    for (file, n) in FILES.iter().zip([train_r.len(), train_r.len(), query_r.len(), gallery_r.len()]) {
        tensors.push(unstack(&io::load(&dir.join(file))?, g, n, file)?);
    }
    let mut tensors = tensors.into_iter();
    let (sketches, images, qs, gs) = (
        tensors.next().unwrap_or_default(),
        tensors.next().unwrap_or_default(),
        tensors.next().unwrap_or_default(),
        tensors.next().unwrap_or_default(),
    );
    let train = train_r
        .iter()
        .zip(sketches.into_iter().zip(images))
        .map(|(r, (sketch, image))| SamplePair {
            sketch,
            image,
            class: r.class,
            image_class: r.image_class,
            corrupted: r.corrupted,
        })
        .collect();
    let labeled = |rs: &[&Record], ts: Vec<Tensor>| {
        rs.iter()
            .zip(ts)
            .map(|(r, data)| LabeledSample { data, class: r.class })
            .collect()
    };
    Ok(Dataset {
        config,
        train,
        queries: labeled(&query_r, qs),
        gallery: labeled(&gallery_r, gs),
    })
}
