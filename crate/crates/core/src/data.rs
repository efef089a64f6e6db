//! Annotations, augmentation, cropping and batching.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::skeleton::{flip_permutation, FLIP_PAIRS, NUM_KEYPOINTS};
use crate::supervision::{build_targets, Keypoint, KeypointAnnotation, SigmaSchedule};
use crate::tensor::{Element, Shape, Tensor};

/// Crop side is `CROP_FACTOR · 200 · scale` pixels.
pub const CROP_FACTOR: f64 = 1.25;
pub const PERSON_BOX: f64 = 200.0;

/// Planar RGB image with values in `[0, 255]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; 3 * width * height],
        }
    }

    pub fn get(&self, c: usize, x: usize, y: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn put(&mut self, c: usize, x: usize, y: usize, v: f32) {
        let i = (c * self.height + y) * self.width + x;
        self.data[i] = v;
    }

    /// Bilinear sample with edge clamping; pixel `i` is centred on `i`.
    pub fn sample(&self, c: usize, x: f64, y: f64) -> f32 {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (fx, fy) = ((x - x0 as f64) as f32, (y - y0 as f64) as f32);
        let top = self.get(c, x0, y0) * (1.0 - fx) + self.get(c, x1, y0) * fx;
        let bottom = self.get(c, x0, y1) * (1.0 - fx) + self.get(c, x1, y1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Output pixel `(u, v)` takes the source value at `map(u, v)`.
    pub fn warp(&self, width: usize, height: usize, map: &Affine) -> Image {
        let mut out = Image::new(width, height);
        let plane = width * height;
        out.data
            .par_chunks_mut(width)
            .enumerate()
            .for_each(|(row, dst)| {
                let (c, v) = (row / height, row % height);
                for (u, d) in dst.iter_mut().enumerate() {
                    let (x, y) = map.apply(u as f64, v as f64);
                    *d = self.sample(c, x, y);
                }
            });
        debug_assert_eq!(out.data.len(), 3 * plane);
        out
    }

    /// `1×3×H×W` tensor scaled to `[−1, 1]`.
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        let data = self
            .data
            .iter()
            .map(|&v| T::of(v as f64 / 127.5 - 1.0))
            .collect();
        Tensor::from_vec(Shape::new(1, 3, self.height, self.width), data).expect("image dims")
    }

    pub fn load(path: &Path) -> Result<Image> {
        let img = image::open(path)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                msg: e.to_string(),
            })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Image::new(w, h);
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                out.put(c, x as usize, y as usize, p[c] as f32);
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut img = image::RgbImage::new(self.width as u32, self.height as u32);
        for (x, y, p) in img.enumerate_pixels_mut() {
            for c in 0..3 {
                p[c] = self
                    .get(c, x as usize, y as usize)
                    .round()
                    .clamp(0.0, 255.0) as u8;
            }
        }
        img.save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }
}

/// `(x, y) ↦ (a·x + b·y + c, d·x + e·y + f)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine(pub [f64; 6]);

impl Affine {
    pub const IDENTITY: Affine = Affine([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let [a, b, c, d, e, f] = self.0;
        (a * x + b * y + c, d * x + e * y + f)
    }

    /// `self` after `first`.
    pub fn after(&self, first: &Affine) -> Affine {
        let [a, b, c, d, e, f] = self.0;
        let [a2, b2, c2, d2, e2, f2] = first.0;
        Affine([
            a * a2 + b * d2,
            a * b2 + b * e2,
            a * c2 + b * f2 + c,
            d * a2 + e * d2,
            d * b2 + e * e2,
            d * c2 + e * f2 + f,
        ])
    }

    pub fn inverse(&self) -> Affine {
        let [a, b, c, d, e, f] = self.0;
        let det = a * e - b * d;
        let (ia, ib, id, ie) = (e / det, -b / det, -d / det, a / det);
        Affine([ia, ib, -(ia * c + ib * f), id, ie, -(id * c + ie * f)])
    }

    /// Uniform scale by `s` and rotation by `deg` degrees about `(cx, cy)`.
    pub fn scale_rotate(cx: f64, cy: f64, s: f64, deg: f64) -> Affine {
        let (sin, cos) = deg.to_radians().sin_cos();
        let (a, b, d, e) = (s * cos, -s * sin, s * sin, s * cos);
        Affine([a, b, cx - a * cx - b * cy, d, e, cy - d * cx - e * cy])
    }

    pub fn flip_x(width: usize) -> Affine {
        Affine([-1.0, 0.0, (width - 1) as f64, 0.0, 1.0, 0.0])
    }

    /// Source frame → square `res×res` crop about `center`.
    pub fn crop(center: (f64, f64), side: f64, res: usize) -> Affine {
        let k = res as f64 / side;
        let (ox, oy) = (center.0 - side / 2.0, center.1 - side / 2.0);
        Affine([k, 0.0, (0.5 - ox) * k - 0.5, 0.0, k, (0.5 - oy) * k - 0.5])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationConfig {
    pub flip_prob: f64,
    pub scale_range: (f64, f64),
    /// Degrees.
    pub rotation_range: (f64, f64),
    pub flip_pairs: Vec<(usize, usize)>,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            scale_range: (0.75, 1.25),
            rotation_range: (-45.0, 45.0),
            flip_pairs: FLIP_PAIRS.to_vec(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub scale: f64,
    pub rotation_deg: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        flip: false,
        scale: 1.0,
        rotation_deg: 0.0,
    };

    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentationConfig, rng: &mut R) -> Self {
        let uniform = |rng: &mut R, (lo, hi): (f64, f64)| lo + (hi - lo) * rng.random::<f64>();
        Self {
            flip: rng.random::<f64>() < cfg.flip_prob,
            scale: uniform(rng, cfg.scale_range),
            rotation_deg: uniform(rng, cfg.rotation_range),
        }
    }

    /// Affine of the augmentation for an image of the given width, and the
    /// transformed person centre.
    pub fn affine(&self, width: usize, center: (f64, f64)) -> (Affine, (f64, f64)) {
        let flip = if self.flip {
            Affine::flip_x(width)
        } else {
            Affine::IDENTITY
        };
        let c = flip.apply(center.0, center.1);
        let sr = Affine::scale_rotate(c.0, c.1, self.scale, self.rotation_deg);
        (sr.after(&flip), c)
    }
}

/// Move keypoints through `map`; swap ids when `flipped`; keypoints landing
/// outside `width×height` become invisible.
pub fn transform_keypoints(
    kps: &[Keypoint],
    map: &Affine,
    flipped: bool,
    pairs: &[(usize, usize)],
    width: usize,
    height: usize,
) -> Vec<Keypoint> {
    let moved: Vec<Keypoint> = kps
        .iter()
        .map(|k| {
            let (x, y) = map.apply(k.x, k.y);
            let inside =
                x >= -0.5 && y >= -0.5 && x < width as f64 - 0.5 && y < height as f64 - 0.5;
            Keypoint::new(x, y, k.visible && inside)
        })
        .collect();
    if !flipped {
        return moved;
    }
    flip_permutation(moved.len(), pairs)
        .into_iter()
        .map(|j| moved[j])
        .collect()
}

/// Apply flip, scale and rotation about the person centre as one affine
/// transform, keeping the image size.
pub fn augment(
    image: &Image,
    ann: &KeypointAnnotation,
    params: &AugmentParams,
    cfg: &AugmentationConfig,
) -> (Image, KeypointAnnotation) {
    let (map, center) = params.affine(image.width, ann.center);
    let out = image.warp(image.width, image.height, &map.inverse());
    let keypoints = transform_keypoints(
        &ann.keypoints,
        &map,
        params.flip,
        &cfg.flip_pairs,
        image.width,
        image.height,
    );
    let mut a = ann.clone();
    a.keypoints = keypoints;
    a.center = center;
    a.scale = ann.scale * params.scale;
    (out, a)
}

pub fn crop_side(ann: &KeypointAnnotation) -> f64 {
    CROP_FACTOR * PERSON_BOX * ann.scale
}

/// Source → model input frame, with optional augmentation applied first.
pub fn input_transform(
    ann: &KeypointAnnotation,
    width: usize,
    params: &AugmentParams,
    res: usize,
) -> Affine {
    let (aug, center) = params.affine(width, ann.center);
    Affine::crop(center, crop_side(ann), res).after(&aug)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetIndex {
    /// Directory that relative image paths are resolved against.
    pub root: PathBuf,
    pub records: Vec<KeypointAnnotation>,
    pub split: Split,
}

fn parse_f64(field: &str, what: &str, source: &str, line: usize) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|_| Error::Parse {
        source_name: source.into(),
        line,
        msg: format!("{what}: '{}' is not a number", field.trim()),
    })
}

/// Parse annotation text; see [`format_record`] for the field order.
pub fn parse_annotations(text: &str, source_name: &str) -> Result<Vec<KeypointAnnotation>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let f: Vec<&str> = body.split(',').collect();
        let want = 8 + 3 * NUM_KEYPOINTS;
        if f.len() != want {
            return Err(Error::Parse {
                source_name: source_name.into(),
                line,
                msg: format!("expected {want} fields, found {}", f.len()),
            });
        }
        let num = |j: usize, what: &str| parse_f64(f[j], what, source_name, line);
        let image = f[0].trim().to_string();
        if image.is_empty() {
            return Err(Error::Parse {
                source_name: source_name.into(),
                line,
                msg: "empty image path".into(),
            });
        }
        let scale = num(3, "scale")?;
        if !(scale > 0.0) {
            return Err(Error::Parse {
                source_name: source_name.into(),
                line,
                msg: format!("scale must be positive, got {scale}"),
            });
        }
        let mut keypoints = Vec::with_capacity(NUM_KEYPOINTS);
        for k in 0..NUM_KEYPOINTS {
            let b = 8 + 3 * k;
            let v = num(b + 2, "visibility")?;
            keypoints.push(Keypoint::new(num(b, "x")?, num(b + 1, "y")?, v > 0.0));
        }
        out.push(KeypointAnnotation {
            image,
            center: (num(1, "center_x")?, num(2, "center_y")?),
            scale,
            head_box: [
                num(4, "head_x1")?,
                num(5, "head_y1")?,
                num(6, "head_x2")?,
                num(7, "head_y2")?,
            ],
            keypoints,
        });
    }
    Ok(out)
}

/// `image, cx, cy, scale, hx1, hy1, hx2, hy2, (x, y, v) × 16`.
pub fn format_record(a: &KeypointAnnotation) -> String {
    let mut s = format!(
        "{},{},{},{},{},{},{},{}",
        a.image,
        a.center.0,
        a.center.1,
        a.scale,
        a.head_box[0],
        a.head_box[1],
        a.head_box[2],
        a.head_box[3]
    );
    for k in &a.keypoints {
        let _ = write!(s, ",{},{},{}", k.x, k.y, u8::from(k.visible));
    }
    s
}

pub fn load_annotations(path: &Path) -> Result<DatasetIndex> {
    let text = fs::read_to_string(path)?;
    let records = parse_annotations(&text, &path.display().to_string())?;
    Ok(DatasetIndex {
        root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        records,
        split: Split::Train,
    })
}

pub fn write_annotations(path: &Path, records: &[KeypointAnnotation]) -> Result<()> {
    let mut s = String::from("# image,cx,cy,scale,hx1,hy1,hx2,hy2,then x,y,v per keypoint\n");
    for r in records {
        s.push_str(&format_record(r));
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

impl DatasetIndex {
    pub fn image_path(&self, rec: &KeypointAnnotation) -> PathBuf {
        self.root.join(&rec.image)
    }

    /// Drop records whose image file is missing; returns the dropped paths.
    pub fn retain_existing(&mut self) -> Vec<PathBuf> {
        let mut missing = Vec::new();
        let root = self.root.clone();
        self.records.retain(|r| {
            let p = root.join(&r.image);
            let ok = p.is_file();
            if !ok {
                missing.push(p);
            }
            ok
        });
        missing
    }

    /// Seeded shuffle into train and validation parts.
    pub fn split(&self, val_count: usize, seed: u64) -> (DatasetIndex, DatasetIndex) {
        use rand::seq::SliceRandom;
        let mut order: Vec<usize> = (0..self.records.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let val_count = val_count.min(order.len());
        let pick = |ids: &[usize], split| DatasetIndex {
            root: self.root.clone(),
            records: ids.iter().map(|&i| self.records[i].clone()).collect(),
            split,
        };
        (
            pick(&order[val_count..], Split::Train),
            pick(&order[..val_count], Split::Val),
        )
    }
}

/// Records plus their images, either in memory or read on demand.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub index: DatasetIndex,
    images: Option<Vec<Image>>,
}

impl Dataset {
    pub fn on_disk(index: DatasetIndex) -> Self {
        Self {
            index,
            images: None,
        }
    }

    pub fn in_memory(index: DatasetIndex, images: Vec<Image>) -> Result<Self> {
        if images.len() != index.records.len() {
            return Err(Error::InvalidArgument(format!(
                "{} images for {} records",
                images.len(),
                index.records.len()
            )));
        }
        Ok(Self {
            index,
            images: Some(images),
        })
    }

    /// Read every image now.
    pub fn preload(index: DatasetIndex) -> Result<Self> {
        let images = index
            .records
            .par_iter()
            .map(|r| Image::load(&index.image_path(r)))
            .collect::<Result<Vec<_>>>()?;
        Self::in_memory(index, images)
    }

    pub fn len(&self) -> usize {
        self.index.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.records.is_empty()
    }

    pub fn image(&self, i: usize) -> Result<std::borrow::Cow<'_, Image>> {
        match &self.images {
            Some(v) => Ok(std::borrow::Cow::Borrowed(&v[i])),
            None => Ok(std::borrow::Cow::Owned(Image::load(
                &self.index.image_path(&self.index.records[i]),
            )?)),
        }
    }

    pub fn record(&self, i: usize) -> &KeypointAnnotation {
        &self.index.records[i]
    }

    pub fn save(&self, dir: &Path, annotation_file: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        for i in 0..self.len() {
            let p = dir.join(&self.index.records[i].image);
            if let Some(parent) = p.parent() {
                fs::create_dir_all(parent)?;
            }
            self.image(i)?.save(&p)?;
        }
        write_annotations(&dir.join(annotation_file), &self.index.records)
    }
}

/// Input crop and keypoints in the model frame for record `i`.
pub fn prepare_sample<T: Element>(
    data: &Dataset,
    i: usize,
    res: usize,
    params: &AugmentParams,
    cfg: &AugmentationConfig,
) -> Result<(Tensor<T>, KeypointAnnotation, Affine)> {
    let img = data.image(i)?;
    let ann = data.record(i);
    let map = input_transform(ann, img.width, params, res);
    let crop = img.warp(res, res, &map.inverse());
    let mut a = ann.clone();
    a.keypoints = transform_keypoints(&ann.keypoints, &map, params.flip, &cfg.flip_pairs, res, res);
    a.center = map.apply(ann.center.0, ann.center.1);
    Ok((crop.to_tensor(), a, map))
}

pub struct Batch<T: Element> {
    /// `N×3×R×R`.
    pub images: Tensor<T>,
    /// One `N×ch×h×w` tensor per supervised head, in head order.
    pub targets: Vec<Tensor<T>>,
    pub annotations: Vec<KeypointAnnotation>,
    pub sigma: f64,
}

/// Per-record generator, independent of thread scheduling.
pub fn sample_rng(seed: u64, epoch: usize, record: usize) -> ChaCha8Rng {
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(record as u64);
    rng
}

#[allow(clippy::too_many_arguments)]
pub fn make_batch<T: Element>(
    data: &Dataset,
    records: &[usize],
    model: &ModelGraph,
    aug: Option<&AugmentationConfig>,
    schedule: &SigmaSchedule,
    paf_width: f64,
    seed: u64,
    epoch: f64,
) -> Result<Batch<T>> {
    if data.is_empty() || records.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot build a batch from an empty dataset".into(),
        ));
    }
    let res = model.config.high_res;
    let default_cfg = AugmentationConfig::default();
    let cfg = aug.unwrap_or(&default_cfg);
    let items: Vec<_> = records
        .par_iter()
        .map(|&i| {
            if i >= data.len() {
                return Err(Error::InvalidArgument(format!("record {i} out of range")));
            }
            let params = match aug {
                Some(c) => AugmentParams::sample(c, &mut sample_rng(seed, epoch as usize, i)),
                None => AugmentParams::IDENTITY,
            };
            let (img, ann, _) = prepare_sample::<T>(data, i, res, &params, cfg)?;
            let targets = build_targets::<T>(&ann, model, schedule, paf_width, epoch)?;
            Ok((img, ann, targets))
        })
        .collect::<Result<Vec<_>>>()?;
    let images = Tensor::stack(&items.iter().map(|(i, _, _)| i.clone()).collect::<Vec<_>>())?;
    let mut targets = Vec::with_capacity(model.heads.len());
    for h in 0..model.heads.len() {
        let per: Vec<Tensor<T>> = items.iter().map(|(_, _, t)| t[h].maps.clone()).collect();
        targets.push(Tensor::stack(&per)?);
    }
    let sigma = schedule.reference_sigma(epoch)?;
    Ok(Batch {
        images,
        targets,
        annotations: items.into_iter().map(|(_, a, _)| a).collect(),
        sigma,
    })
}

/// Distinct colour per keypoint for synthetic renders.
pub const PALETTE: [[f32; 3]; NUM_KEYPOINTS] = [
    [230.0, 25.0, 75.0],
    [60.0, 180.0, 75.0],
    [255.0, 225.0, 25.0],
    [0.0, 130.0, 200.0],
    [245.0, 130.0, 48.0],
    [145.0, 30.0, 180.0],
    [70.0, 240.0, 240.0],
    [240.0, 50.0, 230.0],
    [210.0, 245.0, 60.0],
    [250.0, 190.0, 212.0],
    [0.0, 128.0, 128.0],
    [220.0, 190.0, 255.0],
    [170.0, 110.0, 40.0],
    [255.0, 250.0, 200.0],
    [128.0, 0.0, 0.0],
    [255.0, 255.0, 255.0],
];

/// `n` square images of side `res`, each with one coloured disk per
/// keypoint on a black background. The person crop covers the whole image.
pub fn synthetic_dataset(n: usize, res: usize, seed: u64) -> Result<Dataset> {
    if res < 32 {
        return Err(Error::InvalidArgument(format!(
            "synthetic images need res >= 32, got {res}"
        )));
    }
    let radius = (res as f64 / 32.0).max(2.0);
    let margin = 0.12 * res as f64;
    let head = res as f64 / 8.0;
    let mut records = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n {
        let mut pts: Vec<(f64, f64)> = Vec::with_capacity(NUM_KEYPOINTS);
        while pts.len() < NUM_KEYPOINTS {
            let p = (
                margin + rng.random::<f64>() * (res as f64 - 2.0 * margin),
                margin + rng.random::<f64>() * (res as f64 - 2.0 * margin),
            );
            if pts
                .iter()
                .all(|q| (q.0 - p.0).hypot(q.1 - p.1) > 3.0 * radius)
            {
                pts.push(p);
            }
        }
        let mut img = Image::new(res, res);
        for (k, &(px, py)) in pts.iter().enumerate() {
            for y in 0..res {
                for x in 0..res {
                    if (x as f64 - px).hypot(y as f64 - py) <= radius {
                        for c in 0..3 {
                            img.put(c, x, y, PALETTE[k][c]);
                        }
                    }
                }
            }
        }
        let (hx, hy) = ((pts[8].0 + pts[9].0) / 2.0, (pts[8].1 + pts[9].1) / 2.0);
        records.push(KeypointAnnotation {
            image: format!("synthetic_{i:04}.png"),
            center: (res as f64 / 2.0, res as f64 / 2.0),
            scale: res as f64 / (CROP_FACTOR * PERSON_BOX),
            head_box: [
                hx - head / 2.0,
                hy - head / 2.0,
                hx + head / 2.0,
                hy + head / 2.0,
            ],
            keypoints: pts
                .iter()
                .map(|&(x, y)| Keypoint::new(x, y, true))
                .collect(),
        });
        images.push(img);
    }
    Dataset::in_memory(
        DatasetIndex {
            root: PathBuf::new(),
            records,
            split: Split::Train,
        },
        images,
    )
}
