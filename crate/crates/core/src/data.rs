//! Deterministic synthetic image-classification data and the FSCIL task
//! split, plus the ASPD v1 on-disk format.
//!
//! Each class is a procedural texture family: two oriented sinusoidal
//! gratings with class-specific frequency, orientation and color, mixed and
//! jittered per sample. The phase is fully random per sample, so raw-pixel
//! class centroids wash out to gray and a nearest-centroid baseline stays
//! near chance while the texture parameters remain learnable.

use crate::error::{CoreError, Result};
use crate::rng::{tag, RootSeed};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DataConfig {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    pub channels: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            num_classes: 52,
            train_per_class: 30,
            test_per_class: 10,
            image_size: 32,
            channels: 3,
        }
    }
}

impl DataConfig {
    pub fn per_class(&self) -> usize {
        self.train_per_class + self.test_per_class
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(CoreError::config("class and per-class counts must be >= 1"));
        }
        if self.image_size == 0 || self.channels == 0 {
            return Err(CoreError::config("image geometry must be positive"));
        }
        Ok(())
    }
}

/// Labeled image set; images are H*W*C f32 in [0,1], row-major,
/// channel-last, stored class-major.
#[derive(Debug)]
pub struct Dataset {
    images: Vec<f32>,
    labels: Vec<u32>,
    pub num_classes: u32,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    read_counts: Option<Arc<Vec<AtomicU64>>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_dim(&self) -> usize {
        self.height * self.width * self.channels
    }

    /// Pixel data of one sample. Counted when instrumentation is enabled.
    pub fn image(&self, i: usize) -> &[f32] {
        if let Some(counts) = &self.read_counts {
            counts[i].fetch_add(1, Ordering::Relaxed);
        }
        let d = self.sample_dim();
        &self.images[i * d..(i + 1) * d]
    }

    pub fn label(&self, i: usize) -> u32 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// Turn on per-sample read counting (for rehearsal-free audits).
    pub fn enable_instrumentation(&mut self) {
        self.read_counts = Some(Arc::new(
            (0..self.len()).map(|_| AtomicU64::new(0)).collect(),
        ));
    }

    pub fn read_count(&self, i: usize) -> u64 {
        self.read_counts
            .as_ref()
            .map_or(0, |c| c[i].load(Ordering::Relaxed))
    }

    pub fn bits_eq(&self, other: &Dataset) -> bool {
        self.labels == other.labels
            && self.num_classes == other.num_classes
            && self.seed == other.seed
            && (self.height, self.width, self.channels)
                == (other.height, other.width, other.channels)
            && self.images.len() == other.images.len()
            && self
                .images
                .iter()
                .zip(&other.images)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Texture motif families. Classes draw one of four structurally distinct
/// generators, so a pretraining split of 20 random classes does not span
/// the space the incremental classes live in.
#[derive(Clone, Copy)]
enum Motif {
    Gratings,
    Bars,
    Checker,
    Rings,
}

struct ClassTexture {
    motif: Motif,
    theta1: f64,
    freq1: f64,
    theta2: f64,
    freq2: f64,
    mix: f64,
    center: (f64, f64),
    color1: Vec<f64>,
    color2: Vec<f64>,
}

fn class_texture(seed: u64, class: usize, channels: usize) -> ClassTexture {
    let mut s = RootSeed(seed).stream(&[tag::DATA_CLASS, class as u64]);
    let motif = match s.below(4) {
        0 => Motif::Gratings,
        1 => Motif::Bars,
        2 => Motif::Checker,
        _ => Motif::Rings,
    };
    let theta1 = s.uniform(0.0, std::f64::consts::PI);
    ClassTexture {
        motif,
        theta1,
        freq1: s.uniform(1.5, 5.5),
        theta2: theta1 + std::f64::consts::FRAC_PI_2 + s.uniform(-0.35, 0.35),
        freq2: s.uniform(2.5, 6.5),
        mix: s.uniform(0.3, 0.7),
        center: (s.uniform(0.25, 0.75), s.uniform(0.25, 0.75)),
        color1: (0..channels).map(|_| s.uniform(0.35, 1.0)).collect(),
        color2: (0..channels).map(|_| s.uniform(0.35, 1.0)).collect(),
    }
}

fn render_sample(seed: u64, global_index: usize, tex: &ClassTexture, cfg: &DataConfig) -> Vec<f32> {
    let mut s = RootSeed(seed).stream(&[tag::DATA_SAMPLE, global_index as u64]);
    let phi1 = s.uniform(0.0, std::f64::consts::TAU);
    let phi2 = s.uniform(0.0, std::f64::consts::TAU);
    let dtheta = s.normal_scaled(0.0, 0.03);
    let f1 = tex.freq1 * (1.0 + s.normal_scaled(0.0, 0.04));
    let f2 = tex.freq2 * (1.0 + s.normal_scaled(0.0, 0.04));
    let amp = s.uniform(0.30, 0.42);
    let (sz, ch) = (cfg.image_size, cfg.channels);
    let (c1, s1) = ((tex.theta1 + dtheta).cos(), (tex.theta1 + dtheta).sin());
    let (c2, s2) = (tex.theta2.cos(), tex.theta2.sin());
    let inv = 1.0 / sz as f64;
    let tau = std::f64::consts::TAU;
    let mut out = Vec::with_capacity(sz * sz * ch);
    for y in 0..sz {
        for x in 0..sz {
            let u1 = (x as f64 * c1 + y as f64 * s1) * inv;
            let u2 = (x as f64 * c2 + y as f64 * s2) * inv;
            let g1 = (tau * f1 * u1 + phi1).sin();
            let g2 = (tau * f2 * u2 + phi2).sin();
            let (b1, b2) = match tex.motif {
                Motif::Gratings => (g1, g2),
                // rectified bars: phase-shift invariant edge structure
                Motif::Bars => (2.0 * (g1.abs() - 0.5), g2),
                // multiplicative interference lattice
                Motif::Checker => (g1 * g2, g1),
                // concentric rings around a per-class center
                Motif::Rings => {
                    let dx = x as f64 * inv - tex.center.0;
                    let dy = y as f64 * inv - tex.center.1;
                    let r = (dx * dx + dy * dy).sqrt();
                    ((tau * f1 * 2.0 * r + phi1).sin(), g2)
                }
            };
            for c in 0..ch {
                let v = 0.5
                    + amp * (tex.color1[c] * b1 + tex.mix * tex.color2[c] * b2)
                    + s.normal_scaled(0.0, 0.03);
                out.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    out
}

/// Deterministic dataset generation; identical (config, seed) pairs produce
/// bitwise-identical datasets.
pub fn generate(cfg: &DataConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let per_class = cfg.per_class();
    let n = cfg.num_classes * per_class;
    let dim = cfg.image_size * cfg.image_size * cfg.channels;
    let textures: Vec<ClassTexture> = (0..cfg.num_classes)
        .map(|k| class_texture(seed, k, cfg.channels))
        .collect();
    use rayon::prelude::*;
    let images: Vec<Vec<f32>> = (0..n)
        .into_par_iter()
        .map(|gi| render_sample(seed, gi, &textures[gi / per_class], cfg))
        .collect();
    let mut flat = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (gi, img) in images.into_iter().enumerate() {
        flat.extend_from_slice(&img);
        labels.push((gi / per_class) as u32);
    }
    Ok(Dataset {
        images: flat,
        labels,
        num_classes: cfg.num_classes as u32,
        seed,
        height: cfg.image_size,
        width: cfg.image_size,
        channels: cfg.channels,
        read_counts: None,
    })
}

/// Raw-pixel nearest-centroid baseline (L2 distance). The synthetic classes
/// are built so this stays far below a trained model.
pub fn pixel_centroid_accuracy(
    data: &Dataset,
    train: &[usize],
    test: &[usize],
) -> f64 {
    use std::collections::BTreeMap;
    let dim = data.sample_dim();
    let mut sums: BTreeMap<u32, (Vec<f64>, usize)> = BTreeMap::new();
    for &i in train {
        let e = sums
            .entry(data.label(i))
            .or_insert_with(|| (vec![0.0; dim], 0));
        for (a, &v) in e.0.iter_mut().zip(data.image(i)) {
            *a += v as f64;
        }
        e.1 += 1;
    }
    let centroids: Vec<(u32, Vec<f64>)> = sums
        .into_iter()
        .map(|(k, (s, n))| (k, s.into_iter().map(|v| v / n as f64).collect()))
        .collect();
    let mut correct = 0usize;
    for &i in test {
        let img = data.image(i);
        let mut best = centroids[0].0;
        let mut best_d = f64::MAX;
        for (k, c) in &centroids {
            let d: f64 = c
                .iter()
                .zip(img)
                .map(|(&a, &b)| (a - b as f64).powi(2))
                .sum();
            if d < best_d {
                best_d = d;
                best = *k;
            }
        }
        if best == data.label(i) {
            correct += 1;
        }
    }
    correct as f64 / test.len() as f64
}

// ---------------------------------------------------------------------------
// FSCIL split
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SplitConfig {
    pub pretrain_classes: usize,
    pub base_classes: usize,
    pub ways: usize,
    pub shots: usize,
    pub tasks: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            pretrain_classes: 20,
            base_classes: 12,
            ways: 4,
            shots: 5,
            tasks: 5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IncTask {
    pub classes: Vec<u32>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// The full task layout: a pretraining split (backbone only), a data-rich
/// base task, and N-way K-shot incremental tasks, all with disjoint labels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskStream {
    pub pretrain_classes: Vec<u32>,
    pub base_classes: Vec<u32>,
    pub pretrain_train: Vec<usize>,
    pub pretrain_test: Vec<usize>,
    pub base_train: Vec<usize>,
    pub base_test: Vec<usize>,
    pub tasks: Vec<IncTask>,
}

impl TaskStream {
    /// Test indices covering every class of tasks 0..=t.
    pub fn test_through(&self, t: usize) -> Vec<usize> {
        let mut out = self.base_test.clone();
        for task in self.tasks.iter().take(t) {
            out.extend_from_slice(&task.test);
        }
        out
    }

    pub fn all_label_spaces(&self) -> Vec<&[u32]> {
        let mut out = vec![
            self.pretrain_classes.as_slice(),
            self.base_classes.as_slice(),
        ];
        out.extend(self.tasks.iter().map(|t| t.classes.as_slice()));
        out
    }

    pub fn assert_disjoint(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for space in self.all_label_spaces() {
            for &c in space {
                if !seen.insert(c) {
                    return Err(CoreError::contract(format!(
                        "class {c} appears in more than one task"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Deterministic class assignment (seeded shuffle) and K-shot sampling
/// without replacement.
pub fn split_fscil(
    data: &Dataset,
    data_cfg: &DataConfig,
    split: &SplitConfig,
    seed: u64,
) -> Result<TaskStream> {
    let c = data.num_classes as usize;
    let need = split.pretrain_classes + split.base_classes + split.ways * split.tasks;
    if need > c {
        return Err(CoreError::config(format!(
            "split needs {need} classes but dataset has {c}"
        )));
    }
    if split.base_classes == 0 || split.pretrain_classes == 0 {
        return Err(CoreError::config("pretrain and base class counts must be >= 1"));
    }
    if split.shots == 0 || split.shots > data_cfg.train_per_class {
        return Err(CoreError::config(format!(
            "shots {} must lie in 1..={}",
            split.shots, data_cfg.train_per_class
        )));
    }

    // per-class sample pools, in sample-index order
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, &l) in data.labels().iter().enumerate() {
        pools[l as usize].push(i);
    }
    for (k, pool) in pools.iter().enumerate() {
        if pool.len() < data_cfg.per_class() {
            return Err(CoreError::config(format!(
                "class {k} has {} samples, need {}",
                pool.len(),
                data_cfg.per_class()
            )));
        }
    }
    let train_pool = |k: usize| &pools[k][..data_cfg.train_per_class];
    let test_pool =
        |k: usize| &pools[k][data_cfg.train_per_class..data_cfg.per_class()];

    let mut order: Vec<usize> = (0..c).collect();
    RootSeed(seed).stream(&[tag::SPLIT]).shuffle(&mut order);

    let take = |order: &[usize], from: usize, n: usize| -> Vec<u32> {
        order[from..from + n].iter().map(|&k| k as u32).collect()
    };
    let pretrain_classes = take(&order, 0, split.pretrain_classes);
    let base_classes = take(&order, split.pretrain_classes, split.base_classes);

    let collect_train = |classes: &[u32]| -> Vec<usize> {
        classes
            .iter()
            .flat_map(|&k| train_pool(k as usize).iter().copied())
            .collect()
    };
    let collect_test = |classes: &[u32]| -> Vec<usize> {
        classes
            .iter()
            .flat_map(|&k| test_pool(k as usize).iter().copied())
            .collect()
    };

    let mut tasks = Vec::with_capacity(split.tasks);
    let mut cursor = split.pretrain_classes + split.base_classes;
    for t in 0..split.tasks {
        let classes = take(&order, cursor, split.ways);
        cursor += split.ways;
        let mut train = Vec::with_capacity(split.ways * split.shots);
        for &k in &classes {
            let pool = train_pool(k as usize);
            let mut s = RootSeed(seed).stream(&[tag::SPLIT, (t + 1) as u64, k as u64]);
            let mut picked: Vec<usize> = s
                .choose_indices(pool.len(), split.shots)
                .into_iter()
                .map(|j| pool[j])
                .collect();
            picked.sort_unstable();
            train.extend(picked);
        }
        tasks.push(IncTask {
            test: collect_test(&classes),
            classes,
            train,
        });
    }

    let stream = TaskStream {
        pretrain_train: collect_train(&pretrain_classes),
        pretrain_test: collect_test(&pretrain_classes),
        base_train: collect_train(&base_classes),
        base_test: collect_test(&base_classes),
        pretrain_classes,
        base_classes,
        tasks,
    };
    stream.assert_disjoint()?;
    Ok(stream)
}

/// Sidecar JSON describing a task stream (class assignments + shot indices).
#[derive(Debug, Serialize, Deserialize)]
pub struct SplitSidecar {
    pub seed: u64,
    pub split: SplitConfig,
    pub stream: TaskStream,
}

pub fn write_sidecar(path: &Path, seed: u64, split: &SplitConfig, stream: &TaskStream) -> Result<()> {
    let sidecar = SplitSidecar {
        seed,
        split: split.clone(),
        stream: stream.clone(),
    };
    let json = serde_json::to_string_pretty(&sidecar)
        .map_err(|e| CoreError::config(format!("sidecar serialization: {e}")))?;
    std::fs::write(path, json)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// ASPD v1 binary format
// ---------------------------------------------------------------------------
//
// bytes 0-3: magic "ASPD"; then little-endian u32 fields: version=1, N, H,
// W, C, num_classes, seed-low, seed-high; then N records of (u32 label,
// H*W*C float32 pixels).

const ASPD_MAGIC: &[u8; 4] = b"ASPD";
const ASPD_VERSION: u32 = 1;

pub fn save_aspd(data: &Dataset, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(36 + data.len() * (4 + data.sample_dim() * 4));
    buf.extend_from_slice(ASPD_MAGIC);
    for v in [
        ASPD_VERSION,
        data.len() as u32,
        data.height as u32,
        data.width as u32,
        data.channels as u32,
        data.num_classes,
        (data.seed & 0xffff_ffff) as u32,
        (data.seed >> 32) as u32,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let dim = data.sample_dim();
    for i in 0..data.len() {
        buf.extend_from_slice(&data.labels[i].to_le_bytes());
        for &px in &data.images[i * dim..(i + 1) * dim] {
            buf.extend_from_slice(&px.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: u64,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos as usize + n > self.buf.len() {
            return Err(CoreError::format(
                self.pos,
                format!(
                    "truncated: need {n} bytes for {what}, {} remain",
                    self.buf.len() - self.pos as usize
                ),
            ));
        }
        let s = &self.buf[self.pos as usize..self.pos as usize + n];
        self.pos += n as u64;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, "pixel")?.try_into().unwrap()))
    }
}

pub fn load_aspd(path: &Path) -> Result<Dataset> {
    let mut raw = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut raw)?;
    let mut cur = Cursor { buf: &raw, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != ASPD_MAGIC {
        return Err(CoreError::format(0, format!("bad magic {magic:?}, expected ASPD")));
    }
    let version = cur.u32("version")?;
    if version != ASPD_VERSION {
        return Err(CoreError::format(4, format!("unsupported version {version}")));
    }
    let n = cur.u32("sample count")? as usize;
    let h = cur.u32("height")? as usize;
    let w = cur.u32("width")? as usize;
    let c = cur.u32("channels")? as usize;
    let num_classes = cur.u32("num_classes")?;
    let seed_lo = cur.u32("seed low")? as u64;
    let seed_hi = cur.u32("seed high")? as u64;
    let dim = h * w * c;
    let mut labels = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n * dim);
    for i in 0..n {
        let label = cur.u32("label")?;
        if label >= num_classes {
            return Err(CoreError::format(
                cur.pos - 4,
                format!("sample {i}: label {label} >= num_classes {num_classes}"),
            ));
        }
        labels.push(label);
        for _ in 0..dim {
            images.push(cur.f32()?);
        }
    }
    if (cur.pos as usize) != raw.len() {
        return Err(CoreError::format(
            cur.pos,
            format!("{} trailing bytes after payload", raw.len() - cur.pos as usize),
        ));
    }
    Ok(Dataset {
        images,
        labels,
        num_classes,
        seed: (seed_hi << 32) | seed_lo,
        height: h,
        width: w,
        channels: c,
        read_counts: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> DataConfig {
        DataConfig {
            num_classes: 6,
            train_per_class: 8,
            test_per_class: 4,
            image_size: 16,
            channels: 3,
        }
    }

    #[test]
    fn same_seed_bitwise_identical() {
        let cfg = small_cfg();
        let a = generate(&cfg, 9).unwrap();
        let b = generate(&cfg, 9).unwrap();
        assert!(a.bits_eq(&b));
        let c = generate(&cfg, 10).unwrap();
        assert!(!a.bits_eq(&c));
    }

    #[test]
    fn sample_count_arithmetic() {
        let cfg = DataConfig {
            num_classes: 40,
            train_per_class: 80,
            test_per_class: 20,
            image_size: 8,
            channels: 1,
        };
        let d = generate(&cfg, 1).unwrap();
        assert_eq!(d.len(), 4000);
        assert!(d.labels().iter().all(|&l| l < 40));
        // every class nonempty
        for k in 0..40u32 {
            assert!(d.labels().iter().any(|&l| l == k));
        }
    }

    #[test]
    fn pixels_in_unit_range() {
        let d = generate(&small_cfg(), 3).unwrap();
        assert!(d.image(0).iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(d.image(d.len() - 1).iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn centroid_baseline_is_weak() {
        // random per-sample phase makes pixel centroids nearly class-agnostic
        let cfg = DataConfig {
            num_classes: 5,
            train_per_class: 30,
            test_per_class: 10,
            image_size: 16,
            channels: 3,
        };
        let d = generate(&cfg, 4).unwrap();
        let split = SplitConfig {
            pretrain_classes: 1,
            base_classes: 4,
            ways: 0,
            shots: 1,
            tasks: 0,
        };
        let stream = split_fscil(&d, &cfg, &split, 4).unwrap();
        let acc = pixel_centroid_accuracy(&d, &stream.base_train, &stream.base_test);
        assert!(acc < 0.7, "centroid baseline unexpectedly strong: {acc}");
    }

    #[test]
    fn split_disjoint_and_shot_counts() {
        let cfg = DataConfig {
            num_classes: 52,
            train_per_class: 10,
            test_per_class: 4,
            image_size: 8,
            channels: 1,
        };
        let d = generate(&cfg, 7).unwrap();
        let split = SplitConfig::default(); // P=20 B=12 N=4 K=5 T=5
        let stream = split_fscil(&d, &cfg, &split, 7).unwrap();
        stream.assert_disjoint().unwrap();
        assert_eq!(stream.pretrain_classes.len(), 20);
        assert_eq!(stream.base_classes.len(), 12);
        assert_eq!(stream.tasks.len(), 5);
        for task in &stream.tasks {
            assert_eq!(task.classes.len(), 4);
            assert_eq!(task.train.len(), 4 * 5);
            // exactly K shots per class, no repeats
            let mut by_class = std::collections::HashMap::new();
            for &i in &task.train {
                *by_class.entry(d.label(i)).or_insert(0usize) += 1;
            }
            assert!(by_class.values().all(|&n| n == 5));
            let mut uniq = task.train.clone();
            uniq.sort_unstable();
            uniq.dedup();
            assert_eq!(uniq.len(), task.train.len());
        }
        // test set after task t covers all classes of tasks 0..t
        let t2 = stream.test_through(2);
        let mut classes: std::collections::HashSet<u32> =
            t2.iter().map(|&i| d.label(i)).collect();
        for &c in stream.base_classes.iter() {
            assert!(classes.remove(&c));
        }
        for task in stream.tasks.iter().take(2) {
            for &c in &task.classes {
                assert!(classes.remove(&c));
            }
        }
        assert!(classes.is_empty());
    }

    #[test]
    fn degenerate_split_base_only() {
        let cfg = small_cfg();
        let d = generate(&cfg, 2).unwrap();
        let split = SplitConfig {
            pretrain_classes: 2,
            base_classes: 3,
            ways: 0,
            shots: 1,
            tasks: 0,
        };
        let stream = split_fscil(&d, &cfg, &split, 2).unwrap();
        assert!(stream.tasks.is_empty());
        assert_eq!(stream.base_classes.len(), 3);
    }

    #[test]
    fn insufficient_classes_rejected() {
        let cfg = small_cfg();
        let d = generate(&cfg, 2).unwrap();
        let split = SplitConfig {
            pretrain_classes: 4,
            base_classes: 4,
            ways: 2,
            shots: 1,
            tasks: 3,
        };
        assert!(matches!(
            split_fscil(&d, &cfg, &split, 2),
            Err(CoreError::Config(_))
        ));
    }

    #[test]
    fn aspd_roundtrip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.aspd");
        let d = generate(&small_cfg(), 11).unwrap();
        save_aspd(&d, &path).unwrap();
        let back = load_aspd(&path).unwrap();
        assert!(d.bits_eq(&back));
    }

    #[test]
    fn corrupted_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.aspd");
        let d = generate(&small_cfg(), 12).unwrap();
        save_aspd(&d, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        match load_aspd(&path) {
            Err(CoreError::Format { offset, msg }) => {
                assert_eq!(offset, 0);
                assert!(msg.contains("magic"));
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_names_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.aspd");
        let d = generate(&small_cfg(), 13).unwrap();
        save_aspd(&d, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        match load_aspd(&path) {
            Err(CoreError::Format { msg, .. }) => assert!(msg.contains("truncated")),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn instrumentation_counts_reads() {
        let mut d = generate(&small_cfg(), 14).unwrap();
        d.enable_instrumentation();
        assert_eq!(d.read_count(3), 0);
        let _ = d.image(3);
        let _ = d.image(3);
        assert_eq!(d.read_count(3), 2);
        assert_eq!(d.read_count(4), 0);
    }

    #[test]
    fn sidecar_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg();
        let d = generate(&cfg, 15).unwrap();
        let split = SplitConfig {
            pretrain_classes: 2,
            base_classes: 2,
            ways: 1,
            shots: 2,
            tasks: 2,
        };
        let stream = split_fscil(&d, &cfg, &split, 15).unwrap();
        let path = dir.path().join("toy.split.json");
        write_sidecar(&path, 15, &split, &stream).unwrap();
        let parsed: SplitSidecar =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(parsed.seed, 15);
        assert_eq!(parsed.stream.base_classes, stream.base_classes);
        assert_eq!(parsed.stream.tasks[1].train, stream.tasks[1].train);
    }
}
