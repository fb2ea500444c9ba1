//! Synthetic volumes with shared partition structure.
//!
//! Every slice mixes a partition template shared by all subjects with a
//! per-subject pattern, plus pixel noise:
//!
//! ```text
//! slice(i, s) = clamp(strength·template(s) + (1 − strength)·subject(i) + N(0, σ²), 0, 1)
//! ```
//!
//! so the same partition looks alike across subjects, which is the premise the
//! structural positives rely on. Templates and subject patterns are smooth
//! low-frequency fields: each template is its own field plus anatomy shared by
//! all partitions, decorrelated so that partitions share nothing else, and each
//! subject is a per-client site field plus individual texture. Raw slices stay
//! inside [`ClientShard`]; only encoded [`crate::contrastive::Feature`]s ever
//! leave a client.

use std::io::{Read, Write};
use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::codec;
use crate::contrastive::{ClientId, PartitionId, VolumeId};
use crate::error::{FclError, Result};
use crate::seeding::{self, tag};
use crate::tensor_math::{norm, Vec64};

pub const DUMP_MAGIC: &[u8; 4] = b"FCLD";
pub const DUMP_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub num_clients: usize,
    pub volumes_per_client: usize,
    pub slices_per_volume: usize,
    pub partitions: usize,
    pub image_side: usize,
    pub template_strength: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_clients: 4,
            volumes_per_client: 10,
            slices_per_volume: 16,
            partitions: 4,
            image_side: 8,
            template_strength: 0.7,
            noise_sigma: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    /// Ten clients, matching the usual cross-silo medical setting.
    pub fn ten_clients() -> Self {
        SyntheticConfig {
            num_clients: 10,
            ..SyntheticConfig::default()
        }
    }

    pub fn input_dim(&self) -> usize {
        self.image_side * self.image_side
    }

    pub fn partition_spec(&self) -> PartitionSpec {
        PartitionSpec {
            partitions: self.partitions,
            slices_per_volume: self.slices_per_volume,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_clients", self.num_clients),
            ("volumes_per_client", self.volumes_per_client),
            ("slices_per_volume", self.slices_per_volume),
            ("partitions", self.partitions),
            ("image_side", self.image_side),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(FclError::config(field, "must be ≥ 1"));
            }
        }
        if self.volumes_per_client < 2 {
            return Err(FclError::config(
                "volumes_per_client",
                "need ≥ 2 volumes per client to form positive pairs",
            ));
        }
        if self.slices_per_volume < self.partitions {
            return Err(FclError::config(
                "slices_per_volume",
                format!("must be ≥ partitions ({})", self.partitions),
            ));
        }
        if self.partitions > usize::from(PartitionId::MAX) {
            return Err(FclError::config("partitions", "too many partitions"));
        }
        if self.image_side < 4 {
            return Err(FclError::config("image_side", "must be ≥ 4"));
        }
        if !(0.0..=1.0).contains(&self.template_strength) {
            return Err(FclError::config("template_strength", "must be in [0, 1]"));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(FclError::config("noise_sigma", "must be finite and ≥ 0"));
        }
        Ok(())
    }
}

/// Maps slice indices to contiguous partitions along the volume axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PartitionSpec {
    pub partitions: usize,
    pub slices_per_volume: usize,
}

impl PartitionSpec {
    pub fn partition_of(&self, slice_index: usize) -> PartitionId {
        (slice_index * self.partitions / self.slices_per_volume) as PartitionId
    }

    /// The slice indices assigned to partition `s`.
    pub fn slices_in(&self, s: PartitionId) -> Range<usize> {
        let s = usize::from(s);
        // smallest i with floor(i·S/n) ≥ s is ceil(s·n/S)
        let start = (s * self.slices_per_volume).div_ceil(self.partitions);
        let end = ((s + 1) * self.slices_per_volume).div_ceil(self.partitions);
        start..end.min(self.slices_per_volume)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    volume_id: VolumeId,
    client_id: ClientId,
    slices: Vec<Vec64>,
}

impl Volume {
    pub fn volume_id(&self) -> VolumeId {
        self.volume_id
    }

    pub fn client_id(&self) -> ClientId {
        self.client_id
    }

    /// Slices in axis order.
    pub fn slices(&self) -> &[Vec64] {
        &self.slices
    }
}

/// The private data held by one client.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    client_id: ClientId,
    volumes: Vec<Volume>,
    spec: PartitionSpec,
    image_side: usize,
}

impl ClientShard {
    pub fn client_id(&self) -> ClientId {
        self.client_id
    }

    pub fn volumes(&self) -> &[Volume] {
        &self.volumes
    }

    pub fn partition_spec(&self) -> PartitionSpec {
        self.spec
    }

    pub fn image_side(&self) -> usize {
        self.image_side
    }

    pub fn slice(&self, at: SliceRef) -> &Vec64 {
        &self.volumes[at.volume].slices[at.slice]
    }

    pub fn slice_count(&self) -> usize {
        self.volumes.iter().map(|v| v.slices.len()).sum()
    }

    pub fn write_dump<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(DUMP_MAGIC)?;
        codec::write_u32(w, DUMP_VERSION)?;
        codec::write_u32(w, self.client_id)?;
        codec::write_u32(w, codec::to_u32(self.volumes.len(), "volume count")?)?;
        codec::write_u32(
            w,
            codec::to_u32(self.spec.slices_per_volume, "slice count")?,
        )?;
        codec::write_u32(
            w,
            codec::to_u32(self.image_side * self.image_side, "pixels")?,
        )?;
        for v in &self.volumes {
            for s in &v.slices {
                for &px in s.iter() {
                    codec::write_f32(w, px as f32)?;
                }
            }
        }
        Ok(())
    }
}

/// A debug dump read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardDump {
    pub client_id: ClientId,
    pub volumes: usize,
    pub slices_per_volume: usize,
    pub pixels_per_slice: usize,
    pub pixels: Vec<f32>,
}

pub fn read_dump<R: Read>(r: &mut R) -> Result<ShardDump> {
    const KIND: &str = "dataset dump";
    codec::expect_magic(r, DUMP_MAGIC, KIND)?;
    codec::expect_version(r, DUMP_VERSION, KIND)?;
    let client_id = codec::read_u32(r, KIND)?;
    let volumes = codec::read_u32(r, KIND)? as usize;
    let slices_per_volume = codec::read_u32(r, KIND)? as usize;
    let pixels_per_slice = codec::read_u32(r, KIND)? as usize;
    let total = volumes * slices_per_volume * pixels_per_slice;
    let pixels = (0..total)
        .map(|_| codec::read_f32(r, KIND))
        .collect::<Result<Vec<_>>>()?;
    codec::expect_eof(r, KIND)?;
    Ok(ShardDump {
        client_id,
        volumes,
        slices_per_volume,
        pixels_per_slice,
        pixels,
    })
}

fn random_image<R: Rng + ?Sized>(rng: &mut R, pixels: usize) -> Vec<f64> {
    let u = Uniform::new(0.0, 1.0).expect("valid range");
    (0..pixels).map(|_| u.sample(rng)).collect()
}

/// Uniform values on a `grid × grid` lattice, bilinearly upsampled to
/// `side × side`. Low-frequency content survives small crops.
fn smooth_image<R: Rng + ?Sized>(rng: &mut R, side: usize, grid: usize) -> Vec<f64> {
    if grid == 0 || grid >= side {
        return random_image(rng, side * side);
    }
    let coarse = random_image(rng, grid * grid);
    let at = |r: usize, c: usize| coarse[r * grid + c];
    let scale = (grid - 1) as f64 / (side - 1) as f64;
    let mut out = Vec::with_capacity(side * side);
    for r in 0..side {
        let y = r as f64 * scale;
        let (y0, fy) = (y.floor() as usize, y.fract());
        let y1 = (y0 + 1).min(grid - 1);
        for c in 0..side {
            let x = c as f64 * scale;
            let (x0, fx) = (x.floor() as usize, x.fract());
            let x1 = (x0 + 1).min(grid - 1);
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
            let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Gram-Schmidt on the mean-centred fields, each rescaled to its original
/// spread and mean and clamped to [0, 1]. Afterwards no two fields share
/// pixel covariance beyond what clamping reintroduces. A field that lies in
/// the span of the earlier ones is left as drawn.
fn decorrelate(fields: &mut [Vec<f64>]) {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for f in fields.iter_mut() {
        let mean = f.iter().sum::<f64>() / f.len() as f64;
        let centred: Vec<f64> = f.iter().map(|x| x - mean).collect();
        let spread = norm(&centred);
        let mut r = centred;
        for b in &basis {
            let proj: f64 = r.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in r.iter_mut().zip(b) {
                *x -= proj * y;
            }
        }
        let left = norm(&r);
        if left <= 1e-9 * spread.max(1e-300) {
            continue;
        }
        for x in &mut r {
            *x /= left;
        }
        for (px, u) in f.iter_mut().zip(&r) {
            *px = (mean + spread * u).clamp(0.0, 1.0);
        }
        basis.push(r);
    }
}

fn mix(a: &[f64], b: &[f64], wa: f64) -> Vec<f64> {
    a.iter()
        .zip(b)
        .map(|(x, y)| wa * x + (1.0 - wa) * y)
        .collect()
}

/// Lattice size of the low-frequency fields behind templates and site
/// patterns.
const SMOOTH_GRID: usize = 3;
/// Weight of a template's own field; the rest is anatomy common to every
/// partition, so neighbouring regions are not trivially told apart.
const TEMPLATE_DISTINCT: f64 = 0.6;
/// Weight of the per-client site field inside a subject pattern; the rest is
/// per-pixel individual texture.
const SITE_WEIGHT: f64 = 0.8;

pub fn generate_dataset(cfg: &SyntheticConfig) -> Result<Vec<ClientShard>> {
    cfg.validate()?;
    let pixels = cfg.input_dim();
    let side = cfg.image_side;
    let spec = cfg.partition_spec();
    let mut template_rng = seeding::stream(cfg.seed, &[tag::TEMPLATES]);
    let mut fields: Vec<Vec<f64>> = (0..=cfg.partitions)
        .map(|_| smooth_image(&mut template_rng, side, SMOOTH_GRID))
        .collect();
    decorrelate(&mut fields);
    let (shared, own) = fields.split_first().expect("at least one field");
    let templates: Vec<Vec<f64>> = own
        .iter()
        .map(|o| mix(o, shared, TEMPLATE_DISTINCT))
        .collect();
    let noise = Normal::new(0.0, cfg.noise_sigma)
        .map_err(|e| FclError::config("noise_sigma", e.to_string()))?;
    let strength = cfg.template_strength;
    let sites: Vec<Vec<f64>> = (0..cfg.num_clients)
        .map(|c| {
            smooth_image(
                &mut seeding::stream(cfg.seed, &[tag::SITE, c as u64]),
                side,
                SMOOTH_GRID,
            )
        })
        .collect();

    (0..cfg.num_clients)
        .map(|c| {
            let client_id = c as ClientId;
            let volumes = (0..cfg.volumes_per_client)
                .map(|v| {
                    let tags = [c as u64, v as u64];
                    let own = random_image(
                        &mut seeding::stream(cfg.seed, &[tag::SUBJECT, tags[0], tags[1]]),
                        pixels,
                    );
                    let subject = mix(&sites[c], &own, SITE_WEIGHT);
                    let mut noise_rng =
                        seeding::stream(cfg.seed, &[tag::SLICE_NOISE, tags[0], tags[1]]);
                    let slices = (0..cfg.slices_per_volume)
                        .map(|i| {
                            let template = &templates[usize::from(spec.partition_of(i))];
                            let px = template
                                .iter()
                                .zip(&subject)
                                .map(|(t, s)| {
                                    let v = strength * t + (1.0 - strength) * s;
                                    let n = if cfg.noise_sigma > 0.0 {
                                        noise.sample(&mut noise_rng)
                                    } else {
                                        0.0
                                    };
                                    (v + n).clamp(0.0, 1.0)
                                })
                                .collect();
                            Vec64::from_vec_unchecked(px)
                        })
                        .collect();
                    Volume {
                        volume_id: v as VolumeId,
                        client_id,
                        slices,
                    }
                })
                .collect();
            Ok(ClientShard {
                client_id,
                volumes,
                spec,
                image_side: cfg.image_side,
            })
        })
        .collect()
}

/// Per-image intensity standardisation: zero mean, unit variance. A flat
/// image maps to all zeros.
pub fn standardize(x: &[f64]) -> Vec64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = if var > 1e-12 { 1.0 / var.sqrt() } else { 0.0 };
    Vec64::from_vec_unchecked(x.iter().map(|v| (v - mean) * inv).collect())
}

/// Random crop, nearest-neighbour resize back to full size, horizontal flip
/// and pixel noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augmenter {
    pub side: usize,
    /// Border removed by the crop; the crop window is `side − margin` wide.
    pub crop_margin: usize,
    pub flip_prob: f64,
    pub noise_sigma: f64,
}

impl Augmenter {
    pub fn new(side: usize) -> Self {
        Augmenter {
            side,
            crop_margin: 2,
            flip_prob: 0.5,
            noise_sigma: 0.05,
        }
    }

    pub fn apply<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Result<Vec64> {
        let side = self.side;
        if side < 4 {
            return Err(FclError::Contract(format!("image side {side} < 4")));
        }
        if x.len() != side * side {
            return Err(FclError::dim("augment input", side * side, x.len()));
        }
        let crop = side - self.crop_margin;
        let oy = rng.random_range(0..=self.crop_margin);
        let ox = rng.random_range(0..=self.crop_margin);
        let flip = rng.random_bool(self.flip_prob);
        let noise = Normal::new(0.0, self.noise_sigma)
            .map_err(|e| FclError::Contract(format!("augment noise: {e}")))?;
        let mut out = Vec::with_capacity(side * side);
        for r in 0..side {
            let sy = oy + r * crop / side;
            for c in 0..side {
                let c = if flip { side - 1 - c } else { c };
                let sx = ox + c * crop / side;
                let n = if self.noise_sigma > 0.0 {
                    noise.sample(rng)
                } else {
                    0.0
                };
                out.push((x[sy * side + sx] + n).clamp(0.0, 1.0));
            }
        }
        Ok(Vec64::from_vec_unchecked(out))
    }
}

/// Position of one slice inside a shard.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SliceRef {
    pub volume: usize,
    pub slice: usize,
}

/// Two slices from partition `s` of two distinct volumes of the shard.
pub fn sample_training_pair<R: Rng + ?Sized>(
    shard: &ClientShard,
    s: PartitionId,
    rng: &mut R,
) -> Result<(SliceRef, SliceRef)> {
    let n = shard.volumes.len();
    if n < 2 {
        return Err(FclError::InsufficientData(format!(
            "client {} has {n} volume(s), need ≥ 2",
            shard.client_id
        )));
    }
    let range = shard.spec.slices_in(s);
    if range.is_empty() {
        return Err(FclError::Contract(format!("partition {s} has no slices")));
    }
    let i = rng.random_range(0..n);
    let j = (i + rng.random_range(1..n)) % n;
    let si = rng.random_range(range.clone());
    let sj = rng.random_range(range);
    Ok((
        SliceRef {
            volume: i,
            slice: si,
        },
        SliceRef {
            volume: j,
            slice: sj,
        },
    ))
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

/// Mean pixel correlation between slices of different subjects in the same
/// partition, and in different partitions. Uses one slice per partition per
/// volume (the first of the partition).
pub fn structural_similarity(shards: &[ClientShard]) -> (f64, f64) {
    let mut items: Vec<(ClientId, VolumeId, PartitionId, &[f64])> = Vec::new();
    for shard in shards {
        let spec = shard.spec;
        for v in &shard.volumes {
            for s in 0..spec.partitions as PartitionId {
                let idx = spec.slices_in(s).start;
                items.push((shard.client_id, v.volume_id, s, &v.slices[idx]));
            }
        }
    }
    let (mut within, mut wn, mut across, mut an) = (0.0, 0usize, 0.0, 0usize);
    for (i, a) in items.iter().enumerate() {
        for b in &items[i + 1..] {
            if (a.0, a.1) == (b.0, b.1) {
                continue;
            }
            let r = pearson(a.3, b.3);
            if a.2 == b.2 {
                within += r;
                wn += 1;
            } else {
                across += r;
                an += 1;
            }
        }
    }
    (within / wn.max(1) as f64, across / an.max(1) as f64)
}
