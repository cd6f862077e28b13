//! Procedural synthetic faces: identity-parameterised renderings with small
//! nuisance variation, identity-disjoint splits, and morph-pair selection.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::fr::FrModel;
use crate::image::{Image, IMAGE_SIZE};
use crate::sphere::{angle, Embedding};

pub const N_PARAMS: usize = 12;
pub const MANIFEST_HEADER: &str = "morphlab-dataset 1";

/// Geometry and tone parameters of one synthetic identity, each in `[0, 1]`:
/// face width, face height, eye spacing, eye height, eye size, nose length,
/// mouth width, mouth curvature, brow offset, skin tone, hair tone,
/// background tone.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentitySpec {
    pub identity_id: u32,
    pub params: [f64; N_PARAMS],
}

impl IdentitySpec {
    pub fn new(identity_id: u32, params: &[f64]) -> Result<Self> {
        let params: [f64; N_PARAMS] = params
            .try_into()
            .map_err(|_| Error::arg(format!("identity needs {N_PARAMS} params, got {}", params.len())))?;
        if let Some(p) = params.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::arg(format!("identity parameter {p} outside [0, 1]")));
        }
        Ok(IdentitySpec { identity_id, params })
    }

    pub fn random<R: Rng + ?Sized>(identity_id: u32, rng: &mut R) -> Self {
        let mut params = [0.0; N_PARAMS];
        params.iter_mut().for_each(|p| *p = rng.random::<f64>());
        IdentitySpec { identity_id, params }
    }
}

/// Per-image nuisance: sub-pixel shift, additive brightness, pixel noise.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Nuisance {
    pub shift_x: f64,
    pub shift_y: f64,
    pub brightness: f64,
    pub noise_sigma: f64,
}

impl Nuisance {
    pub fn validate(&self) -> Result<()> {
        let ok = (-2.0..=2.0).contains(&self.shift_x)
            && (-2.0..=2.0).contains(&self.shift_y)
            && (-0.1..=0.1).contains(&self.brightness)
            && (0.0..=0.02).contains(&self.noise_sigma);
        if ok {
            Ok(())
        } else {
            Err(Error::arg(format!("nuisance out of range: {self:?}")))
        }
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Nuisance {
            shift_x: rng.random_range(-2.0..=2.0),
            shift_y: rng.random_range(-2.0..=2.0),
            brightness: rng.random_range(-0.1..=0.1),
            noise_sigma: rng.random_range(0.0..=0.02),
        }
    }
}

struct Face {
    cx: f64,
    cy: f64,
    face_a: f64,
    face_b: f64,
    eye_dx: f64,
    eye_y: f64,
    eye_rx: f64,
    eye_ry: f64,
    nose_len: f64,
    mouth_y: f64,
    mouth_hw: f64,
    mouth_sag: f64,
    brow_y: f64,
    skin: f64,
    hair: f64,
    background: f64,
}

impl Face {
    fn new(p: &[f64; N_PARAMS], shift_x: f64, shift_y: f64) -> Self {
        let cx = IMAGE_SIZE as f64 / 2.0 + shift_x;
        let cy = IMAGE_SIZE as f64 / 2.0 + 1.0 + shift_y;
        let face_b = 10.5 + 3.5 * p[1];
        let eye_y = cy - 1.0 - 4.0 * p[3];
        let eye_ry = 0.9 + 0.8 * p[4];
        Face {
            cx,
            cy,
            face_a: 8.0 + 4.0 * p[0],
            face_b,
            eye_dx: 3.0 + 3.0 * p[2],
            eye_y,
            eye_rx: 1.3 + 1.4 * p[4],
            eye_ry,
            nose_len: 2.0 + 5.0 * p[5],
            mouth_y: cy + 0.5 * face_b,
            mouth_hw: 1.5 + 6.0 * p[6],
            mouth_sag: (p[7] - 0.5) * 5.0,
            brow_y: eye_y - eye_ry - 1.0 - 2.5 * p[8],
            skin: 0.45 + 0.35 * p[9],
            hair: 0.05 + 0.45 * p[10],
            background: 0.15 + 0.35 * p[11],
        }
    }

    /// Painter's-algorithm intensity at a continuous point.
    fn shade(&self, x: f64, y: f64) -> f64 {
        let ell = |cx: f64, cy: f64, a: f64, b: f64| {
            let (u, v) = ((x - cx) / a, (y - cy) / b);
            u * u + v * v <= 1.0
        };
        let mut v = self.background;
        // hair cap: a slightly larger ellipse raised above the face
        if ell(self.cx, self.cy - 2.0, self.face_a + 1.5, self.face_b + 1.0) && y < self.cy - 0.2 * self.face_b {
            v = self.hair;
        }
        if !ell(self.cx, self.cy, self.face_a, self.face_b) {
            return v;
        }
        v = self.skin;
        for side in [-1.0, 1.0] {
            let ex = self.cx + side * self.eye_dx;
            if (y - self.brow_y).abs() <= 0.6 && (x - ex).abs() <= self.eye_rx * 1.2 {
                v = self.hair;
            }
            if ell(ex, self.eye_y, self.eye_rx, self.eye_ry) {
                v = 0.08;
            }
        }
        if (x - self.cx).abs() <= 0.6 && y >= self.eye_y && y <= self.eye_y + self.nose_len {
            v = (self.skin - 0.22).max(0.0);
        }
        let dx = x - self.cx;
        if dx.abs() <= self.mouth_hw {
            let t = dx / self.mouth_hw;
            let centre = self.mouth_y - self.mouth_sag * t * t;
            if (y - centre).abs() <= 1.0 {
                v = 0.2;
            }
        }
        v
    }
}

const SUPERSAMPLE: usize = 4;

/// Renders one identity under the given nuisance. Deterministic in
/// `(spec, nuisance, seed)`; the seed only drives the pixel noise.
pub fn render_identity(spec: &IdentitySpec, nuisance: &Nuisance, seed: u64) -> Result<Image> {
    IdentitySpec::new(spec.identity_id, &spec.params)?;
    nuisance.validate()?;
    let face = Face::new(&spec.params, nuisance.shift_x, nuisance.shift_y);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, nuisance.noise_sigma).expect("valid sigma");
    let mut pixels = Vec::with_capacity(IMAGE_SIZE * IMAGE_SIZE);
    let step = 1.0 / SUPERSAMPLE as f64;
    for py in 0..IMAGE_SIZE {
        for px in 0..IMAGE_SIZE {
            let mut acc = 0.0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = px as f64 + (sx as f64 + 0.5) * step;
                    let y = py as f64 + (sy as f64 + 0.5) * step;
                    acc += face.shade(x, y);
                }
            }
            let mut v = acc / (SUPERSAMPLE * SUPERSAMPLE) as f64 + nuisance.brightness;
            if nuisance.noise_sigma > 0.0 {
                v += noise.sample(&mut rng);
            }
            pixels.push(v.clamp(0.0, 1.0));
        }
    }
    Image::new(IMAGE_SIZE, IMAGE_SIZE, pixels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Validation,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "validation" => Some(Split::Validation),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub identity_id: u32,
    pub split: Split,
    pub nuisance: Nuisance,
    pub seed: u64,
    pub file: String,
    pub image: Image,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetParams {
    pub n_identities: usize,
    pub images_per_identity: usize,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for DatasetParams {
    fn default() -> Self {
        DatasetParams {
            n_identities: 120,
            images_per_identity: 10,
            train_fraction: 100.0 / 120.0,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub params: DatasetParams,
    pub identities: Vec<(IdentitySpec, Split)>,
    pub records: Vec<Record>,
}

/// Renders the whole dataset. Identities `0..n_train` form the training
/// split, the rest the validation split. Images are quantised to 8 bits so
/// the in-memory dataset equals what the PGM files decode to.
pub fn generate_dataset(params: &DatasetParams) -> Result<Dataset> {
    if params.n_identities < 4 {
        return Err(Error::arg(format!(
            "need at least 4 identities, got {}",
            params.n_identities
        )));
    }
    if params.images_per_identity < 2 {
        return Err(Error::arg("every identity needs at least 2 images"));
    }
    if !(0.0..=1.0).contains(&params.train_fraction) {
        return Err(Error::arg("train_fraction must lie in [0, 1]"));
    }
    let n_train = (params.n_identities as f64 * params.train_fraction).round() as usize;
    let n_val = params.n_identities - n_train;
    if n_train < 2 || n_val < 2 {
        return Err(Error::arg(format!(
            "split {n_train} train / {n_val} validation identities; both need at least 2"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut identities = Vec::with_capacity(params.n_identities);
    for id in 0..params.n_identities as u32 {
        let split = if (id as usize) < n_train {
            Split::Train
        } else {
            Split::Validation
        };
        identities.push((IdentitySpec::random(id, &mut rng), split));
    }
    let mut records = Vec::with_capacity(params.n_identities * params.images_per_identity);
    for (spec, split) in &identities {
        for k in 0..params.images_per_identity {
            let nuisance = Nuisance::random(&mut rng);
            let seed = rng.next_u64();
            let image = render_identity(spec, &nuisance, seed)?.quantized();
            records.push(Record {
                identity_id: spec.identity_id,
                split: *split,
                nuisance,
                seed,
                file: format!("images/id{:04}_{:02}.pgm", spec.identity_id, k),
                image,
            });
        }
    }
    Ok(Dataset {
        params: params.clone(),
        identities,
        records,
    })
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Record> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn identity_ids(&self, split: Split) -> Vec<u32> {
        self.identities
            .iter()
            .filter(|(_, s)| *s == split)
            .map(|(spec, _)| spec.identity_id)
            .collect()
    }

    /// Records grouped by identity, in record order.
    pub fn by_identity(&self, split: Split) -> BTreeMap<u32, Vec<&Record>> {
        let mut map: BTreeMap<u32, Vec<&Record>> = BTreeMap::new();
        for r in self.records.iter().filter(|r| r.split == split) {
            map.entry(r.identity_id).or_default().push(r);
        }
        map
    }

    pub fn manifest(&self) -> String {
        let p = &self.params;
        let mut s = String::new();
        writeln!(s, "{MANIFEST_HEADER}").unwrap();
        writeln!(s, "meta,seed,{}", p.seed).unwrap();
        writeln!(s, "meta,n_identities,{}", p.n_identities).unwrap();
        writeln!(s, "meta,images_per_identity,{}", p.images_per_identity).unwrap();
        writeln!(s, "meta,train_fraction,{}", p.train_fraction).unwrap();
        for (spec, split) in &self.identities {
            write!(s, "identity,{},{}", spec.identity_id, split.as_str()).unwrap();
            for v in spec.params {
                write!(s, ",{v}").unwrap();
            }
            s.push('\n');
        }
        for r in &self.records {
            let n = &r.nuisance;
            writeln!(
                s,
                "record,{},{},{},{},{},{},{},{}",
                r.identity_id,
                r.split.as_str(),
                n.shift_x,
                n.shift_y,
                n.brightness,
                n.noise_sigma,
                r.seed,
                r.file
            )
            .unwrap();
        }
        s
    }

    /// Writes `manifest.txt` and every image under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        for r in &self.records {
            r.image.save_pgm(&dir.join(&r.file))?;
        }
        crate::io::write_text(&dir.join("manifest.txt"), &self.manifest())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = crate::io::read_text(&dir.join("manifest.txt"))?;
        let m = parse_manifest(&text)?;
        let mut records = Vec::with_capacity(m.records.len());
        for r in m.records {
            let image = Image::load_pgm(&dir.join(&r.file))?;
            records.push(Record {
                identity_id: r.identity_id,
                split: r.split,
                nuisance: r.nuisance,
                seed: r.seed,
                file: r.file,
                image,
            });
        }
        Ok(Dataset {
            params: m.params,
            identities: m.identities,
            records,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub identity_id: u32,
    pub split: Split,
    pub nuisance: Nuisance,
    pub seed: u64,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub params: DatasetParams,
    pub identities: Vec<(IdentitySpec, Split)>,
    pub records: Vec<ManifestRecord>,
}

/// Parses and validates a dataset manifest: known identities only, both
/// splits disjoint, nuisance within range, relative image paths.
pub fn parse_manifest(text: &str) -> Result<Manifest> {
    let ctx = "dataset manifest";
    let bad = |ln: usize, msg: &str| Error::format(ctx, format!("line {}: {msg}", ln + 1));
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == MANIFEST_HEADER => {}
        _ => return Err(Error::format(ctx, format!("missing header '{MANIFEST_HEADER}'"))),
    }
    let mut meta: BTreeMap<String, String> = BTreeMap::new();
    let mut identities = Vec::new();
    let mut splits: BTreeMap<u32, Split> = BTreeMap::new();
    let mut records = Vec::new();
    for (ln, line) in lines {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        match f[0] {
            "meta" if f.len() == 3 => {
                meta.insert(f[1].to_string(), f[2].to_string());
            }
            "identity" if f.len() == 3 + N_PARAMS => {
                let id: u32 = f[1].parse().map_err(|_| bad(ln, "bad identity id"))?;
                let split = Split::parse(f[2]).ok_or_else(|| bad(ln, "bad split"))?;
                let params = f[3..]
                    .iter()
                    .map(|v| v.parse::<f64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| bad(ln, "bad identity parameter"))?;
                let spec = IdentitySpec::new(id, &params).map_err(|e| bad(ln, &e.to_string()))?;
                if splits.insert(id, split).is_some() {
                    return Err(bad(ln, "identity listed twice"));
                }
                identities.push((spec, split));
            }
            "record" if f.len() == 9 => {
                let id: u32 = f[1].parse().map_err(|_| bad(ln, "bad identity id"))?;
                let split = Split::parse(f[2]).ok_or_else(|| bad(ln, "bad split"))?;
                match splits.get(&id) {
                    Some(s) if *s == split => {}
                    Some(_) => return Err(bad(ln, "record split disagrees with its identity")),
                    None => return Err(bad(ln, "record for unknown identity")),
                }
                let num = |s: &str| s.parse::<f64>().map_err(|_| bad(ln, "bad nuisance value"));
                let nuisance = Nuisance {
                    shift_x: num(f[3])?,
                    shift_y: num(f[4])?,
                    brightness: num(f[5])?,
                    noise_sigma: num(f[6])?,
                };
                nuisance.validate().map_err(|e| bad(ln, &e.to_string()))?;
                let seed: u64 = f[7].parse().map_err(|_| bad(ln, "bad seed"))?;
                let file = f[8].to_string();
                if file.is_empty() || file.starts_with('/') || file.split('/').any(|c| c == "..") {
                    return Err(bad(ln, "image path must be relative"));
                }
                records.push(ManifestRecord {
                    identity_id: id,
                    split,
                    nuisance,
                    seed,
                    file,
                });
            }
            _ => return Err(bad(ln, "unrecognised line")),
        }
    }
    let get = |k: &str| {
        meta.get(k)
            .ok_or_else(|| Error::format(ctx, format!("missing meta {k}")))
    };
    let parse_err = |k: &str| Error::format(ctx, format!("bad meta {k}"));
    let params = DatasetParams {
        seed: get("seed")?.parse().map_err(|_| parse_err("seed"))?,
        n_identities: get("n_identities")?.parse().map_err(|_| parse_err("n_identities"))?,
        images_per_identity: get("images_per_identity")?
            .parse()
            .map_err(|_| parse_err("images_per_identity"))?,
        train_fraction: get("train_fraction")?
            .parse()
            .map_err(|_| parse_err("train_fraction"))?,
    };
    Ok(Manifest {
        params,
        identities,
        records,
    })
}

/// A morphing pair: enrollment images `x1`, `x2` and held-out probes.
#[derive(Debug, Clone)]
pub struct MorphPair {
    pub pair_id: usize,
    pub identity1: u32,
    pub identity2: u32,
    /// Angle between the identities' mean embeddings.
    pub mean_angle: f64,
    pub x1: Image,
    pub x2: Image,
    pub probe1: Image,
    pub probe2: Image,
    /// Dataset file names of x1, x2, probe1, probe2.
    pub files: [String; 4],
}

/// Per validation identity: its normalised mean embedding and its record
/// indices ordered by angle to that mean (most typical first).
fn identity_profiles(dataset: &Dataset, fr: &FrModel) -> Result<Vec<(u32, Embedding, Vec<usize>)>> {
    let groups = dataset.by_identity(Split::Validation);
    let mut out = Vec::with_capacity(groups.len());
    for (id, recs) in &groups {
        let images: Vec<&Image> = recs.iter().map(|r| &r.image).collect();
        let embs = fr.embed_many(&images)?;
        let mut sum = vec![0.0; fr.embedding_dim()];
        for e in &embs {
            sum.iter_mut().zip(e.as_slice()).for_each(|(s, v)| *s += v);
        }
        let mean = Embedding::normalize(&sum)?;
        let mut order: Vec<(f64, usize)> = Vec::with_capacity(embs.len());
        for (i, e) in embs.iter().enumerate() {
            order.push((angle(e, &mean)?, i));
        }
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        out.push((*id, mean, order.into_iter().map(|(_, i)| i).collect()));
    }
    Ok(out)
}

fn rank_pairs(profiles: &[(u32, Embedding, Vec<usize>)]) -> Result<Vec<(usize, usize, f64)>> {
    let mut pairs = Vec::new();
    for i in 0..profiles.len() {
        for j in i + 1..profiles.len() {
            pairs.push((i, j, angle(&profiles[i].1, &profiles[j].1)?));
        }
    }
    pairs.sort_by(|a, b| {
        a.2.total_cmp(&b.2)
            .then((profiles[a.0].0, profiles[a.1].0).cmp(&(profiles[b.0].0, profiles[b.1].0)))
    });
    Ok(pairs)
}

/// Identity-mean embedding angles for every validation identity pair,
/// sorted ascending (ties broken by identity ids).
pub fn identity_pair_angles(dataset: &Dataset, fr: &FrModel) -> Result<Vec<(u32, u32, f64)>> {
    let profiles = identity_profiles(dataset, fr)?;
    Ok(rank_pairs(&profiles)?
        .into_iter()
        .map(|(i, j, a)| (profiles[i].0, profiles[j].0, a))
        .collect())
}

/// Picks the `k` validation identity pairs whose mean embeddings are
/// closest under `fr`. Each identity enrolls with its image nearest the
/// identity mean and is probed with the next nearest.
pub fn select_morph_pairs(dataset: &Dataset, fr: &FrModel, k: usize) -> Result<Vec<MorphPair>> {
    let groups = dataset.by_identity(Split::Validation);
    let n = groups.len();
    if n < 2 {
        return Err(Error::arg("need at least 2 validation identities"));
    }
    let available = n * (n - 1) / 2;
    if k == 0 || k > available {
        return Err(Error::arg(format!("requested {k} pairs, {available} available")));
    }
    if let Some((id, _)) = groups.iter().find(|(_, r)| r.len() < 2) {
        return Err(Error::arg(format!("identity {id} has no held-out probe image")));
    }
    let profiles = identity_profiles(dataset, fr)?;
    let pick = |p: usize, rank: usize| {
        let (id, _, order) = &profiles[p];
        &groups[id][order[rank]]
    };
    Ok(rank_pairs(&profiles)?
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(pair_id, (a, b, ang))| {
            let recs = [pick(a, 0), pick(b, 0), pick(a, 1), pick(b, 1)];
            MorphPair {
                pair_id,
                identity1: profiles[a].0,
                identity2: profiles[b].0,
                mean_angle: ang,
                x1: recs[0].image.clone(),
                x2: recs[1].image.clone(),
                probe1: recs[2].image.clone(),
                probe2: recs[3].image.clone(),
                files: recs.map(|r| r.file.clone()),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mid_spec() -> IdentitySpec {
        IdentitySpec::new(0, &[0.5; N_PARAMS]).unwrap()
    }

    #[test]
    fn rendering_is_deterministic() {
        let n = Nuisance {
            shift_x: 0.7,
            shift_y: -1.3,
            brightness: 0.05,
            noise_sigma: 0.02,
        };
        let a = render_identity(&mid_spec(), &n, 99).unwrap();
        let b = render_identity(&mid_spec(), &n, 99).unwrap();
        assert_eq!(a, b);
        assert!(a.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn mouth_width_changes_many_pixels() {
        let mut narrow = [0.5; N_PARAMS];
        narrow[6] = 0.0;
        let mut wide = narrow;
        wide[6] = 1.0;
        let zero = Nuisance::default();
        let a = render_identity(&IdentitySpec::new(0, &narrow).unwrap(), &zero, 1).unwrap();
        let b = render_identity(&IdentitySpec::new(0, &wide).unwrap(), &zero, 1).unwrap();
        let changed = a
            .pixels()
            .iter()
            .zip(b.pixels())
            .filter(|(x, y)| (*x - *y).abs() >= 0.1)
            .count();
        assert!(changed >= 20, "only {changed} pixels changed");
    }

    #[test]
    fn brightness_raises_mean() {
        let zero = Nuisance::default();
        let bright = Nuisance {
            brightness: 0.1,
            ..zero
        };
        for seed in 0..20u64 {
            let spec = IdentitySpec::random(0, &mut ChaCha8Rng::seed_from_u64(seed));
            let a = render_identity(&spec, &zero, 0).unwrap().mean();
            let b = render_identity(&spec, &bright, 0).unwrap().mean();
            let d = b - a;
            assert!((0.05..=0.1 + 1e-12).contains(&d), "seed {seed}: {d}");
        }
    }

    #[test]
    fn invalid_inputs_rejected() {
        assert!(IdentitySpec::new(0, &[0.5; 11]).is_err());
        assert!(IdentitySpec::new(0, &[1.5; N_PARAMS]).is_err());
        let spec = IdentitySpec {
            identity_id: 0,
            params: [2.0; N_PARAMS],
        };
        assert!(matches!(
            render_identity(&spec, &Nuisance::default(), 0),
            Err(Error::Argument(_))
        ));
        let n = Nuisance {
            shift_x: 3.0,
            ..Default::default()
        };
        assert!(render_identity(&mid_spec(), &n, 0).is_err());
    }

    fn small(seed: u64) -> DatasetParams {
        DatasetParams {
            n_identities: 8,
            images_per_identity: 3,
            train_fraction: 0.5,
            seed,
        }
    }

    #[test]
    fn splits_are_identity_disjoint() {
        for seed in 0..5 {
            let d = generate_dataset(&small(seed)).unwrap();
            let train = d.identity_ids(Split::Train);
            let val = d.identity_ids(Split::Validation);
            assert!(train.iter().all(|id| !val.contains(id)));
            assert_eq!(train.len() + val.len(), 8);
            for r in &d.records {
                let expect = if train.contains(&r.identity_id) {
                    Split::Train
                } else {
                    Split::Validation
                };
                assert_eq!(r.split, expect);
            }
            for recs in d
                .by_identity(Split::Train)
                .values()
                .chain(d.by_identity(Split::Validation).values())
            {
                assert!(recs.len() >= 2);
            }
        }
    }

    #[test]
    fn default_dataset_counts() {
        let p = DatasetParams::default();
        let n_train = (p.n_identities as f64 * p.train_fraction).round() as usize;
        assert_eq!(n_train, 100);
        assert_eq!(p.n_identities * p.images_per_identity, 1200);
    }

    #[test]
    fn dataset_errors() {
        let mut p = small(0);
        p.n_identities = 3;
        assert!(matches!(generate_dataset(&p), Err(Error::Argument(_))));
        let mut p = small(0);
        p.train_fraction = 1.0;
        assert!(matches!(generate_dataset(&p), Err(Error::Argument(_))));
    }

    #[test]
    fn manifest_is_deterministic_and_round_trips() {
        let a = generate_dataset(&small(7)).unwrap();
        let b = generate_dataset(&small(7)).unwrap();
        assert_eq!(a.manifest(), b.manifest());
        let m = parse_manifest(&a.manifest()).unwrap();
        assert_eq!(m.params, a.params);
        assert_eq!(m.identities, a.identities);
        assert_eq!(m.records.len(), a.records.len());
        for (mr, r) in m.records.iter().zip(&a.records) {
            assert_eq!(
                (mr.identity_id, mr.split, mr.nuisance, mr.seed),
                (r.identity_id, r.split, r.nuisance, r.seed)
            );
        }
        let other = generate_dataset(&small(8)).unwrap();
        assert_ne!(a.manifest(), other.manifest());
    }

    #[test]
    fn saved_dataset_loads_identically() {
        let dir = tempfile::tempdir().unwrap();
        let d = generate_dataset(&small(3)).unwrap();
        d.save(dir.path()).unwrap();
        assert_eq!(Dataset::load(dir.path()).unwrap(), d);
    }

    #[test]
    fn manifest_rejects_bad_input() {
        let good = generate_dataset(&small(1)).unwrap().manifest();
        assert!(parse_manifest("").is_err());
        assert!(parse_manifest(&good.replace("images/", "/abs/")).is_err());
        assert!(parse_manifest(&good.replace("record,0,train", "record,0,validation")).is_err());
        let orphan = format!("{good}record,999,train,0,0,0,0,1,images/x.pgm\n");
        assert!(parse_manifest(&orphan).is_err());
    }
}
