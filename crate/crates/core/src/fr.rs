//! Toy face-recognition encoders, verification, and threshold calibration.

use std::fmt;
use std::str::FromStr;

use log::info;
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AdamConfig, Graph, Var};
use crate::error::{Error, Result};
use crate::image::{Image, IMAGE_SIZE};
use crate::nn::{self, Bound, Mode, Trainer};
use crate::sphere::{angle, Embedding};
use crate::synth::{Dataset, Split};
use crate::weights::ModelWeights;

/// Which of the two FR systems a model plays: the white box is used to
/// craft morphs, the black box only to evaluate them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    White,
    Black,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::White => "white",
            Role::Black => "black",
        }
    }

    /// Conv channel widths; the black box is 50% wider.
    pub fn widths(self) -> [usize; 3] {
        match self {
            Role::White => [8, 16, 32],
            Role::Black => [12, 24, 48],
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "white" => Ok(Role::White),
            "black" => Ok(Role::Black),
            other => Err(Error::arg(format!("unknown role '{other}' (expected white|black)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrParams {
    pub embedding_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Scale applied to cosines before the softmax.
    pub softmax_scale: f64,
    /// Additive cosine margin on the target class.
    pub margin: f64,
    /// Random extra shift (whole pixels, each axis) and brightness jitter
    /// applied to training images; zero disables.
    pub augment_shift: usize,
    pub augment_brightness: f64,
}

impl Default for FrParams {
    fn default() -> Self {
        FrParams {
            embedding_dim: 64,
            epochs: 80,
            batch_size: 64,
            adam: AdamConfig {
                alpha: 3e-3,
                ..AdamConfig::default()
            },
            softmax_scale: 30.0,
            margin: 0.35,
            augment_shift: 2,
            augment_brightness: 0.1,
        }
    }
}

const KERNEL: usize = 5;
const STRIDE: usize = 2;
const PAD: usize = 2;

/// A conv encoder `x -> z` ending in an l2 normalisation.
#[derive(Debug, Clone, PartialEq)]
pub struct FrModel {
    weights: ModelWeights,
    widths: [usize; 3],
    embedding_dim: usize,
}

impl FrModel {
    /// Freshly initialised (untrained) encoder.
    pub fn init(role: Role, embedding_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = role.widths();
        let mut w = ModelWeights::new(format!("fr-{role}"), seed);
        let mut c_in = 1;
        for (i, &c) in widths.iter().enumerate() {
            let name = format!("conv{}", i + 1);
            nn::init_conv(&mut w, &name, c, c_in, KERNEL, &mut rng);
            nn::init_batch_norm(&mut w, &name, c);
            c_in = c;
        }
        let spatial = IMAGE_SIZE >> widths.len();
        nn::init_fc(&mut w, "embed", embedding_dim, c_in * spatial * spatial, &mut rng);
        w.set_hyper("arch", arch_tag(&widths));
        w.set_hyper("embedding_dim", embedding_dim);
        w.set_hyper("role", role);
        FrModel {
            weights: w,
            widths,
            embedding_dim,
        }
    }

    pub fn from_weights(weights: ModelWeights) -> Result<Self> {
        let ctx = format!("fr weights '{}'", weights.tag);
        let arch = weights
            .hyper("arch")
            .ok_or_else(|| Error::format(&ctx, "missing arch"))?;
        let widths = parse_arch(arch).ok_or_else(|| Error::format(&ctx, format!("bad arch '{arch}'")))?;
        let embedding_dim: usize = weights
            .hyper("embedding_dim")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(&ctx, "missing embedding_dim"))?;
        let spatial = IMAGE_SIZE >> widths.len();
        let want = [embedding_dim, widths[2] * spatial * spatial];
        if weights.get("embed.weight")?.shape() != want {
            return Err(Error::format(&ctx, "embedding layer does not match arch"));
        }
        Ok(FrModel {
            weights,
            widths,
            embedding_dim,
        })
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    pub fn tag(&self) -> &str {
        &self.weights.tag
    }

    pub fn seed(&self) -> u64 {
        self.weights.seed
    }

    /// Forward pass from a `[batch, 1, 32, 32]` var to unit embeddings
    /// `[batch, dim]`. Weights enter the graph according to `bound`.
    pub(crate) fn forward(&self, g: &mut Graph, bound: &mut Bound<'_>, x: Var) -> Result<Var> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1..] != [1, IMAGE_SIZE, IMAGE_SIZE] {
            return Err(Error::dim(format!(
                "FR input must be [batch, 1, {IMAGE_SIZE}, {IMAGE_SIZE}], got {shape:?}"
            )));
        }
        let mut h = x;
        for i in 0..self.widths.len() {
            h = bound.conv_bn(g, &format!("conv{}", i + 1), h, STRIDE, PAD, true)?;
        }
        let flat: usize = g.value(h).shape()[1..].iter().product();
        let h = g.reshape(h, &[shape[0], flat])?;
        let z = bound.fc(g, "embed", h)?;
        g.l2_normalize(z)
    }

    /// Frozen eval-mode forward of an image batch inside an existing graph.
    pub(crate) fn embed_var(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut bound = Bound::new(g, &self.weights, false, Mode::Eval);
        self.forward(g, &mut bound, x)
    }

    pub fn embed(&self, x: &Image) -> Result<Embedding> {
        Ok(self.embed_many(&[x])?.remove(0))
    }

    /// Eval-mode embeddings, computed in chunks of 64.
    pub fn embed_many(&self, images: &[&Image]) -> Result<Vec<Embedding>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            for im in chunk {
                if (im.width(), im.height()) != (IMAGE_SIZE, IMAGE_SIZE) {
                    return Err(Error::dim(format!(
                        "FR expects {IMAGE_SIZE}x{IMAGE_SIZE} images, got {}x{}",
                        im.width(),
                        im.height()
                    )));
                }
            }
            let mut g = Graph::new();
            let x = g.constant(Image::batch(chunk)?);
            let z = self.embed_var(&mut g, x)?;
            let zd = g.value(z).data();
            for row in zd.chunks(self.embedding_dim) {
                out.push(Embedding::new(row.to_vec())?);
            }
        }
        Ok(out)
    }
}

fn arch_tag(widths: &[usize; 3]) -> String {
    format!("conv3x5s2:{},{},{}", widths[0], widths[1], widths[2])
}

fn parse_arch(s: &str) -> Option<[usize; 3]> {
    let rest = s.strip_prefix("conv3x5s2:")?;
    let v: Vec<usize> = rest.split(',').map(|x| x.parse().ok()).collect::<Option<_>>()?;
    let w: [usize; 3] = v.try_into().ok()?;
    w.iter().all(|&c| c > 0 && c <= 512).then_some(w)
}

/// Per-epoch record of FR training.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
}

/// Trains an FR encoder with a normalised-softmax identity head on the
/// training split. The head is discarded afterwards.
pub fn train_fr(dataset: &Dataset, role: Role, params: &FrParams, seed: u64) -> Result<(FrModel, Vec<EpochLog>)> {
    let train = dataset.split(Split::Train);
    let ids = dataset.identity_ids(Split::Train);
    if ids.len() < 2 {
        return Err(Error::arg("FR training needs at least 2 training identities"));
    }
    if params.batch_size < 2 {
        return Err(Error::arg("FR batch size must be at least 2"));
    }
    let label_of = |id: u32| ids.binary_search(&id).expect("train identity");
    let mut model = FrModel::init(role, params.embedding_dim, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f00d);
    let mut head = ModelWeights::new("fr-head", seed);
    nn::init_fc(&mut head, "classes", ids.len(), params.embedding_dim, &mut rng);

    let mut trainer = Trainer::new(params.adam, &model.weights)?;
    let mut head_trainer = Trainer::new(params.adam, &head)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut logs = Vec::with_capacity(params.epochs);
    for epoch in 0..params.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(params.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let images: Vec<Image> = chunk
                .iter()
                .map(|&i| augment(&train[i].image, params, &mut rng))
                .collect::<Result<_>>()?;
            let labels: Vec<usize> = chunk.iter().map(|&i| label_of(train[i].identity_id)).collect();
            let mut g = Graph::new();
            let x = g.constant(Image::batch(&images.iter().collect::<Vec<_>>())?);
            let mut bound = Bound::new(&mut g, &model.weights, true, Mode::Train);
            let z = model.forward(&mut g, &mut bound, x)?;
            let head_bound = Bound::new(&mut g, &head, true, Mode::Train);
            let w = head_bound.var("classes.weight")?;
            let wn = g.l2_normalize(w)?;
            let cos = g.fully_connected(z, wn, None)?;
            let loss = g.cosine_softmax_loss(cos, &labels, params.softmax_scale, params.margin)?;
            g.backward(loss)?;
            total += g.value(loss).item();
            batches += 1;
            let stats = bound.take_stats();
            let vars = bound.vars().clone();
            let head_vars = head_bound.vars().clone();
            trainer.step(&mut model.weights, &g, &vars)?;
            head_trainer.step(&mut head, &g, &head_vars)?;
            nn::apply_stats(&mut model.weights, stats)?;
        }
        let mean_loss = total / batches.max(1) as f64;
        info!(
            "train-fr[{role}] epoch {}/{}: loss {mean_loss:.4}",
            epoch + 1,
            params.epochs
        );
        logs.push(EpochLog { epoch, mean_loss });
    }
    let w = &mut model.weights;
    w.set_hyper("epochs", params.epochs);
    w.set_hyper("batch_size", params.batch_size);
    w.set_hyper("adam_alpha", params.adam.alpha);
    w.set_hyper("adam_beta1", params.adam.beta1);
    w.set_hyper("adam_beta2", params.adam.beta2);
    w.set_hyper("softmax_scale", params.softmax_scale);
    w.set_hyper("margin", params.margin);
    w.set_hyper("dataset_seed", dataset.params.seed);
    Ok((model, logs))
}

fn augment(x: &Image, params: &FrParams, rng: &mut ChaCha8Rng) -> Result<Image> {
    if params.augment_shift == 0 && params.augment_brightness == 0.0 {
        return Ok(x.clone());
    }
    let s = params.augment_shift as i64;
    let (dx, dy) = (rng.random_range(-s..=s), rng.random_range(-s..=s));
    let b = if params.augment_brightness > 0.0 {
        rng.random_range(-params.augment_brightness..=params.augment_brightness)
    } else {
        0.0
    };
    let (w, h) = (x.width() as i64, x.height() as i64);
    let px = x.pixels();
    let out: Vec<f64> = (0..h)
        .flat_map(|y| (0..w).map(move |c| (y, c)))
        .map(|(y, c)| {
            let sy = (y - dy).clamp(0, h - 1);
            let sx = (c - dx).clamp(0, w - 1);
            px[(sy * w + sx) as usize] + b
        })
        .collect();
    Image::from_slice(x.width(), x.height(), &out)
}

/// Outcome of one verification attempt.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Verification {
    pub matched: bool,
    pub theta: f64,
}

/// Calibrated decision threshold with its error rates on the calibration set.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionThreshold {
    pub t: f64,
    pub fmr: f64,
    pub fnmr: f64,
    pub calibration_set: String,
}

impl DecisionThreshold {
    /// A bare threshold without calibration statistics.
    pub fn fixed(t: f64) -> Self {
        DecisionThreshold {
            t,
            fmr: 0.0,
            fnmr: 0.0,
            calibration_set: "fixed".into(),
        }
    }

    /// Match rule: accept iff `theta <= t`.
    pub fn accepts(&self, theta: f64) -> bool {
        theta <= self.t
    }
}

pub fn verify(fr: &FrModel, a: &Image, b: &Image, t: &DecisionThreshold) -> Result<Verification> {
    let e = fr.embed_many(&[a, b])?;
    let theta = angle(&e[0], &e[1])?;
    Ok(Verification {
        matched: t.accepts(theta),
        theta,
    })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreSets {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

pub const IMPOSTOR_CAP: usize = 20_000;

/// Genuine angles over every same-identity pair; impostor angles over
/// cross-identity pairs, subsampled (seeded) down to [`IMPOSTOR_CAP`].
pub fn score_sets(fr: &FrModel, samples: &[(u32, &Image)], seed: u64) -> Result<ScoreSets> {
    let images: Vec<&Image> = samples.iter().map(|s| s.1).collect();
    let emb = fr.embed_many(&images)?;
    let mut genuine = Vec::new();
    let mut impostor_pairs = Vec::new();
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            if samples[i].0 == samples[j].0 {
                genuine.push(angle(&emb[i], &emb[j])?);
            } else {
                impostor_pairs.push((i, j));
            }
        }
    }
    if genuine.is_empty() {
        return Err(Error::arg("no identity has two samples; genuine scores impossible"));
    }
    if impostor_pairs.len() > IMPOSTOR_CAP {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep = sample(&mut rng, impostor_pairs.len(), IMPOSTOR_CAP).into_vec();
        keep.sort_unstable();
        impostor_pairs = keep.into_iter().map(|k| impostor_pairs[k]).collect();
    }
    let impostor = impostor_pairs
        .into_iter()
        .map(|(i, j)| angle(&emb[i], &emb[j]))
        .collect::<Result<_>>()?;
    Ok(ScoreSets { genuine, impostor })
}

/// Score sets over a dataset's validation split.
pub fn validation_scores(fr: &FrModel, dataset: &Dataset, seed: u64) -> Result<ScoreSets> {
    let samples: Vec<(u32, &Image)> = dataset
        .split(Split::Validation)
        .into_iter()
        .map(|r| (r.identity_id, &r.image))
        .collect();
    score_sets(fr, &samples, seed)
}

/// Fraction of impostor angles `<= t` (accepted impostors).
pub fn fmr(sorted_impostor: &[f64], t: f64) -> f64 {
    sorted_impostor.partition_point(|&a| a <= t) as f64 / sorted_impostor.len() as f64
}

/// Fraction of genuine angles `> t` (rejected genuines).
pub fn fnmr(sorted_genuine: &[f64], t: f64) -> f64 {
    let accepted = sorted_genuine.partition_point(|&a| a <= t);
    (sorted_genuine.len() - accepted) as f64 / sorted_genuine.len() as f64
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

pub const FMR_LIMIT: f64 = 0.001;

/// Largest candidate threshold whose FMR stays strictly below 0.1%.
/// Candidates are the sorted impostor angles, the midpoints between
/// neighbours, and the float just below the smallest impostor angle.
pub fn calibrate_threshold(genuine: &[f64], impostor: &[f64], calibration_set: &str) -> Result<DecisionThreshold> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(Error::arg(
            "threshold calibration needs non-empty genuine and impostor scores",
        ));
    }
    let gen = sorted(genuine);
    let imp = sorted(impostor);
    let mut candidates = Vec::with_capacity(2 * imp.len());
    candidates.push(next_down(imp[0]));
    for w in imp.windows(2) {
        candidates.push(0.5 * (w[0] + w[1]));
    }
    candidates.extend_from_slice(&imp);
    candidates.sort_by(|a, b| b.total_cmp(a));
    let t = candidates
        .into_iter()
        .find(|&t| fmr(&imp, t) < FMR_LIMIT)
        .expect("the candidate below every impostor accepts none");
    Ok(DecisionThreshold {
        t,
        fmr: fmr(&imp, t),
        fnmr: fnmr(&gen, t),
        calibration_set: calibration_set.to_string(),
    })
}

fn next_down(x: f64) -> f64 {
    if x == 0.0 {
        return -f64::from_bits(1);
    }
    let bits = x.to_bits();
    if x > 0.0 {
        f64::from_bits(bits - 1)
    } else {
        f64::from_bits(bits + 1)
    }
}

/// Equal error rate: the mean of FMR and FNMR at the score threshold where
/// they are closest.
pub fn equal_error_rate(genuine: &[f64], impostor: &[f64]) -> Result<f64> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(Error::arg("EER needs non-empty score sets"));
    }
    let gen = sorted(genuine);
    let imp = sorted(impostor);
    let mut best = (f64::INFINITY, 1.0);
    for &t in gen.iter().chain(&imp) {
        let (a, b) = (fmr(&imp, t), fnmr(&gen, t));
        if (a - b).abs() < best.0 {
            best = ((a - b).abs(), 0.5 * (a + b));
        }
    }
    Ok(best.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, DatasetParams};
    use std::f64::consts::FRAC_PI_4;

    fn noise_image(seed: u64) -> Image {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(
            IMAGE_SIZE,
            IMAGE_SIZE,
            (0..IMAGE_SIZE * IMAGE_SIZE).map(|_| rng.random()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn embeddings_are_unit_and_deterministic() {
        let fr = FrModel::init(Role::White, 16, 1);
        let images: Vec<Image> = (0..100).map(noise_image).collect();
        let refs: Vec<&Image> = images.iter().collect();
        let e = fr.embed_many(&refs).unwrap();
        for z in &e {
            let n: f64 = z.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
        assert_eq!(fr.embed(&images[3]).unwrap(), e[3]);
        let small = Image::filled(16, 16, 0.5);
        assert!(matches!(fr.embed(&small), Err(Error::Dimension(_))));
    }

    #[test]
    fn verify_examples() {
        let fr = FrModel::init(Role::White, 16, 1);
        let x = noise_image(1);
        let v = verify(&fr, &x, &x, &DecisionThreshold::fixed(0.1)).unwrap();
        assert_eq!(v.theta, 0.0);
        assert!(v.matched);
        let t = DecisionThreshold::fixed(0.7);
        assert!(t.accepts(0.7));
        assert!(!DecisionThreshold::fixed(FRAC_PI_4).accepts(std::f64::consts::FRAC_PI_2));
    }

    #[test]
    fn score_set_counts() {
        let fr = FrModel::init(Role::White, 16, 2);
        let ims: Vec<Image> = (0..4).map(noise_image).collect();
        let one = [(0, &ims[0]), (0, &ims[1])];
        let s = score_sets(&fr, &one, 0).unwrap();
        assert_eq!((s.genuine.len(), s.impostor.len()), (1, 0));
        let two = [(0, &ims[0]), (0, &ims[1]), (1, &ims[2]), (1, &ims[3])];
        let s = score_sets(&fr, &two, 0).unwrap();
        assert_eq!((s.genuine.len(), s.impostor.len()), (2, 4));
        assert!(s
            .genuine
            .iter()
            .chain(&s.impostor)
            .all(|a| (0.0..=std::f64::consts::PI).contains(a)));
        let lonely = [(0, &ims[0]), (1, &ims[1])];
        assert!(matches!(score_sets(&fr, &lonely, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn calibration_on_separated_sets() {
        let impostor: Vec<f64> = (0..1000).map(|i| 1.0 + 0.1 * i as f64 / 1000.0 * 10.0).collect();
        let genuine: Vec<f64> = (0..200).map(|i| 0.3 * i as f64 / 199.0).collect();
        let t = calibrate_threshold(&genuine, &impostor, "constructed").unwrap();
        assert!(t.t < 1.0 && t.t > 1.0 - 1e-12, "{}", t.t);
        assert_eq!((t.fmr, t.fnmr), (0.0, 0.0));
    }

    #[test]
    fn calibration_counting_bound() {
        // With 1000 impostors, one accepted impostor is exactly 0.1%: not
        // strictly below the limit, so no impostor may be accepted.
        let impostor: Vec<f64> = (0..1000).map(|i| 0.5 + i as f64 * 1e-3).collect();
        let genuine = vec![0.2, 0.6, 0.7];
        let t = calibrate_threshold(&genuine, &impostor, "c").unwrap();
        assert_eq!(t.fmr, 0.0);
        assert!(t.t < 0.5);
        // 2000 impostors: one accepted (0.05%) is allowed, two are not.
        let impostor: Vec<f64> = (0..2000).map(|i| 0.5 + i as f64 * 1e-3).collect();
        let t = calibrate_threshold(&genuine, &impostor, "c").unwrap();
        assert_eq!(t.fmr, 0.0005);
        assert!((t.t - 0.5005).abs() < 1e-12);
        assert!(calibrate_threshold(&[], &impostor, "c").is_err());
        assert!(calibrate_threshold(&genuine, &[], "c").is_err());
    }

    #[test]
    fn rates_are_monotone_in_t() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        use rand::Rng;
        let g = sorted(&(0..300).map(|_| rng.random::<f64>() * 3.0).collect::<Vec<_>>());
        let i = g.clone();
        let mut prev = (0.0, 1.0);
        for k in 0..=320 {
            let t = k as f64 * 0.01;
            let (a, b) = (fmr(&i, t), fnmr(&g, t));
            assert!(a >= prev.0 && b <= prev.1);
            prev = (a, b);
        }
        let t = calibrate_threshold(&g, &i, "same").unwrap();
        assert!(t.fmr < FMR_LIMIT);
        assert!(t.fnmr > 0.99 - FMR_LIMIT);
    }

    #[test]
    fn role_parsing_and_arch() {
        assert_eq!("white".parse::<Role>().unwrap(), Role::White);
        assert!("grey".parse::<Role>().is_err());
        let fr = FrModel::init(Role::Black, 16, 9);
        let back = FrModel::from_weights(ModelWeights::parse(&fr.weights().to_text()).unwrap()).unwrap();
        assert_eq!(back, fr);
        assert_eq!(fr.weights().get("conv1.kernel").unwrap().shape(), &[12, 1, 5, 5]);
    }

    #[test]
    fn single_identity_training_set_is_rejected() {
        let mut d = generate_dataset(&DatasetParams {
            n_identities: 4,
            images_per_identity: 2,
            train_fraction: 0.5,
            seed: 1,
        })
        .unwrap();
        d.identities
            .retain(|(s, split)| *split != Split::Train || s.identity_id == 0);
        d.records.retain(|r| r.split != Split::Train || r.identity_id == 0);
        let p = FrParams {
            epochs: 1,
            ..Default::default()
        };
        assert!(matches!(train_fr(&d, Role::White, &p, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn training_is_deterministic() {
        let d = generate_dataset(&DatasetParams {
            n_identities: 6,
            images_per_identity: 3,
            train_fraction: 0.5,
            seed: 5,
        })
        .unwrap();
        let p = FrParams {
            epochs: 2,
            batch_size: 4,
            ..Default::default()
        };
        let (a, la) = train_fr(&d, Role::White, &p, 11).unwrap();
        let (b, lb) = train_fr(&d, Role::White, &p, 11).unwrap();
        assert_eq!(a.weights().to_text(), b.weights().to_text());
        assert_eq!(la, lb);
        let (c, _) = train_fr(&d, Role::White, &p, 12).unwrap();
        assert_ne!(a.weights().to_text(), c.weights().to_text());
    }
}
