//! Worst-case morph generation: a supporting encoder plus a decoder that
//! maps `(z*, z_enc)` back to image space, trained against a frozen FR.

use std::fmt;
use std::str::FromStr;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{gradient_check, logit, AdamConfig, GradCheckConfig, GradCheckReport, Graph, Var};
use crate::error::{Error, Result};
use crate::fr::FrModel;
use crate::image::{Image, IMAGE_SIZE};
use crate::nn::{self, Bound, Mode, Trainer};
use crate::sphere::{angle, worst_case_embedding, Embedding};
use crate::synth::{Dataset, Split};
use crate::tensor::Tensor;
use crate::weights::ModelWeights;

const ENC_WIDTHS: [usize; 3] = [8, 16, 16];
const DEC_HIDDEN: usize = 64;
const DEC_SEED_CHANNELS: usize = 32;
const DEC_WIDTHS: [usize; 2] = [32, 16];
const SEED_SIZE: usize = IMAGE_SIZE >> 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MorphKind {
    Blend,
    WorstCaseApprox,
    ImprovedApprox,
    Theoretical,
}

impl MorphKind {
    pub const ALL: [MorphKind; 4] = [
        MorphKind::Blend,
        MorphKind::WorstCaseApprox,
        MorphKind::ImprovedApprox,
        MorphKind::Theoretical,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MorphKind::Blend => "blend",
            MorphKind::WorstCaseApprox => "worst_case_approx",
            MorphKind::ImprovedApprox => "improved_approx",
            MorphKind::Theoretical => "theoretical",
        }
    }
}

impl fmt::Display for MorphKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MorphKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MorphKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::arg(format!("unknown morph kind '{s}'")))
    }
}

/// Which contributing image feeds the supporting encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EncSource {
    One,
    Two,
}

impl EncSource {
    pub fn as_str(self) -> &'static str {
        match self {
            EncSource::One => "one",
            EncSource::Two => "two",
        }
    }
}

impl FromStr for EncSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one" => Ok(EncSource::One),
            "two" => Ok(EncSource::Two),
            other => Err(Error::arg(format!("unknown enc source '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub gamma1: f64,
    pub gamma2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            gamma1: 1.0,
            gamma2: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub pixel: f64,
    pub latent: f64,
}

/// `gamma1 * mse(x_morph, x_target) + gamma2 * angle(z_morph, z_star)`.
pub fn compute_loss(
    weights: LossWeights,
    x_target: &Image,
    x_morph: &Image,
    z_morph: &Embedding,
    z_star: &Embedding,
) -> Result<LossParts> {
    let pixel = pixel_loss(x_target, x_morph)?;
    let latent = angle(z_morph, z_star)?;
    Ok(LossParts {
        total: weights.gamma1 * pixel + weights.gamma2 * latent,
        pixel,
        latent,
    })
}

fn pixel_loss(a: &Image, b: &Image) -> Result<f64> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(Error::dim(format!(
            "image sizes {}x{} and {}x{} differ",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    let n = a.pixels().len() as f64;
    Ok(a.pixels()
        .iter()
        .zip(b.pixels())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

/// A generated (or theoretical) morph and its latent-space bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct MorphResult {
    pub kind: MorphKind,
    /// Absent for the theoretical kind.
    pub image: Option<Image>,
    pub z_star: Embedding,
    pub z_morph: Embedding,
    /// `angle(z_morph, z_star)`.
    pub latent_loss: f64,
    /// MSE against the reconstruction target, where one exists.
    pub pixel_loss: Option<f64>,
    pub enc_source: Option<EncSource>,
    pub decoder_input: Option<DecoderInput>,
}

/// What the decoder consumed to produce a morph, kept for refinement.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderInput {
    pub latent: Embedding,
    pub features: Tensor,
    /// Reconstruction target for the pixel loss (the encoder source image).
    pub target: Image,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MorphParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossWeights,
    pub adam: AdamConfig,
}

impl Default for MorphParams {
    fn default() -> Self {
        MorphParams {
            epochs: 60,
            batch_size: 64,
            loss: LossWeights::default(),
            adam: AdamConfig {
                alpha: 2e-3,
                ..AdamConfig::default()
            },
        }
    }
}

/// Supporting encoder and decoder, stored in one weights collection under
/// `enc.` and `dec.` prefixes.
#[derive(Debug, Clone, PartialEq)]
pub struct MorphModel {
    weights: ModelWeights,
    pub loss: LossWeights,
    pub fr_tag: String,
    embedding_dim: usize,
}

impl MorphModel {
    /// Fresh weights; the output bias starts at `logit(mean_image)`.
    pub fn init(embedding_dim: usize, mean_image: &Image, fr_tag: &str, loss: LossWeights, seed: u64) -> Result<Self> {
        if (mean_image.width(), mean_image.height()) != (IMAGE_SIZE, IMAGE_SIZE) {
            return Err(Error::dim("mean image must match the model image size"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = ModelWeights::new("morpher", seed);
        let mut c_in = 1;
        for (i, &c) in ENC_WIDTHS.iter().enumerate() {
            let name = format!("enc.conv{}", i + 1);
            nn::init_conv(&mut w, &name, c, c_in, 5, &mut rng);
            nn::init_batch_norm(&mut w, &name, c);
            c_in = c;
        }
        let seed_len = DEC_SEED_CHANNELS * SEED_SIZE * SEED_SIZE;
        nn::init_fc(&mut w, "dec.fc1", DEC_HIDDEN, embedding_dim, &mut rng);
        nn::init_batch_norm(&mut w, "dec.fc1", DEC_HIDDEN);
        nn::init_fc(&mut w, "dec.fc2", seed_len, DEC_HIDDEN, &mut rng);
        nn::init_batch_norm(&mut w, "dec.fc2", seed_len);
        let mut c_in = DEC_SEED_CHANNELS + ENC_WIDTHS[2];
        for (i, &c) in DEC_WIDTHS.iter().enumerate() {
            let name = format!("dec.up{}", i + 1);
            nn::init_conv(&mut w, &name, c, c_in, 3, &mut rng);
            nn::init_batch_norm(&mut w, &name, c);
            c_in = c;
        }
        nn::init_conv(&mut w, "dec.out", 1, c_in, 3, &mut rng);
        let bias: Vec<f64> = mean_image.pixels().iter().map(|&p| logit(p)).collect();
        w.insert("dec.out.bias", Tensor::new(&[1, IMAGE_SIZE, IMAGE_SIZE], bias)?);
        w.set_hyper("embedding_dim", embedding_dim);
        w.set_hyper("gamma1", loss.gamma1);
        w.set_hyper("gamma2", loss.gamma2);
        w.set_hyper("fr_tag", fr_tag);
        Ok(MorphModel {
            weights: w,
            loss,
            fr_tag: fr_tag.to_string(),
            embedding_dim,
        })
    }

    pub fn from_weights(weights: ModelWeights) -> Result<Self> {
        let ctx = format!("morpher weights '{}'", weights.tag);
        let num = |k: &str| -> Result<f64> {
            weights
                .hyper(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::format(&ctx, format!("missing or bad hyperparameter {k}")))
        };
        let loss = LossWeights {
            gamma1: num("gamma1")?,
            gamma2: num("gamma2")?,
        };
        let embedding_dim = num("embedding_dim")? as usize;
        let fr_tag = weights
            .hyper("fr_tag")
            .ok_or_else(|| Error::format(&ctx, "missing fr_tag"))?
            .to_string();
        if weights.get("dec.fc1.weight")?.shape() != [DEC_HIDDEN, embedding_dim] {
            return Err(Error::format(&ctx, "decoder input layer does not match embedding_dim"));
        }
        weights.get("dec.out.bias")?;
        Ok(MorphModel {
            weights,
            loss,
            fr_tag,
            embedding_dim,
        })
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn enc_weights(&self) -> ModelWeights {
        self.weights.extract("enc.", "morpher-enc")
    }

    pub fn dec_weights(&self) -> ModelWeights {
        self.weights.extract("dec.", "morpher-dec")
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    /// `[B, 1, 32, 32]` images to `[B, C, 4, 4]` features.
    pub(crate) fn encode(&self, g: &mut Graph, bound: &mut Bound<'_>, x: Var) -> Result<Var> {
        let mut h = x;
        for i in 0..ENC_WIDTHS.len() {
            h = bound.conv_bn(g, &format!("enc.conv{}", i + 1), h, 2, 2, true)?;
        }
        Ok(h)
    }

    /// Latents `[B, dim]` and encoder features to images `[B, 1, 32, 32]`.
    pub(crate) fn decode(&self, g: &mut Graph, bound: &mut Bound<'_>, z: Var, z_enc: Var) -> Result<Var> {
        let batch = g.value(z).shape()[0];
        let h = bound.fc(g, "dec.fc1", z)?;
        let h = bound.batch_norm(g, "dec.fc1", h)?;
        let h = g.leaky_relu(h, nn::LEAKY_SLOPE);
        let h = bound.fc(g, "dec.fc2", h)?;
        let h = bound.batch_norm(g, "dec.fc2", h)?;
        let h = g.leaky_relu(h, nn::LEAKY_SLOPE);
        let h = g.reshape(h, &[batch, DEC_SEED_CHANNELS, SEED_SIZE, SEED_SIZE])?;
        let mut h = g.concat_channels(h, z_enc)?;
        for i in 0..DEC_WIDTHS.len() {
            h = g.upsample_nearest(h, 2)?;
            h = bound.conv_bn(g, &format!("dec.up{}", i + 1), h, 1, 1, true)?;
        }
        let h = g.upsample_nearest(h, 2)?;
        let k = bound.var("dec.out.kernel")?;
        let h = g.conv2d(h, k, 1, 1)?;
        let h = g.untied_bias(h, bound.var("dec.out.bias")?)?;
        Ok(g.sigmoid(h))
    }

    /// Eval-mode encoder features for each image.
    pub fn encode_images(&self, images: &[&Image]) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let mut g = Graph::new();
            let x = g.constant(Image::batch(chunk)?);
            let mut bound = Bound::new(&mut g, &self.weights, false, Mode::Eval);
            let f = self.encode(&mut g, &mut bound, x)?;
            out.extend(split_rows(g.value(f))?);
        }
        Ok(out)
    }

    /// Eval-mode decoder images for `(latent, features)` inputs.
    pub fn decode_many(&self, inputs: &[(&Embedding, &Tensor)]) -> Result<Vec<Image>> {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(64) {
            let mut g = Graph::new();
            let z = g.constant(stack_embeddings(chunk.iter().map(|c| c.0), self.embedding_dim)?);
            let f = g.constant(stack_tensors(chunk.iter().map(|c| c.1))?);
            let mut bound = Bound::new(&mut g, &self.weights, false, Mode::Eval);
            let x = self.decode(&mut g, &mut bound, z, f)?;
            out.extend(images_from(g.value(x))?);
        }
        Ok(out)
    }
}

fn split_rows(t: &Tensor) -> Result<Vec<Tensor>> {
    let shape = t.shape();
    let row: usize = shape[1..].iter().product();
    t.data()
        .chunks(row)
        .map(|c| Tensor::new(&shape[1..], c.to_vec()))
        .collect()
}

fn stack_tensors<'a>(ts: impl Iterator<Item = &'a Tensor>) -> Result<Tensor> {
    let ts: Vec<&Tensor> = ts.collect();
    let first = ts.first().ok_or_else(|| Error::arg("empty batch"))?;
    let mut shape = vec![ts.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(ts.len() * first.len());
    for t in &ts {
        if t.shape() != first.shape() {
            return Err(Error::dim("feature maps in a batch must share a shape"));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::new(&shape, data)
}

fn stack_embeddings<'a>(es: impl Iterator<Item = &'a Embedding>, dim: usize) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut n = 0;
    for e in es {
        if e.dim() != dim {
            return Err(Error::dim(format!("latent has dim {}, model expects {dim}", e.dim())));
        }
        data.extend_from_slice(e.as_slice());
        n += 1;
    }
    Tensor::new(&[n, dim], data)
}

/// Decoder output `[B, 1, h, w]` as 8-bit-exact images, so a morph survives
/// a PGM round trip unchanged.
fn images_from(t: &Tensor) -> Result<Vec<Image>> {
    let (h, w) = (t.shape()[2], t.shape()[3]);
    t.data()
        .chunks(h * w)
        .map(|c| Image::from_slice(w, h, c).map(|im| im.quantized()))
        .collect()
}

/// Per-epoch training statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct MorphEpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub pixel: f64,
    pub latent: f64,
}

/// Cyclic partner of each batch position: `i -> i + 1`, last to first.
pub fn batch_partners(n: usize) -> Vec<usize> {
    (0..n).map(|i| (i + 1) % n).collect()
}

/// Worst-case embeddings for a batch under cyclic pairing.
pub fn batch_worst_cases(z: &[Embedding]) -> Result<Vec<Embedding>> {
    if z.len() < 2 {
        return Err(Error::arg("pairing needs a batch of at least 2"));
    }
    batch_partners(z.len())
        .into_iter()
        .enumerate()
        .map(|(i, j)| worst_case_embedding(&z[i], &z[j]))
        .collect()
}

/// Builds the training loss for one batch into `g`; returns
/// `(loss, pixel, latent)` vars.
pub(crate) fn batch_loss(
    g: &mut Graph,
    model: &MorphModel,
    bound: &mut Bound<'_>,
    fr: &FrModel,
    x: Var,
    z_star: Var,
) -> Result<(Var, Var, Var)> {
    let f = model.encode(g, bound, x)?;
    let x_morph = model.decode(g, bound, z_star, f)?;
    let z_morph = fr.embed_var(g, x_morph)?;
    let pixel = g.mse_loss(x_morph, x)?;
    let angles = g.row_angle(z_morph, z_star)?;
    let latent = g.mean(angles);
    let a = g.scale(pixel, model.loss.gamma1);
    let b = g.scale(latent, model.loss.gamma2);
    let loss = g.add(a, b)?;
    Ok((loss, pixel, latent))
}

/// Finite-difference check of the training loss with respect to every
/// morpher weight and the worst-case targets, on one train-mode batch.
pub fn check_loss_gradients(
    model: &MorphModel,
    fr: &FrModel,
    images: &[&Image],
    config: GradCheckConfig,
) -> Result<GradCheckReport> {
    let z = fr.embed_many(images)?;
    let z_star = stack_embeddings(batch_worst_cases(&z)?.iter(), model.embedding_dim)?;
    let x = Image::batch(images)?;
    let names = nn::trainable_names(&model.weights);
    let mut params = names
        .iter()
        .map(|n| model.weights.get(n).cloned())
        .collect::<Result<Vec<_>>>()?;
    params.push(z_star);
    gradient_check(&params, config, |g, v| {
        let vars = names.iter().cloned().zip(v.iter().copied()).collect();
        let mut bound = Bound::from_vars(&model.weights, vars, Mode::Train);
        let xv = g.constant(x.clone());
        Ok(batch_loss(g, model, &mut bound, fr, xv, v[names.len()])?.0)
    })
}

fn mean_image(images: &[&Image]) -> Result<Image> {
    let n = images.len() as f64;
    let first = images.first().ok_or_else(|| Error::arg("no training images"))?;
    let mut acc = vec![0.0; first.pixels().len()];
    for im in images {
        acc.iter_mut().zip(im.pixels()).for_each(|(a, p)| *a += p / n);
    }
    Image::from_slice(first.width(), first.height(), &acc)
}

/// Trains encoder and decoder against the frozen white-box `fr` on the
/// training split. Each batch sample is paired with its cyclic successor.
pub fn train_morpher(
    fr: &FrModel,
    dataset: &Dataset,
    params: &MorphParams,
    seed: u64,
) -> Result<(MorphModel, Vec<MorphEpochLog>)> {
    if params.batch_size < 2 {
        return Err(Error::arg("morpher batch size must be at least 2"));
    }
    let train: Vec<&Image> = dataset.split(Split::Train).into_iter().map(|r| &r.image).collect();
    if train.len() < 2 {
        return Err(Error::arg("morpher training needs at least 2 images"));
    }
    let mut model = MorphModel::init(fr.embedding_dim(), &mean_image(&train)?, fr.tag(), params.loss, seed)?;
    let z_all = fr.embed_many(&train)?;
    let mut trainer = Trainer::new(params.adam, &model.weights)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x3a7f_0c1d);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut logs = Vec::with_capacity(params.epochs);
    for epoch in 0..params.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut pix, mut lat, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(params.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let images: Vec<&Image> = chunk.iter().map(|&i| train[i]).collect();
            let z: Vec<Embedding> = chunk.iter().map(|&i| z_all[i].clone()).collect();
            let z_star = batch_worst_cases(&z)?;
            let mut g = Graph::new();
            let x = g.constant(Image::batch(&images)?);
            let zs = g.constant(stack_embeddings(z_star.iter(), model.embedding_dim)?);
            let mut bound = Bound::new(&mut g, &model.weights, true, Mode::Train);
            let (loss, p, l) = batch_loss(&mut g, &model, &mut bound, fr, x, zs)?;
            g.backward(loss)?;
            sum += g.value(loss).item();
            pix += g.value(p).item();
            lat += g.value(l).item();
            batches += 1;
            let stats = bound.take_stats();
            let vars = bound.vars().clone();
            trainer.step(&mut model.weights, &g, &vars)?;
            nn::apply_stats(&mut model.weights, stats)?;
        }
        let n = batches.max(1) as f64;
        let log = MorphEpochLog {
            epoch,
            loss: sum / n,
            pixel: pix / n,
            latent: lat / n,
        };
        info!(
            "train-morpher epoch {}/{}: loss {:.5} pixel {:.5} latent {:.4}",
            epoch + 1,
            params.epochs,
            log.loss,
            log.pixel,
            log.latent
        );
        logs.push(log);
    }
    let w = &mut model.weights;
    w.set_hyper("epochs", params.epochs);
    w.set_hyper("batch_size", params.batch_size);
    w.set_hyper("adam_alpha", params.adam.alpha);
    w.set_hyper("adam_beta1", params.adam.beta1);
    w.set_hyper("adam_beta2", params.adam.beta2);
    Ok((model, logs))
}

/// Decoder morph of `(x1, x2)` from their worst-case embedding under `fr`.
pub fn generate_morph(
    m: &MorphModel,
    fr: &FrModel,
    x1: &Image,
    x2: &Image,
    enc_source: EncSource,
) -> Result<MorphResult> {
    Ok(generate_morphs(m, fr, &[(x1, x2)], enc_source)?.remove(0))
}

/// Batched [`generate_morph`].
pub fn generate_morphs(
    m: &MorphModel,
    fr: &FrModel,
    pairs: &[(&Image, &Image)],
    enc_source: EncSource,
) -> Result<Vec<MorphResult>> {
    if pairs.is_empty() {
        return Ok(Vec::new());
    }
    let z1 = fr.embed_many(&pairs.iter().map(|p| p.0).collect::<Vec<_>>())?;
    let z2 = fr.embed_many(&pairs.iter().map(|p| p.1).collect::<Vec<_>>())?;
    let z_star = z1
        .iter()
        .zip(&z2)
        .map(|(a, b)| worst_case_embedding(a, b))
        .collect::<Result<Vec<_>>>()?;
    let sources: Vec<&Image> = pairs
        .iter()
        .map(|p| match enc_source {
            EncSource::One => p.0,
            EncSource::Two => p.1,
        })
        .collect();
    let feats = m.encode_images(&sources)?;
    let inputs: Vec<(&Embedding, &Tensor)> = z_star.iter().zip(&feats).collect();
    let images = m.decode_many(&inputs)?;
    let z_morph = fr.embed_many(&images.iter().collect::<Vec<_>>())?;
    let mut out = Vec::with_capacity(pairs.len());
    for (((zs, f), im), zm) in z_star.into_iter().zip(feats).zip(images).zip(z_morph) {
        let target = sources[out.len()];
        out.push(MorphResult {
            kind: MorphKind::WorstCaseApprox,
            latent_loss: angle(&zm, &zs)?,
            pixel_loss: Some(pixel_loss(target, &im)?),
            image: Some(im),
            z_morph: zm,
            enc_source: Some(enc_source),
            decoder_input: Some(DecoderInput {
                latent: zs.clone(),
                features: f,
                target: target.clone(),
            }),
            z_star: zs,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineParams {
    pub n_iters: usize,
    pub step: f64,
}

impl Default for RefineParams {
    fn default() -> Self {
        RefineParams {
            n_iters: 200,
            step: 0.05,
        }
    }
}

/// Gradient descent on the decoder's latent input with all weights frozen,
/// pulling `f(D(z, z_enc))` toward the fixed original target `z_star`.
pub fn refine_latent(m: &MorphModel, fr: &FrModel, result: &MorphResult, params: RefineParams) -> Result<MorphResult> {
    Ok(refine_latents(m, fr, std::slice::from_ref(result), params)?.remove(0))
}

/// Batched [`refine_latent`]; morphs are independent (eval-mode networks).
pub fn refine_latents(
    m: &MorphModel,
    fr: &FrModel,
    results: &[MorphResult],
    params: RefineParams,
) -> Result<Vec<MorphResult>> {
    if params.n_iters == 0 {
        return Err(Error::arg("refinement needs at least one iteration"));
    }
    if !params.step.is_finite() || params.step < 0.0 {
        return Err(Error::arg(format!(
            "refinement step must be finite and >= 0, got {}",
            params.step
        )));
    }
    let mut out = Vec::with_capacity(results.len());
    for chunk in results.chunks(64) {
        out.extend(refine_chunk(m, fr, chunk, params)?);
    }
    Ok(out)
}

fn refine_chunk(
    m: &MorphModel,
    fr: &FrModel,
    results: &[MorphResult],
    params: RefineParams,
) -> Result<Vec<MorphResult>> {
    let dim = m.embedding_dim;
    let mut latents = Vec::with_capacity(results.len());
    let mut feats = Vec::with_capacity(results.len());
    for r in results {
        let input = r
            .decoder_input
            .as_ref()
            .ok_or_else(|| Error::arg(format!("{} morph has no decoder input to refine", r.kind)))?;
        latents.push(input.latent.as_slice().to_vec());
        feats.push(&input.features);
    }
    let feats = stack_tensors(feats.into_iter())?;
    let target = stack_embeddings(results.iter().map(|r| &r.z_star), dim)?;
    let n = results.len();
    let mut best: Vec<(f64, Option<Vec<f64>>)> = vec![(f64::INFINITY, None); n];
    for iter in 0..=params.n_iters {
        let mut g = Graph::new();
        let z = g.param(Tensor::new(&[n, dim], latents.concat())?);
        let f = g.constant(feats.clone());
        let t = g.constant(target.clone());
        let mut bound = Bound::new(&mut g, &m.weights, false, Mode::Eval);
        let x = m.decode(&mut g, &mut bound, z, f)?;
        let zm = fr.embed_var(&mut g, x)?;
        let angles = g.row_angle(zm, t)?;
        let total = g.sum(angles);
        for (i, &a) in g.value(angles).data().iter().enumerate() {
            if a < best[i].0 {
                best[i] = (a, (iter > 0).then(|| latents[i].clone()));
            }
        }
        if iter == params.n_iters {
            break;
        }
        g.backward(total)?;
        let grad = g.grad(z);
        for (i, row) in latents.iter_mut().enumerate() {
            let gr = &grad.data()[i * dim..(i + 1) * dim];
            let moved: Vec<f64> = row.iter().zip(gr).map(|(v, d)| v - params.step * d).collect();
            *row = Embedding::normalize(&moved)?.into_vec();
        }
    }
    let mut out = Vec::with_capacity(n);
    for (r, (_, z)) in results.iter().zip(best) {
        let Some(z) = z else {
            out.push(r.clone());
            continue;
        };
        let z = Embedding::new(z)?;
        let input = r.decoder_input.as_ref().expect("checked above");
        let image = m.decode_many(&[(&z, &input.features)])?.remove(0);
        let z_morph = fr.embed(&image)?;
        let latent_loss = angle(&z_morph, &r.z_star)?;
        // quantisation can undo a marginal in-graph gain
        if latent_loss >= r.latent_loss {
            out.push(r.clone());
            continue;
        }
        out.push(MorphResult {
            kind: MorphKind::ImprovedApprox,
            pixel_loss: Some(pixel_loss(&input.target, &image)?),
            image: Some(image),
            z_morph,
            latent_loss,
            enc_source: r.enc_source,
            decoder_input: Some(DecoderInput {
                latent: z,
                features: input.features.clone(),
                target: input.target.clone(),
            }),
            z_star: r.z_star.clone(),
        });
    }
    Ok(out)
}

/// Pixel-wise blend `(1 - alpha) x1 + alpha x2`.
pub fn blend_images(x1: &Image, x2: &Image, alpha: f64) -> Result<Image> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::arg(format!("blend alpha must be in [0, 1], got {alpha}")));
    }
    if (x1.width(), x1.height()) != (x2.width(), x2.height()) {
        return Err(Error::dim("blend images must share a size"));
    }
    let px: Vec<f64> = x1
        .pixels()
        .iter()
        .zip(x2.pixels())
        .map(|(a, b)| (1.0 - alpha) * a + alpha * b)
        .collect();
    Image::from_slice(x1.width(), x1.height(), &px)
}

/// The blend baseline morph with its embedding-space diagnostics.
pub fn blend_baseline(fr: &FrModel, x1: &Image, x2: &Image, alpha: f64) -> Result<MorphResult> {
    let image = blend_images(x1, x2, alpha)?;
    let e = fr.embed_many(&[x1, x2, &image])?;
    let z_star = worst_case_embedding(&e[0], &e[1])?;
    Ok(MorphResult {
        kind: MorphKind::Blend,
        latent_loss: angle(&e[2], &z_star)?,
        pixel_loss: Some(pixel_loss(x1, &image)?),
        image: Some(image),
        z_morph: e[2].clone(),
        z_star,
        enc_source: None,
        decoder_input: None,
    })
}

/// The ideal morph: no image, its embedding is `z*` itself.
pub fn theoretical_worst_case(fr: &FrModel, x1: &Image, x2: &Image) -> Result<MorphResult> {
    let e = fr.embed_many(&[x1, x2])?;
    let z_star = worst_case_embedding(&e[0], &e[1])?;
    Ok(MorphResult {
        kind: MorphKind::Theoretical,
        image: None,
        z_morph: z_star.clone(),
        z_star,
        latent_loss: 0.0,
        pixel_loss: None,
        enc_source: None,
        decoder_input: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fr::Role;
    use crate::sphere::Embedding;

    fn faces(n: usize) -> Vec<Image> {
        let spec = |i: usize| {
            crate::synth::IdentitySpec::new(i as u32, &[0.2 + 0.15 * i as f64; crate::synth::N_PARAMS]).unwrap()
        };
        (0..n)
            .map(|i| crate::synth::render_identity(&spec(i), &crate::synth::Nuisance::default(), i as u64).unwrap())
            .collect()
    }

    fn models() -> (FrModel, MorphModel, Vec<Image>) {
        let fr = FrModel::init(Role::White, 8, 1);
        let ims = faces(4);
        let refs: Vec<&Image> = ims.iter().collect();
        let m = MorphModel::init(8, &mean_image(&refs).unwrap(), fr.tag(), LossWeights::default(), 2).unwrap();
        (fr, m, ims)
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let (fr, m, ims) = models();
        let refs: Vec<&Image> = ims.iter().collect();
        let cfg = GradCheckConfig {
            coords_per_param: 4,
            step: 1e-7,
            ..Default::default()
        };
        let r = check_loss_gradients(&m, &fr, &refs, cfg).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn frozen_fr_receives_no_gradient() {
        let (fr, m, ims) = models();
        let refs: Vec<&Image> = ims.iter().collect();
        let z = fr.embed_many(&refs).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Image::batch(&refs).unwrap());
        let zs = g.constant(stack_embeddings(batch_worst_cases(&z).unwrap().iter(), 8).unwrap());
        let mut bound = Bound::new(&mut g, &m.weights, true, Mode::Train);
        let (loss, _, _) = batch_loss(&mut g, &m, &mut bound, &fr, x, zs).unwrap();
        g.backward(loss).unwrap();
        let trainable = bound
            .vars()
            .values()
            .filter(|&&v| g.grad(v).data().iter().any(|d| *d != 0.0))
            .count();
        assert!(trainable > 0);
        // every differentiable leaf reachable from the loss is a morpher weight
        let own: std::collections::BTreeSet<Var> = bound.vars().values().copied().collect();
        let (mut stack, mut seen) = (vec![loss], std::collections::BTreeSet::new());
        while let Some(v) = stack.pop() {
            if seen.insert(v) {
                stack.extend(g.inputs(v));
            }
        }
        let leaves: Vec<Var> = seen
            .into_iter()
            .filter(|&v| g.requires_grad(v) && g.inputs(v).is_empty())
            .collect();
        assert!(leaves.iter().all(|v| own.contains(v)));
        assert!(leaves.len() > own.len() / 2);
    }

    #[test]
    fn cyclic_partners() {
        assert_eq!(batch_partners(4), vec![1, 2, 3, 0]);
        assert_eq!(batch_partners(2), vec![1, 0]);
        let e = Embedding::basis(3, 0);
        assert!(matches!(batch_worst_cases(std::slice::from_ref(&e)), Err(Error::Argument(_))));
        assert!(matches!(
            batch_worst_cases(&[e.clone(), e.neg()]),
            Err(Error::DegeneratePair(_))
        ));
    }

    #[test]
    fn blend_examples() {
        let fr = FrModel::init(Role::White, 8, 1);
        let ims = faces(2);
        assert_eq!(
            blend_baseline(&fr, &ims[0], &ims[1], 0.0).unwrap().image.unwrap(),
            ims[0]
        );
        assert_eq!(
            blend_baseline(&fr, &ims[0], &ims[1], 1.0).unwrap().image.unwrap(),
            ims[1]
        );
        let zero = Image::from_slice(32, 32, &[0.0; 1024]).unwrap();
        let one = Image::from_slice(32, 32, &[1.0; 1024]).unwrap();
        let mid = blend_images(&zero, &one, 0.5).unwrap();
        assert!(mid.pixels().iter().all(|&p| p == 0.5));
        for bad in [-0.1, 1.1, f64::NAN] {
            assert!(matches!(
                blend_baseline(&fr, &ims[0], &ims[1], bad),
                Err(Error::Argument(_))
            ));
        }
    }

    #[test]
    fn theoretical_kind_is_the_worst_case_embedding() {
        let fr = FrModel::init(Role::White, 8, 1);
        let ims = faces(2);
        let r = theoretical_worst_case(&fr, &ims[0], &ims[1]).unwrap();
        let e = fr.embed_many(&[&ims[0], &ims[1]]).unwrap();
        assert_eq!(r.z_morph, worst_case_embedding(&e[0], &e[1]).unwrap());
        assert_eq!(r.latent_loss, 0.0);
        assert!(r.image.is_none());
    }

    #[test]
    fn refinement_never_worsens_and_zero_step_is_identity() {
        let (fr, m, ims) = models();
        let pairs = [(&ims[0], &ims[1]), (&ims[2], &ims[3])];
        let base = generate_morphs(&m, &fr, &pairs, EncSource::One).unwrap();
        let still = refine_latents(&m, &fr, &base, RefineParams { n_iters: 3, step: 0.0 }).unwrap();
        for (a, b) in base.iter().zip(&still) {
            assert_eq!(a.image, b.image);
            assert_eq!(a.latent_loss, b.latent_loss);
        }
        let moved = refine_latents(&m, &fr, &base, RefineParams { n_iters: 5, step: 0.5 }).unwrap();
        for (a, b) in base.iter().zip(&moved) {
            assert!(b.latent_loss <= a.latent_loss);
        }
        assert!(refine_latents(&m, &fr, &base, RefineParams { n_iters: 0, step: 0.1 }).is_err());
        assert!(refine_latents(&m, &fr, &base, RefineParams { n_iters: 1, step: -1.0 }).is_err());
        let theo = theoretical_worst_case(&fr, &ims[0], &ims[1]).unwrap();
        assert!(matches!(
            refine_latent(&m, &fr, &theo, RefineParams::default()),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn generated_morphs_are_quantised_and_weights_round_trip() {
        let (fr, m, ims) = models();
        let r = generate_morph(&m, &fr, &ims[0], &ims[1], EncSource::Two).unwrap();
        let im = r.image.unwrap();
        assert_eq!(im, im.quantized());
        let back = MorphModel::from_weights(ModelWeights::parse(&m.weights().to_text()).unwrap()).unwrap();
        assert_eq!(back.weights(), m.weights());
        assert_eq!(
            "improved_approx".parse::<MorphKind>().unwrap(),
            MorphKind::ImprovedApprox
        );
        assert!("morphy".parse::<MorphKind>().is_err());
    }
}
