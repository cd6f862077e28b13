//! Staged experiment runner: every stage reads its inputs from and writes
//! its artifacts into one output directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;
use sha2::{Digest, Sha256};

use crate::autodiff::AdamConfig;
use crate::error::{Error, Result};
use crate::eval::{cross_system_eval, render_svg, PairMorph, VulnerabilityReport};
use crate::fr::{calibrate_threshold, validation_scores, DecisionThreshold, FrModel, FrParams, Role};
use crate::image::Image;
use crate::io::{read_text, require, write_text};
use crate::morph::{
    blend_baseline, generate_morphs, refine_latents, theoretical_worst_case, EncSource, LossWeights, MorphKind,
    MorphModel, MorphParams, MorphResult, RefineParams,
};
use crate::synth::{generate_dataset, select_morph_pairs, Dataset, DatasetParams, MorphPair};
use crate::weights::ModelWeights;

pub const CONFIG_VERSION: u32 = 1;

/// Every tunable of a run. Serialised as a flat `key = value` file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub n_identities: usize,
    pub images_per_identity: usize,
    pub train_identities: usize,
    pub embedding_dim: usize,
    pub fr_epochs: usize,
    pub fr_batch: usize,
    pub fr_lr: f64,
    pub fr_scale: f64,
    pub fr_margin: f64,
    pub fr_aug_shift: usize,
    pub fr_aug_brightness: f64,
    pub morph_epochs: usize,
    pub morph_batch: usize,
    pub morph_lr: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub iters: usize,
    pub step: f64,
    pub pairs: usize,
    pub bins: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let fr = FrParams::default();
        let morph = MorphParams::default();
        let refine = RefineParams::default();
        let data = DatasetParams::default();
        RunConfig {
            seed: data.seed,
            n_identities: data.n_identities,
            images_per_identity: data.images_per_identity,
            train_identities: 100,
            embedding_dim: fr.embedding_dim,
            fr_epochs: fr.epochs,
            fr_batch: fr.batch_size,
            fr_lr: fr.adam.alpha,
            fr_scale: fr.softmax_scale,
            fr_margin: fr.margin,
            fr_aug_shift: fr.augment_shift,
            fr_aug_brightness: fr.augment_brightness,
            morph_epochs: morph.epochs,
            morph_batch: morph.batch_size,
            morph_lr: morph.adam.alpha,
            gamma1: morph.loss.gamma1,
            gamma2: morph.loss.gamma2,
            iters: refine.n_iters,
            step: refine.step,
            pairs: 50,
            bins: crate::eval::DEFAULT_BINS,
        }
    }
}

macro_rules! config_fields {
    ($m:ident) => {
        $m!(
            seed,
            n_identities,
            images_per_identity,
            train_identities,
            embedding_dim,
            fr_epochs,
            fr_batch,
            fr_lr,
            fr_scale,
            fr_margin,
            fr_aug_shift,
            fr_aug_brightness,
            morph_epochs,
            morph_batch,
            morph_lr,
            gamma1,
            gamma2,
            iters,
            step,
            pairs,
            bins
        )
    };
}

impl RunConfig {
    pub fn keys() -> &'static [&'static str] {
        macro_rules! names {
            ($($f:ident),*) => { &[$(stringify!($f)),*] };
        }
        config_fields!(names)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        macro_rules! pairs {
            ($($f:ident),*) => { vec![$((stringify!($f), self.$f.to_string())),*] };
        }
        config_fields!(pairs)
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::format("config", format!("bad value '{v}' for {key}")))
        }
        macro_rules! assign {
            ($($f:ident),*) => {
                match key {
                    $(stringify!($f) => self.$f = parse(key, value)?,)*
                    "config_version" => {
                        if value != CONFIG_VERSION.to_string() {
                            return Err(Error::format("config", format!("unsupported config_version {value}")));
                        }
                    }
                    other => return Err(Error::format("config", format!("unknown key '{other}'"))),
                }
            };
        }
        config_fields!(assign);
        Ok(())
    }

    /// Parses a config file: `key = value` lines, `#` comments. Keys not
    /// given keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format("config", format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if seen.insert(k.to_string(), ()).is_some() {
                return Err(Error::format("config", format!("line {}: duplicate key {k}", n + 1)));
            }
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::arg(format!("config: {m}")));
        if self.train_identities < 2 || self.train_identities + 2 > self.n_identities {
            return bad("need at least 2 train and 2 validation identities");
        }
        if self.fr_batch < 2 || self.morph_batch < 2 {
            return bad("batch sizes must be at least 2");
        }
        if self.embedding_dim < 2 {
            return bad("embedding_dim must be at least 2");
        }
        if self.iters == 0 {
            return bad("iters must be positive");
        }
        if !(self.step.is_finite() && self.step >= 0.0) {
            return bad("step must be finite and non-negative");
        }
        if self.pairs == 0 || self.bins == 0 {
            return bad("pairs and bins must be positive");
        }
        for (k, v) in [("fr_lr", self.fr_lr), ("morph_lr", self.morph_lr)] {
            if !(v.is_finite() && v > 0.0) {
                return bad(&format!("{k} must be positive"));
            }
        }
        Ok(())
    }

    /// Canonical text form: every key, fixed order.
    pub fn to_text(&self) -> String {
        let mut s = format!("config_version = {CONFIG_VERSION}\n");
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// SHA-256 of the canonical text, hex encoded.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn dataset_params(&self) -> DatasetParams {
        DatasetParams {
            n_identities: self.n_identities,
            images_per_identity: self.images_per_identity,
            train_fraction: self.train_identities as f64 / self.n_identities as f64,
            seed: self.seed,
        }
    }

    pub fn fr_params(&self) -> FrParams {
        FrParams {
            embedding_dim: self.embedding_dim,
            epochs: self.fr_epochs,
            batch_size: self.fr_batch,
            adam: AdamConfig {
                alpha: self.fr_lr,
                ..AdamConfig::default()
            },
            softmax_scale: self.fr_scale,
            margin: self.fr_margin,
            augment_shift: self.fr_aug_shift,
            augment_brightness: self.fr_aug_brightness,
        }
    }

    pub fn morph_params(&self) -> MorphParams {
        MorphParams {
            epochs: self.morph_epochs,
            batch_size: self.morph_batch,
            loss: LossWeights {
                gamma1: self.gamma1,
                gamma2: self.gamma2,
            },
            adam: AdamConfig {
                alpha: self.morph_lr,
                ..AdamConfig::default()
            },
        }
    }

    pub fn refine_params(&self) -> RefineParams {
        RefineParams {
            n_iters: self.iters,
            step: self.step,
        }
    }

    pub fn fr_seed(&self, role: Role) -> u64 {
        match role {
            Role::White => self.seed.wrapping_add(1),
            Role::Black => self.seed.wrapping_add(2),
        }
    }

    pub fn morph_seed(&self) -> u64 {
        self.seed.wrapping_add(3)
    }

    pub fn score_seed(&self) -> u64 {
        self.seed.wrapping_add(4)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    GenData,
    TrainFr,
    Calibrate,
    TrainMorpher,
    Morph,
    Refine,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::GenData,
        Stage::TrainFr,
        Stage::Calibrate,
        Stage::TrainMorpher,
        Stage::Morph,
        Stage::Refine,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::TrainFr => "train-fr",
            Stage::Calibrate => "calibrate",
            Stage::TrainMorpher => "train-morpher",
            Stage::Morph => "morph",
            Stage::Refine => "refine",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::arg(format!("unknown stage '{s}'")))
    }
}

/// Process exit status for an error: 2 argument, 3 missing upstream
/// artifact, 4 malformed or mismatched file, 1 anything else.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Argument(_) => 2,
        Error::StageDependency { .. } => 3,
        Error::Format { .. } => 4,
        _ => 1,
    }
}

/// Artifact locations inside a run directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn manifest(&self) -> PathBuf {
        self.data_dir().join("manifest.txt")
    }

    pub fn fr_weights(&self, role: Role) -> PathBuf {
        self.root.join(format!("models/fr_{role}.weights.json"))
    }

    pub fn threshold(&self, role: Role) -> PathBuf {
        self.root.join(format!("calibration/{role}.threshold.txt"))
    }

    pub fn calibration_scores(&self, role: Role) -> PathBuf {
        self.root.join(format!("calibration/{role}.scores.csv"))
    }

    pub fn morpher(&self) -> PathBuf {
        self.root.join("models/morpher.weights.json")
    }

    pub fn pairs(&self) -> PathBuf {
        self.root.join("morphs/pairs.csv")
    }

    pub fn morphs(&self) -> PathBuf {
        self.root.join("morphs/morphs.csv")
    }

    pub fn refined(&self) -> PathBuf {
        self.root.join("refined/morphs.csv")
    }

    pub fn report(&self, role: Role) -> PathBuf {
        self.root.join(format!("reports/{role}.report.json"))
    }

    pub fn stamp(&self, stage: Stage, role: Option<Role>) -> PathBuf {
        let suffix = role.map_or(String::new(), |r| format!("-{r}"));
        self.root.join(format!("stamps/{}{suffix}.txt", stage.name()))
    }
}

const THRESHOLD_HEADER: &str = "morphlab-threshold 1";
const PAIRS_HEADER: &str = "morphlab-pairs 1";
const MORPHS_HEADER: &str = "morphlab-morphs 1";
const STAMP_HEADER: &str = "morphlab-stamp 1";

/// `key=value` body after a fixed header line.
fn parse_kv(text: &str, header: &str, ctx: &str) -> Result<BTreeMap<String, String>> {
    let mut lines = text.lines();
    if lines.next() != Some(header) {
        return Err(Error::format(ctx, format!("expected header '{header}'")));
    }
    let mut out = BTreeMap::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(ctx, format!("bad line '{line}'")))?;
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::format(ctx, format!("duplicate key {k}")));
        }
    }
    Ok(out)
}

fn kv_field<T: FromStr>(m: &BTreeMap<String, String>, key: &str, ctx: &str) -> Result<T> {
    m.get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::format(ctx, format!("missing or bad {key}")))
}

pub fn threshold_to_text(t: &DecisionThreshold, role: Role, cfg: &RunConfig) -> String {
    format!(
        "{THRESHOLD_HEADER}\nrole={role}\nt={}\nfmr={}\nfnmr={}\ncalibration_set={}\nconfig_hash={}\nseed={}\n",
        t.t,
        t.fmr,
        t.fnmr,
        t.calibration_set,
        cfg.hash(),
        cfg.seed
    )
}

pub fn parse_threshold(text: &str) -> Result<(Role, DecisionThreshold)> {
    let ctx = "threshold";
    let m = parse_kv(text, THRESHOLD_HEADER, ctx)?;
    let role: Role = kv_field::<String>(&m, "role", ctx)?
        .parse()
        .map_err(|_| Error::format(ctx, "bad role"))?;
    let t: f64 = kv_field(&m, "t", ctx)?;
    let fmr: f64 = kv_field(&m, "fmr", ctx)?;
    let fnmr: f64 = kv_field(&m, "fnmr", ctx)?;
    if !t.is_finite() || !(0.0..=1.0).contains(&fmr) || !(0.0..=1.0).contains(&fnmr) {
        return Err(Error::format(ctx, "values out of range"));
    }
    Ok((
        role,
        DecisionThreshold {
            t,
            fmr,
            fnmr,
            calibration_set: kv_field(&m, "calibration_set", ctx)?,
        },
    ))
}

/// Runs stages against one output directory.
pub struct Pipeline {
    pub config: RunConfig,
    pub layout: Layout,
}

impl Pipeline {
    pub fn new(config: RunConfig, out: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        Ok(Pipeline {
            config,
            layout: Layout::new(out),
        })
    }

    /// Runs one stage; `role` limits FR stages to one system (default both).
    pub fn run(&self, stage: Stage, role: Option<Role>) -> Result<()> {
        info!("stage {} (config {})", stage.name(), &self.config.hash()[..12]);
        let roles: Vec<Role> = role.map_or(vec![Role::White, Role::Black], |r| vec![r]);
        match stage {
            Stage::GenData => self.gen_data()?,
            Stage::TrainFr => {
                for r in &roles {
                    self.train_fr(*r)?;
                }
            }
            Stage::Calibrate => {
                for r in &roles {
                    self.calibrate(*r)?;
                }
            }
            Stage::TrainMorpher => self.train_morpher()?,
            Stage::Morph => self.morph()?,
            Stage::Refine => self.refine()?,
            Stage::Evaluate => self.evaluate()?,
            Stage::Report => self.report()?,
        }
        let stamp_role = match stage {
            Stage::TrainFr | Stage::Calibrate => role,
            _ => None,
        };
        write_text(
            &self.layout.stamp(stage, stamp_role),
            &format!(
                "{STAMP_HEADER}\nstage={}\nconfig_hash={}\nseed={}\n",
                stage.name(),
                self.config.hash(),
                self.config.seed
            ),
        )
    }

    /// Every stage in order.
    pub fn run_all(&self) -> Result<()> {
        for stage in Stage::ALL {
            self.run(stage, None)?;
        }
        Ok(())
    }

    fn gen_data(&self) -> Result<()> {
        let d = generate_dataset(&self.config.dataset_params())?;
        d.save(&self.layout.data_dir())?;
        write_text(&self.layout.root.join("config.txt"), &self.config.to_text())
    }

    fn load_dataset(&self, stage: Stage) -> Result<Dataset> {
        require(stage.name(), &self.layout.manifest())?;
        Dataset::load(&self.layout.data_dir())
    }

    fn load_fr(&self, stage: Stage, role: Role) -> Result<FrModel> {
        let p = self.layout.fr_weights(role);
        require(stage.name(), &p)?;
        FrModel::from_weights(ModelWeights::load(&p)?)
    }

    fn load_threshold(&self, stage: Stage, role: Role) -> Result<DecisionThreshold> {
        let p = self.layout.threshold(role);
        require(stage.name(), &p)?;
        let (r, t) = parse_threshold(&read_text(&p)?)?;
        if r != role {
            return Err(Error::format(
                p.display().to_string(),
                format!("threshold is for {r}, expected {role}"),
            ));
        }
        Ok(t)
    }

    fn stamp_weights(&self, w: &mut ModelWeights) {
        w.set_hyper("config_hash", self.config.hash());
        w.set_hyper("run_seed", self.config.seed);
    }

    fn train_fr(&self, role: Role) -> Result<()> {
        let d = self.load_dataset(Stage::TrainFr)?;
        let (model, _) = crate::fr::train_fr(&d, role, &self.config.fr_params(), self.config.fr_seed(role))?;
        let mut w = model.weights().clone();
        self.stamp_weights(&mut w);
        w.save(&self.layout.fr_weights(role))
    }

    fn calibrate(&self, role: Role) -> Result<()> {
        let fr = self.load_fr(Stage::Calibrate, role)?;
        let d = self.load_dataset(Stage::Calibrate)?;
        let sets = validation_scores(&fr, &d, self.config.score_seed())?;
        let t = calibrate_threshold(&sets.genuine, &sets.impostor, "validation")?;
        info!("calibrate[{role}]: t={:.4} fmr={:.5} fnmr={:.4}", t.t, t.fmr, t.fnmr);
        let mut csv = String::from("kind,angle\n");
        for (kind, v) in [("genuine", &sets.genuine), ("impostor", &sets.impostor)] {
            for a in v.iter() {
                let _ = writeln!(csv, "{kind},{a}");
            }
        }
        write_text(&self.layout.calibration_scores(role), &csv)?;
        write_text(&self.layout.threshold(role), &threshold_to_text(&t, role, &self.config))
    }

    fn train_morpher(&self) -> Result<()> {
        let fr = self.load_fr(Stage::TrainMorpher, Role::White)?;
        let d = self.load_dataset(Stage::TrainMorpher)?;
        let (m, _) = crate::morph::train_morpher(&fr, &d, &self.config.morph_params(), self.config.morph_seed())?;
        let mut w = m.weights().clone();
        self.stamp_weights(&mut w);
        w.save(&self.layout.morpher())
    }

    fn load_morpher(&self, stage: Stage, fr: &FrModel) -> Result<MorphModel> {
        let p = self.layout.morpher();
        require(stage.name(), &p)?;
        let m = MorphModel::from_weights(ModelWeights::load(&p)?)?;
        if m.fr_tag != fr.tag() || m.embedding_dim() != fr.embedding_dim() {
            return Err(Error::format(
                p.display().to_string(),
                format!("morpher was trained against '{}', not '{}'", m.fr_tag, fr.tag()),
            ));
        }
        Ok(m)
    }

    fn morph(&self) -> Result<()> {
        let fr = self.load_fr(Stage::Morph, Role::White)?;
        let m = self.load_morpher(Stage::Morph, &fr)?;
        let d = self.load_dataset(Stage::Morph)?;
        let pairs = select_morph_pairs(&d, &fr, self.config.pairs)?;
        write_text(&self.layout.pairs(), &pairs_to_csv(&pairs))?;
        let mut morphs = Vec::new();
        for p in &pairs {
            morphs.push(PairMorph {
                pair_id: p.pair_id,
                result: blend_baseline(&fr, &p.x1, &p.x2, 0.5)?,
            });
        }
        morphs.extend(self.approximations(&fr, &m, &pairs)?);
        for p in &pairs {
            morphs.push(PairMorph {
                pair_id: p.pair_id,
                result: theoretical_worst_case(&fr, &p.x1, &p.x2)?,
            });
        }
        self.write_morphs(&self.layout.morphs(), "morphs", &fr, &pairs, &morphs)
    }

    fn approximations(&self, fr: &FrModel, m: &MorphModel, pairs: &[MorphPair]) -> Result<Vec<PairMorph>> {
        let xs: Vec<(&Image, &Image)> = pairs.iter().map(|p| (&p.x1, &p.x2)).collect();
        let mut out = Vec::new();
        for src in [EncSource::One, EncSource::Two] {
            for (p, r) in pairs.iter().zip(generate_morphs(m, fr, &xs, src)?) {
                out.push(PairMorph {
                    pair_id: p.pair_id,
                    result: r,
                });
            }
        }
        Ok(out)
    }

    /// Saves image morphs as PGMs plus one sidecar row per morph.
    fn write_morphs(
        &self,
        csv_path: &Path,
        dir: &str,
        fr: &FrModel,
        pairs: &[MorphPair],
        morphs: &[PairMorph],
    ) -> Result<()> {
        let scores = crate::eval::attack_scores(fr, morphs, pairs)?;
        let mut csv = format!("{MORPHS_HEADER}\npair_id,kind,enc_source,file,pixel_loss,latent_loss,theta1,theta2\n");
        for (m, s) in morphs.iter().zip(&scores) {
            let r = &m.result;
            let file = match &r.image {
                Some(im) => {
                    let src = r.enc_source.map_or(String::new(), |e| format!("_{}", e.as_str()));
                    let name = format!("{dir}/{}{src}/pair{:04}.pgm", r.kind, m.pair_id);
                    im.save_pgm(&self.layout.root.join(&name))?;
                    name
                }
                None => String::new(),
            };
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{},{},{}",
                m.pair_id,
                r.kind,
                r.enc_source.map_or("", |e| e.as_str()),
                file,
                r.pixel_loss.map_or(String::new(), |v| v.to_string()),
                r.latent_loss,
                s.theta1,
                s.theta2
            );
        }
        write_text(csv_path, &csv)
    }

    fn load_pairs(&self, stage: Stage, d: &Dataset) -> Result<Vec<MorphPair>> {
        let p = self.layout.pairs();
        require(stage.name(), &p)?;
        parse_pairs(&read_text(&p)?, d)
    }

    fn refine(&self) -> Result<()> {
        require(Stage::Refine.name(), &self.layout.morphs())?;
        let fr = self.load_fr(Stage::Refine, Role::White)?;
        let m = self.load_morpher(Stage::Refine, &fr)?;
        let d = self.load_dataset(Stage::Refine)?;
        let pairs = self.load_pairs(Stage::Refine, &d)?;
        let approx = self.approximations(&fr, &m, &pairs)?;
        let results: Vec<MorphResult> = approx.iter().map(|a| a.result.clone()).collect();
        let refined = refine_latents(&m, &fr, &results, self.config.refine_params())?;
        let morphs: Vec<PairMorph> = approx
            .iter()
            .zip(refined)
            .map(|(a, mut r)| {
                // an iterate that never beat its start is still reported as
                // the improved kind, unchanged
                r.kind = MorphKind::ImprovedApprox;
                PairMorph {
                    pair_id: a.pair_id,
                    result: r,
                }
            })
            .collect();
        self.write_morphs(&self.layout.refined(), "refined", &fr, &pairs, &morphs)
    }

    fn load_morph_csv(&self, stage: Stage, path: &Path) -> Result<Vec<PairMorph>> {
        require(stage.name(), path)?;
        let rows = parse_morphs_csv(&read_text(path)?)?;
        rows.into_iter()
            .map(|row| {
                let image = if row.file.is_empty() {
                    None
                } else {
                    Some(Image::load_pgm(&self.layout.root.join(&row.file))?)
                };
                Ok(PairMorph {
                    pair_id: row.pair_id,
                    result: placeholder_result(row.kind, row.enc_source, image),
                })
            })
            .collect()
    }

    fn evaluate(&self) -> Result<()> {
        let tw = self.load_threshold(Stage::Evaluate, Role::White)?;
        let tb = self.load_threshold(Stage::Evaluate, Role::Black)?;
        let white = self.load_fr(Stage::Evaluate, Role::White)?;
        let black = self.load_fr(Stage::Evaluate, Role::Black)?;
        let d = self.load_dataset(Stage::Evaluate)?;
        let pairs = self.load_pairs(Stage::Evaluate, &d)?;
        let mut morphs = self.load_morph_csv(Stage::Evaluate, &self.layout.morphs())?;
        morphs.extend(self.load_morph_csv(Stage::Evaluate, &self.layout.refined())?);
        let (mut rw, mut rb) = cross_system_eval(
            &morphs,
            &pairs,
            &d,
            (&white, &tw),
            (&black, &tb),
            self.config.bins,
            self.config.score_seed(),
        )?;
        for (role, r) in [(Role::White, &mut rw), (Role::Black, &mut rb)] {
            r.provenance.insert("config_hash".into(), self.config.hash());
            r.provenance.insert("seed".into(), self.config.seed.to_string());
            r.provenance.insert("role".into(), role.to_string());
            write_text(&self.layout.report(role), &r.to_json())?;
            write_text(
                &self.layout.root.join(format!("reports/{role}.scores.csv")),
                &r.scores_csv(),
            )?;
        }
        Ok(())
    }

    fn report(&self) -> Result<()> {
        let mut table = String::from("fr_tag,kind,count,mmpmr,median_max_theta,t\n");
        for role in [Role::White, Role::Black] {
            let p = self.layout.report(role);
            require(Stage::Report.name(), &p)?;
            let r = VulnerabilityReport::parse(&read_text(&p)?)?;
            write_text(&self.layout.root.join(format!("reports/{role}.svg")), &render_svg(&r))?;
            table.push_str(
                r.summary_csv()
                    .lines()
                    .skip(1)
                    .fold(String::new(), |a, l| a + l + "\n")
                    .as_str(),
            );
        }
        write_text(&self.layout.root.join("reports/summary.csv"), &table)
    }
}

/// Result shell for a morph loaded from disk; only kind, source and image
/// matter to scoring. The theoretical kind is rebuilt per FR system.
fn placeholder_result(kind: MorphKind, enc_source: Option<EncSource>, image: Option<Image>) -> MorphResult {
    let z = crate::sphere::Embedding::basis(2, 0);
    MorphResult {
        kind,
        image,
        z_star: z.clone(),
        z_morph: z,
        latent_loss: 0.0,
        pixel_loss: None,
        enc_source,
        decoder_input: None,
    }
}

fn pairs_to_csv(pairs: &[MorphPair]) -> String {
    let mut s = format!("{PAIRS_HEADER}\npair_id,identity1,identity2,mean_angle,x1,x2,probe1,probe2\n");
    for p in pairs {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            p.pair_id,
            p.identity1,
            p.identity2,
            p.mean_angle,
            p.files.join(",")
        );
    }
    s
}

/// Rebuilds morph pairs from `pairs.csv` and the dataset images.
pub fn parse_pairs(text: &str, d: &Dataset) -> Result<Vec<MorphPair>> {
    let ctx = "pairs";
    let mut lines = text.lines();
    if lines.next() != Some(PAIRS_HEADER) {
        return Err(Error::format(ctx, format!("expected header '{PAIRS_HEADER}'")));
    }
    if lines.next() != Some("pair_id,identity1,identity2,mean_angle,x1,x2,probe1,probe2") {
        return Err(Error::format(ctx, "bad column header"));
    }
    let by_file: BTreeMap<&str, &Image> = d.records.iter().map(|r| (r.file.as_str(), &r.image)).collect();
    let image = |f: &str| {
        by_file
            .get(f)
            .map(|im| (*im).clone())
            .ok_or_else(|| Error::format(ctx, format!("unknown image {f}")))
    };
    let mut out = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(Error::format(ctx, format!("expected 8 fields: '{line}'")));
        }
        let num = |s: &str| {
            s.parse::<u64>()
                .map_err(|_| Error::format(ctx, format!("bad number '{s}'")))
        };
        out.push(MorphPair {
            pair_id: num(f[0])? as usize,
            identity1: num(f[1])? as u32,
            identity2: num(f[2])? as u32,
            mean_angle: f[3].parse().map_err(|_| Error::format(ctx, "bad mean_angle"))?,
            x1: image(f[4])?,
            x2: image(f[5])?,
            probe1: image(f[6])?,
            probe2: image(f[7])?,
            files: [f[4], f[5], f[6], f[7]].map(String::from),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MorphRow {
    pub pair_id: usize,
    pub kind: MorphKind,
    pub enc_source: Option<EncSource>,
    pub file: String,
    pub pixel_loss: Option<f64>,
    pub latent_loss: f64,
    pub theta1: f64,
    pub theta2: f64,
}

/// Parses a morph sidecar file; image paths must be relative and stay
/// inside the run directory.
pub fn parse_morphs_csv(text: &str) -> Result<Vec<MorphRow>> {
    let ctx = "morphs";
    let mut lines = text.lines();
    if lines.next() != Some(MORPHS_HEADER) {
        return Err(Error::format(ctx, format!("expected header '{MORPHS_HEADER}'")));
    }
    if lines.next() != Some("pair_id,kind,enc_source,file,pixel_loss,latent_loss,theta1,theta2") {
        return Err(Error::format(ctx, "bad column header"));
    }
    let mut out = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(Error::format(ctx, format!("expected 8 fields: '{line}'")));
        }
        let float = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::format(ctx, format!("bad number '{s}'")))
        };
        let kind: MorphKind = f[1]
            .parse()
            .map_err(|_| Error::format(ctx, format!("bad kind '{}'", f[1])))?;
        let enc_source = match f[2] {
            "" => None,
            s => Some(
                s.parse()
                    .map_err(|_| Error::format(ctx, format!("bad enc_source '{s}'")))?,
            ),
        };
        let file = f[3].to_string();
        if file.starts_with('/') || file.split('/').any(|c| c == "..") {
            return Err(Error::format(
                ctx,
                format!("image path '{file}' escapes the run directory"),
            ));
        }
        if file.is_empty() != (kind == MorphKind::Theoretical) {
            return Err(Error::format(ctx, format!("{kind} row has the wrong image presence")));
        }
        out.push(MorphRow {
            pair_id: f[0].parse().map_err(|_| Error::format(ctx, "bad pair_id"))?,
            kind,
            enc_source,
            file,
            pixel_loss: if f[4].is_empty() { None } else { Some(float(f[4])?) },
            latent_loss: float(f[5])?,
            theta1: float(f[6])?,
            theta2: float(f[7])?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip_and_hash() {
        let c = RunConfig::default();
        let back = RunConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        let mut d = c.clone();
        d.set("pairs", "10").unwrap();
        assert_ne!(d.hash(), c.hash());
        assert_eq!(RunConfig::keys().len(), c.entries().len());
    }

    #[test]
    fn config_errors() {
        assert!(matches!(RunConfig::parse("nope = 1"), Err(Error::Format { .. })));
        assert!(matches!(RunConfig::parse("seed = x"), Err(Error::Format { .. })));
        assert!(matches!(RunConfig::parse("seed"), Err(Error::Format { .. })));
        assert!(matches!(
            RunConfig::parse("seed = 1\nseed = 2"),
            Err(Error::Format { .. })
        ));
        assert!(matches!(
            RunConfig::parse("config_version = 2"),
            Err(Error::Format { .. })
        ));
        assert!(matches!(RunConfig::parse("iters = 0"), Err(Error::Argument(_))));
        let c = RunConfig::parse("# comment\n\nseed = 7 # trailing\n").unwrap();
        assert_eq!(c.seed, 7);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::arg("x")), 2);
        assert_eq!(
            exit_code(&Error::StageDependency {
                stage: "s".into(),
                missing: "m".into()
            }),
            3
        );
        assert_eq!(exit_code(&Error::format("c", "m")), 4);
        assert_eq!(exit_code(&Error::Invariant("x".into())), 1);
    }

    #[test]
    fn threshold_round_trip() {
        let t = DecisionThreshold {
            t: 0.6123,
            fmr: 0.0005,
            fnmr: 0.01,
            calibration_set: "validation".into(),
        };
        let text = threshold_to_text(&t, Role::Black, &RunConfig::default());
        assert_eq!(parse_threshold(&text).unwrap(), (Role::Black, t));
        assert!(parse_threshold(&text.replace("threshold 1", "threshold 2")).is_err());
    }

    #[test]
    fn morph_rows_reject_escaping_paths() {
        let head = format!("{MORPHS_HEADER}\npair_id,kind,enc_source,file,pixel_loss,latent_loss,theta1,theta2\n");
        let ok = format!("{head}0,blend,,morphs/blend/pair0000.pgm,0.1,0.2,0.3,0.4\n0,theoretical,,,,0,0.5,0.5\n");
        assert_eq!(parse_morphs_csv(&ok).unwrap().len(), 2);
        let bad = format!("{head}0,blend,,../x.pgm,0.1,0.2,0.3,0.4\n");
        assert!(parse_morphs_csv(&bad).is_err());
        let bad = format!("{head}0,theoretical,,x.pgm,,0,0.5,0.5\n");
        assert!(parse_morphs_csv(&bad).is_err());
    }

    #[test]
    fn evaluate_before_calibrate_is_a_dependency_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::new(RunConfig::default(), dir.path()).unwrap();
        let e = p.run(Stage::Evaluate, None).unwrap_err();
        assert_eq!(exit_code(&e), 3, "{e}");
        assert!(e.to_string().contains("white.threshold.txt"));
    }
}
