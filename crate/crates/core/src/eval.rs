//! Attack scoring, MMPMR, score histograms and vulnerability reports.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fr::{score_sets, DecisionThreshold, FrModel, ScoreSets};
use crate::image::Image;
use crate::morph::{theoretical_worst_case, EncSource, MorphKind, MorphResult};
use crate::sphere::angle;
use crate::synth::{Dataset, MorphPair, Split};

pub const REPORT_FORMAT: &str = "morphlab-report";
pub const REPORT_VERSION: u32 = 1;
pub const DEFAULT_BINS: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct MorphAttackScore {
    pub pair_id: usize,
    pub kind: MorphKind,
    pub enc_source: Option<EncSource>,
    pub theta1: f64,
    pub theta2: f64,
    pub max_theta: f64,
}

impl MorphAttackScore {
    pub fn new(pair_id: usize, kind: MorphKind, enc_source: Option<EncSource>, theta1: f64, theta2: f64) -> Self {
        MorphAttackScore {
            pair_id,
            kind,
            enc_source,
            theta1,
            theta2,
            max_theta: theta1.max(theta2),
        }
    }
}

/// A morph tagged with the pair it attacks.
#[derive(Debug, Clone, PartialEq)]
pub struct PairMorph {
    pub pair_id: usize,
    pub result: MorphResult,
}

/// Angles from each morph to the probes of its two identities. Image morphs
/// are compared against the held-out probe images; the theoretical kind,
/// which has no image, against the enrollment embeddings.
pub fn attack_scores(fr: &FrModel, morphs: &[PairMorph], pairs: &[MorphPair]) -> Result<Vec<MorphAttackScore>> {
    let by_id: BTreeMap<usize, &MorphPair> = pairs.iter().map(|p| (p.pair_id, p)).collect();
    let mut probe_cache: BTreeMap<usize, [crate::sphere::Embedding; 4]> = BTreeMap::new();
    let mut out = Vec::with_capacity(morphs.len());
    let images: Vec<&Image> = morphs.iter().filter_map(|m| m.result.image.as_ref()).collect();
    let mut image_embs = fr.embed_many(&images)?.into_iter();
    for m in morphs {
        let pair = by_id
            .get(&m.pair_id)
            .ok_or_else(|| Error::arg(format!("no probes for pair {}", m.pair_id)))?;
        let [z1, z2, p1, p2] = match probe_cache.entry(m.pair_id) {
            Entry::Occupied(e) => e.into_mut(),
            Entry::Vacant(v) => {
                let e = fr.embed_many(&[&pair.x1, &pair.x2, &pair.probe1, &pair.probe2])?;
                v.insert(e.try_into().expect("four embeddings"))
            }
        };
        let (theta1, theta2) = match (&m.result.image, m.result.kind) {
            (None, MorphKind::Theoretical) => (angle(&m.result.z_morph, z1)?, angle(&m.result.z_morph, z2)?),
            (Some(_), _) => {
                let z = image_embs.next().expect("one embedding per image");
                (angle(&z, p1)?, angle(&z, p2)?)
            }
            (None, kind) => return Err(Error::arg(format!("{kind} morph for pair {} has no image", m.pair_id))),
        };
        out.push(MorphAttackScore::new(
            m.pair_id,
            m.result.kind,
            m.result.enc_source,
            theta1,
            theta2,
        ));
    }
    Ok(out)
}

/// Percentage of morphs accepted against both identities (`max_theta <= t`).
pub fn mmpmr(scores: &[MorphAttackScore], t: &DecisionThreshold) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::arg("MMPMR of an empty score list"));
    }
    let hits = scores.iter().filter(|s| t.accepts(s.max_theta)).count();
    Ok(100.0 * hits as f64 / scores.len() as f64)
}

/// Fixed-width histogram over `[0, pi]` with right-closed bins `(a, b]`;
/// the first bin also holds 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::arg("histogram needs at least one bin"));
        }
        Ok(Histogram {
            lo: 0.0,
            hi: PI,
            counts: vec![0; bins],
        })
    }

    pub fn of(bins: usize, values: &[f64]) -> Result<Self> {
        let mut h = Histogram::new(bins)?;
        for &v in values {
            h.add(v)?;
        }
        Ok(h)
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    /// Upper edge of bin `k - 1`, i.e. `edge(0) = lo`, `edge(bins) = hi`.
    pub fn edge(&self, k: usize) -> f64 {
        if k == self.bins() {
            return self.hi;
        }
        self.lo + (self.hi - self.lo) * k as f64 / self.bins() as f64
    }

    pub fn add(&mut self, v: f64) -> Result<()> {
        if !(self.lo..=self.hi).contains(&v) {
            return Err(Error::arg(format!("angle {v} outside [{}, {}]", self.lo, self.hi)));
        }
        // first k with v <= edge(k + 1)
        let (mut a, mut b) = (0, self.bins() - 1);
        while a < b {
            let mid = (a + b) / 2;
            if v <= self.edge(mid + 1) {
                b = mid;
            } else {
                a = mid + 1;
            }
        }
        self.counts[a] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Number of values `<= edge(k)`.
    pub fn cumulative(&self, k: usize) -> u64 {
        self.counts[..k.min(self.bins())].iter().sum()
    }
}

/// MMPMR read off a max-angle histogram at the threshold `edge(k)`, `k >= 1`
/// (bin 0 also holds `lo`, so `edge(0)` cannot be resolved).
pub fn mmpmr_from_histogram(h: &Histogram, k: usize) -> Result<f64> {
    if h.total() == 0 {
        return Err(Error::arg("MMPMR of an empty histogram"));
    }
    if k == 0 || k > h.bins() {
        return Err(Error::arg(format!("edge index {k} outside 1..={}", h.bins())));
    }
    Ok(100.0 * h.cumulative(k) as f64 / h.total() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRecord {
    pub t: f64,
    pub fmr: f64,
    pub fnmr: f64,
    pub calibration_set: String,
}

impl From<&DecisionThreshold> for ThresholdRecord {
    fn from(t: &DecisionThreshold) -> Self {
        ThresholdRecord {
            t: t.t,
            fmr: t.fmr,
            fnmr: t.fnmr,
            calibration_set: t.calibration_set.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindSummary {
    pub count: usize,
    pub mmpmr: f64,
    pub median_max_theta: f64,
    pub histogram: Histogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VulnerabilityReport {
    pub format: String,
    pub version: u32,
    pub fr_tag: String,
    pub threshold: ThresholdRecord,
    pub genuine: Histogram,
    pub impostor: Histogram,
    pub kinds: BTreeMap<String, KindSummary>,
    pub warnings: Vec<String>,
    /// Free-form provenance (config hash, seed, ...).
    pub provenance: BTreeMap<String, String>,
    #[serde(skip)]
    pub scores: Vec<MorphAttackScore>,
}

impl VulnerabilityReport {
    pub fn mmpmr(&self, kind: MorphKind) -> Option<f64> {
        self.kinds.get(kind.as_str()).map(|k| k.mmpmr)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialises");
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let r: VulnerabilityReport = serde_json::from_str(text).map_err(|e| Error::format("report", e.to_string()))?;
        if r.format != REPORT_FORMAT || r.version != REPORT_VERSION {
            return Err(Error::format(
                "report",
                format!(
                    "expected {REPORT_FORMAT} v{REPORT_VERSION}, got {} v{}",
                    r.format, r.version
                ),
            ));
        }
        for (k, h) in r
            .kinds
            .iter()
            .map(|(k, s)| (k.as_str(), &s.histogram))
            .chain([("genuine", &r.genuine), ("impostor", &r.impostor)])
        {
            if h.counts.is_empty() || h.lo != 0.0 || h.hi != PI {
                return Err(Error::format("report", format!("bad histogram for {k}")));
            }
        }
        Ok(r)
    }

    /// `pair_id,kind,enc_source,theta1,theta2,max_theta`.
    pub fn scores_csv(&self) -> String {
        let mut s = String::from("pair_id,kind,enc_source,theta1,theta2,max_theta\n");
        for r in &self.scores {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.pair_id,
                r.kind,
                r.enc_source.map_or("", |e| e.as_str()),
                r.theta1,
                r.theta2,
                r.max_theta
            );
        }
        s
    }

    /// Per-kind MMPMR table.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("fr_tag,kind,count,mmpmr,median_max_theta,t\n");
        for (k, v) in &self.kinds {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                self.fr_tag, k, v.count, v.mmpmr, v.median_max_theta, self.threshold.t
            );
        }
        s
    }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Report from precomputed score sets and attack scores.
pub fn report_from_scores(
    fr_tag: &str,
    threshold: &DecisionThreshold,
    sets: &ScoreSets,
    scores: Vec<MorphAttackScore>,
    bins: usize,
) -> Result<VulnerabilityReport> {
    let mut kinds = BTreeMap::new();
    let mut warnings = Vec::new();
    for kind in MorphKind::ALL {
        let ks: Vec<MorphAttackScore> = scores.iter().filter(|s| s.kind == kind).cloned().collect();
        if ks.is_empty() {
            let msg = format!("no {kind} morphs; kind omitted");
            warn!("{fr_tag}: {msg}");
            warnings.push(msg);
            continue;
        }
        let max: Vec<f64> = ks.iter().map(|s| s.max_theta).collect();
        kinds.insert(
            kind.as_str().to_string(),
            KindSummary {
                count: ks.len(),
                mmpmr: mmpmr(&ks, threshold)?,
                median_max_theta: median(&max),
                histogram: Histogram::of(bins, &max)?,
            },
        );
    }
    Ok(VulnerabilityReport {
        format: REPORT_FORMAT.into(),
        version: REPORT_VERSION,
        fr_tag: fr_tag.to_string(),
        threshold: threshold.into(),
        genuine: Histogram::of(bins, &sets.genuine)?,
        impostor: Histogram::of(bins, &sets.impostor)?,
        kinds,
        warnings,
        provenance: BTreeMap::new(),
        scores,
    })
}

/// Scores `morphs` under `fr` and assembles its report; genuine and
/// impostor histograms come from the validation split.
pub fn build_report(
    fr: &FrModel,
    threshold: &DecisionThreshold,
    dataset: &Dataset,
    pairs: &[MorphPair],
    morphs: &[PairMorph],
    bins: usize,
    seed: u64,
) -> Result<VulnerabilityReport> {
    let samples: Vec<(u32, &Image)> = dataset
        .split(Split::Validation)
        .into_iter()
        .map(|r| (r.identity_id, &r.image))
        .collect();
    let sets = score_sets(fr, &samples, seed)?;
    let scores = attack_scores(fr, morphs, pairs)?;
    report_from_scores(fr.tag(), threshold, &sets, scores, bins)
}

/// Evaluates the same morph images under both systems. The theoretical
/// kind is rebuilt per system since each FR has its own `z*`.
#[allow(clippy::too_many_arguments)]
pub fn cross_system_eval(
    morphs: &[PairMorph],
    pairs: &[MorphPair],
    dataset: &Dataset,
    white: (&FrModel, &DecisionThreshold),
    black: (&FrModel, &DecisionThreshold),
    bins: usize,
    seed: u64,
) -> Result<(VulnerabilityReport, VulnerabilityReport)> {
    let mut out = Vec::with_capacity(2);
    for (fr, t) in [white, black] {
        let by_id: BTreeMap<usize, &MorphPair> = pairs.iter().map(|p| (p.pair_id, p)).collect();
        let system_morphs = morphs
            .iter()
            .map(|m| {
                if m.result.kind != MorphKind::Theoretical {
                    return Ok(m.clone());
                }
                let p = by_id
                    .get(&m.pair_id)
                    .ok_or_else(|| Error::arg(format!("no pair {}", m.pair_id)))?;
                Ok(PairMorph {
                    pair_id: m.pair_id,
                    result: theoretical_worst_case(fr, &p.x1, &p.x2)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(build_report(fr, t, dataset, pairs, &system_morphs, bins, seed)?);
    }
    let black = out.pop().expect("two reports");
    let white = out.pop().expect("two reports");
    Ok((white, black))
}

/// Self-contained SVG with five histogram panels: genuine vs impostor,
/// then the max-angle distribution of each morph kind. The dashed line
/// marks the threshold.
pub fn render_svg(report: &VulnerabilityReport) -> String {
    const W: f64 = 260.0;
    const H: f64 = 160.0;
    const PAD: f64 = 24.0;
    let mut panels: Vec<(String, Vec<(&Histogram, &str)>)> = vec![(
        "genuine / impostor".into(),
        vec![(&report.genuine, "#3b6fb6"), (&report.impostor, "#c8443c")],
    )];
    for kind in MorphKind::ALL {
        if let Some(k) = report.kinds.get(kind.as_str()) {
            panels.push((format!("{kind} ({:.1}%)", k.mmpmr), vec![(&k.histogram, "#6a8d3a")]));
        }
    }
    let width = W * panels.len() as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{h}" viewBox="0 0 {width} {h}" font-family="sans-serif" font-size="10">"#,
        h = H + PAD
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (i, (title, hists)) in panels.iter().enumerate() {
        let x0 = i as f64 * W + PAD / 2.0;
        let pw = W - PAD;
        let ph = H - PAD;
        let _ = writeln!(s, r#"<g transform="translate({x0},{})">"#, PAD / 2.0);
        let _ = writeln!(s, r#"<text x="0" y="-2">{}</text>"#, xml_escape(title));
        let _ = writeln!(
            s,
            r##"<rect x="0" y="0" width="{pw}" height="{ph}" fill="none" stroke="#999"/>"##
        );
        for (h, color) in hists {
            let total = h.total().max(1) as f64;
            let peak = h.counts.iter().copied().max().unwrap_or(0).max(1) as f64 / total;
            let bw = pw / h.bins() as f64;
            for (k, &c) in h.counts.iter().enumerate() {
                if c == 0 {
                    continue;
                }
                let bh = ph * (c as f64 / total) / peak;
                let _ = writeln!(
                    s,
                    r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{color}" fill-opacity="0.6"/>"#,
                    k as f64 * bw,
                    ph - bh,
                    bw,
                    bh
                );
            }
        }
        let tx = pw * report.threshold.t / PI;
        let _ = writeln!(
            s,
            r#"<line x1="{tx:.2}" y1="0" x2="{tx:.2}" y2="{ph}" stroke="black" stroke-dasharray="3,2"/>"#
        );
        let _ = writeln!(s, r#"<text x="0" y="{}">0</text>"#, ph + 11.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">π</text>"#, pw, ph + 11.0);
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn score(m: f64) -> MorphAttackScore {
        MorphAttackScore::new(0, MorphKind::Blend, None, m, m / 2.0)
    }

    #[test]
    fn mmpmr_examples() {
        let t = DecisionThreshold::fixed(0.6);
        let s: Vec<_> = [0.2, 0.5, 0.9].into_iter().map(score).collect();
        assert!((mmpmr(&s, &t).unwrap() - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(mmpmr(&s, &DecisionThreshold::fixed(1.0)).unwrap(), 100.0);
        assert_eq!(mmpmr(&s, &DecisionThreshold::fixed(0.1)).unwrap(), 0.0);
        assert_eq!(mmpmr(&s, &DecisionThreshold::fixed(0.5)).unwrap(), 200.0 / 3.0);
        assert!(matches!(mmpmr(&[], &t), Err(Error::Argument(_))));
    }

    #[test]
    fn histogram_edges_are_right_closed() {
        let mut h = Histogram::new(4).unwrap();
        for v in [0.0, h.edge(1), h.edge(1) + 1e-12, PI] {
            h.add(v).unwrap();
        }
        assert_eq!(h.counts, vec![2, 1, 0, 1]);
        assert!(h.add(-0.1).is_err());
        assert!(h.add(3.2).is_err());
    }

    #[test]
    fn svg_has_five_panels() {
        let sets = ScoreSets {
            genuine: vec![0.1, 0.2],
            impostor: vec![1.4, 1.5],
        };
        let mut scores = Vec::new();
        for (i, kind) in MorphKind::ALL.into_iter().enumerate() {
            scores.push(MorphAttackScore::new(i, kind, None, 0.3, 0.4));
        }
        let r = report_from_scores("w", &DecisionThreshold::fixed(0.5), &sets, scores, 64).unwrap();
        let svg = render_svg(&r);
        assert_eq!(svg.matches("<g ").count(), 5);
        assert_eq!(VulnerabilityReport::parse(&r.to_json()).unwrap().kinds, r.kinds);
    }

    #[test]
    fn missing_kind_is_a_warning() {
        let sets = ScoreSets {
            genuine: vec![0.1],
            impostor: vec![1.4],
        };
        let r = report_from_scores("w", &DecisionThreshold::fixed(0.5), &sets, vec![score(0.3)], 64).unwrap();
        assert_eq!(r.kinds.len(), 1);
        assert_eq!(r.warnings.len(), 3);
    }

    proptest! {
        #[test]
        fn mmpmr_monotone_and_permutation_invariant(
            v in prop::collection::vec(0.0..PI, 1..40),
            t1 in 0.0..PI,
            t2 in 0.0..PI,
            rot in 0usize..40,
        ) {
            let s: Vec<_> = v.iter().map(|&m| score(m)).collect();
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            prop_assert!(mmpmr(&s, &DecisionThreshold::fixed(lo)).unwrap() <= mmpmr(&s, &DecisionThreshold::fixed(hi)).unwrap());
            let mut p = s.clone();
            p.rotate_left(rot % s.len());
            p.reverse();
            prop_assert_eq!(mmpmr(&s, &DecisionThreshold::fixed(t1)).unwrap(), mmpmr(&p, &DecisionThreshold::fixed(t1)).unwrap());
            let max: Vec<f64> = s.iter().map(|x| x.max_theta).collect();
            let pmax: Vec<f64> = p.iter().map(|x| x.max_theta).collect();
            prop_assert_eq!(Histogram::of(64, &max).unwrap(), Histogram::of(64, &pmax).unwrap());
        }

        #[test]
        fn histogram_agrees_with_direct_count_on_edges(
            v in prop::collection::vec(0.0..PI, 1..60),
            k in 1usize..=64,
            snap in prop::collection::vec(any::<bool>(), 60),
        ) {
            let h0 = Histogram::new(64).unwrap();
            // snap some values exactly onto edges
            let v: Vec<f64> = v.iter().zip(&snap).map(|(&x, &s)| if s { h0.edge((x / PI * 64.0) as usize) } else { x }).collect();
            let s: Vec<_> = v.iter().map(|&m| score(m)).collect();
            let h = Histogram::of(64, &v).unwrap();
            prop_assert_eq!(h.total() as usize, v.len());
            let t = DecisionThreshold::fixed(h.edge(k));
            prop_assert_eq!(mmpmr_from_histogram(&h, k).unwrap(), mmpmr(&s, &t).unwrap());
        }
    }
}
