//! End-to-end commands: explain one pair, evaluate a dataset, sweep layers.
//!
//! Work fans out over a rayon pool sized from the run configuration; every
//! result is collected in input order, so outputs do not depend on the
//! number of threads.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{LayerChoice, RunConfig};
use crate::correspondence::{rescale, CorrespondenceIndex};
use crate::error::{Error, ErrorClass, Result};
use crate::eval::{
    aggregate, pick_layer, select_pairs, CandidatePair, DatasetAggregate, EmbeddedImage,
    LayerScore, Manifest, PairRecord, SelectionParams, Split,
};
use crate::explain::{analyze_pair, match_at_layer, residual_score};
use crate::geometry::{GridToPixel, ResidualScore};
use crate::image::{load_png, RgbImage};
use crate::lrp::masked_pixel_backprop;
use crate::matching::{Keypoint, MatchSet};
use crate::model::{ForwardTrace, ModelGraph};
use crate::render::{draw_heatmaps, draw_matches, palette, CanvasLayout, ExplanationCanvas};
use crate::stats::spearman_rho;

pub const ENGINE_NAME: &str = "pairx";
pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const EXPLANATION_PNG: &str = "explanation.png";
pub const EXPLANATION_JSON: &str = "explanation.json";
pub const REPORT_JSON: &str = "report.json";
pub const SWEEP_JSON: &str = "layer_sweep.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineInfo {
    pub name: String,
    pub version: String,
}

impl EngineInfo {
    pub fn current() -> Self {
        EngineInfo {
            name: ENGINE_NAME.into(),
            version: ENGINE_VERSION.into(),
        }
    }
}

/// Conventions that affect how reported numbers should be read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conventions {
    pub residual_units: String,
    pub residual_clamp: f64,
    pub keypoint_to_pixel: String,
    pub descriptor_metric: String,
    pub tap_position: String,
    pub lrp_composite: String,
}

impl Conventions {
    fn new(cfg: &RunConfig) -> Self {
        Conventions {
            residual_units: "model_input_pixels".into(),
            residual_clamp: cfg.metric_clamp,
            keypoint_to_pixel: "(grid + 0.5) * cumulative_stride".into(),
            descriptor_metric: "l2".into(),
            tap_position: crate::container::TAP_POSITION.into(),
            lrp_composite: "epsilon (linear, 1e-6) + zplus (conv)".into(),
        }
    }
}

fn run_in_pool<T: Send>(cfg: &RunConfig, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cfg.thread_count {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    pool.install(f)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn load_correspondences(cfg: &RunConfig) -> Result<Option<CorrespondenceIndex>> {
    cfg.correspondence_path
        .as_deref()
        .map(CorrespondenceIndex::load)
        .transpose()
}

fn checked_tap(model: &ModelGraph, layer: usize) -> Result<usize> {
    if model.is_tap(layer) {
        Ok(layer)
    } else {
        Err(Error::Contract(format!(
            "layer {layer} is not a tap point (taps: {:?})",
            model.tap_points()
        )))
    }
}

fn with_clamp(score: ResidualScore, clamp: f64) -> f64 {
    if score.clamped {
        clamp
    } else {
        score.value
    }
}

/// Metrics that can be undefined for a pair are recorded as missing; any
/// other failure aborts the run.
fn optional<T>(r: Result<T>, what: &str, diagnostics: &mut Vec<String>) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(e) if e.class() == ErrorClass::Numerical => {
            diagnostics.push(format!("{what}: {e}"));
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

/// Images of a manifest, loaded on demand.
struct Dataset<'a> {
    model: &'a ModelGraph,
    manifest: &'a Manifest,
    by_id: BTreeMap<&'a str, usize>,
    correspondences: Option<&'a CorrespondenceIndex>,
    cfg: &'a RunConfig,
}

impl<'a> Dataset<'a> {
    fn new(model: &'a ModelGraph, manifest: &'a Manifest, correspondences: Option<&'a CorrespondenceIndex>, cfg: &'a RunConfig) -> Self {
        let by_id = manifest
            .entries
            .iter()
            .enumerate()
            .map(|(k, e)| (e.image_path.as_str(), k))
            .collect();
        Dataset {
            model,
            manifest,
            by_id,
            correspondences,
            cfg,
        }
    }

    fn load(&self, id: &str) -> Result<(RgbImage, ForwardTrace)> {
        let entry = &self.manifest.entries[self.by_id[id]];
        let image = load_png(&self.manifest.resolve(entry))?;
        let trace = self.model.forward_image(&image)?;
        Ok((image, trace))
    }

    /// Unit embeddings of every image in `split`, in manifest order. Images
    /// whose embedding is zero are left out with a warning.
    fn embed(&self, split: Split) -> Result<(Vec<EmbeddedImage>, Vec<String>)> {
        let entries: Vec<_> = self.manifest.split(split).map(|(_, e)| e).collect();
        let results: Vec<Result<Option<EmbeddedImage>>> = entries
            .par_iter()
            .map(|e| {
                let (_, trace) = self.load(&e.image_path)?;
                let emb = trace.embedding().data();
                let norm = emb.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
                if !(norm > 0.0) || !norm.is_finite() {
                    return Ok(None);
                }
                Ok(Some(EmbeddedImage {
                    id: e.image_path.clone(),
                    identity: e.identity.clone(),
                    embedding: emb.iter().map(|&v| v as f64 / norm).collect(),
                }))
            })
            .collect();
        let mut out = Vec::new();
        let mut skipped = Vec::new();
        for (e, r) in entries.iter().zip(results) {
            match r? {
                Some(img) => out.push(img),
                None => {
                    log::warn!("{}: zero embedding, image skipped", e.image_path);
                    skipped.push(e.image_path.clone());
                }
            }
        }
        Ok((out, skipped))
    }

    /// Reference correspondences for a pair in model-input pixels.
    fn reference(&self, a: &str, b: &str, image_a: &RgbImage, image_b: &RgbImage) -> Option<Vec<crate::geometry::Correspondence>> {
        let raw = self.correspondences?.lookup(a, b)?;
        let spec = self.model.input_spec();
        Some(rescale(
            &raw,
            (image_a.width, image_a.height),
            (image_b.width, image_b.height),
            (spec.width, spec.height),
        ))
    }

    fn residual(&self, matches: &MatchSet, grid: &GridToPixel, corr: Option<Vec<crate::geometry::Correspondence>>, diagnostics: &mut Vec<String>) -> Result<Option<f64>> {
        let Some(corr) = corr else {
            diagnostics.push("inverted_residual_mean: no reference correspondences".into());
            return Ok(None);
        };
        let score = residual_score(matches, grid, &corr, self.cfg.ransac, self.cfg.rng_seed);
        Ok(optional(score, "inverted_residual_mean", diagnostics)?
            .map(|s| with_clamp(s, self.cfg.metric_clamp)))
    }

    fn evaluate(&self, pair: &CandidatePair, layer: usize) -> Result<PairRecord> {
        let (img_a, ta) = self.load(&pair.query_id)?;
        let (img_b, tb) = self.load(&pair.gallery_id)?;
        let mut diagnostics = Vec::new();
        let analysis = analyze_pair(self.model, &ta, &tb, layer)?;
        let corr = self.reference(&pair.query_id, &pair.gallery_id, &img_a, &img_b);
        let res = self.residual(&analysis.matches, &analysis.grid, corr, &mut diagnostics)?;
        let cov = optional(analysis.coverage(), "match_coverage", &mut diagnostics)?;
        Ok(PairRecord {
            query_id: pair.query_id.clone(),
            gallery_id: pair.gallery_id.clone(),
            cosine_similarity: pair.cosine_similarity,
            is_correct: pair.is_correct,
            layer_index: layer,
            inverted_residual_mean: res,
            match_coverage: cov,
            num_matches: analysis.matches.len(),
            diagnostics,
        })
    }

    /// ρ_res at every tap over a sample of train–train pairs.
    fn sweep(&self) -> Result<Vec<LayerScore>> {
        let no_train = || Error::Contract("layer auto-selection requires train pairs".into());
        let (train, _) = self.embed(Split::Train)?;
        if train.len() < 2 {
            return Err(no_train());
        }
        let params = SelectionParams {
            target: self.cfg.layer_sample,
            ..self.cfg.selection
        };
        let selection = select_pairs(&train, &train, params, self.cfg.rng_seed)?;
        if selection.pairs.is_empty() {
            return Err(no_train());
        }
        let taps = self.model.tap_points().to_vec();
        let per_pair: Vec<Vec<Option<f64>>> = selection
            .pairs
            .par_iter()
            .map(|pair| {
                let (img_a, ta) = self.load(&pair.query_id)?;
                let (img_b, tb) = self.load(&pair.gallery_id)?;
                let corr = self.reference(&pair.query_id, &pair.gallery_id, &img_a, &img_b);
                taps.iter()
                    .map(|&layer| {
                        let matches = match_at_layer(self.model, &ta, &tb, layer)?;
                        let grid = GridToPixel::uniform(self.model.cumulative_stride(layer));
                        self.residual(&matches, &grid, corr.clone(), &mut Vec::new())
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        let mut scores: Vec<LayerScore> = taps
            .iter()
            .enumerate()
            .map(|(t, &layer)| {
                let (s1, cos): (Vec<f64>, Vec<f64>) = per_pair
                    .iter()
                    .zip(&selection.pairs)
                    .filter_map(|(row, p)| row[t].map(|s| (s, p.cosine_similarity)))
                    .unzip();
                LayerScore {
                    layer_index: layer,
                    rho_res: spearman_rho(&s1, &cos).ok(),
                    pairs_used: s1.len(),
                    selected: false,
                }
            })
            .collect();
        let best = pick_layer(&scores)?;
        scores[best].selected = true;
        Ok(scores)
    }
}

/// Resolves the configured layer. Automatic selection needs a manifest with
/// train images.
fn resolve_layer(
    model: &ModelGraph,
    cfg: &RunConfig,
    manifest: Option<&Manifest>,
    correspondences: Option<&CorrespondenceIndex>,
) -> Result<(usize, Option<Vec<LayerScore>>)> {
    match cfg.layer {
        LayerChoice::Index(l) => Ok((checked_tap(model, l)?, None)),
        LayerChoice::Default => Ok((model.default_tap(), None)),
        LayerChoice::Auto => {
            let manifest = manifest.ok_or_else(|| {
                Error::Contract("layer auto-selection requires train pairs (no manifest given)".into())
            })?;
            let scores = Dataset::new(model, manifest, correspondences, cfg).sweep()?;
            let layer = scores
                .iter()
                .find(|s| s.selected)
                .map(|s| s.layer_index)
                .expect("sweep marks one layer");
            Ok((layer, Some(scores)))
        }
    }
}

fn load_manifest(cfg: &RunConfig) -> Result<Option<Manifest>> {
    cfg.manifest_path.as_deref().map(Manifest::load).transpose()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub rank: usize,
    pub color: [u8; 3],
    pub kp_a: Keypoint,
    pub kp_b: Keypoint,
    pub pixel_a: [f64; 2],
    pub pixel_b: [f64; 2],
    pub relevance: f64,
    pub descriptor_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMetricsRecord {
    pub inverted_residual_mean: Option<f64>,
    pub match_coverage: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

/// Sidecar written next to the explanation image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRecord {
    pub engine: EngineInfo,
    pub config: serde_json::Value,
    pub conventions: Conventions,
    pub image_a: String,
    pub image_b: String,
    pub cosine_similarity: f64,
    pub layer_index: usize,
    pub cumulative_stride: usize,
    pub grid: [usize; 2],
    pub input_size: [usize; 2],
    pub matches_total: usize,
    pub metrics: PairMetricsRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_selection: Option<Vec<LayerScore>>,
    pub layout: CanvasLayout,
    pub matches: Vec<MatchRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExplainOutput {
    pub png: PathBuf,
    pub sidecar: PathBuf,
    pub record: ExplanationRecord,
}

/// Explains one image pair: relevance at the chosen layer, scored matches,
/// masked pixel backprop for the kept matches, and the composite render.
pub fn run_explain(cfg: &RunConfig, image_a: &Path, image_b: &Path) -> Result<ExplainOutput> {
    cfg.validate()?;
    run_in_pool(cfg, || {
        let model = crate::container::load_model(cfg.model_path()?)?;
        let img_a = load_png(image_a)?;
        let img_b = load_png(image_b)?;
        let correspondences = load_correspondences(cfg)?;
        let manifest = load_manifest(cfg)?;
        let (layer, layer_selection) = resolve_layer(&model, cfg, manifest.as_ref(), correspondences.as_ref())?;

        let ta = model.forward_image(&img_a)?;
        let tb = model.forward_image(&img_b)?;
        let analysis = analyze_pair(&model, &ta, &tb, layer)?;
        let top = analysis.top(cfg.n_matches)?;
        let heat: Vec<_> = top
            .matches
            .par_iter()
            .enumerate()
            .map(|(rank, m)| {
                Ok((
                    masked_pixel_backprop(&model, &ta, layer, m.kp_a, rank)?,
                    masked_pixel_backprop(&model, &tb, layer, m.kp_b, rank)?,
                ))
            })
            .collect::<Result<_>>()?;
        let (heat_a, heat_b): (Vec<_>, Vec<_>) = heat.into_iter().unzip();

        let (name_a, name_b) = (image_a.to_string_lossy(), image_b.to_string_lossy());
        let mut diagnostics = Vec::new();
        let spec = model.input_spec();
        let inverted_residual_mean = match correspondences.as_ref().and_then(|c| c.lookup(&name_a, &name_b)) {
            Some(raw) => {
                let corr = rescale(&raw, (img_a.width, img_a.height), (img_b.width, img_b.height), (spec.width, spec.height));
                let s = residual_score(&analysis.matches, &analysis.grid, &corr, cfg.ransac, cfg.rng_seed);
                optional(s, "inverted_residual_mean", &mut diagnostics)?.map(|s| with_clamp(s, cfg.metric_clamp))
            }
            None => None,
        };
        let match_coverage = optional(analysis.coverage(), "match_coverage", &mut diagnostics)?;

        let panel_a = img_a.resize_bilinear(spec.width, spec.height);
        let panel_b = img_b.resize_bilinear(spec.width, spec.height);
        let mut canvas = ExplanationCanvas::new(&panel_a, &panel_b)?;
        draw_matches(&mut canvas, &top, &analysis.grid);
        draw_heatmaps(&mut canvas, &heat_a, &heat_b);

        let (gw, gh) = analysis.relevance_a.grid();
        let record = ExplanationRecord {
            engine: EngineInfo::current(),
            config: cfg.echo(),
            conventions: Conventions::new(cfg),
            image_a: name_a.into_owned(),
            image_b: name_b.into_owned(),
            cosine_similarity: analysis.cosine_similarity,
            layer_index: layer,
            cumulative_stride: model.cumulative_stride(layer),
            grid: [gw, gh],
            input_size: [spec.width, spec.height],
            matches_total: analysis.matches.len(),
            metrics: PairMetricsRecord {
                inverted_residual_mean,
                match_coverage,
                diagnostics,
            },
            layer_selection,
            layout: canvas.layout,
            matches: top
                .matches
                .iter()
                .enumerate()
                .map(|(rank, m)| {
                    let (pa, pb) = (analysis.grid.map(m.kp_a), analysis.grid.map(m.kp_b));
                    MatchRecord {
                        rank,
                        color: palette(rank),
                        kp_a: m.kp_a,
                        kp_b: m.kp_b,
                        pixel_a: [pa.0, pa.1],
                        pixel_b: [pb.0, pb.1],
                        relevance: m.relevance,
                        descriptor_distance: m.descriptor_distance,
                    }
                })
                .collect(),
        };
        create_dir(&cfg.output_dir)?;
        let png = cfg.output_dir.join(EXPLANATION_PNG);
        let sidecar = cfg.output_dir.join(EXPLANATION_JSON);
        std::fs::write(&png, canvas.encode_png()?).map_err(|e| Error::io(&png, e))?;
        write_json(&sidecar, &record)?;
        Ok(ExplainOutput { png, sidecar, record })
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub pairs: usize,
    pub k_used: usize,
    pub correct_available: usize,
    pub incorrect_available: usize,
    pub short: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped_images: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub engine: EngineInfo,
    pub config: serde_json::Value,
    pub conventions: Conventions,
    pub selection: SelectionSummary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_selection: Option<Vec<LayerScore>>,
    pub aggregate: DatasetAggregate,
    pub pairs: Vec<PairRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutput {
    pub path: PathBuf,
    pub report: EvalReport,
}

/// Query–gallery evaluation: pair selection, per-pair metrics at the chosen
/// layer, and ρ / Δ for both metrics.
pub fn run_eval(cfg: &RunConfig) -> Result<EvalOutput> {
    cfg.validate()?;
    run_in_pool(cfg, || {
        let model = crate::container::load_model(cfg.model_path()?)?;
        let manifest = load_manifest(cfg)?
            .ok_or_else(|| Error::InvalidArgument("evaluation needs a manifest".into()))?;
        let correspondences = load_correspondences(cfg)?;
        let (layer, layer_selection) = resolve_layer(&model, cfg, Some(&manifest), correspondences.as_ref())?;
        let data = Dataset::new(&model, &manifest, correspondences.as_ref(), cfg);
        let (queries, mut skipped) = data.embed(Split::Query)?;
        let (gallery, skipped_g) = data.embed(Split::Gallery)?;
        skipped.extend(skipped_g);
        if queries.is_empty() {
            return Err(Error::InvalidArgument("manifest has no usable query images".into()));
        }
        let selection = select_pairs(&queries, &gallery, cfg.selection, cfg.rng_seed)?;
        let pairs: Vec<PairRecord> = selection
            .pairs
            .par_iter()
            .map(|p| data.evaluate(p, layer))
            .collect::<Result<_>>()?;
        let report = EvalReport {
            engine: EngineInfo::current(),
            config: cfg.echo(),
            conventions: Conventions::new(cfg),
            selection: SelectionSummary {
                pairs: pairs.len(),
                k_used: selection.k_used,
                correct_available: selection.correct_available,
                incorrect_available: selection.incorrect_available,
                short: selection.short,
                skipped_images: skipped,
            },
            layer_selection,
            aggregate: aggregate(&pairs, layer),
            pairs,
        };
        create_dir(&cfg.output_dir)?;
        let path = cfg.output_dir.join(REPORT_JSON);
        write_json(&path, &report)?;
        Ok(EvalOutput { path, report })
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub engine: EngineInfo,
    pub config: serde_json::Value,
    pub conventions: Conventions,
    pub rows: Vec<LayerScore>,
    pub selected_layer: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutput {
    pub path: PathBuf,
    pub report: SweepReport,
}

/// ρ_res for every tap over sampled train pairs; the best tap is marked.
pub fn run_sweep_layers(cfg: &RunConfig) -> Result<SweepOutput> {
    cfg.validate()?;
    run_in_pool(cfg, || {
        let model = crate::container::load_model(cfg.model_path()?)?;
        let manifest = load_manifest(cfg)?.ok_or_else(|| {
            Error::Contract("layer sweep requires train pairs (no manifest given)".into())
        })?;
        let correspondences = load_correspondences(cfg)?;
        let rows = Dataset::new(&model, &manifest, correspondences.as_ref(), cfg).sweep()?;
        let selected_layer = rows
            .iter()
            .find(|r| r.selected)
            .map(|r| r.layer_index)
            .expect("sweep marks one layer");
        let report = SweepReport {
            engine: EngineInfo::current(),
            config: cfg.echo(),
            conventions: Conventions::new(cfg),
            rows,
            selected_layer,
        };
        create_dir(&cfg.output_dir)?;
        let path = cfg.output_dir.join(SWEEP_JSON);
        write_json(&path, &report)?;
        Ok(SweepOutput { path, report })
    })
}
