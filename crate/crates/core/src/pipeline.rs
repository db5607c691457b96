//! End-to-end pipeline: mortality projection, survival fits, contrast
//! extraction, NMA and decisions, with content-hashed resumable stages.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data_io::{self, write_json, IpdRecord, MortalityTable, RunConfig, Sex, StudyMeta};
use crate::decision::{self, CeaSummary};
use crate::error::{Error, Result};
use crate::inference::{chain_rng, find_mode, rhat, LogDensity, McmcConfig, PosteriorDraws, Sampler};
use crate::mortality::{self, read_synthetic_csv, thin_indices, ProjectionSettings};
use crate::mst::{self, study_contrasts, ExtrapolationSettings, SurvivalCurve};
use crate::nma::{self, NmaModel, NmaSettings, TauMode};
use crate::plot::{self, ForestRow};
use crate::simharness::derive_seed;
use crate::survmodels::{
    default_knots, Group, HazardModel, MSplineBasis, MSplineSpec, MSplineTarget, ModelKind, Observation,
    PiecewiseConstantHazard, PolyHazardSpec, PolyHazardTarget,
};

pub const STAGES: [&str; 6] = ["project-mortality", "fit-survival", "extract-contrasts", "nma", "decide", "plot"];

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub lenient: bool,
    /// Rerun stages even when their inputs are unchanged.
    pub force: bool,
}

/// Outcome of one stage: files written (relative to the output directory)
/// and convergence warnings raised.
#[derive(Debug, Clone, Default)]
pub struct StageOutput {
    pub files: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

impl StageOutput {
    fn extend(&mut self, other: StageOutput) {
        self.files.extend(other.files);
        self.warnings.extend(other.warnings);
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn stage_err(stage: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| Error::Stage {
        stage: stage.to_string(),
        source: Box::new(e),
    }
}

fn model_dir(model: ModelKind) -> &'static str {
    model.as_str()
}

fn models(cfg: &RunConfig) -> Vec<ModelKind> {
    let mut m = vec![cfg.model];
    if let Some(s) = cfg.second_model {
        if s != cfg.model {
            m.push(s);
        }
    }
    m
}

fn rel(out: &Path, p: &Path) -> PathBuf {
    p.strip_prefix(out).unwrap_or(p).to_path_buf()
}

// ---------------------------------------------------------------- stage 1

#[derive(Debug, Serialize)]
struct LeeCarterSummary {
    country: String,
    sex: String,
    first_year: i32,
    last_year: i32,
    mean_drift: f64,
    max_rhat: f64,
    convergence_warning: Option<String>,
}

/// Fit Lee-Carter models, build per-study external populations and write
/// `external/<study>/{curve,synthetic}.csv`.
pub fn project_mortality(cfg: &RunConfig, out: &Path) -> Result<StageOutput> {
    let studies = cfg.studies()?;
    let Some(path) = &cfg.mortality else {
        if cfg.allow_no_external {
            log::warn!("no mortality table; survival fits run without external data");
            return Ok(StageOutput::default());
        }
        return Err(Error::Config("no mortality table configured (set allow_no_external to skip)".into()));
    };
    let tables = data_io::parse_mortality(path)?;
    let mcmc = McmcConfig {
        seed: derive_seed(cfg.seed, 1, 0),
        ..cfg.mcmc.clone()
    };
    let settings = ProjectionSettings {
        curve_draws: cfg.external.curve_draws,
        seed: derive_seed(cfg.seed, 1, 1),
    };
    let (fits, pops) = mortality::build_external_populations(&tables, &studies, &mcmc, settings)?;
    let dir = out.join("external");
    fs::create_dir_all(&dir)?;
    let mut res = StageOutput::default();
    let summary: Vec<LeeCarterSummary> = fits
        .iter()
        .map(|f| LeeCarterSummary {
            country: f.country.clone(),
            sex: f.sex.as_str().to_string(),
            first_year: f.first_year,
            last_year: f.last_year(),
            mean_drift: f.mean_drift(),
            max_rhat: f.max_rhat,
            convergence_warning: f.convergence_warning.clone(),
        })
        .collect();
    for f in &fits {
        if let Some(w) = &f.convergence_warning {
            res.warnings.push(format!("Lee-Carter {}/{}: {w}", f.country, f.sex.as_str()));
        }
    }
    write_json(&dir.join("lee_carter.json"), &summary)?;
    res.files.push(PathBuf::from("external/lee_carter.json"));
    for (k, (id, pop)) in pops.into_iter().enumerate() {
        let pop = pop.with_synthetic(cfg.external.synthetic_n, cfg.external.projection_draws, derive_seed(cfg.seed, 1, 2 + k as u64))?;
        let d = dir.join(&id);
        fs::create_dir_all(&d)?;
        pop.write_curve_csv(fs::File::create(d.join("curve.csv"))?)?;
        pop.write_synthetic_csv(fs::File::create(d.join("synthetic.csv"))?)?;
        res.files.push(rel(out, &d.join("curve.csv")));
        res.files.push(rel(out, &d.join("synthetic.csv")));
    }
    Ok(res)
}

/// Mean curve from `curve.csv`.
pub fn read_curve_csv(path: &Path) -> Result<SurvivalCurve> {
    let mut rdr = csv::Reader::from_path(path)?;
    let (mut t, mut s) = (Vec::new(), Vec::new());
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i).and_then(|v| v.parse().ok()).ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: k + 2,
                msg: format!("bad numeric field {i}"),
            })
        };
        t.push(num(0)?);
        s.push(num(1)?);
    }
    SurvivalCurve::new(t, s)
}

// ---------------------------------------------------------------- stage 2

struct External {
    synthetic: Vec<Observation>,
    curve: Option<SurvivalCurve>,
}

fn load_external(cfg: &RunConfig, out: &Path, study: &str) -> Result<External> {
    let d = out.join("external").join(study);
    if cfg.mortality.is_none() && cfg.allow_no_external {
        return Ok(External {
            synthetic: Vec::new(),
            curve: None,
        });
    }
    Ok(External {
        synthetic: read_synthetic_csv(&d.join("synthetic.csv"))?,
        curve: Some(read_curve_csv(&d.join("curve.csv"))?),
    })
}

#[derive(Debug, Clone, Serialize)]
struct ArmFitSummary {
    study: String,
    arm: String,
    n: usize,
    events: usize,
    max_rhat: f64,
    mst_mean: f64,
    heavy_tail_draws: usize,
    runtime_secs: f64,
}

/// Per-draw MST for one arm under `model`.
fn fit_arm(cfg: &RunConfig, model: ModelKind, data: &[Observation], ext: &External, seed: u64) -> Result<(PosteriorDraws, Vec<f64>, usize)> {
    let mcmc = McmcConfig { seed, ..cfg.mcmc.clone() };
    let mut settings: ExtrapolationSettings = cfg.extrapolation;
    if let Some(c) = &ext.curve {
        settings.cap = settings.cap.min(c.t_max());
    }
    let mut heavy = 0;
    let mut msts = Vec::new();
    let draws = match model.poly_layout() {
        Some((family, m)) => {
            let mut spec = PolyHazardSpec::new(family, cfg.components.unwrap_or(m), cfg.coupling)?;
            spec.allow_no_external = cfg.allow_no_external;
            let target = PolyHazardTarget::new(spec.clone(), data, &ext.synthetic)?;
            // these posteriors are multimodal, so chains start at the best mode found
            let (mode, _) = find_mode(&target, &[target.initial_point(), spec.initial_point()], 2000)?;
            let draws = Sampler::new(&target).with_start(mode, 0.1).run(&mcmc)?;
            for i in thin_indices(draws.n_draws(), cfg.mst_draws) {
                let theta: Vec<f64> = draws.draw(i).iter().map(|v| v.ln()).collect();
                let joint = spec.build(&theta)?;
                let curve = mst::extrapolate_model(&joint.group(Group::Disease), &settings)?;
                heavy += usize::from(curve.heavy_tail);
                msts.push(mst::mst(&curve));
            }
            draws
        }
        None => {
            let background = match &ext.curve {
                Some(c) => PiecewiseConstantHazard::from_survival(c.times(), c.values())?,
                None => PiecewiseConstantHazard::zero(),
            };
            let upper = data.iter().map(|o| o.time).fold(0.0, f64::max);
            let basis = MSplineBasis::new(default_knots(data, upper)?, 3)?;
            let spec = MSplineSpec::new(basis, background);
            let target = MSplineTarget::new(spec.clone(), data)?;
            let draws = Sampler::new(&target).run(&mcmc)?;
            for i in thin_indices(draws.n_draws(), cfg.mst_draws) {
                let h = spec.from_reported(draws.draw(i))?;
                let curve = mst::extrapolate(|t| h.survival(t), &settings)?;
                heavy += usize::from(curve.heavy_tail);
                msts.push(mst::mst(&curve));
            }
            draws
        }
    };
    Ok((draws, msts, heavy))
}

fn load_ipd(cfg: &RunConfig, opts: &RunOptions) -> Result<(Vec<IpdRecord>, BTreeMap<String, StudyMeta>)> {
    let path = cfg.ipd.as_ref().ok_or_else(|| Error::Config("no IPD file configured".into()))?;
    let records = data_io::parse_ipd(path, opts.lenient)?;
    let studies = cfg.studies()?;
    data_io::check_ipd_references(&records, &studies)?;
    Ok((records, studies))
}

/// Fit every arm of every study and write `survival/<model>/mst_draws.csv`.
pub fn fit_survival(cfg: &RunConfig, out: &Path, model: ModelKind, opts: &RunOptions) -> Result<StageOutput> {
    let (records, studies) = load_ipd(cfg, opts)?;
    let groups = data_io::group_ipd(&records);
    let dir = out.join("survival").join(model_dir(model));
    fs::create_dir_all(&dir)?;
    let mut res = StageOutput::default();
    let mut summaries = Vec::new();
    let mut w = csv::Writer::from_path(dir.join("mst_draws.csv"))?;
    w.write_record(["study", "arm", "draw", "mst"])?;
    let model_offset = match model {
        ModelKind::Mspline => 100,
        _ => 0,
    };
    for (i, (id, meta)) in studies.iter().enumerate() {
        let ext = load_external(cfg, out, id)?;
        for (j, arm) in meta.arms.iter().enumerate() {
            let data = groups
                .iter()
                .find(|((s, a), _)| s == id && a == arm)
                .map(|(_, d)| d.clone())
                .ok_or_else(|| Error::Reference(format!("no IPD rows for study {id}, arm {arm}")))?;
            let seed = derive_seed(cfg.seed, 2 + model_offset, (i * 64 + j) as u64);
            let (draws, msts, heavy) = fit_arm(cfg, model, &data, &ext, seed).map_err(|e| match e {
                Error::Stage { .. } => e,
                other => Error::Validation(format!("study {id}, arm {arm}: {other}")),
            })?;
            let max_rhat = (0..draws.n_params()).filter_map(|p| rhat(&draws.chains_of(p))).fold(1.0f64, f64::max);
            if max_rhat > 1.05 {
                res.warnings.push(format!("{} fit for {id}/{arm}: max R-hat {max_rhat:.3}", model.as_str()));
            }
            for (k, m) in msts.iter().enumerate() {
                w.write_record([id.clone(), arm.clone(), k.to_string(), format!("{m:?}")])?;
            }
            summaries.push(ArmFitSummary {
                study: id.clone(),
                arm: arm.clone(),
                n: data.len(),
                events: data.iter().filter(|o| o.event).count(),
                max_rhat,
                mst_mean: msts.iter().sum::<f64>() / msts.len() as f64,
                heavy_tail_draws: heavy,
                runtime_secs: draws.runtime_secs,
            });
        }
    }
    w.flush()?;
    res.files.push(rel(out, &dir.join("mst_draws.csv")));
    // runtime makes this file nondeterministic, so it is not hashed
    write_json(&dir.join("fits.json"), &summaries)?;
    Ok(res)
}

/// MST draws per study: (arm order as written, arm × draw matrix).
pub fn read_mst_draws(path: &Path) -> Result<BTreeMap<String, (Vec<String>, Vec<Vec<f64>>)>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out: BTreeMap<String, (Vec<String>, Vec<Vec<f64>>)> = BTreeMap::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let v: f64 = rec.get(3).and_then(|v| v.parse().ok()).ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: k + 2,
            msg: "bad mst value".into(),
        })?;
        let e = out.entry(rec[0].to_string()).or_default();
        let arm = rec[1].to_string();
        let pos = match e.0.iter().position(|a| *a == arm) {
            Some(p) => p,
            None => {
                e.0.push(arm);
                e.1.push(Vec::new());
                e.0.len() - 1
            }
        };
        e.1[pos].push(v);
    }
    Ok(out)
}

// ---------------------------------------------------------------- stage 3

pub fn extract_contrasts(cfg: &RunConfig, out: &Path, model: ModelKind) -> Result<StageOutput> {
    let draws = read_mst_draws(&out.join("survival").join(model_dir(model)).join("mst_draws.csv"))?;
    let mut data = Vec::new();
    for (id, (arms, msts)) in &draws {
        let n = msts.iter().map(|m| m.len()).min().unwrap_or(0);
        let msts: Vec<Vec<f64>> = msts.iter().map(|m| m[..n].to_vec()).collect();
        let control = cfg
            .decision
            .reference
            .as_ref()
            .and_then(|r| arms.iter().position(|a| a == r))
            .unwrap_or(0);
        data.push(study_contrasts(id, arms, &msts, control, cfg.nma.covariance)?);
    }
    let dir = out.join("contrasts").join(model_dir(model));
    data_io::write_contrasts(&dir, &data)?;
    Ok(StageOutput {
        files: vec![rel(out, &dir.join("contrasts.csv")), rel(out, &dir.join("covariance.csv"))],
        warnings: Vec::new(),
    })
}

// ---------------------------------------------------------------- stage 4

pub fn run_nma(cfg: &RunConfig, out: &Path, model: ModelKind) -> Result<StageOutput> {
    let data = data_io::read_contrasts(&out.join("contrasts").join(model_dir(model)))?;
    let weights: Vec<f64> = data.iter().map(|c| cfg.weight_for(&c.study_id)).collect();
    let nm = NmaModel::new(&data, &weights, cfg.decision.reference.as_deref(), cfg.nma.jitter)?;
    let settings = NmaSettings {
        d_prior_sd: cfg.nma.d_prior_sd,
        tau_prior_sd: cfg.nma.tau_prior_sd,
        tau: TauMode::Random,
    };
    let mcmc = McmcConfig {
        seed: derive_seed(cfg.seed, 4, u64::from(model == ModelKind::Mspline)),
        ..cfg.mcmc.clone()
    };
    let fit = nma::fit(&nm, &settings, &mcmc)?;
    let dir = out.join("nma").join(model_dir(model));
    fit.write_outputs(&dir)?;
    let files = ["d_summary.csv", "treatments.csv", "ranks.csv", "sucra.csv", "league.csv", "draws.csv"];
    Ok(StageOutput {
        files: files.iter().map(|f| rel(out, &dir.join(f))).collect(),
        warnings: fit.convergence_warning.into_iter().collect(),
    })
}

// ---------------------------------------------------------------- stage 5

pub fn load_effects(out: &Path, model: ModelKind) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let dir = out.join("nma").join(model_dir(model));
    let treatments = nma::read_treatments(&dir.join("treatments.csv"))?;
    let draws = PosteriorDraws::read_csv(fs::File::open(dir.join("draws.csv"))?)?;
    let effects = nma::effects_from_draws(&draws, &treatments)?;
    Ok((treatments, effects))
}

/// Decision report, plus CEA outputs when costs are configured.
pub fn decide(cfg: &RunConfig, out: &Path, model: ModelKind) -> Result<StageOutput> {
    let (treatments, effects) = load_effects(out, model)?;
    let d = &cfg.decision;
    let mut report = decision::decision_report(&effects, &treatments, 0, d.mcid_years, d.grade_cutoff)?;
    let dir = out.join("decision").join(model_dir(model));
    fs::create_dir_all(&dir)?;
    let mut files = Vec::new();
    if !cfg.costs.treatments.is_empty() {
        let cea = cea_for(cfg, &treatments, &effects)?;
        cea.write_ceac_csv(fs::File::create(dir.join("ceac.csv"))?)?;
        cea.write_eib_csv(fs::File::create(dir.join("eib.csv"))?)?;
        fs::write(dir.join("ceac.svg"), plot::ceac_svg(&cea))?;
        report.lambda_grid = Some((d.lambda.start, d.lambda.stop, d.lambda.step));
        report.cea = Some(CeaSummary {
            icer: cea.icer.clone(),
            switches: cea.switches().into_iter().map(|(l, k)| (l, treatments[k].clone())).collect(),
        });
        files.extend(["ceac.csv", "eib.csv", "ceac.svg"].iter().map(|f| rel(out, &dir.join(f))));
    }
    write_json(&dir.join("decision_report.json"), &report)?;
    files.push(rel(out, &dir.join("decision_report.json")));
    Ok(StageOutput {
        files,
        warnings: Vec::new(),
    })
}

pub fn cea_for(cfg: &RunConfig, treatments: &[String], effects: &[Vec<f64>]) -> Result<decision::CeaResult> {
    let specs = cfg.costs.specs()?;
    let seed = derive_seed(cfg.seed, 5, 0);
    let draws = decision::sample_costs(&specs, effects.len(), seed)?;
    let costs = draws.aligned(treatments, effects.len(), seed)?;
    decision::cea(effects, &costs, treatments, 0, &cfg.decision.lambda.values()?)
}

// ---------------------------------------------------------------- stage 6

fn forest_rows(path: &Path) -> Result<Vec<ForestRow>> {
    Ok(nma::read_d_summary(path)?
        .into_iter()
        .map(|(treatment, mean, lo, hi)| ForestRow { treatment, mean, lo, hi })
        .collect())
}

/// Forest plot of the primary model, overlaid with the second model if any.
pub fn plot_forest(cfg: &RunConfig, out: &Path) -> Result<StageOutput> {
    let ms = models(cfg);
    let primary = forest_rows(&out.join("nma").join(model_dir(ms[0])).join("d_summary.csv"))?;
    let secondary = match ms.get(1) {
        Some(m) => Some(forest_rows(&out.join("nma").join(model_dir(*m)).join("d_summary.csv"))?),
        None => None,
    };
    let reference = nma::read_treatments(&out.join("nma").join(model_dir(ms[0])).join("treatments.csv"))?[0].clone();
    let svg = plot::forest_svg(
        &primary,
        secondary.as_deref(),
        (ms[0].as_str(), ms.get(1).map_or("", |m| m.as_str())),
        &format!("Mean survival difference vs {reference}"),
    );
    let dir = out.join("plots");
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("forest.svg"), svg)?;
    Ok(StageOutput {
        files: vec![PathBuf::from("plots/forest.svg")],
        warnings: Vec::new(),
    })
}

// ---------------------------------------------------------------- manifest

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub input_hash: String,
    pub outputs: BTreeMap<String, String>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineManifest {
    pub version: String,
    pub seed: u64,
    pub config: String,
    pub stages: BTreeMap<String, StageRecord>,
}

impl PipelineManifest {
    pub fn load(out: &Path) -> Option<Self> {
        let text = fs::read_to_string(out.join("manifest.json")).ok()?;
        serde_json::from_str(&text).ok()
    }
}

#[derive(Debug, Clone)]
pub struct PipelineReport {
    pub manifest: PipelineManifest,
    pub ran: Vec<String>,
    pub skipped: Vec<String>,
    pub warnings: Vec<String>,
}

fn hash_parts(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    hex::encode(h.finalize())
}

fn outputs_current(out: &Path, rec: &StageRecord) -> bool {
    rec.outputs
        .iter()
        .all(|(f, h)| sha256_file(&out.join(f)).map(|x| x == *h).unwrap_or(false))
}

fn upstream_hash(manifest: &PipelineManifest, stage: &str) -> String {
    manifest
        .stages
        .get(stage)
        .map(|r| r.outputs.iter().map(|(f, h)| format!("{f}={h}")).collect::<Vec<_>>().join(";"))
        .unwrap_or_default()
}

/// Run all stages in order, skipping any whose inputs and outputs match the
/// existing manifest. Partial outputs of a failed stage are left in place.
pub fn run_pipeline(cfg: &RunConfig, out: &Path, opts: &RunOptions) -> Result<PipelineReport> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let config_text = cfg.to_toml_string()?;
    let previous = if opts.force { None } else { PipelineManifest::load(out) };
    let mut manifest = PipelineManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        config: config_text.clone(),
        stages: BTreeMap::new(),
    };
    let mut report = PipelineReport {
        manifest: PipelineManifest::default(),
        ran: Vec::new(),
        skipped: Vec::new(),
        warnings: Vec::new(),
    };
    let file_hash = |p: &Option<PathBuf>| -> Result<String> {
        match p {
            Some(p) => sha256_file(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display()))),
            None => Ok(String::new()),
        }
    };
    let mortality_hash = file_hash(&cfg.mortality)?;
    let ipd_hash = file_hash(&cfg.ipd)?;
    let ms = models(cfg);
    for (idx, stage) in STAGES.iter().enumerate() {
        let upstream = if idx == 0 { String::new() } else { upstream_hash(&manifest, STAGES[idx - 1]) };
        let extra = match *stage {
            "project-mortality" => mortality_hash.clone(),
            "fit-survival" => ipd_hash.clone(),
            _ => String::new(),
        };
        let input_hash = hash_parts(&[stage, &config_text, &upstream, &extra, &opts.lenient.to_string()]);
        if let Some(rec) = previous.as_ref().and_then(|m| m.stages.get(*stage)) {
            if rec.input_hash == input_hash && outputs_current(out, rec) {
                log::info!("{stage}: inputs unchanged, skipping");
                report.warnings.extend(rec.warnings.iter().cloned());
                manifest.stages.insert(stage.to_string(), rec.clone());
                report.skipped.push(stage.to_string());
                continue;
            }
        }
        log::info!("{stage}: running");
        let mut res = StageOutput::default();
        let run = || -> Result<StageOutput> {
            let mut r = StageOutput::default();
            match *stage {
                "project-mortality" => r.extend(project_mortality(cfg, out)?),
                "fit-survival" => {
                    for m in &ms {
                        r.extend(fit_survival(cfg, out, *m, opts)?);
                    }
                }
                "extract-contrasts" => {
                    for m in &ms {
                        r.extend(extract_contrasts(cfg, out, *m)?);
                    }
                }
                "nma" => {
                    for m in &ms {
                        r.extend(run_nma(cfg, out, *m)?);
                    }
                }
                "decide" => {
                    for m in &ms {
                        r.extend(decide(cfg, out, *m)?);
                    }
                }
                _ => r.extend(plot_forest(cfg, out)?),
            }
            Ok(r)
        };
        res.extend(run().map_err(stage_err(stage))?);
        let mut outputs = BTreeMap::new();
        for f in &res.files {
            outputs.insert(f.to_string_lossy().replace('\\', "/"), sha256_file(&out.join(f))?);
        }
        manifest.stages.insert(
            stage.to_string(),
            StageRecord {
                input_hash,
                outputs,
                warnings: res.warnings.clone(),
            },
        );
        report.warnings.extend(res.warnings);
        report.ran.push(stage.to_string());
        write_json(&out.join("manifest.json"), &manifest)?;
    }
    write_json(&out.join("manifest.json"), &manifest)?;
    report.manifest = manifest;
    Ok(report)
}

// ---------------------------------------------------------------- fixture

/// Writes a small synthetic network (three studies, treatments A/B/C, one
/// three-arm study) with IPD, a mortality table and `config.toml`.
/// Returns the config path.
pub fn write_fixture(dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut rng = chain_rng(20_240_601, 0);
    let hazards = [("A", 0.45), ("B", 0.32), ("C", 0.26)];
    let studies: [(&str, &[&str]); 3] = [("S1", &["A", "B"]), ("S2", &["A", "C"]), ("S3", &["A", "B", "C"])];
    let mut records = Vec::new();
    for (s, arms) in studies {
        for arm in arms {
            let rate = hazards.iter().find(|h| h.0 == *arm).unwrap().1;
            for _ in 0..60 {
                let t: f64 = -rng.random::<f64>().ln() / rate;
                let c = 1.0 + 3.0 * rng.random::<f64>();
                records.push(IpdRecord {
                    study: s.to_string(),
                    arm: arm.to_string(),
                    time: t.min(c).max(1e-3),
                    event: t <= c,
                });
            }
        }
    }
    data_io::write_ipd(&dir.join("ipd.csv"), &records)?;
    let mut tables = Vec::new();
    for (sex, shift) in [(Sex::Female, -0.35), (Sex::Male, 0.0)] {
        let rates: Vec<Vec<f64>> = (0..=data_io::MAX_TABLE_AGE)
            .map(|a| {
                (0..12)
                    .map(|y| {
                        let noise = 0.02 * (rng.random::<f64>() - 0.5);
                        (-9.6 + shift + 0.088 * a as f64 - 0.015 * y as f64 + noise).exp().min(0.9)
                    })
                    .collect()
            })
            .collect();
        tables.push(MortalityTable::new("XX", sex, 0, 2008, rates)?);
    }
    data_io::write_mortality(&dir.join("mortality.csv"), &tables)?;
    fs::write(dir.join("config.toml"), FIXTURE_CONFIG)?;
    Ok(dir.join("config.toml"))
}

const FIXTURE_CONFIG: &str = r#"seed = 11
model = "bi-loglogistic"
second_model = "mspline"
ipd = "ipd.csv"
mortality = "mortality.csv"
mst_draws = 60

[mcmc]
chains = 2
warmup = 4000
samples = 4000

[external]
synthetic_n = 600
curve_draws = 40

[decision]
lambda = { start = 0.0, stop = 60000.0, step = 500.0 }
mcid_years = 0.5
grade_cutoff = 0.975
reference = "A"

[costs.treatments.A]
mean = 12000.0
cv = 0.2

[costs.treatments.B]
mean = 20000.0
cv = 0.25

[costs.treatments.C]
mean = 34677.0
cv = 0.25

[study.S1]
arms = ["A", "B"]
country = "XX"
age_mean = 62.0
age_sd = 8.0
female_proportion = 0.4
rob = "low"

[study.S2]
arms = ["A", "C"]
country = "XX"
age_mean = 65.0
age_sd = 7.0
female_proportion = 0.45
rob = "medium"

[study.S3]
arms = ["A", "B", "C"]
country = "XX"
age_mean = 60.0
age_sd = 9.0
female_proportion = 0.5
rob = "low"
"#;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curve_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        fs::write(&p, "time,survival_mean,survival_lo,survival_hi\n0.0,1.0,1.0,1.0\n1.0,0.9,0.88,0.92\n2.0,0.5,0.4,0.6\n").unwrap();
        let c = read_curve_csv(&p).unwrap();
        assert_eq!(c.values(), &[1.0, 0.9, 0.5]);
    }

    #[test]
    fn mst_draws_group_by_study_and_arm() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        fs::write(&p, "study,arm,draw,mst\nS1,A,0,1.0\nS1,A,1,1.5\nS1,B,0,2.0\nS1,B,1,2.5\n").unwrap();
        let m = read_mst_draws(&p).unwrap();
        assert_eq!(m["S1"].0, vec!["A", "B"]);
        assert_eq!(m["S1"].1[1], vec![2.0, 2.5]);
    }

    #[test]
    fn fixture_config_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = write_fixture(dir.path()).unwrap();
        let loaded = RunConfig::load(&cfg_path, true).unwrap();
        assert_eq!(loaded.config.studies().unwrap().len(), 3);
        assert!(data_io::parse_ipd(&dir.path().join("ipd.csv"), false).is_ok());
        assert_eq!(data_io::parse_mortality(&dir.path().join("mortality.csv")).unwrap().len(), 2);
    }

    #[test]
    fn stage_hashes_depend_on_every_part() {
        assert_ne!(hash_parts(&["a", "bc"]), hash_parts(&["ab", "c"]));
    }
}
