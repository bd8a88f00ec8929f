//! Run orchestration on top of a generated corpus: training runs,
//! calibrated evaluation and the ablation studies. The command line is a
//! thin layer over these functions.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::corpus::{Label, Manifest, RealParams, BLUR_SIGMAS, TRAIN_SPLIT};
use crate::error::{Error, Result};
use crate::eval::{self, sig6, EvalReport, Sample};
use crate::image::Image;
use crate::metrics::{ScoreRecord, MIN_CALIBRATION_SAMPLES};
use crate::model::{Detector, Toggles};
use crate::params::{ParamStore, FROZEN_PREFIX};
use crate::train::{pretrain_backbone, train_detector, PretextReport, TrainSummary};

pub const CHECKPOINT_FILE: &str = "checkpoint.hxc";
pub const LOG_FILE: &str = "log.jsonl";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// The train split, decoded. Pretext samples are the train reals labeled
/// with the index of their blur level.
pub struct TrainData {
    pub reals: Vec<Image>,
    pub fakes: Vec<Image>,
    pub pretext: Vec<(Image, usize)>,
}

pub fn load_train_data(corpus_dir: &Path) -> Result<TrainData> {
    let manifest = Manifest::load(corpus_dir)?;
    let samples = eval::load_split(corpus_dir, &manifest, TRAIN_SPLIT)?;
    let idx = manifest.select(TRAIN_SPLIT)?;
    let mut data = TrainData {
        reals: Vec::new(),
        fakes: Vec::new(),
        pretext: Vec::new(),
    };
    for (s, &i) in samples.into_iter().zip(&idx) {
        let e = &manifest.entries[i];
        match e.label {
            Label::Real => {
                data.pretext.push((s.image.clone(), RealParams::from_seed(e.seed).sigma_index));
                data.reals.push(s.image);
            }
            Label::Fake => data.fakes.push(s.image),
        }
    }
    Ok(data)
}

/// Pretrain a backbone for `cfg` and return only its `frozen.*` tensors.
pub fn pretrain(cfg: &RunConfig, data: &TrainData, log: &mut dyn Write) -> Result<(ParamStore, PretextReport)> {
    let mut det = Detector::init(cfg.model(), cfg.stage_seed("init"))?;
    let report = pretrain_backbone(&mut det, &data.pretext, BLUR_SIGMAS.len(), &cfg.pretext(), log)?;
    let mut backbone = ParamStore::new();
    for (n, t) in det.params.iter().filter(|(n, _)| n.starts_with(FROZEN_PREFIX)) {
        backbone.insert(n.clone(), t.clone());
    }
    Ok((backbone, report))
}

pub struct TrainedRun {
    pub detector: Detector,
    pub pretext: Option<PretextReport>,
    pub summary: TrainSummary,
}

/// Initialize, pretrain (unless disabled) and train a detector. A given
/// `backbone` is adopted instead of running the pretext stage; it must come
/// from [`pretrain`] with the same seed and encoder keys to reproduce a
/// fresh run.
pub fn train_run(cfg: &RunConfig, data: &TrainData, backbone: Option<&ParamStore>, log: &mut dyn Write) -> Result<TrainedRun> {
    cfg.validate()?;
    let mut detector = Detector::init(cfg.model(), cfg.stage_seed("init"))?;
    let mut pretext = None;
    if cfg.pretext_enabled() {
        match backbone {
            Some(b) => detector.adopt_backbone(b)?,
            None => pretext = Some(pretrain_backbone(&mut detector, &data.pretext, BLUR_SIGMAS.len(), &cfg.pretext(), log)?),
        }
    }
    let summary = train_detector(&mut detector, &data.reals, &data.fakes, &cfg.train(), log)?;
    Ok(TrainedRun {
        detector,
        pretext,
        summary,
    })
}

/// Score `split` and build its report. With `calibration = (fpr, split')`
/// the threshold comes from the reals of `split'` (scored separately unless
/// it is `split` itself). Warnings are returned for the caller to print.
pub fn evaluate_split(
    det: &Detector,
    corpus_dir: &Path,
    split: &str,
    calibration: Option<(f64, &str)>,
) -> Result<(EvalReport, Vec<ScoreRecord>, Vec<String>)> {
    let manifest = Manifest::load(corpus_dir)?;
    let samples = eval::load_split(corpus_dir, &manifest, split)?;
    let records = eval::score_samples(det, &samples, None)?;
    let mut warnings = Vec::new();
    let cal = match calibration {
        None => None,
        Some((fpr, on)) => {
            let cal_records = if on == split {
                records.clone()
            } else {
                let s = eval::load_split(corpus_dir, &manifest, on)?;
                eval::score_samples(det, &s, None)?
            };
            let c = eval::calibrate(&cal_records, on, fpr)?;
            if c.samples < MIN_CALIBRATION_SAMPLES {
                warnings.push(format!(
                    "calibrating on {} reals of {on}; fewer than {MIN_CALIBRATION_SAMPLES} make the threshold unstable",
                    c.samples
                ));
            }
            Some(c)
        }
    };
    let report = eval::evaluate(&samples, &records, cal)?;
    Ok((report, records, warnings))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Study {
    Toggles,
    Alpha,
    Data,
}

impl Study {
    pub const ALL: [Study; 3] = [Study::Toggles, Study::Alpha, Study::Data];

    pub fn name(self) -> &'static str {
        match self {
            Study::Toggles => "toggles",
            Study::Alpha => "alpha",
            Study::Data => "data",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Study::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown study '{s}' (toggles, alpha, data)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub study: Study,
    pub seed: u64,
    pub toggles: Toggles,
    pub alpha: f64,
    pub fraction: f64,
    pub config_hash: String,
    /// `ok`, or the error that stopped this arm.
    pub status: String,
    /// Accuracy per eval split, in split order.
    pub accs: Vec<(String, f64)>,
    pub mean_acc: f64,
    /// Mean accuracy over families other than the training family.
    pub unseen_acc: f64,
    pub mean_ap: f64,
}

/// The arm configurations of one study, before seeding.
pub fn study_arms(base: &RunConfig, study: Study) -> Result<Vec<RunConfig>> {
    let mut arms = Vec::new();
    match study {
        Study::Toggles => {
            for t in Toggles::ablation_arms() {
                let mut c = base.clone();
                c.set_toggles(t);
                arms.push(c);
            }
        }
        Study::Alpha => {
            for a in base.ablate_alphas() {
                let mut c = base.clone();
                c.set("mixup.alpha", &a.to_string())?;
                arms.push(c);
            }
        }
        Study::Data => {
            for f in base.ablate_fractions() {
                let mut c = base.clone();
                c.set("train.data_fraction", &f.to_string())?;
                arms.push(c);
            }
        }
    }
    Ok(arms)
}

/// Run `studies` for every seed in `ablate.seeds`. A failing arm becomes a
/// row with its error in `status` and NaN metrics; the grid continues.
/// The pretext backbone is computed once per seed and shared by all arms.
pub fn ablate(base: &RunConfig, corpus_dir: &Path, studies: &[Study], log: &mut dyn Write) -> Result<Vec<AblationRow>> {
    let data = load_train_data(corpus_dir)?;
    let manifest = Manifest::load(corpus_dir)?;
    let samples = eval::load_split(corpus_dir, &manifest, base.eval_split())?;
    let seen = base.corpus().train_family.to_string();
    let mut backbones: BTreeMap<u64, ParamStore> = BTreeMap::new();
    let mut rows = Vec::new();
    for &study in studies {
        for arm in study_arms(base, study)? {
            for &seed in &base.ablate_seeds() {
                let mut cfg = arm.clone();
                cfg.set_seed(seed);
                let mut row = AblationRow {
                    study,
                    seed,
                    toggles: cfg.toggles(),
                    alpha: cfg.mixup().alpha,
                    fraction: cfg.train().data_fraction,
                    config_hash: cfg.hash(),
                    status: "ok".into(),
                    accs: Vec::new(),
                    mean_acc: f64::NAN,
                    unseen_acc: f64::NAN,
                    mean_ap: f64::NAN,
                };
                writeln!(log, "# {} arm {} seed {seed} config {}", study.name(), cfg.toggles(), row.config_hash)
                    .map_err(|e| Error::io("<ablate log>", e))?;
                let outcome = (|| -> Result<EvalReport> {
                    if cfg.pretext_enabled() && !backbones.contains_key(&seed) {
                        let (b, _) = pretrain(&cfg, &data, &mut std::io::sink())?;
                        backbones.insert(seed, b);
                    }
                    let run = train_run(&cfg, &data, backbones.get(&seed), &mut std::io::sink())?;
                    let records = eval::score_samples(&run.detector, &samples, None)?;
                    eval::evaluate(&samples, &records, None)
                })();
                match outcome {
                    Ok(report) => {
                        row.accs = report.rows.iter().map(|r| (r.family.clone(), r.acc)).collect();
                        let unseen: Vec<f64> = report.rows.iter().filter(|r| r.family != seen).map(|r| r.acc).collect();
                        row.unseen_acc = unseen.iter().sum::<f64>() / unseen.len() as f64;
                        row.mean_acc = report.mean_acc;
                        row.mean_ap = report.mean_ap;
                    }
                    Err(e) => row.status = format!("error: {e}").replace(',', ";"),
                }
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

/// One CSV per study, keyed by study name.
pub fn ablation_csvs(rows: &[AblationRow]) -> BTreeMap<&'static str, String> {
    let families: Vec<String> = rows
        .iter()
        .find(|r| !r.accs.is_empty())
        .map(|r| r.accs.iter().map(|(f, _)| f.clone()).collect())
        .unwrap_or_default();
    let mut out: BTreeMap<&'static str, String> = BTreeMap::new();
    for r in rows {
        let csv = out.entry(r.study.name()).or_insert_with(|| {
            let mut h = String::from("study,seed,mda,lora,hirp,clf,cgf,alpha,fraction,config_hash,status");
            for f in &families {
                let _ = write!(h, ",acc_{f}");
            }
            h.push_str(",unseen_acc,mean_acc,mean_ap\n");
            h
        });
        let on = |b: bool| if b { "on" } else { "off" };
        let t = r.toggles;
        let _ = write!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.study.name(),
            r.seed,
            on(t.mda),
            on(t.lora),
            on(t.hirp),
            on(t.clf),
            on(t.cgf),
            sig6(r.alpha),
            sig6(r.fraction),
            r.config_hash,
            r.status
        );
        for f in &families {
            let acc = r.accs.iter().find(|(g, _)| g == f).map(|(_, a)| sig6(*a)).unwrap_or_default();
            let _ = write!(csv, ",{acc}");
        }
        let num = |x: f64| if x.is_finite() { sig6(x) } else { String::new() };
        let _ = writeln!(csv, ",{},{},{}", num(r.unseen_acc), num(r.mean_acc), num(r.mean_ap));
    }
    out
}

/// Samples of `split` as plain images, for throughput runs.
pub fn split_images(corpus_dir: &Path, split: &str) -> Result<Vec<Image>> {
    let manifest = Manifest::load(corpus_dir)?;
    Ok(eval::load_split(corpus_dir, &manifest, split)?
        .into_iter()
        .map(|s: Sample| s.image)
        .collect())
}
