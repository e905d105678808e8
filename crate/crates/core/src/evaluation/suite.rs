//! Experiment manifest and the runner that writes the four result tables.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::bench::runtime_bench;
use super::metrics::{asr_from_predictions, iqa_pair_report, Iqa, Purifier};
use crate::attacks::{pgd, purifier_in_loop_pgd, score_pgd, u_score_pgd, AttackConfig, AttackOutcome, Norm};
use crate::data::{load_batch, DatasetSpec, LabeledBatch};
use crate::diffusion::{NoiseSchedule, ScheduleSpec, DEFAULT_STEPS};
use crate::error::{Error, Result};
use crate::models::{
    load_for_schedule, load_params, Architecture, Classifier, ClassifierParams, DenoiserParams,
    TimeClassifierParams,
};
use crate::numeric::Tensor;
use crate::purification::{kl_diagnostic, KlReport, PurifyConfig};

pub const DEFAULT_SEED: u64 = 3407;

/// Exact header of every result table.
pub const CSV_HEADER: [&str; 11] = [
    "attack", "victim", "protected", "gamma", "norm", "asr", "psnr", "ssim", "featdist", "wall_s", "seed",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Pgd,
    ScorePgd,
    UScorePgd,
    /// PGD through the purifier (the DiffPGD-style baseline).
    DiffPgd,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::Pgd => "pgd",
            Method::ScorePgd => "score-pgd",
            Method::UScorePgd => "u-score-pgd",
            Method::DiffPgd => "diff-pgd",
        }
    }

    /// Whether the attack needs a victim gradient.
    pub fn uses_victim(self) -> bool {
        self != Method::ScorePgd
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Method::Pgd, Method::ScorePgd, Method::UScorePgd, Method::DiffPgd]
            .into_iter()
            .find(|m| m.tag() == s)
            .ok_or_else(|| Error::config(format!("unknown attack method {s:?}")))
    }
}

/// A tagged attack; unset fields fall back to [`AttackConfig::toy`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackEntry {
    pub tag: String,
    pub method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm: Option<Norm>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    /// Defaults to `gamma / 8`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score_t: Option<usize>,
}

impl AttackEntry {
    pub fn new(tag: &str, method: Method) -> Self {
        AttackEntry {
            tag: tag.into(),
            method,
            norm: None,
            gamma: None,
            eta: None,
            n: None,
            score_t: None,
        }
    }

    pub fn resolve(&self, sched: &NoiseSchedule, seed: u64) -> AttackConfig {
        let mut c = AttackConfig::toy(sched, seed);
        if let Some(g) = self.gamma {
            c.gamma = g;
        }
        c.eta = self.eta.unwrap_or(c.gamma / 8.0);
        if let Some(norm) = self.norm {
            c.norm = norm;
        }
        if let Some(n) = self.n {
            c.n = n;
        }
        if let Some(t) = self.score_t {
            c.score_t = t;
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSettings {
    pub methods: Vec<Method>,
    pub iterations: Vec<usize>,
    pub images: usize,
    pub repetitions: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        BenchSettings {
            methods: vec![Method::ScorePgd, Method::DiffPgd],
            iterations: vec![10, 20],
            images: 4,
            repetitions: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    /// Attack and purification repetitions averaged in every table row.
    pub seeds: Vec<u64>,
    pub dataset: DatasetSpec,
    /// Holds `train.data`, `test.data` and the checkpoints.
    pub artifact_dir: PathBuf,
    pub output_dir: PathBuf,
    pub schedule: ScheduleSpec,
    pub purify: PurifyConfig,
    /// The first victim is the white-box surrogate; the rest measure transfer.
    pub victims: Vec<Architecture>,
    pub attacks: Vec<AttackEntry>,
    pub eval_images: usize,
    pub kl_grid_points: usize,
    pub bench: BenchSettings,
}

impl Default for Manifest {
    fn default() -> Self {
        let schedule = ScheduleSpec::linear(DEFAULT_STEPS);
        let sched = schedule.build().expect("default schedule is valid");
        Manifest {
            seed: DEFAULT_SEED,
            seeds: vec![DEFAULT_SEED, DEFAULT_SEED + 1, DEFAULT_SEED + 2],
            dataset: DatasetSpec::default(),
            artifact_dir: "results/artifacts".into(),
            output_dir: "results".into(),
            purify: PurifyConfig::for_schedule(&sched, DEFAULT_SEED),
            schedule,
            victims: vec![Architecture::ConvSmall, Architecture::Mlp],
            attacks: vec![
                AttackEntry::new("pgd", Method::Pgd),
                AttackEntry::new("score-pgd", Method::ScorePgd),
                AttackEntry::new("u-score-pgd", Method::UScorePgd),
            ],
            eval_images: 128,
            kl_grid_points: 11,
            bench: BenchSettings::default(),
        }
    }
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        let sched = self.schedule.build()?;
        self.purify.validate(&sched)?;
        self.dataset.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::config("manifest needs at least one seed"));
        }
        if self.victims.is_empty() {
            return Err(Error::config("manifest needs at least one victim"));
        }
        if self.eval_images == 0 {
            return Err(Error::config("eval_images must be positive"));
        }
        let mut tags = BTreeSet::new();
        for a in &self.attacks {
            if a.tag.is_empty() || a.tag.contains([',', '"', '\n', '/']) {
                return Err(Error::config(format!("bad attack tag {:?}", a.tag)));
            }
            if !tags.insert(a.tag.as_str()) {
                return Err(Error::config(format!("duplicate attack tag {:?}", a.tag)));
            }
            a.resolve(&sched, self.seed).validate(sched.steps())?;
        }
        let victims: BTreeSet<_> = self.victims.iter().map(|a| a.tag()).collect();
        if victims.len() != self.victims.len() {
            return Err(Error::config("duplicate victim"));
        }
        Ok(())
    }

    pub fn attack(&self, tag: &str) -> Result<&AttackEntry> {
        self.attacks
            .iter()
            .find(|a| a.tag == tag)
            .ok_or_else(|| Error::config(format!("unknown attack tag {tag:?}")))
    }

    pub fn train_data_path(&self) -> PathBuf {
        self.artifact_dir.join("train.data")
    }

    pub fn test_data_path(&self) -> PathBuf {
        self.artifact_dir.join("test.data")
    }

    pub fn victim_path(&self, arch: Architecture) -> PathBuf {
        self.artifact_dir.join(format!("victim-{}.ckpt", arch.tag()))
    }

    pub fn time_classifier_path(&self) -> PathBuf {
        self.artifact_dir.join("time-classifier.ckpt")
    }

    pub fn denoiser_path(&self) -> PathBuf {
        self.artifact_dir.join("denoiser.ckpt")
    }

    /// Purification config for the `k`-th seed repetition.
    pub fn purify_for(&self, k: usize) -> PurifyConfig {
        PurifyConfig {
            seed: self.purify.seed.wrapping_add(k as u64),
            ..self.purify.clone()
        }
    }
}

/// Everything the suite reads from disk.
pub struct SuiteModels {
    pub sched: NoiseSchedule,
    pub victims: Vec<(Architecture, ClassifierParams)>,
    /// The conv-small classifier whose features drive the feature distance.
    pub feature_net: ClassifierParams,
    pub time_classifier: TimeClassifierParams,
    pub denoiser: DenoiserParams,
    pub test: LabeledBatch,
}

impl SuiteModels {
    pub fn load(m: &Manifest) -> Result<Self> {
        let sched = m.schedule.build()?;
        let mut victims = Vec::new();
        for &arch in &m.victims {
            victims.push((arch, load_params::<ClassifierParams>(&m.victim_path(arch))?));
        }
        let feature_net = match victims.iter().find(|(a, _)| *a == Architecture::ConvSmall) {
            Some((_, v)) => v.clone(),
            None => load_params(&m.victim_path(Architecture::ConvSmall))?,
        };
        let time_classifier = load_for_schedule(&m.time_classifier_path(), &sched)?;
        let denoiser = load_for_schedule(&m.denoiser_path(), &sched)?;
        let (_, test) = load_batch(&m.test_data_path())?;
        Ok(SuiteModels {
            sched,
            victims,
            feature_net,
            time_classifier,
            denoiser,
            test,
        })
    }

    pub fn surrogate(&self) -> &ClassifierParams {
        &self.victims[0].1
    }

    /// Runs `method` with the surrogate as victim.
    pub fn run_attack(
        &self,
        method: Method,
        purify_cfg: &PurifyConfig,
        x: &Tensor,
        y: &[usize],
        cfg: &AttackConfig,
    ) -> Result<AttackOutcome> {
        let (v, tc, s) = (self.surrogate(), &self.time_classifier, &self.sched);
        match method {
            Method::Pgd => pgd(v, x, y, cfg),
            Method::ScorePgd => score_pgd(tc, s, x, y, cfg),
            Method::UScorePgd => u_score_pgd(v, tc, s, x, y, cfg),
            Method::DiffPgd => purifier_in_loop_pgd(v, purify_cfg, &self.denoiser, s, x, y, cfg),
        }
    }

    pub fn purifier<'a>(&'a self, cfg: &'a PurifyConfig) -> Purifier<'a> {
        Purifier {
            cfg,
            denoiser: &self.denoiser,
            sched: &self.sched,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Table {
    AsrUnprotected,
    AsrProtected,
    Iqa,
    Runtime,
}

impl Table {
    pub const ALL: [Table; 4] = [Table::AsrUnprotected, Table::AsrProtected, Table::Iqa, Table::Runtime];

    pub fn file_name(self) -> &'static str {
        match self {
            Table::AsrUnprotected => "asr_unprotected.csv",
            Table::AsrProtected => "asr_protected.csv",
            Table::Iqa => "iqa.csv",
            Table::Runtime => "runtime.csv",
        }
    }
}

/// Suffix of the IQA row comparing purified clean with purified adversarial.
pub const BRACKET_SUFFIX: &str = "|purified-clean";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub table: Table,
    pub attack: String,
    pub victim: String,
    pub protected: bool,
    pub gamma: f64,
    pub norm: Norm,
    pub asr: Option<f64>,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub featdist: Option<f64>,
    pub wall_s: Option<f64>,
    pub seeds: Vec<u64>,
    pub config_fingerprint: u64,
}

impl EvalRow {
    fn record(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        vec![
            self.attack.clone(),
            self.victim.clone(),
            self.protected.to_string(),
            self.gamma.to_string(),
            self.norm.tag().to_string(),
            opt(self.asr),
            opt(self.psnr),
            opt(self.ssim),
            opt(self.featdist),
            opt(self.wall_s),
            seeds.join(";"),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// Per attack tag, on the first seed.
    pub kl: Vec<(String, KlReport)>,
}

impl EvalReport {
    pub fn table(&self, t: Table) -> impl Iterator<Item = &EvalRow> {
        self.rows.iter().filter(move |r| r.table == t)
    }

    /// The row of table `t` for `attack` and `victim`.
    pub fn find(&self, t: Table, attack: &str, victim: &str) -> Option<&EvalRow> {
        self.table(t).find(|r| r.attack == attack && r.victim == victim)
    }

    /// Writes the rows of `t` to `dir/<table file>`.
    pub fn write_table(&self, dir: &Path, t: Table) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(t.file_name());
        let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
        w.write_record(CSV_HEADER).map_err(csv_err)?;
        for r in self.table(t) {
            w.write_record(r.record()).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(path)
    }

    pub fn write_csvs(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        Table::ALL.into_iter().map(|t| self.write_table(dir, t)).collect()
    }
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("csv: {other:?}")),
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn fingerprint<T: Serialize>(v: &T) -> u64 {
    fnv1a(&serde_json::to_vec(v).unwrap_or_default())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn mean_iqa(v: &[Iqa]) -> Iqa {
    Iqa {
        psnr: mean(&v.iter().map(|q| q.psnr).collect::<Vec<_>>()),
        ssim: mean(&v.iter().map(|q| q.ssim).collect::<Vec<_>>()),
        featdist: mean(&v.iter().map(|q| q.featdist).collect::<Vec<_>>()),
    }
}

/// Evenly spaced timesteps `0, .., T`.
pub fn kl_grid(steps: usize, points: usize) -> Vec<usize> {
    if points < 2 {
        return vec![0];
    }
    let mut g: Vec<usize> = (0..points).map(|i| i * steps / (points - 1)).collect();
    g.dedup();
    g
}

/// Tables 1-3 and the KL diagnostic.
pub fn evaluate_attacks(m: &Manifest, models: &SuiteModels) -> Result<EvalReport> {
    let eval = models.test.head(m.eval_images.min(models.test.len()))?;
    let (x, y) = (&eval.images, &eval.labels);

    // Per seed: purified clean images and clean predictions through both pipelines.
    struct SeedCtx {
        purify: PurifyConfig,
        purified_clean: Tensor,
        clean_pred: Vec<Vec<usize>>,
        protected_clean_pred: Vec<Vec<usize>>,
    }
    let mut ctxs = Vec::new();
    for k in 0..m.seeds.len() {
        let purify = m.purify_for(k);
        let purified_clean = models.purifier(&purify).apply(x)?;
        let mut clean_pred = Vec::new();
        let mut protected_clean_pred = Vec::new();
        for (_, v) in &models.victims {
            clean_pred.push(v.predict(x)?);
            protected_clean_pred.push(v.predict(&purified_clean)?);
        }
        ctxs.push(SeedCtx {
            purify,
            purified_clean,
            clean_pred,
            protected_clean_pred,
        });
    }

    let mut unprotected = Vec::new();
    let mut protected = Vec::new();
    let mut iqa = Vec::new();
    let mut kl = Vec::new();
    for entry in &m.attacks {
        let nv = models.victims.len();
        let (mut asr_u, mut asr_p) = (vec![Vec::new(); nv], vec![Vec::new(); nv]);
        let (mut main, mut bracket) = (Vec::new(), Vec::new());
        let mut cfg0 = None;
        for (k, &seed) in m.seeds.iter().enumerate() {
            let ctx = &ctxs[k];
            let cfg = entry.resolve(&models.sched, seed);
            let out = models.run_attack(entry.method, &ctx.purify, x, y, &cfg)?;
            let purified_adv = models.purifier(&ctx.purify).apply(&out.x_adv)?;
            for (j, (_, v)) in models.victims.iter().enumerate() {
                asr_u[j].push(asr_from_predictions(&ctx.clean_pred[j], &v.predict(&out.x_adv)?, y)?);
                asr_p[j].push(asr_from_predictions(
                    &ctx.protected_clean_pred[j],
                    &v.predict(&purified_adv)?,
                    y,
                )?);
            }
            let pair = iqa_pair_report(&models.feature_net, x, &out.x_adv, &purified_adv, &ctx.purified_clean)?;
            main.push(pair.clean_vs_purified_adv);
            bracket.push(pair.purified_clean_vs_purified_adv);
            if k == 0 {
                let grid = kl_grid(models.sched.steps(), m.kl_grid_points);
                kl.push((
                    entry.tag.clone(),
                    kl_diagnostic(&models.time_classifier, &models.sched, x, &out.x_adv, &grid, m.seed)?,
                ));
            }
            cfg0.get_or_insert(cfg);
        }
        let cfg = cfg0.expect("at least one seed");
        let fp = fingerprint(&(entry, &m.purify, &m.schedule));
        let row = |table, attack: String, victim: &str, protected| EvalRow {
            table,
            attack,
            victim: victim.to_string(),
            protected,
            gamma: cfg.gamma,
            norm: cfg.norm,
            asr: None,
            psnr: None,
            ssim: None,
            featdist: None,
            wall_s: None,
            seeds: m.seeds.clone(),
            config_fingerprint: fp,
        };
        for (j, (arch, _)) in models.victims.iter().enumerate() {
            unprotected.push(EvalRow {
                asr: Some(mean(&asr_u[j])),
                ..row(Table::AsrUnprotected, entry.tag.clone(), arch.tag(), false)
            });
            protected.push(EvalRow {
                asr: Some(mean(&asr_p[j])),
                ..row(Table::AsrProtected, entry.tag.clone(), arch.tag(), true)
            });
        }
        for (suffix, q) in [("", mean_iqa(&main)), (BRACKET_SUFFIX, mean_iqa(&bracket))] {
            iqa.push(EvalRow {
                psnr: Some(q.psnr),
                ssim: Some(q.ssim),
                featdist: Some(q.featdist),
                ..row(Table::Iqa, format!("{}{suffix}", entry.tag), Architecture::ConvSmall.tag(), true)
            });
        }
    }
    let mut rows = unprotected;
    rows.extend(protected);
    rows.extend(iqa);
    Ok(EvalReport { rows, kl })
}

/// Mean wall seconds per attack run, per method and iteration count.
pub fn benchmark_attacks(m: &Manifest, models: &SuiteModels) -> Result<Vec<EvalRow>> {
    let batch = models.test.head(m.bench.images.min(models.test.len()))?;
    let resolution = batch.images.shape()[3];
    let mut rows = Vec::new();
    for &method in &m.bench.methods {
        for &n in &m.bench.iterations {
            let cfg = AttackConfig {
                n,
                ..AttackConfig::toy(&models.sched, m.seed)
            };
            let stats = runtime_bench(
                || {
                    models
                        .run_attack(method, &m.purify, &batch.images, &batch.labels, &cfg)
                        .map(|_| ())
                },
                m.bench.repetitions,
                n,
                resolution,
            )?;
            rows.push(EvalRow {
                table: Table::Runtime,
                attack: format!("{}/n{n}", method.tag()),
                victim: if method.uses_victim() {
                    m.victims[0].tag().to_string()
                } else {
                    "none".to_string()
                },
                protected: method == Method::DiffPgd,
                gamma: cfg.gamma,
                norm: cfg.norm,
                asr: None,
                psnr: None,
                ssim: None,
                featdist: None,
                wall_s: Some(stats.mean),
                seeds: vec![m.seed],
                config_fingerprint: fingerprint(&(method, &cfg, &m.purify)),
            });
        }
    }
    Ok(rows)
}

/// Loads every artifact, fills all four tables, writes them and
/// `kl_diagnostic.json` under `output_dir`.
pub fn run_experiment_suite(m: &Manifest) -> Result<EvalReport> {
    m.validate()?;
    let models = SuiteModels::load(m)?;
    let mut report = evaluate_attacks(m, &models)?;
    report.rows.extend(benchmark_attacks(m, &models)?);
    report.write_csvs(&m.output_dir)?;
    std::fs::write(
        m.output_dir.join("kl_diagnostic.json"),
        serde_json::to_string_pretty(&report.kl)?,
    )?;
    Ok(report)
}

/// Generates the dataset and trains every model whose artifact is missing,
/// with the default training configs seeded by `m.seed`. Returns the paths
/// written.
pub fn prepare_artifacts(m: &Manifest) -> Result<Vec<PathBuf>> {
    use crate::data::{generate, save_batch};
    use crate::models::{save_params, DenoiserHyper, TimeClassifierHyper, TrainConfig};

    m.validate()?;
    std::fs::create_dir_all(&m.artifact_dir)?;
    let mut written = Vec::new();
    let spec = &m.dataset;
    if !m.train_data_path().exists() || !m.test_data_path().exists() {
        let (train, test) = generate(spec)?;
        save_batch(&m.train_data_path(), spec, &train)?;
        save_batch(&m.test_data_path(), spec, &test)?;
        written.extend([m.train_data_path(), m.test_data_path()]);
    }
    let (_, train) = load_batch(&m.train_data_path())?;
    let k = spec.num_classes;
    let sched = m.schedule.build()?;
    let mut archs = m.victims.clone();
    if !archs.contains(&Architecture::ConvSmall) {
        archs.push(Architecture::ConvSmall);
    }
    for arch in archs {
        let path = m.victim_path(arch);
        if !path.exists() {
            let cfg = TrainConfig {
                seed: m.seed,
                ..TrainConfig::for_classifier(arch)
            };
            let (model, _) = ClassifierParams::train(&train, arch, k, &cfg)?;
            save_params(&model, &path)?;
            written.push(path);
        }
    }
    if !m.time_classifier_path().exists() {
        let cfg = TrainConfig {
            seed: m.seed,
            ..TrainConfig::for_time_classifier()
        };
        let (model, _) = TimeClassifierParams::train(&train, &sched, k, TimeClassifierHyper::default(), &cfg)?;
        save_params(&model, &m.time_classifier_path())?;
        written.push(m.time_classifier_path());
    }
    if !m.denoiser_path().exists() {
        let cfg = TrainConfig {
            seed: m.seed,
            ..TrainConfig::for_denoiser()
        };
        let (model, _) = DenoiserParams::train(&train, &sched, DenoiserHyper::default(), &cfg)?;
        save_params(&model, &m.denoiser_path())?;
        written.push(m.denoiser_path());
    }
    Ok(written)
}
