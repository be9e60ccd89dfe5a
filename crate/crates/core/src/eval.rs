//! Accuracy evaluation, per-query prediction logs and the ablation driver.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::checkpoint::check_dims;
use crate::data::{compute_iou, Dataset};
use crate::entity::FilterMode;
use crate::error::{Error, Result};
use crate::model::{Earn, ModelConfig};
use crate::train::{train, TrainConfig};
use crate::visual::ContextMode;

/// A prediction is correct when its box overlaps the ground truth by more
/// than this IoU.
pub const IOU_THRESHOLD: f64 = 0.5;

/// One line of the prediction log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub scene: usize,
    pub query: usize,
    pub kind: Option<String>,
    pub text: String,
    pub selected: usize,
    pub gt_index: usize,
    pub iou: f64,
    pub correct: bool,
    pub w_subject: f64,
    pub w_location: f64,
    pub w_context: f64,
    /// Proposals left after the subject filter.
    pub candidates: usize,
    pub proposals: usize,
    pub x_tl: f64,
    pub y_tl: f64,
    pub x_br: f64,
    pub y_br: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct KindStats {
    pub count: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub mean_candidates: f64,
}

impl KindStats {
    fn from_records<'a>(records: impl Iterator<Item = &'a QueryRecord>) -> Self {
        let mut s = KindStats::default();
        let mut cand = 0usize;
        for r in records {
            s.count += 1;
            s.correct += r.correct as usize;
            cand += r.candidates;
        }
        if s.count > 0 {
            s.accuracy = s.correct as f64 / s.count as f64;
            s.mean_candidates = cand as f64 / s.count as f64;
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub count: usize,
    pub correct: usize,
    pub mean_candidates: f64,
    /// Keyed by query kind; untyped queries are listed under `other`.
    pub breakdown: BTreeMap<String, KindStats>,
    pub config: ModelConfig,
    #[serde(skip)]
    pub records: Vec<QueryRecord>,
}

impl EvalReport {
    pub fn from_records(records: Vec<QueryRecord>, config: ModelConfig) -> Self {
        let all = KindStats::from_records(records.iter());
        let mut kinds: BTreeMap<String, Vec<&QueryRecord>> = BTreeMap::new();
        for r in &records {
            kinds
                .entry(r.kind.clone().unwrap_or_else(|| "other".into()))
                .or_default()
                .push(r);
        }
        let breakdown = kinds
            .into_iter()
            .map(|(k, rs)| (k, KindStats::from_records(rs.into_iter())))
            .collect();
        Self {
            accuracy: all.accuracy,
            count: all.count,
            correct: all.correct,
            mean_candidates: all.mean_candidates,
            breakdown,
            config,
            records,
        }
    }

    pub fn kind(&self, kind: &str) -> KindStats {
        self.breakdown.get(kind).copied().unwrap_or_default()
    }

    /// Writes `<stem>.json`, `<stem>.csv` (summary by kind) and
    /// `<stem>_predictions.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        let p = dir.join(format!("{stem}.json"));
        std::fs::write(&p, json).map_err(|e| Error::io(&p, e))?;

        let p = dir.join(format!("{stem}.csv"));
        let mut w = csv_writer(&p)?;
        let err = |e: csv::Error| Error::Config(format!("{}: {e}", p.display()));
        w.write_record(["kind", "count", "correct", "accuracy", "mean_candidates"])
            .map_err(err)?;
        let all = ("all".to_string(), KindStats {
            count: self.count,
            correct: self.correct,
            accuracy: self.accuracy,
            mean_candidates: self.mean_candidates,
        });
        for (k, s) in std::iter::once(all).chain(self.breakdown.clone()) {
            w.write_record([
                k,
                s.count.to_string(),
                s.correct.to_string(),
                s.accuracy.to_string(),
                s.mean_candidates.to_string(),
            ])
            .map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(&p, e))?;
        write_predictions(&self.records, dir.join(format!("{stem}_predictions.csv")))
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn write_predictions(records: &[QueryRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv_writer(path)?;
    for r in records {
        w.serialize(r)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<QueryRecord>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<QueryRecord>, _>>()
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Accuracy recounted from a prediction log.
pub fn recount(records: &[QueryRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let hits = records.iter().filter(|r| r.iou > IOU_THRESHOLD).count();
    hits as f64 / records.len() as f64
}

/// Grounds every query of `dataset` and scores it against its ground truth.
pub fn evaluate(model: &Earn, dataset: &Dataset) -> Result<EvalReport> {
    check_dims(&model.dims, &dataset.header)?;
    let mut records = Vec::with_capacity(dataset.num_queries());
    for (si, scene) in dataset.scenes.iter().enumerate() {
        for (qi, q) in scene.queries.iter().enumerate() {
            if q.gt_index().is_none() {
                return Err(Error::MissingGroundTruth { scene: si, query: qi });
            }
        }
        if scene.queries.is_empty() {
            continue;
        }
        let results = model.ground_scene(scene)?;
        for (qi, (q, res)) in scene.queries.iter().zip(results).enumerate() {
            let gt = q.gt_index().expect("checked above");
            let sel = scene.proposals[res.selected].bbox;
            let iou = compute_iou(&sel, &scene.proposals[gt].bbox);
            let [x_tl, y_tl, x_br, y_br] = sel.corners();
            records.push(QueryRecord {
                scene: si,
                query: qi,
                kind: q.kind.map(|k| k.name().to_string()),
                text: dataset.header.decode(&q.tokens).join(" "),
                selected: res.selected,
                gt_index: gt,
                iou,
                correct: iou > IOU_THRESHOLD,
                w_subject: res.cue_weights[0],
                w_location: res.cue_weights[1],
                w_context: res.cue_weights[2],
                candidates: res.keep_mask.iter().filter(|&&k| k).count(),
                proposals: scene.len(),
                x_tl,
                y_tl,
                x_br,
                y_br,
            });
        }
    }
    Ok(EvalReport::from_records(records, model.config))
}

/// One ablation axis. Each toggle switches a component between its enabled
/// and disabled setting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Toggle {
    /// Adaptive reconstruction (α and β).
    Adp,
    /// Language reconstruction (γ).
    Lan,
    /// Attribute classification (λ).
    Att,
    /// Entity enhancement.
    Ent,
    /// Soft context pooling; max pooling over all proposals when off.
    Scxtp,
    /// Location cue.
    Loc,
    /// Context cue.
    Cxt,
    /// Hard subject filter.
    Hard,
    /// Soft subject filter.
    Soft,
    /// Distance penalty.
    Distp,
}

impl Toggle {
    pub const ALL: [Toggle; 10] = [
        Toggle::Adp,
        Toggle::Lan,
        Toggle::Att,
        Toggle::Ent,
        Toggle::Scxtp,
        Toggle::Loc,
        Toggle::Cxt,
        Toggle::Hard,
        Toggle::Soft,
        Toggle::Distp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Toggle::Adp => "adp",
            Toggle::Lan => "lan",
            Toggle::Att => "att",
            Toggle::Ent => "ent",
            Toggle::Scxtp => "scxtp",
            Toggle::Loc => "loc",
            Toggle::Cxt => "cxt",
            Toggle::Hard => "hard",
            Toggle::Soft => "soft",
            Toggle::Distp => "distp",
        }
    }

    /// Applies the toggle's setting to a configuration.
    pub fn apply(self, on: bool, c: &mut TrainConfig) {
        let base = TrainConfig::default();
        match self {
            Toggle::Adp => {
                c.loss.alpha = if on { base.loss.alpha } else { 0.0 };
                c.loss.beta = if on { base.loss.beta } else { 0.0 };
            }
            Toggle::Lan => c.loss.gamma = if on { base.loss.gamma } else { 0.0 },
            Toggle::Att => c.loss.lambda = if on { base.loss.lambda } else { 0.0 },
            Toggle::Ent => c.model.entity_enhancement = on,
            Toggle::Scxtp => {
                c.model.context_mode = if on { ContextMode::SoftAll } else { ContextMode::MaxAll }
            }
            Toggle::Loc => c.model.cues.location = on,
            Toggle::Cxt => c.model.cues.context = on,
            Toggle::Hard => set_filter(c, FilterMode::Hard, on),
            Toggle::Soft => set_filter(c, FilterMode::Soft, on),
            Toggle::Distp => c.model.distance_penalty = on,
        }
    }
}

fn set_filter(c: &mut TrainConfig, mode: FilterMode, on: bool) {
    if on {
        c.model.filter_mode = mode;
    } else if c.model.filter_mode == mode {
        c.model.filter_mode = FilterMode::None;
    }
}

impl fmt::Display for Toggle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Toggle {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Toggle::ALL
            .into_iter()
            .find(|t| t.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidToggle(s.to_string()))
    }
}

/// Parses a comma-separated toggle list; duplicates and the hard/soft pair
/// are rejected.
pub fn parse_toggles(list: &str) -> Result<Vec<Toggle>> {
    let toggles: Vec<Toggle> = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    validate_toggles(&toggles)?;
    Ok(toggles)
}

pub fn validate_toggles(toggles: &[Toggle]) -> Result<()> {
    for (i, t) in toggles.iter().enumerate() {
        if toggles[..i].contains(t) {
            return Err(Error::InvalidToggle(format!("{t} listed twice")));
        }
    }
    if toggles.contains(&Toggle::Hard) && toggles.contains(&Toggle::Soft) {
        return Err(Error::InvalidToggle(
            "hard and soft filters are exclusive; ablate them in separate runs".into(),
        ));
    }
    Ok(())
}

/// Every on/off combination of `toggles`, all-on first.
pub fn toggle_grid(toggles: &[Toggle]) -> Vec<BTreeMap<Toggle, bool>> {
    let k = toggles.len();
    (0..1usize << k)
        .map(|mask| {
            toggles
                .iter()
                .enumerate()
                .map(|(j, &t)| (t, mask >> (k - 1 - j) & 1 == 0))
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub settings: BTreeMap<String, bool>,
    pub config: TrainConfig,
    pub seeds: Vec<u64>,
    pub reports: Vec<EvalReport>,
    pub mean_accuracy: f64,
    pub mean_by_kind: BTreeMap<String, f64>,
    pub mean_candidates: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub toggles: Vec<Toggle>,
    pub rows: Vec<AblationRow>,
}

fn label(settings: &BTreeMap<Toggle, bool>) -> String {
    if settings.is_empty() {
        return "baseline".into();
    }
    settings
        .iter()
        .map(|(t, on)| format!("{}{t}", if *on { '+' } else { '-' }))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Configurations of an ablation without training anything.
pub fn ablation_configs(base: &TrainConfig, toggles: &[Toggle]) -> Result<Vec<(BTreeMap<Toggle, bool>, TrainConfig)>> {
    validate_toggles(toggles)?;
    toggle_grid(toggles)
        .into_iter()
        .map(|settings| {
            let mut c = base.clone();
            for (&t, &on) in &settings {
                t.apply(on, &mut c);
            }
            c.validate()?;
            Ok((settings, c))
        })
        .collect()
}

/// Trains and evaluates one model per toggle combination and seed. All
/// combinations share the seeds.
pub fn run_ablation(
    train_set: &Dataset,
    eval_set: &Dataset,
    base: &TrainConfig,
    toggles: &[Toggle],
    seeds: &[u64],
    mut progress: impl FnMut(&str, u64, &EvalReport),
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut rows = Vec::new();
    for (settings, config) in ablation_configs(base, toggles)? {
        let name = label(&settings);
        let mut reports = Vec::new();
        for &seed in seeds {
            let c = TrainConfig { seed, ..config.clone() };
            let outcome = train(train_set, &c)?;
            let report = evaluate(&outcome.model, eval_set)?;
            progress(&name, seed, &report);
            reports.push(report);
        }
        let n = reports.len() as f64;
        let mean = |f: &dyn Fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let kinds: Vec<String> = reports[0].breakdown.keys().cloned().collect();
        let mean_by_kind = kinds
            .into_iter()
            .map(|k| {
                let v = mean(&|r| r.kind(&k).accuracy);
                (k, v)
            })
            .collect();
        rows.push(AblationRow {
            label: name,
            settings: settings.iter().map(|(t, &on)| (t.name().to_string(), on)).collect(),
            mean_accuracy: mean(&|r| r.accuracy),
            mean_candidates: mean(&|r| r.mean_candidates),
            mean_by_kind,
            config,
            seeds: seeds.to_vec(),
            reports,
        });
    }
    Ok(AblationTable {
        toggles: toggles.to_vec(),
        rows,
    })
}

impl AblationTable {
    /// Writes `ablation.json`, `ablation.csv` and one prediction log per
    /// row and seed into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("ablation.json");
        std::fs::write(&p, serde_json::to_string_pretty(self).expect("table serializes"))
            .map_err(|e| Error::io(&p, e))?;
        let p = dir.join("ablation.csv");
        let mut w = csv_writer(&p)?;
        let err = |e: csv::Error| Error::Config(format!("{}: {e}", p.display()));
        let kinds: Vec<String> = self
            .rows
            .iter()
            .flat_map(|r| r.mean_by_kind.keys().cloned())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut header = vec!["row".to_string(), "label".to_string()];
        header.extend(self.toggles.iter().map(|t| t.name().to_string()));
        header.push("accuracy".into());
        header.extend(kinds.iter().map(|k| format!("accuracy_{k}")));
        header.push("mean_candidates".into());
        w.write_record(&header).map_err(err)?;
        for (i, r) in self.rows.iter().enumerate() {
            let mut rec = vec![i.to_string(), r.label.clone()];
            rec.extend(
                self.toggles
                    .iter()
                    .map(|t| (r.settings[t.name()] as u8).to_string()),
            );
            rec.push(r.mean_accuracy.to_string());
            rec.extend(
                kinds
                    .iter()
                    .map(|k| r.mean_by_kind.get(k).map_or(String::new(), |v| v.to_string())),
            );
            rec.push(r.mean_candidates.to_string());
            w.write_record(&rec).map_err(err)?;
            for (seed, rep) in r.seeds.iter().zip(&r.reports) {
                write_predictions(&rep.records, dir.join(format!("row{i}_seed{seed}_predictions.csv")))?;
            }
        }
        w.flush().map_err(|e| Error::io(&p, e))
    }
}
