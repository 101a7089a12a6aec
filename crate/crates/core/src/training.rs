//! Pretraining, downstream classifier training and evaluation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use cardio_autodiff::{cosine_lr, load_checkpoint, save_checkpoint, AdamW, AdamWConfig, Graph, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplit, LabelSchema, NormMethod, NormalizationStats, Tier};
use crate::error::{CoreError, Result};
use crate::losses::{graph as lg, AsymmetricLossConfig};
use crate::masking::{make_pair, select_training_beat, MaskConfig};
use crate::metrics::{dice, macro_auroc, stratify, MetricReport, StratumKey};
use crate::model::{ModelConfig, ModelInput, RestorationModel, CLASSIFIER_PREFIX, FEATURE_NORM_PREFIX};
use crate::prepare::{prepare, PrepConfig, PreparedRecord};
use crate::scoring::{assemble_with_output, binarize, localization_threshold, top_decile_enrichment, ScoreMap};
use crate::signal::synth::NORMAL_CLASS;
use crate::signal::EcgRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    FinetuneFrozen,
    Joint,
    Scratch,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::FinetuneFrozen => "finetune_frozen",
            Stage::Joint => "joint",
            Stage::Scratch => "scratch",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Reject labelled abnormal records during pretraining.
    pub normals_only: bool,
    pub norm_method: NormMethod,
    pub mask: MaskConfig,
    pub model: ModelConfig,
    pub loss: AsymmetricLossConfig,
    pub prep: PrepConfig,
    /// Starting checkpoint for the downstream stages.
    pub init_checkpoint: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Pretrain,
            epochs: 50,
            batch_size: 32,
            lr: 1e-4,
            weight_decay: 1e-5,
            seed: 0,
            normals_only: true,
            norm_method: NormMethod::ZScore,
            mask: MaskConfig::default(),
            model: ModelConfig::default(),
            loss: AsymmetricLossConfig::default(),
            prep: PrepConfig::default(),
            init_checkpoint: None,
            output: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(CoreError::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(CoreError::Config("lr must be positive and weight_decay non-negative".into()));
        }
        if matches!(self.stage, Stage::FinetuneFrozen | Stage::Joint) && self.init_checkpoint.is_none() {
            return Err(CoreError::Config(format!("stage {} needs init_checkpoint", self.stage.name())));
        }
        self.model.validate()?;
        self.loss.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| CoreError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..Default::default()
        }
    }
}

/// Everything needed to rebuild and use a trained model, stored as the
/// checkpoint metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub stage: Stage,
    pub model: ModelConfig,
    pub prep: PrepConfig,
    pub norm: NormalizationStats,
    pub class_names: Vec<String>,
    pub detection_threshold: Option<f64>,
    pub localization_threshold: Option<f64>,
    /// File name of the run manifest that produced the checkpoint.
    pub manifest: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

pub fn curve_csv(curve: &[EpochLog]) -> String {
    let mut s = String::from("epoch,lr,train_loss,val_loss\n");
    for e in curve {
        let v = e.val_loss.map_or(String::new(), |v| format!("{v:e}"));
        s.push_str(&format!("{},{:e},{:e},{v}\n", e.epoch, e.lr, e.train_loss));
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: RestorationModel,
    pub store: ParamStore,
    /// Parameters at the lowest validation loss, when validation data was
    /// given.
    pub best: Option<ParamStore>,
    pub meta: ModelMeta,
    pub curve: Vec<EpochLog>,
}

impl TrainedModel {
    /// Fresh model with parameters drawn from `seed`.
    pub fn init(config: ModelConfig, prep: PrepConfig, norm: NormalizationStats, class_names: Vec<String>, stage: Stage, seed: u64) -> Result<Self> {
        if config.n_classes != class_names.len() {
            return Err(CoreError::Config(format!(
                "model has {} classes, schema has {}",
                config.n_classes,
                class_names.len()
            )));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = RestorationModel::new(config.clone(), &mut store, &mut rng)?;
        Ok(Self {
            model,
            store,
            best: None,
            meta: ModelMeta {
                stage,
                model: config,
                prep,
                norm,
                class_names,
                detection_threshold: None,
                localization_threshold: None,
                manifest: None,
            },
            curve: Vec::new(),
        })
    }

    pub fn meta_toml(&self) -> String {
        toml::to_string(&self.meta).expect("meta serialises")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.store, &self.meta_toml())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = load_checkpoint(path)?;
        let meta: ModelMeta =
            toml::from_str(&ck.meta).map_err(|e| CoreError::Config(format!("{}: checkpoint metadata: {e}", path.display())))?;
        let mut t = Self::init(meta.model.clone(), meta.prep.clone(), meta.norm.clone(), meta.class_names.clone(), meta.stage, 0)?;
        ck.restore_into(&mut t.store)?;
        t.meta = meta;
        Ok(t)
    }

    pub fn schema(&self) -> Result<LabelSchema> {
        LabelSchema::new(&self.meta.class_names)
    }

    /// SHA-256 over every non-classifier parameter value.
    pub fn backbone_hash(&self) -> String {
        hash_params(&self.store, |name| !name.starts_with(CLASSIFIER_PREFIX))
    }

    pub fn prepare(&self, record: &EcgRecord) -> Result<PreparedRecord> {
        prepare(record, self.model.config.global_len, self.model.config.beat_len, &self.meta.prep)
    }
}

pub fn hash_params(store: &ParamStore, keep: impl Fn(&str) -> bool) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for (_, p) in store.iter() {
        if keep(&p.name) {
            h.update(p.name.as_bytes());
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
    }
    hex::encode(h.finalize())
}

/// Map `f` over `items` on up to `jobs` threads, keeping input order.
pub fn par_map<T: Sync, U: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> Result<U> + Sync) -> Result<Vec<U>> {
    let jobs = jobs.max(1).min(items.len().max(1));
    if jobs == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    let f = &f;
    let parts: Vec<Result<Vec<U>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(f).collect::<Result<Vec<U>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

pub fn prepare_all(records: &[&EcgRecord], model: &ModelConfig, prep: &PrepConfig, jobs: usize) -> Result<Vec<PreparedRecord>> {
    par_map(records, jobs, |r| prepare(r, model.global_len, model.beat_len, prep))
}

fn attribute_targets(norm: &NormalizationStats, records: &[PreparedRecord]) -> Vec<Vec<f64>> {
    records.iter().map(|r| norm.apply(&r.record.attributes).0).collect()
}

fn label_targets(schema: &LabelSchema, records: &[PreparedRecord]) -> Result<Vec<Vec<f64>>> {
    records
        .iter()
        .map(|r| {
            let labels = r
                .record
                .labels
                .as_ref()
                .ok_or_else(|| CoreError::Data(format!("{}: record has no labels", r.record_id)))?;
            schema.encode(labels)
        })
        .collect()
}

/// Per-sample restoration objective on a freshly masked view of `rec`.
pub fn ad_loss(
    g: &mut Graph,
    model: &RestorationModel,
    store: &ParamStore,
    rec: &PreparedRecord,
    attrs: &[f64],
    mask: &MaskConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let c = model.config.components;
    let clean = &rec.global.values;
    let (global_in, local): (Vec<f64>, Option<(Vec<f64>, Vec<f64>)>) = if c.masking {
        let pair = make_pair(&rec.global, &rec.beats, mask, rng)?;
        let local = pair.local.map(|l| (l.masked.values, l.clean.values));
        (pair.global.values, local)
    } else {
        let local = select_training_beat(&rec.beats, rng).map(|b| (b.values.clone(), b.values.clone()));
        (clean.clone(), local)
    };
    let f = model.forward(
        g,
        store,
        ModelInput {
            global: &global_in,
            local: local.as_ref().map(|l| l.0.as_slice()),
            trend: Some(&rec.trend),
        },
    )?;
    let mut res = lg::restoration(g, clean, f.global_recon, f.global_sigma)?;
    if let (Some(lr), Some((_, target))) = (f.local_recon, &local) {
        let lres = lg::restoration(g, target, lr, f.local_sigma)?;
        res = g.add(res, lres)?;
    }
    let trend = match f.trend_recon {
        Some(t) => lg::trend(g, clean, t)?,
        None => g.constant(Tensor::scalar(0.0)),
    };
    let pred = match f.attr_pred {
        Some(p) => lg::pred(g, attrs, p)?,
        None => g.constant(Tensor::scalar(0.0)),
    };
    lg::ad(g, res, trend, pred, model.config.alpha, model.config.beta)
}

/// Pooled features of the unmasked record.
pub fn clean_features(g: &mut Graph, model: &RestorationModel, store: &ParamStore, rec: &PreparedRecord) -> Result<Var> {
    let gt = model.encode_global(g, store, &rec.global.values)?;
    let tt = if model.config.components.trend {
        Some(model.encode_trend(g, store, &rec.trend)?)
    } else {
        None
    };
    model.pooled_features(g, gt, tt)
}

/// Refit the classifier's feature standardisation to `recs` under `store`.
pub fn fit_feature_norm(model: &RestorationModel, store: &mut ParamStore, recs: &[PreparedRecord]) -> Result<()> {
    let feats = recs
        .iter()
        .map(|r| {
            let mut g = Graph::new();
            let f = clean_features(&mut g, model, store, r)?;
            Ok(g.data(f).to_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    model.fit_feature_norm(store, &feats)
}

pub fn cls_loss(
    g: &mut Graph,
    model: &RestorationModel,
    store: &ParamStore,
    rec: &PreparedRecord,
    y: &[f64],
    cfg: &AsymmetricLossConfig,
) -> Result<Var> {
    let feats = clean_features(g, model, store, rec)?;
    let probs = model.classify(g, store, feats)?;
    lg::cls(g, y, probs, cfg)
}

/// Shared epoch loop: per-sample graphs, mean gradient over each batch,
/// AdamW with a cosine schedule over all steps.
fn run_epochs<F, V>(
    store: &mut ParamStore,
    cfg: &RunConfig,
    n: usize,
    mut sample_loss: F,
    mut val_loss: V,
) -> Result<(Vec<EpochLog>, Option<ParamStore>)>
where
    F: FnMut(&mut Graph, &ParamStore, usize, &mut ChaCha8Rng) -> Result<Var>,
    V: FnMut(&ParamStore) -> Result<Option<f64>>,
{
    if n == 0 {
        return Err(CoreError::Data("no training records".into()));
    }
    store.set_trainable(FEATURE_NORM_PREFIX, false);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(store, cfg.adamw());
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let mut step = 0;
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, ParamStore)> = None;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let lr = cosine_lr(step, total, cfg.lr);
        for batch in order.chunks(cfg.batch_size) {
            store.zero_grad();
            for &i in batch {
                let mut g = Graph::new();
                let loss = sample_loss(&mut g, store, i, &mut rng)?;
                let value = g.item(loss)?;
                if !value.is_finite() {
                    return Err(CoreError::Numeric(format!("loss is {value} at epoch {epoch}")));
                }
                sum += value;
                let scaled = g.scale(loss, 1.0 / batch.len() as f64);
                g.backward(scaled, store)?;
            }
            opt.set_lr(cosine_lr(step, total, cfg.lr));
            opt.step(store);
            step += 1;
        }
        store.zero_grad();
        let val = val_loss(store)?;
        if let Some(v) = val {
            if !v.is_finite() {
                return Err(CoreError::Numeric(format!("validation loss is {v} at epoch {epoch}")));
            }
            if best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, store.clone()));
            }
        }
        curve.push(EpochLog {
            epoch,
            lr,
            train_loss: sum / n as f64,
            val_loss: val,
        });
    }
    Ok((curve, best.map(|b| b.1)))
}

const VAL_SEED_SALT: u64 = 0x5EED_0F_7A11;

fn mean_ad_loss(
    model: &RestorationModel,
    store: &ParamStore,
    recs: &[PreparedRecord],
    attrs: &[Vec<f64>],
    mask: &MaskConfig,
    seed: u64,
) -> Result<Option<f64>> {
    if recs.is_empty() {
        return Ok(None);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ VAL_SEED_SALT);
    let mut sum = 0.0;
    for (r, a) in recs.iter().zip(attrs) {
        let mut g = Graph::new();
        let l = ad_loss(&mut g, model, store, r, a, mask, &mut rng)?;
        sum += g.item(l)?;
    }
    Ok(Some(sum / recs.len() as f64))
}

fn check_normals(records: &[PreparedRecord]) -> Result<()> {
    for r in records {
        if r.record.is_abnormal(NORMAL_CLASS) == Some(true) {
            return Err(CoreError::Data(format!(
                "{} is labelled abnormal; pretraining accepts normal records only",
                r.record_id
            )));
        }
    }
    Ok(())
}

/// Self-supervised pretraining on normal records. Labels are only used for
/// the normal-only check.
pub fn pretrain(cfg: &RunConfig, class_names: &[String], train: &[PreparedRecord], val: &[PreparedRecord]) -> Result<TrainedModel> {
    cfg.validate()?;
    if cfg.normals_only {
        check_normals(train)?;
    }
    let attrs: Vec<&_> = train.iter().map(|r| &r.record.attributes).collect();
    let norm = NormalizationStats::fit(&attrs, cfg.norm_method)?;
    let mut tm = TrainedModel::init(cfg.model.clone(), cfg.prep.clone(), norm, class_names.to_vec(), Stage::Pretrain, cfg.seed)?;
    let targets = attribute_targets(&tm.meta.norm, train);
    let val_normals: Vec<PreparedRecord> = val.iter().filter(|r| r.record.is_abnormal(NORMAL_CLASS) != Some(true)).cloned().collect();
    let val_targets = attribute_targets(&tm.meta.norm, &val_normals);
    let model = tm.model.clone();
    let (curve, best) = run_epochs(
        &mut tm.store,
        cfg,
        train.len(),
        |g, store, i, rng| ad_loss(g, &model, store, &train[i], &targets[i], &cfg.mask, rng),
        |store| mean_ad_loss(&model, store, &val_normals, &val_targets, &cfg.mask, cfg.seed),
    )?;
    fit_feature_norm(&model, &mut tm.store, train)?;
    tm.curve = curve;
    tm.best = best
        .map(|mut b| {
            fit_feature_norm(&model, &mut b, train)?;
            Ok::<_, CoreError>(b)
        })
        .transpose()?;
    Ok(tm)
}

/// Train only the classifier head on features of the frozen backbone.
pub fn finetune_frozen(cfg: &RunConfig, base: &TrainedModel, labeled: &[PreparedRecord], val: &[PreparedRecord]) -> Result<TrainedModel> {
    cfg.loss.validate()?;
    let schema = base.schema()?;
    let mut tm = base.clone();
    tm.meta.stage = Stage::FinetuneFrozen;
    tm.best = None;
    let model = tm.model.clone();
    let feats = |recs: &[PreparedRecord], store: &ParamStore| -> Result<Vec<Vec<f64>>> {
        recs.iter()
            .map(|r| {
                let mut g = Graph::new();
                let f = clean_features(&mut g, &model, store, r)?;
                Ok(g.data(f).to_vec())
            })
            .collect()
    };
    let train_f = feats(labeled, &tm.store)?;
    let val_f = feats(val, &tm.store)?;
    let y = label_targets(&schema, labeled)?;
    let val_y = label_targets(&schema, val)?;
    tm.store.set_all_trainable(false);
    tm.store.set_trainable(CLASSIFIER_PREFIX, true);
    let head_loss = |g: &mut Graph, store: &ParamStore, f: &[f64], y: &[f64]| -> Result<Var> {
        let x = g.constant(Tensor::vector(f.to_vec()));
        let p = model.classify(g, store, x)?;
        lg::cls(g, y, p, &cfg.loss)
    };
    let (curve, best) = run_epochs(
        &mut tm.store,
        cfg,
        labeled.len(),
        |g, store, i, _| head_loss(g, store, &train_f[i], &y[i]),
        |store| {
            if val.is_empty() {
                return Ok(None);
            }
            let mut s = 0.0;
            for (f, y) in val_f.iter().zip(&val_y) {
                let mut g = Graph::new();
                let l = head_loss(&mut g, store, f, y)?;
                s += g.item(l)?;
            }
            Ok(Some(s / val.len() as f64))
        },
    )?;
    tm.store.set_all_trainable(true);
    tm.curve = curve;
    tm.best = best;
    Ok(tm)
}

fn mean_cls_loss(model: &RestorationModel, store: &ParamStore, recs: &[PreparedRecord], y: &[Vec<f64>], cfg: &AsymmetricLossConfig) -> Result<Option<f64>> {
    if recs.is_empty() {
        return Ok(None);
    }
    let mut s = 0.0;
    for (r, t) in recs.iter().zip(y) {
        let mut g = Graph::new();
        let l = cls_loss(&mut g, model, store, r, t, cfg)?;
        s += g.item(l)?;
    }
    Ok(Some(s / recs.len() as f64))
}

/// `L_AD + L_cls` over all parameters, starting from a pretrained model.
pub fn joint_train(cfg: &RunConfig, base: &TrainedModel, labeled: &[PreparedRecord], val: &[PreparedRecord]) -> Result<TrainedModel> {
    cfg.loss.validate()?;
    let schema = base.schema()?;
    let mut tm = base.clone();
    tm.meta.stage = Stage::Joint;
    tm.best = None;
    tm.store.set_all_trainable(true);
    let model = tm.model.clone();
    let attrs = attribute_targets(&tm.meta.norm, labeled);
    let y = label_targets(&schema, labeled)?;
    let val_y = label_targets(&schema, val)?;
    let (curve, best) = run_epochs(
        &mut tm.store,
        cfg,
        labeled.len(),
        |g, store, i, rng| {
            let ad = ad_loss(g, &model, store, &labeled[i], &attrs[i], &cfg.mask, rng)?;
            let cls = cls_loss(g, &model, store, &labeled[i], &y[i], &cfg.loss)?;
            Ok(g.add(ad, cls)?)
        },
        |store| mean_cls_loss(&model, store, val, &val_y, &cfg.loss),
    )?;
    tm.curve = curve;
    tm.best = best;
    Ok(tm)
}

/// Same architecture from random initialisation, trained with `L_cls` only.
pub fn train_from_scratch(cfg: &RunConfig, class_names: &[String], labeled: &[PreparedRecord], val: &[PreparedRecord]) -> Result<TrainedModel> {
    cfg.validate()?;
    let attrs: Vec<&_> = labeled.iter().map(|r| &r.record.attributes).collect();
    let norm = NormalizationStats::fit(&attrs, cfg.norm_method)?;
    let mut tm = TrainedModel::init(cfg.model.clone(), cfg.prep.clone(), norm, class_names.to_vec(), Stage::Scratch, cfg.seed)?;
    let schema = tm.schema()?;
    let model = tm.model.clone();
    let y = label_targets(&schema, labeled)?;
    let val_y = label_targets(&schema, val)?;
    fit_feature_norm(&model, &mut tm.store, labeled)?;
    let (curve, best) = run_epochs(
        &mut tm.store,
        cfg,
        labeled.len(),
        |g, store, i, _| cls_loss(g, &model, store, &labeled[i], &y[i], &cfg.loss),
        |store| mean_cls_loss(&model, store, val, &val_y, &cfg.loss),
    )?;
    tm.curve = curve;
    tm.best = best;
    Ok(tm)
}

/// Score maps and class probabilities of prepared records.
#[derive(Debug, Clone)]
pub struct ScoredRecord {
    pub record_id: String,
    pub map: ScoreMap,
    pub class_probs: Vec<f64>,
    pub truth_mask: Option<Vec<u8>>,
    pub abnormal: Option<bool>,
}

pub fn score_records(tm: &TrainedModel, recs: &[PreparedRecord], jobs: usize) -> Result<Vec<ScoredRecord>> {
    par_map(recs, jobs, |r| {
        let (map, out) = assemble_with_output(&tm.model, &tm.store, r)?;
        if map.values.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Numeric(format!("{}: non-finite anomaly score", r.record_id)));
        }
        Ok(ScoredRecord {
            record_id: r.record_id.clone(),
            map,
            class_probs: out.class_probs,
            truth_mask: r.mask(),
            abnormal: r.record.is_abnormal(NORMAL_CLASS),
        })
    })
}

/// Choose the detection threshold (Youden point) and the localisation
/// threshold (normal score maps) on validation records.
pub fn calibrate(tm: &mut TrainedModel, val: &[ScoredRecord]) -> Result<()> {
    let normal: Vec<&ScoreMap> = val.iter().filter(|s| s.abnormal == Some(false)).map(|s| &s.map).collect();
    tm.meta.localization_threshold = Some(localization_threshold(&normal)?);
    let labeled: Vec<&ScoredRecord> = val.iter().filter(|s| s.abnormal.is_some()).collect();
    let scores: Vec<f64> = labeled.iter().map(|s| s.map.anomaly_score).collect();
    let labels: Vec<bool> = labeled.iter().map(|s| s.abnormal == Some(true)).collect();
    tm.meta.detection_threshold = crate::metrics::operating_point(&scores, &labels).ok().map(|o| o.threshold);
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationSummary {
    pub threshold: f64,
    pub mean_dice: f64,
    pub mean_enrichment: f64,
    pub n_records: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub detection: MetricReport,
    pub tiers: Vec<MetricReport>,
    pub strata: Vec<MetricReport>,
    pub per_class_auroc: Vec<Option<f64>>,
    pub macro_auroc: Option<f64>,
    pub localization: Option<LocalizationSummary>,
}

impl Evaluation {
    pub fn all_reports(&self) -> Vec<MetricReport> {
        let mut v = vec![self.detection.clone()];
        v.extend(self.tiers.iter().cloned());
        v.extend(self.strata.iter().cloned());
        v
    }

    pub fn tier_auroc(&self, tier: Tier) -> Option<f64> {
        let name = format!("tier_{}", tier.name());
        self.tiers.iter().find(|r| r.name == name).and_then(|r| r.auroc)
    }
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub strata: Vec<StratumKey>,
    pub bootstrap: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            strata: vec![StratumKey::Sex, StratumKey::AgeDecade],
            bootstrap: 1000,
            seed: 0,
        }
    }
}

/// Detection, classification-by-tier, localisation and stratified reports
/// for scored test records.
pub fn evaluate(
    tm: &TrainedModel,
    test: &[ScoredRecord],
    records: &[&EcgRecord],
    tiers: &BTreeMap<String, Tier>,
    opts: &EvalOptions,
) -> Result<Evaluation> {
    if test.len() != records.len() {
        return Err(CoreError::Contract("scores and records differ in count".into()));
    }
    let schema = tm.schema()?;
    let scores: Vec<f64> = test.iter().map(|s| s.map.anomaly_score).collect();
    let labels: Vec<bool> = test.iter().map(|s| s.abnormal == Some(true)).collect();
    let detection = MetricReport::binary("detection", &scores, &labels, tm.meta.detection_threshold).with_ci(
        &scores,
        &labels,
        opts.bootstrap,
        opts.seed,
    );

    let probs: Vec<Vec<f64>> = test.iter().map(|s| s.class_probs.clone()).collect();
    let targets: Vec<Vec<f64>> = records
        .iter()
        .map(|r| schema.encode(r.labels.as_deref().unwrap_or(&[])))
        .collect::<Result<_>>()?;
    let all: Vec<usize> = (0..schema.len()).collect();
    let (macro_all, per_class) = macro_auroc(&probs, &targets, &all);
    let mut tier_reports = Vec::new();
    for tier in Tier::ALL {
        let idx: Vec<usize> = schema
            .names()
            .iter()
            .enumerate()
            .filter(|(_, n)| tiers.get(*n) == Some(&tier))
            .map(|(i, _)| i)
            .collect();
        if idx.is_empty() {
            continue;
        }
        let (m, _) = macro_auroc(&probs, &targets, &idx);
        let n_pos = targets.iter().filter(|t| idx.iter().any(|&k| t[k] > 0.5)).count();
        let mut r = MetricReport::binary(&format!("tier_{}", tier.name()), &[], &[], None);
        r.auroc = m;
        r.n_pos = n_pos;
        r.n_neg = targets.len() - n_pos;
        r.note = if m.is_none() {
            Some("no class in this tier has both positives and negatives".into())
        } else {
            None
        };
        tier_reports.push(r);
    }

    let attrs: Vec<&_> = records.iter().map(|r| &r.attributes).collect();
    let strata = opts
        .strata
        .iter()
        .flat_map(|k| stratify(*k, &attrs, &scores, &labels))
        .collect();

    let localization = match tm.meta.localization_threshold {
        Some(th) => {
            let mut dices = Vec::new();
            let mut enr = Vec::new();
            for s in test.iter().filter(|s| s.abnormal == Some(true)) {
                if let Some(m) = &s.truth_mask {
                    if m.iter().any(|v| *v != 0) {
                        dices.push(dice(&binarize(&s.map, th), m)?);
                        if let Some(e) = top_decile_enrichment(&s.map, m) {
                            enr.push(e);
                        }
                    }
                }
            }
            (!dices.is_empty()).then(|| LocalizationSummary {
                threshold: th,
                mean_dice: dices.iter().sum::<f64>() / dices.len() as f64,
                mean_enrichment: enr.iter().sum::<f64>() / enr.len().max(1) as f64,
                n_records: dices.len(),
            })
        }
        None => None,
    };
    Ok(Evaluation {
        detection,
        tiers: tier_reports,
        strata,
        per_class_auroc: per_class,
        macro_auroc: macro_all,
        localization,
    })
}

/// Provenance of one command run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub seed: Option<u64>,
    pub config: Option<String>,
    pub checksums: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub curve: Vec<EpochLog>,
}

pub const MANIFEST_FILE: &str = "manifest.toml";

impl RunManifest {
    pub fn new(command: &str, args: Vec<String>) -> Self {
        Self {
            command: command.to_string(),
            args,
            ..Default::default()
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serialises")
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, self.to_toml()).map_err(|e| CoreError::io(&path, e))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CoreError::Data(format!("{}: {e}", path.display())))
    }
}

/// Records named by `ids`, in that order.
pub fn select<'a>(records: &'a [EcgRecord], ids: &[String]) -> Result<Vec<&'a EcgRecord>> {
    let by_id: BTreeMap<&str, &EcgRecord> = records.iter().map(|r| (r.record_id.as_str(), r)).collect();
    ids.iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .copied()
                .ok_or_else(|| CoreError::Data(format!("split names unknown record {id}")))
        })
        .collect()
}

pub fn split_records<'a>(records: &'a [EcgRecord], split: &DatasetSplit) -> Result<[Vec<&'a EcgRecord>; 4]> {
    Ok([
        select(records, &split.pretrain)?,
        select(records, &split.train)?,
        select(records, &split.val)?,
        select(records, &split.test)?,
    ])
}
