//! The data-human-model loop: annotate, train, verify, fine-tune and
//! re-annotate, with every intermediate corpus kept as an immutable,
//! content-addressed snapshot so an interrupted run can resume.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::{region_key, AnnotatorDescriptor, MatcherTables};
use crate::matching::clean_dataset;
use crate::pipeline::{ImageRecord, Pipeline};
use crate::region::{QaPair, Region};
use crate::store::{corpus_hash, write_atomic, ConceptIndex};
use crate::verify::{
    sample_for_verification, verification_metrics, Board, BoardConfig, ManualClock, MetricsReport, SamplingLedger,
    SamplingParams, TaskKind, TaskPayload, TaskResult, VerificationTask, VqaOutcome,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// A corpus produced by the annotation pipeline.
    Annotated,
    /// Matcher returned by the train hook after the first annotation.
    Trained,
    /// A corpus after one human verification round.
    Verified,
    /// Matcher returned by the fine-tune hook.
    Finetuned,
}

/// One durable step of the loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub step: usize,
    pub iteration: usize,
    pub stage: Stage,
    pub corpus_hash: String,
    pub matcher_descriptor: AnnotatorDescriptor,
    pub metrics: MetricsReport,
}

/// Content-addressed corpus files plus numbered step manifests.
#[derive(Debug, Clone)]
pub struct Snapshots {
    dir: PathBuf,
}

impl Snapshots {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn corpus_path(&self, hash: &str) -> PathBuf {
        self.dir.join(format!("corpus-{hash}.jsonl"))
    }

    /// Serialized corpus: one region per line, sorted by region id.
    pub fn encode(regions: &[Region]) -> Vec<u8> {
        let mut sorted: Vec<&Region> = regions.iter().collect();
        sorted.sort_by(|a, b| a.region_id.cmp(&b.region_id));
        let mut out = Vec::new();
        for r in sorted {
            serde_json::to_writer(&mut out, r).expect("region serializes");
            out.push(b'\n');
        }
        out
    }

    /// Writes `regions` unless an identical snapshot exists; returns its hash.
    pub fn put(&self, regions: &[Region]) -> Result<String> {
        let hash = corpus_hash(regions);
        let path = self.corpus_path(&hash);
        if !path.exists() {
            write_atomic(&path, &Self::encode(regions))?;
        }
        Ok(hash)
    }

    pub fn get(&self, hash: &str) -> Result<Vec<Region>> {
        let text = std::fs::read_to_string(self.corpus_path(hash))?;
        let regions = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<Region>, _>>()?;
        if corpus_hash(&regions) != hash {
            return Err(Error::validation(format!("snapshot {hash} does not match its content")));
        }
        Ok(regions)
    }

    fn manifest_path(&self, step: usize) -> PathBuf {
        self.dir.join(format!("step-{step:03}.json"))
    }

    pub fn record(&self, manifest: &Manifest) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(manifest)?;
        write_atomic(&self.manifest_path(manifest.step), &bytes)?;
        Ok(())
    }

    /// Manifests in step order. Stops at the first gap.
    pub fn manifests(&self) -> Result<Vec<Manifest>> {
        let mut out = Vec::new();
        loop {
            let path = self.manifest_path(out.len());
            if !path.exists() {
                return Ok(out);
            }
            let m: Manifest = serde_json::from_slice(&std::fs::read(path)?)?;
            out.push(m);
        }
    }
}

/// What a model hook sees: the snapshot it trains on.
pub struct HookContext<'a> {
    pub iteration: usize,
    pub corpus_hash: &'a str,
    pub corpus: &'a [Region],
    pub images: &'a HashMap<String, ImageRecord>,
    /// Directory the hook may write artifacts into.
    pub artifacts: &'a Path,
}

/// Stand-in for model training: takes a snapshot, returns the matcher to use next.
pub trait ModelHook: Send + Sync {
    fn update(&self, ctx: &HookContext<'_>, current: &AnnotatorDescriptor) -> Result<AnnotatorDescriptor>;
}

/// Leaves the matcher unchanged.
#[derive(Debug, Default, Clone, Copy)]
pub struct IdentityHook;

impl ModelHook for IdentityHook {
    fn update(&self, _ctx: &HookContext<'_>, current: &AnnotatorDescriptor) -> Result<AnnotatorDescriptor> {
        Ok(current.clone())
    }
}

/// Teaches the mock matcher the human-confirmed top-1 tag of every verified
/// region by extending its lookup tables.
#[derive(Debug, Default, Clone, Copy)]
pub struct CorrectionsHook;

impl ModelHook for CorrectionsHook {
    fn update(&self, ctx: &HookContext<'_>, current: &AnnotatorDescriptor) -> Result<AnnotatorDescriptor> {
        let mut url = url::Url::parse(&current.endpoint)
            .map_err(|e| Error::Hook(format!("matcher endpoint {}: {e}", current.endpoint)))?;
        if url.scheme() != "mock" {
            return Err(Error::Hook(format!(
                "corrections need a mock matcher, got {}",
                current.endpoint
            )));
        }
        let mut pairs: Vec<(String, String)> = url.query_pairs().into_owned().collect();
        let mut tables = match pairs.iter().find(|(k, _)| k == "tables") {
            Some((_, path)) => MatcherTables::load(path).map_err(|e| Error::Hook(format!("tables {path}: {e}")))?,
            None => MatcherTables::default(),
        };
        let before = tables.clone();
        for r in ctx.corpus.iter().filter(|r| r.verification.is_verified()) {
            let (Some(img), Some(top)) = (ctx.images.get(&r.image_id), r.top1()) else {
                continue;
            };
            tables.corrections.insert(region_key(&img.image_ref, &r.bbox), top.text.clone());
        }
        if tables == before {
            return Ok(current.clone());
        }
        let path = tables
            .save_in(ctx.artifacts)
            .map_err(|e| Error::Hook(format!("saving matcher tables: {e}")))?;
        pairs.retain(|(k, _)| k != "tables");
        pairs.push(("tables".into(), path.to_string_lossy().into_owned()));
        url.query_pairs_mut().clear().extend_pairs(pairs);
        let mut next = current.clone();
        next.endpoint = url.to_string();
        Ok(next)
    }
}

/// Answers verification tasks in place of human annotators and experts.
pub trait Verifier: Send + Sync {
    /// Candidates the annotator keeps.
    fn filter_tags(&self, region: &Region, candidates: &[String]) -> Vec<String>;
    /// Judgement of one QA pair; `concept` is the tag the region was sampled under.
    fn check_answer(&self, region: &Region, concept: &str, qa: &QaPair) -> VqaOutcome;
    fn correct_answer(&self, region: &Region, qa: &QaPair) -> String;
    /// Expert verdict on a submitted task.
    fn review(&self, _task: &VerificationTask, _region: &Region) -> bool {
        true
    }
}

/// Confirms everything it is shown.
#[derive(Debug, Default, Clone, Copy)]
pub struct AcceptAll;

impl Verifier for AcceptAll {
    fn filter_tags(&self, _region: &Region, candidates: &[String]) -> Vec<String> {
        candidates.to_vec()
    }

    fn check_answer(&self, _region: &Region, _concept: &str, _qa: &QaPair) -> VqaOutcome {
        VqaOutcome::Correct
    }

    fn correct_answer(&self, _region: &Region, qa: &QaPair) -> String {
        qa.answer.clone()
    }
}

type TruthFn = dyn Fn(&Region) -> Option<String> + Send + Sync;

/// Keeps exactly the true label, and flags questions asked about a wrong tag.
/// Regions without a known label are accepted as they are.
pub struct OracleVerifier {
    truth: Arc<TruthFn>,
}

impl OracleVerifier {
    pub fn new(truth: impl Fn(&Region) -> Option<String> + Send + Sync + 'static) -> Self {
        Self { truth: Arc::new(truth) }
    }
}

impl Verifier for OracleVerifier {
    fn filter_tags(&self, region: &Region, candidates: &[String]) -> Vec<String> {
        match (self.truth)(region) {
            Some(t) => candidates.iter().filter(|c| **c == t).cloned().collect(),
            None => candidates.to_vec(),
        }
    }

    fn check_answer(&self, region: &Region, concept: &str, _qa: &QaPair) -> VqaOutcome {
        match (self.truth)(region) {
            Some(t) if t != concept => VqaOutcome::WrongSemantic,
            _ => VqaOutcome::Correct,
        }
    }

    fn correct_answer(&self, _region: &Region, qa: &QaPair) -> String {
        qa.answer.clone()
    }
}

/// Works the board with `workers` scripted annotators and one expert until
/// nothing more can be leased or reviewed.
pub fn drive_board(board: &mut Board, verifier: &dyn Verifier, workers: usize) -> Result<()> {
    let workers: Vec<String> = (1..=workers.max(1)).map(|i| format!("scripted-{i}")).collect();
    loop {
        let mut progress = false;
        for kind in [TaskKind::TagFilter, TaskKind::VqaCheck, TaskKind::VqaCorrect] {
            for w in &workers {
                while let Some(task) = board.lease(w, kind)? {
                    let region = board
                        .region(&task.region_id)
                        .cloned()
                        .ok_or_else(|| Error::validation(format!("board lost region {}", task.region_id)))?;
                    let result = match &task.payload {
                        TaskPayload::TagFilter { candidates } => TaskResult::TagFilter {
                            selected: verifier.filter_tags(&region, candidates),
                        },
                        TaskPayload::VqaCheck { qa, .. } => {
                            let outcome = verifier.check_answer(&region, &task.concept, qa);
                            TaskResult::VqaCheck {
                                outcome,
                                correction: (outcome == VqaOutcome::WrongAnswer)
                                    .then(|| verifier.correct_answer(&region, qa)),
                            }
                        }
                        TaskPayload::VqaCorrect { qa, .. } => TaskResult::VqaCorrect {
                            answer: verifier.correct_answer(&region, qa),
                        },
                    };
                    board.submit(&task.task_id, w, result)?;
                    progress = true;
                }
            }
        }
        let open: Vec<String> = board
            .packages()
            .iter()
            .filter(|p| p.state == crate::verify::PackageState::Open)
            .map(|p| p.package_id.clone())
            .collect();
        for id in open {
            let verdicts: Vec<bool> = {
                let p = board.package(&id).expect("listed package exists");
                p.task_ids
                    .iter()
                    .map(|t| {
                        let task = board.task(t).expect("packaged task exists");
                        board.region(&task.region_id).is_some_and(|r| verifier.review(task, r))
                    })
                    .collect()
            };
            board.review(&id, "scripted-expert", &verdicts)?;
            progress = true;
        }
        if !progress {
            return Ok(());
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoopParams {
    pub iterations: usize,
    pub budget: usize,
    pub sampling: SamplingParams,
    pub board: BoardConfig,
    pub clean_threshold: usize,
    pub workers: usize,
    pub jobs: Option<usize>,
}

impl Default for LoopParams {
    fn default() -> Self {
        Self {
            iterations: 1,
            budget: 1000,
            sampling: SamplingParams::default(),
            board: BoardConfig::default(),
            clean_threshold: crate::matching::DEFAULT_CLEAN_THRESHOLD,
            workers: 2,
            jobs: None,
        }
    }
}

/// Drives the loop. Each call to [`DataLoop::run`] continues after the last
/// recorded step, so a failed hook can simply be retried.
pub struct DataLoop<'a> {
    pub pipeline: Pipeline,
    pub images: Vec<ImageRecord>,
    pub snapshots: Snapshots,
    pub params: LoopParams,
    pub train: &'a dyn ModelHook,
    pub finetune: &'a dyn ModelHook,
    /// `None` skips human verification entirely.
    pub verifier: Option<&'a dyn Verifier>,
}

enum Next {
    Annotate { iteration: usize, matcher: AnnotatorDescriptor, carry: Option<String> },
    Train { hash: String, matcher: AnnotatorDescriptor },
    Verify { iteration: usize, hash: String, matcher: AnnotatorDescriptor },
    Finetune { iteration: usize, hash: String, matcher: AnnotatorDescriptor },
    Done,
}

impl DataLoop<'_> {
    fn image_map(&self) -> HashMap<String, ImageRecord> {
        self.images.iter().map(|i| (i.image_id.clone(), i.clone())).collect()
    }

    fn plan(&self, done: &[Manifest]) -> Next {
        let n = self.params.iterations;
        let Some(last) = done.last() else {
            return Next::Annotate {
                iteration: 0,
                matcher: self.pipeline.annotators().matcher.clone(),
                carry: None,
            };
        };
        let (hash, matcher) = (last.corpus_hash.clone(), last.matcher_descriptor.clone());
        match (last.stage, last.iteration) {
            (Stage::Annotated, 0) if done.len() == 1 => Next::Train { hash, matcher },
            (Stage::Annotated, i) | (Stage::Trained, i) if i < n => Next::Verify { iteration: i, hash, matcher },
            (Stage::Annotated, _) | (Stage::Trained, _) => Next::Done,
            (Stage::Verified, i) => Next::Finetune { iteration: i, hash, matcher },
            (Stage::Finetuned, i) => Next::Annotate {
                iteration: i + 1,
                matcher,
                carry: Some(hash),
            },
        }
    }

    fn annotate(&self, matcher: &AnnotatorDescriptor, carry: Option<&[Region]>) -> Result<Vec<Region>> {
        let pipeline = self.pipeline.with_matcher(matcher.clone());
        let outcomes = pipeline.annotate_images(&self.images, self.params.jobs);
        let refs: HashMap<&str, &str> = self
            .images
            .iter()
            .map(|i| (i.image_id.as_str(), i.image_ref.as_str()))
            .collect();
        let mut regions = Vec::new();
        for o in outcomes {
            for f in &o.failures {
                tracing::warn!(image = %f.image_id, stage = %f.stage, "{}", f.error);
            }
            regions.extend(o.regions);
        }
        let cleaned = clean_dataset(regions, self.params.clean_threshold, pipeline.params().gamma, |r| {
            let image_ref = refs.get(r.image_id.as_str()).copied().unwrap_or_default();
            pipeline.rerank_with_segmenter(image_ref, r)
        })?;
        let mut regions = cleaned.kept;
        if let Some(prev) = carry {
            // human-verified records survive re-annotation untouched
            let verified: BTreeMap<&str, &Region> = prev
                .iter()
                .filter(|r| r.verification.is_verified())
                .map(|r| (r.region_id.as_str(), r))
                .collect();
            for r in regions.iter_mut() {
                if let Some(v) = verified.get(r.region_id.as_str()) {
                    *r = (*v).clone();
                }
            }
            let present: std::collections::HashSet<String> = regions.iter().map(|r| r.region_id.clone()).collect();
            regions.extend(
                verified
                    .values()
                    .filter(|v| !present.contains(&v.region_id))
                    .map(|v| (*v).clone()),
            );
        }
        Ok(regions)
    }

    fn verify(&self, iteration: usize, corpus: &[Region], verifier: &dyn Verifier) -> Result<Vec<Region>> {
        let mut ledger = SamplingLedger::from_regions(corpus);
        let index = ConceptIndex::build(corpus);
        let sampling = SamplingParams {
            seed: self.params.sampling.seed.wrapping_add(iteration as u64),
            ..self.params.sampling
        };
        let samples = sample_for_verification(&index, self.params.budget, &mut ledger, &sampling);
        let by_id: HashMap<&str, &Region> = corpus.iter().map(|r| (r.region_id.as_str(), r)).collect();
        let mut board = Board::new(self.params.board, Arc::new(ManualClock::new(0)));
        board.add_samples(&samples, |id| by_id.get(id).copied());
        drive_board(&mut board, verifier, self.params.workers)?;
        let updated: HashMap<&str, &Region> = board.regions().map(|r| (r.region_id.as_str(), r)).collect();
        Ok(corpus
            .iter()
            .map(|r| updated.get(r.region_id.as_str()).map_or_else(|| r.clone(), |u| (*u).clone()))
            .collect())
    }

    fn commit(
        &self,
        done: &mut Vec<Manifest>,
        iteration: usize,
        stage: Stage,
        corpus: &[Region],
        matcher: AnnotatorDescriptor,
    ) -> Result<()> {
        let m = Manifest {
            step: done.len(),
            iteration,
            stage,
            corpus_hash: self.snapshots.put(corpus)?,
            matcher_descriptor: matcher,
            metrics: verification_metrics(corpus),
        };
        self.snapshots.record(&m)?;
        tracing::info!(step = m.step, iteration, ?stage, hash = %m.corpus_hash, "loop step recorded");
        done.push(m);
        Ok(())
    }

    /// Runs until `params.iterations` verification rounds have produced
    /// their re-annotated corpus. Returns all manifests, old and new.
    pub fn run(&self) -> Result<Vec<Manifest>> {
        let mut done = self.snapshots.manifests()?;
        let images = self.image_map();
        let artifacts = self.snapshots.dir().join("matchers");
        loop {
            match self.plan(&done) {
                Next::Done => return Ok(done),
                Next::Annotate { iteration, matcher, carry } => {
                    let prev = carry.as_deref().map(|h| self.snapshots.get(h)).transpose()?;
                    let corpus = self.annotate(&matcher, prev.as_deref())?;
                    self.commit(&mut done, iteration, Stage::Annotated, &corpus, matcher)?;
                }
                Next::Train { hash, matcher } => {
                    let corpus = self.snapshots.get(&hash)?;
                    let ctx = HookContext {
                        iteration: 0,
                        corpus_hash: &hash,
                        corpus: &corpus,
                        images: &images,
                        artifacts: &artifacts,
                    };
                    let next = self.train.update(&ctx, &matcher)?;
                    self.commit(&mut done, 0, Stage::Trained, &corpus, next)?;
                }
                Next::Verify { iteration, hash, matcher } => {
                    let corpus = self.snapshots.get(&hash)?;
                    let verified = match self.verifier {
                        Some(v) => self.verify(iteration, &corpus, v)?,
                        None => corpus,
                    };
                    self.commit(&mut done, iteration, Stage::Verified, &verified, matcher)?;
                }
                Next::Finetune { iteration, hash, matcher } => {
                    let corpus = self.snapshots.get(&hash)?;
                    let ctx = HookContext {
                        iteration,
                        corpus_hash: &hash,
                        corpus: &corpus,
                        images: &images,
                        artifacts: &artifacts,
                    };
                    let next = self.finetune.update(&ctx, &matcher)?;
                    self.commit(&mut done, iteration, Stage::Finetuned, &corpus, next)?;
                }
            }
        }
    }
}

/// Latest annotated corpus per iteration, keyed by iteration.
pub fn annotated_corpora(manifests: &[Manifest]) -> BTreeMap<usize, String> {
    manifests
        .iter()
        .filter(|m| m.stage == Stage::Annotated)
        .map(|m| (m.iteration, m.corpus_hash.clone()))
        .collect()
}

/// Fraction of regions whose top-1 tag equals `truth`. Regions without a
/// known label are skipped.
pub fn top1_agreement(regions: &[Region], truth: impl Fn(&Region) -> Option<String>) -> Option<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for r in regions {
        if let Some(t) = truth(r) {
            total += 1;
            hit += r.top1().is_some_and(|x| x.text == t) as usize;
        }
    }
    (total > 0).then(|| hit as f64 / total as f64)
}

/// Writes a corpus snapshot in JSONL to `w`, in region-id order.
pub fn write_corpus(mut w: impl std::io::Write, regions: &[Region]) -> std::io::Result<()> {
    w.write_all(&Snapshots::encode(regions))?;
    w.flush()
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::AnnotatorSet;
    use crate::gateway::{Gateway, MockRegistry, MockWorld};
    use crate::pipeline::PipelineParams;

    fn setup(seed: u64, images: usize) -> (Pipeline, Vec<ImageRecord>) {
        let world = Arc::new(MockWorld::with_seed(seed));
        let gw = Arc::new(Gateway::new(Arc::new(MockRegistry::new(world))));
        let p = Pipeline::new(gw, AnnotatorSet::proposer_only(seed), PipelineParams::default());
        let imgs = (0..images)
            .map(|i| ImageRecord::synthetic(format!("img{i:03}"), 640, 480))
            .collect();
        (p, imgs)
    }

    #[test]
    fn identity_round_is_a_fixed_point() {
        let dir = tempfile::tempdir().unwrap();
        let (pipeline, images) = setup(7, 3);
        let l = DataLoop {
            pipeline,
            images,
            snapshots: Snapshots::open(dir.path()).unwrap(),
            params: LoopParams::default(),
            train: &IdentityHook,
            finetune: &IdentityHook,
            verifier: None,
        };
        let ms = l.run().unwrap();
        let stages: Vec<Stage> = ms.iter().map(|m| m.stage).collect();
        assert_eq!(
            stages,
            [Stage::Annotated, Stage::Trained, Stage::Verified, Stage::Finetuned, Stage::Annotated]
        );
        let a = annotated_corpora(&ms);
        assert_eq!(a[&0], a[&1]);
        // a second run has nothing left to do
        assert_eq!(l.run().unwrap(), ms);
    }

    #[test]
    fn accept_all_verifies_sampled_regions() {
        let dir = tempfile::tempdir().unwrap();
        let (pipeline, images) = setup(3, 4);
        let l = DataLoop {
            pipeline,
            images,
            snapshots: Snapshots::open(dir.path()).unwrap(),
            params: LoopParams::default(),
            train: &IdentityHook,
            finetune: &CorrectionsHook,
            verifier: Some(&AcceptAll),
        };
        let ms = l.run().unwrap();
        let verified = &ms[2];
        let m = verified.metrics.metrics().expect("some regions verified");
        assert_eq!(m.top1_accuracy, Some(1.0));
        // verified records are carried into the next corpus verbatim
        let vs = l.snapshots.get(&verified.corpus_hash).unwrap();
        let next = l.snapshots.get(&ms[4].corpus_hash).unwrap();
        for r in vs.iter().filter(|r| r.verification.is_verified()) {
            assert_eq!(next.iter().find(|x| x.region_id == r.region_id), Some(r));
        }
    }

    #[test]
    fn snapshot_round_trip_checks_hash() {
        let dir = tempfile::tempdir().unwrap();
        let s = Snapshots::open(dir.path()).unwrap();
        let (p, images) = setup(5, 1);
        let regions: Vec<Region> = p.annotate_images(&images, None).remove(0).regions;
        let h = s.put(&regions).unwrap();
        let mut back = s.get(&h).unwrap();
        let mut orig = regions.clone();
        back.sort_by(|a, b| a.region_id.cmp(&b.region_id));
        orig.sort_by(|a, b| a.region_id.cmp(&b.region_id));
        assert_eq!(back, orig);
        std::fs::write(s.corpus_path(&h), b"").unwrap();
        assert!(s.get(&h).is_err());
    }

    #[test]
    fn corrections_hook_rejects_remote_matchers() {
        let ctx = HookContext {
            iteration: 0,
            corpus_hash: "",
            corpus: &[],
            images: &HashMap::new(),
            artifacts: Path::new("/nonexistent"),
        };
        let d = AnnotatorDescriptor::new(crate::gateway::Role::RegionTextMatcher, "http://127.0.0.1:1");
        assert!(matches!(CorrectionsHook.update(&ctx, &d), Err(Error::Hook(_))));
    }
}
