//! On-disk working directory and the operations the CLI exposes.
//!
//! Layout under the configured root:
//! `images.jsonl` (registered images), `store/` (region shards),
//! `board.json` (verification state), `failures.jsonl`, `reports/` and
//! `loop/` (snapshots and manifests).

use std::collections::{BTreeSet, HashMap};
use std::io::Write as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analytics::{corpus_stats, eval_zero_shot, histogram_csv, render_table, EvalReport, GroundTruth, StatsReport};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::gateway::{Gateway, MockRegistry, RetryPolicy};
use crate::iteration::{DataLoop, LoopParams, Manifest, ModelHook, Snapshots, Verifier};
use crate::matching::clean_dataset;
use crate::pipeline::{Failure, ImageRecord, Pipeline, PipelineParams};
use crate::region::Region;
use crate::store::{write_atomic, ConceptIndex, Store};
use crate::verify::http::{router, BoardSink, VerifyService};
use crate::verify::{
    sample_for_verification, Board, BoardConfig, BoardSnapshot, SamplingLedger, SamplingParams, SystemClock,
};

const IMAGE_EXTENSIONS: &[&str] = &["jpg", "jpeg", "png", "gif", "bmp", "webp", "tif", "tiff"];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub registered: usize,
    pub skipped: usize,
    pub total: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotateReport {
    pub images: usize,
    pub regions: usize,
    pub failures: usize,
    pub fatal: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub regions: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CleanReport {
    pub kept: usize,
    pub dropped: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub concepts: usize,
    pub regions: usize,
    pub tasks: usize,
}

pub struct Workspace {
    cfg: Config,
    root: PathBuf,
    store: Store,
    registry: Arc<MockRegistry>,
}

impl Workspace {
    pub fn open(cfg: Config) -> Result<Self> {
        cfg.validate()?;
        let root = cfg.workspace.clone();
        std::fs::create_dir_all(&root)?;
        let store = Store::open(root.join("store"), cfg.shard_count)?;
        for t in store.recovered() {
            tracing::warn!(path = %t.path.display(), bytes = t.dropped_bytes, "dropped torn tail");
        }
        let registry = Arc::new(MockRegistry::new(Arc::new(cfg.world.clone())));
        Ok(Self {
            cfg,
            root,
            store,
            registry,
        })
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn gateway(&self) -> Arc<Gateway> {
        let retry = RetryPolicy {
            max_retries: self.cfg.retries,
            ..RetryPolicy::default()
        };
        Arc::new(
            Gateway::new(self.registry.clone())
                .retry_policy(retry)
                .quarantine_log(self.root.join("quarantine.jsonl")),
        )
    }

    pub fn pipeline(&self) -> Pipeline {
        Pipeline::new(self.gateway(), self.cfg.annotators.clone(), PipelineParams::from(&self.cfg))
    }

    fn images_path(&self) -> PathBuf {
        self.root.join("images.jsonl")
    }

    pub fn images(&self) -> Result<Vec<ImageRecord>> {
        let path = self.images_path();
        if !path.exists() {
            return Ok(Vec::new());
        }
        read_jsonl(&path)
    }

    fn image_map(&self) -> Result<HashMap<String, ImageRecord>> {
        Ok(self.images()?.into_iter().map(|i| (i.image_id.clone(), i)).collect())
    }

    fn register(&self, new: Vec<ImageRecord>) -> Result<IngestReport> {
        let mut images = self.images()?;
        let known: BTreeSet<String> = images.iter().map(|i| i.image_id.clone()).collect();
        let mut report = IngestReport::default();
        let mut seen = known.clone();
        for img in new {
            if seen.insert(img.image_id.clone()) {
                images.push(img);
                report.registered += 1;
            } else {
                report.skipped += 1;
            }
        }
        report.total = images.len();
        write_atomic(&self.images_path(), &to_jsonl(&images)?)?;
        Ok(report)
    }

    /// Registers every image file directly under `dir`, in name order. Ids
    /// are content hashes, so re-ingesting a file is a no-op.
    pub fn ingest_dir(&self, dir: &Path) -> Result<IngestReport> {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::validation(format!("cannot read {}: {e}", dir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|x| x.to_str())
                    .is_some_and(|x| IMAGE_EXTENSIONS.contains(&x.to_ascii_lowercase().as_str()))
            })
            .collect();
        paths.sort();
        let mut records = Vec::with_capacity(paths.len());
        for p in paths {
            let bytes = std::fs::read(&p)?;
            let size = imagesize::blob_size(&bytes)
                .map_err(|e| Error::validation(format!("{}: unreadable image header: {e}", p.display())))?;
            let digest = hex::encode(Sha256::digest(&bytes));
            records.push(ImageRecord {
                image_id: format!("img-{}", &digest[..16]),
                image_ref: p.to_string_lossy().into_owned(),
                width: size.width as u32,
                height: size.height as u32,
            });
        }
        self.register(records)
    }

    /// Registers `n` synthetic images sized like the mock world.
    pub fn ingest_synthetic(&self, n: usize) -> Result<IngestReport> {
        let w = &self.cfg.world;
        let records = (0..n)
            .map(|i| ImageRecord::synthetic(format!("img{i:05}"), w.width, w.height))
            .collect();
        self.register(records)
    }

    /// Runs the full pipeline on every registered image and stores the result.
    pub fn annotate(&self) -> Result<AnnotateReport> {
        let images = self.images()?;
        let outcomes = self.pipeline().annotate_images(&images, self.cfg.jobs);
        let mut report = AnnotateReport {
            images: images.len(),
            ..Default::default()
        };
        let mut failures: Vec<Failure> = Vec::new();
        let mut regions = Vec::new();
        for o in outcomes {
            failures.extend(o.failures);
            regions.extend(o.regions);
        }
        report.regions = regions.len();
        report.failures = failures.len();
        report.fatal = failures.iter().filter(|f| f.fatal).count();
        self.store.append(&regions)?;
        self.log_failures(&failures)?;
        Ok(report)
    }

    fn log_failures(&self, failures: &[Failure]) -> Result<()> {
        if failures.is_empty() {
            return Ok(());
        }
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.root.join("failures.jsonl"))?;
        f.write_all(&to_jsonl(failures)?)?;
        f.sync_all()?;
        Ok(())
    }

    /// Re-scores every stored region with the configured matcher.
    pub fn rematch(&self) -> Result<MatchReport> {
        let regions = self.store.all()?;
        let (regions, failures) = self.pipeline().rematch(regions, &self.image_map()?, self.cfg.jobs);
        self.store.append(&regions)?;
        self.log_failures(&failures)?;
        Ok(MatchReport {
            regions: regions.len(),
            failures: failures.len(),
        })
    }

    /// Keeps the best regions per (image, bucket) and re-ranks survivors with
    /// fresh masks. Dropped regions are tombstoned.
    pub fn clean(&self) -> Result<CleanReport> {
        let regions = self.store.all()?;
        let images = self.image_map()?;
        let pipeline = self.pipeline();
        let out = clean_dataset(regions, self.cfg.clean_threshold, self.cfg.gamma, |r| {
            let img = images
                .get(&r.image_id)
                .ok_or_else(|| Error::validation(format!("image {} not registered", r.image_id)))?;
            pipeline.rerank_with_segmenter(&img.image_ref, r)
        })?;
        self.store.append(&out.kept)?;
        self.store.remove(&out.dropped)?;
        Ok(CleanReport {
            kept: out.kept.len(),
            dropped: out.dropped.len(),
        })
    }

    pub fn board_config(&self) -> BoardConfig {
        BoardConfig {
            lease_ttl_ms: self.cfg.lease_ttl_secs * 1000,
            package_size: self.cfg.package_size,
            pass_percent: self.cfg.pass_ratio_percent,
            shown: self.cfg.top_k,
        }
    }

    fn board_path(&self) -> PathBuf {
        self.root.join("board.json")
    }

    pub fn load_board(&self) -> Result<Board> {
        let path = self.board_path();
        let clock = Arc::new(SystemClock);
        if !path.exists() {
            return Ok(Board::new(self.board_config(), clock));
        }
        let snap: BoardSnapshot = serde_json::from_slice(&std::fs::read(path)?)?;
        Ok(Board::restore(snap, clock))
    }

    pub fn save_board(&self, board: &Board) -> Result<()> {
        write_atomic(&self.board_path(), &serde_json::to_vec(&board.snapshot())?)?;
        Ok(())
    }

    /// Samples up to `budget` regions concept by concept and queues them for
    /// verification. Regions already queued or verified are never resampled.
    pub fn sample_verify(&self, budget: usize) -> Result<SampleReport> {
        let regions = self.store.all()?;
        let mut board = self.load_board()?;
        let mut ledger = SamplingLedger::from_regions(&regions);
        for t in board.tasks() {
            ledger.record(&t.concept, &t.region_id);
        }
        let params = SamplingParams {
            min: self.cfg.sample_min,
            max: self.cfg.sample_max,
            seed: self.cfg.seed,
        };
        let samples = sample_for_verification(&ConceptIndex::build(&regions), budget, &mut ledger, &params);
        let by_id: HashMap<&str, &Region> = regions.iter().map(|r| (r.region_id.as_str(), r)).collect();
        let tasks = board.add_samples(&samples, |id| by_id.get(id).copied());
        self.save_board(&board)?;
        Ok(SampleReport {
            concepts: samples.len(),
            regions: samples.iter().map(|s| s.region_ids.len()).sum(),
            tasks,
        })
    }

    /// Verification service over the saved board; every change is written
    /// back to `board.json` and the region store.
    pub fn verify_service(&self) -> Result<Arc<VerifyService>> {
        let sink = Arc::new(WorkspaceSink {
            board_path: self.board_path(),
            store: Store::open(self.root.join("store"), self.cfg.shard_count)?,
        });
        Ok(Arc::new(
            VerifyService::new(self.load_board()?)
                .tokens(self.cfg.tokens.clone())
                .images(self.images()?)
                .sink(sink),
        ))
    }

    /// Serves the verification API until `shutdown` resolves.
    pub fn serve_verify(
        &self,
        addr: &str,
        on_bound: impl FnOnce(SocketAddr),
        shutdown: impl std::future::Future<Output = ()> + Send + 'static,
    ) -> Result<()> {
        let app = router(self.verify_service()?);
        serve(addr, app, on_bound, shutdown)
    }

    pub fn corpus(&self) -> Result<Vec<Region>> {
        Ok(self.store.all()?)
    }

    /// Corpus statistics, also written to `reports/` as JSON, text and CSV.
    pub fn stats(&self) -> Result<StatsReport> {
        let regions = self.corpus()?;
        write_stats(&self.root.join("reports"), &regions)
    }

    pub fn eval(&self, gt_path: &Path) -> Result<EvalReport> {
        let gt: GroundTruth = serde_json::from_slice(
            &std::fs::read(gt_path).map_err(|e| Error::validation(format!("cannot read {}: {e}", gt_path.display())))?,
        )
        .map_err(|e| Error::validation(format!("invalid ground truth {}: {e}", gt_path.display())))?;
        let gw = self.gateway();
        let matcher = self.cfg.annotators.matcher.clone();
        eval_zero_shot(&gt.regions, &gt.classes, |r| {
            Ok(gw.align(&matcher, &r.image_ref, &r.bbox, &gt.classes)?)
        })
    }

    pub fn snapshots(&self) -> Result<Snapshots> {
        Snapshots::open(self.root.join("loop"))
    }

    /// Runs (or resumes) the data loop over the registered images.
    pub fn run_loop(
        &self,
        iterations: usize,
        train: &dyn ModelHook,
        finetune: &dyn ModelHook,
        verifier: Option<&dyn Verifier>,
    ) -> Result<Vec<Manifest>> {
        let params = LoopParams {
            iterations,
            budget: self.cfg.verify_budget,
            sampling: SamplingParams {
                min: self.cfg.sample_min,
                max: self.cfg.sample_max,
                seed: self.cfg.seed,
            },
            board: self.board_config(),
            clean_threshold: self.cfg.clean_threshold,
            workers: 2,
            jobs: self.cfg.jobs,
        };
        DataLoop {
            pipeline: self.pipeline(),
            images: self.images()?,
            snapshots: self.snapshots()?,
            params,
            train,
            finetune,
            verifier,
        }
        .run()
    }

    pub fn world(&self) -> Arc<crate::gateway::MockWorld> {
        self.registry.world().clone()
    }

    pub fn registry(&self) -> Arc<MockRegistry> {
        self.registry.clone()
    }
}

/// Writes `stats.json`, `stats.txt` and `concepts.csv` under `dir`.
pub fn write_stats(dir: &Path, regions: &[Region]) -> Result<StatsReport> {
    let report = corpus_stats(regions);
    std::fs::create_dir_all(dir)?;
    write_atomic(&dir.join("stats.json"), &serde_json::to_vec_pretty(&report)?)?;
    write_atomic(&dir.join("stats.txt"), render_table(&report).as_bytes())?;
    write_atomic(&dir.join("concepts.csv"), histogram_csv(regions).as_bytes())?;
    Ok(report)
}

/// Serves `app` on `addr` on a fresh runtime until `shutdown` resolves.
pub fn serve(
    addr: &str,
    app: axum::Router,
    on_bound: impl FnOnce(SocketAddr),
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        on_bound(listener.local_addr()?);
        axum::serve(listener, app).with_graceful_shutdown(shutdown).await
    })?;
    Ok(())
}

struct WorkspaceSink {
    board_path: PathBuf,
    store: Store,
}

impl BoardSink for WorkspaceSink {
    fn persist(&self, board: &Board, changed: &[Region]) -> std::result::Result<(), String> {
        if !changed.is_empty() {
            self.store.append(changed).map_err(|e| e.to_string())?;
        }
        let bytes = serde_json::to_vec(&board.snapshot()).map_err(|e| e.to_string())?;
        write_atomic(&self.board_path, &bytes).map_err(|e| e.to_string())
    }
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::validation(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for it in items {
        serde_json::to_writer(&mut out, it)?;
        out.push(b'\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ws(dir: &Path) -> Workspace {
        let cfg = Config {
            workspace: dir.to_path_buf(),
            ..Config::with_seed(7)
        };
        Workspace::open(cfg).unwrap()
    }

    #[test]
    fn ingest_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let w = ws(dir.path());
        assert_eq!(w.ingest_synthetic(3).unwrap().registered, 3);
        let again = w.ingest_synthetic(4).unwrap();
        assert_eq!((again.registered, again.skipped, again.total), (1, 3, 4));
    }

    #[test]
    fn ingest_reads_image_headers() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = dir.path().join("imgs");
        std::fs::create_dir(&imgs).unwrap();
        // minimal 3x2 GIF header
        let gif = b"GIF89a\x03\x00\x02\x00\x80\x00\x00\xff\xff\xff\x00\x00\x00!\xf9\x04\x00\x00\x00\x00\x00,\x00\x00\x00\x00\x03\x00\x02\x00\x00\x02\x02D\x01\x00;";
        std::fs::write(imgs.join("a.gif"), gif).unwrap();
        std::fs::write(imgs.join("notes.txt"), b"x").unwrap();
        let w = ws(&dir.path().join("ws"));
        let r = w.ingest_dir(&imgs).unwrap();
        assert_eq!(r.registered, 1);
        let img = &w.images().unwrap()[0];
        assert_eq!((img.width, img.height), (3, 2));
    }

    #[test]
    fn sample_verify_never_requeues() {
        let dir = tempfile::tempdir().unwrap();
        let w = ws(dir.path());
        w.ingest_synthetic(4).unwrap();
        w.annotate().unwrap();
        let first = w.sample_verify(10).unwrap();
        assert_eq!(first.regions, 10);
        let second = w.sample_verify(10_000).unwrap();
        let total = w.store().len();
        assert_eq!(first.regions + second.regions, total);
        assert_eq!(w.sample_verify(10).unwrap().regions, 0);
    }
}
