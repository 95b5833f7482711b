//! Ready-made mock setups: a corpus with planted labelling errors for
//! exercising the loop, and ground-truth lookups against the mock world.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::config::AnnotatorSet;
use crate::error::Result;
use crate::gateway::{region_key, AnnotatorDescriptor, Gateway, MatcherTables, MockRegistry, MockWorld, Role};
use crate::pipeline::{ImageRecord, Pipeline, PipelineParams};
use crate::region::Region;

/// A world with one living-room scene of six nouns and ten objects per image.
pub fn living_room_world(seed: u64) -> MockWorld {
    let mut w = MockWorld::with_seed(seed);
    let mut scene = w
        .scenes
        .iter()
        .find(|s| s.name == "living room")
        .cloned()
        .expect("living room template");
    scene.objects = ["sofa", "lampshade", "person", "television", "plant", "table"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    w.scenes = vec![scene];
    w.objects_per_image = (10, 10);
    w
}

pub fn synthetic_images(n: usize, width: u32, height: u32) -> Vec<ImageRecord> {
    (0..n)
        .map(|i| ImageRecord::synthetic(format!("img{i:04}"), width, height))
        .collect()
}

/// Planted noun of the box, looked up in the world that generated the image.
pub fn world_truth(
    world: Arc<MockWorld>,
    images: &[ImageRecord],
) -> impl Fn(&Region) -> Option<String> + Send + Sync + 'static {
    let refs: HashMap<String, String> = images
        .iter()
        .map(|i| (i.image_id.clone(), i.image_ref.clone()))
        .collect();
    move |r: &Region| {
        let image_ref = refs.get(&r.image_id)?;
        Some(world.ground_truth(&world.scene(image_ref), &r.bbox))
    }
}

/// Everything needed to run the loop on a corpus with planted errors.
pub struct PlantedCorpus {
    pub world: Arc<MockWorld>,
    pub images: Vec<ImageRecord>,
    pub pipeline: Pipeline,
    /// Tables file holding the planted keys.
    pub tables: PathBuf,
    pub planted: usize,
}

/// Builds `images` living-room images and makes the mock matcher rank the
/// confusable context object first on the first `per_noun` objects of each
/// listed noun. Only the class-agnostic proposer localizes, so every region
/// is exactly one planted object.
pub fn planted_corpus(seed: u64, images: usize, nouns: &[&str], per_noun: usize, dir: &Path) -> Result<PlantedCorpus> {
    let world = Arc::new(living_room_world(seed));
    let images = synthetic_images(images, world.width, world.height);
    let mut tables = MatcherTables::default();
    for noun in nouns {
        let keys = images.iter().flat_map(|img| {
            world
                .scene(&img.image_ref)
                .objects
                .into_iter()
                .filter(|o| o.noun == *noun)
                .map(|o| region_key(&img.image_ref, &o.bbox))
                .collect::<Vec<_>>()
        });
        tables.planted.extend(keys.take(per_noun));
    }
    let planted = tables.planted.len();
    let path = tables.save_in(dir)?;
    let mut annotators = AnnotatorSet::proposer_only(seed);
    annotators.matcher = AnnotatorDescriptor::new(
        Role::RegionTextMatcher,
        format!(
            "mock://{}?seed={seed}&tables={}",
            Role::RegionTextMatcher.name(),
            path.to_string_lossy()
        ),
    );
    let gateway = Arc::new(Gateway::new(Arc::new(MockRegistry::new(world.clone()))));
    let pipeline = Pipeline::new(gateway, annotators, PipelineParams::default());
    Ok(PlantedCorpus {
        world,
        images,
        pipeline,
        tables: path,
        planted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::iteration::top1_agreement;

    #[test]
    fn planted_errors_flip_exactly_the_planted_regions() {
        let dir = tempfile::tempdir().unwrap();
        let pc = planted_corpus(7, 20, &["person", "lampshade"], 10, dir.path()).unwrap();
        assert_eq!(pc.planted, 20);
        let regions: Vec<Region> = pc
            .pipeline
            .annotate_images(&pc.images, None)
            .into_iter()
            .flat_map(|o| o.regions)
            .collect();
        assert_eq!(regions.len(), 200);
        let truth = world_truth(pc.world.clone(), &pc.images);
        assert_eq!(top1_agreement(&regions, &truth), Some(0.9));
    }

    #[test]
    fn two_oracle_rounds_remove_planted_errors() {
        use crate::iteration::*;
        let dir = tempfile::tempdir().unwrap();
        let pc = planted_corpus(7, 20, &["person", "lampshade"], 10, dir.path()).unwrap();
        let truth = world_truth(pc.world.clone(), &pc.images);
        let verifier = OracleVerifier::new(world_truth(pc.world.clone(), &pc.images));
        let l = DataLoop {
            pipeline: pc.pipeline.clone(),
            images: pc.images.clone(),
            snapshots: Snapshots::open(dir.path().join("snap")).unwrap(),
            params: LoopParams { iterations: 2, ..LoopParams::default() },
            train: &IdentityHook,
            finetune: &CorrectionsHook,
            verifier: Some(&verifier),
        };
        let ms = l.run().unwrap();
        let acc: Vec<f64> = annotated_corpora(&ms)
            .values()
            .map(|h| top1_agreement(&l.snapshots.get(h).unwrap(), &truth).unwrap())
            .collect();
        assert_eq!(acc, [0.9, 0.96, 1.0]);
    }
}
