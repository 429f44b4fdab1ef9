//! Synthetic paired data, dataset files and checkpoints.

mod checkpoint;
mod formats;
mod manifest;
mod synth;

use std::path::Path;

pub use checkpoint::{
    load_checkpoint, params_to_tensors, restore_params, save_checkpoint, Checkpoint, NamedTensor, OptimizerState,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use formats::{
    read_clip_block, read_clip_features, read_clip_sidecar, read_ply, read_scene, write_clip_block,
    write_clip_features, write_ply, write_scene, ClipSidecar, FeatureGrid, RegionRecord, SceneSidecar, CLIP_MAGIC,
    FEATURE_MAGIC, FORMAT_VERSION,
};
pub use manifest::{load_manifest, ClipFormat, DatasetManifest, ManifestPair, Split, MANIFEST_VERSION};
pub use synth::{
    class_color, clip_id, color_histogram, generate_clip, generate_scene, generate_scene_with,
    histogram_classifier_accuracy, scene_id, synth_dataset, SynthClip, SynthConfig, SynthDataset, DEFAULT_CATALOG,
};

use crate::Result;

impl SynthDataset {
    /// Write scenes, clips, `train.json`, `val.json` and `synth_config.json` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("scenes"))?;
        std::fs::create_dir_all(dir.join("clips"))?;
        for s in &self.scenes {
            write_scene(s, &dir.join("scenes").join(format!("{}.ply", s.scene_id())))?;
        }
        for c in &self.clips {
            write_clip_block(&dir.join("clips").join(format!("{}.egsc", c.clip_id)), &c.block, &c.clip_id, Some(c.affordance_id))?;
        }
        self.train.save(&dir.join("train.json"))?;
        self.val.save(&dir.join("val.json"))?;
        std::fs::write(dir.join("synth_config.json"), serde_json::to_string_pretty(&self.config)? + "\n")?;
        Ok(())
    }
}
