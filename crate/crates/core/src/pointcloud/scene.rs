use crate::{Error, Result};

pub type Point3 = [f32; 3];

/// A colored point cloud with its ground-truth affordance regions.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloudScene {
    scene_id: String,
    coords: Vec<Point3>,
    colors: Vec<Point3>,
    gt_masks: Vec<Vec<bool>>,
    gt_affordance_ids: Vec<usize>,
}

impl PointCloudScene {
    pub fn new(
        scene_id: impl Into<String>,
        coords: Vec<Point3>,
        colors: Vec<Point3>,
        gt_masks: Vec<Vec<bool>>,
        gt_affordance_ids: Vec<usize>,
    ) -> Result<Self> {
        let scene = Self {
            scene_id: scene_id.into(),
            coords,
            colors,
            gt_masks,
            gt_affordance_ids,
        };
        scene.validate()?;
        Ok(scene)
    }

    /// Scene without any annotated regions, e.g. for inference.
    pub fn unlabeled(scene_id: impl Into<String>, coords: Vec<Point3>, colors: Vec<Point3>) -> Result<Self> {
        Self::new(scene_id, coords, colors, Vec::new(), Vec::new())
    }

    fn validate(&self) -> Result<()> {
        let n = self.coords.len();
        if n == 0 {
            return Err(Error::domain(format!("scene `{}` has no points", self.scene_id)));
        }
        super::check_finite(&self.coords, "scene")?;
        if self.colors.len() != n {
            return Err(Error::domain(format!(
                "scene `{}`: {} colors for {} points",
                self.scene_id,
                self.colors.len(),
                n
            )));
        }
        if self.colors.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::domain(format!("scene `{}`: colors outside [0, 1]", self.scene_id)));
        }
        if self.gt_masks.len() != self.gt_affordance_ids.len() {
            return Err(Error::domain(format!(
                "scene `{}`: {} masks but {} affordance ids",
                self.scene_id,
                self.gt_masks.len(),
                self.gt_affordance_ids.len()
            )));
        }
        for (j, mask) in self.gt_masks.iter().enumerate() {
            if mask.len() != n {
                return Err(Error::domain(format!(
                    "scene `{}`: mask {j} has length {} (expected {n})",
                    self.scene_id,
                    mask.len()
                )));
            }
            if !mask.iter().any(|&m| m) {
                return Err(Error::domain(format!("scene `{}`: mask {j} is empty", self.scene_id)));
            }
        }
        Ok(())
    }

    pub fn scene_id(&self) -> &str {
        &self.scene_id
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[Point3] {
        &self.coords
    }

    pub fn colors(&self) -> &[Point3] {
        &self.colors
    }

    pub fn gt_masks(&self) -> &[Vec<bool>] {
        &self.gt_masks
    }

    pub fn gt_affordance_ids(&self) -> &[usize] {
        &self.gt_affordance_ids
    }

    /// Point indices of region `j`.
    pub fn region_indices(&self, j: usize) -> Vec<usize> {
        self.gt_masks[j]
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_invalid_scenes() {
        assert!(PointCloudScene::unlabeled("a", vec![], vec![]).is_err());
        assert!(PointCloudScene::unlabeled("a", vec![[f32::NAN, 0.0, 0.0]], vec![[0.0; 3]]).is_err());
        assert!(PointCloudScene::new("a", vec![[0.0; 3]], vec![[0.0; 3]], vec![vec![false]], vec![0]).is_err());
        assert!(PointCloudScene::new("a", vec![[0.0; 3]], vec![[0.0; 3]], vec![vec![true]], vec![]).is_err());
        let ok = PointCloudScene::new("a", vec![[0.0; 3]; 2], vec![[0.5; 3]; 2], vec![vec![false, true]], vec![3]).unwrap();
        assert_eq!(ok.region_indices(0), vec![1]);
    }
}
