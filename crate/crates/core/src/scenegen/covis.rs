use std::collections::{BTreeMap, BTreeSet};

use crate::geometry::PixelPoint;

use super::{ImageId, ImageObservations, PointId};

/// Point tracks across images. For a point `k` seen in image `i`, the set
/// `I_k` of other images observing it is the track minus `i`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CoVisibilityGraph {
    tracks: BTreeMap<PointId, Vec<(ImageId, PixelPoint)>>,
}

impl CoVisibilityGraph {
    pub fn from_tracks(tracks: BTreeMap<PointId, Vec<(ImageId, PixelPoint)>>) -> Self {
        let mut tracks = tracks;
        for t in tracks.values_mut() {
            t.sort_by_key(|(img, _)| *img);
            t.dedup_by_key(|(img, _)| *img);
        }
        Self { tracks }
    }

    pub fn tracks(&self) -> &BTreeMap<PointId, Vec<(ImageId, PixelPoint)>> {
        &self.tracks
    }

    /// Images other than `image` observing `point`, with the point's pixel in each.
    pub fn others(&self, image: ImageId, point: PointId) -> Vec<(ImageId, PixelPoint)> {
        match self.tracks.get(&point) {
            Some(t) if t.iter().any(|(i, _)| *i == image) => {
                t.iter().filter(|(i, _)| *i != image).copied().collect()
            }
            _ => Vec::new(),
        }
    }

    pub fn other_images(&self, image: ImageId, point: PointId) -> BTreeSet<ImageId> {
        self.others(image, point)
            .into_iter()
            .map(|(i, _)| i)
            .collect()
    }

    /// Whether `point` has a correspondence in another image (membership in `P_i^*`).
    pub fn is_covisible(&self, image: ImageId, point: PointId) -> bool {
        self.tracks
            .get(&point)
            .is_some_and(|t| t.len() > 1 && t.iter().any(|(i, _)| *i == image))
    }

    /// Splits the points of `image` into (`P_i^-`, `P_i^*`) as index lists.
    pub fn split(&self, image: ImageId, points: &[PointId]) -> (Vec<usize>, Vec<usize>) {
        let mut single = Vec::new();
        let mut multi = Vec::new();
        for (idx, &k) in points.iter().enumerate() {
            if self.is_covisible(image, k) {
                multi.push(idx);
            } else {
                single.push(idx);
            }
        }
        (single, multi)
    }

    /// Keeps only tracks whose point satisfies `keep`.
    pub fn restrict(&self, mut keep: impl FnMut(PointId) -> bool) -> Self {
        Self {
            tracks: self
                .tracks
                .iter()
                .filter(|(k, _)| keep(**k))
                .map(|(k, v)| (*k, v.clone()))
                .collect(),
        }
    }

    /// Exhaustive check that `j ∈ I_k(i) ⟺ i ∈ I_k(j)` for every edge.
    pub fn is_symmetric(&self) -> bool {
        for (&k, t) in &self.tracks {
            for (i, _) in t {
                for j in self.other_images(*i, k) {
                    if !self.other_images(j, k).contains(i) {
                        return false;
                    }
                }
            }
        }
        true
    }

    pub fn multiview_point_count(&self) -> usize {
        self.tracks.values().filter(|t| t.len() > 1).count()
    }
}

/// Builds tracks from per-image observation lists; point ids are assumed
/// consistent across images.
pub fn build_covis(images: &[ImageObservations]) -> CoVisibilityGraph {
    let mut tracks: BTreeMap<PointId, Vec<(ImageId, PixelPoint)>> = BTreeMap::new();
    for img in images {
        for o in &img.observations {
            tracks
                .entry(o.point_id)
                .or_default()
                .push((img.image_id, o.pixel));
        }
    }
    CoVisibilityGraph::from_tracks(tracks)
}
