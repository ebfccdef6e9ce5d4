//! Synthetic polycube classification benchmark.
//!
//! Five pentacube classes on a small grid, deliberately trained on canonical
//! orientations only (plus integer translations): the rotated test split then
//! measures how much of the rotation burden a model had to learn versus what
//! its architecture already guarantees.
//!
//! The default classes have pairwise-distinct sorted extents, so no rotation
//! can carry one onto another; a generation-time check enforces that for any
//! configured class list and rotation group.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{argmax, softmax, Network};
use crate::scalar::Scalar;
use crate::symmetry::{FiniteRotationGroup, GroupKind};
use crate::voxel::{apply_group_action, read_voxt, write_voxt, FeatureMap, MapShape, VoxtError};

/// One shape class: a face-connected set of unit cells in `(z, y, x)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolycubeClass {
    pub id: usize,
    pub name: String,
    pub cells: Vec<[i64; 3]>,
}

impl PolycubeClass {
    pub fn extent(&self) -> [i64; 3] {
        let mut min = [i64::MAX; 3];
        let mut max = [i64::MIN; 3];
        for c in &self.cells {
            for a in 0..3 {
                min[a] = min[a].min(c[a]);
                max[a] = max[a].max(c[a]);
            }
        }
        [max[0] - min[0] + 1, max[1] - min[1] + 1, max[2] - min[2] + 1]
    }

    fn is_connected(&self) -> bool {
        if self.cells.is_empty() {
            return false;
        }
        let mut seen = vec![false; self.cells.len()];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        let mut reached = 1;
        while let Some(i) = queue.pop_front() {
            for (j, c) in self.cells.iter().enumerate() {
                if !seen[j] {
                    let d: i64 = (0..3).map(|a| (self.cells[i][a] - c[a]).abs()).sum();
                    if d == 1 {
                        seen[j] = true;
                        reached += 1;
                        queue.push_back(j);
                    }
                }
            }
        }
        reached == self.cells.len()
    }
}

/// Translate cells so the minimum corner is the origin, then sort: a
/// translation-invariant canonical form for comparing shapes.
fn normalize(cells: &[[i64; 3]]) -> Vec<[i64; 3]> {
    let mut min = [i64::MAX; 3];
    for c in cells {
        for a in 0..3 {
            min[a] = min[a].min(c[a]);
        }
    }
    let mut out: Vec<[i64; 3]> = cells
        .iter()
        .map(|c| [c[0] - min[0], c[1] - min[1], c[2] - min[2]])
        .collect();
    out.sort_unstable();
    out
}

/// The default benchmark: five pentacubes with pairwise-distinct sorted
/// extents.
pub fn default_classes() -> Vec<PolycubeClass> {
    let spec: [(&str, [[i64; 3]; 5]); 5] = [
        ("rod", [[0, 0, 0], [0, 0, 1], [0, 0, 2], [0, 0, 3], [0, 0, 4]]),
        ("ell", [[0, 0, 0], [0, 0, 1], [0, 0, 2], [0, 0, 3], [0, 1, 0]]),
        ("tee", [[0, 0, 0], [0, 0, 1], [0, 0, 2], [0, 1, 1], [0, 2, 1]]),
        ("cup", [[0, 0, 0], [0, 1, 0], [0, 0, 1], [0, 0, 2], [0, 1, 2]]),
        ("block", [[0, 0, 0], [0, 0, 1], [0, 1, 0], [0, 1, 1], [1, 0, 0]]),
    ];
    spec.iter()
        .enumerate()
        .map(|(id, (name, cells))| PolycubeClass {
            id,
            name: name.to_string(),
            cells: cells.to_vec(),
        })
        .collect()
}

/// Everything that determines a dataset, seed included: generation is a pure
/// function of this manifest.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub grid: usize,
    /// Group whose rotations enumerate the test views.
    pub group: GroupKind,
    #[serde(default = "default_classes")]
    pub classes: Vec<PolycubeClass>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub max_translation: i64,
    /// Occupancy encoding: empty voxels take `value_low`, filled `value_high`.
    pub value_low: f64,
    pub value_high: f64,
    pub seed: u64,
}

impl Default for DatasetManifest {
    fn default() -> Self {
        DatasetManifest {
            grid: 9,
            group: GroupKind::S4,
            classes: default_classes(),
            train_per_class: 100,
            test_per_class: 20,
            max_translation: 2,
            value_low: -1.0,
            value_high: 5.0,
            seed: 2024,
        }
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("class {0} has disconnected cells")]
    Disconnected(usize),
    #[error("classes {0} and {1} coincide under rotation {2}; task is ill-posed")]
    RotationEquivalent(usize, usize, usize),
    #[error("grid {grid} too small: class {class} needs extent {extent} plus 2×{translation} translation")]
    GridTooSmall {
        grid: usize,
        class: usize,
        extent: i64,
        translation: i64,
    },
    #[error("sample counts must be positive")]
    EmptySplit,
    #[error("class list is empty")]
    NoClasses,
    #[error("could not place class {class} within bounds after {attempts} attempts")]
    PlacementFailed { class: usize, attempts: usize },
    #[error(transparent)]
    Voxt(#[from] VoxtError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error("labels.csv: {0}")]
    Labels(String),
}

/// One voxelized sample.
#[derive(Clone, Debug)]
pub struct Sample<T> {
    pub id: String,
    pub label: usize,
    /// Index of the untransformed sample this one was derived from.
    pub base: usize,
    /// Group element applied on top of the base pose (0 = identity).
    pub rotation: usize,
    pub map: FeatureMap<T>,
}

#[derive(Clone, Debug)]
pub struct Dataset<T> {
    pub manifest: DatasetManifest,
    pub train: Vec<Sample<T>>,
    pub test: Vec<Sample<T>>,
}

const PLACEMENT_RETRIES: usize = 64;

fn validate_manifest(manifest: &DatasetManifest, group: &FiniteRotationGroup) -> Result<(), DatasetError> {
    if manifest.train_per_class == 0 || manifest.test_per_class == 0 {
        return Err(DatasetError::EmptySplit);
    }
    for class in &manifest.classes {
        if !class.is_connected() {
            return Err(DatasetError::Disconnected(class.id));
        }
        let largest = class.extent().into_iter().max().unwrap();
        if largest + 2 * manifest.max_translation > manifest.grid as i64 {
            return Err(DatasetError::GridTooSmall {
                grid: manifest.grid,
                class: class.id,
                extent: largest,
                translation: manifest.max_translation,
            });
        }
    }
    // Well-posedness: no class is a rotated copy of another.
    for a in &manifest.classes {
        for b in &manifest.classes {
            if a.id >= b.id {
                continue;
            }
            let b_norm = normalize(&b.cells);
            for p in 0..group.order() {
                let rotated: Vec<[i64; 3]> = a
                    .cells
                    .iter()
                    .map(|&c| group.element(p).apply(c))
                    .collect();
                if normalize(&rotated) == b_norm {
                    return Err(DatasetError::RotationEquivalent(a.id, b.id, p));
                }
            }
        }
    }
    Ok(())
}

/// Voxelize a class at its canonical pose, centered, then shifted by `t`.
fn voxelize<T: Scalar>(
    class: &PolycubeClass,
    manifest: &DatasetManifest,
    t: [i64; 3],
) -> Option<FeatureMap<T>> {
    let n = manifest.grid as i64;
    let cells = normalize(&class.cells);
    let extent = class.extent();
    let offset = [
        (n - extent[0]) / 2 + t[0],
        (n - extent[1]) / 2 + t[1],
        (n - extent[2]) / 2 + t[2],
    ];
    let low = T::from_f64(manifest.value_low);
    let high = T::from_f64(manifest.value_high);
    let mut map = FeatureMap::from_vec(
        MapShape::new(1, 1, manifest.grid, manifest.grid, manifest.grid),
        vec![low; manifest.grid * manifest.grid * manifest.grid],
    )
    .unwrap();
    for c in cells {
        let p = [c[0] + offset[0], c[1] + offset[1], c[2] + offset[2]];
        if p.iter().any(|&x| x < 0 || x >= n) {
            return None;
        }
        let idx = ((p[0] * n + p[1]) * n + p[2]) as usize;
        map.data_mut()[idx] = high;
    }
    Some(map)
}

fn draw_sample<T: Scalar>(
    class: &PolycubeClass,
    manifest: &DatasetManifest,
    rng: &mut ChaCha8Rng,
) -> Result<FeatureMap<T>, DatasetError> {
    let b = manifest.max_translation;
    for _ in 0..PLACEMENT_RETRIES {
        let t = [
            rng.gen_range(-b..=b),
            rng.gen_range(-b..=b),
            rng.gen_range(-b..=b),
        ];
        if let Some(map) = voxelize(class, manifest, t) {
            return Ok(map);
        }
    }
    Err(DatasetError::PlacementFailed {
        class: class.id,
        attempts: PLACEMENT_RETRIES,
    })
}

/// Generate the train and test splits. Training samples are canonical poses
/// with random integer translations; test samples enumerate every group
/// rotation of each base sample.
pub fn generate_dataset<T: Scalar>(manifest: &DatasetManifest) -> Result<Dataset<T>, DatasetError> {
    let group = FiniteRotationGroup::generate(manifest.group);
    validate_manifest(manifest, &group)?;
    let mut rng = ChaCha8Rng::seed_from_u64(manifest.seed);

    let mut train = Vec::with_capacity(manifest.classes.len() * manifest.train_per_class);
    for class in &manifest.classes {
        for _ in 0..manifest.train_per_class {
            let map = draw_sample::<T>(class, manifest, &mut rng)?;
            let base = train.len();
            train.push(Sample {
                id: format!("train-{base:05}"),
                label: class.id,
                base,
                rotation: 0,
                map,
            });
        }
    }

    let mut test = Vec::with_capacity(manifest.classes.len() * manifest.test_per_class * group.order());
    let mut base_index = 0;
    for class in &manifest.classes {
        for _ in 0..manifest.test_per_class {
            let base_map = draw_sample::<T>(class, manifest, &mut rng)?;
            for p in 0..group.order() {
                let map = apply_group_action(&base_map, &group, p).unwrap();
                test.push(Sample {
                    id: format!("test-{base_index:05}-g{p:02}"),
                    label: class.id,
                    base: base_index,
                    rotation: p,
                    map,
                });
            }
            base_index += 1;
        }
    }

    Ok(Dataset {
        manifest: manifest.clone(),
        train,
        test,
    })
}

/// Serialize a dataset as a directory: `manifest.json`, `labels.csv`
/// (sample id, class id, group element index), and one VOXT file per sample.
pub fn save_dataset<T: Scalar>(dir: impl AsRef<Path>, dataset: &Dataset<T>) -> Result<(), DatasetError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut manifest_json = serde_json::to_string_pretty(&dataset.manifest)?;
    manifest_json.push('\n');
    fs::write(dir.join("manifest.json"), manifest_json)?;
    let mut labels = String::from("sample_id,class_id,group_index\n");
    for sample in dataset.train.iter().chain(&dataset.test) {
        labels.push_str(&format!("{},{},{}\n", sample.id, sample.label, sample.rotation));
        write_voxt(dir.join(format!("{}.voxt", sample.id)), &sample.map)?;
    }
    fs::write(dir.join("labels.csv"), labels)?;
    Ok(())
}

/// Load a dataset directory written by [`save_dataset`]. The split and base
/// index are recovered from the sample id (`train-NNNNN` / `test-NNNNN-gPP`).
pub fn load_dataset<T: Scalar>(dir: impl AsRef<Path>) -> Result<Dataset<T>, DatasetError> {
    let dir = dir.as_ref();
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let labels = fs::read_to_string(dir.join("labels.csv"))?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (line_no, line) in labels.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(DatasetError::Labels(format!("line {}: expected 3 fields", line_no + 1)));
        }
        let id = fields[0].to_string();
        let label: usize = fields[1]
            .parse()
            .map_err(|_| DatasetError::Labels(format!("line {}: bad class id", line_no + 1)))?;
        let rotation: usize = fields[2]
            .parse()
            .map_err(|_| DatasetError::Labels(format!("line {}: bad group index", line_no + 1)))?;
        let map = read_voxt(dir.join(format!("{id}.voxt")))?;
        let base: usize = id
            .split('-')
            .nth(1)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| DatasetError::Labels(format!("line {}: bad sample id {id:?}", line_no + 1)))?;
        let sample = Sample { id: id.clone(), label, base, rotation, map };
        if id.starts_with("train-") {
            train.push(sample);
        } else if id.starts_with("test-") {
            test.push(sample);
        } else {
            return Err(DatasetError::Labels(format!("line {}: unknown split in id {id:?}", line_no + 1)));
        }
    }
    Ok(Dataset { manifest, train, test })
}

/// Accuracy for the slice of the test set rotated by one group element.
#[derive(Clone, Debug, Serialize)]
pub struct RotationAccuracy {
    pub rotation: usize,
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
}

/// Evaluation summary: per-rotation accuracy table plus the two aggregates.
#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub per_rotation: Vec<RotationAccuracy>,
    /// Accuracy over every rotated test view individually.
    pub single_view_accuracy: f64,
    /// Accuracy of the prediction averaged over all rotations of a base sample.
    pub rotation_averaged_accuracy: f64,
}

/// Evaluate a trained network on a test split, broken down by which group
/// element rotated each sample.
pub fn evaluate<T: Scalar>(
    net: &Network<T>,
    test: &[Sample<T>],
    group: &FiniteRotationGroup,
) -> EvalReport {
    let probs: Vec<Vec<f64>> = test
        .par_iter()
        .map(|s| softmax(&net.logits(&s.map)).iter().map(|p| p.to_f64()).collect())
        .collect();

    let n = group.order();
    let mut per_rotation: Vec<RotationAccuracy> = (0..n)
        .map(|rotation| RotationAccuracy { rotation, total: 0, correct: 0, accuracy: 0.0 })
        .collect();
    let mut correct_total = 0usize;
    for (sample, p) in test.iter().zip(&probs) {
        let predicted = argmax(p);
        let hit = predicted == sample.label;
        let slot = &mut per_rotation[sample.rotation];
        slot.total += 1;
        slot.correct += usize::from(hit);
        correct_total += usize::from(hit);
    }
    for slot in &mut per_rotation {
        slot.accuracy = if slot.total > 0 {
            slot.correct as f64 / slot.total as f64
        } else {
            0.0
        };
    }

    // Rotation averaging: mean softmax across each base sample's views.
    let max_base = test.iter().map(|s| s.base).max().map_or(0, |b| b + 1);
    let classes = probs.first().map_or(0, Vec::len);
    let mut sums = vec![vec![0.0f64; classes]; max_base];
    let mut counts = vec![0usize; max_base];
    let mut labels = vec![usize::MAX; max_base];
    for (sample, p) in test.iter().zip(&probs) {
        for (acc, v) in sums[sample.base].iter_mut().zip(p) {
            *acc += v;
        }
        counts[sample.base] += 1;
        labels[sample.base] = sample.label;
    }
    let mut averaged_correct = 0usize;
    let mut bases = 0usize;
    for b in 0..max_base {
        if counts[b] == 0 {
            continue;
        }
        bases += 1;
        if argmax(&sums[b]) == labels[b] {
            averaged_correct += 1;
        }
    }

    EvalReport {
        per_rotation,
        single_view_accuracy: correct_total as f64 / test.len().max(1) as f64,
        rotation_averaged_accuracy: averaged_correct as f64 / bases.max(1) as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_graph, Network};

    fn tiny_manifest() -> DatasetManifest {
        DatasetManifest {
            group: GroupKind::V,
            train_per_class: 4,
            test_per_class: 2,
            ..DatasetManifest::default()
        }
    }

    #[test]
    fn default_classes_are_connected_pentacubes() {
        for class in default_classes() {
            assert_eq!(class.cells.len(), 5);
            assert!(class.is_connected(), "{}", class.name);
        }
    }

    #[test]
    fn default_classes_are_rotation_inequivalent_under_s4() {
        let manifest = DatasetManifest::default();
        let group = FiniteRotationGroup::generate(GroupKind::S4);
        validate_manifest(&manifest, &group).unwrap();
    }

    #[test]
    fn rotated_duplicate_class_is_rejected() {
        // Needs a quarter turn to collide, so test under the full cube group.
        let mut manifest = DatasetManifest {
            group: GroupKind::S4,
            ..tiny_manifest()
        };
        let mut dup = manifest.classes[0].clone();
        dup.id = manifest.classes.len();
        dup.name = "rod-rotated".into();
        // The same rod standing along z instead of x.
        dup.cells = (0..5).map(|i| [i, 0, 0]).collect();
        manifest.classes.push(dup);
        assert!(matches!(
            generate_dataset::<f64>(&manifest),
            Err(DatasetError::RotationEquivalent(0, 5, _))
        ));
    }

    #[test]
    fn split_sizes_match_counts() {
        let manifest = tiny_manifest();
        let ds = generate_dataset::<f64>(&manifest).unwrap();
        assert_eq!(ds.train.len(), 5 * 4);
        // |test| = classes · bases · |V|
        assert_eq!(ds.test.len(), 5 * 2 * 4);
    }

    #[test]
    fn grid_too_small_is_rejected() {
        let manifest = DatasetManifest {
            grid: 7,
            max_translation: 2,
            ..tiny_manifest()
        };
        // rod extent 5 + 2·2 = 9 > 7.
        assert!(matches!(
            generate_dataset::<f64>(&manifest),
            Err(DatasetError::GridTooSmall { .. })
        ));
    }

    #[test]
    fn test_samples_are_exact_rotations_of_their_base() {
        let manifest = tiny_manifest();
        let group = FiniteRotationGroup::generate(manifest.group);
        let ds = generate_dataset::<f64>(&manifest).unwrap();
        for sample in &ds.test {
            let identity_view = ds
                .test
                .iter()
                .find(|s| s.base == sample.base && s.rotation == 0)
                .unwrap();
            let back = apply_group_action(&sample.map, &group, group.inverse(sample.rotation)).unwrap();
            assert_eq!(back, identity_view.map, "sample {}", sample.id);
        }
    }

    #[test]
    fn occupancy_uses_low_high_encoding() {
        let manifest = tiny_manifest();
        let ds = generate_dataset::<f64>(&manifest).unwrap();
        let sample = &ds.train[0];
        let mut high = 0;
        for &v in sample.map.data() {
            assert!(v == -1.0 || v == 5.0);
            high += usize::from(v == 5.0);
        }
        assert_eq!(high, 5); // pentacube
    }

    #[test]
    fn generation_is_deterministic() {
        let manifest = tiny_manifest();
        let a = generate_dataset::<f64>(&manifest).unwrap();
        let b = generate_dataset::<f64>(&manifest).unwrap();
        assert_eq!(a.train.len(), b.train.len());
        for (x, y) in a.train.iter().zip(&b.train).chain(a.test.iter().zip(&b.test)) {
            assert_eq!(x.id, y.id);
            let xb: Vec<u64> = x.map.data().iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u64> = y.map.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb, "sample {}", x.id);
        }
    }

    #[test]
    fn dataset_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = tiny_manifest();
        let ds = generate_dataset::<f64>(&manifest).unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        let back = load_dataset::<f64>(dir.path()).unwrap();
        assert_eq!(back.train.len(), ds.train.len());
        assert_eq!(back.test.len(), ds.test.len());
        for (x, y) in ds.test.iter().zip(&back.test) {
            assert_eq!(x.id, y.id);
            assert_eq!(x.label, y.label);
            assert_eq!(x.base, y.base);
            assert_eq!(x.rotation, y.rotation);
            assert_eq!(x.map, y.map);
        }
    }

    #[test]
    fn untrained_network_sits_near_chance() {
        let manifest = DatasetManifest {
            classes: default_classes().into_iter().take(4).collect(),
            ..tiny_manifest()
        };
        let ds = generate_dataset::<f64>(&manifest).unwrap();
        let names: Vec<String> = ["lift", "relu", "global_pool", "group_pool", "dense"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let graph = build_graph(manifest.group, &names, &[4], 3, 4).unwrap();
        let net = Network::<f64>::init(graph, 1, [9, 9, 9], 31).unwrap();
        let group = FiniteRotationGroup::generate(manifest.group);
        let report = evaluate(&net, &ds.test, &group);
        assert!(
            (report.single_view_accuracy - 0.25).abs() <= 0.15,
            "accuracy {}",
            report.single_view_accuracy
        );
    }

    #[test]
    fn invariant_network_has_equal_per_rotation_columns() {
        let manifest = tiny_manifest();
        let ds = generate_dataset::<f64>(&manifest).unwrap();
        let names: Vec<String> = ["lift", "relu", "global_pool", "group_pool", "dense"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let graph = build_graph(manifest.group, &names, &[4], 3, 5).unwrap();
        let net = Network::<f64>::init(graph, 1, [9, 9, 9], 37).unwrap();
        let group = FiniteRotationGroup::generate(manifest.group);
        let report = evaluate(&net, &ds.test, &group);
        let first = report.per_rotation[0].accuracy;
        for slot in &report.per_rotation {
            assert_eq!(slot.accuracy, first, "rotation {}", slot.rotation);
        }
        // For an invariant model the two aggregates coincide.
        assert!((report.rotation_averaged_accuracy - report.single_view_accuracy).abs() <= 1e-12);
    }
}
