//! Synthetic few-shot classification tasks with a built-in transformation
//! prior, verifiable rewards, and accuracy evaluation.
//!
//! Each class is a random prototype grid. Class labels are defined on
//! transform orbits: every image of an instance under the family's group
//! carries the instance's label. Training instances are shown in the
//! prototype's own orientation only; the transformed test split presents
//! held-out instances under a random non-identity group element.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::DomainTransform;
use crate::error::{contract, Error, Result};
use crate::policy::{Context, Grid, PolicyParameters, Vocab};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskFamily {
    /// Labels invariant under the four rotations.
    Rotation,
    /// Labels invariant under both reflections (and their composition).
    Mirror,
}

impl fmt::Display for TaskFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskFamily::Rotation => "rotation",
            TaskFamily::Mirror => "mirror",
        })
    }
}

impl FromStr for TaskFamily {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "rotation" => Ok(TaskFamily::Rotation),
            "mirror" => Ok(TaskFamily::Mirror),
            other => Err(format!(
                "unknown task family `{other}` (expected rotation or mirror)"
            )),
        }
    }
}

impl TaskFamily {
    /// Group elements, identity first.
    pub fn group(self) -> [DomainTransform; 4] {
        match self {
            TaskFamily::Rotation => [
                DomainTransform::Identity,
                DomainTransform::Rotate(1),
                DomainTransform::Rotate(2),
                DomainTransform::Rotate(3),
            ],
            TaskFamily::Mirror => [
                DomainTransform::Identity,
                DomainTransform::ReflectHorizontal,
                DomainTransform::ReflectVertical,
                DomainTransform::Rotate(2),
            ],
        }
    }

    /// The random transform kind matching this family's prior.
    pub fn default_transform(self) -> DomainTransform {
        match self {
            TaskFamily::Rotation => DomainTransform::RandomRotation,
            TaskFamily::Mirror => DomainTransform::RandomReflection,
        }
    }
}

/// Lexicographically smallest image of `grid` under the family's group.
pub fn orbit_canonical(grid: &Grid, family: TaskFamily) -> Grid {
    family
        .group()
        .iter()
        .map(|t| t.apply_to_grid(grid).expect("concrete transform"))
        .min()
        .expect("non-empty group")
}

/// Number of orbits of `k×k` grids over `values` symbols (Burnside's lemma).
pub fn count_orbits(k: usize, values: usize, family: TaskFamily) -> f64 {
    let n = k * k;
    let total: f64 = family
        .group()
        .iter()
        .map(|t| {
            let perm = permutation_of(*t, k);
            let mut seen = vec![false; n];
            let mut cycles = 0i32;
            for start in 0..n {
                if seen[start] {
                    continue;
                }
                cycles += 1;
                let mut i = start;
                while !seen[i] {
                    seen[i] = true;
                    i = perm[i];
                }
            }
            (values as f64).powi(cycles)
        })
        .sum();
    total / family.group().len() as f64
}

/// Where each cell index lands under `t`.
fn permutation_of(t: DomainTransform, k: usize) -> Vec<usize> {
    let mut perm = vec![0usize; k * k];
    for (pos, slot) in perm.iter_mut().enumerate() {
        let mut cells = vec![0u8; k * k];
        cells[pos] = 1;
        let moved = t
            .apply_to_grid(&Grid::new(k, cells).expect("square"))
            .expect("concrete transform");
        *slot = moved
            .cells()
            .iter()
            .position(|v| *v == 1)
            .expect("one marked cell");
    }
    perm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub family: TaskFamily,
    pub grid_size: usize,
    pub num_classes: usize,
    /// Training instances per class.
    pub shots: usize,
    /// Number of distinct cell values.
    pub obs_values: usize,
    /// Held-out canonical instances (the transformed split has as many).
    pub test_size: usize,
    /// Per-cell probability of replacing a prototype cell with another value.
    pub noise: f64,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            family: TaskFamily::Rotation,
            grid_size: 5,
            num_classes: 6,
            shots: 8,
            obs_values: 2,
            test_size: 200,
            noise: 0.08,
            seed: 0,
        }
    }
}

impl TaskSpec {
    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.num_classes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(contract(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.grid_size < 3 {
            return Err(contract(format!(
                "grid size must be at least 3, got {}",
                self.grid_size
            )));
        }
        if self.shots < 1 {
            return Err(contract("need at least 1 shot per class"));
        }
        if self.obs_values < 2 || self.obs_values > 255 {
            return Err(contract(format!(
                "observation values must lie in [2, 255], got {}",
                self.obs_values
            )));
        }
        if self.test_size < 1 {
            return Err(contract("test split must be non-empty"));
        }
        if !(self.noise > 0.0 && self.noise < 1.0) {
            return Err(contract(format!(
                "noise must lie in (0, 1), got {}",
                self.noise
            )));
        }
        let orbits = count_orbits(self.grid_size, self.obs_values, self.family);
        if self.num_classes as f64 > orbits {
            return Err(contract(format!(
                "{} classes exceed the {orbits} distinct motifs of a {}x{} grid",
                self.num_classes, self.grid_size, self.grid_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    TestCanonical,
    TestTransformed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub context: Context,
    pub label: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub prototypes: Vec<Grid>,
    pub train: Vec<Episode>,
    pub test_canonical: Vec<Episode>,
    pub test_transformed: Vec<Episode>,
}

const MAX_ATTEMPTS_PER_ITEM: usize = 10_000;

fn hamming(a: &Grid, b: &Grid) -> usize {
    a.cells()
        .iter()
        .zip(b.cells())
        .filter(|(x, y)| x != y)
        .count()
}

fn random_grid<R: Rng>(k: usize, values: usize, rng: &mut R) -> Grid {
    let cells = (0..k * k)
        .map(|_| rng.random_range(0..values) as u8)
        .collect();
    Grid::new(k, cells).expect("square")
}

fn perturb<R: Rng>(proto: &Grid, values: usize, noise: f64, rng: &mut R) -> Grid {
    let cells = proto
        .cells()
        .iter()
        .map(|&v| {
            if rng.random_bool(noise) {
                let shift = rng.random_range(1..values) as u8;
                ((v as usize + shift as usize) % values) as u8
            } else {
                v
            }
        })
        .collect();
    Grid::new(proto.size(), cells).expect("square")
}

fn question(vocab: Vocab) -> Vec<usize> {
    vec![vocab.query()]
}

/// Generates prototypes, train and test splits deterministically from `spec.seed`.
pub fn generate_dataset(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let k = spec.grid_size;
    let group = spec.family.group();
    let vocab = spec.vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let min_distance = ((k * k) / 5).max(1);

    let mut prototypes: Vec<Grid> = Vec::with_capacity(spec.num_classes);
    let mut attempts = 0;
    while prototypes.len() < spec.num_classes {
        attempts += 1;
        if attempts > MAX_ATTEMPTS_PER_ITEM * spec.num_classes {
            return Err(contract(format!(
                "could not find {} well-separated motifs on a {k}x{k} grid",
                spec.num_classes
            )));
        }
        let candidate = random_grid(k, spec.obs_values, &mut rng);
        let images: Vec<Grid> = group
            .iter()
            .map(|t| t.apply_to_grid(&candidate).expect("concrete"))
            .collect();
        // Motifs with a non-trivial stabilizer would make some transforms no-ops.
        if images[1..].iter().any(|im| *im == candidate) {
            continue;
        }
        let separated = prototypes
            .iter()
            .all(|p| images.iter().all(|im| hamming(p, im) >= min_distance));
        if separated {
            prototypes.push(candidate);
        }
    }

    let mut used_orbits: HashSet<Grid> = HashSet::new();
    let mut draw_instance = |label: usize, rng: &mut ChaCha8Rng| -> Result<Grid> {
        for _ in 0..MAX_ATTEMPTS_PER_ITEM {
            let g = perturb(&prototypes[label], spec.obs_values, spec.noise, rng);
            if used_orbits.insert(orbit_canonical(&g, spec.family)) {
                return Ok(g);
            }
        }
        Err(contract(format!(
            "could not draw enough distinct instances for class {label}; raise noise or grid size"
        )))
    };

    let mut train = Vec::with_capacity(spec.num_classes * spec.shots);
    for label in 0..spec.num_classes {
        for _ in 0..spec.shots {
            let grid = draw_instance(label, &mut rng)?;
            train.push(Episode {
                context: Context {
                    observation: grid,
                    question: question(vocab),
                },
                label,
                split: Split::Train,
            });
        }
    }
    train.shuffle(&mut rng);

    let mut test_canonical = Vec::with_capacity(spec.test_size);
    let mut test_transformed = Vec::with_capacity(spec.test_size);
    for i in 0..spec.test_size {
        let label = i % spec.num_classes;
        let grid = draw_instance(label, &mut rng)?;
        let t = group[rng.random_range(1..group.len())];
        let moved = t.apply_to_grid(&grid)?;
        test_canonical.push(Episode {
            context: Context {
                observation: grid,
                question: question(vocab),
            },
            label,
            split: Split::TestCanonical,
        });
        test_transformed.push(Episode {
            context: Context {
                observation: moved,
                question: question(vocab),
            },
            label,
            split: Split::TestTransformed,
        });
    }

    Ok(Dataset {
        spec: spec.clone(),
        prototypes,
        train,
        test_canonical,
        test_transformed,
    })
}

/// Reward weights for the answer-correctness and template-format indicators.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub accuracy_weight: f64,
    pub format_weight: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            accuracy_weight: 1.0,
            format_weight: 1.0,
        }
    }
}

/// `acc_w·[answer == gold] + fmt_w·[well-formed]`; malformed outputs get no
/// accuracy credit.
pub fn reward(output: &[usize], gold_label: usize, vocab: Vocab, cfg: &RewardConfig) -> f64 {
    match vocab.parse_answer(output) {
        Some(label) => {
            let acc = if label == gold_label { 1.0 } else { 0.0 };
            cfg.accuracy_weight * acc + cfg.format_weight
        }
        None => 0.0,
    }
}

/// Fraction of episodes whose greedy decode is well-formed and correct.
pub fn evaluate(params: &PolicyParameters, episodes: &[Episode]) -> Result<f64> {
    if episodes.is_empty() {
        return Err(contract("cannot evaluate on an empty episode list"));
    }
    let vocab = params.vocab();
    let mut correct = 0usize;
    for ep in episodes {
        let out = params.greedy_decode(&ep.context)?;
        if vocab.parse_answer(&out) == Some(ep.label) {
            correct += 1;
        }
    }
    Ok(correct as f64 / episodes.len() as f64)
}

pub const DATASET_SCHEMA: &str = "domrl-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    schema: String,
    version: u32,
    spec: TaskSpec,
}

#[derive(Serialize, Deserialize)]
struct EpisodeRecord {
    split: Split,
    grid_size: usize,
    grid: Vec<u8>,
    question: Vec<usize>,
    label: usize,
}

#[derive(Serialize, Deserialize)]
struct PrototypeRecord {
    prototype: usize,
    grid_size: usize,
    grid: Vec<u8>,
}

impl Dataset {
    pub fn episodes(&self) -> impl Iterator<Item = &Episode> {
        self.train
            .iter()
            .chain(&self.test_canonical)
            .chain(&self.test_transformed)
    }

    /// Writes one header line, then one line per prototype and per episode.
    pub fn dump<W: Write>(&self, mut out: W) -> Result<()> {
        let header = DatasetHeader {
            schema: DATASET_SCHEMA.into(),
            version: DATASET_VERSION,
            spec: self.spec.clone(),
        };
        writeln!(out, "{}", serde_json::to_string(&header)?)?;
        for (i, p) in self.prototypes.iter().enumerate() {
            let rec = PrototypeRecord {
                prototype: i,
                grid_size: p.size(),
                grid: p.cells().to_vec(),
            };
            writeln!(out, "{}", serde_json::to_string(&rec)?)?;
        }
        for ep in self.episodes() {
            let rec = EpisodeRecord {
                split: ep.split,
                grid_size: ep.context.observation.size(),
                grid: ep.context.observation.cells().to_vec(),
                question: ep.context.question.clone(),
                label: ep.label,
            };
            writeln!(out, "{}", serde_json::to_string(&rec)?)?;
        }
        Ok(())
    }

    pub fn load<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::Format("empty dataset file".into()))??;
        let header: DatasetHeader = serde_json::from_str(&first)?;
        if header.schema != DATASET_SCHEMA {
            return Err(Error::Format(format!(
                "unexpected schema `{}`",
                header.schema
            )));
        }
        if header.version != DATASET_VERSION {
            return Err(Error::Format(format!(
                "unsupported dataset version {}",
                header.version
            )));
        }
        let mut ds = Dataset {
            spec: header.spec,
            prototypes: Vec::new(),
            train: Vec::new(),
            test_canonical: Vec::new(),
            test_transformed: Vec::new(),
        };
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            if line.contains("\"prototype\"") {
                let rec: PrototypeRecord = serde_json::from_str(&line)?;
                ds.prototypes.push(Grid::new(rec.grid_size, rec.grid)?);
                continue;
            }
            let rec: EpisodeRecord = serde_json::from_str(&line)?;
            let ep = Episode {
                context: Context {
                    observation: Grid::new(rec.grid_size, rec.grid)?,
                    question: rec.question,
                },
                label: rec.label,
                split: rec.split,
            };
            match ep.split {
                Split::Train => ds.train.push(ep),
                Split::TestCanonical => ds.test_canonical.push(ep),
                Split::TestTransformed => ds.test_transformed.push(ep),
            }
        }
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> TaskSpec {
        TaskSpec {
            grid_size: 3,
            num_classes: 3,
            shots: 2,
            test_size: 12,
            noise: 0.15,
            ..TaskSpec::default()
        }
    }

    #[test]
    fn burnside_matches_enumeration() {
        for family in [TaskFamily::Rotation, TaskFamily::Mirror] {
            let mut orbits = HashSet::new();
            for bits in 0u32..512 {
                let cells = (0..9).map(|i| ((bits >> i) & 1) as u8).collect();
                orbits.insert(orbit_canonical(&Grid::new(3, cells).unwrap(), family));
            }
            assert_eq!(count_orbits(3, 2, family), orbits.len() as f64, "{family}");
        }
    }

    #[test]
    fn shot_arithmetic() {
        let spec = TaskSpec {
            shots: 1,
            num_classes: 6,
            ..TaskSpec::default()
        };
        let ds = generate_dataset(&spec).unwrap();
        assert_eq!(ds.train.len(), 6);
        let mut per_class = [0; 6];
        ds.train.iter().for_each(|e| per_class[e.label] += 1);
        assert_eq!(per_class, [1; 6]);
    }

    #[test]
    fn too_many_classes_is_a_contract_error() {
        let spec = TaskSpec {
            grid_size: 3,
            num_classes: 200,
            ..TaskSpec::default()
        };
        assert!(matches!(generate_dataset(&spec), Err(Error::Contract(_))));
    }

    #[test]
    fn reward_cases() {
        let v = Vocab::new(6);
        let cfg = RewardConfig::default();
        assert_eq!(reward(&v.answer(2), 2, v, &cfg), 2.0);
        assert_eq!(reward(&v.answer(3), 2, v, &cfg), 1.0);
        assert_eq!(reward(&[v.open(), 2, v.end()], 2, v, &cfg), 0.0);
        assert_eq!(reward(&[v.open(), 2, v.close()], 2, v, &cfg), 0.0);
    }

    #[test]
    fn empty_evaluation_is_an_error() {
        let spec = small_spec();
        let cfg = crate::policy::PolicyConfig {
            grid_size: 3,
            obs_values: 2,
            num_classes: 3,
            embed_dim: 4,
            hidden_dim: 4,
            max_len: 6,
        };
        let p = PolicyParameters::zeros(cfg).unwrap();
        assert!(evaluate(&p, &[]).is_err());
        let ds = generate_dataset(&spec).unwrap();
        // Uniform argmax picks token 0, which is never `<answer>`.
        assert_eq!(evaluate(&p, &ds.test_canonical).unwrap(), 0.0);
    }

    #[test]
    fn dump_and_load_round_trip() {
        let ds = generate_dataset(&small_spec()).unwrap();
        let mut buf = Vec::new();
        ds.dump(&mut buf).unwrap();
        let back = Dataset::load(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(back, ds);
    }
}
