use super::{fit_field, FitConfig, FitError};
use crate::edit::{perturb_trajectories, PerturbationSpec};
use crate::raster::render_sequence;
use crate::scene::{load_frames, save_frames, FrameSequence, FramesError, GaussianField, Scene};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const PAIR_MANIFEST: &str = "pair.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Cycle,
    MeshSubstitution,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub condition: FrameSequence,
    pub target: FrameSequence,
    pub provenance: Provenance,
    pub seed: u64,
    /// Mesh substitution probability of this variant.
    pub probability: Option<f64>,
    /// Assets drawn with their mesh instead of their splats.
    pub substituted: Vec<String>,
    /// For cycle pairs, the perturbed-trajectory render the refit was fitted to.
    pub auxiliary: Option<FrameSequence>,
}

#[derive(Debug, Error)]
pub enum PairError {
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error("no asset carries both splats and a mesh")]
    NoSubstitutableAssets,
    #[error("probability must lie in [0, 1], got {0}")]
    BadProbability(f64),
    #[error("jitter range must be non-negative, got {0}")]
    BadJitter(f64),
    #[error(transparent)]
    Frames(#[from] FramesError),
    #[error("io failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed pair manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
}

/// Scales every SH DC coefficient of `field` by one factor drawn uniformly
/// from `[1 − range, 1 + range]`.
pub fn lighting_jitter(field: &GaussianField, range: f64, seed: u64) -> GaussianField {
    let mut out = field.clone();
    if range == 0.0 {
        return out;
    }
    let u: f64 = ChaCha8Rng::seed_from_u64(seed).random();
    let factor = 1.0 + range * (2.0 * u - 1.0);
    for g in &mut out.primitives {
        for c in &mut g.sh[..3] {
            *c *= factor;
        }
    }
    out
}

/// Runs the cycle: perturb every trajectory (ego included), render the
/// original field along them, refit a copy of it to those views starting from
/// zeroed DC color, then render the refit along the original trajectories.
pub fn build_cycle_pairs(scene: &Scene, spec: &PerturbationSpec, fit: &FitConfig) -> Result<Vec<TrainingPair>, PairError> {
    let target = render_sequence(scene, &fit.render);

    let mut all = vec![scene.ego.clone()];
    all.extend(scene.trajectories.iter().cloned());
    let mut moved = perturb_trajectories(&all, spec);
    let mut perturbed = scene.clone();
    perturbed.ego = moved.remove(0);
    perturbed.trajectories = moved;
    let tilde = render_sequence(&perturbed, &fit.render);

    let mut init = perturbed.clone();
    let fields = std::iter::once(&mut init.background).chain(init.assets.iter_mut().filter_map(|a| a.splats.as_mut()));
    for f in fields {
        for g in &mut f.primitives {
            g.sh[..3].fill(0.0);
        }
    }
    let refit = fit_field(&init, &tilde, fit)?.scene;

    let mut back = refit;
    back.ego = scene.ego.clone();
    back.trajectories = scene.trajectories.clone();
    let condition = render_sequence(&back, &fit.render);

    Ok(vec![TrainingPair {
        condition,
        target,
        provenance: Provenance::Cycle,
        seed: spec.seed,
        probability: None,
        substituted: Vec::new(),
        auxiliary: Some(tilde),
    }])
}

fn variant_rng(seed: u64, variant: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(variant);
    rng
}

fn draw_substitutions(scene: &Scene, p: f64, rng: &mut ChaCha8Rng) -> Vec<String> {
    scene
        .assets
        .iter()
        .filter(|a| a.splats.is_some() && a.mesh.is_some())
        .filter_map(|a| (rng.random::<f64>() < p).then(|| a.id.clone()))
        .collect()
}

/// Ids of the assets the `p` variant of [`build_mesh_pairs`] draws as mesh.
pub fn substitution_plan(scene: &Scene, p: f64, seed: u64) -> Vec<String> {
    draw_substitutions(scene, p, &mut variant_rng(seed, 0))
}

fn mesh_variant(scene: &Scene, p: f64, lighting: f64, seed: u64, variant: u64, target: &FrameSequence) -> TrainingPair {
    let cfg = crate::raster::RenderConfig::default();
    let mut rng = variant_rng(seed, variant);
    let substituted = draw_substitutions(scene, p, &mut rng);
    let mut cond = scene.clone();
    cond.background = lighting_jitter(&cond.background, lighting, rng.next_u64());
    for a in &mut cond.assets {
        if substituted.contains(&a.id) {
            a.splats = None;
        } else if let Some(f) = &a.splats {
            a.splats = Some(lighting_jitter(f, lighting, rng.next_u64()));
        }
    }
    TrainingPair {
        condition: render_sequence(&cond, &cfg),
        target: target.clone(),
        provenance: Provenance::MeshSubstitution,
        seed,
        probability: Some(p),
        substituted,
        auxiliary: None,
    }
}

/// Emits two pairs: substitution probability `p`, then `0.0`. Targets are
/// the pure-splat render of the scene.
pub fn build_mesh_pairs(scene: &Scene, p: f64, lighting: f64, seed: u64) -> Result<Vec<TrainingPair>, PairError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(PairError::BadProbability(p));
    }
    if !(lighting >= 0.0) {
        return Err(PairError::BadJitter(lighting));
    }
    if p > 0.0 && !scene.assets.iter().any(|a| a.splats.is_some() && a.mesh.is_some()) {
        return Err(PairError::NoSubstitutableAssets);
    }
    let target = render_sequence(scene, &Default::default());
    Ok(vec![
        mesh_variant(scene, p, lighting, seed, 0, &target),
        mesh_variant(scene, 0.0, lighting, seed, 1, &target),
    ])
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    provenance: Provenance,
    seed: u64,
    #[serde(default)]
    probability: Option<f64>,
    #[serde(default)]
    substituted: Vec<String>,
    has_auxiliary: bool,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PairError + '_ {
    move |source| PairError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes each pair to `dir/pair_NNNN/` with `condition/`, `target/`, an
/// optional `auxiliary/` and a `pair.json` manifest.
pub fn save_pairs(pairs: &[TrainingPair], dir: &Path) -> Result<Vec<PathBuf>, PairError> {
    let mut out = Vec::with_capacity(pairs.len());
    for (i, pair) in pairs.iter().enumerate() {
        let d = dir.join(format!("pair_{i:04}"));
        std::fs::create_dir_all(&d).map_err(io_err(&d))?;
        save_frames(&pair.condition, &d.join("condition"))?;
        save_frames(&pair.target, &d.join("target"))?;
        if let Some(aux) = &pair.auxiliary {
            save_frames(aux, &d.join("auxiliary"))?;
        }
        let m = Manifest {
            provenance: pair.provenance,
            seed: pair.seed,
            probability: pair.probability,
            substituted: pair.substituted.clone(),
            has_auxiliary: pair.auxiliary.is_some(),
        };
        let p = d.join(PAIR_MANIFEST);
        let mut text = serde_json::to_string_pretty(&m).expect("manifest serializes");
        text.push('\n');
        std::fs::write(&p, text).map_err(io_err(&p))?;
        out.push(d);
    }
    Ok(out)
}

/// Loads every `pair_*` directory under `dir`, in name order.
pub fn load_pairs(dir: &Path) -> Result<Vec<TrainingPair>, PairError> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("pair_")))
        .collect();
    dirs.sort();
    dirs.iter()
        .map(|d| {
            let p = d.join(PAIR_MANIFEST);
            let text = std::fs::read_to_string(&p).map_err(io_err(&p))?;
            let m: Manifest = serde_json::from_str(&text).map_err(|e| PairError::Manifest {
                path: p.clone(),
                message: e.to_string(),
            })?;
            let condition = load_frames(&d.join("condition"))?;
            let target = load_frames(&d.join("target"))?;
            if condition.len() != target.len() || condition.width != target.width || condition.height != target.height {
                return Err(PairError::Manifest {
                    path: p,
                    message: "condition and target differ in shape".into(),
                });
            }
            let auxiliary = if m.has_auxiliary { Some(load_frames(&d.join("auxiliary"))?) } else { None };
            Ok(TrainingPair {
                condition,
                target,
                provenance: m.provenance,
                seed: m.seed,
                probability: m.probability,
                substituted: m.substituted,
                auxiliary,
            })
        })
        .collect()
}
