//! Trajectory dataset generation and random-access loading.
//!
//! Layout of a dataset directory:
//! - `meta.txt` — UTF-8 `key = value` lines, `#` comments
//! - `obs.f32` — [traj][t][row][col][rgb], f32 little-endian
//! - `proprio.f32` — [traj][t][4]
//! - `actions.f32` — [traj][t][2]
//!
//! Trajectory `i` is randomized (domain randomization) exactly when
//! `i < floor(dr_fraction * n_traj)`; its background is drawn once from the
//! per-trajectory stream and held fixed for the whole trajectory.

use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use super::{dr_background, rollout_trajectory, EnvState, MazeSpec, Scenario, ScenarioTag};
use crate::autodiff::Tensor;
use crate::rng::Rng;
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub n_traj: usize,
    pub traj_len: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub proprio_dim: usize,
    pub action_dim: usize,
    pub seed: u64,
    pub dr_fraction: f64,
    pub scenario: ScenarioTag,
}

impl DatasetMeta {
    pub fn n_randomized(&self) -> usize {
        (self.dr_fraction * self.n_traj as f64).floor() as usize
    }

    fn to_text(&self) -> String {
        format!(
            "# trajectory dataset\nformat_version = {}\nn_traj = {}\ntraj_len = {}\nimage_size = {}\npatch_size = {}\nproprio_dim = {}\naction_dim = {}\nseed = {}\ndr_fraction = {}\nscenario = {}\n",
            self.format_version,
            self.n_traj,
            self.traj_len,
            self.image_size,
            self.patch_size,
            self.proprio_dim,
            self.action_dim,
            self.seed,
            self.dr_fraction,
            self.scenario.as_str()
        )
    }

    fn parse(text: &str) -> Result<DatasetMeta> {
        let mut kv = std::collections::HashMap::new();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("bad meta line `{line}`")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| -> Result<String> {
            kv.get(k)
                .cloned()
                .ok_or_else(|| Error::Config(format!("meta.txt missing key `{k}`")))
        };
        let parse_num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Config(format!("meta.txt bad value for `{k}`")))
        };
        Ok(DatasetMeta {
            format_version: parse_num("format_version")? as u32,
            n_traj: parse_num("n_traj")?,
            traj_len: parse_num("traj_len")?,
            image_size: parse_num("image_size")?,
            patch_size: parse_num("patch_size")?,
            proprio_dim: parse_num("proprio_dim")?,
            action_dim: parse_num("action_dim")?,
            seed: get("seed")?
                .parse()
                .map_err(|_| Error::Config("meta.txt bad value for `seed`".into()))?,
            dr_fraction: get("dr_fraction")?
                .parse()
                .map_err(|_| Error::Config("meta.txt bad value for `dr_fraction`".into()))?,
            scenario: ScenarioTag::parse(&get("scenario")?)?,
        })
    }
}

fn write_f32s(w: &mut impl Write, values: impl Iterator<Item = f64>) -> Result<()> {
    let mut buf = Vec::with_capacity(4096);
    for v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
        if buf.len() >= 4096 {
            w.write_all(&buf)?;
            buf.clear();
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

/// The scenario used for trajectory `i` of a dataset.
pub fn trajectory_scenario(spec_seed: u64, meta_scenario: ScenarioTag, dr_count: usize, i: usize) -> Scenario {
    let root = Rng::new(spec_seed);
    let traj_rng = root.derive("trajectory").derive_u64(i as u64);
    if i < dr_count {
        let mut bg_rng = traj_rng.derive("background");
        Scenario::randomized(dr_background(&mut bg_rng), spec_seed ^ i as u64)
    } else {
        Scenario::new(meta_scenario, spec_seed ^ i as u64)
    }
}

/// Generate a dataset of uniform-random-policy trajectories under `spec`.
///
/// Actions are i.i.d. uniform on [-1,1]²; starts are uniform over free
/// space at rest. Writing is fully deterministic in `seed`.
pub fn generate_dataset(
    spec: &MazeSpec,
    n_traj: usize,
    traj_len: usize,
    seed: u64,
    dr_fraction: f64,
    scenario: ScenarioTag,
    out_dir: &Path,
) -> Result<DatasetMeta> {
    if n_traj == 0 {
        return Err(Error::Invalid("n_traj must be positive".into()));
    }
    if !(0.0..=1.0).contains(&dr_fraction) {
        return Err(Error::Invalid("dr_fraction must lie in [0,1]".into()));
    }
    spec.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let meta = DatasetMeta {
        format_version: FORMAT_VERSION,
        n_traj,
        traj_len,
        image_size: spec.image_size,
        patch_size: spec.patch_size,
        proprio_dim: 4,
        action_dim: 2,
        seed,
        dr_fraction,
        scenario,
    };
    let dr_count = meta.n_randomized();
    let root = Rng::new(seed);

    let mut obs_w = BufWriter::new(File::create(out_dir.join("obs.f32"))?);
    let mut prop_w = BufWriter::new(File::create(out_dir.join("proprio.f32"))?);
    let mut act_w = BufWriter::new(File::create(out_dir.join("actions.f32"))?);

    for i in 0..n_traj {
        let traj_rng = root.derive("trajectory").derive_u64(i as u64);
        let scenario_i = trajectory_scenario(seed, scenario, dr_count, i);
        let start_pos = spec.sample_free_position(&mut traj_rng.derive("start"));
        let mut act_rng = traj_rng.derive("actions");
        let actions: Vec<[f64; 2]> = (0..traj_len)
            .map(|_| [act_rng.uniform(-1.0, 1.0), act_rng.uniform(-1.0, 1.0)])
            .collect();
        let traj = rollout_trajectory(spec, EnvState::new(start_pos, scenario_i), &actions);
        for frame in &traj.observations {
            write_f32s(&mut obs_w, frame.data().iter().copied())?;
        }
        for p in &traj.proprios {
            write_f32s(&mut prop_w, p.iter().copied())?;
        }
        for a in &traj.actions {
            write_f32s(&mut act_w, a.iter().copied())?;
        }
    }
    obs_w.flush()?;
    prop_w.flush()?;
    act_w.flush()?;
    std::fs::write(out_dir.join("meta.txt"), meta.to_text())?;
    Ok(meta)
}

/// Random-access reader over a dataset directory.
pub struct Dataset {
    pub meta: DatasetMeta,
    dir: PathBuf,
    obs: std::sync::Mutex<File>,
    proprios: Vec<[f64; 4]>,
    actions: Vec<[f64; 2]>,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Dataset> {
        let meta = DatasetMeta::parse(&std::fs::read_to_string(dir.join("meta.txt"))?)?;
        let frames_per_traj = meta.traj_len + 1;
        let proprios = read_f32_file(&dir.join("proprio.f32"))?
            .chunks(4)
            .map(|c| [c[0], c[1], c[2], c[3]])
            .collect::<Vec<_>>();
        let actions = read_f32_file(&dir.join("actions.f32"))?
            .chunks(2)
            .map(|c| [c[0], c[1]])
            .collect::<Vec<_>>();
        if proprios.len() != meta.n_traj * frames_per_traj {
            return Err(Error::Invalid("proprio.f32 length mismatch".into()));
        }
        if actions.len() != meta.n_traj * meta.traj_len {
            return Err(Error::Invalid("actions.f32 length mismatch".into()));
        }
        Ok(Dataset {
            dir: dir.to_path_buf(),
            obs: std::sync::Mutex::new(File::open(dir.join("obs.f32"))?),
            meta,
            proprios,
            actions,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn frames_per_traj(&self) -> usize {
        self.meta.traj_len + 1
    }

    /// Frame (traj, t) as an S×S×3 tensor.
    pub fn frame(&self, traj: usize, t: usize) -> Result<Tensor> {
        let s = self.meta.image_size;
        let frame_elems = s * s * 3;
        let idx = traj * self.frames_per_traj() + t;
        let mut buf = vec![0u8; frame_elems * 4];
        {
            let mut f = self.obs.lock().unwrap();
            f.seek(SeekFrom::Start((idx * frame_elems * 4) as u64))?;
            f.read_exact(&mut buf)?;
        }
        let data = buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        Ok(Tensor::from_vec(data, &[s, s, 3]))
    }

    pub fn proprio(&self, traj: usize, t: usize) -> [f64; 4] {
        self.proprios[traj * self.frames_per_traj() + t]
    }

    pub fn action(&self, traj: usize, t: usize) -> [f64; 2] {
        self.actions[traj * self.meta.traj_len + t]
    }
}

fn read_f32_file(path: &Path) -> Result<Vec<f64>> {
    let bytes = std::fs::read(path)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maze::render;

    fn tmpdir(name: &str) -> PathBuf {
        let d = std::env::temp_dir().join(format!("bwm_ds_{name}_{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&d);
        d
    }

    #[test]
    fn zero_dr_fraction_renders_everything_nc() {
        let meta = DatasetMeta {
            format_version: 1,
            n_traj: 10,
            traj_len: 3,
            image_size: 64,
            patch_size: 8,
            proprio_dim: 4,
            action_dim: 2,
            seed: 5,
            dr_fraction: 0.0,
            scenario: ScenarioTag::Nc,
        };
        assert_eq!(meta.n_randomized(), 0);
        for i in 0..10 {
            let s = trajectory_scenario(5, ScenarioTag::Nc, 0, i);
            assert!(s.background_override.is_none());
        }
    }

    #[test]
    fn dr_fraction_randomizes_exactly_floor_fraction() {
        // floor(0.4 * 7) = 2
        let dr_count = (0.4f64 * 7.0).floor() as usize;
        assert_eq!(dr_count, 2);
        let mut n_random = 0;
        for i in 0..7 {
            if trajectory_scenario(9, ScenarioTag::Nc, dr_count, i)
                .background_override
                .is_some()
            {
                n_random += 1;
            }
        }
        assert_eq!(n_random, 2);
    }

    #[test]
    fn regeneration_is_byte_identical_and_replayable() {
        let spec = MazeSpec::default_layout();
        let d1 = tmpdir("a");
        let d2 = tmpdir("b");
        generate_dataset(&spec, 3, 4, 42, 0.4, ScenarioTag::Nc, &d1).unwrap();
        generate_dataset(&spec, 3, 4, 42, 0.4, ScenarioTag::Nc, &d2).unwrap();
        for f in ["meta.txt", "obs.f32", "proprio.f32", "actions.f32"] {
            let a = std::fs::read(d1.join(f)).unwrap();
            let b = std::fs::read(d2.join(f)).unwrap();
            assert_eq!(a, b, "{f} differs across regenerations");
        }

        // replay: re-simulate stored actions and compare rendered bytes
        let ds = Dataset::open(&d1).unwrap();
        let traj = 2; // non-randomized one (dr_count = floor(1.2) = 1)
        let scenario = trajectory_scenario(42, ScenarioTag::Nc, ds.meta.n_randomized(), traj);
        let p0 = ds.proprio(traj, 0);
        let mut state = EnvState::new([p0[0], p0[1]], scenario);
        for t in 0..=ds.meta.traj_len {
            let stored = ds.frame(traj, t).unwrap();
            let fresh = render(&spec, &state);
            let fresh_f32: Vec<f32> = fresh.data().iter().map(|&x| x as f32).collect();
            let stored_f32: Vec<f32> = stored.data().iter().map(|&x| x as f32).collect();
            assert_eq!(fresh_f32, stored_f32, "frame {t} mismatch on replay");
            let p = ds.proprio(traj, t);
            assert!((state.pos[0] - p[0]).abs() < 1e-6 && (state.pos[1] - p[1]).abs() < 1e-6);
            if t < ds.meta.traj_len {
                state = crate::maze::step(&spec, &state, ds.action(traj, t));
            }
        }
        let _ = std::fs::remove_dir_all(d1);
        let _ = std::fs::remove_dir_all(d2);
    }

    #[test]
    fn rejects_bad_arguments() {
        let spec = MazeSpec::default_layout();
        let d = tmpdir("bad");
        assert!(generate_dataset(&spec, 0, 4, 1, 0.0, ScenarioTag::Nc, &d).is_err());
        assert!(generate_dataset(&spec, 1, 4, 1, 1.5, ScenarioTag::Nc, &d).is_err());
    }
}
