//! Synthetic clips whose classes differ only in how much the frame-wise
//! visual/textual alignment fluctuates over time.
//!
//! Each frame gets a random unit visual vector `v_t` and a textual vector
//! built at a controlled angle to it:
//! `e_t = s_t·v_t + √(1 − s_t²)·w_t + noise`, with `w_t` a random unit vector
//! orthogonal to `v_t`. The target `s_t = μ + a·u_t` follows a clamped random
//! walk `u_t ∈ [−1, 1]`; real clips use amplitude `a_real`, fake clips the much
//! smaller `a_fake`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::config::SynthConfig;
use crate::embeddings::{write_clip, EmbeddingClip, Label, Manifest, ManifestEntry};
use crate::error::{CmtaError, Result};
use crate::parallel::{self, Execution};
use crate::tensor::{dot, Tensor};

fn random_unit<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = dot(&v, &v).sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Random unit vector orthogonal to the unit vector `v`.
fn random_orthogonal<R: Rng + ?Sized>(v: &[f64], rng: &mut R) -> Vec<f64> {
    loop {
        let mut w = random_unit(v.len(), rng);
        let proj = dot(&w, v);
        w.iter_mut().zip(v).for_each(|(wi, vi)| *wi -= proj * vi);
        let n = dot(&w, &w).sqrt();
        if n > 1e-6 {
            return w.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Target similarity per frame: `μ + a·u_t` with `u` a clamped random walk.
pub fn target_trajectory<R: Rng + ?Sized>(frames: usize, mu: f64, amplitude: f64, rng: &mut R) -> Vec<f64> {
    let step = Uniform::new_inclusive(-1.0, 1.0).expect("finite");
    let mut u: f64 = step.sample(rng);
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        if t > 0 {
            u = (u + step.sample(rng)).clamp(-1.0, 1.0);
        }
        out.push((mu + amplitude * u).clamp(-1.0, 1.0));
    }
    out
}

pub fn gen_clip<R: Rng + ?Sized>(
    config: &SynthConfig,
    label: Label,
    clip_id: impl Into<String>,
    rng: &mut R,
) -> Result<EmbeddingClip> {
    config.validate()?;
    let amplitude = match label {
        Label::Real => config.a_real,
        Label::Fake => config.a_fake,
    };
    let d = config.dim;
    let targets = target_trajectory(config.frames, config.mu, amplitude, rng);
    let mut visual = Vec::with_capacity(config.frames * d);
    let mut textual = Vec::with_capacity(config.frames * d);
    for &s in &targets {
        let v = random_unit(d, rng);
        let w = random_orthogonal(&v, rng);
        let k = (1.0 - s * s).max(0.0).sqrt();
        for j in 0..d {
            let noise: f64 = StandardNormal.sample(rng);
            textual.push((s * v[j] + k * w[j] + config.noise * noise) as f32);
        }
        visual.extend(v.iter().map(|&x| x as f32));
    }
    EmbeddingClip::new(
        clip_id,
        Tensor::new(vec![config.frames, d], visual)?,
        Tensor::new(vec![config.frames, d], textual)?,
        label,
    )
}

/// Independent stream for clip `index` of class `label`.
pub fn clip_rng(seed: u64, label: Label, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((label.as_u8() as u64) << 40) | index as u64);
    rng
}

/// Generates `n_clips` per class in memory, interleaved real/fake.
pub fn gen_clips(config: &SynthConfig, exec: Execution) -> Result<Vec<EmbeddingClip>> {
    config.validate()?;
    parallel::map_range(2 * config.n_clips, exec, |k| {
        let (index, label) = (k / 2, if k % 2 == 0 { Label::Real } else { Label::Fake });
        let name = clip_name(label, index);
        gen_clip(config, label, name, &mut clip_rng(config.seed, label, index))
    })
    .into_iter()
    .collect()
}

fn clip_name(label: Label, index: usize) -> String {
    match label {
        Label::Real => format!("real_{index:06}"),
        Label::Fake => format!("fake_{index:06}"),
    }
}

/// Writes the clips and a `manifest.csv` (relative paths) into `out_dir`.
/// Returns the manifest with paths resolved against `out_dir`.
pub fn gen_dataset(config: &SynthConfig, out_dir: &Path, exec: Execution) -> Result<Manifest> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| CmtaError::io(out_dir, e))?;
    let clips = gen_clips(config, exec)?;
    let written: Vec<Result<ManifestEntry>> = parallel::map(&clips, exec, |clip| {
        let file = PathBuf::from(format!("{}.cmta", clip.clip_id));
        write_clip(clip, &out_dir.join(&file))?;
        Ok(ManifestEntry {
            path: file,
            label: clip.label,
            subset: config.subset.clone(),
        })
    });
    let relative = Manifest::new(written.into_iter().collect::<Result<Vec<_>>>()?);
    relative.write(&out_dir.join("manifest.csv"))?;
    let mut resolved = relative;
    for e in &mut resolved.entries {
        e.path = out_dir.join(&e.path);
    }
    Ok(resolved)
}

/// Population standard deviation of a clip's similarity sequence.
pub fn similarity_std(clip: &EmbeddingClip) -> Result<f64> {
    let seq = crate::similarity::similarity_sequence(&clip.visual.cast::<f64>(), &clip.textual.cast::<f64>())?;
    let vals = seq.values();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    Ok((vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::similarity::cosine;

    fn quartiles(mut xs: Vec<f64>) -> (f64, f64) {
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let q = |p: f64| xs[((xs.len() - 1) as f64 * p).round() as usize];
        (q(0.25), q(0.75))
    }

    #[test]
    fn zero_noise_hits_target_cosine() {
        let cfg = SynthConfig {
            noise: 0.0,
            frames: 1000,
            ..SynthConfig::default()
        };
        let mut rng = clip_rng(1, Label::Real, 0);
        let mut trng = rng.clone();
        let targets = target_trajectory(cfg.frames, cfg.mu, cfg.a_real, &mut trng);
        let clip = gen_clip(&cfg, Label::Real, "x", &mut rng).unwrap();
        for (t, &target) in targets.iter().enumerate() {
            let s = cosine(clip.visual.row(t), clip.textual.row(t)).unwrap() as f64;
            assert!((s - target).abs() < 0.05, "frame {t}: {s} vs {target}");
        }
    }

    #[test]
    fn zero_fake_amplitude_gives_flat_similarity() {
        let cfg = SynthConfig {
            a_fake: 0.0,
            n_clips: 50,
            ..SynthConfig::default()
        };
        for clip in gen_clips(&cfg, Execution::Sequential).unwrap() {
            if clip.label == Label::Fake {
                assert!(similarity_std(&clip).unwrap() < 0.03);
            }
        }
    }

    #[test]
    fn deterministic_and_balanced() {
        let cfg = SynthConfig {
            n_clips: 20,
            ..SynthConfig::default()
        };
        let a = gen_clips(&cfg, Execution::Parallel).unwrap();
        let b = gen_clips(&cfg, Execution::Sequential).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.iter().filter(|c| c.label == Label::Fake).count(), 20);
    }

    #[test]
    fn classes_separate_on_similarity_spread() {
        let cfg = SynthConfig {
            n_clips: 300,
            ..SynthConfig::default()
        };
        let clips = gen_clips(&cfg, Execution::Parallel).unwrap();
        let spread = |label| -> Vec<f64> {
            clips.iter().filter(|c| c.label == label).map(|c| similarity_std(c).unwrap()).collect()
        };
        let (real, fake) = (spread(Label::Real), spread(Label::Fake));
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&real) > 3.0 * mean(&fake), "{} vs {}", mean(&real), mean(&fake));
        let (_, fake_q3) = quartiles(fake);
        let (real_q1, _) = quartiles(real);
        assert!(real_q1 > fake_q3, "IQRs overlap: real Q1 {real_q1}, fake Q3 {fake_q3}");
    }

    #[test]
    fn dataset_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            n_clips: 5,
            ..SynthConfig::default()
        };
        let m = gen_dataset(&cfg, dir.path(), Execution::Parallel).unwrap();
        assert_eq!(m.len(), 10);
        assert_eq!(m.count(Label::Real), 5);
        let loaded = crate::embeddings::load_manifest(&dir.path().join("manifest.csv")).unwrap();
        assert_eq!(loaded, m);
        let clips = loaded.load_clips(Execution::Sequential).unwrap();
        assert_eq!(clips, gen_clips(&cfg, Execution::Sequential).unwrap());
    }
}
