//! Corpus directories: `frames/NNNNN.ppm`, `masks/NNNNN.pgm` and `spec.txt`
//! per scene. A corpus is either one scene directory or a directory of them.

use std::fs;
use std::path::{Path, PathBuf};

use sparsevos_core::corpus::{generate, SceneSpec, Video};
use sparsevos_core::{BinaryMask, Tensor};

use crate::config::{parse_scene_spec, scene_spec_text, CorpusSpec};
use crate::error::{Error, Result};
use crate::netpbm::{encode_mask, encode_ppm, read_mask, read_ppm};

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub name: String,
    pub frames: Vec<Tensor>,
    pub masks: Vec<BinaryMask>,
}

impl Scene {
    pub fn video(&self) -> Video {
        (self.frames.clone(), self.masks.clone())
    }
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn put(p: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(p, bytes).map_err(|e| Error::io(p, e))
}

pub fn frame_name(t: usize, ext: &str) -> String {
    format!("{t:05}.{ext}")
}

pub fn write_scene(dir: &Path, spec: &SceneSpec) -> Result<usize> {
    let (frames, masks) = generate(spec)?;
    mkdir(&dir.join("frames"))?;
    mkdir(&dir.join("masks"))?;
    for (t, (f, m)) in frames.iter().zip(&masks).enumerate() {
        put(&dir.join("frames").join(frame_name(t, "ppm")), &encode_ppm(f))?;
        put(&dir.join("masks").join(frame_name(t, "pgm")), &encode_mask(m))?;
    }
    put(&dir.join("spec.txt"), scene_spec_text(spec).as_bytes())?;
    Ok(frames.len())
}

/// Writes a corpus and returns the scene directories.
pub fn write_corpus(out: &Path, spec: &CorpusSpec) -> Result<Vec<PathBuf>> {
    match spec {
        CorpusSpec::Scene(s) => {
            write_scene(out, s)?;
            Ok(vec![out.to_path_buf()])
        }
        CorpusSpec::Random { scenes, frames, seed } => (0..*scenes)
            .map(|i| {
                let dir = out.join(format!("scene_{i:03}"));
                write_scene(&dir, &SceneSpec::random(i as u64, *seed, *frames))?;
                Ok(dir)
            })
            .collect(),
    }
}

fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut v: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == ext))
        .collect();
    v.sort();
    Ok(v)
}

pub fn is_scene_dir(dir: &Path) -> bool {
    dir.join("frames").is_dir()
}

pub fn read_scene(dir: &Path) -> Result<Scene> {
    let frames = sorted_files(&dir.join("frames"), "ppm")?
        .iter()
        .map(|p| read_ppm(p))
        .collect::<Result<Vec<_>>>()?;
    let masks = sorted_files(&dir.join("masks"), "pgm")?
        .iter()
        .map(|p| read_mask(p))
        .collect::<Result<Vec<_>>>()?;
    if frames.is_empty() {
        return Err(Error::Format(format!("{}: no frames", dir.display())));
    }
    if masks.len() != frames.len() {
        return Err(Error::Format(format!(
            "{}: {} frames but {} masks",
            dir.display(),
            frames.len(),
            masks.len()
        )));
    }
    let name = dir.file_name().map_or("scene".into(), |n| n.to_string_lossy().into_owned());
    Ok(Scene { name, frames, masks })
}

pub fn read_scene_spec(dir: &Path) -> Result<SceneSpec> {
    let p = dir.join("spec.txt");
    parse_scene_spec(&fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?)
}

pub fn read_corpus(dir: &Path) -> Result<Vec<Scene>> {
    if !dir.is_dir() {
        return Err(Error::NotFound(format!("corpus not found: {}", dir.display())));
    }
    if is_scene_dir(dir) {
        return Ok(vec![read_scene(dir)?]);
    }
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut dirs: Vec<PathBuf> = rd.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| is_scene_dir(p)).collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::NotFound(format!("no scenes under {}", dir.display())));
    }
    dirs.iter().map(|d| read_scene(d)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_round_trip_keeps_masks() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec { frames: 4, ..SceneSpec::default() };
        write_scene(dir.path(), &spec).unwrap();
        let scene = read_scene(dir.path()).unwrap();
        let (_, masks) = generate(&spec).unwrap();
        assert_eq!(scene.masks, masks);
        assert_eq!(scene.frames.len(), 4);
        assert_eq!(read_scene_spec(dir.path()).unwrap(), spec);
    }

    #[test]
    fn random_corpus_layout() {
        let dir = tempfile::tempdir().unwrap();
        let dirs = write_corpus(dir.path(), &CorpusSpec::Random { scenes: 2, frames: 3, seed: 1 }).unwrap();
        assert_eq!(dirs.len(), 2);
        let scenes = read_corpus(dir.path()).unwrap();
        assert_eq!(scenes.len(), 2);
        assert_eq!(scenes[0].name, "scene_000");
    }
}
