//! Flat `key = value` text files for pipeline configs and scene specs.
//!
//! Blank lines and `#` comments are ignored; unknown or repeated keys are errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sparsevos_core::corpus::{Background, SceneSpec, Shape};
use sparsevos_core::pipeline::PipelineConfig;

use crate::error::{Error, Result};

/// Parsed `key = value` pairs, consumed key by key.
#[derive(Debug, Default)]
pub struct KeyValues {
    map: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", i + 1)))?;
            let k = k.trim().to_owned();
            if map.insert(k.clone(), (i + 1, v.trim().to_owned())).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {k}", i + 1)));
            }
        }
        Ok(Self { map })
    }

    pub fn contains(&self, key: &str) -> bool {
        self.map.contains_key(key)
    }

    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        let Some((line, v)) = self.map.remove(key) else { return Ok(None) };
        v.parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("line {line}: cannot parse {key} = {v:?}")))
    }

    fn take_with<T>(&mut self, key: &str, f: impl FnOnce(&str) -> Option<T>) -> Result<Option<T>> {
        let Some((line, v)) = self.map.remove(key) else { return Ok(None) };
        f(&v).map(Some)
            .ok_or_else(|| Error::Config(format!("line {line}: cannot parse {key} = {v:?}")))
    }

    /// Fails on any key nobody consumed.
    pub fn finish(self) -> Result<()> {
        match self.map.into_iter().next() {
            Some((k, (line, _))) => Err(Error::Config(format!("line {line}: unknown key {k}"))),
            None => Ok(()),
        }
    }
}

fn pair<T: FromStr>(s: &str, seps: &[char]) -> Option<(T, T)> {
    let (a, b) = s.split_once(seps)?;
    Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
}

/// `"2"` or `"2x3"`.
fn extent(s: &str) -> Option<(usize, usize)> {
    pair(s, &['x', 'X']).or_else(|| s.parse().ok().map(|v| (v, v)))
}

fn triple(s: &str) -> Option<[usize; 3]> {
    let v: Vec<usize> = s.split(',').map(|p| p.trim().parse().ok()).collect::<Option<_>>()?;
    v.try_into().ok()
}

pub fn parse_pipeline_config(text: &str) -> Result<PipelineConfig> {
    let mut kv = KeyValues::parse(text)?;
    let mut c = PipelineConfig::default();
    if let Some(v) = kv.take_with("model.input", extent)? {
        c.encoder.input = v;
    }
    if let Some(v) = kv.take("model.patch")? {
        c.encoder.patch = v;
    }
    if let Some(v) = kv.take_with("model.channels", triple)? {
        c.encoder.channels = v;
    }
    if let Some(d) = kv.take::<usize>("model.d")? {
        c.encoder.channels[2] = d;
    }
    if let Some(v) = kv.take_with("model.layers", triple)? {
        c.encoder.layers = v;
    }
    if let Some(v) = kv.take_with("model.window", extent)? {
        c.encoder.window = v;
    }
    if let Some(v) = kv.take_with("model.shallow_window", extent)? {
        c.encoder.shallow_window = v;
    }
    if let Some(v) = kv.take("model.heads")? {
        c.encoder.heads = v;
        c.memory.heads = v;
        c.decoder.heads = v;
    }
    if let Some(v) = kv.take("model.global_final")? {
        c.encoder.global_final = v;
    }
    c.memory.d = c.encoder.channels[2];
    c.decoder.d = c.encoder.channels[2];
    c.decoder.c0 = c.encoder.channels[0];
    c.decoder.c1 = c.encoder.channels[1];
    if let Some(v) = kv.take("memory.m")? {
        c.memory.capacity = v;
    }
    if let Some(v) = kv.take("memory.dt")? {
        c.memory.interval = v;
    }
    if let Some(v) = kv.take("memory.layers")? {
        c.memory.layers = v;
    }
    if let Some(v) = kv.take("memory.pool")? {
        c.memory.pool = v;
    }
    if let Some(v) = kv.take("decoder.blocks")? {
        c.decoder.blocks = v;
    }
    if let Some(v) = kv.take("router.tau")? {
        c.router.tau = v;
    }
    if let Some(v) = kv.take("router.theta_obj")? {
        c.router.theta_obj = v;
    }
    if let Some(v) = kv.take("router.dilation")? {
        c.router.dilation_radius = v;
    }
    if let Some(v) = kv.take("router.dilation_iterations")? {
        c.router.dilation_iterations = v;
    }
    if let Some(v) = kv.take("smr.s")? {
        c.smr.sparsity = v;
    }
    if let Some(v) = kv.take("swr.enabled")? {
        c.swr_enabled = v;
    }
    if let Some(v) = kv.take("smr.enabled")? {
        c.smr_enabled = v;
    }
    if let Some(v) = kv.take("seed")? {
        c.seed = v;
    }
    kv.finish()?;
    c.validate()?;
    Ok(c)
}

pub fn pipeline_config_text(c: &PipelineConfig) -> String {
    let e = &c.encoder;
    let mut s = String::new();
    let _ = writeln!(s, "model.input = {}x{}", e.input.0, e.input.1);
    let _ = writeln!(s, "model.patch = {}", e.patch);
    let _ = writeln!(s, "model.channels = {},{},{}", e.channels[0], e.channels[1], e.channels[2]);
    let _ = writeln!(s, "model.layers = {},{},{}", e.layers[0], e.layers[1], e.layers[2]);
    let _ = writeln!(s, "model.window = {}x{}", e.window.0, e.window.1);
    let _ = writeln!(s, "model.shallow_window = {}x{}", e.shallow_window.0, e.shallow_window.1);
    let _ = writeln!(s, "model.heads = {}", e.heads);
    let _ = writeln!(s, "model.global_final = {}", e.global_final);
    let _ = writeln!(s, "memory.m = {}", c.memory.capacity);
    let _ = writeln!(s, "memory.dt = {}", c.memory.interval);
    let _ = writeln!(s, "memory.layers = {}", c.memory.layers);
    let _ = writeln!(s, "memory.pool = {}", c.memory.pool);
    let _ = writeln!(s, "decoder.blocks = {}", c.decoder.blocks);
    let _ = writeln!(s, "router.tau = {}", c.router.tau);
    let _ = writeln!(s, "router.theta_obj = {}", c.router.theta_obj);
    let _ = writeln!(s, "router.dilation = {}", c.router.dilation_radius);
    let _ = writeln!(s, "router.dilation_iterations = {}", c.router.dilation_iterations);
    let _ = writeln!(s, "smr.s = {}", c.smr.sparsity);
    let _ = writeln!(s, "swr.enabled = {}", c.swr_enabled);
    let _ = writeln!(s, "smr.enabled = {}", c.smr_enabled);
    let _ = writeln!(s, "seed = {}", c.seed);
    s
}

/// What `gen` should write: one explicit scene, or a set of random ones.
#[derive(Debug, Clone, PartialEq)]
pub enum CorpusSpec {
    Scene(SceneSpec),
    Random { scenes: usize, frames: usize, seed: u64 },
}

pub fn parse_corpus_spec(text: &str) -> Result<CorpusSpec> {
    let mut kv = KeyValues::parse(text)?;
    if kv.contains("scenes") {
        let scenes = kv.take("scenes")?.unwrap();
        let frames = kv.take("frames")?.unwrap_or(20);
        let seed = kv.take("seed")?.unwrap_or(0);
        kv.finish()?;
        return Ok(CorpusSpec::Random { scenes, frames, seed });
    }
    let spec = scene_from_kv(&mut kv)?;
    kv.finish()?;
    spec.validate()?;
    Ok(CorpusSpec::Scene(spec))
}

fn scene_from_kv(kv: &mut KeyValues) -> Result<SceneSpec> {
    let mut s = SceneSpec::default();
    if let Some(v) = kv.take("height")? {
        s.height = v;
    }
    if let Some(v) = kv.take("width")? {
        s.width = v;
    }
    if let Some(v) = kv.take("frames")? {
        s.frames = v;
    }
    if let Some(v) = kv.take_with("shape", |v| match v {
        "disk" => Some(Shape::Disk),
        "rect" => Some(Shape::Rect),
        _ => None,
    })? {
        s.shape = v;
    }
    if let Some(v) = kv.take("radius")? {
        s.radius = v;
    }
    if let Some(v) = kv.take_with("start", |v| pair(v, &[',']))? {
        s.start = v;
    }
    if let Some(v) = kv.take_with("velocity", |v| pair(v, &[',']))? {
        s.velocity = v;
    }
    if let Some(v) = kv.take_with("occluded", |v| if v == "none" { Some(None) } else { pair(v, &['-']).map(Some) })? {
        s.occluded = v;
    }
    if let Some(v) = kv.take_with("background", |v| match v {
        "constant" => Some(Background::Constant),
        "noise" => Some(Background::Noise),
        "distractor" => Some(Background::Distractor),
        _ => None,
    })? {
        s.background = v;
    }
    if let Some(v) = kv.take("seed")? {
        s.seed = v;
    }
    Ok(s)
}

pub fn parse_scene_spec(text: &str) -> Result<SceneSpec> {
    let mut kv = KeyValues::parse(text)?;
    let s = scene_from_kv(&mut kv)?;
    kv.finish()?;
    Ok(s)
}

/// Text form read back by [`parse_scene_spec`]; floats print round-trippably.
pub fn scene_spec_text(s: &SceneSpec) -> String {
    let shape = match s.shape {
        Shape::Disk => "disk",
        Shape::Rect => "rect",
    };
    let background = match s.background {
        Background::Constant => "constant",
        Background::Noise => "noise",
        Background::Distractor => "distractor",
    };
    let occluded = s.occluded.map_or("none".to_owned(), |(a, b)| format!("{a}-{b}"));
    format!(
        "height = {}\nwidth = {}\nframes = {}\nshape = {shape}\nradius = {:?}\nstart = {:?},{:?}\n\
         velocity = {:?},{:?}\noccluded = {occluded}\nbackground = {background}\nseed = {}\n",
        s.height, s.width, s.frames, s.radius, s.start.0, s.start.1, s.velocity.0, s.velocity.1, s.seed
    )
}

pub fn read_text(path: &Path, what: &str) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound(format!("{what} not found: {}", path.display()))
        } else {
            Error::io(path, e)
        }
    })
}

pub fn load_pipeline_config(path: &Path) -> Result<PipelineConfig> {
    parse_pipeline_config(&read_text(path, "config")?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_text_round_trips() {
        let c = PipelineConfig::default();
        assert_eq!(parse_pipeline_config(&pipeline_config_text(&c)).unwrap(), c);
    }

    #[test]
    fn documented_keys() {
        let c = parse_pipeline_config("model.window = 4\nrouter.tau = 0.5 # comment\nsmr.s=0.9\nmemory.m = 4\nmemory.dt = 2\nseed = 7\n")
            .unwrap();
        assert_eq!(c.encoder.window, (4, 4));
        assert_eq!(c.router.tau, 0.5);
        assert_eq!(c.smr.sparsity, 0.9);
        assert_eq!((c.memory.capacity, c.memory.interval, c.seed), (4, 2, 7));
    }

    #[test]
    fn rejects_bad_input() {
        for bad in ["bogus = 1", "router.tau = x", "seed = 1\nseed = 2", "no equals sign", "router.tau = 0"] {
            assert!(parse_pipeline_config(bad).is_err(), "{bad}");
        }
        assert!(matches!(parse_pipeline_config("model.d = 63\nmodel.heads = 1\nswr.enabled = true"), Err(Error::Core(_))));
    }

    #[test]
    fn scene_round_trip() {
        let s = SceneSpec::random(3, 11, 40);
        assert_eq!(parse_scene_spec(&scene_spec_text(&s)).unwrap(), s);
        assert!(matches!(parse_corpus_spec("scenes = 4\nframes = 9"), Ok(CorpusSpec::Random { scenes: 4, frames: 9, seed: 0 })));
    }
}
