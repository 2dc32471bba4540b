//! Line-oriented dataset manifests, one scene per line. Scenes are stored
//! as seeds plus their object lists, and pixels are regenerated on load.
//!
//! ```text
//! 0 1234 0.15 disc:3,4,10,10@0.7;square:20,20,8,8@0.9
//! 1 5678 0.15 square:1,30,12,12@0.65
//! ```

use std::fmt::Write as _;

use crate::error::{Error, Result};

use super::scene::{gen_scene, mix_seed, BBox, SceneObject, SceneSpec, ShapeClass, SyntheticScene};

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub seed: u64,
    pub noise_level: f64,
    pub objects: Vec<SceneObject>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Generates `count` scenes with seeds derived from `base_seed`.
    pub fn generate(count: usize, base_seed: u64, spec: &SceneSpec) -> Result<(Self, Vec<SyntheticScene>)> {
        if count == 0 {
            return Err(Error::InvalidArgument("scene count must be positive".into()));
        }
        let scenes: Vec<SyntheticScene> = (0..count as u64)
            .map(|i| gen_scene(mix_seed(base_seed, i), spec))
            .collect::<Result<_>>()?;
        Ok((Self::from_scenes(&scenes), scenes))
    }

    pub fn from_scenes(scenes: &[SyntheticScene]) -> Self {
        let entries = scenes
            .iter()
            .map(|s| ManifestEntry {
                seed: s.seed,
                noise_level: s.noise_level,
                objects: s.objects.clone(),
            })
            .collect();
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, e) in self.entries.iter().enumerate() {
            let objs: Vec<String> = e
                .objects
                .iter()
                .map(|o| {
                    format!(
                        "{}:{},{},{},{}@{}",
                        o.class.name(),
                        o.bbox.x,
                        o.bbox.y,
                        o.bbox.w,
                        o.bbox.h,
                        o.intensity
                    )
                })
                .collect();
            let _ = writeln!(s, "{i} {} {} {}", e.seed, e.noise_level, objs.join(";"));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
            let mut parts = line.split(' ');
            let mut field = || parts.next().unwrap_or("");
            let idx: usize = parse_num(field())?;
            if idx != i {
                return Err(Error::Format(format!("scene index {idx} out of order at line {}", i + 1)));
            }
            let seed = parse_num(field())?;
            let noise_level: f64 = parse_num(field())?;
            SceneSpec::with_noise(noise_level).validate()?;
            let objects = field()
                .split(';')
                .filter(|s| !s.is_empty())
                .map(parse_object)
                .collect::<Result<Vec<_>>>()?;
            if objects.is_empty() || parts.next().is_some() {
                return Err(Error::Format(format!("malformed scene record at line {}", i + 1)));
            }
            entries.push(ManifestEntry {
                seed,
                noise_level,
                objects,
            });
        }
        if entries.is_empty() {
            return Err(Error::Format("empty manifest".into()));
        }
        Ok(Self { entries })
    }

    /// Regenerates every scene from its seed and checks it against the
    /// recorded objects.
    pub fn scenes(&self) -> Result<Vec<SyntheticScene>> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let scene = gen_scene(e.seed, &SceneSpec::with_noise(e.noise_level))?;
                if scene.objects != e.objects {
                    return Err(Error::Format(format!(
                        "scene {i} (seed {}) does not regenerate the recorded objects",
                        e.seed
                    )));
                }
                Ok(scene)
            })
            .collect()
    }
}

fn parse_num<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Format(format!("cannot parse number {s:?}")))
}

fn parse_object(s: &str) -> Result<SceneObject> {
    let bad = || Error::Format(format!("bad object record {s:?}"));
    let (class, rest) = s.split_once(':').ok_or_else(bad)?;
    let (coords, intensity) = rest.split_once('@').ok_or_else(bad)?;
    let c: Vec<f64> = coords.split(',').map(parse_num).collect::<Result<_>>()?;
    if c.len() != 4 {
        return Err(bad());
    }
    Ok(SceneObject {
        class: class.parse::<ShapeClass>()?,
        bbox: BBox::new(c[0], c[1], c[2], c[3]),
        intensity: parse_num(intensity)?,
    })
}
