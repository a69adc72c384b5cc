//! The five networks trained together, and their on-disk model directory.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{TensorRole, Visitor};
use crate::nets::checkpoint::{load_network, save_visited};
use crate::nets::{build_network, Discriminator, Generator, Network, NetworkName, NetworkSpec, Regressor};
use crate::qc::ChannelStats;
use crate::tensor::Scalar;

/// One spec per network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpecs {
    pub gen_vis: NetworkSpec,
    pub gen_pmw: NetworkSpec,
    pub disc_vis: NetworkSpec,
    pub disc_pmw: NetworkSpec,
    pub regressor: NetworkSpec,
}

impl ModelSpecs {
    fn from_fn(f: impl Fn(NetworkName) -> NetworkSpec) -> Self {
        ModelSpecs {
            gen_vis: f(NetworkName::GenVis),
            gen_pmw: f(NetworkName::GenPmw),
            disc_vis: f(NetworkName::DiscVis),
            disc_pmw: f(NetworkName::DiscPmw),
            regressor: f(NetworkName::Regressor),
        }
    }

    /// Published architectures with hidden widths divided by `width_divisor`.
    pub fn full(width_divisor: usize) -> Self {
        Self::from_fn(|n| NetworkSpec::full(n).with_width_divisor(width_divisor))
    }

    /// Small architectures for 8x8 inputs.
    pub fn toy() -> Self {
        Self::from_fn(NetworkSpec::toy)
    }

    pub fn get(&self, name: NetworkName) -> &NetworkSpec {
        match name {
            NetworkName::GenVis => &self.gen_vis,
            NetworkName::GenPmw => &self.gen_pmw,
            NetworkName::DiscVis => &self.disc_vis,
            NetworkName::DiscPmw => &self.disc_pmw,
            NetworkName::Regressor => &self.regressor,
        }
    }

    pub fn validate(&self, image_size: usize) -> Result<()> {
        for n in NetworkName::ALL {
            let s = self.get(n);
            if s.name != n {
                return Err(Error::Config(format!("spec for {n} is named {}", s.name)));
            }
            s.validate()?;
            s.check_image_size(image_size)?;
        }
        Ok(())
    }
}

/// Seed of network `name` for a master seed.
pub(crate) fn network_seed(seed: u64, name: NetworkName) -> u64 {
    let i = NetworkName::ALL.iter().position(|&n| n == name).expect("known network");
    seed.wrapping_add(i as u64)
}

pub struct Models<T> {
    pub gen_vis: Generator<T>,
    pub gen_pmw: Generator<T>,
    pub disc_vis: Discriminator<T>,
    pub disc_pmw: Discriminator<T>,
    pub regressor: Regressor<T>,
}

impl<T: Scalar> Models<T> {
    pub fn build(specs: &ModelSpecs, image_size: usize, seed: u64) -> Result<Self> {
        specs.validate(image_size)?;
        let net = |n: NetworkName| build_network::<T>(specs.get(n), image_size, network_seed(seed, n));
        Ok(Models {
            gen_vis: net(NetworkName::GenVis)?.into_generator()?,
            gen_pmw: net(NetworkName::GenPmw)?.into_generator()?,
            disc_vis: net(NetworkName::DiscVis)?.into_discriminator()?,
            disc_pmw: net(NetworkName::DiscPmw)?.into_discriminator()?,
            regressor: net(NetworkName::Regressor)?.into_regressor()?,
        })
    }

    pub fn specs(&self) -> ModelSpecs {
        ModelSpecs {
            gen_vis: self.gen_vis.spec().clone(),
            gen_pmw: self.gen_pmw.spec().clone(),
            disc_vis: self.disc_vis.spec().clone(),
            disc_pmw: self.disc_pmw.spec().clone(),
            regressor: self.regressor.spec().clone(),
        }
    }

    pub fn image_size(&self) -> usize {
        self.regressor.image_size()
    }

    pub fn visit(&mut self, name: NetworkName, f: &mut Visitor<'_, T>) {
        match name {
            NetworkName::GenVis => self.gen_vis.visit(f),
            NetworkName::GenPmw => self.gen_pmw.visit(f),
            NetworkName::DiscVis => self.disc_vis.visit(f),
            NetworkName::DiscPmw => self.disc_pmw.visit(f),
            NetworkName::Regressor => self.regressor.visit(f),
        }
    }

    pub fn set_trainable(&mut self, name: NetworkName, trainable: bool) {
        match name {
            NetworkName::GenVis => self.gen_vis.trainable = trainable,
            NetworkName::GenPmw => self.gen_pmw.trainable = trainable,
            NetworkName::DiscVis => self.disc_vis.trainable = trainable,
            NetworkName::DiscPmw => self.disc_pmw.trainable = trainable,
            NetworkName::Regressor => self.regressor.trainable = trainable,
        }
    }

    /// Replaces a discriminator with a freshly initialized one.
    pub fn reinit_discriminator(&mut self, name: NetworkName, seed: u64) -> Result<()> {
        let spec = self.specs().get(name).clone();
        let d = build_network::<T>(&spec, self.image_size(), seed)?.into_discriminator()?;
        match name {
            NetworkName::DiscVis => self.disc_vis = d,
            NetworkName::DiscPmw => self.disc_pmw = d,
            other => return Err(Error::Config(format!("{other} is not a discriminator"))),
        }
        Ok(())
    }

    /// Every tensor value of one network, trainable and buffer, by name.
    pub fn snapshot(&mut self, name: NetworkName) -> Vec<(String, Vec<T>)> {
        let mut out = Vec::new();
        self.visit(name, &mut |n, _, p| out.push((n.to_string(), p.value.clone())));
        out
    }

    pub fn param_count(&mut self, name: NetworkName) -> usize {
        let mut n = 0;
        self.visit(name, &mut |_, role, p| {
            if role == TensorRole::Trainable {
                n += p.len();
            }
        });
        n
    }

    /// Consumes the models into their generic network form.
    pub fn into_networks(self) -> [Network<T>; 5] {
        [
            Network::Generator(self.gen_vis),
            Network::Generator(self.gen_pmw),
            Network::Discriminator(self.disc_vis),
            Network::Discriminator(self.disc_pmw),
            Network::Regressor(self.regressor),
        ]
    }

    fn from_networks(nets: [Network<T>; 5]) -> Result<Self> {
        let [gv, gp, dv, dp, r] = nets;
        Ok(Models {
            gen_vis: gv.into_generator()?,
            gen_pmw: gp.into_generator()?,
            disc_vis: dv.into_discriminator()?,
            disc_pmw: dp.into_discriminator()?,
            regressor: r.into_regressor()?,
        })
    }

    /// Writes `<name>.ckpt` for every network into `dir`.
    pub fn save_dir(&mut self, dir: &Path, stage: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let specs = self.specs();
        let size = self.image_size();
        for n in NetworkName::ALL {
            let path = dir.join(format!("{n}.ckpt"));
            save_visited(&path, specs.get(n), size, stage, |f| self.visit(n, f))?;
        }
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut nets = Vec::with_capacity(5);
        let mut size = None;
        for n in NetworkName::ALL {
            let path = dir.join(format!("{n}.ckpt"));
            let (net, meta) = load_network::<T>(&path)?;
            if meta.spec.name != n {
                return Err(Error::Checkpoint {
                    path,
                    msg: format!("holds {} instead of {n}", meta.spec.name),
                });
            }
            if *size.get_or_insert(meta.image_size) != meta.image_size {
                return Err(Error::Checkpoint {
                    path,
                    msg: format!("image size {} differs from the other networks", meta.image_size),
                });
            }
            nets.push(net);
        }
        let nets: [Network<T>; 5] = nets.try_into().map_err(|_| Error::Config("five networks".into()))?;
        Self::from_networks(nets)
    }
}

/// Trained networks plus the channel scaling they were trained with; all
/// the operational path needs.
pub struct ModelBundle<T> {
    pub models: Models<T>,
    pub stats: ChannelStats,
}

pub const STATS_FILE: &str = "stats.json";

impl<T: Scalar> ModelBundle<T> {
    pub fn save(&mut self, dir: &Path, stage: &str) -> Result<()> {
        write_bundle(dir, &mut self.models, &self.stats, stage)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let models = Models::load_dir(dir)?;
        let path = dir.join(STATS_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(ModelBundle {
            models,
            stats: serde_json::from_str(&text)?,
        })
    }
}

pub(crate) fn write_bundle<T: Scalar>(dir: &Path, models: &mut Models<T>, stats: &ChannelStats, stage: &str) -> Result<()> {
    models.save_dir(dir, stage)?;
    let path = dir.join(STATS_FILE);
    let json = serde_json::to_string_pretty(stats)?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}
