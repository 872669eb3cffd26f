//! The full network: both branches, gated fusion and the output head.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{GridNodeMap, SupportSet};
use crate::params::{ParamId, ParamStore, PointwiseMlp};
use crate::stg::{stg_bypass, stg_forward, BranchDims, StgParams};
use crate::sts::{sts_bypass, sts_forward, StsCity, StsParams};
use crate::temporal::TemporalPaths;
use crate::tensor::{read_stt_file, write_stt_file, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub window: usize,
    pub agcn_layers: usize,
    pub conv_layers: usize,
    pub dt_init: f64,
    pub f_geo: usize,
    pub f_sem: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 8,
            heads: 2,
            window: 3,
            agcn_layers: 2,
            conv_layers: 1,
            dt_init: 1.0,
            f_geo: crate::data::F_GEO,
            f_sem: crate::data::F_SEM,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Model(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.f_geo == 0 || self.f_sem == 0 {
            return Err(Error::Model("feature widths must be positive".into()));
        }
        if !(self.dt_init > 0.0) {
            return Err(Error::Model(format!("dt_init must be positive, got {}", self.dt_init)));
        }
        Ok(())
    }

    fn branch(&self, features: usize) -> BranchDims {
        BranchDims {
            features,
            d: self.d_model,
            heads: self.heads,
            window: self.window,
            dt_init: self.dt_init,
        }
    }
}

/// Which components are active. All `true` is the full model; each `false`
/// replaces that component by a shape-preserving bypass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Switches {
    pub stg: bool,
    pub sts: bool,
    pub stm: bool,
    pub lma: bool,
}

impl Default for Switches {
    fn default() -> Self {
        Switches {
            stg: true,
            sts: true,
            stm: true,
            lma: true,
        }
    }
}

impl Switches {
    /// Disables the named component (`stg`, `sts`, `stm` or `lma`).
    pub fn ablate(&mut self, name: &str) -> Result<()> {
        match name {
            "stg" => self.stg = false,
            "sts" => self.sts = false,
            "stm" => self.stm = false,
            "lma" => self.lma = false,
            other => {
                return Err(Error::Model(format!(
                    "unknown component `{other}`; expected stg, sts, stm or lma"
                )))
            }
        }
        Ok(())
    }

    fn paths(&self) -> TemporalPaths {
        TemporalPaths {
            local: self.lma,
            global: self.stm,
        }
    }
}

/// Learned node embeddings behind one city's adaptive relation.
#[derive(Clone, Debug, PartialEq)]
pub struct CityEmbedding<H> {
    pub city: String,
    pub e1: H,
    pub e2: H,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<H> {
    pub stg: StgParams<H>,
    pub sts: StsParams<H>,
    pub adaptive: Vec<CityEmbedding<H>>,
    /// Per-channel fusion gate logits `[D]`.
    pub gate: H,
    pub head: PointwiseMlp<H>,
}

impl<H: Copy> ModelParams<H> {
    pub fn map<U>(&self, f: &mut impl FnMut(H) -> U) -> ModelParams<U> {
        ModelParams {
            stg: self.stg.map(f),
            sts: self.sts.map(f),
            adaptive: self
                .adaptive
                .iter()
                .map(|c| CityEmbedding {
                    city: c.city.clone(),
                    e1: f(c.e1),
                    e2: f(c.e2),
                })
                .collect(),
            gate: f(self.gate),
            head: self.head.map(f),
        }
    }

    pub fn embedding(&self, city: &str) -> Option<&CityEmbedding<H>> {
        self.adaptive.iter().find(|c| c.city == city)
    }
}

/// Node count and adaptive rank of one city known to a model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CitySpec {
    pub name: String,
    pub nodes: usize,
    pub rank: usize,
}

/// A parameter store together with its layout.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub cities: Vec<CitySpec>,
    pub store: ParamStore,
    pub layout: ModelParams<ParamId>,
}

impl Model {
    /// Fresh parameters. Adaptive embeddings start from each city's
    /// road-prior factorization.
    pub fn new(config: ModelConfig, cities: &[(&str, &SupportSet)], seed: u64) -> Result<Self> {
        let specs: Vec<CitySpec> = cities
            .iter()
            .map(|(name, s)| CitySpec {
                name: name.to_string(),
                nodes: s.n(),
                rank: s.adaptive_init()[0].0.shape()[1],
            })
            .collect();
        let mut model = Model::skeleton(config, specs, seed)?;
        for ((_, s), emb) in cities.iter().zip(&model.layout.adaptive) {
            let (e1, e2) = &s.adaptive_init()[0];
            model.store.set(emb.e1, e1.clone())?;
            model.store.set(emb.e2, e2.clone())?;
        }
        Ok(model)
    }

    /// Randomly initialized layout with zero adaptive embeddings.
    pub fn skeleton(config: ModelConfig, cities: Vec<CitySpec>, seed: u64) -> Result<Self> {
        config.validate()?;
        for (i, c) in cities.iter().enumerate() {
            if c.nodes == 0 || c.rank == 0 || c.rank > c.nodes {
                return Err(Error::Model(format!(
                    "city {} has {} nodes and adaptive rank {}",
                    c.name, c.nodes, c.rank
                )));
            }
            let safe = |ch: char| ch.is_ascii_alphanumeric() || ch == '-' || ch == '_';
            if c.name.is_empty() || !c.name.chars().all(safe) {
                return Err(Error::Model(format!(
                    "city name `{}` must be non-empty ASCII letters, digits, `-` or `_`",
                    c.name
                )));
            }
            if cities[..i].iter().any(|o| o.name == c.name) {
                return Err(Error::Model(format!("duplicate city name {}", c.name)));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let stg = StgParams::register(&mut store, config.branch(config.f_geo), config.conv_layers, &mut rng);
        let sts = StsParams::register(&mut store, config.branch(config.f_sem), config.agcn_layers, &mut rng);
        let adaptive = cities
            .iter()
            .map(|c| CityEmbedding {
                city: c.name.clone(),
                e1: store.register(format!("sts.adaptive.{}.e1", c.name), Tensor::zeros(&[c.nodes, c.rank])),
                e2: store.register(format!("sts.adaptive.{}.e2", c.name), Tensor::zeros(&[c.nodes, c.rank])),
            })
            .collect();
        let gate = store.register("fusion.gate", Tensor::zeros(&[d]));
        let head = PointwiseMlp::register(&mut store, "head", (d, d, 1), &mut rng);
        Ok(Model {
            config,
            cities,
            store,
            layout: ModelParams {
                stg,
                sts,
                adaptive,
                gate,
                head,
            },
        })
    }

    /// Records every parameter on `tape` and returns the bound layout.
    pub fn bind(&self, tape: &mut Tape) -> ModelParams<Var> {
        let vars = self.store.bind(tape);
        self.layout.map(&mut |id: ParamId| vars[id.0])
    }

    /// Tape-free forward pass.
    pub fn predict(&self, inputs: &[CityInput], switches: Switches) -> Result<Vec<RiskMap>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let outs = model_forward(&mut tape, inputs, &p, switches)?;
        inputs
            .iter()
            .zip(outs)
            .map(|(c, v)| RiskMap::new(c.name, tape.value(v), c.mask))
            .collect()
    }

    pub fn save(&self, dir: &Path, extra: serde_json::Value) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut shapes = serde_json::Map::new();
        for (name, t) in self.store.iter() {
            write_stt_file(t, dir.join(format!("{name}.stt")))?;
            shapes.insert(name.to_string(), serde_json::json!(t.shape()));
        }
        let manifest = serde_json::json!({
            "config": self.config,
            "cities": self.cities,
            "parameters": shapes,
            "extra": extra,
        });
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Loads a checkpoint written by [`Model::save`], returning the model and
    /// the manifest's `extra` value.
    pub fn load(dir: &Path) -> Result<(Self, serde_json::Value)> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        #[derive(Deserialize)]
        struct Manifest {
            config: ModelConfig,
            cities: Vec<CitySpec>,
            #[serde(default)]
            extra: serde_json::Value,
        }
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        let mut model = Model::skeleton(m.config, m.cities, 0)?;
        let ids: Vec<ParamId> = model.store.ids().collect();
        for id in ids {
            let file = dir.join(format!("{}.stt", model.store.name(id)));
            let value = read_stt_file(&file)?;
            model.store.set(id, value).map_err(|e| Error::Model(format!("{}: {e}", file.display())))?;
        }
        Ok((model, m.extra))
    }
}

/// One city's model input for a single sample.
#[derive(Clone, Copy, Debug)]
pub struct CityInput<'a> {
    pub name: &'a str,
    /// `[T, W*H, F_geo]`.
    pub x_geo: &'a Tensor,
    /// `[T, N, F_sem]`.
    pub x_sem: &'a Tensor,
    pub supports: &'a SupportSet,
    pub map: &'a GridNodeMap,
    /// Valid cells, row-major over `(W, H)`.
    pub mask: &'a [bool],
}

/// `sigmoid(g) * geo + (1 - sigmoid(g)) * sem` with `g` broadcast over cells.
pub fn gated_fusion(tape: &mut Tape, y_geo: Var, y_sem: Var, gate_logits: Var) -> Result<Var> {
    if tape.shape(y_geo) != tape.shape(y_sem) || tape.shape(y_geo).len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "gated_fusion",
            lhs: tape.shape(y_geo).to_vec(),
            rhs: tape.shape(y_sem).to_vec(),
        });
    }
    let d = tape.shape(y_geo)[0];
    if tape.shape(gate_logits) != [d] {
        return Err(Error::Model(format!(
            "gate logits {:?} do not match {d} channels",
            tape.shape(gate_logits)
        )));
    }
    let logits = tape.reshape(gate_logits, &[d, 1, 1])?;
    let g = tape.sigmoid(logits);
    let neg = tape.scale(g, -1.0);
    let rest = tape.add_scalar(neg, 1.0);
    let a = tape.mul(g, y_geo)?;
    let b = tape.mul(rest, y_sem)?;
    tape.add(a, b)
}

/// Per-cell channel MLP from `[D, W, H]` to `[W, H]`.
pub fn output_head(tape: &mut Tape, y: Var, p: &PointwiseMlp<Var>) -> Result<Var> {
    let (w, h) = match tape.shape(y) {
        [_, w, h] => (*w, *h),
        other => return Err(Error::Model(format!("head input must be [D,W,H], got {other:?}"))),
    };
    let cells = tape.permute(y, &[1, 2, 0])?;
    let out = p.forward(tape, cells)?;
    tape.reshape(out, &[w, h])
}

/// Forward pass for all cities of one sample. Returns raw `[W_c, H_c]`
/// predictions (not yet masked), one per input city.
pub fn model_forward(
    tape: &mut Tape,
    inputs: &[CityInput],
    p: &ModelParams<Var>,
    switches: Switches,
) -> Result<Vec<Var>> {
    if inputs.is_empty() {
        return Err(Error::Model("model_forward needs at least one city".into()));
    }
    let mut sem_cities = Vec::with_capacity(inputs.len());
    let mut geo = Vec::with_capacity(inputs.len());
    for c in inputs {
        let (w, h) = (c.map.w, c.map.h);
        if c.mask.len() != w * h {
            return Err(Error::Model(format!(
                "{}: mask has {} cells, grid is {w}x{h}",
                c.name,
                c.mask.len()
            )));
        }
        let emb = p
            .embedding(c.name)
            .ok_or_else(|| Error::Model(format!("no adaptive embeddings for city {}", c.name)))?;
        let x_geo = tape.constant(c.x_geo.clone());
        let x_sem = tape.constant(c.x_sem.clone());
        geo.push(if switches.stg {
            stg_forward(tape, x_geo, w, h, &p.stg, switches.paths())?
        } else {
            stg_bypass(tape, x_geo, w, h, &p.stg)?
        });
        sem_cities.push(StsCity {
            x: x_sem,
            supports: c.supports,
            map: c.map,
            e1: emb.e1,
            e2: emb.e2,
        });
    }
    let sem = if switches.sts {
        sts_forward(tape, &sem_cities, &p.sts, switches.paths())?
    } else {
        sts_bypass(tape, &sem_cities, &p.sts)?
    };
    geo.into_iter()
        .zip(sem)
        .map(|(g, s)| {
            let fused = gated_fusion(tape, g, s, p.gate)?;
            output_head(tape, fused, &p.head)
        })
        .collect()
}

/// Predicted risk intensity for one city; invalid cells hold 0.
#[derive(Clone, Debug, PartialEq)]
pub struct RiskMap {
    pub city: String,
    /// `[W, H]`.
    pub values: Tensor,
    pub mask: Vec<bool>,
}

impl RiskMap {
    pub fn new(city: &str, raw: &Tensor, mask: &[bool]) -> Result<Self> {
        if raw.rank() != 2 || raw.numel() != mask.len() {
            return Err(Error::Model(format!(
                "risk map {:?} does not match a mask of {} cells",
                raw.shape(),
                mask.len()
            )));
        }
        let data = raw
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &ok)| if ok { v } else { 0.0 })
            .collect();
        Ok(RiskMap {
            city: city.to_string(),
            values: Tensor::new(raw.shape().to_vec(), data)?,
            mask: mask.to_vec(),
        })
    }

    pub fn w(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn h(&self) -> usize {
        self.values.shape()[1]
    }
}
