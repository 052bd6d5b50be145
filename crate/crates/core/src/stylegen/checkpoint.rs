//! Generator checkpoints and the seam for externally trained generators.

use super::{Generator, GeneratorKind, GeneratorSpec, OracleGenerator, OracleSpec, StyleGenerator, SynthControl, SynthOutput};
use crate::autograd::{ParamStore, Scalar, Tape, Var};
use crate::error::{Error, Result};
use crate::io::Container;
use serde_json::json;
use std::path::Path;

pub const GENERATOR_CONTAINER: &str = "generator";

/// A generator restored from disk.
#[derive(Clone, Debug)]
pub enum AnyGenerator<T: Scalar> {
    Style(StyleGenerator<T>),
    Oracle(OracleGenerator),
}

impl<T: Scalar> AnyGenerator<T> {
    fn inner(&self) -> &dyn Generator<T> {
        match self {
            AnyGenerator::Style(g) => g,
            AnyGenerator::Oracle(g) => g,
        }
    }
}

impl<T: Scalar> Generator<T> for AnyGenerator<T> {
    fn spec(&self) -> &GeneratorSpec {
        self.inner().spec()
    }

    fn kind(&self) -> GeneratorKind {
        self.inner().kind()
    }

    fn mapping(&self, tape: &Tape<T>, z: Var) -> Var {
        self.inner().mapping(tape, z)
    }

    fn synthesis(&self, tape: &Tape<T>, styles: &[Var], noise: &[Var], ctl: &SynthControl<T>) -> SynthOutput {
        self.inner().synthesis(tape, styles, noise, ctl)
    }

    fn fingerprint(&self) -> String {
        self.inner().fingerprint()
    }

    fn weights(&self) -> Option<&ParamStore<T>> {
        self.inner().weights()
    }
}

/// Writes `gen` with a copy of the configuration that produced it; returns
/// the file hash.
pub fn save_generator<T: Scalar>(gen: &AnyGenerator<T>, path: &Path, config: serde_json::Value) -> Result<String> {
    let spec = gen.spec();
    let mut meta = json!({
        "kind": gen.kind(),
        "spec": spec,
        "w_mean": spec.w_mean,
        "fingerprint": gen.fingerprint(),
        "config": config,
    });
    if let AnyGenerator::Oracle(o) = gen {
        meta["oracle"] = serde_json::to_value(o.oracle_spec())?;
    }
    let mut c = Container::new(GENERATOR_CONTAINER, meta);
    if let Some(store) = gen.weights() {
        for (name, t) in store.iter() {
            c.push(name, t);
        }
    }
    c.save(path)
}

pub fn load_generator<T: Scalar>(path: &Path) -> Result<AnyGenerator<T>> {
    let c = Container::load(path)?;
    if c.kind != GENERATOR_CONTAINER {
        return Err(Error::format(path, format!("expected a generator checkpoint, found '{}'", c.kind)));
    }
    let kind: GeneratorKind = serde_json::from_value(c.meta["kind"].clone())
        .map_err(|e| Error::format(path, format!("generator kind: {e}")))?;
    let spec: GeneratorSpec = serde_json::from_value(c.meta["spec"].clone())
        .map_err(|e| Error::format(path, format!("generator spec: {e}")))?;
    let gen = match kind {
        GeneratorKind::Style => {
            let mut store = ParamStore::new();
            for (name, t) in &c.tensors {
                store.push(name.clone(), t.mapv(|x| crate::autograd::lit::<T>(x)));
            }
            AnyGenerator::Style(StyleGenerator::from_store(spec, store)?)
        }
        GeneratorKind::Oracle => {
            let o: OracleSpec = serde_json::from_value(c.meta["oracle"].clone())
                .map_err(|e| Error::format(path, format!("oracle spec: {e}")))?;
            AnyGenerator::Oracle(OracleGenerator::new(o)?)
        }
        GeneratorKind::External => {
            return Err(Error::format(path, "external generators are loaded through an adapter"));
        }
    };
    let stored = c.meta["fingerprint"].as_str().unwrap_or_default();
    let actual = gen.fingerprint();
    if stored != actual {
        return Err(Error::Fingerprint(format!(
            "{}: stored {stored}, recomputed {actual}",
            path.display()
        )));
    }
    Ok(gen)
}

/// Named feature tap in an external generator, mapped to a ladder index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerTap {
    pub name: String,
    pub layer: usize,
}

/// Loader for full-scale generators trained elsewhere. Implementations
/// translate foreign weights into a [`Generator`] and name the tensors that
/// feed each ladder position.
pub trait ExternalGeneratorLoader {
    fn describe(&self) -> String;

    fn layer_taps(&self) -> Vec<LayerTap>;

    fn load(&self, path: &Path) -> Result<Box<dyn Generator<f32>>>;
}
