//! Experiment configuration: a flat sections + key=value text format.
//!
//! Parsing is strict: unknown sections or keys, duplicate keys, and
//! malformed values are all errors, and nothing runs until the whole file
//! validates. `serialize` emits the canonical form (fixed section and key
//! order); the bundled experiment configs are stored in exactly that form,
//! so parse -> serialize reproduces them byte for byte.

use std::collections::HashSet;

use crate::decomp;
use crate::layers::{
    DenseConvLayer, DenseLinearLayer, Layer, LowRankLinearLayer, TTLinearLayer, Tucker2ConvLayer,
};
use crate::masks::MaskSet;
use crate::model::TensorizedModel;
use crate::rng::Rng;
use crate::trainer::TrainConfig;
use crate::{DenseTensor, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSpec {
    Mnist {
        dir: String,
    },
    /// Planted low-rank classification data; test split uses `data_seed + 1`.
    SyntheticLowRank {
        classes: usize,
        features: usize,
        true_rank: usize,
        samples: usize,
        noise: f64,
        data_seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    TTLinear {
        row_dims: Vec<usize>,
        col_dims: Vec<usize>,
        ranks: Vec<usize>,
    },
    LowRank {
        rows: usize,
        cols: usize,
        rank: usize,
    },
    Tucker2Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        r1: usize,
        r2: usize,
        stride: usize,
        padding: usize,
    },
    Dense {
        rows: usize,
        cols: usize,
    },
    DenseConv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool2,
    Flatten,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub input_dims: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub output_dir: String,
}

struct Section {
    name: String,
    line: usize,
    entries: Vec<(String, String, usize)>,
}

fn parse_sections(text: &str) -> Result<Vec<Section>> {
    let mut sections: Vec<Section> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| Error::Config(format!("line {}: unterminated section", lineno + 1)))?
                .trim()
                .to_string();
            sections.push(Section {
                name,
                line: lineno + 1,
                entries: Vec::new(),
            });
        } else {
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            let section = sections.last_mut().ok_or_else(|| {
                Error::Config(format!("line {}: entry before any section", lineno + 1))
            })?;
            section.entries.push((
                key.trim().to_string(),
                value.trim().to_string(),
                lineno + 1,
            ));
        }
    }
    Ok(sections)
}

struct Fields {
    section: String,
    entries: Vec<(String, String, usize)>,
    used: HashSet<String>,
}

impl Fields {
    fn new(section: &Section) -> Result<Self> {
        let mut seen = HashSet::new();
        for (key, _, line) in &section.entries {
            if !seen.insert(key.clone()) {
                return Err(Error::Config(format!(
                    "line {line}: duplicate key '{key}' in [{}]",
                    section.name
                )));
            }
        }
        Ok(Fields {
            section: section.name.clone(),
            entries: section.entries.clone(),
            used: HashSet::new(),
        })
    }

    fn raw(&mut self, key: &str) -> Option<String> {
        self.used.insert(key.to_string());
        self.entries
            .iter()
            .find(|(k, _, _)| k == key)
            .map(|(_, v, _)| v.clone())
    }

    fn require(&mut self, key: &str) -> Result<String> {
        self.raw(key).ok_or_else(|| {
            Error::Config(format!("[{}] is missing key '{key}'", self.section))
        })
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let value = self.require(key)?;
        value.parse().map_err(|_| {
            Error::Config(format!(
                "[{}] key '{key}': cannot parse '{value}'",
                self.section
            ))
        })
    }

    fn parse_or<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        match self.raw(key) {
            None => Ok(default),
            Some(value) => value.parse().map_err(|_| {
                Error::Config(format!(
                    "[{}] key '{key}': cannot parse '{value}'",
                    self.section
                ))
            }),
        }
    }

    fn parse_list(&mut self, key: &str) -> Result<Vec<usize>> {
        let value = self.require(key)?;
        value
            .split(',')
            .map(|s| {
                s.trim().parse().map_err(|_| {
                    Error::Config(format!(
                        "[{}] key '{key}': bad list entry '{s}'",
                        self.section
                    ))
                })
            })
            .collect()
    }

    fn finish(self) -> Result<()> {
        for (key, _, line) in &self.entries {
            if !self.used.contains(key) {
                return Err(Error::Config(format!(
                    "line {line}: unknown key '{key}' in [{}]",
                    self.section
                )));
            }
        }
        Ok(())
    }
}

pub fn parse(text: &str) -> Result<ExperimentConfig> {
    let sections = parse_sections(text)?;
    let mut dataset: Option<DatasetSpec> = None;
    let mut input_dims: Option<Vec<usize>> = None;
    let mut layers: Vec<LayerSpec> = Vec::new();
    let mut train: Option<TrainConfig> = None;
    let mut output_dir: Option<String> = None;

    for section in &sections {
        let mut f = Fields::new(section)?;
        match section.name.as_str() {
            "dataset" => {
                if dataset.is_some() {
                    return Err(Error::Config(format!(
                        "line {}: repeated [dataset] section",
                        section.line
                    )));
                }
                let kind = f.require("kind")?;
                dataset = Some(match kind.as_str() {
                    "mnist" => DatasetSpec::Mnist {
                        dir: f.require("dir")?,
                    },
                    "synthetic_lowrank" => DatasetSpec::SyntheticLowRank {
                        classes: f.parse("classes")?,
                        features: f.parse("features")?,
                        true_rank: f.parse("true_rank")?,
                        samples: f.parse("samples")?,
                        noise: f.parse("noise")?,
                        data_seed: f.parse("data_seed")?,
                    },
                    other => {
                        return Err(Error::Config(format!("unknown dataset kind '{other}'")))
                    }
                });
            }
            "model" => {
                if input_dims.is_some() {
                    return Err(Error::Config(format!(
                        "line {}: repeated [model] section",
                        section.line
                    )));
                }
                input_dims = Some(f.parse_list("input_dims")?);
            }
            "layer" => {
                let kind = f.require("kind")?;
                let layer = match kind.as_str() {
                    "tt_linear" => LayerSpec::TTLinear {
                        row_dims: f.parse_list("row_dims")?,
                        col_dims: f.parse_list("col_dims")?,
                        ranks: f.parse_list("ranks")?,
                    },
                    "low_rank" => LayerSpec::LowRank {
                        rows: f.parse("rows")?,
                        cols: f.parse("cols")?,
                        rank: f.parse("rank")?,
                    },
                    "tucker2_conv" => LayerSpec::Tucker2Conv {
                        in_channels: f.parse("in_channels")?,
                        out_channels: f.parse("out_channels")?,
                        kernel: f.parse("kernel")?,
                        r1: f.parse("r1")?,
                        r2: f.parse("r2")?,
                        stride: f.parse_or("stride", 1)?,
                        padding: f.parse_or("padding", 0)?,
                    },
                    "dense" => LayerSpec::Dense {
                        rows: f.parse("rows")?,
                        cols: f.parse("cols")?,
                    },
                    "dense_conv" => LayerSpec::DenseConv {
                        in_channels: f.parse("in_channels")?,
                        out_channels: f.parse("out_channels")?,
                        kernel: f.parse("kernel")?,
                        stride: f.parse_or("stride", 1)?,
                        padding: f.parse_or("padding", 0)?,
                    },
                    "relu" => LayerSpec::Relu,
                    "max_pool2" => LayerSpec::MaxPool2,
                    "flatten" => LayerSpec::Flatten,
                    other => return Err(Error::Config(format!("unknown layer kind '{other}'"))),
                };
                layers.push(layer);
            }
            "train" => {
                if train.is_some() {
                    return Err(Error::Config(format!(
                        "line {}: repeated [train] section",
                        section.line
                    )));
                }
                let d = TrainConfig::default();
                let cfg = TrainConfig {
                    pi: f.parse("pi")?,
                    alpha: f.parse("alpha")?,
                    logit_init_scale: f.parse_or("logit_init_scale", d.logit_init_scale)?,
                    tau_start: f.parse_or("tau_start", d.tau_start)?,
                    tau_end: f.parse_or("tau_end", d.tau_end)?,
                    warmup_epochs: f.parse_or("warmup_epochs", d.warmup_epochs)?,
                    learning_rate: f.parse_or("learning_rate", d.learning_rate)?,
                    adam_beta1: f.parse_or("adam_beta1", d.adam_beta1)?,
                    adam_beta2: f.parse_or("adam_beta2", d.adam_beta2)?,
                    adam_eps: f.parse_or("adam_eps", d.adam_eps)?,
                    epochs: f.parse("epochs")?,
                    batch_size: f.parse_or("batch_size", d.batch_size)?,
                    seed: f.parse_or("seed", d.seed)?,
                    scale_data_term: f.parse_or("scale_data_term", d.scale_data_term)?,
                    core_prior_var: f.parse_or("core_prior_var", d.core_prior_var)?,
                };
                cfg.validate()?;
                train = Some(cfg);
            }
            "output" => {
                if output_dir.is_some() {
                    return Err(Error::Config(format!(
                        "line {}: repeated [output] section",
                        section.line
                    )));
                }
                output_dir = Some(f.require("dir")?);
            }
            other => {
                return Err(Error::Config(format!(
                    "line {}: unknown section [{other}]",
                    section.line
                )))
            }
        }
        f.finish()?;
    }

    let config = ExperimentConfig {
        dataset: dataset.ok_or_else(|| Error::Config("missing [dataset] section".into()))?,
        model: ModelSpec {
            input_dims: input_dims
                .ok_or_else(|| Error::Config("missing [model] section".into()))?,
            layers,
        },
        train: train.ok_or_else(|| Error::Config("missing [train] section".into()))?,
        output_dir: output_dir.unwrap_or_else(|| "out".to_string()),
    };
    if config.model.layers.is_empty() {
        return Err(Error::Config("config defines no layers".into()));
    }
    Ok(config)
}

fn list(xs: &[usize]) -> String {
    xs.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Canonical text form; `parse(serialize(c)) == c`.
pub fn serialize(config: &ExperimentConfig) -> String {
    let mut out = String::new();
    out.push_str("[dataset]\n");
    match &config.dataset {
        DatasetSpec::Mnist { dir } => {
            out.push_str("kind = mnist\n");
            out.push_str(&format!("dir = {dir}\n"));
        }
        DatasetSpec::SyntheticLowRank {
            classes,
            features,
            true_rank,
            samples,
            noise,
            data_seed,
        } => {
            out.push_str("kind = synthetic_lowrank\n");
            out.push_str(&format!("classes = {classes}\n"));
            out.push_str(&format!("features = {features}\n"));
            out.push_str(&format!("true_rank = {true_rank}\n"));
            out.push_str(&format!("samples = {samples}\n"));
            out.push_str(&format!("noise = {noise}\n"));
            out.push_str(&format!("data_seed = {data_seed}\n"));
        }
    }
    out.push_str("\n[model]\n");
    out.push_str(&format!("input_dims = {}\n", list(&config.model.input_dims)));
    for layer in &config.model.layers {
        out.push_str("\n[layer]\n");
        match layer {
            LayerSpec::TTLinear {
                row_dims,
                col_dims,
                ranks,
            } => {
                out.push_str("kind = tt_linear\n");
                out.push_str(&format!("row_dims = {}\n", list(row_dims)));
                out.push_str(&format!("col_dims = {}\n", list(col_dims)));
                out.push_str(&format!("ranks = {}\n", list(ranks)));
            }
            LayerSpec::LowRank { rows, cols, rank } => {
                out.push_str("kind = low_rank\n");
                out.push_str(&format!("rows = {rows}\n"));
                out.push_str(&format!("cols = {cols}\n"));
                out.push_str(&format!("rank = {rank}\n"));
            }
            LayerSpec::Tucker2Conv {
                in_channels,
                out_channels,
                kernel,
                r1,
                r2,
                stride,
                padding,
            } => {
                out.push_str("kind = tucker2_conv\n");
                out.push_str(&format!("in_channels = {in_channels}\n"));
                out.push_str(&format!("out_channels = {out_channels}\n"));
                out.push_str(&format!("kernel = {kernel}\n"));
                out.push_str(&format!("r1 = {r1}\n"));
                out.push_str(&format!("r2 = {r2}\n"));
                out.push_str(&format!("stride = {stride}\n"));
                out.push_str(&format!("padding = {padding}\n"));
            }
            LayerSpec::Dense { rows, cols } => {
                out.push_str("kind = dense\n");
                out.push_str(&format!("rows = {rows}\n"));
                out.push_str(&format!("cols = {cols}\n"));
            }
            LayerSpec::DenseConv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                out.push_str("kind = dense_conv\n");
                out.push_str(&format!("in_channels = {in_channels}\n"));
                out.push_str(&format!("out_channels = {out_channels}\n"));
                out.push_str(&format!("kernel = {kernel}\n"));
                out.push_str(&format!("stride = {stride}\n"));
                out.push_str(&format!("padding = {padding}\n"));
            }
            LayerSpec::Relu => out.push_str("kind = relu\n"),
            LayerSpec::MaxPool2 => out.push_str("kind = max_pool2\n"),
            LayerSpec::Flatten => out.push_str("kind = flatten\n"),
        }
    }
    let t = &config.train;
    out.push_str("\n[train]\n");
    out.push_str(&format!("pi = {}\n", t.pi));
    out.push_str(&format!("alpha = {}\n", t.alpha));
    out.push_str(&format!("logit_init_scale = {}\n", t.logit_init_scale));
    out.push_str(&format!("tau_start = {}\n", t.tau_start));
    out.push_str(&format!("tau_end = {}\n", t.tau_end));
    out.push_str(&format!("warmup_epochs = {}\n", t.warmup_epochs));
    out.push_str(&format!("learning_rate = {}\n", t.learning_rate));
    out.push_str(&format!("adam_beta1 = {}\n", t.adam_beta1));
    out.push_str(&format!("adam_beta2 = {}\n", t.adam_beta2));
    out.push_str(&format!("adam_eps = {}\n", t.adam_eps));
    out.push_str(&format!("epochs = {}\n", t.epochs));
    out.push_str(&format!("batch_size = {}\n", t.batch_size));
    out.push_str(&format!("seed = {}\n", t.seed));
    out.push_str(&format!("scale_data_term = {}\n", t.scale_data_term));
    out.push_str(&format!("core_prior_var = {}\n", t.core_prior_var));
    out.push_str("\n[output]\n");
    out.push_str(&format!("dir = {}\n", config.output_dir));
    out
}

/// Build a freshly initialized model from the spec. Parameter and mask
/// initialization consume `rng` in layer order, so a seed pins the model.
pub fn build_model(
    spec: &ModelSpec,
    train: &TrainConfig,
    rng: &mut Rng,
) -> Result<TensorizedModel> {
    let mut masks = MaskSet::new();
    let mut layers = Vec::with_capacity(spec.layers.len());
    for (i, layer_spec) in spec.layers.iter().enumerate() {
        let layer = match layer_spec {
            LayerSpec::TTLinear {
                row_dims,
                col_dims,
                ranks,
            } => {
                let weights = decomp::init_glorot_tt_matrix(row_dims, col_dims, ranks, rng)?;
                let mut mask_ids = Vec::with_capacity(ranks.len());
                for (k, &r) in ranks.iter().enumerate() {
                    mask_ids.push(masks.add_mask(
                        format!("layer{i}.r{}", k + 1),
                        r,
                        train.alpha,
                        train.logit_init_scale,
                        rng,
                    )?);
                }
                Layer::TTLinear(TTLinearLayer {
                    bias: DenseTensor::zeros(&[weights.nrows()]),
                    weights,
                    mask_ids,
                })
            }
            LayerSpec::LowRank { rows, cols, rank } => {
                let weights = decomp::init_kaiming_low_rank(*rows, *cols, *rank, rng)?;
                let mask_id = masks.add_mask(
                    format!("layer{i}.r"),
                    *rank,
                    train.alpha,
                    train.logit_init_scale,
                    rng,
                )?;
                Layer::LowRank(LowRankLinearLayer {
                    bias: DenseTensor::zeros(&[*rows]),
                    weights,
                    mask_id,
                })
            }
            LayerSpec::Tucker2Conv {
                in_channels,
                out_channels,
                kernel,
                r1,
                r2,
                stride,
                padding,
            } => {
                let weights = decomp::init_kaiming_tucker2(
                    *in_channels,
                    *out_channels,
                    *kernel,
                    *r1,
                    *r2,
                    rng,
                )?;
                let m1 = masks.add_mask(
                    format!("layer{i}.r1"),
                    *r1,
                    train.alpha,
                    train.logit_init_scale,
                    rng,
                )?;
                let m2 = masks.add_mask(
                    format!("layer{i}.r2"),
                    *r2,
                    train.alpha,
                    train.logit_init_scale,
                    rng,
                )?;
                Layer::Tucker2Conv(Tucker2ConvLayer {
                    bias: DenseTensor::zeros(&[*out_channels]),
                    weights,
                    stride: *stride,
                    padding: *padding,
                    mask_ids: [m1, m2],
                })
            }
            LayerSpec::Dense { rows, cols } => Layer::Dense(DenseLinearLayer {
                weight: decomp::init_kaiming_dense(*rows, *cols, rng)?,
                bias: DenseTensor::zeros(&[*rows]),
            }),
            LayerSpec::DenseConv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => Layer::DenseConv(DenseConvLayer {
                kernel: decomp::init_kaiming_conv(*in_channels, *out_channels, *kernel, rng)?,
                bias: DenseTensor::zeros(&[*out_channels]),
                stride: *stride,
                padding: *padding,
            }),
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::MaxPool2 => Layer::MaxPool2,
            LayerSpec::Flatten => Layer::Flatten,
        };
        layers.push(layer);
    }
    TensorizedModel::new(layers, masks, spec.input_dims.clone())
}

/// Instantiate the dataset a config names; returns (train, test).
pub fn load_dataset(
    spec: &DatasetSpec,
) -> Result<(crate::data::LabeledDataset, crate::data::LabeledDataset)> {
    match spec {
        DatasetSpec::Mnist { dir } => crate::data::load_mnist(std::path::Path::new(dir)),
        DatasetSpec::SyntheticLowRank {
            classes,
            features,
            true_rank,
            samples,
            noise,
            data_seed,
        } => {
            // One generator call keeps the planted matrix shared between
            // the splits; the tail quarter becomes the test set.
            let test_samples = (*samples / 4).max(1);
            let (all, _) = crate::data::synthetic_lowrank(
                *classes,
                *features,
                *true_rank,
                *samples + test_samples,
                *noise,
                *data_seed,
            )?;
            let train_idx: Vec<usize> = (0..*samples).collect();
            let test_idx: Vec<usize> = (*samples..*samples + test_samples).collect();
            let (train_x, train_y) = all.batch(&train_idx);
            let (test_x, test_y) = all.batch(&test_idx);
            Ok((
                crate::data::LabeledDataset::new(train_x, train_y, *classes)?,
                crate::data::LabeledDataset::new(test_x, test_y, *classes)?,
            ))
        }
    }
}
