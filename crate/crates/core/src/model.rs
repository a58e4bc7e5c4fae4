//! Declarative model descriptions, the named preset table, and fitted models.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::evaluation::StumpEnsemble;
use crate::layers::{Conv1d, Dense, Dropout, MaxPool1d};
use crate::network::{argmax, CnnNet, CnnStage, Network};
use crate::recurrent::{LstmLayer, RecurrentCell, RecurrentNet, RecurrentStage, RnnLayer};
use crate::tensor::NormStats;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelFamily {
    Cnn,
    Rnn,
    Lstm,
    Adaboost,
}

impl ModelFamily {
    pub fn name(self) -> &'static str {
        match self {
            ModelFamily::Cnn => "cnn",
            ModelFamily::Rnn => "rnn",
            ModelFamily::Lstm => "lstm",
            ModelFamily::Adaboost => "adaboost",
        }
    }

    pub fn is_recurrent(self) -> bool {
        matches!(self, ModelFamily::Rnn | ModelFamily::Lstm)
    }
}

impl fmt::Display for ModelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cnn" => Ok(ModelFamily::Cnn),
            "rnn" => Ok(ModelFamily::Rnn),
            "lstm" => Ok(ModelFamily::Lstm),
            "adaboost" => Ok(ModelFamily::Adaboost),
            other => Err(Error::param(format!("unknown model family `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LayerSpec {
    /// Convolution followed by ReLU.
    Conv { filters: usize, kernel: usize, stride: usize },
    MaxPool { size: usize, stride: usize },
    Dropout { keep_prob: f64 },
    Rnn { hidden: usize },
    Lstm { hidden: usize },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Rnn { .. } => "rnn",
            LayerSpec::Lstm { .. } => "lstm",
        }
    }
}

/// Everything needed to build a fresh, untrained model for a given trace length.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub name: String,
    pub family: ModelFamily,
    pub layers: Vec<LayerSpec>,
    /// Folding steps for recurrent families; 1 otherwise.
    pub timesteps: usize,
    pub classes: usize,
    /// Default seed when none is supplied on the command line.
    pub seed: u64,
    /// Boosting rounds (adaboost only).
    pub rounds: usize,
}

/// Filters in the first convolution, and in every later one.
pub const FIRST_FILTERS: usize = 32;
pub const LATER_FILTERS: usize = 64;
pub const KERNEL: usize = 10;
pub const HIDDEN: usize = 100;
pub const KEEP_PROB: f64 = 0.5;

impl ModelSpec {
    fn new(name: &str, family: ModelFamily, layers: Vec<LayerSpec>, timesteps: usize) -> Self {
        ModelSpec {
            name: name.to_string(),
            family,
            layers,
            timesteps,
            classes: 4,
            seed: 0,
            rounds: 0,
        }
    }

    /// A convolutional spec from a compact code: `c` conv, `p` max pool 2/2, `d` dropout.
    /// The first convolution gets 32 filters and every later one 64, all with width 10.
    pub fn cnn(name: &str, code: &str) -> Self {
        let mut convs = 0;
        let layers = code
            .chars()
            .map(|ch| match ch {
                'c' => {
                    convs += 1;
                    LayerSpec::Conv {
                        filters: if convs == 1 { FIRST_FILTERS } else { LATER_FILTERS },
                        kernel: KERNEL,
                        stride: 1,
                    }
                }
                'p' => LayerSpec::MaxPool { size: 2, stride: 2 },
                'd' => LayerSpec::Dropout { keep_prob: KEEP_PROB },
                _ => unreachable!("bad preset code"),
            })
            .collect();
        ModelSpec::new(name, ModelFamily::Cnn, layers, 1)
    }

    /// A recurrent spec from a compact code: `r` recurrent layer of 100 units, `d` dropout.
    pub fn recurrent(name: &str, lstm: bool, code: &str, timesteps: usize) -> Self {
        let layers = code
            .chars()
            .map(|ch| match (ch, lstm) {
                ('r', false) => LayerSpec::Rnn { hidden: HIDDEN },
                ('r', true) => LayerSpec::Lstm { hidden: HIDDEN },
                ('d', _) => LayerSpec::Dropout { keep_prob: KEEP_PROB },
                _ => unreachable!("bad preset code"),
            })
            .collect();
        let family = if lstm { ModelFamily::Lstm } else { ModelFamily::Rnn };
        ModelSpec::new(name, family, layers, timesteps)
    }

    pub fn adaboost(name: &str, rounds: usize) -> Self {
        let mut s = ModelSpec::new(name, ModelFamily::Adaboost, Vec::new(), 1);
        s.rounds = rounds;
        s
    }

    /// Checks the spec builds into a shape-consistent model for traces of length `input_len`.
    pub fn validate(&self, input_len: usize) -> Result<()> {
        self.build(input_len, &mut crate::rng::stream(0, &[])).map(|_| ())
    }

    /// Builds a freshly initialized network. Fails for the adaboost family, which has no
    /// network, after the same validation.
    pub fn build<R: Rng + ?Sized>(&self, input_len: usize, rng: &mut R) -> Result<Option<Network>> {
        if self.classes < 2 {
            return Err(Error::param("a classifier needs at least two classes"));
        }
        if input_len == 0 {
            return Err(Error::param("trace length must be at least 1"));
        }
        let mismatch = |l: &LayerSpec| {
            Err(Error::param(format!(
                "layer `{}` is not allowed in a {} model",
                l.kind(),
                self.family
            )))
        };
        match self.family {
            ModelFamily::Adaboost => {
                if self.rounds == 0 {
                    return Err(Error::param("adaboost needs at least one round"));
                }
                if let Some(l) = self.layers.first() {
                    return mismatch(l);
                }
                Ok(None)
            }
            ModelFamily::Cnn => {
                if self.timesteps != 1 {
                    return Err(Error::param("timesteps applies to recurrent families only"));
                }
                let mut stages = Vec::new();
                let mut channels = 1;
                for l in &self.layers {
                    stages.push(match *l {
                        LayerSpec::Conv { filters, kernel, stride } => {
                            let c = Conv1d::new(channels, filters, kernel, stride, rng)?;
                            channels = filters;
                            CnnStage::Conv(c)
                        }
                        LayerSpec::MaxPool { size, stride } => CnnStage::MaxPool(MaxPool1d::new(size, stride)?),
                        LayerSpec::Dropout { keep_prob } => CnnStage::Dropout(Dropout::new(keep_prob)?),
                        _ => return mismatch(l),
                    });
                }
                let (c, w) = CnnNet::feature_shape(&stages, input_len)?;
                let net = CnnNet {
                    input_len,
                    stages,
                    head: Dense::new(c * w, self.classes, rng)?,
                };
                net.validate()?;
                Ok(Some(Network::Cnn(net)))
            }
            ModelFamily::Rnn | ModelFamily::Lstm => {
                if self.timesteps == 0 || input_len % self.timesteps != 0 {
                    return Err(Error::Divisibility {
                        n: input_len,
                        t: self.timesteps,
                    });
                }
                let mut width = input_len / self.timesteps;
                let mut stages = Vec::new();
                for l in &self.layers {
                    stages.push(match (*l, self.family) {
                        (LayerSpec::Rnn { hidden }, ModelFamily::Rnn) => {
                            let cell = RnnLayer::new(width, hidden, rng)?;
                            width = hidden;
                            RecurrentStage::Cell(RecurrentCell::Rnn(cell))
                        }
                        (LayerSpec::Lstm { hidden }, ModelFamily::Lstm) => {
                            let cell = LstmLayer::new(width, hidden, rng)?;
                            width = hidden;
                            RecurrentStage::Cell(RecurrentCell::Lstm(cell))
                        }
                        (LayerSpec::Dropout { keep_prob }, _) => RecurrentStage::Dropout(Dropout::new(keep_prob)?),
                        _ => return mismatch(l),
                    });
                }
                let net = RecurrentNet {
                    timesteps: self.timesteps,
                    stages,
                    head: Dense::new(width, self.classes, rng)?,
                };
                net.validate(input_len)?;
                Ok(Some(Network::Recurrent(net)))
            }
        }
    }
}

/// One spec per architecture of the published comparison table: eight convolutional
/// stacks, then three RNN and three LSTM stacks at each of 2, 5 and 10 timesteps.
pub fn table_presets() -> Vec<ModelSpec> {
    let mut out = vec![
        ModelSpec::cnn("cnn-1conv", "c"),
        ModelSpec::cnn("cnn-2conv", "cc"),
        ModelSpec::cnn("cnn-2conv-pool-1conv", "ccpc"),
        ModelSpec::cnn("cnn-2conv-pool-2conv", "ccpcc"),
        ModelSpec::cnn("cnn-best", "ccpcd"),
        ModelSpec::cnn("cnn-2conv-pool-1conv-dropout-1conv", "ccpcdc"),
        ModelSpec::cnn("cnn-2conv-dropout-2conv", "ccdcc"),
        ModelSpec::cnn("cnn-3conv", "ccc"),
    ];
    for lstm in [false, true] {
        let kind = if lstm { "lstm" } else { "rnn" };
        for t in [2, 5, 10] {
            out.push(ModelSpec::recurrent(&format!("{kind}-t{t}"), lstm, "r", t));
            out.push(ModelSpec::recurrent(&format!("{kind}2-t{t}"), lstm, "rr", t));
            out.push(ModelSpec::recurrent(&format!("{kind}2-dropout-{kind}-t{t}"), lstm, "rrdr", t));
        }
    }
    out
}

/// Every named preset: the table architectures plus the boosting baseline.
pub fn presets() -> Vec<ModelSpec> {
    let mut out = table_presets();
    out.push(ModelSpec::adaboost("adaboost-100", 100));
    out
}

pub fn preset(name: &str) -> Result<ModelSpec> {
    let all = presets();
    match all.iter().find(|s| s.name == name) {
        Some(s) => Ok(s.clone()),
        None => Err(Error::UnknownPreset {
            name: name.to_string(),
            available: all.iter().map(|s| s.name.as_str()).collect::<Vec<_>>().join(", "),
        }),
    }
}

/// Learned state of a fitted model.
#[derive(Clone, Debug, PartialEq)]
pub enum Learned {
    Network(Network),
    Stumps(StumpEnsemble),
}

/// A spec plus its learned parameters and the normalization fitted on its training set.
/// Inputs to every prediction method are raw, unnormalized traces.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub spec: ModelSpec,
    pub input_len: usize,
    pub norm: NormStats,
    pub learned: Learned,
}

impl TrainedModel {
    fn check_len(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_len {
            return Err(Error::LengthMismatch {
                model: self.input_len,
                data: x.len(),
            });
        }
        Ok(())
    }

    /// Class scores: softmax probabilities for networks, normalized vote shares for stumps.
    pub fn scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_len(x)?;
        let z = self.norm.apply(x);
        match &self.learned {
            Learned::Network(n) => n.predict_proba(&z),
            Learned::Stumps(e) => Ok(e.vote_shares(&z)),
        }
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.scores(x)?))
    }

    pub fn predict_batch<'a>(&self, xs: impl IntoIterator<Item = &'a [f64]>) -> Result<Vec<usize>> {
        xs.into_iter().map(|x| self.predict(x)).collect()
    }
}
