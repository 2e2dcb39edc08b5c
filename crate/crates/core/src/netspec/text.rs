use std::fmt::Write as _;

use super::{Activation, LayerKind, LayerSpec, NetworkSpec, PoolKind};
use crate::error::{bail, Error, Result};

fn act_token(a: Activation) -> String {
    match a {
        Activation::Relu => "relu".into(),
        Activation::Sigmoid => "sigmoid".into(),
        Activation::LeakyRelu(s) => format!("leaky_relu:{s}"),
    }
}

fn parse_act(tok: &str) -> Option<Activation> {
    match tok {
        "relu" => Some(Activation::Relu),
        "sigmoid" => Some(Activation::Sigmoid),
        _ => tok
            .strip_prefix("leaky_relu:")
            .and_then(|s| s.parse().ok())
            .map(Activation::LeakyRelu),
    }
}

fn pool_token(k: PoolKind) -> &'static str {
    match k {
        PoolKind::Max => "max",
        PoolKind::Avg => "avg",
        PoolKind::GlobalAvg => "global_avg",
        PoolKind::ChannelAvg => "channel_avg",
    }
}

pub(super) fn print(spec: &NetworkSpec) -> String {
    let mut out = format!("network {}\n", spec.name);
    for layer in &spec.layers {
        let mut line = match &layer.kind {
            LayerKind::Input {
                height,
                width,
                channels,
            } => format!("input {height} {width} {channels}"),
            LayerKind::Conv {
                kernel,
                stride,
                pad,
                filters,
                norm,
                act,
            } => {
                let mut s = format!("conv {kernel} {stride} {filters} pad={pad}");
                if *norm {
                    s.push_str(" bn");
                }
                if let Some(a) = act {
                    let _ = write!(s, " {}", act_token(*a));
                }
                s
            }
            LayerKind::ConvTranspose {
                kernel,
                stride,
                filters,
                norm,
                act,
            } => {
                let mut s = format!("conv_transpose {kernel} {stride} {filters}");
                if *norm {
                    s.push_str(" bn");
                }
                if let Some(a) = act {
                    let _ = write!(s, " {}", act_token(*a));
                }
                s
            }
            LayerKind::Bneck {
                kernel,
                stride,
                filters,
                expand,
            } => format!("bneck {kernel} {stride} {filters} expand={expand}"),
            LayerKind::Residual {
                kernel,
                stride,
                filters,
            } => format!("residual_block {kernel} {stride} {filters}"),
            LayerKind::BatchNorm => "batchnorm".into(),
            LayerKind::Activation(a) => format!("activation {}", act_token(*a)),
            LayerKind::Pool { kind, window } => match kind {
                PoolKind::Max | PoolKind::Avg => format!("pool {} {window}", pool_token(*kind)),
                _ => format!("pool {}", pool_token(*kind)),
            },
            LayerKind::Flatten => "flatten".into(),
            LayerKind::Dense { units, act } => {
                let mut s = format!("fully_connected {units}");
                if let Some(a) = act {
                    let _ = write!(s, " {}", act_token(*a));
                }
                s
            }
            LayerKind::Concat { skip } => format!("concat #{skip}"),
        };
        if let Some(p) = layer.attention_point {
            let _ = write!(line, " @{p}");
        }
        out.push_str(&line);
        out.push('\n');
    }
    out
}

struct Line<'a> {
    no: usize,
    toks: Vec<&'a str>,
    pos: usize,
}

impl<'a> Line<'a> {
    fn err(&self, msg: impl std::fmt::Display) -> Error {
        Error::Spec(format!("line {}: {msg}", self.no))
    }

    fn next(&mut self) -> Option<&'a str> {
        let t = self.toks.get(self.pos).copied();
        self.pos += 1;
        t
    }

    fn peek(&self) -> Option<&'a str> {
        self.toks.get(self.pos).copied()
    }

    fn num(&mut self, what: &str) -> Result<usize> {
        let t = self.next().ok_or_else(|| self.err(format!("missing {what}")))?;
        t.parse().map_err(|_| self.err(format!("{what} `{t}` is not a number")))
    }

    fn keyed(&mut self, key: &str) -> Result<usize> {
        let t = self.next().ok_or_else(|| self.err(format!("missing {key}=")))?;
        let v = t
            .strip_prefix(key)
            .and_then(|r| r.strip_prefix('='))
            .ok_or_else(|| self.err(format!("expected {key}=N, got `{t}`")))?;
        v.parse().map_err(|_| self.err(format!("{key} `{v}` is not a number")))
    }

    fn flag(&mut self, name: &str) -> bool {
        if self.peek() == Some(name) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn opt_act(&mut self) -> Option<Activation> {
        let a = self.peek().and_then(parse_act);
        if a.is_some() {
            self.pos += 1;
        }
        a
    }

    fn done(&self) -> Result<()> {
        match self.toks.get(self.pos) {
            Some(t) => Err(self.err(format!("unexpected token `{t}`"))),
            None => Ok(()),
        }
    }
}

pub(super) fn parse(src: &str) -> Result<NetworkSpec> {
    let mut name = None;
    let mut layers = Vec::new();
    for (i, raw) in src.lines().enumerate() {
        if raw.trim_start().starts_with("//") {
            continue;
        }
        let mut toks: Vec<&str> = raw.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        let mut attention_point = None;
        if let Some(last) = toks.last() {
            if let Some(p) = last.strip_prefix('@') {
                attention_point = Some(
                    p.parse::<u8>()
                        .map_err(|_| Error::Spec(format!("line {}: bad attention tag `{last}`", i + 1)))?,
                );
                toks.pop();
            }
        }
        let mut l = Line {
            no: i + 1,
            toks,
            pos: 0,
        };
        let kw = l.next().unwrap_or_default();
        if kw == "network" {
            let n = l.next().ok_or_else(|| l.err("missing network name"))?;
            l.done()?;
            if name.replace(n.to_string()).is_some() {
                bail!(Spec, "line {}: duplicate network header", i + 1);
            }
            continue;
        }
        let kind = match kw {
            "input" => LayerKind::Input {
                height: l.num("height")?,
                width: l.num("width")?,
                channels: l.num("channels")?,
            },
            "conv" => LayerKind::Conv {
                kernel: l.num("kernel")?,
                stride: l.num("stride")?,
                filters: l.num("filters")?,
                pad: l.keyed("pad")?,
                norm: l.flag("bn"),
                act: l.opt_act(),
            },
            "conv_transpose" => LayerKind::ConvTranspose {
                kernel: l.num("kernel")?,
                stride: l.num("stride")?,
                filters: l.num("filters")?,
                norm: l.flag("bn"),
                act: l.opt_act(),
            },
            "bneck" => LayerKind::Bneck {
                kernel: l.num("kernel")?,
                stride: l.num("stride")?,
                filters: l.num("filters")?,
                expand: l.keyed("expand")?,
            },
            "residual_block" => LayerKind::Residual {
                kernel: l.num("kernel")?,
                stride: l.num("stride")?,
                filters: l.num("filters")?,
            },
            "batchnorm" => LayerKind::BatchNorm,
            "activation" => {
                let t = l.next().ok_or_else(|| l.err("missing activation"))?;
                LayerKind::Activation(parse_act(t).ok_or_else(|| l.err(format!("unknown activation `{t}`")))?)
            }
            "pool" => {
                let t = l.next().ok_or_else(|| l.err("missing pool kind"))?;
                let kind = match t {
                    "max" => PoolKind::Max,
                    "avg" => PoolKind::Avg,
                    "global_avg" => PoolKind::GlobalAvg,
                    "channel_avg" => PoolKind::ChannelAvg,
                    _ => return Err(l.err(format!("unknown pool kind `{t}`"))),
                };
                let window = match kind {
                    PoolKind::Max | PoolKind::Avg => l.num("window")?,
                    _ => 0,
                };
                LayerKind::Pool { kind, window }
            }
            "flatten" => LayerKind::Flatten,
            "fully_connected" => LayerKind::Dense {
                units: l.num("units")?,
                act: l.opt_act(),
            },
            "concat" => {
                let t = l.next().ok_or_else(|| l.err("missing concat target"))?;
                let skip = t
                    .strip_prefix('#')
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| l.err(format!("concat target must look like #N, got `{t}`")))?;
                LayerKind::Concat { skip }
            }
            other => return Err(l.err(format!("unknown layer kind `{other}`"))),
        };
        l.done()?;
        layers.push(LayerSpec {
            kind,
            attention_point,
        });
    }
    let Some(name) = name else {
        bail!(Spec, "missing `network <name>` header");
    };
    Ok(NetworkSpec { name, layers })
}
