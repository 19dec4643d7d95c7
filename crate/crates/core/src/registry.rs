//! Component registry and topology instantiation.

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use crate::config::{Params, Topology};
use crate::kernel::{Attachment, Component, ComponentId, Kernel, KernelError, Port, Side};
use crate::labs::{arq, bridge, csma, gcra, ipfrag, pnni, tcp, token_ring};
use crate::netbase::layers::{Cloud, Datalink, Hub, Physical};
use crate::netbase::{App, Link, LinkMode, LinkParams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BuildError {
    #[error("node {node}: unknown component kind `{kind}`")]
    UnknownKind { node: String, kind: String },
    #[error("{component}: invalid value `{value}` for `{key}`")]
    BadParam {
        component: String,
        key: String,
        value: String,
    },
    #[error("{component}: missing required parameter `{key}`")]
    Missing { component: String, key: String },
    #[error("{component}: {message}")]
    Invalid { component: String, message: String },
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

/// Construction input for one component.
pub struct Spec<'a> {
    pub name: &'a str,
    pub node: &'a str,
    pub kind: &'a str,
    /// Position of the owning node in declaration order.
    pub node_index: usize,
    pub params: &'a Params,
}

impl Spec<'_> {
    pub fn bad(&self, key: &str, value: &str) -> BuildError {
        BuildError::BadParam {
            component: self.name.to_string(),
            key: key.to_string(),
            value: value.to_string(),
        }
    }

    pub fn opt_str(&self, key: &str) -> Option<&str> {
        self.params.get(key).map(String::as_str)
    }

    pub fn str<'b>(&'b self, key: &str, default: &'b str) -> &'b str {
        self.opt_str(key).unwrap_or(default)
    }

    pub fn required(&self, key: &str) -> Result<&str, BuildError> {
        self.opt_str(key).ok_or_else(|| BuildError::Missing {
            component: self.name.to_string(),
            key: key.to_string(),
        })
    }

    pub fn opt_f64(&self, key: &str) -> Result<Option<f64>, BuildError> {
        match self.params.get(key) {
            None => Ok(None),
            Some(v) => match v.parse::<f64>() {
                Ok(x) if x.is_finite() => Ok(Some(x)),
                _ => Err(self.bad(key, v)),
            },
        }
    }

    pub fn f64(&self, key: &str, default: f64) -> Result<f64, BuildError> {
        Ok(self.opt_f64(key)?.unwrap_or(default))
    }

    pub fn positive(&self, key: &str, default: f64) -> Result<f64, BuildError> {
        let v = self.f64(key, default)?;
        if v > 0.0 {
            Ok(v)
        } else {
            Err(self.bad(key, &v.to_string()))
        }
    }

    pub fn non_negative(&self, key: &str, default: f64) -> Result<f64, BuildError> {
        let v = self.f64(key, default)?;
        if v >= 0.0 {
            Ok(v)
        } else {
            Err(self.bad(key, &v.to_string()))
        }
    }

    pub fn probability(&self, key: &str, default: f64) -> Result<f64, BuildError> {
        let v = self.f64(key, default)?;
        if (0.0..=1.0).contains(&v) {
            Ok(v)
        } else {
            Err(self.bad(key, &v.to_string()))
        }
    }

    pub fn opt_u64(&self, key: &str) -> Result<Option<u64>, BuildError> {
        match self.params.get(key) {
            None => Ok(None),
            Some(v) => v.parse::<u64>().map(Some).map_err(|_| self.bad(key, v)),
        }
    }

    pub fn u64(&self, key: &str, default: u64) -> Result<u64, BuildError> {
        Ok(self.opt_u64(key)?.unwrap_or(default))
    }

    pub fn bool(&self, key: &str, default: bool) -> Result<bool, BuildError> {
        match self.params.get(key).map(String::as_str) {
            None => Ok(default),
            Some("1" | "true" | "yes") => Ok(true),
            Some("0" | "false" | "no") => Ok(false),
            Some(v) => Err(self.bad(key, v)),
        }
    }

    pub fn list_u64(&self, key: &str) -> Result<Vec<u64>, BuildError> {
        match self.params.get(key) {
            None => Ok(Vec::new()),
            Some(v) => v
                .split(',')
                .map(|x| x.parse::<u64>().map_err(|_| self.bad(key, v)))
                .collect(),
        }
    }

    pub fn list_f64(&self, key: &str) -> Result<Vec<f64>, BuildError> {
        match self.params.get(key) {
            None => Ok(Vec::new()),
            Some(v) => v
                .split(',')
                .map(|x| x.parse::<f64>().map_err(|_| self.bad(key, v)))
                .collect(),
        }
    }
}

/// How links attached to a component kind are realized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkStyle {
    /// A store-and-forward `Link` component.
    Store,
    /// A propagation-only `Link` component.
    Pipe,
    /// No link component: the endpoints are wired directly and the declared
    /// delay is the station's propagation offset on a shared medium.
    Tap,
}

pub type Ctor = fn(&Spec<'_>) -> Result<Box<dyn Component>, BuildError>;

#[derive(Clone, Copy)]
struct KindEntry {
    ctor: Ctor,
    style: LinkStyle,
}

/// Maps component kind names to constructors.
#[derive(Clone, Default)]
pub struct Registry {
    kinds: BTreeMap<String, KindEntry>,
}

fn boxed<C: Component>(r: Result<C, BuildError>) -> Result<Box<dyn Component>, BuildError> {
    r.map(|c| Box::new(c) as Box<dyn Component>)
}

impl Registry {
    pub fn empty() -> Self {
        Registry::default()
    }

    /// Every reference component shipped with the simulator.
    pub fn standard() -> Self {
        let mut r = Registry::empty();
        r.register("app", |s| boxed(App::from_spec(s)), LinkStyle::Store);
        r.register("physical", |_| Ok(Box::new(Physical::default())), LinkStyle::Store);
        r.register("datalink", |_| Ok(Box::new(Datalink::default())), LinkStyle::Store);
        r.register("lan", |_| Ok(Box::new(Hub::default())), LinkStyle::Store);
        r.register("cloud", |s| boxed(Cloud::from_spec(s)), LinkStyle::Store);
        r.register("gbn", |s| boxed(arq::GbnLayer::from_spec(s)), LinkStyle::Store);
        r.register("csma", |s| boxed(csma::CsmaStation::from_spec(s)), LinkStyle::Tap);
        r.register("bus", |s| boxed(csma::Bus::from_spec(s)), LinkStyle::Tap);
        r.register("ring", |s| boxed(token_ring::RingStation::from_spec(s)), LinkStyle::Pipe);
        r.register("nic", |s| boxed(bridge::Nic::from_spec(s)), LinkStyle::Store);
        r.register("bridge", |s| boxed(bridge::Bridge::from_spec(s)), LinkStyle::Store);
        r.register("ip", |s| boxed(ipfrag::IpNode::from_spec(s)), LinkStyle::Store);
        r.register("tcp", |s| boxed(tcp::TcpLayer::from_spec(s)), LinkStyle::Store);
        r.register("cellsrc", |s| boxed(gcra::CellSource::from_spec(s)), LinkStyle::Store);
        r.register("policer", |s| boxed(gcra::Policer::from_spec(s)), LinkStyle::Store);
        r.register("cellsink", |_| Ok(Box::new(gcra::CellSink::default())), LinkStyle::Store);
        r.register("pnni", |s| boxed(pnni::PnniNode::from_spec(s)), LinkStyle::Store);
        r
    }

    /// Adds or replaces a kind; this is how an alternative implementation of
    /// a layer is plugged in under an existing name.
    pub fn register(&mut self, kind: &str, ctor: Ctor, style: LinkStyle) {
        self.kinds.insert(kind.to_string(), KindEntry { ctor, style });
    }

    pub fn kinds(&self) -> impl Iterator<Item = &str> {
        self.kinds.keys().map(String::as_str)
    }

    pub fn contains(&self, kind: &str) -> bool {
        self.kinds.contains_key(kind)
    }

    /// Builds a fresh kernel holding one component per declared layer and one
    /// per link, wired together, with `Start` events queued.
    pub fn instantiate(&self, topo: &Topology, seed: u64) -> Result<Kernel, BuildError> {
        for n in &topo.nodes {
            for k in &n.kinds {
                if !self.kinds.contains_key(k) {
                    return Err(BuildError::UnknownKind {
                        node: n.id.clone(),
                        kind: k.clone(),
                    });
                }
            }
        }

        let mut kernel = Kernel::new(seed);
        // component name -> (id, style, ids of the layers above it, top first)
        let mut placed: HashMap<String, (ComponentId, LinkStyle, Vec<ComponentId>)> =
            HashMap::new();

        for (node_index, n) in topo.nodes.iter().enumerate() {
            let names = n.component_ids();
            let mut ids = Vec::new();
            for (kind, name) in n.kinds.iter().zip(&names) {
                let entry = self.kinds[kind];
                let params = topo.component_params(n, name);
                let spec = Spec {
                    name,
                    node: &n.id,
                    kind,
                    node_index,
                    params: &params,
                };
                let comp = (entry.ctor)(&spec)?;
                let id = kernel.add_component(name, comp);
                placed.insert(name.clone(), (id, entry.style, ids.clone()));
                ids.push(id);
            }
            for w in ids.windows(2) {
                kernel.connect((w[0], Port::Net(0)), (w[1], Port::Up))?;
            }
        }

        let mut next_port: HashMap<ComponentId, u16> = HashMap::new();
        let mut take_port = |id: ComponentId| {
            let p = next_port.entry(id).or_insert(0);
            *p += 1;
            Port::Net(*p - 1)
        };

        for decl in &topo.links {
            let link = topo.effective_link(decl);
            let mut ends = Vec::new();
            for end in [&link.a, &link.b] {
                let name = topo.resolve_endpoint(end).ok_or_else(|| BuildError::Invalid {
                    component: link.id.clone(),
                    message: format!("unresolved endpoint {end}"),
                })?;
                let (id, style, above) = placed[&name].clone();
                ends.push((id, style, above));
            }
            let pa = take_port(ends[0].0);
            let pb = take_port(ends[1].0);
            let styles = [ends[0].1, ends[1].1];
            if styles.contains(&LinkStyle::Tap) {
                kernel.connect((ends[0].0, pa), (ends[1].0, pb))?;
            } else {
                let mut params = LinkParams::from_decl(&link)?;
                if styles.contains(&LinkStyle::Pipe) && !link.params.contains_key("mode") {
                    params.mode = LinkMode::Pipe;
                }
                let names = [
                    kernel.name(ends[0].0).unwrap_or_default().to_string(),
                    kernel.name(ends[1].0).unwrap_or_default().to_string(),
                ];
                let lid = kernel.add_component(&link.id, Box::new(Link::new(params, names)));
                kernel.connect((ends[0].0, pa), (lid, Port::Net(0)))?;
                kernel.connect((ends[1].0, pb), (lid, Port::Net(1)))?;
            }
            for ((id, _, above), (port, side)) in ends.iter().zip([(pa, Side::A), (pb, Side::B)]) {
                let at = Attachment {
                    port: Some(port),
                    side,
                    link: &link,
                };
                kernel.attach(*id, &at);
                let above_at = Attachment { port: None, ..at };
                for &upper in above {
                    kernel.attach(upper, &above_at);
                }
            }
        }

        kernel.start();
        Ok(kernel)
    }
}

/// Parses and instantiates with the standard registry.
pub fn build(text: &str, seed: u64) -> Result<Kernel, String> {
    let topo = crate::config::parse(text).map_err(|errs| {
        errs.iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join("\n")
    })?;
    Registry::standard()
        .instantiate(&topo, seed)
        .map_err(|e| e.to_string())
}
