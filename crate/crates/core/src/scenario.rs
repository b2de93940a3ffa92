//! Three-tier topology: tasks, stations, channel gains and the wired
//! forwarding graph, plus the load and latency primitives over paths.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::Real;

/// Index of the macro base station in [`Scenario::stations`].
pub const MBS: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Task<T> {
    pub id: usize,
    /// Data size in bits.
    pub c: T,
    /// Deadline in seconds.
    pub t_max: T,
    /// CPU cycles per bit.
    pub u: T,
}

impl<T: Real> Task<T> {
    pub fn new(id: usize, c: T, t_max: T, u: T) -> Result<Self> {
        if !(c >= T::zero() && t_max > T::zero() && u > T::zero()) {
            return Err(Error::Config(format!("task {id}: need c >= 0, t_max > 0, u > 0")));
        }
        Ok(Self { id, c, t_max, u })
    }

    /// Total CPU cycles of the task.
    pub fn cycles(&self) -> T {
        self.c * self.u
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StationKind {
    Mbs,
    Sbs,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Station<T> {
    pub id: usize,
    pub kind: StationKind,
    /// Compute capacity in cycles per second.
    pub f: T,
    /// Radio bandwidth in Hz.
    pub bandwidth: T,
    /// Transmit power used in the SNR numerator, watts.
    pub tx_power: T,
    /// Energy per CPU cycle, joules.
    pub e_cycle: T,
    pub position: [T; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalDevice<T> {
    pub f_local: T,
    pub e_local: T,
    /// Uplink transmit power of the terminal, watts.
    pub tx_power: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForwardingUnit<T> {
    pub id: usize,
    /// Quadratic latency coefficient, s/bit².
    pub o1: T,
    /// Linear latency coefficient, s/bit.
    pub o2: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Node {
    Task(usize),
    Station(usize),
    Forwarding(usize),
    VirtualDestination,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Link<T> {
    pub id: usize,
    pub endpoints: (Node, Node),
    /// Bits per second.
    pub capacity: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathElement {
    Link(usize),
    Forwarding(usize),
}

/// Where a path delivers (part of) a task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathTarget {
    Local,
    Station(usize),
    /// SBS-to-MBS wired relay of the MBS share of a three-tier task.
    Relay(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Path {
    pub elements: Vec<PathElement>,
    /// Always [`Node::VirtualDestination`] for generated paths.
    pub terminus: Node,
}

impl Path {
    pub fn terminated(elements: Vec<PathElement>) -> Self {
        Self { elements, terminus: Node::VirtualDestination }
    }

    pub fn contains(&self, e: PathElement) -> bool {
        self.elements.contains(&e)
    }

    /// Concatenation of two paths; the terminus of `other` is kept.
    pub fn concat(&self, other: &Path) -> Path {
        let mut elements = self.elements.clone();
        elements.extend_from_slice(&other.elements);
        Path { elements, terminus: other.terminus }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathEntry {
    pub task: usize,
    pub target: PathTarget,
    pub path: Path,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkGraph<T> {
    pub forwarding_units: Vec<ForwardingUnit<T>>,
    pub links: Vec<Link<T>>,
    /// Sorted by `(task, target)`.
    pub paths: Vec<PathEntry>,
}

impl<T: Real> NetworkGraph<T> {
    pub fn path(&self, task: usize, target: PathTarget) -> Option<&Path> {
        self.paths
            .binary_search_by(|e| (e.task, e.target).cmp(&(task, target)))
            .ok()
            .map(|i| &self.paths[i].path)
    }

    pub fn unit(&self, id: usize) -> Result<&ForwardingUnit<T>> {
        self.forwarding_units
            .iter()
            .find(|u| u.id == id)
            .ok_or(Error::Lookup { kind: "forwarding unit", id })
    }

    pub fn link(&self, id: usize) -> Result<&Link<T>> {
        self.links.iter().find(|l| l.id == id).ok_or(Error::Lookup { kind: "link", id })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelMatrix<T> {
    /// `gain[station][task]`, dimensionless.
    pub gain: Vec<Vec<T>>,
    /// Noise power over the band, watts.
    pub noise_power: T,
    /// Transmit power on the SBS-to-MBS wired relay, watts.
    pub offload_power_sbs_mbs: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario<T> {
    pub tasks: Vec<Task<T>>,
    /// Station 0 is the MBS, the rest are SBSs.
    pub stations: Vec<Station<T>>,
    pub device: LocalDevice<T>,
    pub channel: ChannelMatrix<T>,
    pub graph: NetworkGraph<T>,
    /// Smallest SBS resource fraction a task may be granted.
    pub h_min: T,
}

impl<T: Real> Scenario<T> {
    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn n_sbs(&self) -> usize {
        self.stations.len() - 1
    }

    pub fn mbs(&self) -> &Station<T> {
        &self.stations[MBS]
    }

    /// SBS station ids, `1..=n_sbs`.
    pub fn sbs_ids(&self) -> std::ops::Range<usize> {
        1..self.stations.len()
    }

    pub fn gain(&self, station: usize, task: usize) -> T {
        self.channel.gain[station][task]
    }

    /// Checks the structural invariants of the type.
    pub fn validate(&self) -> Result<()> {
        let n_mbs = self.stations.iter().filter(|s| s.kind == StationKind::Mbs).count();
        if n_mbs != 1 || self.stations[MBS].kind != StationKind::Mbs {
            return Err(Error::Config("exactly one MBS, at index 0".into()));
        }
        for s in &self.stations {
            if !(s.f > T::zero() && s.bandwidth > T::zero()) {
                return Err(Error::Config(format!("station {}: f and bandwidth must be > 0", s.id)));
            }
        }
        let d = &self.device;
        if !(d.f_local > T::zero() && d.e_local >= T::zero() && d.tx_power > T::zero()) {
            return Err(Error::Config("local device parameters out of range".into()));
        }
        if !(self.channel.noise_power > T::zero()) {
            return Err(Error::Config("noise power must be > 0".into()));
        }
        if self.channel.gain.len() != self.stations.len()
            || self.channel.gain.iter().any(|row| row.len() != self.tasks.len())
        {
            return Err(Error::Config("gain matrix shape must be stations x tasks".into()));
        }
        if self.channel.gain.iter().flatten().any(|&g| !(g > T::zero())) {
            return Err(Error::Config("gains must be > 0".into()));
        }
        if self.graph.links.iter().any(|l| !(l.capacity > T::zero())) {
            return Err(Error::Config("link capacity must be > 0".into()));
        }
        if !(self.h_min > T::zero() && self.h_min <= T::one()) {
            return Err(Error::Config("h_min must lie in (0, 1]".into()));
        }
        for t in &self.tasks {
            Task::new(t.id, t.c, t.t_max, t.u)?;
        }
        for e in &self.graph.paths {
            if e.path.terminus != Node::VirtualDestination {
                return Err(Error::Config(format!("path of task {} does not terminate", e.task)));
            }
            for el in &e.path.elements {
                match *el {
                    PathElement::Link(id) => {
                        self.graph.link(id)?;
                    }
                    PathElement::Forwarding(id) => {
                        self.graph.unit(id)?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let sc: Self = serde_json::from_str(s)?;
        sc.validate()?;
        Ok(sc)
    }

    /// The same network restricted to `tasks`, renumbered in the given order.
    pub fn subset(&self, tasks: &[usize]) -> Result<Self> {
        let mut out = self.clone();
        out.tasks = Vec::with_capacity(tasks.len());
        for (new, &old) in tasks.iter().enumerate() {
            let t = self.tasks.get(old).ok_or(Error::Lookup { kind: "task", id: old })?;
            out.tasks.push(Task { id: new, ..*t });
        }
        out.channel.gain = self.channel.gain.iter().map(|row| tasks.iter().map(|&j| row[j]).collect()).collect();
        let mut paths: Vec<PathEntry> = Vec::new();
        for (new, &old) in tasks.iter().enumerate() {
            paths.extend(
                self.graph.paths.iter().filter(|e| e.task == old).map(|e| PathEntry { task: new, ..e.clone() }),
            );
        }
        paths.sort_by(|a, b| (a.task, a.target).cmp(&(b.task, b.target)));
        out.graph.paths = paths;
        Ok(out)
    }
}

/// Fractional path usage `y_{h,f}`: share of task `h`'s bits routed over path `f`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PathUsage<T> {
    pub entries: BTreeMap<(usize, PathTarget), T>,
}

impl<T: Real> PathUsage<T> {
    pub fn new() -> Self {
        Self { entries: BTreeMap::new() }
    }

    pub fn set(&mut self, task: usize, target: PathTarget, y: T) {
        self.entries.insert((task, target), y);
    }
}

fn load_over<T: Real>(
    usage: &PathUsage<T>,
    element: PathElement,
    scenario: &Scenario<T>,
) -> Result<T> {
    let mut load = T::zero();
    for (&(task, target), &y) in &usage.entries {
        if !(y >= T::zero() && y <= T::one()) {
            return Err(Error::Domain(format!("path usage {y} outside [0, 1]")));
        }
        let path = scenario
            .graph
            .path(task, target)
            .ok_or(Error::Lookup { kind: "path of task", id: task })?;
        if path.contains(element) {
            let t = scenario.tasks.get(task).ok_or(Error::Lookup { kind: "task", id: task })?;
            load = load + y * t.c;
        }
    }
    Ok(load)
}

/// Aggregated bits through a forwarding unit.
pub fn forwarding_load<T: Real>(usage: &PathUsage<T>, unit: usize, scenario: &Scenario<T>) -> Result<T> {
    scenario.graph.unit(unit)?;
    load_over(usage, PathElement::Forwarding(unit), scenario)
}

/// Aggregated bits over a link.
pub fn link_load<T: Real>(usage: &PathUsage<T>, link: usize, scenario: &Scenario<T>) -> Result<T> {
    scenario.graph.link(link)?;
    load_over(usage, PathElement::Link(link), scenario)
}

/// Linear latency model of a forwarding unit: `(o1·load + o2)·load`.
pub fn forwarding_delay<T: Real>(load: T, unit: &ForwardingUnit<T>) -> Result<T> {
    if load < T::zero() {
        return Err(Error::Domain(format!("negative load {load}")));
    }
    Ok((unit.o1 * load + unit.o2) * load)
}

pub fn link_delay<T: Real>(load: T, link: &Link<T>) -> Result<T> {
    if load < T::zero() {
        return Err(Error::Domain(format!("negative load {load}")));
    }
    if !(link.capacity > T::zero()) {
        return Err(Error::Config(format!("link {} has zero capacity", link.id)));
    }
    Ok(load / link.capacity)
}

/// Sum of link and forwarding delays along `path` under the loads induced by `usage`.
pub fn path_delay<T: Real>(path: &Path, usage: &PathUsage<T>, scenario: &Scenario<T>) -> Result<T> {
    let mut total = T::zero();
    for el in &path.elements {
        total = total
            + match *el {
                PathElement::Link(id) => link_delay(link_load(usage, id, scenario)?, scenario.graph.link(id)?)?,
                PathElement::Forwarding(id) => {
                    forwarding_delay(forwarding_load(usage, id, scenario)?, scenario.graph.unit(id)?)?
                }
            };
    }
    Ok(total)
}

/// Delay of a path whose every element carries the same `load`.
///
/// Relay paths are dedicated per SBS, so every element sees the same
/// aggregate; this avoids rebuilding a [`PathUsage`] in inner loops.
pub fn uniform_path_delay<T: Real>(path: &Path, load: T, graph: &NetworkGraph<T>) -> Result<T> {
    let mut total = T::zero();
    for el in &path.elements {
        total = total
            + match *el {
                PathElement::Link(id) => link_delay(load, graph.link(id)?)?,
                PathElement::Forwarding(id) => forwarding_delay(load, graph.unit(id)?)?,
            };
    }
    Ok(total)
}

/// Coefficients `(a, b, cap_inv)` of a uniform-load path delay
/// `a·L² + b·L`, precomputed for hot loops.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadraticDelay<T> {
    pub quad: T,
    pub lin: T,
}

impl<T: Real> QuadraticDelay<T> {
    pub fn of_path(path: &Path, graph: &NetworkGraph<T>) -> Result<Self> {
        let mut quad = T::zero();
        let mut lin = T::zero();
        for el in &path.elements {
            match *el {
                PathElement::Link(id) => lin = lin + T::one() / graph.link(id)?.capacity,
                PathElement::Forwarding(id) => {
                    let u = graph.unit(id)?;
                    quad = quad + u.o1;
                    lin = lin + u.o2;
                }
            }
        }
        Ok(Self { quad, lin })
    }

    #[inline]
    pub fn delay(&self, load: T) -> T {
        (self.quad * load + self.lin) * load
    }

    #[inline]
    pub fn slope(&self, load: T) -> T {
        T::lit(2.0) * self.quad * load + self.lin
    }
}

/// Generation parameters. Defaults follow the simulation table where it
/// gives values; the rest are documented modelling choices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub n_tasks: usize,
    pub n_sbs: usize,
    pub seed: u64,
    /// Data size range, bits.
    pub c_range: [f64; 2],
    /// Deadline range, seconds.
    pub t_max_range: [f64; 2],
    /// CPU cycles per bit.
    pub u: f64,
    pub bandwidth_mbs: f64,
    pub bandwidth_sbs: f64,
    pub noise_density_dbm_hz: f64,
    pub path_loss_exponent: f64,
    /// Side of the square coverage area, meters.
    pub area_side: f64,
    pub user_tx_power: f64,
    /// Station transmit power in dBm.
    pub bs_tx_power_dbm: f64,
    pub f_local: f64,
    pub f_sbs: f64,
    pub f_mbs: f64,
    /// Effective switched capacitance; used when an `e_*` is `None` (`e = kappa·f²`).
    pub kappa: f64,
    pub e_local: Option<f64>,
    pub e_sbs: Option<f64>,
    pub e_mbs: Option<f64>,
    pub o1: f64,
    pub o2: f64,
    pub link_capacity: f64,
    pub offload_power_sbs_mbs: f64,
    pub h_min: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n_tasks: 100,
            n_sbs: 5,
            seed: 42,
            c_range: [5e3, 1e4],
            t_max_range: [15.0, 30.0],
            u: 18_000.0,
            bandwidth_mbs: 20e6,
            bandwidth_sbs: 20e6,
            noise_density_dbm_hz: -172.0,
            path_loss_exponent: 4.0,
            area_side: 200.0,
            user_tx_power: 0.1,
            bs_tx_power_dbm: 40.0,
            f_local: 5e9,
            f_sbs: 2e10,
            f_mbs: 1e11,
            kappa: 1e-26,
            e_local: Some(1e-11),
            e_sbs: Some(1e-9),
            e_mbs: Some(2e-9),
            o1: 1e-9,
            o2: 1e-6,
            link_capacity: 1e8,
            offload_power_sbs_mbs: 1.0,
            h_min: 0.05,
        }
    }
}

fn check_range(name: &str, r: [f64; 2]) -> Result<()> {
    if !(r[0] > 0.0 && r[1] >= r[0] && r[1].is_finite()) {
        return Err(Error::Config(format!("{name} range {r:?} must be nonempty and positive")));
    }
    Ok(())
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        check_range("c", self.c_range)?;
        check_range("t_max", self.t_max_range)?;
        let positive = [
            ("u", self.u),
            ("bandwidth_mbs", self.bandwidth_mbs),
            ("bandwidth_sbs", self.bandwidth_sbs),
            ("path_loss_exponent", self.path_loss_exponent),
            ("area_side", self.area_side),
            ("user_tx_power", self.user_tx_power),
            ("f_local", self.f_local),
            ("f_sbs", self.f_sbs),
            ("f_mbs", self.f_mbs),
            ("link_capacity", self.link_capacity),
            ("h_min", self.h_min),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.h_min > 1.0 {
            return Err(Error::Config("h_min must be <= 1".into()));
        }
        if self.o1 < 0.0 || self.o2 < 0.0 || self.kappa < 0.0 {
            return Err(Error::Config("o1, o2 and kappa must be >= 0".into()));
        }
        Ok(())
    }

    pub fn energy_per_cycle(&self) -> (f64, f64, f64) {
        let derive = |f: f64| self.kappa * f * f;
        (
            self.e_local.unwrap_or_else(|| derive(self.f_local)),
            self.e_sbs.unwrap_or_else(|| derive(self.f_sbs)),
            self.e_mbs.unwrap_or_else(|| derive(self.f_mbs)),
        )
    }
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

/// Channel gain `max(d, 1)^(-exponent)`.
pub fn path_gain(d: f64, exponent: f64) -> f64 {
    d.max(1.0).powf(-exponent)
}

/// Builds a reproducible scenario from `config`.
pub fn generate_scenario<T: Real>(config: &ScenarioConfig) -> Result<Scenario<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let side = config.area_side;
    let (e_local, e_sbs, e_mbs) = config.energy_per_cycle();
    let bs_power = dbm_to_watts(config.bs_tx_power_dbm);

    let mut positions = vec![[side / 2.0, side / 2.0]];
    for _ in 0..config.n_sbs {
        positions.push([rng.gen_range(0.0..=side), rng.gen_range(0.0..=side)]);
    }
    let stations: Vec<Station<T>> = positions
        .iter()
        .enumerate()
        .map(|(id, p)| {
            let mbs = id == MBS;
            Station {
                id,
                kind: if mbs { StationKind::Mbs } else { StationKind::Sbs },
                f: T::lit(if mbs { config.f_mbs } else { config.f_sbs }),
                bandwidth: T::lit(if mbs { config.bandwidth_mbs } else { config.bandwidth_sbs }),
                tx_power: T::lit(bs_power),
                e_cycle: T::lit(if mbs { e_mbs } else { e_sbs }),
                position: [T::lit(p[0]), T::lit(p[1])],
            }
        })
        .collect();

    let mut tasks = Vec::with_capacity(config.n_tasks);
    let mut task_pos = Vec::with_capacity(config.n_tasks);
    for id in 0..config.n_tasks {
        let c = rng.gen_range(config.c_range[0]..=config.c_range[1]);
        let t_max = rng.gen_range(config.t_max_range[0]..=config.t_max_range[1]);
        tasks.push(Task { id, c: T::lit(c), t_max: T::lit(t_max), u: T::lit(config.u) });
        task_pos.push([rng.gen_range(0.0..=side), rng.gen_range(0.0..=side)]);
    }

    let gain = positions
        .iter()
        .map(|bp| {
            task_pos
                .iter()
                .map(|tp| {
                    let d = ((bp[0] - tp[0]).powi(2) + (bp[1] - tp[1]).powi(2)).sqrt();
                    T::lit(path_gain(d, config.path_loss_exponent))
                })
                .collect()
        })
        .collect();

    let noise = dbm_to_watts(config.noise_density_dbm_hz) * config.bandwidth_sbs.max(config.bandwidth_mbs);
    let graph = build_graph(config.n_tasks, config.n_sbs, config);

    let scenario = Scenario {
        tasks,
        stations,
        device: LocalDevice {
            f_local: T::lit(config.f_local),
            e_local: T::lit(e_local),
            tx_power: T::lit(config.user_tx_power),
        },
        channel: ChannelMatrix {
            gain,
            noise_power: T::lit(noise),
            offload_power_sbs_mbs: T::lit(config.offload_power_sbs_mbs),
        },
        graph,
        h_min: T::lit(config.h_min),
    };
    scenario.validate()?;
    Ok(scenario)
}

/// Shortest-hop wiring: each SBS reaches the MBS through its own
/// backhaul link, one forwarding unit and an uplink to the MBS. Wireless
/// access hops carry no wired elements.
pub fn build_graph<T: Real>(n_tasks: usize, n_sbs: usize, config: &ScenarioConfig) -> NetworkGraph<T> {
    let mut forwarding_units = Vec::with_capacity(n_sbs);
    let mut links = Vec::with_capacity(2 * n_sbs);
    let mut relay = Vec::with_capacity(n_sbs);
    for k in 0..n_sbs {
        let sbs = k + 1;
        forwarding_units.push(ForwardingUnit { id: k, o1: T::lit(config.o1), o2: T::lit(config.o2) });
        let up = 2 * k;
        links.push(Link {
            id: up,
            endpoints: (Node::Station(sbs), Node::Forwarding(k)),
            capacity: T::lit(config.link_capacity),
        });
        links.push(Link {
            id: up + 1,
            endpoints: (Node::Forwarding(k), Node::Station(MBS)),
            capacity: T::lit(config.link_capacity),
        });
        relay.push(Path::terminated(vec![
            PathElement::Link(up),
            PathElement::Forwarding(k),
            PathElement::Link(up + 1),
        ]));
    }
    let mut paths = Vec::with_capacity(n_tasks * (2 + 2 * n_sbs));
    for task in 0..n_tasks {
        paths.push(PathEntry { task, target: PathTarget::Local, path: Path::terminated(vec![]) });
        for b in 0..=n_sbs {
            paths.push(PathEntry { task, target: PathTarget::Station(b), path: Path::terminated(vec![]) });
        }
        for k in 0..n_sbs {
            paths.push(PathEntry { task, target: PathTarget::Relay(k + 1), path: relay[k].clone() });
        }
    }
    paths.sort_by(|a, b| (a.task, a.target).cmp(&(b.task, b.target)));
    NetworkGraph { forwarding_units, links, paths }
}
