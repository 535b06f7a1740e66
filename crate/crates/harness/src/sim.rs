//! The deterministic whole-system simulation.
//!
//! One [`Sim`] owns a relay, any number of provisioned devices, and a
//! single virtual clock. Devices run the real production state machines —
//! the signaling engine, and per conference an overlay node, a replicated
//! store, and a conference model. The simulation is the embedding layer:
//! it turns effects into scheduled deliveries, wires, timers, and log
//! lines, and it never consults wall time or an unseeded RNG. A run is a
//! pure function of `(seed, scenario)`: two runs produce byte-identical
//! event logs.
//!
//! Time only moves in [`Sim::advance`]. Every in-flight push and overlay
//! frame is a task in one priority queue ordered by `(due instant,
//! sequence number)`, so delivery order is total and reproducible.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};

use serde_json::Value;

use callmesh_core::id::IdError;
use callmesh_core::message::{DescriptorRole, SessionDescriptor};
use callmesh_core::time::{Millis, DESCRIPTOR_VALIDITY};
use callmesh_core::{
    AuthToken, ConferenceId, ContactToken, IdGen, InstanceId, InviteId, NodeId, Target, UserId,
};
use callmesh_mesh::conference::{ConferenceModel, ModelEffect, ModelError, StreamEdge, Track};
use callmesh_mesh::overlay::{Frame, OverlayEvent, OverlayNode};
use callmesh_mesh::storage::{Store, StoreEffect};
use callmesh_relay::service::{PushEnvelope, PushTransport, RelayError, RelayService};
use callmesh_signaling::engine::{
    Direction, EngineConfig, InviteState, SignalEffect, SignalMode, SignalingEngine, SignalingError,
};

use crate::scenario::{Assertion, CallMode, Scenario, Step};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("unknown device `{0}`")]
    UnknownDevice(String),
    #[error("device name `{0}` is already taken")]
    DuplicateDevice(String),
    #[error("device `{0}` has no ringing invite")]
    NothingRinging(String),
    #[error("device `{0}` has no outstanding outbound invite")]
    NothingInviting(String),
    #[error("device `{0}` is in no conference")]
    NoConference(String),
    #[error("device `{0}` has no undelivered email blob")]
    NoEmail(String),
    #[error("invalid target `{0}`")]
    BadTarget(String),
    #[error("signaling: {0}")]
    Signaling(#[from] SignalingError),
    #[error("relay: {0}")]
    Relay(#[from] RelayError),
    #[error("conference: {0}")]
    Model(#[from] ModelError),
    #[error("id: {0}")]
    Id(#[from] IdError),
    #[error("assertion failed: {0}")]
    AssertFailed(String),
}

/// A step failure, tagged with the scenario source line.
#[derive(Debug, thiserror::Error)]
#[error("line {line}: {source}")]
pub struct StepError {
    pub line: usize,
    #[source]
    pub source: SimError,
}

/// Tunable world parameters (scenario `param` statements).
#[derive(Clone, Copy, Debug)]
pub struct SimParams {
    /// One-way latency of pushes and overlay frames.
    pub link_delay: Millis,
    /// How long a freshly minted session descriptor can still connect.
    pub descriptor_validity: Millis,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            link_delay: 10,
            descriptor_validity: DESCRIPTOR_VALIDITY,
        }
    }
}

/// Outcome of a `call` step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CallOutcome {
    /// An invite went out.
    Invited(InviteId),
    /// The target was already present and reachable in the caller's
    /// conference: no new invite, no new link.
    Suppressed,
}

/// Append-only, tab-separated run log. Byte-identical across runs with the
/// same seed and scenario — the replay check diffs exactly these bytes.
#[derive(Debug, Default)]
pub struct EventLog {
    lines: Vec<String>,
}

impl EventLog {
    fn push(&mut self, t: Millis, who: &str, what: &str, detail: &str) {
        self.lines.push(format!("t={t}\t{who}\t{what}\t{detail}"));
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn render(&self) -> String {
        let mut out = self.lines.join("\n");
        if !out.is_empty() {
            out.push('\n');
        }
        out
    }
}

/// A queued piece of future work. Ordering fields are all `Ord` so the
/// scheduler tuple has a total order (the sequence number already breaks
/// every tie).
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Task {
    /// Run the signaling engine's due deadlines.
    EngineTick { device: String },
    /// Run a conference model's due deadlines.
    ModelTick { device: String, conf: ConferenceId },
    /// A push lands on a device (serialized payload object).
    Push { device: String, data: String },
    /// An overlay frame crosses a link (serialized frame).
    Wire {
        from: NodeId,
        to: NodeId,
        raw: String,
    },
}

/// Everything one conference means to one device.
struct Floor {
    conf: ConferenceId,
    overlay: OverlayNode,
    store: Store,
    model: ConferenceModel,
}

/// One provisioned device: account identity plus live state machines.
struct Device {
    user: UserId,
    auth: AuthToken,
    instance: InstanceId,
    engine: SignalingEngine,
    /// Mints this device's session descriptors.
    desc_ids: IdGen,
    floors: BTreeMap<ConferenceId, Floor>,
    /// The conference most recently opened on this device.
    current_conf: Option<ConferenceId>,
    /// Email blobs produced, oldest first; `outbox_read` marks delivery.
    outbox: Vec<(InviteId, String)>,
    outbox_read: usize,
    pushes_received: u64,
    /// Cancels that actually stopped a ringing invite here.
    cancels: u64,
    /// Invites not sent because the target was already reachable.
    suppressed: u64,
}

impl Device {
    fn floor_by_node_mut(&mut self, node: &NodeId) -> Option<&mut Floor> {
        self.floors.values_mut().find(|f| f.overlay.id() == node)
    }

    fn current_floor(&self) -> Option<&Floor> {
        self.current_conf.as_ref().and_then(|c| self.floors.get(c))
    }
}

#[derive(Debug)]
struct DropRule {
    remaining: u32,
    needle: String,
}

/// Push transport that records deliveries for the scheduler to pick up.
#[derive(Default)]
struct CaptureTransport {
    deliveries: Vec<(ContactToken, PushEnvelope)>,
}

impl PushTransport for CaptureTransport {
    fn deliver(
        &mut self,
        contact: &ContactToken,
        envelope: &PushEnvelope,
    ) -> callmesh_relay::service::DeliverOutcome {
        self.deliveries.push((contact.clone(), envelope.clone()));
        callmesh_relay::service::DeliverOutcome::Delivered
    }
}

pub struct Sim {
    now: Millis,
    seq: u64,
    queue: BinaryHeap<Reverse<(Millis, u64, Task)>>,
    relay: RelayService,
    devices: BTreeMap<String, Device>,
    contact_owner: BTreeMap<ContactToken, String>,
    node_owner: BTreeMap<NodeId, String>,
    /// Live transport links between conference nodes (normalized pairs).
    links: BTreeSet<(NodeId, NodeId)>,
    /// Links cut by `break`, remembered so `heal` can restore them.
    severed: BTreeSet<(NodeId, NodeId)>,
    drops: Vec<DropRule>,
    ids: IdGen,
    params: SimParams,
    log: EventLog,
}

fn ordered(a: &NodeId, b: &NodeId) -> (NodeId, NodeId) {
    if a <= b {
        (a.clone(), b.clone())
    } else {
        (b.clone(), a.clone())
    }
}

fn feed_store_effects(floor: &mut Floor, sfx: Vec<StoreEffect>, out: &mut Vec<OverlayEvent>) {
    for s in sfx {
        match s {
            StoreEffect::Flood { body } => {
                let (_, evs) = floor.overlay.flood(body);
                out.extend(evs);
            }
            StoreEffect::SendTo { peer, body } => {
                if let Ok((_, evs)) = floor.overlay.send_to(peer, body) {
                    out.extend(evs);
                }
            }
        }
    }
}

impl Sim {
    pub fn new(seed: u64) -> Self {
        Self::with_params(seed, SimParams::default())
    }

    pub fn with_params(seed: u64, params: SimParams) -> Self {
        Self {
            now: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            relay: RelayService::new(),
            devices: BTreeMap::new(),
            contact_owner: BTreeMap::new(),
            node_owner: BTreeMap::new(),
            links: BTreeSet::new(),
            severed: BTreeSet::new(),
            drops: Vec::new(),
            ids: IdGen::from_seed(seed),
            params,
            log: EventLog::default(),
        }
    }

    pub fn for_scenario(sc: &Scenario) -> Self {
        Self::with_params(
            sc.seed,
            SimParams {
                link_delay: sc.link_delay,
                descriptor_validity: sc.descriptor_validity,
            },
        )
    }

    /// Execute a parsed scenario from the top.
    pub fn run(&mut self, sc: &Scenario) -> Result<(), StepError> {
        for (line, step) in &sc.steps {
            self.run_step(step).map_err(|source| StepError {
                line: *line,
                source,
            })?;
        }
        Ok(())
    }

    pub fn run_step(&mut self, step: &Step) -> Result<(), SimError> {
        match step {
            Step::Provision { user, devices } => {
                let names: Vec<&str> = devices.iter().map(String::as_str).collect();
                self.provision(user, &names)
            }
            Step::Call {
                device,
                target,
                mode,
            } => self.call(device, target, *mode).map(|_| ()),
            Step::Accept { device } => self.accept(device).map(|_| ()),
            Step::Decline { device } => self.decline(device),
            Step::Cancel { device } => self.cancel_call(device),
            Step::Merge { device } => self.merge(device).map(|_| ()),
            Step::Timeout { device } => self.timeout_ring(device),
            Step::DeliverEmail { to, from } => self.deliver_email(to, from),
            Step::Chat { device, text } => self.chat(device, text),
            Step::Typing { device, active } => self.typing(device, *active),
            Step::Media { device, tracks } => self.media(device, tracks.clone()),
            Step::NoMedia { device } => self.nomedia(device),
            Step::Break { a, b } => self.break_link(a, b),
            Step::Heal { a, b } => self.heal_link(a, b),
            Step::Drop { count, needle } => {
                self.add_drop(*count, needle);
                Ok(())
            }
            Step::Advance { dur } => {
                self.advance(*dur);
                Ok(())
            }
            Step::Assert(a) => self.check(a),
        }
    }

    // ---- clock and scheduler ----------------------------------------------

    pub fn now(&self) -> Millis {
        self.now
    }

    /// Move virtual time forward, firing every task due on the way.
    pub fn advance(&mut self, dur: Millis) {
        let target = self.now + dur;
        while let Some(Reverse((at, _, _))) = self.queue.peek() {
            if *at > target {
                break;
            }
            let Reverse((at, _, task)) = self.queue.pop().expect("peeked");
            self.now = at;
            self.fire(task);
        }
        self.now = target;
    }

    fn schedule(&mut self, at: Millis, task: Task) {
        self.seq += 1;
        self.queue.push(Reverse((at.max(self.now), self.seq, task)));
    }

    fn fire(&mut self, task: Task) {
        match task {
            Task::EngineTick { device } => {
                let Some(d) = self.devices.get_mut(&device) else {
                    return;
                };
                let effects = d.engine.tick(self.now);
                self.apply_signal_effects(&device, effects);
                self.sweep_floors(&device);
            }
            Task::ModelTick { device, conf } => {
                let now = self.now;
                let Some(d) = self.devices.get_mut(&device) else {
                    return;
                };
                let Some(floor) = d.floors.get_mut(&conf) else {
                    return;
                };
                let node = floor.overlay.id().clone();
                let fx = floor.model.tick(now);
                self.run_model_effects(&node, fx);
            }
            Task::Push { device, data } => {
                let Ok(Value::Object(map)) = serde_json::from_str::<Value>(&data) else {
                    return;
                };
                let kind = map
                    .get("kind")
                    .and_then(Value::as_str)
                    .unwrap_or("?")
                    .to_string();
                let from = map
                    .get("From")
                    .and_then(Value::as_str)
                    .unwrap_or("?")
                    .to_string();
                self.log.push(
                    self.now,
                    &device,
                    "deliver",
                    &format!("kind={kind} from={from}"),
                );
                let outcome = {
                    let Some(d) = self.devices.get_mut(&device) else {
                        return;
                    };
                    d.pushes_received += 1;
                    match d.engine.on_push(&map, self.now) {
                        Ok(fx) => {
                            if kind == "cancel" && !fx.is_empty() {
                                d.cancels += 1;
                            }
                            Ok(fx)
                        }
                        Err(e) => Err(e),
                    }
                };
                match outcome {
                    Ok(fx) => {
                        self.apply_signal_effects(&device, fx);
                        self.sweep_floors(&device);
                    }
                    Err(e) => self
                        .log
                        .push(self.now, &device, "push-error", &e.to_string()),
                }
            }
            Task::Wire { from, to, raw } => {
                if !self.links.contains(&ordered(&from, &to)) {
                    self.log.push(
                        self.now,
                        "sim",
                        "wire-lost",
                        &format!("from={from} to={to}"),
                    );
                    return;
                }
                let Some(owner) = self.node_owner.get(&to).cloned() else {
                    return;
                };
                let evs = {
                    let Some(d) = self.devices.get_mut(&owner) else {
                        return;
                    };
                    let Some(floor) = d.floor_by_node_mut(&to) else {
                        return;
                    };
                    floor.overlay.on_frame(&from, &raw)
                };
                self.pump(&to, evs);
            }
        }
    }

    // ---- provisioning -------------------------------------------------------

    /// Create one account (if new) and register each named device under it.
    pub fn provision(&mut self, user: &str, devices: &[&str]) -> Result<(), SimError> {
        let user_id = UserId::new(user)?;
        for name in devices {
            if self.devices.contains_key(*name) {
                return Err(SimError::DuplicateDevice(name.to_string()));
            }
            let auth = self.ids.auth_token();
            self.relay.provision(user_id.clone(), auth.clone())?;
            let contact = self.ids.contact_token(name);
            let out = self
                .relay
                .register_contact(&auth, contact.clone(), self.now)?;
            let engine = SignalingEngine::new(
                user_id.clone(),
                out.instance.clone(),
                self.ids.child(),
                EngineConfig::default(),
            );
            let desc_ids = self.ids.child();
            self.contact_owner.insert(contact, name.to_string());
            self.devices.insert(
                name.to_string(),
                Device {
                    user: user_id.clone(),
                    auth,
                    instance: out.instance.clone(),
                    engine,
                    desc_ids,
                    floors: BTreeMap::new(),
                    current_conf: None,
                    outbox: Vec::new(),
                    outbox_read: 0,
                    pushes_received: 0,
                    cancels: 0,
                    suppressed: 0,
                },
            );
            self.log.push(
                self.now,
                "sim",
                "provision",
                &format!("user={user} device={name} instance={}", out.instance),
            );
        }
        Ok(())
    }

    // ---- call control -------------------------------------------------------

    /// Start a call. If the target user is already present in the caller's
    /// current conference *and* reachable over the overlay, no invite is
    /// sent: inviting someone who is already here must not add a link.
    /// If the caller is already in a conference, the invite reuses it, so
    /// an accepted callee joins the existing session instead of a new one.
    pub fn call(
        &mut self,
        dev: &str,
        target: &str,
        mode: CallMode,
    ) -> Result<CallOutcome, SimError> {
        let target: Target = target
            .parse()
            .map_err(|_| SimError::BadTarget(target.to_string()))?;
        let target = self.resolve_target(target);
        let now = self.now;
        let reuse = {
            let d = self.dev(dev)?;
            if let Some(floor) = d.current_floor() {
                if let Some(entry) = floor.model.roster().get(&target.user) {
                    let reachable = entry.node == *floor.overlay.id()
                        || floor.overlay.route_to(&entry.node).is_some();
                    if reachable {
                        let d = self.devices.get_mut(dev).expect("checked");
                        d.suppressed += 1;
                        self.log
                            .push(now, dev, "suppressed", &format!("target={target}"));
                        return Ok(CallOutcome::Suppressed);
                    }
                }
            }
            d.current_floor()
                .map(|f| (f.conf.clone(), f.overlay.id().clone()))
        };
        let engine_mode = match mode {
            CallMode::Push => SignalMode::Push,
            CallMode::Email => SignalMode::Email,
        };
        let (invite, effects) = {
            let d = self.devices.get_mut(dev).expect("checked");
            d.engine
                .start_outbound(target.clone(), None, engine_mode, reuse, now)
        };
        self.log.push(
            now,
            dev,
            "call",
            &format!("invite={invite} target={target}"),
        );
        self.apply_signal_effects(dev, effects);
        Ok(CallOutcome::Invited(invite))
    }

    /// Accept the (oldest) ringing invite. If this device is already in
    /// the invite's conference — a partition heal — its existing node is
    /// reused instead of minting a fresh one.
    pub fn accept(&mut self, dev: &str) -> Result<InviteId, SimError> {
        let now = self.now;
        let invite = self.ringing_invite(dev)?;
        let reuse = {
            let d = self.dev(dev)?;
            let conf = d.engine.record(&invite).expect("just found").conf.clone();
            d.floors.get(&conf).map(|f| f.overlay.id().clone())
        };
        let effects = {
            let d = self.devices.get_mut(dev).expect("checked");
            d.engine.accept(&invite, reuse, now)?
        };
        self.log
            .push(now, dev, "accept", &format!("invite={invite}"));
        self.apply_signal_effects(dev, effects);
        Ok(invite)
    }

    pub fn decline(&mut self, dev: &str) -> Result<(), SimError> {
        let now = self.now;
        let invite = self.ringing_invite(dev)?;
        let effects = self
            .devices
            .get_mut(dev)
            .expect("checked")
            .engine
            .decline(&invite, now)?;
        self.log
            .push(now, dev, "decline", &format!("invite={invite}"));
        self.apply_signal_effects(dev, effects);
        Ok(())
    }

    /// Cancel this device's outstanding outbound invite.
    pub fn cancel_call(&mut self, dev: &str) -> Result<(), SimError> {
        let now = self.now;
        let invite = {
            let d = self.dev(dev)?;
            d.engine
                .records()
                .filter(|r| {
                    r.direction == Direction::Outbound && r.state == InviteState::OutboundInviting
                })
                .map(|r| (r.started_at, r.invite.clone()))
                .min()
                .map(|(_, i)| i)
                .ok_or_else(|| SimError::NothingInviting(dev.to_string()))?
        };
        let effects = self
            .devices
            .get_mut(dev)
            .expect("checked")
            .engine
            .cancel(&invite, now)?;
        self.log
            .push(now, dev, "cancel", &format!("invite={invite}"));
        self.apply_signal_effects(dev, effects);
        self.sweep_floors(dev);
        Ok(())
    }

    /// Merge the ringing invite into this device's current conference.
    pub fn merge(&mut self, dev: &str) -> Result<InviteId, SimError> {
        let now = self.now;
        let invite = self.ringing_invite(dev)?;
        let (conf, node) = {
            let d = self.dev(dev)?;
            let floor = d
                .current_floor()
                .ok_or_else(|| SimError::NoConference(dev.to_string()))?;
            (floor.conf.clone(), floor.overlay.id().clone())
        };
        let (counter, effects) = {
            let d = self.devices.get_mut(dev).expect("checked");
            d.engine.merge(&invite, conf, node, None, now)?
        };
        self.log.push(
            now,
            dev,
            "merge",
            &format!("invite={invite} counter={counter}"),
        );
        self.apply_signal_effects(dev, effects);
        Ok(counter)
    }

    /// Fire the device-local ring timeout on the ringing invite, as if this
    /// device's ring timer ran ahead of everyone else's.
    pub fn timeout_ring(&mut self, dev: &str) -> Result<(), SimError> {
        let now = self.now;
        let invite = self.ringing_invite(dev)?;
        let effects = {
            let d = self.devices.get_mut(dev).expect("checked");
            d.engine.force_ring_timeout(&invite, now)?
        };
        self.log
            .push(now, dev, "ring-timeout", &format!("invite={invite}"));
        self.apply_signal_effects(dev, effects);
        Ok(())
    }

    /// Hand-deliver `from`'s oldest undelivered email blob to `to` (the
    /// human pasting it). Expired or malformed blobs are logged, not fatal:
    /// scenarios assert on the resulting state.
    pub fn deliver_email(&mut self, to: &str, from: &str) -> Result<(), SimError> {
        let now = self.now;
        self.dev(to)?;
        let blob = {
            let f = self
                .devices
                .get_mut(from)
                .ok_or_else(|| SimError::UnknownDevice(from.to_string()))?;
            if f.outbox_read >= f.outbox.len() {
                return Err(SimError::NoEmail(from.to_string()));
            }
            let b = f.outbox[f.outbox_read].1.clone();
            f.outbox_read += 1;
            b
        };
        let outcome = self
            .devices
            .get_mut(to)
            .expect("checked")
            .engine
            .on_email_paste(&blob, now);
        match outcome {
            Ok(fx) => {
                self.log
                    .push(now, to, "email-paste", &format!("from={from}"));
                self.apply_signal_effects(to, fx);
                self.sweep_floors(to);
            }
            Err(e) => self.log.push(now, to, "email-error", &e.to_string()),
        }
        Ok(())
    }

    // ---- conference actions ---------------------------------------------------

    pub fn chat(&mut self, dev: &str, text: &str) -> Result<(), SimError> {
        let now = self.now;
        let (node, fx) = {
            let d = self
                .devices
                .get_mut(dev)
                .ok_or_else(|| SimError::UnknownDevice(dev.to_string()))?;
            let conf = d
                .current_conf
                .clone()
                .ok_or_else(|| SimError::NoConference(dev.to_string()))?;
            let floor = d.floors.get_mut(&conf).expect("current floor exists");
            let (_, fx) = floor.model.post_message(text, now)?;
            (floor.overlay.id().clone(), fx)
        };
        self.log.push(now, dev, "chat", text);
        self.run_model_effects(&node, fx);
        Ok(())
    }

    pub fn typing(&mut self, dev: &str, active: bool) -> Result<(), SimError> {
        let now = self.now;
        let (node, fx) = {
            let d = self
                .devices
                .get_mut(dev)
                .ok_or_else(|| SimError::UnknownDevice(dev.to_string()))?;
            let conf = d
                .current_conf
                .clone()
                .ok_or_else(|| SimError::NoConference(dev.to_string()))?;
            let floor = d.floors.get_mut(&conf).expect("current floor exists");
            (floor.overlay.id().clone(), floor.model.set_typing(active))
        };
        self.log
            .push(now, dev, "typing", if active { "on" } else { "off" });
        self.run_model_effects(&node, fx);
        Ok(())
    }

    pub fn media(&mut self, dev: &str, tracks: Vec<Track>) -> Result<(), SimError> {
        let now = self.now;
        let (node, fx) = {
            let d = self
                .devices
                .get_mut(dev)
                .ok_or_else(|| SimError::UnknownDevice(dev.to_string()))?;
            let conf = d
                .current_conf
                .clone()
                .ok_or_else(|| SimError::NoConference(dev.to_string()))?;
            let floor = d.floors.get_mut(&conf).expect("current floor exists");
            (floor.overlay.id().clone(), floor.model.enable_media(tracks))
        };
        self.log.push(now, dev, "media", "on");
        self.run_model_effects(&node, fx);
        Ok(())
    }

    pub fn nomedia(&mut self, dev: &str) -> Result<(), SimError> {
        let now = self.now;
        let (node, fx) = {
            let d = self
                .devices
                .get_mut(dev)
                .ok_or_else(|| SimError::UnknownDevice(dev.to_string()))?;
            let conf = d
                .current_conf
                .clone()
                .ok_or_else(|| SimError::NoConference(dev.to_string()))?;
            let floor = d.floors.get_mut(&conf).expect("current floor exists");
            (floor.overlay.id().clone(), floor.model.disable_media())
        };
        self.log.push(now, dev, "media", "off");
        self.run_model_effects(&node, fx);
        Ok(())
    }

    // ---- network control --------------------------------------------------------

    /// Cut every live link between two devices' conference nodes.
    pub fn break_link(&mut self, a: &str, b: &str) -> Result<(), SimError> {
        self.dev(a)?;
        self.dev(b)?;
        let pairs: Vec<(NodeId, NodeId)> = self
            .links
            .iter()
            .filter(|(x, y)| self.pair_owned_by(x, y, a, b))
            .cloned()
            .collect();
        self.log.push(
            self.now,
            "sim",
            "break",
            &format!("{a} {b} links={}", pairs.len()),
        );
        for (x, y) in pairs {
            self.links.remove(&(x.clone(), y.clone()));
            self.severed.insert((x.clone(), y.clone()));
            for (this, other) in [(&x, &y), (&y, &x)] {
                let evs = {
                    let Some(owner) = self.node_owner.get(this).cloned() else {
                        continue;
                    };
                    let Some(d) = self.devices.get_mut(&owner) else {
                        continue;
                    };
                    let Some(floor) = d.floor_by_node_mut(this) else {
                        continue;
                    };
                    floor.overlay.remove_link(other)
                };
                self.pump(this, evs);
            }
        }
        Ok(())
    }

    /// Restore links previously cut between two devices.
    pub fn heal_link(&mut self, a: &str, b: &str) -> Result<(), SimError> {
        self.dev(a)?;
        self.dev(b)?;
        let pairs: Vec<(NodeId, NodeId)> = self
            .severed
            .iter()
            .filter(|(x, y)| self.pair_owned_by(x, y, a, b))
            .cloned()
            .collect();
        self.log.push(
            self.now,
            "sim",
            "heal",
            &format!("{a} {b} links={}", pairs.len()),
        );
        for (x, y) in pairs {
            self.severed.remove(&(x.clone(), y.clone()));
            self.link_nodes(&x, &y);
        }
        Ok(())
    }

    /// Arm a drop rule: the next `count` outgoing payloads containing
    /// `needle` vanish in flight.
    pub fn add_drop(&mut self, count: u32, needle: &str) {
        self.log.push(
            self.now,
            "sim",
            "drop-armed",
            &format!("count={count} needle={needle}"),
        );
        self.drops.push(DropRule {
            remaining: count,
            needle: needle.to_string(),
        });
    }

    // ---- effect plumbing -----------------------------------------------------------

    fn apply_signal_effects(&mut self, dev: &str, effects: Vec<SignalEffect>) {
        let now = self.now;
        let mut work: VecDeque<SignalEffect> = effects.into();
        while let Some(fx) = work.pop_front() {
            match fx {
                SignalEffect::RequestOffer { invite } => {
                    let validity = self.params.descriptor_validity;
                    let result = {
                        let d = self.devices.get_mut(dev).expect("device exists");
                        let desc = SessionDescriptor {
                            role: DescriptorRole::Offer,
                            blob: d.desc_ids.descriptor_blob("offer"),
                            at: now,
                            validity,
                        };
                        d.engine.offer_ready(&invite, desc, now)
                    };
                    match result {
                        Ok(more) => work.extend(more),
                        Err(e) => self.log.push(now, dev, "engine-error", &e.to_string()),
                    }
                }
                SignalEffect::RequestAnswer {
                    invite,
                    remote_offer: _,
                } => {
                    let validity = self.params.descriptor_validity;
                    let result = {
                        let d = self.devices.get_mut(dev).expect("device exists");
                        let desc = SessionDescriptor {
                            role: DescriptorRole::Answer,
                            blob: d.desc_ids.descriptor_blob("answer"),
                            at: now,
                            validity,
                        };
                        d.engine.answer_ready(&invite, desc, now)
                    };
                    match result {
                        Ok(more) => work.extend(more),
                        Err(e) => self.log.push(now, dev, "engine-error", &e.to_string()),
                    }
                }
                SignalEffect::SendSignal { to, msg } => {
                    let kind = format!("{:?}", msg.kind).to_lowercase();
                    let data = msg.to_data();
                    let auth = self.devices.get(dev).expect("device exists").auth.clone();
                    let mut capture = CaptureTransport::default();
                    match self.relay.send(&auth, &to, data, now, &mut capture) {
                        Ok(out) => self.log.push(
                            now,
                            dev,
                            "push",
                            &format!("kind={kind} to={to} count={}", out.count),
                        ),
                        Err(e) => self.log.push(
                            now,
                            dev,
                            "send-failed",
                            &format!("kind={kind} to={to} error={e}"),
                        ),
                    }
                    for (contact, env) in capture.deliveries {
                        let Some(owner) = self.contact_owner.get(&contact).cloned() else {
                            continue;
                        };
                        let payload = serde_json::to_string(&env.data).expect("payload serializes");
                        if self.consume_drop(&payload, "") {
                            self.log.push(now, dev, "drop", &format!("push to {owner}"));
                            continue;
                        }
                        let at = now + self.params.link_delay;
                        self.schedule(
                            at,
                            Task::Push {
                                device: owner,
                                data: payload,
                            },
                        );
                    }
                }
                SignalEffect::EmailOut {
                    invite,
                    mailto: _,
                    blob,
                } => {
                    {
                        let d = self.devices.get_mut(dev).expect("device exists");
                        d.outbox.push((invite.clone(), blob));
                    }
                    self.log
                        .push(now, dev, "email-out", &format!("invite={invite}"));
                }
                SignalEffect::OpenConference {
                    conf,
                    node,
                    topic: _,
                } => {
                    self.ensure_floor(dev, &conf, &node);
                }
                SignalEffect::Connect {
                    invite,
                    conf: _,
                    local_node,
                    peer_node,
                    offer,
                    answer,
                } => {
                    if offer.is_fresh(now) && answer.is_fresh(now) {
                        self.link_nodes(&local_node, &peer_node);
                    } else {
                        self.log.push(
                            now,
                            dev,
                            "connect-failed",
                            &format!("invite={invite} stale"),
                        );
                        let more = {
                            let d = self.devices.get_mut(dev).expect("device exists");
                            d.engine.on_connect_failed(&invite, now).unwrap_or_default()
                        };
                        work.extend(more);
                        if let Some(peer_dev) = self.node_owner.get(&peer_node).cloned() {
                            let peer_fx = {
                                let p = self.devices.get_mut(&peer_dev).expect("owner exists");
                                p.engine.on_connect_failed(&invite, now).unwrap_or_default()
                            };
                            self.log.push(
                                now,
                                &peer_dev,
                                "connect-failed",
                                &format!("invite={invite} stale"),
                            );
                            self.apply_signal_effects(&peer_dev, peer_fx);
                            self.sweep_floors(&peer_dev);
                        }
                    }
                }
                SignalEffect::Notify {
                    invite,
                    direction: _,
                    text,
                    ring,
                } => {
                    let what = if ring { "ring" } else { "notify" };
                    self.log
                        .push(now, dev, what, &format!("invite={invite} {text}"));
                }
                SignalEffect::ClearNotify { invite } => {
                    self.log
                        .push(now, dev, "clear", &format!("invite={invite}"));
                }
                SignalEffect::MissedCall {
                    invite,
                    peer,
                    at: _,
                } => {
                    let who = peer
                        .map(|p| p.to_string())
                        .unwrap_or_else(|| "unknown".into());
                    self.log
                        .push(now, dev, "missed", &format!("invite={invite} peer={who}"));
                }
                SignalEffect::ArmTimer { at } => {
                    self.schedule(
                        at,
                        Task::EngineTick {
                            device: dev.to_string(),
                        },
                    );
                }
            }
        }
    }

    /// Create the device's floor for a conference if it doesn't exist yet,
    /// and make it current. Joining writes the roster entry, which floods
    /// to every connected replica.
    fn ensure_floor(&mut self, dev: &str, conf: &ConferenceId, node: &NodeId) {
        let exists = {
            let d = self.devices.get(dev).expect("device exists");
            d.floors.contains_key(conf)
        };
        if exists {
            let d = self.devices.get_mut(dev).expect("device exists");
            d.current_conf = Some(conf.clone());
            return;
        }
        let store_ids = self.ids.child();
        let model_ids = self.ids.child();
        let overlay_ids = self.ids.child();
        let join_fx = {
            let d = self.devices.get_mut(dev).expect("device exists");
            let mut store = Store::new(node.clone(), store_ids);
            store.subscribe_all();
            let mut model =
                ConferenceModel::new(conf.clone(), d.user.clone(), node.clone(), model_ids);
            let overlay = OverlayNode::new(node.clone(), overlay_ids);
            let fx = model.join();
            d.floors.insert(
                conf.clone(),
                Floor {
                    conf: conf.clone(),
                    overlay,
                    store,
                    model,
                },
            );
            d.current_conf = Some(conf.clone());
            fx
        };
        self.node_owner.insert(node.clone(), dev.to_string());
        self.log
            .push(self.now, dev, "open", &format!("conf={conf} node={node}"));
        self.run_model_effects(node, join_fx);
    }

    /// Build the physical link between two conference nodes (both overlay
    /// ends learn of it; stores snapshot-exchange on link-up). Idempotent.
    fn link_nodes(&mut self, a: &NodeId, b: &NodeId) {
        if a == b {
            return;
        }
        let (Some(da), Some(db)) = (
            self.node_owner.get(a).cloned(),
            self.node_owner.get(b).cloned(),
        ) else {
            return;
        };
        if !self.links.insert(ordered(a, b)) {
            return;
        }
        self.log
            .push(self.now, "sim", "link-up", &format!("{da}:{a} {db}:{b}"));
        for (this, other) in [(a, b), (b, a)] {
            let evs = {
                let owner = self.node_owner.get(this).cloned().expect("checked");
                let d = self.devices.get_mut(&owner).expect("owner exists");
                let Some(floor) = d.floor_by_node_mut(this) else {
                    continue;
                };
                floor.overlay.add_link(other.clone()).unwrap_or_default()
            };
            self.pump(this, evs);
        }
    }

    /// Drive one node's overlay/store/model loop to quiescence, scheduling
    /// any outbound frames and timers produced along the way.
    fn pump(&mut self, node: &NodeId, initial: Vec<OverlayEvent>) {
        let Some(dev_name) = self.node_owner.get(node).cloned() else {
            return;
        };
        let mut oq: VecDeque<OverlayEvent> = initial.into();
        loop {
            while let Some(ev) = oq.pop_front() {
                match ev {
                    OverlayEvent::Transmit { peer, frame } => {
                        let body = match &frame {
                            Frame::Flood { body, .. } | Frame::Unicast { body, .. } => body.clone(),
                            Frame::Routes { .. } => String::new(),
                        };
                        let raw = serde_json::to_string(&frame).expect("frames serialize");
                        if self.consume_drop(&raw, &body) {
                            self.log
                                .push(self.now, &dev_name, "drop", &format!("frame to {peer}"));
                            continue;
                        }
                        let at = self.now + self.params.link_delay;
                        self.schedule(
                            at,
                            Task::Wire {
                                from: node.clone(),
                                to: peer,
                                raw,
                            },
                        );
                    }
                    OverlayEvent::Deliver { body, .. } => {
                        let mut fresh = Vec::new();
                        {
                            let Some(d) = self.devices.get_mut(&dev_name) else {
                                continue;
                            };
                            let Some(floor) = d.floor_by_node_mut(node) else {
                                continue;
                            };
                            let sfx = floor.store.on_payload(&body);
                            feed_store_effects(floor, sfx, &mut fresh);
                        }
                        oq.extend(fresh);
                    }
                    OverlayEvent::LinkUp { peer } => {
                        let mut fresh = Vec::new();
                        {
                            let Some(d) = self.devices.get_mut(&dev_name) else {
                                continue;
                            };
                            let Some(floor) = d.floor_by_node_mut(node) else {
                                continue;
                            };
                            let sfx = floor.store.on_link_up(&peer);
                            feed_store_effects(floor, sfx, &mut fresh);
                        }
                        oq.extend(fresh);
                    }
                    OverlayEvent::LinkDown { .. } => {}
                    OverlayEvent::RouteMiss { dest } => {
                        self.log
                            .push(self.now, &dev_name, "route-miss", &format!("dest={dest}"));
                    }
                }
            }
            let observed = {
                let Some(d) = self.devices.get_mut(&dev_name) else {
                    return;
                };
                let Some(floor) = d.floor_by_node_mut(node) else {
                    return;
                };
                floor.store.drain_observed()
            };
            if observed.is_empty() {
                break;
            }
            let now = self.now;
            let model_fx = {
                let d = self.devices.get_mut(&dev_name).expect("owner exists");
                let floor = d.floor_by_node_mut(node).expect("floor exists");
                let mut fx = Vec::new();
                for ev in &observed {
                    fx.extend(floor.model.on_event(ev, now));
                }
                fx
            };
            let mut fresh = Vec::new();
            self.absorb_model_effects(node, model_fx, &mut fresh);
            oq.extend(fresh);
        }
    }

    /// Turn model effects into store writes (collecting the overlay events
    /// they cause), media-edge log lines, and timer tasks.
    fn absorb_model_effects(
        &mut self,
        node: &NodeId,
        fx: Vec<ModelEffect>,
        out: &mut Vec<OverlayEvent>,
    ) {
        let Some(dev_name) = self.node_owner.get(node).cloned() else {
            return;
        };
        let now = self.now;
        for f in fx {
            match f {
                ModelEffect::Put { path, value } => {
                    let Some(d) = self.devices.get_mut(&dev_name) else {
                        continue;
                    };
                    let Some(floor) = d.floor_by_node_mut(node) else {
                        continue;
                    };
                    let (_, sfx) = floor.store.put(&path, value);
                    feed_store_effects(floor, sfx, out);
                }
                ModelEffect::Delete { path } => {
                    let Some(d) = self.devices.get_mut(&dev_name) else {
                        continue;
                    };
                    let Some(floor) = d.floor_by_node_mut(node) else {
                        continue;
                    };
                    let (_, sfx) = floor.store.delete(&path);
                    feed_store_effects(floor, sfx, out);
                }
                ModelEffect::Notify { path, value } => {
                    let Some(d) = self.devices.get_mut(&dev_name) else {
                        continue;
                    };
                    let Some(floor) = d.floor_by_node_mut(node) else {
                        continue;
                    };
                    let sfx = floor.store.notify(&path, value);
                    feed_store_effects(floor, sfx, out);
                }
                ModelEffect::EdgeUp(e) => {
                    self.log.push(
                        now,
                        &dev_name,
                        "media-up",
                        &format!(
                            "stream={} pub={} sub={}",
                            e.stream, e.publisher, e.subscriber
                        ),
                    );
                }
                ModelEffect::EdgeDown(e) => {
                    self.log.push(
                        now,
                        &dev_name,
                        "media-down",
                        &format!(
                            "stream={} pub={} sub={}",
                            e.stream, e.publisher, e.subscriber
                        ),
                    );
                }
                ModelEffect::ArmTimer { at } => {
                    let conf = {
                        let Some(d) = self.devices.get_mut(&dev_name) else {
                            continue;
                        };
                        d.floor_by_node_mut(node).map(|fl| fl.conf.clone())
                    };
                    if let Some(conf) = conf {
                        self.schedule(
                            at,
                            Task::ModelTick {
                                device: dev_name.clone(),
                                conf,
                            },
                        );
                    }
                }
            }
        }
    }

    fn run_model_effects(&mut self, node: &NodeId, fx: Vec<ModelEffect>) {
        let mut initial = Vec::new();
        self.absorb_model_effects(node, fx, &mut initial);
        self.pump(node, initial);
    }

    /// Retire conference floors that end an exchange unused: no links, no
    /// one else in the roster, and no live invite pointing at them. This is
    /// how a caller's provisional conference disappears after a decline,
    /// cancel, timeout, or merge-reject.
    fn sweep_floors(&mut self, dev: &str) {
        let dead: Vec<(ConferenceId, NodeId)> = {
            let Some(d) = self.devices.get(dev) else {
                return;
            };
            d.floors
                .values()
                .filter(|f| f.overlay.links().is_empty())
                .filter(|f| f.model.roster().len() <= 1)
                .filter(|f| {
                    !d.engine
                        .records()
                        .any(|r| r.conf == f.conf && r.state != InviteState::Idle)
                })
                .map(|f| (f.conf.clone(), f.overlay.id().clone()))
                .collect()
        };
        for (conf, node) in dead {
            {
                let d = self.devices.get_mut(dev).expect("device exists");
                d.floors.remove(&conf);
                if d.current_conf.as_ref() == Some(&conf) {
                    d.current_conf = None;
                }
            }
            self.node_owner.remove(&node);
            self.severed.retain(|(x, y)| x != &node && y != &node);
            self.log
                .push(self.now, dev, "close", &format!("conf={conf}"));
        }
    }

    fn consume_drop(&mut self, raw: &str, body: &str) -> bool {
        for rule in &mut self.drops {
            if rule.remaining == 0 {
                continue;
            }
            if raw.contains(&rule.needle) || (!body.is_empty() && body.contains(&rule.needle)) {
                rule.remaining -= 1;
                return true;
            }
        }
        false
    }

    // ---- lookups ------------------------------------------------------------

    fn dev(&self, name: &str) -> Result<&Device, SimError> {
        self.devices
            .get(name)
            .ok_or_else(|| SimError::UnknownDevice(name.to_string()))
    }

    fn ringing_invite(&self, dev: &str) -> Result<InviteId, SimError> {
        let d = self.dev(dev)?;
        d.engine
            .records()
            .filter(|r| r.direction == Direction::Inbound && r.state == InviteState::InboundRinging)
            .map(|r| (r.started_at, r.invite.clone()))
            .min()
            .map(|(_, i)| i)
            .ok_or_else(|| SimError::NothingRinging(dev.to_string()))
    }

    /// Resolve a scripted target: `user/devname` pins the invite to the
    /// named device's registration (scripts know device names, not raw
    /// instance ids).
    fn resolve_target(&self, mut target: Target) -> Target {
        if let Some(inst) = &target.instance {
            if let Some(d) = self.devices.get(&inst.to_string()) {
                if d.user == target.user {
                    target.instance = Some(d.instance.clone());
                }
            }
        }
        target
    }

    fn pair_owned_by(&self, x: &NodeId, y: &NodeId, a: &str, b: &str) -> bool {
        let (Some(ox), Some(oy)) = (self.node_owner.get(x), self.node_owner.get(y)) else {
            return false;
        };
        (ox == a && oy == b) || (ox == b && oy == a)
    }

    // ---- inspection ------------------------------------------------------------

    pub fn device_names(&self) -> Vec<String> {
        self.devices.keys().cloned().collect()
    }

    /// Overlay link count of the device's current conference node.
    pub fn links_of(&self, dev: &str) -> Result<usize, SimError> {
        Ok(self
            .dev(dev)?
            .current_floor()
            .map_or(0, |f| f.overlay.links().len()))
    }

    /// Is there a live link between any node of `a` and any node of `b`?
    pub fn has_link(&self, a: &str, b: &str) -> Result<bool, SimError> {
        self.dev(a)?;
        self.dev(b)?;
        Ok(self
            .links
            .iter()
            .any(|(x, y)| self.pair_owned_by(x, y, a, b)))
    }

    pub fn missed_of(&self, dev: &str) -> Result<u64, SimError> {
        Ok(self.dev(dev)?.engine.missed_count() as u64)
    }

    pub fn cancels_of(&self, dev: &str) -> Result<u64, SimError> {
        Ok(self.dev(dev)?.cancels)
    }

    pub fn suppressed_of(&self, dev: &str) -> Result<u64, SimError> {
        Ok(self.dev(dev)?.suppressed)
    }

    pub fn pushes_of(&self, dev: &str) -> Result<u64, SimError> {
        Ok(self.dev(dev)?.pushes_received)
    }

    pub fn messages_of(&self, dev: &str) -> Result<usize, SimError> {
        Ok(self
            .dev(dev)?
            .current_floor()
            .map_or(0, |f| f.model.messages().len()))
    }

    pub fn media_edges_of(&self, dev: &str) -> Result<usize, SimError> {
        Ok(self
            .dev(dev)?
            .current_floor()
            .map_or(0, |f| f.model.edges().len()))
    }

    /// Media edges the device consumes (it is the subscriber).
    pub fn subscriber_edges_of(&self, dev: &str) -> Result<usize, SimError> {
        Ok(self.dev(dev)?.current_floor().map_or(0, |f| {
            let me = f.overlay.id();
            f.model
                .edges()
                .iter()
                .filter(|e| e.subscriber == *me)
                .count()
        }))
    }

    pub fn typing_seen_of(&self, dev: &str) -> Result<usize, SimError> {
        Ok(self
            .dev(dev)?
            .current_floor()
            .map_or(0, |f| f.model.typing_log().len()))
    }

    /// Hop count from `a`'s current node to `b`'s node in the same
    /// conference, if routed.
    pub fn route_hops(&self, a: &str, b: &str) -> Result<Option<u32>, SimError> {
        let da = self.dev(a)?;
        let db = self.dev(b)?;
        let Some(floor_a) = da.current_floor() else {
            return Ok(None);
        };
        let Some(floor_b) = db.floors.get(&floor_a.conf) else {
            return Ok(None);
        };
        Ok(floor_a
            .overlay
            .route_to(floor_b.overlay.id())
            .map(|r| r.hops))
    }

    /// True when all devices share at least one conference and every shared
    /// conference's store is byte-identical across them.
    pub fn converged(&self, devs: &[&str]) -> Result<bool, SimError> {
        let mut common: Option<BTreeSet<ConferenceId>> = None;
        for dev in devs {
            let confs: BTreeSet<ConferenceId> = self.dev(dev)?.floors.keys().cloned().collect();
            common = Some(match common {
                None => confs,
                Some(prev) => prev.intersection(&confs).cloned().collect(),
            });
        }
        let common = common.unwrap_or_default();
        if common.is_empty() {
            return Ok(false);
        }
        for conf in &common {
            let mut reference: Option<Vec<u8>> = None;
            for dev in devs {
                let bytes = self.dev(dev)?.floors[conf].store.canonical_bytes();
                match &reference {
                    None => reference = Some(bytes),
                    Some(r) if *r == bytes => {}
                    Some(_) => return Ok(false),
                }
            }
        }
        Ok(true)
    }

    /// Signaling summary of a device: `idle` when no record is live, else
    /// whether any record is in the named state.
    pub fn in_state(&self, dev: &str, state: &str) -> Result<bool, SimError> {
        let d = self.dev(dev)?;
        if state == "idle" {
            return Ok(d.engine.records().all(|r| r.state == InviteState::Idle));
        }
        let want = match state {
            "inviting" => InviteState::OutboundInviting,
            "ringing" => InviteState::InboundRinging,
            "active" => InviteState::Active,
            "declining" => InviteState::Declining,
            "rejected" => InviteState::Rejected,
            other => {
                return Err(SimError::AssertFailed(format!(
                    "unknown state name `{other}`"
                )))
            }
        };
        Ok(d.engine.records().any(|r| r.state == want))
    }

    pub fn check(&self, a: &Assertion) -> Result<(), SimError> {
        let fail = |msg: String| Err(SimError::AssertFailed(msg));
        match a {
            Assertion::State { device, state } => {
                if self.in_state(device, state)? {
                    Ok(())
                } else {
                    let states: Vec<String> = self
                        .dev(device)?
                        .engine
                        .records()
                        .map(|r| format!("{:?}", r.state))
                        .collect();
                    fail(format!("{device} not {state} (records: {states:?})"))
                }
            }
            Assertion::Links { device, n } => {
                let got = self.links_of(device)?;
                if got == *n {
                    Ok(())
                } else {
                    fail(format!("{device} has {got} links, expected {n}"))
                }
            }
            Assertion::Link { a, b } => {
                if self.has_link(a, b)? {
                    Ok(())
                } else {
                    fail(format!("no link between {a} and {b}"))
                }
            }
            Assertion::NoLink { a, b } => {
                if self.has_link(a, b)? {
                    fail(format!("unexpected link between {a} and {b}"))
                } else {
                    Ok(())
                }
            }
            Assertion::Missed { device, n } => {
                let got = self.missed_of(device)?;
                if got == *n {
                    Ok(())
                } else {
                    fail(format!("{device} has {got} missed calls, expected {n}"))
                }
            }
            Assertion::Cancels { device, n } => {
                let got = self.cancels_of(device)?;
                if got == *n {
                    Ok(())
                } else {
                    fail(format!(
                        "{device} saw {got} effective cancels, expected {n}"
                    ))
                }
            }
            Assertion::Suppressed { device, n } => {
                let got = self.suppressed_of(device)?;
                if got == *n {
                    Ok(())
                } else {
                    fail(format!("{device} suppressed {got} invites, expected {n}"))
                }
            }
            Assertion::Converged { devices } => {
                let refs: Vec<&str> = devices.iter().map(String::as_str).collect();
                if self.converged(&refs)? {
                    Ok(())
                } else {
                    fail(format!("replicas of {devices:?} have not converged"))
                }
            }
            Assertion::Messages { device, n } => {
                let got = self.messages_of(device)?;
                if got == *n {
                    Ok(())
                } else {
                    fail(format!("{device} sees {got} messages, expected {n}"))
                }
            }
            Assertion::MediaEdges { device, n } => {
                let got = self.media_edges_of(device)?;
                if got == *n {
                    Ok(())
                } else {
                    fail(format!("{device} sees {got} media edges, expected {n}"))
                }
            }
            Assertion::Edges { device, n } => {
                let got = self.subscriber_edges_of(device)?;
                if got == *n {
                    Ok(())
                } else {
                    fail(format!(
                        "{device} subscribes to {got} streams, expected {n}"
                    ))
                }
            }
            Assertion::RouteHops { a, b, n } => match self.route_hops(a, b)? {
                Some(got) if got == *n => Ok(()),
                Some(got) => fail(format!("route {a}->{b} is {got} hops, expected {n}")),
                None => fail(format!("no route from {a} to {b}")),
            },
            Assertion::NoSignaling { device } => {
                let got = self.pushes_of(device)?;
                if got == 0 {
                    Ok(())
                } else {
                    fail(format!("{device} received {got} pushes, expected none"))
                }
            }
            Assertion::TypingSeen { device, n } => {
                let got = self.typing_seen_of(device)?;
                if got == *n {
                    Ok(())
                } else {
                    fail(format!("{device} saw {got} typing notifies, expected {n}"))
                }
            }
        }
    }

    // ---- output -------------------------------------------------------------------

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn render_log(&self) -> String {
        self.log.render()
    }

    /// Graphviz rendering of the current world: devices as nodes, overlay
    /// links solid, media edges dashed (labeled by stream owner).
    pub fn export_dot(&self) -> String {
        let mut out = String::from("graph callmesh {\n");
        for (name, d) in &self.devices {
            out.push_str(&format!("  \"{name}\" [label=\"{name}\\n{}\"];\n", d.user));
        }
        for (x, y) in &self.links {
            let (Some(a), Some(b)) = (self.node_owner.get(x), self.node_owner.get(y)) else {
                continue;
            };
            out.push_str(&format!("  \"{a}\" -- \"{b}\";\n"));
        }
        let mut media: BTreeSet<(String, String, String)> = BTreeSet::new();
        for d in self.devices.values() {
            for floor in d.floors.values() {
                for e in floor.model.edges() {
                    let (Some(p), Some(s)) = (
                        self.node_owner.get(&e.publisher),
                        self.node_owner.get(&e.subscriber),
                    ) else {
                        continue;
                    };
                    media.insert((p.clone(), s.clone(), e.stream.to_string()));
                }
            }
        }
        for (p, s, stream) in &media {
            out.push_str(&format!(
                "  \"{p}\" -- \"{s}\" [style=dashed, label=\"{stream}\"];\n"
            ));
        }
        out.push_str("}\n");
        out
    }

    /// The media edges every device currently believes in (deduplicated).
    pub fn all_media_edges(&self) -> BTreeSet<StreamEdge> {
        let mut edges = BTreeSet::new();
        for d in self.devices.values() {
            for floor in d.floors.values() {
                edges.extend(floor.model.edges().iter().cloned());
            }
        }
        edges
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn advance_and_settle(sim: &mut Sim, ms: Millis) {
        sim.advance(ms);
    }

    #[test]
    fn two_device_call_builds_one_link_and_converges() {
        let mut sim = Sim::new(7);
        sim.provision("alice@example.org", &["x"]).unwrap();
        sim.provision("bob@example.org", &["b"]).unwrap();
        let out = sim.call("x", "bob@example.org", CallMode::Push).unwrap();
        assert!(matches!(out, CallOutcome::Invited(_)));
        advance_and_settle(&mut sim, 50);
        assert!(sim.in_state("b", "ringing").unwrap());
        sim.accept("b").unwrap();
        advance_and_settle(&mut sim, 200);
        assert!(sim.in_state("x", "active").unwrap());
        assert!(sim.in_state("b", "active").unwrap());
        assert!(sim.has_link("x", "b").unwrap());
        assert_eq!(sim.links_of("x").unwrap(), 1);
        assert!(sim.converged(&["x", "b"]).unwrap());
    }

    #[test]
    fn decline_tears_everything_down_without_a_missed_call() {
        let mut sim = Sim::new(8);
        sim.provision("alice@example.org", &["x"]).unwrap();
        sim.provision("bob@example.org", &["b"]).unwrap();
        sim.call("x", "bob@example.org", CallMode::Push).unwrap();
        sim.advance(50);
        sim.decline("b").unwrap();
        sim.advance(6_000);
        assert!(sim.in_state("x", "idle").unwrap());
        assert!(sim.in_state("b", "idle").unwrap());
        assert_eq!(sim.missed_of("b").unwrap(), 0);
        assert!(!sim.has_link("x", "b").unwrap());
        // The caller's provisional conference is gone.
        assert_eq!(sim.links_of("x").unwrap(), 0);
    }

    #[test]
    fn same_seed_runs_are_byte_identical() {
        let script = |seed: u64| {
            let mut sim = Sim::new(seed);
            sim.provision("alice@example.org", &["x", "y"]).unwrap();
            sim.provision("bob@example.org", &["a", "b"]).unwrap();
            sim.call("x", "bob@example.org", CallMode::Push).unwrap();
            sim.advance(100);
            sim.accept("b").unwrap();
            sim.advance(500);
            sim.chat("x", "hello").unwrap();
            sim.advance(500);
            sim.render_log()
        };
        let one = script(42);
        let two = script(42);
        assert_eq!(one, two);
        let other = script(43);
        assert_ne!(one, other, "different seeds must mint different ids");
    }
}
