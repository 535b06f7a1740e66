//! The scenario DSL: a line-oriented script driving one simulation run.
//!
//! One statement per line; `#` starts a comment; blank lines are ignored.
//! Durations take a unit suffix (`250ms`, `6s`, `2m`); a bare integer is
//! milliseconds. The full grammar is documented in `scenarios/README.md`
//! at the repository root, next to the example corpus.

use callmesh_core::time::{Millis, DESCRIPTOR_VALIDITY};
use callmesh_mesh::conference::Track;

/// A parse failure, pointing at the offending line.
#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("line {line}: {message}")]
pub struct ScenarioError {
    pub line: usize,
    pub message: String,
}

/// Invite delivery mode as written in a `call` statement.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CallMode {
    Push,
    Email,
}

/// One executable statement, tagged with its source line.
#[derive(Clone, Debug, PartialEq)]
pub enum Step {
    Provision {
        user: String,
        devices: Vec<String>,
    },
    Call {
        device: String,
        target: String,
        mode: CallMode,
    },
    Accept {
        device: String,
    },
    Decline {
        device: String,
    },
    Cancel {
        device: String,
    },
    Merge {
        device: String,
    },
    /// Force the device-local ring timeout on the ringing invite.
    Timeout {
        device: String,
    },
    /// Paste `from`'s oldest undelivered email blob into `to`.
    DeliverEmail {
        to: String,
        from: String,
    },
    Chat {
        device: String,
        text: String,
    },
    Typing {
        device: String,
        active: bool,
    },
    Media {
        device: String,
        tracks: Vec<Track>,
    },
    NoMedia {
        device: String,
    },
    Break {
        a: String,
        b: String,
    },
    Heal {
        a: String,
        b: String,
    },
    /// Silently discard the next `count` outgoing payloads containing
    /// `needle` (matched against wire frames, their bodies, and pushes).
    Drop {
        count: u32,
        needle: String,
    },
    Advance {
        dur: Millis,
    },
    Assert(Assertion),
}

/// A checkable claim about the world. Failures abort the run.
#[derive(Clone, Debug, PartialEq)]
pub enum Assertion {
    /// `idle` means no record is in a live state; any other name means at
    /// least one record is in that state.
    State {
        device: String,
        state: String,
    },
    /// Overlay link count of the device's current conference node.
    Links {
        device: String,
        n: usize,
    },
    Link {
        a: String,
        b: String,
    },
    NoLink {
        a: String,
        b: String,
    },
    Missed {
        device: String,
        n: u64,
    },
    /// Cancels received that actually stopped a ringing invite.
    Cancels {
        device: String,
        n: u64,
    },
    /// Invites suppressed because the target was already reachable.
    Suppressed {
        device: String,
        n: u64,
    },
    /// All devices share a conference and its replicas are byte-identical.
    Converged {
        devices: Vec<String>,
    },
    Messages {
        device: String,
        n: usize,
    },
    /// Total media edges known to the device's model.
    MediaEdges {
        device: String,
        n: usize,
    },
    /// Media edges where the device is the subscriber.
    Edges {
        device: String,
        n: usize,
    },
    RouteHops {
        a: String,
        b: String,
        n: u32,
    },
    /// The device never received a push.
    NoSignaling {
        device: String,
    },
    TypingSeen {
        device: String,
        n: usize,
    },
}

/// A parsed script: run parameters plus steps in source order.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub seed: u64,
    pub link_delay: Millis,
    pub descriptor_validity: Millis,
    /// `(source line, step)` pairs.
    pub steps: Vec<(usize, Step)>,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            seed: 1,
            link_delay: 10,
            descriptor_validity: DESCRIPTOR_VALIDITY,
            steps: Vec::new(),
        }
    }
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Scenario, ScenarioError> {
        let mut sc = Scenario::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let stmt = match raw.find('#') {
                Some(pos) => raw[..pos].trim(),
                None => raw.trim(),
            };
            if stmt.is_empty() {
                continue;
            }
            match parse_statement(stmt) {
                Ok(Parsed::Seed(s)) => sc.seed = s,
                Ok(Parsed::LinkDelay(d)) => sc.link_delay = d,
                Ok(Parsed::DescriptorValidity(d)) => sc.descriptor_validity = d,
                Ok(Parsed::Step(step)) => sc.steps.push((line, step)),
                Err(message) => return Err(ScenarioError { line, message }),
            }
        }
        Ok(sc)
    }
}

enum Parsed {
    Seed(u64),
    LinkDelay(Millis),
    DescriptorValidity(Millis),
    Step(Step),
}

fn parse_statement(stmt: &str) -> Result<Parsed, String> {
    let words: Vec<&str> = stmt.split_whitespace().collect();
    let head = words[0];
    let args = &words[1..];
    let step = match head {
        "seed" => {
            let [v] = exact(args, 1, "seed <integer>")?;
            return Ok(Parsed::Seed(
                v.parse().map_err(|_| format!("bad seed `{v}`"))?,
            ));
        }
        "param" => {
            let [name, value] = exact(args, 2, "param <name> <value>")?;
            return match name {
                "link_delay" => Ok(Parsed::LinkDelay(parse_duration(value)?)),
                "descriptor_validity" => Ok(Parsed::DescriptorValidity(parse_duration(value)?)),
                other => Err(format!("unknown param `{other}`")),
            };
        }
        "provision" => {
            if args.len() < 2 {
                return Err("provision <user> <device>...".into());
            }
            Step::Provision {
                user: args[0].to_string(),
                devices: args[1..].iter().map(|s| s.to_string()).collect(),
            }
        }
        "call" | "invite" => {
            let mode = match args {
                [_, _] => CallMode::Push,
                [_, _, "push"] => CallMode::Push,
                [_, _, "email"] => CallMode::Email,
                _ => return Err("call <device> <target> [push|email]".into()),
            };
            Step::Call {
                device: args[0].to_string(),
                target: args[1].to_string(),
                mode,
            }
        }
        "accept" => Step::Accept {
            device: one(args, "accept <device>")?,
        },
        "decline" => Step::Decline {
            device: one(args, "decline <device>")?,
        },
        "cancel" => Step::Cancel {
            device: one(args, "cancel <device>")?,
        },
        "merge" => Step::Merge {
            device: one(args, "merge <device>")?,
        },
        "timeout" => Step::Timeout {
            device: one(args, "timeout <device>")?,
        },
        "deliver_email" => {
            let [to, from] = exact(args, 2, "deliver_email <to-device> <from-device>")?;
            Step::DeliverEmail {
                to: to.to_string(),
                from: from.to_string(),
            }
        }
        "chat" => {
            let (device, text) = head_and_rest(stmt, "chat")?;
            if text.is_empty() {
                return Err("chat <device> <text>".into());
            }
            Step::Chat { device, text }
        }
        "typing" => {
            let [device, state] = exact(args, 2, "typing <device> on|off")?;
            let active = match state {
                "on" => true,
                "off" => false,
                other => return Err(format!("typing state must be on|off, got `{other}`")),
            };
            Step::Typing {
                device: device.to_string(),
                active,
            }
        }
        "media" => {
            if args.len() < 2 {
                return Err("media <device> <audio|video>...".into());
            }
            let mut tracks = Vec::new();
            for t in &args[1..] {
                tracks.push(match *t {
                    "audio" => Track::Audio,
                    "video" => Track::Video,
                    other => return Err(format!("unknown track `{other}`")),
                });
            }
            Step::Media {
                device: args[0].to_string(),
                tracks,
            }
        }
        "nomedia" => Step::NoMedia {
            device: one(args, "nomedia <device>")?,
        },
        "break" => {
            let [a, b] = exact(args, 2, "break <deviceA> <deviceB>")?;
            Step::Break {
                a: a.to_string(),
                b: b.to_string(),
            }
        }
        "heal" => {
            let [a, b] = exact(args, 2, "heal <deviceA> <deviceB>")?;
            Step::Heal {
                a: a.to_string(),
                b: b.to_string(),
            }
        }
        "drop" => {
            let (count_word, needle) = head_and_rest(stmt, "drop")?;
            let count: u32 = count_word
                .parse()
                .map_err(|_| format!("bad drop count `{count_word}`"))?;
            if needle.is_empty() {
                return Err("drop <count> <substring>".into());
            }
            Step::Drop { count, needle }
        }
        "advance" => {
            let [d] = exact(args, 1, "advance <duration>")?;
            Step::Advance {
                dur: parse_duration(d)?,
            }
        }
        "assert" => Step::Assert(parse_assertion(args)?),
        other => return Err(format!("unknown statement `{other}`")),
    };
    Ok(Parsed::Step(step))
}

fn parse_assertion(args: &[&str]) -> Result<Assertion, String> {
    if args.is_empty() {
        return Err("assert <kind> ...".into());
    }
    let kind = args[0];
    let rest = &args[1..];
    Ok(match kind {
        "state" => {
            let [device, state] = exact(rest, 2, "assert state <device> <state>")?;
            Assertion::State {
                device: device.to_string(),
                state: state.to_string(),
            }
        }
        "links" => {
            let [device, n] = exact(rest, 2, "assert links <device> <n>")?;
            Assertion::Links {
                device: device.to_string(),
                n: int(n)?,
            }
        }
        "link" => {
            let [a, b] = exact(rest, 2, "assert link <deviceA> <deviceB>")?;
            Assertion::Link {
                a: a.to_string(),
                b: b.to_string(),
            }
        }
        "no_link" => {
            let [a, b] = exact(rest, 2, "assert no_link <deviceA> <deviceB>")?;
            Assertion::NoLink {
                a: a.to_string(),
                b: b.to_string(),
            }
        }
        "missed" => {
            let [device, n] = exact(rest, 2, "assert missed <device> <n>")?;
            Assertion::Missed {
                device: device.to_string(),
                n: int(n)?,
            }
        }
        "cancels" => {
            let [device, n] = exact(rest, 2, "assert cancels <device> <n>")?;
            Assertion::Cancels {
                device: device.to_string(),
                n: int(n)?,
            }
        }
        "suppressed" => {
            let [device, n] = exact(rest, 2, "assert suppressed <device> <n>")?;
            Assertion::Suppressed {
                device: device.to_string(),
                n: int(n)?,
            }
        }
        "converged" => {
            if rest.len() < 2 {
                return Err("assert converged <device> <device>...".into());
            }
            Assertion::Converged {
                devices: rest.iter().map(|s| s.to_string()).collect(),
            }
        }
        "messages" => {
            let [device, n] = exact(rest, 2, "assert messages <device> <n>")?;
            Assertion::Messages {
                device: device.to_string(),
                n: int(n)?,
            }
        }
        "media_edges" => {
            let [device, n] = exact(rest, 2, "assert media_edges <device> <n>")?;
            Assertion::MediaEdges {
                device: device.to_string(),
                n: int(n)?,
            }
        }
        "edges" => {
            let [device, n] = exact(rest, 2, "assert edges <device> <n>")?;
            Assertion::Edges {
                device: device.to_string(),
                n: int(n)?,
            }
        }
        "route_hops" => {
            let [a, b, n] = exact(rest, 3, "assert route_hops <deviceA> <deviceB> <n>")?;
            Assertion::RouteHops {
                a: a.to_string(),
                b: b.to_string(),
                n: int(n)?,
            }
        }
        "no_signaling" => {
            let [device] = exact(rest, 1, "assert no_signaling <device>")?;
            Assertion::NoSignaling {
                device: device.to_string(),
            }
        }
        "typing_seen" => {
            let [device, n] = exact(rest, 2, "assert typing_seen <device> <n>")?;
            Assertion::TypingSeen {
                device: device.to_string(),
                n: int(n)?,
            }
        }
        other => return Err(format!("unknown assertion `{other}`")),
    })
}

/// Parse `250ms`, `6s`, `2m`, or a bare millisecond count.
pub fn parse_duration(s: &str) -> Result<Millis, String> {
    let (digits, factor) = if let Some(d) = s.strip_suffix("ms") {
        (d, 1)
    } else if let Some(d) = s.strip_suffix('s') {
        (d, 1_000)
    } else if let Some(d) = s.strip_suffix('m') {
        (d, 60_000)
    } else {
        (s, 1)
    };
    let n: Millis = digits.parse().map_err(|_| format!("bad duration `{s}`"))?;
    Ok(n * factor)
}

fn exact<'a, const N: usize>(
    args: &[&'a str],
    n: usize,
    usage: &str,
) -> Result<[&'a str; N], String> {
    if args.len() != n {
        return Err(usage.to_string());
    }
    Ok(std::array::from_fn(|i| args[i]))
}

fn one(args: &[&str], usage: &str) -> Result<String, String> {
    let [d] = exact(args, 1, usage)?;
    Ok(d.to_string())
}

fn int<T: std::str::FromStr>(s: &str) -> Result<T, String> {
    s.parse().map_err(|_| format!("bad integer `{s}`"))
}

/// Split `"<keyword> <word> <rest...>"` into the word and the verbatim rest.
fn head_and_rest(stmt: &str, keyword: &str) -> Result<(String, String), String> {
    let after = stmt[keyword.len()..].trim_start();
    match after.split_once(char::is_whitespace) {
        Some((word, rest)) => Ok((word.to_string(), rest.trim().to_string())),
        None if !after.is_empty() => Ok((after.to_string(), String::new())),
        None => Err(format!("{keyword}: missing arguments")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_grammar_round_trip() {
        let text = "\
# a comment
seed 42
param link_delay 25ms
param descriptor_validity 90s

provision alice@example.org x y
call x bob@example.org
call x bob@example.org email   # trailing comment
accept b
decline a
cancel x
merge e
timeout a
deliver_email b x
chat x hello there world
typing x on
media x audio video
nomedia x
break x b
heal x b
drop 2 \"kind\":\"answer\"
advance 1500ms
advance 2s
advance 3m
advance 40
assert state b active
assert links x 1
assert link x b
assert no_link x a
assert missed a 1
assert cancels c 1
assert suppressed c 1
assert converged x b c
assert messages x 2
assert media_edges x 6
assert edges b 1
assert route_hops x b 2
assert no_signaling y
assert typing_seen b 1
";
        let sc = Scenario::parse(text).expect("parses");
        assert_eq!(sc.seed, 42);
        assert_eq!(sc.link_delay, 25);
        assert_eq!(sc.descriptor_validity, 90_000);
        assert_eq!(sc.steps.len(), 34);
        assert_eq!(
            sc.steps[1].1,
            Step::Call {
                device: "x".into(),
                target: "bob@example.org".into(),
                mode: CallMode::Push
            }
        );
        assert_eq!(
            sc.steps[2].1,
            Step::Call {
                device: "x".into(),
                target: "bob@example.org".into(),
                mode: CallMode::Email
            }
        );
        assert_eq!(
            sc.steps[9].1,
            Step::Chat {
                device: "x".into(),
                text: "hello there world".into()
            }
        );
        assert_eq!(
            sc.steps[15].1,
            Step::Drop {
                count: 2,
                needle: "\"kind\":\"answer\"".into()
            }
        );
        assert_eq!(sc.steps[16].1, Step::Advance { dur: 1500 });
        assert_eq!(sc.steps[17].1, Step::Advance { dur: 2000 });
        assert_eq!(sc.steps[18].1, Step::Advance { dur: 180_000 });
        assert_eq!(sc.steps[19].1, Step::Advance { dur: 40 });
    }

    #[test]
    fn errors_carry_the_line_number() {
        let err = Scenario::parse("seed 1\n\nwobble x\n").unwrap_err();
        assert_eq!(err.line, 3);
        assert!(err.message.contains("wobble"));

        let err = Scenario::parse("advance 5x\n").unwrap_err();
        assert_eq!(err.line, 1);

        let err = Scenario::parse("assert links x\n").unwrap_err();
        assert_eq!(err.line, 1);
        assert!(err.message.contains("assert links"));

        let err = Scenario::parse("provision alice@example.org\n").unwrap_err();
        assert!(err.message.contains("provision"));
    }

    #[test]
    fn defaults_apply_when_not_set() {
        let sc = Scenario::parse("advance 1s\n").unwrap();
        assert_eq!(sc.seed, 1);
        assert_eq!(sc.link_delay, 10);
        assert_eq!(sc.descriptor_validity, DESCRIPTOR_VALIDITY);
    }
}
