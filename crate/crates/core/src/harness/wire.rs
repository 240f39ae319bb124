//! NDJSON protocol for policies running in a child process.
//!
//! The child writes one handshake line on startup, then answers each request
//! line on stdin with exactly one response line on stdout:
//!
//! ```text
//! <- {"protocol_version":1,"policy_name":"my-model","reentrant":false}
//! -> {"type":"step","episode_id":3,"step":0,"goal_text":"...","cloud":{"transport":"inline","points":[[x,y,z],...]}}
//! <- {"pick_mask":{"len":N,"runs":[...]},"target_mask":{...},"done_probability":0.02}
//! -> {"type":"shutdown"}
//! ```
//!
//! Instead of masks a child may answer `{"queries": QueryOutputs}`, which the
//! harness decodes with pair selection. With file transport the cloud is
//! written in the binary cloud format and the request carries its path.

use super::policy::{Observation, Policy, PolicyError, PolicyOutput};
use crate::pair_select::QueryOutputs;
use crate::perception::{ActionMaskPair, LabeledPointCloud, Mask};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Handshake {
    pub protocol_version: u32,
    pub policy_name: String,
    pub reentrant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InlineLabels {
    pub instance: Vec<u32>,
    pub semantic: Vec<u8>,
    pub color: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "transport", rename_all = "kebab-case")]
pub enum CloudPayload {
    Inline {
        points: Vec<[f32; 3]>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        labels: Option<InlineLabels>,
    },
    File {
        path: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRequest {
    pub episode_id: u64,
    pub step: u32,
    pub goal_text: String,
    pub cloud: CloudPayload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Request {
    Step(StepRequest),
    Shutdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Response {
    Masks {
        pick_mask: Mask,
        target_mask: Mask,
        done_probability: f64,
    },
    Queries {
        queries: QueryOutputs,
    },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExternalConfig {
    /// Send instance, semantic and color labels along with inline points.
    pub include_labels: bool,
    /// Write clouds here and send paths instead of inline points.
    pub cloud_dir: Option<PathBuf>,
}

struct Channel {
    child: Child,
    stdin: Option<ChildStdin>,
    stdout: BufReader<ChildStdout>,
}

impl Channel {
    fn read_line(&mut self) -> Result<String, PolicyError> {
        let mut line = String::new();
        let n = self
            .stdout
            .read_line(&mut line)
            .map_err(|e| PolicyError::Protocol(format!("read failed: {e}")))?;
        if n == 0 {
            return Err(PolicyError::Protocol("policy closed its output".into()));
        }
        Ok(line)
    }

    fn send(&mut self, request: &Request) -> Result<(), PolicyError> {
        let stdin = self
            .stdin
            .as_mut()
            .ok_or_else(|| PolicyError::Protocol("policy input closed".into()))?;
        let mut line =
            serde_json::to_string(request).map_err(|e| PolicyError::Internal(e.to_string()))?;
        line.push('\n');
        stdin
            .write_all(line.as_bytes())
            .and_then(|_| stdin.flush())
            .map_err(|e| PolicyError::Protocol(format!("write failed: {e}")))
    }
}

/// A policy behind a child process. Requests are serialized through one
/// channel; episodes are interleaved only when the child declares itself
/// reentrant.
pub struct ExternalPolicy {
    handshake: Handshake,
    config: ExternalConfig,
    channel: Mutex<Channel>,
}

impl ExternalPolicy {
    pub fn spawn(command: &str, config: ExternalConfig) -> Result<Self, PolicyError> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| PolicyError::Internal(format!("cannot start {command:?}: {e}")))?;
        let stdin = child.stdin.take();
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        let mut channel = Channel {
            child,
            stdin,
            stdout,
        };
        let line = channel.read_line()?;
        let handshake: Handshake = serde_json::from_str(&line).map_err(|e| {
            PolicyError::Protocol(format!("bad handshake {:?}: {e}", line.trim_end()))
        })?;
        if handshake.protocol_version != PROTOCOL_VERSION {
            return Err(PolicyError::Protocol(format!(
                "protocol version {} unsupported (expected {PROTOCOL_VERSION})",
                handshake.protocol_version
            )));
        }
        Ok(ExternalPolicy {
            handshake,
            config,
            channel: Mutex::new(channel),
        })
    }

    pub fn handshake(&self) -> &Handshake {
        &self.handshake
    }

    fn payload(&self, obs: &Observation<'_>) -> Result<CloudPayload, PolicyError> {
        let cloud: &LabeledPointCloud = obs.cloud;
        if let Some(dir) = &self.config.cloud_dir {
            let path = dir.join(format!("episode-{}-step-{}.bbpc", obs.episode_id, obs.step));
            let file = std::fs::File::create(&path)
                .map_err(|e| PolicyError::Internal(format!("{}: {e}", path.display())))?;
            let shown = if self.config.include_labels {
                cloud.clone()
            } else {
                cloud.unlabeled()
            };
            shown
                .write_binary(std::io::BufWriter::new(file))
                .map_err(|e| PolicyError::Internal(e.to_string()))?;
            return Ok(CloudPayload::File {
                path: path.display().to_string(),
            });
        }
        let labels = self.config.include_labels.then(|| InlineLabels {
            instance: cloud.instance.clone(),
            semantic: cloud.semantic.iter().map(|&c| c as u8).collect(),
            color: cloud.color.clone(),
        });
        Ok(CloudPayload::Inline {
            points: cloud.points.clone(),
            labels,
        })
    }
}

pub fn check_response(response: Response, points: usize) -> Result<PolicyOutput, PolicyError> {
    match response {
        Response::Masks {
            pick_mask,
            target_mask,
            done_probability,
        } => {
            if pick_mask.len() != points || target_mask.len() != points {
                return Err(PolicyError::Protocol(format!(
                    "mask lengths {} / {} do not match the {points}-point cloud",
                    pick_mask.len(),
                    target_mask.len()
                )));
            }
            if !(0.0..=1.0).contains(&done_probability) {
                return Err(PolicyError::Protocol(format!(
                    "done probability {done_probability} outside [0, 1]"
                )));
            }
            Ok(PolicyOutput::Masks(ActionMaskPair {
                pick_mask,
                target_mask,
                done_probability,
            }))
        }
        Response::Queries { queries } => {
            queries
                .validate()
                .map_err(|e| PolicyError::Protocol(e.to_string()))?;
            if queries.masks.len() != queries.query_count()
                || queries.masks.iter().any(|m| m.len() != points)
            {
                return Err(PolicyError::Protocol(
                    "query masks must cover the cloud, one per query".into(),
                ));
            }
            if !(0.0..=1.0).contains(&queries.done_probability) {
                return Err(PolicyError::Protocol(
                    "done probability outside [0, 1]".into(),
                ));
            }
            Ok(PolicyOutput::Queries(queries))
        }
    }
}

impl Policy for ExternalPolicy {
    fn name(&self) -> String {
        self.handshake.policy_name.clone()
    }

    fn privileged(&self) -> bool {
        self.config.include_labels
    }

    fn reentrant(&self) -> bool {
        self.handshake.reentrant
    }

    fn act(&self, obs: &Observation<'_>) -> Result<PolicyOutput, PolicyError> {
        let request = Request::Step(StepRequest {
            episode_id: obs.episode_id,
            step: obs.step,
            goal_text: obs.goal_text.to_string(),
            cloud: self.payload(obs)?,
        });
        let line = {
            let mut channel = self
                .channel
                .lock()
                .map_err(|_| PolicyError::Internal("policy channel poisoned".into()))?;
            channel.send(&request)?;
            channel.read_line()?
        };
        let response: Response = serde_json::from_str(&line)
            .map_err(|e| PolicyError::Protocol(format!("bad response: {e}")))?;
        check_response(response, obs.cloud.len())
    }
}

impl Drop for ExternalPolicy {
    fn drop(&mut self) {
        if let Ok(channel) = self.channel.get_mut() {
            let _ = channel.send(&Request::Shutdown);
            channel.stdin = None;
            if channel.child.wait().is_err() {
                let _ = channel.child.kill();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_wire_shape() {
        let r = Request::Step(StepRequest {
            episode_id: 3,
            step: 1,
            goal_text: "g".into(),
            cloud: CloudPayload::Inline {
                points: vec![[1.0, 2.0, 3.0]],
                labels: None,
            },
        });
        assert_eq!(
            serde_json::to_string(&r).unwrap(),
            r#"{"type":"step","episode_id":3,"step":1,"goal_text":"g","cloud":{"transport":"inline","points":[[1.0,2.0,3.0]]}}"#
        );
        assert_eq!(
            serde_json::to_string(&Request::Shutdown).unwrap(),
            r#"{"type":"shutdown"}"#
        );
    }

    #[test]
    fn responses_parse_and_validate() {
        let masks = r#"{"pick_mask":{"len":3,"runs":[0,1,2]},"target_mask":{"len":3,"runs":[2,1]},"done_probability":0.1}"#;
        let r: Response = serde_json::from_str(masks).unwrap();
        let PolicyOutput::Masks(m) = check_response(r.clone(), 3).unwrap() else {
            panic!()
        };
        assert_eq!(m.pick_mask.ones().collect::<Vec<_>>(), vec![0]);
        assert_eq!(m.target_mask.ones().collect::<Vec<_>>(), vec![2]);
        assert!(check_response(r, 4).is_err());
        assert!(serde_json::from_str::<Response>(r#"{"pick_mask":1}"#).is_err());
    }

    #[test]
    fn external_child_round_trip() {
        let script = r#"echo '{"protocol_version":1,"policy_name":"null","reentrant":true}'; while read line; do case "$line" in *shutdown*) exit 0;; esac; echo '{"pick_mask":{"len":0,"runs":[0]},"target_mask":{"len":0,"runs":[0]},"done_probability":1.0}'; done"#;
        let p = ExternalPolicy::spawn(script, ExternalConfig::default()).unwrap();
        assert_eq!(p.name(), "null");
        assert!(p.reentrant());
        let s = crate::warehouse::fixtures::scene(&[], &[]);
        let cloud = LabeledPointCloud::default();
        let task = crate::tasks::sample_task(
            crate::tasks::TaskVariant::BasicPlacement,
            0,
            crate::tasks::TemplateSet::Training,
        );
        let obs = Observation {
            episode_id: 0,
            episode_seed: 0,
            step: 0,
            goal_text: "x",
            task: &task,
            state: &s,
            cloud: &cloud,
        };
        let PolicyOutput::Masks(m) = p.act(&obs).unwrap() else {
            panic!()
        };
        assert_eq!(m.done_probability, 1.0);
    }

    #[test]
    fn bad_handshake_is_protocol_error() {
        let err = ExternalPolicy::spawn("echo hello", ExternalConfig::default())
            .err()
            .unwrap();
        assert!(matches!(err, PolicyError::Protocol(_)));
    }
}
