//! Queue-pair reduce/broadcast channels.
//!
//! Workers push `(value, tag)` into `<name>_in` on the owning task; the
//! reducer pops one element per worker, sums the values in arrival order and
//! pushes one copy of the sum into every worker's `<name>_out_<w>`. The tag
//! identifies the round: all W contributions of a round must carry the same
//! tag and tags must strictly increase, otherwise the barrier was broken.

use flowhpc_cluster::{ClusterError, Session};
use flowhpc_core::{kernels, GraphBuilder, NodeId, QueueRef, Tensor};

use crate::error::AppError;

#[derive(Clone, Debug)]
pub struct ReduceChannel {
    pub name: String,
    /// Task hosting the queues and the reducer, as `job:index`.
    pub owner: String,
    pub workers: usize,
    pub timeout_ms: u64,
}

impl ReduceChannel {
    pub fn new(name: impl Into<String>, owner: impl Into<String>, workers: usize) -> ReduceChannel {
        ReduceChannel { name: name.into(), owner: owner.into(), workers, timeout_ms: 30_000 }
    }

    pub fn with_timeout_ms(mut self, ms: u64) -> ReduceChannel {
        self.timeout_ms = ms;
        self
    }

    pub fn in_queue(&self) -> QueueRef {
        QueueRef::on(format!("{}_in", self.name), self.owner.clone())
            .with_capacity(self.workers as u32)
            .with_timeout_ms(self.timeout_ms)
    }

    pub fn out_queue(&self, w: usize) -> QueueRef {
        QueueRef::on(format!("{}_out_{w}", self.name), self.owner.clone())
            .with_capacity(2)
            .with_timeout_ms(self.timeout_ms)
    }

    /// Add one round to a worker graph. Returns the node yielding the
    /// reduced value; it runs only after `value` has been contributed.
    pub fn add_round(&self, g: &mut GraphBuilder, w: usize, value: NodeId, tag: NodeId) -> NodeId {
        let push = g.enqueue(&self.in_queue(), &[value, tag]);
        g.dequeue(&self.out_queue(w), 0, &[push])
    }
}

/// Contribute `local` for worker `w` through a session to the channel owner
/// and wait for the reduced value.
pub fn reduce_round(owner: &mut Session, ch: &ReduceChannel, w: usize, local: &Tensor, tag: f64) -> Result<Tensor, AppError> {
    owner.enqueue(&ch.in_queue(), &[local.clone(), Tensor::scalar_f64(tag)])?;
    let mut elem = owner.dequeue(&ch.out_queue(w))?;
    if elem.len() != 1 {
        return Err(AppError::Cluster(ClusterError::Protocol(format!("{}-component broadcast", elem.len()))));
    }
    Ok(elem.pop().unwrap())
}

#[derive(Clone, Debug, Default)]
pub struct ChannelStats {
    pub rounds: u64,
    pub tags: Vec<f64>,
}

/// Serve rounds on `ch` through a session to its owner until the incoming
/// queue is closed and drained.
pub fn serve_channel(owner: &mut Session, ch: &ReduceChannel) -> Result<ChannelStats, AppError> {
    let mut stats = ChannelStats::default();
    let inq = ch.in_queue();
    let mut last: Option<f64> = None;
    loop {
        let mut sum: Option<Tensor> = None;
        let mut tag = f64::NAN;
        for i in 0..ch.workers {
            let elem = match owner.dequeue(&inq) {
                Ok(e) => e,
                Err(e) if e.is_queue_closed() && i == 0 => return Ok(stats),
                Err(e) if e.is_queue_closed() => {
                    return Err(AppError::BarrierViolation {
                        channel: ch.name.clone(),
                        detail: format!("queue closed after {i} of {} contributions", ch.workers),
                    })
                }
                Err(e) => return Err(e.into()),
            };
            let [value, t] = <[Tensor; 2]>::try_from(elem).map_err(|e| {
                AppError::Cluster(ClusterError::Protocol(format!("{}-component contribution", e.len())))
            })?;
            let t = t.scalar_value()?;
            if i == 0 {
                if last.is_some_and(|l| t <= l) {
                    return Err(AppError::BarrierViolation {
                        channel: ch.name.clone(),
                        detail: format!("round tag {t} after {}", last.unwrap()),
                    });
                }
                tag = t;
            } else if t != tag {
                return Err(AppError::BarrierViolation {
                    channel: ch.name.clone(),
                    detail: format!("tag {t} arrived inside round {tag}"),
                });
            }
            sum = Some(match sum {
                None => value,
                Some(acc) => kernels::add(&acc, &value)?,
            });
        }
        let sum = sum.expect("at least one worker");
        for w in 0..ch.workers {
            owner.enqueue(&ch.out_queue(w), std::slice::from_ref(&sum))?;
        }
        last = Some(tag);
        stats.rounds += 1;
        stats.tags.push(tag);
    }
}

/// Close the incoming queue so the reducer exits after draining.
pub fn close_channel(owner: &mut Session, ch: &ReduceChannel) -> Result<(), AppError> {
    owner.close_queue(&ch.in_queue())?;
    Ok(())
}
