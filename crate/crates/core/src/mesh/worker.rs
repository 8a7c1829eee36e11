use std::collections::VecDeque;
use std::sync::Arc;
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, RecvTimeoutError, Sender};

use super::MeshShape;
use crate::error::{MeshError, Result};
use crate::tensor::{Element, Payload, Real};

/// Direction along a mesh axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Dir {
    Lo,
    Hi,
}

impl Dir {
    pub fn flip(self) -> Dir {
        match self {
            Dir::Lo => Dir::Hi,
            Dir::Hi => Dir::Lo,
        }
    }
}

/// Message channel kinds. Halo messages carry the tensor dimension and the
/// direction of travel so that concurrent per-axis phases never alias.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Tag {
    Halo { dim: usize, travel: Dir },
    Reduce,
    Broadcast,
    Barrier,
    Release,
    Abort,
}

#[derive(Debug)]
pub(crate) struct Envelope {
    src: usize,
    tag: Tag,
    payload: Payload,
}

/// Traffic counters, in bytes unless noted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CommStats {
    pub halo_bytes: u64,
    pub collective_bytes: u64,
    pub partition_bytes: u64,
    pub messages: u64,
}

impl CommStats {
    pub fn merge(&mut self, o: &CommStats) {
        self.halo_bytes += o.halo_bytes;
        self.collective_bytes += o.collective_bytes;
        self.partition_bytes += o.partition_bytes;
        self.messages += o.messages;
    }

    pub fn total_bytes(&self) -> u64 {
        self.halo_bytes + self.collective_bytes + self.partition_bytes
    }
}

/// One device's view of the mesh for the duration of a [`DeviceMesh::run`]
/// job: its coordinate, an inbox, and send endpoints to its peers.
///
/// Messages from a given sender arrive in send order; receives match on
/// (sender, tag) and park anything else until it is asked for.
///
/// [`DeviceMesh::run`]: super::DeviceMesh::run
pub struct Worker {
    rank: usize,
    coord: Vec<usize>,
    shape: Arc<MeshShape>,
    peers: Vec<Sender<Envelope>>,
    inbox: Receiver<Envelope>,
    parked: VecDeque<Envelope>,
    timeout: Duration,
    stats: CommStats,
}

impl Worker {
    pub(crate) fn new(
        rank: usize,
        shape: Arc<MeshShape>,
        peers: Vec<Sender<Envelope>>,
        inbox: Receiver<Envelope>,
        timeout: Duration,
    ) -> Self {
        Worker {
            rank,
            coord: shape.coord_of(rank),
            shape,
            peers,
            inbox,
            parked: VecDeque::new(),
            timeout,
            stats: CommStats::default(),
        }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn coord(&self) -> &[usize] {
        &self.coord
    }

    pub fn mesh_shape(&self) -> &MeshShape {
        &self.shape
    }

    pub fn stats(&self) -> CommStats {
        self.stats
    }

    /// Neighbour rank one step along `axis`.
    pub fn neighbor(&self, axis: usize, dir: Dir) -> Option<usize> {
        self.shape.neighbor(self.rank, axis, dir)
    }

    fn send(&mut self, dst: usize, tag: Tag, payload: Payload) {
        // A closed inbox means the peer already finished or failed; the
        // failure surfaces through the driver, not here.
        let _ = self.peers[dst].send(Envelope {
            src: self.rank,
            tag,
            payload,
        });
    }

    fn recv_where(
        &mut self,
        during: &str,
        expect_from: &[usize],
        mut accept: impl FnMut(&Envelope) -> bool,
    ) -> Result<Envelope> {
        if let Some(i) = self.parked.iter().position(&mut accept) {
            return Ok(self.parked.remove(i).expect("position is valid"));
        }
        let deadline = Instant::now() + self.timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            match self.inbox.recv_timeout(left) {
                Ok(env) if env.tag == Tag::Abort => {
                    return Err(MeshError::Shutdown {
                        coord: self.coord.clone(),
                        origin: self.shape.coord_of(env.src),
                    }
                    .into());
                }
                Ok(env) if accept(&env) => return Ok(env),
                Ok(env) => self.parked.push_back(env),
                Err(RecvTimeoutError::Timeout) => {
                    return Err(MeshError::Timeout {
                        waiting: self.coord.clone(),
                        during: during.to_string(),
                        unarrived: expect_from.iter().map(|&r| self.shape.coord_of(r)).collect(),
                        timeout_ms: self.timeout.as_millis(),
                    }
                    .into());
                }
                Err(RecvTimeoutError::Disconnected) => return Err(MeshError::Disconnected.into()),
            }
        }
    }

    fn recv_from(&mut self, src: usize, tag: Tag, during: &str) -> Result<Payload> {
        self.recv_where(during, &[src], |e| e.src == src && e.tag == tag)
            .map(|e| e.payload)
    }

    /// Sends a halo slab for tensor dimension `dim` to the neighbour in
    /// direction `toward` along mesh axis `axis`.
    pub fn send_halo<T: Element>(&mut self, axis: usize, toward: Dir, dim: usize, data: Vec<T>) -> Result<()> {
        let dst = self.neighbor(axis, toward).ok_or_else(|| MeshError::NotNeighbor {
            from: self.coord.clone(),
            to: vec![],
        })?;
        let payload = T::into_payload(data);
        self.stats.halo_bytes += payload.byte_len() as u64;
        self.stats.messages += 1;
        self.send(dst, Tag::Halo { dim, travel: toward }, payload);
        Ok(())
    }

    /// Receives the halo slab for `dim` from the neighbour in direction
    /// `from` along `axis`.
    pub fn recv_halo<T: Element>(&mut self, axis: usize, from: Dir, dim: usize) -> Result<Vec<T>> {
        let src = self.neighbor(axis, from).ok_or_else(|| MeshError::NotNeighbor {
            from: vec![],
            to: self.coord.clone(),
        })?;
        let payload = self.recv_from(src, Tag::Halo { dim, travel: from.flip() }, "halo exchange")?;
        T::from_payload(payload).ok_or(MeshError::PayloadType { from: src }.into())
    }

    /// Blocks until every worker of the mesh has arrived.
    pub fn barrier(&mut self) -> Result<()> {
        let n = self.shape.worker_count();
        if n == 1 {
            return Ok(());
        }
        if self.rank == 0 {
            let mut arrived = vec![false; n];
            arrived[0] = true;
            for _ in 1..n {
                let missing: Vec<usize> = (0..n).filter(|&r| !arrived[r]).collect();
                let env = self.recv_where("barrier", &missing, |e| e.tag == Tag::Barrier)?;
                arrived[env.src] = true;
            }
            for r in 1..n {
                self.send(r, Tag::Release, Payload::Empty);
                self.stats.messages += 1;
            }
        } else {
            self.send(0, Tag::Barrier, Payload::Empty);
            self.stats.messages += 1;
            self.recv_from(0, Tag::Release, "barrier")?;
        }
        Ok(())
    }

    /// In-place element-wise sum over the group of workers that differ from
    /// this one only along `axes`.
    ///
    /// The lowest rank of the group accumulates contributions in ascending
    /// rank (coordinate) order and broadcasts the result, so the outcome is
    /// bitwise reproducible and identical on every member.
    pub fn all_reduce_sum<T: Real>(&mut self, data: &mut [T], axes: &[usize]) -> Result<()> {
        let group = self.shape.group(self.rank, axes);
        if group.len() == 1 {
            return Ok(());
        }
        let root = group[0];
        if self.rank == root {
            for &src in &group[1..] {
                let part = self.recv_from(src, Tag::Reduce, "all_reduce_sum")?;
                let part = T::from_payload(part).ok_or(MeshError::PayloadType { from: src })?;
                if part.len() != data.len() {
                    return Err(MeshError::CollectiveShape {
                        op: "all_reduce_sum",
                        coord: self.shape.coord_of(src),
                        expected: data.len(),
                        got: part.len(),
                    }
                    .into());
                }
                for (a, &b) in data.iter_mut().zip(&part) {
                    *a += b;
                }
            }
            for &dst in &group[1..] {
                let payload = T::into_payload(data.to_vec());
                self.stats.collective_bytes += payload.byte_len() as u64;
                self.stats.messages += 1;
                self.send(dst, Tag::Broadcast, payload);
            }
        } else {
            let payload = T::into_payload(data.to_vec());
            self.stats.collective_bytes += payload.byte_len() as u64;
            self.stats.messages += 1;
            self.send(root, Tag::Reduce, payload);
            let sum = self.recv_from(root, Tag::Broadcast, "all_reduce_sum")?;
            let sum = T::from_payload(sum).ok_or(MeshError::PayloadType { from: root })?;
            if sum.len() != data.len() {
                return Err(MeshError::CollectiveShape {
                    op: "all_reduce_sum",
                    coord: self.coord.clone(),
                    expected: data.len(),
                    got: sum.len(),
                }
                .into());
            }
            data.copy_from_slice(&sum);
        }
        Ok(())
    }

    /// Sum over every worker of the mesh.
    pub fn all_reduce_sum_all<T: Real>(&mut self, data: &mut [T]) -> Result<()> {
        let axes = self.shape.all_axes();
        self.all_reduce_sum(data, &axes)
    }

    pub(crate) fn broadcast_abort(&mut self) {
        for dst in 0..self.peers.len() {
            if dst != self.rank {
                self.send(dst, Tag::Abort, Payload::Empty);
            }
        }
    }
}
