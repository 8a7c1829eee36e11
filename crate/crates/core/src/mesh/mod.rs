//! Simulated device mesh.
//!
//! Every device is an OS thread owned by [`DeviceMesh`]. The driver submits
//! work with [`DeviceMesh::run`]: each worker receives its own input, a fresh
//! [`Worker`] handle wired to its peers, and executes the same closure. All
//! inter-worker data moves through channels; the only state the driver keeps
//! is the aggregated traffic counters.

mod layout;
mod worker;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use crossbeam_channel::{unbounded, Sender};

pub use layout::Layout;
pub use worker::{CommStats, Dir, Worker};

use crate::error::{Error, MeshError, Result};

/// Default limit on any single blocking wait inside a collective.
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

/// Named axes of the device grid. Ranks enumerate coordinates row-major,
/// so rank order is lexicographic coordinate order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MeshShape {
    axes: Vec<(String, usize)>,
}

impl MeshShape {
    pub fn new<S: AsRef<str>>(axes: &[(S, usize)]) -> Result<Self, MeshError> {
        if axes.is_empty() {
            return Err(MeshError::Empty);
        }
        let mut out: Vec<(String, usize)> = Vec::with_capacity(axes.len());
        for (name, size) in axes {
            let name = name.as_ref();
            if out.iter().any(|(n, _)| n == name) {
                return Err(MeshError::DuplicateAxis(name.to_string()));
            }
            if *size == 0 {
                return Err(MeshError::ZeroSize(name.to_string()));
            }
            out.push((name.to_string(), *size));
        }
        Ok(MeshShape { axes: out })
    }

    /// Parses `b=2,x=2,y=2`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut axes = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (name, size) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("mesh axis `{part}` is not name=size")))?;
            let size: usize = size
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("mesh axis `{part}` has a non-integer size")))?;
            axes.push((name.trim().to_string(), size));
        }
        Ok(MeshShape::new(&axes)?)
    }

    pub fn axes(&self) -> &[(String, usize)] {
        &self.axes
    }

    pub fn ndim(&self) -> usize {
        self.axes.len()
    }

    pub fn worker_count(&self) -> usize {
        self.axes.iter().map(|(_, s)| s).product()
    }

    pub fn axis_index(&self, name: &str) -> Option<usize> {
        self.axes.iter().position(|(n, _)| n == name)
    }

    pub fn axis_name(&self, axis: usize) -> &str {
        &self.axes[axis].0
    }

    pub fn axis_size(&self, axis: usize) -> usize {
        self.axes[axis].1
    }

    pub fn coord_of(&self, mut rank: usize) -> Vec<usize> {
        let mut coord = vec![0; self.axes.len()];
        for (d, (_, size)) in self.axes.iter().enumerate().rev() {
            coord[d] = rank % size;
            rank /= size;
        }
        coord
    }

    pub fn rank_of(&self, coord: &[usize]) -> usize {
        coord
            .iter()
            .zip(&self.axes)
            .fold(0, |acc, (&c, (_, size))| acc * size + c)
    }

    /// Rank one step along `axis`, if that coordinate exists.
    pub fn neighbor(&self, rank: usize, axis: usize, dir: Dir) -> Option<usize> {
        let mut coord = self.coord_of(rank);
        match dir {
            Dir::Lo if coord[axis] == 0 => None,
            Dir::Lo => {
                coord[axis] -= 1;
                Some(self.rank_of(&coord))
            }
            Dir::Hi if coord[axis] + 1 == self.axes[axis].1 => None,
            Dir::Hi => {
                coord[axis] += 1;
                Some(self.rank_of(&coord))
            }
        }
    }

    /// Ranks that agree with `rank` on every axis outside `axes`, ascending.
    pub fn group(&self, rank: usize, axes: &[usize]) -> Vec<usize> {
        let me = self.coord_of(rank);
        (0..self.worker_count())
            .filter(|&r| {
                let c = self.coord_of(r);
                (0..self.ndim()).all(|d| axes.contains(&d) || c[d] == me[d])
            })
            .collect()
    }

    pub fn all_axes(&self) -> Vec<usize> {
        (0..self.ndim()).collect()
    }
}

impl std::fmt::Display for MeshShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.axes.iter().map(|(n, s)| format!("{n}={s}")).collect();
        write!(f, "{}", parts.join(","))
    }
}

type Job = Box<dyn FnOnce() + Send>;

struct WorkerThread {
    commands: Option<Sender<Job>>,
    handle: Option<JoinHandle<()>>,
}

/// A running mesh of simulated devices.
///
/// Immutable after creation apart from traffic counters; safe to share
/// between threads.
pub struct DeviceMesh {
    shape: Arc<MeshShape>,
    timeout: Duration,
    threads: Vec<WorkerThread>,
    stats: Mutex<CommStats>,
}

/// Builds a mesh with the default collective timeout.
pub fn create_mesh<S: AsRef<str>>(axes: &[(S, usize)]) -> Result<DeviceMesh> {
    DeviceMesh::new(MeshShape::new(axes)?, DEFAULT_TIMEOUT)
}

impl DeviceMesh {
    /// Spawns one worker thread per device and waits until all of them have
    /// passed an initial barrier.
    pub fn new(shape: MeshShape, timeout: Duration) -> Result<Self> {
        let shape = Arc::new(shape);
        let mut threads = Vec::with_capacity(shape.worker_count());
        for rank in 0..shape.worker_count() {
            let (tx, rx) = unbounded::<Job>();
            let handle = std::thread::Builder::new()
                .name(format!("mesh-worker-{rank}"))
                .spawn(move || {
                    while let Ok(job) = rx.recv() {
                        job();
                    }
                })
                .map_err(|e| Error::Config(format!("cannot spawn worker thread: {e}")))?;
            threads.push(WorkerThread {
                commands: Some(tx),
                handle: Some(handle),
            });
        }
        let mesh = DeviceMesh {
            shape,
            timeout,
            threads,
            stats: Mutex::new(CommStats::default()),
        };
        mesh.run_each(|w| w.barrier())?;
        mesh.reset_stats();
        Ok(mesh)
    }

    pub fn parse(spec: &str) -> Result<Self> {
        DeviceMesh::new(MeshShape::parse(spec)?, DEFAULT_TIMEOUT)
    }

    pub fn shape(&self) -> &MeshShape {
        &self.shape
    }

    pub fn shape_arc(&self) -> Arc<MeshShape> {
        self.shape.clone()
    }

    pub fn worker_count(&self) -> usize {
        self.shape.worker_count()
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }

    /// Traffic accumulated since creation or the last reset.
    pub fn comm_stats(&self) -> CommStats {
        *self.stats.lock().expect("stats lock")
    }

    pub fn reset_stats(&self) {
        *self.stats.lock().expect("stats lock") = CommStats::default();
    }

    /// Records driver-side partitioning traffic (scatter/gather of blocks).
    pub(crate) fn record_partition_bytes(&self, bytes: u64) {
        self.stats.lock().expect("stats lock").partition_bytes += bytes;
    }

    /// Runs `f` on every worker. `inputs[rank]` is moved to worker `rank`;
    /// results come back in rank order.
    ///
    /// A worker that fails or panics notifies its peers, which then abort
    /// their pending waits with [`MeshError::Shutdown`]. The returned error
    /// is the originating failure, not the induced shutdowns.
    pub fn run<I, R, F>(&self, inputs: Vec<I>, f: F) -> Result<Vec<R>>
    where
        I: Send + 'static,
        R: Send + 'static,
        F: Fn(&mut Worker, I) -> Result<R> + Send + Sync + 'static,
    {
        let n = self.worker_count();
        if inputs.len() != n {
            return Err(MeshError::InputCount {
                expected: n,
                got: inputs.len(),
            }
            .into());
        }
        let f = Arc::new(f);
        let (senders, inboxes): (Vec<_>, Vec<_>) = (0..n).map(|_| unbounded()).unzip();
        let (done_tx, done_rx) = unbounded();
        for ((rank, input), inbox) in inputs.into_iter().enumerate().zip(inboxes) {
            let mut worker = Worker::new(
                rank,
                self.shape.clone(),
                senders.clone(),
                inbox,
                self.timeout,
            );
            let f = f.clone();
            let done = done_tx.clone();
            let job: Job = Box::new(move || {
                let outcome = catch_unwind(AssertUnwindSafe(|| f(&mut worker, input)));
                let result = match outcome {
                    Ok(r) => r,
                    Err(panic) => Err(MeshError::WorkerPanicked {
                        coord: worker.coord().to_vec(),
                        message: panic_message(panic.as_ref()),
                    }
                    .into()),
                };
                if result.is_err() {
                    worker.broadcast_abort();
                }
                let stats = worker.stats();
                drop(worker);
                let _ = done.send((rank, result, stats));
            });
            self.threads[rank]
                .commands
                .as_ref()
                .ok_or(MeshError::Disconnected)?
                .send(job)
                .map_err(|_| MeshError::Disconnected)?;
        }
        drop(senders);
        drop(done_tx);

        let mut slots: Vec<Option<Result<R>>> = (0..n).map(|_| None).collect();
        let mut total = CommStats::default();
        for _ in 0..n {
            let (rank, result, stats) = done_rx.recv().map_err(|_| MeshError::Disconnected)?;
            total.merge(&stats);
            slots[rank] = Some(result);
        }
        self.stats.lock().expect("stats lock").merge(&total);

        let results: Vec<Result<R>> = slots.into_iter().map(|s| s.expect("every rank reports")).collect();
        if results.iter().all(Result::is_ok) {
            return Ok(results.into_iter().map(|r| r.ok().expect("checked")).collect());
        }
        let mut errors: Vec<Error> = results.into_iter().filter_map(Result::err).collect();
        let root = errors
            .iter()
            .position(|e| !matches!(e, Error::Mesh(MeshError::Shutdown { .. })))
            .unwrap_or(0);
        Err(errors.swap_remove(root))
    }

    /// [`run`](Self::run) without per-worker inputs.
    pub fn run_each<R, F>(&self, f: F) -> Result<Vec<R>>
    where
        R: Send + 'static,
        F: Fn(&mut Worker) -> Result<R> + Send + Sync + 'static,
    {
        let inputs = (0..self.worker_count()).map(|_| ()).collect();
        self.run(inputs, move |w, ()| f(w))
    }

    /// Element-wise sum over the workers that share every coordinate outside
    /// `group_axis`. `locals[rank]` is worker `rank`'s contribution.
    pub fn all_reduce_sum<T: crate::tensor::Real>(
        &self,
        locals: Vec<Vec<T>>,
        group_axis: &str,
    ) -> Result<Vec<Vec<T>>> {
        let axis = self
            .shape
            .axis_index(group_axis)
            .ok_or_else(|| MeshError::UnknownAxis(group_axis.to_string()))?;
        self.run(locals, move |w, mut local| {
            w.all_reduce_sum(&mut local, &[axis])?;
            Ok(local)
        })
    }

    pub fn barrier(&self) -> Result<()> {
        self.run_each(|w| w.barrier()).map(|_| ())
    }
}

impl Drop for DeviceMesh {
    fn drop(&mut self) {
        for t in &mut self.threads {
            t.commands.take();
        }
        for t in &mut self.threads {
            if let Some(h) = t.handle.take() {
                let _ = h.join();
            }
        }
    }
}

impl std::fmt::Debug for DeviceMesh {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DeviceMesh")
            .field("shape", &self.shape.to_string())
            .field("timeout", &self.timeout)
            .finish()
    }
}

fn panic_message(p: &(dyn std::any::Any + Send)) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        s.to_string()
    } else if let Some(s) = p.downcast_ref::<String>() {
        s.clone()
    } else {
        "non-string panic payload".to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::time::Instant;

    #[test]
    fn desk_scale_data_plus_spatial_mesh() {
        let mesh = create_mesh(&[("b", 2), ("x", 4)]).unwrap();
        assert_eq!(mesh.worker_count(), 8);
        let coords = mesh.run_each(|w| Ok(w.coord().to_vec())).unwrap();
        let mut expected = Vec::new();
        for b in 0..2 {
            for x in 0..4 {
                expected.push(vec![b, x]);
            }
        }
        assert_eq!(coords, expected);
    }

    #[test]
    fn rejects_bad_axes() {
        assert!(matches!(
            MeshShape::new(&[("x", 2), ("x", 2)]),
            Err(MeshError::DuplicateAxis(_))
        ));
        assert!(matches!(MeshShape::new(&[("x", 0)]), Err(MeshError::ZeroSize(_))));
        assert!(MeshShape::parse("x=two").is_err());
    }

    #[test]
    fn single_worker_collectives_are_identities() {
        let mesh = create_mesh(&[("x", 1)]).unwrap();
        let out = mesh.all_reduce_sum(vec![vec![1.5f64, -2.0]], "x").unwrap();
        assert_eq!(out, vec![vec![1.5, -2.0]]);
        mesh.barrier().unwrap();
    }

    #[test]
    fn neighbor_links_match_brute_force() {
        let shape = MeshShape::new(&[("x", 2), ("y", 2), ("z", 2)]).unwrap();
        let n = shape.worker_count();
        for a in 0..n {
            for b in 0..n {
                let ca = shape.coord_of(a);
                let cb = shape.coord_of(b);
                let diff: Vec<i64> = ca.iter().zip(&cb).map(|(&p, &q)| q as i64 - p as i64).collect();
                let one_step = diff.iter().filter(|&&d| d != 0).count() == 1
                    && diff.iter().all(|&d| d.abs() <= 1);
                let linked = (0..3).any(|ax| {
                    shape.neighbor(a, ax, Dir::Lo) == Some(b) || shape.neighbor(a, ax, Dir::Hi) == Some(b)
                });
                assert_eq!(one_step, linked, "{ca:?} -> {cb:?}");
            }
            // 2x2x2: every worker has exactly one neighbour per axis.
            for ax in 0..3 {
                let count = [Dir::Lo, Dir::Hi]
                    .iter()
                    .filter(|&&d| shape.neighbor(a, ax, d).is_some())
                    .count();
                assert_eq!(count, 1);
            }
        }
    }

    #[test]
    fn all_reduce_two_elements() {
        let mesh = create_mesh(&[("b", 2)]).unwrap();
        let out = mesh
            .all_reduce_sum(vec![vec![1.0f32, 3.0], vec![3.0, 5.0]], "b")
            .unwrap();
        assert_eq!(out, vec![vec![4.0, 8.0], vec![4.0, 8.0]]);
    }

    #[test]
    fn all_reduce_is_sequential_coordinate_order_sum() {
        let mesh = create_mesh(&[("g", 4), ("o", 2)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let locals: Vec<Vec<f64>> = (0..8)
                .map(|_| (0..33).map(|_| rng.random_range(-1e3..1e3) * rng.random::<f64>()).collect())
                .collect();
            let out = mesh.all_reduce_sum(locals.clone(), "g").unwrap();
            for rank in 0..8 {
                let o = rank % 2;
                let mut acc = locals[o].clone();
                for g in 1..4 {
                    for (a, v) in acc.iter_mut().zip(&locals[g * 2 + o]) {
                        *a += v;
                    }
                }
                let same = acc.iter().zip(&out[rank]).all(|(a, b)| a.to_bits() == b.to_bits());
                assert!(same, "rank {rank} differs from sequential oracle");
            }
        }
    }

    #[test]
    fn all_reduce_length_mismatch_is_an_error() {
        let mesh = create_mesh(&[("b", 2)]).unwrap();
        let err = mesh
            .all_reduce_sum(vec![vec![1.0f64, 2.0], vec![1.0]], "b")
            .unwrap_err();
        assert!(matches!(err, Error::Mesh(MeshError::CollectiveShape { .. })), "{err}");
    }

    #[test]
    fn staggered_barrier_releases_together() {
        let mesh = create_mesh(&[("x", 8)]).unwrap();
        let t0 = Instant::now();
        let times = mesh
            .run_each(move |w| {
                std::thread::sleep(Duration::from_millis(5 * w.rank() as u64));
                let arrived = t0.elapsed();
                w.barrier()?;
                Ok((arrived, t0.elapsed()))
            })
            .unwrap();
        let last_arrival = times.iter().map(|t| t.0).max().unwrap();
        for (_, released) in &times {
            assert!(*released >= last_arrival);
        }
    }

    #[test]
    fn panicking_worker_shuts_down_peers() {
        let mesh = create_mesh(&[("x", 4)]).unwrap();
        let t0 = Instant::now();
        let err = mesh
            .run_each(|w| {
                if w.rank() == 2 {
                    panic!("injected fault");
                }
                w.barrier()
            })
            .unwrap_err();
        assert!(t0.elapsed() < Duration::from_secs(10));
        match err {
            Error::Mesh(MeshError::WorkerPanicked { coord, message }) => {
                assert_eq!(coord, vec![2]);
                assert!(message.contains("injected"));
            }
            other => panic!("unexpected {other}"),
        }
        // The mesh stays usable.
        mesh.barrier().unwrap();
    }

    #[test]
    fn barrier_timeout_names_missing_workers() {
        let shape = MeshShape::new(&[("x", 2)]).unwrap();
        let mesh = DeviceMesh::new(shape, Duration::from_millis(200)).unwrap();
        let err = mesh
            .run_each(|w| {
                if w.rank() == 1 {
                    std::thread::sleep(Duration::from_millis(600));
                    return Ok(());
                }
                w.barrier()
            })
            .unwrap_err();
        match err {
            Error::Mesh(MeshError::Timeout { unarrived, .. }) => assert!(unarrived.contains(&vec![1])),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn mesh_is_shareable() {
        fn assert_send_sync<T: Send + Sync>() {}
        assert_send_sync::<DeviceMesh>();
    }
}
