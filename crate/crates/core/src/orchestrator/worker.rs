use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use crate::orchestrator::Orchestrator;

/// Fixed pool of threads that run queued jobs in submission order.
#[derive(Debug)]
pub struct WorkerPool {
    tx: Mutex<Option<Sender<String>>>,
    handles: Vec<JoinHandle<()>>,
}

impl WorkerPool {
    /// Starts `workers` threads and enqueues every job already queued
    /// (including ones re-queued by recovery).
    pub fn start(orch: Arc<Orchestrator>, workers: usize) -> Self {
        let (tx, rx) = mpsc::channel::<String>();
        let rx = Arc::new(Mutex::new(rx));
        let handles = (0..workers.max(1))
            .map(|i| {
                let orch = orch.clone();
                let rx = rx.clone();
                std::thread::Builder::new()
                    .name(format!("coverforge-worker-{i}"))
                    .spawn(move || work(&orch, &rx))
                    .expect("spawn worker thread")
            })
            .collect();
        for id in orch.queued_ids() {
            tx.send(id).expect("workers alive");
        }
        Self {
            tx: Mutex::new(Some(tx)),
            handles,
        }
    }

    pub fn enqueue(&self, id: impl Into<String>) {
        if let Some(tx) = self.tx.lock().expect("pool lock").as_ref() {
            // send only fails once every worker is gone
            let _ = tx.send(id.into());
        }
    }
}

fn work(orch: &Orchestrator, rx: &Mutex<Receiver<String>>) {
    loop {
        let next = rx.lock().expect("queue lock").recv();
        let Ok(id) = next else { return };
        // a job canceled while queued is skipped by the CAS in run_job
        if let Err(e) = orch.run_job(&id) {
            tracing::debug!(job = %id, "not run: {e}");
        }
    }
}

impl Drop for WorkerPool {
    /// Finishes queued work, then joins the threads.
    fn drop(&mut self) {
        self.tx.lock().expect("pool lock").take();
        for handle in self.handles.drain(..) {
            let _ = handle.join();
        }
    }
}
