//! Background frame loading through a bounded queue.

use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use super::frame::Frame;
use super::tum::SequenceManifest;
use crate::error::Result;

pub const DEFAULT_PREFETCH: usize = 8;

/// Yields `(index, frame)` in sequence order while a worker thread decodes ahead.
pub struct Prefetcher {
    rx: Option<Receiver<(usize, Result<Frame>)>>,
    worker: Option<JoinHandle<()>>,
}

impl Prefetcher {
    pub fn spawn(manifest: Arc<SequenceManifest>, capacity: usize) -> Self {
        let (tx, rx) = sync_channel(capacity.max(1));
        let worker = std::thread::spawn(move || {
            for i in 0..manifest.len() {
                if tx.send((i, manifest.load_frame(i))).is_err() {
                    break;
                }
            }
        });
        Self {
            rx: Some(rx),
            worker: Some(worker),
        }
    }
}

impl Iterator for Prefetcher {
    type Item = (usize, Result<Frame>);

    fn next(&mut self) -> Option<Self::Item> {
        self.rx.as_ref()?.recv().ok()
    }
}

impl Drop for Prefetcher {
    fn drop(&mut self) {
        // closing the receiver unblocks a worker waiting on a full queue
        self.rx.take();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}
