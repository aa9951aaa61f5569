//! Live service over TCP, one line-delimited JSON connection per client.
//!
//! The loop thread owns the [`ControlLoop`]. Connections talk to it only
//! through the event queue (commands in) and the frame broadcast (frames
//! out). Each subscriber has a bounded queue; when it is full the frame is
//! dropped for that subscriber.

use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender, SyncSender, TrySendError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use polswitch_core::control::{ControlLoop, Event, LoopFrame, SCHEMA};

use crate::protocol::{parse_request, Reply, Request, SeqTracker, Snapshot};

/// Frames a slow subscriber may lag behind before frames are dropped.
pub const SUBSCRIBER_QUEUE: usize = 64;

#[derive(Debug, Clone)]
pub struct ServeOptions {
    /// Wall-clock loop rate.
    pub tick_hz: f64,
    /// Stop after this many ticks; `None` runs until killed.
    pub max_ticks: Option<u64>,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self { tick_hz: 1000.0, max_ticks: None }
    }
}

#[derive(Default)]
struct Broadcaster {
    next_id: AtomicU64,
    subs: Mutex<Vec<(u64, SyncSender<String>)>>,
    dropped: AtomicU64,
}

impl Broadcaster {
    fn subscribe(&self) -> (u64, Receiver<String>) {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let (tx, rx) = mpsc::sync_channel(SUBSCRIBER_QUEUE);
        self.subs.lock().unwrap().push((id, tx));
        (id, rx)
    }

    fn unsubscribe(&self, id: u64) {
        self.subs.lock().unwrap().retain(|(i, _)| *i != id);
    }

    fn publish(&self, line: &str) {
        let mut subs = self.subs.lock().unwrap();
        subs.retain(|(id, tx)| match tx.try_send(line.to_string()) {
            Ok(()) => true,
            Err(TrySendError::Full(_)) => {
                self.dropped.fetch_add(1, Ordering::Relaxed);
                debug!("subscriber {id} full, frame dropped");
                true
            }
            Err(TrySendError::Disconnected(_)) => false,
        });
    }
}

struct Shared {
    events: Mutex<Sender<Event>>,
    seqs: Mutex<SeqTracker>,
    frames: Broadcaster,
    snapshot: Mutex<Snapshot>,
}

/// A running service.
pub struct Server {
    pub addr: SocketAddr,
    loop_thread: thread::JoinHandle<()>,
}

impl Server {
    /// Waits for the loop to reach `max_ticks`.
    pub fn join(self) {
        let _ = self.loop_thread.join();
    }
}

pub fn start(lp: ControlLoop, bind: &str, opts: ServeOptions) -> std::io::Result<Server> {
    let listener = TcpListener::bind(bind)?;
    let addr = listener.local_addr()?;
    let (tx, rx) = mpsc::channel();
    let shared = Arc::new(Shared {
        events: Mutex::new(tx),
        seqs: Mutex::new(SeqTracker::default()),
        frames: Broadcaster::default(),
        snapshot: Mutex::new(Snapshot {
            ok: true,
            schema: SCHEMA,
            config: lp.config().clone(),
            calibration: lp.controller_calibration().to_vec(),
            tick: 0,
            last_frame: None,
        }),
    });

    let acc = Arc::clone(&shared);
    thread::spawn(move || {
        for stream in listener.incoming() {
            match stream {
                Ok(s) => {
                    let sh = Arc::clone(&acc);
                    thread::spawn(move || {
                        if let Err(e) = handle_connection(s, sh) {
                            debug!("connection closed: {e}");
                        }
                    });
                }
                Err(e) => warn!("accept failed: {e}"),
            }
        }
    });

    let sh = Arc::clone(&shared);
    let loop_thread = thread::spawn(move || run_loop(lp, rx, sh, opts));
    info!("listening on {addr}");
    Ok(Server { addr, loop_thread })
}

fn run_loop(mut lp: ControlLoop, rx: Receiver<Event>, sh: Arc<Shared>, opts: ServeOptions) {
    let period = Duration::from_secs_f64(1.0 / opts.tick_hz.max(1e-3));
    let stride = (opts.tick_hz / lp.config().display_rate_hz).round().max(1.0) as u64;
    let mut applied: Vec<Event> = Vec::new();
    let mut errors: Vec<String> = Vec::new();
    let mut next = Instant::now();
    loop {
        if opts.max_ticks.is_some_and(|m| lp.tick_count() >= m) {
            break;
        }
        let events: Vec<Event> = rx.try_iter().collect();
        let mut f: LoopFrame = lp.tick(&events);
        applied.append(&mut f.applied);
        errors.append(&mut f.errors);
        // publish on the stride, and promptly once a command has landed
        if f.tick.is_multiple_of(stride) || !applied.is_empty() {
            f.applied = std::mem::take(&mut applied);
            f.errors = std::mem::take(&mut errors);
            sh.frames.publish(&f.to_json());
            let mut snap = sh.snapshot.lock().unwrap();
            snap.tick = f.tick;
            snap.last_frame = Some(f);
        }
        next += period;
        let now = Instant::now();
        if next > now {
            thread::sleep(next - now);
        } else {
            next = now;
        }
    }
    info!(
        "loop stopped after {} ticks, {} frames dropped",
        lp.tick_count(),
        sh.frames.dropped.load(Ordering::Relaxed)
    );
}

fn send_line(w: &Mutex<TcpStream>, line: &str) -> std::io::Result<()> {
    let mut s = w.lock().unwrap();
    s.write_all(line.as_bytes())?;
    s.write_all(b"\n")?;
    s.flush()
}

fn handle_connection(stream: TcpStream, sh: Arc<Shared>) -> std::io::Result<()> {
    let peer = stream.peer_addr()?;
    debug!("connection from {peer}");
    let writer = Arc::new(Mutex::new(stream.try_clone()?));
    let mut sub: Option<u64> = None;
    let reader = BufReader::new(stream);
    let result = (|| {
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let reply = match parse_request(&line) {
                Err(r) => r.to_line(),
                Ok(Request::Snapshot) => serde_json::to_string(&*sh.snapshot.lock().unwrap())
                    .unwrap_or_default(),
                Ok(Request::Subscribe) => {
                    if sub.is_none() {
                        let (id, rx) = sh.frames.subscribe();
                        sub = Some(id);
                        let w = Arc::clone(&writer);
                        thread::spawn(move || {
                            for frame in rx {
                                if send_line(&w, &frame).is_err() {
                                    break;
                                }
                            }
                        });
                    }
                    Reply::ok(None).to_line()
                }
                Ok(Request::Unsubscribe) => {
                    if let Some(id) = sub.take() {
                        sh.frames.unsubscribe(id);
                    }
                    Reply::ok(None).to_line()
                }
                Ok(Request::Command(m)) => {
                    let fresh = sh.seqs.lock().unwrap().accept(&m.client, m.seq);
                    if !fresh {
                        Reply::error("stale_seq", format!("seq {} not above last for {:?}", m.seq, m.client), Some(m.seq))
                            .to_line()
                    } else {
                        info!("command from {} seq {}: {:?}", m.client, m.seq, m.event);
                        match sh.events.lock().unwrap().send(m.event) {
                            Ok(()) => Reply::ok(Some(m.seq)).to_line(),
                            Err(_) => Reply::error("loop_stopped", "the loop is no longer running", Some(m.seq)).to_line(),
                        }
                    }
                }
            };
            send_line(&writer, &reply)?;
        }
        Ok(())
    })();
    if let Some(id) = sub {
        sh.frames.unsubscribe(id);
    }
    result
}
