"""Worker pools: concurrent evaluation on behalf of a master.

Workers pull: each loops request -> evaluate -> submit, so the master is
never blocked waiting on a slow evaluation and idleness is measurable at
the worker. Two transports share the same bookkeeping core:

  * in_process: worker threads calling the evaluator directly (numpy
    releases the GIL inside GEMM, so threads scale for this workload);
  * socket: a localhost TCP server speaking the framed protocol in
    `wire`; workers may live in this process or any other.

Timeout handling: a pending payload unanswered past the timeout is
reissued once to another worker; whichever result arrives first wins and
late duplicates are dropped. If the reissue times out as well, a
synthetic failed-by-timeout record is submitted. Every issued payload
therefore yields exactly one collected outcome.
"""

import json
import socket
import threading
import time
from collections import deque
from dataclasses import dataclass, field

from . import wire
from .errors import ProtocolError
from .evaluator import EvalRecord
from .genome import format_genome, parse_genome

_POLL_S = 0.005


@dataclass
class WorkerStats:
    worker_id: str
    evaluations_done: int = 0
    busy_time_s: float = 0.0
    idle_time_s: float = 0.0
    durations: list = field(default_factory=list)


@dataclass
class PoolReport:
    stats: dict
    wall_time_s: float
    dropped_duplicates: int = 0
    timeouts_reissued: int = 0
    timeouts_failed: int = 0


def idle_fraction(report):
    """Per-worker idle fractions plus the busy-time-weighted aggregate."""
    out = {}
    total_idle = total = 0.0
    for wid, st in report.stats.items():
        denom = st.busy_time_s + st.idle_time_s
        out[wid] = st.idle_time_s / denom if denom > 0 else 0.0
        total_idle += st.idle_time_s
        total += denom
    out["aggregate"] = total_idle / total if total > 0 else 0.0
    return out


class _Pending:
    __slots__ = ("payload", "issued_at", "attempts", "resolved")

    def __init__(self, payload, issued_at):
        self.payload = payload
        self.issued_at = issued_at
        self.attempts = 1
        self.resolved = False


def _timeout_record(payload):
    return EvalRecord(genome_id=payload.id, ok=False,
                      failure_reason="timeout: no result within limit")


class _PoolCore:
    """Shared issue/submit/timeout bookkeeping; master calls serialized."""

    _GET_RETRY = object()

    def __init__(self, master, eval_timeout_s=None):
        self.master = master
        self.eval_timeout_s = eval_timeout_s
        self.lock = threading.Lock()
        self.entries = {}
        self.reissue = deque()
        self.unresolved = 0
        self.no_more_work = False
        self.dropped_duplicates = 0
        self.timeouts_reissued = 0
        self.timeouts_failed = 0

    def get_work(self, worker_id):
        """A payload, None (done), or _GET_RETRY (wait for reissues)."""
        with self.lock:
            now = time.monotonic()
            if self.reissue:
                payload = self.reissue.popleft()
                self.entries[payload.id].issued_at = now
                return payload
            if not self.no_more_work:
                payload = self.master.issue(worker_id)
                if payload is not None:
                    self.entries[payload.id] = _Pending(payload, now)
                    self.unresolved += 1
                    return payload
                self.no_more_work = True
            if self.unresolved > 0 and self.eval_timeout_s is not None:
                return self._GET_RETRY
            return None

    def submit(self, record):
        with self.lock:
            entry = self.entries.get(record.genome_id)
            if entry is None or entry.resolved:
                self.dropped_duplicates += 1
                return False
            entry.resolved = True
            self.unresolved -= 1
            self.master.collect(record)
            return True

    def check_timeouts(self):
        if self.eval_timeout_s is None:
            return
        with self.lock:
            now = time.monotonic()
            for entry in list(self.entries.values()):
                if entry.resolved or now - entry.issued_at <= self.eval_timeout_s:
                    continue
                if entry.attempts == 1:
                    entry.attempts = 2
                    entry.issued_at = now
                    self.reissue.append(entry.payload)
                    self.timeouts_reissued += 1
                else:
                    entry.resolved = True
                    self.unresolved -= 1
                    self.timeouts_failed += 1
                    self.master.collect(_timeout_record(entry.payload))

    def finished(self):
        with self.lock:
            return self.no_more_work and self.unresolved == 0 and not self.reissue


class WorkerPool:
    """In-process thread pool."""

    def __init__(self, n_workers, evaluate_fn, master, eval_timeout_s=None,
                 worker_prefix="w"):
        if n_workers < 1:
            raise ValueError(f"need at least one worker, got {n_workers}")
        self.n_workers = n_workers
        self.evaluate_fn = evaluate_fn
        self.core = _PoolCore(master, eval_timeout_s)
        self.worker_ids = [f"{worker_prefix}{i}" for i in range(n_workers)]
        self.stats = {wid: WorkerStats(wid) for wid in self.worker_ids}

    def _worker_loop(self, worker_id):
        st = self.stats[worker_id]
        core = self.core
        while True:
            t0 = time.monotonic()
            payload = core.get_work(worker_id)
            while payload is core._GET_RETRY:
                time.sleep(_POLL_S)
                payload = core.get_work(worker_id)
            if payload is None:
                st.idle_time_s += time.monotonic() - t0
                return
            t1 = time.monotonic()
            record = self.evaluate_fn(payload, worker_id)
            t2 = time.monotonic()
            core.submit(record)
            t3 = time.monotonic()
            st.idle_time_s += (t1 - t0) + (t3 - t2)
            st.busy_time_s += t2 - t1
            st.durations.append(t2 - t1)
            st.evaluations_done += 1

    def run(self):
        start = time.monotonic()
        threads = [threading.Thread(target=self._worker_loop, args=(wid,),
                                    daemon=True, name=f"pool-{wid}")
                   for wid in self.worker_ids]
        for t in threads:
            t.start()
        while not self.core.finished():
            self.core.check_timeouts()
            if all(not t.is_alive() for t in threads) and self.core.finished():
                break
            time.sleep(_POLL_S)
        for t in threads:
            t.join(timeout=0.5)   # stalled workers stay daemon; their late
            # results are dropped by the duplicate guard
        return PoolReport(stats=self.stats,
                          wall_time_s=time.monotonic() - start,
                          dropped_duplicates=self.core.dropped_duplicates,
                          timeouts_reissued=self.core.timeouts_reissued,
                          timeouts_failed=self.core.timeouts_failed)


# --------------------------------------------------------------------------
# Socket transport


def run_socket_worker(host, port, worker_id, evaluate_fn):
    """Worker side of the wire protocol; usable from any process."""
    with socket.create_connection((host, port)) as sock:
        wire.send_message(sock, "HELLO", worker_id)
        while True:
            wire.send_message(sock, "REQ", worker_id)
            msg = wire.recv_message(sock)
            if msg is None or msg[0] == "SHUTDOWN":
                return
            kind, body = msg
            if kind != "WORK":
                raise ProtocolError(f"worker expected WORK, got {kind}")
            genome = parse_genome(body)
            record = evaluate_fn(genome, worker_id)
            wire.send_message(sock, "RESULT",
                              _record_to_json(record))


def _record_to_json(record):
    return json.dumps(record.to_json_dict(), sort_keys=True)


class SocketPool:
    """Master-side TCP server plus (optionally) local worker threads."""

    def __init__(self, n_workers, evaluate_fn, master, port=0,
                 eval_timeout_s=None, spawn_local_workers=True,
                 worker_prefix="w"):
        self.core = _PoolCore(master, eval_timeout_s)
        self.evaluate_fn = evaluate_fn
        self.n_workers = n_workers
        self.spawn_local_workers = spawn_local_workers
        self.worker_ids = [f"{worker_prefix}{i}" for i in range(n_workers)]
        self.stats = {}
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind(("127.0.0.1", port))
        self._listener.listen(max(8, n_workers))
        self.port = self._listener.getsockname()[1]
        self._closing = threading.Event()

    def _handle_connection(self, conn):
        worker_id = "?"
        try:
            msg = wire.recv_message(conn)
            if msg is None or msg[0] != "HELLO":
                raise ProtocolError("expected HELLO as first message")
            worker_id = msg[1] or "?"
            st = self.stats.setdefault(worker_id, WorkerStats(worker_id))
            last_result = time.monotonic()
            inflight_start = None
            while not self._closing.is_set():
                msg = wire.recv_message(conn)
                if msg is None:
                    return
                kind, body = msg
                if kind == "REQ":
                    payload = self.core.get_work(worker_id)
                    while payload is self.core._GET_RETRY:
                        time.sleep(_POLL_S)
                        payload = self.core.get_work(worker_id)
                    if payload is None:
                        wire.send_message(conn, "SHUTDOWN")
                        return
                    st.idle_time_s += time.monotonic() - last_result
                    inflight_start = time.monotonic()
                    wire.send_message(conn, "WORK", format_genome(payload))
                elif kind == "RESULT":
                    record = EvalRecord.from_json_dict(json.loads(body))
                    now = time.monotonic()
                    dur = now - (inflight_start if inflight_start is not None else now)
                    st.busy_time_s += dur
                    st.durations.append(dur)
                    st.evaluations_done += 1
                    last_result = now
                    self.core.submit(record)
                else:
                    raise ProtocolError(f"master expected REQ/RESULT, got {kind}")
        except (ProtocolError, OSError):
            pass
        finally:
            conn.close()

    def _accept_loop(self):
        while not self._closing.is_set():
            try:
                conn, _ = self._listener.accept()
            except OSError:
                return
            threading.Thread(target=self._handle_connection, args=(conn,),
                             daemon=True).start()

    def run(self):
        start = time.monotonic()
        threading.Thread(target=self._accept_loop, daemon=True).start()
        locals_ = []
        if self.spawn_local_workers:
            for wid in self.worker_ids:
                t = threading.Thread(target=run_socket_worker,
                                     args=("127.0.0.1", self.port, wid,
                                           self.evaluate_fn),
                                     daemon=True)
                t.start()
                locals_.append(t)
        while not self.core.finished():
            self.core.check_timeouts()
            time.sleep(_POLL_S)
        for t in locals_:
            t.join(timeout=2.0)
        self._closing.set()
        self._listener.close()
        return PoolReport(stats=self.stats,
                          wall_time_s=time.monotonic() - start,
                          dropped_duplicates=self.core.dropped_duplicates,
                          timeouts_reissued=self.core.timeouts_reissued,
                          timeouts_failed=self.core.timeouts_failed)


def start_pool(n_workers, evaluate_fn, master, transport="in_process",
               port=0, eval_timeout_s=None):
    """Build the pool for the requested transport; call .run() to execute."""
    if transport == "in_process":
        return WorkerPool(n_workers, evaluate_fn, master,
                          eval_timeout_s=eval_timeout_s)
    if transport == "socket":
        return SocketPool(n_workers, evaluate_fn, master, port=port,
                          eval_timeout_s=eval_timeout_s)
    raise ValueError(f"unknown transport {transport!r}")
