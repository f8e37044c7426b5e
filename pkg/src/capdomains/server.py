"""A tiny TCP request server with a deliberately unsafe request-line parser.

The parser copies each incoming line into a fixed 64-byte buffer without
checking the length, which is the classic stack-smash shape.  Because the
buffer is a bounded capability, the overflow faults at the memory layer
instead of corrupting neighbours.  What happens next depends on the mode:

* ``baseline``  - buffers come from a flat per-connection pool; a fault
                  terminates the worker (the unprotected contrast case).
* ``tlsf``      - buffers come from a real allocator heap; same fatal
                  behavior on fault, isolates the allocator's own cost.
* ``domains``   - the parse runs inside a nested isolation domain; a fault
                  discards that domain, drops the offending connection,
                  and every other connection keeps being served.

Wire protocol, one line per request, keep-alive:

    request:   METHOD SP PATH LF
    response:  "OK"  SP <len> LF <len payload bytes>
               "ERR" SP <reason> LF            (malformed but benign)

Two control lines bypass the vulnerable parser: ``STATS\\n`` answers with
a key=value counters body, ``SHUTDOWN\\n`` drains and stops the worker.
Neither is counted in the request statistics.
"""

import logging
import selectors
import socket
import threading
from dataclasses import dataclass
from typing import Dict, Optional

from .capmem import Capability, MemoryArena, ProtectionFault, round_representable_length
from .domains import DomainManager, MainDomainFault, Normal
from .tlsf import tlsf_create_with_pool

log = logging.getLogger(__name__)

MODES = ("baseline", "tlsf", "domains")
PAYLOAD_BYTES = {"0k": 0, "1k": 1024, "4k": 4096, "16k": 16384}
PARSE_DOMAIN_UDI = 1  # single nested domain reserved for request parsing

# enough for any benign request line; attacks must exceed it
DEFAULT_HEADER_BUF_LEN = 64
MAX_LINE = 64 * 1024  # reads beyond this without a newline are protocol abuse


class ParseError(Exception):
    """Malformed request line; answered with ERR, never fatal."""


@dataclass(frozen=True)
class RequestLine:
    method: str
    path: str
    raw_len: int


@dataclass
class ConnectionStats:
    served: int = 0
    rejected_malicious: int = 0
    bytes_out: int = 0


@dataclass(frozen=True)
class ServerConfig:
    listen_port: int
    mode: str
    payload_size: int
    header_buf_len: int = DEFAULT_HEADER_BUF_LEN
    max_connections: int = 64
    host: str = "127.0.0.1"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.payload_size < 0 or self.header_buf_len < 16:
            raise ValueError("payload_size must be >= 0 and header_buf_len >= 16")


def parse_request_line(data: bytes, buf: Capability) -> RequestLine:
    """Copy ``data`` into ``buf`` and tokenize it as ``METHOD SP PATH LF``.

    The copy intentionally skips any length check: input longer than the
    buffer raises a bounds fault from the store itself, before a single
    out-of-bounds byte lands.  Tokenizing reads back through the same
    capability, so the parsed request provably came from guarded memory.
    """
    buf.store(0, data)  # vulnerable on purpose: no length check
    line = buf.load(0, len(data))
    if not line.endswith(b"\n"):
        raise ParseError("missing line terminator")
    parts = line[:-1].split(b" ")
    if len(parts) != 2 or not parts[0] or not parts[1]:
        raise ParseError("expected exactly METHOD SP PATH")
    try:
        method = parts[0].decode("ascii")
        path = parts[1].decode("ascii")
    except UnicodeDecodeError as exc:
        raise ParseError("non-ascii request line") from exc
    return RequestLine(method=method, path=path, raw_len=len(data))


class _FixedBufPool:
    """Baseline-mode buffer source: a flat slab with a LIFO slot free list."""

    def __init__(self, arena: MemoryArena, each: int, count: int):
        self.each = round_representable_length(each)
        self.region = arena.reserve(self.each * count, tag="conn-buffers")
        self._root = arena.root
        self._free = list(range(count - 1, -1, -1))

    def alloc(self) -> Capability:
        if not self._free:
            raise RuntimeError("connection buffer slots exhausted")
        slot = self._free.pop()
        addr = self.region.base + slot * self.each
        return self._root.address_set(addr).bounds_set(self.each)

    def release(self, cap: Capability) -> None:
        self._free.append((cap.base - self.region.base) // self.each)


class _Conn:
    __slots__ = ("sock", "rbuf", "buf", "buf_gen", "pending_line", "parse_job")

    def __init__(self, sock):
        self.sock = sock
        self.rbuf = bytearray()
        self.buf: Optional[Capability] = None
        self.buf_gen = 0
        self.pending_line = b""
        self.parse_job = None


def _payload_body(size: int) -> bytes:
    pattern = b"capability-backed-response-payload-0123456789abcdef-"
    if size == 0:
        return b""
    reps = size // len(pattern) + 1
    return (pattern * reps)[:size]


class GuardServer:
    """One listener plus one worker thread that owns all per-mode state.

    The worker holds the arena, allocator, and (in domains mode) the
    domain manager; nothing else touches them.  Tests and the benchmark
    talk to the server over its socket or through :meth:`stats_snapshot`.
    """

    def __init__(self, config: ServerConfig, heap_size: int = 256 * 1024,
                 arena_size: int = 4 * 1024 * 1024):
        self.config = config
        self.heap_size = heap_size
        self.arena_size = arena_size
        self.port: Optional[int] = None
        self.fatal: Optional[BaseException] = None
        self._stats = ConnectionStats()
        self._stats_lock = threading.Lock()
        self._thread: Optional[threading.Thread] = None
        self._listener: Optional[socket.socket] = None
        self._wake_r: Optional[socket.socket] = None
        self._wake_w: Optional[socket.socket] = None
        self._stop_flag = threading.Event()
        self._payload = _payload_body(config.payload_size)

    # ------------------------------------------------------------ lifecycle

    def start(self) -> None:
        if self._thread is not None:
            raise RuntimeError("server already started")
        self._listener = socket.create_server(
            (self.config.host, self.config.listen_port),
            backlog=self.config.max_connections,
        )
        self._listener.setblocking(False)
        self.port = self._listener.getsockname()[1]
        self._wake_r, self._wake_w = socket.socketpair()
        self._wake_r.setblocking(False)
        self._thread = threading.Thread(
            target=self._worker, name=f"guard-{self.config.mode}", daemon=True
        )
        self._thread.start()

    def stop(self) -> None:
        self._stop_flag.set()
        if self._wake_w is not None:
            try:
                self._wake_w.send(b"\x00")
            except OSError:
                pass

    def join(self, timeout: float = 10.0) -> None:
        if self._thread is not None:
            self._thread.join(timeout)

    @property
    def alive(self) -> bool:
        return self._thread is not None and self._thread.is_alive()

    def stats_snapshot(self) -> ConnectionStats:
        with self._stats_lock:
            return ConnectionStats(
                self._stats.served, self._stats.rejected_malicious, self._stats.bytes_out
            )

    # ------------------------------------------------------------ worker

    def _worker(self) -> None:
        cfg = self.config
        arena: Optional[MemoryArena] = None
        manager: Optional[DomainManager] = None
        bufpool: Optional[_FixedBufPool] = None
        heap = None
        if cfg.mode == "domains":
            manager = DomainManager(
                arena_size=self.arena_size, default_heap_size=self.heap_size
            )
            arena = manager.arena
        elif cfg.mode == "tlsf":
            arena = MemoryArena(self.arena_size)
            region = arena.reserve(self.heap_size, tag="worker-heap")
            heap_cap = arena.root.address_set(region.base).bounds_set(region.length)
            heap = tlsf_create_with_pool(heap_cap, self.heap_size)
        else:
            arena = MemoryArena(self.arena_size)
            bufpool = _FixedBufPool(arena, cfg.header_buf_len, cfg.max_connections)

        sel = selectors.DefaultSelector()
        sel.register(self._listener, selectors.EVENT_READ, "accept")
        sel.register(self._wake_r, selectors.EVENT_READ, "wake")
        conns: Dict[socket.socket, _Conn] = {}
        shutting_down = False

        def bump(served=0, rejected=0, out=0):
            with self._stats_lock:
                self._stats.served += served
                self._stats.rejected_malicious += rejected
                self._stats.bytes_out += out

        def send(conn: _Conn, payload: bytes) -> bool:
            try:
                conn.sock.setblocking(True)
                conn.sock.sendall(payload)
                conn.sock.setblocking(False)
                return True
            except OSError:
                return False

        def close_conn(conn: _Conn) -> None:
            try:
                sel.unregister(conn.sock)
            except (KeyError, ValueError):
                pass
            conns.pop(conn.sock, None)
            try:
                conn.sock.close()
            except OSError:
                pass
            if conn.buf is None:
                return
            if cfg.mode == "baseline":
                bufpool.release(conn.buf)
            elif cfg.mode == "tlsf":
                heap.free(conn.buf)
            elif conn.buf_gen == manager.heap_generation(PARSE_DOMAIN_UDI):
                # stale generations mean the heap (and buffer) are already gone
                cap = conn.buf
                manager.domain_call(PARSE_DOMAIN_UDI, lambda: manager.dfree(cap))
            conn.buf = None

        def reserved_bytes() -> int:
            if cfg.mode != "domains":
                return arena.reserved_bytes
            # report at the stable point: parse heap provisioned
            if manager.heap_of(PARSE_DOMAIN_UDI) is None:
                manager.setup(PARSE_DOMAIN_UDI)
                manager.enter(PARSE_DOMAIN_UDI)
                manager.heap_init()
                manager.exit()
            return arena.reserved_bytes

        def stats_body() -> bytes:
            snap = self.stats_snapshot()
            # provision first so reserved and heap_generation describe the
            # same instant (a just-aborted parse heap would otherwise report
            # generation 0 next to its re-provisioned reservation)
            reserved = reserved_bytes()
            gen = manager.heap_generation(PARSE_DOMAIN_UDI) if manager else 0
            text = (
                f"mode={cfg.mode} payload={cfg.payload_size} "
                f"served={snap.served} rejected={snap.rejected_malicious} "
                f"bytes_out={snap.bytes_out} reserved={reserved} "
                f"heap_generation={gen} alive=1"
            )
            return text.encode("ascii")

        # the response body is fixed per server, so the frame is too
        ok_frame = b"OK %d\n" % len(self._payload) + self._payload
        ok_frame_len = len(ok_frame)

        def respond_err(conn: _Conn, reason: str) -> None:
            frame = b"ERR " + reason.encode("ascii") + b"\n"
            if send(conn, frame):
                # answered is answered: malformed requests count as served
                bump(served=1, out=len(frame))
            else:
                close_conn(conn)

        def make_parse_job(conn: _Conn):
            # built once per connection so the per-request path allocates
            # nothing beyond what the parse itself needs
            def job():
                gen = manager.heap_generation(PARSE_DOMAIN_UDI)
                if conn.buf is None or conn.buf_gen != gen:
                    conn.buf = manager.dalloc(cfg.header_buf_len)
                    conn.buf_gen = manager.heap_generation(PARSE_DOMAIN_UDI)
                return parse_request_line(conn.pending_line, conn.buf)

            return job

        def handle_line(conn: _Conn, line: bytes) -> None:
            nonlocal shutting_down
            if line == b"STATS\n":
                frame_body = stats_body()
                send(conn, b"OK %d\n" % len(frame_body) + frame_body)
                return
            if line == b"SHUTDOWN\n":
                send(conn, b"OK 3\nbye")
                shutting_down = True
                return
            if manager is not None:
                conn.pending_line = line
                outcome = manager.domain_call(PARSE_DOMAIN_UDI, conn.parse_job)
                if not isinstance(outcome, Normal):
                    log.info(
                        "connection dropped after contained fault: %s", outcome.fault
                    )
                    bump(rejected=1)
                    close_conn(conn)
                    return
            else:
                if conn.buf is None:
                    conn.buf = bufpool.alloc() if cfg.mode == "baseline" else heap.malloc(
                        cfg.header_buf_len
                    )
                parse_request_line(line, conn.buf)  # fault here kills the worker
            if send(conn, ok_frame):
                bump(served=1, out=ok_frame_len)
            else:
                close_conn(conn)

        def pump(conn: _Conn) -> None:
            try:
                data = conn.sock.recv(65536)
            except BlockingIOError:
                return
            except OSError:
                close_conn(conn)
                return
            if not data:
                close_conn(conn)
                return
            conn.rbuf += data
            while not shutting_down:
                nl = conn.rbuf.find(b"\n")
                if nl < 0:
                    if len(conn.rbuf) > MAX_LINE:
                        close_conn(conn)
                    return
                line = bytes(conn.rbuf[: nl + 1])
                del conn.rbuf[: nl + 1]
                try:
                    handle_line(conn, line)
                except ParseError as exc:
                    respond_err(conn, str(exc).replace(" ", "-"))
                if conn.sock not in conns:
                    return

        try:
            while not shutting_down and not self._stop_flag.is_set():
                for key, _ in sel.select(timeout=0.5):
                    if key.data == "wake":
                        try:
                            self._wake_r.recv(4096)
                        except OSError:
                            pass
                    elif key.data == "accept":
                        try:
                            sock, _addr = self._listener.accept()
                        except OSError:
                            continue
                        if len(conns) >= self.config.max_connections:
                            sock.close()
                            continue
                        sock.setblocking(False)
                        conn = _Conn(sock)
                        if manager is not None:
                            conn.parse_job = make_parse_job(conn)
                        conns[sock] = conn
                        sel.register(sock, selectors.EVENT_READ, conn)
                    else:
                        pump(key.data)
        except (ProtectionFault, MainDomainFault) as exc:
            # the unguarded contrast case: the worker context dies here
            self.fatal = exc
            log.warning("worker terminated by protection fault: %s", exc)
        finally:
            snap = self.stats_snapshot()
            log.info(
                "worker exiting: served=%d rejected=%d bytes_out=%d",
                snap.served, snap.rejected_malicious, snap.bytes_out,
            )
            for conn in list(conns.values()):
                close_conn(conn)
            sel.close()
            for s in (self._listener, self._wake_r):
                try:
                    s.close()
                except OSError:
                    pass


def serve(config: ServerConfig, heap_size: int = 256 * 1024) -> GuardServer:
    """Start a server and block until its worker exits (fault or shutdown)."""
    srv = GuardServer(config, heap_size=heap_size)
    srv.start()
    try:
        while srv.alive:
            srv.join(timeout=0.5)
    except KeyboardInterrupt:
        srv.stop()
        srv.join()
    return srv
