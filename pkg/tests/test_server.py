"""Wire protocol, parse vulnerability, and per-mode fault behavior of the server."""

import random
import socket
import time

import pytest

from capdomains.capmem import BoundsViolation
from capdomains.domains import DomainManager
from capdomains.server import (
    GuardServer,
    ParseError,
    RequestLine,
    ServerConfig,
    parse_request_line,
)


def connect(port):
    return socket.create_connection(("127.0.0.1", port), timeout=5)


def read_response(sock):
    """Return (kind, info, body); kind is b'OK' or b'ERR', None on EOF."""
    line = bytearray()
    while not line.endswith(b"\n"):
        chunk = sock.recv(1)
        if not chunk:
            return None
        line += chunk
    head = bytes(line[:-1]).split(b" ", 1)
    if head[0] == b"OK":
        want = int(head[1])
        body = bytearray()
        while len(body) < want:
            chunk = sock.recv(want - len(body))
            if not chunk:
                return None
            body += chunk
        return (b"OK", want, bytes(body))
    return (b"ERR", head[1] if len(head) > 1 else b"", b"")


def roundtrip(sock, line):
    sock.sendall(line)
    return read_response(sock)


def start_server(mode, payload_size=128, **kw):
    cfg = ServerConfig(listen_port=0, mode=mode, payload_size=payload_size, **kw)
    srv = GuardServer(cfg)
    srv.start()
    return srv


# ---------------------------------------------------------------- parser unit

def parse_buf(length=64):
    mgr = DomainManager(arena_size=1024 * 1024, default_heap_size=64 * 1024)
    return mgr, mgr.dalloc(length)


def test_parse_request_line_happy_path():
    _, buf = parse_buf()
    req = parse_request_line(b"GET /index\n", buf)
    assert isinstance(req, RequestLine)
    assert req.method == "GET"
    assert req.path == "/index"
    assert req.raw_len == 11
    # the copy really went through the capability
    assert buf.load(0, 11) == b"GET /index\n"


def test_parse_oversized_faults_before_corruption():
    mgr, buf = parse_buf(64)
    canary = mgr.dalloc(64)
    canary.store(0, b"C" * 64)
    before = mgr.arena.snapshot()
    with pytest.raises(BoundsViolation):
        parse_request_line(b"A" * 199 + b"\n", buf)
    after = mgr.arena.snapshot()
    assert before == after, "no byte beyond the buffer top may change"
    assert canary.load(0, 64) == b"C" * 64


def test_parse_exact_fit_is_benign():
    _, buf = parse_buf(64)
    line = b"GET /" + b"p" * 58 + b"\n"
    assert len(line) == 64
    req = parse_request_line(line, buf)
    assert req.raw_len == 64


@pytest.mark.parametrize(
    "junk",
    [b"BLAH\n", b"\n", b"GET\n", b"GET  /two-spaces\n", b" /nomethod\n", b"GET /x"],
)
def test_parse_malformed_lines(junk):
    _, buf = parse_buf()
    with pytest.raises(ParseError):
        parse_request_line(junk, buf)


# ---------------------------------------------------------------- wire basics

@pytest.mark.parametrize("mode", ["baseline", "tlsf", "domains"])
def test_roundtrip_and_keepalive(mode):
    srv = start_server(mode, payload_size=128)
    try:
        sock = connect(srv.port)
        for _ in range(3):
            kind, want, body = roundtrip(sock, b"GET /hello\n")
            assert kind == b"OK"
            assert want == 128 and len(body) == 128
        sock.close()
    finally:
        srv.stop()
        srv.join()


def test_zero_payload_valid_frame():
    srv = start_server("domains", payload_size=0)
    try:
        sock = connect(srv.port)
        kind, want, body = roundtrip(sock, b"GET /empty\n")
        assert (kind, want, body) == (b"OK", 0, b"")
        # frame still delimits correctly: a second request works
        assert roundtrip(sock, b"GET /again\n")[0] == b"OK"
        sock.close()
    finally:
        srv.stop()
        srv.join()


def test_responses_byte_identical_across_modes():
    replies = {}
    for mode in ("baseline", "tlsf", "domains"):
        srv = start_server(mode, payload_size=1024)
        try:
            sock = connect(srv.port)
            replies[mode] = roundtrip(sock, b"GET /same\n")
            sock.close()
        finally:
            srv.stop()
            srv.join()
    assert replies["baseline"] == replies["tlsf"] == replies["domains"]


def test_parse_error_keeps_connection():
    srv = start_server("domains")
    try:
        sock = connect(srv.port)
        kind, _, _ = roundtrip(sock, b"NONSENSE\n")
        assert kind == b"ERR"
        assert roundtrip(sock, b"GET /ok\n")[0] == b"OK"
        sock.close()
        time.sleep(0.05)
        stats = srv.stats_snapshot()
        assert stats.served == 2, "a malformed but answered request counts as served"
        assert stats.rejected_malicious == 0
    finally:
        srv.stop()
        srv.join()


# ---------------------------------------------------------------- resilience

ATTACK = b"A" * 200 + b"\n"


def test_domains_mode_survives_oversized_request():
    srv = start_server("domains")
    try:
        served = 0
        sock = connect(srv.port)
        for i in range(5):
            if i == 2:
                sock.sendall(ATTACK)
                assert read_response(sock) is None, "attacked connection must drop"
                sock.close()
                sock = connect(srv.port)
            else:
                assert roundtrip(sock, b"GET /n\n")[0] == b"OK"
                served += 1
        sock.close()
        assert served == 4
        assert srv.alive
        time.sleep(0.05)
        stats = srv.stats_snapshot()
        assert stats.served == 4
        assert stats.rejected_malicious == 1
    finally:
        srv.stop()
        srv.join()


@pytest.mark.parametrize("mode", ["baseline", "tlsf"])
def test_unguarded_modes_die_on_oversized_request(mode):
    srv = start_server(mode)
    try:
        sock = connect(srv.port)
        assert roundtrip(sock, b"GET /1\n")[0] == b"OK"
        assert roundtrip(sock, b"GET /2\n")[0] == b"OK"
        sock.sendall(ATTACK)
        assert read_response(sock) is None
        sock.close()
        srv.join(timeout=5)
        assert not srv.alive
        assert srv.fatal is not None
        assert srv.fatal.record.kind.value == "bounds-violation"
        with pytest.raises(OSError):
            connect(srv.port)
    finally:
        srv.stop()
        srv.join()


def test_other_connections_unaffected_by_attack():
    srv = start_server("domains")
    try:
        benign = connect(srv.port)
        attacker = connect(srv.port)
        assert roundtrip(benign, b"GET /a\n")[0] == b"OK"
        attacker.sendall(ATTACK)
        assert read_response(attacker) is None
        attacker.close()
        for _ in range(3):
            assert roundtrip(benign, b"GET /b\n")[0] == b"OK"
        benign.close()
    finally:
        srv.stop()
        srv.join()


def test_resilience_randomized_trace():
    rng = random.Random(2024)
    srv = start_server("domains", payload_size=32)
    try:
        n, k = 60, 0
        sock = connect(srv.port)
        for _ in range(n):
            if rng.random() < 0.25:
                k += 1
                sock.sendall(ATTACK)
                assert read_response(sock) is None
                sock.close()
                sock = connect(srv.port)
            else:
                assert roundtrip(sock, b"GET /r\n")[0] == b"OK"
        sock.close()
        assert srv.alive
        time.sleep(0.05)
        stats = srv.stats_snapshot()
        assert stats.served == n - k
        assert stats.rejected_malicious == k
        assert stats.served + stats.rejected_malicious == n
    finally:
        srv.stop()
        srv.join()


def test_repeated_attacks_do_not_grow_reserved_bytes():
    srv = start_server("domains")
    try:
        def reserved_now(sock):
            kind, _, body = roundtrip(sock, b"STATS\n")
            assert kind == b"OK"
            fields = dict(kv.split(b"=") for kv in body.split())
            return int(fields[b"reserved"])

        sock = connect(srv.port)
        assert roundtrip(sock, b"GET /warm\n")[0] == b"OK"
        baseline_reserved = reserved_now(sock)
        for _ in range(100):
            sock.sendall(ATTACK)
            assert read_response(sock) is None
            sock.close()
            sock = connect(srv.port)
        assert reserved_now(sock) == baseline_reserved
        sock.close()
    finally:
        srv.stop()
        srv.join()


# ---------------------------------------------------------------- plumbing

def test_stats_request_not_counted():
    srv = start_server("tlsf")
    try:
        sock = connect(srv.port)
        assert roundtrip(sock, b"GET /one\n")[0] == b"OK"
        kind, _, body = roundtrip(sock, b"STATS\n")
        assert kind == b"OK"
        fields = dict(kv.split(b"=") for kv in body.split())
        assert fields[b"mode"] == b"tlsf"
        assert fields[b"served"] == b"1"
        assert fields[b"alive"] == b"1"
        assert roundtrip(sock, b"STATS\n")[2].split()  # still parseable
        time.sleep(0.05)
        assert srv.stats_snapshot().served == 1
        sock.close()
    finally:
        srv.stop()
        srv.join()


def test_shutdown_request_drains_and_stops():
    srv = start_server("domains")
    try:
        sock = connect(srv.port)
        assert roundtrip(sock, b"GET /x\n")[0] == b"OK"
        kind, _, _ = roundtrip(sock, b"SHUTDOWN\n")
        assert kind == b"OK"
        srv.join(timeout=5)
        assert not srv.alive
        assert srv.fatal is None
        with pytest.raises(OSError):
            connect(srv.port)
    finally:
        srv.stop()
        srv.join()


@pytest.mark.parametrize("payload", [1024, 4096, 16384])
def test_payload_sizes(payload):
    srv = start_server("baseline", payload_size=payload)
    try:
        sock = connect(srv.port)
        kind, want, body = roundtrip(sock, b"GET /p\n")
        assert kind == b"OK" and want == payload and len(body) == payload
        sock.close()
    finally:
        srv.stop()
        srv.join()


def test_stop_is_idempotent():
    srv = start_server("baseline")
    srv.stop()
    srv.join()
    srv.stop()
    assert not srv.alive
