"""Length-prefixed JSON wire protocol between master and remote workers.

Frame: 4-byte big-endian payload length, then one UTF-8 JSON message.
Messages: hello, customize_request, customize_result, job_error, shutdown.
The worker binds an address, accepts one master connection, sends hello,
then answers one job at a time. The master connects out to each worker
endpoint, hands the next queued job to the first idle worker in endpoint
order, and reassigns a job at most once if its connection dies mid-flight.
"""

from __future__ import annotations

import json
import select
import socket
import struct
from collections import deque

from .customizer import (
    customize,
    job_from_doc,
    job_to_doc,
    result_from_doc,
    result_to_doc,
)
from .errors import (
    ConnectivityError,
    FramingError,
    HandshakeError,
    ProtocolError,
)

PROTOCOL_VERSION = 1
MAX_FRAME_BYTES = 256 * 1024 * 1024
MESSAGE_KINDS = ("hello", "customize_request", "customize_result", "job_error", "shutdown")


def encode(message: dict) -> bytes:
    """One frame: length prefix plus compact JSON payload."""
    kind = message.get("kind")
    if kind not in MESSAGE_KINDS:
        raise ProtocolError(f"unknown message kind {kind!r}")
    payload = json.dumps(message, separators=(",", ":")).encode("utf-8")
    return struct.pack(">I", len(payload)) + payload


def decode(data: bytes) -> dict:
    """Parse exactly one complete frame from a byte string."""
    if len(data) < 4:
        raise FramingError(f"frame header needs 4 bytes, got {len(data)}")
    (length,) = struct.unpack(">I", data[:4])
    if length > MAX_FRAME_BYTES:
        raise FramingError(f"frame of {length} bytes exceeds the {MAX_FRAME_BYTES} cap")
    if len(data) - 4 < length:
        raise FramingError(
            f"frame declares {length} payload bytes, only {len(data) - 4} available"
        )
    return _parse_payload(data[4 : 4 + length])


def _parse_payload(payload: bytes) -> dict:
    try:
        message = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"payload is not valid JSON: {exc}") from exc
    if not isinstance(message, dict):
        raise ProtocolError("payload must be a JSON object")
    kind = message.get("kind")
    if kind not in MESSAGE_KINDS:
        raise ProtocolError(f"unknown message kind {kind!r}")
    return message


def _recv_exact(sock: socket.socket, count: int) -> bytes | None:
    chunks = []
    received = 0
    while received < count:
        chunk = sock.recv(count - received)
        if not chunk:
            return None
        chunks.append(chunk)
        received += len(chunk)
    return b"".join(chunks)


def read_message(sock: socket.socket) -> dict | None:
    """One framed message from a socket; None on clean EOF at a boundary."""
    header = _recv_exact(sock, 4)
    if header is None:
        return None
    (length,) = struct.unpack(">I", header)
    if length > MAX_FRAME_BYTES:
        raise FramingError(f"frame of {length} bytes exceeds the {MAX_FRAME_BYTES} cap")
    payload = _recv_exact(sock, length)
    if payload is None:
        raise FramingError(f"connection closed inside a {length}-byte frame")
    return _parse_payload(payload)


def write_message(sock: socket.socket, message: dict) -> None:
    sock.sendall(encode(message))


def parse_endpoint(text: str) -> tuple:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ConnectivityError(f"endpoint must be host:port, got {text!r}")
    return host, int(port)


def serve_worker(listen_address, worker_id: str | None = None, ready_event=None) -> None:
    """Run one worker: bind, accept the master, answer jobs until shutdown.

    A lost connection mid-job abandons the job silently; the master is
    responsible for reassigning it.
    """
    if isinstance(listen_address, str):
        listen_address = parse_endpoint(listen_address)
    if worker_id is None:
        import os

        worker_id = f"worker-{os.getpid()}"
    server = socket.create_server(listen_address)
    try:
        if ready_event is not None:
            ready_event.set()
        conn, _ = server.accept()
    finally:
        server.close()
    with conn:
        write_message(
            conn,
            {"kind": "hello", "worker_id": worker_id, "protocol_version": PROTOCOL_VERSION},
        )
        while True:
            try:
                message = read_message(conn)
            except (OSError, FramingError):
                return
            if message is None or message["kind"] == "shutdown":
                return
            if message["kind"] != "customize_request":
                try:
                    write_message(
                        conn,
                        {
                            "kind": "job_error",
                            "job_id": message.get("job_id"),
                            "reason": f"unexpected message kind {message['kind']!r}",
                        },
                    )
                    continue
                except OSError:
                    return
            job_id = message["job_id"]
            try:
                job = job_from_doc(message["job"])
                result = customize(job, job.nmm_config.target_value)
                reply = {
                    "kind": "customize_result",
                    "job_id": job_id,
                    "result": result_to_doc(result),
                }
            except Exception as exc:  # job failure, not a protocol failure
                reply = {"kind": "job_error", "job_id": job_id, "reason": str(exc)}
            try:
                write_message(conn, reply)
            except OSError:
                return


class _WorkerChannel:
    def __init__(self, index: int, endpoint: tuple):
        self.index = index
        self.endpoint = endpoint
        self.sock = socket.create_connection(endpoint, timeout=30)
        self.sock.settimeout(None)
        self.current = None  # (job_id, job, reassigned)
        hello = read_message(self.sock)
        if hello is None or hello.get("kind") != "hello":
            raise HandshakeError(f"worker {endpoint} did not say hello")
        if hello.get("protocol_version") != PROTOCOL_VERSION:
            raise HandshakeError(
                f"worker {endpoint} speaks protocol "
                f"{hello.get('protocol_version')!r}, need {PROTOCOL_VERSION}"
            )
        self.worker_id = hello.get("worker_id", f"worker-{index}")

    def close(self):
        try:
            self.sock.close()
        except OSError:
            pass


def dispatch_remote(endpoints, jobs) -> dict:
    """Run jobs across remote workers; returns job_id -> result.

    Jobs go out FIFO, each to the first idle worker in endpoint order, one
    in flight per worker. A job whose worker dies is requeued once; a second
    loss, or losing every worker, aborts the run.
    """
    if not endpoints:
        raise ConnectivityError("no worker endpoints configured")
    channels = []
    for index, endpoint in enumerate(endpoints):
        if isinstance(endpoint, str):
            endpoint = parse_endpoint(endpoint)
        try:
            channels.append(_WorkerChannel(index, endpoint))
        except OSError as exc:
            raise ConnectivityError(f"cannot reach worker {endpoint}: {exc}") from exc

    queue = deque((job_id, job, False) for job_id, job in jobs)
    results: dict = {}
    expected = {job_id for job_id, _ in jobs}
    if len(expected) != len(jobs):
        raise ProtocolError("duplicate job ids in dispatch")

    def drop_channel(channel, requeue: bool):
        channel.close()
        channels.remove(channel)
        if channel.current is not None and requeue:
            job_id, job, reassigned = channel.current
            if reassigned:
                raise ConnectivityError(
                    f"job {job_id} lost its connection twice; giving up"
                )
            queue.appendleft((job_id, job, True))
            channel.current = None

    try:
        while len(results) < len(expected):
            # Hand queued jobs to idle workers, lowest endpoint index first.
            for channel in sorted(channels, key=lambda c: c.index):
                if not queue:
                    break
                if channel.current is None:
                    job_id, job, reassigned = queue.popleft()
                    channel.current = (job_id, job, reassigned)
                    try:
                        write_message(
                            channel.sock,
                            {
                                "kind": "customize_request",
                                "job_id": job_id,
                                "job": job_to_doc(job),
                            },
                        )
                    except OSError:
                        drop_channel(channel, requeue=True)
                        if not channels:
                            raise ConnectivityError("all workers lost")
            busy = [c for c in channels if c.current is not None]
            if not busy:
                if queue:
                    raise ConnectivityError("all workers lost with jobs pending")
                continue
            readable, _, _ = select.select([c.sock for c in busy], [], [])
            for channel in list(busy):
                if channel.sock not in readable:
                    continue
                try:
                    message = read_message(channel.sock)
                except (OSError, FramingError):
                    message = None
                if message is None:
                    drop_channel(channel, requeue=True)
                    if not channels:
                        raise ConnectivityError("all workers lost")
                    continue
                kind = message["kind"]
                if kind == "job_error":
                    raise ProtocolError(
                        f"worker {channel.worker_id} failed job "
                        f"{message.get('job_id')}: {message.get('reason')}"
                    )
                if kind != "customize_result":
                    raise ProtocolError(
                        f"unexpected {kind!r} from worker {channel.worker_id}"
                    )
                job_id = message["job_id"]
                if job_id in results:
                    raise ProtocolError(f"duplicate result for job {job_id}")
                if channel.current is None or channel.current[0] != job_id:
                    raise ProtocolError(
                        f"worker {channel.worker_id} answered job {job_id} "
                        "it was never given"
                    )
                results[job_id] = result_from_doc(message["result"])
                channel.current = None
    finally:
        for channel in channels:
            try:
                write_message(channel.sock, {"kind": "shutdown"})
            except OSError:
                pass
            channel.close()
    return results
