"""Framed binary exchange between the coupling driver and participants.

Every message is one frame: a tag byte, a little-endian u32 payload length,
and the payload.  Interface data travels as raw IEEE-754 binary64 in
substep-major order, so a distributed run is bit-identical to an in-process
one.  The in-process channel pushes the same encoded bytes through the same
parser instead of bypassing the wire format.

Frame tags:
    0x01 HELLO        magic "WFCPL1", protocol version u16 LE, role byte
    0x02 CONFIG       canonical key-sorted "key=value" lines (UTF-8)
    0x03 WINDOW_DATA  window u32, iteration u32, n u32, m u32, n*m float64
    0x04 CONTROL      one byte: 0x00 ITERATE, 0x01 WINDOW_CONVERGED,
                      0x02 TERMINATE
    0x05 BYE          empty
"""

from __future__ import annotations

import socket
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ChannelClosed, ConfigMismatch, MalformedFrame, VersionMismatch

TAG_HELLO = 0x01
TAG_CONFIG = 0x02
TAG_WINDOW_DATA = 0x03
TAG_CONTROL = 0x04
TAG_BYE = 0x05
_VALID_TAGS = (TAG_HELLO, TAG_CONFIG, TAG_WINDOW_DATA, TAG_CONTROL, TAG_BYE)

CTRL_ITERATE = 0x00
CTRL_WINDOW_CONVERGED = 0x01
CTRL_TERMINATE = 0x02

MAGIC = b"WFCPL1"
PROTOCOL_VERSION = 1

ROLE_ORCHESTRATOR = 0x00
ROLE_DIRICHLET = 0x01
ROLE_NEUMANN = 0x02

#: Iteration index marking the one-off initial-data exchange after CONFIG.
INIT_ITERATION = 0xFFFFFFFF

_HEADER = struct.Struct("<BI")
_HELLO_BODY = struct.Struct("<6sHB")
_WINDOW_HEAD = struct.Struct("<IIII")


@dataclass(frozen=True)
class Frame:
    tag: int
    payload: bytes

    def encode(self) -> bytes:
        return _HEADER.pack(self.tag, len(self.payload)) + self.payload


def hello_frame(role: int) -> Frame:
    return Frame(TAG_HELLO, _HELLO_BODY.pack(MAGIC, PROTOCOL_VERSION, role))


def parse_hello(frame: Frame) -> int:
    if frame.tag != TAG_HELLO:
        raise MalformedFrame(f"expected HELLO, got tag {frame.tag:#x}")
    if len(frame.payload) != _HELLO_BODY.size:
        raise MalformedFrame(f"HELLO payload of {len(frame.payload)} bytes")
    magic, version, role = _HELLO_BODY.unpack(frame.payload)
    if magic != MAGIC:
        raise MalformedFrame(f"bad magic {magic!r}")
    if version != PROTOCOL_VERSION:
        raise VersionMismatch(f"peer speaks version {version}, expected {PROTOCOL_VERSION}")
    return role


def config_frame(entries: dict[str, object]) -> Frame:
    text = "".join(f"{k}={entries[k]!r}\n" for k in sorted(entries))
    return Frame(TAG_CONFIG, text.encode("utf-8"))


def check_config(frame: Frame, entries: dict[str, object]) -> None:
    """Compare a received CONFIG frame against local entries, naming the key."""
    if frame.tag != TAG_CONFIG:
        raise MalformedFrame(f"expected CONFIG, got tag {frame.tag:#x}")
    theirs: dict[str, str] = {}
    for line in frame.payload.decode("utf-8").splitlines():
        key, _, value = line.partition("=")
        theirs[key] = value
    ours = {k: repr(entries[k]) for k in entries}
    for key in sorted(set(ours) | set(theirs)):
        if ours.get(key) != theirs.get(key):
            raise ConfigMismatch(
                f"config key {key!r}: local {ours.get(key)!r} vs peer {theirs.get(key)!r}"
            )


def window_data_frame(window_idx: int, iter_idx: int, values: np.ndarray) -> Frame:
    """Pack an (n, m) array of interface vectors, substep-major."""
    values = np.ascontiguousarray(values, dtype="<f8")
    if values.ndim != 2 or values.size == 0:
        raise MalformedFrame(f"window data must be a nonempty (n, m) array, got {values.shape}")
    n, m = values.shape
    head = _WINDOW_HEAD.pack(window_idx, iter_idx, n, m)
    return Frame(TAG_WINDOW_DATA, head + values.tobytes())


def parse_window_data(frame: Frame):
    if frame.tag != TAG_WINDOW_DATA:
        raise MalformedFrame(f"expected WINDOW_DATA, got tag {frame.tag:#x}")
    if len(frame.payload) < _WINDOW_HEAD.size:
        raise MalformedFrame("WINDOW_DATA payload shorter than its header")
    window_idx, iter_idx, n, m = _WINDOW_HEAD.unpack_from(frame.payload)
    if n * m == 0:
        raise MalformedFrame("WINDOW_DATA with zero values")
    expected = _WINDOW_HEAD.size + 8 * n * m
    if len(frame.payload) != expected:
        raise MalformedFrame(
            f"WINDOW_DATA length {len(frame.payload)} inconsistent with n*m={n * m}"
        )
    values = np.frombuffer(frame.payload, dtype="<f8", offset=_WINDOW_HEAD.size)
    return window_idx, iter_idx, values.reshape(n, m).copy()


def control_frame(verdict: int) -> Frame:
    if verdict not in (CTRL_ITERATE, CTRL_WINDOW_CONVERGED, CTRL_TERMINATE):
        raise MalformedFrame(f"unknown control verdict {verdict:#x}")
    return Frame(TAG_CONTROL, bytes([verdict]))


def parse_control(frame: Frame) -> int:
    if frame.tag != TAG_CONTROL:
        raise MalformedFrame(f"expected CONTROL, got tag {frame.tag:#x}")
    if len(frame.payload) != 1:
        raise MalformedFrame(f"CONTROL payload of {len(frame.payload)} bytes")
    verdict = frame.payload[0]
    if verdict not in (CTRL_ITERATE, CTRL_WINDOW_CONVERGED, CTRL_TERMINATE):
        raise MalformedFrame(f"unknown control verdict {verdict:#x}")
    return verdict


class FrameParser:
    """Incremental parser turning a byte stream into frames."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> None:
        self._buf.extend(data)

    def next_frame(self) -> Frame | None:
        if len(self._buf) < _HEADER.size:
            return None
        tag, length = _HEADER.unpack_from(self._buf)
        if tag not in _VALID_TAGS:
            raise MalformedFrame(f"unknown frame tag {tag:#x}")
        total = _HEADER.size + length
        if len(self._buf) < total:
            return None
        payload = bytes(self._buf[_HEADER.size:total])
        del self._buf[:total]
        return Frame(tag, payload)

    @property
    def pending_bytes(self) -> int:
        return len(self._buf)


class SocketChannel:
    """Blocking framed I/O over a stream socket."""

    def __init__(self, sock: socket.socket, timeout: float = 30.0):
        self._sock = sock
        self._sock.settimeout(timeout)
        self._parser = FrameParser()

    def send(self, frame: Frame) -> None:
        try:
            self._sock.sendall(frame.encode())
        except OSError as exc:
            raise ChannelClosed(str(exc)) from exc

    def recv(self) -> Frame:
        while True:
            frame = self._parser.next_frame()
            if frame is not None:
                return frame
            try:
                data = self._sock.recv(65536)
            except socket.timeout as exc:
                raise ChannelClosed("receive timed out") from exc
            except OSError as exc:
                raise ChannelClosed(str(exc)) from exc
            if not data:
                raise ChannelClosed("peer closed the connection")
            self._parser.feed(data)

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass


class LoopbackChannel:
    """In-process channel that drives a participant endpoint synchronously.

    Frames are encoded to bytes, re-parsed, and handed to the endpoint; its
    replies are encoded and re-parsed again on the way back, so the full wire
    path is exercised without sockets.
    """

    def __init__(self, endpoint):
        self._endpoint = endpoint
        self._to_orchestrator = FrameParser()

    def send(self, frame: Frame) -> None:
        inbound = FrameParser()
        inbound.feed(frame.encode())
        parsed = inbound.next_frame()
        for reply in self._endpoint.handle_frame(parsed):
            self._to_orchestrator.feed(reply.encode())

    def recv(self) -> Frame:
        frame = self._to_orchestrator.next_frame()
        if frame is None:
            raise ChannelClosed("endpoint produced no reply")
        return frame

    def close(self) -> None:
        pass


class ParticipantEndpoint:
    """Participant-side protocol logic shared by loopback and TCP servers.

    Receives boundary samples, rebuilds the time-continuous boundary data
    (interpolating with the configured degree, or globally constant for
    single-value coupling), drives the local participant's checkpoint /
    solve / restore cycle, and returns the participant's output samples.
    """

    def __init__(self, participant, role: int, config_entries: dict[str, object],
                 scheme: str, degree: int, window_of):
        self.participant = participant
        self.role = role
        self.config_entries = config_entries
        self.scheme = scheme
        self.degree = degree
        self.window_of = window_of  # window index -> TimeWindow
        self.boundary_c0: np.ndarray | None = None
        self._last_boundary: np.ndarray | None = None
        self._done = False

    @property
    def done(self) -> bool:
        return self._done

    def handle_frame(self, frame: Frame) -> list[Frame]:
        if frame.tag == TAG_HELLO:
            parse_hello(frame)
            return [hello_frame(self.role)]
        if frame.tag == TAG_CONFIG:
            check_config(frame, self.config_entries)
            init = np.atleast_2d(self.participant.initial_output())
            return [
                config_frame(self.config_entries),
                window_data_frame(0, INIT_ITERATION, init),
            ]
        if frame.tag == TAG_WINDOW_DATA:
            return self._handle_window_data(frame)
        if frame.tag == TAG_CONTROL:
            return self._handle_control(frame)
        if frame.tag == TAG_BYE:
            self._done = True
            return []
        raise MalformedFrame(f"unexpected frame tag {frame.tag:#x}")

    def _handle_window_data(self, frame: Frame) -> list[Frame]:
        from .waveform import SampleSet, build_waveform, constant_extrapolation

        window_idx, iter_idx, values = parse_window_data(frame)
        if iter_idx == INIT_ITERATION:
            # peer's initial output = this side's boundary value at t=0
            self.boundary_c0 = values[-1].copy()
            return []
        window = self.window_of(window_idx)
        if iter_idx == 0:
            self.participant.checkpoint()
            if self.role == ROLE_DIRICHLET:
                # first iterate is constant extrapolation of the converged
                # end value, which is also this window's boundary t_ini value
                self.boundary_c0 = values[-1].copy()
        self._last_boundary = values[-1].copy()
        if self.scheme == "sc":
            wave = constant_extrapolation(values[-1], window)
        else:
            n = values.shape[0]
            samples = SampleSet(
                window,
                window.substep_times(n),
                np.vstack([self.boundary_c0[None, :], values]),
            )
            wave = build_waveform(samples, self.degree)
        result = self.participant.solve_window(window, wave)
        # single value coupling exchanges only the end-of-window value
        out = result.values[-1:] if self.scheme == "sc" else result.values[1:]
        return [window_data_frame(window_idx, iter_idx, out)]

    def _handle_control(self, frame: Frame) -> list[Frame]:
        verdict = parse_control(frame)
        if verdict == CTRL_ITERATE:
            self.participant.restore()
        elif verdict == CTRL_WINDOW_CONVERGED:
            if self.role == ROLE_NEUMANN and self._last_boundary is not None:
                # converged flux at window end = boundary t_ini value of the
                # next window (the temperature side gets its value with the
                # next window's constant-extrapolation data instead)
                self.boundary_c0 = self._last_boundary.copy()
            hook = getattr(self.participant, "on_window_converged", None)
            if hook is not None:
                hook()
        else:  # CTRL_TERMINATE
            self._done = True
            return [Frame(TAG_BYE, b"")]
        return []


class ParticipantSession:
    """Orchestrator-side view of one participant across any channel."""

    def __init__(self, channel, config_entries: dict[str, object]):
        self.channel = channel
        self.config_entries = config_entries
        self.peer_role: int | None = None
        self.initial_data: np.ndarray | None = None

    def handshake(self) -> None:
        self.channel.send(hello_frame(ROLE_ORCHESTRATOR))
        self.peer_role = parse_hello(self.channel.recv())
        self.channel.send(config_frame(self.config_entries))
        check_config(self.channel.recv(), self.config_entries)
        window_idx, iter_idx, values = parse_window_data(self.channel.recv())
        if iter_idx != INIT_ITERATION:
            raise MalformedFrame("expected initial-data frame after CONFIG")
        del window_idx
        self.initial_data = values[-1].copy()

    def send_peer_initial(self, values: np.ndarray) -> None:
        self.channel.send(window_data_frame(0, INIT_ITERATION, np.atleast_2d(values)))

    def solve(self, window_idx: int, iter_idx: int, boundary_values: np.ndarray) -> np.ndarray:
        """Send boundary substep values (n, m); receive output substep values."""
        self.channel.send(window_data_frame(window_idx, iter_idx, boundary_values))
        w_idx, i_idx, values = parse_window_data(self.channel.recv())
        if (w_idx, i_idx) != (window_idx, iter_idx):
            raise MalformedFrame(
                f"reply for window {w_idx} iteration {i_idx}, "
                f"expected {window_idx}/{iter_idx}"
            )
        return values

    def control(self, verdict: int) -> None:
        self.channel.send(control_frame(verdict))

    def terminate(self) -> None:
        self.channel.send(control_frame(CTRL_TERMINATE))
        try:
            frame = self.channel.recv()
            if frame.tag != TAG_BYE:
                raise MalformedFrame(f"expected BYE, got tag {frame.tag:#x}")
        finally:
            self.channel.close()


def serve_participant(sock: socket.socket, endpoint: ParticipantEndpoint,
                      timeout: float = 30.0) -> None:
    """Run the endpoint against a connected socket until TERMINATE/BYE."""
    channel = SocketChannel(sock, timeout=timeout)
    try:
        while not endpoint.done:
            frame = channel.recv()
            for reply in endpoint.handle_frame(frame):
                channel.send(reply)
    finally:
        channel.close()
